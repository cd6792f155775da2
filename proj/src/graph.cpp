#include "adaprec/graph.hpp"

#include <algorithm>
#include <bit>
#include <cstdio>
#include <queue>
#include <set>
#include <sstream>
#include <unordered_set>

#include "adaprec/errors.hpp"

namespace adaprec {

namespace {

template <class... Ts>
struct Overloaded : Ts... {
  using Ts::operator()...;
};
template <class... Ts>
Overloaded(Ts...) -> Overloaded<Ts...>;

std::uint64_t fnv1a(std::string_view text, std::uint64_t h = 0xcbf29ce484222325ULL) {
  for (unsigned char c : text) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  return h;
}

std::string hex64(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::string join(std::span<const std::int64_t> values) {
  std::string out;
  for (std::size_t i = 0; i < values.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(values[i]);
  }
  return out;
}

std::string node_where(const Node& n) { return "node %" + std::to_string(n.id) + " (" + std::string(to_string(n.kind())) + ")"; }

Shape broadcast_shapes(const Node& n, const Shape& a, const Shape& b) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::int64_t ea = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::int64_t eb = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (ea != eb && ea != 1 && eb != 1) {
      throw ShapeError(node_where(n) + ": shapes " + shape_to_string(a) + " and " + shape_to_string(b) +
                       " are not broadcast-compatible");
    }
    out[i] = std::max(ea, eb);
  }
  return out;
}

Shape reduced_shape(const Node& n, const Shape& in, const std::vector<std::int64_t>& axes) {
  std::vector<bool> drop(in.size(), false);
  for (std::int64_t ax : axes) {
    if (ax < 0 || ax >= static_cast<std::int64_t>(in.size())) {
      throw ShapeError(node_where(n) + ": reduction axis " + std::to_string(ax) + " out of range for shape " +
                       shape_to_string(in));
    }
    if (drop[static_cast<std::size_t>(ax)]) throw ShapeError(node_where(n) + ": repeated reduction axis");
    drop[static_cast<std::size_t>(ax)] = true;
  }
  Shape out;
  for (std::size_t i = 0; i < in.size(); ++i) {
    if (!drop[i]) out.push_back(in[i]);
  }
  return out;
}

Shape contraction_shape(const Node& n, const std::string& spec, const Shape& a, const Shape& b) {
  const auto labels = parse_contraction(spec);
  if (labels.lhs.size() != a.size() || labels.rhs.size() != b.size()) {
    throw ShapeError(node_where(n) + ": contraction '" + spec + "' does not match operand shapes " +
                     shape_to_string(a) + " and " + shape_to_string(b));
  }
  std::map<char, std::int64_t> extent;
  auto bind = [&](const std::string& ls, const Shape& s) {
    for (std::size_t i = 0; i < ls.size(); ++i) {
      auto [it, fresh] = extent.emplace(ls[i], s[i]);
      if (!fresh && it->second != s[i]) {
        throw ShapeError(node_where(n) + ": label '" + std::string(1, ls[i]) + "' bound to extents " +
                         std::to_string(it->second) + " and " + std::to_string(s[i]));
      }
    }
  };
  bind(labels.lhs, a);
  bind(labels.rhs, b);
  Shape out;
  for (char c : labels.out) out.push_back(extent.at(c));
  return out;
}

Shape infer_shape(const Node& n, const std::vector<const Shape*>& ops) {
  auto need = [&](std::size_t count) {
    if (ops.size() != count) {
      throw GraphError(node_where(n) + ": expected " + std::to_string(count) + " operands, got " +
                       std::to_string(ops.size()));
    }
  };
  return std::visit(
      Overloaded{
          [&](const InputParams& p) {
            need(0);
            (void)element_count(p.shape);
            return p.shape;
          },
          [&](const ConstantParams& p) {
            need(0);
            return p.value.shape;
          },
          [&](const UnaryParams&) {
            need(1);
            return *ops[0];
          },
          [&](const BinaryParams&) {
            need(2);
            return broadcast_shapes(n, *ops[0], *ops[1]);
          },
          [&](const ReduceSumParams& p) {
            need(1);
            return reduced_shape(n, *ops[0], p.axes);
          },
          [&](const ReduceMaxParams& p) {
            need(1);
            return reduced_shape(n, *ops[0], p.axes);
          },
          [&](const ContractionParams& p) {
            need(2);
            return contraction_shape(n, p.spec, *ops[0], *ops[1]);
          },
          [&](const TransposeParams& p) {
            need(1);
            const Shape& in = *ops[0];
            std::vector<std::int64_t> sorted = p.perm;
            std::sort(sorted.begin(), sorted.end());
            bool ok = sorted.size() == in.size();
            for (std::size_t i = 0; ok && i < sorted.size(); ++i) ok = sorted[i] == static_cast<std::int64_t>(i);
            if (!ok) throw ShapeError(node_where(n) + ": invalid permutation for shape " + shape_to_string(in));
            Shape out(in.size());
            for (std::size_t i = 0; i < in.size(); ++i) out[i] = in[static_cast<std::size_t>(p.perm[i])];
            return out;
          },
          [&](const ReshapeParams& p) {
            need(1);
            if (element_count(p.shape) != element_count(*ops[0])) {
              throw ShapeError(node_where(n) + ": cannot reshape " + shape_to_string(*ops[0]) + " to " +
                               shape_to_string(p.shape));
            }
            return p.shape;
          },
          [&](const CastParams&) {
            need(1);
            return *ops[0];
          },
      },
      n.params);
}

std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string params_text(const Node& n) {
  return std::visit(
      Overloaded{
          [](const InputParams& p) { return p.name + "," + std::string(to_string(p.format)); },
          [](const ConstantParams& p) {
            std::string s = std::string(to_string(p.format));
            if (p.value.size() <= 4) {
              s += ",{";
              for (std::size_t i = 0; i < p.value.size(); ++i) {
                if (i) s += ",";
                s += format_double(p.value[i]);
              }
              s += "}";
            } else {
              std::uint64_t h = 0xcbf29ce484222325ULL;
              for (double v : p.value.data) h = fnv1a(hex64(std::bit_cast<std::uint64_t>(v)), h);
              s += ",#" + hex64(h);
            }
            return s;
          },
          [](const UnaryParams& p) { return std::string(to_string(p.op)); },
          [](const BinaryParams& p) { return std::string(to_string(p.op)); },
          [](const ReduceSumParams& p) { return "axes=" + join(p.axes); },
          [](const ReduceMaxParams& p) { return "axes=" + join(p.axes); },
          [](const ContractionParams& p) { return p.spec; },
          [](const TransposeParams& p) { return "perm=" + join(p.perm); },
          [](const ReshapeParams& p) { return "shape=" + join(p.shape); },
          [](const CastParams& p) { return std::string(to_string(p.target)); },
      },
      n.params);
}

// Exact constant payload for hashing (the dump abbreviates large constants).
std::string constant_payload(const Node& n) {
  const auto* p = std::get_if<ConstantParams>(&n.params);
  if (!p) return {};
  std::string s;
  for (double v : p->value.data) s += hex64(std::bit_cast<std::uint64_t>(v));
  return s;
}

}  // namespace

std::string_view to_string(OpKind kind) {
  switch (kind) {
    case OpKind::input: return "input";
    case OpKind::constant: return "constant";
    case OpKind::unary: return "unary";
    case OpKind::binary: return "binary";
    case OpKind::reduce_sum: return "reduce_sum";
    case OpKind::reduce_max: return "reduce_max";
    case OpKind::contraction: return "contraction";
    case OpKind::transpose: return "transpose";
    case OpKind::reshape: return "reshape";
    case OpKind::cast: return "cast";
  }
  return "?";
}

std::string_view to_string(UnaryOp op) {
  switch (op) {
    case UnaryOp::neg: return "neg";
    case UnaryOp::exp: return "exp";
    case UnaryOp::log: return "log";
    case UnaryOp::sqrt: return "sqrt";
    case UnaryOp::digamma: return "digamma";
    case UnaryOp::lgamma: return "lgamma";
    case UnaryOp::reciprocal: return "reciprocal";
  }
  return "?";
}

std::string_view to_string(BinaryOp op) {
  switch (op) {
    case BinaryOp::add: return "add";
    case BinaryOp::sub: return "sub";
    case BinaryOp::mul: return "mul";
    case BinaryOp::div: return "div";
    case BinaryOp::max: return "max";
  }
  return "?";
}

OpKind Node::kind() const {
  static constexpr OpKind kByIndex[] = {OpKind::input,      OpKind::constant,    OpKind::unary,
                                        OpKind::binary,     OpKind::reduce_sum,  OpKind::reduce_max,
                                        OpKind::contraction, OpKind::transpose, OpKind::reshape,
                                        OpKind::cast};
  return kByIndex[params.index()];
}

bool Node::is_compute() const {
  const OpKind k = kind();
  return k != OpKind::input && k != OpKind::constant && k != OpKind::cast;
}

ContractionLabels parse_contraction(std::string_view spec) {
  const auto arrow = spec.find("->");
  const auto comma = spec.find(',');
  if (arrow == std::string_view::npos || comma == std::string_view::npos || comma > arrow) {
    throw GraphError("malformed contraction spec '" + std::string(spec) + "'");
  }
  ContractionLabels l{std::string(spec.substr(0, comma)), std::string(spec.substr(comma + 1, arrow - comma - 1)),
                      std::string(spec.substr(arrow + 2))};
  auto check = [&](const std::string& s) {
    std::set<char> seen;
    for (char c : s) {
      if (c < 'a' || c > 'z' || !seen.insert(c).second) {
        throw GraphError("contraction spec '" + std::string(spec) + "' has an invalid or repeated label");
      }
    }
  };
  check(l.lhs);
  check(l.rhs);
  check(l.out);
  for (char c : l.out) {
    if (l.lhs.find(c) == std::string::npos && l.rhs.find(c) == std::string::npos) {
      throw GraphError("contraction spec '" + std::string(spec) + "' has an output label absent from both operands");
    }
  }
  return l;
}

const Node& Graph::node(NodeId id) const {
  auto it = index_.find(id);
  if (it == index_.end()) throw GraphError("unknown node id " + std::to_string(id));
  return nodes_[it->second];
}

const std::vector<NodeId>& Graph::consumers(NodeId id) const {
  static const std::vector<NodeId> kNone;
  auto it = consumers_.find(id);
  return it == consumers_.end() ? kNone : it->second;
}

std::vector<NodeId> Graph::compute_nodes() const {
  std::vector<NodeId> ids;
  for (const Node& n : nodes_) {
    if (n.is_compute()) ids.push_back(n.id);
  }
  std::sort(ids.begin(), ids.end());
  return ids;
}

bool Graph::is_output(NodeId id) const {
  return std::any_of(outputs_.begin(), outputs_.end(), [id](const GraphOutput& o) { return o.node == id; });
}

std::string Graph::dump() const {
  std::ostringstream os;
  os << "graph " << name_ << " fingerprint=" << fingerprint_ << "\n";
  for (const Node& n : nodes_) {
    os << "%" << n.id << " = " << to_string(n.kind()) << "[" << params_text(n) << "](";
    for (std::size_t i = 0; i < n.operands.size(); ++i) os << (i ? ", %" : "%") << n.operands[i];
    os << ") : " << shape_to_string(n.out_shape) << "\n";
  }
  for (const auto& o : outputs_) os << "output " << o.name << " = %" << o.node << "\n";
  return os.str();
}

Graph validate(const GraphDraft& draft) {
  std::unordered_map<NodeId, std::size_t> pos;
  for (std::size_t i = 0; i < draft.nodes.size(); ++i) {
    if (!pos.emplace(draft.nodes[i].id, i).second) {
      throw GraphError("duplicate node id " + std::to_string(draft.nodes[i].id));
    }
  }
  for (const Node& n : draft.nodes) {
    for (NodeId op : n.operands) {
      if (!pos.count(op)) throw GraphError(node_where(n) + ": unknown operand id " + std::to_string(op));
    }
  }
  if (draft.outputs.empty()) throw GraphError("graph '" + draft.name + "' declares no outputs");
  for (const auto& o : draft.outputs) {
    if (!pos.count(o.node)) throw GraphError("output '" + o.name + "' refers to unknown node " + std::to_string(o.node));
  }

  // Kahn's algorithm, preferring the draft order among ready nodes.
  std::vector<int> pending(draft.nodes.size(), 0);
  std::vector<std::vector<std::size_t>> users(draft.nodes.size());
  for (std::size_t i = 0; i < draft.nodes.size(); ++i) {
    for (NodeId op : draft.nodes[i].operands) {
      ++pending[i];
      users[pos[op]].push_back(i);
    }
  }
  std::priority_queue<std::size_t, std::vector<std::size_t>, std::greater<>> ready;
  for (std::size_t i = 0; i < draft.nodes.size(); ++i) {
    if (pending[i] == 0) ready.push(i);
  }
  std::vector<std::size_t> order;
  while (!ready.empty()) {
    const std::size_t i = ready.top();
    ready.pop();
    order.push_back(i);
    for (std::size_t u : users[i]) {
      if (--pending[u] == 0) ready.push(u);
    }
  }
  if (order.size() != draft.nodes.size()) {
    for (std::size_t i = 0; i < draft.nodes.size(); ++i) {
      if (pending[i] > 0) throw GraphError("cycle detected through node %" + std::to_string(draft.nodes[i].id));
    }
  }

  // Backward reachability from the outputs.
  std::vector<bool> live(draft.nodes.size(), false);
  std::vector<std::size_t> stack;
  for (const auto& o : draft.outputs) stack.push_back(pos[o.node]);
  while (!stack.empty()) {
    const std::size_t i = stack.back();
    stack.pop_back();
    if (live[i]) continue;
    live[i] = true;
    for (NodeId op : draft.nodes[i].operands) stack.push_back(pos[op]);
  }

  // Shapes are checked on every node, including ones about to be dropped.
  std::unordered_map<NodeId, Shape> shapes;
  for (std::size_t i : order) {
    const Node& n = draft.nodes[i];
    std::vector<const Shape*> op_shapes;
    for (NodeId op : n.operands) op_shapes.push_back(&shapes.at(op));
    shapes[n.id] = infer_shape(n, op_shapes);
  }

  Graph g;
  g.name_ = draft.name;
  g.outputs_ = draft.outputs;
  std::unordered_map<NodeId, std::string> keys;
  for (std::size_t i : order) {
    const Node& src = draft.nodes[i];
    if (!live[i] && src.kind() != OpKind::input) continue;
    Node n = src;
    n.out_shape = shapes.at(n.id);

    std::string key = std::string(to_string(n.kind())) + "|" + params_text(n) + "|" + constant_payload(n) + "|" +
                      shape_to_string(n.out_shape) + "|";
    for (NodeId op : n.operands) key += keys.at(op) + ";";
    keys[n.id] = hex64(fnv1a(key));

    if (n.kind() == OpKind::input) {
      for (NodeId other : g.inputs_) {
        if (std::get<InputParams>(g.node(other).params).name == std::get<InputParams>(n.params).name) {
          throw GraphError("duplicate input name '" + std::get<InputParams>(n.params).name + "'");
        }
      }
      g.inputs_.push_back(n.id);
    }
    for (NodeId op : n.operands) {
      auto& c = g.consumers_[op];
      if (std::find(c.begin(), c.end(), n.id) == c.end()) c.push_back(n.id);
    }
    g.index_[n.id] = g.nodes_.size();
    g.nodes_.push_back(std::move(n));
  }

  std::uint64_t h = fnv1a("adaprec-graph-v1");
  std::vector<std::string> input_keys;
  for (NodeId id : g.inputs_) input_keys.push_back(keys.at(id));
  std::sort(input_keys.begin(), input_keys.end());
  for (const auto& k : input_keys) h = fnv1a("in:" + k, h);
  for (const auto& o : g.outputs_) h = fnv1a("out:" + o.name + "=" + keys.at(o.node), h);
  g.fingerprint_ = hex64(h);
  return g;
}

NodeId GraphBuilder::push(NodeParams params, std::vector<NodeId> operands) {
  Node n;
  n.id = static_cast<NodeId>(draft_.nodes.size());
  n.params = std::move(params);
  n.operands = std::move(operands);
  draft_.nodes.push_back(std::move(n));
  return draft_.nodes.back().id;
}

NodeId GraphBuilder::input(std::string name, Shape shape, Format fmt) {
  return push(InputParams{std::move(name), std::move(shape), fmt}, {});
}
NodeId GraphBuilder::constant(Tensor value, Format fmt) {
  for (double& v : value.data) v = round_to_format(v, fmt);
  return push(ConstantParams{std::move(value), fmt}, {});
}
NodeId GraphBuilder::unary(UnaryOp op, NodeId x) { return push(UnaryParams{op}, {x}); }
NodeId GraphBuilder::binary(BinaryOp op, NodeId a, NodeId b) { return push(BinaryParams{op}, {a, b}); }
NodeId GraphBuilder::reduce_sum(NodeId x, std::vector<std::int64_t> axes) {
  return push(ReduceSumParams{std::move(axes)}, {x});
}
NodeId GraphBuilder::reduce_max(NodeId x, std::vector<std::int64_t> axes) {
  return push(ReduceMaxParams{std::move(axes)}, {x});
}
NodeId GraphBuilder::contract(std::string spec, NodeId a, NodeId b) {
  return push(ContractionParams{std::move(spec)}, {a, b});
}
NodeId GraphBuilder::transpose(NodeId x, std::vector<std::int64_t> perm) {
  return push(TransposeParams{std::move(perm)}, {x});
}
NodeId GraphBuilder::reshape(NodeId x, Shape shape) { return push(ReshapeParams{std::move(shape)}, {x}); }
NodeId GraphBuilder::cast(NodeId x, Format target) { return push(CastParams{target}, {x}); }
void GraphBuilder::output(std::string name, NodeId node) { draft_.outputs.push_back({std::move(name), node}); }

Format PrecisionConfig::at(NodeId id) const {
  auto it = assignment_.find(id);
  if (it == assignment_.end()) throw ConfigError("precision config has no entry for node %" + std::to_string(id));
  return it->second;
}

void PrecisionConfig::set(NodeId id, Format fmt) { assignment_[id] = fmt; }

std::map<Format, int> PrecisionConfig::histogram() const {
  std::map<Format, int> h;
  for (Format f : kAllFormats) h[f] = 0;
  for (const auto& [id, f] : assignment_) ++h[f];
  return h;
}

PrecisionConfig uniform_config(const Graph& graph, Format fmt) {
  std::map<NodeId, Format> a;
  for (NodeId id : graph.compute_nodes()) a[id] = fmt;
  return PrecisionConfig(std::move(a));
}

void check_config(const Graph& graph, const PrecisionConfig& config) {
  const auto ids = graph.compute_nodes();
  if (ids.size() != config.size()) {
    throw ConfigError("precision config covers " + std::to_string(config.size()) + " nodes but graph '" +
                      graph.name() + "' has " + std::to_string(ids.size()) + " compute nodes");
  }
  for (NodeId id : ids) {
    if (!config.contains(id)) throw ConfigError("precision config is missing compute node %" + std::to_string(id));
  }
}

Format node_format(const Graph& graph, const PrecisionConfig& config, NodeId id) {
  const Node& n = graph.node(id);
  if (const auto* p = std::get_if<InputParams>(&n.params)) return p->format;
  if (const auto* p = std::get_if<ConstantParams>(&n.params)) return p->format;
  if (const auto* p = std::get_if<CastParams>(&n.params)) return p->target;
  return config.at(id);
}

}  // namespace adaprec
