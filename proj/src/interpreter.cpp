#include "adaprec/interpreter.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>
#include <mutex>
#include <optional>
#include <unordered_map>

#include "adaprec/errors.hpp"
#include "adaprec/special.hpp"

namespace adaprec {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

inline double rnd(double x, Format fmt) { return fmt == Format::fp64 ? x : round_to_format(x, fmt); }

double apply_unary(UnaryOp op, double x) {
  switch (op) {
    case UnaryOp::neg: return -x;
    case UnaryOp::exp: return std::exp(x);
    case UnaryOp::log: return std::log(x);
    case UnaryOp::sqrt: return std::sqrt(x);
    case UnaryOp::digamma: return digamma(x);
    case UnaryOp::lgamma: return std::lgamma(x);
    case UnaryOp::reciprocal: return 1.0 / x;
  }
  return x;
}

inline double apply_binary(BinaryOp op, double a, double b) {
  switch (op) {
    case BinaryOp::add: return a + b;
    case BinaryOp::sub: return a - b;
    case BinaryOp::mul: return a * b;
    case BinaryOp::div: return a / b;
    case BinaryOp::max:
      if (std::isnan(a) || std::isnan(b)) return std::numeric_limits<double>::quiet_NaN();
      return a > b ? a : b;
  }
  return a;
}

// Strides of `shape` aligned to the trailing dimensions of a rank-`rank`
// broadcast result; broadcast dimensions get stride 0.
std::vector<std::int64_t> broadcast_strides(const Shape& shape, std::size_t rank) {
  std::vector<std::int64_t> out(rank, 0);
  const auto own = strides_of(shape);
  const std::size_t offset = rank - shape.size();
  for (std::size_t i = 0; i < shape.size(); ++i) out[offset + i] = shape[i] == 1 ? 0 : own[i];
  return out;
}

Tensor run_unary(UnaryOp op, const Tensor& x, Format fmt) {
  Tensor out(x.shape, std::vector<double>(x.size()));
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = rnd(apply_unary(op, x[i]), fmt);
  return out;
}

Tensor run_binary(BinaryOp op, const Tensor& a, const Tensor& b, const Shape& out_shape, Format fmt) {
  Tensor out(out_shape, std::vector<double>(element_count(out_shape)));
  if (a.shape == b.shape) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = rnd(apply_binary(op, a[i], b[i]), fmt);
    return out;
  }
  const std::size_t rank = out_shape.size();
  if (rank == 0) {
    out[0] = rnd(apply_binary(op, a[0], b[0]), fmt);
    return out;
  }
  const auto sa = broadcast_strides(a.shape, rank);
  const auto sb = broadcast_strides(b.shape, rank);
  const std::int64_t inner = out_shape[rank - 1];
  const std::int64_t ia = sa[rank - 1], ib = sb[rank - 1];
  std::vector<std::int64_t> idx(rank, 0);
  std::int64_t oa = 0, ob = 0;
  std::size_t o = 0;
  while (true) {
    for (std::int64_t j = 0; j < inner; ++j) {
      out[o++] = rnd(apply_binary(op, a.data[static_cast<std::size_t>(oa + j * ia)],
                                  b.data[static_cast<std::size_t>(ob + j * ib)]),
                     fmt);
    }
    // Advance the outer odometer (all but the last dimension).
    std::size_t d = rank - 1;
    while (d > 0) {
      --d;
      ++idx[d];
      oa += sa[d];
      ob += sb[d];
      if (idx[d] < out_shape[d]) break;
      oa -= sa[d] * out_shape[d];
      ob -= sb[d] * out_shape[d];
      idx[d] = 0;
      if (d == 0) return out;
    }
    if (rank == 1) return out;
  }
}

// Sequential row-major reduction; for a fixed kept index the reduced indices
// are visited in lexicographic order.
Tensor run_reduce(const Tensor& x, const std::vector<std::int64_t>& axes, const Shape& out_shape, Format fmt,
                  bool is_max) {
  const Format acc_fmt = accumulation_format(fmt);
  Tensor out(out_shape, std::vector<double>(element_count(out_shape),
                                            is_max ? -std::numeric_limits<double>::infinity() : 0.0));
  const std::size_t rank = x.shape.size();
  std::vector<bool> reduced(rank, false);
  for (auto ax : axes) reduced[static_cast<std::size_t>(ax)] = true;
  // Output stride for each input dimension (0 for reduced dimensions).
  std::vector<std::int64_t> ostride(rank, 0);
  {
    std::int64_t s = 1;
    for (std::size_t d = rank; d-- > 0;) {
      if (!reduced[d]) {
        ostride[d] = s;
        s *= x.shape[d];
      }
    }
  }
  std::vector<std::int64_t> idx(rank, 0);
  std::int64_t opos = 0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    double& acc = out.data[static_cast<std::size_t>(opos)];
    const double v = x[i];
    if (is_max) {
      if (std::isnan(v) || v > acc) acc = v;
    } else {
      acc = rnd(acc + v, acc_fmt);
    }
    for (std::size_t d = rank; d-- > 0;) {
      ++idx[d];
      opos += ostride[d];
      if (idx[d] < x.shape[d]) break;
      opos -= ostride[d] * x.shape[d];
      idx[d] = 0;
    }
  }
  return out;
}

Tensor run_transpose(const Tensor& x, const std::vector<std::int64_t>& perm, const Shape& out_shape) {
  Tensor out(out_shape, std::vector<double>(x.size()));
  const std::size_t rank = out_shape.size();
  if (rank == 0) {
    out[0] = x[0];
    return out;
  }
  const auto in_strides = strides_of(x.shape);
  std::vector<std::int64_t> src_stride(rank);
  for (std::size_t d = 0; d < rank; ++d) src_stride[d] = in_strides[static_cast<std::size_t>(perm[d])];
  std::vector<std::int64_t> idx(rank, 0);
  std::int64_t src = 0;
  for (std::size_t o = 0; o < out.size(); ++o) {
    out[o] = x.data[static_cast<std::size_t>(src)];
    for (std::size_t d = rank; d-- > 0;) {
      ++idx[d];
      src += src_stride[d];
      if (idx[d] < out_shape[d]) break;
      src -= src_stride[d] * out_shape[d];
      idx[d] = 0;
    }
  }
  return out;
}

// Iteration space of a contraction: output labels first, then the summed
// labels in order of first appearance.
struct ContractionPlan {
  std::vector<std::int64_t> out_extent, sum_extent;
  std::vector<std::int64_t> a_out, b_out, a_sum, b_sum;  // operand strides per label
  std::vector<std::int64_t> full_shape;                  // all labels, first-appearance order
  std::vector<std::int64_t> full_out, full_sum;          // strides into the materialised tensor
};

ContractionPlan plan_contraction(const std::string& spec, const Shape& a, const Shape& b) {
  const auto l = parse_contraction(spec);
  std::map<char, std::int64_t> extent;
  for (std::size_t i = 0; i < l.lhs.size(); ++i) extent[l.lhs[i]] = a[i];
  for (std::size_t i = 0; i < l.rhs.size(); ++i) extent[l.rhs[i]] = b[i];
  const auto as = strides_of(a), bs = strides_of(b);
  auto stride_in = [](const std::string& labels, const std::vector<std::int64_t>& strides, char c) -> std::int64_t {
    const auto p = labels.find(c);
    return p == std::string::npos ? 0 : strides[p];
  };
  std::string all;
  for (char c : l.lhs + l.rhs) {
    if (all.find(c) == std::string::npos) all += c;
  }
  std::string summed;
  for (char c : all) {
    if (l.out.find(c) == std::string::npos) summed += c;
  }
  ContractionPlan p;
  for (char c : all) p.full_shape.push_back(extent[c]);
  const auto fs = strides_of(p.full_shape);
  for (char c : l.out) {
    p.out_extent.push_back(extent[c]);
    p.a_out.push_back(stride_in(l.lhs, as, c));
    p.b_out.push_back(stride_in(l.rhs, bs, c));
    p.full_out.push_back(fs[all.find(c)]);
  }
  for (char c : summed) {
    p.sum_extent.push_back(extent[c]);
    p.a_sum.push_back(stride_in(l.lhs, as, c));
    p.b_sum.push_back(stride_in(l.rhs, bs, c));
    p.full_sum.push_back(fs[all.find(c)]);
  }
  return p;
}

// Calls fn(offset_a, offset_b, offset_full) for every multi-index of the given
// extents in row-major order.
template <class Fn>
void odometer(const std::vector<std::int64_t>& extent, const std::vector<std::int64_t>& sa,
              const std::vector<std::int64_t>& sb, const std::vector<std::int64_t>& sf, Fn&& fn) {
  const std::size_t rank = extent.size();
  std::vector<std::int64_t> idx(rank, 0);
  std::int64_t oa = 0, ob = 0, of = 0;
  while (true) {
    fn(oa, ob, of);
    std::size_t d = rank;
    while (true) {
      if (d == 0) return;
      --d;
      ++idx[d];
      oa += sa[d];
      ob += sb[d];
      of += sf[d];
      if (idx[d] < extent[d]) break;
      oa -= sa[d] * extent[d];
      ob -= sb[d] * extent[d];
      of -= sf[d] * extent[d];
      idx[d] = 0;
    }
  }
}

struct ContractionOutput {
  Tensor result;
  std::optional<Shape> intermediate;  // materialised product shape, if any
};

ContractionOutput run_contraction(const std::string& spec, const Tensor& a, const Tensor& b, const Shape& out_shape,
                                  Format fmt, ContractionMode mode) {
  const Format acc_fmt = accumulation_format(fmt);
  const auto p = plan_contraction(spec, a.shape, b.shape);
  ContractionOutput res{Tensor(out_shape, std::vector<double>(element_count(out_shape), 0.0)), std::nullopt};
  const double* ad = a.data.data();
  const double* bd = b.data.data();
  std::size_t o = 0;

  if (mode == ContractionMode::materialize && !p.sum_extent.empty()) {
    // Materialise every product, then reduce over the summed labels.
    std::vector<double> full(element_count(p.full_shape));
    odometer(p.out_extent, p.a_out, p.b_out, p.full_out, [&](std::int64_t oa, std::int64_t ob, std::int64_t of) {
      odometer(p.sum_extent, p.a_sum, p.b_sum, p.full_sum, [&](std::int64_t ia, std::int64_t ib, std::int64_t iff) {
        full[static_cast<std::size_t>(of + iff)] = rnd(ad[oa + ia] * bd[ob + ib], fmt);
      });
    });
    odometer(p.out_extent, p.a_out, p.b_out, p.full_out, [&](std::int64_t, std::int64_t, std::int64_t of) {
      double acc = 0.0;
      odometer(p.sum_extent, p.a_sum, p.b_sum, p.full_sum, [&](std::int64_t, std::int64_t, std::int64_t iff) {
        acc = rnd(acc + full[static_cast<std::size_t>(of + iff)], acc_fmt);
      });
      res.result[o++] = acc;
    });
    res.intermediate = p.full_shape;
    return res;
  }

  const std::vector<std::int64_t> no_full_out(p.out_extent.size(), 0), no_full_sum(p.sum_extent.size(), 0);
  odometer(p.out_extent, p.a_out, p.b_out, no_full_out, [&](std::int64_t oa, std::int64_t ob, std::int64_t) {
    double acc = 0.0;
    if (p.sum_extent.empty()) {
      acc = rnd(rnd(ad[oa] * bd[ob], fmt), acc_fmt);
    } else {
      odometer(p.sum_extent, p.a_sum, p.b_sum, no_full_sum, [&](std::int64_t ia, std::int64_t ib, std::int64_t) {
        acc = rnd(acc + rnd(ad[oa + ia] * bd[ob + ib], fmt), acc_fmt);
      });
    }
    res.result[o++] = acc;
  });
  return res;
}

std::string node_label(const Node& n) { return "%" + std::to_string(n.id) + " " + std::string(to_string(n.kind())); }

}  // namespace

double CostModel::weight(Format fmt) const {
  auto it = per_element_weight.find(fmt);
  if (it == per_element_weight.end()) throw ConfigError("cost model has no weight for " + std::string(to_string(fmt)));
  return it->second;
}

void CostModel::validate() const {
  for (Format f : kAllFormats) {
    if (!(weight(f) > 0.0)) throw ConfigError("cost weights must be positive");
  }
  if (!(cast_weight > 0.0)) throw ConfigError("cast weight must be positive");
  if (!(weight(Format::fp64) > weight(Format::fp32) && weight(Format::fp32) >= weight(Format::tf32) &&
        weight(Format::tf32) >= weight(Format::fp16))) {
    throw ConfigError("cost weights must decrease as formats narrow (fp64 > fp32 >= tf32 >= fp16)");
  }
}

std::string_view to_string(ContractionMode mode) {
  return mode == ContractionMode::fused ? "fused" : "materialize";
}

ContractionMode contraction_mode_from_string(std::string_view name) {
  if (name == "fused" || name == "fused_contraction") return ContractionMode::fused;
  if (name == "materialize" || name == "baseline" || name == "materialize_then_reduce") {
    return ContractionMode::materialize;
  }
  throw ConfigError("unknown contraction mode '" + std::string(name) + "'");
}

double ExecutionProfile::modeled_cost() const {
  double total = 0.0;
  for (const auto& [id, c] : per_node_modeled_cost) total += c;
  return total;
}

const Tensor& ExecutionResult::output(std::string_view name) const {
  for (std::size_t i = 0; i < output_names.size(); ++i) {
    if (output_names[i] == name) return outputs[i];
  }
  throw ConfigError("graph has no output named '" + std::string(name) + "'");
}

Format accumulation_format(Format fmt) { return fmt == Format::tf32 ? Format::fp32 : fmt; }

std::uint64_t node_work(const Graph& graph, NodeId id) {
  const Node& n = graph.node(id);
  switch (n.kind()) {
    case OpKind::input:
    case OpKind::constant:
      return 0;
    case OpKind::reduce_sum:
    case OpKind::reduce_max:
      return element_count(graph.node(n.operands[0]).out_shape);
    case OpKind::contraction: {
      const auto& p = std::get<ContractionParams>(n.params);
      const auto plan = plan_contraction(p.spec, graph.node(n.operands[0]).out_shape,
                                         graph.node(n.operands[1]).out_shape);
      return element_count(plan.full_shape);
    }
    default:
      return element_count(n.out_shape);
  }
}

std::map<NodeId, double> modeled_node_costs(const Graph& graph, const PrecisionConfig& config, const CostModel& cost) {
  check_config(graph, config);
  std::map<NodeId, double> out;
  std::map<std::pair<NodeId, Format>, bool> converted;
  for (const Node& n : graph.nodes()) {
    if (n.kind() == OpKind::input || n.kind() == OpKind::constant) continue;
    const Format fmt = node_format(graph, config, n.id);
    double c = 0.0;
    if (n.kind() == OpKind::cast) {
      c += static_cast<double>(element_count(n.out_shape)) * cost.cast_weight;
    } else {
      c += static_cast<double>(node_work(graph, n.id)) * cost.weight(fmt);
      for (NodeId op : n.operands) {
        if (node_format(graph, config, op) != fmt && !converted[{op, fmt}]) {
          converted[{op, fmt}] = true;
          c += static_cast<double>(element_count(graph.node(op).out_shape)) * cost.cast_weight;
        }
      }
    }
    out[n.id] = c;
  }
  return out;
}

double modeled_cost(const Graph& graph, const PrecisionConfig& config, const CostModel& cost) {
  double total = 0.0;
  for (const auto& [id, c] : modeled_node_costs(graph, config, cost)) total += c;
  return total;
}

ExecutionResult execute(const Graph& graph, const TensorMap& inputs, const PrecisionConfig& config,
                        ContractionMode mode, const CostModel& cost) {
  check_config(graph, config);
  const auto t0 = Clock::now();
  const auto& nodes = graph.nodes();
  const std::size_t count = nodes.size();

  std::unordered_map<NodeId, std::size_t> pos;
  for (std::size_t i = 0; i < count; ++i) pos[nodes[i].id] = i;

  // Last step at which each tensor is read; outputs live to the end.
  std::vector<std::size_t> last_use(count, 0);
  std::map<std::pair<std::size_t, Format>, std::size_t> cast_last_use;
  std::vector<Format> fmt(count);
  for (std::size_t i = 0; i < count; ++i) {
    fmt[i] = node_format(graph, config, nodes[i].id);
    last_use[i] = i;
  }
  for (std::size_t i = 0; i < count; ++i) {
    for (NodeId op : nodes[i].operands) {
      const std::size_t p = pos[op];
      last_use[p] = std::max(last_use[p], i);
      if (nodes[i].kind() != OpKind::cast && fmt[p] != fmt[i]) {
        auto& lu = cast_last_use[{p, fmt[i]}];
        lu = std::max(lu, i);
      }
    }
  }
  for (const auto& o : graph.outputs()) last_use[pos[o.node]] = count;

  ExecutionResult result;
  ExecutionProfile& prof = result.profile;
  prof.per_node_modeled_cost = modeled_node_costs(graph, config, cost);
  std::uint64_t live = 0;
  auto note = [&](std::int64_t step, std::string label) {
    prof.peak_live_bytes = std::max(prof.peak_live_bytes, live);
    prof.trace.push_back({seconds_since(t0), step, live, std::move(label)});
  };

  std::vector<std::optional<Tensor>> values(count);
  std::map<std::pair<std::size_t, Format>, Tensor> casts;
  std::vector<std::uint64_t> held(count, 0);

  // Inputs and constants are resident before the first node runs.
  for (std::size_t i = 0; i < count; ++i) {
    const Node& n = nodes[i];
    if (const auto* p = std::get_if<InputParams>(&n.params)) {
      auto it = inputs.find(p->name);
      if (it == inputs.end()) throw ConfigError("missing input '" + p->name + "' for graph '" + graph.name() + "'");
      if (it->second.shape != n.out_shape) {
        throw ShapeError("input '" + p->name + "' has shape " + shape_to_string(it->second.shape) + ", expected " +
                         shape_to_string(n.out_shape));
      }
      Tensor t = it->second;
      round_in_place(t.data, p->format);
      values[i] = std::move(t);
    } else if (const auto* c = std::get_if<ConstantParams>(&n.params)) {
      values[i] = c->value;
    } else {
      continue;
    }
    held[i] = bytes_of(n.out_shape, fmt[i]);
    live += held[i];
    prof.allocations.push_back({n.id, node_label(n), held[i], false});
  }
  note(-1, "inputs");

  for (std::size_t i = 0; i < count; ++i) {
    const Node& n = nodes[i];
    if (n.kind() == OpKind::input || n.kind() == OpKind::constant) continue;
    const auto tn = Clock::now();
    const Format f = fmt[i];

    // Gather operands at this node's format, converting once per (producer, format).
    std::vector<const Tensor*> ops;
    for (NodeId op : n.operands) {
      const std::size_t p = pos[op];
      if (n.kind() == OpKind::cast || fmt[p] == f) {
        ops.push_back(&*values[p]);
        continue;
      }
      auto key = std::make_pair(p, f);
      auto it = casts.find(key);
      if (it == casts.end()) {
        const auto tc = Clock::now();
        Tensor conv = *values[p];
        round_in_place(conv.data, f);
        const std::uint64_t b = bytes_of(conv.shape, f);
        it = casts.emplace(key, std::move(conv)).first;
        live += b;
        prof.allocations.push_back({n.id, "cast %" + std::to_string(op) + "->" + std::string(to_string(f)), b, false});
        prof.casts.push_back({op, n.id, fmt[p], f, element_count(graph.node(op).out_shape), b, seconds_since(tc)});
        ++prof.cast_count;
        prof.cast_bytes += b;
        prof.cast_elements += prof.casts.back().elements;
        note(static_cast<std::int64_t>(i), "cast %" + std::to_string(op));
      }
      ops.push_back(&it->second);
    }

    Tensor out;
    std::uint64_t transient = 0;
    Shape transient_shape;
    switch (n.kind()) {
      case OpKind::unary:
        out = run_unary(std::get<UnaryParams>(n.params).op, *ops[0], f);
        break;
      case OpKind::binary:
        out = run_binary(std::get<BinaryParams>(n.params).op, *ops[0], *ops[1], n.out_shape, f);
        break;
      case OpKind::reduce_sum:
        out = run_reduce(*ops[0], std::get<ReduceSumParams>(n.params).axes, n.out_shape, f, false);
        break;
      case OpKind::reduce_max:
        out = run_reduce(*ops[0], std::get<ReduceMaxParams>(n.params).axes, n.out_shape, f, true);
        break;
      case OpKind::contraction: {
        auto r = run_contraction(std::get<ContractionParams>(n.params).spec, *ops[0], *ops[1], n.out_shape, f, mode);
        out = std::move(r.result);
        if (r.intermediate) {
          transient = bytes_of(*r.intermediate, f);
          transient_shape = *r.intermediate;
        }
        break;
      }
      case OpKind::transpose:
        out = run_transpose(*ops[0], std::get<TransposeParams>(n.params).perm, n.out_shape);
        break;
      case OpKind::reshape:
        out = Tensor(n.out_shape, ops[0]->data);
        break;
      case OpKind::cast:
        out = *ops[0];
        round_in_place(out.data, f);
        break;
      default:
        break;
    }
    if (n.kind() == OpKind::cast) {
      ++prof.cast_count;
      prof.cast_bytes += bytes_of(n.out_shape, f);
      prof.cast_elements += out.size();
    }

    held[i] = bytes_of(n.out_shape, f);
    live += held[i];
    prof.allocations.push_back({n.id, node_label(n), held[i], false});
    if (transient) {
      live += transient;
      prof.allocations.push_back({n.id, node_label(n) + " intermediate " + shape_to_string(transient_shape), transient, true});
      note(static_cast<std::int64_t>(i), node_label(n) + " materialised product");
      live -= transient;
    }
    note(static_cast<std::int64_t>(i), node_label(n));
    values[i] = std::move(out);

    // Release tensors whose last reader has now run.
    for (NodeId op : n.operands) {
      const std::size_t p = pos[op];
      if (last_use[p] == i && values[p]) {
        live -= held[p];
        values[p].reset();
      }
      auto key = std::make_pair(p, f);
      auto cl = cast_last_use.find(key);
      if (cl != cast_last_use.end() && cl->second == i) {
        auto it = casts.find(key);
        if (it != casts.end()) {
          live -= bytes_of(it->second.shape, f);
          casts.erase(it);
        }
      }
    }
    if (last_use[i] == i) {
      live -= held[i];
      values[i].reset();
    }
    note(static_cast<std::int64_t>(i), "release after " + node_label(n));
    prof.per_node_elapsed[n.id] = seconds_since(tn);
  }

  for (const auto& o : graph.outputs()) {
    result.output_names.push_back(o.name);
    result.outputs.push_back(*values[pos[o.node]]);
    if (!result.outputs.back().all_finite()) result.nonfinite = true;
  }
  prof.total_seconds = seconds_since(t0);
  return result;
}

Measurement measure(const Graph& graph, const TensorMap& inputs, const PrecisionConfig& config, int repetitions,
                    ContractionMode mode, const CostModel& cost) {
  if (repetitions < 3) throw ConfigError("measure() needs at least 3 repetitions");
  static std::mutex serial;
  std::lock_guard lock(serial);

  std::vector<double> totals;
  std::map<NodeId, std::vector<double>> per_node;
  std::vector<std::vector<double>> cast_secs;
  ExecutionProfile last;
  for (int r = 0; r < repetitions; ++r) {
    const auto t0 = Clock::now();
    auto res = execute(graph, inputs, config, mode, cost);
    totals.push_back(seconds_since(t0));
    for (const auto& [id, s] : res.profile.per_node_elapsed) per_node[id].push_back(s);
    cast_secs.resize(res.profile.casts.size());
    for (std::size_t c = 0; c < res.profile.casts.size(); ++c) cast_secs[c].push_back(res.profile.casts[c].seconds);
    last = std::move(res.profile);
  }
  auto median = [](std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t m = v.size() / 2;
    return v.size() % 2 ? v[m] : 0.5 * (v[m - 1] + v[m]);
  };
  Measurement m;
  m.wall_seconds = median(totals);
  m.modeled_cost = modeled_cost(graph, config, cost);
  m.median_profile = std::move(last);
  for (auto& [id, v] : per_node) m.median_profile.per_node_elapsed[id] = median(v);
  for (std::size_t c = 0; c < cast_secs.size(); ++c) m.median_profile.casts[c].seconds = median(cast_secs[c]);
  m.median_profile.total_seconds = m.wall_seconds;
  return m;
}

}  // namespace adaprec
