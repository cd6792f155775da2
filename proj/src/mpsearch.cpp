#include "adaprec/mpsearch.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <limits>
#include <set>
#include <sstream>

#include <json.hpp>

#include "adaprec/errors.hpp"

namespace adaprec {

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

std::vector<Format> config_key(const PrecisionConfig& config) {
  std::vector<Format> key;
  key.reserve(config.size());
  for (const auto& [id, f] : config.assignment()) key.push_back(f);
  return key;
}

std::vector<NodeId> compute_neighbours(const Graph& graph, NodeId id) {
  std::set<NodeId> out;
  for (NodeId op : graph.node(id).operands) {
    if (graph.node(op).is_compute()) out.insert(op);
  }
  for (NodeId c : graph.consumers(id)) {
    if (graph.node(c).is_compute()) out.insert(c);
  }
  return {out.begin(), out.end()};
}

std::string fmt_name(Format f) { return std::string(to_string(f)); }

}  // namespace

double relative_error(std::span<const Tensor> reference, std::span<const Tensor> candidate, double tau) {
  if (reference.size() != candidate.size()) {
    throw ShapeError("relative_error: " + std::to_string(reference.size()) + " reference outputs vs " +
                     std::to_string(candidate.size()) + " candidate outputs");
  }
  double diff2 = 0.0;
  double ref2 = 0.0;
  for (std::size_t t = 0; t < reference.size(); ++t) {
    const Tensor& yh = reference[t];
    const Tensor& y = candidate[t];
    if (yh.shape != y.shape) {
      throw ShapeError("relative_error: shapes " + shape_to_string(yh.shape) + " and " + shape_to_string(y.shape) +
                       " differ");
    }
    for (std::size_t i = 0; i < yh.size(); ++i) {
      const double a = yh[i];
      const double b = y[i];
      if (!std::isfinite(a)) {
        if (!(a == b)) return kInf;
        continue;
      }
      if (!std::isfinite(b)) return kInf;
      diff2 += (a - b) * (a - b);
      ref2 += a * a;
    }
  }
  return std::sqrt(diff2) / std::max(std::sqrt(ref2), tau);
}

std::string_view to_string(CostSource source) { return source == CostSource::model ? "model" : "wallclock"; }

CostSource cost_source_from_string(std::string_view name) {
  if (name == "model") return CostSource::model;
  if (name == "wallclock") return CostSource::wallclock;
  throw ConfigError("unknown cost source '" + std::string(name) + "'");
}

void SearchOptions::validate() const {
  if (formats.size() < 2) throw ConfigError("the search needs at least two candidate formats");
  for (std::size_t i = 1; i < formats.size(); ++i) {
    if (!(formats[i - 1] < formats[i])) throw ConfigError("candidate formats must be strictly ordered narrowest first");
  }
  if (!(tau > 0.0)) throw ConfigError("tau must be positive");
  if (wallclock_repetitions < 3) throw ConfigError("wall-clock measurement needs at least 3 repetitions");
  cost.validate();
}

Format SearchOptions::next_higher(Format fmt) const {
  auto it = std::upper_bound(formats.begin(), formats.end(), fmt);
  return it == formats.end() ? fmt : *it;
}

Format SearchOptions::next_lower(Format fmt) const {
  auto it = std::lower_bound(formats.begin(), formats.end(), fmt);
  return it == formats.begin() ? fmt : *std::prev(it);
}

ErrorOracle::ErrorOracle(const Graph& graph, std::vector<TensorMap> probes, const SearchOptions& options)
    : graph_(&graph), probes_(std::move(probes)), options_(options) {
  if (probes_.empty()) throw ConfigError("the error oracle needs at least one probe input");
  options_.validate();
  const auto high = uniform_config(graph, options_.highest());
  for (const auto& probe : probes_) {
    reference_.push_back(execute(graph, probe, high, options_.mode, options_.cost).outputs);
  }
}

double ErrorOracle::error(const PrecisionConfig& config) const {
  auto key = config_key(config);
  if (auto it = cache_.find(key); it != cache_.end()) return it->second;
  ++evaluations_;
  double worst = 0.0;
  for (std::size_t p = 0; p < probes_.size(); ++p) {
    double err;
    try {
      auto res = execute(*graph_, probes_[p], config, options_.mode, options_.cost);
      err = relative_error(reference_[p], res.outputs, options_.tau);
    } catch (const Error&) {
      err = kInf;
    }
    worst = std::max(worst, err);
  }
  cache_.emplace(std::move(key), worst);
  return worst;
}

double SensitivityTable::score(NodeId id, Format fmt) const {
  auto it = scores.find({id, fmt});
  return it == scores.end() ? 0.0 : it->second;
}

SensitivityTable sensitivity_scan(const ErrorOracle& oracle) {
  const auto& opts = oracle.options();
  const auto base = uniform_config(oracle.graph(), opts.highest());
  SensitivityTable table;
  for (NodeId id : oracle.graph().compute_nodes()) {
    table.scores[{id, opts.highest()}] = 0.0;
    for (Format f : opts.formats) {
      if (f == opts.highest()) continue;
      auto cfg = base;
      cfg.set(id, f);
      table.scores[{id, f}] = oracle.error(cfg);
    }
  }
  return table;
}

PassResult precision_pass(const ErrorOracle& oracle, double epsilon, const SensitivityTable& table) {
  const auto& opts = oracle.options();
  const Format high = opts.highest();
  PassResult res;
  res.config = uniform_config(oracle.graph(), opts.lowest());
  res.error = oracle.error(res.config);
  res.history.push_back({"all-" + fmt_name(opts.lowest()), -1, opts.lowest(), opts.lowest(), res.error,
                         res.error <= epsilon, ""});

  // Promotes `candidates` to the widest format in order of decreasing
  // sensitivity at `level` until the constraint holds.
  auto promote = [&](const std::string& stage, std::vector<NodeId> candidates, Format level) {
    std::stable_sort(candidates.begin(), candidates.end(), [&](NodeId a, NodeId b) {
      const double sa = table.score(a, level), sb = table.score(b, level);
      if (sa != sb) return sa > sb;
      return a < b;
    });
    for (NodeId id : candidates) {
      if (res.error <= epsilon) return;
      const Format from = res.config.at(id);
      if (from == high) continue;
      res.config.set(id, high);
      res.error = oracle.error(res.config);
      res.history.push_back({stage, id, from, high, res.error, true, ""});
    }
  };

  if (res.error > epsilon) promote("promote@" + fmt_name(opts.lowest()), oracle.graph().compute_nodes(), opts.lowest());

  for (std::size_t level = 1; level + 1 < opts.formats.size(); ++level) {
    const Format target = opts.formats[level];
    std::vector<NodeId> upcast;
    for (const auto& [id, f] : res.config.assignment()) {
      if (f == high) upcast.push_back(id);
    }
    if (upcast.empty()) break;
    auto trial = res.config;
    for (NodeId id : upcast) trial.set(id, target);
    const double err = oracle.error(trial);
    const bool ok = err <= epsilon;
    res.history.push_back({"retry@" + fmt_name(target), -1, high, target, err, ok,
                           std::to_string(upcast.size()) + " upcast nodes"});
    res.config = trial;
    res.error = err;
    if (!ok) promote("promote@" + fmt_name(target), upcast, target);
  }

  if (res.error > epsilon) {
    throw NumericalError("precision pass could not satisfy epsilon even at the widest format");
  }
  return res;
}

PassResult structure_pass(const ErrorOracle& oracle, double epsilon, const PrecisionConfig& start) {
  const auto& opts = oracle.options();
  PassResult res;
  res.config = start;
  res.error = oracle.error(start);
  std::set<NodeId> worklist;
  for (const auto& [id, f] : start.assignment()) {
    if (f != opts.highest()) worklist.insert(id);
  }
  while (!worklist.empty()) {
    const NodeId seed = *worklist.begin();
    worklist.erase(worklist.begin());
    for (NodeId nb : compute_neighbours(oracle.graph(), seed)) {
      const Format from = res.config.at(nb);
      const Format to = opts.next_lower(from);
      if (to == from) continue;
      auto trial = res.config;
      trial.set(nb, to);
      const double err = oracle.error(trial);
      const bool ok = err <= epsilon;
      res.history.push_back({"neighbour of %" + std::to_string(seed), nb, from, to, err, ok, ""});
      if (ok) {
        res.config = std::move(trial);
        res.error = err;
        worklist.insert(nb);
      }
    }
  }
  return res;
}

std::vector<CastRegion> cast_regions(const Graph& graph, const PrecisionConfig& config, Format highest) {
  std::vector<CastRegion> regions;
  std::set<NodeId> seen;
  for (NodeId id : graph.compute_nodes()) {
    const Format f = config.at(id);
    if (f >= highest || seen.count(id)) continue;
    CastRegion r;
    r.format = f;
    std::vector<NodeId> stack{id};
    seen.insert(id);
    while (!stack.empty()) {
      const NodeId cur = stack.back();
      stack.pop_back();
      r.nodes.push_back(cur);
      for (NodeId nb : compute_neighbours(graph, cur)) {
        if (!seen.count(nb) && config.at(nb) == f) {
          seen.insert(nb);
          stack.push_back(nb);
        }
      }
    }
    std::sort(r.nodes.begin(), r.nodes.end());
    const std::set<NodeId> members(r.nodes.begin(), r.nodes.end());
    std::set<NodeId> inbound;
    std::set<std::pair<NodeId, Format>> outbound;
    for (NodeId n : r.nodes) {
      for (NodeId op : graph.node(n).operands) {
        if (!members.count(op) && node_format(graph, config, op) != f) inbound.insert(op);
      }
      for (NodeId c : graph.consumers(n)) {
        if (members.count(c) || graph.node(c).kind() == OpKind::cast) continue;
        const Format cf = node_format(graph, config, c);
        if (cf != f) outbound.insert({n, cf});
      }
    }
    for (NodeId op : inbound) r.boundary_cast_elements += element_count(graph.node(op).out_shape);
    for (const auto& [n, cf] : outbound) r.boundary_cast_elements += element_count(graph.node(n).out_shape);
    regions.push_back(std::move(r));
  }
  std::sort(regions.begin(), regions.end(),
            [](const CastRegion& a, const CastRegion& b) { return a.nodes.front() < b.nodes.front(); });
  return regions;
}

namespace {

RegionGain model_gain(const Graph& graph, const CastRegion& region, const SearchOptions& opts) {
  RegionGain g;
  const Format up = opts.next_higher(region.format);
  for (NodeId n : region.nodes) {
    const double work = static_cast<double>(node_work(graph, n));
    g.t_high += work * opts.cost.weight(up);
    g.t_low += work * opts.cost.weight(region.format);
  }
  g.t_cast = static_cast<double>(region.boundary_cast_elements) * opts.cost.cast_weight;
  return g;
}

RegionGain wallclock_gain(const ErrorOracle& oracle, const CastRegion& region, const PrecisionConfig& config) {
  const auto& opts = oracle.options();
  const Graph& graph = oracle.graph();
  auto raised = config;
  for (NodeId n : region.nodes) raised.set(n, opts.next_higher(region.format));
  const auto low = measure(graph, oracle.probes().front(), config, opts.wallclock_repetitions, opts.mode, opts.cost);
  const auto high = measure(graph, oracle.probes().front(), raised, opts.wallclock_repetitions, opts.mode, opts.cost);
  const std::set<NodeId> members(region.nodes.begin(), region.nodes.end());

  auto compute_only = [&](const ExecutionProfile& p) {
    double t = 0.0;
    for (NodeId n : region.nodes) t += p.per_node_elapsed.at(n);
    for (const auto& c : p.casts) {
      if (members.count(c.consumer)) t -= c.seconds;
    }
    return std::max(t, 0.0);
  };
  RegionGain g;
  g.t_low = compute_only(low.median_profile);
  g.t_high = compute_only(high.median_profile);
  for (const auto& c : low.median_profile.casts) {
    if (members.count(c.producer) != members.count(c.consumer)) g.t_cast += c.seconds;
  }
  return g;
}

std::string region_text(const CastRegion& r) {
  std::string s = fmt_name(r.format) + " {";
  for (std::size_t i = 0; i < r.nodes.size(); ++i) s += (i ? "," : "") + std::to_string(r.nodes[i]);
  return s + "}";
}

}  // namespace

PassResult latency_pass(const ErrorOracle& oracle, double epsilon, const PrecisionConfig& start) {
  const auto& opts = oracle.options();
  const Graph& graph = oracle.graph();
  PassResult res;
  res.config = start;
  res.error = oracle.error(start);

  std::set<std::pair<Format, std::vector<NodeId>>> settled;
  for (std::size_t level = 0; level + 1 < opts.formats.size(); ++level) {
    const Format f = opts.formats[level];
    bool changed = true;
    while (changed) {
      changed = false;
      for (const auto& region : cast_regions(graph, res.config, opts.highest())) {
        if (region.format != f || settled.count({f, region.nodes})) continue;
        const RegionGain g = opts.cost_source == CostSource::model ? model_gain(graph, region, opts)
                                                                   : wallclock_gain(oracle, region, res.config);
        std::ostringstream note;
        note << region_text(region) << " dT=" << g.net() << " (high=" << g.t_high << " low=" << g.t_low
             << " cast=" << g.t_cast << ")";
        if (g.net() > 0.0) {
          settled.insert({f, region.nodes});
          res.history.push_back({"keep", region.nodes.front(), f, f, res.error, true, note.str()});
          continue;
        }
        const Format up = opts.next_higher(f);
        auto trial = res.config;
        for (NodeId n : region.nodes) trial.set(n, up);
        const double err = oracle.error(trial);
        if (err <= epsilon) {
          res.config = std::move(trial);
          res.error = err;
          res.history.push_back({"revert", region.nodes.front(), f, up, err, true, note.str()});
          changed = true;
          break;  // regions are recomputed after every change
        }
        settled.insert({f, region.nodes});
        res.history.push_back({"revert", region.nodes.front(), f, up, err, false, note.str() + " infeasible; kept"});
      }
    }
  }
  return res;
}

SearchResult search(const Graph& graph, const TensorMap& probe, double epsilon, const SearchOptions& options) {
  return search(graph, std::vector<TensorMap>{probe}, epsilon, options);
}

SearchResult search(const Graph& graph, const std::vector<TensorMap>& probes, double epsilon,
                    const SearchOptions& options) {
  if (!(epsilon >= 0.0)) throw ConfigError("epsilon must be non-negative");
  const auto t0 = std::chrono::steady_clock::now();
  ErrorOracle oracle(graph, probes, options);

  SearchReport rep;
  rep.function = graph.name();
  rep.epsilon = epsilon;
  rep.options = options;
  rep.sensitivity = sensitivity_scan(oracle);
  rep.precision = precision_pass(oracle, epsilon, rep.sensitivity);
  rep.structure = structure_pass(oracle, epsilon, rep.precision.config);
  rep.latency = latency_pass(oracle, epsilon, rep.structure.config);

  const auto high = uniform_config(graph, options.highest());
  PrecisionConfig final_config = rep.latency.config;
  rep.cost_high = modeled_cost(graph, high, options.cost);
  rep.cost_final = modeled_cost(graph, final_config, options.cost);
  if (options.cost_source == CostSource::model && rep.cost_final > rep.cost_high) {
    final_config = high;
    rep.cost_final = rep.cost_high;
    rep.latency.history.push_back({"fallback", -1, options.lowest(), options.highest(), 0.0, true,
                                   "modeled cost exceeded the all-widest config"});
  }
  rep.final_error = oracle.error(final_config);
  if (rep.final_error > epsilon) throw NumericalError("search produced an infeasible configuration");
  if (options.cost_source == CostSource::wallclock) {
    rep.wall_high = measure(graph, probes.front(), high, options.wallclock_repetitions, options.mode, options.cost)
                        .wall_seconds;
    rep.wall_final =
        measure(graph, probes.front(), final_config, options.wallclock_repetitions, options.mode, options.cost)
            .wall_seconds;
  }
  rep.histogram = final_config.histogram();
  for (const auto& [id, f] : final_config.assignment()) {
    if (f == options.highest()) rep.nodes_at_highest.push_back(id);
  }
  rep.evaluations = oracle.evaluations();
  rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return {std::move(final_config), std::move(rep)};
}

std::string format_report(const Graph& graph, const SearchReport& r) {
  std::ostringstream os;
  os << "function " << r.function << "  fingerprint " << graph.fingerprint() << "\n";
  os << "epsilon " << r.epsilon << "  tau " << r.options.tau << "  cost source " << to_string(r.options.cost_source)
     << "\n";
  os << "final error " << r.final_error << "  evaluations " << r.evaluations << "  search seconds " << r.seconds
     << "\n";
  os << "modeled cost: all-" << to_string(r.options.highest()) << " " << r.cost_high << "  selected " << r.cost_final
     << "  ratio " << (r.cost_high > 0 ? r.cost_final / r.cost_high : 1.0) << "\n";
  if (r.wall_high) os << "wall seconds: all-widest " << *r.wall_high << "  selected " << *r.wall_final << "\n";
  os << "nodes per format:";
  for (const auto& [f, n] : r.histogram) os << " " << to_string(f) << "=" << n;
  os << "\nnodes kept at " << to_string(r.options.highest()) << ":";
  for (NodeId id : r.nodes_at_highest) {
    os << " %" << id << "(" << to_string(graph.node(id).kind()) << ")";
  }
  os << "\n\nsensitivity (node, format, score)\n";
  for (const auto& [key, s] : r.sensitivity.scores) {
    if (key.second == r.options.highest()) continue;
    os << "  %" << key.first << " " << to_string(key.second) << " " << s << "\n";
  }
  auto dump_pass = [&](const char* title, const PassResult& p) {
    os << "\n" << title << " (error " << p.error << ")\n";
    for (const auto& s : p.history) {
      os << "  " << s.stage;
      if (s.node >= 0) os << " %" << s.node;
      os << " " << to_string(s.from) << "->" << to_string(s.to) << " err=" << s.error
         << (s.accepted ? " accepted" : " rejected");
      if (!s.note.empty()) os << "  " << s.note;
      os << "\n";
    }
  };
  dump_pass("precision-aware pass", r.precision);
  dump_pass("structure-aware pass", r.structure);
  dump_pass("latency-aware pass", r.latency);
  return os.str();
}

std::string serialize_map(const PrecisionMap& map) {
  nlohmann::ordered_json j;
  j["schema_version"] = PrecisionMap::kSchemaVersion;
  j["function"] = map.function;
  j["epsilon"] = map.epsilon;
  j["tau"] = map.tau;
  j["formats"] = nlohmann::ordered_json::array();
  for (Format f : map.formats) j["formats"].push_back(fmt_name(f));
  j["graph_fingerprint"] = map.graph_fingerprint;
  j["probe_seed"] = map.probe_seed;
  nlohmann::ordered_json a = nlohmann::ordered_json::object();
  for (const auto& [id, f] : map.config.assignment()) a[std::to_string(id)] = fmt_name(f);
  j["assignment"] = std::move(a);
  return j.dump(2) + "\n";
}

void save_map(const PrecisionMap& map, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write precision map to " + path.string());
  out << serialize_map(map);
}

PrecisionMap parse_map(const std::string& text, const Graph& graph) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw MapFormatError(std::string("precision map is not valid JSON: ") + e.what());
  }
  PrecisionMap m;
  try {
    if (j.at("schema_version").get<int>() != PrecisionMap::kSchemaVersion) {
      throw MapFormatError("unsupported precision map schema_version");
    }
    m.function = j.at("function").get<std::string>();
    m.epsilon = j.at("epsilon").get<double>();
    m.tau = j.at("tau").get<double>();
    for (const auto& f : j.at("formats")) {
      auto parsed = parse_format(f.get<std::string>());
      if (!parsed) throw MapFormatError("unknown format in precision map");
      m.formats.push_back(*parsed);
    }
    m.graph_fingerprint = j.at("graph_fingerprint").get<std::string>();
    m.probe_seed = j.at("probe_seed").get<std::uint64_t>();
    if (m.graph_fingerprint != graph.fingerprint()) {
      throw StaleMapError("precision map for '" + m.function + "' was computed for graph " + m.graph_fingerprint +
                          " but the target graph is " + graph.fingerprint());
    }
    for (const auto& [key, value] : j.at("assignment").items()) {
      std::size_t used = 0;
      const long id = std::stol(key, &used);
      if (used != key.size()) throw MapFormatError("bad node id '" + key + "' in precision map");
      auto parsed = parse_format(value.get<std::string>());
      if (!parsed) throw MapFormatError("unknown format in precision map assignment");
      m.config.set(static_cast<NodeId>(id), *parsed);
    }
  } catch (const nlohmann::json::exception& e) {
    throw MapFormatError(std::string("malformed precision map: ") + e.what());
  } catch (const std::invalid_argument&) {
    throw MapFormatError("malformed node id in precision map");
  } catch (const std::out_of_range&) {
    throw MapFormatError("node id out of range in precision map");
  }
  try {
    check_config(graph, m.config);
  } catch (const ConfigError& e) {
    throw MapFormatError(std::string("precision map does not cover the graph: ") + e.what());
  }
  return m;
}

PrecisionMap load_map(const std::filesystem::path& path, const Graph& graph) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FileNotFoundError("precision map not found: " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_map(ss.str(), graph);
}

}  // namespace adaprec
