// adaprec: profile, search, train, eval and sweep over the VBGS hot functions.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <json.hpp>

#include "adaprec/errors.hpp"
#include "adaprec/mpsearch.hpp"
#include "adaprec/scene.hpp"
#include "adaprec/vbgs.hpp"

namespace fs = std::filesystem;
using namespace adaprec;
using Json = nlohmann::ordered_json;

namespace {

constexpr const char* kVersion = "0.1.0";

enum Exit { kOk = 0, kConfig = 2, kNumerical = 3, kStale = 4 };

struct RunConfig {
  std::string scene_path;
  scene::SceneSpec scene;
  int frames = 50;
  int points_per_frame = 1024;
  int queries = 2048;
  vbgs::TrainConfig train;
  double epsilon = 1e-6;
  double tau = 1e-12;
  std::vector<std::string> formats{"fp16", "tf32", "fp32", "fp64"};
  std::map<std::string, double> weights{{"fp16", 1.0}, {"tf32", 1.5}, {"fp32", 2.0}, {"fp64", 4.0}};
  double cast_weight = 0.5;
  std::string mode = "fused";
  std::string cost_source = "model";
  std::uint64_t probe_seed = 1;
  std::string out = "run";

  CostModel cost_model() const {
    CostModel c;
    c.per_element_weight.clear();
    for (const auto& [k, v] : weights) c.per_element_weight[format_from_string(k)] = v;
    c.cast_weight = cast_weight;
    c.validate();
    return c;
  }

  SearchOptions search_options() const {
    SearchOptions o;
    o.formats.clear();
    for (const auto& f : formats) o.formats.push_back(format_from_string(f));
    std::sort(o.formats.begin(), o.formats.end());
    o.tau = tau;
    o.cost = cost_model();
    o.cost_source = cost_source_from_string(cost_source);
    o.mode = contraction_mode_from_string(mode);
    o.validate();
    return o;
  }

  vbgs::TrainConfig train_config() const {
    auto t = train;
    t.mode = contraction_mode_from_string(mode);
    t.cost = cost_model();
    t.validate();
    return t;
  }

  void finalize(bool training) {
    if (!scene_path.empty()) scene = scene::load_scene(scene_path);
    scene.validate();
    if (frames < 1) throw ConfigError("frames must be at least 1");
    if (points_per_frame < 1) throw ConfigError("points_per_frame must be at least 1");
    if (!(epsilon >= 0.0)) throw ConfigError("epsilon must be non-negative");
    if (train.batch < 1 || train.components < 1) throw ConfigError("batch and components must be positive");
    (void)search_options();
    if (training) (void)train_config();
  }

  Json to_json() const {
    Json j;
    j["scene_path"] = scene_path;
    j["scene"] = Json::parse(scene::to_json(scene));
    j["frames"] = frames;
    j["points_per_frame"] = points_per_frame;
    j["queries"] = queries;
    j["components"] = train.components;
    j["batch"] = train.batch;
    j["n_reassign"] = train.n_reassign;
    j["temperature"] = train.temperature;
    j["alpha0"] = train.alpha0;
    j["kappa0"] = train.kappa0;
    j["dof0"] = train.dof0;
    j["space_sigma"] = train.space_sigma;
    j["color_sigma"] = train.color_sigma;
    j["seed"] = train.seed;
    j["epsilon"] = epsilon;
    j["tau"] = tau;
    j["formats"] = formats;
    j["weights"] = weights;
    j["cast_weight"] = cast_weight;
    j["mode"] = mode;
    j["cost_source"] = cost_source;
    j["probe_seed"] = probe_seed;
    return j;
  }
};

void add_run_options(CLI::App* app, RunConfig& rc) {
  app->add_option("--scene", rc.scene_path, "scene spec JSON file");
  app->add_option("--frames", rc.frames, "number of frames in the stream");
  app->add_option("--points-per-frame", rc.points_per_frame, "points per frame");
  app->add_option("--queries", rc.queries, "held-out evaluation queries");
  app->add_option("--components", rc.train.components, "mixture components N");
  app->add_option("--batch", rc.train.batch, "batch size B");
  app->add_option("--n-reassign", rc.train.n_reassign, "components reassigned per frame");
  app->add_option("--temperature", rc.train.temperature, "reassign sampling temperature");
  app->add_option("--alpha0", rc.train.alpha0);
  app->add_option("--kappa0", rc.train.kappa0);
  app->add_option("--dof0", rc.train.dof0);
  app->add_option("--space-sigma", rc.train.space_sigma, "prior spatial std; 0 derives it from the data");
  app->add_option("--color-sigma", rc.train.color_sigma, "prior color std; 0 derives it from the data");
  app->add_option("--seed", rc.train.seed, "training seed");
  app->add_option("--epsilon", rc.epsilon, "error tolerance for the search");
  app->add_option("--tau", rc.tau, "denominator floor of the relative error");
  app->add_option("--formats", rc.formats, "candidate formats")->delimiter(',');
  app->add_option("--weights", rc.weights, "per-element cost weights, e.g. fp16=1")->delimiter(',');
  app->add_option("--cast-weight", rc.cast_weight, "cost per cast element");
  app->add_option("--mode", rc.mode, "fused or baseline contraction")->check(CLI::IsMember({"fused", "baseline"}));
  app->add_option("--cost-source", rc.cost_source, "model or wallclock")->check(CLI::IsMember({"model", "wallclock"}));
  app->add_option("--probe-seed", rc.probe_seed, "white-noise probe seed");
  app->add_option("--out", rc.out, "output directory");
}

void write_text(const fs::path& p, const std::string& text) {
  std::ofstream out(p, std::ios::binary);
  if (!out) throw ConfigError("cannot write " + p.string());
  out << text;
}

void write_manifest(const RunConfig& rc, const std::string& command, const std::vector<std::string>& argv,
                    const Json& extra = Json::object()) {
  Json j;
  j["tool"] = "adaprec";
  j["version"] = kVersion;
  j["compiler"] = __VERSION__;
  j["command"] = command;
  j["argv"] = argv;
  j["config"] = rc.to_json();
  for (const auto& [k, v] : extra.items()) j[k] = v;
  write_text(fs::path(rc.out) / "manifest.json", j.dump(2) + "\n");
}

struct HotFunction {
  std::string name;
  Graph graph;
  TensorMap probe;
};

HotFunction hot_function(const std::string& which, const RunConfig& rc, std::uint64_t probe_seed) {
  const int B = rc.train.batch, N = rc.train.components;
  if (which == "elbo" || which == "compute_elbo_delta") {
    return {"compute_elbo_delta", vbgs::build_elbo_graph(B, N), vbgs::elbo_probe(B, N, probe_seed)};
  }
  if (which == "stats" || which == "sum_stats_over_samples") {
    return {"sum_stats_over_samples", vbgs::build_stats_graph(B, N), vbgs::stats_probe(B, N, probe_seed)};
  }
  throw ConfigError("unknown hot function '" + which + "' (use elbo or stats)");
}

PrecisionMap run_search(const HotFunction& hf, const RunConfig& rc, double eps, std::uint64_t seed,
                        SearchReport* report) {
  const auto opts = rc.search_options();
  auto res = search(hf.graph, hf.probe, eps, opts);
  if (report) *report = res.report;
  PrecisionMap m;
  m.function = hf.name;
  m.epsilon = eps;
  m.tau = opts.tau;
  m.formats = opts.formats;
  m.graph_fingerprint = hf.graph.fingerprint();
  m.probe_seed = seed;
  m.config = std::move(res.config);
  return m;
}

double percent(double part, double whole) { return whole > 0 ? 100.0 * part / whole : 0.0; }

// ---- commands --------------------------------------------------------------

int cmd_profile(RunConfig& rc, const std::vector<std::string>& argv) {
  rc.finalize(true);
  fs::create_directories(rc.out);
  auto frames = scene::frame_stream(rc.scene, std::max(rc.frames, 2), rc.points_per_frame);
  std::ostringstream os;
  Json extra;
  std::vector<vbgs::MixtureModel> models;
  std::uint64_t peak[2] = {0, 0};
  int idx = 0;
  for (const char* mode : {"fused", "baseline"}) {
    auto cfg = rc.train_config();
    cfg.mode = contraction_mode_from_string(mode);
    vbgs::Trainer trainer(cfg, {});
    trainer.step(frames[0]);
    const auto t = trainer.step(frames[1]);
    const double total = t.reassign_seconds + t.fit_seconds;
    const double other = std::max(0.0, total - t.elbo_seconds - t.stats_seconds);
    os << "mode " << mode << "\n";
    os << "  reassign " << t.reassign_seconds << " s  fit " << t.fit_seconds << " s\n";
    char line[256];
    std::snprintf(line, sizeof line, "  compute_elbo_delta %6.2f%%  sum_stats_over_samples %6.2f%%  other %6.2f%%\n",
                  percent(t.elbo_seconds, total), percent(t.stats_seconds, total), percent(other, total));
    os << line;
    os << "  peak live bytes " << t.peak_bytes << "\n";
    peak[idx++] = t.peak_bytes;
    std::ofstream tr(fs::path(rc.out) / (std::string("trace_") + mode + ".csv"));
    tr << "seconds,step,live_bytes,label\n";
    for (const auto& e : t.trace) tr << e.seconds << ',' << e.step << ',' << e.live_bytes << ",\"" << e.label << "\"\n";
    extra[mode] = {{"elbo_percent", percent(t.elbo_seconds, total)},
                   {"stats_percent", percent(t.stats_seconds, total)},
                   {"other_percent", percent(other, total)},
                   {"peak_bytes", t.peak_bytes}};
    models.push_back(trainer.state().model);
  }
  double worst = 0.0;
  for (std::size_t n = 0; n < models[0].alpha.size(); ++n) {
    worst = std::max(worst, std::fabs(models[0].alpha[n] - models[1].alpha[n]) / std::max(1.0, models[0].alpha[n]));
    for (auto mod : vbgs::kModalities) {
      for (int k = 0; k < 3; ++k) {
        const double a = models[0].block(mod).m[n][static_cast<std::size_t>(k)];
        const double b = models[1].block(mod).m[n][static_cast<std::size_t>(k)];
        worst = std::max(worst, std::fabs(a - b) / std::max(1.0, std::fabs(a)));
      }
    }
  }
  os << "baseline minus fused peak: " << static_cast<double>(peak[1]) - static_cast<double>(peak[0]) << " bytes\n";
  os << "fused vs baseline max relative difference: " << worst << (worst <= 1e-9 ? " (equal)" : " (MISMATCH)") << "\n";
  extra["max_relative_difference"] = worst;
  write_text(fs::path(rc.out) / "profile.txt", os.str());
  write_manifest(rc, "profile", argv, Json{{"profile", extra}});
  std::cout << os.str();
  return worst <= 1e-9 ? kOk : kNumerical;
}

int cmd_search(RunConfig& rc, const std::vector<std::string>& argv, const std::string& function,
               std::optional<std::uint64_t> compare_seed) {
  rc.finalize(false);
  fs::create_directories(rc.out);
  const auto hf = hot_function(function, rc, rc.probe_seed);
  SearchReport rep;
  const auto map = run_search(hf, rc, rc.epsilon, rc.probe_seed, &rep);
  const fs::path map_path = fs::path(rc.out) / (hf.name + "_map.json");
  save_map(map, map_path);
  std::string report = format_report(hf.graph, rep);
  Json extra{{"map", map_path.string()}};
  if (compare_seed) {
    const auto other = hot_function(function, rc, *compare_seed);
    const auto m2 = run_search(other, rc, rc.epsilon, *compare_seed, nullptr);
    std::size_t agree = 0;
    std::ostringstream dis;
    for (const auto& [id, f] : map.config.assignment()) {
      if (m2.config.at(id) == f) {
        ++agree;
      } else {
        dis << "  %" << id << " " << to_string(f) << " vs " << to_string(m2.config.at(id)) << "\n";
      }
    }
    const double frac = static_cast<double>(agree) / static_cast<double>(map.config.size());
    std::ostringstream os;
    os << "\nprobe seeds " << rc.probe_seed << " and " << *compare_seed << ": node agreement " << agree << "/"
       << map.config.size() << " = " << frac << (agree == map.config.size() ? " (exact)" : "") << "\n"
       << dis.str();
    report += os.str();
    extra["agreement"] = frac;
  }
  write_text(fs::path(rc.out) / (hf.name + "_report.txt"), report);
  write_manifest(rc, "search", argv, extra);
  std::cout << report;
  return kOk;
}

struct TrainOutcome {
  vbgs::TrainResult result;
  scene::Evaluation final_eval;
};

TrainOutcome run_training(const RunConfig& rc, const std::optional<PrecisionMap>& em,
                          const std::optional<PrecisionMap>& sm, const std::optional<Format>& homogeneous) {
  const auto eval = scene::make_eval_set(rc.scene, rc.queries);
  auto evaluator = [&](const vbgs::MixtureModel& m) {
    const auto e = scene::evaluate(m, eval);
    return std::make_pair(e.mean, e.ci95);
  };
  const auto cfg = rc.train_config();
  auto src = scene::frame_source(rc.scene, rc.frames, rc.points_per_frame);
  TrainOutcome out;
  if (homogeneous) {
    vbgs::HotConfigs hc{uniform_config(vbgs::build_elbo_graph(cfg.batch, cfg.components), *homogeneous),
                        uniform_config(vbgs::build_stats_graph(cfg.batch, cfg.components), *homogeneous)};
    out.result = vbgs::train(src, cfg, hc, evaluator);
  } else {
    out.result = vbgs::train(src, cfg, em, sm, evaluator);
  }
  out.final_eval = scene::evaluate(out.result.state.model, eval);
  return out;
}

int cmd_train(RunConfig& rc, const std::vector<std::string>& argv, const std::string& elbo_map,
              const std::string& stats_map, const std::string& homogeneous, bool auto_search) {
  rc.finalize(true);
  fs::create_directories(rc.out);
  std::optional<PrecisionMap> em, sm;
  std::optional<Format> homo;
  const int B = rc.train.batch, N = rc.train.components;
  if (!homogeneous.empty()) homo = format_from_string(homogeneous);
  if (!elbo_map.empty()) em = load_map(elbo_map, vbgs::build_elbo_graph(B, N));
  if (!stats_map.empty()) sm = load_map(stats_map, vbgs::build_stats_graph(B, N));
  if (auto_search) {
    em = run_search(hot_function("elbo", rc, rc.probe_seed), rc, rc.epsilon, rc.probe_seed, nullptr);
    sm = run_search(hot_function("stats", rc, rc.probe_seed), rc, rc.epsilon, rc.probe_seed, nullptr);
    save_map(*em, fs::path(rc.out) / "compute_elbo_delta_map.json");
    save_map(*sm, fs::path(rc.out) / "sum_stats_over_samples_map.json");
  }
  const auto t = run_training(rc, em, sm, homo);
  vbgs::write_metrics_csv(t.result.metrics, fs::path(rc.out) / "metrics.csv");
  vbgs::save_checkpoint(t.result.state, fs::path(rc.out) / "checkpoint.json");
  Json summary{{"frames", t.result.metrics.size()},
               {"final_psnr", t.final_eval.mean},
               {"final_psnr_ci95", t.final_eval.ci95},
               {"precision", homo ? std::string(to_string(*homo)) : (em || sm ? "maps" : "fp64")}};
  write_text(fs::path(rc.out) / "summary.json", summary.dump(2) + "\n");
  write_manifest(rc, "train", argv,
                 Json{{"elbo_map", elbo_map}, {"stats_map", stats_map}, {"homogeneous", homogeneous},
                      {"auto_search", auto_search}});
  for (const auto& m : t.result.metrics) {
    std::printf("frame %3d  psnr %7.3f +- %.3f dB  %.2f s\n", m.frame, m.psnr_mean, m.psnr_ci95, m.seconds);
  }
  std::printf("final psnr %.3f +- %.3f dB\n", t.final_eval.mean, t.final_eval.ci95);
  return kOk;
}

int cmd_eval(RunConfig& rc, const std::vector<std::string>& argv, const std::string& checkpoint) {
  rc.finalize(false);
  fs::create_directories(rc.out);
  const auto state = vbgs::load_checkpoint(checkpoint);
  const auto e = scene::evaluate(state.model, scene::make_eval_set(rc.scene, rc.queries));
  Json j{{"checkpoint", checkpoint},
         {"frames_seen", state.frames_seen},
         {"psnr_mean", e.mean},
         {"psnr_ci95", e.ci95},
         {"psnr_overall", e.overall},
         {"per_stratum", e.per_stratum}};
  write_text(fs::path(rc.out) / "eval.json", j.dump(2) + "\n");
  write_manifest(rc, "eval", argv, Json{{"checkpoint", checkpoint}});
  std::printf("psnr %.3f +- %.3f dB (overall %.3f) after %d frames\n", e.mean, e.ci95, e.overall, state.frames_seen);
  return kOk;
}

int cmd_sweep(RunConfig& rc, const std::vector<std::string>& argv, std::vector<double> epsilons,
              double psnr_threshold, bool skip_training) {
  rc.finalize(true);
  fs::create_directories(rc.out);
  std::sort(epsilons.begin(), epsilons.end());
  const auto opts = rc.search_options();
  const auto elbo = hot_function("elbo", rc, rc.probe_seed);
  const auto stats = hot_function("stats", rc, rc.probe_seed);
  const double cost_high = modeled_cost(elbo.graph, uniform_config(elbo.graph, opts.highest()), opts.cost) +
                           modeled_cost(stats.graph, uniform_config(stats.graph, opts.highest()), opts.cost);

  double reference_psnr = std::nan("");
  if (!skip_training) reference_psnr = run_training(rc, std::nullopt, std::nullopt, std::nullopt).final_eval.mean;

  struct Row {
    double eps, cost_ratio, psnr, err_elbo, err_stats;
    std::map<Format, int> counts;
    int downcast;
  };
  std::vector<Row> rows;
  for (double eps : epsilons) {
    SearchReport re, rs;
    const auto em = run_search(elbo, rc, eps, rc.probe_seed, &re);
    const auto sm = run_search(stats, rc, eps, rc.probe_seed, &rs);
    std::ostringstream tag;
    tag << eps;
    save_map(em, fs::path(rc.out) / ("compute_elbo_delta_eps" + tag.str() + ".json"));
    save_map(sm, fs::path(rc.out) / ("sum_stats_over_samples_eps" + tag.str() + ".json"));
    Row r{eps, (re.cost_final + rs.cost_final) / cost_high, std::nan(""), re.final_error, rs.final_error, {}, 0};
    for (const auto& h : {re.histogram, rs.histogram}) {
      for (const auto& [f, n] : h) {
        r.counts[f] += n;
        if (f != opts.highest()) r.downcast += n;
      }
    }
    if (!skip_training) {
      try {
        r.psnr = run_training(rc, em, sm, std::nullopt).final_eval.mean;
      } catch (const NumericalError&) {
        r.psnr = -std::numeric_limits<double>::infinity();
      }
    }
    rows.push_back(r);
  }

  std::ostringstream csv, rep;
  csv << "epsilon,cost_ratio,psnr,psnr_drop,err_elbo,err_stats,downcast_nodes";
  for (Format f : opts.formats) csv << ",n_" << to_string(f);
  csv << "\n";
  int knee = -1;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    const double drop = reference_psnr - r.psnr;
    csv << r.eps << ',' << r.cost_ratio << ',' << r.psnr << ',' << drop << ',' << r.err_elbo << ',' << r.err_stats
        << ',' << r.downcast;
    for (Format f : opts.formats) csv << ',' << (r.counts.count(f) ? r.counts.at(f) : 0);
    csv << "\n";
    const bool ok = skip_training || drop < psnr_threshold;
    if (ok && (knee < 0 || r.cost_ratio < rows[static_cast<std::size_t>(knee)].cost_ratio)) knee = static_cast<int>(i);
  }
  rep << "tolerance sweep (reference fp64 psnr " << reference_psnr << " dB, drop threshold " << psnr_threshold
      << " dB)\n";
  rep << csv.str();
  bool monotone = true;
  for (std::size_t i = 1; i < rows.size(); ++i) monotone &= rows[i].downcast >= rows[i - 1].downcast;
  rep << "downcast node count non-decreasing in epsilon: " << (monotone ? "yes" : "no") << "\n";
  if (knee >= 0) rep << "knee epsilon: " << rows[static_cast<std::size_t>(knee)].eps << "\n";
  else rep << "knee epsilon: none within the PSNR threshold\n";
  write_text(fs::path(rc.out) / "sweep.csv", csv.str());
  write_text(fs::path(rc.out) / "sweep_report.txt", rep.str());
  write_manifest(rc, "sweep", argv, Json{{"epsilons", epsilons}, {"psnr_threshold", psnr_threshold}});
  std::cout << rep.str();
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"adaprec: mixed-precision search and profiling for a continual Gaussian-mixture mapper"};
  app.require_subcommand(1);
  app.set_version_flag("--version", kVersion);
  RunConfig rc;
  const std::vector<std::string> args(argv, argv + argc);

  auto* profile = app.add_subcommand("profile", "one reassign+fit iteration: runtime breakdown and memory trace");
  add_run_options(profile, rc);

  auto* search_cmd = app.add_subcommand("search", "search a precision map for a hot function");
  add_run_options(search_cmd, rc);
  std::string function = "stats";
  std::optional<std::uint64_t> compare_seed;
  search_cmd->add_option("--function", function, "elbo or stats")->required();
  search_cmd->add_option("--compare-seed", compare_seed, "second probe seed for the agreement check");

  auto* train_cmd = app.add_subcommand("train", "train over the frame stream");
  add_run_options(train_cmd, rc);
  std::string elbo_map, stats_map, homogeneous;
  bool auto_search = false;
  train_cmd->add_option("--elbo-map", elbo_map, "precision map for compute_elbo_delta");
  train_cmd->add_option("--stats-map", stats_map, "precision map for sum_stats_over_samples");
  train_cmd->add_option("--homogeneous", homogeneous, "run both hot functions at one format");
  train_cmd->add_flag("--search", auto_search, "search maps on a white-noise probe before training");

  auto* eval_cmd = app.add_subcommand("eval", "evaluate a checkpoint on the held-out queries");
  add_run_options(eval_cmd, rc);
  std::string checkpoint;
  eval_cmd->add_option("--checkpoint", checkpoint, "checkpoint JSON")->required();

  auto* sweep_cmd = app.add_subcommand("sweep", "tolerance sweep over epsilon");
  add_run_options(sweep_cmd, rc);
  std::vector<double> epsilons{1e-7, 1e-6, 1e-5, 1e-4};
  double threshold = 1.0;
  bool no_train = false;
  sweep_cmd->add_option("--epsilons", epsilons, "epsilon list")->delimiter(',');
  sweep_cmd->add_option("--psnr-threshold", threshold, "largest tolerated PSNR drop for the knee");
  sweep_cmd->add_flag("--no-train", no_train, "report costs only");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  try {
    if (*profile) return cmd_profile(rc, args);
    if (*search_cmd) return cmd_search(rc, args, function, compare_seed);
    if (*train_cmd) return cmd_train(rc, args, elbo_map, stats_map, homogeneous, auto_search);
    if (*eval_cmd) return cmd_eval(rc, args, checkpoint);
    if (*sweep_cmd) return cmd_sweep(rc, args, epsilons, threshold, no_train);
  } catch (const StaleMapError& e) {
    std::cerr << "error: stale precision map: " << e.what() << "\n";
    return kStale;
  } catch (const NumericalError& e) {
    std::cerr << "error: numerical failure: " << e.what() << "\n";
    return kNumerical;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kConfig;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return kConfig;
}
