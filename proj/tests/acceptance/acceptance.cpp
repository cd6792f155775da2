// Acceptance suite: one PASS/FAIL line per criterion, details in
// acceptance_report.txt next to the binary's working directory.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "adaprec/errors.hpp"
#include "adaprec/interpreter.hpp"
#include "adaprec/mpsearch.hpp"
#include "adaprec/numerics.hpp"
#include "adaprec/scene.hpp"
#include "adaprec/vbgs.hpp"
#include "elbo_oracle.hpp"
#include "rounding_oracle.hpp"
#include "search_oracle.hpp"

using namespace adaprec;
using namespace adaprec::vbgs;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = false;
  std::string summary;
};

std::ostringstream report;

double relative_gap(double a, double b) {
  const double scale = std::max(std::fabs(a), std::fabs(b));
  return scale == 0.0 ? 0.0 : std::fabs(a - b) / scale;
}

double max_relative(const SufficientStats& a, const SufficientStats& b) {
  double worst = 0.0;
  for (int n = 0; n < a.components(); ++n) {
    worst = std::max(worst, relative_gap(a.n_count[n], b.n_count[n]));
    for (Modality mod : kModalities) {
      for (int k = 0; k < 3; ++k) worst = std::max(worst, relative_gap(a.block(mod).sum_x[n][k], b.block(mod).sum_x[n][k]));
      for (int k = 0; k < 9; ++k) {
        worst = std::max(worst, relative_gap(a.block(mod).sum_xxT[n][k], b.block(mod).sum_xxT[n][k]));
      }
    }
  }
  return worst;
}

UnsummedStats unsummed_from_probe(const TensorMap& p) {
  return {p.at("count"), p.at("s_x"), p.at("s_xx"), p.at("c_x"), p.at("c_xx")};
}

struct Gap {
  std::uint64_t fused, baseline;
  double rel;
};

Gap stats_gap(int B, int N) {
  const auto probe = stats_probe(B, N, 5);
  Kernels fused(N, ContractionMode::fused), base(N, ContractionMode::materialize);
  const auto a = fused.sum_stats_over_samples(probe.at("R"), unsummed_from_probe(probe));
  const auto b = base.sum_stats_over_samples(probe.at("R"), unsummed_from_probe(probe));
  return {a.profile.peak_live_bytes, b.profile.peak_live_bytes, max_relative(a.delta, b.delta)};
}

// ---- 1, 2: fusion ----------------------------------------------------------

Outcome fusion_equivalence() {
  const auto g = stats_gap(64, 256);
  const std::uint64_t need = 64ull * 256 * 9 * 8;
  const std::uint64_t gap = g.baseline - g.fused;
  report << "fused peak " << g.fused << " B, baseline peak " << g.baseline << " B, gap " << gap << " B (need "
         << need << "), max relative difference " << g.rel << "\n";
  std::ostringstream s;
  s << "gap " << gap << " B >= " << need << ", max rel diff " << g.rel;
  return {g.baseline > g.fused && gap >= need && g.rel <= 1e-9, s.str()};
}

Outcome memory_scaling() {
  const int N = 256;
  std::vector<double> gaps;
  for (int B : {32, 64, 128}) {
    const auto g = stats_gap(B, N);
    gaps.push_back(static_cast<double>(g.baseline) - static_cast<double>(g.fused));
    report << "B=" << B << " gap " << gaps.back() << " B\n";
  }
  const double r1 = gaps[1] / gaps[0], r2 = gaps[2] / gaps[1];
  std::ostringstream s;
  s << "gap ratios " << r1 << ", " << r2;
  return {std::fabs(r1 - 2.0) <= 0.1 && std::fabs(r2 - 2.0) <= 0.1, s.str()};
}

// ---- 3, 7: search on the hot functions ------------------------------------

constexpr int kB = 64, kN = 512;
constexpr double kEps = 1e-6;

struct HotSearch {
  Graph graph;
  TensorMap probe;
  SearchResult result;
  double direct_error = 0.0;
};

HotSearch run_search(bool elbo, std::uint64_t seed) {
  HotSearch h{elbo ? build_elbo_graph(kB, kN) : build_stats_graph(kB, kN),
              elbo ? elbo_probe(kB, kN, seed) : stats_probe(kB, kN, seed), {}, 0.0};
  SearchOptions opts;
  opts.tau = 1e-12;
  h.result = search(h.graph, h.probe, kEps, opts);
  h.direct_error = oracle::direct_error(h.graph, h.probe, h.result.config, opts);
  return h;
}

std::map<std::pair<bool, std::uint64_t>, HotSearch> searches;

const HotSearch& hot(bool elbo, std::uint64_t seed) {
  auto key = std::make_pair(elbo, seed);
  auto it = searches.find(key);
  if (it == searches.end()) it = searches.emplace(key, run_search(elbo, seed)).first;
  return it->second;
}

Outcome search_feasibility() {
  bool ok = true;
  std::ostringstream s;
  for (bool elbo : {true, false}) {
    const auto& h = hot(elbo, 1);
    const auto& r = h.result.report;
    const double ratio = r.cost_final / r.cost_high;
    report << format_report(h.graph, r) << "\n";
    report << "independent recomputation of err(final) = " << h.direct_error << "\n\n";
    ok &= h.direct_error <= kEps && r.final_error <= kEps && r.cost_final <= r.cost_high;
    if (!elbo) {
      ok &= ratio <= 0.7;
      if (ratio > 0.7) {
        report << "sum-stats nodes left at fp64:";
        for (auto id : r.nodes_at_highest) report << " %" << id;
        report << "\n";
      }
    }
    s << (elbo ? "elbo" : "stats") << " err " << h.direct_error << " cost ratio " << ratio << "; ";
  }
  return {ok, s.str()};
}

Outcome map_agreement() {
  bool ok = true;
  std::ostringstream s;
  for (bool elbo : {true, false}) {
    const auto& a = hot(elbo, 1);
    const auto& b = hot(elbo, 2);
    std::size_t agree = 0, total = 0;
    for (const auto& [id, f] : a.result.config.assignment()) {
      ++total;
      if (b.result.config.at(id) == f) {
        ++agree;
      } else {
        report << (elbo ? "elbo" : "stats") << " disagreement %" << id << ": " << to_string(f) << " vs "
               << to_string(b.result.config.at(id)) << "\n";
      }
    }
    const double frac = static_cast<double>(agree) / static_cast<double>(total);
    report << (elbo ? "elbo" : "stats") << " agreement " << agree << "/" << total
           << (agree == total ? " (exact)" : "") << "\n";
    ok &= frac >= 0.95;
    s << (elbo ? "elbo " : "stats ") << agree << "/" << total << "; ";
  }
  return {ok, s.str()};
}

// ---- 4: tiny graphs against exhaustive enumeration -------------------------

struct Tiny {
  std::string name;
  Graph graph;
  TensorMap probe;
  double eps;
};

std::vector<Tiny> tiny_graphs() {
  std::vector<Tiny> out;
  {
    GraphBuilder g("cancel");
    const auto x = g.input("x", {1});
    const auto a = g.mul(x, g.scalar(1.0));
    const auto b = g.mul(x, g.scalar(1.0));
    g.output("y", g.add(g.sub(a, b), x));
    out.push_back({"cancel", g.build(), {{"x", Tensor({1}, {1.0 / 3.0})}}, 0.0});
  }
  {
    GraphBuilder g("log-chain");
    const auto x = g.input("x", {1});
    g.output("y", g.add(g.mul(g.log(x), g.scalar(1000.0)), g.scalar(1.0)));
    out.push_back({"log-chain", g.build(), {{"x", Tensor({1}, {1.0001})}}, 1e-2});
  }
  {
    GraphBuilder g("softmax");
    const auto x = g.input("x", {4});
    const auto e = g.exp(x);
    g.output("y", g.div(e, g.reduce_sum(e, {0})));
    out.push_back({"softmax", g.build(), {{"x", Tensor({4}, {0.43, 0.53, 0.63, 0.73})}}, 1e-3});
  }
  {
    GraphBuilder g("square-minus-one");
    const auto x = g.input("x", {2});
    const auto sq = g.mul(x, x);
    const auto d = g.sub(sq, g.scalar(1.0));
    g.output("y", g.add(g.mul(d, g.scalar(100.0)), x));
    out.push_back({"square-minus-one", g.build(), {{"x", Tensor({2}, {1.0001, 1.3})}}, 1e-3});
  }
  return out;
}

Outcome tiny_oracle() {
  SearchOptions opts;
  opts.formats = {Format::fp16, Format::fp64};
  bool ok = true;
  int checked = 0;
  std::ostringstream s;
  for (const auto& t : tiny_graphs()) {
    const auto ids = t.graph.compute_nodes();
    if (ids.size() > 4) {
      report << t.name << ": too many compute nodes\n";
      ok = false;
      continue;
    }
    const auto all = oracle::enumerate_configs(t.graph, t.probe, opts);
    ErrorOracle o(t.graph, {t.probe}, opts);
    const auto table = sensitivity_scan(o);
    const auto pre = precision_pass(o, t.eps, table);
    const auto st = structure_pass(o, t.eps, pre.config);
    const auto full = search(t.graph, t.probe, t.eps, opts);
    const double e_pre = oracle::lookup(all, pre.config).error;
    const double e_st = oracle::lookup(all, st.config).error;
    const double e_full = oracle::lookup(all, full.config).error;
    const std::string greedy = oracle::check_greedy_trace(t.graph, all, table, pre, opts, t.eps);
    const std::string hist = oracle::check_history(all, pre.config, st, t.eps);
    double best = std::numeric_limits<double>::infinity();
    for (const auto& e : all) {
      if (e.error <= t.eps) best = std::min(best, e.cost);
    }
    const double cost = oracle::lookup(all, full.config).cost;
    const bool good = e_pre <= t.eps && e_st <= t.eps && e_full <= t.eps && greedy.empty() && hist.empty();
    report << t.name << ": " << ids.size() << " compute nodes, " << all.size() << " configs, errors " << e_pre << "/"
           << e_st << "/" << e_full << ", final cost " << cost << " vs enumerated optimum " << best
           << (greedy.empty() ? "" : ", greedy: " + greedy) << (hist.empty() ? "" : ", history: " + hist) << "\n";
    ok &= good;
    ++checked;
    s << t.name << (cost == best ? "(optimal) " : "(feasible) ");
  }
  return {ok && checked >= 3, s.str()};
}

// ---- 5, 6: training --------------------------------------------------------

struct Curve {
  bool diverged = false;
  std::string error;
  std::vector<double> psnr;
  double final_psnr = std::nan("");
  double seconds = 0.0;
};

constexpr int kFrames = 50, kPoints = 1024;

Curve train_curve(const HotConfigs& hc) {
  const scene::SceneSpec spec;
  const auto eval = scene::make_eval_set(spec, 2048);
  TrainConfig cfg;
  cfg.components = kN;
  cfg.batch = kB;
  Curve c;
  const auto t0 = Clock::now();
  try {
    const auto r = train(scene::frame_source(spec, kFrames, kPoints), cfg, hc, [&](const MixtureModel& m) {
      const auto e = scene::evaluate(m, eval);
      return std::make_pair(e.mean, e.ci95);
    });
    for (const auto& m : r.metrics) c.psnr.push_back(m.psnr_mean);
    c.final_psnr = c.psnr.back();
  } catch (const NumericalError& e) {
    c.diverged = true;
    c.error = e.what();
  }
  c.seconds = std::chrono::duration<double>(Clock::now() - t0).count();
  return c;
}

// Non-decreasing within a ripple band: no frame falls more than `band` below
// the best value seen earlier in the window.
bool rising_within(const std::vector<double>& v, std::size_t last, double band) {
  if (v.size() < last) return false;
  double best = -std::numeric_limits<double>::infinity();
  for (std::size_t i = v.size() - last; i < v.size(); ++i) {
    if (v[i] < best - band) return false;
    best = std::max(best, v[i]);
  }
  return true;
}

std::string curve_text(const Curve& c) {
  std::ostringstream s;
  s.precision(4);
  for (std::size_t i = 0; i < c.psnr.size(); ++i) s << (i ? " " : "") << c.psnr[i];
  return s.str();
}

std::optional<Curve> fp64_curve;

const Curve& reference_curve() {
  if (!fp64_curve) fp64_curve = train_curve(HotConfigs{});
  return *fp64_curve;
}

Outcome training_parity() {
  const auto& ref = reference_curve();
  const HotConfigs maps{hot(true, 1).result.config, hot(false, 1).result.config};
  const auto opt = train_curve(maps);
  report << "fp64 curve (" << ref.seconds << " s): " << curve_text(ref) << "\n";
  report << "searched-map curve (" << opt.seconds << " s): " << curve_text(opt) << "\n";
  if (ref.diverged || opt.diverged) return {false, "training diverged: " + ref.error + opt.error};
  const double diff = std::fabs(ref.final_psnr - opt.final_psnr);
  const bool rise_ref = rising_within(ref.psnr, 10, 0.5), rise_opt = rising_within(opt.psnr, 10, 0.5);
  std::ostringstream s;
  s.precision(4);
  s << "fp64 " << ref.final_psnr << " dB, maps " << opt.final_psnr << " dB, |diff| " << diff
    << " dB, last-10 rising " << (rise_ref ? "yes" : "no") << "/" << (rise_opt ? "yes" : "no");
  return {diff <= 1.0 && rise_ref && rise_opt, s.str()};
}

Outcome homogeneous_ordering() {
  const auto& ref = reference_curve();
  std::map<Format, Curve> curves;
  for (Format f : {Format::fp32, Format::tf32, Format::fp16}) {
    curves[f] = train_curve({uniform_config(build_elbo_graph(kB, kN), f), uniform_config(build_stats_graph(kB, kN), f)});
  }
  curves[Format::fp64] = ref;
  std::vector<std::pair<double, Format>> order;
  for (const auto& [f, c] : curves) {
    report << to_string(f) << " (" << c.seconds << " s): ";
    if (c.diverged) {
      report << "diverged: " << c.error << "\n";
    } else {
      report << "final " << c.final_psnr << " dB; curve " << curve_text(c) << "\n";
      order.emplace_back(c.final_psnr, f);
    }
  }
  std::sort(order.rbegin(), order.rend());
  std::ostringstream s;
  s.precision(4);
  for (std::size_t i = 0; i < order.size(); ++i) {
    s << (i ? " > " : "") << to_string(order[i].second) << " " << order[i].first;
  }
  if (curves[Format::fp16].diverged) s << "; fp16 diverged";
  report << "ordering: " << s.str() << "\n";
  const auto& tf = curves[Format::tf32];
  const bool ok = !ref.diverged && (tf.diverged || ref.final_psnr >= tf.final_psnr);
  return {ok, s.str()};
}

// ---- 8: numerics -----------------------------------------------------------

Outcome numerics_oracle() {
  bool ok = true;
  std::ostringstream s;
  for (const auto& c : oracle::kRoundingCases) {
    oracle::SampleStream stream(c.seed);
    std::vector<double> got;
    got.reserve(oracle::kRoundingSamples);
    int mismatches = 0;
    const Format f = format_from_string(c.name);
    for (int i = 0; i < oracle::kRoundingSamples; ++i) {
      const double x = stream.sample(c.lo, c.hi, c.man_bits);
      const double r = round_to_format(x, f);
      const double ref = oracle::reference_round(x, c.exp_bits, c.man_bits);
      if (!(r == ref || (std::isnan(r) && std::isnan(ref))) || !oracle::packs_exactly(r, c.exp_bits, c.man_bits)) {
        ++mismatches;
      }
      got.push_back(r);
    }
    const bool digest = oracle::fnv_doubles(got) == c.digest;
    report << c.name << ": " << mismatches << " mismatches in " << oracle::kRoundingSamples << ", digest "
           << (digest ? "matches" : "differs") << "\n";
    ok &= mismatches == 0 && digest;
    s << c.name << " " << mismatches << " mismatches; ";
  }
  auto err = [](std::vector<double> a, std::vector<double> b) {
    const auto n = static_cast<std::int64_t>(a.size());
    return relative_error(std::vector<Tensor>{Tensor({n}, std::move(a))}, std::vector<Tensor>{Tensor({n}, std::move(b))},
                          1e-12);
  };
  const double e1 = err({3, 4}, {3, 4}), e2 = err({3, 4}, {0, 0}), e3 = err({0, 0}, {1e-13, 0});
  report << "relative_error examples: " << e1 << " " << e2 << " " << e3 << "\n";
  ok &= e1 == 0.0 && e2 == 1.0 && e3 == 0.1;
  s << "relative_error " << e1 << "/" << e2 << "/" << e3;
  return {ok, s.str()};
}

// ---- 9: conjugate update and responsibilities ------------------------------

Outcome conjugate_oracle() {
  std::mt19937_64 rng(2024);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  double worst_update = 0.0, worst_R = 0.0;
  for (int inst = 0; inst < 100; ++inst) {
    const int N = 1 + static_cast<int>(rng() % 4);
    const int P = 3 + static_cast<int>(rng() % 10);
    Tensor pts = Tensor::zeros({P, kPointWidth});
    for (double& v : pts.data) v = u(rng);
    Prior prior;
    prior.space_scale = 0.05 + u(rng);
    prior.color_scale = 0.01 + 0.1 * u(rng);
    for (int n = 0; n < N; ++n) {
      prior.space_m0.push_back({u(rng), u(rng), u(rng)});
      prior.color_m0.push_back({u(rng), u(rng), u(rng)});
    }
    // A model with some evidence so responsibilities are non-trivial.
    auto seed_stats = SufficientStats::zeros(N);
    Kernels k(N);
    const Tensor warm = pts;
    Tensor R0 = Tensor::zeros({P, N});
    for (int b = 0; b < P; ++b) R0.at(b, static_cast<int>(rng() % N)) = 1.0;
    seed_stats += k.sum_stats_over_samples(R0, unsummed_stats(warm)).delta;
    const auto model = update_from_statistics(prior, seed_stats);

    const auto whole = k.compute_elbo_delta(model, pts);
    const auto o = oracle::elbo_oracle(model, pts);
    for (int b = 0; b < P; ++b)
      for (int n = 0; n < N; ++n) worst_R = std::max(worst_R, std::fabs(whole.R.at(b, n) - double(o.R[b][n])));

    const auto one_shot = update_from_statistics(prior, k.sum_stats_over_samples(whole.R, unsummed_stats(pts)).delta);
    const int c1 = P / 3, c2 = 2 * P / 3;
    auto acc = SufficientStats::zeros(N);
    for (auto [lo, hi] : {std::pair{0, c1}, std::pair{c1, c2}, std::pair{c2, P}}) {
      if (hi == lo) continue;
      Tensor part = Tensor::zeros({hi - lo, kPointWidth});
      std::copy(pts.data.begin() + lo * kPointWidth, pts.data.begin() + hi * kPointWidth, part.data.begin());
      const auto r = k.compute_elbo_delta(model, part);
      acc += k.sum_stats_over_samples(r.R, unsummed_stats(part)).delta;
    }
    const auto batched = update_from_statistics(prior, acc);
    for (int n = 0; n < N; ++n) {
      worst_update = std::max(worst_update, std::fabs(one_shot.alpha[n] - batched.alpha[n]));
      for (Modality mod : kModalities) {
        const auto &a = one_shot.block(mod), &b = batched.block(mod);
        worst_update = std::max({worst_update, std::fabs(a.kappa[n] - b.kappa[n]), std::fabs(a.dof[n] - b.dof[n])});
        for (int i = 0; i < 3; ++i) worst_update = std::max(worst_update, std::fabs(a.m[n][i] - b.m[n][i]));
        for (int i = 0; i < 9; ++i) worst_update = std::max(worst_update, std::fabs(a.V[n][i] - b.V[n][i]));
      }
    }
  }
  report << "100 instances: max batched-vs-one-shot difference " << worst_update
         << ", max responsibility difference vs long-double oracle " << worst_R << "\n";
  std::ostringstream s;
  s << "update diff " << worst_update << ", R diff " << worst_R;
  return {worst_update <= 1e-10 && worst_R <= 1e-12, s.str()};
}

}  // namespace

int main() {
  struct Criterion {
    int id;
    const char* name;
    double budget_seconds;
    std::function<Outcome()> run;
  };
  const std::vector<Criterion> criteria = {
      {1, "fusion equivalence and memory separation", 10, fusion_equivalence},
      {2, "memory gap doubles with batch size", 60, memory_scaling},
      {3, "search feasibility and cost", 300, search_feasibility},
      {4, "search oracle on tiny graphs", 30, tiny_oracle},
      {5, "training parity", 900, training_parity},
      {6, "homogeneous precision ordering", 1800, homogeneous_ordering},
      {7, "map independent of probe data", 600, map_agreement},
      {8, "numerics oracle suite", 10, numerics_oracle},
      {9, "conjugate update oracle", 60, conjugate_oracle},
  };
  int failures = 0;
  for (const auto& c : criteria) {
    report << "== criterion " << c.id << ": " << c.name << "\n";
    const auto t0 = Clock::now();
    Outcome o;
    try {
      o = c.run();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(Clock::now() - t0).count();
    const bool in_time = secs <= c.budget_seconds;
    const bool pass = o.pass && in_time;
    failures += pass ? 0 : 1;
    char timing[96];
    std::snprintf(timing, sizeof timing, " [%.1f s of %.0f s]", secs, c.budget_seconds);
    std::cout << (pass ? "PASS" : "FAIL") << " " << c.id << " " << c.name << ": " << o.summary << timing
              << (in_time ? "" : " over time budget") << std::endl;
    report << (pass ? "PASS" : "FAIL") << timing << "\n\n";
  }
  std::ofstream("acceptance_report.txt") << report.str();
  return failures == 0 ? 0 : 1;
}
