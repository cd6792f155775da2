#include <gtest/gtest.h>

#include <cmath>
#include <filesystem>
#include <random>
#include <set>

#include "adaprec/errors.hpp"
#include "adaprec/vbgs.hpp"
#include "elbo_oracle.hpp"

using namespace adaprec;
using namespace adaprec::vbgs;

namespace {

Mat3 diag3(double v) { return {v, 0, 0, 0, v, 0, 0, 0, v}; }

// Random but valid model with N components in the unit cube.
MixtureModel random_model(int N, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  MixtureModel m;
  for (int n = 0; n < N; ++n) m.alpha.push_back(0.5 + 20 * u(rng));
  for (Modality mod : kModalities) {
    auto& b = m.block(mod);
    for (int n = 0; n < N; ++n) {
      b.m.push_back({u(rng), u(rng), u(rng)});
      b.kappa.push_back(0.5 + 30 * u(rng));
      b.dof.push_back(4 + 30 * u(rng));
      // A = L L^T + small diagonal, genuinely non-diagonal.
      double L[9] = {0.1 + u(rng), 0, 0, u(rng) - 0.5, 0.1 + u(rng), 0, u(rng) - 0.5, u(rng) - 0.5, 0.1 + u(rng)};
      Mat3 V{};
      for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 3; ++j)
          for (int k = 0; k < 3; ++k) V[i * 3 + j] += 0.05 * L[i * 3 + k] * L[j * 3 + k];
      b.V.push_back(V);
    }
  }
  return m;
}

Tensor random_points(int P, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Tensor t = Tensor::zeros({P, kPointWidth});
  for (double& v : t.data) v = u(rng);
  return t;
}

MixtureModel two_components(const Vec3& a, const Vec3& b) {
  MixtureModel m;
  m.alpha = {1.0, 1.0};
  for (Modality mod : kModalities) {
    auto& blk = m.block(mod);
    blk.m = {a, b};
    if (mod == Modality::color) blk.m = {Vec3{0.5, 0.5, 0.5}, Vec3{0.5, 0.5, 0.5}};
    blk.kappa = {10.0, 10.0};
    blk.dof = {10.0, 10.0};
    blk.V = {diag3(0.01), diag3(0.01)};
  }
  return m;
}

Tensor one_point(const Vec3& s) { return Tensor({1, 6}, {s[0], s[1], s[2], 0.5, 0.5, 0.5}); }

Prior simple_prior(int N) {
  Prior p;
  p.alpha0 = 1.0;
  p.kappa0 = 1.0;
  p.dof0 = 5.0;
  p.space_scale = 0.1;
  p.color_scale = 0.01;
  p.space_m0.assign(static_cast<std::size_t>(N), Vec3{0, 0, 0});
  p.color_m0.assign(static_cast<std::size_t>(N), Vec3{0.5, 0.5, 0.5});
  return p;
}

SufficientStats stats_of(const Tensor& pts, const Tensor& R) {
  Kernels k(static_cast<int>(R.shape[1]));
  return k.sum_stats_over_samples(R, unsummed_stats(pts)).delta;
}

FrameSource from_frames(std::vector<Tensor> frames) {
  auto i = std::make_shared<std::size_t>(0);
  return [frames = std::move(frames), i]() -> std::optional<Tensor> {
    if (*i >= frames.size()) return std::nullopt;
    return frames[(*i)++];
  };
}

}  // namespace

TEST(Elbo, IdenticalComponentsSplitEvenly) {
  Kernels k(2);
  const auto r = k.compute_elbo_delta(two_components({0, 0, 0}, {0, 0, 0}), one_point({0.1, 0.2, 0.3}));
  EXPECT_DOUBLE_EQ(r.R.at(0, 0), 0.5);
  EXPECT_DOUBLE_EQ(r.R.at(0, 1), 0.5);
}

TEST(Elbo, FarComponentGetsNothing) {
  Kernels k(2);
  const auto r = k.compute_elbo_delta(two_components({0, 0, 0}, {50, 50, 50}), one_point({0, 0, 0}));
  EXPECT_NEAR(r.R.at(0, 0), 1.0, 1e-10);
  EXPECT_NEAR(r.R.at(0, 1), 0.0, 1e-10);
  EXPECT_FALSE(r.nonfinite);
}

TEST(Elbo, MatchesDirectFormulaSmall) {
  const auto model = random_model(3, 11);
  const auto pts = random_points(4, 12);
  Kernels k(3);
  const auto r = k.compute_elbo_delta(model, pts);
  const auto o = oracle::elbo_oracle(model, pts);
  for (int b = 0; b < 4; ++b) {
    EXPECT_NEAR(r.elbo[b], static_cast<double>(o.elbo[b]), 1e-12 * std::max(1.0, std::fabs(double(o.elbo[b]))));
    double rowsum = 0;
    for (int n = 0; n < 3; ++n) {
      EXPECT_NEAR(r.R.at(b, n), static_cast<double>(o.R[b][n]), 1e-12);
      rowsum += r.R.at(b, n);
    }
    EXPECT_NEAR(rowsum, 1.0, 1e-14);
  }
}

TEST(Elbo, MatchesDirectFormulaLarger) {
  const auto model = random_model(40, 21);
  const auto pts = random_points(33, 22);
  Kernels k(40, ContractionMode::materialize);
  const auto r = k.compute_elbo_delta(model, pts);
  const auto o = oracle::elbo_oracle(model, pts);
  for (int b = 0; b < 33; ++b) {
    EXPECT_NEAR(r.elbo[b], static_cast<double>(o.elbo[b]), 1e-11 * std::max(1.0, std::fabs(double(o.elbo[b]))));
    for (int n = 0; n < 40; ++n) EXPECT_NEAR(r.R.at(b, n), static_cast<double>(o.R[b][n]), 1e-11);
  }
}

TEST(Elbo, RejectsIndefiniteScaleWithComponentId) {
  auto model = random_model(5, 3);
  model.color.V[3] = diag3(-1.0);
  Kernels k(5);
  try {
    k.compute_elbo_delta(model, random_points(2, 1));
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("component 3"), std::string::npos) << e.what();
  }
}

TEST(Stats, UnsummedExample) {
  const auto su = unsummed_stats(Tensor({1, 6}, {1, 2, 3, 0.1, 0.2, 0.3}));
  EXPECT_EQ(su.count.data, std::vector<double>{1.0});
  EXPECT_EQ(su.space_x.data, (std::vector<double>{1, 2, 3}));
  EXPECT_EQ(su.space_xx.data, (std::vector<double>{1, 2, 3, 2, 4, 6, 3, 6, 9}));
  EXPECT_NEAR(su.color_xx.data[8], 0.09, 1e-17);
  EXPECT_THROW(unsummed_stats(Tensor::zeros({2, 5})), ShapeError);
}

TEST(Stats, OneHotResponsibilitiesRouteSums) {
  const Tensor pts({3, 6}, {1, 0, 0, 0, 0, 0,  //
                            0, 2, 0, 0, 0, 0,  //
                            0, 0, 3, 0, 0, 1});
  const Tensor R({3, 2}, {1, 0, 0, 1, 0, 1});
  const auto s = stats_of(pts, R);
  EXPECT_EQ(s.n_count, (std::vector<double>{1, 2}));
  EXPECT_EQ(s.space.sum_x[0], (Vec3{1, 0, 0}));
  EXPECT_EQ(s.space.sum_x[1], (Vec3{0, 2, 3}));
  EXPECT_EQ(s.space.sum_xxT[1][4], 4.0);
  EXPECT_EQ(s.space.sum_xxT[1][8], 9.0);
  EXPECT_EQ(s.color.sum_x[1], (Vec3{0, 0, 1}));
}

TEST(Stats, FusedEqualsBaselineAndSavesTheIntermediate) {
  const int B = 64, N = 256;
  const auto probe = stats_probe(B, N, 5);
  UnsummedStats su{probe.at("count"), probe.at("s_x"), probe.at("s_xx"), probe.at("c_x"), probe.at("c_xx")};
  Kernels fused(N, ContractionMode::fused), base(N, ContractionMode::materialize);
  const auto a = fused.sum_stats_over_samples(probe.at("R"), su);
  const auto b = base.sum_stats_over_samples(probe.at("R"), su);
  for (int n = 0; n < N; ++n) {
    EXPECT_NEAR(a.delta.n_count[n], b.delta.n_count[n], 1e-12);
    for (int k = 0; k < 9; ++k) EXPECT_NEAR(a.delta.color.sum_xxT[n][k], b.delta.color.sum_xxT[n][k], 1e-12);
  }
  // The [B,N,9] product is never materialised when fused.
  EXPECT_GE(b.profile.peak_live_bytes - a.profile.peak_live_bytes, std::uint64_t{64 * 256 * 9 * 8});
}

TEST(Stats, AdditiveOverBatches) {
  const auto pts = random_points(10, 7);
  Tensor R = Tensor::zeros({10, 4});
  std::mt19937_64 rng(8);
  for (int b = 0; b < 10; ++b) {
    double t = 0;
    for (int n = 0; n < 4; ++n) t += (R.at(b, n) = std::uniform_real_distribution<double>(0, 1)(rng));
    for (int n = 0; n < 4; ++n) R.at(b, n) /= t;
  }
  auto rows = [](const Tensor& t, int lo, int hi) {
    const auto w = t.shape[1];
    return Tensor({hi - lo, w}, std::vector<double>(t.data.begin() + lo * w, t.data.begin() + hi * w));
  };
  auto acc = stats_of(rows(pts, 0, 3), rows(R, 0, 3));
  acc += stats_of(rows(pts, 3, 10), rows(R, 3, 10));
  const auto all = stats_of(pts, R);
  double total = 0;
  for (int n = 0; n < 4; ++n) {
    EXPECT_NEAR(acc.n_count[n], all.n_count[n], 1e-12);
    total += all.n_count[n];
    for (int k = 0; k < 9; ++k) EXPECT_NEAR(acc.space.sum_xxT[n][k], all.space.sum_xxT[n][k], 1e-12);
  }
  EXPECT_NEAR(total, 10.0, 1e-12);
}

TEST(Update, ZeroStatisticsGiveThePrior) {
  const auto p = simple_prior(3);
  const auto m = update_from_statistics(p, SufficientStats::zeros(3));
  const auto q = prior_model(p);
  EXPECT_EQ(m.alpha, q.alpha);
  EXPECT_EQ(m.space.m, q.space.m);
  EXPECT_EQ(m.space.kappa, q.space.kappa);
  EXPECT_EQ(m.space.dof, q.space.dof);
  for (int n = 0; n < 3; ++n)
    for (int k = 0; k < 9; ++k) EXPECT_NEAR(m.space.V[n][k], q.space.V[n][k], 1e-15);
}

TEST(Update, OnePointHalvesTheDistanceToThePriorMean) {
  const auto p = simple_prior(1);
  const Tensor pt({1, 6}, {2, 4, 6, 0.5, 0.5, 0.5});
  const auto m = update_from_statistics(p, stats_of(pt, Tensor({1, 1}, {1.0})));
  EXPECT_DOUBLE_EQ(m.space.kappa[0], 2.0);
  EXPECT_DOUBLE_EQ(m.space.dof[0], 6.0);
  EXPECT_DOUBLE_EQ(m.alpha[0], 2.0);
  EXPECT_NEAR(m.space.m[0][0], 1.0, 1e-15);
  EXPECT_NEAR(m.space.m[0][1], 2.0, 1e-15);
  EXPECT_NEAR(m.space.m[0][2], 3.0, 1e-15);
  // V = V0 + kappa0*1/(kappa0+1) x x^T
  EXPECT_NEAR(m.space.V[0][0], 0.1 + 0.5 * 4, 1e-12);
  EXPECT_NEAR(m.space.V[0][5], 0.5 * 4 * 6, 1e-12);
}

TEST(Update, MatchesCentredTextbookForm) {
  const int N = 3, P = 20;
  auto p = simple_prior(N);
  p.space_m0 = {Vec3{0.1, 0.2, 0.3}, Vec3{0.9, 0.1, 0.5}, Vec3{0.4, 0.4, 0.4}};
  const auto pts = random_points(P, 31);
  Tensor R = Tensor::zeros({P, N});
  std::mt19937_64 rng(32);
  for (int b = 0; b < P; ++b) {
    double t = 0;
    for (int n = 0; n < N; ++n) t += (R.at(b, n) = std::uniform_real_distribution<double>(0, 1)(rng));
    for (int n = 0; n < N; ++n) R.at(b, n) /= t;
  }
  const auto m = update_from_statistics(p, stats_of(pts, R));
  for (int n = 0; n < N; ++n) {
    std::vector<std::array<long double, 3>> xs;
    std::vector<long double> w;
    for (int b = 0; b < P; ++b) {
      xs.push_back({pts.at(b, 0), pts.at(b, 1), pts.at(b, 2)});
      w.push_back(R.at(b, n));
    }
    const std::array<long double, 3> m0{p.space_m0[n][0], p.space_m0[n][1], p.space_m0[n][2]};
    const auto o = oracle::niw_posterior(p.alpha0, p.kappa0, p.dof0, p.space_scale, m0, xs, w);
    EXPECT_NEAR(m.alpha[n], double(o.alpha), 1e-12);
    EXPECT_NEAR(m.space.kappa[n], double(o.kappa), 1e-12);
    EXPECT_NEAR(m.space.dof[n], double(o.dof), 1e-12);
    for (int k = 0; k < 3; ++k) EXPECT_NEAR(m.space.m[n][k], double(o.m[k]), 1e-12);
    for (int k = 0; k < 9; ++k) EXPECT_NEAR(m.space.V[n][k], double(o.V[k]), 1e-11);
  }
}

TEST(Update, ThreeBatchesEqualOneConcatenated) {
  const int N = 4;
  const auto p = simple_prior(N);
  const auto pts = random_points(30, 41);
  const auto model = random_model(N, 42);
  Kernels k(N);
  const auto R = k.compute_elbo_delta(model, pts).R;
  auto rows = [](const Tensor& t, int lo, int hi) {
    const auto w = t.shape[1];
    return Tensor({hi - lo, w}, std::vector<double>(t.data.begin() + lo * w, t.data.begin() + hi * w));
  };
  auto acc = SufficientStats::zeros(N);
  for (int lo : {0, 10, 20}) acc += stats_of(rows(pts, lo, lo + 10), rows(R, lo, lo + 10));
  const auto a = update_from_statistics(p, acc);
  const auto b = update_from_statistics(p, stats_of(pts, R));
  for (int n = 0; n < N; ++n) {
    for (int c = 0; c < 3; ++c) EXPECT_NEAR(a.color.m[n][c], b.color.m[n][c], 1e-10);
    for (int c = 0; c < 9; ++c) EXPECT_NEAR(a.space.V[n][c], b.space.V[n][c], 1e-10);
  }
}

TEST(Update, IndefiniteScaleNamesTheComponent) {
  const auto p = simple_prior(5);
  auto s = SufficientStats::zeros(5);
  s.space.sum_xxT[2] = diag3(-10.0);
  try {
    update_from_statistics(p, s);
    FAIL() << "expected NumericalError";
  } catch (const NumericalError& e) {
    EXPECT_NE(std::string(e.what()).find("component 2"), std::string::npos) << e.what();
  }
}

TEST(Reassign, ZeroRequestedChangesNothing) {
  auto m = random_model(4, 1);
  const auto before = m;
  std::vector<bool> used(4, false);
  const auto out = reassign(m, random_points(6, 2), std::vector<double>(6, -1.0), SufficientStats::zeros(4), used,
                            {0, 1.0}, 9);
  EXPECT_TRUE(out.points.empty());
  EXPECT_EQ(m.space.m, before.space.m);
}

TEST(Reassign, EqualElboGivesUniformWeights) {
  const auto w = reassign_weights(std::vector<double>(8, -3.25), 1.0);
  for (double x : w) EXPECT_DOUBLE_EQ(x, 0.125);
  EXPECT_THROW(reassign_weights({1.0}, 0.0), ConfigError);
}

TEST(Reassign, OutlierIsPickedAndLeastUsedComponentMoves) {
  auto m = random_model(4, 1);
  auto stats = SufficientStats::zeros(4);
  stats.n_count = {5.0, 0.5, 9.0, 3.0};
  const auto pts = random_points(6, 2);
  std::vector<double> elbo(6, 2.0);
  elbo[4] = -500.0;
  std::vector<bool> used(4, false);
  const auto out = reassign(m, pts, elbo, stats, used, {1, 1.0}, 3);
  ASSERT_EQ(out.points.size(), 1u);
  EXPECT_EQ(out.points[0], 4);
  EXPECT_EQ(out.components[0], 1);
  EXPECT_TRUE(used[1]);
  EXPECT_EQ(m.space.m[1], (Vec3{pts.at(4, 0), pts.at(4, 1), pts.at(4, 2)}));
  EXPECT_EQ(m.color.m[1], (Vec3{pts.at(4, 3), pts.at(4, 4), pts.at(4, 5)}));
}

TEST(Reassign, DrawsWithoutReplacementAndSkipsUsed) {
  auto m = random_model(6, 1);
  std::vector<bool> used{true, false, false, true, false, false};
  std::vector<double> elbo(5, 0.0);
  elbo[0] = -1e6;  // the others underflow to zero weight after this pick
  const auto out = reassign(m, random_points(5, 2), elbo, SufficientStats::zeros(6), used, {4, 1.0}, 4);
  ASSERT_EQ(out.points.size(), 4u);
  std::set<int> rows(out.points.begin(), out.points.end());
  EXPECT_EQ(rows.size(), 4u);
  for (int c : out.components) EXPECT_TRUE(c != 0 && c != 3);
  std::vector<bool> all(6, true);
  EXPECT_TRUE(reassign(m, random_points(5, 2), elbo, SufficientStats::zeros(6), all, {4, 1.0}, 4).points.empty());
}

TEST(Train, EmptyStream) {
  TrainConfig cfg;
  cfg.components = 8;
  cfg.batch = 4;
  cfg.n_reassign = 2;
  const auto r = train(from_frames({}), cfg, HotConfigs{});
  EXPECT_TRUE(r.metrics.empty());
  EXPECT_EQ(r.state.frames_seen, 0);
}

TEST(Train, FiveFramesGiveFiveMetricRows) {
  TrainConfig cfg;
  cfg.components = 16;
  cfg.batch = 8;
  cfg.n_reassign = 4;
  std::vector<Tensor> frames;
  for (int i = 0; i < 5; ++i) frames.push_back(random_points(20, 100 + i));
  int evals = 0;
  const auto r = train(from_frames(frames), cfg, HotConfigs{}, [&](const MixtureModel&) {
    ++evals;
    return std::make_pair(10.0, 1.0);
  });
  ASSERT_EQ(r.metrics.size(), 5u);
  EXPECT_EQ(evals, 5);
  EXPECT_TRUE(r.metrics[0].highest_precision);
  EXPECT_FALSE(r.metrics[1].highest_precision);
  for (int i = 0; i < 5; ++i) EXPECT_EQ(r.metrics[i].frame, i + 1);
  EXPECT_EQ(r.state.frames_seen, 5);
  double total = 0;
  for (double c : r.state.stats.n_count) total += c;
  EXPECT_GT(total, 0.0);
  EXPECT_LE(total, 100.0 + 1e-9);
  r.state.model.validate();
}

TEST(Train, FirstFrameAssignsEveryPoint) {
  TrainConfig cfg;
  cfg.components = 8;
  cfg.batch = 5;
  cfg.n_reassign = 3;
  Trainer t(cfg, {});
  t.step(random_points(23, 9));
  double total = 0;
  for (double c : t.state().stats.n_count) total += c;
  EXPECT_NEAR(total, 23.0, 1e-10);
}

TEST(Train, StaleMapIsRejected) {
  TrainConfig cfg;
  cfg.components = 16;
  cfg.batch = 8;
  cfg.n_reassign = 2;
  PrecisionMap map;
  map.function = "compute_elbo_delta";
  const Graph other = build_elbo_graph(4, 16);
  map.graph_fingerprint = other.fingerprint();
  map.config = uniform_config(other, Format::fp32);
  EXPECT_THROW(train(from_frames({random_points(8, 1)}), cfg, map, std::nullopt), StaleMapError);
}

TEST(Train, LowPrecisionConfigsStayClose) {
  TrainConfig cfg;
  cfg.components = 16;
  cfg.batch = 8;
  cfg.n_reassign = 4;
  std::vector<Tensor> frames;
  for (int i = 0; i < 3; ++i) frames.push_back(random_points(32, 200 + i));
  const auto hi = train(from_frames(frames), cfg, HotConfigs{});
  const HotConfigs fp32{uniform_config(build_elbo_graph(8, 16), Format::fp32),
                        uniform_config(build_stats_graph(8, 16), Format::fp32)};
  const auto lo = train(from_frames(frames), cfg, fp32);
  for (int n = 0; n < 16; ++n)
    for (int k = 0; k < 3; ++k) EXPECT_NEAR(hi.state.model.space.m[n][k], lo.state.model.space.m[n][k], 1e-4);
}

TEST(Checkpoint, RoundTripIsExact) {
  TrainConfig cfg;
  cfg.components = 8;
  cfg.batch = 4;
  cfg.n_reassign = 2;
  Trainer t(cfg, {});
  t.step(random_points(12, 5));
  t.step(random_points(12, 6));
  const auto path = std::filesystem::temp_directory_path() / "adaprec_ckpt_test.json";
  save_checkpoint(t.state(), path);
  const auto s = load_checkpoint(path);
  EXPECT_EQ(s.frames_seen, 2);
  EXPECT_EQ(s.model.alpha, t.state().model.alpha);
  EXPECT_EQ(s.model.space.V, t.state().model.space.V);
  EXPECT_EQ(s.model.color.m, t.state().model.color.m);
  EXPECT_EQ(s.stats.n_count, t.state().stats.n_count);
  EXPECT_EQ(s.prior.space_m0, t.state().prior.space_m0);
  EXPECT_DOUBLE_EQ(s.prior.space_scale, t.state().prior.space_scale);
  std::filesystem::remove(path);
  EXPECT_THROW(load_checkpoint(path), FileNotFoundError);
}

TEST(Probes, DeterministicAndValid) {
  const auto a = elbo_probe(8, 5, 3), b = elbo_probe(8, 5, 3), c = elbo_probe(8, 5, 4);
  EXPECT_EQ(a.at("s_W").data, b.at("s_W").data);
  EXPECT_NE(a.at("s_W").data, c.at("s_W").data);
  const auto g = build_elbo_graph(8, 5);
  const auto r = execute(g, a, uniform_config(g, Format::fp64));
  EXPECT_FALSE(r.nonfinite);
  const auto s = stats_probe(8, 5, 3);
  for (int b2 = 0; b2 < 8; ++b2) {
    double t = 0;
    for (int n = 0; n < 5; ++n) t += s.at("R").at(b2, n);
    EXPECT_NEAR(t, 1.0, 1e-12);
  }
}

TEST(Config, Validation) {
  TrainConfig c;
  c.n_reassign = c.components + 1;
  EXPECT_THROW(c.validate(), ConfigError);
  c = TrainConfig{};
  c.dof0 = 4.0;
  EXPECT_THROW(c.validate(), ConfigError);
  EXPECT_THROW(build_elbo_graph(0, 3), ConfigError);
  EXPECT_EQ(TrainConfig{}.n_reassign, 64);
}
