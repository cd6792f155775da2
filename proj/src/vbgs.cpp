#include "adaprec/vbgs.hpp"

#include <Eigen/Cholesky>
#include <Eigen/Core>
#include <algorithm>
#include <chrono>
#include <cmath>
#include <fstream>
#include <numbers>
#include <numeric>
#include <random>
#include <sstream>

#include <json.hpp>

#include "adaprec/errors.hpp"
#include "adaprec/numerics.hpp"

namespace adaprec::vbgs {

namespace {

using Clock = std::chrono::steady_clock;
using Json = nlohmann::ordered_json;

double since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string prefix(Modality m) { return m == Modality::space ? "s_" : "c_"; }

Eigen::Matrix3d to_eigen(const Mat3& a) {
  Eigen::Matrix3d m;
  for (int r = 0; r < kDim; ++r)
    for (int c = 0; c < kDim; ++c) m(r, c) = a[static_cast<std::size_t>(r * kDim + c)];
  return m;
}

Mat3 from_eigen(const Eigen::Matrix3d& m) {
  Mat3 a{};
  for (int r = 0; r < kDim; ++r)
    for (int c = 0; c < kDim; ++c) a[static_cast<std::size_t>(r * kDim + c)] = m(r, c);
  return a;
}

Mat3 scaled_identity(double s) {
  Mat3 a{};
  for (int i = 0; i < kDim; ++i) a[static_cast<std::size_t>(i * kDim + i)] = s;
  return a;
}

// Cholesky with the single jitter retry; returns the factor.
Eigen::LLT<Eigen::Matrix3d> factor_or_throw(Eigen::Matrix3d v, int component, Modality m, bool allow_jitter) {
  Eigen::LLT<Eigen::Matrix3d> llt(v);
  if (llt.info() == Eigen::Success && v.allFinite()) return llt;
  if (allow_jitter && v.allFinite()) {
    v += (1e-9 * v.trace() / kDim) * Eigen::Matrix3d::Identity();
    llt.compute(v);
    if (llt.info() == Eigen::Success) return llt;
  }
  throw NumericalError("component " + std::to_string(component) + ": " + std::string(to_string(m)) +
                       " scale matrix V is not positive definite");
}

Vec3 row3(const Tensor& t, std::int64_t r, int offset) {
  const std::int64_t w = t.shape[1];
  return {t[static_cast<std::size_t>(r * w + offset)], t[static_cast<std::size_t>(r * w + offset + 1)],
          t[static_cast<std::size_t>(r * w + offset + 2)]};
}

void check_frame(const Tensor& batch) {
  if (batch.rank() != 2 || batch.shape[1] != kPointWidth) {
    throw ShapeError("point batch must be [P," + std::to_string(kPointWidth) + "], got " +
                     shape_to_string(batch.shape));
  }
  if (!batch.all_finite()) throw NumericalError("point batch has non-finite entries");
}

Tensor slice_rows(const Tensor& t, std::int64_t begin, std::int64_t end) {
  const std::int64_t w = t.shape[1];
  return Tensor({end - begin, w}, std::vector<double>(t.data.begin() + begin * w, t.data.begin() + end * w));
}

}  // namespace

std::string_view to_string(Modality m) { return m == Modality::space ? "space" : "color"; }

void MixtureModel::validate() const {
  const std::size_t n = alpha.size();
  for (Modality mod : kModalities) {
    const auto& b = block(mod);
    if (b.m.size() != n || b.kappa.size() != n || b.V.size() != n || b.dof.size() != n) {
      throw ShapeError(std::string(to_string(mod)) + " block does not have " + std::to_string(n) + " components");
    }
  }
  for (std::size_t i = 0; i < n; ++i) {
    const int id = static_cast<int>(i);
    if (!(alpha[i] > 0.0)) throw NumericalError("component " + std::to_string(id) + ": alpha must be positive");
    for (Modality mod : kModalities) {
      const auto& b = block(mod);
      if (!(b.kappa[i] > 0.0)) throw NumericalError("component " + std::to_string(id) + ": kappa must be positive");
      if (!(b.dof[i] > kDim - 1)) throw NumericalError("component " + std::to_string(id) + ": dof must exceed d-1");
      factor_or_throw(to_eigen(b.V[i]), id, mod, false);
    }
  }
}

MixtureModel prior_model(const Prior& prior) {
  const std::size_t n = prior.space_m0.size();
  if (prior.color_m0.size() != n) throw ConfigError("prior means of both modalities must have equal length");
  MixtureModel m;
  m.alpha.assign(n, prior.alpha0);
  for (Modality mod : kModalities) {
    auto& b = m.block(mod);
    b.m = prior.m0(mod);
    b.kappa.assign(n, prior.kappa0);
    b.V.assign(n, scaled_identity(prior.scale(mod)));
    b.dof.assign(n, prior.dof0);
  }
  return m;
}

SufficientStats SufficientStats::zeros(int components) {
  const auto n = static_cast<std::size_t>(components);
  SufficientStats s;
  s.n_count.assign(n, 0.0);
  for (Modality mod : kModalities) {
    s.block(mod).sum_x.assign(n, Vec3{});
    s.block(mod).sum_xxT.assign(n, Mat3{});
  }
  return s;
}

SufficientStats& SufficientStats::operator+=(const SufficientStats& o) {
  if (o.components() != components()) throw ShapeError("statistics have different component counts");
  for (std::size_t n = 0; n < n_count.size(); ++n) {
    n_count[n] += o.n_count[n];
    for (Modality mod : kModalities) {
      auto& a = block(mod);
      const auto& b = o.block(mod);
      for (int k = 0; k < kDim; ++k) a.sum_x[n][static_cast<std::size_t>(k)] += b.sum_x[n][static_cast<std::size_t>(k)];
      for (int k = 0; k < kDim * kDim; ++k) {
        a.sum_xxT[n][static_cast<std::size_t>(k)] += b.sum_xxT[n][static_cast<std::size_t>(k)];
      }
    }
  }
  return *this;
}

void SufficientStats::clear_component(int n) {
  const auto i = static_cast<std::size_t>(n);
  n_count.at(i) = 0.0;
  for (Modality mod : kModalities) {
    block(mod).sum_x[i] = Vec3{};
    block(mod).sum_xxT[i] = Mat3{};
  }
}

Graph build_elbo_graph(int batch, int components) {
  if (batch < 1 || components < 1) throw ConfigError("ELBO graph needs positive batch and component counts");
  const std::int64_t B = batch, N = components, d = kDim;
  GraphBuilder g("compute_elbo_delta");

  const auto alpha = g.input("alpha", {N});
  const auto elogpi = g.sub(g.digamma(alpha), g.digamma(g.reduce_sum(alpha, {0})));
  NodeId logrho = elogpi;

  for (Modality mod : kModalities) {
    const std::string p = prefix(mod);
    const auto x = g.input(p + "x", {B, d});
    const auto m = g.input(p + "m", {N, d});
    const auto W = g.input(p + "W", {N, d, d});
    const auto logdetV = g.input(p + "logdetV", {N});
    const auto kappa = g.input(p + "kappa", {N});
    const auto dof = g.input(p + "dof", {N});

    // Mahalanobis form (x - m)^T V^-1 (x - m) for every point/component pair.
    const auto diff = g.sub(g.reshape(x, {B, 1, d}), m);
    const auto q = g.contract("bnj,bnj->bn", g.contract("bni,nij->bnj", diff, W), diff);

    // E[log|Lambda|] = sum_i psi((dof + 1 - i) / 2) + d log 2 - log|V|.
    const auto half = g.mul(g.reshape(dof, {N, 1}), g.scalar(0.5));
    const auto args = g.add(half, g.constant(Tensor({d}, {0.0, -0.5, -1.0})));
    const auto psi = g.reduce_sum(g.digamma(args), {1});
    const auto elogdet = g.sub(g.add(psi, g.scalar(static_cast<double>(d) * std::numbers::ln2)), logdetV);

    const auto equad = g.add(g.mul(q, dof), g.div(g.scalar(static_cast<double>(d)), kappa));
    const auto term = g.sub(g.mul(g.sub(elogdet, equad), g.scalar(0.5)),
                            g.scalar(0.5 * static_cast<double>(d) * std::log(2.0 * std::numbers::pi)));
    logrho = g.add(logrho, term);
  }

  const auto mx = g.reduce_max(logrho, {1});
  const auto e = g.exp(g.sub(logrho, g.reshape(mx, {B, 1})));
  const auto s = g.reduce_sum(e, {1});
  g.output("elbo", g.add(g.log(s), mx));
  g.output("R", g.div(e, g.reshape(s, {B, 1})));
  return g.build();
}

TensorMap elbo_inputs(const MixtureModel& model, const Tensor& batch) {
  check_frame(batch);
  const std::int64_t B = batch.shape[0], N = model.components();
  TensorMap in;
  in.emplace("alpha", Tensor({N}, model.alpha));
  for (Modality mod : kModalities) {
    const std::string p = prefix(mod);
    const auto& b = model.block(mod);
    const int offset = mod == Modality::space ? 0 : kDim;
    Tensor x = Tensor::zeros({B, kDim});
    for (std::int64_t r = 0; r < B; ++r) {
      const Vec3 v = row3(batch, r, offset);
      for (int k = 0; k < kDim; ++k) x.at(r, k) = v[static_cast<std::size_t>(k)];
    }
    Tensor m = Tensor::zeros({N, kDim});
    Tensor W = Tensor::zeros({N, kDim, kDim});
    Tensor logdet = Tensor::zeros({N});
    for (std::int64_t n = 0; n < N; ++n) {
      const auto i = static_cast<std::size_t>(n);
      for (int k = 0; k < kDim; ++k) m.at(n, k) = b.m[i][static_cast<std::size_t>(k)];
      const auto llt = factor_or_throw(to_eigen(b.V[i]), static_cast<int>(n), mod, false);
      const Eigen::Matrix3d inv = llt.solve(Eigen::Matrix3d::Identity());
      const Eigen::Matrix3d L = llt.matrixL();
      logdet[i] = 2.0 * L.diagonal().array().log().sum();
      for (int r = 0; r < kDim; ++r)
        for (int c = 0; c < kDim; ++c) W[i * 9 + static_cast<std::size_t>(r * kDim + c)] = 0.5 * (inv(r, c) + inv(c, r));
    }
    in.emplace(p + "x", std::move(x));
    in.emplace(p + "m", std::move(m));
    in.emplace(p + "W", std::move(W));
    in.emplace(p + "logdetV", std::move(logdet));
    in.emplace(p + "kappa", Tensor({N}, b.kappa));
    in.emplace(p + "dof", Tensor({N}, b.dof));
  }
  return in;
}

Graph build_stats_graph(int batch, int components) {
  if (batch < 1 || components < 1) throw ConfigError("statistics graph needs positive batch and component counts");
  const std::int64_t B = batch, N = components;
  GraphBuilder g("sum_stats_over_samples");
  const auto R = g.input("R", {B, N});
  const std::pair<const char*, std::int64_t> stats[] = {
      {"count", 1}, {"s_x", kDim}, {"s_xx", kDim * kDim}, {"c_x", kDim}, {"c_xx", kDim * kDim}};
  std::vector<std::pair<std::string, NodeId>> outs;
  for (const auto& [name, k] : stats) {
    const auto su = g.input(name, {B, k});
    outs.emplace_back(std::string("d_") + name, g.contract("bn,bk->nk", R, su));
  }
  for (const auto& [name, id] : outs) g.output(name, id);
  return g.build();
}

UnsummedStats unsummed_stats(const Tensor& batch) {
  check_frame(batch);
  const std::int64_t B = batch.shape[0];
  UnsummedStats su{Tensor::filled({B, 1}, 1.0), Tensor::zeros({B, kDim}), Tensor::zeros({B, kDim * kDim}),
                   Tensor::zeros({B, kDim}), Tensor::zeros({B, kDim * kDim})};
  for (std::int64_t r = 0; r < B; ++r) {
    for (Modality mod : kModalities) {
      const Vec3 v = row3(batch, r, mod == Modality::space ? 0 : kDim);
      Tensor& x = mod == Modality::space ? su.space_x : su.color_x;
      Tensor& xx = mod == Modality::space ? su.space_xx : su.color_xx;
      for (int i = 0; i < kDim; ++i) {
        x.at(r, i) = v[static_cast<std::size_t>(i)];
        for (int j = 0; j < kDim; ++j) xx.at(r, i * kDim + j) = v[static_cast<std::size_t>(i)] * v[static_cast<std::size_t>(j)];
      }
    }
  }
  return su;
}

Kernels::Kernels(int components, ContractionMode mode, CostModel cost)
    : components_(components), mode_(mode), cost_(std::move(cost)) {
  if (components < 1) throw ConfigError("component count must be positive");
}

const Graph& Kernels::elbo_graph(int batch) {
  auto& slot = elbo_[batch];
  if (!slot) slot = std::make_unique<Graph>(build_elbo_graph(batch, components_));
  return *slot;
}

const Graph& Kernels::stats_graph(int batch) {
  auto& slot = stats_[batch];
  if (!slot) slot = std::make_unique<Graph>(build_stats_graph(batch, components_));
  return *slot;
}

ElboResult Kernels::compute_elbo_delta(const MixtureModel& model, const Tensor& batch,
                                       const std::optional<PrecisionConfig>& config) {
  if (model.components() != components_) throw ShapeError("model has a different component count");
  const Graph& g = elbo_graph(static_cast<int>(batch.shape.at(0)));
  auto res = execute(g, elbo_inputs(model, batch), config ? *config : uniform_config(g, Format::fp64), mode_, cost_);
  ElboResult out;
  out.elbo = res.output("elbo").data;
  out.R = res.output("R");
  out.profile = std::move(res.profile);
  out.nonfinite = res.nonfinite;
  return out;
}

StatsResult Kernels::sum_stats_over_samples(const Tensor& R, const UnsummedStats& su,
                                            const std::optional<PrecisionConfig>& config) {
  if (R.rank() != 2 || R.shape[1] != components_) {
    throw ShapeError("responsibilities must be [B," + std::to_string(components_) + "], got " +
                     shape_to_string(R.shape));
  }
  const std::int64_t B = R.shape[0];
  if (su.count.shape != Shape{B, 1} || su.space_x.shape != Shape{B, kDim} || su.color_xx.shape != Shape{B, 9}) {
    throw ShapeError("unsummed statistics do not match a batch of " + std::to_string(B));
  }
  const Graph& g = stats_graph(static_cast<int>(B));
  TensorMap in{{"R", R},           {"count", su.count}, {"s_x", su.space_x},
               {"s_xx", su.space_xx}, {"c_x", su.color_x}, {"c_xx", su.color_xx}};
  auto res = execute(g, in, config ? *config : uniform_config(g, Format::fp64), mode_, cost_);
  StatsResult out;
  out.delta = SufficientStats::zeros(components_);
  const Tensor& cnt = res.output("d_count");
  for (int n = 0; n < components_; ++n) {
    const auto i = static_cast<std::size_t>(n);
    out.delta.n_count[i] = cnt[i];
    for (Modality mod : kModalities) {
      const std::string p = prefix(mod);
      const Tensor& x = res.output("d_" + p + "x");
      const Tensor& xx = res.output("d_" + p + "xx");
      for (int k = 0; k < kDim; ++k) out.delta.block(mod).sum_x[i][static_cast<std::size_t>(k)] = x.at(n, k);
      for (int k = 0; k < kDim * kDim; ++k) out.delta.block(mod).sum_xxT[i][static_cast<std::size_t>(k)] = xx.at(n, k);
    }
  }
  out.profile = std::move(res.profile);
  out.nonfinite = res.nonfinite;
  return out;
}

MixtureModel update_from_statistics(const Prior& prior, const SufficientStats& stats) {
  const int N = stats.components();
  if (static_cast<int>(prior.space_m0.size()) != N || static_cast<int>(prior.color_m0.size()) != N) {
    throw ShapeError("prior and statistics disagree on the component count");
  }
  MixtureModel m = prior_model(prior);
  for (int n = 0; n < N; ++n) {
    const auto i = static_cast<std::size_t>(n);
    const double cnt = stats.n_count[i];
    if (!std::isfinite(cnt)) throw NumericalError("component " + std::to_string(n) + ": non-finite statistics");
    m.alpha[i] = prior.alpha0 + cnt;
    for (Modality mod : kModalities) {
      auto& b = m.block(mod);
      const auto& s = stats.block(mod);
      const Eigen::Vector3d m0(prior.m0(mod)[i].data());
      const Eigen::Vector3d sx(s.sum_x[i].data());
      const double kappa = prior.kappa0 + cnt;
      const Eigen::Vector3d mean = (prior.kappa0 * m0 + sx) / kappa;
      Eigen::Matrix3d V = prior.scale(mod) * Eigen::Matrix3d::Identity() + to_eigen(s.sum_xxT[i]) +
                          prior.kappa0 * m0 * m0.transpose() - kappa * mean * mean.transpose();
      V = 0.5 * (V + V.transpose()).eval();
      const auto llt = factor_or_throw(V, n, mod, true);
      // Keep the matrix that actually factorised (possibly jittered).
      const Eigen::Matrix3d L = llt.matrixL();
      b.V[i] = from_eigen(L * L.transpose());
      b.kappa[i] = kappa;
      b.dof[i] = prior.dof0 + cnt;
      b.m[i] = {mean[0], mean[1], mean[2]};
    }
  }
  return m;
}

std::vector<double> reassign_weights(const std::vector<double>& elbo, double temperature) {
  if (!(temperature > 0.0)) throw ConfigError("reassign temperature must be positive");
  std::vector<double> w(elbo.size());
  double lo = std::numeric_limits<double>::infinity();
  for (double e : elbo) lo = std::min(lo, e);
  double total = 0.0;
  for (std::size_t i = 0; i < elbo.size(); ++i) {
    w[i] = std::exp(-(elbo[i] - lo) / temperature);
    total += w[i];
  }
  for (double& x : w) x /= total;
  return w;
}

ReassignOutcome reassign(MixtureModel& m0, const Tensor& frame, const std::vector<double>& elbo,
                         const SufficientStats& stats, std::vector<bool>& used, const ReassignOptions& options,
                         std::uint64_t seed) {
  check_frame(frame);
  const std::int64_t P = frame.shape[0];
  if (P == 0) throw ShapeError("cannot reassign from an empty frame");
  if (options.n_reassign < 0 || options.n_reassign > m0.components()) {
    throw ConfigError("n_reassign must lie in [0, N]");
  }
  if (static_cast<std::int64_t>(elbo.size()) != P) throw ShapeError("one ELBO value per frame point is required");
  ReassignOutcome out;
  if (options.n_reassign == 0) return out;

  std::vector<int> free;
  for (int n = 0; n < m0.components(); ++n) {
    if (!used[static_cast<std::size_t>(n)]) free.push_back(n);
  }
  std::stable_sort(free.begin(), free.end(), [&](int a, int b) {
    return stats.n_count[static_cast<std::size_t>(a)] < stats.n_count[static_cast<std::size_t>(b)];
  });
  const std::size_t k = std::min({static_cast<std::size_t>(options.n_reassign), free.size(), static_cast<std::size_t>(P)});

  std::mt19937_64 rng(seed);
  std::vector<double> w = reassign_weights(elbo, options.temperature);
  for (std::size_t j = 0; j < k; ++j) {
    double rest = 0.0;
    for (double x : w) rest += x;
    if (!(rest > 0.0) || !std::isfinite(rest)) {
      // Remaining weights underflowed: fall back to uniform over unpicked rows.
      for (std::int64_t r = 0; r < P; ++r) w[static_cast<std::size_t>(r)] = 1.0;
      for (int r : out.points) w[static_cast<std::size_t>(r)] = 0.0;
    }
    std::discrete_distribution<int> pick(w.begin(), w.end());
    const int row = pick(rng);
    w[static_cast<std::size_t>(row)] = 0.0;
    const int comp = free[j];
    m0.space.m[static_cast<std::size_t>(comp)] = row3(frame, row, 0);
    m0.color.m[static_cast<std::size_t>(comp)] = row3(frame, row, kDim);
    used[static_cast<std::size_t>(comp)] = true;
    out.points.push_back(row);
    out.components.push_back(comp);
  }
  return out;
}

void TrainConfig::validate() const {
  if (components < 1) throw ConfigError("components must be positive");
  if (batch < 1) throw ConfigError("batch must be positive");
  if (n_reassign < 0 || n_reassign > components) throw ConfigError("n_reassign must lie in [0, components]");
  if (!(temperature > 0.0)) throw ConfigError("temperature must be positive");
  if (!(alpha0 > 0.0) || !(kappa0 > 0.0)) throw ConfigError("alpha0 and kappa0 must be positive");
  if (!(dof0 > kDim + 1)) throw ConfigError("dof0 must exceed d + 1 so the prior covariance has a mean");
  cost.validate();
}

Trainer::Trainer(const TrainConfig& config, HotConfigs configs)
    : config_(config), configs_(std::move(configs)), kernels_(config.components, config.mode, config.cost) {
  config_.validate();
  if (configs_.elbo) check_config(kernels_.elbo_graph(config_.batch), *configs_.elbo);
  if (configs_.stats) check_config(kernels_.stats_graph(config_.batch), *configs_.stats);
}

void Trainer::initialise(const Tensor& frame) {
  const std::int64_t P = frame.shape[0];
  const int N = config_.components;
  Prior& p = state_.prior;
  p.alpha0 = config_.alpha0;
  p.kappa0 = config_.kappa0;
  p.dof0 = config_.dof0;

  auto diag = [&](int offset) {
    double acc = 0.0;
    for (int k = 0; k < kDim; ++k) {
      double lo = std::numeric_limits<double>::infinity(), hi = -lo;
      for (std::int64_t r = 0; r < P; ++r) {
        const double v = frame.at(r, offset + k);
        lo = std::min(lo, v);
        hi = std::max(hi, v);
      }
      acc += (hi - lo) * (hi - lo);
    }
    return std::sqrt(acc);
  };
  // Surface points: N components tile an area of roughly diag^2.
  const double s_sigma = config_.space_sigma > 0 ? config_.space_sigma : 0.5 * diag(0) / std::sqrt(double(N));
  const double c_sigma = config_.color_sigma > 0 ? config_.color_sigma : std::max(0.25 * diag(kDim), 0.02);
  // E[Sigma] = V0 / (dof0 - d - 1).
  p.space_scale = s_sigma * s_sigma * (p.dof0 - kDim - 1);
  p.color_scale = c_sigma * c_sigma * (p.dof0 - kDim - 1);

  std::mt19937_64 rng(config_.seed);
  std::vector<std::int64_t> rows(static_cast<std::size_t>(P));
  std::iota(rows.begin(), rows.end(), 0);
  std::shuffle(rows.begin(), rows.end(), rng);
  p.space_m0.resize(static_cast<std::size_t>(N));
  p.color_m0.resize(static_cast<std::size_t>(N));
  for (int n = 0; n < N; ++n) {
    const std::int64_t r = rows[static_cast<std::size_t>(n) % rows.size()];
    p.space_m0[static_cast<std::size_t>(n)] = row3(frame, r, 0);
    p.color_m0[static_cast<std::size_t>(n)] = row3(frame, r, kDim);
  }
  state_.model = prior_model(p);
  state_.stats = SufficientStats::zeros(N);
  initialised_ = true;
}

std::vector<double> Trainer::frame_elbo(const MixtureModel& model, const Tensor& frame, StepTiming& timing,
                                        bool highest) {
  std::vector<double> elbo;
  const std::int64_t P = frame.shape[0];
  for (std::int64_t b = 0; b < P; b += config_.batch) {
    const std::int64_t e = std::min<std::int64_t>(P, b + config_.batch);
    const bool full = e - b == config_.batch;
    const auto t0 = Clock::now();
    auto r = kernels_.compute_elbo_delta(model, slice_rows(frame, b, e),
                                         highest || !full ? std::nullopt : configs_.elbo);
    timing.elbo_seconds += since(t0);
    timing.peak_bytes = std::max(timing.peak_bytes, r.profile.peak_live_bytes);
    if (r.nonfinite) {
      throw NumericalError("non-finite ELBO at frame " + std::to_string(state_.frames_seen + 1));
    }
    elbo.insert(elbo.end(), r.elbo.begin(), r.elbo.end());
  }
  return elbo;
}

StepTiming Trainer::step(const Tensor& frame) {
  check_frame(frame);
  if (frame.shape[0] == 0) throw ShapeError("empty frame");
  const auto t_start = Clock::now();
  if (!initialised_) initialise(frame);
  StepTiming timing;
  const bool highest = state_.frames_seen == 0;

  // Reassignment against a fresh copy of the current posterior.
  const auto t_re = Clock::now();
  MixtureModel m0 = state_.model;
  const auto elbo = frame_elbo(m0, frame, timing, highest);
  std::vector<bool> used(static_cast<std::size_t>(config_.components), false);
  const auto moved = reassign(m0, frame, elbo, state_.stats, used, {config_.n_reassign, config_.temperature},
                              config_.seed * 0x9E3779B97F4A7C15ull + static_cast<std::uint64_t>(state_.frames_seen));
  for (std::size_t j = 0; j < moved.components.size(); ++j) {
    const auto c = static_cast<std::size_t>(moved.components[j]);
    state_.prior.space_m0[c] = m0.space.m[c];
    state_.prior.color_m0[c] = m0.color.m[c];
    state_.stats.clear_component(moved.components[j]);
  }
  timing.reassign_seconds = since(t_re);

  // Fit: responsibilities from m0, statistics accumulated, one update.
  const auto t_fit = Clock::now();
  const std::int64_t P = frame.shape[0];
  for (std::int64_t b = 0; b < P; b += config_.batch) {
    const std::int64_t e = std::min<std::int64_t>(P, b + config_.batch);
    const bool full = e - b == config_.batch;
    const Tensor batch = slice_rows(frame, b, e);
    auto t0 = Clock::now();
    auto r = kernels_.compute_elbo_delta(m0, batch, highest || !full ? std::nullopt : configs_.elbo);
    timing.elbo_seconds += since(t0);
    if (r.nonfinite) {
      throw NumericalError("non-finite responsibilities at frame " + std::to_string(state_.frames_seen + 1));
    }
    t0 = Clock::now();
    auto s = kernels_.sum_stats_over_samples(r.R, unsummed_stats(batch),
                                             highest || !full ? std::nullopt : configs_.stats);
    timing.stats_seconds += since(t0);
    if (s.nonfinite) {
      throw NumericalError("non-finite statistics at frame " + std::to_string(state_.frames_seen + 1));
    }
    timing.peak_bytes = std::max({timing.peak_bytes, r.profile.peak_live_bytes, s.profile.peak_live_bytes});
    if (b == 0) {
      timing.trace = r.profile.trace;
      timing.trace.insert(timing.trace.end(), s.profile.trace.begin(), s.profile.trace.end());
    }
    state_.stats += s.delta;
  }
  const auto t_up = Clock::now();
  state_.model = update_from_statistics(state_.prior, state_.stats);
  timing.update_seconds = since(t_up);
  timing.fit_seconds = since(t_fit);
  ++state_.frames_seen;
  const double total = since(t_start);
  timing.other_seconds = std::max(0.0, total - timing.elbo_seconds - timing.stats_seconds);
  return timing;
}

TrainResult train(const FrameSource& frames, const TrainConfig& config, const HotConfigs& configs,
                  const Evaluator& evaluate) {
  Trainer trainer(config, configs);
  std::vector<FrameMetrics> metrics;
  while (auto frame = frames()) {
    const auto t0 = Clock::now();
    const bool highest = trainer.state().frames_seen == 0;
    const StepTiming t = trainer.step(*frame);
    FrameMetrics fm;
    fm.frame = trainer.state().frames_seen;
    fm.seconds = since(t0);
    fm.reassign_seconds = t.reassign_seconds;
    fm.fit_seconds = t.fit_seconds;
    fm.elbo_seconds = t.elbo_seconds;
    fm.stats_seconds = t.stats_seconds;
    fm.peak_bytes = t.peak_bytes;
    fm.highest_precision = highest;
    if (evaluate) std::tie(fm.psnr_mean, fm.psnr_ci95) = evaluate(trainer.state().model);
    metrics.push_back(fm);
  }
  TrainResult out;
  out.metrics = std::move(metrics);
  if (trainer.initialised()) out.state = trainer.state();
  return out;
}

TrainResult train(const FrameSource& frames, const TrainConfig& config, const std::optional<PrecisionMap>& elbo_map,
                  const std::optional<PrecisionMap>& stats_map, const Evaluator& evaluate) {
  HotConfigs hc;
  const Graph eg = build_elbo_graph(config.batch, config.components);
  const Graph sg = build_stats_graph(config.batch, config.components);
  auto take = [](const std::optional<PrecisionMap>& map, const Graph& g) -> std::optional<PrecisionConfig> {
    if (!map) return std::nullopt;
    if (map->graph_fingerprint != g.fingerprint()) {
      throw StaleMapError("precision map for '" + map->function + "' does not match graph " + g.fingerprint());
    }
    check_config(g, map->config);
    return map->config;
  };
  hc.elbo = take(elbo_map, eg);
  hc.stats = take(stats_map, sg);
  return train(frames, config, hc, evaluate);
}

// ---- persistence ---------------------------------------------------------

namespace {

Json vecs_json(const auto& rows) {
  Json a = Json::array();
  for (const auto& r : rows) a.push_back(Json(std::vector<double>(r.begin(), r.end())));
  return a;
}

template <std::size_t K>
std::vector<std::array<double, K>> vecs_from(const nlohmann::json& j) {
  std::vector<std::array<double, K>> out;
  for (const auto& row : j) {
    const auto v = row.get<std::vector<double>>();
    if (v.size() != K) throw MapFormatError("checkpoint row has the wrong width");
    std::array<double, K> a{};
    std::copy(v.begin(), v.end(), a.begin());
    out.push_back(a);
  }
  return out;
}

}  // namespace

void save_checkpoint(const TrainState& s, const std::filesystem::path& path) {
  Json j;
  j["kind"] = "adaprec-vbgs-checkpoint";
  j["version"] = 1;
  j["frames_seen"] = s.frames_seen;
  Json prior;
  prior["alpha0"] = s.prior.alpha0;
  prior["kappa0"] = s.prior.kappa0;
  prior["dof0"] = s.prior.dof0;
  prior["space_scale"] = s.prior.space_scale;
  prior["color_scale"] = s.prior.color_scale;
  prior["space_m0"] = vecs_json(s.prior.space_m0);
  prior["color_m0"] = vecs_json(s.prior.color_m0);
  j["prior"] = std::move(prior);
  Json model;
  model["alpha"] = s.model.alpha;
  for (Modality mod : kModalities) {
    const auto& b = s.model.block(mod);
    Json jb;
    jb["m"] = vecs_json(b.m);
    jb["kappa"] = b.kappa;
    jb["V"] = vecs_json(b.V);
    jb["dof"] = b.dof;
    model[std::string(to_string(mod))] = std::move(jb);
  }
  j["model"] = std::move(model);
  Json stats;
  stats["n_count"] = s.stats.n_count;
  for (Modality mod : kModalities) {
    Json jb;
    jb["sum_x"] = vecs_json(s.stats.block(mod).sum_x);
    jb["sum_xxT"] = vecs_json(s.stats.block(mod).sum_xxT);
    stats[std::string(to_string(mod))] = std::move(jb);
  }
  j["stats"] = std::move(stats);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write checkpoint " + path.string());
  out << j.dump(1) << "\n";
}

TrainState load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FileNotFoundError("checkpoint not found: " + path.string());
  TrainState s;
  try {
    const auto j = nlohmann::json::parse(in);
    if (j.at("kind") != "adaprec-vbgs-checkpoint" || j.at("version") != 1) {
      throw MapFormatError("unsupported checkpoint version");
    }
    s.frames_seen = j.at("frames_seen").get<int>();
    const auto& p = j.at("prior");
    s.prior.alpha0 = p.at("alpha0");
    s.prior.kappa0 = p.at("kappa0");
    s.prior.dof0 = p.at("dof0");
    s.prior.space_scale = p.at("space_scale");
    s.prior.color_scale = p.at("color_scale");
    s.prior.space_m0 = vecs_from<kDim>(p.at("space_m0"));
    s.prior.color_m0 = vecs_from<kDim>(p.at("color_m0"));
    const auto& m = j.at("model");
    s.model.alpha = m.at("alpha").get<std::vector<double>>();
    for (Modality mod : kModalities) {
      const auto& jb = m.at(std::string(to_string(mod)));
      auto& b = s.model.block(mod);
      b.m = vecs_from<kDim>(jb.at("m"));
      b.kappa = jb.at("kappa").get<std::vector<double>>();
      b.V = vecs_from<kDim * kDim>(jb.at("V"));
      b.dof = jb.at("dof").get<std::vector<double>>();
    }
    const auto& st = j.at("stats");
    s.stats.n_count = st.at("n_count").get<std::vector<double>>();
    for (Modality mod : kModalities) {
      const auto& jb = st.at(std::string(to_string(mod)));
      s.stats.block(mod).sum_x = vecs_from<kDim>(jb.at("sum_x"));
      s.stats.block(mod).sum_xxT = vecs_from<kDim * kDim>(jb.at("sum_xxT"));
    }
  } catch (const nlohmann::json::exception& e) {
    throw MapFormatError(std::string("malformed checkpoint: ") + e.what());
  }
  s.model.validate();
  return s;
}

void write_metrics_csv(const std::vector<FrameMetrics>& metrics, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write metrics " + path.string());
  out << "frame,psnr_mean,psnr_ci95,seconds,peak_bytes,reassign_seconds,fit_seconds,elbo_seconds,stats_seconds,"
         "highest_precision\n";
  out.precision(10);
  for (const auto& m : metrics) {
    out << m.frame << ',' << m.psnr_mean << ',' << m.psnr_ci95 << ',' << m.seconds << ',' << m.peak_bytes << ','
        << m.reassign_seconds << ',' << m.fit_seconds << ',' << m.elbo_seconds << ',' << m.stats_seconds << ','
        << (m.highest_precision ? 1 : 0) << '\n';
  }
}

TensorMap elbo_probe(int batch, int components, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Tensor frame = Tensor::zeros({batch, kPointWidth});
  for (double& v : frame.data) v = u(rng);
  MixtureModel m;
  const auto N = static_cast<std::size_t>(components);
  m.alpha.resize(N);
  for (double& a : m.alpha) a = 1.0 + 50.0 * u(rng);
  for (Modality mod : kModalities) {
    auto& b = m.block(mod);
    b.m.resize(N);
    b.kappa.resize(N);
    b.V.resize(N);
    b.dof.resize(N);
    for (std::size_t n = 0; n < N; ++n) {
      for (double& x : b.m[n]) x = u(rng);
      b.kappa[n] = 1.0 + 50.0 * u(rng);
      b.dof[n] = kDim + 2.0 + 50.0 * u(rng);
      const double sigma = 0.02 + 0.2 * u(rng);
      b.V[n] = scaled_identity(sigma * sigma * (b.dof[n] - kDim - 1));
    }
  }
  return elbo_inputs(m, frame);
}

TensorMap stats_probe(int batch, int components, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  Tensor frame = Tensor::zeros({batch, kPointWidth});
  for (double& v : frame.data) v = u(rng);
  Tensor R = Tensor::zeros({batch, components});
  for (std::int64_t b = 0; b < batch; ++b) {
    double total = 0.0;
    for (std::int64_t n = 0; n < components; ++n) total += (R.at(b, n) = u(rng));
    for (std::int64_t n = 0; n < components; ++n) R.at(b, n) /= total;
  }
  const auto su = unsummed_stats(frame);
  return {{"R", R},           {"count", su.count}, {"s_x", su.space_x},
          {"s_xx", su.space_xx}, {"c_x", su.color_x}, {"c_xx", su.color_xx}};
}

}  // namespace adaprec::vbgs
