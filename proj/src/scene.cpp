#include "adaprec/scene.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <memory>
#include <numbers>
#include <random>
#include <sstream>

#include <json.hpp>

#include "adaprec/errors.hpp"
#include "adaprec/special.hpp"

namespace adaprec::scene {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;
constexpr std::uint64_t kEvalStream = 0xE7A15E7ull;
// Two-sided 95% Student t quantile for kStrata - 1 = 19 degrees of freedom.
constexpr double kT19 = 2.093024054408263;

std::mt19937_64 stream_rng(std::uint64_t seed, std::uint64_t stream) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
  return std::mt19937_64(seq);
}

struct Sphere {
  vbgs::Vec3 centre;
  double radius;
};

std::vector<Sphere> spheres_of(const SceneSpec& spec) {
  auto rng = stream_rng(spec.seed, 0x5F4E7Eull);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  std::vector<Sphere> out;
  const double ring = 0.35 * spec.extent;
  for (int k = 0; k < spec.spheres; ++k) {
    const double a = kTwoPi * (k + 0.3 * u(rng)) / spec.spheres;
    const double z = (u(rng) - 0.5) * 0.2 * spec.extent;
    const double r = spec.extent * (0.08 + 0.06 * u(rng));
    out.push_back({{ring * std::cos(a), ring * std::sin(a), z}, r});
  }
  return out;
}

std::array<vbgs::Vec3, 3> color_directions(const SceneSpec& spec) {
  auto rng = stream_rng(spec.seed, 0xC0102ull);
  std::normal_distribution<double> n(0.0, 1.0);
  std::array<vbgs::Vec3, 3> dirs{};
  for (auto& d : dirs) {
    double len = 0.0;
    for (double& x : d) {
      x = n(rng);
      len += x * x;
    }
    len = std::sqrt(len);
    for (double& x : d) x /= len;
  }
  return dirs;
}

vbgs::Vec3 surface_point(const SceneSpec& spec, const std::vector<Sphere>& spheres, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> u(0.0, 1.0);
  if (spec.family == Family::box_room) {
    const double h = 0.5 * spec.extent;
    const int face = static_cast<int>(u(rng) * 6.0) % 6;
    const double a = (2.0 * u(rng) - 1.0) * h, b = (2.0 * u(rng) - 1.0) * h;
    const double side = face % 2 ? h : -h;
    switch (face / 2) {
      case 0:
        return {side, a, b};
      case 1:
        return {a, side, b};
      default:
        return {a, b, side};
    }
  }
  // Sphere cluster over a floor disc that covers every azimuth. Choose a
  // surface by area, then a uniform point on it.
  const double floor_r = 0.5 * spec.extent;
  double total = floor_r * floor_r / 4.0;  // pi R^2 against 4 pi r^2
  for (const auto& s : spheres) total += s.radius * s.radius;
  double pick = u(rng) * total - floor_r * floor_r / 4.0;
  if (pick < 0.0) {
    const double r = floor_r * std::sqrt(u(rng)), a = kTwoPi * u(rng);
    return {r * std::cos(a), r * std::sin(a), -0.25 * spec.extent};
  }
  const Sphere* chosen = &spheres.back();
  for (const auto& s : spheres) {
    pick -= s.radius * s.radius;
    if (pick <= 0.0) {
      chosen = &s;
      break;
    }
  }
  std::normal_distribution<double> n(0.0, 1.0);
  vbgs::Vec3 d{n(rng), n(rng), n(rng)};
  const double len = std::sqrt(d[0] * d[0] + d[1] * d[1] + d[2] * d[2]);
  return {chosen->centre[0] + chosen->radius * d[0] / len, chosen->centre[1] + chosen->radius * d[1] / len,
          chosen->centre[2] + chosen->radius * d[2] / len};
}

}  // namespace

std::string_view to_string(Family f) { return f == Family::box_room ? "box_room" : "sphere_cluster"; }

Family family_from_string(std::string_view name) {
  if (name == "box_room") return Family::box_room;
  if (name == "sphere_cluster") return Family::sphere_cluster;
  throw ConfigError("unknown scene family '" + std::string(name) + "'");
}

void SceneSpec::validate() const {
  if (!(extent > 0.0)) throw ConfigError("scene extent must be positive");
  if (family == Family::sphere_cluster && spheres < 1) throw ConfigError("sphere cluster needs at least one sphere");
  if (!(overlap >= 0.0 && overlap < 1.0)) throw ConfigError("frame overlap must lie in [0, 1)");
  if (!(color.amplitude >= 0.0 && color.amplitude <= 0.5)) throw ConfigError("color amplitude must lie in [0, 0.5]");
}

std::string to_json(const SceneSpec& spec) {
  nlohmann::ordered_json j;
  j["family"] = to_string(spec.family);
  j["extent"] = spec.extent;
  j["spheres"] = spec.spheres;
  j["seed"] = spec.seed;
  j["overlap"] = spec.overlap;
  j["color"] = {{"frequency", spec.color.frequency}, {"phase", spec.color.phase}, {"amplitude", spec.color.amplitude}};
  return j.dump(2);
}

SceneSpec scene_from_json(const std::string& text) {
  SceneSpec s;
  try {
    const auto j = nlohmann::json::parse(text);
    if (j.contains("family")) s.family = family_from_string(j["family"].get<std::string>());
    s.extent = j.value("extent", s.extent);
    s.spheres = j.value("spheres", s.spheres);
    s.seed = j.value("seed", s.seed);
    s.overlap = j.value("overlap", s.overlap);
    if (j.contains("color")) {
      const auto& c = j["color"];
      s.color.frequency = c.value("frequency", s.color.frequency);
      s.color.phase = c.value("phase", s.color.phase);
      s.color.amplitude = c.value("amplitude", s.color.amplitude);
    }
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("invalid scene spec: ") + e.what());
  }
  s.validate();
  return s;
}

SceneSpec load_scene(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FileNotFoundError("scene spec not found: " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return scene_from_json(ss.str());
}

vbgs::Vec3 true_color(const SceneSpec& spec, const vbgs::Vec3& s) {
  const auto dirs = color_directions(spec);
  vbgs::Vec3 c{};
  for (std::size_t k = 0; k < 3; ++k) {
    const double proj = dirs[k][0] * s[0] + dirs[k][1] * s[1] + dirs[k][2] * s[2];
    c[k] = 0.5 + spec.color.amplitude * std::sin(spec.color.frequency[k] * proj + spec.color.phase[k]);
  }
  return c;
}

double azimuth(const vbgs::Vec3& s) {
  double a = std::atan2(s[1], s[0]);
  if (a < 0.0) a += kTwoPi;
  return a >= kTwoPi ? 0.0 : a;
}

bool Window::contains(double az) const {
  double rel = std::fmod(az - start, kTwoPi);
  if (rel < 0.0) rel += kTwoPi;
  return rel < width || width >= kTwoPi;
}

Window frame_window(int index, int n_frames, double overlap) {
  if (n_frames < 1) throw ConfigError("n_frames must be at least 1");
  if (index < 0 || index >= n_frames) throw ConfigError("frame index out of range");
  if (!(overlap >= 0.0 && overlap < 1.0)) throw ConfigError("frame overlap must lie in [0, 1)");
  const double width = kTwoPi / (1.0 + (n_frames - 1) * (1.0 - overlap));
  return {index * width * (1.0 - overlap), width};
}

Tensor sample_points(const SceneSpec& spec, int count, std::uint64_t stream, std::optional<Window> window) {
  spec.validate();
  if (count < 0) throw ConfigError("point count must be non-negative");
  auto rng = stream_rng(spec.seed, stream);
  const auto spheres = spec.family == Family::sphere_cluster ? spheres_of(spec) : std::vector<Sphere>{};
  Tensor out = Tensor::zeros({count, vbgs::kPointWidth});
  for (int i = 0; i < count; ++i) {
    vbgs::Vec3 s;
    int attempts = 0;
    do {
      if (++attempts > 1000000) throw ConfigError("frame window contains no scene surface");
      s = surface_point(spec, spheres, rng);
    } while (window && !window->contains(azimuth(s)));
    const auto c = true_color(spec, s);
    for (int k = 0; k < 3; ++k) {
      out.at(i, k) = s[static_cast<std::size_t>(k)];
      out.at(i, 3 + k) = c[static_cast<std::size_t>(k)];
    }
  }
  return out;
}

std::vector<Tensor> frame_stream(const SceneSpec& spec, int n_frames, int points_per_frame) {
  std::vector<Tensor> frames;
  auto src = frame_source(spec, n_frames, points_per_frame);
  while (auto f = src()) frames.push_back(std::move(*f));
  return frames;
}

vbgs::FrameSource frame_source(const SceneSpec& spec, int n_frames, int points_per_frame) {
  spec.validate();
  if (n_frames < 1) throw ConfigError("n_frames must be at least 1");
  if (points_per_frame < 1) throw ConfigError("points_per_frame must be at least 1");
  auto next = std::make_shared<int>(0);
  return [spec, n_frames, points_per_frame, next]() -> std::optional<Tensor> {
    if (*next >= n_frames) return std::nullopt;
    const int i = (*next)++;
    return sample_points(spec, points_per_frame, static_cast<std::uint64_t>(i) + 1,
                         frame_window(i, n_frames, spec.overlap));
  };
}

EvalSet make_eval_set(const SceneSpec& spec, int queries) {
  if (queries < kStrata) throw ConfigError("need at least one query per stratum");
  EvalSet e;
  e.points = sample_points(spec, queries, kEvalStream, std::nullopt);
  for (int q = 0; q < queries; ++q) {
    const double az = azimuth({e.points.at(q, 0), e.points.at(q, 1), e.points.at(q, 2)});
    e.stratum.push_back(std::min(kStrata - 1, static_cast<int>(az / kTwoPi * kStrata)));
  }
  return e;
}

ColorPredictor::ColorPredictor(const vbgs::MixtureModel& model) : model_(&model) {
  const auto& b = model.space;
  const std::size_t N = model.alpha.size();
  double alpha_sum = 0.0;
  for (double a : model.alpha) alpha_sum += a;
  const double dig_sum = digamma(alpha_sum);
  constexpr double d = vbgs::kDim;
  bias_.resize(N);
  prec_.resize(N);
  for (std::size_t n = 0; n < N; ++n) {
    const auto& V = b.V[n];
    // Closed-form 3x3 inverse and determinant.
    const double a00 = V[0], a01 = V[1], a02 = V[2], a11 = V[4], a12 = V[5], a22 = V[8];
    const double c00 = a11 * a22 - a12 * a12, c01 = a02 * a12 - a01 * a22, c02 = a01 * a12 - a02 * a11;
    const double det = a00 * c00 + a01 * c01 + a02 * c02;
    if (!(det > 0.0)) throw NumericalError("component " + std::to_string(n) + ": spatial V is not positive definite");
    const double c11 = a00 * a22 - a02 * a02, c12 = a01 * a02 - a00 * a12, c22 = a00 * a11 - a01 * a01;
    const double s = b.dof[n] / det;
    prec_[n] = {c00 * s, c01 * s, c02 * s, c01 * s, c11 * s, c12 * s, c02 * s, c12 * s, c22 * s};
    double psi = 0.0;
    for (int i = 1; i <= vbgs::kDim; ++i) psi += digamma(0.5 * (b.dof[n] + 1 - i));
    const double elogdet = psi + d * std::numbers::ln2 - std::log(det);
    bias_[n] = digamma(model.alpha[n]) - dig_sum + 0.5 * (elogdet - d / b.kappa[n]);
  }
}

vbgs::Vec3 ColorPredictor::operator()(const vbgs::Vec3& s) const {
  const auto& m = model_->space.m;
  const std::size_t N = bias_.size();
  std::vector<double> logw(N);
  double hi = -std::numeric_limits<double>::infinity();
  for (std::size_t n = 0; n < N; ++n) {
    const double x = s[0] - m[n][0], y = s[1] - m[n][1], z = s[2] - m[n][2];
    const auto& P = prec_[n];
    const double q = x * (P[0] * x + P[1] * y + P[2] * z) + y * (P[3] * x + P[4] * y + P[5] * z) +
                     z * (P[6] * x + P[7] * y + P[8] * z);
    logw[n] = bias_[n] - 0.5 * q;
    hi = std::max(hi, logw[n]);
  }
  vbgs::Vec3 c{};
  double total = 0.0;
  for (std::size_t n = 0; n < N; ++n) {
    const double w = std::exp(logw[n] - hi);
    total += w;
    for (std::size_t k = 0; k < 3; ++k) c[k] += w * model_->color.m[n][k];
  }
  for (double& v : c) v = std::clamp(v / total, 0.0, 1.0);
  return c;
}

vbgs::Vec3 predict_color(const vbgs::MixtureModel& model, const vbgs::Vec3& s) { return ColorPredictor(model)(s); }

double psnr(const Tensor& pred, const Tensor& truth) {
  if (pred.shape != truth.shape) {
    throw ShapeError("psnr: shapes " + shape_to_string(pred.shape) + " and " + shape_to_string(truth.shape) + " differ");
  }
  if (pred.size() == 0) throw ShapeError("psnr: empty input");
  double sse = 0.0;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const double e = 255.0 * (pred[i] - truth[i]);
    sse += e * e;
  }
  const double mse = sse / static_cast<double>(pred.size());
  if (mse == 0.0) return std::numeric_limits<double>::infinity();
  return 10.0 * std::log10(255.0 * 255.0 / mse);
}

Evaluation evaluate(const vbgs::MixtureModel& model, const EvalSet& eval) {
  const ColorPredictor predict(model);
  const std::int64_t Q = eval.points.shape[0];
  Tensor pred = Tensor::zeros({Q, 3}), truth = Tensor::zeros({Q, 3});
  std::vector<std::vector<std::int64_t>> rows(kStrata);
  for (std::int64_t q = 0; q < Q; ++q) {
    const auto c = predict({eval.points.at(q, 0), eval.points.at(q, 1), eval.points.at(q, 2)});
    for (int k = 0; k < 3; ++k) {
      pred.at(q, k) = c[static_cast<std::size_t>(k)];
      truth.at(q, k) = eval.points.at(q, 3 + k);
    }
    rows[static_cast<std::size_t>(eval.stratum[static_cast<std::size_t>(q)])].push_back(q);
  }
  Evaluation out;
  out.overall = psnr(pred, truth);
  for (const auto& r : rows) {
    if (r.empty()) continue;
    Tensor p = Tensor::zeros({static_cast<std::int64_t>(r.size()), 3}), t = p;
    for (std::size_t i = 0; i < r.size(); ++i)
      for (int k = 0; k < 3; ++k) {
        p.at(static_cast<std::int64_t>(i), k) = pred.at(r[i], k);
        t.at(static_cast<std::int64_t>(i), k) = truth.at(r[i], k);
      }
    out.per_stratum.push_back(psnr(p, t));
  }
  const double n = static_cast<double>(out.per_stratum.size());
  double sum = 0.0;
  for (double v : out.per_stratum) sum += v;
  out.mean = sum / n;
  double var = 0.0;
  for (double v : out.per_stratum) var += (v - out.mean) * (v - out.mean);
  var = n > 1 ? var / (n - 1) : 0.0;
  out.ci95 = kT19 * std::sqrt(var / n);
  return out;
}

}  // namespace adaprec::scene
