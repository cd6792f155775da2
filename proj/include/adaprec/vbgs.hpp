#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "adaprec/graph.hpp"
#include "adaprec/interpreter.hpp"
#include "adaprec/mpsearch.hpp"
#include "adaprec/tensor.hpp"

namespace adaprec::vbgs {

inline constexpr int kDim = 3;
inline constexpr int kPointWidth = 2 * kDim;  // columns: s0 s1 s2 c0 c1 c2

using Vec3 = std::array<double, kDim>;
using Mat3 = std::array<double, kDim * kDim>;  // row-major

enum class Modality { space, color };
inline constexpr std::array<Modality, 2> kModalities = {Modality::space, Modality::color};
std::string_view to_string(Modality m);

// Normal-inverse-Wishart posteriors of one modality for every component.
struct NiwBlock {
  std::vector<Vec3> m;
  std::vector<double> kappa;
  std::vector<Mat3> V;
  std::vector<double> dof;
};

struct MixtureModel {
  std::vector<double> alpha;  // Dirichlet
  NiwBlock space;
  NiwBlock color;

  int components() const { return static_cast<int>(alpha.size()); }
  NiwBlock& block(Modality m) { return m == Modality::space ? space : color; }
  const NiwBlock& block(Modality m) const { return m == Modality::space ? space : color; }
  // Throws NumericalError naming the first offending component.
  void validate() const;
};

// Conjugate prior. Means are per component; V0 is scale * identity.
struct Prior {
  double alpha0 = 1.0;
  double kappa0 = 1.0;
  double dof0 = kDim + 2.0;
  double space_scale = 1.0;
  double color_scale = 0.01;
  std::vector<Vec3> space_m0;
  std::vector<Vec3> color_m0;

  const std::vector<Vec3>& m0(Modality m) const { return m == Modality::space ? space_m0 : color_m0; }
  std::vector<Vec3>& m0(Modality m) { return m == Modality::space ? space_m0 : color_m0; }
  double scale(Modality m) const { return m == Modality::space ? space_scale : color_scale; }
};

// Model equal to the prior, i.e. the posterior after zero observations.
MixtureModel prior_model(const Prior& prior);

struct StatsBlock {
  std::vector<Vec3> sum_x;
  std::vector<Mat3> sum_xxT;
};

struct SufficientStats {
  std::vector<double> n_count;
  StatsBlock space;
  StatsBlock color;

  static SufficientStats zeros(int components);
  int components() const { return static_cast<int>(n_count.size()); }
  StatsBlock& block(Modality m) { return m == Modality::space ? space : color; }
  const StatsBlock& block(Modality m) const { return m == Modality::space ? space : color; }
  SufficientStats& operator+=(const SufficientStats& other);
  void clear_component(int n);
};

// ---- hot function 1: ELBO and responsibilities -------------------------

// Graph inputs per modality prefix p in {s_, c_}: p+"x" [B,3], p+"m" [N,3],
// p+"W" [N,3,3] (inverse of V), p+"logdetV" [N], p+"kappa" [N], p+"dof" [N];
// plus "alpha" [N]. Outputs "elbo" [B] and "R" [B,N].
Graph build_elbo_graph(int batch, int components);

// Host-side packing of the model into ELBO graph inputs. V is inverted via
// Cholesky; throws NumericalError with the component id on failure.
TensorMap elbo_inputs(const MixtureModel& model, const Tensor& batch);

struct ElboResult {
  std::vector<double> elbo;  // per point
  Tensor R;                  // [B, N]
  ExecutionProfile profile;
  bool nonfinite = false;
};

// ---- hot function 2: statistics over samples ----------------------------

// Inputs "R" [B,N], "count" [B,1], "s_x" [B,3], "s_xx" [B,9], "c_x" [B,3],
// "c_xx" [B,9]. Outputs the five [N,K] increments in the same order.
Graph build_stats_graph(int batch, int components);

struct UnsummedStats {
  Tensor count;  // [B,1]
  Tensor space_x, space_xx;  // [B,3], [B,9]
  Tensor color_x, color_xx;
};

UnsummedStats unsummed_stats(const Tensor& batch);

struct StatsResult {
  SufficientStats delta;
  ExecutionProfile profile;
  bool nonfinite = false;
};

// Precision settings for the two hot functions. Absent entries run at fp64.
struct HotConfigs {
  std::optional<PrecisionConfig> elbo;
  std::optional<PrecisionConfig> stats;
};

// Caches one compiled graph per batch size and component count.
class Kernels {
 public:
  explicit Kernels(int components, ContractionMode mode = ContractionMode::fused, CostModel cost = {});

  const Graph& elbo_graph(int batch);
  const Graph& stats_graph(int batch);

  ElboResult compute_elbo_delta(const MixtureModel& model, const Tensor& batch,
                                const std::optional<PrecisionConfig>& config = std::nullopt);
  StatsResult sum_stats_over_samples(const Tensor& R, const UnsummedStats& su,
                                     const std::optional<PrecisionConfig>& config = std::nullopt);

  int components() const { return components_; }
  ContractionMode mode() const { return mode_; }
  void set_mode(ContractionMode mode) { mode_ = mode; }

 private:
  int components_;
  ContractionMode mode_;
  CostModel cost_;
  std::map<int, std::unique_ptr<Graph>> elbo_;
  std::map<int, std::unique_ptr<Graph>> stats_;
};

// Closed-form conjugate posterior from prior and accumulated statistics.
// A non-positive-definite V gets one jitter retry, then NumericalError.
MixtureModel update_from_statistics(const Prior& prior, const SufficientStats& stats);

struct ReassignOptions {
  int n_reassign = 0;
  double temperature = 1.0;
};

struct ReassignOutcome {
  std::vector<int> points;      // sampled frame rows
  std::vector<int> components;  // reassigned components, paired with points
};

// Sampling weights softmax(-elbo / temperature), computed stably.
std::vector<double> reassign_weights(const std::vector<double>& elbo, double temperature);

// Draws n points without replacement and moves the least-used components of
// `m0` onto them. `used` marks components already touched this frame and is
// updated. `elbo` holds one entry per frame row.
ReassignOutcome reassign(MixtureModel& m0, const Tensor& frame, const std::vector<double>& elbo,
                         const SufficientStats& stats, std::vector<bool>& used, const ReassignOptions& options,
                         std::uint64_t seed);

// ---- training -----------------------------------------------------------

struct TrainConfig {
  int components = 512;
  int batch = 64;
  int n_reassign = 64;
  double temperature = 1.0;
  double alpha0 = 1.0;
  double kappa0 = 1.0;
  double dof0 = kDim + 2.0;
  // Component standard deviations used for V0; <= 0 derives them from the
  // first frame's bounding box.
  double space_sigma = 0.0;
  double color_sigma = 0.0;
  std::uint64_t seed = 1;
  ContractionMode mode = ContractionMode::fused;
  CostModel cost;

  void validate() const;
};

struct FrameMetrics {
  int frame = 0;
  double psnr_mean = 0.0;
  double psnr_ci95 = 0.0;
  double seconds = 0.0;
  double reassign_seconds = 0.0;
  double fit_seconds = 0.0;
  double elbo_seconds = 0.0;   // inside both reassign and fit
  double stats_seconds = 0.0;
  std::uint64_t peak_bytes = 0;
  bool highest_precision = false;
};

// Evaluates a model snapshot; returns (mean PSNR, 95% CI half-width).
using Evaluator = std::function<std::pair<double, double>(const MixtureModel&)>;
// Single-pass frame source; returns nullopt when the stream is exhausted.
using FrameSource = std::function<std::optional<Tensor>()>;

struct TrainState {
  Prior prior;
  MixtureModel model;
  SufficientStats stats;
  int frames_seen = 0;
};

struct TrainResult {
  TrainState state;
  std::vector<FrameMetrics> metrics;
};

// Per-frame reassign + fit over the stream. Maps (if given) must match the
// graphs at the configured batch size, else StaleMapError. Frame 1 and any
// residual batch run at fp64.
TrainResult train(const FrameSource& frames, const TrainConfig& config, const std::optional<PrecisionMap>& elbo_map,
                  const std::optional<PrecisionMap>& stats_map, const Evaluator& evaluate = {});

// Same, with explicit homogeneous or hand-made configs.
TrainResult train(const FrameSource& frames, const TrainConfig& config, const HotConfigs& configs,
                  const Evaluator& evaluate = {});

// One reassign + fit step on `frame`, exposed for profiling.
struct StepTiming {
  double reassign_seconds = 0.0;
  double fit_seconds = 0.0;
  double elbo_seconds = 0.0;
  double stats_seconds = 0.0;
  double update_seconds = 0.0;
  double other_seconds = 0.0;
  std::uint64_t peak_bytes = 0;
  std::vector<MemoryEvent> trace;  // concatenated hot-function traces
};

class Trainer {
 public:
  Trainer(const TrainConfig& config, HotConfigs configs);

  // Initialises priors from the first frame when needed, then runs one
  // reassign + fit step.
  StepTiming step(const Tensor& frame);

  const TrainState& state() const { return state_; }
  Kernels& kernels() { return kernels_; }
  bool initialised() const { return initialised_; }

 private:
  void initialise(const Tensor& frame);
  std::vector<double> frame_elbo(const MixtureModel& model, const Tensor& frame, StepTiming& timing, bool highest);

  TrainConfig config_;
  HotConfigs configs_;
  Kernels kernels_;
  TrainState state_;
  bool initialised_ = false;
};

// ---- persistence --------------------------------------------------------

void save_checkpoint(const TrainState& state, const std::filesystem::path& path);
TrainState load_checkpoint(const std::filesystem::path& path);

void write_metrics_csv(const std::vector<FrameMetrics>& metrics, const std::filesystem::path& path);

// Probe inputs for the hot functions: white noise of matching shapes, with
// positive/definite fields kept valid. Same seed gives identical tensors.
TensorMap elbo_probe(int batch, int components, std::uint64_t seed);
TensorMap stats_probe(int batch, int components, std::uint64_t seed);

}  // namespace adaprec::vbgs
