#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "adaprec/tensor.hpp"
#include "adaprec/vbgs.hpp"

namespace adaprec::scene {

enum class Family { box_room, sphere_cluster };
std::string_view to_string(Family f);
Family family_from_string(std::string_view name);

// c_k(s) = 0.5 + amplitude * sin(frequency_k * <direction_k, s> + phase_k),
// with unit directions drawn from the scene seed.
struct ColorField {
  std::array<double, 3> frequency{1.3, 1.7, 2.1};
  std::array<double, 3> phase{0.0, 1.0, 2.0};
  double amplitude = 0.4;
};

struct SceneSpec {
  Family family = Family::box_room;
  double extent = 4.0;  // edge of the room, or diameter of the floor under the spheres
  int spheres = 6;      // sphere_cluster only
  std::uint64_t seed = 7;
  double overlap = 0.5;  // between consecutive frame windows
  ColorField color;

  void validate() const;
};

std::string to_json(const SceneSpec& spec);
SceneSpec scene_from_json(const std::string& text);
SceneSpec load_scene(const std::filesystem::path& path);

// Ground-truth color at a surface point.
vbgs::Vec3 true_color(const SceneSpec& spec, const vbgs::Vec3& s);

// Azimuth of a point around the scene centre, in [0, 2 pi).
double azimuth(const vbgs::Vec3& s);

struct Window {
  double start;  // radians
  double width;
  bool contains(double az) const;
};

// Window of frame `index` (0-based) among `n_frames`. Consecutive windows
// overlap by `overlap` of their width and together sweep the full circle.
Window frame_window(int index, int n_frames, double overlap);

// Points [P,6] on the scene surface, restricted to `window` when given.
Tensor sample_points(const SceneSpec& spec, int count, std::uint64_t stream, std::optional<Window> window);

std::vector<Tensor> frame_stream(const SceneSpec& spec, int n_frames, int points_per_frame);

// Single-pass lazy version of frame_stream for the trainer.
vbgs::FrameSource frame_source(const SceneSpec& spec, int n_frames, int points_per_frame);

inline constexpr int kStrata = 20;

struct EvalSet {
  Tensor points;             // [Q,6] positions and true colors
  std::vector<int> stratum;  // azimuth sector per query
};

EvalSet make_eval_set(const SceneSpec& spec, int queries = 2048);

// Spatial-modality responsibilities under the mixture, precomputed per model.
class ColorPredictor {
 public:
  explicit ColorPredictor(const vbgs::MixtureModel& model);
  vbgs::Vec3 operator()(const vbgs::Vec3& s) const;

 private:
  const vbgs::MixtureModel* model_;
  std::vector<double> bias_;                  // E[log pi] + 0.5 E[log|Lambda|] - d/(2 kappa) - const
  std::vector<std::array<double, 9>> prec_;   // dof * V^-1
};

vbgs::Vec3 predict_color(const vbgs::MixtureModel& model, const vbgs::Vec3& s);

// 10 log10(255^2 / MSE) with values in [0,1] rescaled to 0..255. +inf for a
// perfect match.
double psnr(const Tensor& pred, const Tensor& truth);

struct Evaluation {
  double mean = 0.0;  // mean of per-stratum PSNR
  double ci95 = 0.0;  // half-width, Student t with kStrata - 1 dof
  double overall = 0.0;
  std::vector<double> per_stratum;
};

Evaluation evaluate(const vbgs::MixtureModel& model, const EvalSet& eval);

}  // namespace adaprec::scene
