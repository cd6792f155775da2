#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "adaprec/graph.hpp"
#include "adaprec/interpreter.hpp"

namespace adaprec {

// ||y_h - y||_2 / max(||y_h||_2, tau) over all outputs flattened and
// concatenated. +inf when y has a non-finite value where y_h is finite.
double relative_error(std::span<const Tensor> reference, std::span<const Tensor> candidate, double tau);

enum class CostSource { model, wallclock };
std::string_view to_string(CostSource source);
CostSource cost_source_from_string(std::string_view name);

struct SearchOptions {
  std::vector<Format> formats{Format::fp16, Format::tf32, Format::fp32, Format::fp64};  // narrowest first
  double tau = 1e-12;
  CostSource cost_source = CostSource::model;
  CostModel cost;
  ContractionMode mode = ContractionMode::fused;
  int wallclock_repetitions = 5;

  void validate() const;
  Format highest() const { return formats.back(); }
  Format lowest() const { return formats.front(); }
  // Next wider candidate format, or `fmt` itself when already the widest.
  Format next_higher(Format fmt) const;
  Format next_lower(Format fmt) const;
};

// Evaluates err(config) against the all-highest reference on one or more
// fixed probe inputs. With several probes the largest error is reported, so
// a feasible config is feasible on every probe. Results are memoised.
class ErrorOracle {
 public:
  ErrorOracle(const Graph& graph, std::vector<TensorMap> probes, const SearchOptions& options);

  double error(const PrecisionConfig& config) const;
  const Graph& graph() const { return *graph_; }
  const std::vector<TensorMap>& probes() const { return probes_; }
  const SearchOptions& options() const { return options_; }
  std::size_t evaluations() const { return evaluations_; }

 private:
  const Graph* graph_;
  std::vector<TensorMap> probes_;
  SearchOptions options_;
  std::vector<std::vector<Tensor>> reference_;
  mutable std::map<std::vector<Format>, double> cache_;
  mutable std::size_t evaluations_ = 0;
};

struct SensitivityTable {
  std::map<std::pair<NodeId, Format>, double> scores;

  double score(NodeId id, Format fmt) const;
};

SensitivityTable sensitivity_scan(const ErrorOracle& oracle);

struct PassStep {
  std::string stage;
  NodeId node;  // -1 for whole-config trials
  Format from;
  Format to;
  double error;
  bool accepted;
  std::string note;
};

struct PassResult {
  PrecisionConfig config;
  double error = 0.0;
  std::vector<PassStep> history;
};

// Sensitivity-ordered promotion starting from the all-lowest config.
PassResult precision_pass(const ErrorOracle& oracle, double epsilon, const SensitivityTable& table);

// Neighbour downcasting seeded from every node below the widest format.
PassResult structure_pass(const ErrorOracle& oracle, double epsilon, const PrecisionConfig& start);

struct CastRegion {
  std::vector<NodeId> nodes;  // ascending
  Format format;
  std::uint64_t boundary_cast_elements = 0;
};

// Maximal connected groups of compute nodes sharing one format below
// `highest`. Boundary elements count each converted tensor once.
std::vector<CastRegion> cast_regions(const Graph& graph, const PrecisionConfig& config, Format highest);

struct RegionGain {
  double t_high = 0.0;
  double t_low = 0.0;
  double t_cast = 0.0;
  double net() const { return t_high - (t_low + t_cast); }
};

// Reverts cast-bounded regions whose net gain is not positive.
PassResult latency_pass(const ErrorOracle& oracle, double epsilon, const PrecisionConfig& start);

struct SearchReport {
  std::string function;
  double epsilon = 0.0;
  SearchOptions options;
  SensitivityTable sensitivity;
  PassResult precision;
  PassResult structure;
  PassResult latency;
  double final_error = 0.0;
  double cost_high = 0.0;
  double cost_final = 0.0;
  std::optional<double> wall_high;
  std::optional<double> wall_final;
  std::map<Format, int> histogram;
  std::size_t evaluations = 0;
  double seconds = 0.0;
  std::vector<NodeId> nodes_at_highest;
};

struct SearchResult {
  PrecisionConfig config;
  SearchReport report;
};

SearchResult search(const Graph& graph, const std::vector<TensorMap>& probes, double epsilon,
                    const SearchOptions& options = {});
SearchResult search(const Graph& graph, const TensorMap& probe, double epsilon, const SearchOptions& options = {});

std::string format_report(const Graph& graph, const SearchReport& report);

// Persisted search result, the contract between the offline search and the
// online trainer.
struct PrecisionMap {
  static constexpr int kSchemaVersion = 1;

  std::string function;
  double epsilon = 0.0;
  double tau = 1e-12;
  std::vector<Format> formats;
  std::string graph_fingerprint;
  std::uint64_t probe_seed = 0;
  PrecisionConfig config;
};

std::string serialize_map(const PrecisionMap& map);
void save_map(const PrecisionMap& map, const std::filesystem::path& path);

// Throws FileNotFoundError, MapFormatError, or StaleMapError when the
// fingerprint does not match `graph`.
PrecisionMap load_map(const std::filesystem::path& path, const Graph& graph);
PrecisionMap parse_map(const std::string& text, const Graph& graph);

}  // namespace adaprec
