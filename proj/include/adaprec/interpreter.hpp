#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <vector>

#include "adaprec/graph.hpp"
#include "adaprec/numerics.hpp"
#include "adaprec/tensor.hpp"

namespace adaprec {

// Deterministic latency surrogate. Weights must strictly decrease from fp64
// to fp32 and be non-increasing below that.
struct CostModel {
  std::map<Format, double> per_element_weight{
      {Format::fp16, 1.0}, {Format::tf32, 1.5}, {Format::fp32, 2.0}, {Format::fp64, 4.0}};
  double cast_weight = 0.5;  // per cast element

  double weight(Format fmt) const;
  void validate() const;  // throws ConfigError
};

enum class ContractionMode { fused, materialize };

std::string_view to_string(ContractionMode mode);
ContractionMode contraction_mode_from_string(std::string_view name);

struct CastEvent {
  NodeId producer;
  NodeId consumer;  // first consumer that needed the converted copy
  Format from;
  Format to;
  std::uint64_t elements;
  std::uint64_t bytes;
  double seconds;
};

struct Allocation {
  NodeId node;
  std::string label;
  std::uint64_t bytes;
  bool transient;  // freed before the producing node finishes
};

struct MemoryEvent {
  double seconds;       // since the start of execute()
  std::int64_t step;    // position in the topological order, -1 before the first node
  std::uint64_t live_bytes;
  std::string label;
};

struct ExecutionProfile {
  std::uint64_t peak_live_bytes = 0;
  std::map<NodeId, double> per_node_elapsed;
  std::map<NodeId, double> per_node_modeled_cost;
  std::uint64_t cast_count = 0;
  std::uint64_t cast_bytes = 0;
  std::uint64_t cast_elements = 0;
  std::vector<CastEvent> casts;
  std::vector<Allocation> allocations;
  std::vector<MemoryEvent> trace;
  double total_seconds = 0.0;

  double modeled_cost() const;
};

using TensorMap = std::map<std::string, Tensor, std::less<>>;

struct ExecutionResult {
  std::vector<std::string> output_names;
  std::vector<Tensor> outputs;  // graph output order
  ExecutionProfile profile;
  bool nonfinite = false;  // some output holds inf or NaN

  const Tensor& output(std::string_view name) const;
};

// Runs `graph` under `config`. Operands are rounded to each node's format, the
// operation is evaluated in double width and the result is rounded back.
// Reductions and contractions round every product to the node format and
// every partial sum to the accumulation format (fp32 for tf32 nodes).
ExecutionResult execute(const Graph& graph, const TensorMap& inputs, const PrecisionConfig& config,
                        ContractionMode mode = ContractionMode::fused, const CostModel& cost = {});

// Accumulation format used by reductions and contractions at `fmt`.
Format accumulation_format(Format fmt);

// Elements touched by a node: output size for elementwise and data-movement
// nodes, input size for reductions, iteration-space size for contractions.
std::uint64_t node_work(const Graph& graph, NodeId id);

// Static per-node modeled cost. Cast cost is charged to the first consumer
// that needs a converted copy, and each (producer, format) pair is converted
// at most once, matching what execute() does.
std::map<NodeId, double> modeled_node_costs(const Graph& graph, const PrecisionConfig& config,
                                            const CostModel& cost = {});
double modeled_cost(const Graph& graph, const PrecisionConfig& config, const CostModel& cost = {});

struct Measurement {
  double wall_seconds = 0.0;  // median of repetitions
  double modeled_cost = 0.0;
  ExecutionProfile median_profile;  // per-node medians over repetitions
};

// Wall-clock measurements are serialized process-wide so concurrent callers
// do not skew each other. Requires repetitions >= 3.
Measurement measure(const Graph& graph, const TensorMap& inputs, const PrecisionConfig& config,
                    int repetitions, ContractionMode mode = ContractionMode::fused, const CostModel& cost = {});

}  // namespace adaprec
