#pragma once

#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <variant>
#include <vector>

#include "adaprec/numerics.hpp"
#include "adaprec/tensor.hpp"

namespace adaprec {

using NodeId = std::int32_t;

enum class OpKind { input, constant, unary, binary, reduce_sum, reduce_max, contraction, transpose, reshape, cast };

enum class UnaryOp { neg, exp, log, sqrt, digamma, lgamma, reciprocal };
enum class BinaryOp { add, sub, mul, div, max };

std::string_view to_string(OpKind kind);
std::string_view to_string(UnaryOp op);
std::string_view to_string(BinaryOp op);

struct InputParams {
  std::string name;
  Shape shape;
  Format format = Format::fp64;
};
struct ConstantParams {
  Tensor value;
  Format format = Format::fp64;
};
struct UnaryParams {
  UnaryOp op;
};
struct BinaryParams {
  BinaryOp op;
};
struct ReduceSumParams {
  std::vector<std::int64_t> axes;
};
// Not part of the minimal vocabulary; needed for a numerically safe softmax.
struct ReduceMaxParams {
  std::vector<std::int64_t> axes;
};
// Two-operand einsum, e.g. "bn,bk->nk". Labels are single lowercase letters;
// labels absent from the output are summed over.
struct ContractionParams {
  std::string spec;
};
struct TransposeParams {
  std::vector<std::int64_t> perm;
};
struct ReshapeParams {
  Shape shape;
};
struct CastParams {
  Format target;
};

using NodeParams = std::variant<InputParams, ConstantParams, UnaryParams, BinaryParams, ReduceSumParams,
                                ReduceMaxParams, ContractionParams, TransposeParams, ReshapeParams, CastParams>;

struct Node {
  NodeId id = -1;
  NodeParams params;
  std::vector<NodeId> operands;
  Shape out_shape;  // filled in by validate()

  OpKind kind() const;
  // Nodes that carry a search variable: everything except inputs,
  // constants and explicit casts.
  bool is_compute() const;
};

struct GraphOutput {
  std::string name;
  NodeId node;
};

// Unvalidated node list as produced by GraphBuilder (or by hand in tests).
struct GraphDraft {
  std::string name;
  std::vector<Node> nodes;
  std::vector<GraphOutput> outputs;
};

// Parsed labels of a contraction node.
struct ContractionLabels {
  std::string lhs, rhs, out;
};
ContractionLabels parse_contraction(std::string_view spec);

// Immutable, validated, shape-static computation graph.
class Graph {
 public:
  const std::string& name() const { return name_; }
  const std::vector<Node>& nodes() const { return nodes_; }
  const Node& node(NodeId id) const;
  bool contains(NodeId id) const { return index_.count(id) != 0; }

  const std::vector<NodeId>& inputs() const { return inputs_; }
  const std::vector<GraphOutput>& outputs() const { return outputs_; }
  const std::vector<NodeId>& consumers(NodeId id) const;
  std::vector<NodeId> compute_nodes() const;
  bool is_output(NodeId id) const;

  // Content hash over kinds, parameters, operand wiring and input
  // shapes/formats. Node ids do not participate.
  const std::string& fingerprint() const { return fingerprint_; }

  // One node per line: id, kind, params, operands, shape.
  std::string dump() const;

 private:
  friend Graph validate(const GraphDraft& draft);

  std::string name_;
  std::vector<Node> nodes_;
  std::unordered_map<NodeId, std::size_t> index_;
  std::vector<NodeId> inputs_;
  std::vector<GraphOutput> outputs_;
  std::unordered_map<NodeId, std::vector<NodeId>> consumers_;
  std::string fingerprint_;
};

// Orders nodes topologically, infers shapes, drops nodes that cannot reach an
// output and computes the fingerprint. Throws GraphError or ShapeError.
Graph validate(const GraphDraft& draft);

class GraphBuilder {
 public:
  explicit GraphBuilder(std::string name) { draft_.name = std::move(name); }

  NodeId input(std::string name, Shape shape, Format fmt = Format::fp64);
  NodeId constant(Tensor value, Format fmt = Format::fp64);
  NodeId scalar(double value) { return constant(Tensor::scalar(value)); }

  NodeId unary(UnaryOp op, NodeId x);
  NodeId binary(BinaryOp op, NodeId a, NodeId b);
  NodeId neg(NodeId x) { return unary(UnaryOp::neg, x); }
  NodeId exp(NodeId x) { return unary(UnaryOp::exp, x); }
  NodeId log(NodeId x) { return unary(UnaryOp::log, x); }
  NodeId sqrt(NodeId x) { return unary(UnaryOp::sqrt, x); }
  NodeId digamma(NodeId x) { return unary(UnaryOp::digamma, x); }
  NodeId lgamma(NodeId x) { return unary(UnaryOp::lgamma, x); }
  NodeId reciprocal(NodeId x) { return unary(UnaryOp::reciprocal, x); }
  NodeId add(NodeId a, NodeId b) { return binary(BinaryOp::add, a, b); }
  NodeId sub(NodeId a, NodeId b) { return binary(BinaryOp::sub, a, b); }
  NodeId mul(NodeId a, NodeId b) { return binary(BinaryOp::mul, a, b); }
  NodeId div(NodeId a, NodeId b) { return binary(BinaryOp::div, a, b); }
  NodeId max(NodeId a, NodeId b) { return binary(BinaryOp::max, a, b); }

  NodeId reduce_sum(NodeId x, std::vector<std::int64_t> axes);
  NodeId reduce_max(NodeId x, std::vector<std::int64_t> axes);
  NodeId contract(std::string spec, NodeId a, NodeId b);
  NodeId transpose(NodeId x, std::vector<std::int64_t> perm);
  NodeId reshape(NodeId x, Shape shape);
  NodeId cast(NodeId x, Format target);

  void output(std::string name, NodeId node);

  const GraphDraft& draft() const { return draft_; }
  Graph build() const { return validate(draft_); }

 private:
  NodeId push(NodeParams params, std::vector<NodeId> operands);

  GraphDraft draft_;
};

// Precision configuration: a total map from compute-node id to format.
class PrecisionConfig {
 public:
  PrecisionConfig() = default;
  explicit PrecisionConfig(std::map<NodeId, Format> assignment) : assignment_(std::move(assignment)) {}

  Format at(NodeId id) const;
  void set(NodeId id, Format fmt);
  bool contains(NodeId id) const { return assignment_.count(id) != 0; }
  const std::map<NodeId, Format>& assignment() const { return assignment_; }
  std::size_t size() const { return assignment_.size(); }

  // Number of compute nodes assigned each format.
  std::map<Format, int> histogram() const;

  friend bool operator==(const PrecisionConfig&, const PrecisionConfig&) = default;

 private:
  std::map<NodeId, Format> assignment_;
};

PrecisionConfig uniform_config(const Graph& graph, Format fmt);

// Throws ConfigError unless `config` covers exactly the compute nodes of `graph`.
void check_config(const Graph& graph, const PrecisionConfig& config);

// Format in which a node's result is held: declared format for inputs and
// constants, target for casts, assigned format otherwise.
Format node_format(const Graph& graph, const PrecisionConfig& config, NodeId id);

}  // namespace adaprec
