#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace miclab::ag {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_str(const Shape& shape);

namespace detail {
struct Storage {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  int node = -1;  // producing graph node, -1 for leaves
};
}  // namespace detail

// Dense row-major float64 array with an optional gradient buffer. Copies of a
// Tensor share storage (handle semantics); use clone() for a deep copy.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(Shape shape, bool requires_grad = false);
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor scalar(double v, bool requires_grad = false);
  static Tensor filled(Shape shape, double v, bool requires_grad = false);

  bool defined() const { return static_cast<bool>(s_); }
  const Shape& shape() const { return s_->shape; }
  std::size_t rank() const { return s_->shape.size(); }
  std::size_t dim(std::size_t i) const { return s_->shape.at(i); }
  std::size_t numel() const { return s_->values.size(); }

  std::span<double> values() { return s_->values; }
  std::span<const double> values() const { return s_->values; }
  double* data() { return s_->values.data(); }
  const double* data() const { return s_->values.data(); }
  double item() const;

  bool requires_grad() const { return s_->requires_grad; }
  void set_requires_grad(bool on) { s_->requires_grad = on; }

  bool has_grad() const { return !s_->grad.empty(); }
  std::span<const double> grad() const { return s_->grad; }
  // Zero-initialized on first access.
  std::vector<double>& grad_buffer() const;
  void zero_grad();
  void clear_grad() { s_->grad.clear(); }

  int node_id() const { return s_->node; }

  // Deep copies. clone() keeps requires_grad; detach() drops it.
  Tensor clone() const;
  Tensor detach() const;

  bool shares_storage(const Tensor& other) const { return s_ == other.s_; }

 private:
  friend class Graph;
  std::shared_ptr<detail::Storage> s_;
};

enum class OpKind {
  kConv2d,
  kBiasAdd,
  kRelu,
  kUpsample2x,
  kConcatChannels,
  kGlobalAvgPool,
  kSoftmax,
  kCrossEntropy,
  kEntropy,
  kBceWithLogits,
  kGradReverse,
  kSum,
  kMean,
  kScale,
  kAdd,
  kMul,
};

std::string_view op_name(OpKind kind);

// Receives the output gradient; accumulates into the inputs it captured.
using BackwardFn = std::function<void(std::span<const double> out_grad)>;

struct Node {
  OpKind kind;
  std::vector<int> inputs;  // producing node ids, -1 for leaves
  Tensor output;
  BackwardFn backward;
};

// Define-by-run tape. Operations append nodes in execution order; backward()
// walks them in exact reverse insertion order.
class Graph {
 public:
  // A non-recording graph evaluates ops without building a tape.
  explicit Graph(bool recording = true) : recording_(recording) {}

  bool recording() const { return recording_; }

  // Appends a node when any input requires a gradient and returns the output
  // marked accordingly; otherwise returns the output untouched.
  Tensor record(OpKind kind, std::initializer_list<Tensor> inputs, Tensor output,
                BackwardFn backward);

  // Seeds d loss/d loss = 1, clears gradients of intermediate nodes and
  // accumulates (+=) into leaf gradients.
  void backward(const Tensor& loss);

  std::size_t size() const { return nodes_.size(); }
  const Node& node(std::size_t i) const { return nodes_.at(i); }
  void clear() { nodes_.clear(); }

 private:
  bool recording_ = true;
  std::vector<Node> nodes_;
};

// Accumulates `src` into the gradient of `t` when it requires one.
void accumulate_grad(const Tensor& t, std::span<const double> src);

}  // namespace miclab::ag
