#include "miclab/tensor.hpp"

#include <algorithm>
#include <sstream>

#include "miclab/errors.hpp"

namespace miclab::ag {

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor::Tensor(Shape shape, bool requires_grad) : s_(std::make_shared<detail::Storage>()) {
  s_->values.assign(shape_numel(shape), 0.0);
  s_->shape = std::move(shape);
  s_->requires_grad = requires_grad;
}

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad)
    : s_(std::make_shared<detail::Storage>()) {
  if (shape_numel(shape) != values.size()) {
    throw ShapeError("tensor shape " + shape_str(shape) + " does not hold " +
                     std::to_string(values.size()) + " values");
  }
  s_->shape = std::move(shape);
  s_->values = std::move(values);
  s_->requires_grad = requires_grad;
}

Tensor Tensor::scalar(double v, bool requires_grad) { return Tensor({1}, {v}, requires_grad); }

Tensor Tensor::filled(Shape shape, double v, bool requires_grad) {
  Tensor t(std::move(shape), requires_grad);
  std::fill(t.s_->values.begin(), t.s_->values.end(), v);
  return t;
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return s_->values[0];
}

std::vector<double>& Tensor::grad_buffer() const {
  if (s_->grad.empty()) s_->grad.assign(s_->values.size(), 0.0);
  return s_->grad;
}

void Tensor::zero_grad() { std::fill(s_->grad.begin(), s_->grad.end(), 0.0); }

Tensor Tensor::clone() const {
  Tensor t(s_->shape, s_->values, s_->requires_grad);
  return t;
}

Tensor Tensor::detach() const { return Tensor(s_->shape, s_->values, false); }

std::string_view op_name(OpKind kind) {
  switch (kind) {
    case OpKind::kConv2d: return "conv2d";
    case OpKind::kBiasAdd: return "bias_add";
    case OpKind::kRelu: return "relu";
    case OpKind::kUpsample2x: return "upsample2x";
    case OpKind::kConcatChannels: return "concat_channels";
    case OpKind::kGlobalAvgPool: return "global_avg_pool";
    case OpKind::kSoftmax: return "softmax";
    case OpKind::kCrossEntropy: return "cross_entropy";
    case OpKind::kEntropy: return "entropy";
    case OpKind::kBceWithLogits: return "bce_with_logits";
    case OpKind::kGradReverse: return "grad_reverse";
    case OpKind::kSum: return "sum";
    case OpKind::kMean: return "mean";
    case OpKind::kScale: return "scale";
    case OpKind::kAdd: return "add";
    case OpKind::kMul: return "mul";
  }
  return "unknown";
}

Tensor Graph::record(OpKind kind, std::initializer_list<Tensor> inputs, Tensor output,
                     BackwardFn backward) {
  if (!recording_) return output;
  const bool needs = std::any_of(inputs.begin(), inputs.end(),
                                 [](const Tensor& t) { return t.requires_grad(); });
  if (!needs) return output;
  Node node{kind, {}, output, std::move(backward)};
  node.inputs.reserve(inputs.size());
  for (const Tensor& t : inputs) node.inputs.push_back(t.node_id());
  output.s_->requires_grad = true;
  output.s_->node = static_cast<int>(nodes_.size());
  nodes_.push_back(std::move(node));
  return output;
}

void Graph::backward(const Tensor& loss) {
  if (loss.numel() != 1) {
    throw ShapeError("backward() needs a scalar loss, got " + shape_str(loss.shape()));
  }
  for (Node& n : nodes_) n.output.s_->grad.clear();
  Tensor seed = loss;
  if (!seed.requires_grad()) return;
  if (seed.node_id() >= 0) {
    seed.grad_buffer()[0] = 1.0;
  } else {
    seed.grad_buffer()[0] += 1.0;
    return;
  }
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    const auto& g = it->output.s_->grad;
    if (g.empty()) continue;
    it->backward(g);
  }
}

void accumulate_grad(const Tensor& t, std::span<const double> src) {
  if (!t.requires_grad()) return;
  auto& g = t.grad_buffer();
  for (std::size_t i = 0; i < src.size(); ++i) g[i] += src[i];
}

}  // namespace miclab::ag
