#pragma once

#include <array>
#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "qsm/aligned.hpp"

namespace qsm::nn {

/// (batch, channels, z, y, x); x is fastest in memory.
struct Shape5 {
  std::size_t n = 1, c = 1, d = 1, h = 1, w = 1;

  std::size_t count() const { return n * c * d * h * w; }
  std::size_t spatial() const { return d * h * w; }
  bool operator==(const Shape5&) const = default;
};

std::string to_string(const Shape5& s);

using Buffer = AlignedVector<double>;

struct Node {
  Shape5 shape;
  Buffer value;
  Buffer grad;  // empty until backward touches the node
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;
  bool requires_grad = false;
  const char* op = "leaf";

  Buffer& ensure_grad() {
    if (grad.empty()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

/// Handle to a node of the recorded computation graph. Copies share the node.
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

  static Tensor constant(Shape5 shape, std::vector<double> values);
  static Tensor zeros(Shape5 shape);
  /// Leaf that accumulates gradient.
  static Tensor parameter(Shape5 shape, std::vector<double> values);

  const Shape5& shape() const { return node_->shape; }
  std::size_t size() const { return node_->value.size(); }
  std::span<const double> value() const { return node_->value; }
  std::span<double> mutable_value() { return node_->value; }
  /// Gradient after backward(); zeros if the node was never reached.
  std::span<const double> grad() const;
  bool requires_grad() const { return node_->requires_grad; }
  void zero_grad() { node_->grad.clear(); }
  double item() const { return node_->value.at(0); }

  Node* node() const { return node_.get(); }
  const std::shared_ptr<Node>& ptr() const { return node_; }
  explicit operator bool() const { return static_cast<bool>(node_); }

 private:
  std::shared_ptr<Node> node_;
};

/// Result node for an op: value buffer allocated, parents linked,
/// requires_grad inherited from any parent.
Tensor make_result(Shape5 shape, std::vector<Tensor> parents, const char* op,
                   std::function<void(Node&)> backward_fn);

/// Reverse-mode sweep from a scalar root. Each node's backward runs exactly once,
/// in reverse topological order. Returns the number of nodes visited.
std::size_t backward(const Tensor& root);

}  // namespace qsm::nn
