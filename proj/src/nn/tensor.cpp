#include "qsm/nn/tensor.hpp"

#include <sstream>
#include <unordered_set>

#include "qsm/error.hpp"

namespace qsm::nn {

std::string to_string(const Shape5& s) {
  std::ostringstream os;
  os << "(" << s.n << ", " << s.c << ", " << s.d << ", " << s.h << ", " << s.w << ")";
  return os.str();
}

Tensor Tensor::constant(Shape5 shape, std::vector<double> values) {
  if (values.size() != shape.count()) {
    fail(ErrorCode::dim_mismatch, "tensor values do not match shape " + to_string(shape));
  }
  auto node = std::make_shared<Node>();
  node->shape = shape;
  node->value.assign(values.begin(), values.end());
  return Tensor(std::move(node));
}

Tensor Tensor::zeros(Shape5 shape) { return constant(shape, std::vector<double>(shape.count(), 0.0)); }

Tensor Tensor::parameter(Shape5 shape, std::vector<double> values) {
  Tensor t = constant(shape, std::move(values));
  t.node_->requires_grad = true;
  return t;
}

std::span<const double> Tensor::grad() const {
  return node_->ensure_grad();
}

Tensor make_result(Shape5 shape, std::vector<Tensor> parents, const char* op,
                   std::function<void(Node&)> backward_fn) {
  auto node = std::make_shared<Node>();
  node->shape = shape;
  node->value.assign(shape.count(), 0.0);
  node->op = op;
  for (const Tensor& p : parents) {
    node->requires_grad = node->requires_grad || p.requires_grad();
    node->parents.push_back(p.ptr());
  }
  if (node->requires_grad) node->backward_fn = std::move(backward_fn);
  return Tensor(std::move(node));
}

std::size_t backward(const Tensor& root) {
  if (root.size() != 1) fail(ErrorCode::invalid_argument, "backward() needs a scalar root");
  // Iterative post-order DFS gives a topological order without recursion depth limits.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{root.node(), 0}};
  seen.insert(root.node());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      Node* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }
  root.node()->ensure_grad()[0] = 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->backward_fn) {
      n->ensure_grad();
      n->backward_fn(*n);
    }
  }
  return order.size();
}

}  // namespace qsm::nn
