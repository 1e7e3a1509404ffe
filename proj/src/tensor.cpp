#include "card/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <unordered_set>

#include "card/error.hpp"

namespace card {

namespace {

thread_local bool t_grad_enabled = true;
thread_local std::uint64_t t_next_seq = 1;
thread_local OpTrace* t_trace = nullptr;
thread_local MacCounter* t_counter = nullptr;

std::shared_ptr<Node> new_node(Shape shape, std::vector<double> data) {
  if (data.size() != numel(shape)) {
    throw ShapeError("tensor data length " + std::to_string(data.size()) +
                     " does not match shape " + shape_string(shape));
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->data = std::move(data);
  node->seq = t_next_seq++;
  return node;
}

}  // namespace

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::vector<double>& Node::grad_buffer() {
  if (grad.empty()) grad.assign(data.size(), 0.0);
  return grad;
}

Tensor::Tensor(Shape shape, std::vector<double> data, bool requires_grad)
    : node_(new_node(std::move(shape), std::move(data))) {
  node_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  auto n = numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  auto n = numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor(Shape{}, {value}, requires_grad);
}

const Shape& Tensor::shape() const { return node_->shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= rank()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " +
                     shape_string(shape()));
  }
  return node_->shape[axis];
}

std::size_t Tensor::size() const { return node_->data.size(); }

std::span<const double> Tensor::data() const { return node_->data; }

std::span<double> Tensor::mutable_data() {
  if (!node_->is_leaf) {
    throw std::logic_error("mutable_data() on non-leaf tensor produced by " +
                           std::string(node_->op));
  }
  return node_->data;
}

bool Tensor::requires_grad() const { return node_->requires_grad; }

bool Tensor::has_grad() const { return !node_->grad.empty(); }

std::vector<double> Tensor::grad() const {
  if (node_->grad.empty()) return std::vector<double>(node_->data.size(), 0.0);
  return node_->grad;
}

void Tensor::zero_grad() { node_->grad.clear(); }

double Tensor::item() const {
  if (size() != 1) {
    throw ShapeError("item() on tensor of shape " + shape_string(shape()));
  }
  return node_->data[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  if (index.size() != rank()) {
    throw ShapeError("index rank mismatch for " + shape_string(shape()));
  }
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i >= node_->shape[axis]) {
      throw ShapeError("index out of range for " + shape_string(shape()));
    }
    flat = flat * node_->shape[axis] + i;
    ++axis;
  }
  return node_->data[flat];
}

const char* Tensor::op() const { return node_->op; }

void Tensor::backward() const {
  if (size() != 1) {
    throw ShapeError("backward() without seed needs a single-element tensor, got " +
                     shape_string(shape()));
  }
  const double one = 1.0;
  backward(std::span<const double>(&one, 1));
}

void Tensor::backward(std::span<const double> seed) const {
  if (seed.size() != size()) {
    throw ShapeError("backward seed length mismatch for " + shape_string(shape()));
  }
  if (!node_->requires_grad) return;

  // Collect everything reachable through differentiable edges.
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<Node*> stack{node_.get()};
  seen.insert(node_.get());
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (auto& p : n->parents) {
      if (p->requires_grad && seen.insert(p.get()).second) stack.push_back(p.get());
    }
  }
  std::sort(order.begin(), order.end(),
            [](const Node* a, const Node* b) { return a->seq > b->seq; });

  for (Node* n : order) {
    if (!n->is_leaf) n->grad.clear();
  }
  auto& g = node_->grad_buffer();
  for (std::size_t i = 0; i < g.size(); ++i) g[i] += seed[i];

  for (Node* n : order) {
    if (n->is_leaf || !n->backward || n->grad.empty()) continue;
    n->backward(*n);
  }
}

Tensor make_op(const char* op, Shape shape, std::vector<double> data,
               std::vector<Tensor> parents, BackwardFn backward) {
  if (t_trace) t_trace->record(op, shape);
  auto node = new_node(std::move(shape), std::move(data));
  node->op = op;
  node->is_leaf = false;
  bool needs = false;
  if (t_grad_enabled) {
    for (const auto& p : parents) needs = needs || p.requires_grad();
  }
  if (needs) {
    node->requires_grad = true;
    node->parents.reserve(parents.size());
    for (auto& p : parents) node->parents.push_back(p.node());
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

NoGradGuard::NoGradGuard() : previous_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = previous_; }

bool grad_enabled() { return t_grad_enabled; }

OpTrace::OpTrace() : previous_(t_trace) { t_trace = this; }
OpTrace::~OpTrace() { t_trace = previous_; }

void OpTrace::record(const char* op, const Shape& shape) {
  records_.push_back(OpRecord{op, shape});
  if (previous_) previous_->record(op, shape);
}

MacCounter::MacCounter() : previous_(t_counter) { t_counter = this; }
MacCounter::~MacCounter() { t_counter = previous_; }

void MacCounter::add(std::uint64_t macs) {
  for (MacCounter* c = t_counter; c; c = c->previous_) c->count_ += macs;
}

}  // namespace card
