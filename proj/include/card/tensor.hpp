#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace card {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_string(const Shape& shape);

struct Node;
using BackwardFn = std::function<void(Node&)>;

// One recorded primitive application. Nodes are created in a strictly
// increasing sequence, which is the order of the tape; adjoints are replayed
// in reverse sequence order.
struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until something accumulates into it
  bool requires_grad = false;
  bool is_leaf = true;
  std::vector<std::shared_ptr<Node>> parents;
  BackwardFn backward;
  const char* op = "leaf";
  std::uint64_t seq = 0;

  // Zero-filled on first use.
  std::vector<double>& grad_buffer();
};

class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t size() const;

  std::span<const double> data() const;
  // Only leaves may be written in place (parameter updates, finite differences).
  std::span<double> mutable_data();

  bool requires_grad() const;
  bool has_grad() const;
  // Gradient view; all zeros if nothing has flowed here yet.
  std::vector<double> grad() const;
  void zero_grad();

  double item() const;
  double at(std::initializer_list<std::size_t> index) const;

  const char* op() const;

  // Seeds d(self)/d(self) = 1 (self must hold a single element) and replays
  // the tape in reverse. Leaf gradients accumulate across calls.
  void backward() const;
  // Same, with an explicit upstream gradient of self's shape.
  void backward(std::span<const double> seed) const;

  const std::shared_ptr<Node>& node() const { return node_; }

 private:
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}
  friend Tensor make_op(const char*, Shape, std::vector<double>,
                        std::vector<Tensor>, BackwardFn);

  std::shared_ptr<Node> node_;
};

// Builds the result of a primitive. The backward closure is dropped (and the
// parents are not retained) when no parent participates in differentiation.
Tensor make_op(const char* op, Shape shape, std::vector<double> data,
               std::vector<Tensor> parents, BackwardFn backward);

// Disables tape recording within its scope.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

// Records the name and output shape of every primitive executed in scope.
struct OpRecord {
  std::string op;
  Shape shape;
  bool operator==(const OpRecord&) const = default;
};

class OpTrace {
 public:
  OpTrace();
  ~OpTrace();
  OpTrace(const OpTrace&) = delete;
  OpTrace& operator=(const OpTrace&) = delete;

  const std::vector<OpRecord>& records() const { return records_; }
  void record(const char* op, const Shape& shape);

 private:
  std::vector<OpRecord> records_;
  OpTrace* previous_;
};

// Counts multiply-accumulates performed by matmul/bmm forward passes in scope.
class MacCounter {
 public:
  MacCounter();
  ~MacCounter();
  MacCounter(const MacCounter&) = delete;
  MacCounter& operator=(const MacCounter&) = delete;

  std::uint64_t count() const { return count_; }
  static void add(std::uint64_t macs);

 private:
  std::uint64_t count_ = 0;
  MacCounter* previous_;
};

}  // namespace card
