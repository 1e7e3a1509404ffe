#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "card/tensor.hpp"

// Differentiable primitives. Every function here records itself on the tape
// (when an input requires grad) and carries a hand-written adjoint that the
// test suite checks against central finite differences.
namespace card::ops {

// Elementwise with numpy-style broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);

Tensor neg(const Tensor& x);
Tensor add_scalar(const Tensor& x, double s);
Tensor mul_scalar(const Tensor& x, double s);
Tensor pow_scalar(const Tensor& x, double p);
Tensor square(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor abs(const Tensor& x);
Tensor relu(const Tensor& x);
// max(x - threshold, 0)
Tensor hinge(const Tensor& x, double threshold);

Tensor sum(const Tensor& x, std::vector<std::size_t> axes, bool keepdims = false);
Tensor mean(const Tensor& x, std::vector<std::size_t> axes, bool keepdims = false);
Tensor sum_all(const Tensor& x);
Tensor mean_all(const Tensor& x);

Tensor reshape(const Tensor& x, Shape shape);
Tensor permute(const Tensor& x, std::vector<std::size_t> perm);
// 2-D transpose.
Tensor transpose(const Tensor& x);
Tensor broadcast_to(const Tensor& x, Shape shape);

// [M x K] . [K x N]
Tensor matmul(const Tensor& a, const Tensor& b);
// Batched [B x M x K] . [B x K x N]; with transpose_b the second operand is
// read as [B x N x K].
Tensor bmm(const Tensor& a, const Tensor& b, bool transpose_b = false);

Tensor softmax(const Tensor& x, std::size_t axis);
Tensor log_softmax(const Tensor& x, std::size_t axis);

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t dilation = 1;
  std::size_t groups = 1;
};

// x: [H x W x Cin] or [N x H x W x Cin]; w: [k x k x Cin/groups x Cout].
// Same padding: output extent ceil(H / stride).
Tensor conv2d(const Tensor& x, const Tensor& w, Conv2dOptions options = {});

// Half-pixel-center bilinear interpolation (align-corners off).
// x: [H x W x C] or [N x H x W x C].
Tensor bilinear_resize(const Tensor& x, std::size_t out_h, std::size_t out_w);

// Identity forward, zero adjoint.
Tensor stop_gradient(const Tensor& x);

Tensor concat(std::span<const Tensor> xs, std::size_t axis);
Tensor slice(const Tensor& x, std::size_t axis, std::size_t begin, std::size_t end);
Tensor index_select(const Tensor& x, std::size_t axis,
                    std::span<const std::size_t> indices);

// Mean over the spatial axes, kept as extent-1 dimensions.
Tensor global_avg_pool(const Tensor& x);

// [n x num_classes] constant; rows whose label equals ignore_value are zero.
Tensor one_hot(std::span<const int> labels, std::size_t num_classes, int ignore_value);

}  // namespace card::ops
