#pragma once

#include <cstddef>
#include <random>
#include <string>

#include "card/layers.hpp"
#include "card/tensor.hpp"

namespace card {

struct AttentionConfig {
  std::size_t heads = 4;
  std::size_t d_model = 64;
  bool column_first = true;

  std::size_t d_head() const { return d_model / heads; }
  double scale() const;
  void validate() const;
};

// Attention maps captured during a forward pass, for inspection in tests.
struct SaaProbe {
  Tensor column;  // [N*heads*W x H x H]
  Tensor row;     // [N*heads*H x W x W]
};

// Conditional positional encoding: x + depthwise3x3(x), no normalization.
Tensor cpe(const Tensor& x, const Tensor& depthwise_weight);

// Synced axial attention: one set of Q/K/V projected from cpe(x), column
// attention aggregates V, and row attention built from the same Q/K then
// aggregates the column-mixed values.
class SyncedAxialAttention {
 public:
  SyncedAxialAttention() = default;
  SyncedAxialAttention(AttentionConfig cfg, std::mt19937_64& rng);

  // x: [H x W x C] or [N x H x W x C].
  Tensor forward(const Tensor& x, SaaProbe* probe = nullptr) const;

  const AttentionConfig& config() const { return cfg_; }
  void collect(ParamList& out, const std::string& prefix);

  Tensor cpe_weight;  // [3 x 3 x 1 x C]
  Tensor wq, wk, wv, wo;  // [1 x 1 x C x C]

 private:
  AttentionConfig cfg_;
};

// Multiply-accumulates of the attention core (scores plus aggregation),
// excluding the projections, which are identical for both variants.
enum class AttentionVariant { kDense, kSynced };
std::uint64_t attention_flops(std::size_t h, std::size_t w, std::size_t c, AttentionVariant v);

}  // namespace card
