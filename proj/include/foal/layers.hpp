#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "foal/rng.hpp"
#include "foal/tensor.hpp"

namespace foal {

enum class Mode { train, eval };

struct NamedParameter {
  std::string name;
  Tensor tensor;
};

using ParameterList = std::vector<NamedParameter>;

// y = x W + b over the last axis. W is [in, out].
class Linear {
 public:
  Linear() = default;
  // Weights uniform in +-sqrt(1/in), zero bias.
  Linear(std::size_t in, std::size_t out, Rng& rng);

  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, ParameterList& out) const;

  std::size_t in_features() const { return weight.dim(0); }
  std::size_t out_features() const { return weight.dim(1); }

  Tensor weight;
  Tensor bias;
};

// Inverted dropout driven by its own seeded stream.
class Dropout {
 public:
  Dropout() = default;
  Dropout(double rate, std::uint64_t seed);

  Tensor forward(const Tensor& x, Mode mode);
  double rate() const { return rate_; }

 private:
  double rate_ = 0.0;
  Rng rng_;
};

class LayerNorm {
 public:
  static constexpr double kEpsilon = 1e-5;

  LayerNorm() = default;
  explicit LayerNorm(std::size_t dim);

  Tensor forward(const Tensor& x) const;
  void collect(const std::string& prefix, ParameterList& out) const;

  Tensor gain;
  Tensor bias;
};

// lin2(dropout(relu(lin1(x)))) mapping a pooled embedding into the shared
// alignment space.
class ProjectionMLP {
 public:
  ProjectionMLP() = default;
  ProjectionMLP(std::size_t in, std::size_t hidden, std::size_t out, double dropout, Rng& rng,
                std::uint64_t dropout_seed);

  Tensor forward(const Tensor& z_bar, Mode mode);
  void collect(const std::string& prefix, ParameterList& out) const;

  Linear lin1;
  Dropout drop;
  Linear lin2;
};

// Multi-head cross-attention with residual and layer norm:
//   out = LN(concat_h(softmax(Q_h K_h^T / sqrt(d_k)) V_h) + query)
// Q comes from the query sequence, K and V from the other modality. There is
// no output projection, so the model width is the query feature size.
class CrossAttention {
 public:
  CrossAttention() = default;
  CrossAttention(std::size_t heads, std::size_t query_dim, std::size_t kv_dim, double attn_dropout, Rng& rng,
                 std::uint64_t dropout_seed);

  // query [N, Tq, d_q], kv [N, Tk, kv_dim] -> [N, Tq, d_q]
  Tensor forward(const Tensor& query, const Tensor& kv, Mode mode);
  // Pre-dropout attention probabilities of one head, [N, Tq, Tk].
  Tensor attention_weights(const Tensor& query, const Tensor& kv, std::size_t head) const;
  void collect(const std::string& prefix, ParameterList& out) const;

  std::size_t heads() const { return heads_; }
  std::size_t query_dim() const { return query_dim_; }
  std::size_t kv_dim() const { return kv_dim_; }
  std::size_t head_dim() const { return query_dim_ / heads_; }

  Linear wq;
  Linear wk;
  Linear wv;
  LayerNorm norm;

 private:
  void check_inputs(const Tensor& query, const Tensor& kv) const;

  std::size_t heads_ = 1;
  std::size_t query_dim_ = 0;
  std::size_t kv_dim_ = 0;
  Dropout attn_drop_;
};

}  // namespace foal
