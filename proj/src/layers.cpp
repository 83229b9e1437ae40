#include "foal/layers.hpp"

#include <cmath>

#include "foal/errors.hpp"

namespace foal {

Linear::Linear(std::size_t in, std::size_t out, Rng& rng) {
  if (in == 0 || out == 0) throw ShapeError("Linear dimensions must be positive");
  const double bound = std::sqrt(1.0 / static_cast<double>(in));
  std::vector<double> w(in * out);
  for (auto& v : w) v = rng.uniform(-bound, bound);
  weight = Tensor::from({in, out}, std::move(w), true);
  bias = Tensor::zeros({out}, true);
}

Tensor Linear::forward(const Tensor& x) const {
  if (x.rank() == 0 || x.dim(-1) != in_features()) {
    throw ShapeError("Linear expects last axis " + std::to_string(in_features()) + ", got " + shape_str(x.shape()));
  }
  return add(matmul(x, weight), bias);
}

void Linear::collect(const std::string& prefix, ParameterList& out) const {
  out.push_back({prefix + ".weight", weight});
  out.push_back({prefix + ".bias", bias});
}

Dropout::Dropout(double rate, std::uint64_t seed) : rate_(rate), rng_(seed) {
  if (!(rate >= 0.0 && rate < 1.0)) throw ConfigError("dropout rate must lie in [0, 1), got " + std::to_string(rate));
}

Tensor Dropout::forward(const Tensor& x, Mode mode) {
  if (mode == Mode::eval || rate_ == 0.0) return x;
  const double keep = 1.0 - rate_;
  std::vector<double> mask(x.numel());
  for (auto& m : mask) m = rng_.uniform() < keep ? 1.0 / keep : 0.0;
  return mul(x, Tensor::from(x.shape(), std::move(mask)));
}

LayerNorm::LayerNorm(std::size_t dim)
    : gain(Tensor::full({dim}, 1.0, true)), bias(Tensor::zeros({dim}, true)) {
  if (dim < 2) throw ShapeError("LayerNorm needs dim >= 2");
}

Tensor LayerNorm::forward(const Tensor& x) const { return layer_norm(x, gain, bias, kEpsilon); }

void LayerNorm::collect(const std::string& prefix, ParameterList& out) const {
  out.push_back({prefix + ".gain", gain});
  out.push_back({prefix + ".bias", bias});
}

ProjectionMLP::ProjectionMLP(std::size_t in, std::size_t hidden, std::size_t out, double dropout, Rng& rng,
                             std::uint64_t dropout_seed)
    : lin1(in, hidden, rng), drop(dropout, dropout_seed), lin2(hidden, out, rng) {}

Tensor ProjectionMLP::forward(const Tensor& z_bar, Mode mode) {
  if (z_bar.rank() != 2) throw ShapeError("projection expects pooled [N, D] input, got " + shape_str(z_bar.shape()));
  return lin2.forward(drop.forward(relu(lin1.forward(z_bar)), mode));
}

void ProjectionMLP::collect(const std::string& prefix, ParameterList& out) const {
  lin1.collect(prefix + ".lin1", out);
  lin2.collect(prefix + ".lin2", out);
}

CrossAttention::CrossAttention(std::size_t heads, std::size_t query_dim, std::size_t kv_dim, double attn_dropout,
                               Rng& rng, std::uint64_t dropout_seed)
    : heads_(heads), query_dim_(query_dim), kv_dim_(kv_dim) {
  if (heads == 0 || query_dim % heads != 0) {
    throw ShapeError("heads (" + std::to_string(heads) + ") must divide the query dimension (" +
                     std::to_string(query_dim) + ")");
  }
  // Column block h of each matrix is the per-head projection W_h.
  wq = Linear(query_dim, query_dim, rng);
  wk = Linear(kv_dim, query_dim, rng);
  wv = Linear(kv_dim, query_dim, rng);
  norm = LayerNorm(query_dim);
  attn_drop_ = Dropout(attn_dropout, dropout_seed);
}

void CrossAttention::check_inputs(const Tensor& query, const Tensor& kv) const {
  if (query.rank() != 3 || kv.rank() != 3 || query.dim(0) != kv.dim(0) || query.dim(2) != query_dim_ ||
      kv.dim(2) != kv_dim_) {
    throw ShapeError("cross-attention expects query [N, Tq, " + std::to_string(query_dim_) + "] and kv [N, Tk, " +
                     std::to_string(kv_dim_) + "], got " + shape_str(query.shape()) + " and " +
                     shape_str(kv.shape()));
  }
}

Tensor CrossAttention::forward(const Tensor& query, const Tensor& kv, Mode mode) {
  check_inputs(query, kv);
  const std::size_t dk = head_dim();
  const double inv_sqrt_dk = 1.0 / std::sqrt(static_cast<double>(dk));
  const Tensor q = wq.forward(query);
  const Tensor k = wk.forward(kv);
  const Tensor v = wv.forward(kv);
  std::vector<Tensor> head_outputs;
  head_outputs.reserve(heads_);
  for (std::size_t h = 0; h < heads_; ++h) {
    const Tensor qh = slice(q, -1, h * dk, (h + 1) * dk);
    const Tensor kh = slice(k, -1, h * dk, (h + 1) * dk);
    const Tensor vh = slice(v, -1, h * dk, (h + 1) * dk);
    Tensor attn = softmax(scale(matmul(qh, transpose(kh)), inv_sqrt_dk), -1);
    attn = attn_drop_.forward(attn, mode);
    head_outputs.push_back(matmul(attn, vh));
  }
  const Tensor heads_cat = heads_ == 1 ? head_outputs.front() : concat(head_outputs, -1);
  return norm.forward(add(heads_cat, query));
}

Tensor CrossAttention::attention_weights(const Tensor& query, const Tensor& kv, std::size_t head) const {
  check_inputs(query, kv);
  if (head >= heads_) throw ShapeError("head index out of range");
  const std::size_t dk = head_dim();
  const Tensor qh = slice(wq.forward(query), -1, head * dk, (head + 1) * dk);
  const Tensor kh = slice(wk.forward(kv), -1, head * dk, (head + 1) * dk);
  return softmax(scale(matmul(qh, transpose(kh)), 1.0 / std::sqrt(static_cast<double>(dk))), -1);
}

void CrossAttention::collect(const std::string& prefix, ParameterList& out) const {
  wq.collect(prefix + ".wq", out);
  wk.collect(prefix + ".wk", out);
  wv.collect(prefix + ".wv", out);
  norm.collect(prefix + ".norm", out);
}

}  // namespace foal
