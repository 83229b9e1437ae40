#include "foal/avel.hpp"

#include "foal/errors.hpp"

namespace foal {

void validate(const AlignmentConfig& cfg) {
  if (!(cfg.temperature > 0.0)) throw ConfigError("temperature must be > 0");
  if (cfg.proj_dim < 2) throw ConfigError("projection dimension must be >= 2");
}

MatchLabels::MatchLabels(std::span<const int> labels)
    : n_(labels.size()), labels_(labels.begin(), labels.end()), cells_(n_ * n_, 0) {
  for (std::size_t i = 0; i < n_; ++i) {
    for (std::size_t j = 0; j < n_; ++j) cells_[i * n_ + j] = labels[i] == labels[j] ? 1 : 0;
  }
}

std::size_t MatchLabels::positives_in_row(std::size_t i) const {
  std::size_t count = 0;
  for (std::size_t j = 0; j < n_; ++j) count += cells_[i * n_ + j];
  return count;
}

Tensor MatchLabels::as_tensor() const {
  std::vector<double> values(cells_.begin(), cells_.end());
  return Tensor::from({n_, n_}, std::move(values));
}

MatchLabels emotion_match_matrix(std::span<const int> labels) {
  if (labels.empty()) throw ShapeError("emotion_match_matrix needs at least one label");
  return MatchLabels(labels);
}

SimilarityMatrices similarity_matrices(const Tensor& e_a, const Tensor& e_v, const AlignmentConfig& cfg) {
  if (e_a.rank() != 2 || e_v.rank() != 2 || e_a.shape() != e_v.shape()) {
    throw ShapeError("similarity_matrices expects two [N, D] embeddings of equal shape, got " +
                     shape_str(e_a.shape()) + " and " + shape_str(e_v.shape()));
  }
  const Tensor a = cfg.l2_normalize ? l2_normalize(e_a) : e_a;
  const Tensor v = cfg.l2_normalize ? l2_normalize(e_v) : e_v;
  return {scale(matmul(a, transpose(v)), cfg.temperature), scale(matmul(v, transpose(a)), cfg.temperature)};
}

Tensor alignment_loss(const Tensor& c_a2v, const Tensor& c_v2a, const MatchLabels& labels,
                      const AlignmentConfig& cfg) {
  const std::size_t n = labels.size();
  const Shape square{n, n};
  if (c_a2v.shape() != square || c_v2a.shape() != square) {
    throw ShapeError("alignment_loss expects square " + shape_str(square) + " matrices, got " +
                     shape_str(c_a2v.shape()) + " and " + shape_str(c_v2a.shape()));
  }
  std::vector<double> weights(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double row_scale = cfg.per_positive_norm ? 1.0 / static_cast<double>(labels.positives_in_row(i)) : 1.0;
    for (std::size_t j = 0; j < n; ++j) {
      if (labels(i, j)) weights[i * n + j] = row_scale;
    }
  }
  const Tensor w = Tensor::from(square, std::move(weights));
  const Tensor total = add(sum(mul(log_softmax(c_a2v, 1), w)), sum(mul(log_softmax(c_v2a, 1), w)));
  return scale(total, -1.0 / (2.0 * static_cast<double>(n)));
}

}  // namespace foal
