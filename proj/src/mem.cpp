#include "foal/mem.hpp"

#include <cmath>
#include <limits>

#include "foal/errors.hpp"
#include "foal/model.hpp"

namespace foal {

Tensor mask_positives(const Tensor& c, const MatchLabels& labels) {
  const std::size_t n = labels.size();
  if (c.shape() != Shape{n, n}) {
    throw ShapeError("mask_positives expects [" + std::to_string(n) + ", " + std::to_string(n) + "], got " +
                     shape_str(c.shape()));
  }
  std::vector<double> out(c.data().begin(), c.data().end());
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      if (labels(i, j)) out[i * n + j] = -std::numeric_limits<double>::infinity();
    }
  }
  return Tensor::from(c.shape(), std::move(out));
}

namespace {

void mine_rows(const Tensor& c, const MatchLabels& labels, std::vector<std::size_t>& ids, std::vector<bool>& valid) {
  const std::size_t n = labels.size();
  const Tensor masked = mask_positives(c.detach(), labels);
  const auto mv = masked.data();
  ids.assign(n, 0);
  valid.assign(n, false);
  for (std::size_t i = 0; i < n; ++i) {
    const double* row = mv.data() + i * n;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < n; ++j) mx = std::max(mx, row[j]);
    if (mx == -std::numeric_limits<double>::infinity()) {
      ids[i] = i;
      continue;
    }
    // argmax over softmax(row); masked entries have probability 0
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) z += std::exp(row[j] - mx);
    double best = -1.0;
    for (std::size_t j = 0; j < n; ++j) {
      const double p = std::exp(row[j] - mx) / z;
      if (p > best) {
        best = p;
        ids[i] = j;
      }
    }
    valid[i] = true;
  }
}

}  // namespace

HardNegatives mine_hard_negatives(const Tensor& c_a2v, const Tensor& c_v2a, const MatchLabels& labels) {
  HardNegatives hn;
  mine_rows(c_a2v, labels, hn.id_a2v, hn.valid_a);
  mine_rows(c_v2a, labels, hn.id_v2a, hn.valid_v);
  return hn;
}

NegativePairs gather_negatives(const Tensor& z_a, const Tensor& z_v, const HardNegatives& hn) {
  if (z_a.rank() == 0 || z_v.rank() == 0 || z_a.dim(0) != hn.size() || z_v.dim(0) != hn.size()) {
    throw ShapeError("gather_negatives: batch size does not match the mined indices");
  }
  return {index_rows(z_a, hn.id_v2a), index_rows(z_v, hn.id_a2v)};
}

std::vector<int> mem_labels(std::size_t n) {
  std::vector<int> labels(2 * n, 0);
  std::fill(labels.begin(), labels.begin() + static_cast<std::ptrdiff_t>(n), 1);
  return labels;
}

Tensor matching_stream_loss(const Tensor& match_logits_pos, const Tensor& match_logits_neg,
                            const std::vector<bool>& valid) {
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < valid.size(); ++i) {
    if (valid[i]) rows.push_back(i);
  }
  if (rows.empty()) return Tensor::scalar(0.0);
  const Tensor logits = concat({index_rows(match_logits_pos, rows), index_rows(match_logits_neg, rows)}, 0);
  return cross_entropy(logits, mem_labels(rows.size()));
}

Tensor mem_loss_from_pooled(FoalNet& model, const Tensor& pooled_pos_a, const Tensor& pooled_pos_v, const Tensor& z_a,
                            const Tensor& z_v, const HardNegatives& hn, Mode mode) {
  const NegativePairs neg = gather_negatives(z_a, z_v, hn);
  const Tensor neg_a = mean_pool_time(model.fuse_audio(z_a, neg.video, mode));
  const Tensor neg_v = mean_pool_time(model.fuse_video(z_v, neg.audio, mode));
  const Tensor stream_a =
      matching_stream_loss(model.match_logits_audio(pooled_pos_a), model.match_logits_audio(neg_a), hn.valid_a);
  const Tensor stream_v =
      matching_stream_loss(model.match_logits_video(pooled_pos_v), model.match_logits_video(neg_v), hn.valid_v);
  return scale(add(stream_a, stream_v), 0.5);
}

Tensor mem_forward_loss(FoalNet& model, const Tensor& z_a, const Tensor& z_v, const HardNegatives& hn, Mode mode) {
  const Tensor pos_a = mean_pool_time(model.fuse_audio(z_a, z_v, mode));
  const Tensor pos_v = mean_pool_time(model.fuse_video(z_v, z_a, mode));
  return mem_loss_from_pooled(model, pos_a, pos_v, z_a, z_v, hn, mode);
}

}  // namespace foal
