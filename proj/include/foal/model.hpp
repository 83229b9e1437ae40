#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <vector>

#include "foal/avel.hpp"
#include "foal/data.hpp"
#include "foal/layers.hpp"
#include "foal/mem.hpp"

namespace foal {

struct FoalNetConfig {
  std::size_t audio_dim = 1024;  // D_a
  std::size_t video_dim = 768;   // D_v
  std::size_t proj_hidden = 512;
  double proj_dropout = 0.5;
  AlignmentConfig align;
  std::size_t fusion_layers = 2;
  std::size_t heads = 4;
  double attn_dropout = 0.1;
  std::size_t classes = 4;
  double lambda = 0.01;  // weight of the matching loss
  bool enable_avel = true;
  bool enable_mem = true;
  std::uint64_t seed = 0;

  bool auxiliary_tasks() const { return enable_avel || enable_mem; }
};

// Throws ConfigError (or ShapeError for head/dim divisibility).
void validate(const FoalNetConfig& cfg);

struct LossBreakdown {
  double l_total = 0.0;
  double l_ce = 0.0;
  double l_a = 0.0;
  double l_m = 0.0;
};

struct LossTerms {
  Tensor total;
  Tensor ce;
  Tensor align;
  Tensor match;

  LossBreakdown values() const { return {total.item(), ce.item(), align.item(), match.item()}; }
};

// Two-modality classifier: projections feeding the alignment loss, one
// cross-attention stack per query modality, a shared matching head and the
// emotion classifier over pooled fused features.
class FoalNet {
 public:
  explicit FoalNet(const FoalNetConfig& cfg);

  FoalNet(const FoalNet&) = delete;
  FoalNet& operator=(const FoalNet&) = delete;
  FoalNet(FoalNet&&) = default;
  FoalNet& operator=(FoalNet&&) = default;

  const FoalNetConfig& config() const { return cfg_; }
  Mode mode() const { return mode_; }
  void set_mode(Mode mode) { mode_ = mode; }

  // Audio as query over video keys/values, and the reverse. Every layer takes
  // keys/values from the other modality's raw embeddings.
  Tensor fuse_audio(const Tensor& z_a, const Tensor& z_v, Mode mode);
  Tensor fuse_video(const Tensor& z_v, const Tensor& z_a, Mode mode);
  std::pair<Tensor, Tensor> fuse(const Tensor& z_a, const Tensor& z_v);

  Tensor classify(const Tensor& z_a, const Tensor& z_v);
  // Projected embeddings E_a, E_v from time-pooled raw inputs.
  std::pair<Tensor, Tensor> project(const Tensor& z_a, const Tensor& z_v);
  // 2-class matched/mismatched logits from a pooled branch output.
  Tensor match_logits_audio(const Tensor& pooled_a);
  Tensor match_logits_video(const Tensor& pooled_v);

  // L_total = L_ce + L_a + lambda * L_m. Throws NumericError on NaN/Inf.
  LossTerms total_loss(const Batch& batch);

  // Fixed order; every parameter appears exactly once.
  ParameterList parameters() const;
  std::size_t parameter_count() const;
  void zero_grad();

  std::vector<std::vector<double>> snapshot() const;
  void restore(const std::vector<std::vector<double>>& values);

  ProjectionMLP proj_a;
  ProjectionMLP proj_v;
  std::vector<CrossAttention> branch_a;
  std::vector<CrossAttention> branch_v;
  std::optional<Linear> adapter_a;  // only when D_a != D_v
  std::optional<Linear> adapter_v;
  Linear match_head;
  Linear emo_head;

 private:
  FoalNetConfig cfg_;
  Mode mode_ = Mode::train;
};

inline constexpr char kCheckpointMagic[4] = {'F', 'O', 'C', 'K'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

// "FOCK", u32 version, u32 tensor count, then per tensor: u16-prefixed name,
// u32 rank, u32 dims, f64 values; all little-endian.
std::vector<std::uint8_t> encode_checkpoint(const ParameterList& params);
// Names and shapes must match the model exactly.
void decode_checkpoint_into(std::span<const std::uint8_t> bytes, FoalNet& model);
void save_checkpoint(const std::filesystem::path& path, const FoalNet& model);
void load_checkpoint(const std::filesystem::path& path, FoalNet& model);

}  // namespace foal
