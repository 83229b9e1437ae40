#include "foal/model.hpp"

#include <algorithm>
#include <cstring>

#include "foal/byte_io.hpp"
#include "foal/errors.hpp"

namespace foal {

void validate(const FoalNetConfig& cfg) {
  if (cfg.audio_dim == 0 || cfg.video_dim == 0) throw ConfigError("input dimensions must be positive");
  if (cfg.proj_hidden == 0) throw ConfigError("projection hidden size must be positive");
  if (cfg.fusion_layers == 0) throw ConfigError("at least one fusion layer is required");
  if (cfg.classes < 2) throw ConfigError("at least two classes are required");
  if (!(cfg.lambda >= 0.0)) throw ConfigError("lambda must be >= 0");
  if (cfg.heads == 0 || cfg.audio_dim % cfg.heads != 0 || cfg.video_dim % cfg.heads != 0) {
    throw ConfigError("heads (" + std::to_string(cfg.heads) + ") must divide both input dimensions (" +
                      std::to_string(cfg.audio_dim) + ", " + std::to_string(cfg.video_dim) + ")");
  }
  validate(cfg.align);
}

FoalNet::FoalNet(const FoalNetConfig& cfg) : cfg_(cfg) {
  validate(cfg);
  Rng rng(cfg.seed);
  std::uint64_t stream = 0;
  auto dropout_seed = [&] { return mix_seed(cfg.seed, stream++); };

  proj_a = ProjectionMLP(cfg.audio_dim, cfg.proj_hidden, cfg.align.proj_dim, cfg.proj_dropout, rng, dropout_seed());
  proj_v = ProjectionMLP(cfg.video_dim, cfg.proj_hidden, cfg.align.proj_dim, cfg.proj_dropout, rng, dropout_seed());
  for (std::size_t l = 0; l < cfg.fusion_layers; ++l) {
    branch_a.emplace_back(cfg.heads, cfg.audio_dim, cfg.video_dim, cfg.attn_dropout, rng, dropout_seed());
  }
  for (std::size_t l = 0; l < cfg.fusion_layers; ++l) {
    branch_v.emplace_back(cfg.heads, cfg.video_dim, cfg.audio_dim, cfg.attn_dropout, rng, dropout_seed());
  }
  const std::size_t match_dim = std::max(cfg.audio_dim, cfg.video_dim);
  if (cfg.audio_dim != cfg.video_dim) {
    adapter_a.emplace(cfg.audio_dim, match_dim, rng);
    adapter_v.emplace(cfg.video_dim, match_dim, rng);
  }
  match_head = Linear(match_dim, 2, rng);
  emo_head = Linear(cfg.audio_dim + cfg.video_dim, cfg.classes, rng);
}

Tensor FoalNet::fuse_audio(const Tensor& z_a, const Tensor& z_v, Mode mode) {
  Tensor out = z_a;
  for (auto& layer : branch_a) out = layer.forward(out, z_v, mode);
  return out;
}

Tensor FoalNet::fuse_video(const Tensor& z_v, const Tensor& z_a, Mode mode) {
  Tensor out = z_v;
  for (auto& layer : branch_v) out = layer.forward(out, z_a, mode);
  return out;
}

std::pair<Tensor, Tensor> FoalNet::fuse(const Tensor& z_a, const Tensor& z_v) {
  return {fuse_audio(z_a, z_v, mode_), fuse_video(z_v, z_a, mode_)};
}

Tensor FoalNet::classify(const Tensor& z_a, const Tensor& z_v) {
  auto [f_a, f_v] = fuse(z_a, z_v);
  return emo_head.forward(concat({mean_pool_time(f_a), mean_pool_time(f_v)}, 1));
}

std::pair<Tensor, Tensor> FoalNet::project(const Tensor& z_a, const Tensor& z_v) {
  return {proj_a.forward(mean_pool_time(z_a), mode_), proj_v.forward(mean_pool_time(z_v), mode_)};
}

Tensor FoalNet::match_logits_audio(const Tensor& pooled_a) {
  return match_head.forward(adapter_a ? adapter_a->forward(pooled_a) : pooled_a);
}

Tensor FoalNet::match_logits_video(const Tensor& pooled_v) {
  return match_head.forward(adapter_v ? adapter_v->forward(pooled_v) : pooled_v);
}

LossTerms FoalNet::total_loss(const Batch& batch) {
  const std::size_t n = batch.size();
  if (cfg_.auxiliary_tasks() && n < 2) {
    throw ConfigError("alignment/matching losses need a batch of at least 2 samples, got " + std::to_string(n));
  }
  const Tensor& z_a = batch.audio;
  const Tensor& z_v = batch.video;
  auto [f_a, f_v] = fuse(z_a, z_v);
  const Tensor pooled_a = mean_pool_time(f_a);
  const Tensor pooled_v = mean_pool_time(f_v);
  const Tensor logits = emo_head.forward(concat({pooled_a, pooled_v}, 1));

  LossTerms terms;
  terms.ce = cross_entropy(logits, batch.labels);
  terms.align = Tensor::scalar(0.0);
  terms.match = Tensor::scalar(0.0);
  if (cfg_.auxiliary_tasks()) {
    auto [e_a, e_v] = project(z_a, z_v);
    const SimilarityMatrices sims = similarity_matrices(e_a, e_v, cfg_.align);
    const MatchLabels match(batch.labels);
    if (cfg_.enable_avel) terms.align = alignment_loss(sims.a2v, sims.v2a, match, cfg_.align);
    if (cfg_.enable_mem) {
      const HardNegatives hn = mine_hard_negatives(sims.a2v, sims.v2a, match);
      terms.match = mem_loss_from_pooled(*this, pooled_a, pooled_v, z_a, z_v, hn, mode_);
    }
  }
  terms.total = add(add(terms.ce, terms.align), scale(terms.match, cfg_.lambda));
  check_finite(terms.total, "total loss");
  return terms;
}

ParameterList FoalNet::parameters() const {
  ParameterList out;
  proj_a.collect("proj_a", out);
  proj_v.collect("proj_v", out);
  for (std::size_t l = 0; l < branch_a.size(); ++l) branch_a[l].collect("branch_a." + std::to_string(l), out);
  for (std::size_t l = 0; l < branch_v.size(); ++l) branch_v[l].collect("branch_v." + std::to_string(l), out);
  if (adapter_a) adapter_a->collect("adapter_a", out);
  if (adapter_v) adapter_v->collect("adapter_v", out);
  match_head.collect("match_head", out);
  emo_head.collect("emo_head", out);
  return out;
}

std::size_t FoalNet::parameter_count() const {
  std::size_t n = 0;
  for (const auto& p : parameters()) n += p.tensor.numel();
  return n;
}

void FoalNet::zero_grad() {
  for (auto& p : parameters()) p.tensor.zero_grad();
}

std::vector<std::vector<double>> FoalNet::snapshot() const {
  std::vector<std::vector<double>> out;
  for (const auto& p : parameters()) out.emplace_back(p.tensor.data().begin(), p.tensor.data().end());
  return out;
}

void FoalNet::restore(const std::vector<std::vector<double>>& values) {
  auto params = parameters();
  if (values.size() != params.size()) throw ShapeError("snapshot has a different parameter count");
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto dst = params[i].tensor.mutable_data();
    if (values[i].size() != dst.size()) throw ShapeError("snapshot size mismatch for " + params[i].name);
    std::copy(values[i].begin(), values[i].end(), dst.begin());
  }
}

// ---------------------------------------------------------------- checkpoints

std::vector<std::uint8_t> encode_checkpoint(const ParameterList& params) {
  byte_io::Writer w;
  w.bytes(std::span(reinterpret_cast<const std::uint8_t*>(kCheckpointMagic), 4));
  w.u32(kCheckpointVersion);
  w.u32(static_cast<std::uint32_t>(params.size()));
  for (const auto& p : params) {
    w.str16(p.name);
    w.u32(static_cast<std::uint32_t>(p.tensor.rank()));
    for (auto d : p.tensor.shape()) w.u32(static_cast<std::uint32_t>(d));
    for (double v : p.tensor.data()) w.f64(v);
  }
  return std::move(w.buffer());
}

void decode_checkpoint_into(std::span<const std::uint8_t> bytes, FoalNet& model) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kCheckpointMagic, 4) != 0) {
    throw BadMagicError("checkpoint: bad magic (expected \"FOCK\")");
  }
  byte_io::Reader r(bytes, "checkpoint");
  r.bytes(4);
  const auto version = r.u32();
  if (version != kCheckpointVersion) {
    throw VersionMismatchError("checkpoint: unsupported version " + std::to_string(version));
  }
  auto params = model.parameters();
  const auto count = r.u32();
  if (count != params.size()) {
    throw DataError("checkpoint holds " + std::to_string(count) + " tensors, model expects " +
                    std::to_string(params.size()));
  }
  // Decode everything before touching the model.
  std::vector<std::vector<double>> values(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::string name = r.str16();
    if (name != params[i].name) {
      throw DataError("checkpoint tensor " + std::to_string(i) + " is '" + name + "', expected '" +
                      params[i].name + "'");
    }
    const auto rank = r.u32();
    Shape shape(rank);
    for (auto& d : shape) d = r.u32();
    if (shape != params[i].tensor.shape()) {
      throw DataError("checkpoint tensor '" + name + "' has shape " + shape_str(shape) + ", model expects " +
                      shape_str(params[i].tensor.shape()));
    }
    values[i].resize(params[i].tensor.numel());
    for (auto& v : values[i]) v = r.f64();
  }
  if (r.remaining() != 0) throw DataError("checkpoint: trailing bytes");
  model.restore(values);
}

void save_checkpoint(const std::filesystem::path& path, const FoalNet& model) {
  byte_io::write_file(path, encode_checkpoint(model.parameters()));
}

void load_checkpoint(const std::filesystem::path& path, FoalNet& model) {
  decode_checkpoint_into(byte_io::read_file(path), model);
}

}  // namespace foal
