#include "foal/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <map>
#include <numeric>
#include <set>

#include "foal/byte_io.hpp"
#include "foal/errors.hpp"
#include "foal/rng.hpp"

namespace foal {

void validate(const Dataset& dataset) {
  const auto& h = dataset.header;
  if (h.classes == 0) throw DataError("dataset declares zero classes");
  if (h.audio_frames == 0 || h.video_frames == 0 || h.audio_dim == 0 || h.video_dim == 0) {
    throw DataError("dataset frame counts and dimensions must be positive");
  }
  if (h.label_names.size() != h.classes) {
    throw DataError("dataset has " + std::to_string(h.label_names.size()) + " label names for " +
                    std::to_string(h.classes) + " classes");
  }
  if (h.sample_count == 0) throw DataError("dataset has no samples");
  if (h.sample_count != dataset.samples.size()) {
    throw DataError("header declares " + std::to_string(h.sample_count) + " samples, found " +
                    std::to_string(dataset.samples.size()));
  }
  const std::size_t audio_len = std::size_t{h.audio_frames} * h.audio_dim;
  const std::size_t video_len = std::size_t{h.video_frames} * h.video_dim;
  for (std::size_t i = 0; i < dataset.samples.size(); ++i) {
    const auto& s = dataset.samples[i];
    if (s.label >= h.classes) {
      throw LabelRangeError("sample " + std::to_string(i) + " has label " + std::to_string(s.label) +
                            " >= class count " + std::to_string(h.classes));
    }
    if (s.audio.size() != audio_len || s.video.size() != video_len) {
      throw DataError("sample " + std::to_string(i) + " does not match the header's T/F/D sizes");
    }
    auto finite = [](float v) { return std::isfinite(v); };
    if (!std::all_of(s.audio.begin(), s.audio.end(), finite) ||
        !std::all_of(s.video.begin(), s.video.end(), finite)) {
      throw DataError("sample " + std::to_string(i) + " contains non-finite values");
    }
  }
}

std::vector<std::uint8_t> encode_dataset(const Dataset& dataset) {
  validate(dataset);
  const auto& h = dataset.header;
  byte_io::Writer w;
  w.bytes(std::span(reinterpret_cast<const std::uint8_t*>(kDatasetMagic), 4));
  w.u32(h.version);
  w.u32(h.classes);
  w.u32(h.audio_frames);
  w.u32(h.video_frames);
  w.u32(h.audio_dim);
  w.u32(h.video_dim);
  w.u32(h.sample_count);
  for (const auto& name : h.label_names) w.str16(name);
  for (const auto& s : dataset.samples) {
    w.u32(s.label);
    w.u32(s.group);
    for (float v : s.audio) w.f32(v);
    for (float v : s.video) w.f32(v);
  }
  return std::move(w.buffer());
}

Dataset decode_dataset(std::span<const std::uint8_t> bytes) {
  byte_io::Reader r(bytes, "dataset");
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kDatasetMagic, 4) != 0) {
    throw BadMagicError("dataset: bad magic (expected \"FOAL\")");
  }
  r.bytes(4);
  Dataset ds;
  auto& h = ds.header;
  h.version = r.u32();
  if (h.version != kDatasetVersion) {
    throw VersionMismatchError("dataset: unsupported format version " + std::to_string(h.version) + " (expected " +
                               std::to_string(kDatasetVersion) + ")");
  }
  h.classes = r.u32();
  h.audio_frames = r.u32();
  h.video_frames = r.u32();
  h.audio_dim = r.u32();
  h.video_dim = r.u32();
  h.sample_count = r.u32();
  if (h.classes == 0 || h.sample_count == 0) throw DataError("dataset: zero classes or zero samples");
  for (std::uint32_t c = 0; c < h.classes; ++c) h.label_names.push_back(r.str16());
  const std::size_t audio_len = std::size_t{h.audio_frames} * h.audio_dim;
  const std::size_t video_len = std::size_t{h.video_frames} * h.video_dim;
  const std::size_t record = 8 + 4 * (audio_len + video_len);
  if (r.remaining() < record * h.sample_count) {
    throw TruncatedFileError("dataset: header declares " + std::to_string(h.sample_count) + " samples but only " +
                             std::to_string(r.remaining() / record) + " complete records are present");
  }
  ds.samples.resize(h.sample_count);
  for (std::uint32_t i = 0; i < h.sample_count; ++i) {
    auto& s = ds.samples[i];
    s.label = r.u32();
    s.group = r.u32();
    if (s.label >= h.classes) {
      throw LabelRangeError("dataset: sample " + std::to_string(i) + " has label " + std::to_string(s.label) +
                            " >= class count " + std::to_string(h.classes));
    }
    s.audio.resize(audio_len);
    for (auto& v : s.audio) v = r.f32();
    s.video.resize(video_len);
    for (auto& v : s.video) v = r.f32();
  }
  if (r.remaining() != 0) throw DataError("dataset: " + std::to_string(r.remaining()) + " trailing bytes");
  validate(ds);
  return ds;
}

void save_dataset(const std::filesystem::path& path, const Dataset& dataset) {
  byte_io::write_file(path, encode_dataset(dataset));
}

Dataset load_dataset(const std::filesystem::path& path) { return decode_dataset(byte_io::read_file(path)); }

std::vector<std::string> default_label_names(std::size_t classes) {
  if (classes == 4) return {"happy", "angry", "sad", "neutral"};
  std::vector<std::string> names;
  for (std::size_t c = 0; c < classes; ++c) names.push_back("class" + std::to_string(c));
  return names;
}

// ---------------------------------------------------------------- batching

Batch stack_batch(const Dataset& dataset, std::span<const std::size_t> indices) {
  const auto& h = dataset.header;
  const std::size_t n = indices.size();
  const std::size_t audio_len = std::size_t{h.audio_frames} * h.audio_dim;
  const std::size_t video_len = std::size_t{h.video_frames} * h.video_dim;
  std::vector<double> audio(n * audio_len), video(n * video_len);
  Batch b;
  for (std::size_t r = 0; r < n; ++r) {
    const auto& s = dataset.samples.at(indices[r]);
    std::copy(s.audio.begin(), s.audio.end(), audio.begin() + r * audio_len);
    std::copy(s.video.begin(), s.video.end(), video.begin() + r * video_len);
    b.labels.push_back(static_cast<int>(s.label));
  }
  b.audio = Tensor::from({n, h.audio_frames, h.audio_dim}, std::move(audio));
  b.video = Tensor::from({n, h.video_frames, h.video_dim}, std::move(video));
  b.indices.assign(indices.begin(), indices.end());
  return b;
}

std::vector<Batch> make_batches(const Dataset& dataset, std::size_t batch_size, bool shuffle, std::uint64_t seed,
                                BatchMode mode, bool auxiliary_tasks) {
  if (batch_size == 0) throw ConfigError("batch size must be positive");
  if (auxiliary_tasks && batch_size < 2) {
    throw ConfigError("batch size must be >= 2 when alignment or matching tasks are enabled");
  }
  std::vector<std::size_t> order(dataset.samples.size());
  std::iota(order.begin(), order.end(), 0);
  if (shuffle) {
    Rng rng(seed);
    rng.shuffle(std::span(order));
  }
  std::vector<Batch> batches;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t end = std::min(order.size(), start + batch_size);
    if (mode == BatchMode::train && end - start < batch_size) break;
    batches.push_back(stack_batch(dataset, std::span(order).subspan(start, end - start)));
  }
  return batches;
}

// ---------------------------------------------------------------- splitting

Dataset subset_by_group(const Dataset& dataset, std::span<const std::uint32_t> groups, bool keep) {
  Dataset out;
  out.header = dataset.header;
  for (const auto& s : dataset.samples) {
    const bool listed = std::find(groups.begin(), groups.end(), s.group) != groups.end();
    if (listed == keep) out.samples.push_back(s);
  }
  out.header.sample_count = static_cast<std::uint32_t>(out.samples.size());
  return out;
}

std::vector<Fold> split_leave_one_group_out(const Dataset& dataset) {
  std::set<std::uint32_t> groups;
  for (const auto& s : dataset.samples) groups.insert(s.group);
  if (groups.size() < 2) {
    throw DataError("leave-one-group-out needs at least 2 distinct groups, found " + std::to_string(groups.size()));
  }
  std::vector<Fold> folds;
  for (auto g : groups) {
    const std::uint32_t held[] = {g};
    folds.push_back({g, subset_by_group(dataset, held, false), subset_by_group(dataset, held, true)});
  }
  return folds;
}

// ---------------------------------------------------------------- synthetic

std::string to_string(SyntheticScheme scheme) {
  return scheme == SyntheticScheme::complementary ? "complementary" : "redundant";
}

SyntheticScheme parse_scheme(const std::string& text) {
  if (text == "complementary") return SyntheticScheme::complementary;
  if (text == "redundant") return SyntheticScheme::redundant;
  throw ConfigError("unknown synthetic scheme '" + text + "' (expected complementary or redundant)");
}

namespace {

std::vector<std::vector<double>> unit_directions(Rng& rng, std::size_t count, std::size_t dim) {
  std::vector<std::vector<double>> dirs(count, std::vector<double>(dim));
  for (auto& d : dirs) {
    double norm = 0.0;
    do {
      norm = 0.0;
      for (auto& v : d) {
        v = rng.normal();
        norm += v * v;
      }
    } while (norm == 0.0);
    norm = std::sqrt(norm);
    for (auto& v : d) v /= norm;
  }
  return dirs;
}

std::vector<float> frames(Rng& rng, const std::vector<double>& mean, std::size_t count, double noise) {
  std::vector<float> out;
  out.reserve(count * mean.size());
  for (std::size_t t = 0; t < count; ++t) {
    for (double m : mean) out.push_back(static_cast<float>(m + noise * rng.normal()));
  }
  return out;
}

}  // namespace

Dataset generate_synthetic(const SyntheticSpec& spec) {
  if (spec.classes == 0 || spec.groups == 0 || spec.per_class == 0) {
    throw ConfigError("synthetic dataset needs classes, groups and per_class >= 1");
  }
  if (spec.audio_dim == 0 || spec.video_dim == 0 || spec.audio_frames == 0 || spec.video_frames == 0) {
    throw ConfigError("synthetic dataset dimensions and frame counts must be positive");
  }
  if (!(spec.noise >= 0.0)) throw ConfigError("synthetic noise must be >= 0");
  if (!(spec.separation > 0.0)) throw ConfigError("synthetic separation must be > 0");
  if (spec.scheme == SyntheticScheme::complementary && spec.classes != 4) {
    throw ConfigError("the complementary scheme factorizes labels as (k / 2, k % 2) and needs exactly 4 classes");
  }

  Rng rng(spec.seed);
  const bool comp = spec.scheme == SyntheticScheme::complementary;
  const auto audio_dirs = unit_directions(rng, comp ? 2 : spec.classes, spec.audio_dim);
  const auto video_dirs = unit_directions(rng, comp ? 2 : spec.classes, spec.video_dim);

  std::vector<std::vector<double>> audio_means, video_means;
  for (std::uint32_t k = 0; k < spec.classes; ++k) {
    const auto& a = audio_dirs[comp ? k / 2 : k];
    const auto& v = video_dirs[comp ? k % 2 : k];
    audio_means.emplace_back(a.size());
    video_means.emplace_back(v.size());
    for (std::size_t i = 0; i < a.size(); ++i) audio_means.back()[i] = spec.separation * a[i];
    for (std::size_t i = 0; i < v.size(); ++i) video_means.back()[i] = spec.separation * v[i];
  }

  Dataset ds;
  auto& h = ds.header;
  h.classes = spec.classes;
  h.audio_frames = spec.audio_frames;
  h.video_frames = spec.video_frames;
  h.audio_dim = spec.audio_dim;
  h.video_dim = spec.video_dim;
  h.label_names = default_label_names(spec.classes);
  for (std::uint32_t g = 0; g < spec.groups; ++g) {
    for (std::uint32_t k = 0; k < spec.classes; ++k) {
      for (std::uint32_t i = 0; i < spec.per_class; ++i) {
        Sample s;
        s.label = k;
        s.group = g;
        s.audio = frames(rng, audio_means[k], spec.audio_frames, spec.noise);
        s.video = frames(rng, video_means[k], spec.video_frames, spec.noise);
        ds.samples.push_back(std::move(s));
      }
    }
  }
  h.sample_count = static_cast<std::uint32_t>(ds.samples.size());
  return ds;
}

}  // namespace foal
