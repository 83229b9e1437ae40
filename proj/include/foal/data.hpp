#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "foal/tensor.hpp"

namespace foal {

inline constexpr char kDatasetMagic[4] = {'F', 'O', 'A', 'L'};
inline constexpr std::uint32_t kDatasetVersion = 1;

struct DatasetHeader {
  std::uint32_t version = kDatasetVersion;
  std::uint32_t classes = 0;
  std::uint32_t audio_frames = 0;  // T
  std::uint32_t video_frames = 0;  // F
  std::uint32_t audio_dim = 0;     // D_a
  std::uint32_t video_dim = 0;     // D_v
  std::uint32_t sample_count = 0;
  std::vector<std::string> label_names;

  bool operator==(const DatasetHeader&) const = default;
};

// One audio/video embedding pair. Values are stored at 32-bit precision,
// row-major [frames, dim].
struct Sample {
  std::uint32_t label = 0;
  std::uint32_t group = 0;
  std::vector<float> audio;
  std::vector<float> video;

  bool operator==(const Sample&) const = default;
};

struct Dataset {
  DatasetHeader header;
  std::vector<Sample> samples;

  bool operator==(const Dataset&) const = default;
};

// Throws DataError (or a subclass) if sizes, labels or counts disagree with
// the header.
void validate(const Dataset& dataset);

// Little-endian layout: magic, u32 version/C/T/F/D_a/D_v/count, C labels as
// u16 length + UTF-8, then per sample u32 label, u32 group, audio f32s,
// video f32s.
std::vector<std::uint8_t> encode_dataset(const Dataset& dataset);
Dataset decode_dataset(std::span<const std::uint8_t> bytes);
void save_dataset(const std::filesystem::path& path, const Dataset& dataset);
Dataset load_dataset(const std::filesystem::path& path);

std::vector<std::string> default_label_names(std::size_t classes);

struct Batch {
  Tensor audio;  // [N, T, D_a]
  Tensor video;  // [N, F, D_v]
  std::vector<int> labels;
  std::vector<std::size_t> indices;  // positions in the source dataset

  std::size_t size() const { return labels.size(); }
};

enum class BatchMode { train, eval };

// Training mode drops the short final batch; eval mode keeps it. Throws
// ConfigError when batch_size < 2 and auxiliary tasks need pairs.
std::vector<Batch> make_batches(const Dataset& dataset, std::size_t batch_size, bool shuffle, std::uint64_t seed,
                                BatchMode mode, bool auxiliary_tasks = true);

// Stacks an explicit selection of samples.
Batch stack_batch(const Dataset& dataset, std::span<const std::size_t> indices);

struct Fold {
  std::uint32_t test_group = 0;
  Dataset train;
  Dataset test;
};

// One fold per distinct group, ascending by group id.
std::vector<Fold> split_leave_one_group_out(const Dataset& dataset);

// Samples whose group is listed, header adjusted.
Dataset subset_by_group(const Dataset& dataset, std::span<const std::uint32_t> groups, bool keep);

enum class SyntheticScheme { complementary, redundant };

struct SyntheticSpec {
  std::uint32_t classes = 4;
  std::uint32_t groups = 4;
  std::uint32_t per_class = 200;  // per class per group
  std::uint32_t audio_dim = 32;
  std::uint32_t video_dim = 24;
  std::uint32_t audio_frames = 8;
  std::uint32_t video_frames = 4;
  double separation = 3.0;
  double noise = 1.0;
  SyntheticScheme scheme = SyntheticScheme::complementary;
  std::uint64_t seed = 1;
};

// Class-conditional Gaussian embeddings. In the complementary scheme audio
// carries only k / 2 and video only k % 2, so neither modality alone can
// separate all four classes.
Dataset generate_synthetic(const SyntheticSpec& spec);

std::string to_string(SyntheticScheme scheme);
SyntheticScheme parse_scheme(const std::string& text);

}  // namespace foal
