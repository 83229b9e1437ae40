#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "foal/model.hpp"
#include "foal/trainer.hpp"

namespace foal {

// Flat `key = value` run description. Model input dimensions are taken from
// the dataset header, not from this file.
struct RunConfig {
  std::string data;
  std::string val_data;      // optional; when empty, val_group of `data` is held out
  std::int64_t val_group = -1;  // -1: highest group id
  std::string out_dir = "run";
  std::uint64_t seed = 0;
  std::size_t jobs = 1;
  bool ablation = false;
  FoalNetConfig model;
  OptimConfig optim;
};

// Unknown keys, duplicates and malformed values raise ConfigError. Lines may
// carry `#` comments.
RunConfig parse_run_config(const std::string& text);
RunConfig load_run_config(const std::filesystem::path& path);

// Every key with its resolved value, one per line, in documentation order.
std::string to_text(const RunConfig& cfg);

std::vector<std::string> run_config_keys();

// Applies the run seed to the model and optimizer.
FoalNetConfig resolved_model_config(const RunConfig& cfg, const DatasetHeader& header);
OptimConfig resolved_optim_config(const RunConfig& cfg);

}  // namespace foal
