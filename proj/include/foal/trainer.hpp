#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <mutex>
#include <span>
#include <string>
#include <vector>

#include "foal/data.hpp"
#include "foal/model.hpp"

namespace foal {

struct OptimConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.01;
  std::size_t epochs = 50;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
};

void validate(const OptimConfig& cfg);

struct OptimState {
  std::vector<std::vector<double>> m;
  std::vector<std::vector<double>> v;
  std::uint64_t step = 0;
};

// One AdamW update. Decay is applied first (theta -= lr * wd * theta), then
// the bias-corrected moment step.
void adamw_step(std::span<Tensor> params, OptimState& state, const OptimConfig& cfg);

struct Metrics {
  std::size_t classes = 0;
  std::vector<std::vector<std::size_t>> confusion;  // [truth][prediction]
  double ua = 0.0;  // mean recall over classes present in truth
  double wa = 0.0;  // overall accuracy
  std::size_t count = 0;
};

Metrics compute_metrics(std::span<const int> truth, std::span<const int> pred, std::size_t classes);

// Eval-mode predictions over the whole dataset, short final batch included.
std::vector<int> predict(FoalNet& model, const Dataset& dataset, std::size_t batch_size);
Metrics evaluate(FoalNet& model, const Dataset& dataset, std::size_t batch_size);

struct EpochRecord {
  std::size_t epoch = 0;        // 1-based
  LossBreakdown train_loss;     // mean over training batches
  Metrics val;
  // Per-step breakdowns, for auditing the loss composition.
  std::vector<LossBreakdown> steps;
};

struct EpochLogRecord {
  std::string run_id;
  std::uint32_t fold = 0;
  std::size_t epoch = 0;
  LossBreakdown loss;
  double ua = 0.0;
  double wa = 0.0;
};

std::string to_ndjson(const EpochLogRecord& record);

// Newline-delimited JSON writer; appends are serialized.
class MetricsLog {
 public:
  explicit MetricsLog(std::ostream* out = nullptr) : out_(out) {}
  void append(const EpochLogRecord& record);

 private:
  std::ostream* out_;
  std::mutex mutex_;
};

struct RunOptions {
  std::string run_id = "run";
  std::uint32_t fold = 0;
  MetricsLog* log = nullptr;
  bool keep_step_losses = false;
};

struct TrainResult {
  std::vector<std::vector<double>> best_parameters;
  std::size_t best_epoch = 0;  // 0 means the initial model
  Metrics best_metrics;
  std::vector<EpochRecord> history;
};

// Per epoch: shuffle, batch, total loss, backward, AdamW; then eval-mode
// validation. Keeps the parameters with the best validation UA (earliest
// epoch on ties) and leaves them loaded in `model` on return.
TrainResult train(FoalNet& model, const Dataset& train_set, const Dataset& val_set, const OptimConfig& optim,
                  const RunOptions& run = {});

struct FoldResult {
  std::uint32_t test_group = 0;
  std::uint64_t seed = 0;
  Metrics metrics;
  std::size_t best_epoch = 0;
};

struct CrossValidationResult {
  std::string name;
  std::vector<FoldResult> folds;
  double mean_ua = 0.0;
  double mean_wa = 0.0;
};

// One model per held-out group, seeded base_seed ^ fold_index. The held-out
// group is the validation set used for checkpoint selection.
CrossValidationResult cross_validate(const Dataset& dataset, const FoalNetConfig& model_cfg, const OptimConfig& optim,
                                     const std::string& name = "run", MetricsLog* log = nullptr,
                                     std::size_t jobs = 1);

struct AblationCell {
  std::string name;
  bool enable_avel;
  bool enable_mem;
};

// Baseline, +AVEL, +MEM, +AVEL+MEM.
std::vector<AblationCell> ablation_cells();

std::vector<CrossValidationResult> ablation_grid(const Dataset& dataset, const FoalNetConfig& model_cfg,
                                                 const OptimConfig& optim, MetricsLog* log = nullptr,
                                                 std::size_t jobs = 1);

std::string format_summary(const std::vector<CrossValidationResult>& results);

// Runs tasks on up to `jobs` threads; results keep submission order.
void run_parallel(std::vector<std::function<void()>> tasks, std::size_t jobs);

}  // namespace foal
