#include "foal/trainer.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <exception>
#include <iomanip>
#include <ostream>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "foal/errors.hpp"
#include "foal/rng.hpp"

namespace foal {

void validate(const OptimConfig& cfg) {
  if (!(cfg.lr > 0.0)) throw ConfigError("learning rate must be > 0");
  if (!(cfg.beta1 >= 0.0 && cfg.beta1 < 1.0) || !(cfg.beta2 >= 0.0 && cfg.beta2 < 1.0)) {
    throw ConfigError("betas must lie in [0, 1)");
  }
  if (!(cfg.eps > 0.0)) throw ConfigError("adam epsilon must be > 0");
  if (!(cfg.weight_decay >= 0.0)) throw ConfigError("weight decay must be >= 0");
  if (cfg.batch_size == 0) throw ConfigError("batch size must be positive");
}

void adamw_step(std::span<Tensor> params, OptimState& state, const OptimConfig& cfg) {
  if (state.m.empty()) {
    for (const auto& p : params) {
      state.m.emplace_back(p.numel(), 0.0);
      state.v.emplace_back(p.numel(), 0.0);
    }
  }
  if (state.m.size() != params.size()) throw ShapeError("optimizer state does not match the parameter list");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (state.m[i].size() != params[i].numel()) throw ShapeError("optimizer state shape mismatch at parameter " + std::to_string(i));
    for (double g : params[i].grad()) {
      if (!std::isfinite(g)) throw NumericError("non-finite gradient in parameter " + std::to_string(i));
    }
  }
  ++state.step;
  const double t = static_cast<double>(state.step);
  const double bc1 = 1.0 - std::pow(cfg.beta1, t);
  const double bc2 = 1.0 - std::pow(cfg.beta2, t);
  for (std::size_t i = 0; i < params.size(); ++i) {
    auto theta = params[i].mutable_data();
    const auto grad = params[i].grad();
    auto& m = state.m[i];
    auto& v = state.v[i];
    for (std::size_t k = 0; k < theta.size(); ++k) {
      theta[k] -= cfg.lr * cfg.weight_decay * theta[k];
      m[k] = cfg.beta1 * m[k] + (1.0 - cfg.beta1) * grad[k];
      v[k] = cfg.beta2 * v[k] + (1.0 - cfg.beta2) * grad[k] * grad[k];
      const double m_hat = m[k] / bc1;
      const double v_hat = v[k] / bc2;
      theta[k] -= cfg.lr * m_hat / (std::sqrt(v_hat) + cfg.eps);
    }
  }
}

Metrics compute_metrics(std::span<const int> truth, std::span<const int> pred, std::size_t classes) {
  if (truth.empty()) throw ConfigError("compute_metrics on an empty set");
  if (truth.size() != pred.size()) throw ShapeError("truth and prediction lengths differ");
  Metrics m;
  m.classes = classes;
  m.count = truth.size();
  m.confusion.assign(classes, std::vector<std::size_t>(classes, 0));
  std::size_t correct = 0;
  for (std::size_t i = 0; i < truth.size(); ++i) {
    if (truth[i] < 0 || pred[i] < 0 || static_cast<std::size_t>(truth[i]) >= classes ||
        static_cast<std::size_t>(pred[i]) >= classes) {
      throw ShapeError("class index out of range at position " + std::to_string(i));
    }
    ++m.confusion[truth[i]][pred[i]];
    if (truth[i] == pred[i]) ++correct;
  }
  m.wa = static_cast<double>(correct) / static_cast<double>(truth.size());
  double recall_sum = 0.0;
  std::size_t present = 0;
  for (std::size_t c = 0; c < classes; ++c) {
    std::size_t row = 0;
    for (auto v : m.confusion[c]) row += v;
    if (row == 0) continue;
    ++present;
    recall_sum += static_cast<double>(m.confusion[c][c]) / static_cast<double>(row);
  }
  m.ua = recall_sum / static_cast<double>(present);
  return m;
}

std::vector<int> predict(FoalNet& model, const Dataset& dataset, std::size_t batch_size) {
  const Mode previous = model.mode();
  model.set_mode(Mode::eval);
  std::vector<int> out;
  out.reserve(dataset.samples.size());
  for (const auto& batch : make_batches(dataset, batch_size, false, 0, BatchMode::eval, false)) {
    const Tensor logits = model.classify(batch.audio, batch.video);
    const auto values = logits.data();
    const std::size_t c = logits.dim(1);
    for (std::size_t i = 0; i < batch.size(); ++i) {
      const auto row = values.subspan(i * c, c);
      out.push_back(static_cast<int>(std::max_element(row.begin(), row.end()) - row.begin()));
    }
  }
  model.set_mode(previous);
  return out;
}

Metrics evaluate(FoalNet& model, const Dataset& dataset, std::size_t batch_size) {
  std::vector<int> truth;
  for (const auto& s : dataset.samples) truth.push_back(static_cast<int>(s.label));
  return compute_metrics(truth, predict(model, dataset, batch_size), dataset.header.classes);
}

std::string to_ndjson(const EpochLogRecord& r) {
  nlohmann::ordered_json j;
  j["run_id"] = r.run_id;
  j["fold"] = r.fold;
  j["epoch"] = r.epoch;
  j["l_total"] = r.loss.l_total;
  j["l_ce"] = r.loss.l_ce;
  j["l_a"] = r.loss.l_a;
  j["l_m"] = r.loss.l_m;
  j["ua"] = r.ua;
  j["wa"] = r.wa;
  return j.dump();
}

void MetricsLog::append(const EpochLogRecord& record) {
  if (!out_) return;
  const std::string line = to_ndjson(record);
  std::lock_guard lock(mutex_);
  *out_ << line << '\n';
  out_->flush();
}

TrainResult train(FoalNet& model, const Dataset& train_set, const Dataset& val_set, const OptimConfig& optim,
                  const RunOptions& run) {
  validate(optim);
  TrainResult result;
  result.best_parameters = model.snapshot();
  if (optim.epochs == 0) return result;

  auto named = model.parameters();
  std::vector<Tensor> params;
  for (auto& p : named) params.push_back(p.tensor);
  OptimState state;
  double best_ua = -1.0;
  const bool aux = model.config().auxiliary_tasks();

  for (std::size_t epoch = 1; epoch <= optim.epochs; ++epoch) {
    model.set_mode(Mode::train);
    const auto batches =
        make_batches(train_set, optim.batch_size, true, mix_seed(optim.seed, epoch), BatchMode::train, aux);
    if (batches.empty()) throw ConfigError("training set is smaller than one batch");
    EpochRecord record;
    record.epoch = epoch;
    for (std::size_t b = 0; b < batches.size(); ++b) {
      for (auto& p : params) p.zero_grad();
      LossBreakdown step;
      try {
        const LossTerms terms = model.total_loss(batches[b]);
        step = terms.values();
        backward(terms.total);
        adamw_step(params, state, optim);
      } catch (const NumericError& e) {
        throw NumericError("epoch " + std::to_string(epoch) + ", batch " + std::to_string(b) + ": " + e.what());
      }
      record.train_loss.l_total += step.l_total;
      record.train_loss.l_ce += step.l_ce;
      record.train_loss.l_a += step.l_a;
      record.train_loss.l_m += step.l_m;
      if (run.keep_step_losses) record.steps.push_back(step);
    }
    const double nb = static_cast<double>(batches.size());
    record.train_loss.l_total /= nb;
    record.train_loss.l_ce /= nb;
    record.train_loss.l_a /= nb;
    record.train_loss.l_m /= nb;

    record.val = evaluate(model, val_set, optim.batch_size);
    if (record.val.ua > best_ua) {
      best_ua = record.val.ua;
      result.best_epoch = epoch;
      result.best_metrics = record.val;
      result.best_parameters = model.snapshot();
    }
    if (run.log) {
      run.log->append({run.run_id, run.fold, epoch, record.train_loss, record.val.ua, record.val.wa});
    }
    result.history.push_back(std::move(record));
  }
  model.restore(result.best_parameters);
  model.set_mode(Mode::eval);
  return result;
}

void run_parallel(std::vector<std::function<void()>> tasks, std::size_t jobs) {
  jobs = std::max<std::size_t>(1, std::min(jobs, tasks.size()));
  if (jobs == 1) {
    for (auto& t : tasks) t();
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(tasks.size());
  std::vector<std::thread> workers;
  for (std::size_t w = 0; w < jobs; ++w) {
    workers.emplace_back([&] {
      for (std::size_t i = next++; i < tasks.size(); i = next++) {
        try {
          tasks[i]();
        } catch (...) {
          errors[i] = std::current_exception();
        }
      }
    });
  }
  for (auto& w : workers) w.join();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
}

namespace {

FoldResult train_fold(const Fold& fold, std::size_t fold_index, const FoalNetConfig& model_cfg,
                      const OptimConfig& optim, const std::string& name, MetricsLog* log) {
  FoalNetConfig mc = model_cfg;
  OptimConfig oc = optim;
  mc.seed = model_cfg.seed ^ fold_index;
  oc.seed = optim.seed ^ fold_index;
  FoalNet model(mc);
  RunOptions run{name, fold.test_group, log, false};
  const TrainResult tr = train(model, fold.train, fold.test, oc, run);
  FoldResult fr;
  fr.test_group = fold.test_group;
  fr.seed = mc.seed;
  fr.best_epoch = tr.best_epoch;
  fr.metrics = tr.best_epoch == 0 ? evaluate(model, fold.test, oc.batch_size) : tr.best_metrics;
  return fr;
}

void aggregate(CrossValidationResult& r) {
  r.mean_ua = 0.0;
  r.mean_wa = 0.0;
  for (const auto& f : r.folds) {
    r.mean_ua += f.metrics.ua;
    r.mean_wa += f.metrics.wa;
  }
  r.mean_ua /= static_cast<double>(r.folds.size());
  r.mean_wa /= static_cast<double>(r.folds.size());
}

}  // namespace

CrossValidationResult cross_validate(const Dataset& dataset, const FoalNetConfig& model_cfg, const OptimConfig& optim,
                                     const std::string& name, MetricsLog* log, std::size_t jobs) {
  const auto folds = split_leave_one_group_out(dataset);
  CrossValidationResult result;
  result.name = name;
  result.folds.resize(folds.size());
  std::vector<std::function<void()>> tasks;
  for (std::size_t f = 0; f < folds.size(); ++f) {
    tasks.push_back([&, f] { result.folds[f] = train_fold(folds[f], f, model_cfg, optim, name, log); });
  }
  run_parallel(std::move(tasks), jobs);
  aggregate(result);
  return result;
}

std::vector<AblationCell> ablation_cells() {
  return {{"Baseline", false, false}, {"+AVEL", true, false}, {"+MEM", false, true}, {"+AVEL+MEM", true, true}};
}

std::vector<CrossValidationResult> ablation_grid(const Dataset& dataset, const FoalNetConfig& model_cfg,
                                                 const OptimConfig& optim, MetricsLog* log, std::size_t jobs) {
  const auto folds = split_leave_one_group_out(dataset);
  const auto cells = ablation_cells();
  std::vector<CrossValidationResult> results(cells.size());
  std::vector<std::function<void()>> tasks;
  for (std::size_t c = 0; c < cells.size(); ++c) {
    results[c].name = cells[c].name;
    results[c].folds.resize(folds.size());
    for (std::size_t f = 0; f < folds.size(); ++f) {
      tasks.push_back([&, c, f] {
        FoalNetConfig mc = model_cfg;
        mc.enable_avel = cells[c].enable_avel;
        mc.enable_mem = cells[c].enable_mem;
        results[c].folds[f] = train_fold(folds[f], f, mc, optim, cells[c].name, log);
      });
    }
  }
  run_parallel(std::move(tasks), jobs);
  for (auto& r : results) aggregate(r);
  return results;
}

std::string format_summary(const std::vector<CrossValidationResult>& results) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(2);
  for (const auto& r : results) {
    os << r.name << '\n';
    os << "  fold  group  best_epoch   UA(%)   WA(%)\n";
    for (std::size_t f = 0; f < r.folds.size(); ++f) {
      const auto& fr = r.folds[f];
      os << "  " << std::setw(4) << f << "  " << std::setw(5) << fr.test_group << "  " << std::setw(10)
         << fr.best_epoch << "  " << std::setw(6) << 100.0 * fr.metrics.ua << "  " << std::setw(6)
         << 100.0 * fr.metrics.wa << '\n';
    }
    os << "  mean                     " << std::setw(6) << 100.0 * r.mean_ua << "  " << std::setw(6)
       << 100.0 * r.mean_wa << '\n';
  }
  return os.str();
}

}  // namespace foal
