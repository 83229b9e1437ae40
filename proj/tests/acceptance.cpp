// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any FAIL.
// Tolerances and thresholds are pinned here.

#include <algorithm>
#include <bit>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <functional>
#include <iostream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "foal/avel.hpp"
#include "foal/byte_io.hpp"
#include "foal/gradcheck_suite.hpp"
#include "foal/mem.hpp"
#include "foal/model.hpp"
#include "foal/trainer.hpp"
#include "golden_fixtures.hpp"
#include "nearest_mean.hpp"
#include "reference.hpp"
#include "test_util.hpp"

using namespace foal;
using foal::testing::random_labels;
using foal::testing::random_tensor;

namespace {

constexpr double kFloatTol = 1e-10;
constexpr std::size_t kOracleTrials = 100;
constexpr double kGradcheckSeconds = 60.0;
constexpr double kUnimodalCeiling = 0.60;
constexpr double kTargetWa = 0.90;
constexpr std::size_t kEndToEndEpochs = 30;
constexpr double kFullVsBaselineSlack = 0.010;
constexpr std::size_t kAblationEpochs = 10;
constexpr double kAvelVsBaselineSlack = 0.005;
constexpr double kEndToEndSeconds = 600.0;
const std::vector<std::uint64_t> kSeeds{1, 2, 3};

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
  return std::chrono::duration<double>(Clock::now() - t0).count();
}

std::string fmt(double v, int digits = 4) {
  std::ostringstream os;
  os.precision(digits);
  os << v;
  return os.str();
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  return v[v.size() / 2];
}

// Collects named sub-checks; the first failures are reported.
struct Checklist {
  std::size_t total = 0;
  std::vector<std::string> failed;

  void check(bool ok, const std::string& what) {
    ++total;
    if (!ok) failed.push_back(what);
  }

  Outcome outcome(const std::string& summary) const {
    if (failed.empty()) return {true, summary + " (" + std::to_string(total) + " checks)"};
    std::string msg = std::to_string(failed.size()) + "/" + std::to_string(total) + " failed: ";
    for (std::size_t i = 0; i < std::min<std::size_t>(3, failed.size()); ++i) msg += (i ? "; " : "") + failed[i];
    return {false, msg};
  }
};

Batch random_batch(Rng& rng, std::size_t n, const FoalNetConfig& cfg, std::size_t t = 3, std::size_t f = 2) {
  Batch b;
  b.audio = random_tensor(rng, {n, t, cfg.audio_dim});
  b.video = random_tensor(rng, {n, f, cfg.video_dim});
  b.labels = random_labels(rng, n, cfg.classes);
  b.indices.resize(n);
  std::iota(b.indices.begin(), b.indices.end(), 0);
  return b;
}

Batch permuted(const Batch& b, const std::vector<std::size_t>& perm) {
  Batch out;
  out.audio = index_rows(b.audio, perm);
  out.video = index_rows(b.video, perm);
  for (auto p : perm) out.labels.push_back(b.labels[p]);
  out.indices = perm;
  return out;
}

FoalNetConfig desk_model(std::uint64_t seed, bool avel, bool mem) {
  FoalNetConfig c;
  c.audio_dim = 32;
  c.video_dim = 24;
  c.proj_hidden = 64;
  c.align.proj_dim = 32;
  c.heads = 4;
  c.classes = 4;
  c.enable_avel = avel;
  c.enable_mem = mem;
  c.seed = seed;
  return c;
}

OptimConfig desk_optim(std::size_t epochs, std::uint64_t seed) {
  OptimConfig o;
  o.epochs = epochs;
  o.seed = seed;
  return o;
}

SyntheticSpec desk_spec() {
  SyntheticSpec s;  // defaults: C=4, 4 groups, 200/class/group, 32/24 dims, T=8, F=4, s=3, sigma=1
  s.seed = 1;
  return s;
}

// ---------------------------------------------------------------------------

Outcome criterion_scope() {
  return {true, "large-corpus benchmark figures are out of scope; criteria 2-8 stand in"};
}

Outcome criterion_gradients() {
  const auto t0 = Clock::now();
  const auto entries = run_gradcheck_suite();
  const double elapsed = seconds_since(t0);
  double worst_prim = 0.0, worst_all = 0.0;
  bool ok = true;
  std::string bad;
  for (const auto& e : entries) {
    worst_all = std::max(worst_all, e.max_relative_error);
    if (e.tolerance == kPrimitiveTolerance) worst_prim = std::max(worst_prim, e.max_relative_error);
    if (!e.passed() || e.tolerance > kCompositeTolerance) {
      ok = false;
      bad = e.name;
    }
  }
  ok = ok && worst_all <= kCompositeTolerance && worst_prim <= kPrimitiveTolerance && elapsed < kGradcheckSeconds;
  return {ok, std::to_string(entries.size()) + " entries, max rel err " + fmt(worst_all, 3) + " (primitives " +
                  fmt(worst_prim, 3) + "), " + fmt(elapsed, 3) + " s" + (bad.empty() ? "" : ", failing: " + bad)};
}

Outcome criterion_oracles() {
  Checklist cl;
  Rng rng(31);
  std::size_t instances = 0;

  // Contrastive alignment loss, both normalizations.
  for (std::size_t trial = 0; trial < kOracleTrials; ++trial, ++instances) {
    const std::size_t n = 1 + rng.below(8);
    const auto labels = random_labels(rng, n, 1 + rng.below(4));
    const auto ca = random_tensor(rng, {n, n}, false, 3.0), cv = random_tensor(rng, {n, n}, false, 3.0);
    AlignmentConfig cfg;
    cfg.per_positive_norm = trial % 2 == 1;
    const double got = alignment_loss(ca, cv, MatchLabels(labels), cfg).item();
    const double expect =
        ref::alignment_loss(ref::from_tensor2(ca), ref::from_tensor2(cv), labels, cfg.per_positive_norm);
    cl.check(std::abs(got - expect) <= kFloatTol, "alignment trial " + std::to_string(trial));
  }

  // Hard-negative mining; ties are made likely by rounding.
  for (std::size_t trial = 0; trial < kOracleTrials; ++trial, ++instances) {
    const std::size_t n = 1 + rng.below(8);
    const auto labels = random_labels(rng, n, 1 + rng.below(4));
    std::vector<double> raw(n * n);
    for (auto& v : raw) v = trial % 2 ? std::round(2.0 * rng.normal()) : rng.normal();
    const auto ca = Tensor::from({n, n}, raw);
    const auto cv = transpose(ca);
    const auto hn = mine_hard_negatives(ca, cv, MatchLabels(labels));
    const auto ma = ref::mine(ref::from_tensor2(ca), labels), mv = ref::mine(ref::from_tensor2(cv), labels);
    cl.check(hn.id_a2v == ma.ids && hn.valid_a == ma.valid && hn.id_v2a == mv.ids && hn.valid_v == mv.valid,
             "mining trial " + std::to_string(trial));
  }

  // Matching loss through the full model path.
  for (std::size_t trial = 0; trial < kOracleTrials; ++trial, ++instances) {
    auto cfg = gradcheck_model_config();
    cfg.seed = 100 + trial;
    cfg.align.per_positive_norm = trial % 2 == 0;
    FoalNet model(cfg);
    model.set_mode(Mode::eval);
    const Batch b = random_batch(rng, 2 + rng.below(7), cfg);
    auto [ea, ev] = model.project(b.audio, b.video);
    const auto sims = similarity_matrices(ea, ev, cfg.align);
    const auto hn = mine_hard_negatives(sims.a2v, sims.v2a, MatchLabels(b.labels));
    const double got = mem_forward_loss(model, b.audio, b.video, hn, Mode::eval).item();
    const auto s = ref::similarity(ref::from_tensor2(ea), ref::from_tensor2(ev), cfg.align);
    const auto ma = ref::mine(s.a2v, b.labels), mv = ref::mine(s.v2a, b.labels);
    const double expect = ref::matching_loss(model, b.audio, b.video, ma, mv);
    cl.check(hn.id_a2v == ma.ids && hn.id_v2a == mv.ids && std::abs(got - expect) <= kFloatTol,
             "matching trial " + std::to_string(trial));
  }

  // UA / WA against a tally.
  for (std::size_t trial = 0; trial < kOracleTrials; ++trial, ++instances) {
    const std::size_t n = 1 + rng.below(8), classes = 1 + rng.below(4);
    const auto truth = random_labels(rng, n, classes), pred = random_labels(rng, n, classes);
    std::vector<double> hit(classes, 0.0), total(classes, 0.0);
    double correct = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      total[truth[i]] += 1.0;
      if (truth[i] == pred[i]) {
        hit[truth[i]] += 1.0;
        correct += 1.0;
      }
    }
    double ua = 0.0, present = 0.0;
    for (std::size_t c = 0; c < classes; ++c) {
      if (total[c] > 0.0) {
        ua += hit[c] / total[c];
        present += 1.0;
      }
    }
    const auto m = compute_metrics(truth, pred, classes);
    bool confusion_ok = true;
    for (std::size_t i = 0; i < n; ++i) confusion_ok = confusion_ok && m.confusion[truth[i]][pred[i]] > 0;
    cl.check(std::abs(m.ua - ua / present) <= kFloatTol && std::abs(m.wa - correct / n) <= kFloatTol && confusion_ok,
             "metrics trial " + std::to_string(trial));
  }

  // Matmul against a triple loop.
  for (std::size_t trial = 0; trial < kOracleTrials; ++trial, ++instances) {
    const std::size_t r = 1 + rng.below(8), k = 1 + rng.below(8), c = 1 + rng.below(8);
    const auto a = random_tensor(rng, {r, k}), b = random_tensor(rng, {k, c});
    const auto y = matmul(a, b);
    double worst = 0.0;
    for (std::size_t i = 0; i < r; ++i) {
      for (std::size_t j = 0; j < c; ++j) {
        double acc = 0.0;
        for (std::size_t q = 0; q < k; ++q) acc += a.at({i, q}) * b.at({q, j});
        worst = std::max(worst, std::abs(acc - y.at({i, j})));
      }
    }
    cl.check(worst <= kFloatTol, "matmul trial " + std::to_string(trial));
  }
  return cl.outcome(std::to_string(instances) + " randomized instances, N <= 8");
}

Outcome criterion_composition() {
  SyntheticSpec spec;
  spec.groups = 2;
  spec.per_class = 16;
  spec.audio_dim = 8;
  spec.video_dim = 6;
  spec.audio_frames = 3;
  spec.video_frames = 2;
  spec.seed = 3;
  const auto ds = generate_synthetic(spec);
  FoalNet model(gradcheck_model_config());
  OptimConfig o;
  o.epochs = 5;
  o.batch_size = 16;
  o.lr = 1e-3;
  RunOptions run;
  run.keep_step_losses = true;
  const auto r = train(model, ds, ds, o, run);
  Checklist cl;
  std::size_t steps = 0;
  for (const auto& h : r.history) {
    for (const auto& s : h.steps) {
      ++steps;
      cl.check(s.l_total == s.l_ce + s.l_a + 0.01 * s.l_m && s.l_a > 0.0 && s.l_m > 0.0,
               "epoch " + std::to_string(h.epoch));
    }
  }
  cl.check(r.history.size() == 5 && steps == 5 * 8, "step count");
  return cl.outcome(std::to_string(steps) + " steps over 5 epochs bit-exact");
}

struct EndToEndRun {
  double best_wa = 0.0;  // highest test WA over the epochs
  double final_ua = 0.0;
  double final_wa = 0.0;
};

EndToEndRun run_desk(const Fold& fold, std::uint64_t seed, bool aux) {
  FoalNet model(desk_model(seed, aux, aux));
  const auto r = train(model, fold.train, fold.test, desk_optim(kEndToEndEpochs, seed));
  EndToEndRun out;
  for (const auto& h : r.history) out.best_wa = std::max(out.best_wa, h.val.wa);
  out.final_ua = r.history.back().val.ua;
  out.final_wa = r.history.back().val.wa;
  return out;
}

std::vector<Outcome> criterion_end_to_end() {
  const auto t0 = Clock::now();
  const Dataset ds = generate_synthetic(desk_spec());
  // Train on groups 0-2, score on group 3.
  const std::uint32_t held[] = {3};
  Fold fold{3, subset_by_group(ds, held, false), subset_by_group(ds, held, true)};

  Outcome a;
  {
    using foal::testing::View;
    const double audio = foal::testing::nearest_mean_accuracy(fold.train, fold.test, View::audio);
    const double video = foal::testing::nearest_mean_accuracy(fold.train, fold.test, View::video);
    const double joint = foal::testing::nearest_mean_accuracy(fold.train, fold.test, View::joint);
    a.pass = audio <= kUnimodalCeiling && video <= kUnimodalCeiling;
    a.detail = "nearest-mean accuracy audio " + fmt(audio) + ", video " + fmt(video) + " (joint " + fmt(joint) + ")";
  }

  std::vector<EndToEndRun> base, full;
  for (auto seed : kSeeds) base.push_back(run_desk(fold, seed, false));
  for (auto seed : kSeeds) full.push_back(run_desk(fold, seed, true));
  const double elapsed = seconds_since(t0);

  auto wa_line = [](const std::vector<EndToEndRun>& runs) {
    std::string s;
    for (const auto& r : runs) s += (s.empty() ? "" : "/") + fmt(r.best_wa);
    return s;
  };
  auto min_wa = [](const std::vector<EndToEndRun>& runs) {
    double m = 1.0;
    for (const auto& r : runs) m = std::min(m, r.best_wa);
    return m;
  };
  auto ua_median = [](const std::vector<EndToEndRun>& runs) {
    std::vector<double> v;
    for (const auto& r : runs) v.push_back(r.final_ua);
    return median(v);
  };

  Outcome b{min_wa(base) >= kTargetWa, "baseline best test WA per seed " + wa_line(base) + " within " +
                                           std::to_string(kEndToEndEpochs) + " epochs"};
  const double ua_full = ua_median(full), ua_base = ua_median(base);
  Outcome c{min_wa(full) >= kTargetWa && ua_full >= ua_base - kFullVsBaselineSlack && elapsed < kEndToEndSeconds,
            "full best test WA per seed " + wa_line(full) + "; median final UA full " + fmt(ua_full) +
                " vs baseline " + fmt(ua_base) + "; " + fmt(elapsed, 3) + " s"};
  return {a, b, c};
}

Outcome criterion_ablation() {
  const Dataset ds = generate_synthetic(desk_spec());
  Checklist cl;
  std::vector<double> base_ua, avel_ua;
  std::string table;
  for (auto seed : kSeeds) {
    const auto rows = ablation_grid(ds, desk_model(seed, true, true), desk_optim(kAblationEpochs, seed));
    const auto text = format_summary(rows);
    if (table.empty()) table = text;
    const auto cells = ablation_cells();
    cl.check(rows.size() == 4, "four rows");
    for (std::size_t i = 0; i < rows.size() && i < cells.size(); ++i) {
      cl.check(rows[i].name == cells[i].name, "row name " + rows[i].name);
      cl.check(rows[i].folds.size() == 4, "fold count " + rows[i].name);
      cl.check(text.find(rows[i].name + "\n") != std::string::npos, "summary lists " + rows[i].name);
    }
    cl.check(text.find("mean") != std::string::npos, "summary has means");
    base_ua.push_back(rows[0].mean_ua);
    avel_ua.push_back(rows[1].mean_ua);
  }
  const double b = median(base_ua), a = median(avel_ua);
  cl.check(a >= b - kAvelVsBaselineSlack, "+AVEL median mean UA");
  std::cout << table;
  return cl.outcome("median mean UA +AVEL " + fmt(a) + " vs Baseline " + fmt(b));
}

Outcome criterion_invariants() {
  Checklist cl;
  Rng rng(77);

  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t n = 1 + rng.below(8);
    const auto labels = random_labels(rng, n, 3);
    const MatchLabels m(labels);
    bool sym = true;
    for (std::size_t i = 0; i < n; ++i) {
      sym = sym && m(i, i);
      for (std::size_t j = 0; j < n; ++j) sym = sym && m(i, j) == m(j, i);
    }
    cl.check(sym, "match matrix symmetric with unit diagonal");

    AlignmentConfig cfg;
    const auto sims = similarity_matrices(random_tensor(rng, {n, 5}), random_tensor(rng, {n, 5}), cfg);
    bool transposed = true;
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < n; ++j) transposed = transposed && sims.v2a.at({i, j}) == sims.a2v.at({j, i});
    cl.check(transposed, "reverse similarity is the transpose");

    // Row shifts leave both the loss and the mined indices unchanged.
    std::vector<double> shifted(sims.a2v.data().begin(), sims.a2v.data().end());
    for (std::size_t i = 0; i < n; ++i) {
      const double c = rng.uniform(-20.0, 20.0);
      for (std::size_t j = 0; j < n; ++j) shifted[i * n + j] += c;
    }
    const auto moved = Tensor::from({n, n}, shifted);
    const double l0 = alignment_loss(sims.a2v, sims.v2a, m, cfg).item();
    const double l1 = alignment_loss(moved, sims.v2a, m, cfg).item();
    cl.check(std::abs(l0 - l1) <= 1e-10, "alignment loss row-shift invariant");
    const auto h0 = mine_hard_negatives(sims.a2v, sims.v2a, m);
    const auto h1 = mine_hard_negatives(moved, sims.v2a, m);
    cl.check(h0.id_a2v == h1.id_a2v && h0.valid_a == h1.valid_a, "mined indices row-shift invariant");
    for (std::size_t i = 0; i < n; ++i) {
      if (h0.valid_a[i]) cl.check(labels[h0.id_a2v[i]] != labels[i], "mined audio negative has another label");
      if (h0.valid_v[i]) cl.check(labels[h0.id_v2a[i]] != labels[i], "mined video negative has another label");
    }
  }

  {
    CrossAttention attn(2, 8, 6, 0.1, rng, 5);
    const auto q = random_tensor(rng, {3, 4, 8}), kv = random_tensor(rng, {3, 5, 6});
    for (std::size_t h = 0; h < 2; ++h) {
      const auto w = attn.attention_weights(q, kv, h);
      bool stochastic = true;
      for (std::size_t row = 0; row < 3 * 4; ++row) {
        double s = 0.0;
        for (std::size_t k = 0; k < 5; ++k) {
          const double v = w.data()[row * 5 + k];
          stochastic = stochastic && v >= 0.0;
          s += v;
        }
        stochastic = stochastic && std::abs(s - 1.0) <= 1e-12;
      }
      cl.check(stochastic, "attention rows are distributions");
    }
  }

  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    auto cfg = gradcheck_model_config();
    cfg.seed = seed;
    FoalNet model(cfg);
    model.set_mode(Mode::eval);
    const Batch b = random_batch(rng, 6, cfg);
    std::vector<std::size_t> perm(6);
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(std::span(perm));
    const auto x = model.total_loss(b).values(), y = model.total_loss(permuted(b, perm)).values();
    cl.check(std::abs(x.l_ce - y.l_ce) <= 1e-10 && std::abs(x.l_a - y.l_a) <= 1e-10 &&
                 std::abs(x.l_m - y.l_m) <= 1e-10 && std::abs(x.l_total - y.l_total) <= 1e-10,
             "losses invariant under batch permutation");

    Batch same = b;
    same.labels.assign(6, 2);
    cl.check(model.total_loss(same).values().l_m == 0.0, "single-label batch has zero matching loss");
  }

  {
    SyntheticSpec spec;
    spec.groups = 2;
    spec.per_class = 5;
    spec.audio_dim = 8;
    spec.video_dim = 6;
    spec.audio_frames = 3;
    spec.video_frames = 2;
    const auto ds = generate_synthetic(spec);
    const auto back = decode_dataset(encode_dataset(ds));
    cl.check(encode_dataset(back) == encode_dataset(ds), "dataset round trip");

    OptimConfig o;
    o.epochs = 2;
    o.batch_size = 8;
    o.lr = 1e-3;
    FoalNet m1(gradcheck_model_config()), m2(gradcheck_model_config());
    const auto r1 = train(m1, ds, ds, o), r2 = train(m2, ds, ds, o);
    bool same = r1.history.size() == r2.history.size();
    for (std::size_t e = 0; same && e < r1.history.size(); ++e) {
      same = r1.history[e].train_loss.l_total == r2.history[e].train_loss.l_total &&
             r1.history[e].val.ua == r2.history[e].val.ua;
    }
    cl.check(same && m1.snapshot() == m2.snapshot(), "training history is seed-deterministic");
  }
  return cl.outcome("symmetry, transpose, attention, shift, label, permutation, degenerate, round-trip, determinism");
}

Outcome criterion_formats() {
  Checklist cl;
  const std::string dir = FOAL_GOLDEN_DIR;
  const auto expect_ds = foal::testing::golden_dataset();
  const auto ds = load_dataset(dir + "/small.foal");
  bool bits = ds.samples.size() == expect_ds.samples.size();
  for (std::size_t i = 0; bits && i < ds.samples.size(); ++i) {
    const auto &x = ds.samples[i], &y = expect_ds.samples[i];
    bits = x.label == y.label && x.group == y.group && x.audio.size() == y.audio.size();
    for (std::size_t k = 0; bits && k < x.audio.size(); ++k)
      bits = std::bit_cast<std::uint32_t>(x.audio[k]) == std::bit_cast<std::uint32_t>(y.audio[k]);
    for (std::size_t k = 0; bits && k < x.video.size(); ++k)
      bits = std::bit_cast<std::uint32_t>(x.video[k]) == std::bit_cast<std::uint32_t>(y.video[k]);
  }
  cl.check(bits, "golden dataset values bit-exact");
  cl.check(ds.header.label_names == expect_ds.header.label_names, "golden dataset label names");
  cl.check(encode_dataset(ds) == byte_io::read_file(dir + "/small.foal"), "golden dataset re-encodes byte-identically");

  FoalNet expect_model(foal::testing::golden_model_config());
  foal::testing::fill_golden(expect_model);
  FoalNet model(foal::testing::golden_model_config());
  load_checkpoint(dir + "/tiny.ckpt", model);
  bool params = true;
  const auto a = model.snapshot(), b = expect_model.snapshot();
  for (std::size_t i = 0; params && i < a.size(); ++i) {
    for (std::size_t k = 0; params && k < a[i].size(); ++k)
      params = std::bit_cast<std::uint64_t>(a[i][k]) == std::bit_cast<std::uint64_t>(b[i][k]);
  }
  cl.check(params && a.size() == b.size(), "golden checkpoint values bit-exact");
  cl.check(encode_checkpoint(model.parameters()) == byte_io::read_file(dir + "/tiny.ckpt"),
           "golden checkpoint re-encodes byte-identically");
  return cl.outcome("committed little-endian dataset and checkpoint");
}

}  // namespace

int main() {
  bool all = true;
  auto report = [&](const std::string& id, const std::string& title, const Outcome& o) {
    all = all && o.pass;
    std::cout << (o.pass ? "PASS" : "FAIL") << "  [" << id << "] " << title << ": " << o.detail << std::endl;
  };
  auto guarded = [&](const std::string& id, const std::string& title, const std::function<Outcome()>& f) {
    try {
      report(id, title, f());
    } catch (const std::exception& e) {
      report(id, title, {false, std::string("threw: ") + e.what()});
    }
  };

  guarded("1", "benchmark scale", criterion_scope);
  guarded("2", "gradient integrity", criterion_gradients);
  guarded("3", "oracle equivalence", criterion_oracles);
  guarded("4", "loss composition", criterion_composition);
  try {
    const auto e2e = criterion_end_to_end();
    report("5a", "unimodal nearest-mean ceiling", e2e[0]);
    report("5b", "baseline reaches target WA", e2e[1]);
    report("5c", "full model reaches target WA and keeps UA", e2e[2]);
  } catch (const std::exception& e) {
    report("5", "complementary end-to-end", {false, std::string("threw: ") + e.what()});
  }
  guarded("6", "ablation grid", criterion_ablation);
  guarded("7", "invariant suite", criterion_invariants);
  guarded("8", "format fidelity", criterion_formats);
  std::cout << (all ? "ALL CRITERIA PASS" : "SOME CRITERIA FAIL") << std::endl;
  return all ? 0 : 1;
}
