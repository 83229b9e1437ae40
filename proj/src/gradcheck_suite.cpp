#include "foal/gradcheck_suite.hpp"

#include <cmath>

#include "foal/avel.hpp"
#include "foal/grad_check.hpp"
#include "foal/layers.hpp"
#include "foal/mem.hpp"
#include "foal/rng.hpp"

namespace foal {

namespace {

Tensor random_tensor(Rng& rng, Shape shape, bool requires_grad, double spread = 1.0) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = spread * rng.normal();
  return Tensor::from(std::move(shape), std::move(v), requires_grad);
}

// Values bounded away from zero, for the rectifier kink.
Tensor away_from_zero(Rng& rng, Shape shape) {
  std::vector<double> v(shape_numel(shape));
  for (auto& x : v) x = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.1, 1.5);
  return Tensor::from(std::move(shape), std::move(v), true);
}

// Projects an arbitrary output onto fixed random weights so every output
// coordinate contributes a distinct gradient.
Tensor readout(const Tensor& y, const Tensor& weights) { return sum(mul(y, weights)); }

}  // namespace

FoalNetConfig gradcheck_model_config() {
  FoalNetConfig cfg;
  cfg.audio_dim = 8;
  cfg.video_dim = 6;
  cfg.proj_hidden = 16;
  cfg.align.proj_dim = 8;
  cfg.heads = 2;
  cfg.classes = 4;
  cfg.seed = 5;
  return cfg;
}

Batch gradcheck_batch(std::uint64_t seed) {
  Rng rng(seed);
  Batch b;
  b.audio = random_tensor(rng, {4, 3, 8}, false);
  b.video = random_tensor(rng, {4, 2, 6}, false);
  b.labels = {0, 1, 0, 2};
  b.indices = {0, 1, 2, 3};
  return b;
}

std::vector<GradCheckEntry> run_gradcheck_suite() {
  std::vector<GradCheckEntry> out;
  Rng rng(2024);
  auto primitive = [&](std::string name, const std::function<Tensor()>& f, std::vector<Tensor> params) {
    out.push_back({std::move(name), grad_check(f, std::move(params)), kPrimitiveTolerance});
  };

  {
    auto a = random_tensor(rng, {2, 3, 4}, true), b = random_tensor(rng, {4}, true);
    auto w = random_tensor(rng, {2, 3, 4}, false);
    primitive("add (broadcast)", [=] { return readout(add(a, b), w); }, {a, b});
    primitive("sub (broadcast)", [=] { return readout(sub(a, b), w); }, {a, b});
    primitive("mul (broadcast)", [=] { return readout(mul(a, b), w); }, {a, b});
    primitive("scale", [=] { return readout(scale(a, -1.7), w); }, {a});
  }
  {
    auto x = away_from_zero(rng, {3, 5});
    auto w = random_tensor(rng, {3, 5}, false);
    primitive("relu", [=] { return readout(relu(x), w); }, {x});
  }
  {
    auto a = random_tensor(rng, {2, 3, 4}, true), b = random_tensor(rng, {4, 5}, true);
    auto w = random_tensor(rng, {2, 3, 5}, false);
    primitive("matmul (batched)", [=] { return readout(matmul(a, b), w); }, {a, b});
    auto c = random_tensor(rng, {2, 5, 4}, true);
    auto w2 = random_tensor(rng, {2, 3, 5}, false);
    primitive("transpose", [=] { return readout(matmul(a, transpose(c)), w2); }, {a, c});
  }
  {
    auto x = random_tensor(rng, {3, 4}, true);
    auto w = random_tensor(rng, {3, 4}, false);
    primitive("sum", [=] { return scale(sum(mul(x, x)), 0.5); }, {x});
    primitive("softmax", [=] { return readout(softmax(x, 1), w); }, {x});
    primitive("softmax (axis 0)", [=] { return readout(softmax(x, 0), w); }, {x});
    primitive("log_softmax", [=] { return readout(log_softmax(x, 1), w); }, {x});
  }
  {
    auto x = random_tensor(rng, {2, 4, 3}, true);
    auto w = random_tensor(rng, {2, 3}, false);
    primitive("mean_pool_time", [=] { return readout(mean_pool_time(x), w); }, {x});
    auto y = random_tensor(rng, {2, 4, 2}, true);
    auto wc = random_tensor(rng, {2, 4, 5}, false);
    primitive("concat", [=] { return readout(concat({x, y}, 2), wc); }, {x, y});
    auto ws = random_tensor(rng, {2, 4, 2}, false);
    primitive("slice", [=] { return readout(slice(x, 2, 1, 3), ws); }, {x});
    const std::vector<std::size_t> idx{1, 0, 1};
    auto wi = random_tensor(rng, {3, 4, 3}, false);
    primitive("index_rows", [=] { return readout(index_rows(x, idx), wi); }, {x});
  }
  {
    auto logits = random_tensor(rng, {3, 4}, true);
    const std::vector<int> targets{2, 0, 3};
    primitive("cross_entropy", [=] { return cross_entropy(logits, targets); }, {logits});
  }
  {
    auto x = random_tensor(rng, {2, 3, 5}, true);
    auto g = random_tensor(rng, {5}, true), b = random_tensor(rng, {5}, true);
    auto w = random_tensor(rng, {2, 3, 5}, false);
    primitive("layer_norm", [=] { return readout(layer_norm(x, g, b, 1e-5), w); }, {x, g, b});
    auto z = random_tensor(rng, {3, 4}, true);
    auto wz = random_tensor(rng, {3, 4}, false);
    primitive("l2_normalize", [=] { return readout(l2_normalize(z), wz); }, {z});
  }

  // Layers, eval mode.
  {
    Linear lin(3, 2, rng);
    auto x = random_tensor(rng, {2, 3}, true);
    auto w = random_tensor(rng, {2, 2}, false);
    primitive("layer: Linear", [=] { return readout(lin.forward(x), w); }, {lin.weight, lin.bias, x});
  }
  {
    auto proj = std::make_shared<ProjectionMLP>(5, 6, 4, 0.5, rng, 1);
    auto x = random_tensor(rng, {3, 5}, true);
    auto w = random_tensor(rng, {3, 4}, false);
    primitive("layer: ProjectionMLP",
              [=] { return readout(proj->forward(x, Mode::eval), w); },
              {proj->lin1.weight, proj->lin1.bias, proj->lin2.weight, proj->lin2.bias, x});
  }
  {
    LayerNorm ln(4);
    auto x = random_tensor(rng, {3, 4}, true);
    auto w = random_tensor(rng, {3, 4}, false);
    // Non-trivial gain/bias so their gradients are exercised away from 1/0.
    for (auto& v : ln.gain.mutable_data()) v = rng.uniform(0.5, 1.5);
    for (auto& v : ln.bias.mutable_data()) v = rng.normal();
    primitive("layer: LayerNorm", [=] { return readout(ln.forward(x), w); }, {ln.gain, ln.bias, x});
  }
  {
    auto attn = std::make_shared<CrossAttention>(2, 4, 3, 0.1, rng, 2);
    auto q = random_tensor(rng, {2, 3, 4}, true);
    auto kv = random_tensor(rng, {2, 2, 3}, true);
    auto w = random_tensor(rng, {2, 3, 4}, false);
    ParameterList named;
    attn->collect("attn", named);
    std::vector<Tensor> params{q, kv};
    for (auto& p : named) params.push_back(p.tensor);
    primitive("layer: CrossAttention", [=] { return readout(attn->forward(q, kv, Mode::eval), w); }, params);
  }
  {
    auto e_a = random_tensor(rng, {4, 3}, true), e_v = random_tensor(rng, {4, 3}, true);
    const std::vector<int> labels{0, 1, 0, 2};
    const MatchLabels match(labels);
    AlignmentConfig cfg;
    cfg.temperature = 2.0;
    primitive("loss: alignment (L_a)",
              [=] {
                auto sims = similarity_matrices(e_a, e_v, cfg);
                return alignment_loss(sims.a2v, sims.v2a, match, cfg);
              },
              {e_a, e_v});
  }

  // Composite objectives on the toy model.
  const FoalNetConfig cfg = gradcheck_model_config();
  const Batch batch = gradcheck_batch();
  {
    auto model = std::make_shared<FoalNet>(cfg);
    model->set_mode(Mode::eval);
    std::vector<Tensor> params;
    for (auto& p : model->parameters()) params.push_back(p.tensor);
    out.push_back({"loss: matching (L_m)",
                   grad_check(
                       [=] {
                         auto [e_a, e_v] = model->project(batch.audio, batch.video);
                         auto sims = similarity_matrices(e_a, e_v, cfg.align);
                         const MatchLabels match(batch.labels);
                         auto hn = mine_hard_negatives(sims.a2v, sims.v2a, match);
                         return mem_forward_loss(*model, batch.audio, batch.video, hn, Mode::eval);
                       },
                       params),
                   kCompositeTolerance});
    out.push_back({"loss: total (L_ce + L_a + lambda L_m)",
                   grad_check([=] { return model->total_loss(batch).total; }, params), kCompositeTolerance});
  }
  return out;
}

}  // namespace foal
