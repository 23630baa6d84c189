#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <string>
#include <utility>
#include <vector>

#include "mona/adapter.hpp"
#include "mona/error.hpp"
#include "mona/policy.hpp"
#include "mona/rng.hpp"
#include "mona/tensor.hpp"

namespace mona {

struct GradCheckGroup {
  std::string name;
  double max_rel_err = 0.0;
};

struct GradCheckReport {
  std::vector<GradCheckGroup> groups;

  double worst() const {
    double w = 0.0;
    for (const GradCheckGroup& g : groups) w = std::max(w, g.max_rel_err);
    return w;
  }

  bool passed(double tol) const { return worst() < tol; }
};

namespace detail {

// Central differences for one named parameter against tape gradients.
// Differences below the absolute floor count as zero error.
inline double fd_group_error(Tensor param, const std::function<Tensor()>& loss_fn,
                             double step, double abs_floor) {
  param.zero_grad();
  {
    Tape tape;
    Tape::Scope scope(tape);
    tape.backward(loss_fn());
  }
  std::vector<double> analytic =
      param.has_grad() ? param.grad() : std::vector<double>(param.numel(), 0.0);
  param.zero_grad();
  double worst = 0.0;
  for (std::size_t i = 0; i < param.numel(); ++i) {
    const double saved = param.data()[i];
    param.data()[i] = saved + step;
    const double lp = loss_fn().value();
    param.data()[i] = saved - step;
    const double lm = loss_fn().value();
    param.data()[i] = saved;
    const double fd = (lp - lm) / (2.0 * step);
    const double diff = std::abs(analytic[i] - fd);
    if (diff > abs_floor) {
      worst = std::max(worst, diff / std::max(std::abs(analytic[i]), std::abs(fd)));
    }
  }
  return worst;
}

}  // namespace detail

// Finite-difference verification of every adapter-family parameter group on a
// small standalone geometry: a Mona module on a grid x grid token map, a
// sequential bottleneck adapter, a low-rank attention delta and a parallel
// scaled adapter.
inline GradCheckReport gradcheck_adapters(std::size_t m, std::size_t n,
                                          std::size_t grid, std::uint64_t seed,
                                          double step = 1e-4) {
  Rng rng(seed);
  MonaModule mona_mod(MonaConfig(m, n), rng);
  for (double& v : mona_mod.pw.kernel.data()) v = rng.uniform(-0.5, 0.5);
  for (double& v : mona_mod.up.weight.data()) v = rng.uniform(-0.5, 0.5);
  for (double& v : mona_mod.up.bias.data()) v = rng.uniform(-0.2, 0.2);
  VanillaAdapterAttachment vanilla(m, n, rng);
  for (double& v : vanilla.up.weight.data()) v = rng.uniform(-0.5, 0.5);
  LinearLayer lora_base(m, m);
  lora_base.init_kaiming(rng);
  LoraAttachment lora(m, m, 2, 1.0, "wq", rng);
  for (double& v : lora.B.data()) v = rng.uniform(-0.5, 0.5);
  AdaptFormerAttachment adaptformer(m, n, 0.25, rng);
  for (double& v : adaptformer.up.weight.data()) v = rng.uniform(-0.5, 0.5);

  const std::size_t T = grid * grid;
  Tensor x = Tensor::zeros({1, T, m});
  for (double& v : x.data()) v = rng.uniform(-2.0, 2.0);
  Tensor probe = Tensor::zeros({1, T, m});
  for (double& v : probe.data()) v = rng.uniform(-1.0, 1.0);
  Tensor mlp_out = Tensor::zeros({1, T, m});
  for (double& v : mlp_out.data()) v = rng.uniform(-1.0, 1.0);

  struct Entry {
    std::string name;
    Tensor param;
    std::function<Tensor()> loss;
  };
  auto mona_loss = [&]() { return mean_all(mul(mona_mod.forward(x, grid, grid), probe)); };
  auto vanilla_loss = [&]() { return mean_all(mul(vanilla.forward(x), probe)); };
  auto lora_loss = [&]() { return mean_all(mul(lora.forward(lora_base, x), probe)); };
  auto adaptformer_loss = [&]() {
    return mean_all(mul(adaptformer.forward(mlp_out, x), probe));
  };

  std::vector<Entry> entries;
  for (auto& [name, t] : mona_mod.named_params("mona.")) {
    entries.push_back({name, t, mona_loss});
  }
  entries.push_back({"adapter.down.weight", vanilla.down.weight, vanilla_loss});
  entries.push_back({"adapter.down.bias", vanilla.down.bias, vanilla_loss});
  entries.push_back({"adapter.up.weight", vanilla.up.weight, vanilla_loss});
  entries.push_back({"adapter.up.bias", vanilla.up.bias, vanilla_loss});
  entries.push_back({"lora.A", lora.A, lora_loss});
  entries.push_back({"lora.B", lora.B, lora_loss});
  entries.push_back({"adaptformer.down.weight", adaptformer.down.weight, adaptformer_loss});
  entries.push_back({"adaptformer.down.bias", adaptformer.down.bias, adaptformer_loss});
  entries.push_back({"adaptformer.up.weight", adaptformer.up.weight, adaptformer_loss});
  entries.push_back({"adaptformer.up.bias", adaptformer.up.bias, adaptformer_loss});

  std::size_t total = 0;
  for (const Entry& e : entries) total += e.param.numel();
  if (total > 10000) {
    throw ConfigError("gradcheck geometry too large: " + std::to_string(total) +
                      " parameters exceed the 10000 cap");
  }

  for (Entry& e : entries) e.param.set_requires_grad(true);

  GradCheckReport report;
  for (Entry& e : entries) {
    report.groups.push_back(
        {e.name, detail::fd_group_error(e.param, e.loss, step, 1e-8)});
  }
  return report;
}

}  // namespace mona
