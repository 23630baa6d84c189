#pragma once

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mona/backbone.hpp"
#include "mona/data.hpp"
#include "mona/error.hpp"
#include "mona/policy.hpp"
#include "mona/rng.hpp"
#include "mona/tensor.hpp"

namespace mona {

// ---------------------------------------------------------------------------
// Cross-entropy loss
// ---------------------------------------------------------------------------

// Mean negative log-likelihood over the batch, computed via a stable
// log-sum-exp. Backward is the usual (softmax - onehot) / B.
inline Tensor cross_entropy_mean(const Tensor& logits, const std::vector<int>& labels) {
  if (logits.rank() != 2) {
    throw DimensionError("cross_entropy: logits must be [B, K], got " +
                         format_shape(logits.shape()));
  }
  const std::size_t B = logits.dim(0), K = logits.dim(1);
  if (labels.size() != B) {
    throw DimensionError("cross_entropy: batch " + std::to_string(B) + " vs " +
                         std::to_string(labels.size()) + " labels");
  }
  for (int l : labels) {
    if (l < 0 || static_cast<std::size_t>(l) >= K) {
      throw ContractError("cross_entropy: label " + std::to_string(l) +
                          " outside [0, " + std::to_string(K) + ")");
    }
  }
  std::vector<double> softmax(B * K);
  double acc = 0.0;
  const double* z = logits.data().data();
  for (std::size_t r = 0; r < B; ++r) {
    const double* row = z + r * K;
    double mx = row[0];
    for (std::size_t k = 1; k < K; ++k) mx = std::max(mx, row[k]);
    double sum = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
      softmax[r * K + k] = std::exp(row[k] - mx);
      sum += softmax[r * K + k];
    }
    for (std::size_t k = 0; k < K; ++k) softmax[r * K + k] /= sum;
    acc += (mx + std::log(sum)) - row[static_cast<std::size_t>(labels[r])];
  }
  Tensor loss = Tensor::scalar(acc / static_cast<double>(B));

  if (detail::recording({&logits})) {
    loss.set_requires_grad(true);
    auto li = logits.impl();
    auto oi = loss.impl();
    Tape::current()->record([li, oi, B, K, labels, softmax = std::move(softmax)]() {
      if (oi->grad.empty() || !li->requires_grad) return;
      const double g = oi->grad[0] / static_cast<double>(B);
      auto& gl = detail::grad_buf(*li);
      for (std::size_t r = 0; r < B; ++r) {
        for (std::size_t k = 0; k < K; ++k) {
          const double onehot = (static_cast<std::size_t>(labels[r]) == k) ? 1.0 : 0.0;
          gl[r * K + k] += g * (softmax[r * K + k] - onehot);
        }
      }
    });
  }
  return loss;
}

// ---------------------------------------------------------------------------
// AdamW
// ---------------------------------------------------------------------------

struct OptimConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  double weight_decay = 0.0;
  std::size_t batch_size = 32;
  std::size_t epochs = 10;
  bool cosine_decay = true;
};

// Decoupled-weight-decay Adam. Moment state exists only for the trainable
// parameters handed to the constructor; frozen tensors never enter.
class AdamW {
 public:
  AdamW(std::vector<Tensor> params, OptimConfig cfg)
      : params_(std::move(params)), cfg_(cfg) {
    states_.resize(params_.size());
    for (std::size_t i = 0; i < params_.size(); ++i) {
      states_[i].m.assign(params_[i].numel(), 0.0);
      states_[i].v.assign(params_[i].numel(), 0.0);
    }
  }

  std::size_t step_count() const { return step_; }

  void step(double lr) {
    ++step_;
    const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(step_));
    const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(step_));
    for (std::size_t i = 0; i < params_.size(); ++i) {
      Tensor& p = params_[i];
      if (!p.has_grad()) {
        throw ContractError("adamw: trainable parameter " + std::to_string(i) +
                            " has no gradient");
      }
      const std::vector<double>& g = p.grad();
      auto& m = states_[i].m;
      auto& v = states_[i].v;
      double* w = p.data().data();
      for (std::size_t j = 0; j < m.size(); ++j) {
        m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * g[j];
        v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * g[j] * g[j];
        const double mhat = m[j] / bc1;
        const double vhat = v[j] / bc2;
        w[j] -= lr * (mhat / (std::sqrt(vhat) + cfg_.eps) + cfg_.weight_decay * w[j]);
      }
    }
  }

  void zero_grad() {
    for (Tensor& p : params_) p.zero_grad();
  }

 private:
  struct State {
    std::vector<double> m, v;
  };
  std::vector<Tensor> params_;
  std::vector<State> states_;
  OptimConfig cfg_;
  std::size_t step_ = 0;
};

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

struct EvalResult {
  double top1 = 0.0;                 // percent
  std::optional<double> top5;        // percent, only when class_count >= 5
};

// Rank of the true class under the tie-break rule: equal logits order by
// ascending class index, so uniform logits predict class 0.
inline std::size_t label_rank(const double* row, std::size_t num_classes, std::size_t y) {
  std::size_t rank = 0;
  for (std::size_t k = 0; k < num_classes; ++k) {
    if (row[k] > row[y] || (row[k] == row[y] && k < y)) ++rank;
  }
  return rank;
}

inline EvalResult evaluate_logits(const Tensor& logits, const std::vector<int>& labels,
                                  std::size_t class_count) {
  if (labels.empty()) throw ContractError("evaluate: empty dataset");
  const std::size_t N = labels.size();
  const std::size_t K = logits.dim(logits.rank() - 1);
  std::size_t hit1 = 0, hit5 = 0;
  for (std::size_t r = 0; r < N; ++r) {
    const double* row = logits.data().data() + r * K;
    const std::size_t rank = label_rank(row, K, static_cast<std::size_t>(labels[r]));
    if (rank < 1) ++hit1;
    if (rank < 5) ++hit5;
  }
  EvalResult res;
  res.top1 = 100.0 * static_cast<double>(hit1) / static_cast<double>(N);
  if (class_count >= 5) {
    res.top5 = 100.0 * static_cast<double>(hit5) / static_cast<double>(N);
  }
  return res;
}

inline EvalResult evaluate(const BackboneModel& model, const LabeledImageSet& data,
                           std::size_t batch_size = 32) {
  if (data.size() == 0) throw ContractError("evaluate: empty dataset");
  const std::size_t N = data.size();
  const std::size_t px = data.images.numel() / N;
  Tensor all_logits = Tensor::zeros({N, model.cfg.num_classes});
  for (std::size_t start = 0; start < N; start += batch_size) {
    const std::size_t b = std::min(batch_size, N - start);
    Shape shape = data.images.shape();
    shape[0] = b;
    std::vector<double> chunk(data.images.data().begin() + start * px,
                              data.images.data().begin() + (start + b) * px);
    Tensor logits = model.forward(Tensor::from_data(shape, std::move(chunk)));
    std::copy(logits.data().begin(), logits.data().end(),
              all_logits.data().begin() + start * model.cfg.num_classes);
  }
  return evaluate_logits(all_logits, data.labels, data.class_count);
}

// ---------------------------------------------------------------------------
// Training loop
// ---------------------------------------------------------------------------

struct LossPoint {
  std::size_t epoch = 0;
  std::size_t step = 0;  // step within the epoch
  double loss = 0.0;
};

struct EpochMetrics {
  double train_loss = 0.0;
  double top1 = 0.0;
  std::optional<double> top5;
};

struct RunReport {
  std::string policy;
  std::uint64_t seed = 0;
  std::vector<EpochMetrics> epochs;
  std::vector<LossPoint> loss_history;
  TrainableStats stats;
  double wall_time_seconds = 0.0;
};

inline double cosine_lr(const OptimConfig& cfg, std::size_t step, std::size_t total) {
  if (!cfg.cosine_decay || total == 0) return cfg.lr;
  const double t = static_cast<double>(step) / static_cast<double>(total);
  return cfg.lr * 0.5 * (1.0 + std::cos(M_PI * t));
}

// Runs the optimizer over the policy-trainable parameters of an
// already-configured model. Sample order is a pure function of the seed.
inline RunReport train_model(BackboneModel& model, const TuningPolicy& policy,
                             const LabeledImageSet& train, const LabeledImageSet* eval_set,
                             const OptimConfig& opt, std::uint64_t seed) {
  const auto t0 = std::chrono::steady_clock::now();
  if (train.size() == 0) throw ContractError("train: empty dataset");

  std::vector<Tensor> trainable;
  for (const NamedParam& p : model.named_params()) {
    if (p.tensor.requires_grad()) trainable.push_back(p.tensor);
  }
  AdamW optimizer(trainable, opt);

  RunReport report;
  report.policy = policy.name;
  report.seed = seed;
  report.stats = trainable_stats(model, policy);

  const std::size_t N = train.size();
  const std::size_t px = train.images.numel() / N;
  Shape batch_shape = train.images.shape();
  const std::size_t steps_per_epoch = (N + opt.batch_size - 1) / opt.batch_size;
  const std::size_t total_steps = steps_per_epoch * opt.epochs;

  std::vector<std::size_t> order(N);
  std::iota(order.begin(), order.end(), 0);

  std::size_t global_step = 0;
  for (std::size_t epoch = 0; epoch < opt.epochs; ++epoch) {
    Rng shuffle_rng(splitmix64_at(seed ^ 0x9E3779B97F4A7C15ULL, epoch));
    shuffle_rng.shuffle(order);
    double epoch_loss = 0.0;
    std::size_t step = 0;
    for (std::size_t start = 0; start < N; start += opt.batch_size, ++step) {
      const std::size_t b = std::min(opt.batch_size, N - start);
      batch_shape[0] = b;
      std::vector<double> chunk(b * px);
      std::vector<int> labels(b);
      for (std::size_t r = 0; r < b; ++r) {
        const std::size_t src = order[start + r];
        std::copy_n(train.images.data().begin() + src * px, px,
                    chunk.begin() + r * px);
        labels[r] = train.labels[src];
      }
      Tensor batch = Tensor::from_data(batch_shape, std::move(chunk));

      optimizer.zero_grad();
      Tape tape;
      double loss_value = 0.0;
      {
        Tape::Scope scope(tape);
        Tensor loss = cross_entropy_mean(model.forward(batch), labels);
        loss_value = loss.value();
        if (!std::isfinite(loss_value)) {
          throw TrainingError("non-finite loss at epoch " + std::to_string(epoch) +
                              " step " + std::to_string(step) + " (lr=" +
                              std::to_string(cosine_lr(opt, global_step, total_steps)) +
                              ")");
        }
        tape.backward(loss);
      }
      optimizer.step(cosine_lr(opt, global_step, total_steps));
      ++global_step;
      epoch_loss += loss_value;
      report.loss_history.push_back({epoch, step, loss_value});
    }
    EpochMetrics metrics;
    metrics.train_loss = epoch_loss / static_cast<double>(steps_per_epoch);
    if (eval_set != nullptr) {
      const EvalResult ev = evaluate(model, *eval_set, opt.batch_size);
      metrics.top1 = ev.top1;
      metrics.top5 = ev.top5;
    }
    report.epochs.push_back(metrics);
  }
  report.wall_time_seconds =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return report;
}

// Full-update training of a fresh model.
inline RunReport pretrain(BackboneModel& model, const LabeledImageSet& train,
                          const LabeledImageSet* eval_set, const OptimConfig& opt,
                          std::uint64_t seed) {
  TuningPolicy policy = build_policy("full");
  apply_policy(model, policy, seed);
  return train_model(model, policy, train, eval_set, opt, seed);
}

// Policy-constrained training from a checkpoint: backbone weights restored,
// attachments and head initialized fresh, frozen tensors never updated.
inline RunReport finetune(BackboneModel& model, const CheckpointData& ckpt,
                          const TuningPolicy& policy, const LabeledImageSet& train,
                          const LabeledImageSet* eval_set, const OptimConfig& opt,
                          std::uint64_t seed) {
  apply_policy(model, policy, seed);
  load_checkpoint_into(model, ckpt, /*backbone_only=*/true);
  return train_model(model, policy, train, eval_set, opt, seed);
}

// ---------------------------------------------------------------------------
// Report artifacts
// ---------------------------------------------------------------------------

inline nlohmann::json report_to_json(const RunReport& report) {
  nlohmann::json j;
  j["policy"] = report.policy;
  j["seed"] = report.seed;
  j["trainable_backbone_params"] = report.stats.trainable_backbone;
  j["total_backbone_params"] = report.stats.total_backbone;
  j["trainable_percent"] =
      format_percent(report.stats.trainable_backbone, report.stats.total_backbone);
  j["epochs"] = nlohmann::json::array();
  for (const EpochMetrics& m : report.epochs) {
    nlohmann::json e;
    e["train_loss"] = m.train_loss;
    e["top1"] = m.top1;
    if (m.top5) e["top5"] = *m.top5;
    j["epochs"].push_back(e);
  }
  j["wall_time_seconds"] = report.wall_time_seconds;
  return j;
}

inline void write_report_json(const std::filesystem::path& path, const RunReport& report) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path.string());
  f << report_to_json(report).dump(2) << "\n";
}

inline void write_loss_csv(const std::filesystem::path& path, const RunReport& report) {
  std::ofstream f(path);
  if (!f) throw IoError("cannot write " + path.string());
  f.precision(17);
  f << "epoch,step,loss\n";
  for (const LossPoint& p : report.loss_history) {
    f << p.epoch << "," << p.step << "," << p.loss << "\n";
  }
}

}  // namespace mona
