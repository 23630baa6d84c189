#include "mona/train.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <map>

#include "test_util.hpp"

using namespace mona;
using testutil::finite_diff_check;
using testutil::rand_tensor;

namespace {

BackboneConfig micro_config(std::size_t num_classes = 2) {
  BackboneConfig cfg;
  cfg.image_size = 8;
  cfg.patch_size = 2;
  cfg.in_channels = 1;
  cfg.stage_widths = {8};
  cfg.stage_depths = {2};
  cfg.stage_heads = {2};
  cfg.window = 4;
  cfg.mlp_ratio = 2;
  cfg.num_classes = num_classes;
  return cfg;
}

// Small attachment dims keep the micro experiments quick.
PolicyHyperparams micro_hyper() {
  PolicyHyperparams hp;
  hp.adapter_dim = 8;
  hp.mona_dim = 8;
  hp.lora_rank = 2;
  return hp;
}

LabeledImageSet sanity_train() {
  SyntheticTaskSpec spec = pretrain_task(101, 32, 8);
  spec.noise_sigma = 0.02;
  return gen_synthetic(spec);
}

std::map<std::string, std::vector<double>> snapshot(const BackboneModel& m) {
  std::map<std::string, std::vector<double>> s;
  for (const NamedParam& p : m.named_params()) s[p.name] = p.tensor.data();
  return s;
}

}  // namespace

TEST(CrossEntropy, ManualTwoClassValue) {
  Tensor logits = Tensor::from_data({1, 2}, {1.0, -1.0});
  const double loss = cross_entropy_mean(logits, {0}).value();
  // -log(e^1 / (e^1 + e^-1)) = log(1 + e^-2)
  EXPECT_NEAR(loss, std::log(1.0 + std::exp(-2.0)), 1e-12);
}

TEST(CrossEntropy, GradientMatchesFiniteDifferences) {
  Rng rng(3);
  Tensor logits = rand_tensor({4, 3}, rng).set_requires_grad(true);
  const std::vector<int> labels = {0, 2, 1, 2};
  auto loss = [&]() { return cross_entropy_mean(logits, labels); };
  auto r = finite_diff_check({logits}, loss);
  EXPECT_LT(r.max_err, 1e-5);
}

TEST(CrossEntropy, BadLabelRejected) {
  Tensor logits = Tensor::zeros({2, 3});
  EXPECT_THROW(cross_entropy_mean(logits, {0, 3}), ContractError);
  EXPECT_THROW(cross_entropy_mean(logits, {0}), DimensionError);
}

TEST(AdamW, HandComputedFirstStep) {
  Tensor p = Tensor::scalar(1.0).set_requires_grad(true);
  detail::grad_buf(*p.impl())[0] = 1.0;
  OptimConfig cfg;
  AdamW opt({p}, cfg);
  opt.step(0.1);
  // m-hat = v-hat = 1 after bias correction, so the step is lr/(1 + eps).
  EXPECT_NEAR(p.value(), 1.0 - 0.1, 1e-8);
}

TEST(AdamW, ZeroGradNoDecayLeavesParamsUnchanged) {
  Tensor p = Tensor::scalar(2.5).set_requires_grad(true);
  detail::grad_buf(*p.impl())[0] = 0.0;
  OptimConfig cfg;
  AdamW opt({p}, cfg);
  opt.step(0.1);
  opt.step(0.1);
  EXPECT_DOUBLE_EQ(p.value(), 2.5);
}

TEST(AdamW, DecoupledDecayShrinksParam) {
  Tensor p = Tensor::scalar(2.0).set_requires_grad(true);
  detail::grad_buf(*p.impl())[0] = 0.0;
  OptimConfig cfg;
  cfg.weight_decay = 0.1;
  AdamW opt({p}, cfg);
  opt.step(0.5);
  EXPECT_NEAR(p.value(), 2.0 - 0.5 * 0.1 * 2.0, 1e-15);
}

TEST(AdamW, MissingGradIsContractError) {
  Tensor p = Tensor::scalar(1.0).set_requires_grad(true);
  AdamW opt({p}, OptimConfig{});
  EXPECT_THROW(opt.step(0.1), ContractError);
}

TEST(Evaluate, OneHotLogitsScorePerfect) {
  Tensor logits = Tensor::zeros({3, 6});
  const std::vector<int> labels = {2, 0, 5};
  for (std::size_t r = 0; r < 3; ++r) {
    logits.at({r, static_cast<std::size_t>(labels[r])}) = 1.0;
  }
  EvalResult res = evaluate_logits(logits, labels, 6);
  EXPECT_DOUBLE_EQ(res.top1, 100.0);
  ASSERT_TRUE(res.top5.has_value());
  EXPECT_DOUBLE_EQ(*res.top5, 100.0);
}

TEST(Evaluate, UniformLogitsBalancedSetHitChance) {
  const std::size_t K = 4;
  Tensor logits = Tensor::zeros({K, K});
  std::vector<int> labels;
  for (std::size_t c = 0; c < K; ++c) labels.push_back(static_cast<int>(c));
  EvalResult res = evaluate_logits(logits, labels, K);
  EXPECT_DOUBLE_EQ(res.top1, 100.0 / K);
  EXPECT_FALSE(res.top5.has_value());  // fewer than 5 classes
}

TEST(Evaluate, HandBuiltRanksGiveExactFractions) {
  // Ranks of the true label per row: 0, 2, 5, 1 -> top1 = 1/4, top5 = 3/4.
  Tensor logits = Tensor::from_data({4, 6}, {
      9, 1, 1, 1, 1, 1,   // label 0 -> rank 0
      5, 4, 3, 9, 8, 1,   // label 1 -> rank 2
      2, 3, 4, 5, 6, 1,   // label 5 -> rank 5
      7, 9, 1, 8, 1, 1,   // label 3 -> rank 1  (8 < 9, above 7)
  });
  EvalResult res = evaluate_logits(logits, {0, 1, 5, 3}, 6);
  EXPECT_DOUBLE_EQ(res.top1, 25.0);
  ASSERT_TRUE(res.top5.has_value());
  EXPECT_DOUBLE_EQ(*res.top5, 75.0);
}

TEST(Evaluate, EmptyDatasetRejected) {
  BackboneModel m = build_backbone(micro_config(), 1);
  LabeledImageSet empty;
  empty.images = Tensor::zeros({1, 1, 8, 8});
  EXPECT_THROW(evaluate(m, empty), ContractError);
}

TEST(Pretrain, LossDecreasesOnSeparableTask) {
  BackboneModel m = build_backbone(micro_config(), 11);
  OptimConfig opt;
  opt.epochs = 2;
  opt.batch_size = 16;
  RunReport report = pretrain(m, sanity_train(), nullptr, opt, 1);
  ASSERT_EQ(report.epochs.size(), 2u);
  EXPECT_LT(report.epochs[1].train_loss, report.epochs[0].train_loss);
}

TEST(Pretrain, ZeroLearningRateChangesNothing) {
  BackboneModel m = build_backbone(micro_config(), 12);
  auto before = snapshot(m);
  OptimConfig opt;
  opt.lr = 0.0;
  opt.epochs = 1;
  pretrain(m, sanity_train(), nullptr, opt, 1);
  for (const NamedParam& p : m.named_params()) {
    EXPECT_EQ(p.tensor.data(), before.at(p.name)) << p.name;
  }
}

TEST(Pretrain, DeterministicCheckpointAcrossRuns) {
  OptimConfig opt;
  opt.epochs = 2;
  opt.batch_size = 16;
  LabeledImageSet train = sanity_train();
  BackboneModel a = build_backbone(micro_config(), 13);
  BackboneModel b = build_backbone(micro_config(), 13);
  RunReport ra = pretrain(a, train, nullptr, opt, 5);
  RunReport rb = pretrain(b, train, nullptr, opt, 5);
  auto pa = a.named_params();
  auto pb = b.named_params();
  for (std::size_t i = 0; i < pa.size(); ++i) {
    EXPECT_EQ(pa[i].tensor.data(), pb[i].tensor.data()) << pa[i].name;
  }
  ASSERT_EQ(ra.loss_history.size(), rb.loss_history.size());
  for (std::size_t i = 0; i < ra.loss_history.size(); ++i) {
    EXPECT_EQ(ra.loss_history[i].loss, rb.loss_history[i].loss);
  }
}

TEST(Pretrain, NanLossAbortsWithDiagnostics) {
  BackboneModel m = build_backbone(micro_config(), 14);
  fill_constant(m.head.weight, 1e308);
  OptimConfig opt;
  opt.epochs = 1;
  try {
    pretrain(m, sanity_train(), nullptr, opt, 1);
    FAIL() << "expected abort";
  } catch (const TrainingError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("epoch"), std::string::npos);
    EXPECT_NE(msg.find("lr"), std::string::npos);
  } catch (const ContractError&) {
    // Debug builds fail fast inside the offending op instead.
  }
}

TEST(Finetune, FreezeContractHoldsForEveryPolicy) {
  LabeledImageSet train = sanity_train();
  BackboneModel pre = build_backbone(micro_config(), 21);
  OptimConfig popt;
  popt.epochs = 1;
  popt.batch_size = 16;
  pretrain(pre, train, nullptr, popt, 2);
  CheckpointData ckpt = make_checkpoint(pre);

  for (const std::string& name : policy_names()) {
    TuningPolicy policy = build_policy(name, micro_hyper());
    BackboneModel m = build_backbone(micro_config(), 22);
    OptimConfig fopt;
    fopt.epochs = 2;
    fopt.batch_size = 16;
    finetune(m, ckpt, policy, train, nullptr, fopt, 3);

    const PolicyContext ctx = m.policy_context();
    for (const NamedParam& p : m.named_params()) {
      if (p.group != ParamGroup::backbone) continue;
      const Tensor* orig = ckpt.find(p.name);
      ASSERT_NE(orig, nullptr) << p.name;
      if (!policy.backbone_trainable(p.name, ctx)) {
        EXPECT_EQ(p.tensor.data(), orig->data()) << name << ": " << p.name;
      } else {
        EXPECT_NE(p.tensor.data(), orig->data()) << name << ": " << p.name;
      }
    }
  }
}

TEST(Finetune, GradientIsolationOnFrozenParams) {
  LabeledImageSet train = sanity_train();
  BackboneModel m = build_backbone(micro_config(), 23);
  TuningPolicy policy = build_policy("mona", micro_hyper());
  apply_policy(m, policy, 24);

  Tape tape;
  {
    Tape::Scope scope(tape);
    Shape shape = train.images.shape();
    shape[0] = 4;
    std::vector<double> chunk(train.images.data().begin(),
                              train.images.data().begin() + 4 * 64);
    Tensor loss = cross_entropy_mean(
        m.forward(Tensor::from_data(shape, chunk)),
        {train.labels[0], train.labels[1], train.labels[2], train.labels[3]});
    tape.backward(loss);
  }
  const PolicyContext ctx = m.policy_context();
  for (const NamedParam& p : m.named_params()) {
    const bool frozen = p.group == ParamGroup::backbone &&
                        !policy.backbone_trainable(p.name, ctx);
    if (frozen) {
      EXPECT_FALSE(p.tensor.has_grad()) << p.name;
    } else {
      EXPECT_TRUE(p.tensor.has_grad()) << p.name;
    }
  }
}

TEST(Finetune, ZeroEpochsEqualsRawCheckpointEvaluation) {
  LabeledImageSet train = sanity_train();
  SyntheticTaskSpec espec = pretrain_task(101, 8, 8);
  espec.split = "eval";
  LabeledImageSet eval_set = gen_synthetic(espec);

  BackboneModel pre = build_backbone(micro_config(), 31);
  OptimConfig popt;
  popt.epochs = 1;
  popt.batch_size = 16;
  pretrain(pre, train, nullptr, popt, 4);
  CheckpointData ckpt = make_checkpoint(pre);

  BackboneModel m = build_backbone(micro_config(), 32);
  OptimConfig fopt;
  fopt.epochs = 0;
  RunReport report = finetune(m, ckpt, build_policy("full"), train, &eval_set, fopt, 5);
  EXPECT_TRUE(report.epochs.empty());
  // The head is reinitialized on finetune, so compare against the checkpoint
  // backbone with the same fresh head rather than the pretrained model.
  EvalResult direct = evaluate(m, eval_set);
  BackboneModel reload = build_backbone(micro_config(), 32);
  apply_policy(reload, build_policy("full"), 5);
  load_checkpoint_into(reload, ckpt, true);
  EvalResult expected = evaluate(reload, eval_set);
  EXPECT_DOUBLE_EQ(direct.top1, expected.top1);
}

TEST(Finetune, DeterministicRunReport) {
  LabeledImageSet train = sanity_train();
  BackboneModel pre = build_backbone(micro_config(), 41);
  OptimConfig popt;
  popt.epochs = 1;
  popt.batch_size = 16;
  pretrain(pre, train, nullptr, popt, 6);
  CheckpointData ckpt = make_checkpoint(pre);

  auto run = [&]() {
    BackboneModel m = build_backbone(micro_config(), 42);
    OptimConfig fopt;
    fopt.epochs = 2;
    fopt.batch_size = 16;
    return finetune(m, ckpt, build_policy("mona", micro_hyper()), train, &train, fopt, 7);
  };
  RunReport a = run();
  RunReport b = run();
  nlohmann::json ja = report_to_json(a);
  nlohmann::json jb = report_to_json(b);
  ja.erase("wall_time_seconds");
  jb.erase("wall_time_seconds");
  EXPECT_EQ(ja.dump(), jb.dump());
}

TEST(Training, FiveEpochMovingAverageDescendsForEveryPolicy) {
  LabeledImageSet train = sanity_train();
  BackboneModel pre = build_backbone(micro_config(), 51);
  OptimConfig popt;
  popt.epochs = 2;
  popt.batch_size = 16;
  pretrain(pre, train, nullptr, popt, 8);
  CheckpointData ckpt = make_checkpoint(pre);

  for (const std::string& name : policy_names()) {
    BackboneModel m = build_backbone(micro_config(), 52);
    OptimConfig fopt;
    fopt.epochs = 10;
    fopt.batch_size = 16;
    RunReport report =
        finetune(m, ckpt, build_policy(name, micro_hyper()), train, nullptr, fopt, 9);
    std::vector<double> ma;
    for (std::size_t i = 0; i + 5 <= report.epochs.size(); ++i) {
      double s = 0.0;
      for (std::size_t j = i; j < i + 5; ++j) s += report.epochs[j].train_loss;
      ma.push_back(s / 5.0);
    }
    for (std::size_t i = 0; i + 1 < ma.size(); ++i) {
      EXPECT_LE(ma[i + 1], ma[i] + 1e-12) << name << " at window " << i;
    }
  }
}

TEST(Artifacts, LossCsvAndReportJson) {
  LabeledImageSet train = sanity_train();
  BackboneModel m = build_backbone(micro_config(), 61);
  OptimConfig opt;
  opt.epochs = 2;
  opt.batch_size = 32;
  RunReport report = pretrain(m, train, &train, opt, 10);

  const auto dir = std::filesystem::temp_directory_path() / "mona_train_artifacts";
  std::filesystem::create_directories(dir);
  write_loss_csv(dir / "loss.csv", report);
  write_report_json(dir / "report.json", report);

  std::ifstream csv(dir / "loss.csv");
  std::string line;
  std::getline(csv, line);
  EXPECT_EQ(line, "epoch,step,loss");
  std::size_t rows = 0;
  while (std::getline(csv, line)) {
    if (!line.empty()) ++rows;
  }
  EXPECT_EQ(rows, report.loss_history.size());

  std::ifstream jf(dir / "report.json");
  nlohmann::json j;
  jf >> j;
  EXPECT_EQ(j["policy"], "full");
  EXPECT_EQ(j["epochs"].size(), 2u);
  EXPECT_TRUE(j.contains("trainable_percent"));
  std::filesystem::remove_all(dir);
}
