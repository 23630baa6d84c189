// Command-line harness: data generation, pretraining, policy-constrained
// fine-tuning, evaluation, parameter accounting and gradient verification.

#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "mona/backbone.hpp"
#include "mona/config.hpp"
#include "mona/data.hpp"
#include "mona/gradcheck.hpp"
#include "mona/policy.hpp"
#include "mona/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string classify_error(const std::exception& e) {
  if (dynamic_cast<const mona::DimensionError*>(&e)) return "dimension";
  if (dynamic_cast<const mona::GeometryError*>(&e)) return "geometry";
  if (dynamic_cast<const mona::ConfigError*>(&e)) return "config";
  if (dynamic_cast<const mona::StateError*>(&e)) return "state";
  if (dynamic_cast<const mona::ContractError*>(&e)) return "contract";
  if (dynamic_cast<const mona::IoError*>(&e)) return "io";
  if (dynamic_cast<const mona::TrainingError*>(&e)) return "training";
  return "internal";
}

template <typename F>
int guarded(F&& fn) {
  try {
    return fn();
  } catch (const std::exception& e) {
    json err;
    err["error"] = classify_error(e);
    err["message"] = e.what();
    std::cerr << err.dump() << std::endl;
    return 1;
  }
}

// Flag values plus presence markers; flags win over the config file.
struct CliOverrides {
  std::string config_path;
  std::string out_dir = "runs/out";
  std::string checkpoint;
  std::uint64_t seed = 0;
  std::string policy;
  std::size_t n_dim = 0;
  std::string backbone_size;
  std::size_t epochs = 0;
  double lr = 0.0;
  std::size_t batch_size = 0;
  std::string task;
  std::size_t samples_per_class = 0;
  std::size_t eval_samples_per_class = 0;

  CLI::App* cmd = nullptr;

  mona::RunConfig resolve() const {
    mona::RunConfig cfg = mona::default_run_config();
    if (!config_path.empty()) {
      mona::apply_config_table(cfg, mona::TomlTable::parse_file(config_path));
    }
    if (cmd->count("--backbone-size")) mona::apply_backbone_size(cfg, backbone_size);
    if (cmd->count("--seed")) cfg.seed = seed;
    if (cmd->count("--policy")) cfg.policy_name = policy;
    if (cmd->count("--n-dim")) cfg.hyper.mona_dim = n_dim;
    if (cmd->count("--epochs")) cfg.optim.epochs = epochs;
    if (cmd->count("--lr")) cfg.optim.lr = lr;
    if (cmd->count("--batch-size")) cfg.optim.batch_size = batch_size;
    if (cmd->count("--task")) cfg.task = task;
    if (cmd->count("--samples-per-class")) cfg.samples_per_class = samples_per_class;
    if (cmd->count("--eval-samples-per-class")) {
      cfg.eval_samples_per_class = eval_samples_per_class;
    }
    return cfg;
  }
};

void add_run_options(CLI::App* cmd, CliOverrides& o) {
  o.cmd = cmd;
  cmd->add_option("--config", o.config_path, "TOML config file");
  cmd->add_option("--out", o.out_dir, "output directory");
  cmd->add_option("--seed", o.seed, "run seed");
  cmd->add_option("--policy", o.policy, "tuning policy name");
  cmd->add_option("--n-dim", o.n_dim, "mona intermediate dimension");
  cmd->add_option("--backbone-size", o.backbone_size, "tiny | small | base | custom");
  cmd->add_option("--epochs", o.epochs, "training epochs");
  cmd->add_option("--lr", o.lr, "base learning rate");
  cmd->add_option("--batch-size", o.batch_size, "batch size");
  cmd->add_option("--task", o.task, "synthetic task: pretrain | transfer");
  cmd->add_option("--samples-per-class", o.samples_per_class, "train samples per class");
  cmd->add_option("--eval-samples-per-class", o.eval_samples_per_class,
                  "eval samples per class");
}

void write_snapshot(const fs::path& out, const mona::RunConfig& cfg) {
  fs::create_directories(out);
  std::ofstream f(out / "config.snapshot.toml");
  if (!f) throw mona::IoError("cannot write " + (out / "config.snapshot.toml").string());
  f << mona::serialize_run_config(cfg);
}

void print_report_summary(const mona::RunReport& report) {
  std::cout << "policy=" << report.policy << " seed=" << report.seed
            << " trainable=" << report.stats.trainable_backbone << " ("
            << mona::format_percent(report.stats.trainable_backbone,
                                    report.stats.total_backbone)
            << " of backbone)\n";
  for (std::size_t e = 0; e < report.epochs.size(); ++e) {
    const auto& m = report.epochs[e];
    std::cout << "  epoch " << e << ": loss=" << m.train_loss << " top1=" << m.top1;
    if (m.top5) std::cout << " top5=" << *m.top5;
    std::cout << "\n";
  }
}

void save_run_artifacts(const fs::path& out, const mona::RunConfig& cfg,
                        const mona::BackboneModel& model,
                        const mona::RunReport& report) {
  write_snapshot(out, cfg);
  mona::save_checkpoint(out / "checkpoint", mona::make_checkpoint(model));
  mona::write_report_json(out / "report.json", report);
  mona::write_loss_csv(out / "loss.csv", report);
}

int cmd_gen_data(const CliOverrides& o, const std::string& format) {
  mona::RunConfig cfg = o.resolve();
  const fs::path out(o.out_dir);
  fs::create_directories(out);
  mona::DatasetPair data = mona::load_datasets(cfg);
  if (format == "idx") {
    mona::write_idx(out / "images.idx", out / "labels.idx", data.train);
    mona::write_idx(out / "eval_images.idx", out / "eval_labels.idx", data.eval);
  } else if (format == "csv") {
    mona::write_csv_images(out / "data.csv", data.train);
    mona::write_csv_images(out / "eval_data.csv", data.eval);
  } else {
    throw mona::ConfigError("unknown gen-data format '" + format +
                            "' (valid: idx, csv)");
  }
  write_snapshot(out, cfg);
  std::cout << "wrote " << data.train.size() << " train / " << data.eval.size()
            << " eval samples (" << data.train.class_count << " classes) to "
            << out.string() << "\n";
  return 0;
}

int cmd_pretrain(const CliOverrides& o) {
  mona::RunConfig cfg = o.resolve();
  mona::DatasetPair data = mona::load_datasets(cfg);
  cfg.backbone.num_classes = data.train.class_count;
  mona::BackboneModel model = mona::build_backbone(cfg.backbone, cfg.seed);
  mona::RunReport report =
      mona::pretrain(model, data.train, &data.eval, cfg.optim, cfg.seed);
  save_run_artifacts(o.out_dir, cfg, model, report);
  print_report_summary(report);
  return 0;
}

int cmd_finetune(const CliOverrides& o) {
  mona::RunConfig cfg = o.resolve();
  mona::CheckpointData ckpt = mona::load_checkpoint(o.checkpoint);
  mona::DatasetPair data = mona::load_datasets(cfg);
  cfg.backbone.num_classes = data.train.class_count;
  mona::BackboneModel model = mona::build_backbone(cfg.backbone, cfg.seed);
  mona::TuningPolicy policy = mona::build_policy(cfg.policy_name, cfg.hyper);
  mona::RunReport report =
      mona::finetune(model, ckpt, policy, data.train, &data.eval, cfg.optim, cfg.seed);
  save_run_artifacts(o.out_dir, cfg, model, report);
  print_report_summary(report);
  return 0;
}

int cmd_eval(const CliOverrides& o) {
  mona::RunConfig cfg = o.resolve();
  mona::CheckpointData ckpt = mona::load_checkpoint(o.checkpoint);
  mona::DatasetPair data = mona::load_datasets(cfg);
  cfg.backbone.num_classes = data.eval.class_count;
  mona::BackboneModel model = mona::build_backbone(cfg.backbone, cfg.seed);
  mona::TuningPolicy policy = mona::build_policy(cfg.policy_name, cfg.hyper);
  mona::apply_policy(model, policy, cfg.seed);
  mona::load_checkpoint_into(model, ckpt, /*backbone_only=*/false);
  const mona::EvalResult res = mona::evaluate(model, data.eval, cfg.optim.batch_size);
  json j;
  j["top1"] = res.top1;
  if (res.top5) j["top5"] = *res.top5;
  std::cout << j.dump(2) << "\n";
  if (o.cmd->count("--out")) {
    const fs::path out(o.out_dir);
    write_snapshot(out, cfg);
    std::ofstream f(out / "eval.json");
    f << j.dump(2) << "\n";
  }
  return 0;
}

int cmd_count_params(const CliOverrides& o, const std::string& policies_csv) {
  mona::RunConfig cfg = o.resolve();
  mona::DatasetPair data = mona::load_datasets(cfg);
  cfg.backbone.num_classes = data.train.class_count;

  std::vector<std::string> requested;
  if (policies_csv.empty()) {
    requested = mona::policy_names();
  } else {
    std::istringstream is(policies_csv);
    std::string item;
    while (std::getline(is, item, ',')) {
      if (!item.empty()) requested.push_back(item);
    }
  }

  json out_rows = json::array();
  std::cout << std::left << std::setw(14) << "Policy" << std::right << std::setw(16)
            << "Trained Params" << std::setw(12) << "%" << std::setw(13) << "D_Full"
            << "\n";
  for (const std::string& name : requested) {
    mona::TuningPolicy policy = mona::build_policy(name, cfg.hyper);
    mona::BackboneModel model = mona::build_backbone(cfg.backbone, cfg.seed);
    mona::apply_policy(model, policy, cfg.seed);
    const mona::TrainableStats stats = mona::trainable_stats(model, policy);
    const std::string percent =
        mona::format_percent(stats.trainable_backbone, stats.total_backbone);
    const std::string delta = mona::format_delta_vs_full(
        stats.trainable_backbone, stats.total_backbone, name == "full");
    std::cout << std::left << std::setw(14) << name << std::right << std::setw(16)
              << stats.trainable_backbone << std::setw(12) << percent << std::setw(13)
              << delta << "\n";
    json row;
    row["policy"] = name;
    row["trained_params"] = stats.trainable_backbone;
    row["total_backbone_params"] = stats.total_backbone;
    row["percent"] = percent;
    row["delta_vs_full"] = delta;
    out_rows.push_back(row);

    if (name == "mona") {
      for (const mona::SlotRef& ref : model.slot_refs()) {
        const std::size_t count =
            mona::mona_param_count(mona::MonaConfig(ref.width, cfg.hyper.mona_dim));
        std::cout << "    mona." << ref.block_index << "." << ref.slot
                  << " (m=" << ref.width << ", n=" << cfg.hyper.mona_dim
                  << "): " << count << "\n";
      }
    }
  }
  if (o.cmd->count("--out")) {
    const fs::path out(o.out_dir);
    write_snapshot(out, cfg);
    std::ofstream f(out / "count_params.json");
    json j;
    j["rows"] = out_rows;
    f << j.dump(2) << "\n";
  }
  return 0;
}

int cmd_gradcheck(const CliOverrides& o, double tol, std::size_t m, std::size_t grid) {
  mona::RunConfig cfg = o.resolve();
  const std::size_t n = o.cmd->count("--n-dim") ? cfg.hyper.mona_dim : 4;
  const mona::GradCheckReport report = mona::gradcheck_adapters(m, n, grid, cfg.seed);
  bool ok = true;
  for (const mona::GradCheckGroup& g : report.groups) {
    const bool pass = g.max_rel_err < tol;
    ok = ok && pass;
    std::cout << (pass ? "[PASS] " : "[FAIL] ") << std::left << std::setw(26) << g.name
              << " max rel err " << std::scientific << std::setprecision(3)
              << g.max_rel_err << std::defaultfloat << "\n";
  }
  std::cout << (ok ? "gradcheck passed" : "gradcheck FAILED") << " (worst "
            << std::scientific << std::setprecision(3) << report.worst()
            << std::defaultfloat << ", tol " << tol << ")\n";
  return ok ? 0 : 1;
}

int cmd_compare(const std::vector<std::string>& report_paths) {
  struct Row {
    std::string policy;
    std::vector<double> top1s;
  };
  std::vector<Row> rows;
  for (const std::string& path : report_paths) {
    std::ifstream f(path);
    if (!f) throw mona::IoError("cannot open report " + path);
    json j;
    f >> j;
    if (!j.contains("epochs") || j["epochs"].empty()) {
      throw mona::IoError("report " + path + " has no epoch metrics");
    }
    const std::string policy = j["policy"];
    const double top1 = j["epochs"].back()["top1"];
    auto it = std::find_if(rows.begin(), rows.end(),
                           [&](const Row& r) { return r.policy == policy; });
    if (it == rows.end()) {
      rows.push_back({policy, {top1}});
    } else {
      it->top1s.push_back(top1);
    }
  }
  std::stable_sort(rows.begin(), rows.end(), [](const Row& a, const Row& b) {
    double ma = 0.0, mb = 0.0;
    for (double v : a.top1s) ma += v;
    for (double v : b.top1s) mb += v;
    return ma / static_cast<double>(a.top1s.size()) >
           mb / static_cast<double>(b.top1s.size());
  });
  std::cout << std::left << std::setw(14) << "Policy" << std::right << std::setw(8)
            << "Runs" << std::setw(12) << "Mean top-1" << "\n";
  for (const Row& r : rows) {
    double mean = 0.0;
    for (double v : r.top1s) mean += v;
    mean /= static_cast<double>(r.top1s.size());
    std::cout << std::left << std::setw(14) << r.policy << std::right << std::setw(8)
              << r.top1s.size() << std::setw(12) << std::fixed << std::setprecision(2)
              << mean << std::defaultfloat << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"desk-scale adapter tuning lab"};
  app.require_subcommand(1);

  CliOverrides pretrain_o, finetune_o, eval_o, count_o, grad_o, gen_o;

  CLI::App* pre = app.add_subcommand("pretrain", "train all parameters from scratch");
  add_run_options(pre, pretrain_o);

  CLI::App* fin =
      app.add_subcommand("finetune", "policy-constrained tuning from a checkpoint");
  add_run_options(fin, finetune_o);
  fin->add_option("--checkpoint", finetune_o.checkpoint, "pretrain checkpoint dir")
      ->required();

  CLI::App* ev = app.add_subcommand("eval", "evaluate a checkpoint");
  add_run_options(ev, eval_o);
  ev->add_option("--checkpoint", eval_o.checkpoint, "checkpoint dir")->required();

  CLI::App* cnt = app.add_subcommand("count-params", "trainable-parameter table");
  add_run_options(cnt, count_o);
  std::string policies_csv;
  cnt->add_option("--policies", policies_csv, "comma-separated policy list");

  CLI::App* grad = app.add_subcommand("gradcheck", "finite-difference gradient check");
  add_run_options(grad, grad_o);
  double tol = 1e-5;
  std::size_t gc_m = 8, gc_grid = 4;
  grad->add_option("--tol", tol, "max relative error tolerance");
  grad->add_option("--m", gc_m, "adapter input dimension");
  grad->add_option("--grid", gc_grid, "token grid side length");

  CLI::App* gen = app.add_subcommand("gen-data", "write a synthetic dataset to disk");
  add_run_options(gen, gen_o);
  std::string format = "idx";
  gen->add_option("--format", format, "idx | csv");

  CLI::App* cmp = app.add_subcommand("compare", "merge run reports into a ranking");
  std::vector<std::string> report_paths;
  cmp->add_option("reports", report_paths, "report.json files")->required();

  CLI11_PARSE(app, argc, argv);

  if (pre->parsed()) return guarded([&] { return cmd_pretrain(pretrain_o); });
  if (fin->parsed()) return guarded([&] { return cmd_finetune(finetune_o); });
  if (ev->parsed()) return guarded([&] { return cmd_eval(eval_o); });
  if (cnt->parsed()) {
    return guarded([&] { return cmd_count_params(count_o, policies_csv); });
  }
  if (grad->parsed()) {
    return guarded([&] { return cmd_gradcheck(grad_o, tol, gc_m, gc_grid); });
  }
  if (gen->parsed()) return guarded([&] { return cmd_gen_data(gen_o, format); });
  if (cmp->parsed()) return guarded([&] { return cmd_compare(report_paths); });
  return 1;
}
