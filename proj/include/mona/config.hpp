#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "mona/backbone.hpp"
#include "mona/data.hpp"
#include "mona/error.hpp"
#include "mona/policy.hpp"
#include "mona/train.hpp"

namespace mona {

// ---------------------------------------------------------------------------
// Minimal TOML subset: [section] headers, key = value with integers, reals,
// booleans, quoted strings and flat integer arrays. '#' starts a comment.
// Keys are stored flattened as "section.key".
// ---------------------------------------------------------------------------

struct TomlValue {
  enum class Kind { integer, real, boolean, string, int_array };
  Kind kind = Kind::string;
  std::int64_t integer = 0;
  double real = 0.0;
  bool boolean = false;
  std::string str;
  std::vector<std::int64_t> array;
};

class TomlTable {
 public:
  static TomlTable parse_string(const std::string& text) {
    TomlTable table;
    std::istringstream is(text);
    std::string line;
    std::string section;
    std::size_t line_no = 0;
    while (std::getline(is, line)) {
      ++line_no;
      const std::string stripped = strip_comment(line);
      const std::string trimmed = trim(stripped);
      if (trimmed.empty()) continue;
      if (trimmed.front() == '[') {
        if (trimmed.back() != ']') {
          throw ConfigError("config line " + std::to_string(line_no) +
                            ": unterminated section header");
        }
        section = trim(trimmed.substr(1, trimmed.size() - 2));
        continue;
      }
      const auto eq = trimmed.find('=');
      if (eq == std::string::npos) {
        throw ConfigError("config line " + std::to_string(line_no) +
                          ": expected key = value");
      }
      const std::string key = trim(trimmed.substr(0, eq));
      const std::string value = trim(trimmed.substr(eq + 1));
      if (key.empty() || value.empty()) {
        throw ConfigError("config line " + std::to_string(line_no) +
                          ": empty key or value");
      }
      const std::string full = section.empty() ? key : section + "." + key;
      table.values_[full] = parse_value(value, line_no);
    }
    return table;
  }

  static TomlTable parse_file(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open config " + path.string());
    std::ostringstream buf;
    buf << f.rdbuf();
    return parse_string(buf.str());
  }

  bool has(const std::string& key) const { return values_.count(key) > 0; }

  const std::map<std::string, TomlValue>& entries() const { return values_; }

  std::int64_t get_int(const std::string& key) const {
    const TomlValue& v = at(key);
    if (v.kind != TomlValue::Kind::integer) {
      throw ConfigError("config key '" + key + "' must be an integer");
    }
    return v.integer;
  }

  double get_real(const std::string& key) const {
    const TomlValue& v = at(key);
    if (v.kind == TomlValue::Kind::integer) return static_cast<double>(v.integer);
    if (v.kind != TomlValue::Kind::real) {
      throw ConfigError("config key '" + key + "' must be a number");
    }
    return v.real;
  }

  bool get_bool(const std::string& key) const {
    const TomlValue& v = at(key);
    if (v.kind != TomlValue::Kind::boolean) {
      throw ConfigError("config key '" + key + "' must be true or false");
    }
    return v.boolean;
  }

  std::string get_string(const std::string& key) const {
    const TomlValue& v = at(key);
    if (v.kind != TomlValue::Kind::string) {
      throw ConfigError("config key '" + key + "' must be a quoted string");
    }
    return v.str;
  }

  std::vector<std::size_t> get_size_array(const std::string& key) const {
    const TomlValue& v = at(key);
    if (v.kind != TomlValue::Kind::int_array) {
      throw ConfigError("config key '" + key + "' must be an integer array");
    }
    std::vector<std::size_t> out;
    for (std::int64_t x : v.array) {
      if (x < 0) throw ConfigError("config key '" + key + "' must be non-negative");
      out.push_back(static_cast<std::size_t>(x));
    }
    return out;
  }

 private:
  const TomlValue& at(const std::string& key) const {
    auto it = values_.find(key);
    if (it == values_.end()) throw ConfigError("missing config key '" + key + "'");
    return it->second;
  }

  static std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
  }

  static std::string strip_comment(const std::string& s) {
    bool in_string = false;
    for (std::size_t i = 0; i < s.size(); ++i) {
      if (s[i] == '"') in_string = !in_string;
      if (s[i] == '#' && !in_string) return s.substr(0, i);
    }
    return s;
  }

  static TomlValue parse_value(const std::string& raw, std::size_t line_no) {
    TomlValue v;
    if (raw.front() == '"') {
      if (raw.size() < 2 || raw.back() != '"') {
        throw ConfigError("config line " + std::to_string(line_no) +
                          ": unterminated string");
      }
      v.kind = TomlValue::Kind::string;
      v.str = raw.substr(1, raw.size() - 2);
      return v;
    }
    if (raw.front() == '[') {
      if (raw.back() != ']') {
        throw ConfigError("config line " + std::to_string(line_no) +
                          ": unterminated array");
      }
      v.kind = TomlValue::Kind::int_array;
      std::istringstream items(raw.substr(1, raw.size() - 2));
      std::string item;
      while (std::getline(items, item, ',')) {
        const std::string t = trim(item);
        if (t.empty()) continue;
        v.array.push_back(std::stoll(t));
      }
      return v;
    }
    if (raw == "true" || raw == "false") {
      v.kind = TomlValue::Kind::boolean;
      v.boolean = raw == "true";
      return v;
    }
    if (raw.find_first_of(".eE") != std::string::npos &&
        raw.find_first_not_of("+-0123456789.eE") == std::string::npos) {
      v.kind = TomlValue::Kind::real;
      v.real = std::stod(raw);
      return v;
    }
    if (raw.find_first_not_of("+-0123456789") == std::string::npos) {
      v.kind = TomlValue::Kind::integer;
      v.integer = std::stoll(raw);
      return v;
    }
    throw ConfigError("config line " + std::to_string(line_no) +
                      ": cannot parse value '" + raw + "'");
  }

  std::map<std::string, TomlValue> values_;
};

// ---------------------------------------------------------------------------
// Run configuration: defaults, file, then CLI flags (applied by the caller).
// ---------------------------------------------------------------------------

struct RunConfig {
  std::uint64_t seed = 1;
  std::string backbone_size = "tiny";  // tiny | small | base | custom

  BackboneConfig backbone;  // geometry; num_classes is set by the dataset

  std::string policy_name = "mona";
  PolicyHyperparams hyper;

  OptimConfig optim;

  // data
  std::string data_kind = "synthetic";  // synthetic | idx | csv
  std::string task = "pretrain";        // synthetic band preset: pretrain | transfer
  std::size_t samples_per_class = 250;
  std::size_t eval_samples_per_class = 50;
  std::size_t data_image_size = 0;  // 0 = follow backbone.image_size
  double noise_sigma = 0.05;
  double frequency = 4.0;
  std::string images_path, labels_path;            // idx
  std::string eval_images_path, eval_labels_path;  // idx
  std::string csv_path, eval_csv_path;             // csv
};

inline void apply_backbone_size(RunConfig& cfg, const std::string& size) {
  cfg.backbone_size = size;
  BackboneConfig& b = cfg.backbone;
  if (size == "tiny") {
    b.stage_widths = {16, 32};
    b.stage_heads = {2, 4};
  } else if (size == "small") {
    b.stage_widths = {24, 48};
    b.stage_heads = {3, 6};
  } else if (size == "base") {
    b.stage_widths = {32, 64};
    b.stage_heads = {4, 8};
  } else if (size == "custom") {
    return;  // geometry comes from [backbone] keys
  } else {
    throw ConfigError("unknown backbone size '" + size +
                      "' (valid: tiny, small, base, custom)");
  }
  b.image_size = 16;
  b.patch_size = 4;
  b.in_channels = 1;
  b.stage_depths = {2, 2};
  b.window = 4;
  b.mlp_ratio = 4;
}

inline RunConfig default_run_config() {
  RunConfig cfg;
  apply_backbone_size(cfg, "tiny");
  cfg.optim.epochs = 10;
  return cfg;
}

inline void apply_config_table(RunConfig& cfg, const TomlTable& table) {
  if (table.has("backbone_size")) {
    apply_backbone_size(cfg, table.get_string("backbone_size"));
  }
  for (const auto& [key, value] : table.entries()) {
    (void)value;
    if (key == "seed") cfg.seed = static_cast<std::uint64_t>(table.get_int(key));
    else if (key == "backbone_size") { /* handled above */ }
    else if (key == "backbone.image_size") cfg.backbone.image_size = table.get_int(key);
    else if (key == "backbone.patch_size") cfg.backbone.patch_size = table.get_int(key);
    else if (key == "backbone.in_channels") cfg.backbone.in_channels = table.get_int(key);
    else if (key == "backbone.window") cfg.backbone.window = table.get_int(key);
    else if (key == "backbone.mlp_ratio") cfg.backbone.mlp_ratio = table.get_int(key);
    else if (key == "backbone.stage_widths") cfg.backbone.stage_widths = table.get_size_array(key);
    else if (key == "backbone.stage_depths") cfg.backbone.stage_depths = table.get_size_array(key);
    else if (key == "backbone.stage_heads") cfg.backbone.stage_heads = table.get_size_array(key);
    else if (key == "policy.name") cfg.policy_name = table.get_string(key);
    else if (key == "policy.dim") cfg.hyper.adapter_dim = table.get_int(key);
    else if (key == "policy.n_dim") cfg.hyper.mona_dim = table.get_int(key);
    else if (key == "policy.rank") cfg.hyper.lora_rank = table.get_int(key);
    else if (key == "policy.scale") cfg.hyper.lora_scale = table.get_real(key);
    else if (key == "policy.adaptformer_scale") cfg.hyper.adaptformer_scale = table.get_real(key);
    else if (key == "optim.lr") cfg.optim.lr = table.get_real(key);
    else if (key == "optim.beta1") cfg.optim.beta1 = table.get_real(key);
    else if (key == "optim.beta2") cfg.optim.beta2 = table.get_real(key);
    else if (key == "optim.eps") cfg.optim.eps = table.get_real(key);
    else if (key == "optim.weight_decay") cfg.optim.weight_decay = table.get_real(key);
    else if (key == "optim.batch_size") cfg.optim.batch_size = table.get_int(key);
    else if (key == "optim.epochs") cfg.optim.epochs = table.get_int(key);
    else if (key == "optim.cosine") cfg.optim.cosine_decay = table.get_bool(key);
    else if (key == "data.kind") cfg.data_kind = table.get_string(key);
    else if (key == "data.task") cfg.task = table.get_string(key);
    else if (key == "data.samples_per_class") cfg.samples_per_class = table.get_int(key);
    else if (key == "data.eval_samples_per_class") cfg.eval_samples_per_class = table.get_int(key);
    else if (key == "data.image_size") cfg.data_image_size = table.get_int(key);
    else if (key == "data.noise_sigma") cfg.noise_sigma = table.get_real(key);
    else if (key == "data.frequency") cfg.frequency = table.get_real(key);
    else if (key == "data.images") cfg.images_path = table.get_string(key);
    else if (key == "data.labels") cfg.labels_path = table.get_string(key);
    else if (key == "data.eval_images") cfg.eval_images_path = table.get_string(key);
    else if (key == "data.eval_labels") cfg.eval_labels_path = table.get_string(key);
    else if (key == "data.csv") cfg.csv_path = table.get_string(key);
    else if (key == "data.eval_csv") cfg.eval_csv_path = table.get_string(key);
    else throw ConfigError("unknown config key '" + key + "'");
  }
}

inline std::string format_size_array(const std::vector<std::size_t>& v) {
  std::string out = "[";
  for (std::size_t i = 0; i < v.size(); ++i) {
    if (i) out += ", ";
    out += std::to_string(v[i]);
  }
  return out + "]";
}

inline std::string format_real(double v) {
  std::ostringstream os;
  os.precision(17);
  os << v;
  const std::string s = os.str();
  // keep the value recognizably real for the parser
  return s.find_first_of(".eE") == std::string::npos ? s + ".0" : s;
}

// Fully resolved snapshot; parsing it back reproduces the configuration.
inline std::string serialize_run_config(const RunConfig& cfg) {
  std::ostringstream os;
  os << "seed = " << cfg.seed << "\n";
  os << "backbone_size = \"custom\"\n\n";
  os << "[backbone]\n";
  os << "image_size = " << cfg.backbone.image_size << "\n";
  os << "patch_size = " << cfg.backbone.patch_size << "\n";
  os << "in_channels = " << cfg.backbone.in_channels << "\n";
  os << "window = " << cfg.backbone.window << "\n";
  os << "mlp_ratio = " << cfg.backbone.mlp_ratio << "\n";
  os << "stage_widths = " << format_size_array(cfg.backbone.stage_widths) << "\n";
  os << "stage_depths = " << format_size_array(cfg.backbone.stage_depths) << "\n";
  os << "stage_heads = " << format_size_array(cfg.backbone.stage_heads) << "\n\n";
  os << "[policy]\n";
  os << "name = \"" << cfg.policy_name << "\"\n";
  os << "dim = " << cfg.hyper.adapter_dim << "\n";
  os << "n_dim = " << cfg.hyper.mona_dim << "\n";
  os << "rank = " << cfg.hyper.lora_rank << "\n";
  os << "scale = " << format_real(cfg.hyper.lora_scale) << "\n";
  os << "adaptformer_scale = " << format_real(cfg.hyper.adaptformer_scale) << "\n\n";
  os << "[optim]\n";
  os << "lr = " << format_real(cfg.optim.lr) << "\n";
  os << "beta1 = " << format_real(cfg.optim.beta1) << "\n";
  os << "beta2 = " << format_real(cfg.optim.beta2) << "\n";
  os << "eps = " << format_real(cfg.optim.eps) << "\n";
  os << "weight_decay = " << format_real(cfg.optim.weight_decay) << "\n";
  os << "batch_size = " << cfg.optim.batch_size << "\n";
  os << "epochs = " << cfg.optim.epochs << "\n";
  os << "cosine = " << (cfg.optim.cosine_decay ? "true" : "false") << "\n\n";
  os << "[data]\n";
  os << "kind = \"" << cfg.data_kind << "\"\n";
  os << "task = \"" << cfg.task << "\"\n";
  os << "samples_per_class = " << cfg.samples_per_class << "\n";
  os << "eval_samples_per_class = " << cfg.eval_samples_per_class << "\n";
  os << "image_size = " << cfg.data_image_size << "\n";
  os << "noise_sigma = " << format_real(cfg.noise_sigma) << "\n";
  os << "frequency = " << format_real(cfg.frequency) << "\n";
  if (!cfg.images_path.empty()) os << "images = \"" << cfg.images_path << "\"\n";
  if (!cfg.labels_path.empty()) os << "labels = \"" << cfg.labels_path << "\"\n";
  if (!cfg.eval_images_path.empty()) os << "eval_images = \"" << cfg.eval_images_path << "\"\n";
  if (!cfg.eval_labels_path.empty()) os << "eval_labels = \"" << cfg.eval_labels_path << "\"\n";
  if (!cfg.csv_path.empty()) os << "csv = \"" << cfg.csv_path << "\"\n";
  if (!cfg.eval_csv_path.empty()) os << "eval_csv = \"" << cfg.eval_csv_path << "\"\n";
  return os.str();
}

// ---------------------------------------------------------------------------
// Dataset construction per config
// ---------------------------------------------------------------------------

struct DatasetPair {
  LabeledImageSet train;
  LabeledImageSet eval;
};

inline SyntheticTaskSpec synthetic_spec_for(const RunConfig& cfg, bool eval_split) {
  const std::size_t image =
      cfg.data_image_size > 0 ? cfg.data_image_size : cfg.backbone.image_size;
  SyntheticTaskSpec spec =
      cfg.task == "transfer"
          ? transfer_task(cfg.seed, cfg.samples_per_class, image)
          : pretrain_task(cfg.seed, cfg.samples_per_class, image);
  if (cfg.task != "transfer" && cfg.task != "pretrain") {
    throw ConfigError("unknown synthetic task '" + cfg.task +
                      "' (valid: pretrain, transfer)");
  }
  spec.noise_sigma = cfg.noise_sigma;
  spec.frequency = cfg.frequency;
  if (eval_split) {
    spec.samples_per_class = cfg.eval_samples_per_class;
    spec.split = "eval";
  }
  return spec;
}

inline DatasetPair load_datasets(const RunConfig& cfg) {
  DatasetPair pair;
  if (cfg.data_kind == "synthetic") {
    pair.train = gen_synthetic(synthetic_spec_for(cfg, false));
    pair.eval = gen_synthetic(synthetic_spec_for(cfg, true));
  } else if (cfg.data_kind == "idx") {
    pair.train = load_idx(cfg.images_path, cfg.labels_path);
    pair.eval = load_idx(cfg.eval_images_path.empty() ? cfg.images_path
                                                      : cfg.eval_images_path,
                         cfg.eval_labels_path.empty() ? cfg.labels_path
                                                      : cfg.eval_labels_path);
  } else if (cfg.data_kind == "csv") {
    pair.train = load_csv_images(cfg.csv_path);
    pair.eval = load_csv_images(cfg.eval_csv_path.empty() ? cfg.csv_path
                                                          : cfg.eval_csv_path);
  } else {
    throw ConfigError("unknown data kind '" + cfg.data_kind +
                      "' (valid: synthetic, idx, csv)");
  }
  if (pair.train.class_count != pair.eval.class_count) {
    throw ConfigError("train/eval class counts disagree: " +
                      std::to_string(pair.train.class_count) + " vs " +
                      std::to_string(pair.eval.class_count));
  }
  return pair;
}

}  // namespace mona
