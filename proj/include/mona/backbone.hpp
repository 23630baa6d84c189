#pragma once

#include <cstddef>
#include <cstring>
#include <functional>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "mona/adapter.hpp"
#include "mona/error.hpp"
#include "mona/layers.hpp"
#include "mona/policy.hpp"
#include "mona/rng.hpp"
#include "mona/serialize.hpp"
#include "mona/tensor.hpp"

namespace mona {

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct BackboneConfig {
  std::size_t image_size = 32;
  std::size_t patch_size = 4;
  std::size_t in_channels = 1;
  std::vector<std::size_t> stage_widths = {16, 32};
  std::vector<std::size_t> stage_depths = {2, 2};
  std::vector<std::size_t> stage_heads = {2, 4};
  std::size_t window = 4;
  std::size_t mlp_ratio = 4;
  std::size_t num_classes = 2;

  std::size_t num_stages() const { return stage_widths.size(); }

  std::size_t base_grid() const { return image_size / patch_size; }

  // Side length of the token grid entering stage s.
  std::size_t grid_at(std::size_t s) const { return base_grid() >> s; }

  void validate() const {
    if (patch_size == 0 || image_size % patch_size != 0) {
      throw ConfigError("image_size " + std::to_string(image_size) +
                        " not divisible by patch_size " + std::to_string(patch_size));
    }
    if (stage_widths.empty() || stage_widths.size() != stage_depths.size() ||
        stage_widths.size() != stage_heads.size()) {
      throw ConfigError("stage_widths/stage_depths/stage_heads must be equal-length, "
                        "non-empty lists");
    }
    if (in_channels == 0 || num_classes < 2 || mlp_ratio == 0 || window == 0) {
      throw ConfigError("in_channels, mlp_ratio, window must be positive and "
                        "num_classes >= 2");
    }
    for (std::size_t s = 0; s < num_stages(); ++s) {
      if (stage_heads[s] == 0 || stage_widths[s] % stage_heads[s] != 0) {
        throw ConfigError("stage " + std::to_string(s) + ": width " +
                          std::to_string(stage_widths[s]) + " not divisible by heads " +
                          std::to_string(stage_heads[s]));
      }
      const std::size_t g = grid_at(s);
      if (g == 0) throw ConfigError("stage " + std::to_string(s) + ": grid vanished");
      if ((g * g) % window != 0) {
        throw ConfigError("stage " + std::to_string(s) + ": token count " +
                          std::to_string(g * g) + " not divisible by window " +
                          std::to_string(window));
      }
      if (s + 1 < num_stages() && g % 2 != 0) {
        throw ConfigError("stage " + std::to_string(s) +
                          ": grid must be even before downsampling");
      }
    }
  }
};

// ---------------------------------------------------------------------------
// Sub-modules
// ---------------------------------------------------------------------------

struct Mlp {
  LinearLayer fc1, fc2;

  Mlp() = default;
  Mlp(std::size_t width, std::size_t hidden) : fc1(width, hidden), fc2(hidden, width) {}

  Tensor forward(const Tensor& x) const { return fc2.forward(gelu(fc1.forward(x))); }
};

// One filled insertion slot (or none). At most one pointer is set.
struct SlotModule {
  std::shared_ptr<MonaModule> mona;
  std::shared_ptr<VanillaAdapterAttachment> vanilla;
  std::shared_ptr<AdaptFormerAttachment> adaptformer;

  bool empty() const { return !mona && !vanilla && !adaptformer; }
};

struct SlotRef {
  std::size_t block_index = 0;  // global, stage-major
  std::string slot;             // "after_msa" | "after_mlp"
  std::size_t width = 0;        // hosting sublayer width m
};

using SlotFactory = std::function<SlotModule(const SlotRef&)>;

struct SwinBlock {
  LayerNormLayer ln1;
  WindowedSelfAttention attn;
  LayerNormLayer ln2;
  Mlp mlp;
  SlotModule slot_msa;   // transforms the MSA output
  SlotModule slot_mlp;   // transforms the MLP output
  std::shared_ptr<LoraAttachment> lora_q, lora_v;

  SwinBlock() = default;
  SwinBlock(std::size_t width, std::size_t heads, std::size_t window,
            std::size_t mlp_ratio)
      : ln1(width), attn(width, heads, window), ln2(width),
        mlp(width, width * mlp_ratio) {}

  // Pre-LN wiring; sequential slots transform the sublayer output before the
  // residual add, the parallel slot folds the MLP input back in.
  Tensor forward(const Tensor& x_in, std::size_t h, std::size_t w) const {
    WindowedSelfAttention::ProjectionDelta hook;
    if (lora_q || lora_v) {
      hook = [this](const char* proj, const Tensor& tokens) {
        if (std::strcmp(proj, "q") == 0 && lora_q) return lora_q->delta(tokens);
        if (std::strcmp(proj, "v") == 0 && lora_v) return lora_v->delta(tokens);
        return Tensor();
      };
    }
    Tensor y = attn.forward(ln1.forward(x_in), hook);
    y = apply_slot(slot_msa, y, y, h, w);
    Tensor x = add(x_in, y);

    const Tensor ln2x = ln2.forward(x);
    Tensor z = mlp.forward(ln2x);
    z = apply_slot(slot_mlp, z, ln2x, h, w);
    return add(x, z);
  }

 private:
  static Tensor apply_slot(const SlotModule& slot, const Tensor& sublayer_out,
                           const Tensor& sublayer_in, std::size_t h, std::size_t w) {
    if (slot.mona) return slot.mona->forward(sublayer_out, h, w);
    if (slot.vanilla) return slot.vanilla->forward(sublayer_out);
    if (slot.adaptformer) return slot.adaptformer->forward(sublayer_out, sublayer_in);
    return sublayer_out;
  }
};

struct PatchEmbed {
  std::size_t patch = 4;
  std::size_t in_channels = 1;
  LinearLayer proj;  // [C * p * p] -> width
  LayerNormLayer norm;

  PatchEmbed() = default;
  PatchEmbed(std::size_t patch_size, std::size_t channels, std::size_t width)
      : patch(patch_size), in_channels(channels),
        proj(channels * patch_size * patch_size, width), norm(width) {}

  Tensor forward(const Tensor& images) const {
    if (images.rank() != 4 || images.dim(1) != in_channels) {
      throw DimensionError("patch_embed: expected [B, " + std::to_string(in_channels) +
                           ", H, W], got " + format_shape(images.shape()));
    }
    const std::size_t B = images.dim(0), C = images.dim(1);
    const std::size_t H = images.dim(2), W = images.dim(3);
    if (H % patch != 0 || W % patch != 0) {
      throw DimensionError("patch_embed: image " + format_shape(images.shape()) +
                           " not divisible by patch " + std::to_string(patch));
    }
    const std::size_t gh = H / patch, gw = W / patch;
    Tensor split = reshape(images, {B, C, gh, patch, gw, patch});
    Tensor arranged = permute(split, {0, 2, 4, 1, 3, 5});  // [B, gh, gw, C, p, p]
    Tensor tokens = reshape(arranged, {B, gh * gw, C * patch * patch});
    return norm.forward(proj.forward(tokens));
  }
};

// 2x2 patch merging: concatenate each 2x2 neighborhood (dy, dx, channel
// order), normalize, project 4*w_in -> w_out.
struct PatchMerge {
  LayerNormLayer norm;       // over 4 * w_in
  LinearLayer reduction;     // 4 * w_in -> w_out

  PatchMerge() = default;
  PatchMerge(std::size_t w_in, std::size_t w_out)
      : norm(4 * w_in), reduction(4 * w_in, w_out) {}

  Tensor forward(const Tensor& x, std::size_t h, std::size_t w) const {
    const std::size_t B = x.dim(0), d = x.dim(2);
    Tensor grid = tokens_to_grid(x, h, w);  // [B, d, h, w]
    Tensor blocks = reshape(grid, {B, d, h / 2, 2, w / 2, 2});
    Tensor arranged = permute(blocks, {0, 2, 4, 3, 5, 1});  // [B, h/2, w/2, 2, 2, d]
    Tensor merged = reshape(arranged, {B, (h / 2) * (w / 2), 4 * d});
    return reduction.forward(norm.forward(merged));
  }
};

struct Stage {
  std::vector<SwinBlock> blocks;
  bool has_downsample = false;
  PatchMerge downsample;
};

// ---------------------------------------------------------------------------
// Model
// ---------------------------------------------------------------------------

enum class ParamGroup { backbone, extra, head };

struct NamedParam {
  std::string name;
  Tensor tensor;
  ParamGroup group = ParamGroup::backbone;
};

struct BackboneModel {
  BackboneConfig cfg;
  PatchEmbed patch_embed;
  std::vector<Stage> stages;
  LayerNormLayer norm;  // final, over last width
  LinearLayer head;     // classifier, outside the backbone

  Tensor forward(const Tensor& images) const {
    if (images.rank() != 4 || images.dim(2) != cfg.image_size ||
        images.dim(3) != cfg.image_size) {
      throw DimensionError("backbone: expected [B, C, " +
                           std::to_string(cfg.image_size) + ", " +
                           std::to_string(cfg.image_size) + "], got " +
                           format_shape(images.shape()));
    }
    Tensor x = patch_embed.forward(images);
    std::size_t h = cfg.base_grid(), w = cfg.base_grid();
    for (std::size_t s = 0; s < stages.size(); ++s) {
      for (const SwinBlock& blk : stages[s].blocks) x = blk.forward(x, h, w);
      if (stages[s].has_downsample) {
        x = stages[s].downsample.forward(x, h, w);
        h /= 2;
        w /= 2;
      }
    }
    Tensor pooled = mean_axis(norm.forward(x), 1);
    return head.forward(pooled);
  }

  std::size_t total_blocks() const {
    std::size_t n = 0;
    for (const Stage& s : stages) n += s.blocks.size();
    return n;
  }

  std::vector<SlotRef> slot_refs() const {
    std::vector<SlotRef> refs;
    std::size_t idx = 0;
    for (std::size_t s = 0; s < stages.size(); ++s) {
      for (std::size_t b = 0; b < stages[s].blocks.size(); ++b, ++idx) {
        refs.push_back({idx, "after_msa", cfg.stage_widths[s]});
        refs.push_back({idx, "after_mlp", cfg.stage_widths[s]});
      }
    }
    return refs;
  }

  PolicyContext policy_context() const {
    const std::size_t s = stages.size() - 1;
    const std::size_t b = stages[s].blocks.size() - 1;
    return {"stages." + std::to_string(s) + ".blocks." + std::to_string(b) + "."};
  }

  std::vector<NamedParam> named_params() const {
    std::vector<NamedParam> out;
    auto push = [&out](const std::string& name, const Tensor& t, ParamGroup g) {
      out.push_back({name, t, g});
    };
    auto push_linear = [&push](const std::string& p, const LinearLayer& l, ParamGroup g) {
      push(p + ".weight", l.weight, g);
      push(p + ".bias", l.bias, g);
    };
    auto push_norm = [&push](const std::string& p, const LayerNormLayer& l, ParamGroup g) {
      push(p + ".gamma", l.gamma, g);
      push(p + ".beta", l.beta, g);
    };

    push_linear("patch_embed.proj", patch_embed.proj, ParamGroup::backbone);
    push_norm("patch_embed.norm", patch_embed.norm, ParamGroup::backbone);
    std::size_t global = 0;
    for (std::size_t s = 0; s < stages.size(); ++s) {
      for (std::size_t b = 0; b < stages[s].blocks.size(); ++b, ++global) {
        const SwinBlock& blk = stages[s].blocks[b];
        const std::string bp = "stages." + std::to_string(s) + ".blocks." +
                               std::to_string(b);
        push_norm(bp + ".ln1", blk.ln1, ParamGroup::backbone);
        push_linear(bp + ".attn.wq", blk.attn.wq, ParamGroup::backbone);
        push_linear(bp + ".attn.wk", blk.attn.wk, ParamGroup::backbone);
        push_linear(bp + ".attn.wv", blk.attn.wv, ParamGroup::backbone);
        push_linear(bp + ".attn.wo", blk.attn.wo, ParamGroup::backbone);
        push_norm(bp + ".ln2", blk.ln2, ParamGroup::backbone);
        push_linear(bp + ".mlp.fc1", blk.mlp.fc1, ParamGroup::backbone);
        push_linear(bp + ".mlp.fc2", blk.mlp.fc2, ParamGroup::backbone);

        const std::string gi = std::to_string(global);
        auto push_slot = [&](const SlotModule& slot, const std::string& slot_name) {
          if (slot.mona) {
            for (auto& [n, t] : slot.mona->named_params("mona." + gi + "." + slot_name + ".")) {
              push(n, t, ParamGroup::extra);
            }
          } else if (slot.vanilla) {
            const std::string ap = "adapter." + gi + "." + slot_name;
            push_linear(ap + ".down", slot.vanilla->down, ParamGroup::extra);
            push_linear(ap + ".up", slot.vanilla->up, ParamGroup::extra);
          } else if (slot.adaptformer) {
            const std::string ap = "adaptformer." + gi + "." + slot_name;
            push_linear(ap + ".down", slot.adaptformer->down, ParamGroup::extra);
            push_linear(ap + ".up", slot.adaptformer->up, ParamGroup::extra);
          }
        };
        push_slot(blk.slot_msa, "after_msa");
        push_slot(blk.slot_mlp, "after_mlp");
        if (blk.lora_q) {
          push("lora." + gi + ".wq.A", blk.lora_q->A, ParamGroup::extra);
          push("lora." + gi + ".wq.B", blk.lora_q->B, ParamGroup::extra);
        }
        if (blk.lora_v) {
          push("lora." + gi + ".wv.A", blk.lora_v->A, ParamGroup::extra);
          push("lora." + gi + ".wv.B", blk.lora_v->B, ParamGroup::extra);
        }
      }
      if (stages[s].has_downsample) {
        const std::string dp = "stages." + std::to_string(s) + ".downsample";
        push_norm(dp + ".norm", stages[s].downsample.norm, ParamGroup::backbone);
        push_linear(dp + ".reduction", stages[s].downsample.reduction,
                    ParamGroup::backbone);
      }
    }
    push_norm("norm", norm, ParamGroup::backbone);
    push_linear("head", head, ParamGroup::head);
    return out;
  }

  std::size_t backbone_param_count() const {
    std::size_t n = 0;
    for (const NamedParam& p : named_params()) {
      if (p.group == ParamGroup::backbone) n += p.tensor.numel();
    }
    return n;
  }
};

inline BackboneModel build_backbone(const BackboneConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  Rng rng(seed);
  BackboneModel model;
  model.cfg = cfg;
  model.patch_embed = PatchEmbed(cfg.patch_size, cfg.in_channels, cfg.stage_widths[0]);
  model.patch_embed.proj.init_kaiming(rng);
  for (std::size_t s = 0; s < cfg.num_stages(); ++s) {
    Stage stage;
    for (std::size_t b = 0; b < cfg.stage_depths[s]; ++b) {
      SwinBlock blk(cfg.stage_widths[s], cfg.stage_heads[s], cfg.window, cfg.mlp_ratio);
      blk.attn.wq.init_kaiming(rng);
      blk.attn.wk.init_kaiming(rng);
      blk.attn.wv.init_kaiming(rng);
      blk.attn.wo.init_kaiming(rng);
      blk.mlp.fc1.init_kaiming(rng);
      blk.mlp.fc2.init_kaiming(rng);
      stage.blocks.push_back(std::move(blk));
    }
    if (s + 1 < cfg.num_stages()) {
      stage.has_downsample = true;
      stage.downsample = PatchMerge(cfg.stage_widths[s], cfg.stage_widths[s + 1]);
      stage.downsample.reduction.init_kaiming(rng);
    }
    model.stages.push_back(std::move(stage));
  }
  model.norm = LayerNormLayer(cfg.stage_widths.back());
  model.head = LinearLayer(cfg.stage_widths.back(), cfg.num_classes);
  model.head.init_kaiming(rng);
  return model;
}

// ---------------------------------------------------------------------------
// Adapter insertion
// ---------------------------------------------------------------------------

inline void insert_adapters(BackboneModel& model, const SlotFactory& factory) {
  if (!factory) return;
  std::size_t global = 0;
  for (Stage& stage : model.stages) {
    for (SwinBlock& blk : stage.blocks) {
      const std::size_t width = blk.ln1.dim();
      auto fill = [&](SlotModule& slot, const char* name) {
        SlotModule made = factory({global, name, width});
        if (made.empty()) return;
        if (!slot.empty()) {
          throw StateError("slot " + std::to_string(global) + "." + name +
                           " already holds an adapter");
        }
        slot = std::move(made);
      };
      fill(blk.slot_msa, "after_msa");
      fill(blk.slot_mlp, "after_mlp");
      ++global;
    }
  }
}

inline void attach_lora(BackboneModel& model, std::size_t rank, double scale, Rng& rng) {
  for (Stage& stage : model.stages) {
    for (SwinBlock& blk : stage.blocks) {
      if (blk.lora_q || blk.lora_v) throw StateError("lora already attached");
      const std::size_t d = blk.attn.dim();
      blk.lora_q = std::make_shared<LoraAttachment>(d, d, rank, scale, "wq", rng);
      blk.lora_v = std::make_shared<LoraAttachment>(d, d, rank, scale, "wv", rng);
    }
  }
}

// Installs a policy's attachments and freeze mask. Backbone parameters follow
// the predicate; attachments and the head always train.
inline void apply_policy(BackboneModel& model, const TuningPolicy& policy,
                         std::uint64_t attach_seed) {
  Rng rng(attach_seed);
  switch (policy.attach) {
    case AttachKind::none:
      break;
    case AttachKind::mona:
      insert_adapters(model, [&](const SlotRef& ref) {
        SlotModule slot;
        slot.mona = std::make_shared<MonaModule>(
            MonaConfig(ref.width, policy.hyper.mona_dim), rng);
        return slot;
      });
      break;
    case AttachKind::vanilla_adapter:
      insert_adapters(model, [&](const SlotRef& ref) {
        SlotModule slot;
        slot.vanilla = std::make_shared<VanillaAdapterAttachment>(
            ref.width, policy.hyper.adapter_dim, rng);
        return slot;
      });
      break;
    case AttachKind::adaptformer:
      insert_adapters(model, [&](const SlotRef& ref) {
        SlotModule slot;
        if (ref.slot == "after_mlp") {
          slot.adaptformer = std::make_shared<AdaptFormerAttachment>(
              ref.width, policy.hyper.adapter_dim, policy.hyper.adaptformer_scale, rng);
        }
        return slot;
      });
      break;
    case AttachKind::lora:
      attach_lora(model, policy.hyper.lora_rank, policy.hyper.lora_scale, rng);
      break;
  }
  const PolicyContext ctx = model.policy_context();
  for (NamedParam& p : model.named_params()) {
    const bool trainable = (p.group == ParamGroup::backbone)
                               ? policy.backbone_trainable(p.name, ctx)
                               : true;
    p.tensor.set_requires_grad(trainable);
  }
}

// Counts follow the comparison-table convention: attachment parameters count
// toward the trainable numerator; the denominator is the bare backbone.
inline TrainableStats trainable_stats(const BackboneModel& model,
                                      const TuningPolicy& policy) {
  const PolicyContext ctx = model.policy_context();
  TrainableStats stats;
  for (const NamedParam& p : model.named_params()) {
    switch (p.group) {
      case ParamGroup::backbone:
        stats.total_backbone += p.tensor.numel();
        if (policy.backbone_trainable(p.name, ctx)) {
          stats.trainable_backbone += p.tensor.numel();
        }
        break;
      case ParamGroup::extra:
        stats.trainable_backbone += p.tensor.numel();
        break;
      case ParamGroup::head:
        break;
    }
  }
  return stats;
}

// ---------------------------------------------------------------------------
// Checkpointing
// ---------------------------------------------------------------------------

inline CheckpointData make_checkpoint(const BackboneModel& model) {
  CheckpointData ckpt;
  auto add_cfg = [&](const std::string& k, std::size_t v) {
    ckpt.config.emplace_back(k, std::to_string(v));
  };
  add_cfg("image_size", model.cfg.image_size);
  add_cfg("patch_size", model.cfg.patch_size);
  add_cfg("in_channels", model.cfg.in_channels);
  add_cfg("window", model.cfg.window);
  add_cfg("mlp_ratio", model.cfg.mlp_ratio);
  add_cfg("num_classes", model.cfg.num_classes);
  for (std::size_t s = 0; s < model.cfg.num_stages(); ++s) {
    add_cfg("stage." + std::to_string(s) + ".width", model.cfg.stage_widths[s]);
    add_cfg("stage." + std::to_string(s) + ".depth", model.cfg.stage_depths[s]);
    add_cfg("stage." + std::to_string(s) + ".heads", model.cfg.stage_heads[s]);
  }
  for (const NamedParam& p : model.named_params()) {
    ckpt.params.emplace_back(p.name, p.tensor);
  }
  return ckpt;
}

// Copies checkpoint values into the model. With backbone_only, adapter and
// head entries are ignored (a transfer task re-initializes them); any
// parameter the model keeps must exist with the same shape.
inline void load_checkpoint_into(BackboneModel& model, const CheckpointData& ckpt,
                                 bool backbone_only) {
  for (NamedParam& p : model.named_params()) {
    if (backbone_only && p.group != ParamGroup::backbone) continue;
    const Tensor* src = ckpt.find(p.name);
    if (src == nullptr) {
      throw IoError("checkpoint is missing parameter '" + p.name + "'");
    }
    if (src->shape() != p.tensor.shape()) {
      throw IoError("checkpoint shape mismatch for '" + p.name + "': model " +
                    format_shape(p.tensor.shape()) + " vs checkpoint " +
                    format_shape(src->shape()));
    }
    p.tensor.data() = src->data();
  }
}

}  // namespace mona
