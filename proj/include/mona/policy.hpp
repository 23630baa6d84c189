#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "mona/error.hpp"
#include "mona/layers.hpp"
#include "mona/tensor.hpp"

namespace mona {

// ---------------------------------------------------------------------------
// Extra-module attachments
// ---------------------------------------------------------------------------

// Low-rank delta W x + scale * B (A x) run in parallel with an attention
// projection. B starts at zero so the delta is an exact no-op.
struct LoraAttachment {
  Tensor A;  // [rank, in]
  Tensor B;  // [out, rank]
  double scale = 1.0;
  std::string target;  // projection name, e.g. "wq"

  LoraAttachment() = default;
  LoraAttachment(std::size_t in, std::size_t out, std::size_t rank, double s,
                 std::string target_name, Rng& rng)
      : A(Tensor::zeros({rank, in})),
        B(Tensor::zeros({out, rank})),
        scale(s),
        target(std::move(target_name)) {
    fill_kaiming_uniform(A, in, rng);
  }

  Tensor delta(const Tensor& x) const {
    Tensor low = linear_apply(x, A, nullptr);
    Tensor up = linear_apply(low, B, nullptr);
    return mona::scale(up, scale);
  }

  Tensor forward(const LinearLayer& base, const Tensor& x) const {
    return add(base.forward(x), delta(x));
  }
};

// Sequential bottleneck adapter y + up(GeLU(down(y))), identity at init.
struct VanillaAdapterAttachment {
  LinearLayer down;
  LinearLayer up;

  VanillaAdapterAttachment() = default;
  VanillaAdapterAttachment(std::size_t width, std::size_t dim, Rng& rng)
      : down(width, dim), up(dim, width) {
    down.init_kaiming(rng);
    // up stays zero
  }

  Tensor forward(const Tensor& y) const {
    return add(y, up.forward(gelu(down.forward(y))));
  }
};

// Parallel bottleneck scaled into the MLP output; reads the MLP input.
struct AdaptFormerAttachment {
  LinearLayer down;
  LinearLayer up;
  double scale = 0.1;

  AdaptFormerAttachment() = default;
  AdaptFormerAttachment(std::size_t width, std::size_t dim, double s, Rng& rng)
      : down(width, dim), up(dim, width), scale(s) {
    down.init_kaiming(rng);
  }

  Tensor forward(const Tensor& mlp_out, const Tensor& mlp_in) const {
    return add(mlp_out, mona::scale(up.forward(gelu(down.forward(mlp_in))), scale));
  }
};

// ---------------------------------------------------------------------------
// Tuning policies
// ---------------------------------------------------------------------------

enum class AttachKind { none, mona, vanilla_adapter, lora, adaptformer };

struct PolicyHyperparams {
  std::size_t adapter_dim = 64;      // vanilla + adaptformer bottleneck
  std::size_t mona_dim = 64;         // mona intermediate n
  std::size_t lora_rank = 4;
  double lora_scale = 1.0;
  double adaptformer_scale = 0.1;
};

// Model-shape facts a name predicate may need.
struct PolicyContext {
  std::string last_block_prefix;
};

// Declarative freeze mask plus the attachment family a policy installs.
// Parameters outside the backbone (the head) are always trainable.
struct TuningPolicy {
  std::string name;
  AttachKind attach = AttachKind::none;
  PolicyHyperparams hyper;
  std::function<bool(const std::string&, const PolicyContext&)> backbone_trainable;
};

inline const std::vector<std::string>& policy_names() {
  static const std::vector<std::string> names = {
      "full",    "fixed", "bitfit",      "normtuning", "partial1",
      "adapter", "lora",  "adaptformer", "mona"};
  return names;
}

namespace detail {
inline bool ends_with(const std::string& s, const std::string& suffix) {
  return s.size() >= suffix.size() &&
         s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}
inline bool starts_with(const std::string& s, const std::string& prefix) {
  return s.compare(0, prefix.size(), prefix) == 0;
}
}  // namespace detail

inline TuningPolicy build_policy(const std::string& name, PolicyHyperparams hp = {}) {
  TuningPolicy p;
  p.name = name;
  p.hyper = hp;
  if (name == "full") {
    p.backbone_trainable = [](const std::string&, const PolicyContext&) { return true; };
  } else if (name == "fixed") {
    p.backbone_trainable = [](const std::string&, const PolicyContext&) { return false; };
  } else if (name == "bitfit") {
    p.backbone_trainable = [](const std::string& n, const PolicyContext&) {
      return detail::ends_with(n, ".bias");
    };
  } else if (name == "normtuning") {
    p.backbone_trainable = [](const std::string& n, const PolicyContext&) {
      return detail::ends_with(n, ".gamma") || detail::ends_with(n, ".beta");
    };
  } else if (name == "partial1") {
    p.backbone_trainable = [](const std::string& n, const PolicyContext& ctx) {
      return detail::starts_with(n, ctx.last_block_prefix);
    };
  } else if (name == "adapter" || name == "lora" || name == "adaptformer" ||
             name == "mona") {
    p.backbone_trainable = [](const std::string&, const PolicyContext&) { return false; };
    if (name == "adapter") p.attach = AttachKind::vanilla_adapter;
    if (name == "lora") p.attach = AttachKind::lora;
    if (name == "adaptformer") p.attach = AttachKind::adaptformer;
    if (name == "mona") p.attach = AttachKind::mona;
  } else {
    std::string valid;
    for (const auto& n : policy_names()) valid += (valid.empty() ? "" : ", ") + n;
    throw ConfigError("unknown policy '" + name + "' (valid: " + valid + ")");
  }
  return p;
}

// ---------------------------------------------------------------------------
// Trainable-parameter accounting (table conventions)
// ---------------------------------------------------------------------------

struct TrainableStats {
  std::size_t trainable_backbone = 0;  // predicate-true base params + attachments
  std::size_t total_backbone = 0;      // base backbone params only
};

// Exact-rational percentage rounded half-up to 2 decimals, e.g. "4.67 %".
inline std::string format_percent(std::uint64_t num, std::uint64_t den) {
  const std::uint64_t scaled = (num * 10000 + den / 2) / den;
  std::string frac = std::to_string(scaled % 100);
  if (frac.size() < 2) frac = "0" + frac;
  return std::to_string(scaled / 100) + "." + frac + " %";
}

// Signed difference to the 100.00 % full row; the full row itself prints "-".
inline std::string format_delta_vs_full(std::uint64_t num, std::uint64_t den,
                                        bool is_full) {
  if (is_full) return "-";
  const std::int64_t scaled =
      static_cast<std::int64_t>((num * 10000 + den / 2) / den) - 10000;
  const std::int64_t mag = scaled < 0 ? -scaled : scaled;
  std::string frac = std::to_string(mag % 100);
  if (frac.size() < 2) frac = "0" + frac;
  return std::string(scaled < 0 ? "-" : "+") + std::to_string(mag / 100) + "." + frac +
         " %";
}

}  // namespace mona
