#include "cesynth/losses.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>

namespace cesynth {

namespace {

void require_same_shape(const torch::Tensor& a, const torch::Tensor& b, const char* what) {
  if (a.sizes() != b.sizes()) {
    throw std::invalid_argument(std::string(what) + ": shape mismatch " + c10::str(a.sizes()) +
                                " vs " + c10::str(b.sizes()));
  }
}

bool is_binary(const torch::Tensor& m) { return ((m == 0) | (m == 1)).all().item<bool>(); }

}  // namespace

WeightMap build_weight_map(const torch::Tensor& background_mask, const torch::Tensor& breast_mask,
                           const torch::Tensor& tumor_mask, const RegionWeights& weights) {
  require_same_shape(background_mask, breast_mask, "build_weight_map");
  require_same_shape(background_mask, tumor_mask, "build_weight_map");
  if (!is_binary(background_mask) || !is_binary(breast_mask) || !is_binary(tumor_mask)) {
    throw std::invalid_argument("build_weight_map: masks must be binary");
  }
  auto coverage = background_mask + breast_mask + tumor_mask;
  if ((coverage > 1).any().item<bool>()) {
    throw std::invalid_argument("build_weight_map: region masks overlap");
  }
  if ((coverage < 1).any().item<bool>()) {
    throw std::invalid_argument("build_weight_map: region masks do not cover every pixel");
  }
  auto raw = weights.background * background_mask + weights.breast * breast_mask +
             weights.tumor * tumor_mask;
  return {raw / raw.mean()};
}

torch::Tensor clamp_log_var(const torch::Tensor& log_var, const ClampInterval& interval) {
  if (!(interval.lo < interval.hi)) {
    throw std::invalid_argument("clamp_log_var: interval must be nondegenerate");
  }
  return torch::clamp(log_var, interval.lo, interval.hi);
}

torch::Tensor uncertainty_loss(const torch::Tensor& mu, const torch::Tensor& log_var,
                               const torch::Tensor& target, const WeightMap& weights) {
  require_same_shape(mu, target, "uncertainty_loss");
  require_same_shape(mu, log_var, "uncertainty_loss");
  require_same_shape(mu, weights.omega, "uncertainty_loss");
  auto sq = (mu - target).pow(2);
  return (weights.omega * (torch::exp(-log_var) * sq + log_var)).mean();
}

torch::Tensor weighted_mse_loss(const torch::Tensor& mu, const torch::Tensor& target,
                                const WeightMap& weights) {
  require_same_shape(mu, target, "weighted_mse_loss");
  require_same_shape(mu, weights.omega, "weighted_mse_loss");
  return (weights.omega * (mu - target).pow(2)).mean();
}

torch::Tensor dispersive_loss(const torch::Tensor& features, double tau) {
  if (features.dim() != 2) {
    throw std::invalid_argument("dispersive_loss: expected (B, D) features");
  }
  if (features.size(0) < 2) throw std::invalid_argument("dispersive_loss: batch must be >= 2");
  if (!(tau > 0.0)) throw std::invalid_argument("dispersive_loss: tau must be positive");
  auto norms = features.norm(2, 1, true);
  if ((norms == 0).any().item<bool>()) {
    throw std::invalid_argument("dispersive_loss: zero-norm feature vector");
  }
  auto unit = features / norms;
  auto logits = torch::matmul(unit, unit.t()) / tau;
  const auto b = features.size(0);
  auto diag = torch::eye(b, torch::TensorOptions().dtype(torch::kBool));
  logits = logits.masked_fill(diag, -std::numeric_limits<double>::infinity());
  return torch::logsumexp(logits, 1).mean();
}

torch::Tensor tap_dispersive_loss(const FeatureTaps& taps, double tau) {
  auto pooled = [](const torch::Tensor& t) { return t.mean({2, 3}); };
  return 0.5 * (dispersive_loss(pooled(taps.bottleneck), tau) +
                dispersive_loss(pooled(taps.final_decoder), tau));
}

torch::Tensor perceptual_loss(const torch::Tensor& mu, const torch::Tensor& target,
                              const WeightMap& weights, const PerceptualConfig& config,
                              const FeatureFn& extractor) {
  require_same_shape(mu, target, "perceptual_loss");
  require_same_shape(mu, weights.omega, "perceptual_loss");
  for (auto w : config.layer_weights) {
    if (w < 0.0) throw std::invalid_argument("perceptual_loss: negative layer weight");
  }
  auto feats_mu = extractor(mu);
  auto feats_x = extractor(target);
  if (feats_mu.size() != config.num_scales() || feats_x.size() != config.num_scales()) {
    throw std::invalid_argument("perceptual_loss: extractor returned " +
                                std::to_string(feats_mu.size()) + " levels, config expects " +
                                std::to_string(config.num_scales()));
  }
  auto total = torch::zeros({}, mu.options());
  for (std::size_t l = 0; l < config.num_scales(); ++l) {
    const auto& fm = feats_mu[l];
    const auto& fx = feats_x[l];
    auto w = weights.omega;
    if (fm.size(2) != w.size(2) || fm.size(3) != w.size(3)) {
      w = torch::adaptive_avg_pool2d(w, {fm.size(2), fm.size(3)});
    }
    auto diff = (w * (fm - fx)).abs();
    auto term = config.reduction == PerceptualConfig::Reduction::sum ? diff.sum() : diff.mean();
    total = total + config.layer_weights[l] * term;
  }
  return total;
}

double alpha_schedule(std::int64_t epoch) {
  if (epoch < 0) throw std::invalid_argument("alpha_schedule: epoch must be >= 0");
  if (epoch <= 4) return 1.0;
  if (epoch <= 9) return 5.0;
  if (epoch <= 19) return 10.0;
  return 20.0;
}

LossBreakdown total_loss(const LossComponents& c, const LossWeights& weights,
                         std::int64_t epoch) {
  auto value = [](const torch::Tensor& t, const char* name) {
    if (!t.defined()) return 0.0;
    const double v = t.detach().item<double>();
    if (!std::isfinite(v)) {
      throw std::runtime_error(std::string("total_loss: non-finite ") + name + " component (" +
                               std::to_string(v) + ")");
    }
    return v;
  };
  LossBreakdown out;
  out.unc = value(c.unc, "unc");
  out.perc = value(c.perc, "perc");
  out.disp = value(c.disp, "disp");
  out.alpha = alpha_schedule(epoch);
  if (!c.unc.defined()) throw std::invalid_argument("total_loss: reconstruction term is required");
  out.total = c.unc;
  if (c.perc.defined()) out.total = out.total + out.alpha * c.perc;
  if (c.disp.defined()) out.total = out.total + weights.beta * c.disp;
  out.total_value = out.total.detach().item<double>();
  return out;
}

}  // namespace cesynth
