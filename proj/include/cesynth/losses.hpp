#pragma once

// Training objective: uncertainty-weighted reconstruction, batch feature
// dispersion, mask-weighted multi-scale perceptual distance, and their
// epoch-scheduled combination.

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "cesynth/network.hpp"
#include "cesynth/perceptual.hpp"

namespace cesynth {

/// Per-pixel spatial weights omega, (B, 1, H, W), batch mean 1.
struct WeightMap {
  torch::Tensor omega;
};

struct RegionWeights {
  double background = 1.0;
  double breast = 20.0;
  double tumor = 1000.0;
};

struct ClampInterval {
  double lo = -1.5;
  double hi = 3.0;
};

struct LossWeights {
  double beta = 0.002;
  double tau = 0.1;
  ClampInterval logvar_clamp{};
};

/// Layer weights lambda_l, shallow to deep. Sum reduction is the literal L1
/// norm; mean divides each level by its element count.
struct PerceptualConfig {
  enum class Reduction { sum, mean };
  std::vector<double> layer_weights{0.25, 0.5, 0.5, 1.0, 1.0};
  Reduction reduction = Reduction::sum;

  std::size_t num_scales() const { return layer_weights.size(); }
};

/// Masks must be binary, disjoint and jointly cover every pixel. The raw
/// region weights are divided by their mean over the whole batch.
WeightMap build_weight_map(const torch::Tensor& background_mask, const torch::Tensor& breast_mask,
                           const torch::Tensor& tumor_mask, const RegionWeights& weights = {});

/// Straight clamp: gradient passes inside the interval, zero outside.
torch::Tensor clamp_log_var(const torch::Tensor& log_var, const ClampInterval& interval = {});

/// mean_i omega_i [exp(-s_i) (mu_i - x_i)^2 + s_i], s = log sigma^2.
torch::Tensor uncertainty_loss(const torch::Tensor& mu, const torch::Tensor& log_var,
                               const torch::Tensor& target, const WeightMap& weights);

/// mean_i omega_i (mu_i - x_i)^2, the reconstruction term without variance.
torch::Tensor weighted_mse_loss(const torch::Tensor& mu, const torch::Tensor& target,
                                const WeightMap& weights);

/// features: (B, D). (1/B) sum_k log sum_{j != k} exp(<f_k, f_j> / tau) on
/// L2-normalized rows.
torch::Tensor dispersive_loss(const torch::Tensor& features, double tau);

/// Global-average-pools each tap to (B, C) and averages the dispersive loss
/// over the two taps.
torch::Tensor tap_dispersive_loss(const FeatureTaps& taps, double tau);

torch::Tensor perceptual_loss(const torch::Tensor& mu, const torch::Tensor& target,
                              const WeightMap& weights, const PerceptualConfig& config,
                              const FeatureFn& extractor);

/// Perceptual weight by epoch: 1 (0-4), 5 (5-9), 10 (10-19), 20 afterwards.
double alpha_schedule(std::int64_t epoch);

struct LossComponents {
  torch::Tensor unc;
  torch::Tensor perc;
  torch::Tensor disp;
};

struct LossBreakdown {
  torch::Tensor total;  // differentiable
  double unc = 0.0;
  double perc = 0.0;
  double disp = 0.0;
  double alpha = 0.0;
  double total_value = 0.0;
};

/// unc + alpha(epoch) * perc + beta * disp. Undefined component tensors count
/// as zero. Throws std::runtime_error naming any non-finite component.
LossBreakdown total_loss(const LossComponents& components, const LossWeights& weights,
                         std::int64_t epoch);

}  // namespace cesynth
