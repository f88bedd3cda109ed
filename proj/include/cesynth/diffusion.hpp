#pragma once

// Variance-exploding forward process x_t = x_0 + sigma_t * z, the training
// noise schedule, and the deterministic Heun sampler for x0-predicting
// denoisers.

#include <cstdint>
#include <functional>
#include <vector>

#include <torch/torch.h>

#include "cesynth/rng.hpp"

namespace cesynth {

/// Denoiser prediction: clean-image estimate and pixel-wise log-variance.
/// Both are (B, 1, H, W).
struct ModelOutput {
  torch::Tensor mu;
  torch::Tensor log_var;
};

/// Geometric (log-uniform) map t -> sigma_t over t = 1..T.
class NoiseSchedule {
 public:
  NoiseSchedule(double sigma_min, double sigma_max, std::int64_t num_train_steps);

  double sigma_min() const { return sigma_min_; }
  double sigma_max() const { return sigma_max_; }
  std::int64_t num_train_steps() const { return num_train_steps_; }

  /// sigma for a 1-based timestep.
  double sigma(std::int64_t t) const;
  /// Elementwise sigma for a tensor of 1-based timesteps (returned as float64).
  torch::Tensor sigma(const torch::Tensor& t) const;

  /// Bypasses validation; only for degenerate test schedules (e.g. T = 1).
  static NoiseSchedule unchecked(double sigma_min, double sigma_max, std::int64_t num_train_steps);

 private:
  NoiseSchedule() = default;
  double sigma_min_ = 0.0;
  double sigma_max_ = 0.0;
  std::int64_t num_train_steps_ = 0;
};

NoiseSchedule build_noise_schedule(double sigma_min, double sigma_max, std::int64_t num_train_steps);

struct SamplerConfig {
  std::int64_t num_inference_steps = 15;
  // Heun is the only method; the field exists so configs name it explicitly.
  enum class Method { heun } method = Method::heun;
  double final_sigma = 0.0;
};

struct Trajectory {
  std::vector<torch::Tensor> states;        // num_inference_steps + 1 (includes initial noise)
  std::vector<torch::Tensor> predicted_x0;  // num_inference_steps
  std::vector<torch::Tensor> uncertainties; // num_inference_steps, log sigma^2

  const torch::Tensor& final_state() const { return states.back(); }
};

/// x0 + sigma_t * z, z ~ N(0, I) drawn per element. `t` holds one 1-based
/// timestep per batch element.
torch::Tensor add_noise(const torch::Tensor& x0, const std::vector<std::int64_t>& t,
                        const NoiseSchedule& schedule, Rng& rng);

/// Same as above for explicit per-element noise levels.
torch::Tensor add_noise_sigma(const torch::Tensor& x0, const torch::Tensor& sigma, Rng& rng);

std::vector<std::int64_t> sample_timesteps(std::int64_t batch_size, const NoiseSchedule& schedule,
                                           Rng& rng);

/// num_inference_steps geometric points from sigma_max down to sigma_min,
/// then final_sigma.
std::vector<double> inference_sigmas(const NoiseSchedule& schedule, const SamplerConfig& config);

using DenoiserFn = std::function<ModelOutput(const torch::Tensor& x, const torch::Tensor& condition,
                                             double sigma)>;

/// Integrates dx/dsigma = (x - mu(x, sigma)) / sigma with Heun's method from
/// sigma_max to final_sigma. The step that lands on sigma = 0 is a plain
/// Euler step. The initial state is sigma_max * z with the condition's batch,
/// spatial size and dtype.
Trajectory heun_sample(const DenoiserFn& denoiser, const torch::Tensor& condition,
                       const NoiseSchedule& schedule, const SamplerConfig& config, Rng& rng);

/// Same integrator from a caller-supplied starting state on an explicit sigma grid.
Trajectory heun_integrate(const DenoiserFn& denoiser, const torch::Tensor& condition,
                          torch::Tensor x, const std::vector<double>& sigmas);

}  // namespace cesynth
