#include "cesynth/diffusion.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>
#include <string>

namespace cesynth {

NoiseSchedule::NoiseSchedule(double sigma_min, double sigma_max, std::int64_t num_train_steps)
    : sigma_min_(sigma_min), sigma_max_(sigma_max), num_train_steps_(num_train_steps) {
  if (!(sigma_min > 0.0) || !std::isfinite(sigma_min) || !std::isfinite(sigma_max)) {
    throw std::invalid_argument("noise schedule: sigma_min must be positive and finite");
  }
  if (!(sigma_min < sigma_max)) {
    throw std::invalid_argument("noise schedule: requires sigma_min < sigma_max");
  }
  if (num_train_steps < 2) {
    throw std::invalid_argument("noise schedule: num_train_steps must be >= 2");
  }
}

NoiseSchedule NoiseSchedule::unchecked(double sigma_min, double sigma_max,
                                       std::int64_t num_train_steps) {
  NoiseSchedule s;
  s.sigma_min_ = sigma_min;
  s.sigma_max_ = sigma_max;
  s.num_train_steps_ = num_train_steps;
  return s;
}

double NoiseSchedule::sigma(std::int64_t t) const {
  if (t < 1 || t > num_train_steps_) {
    throw std::out_of_range("noise schedule: timestep " + std::to_string(t) + " outside [1, " +
                            std::to_string(num_train_steps_) + "]");
  }
  if (num_train_steps_ == 1) return sigma_min_;
  const double frac = static_cast<double>(t - 1) / static_cast<double>(num_train_steps_ - 1);
  return sigma_min_ * std::pow(sigma_max_ / sigma_min_, frac);
}

torch::Tensor NoiseSchedule::sigma(const torch::Tensor& t) const {
  auto tc = t.to(torch::kInt64).contiguous();
  auto out = torch::empty(tc.sizes(), torch::kFloat64);
  const auto* src = tc.data_ptr<std::int64_t>();
  auto* dst = out.data_ptr<double>();
  for (std::int64_t i = 0; i < tc.numel(); ++i) dst[i] = sigma(src[i]);
  return out;
}

NoiseSchedule build_noise_schedule(double sigma_min, double sigma_max,
                                   std::int64_t num_train_steps) {
  return NoiseSchedule(sigma_min, sigma_max, num_train_steps);
}

torch::Tensor add_noise_sigma(const torch::Tensor& x0, const torch::Tensor& sigma, Rng& rng) {
  if (sigma.dim() != 1 || sigma.size(0) != x0.size(0)) {
    throw std::invalid_argument("add_noise: need one sigma per batch element");
  }
  auto z = rng.normal(x0.sizes(), x0.options());
  std::vector<std::int64_t> bshape(x0.dim(), 1);
  bshape[0] = x0.size(0);
  return x0 + sigma.to(x0.options()).view(bshape) * z;
}

torch::Tensor add_noise(const torch::Tensor& x0, const std::vector<std::int64_t>& t,
                        const NoiseSchedule& schedule, Rng& rng) {
  if (static_cast<std::int64_t>(t.size()) != x0.size(0)) {
    throw std::invalid_argument("add_noise: need one timestep per batch element");
  }
  std::vector<double> sig;
  sig.reserve(t.size());
  for (auto ti : t) sig.push_back(schedule.sigma(ti));
  return add_noise_sigma(x0, torch::tensor(sig, torch::kFloat64), rng);
}

std::vector<std::int64_t> sample_timesteps(std::int64_t batch_size, const NoiseSchedule& schedule,
                                           Rng& rng) {
  if (batch_size < 1) throw std::invalid_argument("sample_timesteps: batch_size must be >= 1");
  auto t = rng.uniform_int(1, schedule.num_train_steps(), batch_size);
  return {t.data_ptr<std::int64_t>(), t.data_ptr<std::int64_t>() + batch_size};
}

std::vector<double> inference_sigmas(const NoiseSchedule& schedule, const SamplerConfig& config) {
  const auto n = config.num_inference_steps;
  if (n < 1) throw std::invalid_argument("sampler: num_inference_steps must be >= 1");
  if (config.final_sigma < 0.0 || config.final_sigma >= schedule.sigma_min()) {
    throw std::invalid_argument("sampler: final_sigma must lie in [0, sigma_min)");
  }
  std::vector<double> out;
  out.reserve(n + 1);
  if (n == 1) {
    out.push_back(schedule.sigma_max());
  } else {
    const double lmax = std::log(schedule.sigma_max());
    const double lmin = std::log(schedule.sigma_min());
    for (std::int64_t i = 0; i < n; ++i) {
      const double frac = static_cast<double>(i) / static_cast<double>(n - 1);
      out.push_back(std::exp(lmax + frac * (lmin - lmax)));
    }
    out.front() = schedule.sigma_max();
    out.back() = schedule.sigma_min();
  }
  out.push_back(config.final_sigma);
  return out;
}

namespace {

void check_finite(const ModelOutput& out, std::size_t step) {
  const bool ok = torch::isfinite(out.mu).all().item<bool>() &&
                  (!out.log_var.defined() || torch::isfinite(out.log_var).all().item<bool>());
  if (!ok) {
    std::ostringstream msg;
    msg << "heun_sample: denoiser produced non-finite output at step " << step;
    throw std::runtime_error(msg.str());
  }
}

}  // namespace

Trajectory heun_integrate(const DenoiserFn& denoiser, const torch::Tensor& condition,
                          torch::Tensor x, const std::vector<double>& sigmas) {
  if (sigmas.size() < 2) throw std::invalid_argument("heun_integrate: need at least two sigmas");
  torch::NoGradGuard no_grad;
  Trajectory traj;
  traj.states.push_back(x);
  for (std::size_t i = 0; i + 1 < sigmas.size(); ++i) {
    const double s_cur = sigmas[i];
    const double s_next = sigmas[i + 1];
    auto out = denoiser(x, condition, s_cur);
    check_finite(out, i);
    if (out.mu.sizes() != x.sizes()) {
      throw std::invalid_argument("heun_sample: denoiser mu shape differs from state shape");
    }
    traj.predicted_x0.push_back(out.mu);
    traj.uncertainties.push_back(out.log_var.defined() ? out.log_var : torch::zeros_like(out.mu));

    auto slope = (x - out.mu) / s_cur;
    auto x_next = x + (s_next - s_cur) * slope;
    if (s_next > 0.0) {
      auto corr = denoiser(x_next, condition, s_next);
      check_finite(corr, i);
      auto slope_next = (x_next - corr.mu) / s_next;
      x_next = x + (s_next - s_cur) * 0.5 * (slope + slope_next);
    }
    x = x_next;
    traj.states.push_back(x);
  }
  return traj;
}

Trajectory heun_sample(const DenoiserFn& denoiser, const torch::Tensor& condition,
                       const NoiseSchedule& schedule, const SamplerConfig& config, Rng& rng) {
  const auto sigmas = inference_sigmas(schedule, config);
  auto z = rng.normal({condition.size(0), 1, condition.size(2), condition.size(3)},
                      condition.options());
  return heun_integrate(denoiser, condition, schedule.sigma_max() * z, sigmas);
}

}  // namespace cesynth
