#pragma once

// Shared helpers for the unit and acceptance suites: finite-difference
// gradient checks, scratch directories, and the Heun convergence study.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "cesynth/diffusion.hpp"

namespace testing {

struct GradCheck {
  double max_rel_error = 0.0;
  std::int64_t checked = 0;
};

/// Compares autograd gradients of the scalar `f` w.r.t. each float64 tensor in
/// `inputs` (leaves with requires_grad) against central differences: the
/// fourth-order stencil (8 (f(+h) - f(-h)) - (f(+2h) - f(-2h))) / 12h, or the
/// plain two-point one when `fourth_order` is false (half the evaluations).
/// The relative error of an entry is |a - n| / max(|a|, |n|, floor).
inline GradCheck check_gradients(const std::function<torch::Tensor()>& f,
                                 const std::vector<torch::Tensor>& inputs, double eps = 1e-6,
                                 double floor = 1e-6, bool fourth_order = true) {
  for (const auto& t : inputs) {
    if (t.grad().defined()) t.mutable_grad().zero_();
  }
  f().backward();
  std::vector<torch::Tensor> analytic;
  for (const auto& t : inputs) {
    analytic.push_back(t.grad().defined() ? t.grad().clone() : torch::zeros_like(t));
  }

  GradCheck out;
  torch::NoGradGuard no_grad;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    auto flat = inputs[k].view({-1});
    auto a = analytic[k].view({-1});
    for (std::int64_t i = 0; i < flat.numel(); ++i) {
      const double orig = flat[i].item<double>();
      auto at = [&](double offset) {
        flat[i].fill_(orig + offset);
        return f().item<double>();
      };
      const double d1 = at(eps) - at(-eps);
      const double numeric =
          fourth_order ? (8 * d1 - (at(2 * eps) - at(-2 * eps))) / (12 * eps) : d1 / (2 * eps);
      flat[i].fill_(orig);
      const double an = a[i].item<double>();
      const double denom = std::max({std::abs(an), std::abs(numeric), floor});
      out.max_rel_error = std::max(out.max_rel_error, std::abs(an - numeric) / denom);
      ++out.checked;
    }
  }
  return out;
}

/// Fresh, empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("cesynth_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

/// Ideal denoiser for data x0 ~ N(m, s^2) per pixel: the posterior mean
/// m + s^2 / (s^2 + sigma^2) (x - m). Unlike a point-mass target, its flow
/// has curvature, so integrator error is measurable.
inline cesynth::DenoiserFn gaussian_denoiser(torch::Tensor m, double s) {
  return [m, s](const torch::Tensor& x, const torch::Tensor&, double sigma) {
    const double gain = s * s / (s * s + sigma * sigma);
    auto mu = m + gain * (x - m);
    return cesynth::ModelOutput{mu, torch::zeros_like(mu)};
  };
}

/// sigma_max ... sigma_min (n geometric points) followed by 0.
inline std::vector<double> geometric_grid(double sigma_max, double sigma_min, std::int64_t n) {
  std::vector<double> out;
  for (std::int64_t i = 0; i < n; ++i) {
    const double frac = n > 1 ? static_cast<double>(i) / static_cast<double>(n - 1) : 0.0;
    out.push_back(sigma_max * std::pow(sigma_min / sigma_max, frac));
  }
  out.push_back(0.0);
  return out;
}

/// Plain explicit Euler on dx/dsigma = (x - mu) / sigma over `sigmas`.
inline torch::Tensor euler_reference(const cesynth::DenoiserFn& denoiser, torch::Tensor x,
                                     const std::vector<double>& sigmas) {
  for (std::size_t i = 0; i + 1 < sigmas.size(); ++i) {
    const double s = sigmas[i], next = sigmas[i + 1];
    auto d = (x - denoiser(x, torch::Tensor(), s).mu) / s;
    x = x + (next - s) * d;
  }
  return x;
}

/// Least-squares slope of log(error) against log(steps), negated.
inline double convergence_order(const std::vector<double>& steps, const std::vector<double>& errors) {
  const auto n = static_cast<double>(steps.size());
  double sx = 0, sy = 0, sxx = 0, sxy = 0;
  for (std::size_t i = 0; i < steps.size(); ++i) {
    const double x = std::log(steps[i]), y = std::log(errors[i]);
    sx += x;
    sy += y;
    sxx += x * x;
    sxy += x * y;
  }
  return -(n * sxy - sx * sy) / (n * sxx - sx * sx);
}

struct OrderStudy {
  std::vector<double> steps{5, 10, 20, 40};
  std::vector<double> errors_vs_reference;
  std::vector<double> errors_vs_exact;
  double order_vs_reference = 0.0;
  double order_vs_exact = 0.0;
};

/// Heun terminal error on the Gaussian-data flow for 5/10/20/40 steps,
/// against a 1000-step Euler run and against the closed-form endpoint
/// m + (x_T - m) s / sqrt(s^2 + sigma_max^2).
inline OrderStudy heun_order_study(double sigma_min = 0.01, double sigma_max = 10.0, double s = 0.5) {
  torch::manual_seed(11);
  auto m = torch::rand({1, 1, 16, 16}, torch::kFloat64);
  auto x_start = m + sigma_max * torch::randn({1, 1, 16, 16}, torch::kFloat64);
  auto den = gaussian_denoiser(m, s);
  auto cond = torch::zeros({1, 3, 16, 16}, torch::kFloat64);
  auto reference = euler_reference(den, x_start, geometric_grid(sigma_max, sigma_min, 1000));
  auto exact = m + (x_start - m) * (s / std::sqrt(s * s + sigma_max * sigma_max));

  OrderStudy study;
  for (double n : study.steps) {
    auto traj = cesynth::heun_integrate(
        den, cond, x_start, geometric_grid(sigma_max, sigma_min, static_cast<std::int64_t>(n)));
    const auto& x = traj.final_state();
    study.errors_vs_reference.push_back((x - reference).abs().max().item<double>());
    study.errors_vs_exact.push_back((x - exact).abs().max().item<double>());
  }
  study.order_vs_reference = convergence_order(study.steps, study.errors_vs_reference);
  study.order_vs_exact = convergence_order(study.steps, study.errors_vs_exact);
  return study;
}

}  // namespace testing
