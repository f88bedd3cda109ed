#pragma once

// Image-quality metrics for synthesized slices: SSIM, PSNR, NMSE and nHFEN,
// globally and restricted to a region mask.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <torch/torch.h>

namespace cesynth::metrics {

constexpr double kPsnrCap = 100.0;
constexpr std::int64_t kSsimWindow = 7;
constexpr double kSsimSigma = 1.5;
constexpr std::int64_t kLogKernel = 15;
constexpr double kLogSigma = 1.5;

/// All metric functions accept any tensor whose squeezed shape is (H, W).

/// Mean local SSIM over the valid region of a 7x7 Gaussian window
/// (std 1.5), C1 = (0.01 R)^2, C2 = (0.03 R)^2.
double ssim(const torch::Tensor& pred, const torch::Tensor& ref, double data_range = 1.0);
/// 10 log10(R^2 / MSE), capped at kPsnrCap (also the value for identical images).
double psnr(const torch::Tensor& pred, const torch::Tensor& ref, double data_range = 1.0);
/// ||pred - ref||^2 / ||ref||^2.
double nmse(const torch::Tensor& pred, const torch::Tensor& ref);
/// ||LoG(pred) - LoG(ref)|| / ||LoG(ref)||, 15x15 zero-mean LoG (std 1.5),
/// half-sample symmetric boundary.
double nhfen(const torch::Tensor& pred, const torch::Tensor& ref);

/// Normalized 2D Gaussian window, (size, size) float64.
torch::Tensor gaussian_window(std::int64_t size, double sigma);
/// Zero-mean Laplacian-of-Gaussian kernel, (size, size) float64.
torch::Tensor log_kernel(std::int64_t size, double sigma);
/// Source index for position i of a half-sample symmetric extension of length n.
std::int64_t reflect_index(std::int64_t i, std::int64_t n);

enum class Scope { global, tumor };
std::string to_string(Scope scope);

struct MetricValues {
  double ssim = 0.0;
  double psnr = 0.0;
  double nmse = 0.0;
  double nhfen = 0.0;
};

MetricValues global_metrics(const torch::Tensor& pred, const torch::Tensor& ref,
                            double data_range = 1.0);

/// Metrics on the tight bounding box of `mask` (grown to at least the SSIM
/// window where the image allows), with out-of-mask pixels zeroed in both images.
MetricValues masked_metrics(const torch::Tensor& pred, const torch::Tensor& ref,
                            const torch::Tensor& mask, double data_range = 1.0);

struct CaseMetrics {
  std::int64_t case_id = 0;
  MetricValues values;
};

struct Summary {
  double mean = 0.0;
  double stddev = 0.0;  // sample standard deviation, 0 for a single case
};

struct MetricReport {
  Scope scope = Scope::global;
  std::vector<CaseMetrics> per_case;

  Summary ssim() const;
  Summary psnr() const;
  Summary nmse() const;
  Summary nhfen() const;
  bool empty() const { return per_case.empty(); }
};

/// "0.909 ± 0.027"
std::string format_summary(const Summary& s, int decimals = 3);

/// CSV rows "case_id,scope,ssim,psnr,nmse,nhfen" for every report, followed
/// by one "mean ± std" summary row per report.
void write_report_csv(const std::filesystem::path& path, const std::vector<MetricReport>& reports);
std::string report_table(const std::vector<MetricReport>& reports);

}  // namespace cesynth::metrics
