#include "cesynth/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>

namespace cesynth::metrics {

namespace {

torch::Tensor as_image(const torch::Tensor& t) {
  auto img = t.detach().to(torch::kFloat64).squeeze();
  if (img.dim() != 2) {
    throw std::invalid_argument("metrics: expected a single 2D image, got shape " +
                                c10::str(t.sizes()));
  }
  return img.contiguous();
}

void require_same_shape(const torch::Tensor& a, const torch::Tensor& b) {
  if (a.sizes() != b.sizes()) {
    throw std::invalid_argument("metrics: shape mismatch " + c10::str(a.sizes()) + " vs " +
                                c10::str(b.sizes()));
  }
}

torch::Tensor reflect_pad(const torch::Tensor& img, std::int64_t pad) {
  auto make_index = [pad](std::int64_t n) {
    std::vector<std::int64_t> idx;
    for (std::int64_t i = -pad; i < n + pad; ++i) idx.push_back(reflect_index(i, n));
    return torch::tensor(idx, torch::kInt64);
  };
  return img.index_select(0, make_index(img.size(0))).index_select(1, make_index(img.size(1)));
}

torch::Tensor conv_valid(const torch::Tensor& stack, const torch::Tensor& kernel) {
  // stack: (N, H, W), kernel: (k, k)
  return torch::conv2d(stack.unsqueeze(1), kernel.unsqueeze(0).unsqueeze(0)).squeeze(1);
}

torch::Tensor log_response(const torch::Tensor& img) {
  static const auto kernel = log_kernel(kLogKernel, kLogSigma);
  return conv_valid(reflect_pad(img, kLogKernel / 2).unsqueeze(0), kernel).squeeze(0);
}

Summary summarize(const std::vector<CaseMetrics>& cases, double MetricValues::*field) {
  Summary s;
  if (cases.empty()) return s;
  for (const auto& c : cases) s.mean += c.values.*field;
  s.mean /= static_cast<double>(cases.size());
  if (cases.size() > 1) {
    double acc = 0.0;
    for (const auto& c : cases) acc += std::pow(c.values.*field - s.mean, 2);
    s.stddev = std::sqrt(acc / static_cast<double>(cases.size() - 1));
  }
  return s;
}

}  // namespace

std::int64_t reflect_index(std::int64_t i, std::int64_t n) {
  const auto period = 2 * n;
  auto j = i % period;
  if (j < 0) j += period;
  return j < n ? j : period - 1 - j;
}

torch::Tensor gaussian_window(std::int64_t size, double sigma) {
  auto r = torch::arange(size, torch::kFloat64) - static_cast<double>(size - 1) / 2.0;
  auto g = torch::exp(-(r * r) / (2 * sigma * sigma));
  auto w = torch::outer(g, g);
  return w / w.sum();
}

torch::Tensor log_kernel(std::int64_t size, double sigma) {
  auto r = torch::arange(size, torch::kFloat64) - static_cast<double>(size - 1) / 2.0;
  auto yy = r.view({-1, 1}).expand({size, size});
  auto xx = r.view({1, -1}).expand({size, size});
  auto rr = xx * xx + yy * yy;
  const double s2 = sigma * sigma;
  auto k = (rr - 2 * s2) / (s2 * s2) * torch::exp(-rr / (2 * s2));
  return k - k.mean();
}

double ssim(const torch::Tensor& pred, const torch::Tensor& ref, double data_range) {
  auto x = as_image(pred), y = as_image(ref);
  require_same_shape(x, y);
  if (!(data_range > 0.0)) throw std::invalid_argument("ssim: data_range must be positive");
  if (x.size(0) < kSsimWindow || x.size(1) < kSsimWindow) {
    throw std::invalid_argument("ssim: image smaller than the 7x7 window");
  }
  static const auto window = gaussian_window(kSsimWindow, kSsimSigma);
  auto stats = conv_valid(torch::stack({x, y, x * x, y * y, x * y}), window);
  auto mx = stats[0], my = stats[1];
  auto vx = stats[2] - mx * mx, vy = stats[3] - my * my, cxy = stats[4] - mx * my;
  const double c1 = std::pow(0.01 * data_range, 2), c2 = std::pow(0.03 * data_range, 2);
  auto map = ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
  return map.mean().item<double>();
}

double psnr(const torch::Tensor& pred, const torch::Tensor& ref, double data_range) {
  auto x = as_image(pred), y = as_image(ref);
  require_same_shape(x, y);
  const double mse = (x - y).pow(2).mean().item<double>();
  if (mse == 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(data_range * data_range / mse));
}

double nmse(const torch::Tensor& pred, const torch::Tensor& ref) {
  auto x = as_image(pred), y = as_image(ref);
  require_same_shape(x, y);
  const double denom = y.pow(2).sum().item<double>();
  // the LoG kernel sums to zero only up to rounding, so flat images leave ~1e-16
  if (denom < 1e-12) throw std::invalid_argument("nmse: reference image is identically zero");
  return (x - y).pow(2).sum().item<double>() / denom;
}

double nhfen(const torch::Tensor& pred, const torch::Tensor& ref) {
  auto x = as_image(pred), y = as_image(ref);
  require_same_shape(x, y);
  auto ly = log_response(y);
  const double denom = ly.norm().item<double>();
  // the LoG kernel sums to zero only up to rounding, so flat images leave ~1e-16
  if (denom < 1e-12) throw std::invalid_argument("nhfen: reference has no high-frequency content");
  return (log_response(x) - ly).norm().item<double>() / denom;
}

std::string to_string(Scope scope) { return scope == Scope::global ? "global" : "tumor"; }

MetricValues global_metrics(const torch::Tensor& pred, const torch::Tensor& ref,
                            double data_range) {
  return {ssim(pred, ref, data_range), psnr(pred, ref, data_range), nmse(pred, ref),
          nhfen(pred, ref)};
}

MetricValues masked_metrics(const torch::Tensor& pred, const torch::Tensor& ref,
                            const torch::Tensor& mask, double data_range) {
  auto x = as_image(pred), y = as_image(ref), m = as_image(mask);
  require_same_shape(x, y);
  require_same_shape(x, m);
  auto nz = torch::nonzero(m > 0.5);
  if (nz.size(0) == 0) throw std::invalid_argument("masked_metrics: empty mask");
  auto rows = nz.select(1, 0), cols = nz.select(1, 1);
  std::int64_t r0 = rows.min().item<std::int64_t>(), r1 = rows.max().item<std::int64_t>() + 1;
  std::int64_t c0 = cols.min().item<std::int64_t>(), c1 = cols.max().item<std::int64_t>() + 1;
  auto grow = [](std::int64_t& lo, std::int64_t& hi, std::int64_t n) {
    const auto target = std::min(kSsimWindow, n);
    if (hi - lo >= target) return;
    lo = std::max<std::int64_t>(0, lo - (target - (hi - lo)) / 2);
    hi = lo + target;
    if (hi > n) {
      hi = n;
      lo = n - target;
    }
  };
  grow(r0, r1, x.size(0));
  grow(c0, c1, x.size(1));
  using torch::indexing::Slice;
  auto keep = (m > 0.5).to(torch::kFloat64).index({Slice(r0, r1), Slice(c0, c1)});
  auto xb = x.index({Slice(r0, r1), Slice(c0, c1)}) * keep;
  auto yb = y.index({Slice(r0, r1), Slice(c0, c1)}) * keep;
  return global_metrics(xb, yb, data_range);
}

Summary MetricReport::ssim() const { return summarize(per_case, &MetricValues::ssim); }
Summary MetricReport::psnr() const { return summarize(per_case, &MetricValues::psnr); }
Summary MetricReport::nmse() const { return summarize(per_case, &MetricValues::nmse); }
Summary MetricReport::nhfen() const { return summarize(per_case, &MetricValues::nhfen); }

std::string format_summary(const Summary& s, int decimals) {
  std::ostringstream os;
  os << std::fixed << std::setprecision(decimals) << s.mean << " ± " << s.stddev;
  return os.str();
}

void write_report_csv(const std::filesystem::path& path,
                      const std::vector<MetricReport>& reports) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << "case_id,scope,ssim,psnr,nmse,nhfen\n";
  os << std::setprecision(10);
  for (const auto& r : reports) {
    for (const auto& c : r.per_case) {
      os << c.case_id << ',' << to_string(r.scope) << ',' << c.values.ssim << ',' << c.values.psnr
         << ',' << c.values.nmse << ',' << c.values.nhfen << '\n';
    }
  }
  for (const auto& r : reports) {
    os << "summary," << to_string(r.scope) << ',' << format_summary(r.ssim()) << ','
       << format_summary(r.psnr()) << ',' << format_summary(r.nmse()) << ','
       << format_summary(r.nhfen()) << '\n';
  }
}

std::string report_table(const std::vector<MetricReport>& reports) {
  std::ostringstream os;
  os << "| Scope | SSIM | PSNR | NMSE | nHFEN | Cases |\n|---|---|---|---|---|---|\n";
  for (const auto& r : reports) {
    os << "| " << (r.scope == Scope::global ? "Global" : "Tumor") << " | "
       << format_summary(r.ssim()) << " | " << format_summary(r.psnr()) << " | "
       << format_summary(r.nmse()) << " | " << format_summary(r.nhfen()) << " | "
       << r.per_case.size() << " |\n";
  }
  return os.str();
}

}  // namespace cesynth::metrics
