#pragma once

// Direct double-precision loop implementations of the image metrics, written
// independently of the tensor code they check.

#include <cmath>
#include <cstdint>
#include <vector>

namespace reference {

struct Image {
  std::int64_t h = 0, w = 0;
  std::vector<double> px;

  double at(std::int64_t y, std::int64_t x) const { return px[y * w + x]; }
};

inline double mse(const Image& a, const Image& b) {
  double acc = 0;
  for (std::size_t i = 0; i < a.px.size(); ++i) acc += (a.px[i] - b.px[i]) * (a.px[i] - b.px[i]);
  return acc / static_cast<double>(a.px.size());
}

inline double psnr(const Image& a, const Image& b, double range = 1.0) {
  const double m = mse(a, b);
  if (m == 0) return 100.0;
  return std::min(100.0, 10 * std::log10(range * range / m));
}

inline double nmse(const Image& pred, const Image& ref) {
  double num = 0, den = 0;
  for (std::size_t i = 0; i < ref.px.size(); ++i) {
    num += (pred.px[i] - ref.px[i]) * (pred.px[i] - ref.px[i]);
    den += ref.px[i] * ref.px[i];
  }
  return num / den;
}

inline double ssim(const Image& a, const Image& b, double range = 1.0) {
  const int k = 7;
  const double sigma = 1.5;
  double g[7][7], total = 0;
  for (int i = 0; i < k; ++i) {
    for (int j = 0; j < k; ++j) {
      const double dy = i - 3, dx = j - 3;
      g[i][j] = std::exp(-(dx * dx + dy * dy) / (2 * sigma * sigma));
      total += g[i][j];
    }
  }
  const double c1 = (0.01 * range) * (0.01 * range), c2 = (0.03 * range) * (0.03 * range);
  double sum = 0;
  std::int64_t count = 0;
  for (std::int64_t y = 0; y + k <= a.h; ++y) {
    for (std::int64_t x = 0; x + k <= a.w; ++x) {
      double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
      for (int i = 0; i < k; ++i) {
        for (int j = 0; j < k; ++j) {
          const double wgt = g[i][j] / total;
          const double va = a.at(y + i, x + j), vb = b.at(y + i, x + j);
          ma += wgt * va;
          mb += wgt * vb;
          saa += wgt * va * va;
          sbb += wgt * vb * vb;
          sab += wgt * va * vb;
        }
      }
      const double var_a = saa - ma * ma, var_b = sbb - mb * mb, cov = sab - ma * mb;
      sum += ((2 * ma * mb + c1) * (2 * cov + c2)) / ((ma * ma + mb * mb + c1) * (var_a + var_b + c2));
      ++count;
    }
  }
  return sum / static_cast<double>(count);
}

// Mirror with the edge sample repeated: ... b a | a b c ... c b | b ...
inline std::int64_t mirror(std::int64_t i, std::int64_t n) {
  while (i < 0 || i >= n) {
    if (i < 0) i = -i - 1;
    if (i >= n) i = 2 * n - i - 1;
  }
  return i;
}

inline std::vector<double> log_filter(const Image& img) {
  const int k = 15, r = 7;
  const double s2 = 1.5 * 1.5;
  double kern[15][15], mean = 0;
  for (int i = 0; i < k; ++i) {
    for (int j = 0; j < k; ++j) {
      const double rr = double(i - r) * (i - r) + double(j - r) * (j - r);
      kern[i][j] = (rr - 2 * s2) / (s2 * s2) * std::exp(-rr / (2 * s2));
      mean += kern[i][j];
    }
  }
  mean /= k * k;
  std::vector<double> out(img.px.size(), 0.0);
  for (std::int64_t y = 0; y < img.h; ++y) {
    for (std::int64_t x = 0; x < img.w; ++x) {
      double acc = 0;
      for (int i = 0; i < k; ++i) {
        for (int j = 0; j < k; ++j) {
          acc += (kern[i][j] - mean) * img.at(mirror(y + i - r, img.h), mirror(x + j - r, img.w));
        }
      }
      out[y * img.w + x] = acc;
    }
  }
  return out;
}

inline double nhfen(const Image& pred, const Image& ref) {
  const auto lp = log_filter(pred), lr = log_filter(ref);
  double num = 0, den = 0;
  for (std::size_t i = 0; i < lr.size(); ++i) {
    num += (lp[i] - lr[i]) * (lp[i] - lr[i]);
    den += lr[i] * lr[i];
  }
  return std::sqrt(num / den);
}

}  // namespace reference
