#include "cesynth/phantom.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <sstream>
#include <stdexcept>

#include "cesynth/tensor_io.hpp"

namespace cesynth {

namespace {

std::uint64_t splitmix64(std::uint64_t x) {
  x += 0x9E3779B97F4A7C15ull;
  x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ull;
  x = (x ^ (x >> 27)) * 0x94D049BB133111EBull;
  return x ^ (x >> 31);
}

// Small deterministic generator; independent of the standard library's
// distribution implementations so phantoms are identical across toolchains.
class CaseRng {
 public:
  explicit CaseRng(std::uint64_t seed) : state_(splitmix64(seed)) {}
  double uniform() {
    state_ = splitmix64(state_);
    return static_cast<double>(state_ >> 11) * 0x1.0p-53;
  }
  double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }
  std::int64_t integer(std::int64_t lo, std::int64_t hi) {
    return lo + static_cast<std::int64_t>(uniform() * static_cast<double>(hi - lo + 1));
  }

 private:
  std::uint64_t state_;
};

using Grid = std::vector<double>;

// Band-limited field: a sum of plane waves with 1.5-5 cycles per image,
// rescaled to [0, 1].
Grid smooth_field(CaseRng& rng, std::int64_t n, int waves = 8) {
  struct Wave {
    double fx, fy, phase, amp;
  };
  std::vector<Wave> ws;
  for (int k = 0; k < waves; ++k) {
    const double f = rng.uniform(1.5, 5.0);
    const double dir = rng.uniform(0.0, 2.0 * std::numbers::pi);
    ws.push_back({f * std::cos(dir), f * std::sin(dir), rng.uniform(0.0, 2.0 * std::numbers::pi),
                  rng.uniform(0.5, 1.0)});
  }
  Grid g(static_cast<std::size_t>(n * n));
  for (std::int64_t y = 0; y < n; ++y) {
    for (std::int64_t x = 0; x < n; ++x) {
      const double u = (static_cast<double>(x) + 0.5) / static_cast<double>(n);
      const double v = (static_cast<double>(y) + 0.5) / static_cast<double>(n);
      double acc = 0.0;
      for (const auto& w : ws) {
        acc += w.amp * std::cos(2.0 * std::numbers::pi * (w.fx * u + w.fy * v) + w.phase);
      }
      g[static_cast<std::size_t>(y * n + x)] = acc;
    }
  }
  const auto [lo, hi] = std::minmax_element(g.begin(), g.end());
  const double a = *lo, range = *hi - *lo;
  for (auto& e : g) e = range > 0 ? (e - a) / range : 0.5;
  return g;
}

// Separable Gaussian blur with half-sample symmetric boundary.
Grid blur(const Grid& in, std::int64_t n, double sigma) {
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(2 * radius + 1);
  double ksum = 0.0;
  for (int i = -radius; i <= radius; ++i) {
    k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
    ksum += k[i + radius];
  }
  for (auto& e : k) e /= ksum;
  auto reflect = [n](std::int64_t i) {
    const auto p = 2 * n;
    auto j = ((i % p) + p) % p;
    return j < n ? j : p - 1 - j;
  };
  Grid tmp(in.size()), out(in.size());
  for (std::int64_t y = 0; y < n; ++y) {
    for (std::int64_t x = 0; x < n; ++x) {
      double acc = 0.0;
      for (int i = -radius; i <= radius; ++i) acc += k[i + radius] * in[y * n + reflect(x + i)];
      tmp[y * n + x] = acc;
    }
  }
  for (std::int64_t y = 0; y < n; ++y) {
    for (std::int64_t x = 0; x < n; ++x) {
      double acc = 0.0;
      for (int i = -radius; i <= radius; ++i) acc += k[i + radius] * tmp[reflect(y + i) * n + x];
      out[y * n + x] = acc;
    }
  }
  return out;
}

torch::Tensor to_tensor(const Grid& g, std::int64_t n) {
  auto t = torch::empty({1, 1, n, n}, torch::kFloat32);
  auto* p = t.data_ptr<float>();
  for (std::size_t i = 0; i < g.size(); ++i) p[i] = static_cast<float>(g[i]);
  return t;
}

}  // namespace

torch::Tensor PhantomCase::condition() const { return torch::cat({t1_pre, dwi_b0, dwi_b800}, 1); }

PhantomCase generate_case(std::uint64_t seed, std::int64_t size, std::int64_t case_id) {
  if (size <= 0 || size % 16 != 0) {
    throw std::invalid_argument("generate_case: size " + std::to_string(size) +
                                " is not a positive multiple of 16");
  }
  const auto n = size;
  CaseRng rng(seed);

  // geometry
  const double wall = rng.uniform(0.68, 0.76);
  const double cu = rng.uniform(0.44, 0.56);
  const double ax = rng.uniform(0.28, 0.40);
  const double ay = std::min(rng.uniform(0.45, 0.62), wall - 0.06);
  const double muscle = rng.uniform(0.08, 0.14);

  const auto parenchyma = smooth_field(rng, n);
  const auto heterogeneity = smooth_field(rng, n);

  struct Tumor {
    double cu, cv, ru, rv, cos_t, sin_t;
  };
  std::vector<Tumor> tumors;
  const auto num_tumors = rng.integer(0, 2);
  for (std::int64_t k = 0; k < num_tumors; ++k) {
    double u = 0, v = 0;
    for (int attempt = 0; attempt < 1000; ++attempt) {
      u = rng.uniform(cu - ax, cu + ax);
      v = rng.uniform(wall - ay, wall);
      const double du = (u - cu) / (0.7 * ax), dv = (v - wall) / (0.7 * ay);
      if (du * du + dv * dv <= 1.0 && v < wall - 0.06) break;
    }
    const double th = rng.uniform(0.0, std::numbers::pi);
    tumors.push_back({u, v, rng.uniform(0.04, 0.08), rng.uniform(0.04, 0.08), std::cos(th),
                      std::sin(th)});
  }

  const auto npx = static_cast<std::size_t>(n * n);
  Grid t1(npx), b0(npx), atten(npx), bg(npx), breast(npx), tumor(npx);
  for (std::int64_t y = 0; y < n; ++y) {
    for (std::int64_t x = 0; x < n; ++x) {
      const auto i = static_cast<std::size_t>(y * n + x);
      const double u = (static_cast<double>(x) + 0.5) / static_cast<double>(n);
      const double v = (static_cast<double>(y) + 0.5) / static_cast<double>(n);
      const double f = parenchyma[i];
      const double du = (u - cu) / ax, dv = (v - wall) / ay;
      const bool in_breast = v < wall && du * du + dv * dv <= 1.0;
      bool in_tumor = false;
      if (in_breast) {
        for (const auto& t : tumors) {
          const double pu = (u - t.cu) * t.cos_t + (v - t.cv) * t.sin_t;
          const double pv = -(u - t.cu) * t.sin_t + (v - t.cv) * t.cos_t;
          if ((pu / t.ru) * (pu / t.ru) + (pv / t.rv) * (pv / t.rv) <= 1.0) in_tumor = true;
        }
      }
      if (in_tumor) {
        tumor[i] = 1.0;
        t1[i] = 0.35 + 0.05 * f;
        b0[i] = 0.70;
        atten[i] = 0.60 + 0.30 * heterogeneity[i];
      } else if (in_breast) {
        breast[i] = 1.0;
        t1[i] = 0.50 + 0.30 * f;
        b0[i] = 0.45 + 0.20 * f;
        atten[i] = 0.35 + 0.10 * f;
      } else {
        bg[i] = 1.0;
        if (v >= wall && v < wall + muscle) {  // pectoral muscle band
          t1[i] = 0.30 + 0.05 * f;
          b0[i] = 0.25;
        } else if (v >= wall) {  // thoracic cavity
          t1[i] = 0.12;
          b0[i] = 0.15;
        }
        atten[i] = 0.35;
      }
    }
  }

  Grid b800(npx);
  for (std::size_t i = 0; i < npx; ++i) b800[i] = b0[i] * atten[i];
  const auto dwi0 = blur(b0, n, 0.8);
  const auto dwi800 = blur(b800, n, 0.8);

  Grid post(npx);
  for (std::size_t i = 0; i < npx; ++i) {
    const double ratio = dwi800[i] / (dwi0[i] + 0.05);
    const double vasc = parenchyma[i];
    const double value = t1[i] + 0.15 * breast[i] * vasc + 0.6 * tumor[i] * (0.5 + 0.5 * ratio);
    post[i] = std::clamp(value, 0.0, 1.0);
  }

  PhantomCase c;
  c.case_id = case_id;
  c.seed = seed;
  c.num_tumors = num_tumors;
  c.t1_pre = to_tensor(t1, n);
  c.dwi_b0 = to_tensor(dwi0, n);
  c.dwi_b800 = to_tensor(dwi800, n);
  c.t1_post = to_tensor(post, n);
  c.background_mask = to_tensor(bg, n);
  c.breast_mask = to_tensor(breast, n);
  c.tumor_mask = to_tensor(tumor, n);
  // tumors that fell entirely outside the breast leave no trace
  if (c.tumor_mask.sum().item<float>() == 0.0f) c.num_tumors = 0;
  return c;
}

std::string to_string(Split split) {
  switch (split) {
    case Split::train:
      return "train";
    case Split::val:
      return "val";
    case Split::test:
      return "test";
  }
  return "?";
}

Split split_from_string(const std::string& name) {
  if (name == "train") return Split::train;
  if (name == "val") return Split::val;
  if (name == "test") return Split::test;
  throw std::invalid_argument("unknown split '" + name + "' (expected train, val or test)");
}

std::vector<std::int64_t> DatasetManifest::ids(Split split) const {
  std::vector<std::int64_t> out;
  for (const auto& e : cases) {
    if (e.split == split) out.push_back(e.id);
  }
  return out;
}

nlohmann::json DatasetManifest::to_json() const {
  nlohmann::json j;
  j["format"] = "cesynth-dataset";
  j["version"] = 1;
  j["size"] = size;
  j["base_seed"] = base_seed;
  j["fractions"] = {{"train", fractions.train}, {"val", fractions.val}, {"test", fractions.test}};
  j["channel_order"] = {"t1_pre", "dwi_b0", "dwi_b800"};
  j["cases"] = nlohmann::json::array();
  for (const auto& e : cases) {
    j["cases"].push_back({{"id", e.id},
                          {"split", to_string(e.split)},
                          {"seed", e.seed},
                          {"num_tumors", e.num_tumors},
                          {"dir", e.dir},
                          {"files", kCaseFiles}});
  }
  for (auto s : {Split::train, Split::val, Split::test}) j["splits"][to_string(s)] = ids(s);
  return j;
}

DatasetManifest DatasetManifest::from_json(const nlohmann::json& j) {
  if (j.value("format", "") != "cesynth-dataset") {
    throw std::runtime_error("manifest: not a cesynth dataset manifest");
  }
  DatasetManifest m;
  m.size = j.at("size").get<std::int64_t>();
  m.base_seed = j.at("base_seed").get<std::uint64_t>();
  const auto& f = j.at("fractions");
  m.fractions = {f.at("train").get<double>(), f.at("val").get<double>(),
                 f.at("test").get<double>()};
  for (const auto& c : j.at("cases")) {
    m.cases.push_back({c.at("id").get<std::int64_t>(),
                       split_from_string(c.at("split").get<std::string>()),
                       c.at("seed").get<std::uint64_t>(), c.value("num_tumors", std::int64_t{0}),
                       c.at("dir").get<std::string>()});
  }
  return m;
}

std::uint64_t case_seed(std::uint64_t base_seed, std::int64_t index) {
  return splitmix64(base_seed ^ splitmix64(static_cast<std::uint64_t>(index) + 1));
}

DatasetManifest plan_dataset(std::int64_t num_cases, std::int64_t size,
                             const SplitFractions& fr, std::uint64_t base_seed) {
  if (num_cases < 10) throw std::invalid_argument("generate_dataset: num_cases must be >= 10");
  if (fr.train < 0 || fr.val < 0 || fr.test < 0 ||
      std::abs(fr.train + fr.val + fr.test - 1.0) > 1e-9) {
    std::ostringstream msg;
    msg << "split fractions must be nonnegative and sum to 1 (got " << fr.train << ", " << fr.val
        << ", " << fr.test << ")";
    throw std::invalid_argument(msg.str());
  }
  if (size <= 0 || size % 16 != 0) {
    throw std::invalid_argument("generate_dataset: size must be a positive multiple of 16");
  }
  const auto n = num_cases;
  const auto n_train = static_cast<std::int64_t>(std::floor(fr.train * n + 0.5));
  const auto n_val = std::min(n - n_train, static_cast<std::int64_t>(std::floor(fr.val * n + 0.5)));

  // seeded Fisher-Yates over case indices
  std::vector<std::int64_t> order(n);
  for (std::int64_t i = 0; i < n; ++i) order[i] = i;
  CaseRng rng(base_seed ^ 0x5EEDF00Dull);
  for (std::int64_t i = n - 1; i > 0; --i) std::swap(order[i], order[rng.integer(0, i)]);

  DatasetManifest m;
  m.size = size;
  m.base_seed = base_seed;
  m.fractions = fr;
  m.cases.resize(n);
  for (std::int64_t i = 0; i < n; ++i) {
    auto& e = m.cases[i];
    e.id = i;
    e.seed = case_seed(base_seed, i);
    std::ostringstream dir;
    dir << "case_" << std::setw(4) << std::setfill('0') << i;
    e.dir = dir.str();
  }
  for (std::int64_t r = 0; r < n; ++r) {
    auto& e = m.cases[order[r]];
    e.split = r < n_train ? Split::train : (r < n_train + n_val ? Split::val : Split::test);
  }
  return m;
}

DatasetManifest generate_dataset(std::int64_t num_cases, std::int64_t size,
                                 const SplitFractions& fractions, std::uint64_t base_seed,
                                 const std::filesystem::path& out_dir, bool previews) {
  auto m = plan_dataset(num_cases, size, fractions, base_seed);
  std::filesystem::create_directories(out_dir);
  for (auto& e : m.cases) {
    const auto c = generate_case(e.seed, size, e.id);
    e.num_tumors = c.num_tumors;
    const auto dir = out_dir / e.dir;
    const std::array<const torch::Tensor*, 7> images = {&c.t1_pre,          &c.dwi_b0,
                                                        &c.dwi_b800,        &c.t1_post,
                                                        &c.background_mask, &c.breast_mask,
                                                        &c.tumor_mask};
    for (std::size_t k = 0; k < images.size(); ++k) {
      write_tensor_file(dir / kCaseFiles[k], *images[k]);
      if (previews) {
        auto png = std::filesystem::path(kCaseFiles[k]).replace_extension(".png");
        write_png_gray(dir / "preview" / png, *images[k]);
      }
    }
  }
  std::ofstream os(out_dir / "manifest.json");
  if (!os) throw std::runtime_error("cannot write manifest in " + out_dir.string());
  os << m.to_json().dump(2) << '\n';
  return m;
}

DatasetManifest read_manifest(const std::filesystem::path& dataset_dir) {
  const auto path = dataset_dir / "manifest.json";
  std::ifstream is(path);
  if (!is) throw std::runtime_error("dataset manifest not found: " + path.string());
  return DatasetManifest::from_json(nlohmann::json::parse(is));
}

PhantomCase load_case(const std::filesystem::path& dataset_dir,
                      const DatasetManifest::Entry& entry) {
  const auto dir = dataset_dir / entry.dir;
  auto read = [&](std::size_t k) {
    auto t = read_tensor_file(dir / kCaseFiles[k]);
    return t.dim() == 4 ? t : t.view({1, 1, t.size(-2), t.size(-1)});
  };
  PhantomCase c;
  c.case_id = entry.id;
  c.seed = entry.seed;
  c.num_tumors = entry.num_tumors;
  c.t1_pre = read(0);
  c.dwi_b0 = read(1);
  c.dwi_b800 = read(2);
  c.t1_post = read(3);
  c.background_mask = read(4);
  c.breast_mask = read(5);
  c.tumor_mask = read(6);
  return c;
}

std::vector<PhantomCase> load_split(const std::filesystem::path& dataset_dir, Split split) {
  const auto m = read_manifest(dataset_dir);
  std::vector<PhantomCase> out;
  for (const auto& e : m.cases) {
    if (e.split == split) out.push_back(load_case(dataset_dir, e));
  }
  return out;
}

Batch collate(const std::vector<const PhantomCase*>& cases) {
  if (cases.empty()) throw std::invalid_argument("collate: empty batch");
  std::vector<torch::Tensor> cond, target, bg, breast, tumor;
  Batch b;
  for (const auto* c : cases) {
    cond.push_back(c->condition());
    target.push_back(c->t1_post);
    bg.push_back(c->background_mask);
    breast.push_back(c->breast_mask);
    tumor.push_back(c->tumor_mask);
    b.case_ids.push_back(c->case_id);
  }
  b.condition = torch::cat(cond, 0);
  b.target = torch::cat(target, 0);
  b.background_mask = torch::cat(bg, 0);
  b.breast_mask = torch::cat(breast, 0);
  b.tumor_mask = torch::cat(tumor, 0);
  return b;
}

Batch collate(std::span<const PhantomCase> cases) {
  std::vector<const PhantomCase*> ptrs;
  for (const auto& c : cases) ptrs.push_back(&c);
  return collate(ptrs);
}

}  // namespace cesynth
