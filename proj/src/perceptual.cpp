#include "cesynth/perceptual.hpp"

#include <cmath>
#include <stdexcept>

#include "cesynth/rng.hpp"
#include "cesynth/tensor_io.hpp"

namespace cesynth {

namespace nn = torch::nn;

FeatureExtractorImpl::FeatureExtractorImpl(std::vector<std::int64_t> widths)
    : widths_(std::move(widths)) {
  if (static_cast<std::int64_t>(widths_.size()) != kStages) {
    throw std::invalid_argument("feature extractor: expected " + std::to_string(kStages) +
                                " stage widths, got " + std::to_string(widths_.size()));
  }
  std::int64_t prev = kInputChannels;
  for (std::int64_t s = 0; s < kStages; ++s) {
    const auto c = widths_[s];
    nn::Sequential stage(
        nn::Conv2d(nn::Conv2dOptions(prev, c, 3).stride(s == 0 ? 1 : 2).padding(1)), nn::ReLU(),
        nn::Conv2d(nn::Conv2dOptions(c, c, 3).padding(1)), nn::ReLU());
    stages.push_back(register_module("stage" + std::to_string(s), stage));
    prev = c;
  }
}

std::vector<torch::Tensor> FeatureExtractorImpl::forward(const torch::Tensor& image) {
  if (image.dim() != 4 || image.size(1) != 1) {
    throw std::invalid_argument("feature extractor: expected (B, 1, H, W), got " +
                                c10::str(image.sizes()));
  }
  auto h = (image - 0.5).expand({image.size(0), kInputChannels, image.size(2), image.size(3)});
  std::vector<torch::Tensor> levels;
  for (auto& stage : stages) {
    h = stage->forward(h);
    levels.push_back(h);
  }
  return levels;
}

FeatureFn FeatureExtractorImpl::as_feature_fn() {
  return [this](const torch::Tensor& image) { return forward(image); };
}

FeatureExtractor make_extractor(const ExtractorSpec& spec) {
  torch::NoGradGuard no_grad;
  FeatureExtractor ex{nullptr};
  if (spec.kind == ExtractorSpec::Kind::seeded) {
    ex = FeatureExtractor(spec.widths);
    Rng rng(spec.seed);
    for (auto& item : ex->named_parameters(true)) {
      auto& p = item.value();
      if (p.dim() == 4) {
        const double fan_in = static_cast<double>(p.size(1) * p.size(2) * p.size(3));
        p.copy_(rng.normal(p.sizes(), p.options()) * std::sqrt(2.0 / fan_in));
      } else {
        p.zero_();
      }
    }
  } else {
    auto c = read_container(spec.weights_path);
    if (!c.meta.contains("widths")) {
      throw std::runtime_error("extractor weights: header lacks 'widths': " +
                               spec.weights_path.string());
    }
    auto widths = c.meta.at("widths").get<std::vector<std::int64_t>>();
    if (static_cast<std::int64_t>(widths.size()) != FeatureExtractorImpl::kStages) {
      throw std::runtime_error("extractor weights: expected " +
                               std::to_string(FeatureExtractorImpl::kStages) + " stages, file has " +
                               std::to_string(widths.size()));
    }
    ex = FeatureExtractor(widths);
    load_parameters(*ex, c, "extractor.");
  }
  for (auto& p : ex->parameters()) p.set_requires_grad(false);
  ex->eval();
  return ex;
}

void save_extractor(const std::filesystem::path& path, FeatureExtractorImpl& extractor) {
  Container c;
  c.meta["kind"] = "feature_extractor";
  c.meta["widths"] = extractor.widths();
  append_parameters(c, extractor, "extractor.");
  write_container(path, c);
}

}  // namespace cesynth
