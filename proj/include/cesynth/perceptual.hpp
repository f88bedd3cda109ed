#pragma once

// Frozen multi-scale feature pyramid for the perceptual loss: five stages of
// 3x3 convolutions with ReLU, the first at full resolution and every later
// stage opening with a stride-2 convolution.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <torch/torch.h>

namespace cesynth {

/// Maps a (B, 1, H, W) image to its feature levels, shallow to deep.
using FeatureFn = std::function<std::vector<torch::Tensor>(const torch::Tensor&)>;

struct ExtractorSpec {
  enum class Kind { seeded, pretrained } kind = Kind::seeded;
  std::uint64_t seed = 20240901;
  std::vector<std::int64_t> widths{16, 32, 64, 128, 128};
  std::filesystem::path weights_path;  // only for Kind::pretrained
};

class FeatureExtractorImpl : public torch::nn::Module {
 public:
  static constexpr std::int64_t kStages = 5;
  static constexpr std::int64_t kInputChannels = 3;

  explicit FeatureExtractorImpl(std::vector<std::int64_t> widths);

  /// Five levels at H, H/2, H/4, H/8, H/16.
  std::vector<torch::Tensor> forward(const torch::Tensor& image);

  const std::vector<std::int64_t>& widths() const { return widths_; }
  FeatureFn as_feature_fn();

  std::vector<torch::nn::Sequential> stages;

 private:
  std::vector<std::int64_t> widths_;
};
TORCH_MODULE(FeatureExtractor);

/// Builds a frozen extractor: He-normal weights from `spec.seed` for the
/// seeded kind, or weights read from a checkpoint container. Parameters never
/// require gradients.
FeatureExtractor make_extractor(const ExtractorSpec& spec);

/// Writes an extractor in the container format accepted by Kind::pretrained.
void save_extractor(const std::filesystem::path& path, FeatureExtractorImpl& extractor);

}  // namespace cesynth
