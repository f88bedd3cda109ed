#pragma once

// U-shaped x0-predicting denoiser: convolutional encoder/decoder with skip
// connections, spatial self-attention at selected scales, a shifted-window
// transformer bottleneck and a two-channel (mu, log-variance) head.

#include <cstdint>
#include <optional>
#include <set>
#include <utility>
#include <vector>

#include "json.hpp"
#include <torch/torch.h>

#include "cesynth/diffusion.hpp"

namespace cesynth {

struct NetworkConfig {
  std::int64_t in_channels = 4;  // 1 noisy + 3 condition channels
  std::int64_t base_width = 32;
  std::vector<std::int64_t> channel_multipliers{1, 2, 2, 4};
  std::set<std::int64_t> attention_scales{1, 2};
  std::int64_t bottleneck_layers = 2;
  std::int64_t window_size = 4;
  std::int64_t num_heads = 4;
  std::int64_t embed_dim = 128;
  // x_t enters the network as x_t / sqrt(sigma^2 + sigma_data^2); 0 disables the scaling.
  double sigma_data = 0.5;

  std::int64_t num_scales() const { return static_cast<std::int64_t>(channel_multipliers.size()); }
  std::int64_t width(std::int64_t scale) const { return base_width * channel_multipliers.at(scale); }
  /// Throws std::invalid_argument naming the offending field.
  void validate() const;
  /// Throws unless (height, width) satisfy the divisibility constraints.
  void check_input_size(std::int64_t height, std::int64_t width) const;

  /// Same network with spatial attention and the transformer bottleneck removed.
  NetworkConfig without_attention() const;

  /// Desk-scale 16x16 configuration used for exhaustive gradient checks.
  static NetworkConfig tiny();
};

void to_json(nlohmann::json& j, const NetworkConfig& c);
void from_json(const nlohmann::json& j, NetworkConfig& c);

struct FeatureTaps {
  torch::Tensor bottleneck;     // after the transformer bottleneck
  torch::Tensor final_decoder;  // output of the last decoder stage
};

/// Raw sinusoidal features of log(sigma): pairs (sin, cos) at embed_dim / 2
/// geometric frequencies. sigma: (B,) -> (B, embed_dim).
torch::Tensor sinusoidal_features(const torch::Tensor& sigma, std::int64_t embed_dim);

class SigmaEmbeddingImpl : public torch::nn::Module {
 public:
  explicit SigmaEmbeddingImpl(std::int64_t embed_dim);
  torch::Tensor forward(const torch::Tensor& sigma);

  torch::nn::Linear fc1{nullptr}, fc2{nullptr};

 private:
  std::int64_t embed_dim_;
};
TORCH_MODULE(SigmaEmbedding);

/// Pre-activation residual block: two 3x3 convolutions with a per-channel
/// scale/shift from the sigma embedding in between.
class ConvBlockImpl : public torch::nn::Module {
 public:
  ConvBlockImpl(std::int64_t in_channels, std::int64_t out_channels, std::int64_t embed_dim);
  torch::Tensor forward(const torch::Tensor& h, const torch::Tensor& emb);

  torch::nn::GroupNorm norm1{nullptr}, norm2{nullptr};
  torch::nn::Conv2d conv1{nullptr}, conv2{nullptr};
  torch::nn::Linear emb_proj{nullptr};
  torch::nn::Conv2d skip{nullptr};  // null when channel counts match

 private:
  std::int64_t in_channels_, out_channels_;
};
TORCH_MODULE(ConvBlock);

/// Full-resolution self-attention over all H*W positions:
/// A = softmax(Q^T K / sqrt(C)), h_hat = h + W_0(V A^T).
class SpatialAttentionImpl : public torch::nn::Module {
 public:
  explicit SpatialAttentionImpl(std::int64_t channels);
  torch::Tensor forward(const torch::Tensor& h);
  /// (B, N, N) attention probabilities, rows indexed by query position.
  torch::Tensor attention_map(const torch::Tensor& h);

  torch::nn::Conv2d query{nullptr}, key{nullptr}, value{nullptr}, out{nullptr};

 private:
  std::int64_t channels_;
};
TORCH_MODULE(SpatialAttention);

struct WindowLayout {
  std::int64_t batch = 0, channels = 0, height = 0, width = 0;
  std::int64_t window_size = 0, shift = 0;

  std::int64_t windows_per_image() const {
    return (height / window_size) * (width / window_size);
  }
};

struct WindowedFeatures {
  torch::Tensor tokens;  // (batch * windows_per_image, window_size^2, channels)
  WindowLayout layout;
};

/// Cyclically shifts (B, C, H, W) by (-shift, -shift) and splits it into
/// non-overlapping windows, row-major over windows and over tokens.
WindowedFeatures window_partition(const torch::Tensor& z, std::int64_t window_size,
                                  std::int64_t shift);
torch::Tensor window_reverse(const torch::Tensor& tokens, const WindowLayout& layout);

/// Additive mask (windows_per_image, N, N) with -inf between tokens that came
/// from different regions of the unshifted map; undefined tensor when shift == 0.
torch::Tensor shifted_window_mask(std::int64_t height, std::int64_t width,
                                  std::int64_t window_size, std::int64_t shift,
                                  const torch::TensorOptions& options);

/// One transformer layer applied independently to every window:
/// x + proj(MHSA(LN(x))), then x + MLP(LN(x)).
class WindowBlockImpl : public torch::nn::Module {
 public:
  WindowBlockImpl(std::int64_t dim, std::int64_t num_heads, std::int64_t window_size,
                  std::int64_t shift);

  torch::Tensor forward(const torch::Tensor& z);
  /// The block on already-partitioned tokens; `mask` may be undefined.
  torch::Tensor forward_windows(const torch::Tensor& tokens, const torch::Tensor& mask);
  /// (windows, heads, N, N) softmax probabilities for partitioned tokens.
  torch::Tensor attention_weights(const torch::Tensor& tokens, const torch::Tensor& mask);

  std::int64_t shift() const { return shift_; }

  torch::nn::LayerNorm norm1{nullptr}, norm2{nullptr};
  torch::nn::Linear qkv{nullptr}, proj{nullptr};
  torch::nn::Linear fc1{nullptr}, fc2{nullptr};

 private:
  torch::Tensor attend(const torch::Tensor& normed, const torch::Tensor& mask, bool probs_only);

  std::int64_t dim_, num_heads_, window_size_, shift_;
};
TORCH_MODULE(WindowBlock);

/// Alternating W-MSA (even layers) / SW-MSA (odd layers) stack with the sigma
/// embedding added to every token first.
class BottleneckImpl : public torch::nn::Module {
 public:
  BottleneckImpl(std::int64_t dim, std::int64_t embed_dim, std::int64_t layers,
                 std::int64_t window_size, std::int64_t num_heads);
  torch::Tensor forward(const torch::Tensor& z, const torch::Tensor& emb);
  /// (B, dim, 1, 1) term added to every token before the first layer.
  torch::Tensor embedding_term(const torch::Tensor& emb);

  torch::nn::Linear emb_proj{nullptr};
  std::vector<WindowBlock> blocks;
};
TORCH_MODULE(Bottleneck);

class DenoiserNetImpl : public torch::nn::Module {
 public:
  explicit DenoiserNetImpl(NetworkConfig config);

  /// x_t: (B,1,H,W); condition: (B,C,H,W); sigma: (B,) noise levels.
  std::pair<ModelOutput, FeatureTaps> forward(const torch::Tensor& x_t,
                                              const torch::Tensor& condition,
                                              const torch::Tensor& sigma);

  const NetworkConfig& config() const { return config_; }
  std::int64_t parameter_count() const;

  /// Wraps the network as a sampler denoiser (no taps, no gradient).
  DenoiserFn as_denoiser();

  torch::nn::Conv2d stem{nullptr};
  SigmaEmbedding embedding{nullptr};
  std::vector<ConvBlock> enc_blocks;
  std::vector<std::optional<SpatialAttention>> enc_attn;
  std::vector<torch::nn::Conv2d> down;
  ConvBlock mid_block{nullptr};
  Bottleneck bottleneck{nullptr};
  std::vector<torch::nn::Conv2d> up;
  std::vector<ConvBlock> dec_blocks;
  std::vector<std::optional<SpatialAttention>> dec_attn;
  torch::nn::GroupNorm head_norm{nullptr};
  torch::nn::Conv2d head{nullptr};

 private:
  NetworkConfig config_;
};
TORCH_MODULE(DenoiserNet);

/// Largest group count <= 8 that divides `channels`.
std::int64_t group_count(std::int64_t channels);

}  // namespace cesynth
