#include "cesynth/network.hpp"

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>

namespace cesynth {

namespace nn = torch::nn;

std::int64_t group_count(std::int64_t channels) {
  for (std::int64_t g = 8; g > 1; --g) {
    if (channels % g == 0) return g;
  }
  return 1;
}

// ---------------------------------------------------------------------------
// NetworkConfig

void NetworkConfig::validate() const {
  auto fail = [](const std::string& what) {
    throw std::invalid_argument("network config: " + what);
  };
  if (in_channels < 2) fail("in_channels must be >= 2 (noisy image + condition)");
  if (base_width < 1) fail("base_width must be positive");
  if (channel_multipliers.size() < 2) fail("channel_multipliers needs at least 2 scales");
  for (auto m : channel_multipliers) {
    if (m < 1) fail("channel_multipliers entries must be positive");
  }
  for (auto s : attention_scales) {
    if (s < 0 || s >= num_scales() - 1) {
      fail("attention_scales entry " + std::to_string(s) + " is not an encoder/decoder scale");
    }
  }
  if (bottleneck_layers < 0 || bottleneck_layers % 2 != 0) {
    fail("bottleneck_layers must be a nonnegative even number");
  }
  if (bottleneck_layers > 0) {
    if (window_size < 1) fail("window_size must be positive");
    if (num_heads < 1 || width(num_scales() - 1) % num_heads != 0) {
      fail("bottleneck width " + std::to_string(width(num_scales() - 1)) +
           " is not divisible by num_heads " + std::to_string(num_heads));
    }
  }
  if (embed_dim < 2 || embed_dim % 2 != 0) fail("embed_dim must be even and >= 2");
  if (sigma_data < 0.0) fail("sigma_data must be nonnegative");
}

void NetworkConfig::check_input_size(std::int64_t height, std::int64_t w) const {
  const std::int64_t factor = std::int64_t{1} << (num_scales() - 1);
  if (height % factor != 0) {
    throw std::invalid_argument("input height " + std::to_string(height) +
                                " not divisible by " + std::to_string(factor));
  }
  if (w % factor != 0) {
    throw std::invalid_argument("input width " + std::to_string(w) + " not divisible by " +
                                std::to_string(factor));
  }
  if (bottleneck_layers > 0) {
    const auto bh = height / factor, bw = w / factor;
    if (bh % window_size != 0 || bw % window_size != 0) {
      throw std::invalid_argument("bottleneck size " + std::to_string(bh) + "x" +
                                  std::to_string(bw) + " not divisible by window_size " +
                                  std::to_string(window_size));
    }
  }
}

NetworkConfig NetworkConfig::without_attention() const {
  NetworkConfig c = *this;
  c.attention_scales.clear();
  c.bottleneck_layers = 0;
  return c;
}

NetworkConfig NetworkConfig::tiny() {
  NetworkConfig c;
  c.base_width = 8;
  c.channel_multipliers = {1, 2, 2};
  c.attention_scales = {1};
  c.bottleneck_layers = 2;
  c.window_size = 2;
  c.num_heads = 2;
  c.embed_dim = 16;
  return c;
}

void to_json(nlohmann::json& j, const NetworkConfig& c) {
  j = nlohmann::json{{"in_channels", c.in_channels},
                     {"base_width", c.base_width},
                     {"channel_multipliers", c.channel_multipliers},
                     {"attention_scales", c.attention_scales},
                     {"bottleneck_layers", c.bottleneck_layers},
                     {"window_size", c.window_size},
                     {"num_heads", c.num_heads},
                     {"embed_dim", c.embed_dim},
                     {"sigma_data", c.sigma_data}};
}

void from_json(const nlohmann::json& j, NetworkConfig& c) {
  NetworkConfig d;
  c.in_channels = j.value("in_channels", d.in_channels);
  c.base_width = j.value("base_width", d.base_width);
  c.channel_multipliers = j.value("channel_multipliers", d.channel_multipliers);
  c.attention_scales = j.value("attention_scales", d.attention_scales);
  c.bottleneck_layers = j.value("bottleneck_layers", d.bottleneck_layers);
  c.window_size = j.value("window_size", d.window_size);
  c.num_heads = j.value("num_heads", d.num_heads);
  c.embed_dim = j.value("embed_dim", d.embed_dim);
  c.sigma_data = j.value("sigma_data", d.sigma_data);
}

// ---------------------------------------------------------------------------
// sigma embedding

torch::Tensor sinusoidal_features(const torch::Tensor& sigma, std::int64_t embed_dim) {
  if (embed_dim < 2 || embed_dim % 2 != 0) {
    throw std::invalid_argument("sigma embedding: embed_dim must be even and >= 2");
  }
  if (!(sigma > 0).all().item<bool>()) {
    throw std::invalid_argument("sigma embedding: sigma must be positive");
  }
  const auto half = embed_dim / 2;
  auto opts = sigma.options();
  // frequencies from 16 down to 1/16, log-spaced
  auto k = torch::arange(half, opts);
  auto freqs = half > 1 ? 16.0 * torch::exp(-std::log(256.0) * k / static_cast<double>(half - 1))
                        : torch::ones({1}, opts);
  auto phase = torch::log(sigma).unsqueeze(1) * freqs.unsqueeze(0);  // (B, half)
  return torch::stack({torch::sin(phase), torch::cos(phase)}, 2).reshape({sigma.size(0), embed_dim});
}

SigmaEmbeddingImpl::SigmaEmbeddingImpl(std::int64_t embed_dim) : embed_dim_(embed_dim) {
  fc1 = register_module("fc1", nn::Linear(embed_dim, embed_dim));
  fc2 = register_module("fc2", nn::Linear(embed_dim, embed_dim));
}

torch::Tensor SigmaEmbeddingImpl::forward(const torch::Tensor& sigma) {
  auto raw = sinusoidal_features(sigma, embed_dim_).to(fc1->weight.dtype());
  return fc2(torch::silu(fc1(raw)));
}

// ---------------------------------------------------------------------------
// conv block

ConvBlockImpl::ConvBlockImpl(std::int64_t in_channels, std::int64_t out_channels,
                             std::int64_t embed_dim)
    : in_channels_(in_channels), out_channels_(out_channels) {
  norm1 = register_module("norm1", nn::GroupNorm(group_count(in_channels), in_channels));
  conv1 = register_module(
      "conv1", nn::Conv2d(nn::Conv2dOptions(in_channels, out_channels, 3).padding(1)));
  emb_proj = register_module("emb_proj", nn::Linear(embed_dim, 2 * out_channels));
  norm2 = register_module("norm2", nn::GroupNorm(group_count(out_channels), out_channels));
  conv2 = register_module(
      "conv2", nn::Conv2d(nn::Conv2dOptions(out_channels, out_channels, 3).padding(1)));
  if (in_channels != out_channels) {
    skip = register_module("skip",
                           nn::Conv2d(nn::Conv2dOptions(in_channels, out_channels, 1)));
  }
}

torch::Tensor ConvBlockImpl::forward(const torch::Tensor& h, const torch::Tensor& emb) {
  if (h.dim() != 4 || h.size(1) != in_channels_) {
    throw std::invalid_argument("conv block: expected " + std::to_string(in_channels_) +
                                " input channels, got shape " + c10::str(h.sizes()));
  }
  auto a = conv1(torch::silu(norm1(h)));
  auto ss = emb_proj(torch::silu(emb)).unsqueeze(-1).unsqueeze(-1);
  auto parts = ss.chunk(2, 1);
  a = a * (1 + parts[0]) + parts[1];
  a = conv2(torch::silu(norm2(a)));
  return (skip ? skip(h) : h) + a;
}

// ---------------------------------------------------------------------------
// spatial attention

SpatialAttentionImpl::SpatialAttentionImpl(std::int64_t channels) : channels_(channels) {
  query = register_module("query", nn::Conv2d(nn::Conv2dOptions(channels, channels, 1)));
  key = register_module("key", nn::Conv2d(nn::Conv2dOptions(channels, channels, 1)));
  value = register_module("value", nn::Conv2d(nn::Conv2dOptions(channels, channels, 1)));
  out = register_module("out", nn::Conv2d(nn::Conv2dOptions(channels, channels, 1)));
}

torch::Tensor SpatialAttentionImpl::attention_map(const torch::Tensor& h) {
  const auto b = h.size(0), n = h.size(2) * h.size(3);
  auto q = query(h).view({b, channels_, n});
  auto k = key(h).view({b, channels_, n});
  auto logits = torch::bmm(q.transpose(1, 2), k) / std::sqrt(static_cast<double>(channels_));
  return torch::softmax(logits, -1);
}

torch::Tensor SpatialAttentionImpl::forward(const torch::Tensor& h) {
  if (h.dim() != 4) throw std::invalid_argument("spatial attention: expected rank-4 input");
  const auto b = h.size(0), n = h.size(2) * h.size(3);
  auto attn = attention_map(h);
  auto v = value(h).view({b, channels_, n});
  // output at query i is sum_j A[i, j] v[:, j]
  auto mixed = torch::bmm(v, attn.transpose(1, 2)).view_as(h);
  return h + out(mixed);
}

// ---------------------------------------------------------------------------
// windows

WindowedFeatures window_partition(const torch::Tensor& z, std::int64_t window_size,
                                  std::int64_t shift) {
  if (z.dim() != 4) throw std::invalid_argument("window_partition: expected (B, C, H, W)");
  if (window_size < 1) throw std::invalid_argument("window_partition: window_size must be >= 1");
  if (shift < 0 || shift >= window_size) {
    throw std::invalid_argument("window_partition: shift must lie in [0, window_size)");
  }
  WindowLayout layout{z.size(0), z.size(1), z.size(2), z.size(3), window_size, shift};
  if (layout.height % window_size != 0 || layout.width % window_size != 0) {
    throw std::invalid_argument("window_partition: spatial size " +
                                std::to_string(layout.height) + "x" +
                                std::to_string(layout.width) +
                                " not divisible by window_size " + std::to_string(window_size));
  }
  auto shifted = shift > 0 ? torch::roll(z, {-shift, -shift}, {2, 3}) : z;
  const auto nh = layout.height / window_size, nw = layout.width / window_size;
  auto t = shifted.permute({0, 2, 3, 1})
               .reshape({layout.batch, nh, window_size, nw, window_size, layout.channels})
               .permute({0, 1, 3, 2, 4, 5})
               .reshape({layout.batch * nh * nw, window_size * window_size, layout.channels});
  return {t, layout};
}

torch::Tensor window_reverse(const torch::Tensor& tokens, const WindowLayout& layout) {
  const auto ws = layout.window_size;
  const auto nh = layout.height / ws, nw = layout.width / ws;
  auto z = tokens.reshape({layout.batch, nh, nw, ws, ws, layout.channels})
               .permute({0, 5, 1, 3, 2, 4})
               .reshape({layout.batch, layout.channels, layout.height, layout.width});
  return layout.shift > 0 ? torch::roll(z, {layout.shift, layout.shift}, {2, 3}) : z;
}

torch::Tensor shifted_window_mask(std::int64_t height, std::int64_t width,
                                  std::int64_t window_size, std::int64_t shift,
                                  const torch::TensorOptions& options) {
  if (shift == 0) return {};
  // label each position of the shifted map by the region it wrapped in from
  auto region = [&](std::int64_t i, std::int64_t n) -> std::int64_t {
    if (i < n - window_size) return 0;
    if (i < n - shift) return 1;
    return 2;
  };
  auto labels = torch::empty({1, 1, height, width}, torch::kFloat64);
  auto acc = labels.accessor<double, 4>();
  for (std::int64_t y = 0; y < height; ++y) {
    for (std::int64_t x = 0; x < width; ++x) {
      acc[0][0][y][x] = static_cast<double>(region(y, height) * 3 + region(x, width));
    }
  }
  // partition without the shift: labels already live in shifted coordinates
  auto win = window_partition(labels, window_size, 0).tokens.squeeze(-1);  // (nW, N)
  auto differ = win.unsqueeze(1) != win.unsqueeze(2);
  auto mask = torch::zeros(differ.sizes(), torch::kFloat64)
                  .masked_fill(differ, -std::numeric_limits<double>::infinity());
  return mask.to(options);
}

WindowBlockImpl::WindowBlockImpl(std::int64_t dim, std::int64_t num_heads,
                                 std::int64_t window_size, std::int64_t shift)
    : dim_(dim), num_heads_(num_heads), window_size_(window_size), shift_(shift) {
  if (num_heads < 1 || dim % num_heads != 0) {
    throw std::invalid_argument("window attention: dim " + std::to_string(dim) +
                                " not divisible into " + std::to_string(num_heads) + " heads");
  }
  norm1 = register_module("norm1", nn::LayerNorm(nn::LayerNormOptions({dim})));
  qkv = register_module("qkv", nn::Linear(dim, 3 * dim));
  proj = register_module("proj", nn::Linear(dim, dim));
  norm2 = register_module("norm2", nn::LayerNorm(nn::LayerNormOptions({dim})));
  fc1 = register_module("fc1", nn::Linear(dim, 2 * dim));
  fc2 = register_module("fc2", nn::Linear(2 * dim, dim));
}

torch::Tensor WindowBlockImpl::attend(const torch::Tensor& normed, const torch::Tensor& mask,
                                      bool probs_only) {
  const auto nwb = normed.size(0), n = normed.size(1);
  const auto head_dim = dim_ / num_heads_;
  auto qkv_t = qkv(normed).reshape({nwb, n, 3, num_heads_, head_dim}).permute({2, 0, 3, 1, 4});
  auto q = qkv_t[0], k = qkv_t[1], v = qkv_t[2];  // (nWB, heads, N, d)
  auto logits = torch::matmul(q, k.transpose(-2, -1)) / std::sqrt(static_cast<double>(head_dim));
  if (mask.defined()) {
    const auto nw = mask.size(0);
    logits = logits.view({nwb / nw, nw, num_heads_, n, n}) + mask.unsqueeze(1).unsqueeze(0);
    logits = logits.view({nwb, num_heads_, n, n});
  }
  auto probs = torch::softmax(logits, -1);
  if (probs_only) return probs;
  auto mixed = torch::matmul(probs, v).transpose(1, 2).reshape({nwb, n, dim_});
  return proj(mixed);
}

torch::Tensor WindowBlockImpl::attention_weights(const torch::Tensor& tokens,
                                                 const torch::Tensor& mask) {
  return attend(norm1(tokens), mask, true);
}

torch::Tensor WindowBlockImpl::forward_windows(const torch::Tensor& tokens,
                                               const torch::Tensor& mask) {
  if (tokens.dim() != 3 || tokens.size(2) != dim_) {
    throw std::invalid_argument("window attention: expected (windows, tokens, " +
                                std::to_string(dim_) + ") input");
  }
  auto x = tokens + attend(norm1(tokens), mask, false);
  return x + fc2(torch::gelu(fc1(norm2(x))));
}

torch::Tensor WindowBlockImpl::forward(const torch::Tensor& z) {
  auto parts = window_partition(z, window_size_, shift_);
  auto mask = shifted_window_mask(z.size(2), z.size(3), window_size_, shift_, z.options());
  return window_reverse(forward_windows(parts.tokens, mask), parts.layout);
}

BottleneckImpl::BottleneckImpl(std::int64_t dim, std::int64_t embed_dim, std::int64_t layers,
                               std::int64_t window_size, std::int64_t num_heads) {
  emb_proj = register_module("emb_proj", nn::Linear(embed_dim, dim));
  for (std::int64_t l = 0; l < layers; ++l) {
    const auto shift = (l % 2 == 0) ? 0 : window_size / 2;
    blocks.push_back(register_module("block" + std::to_string(l),
                                     WindowBlock(dim, num_heads, window_size, shift)));
  }
}

torch::Tensor BottleneckImpl::embedding_term(const torch::Tensor& emb) {
  return emb_proj(torch::silu(emb)).unsqueeze(-1).unsqueeze(-1);
}

torch::Tensor BottleneckImpl::forward(const torch::Tensor& z, const torch::Tensor& emb) {
  auto h = z + embedding_term(emb);
  for (auto& block : blocks) h = block(h);
  return h;
}

// ---------------------------------------------------------------------------
// full network

DenoiserNetImpl::DenoiserNetImpl(NetworkConfig config) : config_(std::move(config)) {
  config_.validate();
  const auto scales = config_.num_scales();
  const auto emb_dim = config_.embed_dim;

  stem = register_module(
      "stem", nn::Conv2d(nn::Conv2dOptions(config_.in_channels, config_.width(0), 3).padding(1)));
  embedding = register_module("embedding", SigmaEmbedding(emb_dim));

  std::int64_t prev = config_.width(0);
  for (std::int64_t l = 0; l + 1 < scales; ++l) {
    const auto c = config_.width(l);
    const auto tag = std::to_string(l);
    enc_blocks.push_back(register_module("enc" + tag, ConvBlock(prev, c, emb_dim)));
    if (config_.attention_scales.count(l)) {
      enc_attn.emplace_back(register_module("enc_attn" + tag, SpatialAttention(c)));
    } else {
      enc_attn.emplace_back(std::nullopt);
    }
    down.push_back(register_module(
        "down" + tag, nn::Conv2d(nn::Conv2dOptions(c, c, 3).stride(2).padding(1))));
    prev = c;
  }

  const auto cb = config_.width(scales - 1);
  mid_block = register_module("mid", ConvBlock(prev, cb, emb_dim));
  bottleneck = register_module(
      "bottleneck",
      Bottleneck(cb, emb_dim, config_.bottleneck_layers, config_.window_size, config_.num_heads));

  up.assign(scales - 1, nn::Conv2d{nullptr});
  dec_blocks.assign(scales - 1, ConvBlock{nullptr});
  dec_attn.assign(scales - 1, std::nullopt);
  std::int64_t below = cb;
  for (std::int64_t l = scales - 2; l >= 0; --l) {
    const auto c = config_.width(l);
    const auto tag = std::to_string(l);
    up[l] = register_module("up" + tag,
                            nn::Conv2d(nn::Conv2dOptions(below, below, 3).padding(1)));
    dec_blocks[l] = register_module("dec" + tag, ConvBlock(below + c, c, emb_dim));
    if (config_.attention_scales.count(l)) {
      dec_attn[l] = register_module("dec_attn" + tag, SpatialAttention(c));
    }
    below = c;
  }
  head_norm = register_module("head_norm", nn::GroupNorm(group_count(below), below));
  head = register_module("head", nn::Conv2d(nn::Conv2dOptions(below, 2, 1)));
}

std::pair<ModelOutput, FeatureTaps> DenoiserNetImpl::forward(const torch::Tensor& x_t,
                                                             const torch::Tensor& condition,
                                                             const torch::Tensor& sigma) {
  if (x_t.dim() != 4 || x_t.size(1) != 1) {
    throw std::invalid_argument("network: x_t must be (B, 1, H, W), got " +
                                c10::str(x_t.sizes()));
  }
  if (condition.dim() != 4 || condition.size(1) != config_.in_channels - 1) {
    throw std::invalid_argument("network: condition must have " +
                                std::to_string(config_.in_channels - 1) + " channels, got " +
                                c10::str(condition.sizes()));
  }
  if (condition.size(0) != x_t.size(0) || condition.size(2) != x_t.size(2) ||
      condition.size(3) != x_t.size(3)) {
    throw std::invalid_argument("network: condition shape " + c10::str(condition.sizes()) +
                                " does not match x_t " + c10::str(x_t.sizes()));
  }
  config_.check_input_size(x_t.size(2), x_t.size(3));
  if (sigma.dim() != 1 || sigma.size(0) != x_t.size(0)) {
    throw std::invalid_argument("network: need one sigma per batch element");
  }

  const auto dtype = stem->weight.dtype();
  auto sig = sigma.to(dtype);
  auto x_in = x_t.to(dtype);
  if (config_.sigma_data > 0.0) {
    x_in = x_in / torch::sqrt(sig * sig + config_.sigma_data * config_.sigma_data).view({-1, 1, 1, 1});
  }
  auto emb = embedding(sig);
  auto h = stem(torch::cat({x_in, condition.to(dtype)}, 1));

  std::vector<torch::Tensor> skips;
  for (std::size_t l = 0; l < enc_blocks.size(); ++l) {
    h = enc_blocks[l](h, emb);
    if (enc_attn[l]) h = (*enc_attn[l])(h);
    skips.push_back(h);
    h = down[l](h);
  }

  h = mid_block(h, emb);
  h = bottleneck(h, emb);
  FeatureTaps taps;
  taps.bottleneck = h;

  for (std::int64_t l = static_cast<std::int64_t>(dec_blocks.size()) - 1; l >= 0; --l) {
    h = torch::upsample_nearest2d(h, {h.size(2) * 2, h.size(3) * 2});
    h = up[l](h);
    h = dec_blocks[l](torch::cat({h, skips[l]}, 1), emb);
    if (dec_attn[l]) h = (*dec_attn[l])(h);
  }
  taps.final_decoder = h;

  auto out = head(torch::silu(head_norm(h)));
  auto parts = out.chunk(2, 1);
  return {ModelOutput{parts[0], parts[1]}, taps};
}

std::int64_t DenoiserNetImpl::parameter_count() const {
  std::int64_t n = 0;
  for (const auto& p : parameters()) n += p.numel();
  return n;
}

DenoiserFn DenoiserNetImpl::as_denoiser() {
  // keeps the module alive for as long as the function is
  auto self = std::static_pointer_cast<DenoiserNetImpl>(shared_from_this());
  return [self](const torch::Tensor& x, const torch::Tensor& condition, double sigma) {
    torch::NoGradGuard no_grad;
    auto sig = torch::full({x.size(0)}, sigma, torch::kFloat64);
    auto out = self->forward(x, condition, sig).first;
    return ModelOutput{out.mu.to(x.dtype()), out.log_var.to(x.dtype())};
  };
}

}  // namespace cesynth
