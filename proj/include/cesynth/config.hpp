#pragma once

// Run configuration: every training-recipe constant lives here with its
// default, and the JSON form is validated field by field.

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"

#include "cesynth/diffusion.hpp"
#include "cesynth/losses.hpp"
#include "cesynth/network.hpp"
#include "cesynth/perceptual.hpp"

namespace cesynth {

struct AblationFlags {
  bool uncertainty = true;
  bool dispersive = true;
  bool perceptual = true;
  bool multiscale_attention = true;
};

struct TrainConfig {
  std::int64_t epochs = 100;
  std::int64_t batch_size = 8;
  double learning_rate = 1e-4;
  double weight_decay = 1e-2;
  std::int64_t warmup_epochs = 2;
  double warmup_factor = 0.1;
  double grad_clip_norm = 1.0;
  std::uint64_t seed = 0;
  AblationFlags ablation;
  std::int64_t validate_every = 1;  // epochs; 0 disables in-training validation
  std::int64_t val_max_cases = 8;   // 0 = whole validation split
  std::int64_t checkpoint_every = 1;

  void validate() const;
};

struct ScheduleConfig {
  double sigma_min = 0.01;
  double sigma_max = 10.0;
  std::int64_t num_train_steps = 1000;

  NoiseSchedule build() const { return build_noise_schedule(sigma_min, sigma_max, num_train_steps); }
};

struct RunConfig {
  TrainConfig train;
  NetworkConfig network;
  ScheduleConfig schedule;
  SamplerConfig sampler;
  LossWeights loss;
  RegionWeights regions;
  PerceptualConfig perceptual{{0.25, 0.5, 0.5, 1.0, 1.0}, PerceptualConfig::Reduction::mean};
  ExtractorSpec extractor;

  /// Network actually built for these flags (attention stripped when the
  /// multiscale_attention flag is off).
  NetworkConfig effective_network() const;
  void validate() const;
};

/// Thrown with one message per offending field.
class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(std::vector<std::string> problems);
  const std::vector<std::string>& problems() const { return problems_; }

 private:
  std::vector<std::string> problems_;
};

nlohmann::json to_json(const RunConfig& config);
/// Missing fields keep their defaults; unknown fields and wrong types are errors.
RunConfig parse_config(const nlohmann::json& j);
RunConfig load_config(const std::filesystem::path& path);

}  // namespace cesynth
