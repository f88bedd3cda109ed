#pragma once

// Training loop for the x0-predicting denoiser: noised batches, the combined
// objective, global-norm clipping, AdamW with a constant warm-up factor,
// checkpoints that resume bit-exactly, validation through the Heun sampler,
// and the component ablation.

#include <cstdint>
#include <filesystem>
#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "cesynth/config.hpp"
#include "cesynth/diffusion.hpp"
#include "cesynth/metrics.hpp"
#include "cesynth/network.hpp"
#include "cesynth/perceptual.hpp"
#include "cesynth/phantom.hpp"
#include "cesynth/rng.hpp"

namespace cesynth {

struct StepRecord {
  std::int64_t epoch = 0;
  std::int64_t step = 0;  // global optimizer step, 0-based
  double unc = 0.0;
  double perc = 0.0;
  double disp = 0.0;
  double total = 0.0;
  double alpha = 0.0;
  double learning_rate = 0.0;
  double grad_norm = 0.0;          // before clipping
  double clipped_grad_norm = 0.0;  // after clipping

  nlohmann::json to_json() const;
};

struct EvalResult {
  metrics::MetricReport global{metrics::Scope::global, {}};
  metrics::MetricReport tumor{metrics::Scope::tumor, {}};
};

/// Supplies the denoiser used for one batch of evaluation cases. Network
/// providers ignore the batch; the oracle provider returns its targets.
using DenoiserProvider = std::function<DenoiserFn(const Batch&)>;

DenoiserProvider network_provider(DenoiserNet net);
/// Always predicts the batch's ground truth with zero log-variance.
DenoiserProvider oracle_provider();

/// Samples every case (up to max_cases, 0 = all) with the Heun sampler and
/// scores global and tumor-region metrics. Cases without tumor pixels are
/// left out of the tumor report.
EvalResult validate(const DenoiserProvider& provider, const std::vector<PhantomCase>& cases,
                    const NoiseSchedule& schedule, const SamplerConfig& sampler,
                    std::uint64_t seed, std::int64_t max_cases = 0, std::int64_t batch_size = 16);

/// Learning-rate multiplier: warmup_factor for epochs < warmup_epochs, else 1.
double warmup_multiplier(const TrainConfig& config, std::int64_t epoch);

class Trainer {
 public:
  Trainer(RunConfig config, std::vector<PhantomCase> train_cases,
          std::vector<PhantomCase> val_cases = {});

  /// One optimizer step on the next batch of the current epoch.
  StepRecord step();
  /// Runs optimizer steps until the epoch counter reaches `config.train.epochs`.
  /// `on_step` sees every step; `on_epoch` runs after each completed epoch with
  /// its (possibly skipped) validation result.
  void run(const std::function<void(const StepRecord&)>& on_step = {},
           const std::function<void(std::int64_t, const std::optional<EvalResult>&)>& on_epoch = {});

  /// Loss breakdown and (unclipped) gradients for a batch at the given noise
  /// levels; no optimizer update and no RNG consumption.
  LossBreakdown compute_loss(const Batch& batch, const torch::Tensor& x_t,
                             const torch::Tensor& sigma, FeatureTaps* taps_out = nullptr);

  bool finished() const { return epoch_ >= config_.train.epochs; }
  std::int64_t epoch() const { return epoch_; }
  std::int64_t global_step() const { return global_step_; }
  std::int64_t steps_per_epoch() const;
  double current_learning_rate() const;

  DenoiserNet& model() { return model_; }
  const RunConfig& config() const { return config_; }
  const NoiseSchedule& schedule() const { return schedule_; }

  EvalResult evaluate(const std::vector<PhantomCase>& cases, std::int64_t max_cases = 0);

  void save_checkpoint(const std::filesystem::path& path) const;
  void load_checkpoint(const std::filesystem::path& path);

 private:
  std::vector<const PhantomCase*> next_batch();

  RunConfig config_;
  NoiseSchedule schedule_;
  std::vector<PhantomCase> train_;
  std::vector<PhantomCase> val_;
  DenoiserNet model_{nullptr};
  FeatureExtractor extractor_{nullptr};
  std::unique_ptr<torch::optim::AdamW> optimizer_;
  Rng rng_;
  std::int64_t epoch_ = 0;
  std::int64_t global_step_ = 0;
  std::vector<std::int64_t> order_;  // current epoch's shuffled case order
  std::int64_t cursor_ = 0;          // batches consumed in the current epoch
};

/// Network-only checkpoint (also readable from a trainer checkpoint).
void save_network(const std::filesystem::path& path, DenoiserNet& net);
DenoiserNet load_network(const std::filesystem::path& path);

/// A checkpoint whose denoiser replays ground truth; used as a test fixture.
void write_oracle_checkpoint(const std::filesystem::path& path);
bool is_oracle_checkpoint(const std::filesystem::path& path);

struct AblationVariant {
  std::string name;
  AblationFlags flags;
};

/// Baseline, +uncertainty, +uncertainty+dispersive, full model.
std::vector<AblationVariant> standard_ablation();

struct AblationRow {
  AblationVariant variant;
  EvalResult result;
};

/// Trains every variant from the same seed and data, evaluating each on
/// `eval_cases`. `on_trained` (optional) sees each trainer after training.
std::vector<AblationRow> run_ablation(
    const RunConfig& base, const std::vector<AblationVariant>& variants,
    const std::vector<PhantomCase>& train_cases, const std::vector<PhantomCase>& val_cases,
    const std::vector<PhantomCase>& eval_cases,
    const std::function<void(const AblationVariant&, Trainer&)>& on_trained = {});

/// Markdown table: component check marks, then 4 global and 4 tumor cells.
std::string ablation_table(const std::vector<AblationRow>& rows);

}  // namespace cesynth
