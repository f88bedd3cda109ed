#include "cesynth/trainer.hpp"

#include <cmath>
#include <sstream>
#include <stdexcept>

#include "cesynth/losses.hpp"
#include "cesynth/tensor_io.hpp"

namespace cesynth {

namespace {

constexpr std::uint64_t kTrainStreamSalt = 0x7452414Eull;  // training RNG stream
constexpr std::uint64_t kEvalStreamSalt = 7919;            // validation sampler stream

double grad_norm(const std::vector<torch::Tensor>& params) {
  double acc = 0.0;
  for (const auto& p : params) {
    if (p.grad().defined()) acc += p.grad().to(torch::kFloat64).pow(2).sum().item<double>();
  }
  return std::sqrt(acc);
}

torch::optim::AdamWOptions& group_options(torch::optim::AdamW& opt) {
  return static_cast<torch::optim::AdamWOptions&>(opt.param_groups().at(0).options());
}

}  // namespace

nlohmann::json StepRecord::to_json() const {
  return {{"epoch", epoch},   {"step", step},   {"unc", unc},
          {"perc", perc},     {"disp", disp},   {"total", total},
          {"alpha", alpha},   {"lr", learning_rate}, {"grad_norm", grad_norm},
          {"clipped_grad_norm", clipped_grad_norm}};
}

double warmup_multiplier(const TrainConfig& config, std::int64_t epoch) {
  return epoch < config.warmup_epochs ? config.warmup_factor : 1.0;
}

DenoiserProvider network_provider(DenoiserNet net) {
  return [net](const Batch&) mutable { return net->as_denoiser(); };
}

DenoiserProvider oracle_provider() {
  return [](const Batch& batch) -> DenoiserFn {
    auto target = batch.target;
    return [target](const torch::Tensor& x, const torch::Tensor&, double) {
      auto mu = target.to(x.dtype());
      return ModelOutput{mu, torch::zeros_like(mu)};
    };
  };
}

EvalResult validate(const DenoiserProvider& provider, const std::vector<PhantomCase>& cases,
                    const NoiseSchedule& schedule, const SamplerConfig& sampler,
                    std::uint64_t seed, std::int64_t max_cases, std::int64_t batch_size) {
  EvalResult result;
  const auto n = max_cases > 0 ? std::min<std::int64_t>(max_cases, cases.size())
                               : static_cast<std::int64_t>(cases.size());
  Rng rng(seed);
  for (std::int64_t start = 0; start < n; start += batch_size) {
    std::vector<const PhantomCase*> ptrs;
    for (auto i = start; i < std::min(n, start + batch_size); ++i) ptrs.push_back(&cases[i]);
    auto batch = collate(ptrs);
    auto traj = heun_sample(provider(batch), batch.condition, schedule, sampler, rng);
    auto pred = traj.final_state().clamp(0.0, 1.0);
    for (std::int64_t b = 0; b < batch.size(); ++b) {
      const auto& target = batch.target[b];
      result.global.per_case.push_back(
          {batch.case_ids[b], metrics::global_metrics(pred[b], target)});
      const auto& mask = batch.tumor_mask[b];
      if (mask.sum().item<double>() > 0) {
        result.tumor.per_case.push_back(
            {batch.case_ids[b], metrics::masked_metrics(pred[b], target, mask)});
      }
    }
  }
  return result;
}

// ---------------------------------------------------------------------------

Trainer::Trainer(RunConfig config, std::vector<PhantomCase> train_cases,
                 std::vector<PhantomCase> val_cases)
    : config_(std::move(config)),
      schedule_(config_.schedule.build()),
      train_(std::move(train_cases)),
      val_(std::move(val_cases)),
      rng_(config_.train.seed ^ kTrainStreamSalt) {
  config_.validate();
  if (static_cast<std::int64_t>(train_.size()) < 2) {
    throw std::invalid_argument("trainer: need at least 2 training cases");
  }
  torch::manual_seed(config_.train.seed);
  model_ = DenoiserNet(config_.effective_network());
  extractor_ = make_extractor(config_.extractor);
  optimizer_ = std::make_unique<torch::optim::AdamW>(
      model_->parameters(), torch::optim::AdamWOptions(config_.train.learning_rate)
                                .weight_decay(config_.train.weight_decay));
}

std::int64_t Trainer::steps_per_epoch() const {
  const auto n = static_cast<std::int64_t>(train_.size());
  const auto bs = config_.train.batch_size;
  return n / bs + ((n % bs) >= 2 ? 1 : 0);
}

double Trainer::current_learning_rate() const {
  return config_.train.learning_rate * warmup_multiplier(config_.train, epoch_);
}

std::vector<const PhantomCase*> Trainer::next_batch() {
  if (order_.empty()) order_ = rng_.permutation(static_cast<std::int64_t>(train_.size()));
  const auto bs = config_.train.batch_size;
  const auto start = cursor_ * bs;
  const auto end = std::min<std::int64_t>(start + bs, order_.size());
  std::vector<const PhantomCase*> out;
  for (auto i = start; i < end; ++i) out.push_back(&train_[order_[i]]);
  ++cursor_;
  if (cursor_ >= steps_per_epoch()) {
    ++epoch_;
    cursor_ = 0;
    order_.clear();
  }
  return out;
}

LossBreakdown Trainer::compute_loss(const Batch& batch, const torch::Tensor& x_t,
                                    const torch::Tensor& sigma, FeatureTaps* taps_out) {
  const auto& flags = config_.train.ablation;
  auto [out, taps] = model_->forward(x_t, batch.condition, sigma);
  if (taps_out) *taps_out = taps;
  auto log_var = clamp_log_var(out.log_var, config_.loss.logvar_clamp);
  auto weights =
      build_weight_map(batch.background_mask, batch.breast_mask, batch.tumor_mask, config_.regions);

  LossComponents c;
  c.unc = flags.uncertainty ? uncertainty_loss(out.mu, log_var, batch.target, weights)
                            : weighted_mse_loss(out.mu, batch.target, weights);
  if (flags.perceptual) {
    c.perc = perceptual_loss(out.mu, batch.target, weights, config_.perceptual,
                             extractor_->as_feature_fn());
  }
  if (flags.dispersive) c.disp = tap_dispersive_loss(taps, config_.loss.tau);
  return total_loss(c, config_.loss, epoch_);
}

StepRecord Trainer::step() {
  if (finished()) throw std::logic_error("trainer: all epochs already completed");
  model_->train();
  StepRecord rec;
  rec.epoch = epoch_;
  rec.step = global_step_;
  rec.learning_rate = current_learning_rate();
  group_options(*optimizer_).lr(rec.learning_rate);

  auto batch = collate(next_batch());
  auto t = sample_timesteps(batch.size(), schedule_, rng_);
  auto sigma = schedule_.sigma(torch::tensor(t, torch::kInt64));
  auto x_t = add_noise_sigma(batch.target, sigma, rng_);

  optimizer_->zero_grad();
  // epoch_ may already point at the next epoch; the loss uses the step's own epoch
  const auto saved_epoch = epoch_;
  epoch_ = rec.epoch;
  auto loss = compute_loss(batch, x_t, sigma);
  epoch_ = saved_epoch;
  loss.total.backward();

  auto params = model_->parameters();
  rec.grad_norm = torch::nn::utils::clip_grad_norm_(params, config_.train.grad_clip_norm);
  rec.clipped_grad_norm = grad_norm(params);
  optimizer_->step();
  ++global_step_;

  rec.unc = loss.unc;
  rec.perc = loss.perc;
  rec.disp = loss.disp;
  rec.total = loss.total_value;
  rec.alpha = loss.alpha;
  return rec;
}

void Trainer::run(const std::function<void(const StepRecord&)>& on_step,
                  const std::function<void(std::int64_t, const std::optional<EvalResult>&)>& on_epoch) {
  while (!finished()) {
    const auto rec = step();
    if (on_step) on_step(rec);
    if (epoch_ != rec.epoch) {
      std::optional<EvalResult> val;
      const auto every = config_.train.validate_every;
      if (every > 0 && !val_.empty() && (rec.epoch + 1) % every == 0) {
        val = evaluate(val_, config_.train.val_max_cases);
      }
      if (on_epoch) on_epoch(rec.epoch, val);
    }
  }
}

EvalResult Trainer::evaluate(const std::vector<PhantomCase>& cases, std::int64_t max_cases) {
  model_->eval();
  return validate(network_provider(model_), cases, schedule_, config_.sampler,
                  config_.train.seed + kEvalStreamSalt, max_cases);
}

void Trainer::save_checkpoint(const std::filesystem::path& path) const {
  Container c;
  c.meta["kind"] = "trainer";
  c.meta["network"] = model_->config();
  c.meta["config"] = to_json(config_);
  c.meta["epoch"] = epoch_;
  c.meta["global_step"] = global_step_;
  c.meta["cursor"] = cursor_;
  append_parameters(c, *model_, "model.");

  const auto& state = optimizer_->state();
  for (const auto& item : model_->named_parameters(true)) {
    auto it = state.find(item.value().unsafeGetTensorImpl());
    if (it == state.end()) continue;
    const auto& s = static_cast<const torch::optim::AdamWParamState&>(*it->second);
    const auto base = "optim." + item.key();
    c.add(base + ".exp_avg", s.exp_avg());
    c.add(base + ".exp_avg_sq", s.exp_avg_sq());
    c.add(base + ".step", torch::tensor({s.step()}, torch::kInt64));
  }
  const auto rs = rng_.state();
  auto rs_t = torch::empty({static_cast<std::int64_t>(rs.size())}, torch::kUInt8);
  std::memcpy(rs_t.data_ptr<std::uint8_t>(), rs.data(), rs.size());
  c.add("rng.state", rs_t);
  c.add("epoch.order", torch::tensor(order_, torch::kInt64));
  write_container(path, c);
}

void Trainer::load_checkpoint(const std::filesystem::path& path) {
  auto c = read_container(path);
  if (c.meta.value("kind", "") != "trainer") {
    throw std::runtime_error("not a trainer checkpoint: " + path.string());
  }
  nlohmann::json expected = model_->config();
  if (c.meta.at("network") != expected) {
    throw std::runtime_error("checkpoint/config mismatch: checkpoint network " +
                             c.meta.at("network").dump() + " vs configured " + expected.dump());
  }
  load_parameters(*model_, c, "model.");

  auto& state = optimizer_->state();
  state.clear();
  for (const auto& item : model_->named_parameters(true)) {
    const auto base = "optim." + item.key();
    if (!c.contains(base + ".exp_avg")) continue;
    auto s = std::make_unique<torch::optim::AdamWParamState>();
    s->step(c.at(base + ".step").item<std::int64_t>());
    s->exp_avg(c.at(base + ".exp_avg").clone());
    s->exp_avg_sq(c.at(base + ".exp_avg_sq").clone());
    state[item.value().unsafeGetTensorImpl()] = std::move(s);
  }
  const auto& rs_t = c.at("rng.state");
  std::vector<std::uint8_t> rs(rs_t.data_ptr<std::uint8_t>(),
                               rs_t.data_ptr<std::uint8_t>() + rs_t.numel());
  rng_.set_state(rs);
  const auto& order = c.at("epoch.order");
  order_.assign(order.data_ptr<std::int64_t>(), order.data_ptr<std::int64_t>() + order.numel());
  epoch_ = c.meta.at("epoch").get<std::int64_t>();
  global_step_ = c.meta.at("global_step").get<std::int64_t>();
  cursor_ = c.meta.at("cursor").get<std::int64_t>();
}

// ---------------------------------------------------------------------------

void save_network(const std::filesystem::path& path, DenoiserNet& net) {
  Container c;
  c.meta["kind"] = "network";
  c.meta["network"] = net->config();
  append_parameters(c, *net, "model.");
  write_container(path, c);
}

DenoiserNet load_network(const std::filesystem::path& path) {
  auto c = read_container(path);
  const auto kind = c.meta.value("kind", "");
  if (kind != "network" && kind != "trainer") {
    throw std::runtime_error("checkpoint " + path.string() + " of kind '" + kind +
                             "' holds no network");
  }
  DenoiserNet net(c.meta.at("network").get<NetworkConfig>());
  load_parameters(*net, c, "model.");
  net->eval();
  return net;
}

void write_oracle_checkpoint(const std::filesystem::path& path) {
  Container c;
  c.meta["kind"] = "oracle";
  write_container(path, c);
}

bool is_oracle_checkpoint(const std::filesystem::path& path) {
  return read_container(path).meta.value("kind", "") == "oracle";
}

std::vector<AblationVariant> standard_ablation() {
  return {{"Baseline", {false, false, false, true}},
          {"w UncA", {true, false, false, true}},
          {"w UncA & FDisp", {true, true, false, true}},
          {"Full", {true, true, true, true}}};
}

std::vector<AblationRow> run_ablation(
    const RunConfig& base, const std::vector<AblationVariant>& variants,
    const std::vector<PhantomCase>& train_cases, const std::vector<PhantomCase>& val_cases,
    const std::vector<PhantomCase>& eval_cases,
    const std::function<void(const AblationVariant&, Trainer&)>& on_trained) {
  std::vector<AblationRow> rows;
  for (const auto& v : variants) {
    RunConfig cfg = base;
    cfg.train.ablation = v.flags;
    Trainer trainer(cfg, train_cases, val_cases);
    trainer.run();
    if (on_trained) on_trained(v, trainer);
    rows.push_back({v, trainer.evaluate(eval_cases)});
  }
  return rows;
}

std::string ablation_table(const std::vector<AblationRow>& rows) {
  std::ostringstream os;
  os << "| Method | UncA | FDisp | MPer "
        "| SSIM (Global) | PSNR (Global) | NMSE (Global) | nHFEN (Global) "
        "| SSIM (Tumor) | PSNR (Tumor) | NMSE (Tumor) | nHFEN (Tumor) |\n";
  os << "|---|:-:|:-:|:-:|---|---|---|---|---|---|---|---|\n";
  auto mark = [](bool b) { return b ? "✓" : " "; };
  for (const auto& r : rows) {
    const auto& f = r.variant.flags;
    os << "| " << r.variant.name << " | " << mark(f.uncertainty) << " | " << mark(f.dispersive)
       << " | " << mark(f.perceptual);
    for (const auto* rep : {&r.result.global, &r.result.tumor}) {
      os << " | " << metrics::format_summary(rep->ssim()) << " | "
         << metrics::format_summary(rep->psnr()) << " | " << metrics::format_summary(rep->nmse())
         << " | " << metrics::format_summary(rep->nhfen());
    }
    os << " |\n";
  }
  return os.str();
}

}  // namespace cesynth
