#include "cesynth/config.hpp"

#include <fstream>
#include <set>
#include <sstream>

namespace cesynth {

namespace {

std::string join(const std::vector<std::string>& parts) {
  std::ostringstream os;
  os << "invalid configuration:";
  for (const auto& p : parts) os << "\n  - " << p;
  return os.str();
}

// Walks one JSON object, reading known keys into targets and recording every
// type error and unknown key.
class Reader {
 public:
  Reader(const nlohmann::json& j, std::string path, std::vector<std::string>& problems)
      : j_(j), path_(std::move(path)), problems_(problems) {
    if (!j_.is_object()) problems_.push_back(path_ + ": expected an object");
  }

  template <typename T>
  void read(const std::string& key, T& target) {
    seen_.insert(key);
    if (!j_.is_object() || !j_.contains(key)) return;
    const auto& v = j_.at(key);
    if (!type_ok<T>(v)) {
      problems_.push_back(path_ + "." + key + ": expected " + type_name<T>() + ", got " +
                          v.type_name());
      return;
    }
    try {
      target = v.get<T>();
    } catch (const nlohmann::json::exception& e) {
      problems_.push_back(path_ + "." + key + ": " + e.what());
    }
  }

  const nlohmann::json* child(const std::string& key) {
    seen_.insert(key);
    if (!j_.is_object() || !j_.contains(key)) return nullptr;
    return &j_.at(key);
  }

  void finish() {
    if (!j_.is_object()) return;
    for (const auto& item : j_.items()) {
      if (!seen_.count(item.key())) problems_.push_back(path_ + "." + item.key() + ": unknown field");
    }
  }

  std::vector<std::string>& problems() { return problems_; }

 private:
  template <typename T>
  static bool type_ok(const nlohmann::json& v) {
    if constexpr (std::is_same_v<T, bool>) return v.is_boolean();
    else if constexpr (std::is_unsigned_v<T>) return v.is_number_unsigned();
    else if constexpr (std::is_integral_v<T>) return v.is_number_integer();
    else if constexpr (std::is_floating_point_v<T>) return v.is_number();
    else if constexpr (std::is_same_v<T, std::string>) return v.is_string();
    else return v.is_array();
  }
  template <typename T>
  static std::string type_name() {
    if constexpr (std::is_same_v<T, bool>) return "boolean";
    else if constexpr (std::is_unsigned_v<T>) return "nonnegative integer";
    else if constexpr (std::is_integral_v<T>) return "integer";
    else if constexpr (std::is_floating_point_v<T>) return "number";
    else if constexpr (std::is_same_v<T, std::string>) return "string";
    else return "array";
  }

  const nlohmann::json& j_;
  std::string path_;
  std::vector<std::string>& problems_;
  std::set<std::string> seen_;
};

template <typename F>
void section(Reader& parent, const std::string& key, const std::string& path, F&& body) {
  if (const auto* c = parent.child(key)) {
    Reader r(*c, path, parent.problems());
    body(r);
    r.finish();
  }
}

void check(std::vector<std::string>& problems, bool ok, const std::string& message) {
  if (!ok) problems.push_back(message);
}

}  // namespace

ConfigError::ConfigError(std::vector<std::string> problems)
    : std::runtime_error(join(problems)), problems_(std::move(problems)) {}

void TrainConfig::validate() const {
  std::vector<std::string> p;
  check(p, epochs >= 1, "train.epochs: must be >= 1");
  check(p, batch_size >= 2, "train.batch_size: must be >= 2");
  check(p, learning_rate > 0, "train.learning_rate: must be positive");
  check(p, weight_decay >= 0, "train.weight_decay: must be nonnegative");
  check(p, warmup_epochs >= 0, "train.warmup_epochs: must be nonnegative");
  check(p, warmup_factor > 0 && warmup_factor <= 1, "train.warmup_factor: must lie in (0, 1]");
  check(p, grad_clip_norm > 0, "train.grad_clip_norm: must be positive");
  check(p, validate_every >= 0, "train.validate_every: must be nonnegative");
  check(p, val_max_cases >= 0, "train.val_max_cases: must be nonnegative");
  check(p, checkpoint_every >= 0, "train.checkpoint_every: must be nonnegative");
  if (!p.empty()) throw ConfigError(p);
}

NetworkConfig RunConfig::effective_network() const {
  return train.ablation.multiscale_attention ? network : network.without_attention();
}

void RunConfig::validate() const {
  std::vector<std::string> p;
  try {
    train.validate();
  } catch (const ConfigError& e) {
    p.insert(p.end(), e.problems().begin(), e.problems().end());
  }
  try {
    network.validate();
  } catch (const std::invalid_argument& e) {
    p.push_back(e.what());
  }
  check(p, schedule.sigma_min > 0 && schedule.sigma_min < schedule.sigma_max,
        "schedule: requires 0 < sigma_min < sigma_max");
  check(p, schedule.num_train_steps >= 2, "schedule.num_train_steps: must be >= 2");
  check(p, sampler.num_inference_steps >= 1, "sampler.num_inference_steps: must be >= 1");
  check(p, sampler.final_sigma >= 0 && sampler.final_sigma < schedule.sigma_min,
        "sampler.final_sigma: must lie in [0, sigma_min)");
  check(p, loss.tau > 0, "loss.tau: must be positive");
  check(p, loss.beta >= 0, "loss.beta: must be nonnegative");
  check(p, loss.logvar_clamp.lo < loss.logvar_clamp.hi, "loss.logvar_clamp: must be nondegenerate");
  check(p, regions.background >= 0 && regions.breast >= 0 && regions.tumor >= 0,
        "regions: weights must be nonnegative");
  check(p, perceptual.layer_weights.size() == 5,
        "perceptual.layer_weights: need exactly 5 entries (one per extractor stage)");
  for (auto w : perceptual.layer_weights) {
    check(p, w >= 0, "perceptual.layer_weights: entries must be nonnegative");
  }
  check(p, extractor.widths.size() == 5, "extractor.widths: need exactly 5 entries");
  check(p, train.batch_size >= 2 || !train.ablation.dispersive,
        "train.batch_size: the dispersive loss needs batches of at least 2");
  if (!p.empty()) throw ConfigError(p);
}

nlohmann::json to_json(const RunConfig& c) {
  nlohmann::json j;
  const auto& t = c.train;
  j["train"] = {{"epochs", t.epochs},
                {"batch_size", t.batch_size},
                {"learning_rate", t.learning_rate},
                {"weight_decay", t.weight_decay},
                {"warmup_epochs", t.warmup_epochs},
                {"warmup_factor", t.warmup_factor},
                {"grad_clip_norm", t.grad_clip_norm},
                {"seed", t.seed},
                {"validate_every", t.validate_every},
                {"val_max_cases", t.val_max_cases},
                {"checkpoint_every", t.checkpoint_every},
                {"ablation",
                 {{"uncertainty", t.ablation.uncertainty},
                  {"dispersive", t.ablation.dispersive},
                  {"perceptual", t.ablation.perceptual},
                  {"multiscale_attention", t.ablation.multiscale_attention}}}};
  j["network"] = c.network;
  j["schedule"] = {{"sigma_min", c.schedule.sigma_min},
                   {"sigma_max", c.schedule.sigma_max},
                   {"num_train_steps", c.schedule.num_train_steps}};
  j["sampler"] = {{"num_inference_steps", c.sampler.num_inference_steps},
                  {"method", "heun"},
                  {"final_sigma", c.sampler.final_sigma}};
  j["loss"] = {{"beta", c.loss.beta},
               {"tau", c.loss.tau},
               {"logvar_clamp", {c.loss.logvar_clamp.lo, c.loss.logvar_clamp.hi}}};
  j["regions"] = {{"background", c.regions.background},
                  {"breast", c.regions.breast},
                  {"tumor", c.regions.tumor}};
  j["perceptual"] = {
      {"layer_weights", c.perceptual.layer_weights},
      {"reduction", c.perceptual.reduction == PerceptualConfig::Reduction::sum ? "sum" : "mean"}};
  j["extractor"] = {
      {"kind", c.extractor.kind == ExtractorSpec::Kind::seeded ? "seeded" : "pretrained"},
      {"seed", c.extractor.seed},
      {"widths", c.extractor.widths},
      {"weights_path", c.extractor.weights_path.string()}};
  return j;
}

RunConfig parse_config(const nlohmann::json& j) {
  RunConfig c;
  std::vector<std::string> problems;
  Reader root(j, "config", problems);

  section(root, "train", "train", [&](Reader& r) {
    auto& t = c.train;
    r.read("epochs", t.epochs);
    r.read("batch_size", t.batch_size);
    r.read("learning_rate", t.learning_rate);
    r.read("weight_decay", t.weight_decay);
    r.read("warmup_epochs", t.warmup_epochs);
    r.read("warmup_factor", t.warmup_factor);
    r.read("grad_clip_norm", t.grad_clip_norm);
    r.read("seed", t.seed);
    r.read("validate_every", t.validate_every);
    r.read("val_max_cases", t.val_max_cases);
    r.read("checkpoint_every", t.checkpoint_every);
    section(r, "ablation", "train.ablation", [&](Reader& a) {
      a.read("uncertainty", t.ablation.uncertainty);
      a.read("dispersive", t.ablation.dispersive);
      a.read("perceptual", t.ablation.perceptual);
      a.read("multiscale_attention", t.ablation.multiscale_attention);
    });
  });
  section(root, "network", "network", [&](Reader& r) {
    auto& n = c.network;
    r.read("in_channels", n.in_channels);
    r.read("base_width", n.base_width);
    r.read("channel_multipliers", n.channel_multipliers);
    std::vector<std::int64_t> scales(n.attention_scales.begin(), n.attention_scales.end());
    r.read("attention_scales", scales);
    n.attention_scales = {scales.begin(), scales.end()};
    r.read("bottleneck_layers", n.bottleneck_layers);
    r.read("window_size", n.window_size);
    r.read("num_heads", n.num_heads);
    r.read("embed_dim", n.embed_dim);
    r.read("sigma_data", n.sigma_data);
  });
  section(root, "schedule", "schedule", [&](Reader& r) {
    r.read("sigma_min", c.schedule.sigma_min);
    r.read("sigma_max", c.schedule.sigma_max);
    r.read("num_train_steps", c.schedule.num_train_steps);
  });
  section(root, "sampler", "sampler", [&](Reader& r) {
    r.read("num_inference_steps", c.sampler.num_inference_steps);
    std::string method = "heun";
    r.read("method", method);
    if (method != "heun") r.problems().push_back("sampler.method: only 'heun' is supported");
    r.read("final_sigma", c.sampler.final_sigma);
  });
  section(root, "loss", "loss", [&](Reader& r) {
    r.read("beta", c.loss.beta);
    r.read("tau", c.loss.tau);
    std::vector<double> clamp{c.loss.logvar_clamp.lo, c.loss.logvar_clamp.hi};
    r.read("logvar_clamp", clamp);
    if (clamp.size() != 2) {
      r.problems().push_back("loss.logvar_clamp: expected [lo, hi]");
    } else {
      c.loss.logvar_clamp = {clamp[0], clamp[1]};
    }
  });
  section(root, "regions", "regions", [&](Reader& r) {
    r.read("background", c.regions.background);
    r.read("breast", c.regions.breast);
    r.read("tumor", c.regions.tumor);
  });
  section(root, "perceptual", "perceptual", [&](Reader& r) {
    r.read("layer_weights", c.perceptual.layer_weights);
    std::string reduction = "mean";
    r.read("reduction", reduction);
    if (reduction == "sum") {
      c.perceptual.reduction = PerceptualConfig::Reduction::sum;
    } else if (reduction == "mean") {
      c.perceptual.reduction = PerceptualConfig::Reduction::mean;
    } else {
      r.problems().push_back("perceptual.reduction: expected 'sum' or 'mean'");
    }
  });
  section(root, "extractor", "extractor", [&](Reader& r) {
    std::string kind = "seeded";
    r.read("kind", kind);
    if (kind == "seeded") {
      c.extractor.kind = ExtractorSpec::Kind::seeded;
    } else if (kind == "pretrained") {
      c.extractor.kind = ExtractorSpec::Kind::pretrained;
    } else {
      r.problems().push_back("extractor.kind: expected 'seeded' or 'pretrained'");
    }
    r.read("seed", c.extractor.seed);
    r.read("widths", c.extractor.widths);
    std::string path;
    r.read("weights_path", path);
    c.extractor.weights_path = path;
  });
  root.finish();
  // fields that failed to parse kept their defaults, so range checks on the
  // rest still report meaningfully
  try {
    c.validate();
  } catch (const ConfigError& e) {
    problems.insert(problems.end(), e.problems().begin(), e.problems().end());
  }
  if (!problems.empty()) throw ConfigError(problems);
  return c;
}

RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw std::runtime_error("cannot read config file " + path.string());
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(is);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError({path.string() + ": " + e.what()});
  }
  return parse_config(j);
}

}  // namespace cesynth
