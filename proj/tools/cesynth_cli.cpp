// cesynth: data generation, training, sampling, evaluation and ablation for
// the phantom contrast-synthesis model. Every command writes run_manifest.json
// into its output directory.

#include <chrono>
#include <ctime>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "cesynth/config.hpp"
#include "cesynth/phantom.hpp"
#include "cesynth/tensor_io.hpp"
#include "cesynth/trainer.hpp"
#include "json.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace cesynth;

namespace {

std::string utc_now() {
  const auto t = std::chrono::system_clock::to_time_t(std::chrono::system_clock::now());
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

void write_json(const fs::path& path, const json& j) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << j.dump(2) << '\n';
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream os(path);
  if (!os) throw std::runtime_error("cannot write " + path.string());
  os << text;
}

class RunManifest {
 public:
  RunManifest(std::string command, fs::path out_dir) : out_dir_(std::move(out_dir)) {
    j_["command"] = std::move(command);
    j_["output_dir"] = fs::absolute(out_dir_).string();
    j_["started_at"] = utc_now();
  }

  json& operator[](const char* key) { return j_[key]; }

  void finish() {
    j_["finished_at"] = utc_now();
    std::map<std::string, std::string> sums;
    for (const auto& e : fs::recursive_directory_iterator(out_dir_)) {
      if (!e.is_regular_file()) continue;
      const auto rel = fs::relative(e.path(), out_dir_).generic_string();
      if (rel == "run_manifest.json") continue;
      sums[rel] = sha256_file(e.path());
    }
    j_["artifacts"] = sums;
    write_json(out_dir_ / "run_manifest.json", j_);
  }

 private:
  fs::path out_dir_;
  json j_;
};

void prepare_out_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec || !fs::is_directory(dir)) {
    throw std::runtime_error("output directory not writable: " + dir.string());
  }
}

SplitFractions parse_fractions(const std::string& text) {
  std::vector<double> v;
  std::stringstream ss(text);
  std::string item;
  while (std::getline(ss, item, ',')) v.push_back(std::stod(item));
  if (v.size() != 3) throw std::invalid_argument("--split expects train,val,test fractions");
  return {v[0], v[1], v[2]};
}

void ensure_dataset(const fs::path& data_dir) {
  if (!fs::exists(data_dir / "manifest.json")) {
    throw std::runtime_error("missing dataset: no manifest.json in " + data_dir.string());
  }
}

struct Overrides {
  std::string config_path;
  std::optional<std::int64_t> epochs, batch_size;
  std::optional<std::uint64_t> seed;
  bool no_uncertainty = false, no_dispersive = false, no_perceptual = false, no_msa = false;
};

RunConfig resolve_config(const Overrides& o) {
  RunConfig cfg = o.config_path.empty() ? RunConfig{} : load_config(o.config_path);
  if (o.epochs) cfg.train.epochs = *o.epochs;
  if (o.batch_size) cfg.train.batch_size = *o.batch_size;
  if (o.seed) cfg.train.seed = *o.seed;
  if (o.no_uncertainty) cfg.train.ablation.uncertainty = false;
  if (o.no_dispersive) cfg.train.ablation.dispersive = false;
  if (o.no_perceptual) cfg.train.ablation.perceptual = false;
  if (o.no_msa) cfg.train.ablation.multiscale_attention = false;
  cfg.validate();
  return cfg;
}

void add_config_options(CLI::App* cmd, Overrides& o, bool ablation_flags) {
  cmd->add_option("--config", o.config_path, "JSON run config (defaults when omitted)")
      ->check(CLI::ExistingFile);
  cmd->add_option("--epochs", o.epochs, "override train.epochs");
  cmd->add_option("--batch-size", o.batch_size, "override train.batch_size");
  cmd->add_option("--seed", o.seed, "override train.seed");
  if (ablation_flags) {
    cmd->add_flag("--no-uncertainty", o.no_uncertainty, "plain weighted MSE instead of the uncertainty loss");
    cmd->add_flag("--no-dispersive", o.no_dispersive, "drop the dispersive term");
    cmd->add_flag("--no-perceptual", o.no_perceptual, "drop the perceptual term");
    cmd->add_flag("--no-msa", o.no_msa, "drop the spatial attention and the window-attention bottleneck");
  }
}

std::string epoch_line(std::int64_t epoch, const EvalResult& r) {
  std::ostringstream os;
  os << "epoch " << epoch << " val ssim " << metrics::format_summary(r.global.ssim())
     << " nmse " << metrics::format_summary(r.global.nmse(), 4);
  return os.str();
}

json summary_json(const metrics::MetricReport& r) {
  auto s = [](const metrics::Summary& x) { return json{{"mean", x.mean}, {"std", x.stddev}}; };
  return {{"cases", r.per_case.size()}, {"ssim", s(r.ssim())}, {"psnr", s(r.psnr())},
          {"nmse", s(r.nmse())},        {"nhfen", s(r.nhfen())}};
}

// ---------------------------------------------------------------------------

int cmd_gen_data(std::int64_t num_cases, std::int64_t size, const std::string& split,
                 std::uint64_t seed, const fs::path& out_dir, bool previews) {
  const auto fractions = parse_fractions(split);
  prepare_out_dir(out_dir);
  RunManifest manifest("gen-data", out_dir);
  manifest["seed"] = seed;
  manifest["config"] = {{"num_cases", num_cases}, {"size", size}, {"split", split},
                        {"previews", previews}};
  const auto ds = generate_dataset(num_cases, size, fractions, seed, out_dir, previews);
  std::cout << "wrote " << ds.cases.size() << " cases (train " << ds.ids(Split::train).size()
            << ", val " << ds.ids(Split::val).size() << ", test " << ds.ids(Split::test).size()
            << ") to " << out_dir << "\n";
  manifest.finish();
  return 0;
}

int cmd_train(const Overrides& o, const fs::path& data_dir, const fs::path& out_dir,
              const std::string& resume) {
  ensure_dataset(data_dir);
  const auto cfg = resolve_config(o);
  prepare_out_dir(out_dir);
  RunManifest manifest("train", out_dir);
  manifest["config_path"] = o.config_path;
  manifest["config"] = to_json(cfg);
  manifest["seed"] = cfg.train.seed;
  manifest["data_dir"] = fs::absolute(data_dir).string();
  write_json(out_dir / "config.json", to_json(cfg));

  Trainer trainer(cfg, load_split(data_dir, Split::train), load_split(data_dir, Split::val));
  if (!resume.empty()) {
    trainer.load_checkpoint(resume);
    manifest["resumed_from"] = fs::absolute(resume).string();
    std::cout << "resumed at epoch " << trainer.epoch() << " step " << trainer.global_step() << "\n";
  }
  const auto ckpt_dir = out_dir / "checkpoints";
  fs::create_directories(ckpt_dir);
  std::ofstream log(out_dir / "train_log.jsonl");
  std::ofstream val_log(out_dir / "val_log.jsonl");

  trainer.run(
      [&](const StepRecord& r) { log << r.to_json().dump() << '\n'; },
      [&](std::int64_t epoch, const std::optional<EvalResult>& val) {
        log.flush();
        if (val) {
          val_log << json{{"epoch", epoch}, {"global", summary_json(val->global)},
                          {"tumor", summary_json(val->tumor)}}.dump()
                  << '\n';
          val_log.flush();
          std::cout << epoch_line(epoch, *val) << std::endl;
        } else {
          std::cout << "epoch " << epoch << " done" << std::endl;
        }
        const auto every = cfg.train.checkpoint_every;
        if (every > 0 && (epoch + 1) % every == 0) {
          char name[64];
          std::snprintf(name, sizeof name, "epoch_%03lld.csckpt", static_cast<long long>(epoch + 1));
          trainer.save_checkpoint(ckpt_dir / name);
        }
      });
  trainer.save_checkpoint(ckpt_dir / "last.csckpt");
  log.close();
  val_log.close();
  manifest.finish();
  return 0;
}

int cmd_sample(const fs::path& checkpoint, const fs::path& data_dir, std::optional<std::int64_t> case_id,
               const std::vector<std::string>& condition_files, std::int64_t steps, std::uint64_t seed,
               const fs::path& out_dir) {
  torch::Tensor condition, truth;
  if (!condition_files.empty()) {
    if (condition_files.size() != 3) {
      throw std::invalid_argument("--condition expects 3 files: T1-pre, DWI-b0, DWI-b800");
    }
    std::vector<torch::Tensor> chans;
    for (const auto& f : condition_files) chans.push_back(read_tensor_file(f).reshape({1, 1, -1}));
    const auto side = static_cast<std::int64_t>(std::lround(std::sqrt(chans[0].size(2))));
    condition = torch::cat(chans, 1).reshape({1, 3, side, side});
  } else {
    if (!case_id || data_dir.empty()) {
      throw std::invalid_argument("sample needs --data-dir with --case-id, or --condition");
    }
    ensure_dataset(data_dir);
    const auto ds = read_manifest(data_dir);
    const DatasetManifest::Entry* entry = nullptr;
    for (const auto& e : ds.cases) {
      if (e.id == *case_id) entry = &e;
    }
    if (!entry) throw std::invalid_argument("no case " + std::to_string(*case_id) + " in dataset");
    const auto c = load_case(data_dir, *entry);
    condition = c.condition();
    truth = c.t1_post;
  }

  DenoiserFn denoiser;
  RunConfig cfg;
  if (is_oracle_checkpoint(checkpoint)) {
    if (!truth.defined()) throw std::invalid_argument("oracle checkpoint needs ground truth (--case-id)");
    Batch b;
    b.target = truth;
    denoiser = oracle_provider()(b);
  } else {
    auto net = load_network(checkpoint);
    net->config().check_input_size(condition.size(2), condition.size(3));
    denoiser = net->as_denoiser();
    const auto meta = read_container(checkpoint).meta;
    if (meta.contains("config")) cfg = parse_config(meta.at("config"));
  }
  SamplerConfig sampler = cfg.sampler;
  sampler.num_inference_steps = steps;
  const auto schedule = cfg.schedule.build();

  prepare_out_dir(out_dir);
  RunManifest manifest("sample", out_dir);
  manifest["seed"] = seed;
  manifest["config"] = {{"checkpoint", fs::absolute(checkpoint).string()}, {"steps", steps},
                        {"case_id", case_id ? json(*case_id) : json(nullptr)},
                        {"condition", condition_files}};

  Rng rng(seed);
  const auto traj = heun_sample(denoiser, condition, schedule, sampler, rng);
  const auto clamp = cfg.loss.logvar_clamp;
  auto pred = traj.final_state()[0];
  write_tensor_file(out_dir / "synthesized.cst", pred);
  write_png_gray(out_dir / "synthesized.png", pred);
  auto log_var = traj.uncertainties.back()[0].clamp(clamp.lo, clamp.hi);
  write_tensor_file(out_dir / "uncertainty.cst", log_var.exp());
  write_png_gray(out_dir / "uncertainty.png", log_var, clamp.lo, clamp.hi);
  if (truth.defined()) {
    auto err = (pred - truth[0]).abs();
    write_tensor_file(out_dir / "error_map.cst", err);
    write_png_gray(out_dir / "error_map.png", err);
  }
  const auto step_dir = out_dir / "steps";
  fs::create_directories(step_dir);
  for (std::size_t i = 0; i < traj.uncertainties.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "uncertainty_%02zu", i);
    auto lv = traj.uncertainties[i][0].clamp(clamp.lo, clamp.hi);
    write_tensor_file(step_dir / (std::string(name) + ".cst"), lv.exp());
    write_png_gray(step_dir / (std::string(name) + ".png"), lv, clamp.lo, clamp.hi);
  }
  std::cout << "wrote " << traj.uncertainties.size() << " step maps to " << step_dir << "\n";
  manifest.finish();
  return 0;
}

int cmd_eval(const fs::path& checkpoint, const fs::path& data_dir, const std::string& split,
             std::uint64_t seed, std::optional<std::int64_t> steps, const fs::path& out_dir) {
  ensure_dataset(data_dir);
  const auto cases = load_split(data_dir, split_from_string(split));
  if (cases.empty()) throw std::invalid_argument("empty split: " + split);

  RunConfig cfg;
  DenoiserProvider provider;
  if (is_oracle_checkpoint(checkpoint)) {
    provider = oracle_provider();
  } else {
    auto net = load_network(checkpoint);
    const auto meta = read_container(checkpoint).meta;
    if (meta.contains("config")) cfg = parse_config(meta.at("config"));
    provider = network_provider(net);
  }
  if (steps) cfg.sampler.num_inference_steps = *steps;

  prepare_out_dir(out_dir);
  RunManifest manifest("eval", out_dir);
  manifest["seed"] = seed;
  manifest["config"] = {{"checkpoint", fs::absolute(checkpoint).string()},
                        {"data_dir", fs::absolute(data_dir).string()},
                        {"split", split},
                        {"steps", cfg.sampler.num_inference_steps}};
  const auto result = validate(provider, cases, cfg.schedule.build(), cfg.sampler, seed);
  const std::vector<metrics::MetricReport> reports{result.global, result.tumor};
  metrics::write_report_csv(out_dir / "metrics.csv", reports);
  const auto table = metrics::report_table(reports);
  write_text(out_dir / "metrics.md", table);
  std::cout << table;
  manifest.finish();
  return 0;
}

std::string slug(const std::string& name) {
  std::string s;
  for (char c : name) {
    if (std::isalnum(static_cast<unsigned char>(c))) {
      s += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    } else if (!s.empty() && s.back() != '_') {
      s += '_';
    }
  }
  while (!s.empty() && s.back() == '_') s.pop_back();
  return s;
}

int cmd_ablation(const Overrides& o, const fs::path& data_dir, const fs::path& out_dir) {
  ensure_dataset(data_dir);
  const auto cfg = resolve_config(o);
  prepare_out_dir(out_dir);
  RunManifest manifest("ablation", out_dir);
  manifest["config_path"] = o.config_path;
  manifest["config"] = to_json(cfg);
  manifest["seed"] = cfg.train.seed;
  manifest["data_dir"] = fs::absolute(data_dir).string();

  const auto train = load_split(data_dir, Split::train);
  const auto val = load_split(data_dir, Split::val);
  const auto test = load_split(data_dir, Split::test);
  if (test.empty()) throw std::invalid_argument("empty split: test");

  json rows = json::array();
  const auto result = run_ablation(
      cfg, standard_ablation(), train, val, test, [&](const AblationVariant& v, Trainer& t) {
        const auto dir = out_dir / slug(v.name);
        fs::create_directories(dir);
        t.save_checkpoint(dir / "checkpoint.csckpt");
        json row{{"variant", v.name},
                 {"checkpoint", fs::absolute(dir / "checkpoint.csckpt").string()},
                 {"config", to_json(t.config())},
                 {"checksum", sha256_file(dir / "checkpoint.csckpt")}};
        write_json(dir / "row_manifest.json", row);
        rows.push_back(row);
        std::cout << "trained " << v.name << std::endl;
      });
  for (std::size_t i = 0; i < result.size(); ++i) {
    rows[i]["global"] = summary_json(result[i].result.global);
    rows[i]["tumor"] = summary_json(result[i].result.tumor);
  }
  write_json(out_dir / "ablation.json", rows);
  const auto table = ablation_table(result);
  write_text(out_dir / "ablation.md", table);
  std::cout << table;
  manifest["rows"] = rows;
  manifest.finish();
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"cesynth: conditional diffusion synthesis of contrast-enhanced T1 phantoms"};
  app.require_subcommand(1);

  std::int64_t num_cases = 200, size = 64;
  std::string split = "0.7,0.2,0.1";
  std::uint64_t data_seed = 0;
  fs::path out_dir;
  bool previews = false;
  auto* gen = app.add_subcommand("gen-data", "generate a phantom dataset");
  gen->add_option("--num-cases", num_cases, "number of cases")->check(CLI::PositiveNumber);
  gen->add_option("--size", size, "image side in pixels (multiple of 16)");
  gen->add_option("--split", split, "train,val,test fractions");
  gen->add_option("--seed", data_seed, "dataset seed");
  gen->add_option("--out-dir", out_dir, "output directory")->required();
  gen->add_flag("--previews", previews, "also write PNG previews");

  Overrides train_o;
  fs::path data_dir;
  std::string resume;
  auto* train = app.add_subcommand("train", "train the denoiser");
  add_config_options(train, train_o, true);
  train->add_option("--data-dir", data_dir, "dataset directory")->required();
  train->add_option("--out-dir", out_dir, "run directory")->required();
  train->add_option("--resume", resume, "trainer checkpoint to continue from")->check(CLI::ExistingFile);

  fs::path checkpoint;
  std::optional<std::int64_t> case_id;
  std::vector<std::string> condition_files;
  std::int64_t steps = SamplerConfig{}.num_inference_steps;
  std::uint64_t sample_seed = 0;
  auto* sample = app.add_subcommand("sample", "synthesize one case with uncertainty maps");
  sample->add_option("--checkpoint", checkpoint, "network, trainer or oracle checkpoint")
      ->required()->check(CLI::ExistingFile);
  sample->add_option("--data-dir", data_dir, "dataset directory");
  sample->add_option("--case-id", case_id, "case id within the dataset");
  sample->add_option("--condition", condition_files, "T1-pre, DWI-b0, DWI-b800 tensor files")
      ->expected(3);
  sample->add_option("--steps", steps, "inference steps")->check(CLI::PositiveNumber);
  sample->add_option("--seed", sample_seed, "initial-noise seed");
  sample->add_option("--out-dir", out_dir, "output directory")->required();

  std::string eval_split = "test";
  std::optional<std::int64_t> eval_steps;
  std::uint64_t eval_seed = 0;
  auto* eval = app.add_subcommand("eval", "score a checkpoint on a dataset split");
  eval->add_option("--checkpoint", checkpoint, "network, trainer or oracle checkpoint")
      ->required()->check(CLI::ExistingFile);
  eval->add_option("--data-dir", data_dir, "dataset directory")->required();
  eval->add_option("--split", eval_split, "train, val or test");
  eval->add_option("--steps", eval_steps, "inference steps (checkpoint config by default)");
  eval->add_option("--seed", eval_seed, "sampler seed");
  eval->add_option("--out-dir", out_dir, "output directory")->required();

  Overrides abl_o;
  auto* ablation = app.add_subcommand("ablation", "train and compare the four component variants");
  add_config_options(ablation, abl_o, false);
  ablation->add_option("--data-dir", data_dir, "dataset directory")->required();
  ablation->add_option("--out-dir", out_dir, "output directory")->required();

  Overrides cfg_o;
  auto* config = app.add_subcommand("config", "print the resolved run config");
  add_config_options(config, cfg_o, true);

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) return cmd_gen_data(num_cases, size, split, data_seed, out_dir, previews);
    if (*train) return cmd_train(train_o, data_dir, out_dir, resume);
    if (*sample) {
      return cmd_sample(checkpoint, data_dir, case_id, condition_files, steps, sample_seed, out_dir);
    }
    if (*eval) return cmd_eval(checkpoint, data_dir, eval_split, eval_seed, eval_steps, out_dir);
    if (*ablation) return cmd_ablation(abl_o, data_dir, out_dir);
    if (*config) {
      std::cout << to_json(resolve_config(cfg_o)).dump(2) << "\n";
      return 0;
    }
  } catch (const ConfigError& e) {
    std::cerr << "error: invalid config\n";
    for (const auto& p : e.problems()) std::cerr << "  " << p << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
