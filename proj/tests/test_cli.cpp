#include "doctest_torch.hpp"

#include <cstdlib>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "cesynth/tensor_io.hpp"
#include "cesynth/trainer.hpp"
#include "json.hpp"
#include "support.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

struct Run {
  int status = -1;
  std::string out;
};

Run cli(const std::string& args) {
  static int counter = 0;
  const auto log = fs::temp_directory_path() / ("cesynth_cli_" + std::to_string(counter++) + ".log");
  const std::string cmd = std::string(CESYNTH_CLI) + " " + args + " > " + log.string() + " 2>&1";
  const int raw = std::system(cmd.c_str());
  Run r;
  r.status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  std::ifstream is(log);
  std::stringstream ss;
  ss << is.rdbuf();
  r.out = ss.str();
  return r;
}

std::string slurp(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  std::stringstream ss;
  ss << is.rdbuf();
  return ss.str();
}

std::vector<json> read_jsonl(const fs::path& p) {
  std::vector<json> out;
  std::ifstream is(p);
  for (std::string line; std::getline(is, line);) {
    if (!line.empty()) out.push_back(json::parse(line));
  }
  return out;
}

// tiny network and few epochs; everything the CLI tests train uses this
fs::path tiny_config(const fs::path& dir, int epochs) {
  json j = {{"network",
             {{"base_width", 8},
              {"channel_multipliers", {1, 2, 2}},
              {"attention_scales", {1}},
              {"bottleneck_layers", 2},
              {"window_size", 2},
              {"num_heads", 2},
              {"embed_dim", 16}}},
            {"train",
             {{"epochs", epochs},
              {"batch_size", 4},
              {"seed", 3},
              {"validate_every", 1},
              {"val_max_cases", 2}}},
            {"sampler", {{"num_inference_steps", 3}}}};
  const auto path = dir / "tiny.json";
  std::ofstream(path) << j.dump(2);
  return path;
}

const fs::path& dataset() {
  static const fs::path dir = [] {
    auto root = testing::scratch_dir("cli_data");
    auto r = cli("gen-data --num-cases 12 --size 32 --seed 5 --out-dir " + (root / "ds").string());
    REQUIRE(r.status == 0);
    return root / "ds";
  }();
  return dir;
}

}  // namespace

TEST_CASE("gen-data: case count, determinism, fraction validation") {
  auto root = testing::scratch_dir("cli_gen");
  auto a = cli("gen-data --num-cases 100 --size 64 --seed 7 --out-dir " + (root / "a").string());
  REQUIRE(a.status == 0);
  auto b = cli("gen-data --num-cases 100 --size 64 --seed 7 --out-dir " + (root / "b").string());
  REQUIRE(b.status == 0);

  auto manifest = json::parse(slurp(root / "a" / "manifest.json"));
  CHECK(manifest.at("cases").size() == 100);
  std::size_t dirs = 0, files = 0, same = 0;
  for (const auto& entry : fs::directory_iterator(root / "a")) {
    if (!entry.is_directory()) continue;
    ++dirs;
    for (const auto& file : fs::directory_iterator(entry.path())) {
      const auto twin = root / "b" / entry.path().filename() / file.path().filename();
      ++files;
      same += cesynth::sha256_file(file.path()) == cesynth::sha256_file(twin);
    }
  }
  CHECK(dirs == 100);
  CHECK(files == 700);
  CHECK(same == files);
  CHECK(slurp(root / "a" / "manifest.json") == slurp(root / "b" / "manifest.json"));
  auto run = json::parse(slurp(root / "a" / "run_manifest.json"));
  CHECK(run.at("command") == "gen-data");
  CHECK(run.at("seed") == 7);

  auto bad = cli("gen-data --num-cases 10 --split 0.5,0.5,0.5 --out-dir " + (root / "c").string());
  CHECK(bad.status != 0);
  CHECK(bad.out.find("sum to 1") != std::string::npos);
}

TEST_CASE("config: default echo carries the recipe constants") {
  auto r = cli("config");
  REQUIRE(r.status == 0);
  auto j = json::parse(r.out);
  CHECK(j["train"]["learning_rate"] == 1e-4);
  CHECK(j["train"]["weight_decay"] == 1e-2);
  CHECK(j["train"]["grad_clip_norm"] == 1.0);
  CHECK(j["loss"]["beta"] == 0.002);
  CHECK(j["loss"]["tau"] == 0.1);
  CHECK(j["loss"]["logvar_clamp"] == json::array({-1.5, 3.0}));
  CHECK(j["sampler"]["num_inference_steps"] == 15);

  auto root = testing::scratch_dir("cli_config");
  std::ofstream(root / "bad.json") << R"({"train": {"epochs": -1, "learning_rate": "fast"}, "bogus": 1})";
  auto bad = cli("config --config " + (root / "bad.json").string());
  CHECK(bad.status != 0);
  CHECK(bad.out.find("train.epochs") != std::string::npos);
  CHECK(bad.out.find("train.learning_rate") != std::string::npos);
  CHECK(bad.out.find("bogus") != std::string::npos);
}

TEST_CASE("train: flags, logs, checkpoints and resume") {
  auto root = testing::scratch_dir("cli_train");
  const auto cfg = tiny_config(root, 3);
  const auto data = dataset().string();

  auto r = cli("train --config " + cfg.string() + " --no-dispersive --data-dir " + data +
               " --out-dir " + (root / "nodisp").string());
  REQUIRE(r.status == 0);
  auto log = read_jsonl(root / "nodisp" / "train_log.jsonl");
  REQUIRE(!log.empty());
  for (const auto& rec : log) CHECK(rec.at("disp") == 0.0);
  CHECK(read_jsonl(root / "nodisp" / "val_log.jsonl").size() == 3);
  CHECK(fs::exists(root / "nodisp" / "checkpoints" / "epoch_001.csckpt"));
  CHECK(fs::exists(root / "nodisp" / "checkpoints" / "last.csckpt"));
  auto written = json::parse(slurp(root / "nodisp" / "config.json"));
  CHECK(written["train"]["ablation"]["dispersive"] == false);

  auto full = cli("train --config " + cfg.string() + " --data-dir " + data + " --out-dir " +
                  (root / "full").string());
  REQUIRE(full.status == 0);
  auto full_log = read_jsonl(root / "full" / "train_log.jsonl");
  auto resumed = cli("train --config " + cfg.string() + " --data-dir " + data + " --out-dir " +
                     (root / "resumed").string() + " --resume " +
                     (root / "full" / "checkpoints" / "epoch_002.csckpt").string());
  REQUIRE(resumed.status == 0);
  auto tail = read_jsonl(root / "resumed" / "train_log.jsonl");
  REQUIRE(!tail.empty());
  CHECK(tail.front().at("epoch") == 2);
  // the resumed tail is the uninterrupted run's last epoch, record for record
  REQUIRE(tail.size() <= full_log.size());
  const auto offset = full_log.size() - tail.size();
  for (std::size_t i = 0; i < tail.size(); ++i) CHECK(tail[i] == full_log[offset + i]);

  auto missing = cli("train --config " + cfg.string() + " --data-dir " + (root / "nowhere").string() +
                     " --out-dir " + (root / "x").string());
  CHECK(missing.status != 0);
  CHECK(missing.out.find("manifest") != std::string::npos);
}

TEST_CASE("sample: outputs, per-step maps, determinism") {
  auto root = testing::scratch_dir("cli_sample");
  const auto cfg = tiny_config(root, 1);
  const auto data = dataset().string();
  REQUIRE(cli("train --config " + cfg.string() + " --data-dir " + data + " --out-dir " +
              (root / "run").string()).status == 0);
  const auto ckpt = (root / "run" / "checkpoints" / "last.csckpt").string();

  for (const char* name : {"s1", "s2"}) {
    auto r = cli("sample --checkpoint " + ckpt + " --data-dir " + data + " --case-id 0 --steps 4 --seed 9 --out-dir " +
                 (root / name).string());
    REQUIRE(r.status == 0);
  }
  for (const char* f : {"synthesized.png", "synthesized.cst", "uncertainty.png", "uncertainty.cst",
                        "error_map.png", "error_map.cst"}) {
    CHECK(fs::exists(root / "s1" / f));
  }
  std::size_t pngs = 0;
  for (const auto& e : fs::directory_iterator(root / "s1" / "steps")) pngs += e.path().extension() == ".png";
  CHECK(pngs == 4);
  CHECK(slurp(root / "s1" / "synthesized.png") == slurp(root / "s2" / "synthesized.png"));
  CHECK(slurp(root / "s1" / "uncertainty.png") == slurp(root / "s2" / "uncertainty.png"));
  auto unc = cesynth::read_tensor_file(root / "s1" / "uncertainty.cst");
  CHECK(unc.min().item<double>() >= std::exp(-1.5) - 1e-6);
  CHECK(unc.max().item<double>() <= std::exp(3.0) + 1e-4);

  // conditions given as files: no ground truth, so no error map
  auto manifest = json::parse(slurp(dataset() / "manifest.json"));
  const auto case_dir = dataset() / manifest["cases"][0]["dir"].get<std::string>();
  std::string files;
  for (const auto& f : manifest["cases"][0]["files"]) {
    const auto name = f.get<std::string>();
    if (name.find("t1_pre") == 0 || name.find("dwi") == 0) files += " " + (case_dir / name).string();
  }
  auto from_files = cli("sample --checkpoint " + ckpt + " --condition" + files + " --steps 4 --seed 9 --out-dir " +
                        (root / "s3").string());
  REQUIRE(from_files.status == 0);
  CHECK(!fs::exists(root / "s3" / "error_map.png"));
  CHECK(slurp(root / "s1" / "synthesized.png") == slurp(root / "s3" / "synthesized.png"));

  auto bad = cli("sample --checkpoint " + (root / "missing.csckpt").string() + " --data-dir " + data +
                 " --case-id 0 --out-dir " + (root / "s4").string());
  CHECK(bad.status != 0);
}

TEST_CASE("eval: oracle fixture scores perfectly with both sections") {
  auto root = testing::scratch_dir("cli_eval");
  cesynth::write_oracle_checkpoint(root / "oracle.csckpt");
  auto r = cli("eval --checkpoint " + (root / "oracle.csckpt").string() + " --data-dir " + dataset().string() +
               " --split test --out-dir " + (root / "e").string());
  REQUIRE(r.status == 0);
  const auto md = slurp(root / "e" / "metrics.md");
  CHECK(md.find("Global") != std::string::npos);
  CHECK(md.find("Tumor") != std::string::npos);
  for (const char* col : {"SSIM", "PSNR", "NMSE", "nHFEN"}) CHECK(md.find(col) != std::string::npos);
  const auto csv = slurp(root / "e" / "metrics.csv");
  std::istringstream is(csv);
  std::string header;
  std::getline(is, header);
  CHECK(header.find("ssim") != std::string::npos);
  std::size_t scored = 0;
  for (std::string line; std::getline(is, line);) {
    std::stringstream ls(line);
    std::vector<std::string> cells;
    for (std::string cell; std::getline(ls, cell, ',');) cells.push_back(cell);
    if (cells.size() < 3 || cells[0] == "summary" || cells[1] != "global") continue;
    ++scored;
    CHECK(std::stod(cells[2]) >= 0.999);
  }
  CHECK(scored > 0);
  CHECK(csv.find("summary,global") != std::string::npos);
  CHECK(csv.find("summary,tumor") != std::string::npos);

  auto empty = cli("eval --checkpoint " + (root / "oracle.csckpt").string() + " --data-dir " +
                   dataset().string() + " --split nonsense --out-dir " + (root / "f").string());
  CHECK(empty.status != 0);
}

TEST_CASE("ablation: four rows, cross-linked manifests, reproducible table") {
  auto root = testing::scratch_dir("cli_ablation");
  const auto cfg = tiny_config(root, 1);
  for (const char* name : {"a", "b"}) {
    auto r = cli("ablation --config " + cfg.string() + " --data-dir " + dataset().string() + " --out-dir " +
                 (root / name).string());
    REQUIRE(r.status == 0);
  }
  const auto table = slurp(root / "a" / "ablation.md");
  CHECK(table == slurp(root / "b" / "ablation.md"));
  for (const char* row : {"| Baseline", "| w UncA |", "| w UncA & FDisp", "| Full"}) {
    CHECK(table.find(row) != std::string::npos);
  }
  auto rows = json::parse(slurp(root / "a" / "ablation.json"));
  REQUIRE(rows.size() == 4);
  for (const auto& row : rows) {
    const fs::path ckpt = row.at("checkpoint").get<std::string>();
    CHECK(fs::exists(ckpt));
    auto row_manifest = json::parse(slurp(ckpt.parent_path() / "row_manifest.json"));
    CHECK(row_manifest.at("checksum") == cesynth::sha256_file(ckpt));
  }
}
