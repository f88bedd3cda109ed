#pragma once

// Synthetic paired breast-MRI phantoms: pre-contrast T1 and two diffusion
// weightings as conditions, an analytically enhanced T1 as target, and
// background / breast / tumor masks.

#include <array>
#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "json.hpp"

namespace cesynth {

/// Every image is (1, 1, size, size) float32 in [0, 1]; masks are exactly 0/1.
struct PhantomCase {
  std::int64_t case_id = 0;
  std::uint64_t seed = 0;
  std::int64_t num_tumors = 0;
  torch::Tensor t1_pre, dwi_b0, dwi_b800;
  torch::Tensor t1_post;
  torch::Tensor background_mask, breast_mask, tumor_mask;

  /// (1, 3, H, W) in the fixed channel order T1-pre, DWI-b0, DWI-b800.
  torch::Tensor condition() const;
};

/// Fully deterministic in (seed, size). size must be a positive multiple of 16.
PhantomCase generate_case(std::uint64_t seed, std::int64_t size, std::int64_t case_id = 0);

struct SplitFractions {
  double train = 0.7;
  double val = 0.2;
  double test = 0.1;
};

enum class Split { train, val, test };
std::string to_string(Split split);
Split split_from_string(const std::string& name);

struct DatasetManifest {
  std::int64_t size = 0;
  std::uint64_t base_seed = 0;
  SplitFractions fractions;
  struct Entry {
    std::int64_t id = 0;
    Split split = Split::train;
    std::uint64_t seed = 0;
    std::int64_t num_tumors = 0;
    std::string dir;
  };
  std::vector<Entry> cases;

  std::vector<std::int64_t> ids(Split split) const;
  nlohmann::json to_json() const;
  static DatasetManifest from_json(const nlohmann::json& j);
};

/// Per-case seed derived from the dataset seed and case index.
std::uint64_t case_seed(std::uint64_t base_seed, std::int64_t index);

/// Case-level split assignment: counts are round(fraction * num_cases) for
/// train and val, the remainder for test; membership is a seeded shuffle.
DatasetManifest plan_dataset(std::int64_t num_cases, std::int64_t size,
                             const SplitFractions& fractions, std::uint64_t base_seed);

/// Generates and writes every case plus manifest.json under `out_dir`.
DatasetManifest generate_dataset(std::int64_t num_cases, std::int64_t size,
                                 const SplitFractions& fractions, std::uint64_t base_seed,
                                 const std::filesystem::path& out_dir, bool previews = false);

DatasetManifest read_manifest(const std::filesystem::path& dataset_dir);
PhantomCase load_case(const std::filesystem::path& dataset_dir, const DatasetManifest::Entry& entry);
std::vector<PhantomCase> load_split(const std::filesystem::path& dataset_dir, Split split);

inline constexpr std::array<const char*, 7> kCaseFiles = {
    "t1_pre.cst",          "dwi_b0.cst",      "dwi_b800.cst",    "t1_post.cst",
    "background_mask.cst", "breast_mask.cst", "tumor_mask.cst"};

/// Stacked training/evaluation batch; all tensors have leading dimension B.
struct Batch {
  torch::Tensor condition;  // (B, 3, H, W)
  torch::Tensor target;     // (B, 1, H, W)
  torch::Tensor background_mask, breast_mask, tumor_mask;
  std::vector<std::int64_t> case_ids;

  std::int64_t size() const { return target.size(0); }
};

Batch collate(std::span<const PhantomCase> cases);
Batch collate(const std::vector<const PhantomCase*>& cases);

}  // namespace cesynth
