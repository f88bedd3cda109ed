#pragma once

// On-disk formats.
//
// Tensor file (.cst): 8-byte magic "CSTENSOR", uint32 version (1), uint32
// rank, rank x uint64 dims, then row-major little-endian float32 values.
//
// Container (.csckpt): 8-byte magic "CSCKPT01", uint64 header length, a JSON
// header, then the raw little-endian payload. The header carries free-form
// "meta" plus a "tensors" array of {name, dtype, shape, offset, nbytes};
// dtype is "f32" for parameters and optimizer moments, "i64"/"u8" for
// counters and RNG state. Offsets are relative to the payload start.

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include <torch/torch.h>

#include "json.hpp"

namespace cesynth {

namespace fs = std::filesystem;

void write_tensor_file(const fs::path& path, const torch::Tensor& tensor);
torch::Tensor read_tensor_file(const fs::path& path);

struct NamedTensor {
  std::string name;
  torch::Tensor value;
};

struct Container {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<NamedTensor> tensors;

  bool contains(const std::string& name) const;
  const torch::Tensor& at(const std::string& name) const;
  void add(std::string name, torch::Tensor value);
};

void write_container(const fs::path& path, const Container& container);

/// Appends every parameter of `module` as "<prefix><name>" (float32).
void append_parameters(Container& container, const torch::nn::Module& module,
                       const std::string& prefix = "");
/// Copies "<prefix><name>" entries into `module`; every parameter must be
/// present with an identical shape, and no unexpected "<prefix>" entries may
/// remain.
void load_parameters(torch::nn::Module& module, const Container& container,
                     const std::string& prefix = "");
Container read_container(const fs::path& path);

/// 8-bit grayscale PNG; values are mapped linearly from [lo, hi] to [0, 255]
/// and clipped. Accepts any tensor with exactly H*W elements after squeezing.
void write_png_gray(const fs::path& path, const torch::Tensor& image, double lo = 0.0,
                    double hi = 1.0);

/// Lowercase hex SHA-256 of a file's bytes.
std::string sha256_file(const fs::path& path);

}  // namespace cesynth
