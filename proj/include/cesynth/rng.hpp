#pragma once

#include <cstdint>
#include <vector>

#include <torch/torch.h>

namespace cesynth {

/// Explicit, seeded random source. Every stochastic operation takes one of
/// these by reference so that runs are reproducible and state can be
/// checkpointed.
class Rng {
 public:
  explicit Rng(std::uint64_t seed);

  torch::Tensor normal(at::IntArrayRef shape, const torch::TensorOptions& options);
  /// Uniform integers in [low, high] (inclusive), int64.
  torch::Tensor uniform_int(std::int64_t low, std::int64_t high, std::int64_t count);
  std::vector<std::int64_t> permutation(std::int64_t n);

  std::vector<std::uint8_t> state() const;
  void set_state(const std::vector<std::uint8_t>& bytes);

  std::uint64_t seed() const { return seed_; }

 private:
  std::uint64_t seed_;
  at::Generator gen_;
};

}  // namespace cesynth
