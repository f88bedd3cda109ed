#include "cesynth/rng.hpp"

#include <ATen/CPUGeneratorImpl.h>

#include <cstring>
#include <stdexcept>

namespace cesynth {

Rng::Rng(std::uint64_t seed)
    : seed_(seed), gen_(at::make_generator<at::CPUGeneratorImpl>(seed)) {}

torch::Tensor Rng::normal(at::IntArrayRef shape, const torch::TensorOptions& options) {
  return torch::randn(shape, gen_, options);
}

torch::Tensor Rng::uniform_int(std::int64_t low, std::int64_t high, std::int64_t count) {
  if (high < low) throw std::invalid_argument("Rng::uniform_int: high < low");
  return torch::randint(low, high + 1, {count}, gen_, torch::kInt64);
}

std::vector<std::int64_t> Rng::permutation(std::int64_t n) {
  // ATen takes the generator lock itself
  auto p = torch::randperm(n, gen_, torch::kInt64);
  return {p.data_ptr<std::int64_t>(), p.data_ptr<std::int64_t>() + n};
}

std::vector<std::uint8_t> Rng::state() const {
  auto s = gen_.get_state().contiguous();
  const auto* p = s.data_ptr<std::uint8_t>();
  std::vector<std::uint8_t> out(p, p + s.numel());
  // seed travels with the state so a restored Rng reports the same origin
  std::uint8_t seed_bytes[8];
  std::memcpy(seed_bytes, &seed_, 8);
  out.insert(out.end(), seed_bytes, seed_bytes + 8);
  return out;
}

void Rng::set_state(const std::vector<std::uint8_t>& bytes) {
  if (bytes.size() < 8) throw std::invalid_argument("Rng::set_state: truncated state");
  const auto n = static_cast<std::int64_t>(bytes.size() - 8);
  auto t = torch::empty({n}, torch::kUInt8);
  std::memcpy(t.data_ptr<std::uint8_t>(), bytes.data(), n);
  gen_.set_state(t);
  std::memcpy(&seed_, bytes.data() + n, 8);
}

}  // namespace cesynth
