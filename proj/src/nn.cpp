#include "cvc/nn.hpp"

namespace cvc {

uint64_t derive_seed(uint64_t root, const std::string& tag, uint64_t counter) {
  // splitmix64 mixing of root, tag hash and counter
  uint64_t x = root ^ 0x9e3779b97f4a7c15ULL;
  for (char c : tag) x = (x ^ static_cast<uint64_t>(static_cast<unsigned char>(c))) * 0xbf58476d1ce4e5b9ULL;
  x ^= counter + 0x9e3779b97f4a7c15ULL + (x << 6) + (x >> 2);
  auto mix = [](uint64_t z) {
    z += 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
  };
  return mix(mix(x));
}

double cosine_lr(int64_t step, int64_t total_steps, int64_t warmup_steps,
                 double base_lr, double warmup_lr) {
  check_dim(step >= 0 && step <= total_steps, "cosine_lr: step out of range");
  check_dim(warmup_steps < total_steps, "cosine_lr: warmup >= total");
  if (step < warmup_steps)
    return warmup_lr + (base_lr - warmup_lr) * static_cast<double>(step) /
                           static_cast<double>(warmup_steps);
  const double progress = static_cast<double>(step - warmup_steps) /
                          static_cast<double>(total_steps - warmup_steps);
  return base_lr * 0.5 * (1.0 + std::cos(M_PI * progress));
}

}  // namespace cvc
