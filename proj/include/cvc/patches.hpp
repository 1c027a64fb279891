#pragma once

#include <string>
#include <vector>

#include "cvc/tensor.hpp"

namespace cvc {

// RGB image, values in [0,1], row-major (y, x, channel).
struct Image {
  int64_t height = 0;
  int64_t width = 0;
  std::vector<float> data;  // height*width*3

  Image() = default;
  Image(int64_t h, int64_t w) : height(h), width(w), data(h * w * 3, 0.f) {}

  float& at(int64_t y, int64_t x, int c) { return data[(y * width + x) * 3 + c]; }
  float at(int64_t y, int64_t x, int c) const { return data[(y * width + x) * 3 + c]; }
};

// Tokenized image: one row per patch, row-major grid order. Each token is a
// flattened P x P x 3 block (y-major, then x, then channel).
template <typename T>
struct PatchSet {
  Tensor<T> tokens;  // [N, P*P*3]
  int64_t grid_rows = 0;
  int64_t grid_cols = 0;
  int64_t patch = 0;

  int64_t n_tokens() const { return grid_rows * grid_cols; }
};

// Boolean token mask for the first view; true = masked.
struct MaskSpec {
  std::vector<uint8_t> mask;  // length N, 1 = masked
  double ratio = 0.0;

  int64_t n_masked() const {
    int64_t n = 0;
    for (uint8_t m : mask) n += m ? 1 : 0;
    return n;
  }
  int64_t n_visible() const { return static_cast<int64_t>(mask.size()) - n_masked(); }
  std::vector<int64_t> visible_indices() const {
    std::vector<int64_t> v;
    for (size_t i = 0; i < mask.size(); ++i)
      if (!mask[i]) v.push_back(static_cast<int64_t>(i));
    return v;
  }
  std::vector<int64_t> masked_indices() const {
    std::vector<int64_t> v;
    for (size_t i = 0; i < mask.size(); ++i)
      if (mask[i]) v.push_back(static_cast<int64_t>(i));
    return v;
  }
};

template <typename T>
PatchSet<T> patchify(const Image& img, int64_t patch);

template <typename T>
Image unpatchify(const PatchSet<T>& ps);

// Generic inverse for C channels per pixel: tokens [N, P*P*C] -> [H, W, C]
// as a flat vector, same block layout as patchify.
template <typename T>
std::vector<T> unpatchify_channels(const Tensor<T>& tokens, int64_t grid_rows,
                                   int64_t grid_cols, int64_t patch, int64_t channels);

// Generic tokenizer for C-channel maps, flat [H, W, C] input.
template <typename T>
Tensor<T> patchify_channels(const std::vector<float>& flat, int64_t height,
                            int64_t width, int64_t channels, int64_t patch);

// Uniformly random subset of exactly floor(r*N) masked indices
// (partial Fisher-Yates over a seeded generator).
MaskSpec sample_mask(int64_t n_tokens, double ratio, uint64_t seed);

// 2-d sine-cosine embedding, parameter free. First half of the channels
// encodes the column index, second half the row index, each as interleaved
// sin/cos over geometric frequencies with base 10000.
template <typename T>
Tensor<T> pos_embed_2d(int64_t rows, int64_t cols, int64_t dim);

// Per-token standardization: x -> (x - mean) / (std + eps), statistics over
// all values of the token.
template <typename T>
PatchSet<T> normalize_targets(const PatchSet<T>& ps, T eps = T(1e-6));

// Binary PPM (P6, maxval 255). Values clamped to [0,1] on write.
Image read_ppm(const std::string& path);
void write_ppm(const std::string& path, const Image& img);

}  // namespace cvc
