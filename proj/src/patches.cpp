#include "cvc/patches.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <random>

namespace cvc {

template <typename T>
PatchSet<T> patchify(const Image& img, int64_t patch) {
  check_dim(patch > 0, "patch size must be positive");
  check_dim(img.height % patch == 0 && img.width % patch == 0,
            "image dims not divisible by patch size");
  PatchSet<T> ps;
  ps.patch = patch;
  ps.grid_rows = img.height / patch;
  ps.grid_cols = img.width / patch;
  const int64_t tok_len = patch * patch * 3;
  ps.tokens = Tensor<T>({ps.n_tokens(), tok_len});
  for (int64_t gr = 0; gr < ps.grid_rows; ++gr)
    for (int64_t gc = 0; gc < ps.grid_cols; ++gc) {
      T* tok = &ps.tokens.data[(gr * ps.grid_cols + gc) * tok_len];
      for (int64_t py = 0; py < patch; ++py)
        for (int64_t px = 0; px < patch; ++px)
          for (int c = 0; c < 3; ++c)
            tok[(py * patch + px) * 3 + c] =
                static_cast<T>(img.at(gr * patch + py, gc * patch + px, c));
    }
  return ps;
}

template <typename T>
Image unpatchify(const PatchSet<T>& ps) {
  check_dim(ps.tokens.cols() == ps.patch * ps.patch * 3,
            "token length != P*P*3");
  check_dim(ps.tokens.rows() == ps.n_tokens(), "grid/token count mismatch");
  auto flat = unpatchify_channels(ps.tokens, ps.grid_rows, ps.grid_cols, ps.patch, 3);
  Image img(ps.grid_rows * ps.patch, ps.grid_cols * ps.patch);
  for (size_t i = 0; i < flat.size(); ++i) img.data[i] = static_cast<float>(flat[i]);
  return img;
}

template <typename T>
std::vector<T> unpatchify_channels(const Tensor<T>& tokens, int64_t grid_rows,
                                   int64_t grid_cols, int64_t patch,
                                   int64_t channels) {
  const int64_t tok_len = patch * patch * channels;
  check_dim(tokens.cols() == tok_len, "token length != P*P*C");
  check_dim(tokens.rows() == grid_rows * grid_cols, "grid/token count mismatch");
  const int64_t W = grid_cols * patch;
  std::vector<T> out(static_cast<size_t>(grid_rows * patch * W * channels));
  for (int64_t gr = 0; gr < grid_rows; ++gr)
    for (int64_t gc = 0; gc < grid_cols; ++gc) {
      const T* tok = &tokens.data[(gr * grid_cols + gc) * tok_len];
      for (int64_t py = 0; py < patch; ++py)
        for (int64_t px = 0; px < patch; ++px)
          for (int64_t c = 0; c < channels; ++c)
            out[((gr * patch + py) * W + gc * patch + px) * channels + c] =
                tok[(py * patch + px) * channels + c];
    }
  return out;
}

template <typename T>
Tensor<T> patchify_channels(const std::vector<float>& flat, int64_t height,
                            int64_t width, int64_t channels, int64_t patch) {
  check_dim(patch > 0 && height % patch == 0 && width % patch == 0,
            "map dims not divisible by patch size");
  check_dim(static_cast<int64_t>(flat.size()) == height * width * channels,
            "map size does not match dims");
  const int64_t rows = height / patch, cols = width / patch;
  const int64_t tok_len = patch * patch * channels;
  Tensor<T> tokens({rows * cols, tok_len});
  for (int64_t gr = 0; gr < rows; ++gr)
    for (int64_t gc = 0; gc < cols; ++gc) {
      T* tok = &tokens.data[(gr * cols + gc) * tok_len];
      for (int64_t py = 0; py < patch; ++py)
        for (int64_t px = 0; px < patch; ++px)
          for (int64_t c = 0; c < channels; ++c)
            tok[(py * patch + px) * channels + c] = static_cast<T>(
                flat[((gr * patch + py) * width + gc * patch + px) * channels + c]);
    }
  return tokens;
}

MaskSpec sample_mask(int64_t n_tokens, double ratio, uint64_t seed) {
  check_dim(ratio >= 0.0 && ratio <= 1.0, "masking ratio outside [0,1]");
  const int64_t n_masked = static_cast<int64_t>(std::floor(ratio * static_cast<double>(n_tokens)));
  MaskSpec ms;
  ms.ratio = ratio;
  ms.mask.assign(static_cast<size_t>(n_tokens), 0);
  std::vector<int64_t> idx(static_cast<size_t>(n_tokens));
  for (int64_t i = 0; i < n_tokens; ++i) idx[i] = i;
  std::mt19937_64 rng(seed);
  // partial Fisher-Yates: first n_masked entries are the masked subset
  for (int64_t i = 0; i < n_masked; ++i) {
    std::uniform_int_distribution<int64_t> pick(i, n_tokens - 1);
    std::swap(idx[i], idx[pick(rng)]);
    ms.mask[idx[i]] = 1;
  }
  return ms;
}

template <typename T>
Tensor<T> pos_embed_2d(int64_t rows, int64_t cols, int64_t dim) {
  if (dim % 4 != 0) throw ConfigError("pos_embed_2d: dim must be divisible by 4");
  Tensor<T> out({rows * cols, dim});
  const int64_t half = dim / 2;     // per-axis channels
  const int64_t n_freq = half / 2;  // sin/cos pairs per axis
  for (int64_t r = 0; r < rows; ++r)
    for (int64_t c = 0; c < cols; ++c) {
      T* row = &out.data[(r * cols + c) * dim];
      for (int64_t f = 0; f < n_freq; ++f) {
        const double omega =
            1.0 / std::pow(10000.0, static_cast<double>(f) / static_cast<double>(n_freq));
        row[2 * f] = static_cast<T>(std::sin(c * omega));
        row[2 * f + 1] = static_cast<T>(std::cos(c * omega));
        row[half + 2 * f] = static_cast<T>(std::sin(r * omega));
        row[half + 2 * f + 1] = static_cast<T>(std::cos(r * omega));
      }
    }
  return out;
}

template <typename T>
PatchSet<T> normalize_targets(const PatchSet<T>& ps, T eps) {
  check_dim(eps > T(0), "normalize_targets: eps must be > 0");
  PatchSet<T> out = ps;
  const int64_t C = ps.tokens.cols();
  for (int64_t r = 0; r < ps.tokens.rows(); ++r) {
    T* tok = &out.tokens.data[r * C];
    double mean = 0;
    for (int64_t i = 0; i < C; ++i) mean += tok[i];
    mean /= static_cast<double>(C);
    double var = 0;
    for (int64_t i = 0; i < C; ++i) var += (tok[i] - mean) * (tok[i] - mean);
    var /= static_cast<double>(C);
    const double denom = std::sqrt(var) + static_cast<double>(eps);
    for (int64_t i = 0; i < C; ++i)
      tok[i] = static_cast<T>((tok[i] - mean) / denom);
  }
  return out;
}

Image read_ppm(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot open PPM file: " + path);
  std::string magic;
  f >> magic;
  if (magic != "P6") throw DataError("not a binary PPM (P6) file: " + path);
  auto next_int = [&](const char* what) {
    // skip whitespace and '#' comments
    int ch;
    while ((ch = f.peek()) != EOF) {
      if (ch == '#') {
        std::string line;
        std::getline(f, line);
      } else if (std::isspace(ch)) {
        f.get();
      } else {
        break;
      }
    }
    int64_t v;
    if (!(f >> v)) throw DataError(std::string("PPM: missing ") + what + ": " + path);
    return v;
  };
  const int64_t w = next_int("width");
  const int64_t h = next_int("height");
  const int64_t maxval = next_int("maxval");
  if (w <= 0 || h <= 0) throw DataError("PPM: bad dimensions: " + path);
  if (maxval != 255) throw DataError("PPM: only maxval 255 supported: " + path);
  f.get();  // single whitespace after header
  std::vector<unsigned char> raw(static_cast<size_t>(w * h * 3));
  f.read(reinterpret_cast<char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (f.gcount() != static_cast<std::streamsize>(raw.size()))
    throw DataError("PPM: truncated pixel data: " + path);
  Image img(h, w);
  for (size_t i = 0; i < raw.size(); ++i)
    img.data[i] = static_cast<float>(raw[i]) / 255.0f;
  return img;
}

void write_ppm(const std::string& path, const Image& img) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw DataError("cannot write PPM file: " + path);
  f << "P6\n" << img.width << " " << img.height << "\n255\n";
  std::vector<unsigned char> raw(img.data.size());
  for (size_t i = 0; i < img.data.size(); ++i) {
    float v = std::min(1.0f, std::max(0.0f, img.data[i]));
    raw[i] = static_cast<unsigned char>(std::lround(v * 255.0f));
  }
  f.write(reinterpret_cast<const char*>(raw.data()), static_cast<std::streamsize>(raw.size()));
  if (!f) throw DataError("PPM: write failed: " + path);
}

template PatchSet<float> patchify<float>(const Image&, int64_t);
template PatchSet<double> patchify<double>(const Image&, int64_t);
template Image unpatchify<float>(const PatchSet<float>&);
template Image unpatchify<double>(const PatchSet<double>&);
template std::vector<float> unpatchify_channels<float>(const Tensor<float>&, int64_t, int64_t, int64_t, int64_t);
template std::vector<double> unpatchify_channels<double>(const Tensor<double>&, int64_t, int64_t, int64_t, int64_t);
template Tensor<float> patchify_channels<float>(const std::vector<float>&, int64_t, int64_t, int64_t, int64_t);
template Tensor<double> patchify_channels<double>(const std::vector<float>&, int64_t, int64_t, int64_t, int64_t);
template Tensor<float> pos_embed_2d<float>(int64_t, int64_t, int64_t);
template Tensor<double> pos_embed_2d<double>(int64_t, int64_t, int64_t);
template PatchSet<float> normalize_targets<float>(const PatchSet<float>&, float);
template PatchSet<double> normalize_targets<double>(const PatchSet<double>&, double);

}  // namespace cvc
