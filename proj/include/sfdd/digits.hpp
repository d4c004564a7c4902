#pragma once

// Procedural 28x28 grayscale digit corpus: a 5x7 glyph per class rendered
// under random affine jitter (shift, scale, rotation, shear), stroke
// intensity variation and pixel noise. Deterministic in (seed, index), so
// desk-scale experiments are reproducible without external dataset files.

#include <cmath>
#include <cstdint>
#include <fstream>
#include <string>
#include <vector>

#include "sfdd/data.hpp"
#include "sfdd/rng.hpp"
#include "sfdd/tensor.hpp"

namespace sfdd::digits {

namespace detail {

// Row-major 5-bit rows, top to bottom.
inline const std::uint8_t* glyph(int digit) {
  static const std::uint8_t font[10][7] = {
      {0b01110, 0b10001, 0b10011, 0b10101, 0b11001, 0b10001, 0b01110},  // 0
      {0b00100, 0b01100, 0b00100, 0b00100, 0b00100, 0b00100, 0b01110},  // 1
      {0b01110, 0b10001, 0b00001, 0b00010, 0b00100, 0b01000, 0b11111},  // 2
      {0b11111, 0b00010, 0b00100, 0b00010, 0b00001, 0b10001, 0b01110},  // 3
      {0b00010, 0b00110, 0b01010, 0b10010, 0b11111, 0b00010, 0b00010},  // 4
      {0b11111, 0b10000, 0b11110, 0b00001, 0b00001, 0b10001, 0b01110},  // 5
      {0b00110, 0b01000, 0b10000, 0b11110, 0b10001, 0b10001, 0b01110},  // 6
      {0b11111, 0b00001, 0b00010, 0b00100, 0b01000, 0b01000, 0b01000},  // 7
      {0b01110, 0b10001, 0b10001, 0b01110, 0b10001, 0b10001, 0b01110},  // 8
      {0b01110, 0b10001, 0b10001, 0b01111, 0b00001, 0b00010, 0b01100},  // 9
  };
  return font[digit];
}

inline float glyph_sample(const std::uint8_t* rows, float u, float v) {
  const float x = u - 0.5f, y = v - 0.5f;
  const int x0 = static_cast<int>(std::floor(x)), y0 = static_cast<int>(std::floor(y));
  auto at = [&](int xi, int yi) -> float {
    if (xi < 0 || xi >= 5 || yi < 0 || yi >= 7) return 0.0f;
    return static_cast<float>((rows[yi] >> (4 - xi)) & 1);
  };
  const float fx = x - static_cast<float>(x0), fy = y - static_cast<float>(y0);
  const float a = at(x0, y0) * (1 - fx) + at(x0 + 1, y0) * fx;
  const float b = at(x0, y0 + 1) * (1 - fx) + at(x0 + 1, y0 + 1) * fx;
  return a * (1 - fy) + b * fy;
}

}  // namespace detail

inline void render(int digit, RngStream& rng, float* out28x28) {
  const std::uint8_t* rows = detail::glyph(digit);
  const float tx = static_cast<float>(rng.uniform01() * 5.0 - 2.5);
  const float ty = static_cast<float>(rng.uniform01() * 5.0 - 2.5);
  const float theta = static_cast<float>((rng.uniform01() * 2.0 - 1.0) * 0.25);
  const float scale = static_cast<float>(0.8 + rng.uniform01() * 0.35);
  const float shear = static_cast<float>((rng.uniform01() * 2.0 - 1.0) * 0.15);
  const float amp = static_cast<float>(0.75 + rng.uniform01() * 0.25);
  const float ct = std::cos(theta), st = std::sin(theta);
  const float ppc = 3.2f * scale;  // pixels per glyph cell

  for (int py = 0; py < 28; ++py)
    for (int px = 0; px < 28; ++px) {
      const float cx = static_cast<float>(px) - 14.0f - tx;
      const float cy = static_cast<float>(py) - 14.0f - ty;
      const float rx = ct * cx + st * cy;
      const float ry = -st * cx + ct * cy;
      const float sx = rx - shear * ry;
      const float u = sx / ppc + 2.5f;
      const float v = ry / ppc + 3.5f;
      float val = amp * detail::glyph_sample(rows, u, v);
      val += static_cast<float>(rng.normal()) * 0.02f;
      out28x28[py * 28 + px] = std::min(1.0f, std::max(0.0f, val));
    }
}

// Balanced class sequence: image i has label i % 10.
inline data::LabeledDataset make_dataset(int m, std::uint64_t seed,
                                         std::string_view split = "train") {
  std::vector<float> px(static_cast<size_t>(m) * 28 * 28);
  std::vector<int> labels(static_cast<size_t>(m));
  for (int i = 0; i < m; ++i) {
    const int digit = i % 10;
    RngStream rng(seed, split, static_cast<std::uint64_t>(i));
    render(digit, rng, px.data() + static_cast<size_t>(i) * 28 * 28);
    labels[static_cast<size_t>(i)] = digit;
  }
  data::LabeledDataset ds;
  ds.images = Tensor({m, 1, 28, 28}, std::move(px));
  ds.labels = std::move(labels);
  ds.n_c = 10;
  return ds;
}

// Writes a dataset as the canonical IDX pair (big-endian headers, u8 pixels).
inline void write_idx(const data::LabeledDataset& ds, const std::string& images_path,
                      const std::string& labels_path) {
  auto be32 = [](std::ofstream& out, std::uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v >> 24), static_cast<unsigned char>(v >> 16),
                          static_cast<unsigned char>(v >> 8), static_cast<unsigned char>(v)};
    out.write(reinterpret_cast<char*>(b), 4);
  };
  std::ofstream fi(images_path, std::ios::binary);
  require(fi.good(), ErrorKind::Io, "cannot open " + images_path + " for writing");
  be32(fi, 0x00000803);
  be32(fi, static_cast<std::uint32_t>(ds.size()));
  be32(fi, static_cast<std::uint32_t>(ds.height()));
  be32(fi, static_cast<std::uint32_t>(ds.width()));
  for (std::int64_t i = 0; i < ds.images.size(); ++i) {
    const float v = ds.images.data()[i];
    fi.put(static_cast<char>(static_cast<int>(std::lround(v * 255.0f))));
  }
  require(fi.good(), ErrorKind::Io, "write failure on " + images_path);

  std::ofstream fl(labels_path, std::ios::binary);
  require(fl.good(), ErrorKind::Io, "cannot open " + labels_path + " for writing");
  be32(fl, 0x00000801);
  be32(fl, static_cast<std::uint32_t>(ds.size()));
  for (int l : ds.labels) fl.put(static_cast<char>(l));
  require(fl.good(), ErrorKind::Io, "write failure on " + labels_path);
}

}  // namespace sfdd::digits
