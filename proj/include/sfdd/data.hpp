#pragma once

#include <charconv>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "sfdd/error.hpp"
#include "sfdd/rng.hpp"
#include "sfdd/tensor.hpp"

namespace sfdd::data {

struct LabeledDataset {
  Tensor images;            // [m x C x H x W], values in [0,1]
  std::vector<int> labels;  // m class ids, each < n_c
  int n_c = 0;

  int size() const { return images.defined() ? images.shape()[0] : 0; }
  int channels() const { return images.shape()[1]; }
  int height() const { return images.shape()[2]; }
  int width() const { return images.shape()[3]; }
};

inline void validate(const LabeledDataset& ds) {
  require(ds.size() >= 1, ErrorKind::InvalidInput, "dataset is empty");
  require(static_cast<int>(ds.labels.size()) == ds.size(), ErrorKind::Consistency,
          "label count does not match image count");
  require(ds.size() >= ds.n_c, ErrorKind::InvalidInput,
          "dataset smaller than its class count");
  for (int l : ds.labels)
    require(l >= 0 && l < ds.n_c, ErrorKind::InvalidLabel, "label out of range");
}

// ---------------------------------------------------------------------------
// IDX ingestion (canonical MNIST binary layout, big-endian)
// ---------------------------------------------------------------------------

namespace detail {

constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

inline std::uint32_t read_be32(std::istream& in, const std::string& what) {
  unsigned char b[4];
  in.read(reinterpret_cast<char*>(b), 4);
  require(in.gcount() == 4, ErrorKind::Io, "truncated file while reading " + what);
  return (static_cast<std::uint32_t>(b[0]) << 24) | (static_cast<std::uint32_t>(b[1]) << 16) |
         (static_cast<std::uint32_t>(b[2]) << 8) | static_cast<std::uint32_t>(b[3]);
}

}  // namespace detail

inline LabeledDataset load_idx(const std::string& images_path, const std::string& labels_path) {
  std::ifstream fi(images_path, std::ios::binary);
  require(fi.good(), ErrorKind::Io, "cannot open " + images_path);
  const auto magic_i = detail::read_be32(fi, "images magic");
  require(magic_i == detail::kIdxImagesMagic, ErrorKind::Format,
          "bad images magic in " + images_path);
  const int m = static_cast<int>(detail::read_be32(fi, "image count"));
  const int h = static_cast<int>(detail::read_be32(fi, "rows"));
  const int w = static_cast<int>(detail::read_be32(fi, "cols"));
  require(m >= 1 && h >= 1 && w >= 1, ErrorKind::Format, "degenerate IDX dimensions");

  std::vector<unsigned char> bytes(static_cast<size_t>(m) * h * w);
  fi.read(reinterpret_cast<char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
  require(fi.gcount() == static_cast<std::streamsize>(bytes.size()), ErrorKind::Io,
          "truncated pixel data in " + images_path);

  std::ifstream fl(labels_path, std::ios::binary);
  require(fl.good(), ErrorKind::Io, "cannot open " + labels_path);
  const auto magic_l = detail::read_be32(fl, "labels magic");
  require(magic_l == detail::kIdxLabelsMagic, ErrorKind::Format,
          "bad labels magic in " + labels_path);
  const int ml = static_cast<int>(detail::read_be32(fl, "label count"));
  require(ml == m, ErrorKind::Consistency,
          "image/label count mismatch: " + std::to_string(m) + " vs " + std::to_string(ml));
  std::vector<unsigned char> lab(static_cast<size_t>(m));
  fl.read(reinterpret_cast<char*>(lab.data()), m);
  require(fl.gcount() == m, ErrorKind::Io, "truncated label data in " + labels_path);

  LabeledDataset ds;
  std::vector<float> px(bytes.size());
  for (size_t i = 0; i < bytes.size(); ++i) px[i] = static_cast<float>(bytes[i]) / 255.0f;
  ds.images = Tensor({m, 1, h, w}, std::move(px));
  ds.labels.assign(lab.begin(), lab.end());
  ds.n_c = *std::max_element(ds.labels.begin(), ds.labels.end()) + 1;
  validate(ds);
  return ds;
}

// ---------------------------------------------------------------------------
// CSV ingestion: header-less, comma-separated, label first then C*H*W reals.
// ---------------------------------------------------------------------------

inline LabeledDataset load_csv(const std::string& path, int c, int h, int w, int n_c = 0) {
  require(c >= 1 && h >= 1 && w >= 1, ErrorKind::InvalidParameter, "bad image dims");
  std::ifstream in(path);
  require(in.good(), ErrorKind::Io, "cannot open " + path);
  const size_t fields = static_cast<size_t>(c) * h * w;

  std::vector<float> px;
  std::vector<int> labels;
  std::string line;
  int row = 0;
  while (std::getline(in, line)) {
    ++row;
    if (line.empty()) continue;
    std::vector<float> vals;
    vals.reserve(fields + 1);
    const char* p = line.data();
    const char* end = p + line.size();
    while (p < end) {
      float v = 0.0f;
      auto [next, ec] = std::from_chars(p, end, v);
      require(ec == std::errc(), ErrorKind::Format,
              "non-numeric field at row " + std::to_string(row));
      vals.push_back(v);
      p = next;
      if (p < end) {
        require(*p == ',', ErrorKind::Format, "bad separator at row " + std::to_string(row));
        ++p;
      }
    }
    require(vals.size() == fields + 1, ErrorKind::Format,
            "wrong field count at row " + std::to_string(row) + ": got " +
                std::to_string(vals.size()) + ", want " + std::to_string(fields + 1));
    const int label = static_cast<int>(vals[0]);
    require(static_cast<float>(label) == vals[0] && label >= 0, ErrorKind::Format,
            "bad label at row " + std::to_string(row));
    if (n_c > 0)
      require(label < n_c, ErrorKind::InvalidLabel,
              "label >= n_c at row " + std::to_string(row));
    labels.push_back(label);
    px.insert(px.end(), vals.begin() + 1, vals.end());
  }
  require(!labels.empty(), ErrorKind::InvalidInput, "empty CSV dataset " + path);

  LabeledDataset ds;
  ds.images = Tensor({static_cast<int>(labels.size()), c, h, w}, std::move(px));
  ds.labels = std::move(labels);
  ds.n_c = n_c > 0 ? n_c : *std::max_element(ds.labels.begin(), ds.labels.end()) + 1;
  validate(ds);
  return ds;
}

inline void save_csv(const LabeledDataset& ds, const std::string& path) {
  std::ofstream out(path);
  require(out.good(), ErrorKind::Io, "cannot open " + path + " for writing");
  const std::int64_t stride = ds.images.size() / ds.size();
  char buf[32];
  for (int i = 0; i < ds.size(); ++i) {
    out << ds.labels[static_cast<size_t>(i)];
    const float* p = ds.images.data() + static_cast<std::int64_t>(i) * stride;
    for (std::int64_t j = 0; j < stride; ++j) {
      // %.9g round-trips binary32 exactly.
      std::snprintf(buf, sizeof buf, ",%.9g", static_cast<double>(p[j]));
      out << buf;
    }
    out << '\n';
  }
  require(out.good(), ErrorKind::Io, "write failure on " + path);
}

// ---------------------------------------------------------------------------
// IID partitioning and per-class sampling
// ---------------------------------------------------------------------------

struct Partition {
  std::vector<std::vector<int>> worker_indices;  // pairwise disjoint

  int workers() const { return static_cast<int>(worker_indices.size()); }
};

// Stratified shuffle per class, round-robin assignment: disjoint, and each
// worker's class histogram is within one sample of the global share.
inline Partition partition(const LabeledDataset& ds, int z, std::uint64_t seed) {
  require(z >= 1, ErrorKind::InvalidParameter, "worker count must be >= 1");
  std::vector<std::vector<int>> by_class(static_cast<size_t>(ds.n_c));
  for (int i = 0; i < ds.size(); ++i)
    by_class[static_cast<size_t>(ds.labels[static_cast<size_t>(i)])].push_back(i);

  Partition part;
  part.worker_indices.assign(static_cast<size_t>(z), {});
  for (int c = 0; c < ds.n_c; ++c) {
    auto& idx = by_class[static_cast<size_t>(c)];
    require(static_cast<int>(idx.size()) >= z, ErrorKind::InvalidInput,
            "class " + std::to_string(c) + " has fewer samples than workers");
    RngStream rng(seed, "partition", static_cast<std::uint64_t>(c));
    for (size_t j = idx.size(); j > 1; --j) std::swap(idx[j - 1], idx[rng.uniform_int(j)]);
    for (size_t pos = 0; pos < idx.size(); ++pos)
      part.worker_indices[pos % static_cast<size_t>(z)].push_back(idx[pos]);
  }
  return part;
}

// Worker-local per-class index lists (the worker's private view).
inline std::vector<std::vector<int>> per_class_indices(const LabeledDataset& ds,
                                                       const std::vector<int>& worker_indices) {
  std::vector<std::vector<int>> out(static_cast<size_t>(ds.n_c));
  for (int i : worker_indices) out[static_cast<size_t>(ds.labels[static_cast<size_t>(i)])].push_back(i);
  return out;
}

// Uniform draw without replacement within one call (one round); successive
// calls resample independently. batch_size >= holdings returns all holdings.
inline std::vector<int> sample_without_replacement(const std::vector<int>& holdings,
                                                   int batch_size, RngStream& rng) {
  require(!holdings.empty(), ErrorKind::EmptyClass, "no samples to draw from");
  if (batch_size >= static_cast<int>(holdings.size())) return holdings;
  std::vector<int> pool = holdings;
  std::vector<int> out(static_cast<size_t>(batch_size));
  for (int i = 0; i < batch_size; ++i) {
    const size_t j = static_cast<size_t>(i) + rng.uniform_int(pool.size() - static_cast<size_t>(i));
    std::swap(pool[static_cast<size_t>(i)], pool[j]);
    out[static_cast<size_t>(i)] = pool[static_cast<size_t>(i)];
  }
  return out;
}

inline std::vector<int> sample_class_indices(const LabeledDataset& ds, const Partition& part,
                                             int worker, int c, int batch_size, RngStream& rng) {
  require(worker >= 0 && worker < part.workers(), ErrorKind::InvalidParameter,
          "worker id out of range");
  require(c >= 0 && c < ds.n_c, ErrorKind::InvalidParameter, "class id out of range");
  std::vector<int> holdings;
  for (int i : part.worker_indices[static_cast<size_t>(worker)])
    if (ds.labels[static_cast<size_t>(i)] == c) holdings.push_back(i);
  require(!holdings.empty(), ErrorKind::EmptyClass,
          "worker " + std::to_string(worker) + " holds no samples of class " + std::to_string(c));
  return sample_without_replacement(holdings, batch_size, rng);
}

inline Tensor class_batch(const LabeledDataset& ds, const Partition& part, int worker, int c,
                          int batch_size, RngStream& rng) {
  const auto idx = sample_class_indices(ds, part, worker, c, batch_size, rng);
  return take_rows(ds.images, idx);
}

// Subset view materialized as its own dataset (test fixtures, desk subsets).
inline LabeledDataset subset(const LabeledDataset& ds, const std::vector<int>& indices) {
  LabeledDataset out;
  out.images = take_rows(ds.images, indices);
  out.labels.reserve(indices.size());
  for (int i : indices) out.labels.push_back(ds.labels[static_cast<size_t>(i)]);
  out.n_c = ds.n_c;
  validate(out);
  return out;
}

}  // namespace sfdd::data
