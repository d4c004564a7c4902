#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>

#include "sfdd/data.hpp"
#include "sfdd/digits.hpp"

using namespace sfdd;

namespace {

std::filesystem::path tmp_dir() {
  auto p = std::filesystem::temp_directory_path() / "sfdd_data_tests";
  std::filesystem::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("IDX round trip through the canonical format") {
  auto ds = digits::make_dataset(50, 99);
  const auto dir = tmp_dir();
  const auto imgs = (dir / "imgs.idx").string();
  const auto labs = (dir / "labs.idx").string();
  digits::write_idx(ds, imgs, labs);

  auto back = data::load_idx(imgs, labs);
  REQUIRE(back.size() == 50);
  REQUIRE(back.images.shape() == Shape{50, 1, 28, 28});
  REQUIRE(back.n_c == 10);
  REQUIRE(back.labels == ds.labels);
  // u8 quantization bound: 1/255 in either direction after rounding.
  for (std::int64_t i = 0; i < ds.images.size(); ++i)
    REQUIRE(std::abs(back.images.data()[i] - ds.images.data()[i]) <= 0.5f / 255.0f + 1e-6f);
}

TEST_CASE("IDX: all-255 single image maps to all ones") {
  const auto dir = tmp_dir();
  const auto imgs = (dir / "one.idx").string();
  const auto labs = (dir / "one_lab.idx").string();
  {
    std::ofstream fi(imgs, std::ios::binary);
    const unsigned char hdr[] = {0, 0, 8, 3, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0, 2};
    fi.write(reinterpret_cast<const char*>(hdr), sizeof hdr);
    for (int i = 0; i < 4; ++i) fi.put(static_cast<char>(255));
  }
  {
    std::ofstream fl(labs, std::ios::binary);
    const unsigned char hdr[] = {0, 0, 8, 1, 0, 0, 0, 1};
    fl.write(reinterpret_cast<const char*>(hdr), sizeof hdr);
    fl.put(static_cast<char>(0));
  }
  auto ds = data::load_idx(imgs, labs);
  REQUIRE(ds.size() == 1);
  REQUIRE(ds.n_c == 1);
  for (auto v : ds.images.values()) REQUIRE(v == 1.0f);
}

TEST_CASE("IDX: corrupted magic and count mismatch are rejected") {
  const auto dir = tmp_dir();
  const auto good_i = (dir / "g.idx").string();
  const auto good_l = (dir / "gl.idx").string();
  auto ds = digits::make_dataset(10, 5);
  digits::write_idx(ds, good_i, good_l);

  const auto bad_i = (dir / "bad.idx").string();
  std::filesystem::copy_file(good_i, bad_i, std::filesystem::copy_options::overwrite_existing);
  {
    std::fstream f(bad_i, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(3);
    f.put(static_cast<char>(0x42));
  }
  REQUIRE_THROWS_AS(data::load_idx(bad_i, good_l), Error);
  try {
    data::load_idx(bad_i, good_l);
  } catch (const Error& e) {
    REQUIRE(e.kind() == ErrorKind::Format);
  }

  // Truncated pixel data.
  const auto trunc = (dir / "trunc.idx").string();
  {
    std::ifstream in(good_i, std::ios::binary);
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)), {});
    std::ofstream out(trunc, std::ios::binary);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size() - 100));
  }
  REQUIRE_THROWS_AS(data::load_idx(trunc, good_l), Error);

  // Label count mismatch.
  const auto short_l = (dir / "short.idx").string();
  {
    std::ofstream fl(short_l, std::ios::binary);
    const unsigned char hdr[] = {0, 0, 8, 1, 0, 0, 0, 5};
    fl.write(reinterpret_cast<const char*>(hdr), sizeof hdr);
    for (int i = 0; i < 5; ++i) fl.put(static_cast<char>(i));
  }
  try {
    data::load_idx(good_i, short_l);
    FAIL("expected consistency error");
  } catch (const Error& e) {
    REQUIRE(e.kind() == ErrorKind::Consistency);
  }
}

TEST_CASE("CSV identity ingestion and round trip") {
  const auto dir = tmp_dir();
  const auto path = (dir / "two.csv").string();
  {
    std::ofstream out(path);
    out << "1,0.25,0.5,0.75,1\n0,0,0.125,0.625,0.875\n";
  }
  auto ds = data::load_csv(path, 1, 2, 2);
  REQUIRE(ds.size() == 2);
  REQUIRE(ds.labels == std::vector<int>{1, 0});
  REQUIRE(ds.images.data()[0] == 0.25f);
  REQUIRE(ds.images.data()[7] == 0.875f);

  // Random fixture round-trips bit-exactly.
  auto rnd = digits::make_dataset(100, 17);
  const auto rt = (dir / "rt.csv").string();
  data::save_csv(rnd, rt);
  auto back = data::load_csv(rt, 1, 28, 28);
  REQUIRE(back.labels == rnd.labels);
  for (std::int64_t i = 0; i < rnd.images.size(); ++i)
    REQUIRE(back.images.data()[i] == rnd.images.data()[i]);
}

TEST_CASE("CSV error paths") {
  const auto dir = tmp_dir();
  const auto empty = (dir / "empty.csv").string();
  std::ofstream(empty).close();
  REQUIRE_THROWS_AS(data::load_csv(empty, 1, 2, 2), Error);

  const auto badrow = (dir / "bad.csv").string();
  {
    std::ofstream out(badrow);
    out << "0,0.1,0.2,0.3,0.4\n1,0.1,0.2\n";
  }
  try {
    data::load_csv(badrow, 1, 2, 2);
    FAIL("expected format error");
  } catch (const Error& e) {
    REQUIRE(std::string(e.what()).find("row 2") != std::string::npos);
  }

  const auto nonnum = (dir / "nn.csv").string();
  {
    std::ofstream out(nonnum);
    out << "0,0.1,x,0.3,0.4\n";
  }
  REQUIRE_THROWS_AS(data::load_csv(nonnum, 1, 2, 2), Error);

  const auto high_label = (dir / "hl.csv").string();
  {
    std::ofstream out(high_label);
    out << "7,0.1,0.2,0.3,0.4\n";
  }
  REQUIRE_THROWS_AS(data::load_csv(high_label, 1, 2, 2, 5), Error);
}

TEST_CASE("partition: single worker is the identity partition") {
  auto ds = digits::make_dataset(30, 3);
  auto part = data::partition(ds, 1, 9);
  REQUIRE(part.workers() == 1);
  std::set<int> got(part.worker_indices[0].begin(), part.worker_indices[0].end());
  REQUIRE(got.size() == 30);
  REQUIRE(*got.begin() == 0);
  REQUIRE(*got.rbegin() == 29);
}

TEST_CASE("partition: balanced 10-class set splits evenly") {
  auto ds = digits::make_dataset(100, 4);
  auto part = data::partition(ds, 5, 11);
  for (const auto& w : part.worker_indices) {
    REQUIRE(w.size() == 20);
    auto per_class = data::per_class_indices(ds, w);
    for (const auto& cls : per_class) REQUIRE(cls.size() == 2);
  }
}

TEST_CASE("partition: disjoint coverage across many seeds") {
  auto ds = digits::make_dataset(97, 6);  // uneven class sizes
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    auto part = data::partition(ds, 4, seed);
    std::set<int> all;
    size_t total = 0;
    for (const auto& w : part.worker_indices) {
      all.insert(w.begin(), w.end());
      total += w.size();
    }
    REQUIRE(total == 97);
    REQUIRE(all.size() == 97);
    REQUIRE(*all.begin() == 0);
    REQUIRE(*all.rbegin() == 96);
  }
}

TEST_CASE("partition histograms deviate by at most one per class") {
  auto ds = digits::make_dataset(97, 6);
  auto part = data::partition(ds, 4, 123);
  std::vector<int> global(static_cast<size_t>(ds.n_c), 0);
  for (int l : ds.labels) global[static_cast<size_t>(l)]++;
  for (const auto& w : part.worker_indices) {
    auto per_class = data::per_class_indices(ds, w);
    for (int c = 0; c < ds.n_c; ++c) {
      const double share = static_cast<double>(global[static_cast<size_t>(c)]) / 4.0;
      REQUIRE(std::abs(static_cast<double>(per_class[static_cast<size_t>(c)].size()) - share) <= 1.0);
    }
  }
}

TEST_CASE("partition requires every class to cover all workers") {
  auto ds = digits::make_dataset(30, 3);
  REQUIRE_THROWS_AS(data::partition(ds, 4, 0), Error);  // 3 per class < 4 workers
}

TEST_CASE("partition and sampling are deterministic in seed") {
  auto ds = digits::make_dataset(60, 8);
  auto p1 = data::partition(ds, 3, 77);
  auto p2 = data::partition(ds, 3, 77);
  REQUIRE(p1.worker_indices == p2.worker_indices);

  RngStream r1(5, "draw");
  RngStream r2(5, "draw");
  auto s1 = data::sample_class_indices(ds, p1, 1, 4, 2, r1);
  auto s2 = data::sample_class_indices(ds, p2, 1, 4, 2, r2);
  REQUIRE(s1 == s2);
}

TEST_CASE("class_batch exhaustion returns all holdings exactly once") {
  auto ds = digits::make_dataset(60, 8);
  auto part = data::partition(ds, 3, 5);
  RngStream rng(1, "cb");
  auto idx = data::sample_class_indices(ds, part, 0, 7, 100, rng);
  auto per_class = data::per_class_indices(ds, part.worker_indices[0]);
  std::set<int> got(idx.begin(), idx.end());
  std::set<int> want(per_class[7].begin(), per_class[7].end());
  REQUIRE(got == want);
  REQUIRE(idx.size() == want.size());
}

TEST_CASE("class_batch indices belong to the worker and class") {
  auto ds = digits::make_dataset(100, 9);
  auto part = data::partition(ds, 5, 21);
  RngStream rng(2, "cb2");
  for (int w = 0; w < 5; ++w)
    for (int c = 0; c < 10; ++c) {
      auto idx = data::sample_class_indices(ds, part, w, c, 1, rng);
      for (int i : idx) {
        REQUIRE(ds.labels[static_cast<size_t>(i)] == c);
        const auto& mine = part.worker_indices[static_cast<size_t>(w)];
        REQUIRE(std::find(mine.begin(), mine.end(), i) != mine.end());
      }
    }
}

TEST_CASE("class_batch draws are uniform within 3 sigma") {
  auto ds = digits::make_dataset(200, 10);
  auto part = data::partition(ds, 2, 3);
  auto per_class = data::per_class_indices(ds, part.worker_indices[0]);
  const auto& holdings = per_class[0];  // 10 samples of class 0
  const int draws = 10000;
  std::map<int, int> freq;
  RngStream rng(4, "mc");
  for (int d = 0; d < draws; ++d) {
    auto idx = data::sample_class_indices(ds, part, 0, 0, 1, rng);
    freq[idx[0]]++;
  }
  const double p = 1.0 / static_cast<double>(holdings.size());
  const double mean = draws * p;
  const double sigma = std::sqrt(draws * p * (1 - p));
  for (int h : holdings) REQUIRE(std::abs(freq[h] - mean) <= 3.0 * sigma);
}

TEST_CASE("empty class draw raises empty-class error") {
  auto ds = digits::make_dataset(100, 9);
  auto part = data::partition(ds, 5, 21);
  RngStream rng(2, "ec");
  // Build a crippled partition by hand: worker 0 loses all of class 3.
  data::Partition crippled = part;
  auto& w0 = crippled.worker_indices[0];
  w0.erase(std::remove_if(w0.begin(), w0.end(),
                          [&](int i) { return ds.labels[static_cast<size_t>(i)] == 3; }),
           w0.end());
  try {
    data::sample_class_indices(ds, crippled, 0, 3, 1, rng);
    FAIL("expected empty-class error");
  } catch (const Error& e) {
    REQUIRE(e.kind() == ErrorKind::EmptyClass);
  }
}
