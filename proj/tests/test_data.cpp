#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include "dfn/data.hpp"
#include "test_util.hpp"

using namespace dfn;

namespace {

DatasetSpec small_spec() {
  DatasetSpec spec;
  spec.count = 4;
  spec.height = spec.width = 64;
  spec.num_classes = 4;
  spec.seed = 11;
  return spec;
}

}  // namespace

TEST_CASE("uniform label map has no boundary") {
  LabelMap m(6, 6, 3, 1);
  CHECK(extract_boundary(m, 1).count_set() == 0);
}

TEST_CASE("2x2 half-half map is all boundary") {
  LabelMap m(2, 2, 2);
  m.at(1, 0) = 1;
  m.at(1, 1) = 1;
  BoundaryMap b = extract_boundary(m, 1);
  CHECK(b.count_set() == 4);
}

TEST_CASE("single differing pixel marks itself and its 4 neighbors") {
  LabelMap m(5, 5, 2, 0);
  m.at(2, 2) = 1;
  BoundaryMap b = extract_boundary(m, 1);
  CHECK(b.count_set() == 5);
  CHECK(b.at(2, 2) == 1);
  CHECK(b.at(1, 2) == 1);
  CHECK(b.at(3, 2) == 1);
  CHECK(b.at(2, 1) == 1);
  CHECK(b.at(2, 3) == 1);
  CHECK(b.at(1, 1) == 0);
}

TEST_CASE("boundary extraction is invariant to class relabeling") {
  SampleRecord s = gen_sample(3, small_spec(), Scenario::kMixed);
  LabelMap permuted = s.labels;
  const std::uint8_t perm[4] = {2, 0, 3, 1};
  for (auto& v : permuted.values) v = perm[v];
  CHECK(extract_boundary(permuted, 1) == extract_boundary(s.labels, 1));
  CHECK(extract_boundary(permuted, 2) == extract_boundary(s.labels, 2));
}

TEST_CASE("thicker boundaries are supersets") {
  SampleRecord s = gen_sample(5, small_spec(), Scenario::kInterIndistinction);
  BoundaryMap b1 = extract_boundary(s.labels, 1);
  BoundaryMap b2 = extract_boundary(s.labels, 2);
  BoundaryMap b3 = extract_boundary(s.labels, 3);
  for (std::size_t i = 0; i < b1.mask.size(); ++i) {
    if (b1.mask[i]) CHECK(b2.mask[i]);
    if (b2.mask[i]) CHECK(b3.mask[i]);
  }
  CHECK(b2.count_set() > b1.count_set());
}

TEST_CASE("boundary pixels stay under a quarter of the image") {
  DatasetSpec spec = small_spec();
  for (std::uint64_t seed = 0; seed < 30; ++seed) {
    for (Scenario sc : {Scenario::kIntraInconsistency,
                        Scenario::kInterIndistinction, Scenario::kMixed}) {
      SampleRecord s = gen_sample(seed, spec, sc);
      const double frac =
          double(extract_boundary(s.labels, 1).count_set()) / (64.0 * 64.0);
      CHECK(frac < 0.25);
    }
  }
}

TEST_CASE("gen_sample is deterministic and labels stay in range") {
  DatasetSpec spec = small_spec();
  SampleRecord a = gen_sample(42, spec, Scenario::kMixed);
  SampleRecord b = gen_sample(42, spec, Scenario::kMixed);
  CHECK(a.image.data() == b.image.data());
  CHECK(a.labels == b.labels);
  CHECK(a.boundary == b.boundary);
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    SampleRecord s = gen_sample(seed, spec, Scenario::kIntraInconsistency);
    for (auto v : s.labels.values) CHECK(v < spec.num_classes);
  }
}

TEST_CASE("inter-indistinction pairs have close mean colors") {
  DatasetSpec spec = small_spec();
  int checked = 0;
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    SampleRecord s = gen_sample(seed, spec, Scenario::kInterIndistinction);
    // measure the mean image color of the designated classes 1 and 2
    double mean1[3] = {}, mean2[3] = {};
    std::int64_t n1 = 0, n2 = 0;
    const std::int64_t plane = 64 * 64;
    for (std::int64_t p = 0; p < plane; ++p) {
      if (s.labels.values[std::size_t(p)] == 1) {
        for (int c = 0; c < 3; ++c) mean1[c] += s.image.ptr()[c * plane + p];
        ++n1;
      } else if (s.labels.values[std::size_t(p)] == 2) {
        for (int c = 0; c < 3; ++c) mean2[c] += s.image.ptr()[c * plane + p];
        ++n2;
      }
    }
    if (n1 < 30 || n2 < 30) continue;
    double dist = 0;
    for (int c = 0; c < 3; ++c) {
      const double d = mean1[c] / double(n1) - mean2[c] / double(n2);
      dist += d * d;
    }
    CHECK(std::sqrt(dist) < spec.similarity);
    ++checked;
  }
  CHECK(checked > 60);  // the pair must actually be present most of the time
}

TEST_CASE("build_dataset draws scenarios per the mix and stores the mean") {
  DatasetSpec spec = small_spec();
  spec.count = 30;
  spec.ratio_intra = 1.0;
  spec.ratio_inter = 0.0;
  spec.ratio_mixed = 0.0;
  Dataset ds = build_dataset(spec);
  for (const auto& s : ds.samples)
    CHECK(s.scenario == Scenario::kIntraInconsistency);
  // empirical mean of [0,1] colors lands strictly inside (0,1)
  for (float m : ds.spec.channel_mean) {
    CHECK(m > 0.05f);
    CHECK(m < 0.95f);
  }
}

TEST_CASE("augment with identity scale only subtracts the mean") {
  DatasetSpec spec = small_spec();
  SampleRecord s = gen_sample(7, spec, Scenario::kMixed);
  const std::array<float, 3> mean{0.25f, 0.5f, 0.125f};
  bool saw_plain = false, saw_flip = false;
  for (std::uint64_t seed = 0; seed < 40 && !(saw_plain && saw_flip); ++seed) {
    Rng rng(seed);
    SampleRecord a = augment(s, rng, {1.0}, mean);
    CHECK(a.labels.num_classes == spec.num_classes);
    if (a.labels == s.labels) {
      saw_plain = true;
      const std::int64_t plane = 64 * 64;
      for (int c = 0; c < 3; ++c)
        for (std::int64_t p = 0; p < plane; ++p)
          CHECK(a.image.ptr()[c * plane + p] ==
                s.image.ptr()[c * plane + p] - mean[std::size_t(c)]);
      CHECK(a.boundary == s.boundary);
    } else {
      saw_flip = true;
      CHECK(flip_horizontal(a.labels) == s.labels);
    }
  }
  CHECK(saw_plain);
  CHECK(saw_flip);
}

TEST_CASE("horizontal flip is an involution") {
  SampleRecord s = gen_sample(9, small_spec(), Scenario::kInterIndistinction);
  CHECK(flip_horizontal(flip_horizontal(s.labels)) == s.labels);
  std::vector<float> img = s.image.data();
  flip_horizontal(img.data(), 3, 64, 64);
  flip_horizontal(img.data(), 3, 64, 64);
  CHECK(img == s.image.data());
}

TEST_CASE("augment at scale 0.5 pads a centered half-size region") {
  DatasetSpec spec = small_spec();
  SampleRecord s = gen_sample(13, spec, Scenario::kMixed);
  Rng rng(0);
  SampleRecord a = augment(s, rng, {0.5}, {0.f, 0.f, 0.f});
  // everything outside the centered 32x32 window is background / zero image
  const std::int64_t plane = 64 * 64;
  for (int y = 0; y < 64; ++y)
    for (int x = 0; x < 64; ++x) {
      const bool inside = y >= 16 && y < 48 && x >= 16 && x < 48;
      if (inside) continue;
      CHECK(a.labels.at(y, x) == 0);
      for (int c = 0; c < 3; ++c)
        CHECK(a.image.ptr()[c * plane + y * 64 + x] == 0.f);
    }
  // and the window holds the downscaled labels (possibly flipped)
  LabelMap down = resize_nearest(s.labels, 32, 32);
  LabelMap flipped = flip_horizontal(down);
  bool match_plain = true, match_flip = true;
  for (int y = 0; y < 32; ++y)
    for (int x = 0; x < 32; ++x) {
      match_plain &= a.labels.at(16 + y, 16 + x) == down.at(y, x);
      match_flip &= a.labels.at(16 + y, 16 + x) == flipped.at(y, x);
    }
  CHECK((match_plain || match_flip));
}

TEST_CASE("augment preserves label range") {
  DatasetSpec spec = small_spec();
  SampleRecord s = gen_sample(3, spec, Scenario::kMixed);
  Rng rng(77);
  for (int rep = 0; rep < 10; ++rep) {
    SampleRecord a = augment(s, rng, {0.5, 0.75, 1.0, 1.5, 1.75},
                             {0.4f, 0.4f, 0.4f});
    CHECK(a.labels.num_classes == spec.num_classes);
    for (auto v : a.labels.values) CHECK(v < spec.num_classes);
    CHECK(a.labels.height == 64);
    CHECK(a.labels.width == 64);
  }
}

TEST_CASE("dataset container round-trips bitwise") {
  DatasetSpec spec = small_spec();
  spec.count = 10;
  Dataset ds = build_dataset(spec);
  testutil::TempDir dir("dataset_roundtrip");
  const std::string path = dir.file("ds.dfnd");
  write_dataset(ds, path);
  Dataset back = read_dataset(path);
  REQUIRE(back.samples.size() == ds.samples.size());
  CHECK(back.spec.channel_mean == ds.spec.channel_mean);
  CHECK(back.spec.seed == ds.spec.seed);
  CHECK(back.spec.similarity == ds.spec.similarity);
  for (std::size_t i = 0; i < ds.samples.size(); ++i) {
    CHECK(back.samples[i].image.data() == ds.samples[i].image.data());
    CHECK(back.samples[i].labels == ds.samples[i].labels);
    CHECK(back.samples[i].boundary == ds.samples[i].boundary);
    CHECK(back.samples[i].seed == ds.samples[i].seed);
    CHECK(back.samples[i].scenario == ds.samples[i].scenario);
  }
  // writing again produces identical bytes
  const std::string path2 = dir.file("ds2.dfnd");
  write_dataset(back, path2);
  CHECK(testutil::read_file(path) == testutil::read_file(path2));
}

TEST_CASE("empty dataset round-trips") {
  DatasetSpec spec = small_spec();
  spec.count = 0;
  Dataset ds = build_dataset(spec);
  testutil::TempDir dir("dataset_empty");
  const std::string path = dir.file("empty.dfnd");
  write_dataset(ds, path);
  Dataset back = read_dataset(path);
  CHECK(back.samples.empty());
}

TEST_CASE("truncated dataset names the sample index") {
  DatasetSpec spec = small_spec();
  spec.count = 3;
  Dataset ds = build_dataset(spec);
  testutil::TempDir dir("dataset_truncated");
  const std::string path = dir.file("ds.dfnd");
  write_dataset(ds, path);
  std::string bytes = testutil::read_file(path);
  bytes.resize(bytes.size() - (64 * 64 + 100));  // cut into the last sample
  const std::string cut = dir.file("cut.dfnd");
  std::ofstream(cut, std::ios::binary) << bytes;
  try {
    read_dataset(cut);
    CHECK(false);
  } catch (const FormatError& e) {
    CHECK(std::string(e.what()).find("sample 2") != std::string::npos);
    CHECK(e.offset > 0);
  }
}

TEST_CASE("bad magic in dataset is a format error") {
  testutil::TempDir dir("dataset_magic");
  const std::string path = dir.file("bad.dfnd");
  std::ofstream(path, std::ios::binary) << "NOPE  more bytes here";
  CHECK_THROWS_AS(read_dataset(path), FormatError);
}

TEST_CASE("PGM header is byte-exact") {
  testutil::TempDir dir("pgm");
  LabelMap m(64, 64, 4, 0);
  const std::string path = dir.file("zero.pgm");
  export_pgm(m, path);
  const std::string bytes = testutil::read_file(path);
  const std::string header = "P5\n64 64\n255\n";
  REQUIRE(bytes.size() == header.size() + 64 * 64);
  CHECK(bytes.substr(0, header.size()) == header);
  for (std::size_t i = header.size(); i < bytes.size(); ++i)
    CHECK(bytes[i] == 0);
}

TEST_CASE("two-class PGM uses 0 and 255") {
  testutil::TempDir dir("pgm2");
  LabelMap m(2, 2, 2, 0);
  m.at(0, 1) = 1;
  const std::string path = dir.file("two.pgm");
  export_pgm(m, path);
  const std::string bytes = testutil::read_file(path);
  const std::string payload = bytes.substr(bytes.size() - 4);
  std::multiset<unsigned char> got(payload.begin(), payload.end());
  CHECK(got == std::multiset<unsigned char>{0, 0, 0, 255});
}

TEST_CASE("dataset spec validation") {
  DatasetSpec spec = small_spec();
  spec.ratio_intra = 0.5;  // ratios no longer sum to 1
  CHECK_THROWS_AS(spec.validate(), ConfigError);
  spec = small_spec();
  spec.num_classes = 2;  // inter scenarios need 3 classes
  CHECK_THROWS_AS(spec.validate(), ConfigError);
  spec.ratio_intra = 1.0;
  spec.ratio_inter = 0.0;
  spec.ratio_mixed = 0.0;
  CHECK_NOTHROW(spec.validate());
}
