#include "dfn/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>

#include "dfn/ops.hpp"
#include "dfn/serialize.hpp"

namespace dfn {

const char* scenario_name(Scenario s) {
  switch (s) {
    case Scenario::kIntraInconsistency: return "intra_inconsistency";
    case Scenario::kInterIndistinction: return "inter_indistinction";
    case Scenario::kMixed: return "mixed";
  }
  return "unknown";
}

Scenario scenario_from_name(const std::string& name) {
  if (name == "intra_inconsistency") return Scenario::kIntraInconsistency;
  if (name == "inter_indistinction") return Scenario::kInterIndistinction;
  if (name == "mixed") return Scenario::kMixed;
  throw UsageError("unknown scenario \"" + name + "\"");
}

void DatasetSpec::validate() const {
  if (count < 0) throw ConfigError("dataset: count must be non-negative");
  if (height < 1 || width < 1)
    throw ConfigError("dataset: size must be positive");
  if (num_classes < 2 || num_classes > 256)
    throw ConfigError("dataset: num_classes must be in [2,256]");
  const double sum = ratio_intra + ratio_inter + ratio_mixed;
  if (ratio_intra < 0 || ratio_inter < 0 || ratio_mixed < 0 ||
      std::abs(sum - 1.0) > 1e-9)
    throw ConfigError("dataset: scenario ratios must be non-negative and sum to 1");
  if ((ratio_inter > 0 || ratio_mixed > 0) && num_classes < 3)
    throw ConfigError(
        "dataset: inter_indistinction scenarios need at least 3 classes");
  if (texture_noise < 0) throw ConfigError("dataset: texture_noise must be >= 0");
  if (similarity <= 0) throw ConfigError("dataset: similarity must be positive");
  if (boundary_thickness < 1)
    throw ConfigError("dataset: boundary_thickness must be >= 1");
}

// ---------------------------------------------------------------------------
// Boundary extraction
// ---------------------------------------------------------------------------

BoundaryMap extract_boundary(const LabelMap& labels, int thickness) {
  if (thickness < 1) throw ConfigError("extract_boundary: thickness must be >= 1");
  const int h = labels.height, w = labels.width;
  BoundaryMap out(h, w);
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const std::uint8_t c = labels.at(y, x);
      const bool edge = (y > 0 && labels.at(y - 1, x) != c) ||
                        (y + 1 < h && labels.at(y + 1, x) != c) ||
                        (x > 0 && labels.at(y, x - 1) != c) ||
                        (x + 1 < w && labels.at(y, x + 1) != c);
      out.at(y, x) = edge ? 1 : 0;
    }
  for (int step = 1; step < thickness; ++step) {
    BoundaryMap grown = out;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x) {
        if (out.at(y, x)) continue;
        if ((y > 0 && out.at(y - 1, x)) || (y + 1 < h && out.at(y + 1, x)) ||
            (x > 0 && out.at(y, x - 1)) || (x + 1 < w && out.at(y, x + 1)))
          grown.at(y, x) = 1;
      }
    out = std::move(grown);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Sample generation
// ---------------------------------------------------------------------------

namespace {

using Color = std::array<float, 3>;

float color_dist(const Color& a, const Color& b) {
  float d = 0;
  for (int i = 0; i < 3; ++i) d += (a[i] - b[i]) * (a[i] - b[i]);
  return std::sqrt(d);
}

struct Blob {
  int cls;
  bool ellipse;
  double cy, cx, ry, rx;

  bool contains(int y, int x) const {
    const double dy = (y - cy) / ry, dx = (x - cx) / rx;
    return ellipse ? (dy * dy + dx * dx <= 1.0)
                   : (std::abs(dy) <= 1.0 && std::abs(dx) <= 1.0);
  }
};

Blob random_blob(Rng& rng, int cls, int h, int w) {
  Blob b;
  b.cls = cls;
  b.ellipse = rng.bernoulli(0.5);
  b.ry = rng.uniform(h / 8.0, h / 3.2);
  b.rx = rng.uniform(w / 8.0, w / 3.2);
  b.cy = rng.uniform(b.ry * 0.5, h - 1 - b.ry * 0.5);
  b.cx = rng.uniform(b.rx * 0.5, w - 1 - b.rx * 0.5);
  return b;
}

void paint(LabelMap& labels, const Blob& b) {
  const int y0 = std::max(0, int(std::floor(b.cy - b.ry)));
  const int y1 = std::min(labels.height - 1, int(std::ceil(b.cy + b.ry)));
  const int x0 = std::max(0, int(std::floor(b.cx - b.rx)));
  const int x1 = std::min(labels.width - 1, int(std::ceil(b.cx + b.rx)));
  for (int y = y0; y <= y1; ++y)
    for (int x = x0; x <= x1; ++x)
      if (b.contains(y, x)) labels.at(y, x) = std::uint8_t(b.cls);
}

}  // namespace

SampleRecord gen_sample(std::uint64_t seed, const DatasetSpec& spec,
                        Scenario scenario) {
  const int h = spec.height, w = spec.width, k = spec.num_classes;
  Rng rng(derive_seed(seed, "sample"));

  // Base palette: well-separated class colors.
  std::vector<Color> colors(static_cast<std::size_t>(k));
  for (int c = 0; c < k; ++c) {
    Color col{};
    for (int attempt = 0; attempt < 200; ++attempt) {
      for (auto& v : col) v = float(rng.uniform(0.08, 0.92));
      bool ok = true;
      for (int j = 0; j < c; ++j)
        if (color_dist(col, colors[std::size_t(j)]) < 0.3f) ok = false;
      if (ok) break;
    }
    colors[std::size_t(c)] = col;
  }

  const bool with_inter = (scenario == Scenario::kInterIndistinction ||
                           scenario == Scenario::kMixed) && k >= 3;
  const bool with_intra = scenario == Scenario::kIntraInconsistency ||
                          scenario == Scenario::kMixed;

  const int n_blobs = int(rng.uniform_int(2, 5));
  std::vector<Blob> blobs;
  const int n_extra = with_inter ? std::max(0, n_blobs - 2) : n_blobs;
  for (int i = 0; i < n_extra; ++i)
    blobs.push_back(random_blob(rng, 1 + int(rng.uniform_int(0, k - 2)), h, w));

  if (with_inter) {
    // Designated confusable pair: classes 1 and 2, painted last so they stay
    // adjacent, with colors closer than the similarity bound.
    Blob a = random_blob(rng, 1, h, w);
    Blob b = random_blob(rng, 2, h, w);
    const double angle = rng.uniform(0.0, 6.283185307179586);
    const double dy = std::sin(angle), dx = std::cos(angle);
    b.cy = std::clamp(a.cy + (a.ry + b.ry) * 0.8 * dy, b.ry * 0.4,
                      h - 1 - b.ry * 0.4);
    b.cx = std::clamp(a.cx + (a.rx + b.rx) * 0.8 * dx, b.rx * 0.4,
                      w - 1 - b.rx * 0.4);
    blobs.push_back(a);
    blobs.push_back(b);

    Color delta{};
    double norm = 0;
    for (auto& v : delta) {
      v = float(rng.normal());
      norm += double(v) * v;
    }
    norm = std::sqrt(std::max(norm, 1e-12));
    const double mag = 0.5 * spec.similarity;
    for (int i = 0; i < 3; ++i)
      colors[2][std::size_t(i)] = std::clamp(
          colors[1][std::size_t(i)] + float(delta[std::size_t(i)] / norm * mag),
          0.0f, 1.0f);
  }

  LabelMap labels(h, w, k);
  for (const auto& b : blobs) paint(labels, b);

  // Two-texture class: half of it rendered in a color that imitates another
  // class, so local appearance alone mislabels it.
  int intra_cls = -1;
  Color intra_color_b{};
  bool intra_split_vertical = true;
  double intra_split_at = 0;
  if (with_intra) {
    if (scenario == Scenario::kMixed) {
      intra_cls = k >= 4 ? 3 : 1;
    } else {
      std::vector<std::int64_t> area(std::size_t(k), 0);
      for (auto v : labels.values) ++area[v];
      std::int64_t best = 0;
      for (int c = 1; c < k; ++c)
        if (area[std::size_t(c)] > best) best = area[std::size_t(c)], intra_cls = c;
    }
    int decoy = int(rng.uniform_int(0, k - 2));
    if (decoy >= intra_cls) ++decoy;  // any class but the split one
    intra_split_vertical = rng.bernoulli(0.5);
    // split through the class centroid
    double sy = 0, sx = 0;
    std::int64_t n = 0;
    for (int y = 0; y < h; ++y)
      for (int x = 0; x < w; ++x)
        if (labels.at(y, x) == intra_cls) sy += y, sx += x, ++n;
    if (n == 0) {
      intra_cls = -1;
    } else {
      intra_split_at = intra_split_vertical ? sx / double(n) : sy / double(n);
      for (int i = 0; i < 3; ++i)
        intra_color_b[std::size_t(i)] =
            0.15f * colors[std::size_t(intra_cls)][std::size_t(i)] +
            0.85f * colors[std::size_t(decoy)][std::size_t(i)];
    }
  }

  std::vector<float> image(std::size_t(3) * h * w);
  const std::int64_t plane = std::int64_t(h) * w;
  for (int y = 0; y < h; ++y)
    for (int x = 0; x < w; ++x) {
      const int cls = labels.at(y, x);
      const Color* col = &colors[std::size_t(cls)];
      if (cls == intra_cls) {
        const double coord = intra_split_vertical ? x : y;
        if (coord >= intra_split_at) col = &intra_color_b;
      }
      for (int c = 0; c < 3; ++c) {
        const float noisy =
            (*col)[std::size_t(c)] + float(rng.normal() * spec.texture_noise);
        image[std::size_t(c * plane + y * w + x)] = std::clamp(noisy, 0.0f, 1.0f);
      }
    }

  SampleRecord rec;
  rec.image = Tensor<float>({3, h, w}, std::move(image));
  rec.labels = std::move(labels);
  rec.boundary = extract_boundary(rec.labels, spec.boundary_thickness);
  rec.seed = seed;
  rec.scenario = scenario;
  return rec;
}

Dataset build_dataset(DatasetSpec spec) {
  spec.validate();
  Dataset ds;
  ds.samples.reserve(std::size_t(spec.count));
  double mean_acc[3] = {0, 0, 0};
  for (int i = 0; i < spec.count; ++i) {
    Rng pick(derive_seed(spec.seed, "scenario", std::uint64_t(i)));
    const double u = pick.uniform();
    Scenario sc = u < spec.ratio_intra ? Scenario::kIntraInconsistency
                  : u < spec.ratio_intra + spec.ratio_inter
                      ? Scenario::kInterIndistinction
                      : Scenario::kMixed;
    SampleRecord rec =
        gen_sample(derive_seed(spec.seed, "gen", std::uint64_t(i)), spec, sc);
    const std::int64_t plane = std::int64_t(spec.height) * spec.width;
    for (int c = 0; c < 3; ++c) {
      double acc = 0;
      for (std::int64_t p = 0; p < plane; ++p)
        acc += rec.image.ptr()[c * plane + p];
      mean_acc[c] += acc / double(plane);
    }
    ds.samples.push_back(std::move(rec));
  }
  if (spec.count > 0)
    for (int c = 0; c < 3; ++c)
      spec.channel_mean[std::size_t(c)] = float(mean_acc[c] / spec.count);
  ds.spec = spec;
  return ds;
}

// ---------------------------------------------------------------------------
// Resizing / flipping
// ---------------------------------------------------------------------------

std::vector<float> resize_bilinear(const float* src, int channels, int h,
                                   int w, int oh, int ow) {
  const auto ytap = detail::bilinear_taps(oh, h, double(h) / oh);
  const auto xtap = detail::bilinear_taps(ow, w, double(w) / ow);
  std::vector<float> out(std::size_t(channels) * oh * ow);
  for (int c = 0; c < channels; ++c) {
    const float* plane = src + std::int64_t(c) * h * w;
    float* op = out.data() + std::int64_t(c) * oh * ow;
    for (int y = 0; y < oh; ++y) {
      const auto& ty = ytap[std::size_t(y)];
      const float* r0 = plane + std::int64_t(ty.lo) * w;
      const float* r1 = plane + std::int64_t(ty.hi) * w;
      const float wy = float(ty.w_hi);
      for (int x = 0; x < ow; ++x) {
        const auto& tx = xtap[std::size_t(x)];
        const float wx = float(tx.w_hi);
        const float top = r0[tx.lo] + wx * (r0[tx.hi] - r0[tx.lo]);
        const float bot = r1[tx.lo] + wx * (r1[tx.hi] - r1[tx.lo]);
        *op++ = top + wy * (bot - top);
      }
    }
  }
  return out;
}

LabelMap resize_nearest(const LabelMap& src, int oh, int ow) {
  LabelMap out(oh, ow, src.num_classes);
  for (int y = 0; y < oh; ++y) {
    const int sy = std::clamp(
        int(std::floor((y + 0.5) * double(src.height) / oh)), 0, src.height - 1);
    for (int x = 0; x < ow; ++x) {
      const int sx = std::clamp(
          int(std::floor((x + 0.5) * double(src.width) / ow)), 0, src.width - 1);
      out.at(y, x) = src.at(sy, sx);
    }
  }
  return out;
}

void flip_horizontal(float* img, int channels, int h, int w) {
  for (int c = 0; c < channels; ++c)
    for (int y = 0; y < h; ++y) {
      float* row = img + (std::int64_t(c) * h + y) * w;
      std::reverse(row, row + w);
    }
}

LabelMap flip_horizontal(const LabelMap& src) {
  LabelMap out = src;
  for (int y = 0; y < out.height; ++y) {
    auto* row = out.values.data() + std::size_t(y) * out.width;
    std::reverse(row, row + out.width);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Augmentation
// ---------------------------------------------------------------------------

SampleRecord augment(const SampleRecord& sample, Rng& rng,
                     const std::vector<double>& scales,
                     const std::array<float, 3>& mean,
                     int boundary_thickness) {
  if (scales.empty()) throw ConfigError("augment: scales must be non-empty");
  const int h = sample.labels.height, w = sample.labels.width;
  const double s = scales[std::size_t(rng.uniform_int(0, std::int64_t(scales.size()) - 1))];
  const bool flip = rng.bernoulli(0.5);
  const int sh = std::max(1, int(std::lround(h * s)));
  const int sw = std::max(1, int(std::lround(w * s)));

  std::vector<float> img = resize_bilinear(sample.image.ptr(), 3, h, w, sh, sw);
  LabelMap lbl = resize_nearest(sample.labels, sh, sw);
  if (flip) {
    flip_horizontal(img.data(), 3, sh, sw);
    lbl = flip_horizontal(lbl);
  }
  const std::int64_t plane = std::int64_t(sh) * sw;
  for (int c = 0; c < 3; ++c)
    for (std::int64_t p = 0; p < plane; ++p)
      img[std::size_t(c * plane + p)] -= mean[std::size_t(c)];

  // center crop or zero-pad back to (h, w); labels pad with background 0
  std::vector<float> out_img(std::size_t(3) * h * w, 0.f);
  LabelMap out_lbl(h, w, sample.labels.num_classes);
  const int copy_h = std::min(h, sh), copy_w = std::min(w, sw);
  const int src_y = (sh - copy_h) / 2, src_x = (sw - copy_w) / 2;
  const int dst_y = (h - copy_h) / 2, dst_x = (w - copy_w) / 2;
  for (int c = 0; c < 3; ++c)
    for (int y = 0; y < copy_h; ++y)
      std::memcpy(out_img.data() + (std::int64_t(c) * h + dst_y + y) * w + dst_x,
                  img.data() + (std::int64_t(c) * sh + src_y + y) * sw + src_x,
                  std::size_t(copy_w) * sizeof(float));
  for (int y = 0; y < copy_h; ++y)
    std::memcpy(out_lbl.values.data() + std::size_t(dst_y + y) * w + dst_x,
                lbl.values.data() + std::size_t(src_y + y) * sw + src_x,
                std::size_t(copy_w));

  SampleRecord out;
  out.image = Tensor<float>({3, h, w}, std::move(out_img));
  out.labels = std::move(out_lbl);
  out.boundary = extract_boundary(out.labels, boundary_thickness);
  out.seed = sample.seed;
  out.scenario = sample.scenario;
  return out;
}

// ---------------------------------------------------------------------------
// "DFND" container
// ---------------------------------------------------------------------------

namespace {

constexpr std::uint8_t kDatasetVersion = 1;

std::string fmt_double(double v) {
  char buf[48];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

std::string fmt_float(float v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.9g", double(v));
  return buf;
}

std::map<std::string, std::string> spec_to_kv(const DatasetSpec& spec) {
  std::map<std::string, std::string> kv;
  kv["data.height"] = std::to_string(spec.height);
  kv["data.width"] = std::to_string(spec.width);
  kv["data.num_classes"] = std::to_string(spec.num_classes);
  kv["data.ratio_intra"] = fmt_double(spec.ratio_intra);
  kv["data.ratio_inter"] = fmt_double(spec.ratio_inter);
  kv["data.ratio_mixed"] = fmt_double(spec.ratio_mixed);
  kv["data.texture_noise"] = fmt_double(spec.texture_noise);
  kv["data.similarity"] = fmt_double(spec.similarity);
  kv["data.boundary_thickness"] = std::to_string(spec.boundary_thickness);
  kv["data.seed"] = std::to_string(spec.seed);
  kv["data.mean_r"] = fmt_float(spec.channel_mean[0]);
  kv["data.mean_g"] = fmt_float(spec.channel_mean[1]);
  kv["data.mean_b"] = fmt_float(spec.channel_mean[2]);
  return kv;
}

DatasetSpec spec_from_kv(const std::map<std::string, std::string>& kv,
                         std::uint64_t offset) {
  DatasetSpec spec;
  auto get = [&](const char* key) -> const std::string& {
    auto it = kv.find(key);
    if (it == kv.end())
      throw FormatError(std::string("dataset spec missing key \"") + key + "\"",
                        offset);
    return it->second;
  };
  spec.height = std::stoi(get("data.height"));
  spec.width = std::stoi(get("data.width"));
  spec.num_classes = std::stoi(get("data.num_classes"));
  spec.ratio_intra = std::stod(get("data.ratio_intra"));
  spec.ratio_inter = std::stod(get("data.ratio_inter"));
  spec.ratio_mixed = std::stod(get("data.ratio_mixed"));
  spec.texture_noise = std::stod(get("data.texture_noise"));
  spec.similarity = std::stod(get("data.similarity"));
  spec.boundary_thickness = std::stoi(get("data.boundary_thickness"));
  spec.seed = std::stoull(get("data.seed"));
  spec.channel_mean = {std::stof(get("data.mean_r")),
                       std::stof(get("data.mean_g")),
                       std::stof(get("data.mean_b"))};
  return spec;
}

}  // namespace

void write_dataset(const Dataset& ds, const std::string& path) {
  for (const auto& s : ds.samples)
    if (s.labels.height != ds.spec.height || s.labels.width != ds.spec.width)
      throw UsageError("write_dataset: sample size differs from spec");
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open dataset for writing: " + path);
  io::Writer w(f);
  w.write_exact("DFND", 4);
  w.write_u8(kDatasetVersion);
  w.write_u32(std::uint32_t(ds.samples.size()));
  const std::string block = kv_to_block(spec_to_kv(ds.spec));
  w.write_u32(std::uint32_t(block.size()));
  w.write_string(block);
  for (const auto& s : ds.samples) {
    w.write_u64(s.seed);
    w.write_u8(std::uint8_t(s.scenario));
    write_tensor(w, s.image);
    w.write_exact(s.labels.values.data(), s.labels.values.size());
    w.write_exact(s.boundary.mask.data(), s.boundary.mask.size());
  }
  if (!f) throw Error("dataset write failed: " + path);
}

Dataset read_dataset(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open dataset: " + path);
  io::Reader r(f);
  r.expect_magic("DFND");
  const std::uint64_t at_version = r.offset();
  if (r.read_u8("dataset version") != kDatasetVersion)
    throw FormatError("unsupported dataset version", at_version);
  const std::uint32_t count = r.read_u32("sample count");
  const std::uint32_t spec_len = r.read_u32("spec block length");
  const std::uint64_t spec_at = r.offset();
  const std::string block = r.read_string(spec_len, "spec block");
  Dataset ds;
  ds.spec = spec_from_kv(kv_from_block(block, spec_at), spec_at);
  ds.spec.count = int(count);
  const std::size_t plane =
      std::size_t(ds.spec.height) * std::size_t(ds.spec.width);
  ds.samples.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    try {
      SampleRecord s;
      s.seed = r.read_u64("sample seed");
      const std::uint8_t sc = r.read_u8("sample scenario");
      if (sc > std::uint8_t(Scenario::kMixed))
        throw FormatError("invalid scenario tag " + std::to_string(sc),
                          r.offset() - 1);
      s.scenario = Scenario(sc);
      s.image = read_tensor<float>(r);
      if (s.image.shape() != Shape{3, ds.spec.height, ds.spec.width})
        throw FormatError("sample image shape " + shape_str(s.image.shape()) +
                              " does not match dataset spec",
                          r.offset());
      s.labels = LabelMap(ds.spec.height, ds.spec.width, ds.spec.num_classes);
      r.read_exact(s.labels.values.data(), plane, "sample labels");
      for (auto v : s.labels.values)
        if (v >= ds.spec.num_classes)
          throw FormatError("label id " + std::to_string(v) +
                                " out of range [0," +
                                std::to_string(ds.spec.num_classes) + ")",
                            r.offset());
      s.boundary = BoundaryMap(ds.spec.height, ds.spec.width);
      r.read_exact(s.boundary.mask.data(), plane, "sample boundary");
      ds.samples.push_back(std::move(s));
    } catch (const FormatError& e) {
      throw FormatError("sample " + std::to_string(i) + ": " + e.what(),
                        e.offset);
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// PGM export
// ---------------------------------------------------------------------------

namespace {

void write_pgm(const std::vector<std::uint8_t>& bytes, int h, int w,
               const std::string& path) {
  std::ofstream f(path, std::ios::binary);
  if (!f) throw Error("cannot open PGM for writing: " + path);
  f << "P5\n" << w << " " << h << "\n255\n";
  f.write(reinterpret_cast<const char*>(bytes.data()),
          std::streamsize(bytes.size()));
  if (!f) throw Error("PGM write failed: " + path);
}

}  // namespace

void export_pgm(const LabelMap& map, const std::string& path) {
  const int scale = map.num_classes > 1 ? 255 / (map.num_classes - 1) : 0;
  std::vector<std::uint8_t> bytes(map.values.size());
  for (std::size_t i = 0; i < bytes.size(); ++i)
    bytes[i] = std::uint8_t(map.values[i] * scale);
  write_pgm(bytes, map.height, map.width, path);
}

void export_pgm(const BoundaryMap& map, const std::string& path) {
  std::vector<std::uint8_t> bytes(map.mask.size());
  for (std::size_t i = 0; i < bytes.size(); ++i)
    bytes[i] = map.mask[i] ? 255 : 0;
  write_pgm(bytes, map.height, map.width, path);
}

void export_pgm(const std::vector<float>& gray01, int h, int w,
                const std::string& path) {
  if (std::int64_t(gray01.size()) != std::int64_t(h) * w)
    throw UsageError("export_pgm: value count does not match size");
  std::vector<std::uint8_t> bytes(gray01.size());
  for (std::size_t i = 0; i < bytes.size(); ++i)
    bytes[i] = std::uint8_t(
        std::clamp(int(std::lround(gray01[i] * 255.f)), 0, 255));
  write_pgm(bytes, h, w, path);
}

}  // namespace dfn
