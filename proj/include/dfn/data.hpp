#ifndef DFN_DATA_HPP_
#define DFN_DATA_HPP_

#include <array>
#include <cstdint>
#include <string>
#include <vector>

#include "dfn/label_map.hpp"
#include "dfn/rng.hpp"
#include "dfn/tensor.hpp"

namespace dfn {

// Synthetic segmentation data. Samples place a handful of rectangles and
// ellipses over a background class; the two generation scenarios reproduce
// the failure modes the network is built around: one class rendered with two
// clashing textures, and two adjacent classes rendered with nearly identical
// colors.

enum class Scenario : std::uint8_t {
  kIntraInconsistency = 0,
  kInterIndistinction = 1,
  kMixed = 2,
};

const char* scenario_name(Scenario s);
Scenario scenario_from_name(const std::string& name);

struct DatasetSpec {
  int count = 0;
  int height = 64;
  int width = 64;
  int num_classes = 4;
  // scenario mix, must sum to 1
  double ratio_intra = 0.4;
  double ratio_inter = 0.4;
  double ratio_mixed = 0.2;
  double texture_noise = 0.08;  // stddev of per-channel pixel noise
  double similarity = 0.05;     // color distance bound for the confusable pair
  int boundary_thickness = 1;
  std::uint64_t seed = 0;
  // empirical per-channel mean of the generated images (filled by
  // build_dataset, persisted in the container)
  std::array<float, 3> channel_mean{0.f, 0.f, 0.f};

  void validate() const;
};

struct SampleRecord {
  Tensor<float> image;  // [3,H,W], values in [0,1] before mean subtraction
  LabelMap labels;
  BoundaryMap boundary;
  std::uint64_t seed = 0;
  Scenario scenario = Scenario::kMixed;
};

struct Dataset {
  DatasetSpec spec;
  std::vector<SampleRecord> samples;
};

// A pixel is boundary iff any 4-neighbor carries a different class; the mask
// is then dilated (thickness - 1) times with the 4-neighborhood element.
BoundaryMap extract_boundary(const LabelMap& labels, int thickness);

SampleRecord gen_sample(std::uint64_t seed, const DatasetSpec& spec,
                        Scenario scenario);

// Generates spec.count samples (scenario drawn per the mix ratios) and fills
// in the empirical channel mean.
Dataset build_dataset(DatasetSpec spec);

// Random scale + horizontal flip + mean subtraction, restored to the original
// size by center crop / zero padding (labels pad with class 0). The boundary
// mask is re-derived from the augmented labels.
SampleRecord augment(const SampleRecord& sample, Rng& rng,
                     const std::vector<double>& scales,
                     const std::array<float, 3>& mean,
                     int boundary_thickness = 1);

// "DFND" container.
void write_dataset(const Dataset& ds, const std::string& path);
Dataset read_dataset(const std::string& path);

// Binary PGM (P5) exports. Label ids scale by floor(255/(K-1)).
void export_pgm(const LabelMap& map, const std::string& path);
void export_pgm(const BoundaryMap& map, const std::string& path);
void export_pgm(const std::vector<float>& gray01, int h, int w,
                const std::string& path);

// Raw-image helpers shared with evaluation.
std::vector<float> resize_bilinear(const float* src, int channels, int h,
                                   int w, int oh, int ow);
LabelMap resize_nearest(const LabelMap& src, int oh, int ow);
void flip_horizontal(float* img, int channels, int h, int w);
LabelMap flip_horizontal(const LabelMap& src);

}  // namespace dfn

#endif  // DFN_DATA_HPP_
