#ifndef DFN_TESTS_TEST_UTIL_HPP_
#define DFN_TESTS_TEST_UTIL_HPP_

#include <unistd.h>

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "dfn/rng.hpp"
#include "dfn/tensor.hpp"

namespace testutil {

template <typename T>
dfn::Tensor<T> random_tensor(dfn::Shape shape, std::uint64_t seed, T lo = T(-1),
                             T hi = T(1)) {
  dfn::Rng rng(seed);
  std::vector<T> v(std::size_t(dfn::shape_numel(shape)));
  for (auto& x : v) x = T(rng.uniform(double(lo), double(hi)));
  return dfn::Tensor<T>(std::move(shape), std::move(v));
}

template <typename T>
double max_abs_diff(const std::vector<T>& a, const std::vector<T>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(double(a[i]) - double(b[i])));
  return m;
}

template <typename T>
double max_rel_diff(const std::vector<T>& a, const std::vector<T>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double denom =
        std::max({std::abs(double(a[i])), std::abs(double(b[i])), 1e-12});
    m = std::max(m, std::abs(double(a[i]) - double(b[i])) / denom);
  }
  return m;
}

// Unique scratch directory under the build tree; wiped on construction.
class TempDir {
 public:
  explicit TempDir(const std::string& name)
      : path_(std::filesystem::temp_directory_path() /
              ("dfn_test_" + name + "_" + std::to_string(::getpid()))) {
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() { std::filesystem::remove_all(path_); }

  std::string str() const { return path_.string(); }
  std::string file(const std::string& name) const {
    return (path_ / name).string();
  }

 private:
  std::filesystem::path path_;
};

inline std::string read_file(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(f),
                     std::istreambuf_iterator<char>());
}

}  // namespace testutil

#endif  // DFN_TESTS_TEST_UTIL_HPP_
