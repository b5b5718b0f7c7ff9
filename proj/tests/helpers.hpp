#pragma once

#include <cstdint>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "slufuse/rng.hpp"
#include "slufuse/tensor.hpp"

namespace testutil {

template <class S>
slufuse::Tensor<S> random_tensor(slufuse::Shape shape, slufuse::Rng& rng,
                                 double lo = -1.0, double hi = 1.0) {
  slufuse::Tensor<S> t(std::move(shape));
  for (std::size_t i = 0; i < t.size(); ++i)
    t[i] = static_cast<S>(rng.uniform(lo, hi));
  return t;
}

template <class S>
double max_abs_diff(const slufuse::Tensor<S>& a, const slufuse::Tensor<S>& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    m = std::max(m, std::abs(static_cast<double>(a[i]) - static_cast<double>(b[i])));
  return m;
}

// Scratch directory under the build tree, wiped per construction.
class TempDir {
 public:
  explicit TempDir(const std::string& name)
      : path_(std::filesystem::temp_directory_path() / ("slufuse_test_" + name)) {
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() { std::filesystem::remove_all(path_); }
  const std::filesystem::path& path() const { return path_; }

 private:
  std::filesystem::path path_;
};

inline void write_file(const std::filesystem::path& p, const std::string& text) {
  std::filesystem::create_directories(p.parent_path());
  std::ofstream os(p);
  os << text;
}

}  // namespace testutil
