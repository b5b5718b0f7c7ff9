#pragma once

// Dense row-major tensors. The scalar type parameter selects the precision
// mode: float for training, double for verification (oracles and gradient
// checks run in double for tolerance headroom).

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace slufuse {

using Shape = std::vector<std::size_t>;

struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

inline std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t e : s) n *= e;
  return n;
}

template <class S>
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape shape, S fill = S(0))
      : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {
    check_extents();
  }

  Tensor(Shape shape, std::vector<S> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    check_extents();
    if (data_.size() != shape_numel(shape_))
      throw ShapeError("tensor: " + std::to_string(data_.size()) +
                       " elements do not fill shape " + shape_str(shape_));
  }

  static Tensor row(std::initializer_list<S> v) {
    return Tensor({1, v.size()}, std::vector<S>(v));
  }
  static Tensor vec(std::initializer_list<S> v) {
    return Tensor({v.size()}, std::vector<S>(v));
  }

  const Shape& shape() const { return shape_; }
  std::size_t rank() const { return shape_.size(); }
  std::size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  // 2-D view of the storage: all leading axes folded into rows, trailing
  // axis as columns. Scalars and vectors count as a single row.
  std::size_t cols() const { return shape_.empty() ? 1 : shape_.back(); }
  std::size_t rows() const { return cols() ? size() / cols() : 0; }

  S* data() { return data_.data(); }
  const S* data() const { return data_.data(); }
  std::vector<S>& storage() { return data_; }
  const std::vector<S>& storage() const { return data_; }

  S& operator[](std::size_t i) { return data_[i]; }
  const S& operator[](std::size_t i) const { return data_[i]; }
  S& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
  const S& at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  // Same storage, new extents; element count must be preserved.
  Tensor reshaped(Shape s) const {
    if (shape_numel(s) != size())
      throw ShapeError("reshape: " + shape_str(shape_) + " -> " + shape_str(s) +
                       " changes element count");
    Tensor out;
    out.shape_ = std::move(s);
    out.data_ = data_;
    return out;
  }

  bool all_finite() const {
    for (S v : data_)
      if (!std::isfinite(static_cast<double>(v))) return false;
    return true;
  }

  void fill(S v) { data_.assign(data_.size(), v); }

  template <class T>
  Tensor<T> cast() const {
    Tensor<T> out;
    out = Tensor<T>(shape_);
    for (std::size_t i = 0; i < data_.size(); ++i)
      out[i] = static_cast<T>(data_[i]);
    return out;
  }

  bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

 private:
  void check_extents() const {
    for (std::size_t e : shape_)
      if (e == 0) throw ShapeError("tensor: zero extent in " + shape_str(shape_));
  }

  Shape shape_;
  std::vector<S> data_;
};

// Integer id matrices (token ids, tag ids); kept separate from the numeric
// Tensor so the autodiff core never sees integer data.
struct IntMat {
  std::size_t rows = 0, cols = 0;
  std::vector<std::int32_t> data;

  IntMat() = default;
  IntMat(std::size_t r, std::size_t c, std::int32_t fill = 0)
      : rows(r), cols(c), data(r * c, fill) {}
  std::int32_t& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  std::int32_t at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
};

}  // namespace slufuse
