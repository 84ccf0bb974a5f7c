#pragma once

#include <bit>
#include <cstdint>
#include <cstdio>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

namespace maskspec {

static_assert(std::endian::native == std::endian::little,
              "maskspec file formats are little-endian; big-endian hosts are unsupported");

/// A call violated an API contract (bad shape, out-of-range argument, ...).
class contract_error : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

/// External input was unusable (missing file, malformed data, empty audio).
class input_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// A numeric op produced or received NaN/Inf.
class numeric_error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Dense row-major matrix for plain (non-differentiated) data.
template <typename T>
struct Matrix {
  long rows{0};
  long cols{0};
  std::vector<T> data;

  Matrix() = default;
  Matrix(long r, long c, T fill = T(0))
      : rows(r), cols(c), data(static_cast<std::size_t>(r) * static_cast<std::size_t>(c), fill) {
    if (r < 0 || c < 0) throw contract_error("Matrix: negative dimension");
  }
  Matrix(long r, long c, std::vector<T> d) : rows(r), cols(c), data(std::move(d)) {
    if (static_cast<long>(data.size()) != r * c) throw contract_error("Matrix: data size does not match shape");
  }

  T& operator()(long r, long c) { return data[static_cast<std::size_t>(r) * cols + c]; }
  const T& operator()(long r, long c) const { return data[static_cast<std::size_t>(r) * cols + c]; }

  T* row(long r) { return data.data() + static_cast<std::size_t>(r) * cols; }
  const T* row(long r) const { return data.data() + static_cast<std::size_t>(r) * cols; }

  long size() const { return rows * cols; }
  bool same_shape(const Matrix& o) const { return rows == o.rows && cols == o.cols; }

  template <typename U>
  Matrix<U> cast() const {
    Matrix<U> out(rows, cols);
    for (long i = 0; i < size(); ++i) out.data[i] = static_cast<U>(data[i]);
    return out;
  }
};

/// Fixed decimal formatting used everywhere values land in text files, so
/// repeated runs emit byte-identical output.
inline std::string format_value(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return std::string(buf);
}

}  // namespace maskspec
