#pragma once

#include <Eigen/Core>

#include <cstdarg>
#include <cstdio>
#include <stdexcept>
#include <string>

namespace graftkd {

template <typename T>
using MatrixX = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;

template <typename T>
using VectorX = Eigen::Matrix<T, Eigen::Dynamic, 1>;

template <typename T>
using PlaneMap = Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

template <typename T>
using ConstPlaneMap =
    Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>>;

class Error : public std::runtime_error {
 public:
  explicit Error(const std::string& what) : std::runtime_error(what) {}
};

inline std::string strf(const char* fmt, ...) {
  char buf[1024];
  va_list args;
  va_start(args, fmt);
  std::vsnprintf(buf, sizeof(buf), fmt, args);
  va_end(args);
  return std::string(buf);
}

[[noreturn]] inline void fail(const std::string& msg) { throw Error(msg); }

inline void require(bool cond, const std::string& msg) {
  if (!cond) fail(msg);
}

// A batch of feature maps. Each column of `data` is one sample, flattened
// channel-major: element (c, y, x) of sample b lives at row (c*h + y)*w + x.
// A per-sample view through plane()/cplane() is therefore a row-major
// (channels x h*w) matrix whose rows are contiguous channel planes.
template <typename T>
struct Tensor {
  MatrixX<T> data;
  int c = 0, h = 0, w = 0;

  Tensor() = default;
  Tensor(int c_, int h_, int w_, Eigen::Index batch)
      : data(MatrixX<T>::Zero(static_cast<Eigen::Index>(c_) * h_ * w_, batch)),
        c(c_), h(h_), w(w_) {}

  Eigen::Index batch() const { return data.cols(); }
  Eigen::Index features() const { return static_cast<Eigen::Index>(c) * h * w; }
  Eigen::Index plane_size() const { return static_cast<Eigen::Index>(h) * w; }

  PlaneMap<T> plane(Eigen::Index b) {
    return PlaneMap<T>(data.col(b).data(), c, plane_size());
  }
  ConstPlaneMap<T> cplane(Eigen::Index b) const {
    return ConstPlaneMap<T>(data.col(b).data(), c, plane_size());
  }

  bool same_shape(const Tensor& o) const {
    return c == o.c && h == o.h && w == o.w && batch() == o.batch();
  }

  std::string shape_str() const {
    return strf("(%d,%d,%d)x%ld", c, h, w, static_cast<long>(batch()));
  }
};

}  // namespace graftkd
