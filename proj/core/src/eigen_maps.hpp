#pragma once

// Private helpers: Eigen views over row-major tensor buffers.

#include <complex>
#include <cstddef>

#include <Eigen/Dense>

namespace roadenkf::detail {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CRowMat = Eigen::Matrix<std::complex<double>, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using ConstMapMat = Eigen::Map<const RowMat>;
using MapCMat = Eigen::Map<CRowMat>;
using ConstMapCMat = Eigen::Map<const CRowMat>;

inline MapMat map(double* p, std::size_t r, std::size_t c) {
  return MapMat(p, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}
inline ConstMapMat cmap(const double* p, std::size_t r, std::size_t c) {
  return ConstMapMat(p, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}
inline MapCMat map(std::complex<double>* p, std::size_t r, std::size_t c) {
  return MapCMat(p, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}
inline ConstMapCMat cmap(const std::complex<double>* p, std::size_t r, std::size_t c) {
  return ConstMapCMat(p, static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

}  // namespace roadenkf::detail
