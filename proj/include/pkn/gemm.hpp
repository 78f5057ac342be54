// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>

#include <Eigen/Core>

namespace pkn::detail {

template <class T>
using RowMat = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

// C[m,n] (+)= A[m,k] * B[k,n], all row-major and contiguous.
template <class T>
void gemm_nn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c, bool accumulate) {
  Eigen::Map<const RowMat<T>> A(a, m, k);
  Eigen::Map<const RowMat<T>> B(b, k, n);
  Eigen::Map<RowMat<T>> C(c, m, n);
  if (accumulate)
    C.noalias() += A * B;
  else
    C.noalias() = A * B;
}

// C[m,n] (+)= A[m,k] * B[n,k]^T
template <class T>
void gemm_nt(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c, bool accumulate) {
  Eigen::Map<const RowMat<T>> A(a, m, k);
  Eigen::Map<const RowMat<T>> B(b, n, k);
  Eigen::Map<RowMat<T>> C(c, m, n);
  if (accumulate)
    C.noalias() += A * B.transpose();
  else
    C.noalias() = A * B.transpose();
}

// C[m,n] (+)= A[k,m]^T * B[k,n]
template <class T>
void gemm_tn(std::size_t m, std::size_t n, std::size_t k, const T* a, const T* b, T* c, bool accumulate) {
  Eigen::Map<const RowMat<T>> A(a, k, m);
  Eigen::Map<const RowMat<T>> B(b, k, n);
  Eigen::Map<RowMat<T>> C(c, m, n);
  if (accumulate)
    C.noalias() += A.transpose() * B;
  else
    C.noalias() = A.transpose() * B;
}

}  // namespace pkn::detail
