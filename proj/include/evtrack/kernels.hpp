#pragma once

// Layer kernels in two flavours:
//   ref::   straightforward nested loops, serial, with an optional MAC
//           counter. These are the test oracles and the instrumented path.
//   fast::  im2col + blocked GEMM with OpenMP over independent output rows.
//           Every output element is reduced in a fixed order, so results do
//           not depend on the thread count.

#include <cstdint>

namespace evtrack {

struct MacCounter {
  std::uint64_t macs = 0;
};

struct ConvGeometry {
  int in_c = 0, in_h = 0, in_w = 0;
  int out_c = 0;
  int kernel = 1, stride = 1, pad = 0;

  int out_h() const { return (in_h + 2 * pad - kernel) / stride + 1; }
  int out_w() const { return (in_w + 2 * pad - kernel) / stride + 1; }
  int patch() const { return in_c * kernel * kernel; }

  friend bool operator==(const ConvGeometry&, const ConvGeometry&) = default;
};

struct PoolGeometry {
  int channels = 0, in_h = 0, in_w = 0;
  int kernel = 2, stride = 2;

  int out_h() const { return (in_h - kernel) / stride + 1; }
  int out_w() const { return (in_w - kernel) / stride + 1; }

  friend bool operator==(const PoolGeometry&, const PoolGeometry&) = default;
};

namespace ref {

template <typename T>
void conv2d(const T* x, const T* w, const T* b, T* y, int batch, const ConvGeometry& g,
            MacCounter* counter = nullptr);

template <typename T>
void avgpool2d(const T* x, T* y, int batch, const PoolGeometry& g);

template <typename T>
void linear(const T* x, const T* w, const T* b, T* y, int batch, int in_features,
            int out_features, MacCounter* counter = nullptr);

}  // namespace ref

namespace fast {

// C[M x N] (+)= A[M x K] * B[K x N], all row-major.
template <typename T>
void gemm(const T* a, const T* b, T* c, int m, int k, int n, bool accumulate);

// col[patch x (out_h*out_w)] for one sample; padded taps are zero.
template <typename T>
void im2col(const T* x, T* col, const ConvGeometry& g);

// Adds col back onto dx for one sample (dx must be pre-initialized).
template <typename T>
void col2im(const T* col, T* dx, const ConvGeometry& g);

template <typename T>
void conv2d_forward(const T* x, const T* w, const T* b, T* y, int batch, const ConvGeometry& g);

// dw and db are accumulated into; dx (optional) is overwritten.
template <typename T>
void conv2d_backward(const T* x, const T* w, const T* dy, T* dx, T* dw, T* db, int batch,
                     const ConvGeometry& g);

template <typename T>
void avgpool2d_forward(const T* x, T* y, int batch, const PoolGeometry& g);

template <typename T>
void avgpool2d_backward(const T* dy, T* dx, int batch, const PoolGeometry& g);

template <typename T>
void linear_forward(const T* x, const T* w, const T* b, T* y, int batch, int in_features,
                    int out_features);

template <typename T>
void linear_backward(const T* x, const T* w, const T* dy, T* dx, T* dw, T* db, int batch,
                     int in_features, int out_features);

}  // namespace fast

}  // namespace evtrack
