#include "evtrack/kernels.hpp"

#include <algorithm>
#include <cstring>
#include <vector>

namespace evtrack {

namespace ref {

template <typename T>
void conv2d(const T* x, const T* w, const T* b, T* y, int batch, const ConvGeometry& g,
            MacCounter* counter) {
  const int oh_n = g.out_h(), ow_n = g.out_w();
  std::uint64_t macs = 0;
  for (int n = 0; n < batch; ++n)
    for (int co = 0; co < g.out_c; ++co)
      for (int oh = 0; oh < oh_n; ++oh)
        for (int ow = 0; ow < ow_n; ++ow) {
          T acc = b ? b[co] : T{0};
          for (int ci = 0; ci < g.in_c; ++ci)
            for (int kh = 0; kh < g.kernel; ++kh)
              for (int kw = 0; kw < g.kernel; ++kw) {
                const int ih = oh * g.stride - g.pad + kh;
                const int iw = ow * g.stride - g.pad + kw;
                const bool inside = ih >= 0 && ih < g.in_h && iw >= 0 && iw < g.in_w;
                const T v = inside ? x[((static_cast<std::size_t>(n) * g.in_c + ci) * g.in_h + ih) * g.in_w + iw]
                                   : T{0};
                acc += v * w[((static_cast<std::size_t>(co) * g.in_c + ci) * g.kernel + kh) * g.kernel + kw];
                ++macs;
              }
          y[((static_cast<std::size_t>(n) * g.out_c + co) * oh_n + oh) * ow_n + ow] = acc;
        }
  if (counter) counter->macs += macs;
}

template <typename T>
void avgpool2d(const T* x, T* y, int batch, const PoolGeometry& g) {
  const int oh_n = g.out_h(), ow_n = g.out_w();
  const T inv = T{1} / static_cast<T>(g.kernel * g.kernel);
  for (int n = 0; n < batch; ++n)
    for (int c = 0; c < g.channels; ++c)
      for (int oh = 0; oh < oh_n; ++oh)
        for (int ow = 0; ow < ow_n; ++ow) {
          T acc{0};
          for (int kh = 0; kh < g.kernel; ++kh)
            for (int kw = 0; kw < g.kernel; ++kw)
              acc += x[((static_cast<std::size_t>(n) * g.channels + c) * g.in_h + oh * g.stride + kh) * g.in_w +
                       ow * g.stride + kw];
          y[((static_cast<std::size_t>(n) * g.channels + c) * oh_n + oh) * ow_n + ow] = acc * inv;
        }
}

template <typename T>
void linear(const T* x, const T* w, const T* b, T* y, int batch, int in_features, int out_features,
            MacCounter* counter) {
  std::uint64_t macs = 0;
  for (int n = 0; n < batch; ++n)
    for (int o = 0; o < out_features; ++o) {
      T acc = b ? b[o] : T{0};
      for (int i = 0; i < in_features; ++i) {
        acc += x[static_cast<std::size_t>(n) * in_features + i] * w[static_cast<std::size_t>(o) * in_features + i];
        ++macs;
      }
      y[static_cast<std::size_t>(n) * out_features + o] = acc;
    }
  if (counter) counter->macs += macs;
}

template void conv2d<float>(const float*, const float*, const float*, float*, int, const ConvGeometry&, MacCounter*);
template void conv2d<double>(const double*, const double*, const double*, double*, int, const ConvGeometry&, MacCounter*);
template void avgpool2d<float>(const float*, float*, int, const PoolGeometry&);
template void avgpool2d<double>(const double*, double*, int, const PoolGeometry&);
template void linear<float>(const float*, const float*, const float*, float*, int, int, int, MacCounter*);
template void linear<double>(const double*, const double*, const double*, double*, int, int, int, MacCounter*);

}  // namespace ref

namespace fast {

namespace {

constexpr int kRowBlock = 4;

template <typename T>
constexpr int col_block() {
  return 256 / static_cast<int>(sizeof(T));  // 64 floats / 32 doubles
}

template <typename T>
void transpose(const T* src, T* dst, int rows, int cols) {
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c)
      dst[static_cast<std::size_t>(c) * rows + r] = src[static_cast<std::size_t>(r) * cols + c];
}

}  // namespace

template <typename T>
void gemm(const T* a, const T* b, T* c, int m, int k, int n, bool accumulate) {
  constexpr int MR = kRowBlock;
  constexpr int NR = col_block<T>();
  const int m_blocks = (m + MR - 1) / MR;
  const int n_blocks = (n + NR - 1) / NR;
  const long work = static_cast<long>(m) * n * k;

  // Column panels outer so each B panel stays cache resident across row blocks.
#pragma omp parallel for schedule(static) if (work > (1L << 18))
  for (int blk = 0; blk < m_blocks * n_blocks; ++blk) {
    const int ib = (blk % m_blocks) * MR;
    const int jb = (blk / m_blocks) * NR;
    const int mr = std::min(MR, m - ib);
    const int nr = std::min(NR, n - jb);
    alignas(64) T acc[MR][NR];
    if (mr == MR && nr == NR) {
      for (int r = 0; r < MR; ++r)
        for (int j = 0; j < NR; ++j) acc[r][j] = T{0};
      for (int p = 0; p < k; ++p) {
        const T* brow = b + static_cast<std::size_t>(p) * n + jb;
        for (int r = 0; r < MR; ++r) {
          const T av = a[static_cast<std::size_t>(ib + r) * k + p];
          for (int j = 0; j < NR; ++j) acc[r][j] += av * brow[j];
        }
      }
    } else {
      for (int r = 0; r < mr; ++r)
        for (int j = 0; j < nr; ++j) acc[r][j] = T{0};
      for (int p = 0; p < k; ++p) {
        const T* brow = b + static_cast<std::size_t>(p) * n + jb;
        for (int r = 0; r < mr; ++r) {
          const T av = a[static_cast<std::size_t>(ib + r) * k + p];
          for (int j = 0; j < nr; ++j) acc[r][j] += av * brow[j];
        }
      }
    }
    for (int r = 0; r < mr; ++r) {
      T* crow = c + static_cast<std::size_t>(ib + r) * n + jb;
      if (accumulate)
        for (int j = 0; j < nr; ++j) crow[j] += acc[r][j];
      else
        for (int j = 0; j < nr; ++j) crow[j] = acc[r][j];
    }
  }
}

template <typename T>
void im2col(const T* x, T* col, const ConvGeometry& g) {
  const int oh_n = g.out_h(), ow_n = g.out_w();
  const std::size_t plane = static_cast<std::size_t>(oh_n) * ow_n;
  for (int ci = 0; ci < g.in_c; ++ci)
    for (int kh = 0; kh < g.kernel; ++kh)
      for (int kw = 0; kw < g.kernel; ++kw) {
        T* dst = col + ((static_cast<std::size_t>(ci) * g.kernel + kh) * g.kernel + kw) * plane;
        const T* src = x + static_cast<std::size_t>(ci) * g.in_h * g.in_w;
        for (int oh = 0; oh < oh_n; ++oh) {
          const int ih = oh * g.stride - g.pad + kh;
          T* drow = dst + static_cast<std::size_t>(oh) * ow_n;
          if (ih < 0 || ih >= g.in_h) {
            std::fill(drow, drow + ow_n, T{0});
            continue;
          }
          const T* srow = src + static_cast<std::size_t>(ih) * g.in_w;
          for (int ow = 0; ow < ow_n; ++ow) {
            const int iw = ow * g.stride - g.pad + kw;
            drow[ow] = (iw >= 0 && iw < g.in_w) ? srow[iw] : T{0};
          }
        }
      }
}

template <typename T>
void col2im(const T* col, T* dx, const ConvGeometry& g) {
  const int oh_n = g.out_h(), ow_n = g.out_w();
  const std::size_t plane = static_cast<std::size_t>(oh_n) * ow_n;
  for (int ci = 0; ci < g.in_c; ++ci)
    for (int kh = 0; kh < g.kernel; ++kh)
      for (int kw = 0; kw < g.kernel; ++kw) {
        const T* src = col + ((static_cast<std::size_t>(ci) * g.kernel + kh) * g.kernel + kw) * plane;
        T* dst = dx + static_cast<std::size_t>(ci) * g.in_h * g.in_w;
        for (int oh = 0; oh < oh_n; ++oh) {
          const int ih = oh * g.stride - g.pad + kh;
          if (ih < 0 || ih >= g.in_h) continue;
          T* drow = dst + static_cast<std::size_t>(ih) * g.in_w;
          const T* srow = src + static_cast<std::size_t>(oh) * ow_n;
          for (int ow = 0; ow < ow_n; ++ow) {
            const int iw = ow * g.stride - g.pad + kw;
            if (iw >= 0 && iw < g.in_w) drow[iw] += srow[ow];
          }
        }
      }
}

template <typename T>
void conv2d_forward(const T* x, const T* w, const T* b, T* y, int batch, const ConvGeometry& g) {
  const int plane = g.out_h() * g.out_w();
  const int patch = g.patch();
  std::vector<T> col(static_cast<std::size_t>(patch) * plane);
  for (int n = 0; n < batch; ++n) {
    im2col(x + static_cast<std::size_t>(n) * g.in_c * g.in_h * g.in_w, col.data(), g);
    T* yn = y + static_cast<std::size_t>(n) * g.out_c * plane;
    gemm(w, col.data(), yn, g.out_c, patch, plane, false);
    if (b)
      for (int co = 0; co < g.out_c; ++co) {
        T* row = yn + static_cast<std::size_t>(co) * plane;
        for (int p = 0; p < plane; ++p) row[p] += b[co];
      }
  }
}

template <typename T>
void conv2d_backward(const T* x, const T* w, const T* dy, T* dx, T* dw, T* db, int batch,
                     const ConvGeometry& g) {
  const int plane = g.out_h() * g.out_w();
  const int patch = g.patch();
  const std::size_t in_size = static_cast<std::size_t>(g.in_c) * g.in_h * g.in_w;
  std::vector<T> col(static_cast<std::size_t>(patch) * plane);
  std::vector<T> col_t(col.size());
  std::vector<T> w_t(static_cast<std::size_t>(patch) * g.out_c);
  transpose(w, w_t.data(), g.out_c, patch);
  for (int n = 0; n < batch; ++n) {
    const T* dyn = dy + static_cast<std::size_t>(n) * g.out_c * plane;
    if (db)
      for (int co = 0; co < g.out_c; ++co) {
        T s{0};
        const T* row = dyn + static_cast<std::size_t>(co) * plane;
        for (int p = 0; p < plane; ++p) s += row[p];
        db[co] += s;
      }
    if (dw) {
      im2col(x + n * in_size, col.data(), g);
      transpose(col.data(), col_t.data(), patch, plane);
      gemm(dyn, col_t.data(), dw, g.out_c, plane, patch, true);
    }
    if (dx) {
      gemm(w_t.data(), dyn, col.data(), patch, g.out_c, plane, false);
      T* dxn = dx + n * in_size;
      std::fill(dxn, dxn + in_size, T{0});
      col2im(col.data(), dxn, g);
    }
  }
}

template <typename T>
void avgpool2d_forward(const T* x, T* y, int batch, const PoolGeometry& g) {
  const int oh_n = g.out_h(), ow_n = g.out_w();
  const T inv = T{1} / static_cast<T>(g.kernel * g.kernel);
  const int planes = batch * g.channels;
#pragma omp parallel for schedule(static) if (planes > 64)
  for (int pc = 0; pc < planes; ++pc) {
    const T* src = x + static_cast<std::size_t>(pc) * g.in_h * g.in_w;
    T* dst = y + static_cast<std::size_t>(pc) * oh_n * ow_n;
    for (int oh = 0; oh < oh_n; ++oh)
      for (int ow = 0; ow < ow_n; ++ow) {
        T acc{0};
        for (int kh = 0; kh < g.kernel; ++kh)
          for (int kw = 0; kw < g.kernel; ++kw)
            acc += src[static_cast<std::size_t>(oh * g.stride + kh) * g.in_w + ow * g.stride + kw];
        dst[static_cast<std::size_t>(oh) * ow_n + ow] = acc * inv;
      }
  }
}

template <typename T>
void avgpool2d_backward(const T* dy, T* dx, int batch, const PoolGeometry& g) {
  const int oh_n = g.out_h(), ow_n = g.out_w();
  const T inv = T{1} / static_cast<T>(g.kernel * g.kernel);
  const int planes = batch * g.channels;
#pragma omp parallel for schedule(static) if (planes > 64)
  for (int pc = 0; pc < planes; ++pc) {
    const T* src = dy + static_cast<std::size_t>(pc) * oh_n * ow_n;
    T* dst = dx + static_cast<std::size_t>(pc) * g.in_h * g.in_w;
    std::fill(dst, dst + static_cast<std::size_t>(g.in_h) * g.in_w, T{0});
    for (int oh = 0; oh < oh_n; ++oh)
      for (int ow = 0; ow < ow_n; ++ow) {
        const T v = src[static_cast<std::size_t>(oh) * ow_n + ow] * inv;
        for (int kh = 0; kh < g.kernel; ++kh)
          for (int kw = 0; kw < g.kernel; ++kw)
            dst[static_cast<std::size_t>(oh * g.stride + kh) * g.in_w + ow * g.stride + kw] += v;
      }
  }
}

template <typename T>
void linear_forward(const T* x, const T* w, const T* b, T* y, int batch, int in_features,
                    int out_features) {
#pragma omp parallel for schedule(static) if (batch * out_features > 4096)
  for (int no = 0; no < batch * out_features; ++no) {
    const int n = no / out_features, o = no % out_features;
    const T* xr = x + static_cast<std::size_t>(n) * in_features;
    const T* wr = w + static_cast<std::size_t>(o) * in_features;
    T acc{0};
    for (int i = 0; i < in_features; ++i) acc += xr[i] * wr[i];
    y[no] = acc + (b ? b[o] : T{0});
  }
}

template <typename T>
void linear_backward(const T* x, const T* w, const T* dy, T* dx, T* dw, T* db, int batch,
                     int in_features, int out_features) {
  if (dw || db) {
#pragma omp parallel for schedule(static) if (out_features * in_features > 4096)
    for (int o = 0; o < out_features; ++o) {
      T* dwr = dw ? dw + static_cast<std::size_t>(o) * in_features : nullptr;
      for (int n = 0; n < batch; ++n) {
        const T g = dy[static_cast<std::size_t>(n) * out_features + o];
        if (db) db[o] += g;
        if (dwr) {
          const T* xr = x + static_cast<std::size_t>(n) * in_features;
          for (int i = 0; i < in_features; ++i) dwr[i] += g * xr[i];
        }
      }
    }
  }
  if (dx) {
    for (int n = 0; n < batch; ++n) {
      T* dxr = dx + static_cast<std::size_t>(n) * in_features;
      std::fill(dxr, dxr + in_features, T{0});
      for (int o = 0; o < out_features; ++o) {
        const T g = dy[static_cast<std::size_t>(n) * out_features + o];
        const T* wr = w + static_cast<std::size_t>(o) * in_features;
        for (int i = 0; i < in_features; ++i) dxr[i] += g * wr[i];
      }
    }
  }
}

#define EVTRACK_INSTANTIATE(T)                                                                   \
  template void gemm<T>(const T*, const T*, T*, int, int, int, bool);                           \
  template void im2col<T>(const T*, T*, const ConvGeometry&);                                   \
  template void col2im<T>(const T*, T*, const ConvGeometry&);                                   \
  template void conv2d_forward<T>(const T*, const T*, const T*, T*, int, const ConvGeometry&);  \
  template void conv2d_backward<T>(const T*, const T*, const T*, T*, T*, T*, int,               \
                                   const ConvGeometry&);                                        \
  template void avgpool2d_forward<T>(const T*, T*, int, const PoolGeometry&);                   \
  template void avgpool2d_backward<T>(const T*, T*, int, const PoolGeometry&);                  \
  template void linear_forward<T>(const T*, const T*, const T*, T*, int, int, int);             \
  template void linear_backward<T>(const T*, const T*, const T*, T*, T*, T*, int, int, int);

EVTRACK_INSTANTIATE(float)
EVTRACK_INSTANTIATE(double)
#undef EVTRACK_INSTANTIATE

// Integer GEMM for the quantized path; exact, so any order gives the same result.
template void gemm<std::int32_t>(const std::int32_t*, const std::int32_t*, std::int32_t*, int, int, int, bool);
template void im2col<std::int32_t>(const std::int32_t*, std::int32_t*, const ConvGeometry&);

}  // namespace fast

}  // namespace evtrack
