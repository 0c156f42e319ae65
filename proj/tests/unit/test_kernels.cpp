#include <gtest/gtest.h>

#include <cmath>

#include "evtrack/kernels.hpp"
#include "evtrack/rng.hpp"
#include "oracles/oracles.hpp"

using namespace evtrack;

namespace {

std::vector<double> random_vec(std::size_t n, Rng& r) {
  std::vector<double> v(n);
  for (auto& x : v) x = r.uniform(-1, 1);
  return v;
}

ConvGeometry random_conv(Rng& r) {
  ConvGeometry g;
  g.in_c = 1 + static_cast<int>(r.below(4));
  g.out_c = 1 + static_cast<int>(r.below(6));
  g.kernel = 1 + static_cast<int>(r.below(5));
  g.stride = 1 + static_cast<int>(r.below(3));
  g.pad = static_cast<int>(r.below(static_cast<std::uint64_t>(g.kernel)));
  g.in_h = g.kernel + static_cast<int>(r.below(9));
  g.in_w = g.kernel + static_cast<int>(r.below(9));
  return g;
}

double max_scaled_diff(const std::vector<double>& a, const double* b) {
  double worst = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    worst = std::max(worst, std::fabs(a[i] - b[i]) / std::max(1.0, std::fabs(a[i])));
  return worst;
}

// Backward of conv by the definition: every output tap scatters dy.
void conv_backward_oracle(const std::vector<double>& x, const std::vector<double>& w, const std::vector<double>& dy,
                          std::vector<double>& dx, std::vector<double>& dw, std::vector<double>& db, int n,
                          const ConvGeometry& g) {
  dx.assign(x.size(), 0);
  dw.assign(w.size(), 0);
  db.assign(static_cast<std::size_t>(g.out_c), 0);
  const int oh = g.out_h(), ow = g.out_w();
  for (int s = 0; s < n; ++s)
    for (int o = 0; o < g.out_c; ++o)
      for (int r = 0; r < oh; ++r)
        for (int q = 0; q < ow; ++q) {
          const double d = dy[((static_cast<std::size_t>(s) * g.out_c + o) * oh + r) * ow + q];
          db[static_cast<std::size_t>(o)] += d;
          for (int c = 0; c < g.in_c; ++c)
            for (int i = 0; i < g.kernel; ++i)
              for (int j = 0; j < g.kernel; ++j) {
                const int y = r * g.stride + i - g.pad, xx = q * g.stride + j - g.pad;
                if (y < 0 || xx < 0 || y >= g.in_h || xx >= g.in_w) continue;
                const std::size_t xi = ((static_cast<std::size_t>(s) * g.in_c + c) * g.in_h + y) * g.in_w + xx;
                const std::size_t wi = ((static_cast<std::size_t>(o) * g.in_c + c) * g.kernel + i) * g.kernel + j;
                dx[xi] += w[wi] * d;
                dw[wi] += x[xi] * d;
              }
        }
}

}  // namespace

TEST(Kernels, ConvForwardAgreesAcrossRoutes) {
  Rng r(1);
  for (int trial = 0; trial < 150; ++trial) {
    const ConvGeometry g = random_conv(r);
    const int n = 1 + static_cast<int>(r.below(3));
    const auto x = random_vec(static_cast<std::size_t>(n) * g.in_c * g.in_h * g.in_w, r);
    const auto w = random_vec(static_cast<std::size_t>(g.out_c) * g.patch(), r);
    const auto b = random_vec(static_cast<std::size_t>(g.out_c), r);
    const auto expected = oracle::conv2d(x, w, b, n, g);
    std::vector<double> y_ref(expected.size()), y_fast(expected.size());
    MacCounter macs;
    ref::conv2d(x.data(), w.data(), b.data(), y_ref.data(), n, g, &macs);
    fast::conv2d_forward(x.data(), w.data(), b.data(), y_fast.data(), n, g);
    EXPECT_LT(max_scaled_diff(expected, y_ref.data()), 1e-12) << trial;
    EXPECT_LT(max_scaled_diff(expected, y_fast.data()), 1e-12) << trial;
    EXPECT_EQ(macs.macs, expected.size() * static_cast<std::uint64_t>(g.patch()));
  }
}

TEST(Kernels, ConvBackwardMatchesDefinition) {
  Rng r(2);
  for (int trial = 0; trial < 120; ++trial) {
    const ConvGeometry g = random_conv(r);
    const int n = 1 + static_cast<int>(r.below(3));
    const auto x = random_vec(static_cast<std::size_t>(n) * g.in_c * g.in_h * g.in_w, r);
    const auto w = random_vec(static_cast<std::size_t>(g.out_c) * g.patch(), r);
    const auto dy = random_vec(static_cast<std::size_t>(n) * g.out_c * g.out_h() * g.out_w(), r);
    std::vector<double> dx_o, dw_o, db_o;
    conv_backward_oracle(x, w, dy, dx_o, dw_o, db_o, n, g);
    std::vector<double> dx(x.size(), 7.0), dw(w.size(), 0.0), db(db_o.size(), 0.0);
    fast::conv2d_backward(x.data(), w.data(), dy.data(), dx.data(), dw.data(), db.data(), n, g);
    EXPECT_LT(max_scaled_diff(dx_o, dx.data()), 1e-12) << trial;
    EXPECT_LT(max_scaled_diff(dw_o, dw.data()), 1e-12) << trial;
    EXPECT_LT(max_scaled_diff(db_o, db.data()), 1e-12) << trial;
  }
}

TEST(Kernels, LinearForwardBackward) {
  Rng r(3);
  for (int trial = 0; trial < 100; ++trial) {
    const int n = 1 + static_cast<int>(r.below(4));
    const int in = 1 + static_cast<int>(r.below(70));
    const int out = 1 + static_cast<int>(r.below(20));
    const auto x = random_vec(static_cast<std::size_t>(n) * in, r);
    const auto w = random_vec(static_cast<std::size_t>(out) * in, r);
    const auto b = random_vec(static_cast<std::size_t>(out), r);
    const auto expected = oracle::linear(x, w, b, n, in, out);
    std::vector<double> y_ref(expected.size()), y_fast(expected.size());
    ref::linear(x.data(), w.data(), b.data(), y_ref.data(), n, in, out);
    fast::linear_forward(x.data(), w.data(), b.data(), y_fast.data(), n, in, out);
    EXPECT_LT(max_scaled_diff(expected, y_ref.data()), 1e-12);
    EXPECT_LT(max_scaled_diff(expected, y_fast.data()), 1e-12);

    const auto dy = random_vec(expected.size(), r);
    std::vector<double> dx(x.size()), dw(w.size(), 0.0), db(b.size(), 0.0);
    fast::linear_backward(x.data(), w.data(), dy.data(), dx.data(), dw.data(), db.data(), n, in, out);
    for (int s = 0; s < n; ++s)
      for (int k = 0; k < in; ++k) {
        double acc = 0;
        for (int o = 0; o < out; ++o) acc += dy[s * out + o] * w[o * in + k];
        ASSERT_NEAR(dx[s * in + k], acc, 1e-12);
      }
    for (int o = 0; o < out; ++o) {
      double acc_b = 0;
      for (int s = 0; s < n; ++s) acc_b += dy[s * out + o];
      ASSERT_NEAR(db[o], acc_b, 1e-12);
      for (int k = 0; k < in; ++k) {
        double acc = 0;
        for (int s = 0; s < n; ++s) acc += dy[s * out + o] * x[s * in + k];
        ASSERT_NEAR(dw[o * in + k], acc, 1e-12);
      }
    }
  }
}

TEST(Kernels, AvgPoolForwardBackward) {
  Rng r(4);
  for (int trial = 0; trial < 100; ++trial) {
    PoolGeometry g;
    g.channels = 1 + static_cast<int>(r.below(4));
    g.kernel = 1 + static_cast<int>(r.below(3));
    g.stride = 1 + static_cast<int>(r.below(3));
    g.in_h = g.kernel + static_cast<int>(r.below(8));
    g.in_w = g.kernel + static_cast<int>(r.below(8));
    const int n = 1 + static_cast<int>(r.below(3));
    const auto x = random_vec(static_cast<std::size_t>(n) * g.channels * g.in_h * g.in_w, r);
    const auto expected = oracle::avgpool2d(x, n, g);
    std::vector<double> y_ref(expected.size()), y_fast(expected.size());
    ref::avgpool2d(x.data(), y_ref.data(), n, g);
    fast::avgpool2d_forward(x.data(), y_fast.data(), n, g);
    EXPECT_LT(max_scaled_diff(expected, y_ref.data()), 1e-12);
    EXPECT_LT(max_scaled_diff(expected, y_fast.data()), 1e-12);

    // <pool(x), dy> == <x, pool^T(dy)>
    const auto dy = random_vec(expected.size(), r);
    std::vector<double> dx(x.size(), 0.0);
    fast::avgpool2d_backward(dy.data(), dx.data(), n, g);
    double lhs = 0, rhs = 0;
    for (std::size_t i = 0; i < dy.size(); ++i) lhs += expected[i] * dy[i];
    for (std::size_t i = 0; i < x.size(); ++i) rhs += x[i] * dx[i];
    EXPECT_NEAR(lhs, rhs, 1e-10);
  }
}

TEST(Kernels, FloatWithIntegerDataIsExact) {
  // Small integer data keeps every partial sum exactly representable, so the
  // float kernels must agree with the double oracle to the bit.
  Rng r(5);
  for (int trial = 0; trial < 50; ++trial) {
    const ConvGeometry g = random_conv(r);
    std::vector<double> x(static_cast<std::size_t>(g.in_c) * g.in_h * g.in_w), w(static_cast<std::size_t>(g.out_c) * g.patch()),
        b(static_cast<std::size_t>(g.out_c));
    for (auto& v : x) v = static_cast<double>(r.below(9)) - 4;
    for (auto& v : w) v = static_cast<double>(r.below(9)) - 4;
    for (auto& v : b) v = static_cast<double>(r.below(9)) - 4;
    const auto expected = oracle::conv2d(x, w, b, 1, g);
    std::vector<float> xf(x.begin(), x.end()), wf(w.begin(), w.end()), bf(b.begin(), b.end()), y(expected.size());
    fast::conv2d_forward(xf.data(), wf.data(), bf.data(), y.data(), 1, g);
    for (std::size_t i = 0; i < y.size(); ++i) ASSERT_EQ(static_cast<double>(y[i]), expected[i]);
  }
}

TEST(Kernels, IntegerGemmIsExact) {
  Rng r(6);
  const int m = 13, k = 37, n = 29;
  std::vector<std::int32_t> a(m * k), b(k * n), c(m * n, 5);
  for (auto& v : a) v = static_cast<std::int32_t>(r.below(255)) - 127;
  for (auto& v : b) v = static_cast<std::int32_t>(r.below(255)) - 128;
  fast::gemm(a.data(), b.data(), c.data(), m, k, n, true);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      std::int64_t acc = 5;
      for (int q = 0; q < k; ++q) acc += static_cast<std::int64_t>(a[i * k + q]) * b[q * n + j];
      ASSERT_EQ(c[i * n + j], acc);
    }
}
