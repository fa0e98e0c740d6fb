// Scalar reference kernels. These define the semantics the AVX2 variants
// are tested against.

#include <cmath>

#include "prodet/kernels.hpp"

namespace prodet::kernels {

namespace detail {
double sigmoid_accurate(double x) {
  // Evaluated in double for both precisions; stable for large |x|.
  if (x >= 0.0) {
    const double e = std::exp(-x);
    return 1.0 / (1.0 + e);
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}
}  // namespace detail

namespace {

void s_add(const float* a, const float* b, float* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = a[i] + b[i];
}
void s_sub(const float* a, const float* b, float* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = a[i] - b[i];
}
void s_mul(const float* a, const float* b, float* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = a[i] * b[i];
}
void s_axpy(float s, const float* x, float* y, std::size_t n) {
  // Fused multiply-add so the result is bitwise identical to the FMA lanes
  // of the vector variant.
  for (std::size_t i = 0; i < n; ++i) y[i] = __builtin_fmaf(s, x[i], y[i]);
}
void s_scale(float s, const float* x, float* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = s * x[i];
}
void s_add_scalar(float s, const float* x, float* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = x[i] + s;
}
void s_relu(const float* x, float* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i) y[i] = x[i] > 0.0f ? x[i] : 0.0f;
}
void s_relu_backward(const float* x, const float* gy, float* gx,
                     std::size_t n) {
  for (std::size_t i = 0; i < n; ++i)
    if (x[i] > 0.0f) gx[i] += gy[i];
}
void s_sigmoid(const float* x, float* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i)
    y[i] = static_cast<float>(detail::sigmoid_accurate(x[i]));
}
void s_clamp01(const float* x, float* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i)
    y[i] = x[i] < 0.0f ? 0.0f : (x[i] > 1.0f ? 1.0f : x[i]);
}
void s_clamp01_backward(const float* x, const float* gy, float* gx,
                        std::size_t n) {
  for (std::size_t i = 0; i < n; ++i)
    if (x[i] > 0.0f && x[i] < 1.0f) gx[i] += gy[i];
}
float s_sum(const float* x, std::size_t n) {
  float acc = 0.0f;
  for (std::size_t i = 0; i < n; ++i) acc += x[i];
  return acc;
}
float s_dot(const float* a, const float* b, std::size_t n) {
  float acc = 0.0f;
  for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
  return acc;
}
void s_gemm(const float* a, const float* b, float* c, std::size_t m,
            std::size_t k, std::size_t n, bool acc) {
  for (std::size_t i = 0; i < m; ++i) {
    float* crow = c + i * n;
    if (!acc)
      for (std::size_t j = 0; j < n; ++j) crow[j] = 0.0f;
    for (std::size_t kk = 0; kk < k; ++kk) {
      const float av = a[i * k + kk];
      const float* brow = b + kk * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
  }
}
void s_gemm_nt(const float* a, const float* b, float* c, std::size_t m,
               std::size_t k, std::size_t n, bool acc) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      float s = acc ? c[i * n + j] : 0.0f;
      for (std::size_t kk = 0; kk < k; ++kk)
        s += a[i * k + kk] * b[j * k + kk];
      c[i * n + j] = s;
    }
}
void s_gemm_tn(const float* a, const float* b, float* c, std::size_t m,
               std::size_t k, std::size_t n, bool acc) {
  if (!acc)
    for (std::size_t i = 0; i < m * n; ++i) c[i] = 0.0f;
  for (std::size_t kk = 0; kk < k; ++kk)
    for (std::size_t i = 0; i < m; ++i) {
      const float av = a[kk * m + i];
      const float* brow = b + kk * n;
      float* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
    }
}

}  // namespace

const TableF32& f32_scalar() {
  static const TableF32 table{
      s_add,     s_sub,           s_mul,     s_axpy,
      s_scale,   s_add_scalar,    s_relu,    s_relu_backward,
      s_sigmoid, s_clamp01,       s_clamp01_backward,
      s_sum,     s_dot,           s_gemm,    s_gemm_nt, s_gemm_tn};
  return table;
}

}  // namespace prodet::kernels
