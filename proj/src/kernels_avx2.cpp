// AVX2/FMA kernel variants. Elementwise kernels replicate the scalar
// results bitwise (same per-lane arithmetic, no reassociation); sum/dot/gemm
// use 8-lane accumulators, so they are equivalence-tested to a relative
// tolerance instead. Transcendentals (sigmoid) stay scalar for exactness.

#include <immintrin.h>

#include "prodet/kernels.hpp"

namespace prodet::kernels {

namespace {

void v_add(const float* a, const float* b, float* y, std::size_t n) {
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(y + i, _mm256_add_ps(_mm256_loadu_ps(a + i),
                                          _mm256_loadu_ps(b + i)));
  for (; i < n; ++i) y[i] = a[i] + b[i];
}
void v_sub(const float* a, const float* b, float* y, std::size_t n) {
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(y + i, _mm256_sub_ps(_mm256_loadu_ps(a + i),
                                          _mm256_loadu_ps(b + i)));
  for (; i < n; ++i) y[i] = a[i] - b[i];
}
void v_mul(const float* a, const float* b, float* y, std::size_t n) {
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(y + i, _mm256_mul_ps(_mm256_loadu_ps(a + i),
                                          _mm256_loadu_ps(b + i)));
  for (; i < n; ++i) y[i] = a[i] * b[i];
}
void v_axpy(float s, const float* x, float* y, std::size_t n) {
  // Scalar tail uses fmaf so every lane matches the vector fma bitwise.
  const __m256 vs = _mm256_set1_ps(s);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(y + i, _mm256_fmadd_ps(vs, _mm256_loadu_ps(x + i),
                                            _mm256_loadu_ps(y + i)));
  for (; i < n; ++i) y[i] = __builtin_fmaf(s, x[i], y[i]);
}
void v_scale(float s, const float* x, float* y, std::size_t n) {
  const __m256 vs = _mm256_set1_ps(s);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(y + i, _mm256_mul_ps(vs, _mm256_loadu_ps(x + i)));
  for (; i < n; ++i) y[i] = s * x[i];
}
void v_add_scalar(float s, const float* x, float* y, std::size_t n) {
  const __m256 vs = _mm256_set1_ps(s);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(y + i, _mm256_add_ps(vs, _mm256_loadu_ps(x + i)));
  for (; i < n; ++i) y[i] = x[i] + s;
}
void v_relu(const float* x, float* y, std::size_t n) {
  const __m256 zero = _mm256_setzero_ps();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(y + i, _mm256_max_ps(zero, _mm256_loadu_ps(x + i)));
  for (; i < n; ++i) y[i] = x[i] > 0.0f ? x[i] : 0.0f;
}
void v_relu_backward(const float* x, const float* gy, float* gx,
                     std::size_t n) {
  const __m256 zero = _mm256_setzero_ps();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m256 mask = _mm256_cmp_ps(_mm256_loadu_ps(x + i), zero, _CMP_GT_OQ);
    const __m256 add = _mm256_and_ps(mask, _mm256_loadu_ps(gy + i));
    _mm256_storeu_ps(gx + i, _mm256_add_ps(_mm256_loadu_ps(gx + i), add));
  }
  for (; i < n; ++i)
    if (x[i] > 0.0f) gx[i] += gy[i];
}
void v_clamp01(const float* x, float* y, std::size_t n) {
  const __m256 zero = _mm256_setzero_ps();
  const __m256 one = _mm256_set1_ps(1.0f);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    _mm256_storeu_ps(
        y + i, _mm256_min_ps(one, _mm256_max_ps(zero, _mm256_loadu_ps(x + i))));
  for (; i < n; ++i) y[i] = x[i] < 0.0f ? 0.0f : (x[i] > 1.0f ? 1.0f : x[i]);
}
void v_clamp01_backward(const float* x, const float* gy, float* gx,
                        std::size_t n) {
  const __m256 zero = _mm256_setzero_ps();
  const __m256 one = _mm256_set1_ps(1.0f);
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8) {
    const __m256 xv = _mm256_loadu_ps(x + i);
    const __m256 mask = _mm256_and_ps(_mm256_cmp_ps(xv, zero, _CMP_GT_OQ),
                                      _mm256_cmp_ps(xv, one, _CMP_LT_OQ));
    const __m256 add = _mm256_and_ps(mask, _mm256_loadu_ps(gy + i));
    _mm256_storeu_ps(gx + i, _mm256_add_ps(_mm256_loadu_ps(gx + i), add));
  }
  for (; i < n; ++i)
    if (x[i] > 0.0f && x[i] < 1.0f) gx[i] += gy[i];
}

float hsum(__m256 v) {
  const __m128 lo = _mm256_castps256_ps128(v);
  const __m128 hi = _mm256_extractf128_ps(v, 1);
  __m128 s = _mm_add_ps(lo, hi);
  s = _mm_hadd_ps(s, s);
  s = _mm_hadd_ps(s, s);
  return _mm_cvtss_f32(s);
}

float v_sum(const float* x, std::size_t n) {
  __m256 acc = _mm256_setzero_ps();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    acc = _mm256_add_ps(acc, _mm256_loadu_ps(x + i));
  float tail = 0.0f;
  for (; i < n; ++i) tail += x[i];
  return hsum(acc) + tail;
}
float v_dot(const float* a, const float* b, std::size_t n) {
  __m256 acc = _mm256_setzero_ps();
  std::size_t i = 0;
  for (; i + 8 <= n; i += 8)
    acc = _mm256_fmadd_ps(_mm256_loadu_ps(a + i), _mm256_loadu_ps(b + i), acc);
  float tail = 0.0f;
  for (; i < n; ++i) tail += a[i] * b[i];
  return hsum(acc) + tail;
}

void v_gemm(const float* a, const float* b, float* c, std::size_t m,
            std::size_t k, std::size_t n, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i) {
    float* crow = c + i * n;
    if (!accumulate) {
      std::size_t j = 0;
      const __m256 zero = _mm256_setzero_ps();
      for (; j + 8 <= n; j += 8) _mm256_storeu_ps(crow + j, zero);
      for (; j < n; ++j) crow[j] = 0.0f;
    }
    for (std::size_t kk = 0; kk < k; ++kk) {
      const float av = a[i * k + kk];
      const float* brow = b + kk * n;
      const __m256 va = _mm256_set1_ps(av);
      std::size_t j = 0;
      for (; j + 8 <= n; j += 8)
        _mm256_storeu_ps(crow + j, _mm256_fmadd_ps(va, _mm256_loadu_ps(brow + j),
                                                   _mm256_loadu_ps(crow + j)));
      for (; j < n; ++j) crow[j] = __builtin_fmaf(av, brow[j], crow[j]);
    }
  }
}
void v_gemm_nt(const float* a, const float* b, float* c, std::size_t m,
               std::size_t k, std::size_t n, bool accumulate) {
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) {
      const float* arow = a + i * k;
      const float* brow = b + j * k;
      __m256 acc = _mm256_setzero_ps();
      std::size_t kk = 0;
      for (; kk + 8 <= k; kk += 8)
        acc = _mm256_fmadd_ps(_mm256_loadu_ps(arow + kk),
                              _mm256_loadu_ps(brow + kk), acc);
      float s = hsum(acc);
      for (; kk < k; ++kk) s += arow[kk] * brow[kk];
      c[i * n + j] = accumulate ? c[i * n + j] + s : s;
    }
}
void v_gemm_tn(const float* a, const float* b, float* c, std::size_t m,
               std::size_t k, std::size_t n, bool accumulate) {
  if (!accumulate) {
    const __m256 zero = _mm256_setzero_ps();
    std::size_t i = 0;
    for (; i + 8 <= m * n; i += 8) _mm256_storeu_ps(c + i, zero);
    for (; i < m * n; ++i) c[i] = 0.0f;
  }
  for (std::size_t kk = 0; kk < k; ++kk)
    for (std::size_t i = 0; i < m; ++i) {
      const float av = a[kk * m + i];
      const float* brow = b + kk * n;
      float* crow = c + i * n;
      const __m256 va = _mm256_set1_ps(av);
      std::size_t j = 0;
      for (; j + 8 <= n; j += 8)
        _mm256_storeu_ps(crow + j, _mm256_fmadd_ps(va, _mm256_loadu_ps(brow + j),
                                                   _mm256_loadu_ps(crow + j)));
      for (; j < n; ++j) crow[j] = __builtin_fmaf(av, brow[j], crow[j]);
    }
}

void v_sigmoid(const float* x, float* y, std::size_t n) {
  for (std::size_t i = 0; i < n; ++i)
    y[i] = static_cast<float>(detail::sigmoid_accurate(x[i]));
}

}  // namespace

const TableF32* f32_avx2() {
  static const TableF32 table{
      v_add,     v_sub,        v_mul,     v_axpy,
      v_scale,   v_add_scalar, v_relu,    v_relu_backward,
      v_sigmoid, v_clamp01,    v_clamp01_backward,
      v_sum,     v_dot,        v_gemm,    v_gemm_nt, v_gemm_tn};
  return &table;
}

}  // namespace prodet::kernels
