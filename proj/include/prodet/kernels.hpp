#pragma once
// Compute kernels that back the tensor ops. Two f32 implementations exist:
// a scalar reference and an AVX2/FMA variant; one is selected at runtime by
// CPU detection, overridable with PRODET_KERNELS=scalar|avx2|auto.
// Elementwise kernels are bitwise-equal across variants; reductions and GEMM
// may reassociate, so their equivalence is tested to a tight relative bound.
// The f64 path (gradient checking, theory helpers) is scalar only.

#include <cstddef>
#include <cstdint>

namespace prodet::kernels {

enum class Isa { Scalar, Avx2 };

struct TableF32 {
  void (*add)(const float* a, const float* b, float* y, std::size_t n);
  void (*sub)(const float* a, const float* b, float* y, std::size_t n);
  void (*mul)(const float* a, const float* b, float* y, std::size_t n);
  // y += a * x
  void (*axpy)(float a, const float* x, float* y, std::size_t n);
  // y = a * x
  void (*scale)(float a, const float* x, float* y, std::size_t n);
  // y = x + a
  void (*add_scalar)(float a, const float* x, float* y, std::size_t n);
  void (*relu)(const float* x, float* y, std::size_t n);
  // gx += gy where x > 0
  void (*relu_backward)(const float* x, const float* gy, float* gx,
                        std::size_t n);
  void (*sigmoid)(const float* x, float* y, std::size_t n);
  void (*clamp01)(const float* x, float* y, std::size_t n);
  // gx += gy where 0 < x < 1
  void (*clamp01_backward)(const float* x, const float* gy, float* gx,
                           std::size_t n);
  float (*sum)(const float* x, std::size_t n);
  float (*dot)(const float* a, const float* b, std::size_t n);
  // Row-major C[M,N] (+)= A[M,K] * B[K,N]
  void (*gemm)(const float* a, const float* b, float* c, std::size_t m,
               std::size_t k, std::size_t n, bool accumulate);
  // Row-major C[M,N] (+)= A[M,K] * B[N,K]^T
  void (*gemm_nt)(const float* a, const float* b, float* c, std::size_t m,
                  std::size_t k, std::size_t n, bool accumulate);
  // Row-major C[M,N] (+)= A[K,M]^T * B[K,N]
  void (*gemm_tn)(const float* a, const float* b, float* c, std::size_t m,
                  std::size_t k, std::size_t n, bool accumulate);
};

// Active table per the runtime selection.
const TableF32& f32();
// Forced variants for equivalence tests.
const TableF32& f32_scalar();
const TableF32* f32_avx2();  // nullptr when unavailable
Isa active_isa();
bool cpu_has_avx2();

inline const char* isa_name(Isa isa) {
  return isa == Isa::Avx2 ? "avx2" : "scalar";
}

// Scalar f64 kernels, inline; shape-compatible with the f32 table so the
// templated tensor ops can call either through Kern<T>.
namespace detail {
double sigmoid_accurate(double x);
}

template <class T>
struct Kern;

template <>
struct Kern<float> {
  static void add(const float* a, const float* b, float* y, std::size_t n) { f32().add(a, b, y, n); }
  static void sub(const float* a, const float* b, float* y, std::size_t n) { f32().sub(a, b, y, n); }
  static void mul(const float* a, const float* b, float* y, std::size_t n) { f32().mul(a, b, y, n); }
  static void axpy(float s, const float* x, float* y, std::size_t n) { f32().axpy(s, x, y, n); }
  static void scale(float s, const float* x, float* y, std::size_t n) { f32().scale(s, x, y, n); }
  static void add_scalar(float s, const float* x, float* y, std::size_t n) { f32().add_scalar(s, x, y, n); }
  static void relu(const float* x, float* y, std::size_t n) { f32().relu(x, y, n); }
  static void relu_backward(const float* x, const float* gy, float* gx, std::size_t n) { f32().relu_backward(x, gy, gx, n); }
  static void sigmoid(const float* x, float* y, std::size_t n) { f32().sigmoid(x, y, n); }
  static void clamp01(const float* x, float* y, std::size_t n) { f32().clamp01(x, y, n); }
  static void clamp01_backward(const float* x, const float* gy, float* gx, std::size_t n) { f32().clamp01_backward(x, gy, gx, n); }
  static float sum(const float* x, std::size_t n) { return f32().sum(x, n); }
  static float dot(const float* a, const float* b, std::size_t n) { return f32().dot(a, b, n); }
  static void gemm(const float* a, const float* b, float* c, std::size_t m, std::size_t k, std::size_t n, bool acc) { f32().gemm(a, b, c, m, k, n, acc); }
  static void gemm_nt(const float* a, const float* b, float* c, std::size_t m, std::size_t k, std::size_t n, bool acc) { f32().gemm_nt(a, b, c, m, k, n, acc); }
  static void gemm_tn(const float* a, const float* b, float* c, std::size_t m, std::size_t k, std::size_t n, bool acc) { f32().gemm_tn(a, b, c, m, k, n, acc); }
};

template <>
struct Kern<double> {
  static void add(const double* a, const double* b, double* y, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) y[i] = a[i] + b[i];
  }
  static void sub(const double* a, const double* b, double* y, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) y[i] = a[i] - b[i];
  }
  static void mul(const double* a, const double* b, double* y, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) y[i] = a[i] * b[i];
  }
  static void axpy(double s, const double* x, double* y, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) y[i] += s * x[i];
  }
  static void scale(double s, const double* x, double* y, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) y[i] = s * x[i];
  }
  static void add_scalar(double s, const double* x, double* y, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) y[i] = x[i] + s;
  }
  static void relu(const double* x, double* y, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) y[i] = x[i] > 0.0 ? x[i] : 0.0;
  }
  static void relu_backward(const double* x, const double* gy, double* gx,
                            std::size_t n) {
    for (std::size_t i = 0; i < n; ++i)
      if (x[i] > 0.0) gx[i] += gy[i];
  }
  static void sigmoid(const double* x, double* y, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i) y[i] = detail::sigmoid_accurate(x[i]);
  }
  static void clamp01(const double* x, double* y, std::size_t n) {
    for (std::size_t i = 0; i < n; ++i)
      y[i] = x[i] < 0.0 ? 0.0 : (x[i] > 1.0 ? 1.0 : x[i]);
  }
  static void clamp01_backward(const double* x, const double* gy, double* gx,
                               std::size_t n) {
    for (std::size_t i = 0; i < n; ++i)
      if (x[i] > 0.0 && x[i] < 1.0) gx[i] += gy[i];
  }
  static double sum(const double* x, std::size_t n) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += x[i];
    return acc;
  }
  static double dot(const double* a, const double* b, std::size_t n) {
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) acc += a[i] * b[i];
    return acc;
  }
  static void gemm(const double* a, const double* b, double* c, std::size_t m,
                   std::size_t k, std::size_t n, bool acc) {
    for (std::size_t i = 0; i < m; ++i) {
      double* crow = c + i * n;
      if (!acc)
        for (std::size_t j = 0; j < n; ++j) crow[j] = 0.0;
      for (std::size_t kk = 0; kk < k; ++kk) {
        const double av = a[i * k + kk];
        const double* brow = b + kk * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
    }
  }
  static void gemm_nt(const double* a, const double* b, double* c,
                      std::size_t m, std::size_t k, std::size_t n, bool acc) {
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) {
        double s = acc ? c[i * n + j] : 0.0;
        for (std::size_t kk = 0; kk < k; ++kk)
          s += a[i * k + kk] * b[j * k + kk];
        c[i * n + j] = s;
      }
  }
  static void gemm_tn(const double* a, const double* b, double* c,
                      std::size_t m, std::size_t k, std::size_t n, bool acc) {
    if (!acc)
      for (std::size_t i = 0; i < m * n; ++i) c[i] = 0.0;
    for (std::size_t kk = 0; kk < k; ++kk)
      for (std::size_t i = 0; i < m; ++i) {
        const double av = a[kk * m + i];
        const double* brow = b + kk * n;
        double* crow = c + i * n;
        for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
      }
  }
};

// 3x3 same-padding patch extraction shared by the conv implementations.
// cols has shape [C*9, H*W] row-major; scalar: memory bound either way.
template <class T>
void im2col3x3(const T* img, std::size_t c, std::size_t h, std::size_t w,
               T* cols) {
  const std::size_t hw = h * w;
  std::size_t row = 0;
  for (std::size_t ch = 0; ch < c; ++ch) {
    const T* plane = img + ch * hw;
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx, ++row) {
        T* out = cols + row * hw;
        for (std::size_t y = 0; y < h; ++y) {
          const long sy = static_cast<long>(y) + dy;
          if (sy < 0 || sy >= static_cast<long>(h)) {
            for (std::size_t x = 0; x < w; ++x) out[y * w + x] = T(0);
            continue;
          }
          const T* src = plane + static_cast<std::size_t>(sy) * w;
          for (std::size_t x = 0; x < w; ++x) {
            const long sx = static_cast<long>(x) + dx;
            out[y * w + x] =
                (sx < 0 || sx >= static_cast<long>(w)) ? T(0) : src[sx];
          }
        }
      }
  }
}

// Scatter-add the column gradient back onto the image gradient.
template <class T>
void col2im3x3(const T* cols, std::size_t c, std::size_t h, std::size_t w,
               T* img_grad) {
  const std::size_t hw = h * w;
  std::size_t row = 0;
  for (std::size_t ch = 0; ch < c; ++ch) {
    T* plane = img_grad + ch * hw;
    for (int dy = -1; dy <= 1; ++dy)
      for (int dx = -1; dx <= 1; ++dx, ++row) {
        const T* src = cols + row * hw;
        for (std::size_t y = 0; y < h; ++y) {
          const long sy = static_cast<long>(y) + dy;
          if (sy < 0 || sy >= static_cast<long>(h)) continue;
          T* dst = plane + static_cast<std::size_t>(sy) * w;
          for (std::size_t x = 0; x < w; ++x) {
            const long sx = static_cast<long>(x) + dx;
            if (sx >= 0 && sx < static_cast<long>(w))
              dst[sx] += src[y * w + x];
          }
        }
      }
  }
}

}  // namespace prodet::kernels
