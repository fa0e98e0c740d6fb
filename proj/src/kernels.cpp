// Runtime kernel selection: AVX2 when the CPU and build support it,
// overridable with PRODET_KERNELS=scalar|avx2|auto.

#include <cstdio>
#include <cstdlib>
#include <cstring>

#include "prodet/kernels.hpp"

namespace prodet::kernels {

#ifndef PRODET_HAVE_AVX2
const TableF32* f32_avx2() { return nullptr; }
#endif

bool cpu_has_avx2() {
#if defined(__x86_64__) || defined(__i386__)
  return __builtin_cpu_supports("avx2") && __builtin_cpu_supports("fma");
#else
  return false;
#endif
}

namespace {

struct Selection {
  const TableF32* table;
  Isa isa;
};

Selection select() {
  const char* env = std::getenv("PRODET_KERNELS");
  const bool avx2_ok = cpu_has_avx2() && f32_avx2() != nullptr;
  if (env != nullptr && std::strcmp(env, "scalar") == 0)
    return {&f32_scalar(), Isa::Scalar};
  if (env != nullptr && std::strcmp(env, "avx2") == 0) {
    if (avx2_ok) return {f32_avx2(), Isa::Avx2};
    std::fprintf(stderr,
                 "prodet: PRODET_KERNELS=avx2 requested but unavailable; "
                 "using scalar kernels\n");
    return {&f32_scalar(), Isa::Scalar};
  }
  if (env != nullptr && std::strcmp(env, "auto") != 0 && *env != '\0')
    std::fprintf(stderr, "prodet: unknown PRODET_KERNELS value '%s'; using auto\n",
                 env);
  if (avx2_ok) return {f32_avx2(), Isa::Avx2};
  return {&f32_scalar(), Isa::Scalar};
}

const Selection& selection() {
  static const Selection s = select();
  return s;
}

}  // namespace

const TableF32& f32() { return *selection().table; }
Isa active_isa() { return selection().isa; }

}  // namespace prodet::kernels
