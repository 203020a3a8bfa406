/* Portable stand-in for the Neon intrinsics used by the builtin target
 * libraries. Only used to run harnesses on hosts without Neon; the
 * semantics follow the instruction bodies (fused multiply-add per lane,
 * f16 rounding on every register write). */
#ifndef UKF_NEON_EMUL_H
#define UKF_NEON_EMUL_H

#include <math.h>
#include <string.h>

typedef float float32_t;
typedef float float32x4_t __attribute__((vector_size(16)));

static inline float32x4_t vld1q_f32(const float32_t *p) {
    float32x4_t r;
    memcpy(&r, p, sizeof r);
    return r;
}

static inline void vst1q_f32(float32_t *p, float32x4_t v) { memcpy(p, &v, sizeof v); }

static inline float32x4_t vld1q_dup_f32(const float32_t *p) {
    float32x4_t r = {p[0], p[0], p[0], p[0]};
    return r;
}

static inline float32x4_t vmovq_n_f32(float32_t x) {
    float32x4_t r = {x, x, x, x};
    return r;
}

static inline float32x4_t vfmaq_f32(float32x4_t acc, float32x4_t a, float32x4_t b) {
    float32x4_t r;
    for (int l = 0; l < 4; l++) r[l] = fmaf(a[l], b[l], acc[l]);
    return r;
}

static inline float32x4_t vfmaq_laneq_f32(float32x4_t acc, float32x4_t a, float32x4_t b, int lane) {
    float32x4_t r;
    for (int l = 0; l < 4; l++) r[l] = fmaf(a[l], b[lane], acc[l]);
    return r;
}

#if defined(__clang__)
/* f16 lanes are held as floats that are always f16-representable. */
typedef __fp16 float16_t; /* storage only: cannot be a by-value parameter */
/* by-value f16 kernel arguments; arithmetic on __fp16 promotes to float anyway */
#define UKF_F16_ARG float
typedef float float16x8_t __attribute__((vector_size(32)));

static inline float ukf_round16(float x) { return (float)(__fp16)x; }

static inline float16x8_t vld1q_f16(const float16_t *p) {
    float16x8_t r;
    for (int l = 0; l < 8; l++) r[l] = (float)p[l];
    return r;
}

static inline void vst1q_f16(float16_t *p, float16x8_t v) {
    for (int l = 0; l < 8; l++) p[l] = (float16_t)v[l];
}

static inline float16x8_t vld1q_dup_f16(const float16_t *p) {
    float16x8_t r;
    for (int l = 0; l < 8; l++) r[l] = (float)p[0];
    return r;
}

static inline float16x8_t vmovq_n_f16(float x) {
    float16x8_t r;
    for (int l = 0; l < 8; l++) r[l] = (float)x;
    return r;
}

static inline float16x8_t vfmaq_f16(float16x8_t acc, float16x8_t a, float16x8_t b) {
    float16x8_t r;
    for (int l = 0; l < 8; l++) r[l] = ukf_round16(fmaf(a[l], b[l], acc[l]));
    return r;
}

static inline float16x8_t vfmaq_laneq_f16(float16x8_t acc, float16x8_t a, float16x8_t b, int lane) {
    float16x8_t r;
    for (int l = 0; l < 8; l++) r[l] = ukf_round16(fmaf(a[l], b[lane], acc[l]));
    return r;
}
#endif

#endif
