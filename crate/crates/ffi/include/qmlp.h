#ifndef QMLP_H
#define QMLP_H

#include <stddef.h>
#include <stdint.h>

typedef enum QmlpStatus {
  QMLP_STATUS_OK = 0,
  QMLP_STATUS_NULL_POINTER = 1,
  QMLP_STATUS_INVALID_ARGUMENT = 2,
  QMLP_STATUS_DIMENSION = 3,
  QMLP_STATUS_NUMERIC = 4,
  QMLP_STATUS_FORMAT = 5,
  QMLP_STATUS_IO = 6,
  QMLP_STATUS_CONFIG = 7,
  QMLP_STATUS_PANIC = 8,
} QmlpStatus;

typedef enum QmlpScheme {
  QMLP_SCHEME_SYMMETRIC = 0,
  QMLP_SCHEME_ASYMMETRIC = 1,
} QmlpScheme;

typedef enum QmlpObserverKind {
  QMLP_OBSERVER_KIND_MIN_MAX = 0,
  // `param` is the momentum.
  QMLP_OBSERVER_KIND_EMA = 1,
  // `param` is the percentile `p`.
  QMLP_OBSERVER_KIND_PERCENTILE = 2,
} QmlpObserverKind;

// Mixer-family model with its parameters.
typedef struct QmlpModel QmlpModel;

// Streaming range observer.
typedef struct QmlpObserver QmlpObserver;

// Per-tensor quantizer parameters.
typedef struct QmlpQParams {
  double scale;
  int64_t zero_point;
  uint8_t bits;
  enum QmlpScheme scheme;
} QmlpQParams;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null when the last
// call succeeded. Valid until the next call on the same thread.
const char *qmlp_last_error(void);

// Library version as a static NUL-terminated string.
const char *qmlp_version(void);

// Scale and zero point for the range `[r_min, r_max]`.
enum QmlpStatus qmlp_compute_qparams(double r_min,
                                     double r_max,
                                     uint8_t bits,
                                     enum QmlpScheme scheme_kind,
                                     struct QmlpQParams *out);

// `q = clamp(round(x / S) + Z0)` for `n` values.
enum QmlpStatus qmlp_quantize(const struct QmlpQParams *qp,
                              const double *x,
                              size_t n,
                              int32_t *out);

// `r = S·(q − Z0)` for `n` values.
enum QmlpStatus qmlp_dequantize(const struct QmlpQParams *qp,
                                const int32_t *q,
                                size_t n,
                                double *out);

// Quantize then dequantize `n` values.
enum QmlpStatus qmlp_fake_quant(const struct QmlpQParams *qp,
                                const double *x,
                                size_t n,
                                double *out);

// Creates an observer. `param` is ignored for min/max.
enum QmlpStatus qmlp_observer_new(enum QmlpObserverKind kind,
                                  double param,
                                  struct QmlpObserver **out);

// Feeds one batch of `n` values.
enum QmlpStatus qmlp_observer_observe(struct QmlpObserver *obs, const double *x, size_t n);

enum QmlpStatus qmlp_observer_range(const struct QmlpObserver *obs, double *r_min, double *r_max);

// Releases an observer. Null is ignored.
void qmlp_observer_free(struct QmlpObserver *obs);

// Builds a freshly initialized model from config text (only the
// `[model]` section matters).
enum QmlpStatus qmlp_model_new(const char *config, uint64_t seed, struct QmlpModel **out);

// Replaces parameters with those of a checkpoint file.
enum QmlpStatus qmlp_model_load(struct QmlpModel *model, const char *path);

enum QmlpStatus qmlp_model_save(const struct QmlpModel *model, const char *path);

enum QmlpStatus qmlp_model_param_count(const struct QmlpModel *model, uint64_t *out);

// Floating-point operations of one forward pass over one image.
enum QmlpStatus qmlp_model_flops(const struct QmlpModel *model, uint64_t *out);

// Values per input image (`C_in·H·W`) and number of classes.
enum QmlpStatus qmlp_model_shape(const struct QmlpModel *model, size_t *input_len, size_t *classes);

// Float inference. `images` holds `batch` images, row-major
// `[batch, C_in, H, W]`; `logits` receives `batch × classes` values and
// `logits_len` must equal that product.
enum QmlpStatus qmlp_model_predict(const struct QmlpModel *model,
                                   const double *images,
                                   size_t batch,
                                   double *logits,
                                   size_t logits_len);

// Releases a model. Null is ignored.
void qmlp_model_free(struct QmlpModel *model);

// `flops_g · weight_bits · act_bits`, in G.
double qmlp_bops(double flops_g, uint8_t weight_bits, uint8_t act_bits);

// `params · weight_bits / 8e6`, in MB.
double qmlp_model_size_mb(uint64_t params, uint8_t weight_bits);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* QMLP_H */
