#ifndef PATCH_EP_H
#define PATCH_EP_H

#include <stddef.h>
#include <stdint.h>

/*
 Result code of every fallible call.
 */
typedef enum PepStatus {
  PEP_STATUS_OK = 0,
  PEP_STATUS_NULL_POINTER = 1,
  PEP_STATUS_INVALID_ARGUMENT = 2,
  PEP_STATUS_IO = 3,
  /*
   A matrix that must be positive definite was not.
   */
  PEP_STATUS_NUMERICAL = 4,
  /*
   A bug or a caught panic.
   */
  PEP_STATUS_INTERNAL = 5,
} PepStatus;

/*
 Observation noise for [`pep_restore`].
 */
typedef enum PepNoise {
  /*
   Additive Gaussian noise; `variance` must be positive.
   */
  PEP_NOISE_GAUSSIAN = 0,
  /*
   Poisson counts; `variance` is ignored.
   */
  PEP_NOISE_POISSON = 1,
} PepNoise;

/*
 Pipeline configuration kept as JSON so dotted overrides can be applied.
 */
typedef struct PepConfig PepConfig;

/*
 Trained patch mixture.
 */
typedef struct PepGmm PepGmm;

/*
 Degradation operator on a fixed image size.
 */
typedef struct PepOperator PepOperator;

/*
 Output of a restoration run.
 */
typedef struct PepResult PepResult;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Library version as a static nul-terminated string.
 */
const char *pep_version(void);

/*
 Message of the last failed call on this thread, or null after a success.

 The pointer stays valid until the next call into the library on the same thread.
 */
const char *pep_last_error(void);

/*
 Releases a string returned by this library.

 # Safety
 `s` must be null or a string obtained from this library that was not freed yet.
 */
void pep_string_free(char *s);

/*
 Loads a mixture written by `patch-ep train-gmm`.

 # Safety
 `path` must be a nul-terminated string and `out` a valid pointer.
 */
enum PepStatus pep_gmm_load(const char *path, struct PepGmm **out);

/*
 Number of mixture components, or 0 for null.

 # Safety
 `gmm` must be null or a live handle.
 */
uintptr_t pep_gmm_components(const struct PepGmm *gmm);

/*
 Patch dimension (side squared), or 0 for null.

 # Safety
 `gmm` must be null or a live handle.
 */
uintptr_t pep_gmm_dim(const struct PepGmm *gmm);

/*
 # Safety
 `gmm` must be null or a handle that was not freed yet.
 */
void pep_gmm_free(struct PepGmm *gmm);

/*
 Default configuration.

 # Safety
 `out` must be a valid pointer.
 */
enum PepStatus pep_config_new(struct PepConfig **out);

/*
 Configuration from a JSON object; missing keys take their defaults.

 # Safety
 `json` must be a nul-terminated string and `out` a valid pointer.
 */
enum PepStatus pep_config_from_json(const char *json, struct PepConfig **out);

/*
 Applies a dotted `key=value` override such as `ep.damping=0.5`.

 The configuration is unchanged when the result would be invalid.

 # Safety
 `config` must be a live handle and `assignment` a nul-terminated string.
 */
enum PepStatus pep_config_set(struct PepConfig *config, const char *assignment);

/*
 Effective configuration as JSON; release with [`pep_string_free`]. Null on failure.

 # Safety
 `config` must be null or a live handle.
 */
char *pep_config_to_json(const struct PepConfig *config);

/*
 # Safety
 `config` must be null or a handle that was not freed yet.
 */
void pep_config_free(struct PepConfig *config);

/*
 Identity operator (denoising).

 # Safety
 `out` must be a valid pointer.
 */
enum PepStatus pep_operator_identity(uintptr_t width, uintptr_t height, struct PepOperator **out);

/*
 Pixel mask (inpainting); nonzero entries of `kept` are observed. `kept` holds `width·height` bytes.

 # Safety
 `kept` must point to `width·height` readable bytes and `out` be a valid pointer.
 */
enum PepStatus pep_operator_mask(uintptr_t width,
                                 uintptr_t height,
                                 const uint8_t *kept,
                                 struct PepOperator **out);

/*
 Periodic convolution with a row-major `size × size` kernel (blur, deconvolution).

 # Safety
 `kernel` must point to `size·size` readable values and `out` be a valid pointer.
 */
enum PepStatus pep_operator_convolution(uintptr_t width,
                                        uintptr_t height,
                                        const double *kernel,
                                        uintptr_t size,
                                        struct PepOperator **out);

/*
 Writes `H x` into `out`; both buffers hold `len` values, which must equal the pixel count.

 # Safety
 `op` must be a live handle and `x`, `out` point to `len` values each.
 */
enum PepStatus pep_operator_apply(const struct PepOperator *op,
                                  const double *x,
                                  double *out,
                                  uintptr_t len);

/*
 # Safety
 `op` must be null or a handle that was not freed yet.
 */
void pep_operator_free(struct PepOperator *op);

/*
 Restores `y` (`len` pixels, row-major) and returns the fused posterior and report.

 # Safety
 Handles must be live, `y` must point to `len` values and `out` be a valid pointer.
 */
enum PepStatus pep_restore(const struct PepGmm *gmm,
                           const struct PepConfig *config,
                           const struct PepOperator *op,
                           enum PepNoise noise,
                           double variance,
                           const double *y,
                           uintptr_t len,
                           struct PepResult **out);

/*
 Number of pixels in the result, or 0 for null.

 # Safety
 `result` must be null or a live handle.
 */
uintptr_t pep_result_len(const struct PepResult *result);

/*
 Number of fused experts, or 0 for null.

 # Safety
 `result` must be null or a live handle.
 */
uintptr_t pep_result_experts(const struct PepResult *result);

/*
 Copies the posterior mean into `out`, which holds exactly [`pep_result_len`] values.

 # Safety
 `result` must be a live handle and `out` point to `len` writable values.
 */
enum PepStatus pep_result_mean(const struct PepResult *result, double *out, uintptr_t len);

/*
 Copies the marginal posterior variances into `out`, which holds exactly [`pep_result_len`] values.

 # Safety
 `result` must be a live handle and `out` point to `len` writable values.
 */
enum PepStatus pep_result_variance(const struct PepResult *result, double *out, uintptr_t len);

/*
 Run report as JSON, owned by `result`; null for a null handle.

 # Safety
 `result` must be null or a live handle. The string is valid until the result is freed.
 */
const char *pep_result_report(const struct PepResult *result);

/*
 # Safety
 `result` must be null or a handle that was not freed yet.
 */
void pep_result_free(struct PepResult *result);

/*
 Peak signal-to-noise ratio in dB with the reference's maximum as peak; infinite for identical inputs.

 # Safety
 `reference` and `estimate` must point to `len` values and `out` be a valid pointer.
 */
enum PepStatus pep_psnr(const double *reference,
                        const double *estimate,
                        uintptr_t len,
                        double *out);

/*
 Fraction of pixels whose reference lies in the central `level` interval of `N(mean, variance)`.

 # Safety
 The three arrays must hold `len` values and `out` be a valid pointer.
 */
enum PepStatus pep_coverage(const double *reference,
                            const double *mean,
                            const double *variance,
                            uintptr_t len,
                            double level,
                            double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PATCH_EP_H */
