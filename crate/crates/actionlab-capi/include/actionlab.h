#ifndef ACTIONLAB_H
#define ACTIONLAB_H

/* Generated from the Rust sources; do not edit by hand. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/**
 * Status code returned by every fallible entry point. Zero is success;
 * anything else stores a thread-local message.
 */
typedef enum ActionlabStatus {
  ACTIONLAB_STATUS_OK = 0,
  ACTIONLAB_STATUS_NULL_POINTER = 1,
  ACTIONLAB_STATUS_INVALID_ARGUMENT = 2,
  ACTIONLAB_STATUS_INVALID_JSON = 3,
  ACTIONLAB_STATUS_ENVIRONMENT = 4,
  ACTIONLAB_STATUS_KINETICS = 5,
  ACTIONLAB_STATUS_SOLVER = 6,
  ACTIONLAB_STATUS_PANICKED = 7,
} ActionlabStatus;

/**
 * Opaque potential handle: a sampled Poisson cloud or a constant field.
 */
typedef struct ActionlabCloud ActionlabCloud;

/**
 * Opaque kinetic cost handle.
 */
typedef struct ActionlabKinetics ActionlabKinetics;

/**
 * Opaque handle over a solved dynamic-programming table.
 */
typedef struct ActionlabStack ActionlabStack;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Crate version as a static NUL-terminated string. Never freed.
 */
const char *actionlab_version(void);

/**
 * Version stamp shared with every serialized artifact of the core library.
 */
uint32_t actionlab_format_version(void);

/**
 * Message for the most recent failure on the calling thread, or null if no
 * call has failed yet. The pointer stays valid until the next failure on
 * the same thread; do not free it.
 */
const char *actionlab_last_error_message(void);

/**
 * Release a string returned by an `actionlab_*` call with a `*mut char`
 * out-parameter. Null is accepted and ignored.
 */
void actionlab_string_free(char *text);

/**
 * JSON form of the reference environment in the given dimension: unit
 * intensity, unit radius caps, signed unit amplitudes. Returns null and
 * records a message if the dimension is zero. Free with
 * `actionlab_string_free`.
 */
char *actionlab_standard_spec_json(size_t dimension);

/**
 * Sample a Poisson cloud inside the box `[t_lo, t_hi] x prod [x_lo, x_hi]`.
 * `spec_json` is an environment spec as produced by
 * `actionlab_standard_spec_json`; `x_lo` and `x_hi` point at arrays whose
 * length equals the spec dimension. The same seed over the same window
 * reproduces the same cloud.
 */
enum ActionlabStatus actionlab_cloud_sample(const char *spec_json,
                                            double t_lo,
                                            double t_hi,
                                            const double *x_lo,
                                            const double *x_hi,
                                            uint64_t seed,
                                            struct ActionlabCloud **out);

/**
 * Wrap the constant field `F == value`, the deterministic hook used to
 * cross-check solver output against closed forms.
 */
enum ActionlabStatus actionlab_cloud_uniform(size_t dimension,
                                             double value,
                                             struct ActionlabCloud **out);

/**
 * Rebuild a cloud from the JSON produced by `actionlab_cloud_to_json`.
 */
enum ActionlabStatus actionlab_cloud_from_json(const char *json, struct ActionlabCloud **out);

/**
 * Serialize a sampled cloud, spec and seed and window included. Constant
 * fields have no serialized form and report `InvalidArgument`. Free the
 * string with `actionlab_string_free`.
 */
enum ActionlabStatus actionlab_cloud_to_json(const struct ActionlabCloud *cloud, char **out);

/**
 * Image of the potential under the shear `(t, x) -> (t, x + t v)`; `v`
 * points at an array of the cloud dimension. A constant field shears to
 * itself.
 */
enum ActionlabStatus actionlab_cloud_shear(const struct ActionlabCloud *cloud,
                                           const double *v,
                                           struct ActionlabCloud **out);

void actionlab_cloud_free(struct ActionlabCloud *cloud);

enum ActionlabStatus actionlab_cloud_dimension(const struct ActionlabCloud *cloud, size_t *out);

/**
 * Number of sampled bumps; zero for a constant field.
 */
enum ActionlabStatus actionlab_cloud_point_count(const struct ActionlabCloud *cloud, size_t *out);

/**
 * Content digest of the potential, stable across processes. Free the
 * string with `actionlab_string_free`.
 */
enum ActionlabStatus actionlab_cloud_content_hash(const struct ActionlabCloud *cloud, char **out);

/**
 * Evaluate the potential at `(t, x)`; `x` has the cloud dimension.
 */
enum ActionlabStatus actionlab_cloud_eval_f(const struct ActionlabCloud *cloud,
                                            double t,
                                            const double *x,
                                            double *out);

/**
 * Evaluate the potential seen from the frame moving at `v`: each bump is
 * read at `x + (t - t_i) v - x_i`. `v` and `x` both have the cloud
 * dimension.
 */
enum ActionlabStatus actionlab_cloud_eval_f_sheared(const struct ActionlabCloud *cloud,
                                                    const double *v,
                                                    double t,
                                                    const double *x,
                                                    double *out);

/**
 * Velocity derivative of the sheared potential at rest, written into
 * `out_vec` (length = cloud dimension).
 */
enum ActionlabStatus actionlab_cloud_eval_theta(const struct ActionlabCloud *cloud,
                                                double t,
                                                const double *x,
                                                double *out_vec);

/**
 * Velocity derivative of the sheared potential at velocity `v`, written
 * into `out_vec` (length = cloud dimension).
 */
enum ActionlabStatus actionlab_cloud_eval_theta_sheared(const struct ActionlabCloud *cloud,
                                                        const double *v,
                                                        double t,
                                                        const double *x,
                                                        double *out_vec);

/**
 * Quadratic kinetic cost `scale * |v|^2 / 2`.
 */
enum ActionlabStatus actionlab_kinetics_quadratic(double scale, struct ActionlabKinetics **out);

/**
 * Radial polynomial cost `sum_k coeffs[k] * |v|^k`. The linear coefficient
 * must vanish and the top coefficient must be positive; validation failures
 * come back as `Kinetics` status.
 */
enum ActionlabStatus actionlab_kinetics_polynomial(const double *coeffs,
                                                   size_t count,
                                                   struct ActionlabKinetics **out);

void actionlab_kinetics_free(struct ActionlabKinetics *kinetics);

enum ActionlabStatus actionlab_kinetics_eval(const struct ActionlabKinetics *kinetics,
                                             const double *v,
                                             size_t dimension,
                                             double *out);

/**
 * Gradient of the kinetic cost, written into `out_vec` (length =
 * `dimension`).
 */
enum ActionlabStatus actionlab_kinetics_grad(const struct ActionlabKinetics *kinetics,
                                             const double *v,
                                             size_t dimension,
                                             double *out_vec);

/**
 * Convex conjugate `sup_v (p . v - L(v))` at momentum `p`.
 */
enum ActionlabStatus actionlab_kinetics_legendre(const struct ActionlabKinetics *kinetics,
                                                 const double *p,
                                                 size_t dimension,
                                                 double *out);

/**
 * Solve the directed problem from the origin over `steps` slices of length
 * `dt`, spatial pitch `dx`, per-step node window `velocity_window`, and
 * spatial extent `half_extent_nodes` per side (pass 0 for the full
 * reachable cone). `velocity` is null for the rest frame or points at an
 * array of the cloud dimension; `alpha` scales the potential and `beta`
 * the kinetic cost. The stack owns a copy of nothing; cloud and kinetics
 * stay caller-owned and may be freed after this returns.
 */
enum ActionlabStatus actionlab_solve(const struct ActionlabCloud *cloud,
                                     const struct ActionlabKinetics *kinetics,
                                     double dt,
                                     double dx,
                                     size_t steps,
                                     size_t velocity_window,
                                     size_t half_extent_nodes,
                                     const double *velocity,
                                     double alpha,
                                     double beta,
                                     struct ActionlabStack **out);

void actionlab_stack_free(struct ActionlabStack *stack);

enum ActionlabStatus actionlab_stack_steps(const struct ActionlabStack *stack, size_t *out);

enum ActionlabStatus actionlab_stack_dimension(const struct ActionlabStack *stack, size_t *out);

/**
 * Accumulated action at a lattice cell. `node` points at an array of the
 * grid dimension; unreachable cells report a `Solver` failure.
 */
enum ActionlabStatus actionlab_stack_value_at(const struct ActionlabStack *stack,
                                              size_t slice,
                                              const int64_t *node,
                                              double *out);

/**
 * Point-to-point action from the origin to the lattice node nearest `x`
 * at the final slice.
 */
enum ActionlabStatus actionlab_stack_point_to_point_action(const struct ActionlabStack *stack,
                                                           const double *x,
                                                           double *out);

/**
 * Minimizing lattice path to the node nearest `x`, flattened slice-major
 * into `out_nodes` as `(steps + 1) * dimension` coordinates. `out_len`
 * always receives the required length; the copy happens only when
 * `capacity` suffices, so a null `out_nodes` with zero capacity queries
 * the size.
 */
enum ActionlabStatus actionlab_stack_minimizer(const struct ActionlabStack *stack,
                                               const double *x,
                                               int64_t *out_nodes,
                                               size_t capacity,
                                               size_t *out_len);

/**
 * Monte Carlo estimate of the normalized loop action for one frame:
 * `replicates` independent environments derived from `base_seed`, solved
 * on the given grid, averaged per unit time. `velocity` follows the same
 * convention as `actionlab_solve`. Writes the mean and its standard error.
 */
enum ActionlabStatus actionlab_shape_estimate(const char *spec_json,
                                              const struct ActionlabKinetics *kinetics,
                                              double dt,
                                              double dx,
                                              size_t steps,
                                              size_t velocity_window,
                                              size_t half_extent_nodes,
                                              const double *velocity,
                                              double alpha,
                                              double beta,
                                              size_t replicates,
                                              uint64_t base_seed,
                                              double *out_mean,
                                              double *out_std_error);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ACTIONLAB_H */
