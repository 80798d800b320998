#ifndef ELASTOREG_H
#define ELASTOREG_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stddef.h>
#include <stdint.h>

/**
 * Result code of every fallible call.
 */
typedef enum ErStatus {
  ER_STATUS_OK = 0,
  ER_STATUS_NULL_POINTER = 1,
  ER_STATUS_INVALID_ARGUMENT = 2,
  ER_STATUS_SINGULAR_ELEMENT = 3,
  ER_STATUS_UNDER_CONSTRAINED = 4,
  ER_STATUS_SOLVER_FAILURE = 5,
  ER_STATUS_REGULARIZATION_TOO_WEAK = 6,
  ER_STATUS_DIVERGENCE = 7,
  ER_STATUS_UNDEFINED_METRIC = 8,
  ER_STATUS_INCOMPATIBLE = 9,
  ER_STATUS_NOT_FOUND = 10,
  ER_STATUS_FORMAT = 11,
  ER_STATUS_CONFIG = 12,
  ER_STATUS_IO = 13,
  /**
   * A Rust panic was caught at the boundary.
   */
  ER_STATUS_INTERNAL = 14,
} ErStatus;

typedef enum ErGradientMode {
  ER_GRADIENT_MODE_FROZEN_REFERENCE = 0,
  ER_GRADIENT_MODE_WARPED = 1,
} ErGradientMode;

typedef enum ErRegularizer {
  ER_REGULARIZER_STRAIN = 0,
  ER_REGULARIZER_STRAIN_INCOMPRESSIBLE = 1,
  ER_REGULARIZER_MOMENTUM_PLANE_STRAIN = 2,
  ER_REGULARIZER_MOMENTUM_PLANE_STRESS = 3,
} ErRegularizer;

/**
 * Field component selector for error metrics. `Xy` is only meaningful for
 * strain and is rejected by displacement metrics.
 */
typedef enum ErComponent {
  ER_COMPONENT_X = 0,
  ER_COMPONENT_Y = 1,
  ER_COMPONENT_XY = 2,
  ER_COMPONENT_TOTAL = 3,
} ErComponent;

/**
 * Nodal displacement field.
 */
typedef struct ErField ErField;

/**
 * RF image on a regular pixel grid.
 */
typedef struct ErImage ErImage;

/**
 * Quadrilateral finite element mesh.
 */
typedef struct ErMesh ErMesh;

/**
 * Gauss-Newton settings for [`er_register_pair`].
 */
typedef struct ErSolverSettings {
  uint32_t max_iterations;
  double step_tolerance;
  enum ErGradientMode gradient_mode;
} ErSolverSettings;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *er_version(void);

/**
 * Copies the calling thread's last error message into `buf` (always
 * NUL-terminated when `len > 0`) and returns the full message length in
 * bytes, excluding the terminator. Pass a null `buf` to query the length.
 *
 * # Safety
 * `buf` must be null or valid for writes of `len` bytes.
 */
size_t er_last_error_message(char *buf, size_t len);

/**
 * Structured mesh of `nx x ny` elements over
 * `[x0, x0 + width] x [y0, y0 + height]`, with `width` along the axial axis.
 *
 * # Safety
 * `out` must be valid for a pointer write.
 */
enum ErStatus er_mesh_structured(double x0,
                                 double y0,
                                 double width,
                                 double height,
                                 size_t nx,
                                 size_t ny,
                                 struct ErMesh **out);

/**
 * General mesh from `n_nodes` interleaved coordinates and `n_elements`
 * counter-clockwise quadrilaterals of four node indices each.
 *
 * # Safety
 * `coords` must hold `2 * n_nodes` values, `connectivity` `4 * n_elements`
 * values, and `out` must be valid for a pointer write.
 */
enum ErStatus er_mesh_new(const double *coords,
                          size_t n_nodes,
                          const uint32_t *connectivity,
                          size_t n_elements,
                          struct ErMesh **out);

/**
 * # Safety
 * `mesh` must be null or a handle from this library not yet freed.
 */
void er_mesh_free(struct ErMesh *mesh);

/**
 * Number of nodes, or 0 for a null handle.
 *
 * # Safety
 * `mesh` must be null or a live handle.
 */
size_t er_mesh_node_count(const struct ErMesh *mesh);

/**
 * Number of elements, or 0 for a null handle.
 *
 * # Safety
 * `mesh` must be null or a live handle.
 */
size_t er_mesh_element_count(const struct ErMesh *mesh);

/**
 * Image from `n_axial * n_lateral` samples, sample `(i, j)` at index
 * `i * n_lateral + j`, with pixel spacings and the position of pixel `(0, 0)`.
 *
 * # Safety
 * `samples` must hold `n_axial * n_lateral` values and `out` must be valid
 * for a pointer write.
 */
enum ErStatus er_image_new(size_t n_axial,
                           size_t n_lateral,
                           double axial_spacing,
                           double lateral_spacing,
                           double origin_x,
                           double origin_y,
                           const double *samples,
                           struct ErImage **out);

/**
 * Loads an image written by the command line tool.
 *
 * # Safety
 * `path` must be a NUL-terminated string and `out` valid for a pointer write.
 */
enum ErStatus er_image_read(const char *path, struct ErImage **out);

/**
 * # Safety
 * `image` must be null or a live handle.
 */
void er_image_free(struct ErImage *image);

/**
 * Writes the pixel counts of `image`.
 *
 * # Safety
 * `image` must be a live handle; the out pointers must be valid for writes.
 */
enum ErStatus er_image_dims(const struct ErImage *image, size_t *n_axial, size_t *n_lateral);

/**
 * Zero displacement on `n_nodes` nodes.
 *
 * # Safety
 * `out` must be valid for a pointer write.
 */
enum ErStatus er_field_zeros(size_t n_nodes, struct ErField **out);

/**
 * Field from `len` interleaved values; `len` must be even.
 *
 * # Safety
 * `values` must hold `len` values and `out` must be valid for a pointer write.
 */
enum ErStatus er_field_new(const double *values, size_t len, struct ErField **out);

/**
 * # Safety
 * `field` must be null or a live handle.
 */
void er_field_free(struct ErField *field);

/**
 * Number of scalar values (twice the node count), or 0 for a null handle.
 *
 * # Safety
 * `field` must be null or a live handle.
 */
size_t er_field_len(const struct ErField *field);

/**
 * Copies the interleaved values into `buf`, which must hold exactly
 * `er_field_len(field)` values.
 *
 * # Safety
 * `field` must be a live handle and `buf` valid for `len` writes.
 */
enum ErStatus er_field_values(const struct ErField *field, double *buf, size_t len);

/**
 * Default solver settings.
 */
struct ErSolverSettings er_solver_settings_default(void);

/**
 * Registers `target` onto `reference` over `mesh`, starting from `init`,
 * with regularizer `kind` at weight `alpha`. On success `*out` receives a
 * new field and, when non-null, `*iterations` the number of Gauss-Newton
 * updates taken.
 *
 * # Safety
 * All handles must be live; `settings` may be null for defaults; `out` must
 * be valid for a pointer write; `iterations` may be null.
 */
enum ErStatus er_register_pair(const struct ErImage *reference,
                               const struct ErImage *target,
                               const struct ErMesh *mesh,
                               const struct ErField *init,
                               enum ErRegularizer kind,
                               double alpha,
                               const struct ErSolverSettings *settings,
                               struct ErField **out,
                               uint32_t *iterations);

/**
 * Relative L2 displacement error of `measured` against `truth`, in percent.
 *
 * # Safety
 * All handles must be live and `out` valid for a write.
 */
enum ErStatus er_disp_error(const struct ErMesh *mesh,
                            const struct ErField *truth,
                            const struct ErField *measured,
                            enum ErComponent component,
                            double *out);

/**
 * Relative strain error in percent, with both strain fields derived from
 * the given displacements.
 *
 * # Safety
 * All handles must be live and `out` valid for a write.
 */
enum ErStatus er_strain_error(const struct ErMesh *mesh,
                              const struct ErField *truth,
                              const struct ErField *measured,
                              enum ErComponent component,
                              double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* ELASTOREG_H */
