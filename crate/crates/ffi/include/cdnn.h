#ifndef CDNN_H
#define CDNN_H

/* Generated by cbindgen. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Weight phase shifter technology for the projected-system model.
typedef enum CdnnPhaseShifter {
  CDNN_PHASE_SHIFTER_THERMAL = 0,
  CDNN_PHASE_SHIFTER_UNDERCUT_THERMAL = 1,
  CDNN_PHASE_SHIFTER_MEMS = 2,
} CdnnPhaseShifter;

// How the output of a projected system is read.
typedef enum CdnnReadout {
  CDNN_READOUT_RECEIVERLESS = 0,
  CDNN_READOUT_INTERMEDIATE = 1,
} CdnnReadout;

// Result codes. Zero is success.
typedef enum CdnnStatus {
  CDNN_STATUS_OK = 0,
  // A required pointer argument was null.
  CDNN_STATUS_NULL_POINTER = 1,
  // Malformed request: bad sizes, layouts or enum values.
  CDNN_STATUS_INVALID_ARGUMENT = 2,
  // Unusable input data, for example a non-unitary matrix or bad JSON.
  CDNN_STATUS_DATA = 3,
  // A numerical procedure failed to converge.
  CDNN_STATUS_CONVERGENCE = 4,
  // The caller's buffer is too small; the error message states the required length.
  CDNN_STATUS_BUFFER_TOO_SMALL = 5,
  // Internal panic caught at the boundary.
  CDNN_STATUS_INTERNAL = 6,
} CdnnStatus;

// Programmed Clements mesh.
typedef struct CdnnMesh CdnnMesh;

// Trained network together with the hardware it was trained on.
typedef struct CdnnModel CdnnModel;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Copies the last error message of this thread into `buf` (NUL terminated,
// truncated to `len`). Returns the full message length including the NUL,
// or 0 when no error has been recorded.
//
// # Safety
// `buf` must be null or point to `len` writable bytes.
size_t cdnn_last_error(char *buf, size_t len);

// Library version as a static NUL-terminated string.
const char *cdnn_version(void);

// Decomposes the `n`×`n` unitary given as row-major real and imaginary
// parts into a mesh program.
//
// # Safety
// `re` and `im` must each point to `n*n` doubles; `out` must be writable.
enum CdnnStatus cdnn_mesh_decompose(size_t n,
                                    const double *re,
                                    const double *im,
                                    struct CdnnMesh **out);

// Mesh programmed to a Haar-random `n`×`n` unitary drawn from `seed`.
//
// # Safety
// `out` must be writable.
enum CdnnStatus cdnn_mesh_haar(size_t n, uint64_t seed, struct CdnnMesh **out);

// Mesh built from heater phases in canonical order (`θ1`, `θ2` per MZI,
// then the output phase screen).
//
// # Safety
// `phases` must point to `len` doubles; `out` must be writable.
enum CdnnStatus cdnn_mesh_from_phases(size_t n,
                                      const double *phases,
                                      size_t len,
                                      struct CdnnMesh **out);

// Releases a mesh. Null is ignored.
//
// # Safety
// `mesh` must come from a `cdnn_mesh_*` constructor and not be used again.
void cdnn_mesh_free(struct CdnnMesh *mesh);

// Number of modes, or 0 for a null handle.
//
// # Safety
// `mesh` must be null or a live handle.
size_t cdnn_mesh_size(const struct CdnnMesh *mesh);

// Number of heater phases, or 0 for a null handle.
//
// # Safety
// `mesh` must be null or a live handle.
size_t cdnn_mesh_num_phases(const struct CdnnMesh *mesh);

// Writes the heater phases in canonical order.
//
// # Safety
// `mesh` must be live; `buf` must point to `len` writable doubles.
enum CdnnStatus cdnn_mesh_phases(const struct CdnnMesh *mesh, double *buf, size_t len);

// Writes the ideal transfer matrix as row-major real and imaginary parts.
//
// # Safety
// `mesh` must be live; `re` and `im` must each hold `n*n` doubles.
enum CdnnStatus cdnn_mesh_unitary(const struct CdnnMesh *mesh, double *re, double *im);

// Fidelity between the mesh's ideal matrix and a target given row-major.
//
// # Safety
// `mesh` must be live; `re`, `im` must hold `n*n` doubles; `out` writable.
enum CdnnStatus cdnn_mesh_fidelity(const struct CdnnMesh *mesh,
                                   const double *re,
                                   const double *im,
                                   double *out);

// Loads a model saved by `cdnn train` from a NUL-terminated JSON string.
//
// # Safety
// `json` must be a valid C string; `out` must be writable.
enum CdnnStatus cdnn_model_from_json(const char *json, struct CdnnModel **out);

// Releases a model. Null is ignored.
//
// # Safety
// `model` must come from `cdnn_model_from_json` and not be used again.
void cdnn_model_free(struct CdnnModel *model);

// Network width (number of inputs and output classes), or 0 for null.
//
// # Safety
// `model` must be null or a live handle.
size_t cdnn_model_size(const struct CdnnModel *model);

// Normalized output powers for one input vector of `len` features.
//
// # Safety
// `model` must be live; `x` must hold `len` doubles and `probs` `len`
// writable doubles.
enum CdnnStatus cdnn_model_forward(const struct CdnnModel *model,
                                   const double *x,
                                   size_t len,
                                   double *probs);

// Class index with the largest output power.
//
// # Safety
// As for [`cdnn_model_forward`]; `class_out` must be writable.
enum CdnnStatus cdnn_model_predict(const struct CdnnModel *model,
                                   const double *x,
                                   size_t len,
                                   size_t *class_out);

// Multiply-accumulate count of an `modes`-wide, `layers`-deep network.
uint64_t cdnn_op_count(uint64_t modes, uint64_t layers);

// Streaming energy per operation (J) and throughput (ops/s) of a projected
// system at the high-speed clock.
//
// # Safety
// `energy_per_op` and `ops_per_second` must be writable.
enum CdnnStatus cdnn_perf_projected(uint32_t modes,
                                    uint32_t layers,
                                    enum CdnnPhaseShifter tech,
                                    enum CdnnReadout readout,
                                    bool include_weight_dacs,
                                    double *energy_per_op,
                                    double *ops_per_second);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CDNN_H */
