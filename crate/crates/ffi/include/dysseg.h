#ifndef DYSSEG_H
#define DYSSEG_H

#pragma once

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every fallible call.
typedef enum DysStatus {
  DYS_STATUS_OK = 0,
  DYS_STATUS_NULL_ARGUMENT = 1,
  DYS_STATUS_INVALID_UTF8 = 2,
  DYS_STATUS_CONFIG = 3,
  DYS_STATUS_VALIDATION = 4,
  DYS_STATUS_MISSING_PATH = 5,
  DYS_STATUS_CHECKPOINT = 6,
  DYS_STATUS_IO = 7,
  DYS_STATUS_STATE = 8,
  DYS_STATUS_COMPUTE = 9,
  DYS_STATUS_BUFFER_TOO_SMALL = 10,
  DYS_STATUS_PANIC = 11,
} DysStatus;

// Opaque stitched probability canvas.
typedef struct DysCanvas DysCanvas;

// Opaque binary mask.
typedef struct DysMask DysMask;

// Opaque segmentation model.
typedef struct DysModel DysModel;

// Opaque whole-slide image pyramid.
typedef struct DysSlide DysSlide;

// Sliding-window inference parameters.
typedef struct DysInferParams {
  size_t patch;
  size_t overlap;
  double mpp;
  double min_tissue_frac;
  size_t batch_size;
  size_t workers;
} DysInferParams;

// Threshold and morphology settings.
typedef struct DysPostprocessParams {
  double threshold;
  size_t close_kernel;
  size_t open_kernel;
  size_t min_object_area;
  size_t min_hole_area;
} DysPostprocessParams;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. Valid until the
// next failing call on the same thread.
const char *dys_last_error(void);

// Library version as a static NUL-terminated string.
const char *dys_version(void);

// Untrained 64-px toy model with seeded weights, in eval mode.
//
// # Safety
// `out` must be a valid pointer.
enum DysStatus dys_model_new_toy(uint64_t seed, struct DysModel **out);

// Load a checkpoint written by `dysseg train` with its model config JSON.
//
// # Safety
// Paths must be NUL-terminated strings; `out` must be a valid pointer.
enum DysStatus dys_model_load(const char *config_json,
                              const char *checkpoint,
                              struct DysModel **out);

// Side length of the square input the model expects.
//
// # Safety
// `model` must be a live handle or null (returns 0).
size_t dys_model_input_size(const struct DysModel *model);

// Foreground probabilities for `n` interleaved RGB images of the model's
// input size. `out` receives `n · S · S` values.
//
// # Safety
// `rgb` must hold `n · S · S · 3` bytes and `out` room for `out_len` floats.
enum DysStatus dys_model_predict(const struct DysModel *model,
                                 const uint8_t *rgb,
                                 size_t n,
                                 float *out,
                                 size_t out_len);

// # Safety
// `model` must come from this library and not be used afterwards.
void dys_model_free(struct DysModel *model);

// Open a slide pyramid directory.
//
// # Safety
// `dir` must be a NUL-terminated string; `out` must be a valid pointer.
enum DysStatus dys_slide_open(const char *dir, struct DysSlide **out);

// Canvas extents of the slide at `mpp`.
//
// # Safety
// `slide` must be a live handle; `width` and `height` valid pointers.
enum DysStatus dys_slide_canvas_extent(const struct DysSlide *slide,
                                       double mpp,
                                       size_t *width,
                                       size_t *height);

// # Safety
// `slide` must come from this library and not be used afterwards.
void dys_slide_free(struct DysSlide *slide);

// Defaults for a model with the given input size.
struct DysInferParams dys_infer_params_default(size_t patch);

// Tile, predict and stitch a slide into a finalized probability canvas.
//
// # Safety
// Handles must be live; `params` and `out` valid pointers.
enum DysStatus dys_infer(const struct DysSlide *slide,
                         const struct DysModel *model,
                         const struct DysInferParams *params,
                         struct DysCanvas **out);

// # Safety
// `canvas` must be a live handle; `width` and `height` valid pointers.
enum DysStatus dys_canvas_size(const struct DysCanvas *canvas, size_t *width, size_t *height);

// Copy the row-major probabilities into `out`.
//
// # Safety
// `out` must have room for `len` floats.
enum DysStatus dys_canvas_probabilities(const struct DysCanvas *canvas, float *out, size_t len);

// # Safety
// `canvas` must come from this library and not be used afterwards.
void dys_canvas_free(struct DysCanvas *canvas);

struct DysPostprocessParams dys_postprocess_params_default(void);

// Binarize a canvas (`p > threshold`) and clean it up morphologically.
//
// # Safety
// `canvas` must be live; `params` and `out` valid pointers.
enum DysStatus dys_postprocess(const struct DysCanvas *canvas,
                               const struct DysPostprocessParams *params,
                               struct DysMask **out);

// # Safety
// `mask` must be a live handle; `width` and `height` valid pointers.
enum DysStatus dys_mask_size(const struct DysMask *mask, size_t *width, size_t *height);

// Copy the mask as row-major bytes (0 or 1).
//
// # Safety
// `out` must have room for `len` bytes.
enum DysStatus dys_mask_data(const struct DysMask *mask, uint8_t *out, size_t len);

// # Safety
// `mask` must come from this library and not be used afterwards.
void dys_mask_free(struct DysMask *mask);

// Estimate the H and E optical-density vectors of an interleaved RGB image.
// `out` receives `[h_r, h_g, h_b, e_r, e_g, e_b]`.
//
// # Safety
// `rgb` must hold `width · height · 3` bytes and `out` six doubles.
enum DysStatus dys_stain_estimate(const uint8_t *rgb,
                                  uint32_t width,
                                  uint32_t height,
                                  double beta,
                                  double alpha,
                                  double *out);

// Tiles covering a canvas. Writes up to `cap` top-left corners into `xs` and
// `ys` and the full tile count into `count`; pass `cap` 0 to query the count.
//
// # Safety
// `xs` and `ys` must have room for `cap` entries; `count` a valid pointer.
enum DysStatus dys_tessellate(size_t width,
                              size_t height,
                              size_t patch,
                              size_t overlap,
                              size_t *xs,
                              size_t *ys,
                              size_t cap,
                              size_t *count);

// Case-ROI precision, recall and F1 (0 for empty denominators).
//
// # Safety
// `out` must hold three doubles: F1, recall, precision.
enum DysStatus dys_case_metrics(uint64_t tp, uint64_t fp, uint64_t fn_, double *out);

// Control-ROI specificity `tn / (tn + fp)`.
//
// # Safety
// `out` must be a valid pointer.
enum DysStatus dys_control_specificity(uint64_t fp, uint64_t tn, double *out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DYSSEG_H */
