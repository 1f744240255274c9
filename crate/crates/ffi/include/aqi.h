#ifndef AQI_H
#define AQI_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum AqiStatus {
  AQI_STATUS_OK = 0,
  AQI_STATUS_NULL_POINTER = 1,
  AQI_STATUS_INVALID_INPUT = 2,
  AQI_STATUS_UNREGISTERED_LOCATION = 3,
  AQI_STATUS_INSUFFICIENT_CONTEXT = 4,
  AQI_STATUS_IO = 5,
  AQI_STATUS_PARSE = 6,
  AQI_STATUS_NON_FINITE = 7,
  AQI_STATUS_INTERNAL = 8,
} AqiStatus;

typedef struct AqiModel AqiModel;

typedef struct AqiService AqiService;

/**
 * Result of one annotation.
 */
typedef struct AqiAnnotation {
  /**
   * 1 (good) to 5 (severe).
   */
  uint8_t aqi_class;
  double probabilities[5];
  /**
   * Real hours of history behind the prediction.
   */
  uint32_t history_hours;
  /**
   * 1 when part of the window was padded.
   */
  uint8_t padded;
} AqiAnnotation;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread; empty after a success.
 * The pointer stays valid until the next library call on this thread.
 */
const char *aqi_last_error(void);

/**
 * Library version as a static string.
 */
const char *aqi_version(void);

/**
 * Bins a PM2.5 reading; writes 0 when the reading is above the last band.
 */
enum AqiStatus aqi_bin_pm25(double pm25, uint8_t *out_class);

enum AqiStatus aqi_haversine_km(double lat1, double lon1, double lat2, double lon2, double *out_km);

enum AqiStatus aqi_model_load(const char *path, struct AqiModel **out);

void aqi_model_free(struct AqiModel *model);

/**
 * Window length `T` and per-step feature count the model expects.
 */
enum AqiStatus aqi_model_shape(const struct AqiModel *model,
                               size_t *out_window,
                               size_t *out_features);

/**
 * Predicts from an encoded window: `features` holds `n_steps * n_features`
 * values, oldest step first. `out_probs` receives 5 probabilities.
 */
enum AqiStatus aqi_model_predict(const struct AqiModel *model,
                                 const double *features,
                                 size_t n_steps,
                                 size_t n_features,
                                 double *out_probs,
                                 uint8_t *out_class);

/**
 * Creates a service from a model artifact and a weather fixture CSV.
 */
enum AqiStatus aqi_service_new(const char *model_path,
                               const char *weather_path,
                               struct AqiService **out);

void aqi_service_free(struct AqiService *service);

/**
 * Registers a location from 11 land-use fractions in category order.
 * The location id is returned as a string to free with `aqi_string_free`.
 */
enum AqiStatus aqi_service_register_profile(const struct AqiService *service,
                                            double lat,
                                            double lon,
                                            const double *fractions,
                                            size_t n_fractions,
                                            char **out_location_id);

/**
 * Registers a location from a binary PPM tile and a legend in JSON.
 */
enum AqiStatus aqi_service_register_tile(const struct AqiService *service,
                                         double lat,
                                         double lon,
                                         const uint8_t *ppm,
                                         size_t ppm_len,
                                         const char *legend_json,
                                         char **out_location_id);

/**
 * Annotates one hourly reading; `unix_seconds` is UTC.
 */
enum AqiStatus aqi_service_annotate(const struct AqiService *service,
                                    const char *location_id,
                                    int64_t unix_seconds,
                                    double temperature_c,
                                    double humidity_pct,
                                    struct AqiAnnotation *out);

/**
 * Same as `aqi_service_annotate` with the request and response as JSON,
 * in the shape used by the HTTP endpoint.
 */
enum AqiStatus aqi_service_annotate_json(const struct AqiService *service,
                                         const char *request_json,
                                         char **out_json);

void aqi_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* AQI_H */
