/* Copyright Contributors to the neffbio project
 * SPDX-License-Identifier: Apache-2.0
 *
 * C interface to the neffbio library. Objects are opaque handles owned by the
 * caller and released with the matching *_free function. Every call returns
 * an nb_status; on failure nb_last_error() describes what went wrong on the
 * calling thread.
 */

#ifndef NEFFBIO_H
#define NEFFBIO_H

#include <stddef.h>
#include <stdint.h>

#ifdef __cplusplus
extern "C" {
#endif

#if defined(_WIN32)
#define NB_API __declspec(dllexport)
#else
#define NB_API __attribute__((visibility("default")))
#endif

typedef enum nb_status {
    NB_OK = 0,
    NB_ERR_INTERNAL = 1,
    NB_ERR_CONFIG = 2,
    NB_ERR_DATA = 3,
    NB_ERR_NUMERIC = 4
} nb_status;

typedef struct nb_config nb_config;
typedef struct nb_scene nb_scene;
typedef struct nb_fields nb_fields;
typedef struct nb_cloud nb_cloud;
typedef struct nb_bionet nb_bionet;

typedef struct nb_neff_metrics {
    double psnr;
    double ssim;
    double feature_cosine;
    double surface_sdf;
} nb_neff_metrics;

typedef struct nb_regression {
    double mae;
    double mare;
    double rmse;
    size_t n;
} nb_regression;

NB_API const char* nb_version(void);
NB_API const char* nb_last_error(void);

/* --- configuration ----------------------------------------------------------
 * json may be NULL for the defaults. Overrides are "a.b=value" strings. */
NB_API nb_status nb_config_create(const char* json, const char* const* overrides, size_t n_overrides,
                                  nb_config** out);
/* Resolved configuration as JSON. The string lives until the next call on
 * this handle. */
NB_API nb_status nb_config_json(nb_config* config, const char** out);
NB_API void nb_config_free(nb_config* config);

/* --- scenes ------------------------------------------------------------------ */
/* Writes a synthetic scene bundle. spec_json may be NULL (sphere on a ground
 * slab, 64 feature channels). */
NB_API nb_status nb_synth_scene(const char* spec_json, const char* out_dir);
/* Writes n synthetic plot clouds (plot_NNN.ply) with biomass = 0.5 * point
 * count, plus dataset.json listing them. */
NB_API nb_status nb_synth_plots(size_t n, int feature_channels, uint64_t seed, const char* out_dir);
NB_API nb_status nb_scene_load(const char* dir, nb_scene** out);
NB_API size_t nb_scene_view_count(const nb_scene* scene);
NB_API int nb_scene_feature_channels(const nb_scene* scene);
NB_API void nb_scene_free(nb_scene* scene);

/* --- neural fields ------------------------------------------------------------ */
/* Trains on the scene with config->neff. Writes logs and checkpoints when the
 * config has an output directory. */
NB_API nb_status nb_train_neff(const nb_scene* scene, const nb_config* config, nb_fields** out);
NB_API nb_status nb_fields_load(const char* path, nb_fields** out);
NB_API nb_status nb_fields_save(const nb_fields* fields, const char* path);
NB_API void nb_fields_free(nb_fields* fields);

/* Renders view `view` to <out_dir>/<stem>_rgb.png, _depth.png and _feat.png
 * (PCA of the rendered features). */
NB_API nb_status nb_render_view(const nb_fields* fields, const nb_scene* scene, size_t view, int samples,
                                const char* out_dir);
/* Held-out views; surface_sdf uses the scene's sparse points. */
NB_API nb_status nb_evaluate_neff(const nb_fields* fields, const nb_scene* scene, int samples,
                                  nb_neff_metrics* out);

/* --- point clouds -------------------------------------------------------------- */
NB_API nb_status nb_extract_surface(const nb_fields* fields, int grid_res, double tau, nb_cloud** out);
NB_API nb_status nb_cloud_load(const char* ply_path, nb_cloud** out);
NB_API nb_status nb_cloud_save(const nb_cloud* cloud, const char* ply_path);
NB_API size_t nb_cloud_size(const nb_cloud* cloud);
NB_API void nb_cloud_free(nb_cloud* cloud);

/* --- biomass network ------------------------------------------------------------ */
NB_API nb_status nb_train_bionet(const nb_cloud* const* clouds, const double* biomass, size_t n,
                                 const nb_config* config, nb_bionet** out);
NB_API nb_status nb_bionet_load(const char* path, nb_bionet** out);
NB_API nb_status nb_bionet_save(const nb_bionet* net, const char* path);
NB_API nb_status nb_bionet_predict(const nb_bionet* net, const nb_cloud* cloud, double* out);
NB_API void nb_bionet_free(nb_bionet* net);

/* --- plots and metrics ------------------------------------------------------------ */
/* For every plot in <scene>/plots.json writes <out_dir>/<id>/views.txt (image
 * names) and <id>/points.txt (cropped sparse points). */
NB_API nb_status nb_extract_plots(const nb_scene* scene, const char* out_dir, size_t* n_plots);
NB_API nb_status nb_regression_metrics(const double* predicted, const double* truth, size_t n,
                                       nb_regression* out);

#ifdef __cplusplus
}
#endif

#endif
