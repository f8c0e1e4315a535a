/*
 * latticeworld - label-conditional 3D world generation over sparse voxel
 * latents: multi-window fused rectified-flow sampling, segment-map guided
 * velocity mixing, spectral initial-latent optimization, and an
 * auto-regressive octant detail enhancer.
 *
 * All functions returning lw_status use 0 for success; on failure a
 * thread-local message is available from lw_last_error(). Handle-returning
 * functions return NULL on failure. Status values match the CLI exit codes.
 */
#ifndef LATTICEWORLD_H
#define LATTICEWORLD_H

#include <stddef.h>
#include <stdint.h>

#if defined(_WIN32)
#define LW_API __declspec(dllexport)
#else
#define LW_API __attribute__((visibility("default")))
#endif

#ifdef __cplusplus
extern "C" {
#endif

typedef enum lw_status {
    LW_OK = 0,
    LW_E_USAGE = 2,   /* bad arguments or malformed configuration */
    LW_E_DATA = 3,    /* missing/corrupt files, invariant violations */
    LW_E_NUMERIC = 4, /* numerical abort (e.g. init-opt divergence) */
} lw_status;

LW_API const char* lw_version(void);
LW_API const char* lw_last_error(void);

/* Opaque handles */
typedef struct lw_model lw_model;    /* flow models + decoders + enhancer mixer */
typedef struct lw_volume lw_volume;  /* dense grid / sparse latent / occupancy */
typedef struct lw_segmap lw_segmap;  /* label raster + prompt table */

/*----------------------------------- volumes -----------------------------------*/

enum {
    LW_VOLUME_DENSE = 0,
    LW_VOLUME_SPARSE = 1,
    LW_VOLUME_OCCUPANCY = 2,
};

LW_API lw_volume* lw_volume_load(const char* path);
LW_API lw_status lw_volume_save(const lw_volume* v, const char* path);
LW_API void lw_volume_free(lw_volume* v);

LW_API int lw_volume_kind(const lw_volume* v);
/* dims_out = {d, h, w, c} */
LW_API lw_status lw_volume_dims(const lw_volume* v, uint32_t dims_out[4]);
/* dense: voxel count; sparse: entry count; occupancy: active voxel count */
LW_API uint64_t lw_volume_count(const lw_volume* v);

/* Dense payload access (NULL for other kinds). len counts floats. */
LW_API const float* lw_volume_dense_data(const lw_volume* v, size_t* len);
/* Sparse payload access: positions are x,y,z triples of u32, features c floats
 * per entry. Either pointer may be NULL when not needed. */
LW_API lw_status lw_volume_sparse_data(const lw_volume* v, const uint32_t** positions,
                                       const float** features, uint64_t* count);

/*----------------------------------- segment maps -----------------------------------*/

/* raster: binary PGM (P5, pixel value = label id) or a plain-text integer
 * grid; prompts: one `label_id=prompt text` per line. */
LW_API lw_segmap* lw_segmap_load(const char* raster_path, const char* prompts_path);
LW_API void lw_segmap_free(lw_segmap* m);
LW_API int lw_segmap_num_labels(const lw_segmap* m);
LW_API lw_status lw_segmap_raster_dims(const lw_segmap* m, uint32_t* height, uint32_t* width);

/*----------------------------------- models -----------------------------------*/

LW_API lw_model* lw_model_load(const char* path);
LW_API lw_status lw_model_save(const lw_model* m, const char* path);
LW_API void lw_model_free(lw_model* m);
/* FNV-1a fingerprint of the serialized base sections (both flow models and
 * decoders); the enhancer mixer is excluded. */
LW_API uint64_t lw_model_base_hash(const lw_model* m);
LW_API int lw_model_channels(const lw_model* m);
LW_API int lw_model_native_size(const lw_model* m);

/*----------------------------------- synthetic data -----------------------------------*/

typedef struct lw_gen_params {
    uint32_t count;
    uint32_t scene_d, scene_h, scene_w;
    uint64_t seed;
} lw_gen_params;

LW_API lw_gen_params lw_gen_params_default(void);
/* writes scene_####.lwvx + manifest.txt into out_dir */
LW_API lw_status lw_gen_scenes(const lw_gen_params* p, const char* out_dir);

/*----------------------------------- training -----------------------------------*/

typedef struct lw_train_params {
    uint32_t channels, emb_dim, hidden, patch_radius, num_labels, native;
    uint32_t steps;
    double lr;
    uint32_t batch;
    uint32_t crops_per_scene;
    uint64_t seed;
    uint32_t threads;
} lw_train_params;

LW_API lw_train_params lw_train_params_default(void);
/* trains from scratch on a gen-scenes directory; writes model.lwmd,
 * stage_s_loss.csv, stage_s_val.csv, stage_l_loss.csv, stage_l_val.csv */
LW_API lw_status lw_train(const char* data_dir, const lw_train_params* p, const char* out_dir);

typedef struct lw_enhtrain_params {
    uint32_t lattice;
    uint32_t crop_sizes[8];
    uint32_t crop_size_count;
    uint32_t per_scene, min_content;
    uint32_t steps;
    double lr;
    uint32_t batch, adjacent_max;
    uint64_t seed;
    uint32_t threads;
} lw_enhtrain_params;

LW_API lw_enhtrain_params lw_enhtrain_params_default(void);
/* fine-tunes only the mixer layer of the checkpoint at model_path against
 * pairs built from data_dir; writes model.lwmd, enhancer_loss.csv,
 * enhancer_val.csv and the pair set under out_dir/pairs */
LW_API lw_status lw_finetune_enhancer(const char* model_path, const char* data_dir,
                                      const lw_enhtrain_params* p, const char* out_dir);

typedef struct lw_dectrain_params {
    uint32_t steps;
    double lr;
    uint32_t crops_per_scene;
    uint64_t seed;
} lw_dectrain_params;

LW_API lw_dectrain_params lw_dectrain_params_default(void);
/* fine-tunes the appearance decoder; writes model.lwmd + decoder_loss.csv */
LW_API lw_status lw_finetune_decoder(const char* model_path, const char* data_dir,
                                     const lw_dectrain_params* p, const char* out_dir);

/*----------------------------------- sampling -----------------------------------*/

typedef struct lw_sample_params {
    uint32_t dims_d, dims_h, dims_w;
    uint32_t steps, window, stride;
    double kernel_sigma; /* <= 0: window / 4 */
    double sigma_max;    /* mask blur at t = 1 */
    uint64_t seed;
    uint32_t threads;
    int plain; /* bypass window fusion (single-label maps only) */
} lw_sample_params;

LW_API lw_sample_params lw_sample_params_default(void);
/* writes world.lwvx, occupancy.lwvx, stage_s.lwvx, top.ppm, side.ppm */
LW_API lw_status lw_sample(const lw_model* m, const lw_segmap* map, const lw_sample_params* p,
                           const char* out_dir);

/* orthographic projections of an existing sparse world */
LW_API lw_status lw_render(const lw_model* m, const lw_volume* world, const char* top_ppm_path,
                           const char* side_ppm_path);

/*----------------------------------- initial-latent optimization ---------------------*/

typedef struct lw_initopt_params {
    double lr;
    uint32_t max_steps;
    int spectral; /* 0: optimize voxel values directly */
    double dice_stop, spike_ratio;
    double ground_frac, exclude_frac, amplitude;
    uint32_t label, sample_steps;
    uint32_t cube; /* latent cube edge; 0 = model native size */
    uint64_t seed;
    uint32_t threads;
} lw_initopt_params;

LW_API lw_initopt_params lw_initopt_params_default(void);
/* writes trace.csv (step,loss,iou,dice) + optimized.lwvx; returns
 * LW_E_NUMERIC when the run diverged (the trace is still written) */
LW_API lw_status lw_optimize_init(const lw_model* m, const lw_initopt_params* p,
                                  const char* out_dir);

/*----------------------------------- detail enhancement ------------------------------*/

typedef struct lw_enhance_params {
    uint32_t levels;
    uint32_t tile; /* parent cube edge; world dims must be divisible */
    uint32_t steps, adjacent_limit, label;
    uint64_t seed;
    uint32_t threads;
} lw_enhance_params;

LW_API lw_enhance_params lw_enhance_params_default(void);
/* map may be NULL; out receives a sparse volume handle */
LW_API lw_status lw_enhance(const lw_model* m, const lw_volume* world, const lw_segmap* map,
                            const lw_enhance_params* p, lw_volume** out);

/*----------------------------------- evaluation -----------------------------------*/

typedef struct lw_eval_params {
    uint32_t window, stride;
    double kernel_sigma;
    double mask_sigma;
    uint64_t seed;
    int stat_kind; /* 0: mean active height, 1: mean feature norm */
} lw_eval_params;

LW_API lw_eval_params lw_eval_params_default(void);

/* seam.csv for a dense or sparse volume; ratio_out may be NULL */
LW_API lw_status lw_eval_seam(const lw_volume* world, const lw_eval_params* p,
                              const char* csv_path, double* ratio_out);

/* regions.csv; reference_csv (optional) must be a prior regions.csv with
 * matching labels */
LW_API lw_status lw_eval_region(const lw_volume* world, const lw_segmap* map,
                                const lw_eval_params* p, const char* reference_csv,
                                const char* csv_path);

/* probe.txt with the window / segment normalization probe values;
 * max_deviation_out may be NULL, map may be NULL */
LW_API lw_status lw_eval_probe(uint32_t d, uint32_t h, uint32_t w, const lw_segmap* map,
                               const lw_eval_params* p, const char* path,
                               double* max_deviation_out);

#ifdef __cplusplus
}
#endif

#endif /* LATTICEWORLD_H */
