#include "latticeworld.h"

#include <cstring>
#include <string>

#include "archive.hpp"
#include "pipeline.hpp"
#include "rng.hpp"
#include "util.hpp"

/*----------------------------------- handles -----------------------------------*/

struct lw_model {
    lw::ModelBundle bundle;
};

struct lw_volume {
    lw::Volume volume;
    // packed position cache for lw_volume_sparse_data
    mutable std::vector<uint32_t> packed_positions;
};

struct lw_segmap {
    lw::SegmentMap map;
};

namespace {

thread_local std::string g_last_error;

void set_error(const std::string& msg) { g_last_error = msg; }

lw_status status_of(const lw::Error& err) { return static_cast<lw_status>(err.kind()); }

template <typename Fn>
lw_status guarded(Fn&& fn) {
    try {
        fn();
        return LW_OK;
    } catch (const lw::Error& err) {
        set_error(err.what());
        return status_of(err);
    } catch (const std::exception& err) {
        set_error(err.what());
        return LW_E_DATA;
    }
}

template <typename T, typename Fn>
T* guarded_new(Fn&& fn) {
    try {
        return fn();
    } catch (const lw::Error& err) {
        set_error(err.what());
        return nullptr;
    } catch (const std::exception& err) {
        set_error(err.what());
        return nullptr;
    }
}

bool require(bool cond, const char* msg) {
    if (!cond) {
        set_error(msg);
    }
    return cond;
}

}  // namespace

extern "C" {

const char* lw_version(void) { return "latticeworld 0.1.0"; }

const char* lw_last_error(void) { return g_last_error.c_str(); }

/*----------------------------------- volumes -----------------------------------*/

lw_volume* lw_volume_load(const char* path) {
    if (!require(path != nullptr, "lw_volume_load: path is null")) {
        return nullptr;
    }
    return guarded_new<lw_volume>([&] { return new lw_volume{lw::load_volume(path), {}}; });
}

lw_status lw_volume_save(const lw_volume* v, const char* path) {
    if (!require(v != nullptr && path != nullptr, "lw_volume_save: null argument")) {
        return LW_E_USAGE;
    }
    return guarded([&] { lw::save_volume(v->volume, path); });
}

void lw_volume_free(lw_volume* v) { delete v; }

int lw_volume_kind(const lw_volume* v) {
    if (!require(v != nullptr, "lw_volume_kind: null volume")) {
        return -1;
    }
    return static_cast<int>(v->volume.kind);
}

lw_status lw_volume_dims(const lw_volume* v, uint32_t dims_out[4]) {
    if (!require(v != nullptr && dims_out != nullptr, "lw_volume_dims: null argument")) {
        return LW_E_USAGE;
    }
    lw::GridDims dims = v->volume.dims();
    dims_out[0] = static_cast<uint32_t>(dims.d);
    dims_out[1] = static_cast<uint32_t>(dims.h);
    dims_out[2] = static_cast<uint32_t>(dims.w);
    dims_out[3] = static_cast<uint32_t>(dims.c);
    return LW_OK;
}

uint64_t lw_volume_count(const lw_volume* v) {
    if (!require(v != nullptr, "lw_volume_count: null volume")) {
        return 0;
    }
    switch (v->volume.kind) {
        case lw::VolumeKind::dense:
            return v->volume.dense.dims.voxels();
        case lw::VolumeKind::sparse:
            return v->volume.sparse.size();
        default:
            return v->volume.occupancy.active_count();
    }
}

const float* lw_volume_dense_data(const lw_volume* v, size_t* len) {
    if (!require(v != nullptr, "lw_volume_dense_data: null volume")) {
        return nullptr;
    }
    if (v->volume.kind == lw::VolumeKind::dense) {
        if (len != nullptr) {
            *len = v->volume.dense.data.size();
        }
        return v->volume.dense.data.data();
    }
    if (v->volume.kind == lw::VolumeKind::occupancy) {
        if (len != nullptr) {
            *len = v->volume.occupancy.values.size();
        }
        return v->volume.occupancy.values.data();
    }
    set_error("lw_volume_dense_data: volume is sparse");
    return nullptr;
}

lw_status lw_volume_sparse_data(const lw_volume* v, const uint32_t** positions,
                                const float** features, uint64_t* count) {
    if (!require(v != nullptr, "lw_volume_sparse_data: null volume")) {
        return LW_E_USAGE;
    }
    if (v->volume.kind != lw::VolumeKind::sparse) {
        set_error("lw_volume_sparse_data: volume is not sparse");
        return LW_E_USAGE;
    }
    const lw::SparseLatent& s = v->volume.sparse;
    if (positions != nullptr) {
        if (v->packed_positions.size() != s.size() * 3) {
            v->packed_positions.resize(s.size() * 3);
            for (size_t i = 0; i < s.size(); ++i) {
                v->packed_positions[3 * i + 0] = static_cast<uint32_t>(s.positions()[i].x);
                v->packed_positions[3 * i + 1] = static_cast<uint32_t>(s.positions()[i].y);
                v->packed_positions[3 * i + 2] = static_cast<uint32_t>(s.positions()[i].z);
            }
        }
        *positions = v->packed_positions.data();
    }
    if (features != nullptr) {
        *features = s.features().data();
    }
    if (count != nullptr) {
        *count = s.size();
    }
    return LW_OK;
}

/*----------------------------------- segment maps -----------------------------------*/

lw_segmap* lw_segmap_load(const char* raster_path, const char* prompts_path) {
    if (!require(raster_path != nullptr && prompts_path != nullptr,
                 "lw_segmap_load: null path")) {
        return nullptr;
    }
    return guarded_new<lw_segmap>(
        [&] { return new lw_segmap{lw::load_segment_map(raster_path, prompts_path)}; });
}

void lw_segmap_free(lw_segmap* m) { delete m; }

int lw_segmap_num_labels(const lw_segmap* m) {
    if (!require(m != nullptr, "lw_segmap_num_labels: null map")) {
        return -1;
    }
    return m->map.num_labels();
}

lw_status lw_segmap_raster_dims(const lw_segmap* m, uint32_t* height, uint32_t* width) {
    if (!require(m != nullptr, "lw_segmap_raster_dims: null map")) {
        return LW_E_USAGE;
    }
    if (height != nullptr) {
        *height = static_cast<uint32_t>(m->map.height);
    }
    if (width != nullptr) {
        *width = static_cast<uint32_t>(m->map.width);
    }
    return LW_OK;
}

/*----------------------------------- models -----------------------------------*/

lw_model* lw_model_load(const char* path) {
    if (!require(path != nullptr, "lw_model_load: path is null")) {
        return nullptr;
    }
    return guarded_new<lw_model>([&] { return new lw_model{lw::load_bundle(path)}; });
}

lw_status lw_model_save(const lw_model* m, const char* path) {
    if (!require(m != nullptr && path != nullptr, "lw_model_save: null argument")) {
        return LW_E_USAGE;
    }
    return guarded([&] { lw::save_bundle(m->bundle, path); });
}

void lw_model_free(lw_model* m) { delete m; }

uint64_t lw_model_base_hash(const lw_model* m) {
    if (!require(m != nullptr, "lw_model_base_hash: null model")) {
        return 0;
    }
    return lw::bundle_base_hash(m->bundle);
}

int lw_model_channels(const lw_model* m) {
    if (!require(m != nullptr, "lw_model_channels: null model")) {
        return -1;
    }
    return m->bundle.cfg.channels;
}

int lw_model_native_size(const lw_model* m) {
    if (!require(m != nullptr, "lw_model_native_size: null model")) {
        return -1;
    }
    return m->bundle.cfg.native_size;
}

/*----------------------------------- data generation -----------------------------------*/

lw_gen_params lw_gen_params_default(void) {
    lw_gen_params p;
    p.count = 24;
    p.scene_d = 32;
    p.scene_h = 48;
    p.scene_w = 48;
    p.seed = 0;
    return p;
}

lw_status lw_gen_scenes(const lw_gen_params* p, const char* out_dir) {
    if (!require(p != nullptr && out_dir != nullptr, "lw_gen_scenes: null argument")) {
        return LW_E_USAGE;
    }
    return guarded([&] {
        lw::GenDataConfig cfg;
        cfg.count = static_cast<int>(p->count);
        cfg.scene_dims = {static_cast<int>(p->scene_d), static_cast<int>(p->scene_h),
                          static_cast<int>(p->scene_w), 4};
        cfg.seed = p->seed;
        lw::gen_scenes_to_dir(cfg, out_dir);
    });
}

/*----------------------------------- training -----------------------------------*/

lw_train_params lw_train_params_default(void) {
    lw_train_params p;
    p.channels = 4;
    p.emb_dim = 4;
    p.hidden = 16;
    p.patch_radius = 1;
    p.num_labels = 8;
    p.native = 32;
    p.steps = 4000;
    p.lr = 0.05;
    p.batch = 2048;
    p.crops_per_scene = 4;
    p.seed = 0;
    p.threads = 1;
    return p;
}

namespace {

void write_curves(const lw::TrainCurves& curves, const std::string& loss_path,
                  const std::string& val_path) {
    std::vector<std::vector<double>> rows;
    rows.reserve(curves.loss.size());
    for (size_t i = 0; i < curves.loss.size(); ++i) {
        rows.push_back({static_cast<double>(i), curves.loss[i]});
    }
    lw::write_csv(loss_path, "step,loss", rows);
    rows.clear();
    for (const auto& [step, loss] : curves.val) {
        rows.push_back({static_cast<double>(step), loss});
    }
    lw::write_csv(val_path, "step,loss", rows);
}

}  // namespace

lw_status lw_train(const char* data_dir, const lw_train_params* p, const char* out_dir) {
    if (!require(data_dir != nullptr && p != nullptr && out_dir != nullptr,
                 "lw_train: null argument")) {
        return LW_E_USAGE;
    }
    return guarded([&] {
        lw::SceneSet data = lw::load_scene_dir(data_dir);
        lw::TrainPipelineConfig cfg;
        cfg.model.channels = static_cast<int>(p->channels);
        cfg.model.emb_dim = static_cast<int>(p->emb_dim);
        cfg.model.hidden = static_cast<int>(p->hidden);
        cfg.model.patch_radius = static_cast<int>(p->patch_radius);
        cfg.model.num_labels = static_cast<int>(p->num_labels);
        cfg.model.native_size = static_cast<int>(p->native);
        cfg.crops_per_scene = static_cast<int>(p->crops_per_scene);
        cfg.flow.steps = static_cast<int>(p->steps);
        cfg.flow.lr = p->lr;
        cfg.flow.batch_voxels = static_cast<int>(p->batch);
        cfg.flow.seed = p->seed;
        cfg.flow.threads = static_cast<int>(p->threads);
        lw::TrainPipelineResult result = lw::train_pipeline(data, cfg);
        lw::ensure_dir(out_dir);
        std::string dir(out_dir);
        lw::save_bundle(result.bundle, dir + "/model.lwmd");
        write_curves(result.stage_s, dir + "/stage_s_loss.csv", dir + "/stage_s_val.csv");
        write_curves(result.stage_l, dir + "/stage_l_loss.csv", dir + "/stage_l_val.csv");
    });
}

lw_enhtrain_params lw_enhtrain_params_default(void) {
    lw_enhtrain_params p;
    p.lattice = 16;
    p.crop_sizes[0] = 64;
    p.crop_sizes[1] = 128;
    p.crop_sizes[2] = 192;
    p.crop_sizes[3] = 256;
    p.crop_size_count = 4;
    p.per_scene = 4;
    p.min_content = 32;
    p.steps = 1500;
    p.lr = 0.02;
    p.batch = 1024;
    p.adjacent_max = 3;
    p.seed = 0;
    p.threads = 1;
    return p;
}

lw_status lw_finetune_enhancer(const char* model_path, const char* data_dir,
                               const lw_enhtrain_params* p, const char* out_dir) {
    if (!require(model_path != nullptr && data_dir != nullptr && p != nullptr &&
                     out_dir != nullptr,
                 "lw_finetune_enhancer: null argument")) {
        return LW_E_USAGE;
    }
    return guarded([&] {
        lw::ModelBundle bundle = lw::load_bundle(model_path);
        lw::SceneSet data = lw::load_scene_dir(data_dir);
        lw::EnhancerPipelineConfig cfg;
        cfg.pairs.lattice = static_cast<int>(p->lattice);
        cfg.pairs.crop_sizes.clear();
        for (uint32_t i = 0; i < p->crop_size_count && i < 8; ++i) {
            cfg.pairs.crop_sizes.push_back(static_cast<int>(p->crop_sizes[i]));
        }
        cfg.pairs.per_scene = static_cast<int>(p->per_scene);
        cfg.pairs.min_content = static_cast<int>(p->min_content);
        cfg.pairs.seed = p->seed;
        cfg.train.steps = static_cast<int>(p->steps);
        cfg.train.lr = p->lr;
        cfg.train.batch_positions = static_cast<int>(p->batch);
        cfg.train.adjacent_max = static_cast<int>(p->adjacent_max);
        cfg.train.seed = p->seed;
        cfg.train.threads = static_cast<int>(p->threads);
        lw::ensure_dir(out_dir);
        std::string dir(out_dir);
        lw::EnhancerPipelineResult result =
            lw::finetune_enhancer_pipeline(bundle, data, cfg, dir + "/pairs");
        lw::save_bundle(bundle, dir + "/model.lwmd");
        std::vector<std::vector<double>> rows;
        for (size_t i = 0; i < result.curve.size(); ++i) {
            rows.push_back({static_cast<double>(i), result.curve[i]});
        }
        lw::write_csv(dir + "/enhancer_loss.csv", "step,loss", rows);
        lw::write_csv(dir + "/enhancer_val.csv", "conditional,unconditional",
                      {{result.val_conditional, result.val_unconditional}});
    });
}

lw_dectrain_params lw_dectrain_params_default(void) {
    lw_dectrain_params p;
    p.steps = 600;
    p.lr = 0.2;
    p.crops_per_scene = 4;
    p.seed = 0;
    return p;
}

lw_status lw_finetune_decoder(const char* model_path, const char* data_dir,
                              const lw_dectrain_params* p, const char* out_dir) {
    if (!require(model_path != nullptr && data_dir != nullptr && p != nullptr &&
                     out_dir != nullptr,
                 "lw_finetune_decoder: null argument")) {
        return LW_E_USAGE;
    }
    return guarded([&] {
        lw::ModelBundle bundle = lw::load_bundle(model_path);
        lw::SceneSet data = lw::load_scene_dir(data_dir);
        lw::DecoderPipelineConfig cfg;
        cfg.crops_per_scene = static_cast<int>(p->crops_per_scene);
        cfg.steps = static_cast<int>(p->steps);
        cfg.lr = p->lr;
        cfg.seed = p->seed;
        std::vector<double> curve = lw::finetune_decoder_pipeline(bundle, data, cfg);
        lw::ensure_dir(out_dir);
        std::string dir(out_dir);
        lw::save_bundle(bundle, dir + "/model.lwmd");
        std::vector<std::vector<double>> rows;
        for (size_t i = 0; i < curve.size(); ++i) {
            rows.push_back({static_cast<double>(i), curve[i]});
        }
        lw::write_csv(dir + "/decoder_loss.csv", "step,loss", rows);
    });
}

/*----------------------------------- sampling -----------------------------------*/

lw_sample_params lw_sample_params_default(void) {
    lw_sample_params p;
    p.dims_d = 32;
    p.dims_h = 32;
    p.dims_w = 32;
    p.steps = 8;
    p.window = 32;
    p.stride = 16;
    p.kernel_sigma = 0.0;
    p.sigma_max = 8.0;
    p.seed = 0;
    p.threads = 1;
    p.plain = 0;
    return p;
}

namespace {

lw::SamplerConfig sampler_config(const lw_sample_params& p) {
    lw::SamplerConfig cfg;
    cfg.steps = static_cast<int>(p.steps);
    cfg.window_size = static_cast<int>(p.window);
    cfg.stride = static_cast<int>(p.stride);
    cfg.kernel_sigma = p.kernel_sigma > 0.0 ? p.kernel_sigma : p.window / 4.0;
    cfg.sigma_schedule.sigma_max = p.sigma_max;
    cfg.seed = p.seed;
    cfg.threads = static_cast<int>(p.threads);
    cfg.plain = p.plain != 0;
    return cfg;
}

}  // namespace

lw_status lw_sample(const lw_model* m, const lw_segmap* map, const lw_sample_params* p,
                    const char* out_dir) {
    if (!require(m != nullptr && map != nullptr && p != nullptr && out_dir != nullptr,
                 "lw_sample: null argument")) {
        return LW_E_USAGE;
    }
    return guarded([&] {
        lw::GridDims dims{static_cast<int>(p->dims_d), static_cast<int>(p->dims_h),
                          static_cast<int>(p->dims_w), m->bundle.cfg.channels};
        lw::sample_to_dir(m->bundle, map->map, dims, sampler_config(*p), out_dir);
    });
}

lw_status lw_render(const lw_model* m, const lw_volume* world, const char* top_ppm_path,
                    const char* side_ppm_path) {
    if (!require(m != nullptr && world != nullptr, "lw_render: null argument")) {
        return LW_E_USAGE;
    }
    if (world->volume.kind != lw::VolumeKind::sparse) {
        set_error("lw_render: world volume must be sparse");
        return LW_E_USAGE;
    }
    return guarded([&] {
        if (top_ppm_path != nullptr) {
            lw::save_ppm(lw::render_top_view(m->bundle.decoders, world->volume.sparse),
                         top_ppm_path);
        }
        if (side_ppm_path != nullptr) {
            lw::save_ppm(lw::render_side_view(m->bundle.decoders, world->volume.sparse),
                         side_ppm_path);
        }
    });
}

/*----------------------------------- init optimization -----------------------------------*/

lw_initopt_params lw_initopt_params_default(void) {
    lw_initopt_params p;
    p.lr = 9.0;
    p.max_steps = 10;
    p.spectral = 1;
    p.dice_stop = 0.9;
    p.spike_ratio = 10.0;
    p.ground_frac = 0.25;
    p.exclude_frac = 0.6;
    p.amplitude = 1.0;
    p.label = 0;
    p.sample_steps = 8;
    p.cube = 0;
    p.seed = 0;
    p.threads = 1;
    return p;
}

lw_status lw_optimize_init(const lw_model* m, const lw_initopt_params* p, const char* out_dir) {
    if (!require(m != nullptr && p != nullptr && out_dir != nullptr,
                 "lw_optimize_init: null argument")) {
        return LW_E_USAGE;
    }
    bool diverged = false;
    std::string message;
    lw_status status = guarded([&] {
        lw::InitOptRunConfig cfg;
        cfg.opt.lr = p->lr;
        cfg.opt.max_steps = static_cast<int>(p->max_steps);
        cfg.opt.spectral = p->spectral != 0;
        cfg.opt.dice_stop = p->dice_stop;
        cfg.opt.spike_ratio = p->spike_ratio;
        cfg.opt.label = static_cast<int>(p->label);
        cfg.opt.sample_steps = static_cast<int>(p->sample_steps);
        cfg.opt.threads = static_cast<int>(p->threads);
        cfg.cube = static_cast<int>(p->cube);
        cfg.ground_frac = p->ground_frac;
        cfg.exclude_frac = p->exclude_frac;
        cfg.amplitude = p->amplitude;
        cfg.seed = p->seed;
        lw::OptResult result = lw::optimize_init_to_dir(m->bundle, cfg, out_dir);
        diverged = result.diverged;
        message = result.message;
    });
    if (status != LW_OK) {
        return status;
    }
    if (diverged) {
        set_error("init-opt diverged: " + message);
        return LW_E_NUMERIC;
    }
    return LW_OK;
}

/*----------------------------------- enhancement -----------------------------------*/

lw_enhance_params lw_enhance_params_default(void) {
    lw_enhance_params p;
    p.levels = 1;
    p.tile = 16;
    p.steps = 8;
    p.adjacent_limit = 3;
    p.label = 0;
    p.seed = 0;
    p.threads = 1;
    return p;
}

lw_status lw_enhance(const lw_model* m, const lw_volume* world, const lw_segmap* map,
                     const lw_enhance_params* p, lw_volume** out) {
    if (!require(m != nullptr && world != nullptr && p != nullptr && out != nullptr,
                 "lw_enhance: null argument")) {
        return LW_E_USAGE;
    }
    if (world->volume.kind != lw::VolumeKind::sparse) {
        set_error("lw_enhance: world volume must be sparse");
        return LW_E_USAGE;
    }
    return guarded([&] {
        lw::EnhanceWorldConfig cfg;
        cfg.tile = static_cast<int>(p->tile);
        cfg.sample.steps = static_cast<int>(p->steps);
        cfg.sample.adjacent_limit = static_cast<int>(p->adjacent_limit);
        cfg.sample.label = static_cast<int>(p->label);
        cfg.sample.seed = p->seed;
        cfg.sample.threads = static_cast<int>(p->threads);
        cfg.map = map != nullptr ? &map->map : nullptr;
        lw::SparseLatent enhanced =
            lw::enhance_world(m->bundle.flow_l, m->bundle.fusion, world->volume.sparse,
                              static_cast<int>(p->levels), cfg);
        *out = new lw_volume{lw::Volume::of(std::move(enhanced)), {}};
    });
}

/*----------------------------------- evaluation -----------------------------------*/

lw_eval_params lw_eval_params_default(void) {
    lw_eval_params p;
    p.window = 32;
    p.stride = 16;
    p.kernel_sigma = 8.0;
    p.mask_sigma = 0.0;
    p.seed = 0;
    p.stat_kind = 0;
    return p;
}

namespace {

lw::EvalRunConfig eval_config(const lw_eval_params& p) {
    lw::EvalRunConfig cfg;
    cfg.window = static_cast<int>(p.window);
    cfg.stride = static_cast<int>(p.stride);
    cfg.kernel_sigma = p.kernel_sigma;
    cfg.mask_sigma = p.mask_sigma;
    cfg.seed = p.seed;
    cfg.stat = p.stat_kind == 1 ? lw::RegionStatKind::mean_feature_norm
                                : lw::RegionStatKind::mean_height;
    return cfg;
}

}  // namespace

lw_status lw_eval_seam(const lw_volume* world, const lw_eval_params* p, const char* csv_path,
                       double* ratio_out) {
    if (!require(world != nullptr && p != nullptr && csv_path != nullptr,
                 "lw_eval_seam: null argument")) {
        return LW_E_USAGE;
    }
    return guarded([&] {
        lw::SeamReport report = lw::eval_seam_to_csv(world->volume, eval_config(*p), csv_path);
        if (ratio_out != nullptr) {
            *ratio_out = report.ratio;
        }
    });
}

lw_status lw_eval_region(const lw_volume* world, const lw_segmap* map, const lw_eval_params* p,
                         const char* reference_csv, const char* csv_path) {
    if (!require(world != nullptr && map != nullptr && p != nullptr && csv_path != nullptr,
                 "lw_eval_region: null argument")) {
        return LW_E_USAGE;
    }
    if (world->volume.kind != lw::VolumeKind::sparse) {
        set_error("lw_eval_region: world volume must be sparse");
        return LW_E_USAGE;
    }
    return guarded([&] {
        std::vector<double> reference;
        if (reference_csv != nullptr && reference_csv[0] != '\0') {
            for (const auto& row : lw::read_csv(reference_csv)) {
                if (row.size() >= 2) {
                    reference.push_back(row[1]);
                }
            }
        }
        lw::eval_region_to_csv(world->volume.sparse, map->map, eval_config(*p), reference,
                               csv_path);
    });
}

lw_status lw_eval_probe(uint32_t d, uint32_t h, uint32_t w, const lw_segmap* map,
                        const lw_eval_params* p, const char* path, double* max_deviation_out) {
    if (!require(p != nullptr && path != nullptr, "lw_eval_probe: null argument")) {
        return LW_E_USAGE;
    }
    return guarded([&] {
        lw::GridDims dims{static_cast<int>(d), static_cast<int>(h), static_cast<int>(w), 1};
        double worst = lw::eval_probe_to_file(dims, map != nullptr ? &map->map : nullptr,
                                              eval_config(*p), path);
        if (max_deviation_out != nullptr) {
            *max_deviation_out = worst;
        }
    });
}

}  // extern "C"
