#include "pipeline.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "rng.hpp"
#include "scene.hpp"
#include "util.hpp"

namespace fs = std::filesystem;

namespace lw {

void ensure_dir(const std::string& path) {
    std::error_code ec;
    fs::create_directories(path, ec);
    if (ec) {
        fail_data("cannot create directory: " + path);
    }
}

/*----------------------------------- data generation -----------------------------------*/

std::vector<SceneRecord> gen_scenes_to_dir(const GenDataConfig& cfg, const std::string& out_dir) {
    if (cfg.count < 0) {
        fail_usage("gen-data count must be >= 0");
    }
    ensure_dir(out_dir);
    std::vector<SceneRecord> records;
    std::ostringstream manifest;
    for (int i = 0; i < cfg.count; ++i) {
        SceneRecord rec;
        rec.id = i;
        rec.label = i % kNumSceneFamilies;
        rec.seed = substream_seed(cfg.seed, stream::scene, static_cast<uint64_t>(i));
        rec.file = format("scene_%04d.lwvx", i);
        DenseLatentGrid scene = generate_scene(rec.label, cfg.scene_dims, rec.seed);
        save_volume(Volume::of(std::move(scene)), out_dir + "/" + rec.file);
        manifest << rec.id << " " << rec.file << " " << rec.label << " " << cfg.scene_dims.d
                 << " " << cfg.scene_dims.h << " " << cfg.scene_dims.w << " " << rec.seed
                 << "\n";
        records.push_back(std::move(rec));
    }
    std::ofstream mf(out_dir + "/manifest.txt", std::ios::trunc);
    if (!mf) {
        fail_data("cannot create manifest in " + out_dir);
    }
    mf << manifest.str();
    return records;
}

SceneSet load_scene_dir(const std::string& dir) {
    std::ifstream mf(dir + "/manifest.txt");
    if (!mf) {
        fail_data("missing manifest.txt in " + dir);
    }
    SceneSet set;
    std::string line;
    while (std::getline(mf, line)) {
        if (line.empty()) {
            continue;
        }
        std::istringstream ss(line);
        int id, label, d, h, w;
        std::string file;
        uint64_t seed;
        if (!(ss >> id >> file >> label >> d >> h >> w >> seed)) {
            fail_data("malformed manifest line in " + dir + ": " + line);
        }
        Volume v = load_volume(dir + "/" + file);
        if (v.kind != VolumeKind::dense) {
            fail_data("scene volume is not dense: " + file);
        }
        set.scenes.push_back(std::move(v.dense));
        set.labels.push_back(label);
    }
    if (set.scenes.empty()) {
        fail_data("empty scene manifest in " + dir);
    }
    return set;
}

/*----------------------------------- training -----------------------------------*/

namespace {

struct CropSets {
    std::vector<DenseTrainItem> dense;
    std::vector<SparseTrainItem> sparse;
    std::vector<DecoderCrop> decoder;
};

CropSets make_crops(const SceneSet& data, const std::vector<size_t>& scene_ids, int native,
                    int channels, int per_scene, uint64_t seed) {
    CropSets out;
    Rng rng(substream_seed(seed, stream::train, 31));
    for (size_t idx : scene_ids) {
        const DenseLatentGrid& scene = data.scenes[idx];
        if (scene.dims.d < native || scene.dims.h < native || scene.dims.w < native) {
            fail_data(format("scene %zu smaller than the native crop %d", idx, native));
        }
        for (int k = 0; k < per_scene; ++k) {
            Vox origin{static_cast<int>(rng.uniform_index(scene.dims.w - native + 1)),
                       static_cast<int>(rng.uniform_index(scene.dims.h - native + 1)),
                       static_cast<int>(rng.uniform_index(scene.dims.d - native + 1))};
            DenseTrainItem dense;
            dense.latent = encode_crop_dense(scene, origin, native, native, channels);
            dense.label = data.labels[idx];
            SparseTrainItem sparse;
            sparse.latent = encode_crop_sparse(scene, origin, native, native, channels);
            sparse.label = data.labels[idx];
            out.decoder.push_back(make_decoder_crop(scene, origin, native, native, channels));
            out.dense.push_back(std::move(dense));
            out.sparse.push_back(std::move(sparse));
        }
    }
    return out;
}

std::pair<std::vector<size_t>, std::vector<size_t>> split_scenes(size_t count,
                                                                 double val_fraction) {
    std::vector<size_t> train_ids, val_ids;
    size_t val_count = static_cast<size_t>(val_fraction * static_cast<double>(count));
    // hold out the tail; generation alternates labels so both families appear
    for (size_t i = 0; i < count; ++i) {
        if (i + val_count >= count && count > 1) {
            val_ids.push_back(i);
        } else {
            train_ids.push_back(i);
        }
    }
    if (train_ids.empty()) {
        train_ids = val_ids;
    }
    return {train_ids, val_ids};
}

}  // namespace

TrainPipelineResult train_pipeline(const SceneSet& data, const TrainPipelineConfig& cfg) {
    cfg.model.validate();
    auto [train_ids, val_ids] = split_scenes(data.scenes.size(), cfg.val_fraction);
    CropSets train_crops = make_crops(data, train_ids, cfg.model.native_size,
                                      cfg.model.channels, cfg.crops_per_scene, cfg.flow.seed);
    CropSets val_crops = make_crops(data, val_ids, cfg.model.native_size, cfg.model.channels,
                                    std::max(1, cfg.crops_per_scene / 2),
                                    substream_seed(cfg.flow.seed, stream::train, 32));

    TrainPipelineResult result;
    result.bundle = ModelBundle::random_init(cfg.model, cfg.flow.seed);
    result.stage_s =
        train_flow_matching(result.bundle.flow_s, train_crops.dense, val_crops.dense, cfg.flow);
    result.stage_l = train_flow_matching_sparse(result.bundle.flow_l, train_crops.sparse,
                                                val_crops.sparse, cfg.flow);
    fit_occupancy_decoder(result.bundle.decoders, train_crops.decoder);
    finetune_decoder(result.bundle.decoders, train_crops.decoder, val_crops.decoder, 400, 0.2,
                     cfg.flow.seed);
    return result;
}

/*----------------------------------- pairs -----------------------------------*/

void save_pairs_dir(const std::vector<EnhancerPair>& pairs, const std::string& dir) {
    ensure_dir(dir);
    std::ofstream mf(dir + "/manifest.txt", std::ios::trunc);
    if (!mf) {
        fail_data("cannot create pair manifest in " + dir);
    }
    for (size_t i = 0; i < pairs.size(); ++i) {
        const EnhancerPair& pair = pairs[i];
        std::string stem = format("pair_%04zu", i);
        save_volume(Volume::of(pair.parent), dir + "/" + stem + "_parent.lwvx");
        for (int j = 0; j < 8; ++j) {
            save_volume(Volume::of(pair.children[j]),
                        dir + "/" + stem + format("_child%d.lwvx", j));
        }
        mf << i << " " << pair.scene_id << " " << pair.label << " " << pair.crop_origin.x << " "
           << pair.crop_origin.y << " " << pair.crop_origin.z << " " << pair.crop_size << "\n";
    }
}

std::vector<EnhancerPair> load_pairs_dir(const std::string& dir) {
    std::ifstream mf(dir + "/manifest.txt");
    if (!mf) {
        fail_data("missing pair manifest in " + dir);
    }
    std::vector<EnhancerPair> pairs;
    std::string line;
    while (std::getline(mf, line)) {
        if (line.empty()) {
            continue;
        }
        std::istringstream ss(line);
        size_t id;
        EnhancerPair pair;
        if (!(ss >> id >> pair.scene_id >> pair.label >> pair.crop_origin.x >>
              pair.crop_origin.y >> pair.crop_origin.z >> pair.crop_size)) {
            fail_data("malformed pair manifest line: " + line);
        }
        std::string stem = format("pair_%04zu", id);
        Volume parent = load_volume(dir + "/" + stem + "_parent.lwvx");
        if (parent.kind != VolumeKind::sparse) {
            fail_data("pair parent volume is not sparse: " + stem);
        }
        pair.parent = std::move(parent.sparse);
        for (int j = 0; j < 8; ++j) {
            Volume child = load_volume(dir + "/" + stem + format("_child%d.lwvx", j));
            if (child.kind != VolumeKind::sparse) {
                fail_data("pair child volume is not sparse: " + stem);
            }
            pair.children[j] = std::move(child.sparse);
        }
        pairs.push_back(std::move(pair));
    }
    return pairs;
}

EnhancerPipelineResult finetune_enhancer_pipeline(ModelBundle& bundle, const SceneSet& data,
                                                  const EnhancerPipelineConfig& cfg,
                                                  const std::string& pairs_dir) {
    std::vector<std::pair<const DenseLatentGrid*, int>> scenes;
    scenes.reserve(data.scenes.size());
    for (size_t i = 0; i < data.scenes.size(); ++i) {
        scenes.emplace_back(&data.scenes[i], data.labels[i]);
    }
    EnhancerPipelineResult result;
    std::vector<EnhancerPair> pairs =
        build_pairs(scenes, bundle.cfg.channels, cfg.pairs, &result.stats);
    if (pairs.empty()) {
        fail_data("enhancer pair construction produced no pairs");
    }
    if (!pairs_dir.empty()) {
        save_pairs_dir(pairs, pairs_dir);
    }
    size_t val_count = std::max<size_t>(1, static_cast<size_t>(cfg.val_fraction * pairs.size()));
    if (val_count >= pairs.size()) {
        val_count = pairs.size() > 1 ? 1 : 0;
    }
    std::vector<EnhancerPair> val_pairs(pairs.end() - val_count, pairs.end());
    pairs.resize(pairs.size() - val_count);
    result.train_pairs = pairs.size();
    result.val_pairs = val_pairs.size();

    result.curve = finetune_enhancer(bundle.flow_l, bundle.fusion, pairs, cfg.train);
    if (!val_pairs.empty()) {
        result.val_conditional = enhancer_validation_loss(
            bundle.flow_l, bundle.fusion, val_pairs, cfg.train.seed, 4, false,
            cfg.train.threads);
        result.val_unconditional = enhancer_validation_loss(
            bundle.flow_l, bundle.fusion, val_pairs, cfg.train.seed, 4, true,
            cfg.train.threads);
    }
    return result;
}

std::vector<double> finetune_decoder_pipeline(ModelBundle& bundle, const SceneSet& data,
                                              const DecoderPipelineConfig& cfg) {
    auto [train_ids, val_ids] = split_scenes(data.scenes.size(), cfg.val_fraction);
    CropSets train_crops = make_crops(data, train_ids, bundle.cfg.native_size,
                                      bundle.cfg.channels, cfg.crops_per_scene, cfg.seed);
    CropSets val_crops = make_crops(data, val_ids, bundle.cfg.native_size, bundle.cfg.channels,
                                    std::max(1, cfg.crops_per_scene / 2),
                                    substream_seed(cfg.seed, stream::train, 33));
    return finetune_decoder(bundle.decoders, train_crops.decoder, val_crops.decoder, cfg.steps,
                            cfg.lr, cfg.seed);
}

/*----------------------------------- runs -----------------------------------*/

void sample_to_dir(const ModelBundle& bundle, const SegmentMap& map, const GridDims& dims,
                   const SamplerConfig& cfg, const std::string& out_dir) {
    ensure_dir(out_dir);
    GridDims latent_dims = dims;
    latent_dims.c = bundle.cfg.channels;
    DenseLatentGrid stage_s = sample_segment_guided(bundle.flow_s, map, latent_dims, cfg);
    WorldSample world = sample_world(bundle, map, dims, cfg);
    save_volume(Volume::of(std::move(stage_s)), out_dir + "/stage_s.lwvx");
    save_volume(Volume::of(world.occupancy), out_dir + "/occupancy.lwvx");
    save_volume(Volume::of(world.latent), out_dir + "/world.lwvx");
    save_ppm(render_top_view(bundle.decoders, world.latent), out_dir + "/top.ppm");
    save_ppm(render_side_view(bundle.decoders, world.latent), out_dir + "/side.ppm");
}

OptResult optimize_init_to_dir(const ModelBundle& bundle, const InitOptRunConfig& cfg,
                               const std::string& out_dir) {
    ensure_dir(out_dir);
    int cube = cfg.cube > 0 ? cfg.cube : bundle.cfg.native_size;
    GridDims dims{cube, cube, cube, bundle.cfg.channels};
    TargetConstraint constraint =
        make_scale_target(dims, cfg.ground_frac, cfg.exclude_frac, cfg.amplitude);
    std::vector<double> initial(dims.values());
    Rng rng(substream_seed(cfg.seed, stream::initopt));
    for (double& v : initial) {
        v = rng.normal();
    }
    OptResult result = optimize_initial_latent(bundle.flow_s, bundle.decoders,
                                               std::move(initial), dims, constraint, cfg.opt);
    std::vector<std::vector<double>> rows;
    rows.reserve(result.trace.size());
    for (const OptTraceRow& row : result.trace) {
        rows.push_back({static_cast<double>(row.step), row.loss, row.iou, row.dice});
    }
    write_csv(out_dir + "/trace.csv", "step,loss,iou,dice", rows);
    DenseLatentGrid latent(dims);
    for (size_t i = 0; i < result.latent.size(); ++i) {
        latent.data[i] = static_cast<float>(result.latent[i]);
    }
    save_volume(Volume::of(std::move(latent)), out_dir + "/optimized.lwvx");
    return result;
}

SeamReport eval_seam_to_csv(const Volume& volume, const EvalRunConfig& cfg,
                            const std::string& csv_path) {
    GridDims dims = volume.dims();
    WindowPlan plan = build_window_plan(dims, cfg.window, cfg.stride);
    SeamReport report;
    if (volume.kind == VolumeKind::dense) {
        report = seam_discontinuity(volume.dense, plan, cfg.seed);
    } else if (volume.kind == VolumeKind::sparse) {
        report = seam_discontinuity(volume.sparse, plan, cfg.seed);
    } else {
        fail_data("seam evaluation needs a dense or sparse volume");
    }
    write_csv(csv_path, "boundary_pairs,interior_pairs,boundary_mean,interior_mean,ratio",
              {{static_cast<double>(report.boundary_pairs),
                static_cast<double>(report.interior_pairs), report.boundary_mean,
                report.interior_mean, report.ratio}});
    return report;
}

RegionStatReport eval_region_to_csv(const SparseLatent& world, const SegmentMap& map,
                                    const EvalRunConfig& cfg,
                                    const std::vector<double>& reference,
                                    const std::string& csv_path) {
    GridDims dims = world.dims();
    GridDims mask_dims = dims;
    mask_dims.c = 1;
    std::vector<MaskVolume> masks = extrude_segment_map(map, mask_dims);
    OccupancyField occ(mask_dims, -1.0f);
    for (const Vox& p : world.positions()) {
        occ.values[voxel_index(mask_dims, p.x, p.y, p.z)] = 1.0f;
    }
    RegionStatReport report =
        region_fidelity(occ, world, masks, map.label_ids(), cfg.stat, reference);
    std::vector<std::vector<double>> rows;
    for (size_t k = 0; k < report.stats.size(); ++k) {
        std::vector<double> row{static_cast<double>(report.stats[k].label),
                                report.stats[k].value,
                                static_cast<double>(report.stats[k].active),
                                report.stats[k].defined ? 1.0 : 0.0};
        if (!report.deviation.empty()) {
            row.push_back(report.reference[k]);
            row.push_back(report.deviation[k]);
        }
        rows.push_back(std::move(row));
    }
    write_csv(csv_path,
              report.deviation.empty() ? "label,value,active,defined"
                                       : "label,value,active,defined,reference,deviation",
              rows);
    return report;
}

double eval_probe_to_file(const GridDims& dims, const SegmentMap* map, const EvalRunConfig& cfg,
                          const std::string& path) {
    WindowPlan plan = build_window_plan(dims, cfg.window, cfg.stride);
    double window_probe = normalization_probe_windows(plan, cfg.kernel_sigma, 1);
    double segment_probe = 0.0;
    if (map != nullptr) {
        segment_probe = normalization_probe_segments(*map, dims, cfg.mask_sigma);
    }
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        fail_data("cannot create file: " + path);
    }
    out << format("window_probe %.12g\n", window_probe);
    if (map != nullptr) {
        out << format("segment_probe %.12g\n", segment_probe);
    }
    return std::max(window_probe, segment_probe);
}

}  // namespace lw
