#ifndef LW_PIPELINE_HPP
#define LW_PIPELINE_HPP

#include <string>
#include <vector>

#include "archive.hpp"
#include "enhancer.hpp"
#include "flowmodel.hpp"
#include "fusion.hpp"
#include "initopt.hpp"
#include "metrics.hpp"

namespace lw {

/*----------------------------------- data generation -----------------------------------*/

struct GenDataConfig {
    int count = 24;
    GridDims scene_dims{32, 48, 48, 4};
    uint64_t seed = 0;
};

struct SceneRecord {
    int id = 0;
    std::string file;  // relative to the dataset directory
    int label = 0;
    uint64_t seed = 0;
};

// Writes scene_####.lwvx volumes plus manifest.txt (id file label d h w seed),
// alternating label families. Deterministic per seed.
std::vector<SceneRecord> gen_scenes_to_dir(const GenDataConfig& cfg, const std::string& out_dir);

struct SceneSet {
    std::vector<DenseLatentGrid> scenes;
    std::vector<int> labels;
};

SceneSet load_scene_dir(const std::string& dir);

/*----------------------------------- training -----------------------------------*/

struct TrainPipelineConfig {
    FlowModelConfig model;
    int crops_per_scene = 4;
    TrainConfig flow;          // shared by both stages
    double val_fraction = 0.2;  // scenes held out for validation
};

struct TrainPipelineResult {
    ModelBundle bundle;
    TrainCurves stage_s;
    TrainCurves stage_l;
};

// Encodes native-size crops, trains both stage models from random init, fits
// the occupancy decoder, and fine-tunes the appearance decoder briefly.
TrainPipelineResult train_pipeline(const SceneSet& data, const TrainPipelineConfig& cfg);

/*----------------------------------- enhancer + decoder -----------------------------------*/

// Pair volumes land in dir/pair_####_{parent,child0..7}.lwvx plus manifest.txt
// (id scene_id label origin_x origin_y origin_z crop_size).
void save_pairs_dir(const std::vector<EnhancerPair>& pairs, const std::string& dir);
std::vector<EnhancerPair> load_pairs_dir(const std::string& dir);

struct EnhancerPipelineConfig {
    PairBuildConfig pairs;
    EnhancerTrainConfig train;
    double val_fraction = 0.25;
};

struct EnhancerPipelineResult {
    std::vector<double> curve;
    PairBuildStats stats;
    size_t train_pairs = 0;
    size_t val_pairs = 0;
    double val_conditional = 0.0;
    double val_unconditional = 0.0;
};

// Builds pairs from the scenes (optionally persisting them), fine-tunes the
// bundle's mixer layer against its frozen stage-L model, and scores held-out
// pairs with and without the condition channels.
EnhancerPipelineResult finetune_enhancer_pipeline(ModelBundle& bundle, const SceneSet& data,
                                                  const EnhancerPipelineConfig& cfg,
                                                  const std::string& pairs_dir);

struct DecoderPipelineConfig {
    int crops_per_scene = 4;
    int steps = 600;
    double lr = 0.2;
    uint64_t seed = 0;
    double val_fraction = 0.25;
};

std::vector<double> finetune_decoder_pipeline(ModelBundle& bundle, const SceneSet& data,
                                              const DecoderPipelineConfig& cfg);

/*----------------------------------- runs -----------------------------------*/

// world.lwvx (sparse), occupancy.lwvx, stage_s.lwvx (dense), top.ppm, side.ppm
void sample_to_dir(const ModelBundle& bundle, const SegmentMap& map, const GridDims& dims,
                   const SamplerConfig& cfg, const std::string& out_dir);

struct InitOptRunConfig {
    OptConfig opt;
    int cube = 0;  // latent cube edge; 0 = the model's native size
    double ground_frac = 0.25;
    double exclude_frac = 0.6;
    double amplitude = 1.0;
    uint64_t seed = 0;
};

// trace.csv (step, loss, iou, dice) + optimized.lwvx; returns the trace result
OptResult optimize_init_to_dir(const ModelBundle& bundle, const InitOptRunConfig& cfg,
                               const std::string& out_dir);

struct EvalRunConfig {
    int window = 32;
    int stride = 16;
    double kernel_sigma = 8.0;
    double mask_sigma = 0.0;
    uint64_t seed = 0;
    RegionStatKind stat = RegionStatKind::mean_height;
};

// seam.csv for the given latent volume (dense or sparse)
SeamReport eval_seam_to_csv(const Volume& volume, const EvalRunConfig& cfg,
                            const std::string& csv_path);

// regions.csv: label, value, active, defined [, reference, deviation]
RegionStatReport eval_region_to_csv(const SparseLatent& world, const SegmentMap& map,
                                    const EvalRunConfig& cfg,
                                    const std::vector<double>& reference,
                                    const std::string& csv_path);

// probe.txt with both normalization probe values; returns their max
double eval_probe_to_file(const GridDims& dims, const SegmentMap* map, const EvalRunConfig& cfg,
                          const std::string& path);

void ensure_dir(const std::string& path);

}  // namespace lw

#endif
