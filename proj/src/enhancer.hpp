#ifndef LW_ENHANCER_HPP
#define LW_ENHANCER_HPP

#include <array>
#include <cstdint>
#include <functional>
#include <map>
#include <vector>

#include "flowmodel.hpp"
#include "lattice.hpp"
#include "rng.hpp"

namespace lw {

// One training pair: a cube encoded at the working lattice (parent) and its 8
// metric octants re-encoded at the same lattice (children), so each child
// carries twice the detail per axis.
struct EnhancerPair {
    SparseLatent parent;
    std::array<SparseLatent, 8> children;
    int label = 0;
    Vox crop_origin{0, 0, 0};
    int crop_size = 0;  // metric edge of the parent cube
    int scene_id = 0;
};

struct EnhancerCondition {
    SparseLatent truncated;  // parent octant j, half the parent lattice
    std::vector<std::pair<AdjacentDirection, const SparseLatent*>> adjacents;
    OctantIndex j;
};

struct PairBuildConfig {
    int lattice = 16;
    std::vector<int> crop_sizes = {64, 128, 192, 256};
    int per_scene = 4;
    int min_content = 32;  // minimum active cells on the parent and every child
    int retries = 20;
    uint64_t seed = 0;
};

struct PairBuildStats {
    int emitted = 0;
    int rejected = 0;      // crops failing min_content
    int skipped_scenes = 0;
};

// Random cubic crops from the scenes, encoded into pairs. Crops whose parent
// or any child falls below min_content are resampled within the retry budget.
std::vector<EnhancerPair> build_pairs(
    const std::vector<std::pair<const DenseLatentGrid*, int>>& scenes, int channels,
    const PairBuildConfig& cfg, PairBuildStats* stats = nullptr);

/*----------------------------------- condition assembly -----------------------------------*/

// Parent features trilinearly sampled at the child positions (coarse
// coordinate (p + 0.5)/2 - 0.5, clamped to the truncated cube).
std::vector<double> interp_parent_at(const SparseLatent& truncated,
                                     const std::vector<Vox>& positions);

// Frame offset of an adjacent child cube in target-local coordinates.
Vox adjacent_offset(const AdjacentDirection& dir, int lattice);

// Union evaluation set: target entries first (mixed through F_theta with the
// interpolated parent), then adjacent entries at their offset positions (mixed
// with expanded noise). Raw mixer inputs are kept for the backward pass.
struct AssembledCondition {
    FrameSet set;
    size_t target_count = 0;
    EvalFrame frame;                  // target cube frame; clamp spans the union
    std::vector<double> noise_inputs;  // per entry, c values fed to F_theta
    std::vector<double> cond_inputs;   // per entry, c values fed to F_theta
};

AssembledCondition assemble_condition(const std::vector<Vox>& target_positions,
                                      const std::vector<double>& target_state,
                                      const EnhancerCondition& cond, const FusionLayer& layer,
                                      int lattice, const std::vector<double>& adjacent_noise);

// Total adjacent entry count (sizes the adjacent_noise buffer).
size_t adjacent_entry_count(const EnhancerCondition& cond);

// Base velocity on the assembled set, cropped to the target positions.
std::vector<double> enhancer_velocity(const ToyFlowModel& base, const FusionLayer& fusion,
                                      const std::vector<Vox>& target_positions,
                                      const std::vector<double>& target_state, double t,
                                      int label, int lattice, const EnhancerCondition& cond,
                                      const std::vector<double>& adjacent_noise, int threads);

/*----------------------------------- fine-tuning -----------------------------------*/

struct EnhancerTrainConfig {
    int steps = 1500;
    double lr = 0.02;
    int batch_positions = 1024;
    int adjacent_max = 3;  // adjacent count drawn uniformly from {0..adjacent_max}
    uint64_t seed = 0;
    int threads = 1;
};

// Masked flow-matching fine-tuning of the mixer layer only; the base model is
// read-only throughout. Returns the per-step loss curve.
std::vector<double> finetune_enhancer(const ToyFlowModel& base, FusionLayer& fusion,
                                      const std::vector<EnhancerPair>& pairs,
                                      const EnhancerTrainConfig& cfg);

// Masked flow-matching loss on frozen validation draws. zero_condition
// evaluates a copy of the mixer with the condition columns zeroed.
double enhancer_validation_loss(const ToyFlowModel& base, const FusionLayer& fusion,
                                const std::vector<EnhancerPair>& pairs, uint64_t seed,
                                int draws_per_pair, bool zero_condition, int threads);

/*----------------------------------- sampling -----------------------------------*/

struct EnhancerSampleConfig {
    int steps = 8;
    uint64_t seed = 0;
    int adjacent_limit = 3;
    int label = 0;
    int threads = 1;
};

// Supplies the already-enhanced cube across a tile face, or null.
using AdjacentProvider =
    std::function<const SparseLatent*(OctantIndex j, const AdjacentDirection& dir)>;

// Auto-regressive octant sampling, index order 0..7. Octant 0 conditions on
// the truncated parent only; later octants add already-generated face-adjacent
// octants. Returns the merged double-resolution latent.
SparseLatent sample_octants(const ToyFlowModel& base, const FusionLayer& fusion,
                            const SparseLatent& parent, const EnhancerSampleConfig& cfg,
                            const AdjacentProvider& external = nullptr);

// Per-octant outputs of the same process (used by the tiled driver).
std::array<SparseLatent, 8> sample_octant_set(const ToyFlowModel& base,
                                              const FusionLayer& fusion,
                                              const SparseLatent& parent,
                                              const EnhancerSampleConfig& cfg,
                                              const AdjacentProvider& external = nullptr);

struct EnhanceWorldConfig {
    int tile = 16;  // parent cube edge per tile; world dims must be divisible
    EnhancerSampleConfig sample;
    const SegmentMap* map = nullptr;  // optional per-tile label source
};

// Tiles the world into parent-size cubes and applies the octant sampler per
// tile, `levels` times. Tiles run in lexicographic origin order; cross-tile
// adjacency comes from already-enhanced neighbors. Output effective
// resolution is 2^levels times the input.
SparseLatent enhance_world(const ToyFlowModel& base, const FusionLayer& fusion,
                           const SparseLatent& world, int levels,
                           const EnhanceWorldConfig& cfg);

}  // namespace lw

#endif
