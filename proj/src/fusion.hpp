#ifndef LW_FUSION_HPP
#define LW_FUSION_HPP

#include <cstdint>
#include <vector>

#include "flowmodel.hpp"
#include "lattice.hpp"

namespace lw {

// Time-dependent mask blur: large early in sampling for soft region
// boundaries, exactly zero at t = 0 (hard mask at the final step).
struct SigmaSchedule {
    double sigma_max = 8.0;

    double sigma(double t) const { return sigma_max * t; }
};

struct SamplerConfig {
    int steps = 8;
    int window_size = 64;
    int stride = 32;           // window_size / 2 by default
    double kernel_sigma = 16.0;  // Gaussian fusion kernel width, in voxels
    uint64_t seed = 0;
    SigmaSchedule sigma_schedule;
    int threads = 1;
    bool plain = false;  // bypass windowing entirely (single full-grid pass)

    void validate() const;
};

/*----------------------------------- velocity fusion -----------------------------------*/

// Weighted average of per-window velocity blocks over the whole grid. Each
// block is window_size^3 x channels doubles in window-local layout. Voxels
// covered by exactly one window return that window's value bit-exactly.
std::vector<double> fuse_window_velocities(const WindowPlan& plan,
                                           const std::vector<std::vector<double>>& per_window_v,
                                           double kernel_sigma, int channels);

// Mask-weighted average of K per-label velocity fields (any shared length).
// masks[k][i] is the smoothed mask weight at slot i. Slots where exactly one
// mask is positive return that label's value bit-exactly.
std::vector<double> fuse_segment_velocities(const std::vector<std::vector<float>>& masks,
                                            const std::vector<std::vector<double>>& per_label_v,
                                            size_t slots, int channels);

/*----------------------------------- samplers -----------------------------------*/

// Gaussian-noise initial latent drawn from the stage-S stream of `seed`.
std::vector<double> initial_noise_dense(const GridDims& dims, uint64_t seed);

// Plain (non-fused, single-frame) rectified flow sampling from a given
// initial latent, integrating t: 1 -> 0 with uniform steps.
std::vector<double> sample_plain_from(const ToyFlowModel& model, int label,
                                      std::vector<double> state, const GridDims& dims, int steps,
                                      int threads);

// Multi-window fused sampling (one global noise field; windows are views).
DenseLatentGrid sample_latent_fusion(const ToyFlowModel& model, int label, const GridDims& dims,
                                     const SamplerConfig& cfg);

// Segment-map-guided sampling: per step, window-fused velocities per label are
// mixed by sigma_t-smoothed masks, then one global Euler step.
DenseLatentGrid sample_segment_guided(const ToyFlowModel& model, const SegmentMap& map,
                                      const GridDims& dims, const SamplerConfig& cfg);

/*----------------------------------- two-stage world -----------------------------------*/

struct WorldSample {
    OccupancyField occupancy;  // decoded stage-S scalar field
    SparseLatent latent;       // stage-L features at active positions
};

// Stage S: segment-guided dense sampling + occupancy decoding; stage L:
// segment-guided sparse sampling restricted to the active positions.
WorldSample sample_world(const ModelBundle& bundle, const SegmentMap& map, const GridDims& dims,
                         const SamplerConfig& cfg);

}  // namespace lw

#endif
