#ifndef LW_METRICS_HPP
#define LW_METRICS_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "flowmodel.hpp"
#include "lattice.hpp"

namespace lw {

// Cross-window-boundary discontinuity versus a size-matched interior baseline.
struct SeamReport {
    size_t boundary_pairs = 0;
    size_t interior_pairs = 0;
    double boundary_mean = 0.0;  // mean |first difference| across boundary planes
    double interior_mean = 0.0;  // same over a seeded random interior sample
    double ratio = 0.0;          // boundary_mean / interior_mean
};

// Boundary set: voxel-face pairs straddling any interior window-boundary
// plane of the plan. Interior set: an equally sized seeded random sample of
// non-boundary face pairs.
SeamReport seam_discontinuity(const DenseLatentGrid& latent, const WindowPlan& plan,
                              uint64_t seed);
SeamReport seam_discontinuity(const SparseLatent& latent, const WindowPlan& plan, uint64_t seed);

/*----------------------------------- region statistics -----------------------------------*/

enum class RegionStatKind {
    mean_height,        // mean active z / d within the region
    mean_feature_norm,  // mean L2 norm of active features within the region
};

struct RegionStat {
    int label = 0;
    double value = 0.0;
    size_t active = 0;   // active voxels in the region
    bool defined = false;  // false when the region holds no active voxels
};

struct RegionStatReport {
    RegionStatKind kind = RegionStatKind::mean_height;
    std::vector<RegionStat> stats;       // one per label
    std::vector<double> reference;       // aligned reference values (may be empty)
    std::vector<double> deviation;       // |value - reference| where both defined
};

// Per-label statistic of the world within each mask region; masks must
// partition the grid. reference (optional) must align with the label order.
RegionStatReport region_fidelity(const OccupancyField& occupancy, const SparseLatent& latent,
                                 const std::vector<MaskVolume>& masks,
                                 const std::vector<int>& labels, RegionStatKind kind,
                                 const std::vector<double>& reference);

/*----------------------------------- normalization probes -----------------------------------*/

// Feeds all-ones velocity fields through the window fusion path; returns
// max |out - 1|.
double normalization_probe_windows(const WindowPlan& plan, double kernel_sigma, int channels);

// Same through the segment fusion path at the given mask blur.
double normalization_probe_segments(const SegmentMap& map, const GridDims& dims, double sigma);

}  // namespace lw

#endif
