#include "metrics.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "fusion.hpp"
#include "rng.hpp"
#include "util.hpp"

namespace lw {

namespace {

// interior plane coordinates p per axis: pairs (p-1, p) straddle a window face
std::array<std::set<int>, 3> boundary_planes(const WindowPlan& plan) {
    std::array<std::set<int>, 3> planes;
    auto extent = [&](int axis) {
        return axis == 0 ? plan.dims.w : axis == 1 ? plan.dims.h : plan.dims.d;
    };
    for (const Window& win : plan.windows) {
        int lo[3] = {win.origin.x, win.origin.y, win.origin.z};
        for (int axis = 0; axis < 3; ++axis) {
            if (lo[axis] > 0) {
                planes[axis].insert(lo[axis]);
            }
            int hi = lo[axis] + plan.window_size;
            if (hi < extent(axis)) {
                planes[axis].insert(hi);
            }
        }
    }
    return planes;
}

double feature_abs_diff(const float* a, const float* b, int c) {
    double acc = 0.0;
    for (int ch = 0; ch < c; ++ch) {
        acc += std::fabs(static_cast<double>(a[ch]) - static_cast<double>(b[ch]));
    }
    return acc / c;
}

}  // namespace

SeamReport seam_discontinuity(const DenseLatentGrid& latent, const WindowPlan& plan,
                              uint64_t seed) {
    const GridDims& dims = latent.dims;
    if (dims.d != plan.dims.d || dims.h != plan.dims.h || dims.w != plan.dims.w) {
        fail_data("seam_discontinuity: plan does not match latent dims");
    }
    auto planes = boundary_planes(plan);

    SeamReport report;
    double boundary_acc = 0.0;
    auto pair_diff = [&](int axis, int x, int y, int z) {
        int px = axis == 0 ? x - 1 : x;
        int py = axis == 1 ? y - 1 : y;
        int pz = axis == 2 ? z - 1 : z;
        return feature_abs_diff(latent.at(px, py, pz), latent.at(x, y, z), dims.c);
    };
    for (int axis = 0; axis < 3; ++axis) {
        for (int p : planes[axis]) {
            if (axis == 0) {
                for (int z = 0; z < dims.d; ++z)
                    for (int y = 0; y < dims.h; ++y) {
                        boundary_acc += pair_diff(0, p, y, z);
                        report.boundary_pairs++;
                    }
            } else if (axis == 1) {
                for (int z = 0; z < dims.d; ++z)
                    for (int x = 0; x < dims.w; ++x) {
                        boundary_acc += pair_diff(1, x, p, z);
                        report.boundary_pairs++;
                    }
            } else {
                for (int y = 0; y < dims.h; ++y)
                    for (int x = 0; x < dims.w; ++x) {
                        boundary_acc += pair_diff(2, x, y, p);
                        report.boundary_pairs++;
                    }
            }
        }
    }

    // size-matched random interior sample
    size_t axis_pairs[3] = {
        static_cast<size_t>(std::max(0, dims.w - 1)) * dims.h * dims.d,
        static_cast<size_t>(std::max(0, dims.h - 1)) * dims.w * dims.d,
        static_cast<size_t>(std::max(0, dims.d - 1)) * dims.w * dims.h,
    };
    size_t interior_total = 0;
    for (int axis = 0; axis < 3; ++axis) {
        size_t bp = planes[axis].size();
        size_t per_plane = axis == 0 ? static_cast<size_t>(dims.h) * dims.d
                           : axis == 1 ? static_cast<size_t>(dims.w) * dims.d
                                       : static_cast<size_t>(dims.w) * dims.h;
        interior_total += axis_pairs[axis] - bp * per_plane;
    }
    if (interior_total == 0) {
        fail_data("seam_discontinuity: no interior face pairs available");
    }
    size_t want = std::max<size_t>(report.boundary_pairs, 1);
    Rng rng(substream_seed(seed, stream::metrics));
    double interior_acc = 0.0;
    size_t total_pairs = axis_pairs[0] + axis_pairs[1] + axis_pairs[2];
    while (report.interior_pairs < want) {
        size_t pick = rng.uniform_index(total_pairs);
        int axis = 0;
        if (pick >= axis_pairs[0] + axis_pairs[1]) {
            axis = 2;
        } else if (pick >= axis_pairs[0]) {
            axis = 1;
        }
        int ux = axis == 0 ? 1 + static_cast<int>(rng.uniform_index(dims.w - 1))
                           : static_cast<int>(rng.uniform_index(dims.w));
        int uy = axis == 1 ? 1 + static_cast<int>(rng.uniform_index(dims.h - 1))
                           : static_cast<int>(rng.uniform_index(dims.h));
        int uz = axis == 2 ? 1 + static_cast<int>(rng.uniform_index(dims.d - 1))
                           : static_cast<int>(rng.uniform_index(dims.d));
        int upper = axis == 0 ? ux : axis == 1 ? uy : uz;
        if (planes[axis].count(upper) > 0) {
            continue;  // boundary pair, resample
        }
        interior_acc += pair_diff(axis, ux, uy, uz);
        report.interior_pairs++;
    }

    report.boundary_mean =
        report.boundary_pairs == 0 ? 0.0 : boundary_acc / report.boundary_pairs;
    report.interior_mean = interior_acc / report.interior_pairs;
    if (report.boundary_mean == 0.0) {
        report.ratio = 0.0;
    } else if (report.interior_mean == 0.0) {
        report.ratio = std::numeric_limits<double>::infinity();
    } else {
        report.ratio = report.boundary_mean / report.interior_mean;
    }
    return report;
}

SeamReport seam_discontinuity(const SparseLatent& latent, const WindowPlan& plan,
                              uint64_t seed) {
    const GridDims& dims = latent.dims();
    if (dims.d != plan.dims.d || dims.h != plan.dims.h || dims.w != plan.dims.w) {
        fail_data("seam_discontinuity: plan does not match latent dims");
    }
    auto planes = boundary_planes(plan);

    // adjacent-active pairs, split into boundary and interior
    std::vector<double> boundary_vals;
    std::vector<double> interior_vals;
    for (size_t i = 0; i < latent.size(); ++i) {
        const Vox& p = latent.positions()[i];
        for (int axis = 0; axis < 3; ++axis) {
            int nx = p.x + (axis == 0);
            int ny = p.y + (axis == 1);
            int nz = p.z + (axis == 2);
            if (!in_bounds(dims, nx, ny, nz)) {
                continue;
            }
            ptrdiff_t ni = latent.find(nx, ny, nz);
            if (ni < 0) {
                continue;
            }
            double diff = feature_abs_diff(latent.feature(i),
                                           latent.feature(static_cast<size_t>(ni)), dims.c);
            int upper = axis == 0 ? nx : axis == 1 ? ny : nz;
            if (planes[axis].count(upper) > 0) {
                boundary_vals.push_back(diff);
            } else {
                interior_vals.push_back(diff);
            }
        }
    }
    if (interior_vals.empty()) {
        fail_data("seam_discontinuity: no interior face pairs available");
    }

    SeamReport report;
    report.boundary_pairs = boundary_vals.size();
    double boundary_acc = 0.0;
    for (double v : boundary_vals) {
        boundary_acc += v;
    }
    Rng rng(substream_seed(seed, stream::metrics, 1));
    size_t want = std::max<size_t>(boundary_vals.size(), 1);
    double interior_acc = 0.0;
    for (size_t k = 0; k < want; ++k) {
        interior_acc += interior_vals[rng.uniform_index(interior_vals.size())];
    }
    report.interior_pairs = want;
    report.boundary_mean = report.boundary_pairs == 0 ? 0.0 : boundary_acc / report.boundary_pairs;
    report.interior_mean = interior_acc / want;
    if (report.boundary_mean == 0.0) {
        report.ratio = 0.0;
    } else if (report.interior_mean == 0.0) {
        report.ratio = std::numeric_limits<double>::infinity();
    } else {
        report.ratio = report.boundary_mean / report.interior_mean;
    }
    return report;
}

/*----------------------------------- region statistics -----------------------------------*/

RegionStatReport region_fidelity(const OccupancyField& occupancy, const SparseLatent& latent,
                                 const std::vector<MaskVolume>& masks,
                                 const std::vector<int>& labels, RegionStatKind kind,
                                 const std::vector<double>& reference) {
    if (masks.size() != labels.size() || masks.empty()) {
        fail_data("region_fidelity: masks and labels must align");
    }
    if (!reference.empty() && reference.size() != masks.size()) {
        fail_data("region_fidelity: reference stats must align with labels");
    }
    const GridDims& dims = occupancy.dims;
    RegionStatReport report;
    report.kind = kind;
    report.stats.resize(masks.size());
    std::vector<double> acc(masks.size(), 0.0);
    std::vector<size_t> count(masks.size(), 0);

    for (size_t i = 0; i < latent.size(); ++i) {
        const Vox& p = latent.positions()[i];
        for (size_t k = 0; k < masks.size(); ++k) {
            if (masks[k].at(p.x, p.y, p.z) != 1.0f) {
                continue;
            }
            double value = 0.0;
            if (kind == RegionStatKind::mean_height) {
                value = static_cast<double>(p.z) / dims.d;
            } else {
                double norm2 = 0.0;
                const float* f = latent.feature(i);
                for (int ch = 0; ch < latent.dims().c; ++ch) {
                    norm2 += static_cast<double>(f[ch]) * f[ch];
                }
                value = std::sqrt(norm2);
            }
            acc[k] += value;
            count[k]++;
            break;  // masks partition the grid
        }
    }
    for (size_t k = 0; k < masks.size(); ++k) {
        report.stats[k].label = labels[k];
        report.stats[k].active = count[k];
        report.stats[k].defined = count[k] > 0;
        report.stats[k].value = count[k] == 0 ? 0.0 : acc[k] / count[k];
        if (!report.stats[k].defined) {
            LW_LOG_WARN("region_fidelity: label %d region has no active voxels", labels[k]);
        }
    }
    if (!reference.empty()) {
        report.reference = reference;
        report.deviation.resize(masks.size(), 0.0);
        for (size_t k = 0; k < masks.size(); ++k) {
            report.deviation[k] =
                report.stats[k].defined ? std::fabs(report.stats[k].value - reference[k]) : 0.0;
        }
    }
    return report;
}

/*----------------------------------- normalization probes -----------------------------------*/

double normalization_probe_windows(const WindowPlan& plan, double kernel_sigma, int channels) {
    size_t block = static_cast<size_t>(plan.window_size) * plan.window_size * plan.window_size *
                   channels;
    std::vector<std::vector<double>> ones(plan.windows.size(), std::vector<double>(block, 1.0));
    std::vector<double> fused = fuse_window_velocities(plan, ones, kernel_sigma, channels);
    double worst = 0.0;
    for (double v : fused) {
        worst = std::max(worst, std::fabs(v - 1.0));
    }
    return worst;
}

double normalization_probe_segments(const SegmentMap& map, const GridDims& dims, double sigma) {
    GridDims mask_dims = dims;
    mask_dims.c = 1;
    std::vector<MaskVolume> hard = extrude_segment_map(map, mask_dims);
    std::vector<std::vector<float>> masks(hard.size());
    for (size_t k = 0; k < hard.size(); ++k) {
        masks[k] = sigma > 0.0 ? smooth_mask(hard[k], sigma).weights : hard[k].weights;
    }
    std::vector<std::vector<double>> ones(hard.size(),
                                          std::vector<double>(mask_dims.voxels(), 1.0));
    std::vector<double> fused = fuse_segment_velocities(masks, ones, mask_dims.voxels(), 1);
    double worst = 0.0;
    for (double v : fused) {
        worst = std::max(worst, std::fabs(v - 1.0));
    }
    return worst;
}

}  // namespace lw
