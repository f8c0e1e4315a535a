#include "lattice.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "util.hpp"

namespace lw {

void GridDims::validate() const {
    if (d < 1 || h < 1 || w < 1 || c < 1) {
        fail_data(format("grid dims must be positive, got d=%d h=%d w=%d c=%d", d, h, w, c));
    }
}

DenseLatentGrid::DenseLatentGrid(GridDims dims_, float fill) : dims(dims_) {
    dims.validate();
    data.assign(dims.values(), fill);
}

OccupancyField::OccupancyField(GridDims dims_, float fill, float threshold_)
    : dims(dims_), threshold(threshold_) {
    dims.c = 1;
    dims.validate();
    values.assign(dims.voxels(), fill);
}

size_t OccupancyField::active_count() const {
    size_t n = 0;
    for (float v : values) {
        if (v > threshold) {
            ++n;
        }
    }
    return n;
}

std::vector<Vox> OccupancyField::active_positions() const {
    std::vector<Vox> out;
    size_t i = 0;
    for (int z = 0; z < dims.d; ++z) {
        for (int y = 0; y < dims.h; ++y) {
            for (int x = 0; x < dims.w; ++x, ++i) {
                if (values[i] > threshold) {
                    out.push_back({x, y, z});
                }
            }
        }
    }
    return out;
}

static uint64_t pack_pos(const Vox& p) {
    return (static_cast<uint64_t>(static_cast<uint32_t>(p.z)) << 42) |
           (static_cast<uint64_t>(static_cast<uint32_t>(p.y)) << 21) |
           static_cast<uint64_t>(static_cast<uint32_t>(p.x));
}

SparseLatent::SparseLatent(GridDims dims, std::vector<Vox> positions, std::vector<float> features)
    : dims_(dims) {
    dims_.validate();
    if (features.size() != positions.size() * static_cast<size_t>(dims_.c)) {
        fail_data(format("sparse latent feature count %zu does not match %zu positions x %d channels",
                         features.size(), positions.size(), dims_.c));
    }
    // sort entries by (z, y, x) so iteration order is canonical
    std::vector<uint32_t> order(positions.size());
    for (uint32_t i = 0; i < order.size(); ++i) {
        order[i] = i;
    }
    std::sort(order.begin(), order.end(), [&](uint32_t a, uint32_t b) {
        const Vox& pa = positions[a];
        const Vox& pb = positions[b];
        return std::tie(pa.z, pa.y, pa.x) < std::tie(pb.z, pb.y, pb.x);
    });
    positions_.resize(positions.size());
    features_.resize(features.size());
    index_.reserve(positions.size() * 2);
    for (uint32_t rank = 0; rank < order.size(); ++rank) {
        const Vox& p = positions[order[rank]];
        if (!in_bounds(dims_, p.x, p.y, p.z)) {
            fail_data(format("sparse position (%d,%d,%d) out of bounds for %dx%dx%d", p.x, p.y,
                             p.z, dims_.d, dims_.h, dims_.w));
        }
        positions_[rank] = p;
        std::copy_n(features.data() + static_cast<size_t>(order[rank]) * dims_.c, dims_.c,
                    features_.data() + static_cast<size_t>(rank) * dims_.c);
        if (!index_.emplace(pack_pos(p), rank).second) {
            fail_data(format("duplicate sparse position (%d,%d,%d)", p.x, p.y, p.z));
        }
    }
}

SparseLatent SparseLatent::full_grid(const DenseLatentGrid& grid) {
    std::vector<Vox> positions;
    positions.reserve(grid.dims.voxels());
    for (int z = 0; z < grid.dims.d; ++z) {
        for (int y = 0; y < grid.dims.h; ++y) {
            for (int x = 0; x < grid.dims.w; ++x) {
                positions.push_back({x, y, z});
            }
        }
    }
    return SparseLatent(grid.dims, std::move(positions), grid.data);
}

ptrdiff_t SparseLatent::find(int x, int y, int z) const {
    auto it = index_.find(pack_pos({x, y, z}));
    return it == index_.end() ? -1 : static_cast<ptrdiff_t>(it->second);
}

bool SparseLatent::same_content(const SparseLatent& other) const {
    return dims_ == other.dims_ && positions_ == other.positions_ && features_ == other.features_;
}

std::vector<int> SegmentMap::label_ids() const {
    std::vector<int> ids;
    ids.reserve(prompts.size());
    for (const auto& [id, _] : prompts) {
        ids.push_back(id);
    }
    return ids;
}

void SegmentMap::validate() const {
    if (height < 1 || width < 1) {
        fail_data("segment map raster must be non-empty");
    }
    if (labels.size() != static_cast<size_t>(height) * width) {
        fail_data("segment map raster size mismatch");
    }
    if (prompts.empty()) {
        fail_data("segment map needs at least one label prompt");
    }
    std::set<int> missing;
    for (int v : labels) {
        if (prompts.find(v) == prompts.end()) {
            missing.insert(v);
        }
    }
    if (!missing.empty()) {
        std::string list;
        for (int v : missing) {
            list += (list.empty() ? "" : ", ") + std::to_string(v);
        }
        fail_data("segment map labels without a prompt entry: " + list);
    }
}

MaskVolume::MaskVolume(GridDims dims_, float fill) : dims(dims_) {
    dims.c = 1;
    dims.validate();
    weights.assign(dims.voxels(), fill);
}

/*----------------------------------- windows -----------------------------------*/

static std::vector<int> axis_origins(int extent, int window_size, int stride, const char* axis) {
    if (window_size > extent) {
        fail_data(format("axis %s extent %d smaller than window size %d", axis, extent,
                         window_size));
    }
    std::vector<int> origins;
    for (int pos = 0;; pos += stride) {
        int clamped = std::min(pos, extent - window_size);
        if (origins.empty() || origins.back() != clamped) {
            origins.push_back(clamped);
        }
        if (clamped == extent - window_size) {
            break;
        }
    }
    return origins;
}

WindowPlan build_window_plan(const GridDims& dims, int window_size, int stride) {
    dims.validate();
    if (window_size < 1) {
        fail_data("window size must be >= 1");
    }
    if (stride < 1 || stride > window_size) {
        fail_data(format("stride %d must lie in [1, window size %d]", stride, window_size));
    }
    WindowPlan plan;
    plan.dims = dims;
    plan.window_size = window_size;
    plan.stride = stride;
    auto xs = axis_origins(dims.w, window_size, stride, "w");
    auto ys = axis_origins(dims.h, window_size, stride, "h");
    auto zs = axis_origins(dims.d, window_size, stride, "d");
    double half = (window_size - 1) / 2.0;
    for (int z : zs) {
        for (int y : ys) {
            for (int x : xs) {
                plan.windows.push_back({{x, y, z}, {x + half, y + half, z + half}});
            }
        }
    }
    return plan;
}

std::vector<double> gaussian_window_weights(int window_size, double sigma) {
    if (window_size < 1) {
        fail_data("window size must be >= 1");
    }
    if (!(sigma > 0.0)) {
        fail_data("gaussian window sigma must be > 0");
    }
    std::vector<double> weights(static_cast<size_t>(window_size) * window_size * window_size);
    double center = (window_size - 1) / 2.0;
    double inv = 1.0 / (2.0 * sigma * sigma);
    size_t i = 0;
    for (int z = 0; z < window_size; ++z) {
        for (int y = 0; y < window_size; ++y) {
            for (int x = 0; x < window_size; ++x, ++i) {
                double dx = x - center;
                double dy = y - center;
                double dz = z - center;
                weights[i] = std::exp(-(dx * dx + dy * dy + dz * dz) * inv);
            }
        }
    }
    return weights;
}

/*----------------------------------- masks -----------------------------------*/

std::vector<MaskVolume> extrude_segment_map(const SegmentMap& map, const GridDims& dims) {
    map.validate();
    dims.validate();
    std::vector<int> ids = map.label_ids();
    std::unordered_map<int, int> id_to_slot;
    for (size_t k = 0; k < ids.size(); ++k) {
        id_to_slot[ids[k]] = static_cast<int>(k);
    }
    GridDims mask_dims = dims;
    mask_dims.c = 1;
    std::vector<MaskVolume> masks(ids.size(), MaskVolume(mask_dims));
    for (int y = 0; y < dims.h; ++y) {
        int row = y * map.height / dims.h;
        for (int x = 0; x < dims.w; ++x) {
            int col = x * map.width / dims.w;
            int slot = id_to_slot.at(map.label_at(row, col));
            for (int z = 0; z < dims.d; ++z) {
                masks[slot].weights[voxel_index(mask_dims, x, y, z)] = 1.0f;
            }
        }
    }
    return masks;
}

// reflective index into [0, n): ... 2 1 0 | 0 1 2 ... n-1 | n-1 n-2 ...
static int reflect_index(int i, int n) {
    if (n == 1) {
        return 0;
    }
    int period = 2 * n;
    int m = i % period;
    if (m < 0) {
        m += period;
    }
    return m < n ? m : period - 1 - m;
}

MaskVolume smooth_mask(const MaskVolume& mask, double sigma) {
    if (sigma < 0.0) {
        fail_data("smooth_mask sigma must be >= 0");
    }
    if (sigma == 0.0) {
        return mask;
    }
    int radius = static_cast<int>(std::ceil(3.0 * sigma));
    std::vector<double> kernel(2 * radius + 1);
    double sum = 0.0;
    for (int i = -radius; i <= radius; ++i) {
        kernel[i + radius] = std::exp(-(static_cast<double>(i) * i) / (2.0 * sigma * sigma));
        sum += kernel[i + radius];
    }
    for (double& k : kernel) {
        k /= sum;
    }

    const GridDims& dims = mask.dims;
    std::vector<double> cur(mask.weights.begin(), mask.weights.end());
    std::vector<double> next(cur.size());
    // pass order x, y, z
    for (int axis = 0; axis < 3; ++axis) {
        int extent = axis == 0 ? dims.w : axis == 1 ? dims.h : dims.d;
        for (int z = 0; z < dims.d; ++z) {
            for (int y = 0; y < dims.h; ++y) {
                for (int x = 0; x < dims.w; ++x) {
                    double acc = 0.0;
                    for (int o = -radius; o <= radius; ++o) {
                        int xx = x, yy = y, zz = z;
                        if (axis == 0) {
                            xx = reflect_index(x + o, extent);
                        } else if (axis == 1) {
                            yy = reflect_index(y + o, extent);
                        } else {
                            zz = reflect_index(z + o, extent);
                        }
                        acc += kernel[o + radius] * cur[voxel_index(dims, xx, yy, zz)];
                    }
                    next[voxel_index(dims, x, y, z)] = acc;
                }
            }
        }
        cur.swap(next);
    }
    MaskVolume out(dims);
    for (size_t i = 0; i < cur.size(); ++i) {
        out.weights[i] = static_cast<float>(std::clamp(cur[i], 0.0, 1.0));
    }
    return out;
}

/*----------------------------------- trilinear -----------------------------------*/

void trilinear_sample_sparse(const SparseLatent& s, double qx, double qy, double qz,
                             double* out) {
    const GridDims& dims = s.dims();
    if (qx < 0.0 || qy < 0.0 || qz < 0.0 || qx > dims.w - 1 || qy > dims.h - 1 ||
        qz > dims.d - 1) {
        fail_data(format("trilinear query (%g,%g,%g) out of bounds for %dx%dx%d", qx, qy, qz,
                         dims.d, dims.h, dims.w));
    }
    int x0 = static_cast<int>(std::floor(qx));
    int y0 = static_cast<int>(std::floor(qy));
    int z0 = static_cast<int>(std::floor(qz));
    double fx = qx - x0;
    double fy = qy - y0;
    double fz = qz - z0;
    std::fill_n(out, dims.c, 0.0);
    for (int corner = 0; corner < 8; ++corner) {
        int cx = corner & 1;
        int cy = (corner >> 1) & 1;
        int cz = (corner >> 2) & 1;
        double weight = (cx ? fx : 1.0 - fx) * (cy ? fy : 1.0 - fy) * (cz ? fz : 1.0 - fz);
        if (weight == 0.0) {
            continue;
        }
        ptrdiff_t idx = s.find(x0 + cx, y0 + cy, z0 + cz);
        if (idx < 0) {
            continue;  // absent corner contributes zero
        }
        const float* feat = s.feature(static_cast<size_t>(idx));
        for (int ch = 0; ch < dims.c; ++ch) {
            out[ch] += weight * feat[ch];
        }
    }
}

std::vector<double> trilinear_sample_sparse(const SparseLatent& s, double qx, double qy,
                                            double qz) {
    std::vector<double> out(s.dims().c);
    trilinear_sample_sparse(s, qx, qy, qz, out.data());
    return out;
}

/*----------------------------------- octants -----------------------------------*/

static void require_even(const GridDims& dims) {
    if (dims.d % 2 != 0 || dims.h % 2 != 0 || dims.w % 2 != 0) {
        fail_data(format("octant split needs even dims, got %dx%dx%d", dims.d, dims.h, dims.w));
    }
}

std::array<SparseLatent, 8> split_octants(const SparseLatent& s) {
    const GridDims& dims = s.dims();
    require_even(dims);
    GridDims half{dims.d / 2, dims.h / 2, dims.w / 2, dims.c};
    std::array<std::vector<Vox>, 8> positions;
    std::array<std::vector<float>, 8> features;
    for (size_t i = 0; i < s.size(); ++i) {
        const Vox& p = s.positions()[i];
        int bx = p.x >= half.w;
        int by = p.y >= half.h;
        int bz = p.z >= half.d;
        int j = OctantIndex::from_bits(bx, by, bz).j;
        positions[j].push_back({p.x - bx * half.w, p.y - by * half.h, p.z - bz * half.d});
        const float* feat = s.feature(i);
        features[j].insert(features[j].end(), feat, feat + dims.c);
    }
    std::array<SparseLatent, 8> out;
    for (int j = 0; j < 8; ++j) {
        out[j] = SparseLatent(half, std::move(positions[j]), std::move(features[j]));
    }
    return out;
}

SparseLatent merge_octants(const std::array<SparseLatent, 8>& parts) {
    const GridDims& half = parts[0].dims();
    for (const SparseLatent& part : parts) {
        if (!(part.dims() == half)) {
            fail_data("merge_octants: octant dimension mismatch");
        }
    }
    GridDims dims{half.d * 2, half.h * 2, half.w * 2, half.c};
    std::vector<Vox> positions;
    std::vector<float> features;
    for (int j = 0; j < 8; ++j) {
        OctantIndex oct{j};
        for (size_t i = 0; i < parts[j].size(); ++i) {
            const Vox& p = parts[j].positions()[i];
            positions.push_back(
                {p.x + oct.bx() * half.w, p.y + oct.by() * half.h, p.z + oct.bz() * half.d});
            const float* feat = parts[j].feature(i);
            features.insert(features.end(), feat, feat + dims.c);
        }
    }
    return SparseLatent(dims, std::move(positions), std::move(features));
}

SparseLatent truncate_latent(const SparseLatent& parent, OctantIndex j) {
    return split_octants(parent)[j.j];
}

std::vector<std::pair<AdjacentDirection, const SparseLatent*>> gather_adjacent(
    const std::map<int, SparseLatent>& siblings, OctantIndex j, int count_limit) {
    if (count_limit < 0 || count_limit > 3) {
        fail_data("gather_adjacent count_limit must lie in [0, 3]");
    }
    std::vector<std::pair<AdjacentDirection, const SparseLatent*>> out;
    for (int axis = 0; axis < 3 && static_cast<int>(out.size()) < count_limit; ++axis) {
        int neighbor = j.j ^ (1 << axis);
        auto it = siblings.find(neighbor);
        if (it == siblings.end()) {
            continue;
        }
        int my_bit = (j.j >> axis) & 1;
        // neighbor has the flipped bit: at -axis side when our bit is 1
        out.push_back({AdjacentDirection{axis, my_bit == 1 ? -1 : +1}, &it->second});
    }
    return out;
}

}  // namespace lw
