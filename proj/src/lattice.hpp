#ifndef LW_LATTICE_HPP
#define LW_LATTICE_HPP

#include <array>
#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <unordered_map>
#include <vector>

namespace lw {

// Axis convention used throughout: dims are (d, h, w) = extents along
// (z, y, x). z is the vertical axis; segment maps are 2D rasters over (y, x)
// extruded along z. Dense data is row-major with channels fastest:
// index((z*h + y)*w + x)*c + ch.

struct GridDims {
    int d = 0;
    int h = 0;
    int w = 0;
    int c = 1;

    size_t voxels() const { return static_cast<size_t>(d) * h * w; }
    size_t values() const { return voxels() * c; }
    bool operator==(const GridDims&) const = default;

    void validate() const;
};

struct Vox {
    int x = 0;
    int y = 0;
    int z = 0;

    bool operator==(const Vox&) const = default;
    auto operator<=>(const Vox&) const = default;
};

inline size_t voxel_index(const GridDims& dims, int x, int y, int z) {
    return (static_cast<size_t>(z) * dims.h + y) * dims.w + x;
}

inline bool in_bounds(const GridDims& dims, int x, int y, int z) {
    return x >= 0 && x < dims.w && y >= 0 && y < dims.h && z >= 0 && z < dims.d;
}

struct DenseLatentGrid {
    GridDims dims;
    std::vector<float> data;  // dims.values() scalars

    DenseLatentGrid() = default;
    DenseLatentGrid(GridDims dims_, float fill = 0.0f);

    float* at(int x, int y, int z) { return data.data() + voxel_index(dims, x, y, z) * dims.c; }
    const float* at(int x, int y, int z) const {
        return data.data() + voxel_index(dims, x, y, z) * dims.c;
    }
};

struct OccupancyField {
    GridDims dims;  // c == 1
    std::vector<float> values;
    float threshold = 0.0f;

    OccupancyField() = default;
    explicit OccupancyField(GridDims dims_, float fill = 0.0f, float threshold_ = 0.0f);

    bool active(int x, int y, int z) const {
        return values[voxel_index(dims, x, y, z)] > threshold;
    }
    size_t active_count() const;
    std::vector<Vox> active_positions() const;  // sorted (z, y, x)
};

// Set of (position, feature) pairs on a 3D grid. Positions are unique and
// kept sorted by (z, y, x); a hash index supports O(1) lookup. Immutable
// after construction.
class SparseLatent {
public:
    SparseLatent() = default;
    SparseLatent(GridDims dims, std::vector<Vox> positions, std::vector<float> features);

    static SparseLatent full_grid(const DenseLatentGrid& grid);

    const GridDims& dims() const { return dims_; }
    size_t size() const { return positions_.size(); }
    bool empty() const { return positions_.empty(); }
    const std::vector<Vox>& positions() const { return positions_; }
    const std::vector<float>& features() const { return features_; }

    const float* feature(size_t i) const { return features_.data() + i * dims_.c; }

    // index of the entry at (x,y,z), or -1 when absent
    ptrdiff_t find(int x, int y, int z) const;

    bool same_content(const SparseLatent& other) const;

private:
    GridDims dims_;
    std::vector<Vox> positions_;
    std::vector<float> features_;
    std::unordered_map<uint64_t, uint32_t> index_;
};

struct SegmentMap {
    int height = 0;  // raster rows, mapped to grid y
    int width = 0;   // raster cols, mapped to grid x
    std::vector<int> labels;                // height*width, row-major
    std::map<int, std::string> prompts;     // label id -> prompt text

    int label_at(int row, int col) const { return labels[static_cast<size_t>(row) * width + col]; }
    int num_labels() const { return static_cast<int>(prompts.size()); }
    std::vector<int> label_ids() const;  // sorted ascending

    void validate() const;
};

struct MaskVolume {
    GridDims dims;  // c == 1
    std::vector<float> weights;

    MaskVolume() = default;
    explicit MaskVolume(GridDims dims_, float fill = 0.0f);

    float at(int x, int y, int z) const { return weights[voxel_index(dims, x, y, z)]; }
};

struct Window {
    Vox origin;
    std::array<double, 3> center;  // (x, y, z), origin + (size-1)/2
};

struct WindowPlan {
    GridDims dims;
    int window_size = 64;
    int stride = 32;
    std::vector<Window> windows;  // lexicographic by origin (z, then y, then x)

    bool contains(const Window& win, int x, int y, int z) const {
        return x >= win.origin.x && x < win.origin.x + window_size && y >= win.origin.y &&
               y < win.origin.y + window_size && z >= win.origin.z &&
               z < win.origin.z + window_size;
    }
};

// Octant index j = bx + 2*by + 4*bz over the 8 half-cubes of a parent cube.
struct OctantIndex {
    int j = 0;

    int bx() const { return j & 1; }
    int by() const { return (j >> 1) & 1; }
    int bz() const { return (j >> 2) & 1; }

    static OctantIndex from_bits(int bx, int by, int bz) { return {bx + 2 * by + 4 * bz}; }
};

struct AdjacentDirection {
    int axis = 0;  // 0 = x, 1 = y, 2 = z
    int sign = 0;  // +1: neighbor sits on the +axis side of the target, -1 on the -axis side
    bool operator==(const AdjacentDirection&) const = default;
};

/*----------------------------------- operations -----------------------------------*/

// Overlapping cubic windows covering the grid. Stride positions run 0, stride,
// 2*stride, ...; the last window per axis is clamped so its far face touches
// the grid boundary. Duplicate origins are removed.
WindowPlan build_window_plan(const GridDims& dims, int window_size, int stride);

// Unnormalized 3D Gaussian block: weight at offset o from the window center is
// exp(-|o|^2 / (2 sigma^2)).
std::vector<double> gaussian_window_weights(int window_size, double sigma);

// One binary mask per distinct label, extruded along z. The raster rescales to
// (h, w) by nearest neighbor. Masks partition the grid.
std::vector<MaskVolume> extrude_segment_map(const SegmentMap& map, const GridDims& dims);

// Truncated (radius ceil(3 sigma)) normalized Gaussian blur, separable, with
// reflective boundaries. sigma == 0 returns the input unchanged.
MaskVolume smooth_mask(const MaskVolume& mask, double sigma);

// Trilinear blend of the 8 cell-corner features at a fractional position.
// Corners absent from the sparse set contribute zero with their usual weight.
std::vector<double> trilinear_sample_sparse(const SparseLatent& s, double qx, double qy,
                                            double qz);
void trilinear_sample_sparse(const SparseLatent& s, double qx, double qy, double qz,
                             double* out);

std::array<SparseLatent, 8> split_octants(const SparseLatent& s);
SparseLatent merge_octants(const std::array<SparseLatent, 8>& parts);
SparseLatent truncate_latent(const SparseLatent& parent, OctantIndex j);

// Face-adjacent octants of j that are present in `siblings`, at most one per
// axis, in axis order x, y, z, truncated to count_limit.
std::vector<std::pair<AdjacentDirection, const SparseLatent*>> gather_adjacent(
    const std::map<int, SparseLatent>& siblings, OctantIndex j, int count_limit);

}  // namespace lw

#endif
