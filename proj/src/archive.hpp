#ifndef LW_ARCHIVE_HPP
#define LW_ARCHIVE_HPP

#include <cstdint>
#include <string>
#include <vector>

#include "flowmodel.hpp"
#include "lattice.hpp"

namespace lw {

// Voxel container "LWVX0001": magic, u8 kind, u32le dims (d, h, w, c), payload.
//   dense (0):     d*h*w*c f32le, row-major, channels fastest
//   sparse (1):    u64le count, then count x (u32le x, y, z + c x f32le)
//   occupancy (2): f32le threshold, then d*h*w f32le values (c = 1)
enum class VolumeKind : uint8_t { dense = 0, sparse = 1, occupancy = 2 };

struct Volume {
    VolumeKind kind = VolumeKind::dense;
    DenseLatentGrid dense;
    SparseLatent sparse;
    OccupancyField occupancy;

    static Volume of(DenseLatentGrid grid);
    static Volume of(SparseLatent latent);
    static Volume of(OccupancyField field);

    GridDims dims() const;
};

void save_volume(const Volume& volume, const std::string& path);
Volume load_volume(const std::string& path);

/*----------------------------------- model checkpoints -----------------------------------*/

// "LWMD0001": u32le version, u32le section count, then named sections
// (u32le name length, name bytes, u64le payload length, payload). Parameter
// payloads are f32le arrays in declaration order.
void save_bundle(const ModelBundle& bundle, const std::string& path);
ModelBundle load_bundle(const std::string& path);

// Serialized bytes of the base-model sections (flow_s, flow_l, dec_occ,
// dec_app), and their FNV-1a fingerprint. The enhancer mixer is excluded.
std::vector<uint8_t> serialize_base_params(const ModelBundle& bundle);
uint64_t bundle_base_hash(const ModelBundle& bundle);

/*----------------------------------- rasters and text -----------------------------------*/

// 8-bit binary PGM (P5) where pixel value = label id, or a plain-text grid of
// space-separated integer labels (one row per line).
SegmentMap load_label_raster(const std::string& path);

// prompt table: UTF-8 text, one `label_id=prompt text` per line; '#' comments
void load_prompt_table(const std::string& path, SegmentMap& map);

SegmentMap load_segment_map(const std::string& raster_path, const std::string& prompts_path);

struct Image {
    int width = 0;
    int height = 0;
    std::vector<uint8_t> rgb;  // 3 bytes per pixel, row-major
};

void save_ppm(const Image& image, const std::string& path);

// Orthographic projections of a decoded world. Top view looks down the z axis
// (one pixel per (y, x) column, max-density voxel wins); the side view looks
// along y (one pixel per (z, x), z up).
Image render_top_view(const ToyDecoders& dec, const SparseLatent& world);
Image render_side_view(const ToyDecoders& dec, const SparseLatent& world);

/*----------------------------------- CSV -----------------------------------*/

void write_csv(const std::string& path, const std::string& header,
               const std::vector<std::vector<double>>& rows);

// Loads a CSV written by write_csv (numeric cells, one header line).
std::vector<std::vector<double>> read_csv(const std::string& path);

}  // namespace lw

#endif
