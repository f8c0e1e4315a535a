#ifndef LW_SCENE_HPP
#define LW_SCENE_HPP

#include <cstdint>

#include "flowmodel.hpp"
#include "lattice.hpp"

namespace lw {

// Scene grids are dense (occupancy, r, g, b) voxel fields. Label families are
// built to have well-separated height statistics:
//   0 "hills"  - rolling solid terrain, low mean active height
//   1 "towers" - thin ground slab plus tall blocks, high mean active height
constexpr int kNumSceneFamilies = 2;

DenseLatentGrid generate_scene(int label, const GridDims& dims, uint64_t seed);

// mean active z / d over occupied voxels; the family separation statistic
double scene_mean_height(const DenseLatentGrid& scene);

/*----------------------------------- encoder -----------------------------------*/

// Box-averages a cubic metric crop of the scene into a lattice^3 grid of model
// features. Cell coverage rho = mean occupancy; cell color = mean color over
// occupied voxels (0.5 when empty). Feature channels:
//   ch0 = 2 rho - 1, ch1..3 = mean color - 0.5, extra channels zero.
// A lattice cell is active when rho > 0.5, matching the occupancy decoder's
// threshold-at-zero convention.
DenseLatentGrid encode_crop_dense(const DenseLatentGrid& scene, Vox origin, int metric_size,
                                  int lattice, int channels);

SparseLatent encode_crop_sparse(const DenseLatentGrid& scene, Vox origin, int metric_size,
                                int lattice, int channels);

// latent + lattice-resolution scene targets, for decoder fitting
DecoderCrop make_decoder_crop(const DenseLatentGrid& scene, Vox origin, int metric_size,
                              int lattice, int channels);

}  // namespace lw

#endif
