#include "scene.hpp"

#include <algorithm>
#include <cmath>

#include "rng.hpp"
#include "util.hpp"

namespace lw {

namespace {

constexpr double kTau = 6.283185307179586;

void paint(DenseLatentGrid& scene, int x, int y, int z, float r, float g, float b) {
    float* v = scene.at(x, y, z);
    v[0] = 1.0f;
    v[1] = r;
    v[2] = g;
    v[3] = b;
}

DenseLatentGrid gen_hills(const GridDims& dims, Rng& rng) {
    DenseLatentGrid scene(dims, 0.0f);
    double base = rng.uniform(0.10, 0.24) * dims.d;
    double amp1 = rng.uniform(0.02, 0.06) * dims.d;
    double amp2 = rng.uniform(0.02, 0.06) * dims.d;
    double kx = 1.0 + rng.uniform_index(3);
    double ky = 1.0 + rng.uniform_index(3);
    double p1 = rng.uniform(0.0, kTau);
    double p2 = rng.uniform(0.0, kTau);
    float tint = static_cast<float>(rng.uniform(0.0, 0.12));
    for (int y = 0; y < dims.h; ++y) {
        for (int x = 0; x < dims.w; ++x) {
            double height = base + amp1 * std::sin(kTau * kx * x / dims.w + p1) +
                            amp2 * std::cos(kTau * ky * y / dims.h + p2);
            int top = std::clamp(static_cast<int>(height), 1, dims.d);
            for (int z = 0; z < top; ++z) {
                float shade = static_cast<float>(z) / std::max(1, top);
                paint(scene, x, y, z, 0.25f + tint, 0.40f + 0.30f * shade, 0.18f);
            }
        }
    }
    return scene;
}

DenseLatentGrid gen_towers(const GridDims& dims, Rng& rng) {
    DenseLatentGrid scene(dims, 0.0f);
    int ground = std::max(1, dims.d / 16);
    float tint = static_cast<float>(rng.uniform(0.0, 0.1));
    for (int y = 0; y < dims.h; ++y) {
        for (int x = 0; x < dims.w; ++x) {
            for (int z = 0; z < ground; ++z) {
                paint(scene, x, y, z, 0.35f, 0.35f, 0.35f + tint);
            }
        }
    }
    int count = 6 + static_cast<int>(rng.uniform_index(5));
    for (int i = 0; i < count; ++i) {
        int fw = 3 + static_cast<int>(rng.uniform_index(4));
        int fh = 3 + static_cast<int>(rng.uniform_index(4));
        int x0 = static_cast<int>(rng.uniform_index(std::max(1, dims.w - fw)));
        int y0 = static_cast<int>(rng.uniform_index(std::max(1, dims.h - fh)));
        int top = static_cast<int>(rng.uniform(0.65, 0.95) * dims.d);
        float gray = static_cast<float>(rng.uniform(0.40, 0.60));
        for (int y = y0; y < std::min(dims.h, y0 + fh); ++y) {
            for (int x = x0; x < std::min(dims.w, x0 + fw); ++x) {
                for (int z = 0; z < std::min(dims.d, top); ++z) {
                    paint(scene, x, y, z, gray, gray, std::min(1.0f, gray + 0.15f + tint));
                }
            }
        }
    }
    return scene;
}

}  // namespace

DenseLatentGrid generate_scene(int label, const GridDims& dims, uint64_t seed) {
    GridDims sdims = dims;
    sdims.c = 4;
    sdims.validate();
    Rng rng(seed);
    switch (label % kNumSceneFamilies) {
        case 0:
            return gen_hills(sdims, rng);
        default:
            return gen_towers(sdims, rng);
    }
}

double scene_mean_height(const DenseLatentGrid& scene) {
    double sum = 0.0;
    size_t count = 0;
    size_t i = 0;
    for (int z = 0; z < scene.dims.d; ++z) {
        for (int y = 0; y < scene.dims.h; ++y) {
            for (int x = 0; x < scene.dims.w; ++x, ++i) {
                if (scene.data[i * scene.dims.c] > 0.5f) {
                    sum += static_cast<double>(z) / scene.dims.d;
                    ++count;
                }
            }
        }
    }
    return count == 0 ? 0.0 : sum / count;
}

/*----------------------------------- encoder -----------------------------------*/

namespace {

struct CellStats {
    double rho = 0.0;
    double r = 0.5, g = 0.5, b = 0.5;
};

CellStats cell_stats(const DenseLatentGrid& scene, Vox origin, int factor, int cx, int cy,
                     int cz) {
    CellStats out;
    double occ_sum = 0.0;
    double r = 0.0, g = 0.0, b = 0.0;
    size_t occupied = 0;
    for (int dz = 0; dz < factor; ++dz) {
        for (int dy = 0; dy < factor; ++dy) {
            for (int dx = 0; dx < factor; ++dx) {
                int x = origin.x + cx * factor + dx;
                int y = origin.y + cy * factor + dy;
                int z = origin.z + cz * factor + dz;
                const float* v = scene.at(x, y, z);
                if (v[0] > 0.5f) {
                    occ_sum += 1.0;
                    r += v[1];
                    g += v[2];
                    b += v[3];
                    ++occupied;
                }
            }
        }
    }
    double total = static_cast<double>(factor) * factor * factor;
    out.rho = occ_sum / total;
    if (occupied > 0) {
        out.r = r / occupied;
        out.g = g / occupied;
        out.b = b / occupied;
    }
    return out;
}

void check_crop(const DenseLatentGrid& scene, Vox origin, int metric_size, int lattice) {
    if (lattice < 1 || metric_size < lattice || metric_size % lattice != 0) {
        fail_data(format("crop metric size %d must be a positive multiple of lattice %d",
                         metric_size, lattice));
    }
    if (origin.x < 0 || origin.y < 0 || origin.z < 0 ||
        origin.x + metric_size > scene.dims.w || origin.y + metric_size > scene.dims.h ||
        origin.z + metric_size > scene.dims.d) {
        fail_data(format("crop (%d,%d,%d)+%d exceeds scene %dx%dx%d", origin.x, origin.y,
                         origin.z, metric_size, scene.dims.d, scene.dims.h, scene.dims.w));
    }
}

void fill_feature(const CellStats& stats, float* feat, int channels) {
    feat[0] = static_cast<float>(2.0 * stats.rho - 1.0);
    if (channels > 1) feat[1] = static_cast<float>(stats.r - 0.5);
    if (channels > 2) feat[2] = static_cast<float>(stats.g - 0.5);
    if (channels > 3) feat[3] = static_cast<float>(stats.b - 0.5);
    for (int ch = 4; ch < channels; ++ch) {
        feat[ch] = 0.0f;
    }
}

}  // namespace

DenseLatentGrid encode_crop_dense(const DenseLatentGrid& scene, Vox origin, int metric_size,
                                  int lattice, int channels) {
    check_crop(scene, origin, metric_size, lattice);
    int factor = metric_size / lattice;
    DenseLatentGrid out(GridDims{lattice, lattice, lattice, channels});
    for (int z = 0; z < lattice; ++z) {
        for (int y = 0; y < lattice; ++y) {
            for (int x = 0; x < lattice; ++x) {
                CellStats stats = cell_stats(scene, origin, factor, x, y, z);
                fill_feature(stats, out.at(x, y, z), channels);
            }
        }
    }
    return out;
}

SparseLatent encode_crop_sparse(const DenseLatentGrid& scene, Vox origin, int metric_size,
                                int lattice, int channels) {
    check_crop(scene, origin, metric_size, lattice);
    int factor = metric_size / lattice;
    std::vector<Vox> positions;
    std::vector<float> features;
    std::vector<float> feat(channels);
    for (int z = 0; z < lattice; ++z) {
        for (int y = 0; y < lattice; ++y) {
            for (int x = 0; x < lattice; ++x) {
                CellStats stats = cell_stats(scene, origin, factor, x, y, z);
                if (stats.rho <= 0.5) {
                    continue;
                }
                positions.push_back({x, y, z});
                fill_feature(stats, feat.data(), channels);
                features.insert(features.end(), feat.begin(), feat.end());
            }
        }
    }
    return SparseLatent(GridDims{lattice, lattice, lattice, channels}, std::move(positions),
                        std::move(features));
}

DecoderCrop make_decoder_crop(const DenseLatentGrid& scene, Vox origin, int metric_size,
                              int lattice, int channels) {
    check_crop(scene, origin, metric_size, lattice);
    int factor = metric_size / lattice;
    DecoderCrop crop;
    crop.latent = encode_crop_dense(scene, origin, metric_size, lattice, channels);
    crop.scene = DenseLatentGrid(GridDims{lattice, lattice, lattice, 4});
    for (int z = 0; z < lattice; ++z) {
        for (int y = 0; y < lattice; ++y) {
            for (int x = 0; x < lattice; ++x) {
                CellStats stats = cell_stats(scene, origin, factor, x, y, z);
                float* v = crop.scene.at(x, y, z);
                v[0] = static_cast<float>(stats.rho);
                v[1] = static_cast<float>(stats.r);
                v[2] = static_cast<float>(stats.g);
                v[3] = static_cast<float>(stats.b);
            }
        }
    }
    return crop;
}

}  // namespace lw
