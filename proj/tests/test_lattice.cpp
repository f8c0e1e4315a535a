#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <set>

#include "lattice.hpp"
#include "oracles.hpp"
#include "rng.hpp"
#include "util.hpp"

using namespace lw;

namespace {

SparseLatent random_sparse(GridDims dims, double density, Rng& rng) {
    std::vector<Vox> positions;
    std::vector<float> feats;
    for (int z = 0; z < dims.d; ++z) {
        for (int y = 0; y < dims.h; ++y) {
            for (int x = 0; x < dims.w; ++x) {
                if (rng.uniform() >= density) {
                    continue;
                }
                positions.push_back({x, y, z});
                for (int ch = 0; ch < dims.c; ++ch) {
                    feats.push_back(static_cast<float>(rng.normal()));
                }
            }
        }
    }
    return SparseLatent(dims, std::move(positions), std::move(feats));
}

}  // namespace

TEST_CASE("window plan: grid equals window") {
    WindowPlan plan = build_window_plan({64, 64, 64, 1}, 64, 32);
    CHECK(plan.windows.size() == 1);
    CHECK(plan.windows[0].origin == Vox{0, 0, 0});
}

TEST_CASE("window plan: 96^3 gives 8 windows at origins {0,32}^3") {
    WindowPlan plan = build_window_plan({96, 96, 96, 1}, 64, 32);
    REQUIRE(plan.windows.size() == 8);
    std::set<int> origins;
    for (const Window& w : plan.windows) {
        origins.insert(w.origin.x);
        origins.insert(w.origin.y);
        origins.insert(w.origin.z);
        CHECK(w.origin.x + 64 <= 96);
    }
    CHECK(origins == std::set<int>{0, 32});
}

TEST_CASE("window plan: 100^3 clamps the last origin to 36") {
    WindowPlan plan = build_window_plan({100, 100, 100, 1}, 64, 32);
    CHECK(plan.windows.size() == 27);
    std::set<int> xs;
    for (const Window& w : plan.windows) {
        xs.insert(w.origin.x);
    }
    CHECK(xs == std::set<int>{0, 32, 36});
}

TEST_CASE("window plan: lexicographic ordering and full coverage") {
    GridDims dims{40, 48, 56, 1};
    WindowPlan plan = build_window_plan(dims, 16, 12);
    for (size_t i = 1; i < plan.windows.size(); ++i) {
        const Vox& a = plan.windows[i - 1].origin;
        const Vox& b = plan.windows[i].origin;
        CHECK(std::tie(a.z, a.y, a.x) < std::tie(b.z, b.y, b.x));
    }
    std::vector<int> covered(dims.voxels(), 0);
    for (const Window& w : plan.windows) {
        for (int z = w.origin.z; z < w.origin.z + 16; ++z) {
            for (int y = w.origin.y; y < w.origin.y + 16; ++y) {
                for (int x = w.origin.x; x < w.origin.x + 16; ++x) {
                    covered[voxel_index(dims, x, y, z)]++;
                }
            }
        }
    }
    for (int c : covered) {
        CHECK(c >= 1);
    }
}

TEST_CASE("window plan: error names the short axis") {
    CHECK_THROWS_WITH_AS(build_window_plan({10, 64, 64, 1}, 64, 32),
                         doctest::Contains("axis d"), Error);
}

TEST_CASE("gaussian window weights: center one, symmetric, positive") {
    auto weights = gaussian_window_weights(5, 1.5);
    CHECK(weights[2 * 25 + 2 * 5 + 2] == doctest::Approx(1.0));
    // reflection symmetry along x at the center row
    CHECK(weights[2 * 25 + 2 * 5 + 0] == doctest::Approx(weights[2 * 25 + 2 * 5 + 4]));
    for (double w : weights) {
        CHECK(w > 0.0);
    }
}

TEST_CASE("gaussian window weights: corner value matches the formula, even window") {
    int ws = 4;
    double sigma = 2.0;
    auto weights = gaussian_window_weights(ws, sigma);
    double center = (ws - 1) / 2.0;
    size_t i = 0;
    for (int z = 0; z < ws; ++z) {
        for (int y = 0; y < ws; ++y) {
            for (int x = 0; x < ws; ++x, ++i) {
                double d2 = (x - center) * (x - center) + (y - center) * (y - center) +
                            (z - center) * (z - center);
                CHECK(weights[i] == doctest::Approx(std::exp(-d2 / (2 * sigma * sigma))));
            }
        }
    }
}

TEST_CASE("gaussian window weights: sigma must be positive") {
    CHECK_THROWS_AS(gaussian_window_weights(4, 0.0), Error);
}

TEST_CASE("extrude: single label covers everything") {
    SegmentMap map;
    map.height = 2;
    map.width = 2;
    map.labels = {0, 0, 0, 0};
    map.prompts[0] = "all";
    auto masks = extrude_segment_map(map, {4, 4, 4, 1});
    REQUIRE(masks.size() == 1);
    for (float w : masks[0].weights) {
        CHECK(w == 1.0f);
    }
}

TEST_CASE("extrude: half/half labels give complementary masks") {
    SegmentMap map;
    map.height = 2;
    map.width = 2;
    map.labels = {0, 1, 0, 1};
    map.prompts[0] = "left";
    map.prompts[1] = "right";
    auto masks = extrude_segment_map(map, {4, 4, 4, 1});
    REQUIRE(masks.size() == 2);
    for (size_t i = 0; i < masks[0].weights.size(); ++i) {
        CHECK(masks[0].weights[i] + masks[1].weights[i] == 1.0f);
    }
}

TEST_CASE("extrude: three labels partition every voxel") {
    SegmentMap map;
    map.height = 3;
    map.width = 3;
    map.labels = {0, 0, 1, 2, 1, 1, 2, 2, 0};
    map.prompts[0] = "a";
    map.prompts[1] = "b";
    map.prompts[2] = "c";
    GridDims dims{5, 9, 9, 1};
    auto masks = extrude_segment_map(map, dims);
    REQUIRE(masks.size() == 3);
    for (size_t i = 0; i < dims.voxels(); ++i) {
        float sum = 0.0f;
        int ones = 0;
        for (const auto& m : masks) {
            sum += m.weights[i];
            ones += m.weights[i] == 1.0f;
        }
        CHECK(sum == 1.0f);
        CHECK(ones == 1);
    }
}

TEST_CASE("extrude: missing prompt lists the label") {
    SegmentMap map;
    map.height = 1;
    map.width = 2;
    map.labels = {0, 7};
    map.prompts[0] = "known";
    CHECK_THROWS_WITH_AS(extrude_segment_map(map, {2, 2, 2, 1}), doctest::Contains("7"), Error);
}

TEST_CASE("smooth_mask: sigma zero is the identity") {
    MaskVolume mask({4, 4, 4, 1});
    mask.weights[voxel_index(mask.dims, 1, 2, 3)] = 1.0f;
    MaskVolume out = smooth_mask(mask, 0.0);
    CHECK(out.weights == mask.weights);
}

TEST_CASE("smooth_mask: constant input stays constant") {
    MaskVolume mask({6, 5, 4, 1}, 1.0f);
    MaskVolume out = smooth_mask(mask, 2.5);
    for (float w : out.weights) {
        CHECK(w == doctest::Approx(1.0).epsilon(1e-9));
    }
}

TEST_CASE("smooth_mask: half-space matches the direct convolution oracle") {
    GridDims dims{6, 6, 12, 1};
    MaskVolume mask(dims);
    for (int z = 0; z < dims.d; ++z) {
        for (int y = 0; y < dims.h; ++y) {
            for (int x = 0; x < dims.w; ++x) {
                mask.weights[voxel_index(dims, x, y, z)] = x < 6 ? 1.0f : 0.0f;
            }
        }
    }
    double sigma = 2.0;
    MaskVolume out = smooth_mask(mask, sigma);
    // boundary plane column plus a few interior probes
    for (auto [x, y, z] : {std::tuple{6, 3, 2}, {5, 0, 0}, {0, 5, 5}, {11, 2, 3}, {6, 5, 0}}) {
        double want = oracle::smooth_ref_at(mask, sigma, x, y, z);
        CHECK(out.weights[voxel_index(dims, x, y, z)] == doctest::Approx(want).epsilon(1e-6));
    }
}

TEST_CASE("smooth_mask: partition of unity is preserved") {
    SegmentMap map;
    map.height = 2;
    map.width = 3;
    map.labels = {0, 1, 2, 2, 1, 0};
    map.prompts[0] = "a";
    map.prompts[1] = "b";
    map.prompts[2] = "c";
    GridDims dims{4, 6, 9, 1};
    auto masks = extrude_segment_map(map, dims);
    double sigma = 1.7;
    std::vector<MaskVolume> smooth;
    for (const auto& m : masks) {
        smooth.push_back(smooth_mask(m, sigma));
    }
    for (size_t i = 0; i < dims.voxels(); ++i) {
        double sum = 0.0;
        for (const auto& m : smooth) {
            sum += m.weights[i];
        }
        CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
    }
}

TEST_CASE("trilinear: exact corners and cell centers") {
    Rng rng(7);
    GridDims dims{4, 4, 4, 3};
    SparseLatent s = random_sparse(dims, 1.0, rng);  // fully dense
    // stored position is returned exactly
    ptrdiff_t idx = s.find(2, 1, 3);
    REQUIRE(idx >= 0);
    auto v = trilinear_sample_sparse(s, 2.0, 1.0, 3.0);
    for (int ch = 0; ch < 3; ++ch) {
        CHECK(v[ch] == doctest::Approx(s.feature(idx)[ch]));
    }
    // center of a full cell equals the mean of its corners
    auto center = trilinear_sample_sparse(s, 0.5, 0.5, 0.5);
    std::vector<double> mean(3, 0.0);
    for (int cz = 0; cz <= 1; ++cz) {
        for (int cy = 0; cy <= 1; ++cy) {
            for (int cx = 0; cx <= 1; ++cx) {
                ptrdiff_t ci = s.find(cx, cy, cz);
                REQUIRE(ci >= 0);
                for (int ch = 0; ch < 3; ++ch) {
                    mean[ch] += s.feature(ci)[ch] / 8.0;
                }
            }
        }
    }
    for (int ch = 0; ch < 3; ++ch) {
        CHECK(center[ch] == doctest::Approx(mean[ch]).epsilon(1e-12));
    }
}

TEST_CASE("trilinear: 1000 random queries match the brute-force oracle") {
    Rng rng(11);
    GridDims dims{6, 6, 6, 2};
    SparseLatent s = random_sparse(dims, 0.5, rng);
    for (int k = 0; k < 1000; ++k) {
        double qx = rng.uniform() * (dims.w - 1);
        double qy = rng.uniform() * (dims.h - 1);
        double qz = rng.uniform() * (dims.d - 1);
        auto got = trilinear_sample_sparse(s, qx, qy, qz);
        auto want = oracle::trilinear_ref(s, qx, qy, qz);
        for (int ch = 0; ch < dims.c; ++ch) {
            CHECK(std::fabs(got[ch] - want[ch]) <= 1e-6);
        }
    }
}

TEST_CASE("trilinear: out-of-bounds query is an error") {
    Rng rng(3);
    SparseLatent s = random_sparse({4, 4, 4, 1}, 0.6, rng);
    CHECK_THROWS_AS(trilinear_sample_sparse(s, 3.5, 1.0, 1.0), Error);
    CHECK_THROWS_AS(trilinear_sample_sparse(s, -0.1, 1.0, 1.0), Error);
}

TEST_CASE("octants: empty input splits into 8 empty octants") {
    SparseLatent empty(GridDims{4, 4, 4, 2}, {}, {});
    auto parts = split_octants(empty);
    for (const auto& p : parts) {
        CHECK(p.empty());
        CHECK(p.dims() == GridDims{2, 2, 2, 2});
    }
    CHECK(merge_octants(parts).empty());
}

TEST_CASE("octants: split/merge round trip is exact on random latents") {
    Rng rng(23);
    for (int trial = 0; trial < 50; ++trial) {
        GridDims dims{4 + 2 * static_cast<int>(rng.uniform_index(3)),
                      4 + 2 * static_cast<int>(rng.uniform_index(3)),
                      4 + 2 * static_cast<int>(rng.uniform_index(3)), 2};
        SparseLatent s = random_sparse(dims, rng.uniform(), rng);
        SparseLatent back = merge_octants(split_octants(s));
        CHECK(back.same_content(s));
    }
}

TEST_CASE("octants: corner voxel lands in octant 7 only") {
    GridDims dims{4, 4, 4, 1};
    SparseLatent s(dims, {{3, 3, 3}}, {2.5f});
    auto parts = split_octants(s);
    for (int j = 0; j < 8; ++j) {
        if (j == 7) {
            REQUIRE(parts[j].size() == 1);
            CHECK(parts[j].positions()[0] == Vox{1, 1, 1});
        } else {
            CHECK(parts[j].empty());
        }
    }
}

TEST_CASE("octants: odd dims are rejected") {
    SparseLatent s(GridDims{3, 4, 4, 1}, {}, {});
    CHECK_THROWS_AS(split_octants(s), Error);
}

TEST_CASE("truncate_latent equals the split output") {
    Rng rng(31);
    for (int trial = 0; trial < 20; ++trial) {
        SparseLatent s = random_sparse({6, 6, 6, 2}, 0.4, rng);
        auto parts = split_octants(s);
        for (int j = 0; j < 8; ++j) {
            CHECK(truncate_latent(s, OctantIndex{j}).same_content(parts[j]));
        }
    }
}

TEST_CASE("gather_adjacent: octant 0 has no predecessors") {
    std::map<int, SparseLatent> siblings;
    CHECK(gather_adjacent(siblings, OctantIndex{0}, 3).empty());
}

TEST_CASE("gather_adjacent: octant 7 sees 6 (x), 5 (y), 3 (z)") {
    std::map<int, SparseLatent> siblings;
    for (int j = 0; j < 7; ++j) {
        siblings.emplace(j, SparseLatent(GridDims{2, 2, 2, 1}, {}, {}));
    }
    auto adj = gather_adjacent(siblings, OctantIndex{7}, 3);
    REQUIRE(adj.size() == 3);
    CHECK(adj[0].first.axis == 0);
    CHECK(adj[0].second == &siblings.at(6));
    CHECK(adj[1].first.axis == 1);
    CHECK(adj[1].second == &siblings.at(5));
    CHECK(adj[2].first.axis == 2);
    CHECK(adj[2].second == &siblings.at(3));
    for (const auto& [dir, latent] : adj) {
        CHECK(dir.sign == -1);  // octant 7 sits in the upper half on every axis
    }
}

TEST_CASE("gather_adjacent: count limit zero") {
    std::map<int, SparseLatent> siblings;
    siblings.emplace(6, SparseLatent(GridDims{2, 2, 2, 1}, {}, {}));
    CHECK(gather_adjacent(siblings, OctantIndex{7}, 0).empty());
    CHECK(gather_adjacent(siblings, OctantIndex{7}, 1).size() == 1);
}
