#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include <filesystem>

#include "archive.hpp"
#include "enhancer.hpp"
#include "oracles.hpp"
#include "pipeline.hpp"
#include "rng.hpp"
#include "scene.hpp"
#include "util.hpp"

using namespace lw;

namespace {

FlowModelConfig base_config() {
    FlowModelConfig cfg;
    cfg.channels = 4;
    cfg.emb_dim = 2;
    cfg.hidden = 8;
    cfg.patch_radius = 1;
    cfg.num_labels = 2;
    cfg.native_size = 16;
    return cfg;
}

std::vector<EnhancerPair> toy_pairs(int count, uint64_t seed, int lattice = 8) {
    std::vector<DenseLatentGrid> scenes;
    std::vector<std::pair<const DenseLatentGrid*, int>> refs;
    for (int i = 0; i < count; ++i) {
        scenes.push_back(
            generate_scene(i % 2, {2 * lattice + 8, 2 * lattice + 8, 2 * lattice + 8, 4},
                           substream_seed(seed, stream::scene, i)));
    }
    for (int i = 0; i < count; ++i) {
        refs.emplace_back(&scenes[i], i % 2);
    }
    PairBuildConfig cfg;
    cfg.lattice = lattice;
    cfg.crop_sizes = {2 * lattice};
    cfg.per_scene = 1;
    cfg.min_content = 16;
    cfg.seed = seed;
    return build_pairs(refs, 4, cfg);
}

SparseLatent random_sparse_cube(int n, int c, double density, Rng& rng) {
    std::vector<Vox> positions;
    std::vector<float> feats;
    for (int z = 0; z < n; ++z) {
        for (int y = 0; y < n; ++y) {
            for (int x = 0; x < n; ++x) {
                if (rng.uniform() >= density) {
                    continue;
                }
                positions.push_back({x, y, z});
                for (int ch = 0; ch < c; ++ch) {
                    feats.push_back(static_cast<float>(rng.normal()));
                }
            }
        }
    }
    return SparseLatent({n, n, n, c}, std::move(positions), std::move(feats));
}

}  // namespace

TEST_CASE("build_pairs: deterministic, all cubes satisfy min_content, provenance recorded") {
    std::vector<EnhancerPair> a = toy_pairs(4, 5);
    std::vector<EnhancerPair> b = toy_pairs(4, 5);
    REQUIRE(!a.empty());
    REQUIRE(a.size() == b.size());
    for (size_t i = 0; i < a.size(); ++i) {
        CHECK(a[i].parent.same_content(b[i].parent));
        CHECK(a[i].crop_origin == b[i].crop_origin);
        CHECK(a[i].crop_size == b[i].crop_size);
        CHECK(a[i].parent.size() >= 16);
        for (int j = 0; j < 8; ++j) {
            CHECK(a[i].children[j].same_content(b[i].children[j]));
            CHECK(a[i].children[j].size() >= 16);
        }
    }
}

TEST_CASE("build_pairs: a solid scene yields children consistent with the parent octants") {
    // every voxel occupied: the parent and all children are fully active and
    // the occupancy channel is exactly 1 everywhere
    DenseLatentGrid solid({24, 24, 24, 4}, 0.0f);
    for (size_t i = 0; i < solid.dims.voxels(); ++i) {
        solid.data[i * 4] = 1.0f;
        solid.data[i * 4 + 1] = 0.5f;
        solid.data[i * 4 + 2] = 0.5f;
        solid.data[i * 4 + 3] = 0.5f;
    }
    std::vector<std::pair<const DenseLatentGrid*, int>> refs{{&solid, 0}};
    PairBuildConfig cfg;
    cfg.lattice = 8;
    cfg.crop_sizes = {16};
    cfg.per_scene = 1;
    cfg.min_content = 8;
    cfg.seed = 3;
    auto pairs = build_pairs(refs, 4, cfg);
    REQUIRE(pairs.size() == 1);
    CHECK(pairs[0].parent.size() == 512);
    for (int j = 0; j < 8; ++j) {
        CHECK(pairs[0].children[j].size() == 512);
        for (size_t i = 0; i < pairs[0].children[j].size(); ++i) {
            CHECK(pairs[0].children[j].feature(i)[0] == 1.0f);
        }
    }
}

TEST_CASE("build_pairs: empty scene list is an error") {
    PairBuildConfig cfg;
    CHECK_THROWS_AS(build_pairs({}, 4, cfg), Error);
}

TEST_CASE("assemble_condition: identity mixer reproduces the noise at every position") {
    Rng rng(7);
    SparseLatent parent = random_sparse_cube(8, 4, 0.7, rng);
    SparseLatent adj = random_sparse_cube(8, 4, 0.5, rng);
    EnhancerCondition cond;
    cond.j = OctantIndex{3};
    cond.truncated = truncate_latent(parent, cond.j);
    cond.adjacents.push_back({AdjacentDirection{0, -1}, &adj});

    std::vector<Vox> targets;
    for (const Vox& q : cond.truncated.positions()) {
        targets.push_back({2 * q.x, 2 * q.y, 2 * q.z});
    }
    std::vector<double> state(targets.size() * 4);
    for (double& v : state) {
        v = rng.normal();
    }
    std::vector<double> adj_noise(adj.size() * 4);
    for (double& v : adj_noise) {
        v = rng.normal();
    }
    FusionLayer identity = init_identity(4, 4);
    AssembledCondition assembled =
        assemble_condition(targets, state, cond, identity, 8, adj_noise);
    REQUIRE(assembled.target_count == targets.size());
    REQUIRE(assembled.set.size() == targets.size() + adj.size());
    for (size_t i = 0; i < targets.size(); ++i) {
        for (int ch = 0; ch < 4; ++ch) {
            CHECK(assembled.set.feature(i)[ch] == state[i * 4 + ch]);
        }
    }
    for (size_t i = 0; i < adj.size(); ++i) {
        size_t e = targets.size() + i;
        for (int ch = 0; ch < 4; ++ch) {
            CHECK(assembled.set.feature(e)[ch] == adj_noise[i * 4 + ch]);
        }
        // adjacent positions keep their original coordinates, shifted across
        // the -x face
        CHECK(assembled.set.positions()[e].x == adj.positions()[i].x - 8);
    }
}

TEST_CASE("assemble_condition: no adjacents means exactly the target position set") {
    Rng rng(8);
    SparseLatent parent = random_sparse_cube(8, 4, 0.6, rng);
    EnhancerCondition cond;
    cond.j = OctantIndex{0};
    cond.truncated = truncate_latent(parent, cond.j);
    std::vector<Vox> targets;
    for (const Vox& q : cond.truncated.positions()) {
        targets.push_back({2 * q.x, 2 * q.y, 2 * q.z});
    }
    std::vector<double> state(targets.size() * 4, 0.1);
    FusionLayer identity = init_identity(4, 4);
    AssembledCondition assembled = assemble_condition(targets, state, cond, identity, 8, {});
    CHECK(assembled.set.size() == targets.size());
    CHECK(assembled.frame.clamp_lo == Vox{0, 0, 0});
    CHECK(assembled.frame.clamp_hi == Vox{8, 8, 8});
}

TEST_CASE("assemble_condition: parent interpolation matches the trilinear oracle") {
    Rng rng(9);
    SparseLatent parent = random_sparse_cube(8, 4, 0.5, rng);
    int j = 5;
    SparseLatent truncated = truncate_latent(parent, OctantIndex{j});
    std::vector<Vox> targets;
    for (const Vox& q : truncated.positions()) {
        for (int dz = 0; dz < 2; ++dz)
            for (int dy = 0; dy < 2; ++dy)
                for (int dx = 0; dx < 2; ++dx)
                    targets.push_back({2 * q.x + dx, 2 * q.y + dy, 2 * q.z + dz});
    }
    std::vector<double> interp = interp_parent_at(truncated, targets);
    for (size_t i = 0; i < targets.size(); ++i) {
        const Vox& p = targets[i];
        auto clampf = [](double v, double hi) { return std::min(std::max(v, 0.0), hi); };
        double qx = clampf((p.x + 0.5) / 2.0 - 0.5, 3.0);
        double qy = clampf((p.y + 0.5) / 2.0 - 0.5, 3.0);
        double qz = clampf((p.z + 0.5) / 2.0 - 0.5, 3.0);
        auto want = oracle::trilinear_ref(truncated, qx, qy, qz);
        for (int ch = 0; ch < 4; ++ch) {
            CHECK(std::fabs(interp[i * 4 + ch] - want[ch]) <= 1e-9);
        }
    }
}

TEST_CASE("enhancer_velocity: identity mixer with no adjacents equals the base velocity") {
    FlowModelConfig cfg = base_config();
    ToyFlowModel base = ToyFlowModel::random_init(cfg, 17);
    FusionLayer identity = init_identity(cfg.channels, cfg.channels);
    Rng rng(11);
    for (int trial = 0; trial < 100; ++trial) {
        SparseLatent parent = random_sparse_cube(8, cfg.channels, 0.4 + 0.4 * rng.uniform(), rng);
        int j = static_cast<int>(rng.uniform_index(8));
        EnhancerCondition cond;
        cond.j = OctantIndex{j};
        cond.truncated = truncate_latent(parent, cond.j);
        std::vector<Vox> targets;
        for (const Vox& q : cond.truncated.positions()) {
            targets.push_back({2 * q.x, 2 * q.y, 2 * q.z});
            if (q.x * 2 + 1 < 8) {
                targets.push_back({2 * q.x + 1, 2 * q.y, 2 * q.z});
            }
        }
        if (targets.empty()) {
            continue;
        }
        std::sort(targets.begin(), targets.end(), [](const Vox& a, const Vox& b) {
            return std::tie(a.z, a.y, a.x) < std::tie(b.z, b.y, b.x);
        });
        std::vector<double> state(targets.size() * cfg.channels);
        for (double& v : state) {
            v = rng.normal();
        }
        double t = rng.uniform();
        std::vector<double> v_enh = enhancer_velocity(base, identity, targets, state, t, 0, 8,
                                                      cond, {}, 1);

        FrameSet set(targets, state, cfg.channels);
        std::vector<double> v_base(targets.size() * cfg.channels);
        eval_velocity_sparse(base, set, EvalFrame::block({8, 8, 8, cfg.channels}), t,
                             base.embedding(0), {}, v_base.data(), 1);
        double worst = 0.0;
        for (size_t i = 0; i < v_base.size(); ++i) {
            worst = std::max(worst, std::fabs(v_enh[i] - v_base[i]));
        }
        CHECK(worst <= 1e-6);
    }
}

TEST_CASE("enhancer_velocity: adjacents shift target outputs only near the shared face") {
    FlowModelConfig cfg = base_config();
    ToyFlowModel base = ToyFlowModel::random_init(cfg, 18);
    FusionLayer identity = init_identity(cfg.channels, cfg.channels);
    Rng rng(13);
    SparseLatent parent = random_sparse_cube(8, cfg.channels, 0.9, rng);
    SparseLatent adj = random_sparse_cube(8, cfg.channels, 0.9, rng);
    int j = 1;  // bx = 1: the -x face neighbor is the flipped-bit sibling
    EnhancerCondition cond;
    cond.j = OctantIndex{j};
    cond.truncated = truncate_latent(parent, cond.j);
    std::vector<Vox> targets;
    for (const Vox& q : cond.truncated.positions()) {
        for (int dz = 0; dz < 2; ++dz)
            for (int dy = 0; dy < 2; ++dy)
                for (int dx = 0; dx < 2; ++dx)
                    targets.push_back({2 * q.x + dx, 2 * q.y + dy, 2 * q.z + dz});
    }
    std::sort(targets.begin(), targets.end(), [](const Vox& a, const Vox& b) {
        return std::tie(a.z, a.y, a.x) < std::tie(b.z, b.y, b.x);
    });
    std::vector<double> state(targets.size() * cfg.channels);
    for (double& v : state) {
        v = rng.normal();
    }
    double t = 0.4;
    std::vector<double> without =
        enhancer_velocity(base, identity, targets, state, t, 0, 8, cond, {}, 1);

    cond.adjacents.push_back({AdjacentDirection{0, -1}, &adj});
    std::vector<double> adj_noise(adj.size() * cfg.channels);
    for (double& v : adj_noise) {
        v = rng.normal();
    }
    std::vector<double> with =
        enhancer_velocity(base, identity, targets, state, t, 0, 8, cond, adj_noise, 1);
    REQUIRE(with.size() == without.size());
    for (size_t i = 0; i < targets.size(); ++i) {
        bool near_face = targets[i].x < cfg.patch_radius;  // the -x face is x = 0
        for (int ch = 0; ch < cfg.channels; ++ch) {
            if (!near_face) {
                CHECK(with[i * cfg.channels + ch] == without[i * cfg.channels + ch]);
            }
        }
    }
    // at least one face voxel must feel the neighbor
    double face_diff = 0.0;
    for (size_t i = 0; i < targets.size(); ++i) {
        if (targets[i].x == 0) {
            for (int ch = 0; ch < cfg.channels; ++ch) {
                face_diff = std::max(face_diff, std::fabs(with[i * cfg.channels + ch] -
                                                          without[i * cfg.channels + ch]));
            }
        }
    }
    CHECK(face_diff > 0.0);
}

TEST_CASE("finetune_enhancer: lr = 0 keeps the identity mixer and base-equal velocities") {
    FlowModelConfig cfg = base_config();
    ToyFlowModel base = ToyFlowModel::random_init(cfg, 19);
    FusionLayer fusion = init_identity(cfg.channels, cfg.channels);
    std::vector<EnhancerPair> pairs = toy_pairs(2, 21);
    EnhancerTrainConfig tc;
    tc.steps = 10;
    tc.lr = 0.0;
    tc.batch_positions = 64;
    FusionLayer before = fusion;
    finetune_enhancer(base, fusion, pairs, tc);
    CHECK(fusion.weight == before.weight);
    CHECK(fusion.bias == before.bias);
}

TEST_CASE("finetune_enhancer: base parameters are bit-identical before and after") {
    FlowModelConfig cfg = base_config();
    ModelBundle bundle = ModelBundle::random_init(cfg, 23);
    std::vector<EnhancerPair> pairs = toy_pairs(3, 29);
    uint64_t hash_before = bundle_base_hash(bundle);
    std::vector<double> params_before = bundle.flow_l.params;
    EnhancerTrainConfig tc;
    tc.steps = 60;
    tc.lr = 0.05;
    tc.batch_positions = 128;
    tc.seed = 5;
    std::vector<double> curve = finetune_enhancer(bundle.flow_l, bundle.fusion, pairs, tc);
    CHECK(curve.size() == 60);
    CHECK(bundle.flow_l.params == params_before);
    CHECK(bundle_base_hash(bundle) == hash_before);
    // the mixer must have moved off the identity
    FusionLayer identity = init_identity(cfg.channels, cfg.channels);
    CHECK(bundle.fusion.weight != identity.weight);
}

TEST_CASE("finetune_enhancer: empty pair set is an error") {
    FlowModelConfig cfg = base_config();
    ToyFlowModel base(cfg);
    FusionLayer fusion = init_identity(cfg.channels, cfg.channels);
    EnhancerTrainConfig tc;
    CHECK_THROWS_AS(finetune_enhancer(base, fusion, {}, tc), Error);
}

TEST_CASE("finetune_enhancer: adjacent-region targets never enter the loss") {
    // the loss reads targets only at target-cube positions; adjacent latents
    // contribute condition features, not regression targets. Re-running the
    // fine-tune with perturbed adjacent FEATURES changes the loss, while the
    // target tensor of adjacent octants is never consulted (loss is computed
    // from children[octant] only). This is a structural property; here we
    // check the observable half: validation losses with zeroed condition
    // columns ignore the adjacent features entirely at identity init.
    FlowModelConfig cfg = base_config();
    ToyFlowModel base = ToyFlowModel::random_init(cfg, 31);
    FusionLayer identity = init_identity(cfg.channels, cfg.channels);
    std::vector<EnhancerPair> pairs = toy_pairs(2, 33);
    double a = enhancer_validation_loss(base, identity, pairs, 7, 2, false, 1);
    // zeroing condition columns at identity changes nothing: they are zero
    double b = enhancer_validation_loss(base, identity, pairs, 7, 2, true, 1);
    CHECK(a == b);
}

TEST_CASE("sample_octants: deterministic and causal in the octant order") {
    FlowModelConfig cfg = base_config();
    ToyFlowModel base = ToyFlowModel::random_init(cfg, 37);
    FusionLayer fusion = init_identity(cfg.channels, cfg.channels);
    Rng rng(41);
    SparseLatent parent = random_sparse_cube(8, cfg.channels, 0.6, rng);
    EnhancerSampleConfig sc;
    sc.steps = 3;
    sc.seed = 11;
    SparseLatent merged_a = sample_octants(base, fusion, parent, sc);
    SparseLatent merged_b = sample_octants(base, fusion, parent, sc);
    CHECK(merged_a.same_content(merged_b));
    CHECK(merged_a.dims().d == 16);

    // octant 0 only conditions on the parent: re-running with a mixer that
    // distorts later octants' adjacency (adjacent_limit = 0) must not change it
    auto children_full = sample_octant_set(base, fusion, parent, sc);
    EnhancerSampleConfig no_adj = sc;
    no_adj.adjacent_limit = 0;
    auto children_none = sample_octant_set(base, fusion, parent, no_adj);
    CHECK(children_full[0].same_content(children_none[0]));

    // merged children occupy disjoint parent-frame regions (merge invariants)
    size_t total = 0;
    for (int j = 0; j < 8; ++j) {
        total += children_full[j].size();
    }
    CHECK(merged_a.size() == total);
}

TEST_CASE("sample_octants: an empty parent octant yields an empty child") {
    FlowModelConfig cfg = base_config();
    ToyFlowModel base = ToyFlowModel::random_init(cfg, 43);
    FusionLayer fusion = init_identity(cfg.channels, cfg.channels);
    // content only in the low corner: octant 7 stays empty
    SparseLatent parent({8, 8, 8, cfg.channels}, {{0, 0, 0}, {1, 1, 1}},
                        std::vector<float>(2 * cfg.channels, 0.5f));
    EnhancerSampleConfig sc;
    sc.steps = 2;
    auto children = sample_octant_set(base, fusion, parent, sc);
    CHECK(children[0].size() == 16);  // two refined cells
    CHECK(children[7].empty());
}

TEST_CASE("enhance_world: levels = 1 on a single tile equals sample_octants") {
    FlowModelConfig cfg = base_config();
    ToyFlowModel base = ToyFlowModel::random_init(cfg, 47);
    FusionLayer fusion = init_identity(cfg.channels, cfg.channels);
    Rng rng(49);
    SparseLatent world = random_sparse_cube(8, cfg.channels, 0.5, rng);
    EnhanceWorldConfig wc;
    wc.tile = 8;
    wc.sample.steps = 3;
    wc.sample.seed = 13;
    SparseLatent enhanced = enhance_world(base, fusion, world, 1, wc);

    EnhancerSampleConfig sc = wc.sample;
    sc.seed = substream_seed(wc.sample.seed, stream::enhancer, 0);
    SparseLatent direct = sample_octants(base, fusion, world, sc);
    CHECK(enhanced.same_content(direct));
}

TEST_CASE("enhance_world: levels = 2 multiplies dims by 4") {
    FlowModelConfig cfg = base_config();
    ToyFlowModel base = ToyFlowModel::random_init(cfg, 53);
    FusionLayer fusion = init_identity(cfg.channels, cfg.channels);
    Rng rng(59);
    SparseLatent world = random_sparse_cube(8, cfg.channels, 0.3, rng);
    EnhanceWorldConfig wc;
    wc.tile = 8;
    wc.sample.steps = 2;
    SparseLatent enhanced = enhance_world(base, fusion, world, 2, wc);
    CHECK(enhanced.dims().d == 32);
    CHECK(enhanced.dims().h == 32);
    CHECK(enhanced.dims().w == 32);
}

TEST_CASE("enhance_world: non-tileable dims name the required padding") {
    FlowModelConfig cfg = base_config();
    ToyFlowModel base(cfg);
    FusionLayer fusion = init_identity(cfg.channels, cfg.channels);
    SparseLatent world({12, 12, 12, cfg.channels}, {}, {});
    EnhanceWorldConfig wc;
    wc.tile = 8;
    CHECK_THROWS_WITH_AS(enhance_world(base, fusion, world, 1, wc),
                         doctest::Contains("16x16x16"), Error);
}

TEST_CASE("pairs: save / load round trip through the sparse volume format") {
    std::vector<EnhancerPair> pairs = toy_pairs(2, 61);
    REQUIRE(!pairs.empty());
    std::string dir = "test_pairs_dir";
    save_pairs_dir(pairs, dir);
    std::vector<EnhancerPair> back = load_pairs_dir(dir);
    REQUIRE(back.size() == pairs.size());
    for (size_t i = 0; i < pairs.size(); ++i) {
        CHECK(back[i].parent.same_content(pairs[i].parent));
        CHECK(back[i].label == pairs[i].label);
        CHECK(back[i].crop_origin == pairs[i].crop_origin);
        CHECK(back[i].crop_size == pairs[i].crop_size);
        for (int j = 0; j < 8; ++j) {
            CHECK(back[i].children[j].same_content(pairs[i].children[j]));
        }
    }
    std::filesystem::remove_all(dir);
}
