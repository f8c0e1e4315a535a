#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "archive.hpp"
#include "flowmodel.hpp"
#include "oracles.hpp"
#include "rng.hpp"
#include "scene.hpp"
#include "util.hpp"

using namespace lw;

namespace {

FlowModelConfig tiny_config() {
    FlowModelConfig cfg;
    cfg.channels = 3;
    cfg.emb_dim = 2;
    cfg.hidden = 6;
    cfg.patch_radius = 1;
    cfg.num_labels = 3;
    cfg.native_size = 8;
    return cfg;
}

DenseLatentGrid random_grid(GridDims dims, Rng& rng) {
    DenseLatentGrid g(dims);
    for (float& v : g.data) {
        v = static_cast<float>(rng.normal());
    }
    return g;
}

}  // namespace

TEST_CASE("interpolate_noisy endpoints and arithmetic") {
    Rng rng(1);
    DenseLatentGrid s = random_grid({3, 3, 3, 2}, rng);
    DenseLatentGrid eps = random_grid({3, 3, 3, 2}, rng);
    CHECK(interpolate_noisy(s, eps, 0.0).data == s.data);
    CHECK(interpolate_noisy(s, eps, 1.0).data == eps.data);
    double sv = 4.0, ev = 0.0, out = 0.0;
    interpolate_noisy(&sv, &ev, 1, 0.25, &out);
    CHECK(out == doctest::Approx(3.0));
    DenseLatentGrid bad({2, 3, 3, 2});
    CHECK_THROWS_AS(interpolate_noisy(s, bad, 0.5), Error);
}

TEST_CASE("flow_matching_target elementwise oracle") {
    Rng rng(2);
    DenseLatentGrid s = random_grid({4, 3, 2, 2}, rng);
    DenseLatentGrid eps = random_grid({4, 3, 2, 2}, rng);
    DenseLatentGrid zero({4, 3, 2, 2});
    CHECK(flow_matching_target(zero, eps).data == eps.data);
    DenseLatentGrid self = flow_matching_target(s, s);
    for (float v : self.data) {
        CHECK(v == 0.0f);
    }
    DenseLatentGrid target = flow_matching_target(s, eps);
    for (size_t i = 0; i < target.data.size(); ++i) {
        CHECK(target.data[i] == eps.data[i] - s.data[i]);
    }
}

TEST_CASE("fusion layer: identity init passes noise through bit-exactly") {
    FusionLayer layer = init_identity(3, 4);
    CHECK(layer.weight.size() == 3 * 7);
    Rng rng(5);
    for (int trial = 0; trial < 100; ++trial) {
        double noise[3], cond[4], out[3];
        for (double& v : noise) v = rng.normal();
        for (double& v : cond) v = rng.normal();
        apply_fusion(layer, noise, cond, out);
        for (int i = 0; i < 3; ++i) {
            CHECK(out[i] == noise[i]);
        }
    }
}

TEST_CASE("fusion layer: zero inputs give the bias; random case matches a matmul oracle") {
    Rng rng(6);
    FusionLayer layer = init_identity(2, 3);
    for (double& w : layer.weight) w = rng.normal();
    for (double& b : layer.bias) b = rng.normal();
    double zero2[2] = {0, 0}, zero3[3] = {0, 0, 0}, out[2];
    apply_fusion(layer, zero2, zero3, out);
    CHECK(out[0] == layer.bias[0]);
    CHECK(out[1] == layer.bias[1]);

    double noise[2] = {rng.normal(), rng.normal()};
    double cond[3] = {rng.normal(), rng.normal(), rng.normal()};
    apply_fusion(layer, noise, cond, out);
    for (int i = 0; i < 2; ++i) {
        double want = layer.bias[i];
        double in[5] = {noise[0], noise[1], cond[0], cond[1], cond[2]};
        for (int k = 0; k < 5; ++k) {
            want += layer.weight[i * 5 + k] * in[k];
        }
        CHECK(out[i] == doctest::Approx(want).epsilon(1e-12));
    }
}

TEST_CASE("fusion layer: condition weights receive gradient signal at identity init") {
    // finite difference of a toy loss through the mixer shows training can
    // move the condition columns off zero
    FusionLayer layer = init_identity(2, 2);
    double noise[2] = {0.3, -0.7};
    double cond[2] = {1.1, 0.4};
    auto loss_of = [&](FusionLayer l) {
        double out[2];
        apply_fusion(l, noise, cond, out);
        return (out[0] - 2.0) * (out[0] - 2.0) + out[1] * out[1];
    };
    std::vector<double> gw(layer.weight.size(), 0.0), gb(layer.bias.size(), 0.0);
    double out[2];
    apply_fusion(layer, noise, cond, out);
    double gout[2] = {2.0 * (out[0] - 2.0), 2.0 * out[1]};
    apply_fusion_backward(layer, noise, cond, gout, gw, gb, nullptr, nullptr);
    // analytic vs finite differences on a condition-column weight
    size_t idx = 0 * 4 + 2;  // row 0, first condition input
    double h = 1e-6;
    FusionLayer plus = layer, minus = layer;
    plus.weight[idx] += h;
    minus.weight[idx] -= h;
    double fd = (loss_of(plus) - loss_of(minus)) / (2 * h);
    CHECK(gw[idx] == doctest::Approx(fd).epsilon(1e-5));
    CHECK(std::fabs(gw[idx]) > 1e-6);
}

TEST_CASE("velocity: deterministic, zero params give zero field") {
    FlowModelConfig cfg = tiny_config();
    ToyFlowModel zero(cfg);
    Rng rng(8);
    GridDims dims{5, 5, 5, cfg.channels};
    DenseLatentGrid block = random_grid(dims, rng);
    std::vector<double> v1(dims.values()), v2(dims.values());
    std::vector<double> emb(cfg.emb_dim, 0.3);
    eval_velocity_dense(zero, block.data.data(), dims, 0.5, emb.data(), v1.data(), 1);
    for (double x : v1) {
        CHECK(x == 0.0);
    }
    ToyFlowModel model = ToyFlowModel::random_init(cfg, 3);
    eval_velocity_dense(model, block.data.data(), dims, 0.5, emb.data(), v1.data(), 1);
    eval_velocity_dense(model, block.data.data(), dims, 0.5, emb.data(), v2.data(), 2);
    CHECK(v1 == v2);  // thread count must not change results
}

TEST_CASE("velocity: perturbation affects only the patch neighborhood") {
    FlowModelConfig cfg = tiny_config();
    ToyFlowModel model = ToyFlowModel::random_init(cfg, 4);
    Rng rng(9);
    GridDims dims{7, 7, 7, cfg.channels};
    DenseLatentGrid block = random_grid(dims, rng);
    std::vector<double> base(dims.values());
    const double* emb = model.embedding(1);
    eval_velocity_dense(model, block.data.data(), dims, 0.3, emb, base.data(), 1);

    DenseLatentGrid poked = block;
    Vox at{3, 3, 3};
    poked.at(at.x, at.y, at.z)[0] += 1.5f;
    std::vector<double> after(dims.values());
    eval_velocity_dense(model, poked.data.data(), dims, 0.3, emb, after.data(), 1);
    size_t i = 0;
    for (int z = 0; z < dims.d; ++z) {
        for (int y = 0; y < dims.h; ++y) {
            for (int x = 0; x < dims.w; ++x) {
                bool inside = std::abs(x - at.x) <= cfg.patch_radius &&
                              std::abs(y - at.y) <= cfg.patch_radius &&
                              std::abs(z - at.z) <= cfg.patch_radius;
                for (int ch = 0; ch < dims.c; ++ch, ++i) {
                    if (!inside) {
                        CHECK(after[i] == base[i]);
                    }
                }
            }
        }
    }
    // the poked voxel itself must respond
    size_t at_idx = voxel_index(dims, at.x, at.y, at.z) * dims.c;
    CHECK(after[at_idx] != base[at_idx]);
}

TEST_CASE("velocity: sparse full-grid evaluation matches the dense path bit-exactly") {
    FlowModelConfig cfg = tiny_config();
    ToyFlowModel model = ToyFlowModel::random_init(cfg, 5);
    Rng rng(10);
    GridDims dims{4, 5, 6, cfg.channels};
    DenseLatentGrid block = random_grid(dims, rng);
    std::vector<double> dense_v(dims.values());
    eval_velocity_dense(model, block.data.data(), dims, 0.7, model.embedding(0), dense_v.data(),
                        1);

    SparseLatent full = SparseLatent::full_grid(block);
    std::vector<double> feats(full.features().begin(), full.features().end());
    FrameSet set(full.positions(), std::move(feats), dims.c);
    std::vector<double> sparse_v(set.size() * dims.c);
    eval_velocity_sparse(model, set, EvalFrame::block(dims), 0.7, model.embedding(0), {},
                         sparse_v.data(), 1);
    // SparseLatent sorts (z, y, x), matching the dense layout
    CHECK(sparse_v == dense_v);
}

TEST_CASE("euler_step: arithmetic, linearity, convergence order") {
    double s = 1.0, v = 2.0;
    euler_step(&s, &v, 1, 0.5);
    CHECK(s == 0.0);

    // linearity in both arguments
    Rng rng(12);
    double a = 2.5;
    std::vector<double> s1(10), s2(10), vv(10);
    for (size_t i = 0; i < 10; ++i) {
        s1[i] = rng.normal();
        s2[i] = a * s1[i];
        vv[i] = rng.normal();
    }
    std::vector<double> av(vv);
    for (double& x : av) {
        x *= a;
    }
    euler_step(s1.data(), vv.data(), 10, 0.25);
    euler_step(s2.data(), av.data(), 10, 0.25);
    for (size_t i = 0; i < 10; ++i) {
        CHECK(s2[i] == doctest::Approx(a * s1[i]).epsilon(1e-12));
    }

    // Straight-path exactness: for a single data point the optimal field
    // v = eps - s is constant along the path and Euler recovers s exactly.
    {
        double s0 = 0.8, eps = -0.4;
        double x = eps;
        int steps = 7;
        double dt = 1.0 / steps;
        for (int k = 0; k < steps; ++k) {
            double vel = eps - s0;
            euler_step(&x, &vel, 1, dt);
        }
        CHECK(x == doctest::Approx(s0).epsilon(1e-12));
    }

    // Curved field: the optimal velocity of a two-point data mixture bends the
    // trajectory, so the Euler endpoint error shrinks linearly as dt halves.
    auto mixture_velocity = [](double x, double t) {
        double m = 1.0;
        double la = -(x - (1.0 - t) * m) * (x - (1.0 - t) * m) / (2 * t * t);
        double lb = -(x + (1.0 - t) * m) * (x + (1.0 - t) * m) / (2 * t * t);
        double peak = std::max(la, lb);
        double wa = std::exp(la - peak);
        double wb = std::exp(lb - peak);
        double mean_s = m * (wa - wb) / (wa + wb);
        return (x - mean_s) / t;
    };
    // stop short of t = 0, where this field's final step snaps onto the mode
    auto integrate = [&](int steps) {
        double x = 0.35;  // fixed "noise" draw
        double t_end = 0.25;
        double dt = (1.0 - t_end) / steps;
        for (int k = 0; k < steps; ++k) {
            double t = 1.0 - k * dt;
            double vel = mixture_velocity(x, t);
            euler_step(&x, &vel, 1, dt);
        }
        return x;
    };
    double reference = integrate(1 << 16);
    double e1 = std::fabs(integrate(64) - reference);
    double e2 = std::fabs(integrate(128) - reference);
    CHECK(e1 / e2 > 1.6);
    CHECK(e1 / e2 < 2.5);
}

TEST_CASE("training: lr = 0 leaves parameters unchanged, flat curve") {
    FlowModelConfig cfg = tiny_config();
    ToyFlowModel model = ToyFlowModel::random_init(cfg, 6);
    std::vector<double> before = model.params;
    Rng rng(13);
    std::vector<DenseTrainItem> data;
    data.push_back({random_grid({8, 8, 8, cfg.channels}, rng), 0});
    TrainConfig tc;
    tc.steps = 20;
    tc.lr = 0.0;
    tc.batch_voxels = 64;
    tc.val_every = 0;
    TrainCurves curves = train_flow_matching(model, data, {}, tc);
    CHECK(model.params == before);
    for (size_t i = 1; i < curves.loss.size(); ++i) {
        // same item, same draws differ, but parameters never move
        CHECK(std::isfinite(curves.loss[i]));
    }
}

TEST_CASE("training: empty dataset is an error") {
    FlowModelConfig cfg = tiny_config();
    ToyFlowModel model(cfg);
    TrainConfig tc;
    CHECK_THROWS_AS(train_flow_matching(model, {}, {}, tc), Error);
    CHECK_THROWS_AS(train_flow_matching_sparse(model, {}, {}, tc), Error);
}

TEST_CASE("training: constant latent dataset reaches < 10% of the initial loss") {
    FlowModelConfig cfg = tiny_config();
    cfg.hidden = 24;
    ToyFlowModel model = ToyFlowModel::random_init(cfg, 7);
    DenseLatentGrid latent({8, 8, 8, cfg.channels});
    for (size_t i = 0; i < latent.data.size(); ++i) {
        latent.data[i] = static_cast<float>(1.1 + 0.3 * (i % cfg.channels));
    }
    std::vector<DenseTrainItem> data;
    data.push_back({latent, 1});
    TrainConfig tc;
    tc.steps = 2000;
    tc.lr = 0.08;
    tc.batch_voxels = 512;
    tc.seed = 3;
    tc.val_every = 0;
    TrainCurves curves = train_flow_matching(model, data, {}, tc);
    double initial = curves.loss[0];  // computed before the first update
    double tail = 0.0;
    for (int i = 0; i < 100; ++i) {
        tail += curves.loss[curves.loss.size() - 1 - i] / 100.0;
    }
    CHECK(tail < 0.10 * initial);
}

TEST_CASE("training: analytic gradients match finite differences (rel err <= 1e-4)") {
    FlowModelConfig cfg = tiny_config();
    ToyFlowModel model = ToyFlowModel::random_init(cfg, 8);
    Rng rng(14);
    DenseLatentGrid s = random_grid({6, 6, 6, cfg.channels}, rng);
    std::vector<double> eps(s.data.size());
    for (double& v : eps) {
        v = rng.normal();
    }
    std::vector<size_t> ids;
    for (int k = 0; k < 40; ++k) {
        ids.push_back(rng.uniform_index(s.dims.voxels()));
    }
    double t = 0.37;
    int label = 2;
    std::vector<double> grads(model.param_count(), 0.0);
    flow_loss_dense(model, s, label, t, eps, ids, &grads);

    Rng pick(15);
    for (int trial = 0; trial < 20; ++trial) {
        size_t pi = pick.uniform_index(model.param_count());
        double h = 1e-5;
        ToyFlowModel plus = model, minus = model;
        plus.params[pi] += h;
        minus.params[pi] -= h;
        double fd = (flow_loss_dense(plus, s, label, t, eps, ids, nullptr) -
                     flow_loss_dense(minus, s, label, t, eps, ids, nullptr)) /
                    (2 * h);
        if (std::fabs(fd) < 1e-12 && std::fabs(grads[pi]) < 1e-12) {
            continue;  // untouched embedding rows
        }
        CHECK(oracle::rel_err(grads[pi], fd) <= 1e-4);
    }
}

TEST_CASE("training: identical seeds give identical loss curves") {
    FlowModelConfig cfg = tiny_config();
    Rng rng(16);
    std::vector<DenseTrainItem> data;
    data.push_back({random_grid({8, 8, 8, cfg.channels}, rng), 0});
    data.push_back({random_grid({8, 8, 8, cfg.channels}, rng), 1});
    TrainConfig tc;
    tc.steps = 50;
    tc.lr = 0.05;
    tc.batch_voxels = 128;
    tc.seed = 42;
    tc.val_every = 0;
    ToyFlowModel m1 = ToyFlowModel::random_init(cfg, 9);
    ToyFlowModel m2 = ToyFlowModel::random_init(cfg, 9);
    TrainCurves c1 = train_flow_matching(m1, data, {}, tc);
    TrainCurves c2 = train_flow_matching(m2, data, {}, tc);
    CHECK(c1.loss == c2.loss);
    CHECK(m1.params == m2.params);
}

TEST_CASE("decode_occupancy: all-positive, all-negative, sign oracle") {
    ToyDecoders dec;
    dec.channels = 2;
    dec.occ_w = {1.0, -0.5};
    dec.occ_b = 0.1;
    dec.app_w.assign(8, 0.0);
    dec.app_b.assign(4, 0.0);
    Rng rng(17);
    DenseLatentGrid grid = random_grid({4, 4, 4, 2}, rng);
    OccupancyField occ = decode_occupancy(dec, grid);
    size_t active = 0;
    for (size_t i = 0; i < grid.dims.voxels(); ++i) {
        double v = dec.occ_b + dec.occ_w[0] * grid.data[2 * i] + dec.occ_w[1] * grid.data[2 * i + 1];
        CHECK((occ.values[i] > 0.0f) == (v > 0.0));
        active += v > 0.0;
    }
    CHECK(occ.active_count() == active);

    DenseLatentGrid pos({3, 3, 3, 2}, 1.0f);
    dec.occ_w = {1.0, 1.0};
    dec.occ_b = 0.0;
    CHECK(decode_occupancy(dec, pos).active_count() == 27);
    DenseLatentGrid neg({3, 3, 3, 2}, -1.0f);
    CHECK(decode_occupancy(dec, neg).active_count() == 0);
}

TEST_CASE("decoders: appearance fine-tune drops the loss by 30% and clamps colors") {
    GridDims scene_dims{24, 24, 24, 4};
    DenseLatentGrid scene = generate_scene(0, scene_dims, 99);
    std::vector<DecoderCrop> train_crops, val_crops;
    for (int k = 0; k < 3; ++k) {
        train_crops.push_back(make_decoder_crop(scene, {0, 0, 0}, 24, 12, 4));
        train_crops.push_back(make_decoder_crop(scene, {8, 8, 0}, 16, 8, 4));
    }
    val_crops.push_back(make_decoder_crop(scene, {4, 4, 0}, 16, 8, 4));

    ToyDecoders dec = ToyDecoders::random_init(4, 11);
    double before = decoder_reconstruction_loss(dec, val_crops);
    finetune_decoder(dec, train_crops, val_crops, 1500, 0.3, 5);
    double after = decoder_reconstruction_loss(dec, val_crops);
    CHECK(after <= before);
    CHECK(after < 0.7 * before);

    // colors clamp to [0, 1] even for wild features
    float wild[4] = {100.0f, -50.0f, 80.0f, 3.0f};
    double out[4];
    dec.appearance(wild, out);
    for (int k = 1; k < 4; ++k) {
        CHECK(out[k] >= 0.0);
        CHECK(out[k] <= 1.0);
        CHECK(std::isfinite(out[k]));
    }
}

TEST_CASE("decoders: lr = 0 fine-tune is the identity") {
    DenseLatentGrid scene = generate_scene(1, {16, 16, 16, 4}, 5);
    std::vector<DecoderCrop> crops{make_decoder_crop(scene, {0, 0, 0}, 16, 8, 4)};
    ToyDecoders dec = ToyDecoders::random_init(4, 3);
    ToyDecoders before = dec;
    finetune_decoder(dec, crops, {}, 50, 0.0, 1);
    CHECK(dec.app_w == before.app_w);
    CHECK(dec.app_b == before.app_b);
    CHECK_THROWS_AS(finetune_decoder(dec, {}, {}, 10, 0.1, 1), Error);
}

TEST_CASE("checkpoint: bundle round trip preserves parameters at f32 precision") {
    FlowModelConfig cfg = tiny_config();
    ModelBundle bundle = ModelBundle::random_init(cfg, 77);
    // f32-quantize in place so the round trip is exact
    for (double& v : bundle.flow_s.params) v = static_cast<float>(v);
    for (double& v : bundle.flow_l.params) v = static_cast<float>(v);
    for (double& v : bundle.decoders.occ_w) v = static_cast<float>(v);
    bundle.decoders.occ_b = static_cast<float>(bundle.decoders.occ_b);
    for (double& v : bundle.decoders.app_w) v = static_cast<float>(v);
    for (double& v : bundle.decoders.app_b) v = static_cast<float>(v);
    std::string path = "test_bundle_roundtrip.lwmd";
    save_bundle(bundle, path);
    ModelBundle back = load_bundle(path);
    CHECK(back.cfg == bundle.cfg);
    CHECK(back.flow_s.params == bundle.flow_s.params);
    CHECK(back.flow_l.params == bundle.flow_l.params);
    CHECK(back.decoders.occ_w == bundle.decoders.occ_w);
    CHECK(back.decoders.app_w == bundle.decoders.app_w);
    CHECK(back.fusion.weight == bundle.fusion.weight);
    CHECK(bundle_base_hash(back) == bundle_base_hash(bundle));
    std::remove(path.c_str());
}
