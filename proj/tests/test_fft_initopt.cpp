#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "fft.hpp"
#include "fusion.hpp"
#include "initopt.hpp"
#include "oracles.hpp"
#include "rng.hpp"
#include "util.hpp"

using namespace lw;

namespace {

std::vector<double> random_field(const GridDims& dims, uint64_t seed) {
    Rng rng(seed);
    std::vector<double> out(dims.values());
    for (double& v : out) {
        v = rng.normal();
    }
    return out;
}

ToyDecoders simple_decoders(int channels) {
    ToyDecoders dec;
    dec.channels = channels;
    dec.occ_w.assign(channels, 0.0);
    dec.occ_w[0] = 1.0;
    dec.occ_b = 0.0;
    dec.app_w.assign(static_cast<size_t>(4) * channels, 0.0);
    dec.app_b.assign(4, 0.0);
    return dec;
}

}  // namespace

TEST_CASE("fft: delta gives a flat spectrum; constant gives a single DC coefficient") {
    GridDims dims{4, 4, 4, 1};
    std::vector<double> delta(dims.values(), 0.0);
    delta[0] = 1.0;
    SpectralLatent spectrum = fft3_forward(delta, dims);
    for (const auto& c : spectrum.coeff) {
        CHECK(c.real() == doctest::Approx(1.0).epsilon(1e-12));
        CHECK(std::fabs(c.imag()) < 1e-12);
    }

    std::vector<double> constant(dims.values(), 2.5);
    SpectralLatent flat = fft3_forward(constant, dims);
    CHECK(flat.coeff[0].real() == doctest::Approx(2.5 * dims.voxels()).epsilon(1e-9));
    for (size_t i = 1; i < flat.coeff.size(); ++i) {
        CHECK(std::abs(flat.coeff[i]) < 1e-6);
    }
}

TEST_CASE("fft: matches the naive DFT oracle, including a non-power-of-two axis") {
    for (GridDims dims : {GridDims{4, 4, 4, 2}, GridDims{3, 4, 6, 1}}) {
        std::vector<double> x = random_field(dims, 7 + dims.d);
        SpectralLatent got = fft3_forward(x, dims);
        for (int ch = 0; ch < dims.c; ++ch) {
            auto want = oracle::dft3_ref(x, dims, ch);
            for (size_t i = 0; i < want.size(); ++i) {
                CHECK(std::abs(got.coeff[i * dims.c + ch] - want[i]) < 1e-8);
            }
        }
    }
}

TEST_CASE("fft: round trip and Parseval within 1e-6") {
    GridDims dims{8, 8, 8, 2};
    std::vector<double> x = random_field(dims, 11);
    SpectralLatent spectrum = fft3_forward(x, dims);
    std::vector<double> back = fft3_inverse_real(spectrum);
    double worst = 0.0;
    for (size_t i = 0; i < x.size(); ++i) {
        worst = std::max(worst, std::fabs(back[i] - x[i]));
    }
    CHECK(worst <= 1e-6);
    CHECK(fft3_inverse_imag_max(spectrum) <= 1e-6);

    double x2 = 0.0, c2 = 0.0;
    for (double v : x) {
        x2 += v * v;
    }
    for (const auto& c : spectrum.coeff) {
        c2 += std::norm(c);
    }
    CHECK(x2 == doctest::Approx(c2 / dims.voxels()).epsilon(1e-9));
}

TEST_CASE("fft: adjoint identity <inv(X), g> == <X, pullback(g)>") {
    GridDims dims{4, 6, 8, 1};
    Rng rng(13);
    SpectralLatent coeffs;
    coeffs.dims = dims;
    coeffs.coeff.resize(dims.values());
    for (auto& c : coeffs.coeff) {
        c = std::complex<double>(rng.normal(), rng.normal());
    }
    std::vector<double> g = random_field(dims, 17);
    // real inner product of Re(inv(X)) with g
    std::vector<double> sx = fft3_inverse_real(coeffs);
    double lhs = 0.0;
    for (size_t i = 0; i < g.size(); ++i) {
        lhs += sx[i] * g[i];
    }
    // complex pairing with the pullback, as used by the optimizer
    SpectralLatent pull = spectral_pullback(g, dims);
    double rhs = 0.0;
    for (size_t i = 0; i < pull.coeff.size(); ++i) {
        rhs += coeffs.coeff[i].real() * pull.coeff[i].real() +
               coeffs.coeff[i].imag() * pull.coeff[i].imag();
    }
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-9));
}

TEST_CASE("fft: enforce_hermitian makes the inverse real") {
    GridDims dims{4, 4, 4, 1};
    Rng rng(19);
    SpectralLatent coeffs;
    coeffs.dims = dims;
    coeffs.coeff.resize(dims.values());
    for (auto& c : coeffs.coeff) {
        c = std::complex<double>(rng.normal(), rng.normal());
    }
    CHECK(fft3_inverse_imag_max(coeffs) > 1e-3);
    enforce_hermitian(coeffs);
    CHECK(fft3_inverse_imag_max(coeffs) <= 1e-9);
}

TEST_CASE("linear trajectory: zero-velocity model returns S_T; t = 1 returns S_T") {
    FlowModelConfig cfg;
    cfg.channels = 2;
    cfg.emb_dim = 2;
    cfg.hidden = 4;
    cfg.num_labels = 2;
    cfg.native_size = 8;
    ToyFlowModel zero(cfg);
    GridDims dims{8, 8, 8, cfg.channels};
    std::vector<double> s_t = random_field(dims, 23);
    std::vector<double> endpoint = denoised_endpoint(zero, 0, s_t, dims, 4, 1);
    for (size_t i = 0; i < s_t.size(); ++i) {
        CHECK(endpoint[i] == s_t[i]);
    }
    std::vector<double> constant(s_t.size(), 0.7);
    std::vector<double> at_t1 = linear_traj_at(s_t, constant, 1.0);
    CHECK(at_t1 == s_t);
    std::vector<double> at_t0 = linear_traj_at(s_t, constant, 0.0);
    for (size_t i = 0; i < s_t.size(); ++i) {
        CHECK(at_t0[i] == s_t[i] + 0.7);
    }
}

TEST_CASE("stop-gradient: endpoint gradient w.r.t. S_T is the identity map") {
    // endpoint(S) = S + C with C frozen; finite differences of each probed
    // coordinate must return exactly the perturbation direction
    GridDims dims{4, 4, 4, 2};
    std::vector<double> s = random_field(dims, 29);
    std::vector<double> constant = random_field(dims, 31);
    Rng rng(37);
    double h = 1e-4;
    for (int probe = 0; probe < 20; ++probe) {
        size_t i = rng.uniform_index(s.size());
        std::vector<double> plus = s, minus = s;
        plus[i] += h;
        minus[i] -= h;
        std::vector<double> ep = linear_traj_at(plus, constant, 0.0);
        std::vector<double> em = linear_traj_at(minus, constant, 0.0);
        for (size_t k = 0; k < s.size(); ++k) {
            double fd = (ep[k] - em[k]) / (2 * h);
            double want = k == i ? 1.0 : 0.0;
            CHECK(std::fabs(fd - want) <= 1e-5);
        }
    }
}

TEST_CASE("linear_loss: satisfied target gives zero loss and gradient") {
    GridDims dims{4, 4, 4, 2};
    ToyDecoders dec = simple_decoders(2);
    TargetConstraint constraint = make_scale_target(dims, 0.5, 0.75, 1.0);
    std::vector<double> endpoint(dims.values(), 0.0);
    for (size_t vi = 0; vi < dims.voxels(); ++vi) {
        if (constraint.mask.weights[vi] == 1.0f) {
            endpoint[vi * 2] = constraint.target[vi];
        }
    }
    std::vector<double> grad;
    double loss = linear_loss(dec, endpoint, dims, constraint, &grad);
    CHECK(loss == 0.0);
    for (double g : grad) {
        CHECK(g == 0.0);
    }
}

TEST_CASE("linear_loss: unmasked voxels never contribute") {
    GridDims dims{4, 4, 4, 1};
    ToyDecoders dec = simple_decoders(1);
    TargetConstraint constraint = make_scale_target(dims, 0.25, 0.75, 1.0);
    std::vector<double> endpoint = random_field(dims, 41);
    double base = linear_loss(dec, endpoint, dims, constraint, nullptr);
    std::vector<double> poked = endpoint;
    bool poked_any = false;
    for (size_t vi = 0; vi < dims.voxels(); ++vi) {
        if (constraint.mask.weights[vi] == 0.0f) {
            poked[vi] += 5.0;
            poked_any = true;
        }
    }
    REQUIRE(poked_any);
    CHECK(linear_loss(dec, poked, dims, constraint, nullptr) == base);
}

TEST_CASE("linear_loss: empty mask is an error") {
    GridDims dims{4, 4, 4, 1};
    ToyDecoders dec = simple_decoders(1);
    TargetConstraint constraint;
    constraint.mask = MaskVolume({4, 4, 4, 1});
    constraint.target.assign(dims.voxels(), 0.0f);
    std::vector<double> endpoint(dims.values(), 0.0);
    CHECK_THROWS_AS(linear_loss(dec, endpoint, dims, constraint, nullptr), Error);
}

TEST_CASE("linear_loss: spectral gradient matches finite differences (rel err <= 1e-4)") {
    GridDims dims{4, 4, 6, 2};
    ToyDecoders dec = simple_decoders(2);
    dec.occ_w[1] = -0.4;
    dec.occ_b = 0.1;
    TargetConstraint constraint = make_scale_target(dims, 0.3, 0.7, 1.0);
    std::vector<double> constant = random_field(dims, 43);

    std::vector<double> s = random_field(dims, 47);
    SpectralLatent coeffs = fft3_forward(s, dims);

    auto loss_of_coeffs = [&](const SpectralLatent& sc) {
        std::vector<double> st = fft3_inverse_real(sc);
        std::vector<double> endpoint = linear_traj_at(st, constant, 0.0);
        return linear_loss(dec, endpoint, dims, constraint, nullptr);
    };

    // analytic: voxel gradient pulled back through the inverse transform
    std::vector<double> st = fft3_inverse_real(coeffs);
    std::vector<double> endpoint = linear_traj_at(st, constant, 0.0);
    std::vector<double> grad;
    linear_loss(dec, endpoint, dims, constraint, &grad);
    SpectralLatent gx = spectral_pullback(grad, dims);

    Rng rng(53);
    double h = 1e-4;
    int checked = 0;
    while (checked < 20) {
        size_t i = rng.uniform_index(coeffs.coeff.size());
        bool imag = rng.uniform() < 0.5;
        SpectralLatent plus = coeffs, minus = coeffs;
        if (imag) {
            plus.coeff[i] += std::complex<double>(0.0, h);
            minus.coeff[i] -= std::complex<double>(0.0, h);
        } else {
            plus.coeff[i] += h;
            minus.coeff[i] -= h;
        }
        double fd = (loss_of_coeffs(plus) - loss_of_coeffs(minus)) / (2 * h);
        double analytic = imag ? gx.coeff[i].imag() : gx.coeff[i].real();
        if (std::fabs(fd) < 1e-9 && std::fabs(analytic) < 1e-9) {
            continue;
        }
        CHECK(oracle::rel_err(analytic, fd) <= 1e-4);
        ++checked;
    }
}

TEST_CASE("iou / dice: identical, disjoint, and counted overlaps") {
    GridDims dims{2, 2, 4, 1};
    OccupancyField a(dims, -1.0f), b(dims, -1.0f);
    CHECK(iou(a, b) == 1.0);  // both empty
    CHECK(dice(a, b) == 1.0);

    for (int i = 0; i < 4; ++i) {
        a.values[i] = 1.0f;
        b.values[i + 2] = 1.0f;  // |A| = 4, |B| = 4, overlap = 2
    }
    CHECK(iou(a, b) == doctest::Approx(2.0 / 6.0));
    CHECK(dice(a, b) == doctest::Approx(0.5));

    OccupancyField c = a;
    CHECK(iou(a, c) == 1.0);
    CHECK(dice(a, c) == 1.0);

    OccupancyField d(dims, -1.0f);
    for (int i = 8; i < 12; ++i) {
        d.values[i] = 1.0f;
    }
    CHECK(iou(a, d) == 0.0);
    CHECK(dice(a, d) == 0.0);
}

TEST_CASE("optimize: lr = 0 leaves the latent unchanged with flat traces") {
    FlowModelConfig cfg;
    cfg.channels = 2;
    cfg.emb_dim = 2;
    cfg.hidden = 4;
    cfg.num_labels = 2;
    cfg.native_size = 8;
    ToyFlowModel model = ToyFlowModel::random_init(cfg, 3);
    ToyDecoders dec = simple_decoders(2);
    GridDims dims{8, 8, 8, 2};
    TargetConstraint constraint = make_scale_target(dims, 0.25, 0.75, 1.0);
    std::vector<double> initial = random_field(dims, 59);
    OptConfig oc;
    oc.lr = 0.0;
    oc.max_steps = 4;
    oc.sample_steps = 2;
    oc.dice_stop = 1.1;  // never stop early
    OptResult result = optimize_initial_latent(model, dec, initial, dims, constraint, oc);
    CHECK(result.latent == initial);
    REQUIRE(result.trace.size() == 5);
    for (const OptTraceRow& row : result.trace) {
        CHECK(row.loss == result.trace[0].loss);
        CHECK(row.dice == result.trace[0].dice);
    }
}

TEST_CASE("optimize: already-satisfied constraint converges at step 0") {
    FlowModelConfig cfg;
    cfg.channels = 1;
    cfg.emb_dim = 2;
    cfg.hidden = 4;
    cfg.num_labels = 2;
    cfg.native_size = 4;
    ToyFlowModel zero(cfg);  // zero velocity: endpoint == S_T
    ToyDecoders dec = simple_decoders(1);
    GridDims dims{4, 4, 4, 1};
    TargetConstraint constraint = make_scale_target(dims, 0.5, 0.75, 1.0);
    std::vector<double> initial(dims.values());
    for (size_t vi = 0; vi < dims.voxels(); ++vi) {
        initial[vi] = constraint.mask.weights[vi] == 1.0f ? constraint.target[vi] : 0.3;
    }
    OptConfig oc;
    oc.lr = 1.0;
    oc.max_steps = 5;
    oc.sample_steps = 2;
    oc.dice_stop = 0.9;
    OptResult result = optimize_initial_latent(zero, dec, initial, dims, constraint, oc);
    CHECK(result.converged);
    CHECK(result.trace.size() == 1);
    CHECK(result.trace[0].dice == 1.0);
    CHECK(result.trace[0].loss == 0.0);
}

TEST_CASE("optimize: a divergent direct run aborts with the spike recorded in the trace") {
    // zero-velocity model makes the endpoint equal S_T, so the loss is exactly
    // quadratic; a huge normalized step multiplies the masked values far past
    // the target and the loss must spike by > 10x
    FlowModelConfig cfg;
    cfg.channels = 1;
    cfg.emb_dim = 2;
    cfg.hidden = 4;
    cfg.num_labels = 2;
    cfg.native_size = 8;
    ToyFlowModel zero(cfg);
    ToyDecoders dec = simple_decoders(1);
    GridDims dims{8, 8, 8, 1};
    TargetConstraint constraint = make_scale_target(dims, 0.25, 0.75, 1.0);
    std::vector<double> initial = random_field(dims, 61);
    OptConfig oc;
    oc.lr = 50.0;
    oc.spectral = false;
    oc.max_steps = 6;
    oc.sample_steps = 1;
    oc.dice_stop = 1.1;
    OptResult result = optimize_initial_latent(zero, dec, initial, dims, constraint, oc);
    CHECK(result.diverged);
    REQUIRE(result.trace.size() >= 2);
    size_t last = result.trace.size() - 1;
    CHECK(result.trace[last].loss > 10.0 * result.trace[last - 1].loss);
}

TEST_CASE("optimize: spectral and direct losses agree at the same latent") {
    FlowModelConfig cfg;
    cfg.channels = 2;
    cfg.emb_dim = 2;
    cfg.hidden = 4;
    cfg.num_labels = 2;
    cfg.native_size = 8;
    ToyFlowModel model = ToyFlowModel::random_init(cfg, 5);
    ToyDecoders dec = simple_decoders(2);
    GridDims dims{8, 8, 8, 2};
    TargetConstraint constraint = make_scale_target(dims, 0.25, 0.6, 1.0);
    std::vector<double> initial = random_field(dims, 67);
    OptConfig oc;
    oc.lr = 0.0;  // no movement: compare the recorded losses
    oc.max_steps = 1;
    oc.sample_steps = 2;
    OptResult direct = optimize_initial_latent(model, dec, initial, dims, constraint,
                                               [&] {
                                                   OptConfig c = oc;
                                                   c.spectral = false;
                                                   return c;
                                               }());
    OptResult spectral = optimize_initial_latent(model, dec, initial, dims, constraint, oc);
    CHECK(direct.trace[0].loss == spectral.trace[0].loss);
}
