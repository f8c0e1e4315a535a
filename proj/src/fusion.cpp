#include "fusion.hpp"

#include <algorithm>
#include <cmath>

#include "rng.hpp"
#include "util.hpp"

namespace lw {

void SamplerConfig::validate() const {
    if (steps < 1) {
        fail_data("sampler steps must be >= 1");
    }
    if (window_size < 1 || stride < 1 || stride > window_size) {
        fail_data("sampler window/stride invalid");
    }
    if (!(kernel_sigma > 0.0)) {
        fail_data("sampler kernel sigma must be > 0");
    }
    if (!(sigma_schedule.sigma_max >= 0.0)) {
        fail_data("sigma_max must be >= 0");
    }
    if (threads < 1) {
        fail_data("threads must be >= 1");
    }
}

/*----------------------------------- window fusion -----------------------------------*/

std::vector<double> fuse_window_velocities(const WindowPlan& plan,
                                           const std::vector<std::vector<double>>& per_window_v,
                                           double kernel_sigma, int channels) {
    if (per_window_v.size() != plan.windows.size()) {
        fail_data("fuse_window_velocities: one velocity block per window required");
    }
    const GridDims& dims = plan.dims;
    const int ws = plan.window_size;
    const size_t block_values = static_cast<size_t>(ws) * ws * ws * channels;
    const size_t voxels = dims.voxels();

    std::vector<double> weights = gaussian_window_weights(ws, kernel_sigma);
    std::vector<double> out(voxels * channels, 0.0);
    std::vector<double> acc_wv(voxels * channels, 0.0);
    std::vector<double> acc_w(voxels, 0.0);
    std::vector<uint32_t> count(voxels, 0);

    for (size_t wi = 0; wi < plan.windows.size(); ++wi) {
        const Window& win = plan.windows[wi];
        const std::vector<double>& block = per_window_v[wi];
        if (block.size() != block_values) {
            fail_data("fuse_window_velocities: bad velocity block shape");
        }
        size_t bi = 0;
        for (int lz = 0; lz < ws; ++lz) {
            for (int ly = 0; ly < ws; ++ly) {
                for (int lx = 0; lx < ws; ++lx, ++bi) {
                    size_t gi = voxel_index(dims, win.origin.x + lx, win.origin.y + ly,
                                            win.origin.z + lz);
                    double w = weights[bi];
                    const double* v = block.data() + bi * channels;
                    double* wv = acc_wv.data() + gi * channels;
                    for (int ch = 0; ch < channels; ++ch) {
                        wv[ch] += w * v[ch];
                    }
                    acc_w[gi] += w;
                    if (count[gi] == 0) {
                        // remember the first contribution verbatim; single
                        // coverage must pass values through bit-exactly
                        std::copy_n(v, channels, out.data() + gi * channels);
                    }
                    count[gi]++;
                }
            }
        }
    }
    for (size_t gi = 0; gi < voxels; ++gi) {
        if (count[gi] == 0) {
            fail_data("fuse_window_velocities: voxel covered by zero windows");
        }
        if (count[gi] > 1) {
            double inv = 1.0 / acc_w[gi];
            double* o = out.data() + gi * channels;
            const double* wv = acc_wv.data() + gi * channels;
            for (int ch = 0; ch < channels; ++ch) {
                o[ch] = wv[ch] * inv;
            }
        }
    }
    return out;
}

std::vector<double> fuse_segment_velocities(const std::vector<std::vector<float>>& masks,
                                            const std::vector<std::vector<double>>& per_label_v,
                                            size_t slots, int channels) {
    if (masks.size() != per_label_v.size() || masks.empty()) {
        fail_data("fuse_segment_velocities: masks and velocity fields must align");
    }
    const size_t k_count = masks.size();
    for (size_t k = 0; k < k_count; ++k) {
        if (masks[k].size() != slots || per_label_v[k].size() != slots * channels) {
            fail_data("fuse_segment_velocities: bad field shape");
        }
    }
    std::vector<double> out(slots * channels, 0.0);
    for (size_t i = 0; i < slots; ++i) {
        double wsum = 0.0;
        size_t contributors = 0;
        size_t last = 0;
        for (size_t k = 0; k < k_count; ++k) {
            if (masks[k][i] > 0.0f) {
                wsum += masks[k][i];
                ++contributors;
                last = k;
            }
        }
        if (contributors == 0) {
            fail_data("fuse_segment_velocities: all-zero mask sum at a voxel");
        }
        double* o = out.data() + i * channels;
        if (contributors == 1) {
            std::copy_n(per_label_v[last].data() + i * channels, channels, o);
            continue;
        }
        double inv = 1.0 / wsum;
        for (size_t k = 0; k < k_count; ++k) {
            double mk = masks[k][i];
            if (mk <= 0.0) {
                continue;
            }
            const double* v = per_label_v[k].data() + i * channels;
            for (int ch = 0; ch < channels; ++ch) {
                o[ch] += mk * v[ch];
            }
        }
        for (int ch = 0; ch < channels; ++ch) {
            o[ch] *= inv;
        }
    }
    return out;
}

/*----------------------------------- dense samplers -----------------------------------*/

std::vector<double> initial_noise_dense(const GridDims& dims, uint64_t seed) {
    Rng rng(substream_seed(seed, stream::stage_s_noise));
    std::vector<double> state(dims.values());
    for (double& v : state) {
        v = rng.normal();
    }
    return state;
}

static std::vector<float> state_to_block(const std::vector<double>& state) {
    std::vector<float> block(state.size());
    for (size_t i = 0; i < state.size(); ++i) {
        block[i] = static_cast<float>(state[i]);
    }
    return block;
}

std::vector<double> sample_plain_from(const ToyFlowModel& model, int label,
                                      std::vector<double> state, const GridDims& dims, int steps,
                                      int threads) {
    if (state.size() != dims.values()) {
        fail_data("sample_plain_from: state does not match dims");
    }
    const double dt = 1.0 / steps;
    std::vector<double> velocity(state.size());
    const double* emb = model.embedding(label);
    for (int k = 0; k < steps; ++k) {
        double t = 1.0 - k * dt;
        std::vector<float> block = state_to_block(state);
        eval_velocity_dense(model, block.data(), dims, t, emb, velocity.data(), threads);
        euler_step(state.data(), velocity.data(), state.size(), dt);
    }
    return state;
}

namespace {

// copies the window region of the global state into a window-local float block
std::vector<float> extract_window(const std::vector<double>& state, const GridDims& dims,
                                  const Window& win, int ws) {
    std::vector<float> block(static_cast<size_t>(ws) * ws * ws * dims.c);
    size_t bi = 0;
    for (int lz = 0; lz < ws; ++lz) {
        for (int ly = 0; ly < ws; ++ly) {
            for (int lx = 0; lx < ws; ++lx) {
                size_t gi = voxel_index(dims, win.origin.x + lx, win.origin.y + ly,
                                        win.origin.z + lz) *
                            dims.c;
                for (int ch = 0; ch < dims.c; ++ch, ++bi) {
                    block[bi] = static_cast<float>(state[gi + ch]);
                }
            }
        }
    }
    return block;
}

// window-fused velocity field for one label at one time step
std::vector<double> fused_velocity_dense(const ToyFlowModel& model, int label,
                                         const std::vector<double>& state, const GridDims& dims,
                                         const WindowPlan& plan, double t,
                                         const SamplerConfig& cfg) {
    GridDims wdims{plan.window_size, plan.window_size, plan.window_size, dims.c};
    std::vector<std::vector<double>> per_window(plan.windows.size());
    const double* emb = model.embedding(label);
    for (size_t wi = 0; wi < plan.windows.size(); ++wi) {
        std::vector<float> block = extract_window(state, dims, plan.windows[wi], plan.window_size);
        per_window[wi].resize(block.size());
        eval_velocity_dense(model, block.data(), wdims, t, emb, per_window[wi].data(),
                            cfg.threads);
    }
    return fuse_window_velocities(plan, per_window, cfg.kernel_sigma, dims.c);
}

DenseLatentGrid state_to_grid(const std::vector<double>& state, const GridDims& dims) {
    DenseLatentGrid out(dims);
    for (size_t i = 0; i < state.size(); ++i) {
        out.data[i] = static_cast<float>(state[i]);
    }
    return out;
}

std::vector<std::vector<float>> masks_at_sigma(const std::vector<MaskVolume>& hard, double sigma) {
    std::vector<std::vector<float>> out(hard.size());
    for (size_t k = 0; k < hard.size(); ++k) {
        if (sigma > 0.0) {
            out[k] = smooth_mask(hard[k], sigma).weights;
        } else {
            out[k] = hard[k].weights;
        }
    }
    return out;
}

}  // namespace

DenseLatentGrid sample_latent_fusion(const ToyFlowModel& model, int label, const GridDims& dims,
                                     const SamplerConfig& cfg) {
    cfg.validate();
    std::vector<double> state = initial_noise_dense(dims, cfg.seed);
    const double dt = 1.0 / cfg.steps;
    if (cfg.plain) {
        state = sample_plain_from(model, label, std::move(state), dims, cfg.steps, cfg.threads);
        return state_to_grid(state, dims);
    }
    WindowPlan plan = build_window_plan(dims, cfg.window_size, cfg.stride);
    for (int k = 0; k < cfg.steps; ++k) {
        double t = 1.0 - k * dt;
        std::vector<double> v = fused_velocity_dense(model, label, state, dims, plan, t, cfg);
        euler_step(state.data(), v.data(), state.size(), dt);
    }
    return state_to_grid(state, dims);
}

DenseLatentGrid sample_segment_guided(const ToyFlowModel& model, const SegmentMap& map,
                                      const GridDims& dims, const SamplerConfig& cfg) {
    cfg.validate();
    map.validate();
    std::vector<int> labels = map.label_ids();
    if (cfg.plain && labels.size() != 1) {
        fail_usage("plain sampling supports exactly one label");
    }
    if (labels.size() == 1) {
        // degenerate case: mask weights cancel, identical to latent fusion
        return sample_latent_fusion(model, labels[0], dims, cfg);
    }

    GridDims mask_dims = dims;
    mask_dims.c = 1;
    std::vector<MaskVolume> hard = extrude_segment_map(map, mask_dims);
    WindowPlan plan = build_window_plan(dims, cfg.window_size, cfg.stride);

    std::vector<double> state = initial_noise_dense(dims, cfg.seed);
    const double dt = 1.0 / cfg.steps;
    for (int k = 0; k < cfg.steps; ++k) {
        double t = 1.0 - k * dt;
        std::vector<std::vector<float>> masks =
            masks_at_sigma(hard, cfg.sigma_schedule.sigma(t));
        std::vector<std::vector<double>> per_label(labels.size());
        for (size_t li = 0; li < labels.size(); ++li) {
            per_label[li] = fused_velocity_dense(model, labels[li], state, dims, plan, t, cfg);
        }
        std::vector<double> v =
            fuse_segment_velocities(masks, per_label, dims.voxels(), dims.c);
        euler_step(state.data(), v.data(), state.size(), dt);
    }
    return state_to_grid(state, dims);
}

/*----------------------------------- stage L (sparse) -----------------------------------*/

namespace {

// per-position window weight W(x - c_j)
double window_weight(const Window& win, const Vox& p, double kernel_sigma) {
    double dx = p.x - win.center[0];
    double dy = p.y - win.center[1];
    double dz = p.z - win.center[2];
    return std::exp(-(dx * dx + dy * dy + dz * dz) / (2.0 * kernel_sigma * kernel_sigma));
}

struct SparseSampler {
    const ToyFlowModel* model = nullptr;
    const WindowPlan* plan = nullptr;
    std::vector<std::vector<uint32_t>> window_members;  // entry ids per window
    std::vector<std::vector<double>> window_weights;    // matching W(x - c_j)
    bool plain = false;

    // fused velocity over all set entries for one label
    std::vector<double> fused_velocity(const FrameSet& set, const GridDims& dims, double t,
                                       int label, const SamplerConfig& cfg) const {
        const int c = dims.c;
        const size_t n = set.size();
        std::vector<double> out(n * c, 0.0);
        if (plain) {
            EvalFrame frame = EvalFrame::block(dims);
            eval_velocity_sparse(*model, set, frame, t, model->embedding(label), {}, out.data(),
                                 cfg.threads);
            return out;
        }
        std::vector<double> acc_w(n, 0.0);
        std::vector<uint32_t> count(n, 0);
        std::vector<double> acc_wv(n * c, 0.0);
        for (size_t wi = 0; wi < plan->windows.size(); ++wi) {
            const std::vector<uint32_t>& members = window_members[wi];
            if (members.empty()) {
                continue;
            }
            const Window& win = plan->windows[wi];
            EvalFrame frame;
            frame.origin = win.origin;
            frame.w = frame.h = frame.d = plan->window_size;
            frame.clamp_lo = win.origin;
            frame.clamp_hi = {win.origin.x + plan->window_size, win.origin.y + plan->window_size,
                              win.origin.z + plan->window_size};
            std::vector<double> v(members.size() * c);
            eval_velocity_sparse(*model, set, frame, t, model->embedding(label), members,
                                 v.data(), cfg.threads);
            for (size_t mi = 0; mi < members.size(); ++mi) {
                uint32_t id = members[mi];
                double w = window_weights[wi][mi];
                double* wv = acc_wv.data() + static_cast<size_t>(id) * c;
                const double* vv = v.data() + mi * c;
                for (int ch = 0; ch < c; ++ch) {
                    wv[ch] += w * vv[ch];
                }
                acc_w[id] += w;
                if (count[id] == 0) {
                    std::copy_n(vv, c, out.data() + static_cast<size_t>(id) * c);
                }
                count[id]++;
            }
        }
        for (size_t i = 0; i < n; ++i) {
            if (count[i] == 0) {
                fail_data("sparse fusion: active position covered by zero windows");
            }
            if (count[i] > 1) {
                double inv = 1.0 / acc_w[i];
                double* o = out.data() + i * c;
                const double* wv = acc_wv.data() + i * c;
                for (int ch = 0; ch < c; ++ch) {
                    o[ch] = wv[ch] * inv;
                }
            }
        }
        return out;
    }
};

}  // namespace

WorldSample sample_world(const ModelBundle& bundle, const SegmentMap& map, const GridDims& dims,
                         const SamplerConfig& cfg) {
    cfg.validate();
    GridDims latent_dims = dims;
    latent_dims.c = bundle.cfg.channels;

    // stage S: dense structure latent, decoded to the active set
    DenseLatentGrid stage_s = sample_segment_guided(bundle.flow_s, map, latent_dims, cfg);
    OccupancyField occupancy = decode_occupancy(bundle.decoders, stage_s);
    std::vector<Vox> actives = occupancy.active_positions();
    if (actives.empty()) {
        fail_numeric("stage-S produced no active voxels");
    }

    // stage L: features at active positions, same fusion strategy
    const int c = latent_dims.c;
    Rng rng(substream_seed(cfg.seed, stream::stage_l_noise));
    std::vector<double> features(actives.size() * c);
    for (double& v : features) {
        v = rng.normal();
    }
    FrameSet set(actives, std::move(features), c);

    SparseSampler sampler;
    sampler.model = &bundle.flow_l;
    sampler.plain = cfg.plain;
    WindowPlan plan;
    if (!cfg.plain) {
        plan = build_window_plan(latent_dims, cfg.window_size, cfg.stride);
        sampler.plan = &plan;
        sampler.window_members.resize(plan.windows.size());
        sampler.window_weights.resize(plan.windows.size());
        for (size_t wi = 0; wi < plan.windows.size(); ++wi) {
            const Window& win = plan.windows[wi];
            for (uint32_t id = 0; id < set.size(); ++id) {
                if (plan.contains(win, set.positions()[id].x, set.positions()[id].y,
                                  set.positions()[id].z)) {
                    sampler.window_members[wi].push_back(id);
                    sampler.window_weights[wi].push_back(
                        window_weight(win, set.positions()[id], cfg.kernel_sigma));
                }
            }
        }
    }

    std::vector<int> labels = map.label_ids();
    GridDims mask_dims = dims;
    mask_dims.c = 1;
    std::vector<MaskVolume> hard;
    if (labels.size() > 1) {
        hard = extrude_segment_map(map, mask_dims);
    }

    const double dt = 1.0 / cfg.steps;
    for (int k = 0; k < cfg.steps; ++k) {
        double t = 1.0 - k * dt;
        std::vector<double> v;
        if (labels.size() == 1) {
            v = sampler.fused_velocity(set, latent_dims, t, labels[0], cfg);
        } else {
            std::vector<std::vector<float>> dense_masks =
                masks_at_sigma(hard, cfg.sigma_schedule.sigma(t));
            // sample the masks at the active positions
            std::vector<std::vector<float>> masks(labels.size());
            std::vector<std::vector<double>> per_label(labels.size());
            for (size_t li = 0; li < labels.size(); ++li) {
                per_label[li] = sampler.fused_velocity(set, latent_dims, t, labels[li], cfg);
                masks[li].resize(set.size());
                for (uint32_t id = 0; id < set.size(); ++id) {
                    const Vox& p = set.positions()[id];
                    masks[li][id] = dense_masks[li][voxel_index(mask_dims, p.x, p.y, p.z)];
                }
            }
            v = fuse_segment_velocities(masks, per_label, set.size(), c);
        }
        euler_step(set.mutable_features().data(), v.data(), set.size() * c, dt);
    }

    std::vector<float> final_features(set.size() * c);
    for (size_t i = 0; i < final_features.size(); ++i) {
        final_features[i] = static_cast<float>(set.features()[i]);
    }
    WorldSample out;
    out.occupancy = std::move(occupancy);
    out.latent = SparseLatent(latent_dims, set.positions(), std::move(final_features));
    return out;
}

}  // namespace lw
