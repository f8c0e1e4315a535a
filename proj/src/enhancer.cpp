#include "enhancer.hpp"

#include <algorithm>
#include <cmath>

#include "scene.hpp"
#include "util.hpp"

namespace lw {

/*----------------------------------- pair construction -----------------------------------*/

std::vector<EnhancerPair> build_pairs(
    const std::vector<std::pair<const DenseLatentGrid*, int>>& scenes, int channels,
    const PairBuildConfig& cfg, PairBuildStats* stats) {
    if (scenes.empty()) {
        fail_data("build_pairs: no scenes");
    }
    if (cfg.lattice < 2 || cfg.lattice % 2 != 0) {
        fail_data("build_pairs: lattice must be even and >= 2");
    }
    PairBuildStats local;
    std::vector<EnhancerPair> pairs;
    Rng rng(substream_seed(cfg.seed, stream::pairs));

    for (size_t si = 0; si < scenes.size(); ++si) {
        const DenseLatentGrid& scene = *scenes[si].first;
        int label = scenes[si].second;
        int max_extent = std::min({scene.dims.d, scene.dims.h, scene.dims.w});
        std::vector<int> sizes;
        for (int s : cfg.crop_sizes) {
            if (s <= max_extent && s % (2 * cfg.lattice) == 0) {
                sizes.push_back(s);
            }
        }
        if (sizes.empty()) {
            LW_LOG_WARN("build_pairs: scene %zu (%dx%dx%d) fits no crop size", si, scene.dims.d,
                        scene.dims.h, scene.dims.w);
            local.skipped_scenes++;
            continue;
        }
        for (int k = 0; k < cfg.per_scene; ++k) {
            bool emitted = false;
            for (int attempt = 0; attempt < cfg.retries && !emitted; ++attempt) {
                int m = sizes[rng.uniform_index(sizes.size())];
                Vox origin{
                    static_cast<int>(rng.uniform_index(scene.dims.w - m + 1)),
                    static_cast<int>(rng.uniform_index(scene.dims.h - m + 1)),
                    static_cast<int>(rng.uniform_index(scene.dims.d - m + 1)),
                };
                SparseLatent parent =
                    encode_crop_sparse(scene, origin, m, cfg.lattice, channels);
                if (parent.size() < static_cast<size_t>(cfg.min_content)) {
                    local.rejected++;
                    continue;
                }
                EnhancerPair pair;
                pair.parent = std::move(parent);
                pair.label = label;
                pair.crop_origin = origin;
                pair.crop_size = m;
                pair.scene_id = static_cast<int>(si);
                bool ok = true;
                int half = m / 2;
                for (int j = 0; j < 8 && ok; ++j) {
                    OctantIndex oct{j};
                    Vox child_origin{origin.x + oct.bx() * half, origin.y + oct.by() * half,
                                     origin.z + oct.bz() * half};
                    pair.children[j] =
                        encode_crop_sparse(scene, child_origin, half, cfg.lattice, channels);
                    ok = pair.children[j].size() >= static_cast<size_t>(cfg.min_content);
                }
                if (!ok) {
                    local.rejected++;
                    continue;
                }
                pairs.push_back(std::move(pair));
                emitted = true;
            }
            if (!emitted) {
                LW_LOG_WARN("build_pairs: scene %zu crop %d gave no valid pair within %d tries",
                            si, k, cfg.retries);
            }
        }
    }
    local.emitted = static_cast<int>(pairs.size());
    if (stats != nullptr) {
        *stats = local;
    }
    return pairs;
}

/*----------------------------------- condition assembly -----------------------------------*/

std::vector<double> interp_parent_at(const SparseLatent& truncated,
                                     const std::vector<Vox>& positions) {
    const GridDims& tdims = truncated.dims();
    std::vector<double> out(positions.size() * tdims.c);
    for (size_t i = 0; i < positions.size(); ++i) {
        const Vox& p = positions[i];
        double qx = std::clamp((p.x + 0.5) / 2.0 - 0.5, 0.0, static_cast<double>(tdims.w - 1));
        double qy = std::clamp((p.y + 0.5) / 2.0 - 0.5, 0.0, static_cast<double>(tdims.h - 1));
        double qz = std::clamp((p.z + 0.5) / 2.0 - 0.5, 0.0, static_cast<double>(tdims.d - 1));
        trilinear_sample_sparse(truncated, qx, qy, qz, out.data() + i * tdims.c);
    }
    return out;
}

Vox adjacent_offset(const AdjacentDirection& dir, int lattice) {
    Vox off{0, 0, 0};
    int shift = dir.sign > 0 ? lattice : -lattice;
    if (dir.axis == 0) {
        off.x = shift;
    } else if (dir.axis == 1) {
        off.y = shift;
    } else {
        off.z = shift;
    }
    return off;
}

size_t adjacent_entry_count(const EnhancerCondition& cond) {
    size_t n = 0;
    for (const auto& [dir, latent] : cond.adjacents) {
        n += latent->size();
    }
    return n;
}

AssembledCondition assemble_condition(const std::vector<Vox>& target_positions,
                                      const std::vector<double>& target_state,
                                      const EnhancerCondition& cond, const FusionLayer& layer,
                                      int lattice, const std::vector<double>& adjacent_noise) {
    const int c = layer.c;
    if (target_state.size() != target_positions.size() * static_cast<size_t>(c)) {
        fail_data("assemble_condition: target state shape mismatch");
    }
    if (adjacent_noise.size() != adjacent_entry_count(cond) * static_cast<size_t>(c)) {
        fail_data("assemble_condition: adjacent noise shape mismatch");
    }

    std::vector<double> parent_feat = interp_parent_at(cond.truncated, target_positions);

    AssembledCondition out;
    const size_t adj_total = adjacent_entry_count(cond);
    const size_t total = target_positions.size() + adj_total;
    std::vector<Vox> positions;
    positions.reserve(total);
    std::vector<double> mixed(total * c);
    out.noise_inputs.resize(total * c);
    out.cond_inputs.resize(total * c);

    for (size_t i = 0; i < target_positions.size(); ++i) {
        positions.push_back(target_positions[i]);
        const double* noise = target_state.data() + i * c;
        const double* condf = parent_feat.data() + i * c;
        std::copy_n(noise, c, out.noise_inputs.data() + i * c);
        std::copy_n(condf, c, out.cond_inputs.data() + i * c);
        apply_fusion(layer, noise, condf, mixed.data() + i * c);
    }

    size_t entry = target_positions.size();
    size_t noise_at = 0;
    std::vector<double> condf(c);
    for (const auto& [dir, latent] : cond.adjacents) {
        Vox off = adjacent_offset(dir, lattice);
        for (size_t i = 0; i < latent->size(); ++i, ++entry, ++noise_at) {
            const Vox& p = latent->positions()[i];
            positions.push_back({p.x + off.x, p.y + off.y, p.z + off.z});
            const double* noise = adjacent_noise.data() + noise_at * c;
            const float* featf = latent->feature(i);
            for (int ch = 0; ch < c; ++ch) {
                condf[ch] = featf[ch];
            }
            std::copy_n(noise, c, out.noise_inputs.data() + entry * c);
            std::copy_n(condf.data(), c, out.cond_inputs.data() + entry * c);
            apply_fusion(layer, noise, condf.data(), mixed.data() + entry * c);
        }
    }

    out.frame.origin = {0, 0, 0};
    out.frame.w = out.frame.h = out.frame.d = lattice;
    Vox lo{0, 0, 0};
    Vox hi{lattice, lattice, lattice};
    for (const auto& [dir, latent] : cond.adjacents) {
        Vox off = adjacent_offset(dir, lattice);
        lo.x = std::min(lo.x, off.x);
        lo.y = std::min(lo.y, off.y);
        lo.z = std::min(lo.z, off.z);
        hi.x = std::max(hi.x, off.x + lattice);
        hi.y = std::max(hi.y, off.y + lattice);
        hi.z = std::max(hi.z, off.z + lattice);
    }
    out.frame.clamp_lo = lo;
    out.frame.clamp_hi = hi;
    out.target_count = target_positions.size();
    out.set = FrameSet(std::move(positions), std::move(mixed), c);
    return out;
}

std::vector<double> enhancer_velocity(const ToyFlowModel& base, const FusionLayer& fusion,
                                      const std::vector<Vox>& target_positions,
                                      const std::vector<double>& target_state, double t,
                                      int label, int lattice, const EnhancerCondition& cond,
                                      const std::vector<double>& adjacent_noise, int threads) {
    if (fusion.c != base.cfg.channels || fusion.c_cond != base.cfg.channels) {
        fail_data("enhancer_velocity: mixer shape does not match the base model");
    }
    AssembledCondition assembled = assemble_condition(target_positions, target_state, cond,
                                                      fusion, lattice, adjacent_noise);
    std::vector<uint32_t> target_ids(assembled.target_count);
    for (uint32_t i = 0; i < assembled.target_count; ++i) {
        target_ids[i] = i;
    }
    std::vector<double> v(assembled.target_count * base.cfg.channels);
    eval_velocity_sparse(base, assembled.set, assembled.frame, t, base.embedding(label),
                         target_ids, v.data(), threads);
    return v;
}

/*----------------------------------- fine-tuning -----------------------------------*/

namespace {

struct PreparedPair {
    const EnhancerPair* pair = nullptr;
    std::array<SparseLatent, 8> truncated;
    std::array<std::vector<double>, 8> parent_interp;  // at the true child positions
};

PreparedPair prepare_pair(const EnhancerPair& pair) {
    PreparedPair prep;
    prep.pair = &pair;
    auto split = split_octants(pair.parent);
    for (int j = 0; j < 8; ++j) {
        prep.truncated[j] = std::move(split[j]);
        prep.parent_interp[j] =
            interp_parent_at(prep.truncated[j], pair.children[j].positions());
    }
    return prep;
}

struct DrawnCase {
    int octant = 0;
    double t = 0.5;
    std::vector<int> adjacent_axes;        // chosen axes, ascending
    std::vector<double> eps_target;        // per child entry
    std::vector<double> eps_adjacent;      // per adjacent entry
    std::vector<uint32_t> batch;           // target entry ids in the loss
};

DrawnCase draw_case(Rng& rng, const EnhancerPair& pair, int channels, int adjacent_max,
                    int batch_positions) {
    DrawnCase out;
    out.octant = static_cast<int>(rng.uniform_index(8));
    out.t = rng.uniform();
    int count = static_cast<int>(rng.uniform_index(static_cast<uint64_t>(adjacent_max) + 1));
    int axes[3] = {0, 1, 2};
    for (int i = 2; i > 0; --i) {
        int j = static_cast<int>(rng.uniform_index(static_cast<uint64_t>(i) + 1));
        std::swap(axes[i], axes[j]);
    }
    out.adjacent_axes.assign(axes, axes + count);
    std::sort(out.adjacent_axes.begin(), out.adjacent_axes.end());

    const SparseLatent& child = pair.children[out.octant];
    out.eps_target.resize(child.size() * channels);
    for (double& v : out.eps_target) {
        v = rng.normal();
    }
    size_t adj_entries = 0;
    for (int axis : out.adjacent_axes) {
        adj_entries += pair.children[out.octant ^ (1 << axis)].size();
    }
    out.eps_adjacent.resize(adj_entries * channels);
    for (double& v : out.eps_adjacent) {
        v = rng.normal();
    }
    size_t batch = std::min<size_t>(batch_positions, child.size());
    out.batch.resize(batch);
    for (uint32_t& id : out.batch) {
        id = static_cast<uint32_t>(rng.uniform_index(child.size()));
    }
    return out;
}

EnhancerCondition make_condition(const PreparedPair& prep, const DrawnCase& drawn) {
    EnhancerCondition cond;
    cond.j = OctantIndex{drawn.octant};
    cond.truncated = prep.truncated[drawn.octant];
    for (int axis : drawn.adjacent_axes) {
        int sibling = drawn.octant ^ (1 << axis);
        int my_bit = (drawn.octant >> axis) & 1;
        cond.adjacents.push_back({AdjacentDirection{axis, my_bit == 1 ? -1 : +1},
                                  &prep.pair->children[sibling]});
    }
    return cond;
}

// loss over the batch of target entries; optionally accumulates mixer grads
double enhancer_case_loss(const ToyFlowModel& base, const FusionLayer& fusion,
                          const PreparedPair& prep, const DrawnCase& drawn,
                          std::vector<double>* grad_weight, std::vector<double>* grad_bias,
                          int threads) {
    const int c = base.cfg.channels;
    const EnhancerPair& pair = *prep.pair;
    const SparseLatent& child = pair.children[drawn.octant];
    const int lattice = child.dims().w;

    // noisy interpolant over the target cube
    std::vector<double> state(child.size() * c);
    for (size_t i = 0; i < state.size(); ++i) {
        state[i] = (1.0 - drawn.t) * child.features()[i] + drawn.t * drawn.eps_target[i];
    }
    EnhancerCondition cond = make_condition(prep, drawn);

    AssembledCondition assembled = assemble_condition(child.positions(), state, cond, fusion,
                                                      lattice, drawn.eps_adjacent);
    std::vector<double> v(drawn.batch.size() * c);
    eval_velocity_sparse(base, assembled.set, assembled.frame, drawn.t,
                         base.embedding(pair.label), drawn.batch, v.data(), threads);

    double loss = 0.0;
    const double norm = 1.0 / (static_cast<double>(drawn.batch.size()) * c);
    std::vector<double> gout(drawn.batch.size() * c);
    for (size_t i = 0; i < drawn.batch.size(); ++i) {
        uint32_t id = drawn.batch[i];
        for (int ch = 0; ch < c; ++ch) {
            double target = drawn.eps_target[static_cast<size_t>(id) * c + ch] -
                            child.features()[static_cast<size_t>(id) * c + ch];
            double r = v[i * c + ch] - target;
            loss += r * r * norm;
            gout[i * c + ch] = 2.0 * r * norm;
        }
    }
    if (grad_weight == nullptr) {
        return loss;
    }

    // pull the loss back through the base model onto the mixed features, then
    // through the shared mixer; base parameter gradients are discarded
    std::vector<double> scratch_params(base.param_count(), 0.0);
    std::vector<double> grad_features(assembled.set.size() * c, 0.0);
    eval_velocity_sparse_backward(base, assembled.set, assembled.frame, drawn.t, pair.label,
                                  drawn.batch, gout.data(), scratch_params,
                                  grad_features.data());
    for (size_t e = 0; e < assembled.set.size(); ++e) {
        const double* g = grad_features.data() + e * c;
        bool zero = true;
        for (int ch = 0; ch < c; ++ch) {
            zero = zero && g[ch] == 0.0;
        }
        if (zero) {
            continue;
        }
        apply_fusion_backward(fusion, assembled.noise_inputs.data() + e * c,
                              assembled.cond_inputs.data() + e * c, g, *grad_weight, *grad_bias,
                              nullptr, nullptr);
    }
    return loss;
}

}  // namespace

std::vector<double> finetune_enhancer(const ToyFlowModel& base, FusionLayer& fusion,
                                      const std::vector<EnhancerPair>& pairs,
                                      const EnhancerTrainConfig& cfg) {
    if (pairs.empty()) {
        fail_data("finetune_enhancer: empty pair set");
    }
    if (cfg.adjacent_max < 0 || cfg.adjacent_max > 3) {
        fail_data("finetune_enhancer: adjacent_max must lie in [0, 3]");
    }
    std::vector<PreparedPair> prepared;
    prepared.reserve(pairs.size());
    for (const EnhancerPair& pair : pairs) {
        prepared.push_back(prepare_pair(pair));
    }
    Rng rng(substream_seed(cfg.seed, stream::enhancer));
    std::vector<double> curve;
    curve.reserve(cfg.steps);
    std::vector<double> gw(fusion.weight.size());
    std::vector<double> gb(fusion.bias.size());
    for (int step = 0; step < cfg.steps; ++step) {
        const PreparedPair& prep = prepared[rng.uniform_index(prepared.size())];
        DrawnCase drawn =
            draw_case(rng, *prep.pair, base.cfg.channels, cfg.adjacent_max, cfg.batch_positions);
        if (prep.pair->children[drawn.octant].empty()) {
            curve.push_back(curve.empty() ? 0.0 : curve.back());
            continue;
        }
        std::fill(gw.begin(), gw.end(), 0.0);
        std::fill(gb.begin(), gb.end(), 0.0);
        double loss = enhancer_case_loss(base, fusion, prep, drawn, &gw, &gb, cfg.threads);
        if (!std::isfinite(loss)) {
            fail_numeric(format("enhancer loss became non-finite at step %d", step));
        }
        for (size_t i = 0; i < fusion.weight.size(); ++i) {
            fusion.weight[i] -= cfg.lr * gw[i];
        }
        for (size_t i = 0; i < fusion.bias.size(); ++i) {
            fusion.bias[i] -= cfg.lr * gb[i];
        }
        curve.push_back(loss);
    }
    return curve;
}

double enhancer_validation_loss(const ToyFlowModel& base, const FusionLayer& fusion,
                                const std::vector<EnhancerPair>& pairs, uint64_t seed,
                                int draws_per_pair, bool zero_condition, int threads) {
    if (pairs.empty()) {
        fail_data("enhancer_validation_loss: empty pair set");
    }
    FusionLayer layer = fusion;
    if (zero_condition) {
        for (int i = 0; i < layer.c; ++i) {
            for (int k = 0; k < layer.c_cond; ++k) {
                layer.weight[static_cast<size_t>(i) * (layer.c + layer.c_cond) + layer.c + k] =
                    0.0;
            }
        }
    }
    Rng rng(substream_seed(seed, stream::enhancer, 77));
    double acc = 0.0;
    size_t cases = 0;
    for (const EnhancerPair& pair : pairs) {
        PreparedPair prep = prepare_pair(pair);
        for (int k = 0; k < draws_per_pair; ++k) {
            DrawnCase drawn = draw_case(rng, pair, base.cfg.channels, 3, 512);
            if (pair.children[drawn.octant].empty()) {
                continue;
            }
            acc += enhancer_case_loss(base, layer, prep, drawn, nullptr, nullptr, threads);
            ++cases;
        }
    }
    return cases == 0 ? 0.0 : acc / static_cast<double>(cases);
}

/*----------------------------------- sampling -----------------------------------*/

namespace {

// child position set: 2x refinement of the truncated parent's active cells
std::vector<Vox> refine_positions(const SparseLatent& truncated) {
    std::vector<Vox> out;
    out.reserve(truncated.size() * 8);
    for (const Vox& q : truncated.positions()) {
        for (int dz = 0; dz < 2; ++dz) {
            for (int dy = 0; dy < 2; ++dy) {
                for (int dx = 0; dx < 2; ++dx) {
                    out.push_back({2 * q.x + dx, 2 * q.y + dy, 2 * q.z + dz});
                }
            }
        }
    }
    std::sort(out.begin(), out.end(), [](const Vox& a, const Vox& b) {
        return std::tie(a.z, a.y, a.x) < std::tie(b.z, b.y, b.x);
    });
    return out;
}

}  // namespace

std::array<SparseLatent, 8> sample_octant_set(const ToyFlowModel& base,
                                              const FusionLayer& fusion,
                                              const SparseLatent& parent,
                                              const EnhancerSampleConfig& cfg,
                                              const AdjacentProvider& external) {
    const GridDims& pdims = parent.dims();
    const int c = pdims.c;
    const int lattice = pdims.w;
    if (pdims.d != pdims.h || pdims.h != pdims.w) {
        fail_data("sample_octants: parent cube must have equal dims");
    }
    auto truncated = split_octants(parent);

    std::array<SparseLatent, 8> children;
    std::map<int, SparseLatent> generated;
    GridDims child_dims{lattice, lattice, lattice, c};
    const double dt = 1.0 / cfg.steps;

    for (int j = 0; j < 8; ++j) {
        std::vector<Vox> positions = refine_positions(truncated[j]);
        if (positions.empty()) {
            children[j] = SparseLatent(child_dims, {}, {});
            generated.emplace(j, children[j]);
            continue;
        }
        EnhancerCondition cond;
        cond.j = OctantIndex{j};
        cond.truncated = truncated[j];
        for (int axis = 0; axis < 3; ++axis) {
            if (static_cast<int>(cond.adjacents.size()) >= cfg.adjacent_limit) {
                break;
            }
            int my_bit = (j >> axis) & 1;
            AdjacentDirection dir{axis, my_bit == 1 ? -1 : +1};
            auto it = generated.find(j ^ (1 << axis));
            if (it != generated.end()) {
                cond.adjacents.push_back({dir, &it->second});
                continue;
            }
            // the sibling across the outer face belongs to a neighboring tile
            AdjacentDirection outer{axis, my_bit == 1 ? +1 : -1};
            if (external) {
                const SparseLatent* latent = external(OctantIndex{j}, outer);
                if (latent != nullptr) {
                    cond.adjacents.push_back({outer, latent});
                }
            }
        }

        Rng rng(substream_seed(cfg.seed, stream::enhancer, 1000 + j));
        std::vector<double> state(positions.size() * c);
        for (double& v : state) {
            v = rng.normal();
        }
        std::vector<double> adj_noise(adjacent_entry_count(cond) * c);
        for (double& v : adj_noise) {
            v = rng.normal();
        }

        for (int k = 0; k < cfg.steps; ++k) {
            double t = 1.0 - k * dt;
            std::vector<double> v = enhancer_velocity(base, fusion, positions, state, t,
                                                      cfg.label, lattice, cond, adj_noise,
                                                      cfg.threads);
            euler_step(state.data(), v.data(), state.size(), dt);
        }
        std::vector<float> feats(state.size());
        for (size_t i = 0; i < state.size(); ++i) {
            feats[i] = static_cast<float>(state[i]);
        }
        children[j] = SparseLatent(child_dims, positions, std::move(feats));
        generated.emplace(j, children[j]);
    }
    return children;
}

SparseLatent sample_octants(const ToyFlowModel& base, const FusionLayer& fusion,
                            const SparseLatent& parent, const EnhancerSampleConfig& cfg,
                            const AdjacentProvider& external) {
    return merge_octants(sample_octant_set(base, fusion, parent, cfg, external));
}

/*----------------------------------- tiled enhancement -----------------------------------*/

namespace {

SparseLatent extract_tile(const SparseLatent& world, Vox origin, int tile) {
    GridDims tdims{tile, tile, tile, world.dims().c};
    std::vector<Vox> positions;
    std::vector<float> feats;
    for (size_t i = 0; i < world.size(); ++i) {
        const Vox& p = world.positions()[i];
        if (p.x < origin.x || p.x >= origin.x + tile || p.y < origin.y ||
            p.y >= origin.y + tile || p.z < origin.z || p.z >= origin.z + tile) {
            continue;
        }
        positions.push_back({p.x - origin.x, p.y - origin.y, p.z - origin.z});
        const float* f = world.feature(i);
        feats.insert(feats.end(), f, f + world.dims().c);
    }
    return SparseLatent(tdims, std::move(positions), std::move(feats));
}

}  // namespace

SparseLatent enhance_world(const ToyFlowModel& base, const FusionLayer& fusion,
                           const SparseLatent& world, int levels,
                           const EnhanceWorldConfig& cfg) {
    if (levels < 1) {
        fail_data("enhance_world: levels must be >= 1");
    }
    const int tile = cfg.tile;
    if (tile < 2 || tile % 2 != 0) {
        fail_data("enhance_world: tile size must be even and >= 2");
    }
    SparseLatent current = world;
    for (int level = 0; level < levels; ++level) {
        const GridDims dims = current.dims();
        if (dims.d % tile != 0 || dims.h % tile != 0 || dims.w % tile != 0) {
            fail_data(format(
                "enhance_world: dims %dx%dx%d not tileable by %d; pad to %dx%dx%d", dims.d,
                dims.h, dims.w, tile, (dims.d + tile - 1) / tile * tile,
                (dims.h + tile - 1) / tile * tile, (dims.w + tile - 1) / tile * tile));
        }
        int nx = dims.w / tile;
        int ny = dims.h / tile;
        int nz = dims.d / tile;

        // children per tile, indexed by tile coordinates
        std::vector<std::array<SparseLatent, 8>> tiles(static_cast<size_t>(nx) * ny * nz);
        auto tile_slot = [&](int tx, int ty, int tz) -> size_t {
            return (static_cast<size_t>(tz) * ny + ty) * nx + tx;
        };

        size_t tile_index = 0;
        for (int tz = 0; tz < nz; ++tz) {
            for (int ty = 0; ty < ny; ++ty) {
                for (int tx = 0; tx < nx; ++tx, ++tile_index) {
                    Vox origin{tx * tile, ty * tile, tz * tile};
                    SparseLatent parent = extract_tile(current, origin, tile);

                    int label = cfg.sample.label;
                    if (cfg.map != nullptr) {
                        // label under the tile center in the current raster mapping
                        int row = std::min(cfg.map->height - 1,
                                           (origin.y + tile / 2) * cfg.map->height / dims.h);
                        int col = std::min(cfg.map->width - 1,
                                           (origin.x + tile / 2) * cfg.map->width / dims.w);
                        label = cfg.map->label_at(row, col);
                    }

                    AdjacentProvider provider = [&](OctantIndex j,
                                                    const AdjacentDirection& dir)
                        -> const SparseLatent* {
                        int ntx = tx + (dir.axis == 0 ? dir.sign : 0);
                        int nty = ty + (dir.axis == 1 ? dir.sign : 0);
                        int ntz = tz + (dir.axis == 2 ? dir.sign : 0);
                        if (ntx < 0 || ntx >= nx || nty < 0 || nty >= ny || ntz < 0 ||
                            ntz >= nz) {
                            return nullptr;
                        }
                        // only tiles processed earlier in lexicographic order
                        if (std::tie(ntz, nty, ntx) >= std::tie(tz, ty, tx)) {
                            return nullptr;
                        }
                        const auto& neighbor = tiles[tile_slot(ntx, nty, ntz)];
                        return &neighbor[j.j ^ (1 << dir.axis)];
                    };

                    EnhancerSampleConfig scfg = cfg.sample;
                    scfg.label = label;
                    scfg.seed = substream_seed(cfg.sample.seed, stream::enhancer,
                                               (static_cast<uint64_t>(level) << 32) + tile_index);
                    tiles[tile_slot(tx, ty, tz)] =
                        sample_octant_set(base, fusion, parent, scfg, provider);
                }
            }
        }

        // assemble the doubled world
        GridDims out_dims{dims.d * 2, dims.h * 2, dims.w * 2, dims.c};
        std::vector<Vox> positions;
        std::vector<float> feats;
        for (int tz = 0; tz < nz; ++tz) {
            for (int ty = 0; ty < ny; ++ty) {
                for (int tx = 0; tx < nx; ++tx) {
                    const auto& children = tiles[tile_slot(tx, ty, tz)];
                    for (int j = 0; j < 8; ++j) {
                        OctantIndex oct{j};
                        Vox base_off{2 * tx * tile + oct.bx() * tile,
                                     2 * ty * tile + oct.by() * tile,
                                     2 * tz * tile + oct.bz() * tile};
                        const SparseLatent& child = children[j];
                        for (size_t i = 0; i < child.size(); ++i) {
                            const Vox& p = child.positions()[i];
                            positions.push_back(
                                {p.x + base_off.x, p.y + base_off.y, p.z + base_off.z});
                            const float* f = child.feature(i);
                            feats.insert(feats.end(), f, f + dims.c);
                        }
                    }
                }
            }
        }
        current = SparseLatent(out_dims, std::move(positions), std::move(feats));
    }
    return current;
}

}  // namespace lw
