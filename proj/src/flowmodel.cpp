#include "flowmodel.hpp"

#include <algorithm>
#include <cmath>

#include "rng.hpp"
#include "threading.hpp"
#include "util.hpp"

namespace lw {

void FlowTime::validate() const {
    if (!(t >= 0.0 && t <= 1.0)) {
        fail_data(format("flow time %g outside [0, 1]", t));
    }
}

/*----------------------------------- fusion layer -----------------------------------*/

FusionLayer init_identity(int c, int c_cond) {
    if (c < 1 || c_cond < 0) {
        fail_data("fusion layer needs c >= 1 and c_cond >= 0");
    }
    FusionLayer layer;
    layer.c = c;
    layer.c_cond = c_cond;
    layer.weight.assign(static_cast<size_t>(c) * (c + c_cond), 0.0);
    layer.bias.assign(c, 0.0);
    for (int i = 0; i < c; ++i) {
        layer.weight[static_cast<size_t>(i) * (c + c_cond) + i] = 1.0;
    }
    return layer;
}

void apply_fusion(const FusionLayer& layer, const double* noise_feat, const double* cond_feat,
                  double* out) {
    int in_dim = layer.c + layer.c_cond;
    for (int i = 0; i < layer.c; ++i) {
        const double* row = layer.weight.data() + static_cast<size_t>(i) * in_dim;
        double acc = 0.0;
        for (int k = 0; k < layer.c; ++k) {
            acc += row[k] * noise_feat[k];
        }
        for (int k = 0; k < layer.c_cond; ++k) {
            acc += row[layer.c + k] * cond_feat[k];
        }
        out[i] = acc + layer.bias[i];
    }
}

void apply_fusion_backward(const FusionLayer& layer, const double* noise_feat,
                           const double* cond_feat, const double* grad_out,
                           std::vector<double>& grad_weight, std::vector<double>& grad_bias,
                           double* grad_noise, double* grad_cond) {
    int in_dim = layer.c + layer.c_cond;
    for (int i = 0; i < layer.c; ++i) {
        double g = grad_out[i];
        double* wrow = grad_weight.data() + static_cast<size_t>(i) * in_dim;
        const double* row = layer.weight.data() + static_cast<size_t>(i) * in_dim;
        for (int k = 0; k < layer.c; ++k) {
            wrow[k] += g * noise_feat[k];
            if (grad_noise != nullptr) {
                grad_noise[k] += g * row[k];
            }
        }
        for (int k = 0; k < layer.c_cond; ++k) {
            wrow[layer.c + k] += g * cond_feat[k];
            if (grad_cond != nullptr) {
                grad_cond[k] += g * row[layer.c + k];
            }
        }
        grad_bias[i] += g;
    }
}

/*----------------------------------- model -----------------------------------*/

void FlowModelConfig::validate() const {
    if (channels < 1 || emb_dim < 1 || hidden < 1 || patch_radius < 0 || num_labels < 1 ||
        native_size < 2) {
        fail_data("invalid flow model config");
    }
}

ToyFlowModel::ToyFlowModel(FlowModelConfig cfg_) : cfg(cfg_) {
    cfg.validate();
    params.assign(param_count(), 0.0);
}

ToyFlowModel ToyFlowModel::random_init(const FlowModelConfig& cfg, uint64_t seed) {
    ToyFlowModel model(cfg);
    Rng rng(substream_seed(seed, stream::model_init));
    double w1_scale = 1.0 / std::sqrt(static_cast<double>(cfg.in_dim()));
    double w2_scale = 1.0 / std::sqrt(static_cast<double>(cfg.hidden));
    size_t i = 0;
    for (; i < model.b1_off(); ++i) {
        model.params[i] = w1_scale * rng.normal();
    }
    i = model.w2_off();
    for (; i < model.b2_off(); ++i) {
        model.params[i] = w2_scale * rng.normal();
    }
    i = model.emb_off();
    for (; i < model.param_count(); ++i) {
        model.params[i] = 0.5 * rng.normal();
    }
    return model;
}

const double* ToyFlowModel::embedding(int label) const {
    if (label < 0 || label >= cfg.num_labels) {
        fail_data(format("label %d outside embedding table of %d entries", label,
                         cfg.num_labels));
    }
    return params.data() + emb_off() + static_cast<size_t>(label) * cfg.emb_dim;
}

// Neighborhood offsets in fixed (dz, dy, dx) order; the shared order keeps the
// dense and sparse paths bit-identical on equal inputs.
static std::vector<Vox> patch_offsets(int radius) {
    std::vector<Vox> offsets;
    for (int dz = -radius; dz <= radius; ++dz) {
        for (int dy = -radius; dy <= radius; ++dy) {
            for (int dx = -radius; dx <= radius; ++dx) {
                if (dx == 0 && dy == 0 && dz == 0) {
                    continue;
                }
                offsets.push_back({dx, dy, dz});
            }
        }
    }
    return offsets;
}

namespace {

struct MlpScratch {
    std::vector<double> x;
    std::vector<double> hidden;
};

inline void mlp_forward(const ToyFlowModel& m, const double* x, double* hidden, double* out) {
    int in_dim = m.cfg.in_dim();
    const double* w1 = m.params.data() + m.w1_off();
    const double* b1 = m.params.data() + m.b1_off();
    const double* w2 = m.params.data() + m.w2_off();
    const double* b2 = m.params.data() + m.b2_off();
    for (int k = 0; k < m.cfg.hidden; ++k) {
        const double* row = w1 + static_cast<size_t>(k) * in_dim;
        double acc = b1[k];
        for (int i = 0; i < in_dim; ++i) {
            acc += row[i] * x[i];
        }
        hidden[k] = std::tanh(acc);
    }
    for (int ch = 0; ch < m.cfg.channels; ++ch) {
        const double* row = w2 + static_cast<size_t>(ch) * m.cfg.hidden;
        double acc = b2[ch];
        for (int k = 0; k < m.cfg.hidden; ++k) {
            acc += row[k] * hidden[k];
        }
        out[ch] = acc;
    }
}

// Backward through the MLP. grad_x may be null when input gradients are not
// needed; grad_params always accumulates (w1, b1, w2, b2 region only).
inline void mlp_backward(const ToyFlowModel& m, const double* x, const double* hidden,
                         const double* grad_out, std::vector<double>& grad_params,
                         double* grad_x) {
    int in_dim = m.cfg.in_dim();
    const double* w1 = m.params.data() + m.w1_off();
    const double* w2 = m.params.data() + m.w2_off();
    double* gw1 = grad_params.data() + m.w1_off();
    double* gb1 = grad_params.data() + m.b1_off();
    double* gw2 = grad_params.data() + m.w2_off();
    double* gb2 = grad_params.data() + m.b2_off();

    std::vector<double> ghidden(m.cfg.hidden, 0.0);
    for (int ch = 0; ch < m.cfg.channels; ++ch) {
        double g = grad_out[ch];
        const double* row = w2 + static_cast<size_t>(ch) * m.cfg.hidden;
        double* grow = gw2 + static_cast<size_t>(ch) * m.cfg.hidden;
        for (int k = 0; k < m.cfg.hidden; ++k) {
            grow[k] += g * hidden[k];
            ghidden[k] += g * row[k];
        }
        gb2[ch] += g;
    }
    for (int k = 0; k < m.cfg.hidden; ++k) {
        double gz = ghidden[k] * (1.0 - hidden[k] * hidden[k]);
        const double* row = w1 + static_cast<size_t>(k) * in_dim;
        double* grow = gw1 + static_cast<size_t>(k) * in_dim;
        for (int i = 0; i < in_dim; ++i) {
            grow[i] += gz * x[i];
            if (grad_x != nullptr) {
                grad_x[i] += gz * row[i];
            }
        }
        gb1[k] += gz;
    }
}

}  // namespace

void eval_velocity_dense(const ToyFlowModel& model, const float* block, const GridDims& bdims,
                         double t, const double* emb, double* out, int threads) {
    if (bdims.c != model.cfg.channels) {
        fail_data(format("velocity input has %d channels, model expects %d", bdims.c,
                         model.cfg.channels));
    }
    const int c = model.cfg.channels;
    const int in_dim = model.cfg.in_dim();
    const std::vector<Vox> offsets = patch_offsets(model.cfg.patch_radius);
    const double inv_count = offsets.empty() ? 0.0 : 1.0 / static_cast<double>(offsets.size());
    const size_t voxels = bdims.voxels();

    parallel_for(voxels, threads, [&](size_t begin, size_t end) {
        MlpScratch scratch;
        scratch.x.resize(in_dim);
        scratch.hidden.resize(model.cfg.hidden);
        double* x = scratch.x.data();
        for (size_t vi = begin; vi < end; ++vi) {
            int xi = static_cast<int>(vi % bdims.w);
            int yi = static_cast<int>((vi / bdims.w) % bdims.h);
            int zi = static_cast<int>(vi / (static_cast<size_t>(bdims.w) * bdims.h));
            const float* center = block + vi * c;
            for (int ch = 0; ch < c; ++ch) {
                x[ch] = center[ch];
                x[c + ch] = 0.0;
            }
            for (const Vox& off : offsets) {
                int nx = xi + off.x;
                int ny = yi + off.y;
                int nz = zi + off.z;
                if (!in_bounds(bdims, nx, ny, nz)) {
                    continue;
                }
                const float* nbr = block + voxel_index(bdims, nx, ny, nz) * c;
                for (int ch = 0; ch < c; ++ch) {
                    x[c + ch] += nbr[ch];
                }
            }
            for (int ch = 0; ch < c; ++ch) {
                x[c + ch] *= inv_count;
            }
            // same expression as the sparse path so full-set evaluations agree
            // bit for bit
            x[2 * c + 0] = (xi + 0.5) / bdims.w;
            x[2 * c + 1] = (yi + 0.5) / bdims.h;
            x[2 * c + 2] = (zi + 0.5) / bdims.d;
            x[2 * c + 3] = t;
            for (int ei = 0; ei < model.cfg.emb_dim; ++ei) {
                x[2 * c + 4 + ei] = emb[ei];
            }
            mlp_forward(model, x, scratch.hidden.data(), out + vi * c);
        }
    });
}

/*----------------------------------- frame set -----------------------------------*/

static int64_t pack_signed(int x, int y, int z) {
    // supports coordinates in roughly [-2^20, 2^20)
    return ((static_cast<int64_t>(z) + (1 << 20)) << 42) |
           ((static_cast<int64_t>(y) + (1 << 20)) << 21) | (static_cast<int64_t>(x) + (1 << 20));
}

FrameSet::FrameSet(std::vector<Vox> positions, std::vector<double> features, int channels)
    : channels_(channels), positions_(std::move(positions)), features_(std::move(features)) {
    if (features_.size() != positions_.size() * static_cast<size_t>(channels_)) {
        fail_data("frame set feature/position size mismatch");
    }
    index_.reserve(positions_.size() * 2);
    for (uint32_t i = 0; i < positions_.size(); ++i) {
        const Vox& p = positions_[i];
        if (!index_.emplace(pack_signed(p.x, p.y, p.z), i).second) {
            fail_data(format("frame set has duplicate position (%d,%d,%d)", p.x, p.y, p.z));
        }
    }
}

ptrdiff_t FrameSet::find(int x, int y, int z) const {
    auto it = index_.find(pack_signed(x, y, z));
    return it == index_.end() ? -1 : static_cast<ptrdiff_t>(it->second);
}

static void gather_sparse_inputs(const ToyFlowModel& model, const FrameSet& set,
                                 const EvalFrame& frame, double t, const double* emb,
                                 const std::vector<Vox>& offsets, uint32_t id, double* x) {
    const int c = model.cfg.channels;
    const double inv_count = offsets.empty() ? 0.0 : 1.0 / static_cast<double>(offsets.size());
    const Vox& p = set.positions()[id];
    const double* center = set.feature(id);
    for (int ch = 0; ch < c; ++ch) {
        x[ch] = center[ch];
        x[c + ch] = 0.0;
    }
    for (const Vox& off : offsets) {
        int nx = p.x + off.x;
        int ny = p.y + off.y;
        int nz = p.z + off.z;
        if (nx < frame.clamp_lo.x || nx >= frame.clamp_hi.x || ny < frame.clamp_lo.y ||
            ny >= frame.clamp_hi.y || nz < frame.clamp_lo.z || nz >= frame.clamp_hi.z) {
            continue;
        }
        ptrdiff_t ni = set.find(nx, ny, nz);
        if (ni < 0) {
            continue;
        }
        const double* nbr = set.feature(static_cast<size_t>(ni));
        for (int ch = 0; ch < c; ++ch) {
            x[c + ch] += nbr[ch];
        }
    }
    for (int ch = 0; ch < c; ++ch) {
        x[c + ch] *= inv_count;
    }
    x[2 * c + 0] = (p.x - frame.origin.x + 0.5) / frame.w;
    x[2 * c + 1] = (p.y - frame.origin.y + 0.5) / frame.h;
    x[2 * c + 2] = (p.z - frame.origin.z + 0.5) / frame.d;
    x[2 * c + 3] = t;
    for (int ei = 0; ei < model.cfg.emb_dim; ++ei) {
        x[2 * c + 4 + ei] = emb[ei];
    }
}

void eval_velocity_sparse(const ToyFlowModel& model, const FrameSet& set, const EvalFrame& frame,
                          double t, const double* emb, const std::vector<uint32_t>& eval_ids,
                          double* out, int threads) {
    if (set.channels() != model.cfg.channels) {
        fail_data("sparse velocity eval channel mismatch");
    }
    const int c = model.cfg.channels;
    const std::vector<Vox> offsets = patch_offsets(model.cfg.patch_radius);
    const size_t n = eval_ids.empty() ? set.size() : eval_ids.size();

    parallel_for(n, threads, [&](size_t begin, size_t end) {
        MlpScratch scratch;
        scratch.x.resize(model.cfg.in_dim());
        scratch.hidden.resize(model.cfg.hidden);
        for (size_t i = begin; i < end; ++i) {
            uint32_t id = eval_ids.empty() ? static_cast<uint32_t>(i) : eval_ids[i];
            gather_sparse_inputs(model, set, frame, t, emb, offsets, id, scratch.x.data());
            mlp_forward(model, scratch.x.data(), scratch.hidden.data(), out + i * c);
        }
    });
}

void eval_velocity_sparse_backward(const ToyFlowModel& model, const FrameSet& set,
                                   const EvalFrame& frame, double t, int label,
                                   const std::vector<uint32_t>& eval_ids, const double* grad_out,
                                   std::vector<double>& grad_params, double* grad_features) {
    const int c = model.cfg.channels;
    const int in_dim = model.cfg.in_dim();
    const std::vector<Vox> offsets = patch_offsets(model.cfg.patch_radius);
    const double inv_count = offsets.empty() ? 0.0 : 1.0 / static_cast<double>(offsets.size());
    const double* emb = model.embedding(label);
    double* gemb =
        grad_params.data() + model.emb_off() + static_cast<size_t>(label) * model.cfg.emb_dim;

    std::vector<double> x(in_dim);
    std::vector<double> hidden(model.cfg.hidden);
    std::vector<double> v(c);
    std::vector<double> gx(in_dim);
    const size_t n = eval_ids.empty() ? set.size() : eval_ids.size();
    for (size_t i = 0; i < n; ++i) {
        uint32_t id = eval_ids.empty() ? static_cast<uint32_t>(i) : eval_ids[i];
        gather_sparse_inputs(model, set, frame, t, emb, offsets, id, x.data());
        mlp_forward(model, x.data(), hidden.data(), v.data());
        std::fill(gx.begin(), gx.end(), 0.0);
        mlp_backward(model, x.data(), hidden.data(), grad_out + i * c, grad_params, gx.data());
        for (int ei = 0; ei < model.cfg.emb_dim; ++ei) {
            gemb[ei] += gx[2 * c + 4 + ei];
        }
        if (grad_features != nullptr) {
            const Vox& p = set.positions()[id];
            double* gcenter = grad_features + static_cast<size_t>(id) * c;
            for (int ch = 0; ch < c; ++ch) {
                gcenter[ch] += gx[ch];
            }
            for (const Vox& off : offsets) {
                int nx = p.x + off.x;
                int ny = p.y + off.y;
                int nz = p.z + off.z;
                if (nx < frame.clamp_lo.x || nx >= frame.clamp_hi.x || ny < frame.clamp_lo.y ||
                    ny >= frame.clamp_hi.y || nz < frame.clamp_lo.z || nz >= frame.clamp_hi.z) {
                    continue;
                }
                ptrdiff_t ni = set.find(nx, ny, nz);
                if (ni < 0) {
                    continue;
                }
                double* gnbr = grad_features + static_cast<size_t>(ni) * c;
                for (int ch = 0; ch < c; ++ch) {
                    gnbr[ch] += gx[c + ch] * inv_count;
                }
            }
        }
    }
}

/*----------------------------------- elementwise ops -----------------------------------*/

void interpolate_noisy(const double* s, const double* eps, size_t n, double t, double* out) {
    FlowTime{t}.validate();
    for (size_t i = 0; i < n; ++i) {
        out[i] = (1.0 - t) * s[i] + t * eps[i];
    }
}

DenseLatentGrid interpolate_noisy(const DenseLatentGrid& s, const DenseLatentGrid& eps,
                                  double t) {
    if (!(s.dims == eps.dims)) {
        fail_data("interpolate_noisy shape mismatch");
    }
    FlowTime{t}.validate();
    DenseLatentGrid out(s.dims);
    for (size_t i = 0; i < s.data.size(); ++i) {
        out.data[i] = static_cast<float>((1.0 - t) * s.data[i] + t * eps.data[i]);
    }
    return out;
}

void flow_matching_target(const double* s, const double* eps, size_t n, double* out) {
    for (size_t i = 0; i < n; ++i) {
        out[i] = eps[i] - s[i];
    }
}

DenseLatentGrid flow_matching_target(const DenseLatentGrid& s, const DenseLatentGrid& eps) {
    if (!(s.dims == eps.dims)) {
        fail_data("flow_matching_target shape mismatch");
    }
    DenseLatentGrid out(s.dims);
    for (size_t i = 0; i < s.data.size(); ++i) {
        out.data[i] = eps.data[i] - s.data[i];
    }
    return out;
}

void euler_step(double* s, const double* v, size_t n, double dt) {
    if (!(dt > 0.0)) {
        fail_data("euler_step dt must be > 0");
    }
    for (size_t i = 0; i < n; ++i) {
        s[i] -= dt * v[i];
    }
}

/*----------------------------------- decoders -----------------------------------*/

ToyDecoders ToyDecoders::random_init(int channels, uint64_t seed) {
    ToyDecoders dec;
    dec.channels = channels;
    Rng rng(substream_seed(seed, stream::model_init, 1));
    dec.occ_w.resize(channels);
    for (double& w : dec.occ_w) {
        w = 0.3 * rng.normal();
    }
    dec.occ_b = 0.3 * rng.normal();
    dec.app_w.resize(static_cast<size_t>(4) * channels);
    for (double& w : dec.app_w) {
        w = 0.3 * rng.normal();
    }
    dec.app_b.resize(4);
    for (double& b : dec.app_b) {
        b = 0.3 * rng.normal();
    }
    return dec;
}

double ToyDecoders::occupancy_value(const float* feat) const {
    double acc = occ_b;
    for (int ch = 0; ch < channels; ++ch) {
        acc += occ_w[ch] * feat[ch];
    }
    return acc;
}

double ToyDecoders::occupancy_value(const double* feat) const {
    double acc = occ_b;
    for (int ch = 0; ch < channels; ++ch) {
        acc += occ_w[ch] * feat[ch];
    }
    return acc;
}

void ToyDecoders::appearance(const float* feat, double out[4]) const {
    for (int k = 0; k < 4; ++k) {
        double acc = app_b[k];
        const double* row = app_w.data() + static_cast<size_t>(k) * channels;
        for (int ch = 0; ch < channels; ++ch) {
            acc += row[ch] * feat[ch];
        }
        out[k] = acc;
    }
    for (int k = 1; k < 4; ++k) {
        out[k] = std::clamp(out[k], 0.0, 1.0);
    }
}

ModelBundle ModelBundle::random_init(const FlowModelConfig& cfg, uint64_t seed) {
    ModelBundle bundle;
    bundle.cfg = cfg;
    bundle.flow_s = ToyFlowModel::random_init(cfg, substream_seed(seed, stream::model_init, 10));
    bundle.flow_l = ToyFlowModel::random_init(cfg, substream_seed(seed, stream::model_init, 11));
    bundle.decoders = ToyDecoders::random_init(cfg.channels, substream_seed(seed, stream::model_init, 12));
    bundle.fusion = init_identity(cfg.channels, cfg.channels);
    return bundle;
}

OccupancyField decode_occupancy(const ToyDecoders& dec, const DenseLatentGrid& dense) {
    if (dense.dims.c != dec.channels) {
        fail_data("decode_occupancy channel mismatch");
    }
    GridDims odims = dense.dims;
    odims.c = 1;
    OccupancyField out(odims);
    size_t voxels = dense.dims.voxels();
    for (size_t i = 0; i < voxels; ++i) {
        out.values[i] = static_cast<float>(dec.occupancy_value(dense.data.data() + i * dense.dims.c));
    }
    return out;
}

/*----------------------------------- training -----------------------------------*/

double flow_loss_dense(const ToyFlowModel& model, const DenseLatentGrid& s, int label, double t,
                       const std::vector<double>& eps, const std::vector<size_t>& voxel_ids,
                       std::vector<double>* grad_params) {
    if (eps.size() != s.data.size()) {
        fail_data("flow_loss_dense eps size mismatch");
    }
    const int c = model.cfg.channels;
    const GridDims& dims = s.dims;
    // noisy interpolant, stored at grid precision
    std::vector<float> st(s.data.size());
    for (size_t i = 0; i < st.size(); ++i) {
        st[i] = static_cast<float>((1.0 - t) * s.data[i] + t * eps[i]);
    }

    const std::vector<Vox> offsets = patch_offsets(model.cfg.patch_radius);
    const double inv_count = offsets.empty() ? 0.0 : 1.0 / static_cast<double>(offsets.size());
    const double* emb = model.embedding(label);
    const int in_dim = model.cfg.in_dim();

    std::vector<double> x(in_dim);
    std::vector<double> hidden(model.cfg.hidden);
    std::vector<double> v(c);
    std::vector<double> gout(c);
    std::vector<double> gx(in_dim);

    double loss = 0.0;
    const double norm = 1.0 / (static_cast<double>(voxel_ids.size()) * c);
    for (size_t vi : voxel_ids) {
        int xi = static_cast<int>(vi % dims.w);
        int yi = static_cast<int>((vi / dims.w) % dims.h);
        int zi = static_cast<int>(vi / (static_cast<size_t>(dims.w) * dims.h));
        const float* center = st.data() + vi * c;
        for (int ch = 0; ch < c; ++ch) {
            x[ch] = center[ch];
            x[c + ch] = 0.0;
        }
        for (const Vox& off : offsets) {
            int nx = xi + off.x;
            int ny = yi + off.y;
            int nz = zi + off.z;
            if (!in_bounds(dims, nx, ny, nz)) {
                continue;
            }
            const float* nbr = st.data() + voxel_index(dims, nx, ny, nz) * c;
            for (int ch = 0; ch < c; ++ch) {
                x[c + ch] += nbr[ch];
            }
        }
        for (int ch = 0; ch < c; ++ch) {
            x[c + ch] *= inv_count;
        }
        x[2 * c + 0] = (xi + 0.5) / dims.w;
        x[2 * c + 1] = (yi + 0.5) / dims.h;
        x[2 * c + 2] = (zi + 0.5) / dims.d;
        x[2 * c + 3] = t;
        for (int ei = 0; ei < model.cfg.emb_dim; ++ei) {
            x[2 * c + 4 + ei] = emb[ei];
        }
        mlp_forward(model, x.data(), hidden.data(), v.data());
        for (int ch = 0; ch < c; ++ch) {
            double target = eps[vi * c + ch] - s.data[vi * c + ch];
            double r = v[ch] - target;
            loss += r * r * norm;
            gout[ch] = 2.0 * r * norm;
        }
        if (grad_params != nullptr) {
            std::fill(gx.begin(), gx.end(), 0.0);
            mlp_backward(model, x.data(), hidden.data(), gout.data(), *grad_params, gx.data());
            double* gemb = grad_params->data() + model.emb_off() +
                           static_cast<size_t>(label) * model.cfg.emb_dim;
            for (int ei = 0; ei < model.cfg.emb_dim; ++ei) {
                gemb[ei] += gx[2 * c + 4 + ei];
            }
        }
    }
    return loss;
}

namespace {

std::vector<double> draw_normals(Rng& rng, size_t n) {
    std::vector<double> out(n);
    for (double& v : out) {
        v = rng.normal();
    }
    return out;
}

std::vector<size_t> draw_voxel_ids(Rng& rng, size_t voxels, int batch) {
    std::vector<size_t> ids(static_cast<size_t>(batch));
    for (size_t& id : ids) {
        id = rng.uniform_index(voxels);
    }
    return ids;
}

struct ValDrawDense {
    size_t item;
    double t;
    std::vector<double> eps;
    std::vector<size_t> voxel_ids;
};

}  // namespace

TrainCurves train_flow_matching(ToyFlowModel& model, const std::vector<DenseTrainItem>& train_set,
                                const std::vector<DenseTrainItem>& val_set,
                                const TrainConfig& cfg) {
    if (train_set.empty()) {
        fail_data("train_flow_matching: empty dataset");
    }
    Rng rng(substream_seed(cfg.seed, stream::train));
    Rng val_rng(substream_seed(cfg.seed, stream::train, 999));

    // frozen validation draws
    std::vector<ValDrawDense> val_draws;
    for (size_t i = 0; i < val_set.size(); ++i) {
        for (int j = 0; j < 2; ++j) {
            ValDrawDense draw;
            draw.item = i;
            draw.t = 0.1 + 0.8 * val_rng.uniform();
            draw.eps = draw_normals(val_rng, val_set[i].latent.data.size());
            draw.voxel_ids = draw_voxel_ids(val_rng, val_set[i].latent.dims.voxels(),
                                            std::min<size_t>(cfg.batch_voxels,
                                                             val_set[i].latent.dims.voxels()));
            val_draws.push_back(std::move(draw));
        }
    }
    auto val_loss = [&]() {
        if (val_draws.empty()) {
            return 0.0;
        }
        double acc = 0.0;
        for (const ValDrawDense& draw : val_draws) {
            acc += flow_loss_dense(model, val_set[draw.item].latent, val_set[draw.item].label,
                                   draw.t, draw.eps, draw.voxel_ids, nullptr);
        }
        return acc / val_draws.size();
    };

    TrainCurves curves;
    std::vector<double> grads(model.param_count());
    for (int step = 0; step < cfg.steps; ++step) {
        if (cfg.val_every > 0 && !val_draws.empty() && step % cfg.val_every == 0) {
            curves.val.emplace_back(step, val_loss());
        }
        const DenseTrainItem& item = train_set[rng.uniform_index(train_set.size())];
        double t = rng.uniform();
        std::vector<double> eps = draw_normals(rng, item.latent.data.size());
        std::vector<size_t> ids = draw_voxel_ids(
            rng, item.latent.dims.voxels(),
            static_cast<int>(std::min<size_t>(cfg.batch_voxels, item.latent.dims.voxels())));
        std::fill(grads.begin(), grads.end(), 0.0);
        double loss = flow_loss_dense(model, item.latent, item.label, t, eps, ids, &grads);
        if (!std::isfinite(loss)) {
            fail_numeric(format("flow matching loss became non-finite at step %d", step));
        }
        for (size_t i = 0; i < grads.size(); ++i) {
            model.params[i] -= cfg.lr * grads[i];
        }
        curves.loss.push_back(loss);
    }
    if (cfg.val_every > 0 && !val_draws.empty()) {
        curves.val.emplace_back(cfg.steps, val_loss());
    }
    return curves;
}

namespace {

struct SparseWork {
    FrameSet set;        // positions fixed, features swapped per step
    EvalFrame frame;
    const SparseTrainItem* item;
};

SparseWork make_sparse_work(const SparseTrainItem& item) {
    SparseWork work;
    const SparseLatent& lat = item.latent;
    std::vector<double> features(lat.features().begin(), lat.features().end());
    work.set = FrameSet(lat.positions(), std::move(features), lat.dims().c);
    work.frame = EvalFrame::block(lat.dims());
    work.item = &item;
    return work;
}

// loss + grads for a sparse item at fixed (t, eps, entry sample)
double flow_loss_sparse(const ToyFlowModel& model, SparseWork& work, double t,
                        const std::vector<double>& eps, const std::vector<uint32_t>& entry_ids,
                        std::vector<double>* grad_params) {
    const SparseLatent& lat = work.item->latent;
    const int c = lat.dims().c;
    std::vector<double>& st = work.set.mutable_features();
    for (size_t i = 0; i < st.size(); ++i) {
        st[i] = static_cast<float>((1.0 - t) * lat.features()[i] + t * eps[i]);
    }
    std::vector<double> v(entry_ids.size() * c);
    eval_velocity_sparse(model, work.set, work.frame, t, model.embedding(work.item->label),
                         entry_ids, v.data(), 1);
    double loss = 0.0;
    const double norm = 1.0 / (static_cast<double>(entry_ids.size()) * c);
    std::vector<double> gout(entry_ids.size() * c);
    for (size_t i = 0; i < entry_ids.size(); ++i) {
        uint32_t id = entry_ids[i];
        for (int ch = 0; ch < c; ++ch) {
            double target = eps[static_cast<size_t>(id) * c + ch] -
                            lat.features()[static_cast<size_t>(id) * c + ch];
            double r = v[i * c + ch] - target;
            loss += r * r * norm;
            gout[i * c + ch] = 2.0 * r * norm;
        }
    }
    if (grad_params != nullptr) {
        eval_velocity_sparse_backward(model, work.set, work.frame, t, work.item->label, entry_ids,
                                      gout.data(), *grad_params, nullptr);
    }
    return loss;
}

}  // namespace

TrainCurves train_flow_matching_sparse(ToyFlowModel& model,
                                       const std::vector<SparseTrainItem>& train_set,
                                       const std::vector<SparseTrainItem>& val_set,
                                       const TrainConfig& cfg) {
    if (train_set.empty()) {
        fail_data("train_flow_matching_sparse: empty dataset");
    }
    std::vector<SparseWork> work;
    work.reserve(train_set.size());
    for (const SparseTrainItem& item : train_set) {
        work.push_back(make_sparse_work(item));
    }
    std::vector<SparseWork> val_work;
    for (const SparseTrainItem& item : val_set) {
        val_work.push_back(make_sparse_work(item));
    }

    Rng rng(substream_seed(cfg.seed, stream::train, 1));
    Rng val_rng(substream_seed(cfg.seed, stream::train, 998));

    struct ValDraw {
        size_t item;
        double t;
        std::vector<double> eps;
        std::vector<uint32_t> entry_ids;
    };
    std::vector<ValDraw> val_draws;
    for (size_t i = 0; i < val_work.size(); ++i) {
        if (val_work[i].set.size() == 0) {
            continue;
        }
        for (int j = 0; j < 2; ++j) {
            ValDraw draw;
            draw.item = i;
            draw.t = 0.1 + 0.8 * val_rng.uniform();
            draw.eps = draw_normals(val_rng, val_work[i].set.size() *
                                                 static_cast<size_t>(val_work[i].set.channels()));
            size_t batch = std::min<size_t>(cfg.batch_voxels, val_work[i].set.size());
            draw.entry_ids.resize(batch);
            for (uint32_t& id : draw.entry_ids) {
                id = static_cast<uint32_t>(val_rng.uniform_index(val_work[i].set.size()));
            }
            val_draws.push_back(std::move(draw));
        }
    }
    auto val_loss = [&]() {
        if (val_draws.empty()) {
            return 0.0;
        }
        double acc = 0.0;
        for (const ValDraw& draw : val_draws) {
            acc += flow_loss_sparse(model, val_work[draw.item], draw.t, draw.eps, draw.entry_ids,
                                    nullptr);
        }
        return acc / val_draws.size();
    };

    TrainCurves curves;
    std::vector<double> grads(model.param_count());
    for (int step = 0; step < cfg.steps; ++step) {
        if (cfg.val_every > 0 && !val_draws.empty() && step % cfg.val_every == 0) {
            curves.val.emplace_back(step, val_loss());
        }
        size_t pick = rng.uniform_index(work.size());
        SparseWork& w = work[pick];
        if (w.set.size() == 0) {
            curves.loss.push_back(curves.loss.empty() ? 0.0 : curves.loss.back());
            continue;
        }
        double t = rng.uniform();
        std::vector<double> eps =
            draw_normals(rng, w.set.size() * static_cast<size_t>(w.set.channels()));
        size_t batch = std::min<size_t>(cfg.batch_voxels, w.set.size());
        std::vector<uint32_t> ids(batch);
        for (uint32_t& id : ids) {
            id = static_cast<uint32_t>(rng.uniform_index(w.set.size()));
        }
        std::fill(grads.begin(), grads.end(), 0.0);
        double loss = flow_loss_sparse(model, w, t, eps, ids, &grads);
        if (!std::isfinite(loss)) {
            fail_numeric(format("sparse flow matching loss became non-finite at step %d", step));
        }
        for (size_t i = 0; i < grads.size(); ++i) {
            model.params[i] -= cfg.lr * grads[i];
        }
        curves.loss.push_back(loss);
    }
    if (cfg.val_every > 0 && !val_draws.empty()) {
        curves.val.emplace_back(cfg.steps, val_loss());
    }
    return curves;
}

/*----------------------------------- decoder fitting -----------------------------------*/

// Gaussian elimination with partial pivoting; A is n x n row-major.
static std::vector<double> solve_linear(std::vector<double> a, std::vector<double> b, int n) {
    for (int col = 0; col < n; ++col) {
        int pivot = col;
        for (int row = col + 1; row < n; ++row) {
            if (std::fabs(a[row * n + col]) > std::fabs(a[pivot * n + col])) {
                pivot = row;
            }
        }
        if (std::fabs(a[pivot * n + col]) < 1e-12) {
            a[pivot * n + col] += 1e-9;  // ridge against singular moments
        }
        if (pivot != col) {
            for (int k = 0; k < n; ++k) {
                std::swap(a[col * n + k], a[pivot * n + k]);
            }
            std::swap(b[col], b[pivot]);
        }
        for (int row = col + 1; row < n; ++row) {
            double f = a[row * n + col] / a[col * n + col];
            for (int k = col; k < n; ++k) {
                a[row * n + k] -= f * a[col * n + k];
            }
            b[row] -= f * b[col];
        }
    }
    std::vector<double> x(n);
    for (int row = n - 1; row >= 0; --row) {
        double acc = b[row];
        for (int k = row + 1; k < n; ++k) {
            acc -= a[row * n + k] * x[k];
        }
        x[row] = acc / a[row * n + row];
    }
    return x;
}

void fit_occupancy_decoder(ToyDecoders& dec, const std::vector<DecoderCrop>& crops) {
    if (crops.empty()) {
        fail_data("fit_occupancy_decoder: empty dataset");
    }
    int c = dec.channels;
    int n = c + 1;
    std::vector<double> xtx(static_cast<size_t>(n) * n, 0.0);
    std::vector<double> xty(n, 0.0);
    std::vector<double> row(n);
    for (const DecoderCrop& crop : crops) {
        size_t voxels = crop.latent.dims.voxels();
        for (size_t i = 0; i < voxels; ++i) {
            const float* feat = crop.latent.data.data() + i * c;
            float occ = crop.scene.data[i * crop.scene.dims.c];
            double target = occ > 0.5f ? 1.0 : -1.0;
            for (int k = 0; k < c; ++k) {
                row[k] = feat[k];
            }
            row[c] = 1.0;
            for (int a = 0; a < n; ++a) {
                for (int b = 0; b < n; ++b) {
                    xtx[a * n + b] += row[a] * row[b];
                }
                xty[a] += row[a] * target;
            }
        }
    }
    std::vector<double> sol = solve_linear(std::move(xtx), std::move(xty), n);
    for (int k = 0; k < c; ++k) {
        dec.occ_w[k] = sol[k];
    }
    dec.occ_b = sol[c];
}

double decoder_reconstruction_loss(const ToyDecoders& dec, const std::vector<DecoderCrop>& crops) {
    double loss = 0.0;
    size_t count = 0;
    for (const DecoderCrop& crop : crops) {
        size_t voxels = crop.latent.dims.voxels();
        for (size_t i = 0; i < voxels; ++i) {
            const float* scene = crop.scene.data.data() + i * crop.scene.dims.c;
            if (scene[0] <= 0.5f) {
                continue;  // appearance loss lives on occupied cells
            }
            double out[4];
            dec.appearance(crop.latent.data.data() + i * dec.channels, out);
            double target[4] = {scene[0], scene[1], scene[2], scene[3]};
            for (int k = 0; k < 4; ++k) {
                double r = out[k] - target[k];
                loss += r * r;
            }
            ++count;
        }
    }
    return count == 0 ? 0.0 : loss / (static_cast<double>(count) * 4.0);
}

std::vector<double> finetune_decoder(ToyDecoders& dec, const std::vector<DecoderCrop>& train_set,
                                     const std::vector<DecoderCrop>& held_out, int steps,
                                     double lr, uint64_t seed) {
    if (train_set.empty()) {
        fail_data("finetune_decoder: empty dataset");
    }
    Rng rng(substream_seed(seed, stream::train, 7));
    const int c = dec.channels;
    double initial_held = decoder_reconstruction_loss(dec, held_out);
    ToyDecoders best = dec;
    double best_held = initial_held;

    std::vector<double> curve;
    curve.reserve(steps);
    const int batch = 256;
    for (int step = 0; step < steps; ++step) {
        const DecoderCrop& crop = train_set[rng.uniform_index(train_set.size())];
        size_t voxels = crop.latent.dims.voxels();
        std::vector<double> gw(static_cast<size_t>(4) * c, 0.0);
        std::vector<double> gb(4, 0.0);
        double loss = 0.0;
        int used = 0;
        for (int b = 0; b < batch; ++b) {
            size_t vi = rng.uniform_index(voxels);
            const float* scene = crop.scene.data.data() + vi * crop.scene.dims.c;
            if (scene[0] <= 0.5f) {
                continue;
            }
            const float* feat = crop.latent.data.data() + vi * c;
            // raw affine output; the clamp is a decode-time convenience
            for (int k = 0; k < 4; ++k) {
                double acc = dec.app_b[k];
                const double* wrow = dec.app_w.data() + static_cast<size_t>(k) * c;
                for (int ch = 0; ch < c; ++ch) {
                    acc += wrow[ch] * feat[ch];
                }
                double target = scene[k];
                double r = acc - target;
                loss += r * r;
                double g = 2.0 * r;
                double* gwrow = gw.data() + static_cast<size_t>(k) * c;
                for (int ch = 0; ch < c; ++ch) {
                    gwrow[ch] += g * feat[ch];
                }
                gb[k] += g;
            }
            ++used;
        }
        if (used > 0) {
            double norm = 1.0 / (static_cast<double>(used) * 4.0);
            for (size_t i = 0; i < gw.size(); ++i) {
                dec.app_w[i] -= lr * gw[i] * norm;
            }
            for (int k = 0; k < 4; ++k) {
                dec.app_b[k] -= lr * gb[k] * norm;
            }
            loss *= norm;
        }
        curve.push_back(loss);
        if (!held_out.empty() && (step + 1) % 100 == 0) {
            double held = decoder_reconstruction_loss(dec, held_out);
            if (held < best_held) {
                best_held = held;
                best = dec;
            }
        }
    }
    if (!held_out.empty()) {
        double held = decoder_reconstruction_loss(dec, held_out);
        if (held < best_held) {
            best_held = held;
            best = dec;
        }
        // never end worse than the starting point on held-out crops
        if (best_held <= initial_held) {
            dec = best;
        }
    }
    return curve;
}

}  // namespace lw
