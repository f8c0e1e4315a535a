#ifndef LW_FLOWMODEL_HPP
#define LW_FLOWMODEL_HPP

#include <cstddef>
#include <cstdint>
#include <unordered_map>
#include <vector>

#include "lattice.hpp"

namespace lw {

// Flow time convention: t = 1 is pure noise, t = 0 is data; the noisy
// interpolant is s_t = (1 - t) s + t eps and samplers integrate t from 1 to 0.
struct FlowTime {
    double t = 0.0;
    void validate() const;
};

/*----------------------------------- fusion layer -----------------------------------*/

// Per-voxel affine mixer applied to [noise ; condition] concatenated along the
// channel axis. Identity initialization leaves the noise untouched for any
// condition values.
struct FusionLayer {
    int c = 0;       // noise / output channels
    int c_cond = 0;  // condition channels
    std::vector<double> weight;  // c x (c + c_cond), row-major
    std::vector<double> bias;    // c

    size_t param_count() const { return weight.size() + bias.size(); }
};

FusionLayer init_identity(int c, int c_cond);
void apply_fusion(const FusionLayer& layer, const double* noise_feat, const double* cond_feat,
                  double* out);

// Gradient of apply_fusion: accumulates dL/d{weight, bias} given dL/dout, and
// optionally dL/d{noise_feat, cond_feat}.
void apply_fusion_backward(const FusionLayer& layer, const double* noise_feat,
                           const double* cond_feat, const double* grad_out,
                           std::vector<double>& grad_weight, std::vector<double>& grad_bias,
                           double* grad_noise, double* grad_cond);

/*----------------------------------- toy flow model -----------------------------------*/

struct FlowModelConfig {
    int channels = 4;      // latent channels c
    int emb_dim = 4;       // label embedding width
    int hidden = 16;       // hidden layer width
    int patch_radius = 1;  // Chebyshev radius of the neighborhood input
    int num_labels = 8;
    int native_size = 32;  // cube edge the model is trained at (metadata)

    int in_dim() const { return 2 * channels + 3 + 1 + emb_dim; }
    void validate() const;
    bool operator==(const FlowModelConfig&) const = default;
};

// Per-voxel velocity network. Inputs per voxel: its features, the mean of the
// neighborhood features (absent/out-of-frame cells count as zero), the
// frame-normalized position, t, and the label embedding. One tanh hidden
// layer, linear output of c channels.
//
// Parameters live in one flat array, in declaration order:
//   w1 [hidden x in_dim], b1 [hidden], w2 [c x hidden], b2 [c],
//   emb [num_labels x emb_dim]
struct ToyFlowModel {
    FlowModelConfig cfg;
    std::vector<double> params;

    ToyFlowModel() = default;
    explicit ToyFlowModel(FlowModelConfig cfg_);  // zero-initialized

    static ToyFlowModel random_init(const FlowModelConfig& cfg, uint64_t seed);

    size_t w1_off() const { return 0; }
    size_t b1_off() const { return static_cast<size_t>(cfg.hidden) * cfg.in_dim(); }
    size_t w2_off() const { return b1_off() + cfg.hidden; }
    size_t b2_off() const { return w2_off() + static_cast<size_t>(cfg.channels) * cfg.hidden; }
    size_t emb_off() const { return b2_off() + cfg.channels; }
    size_t param_count() const {
        return emb_off() + static_cast<size_t>(cfg.num_labels) * cfg.emb_dim;
    }

    const double* embedding(int label) const;
};

// Evaluation frame: positions are interpreted relative to `origin`; extents
// normalize positions to (p - origin + 0.5) / extent; the neighborhood gather
// only sees cells inside [clamp_lo, clamp_hi).
struct EvalFrame {
    Vox origin{0, 0, 0};
    int w = 0, h = 0, d = 0;
    Vox clamp_lo{0, 0, 0};
    Vox clamp_hi{0, 0, 0};

    static EvalFrame block(const GridDims& dims) {
        return {{0, 0, 0}, dims.w, dims.h, dims.d, {0, 0, 0}, {dims.w, dims.h, dims.d}};
    }
};

// Velocity over a dense block. `block` holds bdims.values() floats; `out`
// receives the same layout in doubles. Deterministic for any thread count.
void eval_velocity_dense(const ToyFlowModel& model, const float* block, const GridDims& bdims,
                         double t, const double* emb, double* out, int threads);

// Sparse evaluation set with double features; positions may lie outside the
// frame (expanded enhancer sets use negative coordinates).
class FrameSet {
public:
    FrameSet() = default;
    FrameSet(std::vector<Vox> positions, std::vector<double> features, int channels);

    size_t size() const { return positions_.size(); }
    int channels() const { return channels_; }
    const std::vector<Vox>& positions() const { return positions_; }
    const std::vector<double>& features() const { return features_; }
    std::vector<double>& mutable_features() { return features_; }
    const double* feature(size_t i) const { return features_.data() + i * channels_; }
    ptrdiff_t find(int x, int y, int z) const;

private:
    int channels_ = 0;
    std::vector<Vox> positions_;
    std::vector<double> features_;
    std::unordered_map<int64_t, uint32_t> index_;
};

// Velocity at set entries listed in `eval_ids` (empty list = all entries).
// `out` is eval_ids.size() x c (or size() x c when empty).
void eval_velocity_sparse(const ToyFlowModel& model, const FrameSet& set, const EvalFrame& frame,
                          double t, const double* emb, const std::vector<uint32_t>& eval_ids,
                          double* out, int threads);

// Backward pass matching eval_velocity_sparse. grad_out has one c-vector per
// eval id. Accumulates parameter gradients into grad_params (same layout as
// params) and, when grad_features is non-null, dL/dfeature per set entry.
void eval_velocity_sparse_backward(const ToyFlowModel& model, const FrameSet& set,
                                   const EvalFrame& frame, double t, int label,
                                   const std::vector<uint32_t>& eval_ids, const double* grad_out,
                                   std::vector<double>& grad_params, double* grad_features);

/*----------------------------------- elementwise ops -----------------------------------*/

// (1 - t) s + t eps
void interpolate_noisy(const double* s, const double* eps, size_t n, double t, double* out);
DenseLatentGrid interpolate_noisy(const DenseLatentGrid& s, const DenseLatentGrid& eps, double t);

// eps - s, the flow matching regression target
void flow_matching_target(const double* s, const double* eps, size_t n, double* out);
DenseLatentGrid flow_matching_target(const DenseLatentGrid& s, const DenseLatentGrid& eps);

// s - dt v
void euler_step(double* s, const double* v, size_t n, double dt);

/*----------------------------------- decoders -----------------------------------*/

// Occupancy decoder D_S: linear map channels -> 1 scalar, thresholded at 0.
// Appearance decoder D_L: linear map channels -> (density, r, g, b); colors
// clamp to [0, 1] at decode time.
struct ToyDecoders {
    int channels = 0;
    std::vector<double> occ_w;  // channels
    double occ_b = 0.0;
    std::vector<double> app_w;  // 4 x channels
    std::vector<double> app_b;  // 4

    size_t param_count() const { return occ_w.size() + 1 + app_w.size() + app_b.size(); }

    static ToyDecoders random_init(int channels, uint64_t seed);

    double occupancy_value(const float* feat) const;
    double occupancy_value(const double* feat) const;
    // out = (density, r, g, b), colors clamped to [0, 1]
    void appearance(const float* feat, double out[4]) const;
};

OccupancyField decode_occupancy(const ToyDecoders& dec, const DenseLatentGrid& dense);

// The checkpointable unit: both stage flow models, the decoders, and the
// detail-enhancer mixer layer.
struct ModelBundle {
    FlowModelConfig cfg;
    ToyFlowModel flow_s;
    ToyFlowModel flow_l;
    ToyDecoders decoders;
    FusionLayer fusion;

    static ModelBundle random_init(const FlowModelConfig& cfg, uint64_t seed);
};

/*----------------------------------- training -----------------------------------*/

struct DenseTrainItem {
    DenseLatentGrid latent;
    int label = 0;
};

struct SparseTrainItem {
    SparseLatent latent;
    int label = 0;
};

struct TrainConfig {
    int steps = 2000;
    double lr = 0.05;
    int batch_voxels = 2048;  // voxels sampled per step
    uint64_t seed = 1;
    int val_every = 50;       // validation cadence; 0 disables
    int threads = 1;
};

struct TrainCurves {
    std::vector<double> loss;                    // per-step training loss
    std::vector<std::pair<int, double>> val;     // (step, validation loss)
};

// Flow matching loss for one dense item at fixed (t, eps, voxel sample):
// mean over sampled voxels and channels of |v - (eps - s)|^2. When grad_params
// is non-null it receives dLoss/dparams (same layout as model.params).
double flow_loss_dense(const ToyFlowModel& model, const DenseLatentGrid& s, int label, double t,
                       const std::vector<double>& eps, const std::vector<size_t>& voxel_ids,
                       std::vector<double>* grad_params);

// SGD on the flow matching loss with uniform t. Validation items are held out
// of the gradient steps and scored on frozen (t, eps) draws.
TrainCurves train_flow_matching(ToyFlowModel& model, const std::vector<DenseTrainItem>& train_set,
                                const std::vector<DenseTrainItem>& val_set,
                                const TrainConfig& cfg);

TrainCurves train_flow_matching_sparse(ToyFlowModel& model,
                                       const std::vector<SparseTrainItem>& train_set,
                                       const std::vector<SparseTrainItem>& val_set,
                                       const TrainConfig& cfg);

/*----------------------------------- decoder fitting -----------------------------------*/

struct DecoderCrop {
    DenseLatentGrid latent;     // encoded crop, model channels
    DenseLatentGrid scene;      // ground truth (occ, r, g, b) at the same lattice
};

// Least-squares fit of the occupancy decoder on (latent, +-1 occupancy).
void fit_occupancy_decoder(ToyDecoders& dec, const std::vector<DecoderCrop>& crops);

// Fine-tunes the appearance decoder on (latent, density+color) targets at
// occupied cells. Returns the per-step loss curve; the held-out loss never
// ends above its starting value (best parameters win).
std::vector<double> finetune_decoder(ToyDecoders& dec, const std::vector<DecoderCrop>& train_set,
                                     const std::vector<DecoderCrop>& held_out, int steps,
                                     double lr, uint64_t seed);

double decoder_reconstruction_loss(const ToyDecoders& dec, const std::vector<DecoderCrop>& crops);

}  // namespace lw

#endif
