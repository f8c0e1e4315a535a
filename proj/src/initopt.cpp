#include "initopt.hpp"

#include <algorithm>
#include <cmath>

#include "fusion.hpp"
#include "util.hpp"

namespace lw {

void TargetConstraint::validate(const GridDims& latent_dims) const {
    if (mask.dims.d != latent_dims.d || mask.dims.h != latent_dims.h ||
        mask.dims.w != latent_dims.w) {
        fail_data("constraint mask does not match latent dims");
    }
    if (target.size() != mask.weights.size()) {
        fail_data("constraint target does not match mask");
    }
    bool any = false;
    for (float w : mask.weights) {
        if (w != 0.0f && w != 1.0f) {
            fail_data("constraint mask must be binary");
        }
        any = any || w == 1.0f;
    }
    if (!any) {
        fail_data("constraint mask is empty");
    }
}

OccupancyField TargetConstraint::target_occupancy() const {
    OccupancyField out(mask.dims, -1.0f);
    for (size_t i = 0; i < target.size(); ++i) {
        if (mask.weights[i] == 1.0f && target[i] > 0.0f) {
            out.values[i] = 1.0f;
        }
    }
    return out;
}

TargetConstraint make_scale_target(const GridDims& dims, double ground_frac, double exclude_frac,
                                   double amplitude) {
    if (!(ground_frac >= 0.0 && ground_frac <= exclude_frac && exclude_frac <= 1.0)) {
        fail_data("scale target needs 0 <= ground_frac <= exclude_frac <= 1");
    }
    GridDims mask_dims = dims;
    mask_dims.c = 1;
    TargetConstraint out;
    out.mask = MaskVolume(mask_dims);
    out.target.assign(mask_dims.voxels(), 0.0f);
    int ground_top = static_cast<int>(ground_frac * dims.d);
    int exclude_bottom = static_cast<int>(exclude_frac * dims.d);
    for (int z = 0; z < dims.d; ++z) {
        bool in_ground = z < ground_top;
        bool in_excluded = z >= exclude_bottom;
        if (!in_ground && !in_excluded) {
            continue;
        }
        for (int y = 0; y < dims.h; ++y) {
            for (int x = 0; x < dims.w; ++x) {
                size_t i = voxel_index(mask_dims, x, y, z);
                out.mask.weights[i] = 1.0f;
                out.target[i] = static_cast<float>(in_ground ? amplitude : -amplitude);
            }
        }
    }
    return out;
}

void OptConfig::validate() const {
    if (!(lr >= 0.0)) {
        fail_data("optimizer lr must be >= 0");
    }
    if (max_steps < 1) {
        fail_data("optimizer max_steps must be >= 1");
    }
    if (sample_steps < 1) {
        fail_data("optimizer sample_steps must be >= 1");
    }
    if (!(spike_ratio > 1.0)) {
        fail_data("optimizer spike_ratio must be > 1");
    }
}

/*----------------------------------- operations -----------------------------------*/

std::vector<double> denoised_endpoint(const ToyFlowModel& model, int label,
                                      const std::vector<double>& initial, const GridDims& dims,
                                      int sample_steps, int threads) {
    return sample_plain_from(model, label, initial, dims, sample_steps, threads);
}

std::vector<double> linear_traj_at(const std::vector<double>& initial,
                                   const std::vector<double>& constant, double t) {
    if (initial.size() != constant.size()) {
        fail_data("linear_traj_at size mismatch");
    }
    FlowTime{t}.validate();
    std::vector<double> out(initial.size());
    double a = 1.0 - t;
    for (size_t i = 0; i < out.size(); ++i) {
        out[i] = initial[i] + a * constant[i];
    }
    return out;
}

double linear_loss(const ToyDecoders& dec, const std::vector<double>& endpoint,
                   const GridDims& dims, const TargetConstraint& constraint,
                   std::vector<double>* grad_endpoint) {
    constraint.validate(dims);
    if (endpoint.size() != dims.values()) {
        fail_data("linear_loss endpoint size mismatch");
    }
    if (grad_endpoint != nullptr) {
        grad_endpoint->assign(endpoint.size(), 0.0);
    }
    const int c = dims.c;
    double loss = 0.0;
    size_t voxels = dims.voxels();
    for (size_t i = 0; i < voxels; ++i) {
        if (constraint.mask.weights[i] != 1.0f) {
            continue;
        }
        double pred = dec.occupancy_value(endpoint.data() + i * c);
        double r = pred - constraint.target[i];
        loss += r * r;
        if (grad_endpoint != nullptr) {
            double g = 2.0 * r;
            double* slot = grad_endpoint->data() + i * c;
            for (int ch = 0; ch < c; ++ch) {
                slot[ch] = g * dec.occ_w[ch];
            }
        }
    }
    return loss;
}

SpectralLatent spectral_pullback(const std::vector<double>& grad, const GridDims& dims) {
    SpectralLatent out = fft3_forward(grad, dims);
    double norm = 1.0 / static_cast<double>(dims.voxels());
    for (auto& v : out.coeff) {
        v *= norm;
    }
    return out;
}

/*----------------------------------- metrics -----------------------------------*/

static void check_same_dims(const OccupancyField& a, const OccupancyField& b) {
    if (a.dims.d != b.dims.d || a.dims.h != b.dims.h || a.dims.w != b.dims.w) {
        fail_data("occupancy fields have different dims");
    }
}

double iou(const OccupancyField& a, const OccupancyField& b) {
    check_same_dims(a, b);
    size_t inter = 0, uni = 0;
    for (size_t i = 0; i < a.values.size(); ++i) {
        bool av = a.values[i] > a.threshold;
        bool bv = b.values[i] > b.threshold;
        inter += av && bv;
        uni += av || bv;
    }
    return uni == 0 ? 1.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

double dice(const OccupancyField& a, const OccupancyField& b) {
    check_same_dims(a, b);
    size_t inter = 0, total = 0;
    for (size_t i = 0; i < a.values.size(); ++i) {
        bool av = a.values[i] > a.threshold;
        bool bv = b.values[i] > b.threshold;
        inter += av && bv;
        total += static_cast<size_t>(av) + static_cast<size_t>(bv);
    }
    return total == 0 ? 1.0 : 2.0 * static_cast<double>(inter) / static_cast<double>(total);
}

OccupancyField masked_endpoint_occupancy(const ToyDecoders& dec,
                                         const std::vector<double>& endpoint,
                                         const GridDims& dims,
                                         const TargetConstraint& constraint) {
    GridDims odims = dims;
    odims.c = 1;
    OccupancyField out(odims, -1.0f);
    size_t voxels = dims.voxels();
    for (size_t i = 0; i < voxels; ++i) {
        if (constraint.mask.weights[i] != 1.0f) {
            continue;
        }
        double pred = dec.occupancy_value(endpoint.data() + i * dims.c);
        out.values[i] = pred > 0.0 ? 1.0f : -1.0f;
    }
    return out;
}

/*----------------------------------- optimizer -----------------------------------*/

namespace {

double rms_of(const std::vector<double>& v) {
    double acc = 0.0;
    for (double x : v) {
        acc += x * x;
    }
    return std::sqrt(acc / static_cast<double>(v.size()));
}

double rms_of(const SpectralLatent& s) {
    double acc = 0.0;
    for (const auto& x : s.coeff) {
        acc += x.real() * x.real() + x.imag() * x.imag();
    }
    return std::sqrt(acc / (2.0 * static_cast<double>(s.coeff.size())));
}

}  // namespace

OptResult optimize_initial_latent(const ToyFlowModel& model, const ToyDecoders& dec,
                                  std::vector<double> initial, const GridDims& dims,
                                  const TargetConstraint& constraint, const OptConfig& cfg) {
    cfg.validate();
    constraint.validate(dims);
    if (initial.size() != dims.values()) {
        fail_data("optimize_initial_latent initial latent size mismatch");
    }
    OptResult result;
    OccupancyField target_occ = constraint.target_occupancy();
    std::vector<double> grad;
    double prev_loss = 0.0;

    for (int step = 0; step <= cfg.max_steps; ++step) {
        // G(S_T) refreshed at the current iterate; frozen for the gradient
        std::vector<double> endpoint = denoised_endpoint(model, cfg.label, initial, dims,
                                                         cfg.sample_steps, cfg.threads);
        double loss = linear_loss(dec, endpoint, dims, constraint, &grad);
        OccupancyField occ = masked_endpoint_occupancy(dec, endpoint, dims, constraint);
        OptTraceRow row{step, loss, iou(occ, target_occ), dice(occ, target_occ)};
        result.trace.push_back(row);

        if (!std::isfinite(loss)) {
            result.diverged = true;
            result.message = format("non-finite loss at step %d", step);
            break;
        }
        if (step > 0 && loss > cfg.spike_ratio * prev_loss && prev_loss > 0.0) {
            result.diverged = true;
            result.message = format("loss spiked %.3gx at step %d (%.6g -> %.6g)",
                                    loss / prev_loss, step, prev_loss, loss);
            break;
        }
        prev_loss = loss;
        if (row.dice >= cfg.dice_stop) {
            result.converged = true;
            break;
        }
        if (step == cfg.max_steps) {
            break;
        }

        if (cfg.lr == 0.0) {
            continue;
        }
        if (cfg.spectral) {
            SpectralLatent gx = spectral_pullback(grad, dims);
            double scale = rms_of(gx);
            if (scale > 0.0) {
                SpectralLatent coeffs = fft3_forward(initial, dims);
                double factor = cfg.lr / scale;
                for (size_t i = 0; i < coeffs.coeff.size(); ++i) {
                    coeffs.coeff[i] -= factor * gx.coeff[i];
                }
                initial = fft3_inverse_real(coeffs);
            }
        } else {
            double scale = rms_of(grad);
            if (scale > 0.0) {
                double factor = cfg.lr / scale;
                for (size_t i = 0; i < initial.size(); ++i) {
                    initial[i] -= factor * grad[i];
                }
            }
        }
    }
    result.latent = std::move(initial);
    return result;
}

}  // namespace lw
