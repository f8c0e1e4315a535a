#ifndef LW_INITOPT_HPP
#define LW_INITOPT_HPP

#include <string>
#include <vector>

#include "fft.hpp"
#include "flowmodel.hpp"
#include "lattice.hpp"

namespace lw {

// Region constraint for initial-latent optimization: a binary mask selecting
// the constrained voxels and a scalar target over them (positive = should be
// occupied, negative = should stay empty).
struct TargetConstraint {
    MaskVolume mask;             // weights in {0, 1}
    std::vector<float> target;   // one scalar per voxel, read where mask = 1

    void validate(const GridDims& latent_dims) const;
    OccupancyField target_occupancy() const;  // {target > 0} inside the mask
};

// Ground slab positive at z < ground_frac*d, excluded region negative at
// z >= exclude_frac*d, unconstrained in between.
TargetConstraint make_scale_target(const GridDims& dims, double ground_frac, double exclude_frac,
                                   double amplitude);

struct OptConfig {
    double lr = 9.0;
    int max_steps = 10;
    bool spectral = true;      // false: optimize voxel values directly
    double dice_stop = 0.9;
    double spike_ratio = 10.0;  // step-to-step loss growth treated as divergence
    int label = 0;
    int sample_steps = 8;      // Euler steps inside the denoising pass G
    int threads = 1;

    void validate() const;
};

struct OptTraceRow {
    int step = 0;
    double loss = 0.0;
    double iou = 0.0;
    double dice = 0.0;
};

struct OptResult {
    std::vector<double> latent;       // optimized S_T
    std::vector<OptTraceRow> trace;
    bool diverged = false;
    bool converged = false;           // stopped by the Dice threshold
    std::string message;
};

/*----------------------------------- operations -----------------------------------*/

// One full (non-fused) denoising pass G(S_T).
std::vector<double> denoised_endpoint(const ToyFlowModel& model, int label,
                                      const std::vector<double>& initial, const GridDims& dims,
                                      int sample_steps, int threads);

// Linear trajectory approximation S(t) = S_T + (1 - t) [G(S_T) - S_T]_sg with
// the bracket frozen to `constant`; t = 0 gives the endpoint.
std::vector<double> linear_traj_at(const std::vector<double>& initial,
                                   const std::vector<double>& constant, double t);

// Constraint loss over the masked voxels of the decoded endpoint scalar:
// L = sum_mask (y - D_S(endpoint))^2. grad_endpoint (optional) receives
// dL/dendpoint, which equals dL/dS_T under the stop-gradient.
double linear_loss(const ToyDecoders& dec, const std::vector<double>& endpoint,
                   const GridDims& dims, const TargetConstraint& constraint,
                   std::vector<double>* grad_endpoint);

// Pullback of a voxel gradient onto spectral coefficients for the
// parameterization S = Re(fft3_inverse(X)): dL/dX = fft3_forward(dL/dS) / (d h w).
SpectralLatent spectral_pullback(const std::vector<double>& grad, const GridDims& dims);

// Gradient descent on the linear loss with RMS-normalized steps, in the
// configured parameterization. G(S_T) is re-evaluated every step; IoU and Dice
// between the decoded endpoint and the target are recorded per step. Stops at
// max_steps, at Dice >= dice_stop, or on divergence (non-finite loss or a
// spike_ratio loss jump), which is reported in the result rather than thrown.
OptResult optimize_initial_latent(const ToyFlowModel& model, const ToyDecoders& dec,
                                  std::vector<double> initial, const GridDims& dims,
                                  const TargetConstraint& constraint, const OptConfig& cfg);

/*----------------------------------- overlap metrics -----------------------------------*/

// |A & B| / |A | B|; 1.0 when both sets are empty.
double iou(const OccupancyField& a, const OccupancyField& b);
// 2 |A & B| / (|A| + |B|); 1.0 when both sets are empty.
double dice(const OccupancyField& a, const OccupancyField& b);

// Occupancy of the decoded endpoint restricted to the constraint mask.
OccupancyField masked_endpoint_occupancy(const ToyDecoders& dec,
                                         const std::vector<double>& endpoint,
                                         const GridDims& dims, const TargetConstraint& constraint);

}  // namespace lw

#endif
