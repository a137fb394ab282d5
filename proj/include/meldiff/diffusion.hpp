#pragma once

#include <cstdint>
#include <vector>

#include "meldiff/autograd.hpp"
#include "meldiff/tensor.hpp"

namespace meldiff::diffusion {

/// Per-timestep schedule arrays, 1-based timesteps t in {1..T} with the
/// convention alpha_bar(0) = 1 so the t=1 posterior is deterministic.
struct NoiseSchedule {
    int64_t T = 0;
    std::vector<double> beta;
    std::vector<double> alpha;
    std::vector<double> alpha_bar;
    std::vector<double> alpha_bar_prev;
    std::vector<double> posterior_variance;

    double beta_at(int64_t t) const;
    double alpha_at(int64_t t) const;
    double alpha_bar_at(int64_t t) const;  // accepts t = 0
    double posterior_variance_at(int64_t t) const;
    void check_timestep(int64_t t) const;
    void validate() const;
};

NoiseSchedule cosine_schedule(int64_t T);

/// Inference-side noise model: x is one sample [c, f, l].
struct NoisePredictor {
    virtual Tensor predict(const Tensor& x, int64_t t) const = 0;
    virtual ~NoisePredictor() = default;
};

/// Training-side noise model over batches [n, c, f, l] with per-sample
/// timesteps; gradients flow through the returned node.
struct DifferentiableNoisePredictor {
    virtual ag::Var predict_batch(const ag::Var& x, const std::vector<int64_t>& ts) = 0;
    virtual ~DifferentiableNoisePredictor() = default;
};

Tensor forward_sample(const Tensor& x0, int64_t t, const Tensor& eps, const NoiseSchedule& sched);

enum class Parameterization { X0, Eps };

struct PosteriorMoments {
    Tensor mean;
    double variance = 0.0;
};

PosteriorMoments posterior_mean_variance(const Tensor& x_t, const Tensor& x0_or_eps, int64_t t,
                                         const NoiseSchedule& sched, Parameterization param);

ag::Var training_loss(DifferentiableNoisePredictor& model, const Tensor& x0, int64_t t,
                      const Tensor& eps, const NoiseSchedule& sched);

/// Variance used by the DDIM update for a t -> t_prev transition.
double ddim_variance(const NoiseSchedule& sched, int64_t t, int64_t t_prev, double eta);

Tensor ddim_step(const Tensor& x_t, const Tensor& eps_pred, int64_t t, int64_t t_prev,
                 const NoiseSchedule& sched, double eta, Rng* rng = nullptr);

/// Evenly spaced descending timesteps, ending with the final step to 0.
std::vector<int64_t> sampling_timesteps(int64_t T, int64_t num_steps);

Tensor sample_loop(const NoisePredictor& model, const std::vector<int64_t>& shape,
                   const NoiseSchedule& sched, int64_t num_steps, double eta, uint64_t seed);

struct RepaintParams {
    int64_t jump_length = 10;
    int64_t jump_resamplings = 10;
};

Tensor repaint_loop(const NoisePredictor& model, const Tensor& known, const Tensor& mask,
                    const NoiseSchedule& sched, int64_t num_steps, const RepaintParams& params,
                    uint64_t seed, double eta = 0.0);

}  // namespace meldiff::diffusion
