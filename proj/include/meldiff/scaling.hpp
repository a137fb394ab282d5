#pragma once

#include <cstdint>
#include <vector>

#include "meldiff/tensor.hpp"

namespace meldiff::scaling {

enum class ScalerMode { Training, Inference };

/// Streaming standardization with decaying-momentum running statistics.
/// Statistics are kept per feature, where the feature axis is the
/// second-to-last tensor dimension ([c,f,l] or [n,c,f,l] both use f).
/// Training normalizes with batch statistics and updates the running ones;
/// inference normalizes with running statistics and never mutates state.
class StandardScaler {
public:
    StandardScaler(int64_t num_features, double momentum, double momentum_decay,
                   double eps = 1e-5);

    Tensor apply(const Tensor& x);
    Tensor inverse(const Tensor& y) const;

    void set_mode(ScalerMode mode) { mode_ = mode; }
    ScalerMode mode() const { return mode_; }
    bool initialized() const { return initialized_; }
    int64_t num_features() const { return num_features_; }
    double momentum() const { return momentum_; }
    double momentum_decay() const { return momentum_decay_; }
    double eps() const { return eps_; }
    const std::vector<double>& running_mean() const { return running_mean_; }
    const std::vector<double>& running_var() const { return running_var_; }

    // checkpoint restore
    void restore(std::vector<double> mean, std::vector<double> var, double momentum,
                 bool initialized);

private:
    int64_t num_features_;
    double momentum_;
    double momentum_decay_;
    double eps_;
    bool initialized_ = false;
    ScalerMode mode_ = ScalerMode::Training;
    std::vector<double> running_mean_;
    std::vector<double> running_var_;
};

/// Streaming min-max scaling into [y_min, y_max] with decaying-momentum
/// running extrema; outputs are always clamped into the target range.
class MinMaxScaler {
public:
    MinMaxScaler(int64_t num_features, double y_min, double y_max, double momentum,
                 double momentum_decay);

    Tensor apply(const Tensor& x);
    Tensor inverse(const Tensor& y) const;

    void set_mode(ScalerMode mode) { mode_ = mode; }
    ScalerMode mode() const { return mode_; }
    bool initialized() const { return initialized_; }
    int64_t num_features() const { return num_features_; }
    double y_min() const { return y_min_; }
    double y_max() const { return y_max_; }
    double momentum() const { return momentum_; }
    double momentum_decay() const { return momentum_decay_; }
    const std::vector<double>& running_min() const { return running_min_; }
    const std::vector<double>& running_max() const { return running_max_; }

    void restore(std::vector<double> min, std::vector<double> max, double momentum,
                 bool initialized);

private:
    int64_t num_features_;
    double y_min_;
    double y_max_;
    double momentum_;
    double momentum_decay_;
    bool initialized_ = false;
    ScalerMode mode_ = ScalerMode::Training;
    std::vector<double> running_min_;
    std::vector<double> running_max_;
};

/// Log compression applied to mel spectrograms ahead of the scalers.
Tensor log_compress(const Tensor& mel, double eps = 1e-5);
Tensor log_expand(const Tensor& logmel, double eps = 1e-5);

}  // namespace meldiff::scaling
