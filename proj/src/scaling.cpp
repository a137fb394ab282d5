#include "meldiff/scaling.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace meldiff::scaling {

namespace {

// Iterates a tensor as (feature, everything-else) given the feature axis at
// rank-2. groups = product of dims before the feature axis, inner = trailing.
struct FeatureLayout {
    int64_t groups;
    int64_t features;
    int64_t inner;
};

FeatureLayout feature_layout(const Tensor& x, int64_t num_features) {
    if (x.rank() < 2)
        throw std::invalid_argument("scaler input must have rank >= 2, got " + x.shape_str());
    FeatureLayout layout{};
    layout.features = x.dim(x.rank() - 2);
    layout.inner = x.dim(x.rank() - 1);
    layout.groups = 1;
    for (int i = 0; i + 2 < x.rank(); ++i) layout.groups *= x.dim(i);
    if (layout.features != num_features)
        throw std::invalid_argument("scaler expects " + std::to_string(num_features) +
                                    " features, input has " + std::to_string(layout.features));
    return layout;
}

template <typename Fn>
void for_each_feature(const Tensor& x, const FeatureLayout& lo, Fn&& fn) {
    const double* p = x.data();
    for (int64_t g = 0; g < lo.groups; ++g)
        for (int64_t f = 0; f < lo.features; ++f) {
            const double* row = p + (g * lo.features + f) * lo.inner;
            fn(f, row, lo.inner);
        }
}

}  // namespace

StandardScaler::StandardScaler(int64_t num_features, double momentum, double momentum_decay,
                               double eps)
    : num_features_(num_features), momentum_(momentum), momentum_decay_(momentum_decay),
      eps_(eps), running_mean_(static_cast<size_t>(num_features), 0.0),
      running_var_(static_cast<size_t>(num_features), 0.0) {
    if (num_features < 1) throw std::invalid_argument("scaler needs at least one feature");
    if (momentum < 0.0 || momentum > 1.0) throw std::invalid_argument("momentum must be in [0,1]");
    if (momentum_decay <= 0.0 || momentum_decay > 1.0)
        throw std::invalid_argument("momentum decay must be in (0,1]");
}

Tensor StandardScaler::apply(const Tensor& x) {
    if (!x.all_finite()) throw std::invalid_argument("scaler input must be finite");
    const FeatureLayout lo = feature_layout(x, num_features_);
    const int64_t per_feature = lo.groups * lo.inner;

    std::vector<double> mean(static_cast<size_t>(num_features_), 0.0);
    std::vector<double> var(static_cast<size_t>(num_features_), 0.0);

    if (mode_ == ScalerMode::Training) {
        for_each_feature(x, lo, [&](int64_t f, const double* row, int64_t n) {
            for (int64_t i = 0; i < n; ++i) mean[static_cast<size_t>(f)] += row[i];
        });
        for (auto& m : mean) m /= static_cast<double>(per_feature);
        for_each_feature(x, lo, [&](int64_t f, const double* row, int64_t n) {
            const double m = mean[static_cast<size_t>(f)];
            for (int64_t i = 0; i < n; ++i) {
                const double d = row[i] - m;
                var[static_cast<size_t>(f)] += d * d;
            }
        });
        for (auto& v : var) v /= static_cast<double>(per_feature);

        if (!initialized_) {
            running_mean_ = mean;
            running_var_ = var;
            initialized_ = true;
        }
        momentum_ *= momentum_decay_;
        for (int64_t f = 0; f < num_features_; ++f) {
            running_mean_[static_cast<size_t>(f)] =
                (1.0 - momentum_) * running_mean_[static_cast<size_t>(f)] +
                momentum_ * mean[static_cast<size_t>(f)];
            running_var_[static_cast<size_t>(f)] =
                (1.0 - momentum_) * running_var_[static_cast<size_t>(f)] +
                momentum_ * var[static_cast<size_t>(f)];
        }
    } else {
        if (!initialized_)
            throw std::logic_error("standard scaler used in inference mode before any training batch");
        mean = running_mean_;
        var = running_var_;
    }

    Tensor out(x.dims());
    const double* src = x.data();
    double* dst = out.data();
    for (int64_t g = 0; g < lo.groups; ++g)
        for (int64_t f = 0; f < lo.features; ++f) {
            const double m = mean[static_cast<size_t>(f)];
            const double s = std::sqrt(var[static_cast<size_t>(f)] + eps_);
            const int64_t base = (g * lo.features + f) * lo.inner;
            for (int64_t i = 0; i < lo.inner; ++i) dst[base + i] = (src[base + i] - m) / s;
        }
    return out;
}

Tensor StandardScaler::inverse(const Tensor& y) const {
    if (!initialized_)
        throw std::logic_error("standard scaler inverse requires initialized running statistics");
    const FeatureLayout lo = feature_layout(y, num_features_);
    Tensor out(y.dims());
    const double* src = y.data();
    double* dst = out.data();
    for (int64_t g = 0; g < lo.groups; ++g)
        for (int64_t f = 0; f < lo.features; ++f) {
            const double m = running_mean_[static_cast<size_t>(f)];
            const double s = std::sqrt(running_var_[static_cast<size_t>(f)] + eps_);
            const int64_t base = (g * lo.features + f) * lo.inner;
            for (int64_t i = 0; i < lo.inner; ++i) dst[base + i] = src[base + i] * s + m;
        }
    return out;
}

void StandardScaler::restore(std::vector<double> mean, std::vector<double> var, double momentum,
                             bool initialized) {
    if (static_cast<int64_t>(mean.size()) != num_features_ ||
        static_cast<int64_t>(var.size()) != num_features_)
        throw std::invalid_argument("restored scaler state has wrong feature count");
    running_mean_ = std::move(mean);
    running_var_ = std::move(var);
    momentum_ = momentum;
    initialized_ = initialized;
}

MinMaxScaler::MinMaxScaler(int64_t num_features, double y_min, double y_max, double momentum,
                           double momentum_decay)
    : num_features_(num_features), y_min_(y_min), y_max_(y_max), momentum_(momentum),
      momentum_decay_(momentum_decay),
      running_min_(static_cast<size_t>(num_features), 0.0),
      running_max_(static_cast<size_t>(num_features), 0.0) {
    if (num_features < 1) throw std::invalid_argument("scaler needs at least one feature");
    if (!(y_min < y_max)) throw std::invalid_argument("require y_min < y_max");
    if (momentum < 0.0 || momentum > 1.0) throw std::invalid_argument("momentum must be in [0,1]");
    if (momentum_decay <= 0.0 || momentum_decay > 1.0)
        throw std::invalid_argument("momentum decay must be in (0,1]");
}

Tensor MinMaxScaler::apply(const Tensor& x) {
    if (!x.all_finite()) throw std::invalid_argument("scaler input must be finite");
    const FeatureLayout lo = feature_layout(x, num_features_);

    std::vector<double> lo_v(static_cast<size_t>(num_features_),
                             std::numeric_limits<double>::infinity());
    std::vector<double> hi_v(static_cast<size_t>(num_features_),
                             -std::numeric_limits<double>::infinity());

    if (mode_ == ScalerMode::Training) {
        for_each_feature(x, lo, [&](int64_t f, const double* row, int64_t n) {
            for (int64_t i = 0; i < n; ++i) {
                lo_v[static_cast<size_t>(f)] = std::min(lo_v[static_cast<size_t>(f)], row[i]);
                hi_v[static_cast<size_t>(f)] = std::max(hi_v[static_cast<size_t>(f)], row[i]);
            }
        });
        if (!initialized_) {
            running_min_ = lo_v;
            running_max_ = hi_v;
            initialized_ = true;
        }
        momentum_ *= momentum_decay_;
        for (int64_t f = 0; f < num_features_; ++f) {
            running_min_[static_cast<size_t>(f)] =
                (1.0 - momentum_) * running_min_[static_cast<size_t>(f)] +
                momentum_ * lo_v[static_cast<size_t>(f)];
            running_max_[static_cast<size_t>(f)] =
                (1.0 - momentum_) * running_max_[static_cast<size_t>(f)] +
                momentum_ * hi_v[static_cast<size_t>(f)];
        }
    } else {
        if (!initialized_)
            throw std::logic_error("min-max scaler used in inference mode before any training batch");
        lo_v = running_min_;
        hi_v = running_max_;
    }

    Tensor out(x.dims());
    const double* src = x.data();
    double* dst = out.data();
    const double range = y_max_ - y_min_;
    for (int64_t g = 0; g < lo.groups; ++g)
        for (int64_t f = 0; f < lo.features; ++f) {
            const double mn = lo_v[static_cast<size_t>(f)];
            const double denom = std::max(hi_v[static_cast<size_t>(f)] - mn, 1e-8);
            const int64_t base = (g * lo.features + f) * lo.inner;
            for (int64_t i = 0; i < lo.inner; ++i) {
                const double y = (src[base + i] - mn) / denom * range + y_min_;
                dst[base + i] = std::clamp(y, y_min_, y_max_);
            }
        }
    return out;
}

Tensor MinMaxScaler::inverse(const Tensor& y) const {
    if (!initialized_)
        throw std::logic_error("min-max scaler inverse requires initialized running statistics");
    const FeatureLayout lo = feature_layout(y, num_features_);
    Tensor out(y.dims());
    const double* src = y.data();
    double* dst = out.data();
    const double range = y_max_ - y_min_;
    for (int64_t g = 0; g < lo.groups; ++g)
        for (int64_t f = 0; f < lo.features; ++f) {
            const double mn = running_min_[static_cast<size_t>(f)];
            const double mx = running_max_[static_cast<size_t>(f)];
            const int64_t base = (g * lo.features + f) * lo.inner;
            for (int64_t i = 0; i < lo.inner; ++i)
                dst[base + i] = (src[base + i] - y_min_) / range * (mx - mn) + mn;
        }
    return out;
}

void MinMaxScaler::restore(std::vector<double> min, std::vector<double> max, double momentum,
                           bool initialized) {
    if (static_cast<int64_t>(min.size()) != num_features_ ||
        static_cast<int64_t>(max.size()) != num_features_)
        throw std::invalid_argument("restored scaler state has wrong feature count");
    running_min_ = std::move(min);
    running_max_ = std::move(max);
    momentum_ = momentum;
    initialized_ = initialized;
}

Tensor log_compress(const Tensor& mel, double eps) {
    Tensor out(mel.dims());
    for (int64_t i = 0; i < mel.size(); ++i) out[i] = std::log(mel[i] + eps);
    return out;
}

Tensor log_expand(const Tensor& logmel, double eps) {
    Tensor out(logmel.dims());
    for (int64_t i = 0; i < logmel.size(); ++i) out[i] = std::exp(logmel[i]) - eps;
    return out;
}

}  // namespace meldiff::scaling
