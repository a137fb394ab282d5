#include "meldiff/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace meldiff {

int64_t shape_size(const std::vector<int64_t>& dims) {
    int64_t n = 1;
    for (int64_t d : dims) {
        if (d < 0) throw std::invalid_argument("tensor dims must be non-negative");
        n *= d;
    }
    return n;
}

Tensor::Tensor(std::vector<int64_t> dims)
    : dims_(std::move(dims)), size_(shape_size(dims_)),
      data_(std::make_shared<std::vector<double>>(static_cast<size_t>(size_), 0.0)) {}

Tensor::Tensor(std::vector<int64_t> dims, std::vector<double> values)
    : dims_(std::move(dims)), size_(shape_size(dims_)),
      data_(std::make_shared<std::vector<double>>(std::move(values))) {
    if (static_cast<int64_t>(data_->size()) != size_)
        throw std::invalid_argument("tensor value count does not match shape " + shape_str());
}

Tensor Tensor::full(std::vector<int64_t> dims, double value) {
    Tensor t(std::move(dims));
    t.fill_(value);
    return t;
}

Tensor Tensor::reshaped(std::vector<int64_t> dims) const {
    if (shape_size(dims) != size_)
        throw std::invalid_argument("reshape element count mismatch: " + shape_str());
    Tensor t;
    t.dims_ = std::move(dims);
    t.size_ = size_;
    t.data_ = data_;
    return t;
}

Tensor Tensor::clone() const {
    Tensor t;
    t.dims_ = dims_;
    t.size_ = size_;
    t.data_ = std::make_shared<std::vector<double>>(*data_);
    return t;
}

Tensor& Tensor::fill_(double v) {
    std::fill(data_->begin(), data_->end(), v);
    return *this;
}

Tensor& Tensor::add_(const Tensor& other, double scale) {
    if (!same_shape(other))
        throw std::invalid_argument("add_ shape mismatch: " + shape_str() + " vs " + other.shape_str());
    const double* src = other.data();
    double* dst = data();
    for (int64_t i = 0; i < size_; ++i) dst[i] += scale * src[i];
    return *this;
}

Tensor& Tensor::mul_(double s) {
    for (double& v : *data_) v *= s;
    return *this;
}

bool Tensor::all_finite() const {
    for (double v : *data_)
        if (!std::isfinite(v)) return false;
    return true;
}

double Tensor::max_abs() const {
    double m = 0.0;
    for (double v : *data_) m = std::max(m, std::abs(v));
    return m;
}

std::string Tensor::shape_str() const {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < dims_.size(); ++i) os << (i ? "," : "") << dims_[i];
    os << "]";
    return os.str();
}

double Rng::uniform(double lo, double hi) {
    std::uniform_real_distribution<double> dist(lo, hi);
    return dist(gen_);
}

double Rng::normal(double mean, double stddev) {
    std::normal_distribution<double> dist(mean, stddev);
    return dist(gen_);
}

int64_t Rng::uniform_int(int64_t lo, int64_t hi) {
    std::uniform_int_distribution<int64_t> dist(lo, hi);
    return dist(gen_);
}

Tensor Rng::normal_tensor(std::vector<int64_t> dims, double stddev) {
    Tensor t(std::move(dims));
    std::normal_distribution<double> dist(0.0, stddev);
    double* p = t.data();
    for (int64_t i = 0; i < t.size(); ++i) p[i] = dist(gen_);
    return t;
}

Tensor Rng::uniform_tensor(std::vector<int64_t> dims, double lo, double hi) {
    Tensor t(std::move(dims));
    std::uniform_real_distribution<double> dist(lo, hi);
    double* p = t.data();
    for (int64_t i = 0; i < t.size(); ++i) p[i] = dist(gen_);
    return t;
}

}  // namespace meldiff
