#pragma once

#include <cstdint>
#include <memory>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace meldiff {

/// Dense row-major tensor of doubles. Copies are shallow (shared storage);
/// use clone() for a deep copy.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::vector<int64_t> dims);
    Tensor(std::vector<int64_t> dims, std::vector<double> values);

    static Tensor zeros(std::vector<int64_t> dims) { return Tensor(std::move(dims)); }
    static Tensor full(std::vector<int64_t> dims, double value);
    static Tensor scalar(double value) { return Tensor({1}, {value}); }

    bool defined() const { return data_ != nullptr; }
    int64_t size() const { return size_; }
    int rank() const { return static_cast<int>(dims_.size()); }
    int64_t dim(int i) const { return dims_.at(static_cast<size_t>(i)); }
    const std::vector<int64_t>& dims() const { return dims_; }

    double* data() { return data_->data(); }
    const double* data() const { return data_->data(); }
    double& operator[](int64_t i) { return (*data_)[static_cast<size_t>(i)]; }
    double operator[](int64_t i) const { return (*data_)[static_cast<size_t>(i)]; }

    /// Same storage, new shape (element count must match).
    Tensor reshaped(std::vector<int64_t> dims) const;
    Tensor clone() const;

    Tensor& fill_(double v);
    Tensor& add_(const Tensor& other, double scale = 1.0);
    Tensor& mul_(double s);

    bool same_shape(const Tensor& other) const { return dims_ == other.dims_; }
    bool all_finite() const;
    double max_abs() const;
    std::string shape_str() const;

private:
    std::vector<int64_t> dims_;
    int64_t size_ = 0;
    std::shared_ptr<std::vector<double>> data_;
};

int64_t shape_size(const std::vector<int64_t>& dims);

/// Seeded random source. All stochastic code takes one of these explicitly
/// so runs are reproducible.
class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    double uniform(double lo = 0.0, double hi = 1.0);
    double normal(double mean = 0.0, double stddev = 1.0);
    int64_t uniform_int(int64_t lo, int64_t hi);  // inclusive bounds

    Tensor normal_tensor(std::vector<int64_t> dims, double stddev = 1.0);
    Tensor uniform_tensor(std::vector<int64_t> dims, double lo, double hi);

    std::mt19937_64& engine() { return gen_; }

private:
    std::mt19937_64 gen_;
};

}  // namespace meldiff
