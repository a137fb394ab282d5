#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "meldiff/scaling.hpp"

using namespace meldiff;
using namespace meldiff::scaling;

namespace {

// Line-by-line simulation of the streaming standardization recurrence on a
// single feature, kept independent of the library implementation.
struct HandStandard {
    double mu_r = 0.0, var_r = 0.0, m, d, eps;
    bool init = false;

    HandStandard(double m0, double d0, double e) : m(m0), d(d0), eps(e) {}

    std::vector<double> train_step(const std::vector<double>& batch) {
        double mu_b = 0.0;
        for (double v : batch) mu_b += v;
        mu_b /= static_cast<double>(batch.size());
        double var_b = 0.0;
        for (double v : batch) var_b += (v - mu_b) * (v - mu_b);
        var_b /= static_cast<double>(batch.size());
        if (!init) {
            mu_r = mu_b;
            var_r = var_b;
            init = true;
        }
        m = d * m;
        mu_r = (1.0 - m) * mu_r + m * mu_b;
        var_r = (1.0 - m) * var_r + m * var_b;
        std::vector<double> out;
        for (double v : batch) out.push_back((v - mu_b) / std::sqrt(var_b + eps));
        return out;
    }

    std::vector<double> infer(const std::vector<double>& batch) const {
        std::vector<double> out;
        for (double v : batch) out.push_back((v - mu_r) / std::sqrt(var_r + eps));
        return out;
    }
};

struct HandMinMax {
    double min_r = 0.0, max_r = 0.0, m, d, ymin, ymax;
    bool init = false;

    HandMinMax(double m0, double d0, double lo, double hi) : m(m0), d(d0), ymin(lo), ymax(hi) {}

    std::vector<double> step(const std::vector<double>& batch, bool training) {
        double mn, mx;
        if (training) {
            mn = batch[0];
            mx = batch[0];
            for (double v : batch) {
                mn = std::min(mn, v);
                mx = std::max(mx, v);
            }
            if (!init) {
                min_r = mn;
                max_r = mx;
                init = true;
            }
            m = d * m;
            min_r = (1.0 - m) * min_r + m * mn;
            max_r = (1.0 - m) * max_r + m * mx;
        } else {
            mn = min_r;
            mx = max_r;
        }
        std::vector<double> out;
        for (double v : batch) {
            double y = (v - mn) / std::max(mx - mn, 1e-8) * (ymax - ymin) + ymin;
            out.push_back(std::clamp(y, ymin, ymax));
        }
        return out;
    }
};

Tensor row(const std::vector<double>& v) {
    return Tensor({1, static_cast<int64_t>(v.size())}, v);
}

}  // namespace

TEST_CASE("standard scaler basics") {
    SUBCASE("constant batch maps to zero") {
        StandardScaler s(1, 0.001, 0.99);
        Tensor y = s.apply(row({7.0, 7.0, 7.0, 7.0}));
        for (int64_t i = 0; i < y.size(); ++i) CHECK(y[i] == 0.0);
    }
    SUBCASE("two-point batch") {
        StandardScaler s(1, 0.001, 0.99, 1e-5);
        Tensor y = s.apply(row({0.0, 2.0}));
        const double expect = 1.0 / std::sqrt(1.0 + 1e-5);
        CHECK(y[0] == doctest::Approx(-expect).epsilon(1e-12));
        CHECK(y[1] == doctest::Approx(expect).epsilon(1e-12));
    }
    SUBCASE("momentum decays once per training call") {
        StandardScaler s(1, 0.001, 0.99);
        for (int i = 0; i < 3; ++i) s.apply(row({static_cast<double>(i), 1.0}));
        CHECK(s.momentum() == doctest::Approx(0.001 * 0.99 * 0.99 * 0.99).epsilon(1e-15));
    }
}

TEST_CASE("standard scaler inverse") {
    StandardScaler s(1, 0.001, 0.99, 1e-12);
    s.apply(row({1.0, 9.0}));  // initialize: mean 5, var 16
    s.set_mode(ScalerMode::Inference);

    SUBCASE("y = 0 recovers the running mean") {
        Tensor x = s.inverse(row({0.0}));
        CHECK(x[0] == doctest::Approx(5.0).epsilon(1e-12));
    }
    SUBCASE("explicit state arithmetic") {
        StandardScaler t(1, 0.001, 0.99, 1e-12);
        t.restore({5.0}, {4.0}, 0.001, true);
        Tensor x = t.inverse(row({1.0}));
        CHECK(x[0] == doctest::Approx(7.0).epsilon(1e-9));
    }
    SUBCASE("inverse of forward is the identity in inference mode") {
        Rng rng(5);
        Tensor batch = rng.normal_tensor({4, 1, 8}, 3.0);
        Tensor y = s.apply(batch);
        Tensor x = s.inverse(y);
        double err = 0.0;
        for (int64_t i = 0; i < x.size(); ++i) err = std::max(err, std::abs(x[i] - batch[i]));
        CHECK(err < 1e-6);
    }
    SUBCASE("uninitialized inverse is a state error") {
        StandardScaler fresh(1, 0.001, 0.99);
        CHECK_THROWS_AS(fresh.inverse(row({0.0})), std::logic_error);
    }
}

TEST_CASE("min-max scaler basics") {
    SUBCASE("maps batch extrema onto the target range") {
        MinMaxScaler s(1, -1.0, 1.0, 0.001, 0.99);
        Tensor y = s.apply(row({0.0, 5.0, 10.0}));
        CHECK(y[0] == doctest::Approx(-1.0).epsilon(1e-12));
        CHECK(y[1] == doctest::Approx(0.0).epsilon(1e-12));
        CHECK(y[2] == doctest::Approx(1.0).epsilon(1e-12));
    }
    SUBCASE("inference clamps beyond the running maximum") {
        MinMaxScaler s(1, -1.0, 1.0, 0.001, 0.99);
        s.apply(row({0.0, 10.0}));
        s.set_mode(ScalerMode::Inference);
        Tensor y = s.apply(row({25.0}));
        CHECK(y[0] == 1.0);
    }
    SUBCASE("constant batch degenerates to y_min") {
        MinMaxScaler s(1, -1.0, 1.0, 0.001, 0.99);
        Tensor y = s.apply(row({3.0, 3.0, 3.0}));
        for (int64_t i = 0; i < y.size(); ++i) {
            CHECK(y[i] == -1.0);
            CHECK(std::isfinite(y[i]));
        }
    }
}

TEST_CASE("min-max scaler inverse") {
    MinMaxScaler s(1, -1.0, 1.0, 0.001, 0.99);
    s.apply(row({2.0, 6.0}));
    s.set_mode(ScalerMode::Inference);

    SUBCASE("endpoints and midpoint") {
        CHECK(s.inverse(row({-1.0}))[0] == doctest::Approx(2.0).epsilon(1e-12));
        CHECK(s.inverse(row({1.0}))[0] == doctest::Approx(6.0).epsilon(1e-12));
        CHECK(s.inverse(row({0.0}))[0] == doctest::Approx(4.0).epsilon(1e-12));
    }
    SUBCASE("round trip for in-range input") {
        Rng rng(6);
        Tensor batch = rng.uniform_tensor({2, 1, 16}, 2.0, 6.0);
        Tensor y = s.apply(batch);
        Tensor x = s.inverse(y);
        double err = 0.0;
        for (int64_t i = 0; i < x.size(); ++i) err = std::max(err, std::abs(x[i] - batch[i]));
        CHECK(err < 1e-6);
    }
    SUBCASE("uninitialized inverse is a state error") {
        MinMaxScaler fresh(1, -1.0, 1.0, 0.001, 0.99);
        CHECK_THROWS_AS(fresh.inverse(row({0.0})), std::logic_error);
    }
}

TEST_CASE("three-batch sequence matches the hand simulation exactly") {
    const double m0 = 0.001, d0 = 0.99;
    StandardScaler std_scaler(2, m0, d0, 1e-5);
    MinMaxScaler mm_scaler(2, -1.0, 1.0, m0, d0);
    HandStandard hand_std_f0(m0, d0, 1e-5), hand_std_f1(m0, d0, 1e-5);
    HandMinMax hand_mm_f0(m0, d0, -1.0, 1.0), hand_mm_f1(m0, d0, -1.0, 1.0);

    Rng rng(77);
    for (int step = 0; step < 3; ++step) {
        // [n=2, f=2, l=3]: feature statistics pool over batch and inner axes
        Tensor batch = rng.normal_tensor({2, 2, 3}, 2.0);
        std::vector<double> f0, f1;
        for (int64_t n = 0; n < 2; ++n)
            for (int64_t l = 0; l < 3; ++l) {
                f0.push_back(batch[(n * 2 + 0) * 3 + l]);
                f1.push_back(batch[(n * 2 + 1) * 3 + l]);
            }

        Tensor got_std = std_scaler.apply(batch);
        auto want_f0 = hand_std_f0.train_step(f0);
        auto want_f1 = hand_std_f1.train_step(f1);
        int64_t i0 = 0, i1 = 0;
        for (int64_t n = 0; n < 2; ++n)
            for (int64_t l = 0; l < 3; ++l) {
                CHECK(got_std[(n * 2 + 0) * 3 + l] ==
                      doctest::Approx(want_f0[static_cast<size_t>(i0++)]).epsilon(1e-6));
                CHECK(got_std[(n * 2 + 1) * 3 + l] ==
                      doctest::Approx(want_f1[static_cast<size_t>(i1++)]).epsilon(1e-6));
            }

        Tensor got_mm = mm_scaler.apply(batch);
        auto want_m0 = hand_mm_f0.step(f0, true);
        auto want_m1 = hand_mm_f1.step(f1, true);
        i0 = i1 = 0;
        for (int64_t n = 0; n < 2; ++n)
            for (int64_t l = 0; l < 3; ++l) {
                CHECK(got_mm[(n * 2 + 0) * 3 + l] ==
                      doctest::Approx(want_m0[static_cast<size_t>(i0++)]).epsilon(1e-6));
                CHECK(got_mm[(n * 2 + 1) * 3 + l] ==
                      doctest::Approx(want_m1[static_cast<size_t>(i1++)]).epsilon(1e-6));
            }
    }

    // running state agrees after the full sequence
    CHECK(std_scaler.running_mean()[0] == doctest::Approx(hand_std_f0.mu_r).epsilon(1e-9));
    CHECK(std_scaler.running_var()[1] == doctest::Approx(hand_std_f1.var_r).epsilon(1e-9));
    CHECK(std_scaler.momentum() == doctest::Approx(m0 * d0 * d0 * d0).epsilon(1e-15));
    CHECK(mm_scaler.running_min()[0] == doctest::Approx(hand_mm_f0.min_r).epsilon(1e-9));
    CHECK(mm_scaler.running_max()[1] == doctest::Approx(hand_mm_f1.max_r).epsilon(1e-9));
}

TEST_CASE("inference mode is side-effect free") {
    StandardScaler s(3, 0.001, 0.99);
    Rng rng(8);
    s.apply(rng.normal_tensor({2, 3, 4}));
    s.set_mode(ScalerMode::Inference);

    auto mean_before = s.running_mean();
    auto var_before = s.running_var();
    const double mom_before = s.momentum();
    Tensor probe = rng.normal_tensor({2, 3, 4});
    Tensor y1 = s.apply(probe);
    Tensor y2 = s.apply(probe);
    for (int64_t i = 0; i < y1.size(); ++i) CHECK(y1[i] == y2[i]);
    CHECK(s.running_mean() == mean_before);
    CHECK(s.running_var() == var_before);
    CHECK(s.momentum() == mom_before);
}

TEST_CASE("training output is standardized and min-max output in range") {
    Rng rng(9);
    StandardScaler s(4, 0.001, 0.99, 1e-8);
    Tensor batch = rng.normal_tensor({3, 4, 8}, 5.0);
    Tensor y = s.apply(batch);
    for (int64_t f = 0; f < 4; ++f) {
        double mean = 0.0, var = 0.0;
        int64_t count = 0;
        for (int64_t n = 0; n < 3; ++n)
            for (int64_t l = 0; l < 8; ++l) {
                mean += y[(n * 4 + f) * 8 + l];
                ++count;
            }
        mean /= static_cast<double>(count);
        for (int64_t n = 0; n < 3; ++n)
            for (int64_t l = 0; l < 8; ++l) {
                const double d = y[(n * 4 + f) * 8 + l] - mean;
                var += d * d;
            }
        var /= static_cast<double>(count);
        CHECK(std::abs(mean) < 1e-10);
        CHECK(var == doctest::Approx(1.0).epsilon(1e-6));
    }

    MinMaxScaler mm(4, -1.0, 1.0, 0.001, 0.99);
    Tensor z = mm.apply(batch);
    for (int64_t i = 0; i < z.size(); ++i) {
        CHECK(z[i] >= -1.0);
        CHECK(z[i] <= 1.0);
    }
}

TEST_CASE("pipeline composition inverts in inference mode") {
    Rng rng(10);
    StandardScaler s(4, 0.001, 0.99, 1e-8);
    MinMaxScaler mm(4, -1.0, 1.0, 0.001, 0.99);
    for (int i = 0; i < 3; ++i) {
        Tensor batch = rng.uniform_tensor({2, 4, 8}, -2.0, 4.0);
        mm.apply(s.apply(batch));
    }
    s.set_mode(ScalerMode::Inference);
    mm.set_mode(ScalerMode::Inference);

    // in-range probe: values between the running extrema survive the clamp
    Tensor probe = rng.uniform_tensor({1, 4, 16}, -1.0, 3.0);
    Tensor scaled = mm.apply(s.apply(probe));
    Tensor back = s.inverse(mm.inverse(scaled));
    double err = 0.0;
    for (int64_t i = 0; i < probe.size(); ++i) err = std::max(err, std::abs(back[i] - probe[i]));
    CHECK(err < 1e-6);
}

TEST_CASE("log compression round trip") {
    Rng rng(11);
    Tensor mel = rng.uniform_tensor({2, 4, 8}, 0.0, 3.0);
    Tensor back = log_expand(log_compress(mel));
    for (int64_t i = 0; i < mel.size(); ++i)
        CHECK(back[i] == doctest::Approx(mel[i]).epsilon(1e-9));
}
