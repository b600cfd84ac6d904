#pragma once

#include <cmath>
#include <functional>
#include <random>
#include <vector>

#include "focalcomm/ops.hpp"
#include "focalcomm/tape.hpp"
#include "focalcomm/tensor.hpp"

namespace fctest {

inline void fill_uniform(focalcomm::Tensor& t, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> dist(lo, hi);
    for (std::int64_t i = 0; i < t.size(); ++i) t[i] = dist(rng);
}

inline focalcomm::Tensor random_tensor(std::vector<int> shape, std::mt19937_64& rng, double lo = -1.0,
                                       double hi = 1.0) {
    focalcomm::Tensor t(std::move(shape));
    fill_uniform(t, rng, lo, hi);
    return t;
}

/// Relative error with the |a| + |b| + 1e-8 denominator used throughout the
/// gradient checks.
inline double rel_err(double a, double b) { return std::abs(a - b) / (std::abs(a) + std::abs(b) + 1e-8); }

/// Central finite differences of `loss_fn` (evaluated without any tape)
/// against the analytic gradient from one taped backward pass. Returns the
/// worst relative error across all entries of all parameters.
inline double max_grad_rel_err(const std::function<focalcomm::Tensor()>& loss_fn,
                               std::vector<focalcomm::Parameter*> params, double step = 1e-6) {
    using namespace focalcomm;
    for (Parameter* p : params) p->zero_grad();
    {
        Tape tape;
        TapeScope scope(tape);
        for (Parameter* p : params) tape.watch(*p);
        Tensor loss = loss_fn();
        tape.backward(loss);
    }
    double worst = 0.0;
    for (Parameter* p : params) {
        for (std::int64_t i = 0; i < p->value.size(); ++i) {
            const double saved = p->value[i];
            p->value[i] = saved + step;
            const double up = loss_fn().item();
            p->value[i] = saved - step;
            const double down = loss_fn().item();
            p->value[i] = saved;
            const double numeric = (up - down) / (2.0 * step);
            worst = std::max(worst, rel_err(p->grad[i], numeric));
        }
    }
    return worst;
}

}  // namespace fctest
