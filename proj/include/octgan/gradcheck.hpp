#ifndef OCTGAN_GRADCHECK_HPP
#define OCTGAN_GRADCHECK_HPP

#include <algorithm>
#include <functional>

#include "octgan/ops.hpp"

namespace octgan {

// Compares tape gradients against central finite differences for a scalar
// function of several tensors. The tensors are perturbed in place and
// restored, so live network parameters can be checked directly. Error per
// coordinate is |analytic - fd| / max(1, |analytic|); the max is returned.
template <typename S>
S finite_diff_check_many(const std::function<Tensor<S>()>& f, std::vector<Tensor<S>> tensors,
                         S eps) {
    for (auto& t : tensors) {
        t.set_requires_grad(true);
        t.zero_grad();
    }

    std::vector<typename Tensor<S>::Array> analytic;
    {
        GradTape<S> tape;
        Tensor<S> y = f();
        if (y.size() != 1) throw NotScalar("finite_diff_check: f must be scalar-valued");
        if (!y.all_finite()) throw NumericalFailure("finite_diff_check: f not finite at point");
        tape.backward(y);
    }
    analytic.reserve(tensors.size());
    for (auto& t : tensors) analytic.push_back(t.grad());

    S max_err = 0;
    for (std::size_t ti = 0; ti < tensors.size(); ++ti) {
        Tensor<S>& t = tensors[ti];
        for (Extent i = 0; i < t.size(); ++i) {
            const S saved = t.values()[i];
            t.values()[i] = saved + eps;
            const S fp = f().item();
            t.values()[i] = saved - eps;
            const S fm = f().item();
            t.values()[i] = saved;
            if (!std::isfinite(static_cast<double>(fp)) ||
                !std::isfinite(static_cast<double>(fm)))
                throw NumericalFailure("finite_diff_check: f not finite near point");
            const S fd = (fp - fm) / (S(2) * eps);
            const S a = analytic[ti][i];
            const S err = std::abs(a - fd) / std::max(S(1), std::abs(a));
            max_err = std::max(max_err, err);
        }
    }
    return max_err;
}

// Single-argument form: max relative error of d f / d point.
template <typename S>
S finite_diff_check(const std::function<Tensor<S>(const Tensor<S>&)>& f, const Tensor<S>& point,
                    S eps) {
    Tensor<S> x = point.detach();
    return finite_diff_check_many<S>([&]() { return f(x); }, {x}, eps);
}

// Random fill that stays clear of the relu/abs kinks: |value| in [lo, hi].
template <typename S>
Tensor<S> kink_safe_normal(Shape shape, std::uint64_t seed, S lo = S(0.25), S hi = S(1)) {
    Tensor<S> t = Tensor<S>::zeros(std::move(shape));
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> mag(static_cast<double>(lo), static_cast<double>(hi));
    std::uniform_int_distribution<int> sgn(0, 1);
    for (Extent i = 0; i < t.size(); ++i)
        t.values()[i] = static_cast<S>(mag(rng)) * (sgn(rng) ? S(1) : S(-1));
    return t;
}

}  // namespace octgan

#endif
