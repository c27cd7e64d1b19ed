#pragma once

#include <cmath>
#include <vector>

#include "rged/diffusion.hpp"

namespace rged::testing {

// Data z_0 ~ N(mu, s^2 I). Writing u_t = z_t - a_t mu, the optimal noise is
// b_t u_t / D_t with D_t = a_t^2 s^2 + b_t^2, and a deterministic DDIM step
// maps u_t to u_t (a_{t-1} a_t s^2 + b_{t-1} b_t) / D_t.
struct GaussianRecursion {
    std::vector<Tensor> states; // index k holds z at step T - k

    GaussianRecursion(const DiffusionSchedule& sched, const std::vector<std::size_t>& steps, const Tensor& zT, const Tensor& mu, double s) {
        states.push_back(zT);
        std::vector<double> u(zT.numel());
        const std::size_t T = steps.front();
        for (std::size_t i = 0; i < u.size(); ++i) u[i] = zT[i] - std::sqrt(sched.abar(T)) * mu[i];
        for (std::size_t k = 0; k < steps.size(); ++k) {
            const std::size_t t = steps[k], tp = k + 1 < steps.size() ? steps[k + 1] : 0;
            const double a = std::sqrt(sched.abar(t)), b = std::sqrt(1.0 - sched.abar(t));
            const double ap = std::sqrt(sched.abar(tp)), bp = std::sqrt(1.0 - sched.abar(tp));
            const double factor = (ap * a * s * s + bp * b) / (a * a * s * s + b * b);
            std::vector<double> z(u.size());
            for (std::size_t i = 0; i < u.size(); ++i) {
                u[i] *= factor;
                z[i] = u[i] + ap * mu[i];
            }
            states.emplace_back(zT.shape(), std::move(z));
        }
    }
};

} // namespace rged::testing
