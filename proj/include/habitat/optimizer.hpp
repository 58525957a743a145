#pragma once

#include <cmath>
#include <map>
#include <string>

#include "habitat/common.hpp"
#include "habitat/model.hpp"

namespace habitat {

/// Adam with decoupled weight decay: the decay term multiplies the parameter
/// directly instead of being folded into the gradient. Parameters are
/// selected by name each step, so freezing a subsystem means simply not
/// passing its gradients.
class AdamW {
public:
    AdamW(double lr, double weight_decay, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
        : lr_(lr), wd_(weight_decay), beta1_(beta1), beta2_(beta2), eps_(eps) {
        if (!(lr > 0.0)) fail("optimizer: learning rate must be positive");
        if (wd_ < 0.0) fail("optimizer: weight decay must be nonnegative");
    }

    void step(ParamMap& params, const ParamMap& grads) {
        ++t_;
        const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
        for (const auto& [name, g] : grads) {
            auto pit = params.find(name);
            if (pit == params.end()) fail("optimizer: gradient for unknown parameter '" + name + "'");
            Matrix& p = pit->second;
            if (!p.same_shape(g)) fail("optimizer: gradient shape mismatch for '" + name + "'");
            State& s = state_[name];
            if (s.m.data.empty()) {
                s.m = Matrix(p.rows, p.cols);
                s.v = Matrix(p.rows, p.cols);
            }
            for (std::size_t i = 0; i < p.data.size(); ++i) {
                const double gi = g.data[i];
                s.m.data[i] = beta1_ * s.m.data[i] + (1.0 - beta1_) * gi;
                s.v.data[i] = beta2_ * s.v.data[i] + (1.0 - beta2_) * gi * gi;
                const double mhat = s.m.data[i] / bc1;
                const double vhat = s.v.data[i] / bc2;
                p.data[i] -= lr_ * (mhat / (std::sqrt(vhat) + eps_) + wd_ * p.data[i]);
            }
        }
    }

private:
    struct State {
        Matrix m, v;
    };
    double lr_, wd_, beta1_, beta2_, eps_;
    long long t_ = 0;
    std::map<std::string, State> state_;
};

} // namespace habitat
