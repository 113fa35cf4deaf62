#pragma once

#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "genco/error.hpp"
#include "genco/graph.hpp"
#include "genco/tensor.hpp"

namespace genco {

// SGD with momentum (L2 weight decay), Adam (bias-corrected, L2 decay) and
// AdamW (decoupled decay). step() touches only registered parameters and
// requires every one of them to carry a gradient.
template <class T>
class Optimizer {
public:
    enum class Kind { sgd_momentum, adam, adamw };

    static Kind kind_from_string(const std::string& s) {
        if (s == "sgd-momentum") return Kind::sgd_momentum;
        if (s == "adam") return Kind::adam;
        if (s == "adamw") return Kind::adamw;
        throw ConfigError("unknown optimizer kind: " + s);
    }

    static std::string kind_to_string(Kind k) {
        switch (k) {
            case Kind::sgd_momentum: return "sgd-momentum";
            case Kind::adam: return "adam";
            default: return "adamw";
        }
    }

    Optimizer(Kind kind, T lr, T weight_decay, std::vector<Var<T>> params)
        : kind_(kind), lr(lr), weight_decay(weight_decay), params_(std::move(params)) {
        m1_.reserve(params_.size());
        m2_.reserve(params_.size());
        for (const auto& p : params_) {
            m1_.push_back(Tensor<T>::zeros(p.shape()));
            m2_.push_back(kind_ == Kind::sgd_momentum ? Tensor<T>() : Tensor<T>::zeros(p.shape()));
        }
    }

    Kind kind() const { return kind_; }
    int64_t step_count() const { return t_; }
    const std::vector<Var<T>>& params() const { return params_; }

    void zero_grad() {
        for (auto& p : params_) p.zero_grad();
    }

    void step() {
        for (const auto& p : params_)
            if (!p.node()->has_grad()) throw Error("missing gradient for parameter " + p.name());
        ++t_;
        switch (kind_) {
            case Kind::sgd_momentum: step_sgd(); break;
            case Kind::adam: step_adam(false); break;
            case Kind::adamw: step_adam(true); break;
        }
    }

    // Serialization hooks: moment buffers and step counter.
    std::vector<Tensor<T>>& moments1() { return m1_; }
    std::vector<Tensor<T>>& moments2() { return m2_; }
    void set_step_count(int64_t t) { t_ = t; }

    T lr;
    T weight_decay;
    T momentum = T(0.9);
    T beta1 = T(0.9);
    T beta2 = T(0.999);
    T eps = T(1e-8);

private:
    void step_sgd() {
        for (size_t i = 0; i < params_.size(); ++i) {
            auto& p = params_[i].value();
            const auto& g = params_[i].grad();
            auto& v = m1_[i];
            for (size_t j = 0; j < p.numel(); ++j) {
                const T gj = g.data()[j] + weight_decay * p.data()[j];
                v.data()[j] = momentum * v.data()[j] + gj;
                p.data()[j] -= lr * v.data()[j];
            }
        }
    }

    void step_adam(bool decoupled) {
        const T bc1 = T(1) - std::pow(beta1, T(t_));
        const T bc2 = T(1) - std::pow(beta2, T(t_));
        for (size_t i = 0; i < params_.size(); ++i) {
            auto& p = params_[i].value();
            const auto& g = params_[i].grad();
            auto& m = m1_[i];
            auto& v = m2_[i];
            for (size_t j = 0; j < p.numel(); ++j) {
                T gj = g.data()[j];
                if (!decoupled) gj += weight_decay * p.data()[j];
                m.data()[j] = beta1 * m.data()[j] + (T(1) - beta1) * gj;
                v.data()[j] = beta2 * v.data()[j] + (T(1) - beta2) * gj * gj;
                const T mhat = m.data()[j] / bc1;
                const T vhat = v.data()[j] / bc2;
                if (decoupled) p.data()[j] -= lr * weight_decay * p.data()[j];
                p.data()[j] -= lr * mhat / (std::sqrt(vhat) + eps);
            }
        }
    }

    Kind kind_;
    int64_t t_ = 0;
    std::vector<Var<T>> params_;
    std::vector<Tensor<T>> m1_, m2_;
};

}  // namespace genco
