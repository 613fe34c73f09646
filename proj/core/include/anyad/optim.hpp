#pragma once

#include <cmath>
#include <memory>
#include <string>
#include <utility>
#include <vector>

#include "anyad/tensor.hpp"

namespace anyad {

// Named handle onto the model's trainable (or frozen) tensors.
template <typename T>
struct NamedParams {
    using Ptr = std::shared_ptr<TensorT<T>>;
    std::vector<std::pair<std::string, Ptr>> items;

    void add(std::string name, Ptr t) { items.emplace_back(std::move(name), std::move(t)); }
    std::size_t size() const { return items.size(); }

    Ptr find(const std::string& name) const {
        for (const auto& [n, p] : items)
            if (n == name) return p;
        return nullptr;
    }

    void zero_grad() {
        for (auto& [n, p] : items) p->zero_grad();
    }

    std::int64_t total_count() const {
        std::int64_t c = 0;
        for (const auto& [n, p] : items) c += p->numel();
        return c;
    }
};

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    double weight_decay = 1e-4;  // decoupled
};

// Adam with decoupled weight decay. Moment buffers are created lazily and
// match each parameter's shape; `step` advances by exactly 1 per update.
template <typename T>
class AdamT {
public:
    AdamT() = default;
    explicit AdamT(AdamConfig cfg) : cfg_(cfg) {}

    AdamConfig& config() { return cfg_; }
    const AdamConfig& config() const { return cfg_; }
    std::int64_t step_count() const { return step_; }
    void set_step_count(std::int64_t s) { step_ = s; }

    // One update over all parameters. Gradients are left untouched; the
    // caller zeroes them between steps.
    void step(NamedParams<T>& params) {
        ensure_state(params);
        const std::int64_t t = step_ + 1;
        const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t));
        const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t));
        for (std::size_t i = 0; i < params.items.size(); ++i) {
            auto& [name, p] = params.items[i];
            if (!p->requires_grad) continue;
            if (p->grad.size() != p->data.size())
                throw ContractError("adam_step: parameter '" + name + "' has no populated gradient");
            auto& m = m_[i];
            auto& v = v_[i];
            for (std::size_t j = 0; j < p->data.size(); ++j) {
                const double gj = static_cast<double>(p->grad[j]);
                const double mj = cfg_.beta1 * static_cast<double>(m[j]) + (1.0 - cfg_.beta1) * gj;
                const double vj = cfg_.beta2 * static_cast<double>(v[j]) + (1.0 - cfg_.beta2) * gj * gj;
                m[j] = static_cast<T>(mj);
                v[j] = static_cast<T>(vj);
                const double mhat = mj / bc1;
                const double vhat = vj / bc2;
                const double upd = mhat / (std::sqrt(vhat) + cfg_.eps) +
                                   cfg_.weight_decay * static_cast<double>(p->data[j]);
                p->data[j] = static_cast<T>(static_cast<double>(p->data[j]) - cfg_.lr * upd);
            }
        }
        step_ = t;
    }

    // Moment buffers by parameter index, for checkpointing.
    std::vector<T>& moment1(std::size_t i) { return m_[i]; }
    std::vector<T>& moment2(std::size_t i) { return v_[i]; }
    void ensure_state(const NamedParams<T>& params) {
        if (m_.size() != params.items.size()) {
            m_.resize(params.items.size());
            v_.resize(params.items.size());
        }
        for (std::size_t i = 0; i < params.items.size(); ++i) {
            const std::size_t n = params.items[i].second->data.size();
            if (m_[i].size() != n) m_[i].assign(n, T(0));
            if (v_[i].size() != n) v_[i].assign(n, T(0));
        }
    }

private:
    AdamConfig cfg_;
    std::int64_t step_ = 0;
    std::vector<std::vector<T>> m_, v_;
};

}  // namespace anyad
