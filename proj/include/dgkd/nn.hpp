#pragma once

#include "dgkd/autograd.hpp"
#include "dgkd/rng.hpp"

#include <map>
#include <string>
#include <vector>

namespace dgkd::nn {

/// Named parameter registry. Names are dotted paths ("stage1.conv_a.weight")
/// and iteration order is registration order.
class ParamStore {
public:
    ag::Var add(const std::string& name, Tensor init);
    ag::Var get(const std::string& name) const;
    bool contains(const std::string& name) const { return index_.count(name) != 0; }

    const std::vector<std::pair<std::string, ag::Var>>& items() const noexcept { return items_; }
    std::size_t size() const noexcept { return items_.size(); }
    std::size_t numel() const;

    void zero_grad();
    double grad_norm() const;
    void scale_grad(double factor);
    /// Sets every parameter's requires_grad flag (used to freeze a teacher).
    void set_trainable(bool trainable);

private:
    std::vector<std::pair<std::string, ag::Var>> items_;
    std::map<std::string, std::size_t> index_;
};

/// Uses the parameter as a graph constant when frozen, so no gradient reaches it.
inline ag::Var use(const ag::Var& param, bool frozen)
{
    return frozen ? ag::detach(param) : param;
}

enum class Init { he, zero };

struct Conv2d {
    ag::Var weight;
    ag::Var bias;
    int stride = 1;
    int pad = 0;

    Conv2d() = default;
    Conv2d(ParamStore& store, const std::string& name, int in_ch, int out_ch, int kernel, int stride, Rng& rng,
           Init init = Init::he, double bias_init = 0.0);

    ag::Var operator()(const ag::Var& x, bool frozen = false) const
    {
        return ag::conv2d(x, use(weight, frozen), use(bias, frozen), stride, pad);
    }
};

struct Linear {
    ag::Var weight;
    ag::Var bias;

    Linear() = default;
    Linear(ParamStore& store, const std::string& name, int in_features, int out_features, Rng& rng);

    ag::Var operator()(const ag::Var& x, bool frozen = false) const
    {
        return ag::linear(x, use(weight, frozen), use(bias, frozen));
    }
};

struct SgdConfig {
    double lr = 0.01;
    double momentum = 0.9;
    double weight_decay = 5e-4;
};

/// SGD with heavy-ball momentum and L2 weight decay folded into the gradient.
class Sgd {
public:
    explicit Sgd(SgdConfig cfg)
        : cfg_(cfg)
    {
    }

    void step(const ParamStore& params);
    const SgdConfig& config() const noexcept { return cfg_; }

    std::map<std::string, Tensor>& momentum() noexcept { return momentum_; }
    const std::map<std::string, Tensor>& momentum() const noexcept { return momentum_; }

private:
    SgdConfig cfg_;
    std::map<std::string, Tensor> momentum_;
};

} // namespace dgkd::nn
