#include "dgkd/nn.hpp"

#include <cmath>
#include <stdexcept>

namespace dgkd::nn {

ag::Var ParamStore::add(const std::string& name, Tensor init)
{
    if (index_.count(name))
        throw std::logic_error("duplicate parameter name: " + name);
    index_[name] = items_.size();
    items_.emplace_back(name, ag::parameter(std::move(init)));
    return items_.back().second;
}

ag::Var ParamStore::get(const std::string& name) const
{
    auto it = index_.find(name);
    if (it == index_.end())
        throw std::out_of_range("unknown parameter: " + name);
    return items_[it->second].second;
}

std::size_t ParamStore::numel() const
{
    std::size_t n = 0;
    for (const auto& [name, v] : items_)
        n += v.value().size();
    return n;
}

void ParamStore::zero_grad()
{
    for (auto& [name, v] : items_)
        v.zero_grad();
}

double ParamStore::grad_norm() const
{
    double s = 0;
    for (const auto& [name, v] : items_)
        if (v.has_grad())
            s += v.grad().squared_norm();
    return std::sqrt(s);
}

void ParamStore::scale_grad(double factor)
{
    for (auto& [name, v] : items_)
        if (v.has_grad())
            v.node()->grad *= factor;
}

void ParamStore::set_trainable(bool trainable)
{
    for (auto& [name, v] : items_)
        v.node()->requires_grad = trainable;
}

Conv2d::Conv2d(ParamStore& store, const std::string& name, int in_ch, int out_ch, int kernel, int stride_, Rng& rng,
               Init init, double bias_init)
    : stride(stride_)
    , pad(kernel / 2)
{
    const Shape wshape{out_ch, in_ch, kernel, kernel};
    Tensor w = init == Init::he ? rng.normal_tensor(wshape, std::sqrt(2.0 / (in_ch * kernel * kernel))) : Tensor(wshape);
    weight = store.add(name + ".weight", std::move(w));
    bias = store.add(name + ".bias", Tensor(Shape{out_ch}, bias_init));
}

Linear::Linear(ParamStore& store, const std::string& name, int in_features, int out_features, Rng& rng)
{
    weight = store.add(name + ".weight",
                       rng.normal_tensor(Shape{out_features, in_features}, std::sqrt(1.0 / in_features)));
    bias = store.add(name + ".bias", Tensor(Shape{out_features}));
}

void Sgd::step(const ParamStore& params)
{
    for (const auto& [name, p] : params.items()) {
        if (!p.has_grad())
            continue;
        Tensor g = p.grad();
        ag::Var handle = p;
        Tensor& value = handle.mutable_value();
        if (cfg_.weight_decay != 0.0)
            for (std::size_t i = 0; i < g.size(); ++i)
                g[i] += cfg_.weight_decay * value[i];
        auto [it, inserted] = momentum_.try_emplace(name, g.shape());
        Tensor& buf = it->second;
        for (std::size_t i = 0; i < g.size(); ++i) {
            buf[i] = inserted ? g[i] : cfg_.momentum * buf[i] + g[i];
            value[i] -= cfg_.lr * buf[i];
        }
    }
}

} // namespace dgkd::nn
