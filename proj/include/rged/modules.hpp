#pragma once

#include <cstring>
#include <string>
#include <vector>

#include "rged/checkpoint.hpp"
#include "rged/tensor.hpp"

namespace rged {

// Parameter containers expose `template <class F> void visit(F&& f)` calling
// f(name, tensor&) for every parameter in a fixed order. The helpers below
// build freezing, checkpointing and deep copies on top of that.

template <class M>
std::vector<Tensor> parameters_of(M& m) {
    std::vector<Tensor> out;
    m.visit([&](const std::string&, Tensor& t) { out.push_back(t); });
    return out;
}

/// Parameters to hand to an optimizer; frozen modules have none to give.
template <class M>
std::vector<Tensor> trainable_parameters(M& m, const char* what) {
    if (m.frozen) throw ContractError(std::string(what) + " is frozen; its parameters are immutable");
    auto ps = parameters_of(m);
    for (Tensor& p : ps)
        if (!p.requires_grad()) p.set_requires_grad(true);
    return ps;
}

template <class M>
void freeze(M& m) {
    m.visit([](const std::string&, Tensor& t) { t.set_requires_grad(false); });
    m.frozen = true;
}

template <class M>
void require_frozen(const M& m, const char* what) {
    if (!m.frozen) throw ContractError(std::string(what) + " must be frozen before use in the editing pipeline");
}

template <class M>
void save_module(M& m, Checkpoint& ck, const std::string& prefix) {
    m.visit([&](const std::string& name, Tensor& t) { ck.add(prefix + name, t.detach()); });
}

template <class M>
void load_module(M& m, const Checkpoint& ck, const std::string& prefix) {
    if (m.frozen) throw ContractError("cannot load parameters into a frozen module");
    m.visit([&](const std::string& name, Tensor& t) { ck.restore(prefix + name, t); });
}

/// Independent copy: same values, fresh storage, unfrozen.
template <class M>
M deep_copy(const M& m) {
    M out = m;
    out.frozen = false;
    out.visit([](const std::string&, Tensor& t) { t = t.detach(); });
    return out;
}

/// FNV-1a over the names and raw bits of every parameter.
template <class M>
std::uint64_t parameter_checksum(const M& module) {
    M m = module; // shares storage; visit() needs a mutable handle
    std::uint64_t h = 0xcbf29ce484222325ULL;
    auto mix = [&](const void* p, std::size_t n) {
        const auto* b = static_cast<const unsigned char*>(p);
        for (std::size_t i = 0; i < n; ++i) {
            h ^= b[i];
            h *= 0x100000001b3ULL;
        }
    };
    m.visit([&](const std::string& name, Tensor& t) {
        mix(name.data(), name.size());
        mix(t.data().data(), t.numel() * sizeof(double));
    });
    return h;
}

inline Tensor init_normal(Shape shape, Rng& rng, double stddev) { return Tensor::randn(std::move(shape), rng, stddev); }

inline Tensor init_fan_in(std::size_t in, std::size_t out, Rng& rng) {
    return Tensor::randn(Shape{in, out}, rng, 1.0 / std::sqrt(static_cast<double>(in)));
}

} // namespace rged
