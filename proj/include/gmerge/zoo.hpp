/*******************************************************************************
* Copyright 2026 The gmerge Authors
*
* Licensed under the Apache License, Version 2.0 (the "License");
* you may not use this file except in compliance with the License.
* You may obtain a copy of the License at
*
*     http://www.apache.org/licenses/LICENSE-2.0
*
* Unless required by applicable law or agreed to in writing, software
* distributed under the License is distributed on an "AS IS" BASIS,
* WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
* See the License for the specific language governing permissions and
* limitations under the License.
*******************************************************************************/

#pragma once

// Small fixed-architecture models for tests, verification and benchmarks.
//
//   ffnn      x(B,8)     -> MatMul(16) -> LayerNorm -> ReLU
//   cnnblock  x(B,4,8,8) -> Conv3x3 -> BatchNorm -> ReLU -> GroupedConv3x3(G=2)
//                        -> BatchNorm -> Add(x) -> MaxPool2x2
//   attnblock x(B,4,8)   -> MatMul(8) -> Softmax(seq) -> MatMul(8) -> LayerNorm
//                        -> MatMul(16) -> ReLU -> MatMul(8) -> LayerNorm
//
// Weights of node n live under "<n>.<slot>".

#include <array>
#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "gmerge/executor.hpp"
#include "gmerge/graph.hpp"
#include "gmerge/merger.hpp"
#include "gmerge/op_schema.hpp"
#include "gmerge/validate.hpp"
#include "gmerge/weights.hpp"

namespace gmerge::zoo
{
    inline const std::array<std::string, 3>& names()
    {
        static const std::array<std::string, 3> n{"ffnn", "cnnblock", "attnblock"};
        return n;
    }

    /// Uniform doubles in [0, 1) from the top 53 bits of a 64-bit Mersenne twister.
    class Uniform
    {
    public:
        Uniform(std::uint64_t seed, std::uint64_t stream)
        {
            std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                              static_cast<std::uint32_t>(stream), static_cast<std::uint32_t>(stream >> 32)};
            m_engine.seed(seq);
        }

        double next() { return static_cast<double>(m_engine() >> 11) * 0x1.0p-53; }

        double next(double lo, double hi) { return lo + (hi - lo) * next(); }

        TensorValue tensor(DType dtype, const Shape& dims, double lo, double hi)
        {
            TensorValue t(TensorSpec{dtype, dims});
            dispatch_dtype(dtype, [&]<typename T>() {
                for (auto& v : t.data<T>())
                    v = static_cast<T>(next(lo, hi));
            });
            return t;
        }

    private:
        std::mt19937_64 m_engine;
    };

    namespace detail
    {
        class Builder
        {
        public:
            Builder(std::string name, DType dtype) : m_dtype(dtype) { m_graph.metadata["name"] = std::move(name); }

            std::string input(const std::string& name, Shape dims)
            {
                m_graph.inputs.push_back({name, TensorSpec{m_dtype, std::move(dims)}});
                return name;
            }

            std::string node(const std::string& id, OpKind kind, std::vector<std::string> inputs, Attrs attrs = {},
                             std::size_t weight_slots = 0)
            {
                OpNode n;
                n.id = id;
                n.kind = kind;
                n.attrs = std::move(attrs);
                for (auto& i : inputs)
                    n.inputs.push_back(ref(std::move(i)));
                const auto& slots = op_schema(kind).weight_slots;
                for (std::size_t s = 0; s < weight_slots; ++s)
                    n.weights.push_back(id + "." + slots.at(s));
                std::vector<TensorSpec> in;
                for (const auto& r : n.inputs)
                    in.push_back(*m_graph.spec_of(r));
                n.output = infer_output(n, in);
                m_graph.nodes.push_back(std::move(n));
                return id;
            }

            Graph finish(const std::string& out)
            {
                m_graph.outputs = {ref(out)};
                require_valid(m_graph);
                return std::move(m_graph);
            }

        private:
            DType m_dtype;
            Graph m_graph;
        };

        inline Attrs conv_attrs(std::int64_t out, std::int64_t groups)
        {
            Attrs a;
            a.set("kernel", std::int64_t{3}).set("stride", std::int64_t{1}).set("padding", std::int64_t{1});
            a.set("out_channels", out);
            if (groups > 0)
                a.set("groups", groups);
            return a;
        }

        inline Attrs features(std::int64_t n)
        {
            Attrs a;
            a.set("out_features", n);
            return a;
        }

        inline Attrs eps()
        {
            Attrs a;
            a.set("eps", 1e-5);
            return a;
        }
    }

    inline Graph make(const std::string& name, DType dtype = DType::F32, std::int64_t batch = 1)
    {
        using detail::Builder;
        if (name == "ffnn")
        {
            Builder b(name, dtype);
            auto x = b.input("x", {batch, 8});
            auto fc = b.node("fc", OpKind::MatMul, {x}, detail::features(16), 2);
            auto ln = b.node("ln", OpKind::LayerNorm, {fc}, detail::eps(), 2);
            return b.finish(b.node("relu", OpKind::ReLU, {ln}));
        }
        if (name == "cnnblock")
        {
            Builder b(name, dtype);
            auto x = b.input("x", {batch, 4, 8, 8});
            auto c1 = b.node("conv1", OpKind::Conv2D, {x}, detail::conv_attrs(4, 0), 2);
            auto n1 = b.node("bn1", OpKind::BatchNorm, {c1}, detail::eps(), 4);
            auto r1 = b.node("relu1", OpKind::ReLU, {n1});
            auto c2 = b.node("conv2", OpKind::GroupedConv2D, {r1}, detail::conv_attrs(4, 2), 2);
            auto n2 = b.node("bn2", OpKind::BatchNorm, {c2}, detail::eps(), 4);
            auto add = b.node("add", OpKind::Add, {x, n2});
            Attrs pool;
            pool.set("kernel", std::int64_t{2}).set("stride", std::int64_t{2});
            return b.finish(b.node("pool", OpKind::MaxPool2D, {add}, pool));
        }
        if (name == "attnblock")
        {
            Builder b(name, dtype);
            auto x = b.input("x", {batch, 4, 8});
            auto qkv = b.node("qkv", OpKind::MatMul, {x}, detail::features(8), 2);
            Attrs sm;
            sm.set("axis", std::int64_t{1});
            auto attn = b.node("softmax", OpKind::Softmax, {qkv}, sm);
            auto proj = b.node("proj", OpKind::MatMul, {attn}, detail::features(8), 2);
            auto ln1 = b.node("ln1", OpKind::LayerNorm, {proj}, detail::eps(), 2);
            auto ff1 = b.node("ff1", OpKind::MatMul, {ln1}, detail::features(16), 2);
            auto act = b.node("act", OpKind::ReLU, {ff1});
            auto ff2 = b.node("ff2", OpKind::MatMul, {act}, detail::features(8), 2);
            return b.finish(b.node("ln2", OpKind::LayerNorm, {ff2}, detail::eps(), 2));
        }
        throw Error(ErrorCode::UnsupportedOp, "unknown zoo model '" + name + "' (ffnn, cnnblock, attnblock)");
    }

    /// Seeded weights for model `model` of `graph`: uniform in [-0.5, 0.5],
    /// except BatchNorm running variances, which are 1 + that.
    inline WeightStore random_weights(const Graph& graph, std::uint64_t seed, int model)
    {
        Uniform rng(seed, static_cast<std::uint64_t>(model) << 1);
        WeightStore store{model, {}};
        for (const auto& n : graph.nodes)
        {
            if (n.weights.empty())
                continue;
            std::vector<TensorSpec> in;
            for (const auto& r : n.inputs)
                in.push_back(*graph.spec_of(r));
            auto specs = expected_weight_specs(n, in);
            for (std::size_t i = 0; i < n.weights.size(); ++i)
            {
                const bool variance = n.kind == OpKind::BatchNorm && i == 3;
                store.tensors.emplace(n.weights[i], rng.tensor(specs[i].dtype, specs[i].dims, variance ? 0.5 : -0.5,
                                                               variance ? 1.5 : 0.5));
            }
        }
        return store;
    }

    inline std::vector<WeightStore> random_stores(const Graph& graph, std::uint64_t seed, int models)
    {
        std::vector<WeightStore> out;
        for (int m = 0; m < models; ++m)
            out.push_back(random_weights(graph, seed, m));
        return out;
    }

    /// Seeded inputs in [-1, 1] for model `model`, keyed by graph input name.
    inline TensorMap random_inputs(const Graph& graph, std::uint64_t seed, int model)
    {
        Uniform rng(seed, (static_cast<std::uint64_t>(model) << 1) | 1);
        TensorMap out;
        for (const auto& in : graph.inputs)
            out.emplace(in.name, rng.tensor(in.spec.dtype, in.spec.dims, -1.0, 1.0));
        return out;
    }

    /// A per-model head for backbone merges: one MatMul of width `width` on
    /// the output of backbone node `from`. Weights are seeded per model.
    inline HeadModel make_head(const Graph& backbone, const std::string& from, std::int64_t width,
                               std::uint64_t seed, int model)
    {
        const auto* src = backbone.find(from);
        if (!src)
            throw Error(ErrorCode::Backbone, "no backbone node '" + from + "'");
        detail::Builder b("head" + std::to_string(model), src->output.dtype);
        auto x = b.input(from, src->output.dims);
        auto g = b.finish(b.node("head_fc", OpKind::MatMul, {x}, detail::features(width), 2));
        Uniform rng(seed, (std::uint64_t{1} << 40) + static_cast<std::uint64_t>(model));
        WeightStore w{model, {}};
        std::vector<TensorSpec> in{src->output};
        auto specs = expected_weight_specs(g.nodes.front(), in);
        for (std::size_t i = 0; i < specs.size(); ++i)
            w.tensors.emplace(g.nodes.front().weights[i], rng.tensor(specs[i].dtype, specs[i].dims, -0.5, 0.5));
        return HeadModel{std::move(g), std::move(w)};
    }
}
