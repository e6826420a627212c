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

#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <queue>
#include <set>
#include <string>
#include <string_view>
#include <unordered_map>
#include <variant>
#include <vector>

#include "gmerge/error.hpp"
#include "gmerge/tensor.hpp"

namespace gmerge
{
    enum class OpKind
    {
        Conv2D,
        GroupedConv2D,
        MatMul,
        BatchMatMul,
        LayerNorm,
        GroupNorm,
        BatchNorm,
        ReLU,
        Tanh,
        Softmax,
        MaxPool2D,
        MeanPool2D,
        Add,
        Mul,
        Concat,
        Reshape,
        Transpose,
        Pack,
        Unpack,
    };

    inline constexpr std::array<OpKind, 19> all_op_kinds = {
        OpKind::Conv2D,    OpKind::GroupedConv2D, OpKind::MatMul,     OpKind::BatchMatMul,
        OpKind::LayerNorm, OpKind::GroupNorm,     OpKind::BatchNorm,  OpKind::ReLU,
        OpKind::Tanh,      OpKind::Softmax,       OpKind::MaxPool2D,  OpKind::MeanPool2D,
        OpKind::Add,       OpKind::Mul,           OpKind::Concat,     OpKind::Reshape,
        OpKind::Transpose, OpKind::Pack,          OpKind::Unpack,
    };

    inline const char* to_string(OpKind kind)
    {
        switch (kind)
        {
        case OpKind::Conv2D: return "Conv2D";
        case OpKind::GroupedConv2D: return "GroupedConv2D";
        case OpKind::MatMul: return "MatMul";
        case OpKind::BatchMatMul: return "BatchMatMul";
        case OpKind::LayerNorm: return "LayerNorm";
        case OpKind::GroupNorm: return "GroupNorm";
        case OpKind::BatchNorm: return "BatchNorm";
        case OpKind::ReLU: return "ReLU";
        case OpKind::Tanh: return "Tanh";
        case OpKind::Softmax: return "Softmax";
        case OpKind::MaxPool2D: return "MaxPool2D";
        case OpKind::MeanPool2D: return "MeanPool2D";
        case OpKind::Add: return "Add";
        case OpKind::Mul: return "Mul";
        case OpKind::Concat: return "Concat";
        case OpKind::Reshape: return "Reshape";
        case OpKind::Transpose: return "Transpose";
        case OpKind::Pack: return "Pack";
        case OpKind::Unpack: return "Unpack";
        }
        return "?";
    }

    inline OpKind parse_op_kind(std::string_view name)
    {
        for (auto kind : all_op_kinds)
        {
            if (name == to_string(kind))
            {
                return kind;
            }
        }
        throw Error(ErrorCode::UnsupportedOp, "unknown op kind '" + std::string(name) + "'");
    }

    /// Concatenation axis lattice used while merging.
    enum class MergeDim
    {
        Batch,
        Channel,
        DontCare,
    };

    inline const char* to_string(MergeDim d)
    {
        switch (d)
        {
        case MergeDim::Batch: return "Batch";
        case MergeDim::Channel: return "Channel";
        case MergeDim::DontCare: return "DontCare";
        }
        return "?";
    }

    inline MergeDim parse_merge_dim(std::string_view s)
    {
        if (s == "Batch")
            return MergeDim::Batch;
        if (s == "Channel")
            return MergeDim::Channel;
        if (s == "DontCare")
            return MergeDim::DontCare;
        throw Error(ErrorCode::Parse, "unknown merge dim '" + std::string(s) + "'");
    }

    using AttrValue = std::variant<std::int64_t, double, std::vector<std::int64_t>>;

    /// Kind-specific attributes keyed by name.
    struct Attrs
    {
        std::map<std::string, AttrValue> values;

        bool operator==(const Attrs&) const = default;

        bool has(const std::string& name) const { return values.count(name) != 0; }

        std::int64_t get_int(const std::string& name) const
        {
            return get<std::int64_t>(name);
        }

        double get_double(const std::string& name) const { return get<double>(name); }

        const std::vector<std::int64_t>& get_ints(const std::string& name) const
        {
            return get<std::vector<std::int64_t>>(name);
        }

        Attrs& set(const std::string& name, AttrValue v)
        {
            values[name] = std::move(v);
            return *this;
        }

    private:
        template <typename T>
        const T& get(const std::string& name) const
        {
            auto it = values.find(name);
            if (it == values.end())
            {
                throw Error(ErrorCode::InvalidGraph, "missing attribute '" + name + "'");
            }
            if (auto* v = std::get_if<T>(&it->second))
            {
                return *v;
            }
            throw Error(ErrorCode::InvalidGraph, "attribute '" + name + "' has the wrong type");
        }
    };

    /// Reference to output `index` of a node or to a graph input (index 0).
    struct EdgeRef
    {
        std::string node;
        int index = 0;

        bool operator==(const EdgeRef&) const = default;

        std::string str() const { return node + ":" + std::to_string(index); }

        static EdgeRef parse(std::string_view s)
        {
            auto colon = s.rfind(':');
            if (colon == std::string_view::npos || colon == 0 || colon + 1 == s.size())
            {
                throw Error(ErrorCode::Parse, "edge reference '" + std::string(s) +
                                                  "' is not of the form nodeId:outputIndex");
            }
            int index = 0;
            for (auto c : s.substr(colon + 1))
            {
                if (c < '0' || c > '9')
                {
                    throw Error(ErrorCode::Parse, "bad output index in '" + std::string(s) + "'");
                }
                index = index * 10 + (c - '0');
            }
            return EdgeRef{std::string(s.substr(0, colon)), index};
        }
    };

    inline EdgeRef ref(std::string node) { return EdgeRef{std::move(node), 0}; }

    struct OpNode
    {
        std::string id;
        OpKind kind = OpKind::ReLU;
        Attrs attrs;
        std::vector<EdgeRef> inputs;
        std::vector<std::string> weights;
        TensorSpec output;

        bool operator==(const OpNode&) const = default;
    };

    struct GraphInput
    {
        std::string name;
        TensorSpec spec;

        bool operator==(const GraphInput&) const = default;
    };

    struct Graph
    {
        std::vector<OpNode> nodes;
        std::vector<GraphInput> inputs;
        std::vector<EdgeRef> outputs;
        std::map<std::string, std::string> metadata;

        bool operator==(const Graph&) const = default;

        const OpNode* find(std::string_view id) const
        {
            for (const auto& n : nodes)
            {
                if (n.id == id)
                {
                    return &n;
                }
            }
            return nullptr;
        }

        const GraphInput* find_input(std::string_view name) const
        {
            for (const auto& in : inputs)
            {
                if (in.name == name)
                {
                    return &in;
                }
            }
            return nullptr;
        }

        /// Spec of whatever `r` points at; nullopt when unresolved.
        std::optional<TensorSpec> spec_of(const EdgeRef& r) const
        {
            if (auto* n = find(r.node); n && r.index == 0)
            {
                return n->output;
            }
            if (auto* in = find_input(r.node); in && r.index == 0)
            {
                return in->spec;
            }
            return std::nullopt;
        }

        std::size_t edge_count() const
        {
            std::size_t e = 0;
            for (const auto& n : nodes)
            {
                e += n.inputs.size();
            }
            return e;
        }

        std::size_t weighted_node_count() const
        {
            std::size_t c = 0;
            for (const auto& n : nodes)
            {
                c += n.weights.empty() ? 0 : 1;
            }
            return c;
        }
    };

    /// Counters filled in by traversals that accept them.
    struct TraversalStats
    {
        std::size_t node_visits = 0;
        std::size_t edge_inspections = 0;
    };

    /// Kahn's algorithm; ready nodes are released in ascending id order.
    inline std::vector<std::string> topological_order(const Graph& graph,
                                                      TraversalStats* stats = nullptr)
    {
        std::unordered_map<std::string, std::size_t> index;
        for (std::size_t i = 0; i < graph.nodes.size(); ++i)
        {
            index.emplace(graph.nodes[i].id, i);
        }

        std::vector<std::size_t> pending(graph.nodes.size(), 0);
        std::vector<std::vector<std::size_t>> children(graph.nodes.size());
        for (std::size_t i = 0; i < graph.nodes.size(); ++i)
        {
            for (const auto& in : graph.nodes[i].inputs)
            {
                if (auto it = index.find(in.node); it != index.end())
                {
                    ++pending[i];
                    children[it->second].push_back(i);
                }
            }
        }

        std::set<std::string> ready;
        for (std::size_t i = 0; i < graph.nodes.size(); ++i)
        {
            if (pending[i] == 0)
            {
                ready.insert(graph.nodes[i].id);
            }
        }

        std::vector<std::string> order;
        order.reserve(graph.nodes.size());
        while (!ready.empty())
        {
            auto id = *ready.begin();
            ready.erase(ready.begin());
            order.push_back(id);
            if (stats)
            {
                ++stats->node_visits;
            }
            for (auto child : children[index.at(id)])
            {
                if (stats)
                {
                    ++stats->edge_inspections;
                }
                if (--pending[child] == 0)
                {
                    ready.insert(graph.nodes[child].id);
                }
            }
        }

        if (order.size() != graph.nodes.size())
        {
            // the first node left unprocessed sits on or behind a cycle; walk
            // unprocessed parents until one repeats to land on the cycle itself
            std::size_t cur = 0;
            while (pending[cur] == 0)
            {
                ++cur;
            }
            std::vector<bool> seen(graph.nodes.size(), false);
            while (!seen[cur])
            {
                seen[cur] = true;
                for (const auto& in : graph.nodes[cur].inputs)
                {
                    auto it = index.find(in.node);
                    if (it != index.end() && pending[it->second] != 0)
                    {
                        cur = it->second;
                        break;
                    }
                }
            }
            throw Error(ErrorCode::Cycle, "cycle detected at " + graph.nodes[cur].id,
                        graph.nodes[cur].id);
        }
        return order;
    }
}
