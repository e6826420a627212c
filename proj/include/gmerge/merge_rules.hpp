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

// The substitution table: for each op kind, the counterpart that keeps every
// model's inputs and weights in their own group, how each weight slot is
// concatenated across models, and which packing layout the op needs.
//
// Packing layouts for a per-model tensor of shape (d0, ..., dr-1):
//   Batch   -> (M, d0, ..., dr-1), model axis prepended
//   Channel -> d_c replaced by M * d_c on the channel axis c
// Both are model-major, so slice m is contiguous along the packed axis.

#include <array>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "gmerge/error.hpp"
#include "gmerge/graph.hpp"
#include "gmerge/kernels.hpp"
#include "gmerge/op_schema.hpp"
#include "gmerge/weights.hpp"

namespace gmerge
{
    enum class WeightConcat
    {
        // new leading model axis: (..) -> (M, ..)
        Stack,
        // existing leading axis: (n, ..) -> (M*n, ..)
        ConcatLeading,
    };

    inline const char* to_string(WeightConcat c)
    {
        return c == WeightConcat::Stack ? "batch-stack" : "channel-concat";
    }

    /// Which per-model axes an op reads across. Packing along one of them
    /// would let models see each other, so Channel becomes illegal when the
    /// channel axis is among them.
    enum class AxisConstraint
    {
        None,
        // the "axis" attribute (Softmax, Concat)
        AxisAttr,
        // the last two axes (pooling windows)
        TrailingTwo,
        // any axis (Reshape, Transpose, Pack, Unpack)
        AllAxes,
    };

    struct MergeRule
    {
        OpKind source;
        OpKind target;
        // one entry per weight slot of the source kind, in slot order
        std::vector<WeightConcat> weight_recipe;
        MergeDim required;
        AxisConstraint constraint = AxisConstraint::None;
        // merged group count = M * source group count
        bool multiplies_groups = false;
    };

    inline const MergeRule& rule_for(OpKind kind)
    {
        using K = OpKind;
        using W = WeightConcat;
        using D = MergeDim;
        using A = AxisConstraint;
        static const std::array<MergeRule, 19> table = {{
            {K::Conv2D, K::GroupedConv2D, {W::ConcatLeading, W::ConcatLeading}, D::Channel, A::None, true},
            {K::GroupedConv2D, K::GroupedConv2D, {W::ConcatLeading, W::ConcatLeading}, D::Channel, A::None, true},
            {K::MatMul, K::BatchMatMul, {W::Stack, W::Stack}, D::Batch, A::None, true},
            {K::BatchMatMul, K::BatchMatMul, {W::ConcatLeading, W::ConcatLeading}, D::Batch, A::None, true},
            {K::LayerNorm, K::GroupNorm, {W::ConcatLeading, W::ConcatLeading}, D::Channel, A::None, true},
            {K::GroupNorm, K::GroupNorm, {W::ConcatLeading, W::ConcatLeading}, D::Channel, A::None, true},
            {K::BatchNorm,
             K::BatchNorm,
             {W::ConcatLeading, W::ConcatLeading, W::ConcatLeading, W::ConcatLeading},
             D::Channel,
             A::None,
             false},
            {K::ReLU, K::ReLU, {}, D::DontCare, A::None, false},
            {K::Tanh, K::Tanh, {}, D::DontCare, A::None, false},
            {K::Softmax, K::Softmax, {}, D::DontCare, A::AxisAttr, false},
            {K::MaxPool2D, K::MaxPool2D, {}, D::DontCare, A::TrailingTwo, false},
            {K::MeanPool2D, K::MeanPool2D, {}, D::DontCare, A::TrailingTwo, false},
            {K::Add, K::Add, {}, D::DontCare, A::None, false},
            {K::Mul, K::Mul, {}, D::DontCare, A::None, false},
            {K::Concat, K::Concat, {}, D::DontCare, A::AxisAttr, false},
            {K::Reshape, K::Reshape, {}, D::DontCare, A::AllAxes, false},
            {K::Transpose, K::Transpose, {}, D::DontCare, A::AllAxes, false},
            {K::Pack, K::Pack, {}, D::DontCare, A::AllAxes, false},
            {K::Unpack, K::Unpack, {}, D::DontCare, A::AllAxes, false},
        }};
        for (const auto& r : table)
        {
            if (r.source == kind)
            {
                return r;
            }
        }
        throw Error(ErrorCode::UnsupportedOp, std::string("no merge rule for ") + to_string(kind));
    }

    /// True when packing `node` (per-model input rank `rank`) along `dim`
    /// would pack an axis the op reads across.
    inline bool is_forbidden(const OpNode& node, std::size_t rank, MergeDim dim)
    {
        if (dim != MergeDim::Channel)
        {
            return false;
        }
        const auto c = static_cast<std::int64_t>(channel_axis(rank));
        switch (rule_for(node.kind).constraint)
        {
        case AxisConstraint::None: return false;
        case AxisConstraint::AxisAttr: return node.attrs.get_int("axis") == c;
        case AxisConstraint::TrailingTwo: return c >= static_cast<std::int64_t>(rank) - 2;
        case AxisConstraint::AllAxes: return true;
        }
        return true;
    }

    /// Attributes of the merged counterpart of `node` for M models packed on `dim`.
    inline Attrs merged_attrs(const OpNode& node, std::int64_t models, MergeDim dim)
    {
        const auto& rule = rule_for(node.kind);
        Attrs a = node.attrs;
        if (rule.multiplies_groups)
        {
            a.set("groups", group_count(node) * models);
        }
        if (node.kind == OpKind::Conv2D || node.kind == OpKind::GroupedConv2D)
        {
            a.set("out_channels", node.attrs.get_int("out_channels") * models);
        }
        if (dim == MergeDim::Batch)
        {
            // source axes shift right by the prepended model axis
            if (a.has("axis"))
            {
                a.set("axis", a.get_int("axis") + 1);
            }
            if (node.kind == OpKind::Reshape)
            {
                std::vector<std::int64_t> shape{0};
                for (auto s : node.attrs.get_ints("shape"))
                    shape.push_back(s);
                a.set("shape", shape);
            }
            if (node.kind == OpKind::Transpose)
            {
                std::vector<std::int64_t> perm{0};
                for (auto p : node.attrs.get_ints("perm"))
                    perm.push_back(p + 1);
                a.set("perm", perm);
            }
        }
        return a;
    }

    /// Concatenates one weight slot across models in model order.
    inline TensorValue concat_weight(WeightConcat recipe, std::span<const TensorValue* const> per_model)
    {
        return kernels::pack(per_model, 0, recipe == WeightConcat::Stack);
    }

    /// Builds the merged weights of `node` from M spec-identical stores.
    inline WeightMap merge_weights(const MergeRule& rule, const OpNode& node,
                                   std::span<const WeightStore> stores)
    {
        if (stores.empty())
        {
            throw Error(ErrorCode::ArchitectureMismatch, "no weight stores to merge", node.id);
        }
        WeightMap merged;
        for (std::size_t slot = 0; slot < node.weights.size(); ++slot)
        {
            const auto& name = node.weights[slot];
            std::vector<const TensorValue*> parts;
            for (std::size_t m = 0; m < stores.size(); ++m)
            {
                auto it = stores[m].tensors.find(name);
                if (it == stores[m].tensors.end())
                {
                    throw Error(ErrorCode::ArchitectureMismatch,
                                "weight '" + name + "' missing from model " + std::to_string(m), node.id);
                }
                if (!parts.empty() && !it->second.spec().same_shape(parts.front()->spec()))
                {
                    throw Error(ErrorCode::ArchitectureMismatch,
                                "weight '" + name + "' is " + parts.front()->spec().str() +
                                    " in model 0 but " + it->second.spec().str() + " in model " +
                                    std::to_string(m),
                                node.id);
                }
                parts.push_back(&it->second);
            }
            merged.emplace(name, concat_weight(rule.weight_recipe.at(slot), parts));
        }
        return merged;
    }

    inline nlohmann::json rules_to_json()
    {
        nlohmann::json rules = nlohmann::json::array();
        for (auto kind : all_op_kinds)
        {
            const auto& r = rule_for(kind);
            const auto& schema = op_schema(kind);
            nlohmann::json weights = nlohmann::json::array();
            for (std::size_t i = 0; i < r.weight_recipe.size(); ++i)
            {
                weights.push_back({{"slot", schema.weight_slots.at(i)}, {"concat", to_string(r.weight_recipe[i])}});
            }
            const char* constraint = "none";
            switch (r.constraint)
            {
            case AxisConstraint::None: break;
            case AxisConstraint::AxisAttr: constraint = "axis attribute must not be the packed axis"; break;
            case AxisConstraint::TrailingTwo: constraint = "window axes must not be the packed axis"; break;
            case AxisConstraint::AllAxes: constraint = "requires Batch packing"; break;
            }
            rules.push_back({{"source", to_string(r.source)},
                             {"target", to_string(r.target)},
                             {"merge_dim", to_string(r.required)},
                             {"weights", weights},
                             {"group_count", r.multiplies_groups ? "M * source groups" : "unchanged"},
                             {"constraint", constraint}});
        }
        return nlohmann::json{{"schema", 1}, {"rules", rules}};
    }
}
