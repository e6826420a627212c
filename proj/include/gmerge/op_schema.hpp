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

// Per-kind attribute schema, input/weight arity and shape inference. Weight
// shapes are not stored in the graph; they follow from the attributes and the
// input specs, which is what lets validate() vouch for executability.

#include <algorithm>
#include <span>
#include <string>
#include <vector>

#include "gmerge/error.hpp"
#include "gmerge/graph.hpp"
#include "gmerge/tensor.hpp"

namespace gmerge
{
    enum class AttrType
    {
        Int,
        Double,
        Ints,
    };

    struct AttrSchema
    {
        const char* name;
        AttrType type;
    };

    struct OpSchema
    {
        std::vector<AttrSchema> attrs;
        // -1 for variadic (at least one)
        int input_arity = 1;
        // weight slot names; slots past `required_weights` are optional
        std::vector<const char*> weight_slots;
        std::size_t required_weights = 0;
    };

    inline const OpSchema& op_schema(OpKind kind)
    {
        using A = AttrType;
        static const OpSchema conv{
            {{"kernel", A::Int}, {"stride", A::Int}, {"padding", A::Int}, {"out_channels", A::Int}},
            1,
            {"weight", "bias"},
            1};
        static const OpSchema gconv{{{"kernel", A::Int},
                                     {"stride", A::Int},
                                     {"padding", A::Int},
                                     {"out_channels", A::Int},
                                     {"groups", A::Int}},
                                    1,
                                    {"weight", "bias"},
                                    1};
        static const OpSchema matmul{{{"out_features", A::Int}}, 1, {"weight", "bias"}, 1};
        static const OpSchema bmm{
            {{"out_features", A::Int}, {"groups", A::Int}}, 1, {"weight", "bias"}, 1};
        static const OpSchema ln{{{"eps", A::Double}}, 1, {"gamma", "beta"}, 2};
        static const OpSchema gn{{{"eps", A::Double}, {"groups", A::Int}}, 1, {"gamma", "beta"}, 2};
        static const OpSchema bn{
            {{"eps", A::Double}}, 1, {"gamma", "beta", "running_mean", "running_var"}, 4};
        static const OpSchema unary{{}, 1, {}, 0};
        static const OpSchema binary{{}, 2, {}, 0};
        static const OpSchema softmax{{{"axis", A::Int}}, 1, {}, 0};
        static const OpSchema pool{{{"kernel", A::Int}, {"stride", A::Int}}, 1, {}, 0};
        static const OpSchema concat{{{"axis", A::Int}}, -1, {}, 0};
        static const OpSchema reshape{{{"shape", A::Ints}}, 1, {}, 0};
        static const OpSchema transpose{{{"perm", A::Ints}}, 1, {}, 0};
        static const OpSchema pack{
            {{"axis", A::Int}, {"count", A::Int}, {"stack", A::Int}}, -1, {}, 0};
        static const OpSchema unpack{
            {{"axis", A::Int}, {"count", A::Int}, {"index", A::Int}, {"stack", A::Int}}, 1, {}, 0};

        switch (kind)
        {
        case OpKind::Conv2D: return conv;
        case OpKind::GroupedConv2D: return gconv;
        case OpKind::MatMul: return matmul;
        case OpKind::BatchMatMul: return bmm;
        case OpKind::LayerNorm: return ln;
        case OpKind::GroupNorm: return gn;
        case OpKind::BatchNorm: return bn;
        case OpKind::ReLU:
        case OpKind::Tanh: return unary;
        case OpKind::Add:
        case OpKind::Mul: return binary;
        case OpKind::Softmax: return softmax;
        case OpKind::MaxPool2D:
        case OpKind::MeanPool2D: return pool;
        case OpKind::Concat: return concat;
        case OpKind::Reshape: return reshape;
        case OpKind::Transpose: return transpose;
        case OpKind::Pack: return pack;
        case OpKind::Unpack: return unpack;
        }
        throw Error(ErrorCode::UnsupportedOp, "no schema for op kind");
    }

    /// Group count of a node, 1 for kinds without one.
    inline std::int64_t group_count(const OpNode& node)
    {
        switch (node.kind)
        {
        case OpKind::GroupedConv2D:
        case OpKind::BatchMatMul:
        case OpKind::GroupNorm: return node.attrs.get_int("groups");
        default: return 1;
        }
    }

    inline bool has_bias(const OpNode& node)
    {
        const auto& s = op_schema(node.kind);
        return s.weight_slots.size() == 2 && s.required_weights == 1 && node.weights.size() == 2;
    }

    /// Checks attribute presence/types and the node's input and weight arity.
    inline void check_node_signature(const OpNode& node)
    {
        const auto& schema = op_schema(node.kind);
        for (const auto& a : schema.attrs)
        {
            auto it = node.attrs.values.find(a.name);
            if (it == node.attrs.values.end())
            {
                throw Error(ErrorCode::InvalidGraph, std::string("missing attribute '") + a.name + "'",
                            node.id);
            }
            bool ok = (a.type == AttrType::Int && std::holds_alternative<std::int64_t>(it->second)) ||
                      (a.type == AttrType::Double && std::holds_alternative<double>(it->second)) ||
                      (a.type == AttrType::Ints &&
                       std::holds_alternative<std::vector<std::int64_t>>(it->second));
            if (!ok)
            {
                throw Error(ErrorCode::InvalidGraph,
                            std::string("attribute '") + a.name + "' has the wrong type", node.id);
            }
        }
        for (const auto& [name, value] : node.attrs.values)
        {
            bool known = std::any_of(schema.attrs.begin(), schema.attrs.end(),
                                     [&](const AttrSchema& a) { return name == a.name; });
            if (!known)
            {
                throw Error(ErrorCode::InvalidGraph, "unknown attribute '" + name + "' for " +
                                                         to_string(node.kind),
                            node.id);
            }
        }
        if (schema.input_arity >= 0 &&
            node.inputs.size() != static_cast<std::size_t>(schema.input_arity))
        {
            throw Error(ErrorCode::InvalidGraph,
                        std::string(to_string(node.kind)) + " takes " +
                            std::to_string(schema.input_arity) + " input(s), got " +
                            std::to_string(node.inputs.size()),
                        node.id);
        }
        if (schema.input_arity < 0 && node.inputs.empty())
        {
            throw Error(ErrorCode::InvalidGraph, "variadic op needs at least one input", node.id);
        }
        if (node.weights.size() < schema.required_weights ||
            node.weights.size() > schema.weight_slots.size())
        {
            throw Error(ErrorCode::InvalidGraph,
                        std::string(to_string(node.kind)) + " expects " +
                            std::to_string(schema.required_weights) + ".." +
                            std::to_string(schema.weight_slots.size()) + " weights, got " +
                            std::to_string(node.weights.size()),
                        node.id);
        }
    }

    namespace detail
    {
        inline void require(bool cond, ErrorCode code, const std::string& message)
        {
            if (!cond)
            {
                throw Error(code, message);
            }
        }

        inline std::int64_t positive_attr(const OpNode& node, const char* name)
        {
            auto v = node.attrs.get_int(name);
            require(v >= 1, ErrorCode::InvalidGraph, std::string(name) + " must be >= 1");
            return v;
        }

        inline std::int64_t conv_out_extent(std::int64_t in, std::int64_t k, std::int64_t stride,
                                            std::int64_t pad)
        {
            return (in + 2 * pad - k) / stride + 1;
        }

        /// Resolves a reshape target where 0 copies the input extent at the
        /// same position and a single -1 absorbs the remainder.
        inline Shape resolve_reshape(const Shape& in, const std::vector<std::int64_t>& target)
        {
            Shape out(target.size());
            std::int64_t known = 1;
            int infer_at = -1;
            for (std::size_t i = 0; i < target.size(); ++i)
            {
                auto t = target[i];
                if (t == 0)
                {
                    require(i < in.size(), ErrorCode::Shape, "reshape copy-dim past input rank");
                    out[i] = in[i];
                }
                else if (t == -1)
                {
                    require(infer_at < 0, ErrorCode::Shape, "reshape allows a single -1");
                    infer_at = static_cast<int>(i);
                    continue;
                }
                else
                {
                    require(t >= 1, ErrorCode::Shape, "reshape extents must be >= 1, 0 or -1");
                    out[i] = t;
                }
                known *= out[i];
            }
            auto total = shape_size(in);
            if (infer_at >= 0)
            {
                require(known > 0 && total % known == 0, ErrorCode::Shape,
                        "cannot reshape " + to_string(in) + " with inferred extent");
                out[static_cast<std::size_t>(infer_at)] = total / known;
            }
            require(shape_size(out) == total, ErrorCode::Shape,
                    "cannot reshape " + to_string(in) + " to " + to_string(out));
            return out;
        }

        inline std::int64_t axis_attr(const OpNode& node, std::size_t rank, bool allow_end = false)
        {
            auto a = node.attrs.get_int("axis");
            auto limit = static_cast<std::int64_t>(rank) + (allow_end ? 1 : 0);
            require(a >= 0 && a < limit, ErrorCode::Shape,
                    "axis " + std::to_string(a) + " out of range for rank " + std::to_string(rank));
            return a;
        }
    }

    /// Output spec of `node` given its input specs. Layout is left Unlaid.
    /// Throws Shape/GroupDivisibility/InvalidGraph errors (without node id).
    inline TensorSpec infer_output(const OpNode& node, std::span<const TensorSpec> in)
    {
        using detail::require;
        require(!in.empty(), ErrorCode::InvalidGraph, "op has no inputs");
        const auto dtype = in[0].dtype;
        for (const auto& s : in)
        {
            require(s.dtype == dtype, ErrorCode::Shape, "mixed dtypes among inputs");
        }
        const auto& x = in[0].dims;
        TensorSpec out{dtype, x, Layout::Unlaid};

        switch (node.kind)
        {
        case OpKind::Conv2D:
        case OpKind::GroupedConv2D:
        {
            require(x.size() == 4, ErrorCode::Shape, "convolution input must be (N, C, H, W), got " + to_string(x));
            auto k = detail::positive_attr(node, "kernel");
            auto stride = detail::positive_attr(node, "stride");
            auto pad = node.attrs.get_int("padding");
            require(pad >= 0, ErrorCode::InvalidGraph, "padding must be >= 0");
            auto cout = detail::positive_attr(node, "out_channels");
            auto g = node.kind == OpKind::GroupedConv2D ? detail::positive_attr(node, "groups") : 1;
            require(x[1] % g == 0 && cout % g == 0, ErrorCode::GroupDivisibility,
                    "groups " + std::to_string(g) + " must divide input channels " +
                        std::to_string(x[1]) + " and output channels " + std::to_string(cout));
            require(k <= x[2] + 2 * pad && k <= x[3] + 2 * pad, ErrorCode::Shape,
                    "kernel " + std::to_string(k) + " exceeds padded input " + to_string(x));
            out.dims = {x[0], cout, detail::conv_out_extent(x[2], k, stride, pad),
                        detail::conv_out_extent(x[3], k, stride, pad)};
            return out;
        }
        case OpKind::MatMul:
        case OpKind::BatchMatMul:
        {
            require(x.size() >= 2, ErrorCode::Shape, "matmul input must have rank >= 2, got " + to_string(x));
            auto dout = detail::positive_attr(node, "out_features");
            if (node.kind == OpKind::BatchMatMul)
            {
                auto g = detail::positive_attr(node, "groups");
                auto rows = shape_size(x) / x.back();
                require(rows % g == 0, ErrorCode::GroupDivisibility,
                        "groups " + std::to_string(g) + " must divide the " + std::to_string(rows) +
                            " input rows");
            }
            out.dims.back() = dout;
            return out;
        }
        case OpKind::LayerNorm:
        case OpKind::GroupNorm:
        case OpKind::BatchNorm:
        {
            auto eps = node.attrs.get_double("eps");
            require(eps >= 0.0, ErrorCode::Domain, "eps must be >= 0");
            if (node.kind == OpKind::GroupNorm)
            {
                auto g = detail::positive_attr(node, "groups");
                auto c = x[channel_axis(x.size())];
                require(c % g == 0, ErrorCode::GroupDivisibility,
                        "groups " + std::to_string(g) + " must divide channels " + std::to_string(c));
            }
            return out;
        }
        case OpKind::ReLU:
        case OpKind::Tanh: return out;
        case OpKind::Add:
        case OpKind::Mul:
            require(in[1].dims == x, ErrorCode::Shape,
                    "elementwise operands differ: " + to_string(x) + " vs " + to_string(in[1].dims));
            return out;
        case OpKind::Softmax: detail::axis_attr(node, x.size()); return out;
        case OpKind::MaxPool2D:
        case OpKind::MeanPool2D:
        {
            require(x.size() >= 2, ErrorCode::Shape, "pooling needs rank >= 2");
            auto k = detail::positive_attr(node, "kernel");
            auto stride = detail::positive_attr(node, "stride");
            auto h = x[x.size() - 2];
            auto w = x[x.size() - 1];
            require(k <= h && k <= w && (h - k) % stride == 0 && (w - k) % stride == 0,
                    ErrorCode::Shape,
                    "pool window " + std::to_string(k) + "/" + std::to_string(stride) +
                        " overhangs input " + to_string(x));
            out.dims[x.size() - 2] = (h - k) / stride + 1;
            out.dims[x.size() - 1] = (w - k) / stride + 1;
            return out;
        }
        case OpKind::Concat:
        {
            auto axis = static_cast<std::size_t>(detail::axis_attr(node, x.size()));
            std::int64_t total = 0;
            for (const auto& s : in)
            {
                require(s.rank() == x.size(), ErrorCode::Shape, "concat operands differ in rank");
                for (std::size_t a = 0; a < x.size(); ++a)
                {
                    require(a == axis || s.dims[a] == x[a], ErrorCode::Shape,
                            "concat operands " + to_string(x) + " and " + to_string(s.dims) +
                                " differ off the concat axis");
                }
                total += s.dims[axis];
            }
            out.dims[axis] = total;
            return out;
        }
        case OpKind::Reshape:
            out.dims = detail::resolve_reshape(x, node.attrs.get_ints("shape"));
            return out;
        case OpKind::Transpose:
        {
            const auto& perm = node.attrs.get_ints("perm");
            require(perm.size() == x.size(), ErrorCode::Shape, "transpose perm rank mismatch");
            std::vector<bool> used(x.size(), false);
            for (std::size_t i = 0; i < perm.size(); ++i)
            {
                auto p = perm[i];
                require(p >= 0 && p < static_cast<std::int64_t>(x.size()) && !used[p], ErrorCode::Shape,
                        "transpose perm is not a permutation");
                used[p] = true;
                out.dims[i] = x[p];
            }
            return out;
        }
        case OpKind::Pack:
        {
            auto count = detail::positive_attr(node, "count");
            require(static_cast<std::int64_t>(in.size()) == count, ErrorCode::Shape,
                    "pack count does not match input count");
            for (const auto& s : in)
            {
                require(s.dims == x, ErrorCode::Shape,
                        "pack operands differ: " + to_string(x) + " vs " + to_string(s.dims));
            }
            bool stack = node.attrs.get_int("stack") != 0;
            auto axis = static_cast<std::size_t>(detail::axis_attr(node, x.size(), stack));
            if (stack)
            {
                out.dims.insert(out.dims.begin() + static_cast<std::ptrdiff_t>(axis), count);
            }
            else
            {
                out.dims[axis] *= count;
            }
            return out;
        }
        case OpKind::Unpack:
        {
            auto count = detail::positive_attr(node, "count");
            auto index = node.attrs.get_int("index");
            require(index >= 0 && index < count, ErrorCode::Shape, "unpack index out of range");
            bool stack = node.attrs.get_int("stack") != 0;
            auto axis = static_cast<std::size_t>(detail::axis_attr(node, x.size()));
            if (stack)
            {
                require(x[axis] == count && x.size() >= 2, ErrorCode::Shape,
                        "unpack axis extent " + std::to_string(x[axis]) + " != count " +
                            std::to_string(count));
                out.dims.erase(out.dims.begin() + static_cast<std::ptrdiff_t>(axis));
            }
            else
            {
                require(x[axis] % count == 0, ErrorCode::Shape, "unpack count must divide the axis");
                out.dims[axis] /= count;
            }
            return out;
        }
        }
        throw Error(ErrorCode::UnsupportedOp, "unhandled op kind");
    }

    /// Specs the node's weights must have, in slot order, for the node's
    /// actual number of weight references.
    inline std::vector<TensorSpec> expected_weight_specs(const OpNode& node,
                                                         std::span<const TensorSpec> in)
    {
        if (node.weights.empty())
        {
            return {};
        }
        const auto dtype = in[0].dtype;
        const auto& x = in[0].dims;
        auto spec = [dtype](Shape d) { return TensorSpec{dtype, std::move(d), Layout::Unlaid}; };
        std::vector<TensorSpec> out;
        switch (node.kind)
        {
        case OpKind::Conv2D:
        case OpKind::GroupedConv2D:
        {
            auto g = group_count(node);
            auto k = node.attrs.get_int("kernel");
            auto cout = node.attrs.get_int("out_channels");
            out.push_back(spec({cout, x[1] / g, k, k}));
            if (has_bias(node))
                out.push_back(spec({cout}));
            break;
        }
        case OpKind::MatMul:
        {
            auto dout = node.attrs.get_int("out_features");
            out.push_back(spec({x.back(), dout}));
            if (has_bias(node))
                out.push_back(spec({dout}));
            break;
        }
        case OpKind::BatchMatMul:
        {
            auto g = node.attrs.get_int("groups");
            auto dout = node.attrs.get_int("out_features");
            out.push_back(spec({g, x.back(), dout}));
            if (has_bias(node))
                out.push_back(spec({g, dout}));
            break;
        }
        case OpKind::LayerNorm:
        case OpKind::GroupNorm:
        case OpKind::BatchNorm:
        {
            auto c = x[channel_axis(x.size())];
            for (std::size_t i = 0; i < node.weights.size(); ++i)
                out.push_back(spec({c}));
            break;
        }
        default: break;
        }
        return out;
    }
}
