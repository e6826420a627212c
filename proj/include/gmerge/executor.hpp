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

#include <chrono>
#include <map>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "gmerge/graph.hpp"
#include "gmerge/kernels.hpp"
#include "gmerge/op_schema.hpp"
#include "gmerge/validate.hpp"
#include "gmerge/weights.hpp"

namespace gmerge
{
    using TensorMap = std::map<std::string, TensorValue>;

    struct NodeTrace
    {
        std::string id;
        OpKind kind;
        std::int64_t elapsed_ns = 0;
        std::optional<TensorValue> output;
    };

    struct ExecTrace
    {
        std::vector<NodeTrace> nodes;
        std::size_t invocations = 0;
        // high-water mark of live activation bytes, inputs included
        std::size_t peak_live_bytes = 0;
    };

    struct ExecOptions
    {
        bool keep_intermediates = true;
    };

    struct ExecResult
    {
        std::vector<TensorValue> outputs;
        ExecTrace trace;
    };

    /// Resolves a graph against a weight map once so it can be run many times.
    /// Runs are sequential in topological order and deterministic. The weight
    /// map is referenced, not copied, and must outlive the executor.
    class Executor
    {
    public:
        Executor(const Executor&) = delete;
        Executor& operator=(const Executor&) = delete;
        Executor(Executor&&) = default;
        Executor& operator=(Executor&&) = default;

        Executor(Graph graph, const WeightMap& weights)
            : m_graph(std::move(graph))
        {
            require_valid(m_graph);
            auto order = topological_order(m_graph);

            std::unordered_map<std::string, std::size_t> slot_of;
            for (const auto& in : m_graph.inputs)
            {
                slot_of.emplace(in.name, m_slots++);
            }
            std::unordered_map<std::string, const OpNode*> by_id;
            for (const auto& n : m_graph.nodes)
            {
                by_id.emplace(n.id, &n);
            }
            for (const auto& id : order)
            {
                const OpNode& n = *by_id.at(id);
                Step step{&n, {}, {}, m_slots};
                std::vector<TensorSpec> in_specs;
                for (const auto& r : n.inputs)
                {
                    step.inputs.push_back(slot_of.at(r.node));
                    in_specs.push_back(*m_graph.spec_of(r));
                }
                auto expected = expected_weight_specs(n, in_specs);
                for (std::size_t i = 0; i < n.weights.size(); ++i)
                {
                    auto it = weights.find(n.weights[i]);
                    if (it == weights.end())
                    {
                        throw Error(ErrorCode::MissingWeight, "weight '" + n.weights[i] + "' not provided", n.id);
                    }
                    if (!it->second.spec().same_shape(expected[i]))
                    {
                        throw Error(ErrorCode::Shape,
                                    "weight '" + n.weights[i] + "' is " + it->second.spec().str() +
                                        ", expected " + expected[i].str(),
                                    n.id);
                    }
                    step.weights.push_back(&it->second);
                }
                slot_of.emplace(n.id, m_slots++);
                m_steps.push_back(std::move(step));
            }
            for (const auto& r : m_graph.outputs)
            {
                m_output_slots.push_back(slot_of.at(r.node));
            }

            // last step index reading each slot; outputs stay alive to the end
            m_last_use.assign(m_slots, -1);
            for (std::size_t s = 0; s < m_steps.size(); ++s)
            {
                for (auto in : m_steps[s].inputs)
                {
                    m_last_use[in] = static_cast<std::ptrdiff_t>(s);
                }
            }
            for (auto out : m_output_slots)
            {
                m_last_use[out] = static_cast<std::ptrdiff_t>(m_steps.size());
            }
        }

        const Graph& graph() const { return m_graph; }
        std::size_t node_count() const { return m_steps.size(); }

        ExecResult run(const TensorMap& inputs, const ExecOptions& options = {}) const
        {
            std::vector<std::optional<TensorValue>> values(m_slots);
            std::size_t live = 0;
            ExecResult result;
            auto& trace = result.trace;

            for (std::size_t i = 0; i < m_graph.inputs.size(); ++i)
            {
                const auto& decl = m_graph.inputs[i];
                auto it = inputs.find(decl.name);
                if (it == inputs.end())
                {
                    throw Error(ErrorCode::MissingInput, "graph input '" + decl.name + "' not provided");
                }
                if (!it->second.spec().same_shape(decl.spec))
                {
                    throw Error(ErrorCode::Shape, "graph input '" + decl.name + "' is " +
                                                      it->second.spec().str() + ", expected " +
                                                      decl.spec.str());
                }
                values[i] = it->second;
                live += decl.spec.byte_size();
            }
            trace.peak_live_bytes = live;

            std::vector<const TensorValue*> args;
            for (std::size_t s = 0; s < m_steps.size(); ++s)
            {
                const auto& step = m_steps[s];
                args.clear();
                for (auto in : step.inputs)
                {
                    args.push_back(&*values[in]);
                }
                auto start = std::chrono::steady_clock::now();
                TensorValue out;
                try
                {
                    out = invoke(*step.node, args, step.weights);
                }
                catch (const Error& e)
                {
                    throw e.at_node(step.node->id);
                }
                auto stop = std::chrono::steady_clock::now();
                out.set_layout(step.node->output.layout);
                ++trace.invocations;

                live += out.spec().byte_size();
                trace.peak_live_bytes = std::max(trace.peak_live_bytes, live);
                NodeTrace nt{step.node->id, step.node->kind,
                             std::chrono::duration_cast<std::chrono::nanoseconds>(stop - start).count(),
                             std::nullopt};
                if (options.keep_intermediates)
                {
                    nt.output = out;
                }
                trace.nodes.push_back(std::move(nt));
                values[step.output] = std::move(out);

                for (auto in : step.inputs)
                {
                    if (m_last_use[in] == static_cast<std::ptrdiff_t>(s) && values[in])
                    {
                        live -= values[in]->spec().byte_size();
                        values[in].reset();
                    }
                }
            }
            for (auto slot : m_output_slots)
            {
                result.outputs.push_back(*values[slot]);
            }
            return result;
        }

        /// Kernel dispatch for a single node.
        static TensorValue invoke(const OpNode& n, const std::vector<const TensorValue*>& in,
                                  const std::vector<const TensorValue*>& w)
        {
            namespace k = kernels;
            const auto& a = n.attrs;
            const TensorValue* bias = w.size() > 1 ? w[1] : nullptr;
            switch (n.kind)
            {
            case OpKind::Conv2D:
                return k::conv2d(*in[0], *w[0], bias, a.get_int("stride"), a.get_int("padding"));
            case OpKind::GroupedConv2D:
                return k::grouped_conv2d(*in[0], *w[0], bias, a.get_int("stride"), a.get_int("padding"),
                                         a.get_int("groups"));
            case OpKind::MatMul: return k::matmul(*in[0], *w[0], bias);
            case OpKind::BatchMatMul: return k::batch_matmul(*in[0], *w[0], bias);
            case OpKind::LayerNorm: return k::layer_norm(*in[0], *w[0], *w[1], a.get_double("eps"));
            case OpKind::GroupNorm:
                return k::group_norm(*in[0], *w[0], *w[1], a.get_int("groups"), a.get_double("eps"));
            case OpKind::BatchNorm:
                return k::batch_norm_inference(*in[0], *w[0], *w[1], *w[2], *w[3], a.get_double("eps"));
            case OpKind::ReLU: return k::relu(*in[0]);
            case OpKind::Tanh: return k::tanh(*in[0]);
            case OpKind::Add: return k::add(*in[0], *in[1]);
            case OpKind::Mul: return k::mul(*in[0], *in[1]);
            case OpKind::Softmax: return k::softmax(*in[0], a.get_int("axis"));
            case OpKind::MaxPool2D: return k::max_pool2d(*in[0], a.get_int("kernel"), a.get_int("stride"));
            case OpKind::MeanPool2D: return k::mean_pool2d(*in[0], a.get_int("kernel"), a.get_int("stride"));
            case OpKind::Concat: return k::concat(in, a.get_int("axis"));
            case OpKind::Reshape: return k::reshape(*in[0], a.get_ints("shape"));
            case OpKind::Transpose: return k::transpose(*in[0], a.get_ints("perm"));
            case OpKind::Pack: return k::pack(in, a.get_int("axis"), a.get_int("stack") != 0);
            case OpKind::Unpack:
                return k::unpack(*in[0], a.get_int("count"), a.get_int("index"), a.get_int("axis"),
                                 a.get_int("stack") != 0);
            }
            throw Error(ErrorCode::UnsupportedOp, "no kernel for op kind", n.id);
        }

    private:
        struct Step
        {
            const OpNode* node;
            std::vector<std::size_t> inputs;
            std::vector<const TensorValue*> weights;
            std::size_t output;
        };

        Graph m_graph;
        std::vector<Step> m_steps;
        std::size_t m_slots = 0;
        std::vector<std::size_t> m_output_slots;
        std::vector<std::ptrdiff_t> m_last_use;
    };

    inline ExecResult execute(const Graph& graph, const WeightMap& weights, const TensorMap& inputs,
                              const ExecOptions& options = {})
    {
        return Executor(graph, weights).run(inputs, options);
    }

    inline ExecResult execute(const Graph& graph, const WeightStore& weights, const TensorMap& inputs,
                              const ExecOptions& options = {})
    {
        return execute(graph, weights.tensors, inputs, options);
    }
}
