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

#include <cmath>
#include <cstring>
#include <cstdint>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "gmerge/executor.hpp"
#include "gmerge/graph_util.hpp"
#include "gmerge/merger.hpp"
#include "gmerge/zoo.hpp"

namespace gmerge
{
    struct Mismatch
    {
        std::size_t model = 0;
        std::size_t output = 0;
        std::int64_t index = 0;
        double expected = 0;
        double actual = 0;
    };

    struct VerifyReport
    {
        std::size_t models = 0;
        std::size_t compared_elements = 0;
        double max_abs_error = 0;
        double max_rel_error = 0;
        // 0 means bit-exact comparison
        double tolerance = 0;
        std::optional<Mismatch> first_mismatch;

        bool passed() const { return !first_mismatch; }

        std::string str() const
        {
            std::ostringstream os;
            os << (passed() ? "PASS" : "FAIL") << ": " << models << " models, " << compared_elements
               << " elements, max abs error " << max_abs_error << ", max rel error " << max_rel_error;
            if (first_mismatch)
            {
                const auto& m = *first_mismatch;
                os << "; first mismatch at model " << m.model << ", output " << m.output << ", index " << m.index
                   << ": expected " << m.expected << ", got " << m.actual;
            }
            return os.str();
        }
    };

    namespace detail
    {
        inline void compare(const TensorValue& expected, const TensorValue& actual, std::size_t model,
                            std::size_t output, VerifyReport& report)
        {
            if (!expected.spec().same_shape(actual.spec()))
            {
                throw Error(ErrorCode::Shape, "output " + std::to_string(output) + " of model " +
                                                  std::to_string(model) + " is " + actual.spec().str() +
                                                  ", expected " + expected.spec().str());
            }
            const bool exact = report.tolerance == 0;
            dispatch_dtype(expected.dtype(), [&]<typename T>() {
                auto e = expected.data<T>();
                auto a = actual.data<T>();
                for (std::size_t i = 0; i < e.size(); ++i)
                {
                    const double ev = e[i];
                    const double av = a[i];
                    const double abs = std::fabs(ev - av);
                    const double rel = abs / std::max(std::fabs(ev), 1e-30);
                    const bool same_bits = std::memcmp(&e[i], &a[i], sizeof(T)) == 0;
                    if (!same_bits)
                    {
                        report.max_abs_error = std::max(report.max_abs_error, abs);
                        report.max_rel_error = std::max(report.max_rel_error, abs == 0 ? 0.0 : rel);
                    }
                    const bool bad = exact ? !same_bits : !(rel <= report.tolerance || abs == 0);
                    if (bad && !report.first_mismatch)
                        report.first_mismatch = Mismatch{model, output, static_cast<std::int64_t>(i), ev, av};
                }
                report.compared_elements += e.size();
            });
        }

        inline TensorMap packed_inputs(const Graph& source, std::span<const TensorMap> per_model)
        {
            TensorMap packed;
            for (std::size_t m = 0; m < per_model.size(); ++m)
            {
                for (const auto& in : source.inputs)
                    packed.emplace(packed_input_name(in.name, m), per_model[m].at(in.name));
            }
            return packed;
        }
    }

    /// Runs each model alone and the merged graph on the same seeded inputs and
    /// compares outputs slice by slice. Both graphs are re-batched to `batch`.
    inline VerifyReport verify_merge(const Graph& source, std::span<const WeightStore> stores,
                                     const Graph& merged, const WeightMap& merged_weights, std::int64_t batch,
                                     std::uint64_t seed, double tolerance = 0)
    {
        const auto m_count = stores.size();
        auto src = with_batch(source, batch);
        auto mgd = with_batch(merged, batch);
        if (mgd.outputs.size() != src.outputs.size() * m_count)
        {
            throw Error(ErrorCode::InvalidGraph, "merged graph has " + std::to_string(mgd.outputs.size()) +
                                                     " outputs, expected " +
                                                     std::to_string(src.outputs.size() * m_count));
        }
        std::vector<TensorMap> inputs;
        for (std::size_t m = 0; m < m_count; ++m)
            inputs.push_back(zoo::random_inputs(src, seed, static_cast<int>(m)));

        VerifyReport report;
        report.models = m_count;
        report.tolerance = tolerance;
        ExecOptions lean{false};
        auto merged_out = execute(mgd, merged_weights, detail::packed_inputs(src, inputs), lean).outputs;
        for (std::size_t m = 0; m < m_count; ++m)
        {
            auto ref_out = execute(src, stores[m], inputs[m], lean).outputs;
            for (std::size_t o = 0; o < ref_out.size(); ++o)
                detail::compare(ref_out[o], merged_out[o * m_count + m], m, o, report);
        }
        return report;
    }

    /// Model m's unmerged graph: the backbone followed by head m.
    inline std::pair<Graph, WeightStore> compose_with_head(const Graph& graph, const std::set<std::string>& backbone,
                                                           const WeightStore& store, const HeadModel& head)
    {
        std::vector<std::string> outs;
        for (const auto& in : head.graph.inputs)
            outs.push_back(in.name);
        Graph g = backbone_subgraph(graph, backbone, outs);
        g.nodes.insert(g.nodes.end(), head.graph.nodes.begin(), head.graph.nodes.end());
        g.outputs = head.graph.outputs;
        WeightStore w{store.model_index, {}};
        for (const auto& n : g.nodes)
        {
            for (const auto& name : n.weights)
            {
                if (w.tensors.count(name))
                    continue;
                auto it = head.weights.tensors.find(name);
                w.tensors.emplace(name, it != head.weights.tensors.end() ? it->second : store.at(name));
            }
        }
        require_valid(g);
        return {std::move(g), std::move(w)};
    }

    /// Backbone merges: outputs are head-major, head m's outputs in order.
    inline VerifyReport verify_backbone(const Graph& source, const std::set<std::string>& backbone,
                                        std::span<const WeightStore> stores, std::span<const HeadModel> heads,
                                        const Graph& merged, const WeightMap& merged_weights, std::int64_t batch,
                                        std::uint64_t seed, double tolerance = 0)
    {
        auto mgd = with_batch(merged, batch);
        VerifyReport report;
        report.models = stores.size();
        report.tolerance = tolerance;
        ExecOptions lean{false};

        std::vector<TensorMap> inputs;
        std::vector<std::pair<Graph, WeightStore>> refs;
        for (std::size_t m = 0; m < stores.size(); ++m)
        {
            auto [g, w] = compose_with_head(source, backbone, stores[m], heads[m]);
            refs.emplace_back(with_batch(g, batch), std::move(w));
            inputs.push_back(zoo::random_inputs(refs.back().first, seed, static_cast<int>(m)));
        }
        auto merged_out = execute(mgd, merged_weights, detail::packed_inputs(refs.front().first, inputs), lean).outputs;
        std::size_t offset = 0;
        for (std::size_t m = 0; m < refs.size(); ++m)
        {
            auto ref_out = execute(refs[m].first, refs[m].second, inputs[m], lean).outputs;
            if (offset + ref_out.size() > merged_out.size())
                throw Error(ErrorCode::InvalidGraph, "merged graph has too few outputs for the heads");
            for (std::size_t o = 0; o < ref_out.size(); ++o)
                detail::compare(ref_out[o], merged_out[offset + o], m, o, report);
            offset += ref_out.size();
        }
        return report;
    }
}
