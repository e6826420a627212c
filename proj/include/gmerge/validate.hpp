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

#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "gmerge/graph.hpp"
#include "gmerge/op_schema.hpp"

namespace gmerge
{
    struct Diagnostic
    {
        std::string node;
        std::string rule;
        std::string message;

        std::string str() const
        {
            return (node.empty() ? std::string("<graph>") : node) + " [" + rule + "] " + message;
        }
    };

    /// Metadata key marking a graph produced by the merger; only such graphs
    /// may carry non-Unlaid layout tags.
    inline constexpr const char* kMergedModelsKey = "merge.models";

    inline bool is_merged_graph(const Graph& g) { return g.metadata.count(kMergedModelsKey) != 0; }

    /// Checks every structural rule of the IR. Empty result means the graph
    /// can be executed given weights of the expected specs.
    inline std::vector<Diagnostic> validate(const Graph& graph)
    {
        std::vector<Diagnostic> diags;
        auto report = [&](std::string node, std::string rule, std::string message) {
            diags.push_back({std::move(node), std::move(rule), std::move(message)});
        };

        if (graph.outputs.empty())
        {
            report("", "no outputs", "no outputs");
        }

        const bool merged = is_merged_graph(graph);
        std::set<std::string> names;
        auto check_spec = [&](const std::string& owner, const TensorSpec& s) {
            if (s.dims.empty())
            {
                report(owner, "dims", "rank must be >= 1");
            }
            for (auto d : s.dims)
            {
                if (d < 1)
                {
                    report(owner, "dims", "extent " + std::to_string(d) + " in " + to_string(s.dims));
                    break;
                }
            }
            if (!merged && s.layout != Layout::Unlaid)
            {
                report(owner, "layout", std::string("unmerged graph carries layout ") + to_string(s.layout));
            }
        };

        for (const auto& in : graph.inputs)
        {
            if (!names.insert(in.name).second)
            {
                report(in.name, "duplicate id", "name used more than once");
            }
            check_spec(in.name, in.spec);
        }
        bool signatures_ok = true;
        for (const auto& n : graph.nodes)
        {
            if (!names.insert(n.id).second)
            {
                report(n.id, "duplicate id", "name used more than once");
            }
            check_spec(n.id, n.output);
            try
            {
                check_node_signature(n);
            }
            catch (const Error& e)
            {
                signatures_ok = false;
                report(n.id, "signature", e.message());
            }
        }

        bool refs_ok = true;
        for (const auto& n : graph.nodes)
        {
            for (const auto& in : n.inputs)
            {
                if (in.index != 0 || names.count(in.node) == 0)
                {
                    refs_ok = false;
                    report(n.id, "unresolved input", "input '" + in.str() + "' does not resolve");
                }
            }
        }
        for (const auto& out : graph.outputs)
        {
            if (out.index != 0 || names.count(out.node) == 0)
            {
                refs_ok = false;
                report("", "unresolved output", "output '" + out.str() + "' does not resolve");
            }
        }
        if (!refs_ok)
        {
            return diags;
        }

        std::vector<std::string> order;
        try
        {
            order = topological_order(graph);
        }
        catch (const Error& e)
        {
            report(e.node(), "cycle", e.message());
            return diags;
        }

        // shape consistency, in dependency order so parents are checked first
        if (signatures_ok)
        {
            for (const auto& id : order)
            {
                const auto& n = *graph.find(id);
                std::vector<TensorSpec> in;
                for (const auto& r : n.inputs)
                {
                    in.push_back(*graph.spec_of(r));
                }
                try
                {
                    auto expected = infer_output(n, in);
                    if (!expected.same_shape(n.output))
                    {
                        report(n.id, "shape",
                               "declared output " + n.output.str() + " but inputs imply " +
                                   expected.str());
                    }
                }
                catch (const Error& e)
                {
                    report(n.id, "shape", e.message());
                }
            }
        }

        // every output must trace back to at least one graph input
        std::unordered_map<std::string, bool> reaches;
        for (const auto& in : graph.inputs)
        {
            reaches[in.name] = true;
        }
        for (const auto& id : order)
        {
            const auto& n = *graph.find(id);
            bool r = false;
            for (const auto& in : n.inputs)
            {
                r = r || reaches[in.node];
            }
            reaches[id] = r;
        }
        for (const auto& out : graph.outputs)
        {
            if (!reaches[out.node])
            {
                report(out.node, "unreachable output", "output not reachable from any graph input");
            }
        }
        return diags;
    }

    /// Throws InvalidGraph listing all diagnostics when validation fails.
    inline void require_valid(const Graph& graph)
    {
        auto diags = validate(graph);
        if (diags.empty())
        {
            return;
        }
        std::string msg;
        for (const auto& d : diags)
        {
            msg += (msg.empty() ? "" : "; ") + d.str();
        }
        throw Error(ErrorCode::InvalidGraph, msg, diags.front().node);
    }
}
