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

#include <map>
#include <set>
#include <string>
#include <unordered_map>
#include <vector>

#include "gmerge/graph.hpp"
#include "gmerge/op_schema.hpp"
#include "gmerge/validate.hpp"

namespace gmerge
{
    /// Copy of `graph` with every graph input's leading extent set to `batch`
    /// and all node output specs re-inferred. Layout tags are kept.
    inline Graph with_batch(const Graph& graph, std::int64_t batch)
    {
        if (batch < 1)
        {
            throw Error(ErrorCode::Shape, "batch must be >= 1");
        }
        Graph g = graph;
        for (auto& in : g.inputs)
        {
            in.spec.dims.at(0) = batch;
        }
        std::unordered_map<std::string, OpNode*> by_id;
        for (auto& n : g.nodes)
        {
            by_id.emplace(n.id, &n);
        }
        for (const auto& id : topological_order(g))
        {
            auto& n = *by_id.at(id);
            std::vector<TensorSpec> in;
            for (const auto& r : n.inputs)
            {
                in.push_back(*g.spec_of(r));
            }
            try
            {
                auto layout = n.output.layout;
                n.output = infer_output(n, in);
                n.output.layout = layout;
            }
            catch (const Error& e)
            {
                throw e.at_node(n.id);
            }
        }
        return g;
    }

    /// Drops nodes from which no graph output is reachable.
    inline Graph prune_dead(const Graph& graph)
    {
        std::set<std::string> live;
        std::vector<std::string> stack;
        for (const auto& r : graph.outputs)
        {
            stack.push_back(r.node);
        }
        while (!stack.empty())
        {
            auto id = stack.back();
            stack.pop_back();
            if (!live.insert(id).second)
                continue;
            if (auto* n = graph.find(id))
            {
                for (const auto& r : n->inputs)
                    stack.push_back(r.node);
            }
        }
        Graph g = graph;
        std::erase_if(g.nodes, [&](const OpNode& n) { return live.count(n.id) == 0; });
        return g;
    }

    /// Isomorphism of two graphs up to node ids, weight names and graph input
    /// names: same node count, and a consistent node matching reached from the
    /// ordered outputs with equal kinds, attributes, output specs (layout
    /// included), weight counts and ordered inputs.
    inline bool structurally_isomorphic(const Graph& a, const Graph& b, std::string* why = nullptr)
    {
        auto fail = [why](std::string msg) {
            if (why)
                *why = std::move(msg);
            return false;
        };
        if (a.nodes.size() != b.nodes.size())
            return fail("node counts differ: " + std::to_string(a.nodes.size()) + " vs " +
                        std::to_string(b.nodes.size()));
        if (a.inputs.size() != b.inputs.size() || a.outputs.size() != b.outputs.size())
            return fail("graph input/output counts differ");

        std::map<std::string, std::string> fwd;
        std::map<std::string, std::string> back;
        std::vector<std::pair<EdgeRef, EdgeRef>> work;
        for (std::size_t i = 0; i < a.outputs.size(); ++i)
        {
            work.emplace_back(a.outputs[i], b.outputs[i]);
        }
        while (!work.empty())
        {
            auto [ra, rb] = work.back();
            work.pop_back();
            auto fa = fwd.find(ra.node);
            auto fb = back.find(rb.node);
            if (fa != fwd.end() || fb != back.end())
            {
                if (fa == fwd.end() || fa->second != rb.node)
                    return fail("inconsistent matching at '" + ra.node + "' / '" + rb.node + "'");
                continue;
            }
            fwd[ra.node] = rb.node;
            back[rb.node] = ra.node;

            const auto* na = a.find(ra.node);
            const auto* nb = b.find(rb.node);
            if (!na || !nb)
            {
                const auto* ia = a.find_input(ra.node);
                const auto* ib = b.find_input(rb.node);
                if (!ia || !ib || !(ia->spec == ib->spec))
                    return fail("graph inputs '" + ra.node + "' / '" + rb.node + "' do not match");
                continue;
            }
            if (na->kind != nb->kind || !(na->attrs == nb->attrs) || !(na->output == nb->output) ||
                na->weights.size() != nb->weights.size() || na->inputs.size() != nb->inputs.size())
                return fail("nodes '" + na->id + "' and '" + nb->id + "' differ");
            for (std::size_t i = 0; i < na->inputs.size(); ++i)
            {
                work.emplace_back(na->inputs[i], nb->inputs[i]);
            }
        }
        std::size_t matched_nodes = 0;
        for (const auto& [id, other] : fwd)
        {
            matched_nodes += a.find(id) ? 1 : 0;
        }
        if (matched_nodes != a.nodes.size())
            return fail("graphs contain nodes unreachable from the outputs");
        return true;
    }
}
