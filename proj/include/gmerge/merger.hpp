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

// Whole-graph merging of M same-architecture models.
//
// Nodes are visited once each in deterministic topological order. Each node
// is replaced by its counterpart from the rule table and assigned a packing
// dim: the rule's own dim, or for layout-agnostic ops the most frequent dim
// among its parents (ties go to Channel). A layout-agnostic op whose parents
// are all graph inputs takes the dim of its first dim-constrained descendant,
// else Batch. Graph inputs are packed at the dim of their first consumer.
// Wherever an edge joins two different dims, a Transpose + Reshape pair is
// spliced onto that edge.
//
// Naming: merged::<id> for counterparts, pack::<input>, unpack::<id>::<m>,
// transpose::<n> / reshape::<n> for the n-th glue insertion, and per-model
// graph inputs <input>#<m>.

#include <algorithm>
#include <map>
#include <iomanip>
#include <optional>
#include <set>
#include <span>
#include <sstream>
#include <string>
#include <unordered_map>
#include <vector>

#include <json.hpp>

#include "gmerge/graph.hpp"
#include "gmerge/graph_util.hpp"
#include "gmerge/merge_rules.hpp"
#include "gmerge/op_schema.hpp"
#include "gmerge/validate.hpp"
#include "gmerge/weights.hpp"

namespace gmerge
{
    inline constexpr const char* kGlueProvenance = "glue";

    inline std::string packed_input_name(const std::string& input, std::size_t model)
    {
        return input + "#" + std::to_string(model);
    }

    struct ReshapeGlue
    {
        enum class Direction
        {
            BatchToChannel,
            ChannelToBatch,
        };

        Direction direction;
        TensorSpec from;
        TensorSpec to;
        // source edge the glue sits on
        std::string producer;
        std::string consumer;
        std::vector<std::string> nodes;
    };

    inline const char* to_string(ReshapeGlue::Direction d)
    {
        return d == ReshapeGlue::Direction::BatchToChannel ? "Batch->Channel" : "Channel->Batch";
    }

    /// One row per source node, in visit order.
    struct MergeRecord
    {
        std::string source_id;
        OpKind source_kind;
        std::string merged_id;
        OpKind merged_kind;
        MergeDim dim;
        std::size_t glue_inserted = 0;
    };

    struct MergeStats
    {
        std::size_t node_visits = 0;
        std::size_t edge_inspections = 0;
        std::size_t source_nodes = 0;
        std::size_t source_edges = 0;
        std::size_t source_weight_bytes = 0;
        std::size_t merged_weight_bytes = 0;
    };

    struct MergedGraph
    {
        Graph graph;
        // merged node id -> source node id, or "glue" for inserted nodes
        std::map<std::string, std::string> provenance;
        int models = 0;
        std::map<std::string, MergeDim> input_plan;
        // one entry per source graph output
        std::vector<MergeDim> output_plan;
        std::vector<MergeRecord> records;
        std::vector<ReshapeGlue> glue;
        MergeStats stats;
        // number of per-model heads appended unmerged (backbone merges only)
        int heads = 0;

        std::size_t glue_node_count() const
        {
            std::size_t n = 0;
            for (const auto& g : glue)
                n += g.nodes.size();
            return n;
        }

        std::size_t boundary_node_count() const
        {
            std::size_t n = 0;
            for (const auto& [id, src] : provenance)
            {
                if (src == kGlueProvenance &&
                    (id.rfind("pack::", 0) == 0 || id.rfind("unpack::", 0) == 0))
                    ++n;
            }
            return n;
        }

        MergeDim dim_of(const std::string& source_id) const
        {
            for (const auto& r : records)
            {
                if (r.source_id == source_id)
                    return r.dim;
            }
            throw Error(ErrorCode::InvalidGraph, "no merge record for '" + source_id + "'");
        }
    };

    namespace detail
    {
        inline nlohmann::json merge_info_to_json(const MergedGraph& mg)
        {
            using nlohmann::json;
            json records = json::array();
            for (const auto& r : mg.records)
            {
                records.push_back({{"source", r.source_id},
                                   {"source_kind", to_string(r.source_kind)},
                                   {"merged", r.merged_id},
                                   {"merged_kind", to_string(r.merged_kind)},
                                   {"dim", to_string(r.dim)},
                                   {"glue", r.glue_inserted}});
            }
            json glue = json::array();
            for (const auto& g : mg.glue)
            {
                glue.push_back({{"direction", to_string(g.direction)},
                                {"from", g.from.dims},
                                {"to", g.to.dims},
                                {"producer", g.producer},
                                {"consumer", g.consumer},
                                {"nodes", g.nodes}});
            }
            json inputs = json::object();
            for (const auto& [name, d] : mg.input_plan)
                inputs[name] = to_string(d);
            json outputs = json::array();
            for (auto d : mg.output_plan)
                outputs.push_back(to_string(d));
            return json{{"records", records},
                        {"glue", glue},
                        {"input_plan", inputs},
                        {"output_plan", outputs},
                        {"node_visits", mg.stats.node_visits},
                        {"edge_inspections", mg.stats.edge_inspections},
                        {"source_nodes", mg.stats.source_nodes},
                        {"source_edges", mg.stats.source_edges},
                        {"source_weight_bytes", mg.stats.source_weight_bytes},
                        {"merged_weight_bytes", mg.stats.merged_weight_bytes},
                        {"heads", mg.heads}};
        }

        inline void embed_metadata(MergedGraph& mg)
        {
            auto& md = mg.graph.metadata;
            md[kMergedModelsKey] = std::to_string(mg.models);
            md["merge.provenance"] = nlohmann::json(mg.provenance).dump();
            md["merge.info"] = merge_info_to_json(mg).dump();
        }
    }

    /// Rebuilds the merge bookkeeping from a merged graph's metadata, e.g.
    /// after loading it from disk.
    inline MergedGraph merged_from_graph(Graph graph)
    {
        using nlohmann::json;
        if (!is_merged_graph(graph) || !graph.metadata.count("merge.info"))
        {
            throw Error(ErrorCode::InvalidGraph, "graph carries no merge metadata");
        }
        MergedGraph mg;
        try
        {
            mg.models = std::stoi(graph.metadata.at(kMergedModelsKey));
            mg.provenance = json::parse(graph.metadata.at("merge.provenance"))
                                .get<std::map<std::string, std::string>>();
            auto info = json::parse(graph.metadata.at("merge.info"));
            for (const auto& r : info.at("records"))
            {
                mg.records.push_back({r.at("source").get<std::string>(),
                                      parse_op_kind(r.at("source_kind").get<std::string>()),
                                      r.at("merged").get<std::string>(),
                                      parse_op_kind(r.at("merged_kind").get<std::string>()),
                                      parse_merge_dim(r.at("dim").get<std::string>()),
                                      r.at("glue").get<std::size_t>()});
            }
            for (const auto& g : info.at("glue"))
            {
                ReshapeGlue rg;
                rg.direction = g.at("direction").get<std::string>() == "Batch->Channel"
                                   ? ReshapeGlue::Direction::BatchToChannel
                                   : ReshapeGlue::Direction::ChannelToBatch;
                rg.from.dims = g.at("from").get<Shape>();
                rg.to.dims = g.at("to").get<Shape>();
                rg.producer = g.at("producer").get<std::string>();
                rg.consumer = g.at("consumer").get<std::string>();
                rg.nodes = g.at("nodes").get<std::vector<std::string>>();
                mg.glue.push_back(std::move(rg));
            }
            for (const auto& [name, d] : info.at("input_plan").items())
                mg.input_plan[name] = parse_merge_dim(d.get<std::string>());
            for (const auto& d : info.at("output_plan"))
                mg.output_plan.push_back(parse_merge_dim(d.get<std::string>()));
            mg.stats.node_visits = info.at("node_visits").get<std::size_t>();
            mg.stats.edge_inspections = info.at("edge_inspections").get<std::size_t>();
            mg.stats.source_nodes = info.at("source_nodes").get<std::size_t>();
            mg.stats.source_edges = info.at("source_edges").get<std::size_t>();
            mg.stats.source_weight_bytes = info.at("source_weight_bytes").get<std::size_t>();
            mg.stats.merged_weight_bytes = info.at("merged_weight_bytes").get<std::size_t>();
            mg.heads = info.value("heads", 0);
        }
        catch (const json::exception& e)
        {
            throw Error(ErrorCode::Parse, std::string("bad merge metadata: ") + e.what());
        }
        catch (const std::logic_error& e)
        {
            throw Error(ErrorCode::Parse, std::string("bad merge metadata: ") + e.what());
        }
        mg.graph = std::move(graph);
        return mg;
    }

    /// Checks that M stores describe the same architecture for `graph`.
    inline void check_architecture(const Graph& graph, std::span<const WeightStore> stores)
    {
        if (stores.empty())
        {
            throw Error(ErrorCode::ArchitectureMismatch, "need at least one weight store");
        }
        for (std::size_t m = 1; m < stores.size(); ++m)
        {
            for (const auto& [name, t] : stores[0].tensors)
            {
                auto it = stores[m].tensors.find(name);
                if (it == stores[m].tensors.end())
                    throw Error(ErrorCode::ArchitectureMismatch,
                                "weight '" + name + "' present in model 0 but missing in model " + std::to_string(m));
                if (!it->second.spec().same_shape(t.spec()))
                    throw Error(ErrorCode::ArchitectureMismatch,
                                "weight '" + name + "' is " + t.spec().str() + " in model 0 but " +
                                    it->second.spec().str() + " in model " + std::to_string(m));
            }
            for (const auto& [name, t] : stores[m].tensors)
            {
                if (!stores[0].tensors.count(name))
                    throw Error(ErrorCode::ArchitectureMismatch,
                                "weight '" + name + "' present in model " + std::to_string(m) +
                                    " but missing in model 0");
            }
        }
        for (const auto& n : graph.nodes)
        {
            if (n.weights.empty())
                continue;
            std::vector<TensorSpec> in;
            for (const auto& r : n.inputs)
                in.push_back(*graph.spec_of(r));
            auto expected = expected_weight_specs(n, in);
            for (std::size_t i = 0; i < n.weights.size(); ++i)
            {
                auto it = stores[0].tensors.find(n.weights[i]);
                if (it == stores[0].tensors.end())
                    throw Error(ErrorCode::ArchitectureMismatch,
                                "weight '" + n.weights[i] + "' missing from the weight stores", n.id);
                if (!it->second.spec().same_shape(expected[i]))
                    throw Error(ErrorCode::ArchitectureMismatch,
                                "weight '" + n.weights[i] + "' is " + it->second.spec().str() +
                                    " but the graph needs " + expected[i].str(),
                                n.id);
            }
        }
    }

    namespace detail
    {
        class MergeBuilder
        {
        public:
            MergeBuilder(const Graph& source, std::span<const WeightStore> stores)
                : m_src(source)
                , m_stores(stores)
                , m_models(static_cast<std::int64_t>(stores.size()))
            {
                for (const auto& n : m_src.nodes)
                    m_node.emplace(n.id, &n);
            }

            std::pair<MergedGraph, MergedWeights> run()
            {
                auto& st = m_out.stats;
                TraversalStats ts;
                m_order = topological_order(m_src, &ts);
                st.edge_inspections = ts.edge_inspections;
                for (std::size_t i = 0; i < m_order.size(); ++i)
                    m_position.emplace(m_order[i], i);
                st.source_nodes = m_src.nodes.size();
                st.source_edges = m_src.edge_count();

                m_out.models = static_cast<int>(m_models);
                m_weights.models = static_cast<int>(m_models);
                m_out.graph.metadata = m_src.metadata;
                m_out.graph.metadata["name"] = m_src.metadata.count("name")
                                                    ? m_src.metadata.at("name") + "+merged"
                                                    : "merged";

                for (const auto& id : m_order)
                {
                    visit(*m_node.at(id));
                }
                for (const auto& out : m_src.outputs)
                {
                    emit_output(out);
                }

                for (const auto& store : m_stores)
                {
                    for (const auto& [name, t] : store.tensors)
                    {
                        if (m_used_weights.count(name))
                            st.source_weight_bytes += t.spec().byte_size();
                    }
                }
                for (const auto& [name, t] : m_weights.tensors)
                    st.merged_weight_bytes += t.spec().byte_size();

                embed_metadata(m_out);
                require_valid(m_out.graph);
                return {std::move(m_out), std::move(m_weights)};
            }

        private:
            struct Placed
            {
                EdgeRef ref;
                // per-model spec of the source tensor
                TensorSpec spec;
                MergeDim dim;
            };

            static MergeDim other(MergeDim d)
            {
                return d == MergeDim::Batch ? MergeDim::Channel : MergeDim::Batch;
            }

            static Layout layout_of(MergeDim d)
            {
                return d == MergeDim::Batch ? Layout::BatchMajor : Layout::ChannelMajor;
            }

            /// Packed extents of a per-model shape.
            Shape packed_dims(const Shape& per_model, MergeDim d) const
            {
                Shape s = per_model;
                if (d == MergeDim::Batch)
                {
                    s.insert(s.begin(), m_models);
                }
                else
                {
                    s[channel_axis(s.size())] *= m_models;
                }
                return s;
            }

            OpNode& add_node(OpNode n, const std::string& provenance)
            {
                std::vector<TensorSpec> in;
                for (const auto& r : n.inputs)
                    in.push_back(*m_out.graph.spec_of(r));
                auto layout = n.output.layout;
                try
                {
                    n.output = infer_output(n, in);
                }
                catch (const Error& e)
                {
                    throw e.at_node(n.id);
                }
                n.output.layout = layout;
                m_out.provenance[n.id] = provenance;
                m_out.graph.nodes.push_back(std::move(n));
                return m_out.graph.nodes.back();
            }

            /// Packs graph input `name` at `d` on first use.
            const Placed& place_input(const std::string& name, MergeDim d)
            {
                if (auto it = m_placed.find(name); it != m_placed.end())
                    return it->second;
                const auto& spec = m_src.find_input(name)->spec;
                OpNode pack;
                pack.id = "pack::" + name;
                pack.kind = OpKind::Pack;
                const bool stack = d == MergeDim::Batch;
                pack.attrs.set("axis", stack ? std::int64_t{0} : static_cast<std::int64_t>(channel_axis(spec.rank())))
                    .set("count", m_models)
                    .set("stack", std::int64_t{stack ? 1 : 0});
                for (std::int64_t m = 0; m < m_models; ++m)
                {
                    auto per_model = packed_input_name(name, static_cast<std::size_t>(m));
                    m_out.graph.inputs.push_back({per_model, TensorSpec{spec.dtype, spec.dims, Layout::Unlaid}});
                    pack.inputs.push_back(ref(per_model));
                }
                pack.output.layout = layout_of(d);
                add_node(std::move(pack), kGlueProvenance);
                m_out.input_plan[name] = d;
                return m_placed.emplace(name, Placed{ref("pack::" + name), spec, d}).first->second;
            }

            /// Splices Transpose + Reshape onto an edge whose ends disagree.
            EdgeRef insert_glue(const Placed& p, MergeDim to, const std::string& producer,
                                const std::string& consumer)
            {
                const auto n = m_glue_counter++;
                const auto r = static_cast<std::int64_t>(p.spec.rank());
                const auto c = static_cast<std::int64_t>(channel_axis(p.spec.rank()));
                const auto& d = p.spec.dims;

                OpNode tr;
                tr.id = "transpose::" + std::to_string(n);
                tr.kind = OpKind::Transpose;
                OpNode rs;
                rs.id = "reshape::" + std::to_string(n);
                rs.kind = OpKind::Reshape;

                ReshapeGlue glue;
                glue.producer = producer;
                glue.consumer = consumer;
                glue.from = TensorSpec{p.spec.dtype, packed_dims(d, p.dim), layout_of(p.dim)};
                glue.to = TensorSpec{p.spec.dtype, packed_dims(d, to), layout_of(to)};

                EdgeRef result;
                if (p.dim == MergeDim::Batch)
                {
                    // (M, d0..) -> (d0..d[c-1], M, d[c]..) -> merge M into d[c]
                    glue.direction = ReshapeGlue::Direction::BatchToChannel;
                    std::vector<std::int64_t> perm;
                    for (std::int64_t i = 1; i <= c; ++i)
                        perm.push_back(i);
                    perm.push_back(0);
                    for (std::int64_t i = c + 1; i <= r; ++i)
                        perm.push_back(i);
                    std::vector<std::int64_t> shape(d.begin(), d.end());
                    shape[static_cast<std::size_t>(c)] = -1;
                    if (c > 0)
                        shape[0] = 0;
                    tr.attrs.set("perm", perm);
                    tr.inputs = {p.ref};
                    rs.attrs.set("shape", shape);
                    rs.inputs = {ref(tr.id)};
                    rs.output.layout = layout_of(to);
                    glue.nodes = {tr.id, rs.id};
                    add_node(std::move(tr), kGlueProvenance);
                    result = ref(rs.id);
                    add_node(std::move(rs), kGlueProvenance);
                }
                else
                {
                    // (.., M*d[c], ..) -> (.., M, d[c], ..) -> model axis to the front
                    glue.direction = ReshapeGlue::Direction::ChannelToBatch;
                    std::vector<std::int64_t> shape;
                    for (std::int64_t i = 0; i < r; ++i)
                    {
                        if (i == c)
                            shape.push_back(m_models);
                        shape.push_back(d[static_cast<std::size_t>(i)]);
                    }
                    if (c > 0)
                        shape[0] = 0;
                    std::vector<std::int64_t> perm{c};
                    for (std::int64_t i = 0; i <= r; ++i)
                    {
                        if (i != c)
                            perm.push_back(i);
                    }
                    rs.attrs.set("shape", shape);
                    rs.inputs = {p.ref};
                    tr.attrs.set("perm", perm);
                    tr.inputs = {ref(rs.id)};
                    tr.output.layout = layout_of(to);
                    glue.nodes = {rs.id, tr.id};
                    add_node(std::move(rs), kGlueProvenance);
                    result = ref(tr.id);
                    add_node(std::move(tr), kGlueProvenance);
                }
                m_out.glue.push_back(std::move(glue));
                return result;
            }

            /// Dim of the earliest (in visit order) descendant whose rule fixes one.
            MergeDim lookahead(const OpNode& start)
            {
                if (m_children.empty())
                {
                    for (const auto& n : m_src.nodes)
                    {
                        for (const auto& r : n.inputs)
                        {
                            ++m_out.stats.edge_inspections;
                            m_children[r.node].push_back(n.id);
                        }
                    }
                }
                std::optional<std::size_t> best;
                MergeDim best_dim = MergeDim::Batch;
                std::set<std::string> seen;
                std::vector<std::string> stack{start.id};
                while (!stack.empty())
                {
                    auto id = stack.back();
                    stack.pop_back();
                    for (const auto& child : m_children[id])
                    {
                        ++m_out.stats.edge_inspections;
                        if (!seen.insert(child).second)
                            continue;
                        const auto& rule = rule_for(m_node.at(child)->kind);
                        if (rule.required != MergeDim::DontCare)
                        {
                            auto pos = m_position.at(child);
                            if (!best || pos < *best)
                            {
                                best = pos;
                                best_dim = rule.required;
                            }
                            continue;
                        }
                        stack.push_back(child);
                    }
                }
                return best_dim;
            }

            void visit(const OpNode& node)
            {
                auto& st = m_out.stats;
                ++st.node_visits;
                const auto& rule = rule_for(node.kind);
                const auto rank = m_src.spec_of(node.inputs.front())->rank();

                // known dims of the parents, one inspection per in-edge
                std::size_t batch_votes = 0;
                std::size_t channel_votes = 0;
                for (const auto& r : node.inputs)
                {
                    ++st.edge_inspections;
                    if (auto it = m_placed.find(r.node); it != m_placed.end())
                    {
                        (it->second.dim == MergeDim::Batch ? batch_votes : channel_votes) += 1;
                    }
                }

                MergeDim dim = rule.required;
                if (dim == MergeDim::DontCare)
                {
                    if (batch_votes + channel_votes > 0)
                        dim = batch_votes > channel_votes ? MergeDim::Batch : MergeDim::Channel;
                    else
                        dim = lookahead(node);
                    if (is_forbidden(node, rank, dim))
                        dim = other(dim);
                }
                if (is_forbidden(node, rank, dim))
                {
                    throw Error(ErrorCode::UnsatisfiableDim,
                                std::string(to_string(node.kind)) + " cannot be packed along " +
                                    to_string(dim),
                                node.id);
                }

                OpNode merged;
                merged.id = "merged::" + node.id;
                merged.kind = rule.target;
                merged.attrs = merged_attrs(node, m_models, dim);
                merged.weights = node.weights;
                merged.output.layout = layout_of(dim);

                std::size_t glue_here = 0;
                for (const auto& r : node.inputs)
                {
                    const Placed& p = m_node.count(r.node) ? m_placed.at(r.node) : place_input(r.node, dim);
                    if (p.dim != dim)
                    {
                        merged.inputs.push_back(insert_glue(p, dim, r.node, node.id));
                        ++glue_here;
                    }
                    else
                    {
                        merged.inputs.push_back(p.ref);
                    }
                }

                if (!node.weights.empty())
                {
                    for (auto& [name, t] : merge_weights(rule, node, m_stores))
                        m_weights.tensors.emplace(name, std::move(t));
                    m_used_weights.insert(node.weights.begin(), node.weights.end());
                }

                m_out.records.push_back({node.id, node.kind, merged.id, merged.kind, dim, glue_here});
                m_placed.emplace(node.id, Placed{ref(merged.id), node.output, dim});
                add_node(std::move(merged), node.id);
            }

            void emit_output(const EdgeRef& out)
            {
                const Placed& p = m_node.count(out.node) ? m_placed.at(out.node)
                                                         : place_input(out.node, MergeDim::Batch);
                const bool stack = p.dim == MergeDim::Batch;
                for (std::int64_t m = 0; m < m_models; ++m)
                {
                    OpNode u;
                    u.id = "unpack::" + out.node + "::" + std::to_string(m);
                    u.kind = OpKind::Unpack;
                    u.attrs.set("axis", stack ? std::int64_t{0} : static_cast<std::int64_t>(channel_axis(p.spec.rank())))
                        .set("count", m_models)
                        .set("index", m)
                        .set("stack", std::int64_t{stack ? 1 : 0});
                    u.inputs = {p.ref};
                    m_out.graph.outputs.push_back(ref(u.id));
                    add_node(std::move(u), kGlueProvenance);
                }
                m_out.output_plan.push_back(p.dim);
            }

            const Graph& m_src;
            std::span<const WeightStore> m_stores;
            std::int64_t m_models;
            std::unordered_map<std::string, const OpNode*> m_node;
            std::vector<std::string> m_order;
            std::unordered_map<std::string, std::size_t> m_position;
            std::unordered_map<std::string, std::vector<std::string>> m_children;
            std::unordered_map<std::string, Placed> m_placed;
            std::set<std::string> m_used_weights;
            std::size_t m_glue_counter = 0;
            MergedGraph m_out;
            MergedWeights m_weights;
        };
    }

    /// Merges M instances of `graph` (one weight store each) into one graph.
    /// Unpack output m of the result equals running model m alone.
    inline std::pair<MergedGraph, MergedWeights> merge(const Graph& graph,
                                                       std::span<const WeightStore> stores)
    {
        require_valid(graph);
        check_architecture(graph, stores);
        return detail::MergeBuilder(graph, stores).run();
    }

    /// A per-model head: its graph inputs are named after the backbone nodes
    /// whose (per-model) outputs it consumes.
    struct HeadModel
    {
        Graph graph;
        WeightStore weights;
    };

    /// The subgraph of `graph` made of `backbone` nodes, with outputs `outputs`.
    inline Graph backbone_subgraph(const Graph& graph, const std::set<std::string>& backbone,
                                   const std::vector<std::string>& outputs)
    {
        if (backbone.empty())
        {
            throw Error(ErrorCode::Backbone, "backbone is empty");
        }
        Graph sub;
        sub.metadata = graph.metadata;
        std::set<std::string> used_inputs;
        for (const auto& id : backbone)
        {
            if (!graph.find(id))
                throw Error(ErrorCode::Backbone, "backbone node not in graph", id);
        }
        for (const auto& n : graph.nodes)
        {
            if (!backbone.count(n.id))
                continue;
            for (const auto& r : n.inputs)
            {
                if (graph.find_input(r.node))
                    used_inputs.insert(r.node);
                else if (!backbone.count(r.node))
                    throw Error(ErrorCode::Backbone,
                                "backbone is not prefix-closed: parent '" + r.node + "' is outside it", n.id);
            }
            sub.nodes.push_back(n);
        }
        for (const auto& in : graph.inputs)
        {
            if (used_inputs.count(in.name))
                sub.inputs.push_back(in);
        }
        for (const auto& o : outputs)
        {
            if (!backbone.count(o))
                throw Error(ErrorCode::Backbone, "head consumes '" + o + "', which is not a backbone node");
            sub.outputs.push_back(ref(o));
        }
        return sub;
    }

    /// Backbone node ids consumed by the heads, in first-use order.
    inline std::vector<std::string> backbone_outputs(std::span<const HeadModel> heads)
    {
        std::vector<std::string> outs;
        for (const auto& h : heads)
        {
            for (const auto& in : h.graph.inputs)
            {
                if (std::find(outs.begin(), outs.end(), in.name) == outs.end())
                    outs.push_back(in.name);
            }
        }
        return outs;
    }

    /// Merges the shared backbone of M models and appends each model's own
    /// head, unmerged, to that model's slice of the backbone output.
    inline std::pair<MergedGraph, MergedWeights>
        merge_backbone(const Graph& graph, const std::set<std::string>& backbone,
                       std::span<const WeightStore> stores, std::span<const HeadModel> heads)
    {
        require_valid(graph);
        if (heads.size() != stores.size())
        {
            throw Error(ErrorCode::Backbone, "need one head per model: " + std::to_string(stores.size()) +
                                                 " stores, " + std::to_string(heads.size()) + " heads");
        }
        auto outs = backbone_outputs(heads);
        auto sub = backbone_subgraph(graph, backbone, outs);
        for (std::size_t m = 0; m < heads.size(); ++m)
        {
            require_valid(heads[m].graph);
            for (const auto& in : heads[m].graph.inputs)
            {
                const auto* bn = sub.find(in.name);
                if (!bn || !bn->output.same_shape(in.spec))
                    throw Error(ErrorCode::Backbone, "head " + std::to_string(m) + " input '" + in.name +
                                                         "' does not match a backbone output spec");
            }
        }

        // stores may also hold head weights; only backbone weights are merged
        std::vector<WeightStore> backbone_stores;
        for (const auto& s : stores)
        {
            WeightStore b{s.model_index, {}};
            for (const auto& n : sub.nodes)
                for (const auto& w : n.weights)
                    b.tensors.emplace(w, s.at(w));
            backbone_stores.push_back(std::move(b));
        }
        auto [mg, mw] = merge(sub, backbone_stores);

        mg.graph.outputs.clear();
        for (std::size_t m = 0; m < heads.size(); ++m)
        {
            const auto prefix = "head" + std::to_string(m) + "::";
            auto rename = [&](const EdgeRef& r) {
                if (heads[m].graph.find_input(r.node))
                    return ref("unpack::" + r.node + "::" + std::to_string(m));
                return ref(prefix + r.node);
            };
            for (const auto& n : heads[m].graph.nodes)
            {
                OpNode h = n;
                h.id = prefix + n.id;
                for (auto& r : h.inputs)
                    r = rename(r);
                for (auto& w : h.weights)
                {
                    mw.tensors.emplace(prefix + w, heads[m].weights.at(w));
                    w = prefix + w;
                }
                mg.provenance[h.id] = "head" + std::to_string(m) + ":" + n.id;
                mg.graph.nodes.push_back(std::move(h));
            }
            for (const auto& o : heads[m].graph.outputs)
                mg.graph.outputs.push_back(rename(o));
        }
        mg.heads = static_cast<int>(heads.size());

        // unpack slices no head reads are dead
        auto pruned = prune_dead(mg.graph);
        for (const auto& n : mg.graph.nodes)
        {
            if (!pruned.find(n.id))
                mg.provenance.erase(n.id);
        }
        mg.graph = std::move(pruned);
        mg.stats.merged_weight_bytes = 0;
        for (const auto& [name, t] : mw.tensors)
            mg.stats.merged_weight_bytes += t.spec().byte_size();
        detail::embed_metadata(mg);
        require_valid(mg.graph);
        return {std::move(mg), std::move(mw)};
    }

    /// Per-node merge report with summary counts.
    inline std::string explain(const MergedGraph& mg)
    {
        std::ostringstream os;
        if (mg.models == 1)
            os << "M=1 (degenerate)\n";
        os << "merged " << mg.models << " models\n";
        os << std::left << std::setw(20) << "source" << std::setw(14) << "source op" << std::setw(14)
           << "merged op" << std::setw(10) << "dim"
           << "glue\n";
        for (const auto& r : mg.records)
        {
            os << std::setw(20) << r.source_id << std::setw(14) << to_string(r.source_kind) << std::setw(14)
               << to_string(r.merged_kind) << std::setw(10) << to_string(r.dim) << r.glue_inserted << "\n";
        }
        for (const auto& g : mg.glue)
        {
            os << "glue " << to_string(g.direction) << " on " << g.producer << " -> " << g.consumer << ": "
               << to_string(g.from.dims) << " -> " << to_string(g.to.dims) << "\n";
        }
        os << "ops before: " << mg.stats.source_nodes << " per model, " << mg.stats.source_nodes * mg.models
           << " total\n";
        os << "ops after: " << mg.graph.nodes.size() << "\n";
        os << "glue insertions: " << mg.glue.size() << " (" << mg.glue_node_count() << " nodes)\n";
        os << "pack/unpack nodes: " << mg.boundary_node_count() << "\n";
        os << "weight bytes before: " << mg.stats.source_weight_bytes << "\n";
        os << "weight bytes after: " << mg.stats.merged_weight_bytes << "\n";
        os << "node visits: " << mg.stats.node_visits << ", edge inspections: " << mg.stats.edge_inspections
           << "\n";
        return os.str();
    }
}
