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

// Graph <-> JSON document:
//   {"nodes":[{"id","kind","attrs","inputs","weights","output"}],
//    "graph_inputs":[{"name","spec"}], "graph_outputs":["node:0"], "metadata":{}}
// Weight tensors live out-of-band (see blob.hpp).

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <string_view>

#include <json.hpp>

#include "gmerge/graph.hpp"
#include "gmerge/validate.hpp"

namespace gmerge
{
    using json = nlohmann::json;

    inline json spec_to_json(const TensorSpec& s)
    {
        return json{{"dtype", to_string(s.dtype)}, {"dims", s.dims}, {"layout", to_string(s.layout)}};
    }

    namespace detail
    {
        inline void reject_unknown_keys(const json& obj, std::initializer_list<const char*> allowed,
                                        const std::string& where)
        {
            for (const auto& [key, value] : obj.items())
            {
                bool ok = false;
                for (const char* a : allowed)
                {
                    ok = ok || key == a;
                }
                if (!ok)
                {
                    throw Error(ErrorCode::Parse, "unknown key '" + key + "' in " + where);
                }
            }
        }

        inline const json& member(const json& obj, const char* key, const std::string& where)
        {
            if (!obj.is_object() || !obj.contains(key))
            {
                throw Error(ErrorCode::Parse, std::string("missing '") + key + "' in " + where);
            }
            return obj.at(key);
        }
    }

    inline TensorSpec spec_from_json(const json& j)
    {
        const std::string where = "tensor spec";
        detail::reject_unknown_keys(j, {"dtype", "dims", "layout"}, where);
        TensorSpec s;
        auto dtype = detail::member(j, "dtype", where).get<std::string>();
        if (dtype == "f32")
            s.dtype = DType::F32;
        else if (dtype == "f64")
            s.dtype = DType::F64;
        else
            throw Error(ErrorCode::Parse, "unknown dtype '" + dtype + "'");
        s.dims = detail::member(j, "dims", where).get<Shape>();
        auto layout = j.value("layout", std::string("Unlaid"));
        if (layout == "Unlaid")
            s.layout = Layout::Unlaid;
        else if (layout == "BatchMajor")
            s.layout = Layout::BatchMajor;
        else if (layout == "ChannelMajor")
            s.layout = Layout::ChannelMajor;
        else
            throw Error(ErrorCode::Parse, "unknown layout '" + layout + "'");
        return s;
    }

    inline json graph_to_json(const Graph& g)
    {
        json nodes = json::array();
        for (const auto& n : g.nodes)
        {
            json attrs = json::object();
            for (const auto& [name, value] : n.attrs.values)
            {
                std::visit([&](const auto& v) { attrs[name] = v; }, value);
            }
            json inputs = json::array();
            for (const auto& r : n.inputs)
            {
                inputs.push_back(r.str());
            }
            nodes.push_back(json{{"id", n.id},
                                 {"kind", to_string(n.kind)},
                                 {"attrs", attrs},
                                 {"inputs", inputs},
                                 {"weights", n.weights},
                                 {"output", spec_to_json(n.output)}});
        }
        json inputs = json::array();
        for (const auto& in : g.inputs)
        {
            inputs.push_back(json{{"name", in.name}, {"spec", spec_to_json(in.spec)}});
        }
        json outputs = json::array();
        for (const auto& r : g.outputs)
        {
            outputs.push_back(r.str());
        }
        return json{{"nodes", nodes},
                    {"graph_inputs", inputs},
                    {"graph_outputs", outputs},
                    {"metadata", g.metadata}};
    }

    inline Graph graph_from_json(const json& j)
    {
        if (!j.is_object())
        {
            throw Error(ErrorCode::Parse, "graph document must be a JSON object");
        }
        detail::reject_unknown_keys(j, {"nodes", "graph_inputs", "graph_outputs", "metadata"}, "graph");
        Graph g;
        for (const auto& jn : detail::member(j, "nodes", "graph"))
        {
            detail::reject_unknown_keys(jn, {"id", "kind", "attrs", "inputs", "weights", "output"},
                                        "node");
            OpNode n;
            n.id = detail::member(jn, "id", "node").get<std::string>();
            n.kind = parse_op_kind(detail::member(jn, "kind", "node '" + n.id + "'").get<std::string>());
            if (jn.contains("attrs"))
            {
                for (const auto& [name, v] : jn.at("attrs").items())
                {
                    if (v.is_number_integer())
                        n.attrs.set(name, v.get<std::int64_t>());
                    else if (v.is_number_float())
                        n.attrs.set(name, v.get<double>());
                    else if (v.is_array())
                        n.attrs.set(name, v.get<std::vector<std::int64_t>>());
                    else
                        throw Error(ErrorCode::Parse, "attribute '" + name + "' of node '" + n.id +
                                                          "' has unsupported type");
                }
            }
            for (const auto& r : jn.value("inputs", json::array()))
            {
                n.inputs.push_back(EdgeRef::parse(r.get<std::string>()));
            }
            n.weights = jn.value("weights", std::vector<std::string>{});
            n.output = spec_from_json(detail::member(jn, "output", "node '" + n.id + "'"));
            g.nodes.push_back(std::move(n));
        }
        for (const auto& ji : detail::member(j, "graph_inputs", "graph"))
        {
            detail::reject_unknown_keys(ji, {"name", "spec"}, "graph input");
            g.inputs.push_back(GraphInput{detail::member(ji, "name", "graph input").get<std::string>(),
                                          spec_from_json(detail::member(ji, "spec", "graph input"))});
        }
        for (const auto& r : detail::member(j, "graph_outputs", "graph"))
        {
            g.outputs.push_back(EdgeRef::parse(r.get<std::string>()));
        }
        if (j.contains("metadata"))
        {
            g.metadata = j.at("metadata").get<std::map<std::string, std::string>>();
        }
        return g;
    }

    /// Pretty-printed JSON text. Requires a valid graph.
    inline std::string serialize(const Graph& g)
    {
        require_valid(g);
        return graph_to_json(g).dump(2) + "\n";
    }

    /// Parses a graph document. Malformed JSON reports the byte offset.
    inline Graph deserialize(std::string_view text)
    {
        json j;
        try
        {
            j = json::parse(text.begin(), text.end());
        }
        catch (const json::parse_error& e)
        {
            throw Error(ErrorCode::Parse,
                        "malformed graph document at byte " + std::to_string(e.byte) + ": " + e.what());
        }
        try
        {
            return graph_from_json(j);
        }
        catch (const json::exception& e)
        {
            throw Error(ErrorCode::Parse, std::string("bad graph document: ") + e.what());
        }
    }

    inline std::string read_text_file(const std::string& path)
    {
        std::ifstream f(path, std::ios::binary);
        if (!f)
        {
            throw Error(ErrorCode::Io, "cannot open '" + path + "'");
        }
        std::ostringstream ss;
        ss << f.rdbuf();
        return ss.str();
    }

    inline void write_text_file(const std::string& path, const std::string& text)
    {
        const auto parent = std::filesystem::path(path).parent_path();
        std::error_code ec;
        if (!parent.empty())
        {
            std::filesystem::create_directories(parent, ec);
        }
        std::ofstream f(path, std::ios::binary | std::ios::trunc);
        if (!f || !(f << text))
        {
            throw Error(ErrorCode::Io, "cannot write '" + path + "'");
        }
    }

    inline Graph load_graph(const std::string& path) { return deserialize(read_text_file(path)); }

    inline void save_graph(const std::string& path, const Graph& g) { write_text_file(path, serialize(g)); }
}
