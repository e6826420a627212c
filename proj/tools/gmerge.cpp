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

// gmerge command line: zoo, merge, verify, bench, rules dump.
// Exit codes: 0 ok, 1 verification failed, 2 usage error, 3 other errors.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <set>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "gmerge/bench.hpp"
#include "gmerge/blob.hpp"
#include "gmerge/merger.hpp"
#include "gmerge/serialize.hpp"
#include "gmerge/verify.hpp"
#include "gmerge/zoo.hpp"

namespace fs = std::filesystem;
using namespace gmerge;

namespace
{
    constexpr int kExitVerifyFailed = 1;
    constexpr int kExitUsage = 2;
    constexpr int kExitError = 3;

    DType parse_dtype(const std::string& s) { return s == "f64" ? DType::F64 : DType::F32; }

    std::vector<WeightStore> load_stores(const std::vector<std::string>& dirs)
    {
        std::vector<WeightStore> stores;
        for (const auto& d : dirs)
            stores.push_back(load_weights(d));
        return stores;
    }

    std::set<std::string> read_backbone(const std::string& path)
    {
        std::ifstream f(path);
        if (!f)
            throw Error(ErrorCode::Io, "cannot open '" + path + "'");
        std::set<std::string> ids;
        for (std::string line; std::getline(f, line);)
        {
            auto b = line.find_first_not_of(" \t\r");
            if (b == std::string::npos || line[b] == '#')
                continue;
            auto e = line.find_last_not_of(" \t\r");
            ids.insert(line.substr(b, e - b + 1));
        }
        return ids;
    }

    fs::path head_graph_path(const fs::path& dir, std::size_t m) { return dir / ("head_" + std::to_string(m) + ".json"); }

    fs::path head_weights_path(const fs::path& dir, std::size_t m)
    {
        return dir / ("head_" + std::to_string(m) + "_weights");
    }

    std::vector<HeadModel> load_heads(const fs::path& dir, std::size_t models)
    {
        std::vector<HeadModel> heads;
        for (std::size_t m = 0; m < models; ++m)
            heads.push_back({load_graph(head_graph_path(dir, m)), load_weights(head_weights_path(dir, m))});
        return heads;
    }

    struct ZooArgs
    {
        std::string name;
        std::uint64_t seed = 0;
        std::string out;
        std::string weights_out;
        int models = 1;
        std::string dtype = "f32";
        std::int64_t batch = 1;
        std::string heads_out;
        std::vector<std::int64_t> head_widths;
    };

    int run_zoo(const ZooArgs& a)
    {
        auto g = zoo::make(a.name, parse_dtype(a.dtype), a.batch);
        save_graph(a.out, g);
        for (int m = 0; m < a.models; ++m)
            save_weights(fs::path(a.weights_out) / ("model_" + std::to_string(m)), zoo::random_weights(g, a.seed, m));
        if (!a.heads_out.empty())
        {
            if (static_cast<int>(a.head_widths.size()) != a.models)
                throw Error(ErrorCode::Parse, "--head-widths needs one width per model");
            fs::create_directories(a.heads_out);
            const auto from = g.outputs.front().node;
            for (int m = 0; m < a.models; ++m)
            {
                auto h = zoo::make_head(g, from, a.head_widths[static_cast<std::size_t>(m)], a.seed, m);
                save_graph(head_graph_path(a.heads_out, static_cast<std::size_t>(m)), h.graph);
                save_weights(head_weights_path(a.heads_out, static_cast<std::size_t>(m)), h.weights);
            }
            std::ofstream ids(fs::path(a.heads_out) / "backbone.txt");
            for (const auto& n : g.nodes)
                ids << n.id << "\n";
        }
        std::cout << "wrote " << a.out << " and " << a.models << " weight set(s) under " << a.weights_out << "\n";
        return 0;
    }

    struct MergeArgs
    {
        std::string model;
        std::vector<std::string> weights;
        std::string out;
        std::string merged_weights;
        std::string backbone;
        std::string heads;
    };

    int run_merge(const MergeArgs& a)
    {
        auto g = load_graph(a.model);
        auto stores = load_stores(a.weights);
        auto start = std::chrono::steady_clock::now();
        std::pair<MergedGraph, MergedWeights> result;
        if (!a.backbone.empty())
        {
            auto heads = load_heads(a.heads, stores.size());
            result = merge_backbone(g, read_backbone(a.backbone), stores, heads);
        }
        else
        {
            result = merge(g, stores);
        }
        auto stop = std::chrono::steady_clock::now();
        save_graph(a.out, result.first.graph);
        save_merged_weights(a.merged_weights, result.second);
        std::cout << explain(result.first);
        std::cout << "merge latency: " << std::chrono::duration_cast<std::chrono::nanoseconds>(stop - start).count()
                  << " ns\n";
        return 0;
    }

    struct VerifyArgs
    {
        std::string model;
        std::vector<std::string> weights;
        std::string merged;
        std::string merged_weights;
        std::int64_t batch = 1;
        std::uint64_t seed = 0;
        double tol = 0;
        std::string backbone;
        std::string heads;
    };

    int run_verify(const VerifyArgs& a)
    {
        auto g = load_graph(a.model);
        auto stores = load_stores(a.weights);
        auto merged = load_graph(a.merged);
        auto mw = load_merged_weights(a.merged_weights);
        VerifyReport report;
        if (!a.backbone.empty())
        {
            auto heads = load_heads(a.heads, stores.size());
            report = verify_backbone(g, read_backbone(a.backbone), stores, heads, merged, mw.tensors, a.batch, a.seed,
                                     a.tol);
        }
        else
        {
            report = verify_merge(g, stores, merged, mw.tensors, a.batch, a.seed, a.tol);
        }
        std::cout << report.str() << "\n";
        return report.passed() ? 0 : kExitVerifyFailed;
    }

    struct BenchArgs
    {
        std::string model;
        BenchConfig cfg;
        std::string strategy = "sequential";
        std::string report;
    };

    int run_bench_cmd(BenchArgs a)
    {
        a.cfg.strategy = parse_strategy(a.strategy);
        auto r = run_bench(load_graph(a.model), a.cfg);
        auto j = r.to_json();
        if (!a.report.empty())
            write_text_file(a.report, j.dump(2) + "\n");
        std::cout << to_string(r.strategy) << " M=" << r.models << " B=" << r.batch << " R=" << r.repeats
                  << ": mean " << r.mean_ns << " ns, std " << r.std_ns << " ns, " << r.invocations_per_round
                  << " op invocations per round\n";
        return 0;
    }
}

int main(int argc, char** argv)
{
    CLI::App app{"gmerge: merge same-architecture DNN graphs and check the result"};
    app.require_subcommand(1);

    ZooArgs za;
    auto* zoo_cmd = app.add_subcommand("zoo", "write a zoo model graph and seeded weights");
    zoo_cmd->add_option("--name", za.name, "ffnn, cnnblock or attnblock")
        ->required()
        ->check(CLI::IsMember({"ffnn", "cnnblock", "attnblock"}));
    zoo_cmd->add_option("--seed", za.seed, "weight seed");
    zoo_cmd->add_option("--out", za.out, "graph JSON path")->required();
    zoo_cmd->add_option("--weights-out", za.weights_out, "directory for model_<m>/ weight sets")->required();
    zoo_cmd->add_option("--num-models", za.models, "number of weight sets")->check(CLI::PositiveNumber);
    zoo_cmd->add_option("--dtype", za.dtype, "f32 or f64")->check(CLI::IsMember({"f32", "f64"}));
    zoo_cmd->add_option("--batch", za.batch, "batch size baked into the graph")->check(CLI::PositiveNumber);
    zoo_cmd->add_option("--heads-out", za.heads_out, "also write per-model heads and backbone.txt here");
    zoo_cmd->add_option("--head-widths", za.head_widths, "head output width per model")->delimiter(',');

    MergeArgs ma;
    auto* merge_cmd = app.add_subcommand("merge", "merge M instances of a graph");
    merge_cmd->add_option("--model", ma.model, "graph JSON")->required();
    merge_cmd->add_option("--weights", ma.weights, "one weight directory per model")->required()->expected(1, -1);
    merge_cmd->add_option("--out", ma.out, "merged graph JSON")->required();
    merge_cmd->add_option("--merged-weights", ma.merged_weights, "merged weight directory")->required();
    auto* mb = merge_cmd->add_option("--backbone", ma.backbone, "file listing backbone node ids");
    merge_cmd->add_option("--heads", ma.heads, "directory with head_<m>.json and head_<m>_weights/")->needs(mb);

    VerifyArgs va;
    auto* verify_cmd = app.add_subcommand("verify", "compare a merged graph against per-model runs");
    verify_cmd->add_option("--model", va.model, "graph JSON")->required();
    verify_cmd->add_option("--weights", va.weights, "one weight directory per model")->required()->expected(1, -1);
    verify_cmd->add_option("--merged", va.merged, "merged graph JSON")->required();
    verify_cmd->add_option("--merged-weights", va.merged_weights, "merged weight directory")->required();
    verify_cmd->add_option("--batch", va.batch, "batch size")->check(CLI::PositiveNumber);
    verify_cmd->add_option("--seed", va.seed, "input seed");
    verify_cmd->add_option("--tol", va.tol, "relative tolerance, 0 = bit-exact")->check(CLI::NonNegativeNumber);
    auto* vb = verify_cmd->add_option("--backbone", va.backbone, "file listing backbone node ids");
    verify_cmd->add_option("--heads", va.heads, "directory with head_<m>.json and head_<m>_weights/")->needs(vb);

    BenchArgs ba;
    auto* bench_cmd = app.add_subcommand("bench", "time sequential, threaded or merged execution");
    bench_cmd->add_option("--model", ba.model, "graph JSON")->required();
    bench_cmd->add_option("--num-models", ba.cfg.models, "M")->check(CLI::PositiveNumber);
    bench_cmd->add_option("--batch", ba.cfg.batch, "B")->check(CLI::PositiveNumber);
    bench_cmd->add_option("--repeats", ba.cfg.repeats, "timed rounds")->check(CLI::PositiveNumber);
    bench_cmd->add_option("--strategy", ba.strategy, "sequential, threaded or merged")
        ->check(CLI::IsMember({"sequential", "threaded", "merged"}));
    bench_cmd->add_option("--seed", ba.cfg.seed, "weight and input seed");
    bench_cmd->add_option("--warmup", ba.cfg.warmup, "untimed rounds")->check(CLI::NonNegativeNumber);
    bench_cmd->add_option("--report", ba.report, "report JSON path");

    auto* rules_cmd = app.add_subcommand("rules", "merge rule table");
    rules_cmd->require_subcommand(1);
    auto* dump_cmd = rules_cmd->add_subcommand("dump", "print the rule table as JSON");

    try
    {
        app.parse(argc, argv);
    }
    catch (const CLI::CallForHelp& e)
    {
        return app.exit(e);
    }
    catch (const CLI::CallForAllHelp& e)
    {
        return app.exit(e);
    }
    catch (const CLI::ParseError& e)
    {
        app.exit(e);
        return kExitUsage;
    }

    try
    {
        if (zoo_cmd->parsed())
            return run_zoo(za);
        if (merge_cmd->parsed())
            return run_merge(ma);
        if (verify_cmd->parsed())
            return run_verify(va);
        if (bench_cmd->parsed())
            return run_bench_cmd(ba);
        if (dump_cmd->parsed())
        {
            std::cout << rules_to_json().dump(2) << "\n";
            return 0;
        }
    }
    catch (const Error& e)
    {
        std::cerr << "error: " << e.what() << "\n";
        return kExitError;
    }
    catch (const std::exception& e)
    {
        std::cerr << "internal error: " << e.what() << "\n";
        return kExitError;
    }
    return kExitUsage;
}
