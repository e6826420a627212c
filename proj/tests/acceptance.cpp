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

// Acceptance runner. One line per criterion, exit status 1 if any fails.

#include <chrono>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>
#include <string>

#include "gmerge/bench.hpp"
#include "gmerge/executor.hpp"
#include "gmerge/graph_util.hpp"
#include "gmerge/merge_rules.hpp"
#include "gmerge/merger.hpp"
#include "gmerge/serialize.hpp"
#include "gmerge/verify.hpp"
#include "gmerge/zoo.hpp"
#include "test_util.hpp"

using namespace gmerge;
namespace k = gmerge::kernels;
using Clock = std::chrono::steady_clock;

namespace
{
    struct Outcome
    {
        bool pass = true;
        std::string detail;
    };

    double seconds_since(Clock::time_point t0)
    {
        return std::chrono::duration<double>(Clock::now() - t0).count();
    }

    template <typename T>
    bool slices_match_oracle(const TensorValue& y, const std::vector<TensorValue>& xs,
                             const std::vector<WeightStore>& stores, std::int64_t n, std::int64_t ci,
                             std::int64_t h, std::int64_t co, std::int64_t kk, std::int64_t s, std::int64_t p)
    {
        const auto models = static_cast<std::int64_t>(xs.size());
        for (std::int64_t m = 0; m < models; ++m)
        {
            const auto& st = stores[static_cast<std::size_t>(m)];
            auto bias = test::values<T>(st.at("conv.bias"));
            std::int64_t ho = 0, wo = 0;
            auto want = test::conv_oracle(test::values<T>(xs[static_cast<std::size_t>(m)]),
                                          test::values<T>(st.at("conv.weight")), &bias, n, ci, h, h, co, kk, s, p,
                                          ho, wo);
            if (!test::bit_same(test::channel_slice<T>(y, models, m), want))
                return false;
        }
        return true;
    }

    Outcome grouped_conv_equivalence()
    {
        test::Rng rng(20260101);
        const std::vector<std::int64_t> model_choices{1, 2, 3, 4, 8};
        int failures = 0;
        int configs = 0;
        std::string first;
        for (int trial = 0; trial < 200; ++trial)
        {
            const auto models = rng.pick(model_choices);
            const auto ci = rng.pick(1, 8), co = rng.pick(1, 8), kk = rng.pick(std::vector<std::int64_t>{1, 3});
            const auto h = rng.pick(4, 12), s = rng.pick(1, 2), p = rng.pick(0, 1), n = rng.pick(1, 2);
            const auto dt = trial % 2 == 0 ? DType::F32 : DType::F64;

            OpNode node;
            node.id = "conv";
            node.kind = OpKind::Conv2D;
            node.inputs = {ref("x")};
            node.weights = {"conv.weight", "conv.bias"};
            node.attrs.set("kernel", kk).set("stride", s).set("padding", p).set("out_channels", co);

            std::vector<TensorValue> xs;
            std::vector<WeightStore> stores;
            for (std::int64_t m = 0; m < models; ++m)
            {
                xs.push_back(rng.tensor(dt, {n, ci, h, h}));
                stores.push_back({static_cast<int>(m),
                                  {{"conv.weight", rng.tensor(dt, {co, ci, kk, kk}, -0.5, 0.5)},
                                   {"conv.bias", rng.tensor(dt, {co}, -0.5, 0.5)}}});
            }
            const auto& rule = rule_for(OpKind::Conv2D);
            OpNode merged = node;
            merged.kind = rule.target;
            merged.attrs = merged_attrs(node, models, rule.required);
            auto mw = merge_weights(rule, node, stores);
            std::vector<const TensorValue*> parts;
            for (const auto& x : xs)
                parts.push_back(&x);
            auto packed = k::pack(parts, 1, false);
            auto y = Executor::invoke(merged, {&packed}, {&mw.at("conv.weight"), &mw.at("conv.bias")});

            bool ok = false;
            dispatch_dtype(dt, [&]<typename T>() { ok = slices_match_oracle<T>(y, xs, stores, n, ci, h, co, kk, s, p); });
            ++configs;
            if (!ok)
            {
                ++failures;
                if (first.empty())
                {
                    std::ostringstream os;
                    os << "trial " << trial << " M=" << models << " Cin=" << ci << " Cout=" << co << " K=" << kk
                       << " H=" << h << " s=" << s << " p=" << p;
                    first = os.str();
                }
            }
        }
        std::ostringstream os;
        os << configs << " configurations, " << failures << " mismatching";
        if (!first.empty())
            os << " (first: " << first << ")";
        return {failures == 0, os.str()};
    }

    Outcome degeneracy()
    {
        test::Rng rng(77);
        int conv_bad = 0, norm_bad = 0, mm_bad = 0;
        for (int i = 0; i < 100; ++i)
        {
            const auto dt = i % 2 == 0 ? DType::F32 : DType::F64;
            const auto n = rng.pick(1, 3), c = rng.pick(1, 8), h = rng.pick(4, 10);
            const auto co = rng.pick(1, 8), kk = rng.pick(std::vector<std::int64_t>{1, 3});
            const auto s = rng.pick(1, 2), p = rng.pick(0, 1);
            auto x = rng.tensor(dt, {n, c, h, h});
            auto w = rng.tensor(dt, {co, c, kk, kk});
            auto b = rng.tensor(dt, {co});
            if (!k::grouped_conv2d(x, w, &b, s, p, 1).bit_equal(k::conv2d(x, w, &b, s, p)))
                ++conv_bad;
        }
        for (int i = 0; i < 100; ++i)
        {
            const auto dt = i % 2 == 0 ? DType::F32 : DType::F64;
            const auto n = rng.pick(1, 4), c = rng.pick(1, 32);
            Shape dims = i % 3 == 0 ? Shape{n, rng.pick(1, 5), c} : Shape{n, c};
            auto x = rng.tensor(dt, dims, -3, 3);
            auto g = rng.tensor(dt, {c});
            auto b = rng.tensor(dt, {c});
            if (!k::group_norm(x, g, b, 1, 1e-5).bit_equal(k::layer_norm(x, g, b, 1e-5)))
                ++norm_bad;
        }
        for (int i = 0; i < 100; ++i)
        {
            const auto dt = i % 2 == 0 ? DType::F32 : DType::F64;
            const auto rows = rng.pick(1, 6), din = rng.pick(1, 16), dout = rng.pick(1, 16);
            auto x = rng.tensor(dt, {rows, din});
            auto w = rng.tensor(dt, {din, dout});
            auto b = rng.tensor(dt, {dout});
            auto x3 = k::reshape(x, {1, rows, din});
            auto w3 = k::reshape(w, {1, din, dout});
            auto b2 = k::reshape(b, {1, dout});
            auto y = k::batch_matmul(x3, w3, &b2);
            if (!k::reshape(y, {rows, dout}).bit_equal(k::matmul(x, w, &b)))
                ++mm_bad;
        }
        std::ostringstream os;
        os << "mismatches: conv " << conv_bad << "/100, norm " << norm_bad << "/100, matmul " << mm_bad << "/100";
        return {conv_bad + norm_bad + mm_bad == 0, os.str()};
    }

    Outcome golden_structure()
    {
        auto g = zoo::make("ffnn");
        auto mg = merge(g, zoo::random_stores(g, 7, 2)).first;
        auto golden = load_graph(std::string(GMERGE_GOLDEN_DIR) + "/ffnn_m2_merged.json");
        std::string why;
        const bool iso = structurally_isomorphic(mg.graph, golden, &why);

        std::multiset<OpKind> kinds;
        for (const auto& n : mg.graph.nodes)
            kinds.insert(n.kind);
        const std::multiset<OpKind> want{OpKind::Pack,      OpKind::BatchMatMul, OpKind::Transpose, OpKind::Reshape,
                                         OpKind::GroupNorm, OpKind::ReLU,        OpKind::Unpack,    OpKind::Unpack};
        const auto* gn = mg.graph.find("merged::ln");
        const bool groups = gn && gn->kind == OpKind::GroupNorm && gn->attrs.get_int("groups") == 2;
        const bool glue = mg.glue.size() == 1 && mg.glue.front().direction == ReshapeGlue::Direction::BatchToChannel;
        std::ostringstream os;
        os << "isomorphic " << (iso ? "yes" : "no (" + why + ")") << ", kinds " << (kinds == want ? "exact" : "differ")
           << ", GroupNorm groups=2 " << (groups ? "yes" : "no") << ", one Batch->Channel glue "
           << (glue ? "yes" : "no") << " (Unpack appears once per model)";
        return {iso && kinds == want && groups && glue, os.str()};
    }

    Outcome equivalence_matrix()
    {
        const auto t0 = Clock::now();
        int cases = 0, failures = 0;
        double worst = 0;
        std::string first;
        for (const auto& name : zoo::names())
            for (int models : {1, 2, 4, 8, 16, 32})
                for (std::int64_t batch : {1, 4})
                    for (auto dt : {DType::F32, DType::F64})
                    {
                        auto g = zoo::make(name, dt);
                        auto stores = zoo::random_stores(g, 1000 + static_cast<std::uint64_t>(cases), models);
                        auto [mg, mw] = merge(g, stores);
                        auto r = verify_merge(g, stores, mg.graph, mw.tensors, batch, static_cast<std::uint64_t>(cases));
                        worst = std::max(worst, r.max_abs_error);
                        ++cases;
                        if (!r.passed() || r.max_abs_error != 0.0)
                        {
                            ++failures;
                            if (first.empty())
                                first = name + " M=" + std::to_string(models) + " B=" + std::to_string(batch) +
                                        " " + to_string(dt) + ": " + r.str();
                        }
                    }
        std::ostringstream os;
        os << cases << " cases, " << failures << " failing, max abs error " << worst << ", " << std::fixed
           << std::setprecision(1) << seconds_since(t0) << " s";
        if (!first.empty())
            os << " (first: " << first << ")";
        return {failures == 0 && cases == 72, os.str()};
    }

    Outcome group_arithmetic()
    {
        auto g = zoo::make("cnnblock");
        auto mg = merge(g, zoo::random_stores(g, 5, 4)).first;
        const auto before = g.find("conv2")->attrs.get_int("groups");
        const auto after = mg.graph.find("merged::conv2")->attrs.get_int("groups");
        std::ostringstream os;
        os << "conv2 groups " << before << " -> " << after << " at M=4";
        return {before == 2 && after == 8, os.str()};
    }

    Outcome dispatch_reduction()
    {
        bool pass = true;
        std::ostringstream os;
        for (const auto& name : zoo::names())
        {
            auto g = zoo::make(name);
            const auto single = execute(g, zoo::random_weights(g, 3, 0), zoo::random_inputs(g, 3, 0),
                                        ExecOptions{false})
                                    .trace.invocations;
            os << name << " (|V|=" << single << "):";
            for (int models : {2, 4, 8, 16, 32})
            {
                auto stores = zoo::random_stores(g, 3, models);
                auto [mg, mw] = merge(g, stores);
                std::vector<TensorMap> inputs;
                for (int m = 0; m < models; ++m)
                    inputs.push_back(zoo::random_inputs(g, 3, m));
                const auto merged = execute(mg.graph, mw.tensors, detail::packed_inputs(g, inputs), ExecOptions{false})
                                        .trace.invocations;
                const auto bound = single * static_cast<std::size_t>(models);
                const bool ok = merged < bound && merged == mg.graph.nodes.size();
                pass = pass && ok;
                os << " M=" << models << " " << merged << (merged < bound ? "<" : ">=") << bound
                   << (merged == mg.graph.nodes.size() ? "" : " (report disagrees)") << (ok ? "" : " FAIL") << ";";
            }
            os << " ";
        }
        return {pass, os.str()};
    }

    Outcome merge_latency()
    {
        auto g = zoo::make("cnnblock");
        auto stores = zoo::random_stores(g, 11, 32);
        const auto t0 = Clock::now();
        auto mg = merge(g, stores).first;
        const auto secs = seconds_since(t0);
        const bool visits = mg.stats.node_visits == g.nodes.size();
        const bool edges = mg.stats.edge_inspections <= 2 * g.edge_count();
        std::ostringstream os;
        os << std::fixed << std::setprecision(4) << "M=32 merge " << secs << " s, node visits "
           << mg.stats.node_visits << " (|V|=" << g.nodes.size() << "), edge inspections "
           << mg.stats.edge_inspections << " (2|E|=" << 2 * g.edge_count() << ")";
        return {secs < 1.0 && visits && edges, os.str()};
    }

    Outcome backbone()
    {
        auto g = zoo::make("ffnn", DType::F32, 4);
        auto stores = zoo::random_stores(g, 21, 2);
        std::set<std::string> set{"fc", "ln", "relu"};
        std::vector<HeadModel> heads{zoo::make_head(g, "relu", 10, 21, 0), zoo::make_head(g, "relu", 5, 21, 1)};
        auto [mg, mw] = merge_backbone(g, set, stores, heads);
        auto r = verify_backbone(g, set, stores, heads, mg.graph, mw.tensors, 4, 8);
        return {r.passed() && r.max_abs_error == 0.0, "heads 10/5: " + r.str()};
    }

    Outcome sequential_monotonic()
    {
        auto g = zoo::make("cnnblock");
        std::ostringstream os;
        os << std::fixed << std::setprecision(1);
        double prev = 0;
        bool pass = true;
        for (int models : {1, 2, 4, 8})
        {
            BenchConfig cfg;
            cfg.strategy = Strategy::Sequential;
            cfg.models = models;
            cfg.repeats = 50;
            auto seq = run_bench(g, cfg);
            cfg.strategy = Strategy::Merged;
            auto mrg = run_bench(g, cfg);
            pass = pass && seq.mean_ns >= prev;
            prev = seq.mean_ns;
            os << "M=" << models << " seq " << seq.mean_ns / 1e3 << " us (merged " << mrg.mean_ns / 1e3
               << " us, speedup " << std::setprecision(2) << seq.mean_ns / mrg.mean_ns << "x)"
               << std::setprecision(1) << "; ";
        }
        return {pass, os.str()};
    }
}

int main()
{
    const std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
        {"grouped-conv equivalence", grouped_conv_equivalence},
        {"degeneracy", degeneracy},
        {"ffnn M=2 golden structure", golden_structure},
        {"end-to-end equivalence matrix", equivalence_matrix},
        {"group-count arithmetic", group_arithmetic},
        {"dispatch-count reduction", dispatch_reduction},
        {"merge latency", merge_latency},
        {"backbone partial merge", backbone},
        {"sequential monotonicity", sequential_monotonic},
    };
    int failed = 0;
    for (std::size_t i = 0; i < criteria.size(); ++i)
    {
        Outcome o;
        const auto t0 = Clock::now();
        try
        {
            o = criteria[i].second();
        }
        catch (const std::exception& e)
        {
            o = {false, std::string("exception: ") + e.what()};
        }
        failed += o.pass ? 0 : 1;
        std::cout << (o.pass ? "PASS" : "FAIL") << " criterion " << i + 1 << " " << criteria[i].first << ": "
                  << o.detail << " [" << std::fixed << std::setprecision(2) << seconds_since(t0) << " s]"
                  << std::endl;
    }
    std::cout << (criteria.size() - static_cast<std::size_t>(failed)) << "/" << criteria.size() << " criteria passed"
              << std::endl;
    return failed == 0 ? 0 : 1;
}
