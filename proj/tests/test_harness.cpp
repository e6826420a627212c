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

#include <gtest/gtest.h>

#include <atomic>
#include <filesystem>
#include <fstream>
#include <functional>
#include <set>

#include "gmerge/bench.hpp"
#include "gmerge/blob.hpp"
#include "gmerge/serialize.hpp"
#include "gmerge/verify.hpp"
#include "gmerge/zoo.hpp"

using namespace gmerge;
namespace fs = std::filesystem;

namespace
{
    fs::path scratch(const std::string& name)
    {
        auto p = fs::temp_directory_path() / ("gmerge_test_" + name);
        fs::remove_all(p);
        return p;
    }

    bool stores_equal(const WeightStore& a, const WeightStore& b)
    {
        if (a.tensors.size() != b.tensors.size())
            return false;
        for (const auto& [name, t] : a.tensors)
        {
            auto it = b.tensors.find(name);
            if (it == b.tensors.end() || !it->second.bit_equal(t))
                return false;
        }
        return true;
    }
}

TEST(Zoo, UnknownName)
{
    EXPECT_THROW(zoo::make("resnet"), Error);
}

TEST(Zoo, SeededWeightsAreRepeatable)
{
    auto g = zoo::make("attnblock");
    EXPECT_TRUE(stores_equal(zoo::random_weights(g, 7, 1), zoo::random_weights(g, 7, 1)));
    EXPECT_FALSE(stores_equal(zoo::random_weights(g, 7, 1), zoo::random_weights(g, 8, 1)));
    EXPECT_FALSE(stores_equal(zoo::random_weights(g, 7, 0), zoo::random_weights(g, 7, 1)));
}

TEST(Zoo, StoresShareNames)
{
    auto g = zoo::make("attnblock");
    auto stores = zoo::random_stores(g, 3, 4);
    ASSERT_EQ(stores.size(), 4u);
    for (const auto& s : stores)
    {
        ASSERT_EQ(s.tensors.size(), stores[0].tensors.size());
        for (const auto& [name, t] : s.tensors)
            EXPECT_TRUE(stores[0].tensors.count(name));
    }
}

TEST(Zoo, ValueRanges)
{
    auto g = zoo::make("cnnblock", DType::F64);
    auto w = zoo::random_weights(g, 1, 0);
    for (const auto& [name, t] : w.tensors)
    {
        const bool var = name.find("running_var") != std::string::npos;
        for (auto v : t.data<double>())
        {
            EXPECT_GE(v, var ? 0.5 : -0.5) << name;
            EXPECT_LT(v, var ? 1.5 : 0.5) << name;
        }
    }
    auto in = zoo::random_inputs(g, 1, 0);
    for (auto v : in.at("x").data<double>())
    {
        EXPECT_GE(v, -1.0);
        EXPECT_LT(v, 1.0);
    }
}

TEST(Zoo, FilesAreByteIdenticalOnRegeneration)
{
    auto dir = scratch("regen");
    for (const char* sub : {"a", "b"})
    {
        auto g = zoo::make("cnnblock");
        save_graph((dir / sub / "g.json").string(), g);
        save_weights(dir / sub / "w", zoo::random_weights(g, 9, 1));
    }
    auto slurp = [](const fs::path& p) {
        std::ifstream in(p, std::ios::binary);
        return std::string(std::istreambuf_iterator<char>(in), {});
    };
    std::size_t files = 0;
    for (const auto& e : fs::recursive_directory_iterator(dir / "a"))
    {
        if (!e.is_regular_file())
            continue;
        auto twin = dir / "b" / fs::relative(e.path(), dir / "a");
        ASSERT_TRUE(fs::exists(twin)) << twin;
        EXPECT_EQ(slurp(e.path()), slurp(twin)) << e.path();
        ++files;
    }
    EXPECT_GT(files, 2u);
}

TEST(WeightIo, RoundTrip)
{
    auto dir = scratch("weights");
    auto g = zoo::make("cnnblock", DType::F64);
    auto w = zoo::random_weights(g, 4, 2);
    save_weights(dir, w);
    auto back = load_weights(dir);
    EXPECT_EQ(back.model_index, 2);
    EXPECT_TRUE(stores_equal(w, back));
    EXPECT_TRUE(stores_equal(w, load_weights(dir / "manifest.json")));

    auto [mg, mw] = merge(g, zoo::random_stores(g, 4, 2));
    save_merged_weights(dir / "merged", mw);
    auto mback = load_merged_weights(dir / "merged");
    EXPECT_EQ(mback.models, 2);
    EXPECT_TRUE(stores_equal(mw.as_store(), mback.as_store()));
    EXPECT_THROW(load_weights(dir / "absent"), Error);
}

TEST(Verify, PassesAndReportsZeroError)
{
    auto g = zoo::make("ffnn");
    auto stores = zoo::random_stores(g, 7, 2);
    auto [mg, mw] = merge(g, stores);
    auto r = verify_merge(g, stores, mg.graph, mw.tensors, 1, 0);
    EXPECT_TRUE(r.passed());
    EXPECT_EQ(r.max_abs_error, 0.0);
    EXPECT_EQ(r.compared_elements, 2u * 16u);
}

TEST(Verify, CorruptedWeightFails)
{
    auto g = zoo::make("ffnn");
    auto stores = zoo::random_stores(g, 7, 2);
    auto [mg, mw] = merge(g, stores);
    mw.tensors.at("fc.weight").data<float>()[5] += 0.25f;
    auto r = verify_merge(g, stores, mg.graph, mw.tensors, 1, 0);
    EXPECT_FALSE(r.passed());
    ASSERT_TRUE(r.first_mismatch);
    EXPECT_EQ(r.first_mismatch->model, 0u);
    EXPECT_GT(r.max_abs_error, 0.0);
    EXPECT_NE(r.str().find("first mismatch"), std::string::npos);
}

TEST(Verify, ToleranceMode)
{
    auto g = zoo::make("ffnn");
    auto stores = zoo::random_stores(g, 7, 2);
    auto [mg, mw] = merge(g, stores);
    // one ulp on every affine parameter of the second model
    for (const char* name : {"ln.gamma", "ln.beta"})
    {
        auto d = mw.tensors.at(name).data<float>();
        for (std::size_t i = 16; i < d.size(); ++i)
            d[i] = std::nextafter(d[i], 2.0f);
    }
    EXPECT_FALSE(verify_merge(g, stores, mg.graph, mw.tensors, 1, 0).passed());
    EXPECT_TRUE(verify_merge(g, stores, mg.graph, mw.tensors, 1, 0, 1e-5).passed());
}

TEST(Pool, RunsEveryJobOncePerRound)
{
    RoundPool pool(3);
    std::vector<std::atomic<int>> hits(7);
    std::function<void(std::size_t)> job = [&](std::size_t i) { ++hits[i]; };
    for (int round = 0; round < 20; ++round)
        pool.run(hits.size(), job);
    for (auto& h : hits)
        EXPECT_EQ(h.load(), 20);
}

TEST(Pool, PropagatesErrors)
{
    RoundPool pool(2);
    std::function<void(std::size_t)> job = [](std::size_t i) {
        if (i == 1)
            throw Error(ErrorCode::Shape, "boom");
    };
    EXPECT_THROW(pool.run(4, job), Error);
    std::function<void(std::size_t)> ok = [](std::size_t) {};
    EXPECT_NO_THROW(pool.run(4, ok));
}

TEST(Bench, SingleRepeatHasZeroSpread)
{
    BenchConfig cfg;
    cfg.repeats = 1;
    auto r = run_bench(zoo::make("ffnn"), cfg);
    EXPECT_EQ(r.runs_ns.size(), 1u);
    EXPECT_EQ(r.std_ns, 0.0);
}

TEST(Bench, InvocationCounts)
{
    for (const auto& name : zoo::names())
    {
        auto g = zoo::make(name);
        for (int m : {2, 4})
        {
            BenchConfig cfg;
            cfg.models = m;
            cfg.repeats = 2;
            cfg.strategy = Strategy::Sequential;
            EXPECT_EQ(run_bench(g, cfg).invocations_per_round, g.nodes.size() * static_cast<std::size_t>(m));
            cfg.strategy = Strategy::Threaded;
            EXPECT_EQ(run_bench(g, cfg).invocations_per_round, g.nodes.size() * static_cast<std::size_t>(m));
            cfg.strategy = Strategy::Merged;
            auto mg = merge(g, zoo::random_stores(g, 0, m)).first;
            auto r = run_bench(g, cfg);
            EXPECT_EQ(r.invocations_per_round, mg.graph.nodes.size());
            EXPECT_GT(r.merge_latency_ns, 0);
        }
    }
}

TEST(Bench, ReportShape)
{
    BenchConfig cfg;
    cfg.models = 3;
    cfg.repeats = 5;
    cfg.strategy = Strategy::Threaded;
    auto r = run_bench(zoo::make("cnnblock"), cfg);
    EXPECT_GE(r.mean_ns, static_cast<double>(r.min_ns));
    EXPECT_LE(r.mean_ns, static_cast<double>(r.max_ns));
    EXPECT_GE(r.threads, 1);
    EXPECT_LE(r.threads, 3);
    auto j = r.to_json();
    EXPECT_EQ(j.at("schema"), 1);
    EXPECT_EQ(j.at("strategy"), "threaded");
    EXPECT_EQ(j.at("runs_ns").size(), 5u);
    EXPECT_FALSE(j.contains("merge_latency_ns"));
    EXPECT_GT(j.at("peak_bytes").get<std::size_t>(), 0u);
    cfg.repeats = 0;
    EXPECT_THROW(run_bench(zoo::make("cnnblock"), cfg), Error);
}
