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

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <condition_variable>
#include <cstdint>
#include <functional>
#include <mutex>
#include <numeric>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "gmerge/executor.hpp"
#include "gmerge/graph_util.hpp"
#include "gmerge/merger.hpp"
#include "gmerge/verify.hpp"
#include "gmerge/zoo.hpp"

namespace gmerge
{
    enum class Strategy
    {
        Sequential,
        Threaded,
        Merged,
    };

    inline const char* to_string(Strategy s)
    {
        switch (s)
        {
        case Strategy::Sequential: return "sequential";
        case Strategy::Threaded: return "threaded";
        case Strategy::Merged: return "merged";
        }
        return "?";
    }

    inline Strategy parse_strategy(const std::string& s)
    {
        if (s == "sequential")
            return Strategy::Sequential;
        if (s == "threaded")
            return Strategy::Threaded;
        if (s == "merged")
            return Strategy::Merged;
        throw Error(ErrorCode::Parse, "unknown strategy '" + s + "' (sequential, threaded, merged)");
    }

    struct BenchReport
    {
        Strategy strategy = Strategy::Sequential;
        std::string model;
        int models = 1;
        std::int64_t batch = 1;
        int repeats = 1;
        std::vector<std::int64_t> runs_ns;
        double mean_ns = 0;
        double std_ns = 0;
        std::int64_t min_ns = 0;
        std::int64_t max_ns = 0;
        std::size_t invocations_per_round = 0;
        // weights plus peak live activations of the round
        std::size_t peak_bytes = 0;
        std::int64_t merge_latency_ns = 0;
        int threads = 1;

        nlohmann::json to_json() const
        {
            nlohmann::json j{{"schema", 1},
                             {"strategy", to_string(strategy)},
                             {"model", model},
                             {"M", models},
                             {"B", batch},
                             {"repeats", repeats},
                             {"runs_ns", runs_ns},
                             {"mean_ns", mean_ns},
                             {"std_ns", std_ns},
                             {"min_ns", min_ns},
                             {"max_ns", max_ns},
                             {"op_invocations_per_round", invocations_per_round},
                             {"peak_bytes", peak_bytes},
                             {"threads", threads}};
            if (strategy == Strategy::Merged)
                j["merge_latency_ns"] = merge_latency_ns;
            return j;
        }
    };

    /// Fixed set of workers that run one batch of jobs per round and join.
    class RoundPool
    {
    public:
        explicit RoundPool(std::size_t workers)
        {
            for (std::size_t i = 0; i < workers; ++i)
                m_threads.emplace_back([this] { loop(); });
        }

        RoundPool(const RoundPool&) = delete;
        RoundPool& operator=(const RoundPool&) = delete;

        ~RoundPool()
        {
            {
                std::lock_guard lock(m_mutex);
                m_stop = true;
            }
            m_wake.notify_all();
            for (auto& t : m_threads)
                t.join();
        }

        std::size_t size() const { return m_threads.size(); }

        /// Runs jobs(0..count-1) across the workers and waits for all of them.
        void run(std::size_t count, const std::function<void(std::size_t)>& job)
        {
            {
                std::lock_guard lock(m_mutex);
                m_job = &job;
                m_count = count;
                m_next = 0;
                m_done = 0;
                m_error = nullptr;
                ++m_round;
            }
            m_wake.notify_all();
            std::unique_lock lock(m_mutex);
            m_finished.wait(lock, [&] { return m_done == m_count; });
            m_job = nullptr;
            if (m_error)
                std::rethrow_exception(m_error);
        }

    private:
        void loop()
        {
            std::uint64_t seen = 0;
            std::unique_lock lock(m_mutex);
            for (;;)
            {
                m_wake.wait(lock, [&] { return m_stop || m_round != seen; });
                if (m_stop)
                    return;
                seen = m_round;
                while (m_job && m_next < m_count)
                {
                    auto i = m_next++;
                    const auto* job = m_job;
                    lock.unlock();
                    std::exception_ptr err;
                    try
                    {
                        (*job)(i);
                    }
                    catch (...)
                    {
                        err = std::current_exception();
                    }
                    lock.lock();
                    if (err && !m_error)
                        m_error = err;
                    if (++m_done == m_count)
                        m_finished.notify_all();
                }
            }
        }

        std::vector<std::thread> m_threads;
        std::mutex m_mutex;
        std::condition_variable m_wake;
        std::condition_variable m_finished;
        const std::function<void(std::size_t)>* m_job = nullptr;
        std::size_t m_count = 0;
        std::size_t m_next = 0;
        std::size_t m_done = 0;
        std::uint64_t m_round = 0;
        bool m_stop = false;
        std::exception_ptr m_error;
    };

    struct BenchConfig
    {
        Strategy strategy = Strategy::Sequential;
        int models = 1;
        std::int64_t batch = 1;
        int repeats = 10;
        std::uint64_t seed = 0;
        // untimed rounds before measuring
        int warmup = 1;
    };

    namespace detail
    {
        inline void summarize(BenchReport& r)
        {
            const auto n = static_cast<double>(r.runs_ns.size());
            double sum = 0;
            for (auto v : r.runs_ns)
                sum += static_cast<double>(v);
            r.mean_ns = sum / n;
            double sq = 0;
            for (auto v : r.runs_ns)
                sq += (static_cast<double>(v) - r.mean_ns) * (static_cast<double>(v) - r.mean_ns);
            r.std_ns = std::sqrt(sq / n);
            auto [lo, hi] = std::minmax_element(r.runs_ns.begin(), r.runs_ns.end());
            r.min_ns = *lo;
            r.max_ns = *hi;
        }

        template <typename Round>
        void time_rounds(BenchReport& r, const BenchConfig& cfg, Round&& round)
        {
            for (int i = 0; i < cfg.warmup; ++i)
                round();
            for (int i = 0; i < cfg.repeats; ++i)
            {
                auto start = std::chrono::steady_clock::now();
                round();
                auto stop = std::chrono::steady_clock::now();
                r.runs_ns.push_back(std::chrono::duration_cast<std::chrono::nanoseconds>(stop - start).count());
            }
            summarize(r);
        }
    }

    /// Times one inference round of M models of `graph` under a strategy.
    /// Weights and inputs are seeded, so invocation counts are reproducible.
    inline BenchReport run_bench(const Graph& graph, const BenchConfig& cfg)
    {
        if (cfg.repeats < 1)
            throw Error(ErrorCode::Parse, "repeats must be >= 1");
        if (cfg.models < 1)
            throw Error(ErrorCode::Parse, "number of models must be >= 1");
        auto g = with_batch(graph, cfg.batch);
        auto stores = zoo::random_stores(g, cfg.seed, cfg.models);
        std::vector<TensorMap> inputs;
        for (int m = 0; m < cfg.models; ++m)
            inputs.push_back(zoo::random_inputs(g, cfg.seed, m));

        BenchReport r;
        r.strategy = cfg.strategy;
        r.model = g.metadata.count("name") ? g.metadata.at("name") : "graph";
        r.models = cfg.models;
        r.batch = cfg.batch;
        r.repeats = cfg.repeats;
        const ExecOptions lean{false};

        if (cfg.strategy == Strategy::Merged)
        {
            auto start = std::chrono::steady_clock::now();
            auto [mg, mw] = merge(g, stores);
            auto stop = std::chrono::steady_clock::now();
            r.merge_latency_ns = std::chrono::duration_cast<std::chrono::nanoseconds>(stop - start).count();
            auto packed = detail::packed_inputs(g, inputs);
            Executor exec(mg.graph, mw.tensors);
            auto probe = exec.run(packed, lean);
            r.invocations_per_round = probe.trace.invocations;
            r.peak_bytes = mw.byte_size() + probe.trace.peak_live_bytes;
            detail::time_rounds(r, cfg, [&] { exec.run(packed, lean); });
            return r;
        }

        std::vector<Executor> execs;
        std::size_t weight_bytes = 0;
        std::size_t per_model_peak = 0;
        for (int m = 0; m < cfg.models; ++m)
        {
            execs.emplace_back(g, stores[static_cast<std::size_t>(m)].tensors);
            weight_bytes += stores[static_cast<std::size_t>(m)].byte_size();
            auto probe = execs.back().run(inputs[static_cast<std::size_t>(m)], lean);
            r.invocations_per_round += probe.trace.invocations;
            per_model_peak = std::max(per_model_peak, probe.trace.peak_live_bytes);
        }

        if (cfg.strategy == Strategy::Sequential)
        {
            r.peak_bytes = weight_bytes + per_model_peak;
            detail::time_rounds(r, cfg, [&] {
                for (std::size_t m = 0; m < execs.size(); ++m)
                    execs[m].run(inputs[m], lean);
            });
            return r;
        }

        const auto hw = std::max(1u, std::thread::hardware_concurrency());
        RoundPool pool(std::min<std::size_t>(static_cast<std::size_t>(cfg.models), hw));
        r.threads = static_cast<int>(pool.size());
        r.peak_bytes = weight_bytes + per_model_peak * pool.size();
        std::function<void(std::size_t)> job = [&](std::size_t m) { execs[m].run(inputs[m], lean); };
        detail::time_rounds(r, cfg, [&] { pool.run(execs.size(), job); });
        return r;
    }
}
