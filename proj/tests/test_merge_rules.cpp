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

#include <set>

#include "gmerge/executor.hpp"
#include "gmerge/merge_rules.hpp"
#include "test_util.hpp"

using namespace gmerge;
namespace k = gmerge::kernels;

namespace
{
    OpNode weighted(OpKind kind, Attrs attrs)
    {
        OpNode n;
        n.id = "op";
        n.kind = kind;
        n.attrs = std::move(attrs);
        n.inputs = {ref("x")};
        const auto& slots = op_schema(kind).weight_slots;
        for (const auto& s : slots)
            n.weights.push_back(std::string("op.") + s);
        return n;
    }

    Attrs conv(std::int64_t cout, std::int64_t k, std::int64_t groups = 0)
    {
        Attrs a;
        a.set("kernel", k).set("stride", std::int64_t{1}).set("padding", std::int64_t{k / 2}).set("out_channels", cout);
        if (groups > 0)
            a.set("groups", groups);
        return a;
    }

    TensorValue pack_at(const std::vector<TensorValue>& parts, MergeDim dim)
    {
        std::vector<const TensorValue*> p;
        for (const auto& t : parts)
            p.push_back(&t);
        if (dim == MergeDim::Batch)
            return k::pack(p, 0, true);
        return k::pack(p, static_cast<std::int64_t>(channel_axis(parts.front().rank())), false);
    }

    TensorValue slice_at(const TensorValue& t, std::int64_t models, std::int64_t m, MergeDim dim)
    {
        if (dim == MergeDim::Batch)
            return k::unpack(t, models, m, 0, true);
        return k::unpack(t, models, m, static_cast<std::int64_t>(channel_axis(t.rank())), false);
    }

    /// Runs the source op per model and the merged op once; true when every
    /// slice is bit-identical.
    bool locally_equivalent(const OpNode& node, const Shape& in_dims, std::int64_t models, DType dt,
                            test::Rng& rng)
    {
        const auto& rule = rule_for(node.kind);
        std::vector<TensorSpec> in{TensorSpec{dt, in_dims}};
        auto specs = expected_weight_specs(node, in);
        std::vector<TensorValue> xs;
        std::vector<WeightStore> stores;
        for (std::int64_t m = 0; m < models; ++m)
        {
            xs.push_back(rng.tensor(dt, in_dims));
            WeightStore s{static_cast<int>(m), {}};
            for (std::size_t i = 0; i < specs.size(); ++i)
            {
                const bool var = node.kind == OpKind::BatchNorm && i == 3;
                s.tensors.emplace(node.weights[i], rng.tensor(dt, specs[i].dims, var ? 0.5 : -0.5, var ? 1.5 : 0.5));
            }
            stores.push_back(std::move(s));
        }

        OpNode merged = node;
        merged.kind = rule.target;
        merged.attrs = merged_attrs(node, models, rule.required);
        auto mw = merge_weights(rule, node, stores);
        std::vector<const TensorValue*> w;
        for (const auto& name : node.weights)
            w.push_back(&mw.at(name));
        auto packed = pack_at(xs, rule.required);
        auto y = Executor::invoke(merged, {&packed}, w);

        for (std::int64_t m = 0; m < models; ++m)
        {
            std::vector<const TensorValue*> wm;
            for (const auto& name : node.weights)
                wm.push_back(&stores[static_cast<std::size_t>(m)].at(name));
            auto ref_out = Executor::invoke(node, {&xs[static_cast<std::size_t>(m)]}, wm);
            if (!slice_at(y, models, m, rule.required).bit_equal(ref_out))
                return false;
        }
        return true;
    }
}

TEST(Rules, EveryKindHasExactlyOneRule)
{
    std::set<OpKind> seen;
    for (auto kind : all_op_kinds)
    {
        const auto& r = rule_for(kind);
        EXPECT_EQ(r.source, kind);
        EXPECT_TRUE(seen.insert(kind).second);
        EXPECT_EQ(r.weight_recipe.size(), op_schema(kind).weight_slots.size()) << to_string(kind);
    }
    EXPECT_EQ(seen.size(), 19u);
}

TEST(Rules, Substitutions)
{
    EXPECT_EQ(rule_for(OpKind::Conv2D).target, OpKind::GroupedConv2D);
    EXPECT_EQ(rule_for(OpKind::Conv2D).required, MergeDim::Channel);
    EXPECT_EQ(rule_for(OpKind::MatMul).target, OpKind::BatchMatMul);
    EXPECT_EQ(rule_for(OpKind::MatMul).required, MergeDim::Batch);
    EXPECT_EQ(rule_for(OpKind::MatMul).weight_recipe.front(), WeightConcat::Stack);
    EXPECT_EQ(rule_for(OpKind::LayerNorm).target, OpKind::GroupNorm);
    EXPECT_EQ(rule_for(OpKind::LayerNorm).required, MergeDim::Channel);
    EXPECT_EQ(rule_for(OpKind::BatchNorm).target, OpKind::BatchNorm);
    EXPECT_EQ(rule_for(OpKind::BatchNorm).weight_recipe.size(), 4u);
    EXPECT_EQ(rule_for(OpKind::ReLU).target, OpKind::ReLU);
    EXPECT_EQ(rule_for(OpKind::ReLU).required, MergeDim::DontCare);
}

TEST(Rules, WeightedKindsHaveConcreteDims)
{
    for (auto kind : all_op_kinds)
    {
        const bool has_weights = !op_schema(kind).weight_slots.empty();
        EXPECT_EQ(rule_for(kind).required != MergeDim::DontCare, has_weights) << to_string(kind);
    }
}

TEST(Rules, GroupCountArithmetic)
{
    auto c = weighted(OpKind::Conv2D, conv(4, 3));
    EXPECT_EQ(merged_attrs(c, 2, MergeDim::Channel).get_int("groups"), 2);
    EXPECT_EQ(merged_attrs(c, 2, MergeDim::Channel).get_int("out_channels"), 8);
    auto g = weighted(OpKind::GroupedConv2D, conv(4, 3, 2));
    EXPECT_EQ(merged_attrs(g, 4, MergeDim::Channel).get_int("groups"), 8);
    Attrs gn;
    gn.set("eps", 1e-5).set("groups", std::int64_t{3});
    EXPECT_EQ(merged_attrs(weighted(OpKind::GroupNorm, gn), 5, MergeDim::Channel).get_int("groups"), 15);
    Attrs bmm;
    bmm.set("out_features", std::int64_t{3}).set("groups", std::int64_t{2});
    EXPECT_EQ(merged_attrs(weighted(OpKind::BatchMatMul, bmm), 3, MergeDim::Batch).get_int("groups"), 6);
}

TEST(Rules, BatchShiftsAxisAttributes)
{
    OpNode sm;
    sm.kind = OpKind::Softmax;
    sm.attrs.set("axis", std::int64_t{1});
    EXPECT_EQ(merged_attrs(sm, 4, MergeDim::Batch).get_int("axis"), 2);
    EXPECT_EQ(merged_attrs(sm, 4, MergeDim::Channel).get_int("axis"), 1);
    OpNode tr;
    tr.kind = OpKind::Transpose;
    tr.attrs.set("perm", std::vector<std::int64_t>{1, 0});
    EXPECT_EQ(merged_attrs(tr, 2, MergeDim::Batch).get_ints("perm"), (std::vector<std::int64_t>{0, 2, 1}));
}

TEST(Rules, ForbiddenAxes)
{
    OpNode sm;
    sm.kind = OpKind::Softmax;
    sm.attrs.set("axis", std::int64_t{2});
    EXPECT_TRUE(is_forbidden(sm, 3, MergeDim::Channel));
    EXPECT_FALSE(is_forbidden(sm, 3, MergeDim::Batch));
    sm.attrs.set("axis", std::int64_t{1});
    EXPECT_FALSE(is_forbidden(sm, 3, MergeDim::Channel));
    OpNode pool;
    pool.kind = OpKind::MaxPool2D;
    EXPECT_FALSE(is_forbidden(pool, 4, MergeDim::Channel));
    EXPECT_TRUE(is_forbidden(pool, 3, MergeDim::Channel));
    OpNode rs;
    rs.kind = OpKind::Reshape;
    EXPECT_TRUE(is_forbidden(rs, 2, MergeDim::Channel));
}

TEST(MergeWeights, SingleModelUnchanged)
{
    test::Rng rng(1);
    auto node = weighted(OpKind::Conv2D, conv(3, 3));
    WeightStore s{0, {{"op.weight", rng.tensor(DType::F32, {3, 2, 3, 3})}, {"op.bias", rng.tensor(DType::F32, {3})}}};
    std::vector<WeightStore> stores{s};
    auto w = merge_weights(rule_for(OpKind::Conv2D), node, stores);
    EXPECT_TRUE(w.at("op.weight").bit_equal(s.at("op.weight")));
    EXPECT_TRUE(w.at("op.bias").bit_equal(s.at("op.bias")));
}

TEST(MergeWeights, LayerNormGammasConcatenate)
{
    Attrs a;
    a.set("eps", 1e-5);
    auto node = weighted(OpKind::LayerNorm, a);
    std::vector<WeightStore> stores{
        {0, {{"op.gamma", TensorValue(Shape{2}, std::vector<double>{1, 2})}, {"op.beta", TensorValue(Shape{2}, std::vector<double>{0, 0})}}},
        {1, {{"op.gamma", TensorValue(Shape{2}, std::vector<double>{3, 4})}, {"op.beta", TensorValue(Shape{2}, std::vector<double>{0, 0})}}}};
    auto w = merge_weights(rule_for(OpKind::LayerNorm), node, stores);
    EXPECT_EQ(test::values<double>(w.at("op.gamma")), (std::vector<double>{1, 2, 3, 4}));
}

TEST(MergeWeights, MatMulStacksInModelOrder)
{
    test::Rng rng(2);
    Attrs a;
    a.set("out_features", std::int64_t{5});
    auto node = weighted(OpKind::MatMul, a);
    std::vector<WeightStore> stores;
    for (int m = 0; m < 3; ++m)
        stores.push_back({m, {{"op.weight", rng.tensor(DType::F64, {4, 5})}, {"op.bias", rng.tensor(DType::F64, {5})}}});
    auto w = merge_weights(rule_for(OpKind::MatMul), node, stores);
    ASSERT_EQ(w.at("op.weight").dims(), (Shape{3, 4, 5}));
    ASSERT_EQ(w.at("op.bias").dims(), (Shape{3, 5}));
    for (int m = 0; m < 3; ++m)
    {
        auto slice = k::unpack(w.at("op.weight"), 3, m, 0, true);
        EXPECT_TRUE(slice.bit_equal(stores[static_cast<std::size_t>(m)].at("op.weight")));
    }
}

TEST(MergeWeights, MismatchNamesWeightAndModel)
{
    test::Rng rng(3);
    Attrs a;
    a.set("out_features", std::int64_t{5});
    auto node = weighted(OpKind::MatMul, a);
    std::vector<WeightStore> stores{
        {0, {{"op.weight", rng.tensor(DType::F32, {4, 5})}, {"op.bias", rng.tensor(DType::F32, {5})}}},
        {1, {{"op.weight", rng.tensor(DType::F32, {4, 6})}, {"op.bias", rng.tensor(DType::F32, {5})}}}};
    try
    {
        merge_weights(rule_for(OpKind::MatMul), node, stores);
        FAIL();
    }
    catch (const Error& e)
    {
        EXPECT_EQ(e.code(), ErrorCode::ArchitectureMismatch);
        std::string what = e.what();
        EXPECT_NE(what.find("op.weight"), std::string::npos);
        EXPECT_NE(what.find("model 1"), std::string::npos);
    }
}

class LocalEquivalence : public ::testing::TestWithParam<std::int64_t>
{
};

TEST_P(LocalEquivalence, EveryWeightedKind)
{
    const auto models = GetParam();
    test::Rng rng(100 + static_cast<std::uint64_t>(models));
    for (auto dt : {DType::F32, DType::F64})
    {
        for (int trial = 0; trial < 5; ++trial)
        {
            auto n = rng.pick(1, 3), c = rng.pick(1, 6), h = rng.pick(4, 7);
            auto kk = rng.pick(std::vector<std::int64_t>{1, 3});
            EXPECT_TRUE(locally_equivalent(weighted(OpKind::Conv2D, conv(rng.pick(1, 5), kk)), {n, c, h, h}, models, dt, rng));
            auto g = rng.pick(1, 3);
            EXPECT_TRUE(locally_equivalent(weighted(OpKind::GroupedConv2D, conv(g * rng.pick(1, 2), 3, g)),
                                           {n, g * rng.pick(1, 2), h, h}, models, dt, rng));

            Attrs mm;
            mm.set("out_features", rng.pick(1, 6));
            EXPECT_TRUE(locally_equivalent(weighted(OpKind::MatMul, mm), {n, rng.pick(1, 4), c}, models, dt, rng));
            Attrs bmm;
            auto bg = rng.pick(1, 3);
            bmm.set("out_features", rng.pick(1, 4)).set("groups", bg);
            EXPECT_TRUE(locally_equivalent(weighted(OpKind::BatchMatMul, bmm), {bg * rng.pick(1, 2), c}, models, dt, rng));

            Attrs eps;
            eps.set("eps", 1e-5);
            EXPECT_TRUE(locally_equivalent(weighted(OpKind::LayerNorm, eps), {n, rng.pick(1, 3), c}, models, dt, rng));
            Attrs gn = eps;
            auto gg = rng.pick(1, 3);
            gn.set("groups", gg);
            EXPECT_TRUE(locally_equivalent(weighted(OpKind::GroupNorm, gn), {n, h, gg * rng.pick(1, 3)}, models, dt, rng));
            EXPECT_TRUE(locally_equivalent(weighted(OpKind::BatchNorm, eps), {n, c, h, h}, models, dt, rng));
        }
    }
}

INSTANTIATE_TEST_SUITE_P(Models, LocalEquivalence, ::testing::Values(1, 2, 3, 4, 8));

TEST(RulesDump, CoversTable)
{
    auto j = rules_to_json();
    EXPECT_EQ(j.at("schema"), 1);
    const auto& rules = j.at("rules");
    EXPECT_EQ(rules.size(), 19u);
    bool conv_row = false;
    bool ln_row = false;
    for (const auto& r : rules)
    {
        conv_row |= r.at("source") == "Conv2D" && r.at("target") == "GroupedConv2D";
        ln_row |= r.at("source") == "LayerNorm" && r.at("target") == "GroupNorm";
    }
    EXPECT_TRUE(conv_row);
    EXPECT_TRUE(ln_row);
}
