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

// Merges two feed-forward networks with different weights, runs the merged
// graph once and checks each unpacked output against the model run alone.

#include <iostream>

#include "gmerge/executor.hpp"
#include "gmerge/merger.hpp"
#include "gmerge/serialize.hpp"
#include "gmerge/verify.hpp"
#include "gmerge/zoo.hpp"

int main()
{
    using namespace gmerge;
    try
    {
        auto graph = zoo::make("ffnn", DType::F32, 4);
        auto stores = zoo::random_stores(graph, 7, 2);

        auto [merged, weights] = merge(graph, stores);
        std::cout << explain(merged) << "\n";

        TensorMap packed;
        std::vector<TensorMap> per_model;
        for (int m = 0; m < 2; ++m)
        {
            per_model.push_back(zoo::random_inputs(graph, 11, m));
            packed.emplace(packed_input_name("x", m), per_model.back().at("x"));
        }
        auto out = execute(merged.graph, weights.tensors, packed).outputs;
        for (int m = 0; m < 2; ++m)
        {
            auto alone = execute(graph, stores[m], per_model[m]).outputs.front();
            std::cout << "model " << m << ": " << (alone.bit_equal(out[m]) ? "bit-identical" : "DIFFERENT") << "\n";
        }
        std::cout << "\nmerged graph:\n" << serialize(merged.graph) << "\n";
    }
    catch (const Error& e)
    {
        std::cerr << e.what() << "\n";
        return 1;
    }
    return 0;
}
