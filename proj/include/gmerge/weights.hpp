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
#include <string>

#include "gmerge/tensor.hpp"

namespace gmerge
{
    using WeightMap = std::map<std::string, TensorValue>;

    /// Named weights of one model instance.
    struct WeightStore
    {
        int model_index = 0;
        WeightMap tensors;

        const TensorValue& at(const std::string& name) const
        {
            auto it = tensors.find(name);
            if (it == tensors.end())
            {
                throw Error(ErrorCode::MissingWeight, "weight '" + name + "' not found in store of model " +
                                                          std::to_string(model_index));
            }
            return it->second;
        }

        std::size_t byte_size() const
        {
            std::size_t b = 0;
            for (const auto& [name, t] : tensors)
                b += t.spec().byte_size();
            return b;
        }
    };

    /// Weights of a merged graph, each the model-ordered concatenation of the
    /// per-model tensors it replaces.
    struct MergedWeights
    {
        int models = 0;
        WeightMap tensors;

        WeightStore as_store() const { return WeightStore{-1, tensors}; }

        std::size_t byte_size() const { return as_store().byte_size(); }
    };
}
