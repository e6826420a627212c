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

#include <stdexcept>
#include <string>
#include <string_view>

namespace gmerge
{
    enum class ErrorCode
    {
        Shape,
        GroupDivisibility,
        Domain,
        Parse,
        UnsupportedOp,
        ArchitectureMismatch,
        UnsatisfiableDim,
        Cycle,
        MissingInput,
        MissingWeight,
        InvalidGraph,
        Backbone,
        Io,
    };

    inline const char* to_string(ErrorCode code)
    {
        switch (code)
        {
        case ErrorCode::Shape: return "shape error";
        case ErrorCode::GroupDivisibility: return "group-divisibility error";
        case ErrorCode::Domain: return "domain error";
        case ErrorCode::Parse: return "parse error";
        case ErrorCode::UnsupportedOp: return "unsupported-op error";
        case ErrorCode::ArchitectureMismatch: return "architecture-mismatch error";
        case ErrorCode::UnsatisfiableDim: return "unsatisfiable merge-dim error";
        case ErrorCode::Cycle: return "cycle error";
        case ErrorCode::MissingInput: return "missing-input error";
        case ErrorCode::MissingWeight: return "missing-weight error";
        case ErrorCode::InvalidGraph: return "invalid-graph error";
        case ErrorCode::Backbone: return "backbone error";
        case ErrorCode::Io: return "io error";
        }
        return "error";
    }

    /// Every failure raised by the library. `node()` is set when the failure
    /// can be attributed to a graph node.
    class Error : public std::runtime_error
    {
    public:
        Error(ErrorCode code, const std::string& message, std::string node = {})
            : std::runtime_error(compose(code, message, node))
            , m_code(code)
            , m_node(std::move(node))
            , m_message(message)
        {
        }

        ErrorCode code() const { return m_code; }
        const std::string& node() const { return m_node; }
        const std::string& message() const { return m_message; }

        /// Returns a copy attributed to `node` unless already attributed.
        Error at_node(const std::string& node) const
        {
            if (!m_node.empty())
            {
                return *this;
            }
            return Error(m_code, m_message, node);
        }

    private:
        static std::string
            compose(ErrorCode code, const std::string& message, const std::string& node)
        {
            std::string out = to_string(code);
            if (!node.empty())
            {
                out += " at node '" + node + "'";
            }
            out += ": " + message;
            return out;
        }

        ErrorCode m_code;
        std::string m_node;
        std::string m_message;
    };
}
