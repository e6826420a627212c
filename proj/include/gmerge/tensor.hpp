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
#include <cstdint>
#include <functional>
#include <numeric>
#include <span>
#include <sstream>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "gmerge/error.hpp"

namespace gmerge
{
    enum class DType : std::uint8_t
    {
        F32 = 0,
        F64 = 1,
    };

    /// Which axis carries per-model packing. Unmerged graphs use Unlaid only.
    enum class Layout : std::uint8_t
    {
        Unlaid,
        BatchMajor,
        ChannelMajor,
    };

    using Shape = std::vector<std::int64_t>;

    inline const char* to_string(DType t) { return t == DType::F32 ? "f32" : "f64"; }

    inline const char* to_string(Layout l)
    {
        switch (l)
        {
        case Layout::Unlaid: return "Unlaid";
        case Layout::BatchMajor: return "BatchMajor";
        case Layout::ChannelMajor: return "ChannelMajor";
        }
        return "?";
    }

    inline std::size_t dtype_size(DType t) { return t == DType::F32 ? 4 : 8; }

    template <typename T>
    constexpr DType dtype_of()
    {
        static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
        return std::is_same_v<T, float> ? DType::F32 : DType::F64;
    }

    inline std::int64_t shape_size(const Shape& dims)
    {
        return std::accumulate(
            dims.begin(), dims.end(), std::int64_t{1}, std::multiplies<std::int64_t>());
    }

    inline std::string to_string(const Shape& dims)
    {
        std::ostringstream os;
        os << "(";
        for (std::size_t i = 0; i < dims.size(); ++i)
        {
            os << (i ? ", " : "") << dims[i];
        }
        os << ")";
        return os.str();
    }

    struct TensorSpec
    {
        DType dtype = DType::F32;
        Shape dims;
        Layout layout = Layout::Unlaid;

        std::size_t rank() const { return dims.size(); }
        std::int64_t numel() const { return shape_size(dims); }
        std::size_t byte_size() const { return static_cast<std::size_t>(numel()) * dtype_size(dtype); }

        bool operator==(const TensorSpec&) const = default;

        /// Same dtype and extents, layout tag ignored.
        bool same_shape(const TensorSpec& other) const
        {
            return dtype == other.dtype && dims == other.dims;
        }

        std::string str() const
        {
            return std::string(to_string(dtype)) + to_string(dims);
        }
    };

    /// Invokes `fn.template operator()<T>()` with T matching `dtype`.
    template <typename Fn>
    decltype(auto) dispatch_dtype(DType dtype, Fn&& fn)
    {
        if (dtype == DType::F32)
        {
            return fn.template operator()<float>();
        }
        return fn.template operator()<double>();
    }

    /// Dense row-major tensor owning its storage.
    class TensorValue
    {
    public:
        TensorValue() = default;

        explicit TensorValue(TensorSpec spec)
            : m_spec(std::move(spec))
        {
            check_dims(m_spec.dims);
            const auto n = static_cast<std::size_t>(m_spec.numel());
            if (m_spec.dtype == DType::F32)
            {
                m_data = std::vector<float>(n, 0.0f);
            }
            else
            {
                m_data = std::vector<double>(n, 0.0);
            }
        }

        template <typename T>
        TensorValue(Shape dims, std::vector<T> values, Layout layout = Layout::Unlaid)
            : m_spec{dtype_of<T>(), std::move(dims), layout}
        {
            check_dims(m_spec.dims);
            if (static_cast<std::int64_t>(values.size()) != m_spec.numel())
            {
                throw Error(ErrorCode::Shape,
                            "data length " + std::to_string(values.size()) +
                                " does not match shape " + to_string(m_spec.dims));
            }
            m_data = std::move(values);
        }

        const TensorSpec& spec() const { return m_spec; }
        DType dtype() const { return m_spec.dtype; }
        const Shape& dims() const { return m_spec.dims; }
        std::size_t rank() const { return m_spec.rank(); }
        std::int64_t numel() const { return m_spec.numel(); }
        std::int64_t dim(std::size_t axis) const { return m_spec.dims.at(axis); }

        void set_layout(Layout layout) { m_spec.layout = layout; }

        /// Reinterprets the buffer with new extents of equal element count.
        void reshape_in_place(Shape dims)
        {
            if (shape_size(dims) != m_spec.numel())
            {
                throw Error(ErrorCode::Shape,
                            "cannot view " + to_string(m_spec.dims) + " as " + to_string(dims));
            }
            m_spec.dims = std::move(dims);
        }

        template <typename T>
        std::span<const T> data() const
        {
            check_type<T>();
            return std::get<std::vector<T>>(m_data);
        }

        template <typename T>
        std::span<T> data()
        {
            check_type<T>();
            return std::get<std::vector<T>>(m_data);
        }

        /// Raw little-endian bytes of the payload (host is little-endian).
        std::span<const std::byte> bytes() const
        {
            return std::visit(
                [](const auto& v) { return std::as_bytes(std::span(v)); }, m_data);
        }

        std::span<std::byte> mutable_bytes()
        {
            return std::visit(
                [](auto& v) { return std::as_writable_bytes(std::span(v)); }, m_data);
        }

        double at_as_double(std::int64_t flat) const
        {
            return std::visit(
                [flat](const auto& v) { return static_cast<double>(v[static_cast<std::size_t>(flat)]); },
                m_data);
        }

        /// Bitwise equality of spec (layout ignored) and payload.
        bool bit_equal(const TensorValue& other) const
        {
            if (!m_spec.same_shape(other.m_spec))
            {
                return false;
            }
            auto a = bytes();
            auto b = other.bytes();
            return std::equal(a.begin(), a.end(), b.begin(), b.end());
        }

    private:
        template <typename T>
        void check_type() const
        {
            if (dtype_of<T>() != m_spec.dtype)
            {
                throw Error(ErrorCode::Shape,
                            std::string("tensor holds ") + to_string(m_spec.dtype) +
                                ", requested " + to_string(dtype_of<T>()));
            }
        }

        static void check_dims(const Shape& dims)
        {
            if (dims.empty())
            {
                throw Error(ErrorCode::Shape, "tensor rank must be >= 1");
            }
            for (auto d : dims)
            {
                if (d < 1)
                {
                    throw Error(ErrorCode::Shape, "all extents must be >= 1, got " + to_string(dims));
                }
            }
        }

        TensorSpec m_spec;
        std::variant<std::vector<float>, std::vector<double>> m_data;
    };

    /// Channel axis for a per-model tensor of the given rank: (N, D) -> 1,
    /// (N, S, D) -> 2, (N, C, H, W) and higher -> 1.
    inline std::size_t channel_axis(std::size_t rank)
    {
        if (rank <= 1)
        {
            return 0;
        }
        return rank == 3 ? 2 : 1;
    }
}
