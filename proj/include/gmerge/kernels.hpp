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

// Reference CPU kernels. Every reduction has a fixed accumulation order so a
// merged op reproduces the per-model results bit for bit:
//  - convolutions: acc = 0; input channel outer, kernel row, kernel column
//    inner; taps that land in the zero padding are skipped; bias added last.
//  - matmuls: acc = 0; k ascending; bias added last.
//  - norms: mean and (population) variance summed in memory order over the
//    group; y = (x - mean) / sqrt(var + eps) * gamma + beta.
// No kernel reorders work across groups, and groups never share accumulators.

#include <cmath>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "gmerge/error.hpp"
#include "gmerge/tensor.hpp"

namespace gmerge
{
    namespace kernels
    {
        namespace detail
        {
            inline void shape_check(bool ok, const std::string& what, const Shape& a, const Shape& b)
            {
                if (!ok)
                {
                    throw Error(ErrorCode::Shape, what + ": " + to_string(a) + " vs " + to_string(b));
                }
            }

            inline void same_dtype(const TensorValue& a, const TensorValue& b)
            {
                if (a.dtype() != b.dtype())
                {
                    throw Error(ErrorCode::Shape, std::string("dtype mismatch: ") + to_string(a.dtype()) +
                                                      " vs " + to_string(b.dtype()));
                }
            }

            struct Span3
            {
                std::int64_t outer;
                std::int64_t axis;
                std::int64_t inner;
            };

            inline Span3 split_at(const Shape& dims, std::size_t axis)
            {
                Span3 s{1, dims[axis], 1};
                for (std::size_t i = 0; i < axis; ++i)
                    s.outer *= dims[i];
                for (std::size_t i = axis + 1; i < dims.size(); ++i)
                    s.inner *= dims[i];
                return s;
            }

            inline std::vector<std::int64_t> strides_of(const Shape& dims)
            {
                std::vector<std::int64_t> st(dims.size(), 1);
                for (std::size_t i = dims.size(); i-- > 1;)
                {
                    st[i - 1] = st[i] * dims[i];
                }
                return st;
            }

            struct ConvGeometry
            {
                std::int64_t n, cin_total, h, w, cout_total, cin_per_group, k, hout, wout;
            };

            inline ConvGeometry conv_geometry(const TensorValue& x, const TensorValue& w,
                                              const TensorValue* bias, std::int64_t stride,
                                              std::int64_t padding, std::int64_t groups)
            {
                same_dtype(x, w);
                shape_check(x.rank() == 4 && w.rank() == 4, "convolution expects (N,C,H,W) input and (Co,Ci,K,K) kernel",
                            x.dims(), w.dims());
                if (groups < 1 || x.dim(1) % groups != 0 || w.dim(0) % groups != 0)
                {
                    throw Error(ErrorCode::GroupDivisibility,
                                "groups " + std::to_string(groups) + " must divide input channels " +
                                    std::to_string(x.dim(1)) + " and output channels " +
                                    std::to_string(w.dim(0)));
                }
                shape_check(w.dim(1) * groups == x.dim(1) && w.dim(2) == w.dim(3),
                            "convolution channel mismatch", x.dims(), w.dims());
                if (stride < 1 || padding < 0)
                {
                    throw Error(ErrorCode::Shape, "stride must be >= 1 and padding >= 0");
                }
                ConvGeometry g{x.dim(0), x.dim(1), x.dim(2),  x.dim(3), w.dim(0),
                               w.dim(1), w.dim(2), 0,         0};
                shape_check(g.k <= g.h + 2 * padding && g.k <= g.w + 2 * padding,
                            "kernel exceeds padded input", x.dims(), w.dims());
                g.hout = (g.h + 2 * padding - g.k) / stride + 1;
                g.wout = (g.w + 2 * padding - g.k) / stride + 1;
                if (bias)
                {
                    same_dtype(x, *bias);
                    shape_check(bias->rank() == 1 && bias->dim(0) == g.cout_total,
                                "bias must have one entry per output channel", bias->dims(), w.dims());
                }
                return g;
            }
        }

        /// Direct 2-D cross-correlation, NCHW input, (Co, Ci, K, K) kernel.
        inline TensorValue conv2d(const TensorValue& x, const TensorValue& w, const TensorValue* bias,
                                  std::int64_t stride, std::int64_t padding)
        {
            const auto g = detail::conv_geometry(x, w, bias, stride, padding, 1);
            TensorValue y(TensorSpec{x.dtype(), {g.n, g.cout_total, g.hout, g.wout}});
            dispatch_dtype(x.dtype(), [&]<typename T>() {
                auto xs = x.data<T>();
                auto ws = w.data<T>();
                auto ys = y.data<T>();
                for (std::int64_t n = 0; n < g.n; ++n)
                    for (std::int64_t c = 0; c < g.cout_total; ++c)
                        for (std::int64_t oh = 0; oh < g.hout; ++oh)
                            for (std::int64_t ow = 0; ow < g.wout; ++ow)
                            {
                                T acc = T(0);
                                for (std::int64_t ci = 0; ci < g.cin_total; ++ci)
                                    for (std::int64_t kh = 0; kh < g.k; ++kh)
                                    {
                                        auto ih = oh * stride - padding + kh;
                                        if (ih < 0 || ih >= g.h)
                                            continue;
                                        for (std::int64_t kw = 0; kw < g.k; ++kw)
                                        {
                                            auto iw = ow * stride - padding + kw;
                                            if (iw < 0 || iw >= g.w)
                                                continue;
                                            acc += ws[((c * g.cin_total + ci) * g.k + kh) * g.k + kw] *
                                                   xs[((n * g.cin_total + ci) * g.h + ih) * g.w + iw];
                                        }
                                    }
                                if (bias)
                                    acc += bias->data<T>()[c];
                                ys[((n * g.cout_total + c) * g.hout + oh) * g.wout + ow] = acc;
                            }
            });
            return y;
        }

        /// Grouped convolution. Output channel c reads input channels
        /// [g, g + Ci) with g = Ci * floor(c / Co), Ci and Co per group.
        inline TensorValue grouped_conv2d(const TensorValue& x, const TensorValue& w,
                                          const TensorValue* bias, std::int64_t stride,
                                          std::int64_t padding, std::int64_t groups)
        {
            const auto g = detail::conv_geometry(x, w, bias, stride, padding, groups);
            const auto cout_per_group = g.cout_total / groups;
            TensorValue y(TensorSpec{x.dtype(), {g.n, g.cout_total, g.hout, g.wout}});
            dispatch_dtype(x.dtype(), [&]<typename T>() {
                auto xs = x.data<T>();
                auto ws = w.data<T>();
                auto ys = y.data<T>();
                for (std::int64_t n = 0; n < g.n; ++n)
                    for (std::int64_t c = 0; c < g.cout_total; ++c)
                    {
                        const auto first_in = g.cin_per_group * (c / cout_per_group);
                        for (std::int64_t oh = 0; oh < g.hout; ++oh)
                            for (std::int64_t ow = 0; ow < g.wout; ++ow)
                            {
                                T acc = T(0);
                                for (std::int64_t ci = 0; ci < g.cin_per_group; ++ci)
                                    for (std::int64_t kh = 0; kh < g.k; ++kh)
                                    {
                                        auto ih = oh * stride - padding + kh;
                                        if (ih < 0 || ih >= g.h)
                                            continue;
                                        for (std::int64_t kw = 0; kw < g.k; ++kw)
                                        {
                                            auto iw = ow * stride - padding + kw;
                                            if (iw < 0 || iw >= g.w)
                                                continue;
                                            acc += ws[((c * g.cin_per_group + ci) * g.k + kh) * g.k + kw] *
                                                   xs[((n * g.cin_total + first_in + ci) * g.h + ih) * g.w + iw];
                                        }
                                    }
                                if (bias)
                                    acc += bias->data<T>()[c];
                                ys[((n * g.cout_total + c) * g.hout + oh) * g.wout + ow] = acc;
                            }
                    }
            });
            return y;
        }

        /// x (..., Din) times w (Din, Dout); leading axes are treated as rows.
        inline TensorValue matmul(const TensorValue& x, const TensorValue& w, const TensorValue* bias)
        {
            detail::same_dtype(x, w);
            detail::shape_check(x.rank() >= 2 && w.rank() == 2 && x.dims().back() == w.dim(0),
                                "matmul inner extent mismatch", x.dims(), w.dims());
            const auto din = w.dim(0);
            const auto dout = w.dim(1);
            const auto rows = x.numel() / din;
            if (bias)
            {
                detail::shape_check(bias->rank() == 1 && bias->dim(0) == dout, "matmul bias",
                                    bias->dims(), w.dims());
            }
            Shape out = x.dims();
            out.back() = dout;
            TensorValue y(TensorSpec{x.dtype(), out});
            dispatch_dtype(x.dtype(), [&]<typename T>() {
                auto xs = x.data<T>();
                auto ws = w.data<T>();
                auto ys = y.data<T>();
                for (std::int64_t r = 0; r < rows; ++r)
                    for (std::int64_t j = 0; j < dout; ++j)
                    {
                        T acc = T(0);
                        for (std::int64_t k = 0; k < din; ++k)
                            acc += xs[r * din + k] * ws[k * dout + j];
                        if (bias)
                            acc += bias->data<T>()[j];
                        ys[r * dout + j] = acc;
                    }
            });
            return y;
        }

        /// w (G, Din, Dout): the rows of x split into G equal contiguous blocks
        /// and block g multiplies only w[g] (and adds bias[g] of a (G, Dout) bias).
        inline TensorValue batch_matmul(const TensorValue& x, const TensorValue& w,
                                        const TensorValue* bias)
        {
            detail::same_dtype(x, w);
            detail::shape_check(x.rank() >= 2 && w.rank() == 3 && x.dims().back() == w.dim(1),
                                "batch matmul inner extent mismatch", x.dims(), w.dims());
            const auto groups = w.dim(0);
            const auto din = w.dim(1);
            const auto dout = w.dim(2);
            const auto rows = x.numel() / din;
            if (rows % groups != 0)
            {
                throw Error(ErrorCode::GroupDivisibility,
                            "batch count " + std::to_string(groups) + " must divide " +
                                std::to_string(rows) + " input rows");
            }
            if (bias)
            {
                detail::shape_check(bias->rank() == 2 && bias->dim(0) == groups && bias->dim(1) == dout,
                                    "batch matmul bias", bias->dims(), w.dims());
            }
            const auto rows_per_group = rows / groups;
            Shape out = x.dims();
            out.back() = dout;
            TensorValue y(TensorSpec{x.dtype(), out});
            dispatch_dtype(x.dtype(), [&]<typename T>() {
                auto xs = x.data<T>();
                auto ws = w.data<T>();
                auto ys = y.data<T>();
                for (std::int64_t g = 0; g < groups; ++g)
                {
                    const T* wg = ws.data() + g * din * dout;
                    for (std::int64_t r = g * rows_per_group; r < (g + 1) * rows_per_group; ++r)
                        for (std::int64_t j = 0; j < dout; ++j)
                        {
                            T acc = T(0);
                            for (std::int64_t k = 0; k < din; ++k)
                                acc += xs[r * din + k] * wg[k * dout + j];
                            if (bias)
                                acc += bias->data<T>()[g * dout + j];
                            ys[r * dout + j] = acc;
                        }
                }
            });
            return y;
        }

        namespace detail
        {
            inline void check_affine(const TensorValue& x, std::int64_t channels,
                                     std::initializer_list<const TensorValue*> params)
            {
                for (const auto* p : params)
                {
                    same_dtype(x, *p);
                    shape_check(p->rank() == 1 && p->dim(0) == channels,
                                "per-channel parameter does not match channel extent", p->dims(),
                                x.dims());
                }
            }
        }

        /// Normalizes over the channel axis and every axis after it.
        inline TensorValue layer_norm(const TensorValue& x, const TensorValue& gamma,
                                      const TensorValue& beta, double eps)
        {
            const auto axis = channel_axis(x.rank());
            const auto s = detail::split_at(x.dims(), axis);
            detail::check_affine(x, s.axis, {&gamma, &beta});
            TensorValue y(TensorSpec{x.dtype(), x.dims()});
            dispatch_dtype(x.dtype(), [&]<typename T>() {
                auto xs = x.data<T>();
                auto ys = y.data<T>();
                auto gs = gamma.data<T>();
                auto bs = beta.data<T>();
                const auto count = s.axis * s.inner;
                const T n = static_cast<T>(count);
                const T e = static_cast<T>(eps);
                for (std::int64_t o = 0; o < s.outer; ++o)
                {
                    const auto base = o * count;
                    T sum = T(0);
                    for (std::int64_t i = 0; i < count; ++i)
                        sum += xs[base + i];
                    const T mean = sum / n;
                    T sq = T(0);
                    for (std::int64_t i = 0; i < count; ++i)
                    {
                        const T d = xs[base + i] - mean;
                        sq += d * d;
                    }
                    const T denom = std::sqrt(sq / n + e);
                    for (std::int64_t i = 0; i < count; ++i)
                    {
                        const auto c = i / s.inner;
                        ys[base + i] = (xs[base + i] - mean) / denom * gs[c] + bs[c];
                    }
                }
            });
            return y;
        }

        /// Splits the channel axis into `groups` equal blocks and normalizes
        /// each block (with its trailing axes) independently.
        inline TensorValue group_norm(const TensorValue& x, const TensorValue& gamma,
                                      const TensorValue& beta, std::int64_t groups, double eps)
        {
            const auto axis = channel_axis(x.rank());
            const auto s = detail::split_at(x.dims(), axis);
            if (groups < 1 || s.axis % groups != 0)
            {
                throw Error(ErrorCode::GroupDivisibility, "groups " + std::to_string(groups) +
                                                              " must divide channels " +
                                                              std::to_string(s.axis));
            }
            detail::check_affine(x, s.axis, {&gamma, &beta});
            TensorValue y(TensorSpec{x.dtype(), x.dims()});
            dispatch_dtype(x.dtype(), [&]<typename T>() {
                auto xs = x.data<T>();
                auto ys = y.data<T>();
                auto gs = gamma.data<T>();
                auto bs = beta.data<T>();
                const auto channels_per_group = s.axis / groups;
                const auto count = channels_per_group * s.inner;
                const T n = static_cast<T>(count);
                const T e = static_cast<T>(eps);
                for (std::int64_t o = 0; o < s.outer; ++o)
                    for (std::int64_t g = 0; g < groups; ++g)
                    {
                        const auto base = o * s.axis * s.inner + g * count;
                        T sum = T(0);
                        for (std::int64_t i = 0; i < count; ++i)
                            sum += xs[base + i];
                        const T mean = sum / n;
                        T sq = T(0);
                        for (std::int64_t i = 0; i < count; ++i)
                        {
                            const T d = xs[base + i] - mean;
                            sq += d * d;
                        }
                        const T denom = std::sqrt(sq / n + e);
                        for (std::int64_t i = 0; i < count; ++i)
                        {
                            const auto c = g * channels_per_group + i / s.inner;
                            ys[base + i] = (xs[base + i] - mean) / denom * gs[c] + bs[c];
                        }
                    }
            });
            return y;
        }

        /// Inference-mode batch norm with running statistics as weights.
        inline TensorValue batch_norm_inference(const TensorValue& x, const TensorValue& gamma,
                                                const TensorValue& beta, const TensorValue& mean,
                                                const TensorValue& var, double eps)
        {
            const auto axis = channel_axis(x.rank());
            const auto s = detail::split_at(x.dims(), axis);
            detail::check_affine(x, s.axis, {&gamma, &beta, &mean, &var});
            TensorValue y(TensorSpec{x.dtype(), x.dims()});
            dispatch_dtype(x.dtype(), [&]<typename T>() {
                auto vs = var.data<T>();
                for (std::int64_t c = 0; c < s.axis; ++c)
                {
                    if (!(vs[c] >= T(0)))
                    {
                        throw Error(ErrorCode::Domain,
                                    "running variance of channel " + std::to_string(c) + " is negative");
                    }
                }
                auto xs = x.data<T>();
                auto ys = y.data<T>();
                auto gs = gamma.data<T>();
                auto bs = beta.data<T>();
                auto ms = mean.data<T>();
                const T e = static_cast<T>(eps);
                for (std::int64_t o = 0; o < s.outer; ++o)
                    for (std::int64_t c = 0; c < s.axis; ++c)
                    {
                        const T denom = std::sqrt(vs[c] + e);
                        const auto base = (o * s.axis + c) * s.inner;
                        for (std::int64_t i = 0; i < s.inner; ++i)
                            ys[base + i] = (xs[base + i] - ms[c]) / denom * gs[c] + bs[c];
                    }
            });
            return y;
        }

        namespace detail
        {
            template <typename F>
            TensorValue unary(const TensorValue& x, F f)
            {
                TensorValue y(TensorSpec{x.dtype(), x.dims()});
                dispatch_dtype(x.dtype(), [&]<typename T>() {
                    auto xs = x.data<T>();
                    auto ys = y.data<T>();
                    for (std::size_t i = 0; i < xs.size(); ++i)
                        ys[i] = f(xs[i]);
                });
                return y;
            }

            template <typename F>
            TensorValue binary(const TensorValue& a, const TensorValue& b, F f)
            {
                same_dtype(a, b);
                shape_check(a.dims() == b.dims(), "elementwise operands differ", a.dims(), b.dims());
                TensorValue y(TensorSpec{a.dtype(), a.dims()});
                dispatch_dtype(a.dtype(), [&]<typename T>() {
                    auto as = a.data<T>();
                    auto bs = b.data<T>();
                    auto ys = y.data<T>();
                    for (std::size_t i = 0; i < as.size(); ++i)
                        ys[i] = f(as[i], bs[i]);
                });
                return y;
            }
        }

        inline TensorValue relu(const TensorValue& x)
        {
            return detail::unary(x, [](auto v) { return v > decltype(v)(0) ? v : decltype(v)(0); });
        }

        inline TensorValue tanh(const TensorValue& x)
        {
            return detail::unary(x, [](auto v) { return std::tanh(v); });
        }

        inline TensorValue add(const TensorValue& a, const TensorValue& b)
        {
            return detail::binary(a, b, [](auto u, auto v) { return u + v; });
        }

        inline TensorValue mul(const TensorValue& a, const TensorValue& b)
        {
            return detail::binary(a, b, [](auto u, auto v) { return u * v; });
        }

        inline TensorValue softmax(const TensorValue& x, std::int64_t axis)
        {
            if (axis < 0 || axis >= static_cast<std::int64_t>(x.rank()))
            {
                throw Error(ErrorCode::Shape, "softmax axis " + std::to_string(axis) +
                                                  " out of range for " + to_string(x.dims()));
            }
            const auto s = detail::split_at(x.dims(), static_cast<std::size_t>(axis));
            TensorValue y(TensorSpec{x.dtype(), x.dims()});
            dispatch_dtype(x.dtype(), [&]<typename T>() {
                auto xs = x.data<T>();
                auto ys = y.data<T>();
                for (std::int64_t o = 0; o < s.outer; ++o)
                    for (std::int64_t i = 0; i < s.inner; ++i)
                    {
                        auto at = [&](std::int64_t a) { return (o * s.axis + a) * s.inner + i; };
                        T mx = xs[at(0)];
                        for (std::int64_t a = 1; a < s.axis; ++a)
                            mx = xs[at(a)] > mx ? xs[at(a)] : mx;
                        T sum = T(0);
                        for (std::int64_t a = 0; a < s.axis; ++a)
                        {
                            ys[at(a)] = std::exp(xs[at(a)] - mx);
                            sum += ys[at(a)];
                        }
                        for (std::int64_t a = 0; a < s.axis; ++a)
                            ys[at(a)] = ys[at(a)] / sum;
                    }
            });
            return y;
        }

        namespace detail
        {
            template <bool IsMax>
            TensorValue pool2d(const TensorValue& x, std::int64_t k, std::int64_t stride)
            {
                if (x.rank() < 2 || k < 1 || stride < 1)
                {
                    throw Error(ErrorCode::Shape, "pooling needs rank >= 2, kernel >= 1, stride >= 1");
                }
                const auto h = x.dim(x.rank() - 2);
                const auto w = x.dim(x.rank() - 1);
                if (k > h || k > w || (h - k) % stride != 0 || (w - k) % stride != 0)
                {
                    throw Error(ErrorCode::Shape, "pool window " + std::to_string(k) + "/" +
                                                      std::to_string(stride) + " overhangs input " +
                                                      to_string(x.dims()));
                }
                const auto hout = (h - k) / stride + 1;
                const auto wout = (w - k) / stride + 1;
                Shape out = x.dims();
                out[out.size() - 2] = hout;
                out[out.size() - 1] = wout;
                const auto planes = x.numel() / (h * w);
                TensorValue y(TensorSpec{x.dtype(), out});
                dispatch_dtype(x.dtype(), [&]<typename T>() {
                    auto xs = x.data<T>();
                    auto ys = y.data<T>();
                    for (std::int64_t p = 0; p < planes; ++p)
                        for (std::int64_t oh = 0; oh < hout; ++oh)
                            for (std::int64_t ow = 0; ow < wout; ++ow)
                            {
                                const T* base = xs.data() + p * h * w + oh * stride * w + ow * stride;
                                T acc = IsMax ? base[0] : T(0);
                                for (std::int64_t kh = 0; kh < k; ++kh)
                                    for (std::int64_t kw = 0; kw < k; ++kw)
                                    {
                                        const T v = base[kh * w + kw];
                                        if constexpr (IsMax)
                                            acc = v > acc ? v : acc;
                                        else
                                            acc += v;
                                    }
                                if constexpr (!IsMax)
                                    acc = acc / static_cast<T>(k * k);
                                ys[(p * hout + oh) * wout + ow] = acc;
                            }
                });
                return y;
            }
        }

        /// Pools over the last two axes; windows must tile the input exactly.
        inline TensorValue max_pool2d(const TensorValue& x, std::int64_t k, std::int64_t stride)
        {
            return detail::pool2d<true>(x, k, stride);
        }

        inline TensorValue mean_pool2d(const TensorValue& x, std::int64_t k, std::int64_t stride)
        {
            return detail::pool2d<false>(x, k, stride);
        }

        inline TensorValue concat(std::span<const TensorValue* const> parts, std::int64_t axis)
        {
            if (parts.empty())
            {
                throw Error(ErrorCode::Shape, "concat of zero tensors");
            }
            const auto& first = *parts[0];
            if (axis < 0 || axis >= static_cast<std::int64_t>(first.rank()))
            {
                throw Error(ErrorCode::Shape, "concat axis out of range for " + to_string(first.dims()));
            }
            const auto ax = static_cast<std::size_t>(axis);
            Shape out = first.dims();
            out[ax] = 0;
            for (const auto* p : parts)
            {
                detail::same_dtype(first, *p);
                bool ok = p->rank() == first.rank();
                for (std::size_t a = 0; ok && a < first.rank(); ++a)
                {
                    ok = a == ax || p->dim(a) == first.dim(a);
                }
                detail::shape_check(ok, "concat operands differ off the concat axis", first.dims(),
                                    p->dims());
                out[ax] += p->dim(ax);
            }
            TensorValue y(TensorSpec{first.dtype(), out});
            const auto outer = detail::split_at(out, ax).outer;
            auto dst = y.mutable_bytes();
            std::size_t offset = 0;
            const auto elem = dtype_size(first.dtype());
            for (std::int64_t o = 0; o < outer; ++o)
                for (const auto* p : parts)
                {
                    const auto chunk = static_cast<std::size_t>(p->numel() / outer) * elem;
                    auto src = p->bytes().subspan(static_cast<std::size_t>(o) * chunk, chunk);
                    std::copy(src.begin(), src.end(), dst.begin() + static_cast<std::ptrdiff_t>(offset));
                    offset += chunk;
                }
            return y;
        }

        /// Same elements, new extents. 0 copies the input extent at that
        /// position, a single -1 is inferred.
        inline TensorValue reshape(const TensorValue& x, const std::vector<std::int64_t>& target)
        {
            Shape out(target.size());
            std::int64_t known = 1;
            int infer_at = -1;
            for (std::size_t i = 0; i < target.size(); ++i)
            {
                if (target[i] == -1 && infer_at < 0)
                {
                    infer_at = static_cast<int>(i);
                    continue;
                }
                out[i] = target[i] == 0 && i < x.rank() ? x.dim(i) : target[i];
                if (out[i] < 1)
                {
                    throw Error(ErrorCode::Shape, "bad reshape target " + to_string(target));
                }
                known *= out[i];
            }
            if (infer_at >= 0)
            {
                if (x.numel() % known != 0)
                {
                    throw Error(ErrorCode::Shape,
                                "cannot reshape " + to_string(x.dims()) + " to " + to_string(target));
                }
                out[static_cast<std::size_t>(infer_at)] = x.numel() / known;
            }
            TensorValue y = x;
            y.set_layout(Layout::Unlaid);
            y.reshape_in_place(std::move(out));
            return y;
        }

        inline TensorValue transpose(const TensorValue& x, const std::vector<std::int64_t>& perm)
        {
            const auto r = x.rank();
            std::vector<bool> used(r, false);
            bool ok = perm.size() == r;
            for (std::size_t i = 0; ok && i < r; ++i)
            {
                ok = perm[i] >= 0 && perm[i] < static_cast<std::int64_t>(r) && !used[perm[i]];
                if (ok)
                    used[perm[i]] = true;
            }
            if (!ok)
            {
                throw Error(ErrorCode::Shape, "perm " + to_string(perm) + " is not a permutation of rank " +
                                                  std::to_string(r));
            }
            Shape out(r);
            for (std::size_t i = 0; i < r; ++i)
                out[i] = x.dim(static_cast<std::size_t>(perm[i]));
            const auto in_strides = detail::strides_of(x.dims());
            std::vector<std::int64_t> src_stride(r);
            for (std::size_t i = 0; i < r; ++i)
                src_stride[i] = in_strides[static_cast<std::size_t>(perm[i])];
            TensorValue y(TensorSpec{x.dtype(), out});
            dispatch_dtype(x.dtype(), [&]<typename T>() {
                auto xs = x.data<T>();
                auto ys = y.data<T>();
                std::vector<std::int64_t> idx(r, 0);
                std::int64_t src = 0;
                for (std::int64_t flat = 0; flat < y.numel(); ++flat)
                {
                    ys[flat] = xs[src];
                    for (std::size_t a = r; a-- > 0;)
                    {
                        ++idx[a];
                        src += src_stride[a];
                        if (idx[a] < out[a])
                            break;
                        src -= src_stride[a] * out[a];
                        idx[a] = 0;
                    }
                }
            });
            return y;
        }

        /// stack=true inserts a new axis of extent parts.size() at `axis`;
        /// stack=false concatenates along the existing `axis`.
        inline TensorValue pack(std::span<const TensorValue* const> parts, std::int64_t axis, bool stack)
        {
            if (parts.empty())
            {
                throw Error(ErrorCode::Shape, "pack of zero tensors");
            }
            for (const auto* p : parts)
            {
                detail::same_dtype(*parts[0], *p);
                detail::shape_check(p->dims() == parts[0]->dims(), "pack requires identical specs",
                                    parts[0]->dims(), p->dims());
            }
            if (!stack)
            {
                return concat(parts, axis);
            }
            const auto r = static_cast<std::int64_t>(parts[0]->rank());
            if (axis < 0 || axis > r)
            {
                throw Error(ErrorCode::Shape, "pack axis out of range");
            }
            Shape unit = parts[0]->dims();
            unit.insert(unit.begin() + axis, 1);
            std::vector<TensorValue> views;
            views.reserve(parts.size());
            std::vector<const TensorValue*> ptrs;
            for (const auto* p : parts)
            {
                views.push_back(*p);
                views.back().reshape_in_place(unit);
            }
            for (const auto& v : views)
                ptrs.push_back(&v);
            return concat(ptrs, axis);
        }

        /// Slice `index` of `count` along `axis`; inverse of pack.
        inline TensorValue unpack(const TensorValue& x, std::int64_t count, std::int64_t index,
                                  std::int64_t axis, bool stack)
        {
            if (axis < 0 || axis >= static_cast<std::int64_t>(x.rank()) || count < 1 || index < 0 ||
                index >= count || x.dim(static_cast<std::size_t>(axis)) % count != 0 ||
                (stack && (x.rank() < 2 || x.dim(static_cast<std::size_t>(axis)) != count)))
            {
                throw Error(ErrorCode::Shape, "cannot unpack slice " + std::to_string(index) + "/" +
                                                  std::to_string(count) + " on axis " +
                                                  std::to_string(axis) + " of " + to_string(x.dims()));
            }
            const auto ax = static_cast<std::size_t>(axis);
            const auto s = detail::split_at(x.dims(), ax);
            const auto part = s.axis / count;
            Shape out = x.dims();
            out[ax] = part;
            TensorValue y(TensorSpec{x.dtype(), out});
            const auto elem = dtype_size(x.dtype());
            const auto chunk = static_cast<std::size_t>(part * s.inner) * elem;
            auto src = x.bytes();
            auto dst = y.mutable_bytes();
            for (std::int64_t o = 0; o < s.outer; ++o)
            {
                auto from = (static_cast<std::size_t>(o * s.axis * s.inner) +
                             static_cast<std::size_t>(index * part * s.inner)) * elem;
                std::copy(src.begin() + static_cast<std::ptrdiff_t>(from),
                          src.begin() + static_cast<std::ptrdiff_t>(from + chunk),
                          dst.begin() + static_cast<std::ptrdiff_t>(static_cast<std::size_t>(o) * chunk));
            }
            if (stack)
            {
                out.erase(out.begin() + axis);
                y.reshape_in_place(out);
            }
            return y;
        }

        inline std::vector<TensorValue> unpack_all(const TensorValue& x, std::int64_t count,
                                                   std::int64_t axis, bool stack)
        {
            std::vector<TensorValue> out;
            for (std::int64_t i = 0; i < count; ++i)
                out.push_back(unpack(x, count, i, axis, stack));
            return out;
        }
    }
}
