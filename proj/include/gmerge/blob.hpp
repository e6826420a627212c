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

// TNSR blob:
//   "TNSR" | u16 version = 1 | u8 dtype (0 = f32, 1 = f64) | u8 rank |
//   rank x u64 dims | row-major payload
// All integers and payload little-endian.
//
// A weight set is a directory holding manifest.json plus one blob per tensor:
//   {"schema": 1, "model_index": m, "tensors": {"<name>": "<file>"}}
// Merged weight sets use model_index -1 and add "merged_models".

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <string>
#include <vector>

#include <json.hpp>

#include "gmerge/error.hpp"
#include "gmerge/tensor.hpp"
#include "gmerge/weights.hpp"

namespace gmerge
{
    static_assert(std::endian::native == std::endian::little, "TNSR I/O assumes a little-endian host");

    inline constexpr std::uint16_t kBlobVersion = 1;

    inline std::vector<std::uint8_t> encode_tensor(const TensorValue& t)
    {
        std::vector<std::uint8_t> out{'T', 'N', 'S', 'R'};
        auto put = [&out](const void* p, std::size_t n) {
            const auto* b = static_cast<const std::uint8_t*>(p);
            out.insert(out.end(), b, b + n);
        };
        put(&kBlobVersion, 2);
        out.push_back(static_cast<std::uint8_t>(t.dtype()));
        out.push_back(static_cast<std::uint8_t>(t.rank()));
        for (auto d : t.dims())
        {
            auto u = static_cast<std::uint64_t>(d);
            put(&u, 8);
        }
        auto payload = t.bytes();
        put(payload.data(), payload.size());
        return out;
    }

    inline TensorValue decode_tensor(std::span<const std::uint8_t> bytes)
    {
        std::size_t pos = 0;
        auto take = [&](void* dst, std::size_t n) {
            if (bytes.size() - pos < n)
            {
                throw Error(ErrorCode::Parse, "truncated TNSR blob at byte " + std::to_string(pos));
            }
            std::memcpy(dst, bytes.data() + pos, n);
            pos += n;
        };
        char magic[4];
        take(magic, 4);
        if (std::memcmp(magic, "TNSR", 4) != 0)
        {
            throw Error(ErrorCode::Parse, "bad TNSR magic at byte 0");
        }
        std::uint16_t version = 0;
        take(&version, 2);
        if (version != kBlobVersion)
        {
            throw Error(ErrorCode::Parse, "unsupported TNSR version " + std::to_string(version) + " at byte 4");
        }
        std::uint8_t dtype = 0;
        std::uint8_t rank = 0;
        take(&dtype, 1);
        take(&rank, 1);
        if (dtype > 1)
        {
            throw Error(ErrorCode::Parse, "unknown TNSR dtype " + std::to_string(dtype) + " at byte 6");
        }
        if (rank == 0)
        {
            throw Error(ErrorCode::Parse, "TNSR rank must be >= 1 (byte 7)");
        }
        Shape dims(rank);
        for (auto& d : dims)
        {
            std::uint64_t u = 0;
            take(&u, 8);
            if (u == 0 || u > (std::uint64_t{1} << 40))
            {
                throw Error(ErrorCode::Parse, "bad TNSR extent at byte " + std::to_string(pos - 8));
            }
            d = static_cast<std::int64_t>(u);
        }
        TensorValue t(TensorSpec{static_cast<DType>(dtype), dims});
        auto dst = t.mutable_bytes();
        take(dst.data(), dst.size());
        if (pos != bytes.size())
        {
            throw Error(ErrorCode::Parse, "trailing bytes after TNSR payload at byte " + std::to_string(pos));
        }
        return t;
    }

    inline void write_tensor_file(const std::filesystem::path& path, const TensorValue& t)
    {
        auto bytes = encode_tensor(t);
        std::ofstream f(path, std::ios::binary | std::ios::trunc);
        if (!f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size())))
        {
            throw Error(ErrorCode::Io, "cannot write '" + path.string() + "'");
        }
    }

    inline TensorValue read_tensor_file(const std::filesystem::path& path)
    {
        std::ifstream f(path, std::ios::binary);
        if (!f)
        {
            throw Error(ErrorCode::Io, "cannot open '" + path.string() + "'");
        }
        std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
        try
        {
            return decode_tensor(bytes);
        }
        catch (const Error& e)
        {
            throw Error(e.code(), path.string() + ": " + e.message());
        }
    }

    namespace detail
    {
        inline void write_weight_dir(const std::filesystem::path& dir, const WeightMap& tensors,
                                     nlohmann::json manifest)
        {
            std::error_code ec;
            std::filesystem::create_directories(dir, ec);
            if (ec)
            {
                throw Error(ErrorCode::Io, "cannot create '" + dir.string() + "': " + ec.message());
            }
            nlohmann::json files = nlohmann::json::object();
            std::size_t i = 0;
            for (const auto& [name, t] : tensors)
            {
                auto file = "t" + std::to_string(i++) + ".tnsr";
                write_tensor_file(dir / file, t);
                files[name] = file;
            }
            manifest["schema"] = 1;
            manifest["tensors"] = files;
            std::ofstream f(dir / "manifest.json", std::ios::trunc);
            if (!(f << manifest.dump(2) << "\n"))
            {
                throw Error(ErrorCode::Io, "cannot write manifest in '" + dir.string() + "'");
            }
        }

        inline nlohmann::json read_manifest(std::filesystem::path& dir_or_manifest)
        {
            auto manifest_path = dir_or_manifest;
            if (std::filesystem::is_directory(manifest_path))
            {
                manifest_path /= "manifest.json";
            }
            dir_or_manifest = manifest_path.parent_path();
            std::ifstream f(manifest_path);
            if (!f)
            {
                throw Error(ErrorCode::Io, "cannot open '" + manifest_path.string() + "'");
            }
            try
            {
                auto j = nlohmann::json::parse(f);
                if (j.value("schema", 0) != 1)
                {
                    throw Error(ErrorCode::Parse, "unsupported manifest schema in '" + manifest_path.string() + "'");
                }
                return j;
            }
            catch (const nlohmann::json::exception& e)
            {
                throw Error(ErrorCode::Parse, manifest_path.string() + ": " + e.what());
            }
        }

        inline WeightMap read_tensors(const std::filesystem::path& dir, const nlohmann::json& manifest)
        {
            WeightMap out;
            for (const auto& [name, file] : manifest.at("tensors").items())
            {
                out.emplace(name, read_tensor_file(dir / file.get<std::string>()));
            }
            return out;
        }
    }

    inline void save_weights(const std::filesystem::path& dir, const WeightStore& store)
    {
        detail::write_weight_dir(dir, store.tensors, {{"model_index", store.model_index}});
    }

    inline void save_merged_weights(const std::filesystem::path& dir, const MergedWeights& w)
    {
        detail::write_weight_dir(dir, w.tensors, {{"model_index", -1}, {"merged_models", w.models}});
    }

    /// Accepts a weight directory or the path of its manifest.json.
    inline WeightStore load_weights(std::filesystem::path path)
    {
        auto manifest = detail::read_manifest(path);
        return WeightStore{manifest.value("model_index", 0), detail::read_tensors(path, manifest)};
    }

    inline MergedWeights load_merged_weights(std::filesystem::path path)
    {
        auto manifest = detail::read_manifest(path);
        return MergedWeights{manifest.value("merged_models", 0), detail::read_tensors(path, manifest)};
    }
}
