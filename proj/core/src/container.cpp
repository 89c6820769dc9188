#include "masqlab/container.hpp"

#include <cstdio>
#include <cstring>
#include <fstream>

#include "json.hpp"
#include "masqlab/errors.hpp"

namespace masqlab {

namespace {

constexpr char kMagic[8] = {'M', 'S', 'Q', 'L', 'O', 'R', 'A', '1'};
constexpr std::uint64_t kAlign = 64;

std::uint64_t align_up(std::uint64_t v) { return (v + kAlign - 1) / kAlign * kAlign; }

void put_u64_le(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

std::uint64_t get_u64_le(const unsigned char* p) {
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(p[i]) << (8 * i);
    return v;
}

void put_f32_le(std::string& out, float f) {
    std::uint32_t bits;
    std::memcpy(&bits, &f, 4);
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((bits >> (8 * i)) & 0xff));
}

float get_f32_le(const unsigned char* p) {
    std::uint32_t bits = 0;
    for (int i = 0; i < 4; ++i) bits |= static_cast<std::uint32_t>(p[i]) << (8 * i);
    float f;
    std::memcpy(&f, &bits, 4);
    return f;
}

}  // namespace

std::string serialize_tensor_file(const std::map<std::string, Tensor>& tensors,
                                  const std::map<std::string, std::string>& metadata) {
    using nlohmann::json;
    json header = json::object();
    if (!metadata.empty()) {
        json meta = json::object();
        for (const auto& [k, v] : metadata) meta[k] = v;
        header["__metadata__"] = meta;
    }

    // offsets assigned in sorted name order (std::map iteration)
    std::uint64_t offset = 0;
    for (const auto& [name, t] : tensors) {
        const std::uint64_t length = static_cast<std::uint64_t>(t.size()) * 4;
        json entry;
        entry["dtype"] = "f32";
        entry["shape"] = t.shape();
        entry["offset"] = offset;
        entry["length"] = length;
        header[name] = entry;
        offset = align_up(offset + length);
    }
    const std::uint64_t payload_size = offset;

    std::string header_str = header.dump();
    // pad header so the payload base (16 + header_len) is 64-byte aligned
    const std::uint64_t unpadded = 16 + header_str.size();
    header_str.append(static_cast<std::size_t>(align_up(unpadded) - unpadded), ' ');

    std::string blob;
    blob.reserve(16 + header_str.size() + payload_size);
    blob.append(kMagic, 8);
    put_u64_le(blob, header_str.size());
    blob += header_str;
    for (const auto& [name, t] : tensors) {
        for (std::int64_t i = 0; i < t.size(); ++i) {
            put_f32_le(blob, static_cast<float>(t[i]));
        }
        while (blob.size() % kAlign != 0) blob.push_back('\0');
    }
    return blob;
}

void save_tensor_file(const std::string& path,
                      const std::map<std::string, Tensor>& tensors,
                      const std::map<std::string, std::string>& metadata) {
    const std::string blob = serialize_tensor_file(tensors, metadata);
    // atomic write: temp file then rename
    const std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        if (!f) throw StateError("cannot open for writing: " + tmp);
        f.write(blob.data(), static_cast<std::streamsize>(blob.size()));
        if (!f) throw StateError("write failed: " + tmp);
    }
    if (std::rename(tmp.c_str(), path.c_str()) != 0) {
        throw StateError("rename failed: " + tmp + " -> " + path);
    }
}

TensorFileContents load_tensor_file(const std::string& path) {
    using nlohmann::json;
    std::ifstream f(path, std::ios::binary);
    if (!f) throw StateError("cannot open: " + path);
    std::string blob((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    const auto* p = reinterpret_cast<const unsigned char*>(blob.data());

    if (blob.size() < 16) throw ParseError("file too short for container header", blob.size());
    if (std::memcmp(blob.data(), kMagic, 8) != 0) {
        throw ParseError("bad magic (unknown container version)", 0);
    }
    const std::uint64_t header_len = get_u64_le(p + 8);
    if (16 + header_len > blob.size()) {
        throw ParseError("header length exceeds file size", 8);
    }
    json header;
    try {
        header = json::parse(blob.substr(16, header_len));
    } catch (const json::parse_error&) {
        throw ParseError("invalid JSON header", 16);
    }
    if (!header.is_object()) throw ParseError("header is not a JSON object", 16);

    const std::uint64_t payload_base = 16 + header_len;
    const std::uint64_t payload_size = blob.size() - payload_base;

    TensorFileContents out;
    for (const auto& [key, entry] : header.items()) {
        if (key == "__metadata__") {
            if (!entry.is_object()) throw ParseError("__metadata__ is not an object", 16);
            for (const auto& [mk, mv] : entry.items()) {
                if (mv.is_string()) {
                    out.metadata[mk] = mv.get<std::string>();
                } else {
                    out.metadata[mk] = mv.dump();
                }
            }
            continue;
        }
        if (!entry.is_object() || !entry.contains("dtype")) {
            out.warnings.push_back("unknown header key ignored: " + key);
            continue;
        }
        const std::string dtype = entry["dtype"].get<std::string>();
        if (dtype != "f32") {
            throw ParseError("unsupported dtype '" + dtype + "' for tensor " + key, 16);
        }
        if (!entry.contains("shape") || !entry.contains("offset") || !entry.contains("length")) {
            throw ParseError("tensor entry missing shape/offset/length: " + key, 16);
        }
        for (const auto& [ek, ev] : entry.items()) {
            (void)ev;
            if (ek != "dtype" && ek != "shape" && ek != "offset" && ek != "length") {
                out.warnings.push_back("unknown tensor attribute ignored: " + key + "." + ek);
            }
        }
        std::vector<int> shape = entry["shape"].get<std::vector<int>>();
        const std::uint64_t offset = entry["offset"].get<std::uint64_t>();
        const std::uint64_t length = entry["length"].get<std::uint64_t>();
        const std::int64_t count = Tensor::count(shape);
        if (length != static_cast<std::uint64_t>(count) * 4) {
            throw ParseError("tensor length does not match shape: " + key,
                             payload_base + offset);
        }
        if (offset + length > payload_size) {
            throw ParseError("tensor payload truncated: " + key, payload_base + offset);
        }
        Tensor t(std::move(shape));
        const unsigned char* src = p + payload_base + offset;
        for (std::int64_t i = 0; i < count; ++i) {
            t[i] = static_cast<real>(get_f32_le(src + i * 4));
        }
        out.tensors.emplace(key, std::move(t));
    }
    return out;
}

}  // namespace masqlab
