#include "occtens/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "occtens/common.hpp"

namespace occtens {

namespace {

constexpr char kMagic[4] = {'O', 'C', 'K', 'P'};
constexpr uint16_t kVersion = 1;

void put_u16(std::string& out, uint16_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>((v >> 8) & 0xff));
}

void put_u32(std::string& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f32(std::string& out, float v) {
    put_u32(out, std::bit_cast<uint32_t>(v));
}

void put_str(std::string& out, const std::string& s) {
    put_u32(out, static_cast<uint32_t>(s.size()));
    out.append(s);
}

struct Reader {
    const std::string& buf;
    size_t pos = 0;

    void need(size_t n, const char* what) const {
        if (pos + n > buf.size()) throw DataError(std::string("checkpoint truncated reading ") + what);
    }
    uint16_t u16(const char* what) {
        need(2, what);
        uint16_t v = 0;
        for (int i = 0; i < 2; ++i) v |= static_cast<uint16_t>(static_cast<uint8_t>(buf[pos + i])) << (8 * i);
        pos += 2;
        return v;
    }
    uint32_t u32(const char* what) {
        need(4, what);
        uint32_t v = 0;
        for (int i = 0; i < 4; ++i) v |= static_cast<uint32_t>(static_cast<uint8_t>(buf[pos + i])) << (8 * i);
        pos += 4;
        return v;
    }
    uint64_t u64(const char* what) {
        need(8, what);
        uint64_t v = 0;
        for (int i = 0; i < 8; ++i) v |= static_cast<uint64_t>(static_cast<uint8_t>(buf[pos + i])) << (8 * i);
        pos += 8;
        return v;
    }
    float f32(const char* what) { return std::bit_cast<float>(u32(what)); }
    std::string str(const char* what) {
        uint32_t n = u32(what);
        need(n, what);
        std::string s = buf.substr(pos, n);
        pos += n;
        return s;
    }
};

}  // namespace

std::string serialize_checkpoint(const Checkpoint& ckpt) {
    if (ckpt.names.size() != ckpt.tensors.size())
        throw ConfigError("checkpoint name/tensor count mismatch");
    std::string out;
    out.append(kMagic, 4);
    put_u16(out, kVersion);
    put_str(out, ckpt.kind);
    put_str(out, ckpt.config_json);
    put_u64(out, ckpt.tokenizer_hash);
    put_u32(out, static_cast<uint32_t>(ckpt.tensors.size()));
    for (size_t i = 0; i < ckpt.tensors.size(); ++i) {
        const Tensor& t = ckpt.tensors[i];
        put_str(out, ckpt.names[i]);
        put_u32(out, static_cast<uint32_t>(t.shape.size()));
        for (int d : t.shape) put_u32(out, static_cast<uint32_t>(d));
        for (float v : t.data) put_f32(out, v);
    }
    return out;
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
    std::string out = serialize_checkpoint(ckpt);
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw DataError("cannot open checkpoint for writing: " + path);
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw DataError("short write to checkpoint: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open checkpoint: " + path);
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    Reader r{buf};
    r.need(4, "magic");
    if (std::memcmp(buf.data(), kMagic, 4) != 0) throw DataError("bad checkpoint magic");
    r.pos = 4;
    uint16_t ver = r.u16("version");
    if (ver != kVersion)
        throw DataError("unsupported checkpoint version " + std::to_string(ver));
    Checkpoint ckpt;
    ckpt.kind = r.str("kind");
    ckpt.config_json = r.str("config");
    ckpt.tokenizer_hash = r.u64("tokenizer hash");
    uint32_t count = r.u32("tensor count");
    ckpt.names.reserve(count);
    ckpt.tensors.reserve(count);
    for (uint32_t i = 0; i < count; ++i) {
        ckpt.names.push_back(r.str("tensor name"));
        uint32_t ndim = r.u32("tensor rank");
        std::vector<int> shape(ndim);
        size_t numel = 1;
        for (uint32_t d = 0; d < ndim; ++d) {
            shape[d] = static_cast<int>(r.u32("tensor dim"));
            if (shape[d] <= 0) throw DataError("non-positive tensor dim in checkpoint");
            numel *= static_cast<size_t>(shape[d]);
        }
        Tensor t(shape);
        for (size_t k = 0; k < numel; ++k) t.data[k] = r.f32("tensor data");
        ckpt.tensors.push_back(std::move(t));
    }
    if (r.pos != buf.size()) throw DataError("trailing bytes in checkpoint");
    return ckpt;
}

uint64_t fnv1a64(const void* data, size_t n) {
    const auto* p = static_cast<const uint8_t*>(data);
    uint64_t h = 0xcbf29ce484222325ull;
    for (size_t i = 0; i < n; ++i) {
        h ^= p[i];
        h *= 0x100000001b3ull;
    }
    return h;
}

uint64_t fnv1a64_file(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw DataError("cannot open file for hashing: " + path);
    std::string buf((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    return fnv1a64(buf.data(), buf.size());
}

}  // namespace occtens
