#include "argen/checkpoint.hpp"

#include <json.hpp>

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "argen/error.hpp"
#include "argen/rng.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace argen {

namespace {

constexpr char kMagic[4] = {'A', 'R', 'G', 'N'};
constexpr uint32_t kVersion = 1;

void put_u32(std::string& out, uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(char((v >> (8 * i)) & 0xff));
}

uint32_t get_u32(const char* p) {
    uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= uint32_t(uint8_t(p[i])) << (8 * i);
    return v;
}

uint64_t get_u64(const char* p) {
    uint64_t v = 0;
    for (int i = 0; i < 8; ++i) v |= uint64_t(uint8_t(p[i])) << (8 * i);
    return v;
}

std::string encode(const Checkpoint& ck) {
    json manifest;
    manifest["tensors"] = json::array();
    int64_t offset = 0;
    for (const auto& [name, t] : ck.tensors) {
        manifest["tensors"].push_back({{"name", name}, {"shape", t.shape()}, {"offset", offset}});
        offset += t.numel();
    }
    manifest["scalars"] = json::array();
    for (const auto& [name, v] : ck.scalars)
        manifest["scalars"].push_back({{"name", name}, {"value", v}});
    manifest["config"] = ck.config_text;
    std::string mjson = manifest.dump();

    std::string out;
    out.append(kMagic, 4);
    put_u32(out, kVersion);
    put_u64(out, mjson.size());
    out += mjson;
    put_u64(out, uint64_t(offset));
    for (const auto& [name, t] : ck.tensors) {
        static_assert(sizeof(float) == 4);
        size_t pos = out.size();
        out.resize(pos + size_t(t.numel()) * 4);
        std::memcpy(out.data() + pos, t.data(), size_t(t.numel()) * 4);
    }
    return out;
}

}  // namespace

void Checkpoint::put_tensor(const std::string& name, Tensor t) {
    for (auto& [n, old] : tensors)
        if (n == name) {
            old = std::move(t);
            return;
        }
    tensors.push_back({name, std::move(t)});
}

const Tensor* Checkpoint::find_tensor(const std::string& name) const {
    for (const auto& [n, t] : tensors)
        if (n == name) return &t;
    return nullptr;
}

const Tensor& Checkpoint::need_tensor(const std::string& name) const {
    const Tensor* t = find_tensor(name);
    ARGEN_CHECK(t != nullptr, DataError, "checkpoint: missing tensor '" + name + "'");
    return *t;
}

void Checkpoint::put_scalar(const std::string& name, uint64_t v) {
    for (auto& [n, old] : scalars)
        if (n == name) {
            old = v;
            return;
        }
    scalars.push_back({name, v});
}

bool Checkpoint::has_scalar(const std::string& name) const {
    for (const auto& [n, v] : scalars)
        if (n == name) return true;
    return false;
}

uint64_t Checkpoint::need_scalar(const std::string& name) const {
    for (const auto& [n, v] : scalars)
        if (n == name) return v;
    throw DataError("checkpoint: missing scalar '" + name + "'");
}

void Checkpoint::save(const std::string& path) const {
    std::string blob = encode(*this);
    fs::path p(path);
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary);
        ARGEN_CHECK(f.good(), DataError, "checkpoint: cannot write " + tmp);
        f.write(blob.data(), std::streamsize(blob.size()));
        ARGEN_CHECK(f.good(), DataError, "checkpoint: short write to " + tmp);
    }
    fs::rename(tmp, path);
}

Checkpoint Checkpoint::load(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    ARGEN_CHECK(f.good(), DataError, "checkpoint: cannot read " + path);
    std::string blob((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
    ARGEN_CHECK(blob.size() >= 24, DataError, "checkpoint: truncated header in " + path);
    ARGEN_CHECK(std::memcmp(blob.data(), kMagic, 4) == 0, DataError,
                "checkpoint: bad magic in " + path);
    uint32_t version = get_u32(blob.data() + 4);
    ARGEN_CHECK(version == kVersion, DataError,
                "checkpoint: unsupported version " + std::to_string(version));
    uint64_t mlen = get_u64(blob.data() + 8);
    ARGEN_CHECK(16 + mlen + 8 <= blob.size(), DataError, "checkpoint: truncated manifest");
    json manifest = json::parse(blob.substr(16, mlen));
    size_t pos = 16 + size_t(mlen);
    uint64_t total = get_u64(blob.data() + pos);
    pos += 8;
    ARGEN_CHECK(pos + total * 4 == blob.size(), DataError, "checkpoint: payload size mismatch");

    Checkpoint ck;
    ck.config_text = manifest.at("config").get<std::string>();
    for (const auto& s : manifest.at("scalars"))
        ck.scalars.push_back({s.at("name").get<std::string>(), s.at("value").get<uint64_t>()});
    for (const auto& t : manifest.at("tensors")) {
        Tensor tensor(t.at("shape").get<std::vector<int>>());
        int64_t offset = t.at("offset").get<int64_t>();
        ARGEN_CHECK(offset >= 0 && uint64_t(offset) + uint64_t(tensor.numel()) <= total, DataError,
                    "checkpoint: tensor payload out of range");
        std::memcpy(tensor.data(), blob.data() + pos + size_t(offset) * 4,
                    size_t(tensor.numel()) * 4);
        ck.tensors.push_back({t.at("name").get<std::string>(), std::move(tensor)});
    }
    return ck;
}

uint64_t Checkpoint::content_hash() const {
    std::string blob = encode(*this);
    return fnv1a64(blob.data(), blob.size());
}

void store_params(Checkpoint& ck, const ParamStore& ps) {
    for (const auto& p : ps.all()) ck.put_tensor("param." + p->name, p->value);
}

void load_params(const Checkpoint& ck, ParamStore& ps) {
    for (auto& p : ps.all()) {
        const Tensor& t = ck.need_tensor("param." + p->name);
        ARGEN_CHECK(t.shape() == p->value.shape(), ShapeError,
                    "checkpoint: shape mismatch for '" + p->name + "' (" + t.shape_str() + " vs " +
                        p->value.shape_str() + ")");
        p->value = t;
    }
    ps.bump_version();
}

void store_adam(Checkpoint& ck, Adam& opt) {
    ck.put_scalar("adam.t", uint64_t(opt.t()));
    for (const auto& [name, st] : opt.slots()) {
        ck.put_tensor("adam.m." + name, st.m);
        ck.put_tensor("adam.v." + name, st.v);
    }
}

void load_adam(const Checkpoint& ck, Adam& opt) {
    opt.set_t(int64_t(ck.need_scalar("adam.t")));
    opt.slots().clear();
    for (const auto& [name, t] : ck.tensors) {
        if (name.rfind("adam.m.", 0) != 0) continue;
        std::string pname = name.substr(7);
        AdamState st{t, ck.need_tensor("adam.v." + pname)};
        opt.slots().emplace(pname, std::move(st));
    }
}

}  // namespace argen
