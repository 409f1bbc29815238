#include "dawn/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

#include "dawn/common.hpp"

namespace dawn {

namespace {

constexpr char kMagic[4] = {'D', 'A', 'W', 'N'};
constexpr uint32_t kVersion = 1;

void put_str(std::ostream& os, const std::string& s) {
    const uint32_t n = static_cast<uint32_t>(s.size());
    os.write(reinterpret_cast<const char*>(&n), 4);
    os.write(s.data(), n);
}

std::string get_str(std::istream& is) {
    uint32_t n = 0;
    is.read(reinterpret_cast<char*>(&n), 4);
    std::string s(n, '\0');
    is.read(s.data(), n);
    return s;
}

}  // namespace

void Checkpoint::set_meta(const std::string& key, const std::string& value) { meta[key] = value; }

void Checkpoint::set_meta(const std::string& key, double value) {
    std::ostringstream os;
    os.precision(17);
    os << value;
    meta[key] = os.str();
}

void Checkpoint::set_meta(const std::string& key, int64_t value) {
    meta[key] = std::to_string(value);
}

const std::string& Checkpoint::require(const std::string& key) const {
    auto it = meta.find(key);
    if (it == meta.end()) throw IoError("checkpoint missing metadata key: " + key);
    return it->second;
}

double Checkpoint::require_num(const std::string& key) const { return std::stod(require(key)); }
int64_t Checkpoint::require_int(const std::string& key) const { return std::stoll(require(key)); }

void save_checkpoint(const std::string& path, const Checkpoint& ck) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for writing: " + path);
    f.write(kMagic, 4);
    f.write(reinterpret_cast<const char*>(&kVersion), 4);
    put_str(f, ck.kind);
    const uint32_t n_meta = static_cast<uint32_t>(ck.meta.size());
    f.write(reinterpret_cast<const char*>(&n_meta), 4);
    for (const auto& [k, v] : ck.meta) {  // std::map iterates sorted -> stable bytes
        put_str(f, k);
        put_str(f, v);
    }
    const uint32_t n_tensors = static_cast<uint32_t>(ck.tensors.size());
    f.write(reinterpret_cast<const char*>(&n_tensors), 4);
    for (const auto& [name, t] : ck.tensors) {
        put_str(f, name);
        const uint32_t nd = static_cast<uint32_t>(t.ndim());
        f.write(reinterpret_cast<const char*>(&nd), 4);
        for (int64_t d : t.shape()) f.write(reinterpret_cast<const char*>(&d), 8);
        f.write(reinterpret_cast<const char*>(t.data().data()),
                static_cast<std::streamsize>(t.numel() * sizeof(float)));
    }
    if (!f) throw IoError("short write: " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open: " + path);
    char magic[4];
    f.read(magic, 4);
    if (std::memcmp(magic, kMagic, 4) != 0) throw IoError("bad checkpoint magic in " + path);
    uint32_t version = 0;
    f.read(reinterpret_cast<char*>(&version), 4);
    if (version != kVersion) throw IoError("unsupported checkpoint version in " + path);
    Checkpoint ck;
    ck.kind = get_str(f);
    uint32_t n_meta = 0;
    f.read(reinterpret_cast<char*>(&n_meta), 4);
    for (uint32_t i = 0; i < n_meta; ++i) {
        std::string k = get_str(f);
        ck.meta[k] = get_str(f);
    }
    uint32_t n_tensors = 0;
    f.read(reinterpret_cast<char*>(&n_tensors), 4);
    for (uint32_t i = 0; i < n_tensors; ++i) {
        std::string name = get_str(f);
        uint32_t nd = 0;
        f.read(reinterpret_cast<char*>(&nd), 4);
        Shape shape(nd);
        for (uint32_t d = 0; d < nd; ++d) f.read(reinterpret_cast<char*>(&shape[d]), 8);
        std::vector<float> data(shape_numel(shape));
        f.read(reinterpret_cast<char*>(data.data()),
               static_cast<std::streamsize>(data.size() * sizeof(float)));
        ck.tensors.emplace_back(name, Tensor::from_data(shape, std::move(data)));
    }
    if (!f) throw IoError("truncated checkpoint: " + path);
    return ck;
}

void pack_params(Checkpoint& ck, const ParamStore& params, const std::string& prefix) {
    for (const auto& [name, t] : params.items) ck.tensors.emplace_back(prefix + name, t.clone());
}

void unpack_params(const Checkpoint& ck, ParamStore& params, const std::string& prefix) {
    for (auto& [name, t] : params.items) {
        const std::string want = prefix + name;
        bool found = false;
        for (const auto& [cn, ct] : ck.tensors) {
            if (cn != want) continue;
            if (ct.shape() != t.shape())
                throw IoError("checkpoint tensor '" + want + "' has shape " +
                              shape_str(ct.shape()) + ", expected " + shape_str(t.shape()));
            std::copy(ct.data().begin(), ct.data().end(), t.data().begin());
            found = true;
            break;
        }
        if (!found) throw IoError("checkpoint missing tensor: " + want);
    }
}

uint64_t param_checksum(const ParamStore& params) {
    uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& [name, t] : params.items) {
        for (char c : name) {
            h ^= static_cast<unsigned char>(c);
            h *= 0x100000001b3ull;
        }
        const auto* bytes = reinterpret_cast<const unsigned char*>(t.data().data());
        for (int64_t i = 0; i < t.numel() * static_cast<int64_t>(sizeof(float)); ++i) {
            h ^= bytes[i];
            h *= 0x100000001b3ull;
        }
    }
    return h;
}

}  // namespace dawn
