#pragma once

#include <map>
#include <string>
#include <vector>

#include "dawn/tensor.hpp"

namespace dawn {

// Named-tensor archive (magic "DAWN", little-endian): a kind tag, a sorted
// key/value metadata block, and the parameter tensors in registry order.
// Checkpoints self-describe: the metadata carries everything needed to
// rebuild the owning model.
struct Checkpoint {
    std::string kind;  // vae | motion | motion-rgb-goal | action
    std::map<std::string, std::string> meta;
    std::vector<std::pair<std::string, Tensor>> tensors;

    void set_meta(const std::string& key, const std::string& value);
    void set_meta(const std::string& key, double value);
    void set_meta(const std::string& key, int64_t value);
    const std::string& require(const std::string& key) const;
    double require_num(const std::string& key) const;
    int64_t require_int(const std::string& key) const;
    bool has(const std::string& key) const { return meta.count(key) != 0; }
};

void save_checkpoint(const std::string& path, const Checkpoint& ck);
Checkpoint load_checkpoint(const std::string& path);

// Copies parameter values into / out of a store; loading requires an exact
// name and shape match.
void pack_params(Checkpoint& ck, const ParamStore& params, const std::string& prefix = "");
void unpack_params(const Checkpoint& ck, ParamStore& params, const std::string& prefix = "");

// FNV-1a over the raw parameter bytes, in registry order.
uint64_t param_checksum(const ParamStore& params);

}  // namespace dawn
