#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "argen/graph.hpp"
#include "argen/optim.hpp"
#include "argen/tensor.hpp"

namespace argen {

// Versioned on-disk container: named float tensors, named u64 scalars, and a
// free-form config text block. Reloading and saving again is byte-identical.
struct Checkpoint {
    std::vector<std::pair<std::string, Tensor>> tensors;
    std::vector<std::pair<std::string, uint64_t>> scalars;
    std::string config_text;

    void put_tensor(const std::string& name, Tensor t);
    const Tensor* find_tensor(const std::string& name) const;
    const Tensor& need_tensor(const std::string& name) const;

    void put_scalar(const std::string& name, uint64_t v);
    bool has_scalar(const std::string& name) const;
    uint64_t need_scalar(const std::string& name) const;

    void save(const std::string& path) const;
    static Checkpoint load(const std::string& path);
    uint64_t content_hash() const;
};

// Parameter values in store order; loading requires exact name/shape match.
void store_params(Checkpoint& ck, const ParamStore& ps);
void load_params(const Checkpoint& ck, ParamStore& ps);

// Optimizer slots and step counter, prefixed so they coexist with params.
void store_adam(Checkpoint& ck, Adam& opt);
void load_adam(const Checkpoint& ck, Adam& opt);

}  // namespace argen
