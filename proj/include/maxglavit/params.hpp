#pragma once

// Named tensor registry. Enumeration order is lexicographic by name, so
// serialization, optimizer state, and reporting are stable run to run.

#include <map>
#include <string>

#include "rng.hpp"
#include "tensor.hpp"

namespace maxglavit {

class ParameterSet {
public:
    Tensor& add(const std::string& name, Tensor t) {
        check(!name.empty(), "ParameterSet: empty parameter name");
        auto [it, inserted] = entries_.emplace(name, std::move(t));
        check(inserted, "ParameterSet: duplicate parameter name: " + name);
        return it->second;
    }

    bool contains(const std::string& name) const { return entries_.count(name) != 0; }

    Tensor get(const std::string& name) const {
        auto it = entries_.find(name);
        check(it != entries_.end(), "ParameterSet: no parameter named: " + name);
        return it->second;
    }

    std::vector<std::string> names() const {
        std::vector<std::string> out;
        out.reserve(entries_.size());
        for (const auto& [k, v] : entries_) out.push_back(k);
        return out;
    }

    size_t size() const { return entries_.size(); }

    int64_t total_params() const {
        int64_t n = 0;
        for (const auto& [k, v] : entries_) n += v.numel();
        return n;
    }

    auto begin() { return entries_.begin(); }
    auto end() { return entries_.end(); }
    auto begin() const { return entries_.begin(); }
    auto end() const { return entries_.end(); }

private:
    std::map<std::string, Tensor> entries_;
};

inline uint64_t fnv1a64(const std::string& s) {
    uint64_t h = 0xCBF29CE484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001B3ULL;
    }
    return h;
}

// Every parameter draws from its own stream keyed by (seed, name), so adding
// or reordering registrations never shifts another tensor's values.
inline RngState param_stream(uint64_t seed, const std::string& name) {
    return RngState::substream(seed, {0x9A7A, fnv1a64(name)});
}

}  // namespace maxglavit
