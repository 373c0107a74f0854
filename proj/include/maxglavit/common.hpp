#pragma once

// Shared basics: dtypes, shape helpers, error reporting.

#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace maxglavit {

enum class Dtype { real32, real64 };

inline const char* dtype_name(Dtype dt) {
    return dt == Dtype::real32 ? "real32" : "real64";
}

inline Dtype dtype_from_name(const std::string& s) {
    if (s == "real32") return Dtype::real32;
    if (s == "real64") return Dtype::real64;
    throw std::invalid_argument("unknown dtype name: " + s);
}

inline std::size_t dtype_size(Dtype dt) {
    return dt == Dtype::real32 ? 4 : 8;
}

using Shape = std::vector<int64_t>;

inline int64_t shape_numel(const Shape& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << ", ";
        os << s[i];
    }
    os << "]";
    return os.str();
}

// Precondition check; violated contracts throw std::invalid_argument.
inline void check(bool cond, const std::string& msg) {
    if (!cond) throw std::invalid_argument(msg);
}

}  // namespace maxglavit
