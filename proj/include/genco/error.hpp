#pragma once

#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace genco {

// Base error for everything the library throws on purpose. The CLI maps
// these onto exit codes; messages are single-line.
struct Error : std::runtime_error {
    explicit Error(const std::string& msg) : std::runtime_error(msg) {}
};

struct ShapeError : Error {
    explicit ShapeError(const std::string& msg) : Error(msg) {}
};

struct ConfigError : Error {
    explicit ConfigError(const std::string& msg) : Error(msg) {}
};

struct ParseError : Error {
    explicit ParseError(const std::string& msg) : Error(msg) {}
};

struct IoError : Error {
    explicit IoError(const std::string& msg) : Error(msg) {}
};

inline std::string shape_str(const std::vector<int>& s) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) os << ",";
        os << s[i];
    }
    os << "]";
    return os.str();
}

[[noreturn]] inline void shape_fail(const std::string& op, const std::vector<int>& a,
                                    const std::vector<int>& b) {
    throw ShapeError("shape mismatch in " + op + ": " + shape_str(a) + " vs " + shape_str(b));
}

}  // namespace genco
