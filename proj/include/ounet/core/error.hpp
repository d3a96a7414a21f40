#pragma once

#include <sstream>
#include <stdexcept>
#include <string>

namespace ounet {

/// Base error for all pipeline failures. `what()` carries the full
/// human-readable message; `kind()` a stable machine-checkable tag.
class Error : public std::runtime_error {
public:
    Error(std::string kind, const std::string& message)
        : std::runtime_error("[" + kind + "] " + message), kind_(std::move(kind)) {}

    const std::string& kind() const { return kind_; }

private:
    std::string kind_;
};

struct ErrorKind {
    static constexpr const char* io = "io";
    static constexpr const char* dataset = "dataset";
    static constexpr const char* shape = "shape";
    static constexpr const char* validation = "validation";
    static constexpr const char* config = "config";
    static constexpr const char* numerics = "numerics";
};

template <typename... Parts>
[[noreturn]] void raise(const char* kind, Parts&&... parts) {
    std::ostringstream os;
    (os << ... << parts);
    throw Error(kind, os.str());
}

template <typename... Parts>
void require(bool cond, const char* kind, Parts&&... parts) {
    if (!cond) raise(kind, std::forward<Parts>(parts)...);
}

}  // namespace ounet
