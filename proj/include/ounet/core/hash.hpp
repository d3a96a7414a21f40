#pragma once

#include <cstdint>
#include <iomanip>
#include <sstream>
#include <string>
#include <string_view>

namespace ounet {

/// FNV-1a, 64-bit. Stable across platforms and runs (unlike std::hash),
/// used for config fingerprints in manifests and checkpoints.
inline std::uint64_t fnv1a64(std::string_view bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : bytes) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string hex64(std::uint64_t v) {
    std::ostringstream os;
    os << std::hex << std::setw(16) << std::setfill('0') << v;
    return os.str();
}

inline std::string fingerprint(std::string_view bytes) { return hex64(fnv1a64(bytes)); }

}  // namespace ounet
