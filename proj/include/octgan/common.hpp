#ifndef OCTGAN_COMMON_HPP
#define OCTGAN_COMMON_HPP

#include <cstdint>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace octgan {

using Extent = std::int64_t;
using Shape = std::vector<Extent>;

struct Error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct InvalidShape : Error { using Error::Error; };
struct ShapeMismatch : Error { using Error::Error; };
struct NotScalar : Error { using Error::Error; };
struct InvalidRate : Error { using Error::Error; };
struct InvalidConfig : Error { using Error::Error; };
struct NumericalFailure : Error { using Error::Error; };
struct EmptyDataset : Error { using Error::Error; };
struct InconsistentVolume : Error { using Error::Error; };
struct TooFewEyes : Error { using Error::Error; };
struct DecodeError : Error { using Error::Error; };
struct IoError : Error { using Error::Error; };
struct InvalidCheckpoint : Error { using Error::Error; };
struct DivergenceDetected : Error { using Error::Error; };
struct WindowTooLarge : Error { using Error::Error; };
struct ConfigError : Error { using Error::Error; };

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << ',';
        os << s[i];
    }
    os << ']';
    return os.str();
}

inline Extent shape_numel(const Shape& s) {
    if (s.empty()) throw InvalidShape("empty shape");
    Extent n = 1;
    for (Extent e : s) {
        if (e < 1) throw InvalidShape("non-positive extent in shape " + shape_str(s));
        n *= e;
    }
    return n;
}

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

// Derives an independent stream seed from a base seed and a salt.
inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t salt) {
    return splitmix64(splitmix64(seed) ^ splitmix64(salt + 0x1234567u));
}

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b) {
    return mix_seed(mix_seed(seed, a), b);
}

inline std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t a, std::uint64_t b, std::uint64_t c) {
    return mix_seed(mix_seed(seed, a, b), c);
}

enum class Mode { train, test };

}  // namespace octgan

#endif
