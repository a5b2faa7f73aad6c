#pragma once

#include <cmath>
#include <cstdint>
#include <random>
#include <sstream>
#include <string>

#include "fdm/common.hpp"

namespace fdm {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

// Seeded random stream with hand-rolled distributions. std::*_distribution is
// implementation-defined, which would break bit-reproducible checkpoints, so
// the mapping from engine output to samples is spelled out here.
class RngStream {
  public:
    explicit RngStream(std::uint64_t seed = 0) : eng_(seed), seed_(seed) {}

    // Derive an independent stream, e.g. one per image index. Based on the
    // construction seed, not the current engine position.
    RngStream substream(std::uint64_t index) const {
        return RngStream(splitmix64(seed_ ^ splitmix64(index)));
    }

    static RngStream keyed(std::uint64_t seed, const std::string& name) {
        return RngStream(splitmix64(seed ^ fnv1a(name)));
    }

    std::uint64_t next_u64() { return eng_(); }

    // Uniform in [0,1) with 53 random bits.
    double uniform01() { return double(eng_() >> 11) * 0x1.0p-53; }

    // Uniform integer in [lo, hi], rejection sampled.
    std::int64_t uniform_int(std::int64_t lo, std::int64_t hi) {
        if (lo > hi) throw ContractError("uniform_int: lo > hi");
        std::uint64_t range = std::uint64_t(hi - lo) + 1;
        if (range == 0) return std::int64_t(eng_());  // full 64-bit range
        std::uint64_t limit = UINT64_MAX - UINT64_MAX % range;
        std::uint64_t x;
        do {
            x = eng_();
        } while (x >= limit);
        return lo + std::int64_t(x % range);
    }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform01(); }

    // Box-Muller; one fresh pair of engine draws per sample keeps the stream
    // position independent of call parity.
    double normal() {
        double u1 = uniform01();
        double u2 = uniform01();
        while (u1 <= 0.0) u1 = uniform01();
        return std::sqrt(-2.0 * std::log(u1)) * std::cos(6.283185307179586476925286766559 * u2);
    }

    std::string serialize() const {
        std::ostringstream os;
        os << seed_ << ' ' << eng_;
        return os.str();
    }

    static RngStream deserialize(const std::string& s) {
        RngStream r;
        std::istringstream is(s);
        is >> r.seed_ >> r.eng_;
        if (!is) throw IoError("RngStream: malformed serialized state");
        return r;
    }

    bool operator==(const RngStream& o) const { return seed_ == o.seed_ && eng_ == o.eng_; }

  private:
    std::mt19937_64 eng_;
    std::uint64_t seed_ = 0;
};

}  // namespace fdm
