#pragma once

#include <cstdint>
#include <string_view>

#include <boost/random/mersenne_twister.hpp>
#include <boost/random/normal_distribution.hpp>
#include <boost/random/uniform_01.hpp>

namespace crtsim {

// Boost's engines and distributions produce the same streams on every
// platform, which std::normal_distribution does not guarantee.
using Rng = boost::random::mt19937_64;

inline double standard_normal(Rng& rng) {
    boost::random::normal_distribution<double> dist(0.0, 1.0);
    return dist(rng);
}

inline double uniform01(Rng& rng) {
    boost::random::uniform_01<double> dist;
    return dist(rng);
}

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

inline std::uint64_t fnv1a(std::string_view text) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : text) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    return h;
}

// Seed for one replicate of one (scenario, theta) cell. Stable across
// platforms and independent of how work is scheduled.
inline std::uint64_t replicate_seed(std::uint64_t study_seed, std::string_view scenario_label,
                                    std::uint64_t theta_index, std::uint64_t replicate) {
    std::uint64_t h = splitmix64(study_seed);
    h = splitmix64(h ^ fnv1a(scenario_label));
    h = splitmix64(h ^ theta_index);
    h = splitmix64(h ^ replicate);
    return h;
}

}  // namespace crtsim
