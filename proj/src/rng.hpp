#ifndef LW_RNG_HPP
#define LW_RNG_HPP

#include <cmath>
#include <cstdint>
#include <random>

namespace lw {

// splitmix64; used to derive independent substream seeds from a master seed.
inline uint64_t mix_seed(uint64_t seed) {
    uint64_t z = seed + 0x9e3779b97f4a7c15ull;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ull;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebull;
    return z ^ (z >> 31);
}

inline uint64_t substream_seed(uint64_t seed, uint64_t tag, uint64_t index = 0) {
    return mix_seed(mix_seed(seed ^ (tag * 0x9e3779b97f4a7c15ull)) + index);
}

// Stream tags; fixed so outputs are reproducible across builds.
namespace stream {
constexpr uint64_t stage_s_noise = 0x5331;
constexpr uint64_t stage_l_noise = 0x4c31;
constexpr uint64_t train = 0x7452;
constexpr uint64_t scene = 0x5347;
constexpr uint64_t pairs = 0x5052;
constexpr uint64_t enhancer = 0x454e;
constexpr uint64_t initopt = 0x494f;
constexpr uint64_t metrics = 0x4d45;
constexpr uint64_t model_init = 0x4d49;
}  // namespace stream

// mt19937_64 with an explicit Box-Muller normal so the same bits come out on
// every platform (std::normal_distribution is implementation-defined).
class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    uint64_t next_u64() { return gen_(); }

    // uniform in [0, 1)
    double uniform() {
        return static_cast<double>(gen_() >> 11) * 0x1.0p-53;
    }

    // uniform in [lo, hi)
    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [0, n)
    uint64_t uniform_index(uint64_t n) {
        // modulo bias is irrelevant at our scales but cheap to avoid
        uint64_t threshold = (~n + 1) % n;
        for (;;) {
            uint64_t r = gen_();
            if (r >= threshold) {
                return r % n;
            }
        }
    }

    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1 = 0.0;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        double u2 = uniform();
        double radius = std::sqrt(-2.0 * std::log(u1));
        double angle = 2.0 * 3.14159265358979323846 * u2;
        spare_ = radius * std::sin(angle);
        have_spare_ = true;
        return radius * std::cos(angle);
    }

private:
    std::mt19937_64 gen_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace lw

#endif
