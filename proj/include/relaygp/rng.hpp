#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <random>

namespace relaygp {

// splitmix64 step, used to turn arbitrary 64-bit ids into well-mixed seeds.
inline std::uint64_t splitmix64(std::uint64_t& state) noexcept {
    std::uint64_t z = (state += 0x9e3779b97f4a7c15ULL);
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

// Deterministic random stream. mt19937_64 supplies the raw bits; the
// uniform/normal transforms are written out here because the standard
// distribution classes are free to differ between library implementations,
// which would break bit-reproducible experiment outputs.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    // Derives an independent seed from a master seed and a path of ids
    // (e.g. {purpose, trial, relay}). Different paths never collide in
    // practice thanks to the splitmix avalanche.
    static std::uint64_t derive_seed(std::uint64_t master,
                                     std::initializer_list<std::uint64_t> path) {
        std::uint64_t s = master;
        (void)splitmix64(s);
        for (std::uint64_t id : path) {
            s ^= 0x9e3779b97f4a7c15ULL + id;
            (void)splitmix64(s);
        }
        return splitmix64(s);
    }

    static Rng substream(std::uint64_t master, std::initializer_list<std::uint64_t> path) {
        return Rng(derive_seed(master, path));
    }

    std::uint64_t next_u64() { return gen_(); }

    // Uniform on [0, 1), 53-bit resolution.
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    double uniform(double a, double b) { return a + (b - a) * uniform(); }

    // Uniform integer on [0, n), rejection-sampled so the map is exact.
    std::uint64_t uniform_int(std::uint64_t n) {
        const std::uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        std::uint64_t x;
        do {
            x = gen_();
        } while (x >= limit);
        return x % n;
    }

    // Standard normal via Box-Muller; the second value of each pair is cached.
    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        const double u1 = 1.0 - uniform();  // (0, 1], keeps log finite
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double a = 6.283185307179586476925286766559 * u2;
        spare_ = r * std::sin(a);
        have_spare_ = true;
        return r * std::cos(a);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    // Rayleigh with E[X^2] = 2*scale^2 (scale = 1/sqrt(2) gives unit mean-square).
    double rayleigh(double scale) {
        const double u = 1.0 - uniform();
        return scale * std::sqrt(-2.0 * std::log(u));
    }

private:
    std::mt19937_64 gen_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

}  // namespace relaygp
