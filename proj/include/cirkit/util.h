#pragma once

#include <cstdint>
#include <functional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace cirkit {

// FNV-1a, used for token bucketing and seed-stream derivation.
inline uint64_t fnv1a(std::string_view s, uint64_t h = 0xcbf29ce484222325ull) {
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ull;
    }
    return h;
}

inline uint64_t hash_combine(uint64_t a, uint64_t b) {
    return fnv1a(std::string_view(reinterpret_cast<const char*>(&b), sizeof(b)), a ^ 0x9e3779b97f4a7c15ull);
}

// Deterministic RNG. mt19937_64 gives the same stream on every platform and
// the normal variate is produced by our own Box-Muller so no implementation
// differences in std::normal_distribution can leak in.
class Rng {
public:
    explicit Rng(uint64_t seed) : gen_(seed) {}

    uint64_t next_u64() { return gen_(); }

    // uniform in [0, 1)
    double uniform() { return static_cast<double>(gen_() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // uniform integer in [0, n)
    uint64_t uniform_int(uint64_t n) {
        // rejection sampling to avoid modulo bias
        uint64_t limit = UINT64_MAX - UINT64_MAX % n;
        uint64_t x;
        do {
            x = gen_();
        } while (x >= limit);
        return x % n;
    }

    double normal() {
        if (have_spare_) {
            have_spare_ = false;
            return spare_;
        }
        double u1, u2;
        do {
            u1 = uniform();
        } while (u1 <= 0.0);
        u2 = uniform();
        double mag = std::sqrt(-2.0 * std::log(u1));
        double two_pi_u2 = 2.0 * 3.14159265358979323846 * u2;
        spare_ = mag * std::sin(two_pi_u2);
        have_spare_ = true;
        return mag * std::cos(two_pi_u2);
    }

    double normal(double mean, double stddev) { return mean + stddev * normal(); }

    template <typename T>
    void shuffle(std::vector<T>& v) {
        for (size_t i = v.size(); i > 1; --i) {
            size_t j = uniform_int(i);
            std::swap(v[i - 1], v[j]);
        }
    }

private:
    std::mt19937_64 gen_;
    bool have_spare_ = false;
    double spare_ = 0.0;
};

// Derives an independent RNG stream from a base seed and a string key, so
// per-group / per-pair streams are stable under any processing order.
inline Rng derive_rng(uint64_t seed, std::string_view key) {
    return Rng(hash_combine(seed, fnv1a(key)));
}

std::string base64_encode(const unsigned char* data, size_t len);
std::vector<unsigned char> base64_decode(std::string_view text);

// Lowercased alphanumeric tokens; everything else is a separator.
std::vector<std::string> tokenize_words(std::string_view text);

// Shortest round-trip decimal representation, deterministic across runs.
std::string format_double(double v);

std::string read_file(const std::string& path);

// Writes to "<path>.tmp" then renames, so readers never observe partial files.
void atomic_write_file(const std::string& path, const std::string& content);

// Calls fn(line_number, line) for each line; line numbers start at 1.
void for_each_line(const std::string& path, const std::function<void(size_t, const std::string&)>& fn);

}  // namespace cirkit
