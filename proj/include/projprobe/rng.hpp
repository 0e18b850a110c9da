#pragma once

#include <cstdint>
#include <random>
#include <string_view>

#include "projprobe/mat.hpp"

namespace projprobe {

// Single root-seed reproducibility: every consumer (dataset order, attack
// init noise, surrogate init, ...) derives its own stream by hashing the
// root seed with a purpose tag. FNV-1a over the tag, folded into the seed.
inline std::uint64_t seed_split(std::uint64_t root, std::string_view tag) {
    std::uint64_t h = 14695981039346656037ull ^ root;
    for (char c : tag) {
        h ^= static_cast<std::uint8_t>(c);
        h *= 1099511628211ull;
    }
    h ^= root * 0x9e3779b97f4a7c15ull;
    return h;
}

class Rng {
public:
    explicit Rng(std::uint64_t seed) : gen_(seed) {}

    double uniform(double lo, double hi) {
        return std::uniform_real_distribution<double>(lo, hi)(gen_);
    }
    double normal(double mean = 0.0, double stddev = 1.0) {
        return std::normal_distribution<double>(mean, stddev)(gen_);
    }
    std::uint64_t next_u64() { return gen_(); }
    int uniform_int(int lo, int hi) {  // inclusive
        return std::uniform_int_distribution<int>(lo, hi)(gen_);
    }

    Mat normal_mat(int rows, int cols, double stddev) {
        Mat m(rows, cols);
        for (double& v : m.vec()) v = normal(0.0, stddev);
        return m;
    }
    Mat uniform_mat(int rows, int cols, double lo, double hi) {
        Mat m(rows, cols);
        for (double& v : m.vec()) v = uniform(lo, hi);
        return m;
    }

    template <typename It>
    void shuffle(It first, It last) {
        std::shuffle(first, last, gen_);
    }

    std::mt19937_64& engine() { return gen_; }

private:
    std::mt19937_64 gen_;
};

}  // namespace projprobe
