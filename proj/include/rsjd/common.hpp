#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

namespace rsjd {

// Exit-code contract shared with the CLI: 2 = bad configuration,
// 3 = numerical failure (blow-up, divergence, singular solve).
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct ModelError : std::runtime_error {
    using std::runtime_error::runtime_error;
};
struct SolverError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

inline void require(bool cond, const std::string& msg) {
    if (!cond) throw ConfigError(msg);
}

// Deterministic mean: fixed 1024-element blocks summed in index order, so the
// result is bitwise identical no matter how the fill loop was scheduled.
inline double block_sum(const double* v, std::size_t n) {
    constexpr std::size_t B = 1024;
    double total = 0.0;
    for (std::size_t b = 0; b < n; b += B) {
        double s = 0.0;
        std::size_t end = std::min(n, b + B);
        for (std::size_t i = b; i < end; ++i) s += v[i];
        total += s;
    }
    return total;
}

inline double block_sum(const std::vector<double>& v) { return block_sum(v.data(), v.size()); }

inline double mean(const std::vector<double>& v) {
    if (v.empty()) return 0.0;
    return block_sum(v) / double(v.size());
}

struct MeanVar {
    double mean = 0.0;
    double var = 0.0;     // unbiased sample variance
    double stderr_ = 0.0; // sqrt(var / n)
    std::size_t n = 0;
};

inline MeanVar mean_var(const std::vector<double>& v) {
    MeanVar r;
    r.n = v.size();
    if (r.n == 0) return r;
    r.mean = mean(v);
    std::vector<double> sq(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
        double d = v[i] - r.mean;
        sq[i] = d * d;
    }
    r.var = r.n > 1 ? block_sum(sq) / double(r.n - 1) : 0.0;
    r.stderr_ = std::sqrt(r.var / double(r.n));
    return r;
}

// log(mean(exp(x))) with max-subtraction; never overflows for finite input.
inline double log_mean_exp(const std::vector<double>& x) {
    if (x.empty()) throw ConfigError("log_mean_exp: empty sample");
    double m = *std::max_element(x.begin(), x.end());
    if (!std::isfinite(m)) return m;
    std::vector<double> e(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) e[i] = std::exp(x[i] - m);
    return m + std::log(block_sum(e) / double(x.size()));
}

inline bool finite(double x) { return std::isfinite(x); }

} // namespace rsjd
