#pragma once

// Independent oracles used to cross-check the implementation. Everything here
// deliberately takes the dumbest correct path (character scans, O(n^2) rank
// counting, closed-form identities) and shares no code with the library.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <vector>

namespace oracle {

// Character-wise substring scan, no library search functions.
inline bool naive_contains(const std::string& haystack, const std::string& needle) {
    if (needle.empty()) return true;
    if (needle.size() > haystack.size()) return false;
    for (std::size_t i = 0; i + needle.size() <= haystack.size(); ++i) {
        bool all = true;
        for (std::size_t j = 0; j < needle.size(); ++j) {
            if (haystack[i + j] != needle[j]) {
                all = false;
                break;
            }
        }
        if (all) return true;
    }
    return false;
}

// Tie-free closed form: 1 - 6 sum(d^2) / (n (n^2 - 1)). Valid only when both
// vectors are permutations (distinct values).
inline double spearman_tie_free(const std::vector<double>& x, const std::vector<double>& y) {
    auto rank_of = [](const std::vector<double>& v) {
        std::vector<double> r(v.size());
        for (std::size_t i = 0; i < v.size(); ++i) {
            std::size_t less = 0;
            for (std::size_t j = 0; j < v.size(); ++j)
                if (v[j] < v[i]) ++less;
            r[i] = static_cast<double>(less) + 1.0;
        }
        return r;
    };
    auto rx = rank_of(x);
    auto ry = rank_of(y);
    double n = static_cast<double>(x.size());
    double sum_d2 = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        double d = rx[i] - ry[i];
        sum_d2 += d * d;
    }
    return 1.0 - 6.0 * sum_d2 / (n * (n * n - 1.0));
}

// O(n^2) counting definition of average ranks: rank_i = #{v_j < v_i} + (#{v_j == v_i} + 1) / 2.
inline std::vector<double> counting_ranks(const std::vector<double>& v) {
    std::vector<double> r(v.size());
    for (std::size_t i = 0; i < v.size(); ++i) {
        std::size_t less = 0, equal = 0;
        for (std::size_t j = 0; j < v.size(); ++j) {
            if (v[j] < v[i]) ++less;
            else if (v[j] == v[i]) ++equal;
        }
        r[i] = static_cast<double>(less) + (static_cast<double>(equal) + 1.0) / 2.0;
    }
    return r;
}

// Textbook two-pass Pearson.
inline double pearson_textbook(const std::vector<double>& x, const std::vector<double>& y) {
    double n = static_cast<double>(x.size());
    double mx = 0, my = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= n;
    my /= n;
    double num = 0, dx2 = 0, dy2 = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        num += (x[i] - mx) * (y[i] - my);
        dx2 += (x[i] - mx) * (x[i] - mx);
        dy2 += (y[i] - my) * (y[i] - my);
    }
    return num / std::sqrt(dx2 * dy2);
}

// Spearman via counting ranks + textbook Pearson (handles ties).
inline double spearman_counting(const std::vector<double>& x, const std::vector<double>& y) {
    return pearson_textbook(counting_ranks(x), counting_ranks(y));
}

// All permutations of (1..n) as double vectors.
inline std::vector<std::vector<double>> permutations_of(std::size_t n) {
    std::vector<double> base(n);
    for (std::size_t i = 0; i < n; ++i) base[i] = static_cast<double>(i + 1);
    std::vector<std::vector<double>> out;
    do {
        out.push_back(base);
    } while (std::next_permutation(base.begin(), base.end()));
    return out;
}

// Euclidean distance between two real vectors.
template <typename V>
inline double euclidean(const V& a, const V& b) {
    double s = 0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        double d = static_cast<double>(a[i]) - static_cast<double>(b[i]);
        s += d * d;
    }
    return std::sqrt(s);
}

} // namespace oracle
