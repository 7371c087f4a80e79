#pragma once

#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include <json.hpp>

#include "driforge/embedding.hpp"
#include "driforge/errors.hpp"
#include "driforge/jsonl.hpp"

namespace driforge {

enum class ReductionMethod { none, pca, external_import };

inline std::string to_string(ReductionMethod m) {
    switch (m) {
    case ReductionMethod::none: return "none";
    case ReductionMethod::pca: return "pca";
    case ReductionMethod::external_import: return "external_import";
    }
    return "none";
}

struct ReductionSpec {
    ReductionMethod method = ReductionMethod::none;
    std::size_t target_dim = 50;
    std::string import_path;                   // required for external_import
    std::map<std::string, std::string> params; // provenance only (e.g. recorded UMAP settings)

    nlohmann::json to_json() const {
        return nlohmann::json{{"method", to_string(method)},
                              {"target_dim", target_dim},
                              {"import_path", import_path},
                              {"params", params}};
    }
};

namespace detail {

// Cyclic Jacobi eigendecomposition of a symmetric matrix (row-major n*n).
// Deterministic: fixed sweep order, fixed convergence threshold, no seeds.
// Returns eigenvalues and column eigenvectors (V[r*n + c] = component r of
// eigenvector c), unsorted.
inline void jacobi_eigen(std::vector<double>& a, std::size_t n, std::vector<double>& eigenvalues,
                         std::vector<double>& v) {
    v.assign(n * n, 0.0);
    for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;
    double frob2 = 0.0;
    for (double x : a) frob2 += x * x;
    const double tol = frob2 * 1e-30; // relative: (1e-15 * frobenius)^2
    const int max_sweeps = 64;
    for (int sweep = 0; sweep < max_sweeps; ++sweep) {
        double off = 0.0;
        for (std::size_t p = 0; p < n; ++p)
            for (std::size_t q = p + 1; q < n; ++q) off += a[p * n + q] * a[p * n + q];
        if (off <= tol) break;
        for (std::size_t p = 0; p < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                double apq = a[p * n + q];
                if (std::abs(apq) < 1e-300) continue;
                double app = a[p * n + p];
                double aqq = a[q * n + q];
                double theta = (aqq - app) / (2.0 * apq);
                double t = (theta >= 0 ? 1.0 : -1.0) / (std::abs(theta) + std::sqrt(theta * theta + 1.0));
                double c = 1.0 / std::sqrt(t * t + 1.0);
                double s = t * c;
                for (std::size_t k = 0; k < n; ++k) {
                    double akp = a[k * n + p];
                    double akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    double apk = a[p * n + k];
                    double aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
                for (std::size_t k = 0; k < n; ++k) {
                    double vkp = v[k * n + p];
                    double vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
            }
        }
    }
    eigenvalues.resize(n);
    for (std::size_t i = 0; i < n; ++i) eigenvalues[i] = a[i * n + i];
}

// Fixed sign convention so runs are byte-reproducible: the largest-magnitude
// component of each principal direction is positive (first index on ties).
inline void fix_sign(std::vector<double>& dir) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < dir.size(); ++i)
        if (std::abs(dir[i]) > std::abs(dir[best])) best = i;
    if (dir[best] < 0.0)
        for (auto& x : dir) x = -x;
}

} // namespace detail

// Mean-centered projection onto the top target_dim principal directions.
// For n < d the eigenproblem is solved on the n*n Gram matrix of the centered
// rows (same subspace, much smaller problem); otherwise on the d*d covariance.
inline std::vector<Vec> pca_reduce(const std::vector<Vec>& input, std::size_t target_dim) {
    const std::size_t n = input.size();
    if (n == 0) return {};
    const std::size_t d = input[0].size();
    if (target_dim > d)
        throw StageError("reduction_error", "target_dim " + std::to_string(target_dim) +
                                                " exceeds input dim " + std::to_string(d));
    if (n < target_dim)
        throw StageError("reduction_error", "pca needs at least target_dim (" + std::to_string(target_dim) +
                                                ") vectors, got " + std::to_string(n));

    std::vector<double> mean(d, 0.0);
    for (const auto& row : input) {
        if (row.size() != d) throw StageError("dimension_mismatch", "pca: ragged input matrix");
        for (std::size_t j = 0; j < d; ++j) mean[j] += row[j];
    }
    for (auto& m : mean) m /= static_cast<double>(n);

    std::vector<double> centered(n * d);
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = 0; j < d; ++j) centered[i * d + j] = static_cast<double>(input[i][j]) - mean[j];

    // directions: target_dim rows of length d, orthonormal.
    std::vector<std::vector<double>> directions;

    auto order_by_eigenvalue = [](const std::vector<double>& ev) {
        std::vector<std::size_t> idx(ev.size());
        std::iota(idx.begin(), idx.end(), 0);
        std::stable_sort(idx.begin(), idx.end(), [&](std::size_t a, std::size_t b) { return ev[a] > ev[b]; });
        return idx;
    };

    if (n < d) {
        // Snapshot PCA: eigenvectors of the Gram matrix G = C C^T give the
        // directions via u = C^T w / |C^T w|.
        std::vector<double> gram(n * n, 0.0);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t k = i; k < n; ++k) {
                double s = 0;
                for (std::size_t j = 0; j < d; ++j) s += centered[i * d + j] * centered[k * d + j];
                gram[i * n + k] = s;
                gram[k * n + i] = s;
            }
        std::vector<double> ev, w;
        detail::jacobi_eigen(gram, n, ev, w);
        auto idx = order_by_eigenvalue(ev);
        for (std::size_t r = 0; r < target_dim; ++r) {
            std::vector<double> dir(d, 0.0);
            if (r < idx.size() && ev[idx[r]] > 1e-12) {
                std::size_t col = idx[r];
                for (std::size_t i = 0; i < n; ++i) {
                    double wi = w[i * n + col];
                    for (std::size_t j = 0; j < d; ++j) dir[j] += wi * centered[i * d + j];
                }
                double nrm = std::sqrt(std::inner_product(dir.begin(), dir.end(), dir.begin(), 0.0));
                if (nrm > 0)
                    for (auto& x : dir) x /= nrm;
                detail::fix_sign(dir);
            }
            // Rank-deficient directions stay zero; they contribute nothing to
            // projected coordinates, which preserves pairwise distances.
            directions.push_back(std::move(dir));
        }
    } else {
        std::vector<double> cov(d * d, 0.0);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j) {
                double cij = centered[i * d + j];
                for (std::size_t k = j; k < d; ++k) cov[j * d + k] += cij * centered[i * d + k];
            }
        for (std::size_t j = 0; j < d; ++j)
            for (std::size_t k = 0; k < j; ++k) cov[j * d + k] = cov[k * d + j];
        std::vector<double> ev, v;
        detail::jacobi_eigen(cov, d, ev, v);
        auto idx = order_by_eigenvalue(ev);
        for (std::size_t r = 0; r < target_dim; ++r) {
            std::vector<double> dir(d);
            for (std::size_t j = 0; j < d; ++j) dir[j] = v[j * d + idx[r]];
            detail::fix_sign(dir);
            directions.push_back(std::move(dir));
        }
    }

    std::vector<Vec> out(n, Vec(target_dim));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t r = 0; r < target_dim; ++r) {
            double s = 0;
            for (std::size_t j = 0; j < d; ++j) s += centered[i * d + j] * directions[r][j];
            out[i][r] = static_cast<float>(s);
        }
    return out;
}

// Externally reduced vectors (e.g. UMAP run elsewhere), JSONL {"id", "vec"},
// aligned by id when ids are supplied, by file order otherwise.
inline std::vector<Vec> import_reduced(const std::string& path, std::size_t expected_count,
                                       const std::vector<std::string>& ids = {}) {
    std::vector<std::pair<std::string, Vec>> rows;
    jsonl::for_each(path, [&](std::size_t line_no, const nlohmann::json& rec) {
        try {
            rows.emplace_back(rec.at("id").get<std::string>(), rec.at("vec").get<Vec>());
        } catch (const std::exception& e) {
            throw ParseError(std::string("bad reduction record: ") + e.what(), line_no);
        }
    });
    if (rows.size() != expected_count)
        throw StageError("reduction_error", "import file has " + std::to_string(rows.size()) +
                                                " rows, expected " + std::to_string(expected_count));
    std::size_t dim = rows.empty() ? 0 : rows[0].second.size();
    for (const auto& [id, vec] : rows)
        if (vec.size() != dim) throw StageError("dimension_mismatch", "ragged import vectors");
    if (ids.empty()) {
        std::vector<Vec> out;
        out.reserve(rows.size());
        for (auto& [id, vec] : rows) out.push_back(std::move(vec));
        return out;
    }
    std::map<std::string, Vec> by_id;
    for (auto& [id, vec] : rows) by_id.emplace(id, std::move(vec));
    std::vector<Vec> out;
    out.reserve(ids.size());
    std::vector<std::string> missing;
    for (const auto& id : ids) {
        auto it = by_id.find(id);
        if (it == by_id.end()) {
            missing.push_back(id);
            continue;
        }
        out.push_back(it->second);
    }
    if (!missing.empty())
        throw StageError("reduction_error", "import file missing ids", missing);
    return out;
}

// Anchors and paragraphs must pass through this in ONE joint call so both
// live in the same reduced space.
inline std::vector<Vec> reduce(const std::vector<Vec>& matrix, const ReductionSpec& spec,
                               const std::vector<std::string>& ids = {}) {
    if (matrix.empty()) return {};
    std::size_t d = matrix[0].size();
    for (const auto& row : matrix)
        if (row.size() != d) throw StageError("dimension_mismatch", "reduce: ragged input matrix");
    switch (spec.method) {
    case ReductionMethod::none:
        return matrix;
    case ReductionMethod::pca:
        return pca_reduce(matrix, spec.target_dim);
    case ReductionMethod::external_import:
        if (spec.import_path.empty())
            throw ConfigError("reduction method external_import requires an import file");
        return import_reduced(spec.import_path, matrix.size(), ids);
    }
    return matrix;
}

} // namespace driforge
