// Copyright (C) 2026 The relayout Authors
// SPDX-License-Identifier: Apache-2.0

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "relayout/kernels.hpp"

namespace relayout::kernels {

namespace {

void check_candidates(const CandidateSets& c, std::size_t n_targets) {
    if (c.set_of_target.size() != n_targets)
        throw std::invalid_argument("candidate sets: one entry per target required");
    for (int s : c.set_of_target)
        if (s < -1 || s >= static_cast<int>(c.sets.size()))
            throw std::invalid_argument("candidate sets: set index out of range");
}

// Argmax of column j of a src x width block, over the candidate list (or all rows).
std::int64_t block_column_argmax(const double* block, std::size_t width, std::size_t j, std::size_t n_src,
                                 const std::vector<std::uint32_t>* cand) {
    if (cand == nullptr) {
        std::int64_t best = 0;
        double best_v = block[j];
        for (std::size_t i = 1; i < n_src; ++i) {
            const double v = block[i * width + j];
            if (v > best_v) {
                best_v = v;
                best = static_cast<std::int64_t>(i);
            }
        }
        return best;
    }
    std::int64_t best = kNoMatch;
    double best_v = 0.0;
    for (std::uint32_t i : *cand) {
        const double v = block[static_cast<std::size_t>(i) * width + j];
        if (best == kNoMatch || v > best_v || (v == best_v && static_cast<std::int64_t>(i) < best)) {
            best_v = v;
            best = i;
        }
    }
    return best;
}

}  // namespace

std::vector<double> row_norms(const Matrix& m) {
    std::vector<double> n(m.rows);
    const auto rows = static_cast<long long>(m.rows);
#pragma omp parallel for schedule(static)
    for (long long r = 0; r < rows; ++r) {
        double s = 0.0;
        const double* p = m.data.data() + r * m.cols;
        for (std::size_t c = 0; c < m.cols; ++c)
            s += p[c] * p[c];
        n[r] = std::sqrt(s);
    }
    return n;
}

Matrix cosine_similarity(const Matrix& src, const Matrix& tar, std::size_t tile, double eps) {
    if (src.cols != tar.cols)
        throw std::invalid_argument("cosine_similarity: descriptor dimensions differ");
    tile = std::max<std::size_t>(tile, 1);
    const auto ns = row_norms(src);
    const auto nt = row_norms(tar);
    Matrix sim(src.rows, tar.rows);
    const std::size_t k = src.cols;
    for (std::size_t j0 = 0; j0 < tar.rows; j0 += tile) {
        const std::size_t j1 = std::min(tar.rows, j0 + tile);
        const auto rows = static_cast<long long>(src.rows);
#pragma omp parallel for schedule(static)
        for (long long i = 0; i < rows; ++i) {
            const double* a = src.data.data() + i * k;
            for (std::size_t j = j0; j < j1; ++j) {
                const double* b = tar.data.data() + j * k;
                double dot = 0.0;
                for (std::size_t c = 0; c < k; ++c)
                    dot += a[c] * b[c];
                sim(i, j) = dot / (ns[i] * nt[j] + eps);
            }
        }
    }
    return sim;
}

std::vector<std::int64_t> column_argmax(const Matrix& sim) {
    std::vector<std::int64_t> out(sim.cols, 0);
    if (sim.rows == 0)
        throw std::invalid_argument("column_argmax: empty source set");
    const auto cols = static_cast<long long>(sim.cols);
#pragma omp parallel for schedule(static)
    for (long long j = 0; j < cols; ++j)
        out[j] = block_column_argmax(sim.data.data(), sim.cols, j, sim.rows, nullptr);
    return out;
}

std::vector<std::int64_t> restricted_column_argmax(const Matrix& sim, const CandidateSets& candidates) {
    check_candidates(candidates, sim.cols);
    std::vector<std::int64_t> out(sim.cols, kNoMatch);
    const auto cols = static_cast<long long>(sim.cols);
#pragma omp parallel for schedule(static)
    for (long long j = 0; j < cols; ++j) {
        const int s = candidates.set_of_target[j];
        out[j] = block_column_argmax(sim.data.data(), sim.cols, j, sim.rows,
                                     s < 0 ? nullptr : &candidates.sets[s]);
    }
    return out;
}

std::vector<std::int64_t> streaming_restricted_argmax(const Matrix& src, const Matrix& tar,
                                                      const CandidateSets& candidates, std::size_t tile, double eps) {
    if (src.cols != tar.cols)
        throw std::invalid_argument("streaming_restricted_argmax: descriptor dimensions differ");
    check_candidates(candidates, tar.rows);
    tile = std::max<std::size_t>(tile, 1);
    const auto ns = row_norms(src);
    const auto nt = row_norms(tar);
    const std::size_t k = src.cols;
    std::vector<std::int64_t> out(tar.rows, kNoMatch);
    std::vector<double> block;
    for (std::size_t j0 = 0; j0 < tar.rows; j0 += tile) {
        const std::size_t j1 = std::min(tar.rows, j0 + tile);
        const std::size_t width = j1 - j0;
        block.assign(src.rows * width, 0.0);
        const auto rows = static_cast<long long>(src.rows);
#pragma omp parallel for schedule(static)
        for (long long i = 0; i < rows; ++i) {
            const double* a = src.data.data() + i * k;
            for (std::size_t j = j0; j < j1; ++j) {
                const double* b = tar.data.data() + j * k;
                double dot = 0.0;
                for (std::size_t c = 0; c < k; ++c)
                    dot += a[c] * b[c];
                block[i * width + (j - j0)] = dot / (ns[i] * nt[j] + eps);
            }
        }
        const auto w = static_cast<long long>(width);
#pragma omp parallel for schedule(static)
        for (long long jj = 0; jj < w; ++jj) {
            const int s = candidates.set_of_target[j0 + jj];
            out[j0 + jj] = block_column_argmax(block.data(), width, jj, src.rows,
                                               s < 0 ? nullptr : &candidates.sets[s]);
        }
    }
    return out;
}

Matrix gather_rows(const Matrix& values, std::span<const std::int64_t> index) {
    Matrix out(index.size(), values.cols);
    const auto n = static_cast<long long>(index.size());
    for (auto i : index)
        if (i < 0 || static_cast<std::size_t>(i) >= values.rows)
            throw std::out_of_range("gather_rows: index outside source grid");
#pragma omp parallel for schedule(static)
    for (long long j = 0; j < n; ++j)
        std::copy_n(values.data.data() + index[j] * values.cols, values.cols, out.data.data() + j * values.cols);
    return out;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols != b.rows)
        throw std::invalid_argument("matmul: inner dimensions differ");
    Matrix out(a.rows, b.cols);
    const auto rows = static_cast<long long>(a.rows);
#pragma omp parallel for schedule(static)
    for (long long i = 0; i < rows; ++i) {
        double* o = out.data.data() + i * b.cols;
        for (std::size_t k = 0; k < a.cols; ++k) {
            const double av = a(i, k);
            const double* br = b.data.data() + k * b.cols;
            for (std::size_t j = 0; j < b.cols; ++j)
                o[j] += av * br[j];
        }
    }
    return out;
}

Matrix matmul_transpose_b(const Matrix& a, const Matrix& b) {
    if (a.cols != b.cols)
        throw std::invalid_argument("matmul_transpose_b: inner dimensions differ");
    Matrix out(a.rows, b.rows);
    const auto rows = static_cast<long long>(a.rows);
#pragma omp parallel for schedule(static)
    for (long long i = 0; i < rows; ++i) {
        const double* ar = a.data.data() + i * a.cols;
        for (std::size_t j = 0; j < b.rows; ++j) {
            const double* br = b.data.data() + j * b.cols;
            double s = 0.0;
            for (std::size_t k = 0; k < a.cols; ++k)
                s += ar[k] * br[k];
            out(i, j) = s;
        }
    }
    return out;
}

Matrix matmul_transpose_a(const Matrix& a, const Matrix& b) {
    if (a.rows != b.rows)
        throw std::invalid_argument("matmul_transpose_a: inner dimensions differ");
    Matrix out(a.cols, b.cols);
    const auto rows = static_cast<long long>(a.cols);
#pragma omp parallel for schedule(static)
    for (long long i = 0; i < rows; ++i) {
        double* o = out.data.data() + i * b.cols;
        for (std::size_t k = 0; k < a.rows; ++k) {
            const double av = a(k, i);
            const double* br = b.data.data() + k * b.cols;
            for (std::size_t j = 0; j < b.cols; ++j)
                o[j] += av * br[j];
        }
    }
    return out;
}

Matrix attention_probabilities(const Matrix& q, const Matrix& k, double scale) {
    if (q.cols != k.cols)
        throw std::invalid_argument("attention_probabilities: query/key dimensions differ");
    Matrix p(q.rows, k.rows);
    const auto rows = static_cast<long long>(q.rows);
#pragma omp parallel for schedule(static)
    for (long long i = 0; i < rows; ++i) {
        const double* qr = q.data.data() + i * q.cols;
        double* pr = p.data.data() + i * k.rows;
        double mx = -INFINITY;
        for (std::size_t j = 0; j < k.rows; ++j) {
            const double* kr = k.data.data() + j * k.cols;
            double s = 0.0;
            for (std::size_t c = 0; c < q.cols; ++c)
                s += qr[c] * kr[c];
            pr[j] = s * scale;
            mx = std::max(mx, pr[j]);
        }
        double sum = 0.0;
        for (std::size_t j = 0; j < k.rows; ++j) {
            pr[j] = std::exp(pr[j] - mx);
            sum += pr[j];
        }
        for (std::size_t j = 0; j < k.rows; ++j)
            pr[j] /= sum;
    }
    return p;
}

Matrix scaled_dot_attention(const Matrix& q, const Matrix& k, const Matrix& v) {
    if (k.rows != v.rows)
        throw std::invalid_argument("scaled_dot_attention: key/value counts differ");
    const Matrix p = attention_probabilities(q, k, 1.0 / std::sqrt(static_cast<double>(v.cols)));
    return matmul(p, v);
}

}  // namespace relayout::kernels
