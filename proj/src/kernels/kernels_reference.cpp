// Copyright (C) 2026 The relayout Authors
// SPDX-License-Identifier: Apache-2.0

// Plain serial loops, one output element at a time. Kept as the reference the
// OpenMP kernels are tested against.

#include <cmath>
#include <stdexcept>

#include "relayout/kernels.hpp"

namespace relayout::kernels::reference {

std::vector<double> row_norms(const Matrix& m) {
    std::vector<double> n(m.rows);
    for (std::size_t r = 0; r < m.rows; ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < m.cols; ++c)
            s += m(r, c) * m(r, c);
        n[r] = std::sqrt(s);
    }
    return n;
}

Matrix cosine_similarity(const Matrix& src, const Matrix& tar, double eps) {
    if (src.cols != tar.cols)
        throw std::invalid_argument("cosine_similarity: descriptor dimensions differ");
    const auto ns = row_norms(src);
    const auto nt = row_norms(tar);
    Matrix sim(src.rows, tar.rows);
    for (std::size_t i = 0; i < src.rows; ++i)
        for (std::size_t j = 0; j < tar.rows; ++j) {
            double dot = 0.0;
            for (std::size_t c = 0; c < src.cols; ++c)
                dot += src(i, c) * tar(j, c);
            sim(i, j) = dot / (ns[i] * nt[j] + eps);
        }
    return sim;
}

std::vector<std::int64_t> column_argmax(const Matrix& sim) {
    if (sim.rows == 0)
        throw std::invalid_argument("column_argmax: empty source set");
    std::vector<std::int64_t> out(sim.cols, 0);
    for (std::size_t j = 0; j < sim.cols; ++j) {
        std::size_t best = 0;
        for (std::size_t i = 1; i < sim.rows; ++i)
            if (sim(i, j) > sim(best, j))
                best = i;
        out[j] = static_cast<std::int64_t>(best);
    }
    return out;
}

std::vector<std::int64_t> restricted_column_argmax(const Matrix& sim, const CandidateSets& candidates) {
    if (candidates.set_of_target.size() != sim.cols)
        throw std::invalid_argument("candidate sets: one entry per target required");
    std::vector<std::int64_t> out(sim.cols, kNoMatch);
    for (std::size_t j = 0; j < sim.cols; ++j) {
        const int s = candidates.set_of_target[j];
        if (s < 0) {
            std::size_t best = 0;
            for (std::size_t i = 1; i < sim.rows; ++i)
                if (sim(i, j) > sim(best, j))
                    best = i;
            out[j] = static_cast<std::int64_t>(best);
            continue;
        }
        for (std::uint32_t i : candidates.sets.at(s)) {
            if (out[j] == kNoMatch || sim(i, j) > sim(out[j], j) || (sim(i, j) == sim(out[j], j) && i < out[j]))
                out[j] = i;
        }
    }
    return out;
}

Matrix gather_rows(const Matrix& values, std::span<const std::int64_t> index) {
    Matrix out(index.size(), values.cols);
    for (std::size_t j = 0; j < index.size(); ++j) {
        if (index[j] < 0 || static_cast<std::size_t>(index[j]) >= values.rows)
            throw std::out_of_range("gather_rows: index outside source grid");
        for (std::size_t c = 0; c < values.cols; ++c)
            out(j, c) = values(index[j], c);
    }
    return out;
}

Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols != b.rows)
        throw std::invalid_argument("matmul: inner dimensions differ");
    Matrix out(a.rows, b.cols);
    for (std::size_t i = 0; i < a.rows; ++i)
        for (std::size_t j = 0; j < b.cols; ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < a.cols; ++k)
                s += a(i, k) * b(k, j);
            out(i, j) = s;
        }
    return out;
}

Matrix matmul_transpose_b(const Matrix& a, const Matrix& b) {
    if (a.cols != b.cols)
        throw std::invalid_argument("matmul_transpose_b: inner dimensions differ");
    Matrix out(a.rows, b.rows);
    for (std::size_t i = 0; i < a.rows; ++i)
        for (std::size_t j = 0; j < b.rows; ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < a.cols; ++k)
                s += a(i, k) * b(j, k);
            out(i, j) = s;
        }
    return out;
}

Matrix matmul_transpose_a(const Matrix& a, const Matrix& b) {
    if (a.rows != b.rows)
        throw std::invalid_argument("matmul_transpose_a: inner dimensions differ");
    Matrix out(a.cols, b.cols);
    for (std::size_t i = 0; i < a.cols; ++i)
        for (std::size_t j = 0; j < b.cols; ++j) {
            double s = 0.0;
            for (std::size_t k = 0; k < a.rows; ++k)
                s += a(k, i) * b(k, j);
            out(i, j) = s;
        }
    return out;
}

Matrix attention_probabilities(const Matrix& q, const Matrix& k, double scale) {
    if (q.cols != k.cols)
        throw std::invalid_argument("attention_probabilities: query/key dimensions differ");
    Matrix p(q.rows, k.rows);
    for (std::size_t i = 0; i < q.rows; ++i) {
        double mx = -INFINITY;
        for (std::size_t j = 0; j < k.rows; ++j) {
            double s = 0.0;
            for (std::size_t c = 0; c < q.cols; ++c)
                s += q(i, c) * k(j, c);
            p(i, j) = s * scale;
            if (p(i, j) > mx)
                mx = p(i, j);
        }
        double sum = 0.0;
        for (std::size_t j = 0; j < k.rows; ++j) {
            p(i, j) = std::exp(p(i, j) - mx);
            sum += p(i, j);
        }
        for (std::size_t j = 0; j < k.rows; ++j)
            p(i, j) /= sum;
    }
    return p;
}

Matrix scaled_dot_attention(const Matrix& q, const Matrix& k, const Matrix& v) {
    if (k.rows != v.rows)
        throw std::invalid_argument("scaled_dot_attention: key/value counts differ");
    return matmul(attention_probabilities(q, k, 1.0 / std::sqrt(static_cast<double>(v.cols))), v);
}

}  // namespace relayout::kernels::reference
