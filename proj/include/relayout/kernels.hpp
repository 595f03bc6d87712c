// Copyright (C) 2026 The relayout Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "relayout/tensor.hpp"

// Data-parallel inner loops. Every kernel in `relayout::kernels` is OpenMP
// parallel over independent output rows/columns and performs its reductions in
// the same order as the serial version in `relayout::kernels::reference`, so
// both produce bit-identical results for any thread count or tile size.

namespace relayout::kernels {

inline constexpr double kCosineEps = 1e-8;

/// Sentinel for "no candidate" in the restricted argmax kernels.
inline constexpr std::int64_t kNoMatch = -1;

/// Candidate restriction for one target location: index into `sets`, or -1
/// for an unrestricted search over all sources.
struct CandidateSets {
    std::vector<int> set_of_target;
    std::vector<std::vector<std::uint32_t>> sets;
};

std::vector<double> row_norms(const Matrix& m);

/// Sim(i, j) = <src_i, tar_j> / (|src_i| |tar_j| + eps); result is src.rows x tar.rows.
/// Target columns are produced in blocks of `tile`.
Matrix cosine_similarity(const Matrix& src, const Matrix& tar, std::size_t tile = 256, double eps = kCosineEps);

/// Per target column: argmax over source rows, lowest index on ties.
std::vector<std::int64_t> column_argmax(const Matrix& sim);

/// Per target column: argmax over the candidate set assigned to that target.
/// Empty candidate sets yield kNoMatch.
std::vector<std::int64_t> restricted_column_argmax(const Matrix& sim, const CandidateSets& candidates);

/// Same as restricted_column_argmax(cosine_similarity(src, tar), candidates)
/// without materialising the full matrix: only a src.rows x tile block lives
/// at a time.
std::vector<std::int64_t> streaming_restricted_argmax(const Matrix& src, const Matrix& tar,
                                                      const CandidateSets& candidates, std::size_t tile = 256,
                                                      double eps = kCosineEps);

/// out.row(j) = values.row(index[j]).
Matrix gather_rows(const Matrix& values, std::span<const std::int64_t> index);

Matrix matmul(const Matrix& a, const Matrix& b);              // a * b
Matrix matmul_transpose_b(const Matrix& a, const Matrix& b);  // a * b^T
Matrix matmul_transpose_a(const Matrix& a, const Matrix& b);  // a^T * b

/// Row-wise softmax of scale * q k^T.
Matrix attention_probabilities(const Matrix& q, const Matrix& k, double scale);

/// softmax(q k^T / sqrt(v.cols)) v
Matrix scaled_dot_attention(const Matrix& q, const Matrix& k, const Matrix& v);

namespace reference {

std::vector<double> row_norms(const Matrix& m);
Matrix cosine_similarity(const Matrix& src, const Matrix& tar, double eps = kCosineEps);
std::vector<std::int64_t> column_argmax(const Matrix& sim);
std::vector<std::int64_t> restricted_column_argmax(const Matrix& sim, const CandidateSets& candidates);
Matrix gather_rows(const Matrix& values, std::span<const std::int64_t> index);
Matrix matmul(const Matrix& a, const Matrix& b);
Matrix matmul_transpose_b(const Matrix& a, const Matrix& b);
Matrix matmul_transpose_a(const Matrix& a, const Matrix& b);
Matrix attention_probabilities(const Matrix& q, const Matrix& k, double scale);
Matrix scaled_dot_attention(const Matrix& q, const Matrix& k, const Matrix& v);

}  // namespace reference

}  // namespace relayout::kernels
