#pragma once

#include "itsr/abi.hpp"

#include <cstddef>
#include <span>

#include "itsr/tensor.hpp"

// Dense inner loops behind the tensor ops and the archive scan.
//
// Each kernel has a serial reference and an OpenMP version. The parallel
// versions partition output rows across threads and keep the per-element
// accumulation order of the serial loop, so both produce bitwise-identical
// results; tests assert that.
namespace itsr::inline ITSR_ABI::kernels {

// C[m x n] += A[m x k] * B[k x n]
void gemm_nn_serial(const Real* a, const Real* b, Real* c, std::size_t m,
                    std::size_t k, std::size_t n);
void gemm_nn_parallel(const Real* a, const Real* b, Real* c, std::size_t m,
                      std::size_t k, std::size_t n);

// C[m x n] += A[m x k] * B^T, B stored [n x k]
void gemm_nt_serial(const Real* a, const Real* b, Real* c, std::size_t m,
                    std::size_t k, std::size_t n);
void gemm_nt_parallel(const Real* a, const Real* b, Real* c, std::size_t m,
                      std::size_t k, std::size_t n);

// C[m x n] += A^T * B, A stored [k x m], B stored [k x n]
void gemm_tn_serial(const Real* a, const Real* b, Real* c, std::size_t m,
                    std::size_t k, std::size_t n);
void gemm_tn_parallel(const Real* a, const Real* b, Real* c, std::size_t m,
                      std::size_t k, std::size_t n);

// Dispatchers used by the ops: parallel above a work threshold.
void gemm_nn(const Real* a, const Real* b, Real* c, std::size_t m,
             std::size_t k, std::size_t n);
void gemm_nt(const Real* a, const Real* b, Real* c, std::size_t m,
             std::size_t k, std::size_t n);
void gemm_tn(const Real* a, const Real* b, Real* c, std::size_t m,
             std::size_t k, std::size_t n);

/// Minimum m*k*n before the dispatchers go parallel.
inline constexpr std::size_t kParallelWork = std::size_t{1} << 16;

// Cosine similarity of `query` against every row of `rows` [count x dim].
// `row_norms` holds the Euclidean norm of each row. Accumulates in double.
void cosine_scan_serial(std::span<const Real> rows, std::span<const double> row_norms,
                        std::span<const Real> query, double query_norm,
                        std::span<double> out);
void cosine_scan_parallel(std::span<const Real> rows,
                          std::span<const double> row_norms,
                          std::span<const Real> query, double query_norm,
                          std::span<double> out);

double l2_norm(std::span<const Real> v);

}  // namespace itsr::kernels
