#include "itsr/kernels.hpp"

#include <cmath>
#include <cstdint>

namespace itsr::inline ITSR_ABI::kernels {

// Row loops are written once and instantiated with and without the OpenMP
// pragma; `Parallel` only decides whether rows are spread over threads.

namespace {

template <bool Parallel>
void gemm_nn_impl(const Real* a, const Real* b, Real* c, std::size_t m,
                  std::size_t k, std::size_t n) {
  const auto rows = static_cast<std::int64_t>(m);
#pragma omp parallel for schedule(static) if (Parallel)
  for (std::int64_t i = 0; i < rows; ++i) {
    Real* ci = c + i * n;
    const Real* ai = a + i * k;
    for (std::size_t p = 0; p < k; ++p) {
      const Real aip = ai[p];
      if (aip == Real(0)) continue;
      const Real* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
    }
  }
}

template <bool Parallel>
void gemm_nt_impl(const Real* a, const Real* b, Real* c, std::size_t m,
                  std::size_t k, std::size_t n) {
  const auto rows = static_cast<std::int64_t>(m);
#pragma omp parallel for schedule(static) if (Parallel)
  for (std::int64_t i = 0; i < rows; ++i) {
    const Real* ai = a + i * k;
    Real* ci = c + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const Real* bj = b + j * k;
      Real acc = 0;
      for (std::size_t p = 0; p < k; ++p) acc += ai[p] * bj[p];
      ci[j] += acc;
    }
  }
}

template <bool Parallel>
void gemm_tn_impl(const Real* a, const Real* b, Real* c, std::size_t m,
                  std::size_t k, std::size_t n) {
  const auto rows = static_cast<std::int64_t>(m);
#pragma omp parallel for schedule(static) if (Parallel)
  for (std::int64_t i = 0; i < rows; ++i) {
    Real* ci = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const Real api = a[p * m + i];
      if (api == Real(0)) continue;
      const Real* bp = b + p * n;
      for (std::size_t j = 0; j < n; ++j) ci[j] += api * bp[j];
    }
  }
}

template <bool Parallel>
void cosine_scan_impl(std::span<const Real> rows, std::span<const double> row_norms,
                      std::span<const Real> query, double query_norm,
                      std::span<double> out) {
  const std::size_t dim = query.size();
  const auto count = static_cast<std::int64_t>(row_norms.size());
#pragma omp parallel for schedule(static) if (Parallel)
  for (std::int64_t r = 0; r < count; ++r) {
    const Real* row = rows.data() + r * dim;
    double dot = 0.0;
    for (std::size_t j = 0; j < dim; ++j) {
      dot += static_cast<double>(row[j]) * static_cast<double>(query[j]);
    }
    out[r] = dot / (row_norms[r] * query_norm);
  }
}

}  // namespace

void gemm_nn_serial(const Real* a, const Real* b, Real* c, std::size_t m,
                    std::size_t k, std::size_t n) {
  gemm_nn_impl<false>(a, b, c, m, k, n);
}
void gemm_nn_parallel(const Real* a, const Real* b, Real* c, std::size_t m,
                      std::size_t k, std::size_t n) {
  gemm_nn_impl<true>(a, b, c, m, k, n);
}
void gemm_nt_serial(const Real* a, const Real* b, Real* c, std::size_t m,
                    std::size_t k, std::size_t n) {
  gemm_nt_impl<false>(a, b, c, m, k, n);
}
void gemm_nt_parallel(const Real* a, const Real* b, Real* c, std::size_t m,
                      std::size_t k, std::size_t n) {
  gemm_nt_impl<true>(a, b, c, m, k, n);
}
void gemm_tn_serial(const Real* a, const Real* b, Real* c, std::size_t m,
                    std::size_t k, std::size_t n) {
  gemm_tn_impl<false>(a, b, c, m, k, n);
}
void gemm_tn_parallel(const Real* a, const Real* b, Real* c, std::size_t m,
                      std::size_t k, std::size_t n) {
  gemm_tn_impl<true>(a, b, c, m, k, n);
}

void gemm_nn(const Real* a, const Real* b, Real* c, std::size_t m,
             std::size_t k, std::size_t n) {
  if (m * k * n >= kParallelWork && m > 1) {
    gemm_nn_parallel(a, b, c, m, k, n);
  } else {
    gemm_nn_serial(a, b, c, m, k, n);
  }
}

void gemm_nt(const Real* a, const Real* b, Real* c, std::size_t m,
             std::size_t k, std::size_t n) {
  if (m * k * n >= kParallelWork && m > 1) {
    gemm_nt_parallel(a, b, c, m, k, n);
  } else {
    gemm_nt_serial(a, b, c, m, k, n);
  }
}

void gemm_tn(const Real* a, const Real* b, Real* c, std::size_t m,
             std::size_t k, std::size_t n) {
  if (m * k * n >= kParallelWork && m > 1) {
    gemm_tn_parallel(a, b, c, m, k, n);
  } else {
    gemm_tn_serial(a, b, c, m, k, n);
  }
}

void cosine_scan_serial(std::span<const Real> rows, std::span<const double> row_norms,
                        std::span<const Real> query, double query_norm,
                        std::span<double> out) {
  cosine_scan_impl<false>(rows, row_norms, query, query_norm, out);
}

void cosine_scan_parallel(std::span<const Real> rows,
                          std::span<const double> row_norms,
                          std::span<const Real> query, double query_norm,
                          std::span<double> out) {
  cosine_scan_impl<true>(rows, row_norms, query, query_norm, out);
}

double l2_norm(std::span<const Real> v) {
  double acc = 0.0;
  for (Real x : v) acc += static_cast<double>(x) * static_cast<double>(x);
  return std::sqrt(acc);
}

}  // namespace itsr::kernels
