#pragma once

#include "flame/matrix.hpp"

#include <cstddef>
#include <vector>

namespace flame {

// Top-r singular triplets: u has orthonormal columns (rows x r), sigma is
// nonincreasing and nonnegative, vt has orthonormal rows (r x cols).
struct SvdFactors {
    Matrix u;
    std::vector<double> sigma;
    Matrix vt;

    std::size_t rank() const { return sigma.size(); }
    // u * diag(sigma) * vt, the dense expansion of the factors.
    Matrix expand() const;
};

// Eigenpairs of a symmetric matrix, values nonincreasing, vectors are the
// orthonormal columns of `vectors`.
struct EigenFactors {
    std::vector<double> values;
    Matrix vectors;
};

// One-sided Jacobi SVD truncated to the top r triplets. Requires
// 1 <= r <= min(rows, cols) and finite entries.
SvdFactors truncated_svd(const Matrix& w, std::size_t r);

// All min(rows, cols) triplets.
SvdFactors full_svd(const Matrix& w);

// Cyclic Jacobi eigendecomposition; c must be symmetric within 1e-9.
// Eigenvalues in [-1e-9, 0) are clamped to 0.
EigenFactors sym_eig(const Matrix& c);

// Largest singular value (operator norm).
double operator_norm(const Matrix& w);

// Frobenius distance between the orthogonal projectors spanned by the
// columns of a and b (both orthonormal); the subspace comparison used when
// spectra are degenerate.
double projector_distance(const Matrix& a, const Matrix& b);

} // namespace flame
