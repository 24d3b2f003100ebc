#include "flame/linalg.hpp"

#include "flame/errors.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>

namespace flame {
namespace {

constexpr int kMaxSweeps = 64;

// Orthonormalize canonical basis vectors against the first `filled` columns
// of u in place, filling null-space columns deterministically (needed when
// the input has more requested triplets than nonzero singular values).
void complete_basis(Matrix& u, std::size_t filled) {
    const std::size_t m = u.rows(), r = u.cols();
    std::size_t next = filled;
    for (std::size_t e = 0; e < m && next < r; ++e) {
        // candidate = e_e orthogonalized against existing columns
        std::vector<double> cand(m, 0.0);
        cand[e] = 1.0;
        for (int pass = 0; pass < 2; ++pass) {
            for (std::size_t j = 0; j < next; ++j) {
                double proj = 0.0;
                for (std::size_t i = 0; i < m; ++i) proj += cand[i] * u(i, j);
                for (std::size_t i = 0; i < m; ++i) cand[i] -= proj * u(i, j);
            }
        }
        double norm = 0.0;
        for (double v : cand) norm += v * v;
        norm = std::sqrt(norm);
        if (norm < 1e-8) continue;
        for (std::size_t i = 0; i < m; ++i) u(i, next) = cand[i] / norm;
        ++next;
    }
}

// One-sided Jacobi on b (m x n, m >= n): rotates column pairs until all are
// mutually orthogonal, accumulating the rotations into v (n x n).
void jacobi_orthogonalize(Matrix& b, Matrix& v) {
    const std::size_t m = b.rows(), n = b.cols();
    const double eps = 1e-15;
    for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
        bool rotated = false;
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                double alpha = 0.0, beta = 0.0, gamma = 0.0;
                for (std::size_t i = 0; i < m; ++i) {
                    const double bp = b(i, p), bq = b(i, q);
                    alpha += bp * bp;
                    beta += bq * bq;
                    gamma += bp * bq;
                }
                if (std::fabs(gamma) <= eps * std::sqrt(alpha * beta)) continue;
                rotated = true;
                const double zeta = (beta - alpha) / (2.0 * gamma);
                const double t = (zeta >= 0.0 ? 1.0 : -1.0) /
                                 (std::fabs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                for (std::size_t i = 0; i < m; ++i) {
                    const double bp = b(i, p), bq = b(i, q);
                    b(i, p) = c * bp - s * bq;
                    b(i, q) = s * bp + c * bq;
                }
                for (std::size_t i = 0; i < n; ++i) {
                    const double vp = v(i, p), vq = v(i, q);
                    v(i, p) = c * vp - s * vq;
                    v(i, q) = s * vp + c * vq;
                }
            }
        }
        if (!rotated) break;
    }
}

SvdFactors svd_impl(const Matrix& w, std::size_t r) {
    const bool wide = w.rows() < w.cols();
    Matrix b = wide ? transpose(w) : w;
    const std::size_t m = b.rows(), n = b.cols();
    Matrix v = Matrix::identity(n);
    jacobi_orthogonalize(b, v);

    std::vector<double> norms(n);
    for (std::size_t j = 0; j < n; ++j) {
        double s = 0.0;
        for (std::size_t i = 0; i < m; ++i) s += b(i, j) * b(i, j);
        norms[j] = std::sqrt(s);
    }
    // Stable order keeps the sweep's column order on ties.
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t a, std::size_t c) { return norms[a] > norms[c]; });

    Matrix u(m, r);
    Matrix vr(n, r);
    std::vector<double> sigma(r);
    std::size_t filled = 0;
    for (std::size_t k = 0; k < r; ++k) {
        const std::size_t j = order[k];
        sigma[k] = norms[j];
        for (std::size_t i = 0; i < n; ++i) vr(i, k) = v(i, j);
        if (norms[j] > 0.0) {
            for (std::size_t i = 0; i < m; ++i) u(i, k) = b(i, j) / norms[j];
            filled = k + 1;
        }
    }
    complete_basis(u, filled);

    SvdFactors f;
    if (wide) {
        f.u = vr;
        f.vt = transpose(u);
    } else {
        f.u = std::move(u);
        f.vt = transpose(vr);
    }
    f.sigma = std::move(sigma);
    return f;
}

} // namespace

Matrix SvdFactors::expand() const {
    Matrix us = u;
    for (std::size_t j = 0; j < sigma.size(); ++j)
        for (std::size_t i = 0; i < us.rows(); ++i) us(i, j) *= sigma[j];
    return matmul(us, vt);
}

SvdFactors truncated_svd(const Matrix& w, std::size_t r) {
    const std::size_t maxr = std::min(w.rows(), w.cols());
    if (r < 1 || r > maxr) {
        throw precondition_error("truncated_svd: rank " + std::to_string(r) +
                                 " outside [1, " + std::to_string(maxr) + "]");
    }
    if (!w.all_finite()) throw numeric_error("truncated_svd: non-finite entries");
    return svd_impl(w, r);
}

SvdFactors full_svd(const Matrix& w) {
    if (!w.all_finite()) throw numeric_error("full_svd: non-finite entries");
    return svd_impl(w, std::min(w.rows(), w.cols()));
}

EigenFactors sym_eig(const Matrix& c) {
    if (c.rows() != c.cols()) throw precondition_error("sym_eig: matrix not square");
    if (!c.all_finite()) throw numeric_error("sym_eig: non-finite entries");
    const std::size_t n = c.rows();
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j)
            if (std::fabs(c(i, j) - c(j, i)) > 1e-9)
                throw numeric_error("sym_eig: asymmetry beyond 1e-9 at (" +
                                    std::to_string(i) + "," + std::to_string(j) + ")");

    Matrix a = c;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
            const double s = 0.5 * (a(i, j) + a(j, i));
            a(i, j) = a(j, i) = s;
        }
    Matrix q = Matrix::identity(n);

    for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
        double off = 0.0;
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = i + 1; j < n; ++j) off += a(i, j) * a(i, j);
        if (off <= 1e-30 * std::max(1.0, frobenius_norm(a))) break;
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t r = p + 1; r < n; ++r) {
                const double apq = a(p, r);
                if (std::fabs(apq) < 1e-300) continue;
                const double theta = (a(r, r) - a(p, p)) / (2.0 * apq);
                const double t = (theta >= 0.0 ? 1.0 : -1.0) /
                                 (std::fabs(theta) + std::sqrt(1.0 + theta * theta));
                const double cs = 1.0 / std::sqrt(1.0 + t * t);
                const double sn = cs * t;
                for (std::size_t i = 0; i < n; ++i) {
                    const double aip = a(i, p), air = a(i, r);
                    a(i, p) = cs * aip - sn * air;
                    a(i, r) = sn * aip + cs * air;
                }
                for (std::size_t i = 0; i < n; ++i) {
                    const double api = a(p, i), ari = a(r, i);
                    a(p, i) = cs * api - sn * ari;
                    a(r, i) = sn * api + cs * ari;
                }
                for (std::size_t i = 0; i < n; ++i) {
                    const double qip = q(i, p), qir = q(i, r);
                    q(i, p) = cs * qip - sn * qir;
                    q(i, r) = sn * qip + cs * qir;
                }
            }
        }
    }

    std::vector<double> vals(n);
    for (std::size_t i = 0; i < n; ++i) vals[i] = a(i, i);
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](std::size_t x, std::size_t y) { return vals[x] > vals[y]; });

    EigenFactors f;
    f.values.resize(n);
    f.vectors = Matrix(n, n);
    for (std::size_t k = 0; k < n; ++k) {
        double v = vals[order[k]];
        if (v < 0.0 && v >= -1e-9) v = 0.0;
        f.values[k] = v;
        for (std::size_t i = 0; i < n; ++i) f.vectors(i, k) = q(i, order[k]);
    }
    return f;
}

double operator_norm(const Matrix& w) {
    if (w.rows() == 0 || w.cols() == 0) return 0.0;
    return full_svd(w).sigma.front();
}

double projector_distance(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows()) throw precondition_error("projector_distance: row mismatch");
    const Matrix pa = matmul(a, transpose(a));
    const Matrix pb = matmul(b, transpose(b));
    return frobenius_norm(pa - pb);
}

} // namespace flame
