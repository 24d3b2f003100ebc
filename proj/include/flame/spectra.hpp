#pragma once

#include "flame/linalg.hpp"
#include "flame/matrix.hpp"
#include "flame/model.hpp"
#include "flame/trainer.hpp"

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace flame {

// ---------------------------------------------------------------------------
// Core spectral operations
// ---------------------------------------------------------------------------

// Both decompositions of the functional energy tr(WCW^T): per-rank energies
// sigma_k^2 v_k^T C v_k in W's SVD basis and lambda_j ||W q_j||^2 in C's
// eigenbasis. Construction fails if the two routes disagree beyond 1e-6
// relative.
struct EnergyFragment {
    std::vector<double> lambda;      // input spectrum (C eigenvalues)
    std::vector<double> sigma_sq;    // weight spectrum
    std::vector<double> data_aware;  // per-rank functional energies E_k
    double total = 0.0;              // tr(WCW^T)
    double svd_route = 0.0;
    double eig_route = 0.0;
};

EnergyFragment energy_spectrum(const Matrix& w, const Matrix& c);

// Tail bound of the orthogonal-tail functional energy under the
// eps-effective-rank hypothesis.
struct TailBound {
    bool hypothesis_ok = false;  // sum_{j>r*} lambda_j <= eps * tr(C)
    double lhs = 0.0;            // sum_{j>r*} lambda_j ||W q_j||^2
    double rhs = 0.0;            // eps * ||W||_op^2 * tr(C)
    double margin = 0.0;         // rhs - lhs
};

TailBound tail_bound_check(const Matrix& w, const Matrix& c, std::size_t r_star,
                           double epsilon);

// Explicit-Euler gradient descent on the population least-squares objective
// from zero init, compared against the closed form W*(I - e^{-Ct}).
struct AlignmentResult {
    std::vector<double> times;
    std::vector<double> closed_form_errors;  // Frobenius gap at each time
    std::vector<Matrix> w_sim;
};

AlignmentResult alignment_flow(const Matrix& w_star, const Matrix& c,
                               const std::vector<double>& times, double eta);

// Projector distance between the top-j right-singular subspace of w and the
// top-j eigenvector subspace of c.
double alignment_subspace_distance(const Matrix& w, const Matrix& c, std::size_t j_top);

struct TruncationCheck {
    double error = 0.0;  // tr((W - W_K) C (W - W_K)^T)
    double bound = 0.0;  // eps * ||W||_op^2 * tr(C)
};

TruncationCheck truncation_error(const Matrix& w, std::size_t k_rank, const Matrix& c,
                                 double epsilon);

// Monte-Carlo estimate of the empirical-truncation-error decay rate: the
// least-squares slope of log mean|T_hat_n - T| against log n.
struct RateResult {
    std::vector<std::size_t> n_grid;
    std::vector<double> mean_abs_err;
    double slope = 0.0;
    double population = 0.0;  // T
    bool trivial = false;     // lossless truncation, T == T_hat == 0
};

RateResult sample_complexity_curve(const Matrix& w, std::size_t k_rank, const Matrix& c,
                                   const std::vector<std::size_t>& n_grid, std::size_t trials,
                                   std::uint64_t seed);

// kappa = ||W||_op^2 tr(C) / E; nullopt when E == 0 (undefined signal).
std::optional<double> kappa_misalignment(const Matrix& w, const Matrix& c);

// ---------------------------------------------------------------------------
// Model-level spectral reporting
// ---------------------------------------------------------------------------

// Covariance of the encoder-output tokens the router actually dispatches to
// one expert, across the given tasks at their cursors; nullopt when the
// expert is never selected.
std::optional<Matrix> routed_covariance(const FlameModel& model,
                                        const std::map<std::string, TaskData>& tasks,
                                        std::size_t expert);

struct SublayerReport {
    std::size_t expert = 0;
    std::string sublayer;  // conv | mlp1 | mlp2
    bool dispatched = false;
    EnergyFragment fragment;
    std::optional<std::size_t> rank90_input, rank99_input;
    std::optional<std::size_t> rank90_weight, rank99_weight;
    std::optional<std::size_t> rank90_data, rank99_data;
    std::size_t r_star = 0;        // eps-effective rank of C
    double epsilon = 0.0;
    double tail_margin = 0.0;
    std::optional<double> kappa;
};

// One report per (expert, sublayer), with each sublayer's immediate input
// tokens as the covariance estimator. Weights are resolved at weight_cursor;
// routing runs at each task's own cursor.
std::vector<SublayerReport> spectral_reports(const FlameModel& model,
                                             const std::map<std::string, TaskData>& tasks,
                                             Cursor weight_cursor, double epsilon);

std::string render_spectra_csv(const std::vector<SublayerReport>& reports);
std::string render_spectra_summary_csv(const std::vector<SublayerReport>& reports);

} // namespace flame
