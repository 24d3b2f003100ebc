#include "flame/spectra.hpp"

#include "flame/errors.hpp"
#include "flame/forward.hpp"
#include "flame/reports.hpp"
#include "flame/rng.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>
#include <string>

namespace flame {
namespace {

double tr_wcwt(const Matrix& w, const Matrix& c) {
    return trace(matmul(matmul(w, c), transpose(w)));
}

std::optional<std::size_t> rank_reaching(const std::vector<double>& energies, double frac) {
    double total = 0.0;
    for (double e : energies) total += e;
    if (total <= 0.0) return std::nullopt;
    double acc = 0.0;
    for (std::size_t k = 0; k < energies.size(); ++k) {
        acc += energies[k];
        if (acc >= frac * total) return k + 1;
    }
    return energies.size();
}

// Accumulates sum of token outer products; tokens are matrix rows.
struct CovAccumulator {
    Matrix sum;
    std::size_t count = 0;

    void add_rows(const Matrix& tokens) {
        if (sum.empty()) sum = Matrix(tokens.cols(), tokens.cols());
        for (std::size_t t = 0; t < tokens.rows(); ++t) {
            for (std::size_t i = 0; i < tokens.cols(); ++i) {
                const double zi = tokens(t, i);
                if (zi == 0.0) continue;
                for (std::size_t j = 0; j < tokens.cols(); ++j)
                    sum(i, j) += zi * tokens(t, j);
            }
        }
        count += tokens.rows();
    }

    std::optional<Matrix> mean() const {
        if (count == 0) return std::nullopt;
        Matrix c = sum;
        c *= 1.0 / double(count);
        // Numerical symmetrization keeps sym_eig's asymmetry gate happy.
        for (std::size_t i = 0; i < c.rows(); ++i)
            for (std::size_t j = i + 1; j < c.cols(); ++j) {
                const double s = 0.5 * (c(i, j) + c(j, i));
                c(i, j) = c(j, i) = s;
            }
        return c;
    }
};

} // namespace

EnergyFragment energy_spectrum(const Matrix& w, const Matrix& c) {
    if (c.rows() != c.cols() || c.cols() != w.cols())
        throw precondition_error("energy_spectrum: shape mismatch between W and C");
    EnergyFragment f;
    f.total = tr_wcwt(w, c);

    const EigenFactors eig = sym_eig(c);
    f.lambda = eig.values;
    f.eig_route = 0.0;
    for (std::size_t j = 0; j < f.lambda.size(); ++j) {
        Matrix qj(c.rows(), 1);
        for (std::size_t i = 0; i < c.rows(); ++i) qj(i, 0) = eig.vectors(i, j);
        const Matrix wq = matmul(w, qj);
        f.eig_route += f.lambda[j] * dot(wq, wq);
    }

    const SvdFactors svd = full_svd(w);
    f.svd_route = 0.0;
    for (std::size_t k = 0; k < svd.sigma.size(); ++k) {
        Matrix vk(w.cols(), 1);
        for (std::size_t i = 0; i < w.cols(); ++i) vk(i, 0) = svd.vt(k, i);
        const double vcv = dot(vk, matmul(c, vk));
        const double ek = svd.sigma[k] * svd.sigma[k] * vcv;
        f.sigma_sq.push_back(svd.sigma[k] * svd.sigma[k]);
        f.data_aware.push_back(ek);
        f.svd_route += ek;
    }

    const double scale = std::max({std::fabs(f.total), std::fabs(f.svd_route), 1e-300});
    if (std::fabs(f.svd_route - f.eig_route) > 1e-6 * scale ||
        std::fabs(f.svd_route - f.total) > 1e-6 * scale)
        throw numeric_error("energy_spectrum: dual decompositions disagree beyond 1e-6");
    return f;
}

TailBound tail_bound_check(const Matrix& w, const Matrix& c, std::size_t r_star,
                           double epsilon) {
    if (c.rows() != c.cols() || c.cols() != w.cols())
        throw precondition_error("tail_bound_check: shape mismatch");
    const EigenFactors eig = sym_eig(c);
    double tr_c = 0.0, tail = 0.0;
    for (std::size_t j = 0; j < eig.values.size(); ++j) {
        tr_c += eig.values[j];
        if (j >= r_star) tail += eig.values[j];
    }
    TailBound out;
    out.hypothesis_ok = tail <= epsilon * tr_c + 1e-12 * std::max(1.0, tr_c);
    double lhs = 0.0;
    for (std::size_t j = r_star; j < eig.values.size(); ++j) {
        Matrix qj(c.rows(), 1);
        for (std::size_t i = 0; i < c.rows(); ++i) qj(i, 0) = eig.vectors(i, j);
        const Matrix wq = matmul(w, qj);
        lhs += eig.values[j] * dot(wq, wq);
    }
    const double opn = operator_norm(w);
    out.lhs = lhs;
    out.rhs = epsilon * opn * opn * tr_c;
    out.margin = out.rhs - out.lhs;
    return out;
}

AlignmentResult alignment_flow(const Matrix& w_star, const Matrix& c,
                               const std::vector<double>& times, double eta) {
    if (c.rows() != c.cols() || c.cols() != w_star.cols())
        throw precondition_error("alignment_flow: shape mismatch");
    const EigenFactors eig = sym_eig(c);
    const double lambda_max = eig.values.empty() ? 0.0 : eig.values.front();
    if (lambda_max > 0.0 && eta >= 1.0 / lambda_max)
        throw precondition_error("alignment_flow: step size violates eta < 1/lambda_1");

    std::vector<double> sorted_times = times;
    std::sort(sorted_times.begin(), sorted_times.end());

    AlignmentResult out;
    out.times = sorted_times;
    Matrix w(w_star.rows(), w_star.cols());  // zero init
    long long step = 0;
    for (double t : sorted_times) {
        const long long target = std::llround(t / eta);
        for (; step < target; ++step) {
            // gradient of 1/2 tr((W - W*) C (W - W*)^T) is (W - W*) C
            const Matrix grad = matmul(w - w_star, c);
            w -= grad * eta;
        }
        // closed form W*(I - e^{-Ct}) through C's eigenbasis
        Matrix decay(c.rows(), c.rows());
        for (std::size_t j = 0; j < eig.values.size(); ++j) {
            const double f = 1.0 - std::exp(-eig.values[j] * t);
            for (std::size_t a = 0; a < c.rows(); ++a)
                for (std::size_t bcol = 0; bcol < c.rows(); ++bcol)
                    decay(a, bcol) += f * eig.vectors(a, j) * eig.vectors(bcol, j);
        }
        const Matrix closed = matmul(w_star, decay);
        out.closed_form_errors.push_back(frobenius_norm(w - closed));
        out.w_sim.push_back(w);
    }
    return out;
}

double alignment_subspace_distance(const Matrix& w, const Matrix& c, std::size_t j_top) {
    const SvdFactors svd = truncated_svd(w, j_top);
    const EigenFactors eig = sym_eig(c);
    Matrix v(w.cols(), j_top);
    for (std::size_t k = 0; k < j_top; ++k)
        for (std::size_t i = 0; i < w.cols(); ++i) v(i, k) = svd.vt(k, i);
    Matrix q(c.rows(), j_top);
    for (std::size_t k = 0; k < j_top; ++k)
        for (std::size_t i = 0; i < c.rows(); ++i) q(i, k) = eig.vectors(i, k);
    return projector_distance(v, q);
}

TruncationCheck truncation_error(const Matrix& w, std::size_t k_rank, const Matrix& c,
                                 double epsilon) {
    TruncationCheck out;
    const double opn = operator_norm(w);
    out.bound = epsilon * opn * opn * trace(c);
    if (k_rank >= std::min(w.rows(), w.cols())) {
        out.error = 0.0;  // truncation is the identity
        return out;
    }
    const Matrix residual = w - truncated_svd(w, k_rank).expand();
    out.error = tr_wcwt(residual, c);
    return out;
}

RateResult sample_complexity_curve(const Matrix& w, std::size_t k_rank, const Matrix& c,
                                   const std::vector<std::size_t>& n_grid, std::size_t trials,
                                   std::uint64_t seed) {
    if (n_grid.empty() || trials == 0)
        throw precondition_error("sample_complexity_curve: empty grid or zero trials");
    Matrix residual(w.rows(), w.cols());
    if (k_rank < std::min(w.rows(), w.cols()))
        residual = w - truncated_svd(w, k_rank).expand();

    RateResult out;
    out.n_grid = n_grid;
    out.population = tr_wcwt(residual, c);

    // Sub-Gaussian sampler: z = Q sqrt(Lambda) g with g standard normal.
    const EigenFactors eig = sym_eig(c);
    Matrix a(c.rows(), c.rows());
    for (std::size_t j = 0; j < eig.values.size(); ++j) {
        const double s = std::sqrt(std::max(eig.values[j], 0.0));
        for (std::size_t i = 0; i < c.rows(); ++i) a(i, j) = eig.vectors(i, j) * s;
    }

    SplitRng root(seed);
    bool all_zero = out.population == 0.0;
    for (std::size_t gi = 0; gi < n_grid.size(); ++gi) {
        const std::size_t n = n_grid[gi];
        double err_sum = 0.0;
        for (std::size_t trial = 0; trial < trials; ++trial) {
            SplitRng rng = root.split(gi).split(trial);
            double t_hat = 0.0;
            Matrix g(c.rows(), 1);
            for (std::size_t i = 0; i < n; ++i) {
                for (double& v : g.raw()) v = rng.normal();
                const Matrix z = matmul(a, g);
                const Matrix rz = matmul(residual, z);
                t_hat += dot(rz, rz);
            }
            t_hat /= double(n);
            if (t_hat != 0.0) all_zero = false;
            err_sum += std::fabs(t_hat - out.population);
        }
        out.mean_abs_err.push_back(err_sum / double(trials));
    }

    if (all_zero && out.population == 0.0) {
        out.trivial = true;
        out.slope = 0.0;
        return out;
    }
    // least-squares slope of log mean error vs log n
    double sx = 0.0, sy = 0.0, sxx = 0.0, sxy = 0.0;
    const double m = double(n_grid.size());
    for (std::size_t i = 0; i < n_grid.size(); ++i) {
        const double x = std::log(double(n_grid[i]));
        const double y = std::log(std::max(out.mean_abs_err[i], 1e-300));
        sx += x;
        sy += y;
        sxx += x * x;
        sxy += x * y;
    }
    out.slope = (m * sxy - sx * sy) / (m * sxx - sx * sx);
    return out;
}

std::optional<double> kappa_misalignment(const Matrix& w, const Matrix& c) {
    const double e = tr_wcwt(w, c);
    if (e <= 0.0) return std::nullopt;
    const double opn = operator_norm(w);
    return opn * opn * trace(c) / e;
}

std::optional<Matrix> routed_covariance(const FlameModel& model,
                                        const std::map<std::string, TaskData>& tasks,
                                        std::size_t expert) {
    CovAccumulator acc;
    for (const auto& [id, td] : tasks) {
        if (td.eval.empty()) continue;
        const Cursor cursor = model.cursor_of(id);
        for_each_eval_output(model, id, td.eval, cursor, false,
                             [&](std::size_t i, const EvalOutput& out) {
            const Sample& s = td.eval.samples[i];
            for (const auto& [m, gate] : out.gates) {
                const bool selected =
                    std::find(gate.selected.begin(), gate.selected.end(), expert) !=
                    gate.selected.end();
                if (!selected) continue;
                // all time steps of a dispatched sample contribute
                const Matrix z = encode_seq(model, m, s.modalities.at(m), cursor);
                acc.add_rows(z);
            }
        });
    }
    return acc.mean();
}

std::vector<SublayerReport> spectral_reports(const FlameModel& model,
                                             const std::map<std::string, TaskData>& tasks,
                                             Cursor weight_cursor, double epsilon) {
    const std::size_t n_experts = model.config().n_experts;
    std::map<std::pair<std::size_t, std::string>, CovAccumulator> acc;

    for (const auto& [id, td] : tasks) {
        if (td.eval.empty()) continue;
        if (!model.task_cursor().count(id)) continue;
        const Cursor cursor = model.cursor_of(id);
        for_each_eval_output(model, id, td.eval, cursor, true,
                             [&](std::size_t, const EvalOutput& out) {
            for (const EvalOutput::Trace& tr : out.traces) {
                acc[{tr.expert, "conv"}].add_rows(tr.conv_in);
                acc[{tr.expert, "mlp1"}].add_rows(tr.mlp1_in);
                acc[{tr.expert, "mlp2"}].add_rows(tr.mlp2_in);
            }
        });
    }

    std::vector<SublayerReport> reports;
    for (std::size_t e = 0; e < n_experts; ++e) {
        const Expert& ex = model.experts()[e];
        for (const auto& [sub, sw] : std::vector<std::pair<std::string, const StackableWeight*>>{
                 {"conv", &ex.conv}, {"mlp1", &ex.mlp1}, {"mlp2", &ex.mlp2}}) {
            SublayerReport r;
            r.expert = e;
            r.sublayer = sub;
            r.epsilon = epsilon;
            auto it = acc.find({e, sub});
            const std::optional<Matrix> c = it == acc.end() ? std::nullopt : it->second.mean();
            if (!c) {
                r.dispatched = false;
                reports.push_back(std::move(r));
                continue;
            }
            r.dispatched = true;
            const Matrix w = sw->effective(weight_cursor);
            r.fragment = energy_spectrum(w, *c);
            r.rank90_input = rank_reaching(r.fragment.lambda, 0.90);
            r.rank99_input = rank_reaching(r.fragment.lambda, 0.99);
            r.rank90_weight = rank_reaching(r.fragment.sigma_sq, 0.90);
            r.rank99_weight = rank_reaching(r.fragment.sigma_sq, 0.99);
            r.rank90_data = rank_reaching(r.fragment.data_aware, 0.90);
            r.rank99_data = rank_reaching(r.fragment.data_aware, 0.99);

            // eps-effective rank of C, then the tail-bound margin at it.
            double tr_c = 0.0;
            for (double l : r.fragment.lambda) tr_c += l;
            std::size_t r_star = r.fragment.lambda.size();
            double tail = 0.0;
            for (std::size_t j = r.fragment.lambda.size(); j-- > 0;) {
                if (tail + r.fragment.lambda[j] > epsilon * tr_c) {
                    r_star = j + 1;
                    break;
                }
                tail += r.fragment.lambda[j];
                r_star = j;
            }
            r.r_star = r_star;
            r.tail_margin = tail_bound_check(w, *c, r_star, epsilon).margin;
            r.kappa = kappa_misalignment(w, *c);
            reports.push_back(std::move(r));
        }
    }
    return reports;
}

std::string render_spectra_csv(const std::vector<SublayerReport>& reports) {
    std::ostringstream out;
    out << "expert,sublayer,lens,rank,energy,cumulative_fraction\n";
    for (const SublayerReport& r : reports) {
        if (!r.dispatched) {
            out << r.expert << ',' << r.sublayer << ",empty_dispatch,,,\n";
            continue;
        }
        const auto emit = [&](const std::string& lens, const std::vector<double>& energies) {
            double total = 0.0;
            for (double e : energies) total += e;
            double acc = 0.0;
            for (std::size_t k = 0; k < energies.size(); ++k) {
                acc += energies[k];
                out << r.expert << ',' << r.sublayer << ',' << lens << ',' << (k + 1) << ','
                    << format_g17(energies[k]) << ',';
                if (total > 0.0)
                    out << format_g17(acc / total);
                out << '\n';
            }
        };
        emit("input", r.fragment.lambda);
        emit("weight", r.fragment.sigma_sq);
        emit("data_aware", r.fragment.data_aware);
    }
    return out.str();
}

std::string render_spectra_summary_csv(const std::vector<SublayerReport>& reports) {
    std::ostringstream out;
    out << "expert,sublayer,total_energy,rank90_input,rank99_input,rank90_weight,rank99_weight,"
           "rank90_data_aware,rank99_data_aware,r_star,epsilon,tail_margin,kappa\n";
    const auto opt = [](const std::optional<std::size_t>& v) {
        return v ? std::to_string(*v) : std::string();
    };
    for (const SublayerReport& r : reports) {
        if (!r.dispatched) {
            out << r.expert << ',' << r.sublayer << ",,,,,,,,,,,\n";
            continue;
        }
        out << r.expert << ',' << r.sublayer << ',' << format_g17(r.fragment.total) << ','
            << opt(r.rank90_input) << ',' << opt(r.rank99_input) << ',' << opt(r.rank90_weight)
            << ',' << opt(r.rank99_weight) << ',' << opt(r.rank90_data) << ','
            << opt(r.rank99_data) << ',' << r.r_star << ',' << format_g17(r.epsilon) << ','
            << format_g17(r.tail_margin) << ',' << csv_field(r.kappa) << '\n';
    }
    return out.str();
}

} // namespace flame
