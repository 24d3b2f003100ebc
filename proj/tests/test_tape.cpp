#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "flame/errors.hpp"
#include "flame/forward.hpp"
#include "flame/tape.hpp"
#include "test_util.hpp"

#include <cmath>

using namespace flame;
using testutil::check_gradient;
using testutil::random_matrix;

namespace {

// Reduce any node to a scalar through a fixed random cotangent so every
// output entry feeds the loss.
Tape::NodeId weighted_sum(Tape& t, Tape::NodeId x, std::uint64_t salt) {
    SplitRng rng(salt);
    const Matrix& v = t.value(x);
    Matrix w(v.rows(), v.cols());
    for (double& e : w.raw()) e = rng.normal();
    return t.sum_all(t.hadamard(x, t.constant(std::move(w))));
}

} // namespace

TEST_CASE("tape: loss = theta^2 at theta=3 has gradient 6") {
    Tape t;
    Matrix theta(1, 1);
    theta(0, 0) = 3.0;
    const Tape::NodeId p = t.param(theta);
    const Tape::NodeId loss = t.hadamard(p, p);
    t.backward(loss);
    CHECK(t.grad(p)(0, 0) == doctest::Approx(6.0).epsilon(1e-12));
}

TEST_CASE("tape: softmax cross-entropy of [0,0] with label 0 gives [-0.5, 0.5]") {
    Tape t;
    const Tape::NodeId p = t.param(Matrix(1, 2));
    const Tape::NodeId loss = t.softmax_xent(p, 0);
    t.backward(loss);
    CHECK(t.grad(p)(0, 0) == doctest::Approx(-0.5).epsilon(1e-12));
    CHECK(t.grad(p)(0, 1) == doctest::Approx(0.5).epsilon(1e-12));
}

TEST_CASE("tape: non-scalar loss is a contract violation") {
    Tape t;
    const Tape::NodeId p = t.param(Matrix(2, 2));
    CHECK_THROWS_AS(t.backward(p), contract_error);
}

TEST_CASE("tape: unreachable parameters keep exactly zero gradient") {
    Tape t;
    SplitRng rng(3);
    const Tape::NodeId used = t.param(random_matrix(2, 2, rng));
    const Tape::NodeId unused = t.param(random_matrix(3, 1, rng));
    t.backward(t.sum_all(t.hadamard(used, used)));
    for (double g : t.grad(unused).raw()) CHECK(g == 0.0);
    bool any = false;
    for (double g : t.grad(used).raw()) any |= (g != 0.0);
    CHECK(any);
}

TEST_CASE("tape: every primitive passes the finite-difference contract") {
    // 10 seeded inputs per primitive, relative error <= 1e-4 at step 1e-5.
    for (std::uint64_t seed = 1; seed <= 10; ++seed) {
        SplitRng rng(seed);
        const Matrix a34 = random_matrix(3, 4, rng);
        const Matrix b34 = random_matrix(3, 4, rng);
        const Matrix b45 = random_matrix(4, 5, rng);
        const Matrix row4 = random_matrix(1, 4, rng);

        CHECK(check_gradient(a34, [&](Tape& t, Tape::NodeId p) {
                  return weighted_sum(t, t.add(p, t.constant(b34)), seed);
              }) <= 1e-4);
        CHECK(check_gradient(a34, [&](Tape& t, Tape::NodeId p) {
                  return weighted_sum(t, t.sub(t.constant(b34), p), seed + 1);
              }) <= 1e-4);
        CHECK(check_gradient(a34, [&](Tape& t, Tape::NodeId p) {
                  return weighted_sum(t, t.scale(p, -1.7), seed + 2);
              }) <= 1e-4);
        CHECK(check_gradient(a34, [&](Tape& t, Tape::NodeId p) {
                  return weighted_sum(t, t.matmul(p, t.constant(b45)), seed + 3);
              }) <= 1e-4);
        CHECK(check_gradient(a34, [&](Tape& t, Tape::NodeId p) {
                  return weighted_sum(t, t.matmul(t.constant(transpose(b45)), t.transpose(p)),
                                      seed + 4);
              }) <= 1e-4);
        CHECK(check_gradient(a34, [&](Tape& t, Tape::NodeId p) {
                  return weighted_sum(t, t.hadamard(p, t.constant(b34)), seed + 5);
              }) <= 1e-4);
        CHECK(check_gradient(a34, [&](Tape& t, Tape::NodeId p) {
                  return weighted_sum(t, t.add_row_broadcast(t.constant(b34), t.mean_rows(p)),
                                      seed + 6);
              }) <= 1e-4);
        CHECK(check_gradient(a34, [&](Tape& t, Tape::NodeId p) {
                  return weighted_sum(t, t.row_softmax(p), seed + 7);
              }) <= 1e-4);
        CHECK(check_gradient(a34, [&](Tape& t, Tape::NodeId p) {
                  return weighted_sum(t, t.gelu(p), seed + 8);
              }) <= 1e-4);
        CHECK(check_gradient(a34, [&](Tape& t, Tape::NodeId p) {
                  return weighted_sum(t, t.softplus(p), seed + 9);
              }) <= 1e-4);
        CHECK(check_gradient(a34, [&](Tape& t, Tape::NodeId p) {
                  return weighted_sum(t, t.time_window(p, 3), seed + 10);
              }) <= 1e-4);
        CHECK(check_gradient(a34, [&](Tape& t, Tape::NodeId p) {
                  return weighted_sum(t, t.mean_rows(p), seed + 11);
              }) <= 1e-4);
        CHECK(check_gradient(a34, [&](Tape& t, Tape::NodeId p) {
                  return t.mean_all(p);
              }) <= 1e-4);
        CHECK(check_gradient(row4, [&](Tape& t, Tape::NodeId p) {
                  return weighted_sum(t, t.gather_cols(p, {2, 0}), seed + 12);
              }) <= 1e-4);
        CHECK(check_gradient(row4, [&](Tape& t, Tape::NodeId p) {
                  return weighted_sum(t, t.scatter_cols(p, {1, 3, 0, 5}, 7), seed + 13);
              }) <= 1e-4);
        CHECK(check_gradient(a34, [&](Tape& t, Tape::NodeId p) {
                  return weighted_sum(t, t.scale_by(t.constant(b34), t.mean_all(p)), seed + 14);
              }) <= 1e-4);
        CHECK(check_gradient(a34, [&](Tape& t, Tape::NodeId p) {
                  // keep the divisor away from zero
                  Tape::NodeId denom = t.add(t.hadamard(t.mean_all(p), t.mean_all(p)),
                                             t.constant(Matrix{{0.5}}));
                  return weighted_sum(t, t.div_by(t.constant(b34), denom), seed + 15);
              }) <= 1e-4);
        CHECK(check_gradient(a34, [&](Tape& t, Tape::NodeId p) {
                  return weighted_sum(t, t.sub_broadcast(p, t.mean_all(p)), seed + 16);
              }) <= 1e-4);
        CHECK(check_gradient(a34, [&](Tape& t, Tape::NodeId p) {
                  Tape::NodeId sq = t.add(t.hadamard(t.mean_all(p), t.mean_all(p)),
                                          t.constant(Matrix{{0.3}}));
                  return t.sqrt_scalar(sq);
              }) <= 1e-4);
        CHECK(check_gradient(row4, [&](Tape& t, Tape::NodeId p) {
                  return t.softmax_xent(p, 2);
              }) <= 1e-4);
        CHECK(check_gradient(row4, [&](Tape& t, Tape::NodeId p) {
                  return t.bce_logits(p, {1.0, 0.0, 1.0, 0.0});
              }) <= 1e-4);
    }
}

TEST_CASE("tape: TAP output gradient wrt the pooling query matches finite differences") {
    for (std::uint64_t seed = 21; seed <= 23; ++seed) {
        SplitRng rng(seed);
        const Matrix z = random_matrix(5, 4, rng);
        const Matrix q0 = random_matrix(4, 1, rng);
        CHECK(check_gradient(q0, [&](Tape& t, Tape::NodeId q) {
                  return weighted_sum(t, tap_pool_graph(t, t.constant(z), q), seed);
              }) <= 1e-4);
        // and wrt the sequence itself
        CHECK(check_gradient(z, [&](Tape& t, Tape::NodeId zz) {
                  return weighted_sum(t, tap_pool_graph(t, zz, t.constant(q0)), seed + 1);
              }) <= 1e-4);
    }
}
