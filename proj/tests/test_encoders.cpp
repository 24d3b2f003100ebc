#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "flame/errors.hpp"
#include "flame/forward.hpp"
#include "flame/model.hpp"
#include "model_fixtures.hpp"
#include "test_util.hpp"

#include <cmath>

using namespace flame;
using testutil::random_matrix;

namespace {

ModalitySequence make_seq(const Matrix& values) {
    ModalitySequence s;
    s.modality_id = "ma";
    s.dim = values.cols();
    s.values = values;
    for (std::size_t t = 0; t < values.rows(); ++t) s.timestamps.push_back(double(t));
    return s;
}

// Entry-by-entry attention oracle, written independently of the graph ops.
Matrix encode_oracle(const Encoder& enc, const Matrix& x, Cursor cursor) {
    const std::size_t len = x.rows();
    const Matrix w_in = enc.w_in.effective(cursor);
    const Matrix b_in = enc.w_in.effective_bias(cursor);
    const std::size_t d = w_in.rows();
    Matrix proj(len, d);
    const Matrix pe = positional_encoding(len, d);
    const double s = enc.pos_scale.effective(cursor);
    for (std::size_t t = 0; t < len; ++t)
        for (std::size_t i = 0; i < d; ++i) {
            double acc = b_in(0, i);
            for (std::size_t j = 0; j < x.cols(); ++j) acc += w_in(i, j) * x(t, j);
            proj(t, i) = acc + s * pe(t, i);
        }
    auto project = [&](const StackableWeight& sw) {
        const Matrix w = sw.effective(cursor);
        const Matrix b = sw.effective_bias(cursor);
        Matrix out(len, d);
        for (std::size_t t = 0; t < len; ++t)
            for (std::size_t i = 0; i < d; ++i) {
                double acc = b(0, i);
                for (std::size_t j = 0; j < d; ++j) acc += w(i, j) * proj(t, j);
                out(t, i) = acc;
            }
        return out;
    };
    const Matrix q = project(enc.w_q), k = project(enc.w_k), v = project(enc.w_v);
    Matrix out(len, d);
    for (std::size_t t = 0; t < len; ++t) {
        std::vector<double> scores(len);
        double mx = -1e300;
        for (std::size_t u = 0; u < len; ++u) {
            double acc = 0.0;
            for (std::size_t i = 0; i < d; ++i) acc += q(t, i) * k(u, i);
            scores[u] = acc / std::sqrt(double(d));
            mx = std::max(mx, scores[u]);
        }
        double z = 0.0;
        for (std::size_t u = 0; u < len; ++u) {
            scores[u] = std::exp(scores[u] - mx);
            z += scores[u];
        }
        for (std::size_t i = 0; i < d; ++i) {
            double acc = proj(t, i);
            for (std::size_t u = 0; u < len; ++u) acc += (scores[u] / z) * v(u, i);
            out(t, i) = acc;
        }
    }
    return out;
}

} // namespace

TEST_CASE("encode: zero weights and zero positional scale give zero output") {
    ModelConfig cfg;
    cfg.d = 4;
    cfg.d_h = 8;
    Encoder enc;
    enc.modality_id = "ma";
    enc.dim_in = 3;
    enc.w_in = StackableWeight("enc.ma.w_in", 4, 3);
    enc.w_q = StackableWeight("enc.ma.w_q", 4, 4);
    enc.w_k = StackableWeight("enc.ma.w_k", 4, 4);
    enc.w_v = StackableWeight("enc.ma.w_v", 4, 4);
    for (StackableWeight* sw : {&enc.w_in, &enc.w_q, &enc.w_k, &enc.w_v}) {
        sw->attach_live(0, Matrix(sw->rows(), sw->cols()), Matrix(1, sw->rows()));
        sw->freeze_live_as_base(0);
    }
    enc.pos_scale.deltas.push_back({0, 0.0});
    FlameModel model(cfg, Method::flame);
    model.encoders()["ma"] = enc;
    SplitRng rng(2);
    const Matrix out = encode_seq(model, "ma", make_seq(random_matrix(5, 3, rng)), 0);
    CHECK(max_abs(out) == 0.0);
    CHECK(out.rows() == 5);
}

TEST_CASE("encode: single-step sequence is projected token plus its value projection") {
    using namespace testutil;
    ModelConfig cfg;
    cfg.d = 6;
    cfg.d_h = 12;
    Fixture f = make_fixture({two_modal_task("t0", 6, 1)}, cfg, Method::flame, 4);
    const Encoder& enc = f.model->encoder_of("ma");
    SplitRng rng(8);
    const Matrix x = random_matrix(1, 6, rng);
    const Matrix out = encode_seq(*f.model, "ma", make_seq(x), 0);
    // with L=1 the attention weight is exactly 1
    const Matrix w_in = enc.w_in.effective(0);
    const Matrix b_in = enc.w_in.effective_bias(0);
    Matrix proj(1, 6);
    const Matrix pe = positional_encoding(1, 6);
    for (std::size_t i = 0; i < 6; ++i) {
        double acc = b_in(0, i);
        for (std::size_t j = 0; j < 6; ++j) acc += w_in(i, j) * x(0, j);
        proj(0, i) = acc + enc.pos_scale.effective(0) * pe(0, i);
    }
    const Matrix wv = enc.w_v.effective(0);
    const Matrix bv = enc.w_v.effective_bias(0);
    Matrix expect(1, 6);
    for (std::size_t i = 0; i < 6; ++i) {
        double acc = bv(0, i);
        for (std::size_t j = 0; j < 6; ++j) acc += wv(i, j) * proj(0, j);
        expect(0, i) = proj(0, i) + acc;
    }
    CHECK(max_abs_diff(out, expect) <= 1e-12);
}

TEST_CASE("encode: matches the brute-force attention oracle within 1e-10") {
    using namespace testutil;
    ModelConfig cfg;
    cfg.d = 4;
    cfg.d_h = 8;
    Fixture f = make_fixture({two_modal_task("t0", 5, 3)}, cfg, Method::flame, 6);
    SplitRng rng(10);
    for (int trial = 0; trial < 5; ++trial) {
        const Matrix x = random_matrix(3, 5, rng);
        const Matrix got = encode_seq(*f.model, "ma", make_seq(x), 0);
        const Matrix want = encode_oracle(f.model->encoder_of("ma"), x, 0);
        CHECK(max_abs_diff(got, want) <= 1e-10);
    }
}

TEST_CASE("encode: length preservation across L") {
    using namespace testutil;
    ModelConfig cfg;
    cfg.d = 4;
    cfg.d_h = 8;
    Fixture f = make_fixture({two_modal_task("t0", 5, 4)}, cfg, Method::flame, 7);
    SplitRng rng(11);
    for (std::size_t len : {1, 2, 7, 31}) {
        const Matrix out = encode_seq(*f.model, "ma", make_seq(random_matrix(len, 5, rng)), 0);
        CHECK(out.rows() == len);
        CHECK(out.cols() == 4);
    }
}

TEST_CASE("encode: absent modality is a contract violation") {
    using namespace testutil;
    ModelConfig cfg;
    cfg.d = 4;
    cfg.d_h = 8;
    Fixture f = make_fixture({two_modal_task("t0", 5, 4)}, cfg, Method::flame, 7);
    ModalitySequence absent;
    absent.modality_id = "ma";
    absent.dim = 5;
    absent.present = false;
    CHECK_THROWS_AS(encode_seq(*f.model, "ma", absent, 0), contract_error);
}

TEST_CASE("encode: cursor isolation before and after a later stage") {
    using namespace testutil;
    ModelConfig cfg;
    cfg.d = 4;
    cfg.d_h = 8;
    cfg.n_experts = 3;
    cfg.k_top = 2;
    TrainOptions opt;
    opt.batch_size = 8;
    Fixture f = make_fixture({two_modal_task("t0", 5, 4)}, cfg, Method::flame, 12, 2, opt);
    SplitRng rng(13);
    const Matrix x = random_matrix(4, 5, rng);
    const Matrix before = encode_seq(*f.model, "ma", make_seq(x), 0);

    SyntheticTask t1 = make_synthetic_task(two_modal_task("t1", 5, 4, 2, 9), 12);
    f.tasks["t1"] = TaskData{t1.spec, std::move(t1.train), std::move(t1.eval)};
    Trainer trainer(*f.model, f.tasks, opt, 12);
    StageSpec st;
    st.task_ids = {"t1"};
    st.rank = 2;
    st.epochs = 2;
    trainer.run_stage(1, st);

    const Matrix after = encode_seq(*f.model, "ma", make_seq(x), 0);
    CHECK(bit_equal(before, after));
    // and the cursor-1 view actually differs (the stage trained something)
    const Matrix at1 = encode_seq(*f.model, "ma", make_seq(x), 1);
    CHECK(!bit_equal(before, at1));
}

TEST_CASE("encode: all encoder parameters pass the finite-difference contract") {
    using namespace testutil;
    ModelConfig cfg;
    cfg.d = 4;
    cfg.d_h = 8;
    cfg.n_experts = 2;
    cfg.k_top = 1;
    Fixture f = make_fixture({two_modal_task("t0", 3, 3)}, cfg, Method::flame, 14);
    SplitRng rng(15);
    const Matrix x = random_matrix(3, 3, rng);
    const ModalitySequence seq = make_seq(x);
    Encoder& enc = f.model->encoders().at("ma");

    // loss(theta) with one encoder tensor swapped for the parameter node
    auto check_param = [&](StackableWeight& sw) {
        const Matrix theta0 = sw.base();
        const double err = testutil::check_gradient(theta0, [&](Tape& t, Tape::NodeId p) {
            TaskBinding b;
            b.tape = &t;
            b.model = f.model.get();
            for (StackableWeight* w : {&enc.w_in, &enc.w_q, &enc.w_k, &enc.w_v}) {
                BoundWeight bw;
                bw.w = (w == &sw) ? p : t.constant(w->effective(0));
                bw.bias = t.constant(w->effective_bias(0));
                b.sw[w->name()] = bw;
            }
            Matrix pos(1, 1);
            pos(0, 0) = enc.pos_scale.effective(0);
            b.pos["ma"] = t.constant(pos);
            const Tape::NodeId z = encode_graph(t, b, "ma", seq);
            SplitRng wr(99);
            Matrix cot(z >= 0 ? t.value(z).rows() : 0, t.value(z).cols());
            for (double& v : cot.raw()) v = wr.normal();
            return t.sum_all(t.hadamard(z, t.constant(std::move(cot))));
        });
        CHECK(err <= 1e-4);
    };
    check_param(enc.w_in);
    check_param(enc.w_q);
    check_param(enc.w_k);
    check_param(enc.w_v);
}
