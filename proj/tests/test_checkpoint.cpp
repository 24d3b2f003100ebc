#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include "flame/checkpoint.hpp"
#include "flame/errors.hpp"
#include "flame/forward.hpp"
#include "flame/trainer.hpp"
#include "model_fixtures.hpp"

#include <cstdio>
#include <fstream>

using namespace flame;
using namespace flame::testutil;

namespace {

Fixture two_stage_fixture(Method method, std::uint64_t seed) {
    ModelConfig cfg;
    cfg.d = 8;
    cfg.d_h = 16;
    cfg.n_experts = 3;
    cfg.k_top = 2;
    TrainOptions opt;
    opt.batch_size = 8;
    opt.lr = 0.02;
    Fixture f = make_fixture({two_modal_task("t0", 5, 4, 2, 1)}, cfg, method, seed, 2, opt);
    SyntheticTask t1 = make_synthetic_task(two_modal_task("t1", 5, 4, 2, 2), seed);
    f.tasks["t1"] = TaskData{t1.spec, std::move(t1.train), std::move(t1.eval)};
    Trainer trainer(*f.model, f.tasks, opt, seed);
    StageSpec st;
    st.task_ids = {"t1"};
    st.rank = 2;
    st.epochs = 2;
    trainer.run_stage(1, st);
    return f;
}

} // namespace

TEST_CASE("checkpoint: two-stage flame model round-trips bit-exactly") {
    const char* path = "ckpt_roundtrip.bin";
    Fixture f = two_stage_fixture(Method::flame, 71);
    save_checkpoint(*f.model, path);
    const FlameModel back = load_checkpoint(path);

    const auto a = snapshot_tensors(*f.model);
    const auto b = snapshot_tensors(back);
    REQUIRE(a.size() == b.size());
    for (const auto& [name, value] : a) {
        REQUIRE(b.count(name));
        CHECK(bit_equal(value, b.at(name)));
    }
    CHECK(back.completed_stages() == f.model->completed_stages());
    CHECK(back.task_cursor() == f.model->task_cursor());
    CHECK(back.config().d == f.model->config().d);

    // predictions from the reloaded model are bit-identical
    for (const auto& id : {"t0", "t1"}) {
        const auto p1 = eval_logits(*f.model, id, f.tasks.at(id).eval, f.model->cursor_of(id));
        const auto p2 = eval_logits(back, id, f.tasks.at(id).eval, back.cursor_of(id));
        for (std::size_t i = 0; i < p1.size(); ++i) CHECK(bit_equal(p1[i], p2[i]));
    }
    // saving the reload reproduces the file byte-for-byte
    const char* path2 = "ckpt_roundtrip2.bin";
    save_checkpoint(back, path2);
    std::ifstream f1(path, std::ios::binary), f2(path2, std::ios::binary);
    const std::string bytes1((std::istreambuf_iterator<char>(f1)), {});
    const std::string bytes2((std::istreambuf_iterator<char>(f2)), {});
    CHECK(bytes1 == bytes2);
    std::remove(path);
    std::remove(path2);
}

TEST_CASE("checkpoint: lora adapters and cursors survive the round trip") {
    const char* path = "ckpt_lora.bin";
    Fixture f = two_stage_fixture(Method::lora, 72);
    save_checkpoint(*f.model, path);
    const FlameModel back = load_checkpoint(path);
    REQUIRE(back.lora().size() == f.model->lora().size());
    for (const auto& [key, ad] : f.model->lora()) {
        REQUIRE(back.lora().count(key));
        CHECK(bit_equal(ad.a, back.lora().at(key).a));
        CHECK(bit_equal(ad.b, back.lora().at(key).b));
    }
    CHECK(back.method() == Method::lora);
    std::remove(path);
}

TEST_CASE("checkpoint: format errors are rejected") {
    const char* path = "ckpt_bad.bin";
    {
        std::ofstream out(path, std::ios::binary);
        out << "NOTACKPT garbage";
    }
    CHECK_THROWS_AS(load_checkpoint(path), format_error);
    {
        std::ofstream out(path, std::ios::binary);
        out << "FLMCKPT1";  // magic only, then truncation
    }
    CHECK_THROWS_AS(load_checkpoint(path), format_error);
    CHECK_THROWS_AS(load_checkpoint("does_not_exist.bin"), format_error);
    std::remove(path);
}

TEST_CASE("checkpoint: a live component blocks saving") {
    ModelConfig cfg;
    cfg.d = 4;
    cfg.d_h = 8;
    cfg.n_experts = 2;
    cfg.k_top = 1;
    FlameModel model(cfg, Method::flame);
    SplitRng rng(73);
    SplitRng init = rng.split("init");
    model.experts().push_back(make_expert(cfg, 0, 0, init, 1.0));
    CHECK_THROWS_AS(save_checkpoint(model, "ckpt_live.bin"), contract_error);
    std::remove("ckpt_live.bin");
}
