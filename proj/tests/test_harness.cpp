#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "loraedge/harness.hpp"
#include "loraedge/rng.hpp"
#include "oracle.hpp"

using namespace loraedge;
using namespace loraedge::harness;
namespace fs = std::filesystem;

namespace {

// small end-to-end fixture: cheap enough for unit tests, still a real protocol
FixtureConfig micro_fixture() {
    FixtureConfig f;
    f.backbone = "tresnet-toy";
    f.classes = 3;
    f.per_class = 12;
    f.pretrain_steps = 25;
    f.batch = 32;
    return f;
}

bool curves_equal(const RunResult& a, const RunResult& b) {
    if (a.loss.size() != b.loss.size() || a.curve.size() != b.curve.size()) return false;
    for (std::size_t i = 0; i < a.loss.size(); ++i)
        if (a.loss[i] != b.loss[i]) return false;
    for (std::size_t i = 0; i < a.curve.size(); ++i)
        if (a.curve[i].step != b.curve[i].step || a.curve[i].f1 != b.curve[i].f1) return false;
    return a.confusion == b.confusion;
}

} // namespace

TEST_CASE("macro_f1: closed-form cases and oracle agreement") {
    CHECK(macro_f1({{7, 0}, {0, 3}}) == 1.0);
    CHECK(macro_f1({{5, 5}, {5, 5}}) == doctest::Approx(0.5).epsilon(1e-12));
    // class 1 has no truth and no predictions: contributes 0
    CHECK(macro_f1({{2, 0}, {0, 0}}) == doctest::Approx(0.5).epsilon(1e-12));

    Rng rng(201);
    for (int trial = 0; trial < 50; ++trial) {
        const std::size_t n = 40;
        std::vector<int> truth(n), pred(n);
        ConfusionMatrix confusion(4, std::vector<std::int64_t>(4, 0));
        for (std::size_t i = 0; i < n; ++i) {
            truth[i] = static_cast<int>(rng.bounded(4));
            pred[i] = static_cast<int>(rng.bounded(4));
            ++confusion[static_cast<std::size_t>(truth[i])][static_cast<std::size_t>(pred[i])];
        }
        const double want = oracle::macro_f1_loops(truth, pred, 4);
        CHECK(macro_f1(confusion) == doctest::Approx(want).epsilon(1e-12));
    }

    CHECK_THROWS_AS(macro_f1({}), ShapeError);
    CHECK_THROWS_AS(macro_f1({{1, 2}}), ShapeError);
    CHECK_THROWS_AS(macro_f1({{1, -2}, {0, 1}}), ShapeError);
}

TEST_CASE("method names and learning-rate defaults") {
    for (Method m : {Method::LoraEdge, Method::LoraC, Method::LoraLinear, Method::Bias,
                     Method::Bn, Method::Full})
        CHECK(method_from_name(method_name(m)) == m);
    CHECK_THROWS_AS(method_from_name("lora"), IoError);

    ExperimentConfig cfg;
    cfg.method = Method::LoraEdge;
    CHECK(effective_lr(cfg) == 0.01);
    cfg.method = Method::Bias;
    CHECK(effective_lr(cfg) == 0.01);
    cfg.method = Method::Full;
    CHECK(effective_lr(cfg) == 0.001);
    cfg.lr = 0.5;
    CHECK(effective_lr(cfg) == 0.5);
}

TEST_CASE("evaluate: conservation and batching invariance") {
    data::WindowDataset d = data::gen_synthetic(3, 3, 64, 7, 202);
    nn::Model m = nn::build_backbone("calanet-toy", 3, 64, 3, 203);
    const EvalResult r = evaluate(m, d);
    CHECK(r.f1 >= 0.0);
    CHECK(r.f1 <= 1.0);
    REQUIRE(r.confusion.size() == 3);
    std::int64_t total = 0;
    for (std::size_t truth = 0; truth < 3; ++truth) {
        std::int64_t row = 0;
        for (auto v : r.confusion[truth]) row += v;
        CHECK(row == 7); // per-class test count
        total += row;
    }
    CHECK(total == d.size());
    const EvalResult tiny = evaluate(m, d, 5);
    CHECK(tiny.confusion == r.confusion);
}

TEST_CASE("finetune: preparation is checked") {
    data::WindowDataset d = data::gen_synthetic(3, 3, 64, 10, 204);
    ExperimentConfig cfg;
    cfg.method = Method::LoraEdge;
    cfg.steps = 1;

    nn::Model bare = nn::build_backbone("calanet-toy", 3, 64, 3, 205);
    CHECK_THROWS_AS(finetune(bare, d, cfg), StateError);

    nn::Model wrong = nn::build_backbone("calanet-toy", 3, 64, 3, 205);
    ExperimentConfig linear_cfg = cfg;
    linear_cfg.method = Method::LoraLinear;
    prepare_method(wrong, linear_cfg);
    CHECK_THROWS_AS(finetune(wrong, d, cfg), StateError);

    nn::Model biased = nn::build_backbone("calanet-toy", 3, 64, 3, 205);
    ExperimentConfig bias_cfg = cfg;
    bias_cfg.method = Method::Bias;
    prepare_method(biased, bias_cfg);
    ExperimentConfig bn_cfg = cfg;
    bn_cfg.method = Method::Bn;
    CHECK_THROWS_AS(finetune(biased, d, bn_cfg), StateError);
}

TEST_CASE("finetune: zero steps equals zero-shot evaluation") {
    data::WindowDataset d = data::gen_synthetic(3, 3, 64, 10, 206);
    nn::Model m = nn::build_backbone("calanet-toy", 3, 64, 3, 207);
    ExperimentConfig cfg;
    cfg.method = Method::LoraEdge;
    cfg.steps = 0;
    prepare_method(m, cfg);
    const RunResult r = finetune(m, d, cfg);
    CHECK(r.loss.empty());
    REQUIRE(r.curve.size() == 1);
    CHECK(r.curve[0].step == 0);
    CHECK(r.final_f1 == r.zero_shot_f1);
    const EvalResult direct = evaluate(m, data::split_dataset(d, 0.8).test);
    CHECK(r.final_f1 == direct.f1);
    CHECK(r.confusion == direct.confusion);
}

TEST_CASE("finetune: protocol fidelity and determinism") {
    data::WindowDataset d = data::gen_synthetic(3, 3, 64, 12, 208);
    nn::Model pre = nn::build_backbone("calanet-toy", 3, 64, 3, 209);
    ExperimentConfig cfg;
    cfg.method = Method::LoraEdge;
    cfg.steps = 12;
    cfg.eval_interval = 5;
    cfg.batch = 16;
    cfg.seed = 9;

    nn::Model a = pre;
    prepare_method(a, cfg);
    const RunResult ra = finetune(a, d, cfg);
    CHECK(ra.loss.size() == 12); // exactly cfg.steps optimizer steps
    REQUIRE(ra.curve.size() == 4); // steps 0, 5, 10, 12
    CHECK(ra.curve[0].step == 0);
    CHECK(ra.curve[1].step == 5);
    CHECK(ra.curve[2].step == 10);
    CHECK(ra.curve[3].step == 12);
    CHECK(ra.params.trainable_total == a.trainable_count());

    nn::Model b = pre;
    prepare_method(b, cfg);
    const RunResult rb = finetune(b, d, cfg);
    CHECK(curves_equal(ra, rb));

    // exact eval-count law on a divisible budget
    nn::Model c = pre;
    ExperimentConfig cfg2 = cfg;
    cfg2.steps = 10;
    cfg2.eval_interval = 2;
    prepare_method(c, cfg2);
    CHECK(finetune(c, d, cfg2).curve.size() == 6); // 10/2 + 1
}

TEST_CASE("method isolation: only the method's slots move") {
    data::WindowDataset d = data::gen_synthetic(3, 3, 64, 12, 210);
    nn::Model pre = nn::build_backbone("calanet-toy", 3, 64, 3, 211);
    pretrain(pre, d, 10, 0.01, 212, 16);

    struct Case {
        Method method;
        // returns true when the slot is allowed to change
        bool (*allowed)(const std::string&);
    };
    const Case cases[] = {
        {Method::LoraEdge, [](const std::string& n) { return n == "tt-core-1"; }},
        {Method::Bias, [](const std::string& n) { return n == "bias"; }},
        {Method::Bn, [](const std::string& n) { return n == "bn-gamma" || n == "bn-beta"; }},
    };
    for (const auto& c : cases) {
        nn::Model m = pre;
        ExperimentConfig cfg;
        cfg.method = c.method;
        cfg.steps = 8;
        cfg.batch = 16;
        prepare_method(m, cfg);
        const auto snapshot = m.params;
        finetune(m, d, cfg);
        INFO("method ", method_name(c.method));
        for (const auto& [key, before] : snapshot) {
            const Tensor& after = m.params.at(key);
            if (c.allowed(key.name)) continue;
            bool identical = true;
            for (std::int64_t i = 0; i < before.size() && identical; ++i)
                identical = before[i] == after[i];
            CHECK(identical);
        }
    }
}

TEST_CASE("steps_to_threshold") {
    RunResult r;
    r.curve = {{0, 0.2}, {5, 0.5}, {10, 0.8}, {12, 0.8}};
    CHECK(steps_to_threshold(r, 0.0) == 0);
    CHECK(steps_to_threshold(r, 0.4) == 5);
    CHECK(steps_to_threshold(r, 0.8) == 10);
    CHECK(!steps_to_threshold(r, 1.1).has_value());
}

TEST_CASE("fixture: pretraining learns, the shift hurts") {
    const FixtureConfig cfg = micro_fixture();
    const Fixture f = make_fixture(cfg);
    // even the micro budget beats 3-class chance comfortably
    CHECK(f.source_f1 >= 0.6);
    CHECK(f.zero_shot_f1 < f.source_f1);
    CHECK(f.target.domain_tag == "rotation");
    CHECK(f.target.size() == f.source.size());

    // deterministic end to end
    const Fixture g = make_fixture(cfg);
    CHECK(f.source_f1 == g.source_f1);
    CHECK(f.zero_shot_f1 == g.zero_shot_f1);
}

TEST_CASE("ablation: six arms, shared budget, strict bookkeeping") {
    AblationConfig cfg;
    cfg.fixture = micro_fixture();
    cfg.run.steps = 6;
    cfg.run.eval_interval = 3;
    cfg.run.batch = 16;
    cfg.run.rank = 2;
    const AblationResult r = run_ablation_cores(cfg);
    REQUIRE(r.arms.size() == 6);
    CHECK(r.arms[0].name == "g1-only");
    CHECK(r.arms[4].name == "all");
    CHECK(r.arms[5].name == "all-zero-g1");
    for (const auto& arm : r.arms) {
        CHECK(arm.run.curve.size() == 3); // steps 0, 3, 6
        CHECK(arm.run.loss.size() == 6);
    }
    CHECK(r.arms[0].trainable < r.arms[4].trainable); // {1} is a strict subset of all
    CHECK(r.arms[4].trainable == r.arms[5].trainable);

    const std::string csv = ablation_csv(r);
    std::istringstream lines(csv);
    std::string line;
    std::getline(lines, line);
    CHECK(line == "arm,trainable,step,macro_f1");
    std::int64_t rows = 0;
    while (std::getline(lines, line)) ++rows;
    CHECK(rows == 18); // 6 arms x 3 eval points
}

TEST_CASE("init sweep: zero steps give exactly zero delta") {
    SweepConfig cfg;
    cfg.fixture = micro_fixture();
    cfg.run.steps = 0;
    cfg.lrs = {0.01};
    cfg.sigma2s = {1e-3, 1e-2};
    cfg.seeds = {0, 1};
    const SweepResult r = run_init_sweep(cfg);
    REQUIRE(r.cells.size() == 2);
    for (const auto& c : r.cells) {
        CHECK(c.delta == 0.0); // both arms are the same zero start
        CHECK(c.f1_tt == c.f1_rand);
    }
    CHECK(r.mean_delta == 0.0);

    SweepConfig empty = cfg;
    empty.lrs = {};
    CHECK_THROWS_AS(run_init_sweep(empty), ShapeError);
}

TEST_CASE("csv emission: headers, layout, 6 significant digits") {
    CHECK(format_sig6(0.123456789) == "0.123457");
    CHECK(format_sig6(1234567.0) == "1.23457e+06");
    CHECK(format_sig6(1.0) == "1");

    RunResult r;
    r.loss = {1.5, 1.25};
    r.curve = {{0, 0.25}, {1, 0.5}, {2, 0.75}};
    const std::string csv = run_csv(r);
    std::istringstream lines(csv);
    std::string line;
    std::getline(lines, line);
    CHECK(line == "step,loss,macro_f1");
    std::getline(lines, line);
    CHECK(line == "0,,0.25");
    std::getline(lines, line);
    CHECK(line == "1,1.5,0.5");
    std::getline(lines, line);
    CHECK(line == "2,1.25,0.75");

    EvalResult ev;
    ev.f1 = 0.875;
    ev.confusion = {{3, 1}, {0, 4}};
    const std::string evcsv = eval_csv(ev);
    CHECK(evcsv.find("macro_f1,0.875\n") == 0);
    CHECK(evcsv.find("truth\\pred,0,1\n") != std::string::npos);
    CHECK(evcsv.find("0,3,1\n") != std::string::npos);
    CHECK(evcsv.find("1,0,4\n") != std::string::npos);

    SweepResult sw;
    sw.cells = {{0.01, 0.001, 0.8, 0.7, 0.1}};
    const std::string swcsv = sweep_csv(sw);
    CHECK(swcsv.find("lr,sigma2,f1_tt,f1_rand,delta_f1\n") == 0);
    CHECK(swcsv.find("0.01,0.001,0.8,0.7,0.1\n") != std::string::npos);
}

TEST_CASE("config loaders: nested fields, defaults, malformed input") {
    const fs::path dir = fs::temp_directory_path() / "loraedge-harness-tests";
    fs::create_directories(dir);

    {
        std::ofstream out(dir / "ablate.json");
        out << R"({
  "fixture": {"backbone": "mobilenet-toy", "classes": 5, "per_class": 9,
              "shift": "channel-permutation,seed=4", "pretrain_steps": 17},
  "run": {"steps": 21, "batch": 8, "lr": 0.02, "rank": 3, "seed": 6, "eval_interval": 7}
})";
    }
    const AblationConfig a = load_ablation_config((dir / "ablate.json").string());
    CHECK(a.fixture.backbone == "mobilenet-toy");
    CHECK(a.fixture.classes == 5);
    CHECK(a.fixture.per_class == 9);
    CHECK(a.fixture.pretrain_steps == 17);
    CHECK(a.fixture.length == 64);         // default preserved
    CHECK(a.run.steps == 21);
    CHECK(a.run.batch == 8);
    CHECK(a.run.lr == 0.02);
    CHECK(a.run.rank == 3);
    CHECK(a.run.eval_interval == 7);
    CHECK(a.run.train_fraction == 0.8);    // default preserved

    {
        std::ofstream out(dir / "sweep.json");
        out << R"({
  "fixture": {"pretrain_steps": 11},
  "run": {"steps": 5},
  "lrs": [0.001, 0.01, 0.1],
  "sigma2s": [1e-4],
  "seeds": [3, 4]
})";
    }
    const SweepConfig s = load_sweep_config((dir / "sweep.json").string());
    CHECK(s.lrs == std::vector<double>{0.001, 0.01, 0.1});
    CHECK(s.sigma2s == std::vector<double>{1e-4});
    CHECK(s.seeds == std::vector<std::uint64_t>{3, 4});
    CHECK(s.run.steps == 5);

    {
        std::ofstream out(dir / "bad.json");
        out << "{broken";
    }
    CHECK_THROWS_AS(load_ablation_config((dir / "bad.json").string()), IoError);
    CHECK_THROWS_AS(load_sweep_config((dir / "missing.json").string()), IoError);
    {
        std::ofstream out(dir / "wrongtype.json");
        out << R"({"run": {"steps": "many"}})";
    }
    CHECK_THROWS_AS(load_ablation_config((dir / "wrongtype.json").string()), IoError);
}
