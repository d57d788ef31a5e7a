#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <vector>

#include "loraedge/nn.hpp"
#include "loraedge/rng.hpp"
#include "loraedge/tensor.hpp"
#include "oracle.hpp"

using namespace loraedge;
using namespace loraedge::nn;

namespace {

Tensor random_tensor(Shape shape, Rng& rng) {
    Tensor t(std::move(shape));
    for (std::int64_t i = 0; i < t.size(); ++i) t[i] = rng.normal();
    return t;
}

std::vector<std::int64_t> random_labels(std::int64_t n, std::int64_t classes, Rng& rng) {
    std::vector<std::int64_t> labels(static_cast<std::size_t>(n));
    for (auto& l : labels) l = static_cast<std::int64_t>(rng.bounded(static_cast<std::uint64_t>(classes)));
    return labels;
}

// finite-difference check of every gradient backward materializes
void check_all_gradients(const Model& m, const Tensor& x, const std::vector<std::int64_t>& labels,
                         Mode mode, double tol) {
    Model work = m;
    auto [logits, cache] = forward(work, x, mode);
    const LossResult loss = softmax_cross_entropy(logits, labels);
    const GradMap grads = backward(work, cache, loss.grad_logits);
    std::int64_t trainables = 0;
    for (const auto& [key, flag] : m.trainable)
        if (flag) ++trainables;
    REQUIRE(static_cast<std::int64_t>(grads.size()) == trainables);
    for (const auto& [key, g] : grads) {
        auto f = [&](const std::vector<double>& v) {
            Model probe = m;
            probe.params.at(key) = Tensor(g.shape(), v);
            Tensor lg = forward(probe, x, mode).first;
            return softmax_cross_entropy(lg, labels).loss;
        };
        const auto rep = oracle::fd_check(f, m.params.at(key).vec(), g.vec(), 1e-5);
        INFO("slot (", key.layer, ", ", key.name, ") worst rel ", rep.max_rel);
        CHECK(rep.max_rel <= tol);
    }
}

} // namespace

TEST_CASE("shape inference and chain validation") {
    using L = LayerSpec;
    std::vector<LayerSpec> good{L::conv1d(3, 8, 5, 1, 2), L::batchnorm(8), L::relu(),
                                L::maxpool(2), L::global_avg_pool(), L::dense(8, 4)};
    const auto shapes = infer_shapes(good, {3, 64});
    CHECK(shapes_equal(shapes[0], {8, 64}));
    CHECK(shapes_equal(shapes[3], {8, 32}));
    CHECK(shapes_equal(shapes.back(), {4}));

    CHECK_THROWS_AS(infer_shapes({L::conv1d(4, 8, 3)}, {3, 64}), ShapeError);
    CHECK_THROWS_AS(infer_shapes({L::dense(10, 4)}, {3, 64}), ShapeError);
    CHECK_THROWS_AS(infer_shapes({L::skip_add()}, {3, 64}), ShapeError);
    CHECK_THROWS_AS(infer_shapes({L::skip_save()}, {3, 64}), ShapeError);
    // skip shape mismatch across a channel change
    CHECK_THROWS_AS(infer_shapes({L::skip_save(), L::conv1d(3, 8, 5, 1, 2), L::skip_add()}, {3, 64}),
                    ShapeError);
    CHECK_THROWS_AS(infer_shapes({L::maxpool(100)}, {3, 64}), ShapeError);
}

TEST_CASE("identity dense layer passes input through") {
    Model m = build_model({LayerSpec::dense(3, 3)}, {3}, 1);
    Tensor& w = m.param(0, "weight");
    w.fill(0.0);
    for (std::int64_t i = 0; i < 3; ++i) w.at(i, i) = 1.0;
    Rng rng(2);
    Tensor x = random_tensor({4, 3}, rng);
    Tensor y = predict(m, x);
    CHECK(max_abs_diff(y, x) == 0.0);
}

TEST_CASE("forward rejects mismatched input") {
    Model m = build_model({LayerSpec::dense(3, 2)}, {3}, 1);
    CHECK_THROWS_AS(predict(m, Tensor({4, 5})), ShapeError);
    CHECK_THROWS_AS(predict(m, Tensor({3})), ShapeError);
}

TEST_CASE("batchnorm train-mode statistics and running updates") {
    Model m = build_model({LayerSpec::batchnorm(1)}, {1, 2}, 1);
    Tensor x({2, 1, 2}, {1.0, 2.0, 3.0, 4.0});
    auto [y, cache] = forward(m, x, Mode::Train);
    const double mean = 2.5, var = 1.25; // biased
    const double inv = 1.0 / std::sqrt(var + 1e-5);
    CHECK(y[0] == doctest::Approx((1.0 - mean) * inv).epsilon(1e-12));
    CHECK(y[3] == doctest::Approx((4.0 - mean) * inv).epsilon(1e-12));
    CHECK(m.param(0, "bn-running-mean")[0] == doctest::Approx(0.1 * mean).epsilon(1e-12));
    CHECK(m.param(0, "bn-running-var")[0] ==
          doctest::Approx(0.9 * 1.0 + 0.1 * (5.0 / 3.0)).epsilon(1e-12)); // unbiased var 5/3

    // eval mode reads running stats and never mutates
    const Tensor rm_before = m.param(0, "bn-running-mean");
    const Tensor rv_before = m.param(0, "bn-running-var");
    Tensor ye = predict(m, x);
    CHECK(max_abs_diff(m.param(0, "bn-running-mean"), rm_before) == 0.0);
    CHECK(max_abs_diff(m.param(0, "bn-running-var"), rv_before) == 0.0);
    const double rinv = 1.0 / std::sqrt(rv_before[0] + 1e-5);
    CHECK(ye[0] == doctest::Approx((1.0 - rm_before[0]) * rinv).epsilon(1e-12));
}

TEST_CASE("gradients: conv1d model") {
    using L = LayerSpec;
    Model m = build_model({L::conv1d(2, 3, 3, 1, 1), L::relu(), L::global_avg_pool(), L::dense(3, 3)},
                          {2, 8}, 11);
    Rng rng(12);
    Tensor x = random_tensor({3, 2, 8}, rng);
    check_all_gradients(m, x, random_labels(3, 3, rng), Mode::Eval, 1e-6);
}

TEST_CASE("gradients: conv2d + maxpool + flatten model") {
    using L = LayerSpec;
    Model m = build_model(
        {L::conv2d(2, 4, 3, 1, 1), L::relu(), L::maxpool(2), L::flatten(), L::dense(4 * 3 * 3, 3)},
        {2, 6, 6}, 13);
    Rng rng(14);
    Tensor x = random_tensor({2, 2, 6, 6}, rng);
    check_all_gradients(m, x, random_labels(2, 3, rng), Mode::Eval, 1e-6);
}

TEST_CASE("gradients: batchnorm in train and eval modes") {
    using L = LayerSpec;
    Model m = build_model({L::conv2d(2, 4, 3, 1, 1), L::batchnorm(4), L::relu(),
                           L::global_avg_pool(), L::dense(4, 3)},
                          {2, 5, 5}, 15);
    Rng rng(16);
    // nudge running stats away from init so eval mode is non-trivial
    Model warm = m;
    Tensor xw = random_tensor({4, 2, 5, 5}, rng);
    forward(warm, xw, Mode::Train);
    Tensor x = random_tensor({3, 2, 5, 5}, rng);
    const auto labels = random_labels(3, 3, rng);
    check_all_gradients(warm, x, labels, Mode::Train, 1e-6);
    check_all_gradients(warm, x, labels, Mode::Eval, 1e-6);
}

TEST_CASE("gradients: residual skip block") {
    using L = LayerSpec;
    Model m = build_model({L::conv2d(2, 4, 3, 1, 1), L::skip_save(), L::conv2d(4, 4, 3, 1, 1),
                           L::relu(), L::conv2d(4, 4, 3, 1, 1), L::skip_add(), L::relu(),
                           L::global_avg_pool(), L::dense(4, 3)},
                          {2, 5, 5}, 17);
    Rng rng(18);
    Tensor x = random_tensor({2, 2, 5, 5}, rng);
    check_all_gradients(m, x, random_labels(2, 3, rng), Mode::Eval, 1e-6);
}

TEST_CASE("gradients: every fixture backbone end to end") {
    Rng rng(19);
    for (const auto& name : backbone_names()) {
        Model m = build_backbone(name, 3, 64, 4, 21);
        Tensor x = name == "calanet-toy" ? random_tensor({2, 3, 64}, rng)
                                         : random_tensor({2, 3, 8, 8}, rng);
        const auto labels = random_labels(2, 4, rng);
        INFO("backbone ", name);
        check_all_gradients(m, x, labels, Mode::Train, 2e-6);
    }
}

TEST_CASE("backward materializes nothing when everything is frozen") {
    Model m = build_model({LayerSpec::dense(3, 2)}, {3}, 1);
    m.freeze_all();
    Rng rng(22);
    Tensor x = random_tensor({2, 3}, rng);
    auto [logits, cache] = forward(m, x, Mode::Eval);
    const LossResult loss = softmax_cross_entropy(logits, {0, 1});
    CHECK(backward(m, cache, loss.grad_logits).empty());
}

TEST_CASE("zero upstream gradient gives zero parameter gradients") {
    using L = LayerSpec;
    Model m = build_model({L::conv1d(2, 3, 3, 1, 1), L::relu(), L::global_avg_pool(), L::dense(3, 2)},
                          {2, 6}, 23);
    Rng rng(24);
    Tensor x = random_tensor({2, 2, 6}, rng);
    auto [logits, cache] = forward(m, x, Mode::Eval);
    const GradMap grads = backward(m, cache, Tensor(logits.shape()));
    CHECK(!grads.empty());
    for (const auto& [key, g] : grads) CHECK(frobenius_norm(g) == 0.0);
}

TEST_CASE("stale cache is rejected") {
    Model m = build_model({LayerSpec::dense(3, 2)}, {3}, 1);
    Rng rng(25);
    Tensor x = random_tensor({2, 3}, rng);
    auto [logits, cache] = forward(m, x, Mode::Eval);
    m.bump_structure();
    CHECK_THROWS_AS(backward(m, cache, Tensor({2, 2})), StateError);
}

TEST_CASE("softmax cross entropy values and gradient") {
    Tensor uniform({2, 4});
    const LossResult lu = softmax_cross_entropy(uniform, {0, 3});
    CHECK(lu.loss == doctest::Approx(std::log(4.0)).epsilon(1e-12));

    Tensor margin({1, 3}, {100.0, 0.0, 0.0});
    CHECK(softmax_cross_entropy(margin, {0}).loss < 1e-12);

    Rng rng(26);
    Tensor logits = random_tensor({4, 5}, rng);
    const auto labels = random_labels(4, 5, rng);
    const LossResult lr = softmax_cross_entropy(logits, labels);
    auto f = [&](const std::vector<double>& v) {
        return softmax_cross_entropy(Tensor(logits.shape(), v), labels).loss;
    };
    const auto rep = oracle::fd_check(f, logits.vec(), lr.grad_logits.vec(), 1e-6);
    CHECK(rep.max_rel <= 1e-6);

    CHECK_THROWS_AS(softmax_cross_entropy(logits, {0, 1, 2, 5}), ShapeError);
    CHECK_THROWS_AS(softmax_cross_entropy(logits, {0, 1}), ShapeError);
    CHECK_THROWS_AS(softmax_cross_entropy(Tensor({4}), {0}), ShapeError);
}

TEST_CASE("adam: zero gradient leaves parameters, advances the step counter") {
    Model m = build_model({LayerSpec::dense(3, 2)}, {3}, 1);
    const Tensor w_before = m.param(0, "weight");
    AdamState state;
    GradMap grads;
    grads[SlotKey{0, "weight"}] = Tensor({2, 3});
    grads[SlotKey{0, "bias"}] = Tensor({2});
    adam_step(m, grads, state, 0.01);
    CHECK(state.t == 1);
    CHECK(max_abs_diff(m.param(0, "weight"), w_before) == 0.0);
}

TEST_CASE("adam matches the scalar reference implementation") {
    Model m = build_model({LayerSpec::dense(1, 1, /*bias=*/false)}, {1}, 1);
    m.param(0, "weight")[0] = 0.7;
    AdamState state;
    oracle::AdamScalar ref_state;
    double ref_param = 0.7;
    const double grads_seq[] = {0.3, -1.2, 0.05, 0.9, 0.9};
    for (int t = 1; t <= 5; ++t) {
        GradMap g;
        g[SlotKey{0, "weight"}] = Tensor({1, 1}, {grads_seq[t - 1]});
        adam_step(m, g, state, 0.01);
        ref_param = oracle::adam_reference_step(ref_param, grads_seq[t - 1], ref_state, t, 0.01);
        CHECK(m.param(0, "weight")[0] == doctest::Approx(ref_param).epsilon(1e-15));
    }
    // first step moves by almost exactly -lr
    Model m2 = build_model({LayerSpec::dense(1, 1, false)}, {1}, 1);
    m2.param(0, "weight")[0] = 0.0;
    AdamState s2;
    GradMap g2;
    g2[SlotKey{0, "weight"}] = Tensor({1, 1}, {0.3});
    adam_step(m2, g2, s2, 0.01);
    CHECK(m2.param(0, "weight")[0] == doctest::Approx(-0.01).epsilon(1e-6));
}

TEST_CASE("adam rejects gradient/mask mismatches") {
    Model m = build_model({LayerSpec::dense(3, 2)}, {3}, 1);
    m.trainable[SlotKey{0, "bias"}] = false;
    AdamState state;
    GradMap spurious;
    spurious[SlotKey{0, "weight"}] = Tensor({2, 3});
    spurious[SlotKey{0, "bias"}] = Tensor({2});
    CHECK_THROWS_AS(adam_step(m, spurious, state, 0.01), StateError);

    GradMap missing; // weight is trainable but absent
    CHECK_THROWS_AS(adam_step(m, missing, state, 0.01), StateError);

    GradMap unknown;
    unknown[SlotKey{0, "weight"}] = Tensor({2, 3});
    unknown[SlotKey{7, "weight"}] = Tensor({2, 3});
    CHECK_THROWS_AS(adam_step(m, unknown, state, 0.01), StateError);
}

TEST_CASE("freeze-mask law: frozen slots bitwise unchanged across training") {
    using L = LayerSpec;
    Model m = build_model({L::conv1d(2, 4, 3, 1, 1), L::batchnorm(4), L::relu(),
                           L::global_avg_pool(), L::dense(4, 3)},
                          {2, 8}, 31);
    // freeze everything except the dense head
    m.freeze_all();
    m.trainable[SlotKey{4, "weight"}] = true;
    m.trainable[SlotKey{4, "bias"}] = true;
    const auto snapshot = m.params;
    Rng rng(32);
    AdamState state;
    for (int step = 0; step < 10; ++step) {
        Tensor x = random_tensor({4, 2, 8}, rng);
        const auto labels = random_labels(4, 3, rng);
        auto [logits, cache] = forward(m, x, Mode::Eval);
        const LossResult loss = softmax_cross_entropy(logits, labels);
        adam_step(m, backward(m, cache, loss.grad_logits), state, 0.01);
    }
    for (const auto& [key, before] : snapshot) {
        if (m.trainable.at(key)) continue;
        const Tensor& after = m.params.at(key);
        for (std::int64_t i = 0; i < before.size(); ++i) CHECK(before[i] == after[i]);
    }
    CHECK(max_abs_diff(m.param(4, "weight"), snapshot.at(SlotKey{4, "weight"})) > 0.0);
}

TEST_CASE("forward determinism: same seed, same logits") {
    Model a = build_backbone("calanet-toy", 3, 64, 4, 77);
    Model b = build_backbone("calanet-toy", 3, 64, 4, 77);
    Rng rng(33);
    Tensor x = random_tensor({5, 3, 64}, rng);
    Tensor ya = predict(a, x);
    Tensor yb = predict(b, x);
    for (std::int64_t i = 0; i < ya.size(); ++i) CHECK(ya[i] == yb[i]);
}

TEST_CASE("fixture backbones assemble with expected widths") {
    Model cal = build_backbone("calanet-toy", 3, 64, 4, 1);
    CHECK(shapes_equal(cal.input_shape, {3, 64}));
    std::vector<std::int64_t> bn_widths;
    for (std::size_t i = 0; i < cal.layers.size(); ++i)
        if (cal.layers[i].kind == LayerKind::BatchNorm) bn_widths.push_back(cal.layers[i].channels);
    CHECK(bn_widths == std::vector<std::int64_t>{8, 16, 32});

    Model tres = build_backbone("tresnet-toy", 3, 64, 4, 1);
    CHECK(shapes_equal(tres.input_shape, {3, 8, 8}));
    Model mob = build_backbone("mobilenet-toy", 3, 64, 4, 1);
    CHECK(shapes_equal(mob.input_shape, {3, 8, 8}));

    Rng rng(34);
    Tensor x1 = random_tensor({2, 3, 64}, rng);
    Tensor x2 = random_tensor({2, 3, 8, 8}, rng);
    CHECK(shapes_equal(predict(cal, x1).shape(), {2, 4}));
    CHECK(shapes_equal(predict(tres, x2).shape(), {2, 4}));
    CHECK(shapes_equal(predict(mob, x2).shape(), {2, 4}));

    CHECK_THROWS_AS(build_backbone("resnet-152", 3, 64, 4, 1), IoError);
    CHECK_THROWS_AS(build_backbone("tresnet-toy", 3, 60, 4, 1), ShapeError);
    CHECK(analytic_flops(cal) > 0);
}

TEST_CASE("golden logits: frozen reference for the calanet fixture") {
    // Recorded from the first verified build; any drift here means the
    // numerics changed, not that the reference is wrong.
    Model m = build_backbone("calanet-toy", 3, 64, 4, 42);
    Rng rng(7);
    Tensor x({2, 3, 64});
    for (std::int64_t i = 0; i < x.size(); ++i) x[i] = rng.normal();
    Tensor y = predict(m, x);
    const double golden[] = {1.4719228483873474,  2.1768932196532962, 3.5307314729261559,
                             -1.0873784556026167, 1.5783108249420919, 1.5937761697242621,
                             3.4673203910509489,  -1.3689709996911643};
    REQUIRE(y.size() == 8);
    for (std::int64_t i = 0; i < 8; ++i)
        CHECK(y[i] == doctest::Approx(golden[i]).epsilon(1e-12));
}

TEST_CASE("maxpool handles non-divisible extents") {
    using L = LayerSpec;
    Model m = build_model({L::maxpool(2)}, {1, 7}, 1);
    Tensor x({1, 1, 7}, {5, 1, 2, 9, 3, 3, 8});
    Tensor y = predict(m, x);
    CHECK(shapes_equal(y.shape(), {1, 1, 3}));
    CHECK(y[0] == 5.0);
    CHECK(y[1] == 9.0);
    CHECK(y[2] == 3.0);
}
