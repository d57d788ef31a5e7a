#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "loraedge/data.hpp"
#include "loraedge/io.hpp"
#include "loraedge/nn.hpp"
#include "loraedge/peft.hpp"
#include "loraedge/rng.hpp"

using namespace loraedge;
using namespace loraedge::nn;
namespace fs = std::filesystem;

namespace {

fs::path scratch() {
    const fs::path p = fs::temp_directory_path() / "loraedge-io-tests";
    fs::remove_all(p);
    fs::create_directories(p);
    return p;
}

std::string slurp(const fs::path& p) {
    std::ifstream in(p, std::ios::binary);
    REQUIRE(in.good());
    return std::string(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void dump(const fs::path& p, const std::string& text) {
    std::ofstream out(p, std::ios::binary);
    out << text;
}

} // namespace

TEST_CASE("model bundle: bit-exact round trip of an adapted model") {
    const fs::path dir = scratch();
    Model m = build_backbone("tresnet-toy", 3, 64, 4, 90);
    peft::attach_lora_edge(m, {.r_target = 2, .trainable_cores = {1}, .zero_init_core1 = {},
                               .train_head = true});
    // move the trainables off their init so the blob is not all structure
    Rng rng(91);
    for (auto& [key, flag] : m.trainable)
        if (flag)
            for (std::int64_t i = 0; i < m.params.at(key).size(); ++i)
                m.params.at(key)[i] += 0.01 * rng.normal();

    io::save_model(m, (dir / "bundle").string());
    CHECK(fs::exists(dir / "bundle" / "manifest.json"));
    CHECK(fs::exists(dir / "bundle" / "params.bin"));

    Model back = io::load_model((dir / "bundle").string());
    CHECK(back.input_shape == m.input_shape);
    REQUIRE(back.layers.size() == m.layers.size());
    for (std::size_t i = 0; i < m.layers.size(); ++i)
        CHECK(back.layers[i].kind == m.layers[i].kind);
    REQUIRE(back.params.size() == m.params.size());
    for (const auto& [key, value] : m.params) {
        REQUIRE(back.params.count(key) == 1);
        const Tensor& other = back.params.at(key);
        REQUIRE(same_shape(value, other));
        for (std::int64_t i = 0; i < value.size(); ++i) CHECK(value[i] == other[i]);
        CHECK(back.trainable.at(key) == m.trainable.at(key));
    }
    REQUIRE(back.adapters.size() == m.adapters.size()); // one record per adapted conv
    for (std::size_t i = 0; i < m.adapters.size(); ++i) {
        CHECK(back.adapters[i].method == AdapterMethod::LoraEdge);
        CHECK(back.adapters[i].layer == m.adapters[i].layer);
        CHECK(back.adapters[i].rank == 2);
        CHECK(back.adapters[i].trainable_cores == m.adapters[i].trainable_cores);
    }

    // logits agree bitwise
    Rng xr(92);
    Tensor x({2, 3, 8, 8});
    for (std::int64_t i = 0; i < x.size(); ++i) x[i] = xr.normal();
    Tensor ya = predict(m, x);
    Tensor yb = predict(back, x);
    for (std::int64_t i = 0; i < ya.size(); ++i) CHECK(ya[i] == yb[i]);

    // save(load(bundle)) reproduces both files byte for byte
    io::save_model(back, (dir / "bundle2").string());
    CHECK(slurp(dir / "bundle" / "manifest.json") == slurp(dir / "bundle2" / "manifest.json"));
    CHECK(slurp(dir / "bundle" / "params.bin") == slurp(dir / "bundle2" / "params.bin"));
}

TEST_CASE("model bundle: merge after round trip still works") {
    const fs::path dir = scratch();
    Model m = build_backbone("calanet-toy", 3, 64, 4, 93);
    peft::attach_lora_edge(m, {.r_target = 2});
    m.param(0, "tt-core-1").fill(0.05);
    io::save_model(m, (dir / "b").string());
    Model back = io::load_model((dir / "b").string());
    Rng xr(94);
    Tensor x({2, 3, 64});
    for (std::int64_t i = 0; i < x.size(); ++i) x[i] = xr.normal();
    const Tensor two_path = predict(back, x);
    peft::merge_adapters(back);
    CHECK(max_abs_diff(predict(back, x), two_path) <= 1e-9);
}

TEST_CASE("dataset round trip is bit exact") {
    const fs::path dir = scratch();
    data::WindowDataset d = data::gen_synthetic(3, 3, 32, 6, 95);
    d = data::apply_shift(d, {data::ShiftKind::Rotation, 25.0, 0.0, 0.0, 0.0, 7});
    io::save_dataset(d, (dir / "ds").string());
    data::WindowDataset back = io::load_dataset((dir / "ds").string());
    CHECK(back.class_count == d.class_count);
    CHECK(back.domain_tag == "rotation");
    CHECK(back.labels == d.labels);
    REQUIRE(same_shape(back.windows, d.windows));
    for (std::int64_t i = 0; i < d.windows.size(); ++i) CHECK(back.windows[i] == d.windows[i]);
}

TEST_CASE("load errors: missing, truncated, malformed, wrong version") {
    const fs::path dir = scratch();
    CHECK_THROWS_AS(io::load_model((dir / "nope").string()), IoError);
    CHECK_THROWS_AS(io::load_dataset((dir / "nope").string()), IoError);

    Model m = build_model({LayerSpec::dense(3, 2)}, {3}, 1);
    io::save_model(m, (dir / "ok").string());

    // truncated blob
    fs::copy(dir / "ok", dir / "trunc", fs::copy_options::recursive);
    const std::string blob = slurp(dir / "trunc" / "params.bin");
    dump(dir / "trunc" / "params.bin", blob.substr(0, blob.size() - 8));
    CHECK_THROWS_AS(io::load_model((dir / "trunc").string()), IoError);

    // malformed manifest
    fs::copy(dir / "ok", dir / "garbage", fs::copy_options::recursive);
    dump(dir / "garbage" / "manifest.json", "{not json");
    CHECK_THROWS_AS(io::load_model((dir / "garbage").string()), IoError);

    // wrong version
    fs::copy(dir / "ok", dir / "vers", fs::copy_options::recursive);
    std::string manifest = slurp(dir / "vers" / "manifest.json");
    const auto pos = manifest.find("\"format_version\": 1");
    REQUIRE(pos != std::string::npos);
    manifest.replace(pos, std::string("\"format_version\": 1").size(), "\"format_version\": 9");
    dump(dir / "vers" / "manifest.json", manifest);
    CHECK_THROWS_AS(io::load_model((dir / "vers").string()), IoError);
}

TEST_CASE("golden manifest stays stable") {
    const fs::path dir = scratch();
    Model m = build_model({LayerSpec::conv1d(2, 3, 3, 1, 1), LayerSpec::relu(),
                           LayerSpec::global_avg_pool(), LayerSpec::dense(3, 2)},
                          {2, 8}, 7);
    peft::attach_lora_edge(m, {.r_target = 1});
    io::save_model(m, (dir / "tiny").string());
    const std::string golden_path = std::string(LORAEDGE_TEST_DIR) + "/fixtures/tiny_manifest.json";
    CHECK(slurp(dir / "tiny" / "manifest.json") == slurp(fs::path(golden_path)));
}
