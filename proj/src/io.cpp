#include "loraedge/io.hpp"

#include <bit>
#include <cstdint>
#include <cstring>
#include <filesystem>
#include <fstream>

#include <json.hpp>

static_assert(std::endian::native == std::endian::little,
              "serialization assumes a little-endian host");

namespace loraedge::io {

namespace {

using nlohmann::json;
namespace fs = std::filesystem;

constexpr int kFormatVersion = 1;

void write_file(const fs::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + path.string());
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    if (!out) throw IoError("write failed: " + path.string());
}

std::string read_file(const fs::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open: " + path.string());
    std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (in.bad()) throw IoError("read failed: " + path.string());
    return text;
}

json parse_json(const fs::path& path) {
    try {
        return json::parse(read_file(path));
    } catch (const json::parse_error& e) {
        throw IoError("malformed JSON in " + path.string() + ": " + e.what());
    }
}

json layer_to_json(const nn::LayerSpec& spec) {
    json j;
    j["kind"] = nn::layer_kind_name(spec.kind);
    switch (spec.kind) {
        case nn::LayerKind::Conv1D:
        case nn::LayerKind::Conv2D:
            j["c_in"] = spec.c_in;
            j["c_out"] = spec.c_out;
            j["kernel"] = spec.kernel;
            j["stride"] = spec.stride;
            j["padding"] = spec.padding;
            j["bias"] = spec.bias;
            break;
        case nn::LayerKind::BatchNorm:
            j["channels"] = spec.channels;
            break;
        case nn::LayerKind::MaxPool:
            j["pool"] = spec.pool;
            break;
        case nn::LayerKind::Dense:
            j["in"] = spec.in;
            j["out"] = spec.out;
            j["bias"] = spec.bias;
            break;
        default:
            break;
    }
    return j;
}

template <typename T>
T get_field(const json& j, const std::string& key) {
    if (!j.contains(key)) throw IoError("manifest missing field: " + key);
    try {
        return j.at(key).get<T>();
    } catch (const json::exception& e) {
        throw IoError("manifest field '" + key + "' has wrong type: " + e.what());
    }
}

nn::LayerSpec layer_from_json(const json& j) {
    using L = nn::LayerSpec;
    const auto kind = nn::layer_kind_from_name(get_field<std::string>(j, "kind"));
    switch (kind) {
        case nn::LayerKind::Conv1D:
            return L::conv1d(get_field<std::int64_t>(j, "c_in"), get_field<std::int64_t>(j, "c_out"),
                             get_field<std::int64_t>(j, "kernel"), get_field<std::int64_t>(j, "stride"),
                             get_field<std::int64_t>(j, "padding"), get_field<bool>(j, "bias"));
        case nn::LayerKind::Conv2D:
            return L::conv2d(get_field<std::int64_t>(j, "c_in"), get_field<std::int64_t>(j, "c_out"),
                             get_field<std::int64_t>(j, "kernel"), get_field<std::int64_t>(j, "stride"),
                             get_field<std::int64_t>(j, "padding"), get_field<bool>(j, "bias"));
        case nn::LayerKind::BatchNorm:
            return L::batchnorm(get_field<std::int64_t>(j, "channels"));
        case nn::LayerKind::ReLU:
            return L::relu();
        case nn::LayerKind::MaxPool:
            return L::maxpool(get_field<std::int64_t>(j, "pool"));
        case nn::LayerKind::GlobalAvgPool:
            return L::global_avg_pool();
        case nn::LayerKind::Dense:
            return L::dense(get_field<std::int64_t>(j, "in"), get_field<std::int64_t>(j, "out"),
                            get_field<bool>(j, "bias"));
        case nn::LayerKind::Flatten:
            return L::flatten();
        case nn::LayerKind::SkipSave:
            return L::skip_save();
        case nn::LayerKind::SkipAdd:
            return L::skip_add();
    }
    throw IoError("layer_from_json: unknown kind");
}

void write_doubles(const fs::path& path, const std::vector<const Tensor*>& tensors) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + path.string());
    for (const Tensor* t : tensors) {
        out.write(reinterpret_cast<const char*>(t->data()),
                  static_cast<std::streamsize>(t->size() * sizeof(double)));
    }
    if (!out) throw IoError("write failed: " + path.string());
}

} // namespace

void save_model(const nn::Model& m, const std::string& dir) {
    fs::create_directories(dir);
    json manifest;
    manifest["format_version"] = kFormatVersion;
    manifest["input_shape"] = m.input_shape;

    json layers = json::array();
    for (const auto& spec : m.layers) layers.push_back(layer_to_json(spec));
    manifest["layers"] = std::move(layers);

    json slots = json::array();
    std::vector<const Tensor*> blobs;
    std::int64_t offset = 0;
    for (const auto& [key, value] : m.params) {
        json s;
        s["layer"] = key.layer;
        s["name"] = key.name;
        s["shape"] = value.shape();
        s["offset"] = offset;
        s["trainable"] = m.trainable.at(key);
        slots.push_back(std::move(s));
        blobs.push_back(&value);
        offset += value.size();
    }
    manifest["slots"] = std::move(slots);

    json adapters = json::array();
    for (const auto& a : m.adapters) {
        json rec;
        rec["method"] = nn::adapter_method_name(a.method);
        rec["layer"] = a.layer;
        rec["rank"] = a.rank;
        rec["trainable_cores"] = a.trainable_cores;
        rec["kernel_scaled"] = a.kernel_scaled;
        adapters.push_back(std::move(rec));
    }
    manifest["adapters"] = std::move(adapters);

    write_file(fs::path(dir) / "manifest.json", manifest.dump(2) + "\n");
    write_doubles(fs::path(dir) / "params.bin", blobs);
}

nn::Model load_model(const std::string& dir) {
    const fs::path root(dir);
    const json manifest = parse_json(root / "manifest.json");
    const auto version = get_field<int>(manifest, "format_version");
    if (version != kFormatVersion) {
        throw IoError("unsupported bundle format_version " + std::to_string(version));
    }

    nn::Model m;
    m.input_shape = get_field<Shape>(manifest, "input_shape");
    if (!manifest.contains("layers") || !manifest.at("layers").is_array()) {
        throw IoError("manifest missing field: layers");
    }
    for (const auto& lj : manifest.at("layers")) m.layers.push_back(layer_from_json(lj));
    nn::infer_shapes(m.layers, m.input_shape);

    if (!manifest.contains("slots") || !manifest.at("slots").is_array()) {
        throw IoError("manifest missing field: slots");
    }
    const std::string blob = read_file(root / "params.bin");
    std::int64_t total = 0;
    for (const auto& sj : manifest.at("slots")) total += shape_product(get_field<Shape>(sj, "shape"));
    if (blob.size() != static_cast<std::size_t>(total) * sizeof(double)) {
        throw IoError("params.bin holds " + std::to_string(blob.size() / sizeof(double)) +
                      " doubles, manifest expects " + std::to_string(total));
    }
    for (const auto& sj : manifest.at("slots")) {
        const auto layer = get_field<std::int64_t>(sj, "layer");
        const auto name = get_field<std::string>(sj, "name");
        const auto shape = get_field<Shape>(sj, "shape");
        const auto offset = get_field<std::int64_t>(sj, "offset");
        const auto trainable = get_field<bool>(sj, "trainable");
        const std::int64_t count = shape_product(shape);
        if (offset < 0 || (offset + count) * static_cast<std::int64_t>(sizeof(double)) >
                              static_cast<std::int64_t>(blob.size())) {
            throw IoError("slot offset out of range for (" + std::to_string(layer) + ", " + name + ")");
        }
        std::vector<double> values(static_cast<std::size_t>(count));
        std::memcpy(values.data(), blob.data() + offset * sizeof(double),
                    static_cast<std::size_t>(count) * sizeof(double));
        m.add_slot(layer, name, Tensor(shape, std::move(values)), trainable);
    }

    if (!manifest.contains("adapters") || !manifest.at("adapters").is_array()) {
        throw IoError("manifest missing field: adapters");
    }
    for (const auto& aj : manifest.at("adapters")) {
        nn::Adapter a;
        a.method = nn::adapter_method_from_name(get_field<std::string>(aj, "method"));
        a.layer = get_field<std::int64_t>(aj, "layer");
        a.rank = get_field<std::int64_t>(aj, "rank");
        a.trainable_cores = get_field<std::vector<int>>(aj, "trainable_cores");
        a.kernel_scaled = get_field<bool>(aj, "kernel_scaled");
        m.adapters.push_back(std::move(a));
    }
    return m;
}

void save_dataset(const data::WindowDataset& d, const std::string& dir) {
    d.validate();
    fs::create_directories(dir);
    json meta;
    meta["format_version"] = kFormatVersion;
    meta["n"] = d.size();
    meta["channels"] = d.channels();
    meta["length"] = d.length();
    meta["class_count"] = d.class_count;
    meta["domain_tag"] = d.domain_tag;
    write_file(fs::path(dir) / "meta.json", meta.dump(2) + "\n");

    std::ofstream data_out(fs::path(dir) / "data.bin", std::ios::binary | std::ios::trunc);
    if (!data_out) throw IoError("cannot open for writing: " + dir + "/data.bin");
    data_out.write(reinterpret_cast<const char*>(d.windows.data()),
                   static_cast<std::streamsize>(d.windows.size() * sizeof(double)));
    if (!data_out) throw IoError("write failed: " + dir + "/data.bin");

    std::vector<std::int32_t> labels32(d.labels.begin(), d.labels.end());
    std::ofstream label_out(fs::path(dir) / "labels.bin", std::ios::binary | std::ios::trunc);
    if (!label_out) throw IoError("cannot open for writing: " + dir + "/labels.bin");
    label_out.write(reinterpret_cast<const char*>(labels32.data()),
                    static_cast<std::streamsize>(labels32.size() * sizeof(std::int32_t)));
    if (!label_out) throw IoError("write failed: " + dir + "/labels.bin");
}

data::WindowDataset load_dataset(const std::string& dir) {
    const fs::path root(dir);
    const json meta = parse_json(root / "meta.json");
    const auto version = get_field<int>(meta, "format_version");
    if (version != kFormatVersion) {
        throw IoError("unsupported dataset format_version " + std::to_string(version));
    }
    data::WindowDataset d;
    const auto n = get_field<std::int64_t>(meta, "n");
    const auto channels = get_field<std::int64_t>(meta, "channels");
    const auto length = get_field<std::int64_t>(meta, "length");
    d.class_count = get_field<std::int64_t>(meta, "class_count");
    d.domain_tag = get_field<std::string>(meta, "domain_tag");

    const std::string blob = read_file(root / "data.bin");
    const std::int64_t want = n * channels * length;
    if (blob.size() != static_cast<std::size_t>(want) * sizeof(double)) {
        throw IoError("data.bin holds " + std::to_string(blob.size() / sizeof(double)) +
                      " doubles, meta expects " + std::to_string(want));
    }
    std::vector<double> values(static_cast<std::size_t>(want));
    std::memcpy(values.data(), blob.data(), blob.size());
    d.windows = Tensor({n, channels, length}, std::move(values));

    const std::string lblob = read_file(root / "labels.bin");
    if (lblob.size() != static_cast<std::size_t>(n) * sizeof(std::int32_t)) {
        throw IoError("labels.bin holds " + std::to_string(lblob.size() / sizeof(std::int32_t)) +
                      " labels, meta expects " + std::to_string(n));
    }
    std::vector<std::int32_t> labels32(static_cast<std::size_t>(n));
    std::memcpy(labels32.data(), lblob.data(), lblob.size());
    d.labels.assign(labels32.begin(), labels32.end());
    d.validate();
    return d;
}

} // namespace loraedge::io
