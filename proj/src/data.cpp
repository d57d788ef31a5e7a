#include "loraedge/data.hpp"

#include <cmath>
#include <numbers>

#include "loraedge/rng.hpp"

namespace loraedge::data {

void WindowDataset::validate() const {
    if (windows.order() != 3) {
        throw ShapeError("dataset windows must be [N, channels, length], got " +
                         shape_to_string(windows.shape()));
    }
    if (static_cast<std::int64_t>(labels.size()) != windows.extent(0)) {
        throw ShapeError("label count mismatches window count");
    }
    if (class_count < 1) throw ShapeError("class_count must be >= 1");
    for (const auto l : labels) {
        if (l < 0 || l >= class_count) throw ShapeError("label out of range: " + std::to_string(l));
    }
}

namespace {

constexpr int kHarmonics = 3;
constexpr double kNoiseSigma = 0.25;
// spread of class directions around the shared per-harmonic axis; small
// enough that modest channel rotations push windows across class boundaries
constexpr double kDirectionSpread = 0.6;

// Class identity lives in per-harmonic *directions* in channel space: class c
// emits harmonic h along a unit vector tilted off a harmonic-shared axis. A
// channel rotation tilts every direction, which is exactly the kind of
// nuisance the classifier has to re-adapt to. Families are seed-independent
// so datasets drawn with different seeds still describe the same classes.
struct Family {
    double amp[kHarmonics];
    std::vector<double> dir[kHarmonics]; // unit vectors, one per harmonic
};

Family family_for(std::int64_t cls, std::int64_t channels) {
    Family f;
    for (int h = 0; h < kHarmonics; ++h) {
        Rng axis_rng(0xA715D00Du + static_cast<std::uint64_t>(h) * 7919u +
                     static_cast<std::uint64_t>(channels) * 104729u);
        Rng cls_rng(0x5EEDFA11u + static_cast<std::uint64_t>(cls) * 1000003u +
                    static_cast<std::uint64_t>(h) * 7919u +
                    static_cast<std::uint64_t>(channels) * 104729u);
        auto& dir = f.dir[h];
        dir.resize(static_cast<std::size_t>(channels));
        double norm = 0.0;
        for (auto& v : dir) {
            v = axis_rng.normal() + kDirectionSpread * cls_rng.normal();
            norm += v * v;
        }
        norm = std::sqrt(norm);
        if (norm < 1e-12) {
            dir[0] = 1.0;
            norm = 1.0;
        }
        for (auto& v : dir) v /= norm;
        f.amp[h] = cls_rng.uniform(0.6, 1.1);
    }
    return f;
}

} // namespace

WindowDataset gen_synthetic(std::int64_t classes, std::int64_t channels, std::int64_t length,
                            std::int64_t n_per_class, std::uint64_t seed) {
    if (classes < 1 || channels < 1 || length < 1 || n_per_class < 1) {
        throw ShapeError("gen_synthetic: all counts must be >= 1");
    }
    const std::int64_t n = classes * n_per_class;
    WindowDataset d;
    d.windows = Tensor({n, channels, length});
    d.labels.resize(static_cast<std::size_t>(n));
    d.class_count = classes;

    std::vector<Family> families(static_cast<std::size_t>(classes));
    for (std::int64_t c = 0; c < classes; ++c)
        families[static_cast<std::size_t>(c)] = family_for(c, channels);

    Rng rng(seed);
    std::int64_t row = 0;
    for (std::int64_t c = 0; c < classes; ++c) {
        const Family& f = families[static_cast<std::size_t>(c)];
        for (std::int64_t k = 0; k < n_per_class; ++k, ++row) {
            d.labels[static_cast<std::size_t>(row)] = c;
            // per-window phases shared across channels keep the directional
            // structure intact while decorrelating windows
            double phase[kHarmonics];
            for (int h = 0; h < kHarmonics; ++h) phase[h] = rng.uniform(0.0, 2.0 * std::numbers::pi);
            const double window_scale = rng.uniform(0.8, 1.2);
            for (std::int64_t ch = 0; ch < channels; ++ch) {
                for (std::int64_t t = 0; t < length; ++t) {
                    double v = 0.0;
                    for (int h = 0; h < kHarmonics; ++h) {
                        const double omega = 2.0 * std::numbers::pi * static_cast<double>(h + 1) /
                                             static_cast<double>(length);
                        v += f.amp[h] * f.dir[h][static_cast<std::size_t>(ch)] *
                             std::sin(omega * static_cast<double>(t) + phase[h]);
                    }
                    d.windows.at(row, ch, t) = window_scale * v + rng.normal(0.0, kNoiseSigma);
                }
            }
        }
    }
    return d;
}

std::string shift_kind_name(ShiftKind k) {
    switch (k) {
        case ShiftKind::Rotation: return "rotation";
        case ShiftKind::ChannelPermutation: return "channel-permutation";
        case ShiftKind::GainOffset: return "gain-offset";
        case ShiftKind::UserStyle: return "user-style";
    }
    throw StateError("shift_kind_name: unknown kind");
}

std::pair<ShiftSpec, bool> parse_shift_spec(const std::string& text) {
    ShiftSpec s;
    if (text.empty() || text == "none") return {s, false};
    std::vector<std::string> parts;
    std::size_t start = 0;
    while (start <= text.size()) {
        const std::size_t comma = text.find(',', start);
        parts.push_back(text.substr(start, comma == std::string::npos ? comma : comma - start));
        if (comma == std::string::npos) break;
        start = comma + 1;
    }
    const std::string& kind = parts[0];
    if (kind == "rotation") {
        s.kind = ShiftKind::Rotation;
    } else if (kind == "channel-permutation") {
        s.kind = ShiftKind::ChannelPermutation;
    } else if (kind == "gain-offset") {
        s.kind = ShiftKind::GainOffset;
    } else if (kind == "user-style") {
        s.kind = ShiftKind::UserStyle;
    } else {
        throw IoError("unknown shift kind: " + kind);
    }
    for (std::size_t i = 1; i < parts.size(); ++i) {
        const std::size_t eq = parts[i].find('=');
        if (eq == std::string::npos) throw IoError("shift option needs key=value: " + parts[i]);
        const std::string key = parts[i].substr(0, eq);
        const double value = std::stod(parts[i].substr(eq + 1));
        if (key == "angle") {
            s.angle_deg = value;
        } else if (key == "gain") {
            s.gain = value;
        } else if (key == "offset") {
            s.offset = value;
        } else if (key == "warp") {
            s.warp = value;
        } else if (key == "seed") {
            s.seed = static_cast<std::uint64_t>(value);
        } else {
            throw IoError("unknown shift option: " + key);
        }
    }
    return {s, true};
}

namespace {

WindowDataset rotate_channels(const WindowDataset& d, const ShiftSpec& s) {
    const std::int64_t ch = d.channels();
    if (ch % 3 != 0) {
        throw ShapeError("rotation shift needs a channel count divisible by 3, got " +
                         std::to_string(ch));
    }
    WindowDataset out = d;
    if (s.angle_deg == 0.0) return out;
    Rng rng(s.seed);
    // random rotation axis, shared by every channel triple
    double ux = 0.0, uy = 0.0, uz = 0.0, norm = 0.0;
    do {
        ux = rng.normal();
        uy = rng.normal();
        uz = rng.normal();
        norm = std::sqrt(ux * ux + uy * uy + uz * uz);
    } while (norm < 1e-6);
    ux /= norm;
    uy /= norm;
    uz /= norm;
    const double theta = s.angle_deg * std::numbers::pi / 180.0;
    const double c = std::cos(theta), sn = std::sin(theta), omc = 1.0 - c;
    const std::int64_t n = d.size(), len = d.length();
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t g = 0; g < ch / 3; ++g)
            for (std::int64_t t = 0; t < len; ++t) {
                const double x = d.windows.at(i, g * 3 + 0, t);
                const double y = d.windows.at(i, g * 3 + 1, t);
                const double z = d.windows.at(i, g * 3 + 2, t);
                const double dot = ux * x + uy * y + uz * z;
                const double cx = uy * z - uz * y;
                const double cy = uz * x - ux * z;
                const double cz = ux * y - uy * x;
                out.windows.at(i, g * 3 + 0, t) = x * c + cx * sn + ux * dot * omc;
                out.windows.at(i, g * 3 + 1, t) = y * c + cy * sn + uy * dot * omc;
                out.windows.at(i, g * 3 + 2, t) = z * c + cz * sn + uz * dot * omc;
            }
    return out;
}

WindowDataset permute_channels(const WindowDataset& d, const ShiftSpec& s) {
    const std::int64_t ch = d.channels();
    if (ch < 2) throw ShapeError("channel permutation needs >= 2 channels");
    Rng rng(s.seed);
    std::vector<std::int64_t> perm(static_cast<std::size_t>(ch));
    for (std::int64_t i = 0; i < ch; ++i) perm[static_cast<std::size_t>(i)] = i;
    rng.shuffle(perm);
    WindowDataset out = d;
    const std::int64_t n = d.size(), len = d.length();
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t c = 0; c < ch; ++c)
            for (std::int64_t t = 0; t < len; ++t)
                out.windows.at(i, c, t) = d.windows.at(i, perm[static_cast<std::size_t>(c)], t);
    return out;
}

WindowDataset gain_offset(const WindowDataset& d, const ShiftSpec& s) {
    WindowDataset out = d;
    if (s.gain == 0.0 && s.offset == 0.0) return out;
    Rng rng(s.seed);
    const std::int64_t ch = d.channels();
    std::vector<double> gains(static_cast<std::size_t>(ch)), offsets(static_cast<std::size_t>(ch));
    for (std::int64_t c = 0; c < ch; ++c) {
        gains[static_cast<std::size_t>(c)] = rng.uniform(1.0 - s.gain, 1.0 + s.gain);
        offsets[static_cast<std::size_t>(c)] = rng.uniform(-s.offset, s.offset);
    }
    const std::int64_t n = d.size(), len = d.length();
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t c = 0; c < ch; ++c)
            for (std::int64_t t = 0; t < len; ++t)
                out.windows.at(i, c, t) = d.windows.at(i, c, t) * gains[static_cast<std::size_t>(c)] +
                                          offsets[static_cast<std::size_t>(c)];
    return out;
}

WindowDataset time_warp(const WindowDataset& d, const ShiftSpec& s) {
    if (s.warp < 0.0 || s.warp >= 1.0) throw ShapeError("user-style warp must lie in [0, 1)");
    WindowDataset out = d;
    Rng rng(s.seed);
    const std::int64_t n = d.size(), ch = d.channels(), len = d.length();
    const double phi = rng.uniform(0.0, 2.0 * std::numbers::pi);
    std::vector<double> amp(static_cast<std::size_t>(ch));
    for (std::int64_t c = 0; c < ch; ++c) amp[static_cast<std::size_t>(c)] = rng.uniform(0.9, 1.1);
    // smooth monotone resampling grid shared by all windows
    std::vector<double> pos(static_cast<std::size_t>(len), 0.0);
    double cum = 0.0;
    for (std::int64_t t = 1; t < len; ++t) {
        cum += 1.0 + s.warp * std::sin(2.0 * std::numbers::pi * static_cast<double>(t) /
                                           static_cast<double>(len) +
                                       phi);
        pos[static_cast<std::size_t>(t)] = cum;
    }
    const double total = pos[static_cast<std::size_t>(len - 1)];
    for (std::int64_t t = 0; t < len; ++t)
        pos[static_cast<std::size_t>(t)] *= static_cast<double>(len - 1) / total;
    for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t c = 0; c < ch; ++c)
            for (std::int64_t t = 0; t < len; ++t) {
                const double p = pos[static_cast<std::size_t>(t)];
                const auto lo = static_cast<std::int64_t>(p);
                const std::int64_t hi = std::min(lo + 1, len - 1);
                const double frac = p - static_cast<double>(lo);
                const double v =
                    d.windows.at(i, c, lo) * (1.0 - frac) + d.windows.at(i, c, hi) * frac;
                out.windows.at(i, c, t) = amp[static_cast<std::size_t>(c)] * v;
            }
    return out;
}

} // namespace

WindowDataset apply_shift(const WindowDataset& d, const ShiftSpec& s) {
    d.validate();
    WindowDataset out;
    switch (s.kind) {
        case ShiftKind::Rotation: out = rotate_channels(d, s); break;
        case ShiftKind::ChannelPermutation: out = permute_channels(d, s); break;
        case ShiftKind::GainOffset: out = gain_offset(d, s); break;
        case ShiftKind::UserStyle: out = time_warp(d, s); break;
    }
    out.domain_tag = shift_kind_name(s.kind);
    return out;
}

SplitResult split_dataset(const WindowDataset& d, double train_fraction) {
    d.validate();
    if (train_fraction <= 0.0 || train_fraction >= 1.0) {
        throw ShapeError("train fraction must lie strictly between 0 and 1");
    }
    std::vector<std::vector<std::int64_t>> by_class(static_cast<std::size_t>(d.class_count));
    for (std::int64_t i = 0; i < d.size(); ++i)
        by_class[static_cast<std::size_t>(d.labels[static_cast<std::size_t>(i)])].push_back(i);

    std::vector<std::int64_t> train_idx, test_idx;
    for (const auto& rows : by_class) {
        const auto n_train = static_cast<std::int64_t>(
            std::floor(train_fraction * static_cast<double>(rows.size())));
        for (std::size_t j = 0; j < rows.size(); ++j) {
            (static_cast<std::int64_t>(j) < n_train ? train_idx : test_idx).push_back(rows[j]);
        }
    }
    const auto take = [&](const std::vector<std::int64_t>& idx) {
        WindowDataset out;
        out.class_count = d.class_count;
        out.domain_tag = d.domain_tag;
        out.windows = Tensor({static_cast<std::int64_t>(idx.size()), d.channels(), d.length()});
        out.labels.resize(idx.size());
        const std::int64_t row_elems = d.channels() * d.length();
        for (std::size_t j = 0; j < idx.size(); ++j) {
            const double* src = d.windows.data() + idx[j] * row_elems;
            double* dst = out.windows.data() + static_cast<std::int64_t>(j) * row_elems;
            for (std::int64_t e = 0; e < row_elems; ++e) dst[e] = src[e];
            out.labels[j] = d.labels[static_cast<std::size_t>(idx[j])];
        }
        return out;
    };
    return {take(train_idx), take(test_idx)};
}

} // namespace loraedge::data
