#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "loraedge/tensor.hpp"

namespace loraedge::data {

struct WindowDataset {
    Tensor windows;                    // [N, channels, length]
    std::vector<std::int64_t> labels;  // length N, values in [0, class_count)
    std::int64_t class_count = 0;
    std::string domain_tag = "source";

    std::int64_t size() const { return windows.extent(0); }
    std::int64_t channels() const { return windows.extent(1); }
    std::int64_t length() const { return windows.extent(2); }
    void validate() const;
};

/// Deterministic multi-channel signal families: shared base frequencies, with
/// class identity carried by cross-channel amplitude/phase structure so that
/// channel-mixing shifts actually hurt a trained classifier.
WindowDataset gen_synthetic(std::int64_t classes, std::int64_t channels, std::int64_t length,
                            std::int64_t n_per_class, std::uint64_t seed);

enum class ShiftKind { Rotation, ChannelPermutation, GainOffset, UserStyle };

std::string shift_kind_name(ShiftKind k);

struct ShiftSpec {
    ShiftKind kind = ShiftKind::Rotation;
    double angle_deg = 0.0;   // rotation
    double gain = 0.0;        // gain-offset: per-channel gain in [1-gain, 1+gain]
    double offset = 0.0;      // gain-offset: per-channel offset in [-offset, offset]
    double warp = 0.0;        // user-style: time-warp strength in [0, 1)
    std::uint64_t seed = 0;
};

/// "kind,key=value,..." e.g. "rotation,angle=30,seed=7" | "channel-permutation,seed=3"
/// | "gain-offset,gain=0.2,offset=0.1" | "user-style,warp=0.3" | "none".
/// Returns false through the bool for "none" (no shift).
std::pair<ShiftSpec, bool> parse_shift_spec(const std::string& text);

/// Deterministic transformed copy; shape and labels preserved.
WindowDataset apply_shift(const WindowDataset& d, const ShiftSpec& s);

struct SplitResult {
    WindowDataset train;
    WindowDataset test;
};

/// Stratified deterministic split: within each class (dataset order), the
/// first floor(frac * n_c) windows go to train, the rest to test.
SplitResult split_dataset(const WindowDataset& d, double train_fraction);

} // namespace loraedge::data
