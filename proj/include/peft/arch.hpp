#pragma once

#include "peft/core.hpp"

#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace peft {

/// Transformer encoder dimensions.
struct ArchShape {
    std::string name = "custom";
    int layers = 4;        // L
    int d_model = 64;      // d
    int heads = 4;         // H
    int d_ff = 256;
    int in_features = 20;  // F, width of the frames fed to the frontend
    int max_frames = 64;   // T_max

    void validate() const {
        if (layers < 1) throw ConfigError("arch: layers must be >= 1");
        if (d_model < 1 || heads < 1) throw ConfigError("arch: d_model and heads must be positive");
        if (d_model % heads != 0) {
            throw ConfigError("arch: d_model " + std::to_string(d_model) +
                              " not divisible by heads " + std::to_string(heads));
        }
        if (d_ff < d_model) throw ConfigError("arch: d_ff must be >= d_model");
        if (in_features < 1) throw ConfigError("arch: in_features must be >= 1");
        if (max_frames < 1) throw ConfigError("arch: max_frames must be >= 1");
    }

    int head_dim() const { return d_model / heads; }

    friend bool operator==(const ArchShape&, const ArchShape&) = default;
};

namespace presets {

inline ArchShape toy() { return {"toy", 4, 64, 4, 256, 20, 64}; }

/// Transformer part of wav2vec 2.0 base; the frontend width is the CNN extractor's 512 channels.
inline ArchShape wav2vec2_base() { return {"wav2vec2-base", 12, 768, 12, 3072, 512, 1500}; }

inline ArchShape hubert_large() { return {"hubert-large", 24, 1024, 16, 4096, 512, 1500}; }

inline std::vector<std::string> names() { return {"toy", "wav2vec2-base", "hubert-large"}; }

inline std::optional<ArchShape> by_name(std::string_view name) {
    if (name == "toy") return toy();
    if (name == "wav2vec2-base") return wav2vec2_base();
    if (name == "hubert-large") return hubert_large();
    return std::nullopt;
}

} // namespace presets
} // namespace peft
