#pragma once

// Synthetic emotion corpora with an acted and a natural domain, session
// structure for leave-one-session-out evaluation, and JSON-Lines I/O.

#include "peft/core.hpp"

#include <nlohmann/json.hpp>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numbers>
#include <optional>
#include <random>
#include <sstream>
#include <string>
#include <string_view>
#include <vector>

namespace peft {

enum class Emotion { happy = 0, sad = 1, angry = 2, neutral = 3 };
inline constexpr int kNumEmotions = 4;
inline constexpr std::array<Emotion, 4> kEmotions = {Emotion::happy, Emotion::sad, Emotion::angry,
                                                      Emotion::neutral};

inline const char* to_string(Emotion e) {
    switch (e) {
    case Emotion::happy: return "happy";
    case Emotion::sad: return "sad";
    case Emotion::angry: return "angry";
    case Emotion::neutral: return "neutral";
    }
    return "?";
}

inline std::optional<Emotion> parse_emotion(std::string_view s) {
    for (auto e : kEmotions) {
        if (s == to_string(e)) return e;
    }
    return std::nullopt;
}

enum class Domain { acted, natural };

inline const char* to_string(Domain d) { return d == Domain::acted ? "acted" : "natural"; }

inline std::optional<Domain> parse_domain(std::string_view s) {
    if (s == "acted") return Domain::acted;
    if (s == "natural") return Domain::natural;
    return std::nullopt;
}

/// Valence, arousal, dominance anchor per class.
inline std::array<double, 3> vad_anchor(Emotion e) {
    switch (e) {
    case Emotion::happy: return {0.8, 0.6, 0.5};
    case Emotion::sad: return {-0.7, -0.5, -0.4};
    case Emotion::angry: return {-0.6, 0.8, 0.7};
    case Emotion::neutral: return {0.0, 0.0, 0.0};
    }
    return {0.0, 0.0, 0.0};
}

struct Utterance {
    std::string id;
    Matrix frames;  // T x F
    Emotion label = Emotion::neutral;
    std::array<double, 3> vad{};
    int session = 1;
    Domain domain = Domain::acted;

    int frame_count() const { return static_cast<int>(frames.rows()); }

    friend bool operator==(const Utterance& a, const Utterance& b) {
        return a.id == b.id && a.label == b.label && a.vad == b.vad && a.session == b.session &&
               a.domain == b.domain && bit_identical(a.frames, b.frames);
    }
};

struct Corpus {
    std::string name;
    std::vector<Utterance> utterances;

    bool empty() const { return utterances.empty(); }
    std::size_t size() const { return utterances.size(); }

    /// Frame width, 0 for an empty corpus.
    int features() const { return empty() ? 0 : static_cast<int>(utterances.front().frames.cols()); }

    int sessions() const {
        int s = 0;
        for (const auto& u : utterances) s = std::max(s, u.session);
        return s;
    }

    friend bool operator==(const Corpus& a, const Corpus& b) { return a.utterances == b.utterances; }
};

/// Knobs for one domain of the synthetic corpus.
///
/// frames[t] = gain * (class_basis + session_offset) * (1 + 0.5 sin(2 pi f t / T + phase))
///             + domain_shift + noise_sigma * (e_t + utterance_ratio * e_u)
///
/// Class bases and session offsets depend only on `seed`, so an acted and a natural spec with the
/// same seed describe the same emotions recorded in two styles.
struct CorpusSpec {
    Domain domain = Domain::acted;
    int n_per_class = 100;     // utterances per class, spread over sessions
    int sessions = 5;
    int min_frames = 8;
    int max_frames = 16;
    int features = 20;
    double gain = 1.0;
    double noise_sigma = 0.3;
    double utterance_ratio = 2.0;  // per-utterance noise relative to per-frame noise
    double class_scale = 0.8;      // std-dev of class basis entries
    double session_scale = 0.3;    // std-dev of session offset entries
    double vad_noise = 0.1;
    std::vector<double> domain_shift;  // empty means no shift
    std::uint64_t seed = 0;

    static CorpusSpec acted(std::uint64_t seed = 0) {
        CorpusSpec s;
        s.domain = Domain::acted;
        s.seed = seed;
        return s;
    }

    static CorpusSpec natural(std::uint64_t seed = 0) {
        CorpusSpec s;
        s.domain = Domain::natural;
        s.gain = 0.6;
        s.noise_sigma = 0.5;
        s.seed = seed;
        s.domain_shift = default_shift(s.features, seed);
        return s;
    }

    /// A fixed covariate shift of norm 0.8 * sqrt(F) / 2 drawn from the world seed.
    static std::vector<double> default_shift(int features, std::uint64_t seed) {
        std::mt19937_64 rng(seed ^ 0x5b1f7ULL);
        std::normal_distribution<double> n(0.0, 1.0);
        std::vector<double> v(static_cast<std::size_t>(features));
        double norm = 0.0;
        for (auto& x : v) {
            x = n(rng);
            norm += x * x;
        }
        norm = std::sqrt(norm);
        const double target = 0.4 * std::sqrt(static_cast<double>(features));
        for (auto& x : v) x *= target / norm;
        return v;
    }

    void validate() const {
        auto fail = [](const std::string& m) { throw ConfigError("corpus spec: " + m); };
        if (sessions < 2) fail("sessions must be >= 2");
        if (n_per_class < sessions) fail("n_per_class must be >= sessions so every session has every class");
        if (min_frames < 1 || max_frames < min_frames) fail("frame range must satisfy 1 <= min <= max");
        if (features < 1) fail("features must be >= 1");
        if (!(gain > 0.0) || !std::isfinite(gain)) fail("gain must be positive");
        if (!(noise_sigma >= 0.0) || !(utterance_ratio >= 0.0) || !(class_scale > 0.0) ||
            !(session_scale >= 0.0) || !(vad_noise >= 0.0)) {
            fail("scales must be non-negative (class_scale positive)");
        }
        if (!domain_shift.empty() && static_cast<int>(domain_shift.size()) != features) {
            fail("domain_shift length " + std::to_string(domain_shift.size()) + " != features " +
                 std::to_string(features));
        }
    }
};

namespace detail {

inline std::uint64_t splitmix64(std::uint64_t x) {
    x += 0x9e3779b97f4a7c15ULL;
    x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
    x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
    return x ^ (x >> 31);
}

/// Counter-based sub-seed so utterance i is independent of generation order.
inline std::uint64_t sub_seed(std::uint64_t seed, std::uint64_t stream, std::uint64_t counter) {
    return splitmix64(splitmix64(seed ^ splitmix64(stream)) + counter);
}

} // namespace detail

/// Class bases (4 x F) and session offsets (S x F) shared by every domain of a seed.
struct CorpusWorld {
    Matrix class_bases;
    Matrix session_offsets;

    static CorpusWorld from(const CorpusSpec& spec) {
        std::mt19937_64 rng(detail::sub_seed(spec.seed, 1, 0));
        std::normal_distribution<double> n(0.0, 1.0);
        CorpusWorld w;
        w.class_bases = Matrix::NullaryExpr(kNumEmotions, spec.features, [&] { return n(rng); }) * spec.class_scale;
        w.session_offsets =
            Matrix::NullaryExpr(spec.sessions, spec.features, [&] { return n(rng); }) * spec.session_scale;
        return w;
    }
};

inline Utterance generate_utterance(const CorpusSpec& spec, const CorpusWorld& world, Emotion label,
                                    int session, std::uint64_t index) {
    const auto stream = static_cast<std::uint64_t>(spec.domain) + 100;
    std::mt19937_64 rng(detail::sub_seed(spec.seed, stream, index));
    std::normal_distribution<double> n(0.0, 1.0);
    std::uniform_int_distribution<int> len(spec.min_frames, spec.max_frames);
    std::uniform_real_distribution<double> freq(0.5, 2.0);
    std::uniform_real_distribution<double> phase(0.0, 2.0 * std::numbers::pi);

    const int T = len(rng);
    const double f = freq(rng);
    const double ph = phase(rng);
    const Index F = spec.features;

    Utterance u;
    u.label = label;
    u.session = session;
    u.domain = spec.domain;
    char buf[32];
    std::snprintf(buf, sizeof buf, "%s-%05llu", to_string(spec.domain), static_cast<unsigned long long>(index));
    u.id = buf;

    const RowVector signal = spec.gain * (world.class_bases.row(static_cast<Index>(label)) +
                                          world.session_offsets.row(session - 1));
    RowVector utt_noise(F);
    for (Index j = 0; j < F; ++j) utt_noise(j) = n(rng);
    utt_noise *= spec.noise_sigma * spec.utterance_ratio;

    u.frames.resize(T, F);
    for (int t = 0; t < T; ++t) {
        const double mod = 1.0 + 0.5 * std::sin(2.0 * std::numbers::pi * f * t / T + ph);
        for (Index j = 0; j < F; ++j) {
            double x = signal(j) * mod + utt_noise(j) + spec.noise_sigma * n(rng);
            if (!spec.domain_shift.empty()) x += spec.domain_shift[static_cast<std::size_t>(j)];
            u.frames(t, j) = x;
        }
    }
    const auto anchor = vad_anchor(label);
    for (int k = 0; k < 3; ++k) {
        u.vad[static_cast<std::size_t>(k)] =
            std::clamp(anchor[static_cast<std::size_t>(k)] + spec.vad_noise * std::clamp(n(rng), -3.0, 3.0), -1.0, 1.0);
    }
    return u;
}

/// Deterministic corpus: utterances ordered by session, then class.
inline Corpus generate_corpus(const CorpusSpec& spec) {
    spec.validate();
    const CorpusWorld world = CorpusWorld::from(spec);
    Corpus c;
    c.name = to_string(spec.domain);
    std::uint64_t index = 0;
    for (int s = 1; s <= spec.sessions; ++s) {
        for (auto e : kEmotions) {
            // Spread n_per_class over sessions; earlier sessions take the remainder.
            const int per = spec.n_per_class / spec.sessions + (s <= spec.n_per_class % spec.sessions ? 1 : 0);
            for (int k = 0; k < per; ++k) c.utterances.push_back(generate_utterance(spec, world, e, s, index++));
        }
    }
    return c;
}

// ---------------------------------------------------------------------------
// Leave-one-session-out splitting

struct Split {
    Corpus train;
    Corpus val;
    Corpus test;
};

/// Session `fold` is the test set; every 10th utterance of each class among the remaining sessions
/// (floor(n_c / 10) of them, evenly strided) forms the validation set.
inline Split split_losso(const Corpus& corpus, int fold) {
    const int S = corpus.sessions();
    if (fold < 1 || fold > S) {
        throw InputError("split_losso: fold " + std::to_string(fold) + " outside 1.." + std::to_string(S));
    }
    Split out;
    out.train.name = corpus.name + "-train";
    out.val.name = corpus.name + "-val";
    out.test.name = corpus.name + "-test";
    std::array<std::vector<std::size_t>, kNumEmotions> pool;
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        const auto& u = corpus.utterances[i];
        if (u.session == fold) {
            out.test.utterances.push_back(u);
        } else {
            pool[static_cast<std::size_t>(u.label)].push_back(i);
        }
    }
    std::vector<bool> is_val(corpus.size(), false);
    for (const auto& idx : pool) {
        const std::size_t n = idx.size();
        const std::size_t k = n / 10;
        for (std::size_t j = 0; j < k; ++j) is_val[idx[j * n / k]] = true;
    }
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        const auto& u = corpus.utterances[i];
        if (u.session == fold) continue;
        (is_val[i] ? out.val : out.train).utterances.push_back(u);
    }
    return out;
}

// ---------------------------------------------------------------------------
// JSON-Lines I/O

inline nlohmann::ordered_json to_json(const Utterance& u) {
    nlohmann::ordered_json j;
    j["id"] = u.id;
    j["label"] = to_string(u.label);
    j["vad"] = u.vad;
    j["session"] = u.session;
    j["domain"] = to_string(u.domain);
    auto rows = nlohmann::ordered_json::array();
    for (Index t = 0; t < u.frames.rows(); ++t) {
        auto row = nlohmann::ordered_json::array();
        for (Index f = 0; f < u.frames.cols(); ++f) row.push_back(u.frames(t, f));
        rows.push_back(std::move(row));
    }
    j["frames"] = std::move(rows);
    return j;
}

inline Utterance utterance_from_json(const nlohmann::json& j) {
    Utterance u;
    u.id = j.at("id").get<std::string>();
    const auto label = parse_emotion(j.at("label").get<std::string>());
    if (!label) throw std::invalid_argument("unknown label");
    u.label = *label;
    const auto vad = j.at("vad").get<std::vector<double>>();
    if (vad.size() != 3) throw std::invalid_argument("vad must have 3 entries");
    std::copy(vad.begin(), vad.end(), u.vad.begin());
    u.session = j.at("session").get<int>();
    if (u.session < 1) throw std::invalid_argument("session must be >= 1");
    const auto dom = parse_domain(j.at("domain").get<std::string>());
    if (!dom) throw std::invalid_argument("unknown domain");
    u.domain = *dom;
    const auto rows = j.at("frames").get<std::vector<std::vector<double>>>();
    if (rows.empty()) throw std::invalid_argument("frames must be non-empty");
    const auto F = static_cast<Index>(rows.front().size());
    u.frames.resize(static_cast<Index>(rows.size()), F);
    for (std::size_t t = 0; t < rows.size(); ++t) {
        if (static_cast<Index>(rows[t].size()) != F) throw std::invalid_argument("ragged frames");
        for (Index f = 0; f < F; ++f) u.frames(static_cast<Index>(t), f) = rows[t][static_cast<std::size_t>(f)];
    }
    return u;
}

inline void write_corpus(std::ostream& os, const Corpus& c) {
    for (const auto& u : c.utterances) os << to_json(u).dump() << '\n';
}

inline void write_corpus(const std::string& path, const Corpus& c) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw std::runtime_error("cannot open " + path + " for writing");
    write_corpus(os, c);
    if (!os) throw std::runtime_error("write failed: " + path);
}

inline Corpus read_corpus(std::istream& is, std::string name = "corpus") {
    Corpus c;
    c.name = std::move(name);
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            c.utterances.push_back(utterance_from_json(nlohmann::json::parse(line)));
        } catch (const std::exception& e) {
            throw ParseError(e.what(), lineno);
        }
        if (c.utterances.back().frames.cols() != c.utterances.front().frames.cols()) {
            throw ParseError("frame width differs from first record", lineno);
        }
    }
    return c;
}

inline Corpus read_corpus(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("cannot open " + path);
    return read_corpus(is, path);
}

} // namespace peft
