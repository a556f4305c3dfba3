#pragma once

// Single-domain cross-validation runs: split, pretrain the base on the
// unlabeled training frames, then train one FreezePolicy and score the test session.

#include "peft/config.hpp"
#include "peft/data.hpp"
#include "peft/encoder.hpp"
#include "peft/metrics.hpp"
#include "peft/pretrain.hpp"
#include "peft/training.hpp"

#include <atomic>
#include <cstdint>
#include <exception>
#include <functional>
#include <thread>
#include <vector>

namespace peft {

struct FoldOutcome {
    int fold = 0;
    EvalResult test;
    long long upstream_params = 0;
    Model model;
    TrainHistory history;
};

/// Runs f(0..n-1) on up to `jobs` threads. Results must be written to per-index slots, so the
/// aggregation order never depends on scheduling. The first exception is rethrown.
inline void parallel_for(std::size_t n, int jobs, const std::function<void(std::size_t)>& f) {
    if (jobs <= 1 || n <= 1) {
        for (std::size_t i = 0; i < n; ++i) f(i);
        return;
    }
    std::atomic<std::size_t> next{0};
    std::exception_ptr error;
    std::atomic<bool> failed{false};
    std::vector<std::thread> pool;
    const auto workers = std::min<std::size_t>(static_cast<std::size_t>(jobs), n);
    for (std::size_t w = 0; w < workers; ++w) {
        pool.emplace_back([&] {
            for (std::size_t i; (i = next++) < n;) {
                if (failed) return;
                try {
                    f(i);
                } catch (...) {
                    if (!failed.exchange(true)) error = std::current_exception();
                }
            }
        });
    }
    for (auto& t : pool) t.join();
    if (error) std::rethrow_exception(error);
}

/// One leave-one-session-out fold of `policy` on `corpus`.
inline FoldOutcome run_fold(const ExperimentConfig& cfg, const Corpus& corpus, const FreezePolicy& policy, int fold,
                            std::uint64_t seed) {
    const Split split = split_losso(corpus, fold);
    PretrainConfig pcfg = cfg.pretrain;
    pcfg.seed = seed;
    const EncoderParams base = pretrain_base(cfg.arch, EncoderParams::init(cfg.arch, seed), split.train, pcfg);

    Model m = Model::create(cfg.arch, cfg.adapters_for(policy), cfg.train.task, seed);
    m.encoder = base;
    TrainConfig tc = cfg.train_for(policy);
    tc.seed = seed;

    FoldOutcome out;
    out.fold = fold;
    out.upstream_params = trainable_upstream(policy, m);
    auto r = train(std::move(m), split.train, split.val, tc, policy);
    out.model = std::move(r.model);
    out.history = std::move(r.history);
    out.test = evaluate(out.model, split.test);
    return out;
}

/// Folds to run: the configured one, or every session.
inline std::vector<int> folds_of(const ExperimentConfig& cfg, const Corpus& corpus) {
    if (cfg.fold) return {*cfg.fold};
    std::vector<int> f;
    for (int s = 1; s <= corpus.sessions(); ++s) f.push_back(s);
    return f;
}

} // namespace peft
