#pragma once

// Freeze policies, the optimisation loop, gradient checking and evaluation.

#include "peft/adapters.hpp"
#include "peft/autodiff.hpp"
#include "peft/core.hpp"
#include "peft/data.hpp"
#include "peft/encoder.hpp"
#include "peft/metrics.hpp"
#include "peft/optim.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <string_view>
#include <vector>

namespace peft {

enum class TrainMode { PT, FT, PEFT };

inline const char* to_string(TrainMode m) {
    switch (m) {
    case TrainMode::PT: return "PT";
    case TrainMode::FT: return "FT";
    case TrainMode::PEFT: return "PEFT";
    }
    return "?";
}

inline std::optional<TrainMode> parse_mode(std::string_view s) {
    if (s == "PT") return TrainMode::PT;
    if (s == "FT") return TrainMode::FT;
    if (s == "PEFT") return TrainMode::PEFT;
    return std::nullopt;
}

enum class Update { updated, frozen, absent };

inline const char* to_string(Update u) {
    switch (u) {
    case Update::updated: return "updated";
    case Update::frozen: return "frozen";
    case Update::absent: return "absent";
    }
    return "?";
}

inline std::optional<Update> parse_update(std::string_view s) {
    if (s == "updated") return Update::updated;
    if (s == "frozen") return Update::frozen;
    if (s == "absent") return Update::absent;
    return std::nullopt;
}

/// Which parameter groups receive gradient updates. The downstream head always does.
struct FreezePolicy {
    static constexpr std::array<Update, 4> kNone{Update::absent, Update::absent, Update::absent, Update::absent};

    TrainMode mode = TrainMode::PEFT;
    std::array<Update, 4> adapters = kNone;  // ba, lora, ws, wg

    Update of(AdapterKind k) const { return adapters[static_cast<std::size_t>(k)]; }
    Update& of(AdapterKind k) { return adapters[static_cast<std::size_t>(k)]; }

    static FreezePolicy pt() { return {TrainMode::PT, kNone}; }
    static FreezePolicy ft() { return {TrainMode::FT, kNone}; }

    static FreezePolicy peft(Update ba, Update lora, Update ws, Update wg) {
        return {TrainMode::PEFT, {ba, lora, ws, wg}};
    }

    /// PEFT updating every adaptor kind enabled in `aset`.
    static FreezePolicy peft_all(const AdapterSet& aset) {
        FreezePolicy p;
        for (auto k : kAdapterKinds) p.of(k) = aset.enabled(k) ? Update::updated : Update::absent;
        return p;
    }

    /// Checks the policy against the adaptors actually present.
    void validate(const AdapterSet& aset) const {
        for (auto k : kAdapterKinds) {
            if (of(k) != Update::absent && !aset.enabled(k)) {
                throw ConfigError(std::string("freeze policy: flag set for absent adaptor ") + to_string(k));
            }
            if (mode != TrainMode::PEFT && of(k) != Update::absent) {
                throw ConfigError(std::string("freeze policy: ") + to_string(mode) + " mode cannot carry adaptor flags");
            }
        }
        if (mode == TrainMode::FT && aset.any()) throw ConfigError("freeze policy: FT runs without adaptors");
    }

    friend bool operator==(const FreezePolicy&, const FreezePolicy&) = default;
};

/// Names of the parameter blocks that receive updates under `policy`, in visit order.
inline std::vector<std::string> build_mask(const FreezePolicy& policy, const Model& model) {
    policy.validate(model.adapters);
    std::vector<std::string> names;
    visit_params(model, [&](const std::string& name, ParamGroup g, const Matrix&) {
        bool on = false;
        switch (g) {
        case ParamGroup::head: on = true; break;
        case ParamGroup::frontend: on = false; break;
        case ParamGroup::block: on = policy.mode == TrainMode::FT; break;
        case ParamGroup::ba: on = policy.of(AdapterKind::ba) == Update::updated; break;
        case ParamGroup::lora: on = policy.of(AdapterKind::lora) == Update::updated; break;
        case ParamGroup::ws: on = policy.of(AdapterKind::ws) == Update::updated; break;
        case ParamGroup::wg: on = policy.of(AdapterKind::wg) == Update::updated; break;
        }
        if (on) names.push_back(name);
    });
    return names;
}

/// Trainable upstream values (everything except the head) under `policy`.
inline long long trainable_upstream(const FreezePolicy& policy, const Model& model) {
    const auto mask = build_mask(policy, model);
    long long n = 0;
    visit_params(model, [&](const std::string& name, ParamGroup g, const Matrix& m) {
        if (g != ParamGroup::head && std::find(mask.begin(), mask.end(), name) != mask.end()) n += m.size();
    });
    return n;
}

enum class RegressionLoss { ccc, mse };

struct TrainConfig {
    Task task = Task::classification;
    int epochs = 20;
    double lr = 5e-4;
    int batch_size = 32;
    std::uint64_t seed = 0;
    RegressionLoss regression_loss = RegressionLoss::ccc;

    static double default_lr(TrainMode mode) { return mode == TrainMode::FT ? 5e-5 : 5e-4; }

    void validate() const {
        if (!(lr > 0.0) || !std::isfinite(lr)) throw ConfigError("train config: lr must be positive");
        if (epochs < 0) throw ConfigError("train config: epochs must be >= 0");
        if (batch_size < 2) throw ConfigError("train config: batch_size must be >= 2");
    }
};

// ---------------------------------------------------------------------------
// Evaluation

/// Accuracy for classification; CCC per attribute for regression.
inline EvalResult evaluate(const Model& model, const Corpus& corpus) {
    if (corpus.empty()) throw InputError("evaluate: empty corpus");
    EvalResult r;
    r.n = static_cast<long>(corpus.size());
    if (model.head.task == Task::classification) {
        std::vector<int> pred, truth;
        for (const auto& u : corpus.utterances) {
            const RowVector logits = predict(model, u.frames);
            Index arg = 0;
            logits.maxCoeff(&arg);
            pred.push_back(static_cast<int>(arg));
            truth.push_back(static_cast<int>(u.label));
        }
        r.acc = accuracy(pred, truth);
        return r;
    }
    std::array<std::vector<double>, 3> pred, truth;
    for (const auto& u : corpus.utterances) {
        const RowVector y = predict(model, u.frames);
        for (std::size_t k = 0; k < 3; ++k) {
            pred[k].push_back(y(static_cast<Index>(k)));
            truth[k].push_back(u.vad[k]);
        }
    }
    std::array<double*, 3> dst = {&r.ccc_v, &r.ccc_a, &r.ccc_d};
    for (std::size_t k = 0; k < 3; ++k) {
        if (corpus.size() < 2) {
            r.degenerate = true;
            continue;
        }
        try {
            const auto c = ccc_checked(pred[k], truth[k]);
            *dst[k] = c.value;
            r.degenerate = r.degenerate || c.degenerate;
        } catch (const UndefinedCorrelationError&) {
            r.degenerate = true;
        }
    }
    return r;
}

/// The validation score that model selection maximises.
inline double selection_metric(const EvalResult& r, Task task) {
    return task == Task::classification ? r.acc : r.mean_ccc();
}

// ---------------------------------------------------------------------------
// Training loop

struct EpochRecord {
    int epoch = 0;            // 0 is the untrained starting point
    double train_loss = 0.0;  // mean minibatch loss over the epoch
    double val_metric = 0.0;
    double lr = 0.0;          // learning rate at the epoch's last update
};

struct TrainHistory {
    std::vector<EpochRecord> epochs;
    int best_epoch = 0;
    double best_val = 0.0;
    long steps = 0;
};

struct TrainResult {
    Model model;
    TrainHistory history;
};

namespace detail {

/// Minibatches of a permutation; a trailing single sample joins the previous batch.
inline std::vector<std::vector<std::size_t>> make_batches(const std::vector<std::size_t>& order, int batch_size) {
    std::vector<std::vector<std::size_t>> out;
    for (std::size_t i = 0; i < order.size(); i += static_cast<std::size_t>(batch_size)) {
        const std::size_t end = std::min(order.size(), i + static_cast<std::size_t>(batch_size));
        out.emplace_back(order.begin() + static_cast<std::ptrdiff_t>(i), order.begin() + static_cast<std::ptrdiff_t>(end));
    }
    if (out.size() > 1 && out.back().size() == 1) {
        out[out.size() - 2].push_back(out.back().front());
        out.pop_back();
    }
    return out;
}

inline std::vector<std::size_t> epoch_order(std::size_t n, std::uint64_t seed, int epoch) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::mt19937_64 rng(sub_seed(seed, 7, static_cast<std::uint64_t>(epoch)));
    std::shuffle(order.begin(), order.end(), rng);
    return order;
}

} // namespace detail

/// Differentiable batch loss. When `cached_states` is non-null the encoder is skipped and the
/// given hidden states are used as constants.
inline ad::Var batch_loss(Binder& bind, const Model& model, const Corpus& data, std::span<const std::size_t> batch,
                          const TrainConfig& cfg, const std::vector<std::vector<Matrix>>* cached_states = nullptr) {
    ad::Tape& t = bind.tape();
    std::vector<ad::Var> outputs;
    outputs.reserve(batch.size());
    for (std::size_t idx : batch) {
        const auto& u = data.utterances[idx];
        std::vector<ad::Var> states;
        if (cached_states) {
            for (const auto& s : (*cached_states)[idx]) states.push_back(t.constant(s));
        } else {
            states = ad::encode(bind, model, u.frames);
        }
        outputs.push_back(ad::head(bind, model.head, ad::pool(bind, model, states)));
    }
    ad::Var stacked = ad::stack_rows(t, outputs);
    if (model.head.task == Task::classification) {
        std::vector<int> labels;
        for (std::size_t idx : batch) labels.push_back(static_cast<int>(data.utterances[idx].label));
        return ad::cross_entropy(t, stacked, labels);
    }
    Matrix target(static_cast<Index>(batch.size()), 3);
    for (std::size_t i = 0; i < batch.size(); ++i) {
        for (Index k = 0; k < 3; ++k) target(static_cast<Index>(i), k) = data.utterances[batch[i]].vad[static_cast<std::size_t>(k)];
    }
    return cfg.regression_loss == RegressionLoss::ccc ? ad::ccc_loss(t, stacked, target) : ad::mse(t, stacked, target);
}

/// Per-epoch callback: (epoch record, current model).
using EpochObserver = std::function<void(const EpochRecord&, const Model&)>;

/// Minibatch Adam with linear decay; returns the best-on-validation parameters (earliest on ties)
/// and the full history. Parameters outside the mask are never written.
inline TrainResult train(Model model, const Corpus& train_set, const Corpus& val_set, const TrainConfig& cfg,
                         const FreezePolicy& policy, const EpochObserver& observer = {}) {
    cfg.validate();
    if (train_set.empty()) throw InputError("train: empty training split");
    if (val_set.empty()) throw InputError("train: empty validation split");
    if (train_set.size() < 2) throw InputError("train: need at least 2 training utterances");
    if (model.head.task != cfg.task) throw ConfigError("train: head task does not match config task");
    model.adapters.validate(model.arch);
    const auto mask = build_mask(policy, model);

    std::vector<Matrix*> trainable;
    bool upstream_trainable = false;
    visit_params(model, [&](const std::string& name, ParamGroup g, Matrix& m) {
        if (std::find(mask.begin(), mask.end(), name) == mask.end()) return;
        trainable.push_back(&m);
        if (g != ParamGroup::head && g != ParamGroup::ws) upstream_trainable = true;
    });

    // Encoder outputs are constant when nothing below the pooling step trains.
    std::optional<std::vector<std::vector<Matrix>>> cache;
    if (!upstream_trainable) {
        cache.emplace();
        for (const auto& u : train_set.utterances) cache->push_back(encode(u.frames, model));
    }

    TrainResult result;
    auto& hist = result.history;
    const auto batches_per_epoch =
        detail::make_batches(detail::epoch_order(train_set.size(), cfg.seed, 1), cfg.batch_size).size();
    const long total_steps = static_cast<long>(batches_per_epoch) * cfg.epochs;
    const LinearSchedule schedule(cfg.lr, total_steps);
    Adam adam(trainable);
    std::vector<Matrix> grads(trainable.size());
    const auto* states = cache ? &*cache : nullptr;

    auto run_epoch = [&](int epoch, bool update) {
        const auto batches = detail::make_batches(detail::epoch_order(train_set.size(), cfg.seed, std::max(epoch, 1)),
                                                  cfg.batch_size);
        double loss_sum = 0.0;
        double lr = 0.0;
        for (const auto& batch : batches) {
            ad::Tape tape;
            Binder bind(tape);
            for (auto& g : grads) g.resize(0, 0);
            if (update) {
                for (std::size_t i = 0; i < trainable.size(); ++i) bind.train(*trainable[i], &grads[i]);
            }
            ad::Var loss = batch_loss(bind, model, train_set, batch, cfg, states);
            const double value = tape.value(loss)(0, 0);
            if (!std::isfinite(value)) throw DivergenceError("train: non-finite loss", epoch, hist.steps);
            loss_sum += value;
            if (!update) continue;
            tape.backward(loss);
            lr = schedule.at(hist.steps);
            adam.step(grads, lr);
            ++hist.steps;
        }
        return std::make_pair(loss_sum / static_cast<double>(batches.size()), lr);
    };

    auto record = [&](int epoch, double loss, double lr) {
        EpochRecord rec{epoch, loss, selection_metric(evaluate(model, val_set), cfg.task), lr};
        hist.epochs.push_back(rec);
        if (observer) observer(rec, model);
        if (epoch == 0 || rec.val_metric > hist.best_val) {
            hist.best_val = rec.val_metric;
            hist.best_epoch = epoch;
            result.model = model;
        }
    };

    const auto [loss0, lr0] = run_epoch(0, false);
    record(0, loss0, lr0);
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        const auto [loss, lr] = run_epoch(epoch, true);
        record(epoch, loss, lr);
    }
    return result;
}

// ---------------------------------------------------------------------------
// Gradient checking

/// ||a - n|| / (||a|| + ||n||); zero when both are negligible.
inline double relative_error(const Matrix& analytic, const Matrix& numeric) {
    const double diff = (analytic - numeric).norm();
    const double denom = analytic.norm() + numeric.norm();
    if (denom < 1e-12) return diff;
    return diff / denom;
}

/// Central differences of the scalar `f` with respect to every entry of `param`.
inline Matrix numeric_gradient(const std::function<double()>& f, Matrix& param, double eps) {
    Matrix g(param.rows(), param.cols());
    for (Index i = 0; i < param.size(); ++i) {
        const double keep = param.data()[i];
        param.data()[i] = keep + eps;
        const double up = f();
        param.data()[i] = keep - eps;
        const double down = f();
        param.data()[i] = keep;
        g.data()[i] = (up - down) / (2.0 * eps);
    }
    return g;
}

struct GradCheckResult {
    double max_rel_error = 0.0;
    std::string worst_block;
    std::vector<std::pair<std::string, double>> per_block;
};

struct GradCheckOptions {
    double eps = 1e-5;
    std::vector<ParamGroup> groups{ParamGroup::ba, ParamGroup::lora, ParamGroup::ws, ParamGroup::wg};
    /// Applied to each analytic gradient before comparison (used to prove the check can fail).
    std::function<void(const std::string&, Matrix&)> perturb_analytic;
};

/// Compares the tape gradient of every parameter block in `opt.groups` with central differences of
/// the training loss on `batch`.
inline GradCheckResult grad_check(const Model& model_in, const Corpus& batch, const TrainConfig& cfg,
                                  const GradCheckOptions& opt = {}) {
    Model model = model_in;
    std::vector<std::size_t> all(batch.size());
    std::iota(all.begin(), all.end(), std::size_t{0});

    std::vector<std::pair<std::string, Matrix*>> blocks;
    visit_params(model, [&](const std::string& name, ParamGroup g, Matrix& m) {
        if (std::find(opt.groups.begin(), opt.groups.end(), g) != opt.groups.end()) blocks.emplace_back(name, &m);
    });

    std::vector<Matrix> grads(blocks.size());
    {
        ad::Tape tape;
        Binder bind(tape);
        for (std::size_t i = 0; i < blocks.size(); ++i) bind.train(*blocks[i].second, &grads[i]);
        tape.backward(batch_loss(bind, model, batch, all, cfg));
    }
    auto loss = [&] {
        ad::Tape tape;
        Binder bind(tape);
        return tape.value(batch_loss(bind, model, batch, all, cfg))(0, 0);
    };

    GradCheckResult r;
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        Matrix analytic = grads[i].size() ? grads[i] : Matrix::Zero(blocks[i].second->rows(), blocks[i].second->cols());
        if (opt.perturb_analytic) opt.perturb_analytic(blocks[i].first, analytic);
        const Matrix numeric = numeric_gradient(loss, *blocks[i].second, opt.eps);
        const double e = relative_error(analytic, numeric);
        r.per_block.emplace_back(blocks[i].first, e);
        if (e >= r.max_rel_error) {
            r.max_rel_error = e;
            r.worst_block = blocks[i].first;
        }
    }
    return r;
}

} // namespace peft
