#pragma once

// Masked-frame reconstruction pretraining for the base encoder, so that the
// frozen starting point is a trained network rather than random weights.

#include "peft/autodiff.hpp"
#include "peft/data.hpp"
#include "peft/encoder.hpp"
#include "peft/optim.hpp"
#include "peft/training.hpp"

#include <cstdint>
#include <random>
#include <vector>

namespace peft {

struct PretrainConfig {
    int epochs = 2;
    double lr = 1e-3;
    double mask_ratio = 0.15;
    int batch_size = 32;
    std::uint64_t seed = 0;

    void validate() const {
        if (epochs < 0) throw ConfigError("pretrain: epochs must be >= 0");
        if (!(lr > 0.0)) throw ConfigError("pretrain: lr must be positive");
        if (!(mask_ratio > 0.0 && mask_ratio < 1.0)) throw ConfigError("pretrain: mask_ratio must be in (0,1)");
        if (batch_size < 1) throw ConfigError("pretrain: batch_size must be >= 1");
    }
};

/// Linear map from hidden states back to input frames, used only during pretraining.
struct ReconstructionHead {
    Matrix w;  // F x d
    Matrix b;  // 1 x F

    static ReconstructionHead init(const ArchShape& arch, std::uint64_t seed) {
        std::mt19937_64 rng(seed ^ 0x7ecULL);
        const double bound = 1.0 / std::sqrt(static_cast<double>(arch.d_model));
        std::uniform_real_distribution<double> u(-bound, bound);
        return {Matrix::NullaryExpr(arch.in_features, arch.d_model, [&] { return u(rng); }),
                Matrix::Zero(1, arch.in_features)};
    }
};

struct PretrainReport {
    std::vector<double> epoch_loss;  // mean training loss per epoch
    ReconstructionHead recon;
};

/// Rows hidden from the encoder for utterance `index`: at least one, about mask_ratio of T.
inline std::vector<bool> frame_mask(int frames, double ratio, std::uint64_t seed, std::uint64_t index) {
    std::mt19937_64 rng(detail::sub_seed(seed, 11, index));
    std::vector<bool> mask(static_cast<std::size_t>(frames), false);
    const int k = std::max(1, static_cast<int>(std::lround(ratio * frames)));
    std::vector<int> idx(static_cast<std::size_t>(frames));
    std::iota(idx.begin(), idx.end(), 0);
    std::shuffle(idx.begin(), idx.end(), rng);
    for (int i = 0; i < std::min(k, frames); ++i) mask[static_cast<std::size_t>(idx[static_cast<std::size_t>(i)])] = true;
    return mask;
}

namespace detail {

inline ad::Var reconstruction_loss(Binder& bind, const Model& m, const ReconstructionHead& rh, const Utterance& u,
                                   const std::vector<bool>& mask) {
    ad::Tape& t = bind.tape();
    Matrix input = u.frames;
    for (Index r = 0; r < input.rows(); ++r) {
        if (mask[static_cast<std::size_t>(r)]) input.row(r).setZero();
    }
    const auto states = ad::encode(bind, m, input);
    ad::Var recon = ad::add_row(t, ad::matmul_nt(t, states.back(), bind(rh.w)), bind(rh.b));
    return ad::masked_row_mse(t, recon, u.frames, mask);
}

} // namespace detail

/// Mean masked-frame reconstruction error of `params` (with head `rh`) on `corpus`.
inline double reconstruction_error(const ArchShape& arch, const EncoderParams& params, const ReconstructionHead& rh,
                                   const Corpus& corpus, const PretrainConfig& cfg) {
    if (corpus.empty()) throw InputError("reconstruction_error: empty corpus");
    Model m;
    m.arch = arch;
    m.encoder = params;
    double sum = 0.0;
    for (std::size_t i = 0; i < corpus.size(); ++i) {
        const auto& u = corpus.utterances[i];
        ad::Tape tape;
        Binder bind(tape);
        const auto mask = frame_mask(u.frame_count(), cfg.mask_ratio, cfg.seed ^ 0xe7a1ULL, i);
        sum += tape.value(detail::reconstruction_loss(bind, m, rh, u, mask))(0, 0);
    }
    return sum / static_cast<double>(corpus.size());
}

/// Trains the frontend and every block on masked-frame reconstruction. Deterministic in cfg.seed.
/// With zero epochs the parameters are returned unchanged.
inline EncoderParams pretrain_base(const ArchShape& arch, EncoderParams params, const Corpus& corpus,
                                   const PretrainConfig& cfg, PretrainReport* report = nullptr) {
    cfg.validate();
    if (corpus.empty()) throw InputError("pretrain_base: empty corpus");
    ReconstructionHead rh = ReconstructionHead::init(arch, cfg.seed);
    if (cfg.epochs == 0) {
        if (report) report->recon = rh;
        return params;
    }
    Model m;
    m.arch = arch;
    m.encoder = std::move(params);

    std::vector<Matrix*> trainable;
    visit_params(m, [&](const std::string&, ParamGroup g, Matrix& p) {
        if (g == ParamGroup::frontend || g == ParamGroup::block) trainable.push_back(&p);
    });
    trainable.push_back(&rh.w);
    trainable.push_back(&rh.b);

    const auto n_batches = detail::make_batches(detail::epoch_order(corpus.size(), cfg.seed, 1), cfg.batch_size).size();
    const LinearSchedule schedule(cfg.lr, static_cast<long>(n_batches) * cfg.epochs);
    Adam adam(trainable);
    std::vector<Matrix> grads(trainable.size());
    long step = 0;
    for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
        const auto order = detail::epoch_order(corpus.size(), cfg.seed ^ 0x9e7ULL, epoch);
        double loss_sum = 0.0;
        std::size_t count = 0;
        for (const auto& batch : detail::make_batches(order, cfg.batch_size)) {
            ad::Tape tape;
            Binder bind(tape);
            for (auto& g : grads) g.resize(0, 0);
            for (std::size_t i = 0; i < trainable.size(); ++i) bind.train(*trainable[i], &grads[i]);
            std::vector<ad::Var> losses;
            for (std::size_t idx : batch) {
                const auto& u = corpus.utterances[idx];
                const auto mask = frame_mask(u.frame_count(), cfg.mask_ratio, cfg.seed,
                                             static_cast<std::uint64_t>(epoch) * corpus.size() + idx);
                losses.push_back(detail::reconstruction_loss(bind, m, rh, u, mask));
            }
            ad::Var total = ad::scale(tape, ad::sum_all(tape, ad::stack_rows(tape, losses)),
                                      1.0 / static_cast<double>(losses.size()));
            const double value = tape.value(total)(0, 0);
            if (!std::isfinite(value)) throw DivergenceError("pretrain: non-finite loss", epoch, step);
            loss_sum += value;
            ++count;
            tape.backward(total);
            adam.step(grads, schedule.at(step++));
        }
        if (report) report->epoch_loss.push_back(loss_sum / static_cast<double>(count));
    }
    if (report) report->recon = rh;
    return std::move(m.encoder);
}

} // namespace peft
