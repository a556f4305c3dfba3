#pragma once

#include "peft/core.hpp"

#include <cmath>
#include <vector>

namespace peft {

/// lr0 * (1 - step / total_steps), clamped at zero.
class LinearSchedule {
public:
    LinearSchedule(double lr0, long total_steps) : lr0_(lr0), total_(total_steps) {
        if (!(lr0 > 0.0)) throw ConfigError("schedule: initial learning rate must be positive");
        if (total_steps < 0) throw ConfigError("schedule: negative step count");
    }

    double at(long step) const {
        if (total_ <= 0) return 0.0;
        const double frac = 1.0 - static_cast<double>(step) / static_cast<double>(total_);
        return frac > 0.0 ? lr0_ * frac : 0.0;
    }

    double initial() const { return lr0_; }
    long total_steps() const { return total_; }

private:
    double lr0_;
    long total_;
};

/// Adam over a fixed list of parameter blocks.
class Adam {
public:
    struct Options {
        double beta1 = 0.9;
        double beta2 = 0.999;
        double eps = 1e-8;
    };

    Adam(std::vector<Matrix*> params, Options opt) : params_(std::move(params)), opt_(opt) {
        for (auto* p : params_) {
            m_.push_back(Matrix::Zero(p->rows(), p->cols()));
            v_.push_back(Matrix::Zero(p->rows(), p->cols()));
        }
    }

    explicit Adam(std::vector<Matrix*> params) : Adam(std::move(params), Options{}) {}

    /// One update; grads[i] may be empty, meaning zero gradient.
    void step(const std::vector<Matrix>& grads, double lr) {
        ++t_;
        const double bc1 = 1.0 - std::pow(opt_.beta1, static_cast<double>(t_));
        const double bc2 = 1.0 - std::pow(opt_.beta2, static_cast<double>(t_));
        for (std::size_t i = 0; i < params_.size(); ++i) {
            Matrix& m = m_[i];
            Matrix& v = v_[i];
            if (grads[i].size() == 0) {
                m *= opt_.beta1;
                v *= opt_.beta2;
            } else {
                m = opt_.beta1 * m + (1.0 - opt_.beta1) * grads[i];
                v = opt_.beta2 * v + (1.0 - opt_.beta2) * grads[i].cwiseAbs2();
            }
            params_[i]->array() -= lr * (m.array() / bc1) / ((v.array() / bc2).sqrt() + opt_.eps);
        }
    }

    long steps() const { return t_; }

private:
    std::vector<Matrix*> params_;
    Options opt_;
    std::vector<Matrix> m_, v_;
    long t_ = 0;
};

} // namespace peft
