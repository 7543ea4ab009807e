#pragma once

// Training objectives: the Gaussian-clouded logit adjustment, the asymmetric
// focusing loss in its two published readings, the per-phase composites and
// the dual-sampling beta schedule.

#include <cmath>
#include <string>
#include <vector>

#include "lpt/common.hpp"
#include "lpt/rng.hpp"
#include "lpt/tensor.hpp"

namespace lpt {

struct ClassCounts {
    std::vector<long long> counts;
    long long n_max = 0;

    static ClassCounts from(std::vector<long long> c) {
        ClassCounts cc;
        cc.counts = std::move(c);
        for (long long n : cc.counts) cc.n_max = std::max(cc.n_max, n);
        return cc;
    }
    size_t classes() const { return counts.size(); }
};

struct GclParams {
    real alpha = real(16);
    bool training = true;
};

// The literal published form of the asymmetric loss scores negatives with
// ln(p_i); the asymmetric-loss lineage it cites uses ln(1-p_i). Both are
// selectable, with the negated literal form as the default.
enum class AgclVariant { NegatedLiteral, AsymmetricReference };

struct AgclParams {
    real lambda_pos = real(0);
    real lambda_neg = real(4);
    AgclVariant variant = AgclVariant::NegatedLiteral;
};

struct BetaSchedule {
    real eta = real(0.5);
    int total_epochs = 1;
    int epoch = 0;
};

// Training mode: v_i = alpha * (s_i - (ln n_max - ln n_i)*|eps_i|) with
// eps_i drawn fresh per class per call. Eval mode: v_i = alpha * s_i with
// no perturbation and no count adjustment.
inline Tensor gcl_adjust(const Tensor& s, const ClassCounts& counts, const GclParams& params,
                         Rng& rng) {
    if (!(params.alpha > real(0))) throw ConfigError("gcl_adjust: alpha must be positive");
    if (counts.classes() != s.numel())
        throw ConfigError("gcl_adjust: counts cover " + std::to_string(counts.classes()) +
                          " classes but scores have " + std::to_string(s.numel()));
    if (!params.training) return scale(s, params.alpha);
    std::vector<real> margin(s.numel());
    real log_max = std::log(static_cast<real>(counts.n_max));
    for (size_t i = 0; i < margin.size(); ++i) {
        if (counts.counts[i] <= 0)
            throw ConfigError("gcl_adjust: class " + std::to_string(i) +
                              " absent from the training set");
        real gap = log_max - std::log(static_cast<real>(counts.counts[i]));
        margin[i] = -gap * static_cast<real>(std::fabs(rng.normal()));
    }
    Tensor m = Tensor::from(s.shape(), std::move(margin));
    return scale(add(s, m), params.alpha);
}

// Probabilities are clamped to [1e-12, 1-1e-12] before any logarithm.
inline Tensor agcl_loss(const Tensor& p, int label, const AgclParams& params) {
    size_t c = p.numel();
    if (label < 0 || label >= static_cast<int>(c))
        throw ConfigError("agcl_loss: label " + std::to_string(label) + " out of range for " +
                          std::to_string(c) + " classes");
    if (params.lambda_pos < real(0) || params.lambda_neg < real(0))
        throw ConfigError("agcl_loss: focusing exponents must be non-negative");
    Tensor pc = clamp(p, real(1e-12), real(1) - real(1e-12));
    std::vector<real> onehot(c, real(0)), negmask(c, real(1));
    onehot[label] = real(1);
    negmask[label] = real(0);
    Tensor oh = Tensor::from(p.shape(), std::move(onehot));
    Tensor nm = Tensor::from(p.shape(), std::move(negmask));
    Tensor pj = sum(mul(pc, oh));
    Tensor pos = mul(pow(add_scalar(scale(pj, real(-1)), real(1)), params.lambda_pos), log(pj));
    Tensor neg_base = params.variant == AgclVariant::NegatedLiteral
                          ? log(pc)
                          : log(add_scalar(scale(pc, real(-1)), real(1)));
    Tensor neg = sum(mul(nm, mul(pow(pc, params.lambda_neg), neg_base)));
    return scale(add(pos, neg), real(-1));
}

// Classification loss for one sample: A-GCL over the adjusted softmax. The
// mixup pair combines as lam*L(.,ya) + (1-lam)*L(.,yb) on shared
// probabilities (the noise draw belongs to the forward pass, not the label).
inline Tensor phase1_loss(const Tensor& scores, int ya, int yb, real lam, const ClassCounts& counts,
                          const GclParams& gcl, const AgclParams& agcl, Rng& rng) {
    Tensor p = softmax_rows(gcl_adjust(scores, counts, gcl, rng));
    Tensor la = agcl_loss(p, ya, agcl);
    if (yb == ya || lam == real(1)) return la;
    Tensor lb = agcl_loss(p, yb, agcl);
    return add(scale(la, lam), scale(lb, real(1) - lam));
}

inline Tensor phase1_loss(const Tensor& scores, int label, const ClassCounts& counts,
                          const GclParams& gcl, const AgclParams& agcl, Rng& rng) {
    return phase1_loss(scores, label, label, real(1), counts, gcl, agcl, rng);
}

// L = beta * L_cls + (1 - mean of matched similarities); the second term
// carries gradient into the keys only.
inline Tensor phase2_loss(const Tensor& scores_hat, int ya, int yb, real lam,
                          const std::vector<Tensor>& sims, real beta, const ClassCounts& counts,
                          const GclParams& gcl, const AgclParams& agcl, Rng& rng) {
    if (sims.empty()) throw ConfigError("phase2_loss: no matched similarities");
    Tensor cls = phase1_loss(scores_hat, ya, yb, lam, counts, gcl, agcl, rng);
    Tensor acc = sims[0];
    for (size_t i = 1; i < sims.size(); ++i) acc = add(acc, sims[i]);
    Tensor match = add_scalar(scale(acc, real(-1) / static_cast<real>(sims.size())), real(1));
    return add(scale(cls, beta), match);
}

inline Tensor phase2_loss(const Tensor& scores_hat, int label, const std::vector<Tensor>& sims,
                          real beta, const ClassCounts& counts, const GclParams& gcl,
                          const AgclParams& agcl, Rng& rng) {
    return phase2_loss(scores_hat, label, label, real(1), sims, beta, counts, gcl, agcl, rng);
}

// Balanced batches use beta = 1; instance batches decay eta*(E-e)/E.
inline real beta_for(BatchKind kind, const BetaSchedule& sched) {
    if (sched.epoch < 0 || sched.epoch > sched.total_epochs)
        throw ConfigError("beta_for: epoch out of range");
    if (kind == BatchKind::Balanced) return real(1);
    return sched.eta * static_cast<real>(sched.total_epochs - sched.epoch) /
           static_cast<real>(sched.total_epochs);
}

// Plain mixup-aware cross entropy for backbone pretraining.
inline Tensor ce_loss(const Tensor& logits, int ya, int yb, real lam) {
    Tensor p = clamp(softmax_rows(logits), real(1e-12), real(1));
    size_t c = p.numel();
    std::vector<real> oha(c, real(0)), ohb(c, real(0));
    oha[ya] = real(1);
    ohb[yb] = real(1);
    Tensor la = scale(log(sum(mul(p, Tensor::from(p.shape(), std::move(oha))))), real(-1));
    if (ya == yb || lam == real(1)) return la;
    Tensor lb = scale(log(sum(mul(p, Tensor::from(p.shape(), std::move(ohb))))), real(-1));
    return add(scale(la, lam), scale(lb, real(1) - lam));
}

}  // namespace lpt
