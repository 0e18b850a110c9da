#include "projprobe/attacks.hpp"

#include <algorithm>
#include <cmath>

#include "projprobe/rng.hpp"

namespace projprobe {

namespace {

// sign with sign(0) = 0, so exact-zero gradients never inject a direction
inline double sgn(double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); }

void check_gradient(const std::vector<double>& g) {
    for (double v : g)
        if (!std::isfinite(v)) throw NumericalError("attack: non-finite gradient");
}

void clamp01(std::vector<double>& px) {
    for (double& v : px) v = std::clamp(v, 0.0, 1.0);
}

// project onto the l-inf ball of radius eps around the clean pixels
void project_ball(std::vector<double>& px, const std::vector<double>& clean, double eps) {
    for (std::size_t i = 0; i < px.size(); ++i)
        px[i] = std::clamp(px[i], clean[i] - eps, clean[i] + eps);
}

void random_start(std::vector<double>& px, double eps, Rng& rng) {
    if (eps <= 0.0) return;
    for (double& v : px) v += rng.uniform(-eps, eps);
}

void finish(AdversarialResult& r, const ImageBatch& x) {
    double linf = 0.0, l2 = 0.0;
    for (std::size_t i = 0; i < x.pixels.size(); ++i) {
        const double d = r.x_adv.pixels[i] - x.pixels[i];
        linf = std::max(linf, std::fabs(d));
        l2 += d * d;
    }
    r.linf = linf;
    r.l2 = std::sqrt(l2);
}

}  // namespace

AttackMethod attack_method_from_string(const std::string& s) {
    if (s == "fgsm") return AttackMethod::fgsm;
    if (s == "pgd") return AttackMethod::pgd;
    if (s == "cw") return AttackMethod::cw;
    if (s == "mifgsm") return AttackMethod::mifgsm;
    throw ValidationError("unknown attack method: " + s);
}

std::string attack_method_name(AttackMethod m) {
    switch (m) {
        case AttackMethod::fgsm: return "fgsm";
        case AttackMethod::pgd: return "pgd";
        case AttackMethod::cw: return "cw";
        case AttackMethod::mifgsm: return "mifgsm";
    }
    return "?";
}

void AttackConfig::validate() const {
    if (epsilon < 0.0) throw ValidationError("attack: epsilon must be >= 0");
    if (iterations < 0) throw ValidationError("attack: iterations must be >= 0");
    if (iterations > 0 && step_size <= 0.0)
        throw ValidationError("attack: step_size must be > 0 when iterating");
    if (momentum < 0.0) throw ValidationError("attack: momentum must be >= 0");
}

AdversarialResult fgsm(const LossFn& loss_fn, const ImageBatch& x, const AttackConfig& cfg) {
    cfg.validate();
    x.validate();
    AdversarialResult r{x, {}, 0.0, 0.0, cfg};
    std::vector<double> grad;
    r.loss_trace.push_back(loss_fn(x, &grad));
    check_gradient(grad);
    for (std::size_t i = 0; i < grad.size(); ++i)
        r.x_adv.pixels[i] = x.pixels[i] + cfg.epsilon * sgn(grad[i]);
    clamp01(r.x_adv.pixels);
    finish(r, x);
    return r;
}

AdversarialResult pgd_linf(const LossFn& loss_fn, const ImageBatch& x, const AttackConfig& cfg) {
    cfg.validate();
    x.validate();
    AdversarialResult r{x, {}, 0.0, 0.0, cfg};
    Rng rng(cfg.seed);
    if (cfg.random_init) {
        random_start(r.x_adv.pixels, cfg.epsilon, rng);
        project_ball(r.x_adv.pixels, x.pixels, cfg.epsilon);
        clamp01(r.x_adv.pixels);
    }
    std::vector<double> grad;
    for (int it = 0; it < cfg.iterations; ++it) {
        r.loss_trace.push_back(loss_fn(r.x_adv, &grad));
        check_gradient(grad);
        for (std::size_t i = 0; i < grad.size(); ++i)
            r.x_adv.pixels[i] += cfg.step_size * sgn(grad[i]);
        project_ball(r.x_adv.pixels, x.pixels, cfg.epsilon);
        clamp01(r.x_adv.pixels);
    }
    r.loss_trace.push_back(loss_fn(r.x_adv, nullptr));
    finish(r, x);
    return r;
}

AdversarialResult cw_l2(const LossFn& loss_fn, const ImageBatch& x, const AttackConfig& cfg) {
    cfg.validate();
    x.validate();
    AdversarialResult r{x, {}, 0.0, 0.0, cfg};
    Rng rng(cfg.seed);
    if (cfg.random_init) {
        random_start(r.x_adv.pixels, cfg.step_size, rng);
        clamp01(r.x_adv.pixels);
    }
    std::vector<double> grad;
    for (int it = 0; it < cfg.iterations; ++it) {
        const double loss = loss_fn(r.x_adv, &grad);
        check_gradient(grad);
        double pen = 0.0;
        // ascend on L(x') - c * ||x - x'||_2^2, plain gradient steps, box clamp
        for (std::size_t i = 0; i < grad.size(); ++i) {
            const double delta = r.x_adv.pixels[i] - x.pixels[i];
            pen += delta * delta;
            r.x_adv.pixels[i] += cfg.step_size * (grad[i] - 2.0 * cfg.cw_constant * delta);
        }
        r.loss_trace.push_back(loss - cfg.cw_constant * pen);
        clamp01(r.x_adv.pixels);
    }
    finish(r, x);
    return r;
}

AdversarialResult mi_fgsm(const LossFn& loss_fn, const ImageBatch& x, const AttackConfig& cfg) {
    cfg.validate();
    x.validate();
    AdversarialResult r{x, {}, 0.0, 0.0, cfg};
    Rng rng(cfg.seed);
    if (cfg.random_init) {
        random_start(r.x_adv.pixels, cfg.epsilon, rng);
        project_ball(r.x_adv.pixels, x.pixels, cfg.epsilon);
        clamp01(r.x_adv.pixels);
    }
    std::vector<double> acc(x.pixels.size(), 0.0);
    std::vector<double> grad;
    for (int it = 0; it < cfg.iterations; ++it) {
        r.loss_trace.push_back(loss_fn(r.x_adv, &grad));
        check_gradient(grad);
        double l1 = 0.0;
        for (double v : grad) l1 += std::fabs(v);
        bool acc_zero = true;
        if (l1 > 0.0) {
            for (std::size_t i = 0; i < grad.size(); ++i) {
                acc[i] = cfg.momentum * acc[i] + grad[i] / l1;
                if (acc[i] != 0.0) acc_zero = false;
            }
        } else {
            for (std::size_t i = 0; i < acc.size(); ++i) {
                acc[i] *= cfg.momentum;
                if (acc[i] != 0.0) acc_zero = false;
            }
        }
        if (l1 == 0.0 && acc_zero) continue;  // nothing to step on; recorded in trace
        for (std::size_t i = 0; i < acc.size(); ++i)
            r.x_adv.pixels[i] += cfg.step_size * sgn(acc[i]);
        project_ball(r.x_adv.pixels, x.pixels, cfg.epsilon);
        clamp01(r.x_adv.pixels);
    }
    r.loss_trace.push_back(loss_fn(r.x_adv, nullptr));
    finish(r, x);
    return r;
}

AdversarialResult run_attack(const LossFn& loss_fn, const ImageBatch& x, const AttackConfig& cfg) {
    switch (cfg.method) {
        case AttackMethod::fgsm: return fgsm(loss_fn, x, cfg);
        case AttackMethod::pgd: return pgd_linf(loss_fn, x, cfg);
        case AttackMethod::cw: return cw_l2(loss_fn, x, cfg);
        case AttackMethod::mifgsm: return mi_fgsm(loss_fn, x, cfg);
    }
    throw ValidationError("run_attack: unknown method");
}

}  // namespace projprobe
