#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "projprobe/losses.hpp"
#include "projprobe/models.hpp"

namespace projprobe {

enum class AttackMethod { fgsm, pgd, cw, mifgsm };

AttackMethod attack_method_from_string(const std::string& s);
std::string attack_method_name(AttackMethod m);

struct AttackConfig {
    AttackMethod method = AttackMethod::pgd;
    double epsilon = 8.0 / 255.0;       // l-inf budget in pixel units
    double step_size = 2.0 / 255.0;     // per-iteration step in pixel units
    int iterations = 20;
    double momentum = 0.9;              // mifgsm decay
    double cw_constant = 0.005;         // l2 penalty weight c
    double cw_confidence = 0.0;
    bool random_init = true;
    std::uint64_t seed = 0;

    void validate() const;
};

struct AdversarialResult {
    ImageBatch x_adv;
    std::vector<double> loss_trace;  // loss at each evaluated iterate
    double linf = 0.0;               // final perturbation norms
    double l2 = 0.0;
    AttackConfig config;
};

AdversarialResult fgsm(const LossFn& loss_fn, const ImageBatch& x, const AttackConfig& cfg);
AdversarialResult pgd_linf(const LossFn& loss_fn, const ImageBatch& x, const AttackConfig& cfg);
AdversarialResult cw_l2(const LossFn& loss_fn, const ImageBatch& x, const AttackConfig& cfg);
AdversarialResult mi_fgsm(const LossFn& loss_fn, const ImageBatch& x, const AttackConfig& cfg);

AdversarialResult run_attack(const LossFn& loss_fn, const ImageBatch& x, const AttackConfig& cfg);

}  // namespace projprobe
