#pragma once

#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "projprobe/attacks.hpp"
#include "projprobe/dataset.hpp"
#include "projprobe/surrogates.hpp"

namespace projprobe {

// -----------------------------------------------------------------------
// Experiment description

struct DatasetSpec {
    std::uint64_t seed = 1;
    int n = 2000;
    int image_size = 32;
    double train_frac = 0.8;
};

struct ExperimentSpec {
    std::string name = "default";
    DatasetSpec dataset;
    ScenarioSpec scenario;
    std::string loss = "vlp";  // "ve" | "vlp" | "tcp"
    TCPConfig tcp;
    AttackConfig attack;
    std::vector<std::uint64_t> attack_seeds = {0, 1, 2, 3, 4};
    int attack_items = 0;  // 0 = every held-out item
    std::optional<int> pool_override;  // evaluate the target at a different pool factor

    void validate() const;
};

// -----------------------------------------------------------------------
// Results

struct RunRecord {
    int schema_version = 1;
    std::string experiment;
    std::string scenario;
    std::string target_id;
    std::string loss;
    double beta = 0.0;
    int k = 1;
    std::string method;
    std::uint64_t attack_seed = 0;
    double epsilon = 0.0;
    double step_size = 0.0;
    int iterations = 0;
    int items = 0;
    double clean_accuracy = 0.0;
    double adv_accuracy = 0.0;
    double mean_linf = 0.0;
    double mean_l2 = 0.0;
    int pool_factor = -1;      // -1: architecture default
    std::string tasks;         // e.g. "itc+itm+ic" (scratch scenarios)
    std::string axis;          // sweep axis, empty for single runs
    std::string axis_value;

    nlohmann::json to_json() const;
    static RunRecord from_json(const nlohmann::json& j);
};

void append_records_jsonl(const std::string& path, const std::vector<RunRecord>& records);
// malformed lines are skipped; a human-readable note per skip goes to *warnings
std::vector<RunRecord> read_records_jsonl(const std::string& path,
                                          std::vector<std::string>* warnings = nullptr);

// -----------------------------------------------------------------------
// Evaluation and attacks

int predict_answer(ToyLVLM& model, const ImageBatch& image, const std::vector<int>& instr_tokens);
double evaluate_clean(ToyLVLM& model, const std::vector<const VQAItem*>& items, int image_size);

// Runs the configured attack per held-out item for every attack seed and
// scores the target on the perturbed images. One record per seed.
std::vector<RunRecord> run_attack_experiment(const ExperimentSpec& spec, Registry& registry,
                                             const SyntheticVQADataset& data, int jobs = 1);

// -----------------------------------------------------------------------
// Aggregation and verdict

struct AggregateStats {
    int n = 0;
    double mu = 0.0;
    double variance = 0.0;  // population variance
    double sigma = 0.0;     // population standard deviation
    bool high_variance = false;
};

AggregateStats aggregate_runs(const std::vector<double>& values, double sigma_tol = 0.25);

struct Verdict {
    double delta = 0.0;  // acc under encoder-level attack minus acc under projector-level attack
    std::string label;   // "vlp_weaker" | "vlp_stronger" | "comparable"
};

Verdict security_verdict(double mu_acc_under_ve_attack, double mu_acc_under_vlp_attack,
                         double tol);

// -----------------------------------------------------------------------
// Sweeps

struct SweepSpec {
    ExperimentSpec base;
    std::string axis;  // "beta" | "k" | "pool_factor" | "tasks"
    std::vector<nlohmann::json> values;
};

std::vector<RunRecord> run_sweep(const SweepSpec& spec, Registry& registry,
                                 const SyntheticVQADataset& data, int jobs = 1);

}  // namespace projprobe
