#pragma once

#include <map>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include <nlohmann/json.hpp>

#include "projprobe/dataset.hpp"
#include "projprobe/losses.hpp"
#include "projprobe/models.hpp"

namespace projprobe {

// All models share one frozen instruction embedder, initialized from a fixed
// public seed. It plays the role of the tokenizer/text path the adversary is
// assumed to know.
InstrEmbedParams& shared_instr_embedder();

// Assembles a full toy model with the default geometry (32px images, 8px
// patches, d_model 64, 2 encoder blocks) and the shared instruction embedder.
struct ModelSpec {
    std::string projector = "compressed";  // "compressed" | "uncompressed"
    std::string head_variant = "A";
    int pool_factor = 2;                   // uncompressed only
    int image_size = 32;
    std::uint64_t seed = 0;
};

ToyLVLM make_toy_model(const ModelSpec& spec);

// -----------------------------------------------------------------------
// Optimizer

class Adam {
public:
    explicit Adam(double lr) : lr_(lr) {}

    // applies averaged gradients accumulated per parameter Mat
    void step(const std::vector<std::pair<Mat*, const Mat*>>& grads);

private:
    struct State {
        std::vector<double> m, v;
    };
    double lr_;
    double beta1_ = 0.9, beta2_ = 0.999, eps_ = 1e-8;
    long t_ = 0;
    std::unordered_map<Mat*, State> state_;
};

// Accumulates gradients across per-item tapes before an optimizer step.
class GradAccum {
public:
    void add(const Bound& bound, const Tape& tape, double scale);
    std::vector<std::pair<Mat*, const Mat*>> averaged();
    void clear();

private:
    std::map<Mat*, Mat> grads_;
};

// -----------------------------------------------------------------------
// Training configs

struct TrainConfig {
    bool itc = true;
    bool itm = true;
    bool ic = true;
    int stage1_steps = 2000;
    int stage2_steps = 1000;
    double lr = 1e-3;
    int batch = 8;
    std::uint64_t seed = 0;
    std::string head_variant = "B";

    void validate_compressed() const;
};

// Trains a query-token projector against a frozen encoder using the enabled
// stage-1 tasks, then a generative stage with a frozen head attached.
CompressedProjectorParams train_compressed_surrogate(
    const std::vector<const VQAItem*>& data, VisualEncoderParams& frozen_encoder,
    const TrainConfig& cfg, int image_size, std::vector<double>* loss_curve = nullptr);

// Alignment stage (contrastive pooled-feature match), then a stage through a
// frozen head. Only the MLP projector parameters move.
UncompressedProjectorParams train_uncompressed_surrogate(
    const std::vector<const VQAItem*>& data, VisualEncoderParams& frozen_encoder,
    const TrainConfig& cfg, int image_size, int pool_factor = 1,
    std::vector<double>* loss_curve = nullptr);

// Supervised answer training of a full toy target (encoder+projector+head).
// Returns final train loss.
double train_target(ToyLVLM& model, const std::vector<const VQAItem*>& data, int steps,
                    double lr, int batch, std::uint64_t seed);

// ITM train accuracy of a trained projector (used as a trainability oracle)
double itm_train_accuracy(CompressedProjectorParams& proj, Mat& w_itm, Mat& b_itm,
                          const std::vector<const VQAItem*>& data,
                          VisualEncoderParams& encoder, int image_size);

// -----------------------------------------------------------------------
// Registry: directory of checkpoints plus a JSON index.

class Registry {
public:
    explicit Registry(std::string dir);

    void put_model(const std::string& id, ToyLVLM& model, nlohmann::json meta,
                   bool overwrite = true);
    bool has(const std::string& id) const;
    ToyLVLM& model(const std::string& id);  // cached load
    nlohmann::json meta(const std::string& id) const;
    std::vector<std::string> ids() const;
    const std::string& dir() const { return dir_; }

    // Audited access to a target's projector weights: every call is counted.
    // Attack-side code must obtain target projector parameters only through
    // this accessor so gray-box hygiene is checkable.
    ProjectorParams& attack_projector(const std::string& id);
    long projector_reads(const std::string& id) const;
    void reset_audit();

private:
    std::string index_path() const;
    void load_index();
    void save_index() const;  // atomic: tmp file + rename

    std::string dir_;
    nlohmann::json index_;
    std::map<std::string, ToyLVLM> cache_;
    std::map<std::string, long> audit_;
};

// -----------------------------------------------------------------------
// Threat scenarios

enum class ScenarioKind { white_box, transfer, scratch };

ScenarioKind scenario_kind_from_string(const std::string& s);
std::string scenario_kind_name(ScenarioKind k);

struct ScenarioSpec {
    ScenarioKind kind = ScenarioKind::white_box;
    std::string target_id;
    std::vector<std::string> surrogate_ids;  // transfer
    TrainConfig train;                       // scratch
    int k = 1;                               // scratch: number of surrogates to train
};

// white_box -> target VE + target VLP (audited read); transfer -> sibling
// VLPs over the target VE; scratch -> freshly trained VLPs over the target
// VE. In gray-box scenarios the target projector is never read.
SurrogateBundle resolve_scenario(const ScenarioSpec& spec, Registry& registry,
                                 const std::vector<const VQAItem*>& train_data,
                                 int image_size);

}  // namespace projprobe
