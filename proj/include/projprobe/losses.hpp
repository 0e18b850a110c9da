#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "projprobe/models.hpp"

namespace projprobe {

// Mixing weight and surrogate count for the combined attack objective.
struct TCPConfig {
    double beta = 0.0;  // in [0,1]
    int k = 1;
};

// Shared visual encoder plus K projector parameter sets.
struct SurrogateBundle {
    std::shared_ptr<VisualEncoderParams> encoder;
    std::vector<std::shared_ptr<ProjectorParams>> projectors;
    std::vector<std::string> provenance;

    int k() const { return static_cast<int>(projectors.size()); }
    std::size_t parameter_count() const;
};

SurrogateBundle build_bundle(std::shared_ptr<VisualEncoderParams> encoder,
                             std::vector<std::shared_ptr<ProjectorParams>> projectors,
                             std::vector<std::string> provenance = {});

// Differentiable attack objective: returns the loss over a batch (mean over
// items) and, when `pixel_grad` is non-null, fills d loss / d pixels with the
// same layout as ImageBatch::pixels.
using LossFn = std::function<double(const ImageBatch& x_adv, std::vector<double>* pixel_grad)>;

// Factories cache the clean-side outputs once; the returned LossFn treats
// them as constants. Instruction embeddings are per-batch-item constants.
LossFn make_ve_loss(VisualEncoderParams& ve, const ImageBatch& x_clean);
LossFn make_vlp_loss(VisualEncoderParams& ve, ProjectorParams& vlp, const ImageBatch& x_clean,
                     const InstructionEmbedding& instr);
LossFn make_tcp_loss(const SurrogateBundle& bundle, const ImageBatch& x_clean,
                     const InstructionEmbedding& instr, const TCPConfig& cfg);

// Value-only conveniences matching the loss definitions.
double loss_ve(VisualEncoderParams& ve, const ImageBatch& x, const ImageBatch& x_adv);
double loss_vlp(VisualEncoderParams& ve, ProjectorParams& vlp, const ImageBatch& x,
                const ImageBatch& x_adv, const InstructionEmbedding& instr);
double loss_tcp(const SurrogateBundle& bundle, const ImageBatch& x, const ImageBatch& x_adv,
                const InstructionEmbedding& instr, const TCPConfig& cfg);

}  // namespace projprobe
