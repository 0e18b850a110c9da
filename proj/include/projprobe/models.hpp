#pragma once

#include <optional>
#include <string>
#include <variant>
#include <vector>

#include "projprobe/errors.hpp"
#include "projprobe/mat.hpp"
#include "projprobe/rng.hpp"
#include "projprobe/tape.hpp"

namespace projprobe {

// ---------------------------------------------------------------------------
// Data carriers

// Batched pixel images in raw [0,1] space; attacks and clamping operate here.
struct ImageBatch {
    int batch = 0;
    int channels = 3;
    int height = 0;
    int width = 0;
    std::vector<double> pixels;  // batch * channels * height * width, CHW per item

    std::size_t item_size() const {
        return static_cast<std::size_t>(channels) * height * width;
    }
    double* item(int b) { return pixels.data() + b * item_size(); }
    const double* item(int b) const { return pixels.data() + b * item_size(); }

    void validate() const;
};

// (batch, I, J) token features, one Mat per batch item.
struct TokenTensor {
    std::vector<Mat> items;

    int batch() const { return static_cast<int>(items.size()); }
    int tokens() const { return items.empty() ? 0 : items[0].rows(); }
    int dim() const { return items.empty() ? 0 : items[0].cols(); }
    void validate() const;
};

// Embedded instruction tokens, one (T_instr x d_model) Mat per batch item.
struct InstructionEmbedding {
    std::vector<Mat> items;
    std::vector<int> question_ids;
};

// ---------------------------------------------------------------------------
// Parameter records. Pure data; forwards are free functions over a Tape.

struct AttnParams {
    int heads = 1;
    Mat wq, bq, wk, bk, wv, bv, wo, bo;

    template <typename F>
    void visit(const std::string& prefix, F&& f) {
        f(prefix + ".wq", wq); f(prefix + ".bq", bq);
        f(prefix + ".wk", wk); f(prefix + ".bk", bk);
        f(prefix + ".wv", wv); f(prefix + ".bv", bv);
        f(prefix + ".wo", wo); f(prefix + ".bo", bo);
    }
};

struct FfnParams {
    Mat w1, b1, w2, b2;

    template <typename F>
    void visit(const std::string& prefix, F&& f) {
        f(prefix + ".w1", w1); f(prefix + ".b1", b1);
        f(prefix + ".w2", w2); f(prefix + ".b2", b2);
    }
};

struct BlockParams {
    Mat ln1_g, ln1_b, ln2_g, ln2_b;
    AttnParams attn;
    FfnParams ffn;

    template <typename F>
    void visit(const std::string& prefix, F&& f) {
        f(prefix + ".ln1_g", ln1_g); f(prefix + ".ln1_b", ln1_b);
        attn.visit(prefix + ".attn", f);
        f(prefix + ".ln2_g", ln2_g); f(prefix + ".ln2_b", ln2_b);
        ffn.visit(prefix + ".ffn", f);
    }
};

struct VisualEncoderParams {
    int image_size = 32;
    int patch = 8;
    int channels = 3;
    int d_model = 64;
    int heads = 4;
    int mlp_hidden = 256;

    Mat patch_w, patch_b;  // (patch*patch*channels x d_model), (1 x d_model)
    Mat pos;               // (N x d_model)
    std::vector<BlockParams> blocks;
    Mat lnf_g, lnf_b;
    Mat w_out, b_out;      // (d_model x d_model), (1 x d_model)

    int grid_side() const { return image_size / patch; }
    int token_count() const { return grid_side() * grid_side(); }

    static VisualEncoderParams init(int image_size, int patch, int d_model, int n_blocks,
                                    int heads, int mlp_hidden, Rng& rng);

    template <typename F>
    void visit(const std::string& prefix, F&& f) {
        f(prefix + ".patch_w", patch_w); f(prefix + ".patch_b", patch_b);
        f(prefix + ".pos", pos);
        for (std::size_t i = 0; i < blocks.size(); ++i)
            blocks[i].visit(prefix + ".block" + std::to_string(i), f);
        f(prefix + ".lnf_g", lnf_g); f(prefix + ".lnf_b", lnf_b);
        f(prefix + ".w_out", w_out); f(prefix + ".b_out", b_out);
    }
};

// Query-token cross-attention projector. Output token count is always M.
struct QFormerBlockParams {
    Mat ln1_g, ln1_b, ln2_g, ln2_b, ln3_g, ln3_b;
    AttnParams self_attn;
    AttnParams cross_attn;
    FfnParams ffn;

    template <typename F>
    void visit(const std::string& prefix, F&& f) {
        f(prefix + ".ln1_g", ln1_g); f(prefix + ".ln1_b", ln1_b);
        self_attn.visit(prefix + ".self", f);
        f(prefix + ".ln2_g", ln2_g); f(prefix + ".ln2_b", ln2_b);
        cross_attn.visit(prefix + ".cross", f);
        f(prefix + ".ln3_g", ln3_g); f(prefix + ".ln3_b", ln3_b);
        ffn.visit(prefix + ".ffn", f);
    }
};

struct CompressedProjectorParams {
    int num_queries = 4;   // M
    int d_model = 64;
    int d_out = 64;
    int heads = 4;
    int mlp_hidden = 256;
    bool instr_conditioned = true;

    Mat queries;           // (M x d_model)
    std::vector<QFormerBlockParams> blocks;
    Mat lnf_g, lnf_b;
    Mat w_out, b_out;      // (d_model x d_out)

    static CompressedProjectorParams init(int num_queries, int d_model, int d_out,
                                          int n_blocks, int heads, int mlp_hidden,
                                          bool instr_conditioned, Rng& rng);

    template <typename F>
    void visit(const std::string& prefix, F&& f) {
        f(prefix + ".queries", queries);
        for (std::size_t i = 0; i < blocks.size(); ++i)
            blocks[i].visit(prefix + ".block" + std::to_string(i), f);
        f(prefix + ".lnf_g", lnf_g); f(prefix + ".lnf_b", lnf_b);
        f(prefix + ".w_out", w_out); f(prefix + ".b_out", b_out);
    }
};

// Spatial mean pooling followed by a per-token two-layer MLP.
struct UncompressedProjectorParams {
    int pool_factor = 1;   // p; output token count = N / p^2
    int d_in = 64;
    int d_hidden = 256;
    int d_out = 64;

    Mat w1, b1, w2, b2;

    static UncompressedProjectorParams init(int pool_factor, int d_in, int d_hidden,
                                            int d_out, Rng& rng);

    template <typename F>
    void visit(const std::string& prefix, F&& f) {
        f(prefix + ".w1", w1); f(prefix + ".b1", b1);
        f(prefix + ".w2", w2); f(prefix + ".b2", b2);
    }
};

using ProjectorParams = std::variant<CompressedProjectorParams, UncompressedProjectorParams>;

struct InstrEmbedParams {
    int vocab = 32;
    int t_instr = 3;
    int d_model = 64;
    Mat table;  // (vocab x d_model)
    Mat pos;    // (t_instr x d_model)

    static InstrEmbedParams init(int vocab, int t_instr, int d_model, Rng& rng);

    template <typename F>
    void visit(const std::string& prefix, F&& f) {
        f(prefix + ".table", table);
        f(prefix + ".pos", pos);
    }
};

// Toy stand-in for the LLM: one transformer block over the concatenated
// projected and instruction tokens, mean-pooled, linear to the answer vocab.
struct DownstreamHeadParams {
    std::string variant = "A";
    int d_model = 64;
    int heads = 4;
    int mlp_hidden = 256;
    int n_answers = 16;

    BlockParams block;
    Mat lnf_g, lnf_b;
    Mat w_cls, b_cls;  // (d_model x n_answers)

    static DownstreamHeadParams init(const std::string& variant, int d_model, int heads,
                                     int n_answers, Rng& rng);

    template <typename F>
    void visit(const std::string& prefix, F&& f) {
        block.visit(prefix + ".block", f);
        f(prefix + ".lnf_g", lnf_g); f(prefix + ".lnf_b", lnf_b);
        f(prefix + ".w_cls", w_cls); f(prefix + ".b_cls", b_cls);
    }
};

struct ToyLVLM {
    VisualEncoderParams encoder;
    ProjectorParams projector;
    InstrEmbedParams instr;
    DownstreamHeadParams head;

    bool compressed() const {
        return std::holds_alternative<CompressedProjectorParams>(projector);
    }
    int projector_tokens() const;  // output token count for this architecture

    template <typename F>
    void visit(F&& f) {
        encoder.visit("enc", f);
        if (auto* c = std::get_if<CompressedProjectorParams>(&projector))
            c->visit("proj", f);
        else
            std::get<UncompressedProjectorParams>(projector).visit("proj", f);
        instr.visit("instr", f);
        head.visit("head", f);
    }
};

// ---------------------------------------------------------------------------
// Tape-level forwards. `bound` collects (param Mat, leaf id) pairs so an
// optimizer can read gradients back; pass train=false for frozen modules.

struct Bound {
    std::vector<std::pair<Mat*, int>> entries;
};

int attention_forward(Tape& t, AttnParams& p, int x, int ctx, bool train, Bound* bound);
int block_forward(Tape& t, BlockParams& p, int x, bool train, Bound* bound);
int encoder_forward(Tape& t, VisualEncoderParams& p, int patches, bool train = false,
                    Bound* bound = nullptr);
// instr < 0 disables instruction conditioning for this call
int compressed_forward(Tape& t, CompressedProjectorParams& p, int visual, int instr,
                       bool train = false, Bound* bound = nullptr);
int uncompressed_forward(Tape& t, UncompressedProjectorParams& p, int visual,
                         bool train = false, Bound* bound = nullptr);
int instr_embed_forward(Tape& t, InstrEmbedParams& p, const std::vector<int>& token_ids,
                        bool train = false, Bound* bound = nullptr);
int head_forward(Tape& t, DownstreamHeadParams& p, int proj_tokens, int instr,
                 bool train = false, Bound* bound = nullptr);
// projector dispatch; instruction is forwarded only to compressed projectors
int projector_forward(Tape& t, ProjectorParams& p, int visual, int instr,
                      bool train = false, Bound* bound = nullptr);

// ---------------------------------------------------------------------------
// Pixel <-> patch plumbing

// (N x patch*patch*channels) patch matrix for one batch item
Mat patchify(const ImageBatch& images, int item, int patch);
// maps a gradient w.r.t. the patch matrix back to per-pixel gradients
std::vector<double> patch_grad_to_pixels(const Mat& grad, int patch, int channels,
                                         int height, int width);

// ---------------------------------------------------------------------------
// Batched convenience API

TokenTensor encode_image(VisualEncoderParams& params, const ImageBatch& images);
TokenTensor project_compressed(CompressedProjectorParams& params, const TokenTensor& visual,
                               const InstructionEmbedding& instr);
TokenTensor project_uncompressed(UncompressedProjectorParams& params, const TokenTensor& visual);
TokenTensor pool_tokens(const TokenTensor& visual, int factor);
InstructionEmbedding embed_instruction(InstrEmbedParams& params,
                                       const std::vector<std::vector<int>>& token_ids,
                                       const std::vector<int>& question_ids);
// answer logits, one (1 x |A|) row per batch item
std::vector<Mat> forward_full(ToyLVLM& model, const ImageBatch& images,
                              const std::vector<std::vector<int>>& instr_tokens);

}  // namespace projprobe
