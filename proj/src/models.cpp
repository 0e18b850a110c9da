#include "projprobe/models.hpp"

#include <cmath>

namespace projprobe {

namespace {

Mat xavier(int rows, int cols, Rng& rng) {
    return rng.normal_mat(rows, cols, std::sqrt(2.0 / (rows + cols)));
}

Mat ones_row(int cols) {
    Mat m(1, cols);
    m.fill(1.0);
    return m;
}

AttnParams init_attn(int d_model, int heads, Rng& rng) {
    AttnParams p;
    p.heads = heads;
    p.wq = xavier(d_model, d_model, rng); p.bq = Mat(1, d_model);
    p.wk = xavier(d_model, d_model, rng); p.bk = Mat(1, d_model);
    p.wv = xavier(d_model, d_model, rng); p.bv = Mat(1, d_model);
    p.wo = xavier(d_model, d_model, rng); p.bo = Mat(1, d_model);
    return p;
}

FfnParams init_ffn(int d_model, int hidden, Rng& rng) {
    FfnParams p;
    p.w1 = xavier(d_model, hidden, rng); p.b1 = Mat(1, hidden);
    p.w2 = xavier(hidden, d_model, rng); p.b2 = Mat(1, d_model);
    return p;
}

BlockParams init_block(int d_model, int heads, int hidden, Rng& rng) {
    BlockParams p;
    p.ln1_g = ones_row(d_model); p.ln1_b = Mat(1, d_model);
    p.attn = init_attn(d_model, heads, rng);
    p.ln2_g = ones_row(d_model); p.ln2_b = Mat(1, d_model);
    p.ffn = init_ffn(d_model, hidden, rng);
    return p;
}

int bind(Tape& t, Mat& m, bool train, Bound* bound) {
    const int id = t.leaf(m, train);
    if (bound) bound->entries.push_back({&m, id});
    return id;
}

int ffn_forward(Tape& t, FfnParams& p, int x, bool train, Bound* bound) {
    const int w1 = bind(t, p.w1, train, bound), b1 = bind(t, p.b1, train, bound);
    const int w2 = bind(t, p.w2, train, bound), b2 = bind(t, p.b2, train, bound);
    int h = t.add_rowvec(t.matmul(x, w1), b1);
    h = t.gelu(h);
    return t.add_rowvec(t.matmul(h, w2), b2);
}

int layernorm(Tape& t, Mat& g, Mat& b, int x, bool train, Bound* bound) {
    return t.layernorm_rows(x, bind(t, g, train, bound), bind(t, b, train, bound));
}

}  // namespace

// ---------------------------------------------------------------------------

void ImageBatch::validate() const {
    if (batch <= 0 || height <= 0 || width <= 0 || channels <= 0)
        throw ConfigError("ImageBatch: empty geometry");
    if (height != width) throw ConfigError("ImageBatch: height and width must be equal");
    if (pixels.size() != static_cast<std::size_t>(batch) * item_size())
        throw ConfigError("ImageBatch: pixel buffer size mismatch");
    for (double v : pixels)
        if (!(v >= 0.0 && v <= 1.0))
            throw ConfigError("ImageBatch: pixel values must lie in [0,1]");
}

void TokenTensor::validate() const {
    if (items.empty() || items[0].rows() <= 0 || items[0].cols() <= 0)
        throw ConfigError("TokenTensor: empty");
    for (const Mat& m : items) {
        if (m.rows() != tokens() || m.cols() != dim())
            throw ConfigError("TokenTensor: ragged batch");
        if (!m.all_finite()) throw NumericalError("TokenTensor: non-finite entries");
    }
}

// ---------------------------------------------------------------------------

VisualEncoderParams VisualEncoderParams::init(int image_size, int patch, int d_model,
                                              int n_blocks, int heads, int mlp_hidden,
                                              Rng& rng) {
    if (image_size % patch != 0) throw ConfigError("encoder: image size not divisible by patch");
    VisualEncoderParams p;
    p.image_size = image_size;
    p.patch = patch;
    p.d_model = d_model;
    p.heads = heads;
    p.mlp_hidden = mlp_hidden;
    const int patch_dim = patch * patch * p.channels;
    p.patch_w = xavier(patch_dim, d_model, rng);
    p.patch_b = Mat(1, d_model);
    p.pos = rng.normal_mat(p.token_count(), d_model, 0.02);
    for (int i = 0; i < n_blocks; ++i) p.blocks.push_back(init_block(d_model, heads, mlp_hidden, rng));
    p.lnf_g = ones_row(d_model); p.lnf_b = Mat(1, d_model);
    p.w_out = xavier(d_model, d_model, rng); p.b_out = Mat(1, d_model);
    return p;
}

CompressedProjectorParams CompressedProjectorParams::init(int num_queries, int d_model,
                                                          int d_out, int n_blocks, int heads,
                                                          int mlp_hidden, bool instr_conditioned,
                                                          Rng& rng) {
    CompressedProjectorParams p;
    p.num_queries = num_queries;
    p.d_model = d_model;
    p.d_out = d_out;
    p.heads = heads;
    p.mlp_hidden = mlp_hidden;
    p.instr_conditioned = instr_conditioned;
    p.queries = rng.normal_mat(num_queries, d_model, 0.5);
    for (int i = 0; i < n_blocks; ++i) {
        QFormerBlockParams b;
        b.ln1_g = ones_row(d_model); b.ln1_b = Mat(1, d_model);
        b.self_attn = init_attn(d_model, heads, rng);
        b.ln2_g = ones_row(d_model); b.ln2_b = Mat(1, d_model);
        b.cross_attn = init_attn(d_model, heads, rng);
        b.ln3_g = ones_row(d_model); b.ln3_b = Mat(1, d_model);
        b.ffn = init_ffn(d_model, mlp_hidden, rng);
        p.blocks.push_back(std::move(b));
    }
    p.lnf_g = ones_row(d_model); p.lnf_b = Mat(1, d_model);
    p.w_out = xavier(d_model, d_out, rng); p.b_out = Mat(1, d_out);
    return p;
}

UncompressedProjectorParams UncompressedProjectorParams::init(int pool_factor, int d_in,
                                                              int d_hidden, int d_out, Rng& rng) {
    if (pool_factor < 1) throw ConfigError("uncompressed projector: pool factor must be >= 1");
    UncompressedProjectorParams p;
    p.pool_factor = pool_factor;
    p.d_in = d_in;
    p.d_hidden = d_hidden;
    p.d_out = d_out;
    p.w1 = xavier(d_in, d_hidden, rng); p.b1 = Mat(1, d_hidden);
    p.w2 = xavier(d_hidden, d_out, rng); p.b2 = Mat(1, d_out);
    return p;
}

InstrEmbedParams InstrEmbedParams::init(int vocab, int t_instr, int d_model, Rng& rng) {
    InstrEmbedParams p;
    p.vocab = vocab;
    p.t_instr = t_instr;
    p.d_model = d_model;
    p.table = rng.normal_mat(vocab, d_model, 0.5);
    p.pos = rng.normal_mat(t_instr, d_model, 0.02);
    return p;
}

DownstreamHeadParams DownstreamHeadParams::init(const std::string& variant, int d_model,
                                                int heads, int n_answers, Rng& rng) {
    DownstreamHeadParams p;
    p.variant = variant;
    p.d_model = d_model;
    p.heads = heads;
    // variants differ in FFN width; combined with per-variant seeds at the
    // call site this stands in for "a different LLM"
    p.mlp_hidden = variant == "B" ? 192 : variant == "C" ? 320 : 256;
    p.n_answers = n_answers;
    p.block = init_block(d_model, heads, p.mlp_hidden, rng);
    p.lnf_g = ones_row(d_model); p.lnf_b = Mat(1, d_model);
    p.w_cls = xavier(d_model, n_answers, rng); p.b_cls = Mat(1, n_answers);
    return p;
}

int ToyLVLM::projector_tokens() const {
    if (auto* c = std::get_if<CompressedProjectorParams>(&projector)) return c->num_queries;
    const auto& u = std::get<UncompressedProjectorParams>(projector);
    return encoder.token_count() / (u.pool_factor * u.pool_factor);
}

// ---------------------------------------------------------------------------

int attention_forward(Tape& t, AttnParams& p, int x, int ctx, bool train, Bound* bound) {
    const int d = t.value(x).cols();
    if (d % p.heads != 0) throw ConfigError("attention: d_model not divisible by heads");
    const int dh = d / p.heads;
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));

    const int wq = bind(t, p.wq, train, bound), bq = bind(t, p.bq, train, bound);
    const int wk = bind(t, p.wk, train, bound), bk = bind(t, p.bk, train, bound);
    const int wv = bind(t, p.wv, train, bound), bv = bind(t, p.bv, train, bound);
    const int wo = bind(t, p.wo, train, bound), bo = bind(t, p.bo, train, bound);

    const int q = t.add_rowvec(t.matmul(x, wq), bq);
    const int k = t.add_rowvec(t.matmul(ctx, wk), bk);
    const int v = t.add_rowvec(t.matmul(ctx, wv), bv);

    std::vector<int> heads;
    heads.reserve(p.heads);
    for (int h = 0; h < p.heads; ++h) {
        const int qs = t.slice_cols(q, h * dh, (h + 1) * dh);
        const int ks = t.slice_cols(k, h * dh, (h + 1) * dh);
        const int vs = t.slice_cols(v, h * dh, (h + 1) * dh);
        const int scores = t.scale(t.matmul(qs, t.transpose_op(ks)), inv_sqrt_dh);
        heads.push_back(t.matmul(t.softmax_rows(scores), vs));
    }
    const int cat = p.heads == 1 ? heads[0] : t.concat_cols(heads);
    return t.add_rowvec(t.matmul(cat, wo), bo);
}

int block_forward(Tape& t, BlockParams& p, int x, bool train, Bound* bound) {
    const int n1 = layernorm(t, p.ln1_g, p.ln1_b, x, train, bound);
    x = t.add(x, attention_forward(t, p.attn, n1, n1, train, bound));
    const int n2 = layernorm(t, p.ln2_g, p.ln2_b, x, train, bound);
    return t.add(x, ffn_forward(t, p.ffn, n2, train, bound));
}

int encoder_forward(Tape& t, VisualEncoderParams& p, int patches, bool train, Bound* bound) {
    const Mat& in = t.value(patches);
    const int patch_dim = p.patch * p.patch * p.channels;
    if (in.rows() != p.token_count() || in.cols() != patch_dim)
        throw ConfigError("encoder: patch matrix does not match encoder geometry");

    int x = t.add_rowvec(t.matmul(patches, bind(t, p.patch_w, train, bound)),
                         bind(t, p.patch_b, train, bound));
    x = t.add(x, bind(t, p.pos, train, bound));
    for (std::size_t i = 0; i < p.blocks.size(); ++i) {
        x = block_forward(t, p.blocks[i], x, train, bound);
        if (!t.value(x).all_finite())
            throw NumericalError("encoder: non-finite activations in block " + std::to_string(i));
    }
    x = layernorm(t, p.lnf_g, p.lnf_b, x, train, bound);
    return t.add_rowvec(t.matmul(x, bind(t, p.w_out, train, bound)),
                        bind(t, p.b_out, train, bound));
}

int compressed_forward(Tape& t, CompressedProjectorParams& p, int visual, int instr,
                       bool train, Bound* bound) {
    if (t.value(visual).cols() != p.d_model)
        throw ConfigError("compressed projector: visual feature dimension mismatch");
    if (instr >= 0 && t.value(instr).cols() != p.d_model)
        throw ConfigError("compressed projector: instruction dimension mismatch");

    const int ctx = (p.instr_conditioned && instr >= 0)
                        ? t.concat_rows({visual, instr})
                        : visual;
    int q = bind(t, p.queries, train, bound);
    for (auto& b : p.blocks) {
        const int n1 = layernorm(t, b.ln1_g, b.ln1_b, q, train, bound);
        q = t.add(q, attention_forward(t, b.self_attn, n1, n1, train, bound));
        const int n2 = layernorm(t, b.ln2_g, b.ln2_b, q, train, bound);
        q = t.add(q, attention_forward(t, b.cross_attn, n2, ctx, train, bound));
        const int n3 = layernorm(t, b.ln3_g, b.ln3_b, q, train, bound);
        q = t.add(q, ffn_forward(t, b.ffn, n3, train, bound));
    }
    q = layernorm(t, p.lnf_g, p.lnf_b, q, train, bound);
    return t.add_rowvec(t.matmul(q, bind(t, p.w_out, train, bound)),
                        bind(t, p.b_out, train, bound));
}

int uncompressed_forward(Tape& t, UncompressedProjectorParams& p, int visual,
                         bool train, Bound* bound) {
    const Mat& in = t.value(visual);
    if (in.cols() != p.d_in)
        throw ConfigError("uncompressed projector: visual feature dimension mismatch");
    const int side = static_cast<int>(std::lround(std::sqrt(static_cast<double>(in.rows()))));
    if (side * side != in.rows() || side % p.pool_factor != 0)
        throw ConfigError("uncompressed projector: token grid not divisible by pool factor");

    const int pooled = p.pool_factor == 1 ? visual : t.mean_pool_grid(visual, p.pool_factor);
    int h = t.add_rowvec(t.matmul(pooled, bind(t, p.w1, train, bound)),
                         bind(t, p.b1, train, bound));
    h = t.gelu(h);
    return t.add_rowvec(t.matmul(h, bind(t, p.w2, train, bound)),
                        bind(t, p.b2, train, bound));
}

int instr_embed_forward(Tape& t, InstrEmbedParams& p, const std::vector<int>& token_ids,
                        bool train, Bound* bound) {
    if (static_cast<int>(token_ids.size()) != p.t_instr)
        throw ConfigError("instruction embedder: expected " + std::to_string(p.t_instr) + " tokens");
    const int table = bind(t, p.table, train, bound);
    const int pos = bind(t, p.pos, train, bound);
    return t.add(t.gather_rows(table, token_ids), pos);
}

int head_forward(Tape& t, DownstreamHeadParams& p, int proj_tokens, int instr,
                 bool train, Bound* bound) {
    if (t.value(proj_tokens).cols() != p.d_model || t.value(instr).cols() != p.d_model)
        throw ConfigError("head: token dimension mismatch");
    int x = t.concat_rows({proj_tokens, instr});
    x = block_forward(t, p.block, x, train, bound);
    x = layernorm(t, p.lnf_g, p.lnf_b, x, train, bound);
    const int pooled = t.mean_rows(x);
    return t.add_rowvec(t.matmul(pooled, bind(t, p.w_cls, train, bound)),
                        bind(t, p.b_cls, train, bound));
}

int projector_forward(Tape& t, ProjectorParams& p, int visual, int instr,
                      bool train, Bound* bound) {
    if (auto* c = std::get_if<CompressedProjectorParams>(&p))
        return compressed_forward(t, *c, visual, instr, train, bound);
    return uncompressed_forward(t, std::get<UncompressedProjectorParams>(p), visual, train, bound);
}

// ---------------------------------------------------------------------------

Mat patchify(const ImageBatch& images, int item, int patch) {
    if (images.height % patch != 0 || images.width % patch != 0)
        throw ConfigError("patchify: image size not divisible by patch size");
    const int side = images.height / patch;
    const int patch_dim = patch * patch * images.channels;
    const double* px = images.item(item);
    const int hw = images.height * images.width;
    Mat out(side * side, patch_dim);
    for (int py = 0; py < side; ++py)
        for (int pxi = 0; pxi < side; ++pxi) {
            double* row = out.row(py * side + pxi);
            int o = 0;
            for (int c = 0; c < images.channels; ++c)
                for (int dy = 0; dy < patch; ++dy)
                    for (int dx = 0; dx < patch; ++dx)
                        row[o++] = px[c * hw + (py * patch + dy) * images.width +
                                      pxi * patch + dx];
        }
    return out;
}

std::vector<double> patch_grad_to_pixels(const Mat& grad, int patch, int channels,
                                         int height, int width) {
    const int side = height / patch;
    const int hw = height * width;
    std::vector<double> out(static_cast<std::size_t>(channels) * hw, 0.0);
    for (int py = 0; py < side; ++py)
        for (int pxi = 0; pxi < side; ++pxi) {
            const double* row = grad.row(py * side + pxi);
            int o = 0;
            for (int c = 0; c < channels; ++c)
                for (int dy = 0; dy < patch; ++dy)
                    for (int dx = 0; dx < patch; ++dx)
                        out[c * hw + (py * patch + dy) * width + pxi * patch + dx] += row[o++];
        }
    return out;
}

// ---------------------------------------------------------------------------

TokenTensor encode_image(VisualEncoderParams& params, const ImageBatch& images) {
    images.validate();
    if (images.height != params.image_size || images.channels != params.channels)
        throw ConfigError("encode_image: image geometry does not match encoder");
    TokenTensor out;
    for (int b = 0; b < images.batch; ++b) {
        Tape t;
        const int patches = t.leaf(patchify(images, b, params.patch));
        out.items.push_back(t.value(encoder_forward(t, params, patches)));
    }
    return out;
}

TokenTensor project_compressed(CompressedProjectorParams& params, const TokenTensor& visual,
                               const InstructionEmbedding& instr) {
    visual.validate();
    TokenTensor out;
    for (int b = 0; b < visual.batch(); ++b) {
        Tape t;
        const int v = t.leaf(visual.items[b]);
        int e = -1;
        if (params.instr_conditioned) {
            if (instr.items.empty())
                throw ConfigError("project_compressed: instruction-conditioned projector needs instructions");
            e = t.leaf(instr.items[b < static_cast<int>(instr.items.size()) ? b : 0]);
        }
        out.items.push_back(t.value(compressed_forward(t, params, v, e)));
    }
    return out;
}

TokenTensor project_uncompressed(UncompressedProjectorParams& params, const TokenTensor& visual) {
    visual.validate();
    TokenTensor out;
    for (int b = 0; b < visual.batch(); ++b) {
        Tape t;
        out.items.push_back(t.value(uncompressed_forward(t, params, t.leaf(visual.items[b]))));
    }
    return out;
}

TokenTensor pool_tokens(const TokenTensor& visual, int factor) {
    visual.validate();
    TokenTensor out;
    for (const Mat& m : visual.items) {
        Tape t;
        try {
            out.items.push_back(t.value(t.mean_pool_grid(t.leaf(m), factor)));
        } catch (const std::invalid_argument& e) {
            throw ConfigError(e.what());
        }
    }
    return out;
}

InstructionEmbedding embed_instruction(InstrEmbedParams& params,
                                       const std::vector<std::vector<int>>& token_ids,
                                       const std::vector<int>& question_ids) {
    InstructionEmbedding out;
    out.question_ids = question_ids;
    for (const auto& ids : token_ids) {
        Tape t;
        out.items.push_back(t.value(instr_embed_forward(t, params, ids)));
    }
    return out;
}

std::vector<Mat> forward_full(ToyLVLM& model, const ImageBatch& images,
                              const std::vector<std::vector<int>>& instr_tokens) {
    images.validate();
    if (static_cast<std::size_t>(images.batch) != instr_tokens.size())
        throw ConfigError("forward_full: instruction count does not match batch");
    std::vector<Mat> logits;
    for (int b = 0; b < images.batch; ++b) {
        Tape t;
        const int patches = t.leaf(patchify(images, b, model.encoder.patch));
        const int v = encoder_forward(t, model.encoder, patches);
        const int e = instr_embed_forward(t, model.instr, instr_tokens[b]);
        const int proj = projector_forward(t, model.projector, v, e);
        logits.push_back(t.value(head_forward(t, model.head, proj, e)));
    }
    return logits;
}

}  // namespace projprobe
