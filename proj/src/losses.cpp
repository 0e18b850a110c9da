#include "projprobe/losses.hpp"

#include <cmath>

namespace projprobe {

namespace {

void check_pair(const ImageBatch& a, const ImageBatch& b) {
    if (a.batch != b.batch || a.channels != b.channels || a.height != b.height ||
        a.width != b.width)
        throw ConfigError("loss: clean and adversarial batches differ in shape");
}

// instruction embedding for batch item b, or empty when absent
const Mat* instr_item(const InstructionEmbedding& instr, int b) {
    if (instr.items.empty()) return nullptr;
    return &instr.items[b < static_cast<int>(instr.items.size()) ? b : 0];
}

}  // namespace

std::size_t SurrogateBundle::parameter_count() const {
    std::size_t n = 0;
    auto count = [&n](const std::string&, Mat& m) { n += m.size(); };
    if (encoder) encoder->visit("enc", count);
    for (const auto& p : projectors) {
        if (auto* c = std::get_if<CompressedProjectorParams>(p.get()))
            c->visit("proj", count);
        else
            std::get<UncompressedProjectorParams>(*p).visit("proj", count);
    }
    return n;
}

SurrogateBundle build_bundle(std::shared_ptr<VisualEncoderParams> encoder,
                             std::vector<std::shared_ptr<ProjectorParams>> projectors,
                             std::vector<std::string> provenance) {
    if (!encoder) throw ValidationError("build_bundle: missing encoder");
    if (projectors.empty()) throw ValidationError("build_bundle: K must be >= 1");
    for (const auto& p : projectors) {
        const int d_in = std::holds_alternative<CompressedProjectorParams>(*p)
                             ? std::get<CompressedProjectorParams>(*p).d_model
                             : std::get<UncompressedProjectorParams>(*p).d_in;
        if (d_in != encoder->d_model)
            throw ValidationError("build_bundle: projector input dimension does not match encoder");
    }
    if (provenance.empty()) provenance.resize(projectors.size(), "unspecified");
    if (provenance.size() != projectors.size())
        throw ValidationError("build_bundle: provenance count mismatch");
    return SurrogateBundle{std::move(encoder), std::move(projectors), std::move(provenance)};
}

LossFn make_ve_loss(VisualEncoderParams& ve, const ImageBatch& x_clean) {
    x_clean.validate();
    auto clean = std::make_shared<TokenTensor>(encode_image(ve, x_clean));
    VisualEncoderParams* vep = &ve;
    const ImageBatch shape = x_clean;  // shape reference only
    return [vep, clean, shape](const ImageBatch& x_adv, std::vector<double>* grad) {
        check_pair(shape, x_adv);
        if (grad) grad->assign(x_adv.pixels.size(), 0.0);
        double total = 0.0;
        for (int b = 0; b < x_adv.batch; ++b) {
            Tape t;
            const int patches = t.leaf(patchify(x_adv, b, vep->patch), grad != nullptr);
            const int v = encoder_forward(t, *vep, patches);
            const int ref = t.leaf(clean->items[b]);
            const int loss = t.mse(v, ref);
            total += t.value(loss)(0, 0);
            if (grad) {
                t.backward(loss);
                auto px = patch_grad_to_pixels(t.grad(patches), vep->patch, x_adv.channels,
                                               x_adv.height, x_adv.width);
                double* g = grad->data() + b * x_adv.item_size();
                for (std::size_t i = 0; i < px.size(); ++i) g[i] += px[i] / x_adv.batch;
            }
        }
        return total / x_adv.batch;
    };
}

LossFn make_vlp_loss(VisualEncoderParams& ve, ProjectorParams& vlp, const ImageBatch& x_clean,
                     const InstructionEmbedding& instr) {
    x_clean.validate();
    // clean-side projector outputs cached once
    auto clean = std::make_shared<std::vector<Mat>>();
    {
        for (int b = 0; b < x_clean.batch; ++b) {
            Tape t;
            const int patches = t.leaf(patchify(x_clean, b, ve.patch));
            const int v = encoder_forward(t, ve, patches);
            const Mat* e = instr_item(instr, b);
            const int en = e ? t.leaf(*e) : -1;
            clean->push_back(t.value(projector_forward(t, vlp, v, en)));
        }
    }
    VisualEncoderParams* vep = &ve;
    ProjectorParams* vlpp = &vlp;
    auto instr_copy = std::make_shared<InstructionEmbedding>(instr);
    const ImageBatch shape = x_clean;
    return [vep, vlpp, clean, instr_copy, shape](const ImageBatch& x_adv,
                                                 std::vector<double>* grad) {
        check_pair(shape, x_adv);
        if (grad) grad->assign(x_adv.pixels.size(), 0.0);
        double total = 0.0;
        for (int b = 0; b < x_adv.batch; ++b) {
            Tape t;
            const int patches = t.leaf(patchify(x_adv, b, vep->patch), grad != nullptr);
            const int v = encoder_forward(t, *vep, patches);
            const Mat* e = instr_item(*instr_copy, b);
            const int en = e ? t.leaf(*e) : -1;
            const int p = projector_forward(t, *vlpp, v, en);
            const int loss = t.mse(p, t.leaf((*clean)[b]));
            total += t.value(loss)(0, 0);
            if (grad) {
                t.backward(loss);
                auto px = patch_grad_to_pixels(t.grad(patches), vep->patch, x_adv.channels,
                                               x_adv.height, x_adv.width);
                double* g = grad->data() + b * x_adv.item_size();
                for (std::size_t i = 0; i < px.size(); ++i) g[i] += px[i] / x_adv.batch;
            }
        }
        return total / x_adv.batch;
    };
}

LossFn make_tcp_loss(const SurrogateBundle& bundle, const ImageBatch& x_clean,
                     const InstructionEmbedding& instr, const TCPConfig& cfg) {
    if (!(cfg.beta >= 0.0 && cfg.beta <= 1.0))
        throw ValidationError("loss_tcp: beta must lie in [0,1]");
    if (bundle.projectors.empty()) throw ValidationError("loss_tcp: empty surrogate bundle");
    if (cfg.k != bundle.k())
        throw ValidationError("loss_tcp: K does not match bundle size");
    x_clean.validate();

    auto enc = bundle.encoder;
    auto projs = bundle.projectors;
    // cache clean encoder and per-surrogate projector outputs
    auto clean_v = std::make_shared<TokenTensor>(encode_image(*enc, x_clean));
    auto clean_p = std::make_shared<std::vector<std::vector<Mat>>>();  // [k][batch]
    for (auto& proj : projs) {
        std::vector<Mat> outs;
        for (int b = 0; b < x_clean.batch; ++b) {
            Tape t;
            const int v = t.leaf(clean_v->items[b]);
            const Mat* e = instr_item(instr, b);
            const int en = e ? t.leaf(*e) : -1;
            outs.push_back(t.value(projector_forward(t, *proj, v, en)));
        }
        clean_p->push_back(std::move(outs));
    }

    auto instr_copy = std::make_shared<InstructionEmbedding>(instr);
    const ImageBatch shape = x_clean;
    const double beta = cfg.beta;
    return [enc, projs, clean_v, clean_p, instr_copy, beta, shape](
               const ImageBatch& x_adv, std::vector<double>* grad) {
        check_pair(shape, x_adv);
        if (grad) grad->assign(x_adv.pixels.size(), 0.0);
        const int k = static_cast<int>(projs.size());
        double total = 0.0;
        for (int b = 0; b < x_adv.batch; ++b) {
            Tape t;
            const int patches = t.leaf(patchify(x_adv, b, enc->patch), grad != nullptr);
            const int v = encoder_forward(t, *enc, patches);
            const Mat* e = instr_item(*instr_copy, b);
            const int en = e ? t.leaf(*e) : -1;
            int loss = t.scale(t.mse(v, t.leaf(clean_v->items[b])), beta);
            for (int j = 0; j < k; ++j) {
                const int pj = projector_forward(t, *projs[j], v, en);
                const int lj = t.mse(pj, t.leaf((*clean_p)[j][b]));
                loss = t.add(loss, t.scale(lj, (1.0 - beta) / k));
            }
            total += t.value(loss)(0, 0);
            if (grad) {
                t.backward(loss);
                auto px = patch_grad_to_pixels(t.grad(patches), enc->patch, x_adv.channels,
                                               x_adv.height, x_adv.width);
                double* g = grad->data() + b * x_adv.item_size();
                for (std::size_t i = 0; i < px.size(); ++i) g[i] += px[i] / x_adv.batch;
            }
        }
        return total / x_adv.batch;
    };
}

double loss_ve(VisualEncoderParams& ve, const ImageBatch& x, const ImageBatch& x_adv) {
    return make_ve_loss(ve, x)(x_adv, nullptr);
}

double loss_vlp(VisualEncoderParams& ve, ProjectorParams& vlp, const ImageBatch& x,
                const ImageBatch& x_adv, const InstructionEmbedding& instr) {
    return make_vlp_loss(ve, vlp, x, instr)(x_adv, nullptr);
}

double loss_tcp(const SurrogateBundle& bundle, const ImageBatch& x, const ImageBatch& x_adv,
                const InstructionEmbedding& instr, const TCPConfig& cfg) {
    return make_tcp_loss(bundle, x, instr, cfg)(x_adv, nullptr);
}

}  // namespace projprobe
