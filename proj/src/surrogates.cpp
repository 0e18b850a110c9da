#include "projprobe/surrogates.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

#include "projprobe/checkpoint.hpp"

namespace projprobe {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr double kItcTemperature = 0.07;

// toy structure defaults shared by targets and scratch surrogates
constexpr int kNumQueries = 4;
constexpr int kQformerBlocks = 2;
constexpr int kHeads = 4;
constexpr int kMlpHidden = 256;
constexpr int kDOut = 64;

int bindp(Tape& t, Mat& m, bool train, Bound& bound) {
    const int id = t.leaf(m, train);
    if (train) bound.entries.push_back({&m, id});
    return id;
}

// frozen-encoder training starts from cached encoder outputs
struct CachedFeatures {
    std::vector<Mat> visual;  // encoder outputs
    std::vector<Mat> instr;   // shared instruction embeddings
};

CachedFeatures cache_features(const std::vector<const VQAItem*>& data,
                              VisualEncoderParams& encoder, int image_size) {
    CachedFeatures out;
    InstrEmbedParams& ie = shared_instr_embedder();
    for (const VQAItem* it : data) {
        Tape t;
        const int patches = t.leaf(patchify(to_image_batch(*it, image_size), 0, encoder.patch));
        out.visual.push_back(t.value(encoder_forward(t, encoder, patches)));
        Tape t2;
        out.instr.push_back(t2.value(instr_embed_forward(t2, ie, it->instr_tokens)));
    }
    return out;
}

std::vector<int> next_batch(std::vector<int>& order, std::size_t& cursor, int batch, Rng& rng) {
    std::vector<int> idx;
    for (int b = 0; b < batch; ++b) {
        if (cursor >= order.size()) {
            rng.shuffle(order.begin(), order.end());
            cursor = 0;
        }
        idx.push_back(order[cursor++]);
    }
    return idx;
}

}  // namespace

InstrEmbedParams& shared_instr_embedder() {
    static InstrEmbedParams params = [] {
        Rng rng(seed_split(0x70CEu, "shared-instr-embedder"));
        return InstrEmbedParams::init(kQuestionVocab, kInstrLen, 64, rng);
    }();
    return params;
}

ToyLVLM make_toy_model(const ModelSpec& spec) {
    if (spec.projector != "compressed" && spec.projector != "uncompressed")
        throw ValidationError("model: projector must be 'compressed' or 'uncompressed', got '" +
                              spec.projector + "'");
    Rng rng(seed_split(spec.seed, "model-init"));
    ToyLVLM m;
    m.encoder = VisualEncoderParams::init(spec.image_size, 8, 64, 2, kHeads, kMlpHidden, rng);
    if (spec.projector == "compressed") {
        m.projector = CompressedProjectorParams::init(kNumQueries, 64, kDOut, kQformerBlocks,
                                                      kHeads, kMlpHidden, true, rng);
    } else {
        if (spec.pool_factor < 1 || m.encoder.grid_side() % spec.pool_factor != 0)
            throw ValidationError("model: pool factor must divide the token grid side");
        m.projector = UncompressedProjectorParams::init(spec.pool_factor, 64, kMlpHidden,
                                                        kDOut, rng);
    }
    m.instr = shared_instr_embedder();
    Rng head_rng(seed_split(spec.seed, "head-" + spec.head_variant));
    m.head = DownstreamHeadParams::init(spec.head_variant, 64, kHeads, kNumAnswers, head_rng);
    return m;
}

// -----------------------------------------------------------------------

void Adam::step(const std::vector<std::pair<Mat*, const Mat*>>& grads) {
    ++t_;
    const double bc1 = 1.0 - std::pow(beta1_, t_);
    const double bc2 = 1.0 - std::pow(beta2_, t_);
    for (const auto& [param, grad] : grads) {
        State& s = state_[param];
        if (s.m.empty()) {
            s.m.assign(param->size(), 0.0);
            s.v.assign(param->size(), 0.0);
        }
        for (std::size_t i = 0; i < param->size(); ++i) {
            const double g = grad->vec()[i];
            s.m[i] = beta1_ * s.m[i] + (1.0 - beta1_) * g;
            s.v[i] = beta2_ * s.v[i] + (1.0 - beta2_) * g * g;
            param->vec()[i] -= lr_ * (s.m[i] / bc1) / (std::sqrt(s.v[i] / bc2) + eps_);
        }
    }
}

void GradAccum::add(const Bound& bound, const Tape& tape, double scale) {
    for (const auto& [mat, id] : bound.entries) {
        if (!tape.requires_grad(id)) continue;
        auto it = grads_.find(mat);
        if (it == grads_.end())
            it = grads_.emplace(mat, Mat(mat->rows(), mat->cols())).first;
        const Mat& g = tape.grad(id);
        for (std::size_t i = 0; i < g.size(); ++i) it->second.vec()[i] += scale * g.vec()[i];
    }
}

std::vector<std::pair<Mat*, const Mat*>> GradAccum::averaged() {
    std::vector<std::pair<Mat*, const Mat*>> out;
    out.reserve(grads_.size());
    for (auto& [mat, grad] : grads_) out.push_back({mat, &grad});
    return out;
}

void GradAccum::clear() { grads_.clear(); }

// -----------------------------------------------------------------------

void TrainConfig::validate_compressed() const {
    if (!itc && !itm && !ic)
        throw ValidationError("train: at least one of itc/itm/ic must be enabled");
}

namespace {

// contrastive loss between two stacks of pooled embeddings on one tape
int itc_loss(Tape& t, const std::vector<int>& pooled_a, const std::vector<int>& pooled_b) {
    std::vector<int> na, nb;
    for (int p : pooled_a) na.push_back(t.normalize_rows(p));
    for (int p : pooled_b) nb.push_back(t.normalize_rows(p));
    const int U = t.concat_rows(na);
    const int V = t.concat_rows(nb);
    const int S = t.scale(t.matmul(U, t.transpose_op(V)), 1.0 / kItcTemperature);
    std::vector<int> diag(pooled_a.size());
    for (std::size_t i = 0; i < diag.size(); ++i) diag[i] = static_cast<int>(i);
    const int l1 = t.nll_rows(t.log_softmax_rows(S), diag);
    const int l2 = t.nll_rows(t.log_softmax_rows(t.transpose_op(S)), diag);
    return t.scale(t.add(l1, l2), 0.5);
}

// negative example for matched/mismatched training: the next item whose
// instruction actually differs (rotating by one can pair identical questions)
int mismatch_index(const std::vector<const VQAItem*>& data, const std::vector<int>& idx, int b) {
    const int n = static_cast<int>(idx.size());
    for (int off = 1; off < n; ++off) {
        const int j = (b + off) % n;
        if (data[idx[j]]->instr_tokens != data[idx[b]]->instr_tokens) return j;
    }
    return (b + 1) % n;
}

struct CompressedTaskState {
    Mat w_txt;          // instruction pooled embedding -> d_out (ITC text side)
    Mat w_itm, b_itm;   // matched/mismatched classifier
    DownstreamHeadParams head;  // frozen; "different LLM" stand-in for IC
};

double compressed_stage_step(CompressedProjectorParams& proj, CompressedTaskState& aux,
                             const CachedFeatures& feats, const std::vector<int>& idx,
                             const std::vector<const VQAItem*>& data, const TrainConfig& cfg,
                             bool stage2, Adam& opt) {
    Tape t;
    Bound bound;
    const int B = static_cast<int>(idx.size());

    const int w_txt = bindp(t, aux.w_txt, !stage2 && cfg.itc, bound);
    const int w_itm = bindp(t, aux.w_itm, !stage2 && cfg.itm, bound);
    const int b_itm = bindp(t, aux.b_itm, !stage2 && cfg.itm, bound);

    std::vector<int> pooled_p, pooled_t, proj_out, instr_nodes;
    for (int b = 0; b < B; ++b) {
        const int v = t.leaf(feats.visual[idx[b]]);
        const int e = t.leaf(feats.instr[idx[b]]);
        const int p = compressed_forward(t, proj, v, e, true, &bound);
        proj_out.push_back(p);
        instr_nodes.push_back(e);
        pooled_p.push_back(t.mean_rows(p));
        pooled_t.push_back(t.matmul(t.mean_rows(e), w_txt));
    }

    int loss = -1;
    auto accumulate = [&](int term) { loss = loss < 0 ? term : t.add(loss, term); };

    if (!stage2 && cfg.itc) accumulate(itc_loss(t, pooled_p, pooled_t));

    if (!stage2 && cfg.itm) {
        std::vector<int> rows;
        std::vector<int> labels;
        for (int b = 0; b < B; ++b) {
            rows.push_back(t.add_rowvec(t.matmul(pooled_p[b], w_itm), b_itm));
            labels.push_back(1);
            // mismatched pair: same image, a different instruction
            const int e_neg = t.leaf(feats.instr[idx[mismatch_index(data, idx, b)]]);
            const int v = t.leaf(feats.visual[idx[b]]);
            const int p_neg = compressed_forward(t, proj, v, e_neg, true, &bound);
            rows.push_back(t.add_rowvec(t.matmul(t.mean_rows(p_neg), w_itm), b_itm));
            labels.push_back(0);
        }
        accumulate(t.nll_rows(t.log_softmax_rows(t.concat_rows(rows)), labels));
    }

    if (stage2 || cfg.ic) {
        std::vector<int> rows;
        std::vector<int> labels;
        for (int b = 0; b < B; ++b) {
            rows.push_back(head_forward(t, aux.head, proj_out[b], instr_nodes[b], false, nullptr));
            labels.push_back(data[idx[b]]->answer_id);
        }
        accumulate(t.nll_rows(t.log_softmax_rows(t.concat_rows(rows)), labels));
    }

    const double value = t.value(loss)(0, 0);
    t.backward(loss);
    GradAccum acc;
    acc.add(bound, t, 1.0);
    opt.step(acc.averaged());
    return value;
}

}  // namespace

CompressedProjectorParams train_compressed_surrogate(const std::vector<const VQAItem*>& data,
                                                     VisualEncoderParams& frozen_encoder,
                                                     const TrainConfig& cfg, int image_size,
                                                     std::vector<double>* loss_curve) {
    cfg.validate_compressed();
    Rng rng(seed_split(cfg.seed, "qformer-init"));
    CompressedProjectorParams proj = CompressedProjectorParams::init(
        kNumQueries, frozen_encoder.d_model, kDOut, kQformerBlocks, kHeads, kMlpHidden,
        true, rng);
    if (cfg.stage1_steps == 0 && cfg.stage2_steps == 0) return proj;
    if (data.empty()) throw ValidationError("train: empty dataset");

    CompressedTaskState aux;
    aux.w_txt = rng.normal_mat(frozen_encoder.d_model, kDOut, 0.1);
    aux.w_itm = rng.normal_mat(kDOut, 2, 0.1);
    aux.b_itm = Mat(1, 2);
    Rng head_rng(seed_split(cfg.seed, "surrogate-head-" + cfg.head_variant));
    aux.head = DownstreamHeadParams::init(cfg.head_variant, frozen_encoder.d_model, kHeads,
                                          kNumAnswers, head_rng);

    const CachedFeatures feats = cache_features(data, frozen_encoder, image_size);
    Adam opt(cfg.lr);
    Rng order_rng(seed_split(cfg.seed, "batch-order"));
    std::vector<int> order(data.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    order_rng.shuffle(order.begin(), order.end());
    std::size_t cursor = 0;

    for (int step = 0; step < cfg.stage1_steps + cfg.stage2_steps; ++step) {
        const bool stage2 = step >= cfg.stage1_steps;
        const auto idx = next_batch(order, cursor, cfg.batch, order_rng);
        const double loss =
            compressed_stage_step(proj, aux, feats, idx, data, cfg, stage2, opt);
        if (!std::isfinite(loss))
            throw TrainingError("surrogate training diverged at step " + std::to_string(step));
        if (loss_curve) loss_curve->push_back(loss);
    }
    return proj;
}

UncompressedProjectorParams train_uncompressed_surrogate(const std::vector<const VQAItem*>& data,
                                                         VisualEncoderParams& frozen_encoder,
                                                         const TrainConfig& cfg, int image_size,
                                                         int pool_factor,
                                                         std::vector<double>* loss_curve) {
    Rng rng(seed_split(cfg.seed, "mlp-init"));
    UncompressedProjectorParams proj = UncompressedProjectorParams::init(
        pool_factor, frozen_encoder.d_model, kMlpHidden, kDOut, rng);
    if (cfg.stage1_steps == 0 && cfg.stage2_steps == 0) return proj;
    if (data.empty()) throw ValidationError("train: empty dataset");

    Mat w_txt = rng.normal_mat(frozen_encoder.d_model, kDOut, 0.1);
    Rng head_rng(seed_split(cfg.seed, "surrogate-head-" + cfg.head_variant));
    DownstreamHeadParams head = DownstreamHeadParams::init(
        cfg.head_variant, frozen_encoder.d_model, kHeads, kNumAnswers, head_rng);

    const CachedFeatures feats = cache_features(data, frozen_encoder, image_size);
    Adam opt(cfg.lr);
    Rng order_rng(seed_split(cfg.seed, "batch-order"));
    std::vector<int> order(data.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    order_rng.shuffle(order.begin(), order.end());
    std::size_t cursor = 0;

    for (int step = 0; step < cfg.stage1_steps + cfg.stage2_steps; ++step) {
        const bool stage2 = step >= cfg.stage1_steps;
        const auto idx = next_batch(order, cursor, cfg.batch, order_rng);
        Tape t;
        Bound bound;
        int loss;
        if (!stage2) {
            // alignment: contrastive match of pooled projected tokens to text
            const int w_txt_n = bindp(t, w_txt, true, bound);
            std::vector<int> pooled_p, pooled_t;
            for (int i : idx) {
                const int p = uncompressed_forward(t, proj, t.leaf(feats.visual[i]), true, &bound);
                pooled_p.push_back(t.mean_rows(p));
                pooled_t.push_back(t.matmul(t.mean_rows(t.leaf(feats.instr[i])), w_txt_n));
            }
            loss = itc_loss(t, pooled_p, pooled_t);
        } else {
            std::vector<int> rows, labels;
            for (int i : idx) {
                const int p = uncompressed_forward(t, proj, t.leaf(feats.visual[i]), true, &bound);
                const int e = t.leaf(feats.instr[i]);
                rows.push_back(head_forward(t, head, p, e, false, nullptr));
                labels.push_back(data[i]->answer_id);
            }
            loss = t.nll_rows(t.log_softmax_rows(t.concat_rows(rows)), labels);
        }
        const double value = t.value(loss)(0, 0);
        if (!std::isfinite(value))
            throw TrainingError("surrogate training diverged at step " + std::to_string(step));
        if (loss_curve) loss_curve->push_back(value);
        t.backward(loss);
        GradAccum acc;
        acc.add(bound, t, 1.0);
        opt.step(acc.averaged());
    }
    return proj;
}

double train_target(ToyLVLM& model, const std::vector<const VQAItem*>& data, int steps,
                    double lr, int batch, std::uint64_t seed) {
    if (steps == 0) return 0.0;
    if (data.empty()) throw ValidationError("train: empty dataset");
    Adam opt(lr);
    Rng order_rng(seed_split(seed, "target-batch-order"));
    std::vector<int> order(data.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = static_cast<int>(i);
    order_rng.shuffle(order.begin(), order.end());
    std::size_t cursor = 0;

    double last = 0.0;
    for (int step = 0; step < steps; ++step) {
        const auto idx = next_batch(order, cursor, batch, order_rng);
        Tape t;
        Bound bound;
        std::vector<int> rows, labels;
        for (int i : idx) {
            const VQAItem* it = data[i];
            ImageBatch img = to_image_batch(*it, model.encoder.image_size);
            const int patches = t.leaf(patchify(img, 0, model.encoder.patch));
            const int v = encoder_forward(t, model.encoder, patches, true, &bound);
            const int e = instr_embed_forward(t, model.instr, it->instr_tokens, false, nullptr);
            const int p = projector_forward(t, model.projector, v, e, true, &bound);
            rows.push_back(head_forward(t, model.head, p, e, true, &bound));
            labels.push_back(it->answer_id);
        }
        const int loss = t.nll_rows(t.log_softmax_rows(t.concat_rows(rows)), labels);
        last = t.value(loss)(0, 0);
        if (!std::isfinite(last))
            throw TrainingError("target training diverged at step " + std::to_string(step));
        t.backward(loss);
        GradAccum acc;
        acc.add(bound, t, 1.0);
        opt.step(acc.averaged());
    }
    return last;
}

double itm_train_accuracy(CompressedProjectorParams& proj, Mat& w_itm, Mat& b_itm,
                          const std::vector<const VQAItem*>& data,
                          VisualEncoderParams& encoder, int image_size) {
    const CachedFeatures feats = cache_features(data, encoder, image_size);
    const int n = static_cast<int>(data.size());
    std::vector<int> idx(n);
    for (int i = 0; i < n; ++i) idx[i] = i;
    int correct = 0;
    for (int b = 0; b < n; ++b) {
        for (int neg = 0; neg < 2; ++neg) {
            Tape t;
            const int v = t.leaf(feats.visual[b]);
            const int e = t.leaf(feats.instr[neg ? mismatch_index(data, idx, b) : b]);
            const int p = compressed_forward(t, proj, v, e);
            const int logits =
                t.add_rowvec(t.matmul(t.mean_rows(p), t.leaf(w_itm)), t.leaf(b_itm));
            const Mat& row = t.value(logits);
            const int pred = row(0, 1) > row(0, 0) ? 1 : 0;
            if (pred == (neg ? 0 : 1)) ++correct;
        }
    }
    return static_cast<double>(correct) / (2 * n);
}

// -----------------------------------------------------------------------

Registry::Registry(std::string dir) : dir_(std::move(dir)) {
    fs::create_directories(dir_);
    load_index();
}

std::string Registry::index_path() const { return dir_ + "/registry.json"; }

void Registry::load_index() {
    std::ifstream is(index_path());
    if (is) {
        is >> index_;
    } else {
        index_ = json{{"schema_version", 1}, {"models", json::object()}};
    }
}

void Registry::save_index() const {
    const std::string tmp = index_path() + ".tmp";
    {
        std::ofstream os(tmp, std::ios::trunc);
        if (!os) throw ConfigError("registry: cannot write index at " + tmp);
        os << index_.dump(2) << "\n";
    }
    fs::rename(tmp, index_path());
}

void Registry::put_model(const std::string& id, ToyLVLM& model, json meta, bool overwrite) {
    if (!overwrite && has(id)) return;
    const std::string ckpt = id + ".ppck";
    meta["arch"] = arch_to_json(model);
    save_model(model, dir_ + "/" + ckpt, meta);
    json entry = meta;
    entry["checkpoint"] = ckpt;
    index_["models"][id] = entry;
    save_index();
    cache_.erase(id);
}

bool Registry::has(const std::string& id) const {
    return index_.at("models").contains(id);
}

ToyLVLM& Registry::model(const std::string& id) {
    auto it = cache_.find(id);
    if (it != cache_.end()) return it->second;
    if (!has(id)) throw LookupError("registry: no model with id '" + id + "'");
    const std::string ckpt = index_["models"][id]["checkpoint"];
    return cache_.emplace(id, load_model(dir_ + "/" + ckpt)).first->second;
}

json Registry::meta(const std::string& id) const {
    if (!has(id)) throw LookupError("registry: no model with id '" + id + "'");
    return index_["models"][id];
}

std::vector<std::string> Registry::ids() const {
    std::vector<std::string> out;
    for (auto& [k, v] : index_.at("models").items()) out.push_back(k);
    return out;
}

ProjectorParams& Registry::attack_projector(const std::string& id) {
    ToyLVLM& m = model(id);
    ++audit_[id];
    return m.projector;
}

long Registry::projector_reads(const std::string& id) const {
    auto it = audit_.find(id);
    return it == audit_.end() ? 0 : it->second;
}

void Registry::reset_audit() { audit_.clear(); }

// -----------------------------------------------------------------------

ScenarioKind scenario_kind_from_string(const std::string& s) {
    if (s == "white_box") return ScenarioKind::white_box;
    if (s == "transfer") return ScenarioKind::transfer;
    if (s == "scratch") return ScenarioKind::scratch;
    throw ValidationError("unknown scenario kind: " + s);
}

std::string scenario_kind_name(ScenarioKind k) {
    switch (k) {
        case ScenarioKind::white_box: return "white_box";
        case ScenarioKind::transfer: return "transfer";
        case ScenarioKind::scratch: return "scratch";
    }
    return "?";
}

SurrogateBundle resolve_scenario(const ScenarioSpec& spec, Registry& registry,
                                 const std::vector<const VQAItem*>& train_data,
                                 int image_size) {
    ToyLVLM& target = registry.model(spec.target_id);
    auto encoder = std::make_shared<VisualEncoderParams>(target.encoder);  // VE is public

    std::vector<std::shared_ptr<ProjectorParams>> projectors;
    std::vector<std::string> provenance;

    switch (spec.kind) {
        case ScenarioKind::white_box: {
            projectors.push_back(
                std::make_shared<ProjectorParams>(registry.attack_projector(spec.target_id)));
            provenance.push_back("white_box:" + spec.target_id);
            break;
        }
        case ScenarioKind::transfer: {
            if (spec.surrogate_ids.empty())
                throw ValidationError("transfer scenario: no surrogate model ids given");
            for (const auto& sib : spec.surrogate_ids) {
                if (sib == spec.target_id)
                    throw ValidationError(
                        "transfer scenario: surrogate must differ from the target");
                projectors.push_back(
                    std::make_shared<ProjectorParams>(registry.model(sib).projector));
                provenance.push_back("transfer:" + sib);
            }
            break;
        }
        case ScenarioKind::scratch: {
            const json target_meta = registry.meta(spec.target_id);
            const std::string target_variant = target_meta["arch"]["head"]["variant"];
            if (spec.train.head_variant == target_variant)
                throw ValidationError(
                    "scratch scenario: surrogate head variant must differ from the target's");
            const json proj_arch = target_meta["arch"]["projector"];
            const std::string kind = proj_arch["kind"];
            for (int j = 0; j < std::max(1, spec.k); ++j) {
                TrainConfig cfg = spec.train;
                cfg.seed = seed_split(spec.train.seed, "scratch-surrogate-" + std::to_string(j));
                if (kind == "compressed") {
                    projectors.push_back(std::make_shared<ProjectorParams>(
                        train_compressed_surrogate(train_data, *encoder, cfg, image_size)));
                } else {
                    projectors.push_back(std::make_shared<ProjectorParams>(
                        train_uncompressed_surrogate(train_data, *encoder, cfg, image_size,
                                                     proj_arch["pool_factor"])));
                }
                provenance.push_back("scratch:seed=" + std::to_string(cfg.seed));
            }
            break;
        }
    }
    return build_bundle(std::move(encoder), std::move(projectors), std::move(provenance));
}

}  // namespace projprobe
