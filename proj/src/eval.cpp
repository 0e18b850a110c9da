#include "projprobe/eval.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <fstream>
#include <mutex>
#include <sstream>
#include <thread>

namespace projprobe {

using nlohmann::json;

void ExperimentSpec::validate() const {
    if (loss != "ve" && loss != "vlp" && loss != "tcp")
        throw ValidationError("experiment: loss must be one of ve/vlp/tcp, got '" + loss + "'");
    if (attack_seeds.empty()) throw ValidationError("experiment: at least one attack seed");
    if (attack_items < 0) throw ValidationError("experiment: attack_items must be >= 0");
    if (dataset.n < 2) throw ValidationError("experiment: dataset too small");
    if (dataset.train_frac <= 0.0 || dataset.train_frac >= 1.0)
        throw ValidationError("experiment: train_frac must be in (0,1)");
    if (pool_override && *pool_override < 1)
        throw ValidationError("experiment: pool factor override must be >= 1");
    attack.validate();
}

json RunRecord::to_json() const {
    return json{{"schema_version", schema_version},
                {"record", "attack_run"},
                {"experiment", experiment},
                {"scenario", scenario},
                {"target_id", target_id},
                {"loss", loss},
                {"beta", beta},
                {"k", k},
                {"method", method},
                {"attack_seed", attack_seed},
                {"epsilon", epsilon},
                {"step_size", step_size},
                {"iterations", iterations},
                {"items", items},
                {"clean_accuracy", clean_accuracy},
                {"adv_accuracy", adv_accuracy},
                {"mean_linf", mean_linf},
                {"mean_l2", mean_l2},
                {"pool_factor", pool_factor},
                {"tasks", tasks},
                {"axis", axis},
                {"axis_value", axis_value}};
}

RunRecord RunRecord::from_json(const json& j) {
    if (j.value("record", "") != "attack_run")
        throw ValidationError("record: not an attack_run record");
    RunRecord r;
    r.schema_version = j.at("schema_version");
    r.experiment = j.at("experiment");
    r.scenario = j.at("scenario");
    r.target_id = j.at("target_id");
    r.loss = j.at("loss");
    r.beta = j.at("beta");
    r.k = j.at("k");
    r.method = j.at("method");
    r.attack_seed = j.at("attack_seed");
    r.epsilon = j.at("epsilon");
    r.step_size = j.at("step_size");
    r.iterations = j.at("iterations");
    r.items = j.at("items");
    r.clean_accuracy = j.at("clean_accuracy");
    r.adv_accuracy = j.at("adv_accuracy");
    r.mean_linf = j.at("mean_linf");
    r.mean_l2 = j.at("mean_l2");
    r.pool_factor = j.at("pool_factor");
    r.tasks = j.at("tasks");
    r.axis = j.at("axis");
    r.axis_value = j.at("axis_value");
    return r;
}

void append_records_jsonl(const std::string& path, const std::vector<RunRecord>& records) {
    std::ofstream os(path, std::ios::app);
    if (!os) throw ConfigError("cannot open records file for writing: " + path);
    for (const auto& r : records) os << r.to_json().dump() << "\n";
}

std::vector<RunRecord> read_records_jsonl(const std::string& path,
                                          std::vector<std::string>* warnings) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open records file: " + path);
    std::vector<RunRecord> out;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty()) continue;
        try {
            out.push_back(RunRecord::from_json(json::parse(line)));
        } catch (const std::exception& e) {
            if (warnings)
                warnings->push_back(path + ":" + std::to_string(lineno) +
                                    ": skipping malformed record (" + e.what() + ")");
        }
    }
    return out;
}

// -----------------------------------------------------------------------

int predict_answer(ToyLVLM& model, const ImageBatch& image, const std::vector<int>& instr_tokens) {
    const std::vector<Mat> logits = forward_full(model, image, {instr_tokens});
    const Mat& row = logits[0];
    int best = 0;
    for (int j = 1; j < row.cols(); ++j)
        if (row(0, j) > row(0, best)) best = j;
    return best;
}

double evaluate_clean(ToyLVLM& model, const std::vector<const VQAItem*>& items, int image_size) {
    if (items.empty()) throw ValidationError("evaluate: empty item list");
    int correct = 0;
    for (const VQAItem* it : items)
        if (predict_answer(model, to_image_batch(*it, image_size), it->instr_tokens) ==
            it->answer_id)
            ++correct;
    return static_cast<double>(correct) / items.size();
}

namespace {

InstructionEmbedding embed_one(const VQAItem& item) {
    return embed_instruction(shared_instr_embedder(), {item.instr_tokens}, {item.question_id});
}

LossFn make_attack_loss(const ExperimentSpec& spec, const SurrogateBundle& bundle,
                        const ImageBatch& x, const InstructionEmbedding& instr) {
    if (spec.loss == "ve") return make_ve_loss(*bundle.encoder, x);
    if (spec.loss == "vlp")
        return make_vlp_loss(*bundle.encoder, *bundle.projectors.at(0), x, instr);
    return make_tcp_loss(bundle, x, instr, spec.tcp);
}

struct ItemOutcome {
    bool correct = false;
    double linf = 0.0;
    double l2 = 0.0;
};

std::string tasks_string(const TrainConfig& t) {
    std::string s;
    auto add = [&](bool on, const char* name) {
        if (!on) return;
        if (!s.empty()) s += "+";
        s += name;
    };
    add(t.itc, "itc");
    add(t.itm, "itm");
    add(t.ic, "ic");
    return s;
}

}  // namespace

std::vector<RunRecord> run_attack_experiment(const ExperimentSpec& spec, Registry& registry,
                                             const SyntheticVQADataset& data, int jobs) {
    spec.validate();
    jobs = std::max(1, jobs);

    ToyLVLM eval_model = registry.model(spec.scenario.target_id);  // private copy
    if (spec.pool_override) {
        auto* u = std::get_if<UncompressedProjectorParams>(&eval_model.projector);
        if (!u)
            throw ValidationError(
                "experiment: pool factor override only applies to uncompressed targets");
        const int side = eval_model.encoder.grid_side();
        if (side % *spec.pool_override != 0)
            throw ValidationError("experiment: pool factor must divide the token grid side");
        u->pool_factor = *spec.pool_override;
    }

    const auto train_items = data.train_split(spec.dataset.train_frac);
    auto eval_items = data.eval_split(spec.dataset.train_frac);
    if (eval_items.empty()) throw ValidationError("experiment: empty held-out split");
    if (spec.attack_items > 0 && spec.attack_items < static_cast<int>(eval_items.size()))
        eval_items.resize(spec.attack_items);

    const SurrogateBundle bundle =
        resolve_scenario(spec.scenario, registry, train_items, data.image_size);
    const double clean_acc = evaluate_clean(eval_model, eval_items, data.image_size);

    std::vector<RunRecord> records;
    for (std::uint64_t seed : spec.attack_seeds) {
        std::vector<ItemOutcome> outcomes(eval_items.size());
        std::atomic<std::size_t> next{0};
        std::exception_ptr failure;
        std::mutex failure_mu;

        auto worker = [&] {
            try {
                for (std::size_t i = next.fetch_add(1); i < eval_items.size();
                     i = next.fetch_add(1)) {
                    const VQAItem& item = *eval_items[i];
                    const ImageBatch x = to_image_batch(item, data.image_size);
                    const InstructionEmbedding instr = embed_one(item);
                    AttackConfig cfg = spec.attack;
                    cfg.seed = seed_split(seed, "item-" + std::to_string(item.question_id));
                    const AdversarialResult res =
                        run_attack(make_attack_loss(spec, bundle, x, instr), x, cfg);
                    ItemOutcome& o = outcomes[i];
                    o.linf = res.linf;
                    o.l2 = res.l2;
                    o.correct = predict_answer(eval_model, res.x_adv, item.instr_tokens) ==
                                item.answer_id;
                }
            } catch (...) {
                std::lock_guard<std::mutex> lk(failure_mu);
                if (!failure) failure = std::current_exception();
            }
        };
        if (jobs == 1) {
            worker();
        } else {
            std::vector<std::thread> pool;
            for (int j = 0; j < jobs; ++j) pool.emplace_back(worker);
            for (auto& th : pool) th.join();
        }
        if (failure) std::rethrow_exception(failure);

        RunRecord r;
        r.experiment = spec.name;
        r.scenario = scenario_kind_name(spec.scenario.kind);
        r.target_id = spec.scenario.target_id;
        r.loss = spec.loss;
        r.beta = spec.loss == "tcp" ? spec.tcp.beta : (spec.loss == "ve" ? 1.0 : 0.0);
        r.k = spec.loss == "tcp" ? spec.tcp.k : 1;
        r.method = attack_method_name(spec.attack.method);
        r.attack_seed = seed;
        r.epsilon = spec.attack.epsilon;
        r.step_size = spec.attack.step_size;
        r.iterations = spec.attack.iterations;
        r.items = static_cast<int>(eval_items.size());
        r.clean_accuracy = clean_acc;
        double n_correct = 0.0;
        for (const auto& o : outcomes) {
            n_correct += o.correct ? 1.0 : 0.0;
            r.mean_linf += o.linf / outcomes.size();
            r.mean_l2 += o.l2 / outcomes.size();
        }
        r.adv_accuracy = n_correct / outcomes.size();
        r.pool_factor = spec.pool_override ? *spec.pool_override : -1;
        if (spec.scenario.kind == ScenarioKind::scratch)
            r.tasks = tasks_string(spec.scenario.train);
        records.push_back(std::move(r));
    }
    return records;
}

// -----------------------------------------------------------------------

AggregateStats aggregate_runs(const std::vector<double>& values, double sigma_tol) {
    if (values.empty()) throw ValidationError("aggregate: no values");
    AggregateStats s;
    s.n = static_cast<int>(values.size());
    for (double v : values) s.mu += v;
    s.mu /= s.n;
    for (double v : values) s.variance += (v - s.mu) * (v - s.mu);
    s.variance /= s.n;  // population variance over the seed set
    s.sigma = std::sqrt(s.variance);
    s.high_variance = s.sigma > sigma_tol;
    return s;
}

Verdict security_verdict(double mu_acc_under_ve_attack, double mu_acc_under_vlp_attack,
                         double tol) {
    if (tol < 0.0) throw ValidationError("verdict: tolerance must be >= 0");
    Verdict v;
    v.delta = mu_acc_under_ve_attack - mu_acc_under_vlp_attack;
    if (v.delta > tol)
        v.label = "vlp_weaker";
    else if (v.delta < -tol)
        v.label = "vlp_stronger";
    else
        v.label = "comparable";
    return v;
}

// -----------------------------------------------------------------------

std::vector<RunRecord> run_sweep(const SweepSpec& spec, Registry& registry,
                                 const SyntheticVQADataset& data, int jobs) {
    if (spec.values.empty()) throw ValidationError("sweep: no axis values");
    std::vector<RunRecord> all;
    for (const json& value : spec.values) {
        ExperimentSpec point = spec.base;
        std::string value_str;
        if (spec.axis == "beta") {
            point.loss = "tcp";
            point.tcp.beta = value.get<double>();
            value_str = json(point.tcp.beta).dump();
        } else if (spec.axis == "k") {
            point.loss = "tcp";
            point.tcp.k = value.get<int>();
            point.scenario.k = point.tcp.k;
            value_str = std::to_string(point.tcp.k);
        } else if (spec.axis == "pool_factor") {
            point.pool_override = value.get<int>();
            value_str = std::to_string(*point.pool_override);
        } else if (spec.axis == "tasks") {
            // accepts {"itc":true,...} or the compact "itc+itm" string form
            point.scenario.train.itc = point.scenario.train.itm = point.scenario.train.ic =
                false;
            if (value.is_object()) {
                point.scenario.train.itc = value.value("itc", false);
                point.scenario.train.itm = value.value("itm", false);
                point.scenario.train.ic = value.value("ic", false);
            } else if (value.is_string()) {
                std::istringstream parts(value.get<std::string>());
                std::string tok;
                while (std::getline(parts, tok, '+')) {
                    if (tok == "itc")
                        point.scenario.train.itc = true;
                    else if (tok == "itm")
                        point.scenario.train.itm = true;
                    else if (tok == "ic")
                        point.scenario.train.ic = true;
                    else
                        throw ValidationError("sweep: unknown task '" + tok + "'");
                }
            } else {
                throw ValidationError(
                    "sweep: tasks axis values must be objects or strings");
            }
            value_str = tasks_string(point.scenario.train);
        } else {
            throw ValidationError("sweep: unknown axis '" + spec.axis + "'");
        }
        point.name = spec.base.name + "/" + spec.axis + "=" + value_str;
        std::vector<RunRecord> recs = run_attack_experiment(point, registry, data, jobs);
        for (auto& r : recs) {
            r.axis = spec.axis;
            r.axis_value = value_str;
        }
        all.insert(all.end(), recs.begin(), recs.end());
    }
    return all;
}

}  // namespace projprobe
