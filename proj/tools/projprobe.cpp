// projprobe: trains toy vision-language targets, runs perturbation-budgeted
// attacks against them under white-box / transfer / scratch threat scenarios,
// sweeps attack-objective hyperparameters and renders summary tables/plots.
//
// Exit codes: 0 success, 2 configuration/usage error, 3 numerical/training error.

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "projprobe/checkpoint.hpp"
#include "projprobe/eval.hpp"
#include "projprobe/kernels.hpp"
#include "projprobe/report.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace projprobe;

namespace {

// ---------------------------------------------------------------- config IO

json load_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot open config file: " + path);
    try {
        return json::parse(is);
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config parse error: ") + e.what());
    }
}

void reject_unknown(const json& j, const std::string& where,
                    std::initializer_list<const char*> allowed) {
    if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
    for (const auto& [key, value] : j.items()) {
        bool ok = false;
        for (const char* a : allowed)
            if (key == a) { ok = true; break; }
        if (!ok) throw ConfigError("unknown key '" + key + "' in " + where);
    }
}

template <typename T>
T get_or(const json& j, const char* key, T fallback) {
    return j.contains(key) ? j.at(key).get<T>() : fallback;
}

DatasetSpec parse_dataset(const json& j) {
    reject_unknown(j, "dataset", {"seed", "n", "image_size", "train_frac"});
    DatasetSpec d;
    d.seed = get_or<std::uint64_t>(j, "seed", d.seed);
    d.n = get_or<int>(j, "n", d.n);
    d.image_size = get_or<int>(j, "image_size", d.image_size);
    d.train_frac = get_or<double>(j, "train_frac", d.train_frac);
    return d;
}

TrainConfig parse_train(const json& j) {
    reject_unknown(j, "train", {"itc", "itm", "ic", "stage1_steps", "stage2_steps", "lr",
                                "batch", "seed", "head_variant"});
    TrainConfig t;
    t.itc = get_or<bool>(j, "itc", t.itc);
    t.itm = get_or<bool>(j, "itm", t.itm);
    t.ic = get_or<bool>(j, "ic", t.ic);
    t.stage1_steps = get_or<int>(j, "stage1_steps", t.stage1_steps);
    t.stage2_steps = get_or<int>(j, "stage2_steps", t.stage2_steps);
    t.lr = get_or<double>(j, "lr", t.lr);
    t.batch = get_or<int>(j, "batch", t.batch);
    t.seed = get_or<std::uint64_t>(j, "seed", t.seed);
    t.head_variant = get_or<std::string>(j, "head_variant", t.head_variant);
    return t;
}

AttackConfig parse_attack(const json& j) {
    reject_unknown(j, "attack", {"method", "epsilon", "step_size", "iterations", "momentum",
                                 "cw_constant", "cw_confidence", "random_init"});
    AttackConfig a;
    a.method = attack_method_from_string(get_or<std::string>(j, "method", "pgd"));
    a.epsilon = get_or<double>(j, "epsilon", a.epsilon);
    a.step_size = get_or<double>(j, "step_size", a.step_size);
    a.iterations = get_or<int>(j, "iterations", a.iterations);
    a.momentum = get_or<double>(j, "momentum", a.momentum);
    a.cw_constant = get_or<double>(j, "cw_constant", a.cw_constant);
    a.cw_confidence = get_or<double>(j, "cw_confidence", a.cw_confidence);
    a.random_init = get_or<bool>(j, "random_init", a.random_init);
    a.validate();
    return a;
}

ScenarioSpec parse_scenario(const json& j) {
    reject_unknown(j, "scenario", {"kind", "target_id", "surrogate_ids", "k", "train"});
    ScenarioSpec s;
    s.kind = scenario_kind_from_string(get_or<std::string>(j, "kind", "white_box"));
    if (!j.contains("target_id")) throw ConfigError("scenario: missing 'target_id'");
    s.target_id = j.at("target_id").get<std::string>();
    s.surrogate_ids = get_or<std::vector<std::string>>(j, "surrogate_ids", {});
    s.k = get_or<int>(j, "k", 1);
    if (j.contains("train")) s.train = parse_train(j.at("train"));
    return s;
}

ExperimentSpec parse_experiment(const json& j, const std::string& name, const DatasetSpec& ds) {
    reject_unknown(j, "experiment", {"scenario", "loss", "tcp", "attack", "attack_seeds",
                                     "attack_items", "pool_override"});
    ExperimentSpec e;
    e.name = name;
    e.dataset = ds;
    if (!j.contains("scenario")) throw ConfigError("experiment: missing 'scenario'");
    e.scenario = parse_scenario(j.at("scenario"));
    e.loss = get_or<std::string>(j, "loss", e.loss);
    if (j.contains("tcp")) {
        reject_unknown(j.at("tcp"), "tcp", {"beta", "k"});
        e.tcp.beta = get_or<double>(j.at("tcp"), "beta", e.tcp.beta);
        e.tcp.k = get_or<int>(j.at("tcp"), "k", e.tcp.k);
    }
    if (j.contains("attack")) e.attack = parse_attack(j.at("attack"));
    e.attack_seeds = get_or<std::vector<std::uint64_t>>(j, "attack_seeds", e.attack_seeds);
    e.attack_items = get_or<int>(j, "attack_items", e.attack_items);
    if (j.contains("pool_override")) e.pool_override = j.at("pool_override").get<int>();
    e.validate();
    return e;
}

// ---------------------------------------------------------------- run layout

struct RunDirs {
    fs::path root, tables, plots, checkpoints;
    fs::path records() const { return root / "records.jsonl"; }
};

RunDirs make_run_dirs(const std::string& out_root, const std::string& name, bool create) {
    RunDirs d;
    d.root = fs::path(out_root) / name;
    d.tables = d.root / "tables";
    d.plots = d.root / "plots";
    d.checkpoints = d.root / "checkpoints";
    if (create) {
        fs::create_directories(d.tables);
        fs::create_directories(d.plots);
        fs::create_directories(d.checkpoints);
    }
    return d;
}

std::string config_name(const json& cfg) {
    if (!cfg.contains("name")) throw ConfigError("config: missing 'name'");
    return cfg.at("name").get<std::string>();
}

void check_mode(const json& cfg, const std::string& verb) {
    const std::string mode = get_or<std::string>(cfg, "mode", verb);
    if (mode != verb)
        throw ConfigError("config declares mode '" + mode + "' but verb is '" + verb + "'");
}

// ---------------------------------------------------------------- verbs

struct CommonArgs {
    std::string config;
    std::string out;
    int jobs = 1;
    std::optional<std::uint64_t> seed;
    bool dry_run = false;
};

int cmd_train(const CommonArgs& args) {
    json cfg = load_config(args.config);
    check_mode(cfg, "train");
    reject_unknown(cfg, "config", {"mode", "name", "dataset", "models"});
    const std::string name = config_name(cfg);
    DatasetSpec ds = parse_dataset(cfg.value("dataset", json::object()));
    if (args.seed) ds.seed = *args.seed;
    if (!cfg.contains("models") || !cfg.at("models").is_array() || cfg.at("models").empty())
        throw ConfigError("train config: 'models' must be a non-empty array");

    struct Plan {
        ModelSpec model;
        std::string id;
        int steps;
        double lr;
        int batch;
    };
    std::vector<Plan> plans;
    for (const json& m : cfg.at("models")) {
        reject_unknown(m, "models[]", {"id", "projector", "head_variant", "pool_factor",
                                       "steps", "lr", "batch", "seed"});
        Plan p;
        if (!m.contains("id")) throw ConfigError("models[]: missing 'id'");
        p.id = m.at("id").get<std::string>();
        p.model.projector = get_or<std::string>(m, "projector", "compressed");
        p.model.head_variant = get_or<std::string>(m, "head_variant", "A");
        p.model.pool_factor = get_or<int>(m, "pool_factor", 2);
        p.model.image_size = ds.image_size;
        p.model.seed = args.seed ? seed_split(*args.seed, p.id)
                                 : get_or<std::uint64_t>(m, "seed", 0);
        p.steps = get_or<int>(m, "steps", 1200);
        p.lr = get_or<double>(m, "lr", 1e-3);
        p.batch = get_or<int>(m, "batch", 8);
        plans.push_back(std::move(p));
    }

    if (args.dry_run) {
        std::cout << "dry-run: would train " << plans.size() << " model(s) on " << ds.n
                  << " items (seed " << ds.seed << ") into "
                  << make_run_dirs(args.out, name, false).checkpoints.string() << "\n";
        return 0;
    }

    const RunDirs dirs = make_run_dirs(args.out, name, true);
    const SyntheticVQADataset data = make_synthetic_vqa(ds.seed, ds.n, ds.image_size);
    const auto train_items = data.train_split(ds.train_frac);
    const auto eval_items = data.eval_split(ds.train_frac);
    Registry registry(dirs.checkpoints.string());

    std::ofstream log(dirs.records(), std::ios::app);
    for (const Plan& p : plans) {
        ToyLVLM model = make_toy_model(p.model);
        const double final_loss =
            train_target(model, train_items, p.steps, p.lr, p.batch, p.model.seed);
        const double acc = evaluate_clean(model, eval_items, ds.image_size);
        registry.put_model(p.id, model,
                           json{{"projector", p.model.projector},
                                {"head_variant", p.model.head_variant},
                                {"seed", p.model.seed},
                                {"steps", p.steps}});
        log << json{{"schema_version", 1}, {"record", "train_run"},   {"id", p.id},
                    {"final_loss", final_loss}, {"clean_accuracy", acc}, {"steps", p.steps}}
                   .dump()
            << "\n";
        std::cout << "trained " << p.id << ": final loss " << final_loss
                  << ", held-out accuracy " << acc << "\n";
    }
    return 0;
}

std::string resolve_registry_dir(const json& cfg, const RunDirs& dirs) {
    const std::string reg = get_or<std::string>(cfg, "registry", "");
    return reg.empty() ? dirs.checkpoints.string() : reg;
}

int cmd_attack(const CommonArgs& args) {
    json cfg = load_config(args.config);
    check_mode(cfg, "attack");
    reject_unknown(cfg, "config", {"mode", "name", "dataset", "registry", "experiment"});
    const std::string name = config_name(cfg);
    DatasetSpec ds = parse_dataset(cfg.value("dataset", json::object()));
    if (args.seed) ds.seed = *args.seed;
    if (!cfg.contains("experiment")) throw ConfigError("attack config: missing 'experiment'");
    ExperimentSpec spec = parse_experiment(cfg.at("experiment"), name, ds);
    if (args.seed) spec.scenario.train.seed = seed_split(*args.seed, "scenario-train");

    const RunDirs dirs = make_run_dirs(args.out, name, !args.dry_run);
    if (args.dry_run) {
        std::cout << "dry-run: would run " << attack_method_name(spec.attack.method)
                  << " under scenario " << scenario_kind_name(spec.scenario.kind) << " with "
                  << spec.attack_seeds.size() << " seed(s) against target '"
                  << spec.scenario.target_id << "', appending to " << dirs.records().string()
                  << "\n";
        return 0;
    }
    Registry registry(resolve_registry_dir(cfg, dirs));
    const SyntheticVQADataset data = make_synthetic_vqa(ds.seed, ds.n, ds.image_size);
    const std::vector<RunRecord> recs = run_attack_experiment(spec, registry, data, args.jobs);
    append_records_jsonl(dirs.records().string(), recs);
    std::vector<double> adv;
    for (const auto& r : recs) adv.push_back(r.adv_accuracy);
    const AggregateStats agg = aggregate_runs(adv);
    std::cout << "attack " << name << ": clean accuracy " << recs.front().clean_accuracy
              << ", adversarial accuracy " << agg.mu << " +/- " << agg.sigma << " over "
              << agg.n << " seed(s)\n";
    return 0;
}

int cmd_sweep(const CommonArgs& args) {
    json cfg = load_config(args.config);
    check_mode(cfg, "sweep");
    reject_unknown(cfg, "config",
                   {"mode", "name", "dataset", "registry", "experiment", "axis", "values"});
    const std::string name = config_name(cfg);
    DatasetSpec ds = parse_dataset(cfg.value("dataset", json::object()));
    if (args.seed) ds.seed = *args.seed;
    if (!cfg.contains("experiment")) throw ConfigError("sweep config: missing 'experiment'");
    SweepSpec sweep;
    sweep.base = parse_experiment(cfg.at("experiment"), name, ds);
    if (args.seed) sweep.base.scenario.train.seed = seed_split(*args.seed, "scenario-train");
    if (!cfg.contains("axis")) throw ConfigError("sweep config: missing 'axis'");
    sweep.axis = cfg.at("axis").get<std::string>();
    if (!cfg.contains("values") || !cfg.at("values").is_array() || cfg.at("values").empty())
        throw ConfigError("sweep config: 'values' must be a non-empty array");
    for (const json& v : cfg.at("values")) sweep.values.push_back(v);

    const RunDirs dirs = make_run_dirs(args.out, name, !args.dry_run);
    if (args.dry_run) {
        std::cout << "dry-run: would sweep axis '" << sweep.axis << "' over "
                  << sweep.values.size() << " value(s), " << sweep.base.attack_seeds.size()
                  << " seed(s) each, appending to " << dirs.records().string() << "\n";
        return 0;
    }
    Registry registry(resolve_registry_dir(cfg, dirs));
    const SyntheticVQADataset data = make_synthetic_vqa(ds.seed, ds.n, ds.image_size);
    const std::vector<RunRecord> recs = run_sweep(sweep, registry, data, args.jobs);
    append_records_jsonl(dirs.records().string(), recs);
    std::cout << "sweep " << name << ": wrote " << recs.size() << " record(s) across "
              << sweep.values.size() << " axis value(s)\n";
    return 0;
}

int cmd_report(const CommonArgs& args) {
    json cfg = load_config(args.config);
    check_mode(cfg, "report");
    reject_unknown(cfg, "config", {"mode", "name", "records", "sigma_tol", "verdict_tol"});
    const std::string name = config_name(cfg);
    const double sigma_tol = get_or<double>(cfg, "sigma_tol", 0.25);
    const double verdict_tol = get_or<double>(cfg, "verdict_tol", 0.01);

    const RunDirs dirs = make_run_dirs(args.out, name, !args.dry_run);
    std::vector<std::string> paths =
        get_or<std::vector<std::string>>(cfg, "records", {dirs.records().string()});
    if (args.dry_run) {
        std::cout << "dry-run: would summarize " << paths.size() << " record file(s) into "
                  << dirs.tables.string() << " and " << dirs.plots.string() << "\n";
        return 0;
    }

    std::vector<RunRecord> records;
    std::vector<std::string> warnings;
    for (const std::string& p : paths) {
        const auto part = read_records_jsonl(p, &warnings);
        records.insert(records.end(), part.begin(), part.end());
    }
    for (const std::string& w : warnings) std::cerr << "warning: " << w << "\n";
    if (records.empty()) throw ValidationError("report: no usable records found");

    const std::vector<SummaryRow> rows = summarize_records(records, sigma_tol);
    const std::string csv = (dirs.tables / "summary.csv").string();
    write_summary_csv(csv, rows);
    const std::vector<std::string> plots = write_plots(dirs.plots.string(), rows);

    // encoder-level vs projector-level verdict per scenario, single runs only
    json verdicts = json::object();
    std::map<std::string, std::pair<std::optional<double>, std::optional<double>>> per_scenario;
    for (const SummaryRow& r : rows) {
        if (r.axis != "-") continue;
        if (r.loss == "ve") per_scenario[r.scenario].first = r.adv_mu;
        if (r.loss == "vlp") per_scenario[r.scenario].second = r.adv_mu;
    }
    for (const auto& [scenario, pair] : per_scenario) {
        if (!pair.first || !pair.second) continue;
        const Verdict v = security_verdict(*pair.first, *pair.second, verdict_tol);
        verdicts[scenario] = {{"delta", v.delta}, {"label", v.label},
                              {"acc_under_ve_attack", *pair.first},
                              {"acc_under_vlp_attack", *pair.second}};
        std::cout << "verdict[" << scenario << "]: " << v.label << " (delta " << v.delta
                  << ")\n";
    }
    std::ofstream((dirs.tables / "verdicts.json").string()) << verdicts.dump(2) << "\n";
    std::cout << "report " << name << ": " << rows.size() << " row(s) -> " << csv << ", "
              << plots.size() << " plot(s)\n";
    return 0;
}

int cmd_verify(const CommonArgs& args) {
    if (!args.config.empty()) {
        json cfg = load_config(args.config);
        const std::string mode = get_or<std::string>(cfg, "mode", "");
        if (mode == "train") {
            CommonArgs probe = args;
            probe.dry_run = true;
            cmd_train(probe);
        } else if (mode == "attack") {
            CommonArgs probe = args;
            probe.dry_run = true;
            cmd_attack(probe);
        } else if (mode == "sweep") {
            CommonArgs probe = args;
            probe.dry_run = true;
            cmd_sweep(probe);
        } else if (mode == "report") {
            CommonArgs probe = args;
            probe.dry_run = true;
            cmd_report(probe);
        } else {
            throw ConfigError("verify: config must declare mode train/attack/sweep/report");
        }
        std::cout << "config ok: " << args.config << "\n";
        return 0;
    }
    // self-check: kernel table parity and a finite-difference gradient probe
    using namespace projprobe::kernels;
    std::cout << "active kernel table: " << isa_name(active_isa()) << "\n";
    Rng rng(0xC0FFEE);
    std::vector<double> x(257), y(257);
    for (auto& v : x) v = rng.normal(0.0, 1.0);
    for (auto& v : y) v = rng.normal(0.0, 1.0);
    const double d_ref = scalar_ops().dot(x.data(), y.data(), x.size());
    const double d_act = active().dot(x.data(), y.data(), x.size());
    if (std::abs(d_ref - d_act) > 1e-9 * (1.0 + std::abs(d_ref)))
        throw NumericalError("kernel self-check failed: dot mismatch");
    ModelSpec ms;
    ToyLVLM model = make_toy_model(ms);
    const SyntheticVQADataset probe = make_synthetic_vqa(1, 4);
    const double acc = evaluate_clean(model, probe.train_split(1.0 - 1e-9), probe.image_size);
    if (!(acc >= 0.0 && acc <= 1.0)) throw NumericalError("self-check: bad accuracy");
    std::cout << "self-check ok\n";
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"adversarial probes for toy vision-language projector stacks"};
    app.require_subcommand(1);

    CommonArgs args;
    const char* env_out = std::getenv("PROJPROBE_OUT");
    args.out = env_out ? env_out : "out";

    auto add_common = [&](CLI::App* sub, bool config_required) {
        auto* opt = sub->add_option("--config", args.config, "JSON config file");
        if (config_required) opt->required();
        sub->add_option("--out", args.out, "output root (env PROJPROBE_OUT)");
        sub->add_option("--jobs", args.jobs, "worker threads for attacks")
            ->check(CLI::PositiveNumber);
        sub->add_option("--seed", args.seed, "override the root seed");
        sub->add_flag("--dry-run", args.dry_run, "validate and print the plan only");
    };

    CLI::App* train = app.add_subcommand("train", "train target models into a registry");
    CLI::App* attack = app.add_subcommand("attack", "run one attack experiment");
    CLI::App* sweep = app.add_subcommand("sweep", "sweep an attack hyperparameter axis");
    CLI::App* report = app.add_subcommand("report", "summarize records into tables and plots");
    CLI::App* verify = app.add_subcommand("verify", "validate a config or run self-checks");
    add_common(train, true);
    add_common(attack, true);
    add_common(sweep, true);
    add_common(report, true);
    add_common(verify, false);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        if (train->parsed()) return cmd_train(args);
        if (attack->parsed()) return cmd_attack(args);
        if (sweep->parsed()) return cmd_sweep(args);
        if (report->parsed()) return cmd_report(args);
        return cmd_verify(args);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const ValidationError& e) {
        std::cerr << "validation error: " << e.what() << "\n";
        return 2;
    } catch (const LookupError& e) {
        std::cerr << "lookup error: " << e.what() << "\n";
        return 2;
    } catch (const NumericalError& e) {
        std::cerr << "numerical error: " << e.what() << "\n";
        return 3;
    } catch (const TrainingError& e) {
        std::cerr << "training error: " << e.what() << "\n";
        return 3;
    } catch (const nlohmann::json::exception& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    }
}
