// SPDX-License-Identifier: Apache-2.0
#include "clora/harness.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <exception>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "clora/checkpoint.hpp"

namespace clora {

namespace fs = std::filesystem;
using nlohmann::json;

std::string_view to_string(Method m) noexcept {
    switch (m) {
        case Method::Map: return "MAP";
        case Method::Mcd: return "MCD";
        case Method::Ens: return "ENS";
        case Method::Blob: return "BLOB";
        case Method::De: return "DE";
        case Method::Fe: return "FE";
        case Method::Clora: return "CLORA";
    }
    return "?";
}

Method method_from_string(std::string_view s) {
    for (Method m : {Method::Map, Method::Mcd, Method::Ens, Method::Blob, Method::De, Method::Fe, Method::Clora}) {
        if (s == to_string(m)) return m;
    }
    throw UsageError("unknown method '" + std::string(s) + "' (expected MAP, MCD, ENS, BLOB, DE, FE or CLORA)");
}

Variant method_variant(Method m) noexcept {
    switch (m) {
        case Method::Map:
        case Method::Mcd:
        case Method::Ens: return Variant::Map;
        case Method::Blob: return Variant::Blob;
        case Method::De: return Variant::De;
        case Method::Fe: return Variant::Fe;
        case Method::Clora: return Variant::Clora;
    }
    return Variant::Map;
}

bool method_is_deterministic(Method m) noexcept { return m == Method::Map || m == Method::Ens; }

namespace {

AdapterConfig method_adapter(const ExperimentSpec& spec) {
    AdapterConfig c = spec.adapter;
    c.variant = method_variant(spec.method);
    c.dropout = spec.method == Method::Mcd ? spec.mcd_rate : 0.0;
    c.d = spec.pretrain.d;
    return c;
}

// Re-raises a module error with run context, keeping its kind.
template <typename F>
auto with_context(const std::string& context, F&& f) -> decltype(f()) {
    try {
        return f();
    } catch (const Error& e) {
        throw Error(e.kind(), context + ": " + e.what());
    } catch (const json::exception& e) {
        throw Error("usage", context + ": " + e.what());
    }
}

// Runs fn(0..n-1) on up to `jobs` threads; rethrows the lowest-index failure.
template <typename F>
void run_parallel(std::size_t n, std::size_t jobs, F&& fn) {
    if (jobs == 0) jobs = std::max(1u, std::thread::hardware_concurrency());
    jobs = std::min(jobs, n);
    std::vector<std::exception_ptr> errors(n);
    if (jobs <= 1) {
        for (std::size_t i = 0; i < n; ++i) {
            try {
                fn(i);
            } catch (...) {
                errors[i] = std::current_exception();
            }
        }
    } else {
        std::atomic<std::size_t> next{0};
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < jobs; ++w) {
            pool.emplace_back([&] {
                for (std::size_t i = next++; i < n; i = next++) {
                    try {
                        fn(i);
                    } catch (...) {
                        errors[i] = std::current_exception();
                    }
                }
            });
        }
        for (auto& t : pool) t.join();
    }
    for (auto& e : errors)
        if (e) std::rethrow_exception(e);
}

std::string fnv_hex(const std::string& s) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char c : s) {
        h ^= c;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

std::string utc_now() {
    const std::time_t t = std::time(nullptr);
    std::tm tm{};
    gmtime_r(&t, &tm);
    char buf[32];
    std::strftime(buf, sizeof buf, "%Y-%m-%dT%H:%M:%SZ", &tm);
    return buf;
}

std::string fmt_double(double x) {
    char buf[40];
    std::snprintf(buf, sizeof buf, "%.17g", x);
    return buf;
}

std::string eval_file_name(const std::string& set, int m, bool temperature) {
    return "eval_" + set + "_m" + std::to_string(m) + (temperature ? "_T" : "") + ".json";
}

const std::vector<std::string>& eval_set_names() {
    static const std::vector<std::string> names{"test", "shift_small", "shift_large"};
    return names;
}

template <typename T>
void read_field(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace

// --- config -----------------------------------------------------------------

void ExperimentSpec::validate() const {
    if (schema_version != kSchemaVersion) {
        throw UsageError("unsupported schema_version " + std::to_string(schema_version) + " (expected " +
                         std::to_string(kSchemaVersion) + ")");
    }
    dataset.validate();
    method_adapter(*this).validate();
    train.validate();
    if (pretrain.depth < 1 || pretrain.d < 2) throw UsageError("pretrain: need depth >= 1 and d >= 2");
    if (seeds.empty()) throw UsageError("at least one seed is required");
    if (std::set<std::uint64_t>(seeds.begin(), seeds.end()).size() != seeds.size()) {
        throw UsageError("seeds must be distinct");
    }
    if (eval.m.empty()) throw UsageError("eval.m must list at least one sample count");
    for (int m : eval.m)
        if (m < 0) throw UsageError("eval.m entries must be >= 0");
    if (eval.bins < 1) throw UsageError("eval.bins must be >= 1");
    if (method == Method::Mcd && !(mcd_rate > 0.0 && mcd_rate < 1.0)) throw DomainError("mcd_rate must be in (0, 1)");
    if (method == Method::Ens && ensemble_size < 1) throw UsageError("ensemble_size must be >= 1");
}

std::vector<int> ExperimentSpec::effective_m() const {
    if (method_is_deterministic(method)) return {0};
    std::vector<int> out;
    for (int m : eval.m)
        if (std::find(out.begin(), out.end(), m) == out.end()) out.push_back(m);
    return out;
}

json dataset_spec_json(const DatasetSpec& s) {
    auto shift = [](const ShiftSpec& x) {
        return json{{"rotation_deg", x.rotation_deg}, {"translation", {x.translation[0], x.translation[1]}}};
    };
    return {{"generator", s.generator},
            {"n_train", s.n_train},
            {"n_test", s.n_test},
            {"n_source", s.n_source},
            {"num_classes", s.num_classes},
            {"rho_lo", s.rho_lo},
            {"rho_hi", s.rho_hi},
            {"overlap", s.overlap},
            {"d_in", s.d_in},
            {"source_rotation_deg", s.source_rotation_deg},
            {"small_shift", shift(s.small_shift)},
            {"large_shift", shift(s.large_shift)},
            {"seed", s.seed}};
}

namespace {

DatasetSpec dataset_spec_from_json(const json& j) {
    DatasetSpec s;
    read_field(j, "generator", s.generator);
    read_field(j, "n_train", s.n_train);
    read_field(j, "n_test", s.n_test);
    read_field(j, "n_source", s.n_source);
    read_field(j, "num_classes", s.num_classes);
    read_field(j, "rho_lo", s.rho_lo);
    read_field(j, "rho_hi", s.rho_hi);
    read_field(j, "overlap", s.overlap);
    read_field(j, "d_in", s.d_in);
    read_field(j, "source_rotation_deg", s.source_rotation_deg);
    auto shift = [](const json& x, ShiftSpec& out) {
        read_field(x, "rotation_deg", out.rotation_deg);
        if (x.contains("translation")) {
            const auto& t = x.at("translation");
            if (!t.is_array() || t.size() != 2) throw UsageError("shift translation must have 2 entries");
            out.translation = {t[0].get<double>(), t[1].get<double>()};
        }
    };
    if (j.contains("small_shift")) shift(j.at("small_shift"), s.small_shift);
    if (j.contains("large_shift")) shift(j.at("large_shift"), s.large_shift);
    read_field(j, "seed", s.seed);
    return s;
}

}  // namespace

json pretrain_spec_json(const PretrainSpec& s) {
    return {{"d", s.d},
            {"depth", s.depth},
            {"epochs", s.epochs},
            {"batch_size", s.batch_size},
            {"lr", s.lr},
            {"target_accuracy", s.target_accuracy}};
}

json train_config_json(const TrainConfig& c) {
    return {{"lr_main", c.lr_main},
            {"lr_kl", c.lr_kl},
            {"weight_decay", c.weight_decay},
            {"batch_size", c.batch_size},
            {"iters", c.iters},
            {"eval_every", c.eval_every},
            {"kl_scale", c.kl_scale ? json(*c.kl_scale) : json(nullptr)},
            {"sigma_p", c.sigma_p},
            {"kl_estimator", c.kl_estimator == KlEstimator::Closed ? "closed" : "sampled"},
            {"mc_samples_eval", c.mc_samples_eval},
            {"grad_clip", c.grad_clip},
            {"bins", c.bins}};
}

json spec_to_json(const ExperimentSpec& spec) {
    return {{"schema_version", spec.schema_version},
            {"method", std::string(to_string(spec.method))},
            {"dataset", dataset_spec_json(spec.dataset)},
            {"pretrain", pretrain_spec_json(spec.pretrain)},
            {"adapter", adapter_config_json(spec.adapter)},
            {"train", train_config_json(spec.train)},
            {"eval", {{"m", spec.eval.m}, {"bins", spec.eval.bins}, {"temperature", spec.eval.temperature}}},
            {"seeds", spec.seeds},
            {"mcd_rate", spec.mcd_rate},
            {"ensemble_size", spec.ensemble_size},
            {"output_dir", spec.output_dir},
            {"jobs", spec.jobs},
            {"rng_algorithm", std::string(SeededRng::kAlgorithm)}};
}

ExperimentSpec spec_from_json(const json& j) {
    try {
        if (!j.is_object()) throw UsageError("spec must be a JSON object");
        static const std::set<std::string> known{"schema_version", "method", "dataset", "pretrain", "adapter",
                                                 "train", "eval", "seeds", "mcd_rate", "ensemble_size",
                                                 "output_dir", "jobs", "rng_algorithm"};
        for (const auto& [key, value] : j.items())
            if (!known.count(key)) throw UsageError("unknown spec field '" + key + "'");
        ExperimentSpec s;
        s.schema_version = j.value("schema_version", -1);
        if (s.schema_version != kSchemaVersion) {
            throw UsageError("unsupported or missing schema_version (expected " + std::to_string(kSchemaVersion) + ")");
        }
        if (j.contains("rng_algorithm") && j.at("rng_algorithm").get<std::string>() != SeededRng::kAlgorithm) {
            throw UsageError("spec was written with rng '" + j.at("rng_algorithm").get<std::string>() + "'");
        }
        if (j.contains("method")) s.method = method_from_string(j.at("method").get<std::string>());
        if (j.contains("dataset")) s.dataset = dataset_spec_from_json(j.at("dataset"));
        if (j.contains("pretrain")) {
            const auto& p = j.at("pretrain");
            read_field(p, "d", s.pretrain.d);
            read_field(p, "depth", s.pretrain.depth);
            read_field(p, "epochs", s.pretrain.epochs);
            read_field(p, "batch_size", s.pretrain.batch_size);
            read_field(p, "lr", s.pretrain.lr);
            read_field(p, "target_accuracy", s.pretrain.target_accuracy);
        }
        if (j.contains("adapter")) s.adapter = adapter_config_from_json(j.at("adapter"));
        if (j.contains("train")) {
            const auto& t = j.at("train");
            read_field(t, "lr_main", s.train.lr_main);
            read_field(t, "lr_kl", s.train.lr_kl);
            read_field(t, "weight_decay", s.train.weight_decay);
            read_field(t, "batch_size", s.train.batch_size);
            read_field(t, "iters", s.train.iters);
            read_field(t, "eval_every", s.train.eval_every);
            if (t.contains("kl_scale") && !t.at("kl_scale").is_null()) s.train.kl_scale = t.at("kl_scale").get<double>();
            read_field(t, "sigma_p", s.train.sigma_p);
            if (t.contains("kl_estimator")) {
                const auto e = t.at("kl_estimator").get<std::string>();
                if (e == "closed") s.train.kl_estimator = KlEstimator::Closed;
                else if (e == "sampled") s.train.kl_estimator = KlEstimator::Sampled;
                else throw UsageError("kl_estimator must be 'closed' or 'sampled'");
            }
            read_field(t, "mc_samples_eval", s.train.mc_samples_eval);
            read_field(t, "grad_clip", s.train.grad_clip);
            read_field(t, "bins", s.train.bins);
        }
        if (j.contains("eval")) {
            const auto& e = j.at("eval");
            read_field(e, "m", s.eval.m);
            read_field(e, "bins", s.eval.bins);
            read_field(e, "temperature", s.eval.temperature);
        }
        read_field(j, "seeds", s.seeds);
        read_field(j, "mcd_rate", s.mcd_rate);
        read_field(j, "ensemble_size", s.ensemble_size);
        read_field(j, "output_dir", s.output_dir);
        read_field(j, "jobs", s.jobs);
        return s;
    } catch (const json::exception& e) {
        throw UsageError(std::string("bad spec: ") + e.what());
    }
}

ExperimentSpec load_spec(const fs::path& path) {
    json j;
    try {
        j = json::parse(read_file(path));
    } catch (const json::exception& e) {
        throw UsageError(path.string() + ": " + e.what());
    }
    return spec_from_json(j);
}

void save_spec(const fs::path& path, const ExperimentSpec& spec) {
    write_file_atomic(path, spec_to_json(spec).dump(2) + "\n");
}

fs::path output_root() {
    const char* env = std::getenv("CLORA_OUTPUT_ROOT");
    return (env && *env) ? fs::path(env) : fs::path("runs");
}

fs::path resolve_output_dir(const ExperimentSpec& spec) {
    const fs::path p = spec.output_dir.empty() ? fs::path(std::string(to_string(spec.method))) : fs::path(spec.output_dir);
    return p.is_absolute() ? p : output_root() / p;
}

// --- results ----------------------------------------------------------------

std::pair<double, std::optional<double>> mean_std(const std::vector<double>& v) {
    if (v.empty()) return {0.0, std::nullopt};
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    if (v.size() < 2) return {mean, std::nullopt};
    double ss = 0.0;
    for (double x : v) ss += (x - mean) * (x - mean);
    return {mean, std::sqrt(ss / static_cast<double>(v.size() - 1))};
}

std::string results_csv(const std::vector<ResultsRow>& rows) {
    std::string out = "method,dataset,metric,m,temperature,mean,std,seeds\n";
    for (const auto& r : rows) {
        out += r.method + "," + r.dataset + "," + r.metric + "," + std::to_string(r.m) + "," +
               (r.temperature ? "1" : "0") + "," + fmt_double(r.mean) + "," + (r.std ? fmt_double(*r.std) : "") +
               "," + std::to_string(r.seeds) + "\n";
    }
    return out;
}

std::vector<ResultsRow> parse_results_csv(const std::string& text) {
    std::istringstream is(text);
    std::string line;
    if (!std::getline(is, line) || line != "method,dataset,metric,m,temperature,mean,std,seeds") {
        throw IoError("results csv: unexpected header");
    }
    std::vector<ResultsRow> rows;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::stringstream ls(line);
        std::string cell;
        while (std::getline(ls, cell, ',')) f.push_back(cell);
        if (line.back() == ',') f.emplace_back();
        if (f.size() != 8) throw IoError("results csv: bad row '" + line + "'");
        try {
            ResultsRow r;
            r.method = f[0];
            r.dataset = f[1];
            r.metric = f[2];
            r.m = std::stoi(f[3]);
            r.temperature = f[4] == "1";
            r.mean = std::stod(f[5]);
            if (!f[6].empty()) r.std = std::stod(f[6]);
            r.seeds = std::stoul(f[7]);
            rows.push_back(std::move(r));
        } catch (const std::exception&) {
            throw IoError("results csv: bad row '" + line + "'");
        }
    }
    return rows;
}

json report_json(const CalibrationReport& r) {
    json bins = json::array();
    for (const auto& b : r.bins) {
        bins.push_back({{"lo", b.lo}, {"hi", b.hi}, {"count", b.count}, {"acc", b.acc}, {"conf", b.conf}});
    }
    return {{"acc", r.acc},
            {"ece", r.ece},
            {"nll", r.nll},
            {"n", r.n},
            {"m", r.m},
            {"temperature", r.temperature ? json(*r.temperature) : json(nullptr)},
            {"bins", bins}};
}

CalibrationReport report_from_json(const json& j) {
    CalibrationReport r;
    r.acc = j.at("acc").get<double>();
    r.ece = j.at("ece").get<double>();
    r.nll = j.at("nll").get<double>();
    r.n = j.at("n").get<std::size_t>();
    r.m = j.at("m").get<int>();
    if (!j.at("temperature").is_null()) r.temperature = j.at("temperature").get<double>();
    for (const auto& b : j.at("bins")) {
        r.bins.push_back({b.at("lo").get<double>(), b.at("hi").get<double>(), b.at("count").get<std::size_t>(),
                          b.at("acc").get<double>(), b.at("conf").get<double>()});
    }
    return r;
}

// --- runs -------------------------------------------------------------------

Backbone pretrain_or_load(const ExperimentSpec& spec, const DatasetBundle& data, const fs::path& root) {
    static std::mutex mu;
    const std::lock_guard<std::mutex> lock(mu);
    const fs::path path =
        root / "backbones" / (bundle_hash(data) + "-" + fnv_hex(pretrain_spec_json(spec.pretrain).dump()) + ".bin");
    if (fs::exists(path)) {
        Backbone bb = backbone_from_container(read_container(path));
        if (!bb.frozen || bb.d() != spec.pretrain.d || bb.depth() != spec.pretrain.depth || bb.d_in() != data.source.dim()) {
            throw IoError(path.string() + ": cached backbone does not match the spec");
        }
        return bb;
    }
    SeededRng rng = SeededRng(spec.dataset.seed).split("backbone");
    PretrainResult res = pretrain_backbone(spec.pretrain, data.source, rng);
    write_container(path, backbone_container(res.backbone));
    return res.backbone;
}

SeedResult run_seed(const ExperimentSpec& spec,
                    const DatasetBundle& data,
                    const Backbone& backbone,
                    std::uint64_t seed,
                    const fs::path& dir) {
    const std::string ctx = "seed " + std::to_string(seed);
    const SeededRng root(seed);
    const AdapterConfig config = method_adapter(spec);
    const std::size_t members = spec.method == Method::Ens ? spec.ensemble_size : 1;
    const std::size_t k = data.train.num_classes;
    fs::create_directories(dir);

    std::vector<AdaptedModel> models;
    for (std::size_t i = 0; i < members; ++i) {
        const SeededRng member_rng = spec.method == Method::Ens ? root.split("member").split(i) : root;
        const std::string suffix = spec.method == Method::Ens ? "_member" + std::to_string(i) : "";
        with_context(ctx + ", stage finetune" + suffix, [&] {
            SeededRng init_rng = member_rng.split("init");
            AdaptedModel model = make_adapted_model(backbone, config, k, init_rng);
            const CheckpointState state = train(model, data.train, data.val, spec.train, member_rng.split("train"));
            write_file_atomic(dir / ("steplog" + suffix + ".csv"), step_log_csv(state));
            save_model(dir / ("checkpoint" + suffix + ".bin"), model, seed);
            models.push_back(std::move(model));
        });
    }

    const SeededRng eval_rng = root.split("eval");
    auto draws_for = [&](const Dataset& set, const std::string& name, int m) {
        LogitDraws draws;
        if (spec.method == Method::Ens) {
            for (const auto& model : models) {
                SeededRng unused = eval_rng.split(name);
                auto d = collect_logits(model, set, 0, unused);
                draws.insert(draws.end(), d.begin(), d.end());
            }
            return draws;
        }
        SeededRng rng = eval_rng.split(name).split(static_cast<std::uint64_t>(m));
        return collect_logits(models.front(), set, m, rng);
    };

    SeedResult result;
    result.seed = seed;
    with_context(ctx + ", stage eval", [&] {
        for (int m : spec.effective_m()) {
            std::optional<TemperatureFit> fit;
            if (spec.eval.temperature) fit = fit_temperature(draws_for(data.val, "val", m), data.val.y);
            for (const auto& [name, set] : data.eval_sets()) {
                const LogitDraws draws = draws_for(*set, name, m);
                std::vector<std::pair<bool, CalibrationReport>> reps;
                reps.emplace_back(false, evaluate_draws(draws, set->y, m, spec.eval.bins));
                if (fit) reps.emplace_back(true, evaluate_draws(draws, set->y, m, spec.eval.bins, fit->t));
                for (auto& [temp, rep] : reps) {
                    write_file_atomic(dir / eval_file_name(name, m, temp), report_json(rep).dump(2) + "\n");
                    result.entries.push_back({name, m, temp, std::move(rep)});
                }
            }
        }
    });
    return result;
}

std::vector<ResultsRow> aggregate(const ExperimentSpec& spec, const std::vector<SeedResult>& seeds) {
    std::vector<ResultsRow> rows;
    if (seeds.empty()) return rows;
    const std::string method(to_string(spec.method));
    for (const auto& set : eval_set_names()) {
        for (int m : spec.effective_m()) {
            for (bool temp : {false, true}) {
                if (temp && !spec.eval.temperature) continue;
                std::vector<double> acc, ece, nll;
                for (const auto& s : seeds) {
                    const auto it = std::find_if(s.entries.begin(), s.entries.end(), [&](const SeedResult::Entry& e) {
                        return e.dataset == set && e.m == m && e.temperature == temp;
                    });
                    if (it == s.entries.end()) {
                        throw IoError("seed " + std::to_string(s.seed) + " has no result for " +
                                      eval_file_name(set, m, temp));
                    }
                    acc.push_back(it->report.acc);
                    ece.push_back(it->report.ece);
                    nll.push_back(it->report.nll);
                }
                for (auto [metric, values] : {std::pair{"ACC", &acc}, std::pair{"ECE", &ece}, std::pair{"NLL", &nll}}) {
                    const auto [mean, sd] = mean_std(*values);
                    rows.push_back({method, set, metric, mean, sd, values->size(), m, temp});
                }
            }
        }
    }
    return rows;
}

namespace {

ExperimentResult run_with_data(const ExperimentSpec& spec, const DatasetBundle& data, const std::string& hash) {
    const std::string started = utc_now();
    ExperimentResult out;
    out.dir = resolve_output_dir(spec);
    out.data_hash = hash;
    fs::create_directories(out.dir);
    save_spec(out.dir / "spec.json", spec);

    const Backbone backbone = with_context("stage pretrain", [&] {
        return pretrain_or_load(spec, data, out.dir.parent_path().empty() ? fs::path(".") : out.dir.parent_path());
    });

    out.seeds.resize(spec.seeds.size());
    run_parallel(spec.seeds.size(), spec.jobs, [&](std::size_t i) {
        const std::uint64_t seed = spec.seeds[i];
        out.seeds[i] = run_seed(spec, data, backbone, seed, out.dir / ("seed_" + std::to_string(seed)));
    });
    out.rows = aggregate(spec, out.seeds);
    write_file_atomic(out.dir / "results.csv", results_csv(out.rows));

    const json data_info = {{"hash", hash},
                            {"n_train", data.train.size()},
                            {"n_val", data.val.size()},
                            {"n_test", data.test.size()},
                            {"bayes_accuracy", data.bayes_accuracy},
                            {"bayes_accuracy_small", data.bayes_accuracy_small},
                            {"bayes_accuracy_large", data.bayes_accuracy_large}};
    write_file_atomic(out.dir / "data.json", data_info.dump(2) + "\n");
    const json meta = {{"started", started},
                       {"finished", utc_now()},
                       {"rng_algorithm", std::string(SeededRng::kAlgorithm)},
                       {"data_hash", hash},
                       {"hardware_threads", std::thread::hardware_concurrency()}};
    write_file_atomic(out.dir / "meta.json", meta.dump(2) + "\n");
    return out;
}

}  // namespace

ExperimentResult run_experiment(const ExperimentSpec& spec) {
    spec.validate();
    const DatasetBundle data = with_context("stage data", [&] { return generate_dataset(spec.dataset); });
    return run_with_data(spec, data, bundle_hash(data));
}

// --- suites -----------------------------------------------------------------

std::string comparison_markdown(const std::vector<ResultsRow>& rows) {
    std::ostringstream os;
    for (bool temp : {false, true}) {
        std::vector<std::string> row_keys;
        std::vector<std::pair<std::string, std::string>> cols;
        std::map<std::pair<std::string, std::pair<std::string, std::string>>, const ResultsRow*> cell;
        for (const auto& r : rows) {
            if (r.temperature != temp) continue;
            const std::string key = r.method + " (m=" + std::to_string(r.m) + ")";
            if (std::find(row_keys.begin(), row_keys.end(), key) == row_keys.end()) row_keys.push_back(key);
            const auto col = std::pair{r.dataset, r.metric};
            if (std::find(cols.begin(), cols.end(), col) == cols.end()) cols.push_back(col);
            cell[{key, col}] = &r;
        }
        if (row_keys.empty()) continue;
        os << (temp ? "## With temperature scaling\n\n" : "## Without temperature scaling\n\n");
        os << "| method |";
        for (const auto& c : cols) os << " " << c.first << " " << c.second << " |";
        os << "\n|---|";
        for (std::size_t i = 0; i < cols.size(); ++i) os << "---|";
        os << "\n";
        // Rank each column: ACC higher is better, ECE and NLL lower.
        std::map<std::pair<std::string, std::pair<std::string, std::string>>, int> rank;
        for (const auto& c : cols) {
            std::vector<std::pair<double, std::string>> vals;
            for (const auto& k : row_keys) {
                auto it = cell.find({k, c});
                if (it != cell.end()) vals.emplace_back(c.second == "ACC" ? -it->second->mean : it->second->mean, k);
            }
            std::stable_sort(vals.begin(), vals.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
            for (std::size_t i = 0; i < vals.size() && i < 2; ++i) rank[{vals[i].second, c}] = static_cast<int>(i) + 1;
        }
        for (const auto& k : row_keys) {
            os << "| " << k << " |";
            for (const auto& c : cols) {
                auto it = cell.find({k, c});
                if (it == cell.end()) {
                    os << " - |";
                    continue;
                }
                char buf[64];
                if (it->second->std) std::snprintf(buf, sizeof buf, "%.4f ± %.4f", it->second->mean, *it->second->std);
                else std::snprintf(buf, sizeof buf, "%.4f", it->second->mean);
                const int r = rank.count({k, c}) ? rank[{k, c}] : 0;
                os << " " << (r == 1 ? "**" : r == 2 ? "_" : "") << buf << (r == 1 ? "**" : r == 2 ? "_" : "") << " |";
            }
            os << "\n";
        }
        os << "\n";
    }
    return os.str();
}

SuiteResult run_suite(std::vector<ExperimentSpec> specs, const fs::path& dir) {
    if (specs.empty()) throw UsageError("suite: no experiments given");
    const json data0 = dataset_spec_json(specs.front().dataset);
    const json pre0 = pretrain_spec_json(specs.front().pretrain);
    std::set<std::string> methods;
    for (auto& s : specs) {
        s.validate();
        if (dataset_spec_json(s.dataset) != data0) {
            throw UsageError("suite: method " + std::string(to_string(s.method)) +
                             " uses a different dataset spec or dataset seed");
        }
        if (s.seeds != specs.front().seeds) throw UsageError("suite: all methods must use the same seeds");
        if (pretrain_spec_json(s.pretrain) != pre0) throw UsageError("suite: all methods must share the backbone spec");
        if (!methods.insert(std::string(to_string(s.method))).second) {
            throw UsageError("suite: method " + std::string(to_string(s.method)) + " listed twice");
        }
        s.output_dir = (dir / std::string(to_string(s.method))).string();
    }

    const DatasetBundle data = with_context("stage data", [&] { return generate_dataset(specs.front().dataset); });
    const std::string hash = bundle_hash(data);
    fs::create_directories(dir);
    // Pretrain once up front so parallel entries only read the cache.
    with_context("stage pretrain", [&] { return pretrain_or_load(specs.front(), data, dir); });

    SuiteResult out;
    out.dir = dir;
    out.runs.resize(specs.size());
    run_parallel(specs.size(), specs.front().jobs, [&](std::size_t i) {
        out.runs[i] = with_context("method " + std::string(to_string(specs[i].method)),
                                   [&] { return run_with_data(specs[i], data, hash); });
    });
    for (const auto& r : out.runs) {
        if (r.data_hash != hash) throw UsageError("suite: data hash mismatch in " + r.dir.string());
        out.rows.insert(out.rows.end(), r.rows.begin(), r.rows.end());
    }
    write_file_atomic(dir / "suite_results.csv", results_csv(out.rows));
    out.report_md = "# Suite comparison\n\nData hash `" + hash + "`; bold = best, italic = second best per column.\n\n" +
                    comparison_markdown(out.rows);
    write_file_atomic(dir / "suite_report.md", out.report_md);
    return out;
}

// --- reports ----------------------------------------------------------------

ReportResult report(const fs::path& results_dir) {
    if (!fs::is_directory(results_dir)) throw IoError("no runs found: " + results_dir.string() + " is not a directory");
    std::vector<fs::path> runs;
    if (fs::exists(results_dir / "spec.json")) {
        runs.push_back(results_dir);
    } else {
        for (const auto& e : fs::directory_iterator(results_dir))
            if (e.is_directory() && fs::exists(e.path() / "spec.json")) runs.push_back(e.path());
        std::sort(runs.begin(), runs.end());
    }
    if (runs.empty()) throw IoError("no runs found in " + results_dir.string());

    struct Loaded {
        ExperimentSpec spec;
        std::vector<SeedResult> seeds;
    };
    std::vector<Loaded> loaded;
    std::vector<std::string> bad;
    for (const auto& run : runs) {
        Loaded l;
        try {
            l.spec = load_spec(run / "spec.json");
        } catch (const Error&) {
            bad.push_back((run / "spec.json").string());
            continue;
        }
        for (std::uint64_t seed : l.spec.seeds) {
            SeedResult s;
            s.seed = seed;
            for (const auto& set : eval_set_names()) {
                for (int m : l.spec.effective_m()) {
                    for (bool temp : {false, true}) {
                        if (temp && !l.spec.eval.temperature) continue;
                        const fs::path p = run / ("seed_" + std::to_string(seed)) / eval_file_name(set, m, temp);
                        try {
                            s.entries.push_back({set, m, temp, report_from_json(json::parse(read_file(p)))});
                        } catch (const std::exception&) {
                            bad.push_back(p.string());
                        }
                    }
                }
            }
            l.seeds.push_back(std::move(s));
        }
        loaded.push_back(std::move(l));
    }
    if (!bad.empty()) {
        std::string msg = "missing or corrupt run files:";
        for (const auto& p : bad) msg += "\n  " + p;
        throw IoError(msg);
    }

    ReportResult out;
    for (const auto& l : loaded) {
        const auto rows = aggregate(l.spec, l.seeds);
        out.rows.insert(out.rows.end(), rows.begin(), rows.end());
        const std::string method(to_string(l.spec.method));
        // Pool reliability bins over seeds, weighting by count.
        for (const auto& set : eval_set_names()) {
            for (int m : l.spec.effective_m()) {
                for (bool temp : {false, true}) {
                    if (temp && !l.spec.eval.temperature) continue;
                    std::vector<BinRecord> pooled;
                    for (const auto& s : l.seeds) {
                        for (const auto& e : s.entries) {
                            if (e.dataset != set || e.m != m || e.temperature != temp) continue;
                            if (pooled.empty()) {
                                pooled = e.report.bins;
                                for (auto& b : pooled) {
                                    b.acc *= static_cast<double>(b.count);
                                    b.conf *= static_cast<double>(b.count);
                                }
                                continue;
                            }
                            if (pooled.size() != e.report.bins.size()) throw IoError("report: bin counts differ across seeds");
                            for (std::size_t i = 0; i < pooled.size(); ++i) {
                                const auto& b = e.report.bins[i];
                                pooled[i].count += b.count;
                                pooled[i].acc += b.acc * static_cast<double>(b.count);
                                pooled[i].conf += b.conf * static_cast<double>(b.count);
                            }
                        }
                    }
                    std::string csv = "bin,lo,hi,count,acc,conf\n";
                    for (std::size_t i = 0; i < pooled.size(); ++i) {
                        const auto& b = pooled[i];
                        const double n = static_cast<double>(b.count);
                        csv += std::to_string(i) + "," + fmt_double(b.lo) + "," + fmt_double(b.hi) + "," +
                               std::to_string(b.count) + "," + fmt_double(n > 0 ? b.acc / n : 0.0) + "," +
                               fmt_double(n > 0 ? b.conf / n : 0.0) + "\n";
                    }
                    const fs::path p = results_dir / ("bins_" + method + "_" + set + "_m" + std::to_string(m) +
                                                      (temp ? "_T" : "") + ".csv");
                    write_file_atomic(p, csv);
                    out.bin_files.push_back(p);
                }
            }
        }
    }
    std::string md = "# Summary\n\n";
    for (std::size_t i = 0; i < runs.size(); ++i) {
        md += "- `" + runs[i].filename().string() + "`: " + std::string(to_string(loaded[i].spec.method)) + ", " +
              std::to_string(loaded[i].spec.seeds.size()) + " seeds\n";
    }
    md += "\n" + comparison_markdown(out.rows);
    out.summary = results_dir / "summary.md";
    write_file_atomic(out.summary, md);
    return out;
}

}  // namespace clora
