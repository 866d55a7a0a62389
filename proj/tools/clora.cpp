// SPDX-License-Identifier: Apache-2.0
//
// clora: command-line front end for the experiment harness.
//
//   clora config   [flags]                 print a spec as JSON
//   clora pretrain [flags]                 pretrain (or load) the backbone
//   clora finetune [flags]                 run one method over its seeds
//   clora eval     --checkpoint F [flags]  evaluate a saved model
//   clora suite    --methods A,B,... [flags]
//   clora report   DIR
//
// Outputs land under $CLORA_OUTPUT_ROOT (default ./runs). Failures exit
// nonzero and print {"error":{"kind":...,"message":...}} on stderr.
#include <cstdio>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "clora/checkpoint.hpp"
#include "clora/harness.hpp"

using namespace clora;
using nlohmann::json;

namespace {

struct Overrides {
    std::string config;
    std::string method;
    std::vector<std::uint64_t> seeds;
    std::vector<int> m;
    std::optional<std::size_t> bins;
    std::optional<bool> temperature;
    std::optional<std::size_t> iters;
    std::optional<double> lr, lr_kl, kl_scale, omega_init;
    std::optional<std::string> generator;
    std::optional<std::size_t> n_train, jobs;
    std::optional<double> rho_lo, rho_hi;
    std::optional<std::uint64_t> data_seed;
    std::string out;

    void add(CLI::App* app, bool with_method = true) {
        app->add_option("--config", config, "JSON spec file; flags override its fields")->check(CLI::ExistingFile);
        if (with_method) app->add_option("--method,--variant", method, "MAP, MCD, ENS, BLOB, DE, FE or CLORA");
        app->add_option("--seed", seeds, "training seed (repeatable)");
        app->add_option("--m", m, "test-time sample counts, e.g. --m 0 10");
        app->add_option("--bins", bins, "ECE bins");
        app->add_option("--temperature", temperature, "fit temperature scaling (true/false)");
        app->add_option("--iters", iters, "fine-tuning iterations");
        app->add_option("--lr", lr, "AdamW learning rate");
        app->add_option("--lr-kl", lr_kl, "SGD learning rate for the KL gradient");
        app->add_option("--kl-scale", kl_scale, "KL weight (default 1/N_train)");
        app->add_option("--omega-init", omega_init, "initial posterior std");
        app->add_option("--generator", generator, "hetero-xor or clusters");
        app->add_option("--n-train", n_train, "target examples before the 80/20 split");
        app->add_option("--rho-lo", rho_lo, "label-flip rate, low-noise region");
        app->add_option("--rho-hi", rho_hi, "label-flip rate, high-noise region");
        app->add_option("--data-seed", data_seed, "dataset seed");
        app->add_option("--jobs", jobs, "parallel jobs (0 = all cores)");
        app->add_option("--out", out, "output directory (relative to the output root)");
    }

    ExperimentSpec spec() const {
        ExperimentSpec s = config.empty() ? ExperimentSpec{} : load_spec(config);
        if (!method.empty()) s.method = method_from_string(method);
        if (!seeds.empty()) s.seeds = seeds;
        if (!m.empty()) s.eval.m = m;
        if (bins) s.eval.bins = s.train.bins = *bins;
        if (temperature) s.eval.temperature = *temperature;
        if (iters) s.train.iters = *iters;
        if (s.train.eval_every > s.train.iters) s.train.eval_every = s.train.iters;
        if (lr) s.train.lr_main = *lr;
        if (lr_kl) s.train.lr_kl = *lr_kl;
        if (kl_scale) s.train.kl_scale = *kl_scale;
        if (omega_init) s.adapter.omega_init = *omega_init;
        if (generator) s.dataset.generator = *generator;
        if (n_train) s.dataset.n_train = *n_train;
        if (rho_lo) s.dataset.rho_lo = *rho_lo;
        if (rho_hi) s.dataset.rho_hi = *rho_hi;
        if (data_seed) s.dataset.seed = *data_seed;
        if (jobs) s.jobs = *jobs;
        if (!out.empty()) s.output_dir = out;
        s.validate();
        return s;
    }
};

void print_error(const std::string& kind, const std::string& message) {
    std::cerr << json{{"error", {{"kind", kind}, {"message", message}}}}.dump() << "\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Contextual low-rank adapters on synthetic few-shot tasks"};
    app.require_subcommand(1);

    Overrides cfg_o, pre_o, ft_o, ev_o, suite_o;
    auto* cfg = app.add_subcommand("config", "print the resolved spec as JSON");
    cfg_o.add(cfg);

    auto* pre = app.add_subcommand("pretrain", "pretrain or load the cached backbone");
    pre_o.add(pre, false);

    auto* ft = app.add_subcommand("finetune", "fine-tune one method over its seeds and evaluate");
    ft_o.add(ft);

    auto* ev = app.add_subcommand("eval", "evaluate a saved checkpoint");
    ev_o.add(ev, false);
    std::string checkpoint, eval_set = "test";
    ev->add_option("--checkpoint", checkpoint, "model checkpoint")->required()->check(CLI::ExistingFile);
    ev->add_option("--set", eval_set, "test, shift_small, shift_large or val");

    auto* suite = app.add_subcommand("suite", "run several methods on identical data");
    suite_o.add(suite, false);
    std::vector<std::string> methods{"MAP", "FE", "CLORA"};
    suite->add_option("--methods", methods, "methods to compare")->delimiter(',');

    auto* rep = app.add_subcommand("report", "write bin CSVs and a summary for finished runs");
    std::string report_dir;
    rep->add_option("dir", report_dir, "run or suite directory")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        print_error("usage", e.what());
        return 2;
    }

    try {
        if (*cfg) {
            std::cout << spec_to_json(cfg_o.spec()).dump(2) << "\n";
        } else if (*pre) {
            const ExperimentSpec s = pre_o.spec();
            const DatasetBundle data = generate_dataset(s.dataset);
            const Backbone bb = pretrain_or_load(s, data, output_root());
            std::cout << json{{"data_hash", bundle_hash(data)}, {"d", bb.d()}, {"depth", bb.depth()},
                              {"d_in", bb.d_in()}}
                             .dump()
                      << "\n";
        } else if (*ft) {
            const ExperimentResult r = run_experiment(ft_o.spec());
            std::cout << results_csv(r.rows);
            std::cerr << "wrote " << r.dir.string() << "\n";
        } else if (*ev) {
            const ExperimentSpec s = ev_o.spec();
            const AdaptedModel model = load_model(checkpoint);
            const DatasetBundle data = generate_dataset(s.dataset);
            const Dataset* set = eval_set == "val" ? &data.val : nullptr;
            for (const auto& [name, d] : data.eval_sets())
                if (name == eval_set) set = d;
            if (!set) throw UsageError("unknown eval set '" + eval_set + "'");
            json out = json::array();
            const std::vector<int> ms = is_stochastic(model.variant()) || model.config.dropout > 0.0
                                            ? s.eval.m
                                            : std::vector<int>{0};
            for (int m : ms) {
                SeededRng rng = SeededRng(s.seeds.front()).split("eval").split(eval_set).split(static_cast<std::uint64_t>(m));
                const LogitDraws draws = collect_logits(model, *set, m, rng);
                std::optional<double> t;
                if (s.eval.temperature) {
                    SeededRng vrng = SeededRng(s.seeds.front()).split("eval").split("val").split(static_cast<std::uint64_t>(m));
                    t = fit_temperature(collect_logits(model, data.val, m, vrng), data.val.y).t;
                }
                json row = report_json(evaluate_draws(draws, set->y, m, s.eval.bins));
                if (t) row["with_temperature"] = report_json(evaluate_draws(draws, set->y, m, s.eval.bins, t));
                out.push_back(row);
            }
            std::cout << out.dump(2) << "\n";
        } else if (*suite) {
            const ExperimentSpec base = suite_o.spec();
            std::vector<ExperimentSpec> specs;
            for (const auto& m : methods) {
                ExperimentSpec s = base;
                s.method = method_from_string(m);
                specs.push_back(s);
            }
            const std::filesystem::path dir = base.output_dir.empty() ? output_root() / "suite" : resolve_output_dir(base);
            const SuiteResult r = run_suite(specs, dir);
            std::cout << r.report_md;
            std::cerr << "wrote " << r.dir.string() << "\n";
        } else if (*rep) {
            const ReportResult r = report(report_dir);
            std::cout << read_file(r.summary);
        }
    } catch (const Error& e) {
        print_error(e.kind(), e.what());
        return 1;
    } catch (const std::exception& e) {
        print_error("internal", e.what());
        return 1;
    }
    return 0;
}
