// SPDX-License-Identifier: Apache-2.0
//
// Experiment orchestration: config files, per-seed fine-tuning runs,
// aggregation across seeds, suites of methods on shared data, and reports.
//
// Layout of one run directory:
//
//   spec.json          the spec as run
//   results.csv        aggregated ResultsRow table
//   meta.json          timestamps and host details (the only non-deterministic file)
//   seed_<s>/          steplog.csv, checkpoint.bin, eval_<set>_m<m>[_T].json
#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "clora/datasets.hpp"
#include "clora/eval.hpp"
#include "clora/training.hpp"

namespace clora {

inline constexpr int kSchemaVersion = 1;

// MAP, MCD (MAP with dropout on z), ENS (deep ensemble of MAP members) and
// the four stochastic adapter variants.
enum class Method { Map, Mcd, Ens, Blob, De, Fe, Clora };

std::string_view to_string(Method m) noexcept;
Method method_from_string(std::string_view s);
// Variant trained for a method (MCD and ENS use MAP adapters).
Variant method_variant(Method m) noexcept;
// Methods whose predictions do not depend on m.
bool method_is_deterministic(Method m) noexcept;

struct EvalSpec {
    std::vector<int> m{0, 10};
    std::size_t bins = 15;
    bool temperature = true;
};

struct ExperimentSpec {
    int schema_version = kSchemaVersion;
    Method method = Method::Clora;
    DatasetSpec dataset;
    PretrainSpec pretrain;
    AdapterConfig adapter;
    TrainConfig train;
    EvalSpec eval;
    std::vector<std::uint64_t> seeds{0, 1, 2};
    double mcd_rate = 0.1;
    std::size_t ensemble_size = 3;
    std::string output_dir;  // relative paths resolve under the output root
    std::size_t jobs = 0;    // 0 = one per hardware thread

    void validate() const;
    // m values actually evaluated: {0} for deterministic methods.
    std::vector<int> effective_m() const;
};

nlohmann::json spec_to_json(const ExperimentSpec& spec);
ExperimentSpec spec_from_json(const nlohmann::json& j);
ExperimentSpec load_spec(const std::filesystem::path& path);
void save_spec(const std::filesystem::path& path, const ExperimentSpec& spec);

nlohmann::json dataset_spec_json(const DatasetSpec& s);
nlohmann::json pretrain_spec_json(const PretrainSpec& s);
nlohmann::json train_config_json(const TrainConfig& c);

// Output root from $CLORA_OUTPUT_ROOT, else "runs".
std::filesystem::path output_root();
std::filesystem::path resolve_output_dir(const ExperimentSpec& spec);

struct ResultsRow {
    std::string method;
    std::string dataset;
    std::string metric;  // ACC, ECE or NLL
    double mean = 0.0;
    std::optional<double> std;  // sample std, only with >= 2 seeds
    std::size_t seeds = 0;
    int m = 0;
    bool temperature = false;
};

std::string results_csv(const std::vector<ResultsRow>& rows);
std::vector<ResultsRow> parse_results_csv(const std::string& text);

// Mean and sample standard deviation (absent for fewer than 2 values).
std::pair<double, std::optional<double>> mean_std(const std::vector<double>& v);

// Frozen backbone for a dataset, cached on disk under
// <root>/backbones/<data hash>-<pretrain hash>.bin.
Backbone pretrain_or_load(const ExperimentSpec& spec, const DatasetBundle& data, const std::filesystem::path& root);

struct SeedResult {
    std::uint64_t seed = 0;
    // One entry per (eval set, m, temperature flag).
    struct Entry {
        std::string dataset;
        int m = 0;
        bool temperature = false;
        CalibrationReport report;
    };
    std::vector<Entry> entries;
};

// Fine-tunes and evaluates a single seed; writes its seed_<s>/ directory.
SeedResult run_seed(const ExperimentSpec& spec,
                    const DatasetBundle& data,
                    const Backbone& backbone,
                    std::uint64_t seed,
                    const std::filesystem::path& dir);

std::vector<ResultsRow> aggregate(const ExperimentSpec& spec, const std::vector<SeedResult>& seeds);

struct ExperimentResult {
    std::filesystem::path dir;
    std::string data_hash;
    std::vector<ResultsRow> rows;
    std::vector<SeedResult> seeds;
};

ExperimentResult run_experiment(const ExperimentSpec& spec);

struct SuiteResult {
    std::filesystem::path dir;
    std::vector<ExperimentResult> runs;
    std::vector<ResultsRow> rows;
    std::string report_md;
};

// All specs must describe the same dataset and seeds. Each run goes to
// <dir>/<method>; the merged table is <dir>/suite_results.csv and the
// marked comparison is <dir>/suite_report.md.
SuiteResult run_suite(std::vector<ExperimentSpec> specs, const std::filesystem::path& dir);

// Markdown tables of mean ± std; per column the best entry is bold and the
// second best italic (max for ACC, min for ECE and NLL).
std::string comparison_markdown(const std::vector<ResultsRow>& rows);

struct ReportResult {
    std::vector<std::filesystem::path> bin_files;
    std::filesystem::path summary;
    std::vector<ResultsRow> rows;  // recomputed from per-seed eval files
};

// Reads one run directory or a directory of runs and writes per-method
// reliability-bin CSVs plus summary.md into `results_dir`.
ReportResult report(const std::filesystem::path& results_dir);

nlohmann::json report_json(const CalibrationReport& r);
CalibrationReport report_from_json(const nlohmann::json& j);

}  // namespace clora
