#pragma once

#include <array>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mmsteer/backbone.hpp"
#include "mmsteer/metrics.hpp"
#include "mmsteer/router.hpp"
#include "mmsteer/steering.hpp"
#include "mmsteer/synthgen.hpp"

namespace mms {

enum class TopOneRule { Majority, All, Any };
const char* top_one_name(TopOneRule r);
TopOneRule top_one_from_name(std::string_view s);

struct ExperimentConfig {
    GeneratorConfig gen;
    BackboneConfig backbone;
    PretrainConfig pretrain;
    RouterHyper router;
    SteeringConfig steering;
    std::vector<uint64_t> seeds{1, 2, 3, 4, 5};
    TopOneRule top_one = TopOneRule::Majority;
    int case_cards = 6;
    int threads = 0;  // 0 = hardware concurrency
    std::string data_path = "data/benchmark.jsonl";
    std::string backbone_path = "ckpt/backbone.ckpt";
    std::string router_path = "ckpt/router.ckpt";
    std::string out_dir = "reports";

    void validate() const;
    // every seeded component follows s
    ExperimentConfig with_seed(uint64_t s) const;
    // hash of everything except file locations
    uint64_t hash() const;
};

void to_json(nlohmann::json& j, const ExperimentConfig& c);
void from_json(const nlohmann::json& j, ExperimentConfig& c);
ExperimentConfig load_config(const std::string& path);

// ---- evaluation

struct SubsetRow {
    std::string tag;  // Overall, Align, Conflict, Missing
    ClassMetrics base;
    std::optional<ClassMetrics> steered;
};

struct CaseCard {
    nlohmann::json body;
    std::string id;
};

struct EvalReport {
    std::vector<SubsetRow> rows;
    std::vector<std::string> gaps;  // subset tags with no samples
    std::optional<SubsetPerformance> perf_align, perf_conflict;
    std::optional<std::array<double, kMods>> psmv_align, psmv_conflict;
    std::array<std::optional<double>, kMods> gtar_base{}, gtar_steered{};
    // [layer][head][modality], baseline attention on the Conflict samples
    std::vector<std::vector<std::array<std::optional<double>, kMods>>> nmas_conflict;
    // rows/cols GT, T, A, V over the full samples
    std::array<std::array<double, 4>, 4> agreement{};
    double steer_rate = 0.0;  // share of routed layers that were steered
    std::vector<CaseCard> cards;

    const SubsetRow* row(const std::string& tag) const;
    // final-layer nMAS averaged over heads
    std::array<std::optional<double>, kMods> final_nmas() const;
};

EvalReport run_eval(const Backbone& bb, const Router* rt, const Dataset& d, const SteeringConfig& sc, Split split = Split::Test,
                    int case_cards = 0, int threads = 0);

struct AblationRow {
    std::string name;
    ClassMetrics m;
    double steer_rate = 0.0;
};

std::vector<AblationRow> run_ablation(const Backbone& bb, const Router& rt, const std::vector<const Sample*>& conflict,
                                      const SteeringConfig& sc, uint64_t seed, int threads = 0);
const AblationRow& ablation_row(const std::vector<AblationRow>& t, const std::string& name);

struct RouterDiagnostics {
    std::size_t n_conflict = 0, n_detected = 0, n_top1 = 0, n_joint = 0;
    std::optional<double> recall, top1, joint;
};

// per-sample facts the diagnostics are computed from
struct DiagnosticCase {
    bool conflict = false;
    std::vector<std::array<double, kMods>> steered_gates;  // gate on each steered layer
    std::array<bool, kMods> aligned{};                     // available and GT-aligned
};

RouterDiagnostics diagnose_cases(const std::vector<DiagnosticCase>& cases, TopOneRule rule);
RouterDiagnostics router_diagnostics(const Backbone& bb, const Router& rt, const std::vector<const Sample*>& xs,
                                     const SteeringConfig& sc, TopOneRule rule, int threads = 0);

struct MaskResult {
    std::size_t n = 0;
    double acc_tav = 0, acc_ta = 0, acc_tav_informative = 0;
    double dv_original = 0, dv_informative = 0;
};

using VideoKeep = std::function<const std::vector<int>*(const Sample&)>;
// accuracy with video tokens restricted by keep (nullptr = all tokens)
double video_accuracy(const Backbone& bb, const std::vector<const Sample*>& xs, const VideoKeep& keep);
MaskResult token_mask_experiment(const Backbone& bb, const std::vector<const Sample*>& xs, const VideoKeep& keep = {});

// ---- whole runs

struct RunResults {
    uint64_t seed = 0;
    std::string config_hash;
    EvalReport eval;
    std::optional<std::vector<AblationRow>> ablation;
    std::optional<RouterDiagnostics> diagnostics;
    std::optional<MaskResult> mask;
    nlohmann::json training;  // pretraining and router losses
};

struct Artifacts {
    Dataset data;
    Backbone backbone;
    Router router;
    PretrainReport pretrain;
    RouterTrainReport router_report;
};

using Log = std::function<void(const std::string&)>;

Artifacts build_artifacts(const ExperimentConfig& cfg, const Log& log = {});
RunResults run_experiments(const Artifacts& a, const ExperimentConfig& cfg, bool ablation = true, bool diagnostics = true,
                           bool mask = true, const Log& log = {});

// writes into dir (created if needed)
void write_reports(const RunResults& r, const std::string& dir);
// fresh timestamp+hash directory under root; returns its path
std::string emit_reports(const RunResults& r, const std::string& root);

std::string metrics_csv(const RunResults& r);
nlohmann::json metrics_json(const RunResults& r);
std::string ablation_csv(const RunResults& r);
nlohmann::json case_card(const Backbone& bb, const Sample& s, const Prediction& base, const AttentionTrace& base_trace,
                         const SteerResult* steered);

}  // namespace mms
