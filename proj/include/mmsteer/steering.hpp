#pragma once

#include <array>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "mmsteer/backbone.hpp"
#include "mmsteer/router.hpp"

namespace mms {

struct SteeringConfig {
    double tau = 0.7;
    double eta = 0.6;
    int K = 4;
    double gamma = 1.4;
    double beta = 0.5;
    int start_layer = 3;  // 1-based
    double psi_hat = 0.15;
    double percentile = 80.0;
    double eps_a = 1e-8, eps_b = 1e-8;
    bool use_inter = true, use_intra = true;

    void validate(int num_heads, int num_layers) const;
};

void to_json(nlohmann::json& j, const SteeringConfig& c);
void from_json(const nlohmann::json& j, SteeringConfig& c);

double jsd(const std::vector<double>& P, const std::vector<double>& Q, double eps = 1e-8);
double jsd(const std::array<double, kMods>& P, const std::array<double, kMods>& Q, double eps = 1e-8);

// (layer number, p) pairs -> layer numbers with layer >= start and p > tau
std::vector<int> select_layers(const std::vector<std::pair<int, double>>& p_by_layer, int start_layer, double tau);
// indices of the K heads farthest (JSD) from the gate; ties go to the lower index
std::vector<int> select_heads(const std::vector<std::array<double, kMods>>& pi, const std::array<double, kMods>& g, int K);
std::array<double, kMods> inter_bias(const std::array<double, kMods>& pi, const std::array<double, kMods>& g, double p, double eta,
                                     double eps_a);

// gradient x input relevance per token (layout order), normalized to sum to 1
std::vector<double> importance_scores(const Backbone& bb, const Sample& s, const InputView& view = {});
double percentile_linear(std::vector<double> xs, double P);
// positions (within the video scores) at or above the P-th percentile
std::vector<int> significant_set(const std::vector<double>& video_scores, double P);
// bias per key: log((psi_hat+eps)/(psi+eps)) on the significant keys when their mass psi is below target
std::vector<double> intra_bias(const std::vector<double>& row, const std::vector<int>& sig_keys, double psi_hat, double eps_b);
// s + gamma * b[m(k)] + beta * delta
std::vector<double> steer(const std::vector<double>& s, const Layout& layout, const std::array<double, kMods>& b,
                          const std::vector<double>& delta, double gamma, double beta);

struct LayerDiag {
    int layer = 0;  // 1-based
    double p = 0.0;
    std::array<double, kMods> g{0, 0, 0};
    bool steered = false;
    std::vector<int> heads;
    std::array<double, kMods> budget_pre{0, 0, 0}, budget_post{0, 0, 0};
};

struct SteerResult {
    Prediction pred;
    Tensor logits;
    std::vector<LayerDiag> layers;  // routed layers only
    std::vector<int> significant;   // key indices of the significant video set
    AttentionTrace trace;

    std::vector<int> steered_layers() const;
};

// replaces the router's layer/head/gate choices with random ones at a given per-layer rate
struct RandomSteering {
    double rate = 0.0;
    uint64_t seed = 1;
};

SteerResult steered_infer(const Backbone& bb, const Router& rt, const Sample& s, const SteeringConfig& cfg,
                          const RandomSteering* random = nullptr, const InputView& view = {});

// T/A/V shares of one layer averaged over heads, renormalized over modality keys
std::array<double, kMods> attention_budget(const AttentionTrace& tr, int layer, bool post_hook);

}  // namespace mms
