#pragma once

#include <array>
#include <optional>
#include <vector>

#include <json.hpp>

#include "mmsteer/backbone.hpp"
#include "mmsteer/synthgen.hpp"

namespace mms {

// 1 - mean |y_i - y_j| / 4
double consistency(const std::vector<int>& yi, const std::vector<int>& yj);

// modality subsets as bitmasks: T=1, A=2, V=4
constexpr int kSubsets = 8;
constexpr int mod_bit(int m) { return 1 << m; }
constexpr int kFull = 7;

class SubsetPerformance {
public:
    void set(int mask, double v);
    double at(int mask) const;  // usage error when unset
    bool has(int mask) const { return v_[mask].has_value(); }
    bool complete() const;

private:
    std::array<std::optional<double>, kSubsets> v_;
};

// Shapley value of each modality over the 8 subset accuracies
std::array<double, kMods> psmv(const SubsetPerformance& perf);
// psmv_m / sum; nullopt when the total contribution is not positive
std::optional<std::array<double, kMods>> psmv_shares(const std::array<double, kMods>& v);

// exactly one available modality has a polarity different from the ground truth
bool target_conflict(const Sample& s);
// GT-aligned (same polarity) and available
bool polarity_aligned(const Sample& s, int m);
std::optional<double> gtar(const std::vector<const Sample*>& xs, const std::vector<int>& pred, int m);

std::optional<double> nmas(const AttentionTrace& tr, int m, int layer, int head, bool post_hook = true);

// V(TAV) - V(TA)
double marginal_gain_video(const SubsetPerformance& perf);
double marginal_gain_video(double perf_tav, double perf_ta);

struct ClassMetrics {
    std::size_t n = 0;
    double acc = 0.0, f1 = 0.0, mae = 0.0;
};

ClassMetrics classification_metrics(const std::vector<int>& pred, const std::vector<int>& label, Scheme scheme = Scheme::CHSIMS);

// accuracy of the frozen backbone for every subset of inputs (modalities withheld at inference)
SubsetPerformance subset_performance(const Backbone& bb, const std::vector<const Sample*>& xs);

void to_json(nlohmann::json& j, const ClassMetrics& m);

}  // namespace mms
