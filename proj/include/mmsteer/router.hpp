#pragma once

#include <array>
#include <string>
#include <vector>

#include <json.hpp>

#include "mmsteer/backbone.hpp"
#include "mmsteer/tensor.hpp"

namespace mms {

// softmax over available modalities of per-token attention means
std::array<double, kMods> head_preference(const std::array<double, kMods>& nmas, const Avail& avail);
std::array<double, kMods> head_preference(const AttentionTrace& tr, int layer, int head, bool post_hook = false);
std::array<double, kMods> layer_preference(const std::vector<std::array<double, kMods>>& heads);

struct RouterOutput {
    double p = 0.5;
    std::array<double, kMods> g{0, 0, 0};
};

// which equality defines "this modality agrees with the ground truth" for supervision
enum class Agreement { Label, Polarity };

std::array<double, kMods> target_gate(const std::array<int, kMods>& y, int y_gt, const Avail& avail, double eps,
                                      Agreement how = Agreement::Label);
int conflict_label(const std::array<int, kMods>& y, int y_gt, const Avail& avail, Agreement how = Agreement::Label);

struct RouterHyper {
    int hidden = 128;
    double lambda_gate = 1.0, lambda_conflict = 1.0;
    double lr = 1e-3;
    double wd = 0.01;
    int batch = 32;
    int epochs = 10;
    double gate_eps = 0.01;
    double log_eps = 1e-8;
    int start_layer = 3;  // 1-based, first layer the router is applied to
    bool standardize = true;
    Agreement agreement = Agreement::Label;
    uint64_t seed = 1;
};

void to_json(nlohmann::json& j, const RouterHyper& h);
void from_json(const nlohmann::json& j, RouterHyper& h);

// x = [h_q ; h_T ; h_A ; h_V ; pi], missing modalities get zero summaries
Tensor router_input(const Tensor& hq, const Tensor& pooled, const Avail& avail, const std::array<double, kMods>& pi);
Tensor router_input(const AttentionTrace& tr, int layer);

class Router {
public:
    Router(int in_dim, const RouterHyper& h);

    RouterOutput forward(const Tensor& x, const Avail& avail) const;
    // taped version used for training and gradient checks
    struct Out {
        Var p, g;
    };
    Out build(Tape& tape, const Tensor& x, const Avail& avail, bool train);

    std::vector<Param*> params();
    int in_dim() const { return in_dim_; }
    const RouterHyper& hyper() const { return h_; }
    Tensor& mean() { return mu_; }
    Tensor& stdev() { return sd_; }
    uint64_t backbone_hash = 0;

    void zero_heads();  // p = 0.5, uniform gate
    std::string encode() const;
    static Router decode(const std::string& bytes, const Backbone* against = nullptr);
    void save(const std::string& path) const;
    static Router load(const std::string& path, const Backbone* against = nullptr);

private:
    int in_dim_;
    RouterHyper h_;
    Tensor mu_, sd_;
    Param w1_, b1_, wp_, bp_, wg_, bg_;
    Out build_impl(Tape& tape, const Tensor& x, const Avail& avail, bool train) const;
};

// sum over layers of  lambda_g * KL(g* || g) + lambda_c * BCE(p*, p)
Var router_loss(const std::vector<Router::Out>& outs, double pstar, const std::array<double, kMods>& gstar, double lg, double lc,
                double eps);
double kl_div(const std::array<double, kMods>& P, const std::array<double, kMods>& Q, double eps = 1e-8);
double bce(double y, double p, double eps = 1e-8);

struct RouterExample {
    std::vector<Tensor> x;  // one feature row per routed layer
    Avail avail{};
    double pstar = 0.0;
    std::array<double, kMods> gstar{0, 0, 0};
};

RouterExample make_router_example(const Backbone& bb, const Sample& s, const RouterHyper& h);

struct RouterTrainReport {
    std::vector<double> epoch_loss;
    std::vector<double> valid_loss;  // per epoch, empty without a validation set
    uint64_t backbone_hash_before = 0, backbone_hash_after = 0;
};

RouterTrainReport train_router(Router& r, const std::vector<RouterExample>& train, const std::vector<RouterExample>& valid);
double mean_router_loss(const Router& r, const std::vector<RouterExample>& xs);

std::vector<RouterExample> router_examples(const Backbone& bb, const std::vector<const Sample*>& xs, const RouterHyper& h);
Router fit_router(const Backbone& bb, const std::vector<const Sample*>& train, const std::vector<const Sample*>& valid,
                  const RouterHyper& h, RouterTrainReport* rep = nullptr);

}  // namespace mms
