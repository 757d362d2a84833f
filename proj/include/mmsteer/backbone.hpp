#pragma once

#include <array>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "mmsteer/synthgen.hpp"
#include "mmsteer/tensor.hpp"

namespace mms {

struct BackboneConfig {
    int L = 6, H = 4, d = 64, mlp = 128;
    int n_T = 12, n_A = 12, n_V = 64;
    double rho = 0.75;
    int classes = kClasses;
    int feat_dim = 16;
    uint64_t seed = 1;

    void validate() const;
    int head_dim() const { return d / H; }
};

void to_json(nlohmann::json& j, const BackboneConfig& c);
void from_json(const nlohmann::json& j, BackboneConfig& c);

// key positions: modality tokens in T, A, V order, then the decision query
struct Layout {
    std::array<int, kMods> begin{0, 0, 0}, end{0, 0, 0};
    int q = 0;
    int keys() const { return q + 1; }
    int count(int m) const { return end[m] - begin[m]; }
    int modality_of(int k) const;  // -1 for the query's own key
};

// which parts of a sample are fed in
struct InputView {
    std::optional<Avail> avail;                  // intersected with the sample's own
    const std::vector<int>* video_keep = nullptr;  // subset of video token indices
};

struct LayerContext {
    int layer = 0;  // 0-based
    const Layout* layout = nullptr;
    Avail avail{};
    const std::vector<Tensor>* scores = nullptr;  // per head, 1 x keys, before any hook
    const std::vector<Tensor>* attn = nullptr;    // softmax of scores
    const Tensor* hq = nullptr;                   // query state entering the layer, 1 x d
    const Tensor* pooled = nullptr;               // 3 x d modality means (zero rows when absent)
};

// returns one additive bias row per head; an empty tensor leaves that head alone
using AttentionHook = std::function<std::vector<Tensor>(const LayerContext&)>;
// narrower per-head form: (layer, head, query index, score row) -> bias row
using HeadHook = std::function<Tensor(int, int, int, const Tensor&)>;
AttentionHook from_head_hook(HeadHook h, int num_heads);

struct AttentionTrace {
    Layout layout;
    Avail avail{};
    // [layer][head] rows over keys; pre = unhooked preference input, post = what the layer used
    std::vector<std::vector<Tensor>> pre, post;
    std::vector<bool> hooked;
    std::vector<Tensor> hq;  // query state entering each layer
    Tensor pooled;           // 3 x d

    // attention mass on each modality (sums over its keys) for one row
    std::array<double, kMods> mass(int layer, int head, bool post_hook = true) const;
};

struct ForwardResult {
    Tensor logits;  // 1 x classes
    AttentionTrace trace;
};

struct Prediction {
    int label = 0;
    double logit = 0.0;
};

Prediction argmax_logits(const Tensor& logits);

class Backbone {
public:
    explicit Backbone(BackboneConfig c);

    // token matrix (present tokens only) and modality id per row
    struct Tokens {
        Tensor x;
        std::vector<int> mods;
        Layout layout;
        Avail avail{};
        std::optional<Tensor> embed;  // normalized token states to use instead of computing them
    };
    Tokens gather(const Sample& s, const InputView& view = {}, bool allow_empty = false) const;
    // E = X W_e + b_e + tag; the input-embedding vectors
    std::pair<Tensor, Layout> embed(const Sample& s, const InputView& view = {}) const;

    ForwardResult forward(const Sample& s, const std::vector<AttentionHook>& hooks = {}, const InputView& view = {}) const;
    // query-only pass with every modality withheld
    Tensor forward_empty() const;
    Prediction predict(const Sample& s, const InputView& view = {}) const;

    struct Graph {
        Var logits;
        Var embed;  // token states after the input norm
        Layout layout;
    };
    enum class Mode { Train, Frozen, EmbedGrad };
    Graph build(Tape& tape, const Tokens& tk, Mode mode, const std::vector<AttentionHook>* hooks, AttentionTrace* trace);

    std::vector<Param*> params();
    const BackboneConfig& config() const { return c_; }
    bool frozen() const { return frozen_; }
    void freeze() {
        frozen_ = true;
        frozen_hash_ = hash();
    }
    uint64_t hash() const;
    // hash taken at freeze time
    uint64_t frozen_hash() const { return frozen_ ? frozen_hash_ : hash(); }

    void save(const std::string& path) const;
    static Backbone load(const std::string& path);
    std::string encode() const;
    static Backbone decode(const std::string& bytes);

private:
    struct LayerW {
        Param ln1g, ln1b, wo, bo, ln2g, ln2b, w1, b1, w2, b2;
        std::vector<Param> wq, wk, wv;
    };
    BackboneConfig c_;
    Param we_, be_, tag_, q0_, lntg_, lntb_, lnfg_, lnfb_, wh_, bh_;
    std::vector<LayerW> layers_;
    bool frozen_ = false;
    uint64_t frozen_hash_ = 0;

    Graph build_impl(Tape& tape, const Tokens& tk, Mode mode, const std::vector<AttentionHook>* hooks, AttentionTrace* trace) const;
    std::vector<const Param*> cparams() const;
};

struct PretrainConfig {
    int epochs = 6;
    int batch = 32;
    double lr = 2e-3;
    double wd = 0.01;
    double p_text_only = 0.3;
    double p_drop_video = 0.2;
    double min_accuracy = 0.40;  // below this on the held-out set -> failure
    uint64_t seed = 1;
};

void to_json(nlohmann::json& j, const PretrainConfig& c);
void from_json(const nlohmann::json& j, PretrainConfig& c);

struct PretrainReport {
    std::vector<double> epoch_loss;
    double heldout_acc = 0.0;
    double seconds = 0.0;
};

PretrainReport pretrain(Backbone& bb, const std::vector<const Sample*>& train, const std::vector<const Sample*>& heldout,
                        const PretrainConfig& cfg);

double accuracy(const Backbone& bb, const std::vector<const Sample*>& xs, const InputView& view = {});

}  // namespace mms
