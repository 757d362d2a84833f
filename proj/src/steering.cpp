#include "mmsteer/steering.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace mms {

using nlohmann::json;

void SteeringConfig::validate(int num_heads, int num_layers) const {
    auto bad = [](const std::string& m) { throw Error(ErrorKind::Config, m); };
    if (!(tau > 0 && tau <= 1)) bad("tau must be in (0, 1]");
    if (!(eta >= 0 && eta <= 1)) bad("eta must be in [0, 1]");
    if (K < 1 || K > num_heads) bad("K must be between 1 and the head count");
    if (!(psi_hat > 0 && psi_hat < 1)) bad("psi_hat must be in (0, 1)");
    if (!(percentile > 0 && percentile < 100)) bad("percentile must be in (0, 100)");
    if (start_layer < 1 || start_layer > num_layers) bad("start layer outside the backbone");
    if (eps_a < 0 || eps_b < 0) bad("smoothing constants must be non-negative");
}

void to_json(json& j, const SteeringConfig& c) {
    j = json{{"tau", c.tau},         {"eta", c.eta},         {"K", c.K},
             {"gamma", c.gamma},     {"beta", c.beta},       {"start_layer", c.start_layer},
             {"psi_hat", c.psi_hat}, {"percentile", c.percentile}, {"eps_a", c.eps_a},
             {"eps_b", c.eps_b},     {"use_inter", c.use_inter},   {"use_intra", c.use_intra}};
}

void from_json(const json& j, SteeringConfig& c) {
    SteeringConfig d;
    auto get = [&](const char* k, auto& dst) {
        if (j.contains(k)) j.at(k).get_to(dst);
    };
    get("tau", d.tau);
    get("eta", d.eta);
    get("K", d.K);
    get("gamma", d.gamma);
    get("beta", d.beta);
    get("start_layer", d.start_layer);
    get("psi_hat", d.psi_hat);
    get("percentile", d.percentile);
    get("eps_a", d.eps_a);
    get("eps_b", d.eps_b);
    get("use_inter", d.use_inter);
    get("use_intra", d.use_intra);
    c = d;
}

double jsd(const std::vector<double>& P, const std::vector<double>& Q, double eps) {
    if (P.size() != Q.size()) throw Error(ErrorKind::Dimension, "jsd over different supports");
    double s = 0;
    for (std::size_t i = 0; i < P.size(); ++i) {
        double M = 0.5 * (P[i] + Q[i]);
        if (P[i] > 0) s += 0.5 * P[i] * (std::log(P[i]) - std::log(M + eps));
        if (Q[i] > 0) s += 0.5 * Q[i] * (std::log(Q[i]) - std::log(M + eps));
    }
    return std::max(0.0, s);
}

double jsd(const std::array<double, kMods>& P, const std::array<double, kMods>& Q, double eps) {
    return jsd(std::vector<double>(P.begin(), P.end()), std::vector<double>(Q.begin(), Q.end()), eps);
}

std::vector<int> select_layers(const std::vector<std::pair<int, double>>& p_by_layer, int start_layer, double tau) {
    std::vector<int> out;
    for (auto [l, p] : p_by_layer)
        if (l >= start_layer && p > tau) out.push_back(l);
    return out;
}

std::vector<int> select_heads(const std::vector<std::array<double, kMods>>& pi, const std::array<double, kMods>& g, int K) {
    std::vector<double> js;
    for (const auto& p : pi) js.push_back(jsd(p, g));
    std::vector<int> idx(pi.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return js[a] > js[b]; });
    idx.resize(std::min<std::size_t>(idx.size(), std::size_t(std::max(K, 0))));
    return idx;
}

std::array<double, kMods> inter_bias(const std::array<double, kMods>& pi, const std::array<double, kMods>& g, double p, double eta,
                                     double eps_a) {
    std::array<double, kMods> b{0, 0, 0};
    double a = eta * p;
    for (int m = 0; m < kMods; ++m) {
        double ph = (1.0 - a) * pi[m] + a * g[m];
        b[m] = std::log((ph + eps_a) / (pi[m] + eps_a));
    }
    return b;
}

std::vector<double> importance_scores(const Backbone& bb, const Sample& s, const InputView& view) {
    auto tk = bb.gather(s, view);
    Tape tape;
    tape.reserve(40 * bb.config().L * bb.config().H);
    auto g = const_cast<Backbone&>(bb).build(tape, tk, Backbone::Mode::EmbedGrad, nullptr, nullptr);
    int top = argmax_logits(tape.value(g.logits)).label;
    Tensor pick(1, bb.config().classes);
    pick.v[top] = 1.0;
    Var y = sum(mul(g.logits, tape.constant(pick)));
    tape.backward(y);
    Tensor G = tape.grad(g.embed);
    const Tensor& E = tape.value(g.embed);
    std::vector<double> I(E.rows(), 0.0);
    double tot = 0;
    for (std::size_t k = 0; k < E.rows(); ++k) {
        double dot = 0;
        for (std::size_t j = 0; j < E.cols(); ++j) dot += G(k, j) * E(k, j);
        I[k] = std::abs(dot);
        tot += I[k];
    }
    if (tot == 0.0) {
        std::fill(I.begin(), I.end(), 1.0 / double(I.size()));
        return I;
    }
    for (double& x : I) x /= tot + 1e-12;
    return I;
}

double percentile_linear(std::vector<double> xs, double P) {
    if (xs.empty()) throw Error(ErrorKind::Degenerate, "percentile of nothing");
    std::sort(xs.begin(), xs.end());
    double pos = P / 100.0 * double(xs.size() - 1);
    std::size_t lo = std::size_t(std::floor(pos));
    std::size_t hi = std::min(lo + 1, xs.size() - 1);
    double f = pos - double(lo);
    return xs[lo] + f * (xs[hi] - xs[lo]);
}

std::vector<int> significant_set(const std::vector<double>& sc, double P) {
    std::vector<int> out;
    if (sc.empty()) return out;
    double thr = percentile_linear(sc, P);
    double mx = *std::max_element(sc.begin(), sc.end());
    thr = std::min(thr, mx);  // guard against rounding above the largest score
    for (std::size_t k = 0; k < sc.size(); ++k)
        if (sc[k] >= thr) out.push_back(int(k));
    return out;
}

std::vector<double> intra_bias(const std::vector<double>& row, const std::vector<int>& sig, double psi_hat, double eps_b) {
    std::vector<double> d(row.size(), 0.0);
    if (sig.empty()) return d;
    double psi = 0;
    for (int k : sig) psi += row.at(k);
    if (psi >= psi_hat) return d;
    double v = std::log((psi_hat + eps_b) / (psi + eps_b));
    for (int k : sig) d[k] = v;
    return d;
}

std::vector<double> steer(const std::vector<double>& s, const Layout& layout, const std::array<double, kMods>& b,
                          const std::vector<double>& delta, double gamma, double beta) {
    if (!delta.empty() && delta.size() != s.size()) throw Error(ErrorKind::Dimension, "intra bias length mismatch");
    std::vector<double> out = s;
    for (std::size_t k = 0; k < s.size(); ++k) {
        int m = layout.modality_of(int(k));
        if (m >= 0) out[k] += gamma * b[m];
        if (!delta.empty()) out[k] += beta * delta[k];
    }
    return out;
}

std::array<double, kMods> attention_budget(const AttentionTrace& tr, int layer, bool post_hook) {
    std::array<double, kMods> out{0, 0, 0};
    int H = int(tr.post[layer].size());
    for (int h = 0; h < H; ++h) {
        auto m = tr.mass(layer, h, post_hook);
        for (int i = 0; i < kMods; ++i) out[i] += m[i];
    }
    double z = out[0] + out[1] + out[2];
    if (z > 0)
        for (double& x : out) x /= z;
    return out;
}

std::vector<int> SteerResult::steered_layers() const {
    std::vector<int> out;
    for (const auto& l : layers)
        if (l.steered) out.push_back(l.layer);
    return out;
}

namespace {
uint64_t sample_seed(uint64_t seed, const std::string& id) { return fnv1a(id, fnv1a(std::to_string(seed))); }
}  // namespace

SteerResult steered_infer(const Backbone& bb, const Router& rt, const Sample& s, const SteeringConfig& cfg, const RandomSteering* random,
                          const InputView& view) {
    const auto& bc = bb.config();
    cfg.validate(bc.H, bc.L);
    if (rt.in_dim() != 4 * bc.d + kMods) throw Error(ErrorKind::Compatibility, "router and backbone widths differ");
    if (rt.backbone_hash != 0 && rt.backbone_hash != bb.frozen_hash())
        throw Error(ErrorKind::Compatibility, "router was trained against a different backbone");
    SteerResult res;
    Rng rng(random ? sample_seed(random->seed, s.id) : 0);
    bool sig_ready = false;
    const int H = bc.H;
    const int l0 = cfg.start_layer - 1;

    AttentionHook hook = [&](const LayerContext& c) -> std::vector<Tensor> {
        if (c.layer < l0) return {};
        const Layout& lay = *c.layout;
        Avail av{};
        for (int m = 0; m < kMods; ++m) av[m] = lay.count(m) > 0;
        std::vector<std::array<double, kMods>> pih(H);
        for (int h = 0; h < H; ++h) {
            std::array<double, kMods> nm{0, 0, 0};
            const Tensor& a = (*c.attn)[h];
            for (int m = 0; m < kMods; ++m) {
                if (!av[m]) continue;
                double sm = 0;
                for (int k = lay.begin[m]; k < lay.end[m]; ++k) sm += a.v[k];
                nm[m] = sm / lay.count(m);
            }
            pih[h] = head_preference(nm, av);
        }
        RouterOutput ro = rt.forward(router_input(*c.hq, *c.pooled, av, layer_preference(pih)), av);
        LayerDiag dg;
        dg.layer = c.layer + 1;
        dg.p = ro.p;
        dg.g = ro.g;
        std::array<double, kMods> gate = ro.g;
        if (random) {
            dg.steered = rng.uniform() < random->rate;
            double n = count_avail(av);
            for (int m = 0; m < kMods; ++m) gate[m] = av[m] ? 1.0 / n : 0.0;
            std::vector<int> idx(H);
            std::iota(idx.begin(), idx.end(), 0);
            rng.shuffle(idx.begin(), idx.end());
            idx.resize(std::min(cfg.K, H));
            std::sort(idx.begin(), idx.end());
            dg.heads = idx;
        } else {
            dg.steered = ro.p > cfg.tau;
            dg.heads = select_heads(pih, gate, cfg.K);
        }
        std::vector<Tensor> out;
        if (dg.steered) {
            if (cfg.use_intra && !sig_ready && av[V]) {
                auto I = importance_scores(bb, s, view);
                std::vector<double> iv(I.begin() + lay.begin[V], I.begin() + lay.end[V]);
                for (int k : significant_set(iv, cfg.percentile)) res.significant.push_back(lay.begin[V] + k);
                sig_ready = true;
            }
            out.assign(H, Tensor());
            for (int h : dg.heads) {
                std::array<double, kMods> b{0, 0, 0};
                if (cfg.use_inter) b = inter_bias(pih[h], gate, ro.p, cfg.eta, cfg.eps_a);
                std::vector<double> delta;
                if (cfg.use_intra) delta = intra_bias((*c.attn)[h].v, res.significant, cfg.psi_hat, cfg.eps_b);
                std::vector<double> zero(lay.keys(), 0.0);
                auto adj = steer(zero, lay, b, delta, cfg.use_inter ? cfg.gamma : 0.0, cfg.beta);
                out[h] = Tensor::row(std::move(adj));
            }
        }
        res.layers.push_back(std::move(dg));
        return out;
    };
    ForwardResult fr = bb.forward(s, {hook}, view);
    res.logits = fr.logits;
    res.pred = argmax_logits(fr.logits);
    for (auto& d : res.layers) {
        d.budget_pre = attention_budget(fr.trace, d.layer - 1, false);
        d.budget_post = attention_budget(fr.trace, d.layer - 1, true);
    }
    res.trace = std::move(fr.trace);
    return res;
}

}  // namespace mms
