#include "mmsteer/router.hpp"

#include <cmath>
#include <iostream>
#include <limits>
#include <numeric>

#include "mmsteer/checkpoint.hpp"

namespace mms {

using nlohmann::json;

std::array<double, kMods> head_preference(const std::array<double, kMods>& nmas, const Avail& avail) {
    if (count_avail(avail) == 0) throw Error(ErrorKind::Degenerate, "no modality available for a preference");
    double mx = -1e300;
    for (int m = 0; m < kMods; ++m)
        if (avail[m]) mx = std::max(mx, nmas[m]);
    std::array<double, kMods> out{0, 0, 0};
    double z = 0;
    for (int m = 0; m < kMods; ++m)
        if (avail[m]) {
            out[m] = std::exp(nmas[m] - mx);
            z += out[m];
        }
    for (double& x : out) x /= z;
    return out;
}

std::array<double, kMods> head_preference(const AttentionTrace& tr, int layer, int head, bool post_hook) {
    auto mass = tr.mass(layer, head, post_hook);
    std::array<double, kMods> nm{0, 0, 0};
    Avail av{};
    for (int m = 0; m < kMods; ++m) {
        int c = tr.layout.count(m);
        av[m] = c > 0;
        if (c > 0) nm[m] = mass[m] / c;
    }
    return head_preference(nm, av);
}

std::array<double, kMods> layer_preference(const std::vector<std::array<double, kMods>>& heads) {
    if (heads.empty()) throw Error(ErrorKind::Degenerate, "no heads");
    std::array<double, kMods> out{0, 0, 0};
    for (const auto& h : heads)
        for (int m = 0; m < kMods; ++m) out[m] += h[m];
    for (double& x : out) x /= double(heads.size());
    return out;
}

namespace {
bool agrees(int y, int y_gt, Agreement how) { return how == Agreement::Label ? y == y_gt : polarity(y) == polarity(y_gt); }
}  // namespace

std::array<double, kMods> target_gate(const std::array<int, kMods>& y, int y_gt, const Avail& avail, double eps, Agreement how) {
    if (count_avail(avail) == 0) throw Error(ErrorKind::Degenerate, "target gate needs an available modality");
    if (!(eps > 0)) throw Error(ErrorKind::Config, "gate smoothing must be positive");
    std::array<double, kMods> g{0, 0, 0};
    double z = 0;
    for (int m = 0; m < kMods; ++m)
        if (avail[m]) {
            g[m] = (agrees(y[m], y_gt, how) ? 1.0 : 0.0) + eps;
            z += g[m];
        }
    for (double& x : g) x /= z;
    return g;
}

int conflict_label(const std::array<int, kMods>& y, int y_gt, const Avail& avail, Agreement how) {
    for (int m = 0; m < kMods; ++m)
        if (avail[m] && !agrees(y[m], y_gt, how)) return 1;
    return 0;
}

void to_json(json& j, const RouterHyper& h) {
    j = json{{"hidden", h.hidden},
             {"lambda_gate", h.lambda_gate},
             {"lambda_conflict", h.lambda_conflict},
             {"lr", h.lr},
             {"wd", h.wd},
             {"batch", h.batch},
             {"epochs", h.epochs},
             {"gate_eps", h.gate_eps},
             {"log_eps", h.log_eps},
             {"start_layer", h.start_layer},
             {"standardize", h.standardize},
             {"agreement", h.agreement == Agreement::Label ? "label" : "polarity"},
             {"seed", h.seed}};
}

void from_json(const json& j, RouterHyper& h) {
    RouterHyper d;
    auto get = [&](const char* k, auto& dst) {
        if (j.contains(k)) j.at(k).get_to(dst);
    };
    get("hidden", d.hidden);
    get("lambda_gate", d.lambda_gate);
    get("lambda_conflict", d.lambda_conflict);
    get("lr", d.lr);
    get("wd", d.wd);
    get("batch", d.batch);
    get("epochs", d.epochs);
    get("gate_eps", d.gate_eps);
    get("log_eps", d.log_eps);
    get("start_layer", d.start_layer);
    get("standardize", d.standardize);
    get("seed", d.seed);
    if (j.contains("agreement")) {
        std::string a = j.at("agreement");
        if (a != "label" && a != "polarity") throw Error(ErrorKind::Config, "agreement must be label or polarity");
        d.agreement = a == "label" ? Agreement::Label : Agreement::Polarity;
    }
    h = d;
}

Tensor router_input(const Tensor& hq, const Tensor& pooled, const Avail& avail, const std::array<double, kMods>& pi) {
    std::size_t d = hq.cols();
    if (pooled.rows() != kMods || pooled.cols() != d) throw Error(ErrorKind::Dimension, "pooled summaries do not match width");
    Tensor x(1, 4 * d + kMods);
    for (std::size_t j = 0; j < d; ++j) x.v[j] = hq.v[j];
    for (int m = 0; m < kMods; ++m)
        if (avail[m])
            for (std::size_t j = 0; j < d; ++j) x.v[(m + 1) * d + j] = pooled(m, j);
    for (int m = 0; m < kMods; ++m) x.v[4 * d + m] = pi[m];
    return x;
}

Tensor router_input(const AttentionTrace& tr, int layer) {
    std::vector<std::array<double, kMods>> hp;
    for (std::size_t h = 0; h < tr.pre[layer].size(); ++h) hp.push_back(head_preference(tr, layer, int(h), false));
    Avail av{};
    for (int m = 0; m < kMods; ++m) av[m] = tr.layout.count(m) > 0;
    return router_input(tr.hq[layer], tr.pooled, av, layer_preference(hp));
}

// ------------------------------------------------------------ router

Router::Router(int in_dim, const RouterHyper& h) : in_dim_(in_dim), h_(h) {
    if (in_dim <= 0 || h.hidden <= 0) throw Error(ErrorKind::Config, "bad router sizes");
    Rng rng(h.seed * 0xd1342543de82ef95ULL + 5);
    auto U = [&](std::size_t r, std::size_t c, double b) {
        Tensor t(r, c);
        for (double& x : t.v) x = (2.0 * rng.uniform() - 1.0) * b;
        return t;
    };
    double b1 = 1.0 / std::sqrt(double(in_dim)), b2 = 1.0 / std::sqrt(double(h.hidden));
    w1_ = Param("trunk.w", U(in_dim, h.hidden, b1));
    b1_ = Param("trunk.b", U(1, h.hidden, b1));
    wp_ = Param("conflict.w", U(h.hidden, 1, b2));
    bp_ = Param("conflict.b", U(1, 1, b2));
    wg_ = Param("gate.w", U(h.hidden, kMods, b2));
    bg_ = Param("gate.b", U(1, kMods, b2));
    mu_ = Tensor(1, in_dim, 0.0);
    sd_ = Tensor(1, in_dim, 1.0);
}

std::vector<Param*> Router::params() { return {&w1_, &b1_, &wp_, &bp_, &wg_, &bg_}; }

void Router::zero_heads() {
    for (Param* p : {&wp_, &bp_, &wg_, &bg_}) std::fill(p->w.v.begin(), p->w.v.end(), 0.0);
}

Router::Out Router::build(Tape& tape, const Tensor& x, const Avail& avail, bool train) { return build_impl(tape, x, avail, train); }

Router::Out Router::build_impl(Tape& tape, const Tensor& x, const Avail& avail, bool train) const {
    if (int(x.cols()) != in_dim_ || x.rows() != 1) throw Error(ErrorKind::Dimension, "router input has the wrong width");
    if (count_avail(avail) == 0) throw Error(ErrorKind::Degenerate, "router needs an available modality");
    auto P = [&](const Param& p) { return train ? tape.param(const_cast<Param&>(p)) : tape.weight(p.w); };
    Tensor xs = x;
    for (std::size_t j = 0; j < xs.size(); ++j) xs.v[j] = (xs.v[j] - mu_.v[j]) / sd_.v[j];
    Var h = tanh(add(matmul(tape.constant(std::move(xs)), P(w1_)), P(b1_)));
    Var p = sigmoid(add(matmul(h, P(wp_)), P(bp_)));
    Tensor mask(1, kMods);
    for (int m = 0; m < kMods; ++m) mask.v[m] = avail[m] ? 0.0 : -std::numeric_limits<double>::infinity();
    Var g = masked_softmax(add(matmul(h, P(wg_)), P(bg_)), mask);
    return {p, g};
}

RouterOutput Router::forward(const Tensor& x, const Avail& avail) const {
    Tape tape;
    Out o = build_impl(tape, x, avail, false);
    RouterOutput r;
    r.p = tape.value(o.p).v[0];
    for (int m = 0; m < kMods; ++m) r.g[m] = tape.value(o.g).v[m];
    return r;
}

double kl_div(const std::array<double, kMods>& P, const std::array<double, kMods>& Q, double eps) {
    double s = 0;
    for (int m = 0; m < kMods; ++m)
        if (P[m] > 0) s += P[m] * (std::log(P[m]) - std::log(Q[m] + eps));
    return s;
}

double bce(double y, double p, double eps) { return -(y * std::log(p + eps) + (1.0 - y) * std::log(1.0 - p + eps)); }

Var router_loss(const std::vector<Router::Out>& outs, double pstar, const std::array<double, kMods>& gstar, double lg, double lc,
                double eps) {
    if (outs.empty()) throw Error(ErrorKind::Usage, "router loss over no layers");
    Tape& t = *outs[0].p.tape;
    double ent = 0;  // sum g* log g*, with 0 log 0 = 0
    for (double x : gstar)
        if (x > 0) ent += x * std::log(x);
    Tensor gs = Tensor::row({gstar[0], gstar[1], gstar[2]});
    Var total;
    for (const auto& o : outs) {
        Var cross = sum(mul(log(o.g, eps), t.constant(gs)));
        Var kl = add_bias(scale(cross, -1.0), Tensor(1, 1, ent));
        Var lp = log(o.p, eps);
        Var lq = log(add_bias(scale(o.p, -1.0), Tensor(1, 1, 1.0)), eps);
        Var b = scale(add(scale(lp, pstar), scale(lq, 1.0 - pstar)), -1.0);
        Var term = add(scale(kl, lg), scale(b, lc));
        total = total.tape ? add(total, term) : term;
    }
    return total;
}

std::string Router::encode() const {
    Checkpoint ck;
    ck.kind = "router";
    ck.meta = {{"hyper", h_}, {"in_dim", in_dim_}, {"backbone_hash", hex64(backbone_hash)}};
    for (const Param* p : const_cast<Router*>(this)->params()) ck.arrays.emplace_back(p->name, p->w);
    ck.arrays.emplace_back("input.mean", mu_);
    ck.arrays.emplace_back("input.std", sd_);
    return encode_checkpoint(ck);
}

Router Router::decode(const std::string& bytes, const Backbone* against) {
    Checkpoint ck = decode_checkpoint(bytes, "router");
    Router r(ck.meta.at("in_dim").get<int>(), ck.meta.at("hyper").get<RouterHyper>());
    for (Param* p : r.params()) {
        const Tensor& t = ck.get(p->name);
        if (!t.same_shape(p->w)) throw Error(ErrorKind::Compatibility, "shape mismatch for router " + p->name);
        p->w = t;
    }
    r.mu_ = ck.get("input.mean");
    r.sd_ = ck.get("input.std");
    r.backbone_hash = std::stoull(ck.meta.at("backbone_hash").get<std::string>(), nullptr, 16);
    if (against) {
        if (r.in_dim_ != 4 * against->config().d + kMods)
            throw Error(ErrorKind::Compatibility, "router input width does not match the backbone");
        if (r.backbone_hash != against->hash())
            std::cerr << "warning: router was trained against backbone " << hex64(r.backbone_hash) << ", loaded with "
                      << hex64(against->hash()) << "\n";
    }
    return r;
}

void Router::save(const std::string& path) const { write_file(path, encode()); }

Router Router::load(const std::string& path, const Backbone* against) { return decode(read_file(path), against); }

// ------------------------------------------------------------ training

RouterExample make_router_example(const Backbone& bb, const Sample& s, const RouterHyper& h) {
    RouterExample ex;
    ForwardResult fr = bb.forward(s);
    int L = bb.config().L;
    if (h.start_layer < 1 || h.start_layer > L) throw Error(ErrorKind::Config, "router start layer outside the backbone");
    for (int l = h.start_layer - 1; l < L; ++l) ex.x.push_back(router_input(fr.trace, l));
    ex.avail = s.avail;
    ex.pstar = conflict_label(s.y, s.y_gt, s.avail, h.agreement);
    ex.gstar = target_gate(s.y, s.y_gt, s.avail, h.gate_eps, h.agreement);
    return ex;
}

std::vector<RouterExample> router_examples(const Backbone& bb, const std::vector<const Sample*>& xs, const RouterHyper& h) {
    std::vector<RouterExample> out;
    out.reserve(xs.size());
    for (const Sample* s : xs) out.push_back(make_router_example(bb, *s, h));
    return out;
}

namespace {
double example_loss(Router& r, const RouterExample& ex, bool train, double scale_by) {
    Tape tape;
    std::vector<Router::Out> outs;
    for (const auto& x : ex.x) outs.push_back(r.build(tape, x, ex.avail, train));
    const auto& h = r.hyper();
    Var loss = router_loss(outs, ex.pstar, ex.gstar, h.lambda_gate, h.lambda_conflict, h.log_eps);
    double v = tape.value(loss).v[0];
    if (train) tape.backward(scale(loss, scale_by));
    return v;
}
}  // namespace

double mean_router_loss(const Router& r, const std::vector<RouterExample>& xs) {
    if (xs.empty()) return 0.0;
    double s = 0;
    for (const auto& ex : xs) s += example_loss(const_cast<Router&>(r), ex, false, 1.0);
    return s / double(xs.size());
}

RouterTrainReport train_router(Router& r, const std::vector<RouterExample>& train, const std::vector<RouterExample>& valid) {
    if (train.empty()) throw Error(ErrorKind::Usage, "no router training examples");
    const auto& h = r.hyper();
    AdamW opt;
    opt.lr = h.lr;
    opt.wd = h.wd;
    auto ps = r.params();
    for (Param* p : ps) p->zero_grad();
    Rng rng(h.seed * 0x9e3779b97f4a7c15ULL + 13);
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    RouterTrainReport rep;
    for (int ep = 0; ep < h.epochs; ++ep) {
        rng.shuffle(order.begin(), order.end());
        double tot = 0;
        for (std::size_t b = 0; b < order.size(); b += h.batch) {
            std::size_t e = std::min(order.size(), b + std::size_t(h.batch));
            for (std::size_t i = b; i < e; ++i) tot += example_loss(r, train[order[i]], true, 1.0 / double(e - b));
            opt.step(ps);
            for (Param* p : ps) p->zero_grad();
        }
        double m = tot / double(order.size());
        if (!std::isfinite(m)) throw Error(ErrorKind::TrainingFailure, "router loss is not finite");
        rep.epoch_loss.push_back(m);
        if (!valid.empty()) rep.valid_loss.push_back(mean_router_loss(r, valid));
    }
    return rep;
}

Router fit_router(const Backbone& bb, const std::vector<const Sample*>& train, const std::vector<const Sample*>& valid,
                  const RouterHyper& h, RouterTrainReport* rep) {
    if (!bb.frozen()) throw Error(ErrorKind::Usage, "router training needs a frozen backbone");
    uint64_t before = bb.hash();
    auto tr = router_examples(bb, train, h);
    auto va = router_examples(bb, valid, h);
    Router r(4 * bb.config().d + kMods, h);
    r.backbone_hash = before;
    if (h.standardize) {
        std::size_t D = r.in_dim(), n = 0;
        std::vector<double> s1(D, 0.0), s2(D, 0.0);
        for (const auto& ex : tr)
            for (const auto& x : ex.x) {
                for (std::size_t j = 0; j < D; ++j) s1[j] += x.v[j];
                ++n;
            }
        for (std::size_t j = 0; j < D; ++j) r.mean().v[j] = s1[j] / double(n);
        for (const auto& ex : tr)
            for (const auto& x : ex.x)
                for (std::size_t j = 0; j < D; ++j) {
                    double dlt = x.v[j] - r.mean().v[j];
                    s2[j] += dlt * dlt;
                }
        for (std::size_t j = 0; j < D; ++j) r.stdev().v[j] = std::sqrt(s2[j] / double(std::max<std::size_t>(n - 1, 1))) + 1e-6;
    }
    RouterTrainReport rr = train_router(r, tr, va);
    rr.backbone_hash_before = before;
    rr.backbone_hash_after = bb.hash();
    if (rep) *rep = rr;
    return r;
}

}  // namespace mms
