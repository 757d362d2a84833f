#include "mmsteer/backbone.hpp"

#include <chrono>
#include <cmath>
#include <cstring>
#include <numeric>

#include "mmsteer/checkpoint.hpp"

namespace mms {

using nlohmann::json;

void BackboneConfig::validate() const {
    auto bad = [](const std::string& m) { throw Error(ErrorKind::Config, m); };
    if (L < 4) bad("backbone needs at least 4 layers");
    if (H < 2) bad("backbone needs at least 2 heads");
    if (d <= 0 || d % H != 0) bad("model width must be a positive multiple of the head count");
    if (mlp <= 0 || feat_dim <= 0) bad("bad layer sizes");
    if (n_T <= 0 || n_A <= 0 || n_V <= n_T || n_V <= n_A) bad("video must carry more tokens than text and audio");
    if (rho < 0 || rho >= 1) bad("video redundancy must be in [0, 1)");
    if (classes != kClasses) bad("the label scheme has five classes");
}

void to_json(json& j, const BackboneConfig& c) {
    j = json{{"L", c.L},     {"H", c.H},     {"d", c.d},     {"mlp", c.mlp},       {"n_T", c.n_T}, {"n_A", c.n_A},
             {"n_V", c.n_V}, {"rho", c.rho}, {"classes", c.classes}, {"feat_dim", c.feat_dim}, {"seed", c.seed}};
}

void from_json(const json& j, BackboneConfig& c) {
    BackboneConfig d;
    auto get = [&](const char* k, auto& dst) {
        if (j.contains(k)) j.at(k).get_to(dst);
    };
    get("L", d.L);
    get("H", d.H);
    get("d", d.d);
    get("mlp", d.mlp);
    get("n_T", d.n_T);
    get("n_A", d.n_A);
    get("n_V", d.n_V);
    get("rho", d.rho);
    get("classes", d.classes);
    get("feat_dim", d.feat_dim);
    get("seed", d.seed);
    c = d;
}

int Layout::modality_of(int k) const {
    for (int m = 0; m < kMods; ++m)
        if (k >= begin[m] && k < end[m]) return m;
    return -1;
}

std::array<double, kMods> AttentionTrace::mass(int layer, int head, bool post_hook) const {
    const Tensor& r = (post_hook ? post : pre)[layer][head];
    std::array<double, kMods> out{0, 0, 0};
    for (int m = 0; m < kMods; ++m)
        for (int k = layout.begin[m]; k < layout.end[m]; ++k) out[m] += r.v[k];
    return out;
}

AttentionHook from_head_hook(HeadHook h, int num_heads) {
    return [h, num_heads](const LayerContext& c) {
        std::vector<Tensor> out;
        for (int i = 0; i < num_heads; ++i) out.push_back(h(c.layer, i, c.layout->q, (*c.scores)[i]));
        return out;
    };
}

Prediction argmax_logits(const Tensor& logits) {
    Prediction p;
    p.label = 0;
    p.logit = logits.v[0];
    for (std::size_t j = 1; j < logits.size(); ++j)
        if (logits.v[j] > p.logit) {  // strict: ties stay with the lower class
            p.logit = logits.v[j];
            p.label = int(j);
        }
    return p;
}

// ------------------------------------------------------------ construction

namespace {

Tensor uniform_init(Rng& rng, std::size_t r, std::size_t c, double bound) {
    Tensor t(r, c);
    for (double& x : t.v) x = (2.0 * rng.uniform() - 1.0) * bound;
    return t;
}

Tensor normal_init(Rng& rng, std::size_t r, std::size_t c, double sd) {
    Tensor t(r, c);
    for (double& x : t.v) x = sd * rng.normal();
    return t;
}

}  // namespace

Backbone::Backbone(BackboneConfig c) : c_(c) {
    c_.validate();
    Rng rng(c_.seed * 0x2545f4914f6cdd1dULL + 7);
    const std::size_t d = c_.d, F = c_.feat_dim, dh = c_.head_dim();
    const double bf = 1.0 / std::sqrt(double(F)), bd = 1.0 / std::sqrt(double(d)), bm = 1.0 / std::sqrt(double(c_.mlp));
    we_ = Param("embed.w", uniform_init(rng, F, d, bf));
    be_ = Param("embed.b", uniform_init(rng, 1, d, bf));
    tag_ = Param("embed.tag", normal_init(rng, kMods, d, 0.5));
    q0_ = Param("query.init", normal_init(rng, 1, d, 0.5));
    lntg_ = Param("tokens.ln.g", Tensor(1, d, 1.0));
    lntb_ = Param("tokens.ln.b", Tensor(1, d, 0.0));
    for (int l = 0; l < c_.L; ++l) {
        std::string p = "layer" + std::to_string(l) + ".";
        LayerW w;
        w.ln1g = Param(p + "ln1.g", Tensor(1, d, 1.0));
        w.ln1b = Param(p + "ln1.b", Tensor(1, d, 0.0));
        for (int h = 0; h < c_.H; ++h) {
            std::string s = ".h" + std::to_string(h);
            w.wq.emplace_back(p + "wq" + s, uniform_init(rng, d, dh, bd));
            w.wk.emplace_back(p + "wk" + s, uniform_init(rng, d, dh, bd));
            w.wv.emplace_back(p + "wv" + s, uniform_init(rng, d, dh, bd));
        }
        w.wo = Param(p + "wo", uniform_init(rng, d, d, bd));
        w.bo = Param(p + "bo", uniform_init(rng, 1, d, bd));
        w.ln2g = Param(p + "ln2.g", Tensor(1, d, 1.0));
        w.ln2b = Param(p + "ln2.b", Tensor(1, d, 0.0));
        w.w1 = Param(p + "ff.w1", uniform_init(rng, d, c_.mlp, bd));
        w.b1 = Param(p + "ff.b1", uniform_init(rng, 1, c_.mlp, bd));
        w.w2 = Param(p + "ff.w2", uniform_init(rng, c_.mlp, d, bm));
        w.b2 = Param(p + "ff.b2", uniform_init(rng, 1, d, bm));
        layers_.push_back(std::move(w));
    }
    lnfg_ = Param("final.ln.g", Tensor(1, d, 1.0));
    lnfb_ = Param("final.ln.b", Tensor(1, d, 0.0));
    wh_ = Param("head.w", uniform_init(rng, d, c_.classes, bd));
    bh_ = Param("head.b", uniform_init(rng, 1, c_.classes, bd));
}

std::vector<Param*> Backbone::params() {
    std::vector<Param*> out{&we_, &be_, &tag_, &q0_, &lntg_, &lntb_};
    for (auto& w : layers_) {
        out.push_back(&w.ln1g);
        out.push_back(&w.ln1b);
        for (int h = 0; h < c_.H; ++h) {
            out.push_back(&w.wq[h]);
            out.push_back(&w.wk[h]);
            out.push_back(&w.wv[h]);
        }
        for (Param* p : {&w.wo, &w.bo, &w.ln2g, &w.ln2b, &w.w1, &w.b1, &w.w2, &w.b2}) out.push_back(p);
    }
    for (Param* p : {&lnfg_, &lnfb_, &wh_, &bh_}) out.push_back(p);
    return out;
}

std::vector<const Param*> Backbone::cparams() const {
    auto ps = const_cast<Backbone*>(this)->params();
    return {ps.begin(), ps.end()};
}

uint64_t Backbone::hash() const {
    uint64_t h = fnv1a("backbone");
    for (const Param* p : cparams()) {
        h = fnv1a(p->name, h);
        h = fnv1a(std::string_view(reinterpret_cast<const char*>(p->w.data()), p->w.size() * sizeof(double)), h);
    }
    return h;
}

void to_json(json& j, const PretrainConfig& c) {
    j = json{{"epochs", c.epochs},           {"batch", c.batch},
             {"lr", c.lr},                   {"wd", c.wd},
             {"p_text_only", c.p_text_only}, {"p_drop_video", c.p_drop_video},
             {"min_accuracy", c.min_accuracy}, {"seed", c.seed}};
}

void from_json(const json& j, PretrainConfig& c) {
    PretrainConfig d;
    auto get = [&](const char* k, auto& dst) {
        if (j.contains(k)) j.at(k).get_to(dst);
    };
    get("epochs", d.epochs);
    get("batch", d.batch);
    get("lr", d.lr);
    get("wd", d.wd);
    get("p_text_only", d.p_text_only);
    get("p_drop_video", d.p_drop_video);
    get("min_accuracy", d.min_accuracy);
    get("seed", d.seed);
    c = d;
}

// ------------------------------------------------------------ forward

Backbone::Tokens Backbone::gather(const Sample& s, const InputView& view, bool allow_empty) const {
    Tokens tk;
    tk.avail = s.avail;
    if (view.avail)
        for (int m = 0; m < kMods; ++m) tk.avail[m] = tk.avail[m] && (*view.avail)[m];
    std::array<std::vector<int>, kMods> rows;
    std::size_t n = 0;
    for (int m = 0; m < kMods; ++m) {
        if (!tk.avail[m]) continue;
        if (!s.tokens[m]) throw Error(ErrorKind::Usage, s.id + ": available modality without tokens");
        if (int(s.tokens[m]->cols()) != c_.feat_dim) throw Error(ErrorKind::Dimension, s.id + ": token width does not match the backbone");
        if (m == V && view.video_keep) {
            for (int k : *view.video_keep) {
                if (k < 0 || std::size_t(k) >= s.tokens[m]->rows()) throw Error(ErrorKind::Range, "video index out of range");
                rows[m].push_back(k);
            }
        } else {
            rows[m].resize(s.tokens[m]->rows());
            std::iota(rows[m].begin(), rows[m].end(), 0);
        }
        if (rows[m].empty()) tk.avail[m] = false;
        n += rows[m].size();
    }
    if (n == 0 && !allow_empty) throw Error(ErrorKind::Degenerate, s.id + ": every modality is missing");
    tk.x = Tensor(n, c_.feat_dim);
    std::size_t r = 0;
    for (int m = 0; m < kMods; ++m) {
        tk.layout.begin[m] = int(r);
        for (int k : rows[m]) {
            std::memcpy(&tk.x(r, 0), s.tokens[m]->data() + std::size_t(k) * c_.feat_dim, sizeof(double) * c_.feat_dim);
            tk.mods.push_back(m);
            ++r;
        }
        tk.layout.end[m] = int(r);
    }
    tk.layout.q = int(n);
    return tk;
}

std::pair<Tensor, Layout> Backbone::embed(const Sample& s, const InputView& view) const {
    Tokens tk = gather(s, view);
    Tape tape;
    Var E = add(add(matmul(tape.constant(tk.x), tape.weight(we_.w)), tape.weight(be_.w)), gather_rows(tape.weight(tag_.w), tk.mods));
    return {tape.value(E), tk.layout};
}

Backbone::Graph Backbone::build(Tape& tape, const Tokens& tk, Mode mode, const std::vector<AttentionHook>* hooks,
                                AttentionTrace* trace) {
    if (mode == Mode::Train && frozen_) throw Error(ErrorKind::Usage, "backbone is frozen");
    return build_impl(tape, tk, mode, hooks, trace);
}

Backbone::Graph Backbone::build_impl(Tape& tape, const Tokens& tk, Mode mode, const std::vector<AttentionHook>* hooks,
                                     AttentionTrace* trace) const {
    auto P = [&](const Param& p) { return mode == Mode::Train ? tape.param(const_cast<Param&>(p)) : tape.weight(p.w); };
    const int n = int(tk.x.rows());
    const int H = c_.H, d = c_.d;
    const double inv = 1.0 / std::sqrt(double(c_.head_dim()));
    Graph g;
    g.layout = tk.layout;
    Var t;
    Tensor pooled(kMods, d);
    if (n > 0) {
        Var X = tape.constant(tk.x);
        if (tk.embed) {
            t = tape.constant(*tk.embed);
        } else {
            Var E = add(add(matmul(X, P(we_)), P(be_)), gather_rows(P(tag_), tk.mods));
            t = layernorm(E, P(lntg_), P(lntb_));
        }
        // token states are scale-free after the norm, so relevance is taken here
        if (mode == Mode::EmbedGrad) t = tape.input(tape.value(t));
        g.embed = t;
        const Tensor& tv = tape.value(t);
        for (int m = 0; m < kMods; ++m) {
            int b = tk.layout.begin[m], e = tk.layout.end[m];
            if (e <= b) continue;
            for (int k = b; k < e; ++k)
                for (int j = 0; j < d; ++j) pooled(m, j) += tv(k, j);
            for (int j = 0; j < d; ++j) pooled(m, j) /= double(e - b);
        }
    }
    const bool hooked = hooks && !hooks->empty();
    if (trace) {
        trace->layout = tk.layout;
        trace->avail = tk.avail;
        trace->pre.assign(c_.L, {});
        trace->post.assign(c_.L, {});
        trace->hooked.assign(c_.L, false);
        trace->hq.clear();
        trace->pooled = pooled;
    }
    Var q = P(q0_);
    for (int l = 0; l < c_.L; ++l) {
        const LayerW& w = layers_[l];
        Var qn = layernorm(q, P(w.ln1g), P(w.ln1b));
        Var keys = n > 0 ? concat_rows({t, qn}) : qn;
        std::vector<Var> s(H);
        for (int h = 0; h < H; ++h) {
            Var qh = matmul(qn, P(w.wq[h]));
            Var u = matmul_nt(qh, P(w.wk[h]));
            s[h] = scale(matmul_nt(u, keys), inv);
        }
        std::vector<Tensor> pre_s, pre_a;
        if (hooked || trace) {
            for (int h = 0; h < H; ++h) {
                pre_s.push_back(tape.value(s[h]));
                pre_a.push_back(masked_softmax(pre_s.back(), Tensor(1, pre_s.back().cols())));
            }
        }
        bool any = false;
        if (hooked) {
            LayerContext ctx;
            ctx.layer = l;
            ctx.layout = &tk.layout;
            ctx.avail = tk.avail;
            ctx.scores = &pre_s;
            ctx.attn = &pre_a;
            ctx.hq = &tape.value(q);
            ctx.pooled = &pooled;
            std::vector<Tensor> total(H);
            for (const auto& hk : *hooks) {
                std::vector<Tensor> b = hk(ctx);
                if (b.empty()) continue;
                if (int(b.size()) != H) throw Error(ErrorKind::Contract, "hook must return one row per head");
                for (int h = 0; h < H; ++h) {
                    if (b[h].size() == 0) continue;
                    if (b[h].rows() != 1 || int(b[h].cols()) != tk.layout.keys())
                        throw Error(ErrorKind::Contract, "hook returned a bias row of the wrong length");
                    if (total[h].size() == 0) {
                        total[h] = b[h];
                    } else {
                        for (std::size_t k = 0; k < b[h].size(); ++k) total[h].v[k] += b[h].v[k];
                    }
                }
            }
            for (int h = 0; h < H; ++h)
                if (total[h].size()) {
                    s[h] = add_bias(s[h], total[h]);
                    any = true;
                }
        }
        if (trace) trace->hq.push_back(tape.value(q));
        std::vector<Var> heads(H);
        for (int h = 0; h < H; ++h) {
            Var a = softmax(s[h]);
            if (trace) {
                trace->pre[l].push_back(pre_a[h]);
                trace->post[l].push_back(tape.value(a));
            }
            heads[h] = matmul(matmul(a, keys), P(w.wv[h]));
        }
        if (trace) trace->hooked[l] = any;
        Var o = add(matmul(concat_cols(heads), P(w.wo)), P(w.bo));
        q = add(q, o);
        Var f = tanh(add(matmul(layernorm(q, P(w.ln2g), P(w.ln2b)), P(w.w1)), P(w.b1)));
        q = add(q, add(matmul(f, P(w.w2)), P(w.b2)));
    }
    g.logits = add(matmul(layernorm(q, P(lnfg_), P(lnfb_)), P(wh_)), P(bh_));
    return g;
}

ForwardResult Backbone::forward(const Sample& s, const std::vector<AttentionHook>& hooks, const InputView& view) const {
    Tokens tk = gather(s, view);
    Tape tape;
    tape.reserve(32 * c_.L * c_.H);
    ForwardResult r;
    Graph g = build_impl(tape, tk, Mode::Frozen, &hooks, &r.trace);
    r.logits = tape.value(g.logits);
    return r;
}

Tensor Backbone::forward_empty() const {
    Tokens tk;
    tk.x = Tensor(0, c_.feat_dim);
    tk.avail = {false, false, false};
    Tape tape;
    Graph g = build_impl(tape, tk, Mode::Frozen, nullptr, nullptr);
    return tape.value(g.logits);
}

Prediction Backbone::predict(const Sample& s, const InputView& view) const {
    Tokens tk = gather(s, view);
    Tape tape;
    tape.reserve(32 * c_.L * c_.H);
    Graph g = build_impl(tape, tk, Mode::Frozen, nullptr, nullptr);
    return argmax_logits(tape.value(g.logits));
}

double accuracy(const Backbone& bb, const std::vector<const Sample*>& xs, const InputView& view) {
    if (xs.empty()) return 0.0;
    std::size_t ok = 0;
    for (const Sample* s : xs) {
        InputView v = view;
        Avail a = s->avail;
        if (v.avail)
            for (int m = 0; m < kMods; ++m) a[m] = a[m] && (*v.avail)[m];
        int pred = count_avail(a) == 0 ? argmax_logits(bb.forward_empty()).label : bb.predict(*s, v).label;
        ok += pred == s->y_gt;
    }
    return double(ok) / double(xs.size());
}

// ------------------------------------------------------------ training

PretrainReport pretrain(Backbone& bb, const std::vector<const Sample*>& train, const std::vector<const Sample*>& heldout,
                        const PretrainConfig& cfg) {
    if (bb.frozen()) throw Error(ErrorKind::Usage, "backbone is frozen; pretraining twice is not allowed");
    if (train.empty()) throw Error(ErrorKind::Usage, "empty training split");
    auto t0 = std::chrono::steady_clock::now();
    Rng rng(cfg.seed * 0x9e3779b97f4a7c15ULL + 11);
    AdamW opt;
    opt.lr = cfg.lr;
    opt.wd = cfg.wd;
    auto ps = bb.params();
    for (Param* p : ps) p->zero_grad();
    PretrainReport rep;
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    for (int ep = 0; ep < cfg.epochs; ++ep) {
        rng.shuffle(order.begin(), order.end());
        double tot = 0.0;
        for (std::size_t b = 0; b < order.size(); b += cfg.batch) {
            std::size_t e = std::min(order.size(), b + std::size_t(cfg.batch));
            double bs = double(e - b);
            for (std::size_t i = b; i < e; ++i) {
                const Sample& s = *train[order[i]];
                InputView v;
                double r = rng.uniform();
                if (r < cfg.p_text_only)
                    v.avail = Avail{true, false, false};
                else if (r < cfg.p_text_only + cfg.p_drop_video)
                    v.avail = Avail{true, true, false};
                Avail eff = s.avail;
                if (v.avail)
                    for (int m = 0; m < kMods; ++m) eff[m] = eff[m] && (*v.avail)[m];
                if (count_avail(eff) == 0) v.avail.reset();
                Tape tape;
                tape.reserve(40 * bb.config().L * bb.config().H);
                auto g = bb.build(tape, bb.gather(s, v), Backbone::Mode::Train, nullptr, nullptr);
                Var loss = cross_entropy(g.logits, {s.y_gt});
                tot += tape.value(loss).v[0];
                tape.backward(scale(loss, 1.0 / bs));
            }
            opt.step(ps);
            for (Param* p : ps) p->zero_grad();
        }
        rep.epoch_loss.push_back(tot / double(order.size()));
    }
    rep.heldout_acc = accuracy(bb, heldout.empty() ? train : heldout);
    rep.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (rep.heldout_acc < cfg.min_accuracy) {
        std::string msg = "held-out accuracy " + fmt_num(rep.heldout_acc) + " below " + fmt_num(cfg.min_accuracy) + "; epoch losses:";
        for (double x : rep.epoch_loss) msg += " " + fmt_num(x);
        throw Error(ErrorKind::TrainingFailure, msg);
    }
    bb.freeze();
    return rep;
}

// ------------------------------------------------------------ checkpoint

std::string Backbone::encode() const {
    Checkpoint ck;
    ck.kind = "backbone";
    ck.meta = {{"config", c_}, {"seed", c_.seed}, {"frozen", frozen_}};
    for (const Param* p : cparams()) ck.arrays.emplace_back(p->name, p->w);
    return encode_checkpoint(ck);
}

Backbone Backbone::decode(const std::string& bytes) {
    Checkpoint ck = decode_checkpoint(bytes, "backbone");
    Backbone bb(ck.meta.at("config").get<BackboneConfig>());
    for (Param* p : bb.params()) {
        const Tensor& t = ck.get(p->name);
        if (!t.same_shape(p->w)) throw Error(ErrorKind::Compatibility, "shape mismatch for " + p->name);
        p->w = t;
    }
    if (ck.meta.value("frozen", false)) bb.freeze();
    return bb;
}

void Backbone::save(const std::string& path) const { write_file(path, encode()); }

Backbone Backbone::load(const std::string& path) { return decode(read_file(path)); }

}  // namespace mms
