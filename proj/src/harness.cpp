#include "mmsteer/harness.hpp"

#include <chrono>
#include <ctime>
#include <exception>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <thread>

#include "mmsteer/checkpoint.hpp"

namespace mms {

using nlohmann::json;
namespace fs = std::filesystem;

const char* top_one_name(TopOneRule r) {
    switch (r) {
        case TopOneRule::Majority: return "majority";
        case TopOneRule::All: return "all";
        case TopOneRule::Any: return "any";
    }
    return "?";
}

TopOneRule top_one_from_name(std::string_view s) {
    if (s == "majority") return TopOneRule::Majority;
    if (s == "all") return TopOneRule::All;
    if (s == "any") return TopOneRule::Any;
    throw Error(ErrorKind::Config, "top-1 rule must be majority, all or any");
}

// ------------------------------------------------------------ config

void ExperimentConfig::validate() const {
    gen.validate();
    backbone.validate();
    steering.validate(backbone.H, backbone.L);
    if (seeds.empty()) throw Error(ErrorKind::Config, "at least one seed is needed");
    if (gen.feat_dim != backbone.feat_dim || gen.n_T != backbone.n_T || gen.n_A != backbone.n_A || gen.n_V != backbone.n_V)
        throw Error(ErrorKind::Config, "generator token shapes do not match the backbone");
    if (router.start_layer < 1 || router.start_layer > backbone.L) throw Error(ErrorKind::Config, "router start layer outside the backbone");
    if (pretrain.epochs < 1 || pretrain.batch < 1 || router.epochs < 1 || router.batch < 1)
        throw Error(ErrorKind::Config, "epochs and batch sizes must be positive");
    if (case_cards < 0) throw Error(ErrorKind::Config, "case_cards must be non-negative");
}

ExperimentConfig ExperimentConfig::with_seed(uint64_t s) const {
    ExperimentConfig c = *this;
    c.gen.seed = c.backbone.seed = c.pretrain.seed = c.router.seed = s;
    c.seeds = {s};
    return c;
}

void to_json(json& j, const ExperimentConfig& c) {
    j = json{{"generator", c.gen},
             {"backbone", c.backbone},
             {"pretrain", c.pretrain},
             {"router", c.router},
             {"steering", c.steering},
             {"seeds", c.seeds},
             {"top_one", top_one_name(c.top_one)},
             {"case_cards", c.case_cards},
             {"threads", c.threads},
             {"paths", {{"data", c.data_path}, {"backbone", c.backbone_path}, {"router", c.router_path}, {"out", c.out_dir}}}};
}

void from_json(const json& j, ExperimentConfig& c) {
    ExperimentConfig d;
    if (j.contains("generator")) d.gen = j.at("generator").get<GeneratorConfig>();
    if (j.contains("backbone")) d.backbone = j.at("backbone").get<BackboneConfig>();
    if (j.contains("pretrain")) d.pretrain = j.at("pretrain").get<PretrainConfig>();
    if (j.contains("router")) d.router = j.at("router").get<RouterHyper>();
    if (j.contains("steering")) d.steering = j.at("steering").get<SteeringConfig>();
    if (j.contains("seeds")) j.at("seeds").get_to(d.seeds);
    if (j.contains("top_one")) d.top_one = top_one_from_name(j.at("top_one").get<std::string>());
    if (j.contains("case_cards")) j.at("case_cards").get_to(d.case_cards);
    if (j.contains("threads")) j.at("threads").get_to(d.threads);
    if (j.contains("paths")) {
        const json& p = j.at("paths");
        if (p.contains("data")) p.at("data").get_to(d.data_path);
        if (p.contains("backbone")) p.at("backbone").get_to(d.backbone_path);
        if (p.contains("router")) p.at("router").get_to(d.router_path);
        if (p.contains("out")) p.at("out").get_to(d.out_dir);
    }
    c = d;
}

uint64_t ExperimentConfig::hash() const {
    json j = *this;
    j.erase("paths");
    j.erase("threads");
    return fnv1a(j.dump());
}

ExperimentConfig load_config(const std::string& path) {
    std::string text = read_file(path);
    json j;
    try {
        j = json::parse(text);
    } catch (const json::exception& e) {
        throw Error(ErrorKind::Parse, path + ": " + e.what());
    }
    ExperimentConfig c;
    try {
        c = j.get<ExperimentConfig>();
    } catch (const json::exception& e) {
        throw Error(ErrorKind::Config, path + ": " + e.what());
    }
    c.validate();
    return c;
}

// ------------------------------------------------------------ parallel helpers

namespace {

int thread_count(int requested, std::size_t n) {
    int t = requested > 0 ? requested : int(std::thread::hardware_concurrency());
    t = std::max(1, t);
    return int(std::min<std::size_t>(std::size_t(t), std::max<std::size_t>(n, 1)));
}

// fn(i) for i in [0, n); results land by index so the merge order is fixed
template <class F>
void parallel_for(std::size_t n, int threads, F&& fn) {
    int t = thread_count(threads, n);
    if (t == 1) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::exception_ptr> errs(t);
    std::vector<std::thread> pool;
    for (int w = 0; w < t; ++w)
        pool.emplace_back([&, w] {
            try {
                for (std::size_t i = w; i < n; i += t) fn(i);
            } catch (...) {
                errs[w] = std::current_exception();
            }
        });
    for (auto& th : pool) th.join();
    for (auto& e : errs)
        if (e) std::rethrow_exception(e);
}

bool is_full(const Sample& s) { return s.subset == Subset::Align || s.subset == Subset::Conflict; }

std::vector<const Sample*> filter(const std::vector<const Sample*>& xs, const std::function<bool(const Sample&)>& f) {
    std::vector<const Sample*> out;
    for (const Sample* s : xs)
        if (f(*s)) out.push_back(s);
    return out;
}

std::string file_safe(std::string id) {
    for (char& c : id)
        if (c == '/' || c == '\\' || c == ' ') c = '_';
    return id;
}

}  // namespace

// ------------------------------------------------------------ evaluation

const SubsetRow* EvalReport::row(const std::string& tag) const {
    for (const auto& r : rows)
        if (r.tag == tag) return &r;
    return nullptr;
}

std::array<std::optional<double>, kMods> EvalReport::final_nmas() const {
    std::array<std::optional<double>, kMods> out{};
    if (nmas_conflict.empty()) return out;
    const auto& last = nmas_conflict.back();
    for (int m = 0; m < kMods; ++m) {
        double s = 0;
        int n = 0;
        for (const auto& h : last)
            if (h[m]) {
                s += *h[m];
                ++n;
            }
        if (n) out[m] = s / n;
    }
    return out;
}

EvalReport run_eval(const Backbone& bb, const Router* rt, const Dataset& d, const SteeringConfig& sc, Split split, int case_cards,
                    int threads) {
    EvalReport rep;
    auto xs = d.select(split);
    const std::size_t n = xs.size();
    const int L = bb.config().L, H = bb.config().H;

    std::vector<int> base(n), steered(n);
    std::vector<std::size_t> n_steered(n, 0), n_routed(n, 0);
    // nMAS sums for Conflict samples, accumulated per sample then merged in order
    std::vector<std::vector<double>> nm(n);
    parallel_for(n, threads, [&](std::size_t i) {
        const Sample& s = *xs[i];
        ForwardResult fr = bb.forward(s);
        base[i] = argmax_logits(fr.logits).label;
        if (s.subset == Subset::Conflict) {
            nm[i].assign(std::size_t(L * H * kMods), 0.0);
            for (int l = 0; l < L; ++l)
                for (int h = 0; h < H; ++h)
                    for (int m = 0; m < kMods; ++m) {
                        auto v = nmas(fr.trace, m, l, h);
                        nm[i][(l * H + h) * kMods + m] = v ? *v : -1.0;
                    }
        }
        if (rt) {
            SteerResult sr = steered_infer(bb, *rt, s, sc);
            steered[i] = sr.pred.label;
            n_steered[i] = sr.steered_layers().size();
            n_routed[i] = sr.layers.size();
        }
    });

    struct Group {
        const char* tag;
        std::function<bool(const Sample&)> in;
    };
    const std::vector<Group> groups{
        {"Overall", [](const Sample&) { return true; }},
        {"Align", [](const Sample& s) { return s.subset == Subset::Align; }},
        {"Conflict", [](const Sample& s) { return s.subset == Subset::Conflict; }},
        {"Missing", [](const Sample& s) { return is_missing(s.subset); }},
    };
    const Scheme scheme = d.config.scheme;
    for (const auto& g : groups) {
        std::vector<int> pb, ps, y;
        for (std::size_t i = 0; i < n; ++i)
            if (g.in(*xs[i])) {
                pb.push_back(base[i]);
                ps.push_back(steered[i]);
                y.push_back(xs[i]->y_gt);
            }
        if (y.empty()) {
            rep.gaps.push_back(g.tag);
            continue;
        }
        SubsetRow r;
        r.tag = g.tag;
        r.base = classification_metrics(pb, y, scheme);
        if (rt) r.steered = classification_metrics(ps, y, scheme);
        rep.rows.push_back(std::move(r));
    }

    std::size_t st = 0, ro = 0;
    for (std::size_t i = 0; i < n; ++i) {
        st += n_steered[i];
        ro += n_routed[i];
    }
    rep.steer_rate = ro ? double(st) / double(ro) : 0.0;

    auto align = filter(xs, [](const Sample& s) { return s.subset == Subset::Align; });
    auto conflict = filter(xs, [](const Sample& s) { return s.subset == Subset::Conflict; });
    if (!align.empty()) {
        rep.perf_align = subset_performance(bb, align);
        rep.psmv_align = psmv(*rep.perf_align);
    }
    if (!conflict.empty()) {
        rep.perf_conflict = subset_performance(bb, conflict);
        rep.psmv_conflict = psmv(*rep.perf_conflict);
    }

    std::vector<const Sample*> full;
    std::vector<int> fb, fs;
    for (std::size_t i = 0; i < n; ++i)
        if (is_full(*xs[i])) {
            full.push_back(xs[i]);
            fb.push_back(base[i]);
            fs.push_back(steered[i]);
        }
    for (int m = 0; m < kMods; ++m) {
        rep.gtar_base[m] = gtar(full, fb, m);
        if (rt) rep.gtar_steered[m] = gtar(full, fs, m);
    }

    if (!conflict.empty()) {
        std::vector<double> sum(std::size_t(L * H * kMods), 0.0);
        std::vector<int> cnt(sum.size(), 0);
        for (std::size_t i = 0; i < n; ++i)
            for (std::size_t k = 0; k < nm[i].size(); ++k)
                if (nm[i][k] >= 0) {
                    sum[k] += nm[i][k];
                    ++cnt[k];
                }
        rep.nmas_conflict.assign(L, std::vector<std::array<std::optional<double>, kMods>>(H));
        for (int l = 0; l < L; ++l)
            for (int h = 0; h < H; ++h)
                for (int m = 0; m < kMods; ++m) {
                    std::size_t k = std::size_t((l * H + h) * kMods + m);
                    if (cnt[k]) rep.nmas_conflict[l][h][m] = sum[k] / cnt[k];
                }
    }

    if (!full.empty()) {
        std::array<std::vector<int>, 4> cols;
        for (const Sample* s : full) {
            cols[0].push_back(s->y_gt);
            for (int m = 0; m < kMods; ++m) cols[m + 1].push_back(s->y[m]);
        }
        for (int a = 0; a < 4; ++a)
            for (int b = 0; b < 4; ++b) rep.agreement[a][b] = consistency(cols[a], cols[b]);
    }

    for (std::size_t i = 0; i < n && int(rep.cards.size()) < case_cards; ++i) {
        const Sample& s = *xs[i];
        if (s.subset != Subset::Conflict) continue;
        ForwardResult fr = bb.forward(s);
        Prediction pb = argmax_logits(fr.logits);
        std::optional<SteerResult> sr;
        if (rt) sr = steered_infer(bb, *rt, s, sc);
        rep.cards.push_back({case_card(bb, s, pb, fr.trace, sr ? &*sr : nullptr), s.id});
    }
    return rep;
}

// ------------------------------------------------------------ ablation

namespace {

struct SteerStats {
    ClassMetrics m;
    double rate = 0.0;
};

SteerStats steer_stats(const Backbone& bb, const Router& rt, const std::vector<const Sample*>& xs, const SteeringConfig& sc,
                       const RandomSteering* rnd, Scheme scheme, int threads) {
    std::vector<int> pred(xs.size()), y(xs.size());
    std::vector<std::size_t> st(xs.size()), ro(xs.size());
    parallel_for(xs.size(), threads, [&](std::size_t i) {
        SteerResult r = steered_infer(bb, rt, *xs[i], sc, rnd);
        pred[i] = r.pred.label;
        y[i] = xs[i]->y_gt;
        st[i] = r.steered_layers().size();
        ro[i] = r.layers.size();
    });
    SteerStats out;
    out.m = classification_metrics(pred, y, scheme);
    std::size_t a = 0, b = 0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        a += st[i];
        b += ro[i];
    }
    out.rate = b ? double(a) / double(b) : 0.0;
    return out;
}

}  // namespace

std::vector<AblationRow> run_ablation(const Backbone& bb, const Router& rt, const std::vector<const Sample*>& xs,
                                      const SteeringConfig& sc, uint64_t seed, int threads) {
    if (xs.empty()) throw Error(ErrorKind::Degenerate, "ablation needs samples");
    const Scheme scheme = xs.front()->scheme;
    std::vector<AblationRow> t;
    SteerStats full = steer_stats(bb, rt, xs, sc, nullptr, scheme, threads);
    t.push_back({"full", full.m, full.rate});
    SteeringConfig c = sc;
    c.use_intra = false;
    SteerStats a = steer_stats(bb, rt, xs, c, nullptr, scheme, threads);
    t.push_back({"no_intra", a.m, a.rate});
    c = sc;
    c.use_inter = false;
    SteerStats b = steer_stats(bb, rt, xs, c, nullptr, scheme, threads);
    t.push_back({"no_inter", b.m, b.rate});
    RandomSteering rnd{full.rate, seed};
    SteerStats r = steer_stats(bb, rt, xs, sc, &rnd, scheme, threads);
    t.push_back({"random", r.m, r.rate});
    std::vector<int> pred(xs.size()), y(xs.size());
    parallel_for(xs.size(), threads, [&](std::size_t i) {
        pred[i] = bb.predict(*xs[i]).label;
        y[i] = xs[i]->y_gt;
    });
    t.push_back({"baseline", classification_metrics(pred, y, scheme), 0.0});
    return t;
}

const AblationRow& ablation_row(const std::vector<AblationRow>& t, const std::string& name) {
    for (const auto& r : t)
        if (r.name == name) return r;
    throw Error(ErrorKind::Usage, "no ablation row " + name);
}

// ------------------------------------------------------------ router diagnostics

RouterDiagnostics diagnose_cases(const std::vector<DiagnosticCase>& cases, TopOneRule rule) {
    RouterDiagnostics d;
    for (const auto& c : cases) {
        if (!c.conflict) continue;
        ++d.n_conflict;
        if (c.steered_gates.empty()) continue;
        ++d.n_detected;
        std::size_t hits = 0;
        for (const auto& g : c.steered_gates) {
            int best = int(std::max_element(g.begin(), g.end()) - g.begin());
            hits += c.aligned[best];
        }
        std::size_t k = c.steered_gates.size();
        bool ok = rule == TopOneRule::Majority ? 2 * hits > k : rule == TopOneRule::All ? hits == k : hits > 0;
        if (ok) {
            ++d.n_top1;
            ++d.n_joint;
        }
    }
    if (d.n_conflict) {
        d.recall = double(d.n_detected) / double(d.n_conflict);
        d.joint = double(d.n_joint) / double(d.n_conflict);
    }
    if (d.n_detected) d.top1 = double(d.n_top1) / double(d.n_detected);
    return d;
}

RouterDiagnostics router_diagnostics(const Backbone& bb, const Router& rt, const std::vector<const Sample*>& xs, const SteeringConfig& sc,
                                     TopOneRule rule, int threads) {
    std::vector<DiagnosticCase> cases(xs.size());
    parallel_for(xs.size(), threads, [&](std::size_t i) {
        const Sample& s = *xs[i];
        DiagnosticCase& c = cases[i];
        c.conflict = s.subset == Subset::Conflict || s.subset == Subset::MissingConflict;
        for (int m = 0; m < kMods; ++m) c.aligned[m] = polarity_aligned(s, m);
        if (!c.conflict) return;
        SteerResult r = steered_infer(bb, rt, s, sc);
        for (const auto& l : r.layers)
            if (l.steered) c.steered_gates.push_back(l.g);
    });
    return diagnose_cases(cases, rule);
}

// ------------------------------------------------------------ token masking

double video_accuracy(const Backbone& bb, const std::vector<const Sample*>& xs, const VideoKeep& keep) {
    if (xs.empty()) throw Error(ErrorKind::Degenerate, "accuracy of an empty sample set");
    std::size_t ok = 0;
    for (const Sample* s : xs) {
        InputView v;
        v.video_keep = keep ? keep(*s) : nullptr;
        Avail a = s->avail;
        bool any = false;
        for (int m = 0; m < kMods; ++m) any = any || (a[m] && (m != V || !v.video_keep || !v.video_keep->empty()));
        int y = any ? bb.predict(*s, v).label : argmax_logits(bb.forward_empty()).label;
        ok += y == s->y_gt;
    }
    return double(ok) / double(xs.size());
}

MaskResult token_mask_experiment(const Backbone& bb, const std::vector<const Sample*>& xs, const VideoKeep& keep) {
    MaskResult r;
    r.n = xs.size();
    static const std::vector<int> none;
    VideoKeep drop = [](const Sample&) { return &none; };
    VideoKeep inf = keep ? keep : VideoKeep([](const Sample& s) { return &s.informative[V]; });
    r.acc_tav = video_accuracy(bb, xs, {});
    r.acc_ta = video_accuracy(bb, xs, drop);
    r.acc_tav_informative = video_accuracy(bb, xs, inf);
    r.dv_original = marginal_gain_video(r.acc_tav, r.acc_ta);
    r.dv_informative = marginal_gain_video(r.acc_tav_informative, r.acc_ta);
    return r;
}

// ------------------------------------------------------------ whole runs

Artifacts build_artifacts(const ExperimentConfig& cfg, const Log& log) {
    cfg.validate();
    auto say = [&](const std::string& m) {
        if (log) log(m);
    };
    Dataset d = build_benchmark(cfg.gen);
    say("generated " + std::to_string(d.samples.size()) + " samples");
    Backbone bb(cfg.backbone);
    PretrainReport pr = pretrain(bb, d.select(Split::Pretrain), d.select(Split::Valid, Subset::Align), cfg.pretrain);
    say("pretrained backbone, held-out accuracy " + fmt_num(round_to(pr.heldout_acc, 4)));
    RouterTrainReport rr;
    Router rt = fit_router(bb, d.select(Split::Train), d.select(Split::Valid), cfg.router, &rr);
    say("trained router, final loss " + fmt_num(round_to(rr.epoch_loss.back(), 4)));
    return Artifacts{std::move(d), std::move(bb), std::move(rt), pr, rr};
}

RunResults run_experiments(const Artifacts& a, const ExperimentConfig& cfg, bool ablation, bool diagnostics, bool mask, const Log& log) {
    auto say = [&](const std::string& m) {
        if (log) log(m);
    };
    RunResults r;
    r.seed = cfg.seeds.front();
    r.config_hash = hex64(cfg.hash());
    r.eval = run_eval(a.backbone, &a.router, a.data, cfg.steering, Split::Test, cfg.case_cards, cfg.threads);
    say("evaluated test split");
    auto conflict = a.data.select(Split::Test, Subset::Conflict);
    if (ablation) {
        r.ablation = run_ablation(a.backbone, a.router, conflict, cfg.steering, r.seed, cfg.threads);
        say("ran ablations");
    }
    if (diagnostics) {
        r.diagnostics = router_diagnostics(a.backbone, a.router, conflict, cfg.steering, cfg.top_one, cfg.threads);
        say("ran router diagnostics");
    }
    if (mask) {
        r.mask = token_mask_experiment(a.backbone, conflict);
        say("ran token-mask experiment");
    }
    if (a.pretrain.epoch_loss.empty()) return r;
    r.training = {{"pretrain_loss", a.pretrain.epoch_loss},
                  {"pretrain_heldout_acc", a.pretrain.heldout_acc},
                  {"router_loss", a.router_report.epoch_loss},
                  {"router_valid_loss", a.router_report.valid_loss},
                  {"backbone_hash", hex64(a.backbone.hash())},
                  {"backbone_unchanged", a.router_report.backbone_hash_before == a.router_report.backbone_hash_after}};
    return r;
}

// ------------------------------------------------------------ reports

namespace {

std::string num(double x) { return fmt_num(round_to(x, 6)); }
json opt(const std::optional<double>& v) { return v ? json(round_to(*v, 6)) : json(nullptr); }
json opt3(const std::array<std::optional<double>, kMods>& v) { return json{{"T", opt(v[0])}, {"A", opt(v[1])}, {"V", opt(v[2])}}; }
json r6(const std::array<double, kMods>& a) { return json{{"T", round_to(a[0], 6)}, {"A", round_to(a[1], 6)}, {"V", round_to(a[2], 6)}}; }
json r6(const ClassMetrics& m) { return json{{"n", m.n}, {"acc", round_to(m.acc, 6)}, {"f1", round_to(m.f1, 6)}, {"mae", round_to(m.mae, 6)}}; }

std::string csv_header(const RunResults& r) { return "# config_hash=" + r.config_hash + " seed=" + std::to_string(r.seed) + "\n"; }

json perf_json(const SubsetPerformance& p) {
    json j = json::object();
    for (int S = 0; S < kSubsets; ++S) {
        std::string k;
        for (int m = 0; m < kMods; ++m)
            if (S & mod_bit(m)) k += mod_name(m);
        if (k.empty()) k = "none";
        j[k] = p.has(S) ? json(round_to(p.at(S), 6)) : json(nullptr);
    }
    return j;
}

void write_text(const fs::path& p, const std::string& s) { write_file(p.string(), s); }

}  // namespace

std::string metrics_csv(const RunResults& r) {
    std::ostringstream o;
    o << csv_header(r) << "subset,metric,n,baseline,steered\n";
    for (const auto& row : r.eval.rows) {
        const ClassMetrics& b = row.base;
        const ClassMetrics* s = row.steered ? &*row.steered : nullptr;
        o << row.tag << ",Acc," << b.n << "," << num(b.acc) << "," << (s ? num(s->acc) : "") << "\n";
        o << row.tag << ",F1," << b.n << "," << num(b.f1) << "," << (s ? num(s->f1) : "") << "\n";
        o << row.tag << ",MAE," << b.n << "," << num(b.mae) << "," << (s ? num(s->mae) : "") << "\n";
    }
    return o.str();
}

json metrics_json(const RunResults& r) {
    const EvalReport& e = r.eval;
    json j;
    j["config_hash"] = r.config_hash;
    j["seed"] = r.seed;
    json rows = json::array();
    for (const auto& row : e.rows) {
        json x{{"subset", row.tag}, {"baseline", r6(row.base)}};
        x["steered"] = row.steered ? r6(*row.steered) : json(nullptr);
        rows.push_back(x);
    }
    j["subsets"] = rows;
    j["gaps"] = e.gaps;
    j["steer_rate"] = round_to(e.steer_rate, 6);
    json ps;
    if (e.perf_align) ps["Align"] = {{"accuracy", perf_json(*e.perf_align)}, {"value", r6(*e.psmv_align)}};
    if (e.perf_conflict) ps["Conflict"] = {{"accuracy", perf_json(*e.perf_conflict)}, {"value", r6(*e.psmv_conflict)}};
    for (auto [tag, v] : {std::pair{"Align", &e.psmv_align}, std::pair{"Conflict", &e.psmv_conflict}})
        if (*v) {
            auto sh = psmv_shares(**v);
            ps[tag]["share"] = sh ? r6(*sh) : json(nullptr);
        }
    j["psmv"] = ps;
    j["gtar"] = {{"baseline", opt3(e.gtar_base)}, {"steered", opt3(e.gtar_steered)}};
    json nm = json::array();
    for (std::size_t l = 0; l < e.nmas_conflict.size(); ++l)
        for (std::size_t h = 0; h < e.nmas_conflict[l].size(); ++h) {
            json x = opt3(e.nmas_conflict[l][h]);
            x["layer"] = l + 1;
            x["head"] = h + 1;
            nm.push_back(x);
        }
    j["nmas_conflict"] = nm;
    static const char* names[4] = {"GT", "T", "A", "V"};
    json ag;
    for (int a = 0; a < 4; ++a)
        for (int b = 0; b < 4; ++b) ag[names[a]][names[b]] = round_to(e.agreement[a][b], 6);
    j["agreement"] = ag;
    j["training"] = r.training;
    return j;
}

std::string ablation_csv(const RunResults& r) {
    std::ostringstream o;
    o << csv_header(r) << "variant,n,acc,f1,mae,steer_rate\n";
    if (r.ablation)
        for (const auto& a : *r.ablation)
            o << a.name << "," << a.m.n << "," << num(a.m.acc) << "," << num(a.m.f1) << "," << num(a.m.mae) << "," << num(a.steer_rate) << "\n";
    return o.str();
}

json case_card(const Backbone& bb, const Sample& s, const Prediction& base, const AttentionTrace& base_trace, const SteerResult* st) {
    json j;
    j["id"] = s.id;
    j["subset"] = subset_name(s.subset);
    j["labels"] = {{"T", label_name(s.y[T])}, {"A", label_name(s.y[A])}, {"V", label_name(s.y[V])}, {"GT", label_name(s.y_gt)}};
    j["available"] = {{"T", s.avail[T]}, {"A", s.avail[A]}, {"V", s.avail[V]}};
    j["prediction"] = {{"baseline", label_name(base.label)}, {"steered", st ? json(label_name(st->pred.label)) : json(nullptr)}};
    json layers = json::array();
    for (int l = 0; l < bb.config().L; ++l) {
        json x{{"layer", l + 1}, {"baseline_budget", r6(attention_budget(base_trace, l, true))}};
        if (st) {
            x["steered_budget"] = r6(attention_budget(st->trace, l, true));
            const LayerDiag* d = nullptr;
            for (const auto& ld : st->layers)
                if (ld.layer == l + 1) d = &ld;
            if (d) {
                std::vector<int> heads;
                if (d->steered)
                    for (int h : d->heads) heads.push_back(h + 1);
                x["router"] = {{"p", round_to(d->p, 6)}, {"g", r6(d->g)}, {"steered", d->steered}, {"heads", heads}};
            }
        }
        layers.push_back(x);
    }
    j["layers"] = layers;
    if (st) j["significant_video_tokens"] = st->significant.size();
    return j;
}

void write_reports(const RunResults& r, const std::string& dir) {
    std::error_code ec;
    fs::create_directories(fs::path(dir) / "cards", ec);
    if (ec) throw Error(ErrorKind::Io, "cannot create " + dir + ": " + ec.message());
    const fs::path p(dir);
    write_text(p / "metrics.csv", metrics_csv(r));
    write_text(p / "metrics.json", metrics_json(r).dump(2) + "\n");
    if (r.ablation) write_text(p / "ablation.csv", ablation_csv(r));
    if (r.diagnostics) {
        const auto& d = *r.diagnostics;
        json j{{"config_hash", r.config_hash}, {"seed", r.seed},       {"n_conflict", d.n_conflict}, {"n_detected", d.n_detected},
               {"recall", opt(d.recall)},      {"top1", opt(d.top1)}, {"joint", opt(d.joint)}};
        write_text(p / "diagnostics.json", j.dump(2) + "\n");
    }
    if (r.mask) {
        const auto& m = *r.mask;
        json j{{"config_hash", r.config_hash},
               {"seed", r.seed},
               {"n", m.n},
               {"acc_tav", round_to(m.acc_tav, 6)},
               {"acc_ta", round_to(m.acc_ta, 6)},
               {"acc_tav_informative", round_to(m.acc_tav_informative, 6)},
               {"dv_original", round_to(m.dv_original, 6)},
               {"dv_informative", round_to(m.dv_informative, 6)}};
        write_text(p / "mask.json", j.dump(2) + "\n");
    }
    if (!r.training.is_null()) {
        json j = r.training;
        j["config_hash"] = r.config_hash;
        j["seed"] = r.seed;
        write_text(p / "training.json", j.dump(2) + "\n");
    }
    for (const auto& c : r.eval.cards) {
        json j = c.body;
        j["config_hash"] = r.config_hash;
        j["seed"] = r.seed;
        write_text(p / "cards" / (file_safe(c.id) + ".json"), j.dump(2) + "\n");
    }
}

std::string emit_reports(const RunResults& r, const std::string& root) {
    std::time_t now = std::time(nullptr);
    char stamp[32];
    std::strftime(stamp, sizeof stamp, "%Y%m%dT%H%M%S", std::gmtime(&now));
    std::string base = std::string(stamp) + "-" + r.config_hash.substr(0, 8) + "-s" + std::to_string(r.seed);
    fs::path dir = fs::path(root) / base;
    for (int k = 2; fs::exists(dir); ++k) dir = fs::path(root) / (base + "-" + std::to_string(k));
    write_reports(r, dir.string());
    return dir.string();
}

}  // namespace mms
