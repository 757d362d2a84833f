#include <CLI11.hpp>
#include <filesystem>
#include <iostream>

#include <json.hpp>

#include "mmsteer/checkpoint.hpp"
#include "mmsteer/harness.hpp"

using namespace mms;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

struct Opts {
    std::string config, out, data, backbone, router;
    std::optional<uint64_t> seed;
    std::optional<double> tau, eta, gamma, beta, psi_hat, percentile;
    std::optional<int> topk, threads;
    bool no_router = false;
};

int exit_code(ErrorKind k) {
    switch (k) {
        case ErrorKind::Usage:
        case ErrorKind::Config:
        case ErrorKind::Parse: return 2;
        case ErrorKind::Io: return 3;
        case ErrorKind::Compatibility: return 4;
        case ErrorKind::TrainingFailure: return 5;
        default: return 1;
    }
}

void fail_json(const std::string& kind, const std::string& msg) {
    std::cerr << json{{"error", {{"kind", kind}, {"message", msg}}}}.dump() << "\n";
}

void log_line(const std::string& m) { std::cerr << "mmsteer: " << m << "\n"; }

ExperimentConfig resolve(const Opts& o) {
    ExperimentConfig c = o.config.empty() ? ExperimentConfig{} : load_config(o.config);
    if (o.seed) c = c.with_seed(*o.seed);
    SteeringConfig& s = c.steering;
    if (o.tau) s.tau = *o.tau;
    if (o.eta) s.eta = *o.eta;
    if (o.gamma) s.gamma = *o.gamma;
    if (o.beta) s.beta = *o.beta;
    if (o.topk) s.K = *o.topk;
    if (o.psi_hat) s.psi_hat = *o.psi_hat;
    if (o.percentile) s.percentile = *o.percentile;
    if (o.threads) c.threads = *o.threads;
    if (!o.data.empty()) c.data_path = o.data;
    if (!o.backbone.empty()) c.backbone_path = o.backbone;
    if (!o.router.empty()) c.router_path = o.router;
    if (c.seeds.size() > 1) c.seeds.resize(1);
    c.validate();
    return c;
}

void ensure_parent(const std::string& path) {
    fs::path p = fs::path(path).parent_path();
    if (!p.empty()) {
        std::error_code ec;
        fs::create_directories(p, ec);
        if (ec) throw Error(ErrorKind::Io, "cannot create " + p.string() + ": " + ec.message());
    }
}

// the dataset carries its own generator settings; reports hash those
Dataset load_data(ExperimentConfig& c) {
    Dataset d = read_dataset(c.data_path);
    c.gen = d.config;
    return d;
}

void print_ok(json j) {
    j["ok"] = true;
    std::cout << j.dump() << "\n";
}

void add_common(CLI::App* sc, Opts& o) {
    sc->add_option("--config", o.config, "experiment config (JSON)");
    sc->add_option("--seed", o.seed, "seed for every seeded component");
    sc->add_option("--out", o.out, "output path or directory");
    sc->add_option("--threads", o.threads, "worker threads for evaluation");
}

void add_artifacts(CLI::App* sc, Opts& o, bool backbone, bool router) {
    sc->add_option("--data", o.data, "dataset file");
    if (backbone) sc->add_option("--backbone", o.backbone, "backbone checkpoint");
    if (router) sc->add_option("--router", o.router, "router checkpoint");
}

void add_steering(CLI::App* sc, Opts& o) {
    sc->add_option("--tau", o.tau, "conflict threshold");
    sc->add_option("--eta", o.eta, "max steering magnitude");
    sc->add_option("--gamma", o.gamma, "inter-modality bias strength");
    sc->add_option("--beta", o.beta, "intra-modality bias strength");
    sc->add_option("--topk", o.topk, "heads per steered layer");
    sc->add_option("--psi-hat", o.psi_hat, "target mass on significant video tokens");
    sc->add_option("--percentile", o.percentile, "importance percentile for significant video tokens");
}

struct Loaded {
    ExperimentConfig cfg;
    Dataset data;
    Backbone bb;
    std::optional<Router> rt;
};

Loaded load_all(const Opts& o, bool need_router) {
    ExperimentConfig c = resolve(o);
    Dataset d = load_data(c);
    Backbone bb = Backbone::load(c.backbone_path);
    std::optional<Router> rt;
    if (need_router) rt = Router::load(c.router_path, &bb);
    return Loaded{c, std::move(d), std::move(bb), std::move(rt)};
}

std::string out_root(const Opts& o, const ExperimentConfig& c) { return o.out.empty() ? c.out_dir : o.out; }

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"multimodal attention steering experiments"};
    app.require_subcommand(1);
    Opts o;

    auto* gen = app.add_subcommand("gen-data", "generate the synthetic benchmark");
    add_common(gen, o);
    auto* pre = app.add_subcommand("pretrain", "pretrain and freeze the backbone");
    add_common(pre, o);
    add_artifacts(pre, o, false, false);
    auto* trr = app.add_subcommand("train-router", "train the router on a frozen backbone");
    add_common(trr, o);
    add_artifacts(trr, o, true, false);
    auto* ev = app.add_subcommand("eval", "baseline and steered metrics per subset");
    add_common(ev, o);
    add_artifacts(ev, o, true, true);
    add_steering(ev, o);
    ev->add_flag("--no-router", o.no_router, "baseline only");
    auto* ab = app.add_subcommand("ablate", "ablation table on the Conflict test split");
    add_common(ab, o);
    add_artifacts(ab, o, true, true);
    add_steering(ab, o);
    auto* dg = app.add_subcommand("diagnose", "router detection and targeting diagnostics");
    add_common(dg, o);
    add_artifacts(dg, o, true, true);
    add_steering(dg, o);
    auto* mk = app.add_subcommand("mask-exp", "video marginal gain with original vs informative-only tokens");
    add_common(mk, o);
    add_artifacts(mk, o, true, false);
    auto* rp = app.add_subcommand("report", "every table plus case cards");
    add_common(rp, o);
    add_artifacts(rp, o, true, true);
    add_steering(rp, o);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        fail_json("usage", e.what());
        return 2;
    }

    try {
        if (*gen) {
            ExperimentConfig c = resolve(o);
            std::string path = o.out.empty() ? c.data_path : o.out;
            Dataset d = build_benchmark(c.gen);
            ensure_parent(path);
            write_dataset(d, path);
            print_ok({{"wrote", path}, {"samples", d.samples.size()}, {"seed", c.gen.seed}});
        } else if (*pre) {
            ExperimentConfig c = resolve(o);
            Dataset d = load_data(c);
            Backbone bb(c.backbone);
            PretrainReport r = pretrain(bb, d.select(Split::Pretrain), d.select(Split::Valid, Subset::Align), c.pretrain);
            std::string path = o.out.empty() ? c.backbone_path : o.out;
            ensure_parent(path);
            bb.save(path);
            print_ok({{"wrote", path}, {"epoch_loss", r.epoch_loss}, {"heldout_acc", r.heldout_acc}, {"hash", hex64(bb.hash())}});
        } else if (*trr) {
            ExperimentConfig c = resolve(o);
            Dataset d = load_data(c);
            Backbone bb = Backbone::load(c.backbone_path);
            RouterTrainReport rep;
            Router rt = fit_router(bb, d.select(Split::Train), d.select(Split::Valid), c.router, &rep);
            std::string path = o.out.empty() ? c.router_path : o.out;
            ensure_parent(path);
            rt.save(path);
            print_ok({{"wrote", path},
                      {"epoch_loss", rep.epoch_loss},
                      {"valid_loss", rep.valid_loss},
                      {"backbone_unchanged", rep.backbone_hash_before == rep.backbone_hash_after}});
        } else if (*ev) {
            Loaded l = load_all(o, !o.no_router);
            RunResults r;
            r.seed = l.cfg.seeds.front();
            r.config_hash = hex64(l.cfg.hash());
            r.eval = run_eval(l.bb, l.rt ? &*l.rt : nullptr, l.data, l.cfg.steering, Split::Test, l.cfg.case_cards, l.cfg.threads);
            std::string dir = emit_reports(r, out_root(o, l.cfg));
            print_ok({{"wrote", dir}});
        } else if (*ab) {
            Loaded l = load_all(o, true);
            RunResults r;
            r.seed = l.cfg.seeds.front();
            r.config_hash = hex64(l.cfg.hash());
            r.ablation = run_ablation(l.bb, *l.rt, l.data.select(Split::Test, Subset::Conflict), l.cfg.steering, r.seed, l.cfg.threads);
            std::cout << ablation_csv(r);
            return 0;
        } else if (*dg) {
            Loaded l = load_all(o, true);
            auto d = router_diagnostics(l.bb, *l.rt, l.data.select(Split::Test, Subset::Conflict), l.cfg.steering, l.cfg.top_one,
                                        l.cfg.threads);
            auto opt = [](const std::optional<double>& v) { return v ? json(*v) : json(nullptr); };
            print_ok({{"n_conflict", d.n_conflict}, {"recall", opt(d.recall)}, {"top1", opt(d.top1)}, {"joint", opt(d.joint)}});
        } else if (*mk) {
            Loaded l = load_all(o, false);
            MaskResult m = token_mask_experiment(l.bb, l.data.select(Split::Test, Subset::Conflict));
            print_ok({{"n", m.n},
                      {"acc_tav", m.acc_tav},
                      {"acc_ta", m.acc_ta},
                      {"acc_tav_informative", m.acc_tav_informative},
                      {"dv_original", m.dv_original},
                      {"dv_informative", m.dv_informative}});
        } else if (*rp) {
            Loaded l = load_all(o, true);
            Artifacts a{std::move(l.data), std::move(l.bb), std::move(*l.rt), {}, {}};
            RunResults r = run_experiments(a, l.cfg, true, true, true, log_line);
            std::string dir = emit_reports(r, out_root(o, l.cfg));
            print_ok({{"wrote", dir}});
        }
    } catch (const Error& e) {
        fail_json(kind_name(e.kind()), e.what());
        return exit_code(e.kind());
    } catch (const std::exception& e) {
        fail_json("internal", e.what());
        return 1;
    }
    return 0;
}
