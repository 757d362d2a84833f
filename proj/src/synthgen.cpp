#include "mmsteer/synthgen.hpp"

#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>

namespace mms {

using nlohmann::json;

// ------------------------------------------------------------ labels

const char* label_name(int y) {
    static const char* n[] = {"N", "WN", "Neu", "WP", "P"};
    if (y < 0 || y >= kClasses) throw Error(ErrorKind::Range, "label index out of range");
    return n[y];
}

int label_from_name(std::string_view s) {
    for (int y = 0; y < kClasses; ++y)
        if (s == label_name(y)) return y;
    throw Error(ErrorKind::Parse, "unknown label '" + std::string(s) + "'");
}

int polarity(int y) { return y < 2 ? -1 : (y > 2 ? 1 : 0); }

const char* scheme_name(Scheme s) { return s == Scheme::CHSIMS ? "CHSIMS" : "MOSI"; }

Scheme scheme_from_name(std::string_view s) {
    if (s == "CHSIMS") return Scheme::CHSIMS;
    if (s == "MOSI") return Scheme::MOSI;
    throw Error(ErrorKind::Parse, "unknown scheme '" + std::string(s) + "'");
}

namespace {

// class of each grid step k = 5*score, k in [-5, 5]
int grid_class(int k, Scheme s) {
    if (k == 0) return Neu;
    int a = std::abs(k);
    int strong_from = s == Scheme::CHSIMS ? 4 : 3;
    int cls = a >= strong_from ? 2 : 1;
    return k < 0 ? 2 - cls : 2 + cls;
}

}  // namespace

std::vector<double> score_grid(int y, Scheme s) {
    label_name(y);
    std::vector<double> out;
    for (int k = -5; k <= 5; ++k)
        if (grid_class(k, s) == y) out.push_back(k / 5.0);
    return out;
}

int map_score(double score, Scheme s) {
    if (!(score >= -1.0 - 1e-9 && score <= 1.0 + 1e-9))
        throw Error(ErrorKind::Range, "score " + fmt_num(score) + " outside [-1, 1]");
    int k = int(std::lround(score * 5.0));
    return grid_class(std::clamp(k, -5, 5), s);
}

double representative_score(int y, Scheme s) {
    auto g = score_grid(y, s);
    return 0.5 * (g.front() + g.back());
}

const char* subset_name(Subset s) {
    switch (s) {
        case Subset::Align: return "Align";
        case Subset::Conflict: return "Conflict";
        case Subset::MissingAlign: return "Missing-Align";
        case Subset::MissingConflict: return "Missing-Conflict";
    }
    return "?";
}

Subset subset_from_name(std::string_view s) {
    for (Subset x : {Subset::Align, Subset::Conflict, Subset::MissingAlign, Subset::MissingConflict})
        if (s == subset_name(x)) return x;
    throw Error(ErrorKind::Parse, "unknown subset '" + std::string(s) + "'");
}

const char* split_name(Split s) {
    switch (s) {
        case Split::Pretrain: return "pretrain";
        case Split::Train: return "train";
        case Split::Valid: return "valid";
        case Split::Test: return "test";
        case Split::None: return "none";
    }
    return "?";
}

Split split_from_name(std::string_view s) {
    for (Split x : {Split::Pretrain, Split::Train, Split::Valid, Split::Test, Split::None})
        if (s == split_name(x)) return x;
    throw Error(ErrorKind::Parse, "unknown split '" + std::string(s) + "'");
}

bool is_missing(Subset s) { return s == Subset::MissingAlign || s == Subset::MissingConflict; }

// ------------------------------------------------------------ config

void GeneratorConfig::validate() const {
    auto bad = [](const std::string& m) { throw Error(ErrorKind::Config, m); };
    if (n_groups <= 0 || n_pretrain < 0) bad("sample counts must be positive");
    double ps = 0;
    for (double p : class_prior) {
        if (p < 0) bad("negative class prior");
        ps += p;
    }
    if (std::abs(ps - 1.0) > 1e-9) bad("class priors must sum to 1");
    double fs = 0;
    int nz = 0;
    for (double p : flip_dist) {
        if (p < 0) bad("negative flip probability");
        fs += p;
        nz += p > 0;
    }
    if (std::abs(fs - 1.0) > 1e-9) bad("flip distribution must sum to 1");
    if (conflict_rate < 0 || conflict_rate > 1) bad("conflict rate outside [0, 1]");
    if (single_frac < 0 || single_frac > 1) bad("single-conflict fraction outside [0, 1]");
    if (conflict_rate > 0 && single_frac < 1 && nz < 2)
        bad("two-modality conflicts requested but only one modality can be flipped");
    if (intensity_jitter < 0 || intensity_jitter > 1) bad("intensity jitter outside [0, 1]");
    if (feat_dim < 2) bad("feature dimension must be at least 2");
    if (n_T <= 0 || n_A <= 0 || n_V <= 0) bad("token counts must be positive");
    if (n_V <= n_T || n_V <= n_A) bad("video must have more tokens than text and audio");
    if (rho < 0 || rho >= 1) bad("video redundancy must be in [0, 1)");
    if (n_informative() < 1) bad("no informative video token left");
    for (double s : noise)
        if (s <= 0) bad("noise scales must be positive");
    if (bg_noise <= 0) bad("background noise must be positive");
    if (decimals < 1 || decimals > 12) bad("decimals outside [1, 12]");
}

int GeneratorConfig::n_informative() const { return int(std::lround((1.0 - rho) * n_V)); }

void to_json(json& j, const GeneratorConfig& c) {
    j = json{{"n_groups", c.n_groups},
             {"n_pretrain", c.n_pretrain},
             {"class_prior", c.class_prior},
             {"conflict_rate", c.conflict_rate},
             {"single_frac", c.single_frac},
             {"flip_dist", c.flip_dist},
             {"intensity_jitter", c.intensity_jitter},
             {"feat_dim", c.feat_dim},
             {"n_T", c.n_T},
             {"n_A", c.n_A},
             {"n_V", c.n_V},
             {"rho", c.rho},
             {"noise", c.noise},
             {"bg_noise", c.bg_noise},
             {"r_weak", c.r_weak},
             {"r_strong", c.r_strong},
             {"r_neutral", c.r_neutral},
             {"signature_norm", c.signature_norm},
             {"decimals", c.decimals},
             {"scheme", scheme_name(c.scheme)},
             {"seed", c.seed}};
}

void from_json(const json& j, GeneratorConfig& c) {
    GeneratorConfig d;
    auto get = [&](const char* k, auto& dst) {
        if (j.contains(k)) j.at(k).get_to(dst);
    };
    get("n_groups", d.n_groups);
    get("n_pretrain", d.n_pretrain);
    get("class_prior", d.class_prior);
    get("conflict_rate", d.conflict_rate);
    get("single_frac", d.single_frac);
    get("flip_dist", d.flip_dist);
    get("intensity_jitter", d.intensity_jitter);
    get("feat_dim", d.feat_dim);
    get("n_T", d.n_T);
    get("n_A", d.n_A);
    get("n_V", d.n_V);
    get("rho", d.rho);
    get("noise", d.noise);
    get("bg_noise", d.bg_noise);
    get("r_weak", d.r_weak);
    get("r_strong", d.r_strong);
    get("r_neutral", d.r_neutral);
    get("signature_norm", d.signature_norm);
    get("decimals", d.decimals);
    get("seed", d.seed);
    if (j.contains("scheme")) d.scheme = scheme_from_name(j.at("scheme").get<std::string>());
    c = d;
}

// ------------------------------------------------------------ world

namespace {

std::vector<double> unit(Rng& rng, int n) {
    std::vector<double> v(n);
    double s = 0;
    for (double& x : v) {
        x = rng.normal();
        s += x * x;
    }
    s = std::sqrt(s);
    for (double& x : v) x /= s;
    return v;
}

uint64_t derive(uint64_t seed, uint64_t tag) {
    uint64_t z = seed * 0x9e3779b97f4a7c15ULL + tag;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    return z ^ (z >> 31);
}

int categorical(Rng& rng, const double* p, int n) {
    double u = rng.uniform(), c = 0;
    for (int i = 0; i < n; ++i) {
        c += p[i];
        if (u < c) return i;
    }
    for (int i = n - 1; i >= 0; --i)
        if (p[i] > 0) return i;
    return n - 1;
}

}  // namespace

World::World(const GeneratorConfig& c, Rng& rng) {
    axis = unit(rng, c.feat_dim);
    neutral = unit(rng, c.feat_dim);
    double d = 0;
    for (int i = 0; i < c.feat_dim; ++i) d += axis[i] * neutral[i];
    double s = 0;
    for (int i = 0; i < c.feat_dim; ++i) {
        neutral[i] -= d * axis[i];
        s += neutral[i] * neutral[i];
    }
    s = std::sqrt(s);
    for (double& x : neutral) x /= s;
    for (int m = 0; m < kMods; ++m) {
        signature[m] = unit(rng, c.feat_dim);
        for (double& x : signature[m]) x *= c.signature_norm;
    }
}

std::vector<double> World::center(const GeneratorConfig& c, int m, int y) const {
    std::vector<double> v = signature[m];
    const double off[] = {-c.r_strong, -c.r_weak, 0.0, c.r_weak, c.r_strong};
    for (int i = 0; i < c.feat_dim; ++i) v[i] += y == Neu ? c.r_neutral * neutral[i] : off[y] * axis[i];
    return v;
}

// ------------------------------------------------------------ generator

namespace {
GeneratorConfig checked(GeneratorConfig c) {
    c.validate();
    return c;
}
}  // namespace

Generator::Generator(GeneratorConfig c) : c_(checked(std::move(c))), wrng_(derive(c_.seed, 1)), world_(c_, wrng_) {}

Sample Generator::draw(Rng& rng, double conflict_rate, const std::string& id) {
    Sample s;
    s.id = id;
    s.group_id = id;
    s.scheme = c_.scheme;
    int ygt = categorical(rng, c_.class_prior.data(), kClasses);
    int z = polarity(ygt);
    std::array<int, kMods> ys{ygt, ygt, ygt};
    std::array<bool, kMods> flipped{false, false, false};
    if (rng.uniform() < conflict_rate) {
        int nf = rng.uniform() < c_.single_frac ? 1 : 2;
        std::array<double, kMods> p = c_.flip_dist;
        for (int f = 0; f < nf; ++f) {
            double tot = p[0] + p[1] + p[2];
            std::array<double, kMods> q{p[0] / tot, p[1] / tot, p[2] / tot};
            int j = categorical(rng, q.data(), kMods);
            flipped[j] = true;
            p[j] = 0.0;
            std::vector<int> cands;
            for (int y = 0; y < kClasses; ++y)
                if (polarity(y) != z) cands.push_back(y);
            ys[j] = cands[rng.below(int(cands.size()))];
        }
    }
    if (z != 0 && rng.uniform() < c_.intensity_jitter) {
        std::vector<int> agree;
        for (int m = 0; m < kMods; ++m)
            if (!flipped[m]) agree.push_back(m);
        if (!agree.empty()) {
            int j = agree[rng.below(int(agree.size()))];
            static const int swap[] = {WN, N, Neu, P, WP};
            ys[j] = swap[ygt];
        }
    }
    auto pick = [&](int y) {
        auto g = score_grid(y, c_.scheme);
        return g[rng.below(int(g.size()))];
    };
    for (int m = 0; m < kMods; ++m) {
        s.score[m] = pick(ys[m]);
        s.y[m] = map_score(s.score[m], c_.scheme);
    }
    s.score_gt = pick(ygt);
    s.y_gt = map_score(s.score_gt, c_.scheme);

    const int F = c_.feat_dim;
    const int cnt[] = {c_.n_T, c_.n_A, c_.n_V};
    for (int m = 0; m < kMods; ++m) {
        auto ctr = world_.center(c_, m, s.y[m]);
        std::vector<char> inf(cnt[m], 1);
        if (m == V) {
            std::vector<int> idx(cnt[m]);
            std::iota(idx.begin(), idx.end(), 0);
            rng.shuffle(idx.begin(), idx.end());
            std::fill(inf.begin(), inf.end(), 0);
            for (int k = 0; k < c_.n_informative(); ++k) inf[idx[k]] = 1;
        }
        Tensor tok(cnt[m], F);
        for (int k = 0; k < cnt[m]; ++k) {
            if (inf[k]) s.informative[m].push_back(k);
            for (int f = 0; f < F; ++f) {
                double x = inf[k] ? ctr[f] + c_.noise[m] * rng.normal()
                                  : world_.signature[m][f] + c_.bg_noise * rng.normal();
                tok(k, f) = round_to(x, c_.decimals);
            }
        }
        s.tokens[m] = std::make_shared<const Tensor>(std::move(tok));
    }
    s.subset = partition(s);
    return s;
}

namespace {
std::string make_id(char p, int i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%c%06d", p, i);
    return buf;
}
}  // namespace

std::vector<Sample> Generator::generate() {
    Rng rng(derive(c_.seed, 2));
    std::vector<Sample> out;
    out.reserve(c_.n_groups);
    for (int i = 0; i < c_.n_groups; ++i) out.push_back(draw(rng, c_.conflict_rate, make_id('g', i)));
    return out;
}

std::vector<Sample> Generator::pretrain_corpus() {
    Rng rng(derive(c_.seed, 3));
    std::vector<Sample> out;
    out.reserve(c_.n_pretrain);
    for (int i = 0; i < c_.n_pretrain; ++i) {
        Sample s = draw(rng, 0.0, make_id('p', i));
        s.split = Split::Pretrain;
        out.push_back(std::move(s));
    }
    return out;
}

// ------------------------------------------------------------ partition / expand / split

Subset partition(const Sample& s) {
    int zg = polarity(s.y_gt);
    bool ok = true;
    for (int m = 0; m < kMods; ++m)
        if (s.avail[m] && polarity(s.y[m]) != zg) ok = false;
    if (count_avail(s.avail) == kMods) return ok ? Subset::Align : Subset::Conflict;
    return ok ? Subset::MissingAlign : Subset::MissingConflict;
}

void partition(std::vector<Sample>& ds) {
    for (auto& s : ds) s.subset = partition(s);
}

std::vector<Sample> expand_missing(const std::vector<Sample>& full) {
    std::vector<Sample> out;
    out.reserve(full.size() * 3);
    for (const auto& s : full) {
        if (count_avail(s.avail) != kMods) throw Error(ErrorKind::Usage, "sample " + s.id + " already has a missing modality");
        for (int drop : {V, A, T}) {  // leaves {T,A}, {T,V}, {A,V}
            Sample c = s;
            c.avail[drop] = false;
            c.tokens[drop].reset();
            c.informative[drop].clear();
            c.id = s.id + "/no" + mod_name(drop);
            c.subset = partition(c);
            out.push_back(std::move(c));
        }
    }
    return out;
}

void split(std::vector<Sample>& ds, uint64_t seed) {
    std::vector<std::string> order;
    std::map<std::string, int> cls;
    for (const auto& s : ds) {
        if (s.split == Split::Pretrain) continue;
        if (cls.emplace(s.group_id, s.y_gt).second) order.push_back(s.group_id);
    }
    if (order.size() < 10) throw Error(ErrorKind::Config, "too few groups to stratify (" + std::to_string(order.size()) + ")");
    std::array<std::vector<std::string>, kClasses> by;
    for (const auto& g : order) by[cls[g]].push_back(g);
    Rng rng(derive(seed, 4));
    std::map<std::string, Split> where;
    for (auto& v : by) {
        rng.shuffle(v.begin(), v.end());
        std::size_t n = v.size();
        std::size_t ntr = std::size_t(std::lround(0.7 * double(n)));
        std::size_t nva = std::size_t(std::lround(0.1 * double(n)));
        for (std::size_t i = 0; i < n; ++i) where[v[i]] = i < ntr ? Split::Train : (i < ntr + nva ? Split::Valid : Split::Test);
    }
    for (auto& s : ds)
        if (s.split != Split::Pretrain) s.split = where[s.group_id];
}

std::vector<const Sample*> Dataset::select(Split sp) const {
    std::vector<const Sample*> out;
    for (const auto& s : samples)
        if (s.split == sp) out.push_back(&s);
    return out;
}

std::vector<const Sample*> Dataset::select(Split sp, Subset sub) const {
    std::vector<const Sample*> out;
    for (const auto& s : samples)
        if (s.split == sp && s.subset == sub) out.push_back(&s);
    return out;
}

Dataset build_benchmark(const GeneratorConfig& c) {
    Generator gen(c);
    Dataset d;
    d.config = gen.config();
    auto full = gen.generate();
    split(full, c.seed);
    auto miss = expand_missing(full);
    d.samples = gen.pretrain_corpus();
    d.samples.reserve(d.samples.size() + full.size() + miss.size());
    for (auto& s : full) d.samples.push_back(std::move(s));
    for (auto& s : miss) d.samples.push_back(std::move(s));
    return d;
}

// ------------------------------------------------------------ io

std::string sample_to_json_line(const Sample& s) {
    std::string o;
    o.reserve(16384);
    o += "{\"id\":\"" + s.id + "\",\"group_id\":\"" + s.group_id + "\",\"availability\":[";
    bool first = true;
    for (int m = 0; m < kMods; ++m) {
        if (!s.avail[m]) continue;
        if (!first) o += ',';
        o += '"';
        o += mod_name(m);
        o += '"';
        first = false;
    }
    o += "],\"tokens\":{";
    for (int m = 0; m < kMods; ++m) {
        if (m) o += ',';
        o += '"';
        o += mod_name(m);
        o += "\":[";
        if (s.avail[m] && s.tokens[m]) {
            const Tensor& t = *s.tokens[m];
            for (std::size_t k = 0; k < t.rows(); ++k) {
                if (k) o += ',';
                o += '[';
                for (std::size_t f = 0; f < t.cols(); ++f) {
                    if (f) o += ',';
                    o += fmt_num(t(k, f));
                }
                o += ']';
            }
        }
        o += ']';
    }
    o += "},\"informative_indices\":{";
    for (int m = 0; m < kMods; ++m) {
        if (m) o += ',';
        o += '"';
        o += mod_name(m);
        o += "\":[";
        for (std::size_t k = 0; k < s.informative[m].size(); ++k) {
            if (k) o += ',';
            o += std::to_string(s.informative[m][k]);
        }
        o += ']';
    }
    o += "},\"y_T\":" + fmt_num(s.score[T]) + ",\"y_A\":" + fmt_num(s.score[A]) + ",\"y_V\":" + fmt_num(s.score[V]) +
         ",\"y_GT\":" + fmt_num(s.score_gt);
    o += ",\"subset\":\"";
    o += subset_name(s.subset);
    o += "\",\"split\":\"";
    o += split_name(s.split);
    o += "\",\"scheme\":\"";
    o += scheme_name(s.scheme);
    o += "\"}";
    return o;
}

void write_dataset(const Dataset& d, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error(ErrorKind::Io, "cannot write " + path);
    json h{{"format", "mmsteer-dataset"}, {"version", 1}, {"records", d.samples.size()}, {"generator", d.config}};
    f << h.dump() << '\n';
    for (const auto& s : d.samples) f << sample_to_json_line(s) << '\n';
    if (!f) throw Error(ErrorKind::Io, "write failed for " + path);
}

namespace {

Sample sample_from_json(const json& j) {
    Sample s;
    s.id = j.at("id").get<std::string>();
    s.group_id = j.at("group_id").get<std::string>();
    s.avail = {false, false, false};
    for (const auto& m : j.at("availability")) s.avail[mod_from_name(m.get<std::string>())] = true;
    s.scheme = scheme_from_name(j.at("scheme").get<std::string>());
    const char* yk[] = {"y_T", "y_A", "y_V"};
    for (int m = 0; m < kMods; ++m) {
        s.score[m] = j.at(yk[m]).get<double>();
        s.y[m] = map_score(s.score[m], s.scheme);
    }
    s.score_gt = j.at("y_GT").get<double>();
    s.y_gt = map_score(s.score_gt, s.scheme);
    const auto& tk = j.at("tokens");
    const auto& inf = j.at("informative_indices");
    for (int m = 0; m < kMods; ++m) {
        const auto& rows = tk.at(mod_name(m));
        if (s.avail[m] != !rows.empty()) throw Error(ErrorKind::Parse, s.id + ": tokens present iff modality available");
        if (s.avail[m]) {
            std::size_t n = rows.size(), f = rows[0].size();
            Tensor t(n, f);
            for (std::size_t k = 0; k < n; ++k) {
                if (rows[k].size() != f) throw Error(ErrorKind::Parse, s.id + ": ragged token array");
                for (std::size_t c = 0; c < f; ++c) t(k, c) = rows[k][c].get<double>();
            }
            s.tokens[m] = std::make_shared<const Tensor>(std::move(t));
        }
        for (const auto& k : inf.at(mod_name(m))) s.informative[m].push_back(k.get<int>());
    }
    s.subset = subset_from_name(j.at("subset").get<std::string>());
    s.split = split_from_name(j.at("split").get<std::string>());
    return s;
}

}  // namespace

Dataset read_dataset(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error(ErrorKind::Io, "cannot read " + path);
    std::string line;
    if (!std::getline(f, line)) throw Error(ErrorKind::Parse, path + ": empty file");
    Dataset d;
    try {
        json h = json::parse(line);
        if (h.value("format", "") != "mmsteer-dataset") throw Error(ErrorKind::Parse, path + ": not a dataset file");
        if (h.value("version", 0) != 1) throw Error(ErrorKind::Parse, path + ": unsupported dataset version");
        d.config = h.at("generator").get<GeneratorConfig>();
        std::map<std::string, std::size_t> full_of;
        while (std::getline(f, line)) {
            if (line.empty()) continue;
            Sample s = sample_from_json(json::parse(line));
            auto it = full_of.find(s.group_id);
            if (count_avail(s.avail) == kMods) {
                full_of[s.group_id] = d.samples.size();
            } else if (it != full_of.end()) {
                // share token storage with the full clip when identical
                const Sample& src = d.samples[it->second];
                for (int m = 0; m < kMods; ++m)
                    if (s.avail[m] && src.tokens[m] && src.tokens[m]->v == s.tokens[m]->v) s.tokens[m] = src.tokens[m];
            }
            d.samples.push_back(std::move(s));
        }
        if (d.samples.size() != h.at("records").get<std::size_t>()) throw Error(ErrorKind::Parse, path + ": record count mismatch");
    } catch (const json::exception& e) {
        throw Error(ErrorKind::Parse, path + ": " + e.what());
    }
    return d;
}

}  // namespace mms
