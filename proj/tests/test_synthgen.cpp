#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <map>
#include <set>

#include "mmsteer/checkpoint.hpp"
#include "mmsteer/synthgen.hpp"

using namespace mms;

namespace {

Sample with_labels(std::array<int, kMods> y, int gt) {
    Sample s;
    s.y = y;
    s.y_gt = gt;
    for (int m = 0; m < kMods; ++m) s.tokens[m] = std::make_shared<const Tensor>(4, 2);
    s.subset = partition(s);
    return s;
}

GeneratorConfig small(int groups, uint64_t seed = 7) {
    GeneratorConfig c;
    c.n_groups = groups;
    c.n_pretrain = 50;
    c.seed = seed;
    return c;
}

}  // namespace

TEST_CASE("score mapping on both grids") {
    CHECK(map_score(-0.8, Scheme::CHSIMS) == N);
    CHECK(map_score(-0.6, Scheme::MOSI) == N);
    CHECK(map_score(-0.6, Scheme::CHSIMS) == WN);
    CHECK(map_score(0.0, Scheme::CHSIMS) == Neu);
    CHECK(map_score(0.0, Scheme::MOSI) == Neu);
    CHECK(map_score(1.0, Scheme::CHSIMS) == P);
    CHECK(map_score(0.2, Scheme::MOSI) == WP);
    CHECK_THROWS_AS(map_score(1.5, Scheme::CHSIMS), Error);
    CHECK_THROWS_AS(map_score(std::nan(""), Scheme::CHSIMS), Error);
}

TEST_CASE("every grid point maps back to its own class") {
    for (Scheme s : {Scheme::CHSIMS, Scheme::MOSI}) {
        std::size_t total = 0;
        for (int y = 0; y < kClasses; ++y)
            for (double x : score_grid(y, s)) {
                CHECK(map_score(x, s) == y);
                ++total;
            }
        CHECK(total == 11);
    }
    CHECK(representative_score(N, Scheme::CHSIMS) == doctest::Approx(-0.9));
    CHECK(representative_score(WN, Scheme::CHSIMS) == doctest::Approx(-0.4));
    CHECK(representative_score(Neu, Scheme::CHSIMS) == 0.0);
    CHECK(representative_score(P, Scheme::CHSIMS) == doctest::Approx(0.9));
}

TEST_CASE("partition by polarity agreement") {
    CHECK(with_labels({P, WP, P}, P).subset == Subset::Align);
    CHECK(with_labels({P, P, N}, P).subset == Subset::Conflict);
    CHECK(with_labels({Neu, Neu, Neu}, Neu).subset == Subset::Align);
    // intensity differences alone stay aligned
    CHECK(with_labels({N, WN, N}, WN).subset == Subset::Align);
}

TEST_CASE("missing expansion is one to three with re-tagging") {
    Sample s = with_labels({P, N, P}, P);  // A disagrees
    s.id = s.group_id = "x";
    auto out = expand_missing({s});
    REQUIRE(out.size() == 3);
    std::map<std::string, Subset> tag;
    for (const auto& c : out) {
        tag[c.id] = c.subset;
        CHECK(c.group_id == "x");
        CHECK(count_avail(c.avail) == 2);
    }
    CHECK(tag.at("x/noA") == Subset::MissingAlign);
    CHECK(tag.at("x/noV") == Subset::MissingConflict);
    CHECK(tag.at("x/noT") == Subset::MissingConflict);

    std::vector<Sample> hundred(100, s);
    CHECK(expand_missing(hundred).size() == 300);
    CHECK_THROWS_AS(expand_missing(out), Error);
}

TEST_CASE("conflict rate 0 gives only aligned samples") {
    GeneratorConfig c = small(300);
    c.conflict_rate = 0.0;
    auto xs = Generator(c).generate();
    for (const auto& s : xs) CHECK(s.subset == Subset::Align);
}

TEST_CASE("uniform single flips hit each modality about a third of the time") {
    GeneratorConfig c = small(6000);
    c.conflict_rate = 1.0;
    c.single_frac = 1.0;
    c.flip_dist = {1.0 / 3, 1.0 / 3, 1.0 / 3};
    c.intensity_jitter = 0.0;
    c.n_V = 16;
    c.n_T = c.n_A = 4;
    auto xs = Generator(c).generate();
    std::array<int, kMods> hits{};
    for (const auto& s : xs) {
        int k = 0;
        for (int m = 0; m < kMods; ++m)
            if (polarity(s.y[m]) != polarity(s.y_gt)) {
                ++hits[m];
                ++k;
            }
        CHECK(k == 1);
    }
    for (int m = 0; m < kMods; ++m) CHECK(std::abs(hits[m] / 6000.0 - 1.0 / 3) < 0.03);
}

TEST_CASE("realized conflict rate tracks the configured rate") {
    GeneratorConfig c = small(4000);
    c.n_V = 16;
    c.n_T = c.n_A = 4;
    auto xs = Generator(c).generate();
    int conf = 0;
    for (const auto& s : xs) conf += s.subset == Subset::Conflict;
    CHECK(std::abs(conf / 4000.0 - c.conflict_rate) < 0.02);
}

TEST_CASE("background video tokens say nothing about polarity") {
    // least-squares probe on the mean background token, fit on half, scored on the other half
    GeneratorConfig c = small(3000, 21);
    c.conflict_rate = 0.0;
    auto xs = Generator(c).generate();
    std::vector<std::vector<double>> X;
    std::vector<double> y;
    for (const auto& s : xs) {
        int z = polarity(s.y_gt);
        if (z == 0) continue;
        std::set<int> inf(s.informative[V].begin(), s.informative[V].end());
        std::vector<double> f(c.feat_dim + 1, 0.0);
        int n = 0;
        for (int k = 0; k < c.n_V; ++k) {
            if (inf.count(k)) continue;
            for (int j = 0; j < c.feat_dim; ++j) f[j] += (*s.tokens[V])(k, j);
            ++n;
        }
        for (int j = 0; j < c.feat_dim; ++j) f[j] /= n;
        f[c.feat_dim] = 1.0;
        X.push_back(f);
        y.push_back(z);
    }
    const std::size_t half = X.size() / 2, D = X[0].size();
    // normal equations with a small ridge, solved by Gaussian elimination
    std::vector<std::vector<double>> M(D, std::vector<double>(D + 1, 0.0));
    for (std::size_t i = 0; i < half; ++i)
        for (std::size_t a = 0; a < D; ++a) {
            for (std::size_t b = 0; b < D; ++b) M[a][b] += X[i][a] * X[i][b];
            M[a][D] += X[i][a] * y[i];
        }
    for (std::size_t a = 0; a < D; ++a) M[a][a] += 1e-6;
    for (std::size_t p = 0; p < D; ++p) {
        for (std::size_t r = p + 1; r < D; ++r) {
            double f = M[r][p] / M[p][p];
            for (std::size_t k = p; k <= D; ++k) M[r][k] -= f * M[p][k];
        }
    }
    std::vector<double> w(D);
    for (std::size_t p = D; p-- > 0;) {
        double s = M[p][D];
        for (std::size_t k = p + 1; k < D; ++k) s -= M[p][k] * w[k];
        w[p] = s / M[p][p];
    }
    std::size_t ok = 0, n = 0;
    for (std::size_t i = half; i < X.size(); ++i, ++n) {
        double s = 0;
        for (std::size_t a = 0; a < D; ++a) s += w[a] * X[i][a];
        ok += (s > 0 ? 1 : -1) == int(y[i]);
    }
    CHECK(std::abs(double(ok) / n - 0.5) < 0.05);
}

TEST_CASE("informative video count follows redundancy") {
    GeneratorConfig c = small(20);
    auto xs = Generator(c).generate();
    for (const auto& s : xs) {
        CHECK(int(s.informative[V].size()) == c.n_informative());
        CHECK(int(s.informative[T].size()) == c.n_T);
        CHECK(s.tokens[V]->rows() == std::size_t(c.n_V));
    }
    CHECK(c.n_informative() == 16);
}

TEST_CASE("split is 7:1:2 by group and keeps groups together") {
    Dataset d = build_benchmark(small(1000));
    std::map<std::string, std::set<Split>> where;
    std::map<Split, std::set<std::string>> groups;
    for (const auto& s : d.samples) {
        if (s.split == Split::Pretrain) continue;
        where[s.group_id].insert(s.split);
        groups[s.split].insert(s.group_id);
    }
    for (const auto& [g, sp] : where) CHECK(sp.size() == 1);
    CHECK(std::abs(int(groups[Split::Train].size()) - 700) <= 3);
    CHECK(std::abs(int(groups[Split::Valid].size()) - 100) <= 3);
    CHECK(std::abs(int(groups[Split::Test].size()) - 200) <= 3);
}

TEST_CASE("class histogram per split matches the global one") {
    Dataset d = build_benchmark(small(2000, 3));
    std::map<Split, std::array<double, kClasses>> h;
    std::map<Split, double> n;
    std::array<double, kClasses> all{};
    double na = 0;
    for (const auto& s : d.samples) {
        if (s.split == Split::Pretrain || is_missing(s.subset)) continue;
        h[s.split][s.y_gt] += 1;
        n[s.split] += 1;
        all[s.y_gt] += 1;
        na += 1;
    }
    for (Split sp : {Split::Train, Split::Valid, Split::Test})
        for (int y = 0; y < kClasses; ++y) CHECK(std::abs(h[sp][y] / n[sp] - all[y] / na) < 0.02);
}

TEST_CASE("split refuses tiny datasets") {
    auto xs = Generator(small(5)).generate();
    CHECK_THROWS_AS(split(xs, 1), Error);
}

TEST_CASE("stored tags agree with recomputed ones") {
    Dataset d = build_benchmark(small(400));
    for (const auto& s : d.samples) CHECK(partition(s) == s.subset);
}

TEST_CASE("dataset file round trip and byte determinism") {
    auto dir = std::filesystem::temp_directory_path() / "mmsteer_synth_test";
    std::filesystem::create_directories(dir);
    Dataset a = build_benchmark(small(60, 9));
    Dataset b = build_benchmark(small(60, 9));
    write_dataset(a, (dir / "a.jsonl").string());
    write_dataset(b, (dir / "b.jsonl").string());
    CHECK(read_file((dir / "a.jsonl").string()) == read_file((dir / "b.jsonl").string()));

    Dataset r = read_dataset((dir / "a.jsonl").string());
    REQUIRE(r.samples.size() == a.samples.size());
    for (std::size_t i = 0; i < a.samples.size(); ++i) {
        const Sample &x = a.samples[i], &y = r.samples[i];
        CHECK(x.id == y.id);
        CHECK(x.y == y.y);
        CHECK(x.y_gt == y.y_gt);
        CHECK(x.subset == y.subset);
        CHECK(x.split == y.split);
        CHECK(x.avail == y.avail);
        CHECK(x.informative == y.informative);
        for (int m = 0; m < kMods; ++m)
            if (x.avail[m]) CHECK(x.tokens[m]->v == y.tokens[m]->v);
    }
    write_dataset(r, (dir / "c.jsonl").string());
    CHECK(read_file((dir / "a.jsonl").string()) == read_file((dir / "c.jsonl").string()));
    std::filesystem::remove_all(dir);
}

TEST_CASE("different seeds give different data") {
    auto a = Generator(small(10, 1)).generate();
    auto b = Generator(small(10, 2)).generate();
    CHECK(a[0].tokens[T]->v != b[0].tokens[T]->v);
}

TEST_CASE("bad generator configs are rejected") {
    GeneratorConfig c;
    c.conflict_rate = 1.5;
    CHECK_THROWS_AS(c.validate(), Error);
    c = GeneratorConfig{};
    c.flip_dist = {0.5, 0.5, 0.5};
    CHECK_THROWS_AS(c.validate(), Error);
    c = GeneratorConfig{};
    c.n_V = 8;
    CHECK_THROWS_AS(c.validate(), Error);
}
