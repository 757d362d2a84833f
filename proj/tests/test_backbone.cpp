#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <numeric>

#include "gradcheck.hpp"
#include "mmsteer/backbone.hpp"
#include "mmsteer/checkpoint.hpp"

using namespace mms;

namespace {

GeneratorConfig tiny_gen(uint64_t seed = 1) {
    GeneratorConfig g;
    g.n_groups = 40;
    g.n_pretrain = 20;
    g.feat_dim = 4;
    g.n_T = 3;
    g.n_A = 3;
    g.n_V = 8;
    g.seed = seed;
    return g;
}

BackboneConfig tiny_bb() {
    BackboneConfig c;
    c.L = 4;
    c.H = 2;
    c.d = 8;
    c.mlp = 8;
    c.feat_dim = 4;
    c.n_T = 3;
    c.n_A = 3;
    c.n_V = 8;
    return c;
}

double video_mass(const AttentionTrace& tr, int l, int h) { return tr.mass(l, h)[V]; }

}  // namespace

TEST_CASE("layout counts follow the config") {
    GeneratorConfig g;
    g.n_groups = 2;
    g.n_pretrain = 0;
    Generator gen(g);
    Sample s = gen.generate()[0];
    Backbone bb{BackboneConfig{}};
    auto [E, lay] = bb.embed(s);
    CHECK(lay.keys() == 89);
    CHECK(E.rows() == 88);
    CHECK(lay.count(T) == 12);
    CHECK(lay.count(V) == 64);

    Sample m = s;
    m.avail[V] = false;
    auto [E2, lay2] = bb.embed(m);
    CHECK(lay2.keys() == 25);
    CHECK(lay2.count(V) == 0);
    CHECK(lay.modality_of(88) == -1);
    CHECK(lay.modality_of(0) == T);
    CHECK(lay.modality_of(30) == V);
    CHECK(BackboneConfig{}.n_V >= 4 * std::max(BackboneConfig{}.n_T, BackboneConfig{}.n_A));
}

TEST_CASE("embedding and forward are pure") {
    Sample s = Generator(tiny_gen()).generate()[0];
    Backbone bb(tiny_bb());
    CHECK(bb.embed(s).first.v == bb.embed(s).first.v);
    auto a = bb.forward(s), b = bb.forward(s);
    CHECK(a.logits.v == b.logits.v);
    for (int l = 0; l < 4; ++l)
        for (int h = 0; h < 2; ++h) CHECK(a.trace.post[l][h].v == b.trace.post[l][h].v);
}

TEST_CASE("zero-bias hook changes nothing") {
    Sample s = Generator(tiny_gen()).generate()[3];
    Backbone bb(tiny_bb());
    auto base = bb.forward(s);
    AttentionHook zero = [](const LayerContext& c) {
        return std::vector<Tensor>(2, Tensor(1, c.layout->keys()));
    };
    CHECK(bb.forward(s, {zero}).logits.v == base.logits.v);
    AttentionHook none = [](const LayerContext&) { return std::vector<Tensor>{}; };
    CHECK(bb.forward(s, {none}).logits.v == base.logits.v);
}

TEST_CASE("raising one modality's logits raises its attention on every row") {
    Sample s = Generator(tiny_gen()).generate()[5];
    Backbone bb(tiny_bb());
    auto base = bb.forward(s);
    AttentionHook up = [](const LayerContext& c) {
        std::vector<Tensor> out(2, Tensor(1, c.layout->keys()));
        for (auto& r : out)
            for (int k = c.layout->begin[V]; k < c.layout->end[V]; ++k) r.v[k] = 10.0;
        return out;
    };
    auto st = bb.forward(s, {up});
    for (int l = 0; l < 4; ++l)
        for (int h = 0; h < 2; ++h) {
            // compare against the pre-hook row of the same pass
            double before = 0;
            for (int k = st.trace.layout.begin[V]; k < st.trace.layout.end[V]; ++k) before += st.trace.pre[l][h].v[k];
            CHECK(video_mass(st.trace, l, h) > before);
        }
    CHECK(video_mass(st.trace, 0, 0) > video_mass(base.trace, 0, 0));
}

TEST_CASE("two hooks compose additively") {
    Sample s = Generator(tiny_gen()).generate()[2];
    Backbone bb(tiny_bb());
    Rng rng(4);
    std::vector<std::vector<Tensor>> b1(4), b2(4);
    const int K = bb.embed(s).second.keys();
    for (int l = 0; l < 4; ++l)
        for (int h = 0; h < 2; ++h) {
            b1[l].push_back(mms::testing::random_tensor(rng, 1, K));
            b2[l].push_back(mms::testing::random_tensor(rng, 1, K));
        }
    AttentionHook h1 = [&](const LayerContext& c) { return b1[c.layer]; };
    AttentionHook h2 = [&](const LayerContext& c) { return b2[c.layer]; };
    AttentionHook both = [&](const LayerContext& c) {
        auto out = b1[c.layer];
        for (int h = 0; h < 2; ++h)
            for (int k = 0; k < K; ++k) out[h].v[k] += b2[c.layer][h].v[k];
        return out;
    };
    CHECK(bb.forward(s, {h1, h2}).logits.v == bb.forward(s, {both}).logits.v);
}

TEST_CASE("hooks must return rows of the right length") {
    Sample s = Generator(tiny_gen()).generate()[0];
    Backbone bb(tiny_bb());
    AttentionHook bad = [](const LayerContext&) { return std::vector<Tensor>(2, Tensor(1, 3)); };
    CHECK_THROWS_AS(bb.forward(s, {bad}), Error);
}

TEST_CASE("trace rows are distributions with nothing on absent modalities") {
    auto xs = Generator(tiny_gen()).generate();
    Backbone bb(tiny_bb());
    Sample m = xs[1];
    m.avail[A] = false;
    std::vector<int> keep{1, 4};
    for (const Sample* s : {&xs[0], &m}) {
        for (InputView v : {InputView{}, InputView{std::nullopt, &keep}}) {
            auto fr = bb.forward(*s, {}, v);
            for (int l = 0; l < 4; ++l)
                for (int h = 0; h < 2; ++h) {
                    double sum = 0;
                    for (double x : fr.trace.post[l][h].v) sum += x;
                    CHECK(std::abs(sum - 1.0) < 1e-9);
                    CHECK(fr.trace.post[l][h].size() == std::size_t(fr.trace.layout.keys()));
                }
            if (s == &m) CHECK(fr.trace.layout.count(A) == 0);
            if (v.video_keep) CHECK(fr.trace.layout.count(V) == 2);
        }
    }
}

TEST_CASE("argmax ties go to the lower class") {
    CHECK(argmax_logits(Tensor::row({0, 0, 0, 0, 1})).label == P);
    CHECK(argmax_logits(Tensor::row({0, 0, 0, 0, 1})).logit == 1.0);
    CHECK(argmax_logits(Tensor::row({0, 0, 0, 0, 0})).label == N);
}

TEST_CASE("predict agrees with forward") {
    auto xs = Generator(tiny_gen()).generate();
    Backbone bb(tiny_bb());
    for (const auto& s : xs) CHECK(bb.predict(s).label == argmax_logits(bb.forward(s).logits).label);
}

TEST_CASE("withholding every modality runs the query alone") {
    Backbone bb(tiny_bb());
    Tensor e = bb.forward_empty();
    CHECK(e.cols() == 5);
    CHECK(e.all_finite());
    Sample s = Generator(tiny_gen()).generate()[0];
    CHECK_THROWS_AS(bb.forward(s, {}, InputView{Avail{false, false, false}, nullptr}), Error);
}

TEST_CASE("backbone parameter gradients match central differences") {
    auto xs = Generator(tiny_gen(5)).generate();
    Backbone bb(tiny_bb());
    Rng rng(8);
    std::vector<Backbone::Tokens> tk;
    std::vector<int> y;
    for (int i = 0; i < 3; ++i) {
        tk.push_back(bb.gather(xs[i]));
        y.push_back(xs[i].y_gt);
    }
    auto loss = [&](bool backprop) {
        double tot = 0;
        for (std::size_t i = 0; i < tk.size(); ++i) {
            Tape t;
            auto g = bb.build(t, tk[i], backprop ? Backbone::Mode::Train : Backbone::Mode::Frozen, nullptr, nullptr);
            Var l = cross_entropy(g.logits, {y[i]});
            if (backprop) t.backward(l);
            tot += t.value(l).v[0];
        }
        return tot;
    };
    CHECK(mms::testing::param_grad_error(bb.params(), loss, rng, 4) < 1e-4);
}

TEST_CASE("pretraining a text-determined task and freezing") {
    GeneratorConfig g;
    g.n_groups = 10;
    g.n_pretrain = 600;
    g.n_V = 16;
    g.noise = {0.5, 1.35, 1.35};
    g.seed = 12;
    auto xs = Generator(g).pretrain_corpus();
    // audio and video tokens come from other samples, so only text carries the label
    Rng rng(3);
    std::vector<std::size_t> perm(xs.size());
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(perm.begin(), perm.end());
    std::vector<Sample> mixed = xs;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        mixed[i].tokens[A] = xs[perm[i]].tokens[A];
        mixed[i].tokens[V] = xs[perm[(i + 7) % xs.size()]].tokens[V];
    }
    std::vector<const Sample*> ptr;
    for (const auto& s : mixed) ptr.push_back(&s);
    BackboneConfig c;
    c.L = 4;
    c.H = 2;
    c.d = 32;
    c.mlp = 64;
    c.n_V = 16;
    Backbone bb(c);
    PretrainConfig pc;
    pc.epochs = 8;
    pc.lr = 3e-3;
    auto rep = pretrain(bb, ptr, ptr, pc);
    CHECK(rep.heldout_acc >= 0.95);
    CHECK(rep.epoch_loss.back() < rep.epoch_loss.front());
    CHECK(bb.frozen());
    CHECK_THROWS_AS(pretrain(bb, ptr, ptr, pc), Error);
}

TEST_CASE("pretraining reports failure below the accuracy floor") {
    GeneratorConfig g = tiny_gen(2);
    g.n_pretrain = 40;
    auto xs = Generator(g).pretrain_corpus();
    std::vector<const Sample*> ptr;
    for (const auto& s : xs) ptr.push_back(&s);
    Backbone bb(tiny_bb());
    PretrainConfig pc;
    pc.epochs = 1;
    pc.min_accuracy = 1.01;
    CHECK_THROWS_AS(pretrain(bb, ptr, ptr, pc), Error);
}

TEST_CASE("checkpoint round trip is bit exact") {
    Backbone bb(tiny_bb());
    bb.freeze();
    auto path = (std::filesystem::temp_directory_path() / "mmsteer_bb_test.ckpt").string();
    bb.save(path);
    Backbone r = Backbone::load(path);
    CHECK(r.hash() == bb.hash());
    CHECK(r.frozen());
    Sample s = Generator(tiny_gen()).generate()[0];
    CHECK(r.forward(s).logits.v == bb.forward(s).logits.v);
    std::string bytes = read_file(path);
    bytes[bytes.size() - 3] ^= 0x5a;
    CHECK(Backbone::decode(bytes).hash() != bb.hash());
    CHECK_THROWS_AS(Backbone::decode("not a checkpoint"), Error);
    std::filesystem::remove(path);
}

TEST_CASE("bad backbone configs are rejected") {
    BackboneConfig c;
    c.d = 30;
    CHECK_THROWS_AS(c.validate(), Error);
    c = BackboneConfig{};
    c.L = 2;
    CHECK_THROWS_AS(c.validate(), Error);
}
