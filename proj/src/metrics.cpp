#include "mmsteer/metrics.hpp"

#include <cmath>
#include <cstdlib>

namespace mms {

double consistency(const std::vector<int>& yi, const std::vector<int>& yj) {
    if (yi.size() != yj.size()) throw Error(ErrorKind::Usage, "label lists differ in length");
    if (yi.empty()) throw Error(ErrorKind::Degenerate, "consistency of empty label lists");
    long tot = 0;
    for (std::size_t i = 0; i < yi.size(); ++i) {
        if (yi[i] < 0 || yi[i] >= kClasses || yj[i] < 0 || yj[i] >= kClasses) throw Error(ErrorKind::Range, "label outside 0..4");
        tot += std::abs(yi[i] - yj[i]);
    }
    return 1.0 - double(tot) / (4.0 * double(yi.size()));
}

void SubsetPerformance::set(int mask, double v) {
    if (mask < 0 || mask >= kSubsets) throw Error(ErrorKind::Range, "subset mask out of range");
    if (!(v >= 0.0 && v <= 1.0)) throw Error(ErrorKind::Range, "subset accuracy outside [0, 1]");
    v_[mask] = v;
}

double SubsetPerformance::at(int mask) const {
    if (mask < 0 || mask >= kSubsets || !v_[mask]) throw Error(ErrorKind::Usage, "missing subset accuracy for mask " + std::to_string(mask));
    return *v_[mask];
}

bool SubsetPerformance::complete() const {
    for (const auto& v : v_)
        if (!v) return false;
    return true;
}

std::array<double, kMods> psmv(const SubsetPerformance& perf) {
    static const double fact[4] = {1, 1, 2, 6};
    std::array<double, kMods> out{0, 0, 0};
    for (int m = 0; m < kMods; ++m) {
        const int bit = mod_bit(m);
        double s = 0;
        // S ranges over subsets containing m; weight (|S|-1)!(3-|S|)!/3!
        for (int S = 0; S < kSubsets; ++S) {
            if (!(S & bit)) continue;
            int n = __builtin_popcount(unsigned(S));
            double w = fact[n - 1] * fact[3 - n] / fact[3];
            s += w * (perf.at(S) - perf.at(S & ~bit));
        }
        out[m] = s;
    }
    return out;
}

std::optional<std::array<double, kMods>> psmv_shares(const std::array<double, kMods>& v) {
    double z = v[0] + v[1] + v[2];
    if (!(z > 0)) return std::nullopt;
    return std::array<double, kMods>{v[0] / z, v[1] / z, v[2] / z};
}

bool polarity_aligned(const Sample& s, int m) { return s.avail[m] && polarity(s.y[m]) == polarity(s.y_gt); }

bool target_conflict(const Sample& s) {
    int dis = 0;
    for (int m = 0; m < kMods; ++m)
        if (s.avail[m] && polarity(s.y[m]) != polarity(s.y_gt)) ++dis;
    return dis == 1;
}

std::optional<double> gtar(const std::vector<const Sample*>& xs, const std::vector<int>& pred, int m) {
    if (pred.size() != xs.size()) throw Error(ErrorKind::Usage, "predictions do not cover the samples");
    std::size_t num = 0, den = 0;
    for (std::size_t i = 0; i < xs.size(); ++i) {
        const Sample& s = *xs[i];
        if (!target_conflict(s) || !polarity_aligned(s, m)) continue;
        ++den;
        if (pred[i] == s.y_gt) ++num;
    }
    if (den == 0) return std::nullopt;
    return double(num) / double(den);
}

std::optional<double> nmas(const AttentionTrace& tr, int m, int layer, int head, bool post_hook) {
    const Layout& lay = tr.layout;
    int n = lay.count(m);
    if (n <= 0) return std::nullopt;
    const auto& rows = post_hook ? tr.post : tr.pre;
    const Tensor& r = rows.at(layer).at(head);
    double s = 0;
    for (int k = lay.begin[m]; k < lay.end[m]; ++k) s += r.v[k];
    return s / n;
}

double marginal_gain_video(double tav, double ta) { return tav - ta; }
double marginal_gain_video(const SubsetPerformance& perf) {
    return marginal_gain_video(perf.at(kFull), perf.at(mod_bit(T) | mod_bit(A)));
}

ClassMetrics classification_metrics(const std::vector<int>& pred, const std::vector<int>& label, Scheme scheme) {
    if (pred.size() != label.size()) throw Error(ErrorKind::Usage, "prediction and label lists differ in length");
    ClassMetrics out;
    out.n = pred.size();
    if (pred.empty()) return out;
    std::array<int, kClasses> tp{}, fp{}, fn{};
    double ae = 0;
    std::size_t ok = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        int p = pred[i], y = label[i];
        if (p < 0 || p >= kClasses || y < 0 || y >= kClasses) throw Error(ErrorKind::Range, "label outside 0..4");
        if (p == y) {
            ++ok;
            ++tp[p];
        } else {
            ++fp[p];
            ++fn[y];
        }
        ae += std::abs(representative_score(p, scheme) - representative_score(y, scheme));
    }
    // macro average over classes seen in either list
    double f1 = 0;
    int seen = 0;
    for (int c = 0; c < kClasses; ++c) {
        int d = 2 * tp[c] + fp[c] + fn[c];
        if (d == 0) continue;
        f1 += 2.0 * tp[c] / d;
        ++seen;
    }
    out.acc = double(ok) / double(pred.size());
    out.f1 = f1 / seen;
    out.mae = ae / double(pred.size());
    return out;
}

SubsetPerformance subset_performance(const Backbone& bb, const std::vector<const Sample*>& xs) {
    SubsetPerformance perf;
    if (xs.empty()) throw Error(ErrorKind::Degenerate, "subset performance of an empty sample set");
    const int y0 = argmax_logits(bb.forward_empty()).label;
    for (int S = 0; S < kSubsets; ++S) {
        std::size_t ok = 0;
        for (const Sample* s : xs) {
            Avail a{};
            int present = 0;
            for (int m = 0; m < kMods; ++m) {
                a[m] = (S & mod_bit(m)) && s->avail[m];
                present += a[m];
            }
            int y = present ? bb.predict(*s, InputView{a, nullptr}).label : y0;
            ok += y == s->y_gt;
        }
        perf.set(S, double(ok) / double(xs.size()));
    }
    return perf;
}

void to_json(nlohmann::json& j, const ClassMetrics& m) { j = {{"n", m.n}, {"acc", m.acc}, {"f1", m.f1}, {"mae", m.mae}}; }

}  // namespace mms
