#include "mmsteer/tensor.hpp"

#include <cmath>
#include <limits>

namespace mms {

namespace {

// C += A * B      (m x k)(k x n)
void gemm_nn(const double* A, const double* B, double* C, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        double* c = C + i * n;
        const double* a = A + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            double x = a[p];
            if (x == 0.0) continue;
            const double* b = B + p * n;
            for (std::size_t j = 0; j < n; ++j) c[j] += x * b[j];
        }
    }
}

// C += A * B^T    (m x k)(n x k)^T
void gemm_nt(const double* A, const double* B, double* C, std::size_t m, std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* a = A + i * k;
        for (std::size_t j = 0; j < n; ++j) {
            const double* b = B + j * k;
            double s = 0.0;
            for (std::size_t p = 0; p < k; ++p) s += a[p] * b[p];
            C[i * n + j] += s;
        }
    }
}

// C += A^T * B    (k x m)^T (k x n)
void gemm_tn(const double* A, const double* B, double* C, std::size_t k, std::size_t m, std::size_t n) {
    for (std::size_t p = 0; p < k; ++p) {
        const double* a = A + p * m;
        const double* b = B + p * n;
        for (std::size_t i = 0; i < m; ++i) {
            double x = a[i];
            if (x == 0.0) continue;
            double* c = C + i * n;
            for (std::size_t j = 0; j < n; ++j) c[j] += x * b[j];
        }
    }
}

std::string shp(const Tensor& t) {
    return "[" + std::to_string(t.rows()) + "x" + std::to_string(t.cols()) + "]";
}

Tape& tape_of(Var a, Var b) {
    if (!a.tape || a.tape != b.tape) throw Error(ErrorKind::Usage, "operands live on different tapes");
    return *a.tape;
}

Tape& tape_of(Var a) {
    if (!a.tape) throw Error(ErrorKind::Usage, "variable is not on a tape");
    return *a.tape;
}

// broadcast check used by add/sub/mul
bool row_bcast(const Tensor& a, const Tensor& b) {
    if (a.same_shape(b)) return false;
    if (b.rows() == 1 && b.cols() == a.cols()) return true;
    throw Error(ErrorKind::Dimension, "shape mismatch " + shp(a) + " vs " + shp(b));
}

}  // namespace

Tensor Tensor::from(std::size_t r, std::size_t c, std::vector<double> vals) {
    if (vals.size() != r * c) throw Error(ErrorKind::Dimension, "value count does not match shape");
    Tensor t;
    t.shape = {r, c};
    t.v = std::move(vals);
    return t;
}

Tensor Tensor::row(std::vector<double> vals) {
    std::size_t n = vals.size();
    return from(1, n, std::move(vals));
}

bool Tensor::all_finite() const {
    for (double x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

Param::Param(std::string n, Tensor init) : name(std::move(n)), w(std::move(init)) {
    g = Tensor(w.rows(), w.cols());
    m = Tensor(w.rows(), w.cols());
    s = Tensor(w.rows(), w.cols());
}

void Param::zero_grad() { std::fill(g.v.begin(), g.v.end(), 0.0); }

const Tensor& Var::val() const {
    if (!tape) throw Error(ErrorKind::Usage, "variable is not on a tape");
    return tape->value(id);
}

// ---------------------------------------------------------------- tape

Var Tape::push(Tensor val, std::vector<int> in, BackFn fn) {
    if (!val.all_finite()) throw Error(ErrorKind::Numeric, "non-finite value produced " + shp(val));
    Node n;
    n.val = std::move(val);
    for (int i : in) n.needs_grad = n.needs_grad || nodes_[i].needs_grad;
    n.in = std::move(in);
    if (n.needs_grad) n.back = std::move(fn);
    nodes_.push_back(std::move(n));
    return Var{this, int(nodes_.size()) - 1};
}

Var Tape::constant(Tensor t) { return push(std::move(t), {}, nullptr); }

Var Tape::input(Tensor t) {
    Var x = push(std::move(t), {}, nullptr);
    nodes_[x.id].needs_grad = true;
    return x;
}

Var Tape::param(Param& p) {
    Node n;
    n.ext = &p.w;  // no copy; the weights must outlive the tape
    n.param = &p;
    n.needs_grad = true;
    nodes_.push_back(std::move(n));
    return Var{this, int(nodes_.size()) - 1};
}

Var Tape::weight(const Tensor& w) {
    Node n;
    n.ext = &w;
    nodes_.push_back(std::move(n));
    return Var{this, int(nodes_.size()) - 1};
}

void Tape::own(Var x) const {
    if (x.tape != this || x.id < 0 || x.id >= int(nodes_.size()))
        throw Error(ErrorKind::Usage, "variable is not connected to this tape");
}

const Tensor& Tape::value(Var x) const {
    own(x);
    return value(x.id);
}

Tensor& Tape::gacc(int id) {
    Node& n = nodes_[id];
    if (n.param) {
        n.has_grad = true;
        return n.param->g;
    }
    if (!n.has_grad) {
        n.grad = Tensor(value(id).rows(), value(id).cols());
        n.has_grad = true;
    }
    return n.grad;
}

Tensor Tape::grad(Var x) const {
    own(x);
    const Node& n = nodes_[x.id];
    if (n.param) return n.param->g;
    if (n.has_grad) return n.grad;
    return Tensor(value(x.id).rows(), value(x.id).cols());
}

void Tape::backward(Var y) {
    own(y);
    if (value(y.id).size() != 1) throw Error(ErrorKind::Usage, "backward needs a scalar output");
    for (auto& n : nodes_) {
        n.has_grad = false;
        if (!n.param) n.grad = Tensor();
    }
    if (!nodes_[y.id].needs_grad) return;
    gacc(y.id).v[0] = 1.0;
    // nodes are created in topological order, so a reverse sweep visits each once
    for (int i = y.id; i >= 0; --i) {
        Node& n = nodes_[i];
        if (!n.has_grad || !n.needs_grad) continue;
        if (n.back) n.back(*this, i);
    }
}

// ---------------------------------------------------------------- ops

Var matmul(Var a, Var b) {
    Tape& t = tape_of(a, b);
    const Tensor& A = t.value(a);
    const Tensor& B = t.value(b);
    if (A.cols() != B.rows()) throw Error(ErrorKind::Dimension, "matmul " + shp(A) + " x " + shp(B));
    Tensor C(A.rows(), B.cols());
    gemm_nn(A.data(), B.data(), C.data(), A.rows(), A.cols(), B.cols());
    int ia = a.id, ib = b.id;
    return t.push(std::move(C), {ia, ib}, [ia, ib](Tape& t, int self) {
        const Tensor& G = t.gout(self);
        const Tensor& A = t.value(ia);
        const Tensor& B = t.value(ib);
        if (t.needs_grad(ia)) gemm_nt(G.data(), B.data(), t.gacc(ia).data(), G.rows(), G.cols(), B.rows());
        if (t.needs_grad(ib)) gemm_tn(A.data(), G.data(), t.gacc(ib).data(), A.rows(), A.cols(), G.cols());
    });
}

Var matmul_nt(Var a, Var b) {
    Tape& t = tape_of(a, b);
    const Tensor& A = t.value(a);
    const Tensor& B = t.value(b);
    if (A.cols() != B.cols()) throw Error(ErrorKind::Dimension, "matmul_nt " + shp(A) + " x " + shp(B) + "^T");
    Tensor C(A.rows(), B.rows());
    gemm_nt(A.data(), B.data(), C.data(), A.rows(), A.cols(), B.rows());
    int ia = a.id, ib = b.id;
    return t.push(std::move(C), {ia, ib}, [ia, ib](Tape& t, int self) {
        const Tensor& G = t.gout(self);  // m x n
        const Tensor& A = t.value(ia);   // m x k
        const Tensor& B = t.value(ib);   // n x k
        if (t.needs_grad(ia)) gemm_nn(G.data(), B.data(), t.gacc(ia).data(), G.rows(), G.cols(), B.cols());
        if (t.needs_grad(ib)) gemm_tn(G.data(), A.data(), t.gacc(ib).data(), G.rows(), G.cols(), A.cols());
    });
}

namespace {

Var add_sub(Var a, Var b, double sign) {
    Tape& t = tape_of(a, b);
    const Tensor& A = t.value(a);
    const Tensor& B = t.value(b);
    bool bc = row_bcast(A, B);
    Tensor C = A;
    std::size_t n = A.cols();
    for (std::size_t i = 0; i < C.size(); ++i) C.v[i] += sign * B.v[bc ? i % n : i];
    int ia = a.id, ib = b.id;
    return t.push(std::move(C), {ia, ib}, [ia, ib, bc, sign, n](Tape& t, int self) {
        const Tensor& G = t.gout(self);
        if (t.needs_grad(ia)) {
            Tensor& ga = t.gacc(ia);
            for (std::size_t i = 0; i < G.size(); ++i) ga.v[i] += G.v[i];
        }
        if (t.needs_grad(ib)) {
            Tensor& gb = t.gacc(ib);
            for (std::size_t i = 0; i < G.size(); ++i) gb.v[bc ? i % n : i] += sign * G.v[i];
        }
    });
}

}  // namespace

Var add(Var a, Var b) { return add_sub(a, b, 1.0); }
Var sub(Var a, Var b) { return add_sub(a, b, -1.0); }

Var mul(Var a, Var b) {
    Tape& t = tape_of(a, b);
    const Tensor& A = t.value(a);
    const Tensor& B = t.value(b);
    bool bc = row_bcast(A, B);
    std::size_t n = A.cols();
    Tensor C = A;
    for (std::size_t i = 0; i < C.size(); ++i) C.v[i] *= B.v[bc ? i % n : i];
    int ia = a.id, ib = b.id;
    return t.push(std::move(C), {ia, ib}, [ia, ib, bc, n](Tape& t, int self) {
        const Tensor& G = t.gout(self);
        const Tensor& A = t.value(ia);
        const Tensor& B = t.value(ib);
        if (t.needs_grad(ia)) {
            Tensor& ga = t.gacc(ia);
            for (std::size_t i = 0; i < G.size(); ++i) ga.v[i] += G.v[i] * B.v[bc ? i % n : i];
        }
        if (t.needs_grad(ib)) {
            Tensor& gb = t.gacc(ib);
            for (std::size_t i = 0; i < G.size(); ++i) gb.v[bc ? i % n : i] += G.v[i] * A.v[i];
        }
    });
}

Var scale(Var a, double c) {
    Tape& t = tape_of(a);
    Tensor C = t.value(a);
    for (double& x : C.v) x *= c;
    int ia = a.id;
    return t.push(std::move(C), {ia}, [ia, c](Tape& t, int self) {
        const Tensor& G = t.gout(self);
        Tensor& ga = t.gacc(ia);
        for (std::size_t i = 0; i < G.size(); ++i) ga.v[i] += c * G.v[i];
    });
}

Var add_bias(Var a, const Tensor& bias) {
    Tape& t = tape_of(a);
    Tensor C = t.value(a);
    if (!C.same_shape(bias)) throw Error(ErrorKind::Dimension, "bias " + shp(bias) + " for " + shp(C));
    for (std::size_t i = 0; i < C.size(); ++i) C.v[i] += bias.v[i];
    int ia = a.id;
    return t.push(std::move(C), {ia}, [ia](Tape& t, int self) {
        const Tensor& G = t.gout(self);
        Tensor& ga = t.gacc(ia);
        for (std::size_t i = 0; i < G.size(); ++i) ga.v[i] += G.v[i];
    });
}

Var tanh(Var a) {
    Tape& t = tape_of(a);
    Tensor C = t.value(a);
    for (double& x : C.v) x = std::tanh(x);
    int ia = a.id;
    return t.push(std::move(C), {ia}, [ia](Tape& t, int self) {
        const Tensor& G = t.gout(self);
        const Tensor& Y = t.value(self);
        Tensor& ga = t.gacc(ia);
        for (std::size_t i = 0; i < G.size(); ++i) ga.v[i] += G.v[i] * (1.0 - Y.v[i] * Y.v[i]);
    });
}

Var sigmoid(Var a) {
    Tape& t = tape_of(a);
    Tensor C = t.value(a);
    for (double& x : C.v) x = x >= 0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
    int ia = a.id;
    return t.push(std::move(C), {ia}, [ia](Tape& t, int self) {
        const Tensor& G = t.gout(self);
        const Tensor& Y = t.value(self);
        Tensor& ga = t.gacc(ia);
        for (std::size_t i = 0; i < G.size(); ++i) ga.v[i] += G.v[i] * Y.v[i] * (1.0 - Y.v[i]);
    });
}

Var log(Var a, double eps) {
    Tape& t = tape_of(a);
    Tensor C = t.value(a);
    for (double& x : C.v) {
        if (!(x + eps > 0)) throw Error(ErrorKind::Numeric, "log of non-positive value");
        x = std::log(x + eps);
    }
    int ia = a.id;
    return t.push(std::move(C), {ia}, [ia, eps](Tape& t, int self) {
        const Tensor& G = t.gout(self);
        const Tensor& A = t.value(ia);
        Tensor& ga = t.gacc(ia);
        for (std::size_t i = 0; i < G.size(); ++i) ga.v[i] += G.v[i] / (A.v[i] + eps);
    });
}

Tensor masked_softmax(const Tensor& a, const Tensor& mask) {
    if (!a.same_shape(mask)) throw Error(ErrorKind::Dimension, "mask " + shp(mask) + " for " + shp(a));
    Tensor y(a.rows(), a.cols());
    const double ninf = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < a.rows(); ++i) {
        double mx = ninf;
        for (std::size_t j = 0; j < a.cols(); ++j) {
            if (mask(i, j) == ninf) continue;
            mx = std::max(mx, a(i, j) + mask(i, j));
        }
        if (mx == ninf) throw Error(ErrorKind::Degenerate, "softmax row has every entry masked");
        double z = 0.0;
        for (std::size_t j = 0; j < a.cols(); ++j) {
            if (mask(i, j) == ninf) continue;  // exact zero
            double e = std::exp(a(i, j) + mask(i, j) - mx);
            y(i, j) = e;
            z += e;
        }
        for (std::size_t j = 0; j < a.cols(); ++j) y(i, j) /= z;
    }
    return y;
}

namespace {

Var softmax_node(Tape& t, int ia, Tensor y) {
    return t.push(std::move(y), {ia}, [ia](Tape& t, int self) {
        const Tensor& G = t.gout(self);
        const Tensor& Y = t.value(self);
        Tensor& ga = t.gacc(ia);
        for (std::size_t i = 0; i < Y.rows(); ++i) {
            double dot = 0.0;
            for (std::size_t j = 0; j < Y.cols(); ++j) dot += Y(i, j) * G(i, j);
            for (std::size_t j = 0; j < Y.cols(); ++j) ga(i, j) += Y(i, j) * (G(i, j) - dot);
        }
    });
}

}  // namespace

Var masked_softmax(Var a, const Tensor& mask) {
    Tape& t = tape_of(a);
    return softmax_node(t, a.id, masked_softmax(t.value(a), mask));
}

Var softmax(Var a) {
    Tape& t = tape_of(a);
    const Tensor& A = t.value(a);
    return softmax_node(t, a.id, masked_softmax(A, Tensor(A.rows(), A.cols())));
}

Var layernorm(Var a, Var gain, Var bias, double eps) {
    Tape& t = tape_of(a, gain);
    tape_of(a, bias);
    const Tensor& X = t.value(a);
    const Tensor& Gn = t.value(gain);
    const Tensor& Bs = t.value(bias);
    std::size_t r = X.rows(), c = X.cols();
    if (Gn.rows() != 1 || Gn.cols() != c || !Gn.same_shape(Bs))
        throw Error(ErrorKind::Dimension, "layernorm affine " + shp(Gn) + " for " + shp(X));
    Tensor xh(r, c), rstd(r, 1), Y(r, c);
    for (std::size_t i = 0; i < r; ++i) {
        double mu = 0.0;
        for (std::size_t j = 0; j < c; ++j) mu += X(i, j);
        mu /= double(c);
        double var = 0.0;
        for (std::size_t j = 0; j < c; ++j) var += (X(i, j) - mu) * (X(i, j) - mu);
        var /= double(c);
        double rs = 1.0 / std::sqrt(var + eps);
        rstd(i, 0) = rs;
        for (std::size_t j = 0; j < c; ++j) {
            xh(i, j) = (X(i, j) - mu) * rs;
            Y(i, j) = xh(i, j) * Gn.v[j] + Bs.v[j];
        }
    }
    int ia = a.id, ig = gain.id, ib = bias.id;
    Var out = t.push(std::move(Y), {ia, ig, ib}, [ia, ig, ib](Tape& t, int self) {
        const Tensor& G = t.gout(self);
        const Tensor& xh = t.scratch(self)[0];
        const Tensor& rstd = t.scratch(self)[1];
        const Tensor& Gn = t.value(ig);
        std::size_t r = G.rows(), c = G.cols();
        if (t.needs_grad(ig)) {
            Tensor& gg = t.gacc(ig);
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) gg.v[j] += G(i, j) * xh(i, j);
        }
        if (t.needs_grad(ib)) {
            Tensor& gb = t.gacc(ib);
            for (std::size_t i = 0; i < r; ++i)
                for (std::size_t j = 0; j < c; ++j) gb.v[j] += G(i, j);
        }
        if (t.needs_grad(ia)) {
            Tensor& ga = t.gacc(ia);
            for (std::size_t i = 0; i < r; ++i) {
                double m1 = 0.0, m2 = 0.0;
                for (std::size_t j = 0; j < c; ++j) {
                    double d = G(i, j) * Gn.v[j];
                    m1 += d;
                    m2 += d * xh(i, j);
                }
                m1 /= double(c);
                m2 /= double(c);
                for (std::size_t j = 0; j < c; ++j)
                    ga(i, j) += rstd(i, 0) * (G(i, j) * Gn.v[j] - m1 - xh(i, j) * m2);
            }
        }
    });
    if (t.needs_grad(out.id)) {
        t.scratch(out.id).push_back(std::move(xh));
        t.scratch(out.id).push_back(std::move(rstd));
    }
    return out;
}

Var mean_rows(Var a, std::size_t r0, std::size_t r1) {
    Tape& t = tape_of(a);
    const Tensor& X = t.value(a);
    if (r1 <= r0 || r1 > X.rows()) throw Error(ErrorKind::Degenerate, "empty or out-of-range pooling range");
    std::size_t c = X.cols();
    Tensor Y(1, c);
    for (std::size_t i = r0; i < r1; ++i)
        for (std::size_t j = 0; j < c; ++j) Y.v[j] += X(i, j);
    double inv = 1.0 / double(r1 - r0);
    for (double& y : Y.v) y *= inv;
    int ia = a.id;
    return t.push(std::move(Y), {ia}, [ia, r0, r1, inv](Tape& t, int self) {
        const Tensor& G = t.gout(self);
        Tensor& ga = t.gacc(ia);
        for (std::size_t i = r0; i < r1; ++i)
            for (std::size_t j = 0; j < G.cols(); ++j) ga(i, j) += G.v[j] * inv;
    });
}

Var concat_rows(const std::vector<Var>& xs) {
    if (xs.empty()) throw Error(ErrorKind::Usage, "concat of nothing");
    Tape& t = tape_of(xs[0]);
    std::size_t c = t.value(xs[0]).cols(), r = 0;
    std::vector<int> ids;
    for (Var x : xs) {
        tape_of(xs[0], x);
        if (t.value(x).cols() != c) throw Error(ErrorKind::Dimension, "concat_rows column mismatch");
        r += t.value(x).rows();
        ids.push_back(x.id);
    }
    Tensor Y(r, c);
    std::size_t off = 0;
    for (int id : ids) {
        const Tensor& X = t.value(id);
        std::copy(X.v.begin(), X.v.end(), Y.v.begin() + off);
        off += X.size();
    }
    return t.push(std::move(Y), ids, [ids](Tape& t, int self) {
        const Tensor& G = t.gout(self);
        std::size_t off = 0;
        for (int id : ids) {
            std::size_t n = t.value(id).size();
            if (t.needs_grad(id)) {
                Tensor& g = t.gacc(id);
                for (std::size_t k = 0; k < n; ++k) g.v[k] += G.v[off + k];
            }
            off += n;
        }
    });
}

Var concat_cols(const std::vector<Var>& xs) {
    if (xs.empty()) throw Error(ErrorKind::Usage, "concat of nothing");
    Tape& t = tape_of(xs[0]);
    std::size_t r = t.value(xs[0]).rows(), c = 0;
    std::vector<int> ids;
    for (Var x : xs) {
        tape_of(xs[0], x);
        if (t.value(x).rows() != r) throw Error(ErrorKind::Dimension, "concat_cols row mismatch");
        c += t.value(x).cols();
        ids.push_back(x.id);
    }
    Tensor Y(r, c);
    std::size_t off = 0;
    for (int id : ids) {
        const Tensor& X = t.value(id);
        for (std::size_t i = 0; i < r; ++i)
            for (std::size_t j = 0; j < X.cols(); ++j) Y(i, off + j) = X(i, j);
        off += X.cols();
    }
    return t.push(std::move(Y), ids, [ids](Tape& t, int self) {
        const Tensor& G = t.gout(self);
        std::size_t off = 0;
        for (int id : ids) {
            std::size_t w = t.value(id).cols();
            if (t.needs_grad(id)) {
                Tensor& g = t.gacc(id);
                for (std::size_t i = 0; i < G.rows(); ++i)
                    for (std::size_t j = 0; j < w; ++j) g(i, j) += G(i, off + j);
            }
            off += w;
        }
    });
}

Var gather_rows(Var table, const std::vector<int>& ids) {
    Tape& t = tape_of(table);
    const Tensor& W = t.value(table);
    Tensor Y(ids.size(), W.cols());
    for (std::size_t i = 0; i < ids.size(); ++i) {
        if (ids[i] < 0 || std::size_t(ids[i]) >= W.rows()) throw Error(ErrorKind::Range, "gather index out of range");
        for (std::size_t j = 0; j < W.cols(); ++j) Y(i, j) = W(ids[i], j);
    }
    int it = table.id;
    return t.push(std::move(Y), {it}, [it, ids](Tape& t, int self) {
        const Tensor& G = t.gout(self);
        Tensor& g = t.gacc(it);
        for (std::size_t i = 0; i < ids.size(); ++i)
            for (std::size_t j = 0; j < G.cols(); ++j) g(ids[i], j) += G(i, j);
    });
}

Var sum(Var a) {
    Tape& t = tape_of(a);
    double s = 0.0;
    for (double x : t.value(a).v) s += x;
    int ia = a.id;
    return t.push(Tensor(1, 1, s), {ia}, [ia](Tape& t, int self) {
        double g = t.gout(self).v[0];
        for (double& x : t.gacc(ia).v) x += g;
    });
}

Var cross_entropy(Var logits, const std::vector<int>& labels) {
    Tape& t = tape_of(logits);
    const Tensor& Z = t.value(logits);
    if (labels.size() != Z.rows()) throw Error(ErrorKind::Dimension, "label count does not match logits");
    Tensor P = masked_softmax(Z, Tensor(Z.rows(), Z.cols()));
    double loss = 0.0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        if (labels[i] < 0 || std::size_t(labels[i]) >= Z.cols()) throw Error(ErrorKind::Range, "label out of range");
        // log-sum-exp form keeps this finite for very confident logits
        double mx = Z(i, 0);
        for (std::size_t j = 1; j < Z.cols(); ++j) mx = std::max(mx, Z(i, j));
        double lse = 0.0;
        for (std::size_t j = 0; j < Z.cols(); ++j) lse += std::exp(Z(i, j) - mx);
        loss += std::log(lse) + mx - Z(i, labels[i]);
    }
    double n = double(labels.size());
    int ia = logits.id;
    Var out = t.push(Tensor(1, 1, loss / n), {ia}, [ia, labels, n](Tape& t, int self) {
        double g = t.gout(self).v[0];
        const Tensor& P = t.scratch(self)[0];
        Tensor& ga = t.gacc(ia);
        for (std::size_t i = 0; i < P.rows(); ++i)
            for (std::size_t j = 0; j < P.cols(); ++j)
                ga(i, j) += g * (P(i, j) - (int(j) == labels[i] ? 1.0 : 0.0)) / n;
    });
    if (t.needs_grad(out.id)) t.scratch(out.id).push_back(std::move(P));
    return out;
}

void AdamW::step(const std::vector<Param*>& ps) {
    ++t;
    double c1 = 1.0 - std::pow(b1, double(t));
    double c2 = 1.0 - std::pow(b2, double(t));
    for (Param* p : ps) {
        for (std::size_t i = 0; i < p->w.size(); ++i) {
            double g = p->g.v[i];
            p->w.v[i] *= 1.0 - lr * wd;
            p->m.v[i] = b1 * p->m.v[i] + (1.0 - b1) * g;
            p->s.v[i] = b2 * p->s.v[i] + (1.0 - b2) * g * g;
            p->w.v[i] -= lr * (p->m.v[i] / c1) / (std::sqrt(p->s.v[i] / c2) + eps);
        }
        if (!p->w.all_finite()) throw Error(ErrorKind::TrainingFailure, "parameter " + p->name + " diverged");
    }
}

}  // namespace mms
