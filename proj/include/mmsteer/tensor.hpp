#pragma once

#include <cstddef>
#include <functional>
#include <string>
#include <vector>

#include "mmsteer/common.hpp"

namespace mms {

// dense row-major matrix; vectors are 1 x n
struct Tensor {
    std::vector<std::size_t> shape{0, 0};
    std::vector<double> v;

    Tensor() = default;
    Tensor(std::size_t r, std::size_t c, double fill = 0.0) : shape{r, c}, v(r * c, fill) {}
    static Tensor from(std::size_t r, std::size_t c, std::vector<double> vals);
    static Tensor row(std::vector<double> vals);

    std::size_t rows() const { return shape[0]; }
    std::size_t cols() const { return shape[1]; }
    std::size_t size() const { return v.size(); }
    double& operator()(std::size_t i, std::size_t j) { return v[i * shape[1] + j]; }
    double operator()(std::size_t i, std::size_t j) const { return v[i * shape[1] + j]; }
    double* data() { return v.data(); }
    const double* data() const { return v.data(); }
    bool same_shape(const Tensor& o) const { return shape == o.shape; }
    bool all_finite() const;
};

// trainable array with its gradient and optimizer moments
struct Param {
    std::string name;
    Tensor w, g, m, s;
    Param() = default;
    Param(std::string n, Tensor init);
    void zero_grad();
};

class Tape;

struct Var {
    Tape* tape = nullptr;
    int id = -1;
    const Tensor& val() const;
};

class Tape {
public:
    using BackFn = std::function<void(Tape&, int)>;

    Var constant(Tensor t);
    Var input(Tensor t);  // leaf that receives a gradient
    Var param(Param& p);  // leaf whose gradient is accumulated into p.g by backward()
    Var weight(const Tensor& w);  // read-only view of external storage, no gradient
    void reserve(std::size_t n) { nodes_.reserve(n); }

    void backward(Var y);

    const Tensor& value(int id) const { return nodes_[id].ext ? *nodes_[id].ext : nodes_[id].val; }
    const Tensor& value(Var x) const;
    // zero tensor if nothing flowed into x
    Tensor grad(Var x) const;
    bool needs_grad(int id) const { return nodes_[id].needs_grad; }
    std::size_t size() const { return nodes_.size(); }
    const std::vector<int>& inputs(int id) const { return nodes_[id].in; }

    // used by op implementations
    Var push(Tensor val, std::vector<int> in, BackFn fn);
    Tensor& gacc(int id);  // allocate-on-first-use gradient buffer
    const Tensor& gout(int id) const { return nodes_[id].grad; }
    void own(Var x) const;
    std::vector<Tensor>& scratch(int id) { return nodes_[id].aux; }

private:
    struct Node {
        Tensor val, grad;
        std::vector<int> in;
        BackFn back;
        Param* param = nullptr;
        const Tensor* ext = nullptr;
        bool needs_grad = false;
        bool has_grad = false;
        std::vector<Tensor> aux;
    };
    std::vector<Node> nodes_;
};

// ---- differentiable ops (all work on the tape of their first argument)
Var matmul(Var a, Var b);
Var matmul_nt(Var a, Var b);  // a * b^T
Var add(Var a, Var b);        // b may be a 1 x c row broadcast over a's rows
Var sub(Var a, Var b);
Var mul(Var a, Var b);  // elementwise, same broadcast rule as add
Var scale(Var a, double c);
Var add_bias(Var a, const Tensor& bias);  // constant additive term, same shape as a
Var tanh(Var a);
Var sigmoid(Var a);
Var log(Var a, double eps = 0.0);  // log(a + eps)
Var masked_softmax(Var a, const Tensor& mask);  // row-wise; mask entries are 0 or -inf
Var softmax(Var a);
Var layernorm(Var a, Var gain, Var bias, double eps = 1e-5);
Var mean_rows(Var a, std::size_t r0, std::size_t r1);  // mean over rows [r0, r1)
Var concat_rows(const std::vector<Var>& xs);
Var concat_cols(const std::vector<Var>& xs);
Var gather_rows(Var table, const std::vector<int>& ids);
Var sum(Var a);
Var cross_entropy(Var logits, const std::vector<int>& labels);  // mean over rows

// plain (non-taped) helpers
Tensor masked_softmax(const Tensor& a, const Tensor& mask);

// decoupled weight decay Adam
struct AdamW {
    double lr = 1e-4, b1 = 0.9, b2 = 0.999, eps = 1e-8, wd = 0.01;
    long t = 0;
    void step(const std::vector<Param*>& ps);
};

}  // namespace mms
