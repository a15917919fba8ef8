// Minimal reverse-mode automatic differentiation over dense double matrices.
//
// A Tape records every operation of one forward pass. Nodes are appended in
// creation order, so walking them backwards is a valid topological order.
// Parameter leaves reference the caller's matrices without copying and
// accumulate their gradients into caller-owned sinks.

#pragma once

#include <Eigen/Dense>

#include <functional>
#include <random>
#include <span>
#include <vector>

namespace bdcp {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using RowVector = Eigen::RowVectorXd;

namespace ag {

class Tape;

class Var {
public:
    Var() = default;
    Var(Tape* tape, int id) : tape_(tape), id_(id) {}

    const Matrix& value() const;
    const Matrix& grad() const;
    Eigen::Index rows() const { return value().rows(); }
    Eigen::Index cols() const { return value().cols(); }
    double scalar() const { return value()(0, 0); }

    Tape* tape() const { return tape_; }
    int id() const { return id_; }
    bool valid() const { return tape_ != nullptr; }

private:
    Tape* tape_ = nullptr;
    int id_ = -1;
};

class Tape {
public:
    using Backward = std::function<void(Tape&, int self)>;

    Tape() = default;
    Tape(const Tape&) = delete;
    Tape& operator=(const Tape&) = delete;

    Var constant(Matrix value);
    Var scalar(double v);
    // Leaf bound to an external matrix. Gradients are added into `grad_sink`
    // (which must have the same shape) when backward() runs. A null sink makes
    // the leaf a constant that does not copy its storage.
    Var param(const Matrix& value, Matrix* grad_sink);

    Var record(Matrix value, std::vector<int> parents, Backward backward);

    void backward(const Var& root);

    const Matrix& value(int id) const;
    Matrix& grad(int id);
    bool needs_grad(int id) const { return nodes_[static_cast<size_t>(id)].needs_grad; }
    void accumulate(int id, const Matrix& g);

    size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Matrix own;
        const Matrix* external = nullptr;
        Matrix grad;
        Matrix* sink = nullptr;
        std::vector<int> parents;
        Backward backward;
        bool needs_grad = false;
    };
    std::vector<Node> nodes_;
};

// Constant copy of `a`; no gradient flows back through it.
Var stop_gradient(Var a);

// ---- elementwise and linear algebra ----------------------------------------
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var hadamard(Var a, Var b);
Var divide(Var a, Var b);
Var scale(Var a, double s);
Var add_scalar(Var a, double s);
Var matmul(Var a, Var b);
Var transpose(Var a);
// a (n x m) + row (1 x m) broadcast over rows.
Var add_row(Var a, Var row);
// col (n x 1) + row' (1 x m) -> n x m with out(i,j) = col(i) + row(j).
Var outer_sum(Var col, Var row);

Var relu(Var a);
Var gelu(Var a);
Var softplus(Var a);
Var exp(Var a);
Var log(Var a);
Var square(Var a);
Var tanh(Var a);

inline Var operator+(Var a, Var b) { return add(a, b); }
inline Var operator-(Var a, Var b) { return sub(a, b); }
inline Var operator*(Var a, double s) { return scale(a, s); }
inline Var operator*(double s, Var a) { return scale(a, s); }

// ---- structural -----------------------------------------------------------
Var slice_cols(Var a, Eigen::Index start, Eigen::Index count);
Var slice_rows(Var a, Eigen::Index start, Eigen::Index count);
Var concat_cols(std::span<const Var> parts);
Var concat_rows(std::span<const Var> parts);
Var gather_rows(Var table, std::span<const int> rows);
// Mean of the selected rows, 1 x cols.
Var mean_rows(Var a, std::span<const int> rows);
// out(i) = a(i, index[i]), n x 1.
Var pick(Var a, std::span<const int> index);
// Diagonal of a square matrix as n x 1.
Var diagonal(Var a);

// ---- reductions -----------------------------------------------------------
Var sum(Var a);
Var mean(Var a);
Var max_element(Var a);
Var sum_rows(Var a);           // n x m -> n x 1
Var logsumexp_rows(Var a);     // n x m -> n x 1
Var softmax_rows(Var a);
// Cross-entropy per row of a logits matrix against integer targets, n x 1.
Var cross_entropy_rows(Var logits, std::span<const int> targets);

// ---- normalisation --------------------------------------------------------
Var layer_norm_rows(Var x, Var gain, Var bias, double eps = 1e-5);
// Rows scaled to unit Euclidean norm; norms below `eps` are floored.
Var normalize_rows(Var a, double eps = 1e-12);
// Inverted dropout; identity when p == 0.
Var dropout(Var a, double p, std::mt19937_64& rng);

// Pairwise squared Euclidean distance between rows: n x m.
Var squared_distance(Var a, Var b);

// Angular-margin logits from a cosine matrix. Non-target entries become
// cos / tau; the target entry of row i becomes cos(min(acos(c) + margin, pi)) / tau.
// Cosines are clamped to [-1, 1] before acos.
Var margin_logits(Var cosines, std::span<const int> targets, double margin, double tau);

} // namespace ag
} // namespace bdcp
