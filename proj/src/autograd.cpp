#include "bdcp/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <numbers>
#include <stdexcept>

namespace bdcp::ag {

const Matrix& Var::value() const { return tape_->value(id_); }
const Matrix& Var::grad() const { return tape_->grad(id_); }

Var Tape::constant(Matrix value) {
    Node n;
    n.own = std::move(value);
    nodes_.push_back(std::move(n));
    return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::scalar(double v) { return constant(Matrix::Constant(1, 1, v)); }

Var Tape::param(const Matrix& value, Matrix* grad_sink) {
    if (grad_sink && (grad_sink->rows() != value.rows() || grad_sink->cols() != value.cols()))
        throw std::invalid_argument("gradient sink shape mismatch");
    Node n;
    n.external = &value;
    n.sink = grad_sink;
    n.needs_grad = grad_sink != nullptr;
    nodes_.push_back(std::move(n));
    return {this, static_cast<int>(nodes_.size()) - 1};
}

Var Tape::record(Matrix value, std::vector<int> parents, Backward backward) {
    Node n;
    n.own = std::move(value);
    n.needs_grad = std::any_of(parents.begin(), parents.end(),
                               [&](int p) { return nodes_[static_cast<size_t>(p)].needs_grad; });
    if (n.needs_grad) {
        n.parents = std::move(parents);
        n.backward = std::move(backward);
    }
    nodes_.push_back(std::move(n));
    return {this, static_cast<int>(nodes_.size()) - 1};
}

const Matrix& Tape::value(int id) const {
    const Node& n = nodes_[static_cast<size_t>(id)];
    return n.external ? *n.external : n.own;
}

Matrix& Tape::grad(int id) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (n.grad.size() == 0) n.grad = Matrix::Zero(value(id).rows(), value(id).cols());
    return n.grad;
}

void Tape::accumulate(int id, const Matrix& g) {
    Node& n = nodes_[static_cast<size_t>(id)];
    if (!n.needs_grad) return;
    if (n.grad.size() == 0)
        n.grad = g;
    else
        n.grad += g;
}

void Tape::backward(const Var& root) {
    if (root.tape() != this) throw std::invalid_argument("backward: variable from another tape");
    if (root.value().size() != 1) throw std::invalid_argument("backward: root must be a scalar");
    if (!needs_grad(root.id())) return;
    accumulate(root.id(), Matrix::Ones(1, 1));
    for (int i = root.id(); i >= 0; --i) {
        Node& n = nodes_[static_cast<size_t>(i)];
        if (!n.needs_grad || n.grad.size() == 0) continue;
        if (n.backward) n.backward(*this, i);
        if (n.sink) *n.sink += n.grad;
    }
}

namespace {

Tape& tape_of(const Var& a) { return *a.tape(); }

void check_same(const Var& a, const Var& b, const char* op) {
    if (a.tape() != b.tape()) throw std::invalid_argument(std::string(op) + ": tape mismatch");
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw std::invalid_argument(std::string(op) + ": shape mismatch");
}

template <class F, class DF>
Var unary(Var a, F f, DF df) {
    Tape& t = tape_of(a);
    Matrix out = a.value().unaryExpr(f);
    const int ia = a.id();
    return t.record(std::move(out), {ia}, [ia, df](Tape& tp, int self) {
        const Matrix& x = tp.value(ia);
        tp.accumulate(ia, tp.grad(self).cwiseProduct(x.unaryExpr(df)));
    });
}

} // namespace

Var stop_gradient(Var a) { return tape_of(a).constant(a.value()); }

Var add(Var a, Var b) {
    check_same(a, b, "add");
    const int ia = a.id(), ib = b.id();
    return tape_of(a).record(a.value() + b.value(), {ia, ib}, [ia, ib](Tape& t, int self) {
        t.accumulate(ia, t.grad(self));
        t.accumulate(ib, t.grad(self));
    });
}

Var sub(Var a, Var b) {
    check_same(a, b, "sub");
    const int ia = a.id(), ib = b.id();
    return tape_of(a).record(a.value() - b.value(), {ia, ib}, [ia, ib](Tape& t, int self) {
        t.accumulate(ia, t.grad(self));
        t.accumulate(ib, -t.grad(self));
    });
}

Var hadamard(Var a, Var b) {
    check_same(a, b, "hadamard");
    const int ia = a.id(), ib = b.id();
    return tape_of(a).record(a.value().cwiseProduct(b.value()), {ia, ib}, [ia, ib](Tape& t, int self) {
        const Matrix& g = t.grad(self);
        t.accumulate(ia, g.cwiseProduct(t.value(ib)));
        t.accumulate(ib, g.cwiseProduct(t.value(ia)));
    });
}

Var divide(Var a, Var b) {
    check_same(a, b, "divide");
    const int ia = a.id(), ib = b.id();
    return tape_of(a).record(a.value().cwiseQuotient(b.value()), {ia, ib}, [ia, ib](Tape& t, int self) {
        const Matrix& g = t.grad(self);
        const Matrix& bv = t.value(ib);
        t.accumulate(ia, g.cwiseQuotient(bv));
        t.accumulate(ib, -g.cwiseProduct(t.value(ia)).cwiseQuotient(bv.cwiseProduct(bv)));
    });
}

Var scale(Var a, double s) {
    const int ia = a.id();
    return tape_of(a).record(a.value() * s, {ia},
                             [ia, s](Tape& t, int self) { t.accumulate(ia, t.grad(self) * s); });
}

Var add_scalar(Var a, double s) {
    const int ia = a.id();
    return tape_of(a).record(a.value().array() + s, {ia},
                             [ia](Tape& t, int self) { t.accumulate(ia, t.grad(self)); });
}

Var matmul(Var a, Var b) {
    if (a.cols() != b.rows()) throw std::invalid_argument("matmul: inner dimension mismatch");
    const int ia = a.id(), ib = b.id();
    return tape_of(a).record(a.value() * b.value(), {ia, ib}, [ia, ib](Tape& t, int self) {
        const Matrix& g = t.grad(self);
        if (t.needs_grad(ia)) t.accumulate(ia, g * t.value(ib).transpose());
        if (t.needs_grad(ib)) t.accumulate(ib, t.value(ia).transpose() * g);
    });
}

Var transpose(Var a) {
    const int ia = a.id();
    return tape_of(a).record(a.value().transpose(), {ia},
                             [ia](Tape& t, int self) { t.accumulate(ia, t.grad(self).transpose()); });
}

Var add_row(Var a, Var row) {
    if (row.rows() != 1 || row.cols() != a.cols()) throw std::invalid_argument("add_row: shape mismatch");
    const int ia = a.id(), ir = row.id();
    Matrix out = a.value().rowwise() + row.value().row(0);
    return tape_of(a).record(std::move(out), {ia, ir}, [ia, ir](Tape& t, int self) {
        const Matrix& g = t.grad(self);
        t.accumulate(ia, g);
        t.accumulate(ir, g.colwise().sum());
    });
}

Var outer_sum(Var col, Var row) {
    if (col.cols() != 1 || row.rows() != 1) throw std::invalid_argument("outer_sum: expects column and row");
    const int ic = col.id(), ir = row.id();
    Matrix out = col.value().replicate(1, row.cols()).rowwise() + row.value().row(0);
    return tape_of(col).record(std::move(out), {ic, ir}, [ic, ir](Tape& t, int self) {
        const Matrix& g = t.grad(self);
        t.accumulate(ic, g.rowwise().sum());
        t.accumulate(ir, g.colwise().sum());
    });
}

Var relu(Var a) {
    return unary(a, [](double x) { return x > 0.0 ? x : 0.0; },
                 [](double x) { return x > 0.0 ? 1.0 : 0.0; });
}

Var gelu(Var a) {
    // tanh approximation
    constexpr double k = 0.7978845608028654; // sqrt(2/pi)
    constexpr double c = 0.044715;
    return unary(
        a,
        [](double x) { return 0.5 * x * (1.0 + std::tanh(k * (x + c * x * x * x))); },
        [](double x) {
            const double u = k * (x + c * x * x * x);
            const double th = std::tanh(u);
            const double du = k * (1.0 + 3.0 * c * x * x);
            return 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du;
        });
}

Var softplus(Var a) {
    return unary(
        a, [](double x) { return x > 0.0 ? x + std::log1p(std::exp(-x)) : std::log1p(std::exp(x)); },
        [](double x) { return 1.0 / (1.0 + std::exp(-x)); });
}

Var exp(Var a) {
    return unary(a, [](double x) { return std::exp(x); }, [](double x) { return std::exp(x); });
}

Var log(Var a) {
    return unary(a, [](double x) { return std::log(x); }, [](double x) { return 1.0 / x; });
}

Var square(Var a) {
    return unary(a, [](double x) { return x * x; }, [](double x) { return 2.0 * x; });
}

Var tanh(Var a) {
    return unary(a, [](double x) { return std::tanh(x); },
                 [](double x) {
                     const double th = std::tanh(x);
                     return 1.0 - th * th;
                 });
}

Var slice_cols(Var a, Eigen::Index start, Eigen::Index count) {
    if (start < 0 || count < 0 || start + count > a.cols()) throw std::out_of_range("slice_cols");
    const int ia = a.id();
    return tape_of(a).record(a.value().middleCols(start, count), {ia}, [ia, start, count](Tape& t, int self) {
        const Matrix& x = t.value(ia);
        Matrix g = Matrix::Zero(x.rows(), x.cols());
        g.middleCols(start, count) = t.grad(self);
        t.accumulate(ia, g);
    });
}

Var slice_rows(Var a, Eigen::Index start, Eigen::Index count) {
    if (start < 0 || count < 0 || start + count > a.rows()) throw std::out_of_range("slice_rows");
    const int ia = a.id();
    return tape_of(a).record(a.value().middleRows(start, count), {ia}, [ia, start, count](Tape& t, int self) {
        const Matrix& x = t.value(ia);
        Matrix g = Matrix::Zero(x.rows(), x.cols());
        g.middleRows(start, count) = t.grad(self);
        t.accumulate(ia, g);
    });
}

Var concat_cols(std::span<const Var> parts) {
    if (parts.empty()) throw std::invalid_argument("concat_cols: empty");
    Tape& t = tape_of(parts[0]);
    const Eigen::Index rows = parts[0].rows();
    Eigen::Index cols = 0;
    std::vector<int> ids;
    for (const Var& p : parts) {
        if (p.rows() != rows) throw std::invalid_argument("concat_cols: row mismatch");
        cols += p.cols();
        ids.push_back(p.id());
    }
    Matrix out(rows, cols);
    Eigen::Index at = 0;
    for (const Var& p : parts) {
        out.middleCols(at, p.cols()) = p.value();
        at += p.cols();
    }
    return t.record(std::move(out), ids, [ids](Tape& tp, int self) {
        Eigen::Index off = 0;
        for (int id : ids) {
            const Eigen::Index c = tp.value(id).cols();
            tp.accumulate(id, tp.grad(self).middleCols(off, c));
            off += c;
        }
    });
}

Var concat_rows(std::span<const Var> parts) {
    if (parts.empty()) throw std::invalid_argument("concat_rows: empty");
    Tape& t = tape_of(parts[0]);
    const Eigen::Index cols = parts[0].cols();
    Eigen::Index rows = 0;
    std::vector<int> ids;
    for (const Var& p : parts) {
        if (p.cols() != cols) throw std::invalid_argument("concat_rows: column mismatch");
        rows += p.rows();
        ids.push_back(p.id());
    }
    Matrix out(rows, cols);
    Eigen::Index at = 0;
    for (const Var& p : parts) {
        out.middleRows(at, p.rows()) = p.value();
        at += p.rows();
    }
    return t.record(std::move(out), ids, [ids](Tape& tp, int self) {
        Eigen::Index off = 0;
        for (int id : ids) {
            const Eigen::Index r = tp.value(id).rows();
            tp.accumulate(id, tp.grad(self).middleRows(off, r));
            off += r;
        }
    });
}

Var gather_rows(Var table, std::span<const int> rows) {
    const Matrix& tv = table.value();
    Matrix out(static_cast<Eigen::Index>(rows.size()), tv.cols());
    for (size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] < 0 || rows[i] >= tv.rows()) throw std::out_of_range("gather_rows: index");
        out.row(static_cast<Eigen::Index>(i)) = tv.row(rows[i]);
    }
    const int it = table.id();
    std::vector<int> idx(rows.begin(), rows.end());
    return tape_of(table).record(std::move(out), {it}, [it, idx](Tape& t, int self) {
        Matrix& g = t.grad(it);
        const Matrix& go = t.grad(self);
        for (size_t i = 0; i < idx.size(); ++i) g.row(idx[i]) += go.row(static_cast<Eigen::Index>(i));
    });
}

Var mean_rows(Var a, std::span<const int> rows) {
    if (rows.empty()) throw std::invalid_argument("mean_rows: empty selection");
    const Matrix& av = a.value();
    RowVector acc = RowVector::Zero(av.cols());
    for (int r : rows) {
        if (r < 0 || r >= av.rows()) throw std::out_of_range("mean_rows: index");
        acc += av.row(r);
    }
    const double inv = 1.0 / static_cast<double>(rows.size());
    const int ia = a.id();
    std::vector<int> idx(rows.begin(), rows.end());
    return tape_of(a).record(Matrix(acc * inv), {ia}, [ia, idx, inv](Tape& t, int self) {
        Matrix& g = t.grad(ia);
        const Matrix& go = t.grad(self);
        for (int r : idx) g.row(r) += go.row(0) * inv;
    });
}

Var pick(Var a, std::span<const int> index) {
    const Matrix& av = a.value();
    if (static_cast<Eigen::Index>(index.size()) != av.rows()) throw std::invalid_argument("pick: size mismatch");
    Matrix out(av.rows(), 1);
    for (Eigen::Index i = 0; i < av.rows(); ++i) {
        const int j = index[static_cast<size_t>(i)];
        if (j < 0 || j >= av.cols()) throw std::out_of_range("pick: index");
        out(i, 0) = av(i, j);
    }
    const int ia = a.id();
    std::vector<int> idx(index.begin(), index.end());
    return tape_of(a).record(std::move(out), {ia}, [ia, idx](Tape& t, int self) {
        Matrix& g = t.grad(ia);
        const Matrix& go = t.grad(self);
        for (size_t i = 0; i < idx.size(); ++i) g(static_cast<Eigen::Index>(i), idx[i]) += go(static_cast<Eigen::Index>(i), 0);
    });
}

Var diagonal(Var a) {
    if (a.rows() != a.cols()) throw std::invalid_argument("diagonal: not square");
    const int ia = a.id();
    return tape_of(a).record(Matrix(a.value().diagonal()), {ia}, [ia](Tape& t, int self) {
        Matrix& g = t.grad(ia);
        g.diagonal() += t.grad(self).col(0);
    });
}

Var sum(Var a) {
    const int ia = a.id();
    return tape_of(a).record(Matrix::Constant(1, 1, a.value().sum()), {ia}, [ia](Tape& t, int self) {
        const Matrix& x = t.value(ia);
        t.accumulate(ia, Matrix::Constant(x.rows(), x.cols(), t.grad(self)(0, 0)));
    });
}

Var mean(Var a) {
    const double n = static_cast<double>(a.value().size());
    if (n == 0) throw std::invalid_argument("mean: empty");
    return scale(sum(a), 1.0 / n);
}

Var max_element(Var a) {
    const Matrix& av = a.value();
    if (av.size() == 0) throw std::invalid_argument("max_element: empty");
    Eigen::Index r = 0, c = 0;
    const double m = av.maxCoeff(&r, &c);
    const int ia = a.id();
    return tape_of(a).record(Matrix::Constant(1, 1, m), {ia}, [ia, r, c](Tape& t, int self) {
        t.grad(ia)(r, c) += t.grad(self)(0, 0);
    });
}

Var sum_rows(Var a) {
    const int ia = a.id();
    return tape_of(a).record(Matrix(a.value().rowwise().sum()), {ia}, [ia](Tape& t, int self) {
        const Matrix& x = t.value(ia);
        t.accumulate(ia, t.grad(self).replicate(1, x.cols()));
    });
}

namespace {

Matrix row_softmax(const Matrix& x) {
    Matrix out(x.rows(), x.cols());
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        const double m = x.row(i).maxCoeff();
        out.row(i) = (x.row(i).array() - m).exp();
        out.row(i) /= out.row(i).sum();
    }
    return out;
}

Matrix row_logsumexp(const Matrix& x) {
    Matrix out(x.rows(), 1);
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        const double m = x.row(i).maxCoeff();
        out(i, 0) = m + std::log((x.row(i).array() - m).exp().sum());
    }
    return out;
}

} // namespace

Var logsumexp_rows(Var a) {
    const int ia = a.id();
    return tape_of(a).record(row_logsumexp(a.value()), {ia}, [ia](Tape& t, int self) {
        const Matrix p = row_softmax(t.value(ia));
        t.accumulate(ia, p.array().colwise() * t.grad(self).col(0).array());
    });
}

Var softmax_rows(Var a) {
    const int ia = a.id();
    Matrix out = row_softmax(a.value());
    return tape_of(a).record(out, {ia}, [ia, out](Tape& t, int self) {
        const Matrix& g = t.grad(self);
        const Matrix gp = g.cwiseProduct(out);
        Matrix dx = gp - out.cwiseProduct(Matrix(gp.rowwise().sum().replicate(1, out.cols())));
        t.accumulate(ia, dx);
    });
}

Var cross_entropy_rows(Var logits, std::span<const int> targets) {
    const Matrix& x = logits.value();
    if (static_cast<Eigen::Index>(targets.size()) != x.rows())
        throw std::invalid_argument("cross_entropy_rows: target count mismatch");
    const Matrix lse = row_logsumexp(x);
    Matrix out(x.rows(), 1);
    for (Eigen::Index i = 0; i < x.rows(); ++i) {
        const int k = targets[static_cast<size_t>(i)];
        if (k < 0 || k >= x.cols()) throw std::out_of_range("cross_entropy_rows: target");
        out(i, 0) = lse(i, 0) - x(i, k);
    }
    const int il = logits.id();
    std::vector<int> tg(targets.begin(), targets.end());
    return tape_of(logits).record(std::move(out), {il}, [il, tg](Tape& t, int self) {
        Matrix p = row_softmax(t.value(il));
        for (size_t i = 0; i < tg.size(); ++i) p(static_cast<Eigen::Index>(i), tg[i]) -= 1.0;
        t.accumulate(il, p.array().colwise() * t.grad(self).col(0).array());
    });
}

Var layer_norm_rows(Var x, Var gain, Var bias, double eps) {
    const Matrix& xv = x.value();
    const Eigen::Index n = xv.rows(), d = xv.cols();
    if (gain.rows() != 1 || gain.cols() != d || bias.rows() != 1 || bias.cols() != d)
        throw std::invalid_argument("layer_norm_rows: parameter shape");
    Matrix xhat(n, d);
    Vector inv_std(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        const double mu = xv.row(i).mean();
        const double var = (xv.row(i).array() - mu).square().mean();
        inv_std(i) = 1.0 / std::sqrt(var + eps);
        xhat.row(i) = (xv.row(i).array() - mu) * inv_std(i);
    }
    Matrix out = (xhat.array().rowwise() * gain.value().row(0).array()).rowwise() + bias.value().row(0).array();
    const int ix = x.id(), ig = gain.id(), ib = bias.id();
    return tape_of(x).record(std::move(out), {ix, ig, ib}, [ix, ig, ib, xhat, inv_std](Tape& t, int self) {
        const Matrix& g = t.grad(self);
        const RowVector gv = t.value(ig).row(0);
        t.accumulate(ig, (g.cwiseProduct(xhat)).colwise().sum());
        t.accumulate(ib, g.colwise().sum());
        if (!t.needs_grad(ix)) return;
        const Matrix gx = g.array().rowwise() * gv.array();
        const double d = static_cast<double>(xhat.cols());
        Matrix dx(gx.rows(), gx.cols());
        for (Eigen::Index i = 0; i < gx.rows(); ++i) {
            const double m1 = gx.row(i).mean();
            const double m2 = gx.row(i).dot(xhat.row(i)) / d;
            dx.row(i) = inv_std(i) * (gx.row(i).array() - m1 - xhat.row(i).array() * m2);
        }
        t.accumulate(ix, dx);
    });
}

Var normalize_rows(Var a, double eps) {
    const Matrix& av = a.value();
    Vector norms = av.rowwise().norm();
    Matrix out(av.rows(), av.cols());
    for (Eigen::Index i = 0; i < av.rows(); ++i) out.row(i) = av.row(i) / std::max(norms(i), eps);
    const int ia = a.id();
    return tape_of(a).record(out, {ia}, [ia, out, norms, eps](Tape& t, int self) {
        const Matrix& g = t.grad(self);
        Matrix dx(g.rows(), g.cols());
        for (Eigen::Index i = 0; i < g.rows(); ++i) {
            const double nrm = std::max(norms(i), eps);
            if (norms(i) < eps)
                dx.row(i) = g.row(i) / nrm;
            else
                dx.row(i) = (g.row(i) - out.row(i) * g.row(i).dot(out.row(i))) / nrm;
        }
        t.accumulate(ia, dx);
    });
}

Var dropout(Var a, double p, std::mt19937_64& rng) {
    if (p <= 0.0) return a;
    if (p >= 1.0) throw std::invalid_argument("dropout: p must be < 1");
    std::bernoulli_distribution keep(1.0 - p);
    const Matrix& av = a.value();
    Matrix mask(av.rows(), av.cols());
    const double s = 1.0 / (1.0 - p);
    for (Eigen::Index j = 0; j < av.cols(); ++j)
        for (Eigen::Index i = 0; i < av.rows(); ++i) mask(i, j) = keep(rng) ? s : 0.0;
    const int ia = a.id();
    return tape_of(a).record(av.cwiseProduct(mask), {ia}, [ia, mask](Tape& t, int self) {
        t.accumulate(ia, t.grad(self).cwiseProduct(mask));
    });
}

Var squared_distance(Var a, Var b) {
    if (a.cols() != b.cols()) throw std::invalid_argument("squared_distance: width mismatch");
    const Matrix& av = a.value();
    const Matrix& bv = b.value();
    Matrix out(av.rows(), bv.rows());
    for (Eigen::Index i = 0; i < av.rows(); ++i)
        for (Eigen::Index j = 0; j < bv.rows(); ++j) out(i, j) = (av.row(i) - bv.row(j)).squaredNorm();
    const int ia = a.id(), ib = b.id();
    return tape_of(a).record(std::move(out), {ia, ib}, [ia, ib](Tape& t, int self) {
        const Matrix& g = t.grad(self);
        const Matrix& av2 = t.value(ia);
        const Matrix& bv2 = t.value(ib);
        // d/da_i = sum_j 2 g_ij (a_i - b_j); d/db_j = -sum_i 2 g_ij (a_i - b_j)
        const Vector gr = g.rowwise().sum();
        const Vector gc = g.colwise().sum().transpose();
        Matrix da = 2.0 * (av2.array().colwise() * gr.array()).matrix() - 2.0 * g * bv2;
        Matrix db = 2.0 * (bv2.array().colwise() * gc.array()).matrix() - 2.0 * g.transpose() * av2;
        t.accumulate(ia, da);
        t.accumulate(ib, db);
    });
}

Var margin_logits(Var cosines, std::span<const int> targets, double margin, double tau) {
    if (!(tau > 0.0)) throw std::invalid_argument("margin_logits: tau must be positive");
    const Matrix& cv = cosines.value();
    if (static_cast<Eigen::Index>(targets.size()) != cv.rows())
        throw std::invalid_argument("margin_logits: target count mismatch");
    constexpr double pi = std::numbers::pi;
    Matrix out = cv / tau;
    Vector dtarget(cv.rows());
    for (Eigen::Index i = 0; i < cv.rows(); ++i) {
        const int j = targets[static_cast<size_t>(i)];
        if (j < 0 || j >= cv.cols()) throw std::out_of_range("margin_logits: target");
        const double raw = cv(i, j);
        const double c = std::clamp(raw, -1.0, 1.0);
        const double theta = std::acos(c);
        const double shifted = std::min(theta + margin, pi);
        out(i, j) = std::cos(shifted) / tau;
        // d cos(theta + m) / dc = sin(theta + m) / sin(theta); zero where a clamp is active.
        if (raw != c || theta + margin >= pi) {
            dtarget(i) = 0.0;
        } else {
            const double s = std::max(std::sin(theta), 1e-8);
            dtarget(i) = std::sin(shifted) / (s * tau);
        }
    }
    const int ic = cosines.id();
    std::vector<int> tg(targets.begin(), targets.end());
    return tape_of(cosines).record(std::move(out), {ic}, [ic, tg, dtarget, tau](Tape& t, int self) {
        Matrix g = t.grad(self) / tau;
        const Matrix& go = t.grad(self);
        for (size_t i = 0; i < tg.size(); ++i) {
            const auto r = static_cast<Eigen::Index>(i);
            g(r, tg[i]) = go(r, tg[i]) * dtarget(r);
        }
        t.accumulate(ic, g);
    });
}

} // namespace bdcp::ag
