#include "coexmap/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace coexmap {
namespace ad {

namespace {

std::shared_ptr<Node> make_node(Mat value, const char* op,
                                std::vector<std::shared_ptr<Node>> parents,
                                std::function<void(Node&)> backward_fn) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    node->op = op;
    if (!node->value.allFinite())
        throw NumericError(std::string("non-finite value produced by op '") + op + "'");
    for (const auto& p : parents)
        if (p->requires_grad) node->requires_grad = true;
    if (node->requires_grad) {
        node->parents = std::move(parents);
        node->backward_fn = std::move(backward_fn);
    }
    return node;
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.rows() != b.rows() || a.cols() != b.cols())
        throw NumericError(std::string(op) + ": shape mismatch (" + std::to_string(a.rows()) + "x" +
                           std::to_string(a.cols()) + " vs " + std::to_string(b.rows()) + "x" +
                           std::to_string(b.cols()) + ")");
}

} // namespace

Tensor constant(Mat value) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    node->leaf = true;
    if (!node->value.allFinite()) throw NumericError("non-finite constant");
    return Tensor(node);
}

Tensor param(Mat value) {
    auto node = std::make_shared<Node>();
    node->value = std::move(value);
    node->leaf = true;
    node->requires_grad = true;
    node->ensure_grad();
    if (!node->value.allFinite()) throw NumericError("non-finite parameter");
    return Tensor(node);
}

Tensor add(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "add");
    auto pa = a.node(), pb = b.node();
    return Tensor(make_node(a.value() + b.value(), "add", {pa, pb}, [pa, pb](Node& n) {
        if (pa->requires_grad) { pa->ensure_grad(); pa->grad += n.grad; }
        if (pb->requires_grad) { pb->ensure_grad(); pb->grad += n.grad; }
    }));
}

Tensor sub(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "sub");
    auto pa = a.node(), pb = b.node();
    return Tensor(make_node(a.value() - b.value(), "sub", {pa, pb}, [pa, pb](Node& n) {
        if (pa->requires_grad) { pa->ensure_grad(); pa->grad += n.grad; }
        if (pb->requires_grad) { pb->ensure_grad(); pb->grad -= n.grad; }
    }));
}

Tensor mul(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "mul");
    auto pa = a.node(), pb = b.node();
    return Tensor(make_node(a.value().cwiseProduct(b.value()), "mul", {pa, pb}, [pa, pb](Node& n) {
        if (pa->requires_grad) { pa->ensure_grad(); pa->grad += n.grad.cwiseProduct(pb->value); }
        if (pb->requires_grad) { pb->ensure_grad(); pb->grad += n.grad.cwiseProduct(pa->value); }
    }));
}

Tensor div(const Tensor& a, const Tensor& b) {
    check_same_shape(a, b, "div");
    auto pa = a.node(), pb = b.node();
    return Tensor(make_node(a.value().cwiseQuotient(b.value()), "div", {pa, pb}, [pa, pb](Node& n) {
        if (pa->requires_grad) { pa->ensure_grad(); pa->grad += n.grad.cwiseQuotient(pb->value); }
        if (pb->requires_grad) {
            pb->ensure_grad();
            pb->grad -= n.grad.cwiseProduct(pa->value)
                            .cwiseQuotient(pb->value.cwiseProduct(pb->value));
        }
    }));
}

Tensor neg(const Tensor& a) {
    auto pa = a.node();
    return Tensor(make_node(-a.value(), "neg", {pa}, [pa](Node& n) {
        pa->ensure_grad();
        pa->grad -= n.grad;
    }));
}

Tensor scale(const Tensor& a, Scalar s) {
    auto pa = a.node();
    return Tensor(make_node(a.value() * s, "scale", {pa}, [pa, s](Node& n) {
        pa->ensure_grad();
        pa->grad += n.grad * s;
    }));
}

Tensor add_scalar(const Tensor& a, Scalar s) {
    auto pa = a.node();
    return Tensor(make_node(a.value().array() + s, "add_scalar", {pa}, [pa](Node& n) {
        pa->ensure_grad();
        pa->grad += n.grad;
    }));
}

Tensor exp(const Tensor& a) {
    auto pa = a.node();
    return Tensor(make_node(a.value().array().exp(), "exp", {pa}, [pa](Node& n) {
        pa->ensure_grad();
        pa->grad += n.grad.cwiseProduct(n.value);
    }));
}

Tensor log(const Tensor& a) {
    if ((a.value().array() <= 0).any()) throw NumericError("log: non-positive input");
    auto pa = a.node();
    return Tensor(make_node(a.value().array().log(), "log", {pa}, [pa](Node& n) {
        pa->ensure_grad();
        pa->grad += n.grad.cwiseQuotient(pa->value);
    }));
}

Tensor tanh(const Tensor& a) {
    auto pa = a.node();
    return Tensor(make_node(a.value().array().tanh(), "tanh", {pa}, [pa](Node& n) {
        pa->ensure_grad();
        pa->grad += n.grad.cwiseProduct((1.0 - n.value.array().square()).matrix());
    }));
}

Tensor softplus(const Tensor& a) {
    auto pa = a.node();
    // ln(1 + e^x) = max(x, 0) + log1p(e^{-|x|}); gradient is the logistic.
    Mat v = a.value().array().max(0.0) + (-a.value().array().abs()).exp().log1p();
    return Tensor(make_node(std::move(v), "softplus", {pa}, [pa](Node& n) {
        pa->ensure_grad();
        pa->grad.array() += n.grad.array() / (1.0 + (-pa->value.array()).exp());
    }));
}

Tensor sigmoid(const Tensor& a) {
    auto pa = a.node();
    Mat v = 1.0 / (1.0 + (-a.value().array()).exp());
    return Tensor(make_node(std::move(v), "sigmoid", {pa}, [pa](Node& n) {
        pa->ensure_grad();
        pa->grad.array() += n.grad.array() * n.value.array() * (1.0 - n.value.array());
    }));
}

Tensor sqrt(const Tensor& a) {
    if ((a.value().array() <= 0).any()) throw NumericError("sqrt: non-positive input");
    auto pa = a.node();
    return Tensor(make_node(a.value().array().sqrt(), "sqrt", {pa}, [pa](Node& n) {
        pa->ensure_grad();
        pa->grad += n.grad.cwiseQuotient(2.0 * n.value);
    }));
}

Tensor clamp(const Tensor& a, Scalar lo, Scalar hi) {
    auto pa = a.node();
    Mat v = a.value().array().max(lo).min(hi);
    return Tensor(make_node(std::move(v), "clamp", {pa}, [pa, lo, hi](Node& n) {
        pa->ensure_grad();
        const auto inside = (pa->value.array() >= lo && pa->value.array() <= hi).cast<Scalar>();
        pa->grad.array() += n.grad.array() * inside;
    }));
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.cols() != b.rows())
        throw NumericError("matmul: inner dimension mismatch (" + std::to_string(a.cols()) + " vs " +
                           std::to_string(b.rows()) + ")");
    auto pa = a.node(), pb = b.node();
    return Tensor(make_node(a.value() * b.value(), "matmul", {pa, pb}, [pa, pb](Node& n) {
        if (pa->requires_grad) { pa->ensure_grad(); pa->grad.noalias() += n.grad * pb->value.transpose(); }
        if (pb->requires_grad) { pb->ensure_grad(); pb->grad.noalias() += pa->value.transpose() * n.grad; }
    }));
}

Tensor transpose(const Tensor& a) {
    auto pa = a.node();
    return Tensor(make_node(a.value().transpose(), "transpose", {pa}, [pa](Node& n) {
        pa->ensure_grad();
        pa->grad += n.grad.transpose();
    }));
}

Tensor gram(const Tensor& a) {
    auto pa = a.node();
    Mat g = a.value() * a.value().transpose();
    // Mirror the lower triangle so the output is symmetric bit-for-bit.
    for (Index i = 0; i < g.rows(); ++i)
        for (Index j = 0; j < i; ++j) g(j, i) = g(i, j);
    return Tensor(make_node(std::move(g), "gram", {pa}, [pa](Node& n) {
        pa->ensure_grad();
        pa->grad.noalias() += (n.grad + n.grad.transpose()) * pa->value;
    }));
}

Tensor reshape(const Tensor& a, Index rows, Index cols) {
    if (rows * cols != a.rows() * a.cols()) throw NumericError("reshape: element count mismatch");
    auto pa = a.node();
    Mat v = Eigen::Map<const Mat>(a.value().data(), rows, cols);
    const Index ar = a.rows(), ac = a.cols();
    return Tensor(make_node(std::move(v), "reshape", {pa}, [pa, ar, ac](Node& n) {
        pa->ensure_grad();
        pa->grad += Eigen::Map<const Mat>(n.grad.data(), ar, ac);
    }));
}

Tensor concat_rows(const Tensor& a, const Tensor& b) {
    if (a.cols() != b.cols()) throw NumericError("concat_rows: column mismatch");
    auto pa = a.node(), pb = b.node();
    Mat v(a.rows() + b.rows(), a.cols());
    v.topRows(a.rows()) = a.value();
    v.bottomRows(b.rows()) = b.value();
    const Index na = a.rows();
    return Tensor(make_node(std::move(v), "concat_rows", {pa, pb}, [pa, pb, na](Node& n) {
        if (pa->requires_grad) { pa->ensure_grad(); pa->grad += n.grad.topRows(na); }
        if (pb->requires_grad) { pb->ensure_grad(); pb->grad += n.grad.bottomRows(n.grad.rows() - na); }
    }));
}

Tensor concat_cols(const Tensor& a, const Tensor& b) {
    if (a.rows() != b.rows()) throw NumericError("concat_cols: row mismatch");
    auto pa = a.node(), pb = b.node();
    Mat v(a.rows(), a.cols() + b.cols());
    v.leftCols(a.cols()) = a.value();
    v.rightCols(b.cols()) = b.value();
    const Index ca = a.cols();
    return Tensor(make_node(std::move(v), "concat_cols", {pa, pb}, [pa, pb, ca](Node& n) {
        if (pa->requires_grad) { pa->ensure_grad(); pa->grad += n.grad.leftCols(ca); }
        if (pb->requires_grad) { pb->ensure_grad(); pb->grad += n.grad.rightCols(n.grad.cols() - ca); }
    }));
}

Tensor gather_rows(const Tensor& a, std::vector<Index> rows) {
    for (Index r : rows)
        if (r < 0 || r >= a.rows()) throw NumericError("gather_rows: index out of range");
    auto pa = a.node();
    Mat v(static_cast<Index>(rows.size()), a.cols());
    for (Index i = 0; i < v.rows(); ++i) v.row(i) = a.value().row(rows[static_cast<std::size_t>(i)]);
    auto idx = std::make_shared<std::vector<Index>>(std::move(rows));
    return Tensor(make_node(std::move(v), "gather_rows", {pa}, [pa, idx](Node& n) {
        pa->ensure_grad();
        for (Index i = 0; i < n.grad.rows(); ++i)
            pa->grad.row((*idx)[static_cast<std::size_t>(i)]) += n.grad.row(i);
    }));
}

Tensor sum(const Tensor& a) {
    auto pa = a.node();
    Mat v(1, 1);
    v(0, 0) = a.value().sum();
    return Tensor(make_node(std::move(v), "sum", {pa}, [pa](Node& n) {
        pa->ensure_grad();
        pa->grad.array() += n.grad(0, 0);
    }));
}

Tensor mean(const Tensor& a) {
    auto pa = a.node();
    const Scalar inv = 1.0 / static_cast<Scalar>(a.rows() * a.cols());
    Mat v(1, 1);
    v(0, 0) = a.value().sum() * inv;
    return Tensor(make_node(std::move(v), "mean", {pa}, [pa, inv](Node& n) {
        pa->ensure_grad();
        pa->grad.array() += n.grad(0, 0) * inv;
    }));
}

Tensor rowwise_sum(const Tensor& a) {
    auto pa = a.node();
    return Tensor(make_node(a.value().rowwise().sum(), "rowwise_sum", {pa}, [pa](Node& n) {
        pa->ensure_grad();
        pa->grad.colwise() += n.grad.col(0);
    }));
}

Tensor colwise_mean(const Tensor& a) {
    auto pa = a.node();
    const Scalar inv = 1.0 / static_cast<Scalar>(a.rows());
    return Tensor(make_node(a.value().colwise().mean(), "colwise_mean", {pa}, [pa, inv](Node& n) {
        pa->ensure_grad();
        pa->grad.rowwise() += (n.grad.row(0) * inv);
    }));
}

Tensor broadcast_rows(const Tensor& row, Index n) {
    if (row.rows() != 1) throw NumericError("broadcast_rows: input must be 1 x m");
    auto pa = row.node();
    Mat v = row.value().replicate(n, 1);
    return Tensor(make_node(std::move(v), "broadcast_rows", {pa}, [pa](Node& n_) {
        pa->ensure_grad();
        pa->grad += n_.grad.colwise().sum();
    }));
}

Tensor broadcast_cols(const Tensor& col, Index m) {
    if (col.cols() != 1) throw NumericError("broadcast_cols: input must be n x 1");
    auto pa = col.node();
    Mat v = col.value().replicate(1, m);
    return Tensor(make_node(std::move(v), "broadcast_cols", {pa}, [pa](Node& n_) {
        pa->ensure_grad();
        pa->grad += n_.grad.rowwise().sum();
    }));
}

namespace {

Tensor l2_normalize_rows_impl(const Tensor& a, bool allow_zero) {
    auto pa = a.node();
    Vec norms = a.value().rowwise().norm();
    if (!allow_zero && (norms.array() == 0).any())
        throw NumericError("l2_normalize_rows: zero-norm row");
    Mat v = Mat::Zero(a.rows(), a.cols());
    for (Index i = 0; i < a.rows(); ++i)
        if (norms(i) > 0) v.row(i) = a.value().row(i) / norms(i);
    auto np = std::make_shared<Vec>(std::move(norms));
    return Tensor(make_node(std::move(v), "l2_normalize_rows", {pa}, [pa, np](Node& n) {
        pa->ensure_grad();
        for (Index i = 0; i < n.grad.rows(); ++i) {
            const Scalar norm = (*np)(i);
            if (norm == 0) continue; // zero row stays zero; no gradient
            const auto r = n.value.row(i);
            const Scalar rg = r.dot(n.grad.row(i));
            pa->grad.row(i) += (n.grad.row(i) - rg * r) / norm;
        }
    }));
}

} // namespace

Tensor l2_normalize_rows(const Tensor& a) { return l2_normalize_rows_impl(a, false); }
Tensor l2_normalize_rows_safe(const Tensor& a) { return l2_normalize_rows_impl(a, true); }

Tensor segment_softmax(const Tensor& scores, std::vector<Index> segment, Index n_segments) {
    if (scores.cols() != 1) throw NumericError("segment_softmax: scores must be n x 1");
    if (static_cast<Index>(segment.size()) != scores.rows())
        throw NumericError("segment_softmax: segment ids do not match scores");
    for (Index s : segment)
        if (s < 0 || s >= n_segments) throw NumericError("segment_softmax: segment id out of range");

    const Index n = scores.rows();
    Vec seg_max = Vec::Constant(n_segments, -std::numeric_limits<Scalar>::infinity());
    for (Index i = 0; i < n; ++i) {
        const Index s = segment[static_cast<std::size_t>(i)];
        seg_max(s) = std::max(seg_max(s), scores.value()(i, 0));
    }
    Vec seg_sum = Vec::Zero(n_segments);
    Mat v(n, 1);
    for (Index i = 0; i < n; ++i) {
        const Index s = segment[static_cast<std::size_t>(i)];
        v(i, 0) = std::exp(scores.value()(i, 0) - seg_max(s));
        seg_sum(s) += v(i, 0);
    }
    for (Index i = 0; i < n; ++i) v(i, 0) /= seg_sum(segment[static_cast<std::size_t>(i)]);

    auto pa = scores.node();
    auto seg = std::make_shared<std::vector<Index>>(std::move(segment));
    return Tensor(make_node(std::move(v), "segment_softmax", {pa}, [pa, seg, n_segments](Node& n_) {
        pa->ensure_grad();
        // d/ds_e = alpha_e * (g_e - sum_{k in seg} g_k alpha_k)
        Vec seg_dot = Vec::Zero(n_segments);
        for (Index i = 0; i < n_.grad.rows(); ++i)
            seg_dot((*seg)[static_cast<std::size_t>(i)]) += n_.grad(i, 0) * n_.value(i, 0);
        for (Index i = 0; i < n_.grad.rows(); ++i) {
            const Index s = (*seg)[static_cast<std::size_t>(i)];
            pa->grad(i, 0) += n_.value(i, 0) * (n_.grad(i, 0) - seg_dot(s));
        }
    }));
}

Tensor segment_sum(const Tensor& values, std::vector<Index> segment, Index n_segments) {
    if (static_cast<Index>(segment.size()) != values.rows())
        throw NumericError("segment_sum: segment ids do not match rows");
    for (Index s : segment)
        if (s < 0 || s >= n_segments) throw NumericError("segment_sum: segment id out of range");
    Mat v = Mat::Zero(n_segments, values.cols());
    for (Index i = 0; i < values.rows(); ++i)
        v.row(segment[static_cast<std::size_t>(i)]) += values.value().row(i);
    auto pa = values.node();
    auto seg = std::make_shared<std::vector<Index>>(std::move(segment));
    return Tensor(make_node(std::move(v), "segment_sum", {pa}, [pa, seg](Node& n) {
        pa->ensure_grad();
        for (Index i = 0; i < pa->grad.rows(); ++i)
            pa->grad.row(i) += n.grad.row((*seg)[static_cast<std::size_t>(i)]);
    }));
}

Tensor mish(const Tensor& a) { return mul(a, tanh(softplus(a))); }

void backward(const Tensor& loss) {
    if (!loss.defined()) throw NumericError("backward: undefined tensor");
    if (loss.rows() != 1 || loss.cols() != 1) throw NumericError("backward: loss must be scalar");
    Node* root = loss.node().get();
    if (root->backward_done) throw NumericError("backward: repeated backward without reset");
    root->backward_done = true;
    if (!root->requires_grad) return;

    // Iterative post-order DFS; visits each node once, acyclic by construction.
    std::vector<Node*> order;
    std::unordered_set<Node*> visited;
    std::vector<std::pair<Node*, std::size_t>> stack;
    stack.emplace_back(root, 0);
    visited.insert(root);
    while (!stack.empty()) {
        auto& [node, child] = stack.back();
        if (child < node->parents.size()) {
            Node* next = node->parents[child].get();
            ++child;
            if (next->requires_grad && !next->leaf && visited.insert(next).second)
                stack.emplace_back(next, 0);
            else
                visited.insert(next);
        } else {
            order.push_back(node);
            stack.pop_back();
        }
    }

    root->ensure_grad();
    root->grad(0, 0) = 1.0;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* node = *it;
        if (node->backward_fn && node->grad.size() != 0) node->backward_fn(*node);
    }
}

Scalar gradcheck(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                 const std::vector<Tensor>& leaves, Scalar eps) {
    for (const auto& l : leaves) l.node()->grad = Mat::Zero(l.rows(), l.cols());
    Tensor out = f(leaves);
    backward(out);

    Scalar max_err = 0;
    for (const auto& leaf : leaves) {
        Mat& x = leaf.node()->value;
        const Mat analytic = leaf.grad();
        for (Index j = 0; j < x.cols(); ++j) {
            for (Index i = 0; i < x.rows(); ++i) {
                const Scalar orig = x(i, j);
                x(i, j) = orig + eps;
                const Scalar fp = f(leaves).value()(0, 0);
                x(i, j) = orig - eps;
                const Scalar fm = f(leaves).value()(0, 0);
                x(i, j) = orig;
                const Scalar fd = (fp - fm) / (2 * eps);
                const Scalar a = analytic(i, j);
                const Scalar err = std::abs(fd - a) / std::max({std::abs(fd), std::abs(a), 0.01});
                max_err = std::max(max_err, err);
            }
        }
    }
    return max_err;
}

} // namespace ad
} // namespace coexmap
