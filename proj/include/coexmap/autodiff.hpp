#ifndef COEXMAP_AUTODIFF_HPP
#define COEXMAP_AUTODIFF_HPP

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "coexmap/types.hpp"

namespace coexmap {
namespace ad {

// Reverse-mode tape over dense double matrices. Every op validates shapes,
// rejects non-finite outputs, and registers a backward closure; gradients
// accumulate additively across fan-out. A tape is single-threaded.

struct Node {
    Mat value;
    Mat grad;
    bool requires_grad = false;
    bool leaf = false;
    bool backward_done = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;

    void ensure_grad() {
        if (grad.size() == 0) grad = Mat::Zero(value.rows(), value.cols());
    }
};

class Tensor {
public:
    Tensor() = default;
    explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

    const Mat& value() const { return node_->value; }
    Mat& value() { return node_->value; }
    const Mat& grad() const { return node_->grad; }
    bool requires_grad() const { return node_ && node_->requires_grad; }
    Index rows() const { return node_->value.rows(); }
    Index cols() const { return node_->value.cols(); }
    bool defined() const { return static_cast<bool>(node_); }
    const std::shared_ptr<Node>& node() const { return node_; }

    void zero_grad() {
        if (node_) node_->grad = Mat::Zero(node_->value.rows(), node_->value.cols());
    }

private:
    std::shared_ptr<Node> node_;
};

Tensor constant(Mat value);
Tensor param(Mat value); // leaf with requires_grad

// Elementwise / scalar.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);
Tensor scale(const Tensor& a, Scalar s);
Tensor add_scalar(const Tensor& a, Scalar s);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a); // requires strictly positive input
Tensor tanh(const Tensor& a);
Tensor softplus(const Tensor& a);
Tensor sigmoid(const Tensor& a);
Tensor sqrt(const Tensor& a); // requires strictly positive input
Tensor clamp(const Tensor& a, Scalar lo, Scalar hi); // zero gradient outside [lo, hi]

// Structure.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor gram(const Tensor& a); // a a^T with exactly symmetric output
Tensor reshape(const Tensor& a, Index rows, Index cols); // column-major reinterpretation
Tensor concat_rows(const Tensor& a, const Tensor& b);
Tensor concat_cols(const Tensor& a, const Tensor& b);
Tensor gather_rows(const Tensor& a, std::vector<Index> rows);

// Reductions / normalization.
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
Tensor rowwise_sum(const Tensor& a);  // (n x m) -> (n x 1)
Tensor colwise_mean(const Tensor& a); // (n x m) -> (1 x m)
Tensor broadcast_rows(const Tensor& row, Index n); // (1 x m) -> (n x m)
Tensor broadcast_cols(const Tensor& col, Index m); // (n x 1) -> (n x m)
Tensor l2_normalize_rows(const Tensor& a);      // throws on zero-norm rows
Tensor l2_normalize_rows_safe(const Tensor& a); // zero-norm rows map to zero rows

// Softmax over variable-length index segments of a column vector; each
// segment's outputs are non-negative and sum to one. segment ids must lie in
// [0, n_segments).
Tensor segment_softmax(const Tensor& scores, std::vector<Index> segment, Index n_segments);
// Sums rows of `values` into their segment's output row.
Tensor segment_sum(const Tensor& values, std::vector<Index> segment, Index n_segments);

// x * tanh(softplus(x)).
Tensor mish(const Tensor& a);

// Reverse pass from a scalar loss; fills grads of every reachable
// requires_grad node. A second backward on the same root throws.
void backward(const Tensor& loss);

// Central finite differences against tape gradients over the given leaves.
// Returns the max discrepancy |fd - ad| / max(|fd|, |ad|, 0.01); the floor
// makes near-zero coordinates compare at absolute scale.
Scalar gradcheck(const std::function<Tensor(const std::vector<Tensor>&)>& f,
                 const std::vector<Tensor>& leaves, Scalar eps = 1e-5);

} // namespace ad
} // namespace coexmap

#endif
