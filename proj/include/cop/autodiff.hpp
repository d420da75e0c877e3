#pragma once

#include "cop/io.hpp"

#include <functional>
#include <utility>
#include <vector>

namespace cop::ad {

using cop::Mat;

// Handle into a Tape. Invalid until assigned by a tape op.
struct Var {
    int id = -1;
    bool valid() const { return id >= 0; }
};

// Reverse-mode tape over dense double matrices. One tape per loss
// evaluation; parameters register a gradient sink that receives the
// accumulated gradient after backward().
class Tape {
public:
    Var constant(Mat v);
    // leaf whose gradient is accumulated (+=) into *grad_sink by backward()
    Var param(const Mat& value, Mat* grad_sink);

    const Mat& val(Var v) const { return nodes_[v.id].val; }
    double scalar(Var v) const { return nodes_[v.id].val(0, 0); }

    // ---- ops ----
    Var matmul(Var a, Var b);
    Var transpose(Var a);
    Var add(Var a, Var b);            // same shape
    Var sub(Var a, Var b);            // same shape
    Var add_rowvec(Var a, Var r);     // a: T×n, r: 1×n broadcast over rows
    Var mul_rowvec(Var a, Var r);     // elementwise, r broadcast over rows
    Var hadamard(Var a, Var b);
    Var scale(Var a, double s);
    Var add_const(Var a, const Mat& c);   // c is not differentiated
    Var concat_cols(Var a, Var b);
    Var slice_cols(Var a, int start, int n);
    Var concat_rows(Var a, Var b);
    Var slice_rows(Var a, int start, int n);
    Var softmax_rows(Var a);
    Var logsumexp_rows(Var a);        // T×n -> T×1; -inf entries allowed
    Var layernorm_rows(Var a, double eps = 1e-6);
    Var gelu(Var a);
    Var sigmoid(Var a);
    Var clamp01(Var a);               // hard saturation to [0,1]
    Var log(Var a);
    Var exp(Var a);
    Var l2normalize_rows(Var a, double eps = 1e-12);
    Var sum(Var a);                   // -> 1×1
    Var mean(Var a);                  // -> 1×1
    Var sum_sq(Var a);                // -> 1×1, sum of squares
    Var softplus(Var a);              // log(1 + e^x), stable
    Var gather_rows(Var a, const std::vector<long>& idx);
    Var reshape(Var a, long rows, long cols); // row-major element order

    // run reverse pass from a 1×1 loss node, flush param gradients
    void backward(Var loss);

    size_t size() const { return nodes_.size(); }

private:
    struct Node {
        Mat val;
        Mat grad;
        std::function<void()> back; // null for leaves
    };

    Var push(Mat v, std::function<void()> back = nullptr);
    Mat& g(int id);

    std::vector<Node> nodes_;
    std::vector<std::pair<int, Mat*>> sinks_;
};

} // namespace cop::ad
