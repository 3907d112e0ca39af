#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "p3d/tensor.hpp"

namespace p3d::ad {

// Reverse-mode autodiff on a dynamically recorded tape. Every op returns a
// fresh node holding its value; when grad recording is on and an input
// requires gradients, the node also keeps its parents and a closure that
// scatters the node's grad back into them. backward() runs the closures in
// reverse topological order.
struct Node {
    Tensor value;
    Tensor grad;  // empty until ensure_grad()
    bool requires_grad = false;
    std::vector<std::shared_ptr<Node>> parents;
    std::function<void(Node&)> backward_fn;
    std::string name;  // parameters only

    Tensor& ensure_grad() {
        if (grad.data.empty()) grad = Tensor(value.shape);
        return grad;
    }
    void zero_grad() {
        if (!grad.data.empty()) grad.fill(0.0);
    }
};

using Var = std::shared_ptr<Node>;

bool grad_enabled();

// Disables tape recording in scope; forwards run graph-free (sampling, eval).
struct NoGradGuard {
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;

  private:
    bool prev_;
};

Var constant(Tensor v);
Var parameter(Tensor v, std::string name);

// Seeds d(loss)/d(loss) = 1 and runs the tape. loss must be scalar.
void backward(const Var& loss);

// ----- elementwise / arithmetic -----
Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var scale(const Var& a, double c);
Var silu(const Var& x);

// ----- shape plumbing -----
Var reshape(const Var& x, Shape shape);
Var permute(const Var& x, const std::vector<int>& perm);
Var concat_ch(const Var& a, const Var& b);            // along axis 1
Var slice_ch(const Var& x, int start, int len);       // along axis 1
Var repeat_rows(const Var& x, int times);             // axis 0, interleaved
// (B,C,F,H,W) <-> factorized work layouts; see core.hpp for the mappings
Var video_to_spatial_batch(const Var& video);
Var spatial_batch_to_video(const Var& sb, const Shape& origin);
Var video_to_temporal_batch(const Var& video);
Var temporal_batch_to_video(const Var& tb, const Shape& origin);

// ----- dense / attention primitives -----
Var linear(const Var& x, const Var& W, const Var& b);  // x:(N,K) W:(M,K) b:(M)
Var bmm_nt(const Var& a, const Var& b);                // (G,M,K)x(G,N,K) -> (G,M,N)
Var bmm_nn(const Var& a, const Var& b);                // (G,M,K)x(G,K,N) -> (G,M,N)
Var softmax_last(const Var& x);
Var add_pos_rows(const Var& x, const Var& table);      // x:(G,T,C) += table[0:T]
Var l2normalize_rows(const Var& x);                    // x:(N,D), unit rows

// ----- conv / norm / resampling -----
// conv2d: x (N,Ci,H,W), W (Co,Ci,k,k), odd k, stride 1, same zero padding
Var conv2d(const Var& x, const Var& W, const Var& b);
// conv1d: x (N,Ci,F), W (Co,Ci,kt), odd kt, same zero padding
Var conv1d(const Var& x, const Var& W, const Var& b);
Var group_norm(const Var& x, const Var& gamma, const Var& beta, int groups, double eps = 1e-5);
Var add_sample_channel(const Var& x, const Var& e);    // x:(N,C,...) += e:(N,C)
Var upsample2x_nearest(const Var& x);                  // (N,C,H,W) -> (N,C,2H,2W)
Var avgpool2x(const Var& x);                           // (N,C,2H,2W) -> (N,C,H,W)

// ----- losses -----
Var mse(const Var& pred, const Tensor& target);

}  // namespace p3d::ad
