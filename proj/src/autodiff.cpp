#include "p3d/autodiff.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_map>

#include "p3d/core.hpp"

namespace p3d::ad {

namespace {

thread_local bool g_grad_enabled = true;

Var make(Tensor value, std::vector<Var> parents, std::function<void(Node&)> fn) {
    auto n = std::make_shared<Node>();
    n->value = std::move(value);
    if (g_grad_enabled) {
        bool req = false;
        for (const auto& p : parents)
            if (p->requires_grad) req = true;
        if (req) {
            n->requires_grad = true;
            n->parents = std::move(parents);
            n->backward_fn = std::move(fn);
        }
    }
    return n;
}

void acc(Tensor& dst, const Tensor& src) {
    double* d = dst.ptr();
    const double* s = src.ptr();
    for (int64_t i = 0; i < src.numel(); ++i) d[i] += s[i];
}

// C[M,N] += A[M,K] * B[K,N], all row-major contiguous
void mm_acc(const double* A, const double* B, double* C, int M, int K, int N) {
    for (int m = 0; m < M; ++m) {
        const double* a = A + static_cast<int64_t>(m) * K;
        double* c = C + static_cast<int64_t>(m) * N;
        for (int k = 0; k < K; ++k) {
            const double av = a[k];
            const double* brow = B + static_cast<int64_t>(k) * N;
            for (int n = 0; n < N; ++n) c[n] += av * brow[n];
        }
    }
}

double dot(const double* a, const double* b, int n) {
    double s = 0.0;
    for (int i = 0; i < n; ++i) s += a[i] * b[i];
    return s;
}

void axpy(double a, const double* x, double* y, int n) {
    for (int i = 0; i < n; ++i) y[i] += a * x[i];
}

int64_t tail_product(const Shape& s, size_t from) {
    int64_t p = 1;
    for (size_t i = from; i < s.size(); ++i) p *= s[i];
    return p;
}

// col layout: row r = (ci*k + dy)*k + dx, column s = y*W + x
void im2col(const double* x, int Ci, int H, int W, int k, double* col) {
    const int p = k / 2;
    int r = 0;
    for (int ci = 0; ci < Ci; ++ci)
        for (int dy = 0; dy < k; ++dy)
            for (int dx = 0; dx < k; ++dx, ++r) {
                double* dst = col + static_cast<int64_t>(r) * H * W;
                for (int y = 0; y < H; ++y) {
                    const int sy = y + dy - p;
                    double* drow = dst + static_cast<int64_t>(y) * W;
                    if (sy < 0 || sy >= H) {
                        std::fill(drow, drow + W, 0.0);
                        continue;
                    }
                    const double* srow = x + (static_cast<int64_t>(ci) * H + sy) * W;
                    const int x0 = std::max(0, p - dx);
                    const int x1 = std::min(W, W + p - dx);
                    for (int xx = 0; xx < x0; ++xx) drow[xx] = 0.0;
                    for (int xx = x0; xx < x1; ++xx) drow[xx] = srow[xx + dx - p];
                    for (int xx = x1; xx < W; ++xx) drow[xx] = 0.0;
                }
            }
}

void col2im_acc(const double* col, int Ci, int H, int W, int k, double* dx) {
    const int p = k / 2;
    int r = 0;
    for (int ci = 0; ci < Ci; ++ci)
        for (int dy = 0; dy < k; ++dy)
            for (int dxo = 0; dxo < k; ++dxo, ++r) {
                const double* src = col + static_cast<int64_t>(r) * H * W;
                for (int y = 0; y < H; ++y) {
                    const int sy = y + dy - p;
                    if (sy < 0 || sy >= H) continue;
                    double* drow = dx + (static_cast<int64_t>(ci) * H + sy) * W;
                    const double* srow = src + static_cast<int64_t>(y) * W;
                    const int x0 = std::max(0, p - dxo);
                    const int x1 = std::min(W, W + p - dxo);
                    for (int xx = x0; xx < x1; ++xx) drow[xx + dxo - p] += srow[xx];
                }
            }
}

Tensor permute_tensor(const Tensor& x, const std::vector<int>& perm) {
    const int rank = x.rank();
    if (static_cast<int>(perm.size()) != rank) throw ShapeError("permute: rank mismatch");
    std::vector<int64_t> xstride(rank, 1);
    for (int i = rank - 2; i >= 0; --i) xstride[i] = xstride[i + 1] * x.dim(i + 1);
    Shape oshape(rank);
    for (int i = 0; i < rank; ++i) oshape[i] = x.dim(perm[i]);
    Tensor out(oshape);
    std::vector<int64_t> ostride_in(rank);  // stride in x of out axis i
    for (int i = 0; i < rank; ++i) ostride_in[i] = xstride[perm[i]];
    const int64_t n = out.numel();
    const int last = rank - 1;
    const int64_t inner = oshape[last];
    const int64_t inner_stride = ostride_in[last];
    for (int64_t base = 0; base < n; base += inner) {
        int64_t rem = base;
        int64_t xoff = 0;
        for (int i = 0; i < last; ++i) {
            int64_t block = tail_product(oshape, i + 1);
            int64_t coord = rem / block;
            rem -= coord * block;
            xoff += coord * ostride_in[i];
        }
        double* d = out.ptr() + base;
        const double* s = x.ptr() + xoff;
        for (int64_t j = 0; j < inner; ++j) d[j] = s[j * inner_stride];
    }
    return out;
}

std::vector<int> inverse_perm(const std::vector<int>& perm) {
    std::vector<int> inv(perm.size());
    for (size_t i = 0; i < perm.size(); ++i) inv[perm[i]] = static_cast<int>(i);
    return inv;
}

}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

Var constant(Tensor v) {
    auto n = std::make_shared<Node>();
    n->value = std::move(v);
    return n;
}

Var parameter(Tensor v, std::string name) {
    auto n = std::make_shared<Node>();
    n->value = std::move(v);
    n->requires_grad = true;
    n->name = std::move(name);
    return n;
}

void backward(const Var& loss) {
    if (loss->value.numel() != 1) throw ShapeError("backward: loss must be scalar");
    if (!loss->requires_grad) return;

    std::vector<Node*> order;
    std::unordered_map<Node*, int> state;  // 0 unseen, 1 expanded, 2 emitted
    std::vector<Node*> stack{loss.get()};
    while (!stack.empty()) {
        Node* n = stack.back();
        int& st = state[n];
        if (st == 0) {
            st = 1;
            for (const auto& p : n->parents)
                if (p->requires_grad && state[p.get()] == 0) stack.push_back(p.get());
        } else {
            stack.pop_back();
            if (st == 1) {
                st = 2;
                order.push_back(n);
            }
        }
    }

    loss->ensure_grad().fill(1.0);
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node* n = *it;
        if (!n->backward_fn) continue;
        n->ensure_grad();
        n->backward_fn(*n);
    }
}

// ----- elementwise -----

Var add(const Var& a, const Var& b) {
    if (!a->value.same_shape(b->value))
        throw ShapeError("add: shape mismatch " + shape_str(a->value.shape) + " vs " + shape_str(b->value.shape));
    Tensor out = a->value;
    acc(out, b->value);
    return make(std::move(out), {a, b}, [a, b](Node& self) {
        if (a->requires_grad) acc(a->ensure_grad(), self.grad);
        if (b->requires_grad) acc(b->ensure_grad(), self.grad);
    });
}

Var sub(const Var& a, const Var& b) {
    if (!a->value.same_shape(b->value)) throw ShapeError("sub: shape mismatch");
    Tensor out = a->value;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] -= b->value[i];
    return make(std::move(out), {a, b}, [a, b](Node& self) {
        if (a->requires_grad) acc(a->ensure_grad(), self.grad);
        if (b->requires_grad) {
            Tensor& g = b->ensure_grad();
            for (int64_t i = 0; i < g.numel(); ++i) g[i] -= self.grad[i];
        }
    });
}

Var mul(const Var& a, const Var& b) {
    if (!a->value.same_shape(b->value)) throw ShapeError("mul: shape mismatch");
    Tensor out = a->value;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] *= b->value[i];
    return make(std::move(out), {a, b}, [a, b](Node& self) {
        if (a->requires_grad) {
            Tensor& g = a->ensure_grad();
            for (int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * b->value[i];
        }
        if (b->requires_grad) {
            Tensor& g = b->ensure_grad();
            for (int64_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * a->value[i];
        }
    });
}

Var scale(const Var& a, double c) {
    Tensor out = a->value;
    for (double& v : out.data) v *= c;
    return make(std::move(out), {a}, [a, c](Node& self) {
        if (!a->requires_grad) return;
        Tensor& g = a->ensure_grad();
        for (int64_t i = 0; i < g.numel(); ++i) g[i] += c * self.grad[i];
    });
}

Var silu(const Var& x) {
    Tensor out = x->value;
    for (double& v : out.data) v = v / (1.0 + std::exp(-v));
    return make(std::move(out), {x}, [x](Node& self) {
        if (!x->requires_grad) return;
        Tensor& g = x->ensure_grad();
        for (int64_t i = 0; i < g.numel(); ++i) {
            const double v = x->value[i];
            const double s = 1.0 / (1.0 + std::exp(-v));
            g[i] += self.grad[i] * s * (1.0 + v * (1.0 - s));
        }
    });
}

// ----- shape plumbing -----

Var reshape(const Var& x, Shape shape) {
    if (numel_of(shape) != x->value.numel())
        throw ShapeError("reshape: " + shape_str(x->value.shape) + " -> " + shape_str(shape) +
                         " changes element count");
    Tensor out = x->value;
    out.shape = shape;
    return make(std::move(out), {x}, [x](Node& self) {
        if (!x->requires_grad) return;
        acc(x->ensure_grad(), self.grad);
    });
}

Var permute(const Var& x, const std::vector<int>& perm) {
    Tensor out = permute_tensor(x->value, perm);
    std::vector<int> inv = inverse_perm(perm);
    return make(std::move(out), {x}, [x, inv](Node& self) {
        if (!x->requires_grad) return;
        acc(x->ensure_grad(), permute_tensor(self.grad, inv));
    });
}

Var concat_ch(const Var& a, const Var& b) {
    const Tensor& av = a->value;
    const Tensor& bv = b->value;
    if (av.rank() != bv.rank() || av.rank() < 2) throw ShapeError("concat_ch: rank mismatch");
    for (int i = 0; i < av.rank(); ++i)
        if (i != 1 && av.dim(i) != bv.dim(i)) throw ShapeError("concat_ch: non-channel dims differ");
    Shape oshape = av.shape;
    oshape[1] = av.dim(1) + bv.dim(1);
    Tensor out(oshape);
    const int64_t inner = tail_product(av.shape, 2);
    const int64_t arow = av.dim(1) * inner, brow = bv.dim(1) * inner;
    for (int n = 0; n < av.dim(0); ++n) {
        std::copy_n(av.ptr() + n * arow, arow, out.ptr() + n * (arow + brow));
        std::copy_n(bv.ptr() + n * brow, brow, out.ptr() + n * (arow + brow) + arow);
    }
    return make(std::move(out), {a, b}, [a, b, arow, brow](Node& self) {
        const int N = a->value.dim(0);
        for (int n = 0; n < N; ++n) {
            const double* g = self.grad.ptr() + n * (arow + brow);
            if (a->requires_grad) {
                double* ga = a->ensure_grad().ptr() + n * arow;
                for (int64_t i = 0; i < arow; ++i) ga[i] += g[i];
            }
            if (b->requires_grad) {
                double* gb = b->ensure_grad().ptr() + n * brow;
                for (int64_t i = 0; i < brow; ++i) gb[i] += g[arow + i];
            }
        }
    });
}

Var slice_ch(const Var& x, int start, int len) {
    const Tensor& xv = x->value;
    if (xv.rank() < 2) throw ShapeError("slice_ch: rank must be >= 2");
    if (start < 0 || len < 1 || start + len > xv.dim(1)) throw ShapeError("slice_ch: range out of bounds");
    Shape oshape = xv.shape;
    oshape[1] = len;
    Tensor out(oshape);
    const int64_t inner = tail_product(xv.shape, 2);
    const int64_t xrow = xv.dim(1) * inner, orow = len * inner;
    for (int n = 0; n < xv.dim(0); ++n)
        std::copy_n(xv.ptr() + n * xrow + start * inner, orow, out.ptr() + n * orow);
    return make(std::move(out), {x}, [x, start, inner, xrow, orow](Node& self) {
        if (!x->requires_grad) return;
        Tensor& g = x->ensure_grad();
        for (int n = 0; n < x->value.dim(0); ++n) {
            double* gx = g.ptr() + n * xrow + start * inner;
            const double* go = self.grad.ptr() + n * orow;
            for (int64_t i = 0; i < orow; ++i) gx[i] += go[i];
        }
    });
}

Var repeat_rows(const Var& x, int times) {
    if (times < 1) throw ShapeError("repeat_rows: times must be >= 1");
    const Tensor& xv = x->value;
    const int B = xv.dim(0);
    const int64_t inner = tail_product(xv.shape, 1);
    Shape oshape = xv.shape;
    oshape[0] = B * times;
    Tensor out(oshape);
    for (int b = 0; b < B; ++b)
        for (int j = 0; j < times; ++j)
            std::copy_n(xv.ptr() + b * inner, inner, out.ptr() + (static_cast<int64_t>(b) * times + j) * inner);
    return make(std::move(out), {x}, [x, times, inner](Node& self) {
        if (!x->requires_grad) return;
        Tensor& g = x->ensure_grad();
        const int B = x->value.dim(0);
        for (int b = 0; b < B; ++b) {
            double* gb = g.ptr() + b * inner;
            for (int j = 0; j < times; ++j) {
                const double* go = self.grad.ptr() + (static_cast<int64_t>(b) * times + j) * inner;
                for (int64_t i = 0; i < inner; ++i) gb[i] += go[i];
            }
        }
    });
}

Var video_to_spatial_batch(const Var& video) {
    const Tensor& v = video->value;
    check_rank(v, 5, "video_to_spatial_batch");
    Tensor out({v.dim(0) * v.dim(2), v.dim(1), v.dim(3), v.dim(4)});
    scatter_spatial_batch(v, out);
    return make(std::move(out), {video}, [video](Node& self) {
        if (!video->requires_grad) return;
        Tensor tmp(video->value.shape);
        gather_spatial_batch(self.grad, video->value.shape, tmp);
        acc(video->ensure_grad(), tmp);
    });
}

Var spatial_batch_to_video(const Var& sb, const Shape& origin) {
    if (origin.size() != 5) throw ShapeError("spatial_batch_to_video: origin must be rank 5");
    Tensor out(origin);
    gather_spatial_batch(sb->value, origin, out);
    return make(std::move(out), {sb}, [sb](Node& self) {
        if (!sb->requires_grad) return;
        Tensor tmp(sb->value.shape);
        scatter_spatial_batch(self.grad, tmp);
        acc(sb->ensure_grad(), tmp);
    });
}

Var video_to_temporal_batch(const Var& video) {
    const Tensor& v = video->value;
    check_rank(v, 5, "video_to_temporal_batch");
    Tensor out({v.dim(0) * v.dim(3) * v.dim(4), v.dim(1), v.dim(2)});
    scatter_temporal_batch(v, out);
    return make(std::move(out), {video}, [video](Node& self) {
        if (!video->requires_grad) return;
        Tensor tmp(video->value.shape);
        gather_temporal_batch(self.grad, video->value.shape, tmp);
        acc(video->ensure_grad(), tmp);
    });
}

Var temporal_batch_to_video(const Var& tb, const Shape& origin) {
    if (origin.size() != 5) throw ShapeError("temporal_batch_to_video: origin must be rank 5");
    Tensor out(origin);
    gather_temporal_batch(tb->value, origin, out);
    return make(std::move(out), {tb}, [tb](Node& self) {
        if (!tb->requires_grad) return;
        Tensor tmp(tb->value.shape);
        scatter_temporal_batch(self.grad, tmp);
        acc(tb->ensure_grad(), tmp);
    });
}

// ----- dense / attention -----

Var linear(const Var& x, const Var& W, const Var& b) {
    const Tensor& xv = x->value;
    const Tensor& wv = W->value;
    check_rank(xv, 2, "linear input");
    check_rank(wv, 2, "linear weight");
    const int N = xv.dim(0), K = xv.dim(1), M = wv.dim(0);
    if (wv.dim(1) != K) throw ShapeError("linear: weight K mismatch");
    if (b->value.numel() != M) throw ShapeError("linear: bias size mismatch");
    Tensor out({N, M});
    for (int n = 0; n < N; ++n) {
        const double* xr = xv.ptr() + static_cast<int64_t>(n) * K;
        double* yr = out.ptr() + static_cast<int64_t>(n) * M;
        for (int m = 0; m < M; ++m)
            yr[m] = b->value[m] + dot(xr, wv.ptr() + static_cast<int64_t>(m) * K, K);
    }
    return make(std::move(out), {x, W, b}, [x, W, b, N, K, M](Node& self) {
        const double* dy = self.grad.ptr();
        if (x->requires_grad) {
            double* dx = x->ensure_grad().ptr();
            for (int n = 0; n < N; ++n)
                for (int m = 0; m < M; ++m)
                    axpy(dy[static_cast<int64_t>(n) * M + m], W->value.ptr() + static_cast<int64_t>(m) * K,
                         dx + static_cast<int64_t>(n) * K, K);
        }
        if (W->requires_grad) {
            double* dw = W->ensure_grad().ptr();
            for (int n = 0; n < N; ++n)
                for (int m = 0; m < M; ++m)
                    axpy(dy[static_cast<int64_t>(n) * M + m], x->value.ptr() + static_cast<int64_t>(n) * K,
                         dw + static_cast<int64_t>(m) * K, K);
        }
        if (b->requires_grad) {
            double* db = b->ensure_grad().ptr();
            for (int n = 0; n < N; ++n)
                for (int m = 0; m < M; ++m) db[m] += dy[static_cast<int64_t>(n) * M + m];
        }
    });
}

Var bmm_nt(const Var& a, const Var& b) {
    const Tensor& av = a->value;
    const Tensor& bv = b->value;
    check_rank(av, 3, "bmm_nt lhs");
    check_rank(bv, 3, "bmm_nt rhs");
    const int G = av.dim(0), M = av.dim(1), K = av.dim(2), N = bv.dim(1);
    if (bv.dim(0) != G || bv.dim(2) != K) throw ShapeError("bmm_nt: shape mismatch");
    Tensor out({G, M, N});
    for (int g = 0; g < G; ++g) {
        const double* A = av.ptr() + static_cast<int64_t>(g) * M * K;
        const double* B = bv.ptr() + static_cast<int64_t>(g) * N * K;
        double* C = out.ptr() + static_cast<int64_t>(g) * M * N;
        for (int m = 0; m < M; ++m)
            for (int n = 0; n < N; ++n)
                C[static_cast<int64_t>(m) * N + n] =
                    dot(A + static_cast<int64_t>(m) * K, B + static_cast<int64_t>(n) * K, K);
    }
    return make(std::move(out), {a, b}, [a, b, G, M, K, N](Node& self) {
        for (int g = 0; g < G; ++g) {
            const double* dC = self.grad.ptr() + static_cast<int64_t>(g) * M * N;
            const double* A = a->value.ptr() + static_cast<int64_t>(g) * M * K;
            const double* B = b->value.ptr() + static_cast<int64_t>(g) * N * K;
            if (a->requires_grad) {
                double* dA = a->ensure_grad().ptr() + static_cast<int64_t>(g) * M * K;
                mm_acc(dC, B, dA, M, N, K);
            }
            if (b->requires_grad) {
                double* dB = b->ensure_grad().ptr() + static_cast<int64_t>(g) * N * K;
                for (int m = 0; m < M; ++m)
                    for (int n = 0; n < N; ++n)
                        axpy(dC[static_cast<int64_t>(m) * N + n], A + static_cast<int64_t>(m) * K,
                             dB + static_cast<int64_t>(n) * K, K);
            }
        }
    });
}

Var bmm_nn(const Var& a, const Var& b) {
    const Tensor& av = a->value;
    const Tensor& bv = b->value;
    check_rank(av, 3, "bmm_nn lhs");
    check_rank(bv, 3, "bmm_nn rhs");
    const int G = av.dim(0), M = av.dim(1), K = av.dim(2), N = bv.dim(2);
    if (bv.dim(0) != G || bv.dim(1) != K) throw ShapeError("bmm_nn: shape mismatch");
    Tensor out({G, M, N});
    for (int g = 0; g < G; ++g)
        mm_acc(av.ptr() + static_cast<int64_t>(g) * M * K, bv.ptr() + static_cast<int64_t>(g) * K * N,
               out.ptr() + static_cast<int64_t>(g) * M * N, M, K, N);
    return make(std::move(out), {a, b}, [a, b, G, M, K, N](Node& self) {
        for (int g = 0; g < G; ++g) {
            const double* dC = self.grad.ptr() + static_cast<int64_t>(g) * M * N;
            const double* A = a->value.ptr() + static_cast<int64_t>(g) * M * K;
            const double* B = b->value.ptr() + static_cast<int64_t>(g) * K * N;
            if (a->requires_grad) {
                double* dA = a->ensure_grad().ptr() + static_cast<int64_t>(g) * M * K;
                for (int m = 0; m < M; ++m)
                    for (int k = 0; k < K; ++k)
                        dA[static_cast<int64_t>(m) * K + k] +=
                            dot(dC + static_cast<int64_t>(m) * N, B + static_cast<int64_t>(k) * N, N);
            }
            if (b->requires_grad) {
                double* dB = b->ensure_grad().ptr() + static_cast<int64_t>(g) * K * N;
                for (int m = 0; m < M; ++m)
                    for (int k = 0; k < K; ++k)
                        axpy(A[static_cast<int64_t>(m) * K + k], dC + static_cast<int64_t>(m) * N,
                             dB + static_cast<int64_t>(k) * N, N);
            }
        }
    });
}

Var softmax_last(const Var& x) {
    const Tensor& xv = x->value;
    const int L = xv.dim(xv.rank() - 1);
    const int64_t R = xv.numel() / L;
    Tensor out(xv.shape);
    for (int64_t r = 0; r < R; ++r) {
        const double* src = xv.ptr() + r * L;
        double* dst = out.ptr() + r * L;
        double mx = src[0];
        for (int i = 1; i < L; ++i) mx = std::max(mx, src[i]);
        double sum = 0.0;
        for (int i = 0; i < L; ++i) {
            dst[i] = std::exp(src[i] - mx);
            sum += dst[i];
        }
        const double inv = 1.0 / sum;
        for (int i = 0; i < L; ++i) dst[i] *= inv;
    }
    return make(std::move(out), {x}, [x, R, L](Node& self) {
        if (!x->requires_grad) return;
        Tensor& g = x->ensure_grad();
        for (int64_t r = 0; r < R; ++r) {
            const double* y = self.value.ptr() + r * L;
            const double* dy = self.grad.ptr() + r * L;
            double inner = dot(y, dy, L);
            double* dst = g.ptr() + r * L;
            for (int i = 0; i < L; ++i) dst[i] += (dy[i] - inner) * y[i];
        }
    });
}

Var add_pos_rows(const Var& x, const Var& table) {
    const Tensor& xv = x->value;
    const Tensor& tv = table->value;
    check_rank(xv, 3, "add_pos_rows input");
    check_rank(tv, 2, "add_pos_rows table");
    const int G = xv.dim(0), T = xv.dim(1), C = xv.dim(2);
    if (tv.dim(1) != C) throw ShapeError("add_pos_rows: channel mismatch");
    if (tv.dim(0) < T)
        throw ShapeError("add_pos_rows: table has " + std::to_string(tv.dim(0)) + " rows, need " +
                         std::to_string(T));
    Tensor out = xv;
    for (int g = 0; g < G; ++g)
        for (int t = 0; t < T; ++t)
            axpy(1.0, tv.ptr() + static_cast<int64_t>(t) * C,
                 out.ptr() + (static_cast<int64_t>(g) * T + t) * C, C);
    return make(std::move(out), {x, table}, [x, table, G, T, C](Node& self) {
        if (x->requires_grad) acc(x->ensure_grad(), self.grad);
        if (table->requires_grad) {
            double* dt = table->ensure_grad().ptr();
            for (int g = 0; g < G; ++g)
                for (int t = 0; t < T; ++t)
                    axpy(1.0, self.grad.ptr() + (static_cast<int64_t>(g) * T + t) * C,
                         dt + static_cast<int64_t>(t) * C, C);
        }
    });
}

Var l2normalize_rows(const Var& x) {
    const Tensor& xv = x->value;
    check_rank(xv, 2, "l2normalize_rows");
    const int N = xv.dim(0), D = xv.dim(1);
    Tensor out(xv.shape);
    std::vector<double> norms(N);
    for (int n = 0; n < N; ++n) {
        const double* src = xv.ptr() + static_cast<int64_t>(n) * D;
        double s = dot(src, src, D);
        norms[n] = std::max(std::sqrt(s), 1e-12);
        double inv = 1.0 / norms[n];
        double* dst = out.ptr() + static_cast<int64_t>(n) * D;
        for (int d = 0; d < D; ++d) dst[d] = src[d] * inv;
    }
    return make(std::move(out), {x}, [x, N, D, norms](Node& self) {
        if (!x->requires_grad) return;
        Tensor& g = x->ensure_grad();
        for (int n = 0; n < N; ++n) {
            const double* y = self.value.ptr() + static_cast<int64_t>(n) * D;
            const double* dy = self.grad.ptr() + static_cast<int64_t>(n) * D;
            double* dst = g.ptr() + static_cast<int64_t>(n) * D;
            const double proj = dot(y, dy, D);
            const double inv = 1.0 / norms[n];
            for (int d = 0; d < D; ++d) dst[d] += (dy[d] - y[d] * proj) * inv;
        }
    });
}

// ----- conv / norm / resampling -----

Var conv2d(const Var& x, const Var& W, const Var& b) {
    const Tensor& xv = x->value;
    const Tensor& wv = W->value;
    check_rank(xv, 4, "conv2d input");
    check_rank(wv, 4, "conv2d weight");
    const int N = xv.dim(0), Ci = xv.dim(1), H = xv.dim(2), Wd = xv.dim(3);
    const int Co = wv.dim(0), k = wv.dim(2);
    if (wv.dim(1) != Ci) throw ShapeError("conv2d: input channels " + std::to_string(Ci) +
                                          " but weight expects " + std::to_string(wv.dim(1)));
    if (wv.dim(3) != k || k % 2 == 0) throw ShapeError("conv2d: kernel must be square and odd");
    if (b->value.numel() != Co) throw ShapeError("conv2d: bias size mismatch");
    const int64_t S = static_cast<int64_t>(H) * Wd;
    const int64_t K = static_cast<int64_t>(Ci) * k * k;
    Tensor out({N, Co, H, Wd});
    std::vector<double> col(static_cast<size_t>(K * S));
    for (int n = 0; n < N; ++n) {
        im2col(xv.ptr() + static_cast<int64_t>(n) * Ci * S, Ci, H, Wd, k, col.data());
        double* y = out.ptr() + static_cast<int64_t>(n) * Co * S;
        for (int co = 0; co < Co; ++co)
            std::fill(y + co * S, y + (co + 1) * S, b->value[co]);
        mm_acc(wv.ptr(), col.data(), y, Co, static_cast<int>(K), static_cast<int>(S));
    }
    return make(std::move(out), {x, W, b}, [x, W, b, N, Ci, H, Wd, Co, k, S, K](Node& self) {
        std::vector<double> col(static_cast<size_t>(K * S));
        std::vector<double> dcol(static_cast<size_t>(K * S));
        double* dx = x->requires_grad ? x->ensure_grad().ptr() : nullptr;
        double* dw = W->requires_grad ? W->ensure_grad().ptr() : nullptr;
        double* db = b->requires_grad ? b->ensure_grad().ptr() : nullptr;
        for (int n = 0; n < N; ++n) {
            const double* dy = self.grad.ptr() + static_cast<int64_t>(n) * Co * S;
            if (dw) {
                im2col(x->value.ptr() + static_cast<int64_t>(n) * Ci * S, Ci, H, Wd, k, col.data());
                for (int co = 0; co < Co; ++co)
                    for (int64_t r = 0; r < K; ++r)
                        dw[co * K + r] += dot(dy + co * S, col.data() + r * S, static_cast<int>(S));
            }
            if (dx) {
                std::fill(dcol.begin(), dcol.end(), 0.0);
                for (int co = 0; co < Co; ++co)
                    for (int64_t r = 0; r < K; ++r)
                        axpy(W->value[co * K + r], dy + co * S, dcol.data() + r * S, static_cast<int>(S));
                col2im_acc(dcol.data(), Ci, H, Wd, k, dx + static_cast<int64_t>(n) * Ci * S);
            }
            if (db)
                for (int co = 0; co < Co; ++co)
                    for (int64_t s = 0; s < S; ++s) db[co] += dy[co * S + s];
        }
    });
}

Var conv1d(const Var& x, const Var& W, const Var& b) {
    const Tensor& xv = x->value;
    const Tensor& wv = W->value;
    check_rank(xv, 3, "conv1d input");
    check_rank(wv, 3, "conv1d weight");
    const int N = xv.dim(0), Ci = xv.dim(1), F = xv.dim(2);
    const int Co = wv.dim(0), kt = wv.dim(2);
    if (wv.dim(1) != Ci) throw ShapeError("conv1d: channel mismatch");
    if (kt % 2 == 0) throw ShapeError("conv1d: kernel must be odd");
    if (b->value.numel() != Co) throw ShapeError("conv1d: bias size mismatch");
    const int p = kt / 2;
    Tensor out({N, Co, F});
    for (int n = 0; n < N; ++n)
        for (int co = 0; co < Co; ++co) {
            double* y = out.ptr() + (static_cast<int64_t>(n) * Co + co) * F;
            std::fill(y, y + F, b->value[co]);
            for (int ci = 0; ci < Ci; ++ci) {
                const double* src = xv.ptr() + (static_cast<int64_t>(n) * Ci + ci) * F;
                for (int tau = 0; tau < kt; ++tau) {
                    const double w = wv[(static_cast<int64_t>(co) * Ci + ci) * kt + tau];
                    const int shift = tau - p;
                    const int f0 = std::max(0, -shift), f1 = std::min(F, F - shift);
                    for (int f = f0; f < f1; ++f) y[f] += w * src[f + shift];
                }
            }
        }
    return make(std::move(out), {x, W, b}, [x, W, b, N, Ci, F, Co, kt, p](Node& self) {
        double* dx = x->requires_grad ? x->ensure_grad().ptr() : nullptr;
        double* dw = W->requires_grad ? W->ensure_grad().ptr() : nullptr;
        double* db = b->requires_grad ? b->ensure_grad().ptr() : nullptr;
        for (int n = 0; n < N; ++n)
            for (int co = 0; co < Co; ++co) {
                const double* dy = self.grad.ptr() + (static_cast<int64_t>(n) * Co + co) * F;
                if (db)
                    for (int f = 0; f < F; ++f) db[co] += dy[f];
                for (int ci = 0; ci < Ci; ++ci) {
                    const double* src = x->value.ptr() + (static_cast<int64_t>(n) * Ci + ci) * F;
                    double* dsrc = dx ? dx + (static_cast<int64_t>(n) * Ci + ci) * F : nullptr;
                    for (int tau = 0; tau < kt; ++tau) {
                        const int64_t widx = (static_cast<int64_t>(co) * Ci + ci) * kt + tau;
                        const int shift = tau - p;
                        const int f0 = std::max(0, -shift), f1 = std::min(F, F - shift);
                        if (dw) {
                            double s = 0.0;
                            for (int f = f0; f < f1; ++f) s += dy[f] * src[f + shift];
                            dw[widx] += s;
                        }
                        if (dsrc) {
                            const double w = W->value[widx];
                            for (int f = f0; f < f1; ++f) dsrc[f + shift] += w * dy[f];
                        }
                    }
                }
            }
    });
}

Var group_norm(const Var& x, const Var& gamma, const Var& beta, int groups, double eps) {
    const Tensor& xv = x->value;
    if (xv.rank() < 2) throw ShapeError("group_norm: rank must be >= 2");
    const int N = xv.dim(0), C = xv.dim(1);
    if (groups < 1 || C % groups != 0)
        throw ConfigError("group_norm: groups " + std::to_string(groups) + " must divide channels " +
                          std::to_string(C));
    if (gamma->value.numel() != C || beta->value.numel() != C)
        throw ShapeError("group_norm: gamma/beta size mismatch");
    const int64_t S = tail_product(xv.shape, 2);
    const int cpg = C / groups;
    const int64_t gsize = cpg * S;
    Tensor out(xv.shape);
    auto stats = std::make_shared<std::vector<double>>(static_cast<size_t>(N) * groups * 2);
    for (int n = 0; n < N; ++n)
        for (int g = 0; g < groups; ++g) {
            const double* src = xv.ptr() + (static_cast<int64_t>(n) * C + static_cast<int64_t>(g) * cpg) * S;
            double mean = 0.0;
            for (int64_t i = 0; i < gsize; ++i) mean += src[i];
            mean /= static_cast<double>(gsize);
            double var = 0.0;
            for (int64_t i = 0; i < gsize; ++i) {
                const double d = src[i] - mean;
                var += d * d;
            }
            var /= static_cast<double>(gsize);
            const double inv = 1.0 / std::sqrt(var + eps);
            (*stats)[(static_cast<size_t>(n) * groups + g) * 2] = mean;
            (*stats)[(static_cast<size_t>(n) * groups + g) * 2 + 1] = inv;
            double* dst = out.ptr() + (static_cast<int64_t>(n) * C + static_cast<int64_t>(g) * cpg) * S;
            for (int c = 0; c < cpg; ++c) {
                const double gm = gamma->value[static_cast<int64_t>(g) * cpg + c];
                const double bt = beta->value[static_cast<int64_t>(g) * cpg + c];
                for (int64_t s = 0; s < S; ++s)
                    dst[c * S + s] = (src[c * S + s] - mean) * inv * gm + bt;
            }
        }
    return make(std::move(out), {x, gamma, beta},
                [x, gamma, beta, N, C, S, groups, cpg, gsize, stats](Node& self) {
        double* dgm = gamma->requires_grad ? gamma->ensure_grad().ptr() : nullptr;
        double* dbt = beta->requires_grad ? beta->ensure_grad().ptr() : nullptr;
        double* dx = x->requires_grad ? x->ensure_grad().ptr() : nullptr;
        std::vector<double> xhat(static_cast<size_t>(gsize));
        std::vector<double> dxhat(static_cast<size_t>(gsize));
        for (int n = 0; n < N; ++n)
            for (int g = 0; g < groups; ++g) {
                const int64_t base = (static_cast<int64_t>(n) * C + static_cast<int64_t>(g) * cpg) * S;
                const double mean = (*stats)[(static_cast<size_t>(n) * groups + g) * 2];
                const double inv = (*stats)[(static_cast<size_t>(n) * groups + g) * 2 + 1];
                const double* src = x->value.ptr() + base;
                const double* dy = self.grad.ptr() + base;
                for (int c = 0; c < cpg; ++c) {
                    const double gm = gamma->value[static_cast<int64_t>(g) * cpg + c];
                    for (int64_t s = 0; s < S; ++s) {
                        const int64_t i = c * S + s;
                        xhat[i] = (src[i] - mean) * inv;
                        dxhat[i] = dy[i] * gm;
                    }
                }
                if (dgm || dbt)
                    for (int c = 0; c < cpg; ++c) {
                        double sg = 0.0, sb = 0.0;
                        for (int64_t s = 0; s < S; ++s) {
                            sg += dy[c * S + s] * xhat[c * S + s];
                            sb += dy[c * S + s];
                        }
                        if (dgm) dgm[static_cast<int64_t>(g) * cpg + c] += sg;
                        if (dbt) dbt[static_cast<int64_t>(g) * cpg + c] += sb;
                    }
                if (dx) {
                    double m1 = 0.0, m2 = 0.0;
                    for (int64_t i = 0; i < gsize; ++i) {
                        m1 += dxhat[i];
                        m2 += dxhat[i] * xhat[i];
                    }
                    m1 /= static_cast<double>(gsize);
                    m2 /= static_cast<double>(gsize);
                    double* dst = dx + base;
                    for (int64_t i = 0; i < gsize; ++i)
                        dst[i] += inv * (dxhat[i] - m1 - xhat[i] * m2);
                }
            }
    });
}

Var add_sample_channel(const Var& x, const Var& e) {
    const Tensor& xv = x->value;
    const Tensor& ev = e->value;
    if (xv.rank() < 2) throw ShapeError("add_sample_channel: rank must be >= 2");
    check_rank(ev, 2, "add_sample_channel embedding");
    const int N = xv.dim(0), C = xv.dim(1);
    if (ev.dim(0) != N || ev.dim(1) != C)
        throw ShapeError("add_sample_channel: embedding " + shape_str(ev.shape) + " does not match " +
                         shape_str(xv.shape));
    const int64_t S = tail_product(xv.shape, 2);
    Tensor out = xv;
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const double v = ev[static_cast<int64_t>(n) * C + c];
            double* dst = out.ptr() + (static_cast<int64_t>(n) * C + c) * S;
            for (int64_t s = 0; s < S; ++s) dst[s] += v;
        }
    return make(std::move(out), {x, e}, [x, e, N, C, S](Node& self) {
        if (x->requires_grad) acc(x->ensure_grad(), self.grad);
        if (e->requires_grad) {
            double* de = e->ensure_grad().ptr();
            for (int n = 0; n < N; ++n)
                for (int c = 0; c < C; ++c) {
                    const double* g = self.grad.ptr() + (static_cast<int64_t>(n) * C + c) * S;
                    double s = 0.0;
                    for (int64_t i = 0; i < S; ++i) s += g[i];
                    de[static_cast<int64_t>(n) * C + c] += s;
                }
        }
    });
}

Var upsample2x_nearest(const Var& x) {
    const Tensor& xv = x->value;
    check_rank(xv, 4, "upsample2x_nearest");
    const int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    Tensor out({N, C, 2 * H, 2 * W});
    for (int64_t nc = 0; nc < static_cast<int64_t>(N) * C; ++nc) {
        const double* src = xv.ptr() + nc * H * W;
        double* dst = out.ptr() + nc * 4 * H * W;
        for (int y = 0; y < H; ++y)
            for (int xq = 0; xq < W; ++xq) {
                const double v = src[y * W + xq];
                double* d = dst + (2 * y) * 2 * W + 2 * xq;
                d[0] = v;
                d[1] = v;
                d[2 * W] = v;
                d[2 * W + 1] = v;
            }
    }
    return make(std::move(out), {x}, [x, N, C, H, W](Node& self) {
        if (!x->requires_grad) return;
        double* dx = x->ensure_grad().ptr();
        for (int64_t nc = 0; nc < static_cast<int64_t>(N) * C; ++nc) {
            const double* g = self.grad.ptr() + nc * 4 * H * W;
            double* d = dx + nc * H * W;
            for (int y = 0; y < H; ++y)
                for (int xq = 0; xq < W; ++xq) {
                    const double* gp = g + (2 * y) * 2 * W + 2 * xq;
                    d[y * W + xq] += gp[0] + gp[1] + gp[2 * W] + gp[2 * W + 1];
                }
        }
    });
}

Var avgpool2x(const Var& x) {
    const Tensor& xv = x->value;
    check_rank(xv, 4, "avgpool2x");
    const int N = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
    if (H % 2 != 0 || W % 2 != 0) throw ShapeError("avgpool2x: H and W must be even");
    const int Ho = H / 2, Wo = W / 2;
    Tensor out({N, C, Ho, Wo});
    for (int64_t nc = 0; nc < static_cast<int64_t>(N) * C; ++nc) {
        const double* src = xv.ptr() + nc * H * W;
        double* dst = out.ptr() + nc * Ho * Wo;
        for (int y = 0; y < Ho; ++y)
            for (int xq = 0; xq < Wo; ++xq) {
                const double* s = src + (2 * y) * W + 2 * xq;
                dst[y * Wo + xq] = 0.25 * (s[0] + s[1] + s[W] + s[W + 1]);
            }
    }
    return make(std::move(out), {x}, [x, N, C, H, W, Ho, Wo](Node& self) {
        if (!x->requires_grad) return;
        double* dx = x->ensure_grad().ptr();
        for (int64_t nc = 0; nc < static_cast<int64_t>(N) * C; ++nc) {
            const double* g = self.grad.ptr() + nc * Ho * Wo;
            double* d = dx + nc * H * W;
            for (int y = 0; y < Ho; ++y)
                for (int xq = 0; xq < Wo; ++xq) {
                    const double gv = 0.25 * g[y * Wo + xq];
                    double* dp = d + (2 * y) * W + 2 * xq;
                    dp[0] += gv;
                    dp[1] += gv;
                    dp[W] += gv;
                    dp[W + 1] += gv;
                }
        }
    });
}

Var mse(const Var& pred, const Tensor& target) {
    if (!pred->value.same_shape(target))
        throw ShapeError("mse: prediction " + shape_str(pred->value.shape) + " vs target " +
                         shape_str(target.shape));
    const int64_t n = pred->value.numel();
    double acc_loss = 0.0;
    for (int64_t i = 0; i < n; ++i) {
        const double d = pred->value[i] - target[i];
        acc_loss += d * d;
    }
    Tensor out({1});
    out[0] = acc_loss / static_cast<double>(n);
    auto tgt = std::make_shared<Tensor>(target);
    return make(std::move(out), {pred}, [pred, tgt, n](Node& self) {
        if (!pred->requires_grad) return;
        const double g = self.grad[0] * 2.0 / static_cast<double>(n);
        Tensor& dst = pred->ensure_grad();
        for (int64_t i = 0; i < n; ++i) dst[i] += g * (pred->value[i] - (*tgt)[i]);
    });
}

}  // namespace p3d::ad
