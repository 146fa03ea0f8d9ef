#include "recticast/autograd.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

namespace recticast::ag {

namespace {

thread_local bool g_grad_enabled = true;

template <typename T>
using NodePtr = std::shared_ptr<Node<T>>;

/// Builds a result node. Records parents and the backward rule only when
/// recording is enabled and some input needs a gradient.
template <typename T>
Var<T> make_result(BasicTensor<T> value, std::initializer_list<Var<T>> inputs,
                   std::function<void(Node<T>&)> backward) {
    auto node = std::make_shared<Node<T>>();
    node->value = std::move(value);
    bool needs = false;
    if (g_grad_enabled) {
        for (const auto& in : inputs) {
            needs = needs || in.requires_grad();
        }
    }
    if (needs) {
        node->requires_grad = true;
        for (const auto& in : inputs) {
            node->parents.push_back(in.node());
        }
        node->backward = std::move(backward);
    }
    return Var<T>(std::move(node));
}

template <typename T>
Node<T>* wants(Node<T>& self, std::size_t i) {
    Node<T>* p = self.parents[i].get();
    return (p && p->requires_grad) ? p : nullptr;
}

void check4(const Shape& s, const char* what) {
    if (s.size() != 4) {
        throw DimensionError(std::string(what) + ": expected [N,C,H,W], got " + shape_to_string(s));
    }
}

/// Column matrix rows are (c, ky, kx) with `ld` elements between rows, so a
/// batch of images can share one matrix.
template <typename T>
void im2col(const T* img, std::size_t channels, std::size_t h, std::size_t w, std::size_t k, std::size_t stride,
            std::size_t pad, std::size_t ho, std::size_t wo, T* col, std::size_t ld) {
    const std::ptrdiff_t H = static_cast<std::ptrdiff_t>(h);
    const std::ptrdiff_t W = static_cast<std::ptrdiff_t>(w);
    for (std::size_t c = 0; c < channels; ++c) {
        for (std::size_t ky = 0; ky < k; ++ky) {
            for (std::size_t kx = 0; kx < k; ++kx) {
                T* row = col + ((c * k + ky) * k + kx) * ld;
                // valid output columns: 0 <= ox*stride + kx - pad < W
                const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(kx) - static_cast<std::ptrdiff_t>(pad);
                const std::ptrdiff_t s = static_cast<std::ptrdiff_t>(stride);
                std::ptrdiff_t lo = off < 0 ? (-off + s - 1) / s : 0;
                std::ptrdiff_t hi = W - off <= 0 ? 0 : (W - off + s - 1) / s;
                lo = std::min<std::ptrdiff_t>(lo, static_cast<std::ptrdiff_t>(wo));
                hi = std::clamp<std::ptrdiff_t>(hi, lo, static_cast<std::ptrdiff_t>(wo));
                for (std::size_t oy = 0; oy < ho; ++oy) {
                    const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
                    T* dst = row + oy * wo;
                    if (iy < 0 || iy >= H) {
                        std::fill(dst, dst + wo, T{0});
                        continue;
                    }
                    const T* src = img + (c * h + static_cast<std::size_t>(iy)) * w;
                    std::fill(dst, dst + lo, T{0});
                    if (stride == 1) {
                        std::copy(src + lo + off, src + hi + off, dst + lo);
                    } else {
                        for (std::ptrdiff_t ox = lo; ox < hi; ++ox) dst[ox] = src[ox * s + off];
                    }
                    std::fill(dst + hi, dst + wo, T{0});
                }
            }
        }
    }
}

template <typename T>
void col2im_add(const T* col, std::size_t channels, std::size_t h, std::size_t w, std::size_t k, std::size_t stride,
                std::size_t pad, std::size_t ho, std::size_t wo, T* img, std::size_t ld) {
    const std::ptrdiff_t H = static_cast<std::ptrdiff_t>(h);
    const std::ptrdiff_t W = static_cast<std::ptrdiff_t>(w);
    for (std::size_t c = 0; c < channels; ++c) {
        for (std::size_t ky = 0; ky < k; ++ky) {
            for (std::size_t kx = 0; kx < k; ++kx) {
                const T* row = col + ((c * k + ky) * k + kx) * ld;
                const std::ptrdiff_t off = static_cast<std::ptrdiff_t>(kx) - static_cast<std::ptrdiff_t>(pad);
                const std::ptrdiff_t s = static_cast<std::ptrdiff_t>(stride);
                std::ptrdiff_t lo = off < 0 ? (-off + s - 1) / s : 0;
                std::ptrdiff_t hi = W - off <= 0 ? 0 : (W - off + s - 1) / s;
                lo = std::min<std::ptrdiff_t>(lo, static_cast<std::ptrdiff_t>(wo));
                hi = std::clamp<std::ptrdiff_t>(hi, lo, static_cast<std::ptrdiff_t>(wo));
                for (std::size_t oy = 0; oy < ho; ++oy) {
                    const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) - static_cast<std::ptrdiff_t>(pad);
                    if (iy < 0 || iy >= H) continue;
                    T* dst = img + (c * h + static_cast<std::size_t>(iy)) * w;
                    const T* src = row + oy * wo;
                    for (std::ptrdiff_t ox = lo; ox < hi; ++ox) dst[ox * s + off] += src[ox];
                }
            }
        }
    }
}

}  // namespace

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }
bool grad_enabled() { return g_grad_enabled; }

template <typename T>
void Var<T>::backward() {
    if (!node_) {
        throw std::logic_error("backward on undefined Var");
    }
    if (node_->value.numel() != 1) {
        throw DimensionError("backward requires a scalar root, got " + shape_to_string(node_->value.shape()));
    }
    if (!std::isfinite(static_cast<double>(node_->value[0]))) {
        throw NumericError("backward: non-finite loss value " + std::to_string(static_cast<double>(node_->value[0])));
    }
    if (!node_->requires_grad) {
        return;
    }
    // Iterative post-order DFS for a topological ordering.
    std::vector<Node<T>*> order;
    std::unordered_set<Node<T>*> seen;
    std::vector<std::pair<Node<T>*, std::size_t>> stack{{node_.get(), 0}};
    seen.insert(node_.get());
    while (!stack.empty()) {
        auto& [n, next] = stack.back();
        if (next < n->parents.size()) {
            Node<T>* p = n->parents[next++].get();
            if (p && p->requires_grad && !seen.count(p)) {
                seen.insert(p);
                stack.emplace_back(p, 0);
            }
        } else {
            order.push_back(n);
            stack.pop_back();
        }
    }
    node_->ensure_grad()[0] += T{1};
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        Node<T>* n = *it;
        if (n->backward && n->has_grad()) {
            n->backward(*n);
        }
    }
    // Release interior gradients; leaves (parameters) keep theirs.
    for (Node<T>* n : order) {
        if (!n->parents.empty()) {
            n->grad = BasicTensor<T>();
        }
    }
}

template <typename T>
Var<T> add(const Var<T>& a, const Var<T>& b) {
    require_same_shape(a.value(), b.value(), "add");
    BasicTensor<T> out = a.value();
    const T* pb = b.value().data();
    T* po = out.data();
    for (std::size_t i = 0; i < out.numel(); ++i) po[i] += pb[i];
    return make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
        for (std::size_t k = 0; k < 2; ++k) {
            if (Node<T>* p = wants(self, k)) {
                auto& g = p->ensure_grad();
                for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
            }
        }
    });
}

template <typename T>
Var<T> sub(const Var<T>& a, const Var<T>& b) {
    require_same_shape(a.value(), b.value(), "sub");
    BasicTensor<T> out = a.value();
    const T* pb = b.value().data();
    T* po = out.data();
    for (std::size_t i = 0; i < out.numel(); ++i) po[i] -= pb[i];
    return make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
        if (Node<T>* p = wants(self, 0)) {
            auto& g = p->ensure_grad();
            for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
        }
        if (Node<T>* p = wants(self, 1)) {
            auto& g = p->ensure_grad();
            for (std::size_t i = 0; i < g.numel(); ++i) g[i] -= self.grad[i];
        }
    });
}

template <typename T>
Var<T> mul(const Var<T>& a, const Var<T>& b) {
    require_same_shape(a.value(), b.value(), "mul");
    BasicTensor<T> out = a.value();
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= b.value()[i];
    return make_result<T>(std::move(out), {a, b}, [](Node<T>& self) {
        const auto& va = self.parents[0]->value;
        const auto& vb = self.parents[1]->value;
        if (Node<T>* p = wants(self, 0)) {
            auto& g = p->ensure_grad();
            for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * vb[i];
        }
        if (Node<T>* p = wants(self, 1)) {
            auto& g = p->ensure_grad();
            for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i] * va[i];
        }
    });
}

template <typename T>
Var<T> scale(const Var<T>& a, T s) {
    BasicTensor<T> out = a.value();
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] *= s;
    return make_result<T>(std::move(out), {a}, [s](Node<T>& self) {
        if (Node<T>* p = wants(self, 0)) {
            auto& g = p->ensure_grad();
            for (std::size_t i = 0; i < g.numel(); ++i) g[i] += s * self.grad[i];
        }
    });
}

template <typename T>
Var<T> silu(const Var<T>& a) {
    BasicTensor<T> out(a.shape());
    const auto& x = a.value();
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = x[i] / (T{1} + std::exp(-x[i]));
    return make_result<T>(std::move(out), {a}, [](Node<T>& self) {
        if (Node<T>* p = wants(self, 0)) {
            const auto& x = p->value;
            auto& g = p->ensure_grad();
            for (std::size_t i = 0; i < g.numel(); ++i) {
                const T s = T{1} / (T{1} + std::exp(-x[i]));
                g[i] += self.grad[i] * s * (T{1} + x[i] * (T{1} - s));
            }
        }
    });
}

template <typename T>
Var<T> sigmoid(const Var<T>& a) {
    BasicTensor<T> out(a.shape());
    const auto& x = a.value();
    for (std::size_t i = 0; i < out.numel(); ++i) out[i] = T{1} / (T{1} + std::exp(-x[i]));
    return make_result<T>(std::move(out), {a}, [](Node<T>& self) {
        if (Node<T>* p = wants(self, 0)) {
            auto& g = p->ensure_grad();
            for (std::size_t i = 0; i < g.numel(); ++i) {
                const T s = self.value[i];
                g[i] += self.grad[i] * s * (T{1} - s);
            }
        }
    });
}

template <typename T>
Var<T> reshape(const Var<T>& a, Shape shape) {
    BasicTensor<T> out = a.value().reshaped(std::move(shape));
    return make_result<T>(std::move(out), {a}, [](Node<T>& self) {
        if (Node<T>* p = wants(self, 0)) {
            auto& g = p->ensure_grad();
            for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
        }
    });
}

template <typename T>
Var<T> slice0(const Var<T>& a, std::size_t begin, std::size_t end) {
    BasicTensor<T> out = a.value().slice0(begin, end);
    const std::size_t inner = a.shape()[0] == 0 ? 0 : a.value().numel() / a.shape()[0];
    return make_result<T>(std::move(out), {a}, [begin, inner](Node<T>& self) {
        if (Node<T>* p = wants(self, 0)) {
            auto& g = p->ensure_grad();
            T* dst = g.data() + begin * inner;
            for (std::size_t i = 0; i < self.grad.numel(); ++i) dst[i] += self.grad[i];
        }
    });
}

template <typename T>
Var<T> concat0(const std::vector<Var<T>>& parts) {
    std::vector<BasicTensor<T>> values;
    values.reserve(parts.size());
    for (const auto& p : parts) values.push_back(p.value());
    BasicTensor<T> out = recticast::concat0<T>(std::span<const BasicTensor<T>>(values));
    auto node = std::make_shared<Node<T>>();
    node->value = std::move(out);
    bool needs = false;
    if (g_grad_enabled) {
        for (const auto& p : parts) needs = needs || p.requires_grad();
    }
    if (needs) {
        node->requires_grad = true;
        for (const auto& p : parts) node->parents.push_back(p.node());
        node->backward = [](Node<T>& self) {
            std::size_t off = 0;
            for (auto& parent : self.parents) {
                const std::size_t n = parent->value.numel();
                if (parent->requires_grad) {
                    auto& g = parent->ensure_grad();
                    for (std::size_t i = 0; i < n; ++i) g[i] += self.grad[off + i];
                }
                off += n;
            }
        };
    }
    return Var<T>(std::move(node));
}

template <typename T>
Var<T> concat_channels(const Var<T>& a, const Var<T>& b) {
    check4(a.shape(), "concat_channels");
    check4(b.shape(), "concat_channels");
    const auto& sa = a.shape();
    const auto& sb = b.shape();
    if (sa[0] != sb[0] || sa[2] != sb[2] || sa[3] != sb[3]) {
        throw DimensionError("concat_channels: " + shape_to_string(sa) + " vs " + shape_to_string(sb));
    }
    const std::size_t n = sa[0], ca = sa[1], cb = sb[1], hw = sa[2] * sa[3];
    BasicTensor<T> out(Shape{n, ca + cb, sa[2], sa[3]});
    for (std::size_t i = 0; i < n; ++i) {
        std::copy_n(a.value().data() + i * ca * hw, ca * hw, out.data() + i * (ca + cb) * hw);
        std::copy_n(b.value().data() + i * cb * hw, cb * hw, out.data() + (i * (ca + cb) + ca) * hw);
    }
    return make_result<T>(std::move(out), {a, b}, [n, ca, cb, hw](Node<T>& self) {
        if (Node<T>* p = wants(self, 0)) {
            auto& g = p->ensure_grad();
            for (std::size_t i = 0; i < n; ++i) {
                const T* src = self.grad.data() + i * (ca + cb) * hw;
                T* dst = g.data() + i * ca * hw;
                for (std::size_t j = 0; j < ca * hw; ++j) dst[j] += src[j];
            }
        }
        if (Node<T>* p = wants(self, 1)) {
            auto& g = p->ensure_grad();
            for (std::size_t i = 0; i < n; ++i) {
                const T* src = self.grad.data() + (i * (ca + cb) + ca) * hw;
                T* dst = g.data() + i * cb * hw;
                for (std::size_t j = 0; j < cb * hw; ++j) dst[j] += src[j];
            }
        }
    });
}

template <typename T>
Var<T> conv2d(const Var<T>& x, const Var<T>& w, const Var<T>& b, std::size_t stride, std::size_t padding) {
    check4(x.shape(), "conv2d input");
    check4(w.shape(), "conv2d kernel");
    const std::size_t n = x.shape()[0], cin = x.shape()[1], h = x.shape()[2], wd = x.shape()[3];
    const std::size_t cout = w.shape()[0], k = w.shape()[2];
    if (w.shape()[1] != cin || w.shape()[3] != k) {
        throw DimensionError("conv2d: kernel " + shape_to_string(w.shape()) + " incompatible with input " +
                             shape_to_string(x.shape()));
    }
    if (b.defined() && (b.value().dim() != 1 || b.shape()[0] != cout)) {
        throw DimensionError("conv2d: bias " + shape_to_string(b.shape()) + " for " + std::to_string(cout) +
                             " output channels");
    }
    if (stride == 0 || h + 2 * padding < k || wd + 2 * padding < k) {
        throw DimensionError("conv2d: kernel larger than padded input");
    }
    const std::size_t ho = (h + 2 * padding - k) / stride + 1;
    const std::size_t wo = (wd + 2 * padding - k) / stride + 1;
    const std::size_t kk = cin * k * k, p = ho * wo;
    const bool direct = (k == 1 && stride == 1 && padding == 0);

    // One gemm over the whole batch: col is [kk, n*p], the product [cout, n*p].
    const std::size_t np = n * p;
    auto fill_col = [=](const BasicTensor<T>& xv, T* col) {
        for (std::size_t i = 0; i < n; ++i) {
            const T* img = xv.data() + i * cin * h * wd;
            if (direct) {
                for (std::size_t c = 0; c < cin; ++c) std::copy(img + c * p, img + (c + 1) * p, col + c * np + i * p);
            } else {
                im2col(img, cin, h, wd, k, stride, padding, ho, wo, col + i * p, np);
            }
        }
    };
    std::vector<T> col(kk * np), prod(cout * np);
    fill_col(x.value(), col.data());
    gemm(false, false, static_cast<int>(cout), static_cast<int>(np), static_cast<int>(kk), T{1}, w.value().data(),
         static_cast<int>(kk), col.data(), static_cast<int>(np), T{0}, prod.data(), static_cast<int>(np));
    BasicTensor<T> out(Shape{n, cout, ho, wo});
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t c = 0; c < cout; ++c) {
            const T* src = prod.data() + c * np + i * p;
            T* dst = out.data() + (i * cout + c) * p;
            const T bias_c = b.defined() ? b.value()[c] : T{0};
            for (std::size_t j = 0; j < p; ++j) dst[j] = src[j] + bias_c;
        }
    }

    Var<T> bias = b.defined() ? b : Var<T>(BasicTensor<T>(Shape{0}), false);
    return make_result<T>(std::move(out), {x, w, bias}, [=](Node<T>& self) {
        Node<T>* gx = wants(self, 0);
        Node<T>* gw = wants(self, 1);
        Node<T>* gb = wants(self, 2);
        const auto& wv = self.parents[1]->value;
        std::vector<T> go(cout * np);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t c = 0; c < cout; ++c) {
                const T* src = self.grad.data() + (i * cout + c) * p;
                std::copy(src, src + p, go.data() + c * np + i * p);
            }
        }
        if (gw) {
            std::vector<T> colbuf(kk * np);
            fill_col(self.parents[0]->value, colbuf.data());
            gemm(false, true, static_cast<int>(cout), static_cast<int>(kk), static_cast<int>(np), T{1}, go.data(),
                 static_cast<int>(np), colbuf.data(), static_cast<int>(np), T{1}, gw->ensure_grad().data(),
                 static_cast<int>(kk));
        }
        if (gb) {
            auto& g = gb->ensure_grad();
            for (std::size_t c = 0; c < cout; ++c) {
                T s{0};
                for (std::size_t j = 0; j < np; ++j) s += go[c * np + j];
                g[c] += s;
            }
        }
        if (gx) {
            std::vector<T> dcol(kk * np);
            gemm(true, false, static_cast<int>(kk), static_cast<int>(np), static_cast<int>(cout), T{1}, wv.data(),
                 static_cast<int>(kk), go.data(), static_cast<int>(np), T{0}, dcol.data(), static_cast<int>(np));
            auto& dx = gx->ensure_grad();
            for (std::size_t i = 0; i < n; ++i) {
                T* dimg = dx.data() + i * cin * h * wd;
                if (direct) {
                    for (std::size_t c = 0; c < cin; ++c) {
                        const T* src = dcol.data() + c * np + i * p;
                        for (std::size_t j = 0; j < p; ++j) dimg[c * p + j] += src[j];
                    }
                } else {
                    col2im_add(dcol.data() + i * p, cin, h, wd, k, stride, padding, ho, wo, dimg, np);
                }
            }
        }
    });
}

template <typename T>
Var<T> upsample2x(const Var<T>& x) {
    check4(x.shape(), "upsample2x");
    const std::size_t n = x.shape()[0], c = x.shape()[1], h = x.shape()[2], w = x.shape()[3];
    BasicTensor<T> out(Shape{n, c, 2 * h, 2 * w});
    for (std::size_t img = 0; img < n * c; ++img) {
        const T* src = x.value().data() + img * h * w;
        T* dst = out.data() + img * 4 * h * w;
        for (std::size_t y = 0; y < 2 * h; ++y) {
            for (std::size_t xx = 0; xx < 2 * w; ++xx) dst[y * 2 * w + xx] = src[(y / 2) * w + xx / 2];
        }
    }
    return make_result<T>(std::move(out), {x}, [n, c, h, w](Node<T>& self) {
        if (Node<T>* p = wants(self, 0)) {
            auto& g = p->ensure_grad();
            for (std::size_t img = 0; img < n * c; ++img) {
                const T* src = self.grad.data() + img * 4 * h * w;
                T* dst = g.data() + img * h * w;
                for (std::size_t y = 0; y < 2 * h; ++y) {
                    for (std::size_t xx = 0; xx < 2 * w; ++xx) dst[(y / 2) * w + xx / 2] += src[y * 2 * w + xx];
                }
            }
        }
    });
}

template <typename T>
Var<T> group_norm(const Var<T>& x, const Var<T>& gamma, const Var<T>& beta, std::size_t groups, T eps) {
    check4(x.shape(), "group_norm");
    const std::size_t n = x.shape()[0], c = x.shape()[1], hw = x.shape()[2] * x.shape()[3];
    if (groups == 0 || c % groups != 0) {
        throw DimensionError("group_norm: " + std::to_string(groups) + " groups do not divide " +
                             std::to_string(c) + " channels");
    }
    if (gamma.value().numel() != c || beta.value().numel() != c) {
        throw DimensionError("group_norm: affine parameters must have " + std::to_string(c) + " entries");
    }
    const std::size_t cg = c / groups, count = cg * hw;
    auto rstd = std::make_shared<std::vector<T>>(n * groups);
    auto mean = std::make_shared<std::vector<T>>(n * groups);
    BasicTensor<T> out(x.shape());
    const T* xv = x.value().data();
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t g = 0; g < groups; ++g) {
            const T* base = xv + (i * c + g * cg) * hw;
            double s = 0;
            for (std::size_t j = 0; j < count; ++j) s += base[j];
            const double mu = s / static_cast<double>(count);
            double v = 0;
            for (std::size_t j = 0; j < count; ++j) v += (base[j] - mu) * (base[j] - mu);
            v /= static_cast<double>(count);
            const T r = static_cast<T>(1.0 / std::sqrt(v + static_cast<double>(eps)));
            (*mean)[i * groups + g] = static_cast<T>(mu);
            (*rstd)[i * groups + g] = r;
            for (std::size_t cc = 0; cc < cg; ++cc) {
                const std::size_t ch = g * cg + cc;
                const T ga = gamma.value()[ch], be = beta.value()[ch];
                const T* src = base + cc * hw;
                T* dst = out.data() + (i * c + ch) * hw;
                for (std::size_t j = 0; j < hw; ++j) dst[j] = (src[j] - static_cast<T>(mu)) * r * ga + be;
            }
        }
    }
    return make_result<T>(std::move(out), {x, gamma, beta}, [=](Node<T>& self) {
        Node<T>* gx = wants(self, 0);
        Node<T>* gg = wants(self, 1);
        Node<T>* gbeta = wants(self, 2);
        const T* xv = self.parents[0]->value.data();
        const auto& ga = self.parents[1]->value;
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t g = 0; g < groups; ++g) {
                const T mu = (*mean)[i * groups + g], r = (*rstd)[i * groups + g];
                T sum_dxhat{0}, sum_dxhat_xhat{0};
                for (std::size_t cc = 0; cc < cg; ++cc) {
                    const std::size_t ch = g * cg + cc;
                    const T* src = xv + (i * c + ch) * hw;
                    const T* go = self.grad.data() + (i * c + ch) * hw;
                    T dg{0}, db{0};
                    for (std::size_t j = 0; j < hw; ++j) {
                        const T xhat = (src[j] - mu) * r;
                        dg += go[j] * xhat;
                        db += go[j];
                        const T dxhat = go[j] * ga[ch];
                        sum_dxhat += dxhat;
                        sum_dxhat_xhat += dxhat * xhat;
                    }
                    if (gg) gg->ensure_grad()[ch] += dg;
                    if (gbeta) gbeta->ensure_grad()[ch] += db;
                }
                if (gx) {
                    auto& gxv = gx->ensure_grad();
                    const T inv = T{1} / static_cast<T>(count);
                    for (std::size_t cc = 0; cc < cg; ++cc) {
                        const std::size_t ch = g * cg + cc;
                        const T* src = xv + (i * c + ch) * hw;
                        const T* go = self.grad.data() + (i * c + ch) * hw;
                        T* dst = gxv.data() + (i * c + ch) * hw;
                        for (std::size_t j = 0; j < hw; ++j) {
                            const T xhat = (src[j] - mu) * r;
                            const T dxhat = go[j] * ga[ch];
                            dst[j] += r * (dxhat - inv * sum_dxhat - xhat * inv * sum_dxhat_xhat);
                        }
                    }
                }
            }
        }
    });
}

template <typename T>
Var<T> linear(const Var<T>& x, const Var<T>& w, const Var<T>& b) {
    if (x.value().dim() != 2 || w.value().dim() != 2 || x.shape()[1] != w.shape()[1]) {
        throw DimensionError("linear: input " + shape_to_string(x.shape()) + " vs weight " +
                             shape_to_string(w.shape()));
    }
    const std::size_t n = x.shape()[0], in = x.shape()[1], outf = w.shape()[0];
    if (b.defined() && b.value().numel() != outf) {
        throw DimensionError("linear: bias size mismatch");
    }
    BasicTensor<T> out(Shape{n, outf});
    if (b.defined()) {
        for (std::size_t i = 0; i < n; ++i) std::copy_n(b.value().data(), outf, out.data() + i * outf);
    }
    gemm(false, true, static_cast<int>(n), static_cast<int>(outf), static_cast<int>(in), T{1}, x.value().data(),
         static_cast<int>(in), w.value().data(), static_cast<int>(in), b.defined() ? T{1} : T{0}, out.data(),
         static_cast<int>(outf));
    Var<T> bias = b.defined() ? b : Var<T>(BasicTensor<T>(Shape{0}), false);
    return make_result<T>(std::move(out), {x, w, bias}, [n, in, outf](Node<T>& self) {
        if (Node<T>* p = wants(self, 0)) {
            gemm(false, false, static_cast<int>(n), static_cast<int>(in), static_cast<int>(outf), T{1},
                 self.grad.data(), static_cast<int>(outf), self.parents[1]->value.data(), static_cast<int>(in), T{1},
                 p->ensure_grad().data(), static_cast<int>(in));
        }
        if (Node<T>* p = wants(self, 1)) {
            gemm(true, false, static_cast<int>(outf), static_cast<int>(in), static_cast<int>(n), T{1},
                 self.grad.data(), static_cast<int>(outf), self.parents[0]->value.data(), static_cast<int>(in), T{1},
                 p->ensure_grad().data(), static_cast<int>(in));
        }
        if (Node<T>* p = wants(self, 2)) {
            auto& g = p->ensure_grad();
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t o = 0; o < outf; ++o) g[o] += self.grad[i * outf + o];
            }
        }
    });
}

template <typename T>
Var<T> global_avg_pool(const Var<T>& x) {
    check4(x.shape(), "global_avg_pool");
    const std::size_t n = x.shape()[0], c = x.shape()[1], hw = x.shape()[2] * x.shape()[3];
    BasicTensor<T> out(Shape{n, c});
    for (std::size_t i = 0; i < n * c; ++i) {
        T s{0};
        const T* src = x.value().data() + i * hw;
        for (std::size_t j = 0; j < hw; ++j) s += src[j];
        out[i] = s / static_cast<T>(hw);
    }
    return make_result<T>(std::move(out), {x}, [n, c, hw](Node<T>& self) {
        if (Node<T>* p = wants(self, 0)) {
            auto& g = p->ensure_grad();
            for (std::size_t i = 0; i < n * c; ++i) {
                const T v = self.grad[i] / static_cast<T>(hw);
                T* dst = g.data() + i * hw;
                for (std::size_t j = 0; j < hw; ++j) dst[j] += v;
            }
        }
    });
}

template <typename T>
Var<T> channel_gate(const Var<T>& x, const Var<T>& gate) {
    check4(x.shape(), "channel_gate");
    const std::size_t n = x.shape()[0], c = x.shape()[1], hw = x.shape()[2] * x.shape()[3];
    if (gate.shape() != Shape{n, c}) {
        throw DimensionError("channel_gate: gate " + shape_to_string(gate.shape()) + " for input " +
                             shape_to_string(x.shape()));
    }
    BasicTensor<T> out(x.shape());
    for (std::size_t i = 0; i < n * c; ++i) {
        const T gv = gate.value()[i];
        const T* src = x.value().data() + i * hw;
        T* dst = out.data() + i * hw;
        for (std::size_t j = 0; j < hw; ++j) dst[j] = src[j] * gv;
    }
    return make_result<T>(std::move(out), {x, gate}, [n, c, hw](Node<T>& self) {
        const auto& xv = self.parents[0]->value;
        const auto& gv = self.parents[1]->value;
        if (Node<T>* p = wants(self, 0)) {
            auto& g = p->ensure_grad();
            for (std::size_t i = 0; i < n * c; ++i) {
                for (std::size_t j = 0; j < hw; ++j) g[i * hw + j] += self.grad[i * hw + j] * gv[i];
            }
        }
        if (Node<T>* p = wants(self, 1)) {
            auto& g = p->ensure_grad();
            for (std::size_t i = 0; i < n * c; ++i) {
                T s{0};
                for (std::size_t j = 0; j < hw; ++j) s += self.grad[i * hw + j] * xv[i * hw + j];
                g[i] += s;
            }
        }
    });
}

template <typename T>
Var<T> add_group_bias(const Var<T>& x, const Var<T>& e) {
    check4(x.shape(), "add_group_bias");
    const std::size_t n = x.shape()[0], c = x.shape()[1], hw = x.shape()[2] * x.shape()[3];
    if (e.value().dim() != 2 || e.shape()[1] != c || e.shape()[0] == 0 || n % e.shape()[0] != 0) {
        throw DimensionError("add_group_bias: bias " + shape_to_string(e.shape()) + " for input " +
                             shape_to_string(x.shape()));
    }
    const std::size_t per = n / e.shape()[0];
    BasicTensor<T> out = x.value();
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t ch = 0; ch < c; ++ch) {
            const T v = e.value()[(i / per) * c + ch];
            T* dst = out.data() + (i * c + ch) * hw;
            for (std::size_t j = 0; j < hw; ++j) dst[j] += v;
        }
    }
    return make_result<T>(std::move(out), {x, e}, [n, c, hw, per](Node<T>& self) {
        if (Node<T>* p = wants(self, 0)) {
            auto& g = p->ensure_grad();
            for (std::size_t i = 0; i < g.numel(); ++i) g[i] += self.grad[i];
        }
        if (Node<T>* p = wants(self, 1)) {
            auto& g = p->ensure_grad();
            for (std::size_t i = 0; i < n; ++i) {
                for (std::size_t ch = 0; ch < c; ++ch) {
                    T s{0};
                    const T* src = self.grad.data() + (i * c + ch) * hw;
                    for (std::size_t j = 0; j < hw; ++j) s += src[j];
                    g[(i / per) * c + ch] += s;
                }
            }
        }
    });
}

template <typename T>
Var<T> film(const Var<T>& x, const Var<T>& scale_v, const Var<T>& shift_v) {
    check4(x.shape(), "film");
    const std::size_t n = x.shape()[0], c = x.shape()[1], hw = x.shape()[2] * x.shape()[3];
    const bool per_channel = scale_v.shape() == Shape{n, c};
    if (scale_v.shape() != shift_v.shape() || (!per_channel && scale_v.shape() != x.shape())) {
        throw DimensionError("film: scale " + shape_to_string(scale_v.shape()) + " / shift " +
                             shape_to_string(shift_v.shape()) + " incompatible with features " +
                             shape_to_string(x.shape()));
    }
    const std::size_t stride = per_channel ? hw : 1;  // elements sharing one modulation value
    BasicTensor<T> out(x.shape());
    for (std::size_t i = 0; i < out.numel(); ++i) {
        const std::size_t m = per_channel ? i / stride : i;
        out[i] = (T{1} + scale_v.value()[m]) * x.value()[i] + shift_v.value()[m];
    }
    return make_result<T>(std::move(out), {x, scale_v, shift_v}, [per_channel, stride](Node<T>& self) {
        const auto& xv = self.parents[0]->value;
        const auto& sv = self.parents[1]->value;
        T* gx = wants(self, 0) ? wants(self, 0)->ensure_grad().data() : nullptr;
        T* gs = wants(self, 1) ? wants(self, 1)->ensure_grad().data() : nullptr;
        T* gt = wants(self, 2) ? wants(self, 2)->ensure_grad().data() : nullptr;
        for (std::size_t i = 0; i < self.grad.numel(); ++i) {
            const std::size_t m = per_channel ? i / stride : i;
            const T go = self.grad[i];
            if (gx) gx[i] += go * (T{1} + sv[m]);
            if (gs) gs[m] += go * xv[i];
            if (gt) gt[m] += go;
        }
    });
}

template <typename T>
Var<T> embedding(const Var<T>& table, std::span<const std::size_t> indices) {
    if (table.value().dim() != 2) {
        throw DimensionError("embedding: table must be [V,D]");
    }
    const std::size_t v = table.shape()[0], d = table.shape()[1];
    std::vector<std::size_t> idx(indices.begin(), indices.end());
    BasicTensor<T> out(Shape{idx.size(), d});
    for (std::size_t b = 0; b < idx.size(); ++b) {
        if (idx[b] >= v) {
            throw DimensionError("embedding: index " + std::to_string(idx[b]) + " outside table of " +
                                 std::to_string(v));
        }
        std::copy_n(table.value().data() + idx[b] * d, d, out.data() + b * d);
    }
    return make_result<T>(std::move(out), {table}, [idx, d](Node<T>& self) {
        if (Node<T>* p = wants(self, 0)) {
            auto& g = p->ensure_grad();
            for (std::size_t b = 0; b < idx.size(); ++b) {
                for (std::size_t j = 0; j < d; ++j) g[idx[b] * d + j] += self.grad[b * d + j];
            }
        }
    });
}

template <typename T>
Var<T> mean(const Var<T>& a) {
    const std::size_t count = a.value().numel();
    if (count == 0) {
        throw DimensionError("mean of empty tensor");
    }
    double s = 0;
    for (std::size_t i = 0; i < count; ++i) s += a.value()[i];
    auto out = BasicTensor<T>::scalar(static_cast<T>(s / static_cast<double>(count)));
    return make_result<T>(std::move(out), {a}, [count](Node<T>& self) {
        if (Node<T>* p = wants(self, 0)) {
            auto& g = p->ensure_grad();
            const T v = self.grad[0] / static_cast<T>(count);
            for (std::size_t i = 0; i < count; ++i) g[i] += v;
        }
    });
}

template <typename T>
Var<T> mse_loss(const Var<T>& pred, const Var<T>& target) {
    require_same_shape(pred.value(), target.value(), "mse_loss");
    const std::size_t count = pred.value().numel();
    if (count == 0) {
        throw DimensionError("mse_loss of empty tensor");
    }
    double s = 0;
    for (std::size_t i = 0; i < count; ++i) {
        const double d = static_cast<double>(pred.value()[i]) - static_cast<double>(target.value()[i]);
        s += d * d;
    }
    auto out = BasicTensor<T>::scalar(static_cast<T>(s / static_cast<double>(count)));
    return make_result<T>(std::move(out), {pred, target}, [count](Node<T>& self) {
        const auto& pv = self.parents[0]->value;
        const auto& tv = self.parents[1]->value;
        const T k = T{2} * self.grad[0] / static_cast<T>(count);
        if (Node<T>* p = wants(self, 0)) {
            auto& g = p->ensure_grad();
            for (std::size_t i = 0; i < count; ++i) g[i] += k * (pv[i] - tv[i]);
        }
        if (Node<T>* p = wants(self, 1)) {
            auto& g = p->ensure_grad();
            for (std::size_t i = 0; i < count; ++i) g[i] -= k * (pv[i] - tv[i]);
        }
    });
}

#define RECTICAST_INSTANTIATE_AG(T)                                                                       \
    template class Var<T>;                                                                                \
    template Var<T> add(const Var<T>&, const Var<T>&);                                                    \
    template Var<T> sub(const Var<T>&, const Var<T>&);                                                    \
    template Var<T> mul(const Var<T>&, const Var<T>&);                                                    \
    template Var<T> scale(const Var<T>&, T);                                                              \
    template Var<T> silu(const Var<T>&);                                                                  \
    template Var<T> sigmoid(const Var<T>&);                                                               \
    template Var<T> reshape(const Var<T>&, Shape);                                                        \
    template Var<T> slice0(const Var<T>&, std::size_t, std::size_t);                                      \
    template Var<T> concat0(const std::vector<Var<T>>&);                                                  \
    template Var<T> concat_channels(const Var<T>&, const Var<T>&);                                        \
    template Var<T> conv2d(const Var<T>&, const Var<T>&, const Var<T>&, std::size_t, std::size_t);        \
    template Var<T> upsample2x(const Var<T>&);                                                            \
    template Var<T> group_norm(const Var<T>&, const Var<T>&, const Var<T>&, std::size_t, T);              \
    template Var<T> linear(const Var<T>&, const Var<T>&, const Var<T>&);                                  \
    template Var<T> global_avg_pool(const Var<T>&);                                                       \
    template Var<T> channel_gate(const Var<T>&, const Var<T>&);                                           \
    template Var<T> add_group_bias(const Var<T>&, const Var<T>&);                                         \
    template Var<T> film(const Var<T>&, const Var<T>&, const Var<T>&);                                    \
    template Var<T> embedding(const Var<T>&, std::span<const std::size_t>);                               \
    template Var<T> mean(const Var<T>&);                                                                  \
    template Var<T> mse_loss(const Var<T>&, const Var<T>&);

RECTICAST_INSTANTIATE_AG(float)
RECTICAST_INSTANTIATE_AG(double)

}  // namespace recticast::ag
