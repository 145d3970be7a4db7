#include "organseg/ops.hpp"

#include <cmath>
#include <cstring>
#include <stdexcept>

namespace organseg {

namespace {

std::shared_ptr<Node> make_node(Shape shape, std::vector<std::shared_ptr<Node>> parents) {
    auto n = std::make_shared<Node>();
    n->shape = std::move(shape);
    n->val.resize(static_cast<std::size_t>(shape_numel(n->shape)));
    n->parents = std::move(parents);
    for (const auto& p : n->parents)
        if (p->requires_grad) n->requires_grad = true;
    return n;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw std::invalid_argument(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                                    " vs " + shape_str(b.shape()));
}

void require_4d(const Tensor& a, const char* op) {
    if (a.shape().size() != 4)
        throw std::invalid_argument(std::string(op) + ": expected a (C,Z,Y,X) tensor, got " +
                                    shape_str(a.shape()));
}

kernels::Dims4 dims4(const Tensor& t) {
    const Shape& s = t.shape();
    return {s[0], s[1], s[2], s[3]};
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "add");
    auto n = make_node(a.shape(), {a.ptr(), b.ptr()});
    const std::size_t N = n->val.size();
    for (std::size_t i = 0; i < N; ++i) n->val[i] = a.data()[i] + b.data()[i];
    n->backprop = [](Node& self) {
        for (int k = 0; k < 2; ++k) {
            Node* p = self.parents[static_cast<std::size_t>(k)].get();
            if (!p->requires_grad) continue;
            double* g = p->grad_data();
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
        }
    };
    return Tensor(n);
}

Tensor sub(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "sub");
    auto n = make_node(a.shape(), {a.ptr(), b.ptr()});
    const std::size_t N = n->val.size();
    for (std::size_t i = 0; i < N; ++i) n->val[i] = a.data()[i] - b.data()[i];
    n->backprop = [](Node& self) {
        Node* pa = self.parents[0].get();
        Node* pb = self.parents[1].get();
        if (pa->requires_grad) {
            double* g = pa->grad_data();
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
        }
        if (pb->requires_grad) {
            double* g = pb->grad_data();
            for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] -= self.grad[i];
        }
    };
    return Tensor(n);
}

Tensor mul(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mul");
    auto n = make_node(a.shape(), {a.ptr(), b.ptr()});
    const std::size_t N = n->val.size();
    for (std::size_t i = 0; i < N; ++i) n->val[i] = a.data()[i] * b.data()[i];
    n->backprop = [](Node& self) {
        Node* pa = self.parents[0].get();
        Node* pb = self.parents[1].get();
        if (pa->requires_grad) {
            double* g = pa->grad_data();
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                g[i] += self.grad[i] * pb->val[i];
        }
        if (pb->requires_grad) {
            double* g = pb->grad_data();
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                g[i] += self.grad[i] * pa->val[i];
        }
    };
    return Tensor(n);
}

Tensor divide(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "divide");
    auto n = make_node(a.shape(), {a.ptr(), b.ptr()});
    const std::size_t N = n->val.size();
    for (std::size_t i = 0; i < N; ++i) n->val[i] = a.data()[i] / b.data()[i];
    n->backprop = [](Node& self) {
        Node* pa = self.parents[0].get();
        Node* pb = self.parents[1].get();
        if (pa->requires_grad) {
            double* g = pa->grad_data();
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                g[i] += self.grad[i] / pb->val[i];
        }
        if (pb->requires_grad) {
            double* g = pb->grad_data();
            for (std::size_t i = 0; i < self.grad.size(); ++i)
                g[i] -= self.grad[i] * pa->val[i] / (pb->val[i] * pb->val[i]);
        }
    };
    return Tensor(n);
}

Tensor scalar_add(const Tensor& a, double s) {
    auto n = make_node(a.shape(), {a.ptr()});
    for (std::size_t i = 0; i < n->val.size(); ++i) n->val[i] = a.data()[i] + s;
    n->backprop = [](Node& self) {
        Node* p = self.parents[0].get();
        if (!p->requires_grad) return;
        double* g = p->grad_data();
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    };
    return Tensor(n);
}

Tensor scalar_mul(const Tensor& a, double s) {
    auto n = make_node(a.shape(), {a.ptr()});
    for (std::size_t i = 0; i < n->val.size(); ++i) n->val[i] = a.data()[i] * s;
    n->backprop = [s](Node& self) {
        Node* p = self.parents[0].get();
        if (!p->requires_grad) return;
        double* g = p->grad_data();
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += s * self.grad[i];
    };
    return Tensor(n);
}

Tensor pow_scalar(const Tensor& a, double e) {
    auto n = make_node(a.shape(), {a.ptr()});
    for (std::size_t i = 0; i < n->val.size(); ++i) n->val[i] = std::pow(a.data()[i], e);
    n->backprop = [e](Node& self) {
        Node* p = self.parents[0].get();
        if (!p->requires_grad) return;
        double* g = p->grad_data();
        if (e == 0.0) return;
        for (std::size_t i = 0; i < self.grad.size(); ++i)
            g[i] += self.grad[i] * e * std::pow(p->val[i], e - 1.0);
    };
    return Tensor(n);
}

Tensor exp_of(const Tensor& a) {
    auto n = make_node(a.shape(), {a.ptr()});
    for (std::size_t i = 0; i < n->val.size(); ++i) n->val[i] = std::exp(a.data()[i]);
    n->backprop = [](Node& self) {
        Node* p = self.parents[0].get();
        if (!p->requires_grad) return;
        double* g = p->grad_data();
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] * self.val[i];
    };
    return Tensor(n);
}

Tensor log_of(const Tensor& a) {
    auto n = make_node(a.shape(), {a.ptr()});
    for (std::size_t i = 0; i < n->val.size(); ++i) n->val[i] = std::log(a.data()[i]);
    n->backprop = [](Node& self) {
        Node* p = self.parents[0].get();
        if (!p->requires_grad) return;
        double* g = p->grad_data();
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i] / p->val[i];
    };
    return Tensor(n);
}

Tensor relu(const Tensor& a) {
    auto n = make_node(a.shape(), {a.ptr()});
    for (std::size_t i = 0; i < n->val.size(); ++i)
        n->val[i] = a.data()[i] > 0.0 ? a.data()[i] : 0.0;
    n->backprop = [](Node& self) {
        Node* p = self.parents[0].get();
        if (!p->requires_grad) return;
        double* g = p->grad_data();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
            if (p->val[i] > 0.0) g[i] += self.grad[i];
    };
    return Tensor(n);
}

Tensor sigmoid(const Tensor& a) {
    auto n = make_node(a.shape(), {a.ptr()});
    for (std::size_t i = 0; i < n->val.size(); ++i) {
        const double x = a.data()[i];
        n->val[i] = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                             : std::exp(x) / (1.0 + std::exp(x));
    }
    n->backprop = [](Node& self) {
        Node* p = self.parents[0].get();
        if (!p->requires_grad) return;
        double* g = p->grad_data();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
            g[i] += self.grad[i] * self.val[i] * (1.0 - self.val[i]);
    };
    return Tensor(n);
}

Tensor clamp(const Tensor& a, double lo, double hi) {
    auto n = make_node(a.shape(), {a.ptr()});
    for (std::size_t i = 0; i < n->val.size(); ++i)
        n->val[i] = a.data()[i] < lo ? lo : (a.data()[i] > hi ? hi : a.data()[i]);
    n->backprop = [lo, hi](Node& self) {
        Node* p = self.parents[0].get();
        if (!p->requires_grad) return;
        double* g = p->grad_data();
        for (std::size_t i = 0; i < self.grad.size(); ++i)
            if (p->val[i] > lo && p->val[i] < hi) g[i] += self.grad[i];
    };
    return Tensor(n);
}

Tensor sum_all(const Tensor& a) {
    auto n = make_node({1}, {a.ptr()});
    double acc = 0.0;
    for (std::size_t i = 0; i < a.values().size(); ++i) acc += a.data()[i];
    n->val[0] = acc;
    n->backprop = [](Node& self) {
        Node* p = self.parents[0].get();
        if (!p->requires_grad) return;
        double* g = p->grad_data();
        const double gv = self.grad[0];
        for (std::size_t i = 0; i < p->val.size(); ++i) g[i] += gv;
    };
    return Tensor(n);
}

Tensor mean_all(const Tensor& a) {
    return scalar_mul(sum_all(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor sum_spatial(const Tensor& a) {
    require_4d(a, "sum_spatial");
    const std::int64_t C = a.dim(0);
    const std::int64_t S = a.numel() / C;
    auto n = make_node({C}, {a.ptr()});
    for (std::int64_t c = 0; c < C; ++c) {
        double acc = 0.0;
        const double* src = a.data() + c * S;
        for (std::int64_t i = 0; i < S; ++i) acc += src[i];
        n->val[static_cast<std::size_t>(c)] = acc;
    }
    n->backprop = [C, S](Node& self) {
        Node* p = self.parents[0].get();
        if (!p->requires_grad) return;
        double* g = p->grad_data();
        for (std::int64_t c = 0; c < C; ++c) {
            const double gv = self.grad[static_cast<std::size_t>(c)];
            double* dst = g + c * S;
            for (std::int64_t i = 0; i < S; ++i) dst[i] += gv;
        }
    };
    return Tensor(n);
}

Tensor mean_spatial(const Tensor& a) {
    require_4d(a, "mean_spatial");
    const double inv = static_cast<double>(a.dim(0)) / static_cast<double>(a.numel());
    return scalar_mul(sum_spatial(a), inv);
}

Tensor scale_channels(const Tensor& x, const Tensor& gates) {
    require_4d(x, "scale_channels");
    if (gates.shape().size() != 1 || gates.dim(0) != x.dim(0))
        throw std::invalid_argument("scale_channels: gates must be (C)");
    const std::int64_t C = x.dim(0);
    const std::int64_t S = x.numel() / C;
    auto n = make_node(x.shape(), {x.ptr(), gates.ptr()});
    for (std::int64_t c = 0; c < C; ++c) {
        const double gv = gates.data()[c];
        const double* src = x.data() + c * S;
        double* dst = n->val.data() + c * S;
        for (std::int64_t i = 0; i < S; ++i) dst[i] = gv * src[i];
    }
    n->backprop = [C, S](Node& self) {
        Node* px = self.parents[0].get();
        Node* pg = self.parents[1].get();
        if (px->requires_grad) {
            double* g = px->grad_data();
            for (std::int64_t c = 0; c < C; ++c) {
                const double gv = pg->val[static_cast<std::size_t>(c)];
                const double* gout = self.grad.data() + c * S;
                double* dst = g + c * S;
                for (std::int64_t i = 0; i < S; ++i) dst[i] += gv * gout[i];
            }
        }
        if (pg->requires_grad) {
            double* g = pg->grad_data();
            for (std::int64_t c = 0; c < C; ++c) {
                double acc = 0.0;
                const double* gout = self.grad.data() + c * S;
                const double* xv = px->val.data() + c * S;
                for (std::int64_t i = 0; i < S; ++i) acc += gout[i] * xv[i];
                g[c] += acc;
            }
        }
    };
    return Tensor(n);
}

Tensor softmax_channels(const Tensor& x) {
    require_4d(x, "softmax_channels");
    const std::int64_t C = x.dim(0);
    const std::int64_t S = x.numel() / C;
    auto n = make_node(x.shape(), {x.ptr()});
    const double* in = x.data();
    double* out = n->val.data();
#pragma omp parallel for schedule(static)
    for (std::int64_t i = 0; i < S; ++i) {
        double mx = in[i];
        for (std::int64_t c = 1; c < C; ++c) mx = std::max(mx, in[c * S + i]);
        double z = 0.0;
        for (std::int64_t c = 0; c < C; ++c) {
            const double e = std::exp(in[c * S + i] - mx);
            out[c * S + i] = e;
            z += e;
        }
        const double inv = 1.0 / z;
        for (std::int64_t c = 0; c < C; ++c) out[c * S + i] *= inv;
    }
    n->backprop = [C, S](Node& self) {
        Node* p = self.parents[0].get();
        if (!p->requires_grad) return;
        double* g = p->grad_data();
        const double* y = self.val.data();
        const double* gy = self.grad.data();
#pragma omp parallel for schedule(static)
        for (std::int64_t i = 0; i < S; ++i) {
            double dot = 0.0;
            for (std::int64_t c = 0; c < C; ++c) dot += gy[c * S + i] * y[c * S + i];
            for (std::int64_t c = 0; c < C; ++c)
                g[c * S + i] += y[c * S + i] * (gy[c * S + i] - dot);
        }
    };
    return Tensor(n);
}

Tensor concat_channels(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw std::invalid_argument("concat_channels: no parts");
    for (const auto& p : parts) require_4d(p, "concat_channels");
    const Shape& s0 = parts[0].shape();
    std::int64_t C = 0;
    std::vector<std::shared_ptr<Node>> parents;
    for (const auto& p : parts) {
        if (p.dim(1) != s0[1] || p.dim(2) != s0[2] || p.dim(3) != s0[3])
            throw std::invalid_argument("concat_channels: spatial shape mismatch");
        C += p.dim(0);
        parents.push_back(p.ptr());
    }
    auto n = make_node({C, s0[1], s0[2], s0[3]}, std::move(parents));
    const std::int64_t S = s0[1] * s0[2] * s0[3];
    std::int64_t off = 0;
    for (const auto& p : parts) {
        std::memcpy(n->val.data() + off * S, p.data(),
                    static_cast<std::size_t>(p.numel()) * sizeof(double));
        off += p.dim(0);
    }
    n->backprop = [S](Node& self) {
        std::int64_t off = 0;
        for (auto& pp : self.parents) {
            Node* p = pp.get();
            const std::int64_t pc = p->shape[0];
            if (p->requires_grad) {
                double* g = p->grad_data();
                const double* src = self.grad.data() + off * S;
                for (std::int64_t i = 0; i < pc * S; ++i) g[i] += src[i];
            }
            off += pc;
        }
    };
    return Tensor(n);
}

Tensor crop3d(const Tensor& x, std::array<std::int64_t, 3> start,
              std::array<std::int64_t, 3> size) {
    require_4d(x, "crop3d");
    const Shape& s = x.shape();
    for (int a = 0; a < 3; ++a) {
        if (start[a] < 0 || size[a] < 1 || start[a] + size[a] > s[a + 1])
            throw std::invalid_argument("crop3d: box out of bounds on axis " + std::to_string(a));
    }
    const std::int64_t C = s[0];
    auto n = make_node({C, size[0], size[1], size[2]}, {x.ptr()});
    for (std::int64_t c = 0; c < C; ++c)
        for (std::int64_t z = 0; z < size[0]; ++z)
            for (std::int64_t y = 0; y < size[1]; ++y) {
                const double* src = x.data() + ((c * s[1] + start[0] + z) * s[2] + start[1] + y) *
                                                   s[3] + start[2];
                double* dst = n->val.data() + ((c * size[0] + z) * size[1] + y) * size[2];
                std::memcpy(dst, src, static_cast<std::size_t>(size[2]) * sizeof(double));
            }
    n->backprop = [start, size](Node& self) {
        Node* p = self.parents[0].get();
        if (!p->requires_grad) return;
        const Shape& s = p->shape;
        double* g = p->grad_data();
        const std::int64_t C = s[0];
        for (std::int64_t c = 0; c < C; ++c)
            for (std::int64_t z = 0; z < size[0]; ++z)
                for (std::int64_t y = 0; y < size[1]; ++y) {
                    double* dst = g + ((c * s[1] + start[0] + z) * s[2] + start[1] + y) * s[3] +
                                  start[2];
                    const double* src =
                        self.grad.data() + ((c * size[0] + z) * size[1] + y) * size[2];
                    for (std::int64_t i = 0; i < size[2]; ++i) dst[i] += src[i];
                }
    };
    return Tensor(n);
}

Tensor reshape(const Tensor& x, Shape new_shape) {
    if (shape_numel(new_shape) != x.numel())
        throw std::invalid_argument("reshape: element count mismatch");
    auto n = make_node(std::move(new_shape), {x.ptr()});
    n->val = x.values();
    n->backprop = [](Node& self) {
        Node* p = self.parents[0].get();
        if (!p->requires_grad) return;
        double* g = p->grad_data();
        for (std::size_t i = 0; i < self.grad.size(); ++i) g[i] += self.grad[i];
    };
    return Tensor(n);
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    if (x.shape().size() != 1 || w.shape().size() != 2 || w.dim(1) != x.dim(0))
        throw std::invalid_argument("linear: expected x (in), w (out,in)");
    const std::int64_t I = x.dim(0), O = w.dim(0);
    if (b.defined() && (b.shape().size() != 1 || b.dim(0) != O))
        throw std::invalid_argument("linear: bias shape mismatch");
    std::vector<std::shared_ptr<Node>> parents{x.ptr(), w.ptr()};
    if (b.defined()) parents.push_back(b.ptr());
    auto n = make_node({O}, std::move(parents));
#pragma omp parallel for schedule(static)
    for (std::int64_t o = 0; o < O; ++o) {
        double acc = b.defined() ? b.data()[o] : 0.0;
        const double* wr = w.data() + o * I;
        for (std::int64_t i = 0; i < I; ++i) acc += wr[i] * x.data()[i];
        n->val[static_cast<std::size_t>(o)] = acc;
    }
    n->backprop = [I, O](Node& self) {
        Node* px = self.parents[0].get();
        Node* pw = self.parents[1].get();
        Node* pb = self.parents.size() > 2 ? self.parents[2].get() : nullptr;
        if (px->requires_grad) {
            double* g = px->grad_data();
            for (std::int64_t o = 0; o < O; ++o) {
                const double gv = self.grad[static_cast<std::size_t>(o)];
                const double* wr = pw->val.data() + o * I;
                for (std::int64_t i = 0; i < I; ++i) g[i] += gv * wr[i];
            }
        }
        if (pw->requires_grad) {
            double* g = pw->grad_data();
            for (std::int64_t o = 0; o < O; ++o) {
                const double gv = self.grad[static_cast<std::size_t>(o)];
                double* gr = g + o * I;
                for (std::int64_t i = 0; i < I; ++i) gr[i] += gv * px->val[i];
            }
        }
        if (pb && pb->requires_grad) {
            double* g = pb->grad_data();
            for (std::int64_t o = 0; o < O; ++o) g[o] += self.grad[static_cast<std::size_t>(o)];
        }
    };
    return Tensor(n);
}

Tensor conv3d(const Tensor& x, const Tensor& w, const Tensor& b, const kernels::ConvSpec& spec) {
    require_4d(x, "conv3d");
    if (w.shape().size() != 5 || w.dim(1) != x.dim(0))
        throw std::invalid_argument("conv3d: weight must be (Co,Ci,kz,ky,kx) with Ci matching");
    const std::int64_t Co = w.dim(0);
    if (b.defined() && (b.shape().size() != 1 || b.dim(0) != Co))
        throw std::invalid_argument("conv3d: bias shape mismatch");
    const kernels::Dims4 in_d = dims4(x);
    const kernels::Dims4 out_d = kernels::conv_out_dims(in_d, Co, spec);
    std::vector<std::shared_ptr<Node>> parents{x.ptr(), w.ptr()};
    if (b.defined()) parents.push_back(b.ptr());
    auto n = make_node({out_d.c, out_d.z, out_d.y, out_d.x}, std::move(parents));
    kernels::omp::conv3d_forward(x.data(), in_d, w.data(), b.defined() ? b.data() : nullptr, Co,
                                 spec, n->val.data());
    n->backprop = [in_d, out_d, spec](Node& self) {
        Node* px = self.parents[0].get();
        Node* pw = self.parents[1].get();
        Node* pb = self.parents.size() > 2 ? self.parents[2].get() : nullptr;
        if (px->requires_grad)
            kernels::omp::conv3d_backward_data(self.grad.data(), out_d, pw->val.data(), in_d,
                                               spec, px->grad_data());
        if (pw->requires_grad)
            kernels::omp::conv3d_backward_weights(self.grad.data(), out_d, px->val.data(), in_d,
                                                  spec, pw->grad_data(),
                                                  pb && pb->requires_grad ? pb->grad_data()
                                                                          : nullptr);
        else if (pb && pb->requires_grad) {
            double* g = pb->grad_data();
            const std::int64_t sp = out_d.spatial();
            for (std::int64_t c = 0; c < out_d.c; ++c) {
                double acc = 0.0;
                for (std::int64_t i = 0; i < sp; ++i) acc += self.grad[c * sp + i];
                g[c] += acc;
            }
        }
    };
    return Tensor(n);
}

Tensor maxpool3d(const Tensor& x, std::array<std::int64_t, 3> kernel) {
    require_4d(x, "maxpool3d");
    const kernels::Dims4 in_d = dims4(x);
    if (in_d.z % kernel[0] || in_d.y % kernel[1] || in_d.x % kernel[2])
        throw std::invalid_argument("maxpool3d: spatial shape not divisible by kernel");
    const kernels::Dims4 out_d{in_d.c, in_d.z / kernel[0], in_d.y / kernel[1],
                               in_d.x / kernel[2]};
    auto n = make_node({out_d.c, out_d.z, out_d.y, out_d.x}, {x.ptr()});
    auto argmax = std::make_shared<std::vector<std::int64_t>>(
        static_cast<std::size_t>(out_d.numel()));
    kernels::omp::maxpool3d_forward(x.data(), in_d, kernel, n->val.data(), argmax->data());
    n->backprop = [out_d, in_d, argmax](Node& self) {
        Node* p = self.parents[0].get();
        if (!p->requires_grad) return;
        double* g = p->grad_data();
        const std::int64_t sp_out = out_d.spatial();
        const std::int64_t sp_in = in_d.spatial();
        for (std::int64_t c = 0; c < out_d.c; ++c)
            for (std::int64_t i = 0; i < sp_out; ++i)
                g[c * sp_in + (*argmax)[static_cast<std::size_t>(c * sp_out + i)]] +=
                    self.grad[static_cast<std::size_t>(c * sp_out + i)];
    };
    return Tensor(n);
}

Tensor upsample3d(const Tensor& x, std::array<std::int64_t, 3> factor) {
    require_4d(x, "upsample3d");
    for (auto f : factor)
        if (f < 1) throw std::invalid_argument("upsample3d: factor must be >= 1");
    const kernels::Dims4 in_d = dims4(x);
    const kernels::Dims4 out_d{in_d.c, in_d.z * factor[0], in_d.y * factor[1],
                               in_d.x * factor[2]};
    auto n = make_node({out_d.c, out_d.z, out_d.y, out_d.x}, {x.ptr()});
    kernels::omp::upsample3d_forward(x.data(), in_d, factor, n->val.data());
    n->backprop = [in_d, out_d, factor](Node& self) {
        Node* p = self.parents[0].get();
        if (!p->requires_grad) return;
        kernels::omp::upsample3d_backward(self.grad.data(), out_d, in_d, factor, p->grad_data());
    };
    return Tensor(n);
}

Tensor instance_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
    require_4d(x, "instance_norm");
    const std::int64_t C = x.dim(0);
    if (gamma.shape() != Shape{C} || beta.shape() != Shape{C})
        throw std::invalid_argument("instance_norm: gamma/beta must be (C)");
    const std::int64_t S = x.numel() / C;
    auto n = make_node(x.shape(), {x.ptr(), gamma.ptr(), beta.ptr()});
    auto xhat = std::make_shared<std::vector<double>>(x.values().size());
    auto inv_sd = std::make_shared<std::vector<double>>(static_cast<std::size_t>(C));
#pragma omp parallel for schedule(static)
    for (std::int64_t c = 0; c < C; ++c) {
        const double* src = x.data() + c * S;
        double mu = 0.0;
        for (std::int64_t i = 0; i < S; ++i) mu += src[i];
        mu /= static_cast<double>(S);
        double var = 0.0;
        for (std::int64_t i = 0; i < S; ++i) {
            const double d = src[i] - mu;
            var += d * d;
        }
        var /= static_cast<double>(S);
        const double inv = 1.0 / std::sqrt(var + eps);
        (*inv_sd)[static_cast<std::size_t>(c)] = inv;
        const double g = gamma.data()[c], b = beta.data()[c];
        double* xh = xhat->data() + c * S;
        double* dst = n->val.data() + c * S;
        for (std::int64_t i = 0; i < S; ++i) {
            xh[i] = (src[i] - mu) * inv;
            dst[i] = g * xh[i] + b;
        }
    }
    n->backprop = [C, S, xhat, inv_sd](Node& self) {
        Node* px = self.parents[0].get();
        Node* pg = self.parents[1].get();
        Node* pb = self.parents[2].get();
        const double* gy = self.grad.data();
        if (pb->requires_grad) {
            double* g = pb->grad_data();
            for (std::int64_t c = 0; c < C; ++c) {
                double acc = 0.0;
                for (std::int64_t i = 0; i < S; ++i) acc += gy[c * S + i];
                g[c] += acc;
            }
        }
        if (pg->requires_grad) {
            double* g = pg->grad_data();
            for (std::int64_t c = 0; c < C; ++c) {
                double acc = 0.0;
                const double* xh = xhat->data() + c * S;
                for (std::int64_t i = 0; i < S; ++i) acc += gy[c * S + i] * xh[i];
                g[c] += acc;
            }
        }
        if (px->requires_grad) {
            double* g = px->grad_data();
#pragma omp parallel for schedule(static)
            for (std::int64_t c = 0; c < C; ++c) {
                const double* xh = xhat->data() + c * S;
                const double* gyc = gy + c * S;
                const double gamma_c = pg->val[static_cast<std::size_t>(c)];
                const double inv = (*inv_sd)[static_cast<std::size_t>(c)];
                double mean_g = 0.0, mean_gx = 0.0;
                for (std::int64_t i = 0; i < S; ++i) {
                    mean_g += gyc[i];
                    mean_gx += gyc[i] * xh[i];
                }
                mean_g /= static_cast<double>(S);
                mean_gx /= static_cast<double>(S);
                double* dst = g + c * S;
                for (std::int64_t i = 0; i < S; ++i)
                    dst[i] += gamma_c * inv * (gyc[i] - mean_g - xh[i] * mean_gx);
            }
        }
    };
    return Tensor(n);
}

Tensor mse_loss(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "mse_loss");
    const Tensor d = sub(a, b);
    return mean_all(mul(d, d));
}

}  // namespace organseg
