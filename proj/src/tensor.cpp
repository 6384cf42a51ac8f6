#include "qkcv/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

namespace qkcv {

long shape_numel(const Shape& s) {
    long n = 1;
    for (long e : s) n *= e;
    return n;
}

std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

bool shapes_equal(const Shape& a, const Shape& b) { return a == b; }

Shape broadcast_shapes(const Shape& a, const Shape& b, const char* op) {
    const long nd = std::max(a.size(), b.size());
    Shape out(nd, 1);
    for (long i = 0; i < nd; ++i) {
        const long ea = i < static_cast<long>(a.size()) ? a[a.size() - 1 - i] : 1;
        const long eb = i < static_cast<long>(b.size()) ? b[b.size() - 1 - i] : 1;
        if (ea != eb && ea != 1 && eb != 1) {
            throw ShapeError(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                             " are not broadcast-compatible");
        }
        out[nd - 1 - i] = std::max(ea, eb);
    }
    return out;
}

namespace {

thread_local int g_nograd_depth = 0;

void check_extents(const Shape& s, const char* op) {
    for (long e : s) {
        if (e <= 0) throw ShapeError(std::string(op) + ": non-positive extent in shape " + shape_str(s));
    }
}

void check_finite(const char* op, const std::vector<double>& v) {
    for (double x : v) {
        if (!std::isfinite(x)) throw NumericError(std::string(op) + ": produced non-finite value");
    }
}

Tensor make_node(const char* op, Shape shape, std::vector<double> data,
                 std::vector<std::shared_ptr<TensorImpl>> parents, BackwardFn backward) {
    check_finite(op, data);
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    impl->op = op;
    bool needs_grad = false;
    for (const auto& p : parents) needs_grad = needs_grad || p->requires_grad;
    if (needs_grad && g_nograd_depth == 0) {
        impl->requires_grad = true;
        impl->parents = std::move(parents);
        impl->backward = std::move(backward);
    }
    return Tensor::wrap(std::move(impl));
}

std::vector<long> row_major_strides(const Shape& s) {
    std::vector<long> st(s.size(), 1);
    for (long i = static_cast<long>(s.size()) - 2; i >= 0; --i) st[i] = st[i + 1] * s[i + 1];
    return st;
}

// Strides of `src` aligned to the (right-aligned) broadcast shape `out`,
// with zero stride on broadcast axes.
std::vector<long> bcast_strides(const Shape& out, const Shape& src) {
    std::vector<long> st(out.size(), 0);
    const auto src_st = row_major_strides(src);
    const long off = static_cast<long>(out.size()) - static_cast<long>(src.size());
    for (long i = 0; i < static_cast<long>(src.size()); ++i) {
        if (src[i] != 1) st[off + i] = src_st[i];
    }
    return st;
}

// Odometer walk over `out` in row-major order, tracking flat offsets into two
// broadcast operands.
template <class F>
void for_each_bcast2(const Shape& out, const Shape& sa, const Shape& sb, F&& f) {
    const long total = shape_numel(out);
    if (shapes_equal(out, sa) && shapes_equal(out, sb)) {
        for (long i = 0; i < total; ++i) f(i, i, i);
        return;
    }
    const auto sta = bcast_strides(out, sa);
    const auto stb = bcast_strides(out, sb);
    const long nd = static_cast<long>(out.size());
    std::vector<long> idx(nd, 0);
    long oa = 0, ob = 0;
    for (long i = 0; i < total; ++i) {
        f(i, oa, ob);
        for (long d = nd - 1; d >= 0; --d) {
            if (++idx[d] < out[d]) {
                oa += sta[d];
                ob += stb[d];
                break;
            }
            idx[d] = 0;
            oa -= sta[d] * (out[d] - 1);
            ob -= stb[d] * (out[d] - 1);
        }
    }
}

template <class F>
void for_each_bcast1(const Shape& out, const Shape& src, F&& f) {
    const long total = shape_numel(out);
    if (shapes_equal(out, src)) {
        for (long i = 0; i < total; ++i) f(i, i);
        return;
    }
    const auto st = bcast_strides(out, src);
    const long nd = static_cast<long>(out.size());
    std::vector<long> idx(nd, 0);
    long o = 0;
    for (long i = 0; i < total; ++i) {
        f(i, o);
        for (long d = nd - 1; d >= 0; --d) {
            if (++idx[d] < out[d]) {
                o += st[d];
                break;
            }
            idx[d] = 0;
            o -= st[d] * (out[d] - 1);
        }
    }
}

// ---- matmul kernels -------------------------------------------------------

void mm_nn(const double* a, const double* b, double* c, long n, long k, long m) {
    for (long i = 0; i < n; ++i) {
        const double* ar = a + i * k;
        double* cr = c + i * m;
        for (long p = 0; p < k; ++p) {
            const double av = ar[p];
            const double* br = b + p * m;
            for (long j = 0; j < m; ++j) cr[j] += av * br[j];
        }
    }
}

// c[n,mo] += a[n,inner] * b[mo,inner]^T
void mm_nt(const double* a, const double* b, double* c, long n, long mo, long inner) {
    for (long i = 0; i < n; ++i) {
        const double* ar = a + i * inner;
        double* cr = c + i * mo;
        for (long j = 0; j < mo; ++j) {
            const double* br = b + j * inner;
            double s = 0.0;
            for (long p = 0; p < inner; ++p) s += ar[p] * br[p];
            cr[j] += s;
        }
    }
}

// c[k,m] += a[n,k]^T * g[n,m]
void mm_tn(const double* a, const double* g, double* c, long n, long k, long m) {
    for (long i = 0; i < n; ++i) {
        const double* ar = a + i * k;
        const double* gr = g + i * m;
        for (long p = 0; p < k; ++p) {
            const double av = ar[p];
            double* cr = c + p * m;
            for (long j = 0; j < m; ++j) cr[j] += av * gr[j];
        }
    }
}

std::vector<double> permute_raw(const std::vector<double>& data, const Shape& in_shape,
                                const std::vector<long>& axes, Shape& out_shape) {
    const long nd = static_cast<long>(in_shape.size());
    out_shape.assign(nd, 0);
    for (long d = 0; d < nd; ++d) out_shape[d] = in_shape[axes[d]];
    const auto in_st = row_major_strides(in_shape);
    std::vector<long> st(nd);
    for (long d = 0; d < nd; ++d) st[d] = in_st[axes[d]];
    const long total = shape_numel(in_shape);
    std::vector<double> out(total);
    std::vector<long> idx(nd, 0);
    long src = 0;
    for (long i = 0; i < total; ++i) {
        out[i] = data[src];
        for (long d = nd - 1; d >= 0; --d) {
            if (++idx[d] < out_shape[d]) {
                src += st[d];
                break;
            }
            idx[d] = 0;
            src -= st[d] * (out_shape[d] - 1);
        }
    }
    return out;
}

long normalize_axis(long axis, long nd, const char* op) {
    const long a = axis < 0 ? axis + nd : axis;
    if (a < 0 || a >= nd) {
        throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for rank " +
                         std::to_string(nd));
    }
    return a;
}

using BinFwd = double (*)(double, double);

Tensor binary_op(const char* op, const Tensor& a, const Tensor& b, BinFwd fwd,
                 void (*bwd)(const TensorImpl&, const std::vector<double>&, GradStore&)) {
    const Shape out_shape = broadcast_shapes(a.shape(), b.shape(), op);
    std::vector<double> out(shape_numel(out_shape));
    const auto& da = a.data();
    const auto& db = b.data();
    for_each_bcast2(out_shape, a.shape(), b.shape(),
                    [&](long io, long ia, long ib) { out[io] = fwd(da[ia], db[ib]); });
    return make_node(op, out_shape, std::move(out), {a.impl(), b.impl()}, bwd);
}

void unary_pointwise_checks(const Tensor& a, const char* op) {
    if (!a.defined()) throw ContractError(std::string(op) + ": undefined tensor");
}

}  // namespace

// ---- Tensor basics --------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
    check_extents(shape, "zeros");
    auto impl = std::make_shared<TensorImpl>();
    impl->data.assign(shape_numel(shape), 0.0);
    impl->shape = std::move(shape);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
    check_extents(shape, "full");
    if (!std::isfinite(value)) throw NumericError("full: non-finite fill value");
    auto impl = std::make_shared<TensorImpl>();
    impl->data.assign(shape_numel(shape), value);
    impl->shape = std::move(shape);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return full({}, value, requires_grad); }

Tensor Tensor::from_data(Shape shape, std::vector<double> data, bool requires_grad) {
    check_extents(shape, "from_data");
    if (shape_numel(shape) != static_cast<long>(data.size())) {
        throw ShapeError("from_data: shape " + shape_str(shape) + " wants " +
                         std::to_string(shape_numel(shape)) + " values, got " + std::to_string(data.size()));
    }
    check_finite("leaf", data);
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    impl->requires_grad = requires_grad;
    return Tensor(std::move(impl));
}

long Tensor::extent(long axis) const {
    return impl_->shape[normalize_axis(axis, ndim(), "extent")];
}

void Tensor::set_requires_grad(bool value) {
    if (!impl_->is_leaf()) throw ContractError("set_requires_grad: only leaf tensors can be toggled");
    impl_->requires_grad = value;
}

std::vector<double>& Tensor::leaf_data() {
    if (!impl_->is_leaf()) throw ContractError("leaf_data: in-place mutation is restricted to leaves");
    return impl_->data;
}

double Tensor::item() const {
    if (numel() != 1) throw ContractError("item: tensor of shape " + shape_str(shape()) + " is not scalar");
    return impl_->data[0];
}

double Tensor::at(const std::vector<long>& index) const {
    if (static_cast<long>(index.size()) != ndim()) {
        throw ShapeError("at: index rank " + std::to_string(index.size()) + " vs tensor rank " +
                         std::to_string(ndim()));
    }
    const auto st = row_major_strides(shape());
    long off = 0;
    for (std::size_t d = 0; d < index.size(); ++d) {
        if (index[d] < 0 || index[d] >= impl_->shape[d]) {
            throw ShapeError("at: index out of range at axis " + std::to_string(d));
        }
        off += index[d] * st[d];
    }
    return impl_->data[off];
}

Tensor Tensor::detach(bool requires_grad) const {
    return from_data(shape(), data(), requires_grad);
}

NoGradGuard::NoGradGuard() { ++g_nograd_depth; }
NoGradGuard::~NoGradGuard() { --g_nograd_depth; }
bool grad_recording_enabled() { return g_nograd_depth == 0; }

// ---- elementwise ----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
    return binary_op(
        "add", a, b, [](double x, double y) { return x + y; },
        [](const TensorImpl& self, const std::vector<double>& g, GradStore& store) {
            const auto& pa = self.parents[0];
            const auto& pb = self.parents[1];
            std::vector<double>* ga = pa->requires_grad ? &store.accumulate(pa) : nullptr;
            std::vector<double>* gb = pb->requires_grad ? &store.accumulate(pb) : nullptr;
            for_each_bcast2(self.shape, pa->shape, pb->shape, [&](long io, long ia, long ib) {
                if (ga) (*ga)[ia] += g[io];
                if (gb) (*gb)[ib] += g[io];
            });
        });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary_op(
        "sub", a, b, [](double x, double y) { return x - y; },
        [](const TensorImpl& self, const std::vector<double>& g, GradStore& store) {
            const auto& pa = self.parents[0];
            const auto& pb = self.parents[1];
            std::vector<double>* ga = pa->requires_grad ? &store.accumulate(pa) : nullptr;
            std::vector<double>* gb = pb->requires_grad ? &store.accumulate(pb) : nullptr;
            for_each_bcast2(self.shape, pa->shape, pb->shape, [&](long io, long ia, long ib) {
                if (ga) (*ga)[ia] += g[io];
                if (gb) (*gb)[ib] -= g[io];
            });
        });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary_op(
        "mul", a, b, [](double x, double y) { return x * y; },
        [](const TensorImpl& self, const std::vector<double>& g, GradStore& store) {
            const auto& pa = self.parents[0];
            const auto& pb = self.parents[1];
            std::vector<double>* ga = pa->requires_grad ? &store.accumulate(pa) : nullptr;
            std::vector<double>* gb = pb->requires_grad ? &store.accumulate(pb) : nullptr;
            for_each_bcast2(self.shape, pa->shape, pb->shape, [&](long io, long ia, long ib) {
                if (ga) (*ga)[ia] += g[io] * pb->data[ib];
                if (gb) (*gb)[ib] += g[io] * pa->data[ia];
            });
        });
}

Tensor div(const Tensor& a, const Tensor& b) {
    return binary_op(
        "div", a, b, [](double x, double y) { return x / y; },
        [](const TensorImpl& self, const std::vector<double>& g, GradStore& store) {
            const auto& pa = self.parents[0];
            const auto& pb = self.parents[1];
            std::vector<double>* ga = pa->requires_grad ? &store.accumulate(pa) : nullptr;
            std::vector<double>* gb = pb->requires_grad ? &store.accumulate(pb) : nullptr;
            for_each_bcast2(self.shape, pa->shape, pb->shape, [&](long io, long ia, long ib) {
                const double bv = pb->data[ib];
                if (ga) (*ga)[ia] += g[io] / bv;
                if (gb) (*gb)[ib] -= g[io] * pa->data[ia] / (bv * bv);
            });
        });
}

Tensor scale(const Tensor& a, double factor) {
    if (!std::isfinite(factor)) throw NumericError("scale: non-finite factor");
    std::vector<double> out(a.numel());
    const auto& d = a.data();
    for (long i = 0; i < a.numel(); ++i) out[i] = d[i] * factor;
    return make_node("scale", a.shape(), std::move(out), {a.impl()},
                     [factor](const TensorImpl& self, const std::vector<double>& g, GradStore& store) {
                         auto& ga = store.accumulate(self.parents[0]);
                         for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * factor;
                     });
}

// ---- matmul ---------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.ndim() < 2 || b.ndim() < 2) {
        throw ShapeError("matmul: operands must have rank >= 2, got " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
    }
    const Shape& sa = a.shape();
    const Shape& sb = b.shape();
    const long n = sa[sa.size() - 2], k = sa[sa.size() - 1];
    const long kb = sb[sb.size() - 2], m = sb[sb.size() - 1];
    const bool shared_b = b.ndim() == 2 && a.ndim() > 2;
    if (k != kb) {
        throw ShapeError("matmul: inner dims disagree, " + shape_str(sa) + " x " + shape_str(sb));
    }
    if (!shared_b && !std::equal(sa.begin(), sa.end() - 2, sb.begin(), sb.end() - 2)) {
        if (a.ndim() != b.ndim()) {
            throw ShapeError("matmul: batch ranks disagree, " + shape_str(sa) + " x " + shape_str(sb));
        }
        throw ShapeError("matmul: batch dims disagree, " + shape_str(sa) + " x " + shape_str(sb));
    }

    Shape out_shape(sa.begin(), sa.end() - 2);
    const long batch = shape_numel(out_shape);
    out_shape.push_back(n);
    out_shape.push_back(m);

    std::vector<double> out(batch * n * m, 0.0);
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    for (long i = 0; i < batch; ++i) {
        mm_nn(pa + i * n * k, shared_b ? pb : pb + i * k * m, out.data() + i * n * m, n, k, m);
    }

    auto backward = [n, k, m, batch, shared_b](const TensorImpl& self, const std::vector<double>& g,
                                               GradStore& store) {
        const auto& ta = self.parents[0];
        const auto& tb = self.parents[1];
        const double* pa = ta->data.data();
        const double* pb = tb->data.data();
        if (ta->requires_grad) {
            auto& ga = store.accumulate(ta);
            for (long i = 0; i < batch; ++i) {
                mm_nt(g.data() + i * n * m, shared_b ? pb : pb + i * k * m, ga.data() + i * n * k, n, k, m);
            }
        }
        if (tb->requires_grad) {
            auto& gb = store.accumulate(tb);
            for (long i = 0; i < batch; ++i) {
                mm_tn(pa + i * n * k, g.data() + i * n * m, shared_b ? gb.data() : gb.data() + i * k * m, n,
                      k, m);
            }
        }
    };
    return make_node("matmul", std::move(out_shape), std::move(out), {a.impl(), b.impl()},
                     std::move(backward));
}

// ---- layout ops -----------------------------------------------------------

Tensor permute(const Tensor& a, const std::vector<long>& axes) {
    const long nd = a.ndim();
    if (static_cast<long>(axes.size()) != nd) {
        throw ShapeError("permute: axes size " + std::to_string(axes.size()) + " vs rank " +
                         std::to_string(nd));
    }
    std::vector<long> norm(nd);
    std::vector<bool> seen(nd, false);
    for (long d = 0; d < nd; ++d) {
        norm[d] = normalize_axis(axes[d], nd, "permute");
        if (seen[norm[d]]) throw ShapeError("permute: duplicate axis in permutation");
        seen[norm[d]] = true;
    }
    Shape out_shape;
    std::vector<double> out = permute_raw(a.data(), a.shape(), norm, out_shape);
    std::vector<long> inverse(nd);
    for (long d = 0; d < nd; ++d) inverse[norm[d]] = d;
    return make_node("transpose", std::move(out_shape), std::move(out), {a.impl()},
                     [inverse](const TensorImpl& self, const std::vector<double>& g, GradStore& store) {
                         auto& ga = store.accumulate(self.parents[0]);
                         Shape back_shape;
                         const auto gp = permute_raw(g, self.shape, inverse, back_shape);
                         for (std::size_t i = 0; i < gp.size(); ++i) ga[i] += gp[i];
                     });
}

Tensor transpose(const Tensor& a, long axis_a, long axis_b) {
    const long nd = a.ndim();
    const long x = normalize_axis(axis_a, nd, "transpose");
    const long y = normalize_axis(axis_b, nd, "transpose");
    std::vector<long> axes(nd);
    std::iota(axes.begin(), axes.end(), 0);
    std::swap(axes[x], axes[y]);
    return permute(a, axes);
}

Tensor reshape(const Tensor& a, Shape shape) {
    long known = 1;
    long infer = -1;
    for (std::size_t d = 0; d < shape.size(); ++d) {
        if (shape[d] == -1) {
            if (infer >= 0) throw ShapeError("reshape: more than one inferred extent");
            infer = static_cast<long>(d);
        } else {
            if (shape[d] <= 0) throw ShapeError("reshape: bad extent in " + shape_str(shape));
            known *= shape[d];
        }
    }
    if (infer >= 0) {
        if (a.numel() % known != 0) {
            throw ShapeError("reshape: cannot infer extent, " + shape_str(a.shape()) + " -> " +
                             shape_str(shape));
        }
        shape[infer] = a.numel() / known;
        known *= shape[infer];
    }
    if (known != a.numel()) {
        throw ShapeError("reshape: element count mismatch, " + shape_str(a.shape()) + " -> " +
                         shape_str(shape));
    }
    return make_node("reshape", std::move(shape), a.data(), {a.impl()},
                     [](const TensorImpl& self, const std::vector<double>& g, GradStore& store) {
                         auto& ga = store.accumulate(self.parents[0]);
                         for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                     });
}

Tensor broadcast_to(const Tensor& a, const Shape& shape) {
    check_extents(shape, "broadcast");
    const Shape joint = broadcast_shapes(a.shape(), shape, "broadcast");
    if (!shapes_equal(joint, shape)) {
        throw ShapeError("broadcast: cannot expand " + shape_str(a.shape()) + " to " + shape_str(shape));
    }
    std::vector<double> out(shape_numel(shape));
    const auto& d = a.data();
    for_each_bcast1(shape, a.shape(), [&](long io, long is) { out[io] = d[is]; });
    return make_node("broadcast", shape, std::move(out), {a.impl()},
                     [](const TensorImpl& self, const std::vector<double>& g, GradStore& store) {
                         auto& ga = store.accumulate(self.parents[0]);
                         for_each_bcast1(self.shape, self.parents[0]->shape,
                                         [&](long io, long is) { ga[is] += g[io]; });
                     });
}

// ---- pointwise nonlinearities ---------------------------------------------

Tensor exp(const Tensor& a) {
    unary_pointwise_checks(a, "exp");
    std::vector<double> out(a.numel());
    for (long i = 0; i < a.numel(); ++i) out[i] = std::exp(a.data()[i]);
    return make_node("exp", a.shape(), std::move(out), {a.impl()},
                     [](const TensorImpl& self, const std::vector<double>& g, GradStore& store) {
                         auto& ga = store.accumulate(self.parents[0]);
                         for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * self.data[i];
                     });
}

Tensor log(const Tensor& a) {
    unary_pointwise_checks(a, "log");
    std::vector<double> out(a.numel());
    for (long i = 0; i < a.numel(); ++i) out[i] = std::log(a.data()[i]);
    return make_node("log", a.shape(), std::move(out), {a.impl()},
                     [](const TensorImpl& self, const std::vector<double>& g, GradStore& store) {
                         auto& ga = store.accumulate(self.parents[0]);
                         const auto& x = self.parents[0]->data;
                         for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] / x[i];
                     });
}

Tensor elu(const Tensor& a) {
    unary_pointwise_checks(a, "elu");
    std::vector<double> out(a.numel());
    for (long i = 0; i < a.numel(); ++i) {
        const double x = a.data()[i];
        out[i] = x > 0.0 ? x : std::expm1(x);
    }
    return make_node("elu", a.shape(), std::move(out), {a.impl()},
                     [](const TensorImpl& self, const std::vector<double>& g, GradStore& store) {
                         auto& ga = store.accumulate(self.parents[0]);
                         const auto& x = self.parents[0]->data;
                         for (std::size_t i = 0; i < g.size(); ++i) {
                             ga[i] += g[i] * (x[i] > 0.0 ? 1.0 : self.data[i] + 1.0);
                         }
                     });
}

Tensor sigmoid(const Tensor& a) {
    unary_pointwise_checks(a, "sigmoid");
    std::vector<double> out(a.numel());
    for (long i = 0; i < a.numel(); ++i) {
        const double x = a.data()[i];
        out[i] = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
    }
    return make_node("sigmoid", a.shape(), std::move(out), {a.impl()},
                     [](const TensorImpl& self, const std::vector<double>& g, GradStore& store) {
                         auto& ga = store.accumulate(self.parents[0]);
                         for (std::size_t i = 0; i < g.size(); ++i) {
                             ga[i] += g[i] * self.data[i] * (1.0 - self.data[i]);
                         }
                     });
}

Tensor tanh_op(const Tensor& a) {
    unary_pointwise_checks(a, "tanh");
    std::vector<double> out(a.numel());
    for (long i = 0; i < a.numel(); ++i) out[i] = std::tanh(a.data()[i]);
    return make_node("tanh", a.shape(), std::move(out), {a.impl()},
                     [](const TensorImpl& self, const std::vector<double>& g, GradStore& store) {
                         auto& ga = store.accumulate(self.parents[0]);
                         for (std::size_t i = 0; i < g.size(); ++i) {
                             ga[i] += g[i] * (1.0 - self.data[i] * self.data[i]);
                         }
                     });
}

// ---- row-wise ops ---------------------------------------------------------

Tensor softmax_lastdim(const Tensor& a) {
    if (a.ndim() == 0) throw ShapeError("softmax: rank-0 tensor has no last dim");
    const long n = a.shape().back();
    const long rows = a.numel() / n;
    std::vector<double> out(a.numel());
    const auto& d = a.data();
    for (long r = 0; r < rows; ++r) {
        const double* x = d.data() + r * n;
        double* y = out.data() + r * n;
        double mx = x[0];
        for (long i = 1; i < n; ++i) mx = std::max(mx, x[i]);
        double sum = 0.0;
        for (long i = 0; i < n; ++i) {
            y[i] = std::exp(x[i] - mx);
            sum += y[i];
        }
        for (long i = 0; i < n; ++i) y[i] /= sum;
    }
    return make_node("softmax", a.shape(), std::move(out), {a.impl()},
                     [n, rows](const TensorImpl& self, const std::vector<double>& g, GradStore& store) {
                         auto& ga = store.accumulate(self.parents[0]);
                         for (long r = 0; r < rows; ++r) {
                             const double* y = self.data.data() + r * n;
                             const double* gr = g.data() + r * n;
                             double dot = 0.0;
                             for (long i = 0; i < n; ++i) dot += gr[i] * y[i];
                             double* o = ga.data() + r * n;
                             for (long i = 0; i < n; ++i) o[i] += y[i] * (gr[i] - dot);
                         }
                     });
}

Tensor layer_norm_lastdim(const Tensor& a, double eps) {
    if (a.ndim() == 0) throw ShapeError("layer_norm: rank-0 tensor has no last dim");
    if (eps <= 0.0) throw ContractError("layer_norm: eps must be positive");
    const long n = a.shape().back();
    const long rows = a.numel() / n;
    std::vector<double> out(a.numel());
    std::vector<double> inv(rows);
    const auto& d = a.data();
    for (long r = 0; r < rows; ++r) {
        const double* x = d.data() + r * n;
        double mean = 0.0;
        for (long i = 0; i < n; ++i) mean += x[i];
        mean /= n;
        double var = 0.0;
        for (long i = 0; i < n; ++i) var += (x[i] - mean) * (x[i] - mean);
        var /= n;
        inv[r] = 1.0 / std::sqrt(var + eps);
        double* y = out.data() + r * n;
        for (long i = 0; i < n; ++i) y[i] = (x[i] - mean) * inv[r];
    }
    return make_node(
        "layer_norm", a.shape(), std::move(out), {a.impl()},
        [n, rows, inv](const TensorImpl& self, const std::vector<double>& g, GradStore& store) {
            auto& ga = store.accumulate(self.parents[0]);
            for (long r = 0; r < rows; ++r) {
                const double* y = self.data.data() + r * n;
                const double* gr = g.data() + r * n;
                double gm = 0.0, gym = 0.0;
                for (long i = 0; i < n; ++i) {
                    gm += gr[i];
                    gym += gr[i] * y[i];
                }
                gm /= n;
                gym /= n;
                double* o = ga.data() + r * n;
                for (long i = 0; i < n; ++i) o[i] += inv[r] * (gr[i] - gm - y[i] * gym);
            }
        });
}

// ---- shape assembly -------------------------------------------------------

Tensor concat(const std::vector<Tensor>& parts, long axis) {
    if (parts.empty()) throw ContractError("concat: no inputs");
    const long nd = parts[0].ndim();
    const long ax = normalize_axis(axis, nd, "concat");
    Shape out_shape = parts[0].shape();
    long total_ext = 0;
    for (const auto& p : parts) {
        if (p.ndim() != nd) throw ShapeError("concat: rank mismatch");
        for (long d = 0; d < nd; ++d) {
            if (d != ax && p.shape()[d] != out_shape[d]) {
                throw ShapeError("concat: shape mismatch " + shape_str(p.shape()) + " vs " +
                                 shape_str(out_shape) + " on non-concat axis");
            }
        }
        total_ext += p.shape()[ax];
    }
    out_shape[ax] = total_ext;

    long outer = 1, inner = 1;
    for (long d = 0; d < ax; ++d) outer *= out_shape[d];
    for (long d = ax + 1; d < nd; ++d) inner *= out_shape[d];

    std::vector<double> out(shape_numel(out_shape));
    std::vector<long> exts;
    exts.reserve(parts.size());
    long off = 0;
    for (const auto& p : parts) {
        const long ext = p.shape()[ax];
        exts.push_back(ext);
        const auto& src = p.data();
        for (long o = 0; o < outer; ++o) {
            std::copy(src.begin() + o * ext * inner, src.begin() + (o + 1) * ext * inner,
                      out.begin() + o * total_ext * inner + off * inner);
        }
        off += ext;
    }

    std::vector<std::shared_ptr<TensorImpl>> impls;
    impls.reserve(parts.size());
    for (const auto& p : parts) impls.push_back(p.impl());
    return make_node("concat", std::move(out_shape), std::move(out), std::move(impls),
                     [outer, inner, total_ext, exts](const TensorImpl& self, const std::vector<double>& g,
                                                     GradStore& store) {
                         long off = 0;
                         for (std::size_t pi = 0; pi < self.parents.size(); ++pi) {
                             const long ext = exts[pi];
                             if (self.parents[pi]->requires_grad) {
                                 auto& gp = store.accumulate(self.parents[pi]);
                                 for (long o = 0; o < outer; ++o) {
                                     const double* src = g.data() + o * total_ext * inner + off * inner;
                                     double* dst = gp.data() + o * ext * inner;
                                     for (long i = 0; i < ext * inner; ++i) dst[i] += src[i];
                                 }
                             }
                             off += ext;
                         }
                     });
}

namespace {

Tensor reduce_axis(const Tensor& a, long axis, bool keepdim, bool mean) {
    const char* op = mean ? "reduce_mean" : "reduce_sum";
    const long nd = a.ndim();
    if (nd == 0) throw ShapeError(std::string(op) + ": rank-0 tensor has no axes");
    const long ax = normalize_axis(axis, nd, op);
    const long ext = a.shape()[ax];
    long outer = 1, inner = 1;
    for (long d = 0; d < ax; ++d) outer *= a.shape()[d];
    for (long d = ax + 1; d < nd; ++d) inner *= a.shape()[d];

    Shape out_shape;
    for (long d = 0; d < nd; ++d) {
        if (d == ax) {
            if (keepdim) out_shape.push_back(1);
        } else {
            out_shape.push_back(a.shape()[d]);
        }
    }
    std::vector<double> out(outer * inner, 0.0);
    const auto& d = a.data();
    for (long o = 0; o < outer; ++o) {
        for (long e = 0; e < ext; ++e) {
            const double* src = d.data() + (o * ext + e) * inner;
            double* dst = out.data() + o * inner;
            for (long i = 0; i < inner; ++i) dst[i] += src[i];
        }
    }
    const double denom = mean ? static_cast<double>(ext) : 1.0;
    if (mean) {
        for (auto& v : out) v /= denom;
    }
    return make_node(op, std::move(out_shape), std::move(out), {a.impl()},
                     [outer, inner, ext, denom](const TensorImpl& self, const std::vector<double>& g,
                                                GradStore& store) {
                         auto& ga = store.accumulate(self.parents[0]);
                         for (long o = 0; o < outer; ++o) {
                             const double* src = g.data() + o * inner;
                             for (long e = 0; e < ext; ++e) {
                                 double* dst = ga.data() + (o * ext + e) * inner;
                                 for (long i = 0; i < inner; ++i) dst[i] += src[i] / denom;
                             }
                         }
                     });
}

}  // namespace

Tensor reduce_sum(const Tensor& a, long axis, bool keepdim) { return reduce_axis(a, axis, keepdim, false); }
Tensor reduce_mean(const Tensor& a, long axis, bool keepdim) { return reduce_axis(a, axis, keepdim, true); }

Tensor sum_all(const Tensor& a) {
    double s = 0.0;
    for (double v : a.data()) s += v;
    return make_node("reduce_sum", Shape{}, {s}, {a.impl()},
                     [](const TensorImpl& self, const std::vector<double>& g, GradStore& store) {
                         auto& ga = store.accumulate(self.parents[0]);
                         for (auto& v : ga) v += g[0];
                     });
}

Tensor masked_fill(const Tensor& a, const Tensor& mask, double value) {
    if (!std::isfinite(value)) throw NumericError("masked_fill: non-finite fill value");
    const Shape joint = broadcast_shapes(a.shape(), mask.shape(), "masked_fill");
    if (!shapes_equal(joint, a.shape())) {
        throw ShapeError("masked_fill: mask " + shape_str(mask.shape()) + " does not broadcast to " +
                         shape_str(a.shape()));
    }
    std::vector<double> out(a.numel());
    const auto& d = a.data();
    const auto& md = mask.data();
    for_each_bcast1(a.shape(), mask.shape(),
                    [&](long io, long im) { out[io] = md[im] != 0.0 ? value : d[io]; });
    auto mask_impl = mask.impl();  // kept alive for the backward pass
    return make_node("masked_fill", a.shape(), std::move(out), {a.impl()},
                     [mask_impl](const TensorImpl& self, const std::vector<double>& g, GradStore& store) {
                         auto& ga = store.accumulate(self.parents[0]);
                         const auto& md = mask_impl->data;
                         for_each_bcast1(self.shape, mask_impl->shape, [&](long io, long im) {
                             if (md[im] == 0.0) ga[io] += g[io];
                         });
                     });
}

Tensor positive_part(const Tensor& a) {
    std::vector<double> m(a.numel());
    for (long i = 0; i < a.numel(); ++i) m[i] = a.data()[i] < 0.0 ? 1.0 : 0.0;
    return masked_fill(a, Tensor::from_data(a.shape(), std::move(m)), 0.0);
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
    if (w.ndim() != 2) throw ShapeError("linear: weight must be rank 2, got " + shape_str(w.shape()));
    if (x.ndim() < 2 || x.shape().back() != w.shape()[0]) {
        throw ShapeError("linear: input " + shape_str(x.shape()) + " incompatible with weight " +
                         shape_str(w.shape()));
    }
    if (b.ndim() != 1 || b.shape()[0] != w.shape()[1]) {
        throw ShapeError("linear: bias " + shape_str(b.shape()) + " incompatible with weight " +
                         shape_str(w.shape()));
    }
    return add(matmul(x, w), b);
}

// ---- backward pass --------------------------------------------------------

std::vector<double>& GradStore::accumulate(const std::shared_ptr<TensorImpl>& t) {
    auto it = bufs_.find(t.get());
    if (it == bufs_.end()) {
        it = bufs_.emplace(t.get(), std::vector<double>(t->data.size(), 0.0)).first;
    }
    return it->second;
}

Tensor GradMap::at(const Tensor& param) const {
    auto it = grads_.find(param.id());
    if (it != grads_.end()) return it->second;
    return Tensor::zeros(param.shape());
}

bool GradMap::materialized(const Tensor& param) const { return grads_.count(param.id()) != 0; }

GradMap grad_of(const Tensor& loss, const std::vector<Tensor>& params) {
    if (!loss.defined()) throw ContractError("grad_of: undefined loss");
    if (loss.numel() != 1) {
        throw ContractError("grad_of: loss must be scalar, got shape " + shape_str(loss.shape()));
    }

    // Post-order over the requires-grad subgraph; reverse order is the
    // replay order.
    std::vector<TensorImpl*> order;
    std::unordered_set<const TensorImpl*> visited;
    if (loss.requires_grad()) {
        std::vector<std::pair<TensorImpl*, std::size_t>> stack;
        stack.emplace_back(const_cast<TensorImpl*>(loss.id()), 0);
        visited.insert(loss.id());
        while (!stack.empty()) {
            auto& [node, next] = stack.back();
            if (next < node->parents.size()) {
                TensorImpl* p = node->parents[next++].get();
                if (p->requires_grad && !visited.count(p)) {
                    visited.insert(p);
                    stack.emplace_back(p, 0);
                }
            } else {
                order.push_back(node);
                stack.pop_back();
            }
        }
    }

    GradStore store;
    if (loss.requires_grad()) {
        store.accumulate(loss.impl())[0] = 1.0;
        for (auto it = order.rbegin(); it != order.rend(); ++it) {
            TensorImpl* node = *it;
            if (!node->backward || !store.has(node)) continue;
            node->backward(*node, store.at(node), store);
            for (const auto& p : node->parents) {
                if (p->requires_grad && store.has(p.get())) {
                    for (double v : store.at(p.get())) {
                        if (!std::isfinite(v)) {
                            throw NumericError(std::string("backward of ") + node->op +
                                               ": produced non-finite gradient");
                        }
                    }
                }
            }
        }
    }

    GradMap result;
    for (const auto& p : params) {
        if (!p.defined()) throw ContractError("grad_of: undefined parameter");
        if (store.has(p.id())) {
            result.grads_.emplace(p.id(), Tensor::from_data(p.shape(), store.at(p.id())));
        }
    }
    return result;
}

}  // namespace qkcv
