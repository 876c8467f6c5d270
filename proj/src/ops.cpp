#include "balab/ops.hpp"

#include <cmath>
#include <cstring>

namespace balab {

namespace {

void require_float(const Tensor& t, const char* op) {
    if (!is_float_dtype(t.dtype()))
        throw ContractError(std::string(op) + ": requires a float tensor, got " + dtype_name(t.dtype()));
}

void require_same_float(const Tensor& a, const Tensor& b, const char* op) {
    require_float(a, op);
    require_float(b, op);
    if (a.dtype() != b.dtype())
        throw ContractError(std::string(op) + ": mixed dtypes " + dtype_name(a.dtype()) + " vs " +
                            dtype_name(b.dtype()));
}

template <class F>
void float_dispatch(DType dt, F&& f) {
    switch (dt) {
        case DType::f32: f(float{}); return;
        case DType::f64: f(double{}); return;
        default: throw ContractError("float op on int tensor");
    }
}

bool tape_wanted(Graph& g, std::initializer_list<const Tensor*> ins) {
    if (!g.enabled) return false;
    for (const Tensor* p : ins)
        if (p->traced()) return true;
    return false;
}

template <typename T>
std::span<T> grad_acc(const Tensor& t) {
    Tensor h = t;
    h.ensure_grad();
    return h.grad<T>();
}

template <typename T>
T sigmoid_scalar(T x) {
    if (x >= T(0)) return T(1) / (T(1) + std::exp(-x));
    const T e = std::exp(x);
    return e / (T(1) + e);
}

}  // namespace

Tensor matmul(Graph& g, const Tensor& a, const Tensor& b) {
    require_same_float(a, b, "matmul");
    if (a.ndim() != 2 || b.ndim() != 2 || a.cols() != b.rows())
        throw DimensionError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    const int m = a.rows(), k = a.cols(), n = b.cols();
    Tensor c = Tensor::zeros({m, n}, a.dtype());
    float_dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto as = a.data<T>();
        auto bs = b.data<T>();
        auto cs = c.mutable_data<T>();
        for (int i = 0; i < m; ++i)
            for (int kk = 0; kk < k; ++kk) {
                const T av = as[static_cast<size_t>(i) * k + kk];
                const T* brow = &bs[static_cast<size_t>(kk) * n];
                T* crow = &cs[static_cast<size_t>(i) * n];
                for (int j = 0; j < n; ++j) crow[j] += av * brow[j];
            }
    });
    if (tape_wanted(g, {&a, &b})) {
        c.set_traced();
        g.record(c, [a, b, c, m, k, n] {
            float_dispatch(a.dtype(), [&](auto tag) {
                using T = decltype(tag);
                auto dc = c.grad<T>();
                if (a.traced()) {
                    auto da = grad_acc<T>(a);
                    auto bs = b.data<T>();
                    // dA = dC * B^T
                    for (int i = 0; i < m; ++i)
                        for (int kk = 0; kk < k; ++kk) {
                            T acc{};
                            const T* dcrow = &dc[static_cast<size_t>(i) * n];
                            const T* brow = &bs[static_cast<size_t>(kk) * n];
                            for (int j = 0; j < n; ++j) acc += dcrow[j] * brow[j];
                            da[static_cast<size_t>(i) * k + kk] += acc;
                        }
                }
                if (b.traced()) {
                    auto db = grad_acc<T>(b);
                    auto as = a.data<T>();
                    // dB = A^T * dC
                    for (int kk = 0; kk < k; ++kk)
                        for (int i = 0; i < m; ++i) {
                            const T av = as[static_cast<size_t>(i) * k + kk];
                            const T* dcrow = &dc[static_cast<size_t>(i) * n];
                            T* dbrow = &db[static_cast<size_t>(kk) * n];
                            for (int j = 0; j < n; ++j) dbrow[j] += av * dcrow[j];
                        }
                }
            });
        }, "matmul");
    }
    return c;
}

Tensor add(Graph& g, const Tensor& a, const Tensor& b) {
    require_same_float(a, b, "add");
    if (a.shape() != b.shape())
        throw DimensionError("add: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor c = Tensor::zeros(a.shape(), a.dtype());
    const size_t n = a.numel();
    float_dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto as = a.data<T>();
        auto bs = b.data<T>();
        auto cs = c.mutable_data<T>();
        for (size_t i = 0; i < n; ++i) cs[i] = as[i] + bs[i];
    });
    if (tape_wanted(g, {&a, &b})) {
        c.set_traced();
        g.record(c, [a, b, c, n] {
            float_dispatch(a.dtype(), [&](auto tag) {
                using T = decltype(tag);
                auto dc = c.grad<T>();
                if (a.traced()) {
                    auto da = grad_acc<T>(a);
                    for (size_t i = 0; i < n; ++i) da[i] += dc[i];
                }
                if (b.traced()) {
                    auto db = grad_acc<T>(b);
                    for (size_t i = 0; i < n; ++i) db[i] += dc[i];
                }
            });
        }, "add");
    }
    return c;
}

Tensor add_rowvec(Graph& g, const Tensor& x, const Tensor& b) {
    require_same_float(x, b, "add_rowvec");
    if (x.ndim() != 2 || b.ndim() != 1 || b.dim(0) != x.cols())
        throw DimensionError("add_rowvec: " + shape_str(x.shape()) + " + " + shape_str(b.shape()));
    const int n = x.rows(), c = x.cols();
    Tensor y = Tensor::zeros(x.shape(), x.dtype());
    float_dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto xs = x.data<T>();
        auto bs = b.data<T>();
        auto ys = y.mutable_data<T>();
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < c; ++j)
                ys[static_cast<size_t>(i) * c + j] = xs[static_cast<size_t>(i) * c + j] + bs[j];
    });
    if (tape_wanted(g, {&x, &b})) {
        y.set_traced();
        g.record(y, [x, b, y, n, c] {
            float_dispatch(x.dtype(), [&](auto tag) {
                using T = decltype(tag);
                auto dy = y.grad<T>();
                if (x.traced()) {
                    auto dx = grad_acc<T>(x);
                    for (size_t i = 0; i < static_cast<size_t>(n) * c; ++i) dx[i] += dy[i];
                }
                if (b.traced()) {
                    auto db = grad_acc<T>(b);
                    for (int i = 0; i < n; ++i)
                        for (int j = 0; j < c; ++j) db[j] += dy[static_cast<size_t>(i) * c + j];
                }
            });
        }, "add_rowvec");
    }
    return y;
}

Tensor mul(Graph& g, const Tensor& a, const Tensor& b) {
    require_same_float(a, b, "mul");
    if (a.shape() != b.shape())
        throw DimensionError("mul: shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
    Tensor c = Tensor::zeros(a.shape(), a.dtype());
    const size_t n = a.numel();
    float_dispatch(a.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto as = a.data<T>();
        auto bs = b.data<T>();
        auto cs = c.mutable_data<T>();
        for (size_t i = 0; i < n; ++i) cs[i] = as[i] * bs[i];
    });
    if (tape_wanted(g, {&a, &b})) {
        c.set_traced();
        g.record(c, [a, b, c, n] {
            float_dispatch(a.dtype(), [&](auto tag) {
                using T = decltype(tag);
                auto dc = c.grad<T>();
                if (a.traced()) {
                    auto da = grad_acc<T>(a);
                    auto bs = b.data<T>();
                    for (size_t i = 0; i < n; ++i) da[i] += dc[i] * bs[i];
                }
                if (b.traced()) {
                    auto db = grad_acc<T>(b);
                    auto as = a.data<T>();
                    for (size_t i = 0; i < n; ++i) db[i] += dc[i] * as[i];
                }
            });
        }, "mul");
    }
    return c;
}

Tensor scale(Graph& g, const Tensor& x, double s) {
    require_float(x, "scale");
    Tensor y = Tensor::zeros(x.shape(), x.dtype());
    const size_t n = x.numel();
    float_dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto xs = x.data<T>();
        auto ys = y.mutable_data<T>();
        const T sv = static_cast<T>(s);
        for (size_t i = 0; i < n; ++i) ys[i] = xs[i] * sv;
    });
    if (tape_wanted(g, {&x})) {
        y.set_traced();
        g.record(y, [x, y, s, n] {
            float_dispatch(x.dtype(), [&](auto tag) {
                using T = decltype(tag);
                if (!x.traced()) return;
                auto dy = y.grad<T>();
                auto dx = grad_acc<T>(x);
                const T sv = static_cast<T>(s);
                for (size_t i = 0; i < n; ++i) dx[i] += dy[i] * sv;
            });
        }, "scale");
    }
    return y;
}

Tensor smul(Graph& g, const Tensor& x, const Tensor& s) {
    require_same_float(x, s, "smul");
    if (s.numel() != 1) throw DimensionError("smul: scale must be scalar, got " + shape_str(s.shape()));
    Tensor y = Tensor::zeros(x.shape(), x.dtype());
    const size_t n = x.numel();
    float_dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto xs = x.data<T>();
        auto ys = y.mutable_data<T>();
        const T sv = s.data<T>()[0];
        for (size_t i = 0; i < n; ++i) ys[i] = xs[i] * sv;
    });
    if (tape_wanted(g, {&x, &s})) {
        y.set_traced();
        g.record(y, [x, s, y, n] {
            float_dispatch(x.dtype(), [&](auto tag) {
                using T = decltype(tag);
                auto dy = y.grad<T>();
                auto xs = x.data<T>();
                if (x.traced()) {
                    auto dx = grad_acc<T>(x);
                    const T sv = s.data<T>()[0];
                    for (size_t i = 0; i < n; ++i) dx[i] += dy[i] * sv;
                }
                if (s.traced()) {
                    auto ds = grad_acc<T>(s);
                    T acc{};
                    for (size_t i = 0; i < n; ++i) acc += dy[i] * xs[i];
                    ds[0] += acc;
                }
            });
        }, "smul");
    }
    return y;
}

Tensor sigmoid(Graph& g, const Tensor& x) {
    require_float(x, "sigmoid");
    Tensor y = Tensor::zeros(x.shape(), x.dtype());
    const size_t n = x.numel();
    float_dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto xs = x.data<T>();
        auto ys = y.mutable_data<T>();
        for (size_t i = 0; i < n; ++i) ys[i] = sigmoid_scalar(xs[i]);
    });
    if (tape_wanted(g, {&x})) {
        y.set_traced();
        g.record(y, [x, y, n] {
            float_dispatch(x.dtype(), [&](auto tag) {
                using T = decltype(tag);
                if (!x.traced()) return;
                auto dy = y.grad<T>();
                auto ys = y.data<T>();
                auto dx = grad_acc<T>(x);
                for (size_t i = 0; i < n; ++i) dx[i] += dy[i] * ys[i] * (T(1) - ys[i]);
            });
        }, "sigmoid");
    }
    return y;
}

Tensor silu(Graph& g, const Tensor& x) {
    require_float(x, "silu");
    Tensor y = Tensor::zeros(x.shape(), x.dtype());
    const size_t n = x.numel();
    float_dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto xs = x.data<T>();
        auto ys = y.mutable_data<T>();
        for (size_t i = 0; i < n; ++i) ys[i] = xs[i] * sigmoid_scalar(xs[i]);
    });
    if (tape_wanted(g, {&x})) {
        y.set_traced();
        g.record(y, [x, y, n] {
            float_dispatch(x.dtype(), [&](auto tag) {
                using T = decltype(tag);
                if (!x.traced()) return;
                auto dy = y.grad<T>();
                auto xs = x.data<T>();
                auto dx = grad_acc<T>(x);
                for (size_t i = 0; i < n; ++i) {
                    const T s = sigmoid_scalar(xs[i]);
                    dx[i] += dy[i] * s * (T(1) + xs[i] * (T(1) - s));
                }
            });
        }, "silu");
    }
    return y;
}

namespace {

// softmax over the last axis for 1-d or 2-d tensors
Tensor softmax_last(Graph& g, const Tensor& x) {
    const int c = x.ndim() == 1 ? x.dim(0) : x.cols();
    const int n = static_cast<int>(x.numel()) / c;
    Tensor y = Tensor::zeros(x.shape(), x.dtype());
    float_dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto xs = x.data<T>();
        auto ys = y.mutable_data<T>();
        for (int i = 0; i < n; ++i) {
            const T* row = &xs[static_cast<size_t>(i) * c];
            T* out = &ys[static_cast<size_t>(i) * c];
            T mx = row[0];
            for (int j = 1; j < c; ++j) mx = std::max(mx, row[j]);
            T denom{};
            for (int j = 0; j < c; ++j) {
                out[j] = std::exp(row[j] - mx);
                denom += out[j];
            }
            for (int j = 0; j < c; ++j) out[j] /= denom;
        }
    });
    if (tape_wanted(g, {&x})) {
        y.set_traced();
        g.record(y, [x, y, n, c] {
            float_dispatch(x.dtype(), [&](auto tag) {
                using T = decltype(tag);
                if (!x.traced()) return;
                auto dy = y.grad<T>();
                auto ys = y.data<T>();
                auto dx = grad_acc<T>(x);
                for (int i = 0; i < n; ++i) {
                    const T* yrow = &ys[static_cast<size_t>(i) * c];
                    const T* dyrow = &dy[static_cast<size_t>(i) * c];
                    T dot{};
                    for (int j = 0; j < c; ++j) dot += dyrow[j] * yrow[j];
                    T* dxrow = &dx[static_cast<size_t>(i) * c];
                    for (int j = 0; j < c; ++j) dxrow[j] += (dyrow[j] - dot) * yrow[j];
                }
            });
        }, "softmax");
    }
    return y;
}

}  // namespace

Tensor softmax(Graph& g, const Tensor& x, int axis) {
    require_float(x, "softmax");
    if (x.ndim() == 1) {
        if (axis != 0 && axis != -1) throw DimensionError("softmax: bad axis for 1-d tensor");
        return softmax_last(g, x);
    }
    if (x.ndim() != 2) throw DimensionError("softmax: expects 1-d or 2-d, got " + shape_str(x.shape()));
    if (axis == 1 || axis == -1) return softmax_last(g, x);
    if (axis == 0) return transpose(g, softmax_last(g, transpose(g, x)));
    throw DimensionError("softmax: bad axis");
}

Tensor rmsnorm(Graph& g, const Tensor& x, const Tensor& gain) {
    require_same_float(x, gain, "rmsnorm");
    if (x.ndim() != 2 || gain.ndim() != 1 || gain.dim(0) != x.cols())
        throw DimensionError("rmsnorm: " + shape_str(x.shape()) + " with gain " + shape_str(gain.shape()));
    const int n = x.rows(), c = x.cols();
    Tensor y = Tensor::zeros(x.shape(), x.dtype());
    float_dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto xs = x.data<T>();
        auto gs = gain.data<T>();
        auto ys = y.mutable_data<T>();
        for (int i = 0; i < n; ++i) {
            const T* row = &xs[static_cast<size_t>(i) * c];
            T ms{};
            for (int j = 0; j < c; ++j) ms += row[j] * row[j];
            const T inv = T(1) / std::sqrt(ms / static_cast<T>(c) + static_cast<T>(kRmsNormEps));
            T* out = &ys[static_cast<size_t>(i) * c];
            for (int j = 0; j < c; ++j) out[j] = row[j] * inv * gs[j];
        }
    });
    if (tape_wanted(g, {&x, &gain})) {
        y.set_traced();
        g.record(y, [x, gain, y, n, c] {
            float_dispatch(x.dtype(), [&](auto tag) {
                using T = decltype(tag);
                auto dy = y.grad<T>();
                auto xs = x.data<T>();
                auto gs = gain.data<T>();
                for (int i = 0; i < n; ++i) {
                    const T* row = &xs[static_cast<size_t>(i) * c];
                    const T* dyrow = &dy[static_cast<size_t>(i) * c];
                    T ms{};
                    for (int j = 0; j < c; ++j) ms += row[j] * row[j];
                    const T inv = T(1) / std::sqrt(ms / static_cast<T>(c) + static_cast<T>(kRmsNormEps));
                    if (x.traced()) {
                        auto dx = grad_acc<T>(x);
                        // y_j = x_j*inv*g_j; dx_k = inv*g_k*dy_k - inv^3/c * x_k * sum_j(dy_j*g_j*x_j)
                        T dot{};
                        for (int j = 0; j < c; ++j) dot += dyrow[j] * gs[j] * row[j];
                        const T k3 = inv * inv * inv * dot / static_cast<T>(c);
                        T* dxrow = &dx[static_cast<size_t>(i) * c];
                        for (int j = 0; j < c; ++j) dxrow[j] += inv * gs[j] * dyrow[j] - k3 * row[j];
                    }
                    if (gain.traced()) {
                        auto dg = grad_acc<T>(gain);
                        for (int j = 0; j < c; ++j) dg[j] += dyrow[j] * row[j] * inv;
                    }
                }
            });
        }, "rmsnorm");
    }
    return y;
}

Tensor gather_rows(Graph& g, const Tensor& table, const std::vector<int>& ids) {
    require_float(table, "gather_rows");
    if (table.ndim() != 2) throw DimensionError("gather_rows: table must be 2-d");
    const int v = table.rows(), c = table.cols();
    for (int id : ids)
        if (id < 0 || id >= v)
            throw IndexError("gather_rows: id " + std::to_string(id) + " out of range [0, " +
                             std::to_string(v) + ")");
    const int n = static_cast<int>(ids.size());
    if (n == 0) throw DimensionError("gather_rows: empty id list");
    Tensor y = Tensor::zeros({n, c}, table.dtype());
    float_dispatch(table.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto ts = table.data<T>();
        auto ys = y.mutable_data<T>();
        for (int i = 0; i < n; ++i)
            std::memcpy(&ys[static_cast<size_t>(i) * c], &ts[static_cast<size_t>(ids[i]) * c],
                        sizeof(T) * static_cast<size_t>(c));
    });
    if (tape_wanted(g, {&table})) {
        y.set_traced();
        g.record(y, [table, y, ids, n, c] {
            float_dispatch(table.dtype(), [&](auto tag) {
                using T = decltype(tag);
                if (!table.traced()) return;
                auto dy = y.grad<T>();
                auto dt = grad_acc<T>(table);
                for (int i = 0; i < n; ++i)
                    for (int j = 0; j < c; ++j)
                        dt[static_cast<size_t>(ids[i]) * c + j] += dy[static_cast<size_t>(i) * c + j];
            });
        }, "gather_rows");
    }
    return y;
}

Tensor concat_rows(Graph& g, const std::vector<Tensor>& parts) {
    if (parts.empty()) throw DimensionError("concat_rows: no parts");
    const int c = parts[0].cols();
    int total = 0;
    for (const Tensor& p : parts) {
        require_same_float(parts[0], p, "concat_rows");
        if (p.cols() != c)
            throw DimensionError("concat_rows: column mismatch " + shape_str(p.shape()) + " vs " +
                                 std::to_string(c) + " columns");
        total += p.rows();
    }
    Tensor y = Tensor::zeros({total, c}, parts[0].dtype());
    std::vector<int> offsets(parts.size());
    int off = 0;
    for (size_t i = 0; i < parts.size(); ++i) {
        offsets[i] = off;
        off += parts[i].rows();
    }
    float_dispatch(y.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto ys = y.mutable_data<T>();
        for (size_t i = 0; i < parts.size(); ++i) {
            auto ps = parts[i].data<T>();
            std::memcpy(&ys[static_cast<size_t>(offsets[i]) * c], ps.data(), ps.size() * sizeof(T));
        }
    });
    bool want = g.enabled;
    if (want) {
        want = false;
        for (const Tensor& p : parts)
            if (p.traced()) want = true;
    }
    if (want) {
        y.set_traced();
        g.record(y, [parts, y, offsets, c] {
            float_dispatch(y.dtype(), [&](auto tag) {
                using T = decltype(tag);
                auto dy = y.grad<T>();
                for (size_t i = 0; i < parts.size(); ++i) {
                    if (!parts[i].traced()) continue;
                    auto dp = grad_acc<T>(parts[i]);
                    const size_t base = static_cast<size_t>(offsets[i]) * c;
                    for (size_t j = 0; j < dp.size(); ++j) dp[j] += dy[base + j];
                }
            });
        }, "concat_rows");
    }
    return y;
}

Tensor concat_cols(Graph& g, const std::vector<Tensor>& parts) {
    if (parts.empty()) throw DimensionError("concat_cols: no parts");
    const int n = parts[0].rows();
    int total = 0;
    for (const Tensor& p : parts) {
        require_same_float(parts[0], p, "concat_cols");
        if (p.rows() != n)
            throw DimensionError("concat_cols: row mismatch " + shape_str(p.shape()) + " vs " +
                                 std::to_string(n) + " rows");
        total += p.cols();
    }
    Tensor y = Tensor::zeros({n, total}, parts[0].dtype());
    std::vector<int> offsets(parts.size());
    int off = 0;
    for (size_t i = 0; i < parts.size(); ++i) {
        offsets[i] = off;
        off += parts[i].cols();
    }
    float_dispatch(y.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto ys = y.mutable_data<T>();
        for (size_t i = 0; i < parts.size(); ++i) {
            auto ps = parts[i].data<T>();
            const int pc = parts[i].cols();
            for (int r = 0; r < n; ++r)
                std::memcpy(&ys[static_cast<size_t>(r) * total + offsets[i]],
                            &ps[static_cast<size_t>(r) * pc], sizeof(T) * static_cast<size_t>(pc));
        }
    });
    bool want = g.enabled;
    if (want) {
        want = false;
        for (const Tensor& p : parts)
            if (p.traced()) want = true;
    }
    if (want) {
        y.set_traced();
        g.record(y, [parts, y, offsets, n, total] {
            float_dispatch(y.dtype(), [&](auto tag) {
                using T = decltype(tag);
                auto dy = y.grad<T>();
                for (size_t i = 0; i < parts.size(); ++i) {
                    if (!parts[i].traced()) continue;
                    auto dp = grad_acc<T>(parts[i]);
                    const int pc = parts[i].cols();
                    for (int r = 0; r < n; ++r)
                        for (int j = 0; j < pc; ++j)
                            dp[static_cast<size_t>(r) * pc + j] +=
                                dy[static_cast<size_t>(r) * total + offsets[i] + j];
                }
            });
        }, "concat_cols");
    }
    return y;
}

Tensor slice_rows(Graph& g, const Tensor& x, int r0, int r1) {
    require_float(x, "slice_rows");
    if (x.ndim() != 2 || r0 < 0 || r1 > x.rows() || r0 >= r1)
        throw DimensionError("slice_rows: [" + std::to_string(r0) + ", " + std::to_string(r1) +
                             ") of " + shape_str(x.shape()));
    const int c = x.cols(), n = r1 - r0;
    Tensor y = Tensor::zeros({n, c}, x.dtype());
    float_dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto xs = x.data<T>();
        auto ys = y.mutable_data<T>();
        std::memcpy(ys.data(), &xs[static_cast<size_t>(r0) * c],
                    sizeof(T) * static_cast<size_t>(n) * c);
    });
    if (tape_wanted(g, {&x})) {
        y.set_traced();
        g.record(y, [x, y, r0, n, c] {
            float_dispatch(x.dtype(), [&](auto tag) {
                using T = decltype(tag);
                if (!x.traced()) return;
                auto dy = y.grad<T>();
                auto dx = grad_acc<T>(x);
                for (size_t j = 0; j < static_cast<size_t>(n) * c; ++j)
                    dx[static_cast<size_t>(r0) * c + j] += dy[j];
            });
        }, "slice_rows");
    }
    return y;
}

Tensor slice_cols(Graph& g, const Tensor& x, int c0, int c1) {
    require_float(x, "slice_cols");
    if (x.ndim() != 2 || c0 < 0 || c1 > x.cols() || c0 >= c1)
        throw DimensionError("slice_cols: [" + std::to_string(c0) + ", " + std::to_string(c1) +
                             ") of " + shape_str(x.shape()));
    const int n = x.rows(), c = x.cols(), w = c1 - c0;
    Tensor y = Tensor::zeros({n, w}, x.dtype());
    float_dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto xs = x.data<T>();
        auto ys = y.mutable_data<T>();
        for (int i = 0; i < n; ++i)
            std::memcpy(&ys[static_cast<size_t>(i) * w], &xs[static_cast<size_t>(i) * c + c0],
                        sizeof(T) * static_cast<size_t>(w));
    });
    if (tape_wanted(g, {&x})) {
        y.set_traced();
        g.record(y, [x, y, c0, n, c, w] {
            float_dispatch(x.dtype(), [&](auto tag) {
                using T = decltype(tag);
                if (!x.traced()) return;
                auto dy = y.grad<T>();
                auto dx = grad_acc<T>(x);
                for (int i = 0; i < n; ++i)
                    for (int j = 0; j < w; ++j)
                        dx[static_cast<size_t>(i) * c + c0 + j] += dy[static_cast<size_t>(i) * w + j];
            });
        }, "slice_cols");
    }
    return y;
}

Tensor transpose(Graph& g, const Tensor& x) {
    require_float(x, "transpose");
    if (x.ndim() != 2) throw DimensionError("transpose: expects 2-d, got " + shape_str(x.shape()));
    const int n = x.rows(), c = x.cols();
    Tensor y = Tensor::zeros({c, n}, x.dtype());
    float_dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto xs = x.data<T>();
        auto ys = y.mutable_data<T>();
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < c; ++j)
                ys[static_cast<size_t>(j) * n + i] = xs[static_cast<size_t>(i) * c + j];
    });
    if (tape_wanted(g, {&x})) {
        y.set_traced();
        g.record(y, [x, y, n, c] {
            float_dispatch(x.dtype(), [&](auto tag) {
                using T = decltype(tag);
                if (!x.traced()) return;
                auto dy = y.grad<T>();
                auto dx = grad_acc<T>(x);
                for (int i = 0; i < n; ++i)
                    for (int j = 0; j < c; ++j)
                        dx[static_cast<size_t>(i) * c + j] += dy[static_cast<size_t>(j) * n + i];
            });
        }, "transpose");
    }
    return y;
}

Tensor mean_rows(Graph& g, const Tensor& x) {
    require_float(x, "mean_rows");
    if (x.ndim() != 2) throw DimensionError("mean_rows: expects 2-d, got " + shape_str(x.shape()));
    const int n = x.rows(), c = x.cols();
    Tensor y = Tensor::zeros({1, c}, x.dtype());
    float_dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto xs = x.data<T>();
        auto ys = y.mutable_data<T>();
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < c; ++j) ys[j] += xs[static_cast<size_t>(i) * c + j];
        for (int j = 0; j < c; ++j) ys[j] /= static_cast<T>(n);
    });
    if (tape_wanted(g, {&x})) {
        y.set_traced();
        g.record(y, [x, y, n, c] {
            float_dispatch(x.dtype(), [&](auto tag) {
                using T = decltype(tag);
                if (!x.traced()) return;
                auto dy = y.grad<T>();
                auto dx = grad_acc<T>(x);
                for (int i = 0; i < n; ++i)
                    for (int j = 0; j < c; ++j)
                        dx[static_cast<size_t>(i) * c + j] += dy[j] / static_cast<T>(n);
            });
        }, "mean_rows");
    }
    return y;
}

namespace {

Tensor reduce_all(Graph& g, const Tensor& x, bool mean, const char* name) {
    require_float(x, name);
    const size_t n = x.numel();
    Tensor y = Tensor::zeros({1}, x.dtype());
    float_dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto xs = x.data<T>();
        T acc{};
        for (size_t i = 0; i < n; ++i) acc += xs[i];
        y.mutable_data<T>()[0] = mean ? acc / static_cast<T>(n) : acc;
    });
    if (tape_wanted(g, {&x})) {
        y.set_traced();
        g.record(y, [x, y, n, mean] {
            float_dispatch(x.dtype(), [&](auto tag) {
                using T = decltype(tag);
                if (!x.traced()) return;
                const T d = y.grad<T>()[0];
                auto dx = grad_acc<T>(x);
                const T v = mean ? d / static_cast<T>(n) : d;
                for (size_t i = 0; i < n; ++i) dx[i] += v;
            });
        }, name);
    }
    return y;
}

}  // namespace

Tensor mean_all(Graph& g, const Tensor& x) { return reduce_all(g, x, true, "mean_all"); }
Tensor sum_all(Graph& g, const Tensor& x) { return reduce_all(g, x, false, "sum_all"); }

Tensor index(Graph& g, const Tensor& x, int flat_index) {
    require_float(x, "index");
    if (flat_index < 0 || static_cast<size_t>(flat_index) >= x.numel())
        throw IndexError("index: " + std::to_string(flat_index) + " out of range");
    Tensor y = Tensor::zeros({1}, x.dtype());
    float_dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        y.mutable_data<T>()[0] = x.data<T>()[static_cast<size_t>(flat_index)];
    });
    if (tape_wanted(g, {&x})) {
        y.set_traced();
        g.record(y, [x, y, flat_index] {
            float_dispatch(x.dtype(), [&](auto tag) {
                using T = decltype(tag);
                if (!x.traced()) return;
                auto dx = grad_acc<T>(x);
                dx[static_cast<size_t>(flat_index)] += y.grad<T>()[0];
            });
        }, "index");
    }
    return y;
}

Tensor rope(Graph& g, const Tensor& x, int pos0, double base) {
    require_float(x, "rope");
    if (x.ndim() != 2 || x.cols() % 2 != 0)
        throw DimensionError("rope: expects [s x even], got " + shape_str(x.shape()));
    const int s = x.rows(), w = x.cols(), half = w / 2;
    Tensor y = Tensor::zeros(x.shape(), x.dtype());
    float_dispatch(x.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto xs = x.data<T>();
        auto ys = y.mutable_data<T>();
        for (int t = 0; t < s; ++t)
            for (int i = 0; i < half; ++i) {
                const double theta = (pos0 + t) * std::pow(base, -2.0 * i / w);
                const T cs = static_cast<T>(std::cos(theta));
                const T sn = static_cast<T>(std::sin(theta));
                const size_t k = static_cast<size_t>(t) * w + 2 * i;
                ys[k] = xs[k] * cs - xs[k + 1] * sn;
                ys[k + 1] = xs[k] * sn + xs[k + 1] * cs;
            }
    });
    if (tape_wanted(g, {&x})) {
        y.set_traced();
        g.record(y, [x, y, pos0, base, s, w, half] {
            float_dispatch(x.dtype(), [&](auto tag) {
                using T = decltype(tag);
                if (!x.traced()) return;
                auto dy = y.grad<T>();
                auto dx = grad_acc<T>(x);
                // inverse rotation
                for (int t = 0; t < s; ++t)
                    for (int i = 0; i < half; ++i) {
                        const double theta = (pos0 + t) * std::pow(base, -2.0 * i / w);
                        const T cs = static_cast<T>(std::cos(theta));
                        const T sn = static_cast<T>(std::sin(theta));
                        const size_t k = static_cast<size_t>(t) * w + 2 * i;
                        dx[k] += dy[k] * cs + dy[k + 1] * sn;
                        dx[k + 1] += -dy[k] * sn + dy[k + 1] * cs;
                    }
            });
        }, "rope");
    }
    return y;
}

Tensor cross_entropy(Graph& g, const Tensor& logits, const std::vector<int>& targets) {
    require_float(logits, "cross_entropy");
    if (logits.ndim() != 2) throw DimensionError("cross_entropy: logits must be 2-d");
    const int s = logits.rows(), m = logits.cols();
    if (static_cast<int>(targets.size()) != s)
        throw DimensionError("cross_entropy: " + std::to_string(targets.size()) + " targets for " +
                             std::to_string(s) + " rows");
    int valid = 0;
    for (int t : targets) {
        if (t < -1 || t >= m)
            throw IndexError("cross_entropy: target " + std::to_string(t) + " out of range [0, " +
                             std::to_string(m) + ")");
        if (t >= 0) ++valid;
    }
    if (valid == 0) throw ContractError("cross_entropy: no unmasked positions");
    Tensor y = Tensor::zeros({1}, logits.dtype());
    float_dispatch(logits.dtype(), [&](auto tag) {
        using T = decltype(tag);
        auto ls = logits.data<T>();
        T acc{};
        for (int i = 0; i < s; ++i) {
            if (targets[static_cast<size_t>(i)] < 0) continue;
            const T* row = &ls[static_cast<size_t>(i) * m];
            T mx = row[0];
            for (int j = 1; j < m; ++j) mx = std::max(mx, row[j]);
            T denom{};
            for (int j = 0; j < m; ++j) denom += std::exp(row[j] - mx);
            const T lse = mx + std::log(denom);
            acc += lse - row[targets[static_cast<size_t>(i)]];
        }
        y.mutable_data<T>()[0] = acc / static_cast<T>(valid);
    });
    if (tape_wanted(g, {&logits})) {
        y.set_traced();
        g.record(y, [logits, y, targets, s, m, valid] {
            float_dispatch(logits.dtype(), [&](auto tag) {
                using T = decltype(tag);
                if (!logits.traced()) return;
                const T d = y.grad<T>()[0] / static_cast<T>(valid);
                auto ls = logits.data<T>();
                auto dl = grad_acc<T>(logits);
                for (int i = 0; i < s; ++i) {
                    const int t = targets[static_cast<size_t>(i)];
                    if (t < 0) continue;
                    const T* row = &ls[static_cast<size_t>(i) * m];
                    T mx = row[0];
                    for (int j = 1; j < m; ++j) mx = std::max(mx, row[j]);
                    T denom{};
                    for (int j = 0; j < m; ++j) denom += std::exp(row[j] - mx);
                    T* drow = &dl[static_cast<size_t>(i) * m];
                    for (int j = 0; j < m; ++j) {
                        const T p = std::exp(row[j] - mx) / denom;
                        drow[j] += d * (p - (j == t ? T(1) : T(0)));
                    }
                }
            });
        }, "cross_entropy");
    }
    return y;
}

double grad_check_params(const std::function<Tensor(Graph&)>& loss_fn,
                         const std::vector<Tensor>& params, double h) {
    for (const Tensor& p : params)
        if (p.dtype() != DType::f64)
            throw ContractError("grad_check: parameters must be float64");
    for (Tensor p : params) {
        p.mark_leaf();
        p.ensure_grad();
        p.zero_grad();
    }
    Graph g;
    Tensor loss = loss_fn(g);
    if (!std::isfinite(loss.item())) throw NumericError("grad_check: loss is not finite");
    g.backward(loss);

    std::vector<std::vector<double>> analytic;
    analytic.reserve(params.size());
    for (const Tensor& p : params) {
        auto gv = p.grad<double>();
        analytic.emplace_back(gv.begin(), gv.end());
    }

    double worst = 0.0;
    for (size_t pi = 0; pi < params.size(); ++pi) {
        Tensor p = params[pi];
        auto vals = p.mutable_data<double>();
        for (size_t i = 0; i < vals.size(); ++i) {
            const double v0 = vals[i];
            vals[i] = v0 + h;
            Graph gp;
            gp.enabled = false;
            const double lp = loss_fn(gp).item();
            vals[i] = v0 - h;
            Graph gm;
            gm.enabled = false;
            const double lm = loss_fn(gm).item();
            vals[i] = v0;
            const double numeric = (lp - lm) / (2.0 * h);
            if (!std::isfinite(numeric) || !std::isfinite(analytic[pi][i]))
                throw NumericError("grad_check: non-finite derivative encountered");
            const double err = std::abs(analytic[pi][i] - numeric) / std::max(1.0, std::abs(numeric));
            worst = std::max(worst, err);
        }
    }
    return worst;
}

double grad_check(const std::function<Tensor(Graph&, const Tensor&)>& f, const Tensor& x, double h) {
    if (x.dtype() != DType::f64) throw ContractError("grad_check: x must be float64");
    Tensor probe = x.clone(true);
    return grad_check_params([&](Graph& g) { return f(g, probe); }, {probe}, h);
}

}  // namespace balab
