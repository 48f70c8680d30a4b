#include "argen/graph.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "argen/kernels.hpp"

namespace argen {

Parameter& ParamStore::add(const std::string& name, Tensor init) {
    ARGEN_CHECK(find(name) == nullptr, ConfigError, "duplicate parameter name: " + name);
    params_.push_back(std::make_unique<Parameter>(name, std::move(init)));
    return *params_.back();
}

Parameter* ParamStore::find(const std::string& name) {
    for (auto& p : params_)
        if (p->name == name) return p.get();
    return nullptr;
}

const Parameter* ParamStore::find(const std::string& name) const {
    for (const auto& p : params_)
        if (p->name == name) return p.get();
    return nullptr;
}

void ParamStore::zero_grad() {
    for (auto& p : params_) p->zero_grad();
}

int64_t ParamStore::total_size() const {
    int64_t n = 0;
    for (auto& p : params_) n += p->value.numel();
    return n;
}

const Tensor& Ref::val() const { return g->value(*this); }

const Tensor& Graph::value(Ref r) const {
    ARGEN_CHECK(r.g == this && r.idx >= 0 && r.idx < int(nodes_.size()), IndexError,
                "stale graph reference");
    return nodes_[size_t(r.idx)].value;
}

Tensor& Graph::grad(Ref r) {
    Node& n = node(r.idx);
    ARGEN_CHECK(n.needs_grad, ConfigError, "node does not track gradients");
    return n.grad;
}

bool Graph::needs_grad(Ref r) const { return nodes_[size_t(r.idx)].needs_grad; }

int Graph::push(Tensor value, bool needs_grad, Parameter* leaf,
                std::function<void(Graph&, const Tensor&)> bw) {
    Node n;
    n.value = std::move(value);
    n.needs_grad = needs_grad;
    n.leaf = leaf;
    n.backward = std::move(bw);
    if (needs_grad) n.grad = Tensor::zeros(n.value.shape());
    nodes_.push_back(std::move(n));
    return int(nodes_.size()) - 1;
}

bool Graph::any_grad(const std::vector<Ref>& rs) const {
    for (const Ref& r : rs)
        if (nodes_[size_t(r.idx)].needs_grad) return true;
    return false;
}

Ref Graph::input(Tensor v, bool needs_grad) {
    int i = push(std::move(v), needs_grad, nullptr, nullptr);
    return {this, i};
}

Ref Graph::param(Parameter& p) {
    int i = push(p.value, p.trainable, p.trainable ? &p : nullptr, nullptr);
    return {this, i};
}

void Graph::backward(Ref loss) {
    Node& l = node(loss.idx);
    ARGEN_CHECK(l.value.numel() == 1, ShapeError, "backward needs a scalar loss");
    ARGEN_CHECK(l.needs_grad, ConfigError, "loss does not depend on any trainable value");
    l.grad.fill(1.0f);
    for (int i = loss.idx; i >= 0; --i) {
        Node& n = node(i);
        if (!n.needs_grad) continue;
        if (n.backward) n.backward(*this, n.grad);
        if (n.leaf) {
            float* g = n.leaf->grad.data();
            const float* src = n.grad.data();
            for (int64_t t = 0; t < n.grad.numel(); ++t) g[t] += src[t];
        }
    }
}

// ---- elementwise ----

Ref Graph::add(Ref a, Ref b) {
    const Tensor& av = value(a);
    const Tensor& bv = value(b);
    ARGEN_CHECK(av.shape() == bv.shape(), ShapeError, "add: shape mismatch");
    Tensor out = av;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] += bv[i];
    bool ng = any_grad({a, b});
    int ai = a.idx, bi = b.idx;
    int i = push(std::move(out), ng, nullptr, [ai, bi](Graph& g, const Tensor& go) {
        for (int pi : {ai, bi}) {
            Node& p = g.node(pi);
            if (!p.needs_grad) continue;
            for (int64_t t = 0; t < go.numel(); ++t) p.grad[t] += go[t];
        }
    });
    return {this, i};
}

Ref Graph::sub(Ref a, Ref b) {
    const Tensor& av = value(a);
    const Tensor& bv = value(b);
    ARGEN_CHECK(av.shape() == bv.shape(), ShapeError, "sub: shape mismatch");
    Tensor out = av;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] -= bv[i];
    bool ng = any_grad({a, b});
    int ai = a.idx, bi = b.idx;
    int i = push(std::move(out), ng, nullptr, [ai, bi](Graph& g, const Tensor& go) {
        Node& pa = g.node(ai);
        if (pa.needs_grad)
            for (int64_t t = 0; t < go.numel(); ++t) pa.grad[t] += go[t];
        Node& pb = g.node(bi);
        if (pb.needs_grad)
            for (int64_t t = 0; t < go.numel(); ++t) pb.grad[t] -= go[t];
    });
    return {this, i};
}

Ref Graph::mul(Ref a, Ref b) {
    const Tensor& av = value(a);
    const Tensor& bv = value(b);
    ARGEN_CHECK(av.shape() == bv.shape(), ShapeError, "mul: shape mismatch");
    Tensor out = av;
    for (int64_t i = 0; i < out.numel(); ++i) out[i] *= bv[i];
    bool ng = any_grad({a, b});
    int ai = a.idx, bi = b.idx;
    int i = push(std::move(out), ng, nullptr, [ai, bi](Graph& g, const Tensor& go) {
        const Tensor& av2 = g.node(ai).value;
        const Tensor& bv2 = g.node(bi).value;
        Node& pa = g.node(ai);
        if (pa.needs_grad)
            for (int64_t t = 0; t < go.numel(); ++t) pa.grad[t] += go[t] * bv2[t];
        Node& pb = g.node(bi);
        if (pb.needs_grad)
            for (int64_t t = 0; t < go.numel(); ++t) pb.grad[t] += go[t] * av2[t];
    });
    return {this, i};
}

Ref Graph::scale(Ref a, float s) {
    Tensor out = value(a);
    for (int64_t i = 0; i < out.numel(); ++i) out[i] *= s;
    bool ng = needs_grad(a);
    int ai = a.idx;
    int i = push(std::move(out), ng, nullptr, [ai, s](Graph& g, const Tensor& go) {
        Node& pa = g.node(ai);
        if (!pa.needs_grad) return;
        for (int64_t t = 0; t < go.numel(); ++t) pa.grad[t] += go[t] * s;
    });
    return {this, i};
}

Ref Graph::add_bias(Ref x, Ref b) {
    const Tensor& xv = value(x);
    const Tensor& bv = value(b);
    ARGEN_CHECK(xv.ndim() == 2, ShapeError, "add_bias: x must be 2D");
    ARGEN_CHECK(bv.numel() == xv.size(1), ShapeError, "add_bias: bias length mismatch");
    int m = xv.size(0), n = xv.size(1);
    Tensor out = xv;
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) out[int64_t(i) * n + j] += bv[j];
    bool ng = any_grad({x, b});
    int xi = x.idx, bi = b.idx;
    int i = push(std::move(out), ng, nullptr, [xi, bi, m, n](Graph& g, const Tensor& go) {
        Node& px = g.node(xi);
        if (px.needs_grad)
            for (int64_t t = 0; t < go.numel(); ++t) px.grad[t] += go[t];
        Node& pb = g.node(bi);
        if (pb.needs_grad) {
#pragma omp parallel for schedule(static)
            for (int j = 0; j < n; ++j) {
                float s = 0.0f;
                for (int r = 0; r < m; ++r) s += go[int64_t(r) * n + j];
                pb.grad[j] += s;
            }
        }
    });
    return {this, i};
}

// ---- matmul ----

Ref Graph::matmul(Ref a, Ref b) {
    const Tensor& av = value(a);
    const Tensor& bv = value(b);
    ARGEN_CHECK(av.ndim() == 2 && bv.ndim() == 2, ShapeError, "matmul: 2D tensors required");
    ARGEN_CHECK(av.size(1) == bv.size(0), ShapeError,
                "matmul: inner dims " + av.shape_str() + " x " + bv.shape_str());
    int m = av.size(0), k = av.size(1), n = bv.size(1);
    Tensor out({m, n});
    kernels::gemm_nn(out.data(), av.data(), bv.data(), m, k, n, false);
    bool ng = any_grad({a, b});
    int ai = a.idx, bi = b.idx;
    int i = push(std::move(out), ng, nullptr, [ai, bi, m, k, n](Graph& g, const Tensor& go) {
        Node& pa = g.node(ai);
        Node& pb = g.node(bi);
        if (pa.needs_grad)  // dA = dC * B^T
            kernels::gemm_nt(pa.grad.data(), go.data(), g.node(bi).value.data(), m, n, k, true);
        if (pb.needs_grad)  // dB = A^T * dC
            kernels::gemm_tn(pb.grad.data(), g.node(ai).value.data(), go.data(), k, m, n, true);
    });
    return {this, i};
}

Ref Graph::matmul_nt(Ref a, Ref b) {
    const Tensor& av = value(a);
    const Tensor& bv = value(b);
    ARGEN_CHECK(av.ndim() == 2 && bv.ndim() == 2, ShapeError, "matmul_nt: 2D tensors required");
    ARGEN_CHECK(av.size(1) == bv.size(1), ShapeError, "matmul_nt: inner dims mismatch");
    int m = av.size(0), k = av.size(1), n = bv.size(0);
    Tensor out({m, n});
    kernels::gemm_nt(out.data(), av.data(), bv.data(), m, k, n, false);
    bool ng = any_grad({a, b});
    int ai = a.idx, bi = b.idx;
    int i = push(std::move(out), ng, nullptr, [ai, bi, m, k, n](Graph& g, const Tensor& go) {
        Node& pa = g.node(ai);
        Node& pb = g.node(bi);
        if (pa.needs_grad)  // dA = dC * B
            kernels::gemm_nn(pa.grad.data(), go.data(), g.node(bi).value.data(), m, n, k, true);
        if (pb.needs_grad)  // dB = dC^T * A
            kernels::gemm_tn(pb.grad.data(), go.data(), g.node(ai).value.data(), n, m, k, true);
    });
    return {this, i};
}

// ---- activations ----

Ref Graph::silu(Ref x) {
    Tensor out = value(x);
    for (int64_t i = 0; i < out.numel(); ++i) {
        float v = out[i];
        out[i] = v / (1.0f + std::exp(-v));
    }
    bool ng = needs_grad(x);
    int xi = x.idx;
    int i = push(std::move(out), ng, nullptr, [xi](Graph& g, const Tensor& go) {
        Node& p = g.node(xi);
        if (!p.needs_grad) return;
        for (int64_t t = 0; t < go.numel(); ++t) {
            float v = p.value[t];
            float s = 1.0f / (1.0f + std::exp(-v));
            p.grad[t] += go[t] * s * (1.0f + v * (1.0f - s));
        }
    });
    return {this, i};
}

Ref Graph::gelu(Ref x) {
    const float c = 0.7978845608028654f;  // sqrt(2/pi)
    Tensor out = value(x);
    for (int64_t i = 0; i < out.numel(); ++i) {
        float v = out[i];
        out[i] = 0.5f * v * (1.0f + std::tanh(c * (v + 0.044715f * v * v * v)));
    }
    bool ng = needs_grad(x);
    int xi = x.idx;
    int i = push(std::move(out), ng, nullptr, [xi, c](Graph& g, const Tensor& go) {
        Node& p = g.node(xi);
        if (!p.needs_grad) return;
        for (int64_t t = 0; t < go.numel(); ++t) {
            float v = p.value[t];
            float u = c * (v + 0.044715f * v * v * v);
            float th = std::tanh(u);
            float du = c * (1.0f + 3.0f * 0.044715f * v * v);
            p.grad[t] += go[t] * (0.5f * (1.0f + th) + 0.5f * v * (1.0f - th * th) * du);
        }
    });
    return {this, i};
}

Ref Graph::sigmoid(Ref x) {
    Tensor out = value(x);
    for (int64_t i = 0; i < out.numel(); ++i) out[i] = 1.0f / (1.0f + std::exp(-out[i]));
    bool ng = needs_grad(x);
    int xi = x.idx;
    int oi = push(std::move(out), ng, nullptr, nullptr);
    if (ng) {
        node(oi).backward = [xi, oi](Graph& g, const Tensor& go) {
            Node& p = g.node(xi);
            if (!p.needs_grad) return;
            const Tensor& y = g.node(oi).value;
            for (int64_t t = 0; t < go.numel(); ++t) p.grad[t] += go[t] * y[t] * (1.0f - y[t]);
        };
    }
    return {this, oi};
}

// ---- normalization ----

Ref Graph::layernorm(Ref x, Ref gamma, Ref beta, float eps) {
    const Tensor& xv = value(x);
    const Tensor& gv = value(gamma);
    const Tensor& bv = value(beta);
    ARGEN_CHECK(xv.ndim() == 2, ShapeError, "layernorm: x must be 2D");
    int m = xv.size(0), n = xv.size(1);
    ARGEN_CHECK(gv.numel() == n && bv.numel() == n, ShapeError, "layernorm: scale/shift length");
    Tensor out({m, n});
    auto rstd = std::make_shared<std::vector<float>>(size_t(m));
    auto mean = std::make_shared<std::vector<float>>(size_t(m));
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i) {
        const float* row = xv.data() + int64_t(i) * n;
        double mu = 0.0;
        for (int j = 0; j < n; ++j) mu += row[j];
        mu /= n;
        double var = 0.0;
        for (int j = 0; j < n; ++j) {
            double d = row[j] - mu;
            var += d * d;
        }
        var /= n;
        float rs = float(1.0 / std::sqrt(var + eps));
        (*mean)[size_t(i)] = float(mu);
        (*rstd)[size_t(i)] = rs;
        float* o = out.data() + int64_t(i) * n;
        for (int j = 0; j < n; ++j) o[j] = (row[j] - float(mu)) * rs * gv[j] + bv[j];
    }
    bool ng = any_grad({x, gamma, beta});
    int xi = x.idx, gi = gamma.idx, bi = beta.idx;
    int i = push(std::move(out), ng, nullptr,
                 [xi, gi, bi, m, n, mean, rstd](Graph& g, const Tensor& go) {
                     const Tensor& xv2 = g.node(xi).value;
                     const Tensor& gv2 = g.node(gi).value;
                     Node& px = g.node(xi);
                     if (px.needs_grad) {
#pragma omp parallel for schedule(static)
                         for (int i2 = 0; i2 < m; ++i2) {
                             const float* row = xv2.data() + int64_t(i2) * n;
                             const float* grow = go.data() + int64_t(i2) * n;
                             float mu = (*mean)[size_t(i2)], rs = (*rstd)[size_t(i2)];
                             double s1 = 0.0, s2 = 0.0;
                             for (int j = 0; j < n; ++j) {
                                 float xh = (row[j] - mu) * rs;
                                 float dxh = grow[j] * gv2[j];
                                 s1 += dxh;
                                 s2 += dxh * xh;
                             }
                             float* dx = px.grad.data() + int64_t(i2) * n;
                             for (int j = 0; j < n; ++j) {
                                 float xh = (row[j] - mu) * rs;
                                 float dxh = grow[j] * gv2[j];
                                 dx[j] += rs * (dxh - float(s1) / n - xh * float(s2) / n);
                             }
                         }
                     }
                     Node& pg = g.node(gi);
                     Node& pb = g.node(bi);
                     if (pg.needs_grad || pb.needs_grad) {
#pragma omp parallel for schedule(static)
                         for (int j = 0; j < n; ++j) {
                             float dg = 0.0f, db = 0.0f;
                             for (int i2 = 0; i2 < m; ++i2) {
                                 float xh = (xv2[int64_t(i2) * n + j] - (*mean)[size_t(i2)]) *
                                            (*rstd)[size_t(i2)];
                                 float gov = go[int64_t(i2) * n + j];
                                 dg += gov * xh;
                                 db += gov;
                             }
                             if (pg.needs_grad) pg.grad[j] += dg;
                             if (pb.needs_grad) pb.grad[j] += db;
                         }
                     }
                 });
    return {this, i};
}

Ref Graph::softmax_rows(Ref x) {
    const Tensor& xv = value(x);
    ARGEN_CHECK(xv.ndim() == 2, ShapeError, "softmax_rows: x must be 2D");
    int m = xv.size(0), n = xv.size(1);
    Tensor out({m, n});
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i) {
        const float* row = xv.data() + int64_t(i) * n;
        float* o = out.data() + int64_t(i) * n;
        float mx = row[0];
        for (int j = 1; j < n; ++j) mx = std::max(mx, row[j]);
        float s = 0.0f;
        for (int j = 0; j < n; ++j) {
            o[j] = std::exp(row[j] - mx);
            s += o[j];
        }
        float inv = 1.0f / s;
        for (int j = 0; j < n; ++j) o[j] *= inv;
    }
    bool ng = needs_grad(x);
    int xi = x.idx;
    int oi = push(std::move(out), ng, nullptr, nullptr);
    if (ng) {
        node(oi).backward = [xi, oi, m, n](Graph& g, const Tensor& go) {
            Node& p = g.node(xi);
            if (!p.needs_grad) return;
            const Tensor& y = g.node(oi).value;
#pragma omp parallel for schedule(static)
            for (int i = 0; i < m; ++i) {
                const float* yr = y.data() + int64_t(i) * n;
                const float* gr = go.data() + int64_t(i) * n;
                double dot = 0.0;
                for (int j = 0; j < n; ++j) dot += double(yr[j]) * gr[j];
                float* dx = p.grad.data() + int64_t(i) * n;
                for (int j = 0; j < n; ++j) dx[j] += yr[j] * (gr[j] - float(dot));
            }
        };
    }
    return {this, oi};
}

Ref Graph::normalize_rows(Ref x, float eps) {
    const Tensor& xv = value(x);
    ARGEN_CHECK(xv.ndim() == 2, ShapeError, "normalize_rows: x must be 2D");
    int m = xv.size(0), n = xv.size(1);
    Tensor out({m, n});
    auto inv = std::make_shared<std::vector<float>>(size_t(m));
    for (int i = 0; i < m; ++i) {
        const float* row = xv.data() + int64_t(i) * n;
        double s = 0.0;
        for (int j = 0; j < n; ++j) s += double(row[j]) * row[j];
        float iv = float(1.0 / (std::sqrt(s) + eps));
        (*inv)[size_t(i)] = iv;
        float* o = out.data() + int64_t(i) * n;
        for (int j = 0; j < n; ++j) o[j] = row[j] * iv;
    }
    bool ng = needs_grad(x);
    int xi = x.idx;
    int oi = push(std::move(out), ng, nullptr, nullptr);
    if (ng) {
        node(oi).backward = [xi, oi, m, n, inv](Graph& g, const Tensor& go) {
            Node& p = g.node(xi);
            if (!p.needs_grad) return;
            const Tensor& y = g.node(oi).value;
            for (int i = 0; i < m; ++i) {
                const float* yr = y.data() + int64_t(i) * n;
                const float* gr = go.data() + int64_t(i) * n;
                double dot = 0.0;
                for (int j = 0; j < n; ++j) dot += double(yr[j]) * gr[j];
                float* dx = p.grad.data() + int64_t(i) * n;
                float iv = (*inv)[size_t(i)];
                for (int j = 0; j < n; ++j) dx[j] += iv * (gr[j] - yr[j] * float(dot));
            }
        };
    }
    return {this, oi};
}

// ---- gather / scatter / layout ----

Ref Graph::embedding(Ref table, std::vector<int> ids) {
    const Tensor& tv = value(table);
    ARGEN_CHECK(tv.ndim() == 2, ShapeError, "embedding: table must be 2D");
    int V = tv.size(0), d = tv.size(1);
    int m = int(ids.size());
    Tensor out({m, d});
    for (int i = 0; i < m; ++i) {
        ARGEN_CHECK(ids[size_t(i)] >= 0 && ids[size_t(i)] < V, IndexError, "embedding id out of range");
        std::memcpy(out.data() + int64_t(i) * d, tv.data() + int64_t(ids[size_t(i)]) * d,
                    size_t(d) * sizeof(float));
    }
    bool ng = needs_grad(table);
    int ti = table.idx;
    auto ids_p = std::make_shared<std::vector<int>>(std::move(ids));
    int i = push(std::move(out), ng, nullptr, [ti, ids_p, m, d](Graph& g, const Tensor& go) {
        Node& p = g.node(ti);
        if (!p.needs_grad) return;
        for (int r = 0; r < m; ++r) {
            float* dst = p.grad.data() + int64_t((*ids_p)[size_t(r)]) * d;
            const float* src = go.data() + int64_t(r) * d;
            for (int j = 0; j < d; ++j) dst[j] += src[j];
        }
    });
    return {this, i};
}

Ref Graph::gather_rows(Ref x, std::vector<int> ids) {
    const Tensor& xv = value(x);
    ARGEN_CHECK(xv.ndim() == 2, ShapeError, "gather_rows: x must be 2D");
    int m = xv.size(0), n = xv.size(1);
    Tensor out({int(ids.size()), n});
    for (size_t i = 0; i < ids.size(); ++i) {
        ARGEN_CHECK(ids[i] >= 0 && ids[i] < m, IndexError, "gather_rows id out of range");
        std::memcpy(out.data() + int64_t(i) * n, xv.data() + int64_t(ids[i]) * n,
                    size_t(n) * sizeof(float));
    }
    bool ng = needs_grad(x);
    int xi = x.idx;
    auto ids_p = std::make_shared<std::vector<int>>(std::move(ids));
    int i = push(std::move(out), ng, nullptr, [xi, ids_p, n](Graph& g, const Tensor& go) {
        Node& p = g.node(xi);
        if (!p.needs_grad) return;
        for (size_t r = 0; r < ids_p->size(); ++r) {
            float* dst = p.grad.data() + int64_t((*ids_p)[r]) * n;
            const float* src = go.data() + int64_t(r) * n;
            for (int j = 0; j < n; ++j) dst[j] += src[j];
        }
    });
    return {this, i};
}

Ref Graph::slice_rows(Ref x, int r0, int r1) {
    const Tensor& xv = value(x);
    ARGEN_CHECK(xv.ndim() == 2, ShapeError, "slice_rows: x must be 2D");
    int m = xv.size(0), n = xv.size(1);
    ARGEN_CHECK(0 <= r0 && r0 <= r1 && r1 <= m, IndexError, "slice_rows: bad range");
    Tensor out({r1 - r0, n});
    std::memcpy(out.data(), xv.data() + int64_t(r0) * n, size_t(r1 - r0) * n * sizeof(float));
    bool ng = needs_grad(x);
    int xi = x.idx;
    int i = push(std::move(out), ng, nullptr, [xi, r0, n](Graph& g, const Tensor& go) {
        Node& p = g.node(xi);
        if (!p.needs_grad) return;
        float* dst = p.grad.data() + int64_t(r0) * n;
        for (int64_t t = 0; t < go.numel(); ++t) dst[t] += go[t];
    });
    return {this, i};
}

Ref Graph::concat_rows(const std::vector<Ref>& parts) {
    ARGEN_CHECK(!parts.empty(), ShapeError, "concat_rows: no parts");
    int n = value(parts[0]).size(1);
    int m = 0;
    for (const Ref& p : parts) {
        ARGEN_CHECK(value(p).ndim() == 2 && value(p).size(1) == n, ShapeError,
                    "concat_rows: column mismatch");
        m += value(p).size(0);
    }
    Tensor out({m, n});
    int row = 0;
    std::vector<int> idxs;
    std::vector<int> rows;
    for (const Ref& p : parts) {
        const Tensor& pv = value(p);
        std::memcpy(out.data() + int64_t(row) * n, pv.data(), size_t(pv.numel()) * sizeof(float));
        idxs.push_back(p.idx);
        rows.push_back(pv.size(0));
        row += pv.size(0);
    }
    bool ng = any_grad(parts);
    int i = push(std::move(out), ng, nullptr,
                 [idxs, rows, n](Graph& g, const Tensor& go) {
                     int r = 0;
                     for (size_t k = 0; k < idxs.size(); ++k) {
                         Node& p = g.node(idxs[k]);
                         if (p.needs_grad) {
                             const float* src = go.data() + int64_t(r) * n;
                             for (int64_t t = 0; t < int64_t(rows[k]) * n; ++t) p.grad[t] += src[t];
                         }
                         r += rows[k];
                     }
                 });
    return {this, i};
}

Ref Graph::reshape(Ref x, std::vector<int> shape) {
    Tensor out = value(x).reshaped(std::move(shape));
    bool ng = needs_grad(x);
    int xi = x.idx;
    int i = push(std::move(out), ng, nullptr, [xi](Graph& g, const Tensor& go) {
        Node& p = g.node(xi);
        if (!p.needs_grad) return;
        for (int64_t t = 0; t < go.numel(); ++t) p.grad[t] += go[t];
    });
    return {this, i};
}

Ref Graph::detach(Ref x) {
    int i = push(value(x), false, nullptr, nullptr);
    return {this, i};
}

// ---- reductions ----

Ref Graph::mean_rows(Ref x) {
    const Tensor& xv = value(x);
    ARGEN_CHECK(xv.ndim() == 2, ShapeError, "mean_rows: x must be 2D");
    int m = xv.size(0), n = xv.size(1);
    ARGEN_CHECK(m > 0, ShapeError, "mean_rows: empty input");
    Tensor out({1, n});
    for (int j = 0; j < n; ++j) {
        double s = 0.0;
        for (int i = 0; i < m; ++i) s += xv[int64_t(i) * n + j];
        out[j] = float(s / m);
    }
    bool ng = needs_grad(x);
    int xi = x.idx;
    int i = push(std::move(out), ng, nullptr, [xi, m, n](Graph& g, const Tensor& go) {
        Node& p = g.node(xi);
        if (!p.needs_grad) return;
        for (int i2 = 0; i2 < m; ++i2)
            for (int j = 0; j < n; ++j) p.grad[int64_t(i2) * n + j] += go[j] / float(m);
    });
    return {this, i};
}

Ref Graph::sum_all(Ref x) {
    const Tensor& xv = value(x);
    double s = 0.0;
    for (int64_t i = 0; i < xv.numel(); ++i) s += xv[i];
    Tensor out({1});
    out[0] = float(s);
    bool ng = needs_grad(x);
    int xi = x.idx;
    int i = push(std::move(out), ng, nullptr, [xi](Graph& g, const Tensor& go) {
        Node& p = g.node(xi);
        if (!p.needs_grad) return;
        for (int64_t t = 0; t < p.grad.numel(); ++t) p.grad[t] += go[0];
    });
    return {this, i};
}

Ref Graph::weighted_sum(const std::vector<Ref>& scalars, const std::vector<float>& coeffs) {
    ARGEN_CHECK(scalars.size() == coeffs.size() && !scalars.empty(), ShapeError,
                "weighted_sum: arity mismatch");
    double s = 0.0;
    std::vector<int> idxs;
    for (size_t i = 0; i < scalars.size(); ++i) {
        ARGEN_CHECK(value(scalars[i]).numel() == 1, ShapeError, "weighted_sum: non-scalar term");
        s += double(coeffs[i]) * value(scalars[i])[0];
        idxs.push_back(scalars[i].idx);
    }
    Tensor out({1});
    out[0] = float(s);
    bool ng = any_grad(scalars);
    auto cf = coeffs;
    int i = push(std::move(out), ng, nullptr, [idxs, cf](Graph& g, const Tensor& go) {
        for (size_t k = 0; k < idxs.size(); ++k) {
            Node& p = g.node(idxs[k]);
            if (p.needs_grad) p.grad[0] += go[0] * cf[k];
        }
    });
    return {this, i};
}

// ---- losses ----

Ref Graph::cross_entropy(Ref logits, std::vector<int> ids, std::vector<float> weights, bool mean) {
    const Tensor& lv = value(logits);
    ARGEN_CHECK(lv.ndim() == 2, ShapeError, "cross_entropy: logits must be 2D");
    int m = lv.size(0), V = lv.size(1);
    ARGEN_CHECK(int(ids.size()) == m && int(weights.size()) == m, ShapeError,
                "cross_entropy: per-row target/weight length mismatch");
    auto probs = std::make_shared<Tensor>(Tensor({m, V}));
    double total = 0.0, wsum = 0.0;
    for (int i = 0; i < m; ++i) {
        const float* row = lv.data() + int64_t(i) * V;
        float* pr = probs->data() + int64_t(i) * V;
        int t = ids[size_t(i)];
        if (t < 0 || weights[size_t(i)] == 0.0f) {
            std::memset(pr, 0, size_t(V) * sizeof(float));
            continue;
        }
        ARGEN_CHECK(t < V, IndexError, "cross_entropy target out of range");
        float mx = row[0];
        for (int j = 1; j < V; ++j) mx = std::max(mx, row[j]);
        double s = 0.0;
        for (int j = 0; j < V; ++j) {
            double e = std::exp(double(row[j]) - mx);
            pr[j] = float(e);
            s += e;
        }
        double inv = 1.0 / s;
        for (int j = 0; j < V; ++j) pr[j] = float(pr[j] * inv);
        double loss_i = std::log(s) - (double(row[t]) - mx);
        total += double(weights[size_t(i)]) * loss_i;
        wsum += weights[size_t(i)];
    }
    double denom = mean ? (wsum > 0.0 ? wsum : 1.0) : 1.0;
    Tensor out({1});
    out[0] = float(total / denom);
    bool ng = needs_grad(logits);
    int li = logits.idx;
    auto ids_p = std::make_shared<std::vector<int>>(std::move(ids));
    auto w_p = std::make_shared<std::vector<float>>(std::move(weights));
    float fdenom = float(denom);
    int i = push(std::move(out), ng, nullptr,
                 [li, ids_p, w_p, probs, m, V, fdenom](Graph& g, const Tensor& go) {
                     Node& p = g.node(li);
                     if (!p.needs_grad) return;
                     float gs = go[0] / fdenom;
#pragma omp parallel for schedule(static)
                     for (int i2 = 0; i2 < m; ++i2) {
                         int t = (*ids_p)[size_t(i2)];
                         float w = (*w_p)[size_t(i2)];
                         if (t < 0 || w == 0.0f) continue;
                         const float* pr = probs->data() + int64_t(i2) * V;
                         float* dx = p.grad.data() + int64_t(i2) * V;
                         float c = gs * w;
                         for (int j = 0; j < V; ++j) dx[j] += c * pr[j];
                         dx[t] -= c;
                     }
                 });
    return {this, i};
}

Ref Graph::mse(Ref a, Ref b) {
    const Tensor& av = value(a);
    const Tensor& bv = value(b);
    ARGEN_CHECK(av.shape() == bv.shape(), ShapeError, "mse: shape mismatch");
    int64_t N = av.numel();
    ARGEN_CHECK(N > 0, ShapeError, "mse: empty input");
    double s = 0.0;
    for (int64_t i = 0; i < N; ++i) {
        double d = double(av[i]) - bv[i];
        s += d * d;
    }
    Tensor out({1});
    out[0] = float(s / double(N));
    bool ng = any_grad({a, b});
    int ai = a.idx, bi = b.idx;
    int i = push(std::move(out), ng, nullptr, [ai, bi, N](Graph& g, const Tensor& go) {
        const Tensor& av2 = g.node(ai).value;
        const Tensor& bv2 = g.node(bi).value;
        float c = go[0] * 2.0f / float(N);
        Node& pa = g.node(ai);
        if (pa.needs_grad)
            for (int64_t t = 0; t < N; ++t) pa.grad[t] += c * (av2[t] - bv2[t]);
        Node& pb = g.node(bi);
        if (pb.needs_grad)
            for (int64_t t = 0; t < N; ++t) pb.grad[t] -= c * (av2[t] - bv2[t]);
    });
    return {this, i};
}

// ---- attention ----

Ref Graph::attention(Ref q, Ref k, Ref v, std::shared_ptr<AttnMask> mask, int n_heads) {
    const Tensor& qv = value(q);
    const Tensor& kv = value(k);
    const Tensor& vv = value(v);
    ARGEN_CHECK(qv.shape() == kv.shape() && qv.shape() == vv.shape(), ShapeError,
                "attention: q/k/v shape mismatch");
    ARGEN_CHECK(qv.ndim() == 2, ShapeError, "attention: inputs must be 2D [B*T, d]");
    int B = mask->B, T = mask->T;
    int d = qv.size(1);
    ARGEN_CHECK(qv.size(0) == B * T, ShapeError, "attention: rows != B*T");
    ARGEN_CHECK(d % n_heads == 0, ShapeError, "attention: d not divisible by heads");
    int dh = d / n_heads;
    float sc = 1.0f / std::sqrt(float(dh));

    auto probs = std::make_shared<Tensor>(Tensor({B, n_heads, T, T}));
    Tensor out({B * T, d});
    int BH = B * n_heads;
#pragma omp parallel for schedule(static)
    for (int bh = 0; bh < BH; ++bh) {
        int b = bh / n_heads, h = bh % n_heads;
        int off = h * dh;
        for (int i = 0; i < T; ++i) {
            const float* qi = qv.data() + int64_t(b * T + i) * d + off;
            float* pr = probs->data() + ((int64_t(b) * n_heads + h) * T + i) * T;
            float mx = -1e30f;
            for (int j = 0; j < T; ++j) {
                if (!mask->at(b, i, j)) {
                    pr[j] = 0.0f;
                    continue;
                }
                const float* kj = kv.data() + int64_t(b * T + j) * d + off;
                float s = 0.0f;
                for (int t = 0; t < dh; ++t) s += qi[t] * kj[t];
                pr[j] = s * sc;
                mx = std::max(mx, pr[j]);
            }
            float denom = 0.0f;
            for (int j = 0; j < T; ++j) {
                if (!mask->at(b, i, j)) continue;
                pr[j] = std::exp(pr[j] - mx);
                denom += pr[j];
            }
            float inv = denom > 0.0f ? 1.0f / denom : 0.0f;
            float* oi = out.data() + int64_t(b * T + i) * d + off;
            for (int t = 0; t < dh; ++t) oi[t] = 0.0f;
            for (int j = 0; j < T; ++j) {
                if (!mask->at(b, i, j)) continue;
                pr[j] *= inv;
                const float* vj = vv.data() + int64_t(b * T + j) * d + off;
                for (int t = 0; t < dh; ++t) oi[t] += pr[j] * vj[t];
            }
        }
    }

    bool ng = any_grad({q, k, v});
    int qi = q.idx, ki = k.idx, vi = v.idx;
    int i = push(std::move(out), ng, nullptr,
                 [qi, ki, vi, mask, probs, B, T, d, n_heads, dh, sc](Graph& g, const Tensor& go) {
                     const Tensor& qv2 = g.node(qi).value;
                     const Tensor& kv2 = g.node(ki).value;
                     const Tensor& vv2 = g.node(vi).value;
                     Node& pq = g.node(qi);
                     Node& pk = g.node(ki);
                     Node& pv = g.node(vi);
                     int BH = B * n_heads;
#pragma omp parallel for schedule(static)
                     for (int bh = 0; bh < BH; ++bh) {
                         int b = bh / n_heads, h = bh % n_heads;
                         int off = h * dh;
                         std::vector<float> ds(size_t(T) * T, 0.0f);
                         for (int i2 = 0; i2 < T; ++i2) {
                             const float* pr = probs->data() + ((int64_t(b) * n_heads + h) * T + i2) * T;
                             const float* gout = go.data() + int64_t(b * T + i2) * d + off;
                             double rowdot = 0.0;
                             float* dsr = ds.data() + size_t(i2) * T;
                             for (int j = 0; j < T; ++j) {
                                 if (!mask->at(b, i2, j) || pr[j] == 0.0f) continue;
                                 const float* vj = vv2.data() + int64_t(b * T + j) * d + off;
                                 float dp = 0.0f;
                                 for (int t = 0; t < dh; ++t) dp += gout[t] * vj[t];
                                 dsr[j] = dp;
                                 rowdot += double(pr[j]) * dp;
                             }
                             for (int j = 0; j < T; ++j) {
                                 if (!mask->at(b, i2, j)) continue;
                                 dsr[j] = pr[j] * (dsr[j] - float(rowdot));
                             }
                         }
                         if (pq.needs_grad) {
                             for (int i2 = 0; i2 < T; ++i2) {
                                 float* dq = pq.grad.data() + int64_t(b * T + i2) * d + off;
                                 const float* dsr = ds.data() + size_t(i2) * T;
                                 for (int j = 0; j < T; ++j) {
                                     if (!mask->at(b, i2, j) || dsr[j] == 0.0f) continue;
                                     const float* kj = kv2.data() + int64_t(b * T + j) * d + off;
                                     float c = dsr[j] * sc;
                                     for (int t = 0; t < dh; ++t) dq[t] += c * kj[t];
                                 }
                             }
                         }
                         if (pk.needs_grad) {
                             for (int j = 0; j < T; ++j) {
                                 float* dk = pk.grad.data() + int64_t(b * T + j) * d + off;
                                 for (int i2 = 0; i2 < T; ++i2) {
                                     if (!mask->at(b, i2, j)) continue;
                                     float c = ds[size_t(i2) * T + j] * sc;
                                     if (c == 0.0f) continue;
                                     const float* qi2 = qv2.data() + int64_t(b * T + i2) * d + off;
                                     for (int t = 0; t < dh; ++t) dk[t] += c * qi2[t];
                                 }
                             }
                         }
                         if (pv.needs_grad) {
                             for (int j = 0; j < T; ++j) {
                                 float* dv = pv.grad.data() + int64_t(b * T + j) * d + off;
                                 for (int i2 = 0; i2 < T; ++i2) {
                                     if (!mask->at(b, i2, j)) continue;
                                     float p = (*probs)[((int64_t(b) * n_heads + h) * T + i2) * T + j];
                                     if (p == 0.0f) continue;
                                     const float* gout = go.data() + int64_t(b * T + i2) * d + off;
                                     for (int t = 0; t < dh; ++t) dv[t] += p * gout[t];
                                 }
                             }
                         }
                     }
                 });
    return {this, i};
}

Ref Graph::cross_attention(Ref q, Ref k, Ref v, std::shared_ptr<CrossMask> mask, int n_heads) {
    const Tensor& qv = value(q);
    const Tensor& kv = value(k);
    const Tensor& vv = value(v);
    ARGEN_CHECK(qv.ndim() == 2 && kv.ndim() == 2 && vv.ndim() == 2, ShapeError,
                "cross_attention: inputs must be 2D");
    ARGEN_CHECK(kv.shape() == vv.shape(), ShapeError, "cross_attention: k/v shape mismatch");
    ARGEN_CHECK(qv.size(1) == kv.size(1), ShapeError, "cross_attention: dim mismatch");
    int B = mask->B, Tq = mask->Tq, Tk = mask->Tk;
    int d = qv.size(1);
    ARGEN_CHECK(qv.size(0) == B * Tq, ShapeError, "cross_attention: q rows != B*Tq");
    ARGEN_CHECK(kv.size(0) == B * Tk, ShapeError, "cross_attention: k rows != B*Tk");
    ARGEN_CHECK(d % n_heads == 0, ShapeError, "cross_attention: d not divisible by heads");
    int dh = d / n_heads;
    float sc = 1.0f / std::sqrt(float(dh));

    auto probs = std::make_shared<Tensor>(Tensor({B, n_heads, Tq, Tk}));
    Tensor out({B * Tq, d});
    int BH = B * n_heads;
#pragma omp parallel for schedule(static)
    for (int bh = 0; bh < BH; ++bh) {
        int b = bh / n_heads, h = bh % n_heads;
        int off = h * dh;
        for (int i = 0; i < Tq; ++i) {
            const float* qi = qv.data() + int64_t(b * Tq + i) * d + off;
            float* pr = probs->data() + ((int64_t(b) * n_heads + h) * Tq + i) * Tk;
            float mx = -1e30f;
            for (int j = 0; j < Tk; ++j) {
                if (!mask->at(b, i, j)) {
                    pr[j] = 0.0f;
                    continue;
                }
                const float* kj = kv.data() + int64_t(b * Tk + j) * d + off;
                float s = 0.0f;
                for (int t = 0; t < dh; ++t) s += qi[t] * kj[t];
                pr[j] = s * sc;
                mx = std::max(mx, pr[j]);
            }
            float denom = 0.0f;
            for (int j = 0; j < Tk; ++j) {
                if (!mask->at(b, i, j)) continue;
                pr[j] = std::exp(pr[j] - mx);
                denom += pr[j];
            }
            float inv = denom > 0.0f ? 1.0f / denom : 0.0f;
            float* oi = out.data() + int64_t(b * Tq + i) * d + off;
            for (int t = 0; t < dh; ++t) oi[t] = 0.0f;
            for (int j = 0; j < Tk; ++j) {
                if (!mask->at(b, i, j)) continue;
                pr[j] *= inv;
                const float* vj = vv.data() + int64_t(b * Tk + j) * d + off;
                for (int t = 0; t < dh; ++t) oi[t] += pr[j] * vj[t];
            }
        }
    }

    bool ng = any_grad({q, k, v});
    int qi = q.idx, ki = k.idx, vi = v.idx;
    int i = push(
        std::move(out), ng, nullptr,
        [qi, ki, vi, mask, probs, B, Tq, Tk, d, n_heads, dh, sc](Graph& g, const Tensor& go) {
            const Tensor& qv2 = g.node(qi).value;
            const Tensor& kv2 = g.node(ki).value;
            const Tensor& vv2 = g.node(vi).value;
            Node& pq = g.node(qi);
            Node& pk = g.node(ki);
            Node& pv = g.node(vi);
            int BH = B * n_heads;
#pragma omp parallel for schedule(static)
            for (int bh = 0; bh < BH; ++bh) {
                int b = bh / n_heads, h = bh % n_heads;
                int off = h * dh;
                std::vector<float> ds(size_t(Tq) * Tk, 0.0f);
                for (int i2 = 0; i2 < Tq; ++i2) {
                    const float* pr = probs->data() + ((int64_t(b) * n_heads + h) * Tq + i2) * Tk;
                    const float* gout = go.data() + int64_t(b * Tq + i2) * d + off;
                    double rowdot = 0.0;
                    float* dsr = ds.data() + size_t(i2) * Tk;
                    for (int j = 0; j < Tk; ++j) {
                        if (!mask->at(b, i2, j) || pr[j] == 0.0f) continue;
                        const float* vj = vv2.data() + int64_t(b * Tk + j) * d + off;
                        float dp = 0.0f;
                        for (int t = 0; t < dh; ++t) dp += gout[t] * vj[t];
                        dsr[j] = dp;
                        rowdot += double(pr[j]) * dp;
                    }
                    for (int j = 0; j < Tk; ++j) {
                        if (!mask->at(b, i2, j)) continue;
                        dsr[j] = pr[j] * (dsr[j] - float(rowdot));
                    }
                }
                if (pq.needs_grad) {
                    for (int i2 = 0; i2 < Tq; ++i2) {
                        float* dq = pq.grad.data() + int64_t(b * Tq + i2) * d + off;
                        const float* dsr = ds.data() + size_t(i2) * Tk;
                        for (int j = 0; j < Tk; ++j) {
                            if (!mask->at(b, i2, j) || dsr[j] == 0.0f) continue;
                            const float* kj = kv2.data() + int64_t(b * Tk + j) * d + off;
                            float c = dsr[j] * sc;
                            for (int t = 0; t < dh; ++t) dq[t] += c * kj[t];
                        }
                    }
                }
                if (pk.needs_grad) {
                    for (int j = 0; j < Tk; ++j) {
                        float* dk = pk.grad.data() + int64_t(b * Tk + j) * d + off;
                        for (int i2 = 0; i2 < Tq; ++i2) {
                            if (!mask->at(b, i2, j)) continue;
                            float c = ds[size_t(i2) * Tk + j] * sc;
                            if (c == 0.0f) continue;
                            const float* qi2 = qv2.data() + int64_t(b * Tq + i2) * d + off;
                            for (int t = 0; t < dh; ++t) dk[t] += c * qi2[t];
                        }
                    }
                }
                if (pv.needs_grad) {
                    for (int j = 0; j < Tk; ++j) {
                        float* dv = pv.grad.data() + int64_t(b * Tk + j) * d + off;
                        for (int i2 = 0; i2 < Tq; ++i2) {
                            if (!mask->at(b, i2, j)) continue;
                            float p = (*probs)[((int64_t(b) * n_heads + h) * Tq + i2) * Tk + j];
                            if (p == 0.0f) continue;
                            const float* gout = go.data() + int64_t(b * Tq + i2) * d + off;
                            for (int t = 0; t < dh; ++t) dv[t] += p * gout[t];
                        }
                    }
                }
            }
        });
    return {this, i};
}

Ref Graph::patchify(Ref x, int p) {
    const Tensor& xv = value(x);
    ARGEN_CHECK(xv.ndim() == 4, ShapeError, "patchify: x must be [B,C,H,W]");
    ARGEN_CHECK(p > 0 && xv.size(2) % p == 0 && xv.size(3) % p == 0, ShapeError,
                "patchify: H and W must divide by the patch size");
    int B = xv.size(0), C = xv.size(1), H = xv.size(2), W = xv.size(3);
    int hp = H / p, wp = W / p;
    Tensor out({B * hp * wp, C * p * p});
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c)
            for (int y = 0; y < H; ++y)
                for (int xx = 0; xx < W; ++xx) {
                    int row = (b * hp + y / p) * wp + xx / p;
                    int col = (c * p + y % p) * p + xx % p;
                    out[int64_t(row) * C * p * p + col] = xv[((int64_t(b) * C + c) * H + y) * W + xx];
                }
    bool ng = needs_grad(x);
    int xi = x.idx;
    int i = push(std::move(out), ng, nullptr, [xi, B, C, H, W, p](Graph& g, const Tensor& go) {
        Node& par = g.node(xi);
        if (!par.needs_grad) return;
        int hp = H / p, wp = W / p;
        for (int b = 0; b < B; ++b)
            for (int c = 0; c < C; ++c)
                for (int y = 0; y < H; ++y)
                    for (int xx = 0; xx < W; ++xx) {
                        int row = (b * hp + y / p) * wp + xx / p;
                        int col = (c * p + y % p) * p + xx % p;
                        par.grad[((int64_t(b) * C + c) * H + y) * W + xx] +=
                            go[int64_t(row) * C * p * p + col];
                    }
    });
    return {this, i};
}

// ---- rotary positions ----

void rope2d_apply(float* x, int rows, int d, const RopePos& pos, int n_heads, float theta_base,
                  int sign) {
    ARGEN_CHECK(int(pos.size()) == rows, ShapeError, "rope: position count != rows");
    int dh = d / n_heads;
    ARGEN_CHECK(d % n_heads == 0 && dh % 4 == 0, ShapeError,
                "rope: head dim must be a multiple of 4");
    int half = dh / 2;
    int npair = half / 2;
    std::vector<float> freqs(static_cast<size_t>(npair));
    for (int i = 0; i < npair; ++i)
        freqs[size_t(i)] = std::pow(theta_base, -2.0f * float(i) / float(half));
#pragma omp parallel for schedule(static)
    for (int r = 0; r < rows; ++r) {
        if (!pos.apply[size_t(r)]) continue;
        float* row = x + int64_t(r) * d;
        for (int h = 0; h < n_heads; ++h) {
            float* hd = row + h * dh;
            for (int part = 0; part < 2; ++part) {
                float p = float(part == 0 ? pos.row[size_t(r)] : pos.col[size_t(r)]);
                float* seg = hd + part * half;
                for (int i = 0; i < npair; ++i) {
                    float ang = float(sign) * p * freqs[size_t(i)];
                    float c = std::cos(ang), s = std::sin(ang);
                    float x0 = seg[2 * i], x1 = seg[2 * i + 1];
                    seg[2 * i] = x0 * c - x1 * s;
                    seg[2 * i + 1] = x0 * s + x1 * c;
                }
            }
        }
    }
}

Ref Graph::rope2d(Ref x, std::shared_ptr<RopePos> pos, int n_heads, float theta_base) {
    const Tensor& xv = value(x);
    ARGEN_CHECK(xv.ndim() == 2, ShapeError, "rope2d: x must be 2D");
    Tensor out = xv;
    rope2d_apply(out.data(), out.size(0), out.size(1), *pos, n_heads, theta_base, +1);
    bool ng = needs_grad(x);
    int xi = x.idx;
    int i = push(std::move(out), ng, nullptr,
                 [xi, pos, n_heads, theta_base](Graph& g, const Tensor& go) {
                     Node& p = g.node(xi);
                     if (!p.needs_grad) return;
                     Tensor gi = go;
                     rope2d_apply(gi.data(), gi.size(0), gi.size(1), *pos, n_heads, theta_base, -1);
                     for (int64_t t = 0; t < gi.numel(); ++t) p.grad[t] += gi[t];
                 });
    return {this, i};
}

// ---- convolution ----

namespace {

void im2col(const float* img, int C, int H, int W, int kh, int kw, int stride, int pad, int OH,
            int OW, float* col) {
    // col is [C*kh*kw, OH*OW]
    for (int c = 0; c < C; ++c) {
        for (int di = 0; di < kh; ++di) {
            for (int dj = 0; dj < kw; ++dj) {
                float* dst = col + (size_t(c) * kh * kw + size_t(di) * kw + dj) * OH * OW;
                for (int oi = 0; oi < OH; ++oi) {
                    int ii = oi * stride + di - pad;
                    for (int oj = 0; oj < OW; ++oj) {
                        int jj = oj * stride + dj - pad;
                        dst[oi * OW + oj] = (ii >= 0 && ii < H && jj >= 0 && jj < W)
                                                ? img[(size_t(c) * H + ii) * W + jj]
                                                : 0.0f;
                    }
                }
            }
        }
    }
}

void col2im_acc(const float* col, int C, int H, int W, int kh, int kw, int stride, int pad, int OH,
                int OW, float* img) {
    for (int c = 0; c < C; ++c) {
        for (int di = 0; di < kh; ++di) {
            for (int dj = 0; dj < kw; ++dj) {
                const float* src = col + (size_t(c) * kh * kw + size_t(di) * kw + dj) * OH * OW;
                for (int oi = 0; oi < OH; ++oi) {
                    int ii = oi * stride + di - pad;
                    if (ii < 0 || ii >= H) continue;
                    for (int oj = 0; oj < OW; ++oj) {
                        int jj = oj * stride + dj - pad;
                        if (jj < 0 || jj >= W) continue;
                        img[(size_t(c) * H + ii) * W + jj] += src[oi * OW + oj];
                    }
                }
            }
        }
    }
}

}  // namespace

Ref Graph::conv2d(Ref x, Ref w, Ref b, int stride, int pad) {
    const Tensor& xv = value(x);
    const Tensor& wv = value(w);
    const Tensor& bv = value(b);
    ARGEN_CHECK(xv.ndim() == 4 && wv.ndim() == 4, ShapeError, "conv2d: x [B,C,H,W], w [OC,C,kh,kw]");
    int B = xv.size(0), C = xv.size(1), H = xv.size(2), W = xv.size(3);
    int OC = wv.size(0), kh = wv.size(2), kw = wv.size(3);
    ARGEN_CHECK(wv.size(1) == C, ShapeError, "conv2d: channel mismatch");
    ARGEN_CHECK(bv.numel() == OC, ShapeError, "conv2d: bias length mismatch");
    int OH = (H + 2 * pad - kh) / stride + 1;
    int OW = (W + 2 * pad - kw) / stride + 1;
    int CKK = C * kh * kw, P = OH * OW;
    Tensor out({B, OC, OH, OW});
    {
        std::vector<float> col(size_t(CKK) * P);
        for (int bi = 0; bi < B; ++bi) {
            im2col(xv.data() + int64_t(bi) * C * H * W, C, H, W, kh, kw, stride, pad, OH, OW,
                   col.data());
            float* y = out.data() + int64_t(bi) * OC * P;
            kernels::gemm_nn(y, wv.data(), col.data(), OC, CKK, P, false);
            for (int oc = 0; oc < OC; ++oc) {
                float bb = bv[oc];
                float* yy = y + int64_t(oc) * P;
                for (int p = 0; p < P; ++p) yy[p] += bb;
            }
        }
    }
    bool ng = any_grad({x, w, b});
    int xi = x.idx, wi = w.idx, bi2 = b.idx;
    int i = push(std::move(out), ng, nullptr,
                 [xi, wi, bi2, B, C, H, W, OC, kh, kw, stride, pad, OH, OW, CKK,
                  P](Graph& g, const Tensor& go) {
                     Node& px = g.node(xi);
                     Node& pw = g.node(wi);
                     Node& pb = g.node(bi2);
                     const Tensor& xv2 = g.node(xi).value;
                     const Tensor& wv2 = g.node(wi).value;
                     std::vector<float> col(size_t(CKK) * P);
                     std::vector<float> dcol(size_t(CKK) * P);
                     for (int b2 = 0; b2 < B; ++b2) {
                         const float* dy = go.data() + int64_t(b2) * OC * P;
                         if (pw.needs_grad || px.needs_grad)
                             im2col(xv2.data() + int64_t(b2) * C * H * W, C, H, W, kh, kw, stride,
                                    pad, OH, OW, col.data());
                         if (pw.needs_grad)
                             kernels::gemm_nt(pw.grad.data(), dy, col.data(), OC, P, CKK, true);
                         if (pb.needs_grad) {
                             for (int oc = 0; oc < OC; ++oc) {
                                 const float* dyy = dy + int64_t(oc) * P;
                                 double s = 0.0;
                                 for (int p = 0; p < P; ++p) s += dyy[p];
                                 pb.grad[oc] += float(s);
                             }
                         }
                         if (px.needs_grad) {
                             kernels::gemm_tn(dcol.data(), wv2.data(), dy, CKK, OC, P, false);
                             col2im_acc(dcol.data(), C, H, W, kh, kw, stride, pad, OH, OW,
                                        px.grad.data() + int64_t(b2) * C * H * W);
                         }
                     }
                 });
    return {this, i};
}

Ref Graph::upsample2x(Ref x) {
    const Tensor& xv = value(x);
    ARGEN_CHECK(xv.ndim() == 4, ShapeError, "upsample2x: x must be [B,C,H,W]");
    int B = xv.size(0), C = xv.size(1), H = xv.size(2), W = xv.size(3);
    Tensor out({B, C, 2 * H, 2 * W});
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c) {
            const float* src = xv.data() + (int64_t(b) * C + c) * H * W;
            float* dst = out.data() + (int64_t(b) * C + c) * 4 * H * W;
            for (int i = 0; i < H; ++i)
                for (int j = 0; j < W; ++j) {
                    float v = src[i * W + j];
                    dst[(2 * i) * 2 * W + 2 * j] = v;
                    dst[(2 * i) * 2 * W + 2 * j + 1] = v;
                    dst[(2 * i + 1) * 2 * W + 2 * j] = v;
                    dst[(2 * i + 1) * 2 * W + 2 * j + 1] = v;
                }
        }
    bool ng = needs_grad(x);
    int xi = x.idx;
    int i = push(std::move(out), ng, nullptr, [xi, B, C, H, W](Graph& g, const Tensor& go) {
        Node& p = g.node(xi);
        if (!p.needs_grad) return;
        for (int b = 0; b < B; ++b)
            for (int c = 0; c < C; ++c) {
                float* dst = p.grad.data() + (int64_t(b) * C + c) * H * W;
                const float* src = go.data() + (int64_t(b) * C + c) * 4 * H * W;
                for (int i2 = 0; i2 < H; ++i2)
                    for (int j = 0; j < W; ++j)
                        dst[i2 * W + j] += src[(2 * i2) * 2 * W + 2 * j] +
                                           src[(2 * i2) * 2 * W + 2 * j + 1] +
                                           src[(2 * i2 + 1) * 2 * W + 2 * j] +
                                           src[(2 * i2 + 1) * 2 * W + 2 * j + 1];
            }
    });
    return {this, i};
}

Ref Graph::chw_to_rows(Ref x) {
    const Tensor& xv = value(x);
    ARGEN_CHECK(xv.ndim() == 4, ShapeError, "chw_to_rows: x must be [B,C,H,W]");
    int B = xv.size(0), C = xv.size(1), H = xv.size(2), W = xv.size(3);
    Tensor out({B * H * W, C});
    for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c)
            for (int p = 0; p < H * W; ++p)
                out[(int64_t(b) * H * W + p) * C + c] = xv[(int64_t(b) * C + c) * H * W + p];
    bool ng = needs_grad(x);
    int xi = x.idx;
    int i = push(std::move(out), ng, nullptr, [xi, B, C, H, W](Graph& g, const Tensor& go) {
        Node& par = g.node(xi);
        if (!par.needs_grad) return;
        for (int b = 0; b < B; ++b)
            for (int c = 0; c < C; ++c)
                for (int p = 0; p < H * W; ++p)
                    par.grad[(int64_t(b) * C + c) * H * W + p] +=
                        go[(int64_t(b) * H * W + p) * C + c];
    });
    return {this, i};
}

Ref Graph::rows_to_chw(Ref x, int c, int h, int w) {
    const Tensor& xv = value(x);
    ARGEN_CHECK(xv.ndim() == 2 && xv.size(1) == c, ShapeError, "rows_to_chw: x must be [B*H*W,C]");
    ARGEN_CHECK(xv.size(0) % (h * w) == 0, ShapeError, "rows_to_chw: rows not divisible by H*W");
    int B = xv.size(0) / (h * w);
    Tensor out({B, c, h, w});
    for (int b = 0; b < B; ++b)
        for (int ch = 0; ch < c; ++ch)
            for (int p = 0; p < h * w; ++p)
                out[(int64_t(b) * c + ch) * h * w + p] = xv[(int64_t(b) * h * w + p) * c + ch];
    bool ng = needs_grad(x);
    int xi = x.idx;
    int i = push(std::move(out), ng, nullptr, [xi, B, c, h, w](Graph& g, const Tensor& go) {
        Node& par = g.node(xi);
        if (!par.needs_grad) return;
        for (int b = 0; b < B; ++b)
            for (int ch = 0; ch < c; ++ch)
                for (int p = 0; p < h * w; ++p)
                    par.grad[(int64_t(b) * h * w + p) * c + ch] +=
                        go[(int64_t(b) * c + ch) * h * w + p];
    });
    return {this, i};
}

// ---- vector quantization ----

int nearest_code(const float* v, const float* codes, int K, int d) {
    int best = 0;
    float best_d = 0.0f;
    for (int k = 0; k < K; ++k) {
        const float* c = codes + size_t(k) * d;
        float s = 0.0f;
        for (int j = 0; j < d; ++j) {
            float diff = v[j] - c[j];
            s += diff * diff;
        }
        if (k == 0 || s < best_d) {
            best_d = s;
            best = k;
        }
    }
    return best;
}

QuantizeResult Graph::quantize_st(Ref z, Ref codebook) {
    const Tensor& zv = value(z);
    const Tensor& cv = value(codebook);
    ARGEN_CHECK(zv.ndim() == 2 && cv.ndim() == 2, ShapeError, "quantize: 2D tensors required");
    ARGEN_CHECK(zv.size(1) == cv.size(1), ShapeError, "quantize: code dim mismatch");
    int m = zv.size(0), d = zv.size(1), K = cv.size(0);
    std::vector<int> idx(static_cast<size_t>(m));
    Tensor out({m, d});
#pragma omp parallel for schedule(static)
    for (int i = 0; i < m; ++i) {
        int k = nearest_code(zv.data() + int64_t(i) * d, cv.data(), K, d);
        idx[size_t(i)] = k;
        std::memcpy(out.data() + int64_t(i) * d, cv.data() + int64_t(k) * d,
                    size_t(d) * sizeof(float));
    }
    bool ng = needs_grad(z);
    int zi = z.idx;
    int i = push(std::move(out), ng, nullptr, [zi](Graph& g, const Tensor& go) {
        Node& p = g.node(zi);
        if (!p.needs_grad) return;
        for (int64_t t = 0; t < go.numel(); ++t) p.grad[t] += go[t];
    });
    return {Ref{this, i}, std::move(idx)};
}

Ref Graph::custom(const std::vector<Ref>& parents, Tensor value,
                  std::function<void(Graph&, const Tensor&)> backward, bool needs_grad) {
    bool ng = needs_grad && any_grad(parents);
    int i = push(std::move(value), ng, nullptr, std::move(backward));
    return {this, i};
}

}  // namespace argen
