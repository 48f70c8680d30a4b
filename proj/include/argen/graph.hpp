#pragma once

#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "argen/tensor.hpp"

namespace argen {

// Trainable leaf. Gradients accumulate across graph runs until zeroed.
struct Parameter {
    std::string name;
    Tensor value;
    Tensor grad;
    bool trainable = true;

    Parameter(std::string n, Tensor v) : name(std::move(n)), value(std::move(v)) {
        grad = Tensor::zeros(value.shape());
    }
    void zero_grad() { grad.fill(0.0f); }
};

// Owns parameters with stable addresses; iteration order is insertion order.
// version() changes whenever parameter values are updated in place, so
// consumers that precompute from the weights can detect staleness.
class ParamStore {
public:
    Parameter& add(const std::string& name, Tensor init);
    Parameter* find(const std::string& name);
    const Parameter* find(const std::string& name) const;
    const std::vector<std::unique_ptr<Parameter>>& all() const { return params_; }
    void zero_grad();
    int64_t total_size() const;
    uint64_t version() const { return version_; }
    void bump_version() { ++version_; }

private:
    std::vector<std::unique_ptr<Parameter>> params_;
    uint64_t version_ = 0;
};

class Graph;

struct Ref {
    Graph* g = nullptr;
    int idx = -1;
    bool valid() const { return g != nullptr && idx >= 0; }
    const Tensor& val() const;
};

// Row-level attention visibility: allow(b, query_row, key_row).
struct AttnMask {
    int B = 0, T = 0;
    std::vector<uint8_t> allow;

    AttnMask() = default;
    AttnMask(int b, int t) : B(b), T(t), allow(size_t(b) * t * t, 0) {}
    uint8_t at(int b, int i, int j) const { return allow[(size_t(b) * T + i) * T + j]; }
    void set(int b, int i, int j, bool v) { allow[(size_t(b) * T + i) * T + j] = v ? 1 : 0; }
};

// Rectangular visibility for cross-attention: allow(b, query_row, key_row).
struct CrossMask {
    int B = 0, Tq = 0, Tk = 0;
    std::vector<uint8_t> allow;

    CrossMask() = default;
    CrossMask(int b, int tq, int tk) : B(b), Tq(tq), Tk(tk), allow(size_t(b) * tq * tk, 0) {}
    uint8_t at(int b, int i, int j) const { return allow[(size_t(b) * Tq + i) * Tk + j]; }
    void set(int b, int i, int j, bool v) { allow[(size_t(b) * Tq + i) * Tk + j] = v ? 1 : 0; }
};

// Per-row rotary position: rows with apply=0 pass through unrotated.
struct RopePos {
    std::vector<int> row, col;
    std::vector<uint8_t> apply;
    void push(int r, int c, bool a) {
        row.push_back(r);
        col.push_back(c);
        apply.push_back(a ? 1 : 0);
    }
    size_t size() const { return row.size(); }
};

struct QuantizeResult {
    Ref out;
    std::vector<int> indices;
};

// Tape of operations. Nodes are appended in execution order, so the reverse
// of creation order is a valid backward order. One Graph instance per step.
class Graph {
public:
    Graph() = default;
    Graph(const Graph&) = delete;
    Graph& operator=(const Graph&) = delete;

    Ref input(Tensor v, bool needs_grad = false);
    Ref param(Parameter& p);

    Ref add(Ref a, Ref b);
    Ref sub(Ref a, Ref b);
    Ref mul(Ref a, Ref b);
    Ref scale(Ref a, float s);
    Ref add_bias(Ref x, Ref b);                 // [m,n] + [n]
    Ref matmul(Ref a, Ref b);                   // [m,k]x[k,n]
    Ref matmul_nt(Ref a, Ref b);                // [m,k]x[n,k]^T -> [m,n]
    Ref silu(Ref x);
    Ref gelu(Ref x);
    Ref sigmoid(Ref x);
    Ref layernorm(Ref x, Ref gamma, Ref beta, float eps = 1e-5f);
    Ref softmax_rows(Ref x);
    Ref normalize_rows(Ref x, float eps = 1e-6f);
    Ref embedding(Ref table, std::vector<int> ids);
    Ref gather_rows(Ref x, std::vector<int> ids);
    Ref slice_rows(Ref x, int r0, int r1);
    Ref concat_rows(const std::vector<Ref>& parts);
    Ref reshape(Ref x, std::vector<int> shape);
    Ref detach(Ref x);
    Ref mean_rows(Ref x);                       // [m,n] -> [1,n]
    Ref sum_all(Ref x);                         // -> [1]
    Ref weighted_sum(const std::vector<Ref>& scalars, const std::vector<float>& coeffs);

    // ids[i] < 0 marks an ignored row; weights scale each row's loss.
    // mean=true divides by the sum of weights of counted rows.
    Ref cross_entropy(Ref logits, std::vector<int> ids, std::vector<float> weights, bool mean);
    Ref mse(Ref a, Ref b);

    Ref attention(Ref q, Ref k, Ref v, std::shared_ptr<AttnMask> mask, int n_heads);
    // q has B*Tq rows, k/v have B*Tk rows; output has B*Tq rows.
    Ref cross_attention(Ref q, Ref k, Ref v, std::shared_ptr<CrossMask> mask, int n_heads);
    Ref rope2d(Ref x, std::shared_ptr<RopePos> pos, int n_heads, float theta_base = 10000.0f);

    Ref conv2d(Ref x, Ref w, Ref b, int stride, int pad);  // x [B,C,H,W], w [OC,C,kh,kw]
    Ref upsample2x(Ref x);
    Ref chw_to_rows(Ref x);                      // [B,C,H,W] -> [B*H*W, C]
    Ref rows_to_chw(Ref x, int c, int h, int w); // inverse of chw_to_rows
    Ref patchify(Ref x, int p);                  // [B,C,H,W] -> [B*(H/p)*(W/p), C*p*p]

    QuantizeResult quantize_st(Ref z, Ref codebook);

    // Escape hatch for tests and one-off ops: `backward(grad_out)` must
    // accumulate into the parents' grad tensors itself.
    Ref custom(const std::vector<Ref>& parents, Tensor value,
               std::function<void(Graph&, const Tensor&)> backward, bool needs_grad);

    void backward(Ref loss);

    const Tensor& value(Ref r) const;
    Tensor& grad(Ref r);
    bool needs_grad(Ref r) const;
    size_t node_count() const { return nodes_.size(); }

private:
    struct Node {
        Tensor value;
        Tensor grad;
        bool needs_grad = false;
        Parameter* leaf = nullptr;
        std::function<void(Graph&, const Tensor&)> backward;
    };

    int push(Tensor value, bool needs_grad, Parameter* leaf,
             std::function<void(Graph&, const Tensor&)> bw);
    Node& node(int i) { return nodes_[size_t(i)]; }
    bool any_grad(const std::vector<Ref>& rs) const;

    std::vector<Node> nodes_;
};

// Applies rotary position rotation in place on raw data; shared by the graph
// op and by incremental decoding. sign=-1 applies the inverse rotation.
void rope2d_apply(float* x, int rows, int d, const RopePos& pos, int n_heads, float theta_base,
                  int sign);

// Nearest code by squared L2, ties to the lowest index. Serial scan order
// matches the brute-force oracle exactly.
int nearest_code(const float* v, const float* codes, int K, int d);

}  // namespace argen
