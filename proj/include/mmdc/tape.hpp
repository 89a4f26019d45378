#pragma once

#include <deque>
#include <functional>
#include <vector>

#include "mmdc/ndarray.hpp"

namespace mmdc {

// Reverse-mode tape over NdArrays. Ops append nodes in topological order;
// backward() sweeps once in reverse and accumulates into bound parameters'
// grad slots. A tape built with grad_enabled=false records nothing and
// only computes values.
//
// Shapes are strict: no broadcasting except scalar-with-tensor (scale) and
// the explicitly named row/batch broadcasts (add_rows, affine_mod, gate).
class Tape {
public:
    using Id = int;

    explicit Tape(bool grad_enabled = true) : grad_enabled_(grad_enabled) {}

    bool grad_enabled() const { return grad_enabled_; }
    int size() const { return static_cast<int>(nodes_.size()); }

    Id leaf(NdArray value, bool needs_grad = false);
    // Binds an external parameter: value is copied in, grads flow back into
    // p->grad on backward() when trainable.
    Id param(NdArray* p, bool trainable = true);

    // elementwise, same shape
    Id add(Id a, Id b);
    Id sub(Id a, Id b);
    Id mul(Id a, Id b);
    Id scale(Id a, float c);
    Id gelu(Id a);

    // linear algebra
    Id matmul(Id a, Id b);                    // [M,K]·[K,N]
    Id linear(Id x, Id w, Id b = -1);         // x[...,K]·w[K,N] (+ row bias)
    Id bmm_nt(Id a, Id b);                    // [G,M,K]·[G,N,K]ᵀ → [G,M,N]
    Id bmm_nn(Id a, Id b);                    // [G,M,K]·[G,K,N] → [G,M,N]

    // rowwise (last dim)
    Id softmax(Id a);
    Id layernorm(Id a, float eps = 1e-5f);

    // structure
    Id concat(Id a, Id b, int axis);
    std::vector<Id> split(Id a, int axis, const std::vector<int>& sizes);
    Id reshape(Id a, Shape s);
    Id split_heads(Id x, int heads);          // [B,S,D] → [B*h,S,D/h]
    Id merge_heads(Id x, int heads);          // [B*h,S,D/h] → [B,S,D]
    Id patchify(Id img, int patch);           // [B,C,H,W] → [B,P,C*p*p]
    Id unpatchify(Id tok, int channels, int image_size, int patch);

    // broadcasts
    Id add_rows(Id x, Id rows);               // [B,S,D] + [S,D]
    Id affine_mod(Id x, Id scale, Id shift);  // [B,S,D] ⊙ (1+[B,D]) + [B,D]
    Id gate(Id x, Id g);                      // [B,S,D] ⊙ [B,D]

    // lookups / reductions
    Id embed(Id table, const std::vector<int>& ids, int batch, int seq);
    Id mean_all(Id a);
    Id sum_all(Id a);
    Id mse(Id a, Id b);

    void backward(Id loss);

    const NdArray& val(Id id) const { return nodes_[static_cast<size_t>(id)].val; }
    // Grad of a node after backward(); empty vector when none flowed.
    const std::vector<float>& grad(Id id) const { return nodes_[static_cast<size_t>(id)].grad; }

private:
    struct Node {
        NdArray val;
        std::vector<float> grad;
        bool needs = false;
        const char* op = "leaf";
        std::function<void(Tape&)> back;  // empty for leaves
    };
    struct Binding {
        NdArray* target;
        Id node;
    };

    Node& node(Id id) { return nodes_[static_cast<size_t>(id)]; }
    Id push(NdArray value, const char* op, std::initializer_list<Id> parents,
            std::function<void(Tape&)> back);
    float* grad_buf(Id id);
    bool needs(Id id) const { return nodes_[static_cast<size_t>(id)].needs; }
    const float* data(Id id) const { return nodes_[static_cast<size_t>(id)].val.data.data(); }

    std::deque<Node> nodes_;
    std::vector<Binding> bindings_;
    bool grad_enabled_;
    bool backward_done_ = false;
};

}  // namespace mmdc
