#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "balab/errors.hpp"

namespace balab {

enum class DType : uint8_t { f32 = 0, f64 = 1, i8 = 2, i32 = 3 };

constexpr size_t dtype_size(DType d) {
    switch (d) {
        case DType::f32: return 4;
        case DType::f64: return 8;
        case DType::i8: return 1;
        case DType::i32: return 4;
    }
    return 0;
}

constexpr bool is_float_dtype(DType d) { return d == DType::f32 || d == DType::f64; }

const char* dtype_name(DType d);

std::string shape_str(const std::vector<int>& shape);

namespace detail {

struct TensorImpl {
    std::vector<int> shape;
    DType dtype = DType::f32;
    bool requires_grad = false;
    bool traced = false;  // participates in gradient flow (leaf flag or op-produced)
    std::vector<std::byte> data;
    std::vector<std::byte> grad;  // empty until backward touches this tensor
};

}  // namespace detail

// Dense row-major tensor. Value-semantic handle over a shared payload:
// copies alias the same storage. Payloads are treated as immutable once an
// op has consumed them; only grad buffers mutate during backward.
class Tensor {
  public:
    Tensor() = default;

    static Tensor zeros(std::vector<int> shape, DType dt, bool requires_grad = false);
    static Tensor full(std::vector<int> shape, double value, DType dt);
    static Tensor scalar(double value, DType dt);
    // values converted elementwise into dt
    static Tensor from_values(std::vector<int> shape, const std::vector<double>& values, DType dt,
                              bool requires_grad = false);
    static Tensor from_i8(std::vector<int> shape, const std::vector<int8_t>& values);

    bool defined() const { return impl_ != nullptr; }
    const std::vector<int>& shape() const { return impl_->shape; }
    int ndim() const { return static_cast<int>(impl_->shape.size()); }
    int dim(int i) const { return impl_->shape[static_cast<size_t>(i)]; }
    size_t numel() const;
    int rows() const;  // 2-d only
    int cols() const;
    DType dtype() const { return impl_->dtype; }
    bool requires_grad() const { return impl_->requires_grad; }
    bool traced() const { return impl_ && impl_->traced; }
    void set_traced() { impl_->traced = true; }
    // promote to a gradient leaf (trainable parameter)
    void mark_leaf() {
        if (!is_float_dtype(impl_->dtype)) throw ContractError("int tensors cannot be gradient leaves");
        impl_->requires_grad = true;
        impl_->traced = true;
    }

    template <typename T>
    std::span<const T> data() const {
        check_access<T>();
        return {reinterpret_cast<const T*>(impl_->data.data()), numel()};
    }
    template <typename T>
    std::span<T> mutable_data() {
        check_access<T>();
        return {reinterpret_cast<T*>(impl_->data.data()), numel()};
    }
    std::span<const std::byte> raw_bytes() const { return impl_->data; }
    std::span<std::byte> mutable_raw_bytes() { return impl_->data; }

    // element read as double, any dtype
    double at(size_t flat_index) const;
    double at(int r, int c) const;
    double item() const;  // scalar tensors

    // grad buffer management
    bool has_grad() const { return impl_ && !impl_->grad.empty(); }
    void ensure_grad();   // allocate zero-filled buffer if absent
    void zero_grad();     // zero in place if allocated
    void drop_grad();
    template <typename T>
    std::span<T> grad() {
        check_access<T>();
        if (!has_grad()) throw ContractError("tensor has no grad buffer");
        return {reinterpret_cast<T*>(impl_->grad.data()), numel()};
    }
    template <typename T>
    std::span<const T> grad() const {
        check_access<T>();
        if (!has_grad()) throw ContractError("tensor has no grad buffer");
        return {reinterpret_cast<const T*>(impl_->grad.data()), numel()};
    }
    // grad copied out as a plain tensor (no grad flags)
    Tensor grad_tensor() const;

    Tensor clone(bool requires_grad = false) const;

    bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

  private:
    template <typename T>
    void check_access() const;

    std::shared_ptr<detail::TensorImpl> impl_;
};

bool bitwise_equal(const Tensor& a, const Tensor& b);

struct GraphNode {
    Tensor output;
    std::function<void()> backward;
    const char* op = "";
};

// Append-only tape of recorded operations. Confined to one thread.
// Backward walks nodes in strict reverse append order; a node fires only if
// something downstream deposited a gradient on its output.
class Graph {
  public:
    bool enabled = true;

    void record(Tensor output, std::function<void()> backward_fn, const char* op) {
        nodes_.push_back(GraphNode{std::move(output), std::move(backward_fn), op});
    }

    void backward(const Tensor& loss);

    size_t size() const { return nodes_.size(); }
    const GraphNode& node(size_t i) const { return nodes_[i]; }
    void clear() { nodes_.clear(); }

  private:
    std::vector<GraphNode> nodes_;
};

}  // namespace balab
