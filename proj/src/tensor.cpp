#include "balab/tensor.hpp"

#include <cstring>
#include <sstream>

namespace balab {

const char* dtype_name(DType d) {
    switch (d) {
        case DType::f32: return "float32";
        case DType::f64: return "float64";
        case DType::i8: return "int8";
        case DType::i32: return "int32";
    }
    return "?";
}

std::string shape_str(const std::vector<int>& shape) {
    std::ostringstream os;
    os << "[";
    for (size_t i = 0; i < shape.size(); ++i) {
        if (i) os << "x";
        os << shape[i];
    }
    os << "]";
    return os.str();
}

namespace {

size_t checked_numel(const std::vector<int>& shape) {
    size_t n = 1;
    for (int e : shape) {
        if (e <= 0) throw DimensionError("tensor extents must be positive, got " + shape_str(shape));
        n *= static_cast<size_t>(e);
    }
    return n;
}

}  // namespace

Tensor Tensor::zeros(std::vector<int> shape, DType dt, bool requires_grad) {
    if (requires_grad && !is_float_dtype(dt))
        throw ContractError(std::string("requires_grad is only valid for float tensors, dtype is ") +
                            dtype_name(dt));
    Tensor t;
    t.impl_ = std::make_shared<detail::TensorImpl>();
    t.impl_->shape = std::move(shape);
    t.impl_->dtype = dt;
    t.impl_->requires_grad = requires_grad;
    t.impl_->traced = requires_grad;
    t.impl_->data.assign(checked_numel(t.impl_->shape) * dtype_size(dt), std::byte{0});
    return t;
}

Tensor Tensor::full(std::vector<int> shape, double value, DType dt) {
    Tensor t = zeros(std::move(shape), dt, false);
    const size_t n = t.numel();
    switch (dt) {
        case DType::f32: {
            auto s = t.mutable_data<float>();
            for (size_t i = 0; i < n; ++i) s[i] = static_cast<float>(value);
            break;
        }
        case DType::f64: {
            auto s = t.mutable_data<double>();
            for (size_t i = 0; i < n; ++i) s[i] = value;
            break;
        }
        case DType::i8: {
            auto s = t.mutable_data<int8_t>();
            for (size_t i = 0; i < n; ++i) s[i] = static_cast<int8_t>(value);
            break;
        }
        case DType::i32: {
            auto s = t.mutable_data<int32_t>();
            for (size_t i = 0; i < n; ++i) s[i] = static_cast<int32_t>(value);
            break;
        }
    }
    return t;
}

Tensor Tensor::scalar(double value, DType dt) { return full({1}, value, dt); }

Tensor Tensor::from_values(std::vector<int> shape, const std::vector<double>& values, DType dt,
                           bool requires_grad) {
    Tensor t = zeros(std::move(shape), dt, requires_grad);
    if (values.size() != t.numel())
        throw DimensionError("from_values: " + std::to_string(values.size()) + " values for shape " +
                             shape_str(t.shape()));
    switch (dt) {
        case DType::f32: {
            auto s = t.mutable_data<float>();
            for (size_t i = 0; i < values.size(); ++i) s[i] = static_cast<float>(values[i]);
            break;
        }
        case DType::f64: {
            auto s = t.mutable_data<double>();
            for (size_t i = 0; i < values.size(); ++i) s[i] = values[i];
            break;
        }
        case DType::i8: {
            auto s = t.mutable_data<int8_t>();
            for (size_t i = 0; i < values.size(); ++i) s[i] = static_cast<int8_t>(values[i]);
            break;
        }
        case DType::i32: {
            auto s = t.mutable_data<int32_t>();
            for (size_t i = 0; i < values.size(); ++i) s[i] = static_cast<int32_t>(values[i]);
            break;
        }
    }
    return t;
}

Tensor Tensor::from_i8(std::vector<int> shape, const std::vector<int8_t>& values) {
    Tensor t = zeros(std::move(shape), DType::i8, false);
    if (values.size() != t.numel())
        throw DimensionError("from_i8: value count does not match shape " + shape_str(t.shape()));
    std::memcpy(t.impl_->data.data(), values.data(), values.size());
    return t;
}

size_t Tensor::numel() const {
    size_t n = 1;
    for (int e : impl_->shape) n *= static_cast<size_t>(e);
    return n;
}

int Tensor::rows() const {
    if (ndim() != 2) throw DimensionError("rows() on non-matrix tensor " + shape_str(shape()));
    return impl_->shape[0];
}

int Tensor::cols() const {
    if (ndim() != 2) throw DimensionError("cols() on non-matrix tensor " + shape_str(shape()));
    return impl_->shape[1];
}

double Tensor::at(size_t flat_index) const {
    if (flat_index >= numel()) throw IndexError("tensor index out of range");
    switch (impl_->dtype) {
        case DType::f32: return reinterpret_cast<const float*>(impl_->data.data())[flat_index];
        case DType::f64: return reinterpret_cast<const double*>(impl_->data.data())[flat_index];
        case DType::i8: return reinterpret_cast<const int8_t*>(impl_->data.data())[flat_index];
        case DType::i32: return reinterpret_cast<const int32_t*>(impl_->data.data())[flat_index];
    }
    return 0.0;
}

double Tensor::at(int r, int c) const {
    return at(static_cast<size_t>(r) * static_cast<size_t>(cols()) + static_cast<size_t>(c));
}

double Tensor::item() const {
    if (numel() != 1) throw ContractError("item() requires a scalar tensor, shape is " + shape_str(shape()));
    return at(size_t{0});
}

void Tensor::ensure_grad() {
    if (!is_float_dtype(impl_->dtype)) throw ContractError("int tensors cannot carry gradients");
    if (impl_->grad.empty()) impl_->grad.assign(impl_->data.size(), std::byte{0});
}

void Tensor::zero_grad() {
    if (has_grad()) std::memset(impl_->grad.data(), 0, impl_->grad.size());
}

void Tensor::drop_grad() {
    if (impl_) impl_->grad.clear();
}

Tensor Tensor::grad_tensor() const {
    if (!has_grad()) throw ContractError("grad_tensor(): no grad buffer present");
    Tensor t = zeros(impl_->shape, impl_->dtype, false);
    std::memcpy(t.impl_->data.data(), impl_->grad.data(), impl_->grad.size());
    return t;
}

Tensor Tensor::clone(bool requires_grad) const {
    Tensor t = zeros(impl_->shape, impl_->dtype, requires_grad);
    std::memcpy(t.impl_->data.data(), impl_->data.data(), impl_->data.size());
    return t;
}

template <typename T>
void Tensor::check_access() const {
    if (!impl_) throw ContractError("access on undefined tensor");
    const DType want = std::is_same_v<T, float>    ? DType::f32
                       : std::is_same_v<T, double> ? DType::f64
                       : std::is_same_v<T, int8_t> ? DType::i8
                                                   : DType::i32;
    if (want != impl_->dtype)
        throw ContractError(std::string("tensor dtype is ") + dtype_name(impl_->dtype) +
                            ", accessed as " + dtype_name(want));
}

template void Tensor::check_access<float>() const;
template void Tensor::check_access<double>() const;
template void Tensor::check_access<int8_t>() const;
template void Tensor::check_access<int32_t>() const;

bool bitwise_equal(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape() || a.dtype() != b.dtype()) return false;
    const auto ab = a.raw_bytes();
    const auto bb = b.raw_bytes();
    return ab.size() == bb.size() && std::memcmp(ab.data(), bb.data(), ab.size()) == 0;
}

void Graph::backward(const Tensor& loss) {
    if (!loss.defined() || loss.numel() != 1)
        throw ContractError("backward: loss must be a scalar tensor");
    if (!loss.traced()) throw ContractError("backward: loss is not recorded on any graph");
    Tensor seed = loss;
    seed.ensure_grad();
    if (seed.dtype() == DType::f32)
        seed.grad<float>()[0] += 1.0f;
    else
        seed.grad<double>()[0] += 1.0;
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
        if (it->output.has_grad()) it->backward();
    }
}

}  // namespace balab
