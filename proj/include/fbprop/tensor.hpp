#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "fbprop/error.hpp"

namespace fbprop {

// Dense n-dimensional array of doubles, row-major. Tensors are plain values:
// copy to share, never mutated in place by library code once handed out.
class Tensor {
public:
    Tensor() = default;

    Tensor(std::vector<std::size_t> shape, std::vector<double> values);

    // All-zero tensor of the given shape.
    static Tensor zeros(std::vector<std::size_t> shape);

    // Scalar as shape [1].
    static Tensor scalar(double v);

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_.size(); }

    const std::vector<double>& data() const { return data_; }
    std::vector<double>& data() { return data_; }

    double operator[](std::size_t i) const { return data_[i]; }
    double& operator[](std::size_t i) { return data_[i]; }

    // Row-major element access by multi-index.
    double at(const std::vector<std::size_t>& index) const;

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

    // Bitwise equality of shape and payload.
    bool equals(const Tensor& other) const;

    bool all_finite() const;

private:
    std::vector<std::size_t> shape_;
    std::vector<double> data_;
};

std::size_t shape_product(const std::vector<std::size_t>& shape);
std::string shape_to_string(const std::vector<std::size_t>& shape);

// a: m x k, b: k x n -> m x n. Fixed left-to-right summation over k.
Tensor matmul(const Tensor& a, const Tensor& b);

// Direct cross-correlation with zero padding, no kernel flip.
// input: [C_in, H, W], kernels: [C_out, C_in, kH, kW] -> [C_out, H', W'].
Tensor conv2d(const Tensor& input, const Tensor& kernels, std::size_t stride,
              std::size_t pad);

// Output spatial extent, throws ShapeError when not integral.
std::size_t conv_out_extent(std::size_t in, std::size_t k, std::size_t stride,
                            std::size_t pad);

enum class Activation { Relu, Sigmoid };

Tensor activation(const Tensor& x, Activation kind);

double sigmoid(double x);

enum class Reduction { Sum, Mean };

// Reduce all elements in storage order to a scalar tensor.
Tensor reduce(const Tensor& x, Reduction kind);

// Elementwise helpers used by optimizers and residual injection.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);

// FBPT binary tensor format:
//   magic "FBPT", version byte 1, rank u8, extents u32 LE, payload f64 LE.
inline constexpr char kTensorMagic[4] = {'F', 'B', 'P', 'T'};
inline constexpr std::uint8_t kTensorFormatVersion = 1;

void write_tensor(std::ostream& out, const Tensor& t);
Tensor read_tensor(std::istream& in);
void write_tensor(const Tensor& t, const std::string& path);
Tensor read_tensor(const std::string& path);

// FNV-1a over shape and raw payload bytes; used for immutability checks.
std::uint64_t tensor_checksum(const Tensor& t);

} // namespace fbprop
