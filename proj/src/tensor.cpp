#include "fbprop/tensor.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

namespace fbprop {

std::size_t shape_product(const std::vector<std::size_t>& shape) {
    std::size_t n = 1;
    for (std::size_t e : shape) n *= e;
    return n;
}

std::string shape_to_string(const std::vector<std::size_t>& shape) {
    std::string s = "[";
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) s += ",";
        s += std::to_string(shape[i]);
    }
    return s + "]";
}

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> values)
    : shape_(std::move(shape)), data_(std::move(values)) {
    if (shape_.empty()) throw ShapeError("tensor shape must have rank >= 1");
    for (std::size_t e : shape_) {
        if (e == 0) throw ShapeError("tensor extents must be >= 1");
    }
    if (data_.size() != shape_product(shape_)) {
        throw ShapeError("value count " + std::to_string(data_.size()) +
                         " does not match shape " + shape_to_string(shape_));
    }
}

Tensor Tensor::zeros(std::vector<std::size_t> shape) {
    std::size_t n = shape_product(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0));
}

Tensor Tensor::scalar(double v) { return Tensor({1}, {v}); }

double Tensor::at(const std::vector<std::size_t>& index) const {
    if (index.size() != shape_.size())
        throw ShapeError("index rank does not match tensor rank");
    std::size_t flat = 0;
    for (std::size_t d = 0; d < shape_.size(); ++d) {
        if (index[d] >= shape_[d]) throw ShapeError("index out of range");
        flat = flat * shape_[d] + index[d];
    }
    return data_[flat];
}

bool Tensor::equals(const Tensor& other) const {
    if (shape_ != other.shape_) return false;
    return std::memcmp(data_.data(), other.data_.data(),
                       data_.size() * sizeof(double)) == 0;
}

bool Tensor::all_finite() const {
    for (double v : data_)
        if (!std::isfinite(v)) return false;
    return true;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.rank() != 2 || b.rank() != 2)
        throw ShapeError("matmul expects rank-2 tensors");
    const std::size_t m = a.shape()[0], k = a.shape()[1];
    const std::size_t k2 = b.shape()[0], n = b.shape()[1];
    if (k != k2)
        throw ShapeError("matmul inner dimensions " + std::to_string(k) +
                         " and " + std::to_string(k2) + " differ");
    Tensor out = Tensor::zeros({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (std::size_t p = 0; p < k; ++p)
                acc += a[i * k + p] * b[p * n + j];
            out[i * n + j] = acc;
        }
    }
    return out;
}

std::size_t conv_out_extent(std::size_t in, std::size_t k, std::size_t stride,
                            std::size_t pad) {
    if (stride == 0) throw ShapeError("conv stride must be positive");
    if (in + 2 * pad < k)
        throw ShapeError("conv kernel larger than padded input");
    std::size_t span = in + 2 * pad - k;
    if (span % stride != 0)
        throw ShapeError("conv output extent is not integral (in=" +
                         std::to_string(in) + " k=" + std::to_string(k) +
                         " stride=" + std::to_string(stride) +
                         " pad=" + std::to_string(pad) + ")");
    return span / stride + 1;
}

Tensor conv2d(const Tensor& input, const Tensor& kernels, std::size_t stride,
              std::size_t pad) {
    if (input.rank() != 3) throw ShapeError("conv2d input must be [C,H,W]");
    if (kernels.rank() != 4)
        throw ShapeError("conv2d kernels must be [C_out,C_in,kH,kW]");
    const std::size_t ci = input.shape()[0], h = input.shape()[1],
                      w = input.shape()[2];
    const std::size_t co = kernels.shape()[0], ci2 = kernels.shape()[1],
                      kh = kernels.shape()[2], kw = kernels.shape()[3];
    if (ci != ci2)
        throw ShapeError("conv2d channel mismatch: input has " +
                         std::to_string(ci) + ", kernels expect " +
                         std::to_string(ci2));
    const std::size_t oh = conv_out_extent(h, kh, stride, pad);
    const std::size_t ow = conv_out_extent(w, kw, stride, pad);

    Tensor out = Tensor::zeros({co, oh, ow});
    const double* x = input.data().data();
    const double* ker = kernels.data().data();
    double* y = out.data().data();
    for (std::size_t oc = 0; oc < co; ++oc) {
        for (std::size_t oy = 0; oy < oh; ++oy) {
            for (std::size_t ox = 0; ox < ow; ++ox) {
                double acc = 0.0;
                for (std::size_t ic = 0; ic < ci; ++ic) {
                    for (std::size_t ky = 0; ky < kh; ++ky) {
                        const std::ptrdiff_t iy =
                            static_cast<std::ptrdiff_t>(oy * stride + ky) -
                            static_cast<std::ptrdiff_t>(pad);
                        if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h))
                            continue;
                        for (std::size_t kx = 0; kx < kw; ++kx) {
                            const std::ptrdiff_t ix =
                                static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                static_cast<std::ptrdiff_t>(pad);
                            if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w))
                                continue;
                            acc += x[(ic * h + iy) * w + ix] *
                                   ker[((oc * ci + ic) * kh + ky) * kw + kx];
                        }
                    }
                }
                y[(oc * oh + oy) * ow + ox] = acc;
            }
        }
    }
    return out;
}

double sigmoid(double x) { return 1.0 / (1.0 + std::exp(-x)); }

Tensor activation(const Tensor& x, Activation kind) {
    Tensor out = x;
    for (double& v : out.data()) {
        v = (kind == Activation::Relu) ? (v > 0.0 ? v : 0.0) : sigmoid(v);
    }
    return out;
}

Tensor reduce(const Tensor& x, Reduction kind) {
    double acc = 0.0;
    for (double v : x.data()) acc += v;
    if (kind == Reduction::Mean) acc /= static_cast<double>(x.size());
    return Tensor::scalar(acc);
}

Tensor add(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) throw ShapeError("add: shapes differ");
    Tensor out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
    if (!a.same_shape(b)) throw ShapeError("sub: shapes differ");
    Tensor out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b[i];
    return out;
}

Tensor scale(const Tensor& a, double s) {
    Tensor out = a;
    for (double& v : out.data()) v *= s;
    return out;
}

namespace {

void put_u32_le(std::ostream& out, std::uint32_t v) {
    char b[4] = {static_cast<char>(v & 0xff), static_cast<char>((v >> 8) & 0xff),
                 static_cast<char>((v >> 16) & 0xff),
                 static_cast<char>((v >> 24) & 0xff)};
    out.write(b, 4);
}

std::uint32_t get_u32_le(std::istream& in) {
    unsigned char b[4];
    in.read(reinterpret_cast<char*>(b), 4);
    if (!in) throw IoError("corrupt tensor: truncated extent");
    return static_cast<std::uint32_t>(b[0]) |
           (static_cast<std::uint32_t>(b[1]) << 8) |
           (static_cast<std::uint32_t>(b[2]) << 16) |
           (static_cast<std::uint32_t>(b[3]) << 24);
}

} // namespace

void write_tensor(std::ostream& out, const Tensor& t) {
    out.write(kTensorMagic, 4);
    char version = static_cast<char>(kTensorFormatVersion);
    out.write(&version, 1);
    char rank = static_cast<char>(t.rank());
    out.write(&rank, 1);
    for (std::size_t e : t.shape()) put_u32_le(out, static_cast<std::uint32_t>(e));
    // f64 little-endian payload; assumes LE host, as the rest of the project.
    out.write(reinterpret_cast<const char*>(t.data().data()),
              static_cast<std::streamsize>(t.size() * sizeof(double)));
    if (!out) throw IoError("failed writing tensor");
}

Tensor read_tensor(std::istream& in) {
    char magic[4];
    in.read(magic, 4);
    if (!in || std::memcmp(magic, kTensorMagic, 4) != 0)
        throw IoError("corrupt tensor: bad magic");
    char version = 0;
    in.read(&version, 1);
    if (!in) throw IoError("corrupt tensor: missing version");
    if (static_cast<std::uint8_t>(version) != kTensorFormatVersion)
        throw IoError("unsupported tensor format version " +
                      std::to_string(static_cast<int>(version)));
    char rank_c = 0;
    in.read(&rank_c, 1);
    if (!in) throw IoError("corrupt tensor: missing rank");
    const std::size_t rank = static_cast<std::uint8_t>(rank_c);
    if (rank == 0) throw IoError("corrupt tensor: rank 0");
    std::vector<std::size_t> shape(rank);
    for (std::size_t d = 0; d < rank; ++d) shape[d] = get_u32_le(in);
    std::size_t n = shape_product(shape);
    std::vector<double> values(n);
    in.read(reinterpret_cast<char*>(values.data()),
            static_cast<std::streamsize>(n * sizeof(double)));
    if (!in) throw IoError("corrupt tensor: truncated payload");
    return Tensor(std::move(shape), std::move(values));
}

std::uint64_t tensor_checksum(const Tensor& t) {
    std::uint64_t h = 1469598103934665603ull;
    auto mix = [&h](const void* p, std::size_t n) {
        const unsigned char* b = static_cast<const unsigned char*>(p);
        for (std::size_t i = 0; i < n; ++i) {
            h ^= b[i];
            h *= 1099511628211ull;
        }
    };
    for (std::size_t e : t.shape()) {
        std::uint64_t e64 = e;
        mix(&e64, sizeof(e64));
    }
    mix(t.data().data(), t.size() * sizeof(double));
    return h;
}

void write_tensor(const Tensor& t, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out)
        throw IoError("cannot open " + path + " for writing");
    write_tensor(out, t);
    if (!out)
        throw IoError("failed while writing " + path);
}

Tensor read_tensor(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in)
        throw IoError("cannot open " + path);
    return read_tensor(in);
}

} // namespace fbprop
