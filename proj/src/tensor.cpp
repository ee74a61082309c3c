#include "fusedopt/tensor.hpp"

#include <cmath>
#include <numeric>
#include <sstream>

namespace fusedopt {

namespace {

std::size_t checked_size(const Shape& shape) {
    if (shape.empty()) throw TensorError("tensor shape must be non-empty");
    std::size_t n = 1;
    for (std::size_t d : shape) {
        if (d == 0) throw TensorError("tensor dimensions must be >= 1");
        n *= d;
    }
    return n;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (!a.same_shape(b)) {
        throw TensorError(std::string(op) + ": shape mismatch " + a.shape_str() + " vs " +
                          b.shape_str());
    }
}

void require_2d(const Tensor& a, const char* op) {
    if (a.rank() != 2) {
        throw TensorError(std::string(op) + ": expected 2-D tensor, got rank " +
                          std::to_string(a.rank()));
    }
}

template <typename F>
Tensor zip(const Tensor& a, const Tensor& b, const char* op, F f) {
    require_same_shape(a, b, op);
    Tensor out(a.shape(), a.precision());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i], b[i]);
    return out;
}

template <typename F>
Tensor map(const Tensor& a, F f) {
    Tensor out(a.shape(), a.precision());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = f(a[i]);
    return out;
}

}  // namespace

Tensor::Tensor(Shape shape, Precision prec)
    : shape_(std::move(shape)), data_(checked_size(shape_), 0.0), prec_(prec) {}

Tensor::Tensor(Shape shape, std::vector<double> data, Precision prec)
    : shape_(std::move(shape)), data_(std::move(data)), prec_(prec) {
    if (checked_size(shape_) != data_.size()) {
        throw TensorError("tensor data length " + std::to_string(data_.size()) +
                          " does not match shape " + shape_str());
    }
}

Tensor Tensor::zeros(Shape shape, Precision prec) { return Tensor(std::move(shape), prec); }

Tensor Tensor::full(Shape shape, double value, Precision prec) {
    Tensor t(std::move(shape), prec);
    for (std::size_t i = 0; i < t.size(); ++i) t[i] = value;
    return t;
}

Tensor Tensor::scalar(double value, Precision prec) {
    return Tensor({1}, {value}, prec);
}

Tensor Tensor::vector(std::vector<double> values, Precision prec) {
    std::size_t n = values.size();
    return Tensor({n}, std::move(values), prec);
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> values,
                      Precision prec) {
    return Tensor({rows, cols}, std::move(values), prec);
}

std::size_t Tensor::rows() const {
    require_2d(*this, "rows");
    return shape_[0];
}

std::size_t Tensor::cols() const {
    require_2d(*this, "cols");
    return shape_[1];
}

double& Tensor::at(std::size_t r, std::size_t c) {
    require_2d(*this, "at");
    if (r >= shape_[0] || c >= shape_[1]) throw TensorError("at: index out of range");
    return data_[r * shape_[1] + c];
}

double Tensor::at(std::size_t r, std::size_t c) const {
    return const_cast<Tensor*>(this)->at(r, c);
}

std::string Tensor::shape_str() const {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < shape_.size(); ++i) {
        if (i) os << "x";
        os << shape_[i];
    }
    os << "]";
    return os.str();
}

Tensor add(const Tensor& a, const Tensor& b) {
    return zip(a, b, "add", [](double x, double y) { return x + y; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return zip(a, b, "sub", [](double x, double y) { return x - y; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return zip(a, b, "mul", [](double x, double y) { return x * y; });
}

Tensor div(const Tensor& a, const Tensor& b) {
    require_same_shape(a, b, "div");
    Tensor out(a.shape(), a.precision());
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (b[i] == 0.0) {
            throw TensorError("div: division by zero element at index " + std::to_string(i));
        }
        out[i] = a[i] / b[i];
    }
    return out;
}

Tensor max_elem(const Tensor& a, const Tensor& b) {
    return zip(a, b, "max", [](double x, double y) { return x > y ? x : y; });
}

Tensor square(const Tensor& a) {
    return map(a, [](double x) { return x * x; });
}

Tensor sqrt_map(const Tensor& a) {
    return map(a, [](double x) { return std::sqrt(x); });
}

Tensor exp_map(const Tensor& a) {
    return map(a, [](double x) { return std::exp(x); });
}

Tensor scale(const Tensor& a, double k) {
    return map(a, [k](double x) { return k * x; });
}

Tensor add_scalar(const Tensor& a, double k) {
    return map(a, [k](double x) { return x + k; });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_2d(a, "matmul");
    require_2d(b, "matmul");
    const std::size_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    if (b.dim(0) != k) {
        throw TensorError("matmul: inner dimension mismatch " + a.shape_str() + " x " +
                          b.shape_str());
    }
    Tensor out({m, n}, a.precision());
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    double* pc = out.data().data();
    // i-k-j order keeps the inner loop contiguous in b and c.
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t kk = 0; kk < k; ++kk) {
            const double aik = pa[i * k + kk];
            const double* brow = pb + kk * n;
            double* crow = pc + i * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += aik * brow[j];
        }
    }
    return out;
}

Tensor transpose(const Tensor& a) {
    require_2d(a, "transpose");
    const std::size_t m = a.dim(0), n = a.dim(1);
    Tensor out({n, m}, a.precision());
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a[i * n + j];
    return out;
}

Tensor row_sums(const Tensor& a) {
    require_2d(a, "row_sums");
    const std::size_t m = a.dim(0), n = a.dim(1);
    Tensor out({m, 1}, a.precision());
    for (std::size_t i = 0; i < m; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < n; ++j) s += a[i * n + j];
        out[i] = s;
    }
    return out;
}

Tensor col_sums(const Tensor& a) {
    require_2d(a, "col_sums");
    const std::size_t m = a.dim(0), n = a.dim(1);
    Tensor out({1, n}, a.precision());
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) out[j] += a[i * n + j];
    return out;
}

double sum(const Tensor& a) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i];
    return s;
}

double rms(const Tensor& a) {
    if (a.empty()) throw TensorError("rms: empty tensor");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * a[i];
    return std::sqrt(s / static_cast<double>(a.size()));
}

double l2_norm(const Tensor& a) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * a[i];
    return std::sqrt(s);
}

void axpy_inplace(Tensor& y, double k, const Tensor& x) {
    require_same_shape(y, x, "axpy");
    for (std::size_t i = 0; i < y.size(); ++i) y[i] += k * x[i];
}

}  // namespace fusedopt
