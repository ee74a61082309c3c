#pragma once

#include <cstddef>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace fusedopt {

// Raised on shape/rank mismatches and invalid element access.
class TensorError : public std::runtime_error {
public:
    explicit TensorError(const std::string& what) : std::runtime_error(what) {}
};

enum class Precision : std::uint8_t { fp32 = 0, fp64 = 1 };

inline std::size_t element_bytes(Precision p) { return p == Precision::fp32 ? 4 : 8; }

using Shape = std::vector<std::size_t>;

// Dense row-major tensor. Arithmetic is always carried out in double;
// the precision tag drives byte accounting and serialization width.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, Precision prec = Precision::fp64);
    Tensor(Shape shape, std::vector<double> data, Precision prec = Precision::fp64);

    static Tensor zeros(Shape shape, Precision prec = Precision::fp64);
    static Tensor full(Shape shape, double value, Precision prec = Precision::fp64);
    static Tensor scalar(double value, Precision prec = Precision::fp64);
    static Tensor vector(std::vector<double> values, Precision prec = Precision::fp64);
    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values,
                         Precision prec = Precision::fp64);

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }
    Precision precision() const { return prec_; }
    std::size_t byte_size() const { return size() * element_bytes(prec_); }

    std::size_t rows() const;
    std::size_t cols() const;

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }
    double& at(std::size_t r, std::size_t c);
    double at(std::size_t r, std::size_t c) const;

    std::vector<double>& data() { return data_; }
    const std::vector<double>& data() const { return data_; }

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }
    std::string shape_str() const;

private:
    Shape shape_;
    std::vector<double> data_;
    Precision prec_ = Precision::fp64;
};

// Elementwise binary ops; shapes must match.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);  // throws on zero divisor element
Tensor max_elem(const Tensor& a, const Tensor& b);

// Elementwise maps.
Tensor square(const Tensor& a);
Tensor sqrt_map(const Tensor& a);
Tensor exp_map(const Tensor& a);
Tensor scale(const Tensor& a, double k);
Tensor add_scalar(const Tensor& a, double k);

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);

Tensor row_sums(const Tensor& a);  // [m,n] -> [m,1]
Tensor col_sums(const Tensor& a);  // [m,n] -> [1,n]

double sum(const Tensor& a);
double rms(const Tensor& a);     // sqrt(sum(a_i^2)/n), a non-empty
double l2_norm(const Tensor& a);

// In-place y += k*x, used by optimizer update paths.
void axpy_inplace(Tensor& y, double k, const Tensor& x);

}  // namespace fusedopt
