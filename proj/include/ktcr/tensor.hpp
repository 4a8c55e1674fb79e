#pragma once

#include <cstddef>
#include <initializer_list>
#include <map>
#include <span>
#include <string>
#include <vector>

namespace ktcr {

/// Dense row-major tensor of doubles. Rank 0 (scalar), 1 (vector) and
/// 2 (matrix) are the only ranks the library builds, but the type itself
/// does not restrict rank.
class Tensor {
public:
    Tensor() = default;
    Tensor(std::vector<std::size_t> shape, std::vector<double> data);

    static Tensor zeros(std::vector<std::size_t> shape);
    static Tensor scalar(double v);
    static Tensor vector(std::vector<double> values);
    static Tensor vector(std::initializer_list<double> values);
    static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values);

    const std::vector<std::size_t>& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t size() const noexcept { return data_.size(); }
    std::size_t rows() const;
    std::size_t cols() const;

    std::span<double> data() noexcept { return data_; }
    std::span<const double> data() const noexcept { return data_; }
    std::vector<double>& values() noexcept { return data_; }
    const std::vector<double>& values() const noexcept { return data_; }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }
    double& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }
    double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

    /// Row `r` of a matrix, as a vector.
    Tensor row(std::size_t r) const;
    double item() const;

    bool same_shape(const Tensor& other) const noexcept { return shape_ == other.shape_; }
    bool all_finite() const noexcept;

    friend bool operator==(const Tensor&, const Tensor&) = default;

private:
    std::vector<std::size_t> shape_;
    std::vector<double> data_;
};

std::string shape_string(const std::vector<std::size_t>& shape);

// Small vector helpers used across modules. All require equal lengths.
double dot(std::span<const double> a, std::span<const double> b);
double norm(std::span<const double> a);
double squared_distance(std::span<const double> a, std::span<const double> b);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor scaled(const Tensor& a, double s);
Tensor mean_of(std::span<const Tensor> items);

/// u.v / (|u||v|), clamped to [-1, 1]. Throws DegenerateDirectionError if
/// either vector has zero norm.
double cosine(const Tensor& u, const Tensor& v);

/// Named, ordered collection of tensors (model parameters, gradients).
using ParamSet = std::map<std::string, Tensor>;

/// Element-wise `dst += scale * src` over matching parameter sets.
void axpy(ParamSet& dst, const ParamSet& src, double scale);
ParamSet zeros_like(const ParamSet& params);
bool all_finite(const ParamSet& params);

} // namespace ktcr
