#include "ktcr/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>

#include "ktcr/error.hpp"

namespace ktcr {

namespace {

std::size_t extent_product(const std::vector<std::size_t>& shape)
{
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

void require_same_length(std::size_t a, std::size_t b, const char* op)
{
    if (a != b) {
        throw ShapeError(std::string(op) + ": length mismatch " + std::to_string(a) + " vs "
                         + std::to_string(b));
    }
}

} // namespace

Tensor::Tensor(std::vector<std::size_t> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data))
{
    if (extent_product(shape_) != data_.size()) {
        throw ShapeError("tensor data length " + std::to_string(data_.size())
                         + " does not match shape " + shape_string(shape_));
    }
}

Tensor Tensor::zeros(std::vector<std::size_t> shape)
{
    const auto n = extent_product(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0));
}

Tensor Tensor::scalar(double v) { return Tensor({}, {v}); }

Tensor Tensor::vector(std::vector<double> values)
{
    const auto n = values.size();
    return Tensor({n}, std::move(values));
}

Tensor Tensor::vector(std::initializer_list<double> values)
{
    return vector(std::vector<double>(values));
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> values)
{
    return Tensor({rows, cols}, std::move(values));
}

std::size_t Tensor::rows() const
{
    if (rank() != 2) throw ShapeError("rows() on tensor of shape " + shape_string(shape_));
    return shape_[0];
}

std::size_t Tensor::cols() const
{
    if (rank() != 2) throw ShapeError("cols() on tensor of shape " + shape_string(shape_));
    return shape_[1];
}

Tensor Tensor::row(std::size_t r) const
{
    const auto c = cols();
    if (r >= shape_[0]) throw ShapeError("row index out of range");
    return Tensor::vector(std::vector<double>(data_.begin() + static_cast<std::ptrdiff_t>(r * c),
                                              data_.begin() + static_cast<std::ptrdiff_t>((r + 1) * c)));
}

double Tensor::item() const
{
    if (data_.size() != 1) throw ShapeError("item() on tensor of shape " + shape_string(shape_));
    return data_[0];
}

bool Tensor::all_finite() const noexcept
{
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

std::string shape_string(const std::vector<std::size_t>& shape)
{
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

double dot(std::span<const double> a, std::span<const double> b)
{
    require_same_length(a.size(), b.size(), "dot");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

double squared_distance(std::span<const double> a, std::span<const double> b)
{
    require_same_length(a.size(), b.size(), "squared_distance");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double d = a[i] - b[i];
        s += d * d;
    }
    return s;
}

Tensor add(const Tensor& a, const Tensor& b)
{
    require_same_length(a.size(), b.size(), "add");
    Tensor out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += b[i];
    return out;
}

Tensor sub(const Tensor& a, const Tensor& b)
{
    require_same_length(a.size(), b.size(), "sub");
    Tensor out = a;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= b[i];
    return out;
}

Tensor scaled(const Tensor& a, double s)
{
    Tensor out = a;
    for (auto& v : out.values()) v *= s;
    return out;
}

Tensor mean_of(std::span<const Tensor> items)
{
    if (items.empty()) throw InsufficientDataError("mean of an empty set");
    Tensor out = Tensor::zeros(items.front().shape());
    for (const auto& t : items) {
        require_same_length(out.size(), t.size(), "mean_of");
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += t[i];
    }
    for (auto& v : out.values()) v /= static_cast<double>(items.size());
    return out;
}

double cosine(const Tensor& u, const Tensor& v)
{
    require_same_length(u.size(), v.size(), "cosine");
    const double nu = norm(u.data());
    const double nv = norm(v.data());
    if (nu == 0.0 || nv == 0.0) throw DegenerateDirectionError("cosine of a zero-norm vector");
    return std::clamp(dot(u.data(), v.data()) / (nu * nv), -1.0, 1.0);
}

void axpy(ParamSet& dst, const ParamSet& src, double scale)
{
    for (auto& [name, t] : dst) {
        const auto it = src.find(name);
        if (it == src.end()) throw ShapeError("axpy: missing parameter " + name);
        require_same_length(t.size(), it->second.size(), "axpy");
        for (std::size_t i = 0; i < t.size(); ++i) t[i] += scale * it->second[i];
    }
}

ParamSet zeros_like(const ParamSet& params)
{
    ParamSet out;
    for (const auto& [name, t] : params) out.emplace(name, Tensor::zeros(t.shape()));
    return out;
}

bool all_finite(const ParamSet& params)
{
    return std::all_of(params.begin(), params.end(),
                       [](const auto& kv) { return kv.second.all_finite(); });
}

} // namespace ktcr
