#include "dgkd/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace dgkd {

std::string shape_str(const Shape& shape)
{
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i)
            os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

std::size_t shape_numel(const Shape& shape)
{
    std::size_t n = 1;
    for (int d : shape) {
        if (d < 0)
            throw std::invalid_argument("negative dimension in shape " + shape_str(shape));
        n *= static_cast<std::size_t>(d);
    }
    return n;
}

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape))
    , data_(shape_numel(shape_), fill)
{
}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : shape_(std::move(shape))
    , data_(std::move(values))
{
    if (data_.size() != shape_numel(shape_))
        throw std::invalid_argument("tensor data size " + std::to_string(data_.size()) + " does not match shape "
                                    + shape_str(shape_));
}

void Tensor::fill(double v)
{
    std::fill(data_.begin(), data_.end(), v);
}

Tensor Tensor::reshaped(Shape shape) const
{
    return Tensor(std::move(shape), data_);
}

Tensor& Tensor::operator+=(const Tensor& other)
{
    require_same_shape(*this, other, "tensor +=");
    for (std::size_t i = 0; i < data_.size(); ++i)
        data_[i] += other.data_[i];
    return *this;
}

Tensor& Tensor::operator-=(const Tensor& other)
{
    require_same_shape(*this, other, "tensor -=");
    for (std::size_t i = 0; i < data_.size(); ++i)
        data_[i] -= other.data_[i];
    return *this;
}

Tensor& Tensor::operator*=(double s)
{
    for (double& v : data_)
        v *= s;
    return *this;
}

double Tensor::sum() const
{
    return std::accumulate(data_.begin(), data_.end(), 0.0);
}

double Tensor::max_abs() const
{
    double m = 0.0;
    for (double v : data_)
        m = std::max(m, std::abs(v));
    return m;
}

double Tensor::squared_norm() const
{
    double s = 0.0;
    for (double v : data_)
        s += v * v;
    return s;
}

bool Tensor::all_finite() const
{
    return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

Tensor operator+(Tensor a, const Tensor& b)
{
    a += b;
    return a;
}

Tensor operator-(Tensor a, const Tensor& b)
{
    a -= b;
    return a;
}

Tensor operator*(Tensor a, double s)
{
    a *= s;
    return a;
}

double max_abs_diff(const Tensor& a, const Tensor& b)
{
    require_same_shape(a, b, "max_abs_diff");
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i)
        m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* what)
{
    if (a.shape() != b.shape())
        throw std::invalid_argument(std::string(what) + ": shape mismatch " + shape_str(a.shape()) + " vs "
                                    + shape_str(b.shape()));
}

} // namespace dgkd
