#pragma once

#include <cmath>
#include <cstddef>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace metatok {

class ShapeError : public std::invalid_argument {
  public:
    using std::invalid_argument::invalid_argument;
};

class NumericError : public std::runtime_error {
  public:
    using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

inline std::size_t shape_size(const Shape& s) {
    return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>());
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "x" : "") << s[i];
    os << ']';
    return os.str();
}

/// Dense row-major array.
template <typename T>
struct Tensor {
    Shape shape;
    std::vector<T> values;

    Tensor() = default;
    explicit Tensor(Shape s, T fill = T(0)) : shape(std::move(s)), values(shape_size(shape), fill) {}
    Tensor(Shape s, std::vector<T> v) : shape(std::move(s)), values(std::move(v)) {
        if (shape_size(shape) != values.size())
            throw ShapeError("tensor: " + shape_str(shape) + " does not hold " +
                             std::to_string(values.size()) + " values");
    }

    std::size_t size() const { return values.size(); }
    std::size_t rows() const { return shape.empty() ? 1 : shape.front(); }
    std::size_t cols() const { return shape.empty() ? 1 : values.size() / rows(); }
    T* data() { return values.data(); }
    const T* data() const { return values.data(); }
    T& operator[](std::size_t i) { return values[i]; }
    const T& operator[](std::size_t i) const { return values[i]; }
    T& at(std::size_t r, std::size_t c) { return values[r * cols() + c]; }
    const T& at(std::size_t r, std::size_t c) const { return values[r * cols() + c]; }
};

template <typename T>
bool all_finite(const std::vector<T>& v) {
    for (const T& x : v)
        if (!std::isfinite(x)) return false;
    return true;
}

/// A named trainable tensor with its gradient accumulator.
template <typename T>
struct Parameter {
    std::string name;
    Tensor<T> value;
    std::vector<T> grad;
    bool decay = true;  // participates in decoupled weight decay

    Parameter(std::string n, Tensor<T> v, bool wd)
        : name(std::move(n)), value(std::move(v)), grad(value.size(), T(0)), decay(wd) {}

    void zero_grad() { std::fill(grad.begin(), grad.end(), T(0)); }
};

/// Ordered set of uniquely named parameters. Addresses are stable.
template <typename T>
class ParameterStore {
  public:
    Parameter<T>& add(const std::string& name, Tensor<T> value, bool decay) {
        if (index_.count(name)) throw std::invalid_argument("duplicate parameter name: " + name);
        params_.push_back(std::make_unique<Parameter<T>>(name, std::move(value), decay));
        index_[name] = params_.size() - 1;
        return *params_.back();
    }

    Parameter<T>& get(const std::string& name) {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
        return *params_[it->second];
    }
    const Parameter<T>& get(const std::string& name) const {
        auto it = index_.find(name);
        if (it == index_.end()) throw std::out_of_range("no parameter named " + name);
        return *params_[it->second];
    }
    bool contains(const std::string& name) const { return index_.count(name) > 0; }

    std::size_t size() const { return params_.size(); }
    Parameter<T>& operator[](std::size_t i) { return *params_[i]; }
    const Parameter<T>& operator[](std::size_t i) const { return *params_[i]; }

    std::size_t total_elements() const {
        std::size_t n = 0;
        for (const auto& p : params_) n += p->value.size();
        return n;
    }

    void zero_grad() {
        for (auto& p : params_) p->zero_grad();
    }

  private:
    std::vector<std::unique_ptr<Parameter<T>>> params_;
    std::map<std::string, std::size_t> index_;
};

}  // namespace metatok
