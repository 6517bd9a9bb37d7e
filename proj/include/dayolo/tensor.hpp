#pragma once

#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <vector>

#include "dayolo/common.hpp"

namespace dayolo {

// Dense row-major float tensor, rank <= 4. Value semantics; all layout
// arithmetic is explicit in the ops that use it.
struct Tensor {
    std::vector<int> shape;
    std::vector<float> data;

    Tensor() = default;
    explicit Tensor(std::vector<int> s) : shape(std::move(s)) {
        data.assign(size_t(numel_of(shape)), 0.0f);
    }
    Tensor(std::vector<int> s, std::vector<float> d) : shape(std::move(s)), data(std::move(d)) {
        if (int64_t(data.size()) != numel_of(shape))
            throw ShapeError("tensor data size does not match shape");
    }

    static int64_t numel_of(const std::vector<int>& s) {
        int64_t n = 1;
        for (int d : s) n *= d;
        return n;
    }

    static Tensor zeros(std::vector<int> s) { return Tensor(std::move(s)); }

    static Tensor full(std::vector<int> s, float v) {
        Tensor t(std::move(s));
        std::fill(t.data.begin(), t.data.end(), v);
        return t;
    }

    static Tensor scalar(float v) { return Tensor({1}, {v}); }

    int64_t numel() const { return int64_t(data.size()); }
    int ndim() const { return int(shape.size()); }
    int dim(int i) const { return shape[size_t(i)]; }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    void fill(float v) { std::fill(data.begin(), data.end(), v); }

    float& operator[](size_t i) { return data[i]; }
    float operator[](size_t i) const { return data[i]; }

    // indexed accessors for the common ranks
    float& at3(int c, int y, int x) {
        return data[size_t((int64_t(c) * shape[1] + y) * shape[2] + x)];
    }
    float at3(int c, int y, int x) const {
        return data[size_t((int64_t(c) * shape[1] + y) * shape[2] + x)];
    }
    float& at4(int b, int c, int y, int x) {
        return data[size_t(((int64_t(b) * shape[1] + c) * shape[2] + y) * shape[3] + x)];
    }
    float at4(int b, int c, int y, int x) const {
        return data[size_t(((int64_t(b) * shape[1] + c) * shape[2] + y) * shape[3] + x)];
    }

    double sum_double() const {
        double s = 0.0;
        for (float v : data) s += v;
        return s;
    }
};

inline std::string shape_str(const std::vector<int>& s) {
    std::string out = "[";
    for (size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

}  // namespace dayolo
