#pragma once

#include <cmath>
#include <cstdlib>
#include <cstddef>
#include <functional>
#include <span>
#include <thread>
#include <vector>

#include "driftweight/errors.hpp"

namespace driftweight {

// Dense row-major matrix of doubles. Deliberately minimal: the network code
// below writes its own loops, this is just the shared container.
struct Matrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Matrix() = default;
    Matrix(std::size_t r, std::size_t c, double fill = 0.0) : rows(r), cols(c), data(r * c, fill) {}

    double& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

    std::span<double> row(std::size_t r) { return {data.data() + r * cols, cols}; }
    std::span<const double> row(std::size_t r) const { return {data.data() + r * cols, cols}; }

    Matrix take_rows(std::size_t begin, std::size_t end) const {
        Matrix out(end - begin, cols);
        std::copy(data.begin() + static_cast<std::ptrdiff_t>(begin * cols),
                  data.begin() + static_cast<std::ptrdiff_t>(end * cols), out.data.begin());
        return out;
    }

    bool all_finite() const {
        for (const double v : data) {
            if (!std::isfinite(v)) return false;
        }
        return true;
    }
};

inline double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double norm2(std::span<const double> v) { return std::sqrt(dot(v, v)); }

inline void axpy(double a, std::span<const double> x, std::span<double> y) {
    for (std::size_t i = 0; i < x.size(); ++i) y[i] += a * x[i];
}

// Width of the per-example parallel map, capped by DRIFTWEIGHT_THREADS.
// Results are written to per-index slots and reduced in index order, so the
// outcome is identical at any width.
inline unsigned map_width() {
    static const unsigned width = [] {
        unsigned hw = std::thread::hardware_concurrency();
        if (hw == 0) hw = 1;
        if (const char* env = std::getenv("DRIFTWEIGHT_THREADS")) {
            const long cap = std::strtol(env, nullptr, 10);
            if (cap >= 1 && static_cast<unsigned>(cap) < hw) hw = static_cast<unsigned>(cap);
            if (cap >= 1 && hw == 0) hw = static_cast<unsigned>(cap);
        }
        return hw;
    }();
    return width;
}

template <typename Fn>
void parallel_for(std::size_t n, Fn&& fn) {
    const unsigned width = map_width();
    if (width <= 1 || n < 2 * width) {
        for (std::size_t i = 0; i < n; ++i) fn(i);
        return;
    }
    std::vector<std::thread> workers;
    workers.reserve(width);
    for (unsigned w = 0; w < width; ++w) {
        workers.emplace_back([&, w] {
            for (std::size_t i = w; i < n; i += width) fn(i);
        });
    }
    for (auto& t : workers) t.join();
}

}  // namespace driftweight
