#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace crowdflow {

struct OutOfGrid : std::out_of_range {
    using std::out_of_range::out_of_range;
};

struct ShapeMismatch : std::invalid_argument {
    using std::invalid_argument::invalid_argument;
};

/// City grid geometry: l1 x l2 cells, adjacency within the n-th neighborhood
/// (all cells at Chebyshev distance <= n, excluding the cell itself).
struct GridShape {
    int l1 = 32;
    int l2 = 32;
    int n = 2;

    bool operator==(const GridShape&) const = default;

    int cells() const { return l1 * l2; }
    /// Neighborhood slice count: (2n+1)^2 - 1.
    int neighbor_slots() const { return (2 * n + 1) * (2 * n + 1) - 1; }
    bool contains(int r, int c) const { return r >= 0 && r < l1 && c >= 0 && c < l2; }

    void validate() const {
        if (n < 1) throw ShapeMismatch("GridShape: neighborhood radius must be >= 1");
        if (l1 < 2 * n + 1 || l2 < 2 * n + 1)
            throw ShapeMismatch("GridShape: grid must fit a full neighborhood (l >= 2n+1)");
    }
};

struct GridPoint {
    int r = 0;
    int c = 0;
    bool operator==(const GridPoint&) const = default;
};

/// Dense row-major matrix over the city grid.
template <typename T>
class Grid {
public:
    Grid() = default;
    Grid(int rows, int cols, T fill = T{}) : rows_(rows), cols_(cols), data_(static_cast<size_t>(rows) * cols, fill) {}

    int rows() const { return rows_; }
    int cols() const { return cols_; }
    size_t size() const { return data_.size(); }

    T& operator()(int r, int c) { return data_[static_cast<size_t>(r) * cols_ + c]; }
    const T& operator()(int r, int c) const { return data_[static_cast<size_t>(r) * cols_ + c]; }
    T& operator[](size_t i) { return data_[i]; }
    const T& operator[](size_t i) const { return data_[i]; }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    auto begin() { return data_.begin(); }
    auto end() { return data_.end(); }
    auto begin() const { return data_.begin(); }
    auto end() const { return data_.end(); }

    bool same_shape(const Grid& o) const { return rows_ == o.rows_ && cols_ == o.cols_; }
    bool operator==(const Grid&) const = default;

    T sum() const {
        T s{};
        for (const T& v : data_) s += v;
        return s;
    }

private:
    int rows_ = 0;
    int cols_ = 0;
    std::vector<T> data_;
};

using GridD = Grid<double>;
using GridI = Grid<std::int64_t>;

/// All grid points (p.r - i, p.c - j) for i, j in [-n, n], (i, j) != (0, 0),
/// clipped to the grid bounds. Symmetric: q in A(p) iff p in A(q).
inline std::vector<GridPoint> adjacency(GridPoint p, const GridShape& shape) {
    if (!shape.contains(p.r, p.c))
        throw OutOfGrid("adjacency: point (" + std::to_string(p.r) + "," + std::to_string(p.c) + ") outside grid");
    std::vector<GridPoint> out;
    out.reserve(static_cast<size_t>(shape.neighbor_slots()));
    for (int i = -shape.n; i <= shape.n; ++i) {
        for (int j = -shape.n; j <= shape.n; ++j) {
            if (i == 0 && j == 0) continue;
            const int r = p.r - i;
            const int c = p.c - j;
            if (shape.contains(r, c)) out.push_back({r, c});
        }
    }
    return out;
}

/// 2-D convolution with zero padding, output shape equal to input shape.
/// Kernel must have odd extents.
inline GridD convolve_same(const GridD& in, const GridD& kernel) {
    if (kernel.rows() % 2 == 0 || kernel.cols() % 2 == 0)
        throw ShapeMismatch("convolve_same: kernel extents must be odd");
    const int kr = kernel.rows() / 2;
    const int kc = kernel.cols() / 2;
    GridD out(in.rows(), in.cols());
    for (int r = 0; r < in.rows(); ++r) {
        for (int c = 0; c < in.cols(); ++c) {
            double acc = 0.0;
            for (int i = -kr; i <= kr; ++i) {
                const int rr = r - i;
                if (rr < 0 || rr >= in.rows()) continue;
                for (int j = -kc; j <= kc; ++j) {
                    const int cc = c - j;
                    if (cc < 0 || cc >= in.cols()) continue;
                    acc += in(rr, cc) * kernel(i + kr, j + kc);
                }
            }
            out(r, c) = acc;
        }
    }
    return out;
}

/// Center-one filter f: (2n+1)x(2n+1), 1 at the center, 0 elsewhere.
inline GridD center_one_filter(int n) {
    GridD f(2 * n + 1, 2 * n + 1, 0.0);
    f(n, n) = 1.0;
    return f;
}

/// Complement filter (1 - f): 1 everywhere except the center.
inline GridD neighborhood_filter(int n) {
    GridD f(2 * n + 1, 2 * n + 1, 1.0);
    f(n, n) = 0.0;
    return f;
}

}  // namespace crowdflow
