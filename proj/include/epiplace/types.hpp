#pragma once

#include <array>
#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace epiplace {

/// A location in the (normalized) input domain, 1D or 2D.
struct Point {
    std::array<double, 2> coords{0.0, 0.0};
    int dim = 1;

    Point() = default;
    explicit Point(double x) : coords{x, 0.0}, dim(1) {}
    Point(double x, double y) : coords{x, y}, dim(2) {}

    double operator[](size_t i) const { return coords[i]; }

    friend bool operator==(const Point& a, const Point& b) {
        if (a.dim != b.dim) return false;
        for (int i = 0; i < a.dim; ++i)
            if (a.coords[i] != b.coords[i]) return false;
        return true;
    }
};

/// Squared Euclidean distance between two points of the same dimensionality.
inline double squared_distance(const Point& a, const Point& b) {
    double s = 0.0;
    for (int i = 0; i < a.dim; ++i) {
        double d = a.coords[i] - b.coords[i];
        s += d * d;
    }
    return s;
}

/// An observed (location, value) pair; the atom of context and target sets.
struct Observation {
    Point point;
    double value = 0.0;

    Observation() = default;
    Observation(Point p, double v) : point(p), value(v) {}

    friend bool operator==(const Observation& a, const Observation& b) {
        return a.point == b.point && a.value == b.value;
    }
};

/// Per-target Gaussian mixture: weights sum to 1, variances are floored
/// strictly above zero by the producing head.
struct MixtureParams {
    std::vector<double> weights;
    std::vector<double> means;
    std::vector<double> variances;

    size_t components() const { return weights.size(); }
};

}  // namespace epiplace
