#pragma once

#include <Eigen/Core>
#include <cmath>
#include <cstdint>
#include <limits>
#include <vector>

#include "p2ilf/image.hpp"

namespace p2ilf {

/// Exact squared Euclidean distance transform of a feature grid, with the
/// nearest feature pixel tracked per cell (Felzenszwalb/Huttenlocher
/// lower-envelope method, run per column and then per row).
struct DistanceTransform {
    int width = 0;
    int height = 0;
    std::vector<double> sq_dist;     // squared distance to nearest feature
    std::vector<int32_t> feature_x;  // nearest feature coordinates, -1 if none
    std::vector<int32_t> feature_y;

    bool empty() const { return sq_dist.empty(); }
    double dist_at(int x, int y) const { return std::sqrt(sq_dist[idx(x, y)]); }
    double sq_dist_at(int x, int y) const { return sq_dist[idx(x, y)]; }
    Pixel feature_at(int x, int y) const {
        return {feature_x[idx(x, y)], feature_y[idx(x, y)]};
    }

    size_t idx(int x, int y) const { return static_cast<size_t>(y) * width + x; }
};

namespace detail {

// 1D lower envelope of parabolas rooted at feature cells. `f` holds squared
// distances (INF where no feature), `src` the propagated feature index.
inline void edt_1d(const double* f, const int32_t* src, int n, double* out_d, int32_t* out_src,
                   std::vector<int>& v, std::vector<double>& z) {
    constexpr double kInf = std::numeric_limits<double>::infinity();
    v.resize(static_cast<size_t>(n));
    z.resize(static_cast<size_t>(n) + 1);
    int k = 0;
    v[0] = 0;
    z[0] = -kInf;
    z[1] = kInf;
    for (int q = 1; q < n; ++q) {
        if (f[q] == kInf) {
            continue;
        }
        if (f[v[k]] == kInf) {
            v[k] = q;
            continue;
        }
        double s = ((f[q] + q * static_cast<double>(q)) -
                    (f[v[k]] + v[k] * static_cast<double>(v[k]))) /
                   (2.0 * (q - v[k]));
        while (s <= z[k]) {
            --k;
            s = ((f[q] + q * static_cast<double>(q)) -
                 (f[v[k]] + v[k] * static_cast<double>(v[k]))) /
                (2.0 * (q - v[k]));
        }
        ++k;
        v[k] = q;
        z[k] = s;
        z[k + 1] = kInf;
    }
    k = 0;
    for (int q = 0; q < n; ++q) {
        while (z[k + 1] < q) {
            ++k;
        }
        const int vk = v[k];
        if (f[vk] == kInf) {
            out_d[q] = kInf;
            out_src[q] = -1;
        } else {
            const double dq = q - vk;
            out_d[q] = dq * dq + f[vk];
            out_src[q] = src[vk];
        }
    }
}

} // namespace detail

/// `is_feature(x, y)` marks the feature set over a width x height grid.
template <typename Pred>
DistanceTransform distance_transform(int width, int height, Pred is_feature) {
    constexpr double kInf = std::numeric_limits<double>::infinity();
    DistanceTransform dt;
    dt.width = width;
    dt.height = height;
    const size_t n = static_cast<size_t>(width) * height;
    dt.sq_dist.assign(n, kInf);
    dt.feature_x.assign(n, -1);
    dt.feature_y.assign(n, -1);

    std::vector<double> col_f(static_cast<size_t>(height));
    std::vector<int32_t> col_src(static_cast<size_t>(height));
    std::vector<double> col_d(static_cast<size_t>(height));
    std::vector<int32_t> col_out(static_cast<size_t>(height));
    std::vector<int> v;
    std::vector<double> z;

    // pass 1: per column, distance along y; feature index is the y coordinate
    for (int x = 0; x < width; ++x) {
        for (int y = 0; y < height; ++y) {
            const bool feat = is_feature(x, y);
            col_f[static_cast<size_t>(y)] = feat ? 0.0 : kInf;
            col_src[static_cast<size_t>(y)] = y;
        }
        detail::edt_1d(col_f.data(), col_src.data(), height, col_d.data(), col_out.data(), v, z);
        for (int y = 0; y < height; ++y) {
            dt.sq_dist[dt.idx(x, y)] = col_d[static_cast<size_t>(y)];
            dt.feature_y[dt.idx(x, y)] = col_out[static_cast<size_t>(y)];
        }
    }

    // pass 2: per row; propagate both coordinates of the winner
    std::vector<double> row_f(static_cast<size_t>(width));
    std::vector<int32_t> row_src(static_cast<size_t>(width));
    std::vector<double> row_d(static_cast<size_t>(width));
    std::vector<int32_t> row_out(static_cast<size_t>(width));
    std::vector<int32_t> row_fy(static_cast<size_t>(width));
    for (int y = 0; y < height; ++y) {
        for (int x = 0; x < width; ++x) {
            row_f[static_cast<size_t>(x)] = dt.sq_dist[dt.idx(x, y)];
            row_src[static_cast<size_t>(x)] = x;
            row_fy[static_cast<size_t>(x)] = dt.feature_y[dt.idx(x, y)];
        }
        detail::edt_1d(row_f.data(), row_src.data(), width, row_d.data(), row_out.data(), v, z);
        for (int x = 0; x < width; ++x) {
            const size_t i = dt.idx(x, y);
            dt.sq_dist[i] = row_d[static_cast<size_t>(x)];
            const int32_t fx = row_out[static_cast<size_t>(x)];
            dt.feature_x[i] = fx;
            dt.feature_y[i] = fx >= 0 ? row_fy[static_cast<size_t>(fx)] : -1;
        }
    }
    return dt;
}

inline DistanceTransform distance_transform(const std::vector<Pixel>& features, int width,
                                            int height) {
    std::vector<uint8_t> grid(static_cast<size_t>(width) * height, 0);
    for (const Pixel& p : features) {
        if (p.x() >= 0 && p.x() < width && p.y() >= 0 && p.y() < height) {
            grid[static_cast<size_t>(p.y()) * width + p.x()] = 1;
        }
    }
    return distance_transform(width, height,
                              [&](int x, int y) { return grid[static_cast<size_t>(y) * width + x] != 0; });
}

/// Exact nearest-neighbour queries against a fixed 2D point set, via a
/// uniform bucket grid with ring search. Works for real-valued queries.
class NearestSet2D {
public:
    explicit NearestSet2D(std::vector<Vec2> points) : points_(std::move(points)) {
        if (points_.empty()) {
            return;
        }
        lo_ = points_[0];
        Vec2 hi = points_[0];
        for (const Vec2& p : points_) {
            lo_ = lo_.cwiseMin(p);
            hi = hi.cwiseMax(p);
        }
        const double extent = std::max((hi - lo_).maxCoeff(), 1e-9);
        const int target = std::max(1, static_cast<int>(std::sqrt(static_cast<double>(points_.size()))));
        cell_ = extent / target;
        nx_ = static_cast<int>((hi.x() - lo_.x()) / cell_) + 1;
        ny_ = static_cast<int>((hi.y() - lo_.y()) / cell_) + 1;
        buckets_.resize(static_cast<size_t>(nx_) * ny_);
        for (size_t i = 0; i < points_.size(); ++i) {
            buckets_[bucket_index(cell_of(points_[i]))].push_back(static_cast<int>(i));
        }
    }

    bool empty() const { return points_.empty(); }
    size_t size() const { return points_.size(); }
    const Vec2& point(int i) const { return points_[static_cast<size_t>(i)]; }

    struct Result {
        int index = -1;
        double dist = std::numeric_limits<double>::infinity();
    };

    Result query(const Vec2& q) const {
        Result best;
        if (points_.empty()) {
            return best;
        }
        const Eigen::Vector2i c = cell_of(q);
        // L-inf distance from q to its clamped cell; zero when q is inside the
        // grid. Needed to keep the ring lower bound valid for outside queries.
        const double cell_x0 = lo_.x() + c.x() * cell_;
        const double cell_y0 = lo_.y() + c.y() * cell_;
        const double ox = std::max({0.0, cell_x0 - q.x(), q.x() - (cell_x0 + cell_)});
        const double oy = std::max({0.0, cell_y0 - q.y(), q.y() - (cell_y0 + cell_)});
        const double slack = std::max(ox, oy);

        double best_sq = std::numeric_limits<double>::infinity();
        const int max_ring = std::max(cx_clampdist(c.x(), nx_), cx_clampdist(c.y(), ny_));
        for (int ring = 0; ring <= max_ring; ++ring) {
            // every point in a ring-k cell is at least (k-1)*cell - slack away
            if (best_sq < std::numeric_limits<double>::infinity()) {
                const double lower = (ring - 1) * cell_ - slack;
                if (lower > 0.0 && lower * lower > best_sq) {
                    break;
                }
            }
            scan_ring(q, c, ring, best_sq, best.index);
        }
        best.dist = std::sqrt(best_sq);
        return best;
    }

private:
    static int cx_clampdist(int c, int n) { return std::max(c, n - 1 - c); }

    Eigen::Vector2i cell_of(const Vec2& p) const {
        int gx = static_cast<int>(std::floor((p.x() - lo_.x()) / cell_));
        int gy = static_cast<int>(std::floor((p.y() - lo_.y()) / cell_));
        return {std::clamp(gx, 0, nx_ - 1), std::clamp(gy, 0, ny_ - 1)};
    }

    size_t bucket_index(const Eigen::Vector2i& c) const {
        return static_cast<size_t>(c.y()) * nx_ + c.x();
    }

    void scan_cell(const Vec2& q, int gx, int gy, double& best_sq, int& best_idx) const {
        if (gx < 0 || gx >= nx_ || gy < 0 || gy >= ny_) {
            return;
        }
        for (int i : buckets_[static_cast<size_t>(gy) * nx_ + gx]) {
            const double d = (points_[static_cast<size_t>(i)] - q).squaredNorm();
            if (d < best_sq) {
                best_sq = d;
                best_idx = i;
            }
        }
    }

    void scan_ring(const Vec2& q, const Eigen::Vector2i& c, int ring, double& best_sq,
                   int& best_idx) const {
        if (ring == 0) {
            scan_cell(q, c.x(), c.y(), best_sq, best_idx);
            return;
        }
        for (int dx = -ring; dx <= ring; ++dx) {
            scan_cell(q, c.x() + dx, c.y() - ring, best_sq, best_idx);
            scan_cell(q, c.x() + dx, c.y() + ring, best_sq, best_idx);
        }
        for (int dy = -ring + 1; dy <= ring - 1; ++dy) {
            scan_cell(q, c.x() - ring, c.y() + dy, best_sq, best_idx);
            scan_cell(q, c.x() + ring, c.y() + dy, best_sq, best_idx);
        }
    }

    std::vector<Vec2> points_;
    Vec2 lo_ = Vec2::Zero();
    double cell_ = 1.0;
    int nx_ = 0;
    int ny_ = 0;
    std::vector<std::vector<int>> buckets_;
};

inline std::vector<Vec2> to_vec2(const std::vector<Pixel>& px) {
    std::vector<Vec2> out;
    out.reserve(px.size());
    for (const Pixel& p : px) {
        out.emplace_back(p.x(), p.y());
    }
    return out;
}

} // namespace p2ilf
