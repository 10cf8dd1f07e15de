#pragma once

// Planar triangulation of the flattened domain: conforming Delaunay
// refinement with region-dependent edge-length targets, plus OFF I/O.

#include "mda/io.hpp"

#include <set>
#include <unordered_map>

namespace mda {

using Point2 = Eigen::Vector2d;

/// Simple polygon as an ordered list of vertices (implicitly closed).
using Polygon = std::vector<Point2>;

struct RefinementRegion {
    Polygon polygon;
    double target_edge = 0.0;
};

struct TriangulatedDomain {
    Matrix vertices;                                  // J x 2
    Eigen::Matrix<Index, Eigen::Dynamic, 3> triangles; // T x 3, counter-clockwise
    std::vector<Index> boundary;                      // ordered CCW loop of vertex indices
    std::vector<RefinementRegion> refinement_regions;

    Index vertex_count() const { return vertices.rows(); }
    Index triangle_count() const { return triangles.rows(); }
    Point2 vertex(Index i) const { return vertices.row(i).transpose(); }
};

// ---------------------------------------------------------------------------
// Planar geometry helpers

namespace geometry {

inline double cross(const Point2& a, const Point2& b, const Point2& c)
{
    return (b.x() - a.x()) * (c.y() - a.y()) - (b.y() - a.y()) * (c.x() - a.x());
}

inline double signed_area(const Polygon& poly)
{
    double s = 0.0;
    for (std::size_t i = 0, n = poly.size(); i < n; ++i) {
        const Point2& a = poly[i];
        const Point2& b = poly[(i + 1) % n];
        s += a.x() * b.y() - b.x() * a.y();
    }
    return 0.5 * s;
}

inline double point_segment_distance(const Point2& p, const Point2& a, const Point2& b)
{
    const Point2 ab = b - a;
    const double len2 = ab.squaredNorm();
    double t = len2 > 0.0 ? (p - a).dot(ab) / len2 : 0.0;
    t = std::clamp(t, 0.0, 1.0);
    return (a + t * ab - p).norm();
}

inline double distance_to_boundary(const Point2& p, const Polygon& poly)
{
    double d = std::numeric_limits<double>::infinity();
    for (std::size_t i = 0, n = poly.size(); i < n; ++i)
        d = std::min(d, point_segment_distance(p, poly[i], poly[(i + 1) % n]));
    return d;
}

/// Crossing-number test; points on the boundary may go either way.
inline bool point_in_polygon(const Point2& p, const Polygon& poly)
{
    bool inside = false;
    for (std::size_t i = 0, n = poly.size(), j = n - 1; i < n; j = i++) {
        const Point2& a = poly[i];
        const Point2& b = poly[j];
        if ((a.y() > p.y()) != (b.y() > p.y())) {
            const double x = (b.x() - a.x()) * (p.y() - a.y()) / (b.y() - a.y()) + a.x();
            if (p.x() < x) inside = !inside;
        }
    }
    return inside;
}

inline bool inside_or_on(const Point2& p, const Polygon& poly, double tol)
{
    return point_in_polygon(p, poly) || distance_to_boundary(p, poly) <= tol;
}

inline bool segments_intersect(const Point2& a, const Point2& b, const Point2& c, const Point2& d)
{
    auto sgn = [](double v) { return (v > 0.0) - (v < 0.0); };
    const int o1 = sgn(cross(a, b, c)), o2 = sgn(cross(a, b, d));
    const int o3 = sgn(cross(c, d, a)), o4 = sgn(cross(c, d, b));
    if (o1 != o2 && o3 != o4) return true;
    auto on_seg = [](const Point2& p, const Point2& q, const Point2& r) {
        return std::min(p.x(), q.x()) <= r.x() && r.x() <= std::max(p.x(), q.x()) &&
               std::min(p.y(), q.y()) <= r.y() && r.y() <= std::max(p.y(), q.y());
    };
    if (o1 == 0 && on_seg(a, b, c)) return true;
    if (o2 == 0 && on_seg(a, b, d)) return true;
    if (o3 == 0 && on_seg(c, d, a)) return true;
    if (o4 == 0 && on_seg(c, d, b)) return true;
    return false;
}

inline bool is_simple(const Polygon& poly)
{
    const std::size_t n = poly.size();
    if (n < 3) return false;
    for (std::size_t i = 0; i < n; ++i)
        if ((poly[i] - poly[(i + 1) % n]).squaredNorm() == 0.0) return false;
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j) {
            const bool adjacent = (j == i + 1) || (i == 0 && j == n - 1);
            if (adjacent) {
                // Adjacent edges may only share their common vertex.
                if (n == 3) continue;
                const Point2& a = poly[i];
                const Point2& b = poly[(i + 1) % n];
                const Point2& c = poly[j];
                const Point2& d = poly[(j + 1) % n];
                if (cross(a, b, (i == 0 && j == n - 1) ? c : d) == 0.0) {
                    // collinear fold-back
                    const Point2 far = (i == 0 && j == n - 1) ? c : d;
                    const Point2 shared = (i == 0 && j == n - 1) ? a : b;
                    const Point2 other = (i == 0 && j == n - 1) ? b : a;
                    if ((far - shared).dot(other - shared) > 0.0) return false;
                }
                continue;
            }
            if (segments_intersect(poly[i], poly[(i + 1) % n], poly[j], poly[(j + 1) % n])) return false;
        }
    return std::abs(signed_area(poly)) > 0.0;
}

/// Andrew's monotone chain; CCW, collinear hull points dropped.
inline Polygon convex_hull(const Eigen::Ref<const Matrix>& pts)
{
    require(pts.cols() == 2, "convex hull needs planar points");
    std::vector<Point2> p;
    p.reserve(pts.rows());
    for (Index i = 0; i < pts.rows(); ++i) p.emplace_back(pts(i, 0), pts(i, 1));
    std::sort(p.begin(), p.end(), [](const Point2& a, const Point2& b) {
        return a.x() < b.x() || (a.x() == b.x() && a.y() < b.y());
    });
    p.erase(std::unique(p.begin(), p.end(), [](const Point2& a, const Point2& b) { return a == b; }), p.end());
    if (p.size() < 3) throw ValidationError("convex hull needs at least 3 distinct points");
    std::vector<Point2> h(2 * p.size());
    std::size_t k = 0;
    for (std::size_t i = 0; i < p.size(); ++i) {
        while (k >= 2 && cross(h[k - 2], h[k - 1], p[i]) <= 0.0) --k;
        h[k++] = p[i];
    }
    for (std::size_t i = p.size() - 1, t = k + 1; i > 0; --i) {
        while (k >= t && cross(h[k - 2], h[k - 1], p[i - 1]) <= 0.0) --k;
        h[k++] = p[i - 1];
    }
    h.resize(k - 1);
    if (h.size() < 3) throw ValidationError("points are collinear; no 2D hull");
    return h;
}

} // namespace geometry

// ---------------------------------------------------------------------------
// Incremental Delaunay (Bowyer-Watson)

namespace detail {

class Delaunay {
public:
    struct Tri {
        std::array<Index, 3> v;
        std::array<Index, 3> nbr; // nbr[i] is across the edge opposite v[i]; -1 for none
        bool alive = true;
    };

    /// Points are kept in normalized coordinates for predicate robustness.
    Delaunay(const Point2& center, double scale) : center_(center), scale_(scale)
    {
        const double big = 1e4;
        pts_.emplace_back(-3.0 * big, -3.0 * big);
        pts_.emplace_back(3.0 * big, 0.0);
        pts_.emplace_back(0.0, 3.0 * big);
        tris_.push_back({{0, 1, 2}, {-1, -1, -1}, true});
    }

    static constexpr Index super_count = 3;

    Index point_count() const { return static_cast<Index>(pts_.size()); }
    const std::vector<Tri>& triangles() const { return tris_; }
    Point2 normalized(Index i) const { return pts_[i]; }

    Index insert(const Point2& original)
    {
        const Point2 p = (original - center_) / scale_;
        const Index t0 = locate(p);
        const Index id = static_cast<Index>(pts_.size());
        for (Index c = 0; c < 3; ++c)
            if ((pts_[tris_[t0].v[c]] - p).squaredNorm() == 0.0)
                throw NumericalError("duplicate vertex inserted into triangulation");
        pts_.push_back(p);

        // Cavity of triangles whose circumcircle strictly contains p.
        std::vector<Index> cavity{t0};
        std::vector<char> in_cavity_flag;
        mark_.resize(tris_.size(), 0);
        ++epoch_;
        stamp(t0);
        for (std::size_t head = 0; head < cavity.size(); ++head) {
            const Tri& t = tris_[cavity[head]];
            for (Index e = 0; e < 3; ++e) {
                const Index n = t.nbr[e];
                if (n < 0 || stamped(n)) continue;
                if (in_circle(tris_[n], p)) {
                    stamp(n);
                    cavity.push_back(n);
                }
            }
        }

        // Boundary edges of the cavity, each oriented CCW as seen from inside.
        struct Edge {
            Index a, b, outside;
        };
        std::vector<Edge> rim;
        for (Index c : cavity) {
            const Tri& t = tris_[c];
            for (Index e = 0; e < 3; ++e) {
                const Index n = t.nbr[e];
                if (n >= 0 && stamped(n)) continue;
                rim.push_back({t.v[(e + 1) % 3], t.v[(e + 2) % 3], n});
            }
        }
        for (Index c : cavity) tris_[c].alive = false;

        std::unordered_map<Index, Index> by_start; // new tri keyed by its rim start vertex
        std::vector<Index> created;
        for (const Edge& e : rim) {
            const Index nt = static_cast<Index>(tris_.size());
            tris_.push_back({{id, e.a, e.b}, {e.outside, -1, -1}, true});
            if (e.outside >= 0) {
                Tri& o = tris_[e.outside];
                for (Index k = 0; k < 3; ++k) {
                    const Index x = o.v[(k + 1) % 3], y = o.v[(k + 2) % 3];
                    if ((x == e.b && y == e.a) || (x == e.a && y == e.b)) o.nbr[k] = nt;
                }
            }
            by_start[e.a] = nt;
            created.push_back(nt);
        }
        for (Index nt : created) {
            Tri& t = tris_[nt];
            // edge opposite v[1]=a is (b, id): neighbor is the tri starting at b
            t.nbr[1] = by_start.at(t.v[2]);
            // edge opposite v[2]=b is (id, a): neighbor is the tri ending at a
            t.nbr[2] = -1;
        }
        for (Index nt : created) {
            const Index next = tris_[nt].nbr[1];
            tris_[next].nbr[2] = nt;
        }
        last_ = created.front();
        return id;
    }

    bool has_edge(Index a, Index b) const
    {
        for (const Tri& t : tris_) {
            if (!t.alive) continue;
            for (Index k = 0; k < 3; ++k) {
                const Index x = t.v[k], y = t.v[(k + 1) % 3];
                if ((x == a && y == b) || (x == b && y == a)) return true;
            }
        }
        return false;
    }

private:
    static long double orient(const Point2& a, const Point2& b, const Point2& c)
    {
        return (static_cast<long double>(b.x()) - a.x()) * (static_cast<long double>(c.y()) - a.y()) -
               (static_cast<long double>(b.y()) - a.y()) * (static_cast<long double>(c.x()) - a.x());
    }

    bool in_circle(const Tri& t, const Point2& d) const
    {
        const Point2& a = pts_[t.v[0]];
        const Point2& b = pts_[t.v[1]];
        const Point2& c = pts_[t.v[2]];
        const long double adx = a.x() - static_cast<long double>(d.x()), ady = a.y() - static_cast<long double>(d.y());
        const long double bdx = b.x() - static_cast<long double>(d.x()), bdy = b.y() - static_cast<long double>(d.y());
        const long double cdx = c.x() - static_cast<long double>(d.x()), cdy = c.y() - static_cast<long double>(d.y());
        const long double det = (adx * adx + ady * ady) * (bdx * cdy - bdy * cdx) -
                                (bdx * bdx + bdy * bdy) * (adx * cdy - ady * cdx) +
                                (cdx * cdx + cdy * cdy) * (adx * bdy - ady * bdx);
        const long double mag = (adx * adx + ady * ady) * (std::abs(bdx * cdy) + std::abs(bdy * cdx)) +
                                (bdx * bdx + bdy * bdy) * (std::abs(adx * cdy) + std::abs(ady * cdx)) +
                                (cdx * cdx + cdy * cdy) * (std::abs(adx * bdy) + std::abs(ady * bdx));
        return det > 1e-15L * mag;
    }

    bool contains(const Tri& t, const Point2& p) const
    {
        for (Index e = 0; e < 3; ++e)
            if (orient(pts_[t.v[(e + 1) % 3]], pts_[t.v[(e + 2) % 3]], p) < 0.0L) return false;
        return true;
    }

    Index locate(const Point2& p) const
    {
        Index t = (last_ >= 0 && tris_[last_].alive) ? last_ : first_alive();
        for (std::size_t steps = 0; steps < 4 * tris_.size() + 16; ++steps) {
            const Tri& tri = tris_[t];
            Index next = -1;
            for (Index e = 0; e < 3; ++e)
                if (orient(pts_[tri.v[(e + 1) % 3]], pts_[tri.v[(e + 2) % 3]], p) < 0.0L) {
                    next = tri.nbr[e];
                    break;
                }
            if (next < 0) return t;
            t = next;
        }
        for (std::size_t i = 0; i < tris_.size(); ++i)
            if (tris_[i].alive && contains(tris_[i], p)) return static_cast<Index>(i);
        throw NumericalError("point location failed during triangulation");
    }

    Index first_alive() const
    {
        for (std::size_t i = tris_.size(); i-- > 0;)
            if (tris_[i].alive) return static_cast<Index>(i);
        throw NumericalError("empty triangulation");
    }

    void stamp(Index t)
    {
        if (mark_.size() < tris_.size()) mark_.resize(tris_.size(), 0);
        mark_[t] = epoch_;
    }
    bool stamped(Index t) const { return t < static_cast<Index>(mark_.size()) && mark_[t] == epoch_; }

    Point2 center_;
    double scale_;
    std::vector<Point2> pts_;
    std::vector<Tri> tris_;
    std::vector<std::uint64_t> mark_;
    std::uint64_t epoch_ = 0;
    Index last_ = -1;
};

} // namespace detail

// ---------------------------------------------------------------------------
// Mesh generation

/// The requested target edge would produce more vertices than allowed.
class MeshTooFineError : public ValidationError {
public:
    using ValidationError::ValidationError;
};

struct MeshOptions {
    double target_edge = 0.1;
    std::vector<RefinementRegion> refinement_regions;
    /// Upper bound on the vertex count (J); 0 disables the check.
    Index max_vertices = 0;
    /// Tolerance for data points lying on the boundary.
    double boundary_tol = 1e-9;
};

namespace detail {

inline double local_target(const Point2& x, const MeshOptions& opt)
{
    double t = opt.target_edge;
    for (const auto& r : opt.refinement_regions)
        if (geometry::point_in_polygon(x, r.polygon)) t = std::min(t, r.target_edge);
    return t;
}

inline void append_lattice(std::vector<Point2>& out, const Polygon& boundary, const Polygon* region, double h,
                           const MeshOptions& opt)
{
    double xmin = std::numeric_limits<double>::infinity(), ymin = xmin;
    double xmax = -xmin, ymax = -xmin;
    const Polygon& box = region ? *region : boundary;
    for (const auto& p : box) {
        xmin = std::min(xmin, p.x());
        xmax = std::max(xmax, p.x());
        ymin = std::min(ymin, p.y());
        ymax = std::max(ymax, p.y());
    }
    const double dy = h * std::sqrt(3.0) / 2.0;
    const auto rows = static_cast<Index>(std::floor((ymax - ymin) / dy)) + 1;
    for (Index r = 0; r <= rows; ++r) {
        const double y = ymin + static_cast<double>(r) * dy;
        const double offset = (r % 2) ? 0.5 * h : 0.0;
        const auto cols = static_cast<Index>(std::floor((xmax - xmin) / h)) + 1;
        for (Index c = 0; c <= cols; ++c) {
            const Point2 p(xmin + offset + static_cast<double>(c) * h, y);
            if (!geometry::point_in_polygon(p, boundary)) continue;
            if (geometry::distance_to_boundary(p, boundary) < 0.5 * h) continue;
            if (region) {
                if (!geometry::point_in_polygon(p, *region)) continue;
            } else {
                bool claimed = false;
                for (const auto& reg : opt.refinement_regions)
                    if (geometry::point_in_polygon(p, reg.polygon)) claimed = true;
                if (claimed) continue;
            }
            const double keep = 0.5 * local_target(p, opt);
            bool close = false;
            for (const auto& q : out)
                if ((q - p).norm() < keep) {
                    close = true;
                    break;
                }
            if (!close) out.push_back(p);
        }
    }
}

} // namespace detail

/// Builds a conforming Delaunay mesh of the polygon with every edge no longer
/// than the local target (the smallest target among regions containing the
/// edge midpoint, else `target_edge`). `domain_points` must lie inside or on
/// the boundary.
inline TriangulatedDomain triangulate(const Eigen::Ref<const Matrix>& domain_points, Polygon boundary,
                                      const MeshOptions& opt)
{
    require(opt.target_edge > 0.0, "target edge length must be positive");
    for (const auto& r : opt.refinement_regions) {
        require(r.target_edge > 0.0, "refinement region target must be positive");
        require(geometry::is_simple(r.polygon), "refinement region polygon not simple");
    }
    if (boundary.size() < 3 || !geometry::is_simple(boundary)) throw ValidationError("boundary not simple");
    if (geometry::signed_area(boundary) < 0.0) std::reverse(boundary.begin(), boundary.end());
    require(domain_points.cols() == 2 || domain_points.rows() == 0, "domain points must be planar");
    for (Index i = 0; i < domain_points.rows(); ++i) {
        const Point2 p(domain_points(i, 0), domain_points(i, 1));
        if (!geometry::inside_or_on(p, boundary, opt.boundary_tol))
            throw ValidationError("domain point " + std::to_string(i) + " lies outside the boundary");
    }

    Point2 lo = boundary[0], hi = boundary[0];
    for (const auto& p : boundary) {
        lo = lo.cwiseMin(p);
        hi = hi.cwiseMax(p);
    }
    const double scale = std::max((hi - lo).maxCoeff(), 1e-300);
    detail::Delaunay dt(0.5 * (lo + hi), scale);
    std::vector<Point2> coords; // original coordinates by vertex id (super vertices included)
    for (Index s = 0; s < detail::Delaunay::super_count; ++s) coords.emplace_back(0.0, 0.0);

    auto add = [&](const Point2& p) {
        const Index id = dt.insert(p);
        coords.push_back(p);
        return id;
    };
    const Index vertex_cap = opt.max_vertices > 0 ? opt.max_vertices : std::numeric_limits<Index>::max();
    const Index hard_cap = 2'000'000;
    auto check_cap = [&] {
        const Index live = static_cast<Index>(coords.size()) - detail::Delaunay::super_count;
        if (live > vertex_cap)
            throw MeshTooFineError("target edge too small: mesh needs more than " + std::to_string(vertex_cap) +
                                  " vertices (J > P)");
        if (live > hard_cap) throw NumericalError("mesh refinement exceeded the vertex limit");
    };

    // Boundary vertices and subdivided subsegments.
    std::vector<std::pair<Index, Index>> segments;
    {
        std::vector<Index> corner(boundary.size());
        for (std::size_t i = 0; i < boundary.size(); ++i) corner[i] = add(boundary[i]);
        for (std::size_t i = 0; i < boundary.size(); ++i) {
            const Point2& a = boundary[i];
            const Point2& b = boundary[(i + 1) % boundary.size()];
            const double h = detail::local_target(0.5 * (a + b), opt);
            const auto pieces = static_cast<Index>(std::ceil((b - a).norm() / h - 1e-9));
            Index prev = corner[i];
            for (Index s = 1; s < pieces; ++s) {
                const Index id = add(a + (b - a) * (static_cast<double>(s) / static_cast<double>(pieces)));
                segments.emplace_back(prev, id);
                prev = id;
            }
            segments.emplace_back(prev, corner[(i + 1) % boundary.size()]);
        }
    }
    check_cap();

    // Interior seeds on triangular lattices (finest regions first).
    {
        std::vector<Point2> seeds;
        std::vector<std::size_t> order(opt.refinement_regions.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
            return opt.refinement_regions[a].target_edge < opt.refinement_regions[b].target_edge;
        });
        for (std::size_t i : order)
            detail::append_lattice(seeds, boundary, &opt.refinement_regions[i].polygon,
                                   opt.refinement_regions[i].target_edge, opt);
        detail::append_lattice(seeds, boundary, nullptr, opt.target_edge, opt);
        if (static_cast<Index>(seeds.size() + coords.size()) - detail::Delaunay::super_count > vertex_cap)
            throw MeshTooFineError("target edge too small: mesh needs more than " + std::to_string(vertex_cap) +
                                  " vertices (J > P)");
        for (const auto& s : seeds) add(s);
    }

    auto triangle_inside = [&](const detail::Delaunay::Tri& t) {
        for (Index v : t.v)
            if (v < detail::Delaunay::super_count) return false;
        const Point2 c = (coords[t.v[0]] + coords[t.v[1]] + coords[t.v[2]]) / 3.0;
        return geometry::point_in_polygon(c, boundary);
    };

    auto encroached_segment = [&](const Point2& p) -> Index {
        for (std::size_t s = 0; s < segments.size(); ++s) {
            const Point2& a = coords[segments[s].first];
            const Point2& b = coords[segments[s].second];
            const Point2 mid = 0.5 * (a + b);
            if ((p - mid).squaredNorm() < 0.25 * (b - a).squaredNorm() * (1.0 - 1e-9)) return static_cast<Index>(s);
        }
        return -1;
    };

    auto split_segment = [&](std::size_t s) {
        const auto [a, b] = segments[s];
        const Index m = add(0.5 * (coords[a] + coords[b]));
        segments[s] = {a, m};
        segments.emplace_back(m, b);
    };

    for (int round = 0;; ++round) {
        // Recover missing boundary subsegments.
        for (;;) {
            std::set<std::pair<Index, Index>> edges;
            for (const auto& t : dt.triangles()) {
                if (!t.alive) continue;
                for (Index k = 0; k < 3; ++k) {
                    const Index x = t.v[k], y = t.v[(k + 1) % 3];
                    edges.emplace(std::min(x, y), std::max(x, y));
                }
            }
            std::vector<std::size_t> missing;
            for (std::size_t s = 0; s < segments.size(); ++s) {
                const auto [a, b] = segments[s];
                if (!edges.count({std::min(a, b), std::max(a, b)})) missing.push_back(s);
            }
            if (missing.empty()) break;
            for (std::size_t s : missing) split_segment(s);
            check_cap();
        }

        // Edges of interior triangles that exceed their local target.
        std::set<std::pair<Index, Index>> seen;
        std::vector<std::tuple<double, Index, Index>> long_edges;
        for (const auto& t : dt.triangles()) {
            if (!t.alive || !triangle_inside(t)) continue;
            for (Index k = 0; k < 3; ++k) {
                const Index x = std::min(t.v[k], t.v[(k + 1) % 3]);
                const Index y = std::max(t.v[k], t.v[(k + 1) % 3]);
                if (!seen.emplace(x, y).second) continue;
                const double len = (coords[x] - coords[y]).norm();
                const double target = detail::local_target(0.5 * (coords[x] + coords[y]), opt);
                if (len > target * (1.0 + 1e-9)) long_edges.emplace_back(-len, x, y);
            }
        }
        if (long_edges.empty()) break;
        std::sort(long_edges.begin(), long_edges.end());

        std::set<Index> touched_segments;
        std::vector<Point2> interior;
        for (const auto& [neg_len, x, y] : long_edges) {
            Index seg = -1;
            for (std::size_t s = 0; s < segments.size(); ++s) {
                const auto [a, b] = segments[s];
                if ((a == x && b == y) || (a == y && b == x)) seg = static_cast<Index>(s);
            }
            const Point2 mid = 0.5 * (coords[x] + coords[y]);
            if (seg < 0) seg = encroached_segment(mid);
            if (seg >= 0) {
                touched_segments.insert(seg);
            } else {
                interior.push_back(mid);
            }
        }
        for (auto it = touched_segments.rbegin(); it != touched_segments.rend(); ++it)
            split_segment(static_cast<std::size_t>(*it));
        for (const auto& p : interior)
            if (encroached_segment(p) < 0) add(p);
        check_cap();
        if (round > 10000) throw NumericalError("mesh refinement did not terminate");
    }

    // Collect interior triangles and compact vertex ids in insertion order.
    std::vector<std::array<Index, 3>> tris;
    for (const auto& t : dt.triangles())
        if (t.alive && triangle_inside(t)) tris.push_back(t.v);
    if (tris.empty()) throw NumericalError("triangulation produced no interior triangles");
    std::vector<Index> remap(coords.size(), -1);
    {
        std::vector<char> used(coords.size(), 0);
        for (const auto& t : tris)
            for (Index v : t) used[v] = 1;
        Index next = 0;
        for (std::size_t v = 0; v < coords.size(); ++v)
            if (used[v]) remap[v] = next++;
    }
    std::sort(tris.begin(), tris.end(), [&](const auto& a, const auto& b) {
        std::array<Index, 3> ka{remap[a[0]], remap[a[1]], remap[a[2]]};
        std::array<Index, 3> kb{remap[b[0]], remap[b[1]], remap[b[2]]};
        std::rotate(ka.begin(), std::min_element(ka.begin(), ka.end()), ka.end());
        std::rotate(kb.begin(), std::min_element(kb.begin(), kb.end()), kb.end());
        return ka < kb;
    });

    TriangulatedDomain dom;
    Index j = 0;
    for (Index r : remap) j = std::max(j, r + 1);
    dom.vertices.resize(j, 2);
    for (std::size_t v = 0; v < coords.size(); ++v)
        if (remap[v] >= 0) dom.vertices.row(remap[v]) = coords[v].transpose();
    dom.triangles.resize(static_cast<Index>(tris.size()), 3);
    for (std::size_t t = 0; t < tris.size(); ++t) {
        std::array<Index, 3> k{remap[tris[t][0]], remap[tris[t][1]], remap[tris[t][2]]};
        std::rotate(k.begin(), std::min_element(k.begin(), k.end()), k.end());
        for (Index c = 0; c < 3; ++c) dom.triangles(static_cast<Index>(t), c) = k[c];
    }
    dom.refinement_regions = opt.refinement_regions;
    if (opt.max_vertices > 0 && dom.vertex_count() > opt.max_vertices)
        throw MeshTooFineError("target edge too small: mesh has J = " + std::to_string(dom.vertex_count()) +
                              " > " + std::to_string(opt.max_vertices) + " vertices (J > P)");
    return dom;
}

// ---------------------------------------------------------------------------
// Validation and topology

/// Ordered boundary loop from edges used by exactly one triangle.
inline std::vector<Index> boundary_loop(Index vertex_count, const Eigen::Matrix<Index, Eigen::Dynamic, 3>& tris)
{
    std::map<std::pair<Index, Index>, int> count;
    for (Index t = 0; t < tris.rows(); ++t)
        for (Index k = 0; k < 3; ++k) {
            const Index a = tris(t, k), b = tris(t, (k + 1) % 3);
            ++count[{std::min(a, b), std::max(a, b)}];
        }
    std::map<Index, Index> next;
    for (Index t = 0; t < tris.rows(); ++t)
        for (Index k = 0; k < 3; ++k) {
            const Index a = tris(t, k), b = tris(t, (k + 1) % 3);
            const int c = count[{std::min(a, b), std::max(a, b)}];
            if (c > 2) throw ValidationError("non-manifold edge in mesh");
            if (c == 1) {
                if (next.count(a)) throw ValidationError("mesh boundary is not a single simple loop");
                next[a] = b;
            }
        }
    if (next.empty()) throw ValidationError("mesh has no boundary");
    std::vector<Index> loop;
    const Index start = next.begin()->first;
    Index v = start;
    do {
        loop.push_back(v);
        auto it = next.find(v);
        if (it == next.end()) throw ValidationError("mesh boundary is open");
        v = it->second;
        if (static_cast<Index>(loop.size()) > vertex_count) throw ValidationError("mesh boundary is malformed");
    } while (v != start);
    if (loop.size() != next.size()) throw ValidationError("mesh boundary has more than one loop (holes unsupported)");
    return loop;
}

inline double triangle_area(const TriangulatedDomain& dom, Index t)
{
    const Point2 a = dom.vertex(dom.triangles(t, 0));
    const Point2 b = dom.vertex(dom.triangles(t, 1));
    const Point2 c = dom.vertex(dom.triangles(t, 2));
    return 0.5 * geometry::cross(a, b, c);
}

/// Checks orientation, non-degeneracy and manifoldness; fills `boundary`.
inline void finalize_domain(TriangulatedDomain& dom)
{
    require(dom.vertices.cols() == 2, "mesh vertices must be planar");
    require(dom.triangle_count() > 0, "mesh has no triangles");
    double extent = (dom.vertices.colwise().maxCoeff() - dom.vertices.colwise().minCoeff()).maxCoeff();
    for (Index t = 0; t < dom.triangle_count(); ++t) {
        for (Index c = 0; c < 3; ++c)
            require(dom.triangles(t, c) >= 0 && dom.triangles(t, c) < dom.vertex_count(),
                    "triangle references a missing vertex");
        double a = triangle_area(dom, t);
        if (a < 0.0) {
            std::swap(dom.triangles(t, 1), dom.triangles(t, 2));
            a = -a;
        }
        if (!(a > 1e-14 * extent * extent))
            throw ValidationError("degenerate triangle " + std::to_string(t) + " (zero area)");
    }
    dom.boundary = boundary_loop(dom.vertex_count(), dom.triangles);
}

inline Polygon boundary_polygon(const TriangulatedDomain& dom)
{
    Polygon poly;
    for (Index v : dom.boundary) poly.push_back(dom.vertex(v));
    return poly;
}

// ---------------------------------------------------------------------------
// OFF text format (z written as 0)

inline void write_off(const std::filesystem::path& path, const TriangulatedDomain& dom)
{
    auto os = detail::open_out(path, false);
    os << "OFF\n" << dom.vertex_count() << ' ' << dom.triangle_count() << " 0\n";
    for (Index v = 0; v < dom.vertex_count(); ++v)
        os << format_double(dom.vertices(v, 0)) << ' ' << format_double(dom.vertices(v, 1)) << " 0\n";
    for (Index t = 0; t < dom.triangle_count(); ++t)
        os << "3 " << dom.triangles(t, 0) << ' ' << dom.triangles(t, 1) << ' ' << dom.triangles(t, 2) << '\n';
    if (!os) throw ValidationError("write failed for '" + path.string() + "'");
}

inline TriangulatedDomain read_off(const std::filesystem::path& path)
{
    auto is = detail::open_in(path, false);
    std::vector<std::string> tokens;
    std::string line;
    while (std::getline(is, line)) {
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        std::istringstream ss(line);
        std::string tok;
        while (ss >> tok) tokens.push_back(tok);
    }
    std::size_t pos = 0;
    auto next = [&]() -> const std::string& {
        if (pos >= tokens.size()) throw ValidationError("truncated OFF file '" + path.string() + "'");
        return tokens[pos++];
    };
    if (next() != "OFF") throw ValidationError("'" + path.string() + "' is not an OFF file");
    auto to_index = [&](const std::string& s) {
        const double v = parse_double(s, path.string());
        if (v < 0 || v != std::floor(v)) throw ValidationError("bad integer in OFF file");
        return static_cast<Index>(v);
    };
    const Index nv = to_index(next());
    const Index nf = to_index(next());
    next();
    TriangulatedDomain dom;
    dom.vertices.resize(nv, 2);
    for (Index v = 0; v < nv; ++v) {
        dom.vertices(v, 0) = parse_double(next(), path.string());
        dom.vertices(v, 1) = parse_double(next(), path.string());
        if (parse_double(next(), path.string()) != 0.0)
            throw ValidationError("OFF mesh is not planar (nonzero z)");
    }
    dom.triangles.resize(nf, 3);
    for (Index f = 0; f < nf; ++f) {
        if (to_index(next()) != 3) throw ValidationError("OFF mesh has non-triangular faces");
        for (Index c = 0; c < 3; ++c) dom.triangles(f, c) = to_index(next());
    }
    finalize_domain(dom);
    return dom;
}

} // namespace mda
