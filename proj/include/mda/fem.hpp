#pragma once

// P1 finite elements on a TriangulatedDomain: mass/stiffness assembly, a
// discrete squared-Laplacian penalty, basis evaluation and penalized fits.

#include "mda/mesh.hpp"
#include "mda/shape.hpp"

#include <Eigen/SparseCholesky>

namespace mda {

struct FemMatrices {
    SparseMatrix mass;      // Gram matrix Z of the hat functions
    SparseMatrix stiffness; // integrals of grad e_i . grad e_j
    Vector lumped_mass;     // row sums of mass
    SparseMatrix penalty;   // discrete integral of (Laplacian)^2
};

namespace detail {

inline std::vector<std::vector<Index>> vertex_neighbors(const TriangulatedDomain& dom)
{
    std::vector<std::set<Index>> sets(dom.vertex_count());
    for (Index t = 0; t < dom.triangle_count(); ++t)
        for (Index a = 0; a < 3; ++a)
            for (Index b = 0; b < 3; ++b)
                if (a != b) sets[dom.triangles(t, a)].insert(dom.triangles(t, b));
    std::vector<std::vector<Index>> out(sets.size());
    for (std::size_t i = 0; i < sets.size(); ++i) out[i].assign(sets[i].begin(), sets[i].end());
    return out;
}

/// Vertices within `rings` graph steps of v (v included), sorted.
inline std::vector<Index> ring(const std::vector<std::vector<Index>>& nbrs, Index v, int rings)
{
    std::set<Index> seen{v};
    std::vector<Index> frontier{v};
    for (int r = 0; r < rings; ++r) {
        std::vector<Index> next;
        for (Index u : frontier)
            for (Index w : nbrs[u])
                if (seen.insert(w).second) next.push_back(w);
        frontier = std::move(next);
    }
    return {seen.begin(), seen.end()};
}

/// Rows (2 per vertex) of a linear map from nodal values to a recovered
/// gradient at v, by local least squares. Quadratic fits are exact on
/// quadratics; the linear fallback on affine functions.
inline std::optional<Matrix> gradient_stencil(const TriangulatedDomain& dom, Index v,
                                              const std::vector<Index>& patch, bool quadratic)
{
    const Index n = static_cast<Index>(patch.size());
    const Index cols = quadratic ? 6 : 3;
    if (n < cols) return std::nullopt;
    const Point2 c = dom.vertex(v);
    double h = 0.0;
    for (Index p : patch) h = std::max(h, (dom.vertex(p) - c).norm());
    if (!(h > 0.0)) return std::nullopt;
    Matrix vand(n, cols);
    for (Index i = 0; i < n; ++i) {
        const Point2 d = (dom.vertex(patch[i]) - c) / h;
        vand(i, 0) = 1.0;
        vand(i, 1) = d.x();
        vand(i, 2) = d.y();
        if (quadratic) {
            vand(i, 3) = d.x() * d.x();
            vand(i, 4) = d.x() * d.y();
            vand(i, 5) = d.y() * d.y();
        }
    }
    Eigen::JacobiSVD<Matrix> svd(vand, Eigen::ComputeThinU | Eigen::ComputeThinV);
    const Vector s = svd.singularValues();
    if (s(cols - 1) < 1e-8 * s(0)) return std::nullopt;
    const Matrix pinv = svd.matrixV() * s.cwiseInverse().asDiagonal() * svd.matrixU().transpose();
    return Matrix(pinv.middleRows(1, 2) / h);
}

} // namespace detail

/// Exact P1 mass and stiffness; penalty = L^T M_L^{-1} L with
/// L = -A + T R, where A is the stiffness, R recovers boundary gradients and
/// T integrates the outward normal flux against each hat function. The flux
/// term makes L vanish on affine fields under free boundaries.
inline FemMatrices assemble(const TriangulatedDomain& dom)
{
    const Index j = dom.vertex_count();
    require(j >= 3 && dom.triangle_count() >= 1, "mesh too small to assemble");
    std::vector<Triplet> mt, st;
    mt.reserve(9 * dom.triangle_count());
    st.reserve(9 * dom.triangle_count());
    for (Index t = 0; t < dom.triangle_count(); ++t) {
        const Index v[3] = {dom.triangles(t, 0), dom.triangles(t, 1), dom.triangles(t, 2)};
        const Point2 p[3] = {dom.vertex(v[0]), dom.vertex(v[1]), dom.vertex(v[2])};
        const double area2 = geometry::cross(p[0], p[1], p[2]);
        if (!(std::abs(area2) > 0.0)) throw ValidationError("degenerate triangle " + std::to_string(t));
        const double area = 0.5 * std::abs(area2);
        // grad phi_i = perp(p_{i+2} - p_{i+1}) / (2 area), CCW
        Point2 g[3];
        for (int i = 0; i < 3; ++i) {
            const Point2 e = p[(i + 2) % 3] - p[(i + 1) % 3];
            g[i] = Point2(-e.y(), e.x()) / area2;
        }
        for (int a = 0; a < 3; ++a)
            for (int b = 0; b < 3; ++b) {
                mt.emplace_back(v[a], v[b], area * (a == b ? 1.0 / 6.0 : 1.0 / 12.0));
                st.emplace_back(v[a], v[b], area * g[a].dot(g[b]));
            }
    }
    FemMatrices fem;
    fem.mass.resize(j, j);
    fem.mass.setFromTriplets(mt.begin(), mt.end());
    fem.stiffness.resize(j, j);
    fem.stiffness.setFromTriplets(st.begin(), st.end());
    fem.lumped_mass = fem.mass * Vector::Ones(j);

    std::vector<Index> boundary = dom.boundary;
    if (boundary.empty()) boundary = boundary_loop(j, dom.triangles);
    const auto nbrs = detail::vertex_neighbors(dom);

    // Gradient recovery rows, keyed by boundary vertex.
    std::map<Index, std::pair<std::vector<Index>, Matrix>> stencil;
    for (Index v : boundary) {
        std::optional<Matrix> rows;
        std::vector<Index> patch;
        for (int rings = 2; rings <= 3 && !rows; ++rings) {
            patch = detail::ring(nbrs, v, rings);
            rows = detail::gradient_stencil(dom, v, patch, true);
        }
        if (!rows) {
            patch = detail::ring(nbrs, v, 1);
            rows = detail::gradient_stencil(dom, v, patch, false);
        }
        if (!rows) throw NumericalError("cannot recover a boundary gradient at vertex " + std::to_string(v));
        stencil.emplace(v, std::make_pair(patch, *rows));
    }

    // Flux: for a boundary edge (a,b) of length l and outward normal n,
    // int phi_a (n . g) ds = l/3 n.g_a + l/6 n.g_b with g linear along the edge.
    std::vector<Triplet> lt;
    for (Index c = 0; c < fem.stiffness.outerSize(); ++c)
        for (SparseMatrix::InnerIterator it(fem.stiffness, c); it; ++it) lt.emplace_back(it.row(), it.col(), -it.value());
    const std::size_t nb = boundary.size();
    for (std::size_t e = 0; e < nb; ++e) {
        const Index a = boundary[e];
        const Index b = boundary[(e + 1) % nb];
        const Point2 d = dom.vertex(b) - dom.vertex(a);
        const double len = d.norm();
        const Point2 normal = Point2(d.y(), -d.x()) / len; // outward for a CCW loop
        const Index ends[2] = {a, b};
        for (int self = 0; self < 2; ++self)
            for (int src = 0; src < 2; ++src) {
                const double w = len * (self == src ? 1.0 / 3.0 : 1.0 / 6.0);
                const auto& [patch, rows] = stencil.at(ends[src]);
                for (std::size_t k = 0; k < patch.size(); ++k) {
                    const double coef = w * (normal.x() * rows(0, k) + normal.y() * rows(1, k));
                    if (coef != 0.0) lt.emplace_back(ends[self], patch[k], coef);
                }
            }
    }
    SparseMatrix lap(j, j);
    lap.setFromTriplets(lt.begin(), lt.end());
    const Vector inv_lumped = fem.lumped_mass.cwiseInverse();
    SparseMatrix pen = SparseMatrix(lap.transpose()) * inv_lumped.asDiagonal() * lap;
    fem.penalty = 0.5 * (pen + SparseMatrix(pen.transpose()));
    fem.penalty.prune(0.0);
    return fem;
}

// ---------------------------------------------------------------------------
// Point location and basis evaluation

/// Static uniform grid over triangle bounding boxes.
class PointLocator {
public:
    explicit PointLocator(const TriangulatedDomain& dom, double snap_tol = 1e-9) : dom_(&dom), snap_(snap_tol)
    {
        lo_ = dom.vertices.colwise().minCoeff().transpose();
        hi_ = dom.vertices.colwise().maxCoeff().transpose();
        const double extent = std::max((hi_ - lo_).maxCoeff(), 1e-300);
        const auto cells = static_cast<Index>(std::ceil(std::sqrt(static_cast<double>(dom.triangle_count()))));
        nx_ = ny_ = std::max<Index>(1, cells);
        cell_ = Point2((hi_.x() - lo_.x()) / nx_, (hi_.y() - lo_.y()) / ny_);
        if (!(cell_.x() > 0.0)) cell_.x() = extent;
        if (!(cell_.y() > 0.0)) cell_.y() = extent;
        grid_.assign(nx_ * ny_, {});
        const double pad = snap_ * std::max(1.0, extent);
        for (Index t = 0; t < dom.triangle_count(); ++t) {
            Point2 a = dom.vertex(dom.triangles(t, 0)), b = a;
            for (Index c = 1; c < 3; ++c) {
                a = a.cwiseMin(dom.vertex(dom.triangles(t, c)));
                b = b.cwiseMax(dom.vertex(dom.triangles(t, c)));
            }
            const auto [i0, j0] = cell_of(a - Point2::Constant(pad));
            const auto [i1, j1] = cell_of(b + Point2::Constant(pad));
            for (Index i = i0; i <= i1; ++i)
                for (Index jj = j0; jj <= j1; ++jj) grid_[jj * nx_ + i].push_back(t);
        }
        pad_ = pad;
    }

    struct Hit {
        Index triangle = -1;
        Eigen::Vector3d bary;
    };

    /// Containing triangle (lowest index on shared edges) with barycentric
    /// weights; points within the snap tolerance outside are projected in.
    std::optional<Hit> locate(const Point2& p) const
    {
        if (p.x() < lo_.x() - pad_ || p.y() < lo_.y() - pad_ || p.x() > hi_.x() + pad_ || p.y() > hi_.y() + pad_)
            return std::nullopt;
        const auto [ci, cj] = cell_of(p);
        const auto& cands = grid_[cj * nx_ + ci];
        std::optional<Hit> best_near;
        double best_dist = std::numeric_limits<double>::infinity();
        for (Index t : cands) {
            const Eigen::Vector3d w = barycentric(t, p);
            if (w.minCoeff() >= -1e-12) {
                Hit h{t, w.cwiseMax(0.0)};
                h.bary /= h.bary.sum();
                return h;
            }
            const double dist = distance_to_triangle(t, p);
            if (dist <= pad_ && dist < best_dist) {
                best_dist = dist;
                Hit h{t, w.cwiseMax(0.0)};
                h.bary /= h.bary.sum();
                best_near = h;
            }
        }
        return best_near;
    }

private:
    std::pair<Index, Index> cell_of(const Point2& p) const
    {
        auto clampi = [](double v, Index n) {
            return std::clamp<Index>(static_cast<Index>(std::floor(v)), 0, n - 1);
        };
        return {clampi((p.x() - lo_.x()) / cell_.x(), nx_), clampi((p.y() - lo_.y()) / cell_.y(), ny_)};
    }

    Eigen::Vector3d barycentric(Index t, const Point2& p) const
    {
        const Point2 a = dom_->vertex(dom_->triangles(t, 0));
        const Point2 b = dom_->vertex(dom_->triangles(t, 1));
        const Point2 c = dom_->vertex(dom_->triangles(t, 2));
        const double area = geometry::cross(a, b, c);
        return {geometry::cross(p, b, c) / area, geometry::cross(a, p, c) / area, geometry::cross(a, b, p) / area};
    }

    double distance_to_triangle(Index t, const Point2& p) const
    {
        double d = std::numeric_limits<double>::infinity();
        for (Index k = 0; k < 3; ++k)
            d = std::min(d, geometry::point_segment_distance(p, dom_->vertex(dom_->triangles(t, k)),
                                                             dom_->vertex(dom_->triangles(t, (k + 1) % 3))));
        return d;
    }

    const TriangulatedDomain* dom_;
    double snap_;
    double pad_ = 0.0;
    Point2 lo_, hi_, cell_;
    Index nx_ = 1, ny_ = 1;
    std::vector<std::vector<Index>> grid_;
};

/// Sparse P x J matrix of hat-function values at the given points.
inline SparseMatrix evaluate_basis(const TriangulatedDomain& dom, const Eigen::Ref<const Matrix>& points,
                                   double snap_tol = 1e-9)
{
    require(points.cols() == 2, "basis evaluation needs planar points");
    const PointLocator loc(dom, snap_tol);
    std::vector<Triplet> trip;
    trip.reserve(3 * points.rows());
    for (Index p = 0; p < points.rows(); ++p) {
        const auto hit = loc.locate(Point2(points(p, 0), points(p, 1)));
        if (!hit) throw ValidationError("point " + std::to_string(p) + " lies outside the mesh");
        for (Index c = 0; c < 3; ++c)
            if (hit->bary(c) != 0.0) trip.emplace_back(p, dom.triangles(hit->triangle, c), hit->bary(c));
    }
    SparseMatrix e(points.rows(), dom.vertex_count());
    e.setFromTriplets(trip.begin(), trip.end());
    return e;
}

// ---------------------------------------------------------------------------
// Penalized fitting

struct FunctionalObject {
    Matrix coeffs; // J x D
    double lambda = 0.0;

    /// Values at points with evaluation matrix E.
    Matrix evaluate(const SparseMatrix& e) const { return e * coeffs; }
};

/// Default smoothing parameter: multiplier * x_range / 1e6.
inline double default_lambda(double x_range, double multiplier = 0.5)
{
    return multiplier * x_range * 1e-6;
}

/// Factorization of (E^T E + lambda * penalty), shared by every unit.
class PenalizedFitter {
public:
    PenalizedFitter(const SparseMatrix& e, const FemMatrices& fem, double lambda) : e_(e), lambda_(lambda)
    {
        require(lambda >= 0.0 && std::isfinite(lambda), "lambda must be finite and non-negative");
        require(e.cols() == fem.penalty.rows(), "evaluation matrix and FEM matrices disagree on J");
        SparseMatrix sys = SparseMatrix(e.transpose()) * e;
        if (lambda > 0.0) sys += lambda * fem.penalty;
        solver_.compute(sys);
        if (solver_.info() != Eigen::Success) throw NumericalError(singular_message());
        const Vector d = solver_.vectorD();
        const double dmax = d.cwiseAbs().maxCoeff();
        if (!(dmax > 0.0) || d.minCoeff() <= 1e-12 * dmax) throw NumericalError(singular_message());
    }

    double lambda() const { return lambda_; }
    Index basis_count() const { return e_.cols(); }

    FunctionalObject fit(const Eigen::Ref<const Matrix>& unit_points) const
    {
        require(unit_points.rows() == e_.rows(), "unit point count does not match the evaluation matrix");
        const Matrix rhs = e_.transpose() * unit_points;
        FunctionalObject f{solver_.solve(rhs), lambda_};
        if (!f.coeffs.allFinite()) throw NumericalError(singular_message());
        return f;
    }

private:
    std::string singular_message() const
    {
        return "singular fitting system (E^T E + lambda*penalty); use lambda > 0 or a coarser mesh";
    }

    SparseMatrix e_;
    double lambda_;
    Eigen::SimplicialLDLT<SparseMatrix> solver_;
};

inline FunctionalObject fit_functional_object(const Eigen::Ref<const Matrix>& unit_points, const SparseMatrix& e,
                                              const FemMatrices& fem, double lambda)
{
    return PenalizedFitter(e, fem, lambda).fit(unit_points);
}

/// Coefficients of every unit as an N x J x D array.
inline Array3 fit_sample(const ShapeSample& sample, const PenalizedFitter& fitter)
{
    std::vector<Matrix> out(sample.size());
    parallel_for(sample.size(), [&](Index n) { out[n] = fitter.fit(sample.unit(n)).coeffs; });
    return Array3::from_slices(out);
}

inline Array3 fit_sample(const ShapeSample& sample, const SparseMatrix& e, const FemMatrices& fem, double lambda)
{
    return fit_sample(sample, PenalizedFitter(e, fem, lambda));
}

/// Average over units and points of squared reconstruction distances.
inline double amse(const ShapeSample& sample, const std::vector<FunctionalObject>& objects, const SparseMatrix& e)
{
    require(static_cast<Index>(objects.size()) == sample.size(), "object count does not match unit count");
    require(e.rows() == sample.point_count(), "evaluation matrix does not match P");
    std::vector<double> per(sample.size());
    parallel_for(sample.size(), [&](Index n) {
        per[n] = (sample.unit(n) - objects[n].evaluate(e)).squaredNorm();
    });
    double s = 0.0;
    for (double v : per) s += v;
    return s / static_cast<double>(sample.size() * sample.point_count());
}

inline double amse(const ShapeSample& sample, const Array3& coeffs, const SparseMatrix& e)
{
    std::vector<FunctionalObject> objs;
    for (const auto& m : coeffs.slices()) objs.push_back({m, 0.0});
    return amse(sample, objs, e);
}

} // namespace mda
