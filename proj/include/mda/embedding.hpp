#pragma once

// Flattening of the reference shape onto a low-dimensional domain.

#include "mda/common.hpp"

#include <map>
#include <optional>
#include <queue>

namespace mda {

/// Symmetrized k-nearest-neighbor graph with Euclidean edge weights.
struct NeighborGraph {
    Index vertex_count = 0;
    Index k = 0;
    // adjacency[i] sorted by neighbor index
    std::vector<std::vector<std::pair<Index, double>>> adjacency;

    Index degree(Index i) const { return static_cast<Index>(adjacency[i].size()); }

    Index edge_count() const
    {
        Index e = 0;
        for (const auto& a : adjacency) e += static_cast<Index>(a.size());
        return e / 2;
    }

    /// Component label per vertex, labels in order of first appearance.
    std::vector<Index> components(Index* count = nullptr) const
    {
        std::vector<Index> label(vertex_count, -1);
        Index next = 0;
        for (Index s = 0; s < vertex_count; ++s) {
            if (label[s] >= 0) continue;
            std::vector<Index> stack{s};
            label[s] = next;
            while (!stack.empty()) {
                const Index v = stack.back();
                stack.pop_back();
                for (auto [u, w] : adjacency[v])
                    if (label[u] < 0) {
                        label[u] = next;
                        stack.push_back(u);
                    }
            }
            ++next;
        }
        if (count) *count = next;
        return label;
    }
};

namespace detail {

/// Indices of the k nearest other points of row i (distance, then index).
inline std::vector<Index> nearest(const Eigen::Ref<const Matrix>& pts, Index i, Index k)
{
    const Index p = pts.rows();
    std::vector<std::pair<double, Index>> d;
    d.reserve(p - 1);
    for (Index j = 0; j < p; ++j)
        if (j != i) d.emplace_back((pts.row(j) - pts.row(i)).squaredNorm(), j);
    std::partial_sort(d.begin(), d.begin() + k, d.end());
    std::vector<Index> out(k);
    for (Index t = 0; t < k; ++t) out[t] = d[t].second;
    return out;
}

} // namespace detail

/// Builds the graph and fails if it is disconnected.
inline NeighborGraph build_neighbor_graph(const Eigen::Ref<const Matrix>& points, Index k)
{
    const Index p = points.rows();
    require(p >= 2, "neighbor graph needs at least 2 points");
    require(k >= 1 && k < p, "neighbor count k must satisfy 1 <= k < P");
    require(points.allFinite(), "non-finite coordinates in neighbor graph input");

    std::vector<std::vector<Index>> knn(p);
    parallel_for(p, [&](Index i) { knn[i] = detail::nearest(points, i, k); });

    std::vector<std::map<Index, double>> adj(p);
    for (Index i = 0; i < p; ++i)
        for (Index j : knn[i]) {
            const double w = (points.row(i) - points.row(j)).norm();
            adj[i][j] = w;
            adj[j][i] = w;
        }
    NeighborGraph g;
    g.vertex_count = p;
    g.k = k;
    g.adjacency.resize(p);
    for (Index i = 0; i < p; ++i) g.adjacency[i].assign(adj[i].begin(), adj[i].end());

    Index count = 0;
    g.components(&count);
    if (count > 1)
        throw ValidationError("graph disconnected (" + std::to_string(count) + " components)");
    return g;
}

enum class EmbeddingMethod { pca, isomap, lle, laplacian_eigenmaps, ltsa, diffusion_map };

inline std::string to_string(EmbeddingMethod m)
{
    switch (m) {
    case EmbeddingMethod::pca: return "pca";
    case EmbeddingMethod::isomap: return "isomap";
    case EmbeddingMethod::lle: return "lle";
    case EmbeddingMethod::laplacian_eigenmaps: return "laplacian_eigenmaps";
    case EmbeddingMethod::ltsa: return "ltsa";
    case EmbeddingMethod::diffusion_map: return "diffusion_map";
    }
    return "?";
}

inline EmbeddingMethod parse_embedding_method(const std::string& s)
{
    for (auto m : {EmbeddingMethod::pca, EmbeddingMethod::isomap, EmbeddingMethod::lle,
                   EmbeddingMethod::laplacian_eigenmaps, EmbeddingMethod::ltsa, EmbeddingMethod::diffusion_map})
        if (to_string(m) == s) return m;
    if (s == "laplacian" || s == "le") return EmbeddingMethod::laplacian_eigenmaps;
    if (s == "diffusion") return EmbeddingMethod::diffusion_map;
    throw ValidationError("unknown embedding method '" + s + "'");
}

struct EmbeddingConfig {
    Index k = 12;
    /// Heat-kernel bandwidth for Laplacian eigenmaps; 0 selects 0/1 weights.
    double heat_bandwidth = 0.0;
    /// Diffusion time.
    double diffusion_t = 1.0;
    /// Diffusion kernel bandwidth (squared distance units); 0 selects the
    /// median squared neighbor distance.
    double diffusion_bandwidth = 0.0;
};

struct DomainEmbedding {
    Matrix coords; // P x d
    EmbeddingMethod method = EmbeddingMethod::ltsa;
    Index dim = 2;
    double x_range = 0.0;
};

namespace detail {

inline double first_coordinate_range(const Matrix& coords)
{
    return coords.col(0).maxCoeff() - coords.col(0).minCoeff();
}

inline Matrix embed_pca(const Eigen::Ref<const Matrix>& pts, Index d)
{
    const Matrix centered = pts.rowwise() - pts.colwise().mean();
    const auto eig = top_eigenpairs(centered.transpose() * centered, d);
    return centered * eig.vectors;
}

/// Dijkstra from every source; ties broken by vertex index.
inline Matrix graph_geodesics(const NeighborGraph& g)
{
    const Index p = g.vertex_count;
    Matrix dist(p, p);
    parallel_for(p, [&](Index s) {
        std::vector<double> d(p, std::numeric_limits<double>::infinity());
        using Item = std::pair<double, Index>;
        std::priority_queue<Item, std::vector<Item>, std::greater<>> pq;
        d[s] = 0.0;
        pq.emplace(0.0, s);
        while (!pq.empty()) {
            auto [du, u] = pq.top();
            pq.pop();
            if (du > d[u]) continue;
            for (auto [v, w] : g.adjacency[u]) {
                const double nd = du + w;
                if (nd < d[v]) {
                    d[v] = nd;
                    pq.emplace(nd, v);
                }
            }
        }
        for (Index j = 0; j < p; ++j) dist(s, j) = d[j];
    });
    if (!dist.allFinite()) throw ValidationError("graph disconnected: geodesic distances undefined");
    return symmetrized(dist);
}

/// Classical MDS on a distance matrix.
inline Matrix classical_mds(const Matrix& dist, Index d)
{
    // B = -1/2 J D^2 J
    const Matrix sq = dist.cwiseAbs2();
    const Vector row_mean = sq.rowwise().mean();
    const double total = sq.mean();
    Matrix b = sq.colwise() - row_mean;
    b.rowwise() -= row_mean.transpose();
    b.array() += total;
    b *= -0.5;
    const auto eig = top_eigenpairs(b, d);
    Matrix coords = eig.vectors;
    for (Index c = 0; c < d; ++c) coords.col(c) *= std::sqrt(std::max(0.0, eig.values(c)));
    return coords;
}

/// Null-space style embedding: eigenvectors 2..d+1 (ascending) of a PSD
/// alignment matrix whose constant vector is the trivial bottom eigenvector.
inline Matrix bottom_nontrivial(const Matrix& m, Index d)
{
    const auto eig = bottom_eigenpairs(m, d + 1);
    Matrix coords = eig.vectors.rightCols(d);
    // Remove the round-off component along the trivial vector.
    coords = coords.rowwise() - coords.colwise().mean();
    for (Index c = 0; c < d; ++c) coords.col(c).normalize();
    fix_signs(coords);
    return coords;
}

inline Matrix local_neighborhood(const Eigen::Ref<const Matrix>& pts, const std::vector<Index>& idx)
{
    Matrix m(static_cast<Index>(idx.size()), pts.cols());
    for (std::size_t t = 0; t < idx.size(); ++t) m.row(static_cast<Index>(t)) = pts.row(idx[t]);
    return m;
}

} // namespace detail

/// Locally linear reconstruction weights: row i holds weights over the k
/// nearest neighbors of i, solving the (regularized) local Gram system and
/// summing to one.
inline SparseMatrix lle_weights(const Eigen::Ref<const Matrix>& pts, Index k)
{
    const Index p = pts.rows();
    std::vector<std::vector<Index>> nb(p);
    std::vector<Vector> w(p);
    parallel_for(p, [&](Index i) {
        nb[i] = detail::nearest(pts, i, k);
        const Matrix z = detail::local_neighborhood(pts, nb[i]).rowwise() - pts.row(i);
        Matrix c = z * z.transpose();
        Eigen::FullPivLU<Matrix> lu(c);
        const double tr = c.trace();
        if (lu.rank() < k) c.diagonal().array() += 1e-3 * (tr > 0.0 ? tr : 1.0) / static_cast<double>(k);
        Eigen::LDLT<Matrix> ldlt(c);
        Vector wi = ldlt.solve(Vector::Ones(k));
        if (ldlt.info() != Eigen::Success || !wi.allFinite() || std::abs(wi.sum()) < 1e-300)
            throw NumericalError("LLE local Gram singular at point " + std::to_string(i));
        w[i] = wi / wi.sum();
    });
    std::vector<Triplet> trip;
    for (Index i = 0; i < p; ++i)
        for (Index t = 0; t < k; ++t) trip.emplace_back(i, nb[i][t], w[i](t));
    SparseMatrix W(p, p);
    W.setFromTriplets(trip.begin(), trip.end());
    return W;
}

/// Embeds the points into R^d. Graph methods use k from the config.
inline DomainEmbedding embed(const Eigen::Ref<const Matrix>& points, EmbeddingMethod method,
                             const EmbeddingConfig& cfg = {}, Index d = 2)
{
    const Index p = points.rows();
    require(points.allFinite(), "non-finite coordinates in embedding input");
    require(d >= 1 && d < points.cols(), "embedding dimension d must satisfy 1 <= d < D");
    require(p > d + 1, "too few points to embed");

    DomainEmbedding out;
    out.method = method;
    out.dim = d;

    if (method == EmbeddingMethod::pca) {
        out.coords = detail::embed_pca(points, d);
    } else {
        const Index k = cfg.k;
        require(k >= d + 1, "neighbor count k must be at least d+1");
        const NeighborGraph g = build_neighbor_graph(points, k);

        switch (method) {
        case EmbeddingMethod::isomap: {
            out.coords = detail::classical_mds(detail::graph_geodesics(g), d);
            break;
        }
        case EmbeddingMethod::laplacian_eigenmaps: {
            Matrix w = Matrix::Zero(p, p);
            for (Index i = 0; i < p; ++i)
                for (auto [j, dist] : g.adjacency[i])
                    w(i, j) = cfg.heat_bandwidth > 0.0 ? std::exp(-dist * dist / cfg.heat_bandwidth) : 1.0;
            const Vector deg = w.rowwise().sum();
            const Vector inv_sqrt = deg.cwiseSqrt().cwiseInverse();
            const Matrix lsym =
                Matrix::Identity(p, p) - inv_sqrt.asDiagonal() * w * inv_sqrt.asDiagonal();
            // Generalized problem L f = mu D f via f = D^{-1/2} g.
            const auto eig = bottom_eigenpairs(lsym, d + 1);
            Matrix coords = inv_sqrt.asDiagonal() * eig.vectors.rightCols(d);
            for (Index c = 0; c < d; ++c) coords.col(c).normalize();
            fix_signs(coords);
            out.coords = coords;
            break;
        }
        case EmbeddingMethod::lle: {
            const SparseMatrix W = lle_weights(points, k);
            const Matrix iw = Matrix::Identity(p, p) - Matrix(W);
            Matrix coords = detail::bottom_nontrivial(iw.transpose() * iw, d);
            coords *= std::sqrt(static_cast<double>(p));
            out.coords = coords;
            break;
        }
        case EmbeddingMethod::ltsa: {
            Matrix b = Matrix::Zero(p, p);
            std::vector<std::vector<Index>> nbh(p);
            std::vector<Matrix> gi(p);
            parallel_for(p, [&](Index i) {
                std::vector<Index> idx{i};
                for (Index j : detail::nearest(points, i, k)) idx.push_back(j);
                const Matrix local = detail::local_neighborhood(points, idx);
                const Matrix centered = local.rowwise() - local.colwise().mean();
                Eigen::JacobiSVD<Matrix> svd(centered, Eigen::ComputeThinU);
                const Index m = static_cast<Index>(idx.size());
                Matrix g(m, d + 1);
                g.col(0).setConstant(1.0 / std::sqrt(static_cast<double>(m)));
                g.rightCols(d) = svd.matrixU().leftCols(d);
                nbh[i] = std::move(idx);
                gi[i] = std::move(g);
            });
            // Fixed accumulation order over neighborhoods.
            for (Index i = 0; i < p; ++i) {
                const auto& idx = nbh[i];
                const Index m = static_cast<Index>(idx.size());
                const Matrix local = Matrix::Identity(m, m) - gi[i] * gi[i].transpose();
                for (Index a = 0; a < m; ++a)
                    for (Index c = 0; c < m; ++c) b(idx[a], idx[c]) += local(a, c);
            }
            out.coords = detail::bottom_nontrivial(b, d);
            break;
        }
        case EmbeddingMethod::diffusion_map: {
            std::vector<double> sq;
            for (Index i = 0; i < p; ++i)
                for (auto [j, dist] : g.adjacency[i])
                    if (j > i) sq.push_back(dist * dist);
            double eps = cfg.diffusion_bandwidth;
            if (eps <= 0.0) {
                std::nth_element(sq.begin(), sq.begin() + sq.size() / 2, sq.end());
                eps = sq[sq.size() / 2];
            }
            require(eps > 0.0, "diffusion bandwidth must be positive");
            Matrix kmat = Matrix::Identity(p, p);
            for (Index i = 0; i < p; ++i)
                for (auto [j, dist] : g.adjacency[i]) kmat(i, j) = std::exp(-dist * dist / eps);
            const Vector deg = kmat.rowwise().sum();
            const Vector inv_sqrt = deg.cwiseSqrt().cwiseInverse();
            const Matrix a = inv_sqrt.asDiagonal() * kmat * inv_sqrt.asDiagonal();
            const auto eig = top_eigenpairs(a, d + 1);
            // Right eigenvectors of D^{-1} K, normalized so the trivial one is 1.
            Matrix psi = inv_sqrt.asDiagonal() * eig.vectors;
            const double s0 = psi.col(0).mean();
            Matrix coords(p, d);
            for (Index c = 0; c < d; ++c)
                coords.col(c) = psi.col(c + 1) / s0 * std::pow(std::max(0.0, eig.values(c + 1)), cfg.diffusion_t);
            fix_signs(coords);
            out.coords = coords;
            break;
        }
        case EmbeddingMethod::pca: break;
        }
    }
    if (!out.coords.allFinite()) throw NumericalError("embedding produced non-finite coordinates");
    out.x_range = detail::first_coordinate_range(out.coords);
    if (!(out.x_range > 0.0)) throw NumericalError("embedding collapsed: first coordinate has zero range");
    return out;
}

} // namespace mda
