#pragma once

// Synthetic manifold samples over a disk chart and a power study comparing
// functional PCR with multivariate PCR on the stacked raw coordinates.

#include "mda/inference.hpp"

namespace mda {

struct SimConfig {
    double delta = 0.0;
    Index N = 100;
    Index replicates = 500;
    double noise_sd = std::sqrt(0.002);
    double alpha = 0.05;
    std::uint64_t seed = 7;

    Index P = 500;
    double mesh_edge = 0.2;
    double fit_lambda = 1e-6;
    Index H = 30;
    Index K = 20;
    double energy = 0.99;
    double mv_variance = 0.99;

    /// Scale of the coefficient field beta.
    double beta_amplitude = 0.0025;
    /// Squared-exponential length scale of the error field.
    double eps_length = 3.0;
    /// Per-coordinate standard deviations of the error field.
    std::array<double, 3> eps_sd{0.02, 0.02, 1.0};
};

/// Disk sites, the base surface, beta, and a Karhunen-Loeve factor of the
/// error covariance, shared by every replicate of a study.
struct SimDesign {
    Matrix chart;  // P x 2 sunflower sites in the unit disk
    Matrix base;   // P x 3
    Matrix beta;   // P x 3
    Matrix kl;     // P x L, columns sqrt(kappa_l) phi_l
};

namespace detail {

inline Matrix sunflower_disk(Index p)
{
    Matrix m(p, 2);
    const double golden = std::numbers::pi * (3.0 - std::sqrt(5.0));
    for (Index i = 0; i < p; ++i) {
        const double r = std::sqrt((static_cast<double>(i) + 0.5) / static_cast<double>(p));
        const double th = golden * static_cast<double>(i);
        m(i, 0) = r * std::cos(th);
        m(i, 1) = r * std::sin(th);
    }
    return m;
}

inline double gauss_bump(double x, double y, double cx, double cy, double sx, double sy)
{
    return std::exp(-((x - cx) * (x - cx) / (2.0 * sx * sx) + (y - cy) * (y - cy) / (2.0 * sy * sy)));
}

} // namespace detail

inline SimDesign make_sim_design(const SimConfig& cfg)
{
    require(cfg.P >= 10, "simulation needs P >= 10");
    require(cfg.eps_length > 0.0, "error-field length scale must be positive");
    SimDesign d;
    d.chart = detail::sunflower_disk(cfg.P);
    d.base.resize(cfg.P, 3);
    d.beta.resize(cfg.P, 3);
    for (Index p = 0; p < cfg.P; ++p) {
        const double x = d.chart(p, 0), y = d.chart(p, 1);
        // dome with a nose ridge and two eye sockets
        const double z = 0.5 * std::exp(-(x * x + y * y) / 0.8) + 0.25 * detail::gauss_bump(x, y, 0.0, -0.05, 0.07, 0.2) -
                         0.08 * detail::gauss_bump(x, y, -0.35, 0.3, 0.1, 0.1) -
                         0.08 * detail::gauss_bump(x, y, 0.35, 0.3, 0.1, 0.1);
        d.base.row(p) << x, y, z;
        const double bump = detail::gauss_bump(x, y, 0.3, 0.2, 0.2, 0.2);
        d.beta.row(p) << 0.1 * y, 0.1 * x, 0.6 + 0.8 * x + bump;
    }
    d.beta *= cfg.beta_amplitude;

    Matrix k(cfg.P, cfg.P);
    for (Index a = 0; a < cfg.P; ++a)
        for (Index b = 0; b < cfg.P; ++b)
            k(a, b) = std::exp(-(d.chart.row(a) - d.chart.row(b)).squaredNorm() / (2.0 * cfg.eps_length * cfg.eps_length));
    const EigenPairs eig = top_eigenpairs(k);
    const double total = eig.values.cwiseMax(0.0).sum();
    Index l = 0;
    double acc = 0.0;
    while (l < eig.values.size() && acc < (1.0 - 1e-12) * total && eig.values(l) > 0.0) acc += eig.values(l++);
    d.kl = eig.vectors.leftCols(l) * eig.values.head(l).cwiseSqrt().asDiagonal();
    return d;
}

/// Unit n of replicate r: base + delta X_n beta + eps_n + gamma_n.
inline std::pair<ShapeSample, Vector> generate_synthetic_sample(const SimConfig& cfg, const SimDesign& d,
                                                                Index replicate)
{
    require(cfg.N >= 3, "simulation needs N >= 3");
    require(cfg.delta >= 0.0, "delta must be non-negative");
    const std::uint64_t rep_seed = mix_seed(cfg.seed, static_cast<std::uint64_t>(replicate));
    Vector x(cfg.N);
    {
        RandomStream rng(rep_seed, 0);
        for (Index n = 0; n < cfg.N; ++n) x(n) = rng.normal();
    }
    const Index l = d.kl.cols();
    std::vector<Matrix> units(cfg.N);
    for (Index n = 0; n < cfg.N; ++n) {
        RandomStream rng(rep_seed, static_cast<std::uint64_t>(n) + 1);
        Matrix xi(l, 3);
        for (Index i = 0; i < l; ++i)
            for (Index q = 0; q < 3; ++q) xi(i, q) = rng.normal() * cfg.eps_sd[q];
        Matrix u = d.base + (cfg.delta * x(n)) * d.beta + d.kl * xi;
        for (Index p = 0; p < d.base.rows(); ++p)
            for (Index q = 0; q < 3; ++q) u(p, q) += cfg.noise_sd * rng.normal();
        units[n] = std::move(u);
    }
    return {ShapeSample(std::move(units)), x};
}

namespace detail {

inline std::array<double, 3> test_scores(const Matrix& y, const Vector& covariate, const GlobalTestOptions& opt)
{
    Matrix xm(covariate.size(), 2);
    xm.col(0).setOnes();
    xm.col(1) = covariate;
    const DesignMatrix x = make_design(std::move(xm), {"intercept", "x"});
    const CoefficientField b = ols_beta(x, y);
    const BetaCovariance cov = beta_covariance(x, residual_covariance(x, y, b), 1);
    const auto rep = global_tests(b.B.row(1).transpose(), cov, opt);
    return {rep[1].p_value, rep[2].p_value, rep[0].p_value}; // pc, choi, norm
}

} // namespace detail

/// PCA of the N x (P D) stack keeping components up to the variance
/// threshold, then the three global tests on the retained scores.
/// Returns p-values in the order pc, choi, norm.
inline std::array<double, 3> multivariate_pcr_test(const ShapeSample& sample, const Vector& covariate,
                                                   double variance_threshold = 0.99,
                                                   const GlobalTestOptions& opt = {}, Index* retained = nullptr)
{
    require(covariate.size() == sample.size(), "covariate length does not match N");
    require(variance_threshold > 0.0 && variance_threshold <= 1.0, "variance threshold must lie in (0, 1]");
    const Index n = sample.size(), pd = sample.point_count() * sample.ambient_dim();
    Matrix s(n, pd);
    for (Index i = 0; i < n; ++i) s.row(i) = Eigen::Map<const Matrix>(sample.unit(i).data(), 1, pd);
    s = s.rowwise() - s.colwise().mean();
    // Gram side: eigenvectors of S S^T give scores directly.
    const EigenPairs eig = top_eigenpairs(s * s.transpose() / static_cast<double>(n - 1));
    const Index rank = positive_rank(eig.values);
    require(rank >= 1, "stacked data have no variance");
    const Index keep = variance_threshold >= 1.0 ? rank : energy_truncation(eig.values, variance_threshold);
    if (retained) *retained = keep;
    Matrix y = eig.vectors.leftCols(keep) * eig.values.head(keep).cwiseSqrt().asDiagonal() *
               std::sqrt(static_cast<double>(n - 1));
    return detail::test_scores(y, covariate, opt);
}

/// Precomputed mesh, fitter and Gram factor for the disk chart.
struct FunctionalPipeline {
    TriangulatedDomain mesh;
    FemMatrices fem;
    SparseMatrix E;
    std::unique_ptr<PenalizedFitter> fitter;
    GramFactor gram;

    FunctionalPipeline(const SimConfig& cfg, const SimDesign& d)
    {
        MeshOptions mo;
        mo.target_edge = cfg.mesh_edge;
        mo.max_vertices = cfg.P;
        mesh = triangulate(d.chart, geometry::convex_hull(d.chart), mo);
        finalize_domain(mesh);
        fem = assemble(mesh);
        E = evaluate_basis(mesh, d.chart);
        fitter = std::make_unique<PenalizedFitter>(E, fem, cfg.fit_lambda);
        gram = make_gram(fem.mass);
    }

    std::array<double, 3> test(const ShapeSample& sample, const Vector& covariate, const SimConfig& cfg,
                               const GlobalTestOptions& opt) const
    {
        const Array3 coeffs = fit_sample(sample, *fitter);
        const Index h = std::min<Index>(cfg.H, std::min<Index>(mesh.vertex_count(), sample.size() * 3));
        const Index k = std::min<Index>(cfg.K, h * 3);
        const FpcaModel m = run_fpca(coeffs, gram, h, k);
        return detail::test_scores(m.y, covariate, opt);
    }
};

struct SimRow {
    double delta = 0.0;
    std::string method;
    std::string test;
    double rejection_rate = 0.0;
    Index replicates = 0;
    std::uint64_t seed = 0;
};

struct SimResult {
    std::vector<SimRow> rows;
    /// p[delta][method][test][replicate], methods {multivariate, functional},
    /// tests {pc, choi, norm}.
    std::vector<std::array<std::array<std::vector<double>, 3>, 2>> p_values;
};

inline const std::array<std::string, 2>& sim_methods()
{
    static const std::array<std::string, 2> m{"multivariate", "functional"};
    return m;
}

inline const std::array<std::string, 3>& sim_tests()
{
    static const std::array<std::string, 3> t{"pc", "choi", "norm"};
    return t;
}

/// Replicate r reuses the same random streams at every delta.
inline SimResult run_simulation_study(const SimConfig& base_cfg, const std::vector<double>& deltas)
{
    require(!deltas.empty(), "no deltas given");
    require(base_cfg.replicates >= 1, "replicates must be >= 1");
    for (double d : deltas) require(d >= 0.0 && std::isfinite(d), "deltas must be finite and >= 0");
    const SimDesign design = make_sim_design(base_cfg);
    const FunctionalPipeline functional(base_cfg, design);
    GlobalTestOptions opt;
    opt.energy = base_cfg.energy;

    SimResult res;
    res.p_values.resize(deltas.size());
    for (std::size_t di = 0; di < deltas.size(); ++di) {
        SimConfig cfg = base_cfg;
        cfg.delta = deltas[di];
        for (auto& m : res.p_values[di])
            for (auto& t : m) t.assign(cfg.replicates, 1.0);
        parallel_for(cfg.replicates, [&](Index r) {
            const auto [sample, x] = generate_synthetic_sample(cfg, design, r);
            const auto mv = multivariate_pcr_test(sample, x, cfg.mv_variance, opt);
            const auto fn = functional.test(sample, x, cfg, opt);
            for (int t = 0; t < 3; ++t) {
                res.p_values[di][0][t][r] = mv[t];
                res.p_values[di][1][t][r] = fn[t];
            }
        });
        for (int m = 0; m < 2; ++m)
            for (int t = 0; t < 3; ++t) {
                Index rejected = 0;
                for (double p : res.p_values[di][m][t]) rejected += p < cfg.alpha;
                res.rows.push_back({cfg.delta, sim_methods()[m], sim_tests()[t],
                                    static_cast<double>(rejected) / static_cast<double>(cfg.replicates),
                                    cfg.replicates, cfg.seed});
            }
    }
    return res;
}

inline void write_simulation_csv(const std::filesystem::path& path, const SimResult& res)
{
    auto os = detail::open_out(path, false);
    os << "delta,method,test,rejection_rate,replicates,seed\n";
    for (const auto& r : res.rows)
        os << format_double(r.delta) << ',' << r.method << ',' << r.test << ',' << format_double(r.rejection_rate)
           << ',' << r.replicates << ',' << r.seed << '\n';
    if (!os) throw ValidationError("write failed for '" + path.string() + "'");
}

} // namespace mda
