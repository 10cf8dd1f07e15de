#include "support.hpp"

using namespace mda;
using namespace mda::testing;

namespace {

SimConfig small_config()
{
    SimConfig c;
    c.P = 120;
    c.N = 30;
    c.replicates = 4;
    c.mesh_edge = 0.35;
    c.H = 15;
    c.K = 10;
    return c;
}

double correlation(const Vector& a, const Vector& b)
{
    const Vector ac = a.array() - a.mean(), bc = b.array() - b.mean();
    return ac.dot(bc) / std::sqrt(ac.squaredNorm() * bc.squaredNorm());
}

} // namespace

TEST(SimDesign, SitesAndFields)
{
    const SimConfig c = small_config();
    const SimDesign d = make_sim_design(c);
    ASSERT_EQ(d.chart.rows(), 120);
    EXPECT_LE(d.chart.rowwise().norm().maxCoeff(), 1.0);
    EXPECT_EQ(d.base.leftCols(2), d.chart);
    EXPECT_TRUE(d.beta.allFinite());
    // the KL factor reproduces the squared-exponential covariance
    Matrix k(120, 120);
    for (Index a = 0; a < 120; ++a)
        for (Index b = 0; b < 120; ++b)
            k(a, b) = std::exp(-(d.chart.row(a) - d.chart.row(b)).squaredNorm() / (2 * c.eps_length * c.eps_length));
    EXPECT_LT((d.kl * d.kl.transpose() - k).cwiseAbs().maxCoeff(), 1e-8);
    SimConfig bad = c;
    bad.P = 5;
    EXPECT_THROW(make_sim_design(bad), ValidationError);
}

TEST(Synthetic, DeterministicCaseIsExact)
{
    SimConfig c = small_config();
    c.noise_sd = 0;
    c.eps_sd = {0, 0, 0};
    c.delta = 1;
    const SimDesign d = make_sim_design(c);
    const auto [s, x] = generate_synthetic_sample(c, d, 0);
    for (Index n = 0; n < c.N; ++n) EXPECT_LT((s.unit(n) - (d.base + x(n) * d.beta)).cwiseAbs().maxCoeff(), 1e-15);
}

TEST(Synthetic, EffectEntersLinearly)
{
    SimConfig c = small_config();
    const SimDesign d = make_sim_design(c);
    const auto [s0, x0] = generate_synthetic_sample(c, d, 3);
    c.delta = 50;
    const auto [s1, x1] = generate_synthetic_sample(c, d, 3);
    EXPECT_EQ(x0, x1);
    for (Index n = 0; n < c.N; ++n)
        EXPECT_LT((s1.unit(n) - s0.unit(n) - 50 * x0(n) * d.beta).cwiseAbs().maxCoeff(), 1e-12);
}

TEST(Synthetic, SeededAndBitIdentical)
{
    const SimConfig c = small_config();
    const SimDesign d = make_sim_design(c);
    const auto a = generate_synthetic_sample(c, d, 1);
    const auto b = generate_synthetic_sample(c, d, 1);
    const auto e = generate_synthetic_sample(c, d, 2);
    EXPECT_EQ(a.second, b.second);
    for (Index n = 0; n < c.N; ++n) EXPECT_EQ(a.first.unit(n), b.first.unit(n));
    EXPECT_NE(a.second, e.second);
}

TEST(Synthetic, NullModelScoresUncorrelatedWithCovariate)
{
    SimConfig c = small_config();
    const SimDesign d = make_sim_design(c);
    const FunctionalPipeline f(c, d);
    const Index reps = 20;
    double mean_r = 0;
    for (Index r = 0; r < reps; ++r) {
        const auto [s, x] = generate_synthetic_sample(c, d, r);
        const Array3 coeffs = fit_sample(s, *f.fitter);
        const FpcaModel m = run_fpca(coeffs, f.gram, 10, 5);
        mean_r += correlation(m.y.col(0), x) / reps;
    }
    EXPECT_LT(std::abs(mean_r), 3.0 / std::sqrt(static_cast<double>(reps * c.N)));
}

TEST(MultivariatePcr, RetainedCounts)
{
    Vector x(12);
    for (Index n = 0; n < 12; ++n) x(n) = std::sin(static_cast<double>(n));
    Index kept = 0;

    // small random instance: prefix-sum oracle on the stacked eigenvalues
    std::vector<Matrix> rnd;
    for (Index n = 0; n < 12; ++n) rnd.push_back(random_matrix(6, 3, 2, static_cast<std::uint64_t>(n)));
    const ShapeSample s(rnd);
    Matrix st(12, 18);
    for (Index n = 0; n < 12; ++n) st.row(n) = Eigen::Map<const Matrix>(rnd[n].data(), 1, 18);
    st = st.rowwise() - st.colwise().mean();
    Eigen::SelfAdjointEigenSolver<Matrix> es(st.transpose() * st / 11.0);
    const Vector ev = es.eigenvalues().reverse();
    for (double thr : {0.5, 0.8, 0.95}) {
        Index expect = 0;
        double acc = 0;
        while (acc < thr * ev.sum() * (1 - 1e-14)) acc += ev(expect++);
        multivariate_pcr_test(s, x, thr, {}, &kept);
        EXPECT_EQ(kept, expect) << thr;
    }
    multivariate_pcr_test(s, x, 1.0, {}, &kept);
    EXPECT_EQ(kept, 11);
}

TEST(MultivariatePcr, RankOneRetainsOneComponent)
{
    const Matrix dir = random_matrix(15, 3, 3);
    std::vector<Matrix> units;
    Vector x(12);
    for (Index n = 0; n < 12; ++n) {
        x(n) = std::cos(1.7 * static_cast<double>(n));
        units.push_back(std::sin(0.9 * static_cast<double>(n)) * dir);
    }
    Index kept = 0;
    const auto p = multivariate_pcr_test(ShapeSample(units), x, 0.99, {}, &kept);
    EXPECT_EQ(kept, 1);
    for (double v : p) {
        EXPECT_GE(v, 0.0);
        EXPECT_LE(v, 1.0);
    }
}

TEST(Study, DeterministicAndThreadIndependent)
{
    SimConfig c = small_config();
    c.replicates = 2;
    set_thread_count(1);
    const SimResult a = run_simulation_study(c, {0.0, 100.0});
    set_thread_count(4);
    const SimResult b = run_simulation_study(c, {0.0, 100.0});
    set_thread_count(1);
    ASSERT_EQ(a.rows.size(), 12u);
    for (std::size_t i = 0; i < a.rows.size(); ++i) {
        EXPECT_EQ(a.rows[i].rejection_rate, b.rows[i].rejection_rate);
        EXPECT_GE(a.rows[i].rejection_rate, 0.0);
        EXPECT_LE(a.rows[i].rejection_rate, 1.0);
    }
    EXPECT_EQ(a.p_values, b.p_values);
    const auto dir = scratch_dir("sim_csv");
    write_simulation_csv(dir / "a.csv", a);
    write_simulation_csv(dir / "b.csv", b);
    EXPECT_EQ(read_file(dir / "a.csv"), read_file(dir / "b.csv"));
    EXPECT_EQ(read_file(dir / "a.csv").substr(0, 45), "delta,method,test,rejection_rate,replicates,s");
    EXPECT_THROW(run_simulation_study(c, {}), ValidationError);
    EXPECT_THROW(run_simulation_study(c, {-1.0}), ValidationError);
}

// Property: size stays near the nominal level at delta = 0 and a large
// effect is detected.
TEST(StudyProperty, SizeAndPowerAtDeskScale)
{
    SimConfig c = small_config();
    c.replicates = 200;
    const SimResult r = run_simulation_study(c, {0.0});
    const double sigma = std::sqrt(0.05 * 0.95 / 200);
    for (const auto& row : r.rows) {
        EXPECT_GE(row.rejection_rate, 0.05 - 3 * sigma) << row.method << " " << row.test;
        EXPECT_LE(row.rejection_rate, 0.05 + 3 * sigma) << row.method << " " << row.test;
    }
    c.replicates = 20;
    const SimResult pw = run_simulation_study(c, {400.0});
    for (const auto& row : pw.rows) EXPECT_GE(row.rejection_rate, 0.9) << row.method << " " << row.test;
}
