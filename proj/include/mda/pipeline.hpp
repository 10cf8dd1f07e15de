#pragma once

// End-to-end run: align, mean, embed, mesh, fit, fpca, regress, test.
// The stage helpers are shared with the command-line subcommands.

#include "mda/config.hpp"
#include "mda/inference.hpp"

#include "json.hpp"

namespace mda {

inline constexpr const char* kVersion = "1.0.0";

/// Failure inside a pipeline stage; keeps the exit code of the cause.
class StageError : public Error {
public:
    StageError(std::string stage, const std::string& what, int exit_code)
        : Error("stage '" + stage + "' failed: " + what), stage_(std::move(stage)), exit_code_(exit_code)
    {
    }
    const std::string& stage() const { return stage_; }
    int exit_code() const { return exit_code_; }

private:
    std::string stage_;
    int exit_code_;
};

// ---------------------------------------------------------------------------
// Stage helpers

/// gpa iterates to the consensus; one_pass rotates every unit onto unit 0;
/// none keeps the input coordinates.
inline ProcrustesResult align_sample(const ShapeSample& sample, const std::string& mode,
                                     const ProcrustesOptions& opt = {})
{
    if (mode == "gpa") return generalized_procrustes_align(sample, opt);
    if (mode == "one_pass") return align_to_reference(sample, {sample.unit(0)}, opt.allow_reflection);
    if (mode == "none") {
        ProcrustesResult r;
        r.aligned = sample;
        r.consensus = mean_shape(sample);
        return r;
    }
    throw ValidationError("unknown alignment mode '" + mode + "'");
}

/// Two-column CSV of polygon vertices in order.
inline Polygon read_polygon_csv(const std::filesystem::path& path)
{
    const Matrix m = read_matrix_csv(path);
    require(m.cols() == 2, "polygon file '" + path.string() + "' must have two columns");
    Polygon poly;
    for (Index r = 0; r < m.rows(); ++r) poly.push_back(m.row(r).transpose());
    require(poly.size() >= 3, "polygon file '" + path.string() + "' needs at least three vertices");
    return poly;
}

/// Each row: target_edge, x1, y1, x2, y2, ... (rows may differ in length).
inline std::vector<RefinementRegion> read_regions_csv(const std::filesystem::path& path)
{
    auto is = detail::open_in(path, false);
    std::vector<RefinementRegion> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        if (trim(line).empty() || trim(line)[0] == '#') continue;
        const auto toks = split(line, ',');
        const std::string where = path.string() + ":" + std::to_string(line_no);
        if (toks.size() < 7 || toks.size() % 2 == 0)
            throw ValidationError("region row needs target_edge and at least three x,y pairs at " + where);
        RefinementRegion r;
        r.target_edge = parse_double(toks[0], where);
        require(r.target_edge > 0.0, "region target edge must be positive at " + where);
        for (std::size_t i = 1; i < toks.size(); i += 2)
            r.polygon.emplace_back(parse_double(toks[i], where), parse_double(toks[i + 1], where));
        out.push_back(std::move(r));
    }
    return out;
}

struct MeshBuild {
    TriangulatedDomain domain;
    double target_edge = 0.0; // edge actually used
    int coarsenings = 0;
};

/// Triangulates; with auto_coarsen a mesh exceeding max_vertices is retried
/// with the target edge (and region targets) scaled by 1.25.
inline MeshBuild build_mesh(const Eigen::Ref<const Matrix>& coords, const Polygon& boundary, MeshOptions opt,
                            bool auto_coarsen)
{
    MeshBuild b;
    for (;;) {
        try {
            b.domain = triangulate(coords, boundary, opt);
            finalize_domain(b.domain);
            b.target_edge = opt.target_edge;
            return b;
        } catch (const MeshTooFineError&) {
            if (!auto_coarsen || b.coarsenings >= 100) throw;
            opt.target_edge *= 1.25;
            for (auto& r : opt.refinement_regions) r.target_edge *= 1.25;
            ++b.coarsenings;
        }
    }
}

/// Values V_k(m_p) = E Phi_k at the data sites, K x P x D.
inline Array3 component_values(const PCSystem& system, const PooledPCBasis& basis, const SparseMatrix& e)
{
    const auto fields = component_fields(system, basis);
    std::vector<Matrix> vals(fields.size());
    for (std::size_t k = 0; k < fields.size(); ++k) vals[k] = e * fields[k];
    return Array3::from_slices(vals);
}

inline std::string join(const std::vector<std::string>& v, char sep)
{
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? std::string(1, sep) : std::string()) + v[i];
    return s;
}

// ---------------------------------------------------------------------------
// Regression artifact

struct RegressionFit {
    DesignMatrix design;
    Matrix B;      // R x K
    Vector lambda; // R
    Matrix c_eps;  // K x K
    Matrix y;      // N x K
    CvResult cv;
    Array3 vpoints;   // K x P x D, empty when unknown
    Matrix reference; // P x D, empty when unknown
};

inline RegressionFit fit_regression(DesignMatrix design, const Matrix& y, const Matrix& u, const std::vector<double>& grid,
                                    const CvOptions& cv_opt)
{
    require(design.rows() == y.rows(), "design has " + std::to_string(design.rows()) + " rows but the sample has " +
                                           std::to_string(y.rows()) + " units");
    RegressionFit f;
    if (grid.size() == 1 && grid[0] == 0.0) {
        f.cv.lambda = Vector::Zero(design.cols());
    } else {
        f.cv = cross_validate_lambda(design, y, u, grid, cv_opt);
    }
    f.lambda = f.cv.lambda;
    f.B = penalized_beta(design, y, {u, f.lambda}).B;
    f.c_eps = residual_covariance(design, y, {f.B});
    f.y = y;
    f.design = std::move(design);
    return f;
}

inline void save_regression(const std::filesystem::path& path, const RegressionFit& f)
{
    Bundle b;
    b.put("B", f.B);
    b.put("lambda", Matrix(f.lambda));
    b.put("X", f.design.X);
    b.put_text("names", join(f.design.names, '\n'));
    b.put("c_eps", f.c_eps);
    b.put("y", f.y);
    Matrix cv(static_cast<Index>(f.cv.table.size()), 4);
    for (Index i = 0; i < cv.rows(); ++i) {
        const auto& s = f.cv.table[i];
        cv.row(i) << s.sweep, static_cast<double>(s.predictor), s.lambda, s.error;
    }
    if (cv.rows() > 0) b.put("cv_table", cv);
    if (!f.cv.fold_of.empty()) {
        Matrix folds(static_cast<Index>(f.cv.fold_of.size()), 1);
        for (Index i = 0; i < folds.rows(); ++i) folds(i, 0) = static_cast<double>(f.cv.fold_of[i]);
        b.put("fold_of", folds);
    }
    if (!f.vpoints.data.empty()) b.put("vpoints", f.vpoints);
    if (f.reference.size() > 0) b.put("reference", f.reference);
    b.save(path);
}

inline RegressionFit load_regression(const std::filesystem::path& path)
{
    const Bundle b = Bundle::load(path);
    RegressionFit f;
    f.B = b.matrix("B");
    f.lambda = b.matrix("lambda").col(0);
    f.design = make_design(b.matrix("X"), split(b.text("names"), '\n'));
    f.c_eps = b.matrix("c_eps");
    f.y = b.matrix("y");
    f.cv.lambda = f.lambda;
    if (b.has("cv_table")) {
        const Matrix cv = b.matrix("cv_table");
        for (Index i = 0; i < cv.rows(); ++i)
            f.cv.table.push_back({static_cast<int>(cv(i, 0)), static_cast<Index>(cv(i, 1)), cv(i, 2), cv(i, 3)});
    }
    if (b.has("fold_of")) {
        const Matrix folds = b.matrix("fold_of");
        for (Index i = 0; i < folds.rows(); ++i) f.cv.fold_of.push_back(static_cast<Index>(folds(i, 0)));
    }
    if (b.has("vpoints")) f.vpoints = b.array("vpoints");
    if (b.has("reference")) f.reference = b.matrix("reference");
    require(f.B.rows() == f.design.cols() && f.B.cols() == f.c_eps.rows(), "inconsistent regression bundle");
    return f;
}

// ---------------------------------------------------------------------------
// Testing one predictor

struct TestSettings {
    double alpha = 0.05;
    double energy = 0.99;
    Index bubble_draws = 200000;
    double normal_radius = 0.0; // 0: automatic
    std::uint64_t seed = 0;
};

struct PredictorReport {
    std::string name;
    Index index = 0;
    std::array<TestReport, 3> global{}; // norm, pc, choi
    double xi_alpha = 0.0;
    double normal_radius = 0.0;
    Vector directional;  // P
    Vector pointwise_p;  // P, NaN when untestable
    Vector radius;       // P
    std::vector<char> excludes_zero;
};

inline double auto_normal_radius(const Matrix& reference)
{
    return 0.1 * (reference.colwise().maxCoeff() - reference.colwise().minCoeff()).norm();
}

inline PredictorReport test_predictor(const RegressionFit& f, Index r, const TestSettings& s)
{
    require(r >= 0 && r < f.design.cols(), "predictor index out of range");
    require(!f.vpoints.data.empty(), "regression has no component values at the data sites (fpca needs --domain)");
    PredictorReport rep;
    rep.name = f.design.names[r];
    rep.index = r;
    const BetaCovariance cov = beta_covariance(f.design, f.c_eps, r);
    GlobalTestOptions gopt;
    gopt.energy = s.energy;
    const Vector b_r = f.B.row(r).transpose();
    rep.global = global_tests(b_r, cov, gopt);

    const BubbleSpec bubble = confidence_bubble(cov, s.alpha, f.vpoints, s.bubble_draws, s.seed);
    rep.xi_alpha = bubble.xi_alpha;
    rep.radius = bubble.radius;
    const Matrix beta = beta_at_points(b_r, f.vpoints);
    const auto pw = pointwise_field(b_r, cov, f.vpoints);
    const Index p = beta.rows();
    rep.pointwise_p.resize(p);
    rep.excludes_zero.resize(p);
    for (Index i = 0; i < p; ++i) {
        rep.pointwise_p(i) = pw[i].p_value;
        rep.excludes_zero[i] = beta.row(i).norm() > rep.radius(i);
    }
    if (f.reference.size() > 0) {
        rep.normal_radius = s.normal_radius > 0.0 ? s.normal_radius : auto_normal_radius(f.reference);
        rep.directional = directional_field(beta, estimate_vertex_normals({f.reference}, rep.normal_radius));
    } else {
        rep.directional = Vector::Constant(p, std::numeric_limits<double>::quiet_NaN());
    }
    return rep;
}

inline nlohmann::ordered_json report_json(const PredictorReport& rep, double alpha)
{
    nlohmann::ordered_json j;
    j["predictor"] = rep.name;
    j["alpha"] = alpha;
    for (const auto& t : rep.global) {
        nlohmann::ordered_json g;
        g["statistic"] = t.statistic;
        g["p_value"] = t.p_value;
        g["truncation"] = t.truncation;
        g["reject"] = t.p_value < alpha;
        j[to_string(t.kind)] = g;
    }
    Index excl = 0, rejected = 0, untestable = 0;
    for (Index i = 0; i < rep.pointwise_p.size(); ++i) {
        excl += rep.excludes_zero[i];
        if (std::isnan(rep.pointwise_p(i)))
            ++untestable;
        else
            rejected += rep.pointwise_p(i) < alpha;
    }
    j["bubble"] = {{"xi_alpha", rep.xi_alpha}, {"sites_excluding_zero", excl}};
    j["pointwise"] = {{"sites_rejected", rejected}, {"sites_untestable", untestable}};
    j["normal_radius"] = rep.normal_radius;
    return j;
}

inline void write_fields_csv(const std::filesystem::path& path, const PredictorReport& rep)
{
    auto os = detail::open_out(path, false);
    os << "point,directional,pointwise_p,bubble_radius,excludes_zero\n";
    for (Index i = 0; i < rep.radius.size(); ++i)
        os << i << ',' << format_double(rep.directional(i)) << ',' << format_double(rep.pointwise_p(i)) << ','
           << format_double(rep.radius(i)) << ',' << (rep.excludes_zero[i] ? 1 : 0) << '\n';
    if (!os) throw ValidationError("write failed for '" + path.string() + "'");
}

inline void write_json(const std::filesystem::path& path, const nlohmann::ordered_json& j)
{
    auto os = detail::open_out(path, false);
    os << j.dump(2) << '\n';
    if (!os) throw ValidationError("write failed for '" + path.string() + "'");
}

inline std::string file_bytes(const std::filesystem::path& path)
{
    auto is = detail::open_in(path, true);
    std::ostringstream ss;
    ss << is.rdbuf();
    return ss.str();
}

/// Grid from the regress.grid setting: auto, none (OLS) or a comma list.
inline std::vector<double> parse_grid(const std::string& spec, double x_range)
{
    if (spec == "auto") return default_lambda_grid(x_range);
    if (spec == "none") return {0.0};
    std::vector<double> g;
    for (const auto& tok : split(spec, ',')) g.push_back(parse_double(trim(tok), "lambda grid"));
    require(!g.empty(), "empty lambda grid");
    return g;
}

// ---------------------------------------------------------------------------
// Full run

struct PipelineInputs {
    std::filesystem::path sample;
    std::filesystem::path design;
    std::filesystem::path out_dir;
};

struct PipelineSummary {
    Index N = 0, P = 0, D = 0, J = 0, H = 0, K = 0;
    double target_edge = 0.0;
    double fit_lambda = 0.0;
    double amse = 0.0;
    std::vector<PredictorReport> reports;
    std::vector<std::string> artifacts;
};

inline PipelineSummary run_pipeline(const PipelineConfig& cfg, const PipelineInputs& in, std::ostream* log = nullptr)
{
    validate(cfg);
    namespace fs = std::filesystem;
    std::error_code ec;
    fs::create_directories(in.out_dir, ec);
    if (ec) throw ValidationError("cannot create output directory '" + in.out_dir.string() + "': " + ec.message());

    PipelineSummary sum;
    nlohmann::ordered_json manifest;
    manifest["tool"] = "mda";
    manifest["version"] = kVersion;
    manifest["seed"] = cfg.seed;
    manifest["config_hash"] = config_hash(cfg);
    manifest["config"] = to_text(cfg);
    manifest["inputs"] = nlohmann::ordered_json::array();
    std::vector<std::string> done;

    auto record = [&](const std::string& name) { sum.artifacts.push_back(name); };
    auto write_manifest = [&](const std::string& status) {
        manifest["status"] = status;
        manifest["stages_completed"] = done;
        nlohmann::ordered_json arts = nlohmann::ordered_json::array();
        for (const auto& a : sum.artifacts)
            arts.push_back({{"name", a}, {"fnv1a", hex64(fnv1a(file_bytes(in.out_dir / a)))}});
        manifest["artifacts"] = arts;
        write_json(in.out_dir / "manifest.json", manifest);
    };
    std::string current;
    auto stage = [&](const std::string& name, auto&& body) {
        current = name;
        if (log) *log << "[mda] " << name << "\n";
        try {
            body();
        } catch (const StageError&) {
            throw;
        } catch (const NumericalError& e) {
            write_manifest("failed: " + name);
            throw StageError(name, e.what(), 3);
        } catch (const Error& e) {
            write_manifest("failed: " + name);
            throw StageError(name, e.what(), 2);
        } catch (const std::exception& e) {
            write_manifest("failed: " + name);
            throw StageError(name, e.what(), 3);
        }
        done.push_back(name);
    };

    ShapeSample sample;
    DesignMatrix design;
    stage("load", [&] {
        sample = load_shape_sample(in.sample, guess_format(in.sample));
        manifest["inputs"].push_back(
            {{"role", "sample"}, {"name", in.sample.filename().string()}, {"fnv1a", hex64(fnv1a(file_bytes(in.sample)))}});
        design = read_design(in.design, cfg.intercept);
        manifest["inputs"].push_back(
            {{"role", "design"}, {"name", in.design.filename().string()}, {"fnv1a", hex64(fnv1a(file_bytes(in.design)))}});
        require(design.rows() == sample.size(), "design has " + std::to_string(design.rows()) +
                                                    " rows but the sample has " + std::to_string(sample.size()) +
                                                    " units");
        sum.N = sample.size();
        sum.P = sample.point_count();
        sum.D = sample.ambient_dim();
    });

    ShapeSample aligned;
    stage("align", [&] {
        ProcrustesOptions po;
        po.allow_reflection = cfg.allow_reflection;
        po.tol = cfg.align_tol;
        po.max_iter = static_cast<int>(std::min<Index>(cfg.align_max_iter, 1 << 30));
        aligned = align_sample(sample, cfg.align_mode, po).aligned;
        save_shape_sample_binary(in.out_dir / "aligned.mda", aligned);
        record("aligned.mda");
    });

    ReferenceShape reference;
    stage("mean", [&] {
        reference = mean_shape(aligned);
        write_matrix_csv(in.out_dir / "reference.csv", reference.points);
        record("reference.csv");
    });

    DomainEmbedding dom;
    stage("embed", [&] {
        EmbeddingConfig ec2;
        ec2.k = cfg.embed_k;
        ec2.heat_bandwidth = cfg.heat_bandwidth;
        ec2.diffusion_t = cfg.diffusion_t;
        ec2.diffusion_bandwidth = cfg.diffusion_bandwidth;
        dom = embed(reference.points, parse_embedding_method(cfg.embed_method), ec2, cfg.embed_dim);
        write_matrix_csv(in.out_dir / "domain.csv", dom.coords);
        record("domain.csv");
    });

    MeshBuild mesh;
    stage("mesh", [&] {
        const Polygon boundary =
            cfg.boundary == "hull" ? geometry::convex_hull(dom.coords) : read_polygon_csv(cfg.boundary);
        MeshOptions mo;
        mo.target_edge = cfg.target_edge > 0.0 ? cfg.target_edge : dom.x_range / 10.0;
        if (!cfg.regions.empty()) mo.refinement_regions = read_regions_csv(cfg.regions);
        mo.max_vertices = sum.P;
        mesh = build_mesh(dom.coords, boundary, mo, cfg.auto_coarsen);
        write_off(in.out_dir / "mesh.off", mesh.domain);
        record("mesh.off");
        sum.J = mesh.domain.vertex_count();
        sum.target_edge = mesh.target_edge;
    });

    FemMatrices fem;
    SparseMatrix e;
    Array3 coeffs;
    stage("fit", [&] {
        fem = assemble(mesh.domain);
        e = evaluate_basis(mesh.domain, dom.coords);
        sum.fit_lambda = cfg.lambda == "auto" ? default_lambda(dom.x_range, cfg.lambda_multiplier)
                                              : parse_double(cfg.lambda, "fit.lambda");
        const PenalizedFitter fitter(e, fem, sum.fit_lambda);
        coeffs = fit_sample(aligned, fitter);
        sum.amse = amse(aligned, coeffs, e);
        write_mda1(in.out_dir / "coeffs.mda", coeffs);
        record("coeffs.mda");
    });

    FpcaModel model;
    Array3 vpoints;
    Vector explained;
    stage("fpca", [&] {
        sum.H = std::min<Index>(cfg.H, std::min<Index>(sum.J, sum.N * sum.D));
        sum.K = std::min<Index>(cfg.K, sum.H * sum.D);
        model = run_fpca(coeffs, make_gram(fem.mass), sum.H, sum.K);
        vpoints = component_values(model.system, model.basis, e);
        Bundle pcs = fpca_bundle(model);
        pcs.put("vpoints", vpoints);
        pcs.put("reference", reference.points);
        pcs.save(in.out_dir / "pcs.mda");
        record("pcs.mda");
        explained = explained_variance(model.system.lambda);
        auto os = detail::open_out(in.out_dir / "variance.csv", false);
        os << "k,lambda,cumulative_fraction\n";
        for (Index k = 0; k < model.system.K(); ++k)
            os << k + 1 << ',' << format_double(model.system.lambda(k)) << ',' << format_double(explained(k)) << '\n';
        if (!os) throw ValidationError("write failed for variance.csv");
        record("variance.csv");
    });

    RegressionFit fit;
    stage("regress", [&] {
        const Matrix u = roughness_U(model.system, model.basis, fem);
        CvOptions co;
        co.folds = cfg.cv_folds;
        co.max_sweeps = cfg.max_sweeps;
        co.shared_lambda = cfg.shared_lambda;
        co.seed = stage_seed(cfg, "cv");
        fit = fit_regression(design, model.y, u, parse_grid(cfg.grid, dom.x_range), co);
        fit.vpoints = vpoints;
        fit.reference = reference.points;
        save_regression(in.out_dir / "fit.mda", fit);
        record("fit.mda");
    });

    stage("test", [&] {
        nlohmann::ordered_json report;
        report["config_hash"] = config_hash(cfg);
        report["N"] = sum.N;
        report["P"] = sum.P;
        report["D"] = sum.D;
        report["J"] = sum.J;
        report["mesh_target_edge"] = sum.target_edge;
        report["mesh_coarsenings"] = mesh.coarsenings;
        report["x_range"] = dom.x_range;
        report["fit_lambda"] = sum.fit_lambda;
        report["amse"] = sum.amse;
        report["H"] = sum.H;
        report["K"] = sum.K;
        report["explained_variance"] = std::vector<double>(explained.data(), explained.data() + explained.size());
        report["predictors"] = fit.design.names;
        report["lambda"] = std::vector<double>(fit.lambda.data(), fit.lambda.data() + fit.lambda.size());
        report["cv_sweeps"] = fit.cv.sweeps;
        report["tests"] = nlohmann::ordered_json::array();
        TestSettings ts;
        ts.alpha = cfg.alpha;
        ts.energy = cfg.energy;
        ts.bubble_draws = cfg.bubble_draws;
        ts.normal_radius = cfg.normal_radius;
        for (Index r = 0; r < fit.design.cols(); ++r) {
            if (fit.design.names[r] == "intercept") continue;
            ts.seed = mix_seed(stage_seed(cfg, "bubble"), static_cast<std::uint64_t>(r));
            PredictorReport rep = test_predictor(fit, r, ts);
            report["tests"].push_back(report_json(rep, cfg.alpha));
            const std::string name = "fields_" + rep.name + ".csv";
            write_fields_csv(in.out_dir / name, rep);
            record(name);
            sum.reports.push_back(std::move(rep));
        }
        write_json(in.out_dir / "report.json", report);
        record("report.json");
    });

    write_manifest("complete");
    return sum;
}

} // namespace mda
