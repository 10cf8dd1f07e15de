#include "mda/mda.hpp"

#include "CLI11.hpp"

#include <iostream>

namespace {

using namespace mda;

double x_range_of(const Matrix& coords)
{
    return coords.col(0).maxCoeff() - coords.col(0).minCoeff();
}

std::vector<double> parse_list(const std::string& s, const std::string& what)
{
    std::vector<double> v;
    for (const auto& tok : split(s, ',')) v.push_back(parse_double(trim(tok), what));
    require(!v.empty(), "empty list for " + what);
    return v;
}

struct AlignArgs {
    std::string in, out, reference_out, reference, mode = "gpa";
    bool allow_reflection = false;
    double tol = 1e-10;
    int max_iter = 100;
};

int cmd_align(const AlignArgs& a)
{
    const ShapeSample sample = load_shape_sample(a.in, guess_format(a.in));
    ProcrustesOptions po{a.allow_reflection, a.tol, a.max_iter};
    const ProcrustesResult res = a.reference.empty()
                                     ? align_sample(sample, a.mode, po)
                                     : align_to_reference(sample, {read_matrix_csv(a.reference)}, a.allow_reflection);
    save_shape_sample_binary(a.out, res.aligned);
    if (!a.reference_out.empty()) write_matrix_csv(a.reference_out, mean_shape(res.aligned).points);
    std::cout << "aligned " << sample.size() << " units of " << sample.point_count() << " points in "
              << res.iterations << " iteration(s)\n";
    return 0;
}

struct EmbedArgs {
    std::string in, out, method = "ltsa";
    Index k = 12, dim = 2;
    double heat_bandwidth = 0.0, diffusion_t = 1.0, diffusion_bandwidth = 0.0;
};

int cmd_embed(const EmbedArgs& a)
{
    const Matrix ref = read_matrix_csv(a.in);
    EmbeddingConfig ec;
    ec.k = a.k;
    ec.heat_bandwidth = a.heat_bandwidth;
    ec.diffusion_t = a.diffusion_t;
    ec.diffusion_bandwidth = a.diffusion_bandwidth;
    const DomainEmbedding d = embed(ref, parse_embedding_method(a.method), ec, a.dim);
    write_matrix_csv(a.out, d.coords);
    std::cout << "embedded " << ref.rows() << " points with " << to_string(d.method)
              << "; x_range = " << format_double(d.x_range) << "\n";
    return 0;
}

struct MeshArgs {
    std::string domain, boundary, regions, out;
    double target_edge = 0.0;
    Index max_vertices = -1;
    bool auto_coarsen = false;
};

int cmd_mesh(const MeshArgs& a)
{
    const Matrix coords = read_matrix_csv(a.domain);
    require(coords.cols() == 2, "domain file must have two columns");
    const Polygon boundary = a.boundary.empty() ? geometry::convex_hull(coords) : read_polygon_csv(a.boundary);
    MeshOptions mo;
    mo.target_edge = a.target_edge > 0.0 ? a.target_edge : x_range_of(coords) / 10.0;
    if (!a.regions.empty()) mo.refinement_regions = read_regions_csv(a.regions);
    mo.max_vertices = a.max_vertices < 0 ? coords.rows() : a.max_vertices;
    const MeshBuild b = build_mesh(coords, boundary, mo, a.auto_coarsen);
    write_off(a.out, b.domain);
    std::cout << "mesh: J = " << b.domain.vertex_count() << ", T = " << b.domain.triangle_count()
              << ", target edge " << format_double(b.target_edge) << "\n";
    return 0;
}

struct FitArgs {
    std::string domain, mesh, in, out, lambda = "auto";
    double multiplier = 0.5;
};

int cmd_fit(const FitArgs& a)
{
    const Matrix coords = read_matrix_csv(a.domain);
    const TriangulatedDomain dom = read_off(a.mesh);
    const ShapeSample sample = load_shape_sample(a.in, guess_format(a.in));
    require(coords.rows() == sample.point_count(), "domain and sample disagree on P");
    const FemMatrices fem = assemble(dom);
    const SparseMatrix e = evaluate_basis(dom, coords);
    const double lambda =
        a.lambda == "auto" ? default_lambda(x_range_of(coords), a.multiplier) : parse_double(a.lambda, "--lambda");
    const PenalizedFitter fitter(e, fem, lambda);
    const Array3 coeffs = fit_sample(sample, fitter);
    write_mda1(a.out, coeffs);
    std::cout << "lambda = " << format_double(lambda) << ", AMSE = " << format_double(amse(sample, coeffs, e)) << "\n";
    return 0;
}

struct FpcaArgs {
    std::string coeffs, mesh, out, report, domain, reference;
    Index H = 200, K = 100;
    bool h_set = false, k_set = false;
};

int cmd_fpca(const FpcaArgs& a)
{
    const Array3 coeffs = read_mda1(a.coeffs);
    const TriangulatedDomain dom = read_off(a.mesh);
    require(static_cast<Index>(coeffs.dims[1]) == dom.vertex_count(), "coefficients and mesh disagree on J");
    const FemMatrices fem = assemble(dom);
    const Index n = coeffs.dims[0], j = coeffs.dims[1], d = coeffs.dims[2];
    const Index h = a.h_set ? a.H : std::min<Index>(a.H, std::min(j, n * d));
    const Index k = a.k_set ? a.K : std::min<Index>(a.K, h * d);
    const FpcaModel m = run_fpca(coeffs, make_gram(fem.mass), h, k);
    Bundle b = fpca_bundle(m);
    if (!a.domain.empty()) {
        const Matrix coords = read_matrix_csv(a.domain);
        b.put("vpoints", component_values(m.system, m.basis, evaluate_basis(dom, coords)));
    }
    if (!a.reference.empty()) b.put("reference", read_matrix_csv(a.reference));
    b.save(a.out);
    const Vector ev = explained_variance(m.system.lambda);
    if (!a.report.empty()) {
        auto os = detail::open_out(a.report, false);
        os << "k,lambda,cumulative_fraction\n";
        for (Index i = 0; i < m.system.K(); ++i)
            os << i + 1 << ',' << format_double(m.system.lambda(i)) << ',' << format_double(ev(i)) << '\n';
    }
    std::cout << "H = " << h << ", K = " << k << ", first component explains " << format_double(ev(0)) << "\n";
    return 0;
}

struct RegressArgs {
    std::string scores, design, mesh, out, grid = "auto";
    Index folds = 4;
    int max_sweeps = 10;
    bool shared = false, no_intercept = false;
    std::uint64_t seed = 7;
};

int cmd_regress(const RegressArgs& a)
{
    const FpcaModel m = load_fpca(a.scores);
    const Bundle pcs = Bundle::load(a.scores);
    DesignMatrix x = read_design(a.design, !a.no_intercept);
    Matrix u = Matrix::Zero(m.system.K(), m.system.K());
    double x_range = 1.0;
    if (!a.mesh.empty()) {
        const TriangulatedDomain dom = read_off(a.mesh);
        u = roughness_U(m.system, m.basis, assemble(dom));
        x_range = x_range_of(dom.vertices);
    } else {
        require(a.grid == "none", "--mesh is required unless --grid none");
    }
    CvOptions co;
    co.folds = a.folds;
    co.max_sweeps = a.max_sweeps;
    co.shared_lambda = a.shared;
    co.seed = mix_seed(a.seed, fnv1a("cv"));
    RegressionFit f = fit_regression(std::move(x), m.y, u, parse_grid(a.grid, x_range), co);
    if (pcs.has("vpoints")) f.vpoints = pcs.array("vpoints");
    if (pcs.has("reference")) f.reference = pcs.matrix("reference");
    save_regression(a.out, f);
    std::cout << "lambda:";
    for (Index r = 0; r < f.lambda.size(); ++r)
        std::cout << ' ' << f.design.names[r] << '=' << format_double(f.lambda(r));
    std::cout << "\n";
    return 0;
}

struct TestArgs {
    std::string fit, predictor, out, field_out;
    TestSettings s;
    std::uint64_t seed = 7;
};

int cmd_test(TestArgs a)
{
    const RegressionFit f = load_regression(a.fit);
    const Index r = f.design.column(a.predictor);
    a.s.seed = mix_seed(mix_seed(a.seed, fnv1a("bubble")), static_cast<std::uint64_t>(r));
    const PredictorReport rep = test_predictor(f, r, a.s);
    const auto j = report_json(rep, a.s.alpha);
    if (!a.out.empty()) write_json(a.out, j);
    if (!a.field_out.empty()) write_fields_csv(a.field_out, rep);
    for (const auto& t : rep.global)
        std::cout << to_string(t.kind) << ": statistic " << format_double(t.statistic) << ", p = "
                  << format_double(t.p_value) << "\n";
    return 0;
}

struct SimArgs {
    std::string deltas = "0,5,20,50,200", out, emit_dir, eps_sd;
    SimConfig cfg;
    Index replicate = 0;
};

int cmd_simulate(SimArgs a)
{
    const auto deltas = parse_list(a.deltas, "--deltas");
    if (!a.eps_sd.empty()) {
        const auto v = parse_list(a.eps_sd, "--eps-sd");
        require(v.size() == 3, "--eps-sd needs three values");
        for (int q = 0; q < 3; ++q) a.cfg.eps_sd[q] = v[q];
    }
    if (!a.emit_dir.empty()) {
        SimConfig c = a.cfg;
        c.delta = deltas.front();
        const SimDesign d = make_sim_design(c);
        const auto [sample, x] = generate_synthetic_sample(c, d, a.replicate);
        std::filesystem::create_directories(a.emit_dir);
        save_shape_sample_binary(std::filesystem::path(a.emit_dir) / "sample.mda", sample);
        auto os = detail::open_out(std::filesystem::path(a.emit_dir) / "design.csv", false);
        os << "x\n";
        for (Index n = 0; n < x.size(); ++n) os << format_double(x(n)) << '\n';
        std::cout << "wrote " << sample.size() << " units to " << a.emit_dir << "\n";
        return 0;
    }
    require(!a.out.empty(), "--out is required");
    const SimResult res = run_simulation_study(a.cfg, deltas);
    write_simulation_csv(a.out, res);
    for (const auto& row : res.rows)
        std::cout << format_double(row.delta) << ' ' << row.method << ' ' << row.test << ' '
                  << format_double(row.rejection_rate) << "\n";
    return 0;
}

struct RunArgs {
    std::string config, sample, design, out;
    bool print_config = false;
};

int cmd_run(const RunArgs& a)
{
    const PipelineConfig cfg = a.config.empty() ? PipelineConfig{} : load_config(a.config);
    if (a.print_config) {
        std::cout << to_text(cfg);
        return 0;
    }
    require(!a.sample.empty() && !a.design.empty() && !a.out.empty(), "run needs --sample, --design and --out");
    const PipelineSummary s = run_pipeline(cfg, {a.sample, a.design, a.out}, &std::cerr);
    std::cout << "N = " << s.N << ", P = " << s.P << ", J = " << s.J << ", H = " << s.H << ", K = " << s.K << "\n";
    for (const auto& rep : s.reports)
        for (const auto& t : rep.global)
            std::cout << rep.name << ' ' << to_string(t.kind) << ": p = " << format_double(t.p_value) << "\n";
    return 0;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Manifold data analysis"};
    app.require_subcommand(1);
    int threads = 0;
    app.add_option("--threads", threads, "Worker threads (0: hardware concurrency)")->check(CLI::NonNegativeNumber);

    AlignArgs al;
    auto* align = app.add_subcommand("align", "Procrustes-align a sample");
    align->add_option("--in", al.in, "Sample manifest (CSV) or MDA1 file")->required();
    align->add_option("--out", al.out, "Aligned sample (MDA1)")->required();
    align->add_option("--reference-out", al.reference_out, "Mean of the aligned units (CSV)");
    align->add_option("--reference", al.reference, "Align in one pass to this fixed reference (CSV)");
    align->add_option("--mode", al.mode, "gpa | one_pass | none");
    align->add_flag("--allow-reflection", al.allow_reflection);
    align->add_option("--tol", al.tol);
    align->add_option("--max-iter", al.max_iter);

    EmbedArgs em;
    auto* emb = app.add_subcommand("embed", "Flatten a reference shape");
    emb->add_option("--in", em.in, "Reference shape (CSV, P x D)")->required();
    emb->add_option("--out", em.out, "Domain coordinates (CSV, P x d)")->required();
    emb->add_option("--method", em.method, "pca | isomap | lle | laplacian_eigenmaps | ltsa | diffusion_map");
    emb->add_option("--k", em.k);
    emb->add_option("--dim", em.dim);
    emb->add_option("--heat-bandwidth", em.heat_bandwidth);
    emb->add_option("--diffusion-t", em.diffusion_t);
    emb->add_option("--diffusion-bandwidth", em.diffusion_bandwidth);

    MeshArgs me;
    auto* mesh = app.add_subcommand("mesh", "Triangulate the flattened domain");
    mesh->add_option("--domain", me.domain)->required();
    mesh->add_option("--out", me.out, "OFF file")->required();
    mesh->add_option("--target-edge", me.target_edge, "0: x_range / 10");
    mesh->add_option("--boundary", me.boundary, "Polygon CSV (default: convex hull)");
    mesh->add_option("--regions", me.regions, "Refinement regions CSV");
    mesh->add_option("--max-vertices", me.max_vertices, "Default: P; 0 disables");
    mesh->add_flag("--auto-coarsen", me.auto_coarsen);

    FitArgs fi;
    auto* fit = app.add_subcommand("fit", "Fit P1 functional objects");
    fit->add_option("--domain", fi.domain)->required();
    fit->add_option("--mesh", fi.mesh)->required();
    fit->add_option("--in", fi.in)->required();
    fit->add_option("--out", fi.out)->required();
    fit->add_option("--lambda", fi.lambda, "real | auto");
    fit->add_option("--lambda-multiplier", fi.multiplier);

    FpcaArgs fp;
    auto* fpca = app.add_subcommand("fpca", "Two-step functional PCA");
    fpca->add_option("--coeffs", fp.coeffs)->required();
    fpca->add_option("--mesh", fp.mesh)->required();
    fpca->add_option("--out", fp.out)->required();
    auto* h_opt = fpca->add_option("-H", fp.H);
    auto* k_opt = fpca->add_option("-K", fp.K);
    fpca->add_option("--report", fp.report, "variance.csv");
    fpca->add_option("--domain", fp.domain, "Store component values at the data sites");
    fpca->add_option("--reference", fp.reference, "Store the reference shape");

    RegressArgs re;
    auto* reg = app.add_subcommand("regress", "Penalized manifold-on-scalar regression");
    reg->add_option("--scores", re.scores)->required();
    reg->add_option("--design", re.design)->required();
    reg->add_option("--out", re.out)->required();
    reg->add_option("--mesh", re.mesh, "Mesh for the roughness penalty");
    reg->add_option("--cv", re.folds);
    reg->add_option("--grid", re.grid, "auto | none | comma list");
    reg->add_option("--max-sweeps", re.max_sweeps);
    reg->add_flag("--shared-lambda", re.shared);
    reg->add_flag("--no-intercept", re.no_intercept);
    reg->add_option("--seed", re.seed);

    TestArgs te;
    auto* test = app.add_subcommand("test", "Inference for one predictor");
    test->add_option("--fit", te.fit)->required();
    test->add_option("--predictor", te.predictor)->required();
    test->add_option("--alpha", te.s.alpha);
    test->add_option("--out", te.out, "report.json");
    test->add_option("--field-out", te.field_out, "fields.csv");
    test->add_option("--energy", te.s.energy);
    test->add_option("--draws", te.s.bubble_draws);
    test->add_option("--normal-radius", te.s.normal_radius);
    test->add_option("--seed", te.seed);

    SimArgs si;
    auto* sim = app.add_subcommand("simulate", "Power study");
    sim->add_option("--deltas", si.deltas);
    sim->add_option("--reps", si.cfg.replicates);
    sim->add_option("--n", si.cfg.N);
    sim->add_option("--seed", si.cfg.seed);
    sim->add_option("--out", si.out);
    sim->add_option("--alpha", si.cfg.alpha);
    sim->add_option("--amplitude", si.cfg.beta_amplitude);
    sim->add_option("--eps-sd", si.eps_sd, "Three comma-separated error-field sds");
    sim->add_option("--emit-sample", si.emit_dir, "Write one replicate (sample.mda, design.csv) and exit");
    sim->add_option("--replicate", si.replicate);

    RunArgs ru;
    auto* run = app.add_subcommand("run", "Full pipeline");
    run->add_option("--config", ru.config);
    run->add_option("--sample", ru.sample);
    run->add_option("--design", ru.design);
    run->add_option("--out", ru.out);
    run->add_flag("--print-config", ru.print_config);

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }
    fp.h_set = h_opt->count() > 0;
    fp.k_set = k_opt->count() > 0;
    set_thread_count(threads > 0 ? threads : static_cast<int>(std::max(1u, std::thread::hardware_concurrency())));

    try {
        if (align->parsed()) return cmd_align(al);
        if (emb->parsed()) return cmd_embed(em);
        if (mesh->parsed()) return cmd_mesh(me);
        if (fit->parsed()) return cmd_fit(fi);
        if (fpca->parsed()) return cmd_fpca(fp);
        if (reg->parsed()) return cmd_regress(re);
        if (test->parsed()) return cmd_test(te);
        if (sim->parsed()) return cmd_simulate(si);
        if (run->parsed()) return cmd_run(ru);
    } catch (const StageError& e) {
        std::cerr << "mda: " << e.what() << "\n";
        return e.exit_code();
    } catch (const ValidationError& e) {
        std::cerr << "mda: " << e.what() << "\n";
        return 2;
    } catch (const NumericalError& e) {
        std::cerr << "mda: numerical failure: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "mda: " << e.what() << "\n";
        return 3;
    }
    return 2;
}
