#pragma once

// Pipeline configuration as an INI-style text document.

#include "mda/embedding.hpp"
#include "mda/io.hpp"

#include <functional>

namespace mda {

struct PipelineConfig {
    // align
    std::string align_mode = "gpa"; // gpa | one_pass | none
    bool allow_reflection = false;
    double align_tol = 1e-10;
    Index align_max_iter = 100;
    // embed
    std::string embed_method = "ltsa";
    Index embed_k = 12;
    Index embed_dim = 2;
    double heat_bandwidth = 0.0;
    double diffusion_t = 1.0;
    double diffusion_bandwidth = 0.0;
    // mesh
    double target_edge = 0.0; // 0: x_range / 10
    std::string boundary = "hull"; // hull | path to a polygon CSV
    std::string regions;           // optional CSV: target,x1,y1,x2,y2,...
    bool auto_coarsen = true;
    // fit
    std::string lambda = "auto"; // auto | number
    double lambda_multiplier = 0.5;
    // fpca
    Index H = 200;
    Index K = 100;
    // regress
    Index cv_folds = 4;
    std::string grid = "auto"; // auto | none | comma list
    int max_sweeps = 10;
    bool shared_lambda = false;
    bool intercept = true;
    // test
    double alpha = 0.05;
    double energy = 0.99;
    Index bubble_draws = 200000;
    double normal_radius = 0.0; // 0: 0.1 x bounding-box diagonal of the reference
    // run
    std::uint64_t seed = 7;

    bool operator==(const PipelineConfig&) const = default;
};

namespace detail {

struct ConfigField {
    std::string section;
    std::string key;
    std::function<std::string(const PipelineConfig&)> get;
    std::function<void(PipelineConfig&, const std::string&)> set;
};

inline bool parse_bool(const std::string& v, const std::string& where)
{
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ValidationError("expected true/false for " + where + ", got '" + v + "'");
}

inline Index parse_index(const std::string& v, const std::string& where)
{
    const double d = parse_double(v, where);
    if (d != std::floor(d) || d < 0 || d > 9e15) throw ValidationError("expected a non-negative integer for " + where);
    return static_cast<Index>(d);
}

inline std::uint64_t parse_u64(const std::string& v, const std::string& where)
{
    if (v.empty() || v.find_first_not_of("0123456789") != std::string::npos)
        throw ValidationError("expected an unsigned integer for " + where);
    try {
        return std::stoull(v);
    } catch (const std::exception&) {
        throw ValidationError("integer out of range for " + where);
    }
}

template <typename T>
ConfigField str_field(std::string s, std::string k, T PipelineConfig::*m)
{
    return {s, k, [m](const PipelineConfig& c) { return c.*m; },
            [m](PipelineConfig& c, const std::string& v) { c.*m = v; }};
}

inline ConfigField dbl_field(std::string s, std::string k, double PipelineConfig::*m)
{
    const std::string where = s + "." + k;
    return {s, k, [m](const PipelineConfig& c) { return format_double(c.*m); },
            [m, where](PipelineConfig& c, const std::string& v) { c.*m = parse_double(v, where); }};
}

inline ConfigField idx_field(std::string s, std::string k, Index PipelineConfig::*m)
{
    const std::string where = s + "." + k;
    return {s, k, [m](const PipelineConfig& c) { return std::to_string(c.*m); },
            [m, where](PipelineConfig& c, const std::string& v) { c.*m = parse_index(v, where); }};
}

inline ConfigField int_field(std::string s, std::string k, int PipelineConfig::*m)
{
    const std::string where = s + "." + k;
    return {s, k, [m](const PipelineConfig& c) { return std::to_string(c.*m); },
            [m, where](PipelineConfig& c, const std::string& v) {
                c.*m = static_cast<int>(std::min<Index>(parse_index(v, where), 1 << 30));
            }};
}

inline ConfigField bool_field(std::string s, std::string k, bool PipelineConfig::*m)
{
    const std::string where = s + "." + k;
    return {s, k, [m](const PipelineConfig& c) { return std::string(c.*m ? "true" : "false"); },
            [m, where](PipelineConfig& c, const std::string& v) { c.*m = parse_bool(v, where); }};
}

inline const std::vector<ConfigField>& config_fields()
{
    static const std::vector<ConfigField> f = [] {
        std::vector<ConfigField> v;
        v.push_back(str_field("align", "mode", &PipelineConfig::align_mode));
        v.push_back(bool_field("align", "allow_reflection", &PipelineConfig::allow_reflection));
        v.push_back(dbl_field("align", "tol", &PipelineConfig::align_tol));
        v.push_back(idx_field("align", "max_iter", &PipelineConfig::align_max_iter));
        v.push_back(str_field("embed", "method", &PipelineConfig::embed_method));
        v.push_back(idx_field("embed", "k", &PipelineConfig::embed_k));
        v.push_back(idx_field("embed", "dim", &PipelineConfig::embed_dim));
        v.push_back(dbl_field("embed", "heat_bandwidth", &PipelineConfig::heat_bandwidth));
        v.push_back(dbl_field("embed", "diffusion_t", &PipelineConfig::diffusion_t));
        v.push_back(dbl_field("embed", "diffusion_bandwidth", &PipelineConfig::diffusion_bandwidth));
        v.push_back(dbl_field("mesh", "target_edge", &PipelineConfig::target_edge));
        v.push_back(str_field("mesh", "boundary", &PipelineConfig::boundary));
        v.push_back(str_field("mesh", "regions", &PipelineConfig::regions));
        v.push_back(bool_field("mesh", "auto_coarsen", &PipelineConfig::auto_coarsen));
        v.push_back(str_field("fit", "lambda", &PipelineConfig::lambda));
        v.push_back(dbl_field("fit", "lambda_multiplier", &PipelineConfig::lambda_multiplier));
        v.push_back(idx_field("fpca", "H", &PipelineConfig::H));
        v.push_back(idx_field("fpca", "K", &PipelineConfig::K));
        v.push_back(idx_field("regress", "cv_folds", &PipelineConfig::cv_folds));
        v.push_back(str_field("regress", "grid", &PipelineConfig::grid));
        v.push_back(int_field("regress", "max_sweeps", &PipelineConfig::max_sweeps));
        v.push_back(bool_field("regress", "shared_lambda", &PipelineConfig::shared_lambda));
        v.push_back(bool_field("regress", "intercept", &PipelineConfig::intercept));
        v.push_back(dbl_field("test", "alpha", &PipelineConfig::alpha));
        v.push_back(dbl_field("test", "energy", &PipelineConfig::energy));
        v.push_back(idx_field("test", "bubble_draws", &PipelineConfig::bubble_draws));
        v.push_back(dbl_field("test", "normal_radius", &PipelineConfig::normal_radius));
        v.push_back({"run", "seed", [](const PipelineConfig& c) { return std::to_string(c.seed); },
                     [](PipelineConfig& c, const std::string& s) { c.seed = parse_u64(s, "run.seed"); }});
        return v;
    }();
    return f;
}

} // namespace detail

inline void validate(const PipelineConfig& c)
{
    require(c.align_mode == "gpa" || c.align_mode == "one_pass" || c.align_mode == "none",
            "align.mode must be gpa, one_pass or none");
    require(c.align_tol > 0.0, "align.tol must be positive");
    require(c.align_max_iter >= 1, "align.max_iter must be >= 1");
    parse_embedding_method(c.embed_method);
    require(c.embed_k >= 2, "embed.k must be >= 2");
    require(c.embed_dim == 2, "embed.dim must be 2 for meshing");
    require(c.target_edge >= 0.0, "mesh.target_edge must be >= 0");
    if (c.lambda != "auto") {
        const double l = parse_double(c.lambda, "fit.lambda");
        require(l >= 0.0, "fit.lambda must be >= 0");
    }
    require(c.lambda_multiplier > 0.0, "fit.lambda_multiplier must be positive");
    require(c.H >= 1 && c.K >= 1, "fpca.H and fpca.K must be >= 1");
    require(c.cv_folds >= 2, "regress.cv_folds must be >= 2");
    require(c.max_sweeps >= 1, "regress.max_sweeps must be >= 1");
    require(c.alpha > 0.0 && c.alpha <= 1.0, "test.alpha must lie in (0, 1]");
    require(c.energy > 0.0 && c.energy <= 1.0, "test.energy must lie in (0, 1]");
    require(c.bubble_draws >= 1, "test.bubble_draws must be >= 1");
    require(c.normal_radius >= 0.0, "test.normal_radius must be >= 0");
}

inline std::string to_text(const PipelineConfig& c)
{
    std::string out, section;
    for (const auto& f : detail::config_fields()) {
        if (f.section != section) {
            if (!section.empty()) out += '\n';
            section = f.section;
            out += "[" + section + "]\n";
        }
        out += f.key + " = " + f.get(c) + "\n";
    }
    return out;
}

/// Parses `[section]` headers and `key = value` lines; '#' starts a comment.
/// Keys not set keep their defaults; unknown sections or keys are errors.
inline PipelineConfig parse_config(const std::string& text)
{
    PipelineConfig c;
    std::istringstream is(text);
    std::string line, section;
    std::size_t line_no = 0;
    std::set<std::string> seen;
    while (std::getline(is, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.erase(hash);
        line = trim(line);
        if (line.empty()) continue;
        const std::string where = "config line " + std::to_string(line_no);
        if (line.front() == '[') {
            if (line.back() != ']') throw ValidationError("malformed section header at " + where);
            section = trim(line.substr(1, line.size() - 2));
            bool known = false;
            for (const auto& f : detail::config_fields()) known = known || f.section == section;
            if (!known) throw ValidationError("unknown config section [" + section + "] at " + where);
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ValidationError("expected key = value at " + where);
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (section.empty()) throw ValidationError("key '" + key + "' outside any section at " + where);
        const detail::ConfigField* field = nullptr;
        for (const auto& f : detail::config_fields())
            if (f.section == section && f.key == key) field = &f;
        if (!field) throw ValidationError("unknown config key " + section + "." + key + " at " + where);
        if (!seen.insert(section + "." + key).second)
            throw ValidationError("duplicate config key " + section + "." + key + " at " + where);
        field->set(c, value);
    }
    validate(c);
    return c;
}

inline PipelineConfig load_config(const std::filesystem::path& path)
{
    auto is = detail::open_in(path, false);
    std::ostringstream ss;
    ss << is.rdbuf();
    return parse_config(ss.str());
}

inline std::uint64_t fnv1a(const std::string& bytes)
{
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : bytes) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    return h;
}

inline std::string hex64(std::uint64_t v)
{
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(v));
    return buf;
}

inline std::string config_hash(const PipelineConfig& c)
{
    return hex64(fnv1a(to_text(c)));
}

/// Stream seeds for each stage, derived from the master seed.
inline std::uint64_t stage_seed(const PipelineConfig& c, const std::string& stage)
{
    return mix_seed(c.seed, fnv1a(stage));
}

} // namespace mda
