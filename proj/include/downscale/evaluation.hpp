#pragma once

// Skill metrics, conservation diagnostics, carbon estimates, reports and
// heatmap images.

#include <algorithm>
#include <array>
#include <chrono>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <limits>
#include <optional>
#include <span>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "downscale/fields.hpp"
#include "downscale/io.hpp"
#include "downscale/models.hpp"
#include "downscale/training.hpp"

namespace downscale {

inline void check_same_size(const char* op, std::size_t a, std::size_t b) {
    if (a != b) throw ShapeError(std::string(op) + ": sizes " + std::to_string(a) + " and " + std::to_string(b) + " differ");
}

inline double mse(std::span<const double> pred, std::span<const double> truth) {
    check_same_size("mse", pred.size(), truth.size());
    if (pred.empty()) throw ShapeError("mse: empty input");
    double s = 0.0;
    for (std::size_t i = 0; i < pred.size(); ++i) {
        const double d = pred[i] - truth[i];
        s += d * d;
    }
    return s / static_cast<double>(pred.size());
}

inline double rmse(std::span<const double> pred, std::span<const double> truth) { return std::sqrt(mse(pred, truth)); }

/// Peak signal-to-noise ratio in dB. Zero error gives +inf.
inline double psnr_from_mse(double mse_value, double data_range) {
    if (!(data_range > 0.0)) throw std::invalid_argument("psnr: data_range must be > 0");
    if (mse_value < 0.0) throw std::invalid_argument("psnr: negative mse");
    if (mse_value == 0.0) return std::numeric_limits<double>::infinity();
    return 20.0 * std::log10(data_range) - 10.0 * std::log10(mse_value);
}

inline double psnr(std::span<const double> pred, std::span<const double> truth, double data_range) {
    return psnr_from_mse(mse(pred, truth), data_range);
}

inline constexpr std::size_t kSsimWindow = 11;
inline constexpr double kSsimSigma = 1.5;
inline constexpr double kSsimK1 = 0.01;
inline constexpr double kSsimK2 = 0.03;

/// Normalized 1-D Gaussian taps of the SSIM window.
inline std::array<double, kSsimWindow> ssim_taps() {
    std::array<double, kSsimWindow> g{};
    const double c = (kSsimWindow - 1) / 2.0;
    double total = 0.0;
    for (std::size_t i = 0; i < kSsimWindow; ++i) {
        const double d = static_cast<double>(i) - c;
        g[i] = std::exp(-d * d / (2.0 * kSsimSigma * kSsimSigma));
        total += g[i];
    }
    for (auto& v : g) v /= total;
    return g;
}

namespace detail {

// Separable valid-mode filter of an ny x nx image with the SSIM window.
inline std::vector<double> ssim_filter(const std::vector<double>& img, std::size_t ny, std::size_t nx) {
    const auto g = ssim_taps();
    const std::size_t oy = ny - kSsimWindow + 1, ox = nx - kSsimWindow + 1;
    std::vector<double> rows(ny * ox, 0.0), out(oy * ox, 0.0);
    for (std::size_t y = 0; y < ny; ++y)
        for (std::size_t x = 0; x < ox; ++x) {
            double s = 0.0;
            for (std::size_t k = 0; k < kSsimWindow; ++k) s += g[k] * img[y * nx + x + k];
            rows[y * ox + x] = s;
        }
    for (std::size_t y = 0; y < oy; ++y)
        for (std::size_t x = 0; x < ox; ++x) {
            double s = 0.0;
            for (std::size_t k = 0; k < kSsimWindow; ++k) s += g[k] * rows[(y + k) * ox + x];
            out[y * ox + x] = s;
        }
    return out;
}

}  // namespace detail

/// Mean structural similarity over all valid 11x11 Gaussian windows.
inline double ssim(std::span<const double> a, std::span<const double> b, std::size_t ny, std::size_t nx,
                   double data_range) {
    check_same_size("ssim", a.size(), b.size());
    check_same_size("ssim", a.size(), ny * nx);
    if (ny < kSsimWindow || nx < kSsimWindow)
        throw ShapeError("ssim: grid " + std::to_string(ny) + "x" + std::to_string(nx) + " is smaller than the " +
                         std::to_string(kSsimWindow) + "x" + std::to_string(kSsimWindow) + " window");
    if (!(data_range > 0.0)) throw std::invalid_argument("ssim: data_range must be > 0");
    const double c1 = (kSsimK1 * data_range) * (kSsimK1 * data_range);
    const double c2 = (kSsimK2 * data_range) * (kSsimK2 * data_range);

    const std::size_t n = a.size();
    std::vector<double> va(a.begin(), a.end()), vb(b.begin(), b.end()), aa(n), bb(n), ab(n);
    for (std::size_t i = 0; i < n; ++i) {
        aa[i] = va[i] * va[i];
        bb[i] = vb[i] * vb[i];
        ab[i] = va[i] * vb[i];
    }
    const auto mu_a = detail::ssim_filter(va, ny, nx), mu_b = detail::ssim_filter(vb, ny, nx);
    const auto s_aa = detail::ssim_filter(aa, ny, nx), s_bb = detail::ssim_filter(bb, ny, nx),
               s_ab = detail::ssim_filter(ab, ny, nx);
    double total = 0.0;
    for (std::size_t i = 0; i < mu_a.size(); ++i) {
        const double ma = mu_a[i], mb = mu_b[i];
        const double var_a = s_aa[i] - ma * ma, var_b = s_bb[i] - mb * mb, cov = s_ab[i] - ma * mb;
        const double num = (2.0 * ma * mb + c1) * (2.0 * cov + c2);
        const double den = (ma * ma + mb * mb + c1) * (var_a + var_b + c2);
        total += num / den;
    }
    return total / static_cast<double>(mu_a.size());
}

inline double ssim(const GridField& a, const GridField& b, double data_range) {
    if (a.ny != b.ny || a.nx != b.nx) throw ShapeError("ssim: grid shapes differ");
    return ssim(a.values, b.values, a.ny, a.nx, data_range);
}

struct ConservationGap {
    double local = 0.0;   // mean over coarse cells of |block mean(pred) - input|
    double global = 0.0;  // |mean(pred) - mean(input)|
};

inline ConservationGap conservation_gap(std::span<const double> fine, std::size_t fy, std::size_t fx,
                                        std::span<const double> coarse, std::size_t cy, std::size_t cx) {
    check_same_size("conservation_gap", fine.size(), fy * fx);
    check_same_size("conservation_gap", coarse.size(), cy * cx);
    if (cy == 0 || cx == 0 || fy != 2 * cy || fx != 2 * cx)
        throw ShapeError("conservation_gap: fine grid " + std::to_string(fy) + "x" + std::to_string(fx) +
                         " is not twice the coarse grid " + std::to_string(cy) + "x" + std::to_string(cx));
    ConservationGap g;
    double fine_sum = 0.0, coarse_sum = 0.0;
    for (std::size_t y = 0; y < cy; ++y)
        for (std::size_t x = 0; x < cx; ++x) {
            const std::size_t r = 2 * y * fx + 2 * x;
            const double block = 0.25 * (fine[r] + fine[r + 1] + fine[r + fx] + fine[r + fx + 1]);
            g.local += std::abs(block - coarse[y * cx + x]);
            fine_sum += block;
            coarse_sum += coarse[y * cx + x];
        }
    const double n = static_cast<double>(cy * cx);
    g.local /= n;
    g.global = std::abs(fine_sum - coarse_sum) / n;
    return g;
}

inline ConservationGap conservation_gap(const GridField& fine, const GridField& coarse) {
    return conservation_gap(fine.values, fine.ny, fine.nx, coarse.values, coarse.ny, coarse.nx);
}

// ---------------------------------------------------------------------------
// Carbon

/// Inputs of the carbon estimate. The estimate is energy (configured device
/// power times wall time) times a grid emission factor; nothing is measured.
struct CarbonConfig {
    double device_power_watts = 100.0;
    double emission_factor_kg_per_kwh = 0.7;
};

inline void validate(const CarbonConfig& c) {
    if (!(c.device_power_watts > 0.0)) throw std::invalid_argument("device_power_watts must be > 0");
    if (!(c.emission_factor_kg_per_kwh > 0.0)) throw std::invalid_argument("emission_factor_kg_per_kwh must be > 0");
}

/// kg CO2 = W * s / 3.6e6 * kg/kWh. The factor is scaled to g/kWh first so
/// decimal factors do not pick up an extra rounding step.
inline double estimate_carbon(double wall_seconds, const CarbonConfig& cfg) {
    validate(cfg);
    if (!(wall_seconds >= 0.0)) throw std::invalid_argument("estimate_carbon: wall_seconds must be >= 0");
    return cfg.device_power_watts * wall_seconds * (cfg.emission_factor_kg_per_kwh * 1000.0) / 3.6e9;
}

// ---------------------------------------------------------------------------
// Reports

struct ReportRow {
    std::string model;
    std::string variable;
    double rmse = 0.0;
    double psnr_db = 0.0;
    double ssim = 0.0;
    double cons_gap_local = 0.0;
    double cons_gap_global = 0.0;
    double carbon_kg = 0.0;

    bool operator==(const ReportRow&) const = default;
};

struct EvalReport {
    std::vector<ReportRow> rows;
    KeyValues meta;  // dataset, grid sizes, ranges, wall time

    const ReportRow& row(const std::string& model, const std::string& variable) const {
        for (const auto& r : rows)
            if (r.model == model && r.variable == variable) return r;
        throw std::out_of_range("report has no row for " + model + "/" + variable);
    }
};

inline constexpr std::string_view kReportHeader =
    "model,variable,rmse,psnr_db,ssim,cons_gap_local,cons_gap_global,carbon_kg";

inline std::string format_report_csv(const EvalReport& r) {
    std::string out(kReportHeader);
    out += "\n";
    for (const auto& row : r.rows) {
        out += row.model + "," + row.variable + "," + format_double(row.rmse) + "," + format_double(row.psnr_db) + "," +
               format_double(row.ssim) + "," + format_double(row.cons_gap_local) + "," +
               format_double(row.cons_gap_global) + "," + format_double(row.carbon_kg) + "\n";
    }
    return out;
}

inline EvalReport parse_report_csv(const std::string& text) {
    std::istringstream in(text);
    std::string line;
    if (!std::getline(in, line) || trim(line) != kReportHeader)
        throw FormatError(FormatError::Kind::bad_value, "report csv: unexpected header");
    EvalReport r;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty()) continue;
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(trim(cell));
        if (cells.size() != 8)
            throw FormatError(FormatError::Kind::bad_value,
                              "report csv line " + std::to_string(line_no) + ": expected 8 columns");
        const std::string where = "report csv line " + std::to_string(line_no);
        r.rows.push_back({cells[0], cells[1], parse_double(cells[2], where), parse_double(cells[3], where),
                          parse_double(cells[4], where), parse_double(cells[5], where), parse_double(cells[6], where),
                          parse_double(cells[7], where)});
    }
    return r;
}

/// Fixed-width text table in the layout of the paper's result tables.
inline std::string render_report_text(const EvalReport& r) {
    std::ostringstream os;
    char buf[256];
    std::snprintf(buf, sizeof buf, "%-24s %-8s %12s %10s %8s %12s %12s %12s\n", "model", "variable", "rmse",
                  "psnr_db", "ssim", "gap_local", "gap_global", "carbon_kg*");
    os << buf;
    for (const auto& row : r.rows) {
        std::snprintf(buf, sizeof buf, "%-24s %-8s %12.5g %10.4f %8.5f %12.5g %12.5g %12.4g\n", row.model.c_str(),
                      row.variable.c_str(), row.rmse, row.psnr_db, row.ssim, row.cons_gap_local, row.cons_gap_global,
                      row.carbon_kg);
        os << buf;
    }
    os << "* carbon is an estimate: wall time x configured device power x emission factor\n";
    for (const auto& [k, v] : r.meta) os << "# " << k << " = " << v << "\n";
    return os.str();
}

// ---------------------------------------------------------------------------
// Evaluation

/// A model under evaluation. Without a checkpoint it is the bilinear baseline.
struct EvalModel {
    std::string name;
    std::optional<Checkpoint> checkpoint;
    double train_seconds = 0.0;  // counted into the carbon estimate
};

/// Fine prediction in physical units from a physical coarse stack.
inline FieldStack predict_fine(const EvalModel& m, const FieldStack& coarse, std::size_t scale = 2) {
    if (m.checkpoint) return predict(*m.checkpoint, coarse);
    const auto vars = coarse.vars();
    const Tensor up = bilinear_upsample(to_tensor(coarse, vars), scale);
    return from_tensor(up, vars, coarse.spacing_m() / static_cast<double>(scale));
}

struct EvalOptions {
    std::vector<Var> vars = surface_vars();
    CarbonConfig carbon{};
    std::string dataset = "unnamed";
};

/// Per-variable metrics over a test set of fine truth stacks. Coarse inputs
/// are derived by coarsening; all metrics are in physical units. RMSE pools
/// every test pixel, PSNR uses the pooled MSE and the truth range over the
/// test set, SSIM and the gaps are averaged over samples.
inline EvalReport evaluate(const std::vector<EvalModel>& models, const std::vector<FieldStack>& test,
                           const EvalOptions& opt) {
    if (models.empty()) throw std::invalid_argument("evaluate: no models given");
    if (test.empty()) throw std::invalid_argument("evaluate: empty test set");
    validate(opt.carbon);
    const std::size_t fy = test.front().ny(), fx = test.front().nx();
    for (std::size_t i = 0; i < test.size(); ++i) {
        const auto& s = test[i];
        validate(s);
        if (s.ny() != fy || s.nx() != fx)
            throw ShapeError("evaluate: test sample " + std::to_string(i) + " is " + std::to_string(s.ny()) + "x" +
                             std::to_string(s.nx()) + ", expected " + std::to_string(fy) + "x" + std::to_string(fx));
        if (fy % 2 != 0 || fx % 2 != 0)
            throw ShapeError("evaluate: test grid " + std::to_string(fy) + "x" + std::to_string(fx) +
                             " has no 2x coarse pairing");
        for (Var v : opt.vars)
            if (!s.has(v))
                throw ShapeError("evaluate: test sample " + std::to_string(i) + " lacks variable " +
                                 std::string(var_name(v)));
    }

    std::vector<FieldStack> coarse;
    for (const auto& s : test) coarse.push_back(coarsen(s, 2));

    std::vector<double> range(opt.vars.size());
    for (std::size_t k = 0; k < opt.vars.size(); ++k) {
        double lo = std::numeric_limits<double>::infinity(), hi = -lo;
        for (const auto& s : test) {
            const auto& vals = s.get(opt.vars[k]).values;
            const auto [mn, mx] = std::minmax_element(vals.begin(), vals.end());
            lo = std::min(lo, *mn);
            hi = std::max(hi, *mx);
        }
        // a constant truth field has no range; fall back to 1
        range[k] = hi > lo ? hi - lo : 1.0;
    }

    EvalReport report;
    double total_seconds = 0.0;
    const double n = static_cast<double>(test.size());
    for (const auto& m : models) {
        if (m.checkpoint)
            for (Var v : opt.vars)
                if (std::find(m.checkpoint->norm.vars.begin(), m.checkpoint->norm.vars.end(), v) ==
                    m.checkpoint->norm.vars.end())
                    throw std::invalid_argument("evaluate: model " + m.name + " does not predict " +
                                                std::string(var_name(v)));
        const auto t0 = std::chrono::steady_clock::now();
        std::vector<FieldStack> preds(test.size());
        for (std::size_t i = 0; i < test.size(); ++i)
            preds[i] = predict_fine(m, m.checkpoint ? coarse[i] : select(coarse[i], opt.vars));
        const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
        total_seconds += secs;
        const double carbon = estimate_carbon(m.train_seconds + secs, opt.carbon);

        for (std::size_t k = 0; k < opt.vars.size(); ++k) {
            const Var v = opt.vars[k];
            double se = 0.0, ss = 0.0, gl = 0.0, gg = 0.0;
            std::size_t count = 0;
            for (std::size_t i = 0; i < test.size(); ++i) {
                const auto& p = preds[i].get(v);
                const auto& t = test[i].get(v);
                se += mse(p.values, t.values) * static_cast<double>(t.values.size());
                count += t.values.size();
                ss += ssim(p, t, range[k]);
                const auto g = conservation_gap(p, coarse[i].get(v));
                gl += g.local;
                gg += g.global;
            }
            const double m_se = se / static_cast<double>(count);
            report.rows.push_back({m.name, std::string(var_name(v)), std::sqrt(m_se), psnr_from_mse(m_se, range[k]),
                                   ss / n, gl / n, gg / n, carbon});
        }
        report.meta["model." + m.name + ".inference_seconds"] = format_double(secs);
        if (m.checkpoint) {
            const auto& meta = m.checkpoint->meta;
            auto get = [&](const std::string& k) {
                auto it = meta.find(k);
                return it == meta.end() ? std::string("unknown") : it->second;
            };
            report.meta["model." + m.name + ".loss"] =
                get("loss.use_mass_loss") == "false"
                    ? std::string("mse")
                    : "mse+mass (" + get("loss.mass_convention") + ", " + get("loss.mass_units") + " units)";
        }
    }
    report.meta["metric_units"] = "physical";

    report.meta["dataset"] = opt.dataset;
    report.meta["samples"] = std::to_string(test.size());
    report.meta["fine_grid"] = std::to_string(fy) + "x" + std::to_string(fx);
    report.meta["coarse_grid"] = std::to_string(fy / 2) + "x" + std::to_string(fx / 2);
    report.meta["gap_convention"] = "mean_preserving";
    report.meta["ssim"] = "gaussian 11x11 sigma 1.5, K1 0.01, K2 0.03, valid windows";
    for (std::size_t k = 0; k < opt.vars.size(); ++k)
        report.meta["data_range." + std::string(var_name(opt.vars[k]))] = format_double(range[k]);
    report.meta["carbon.device_power_watts"] = format_double(opt.carbon.device_power_watts);
    report.meta["carbon.emission_factor_kg_per_kwh"] = format_double(opt.carbon.emission_factor_kg_per_kwh);
    report.meta["wall_seconds"] = format_double(total_seconds);
    return report;
}

// ---------------------------------------------------------------------------
// Heatmaps

/// 256-entry colour ramp, linear in RGB between five anchors:
///   0 (68, 1, 84)  64 (59, 82, 139)  128 (33, 145, 140)  192 (94, 201, 98)  255 (253, 231, 37)
/// Low values are dark purple, high values yellow.
inline const std::array<std::array<std::uint8_t, 3>, 256>& color_ramp() {
    static const auto ramp = [] {
        constexpr std::array<int, 5> at{0, 64, 128, 192, 255};
        constexpr std::array<std::array<int, 3>, 5> rgb{{{68, 1, 84}, {59, 82, 139}, {33, 145, 140}, {94, 201, 98},
                                                          {253, 231, 37}}};
        std::array<std::array<std::uint8_t, 3>, 256> r{};
        for (int i = 0; i < 256; ++i) {
            std::size_t seg = 0;
            while (seg + 2 < at.size() && i > at[seg + 1]) ++seg;
            const double t = static_cast<double>(i - at[seg]) / (at[seg + 1] - at[seg]);
            for (int c = 0; c < 3; ++c)
                r[i][c] = static_cast<std::uint8_t>(std::lround(rgb[seg][c] + t * (rgb[seg + 1][c] - rgb[seg][c])));
        }
        return r;
    }();
    return ramp;
}

/// Colour index of v on [lo, hi]; a degenerate range maps to 0.
inline std::uint8_t ramp_index(double v, double lo, double hi) {
    if (!(hi > lo)) return 0;
    const double t = std::clamp((v - lo) / (hi - lo), 0.0, 1.0);
    return static_cast<std::uint8_t>(std::lround(t * 255.0));
}

/// Writes a binary PPM (P6) of the field, row 0 at the top, plus a text
/// sidecar `<path>.txt` with the value range mapped onto the ramp.
inline void render_heatmap(const GridField& f, const std::filesystem::path& path,
                           std::optional<std::pair<double, double>> value_range = std::nullopt) {
    validate(f);
    double lo, hi;
    if (value_range) {
        std::tie(lo, hi) = *value_range;
    } else {
        const auto [mn, mx] = std::minmax_element(f.values.begin(), f.values.end());
        lo = *mn;
        hi = *mx;
    }
    ByteWriter w;
    w.bytes("P6\n" + std::to_string(f.nx) + " " + std::to_string(f.ny) + "\n255\n");
    const auto& ramp = color_ramp();
    for (double v : f.values)
        for (auto c : ramp[ramp_index(v, lo, hi)]) w.u8(c);
    w.write_file(path);

    KeyValues side{{"variable", std::string(var_name(f.var))},
                   {"units", std::string(var_units(f.var))},
                   {"min", format_double(lo)},
                   {"max", format_double(hi)},
                   {"ny", std::to_string(f.ny)},
                   {"nx", std::to_string(f.nx)},
                   {"ramp", "5-anchor linear, index 0 = min, 255 = max"}};
    write_text(path.string() + ".txt", format_key_values(side));
}

/// Coarse input, truth and prediction heatmaps on the truth's value range.
/// Returns the three PPM paths.
inline std::vector<std::filesystem::path> render_triptych(const GridField& coarse, const GridField& truth,
                                                          const GridField& pred, const std::filesystem::path& dir,
                                                          const std::string& stem) {
    const auto [mn, mx] = std::minmax_element(truth.values.begin(), truth.values.end());
    const std::pair<double, double> r{*mn, *mx};
    std::vector<std::filesystem::path> out{dir / (stem + "_coarse.ppm"), dir / (stem + "_truth.ppm"),
                                           dir / (stem + "_pred.ppm")};
    render_heatmap(coarse, out[0], r);
    render_heatmap(truth, out[1], r);
    render_heatmap(pred, out[2], r);
    return out;
}

}  // namespace downscale
