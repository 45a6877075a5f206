// Acceptance run: one PASS/FAIL line per criterion, nonzero exit on any failure.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <string>

#include "downscale/downscale.hpp"

using namespace downscale;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

int failures = 0;

void report(int id, bool ok, const std::string& detail) {
    std::printf("%s criterion %d: %s\n", ok ? "PASS" : "FAIL", id, detail.c_str());
    std::fflush(stdout);
    failures += ok ? 0 : 1;
}

std::string fmt(const char* f, double a) {
    char buf[128];
    std::snprintf(buf, sizeof buf, f, a);
    return buf;
}

void guarded(int id, const std::function<void()>& body) {
    try {
        body();
    } catch (const std::exception& e) {
        report(id, false, std::string("exception: ") + e.what());
    }
}

std::vector<FieldStack> synth_set(std::size_t n, std::size_t size, std::uint64_t first_seed) {
    std::vector<FieldStack> out;
    for (std::size_t i = 0; i < n; ++i) out.push_back(synth_stack(size, size, first_seed + i, default_profile()));
    return out;
}

// --- 1 ---------------------------------------------------------------------

void gradients() {
    const auto t0 = Clock::now();
    double worst = 0.0;
    std::string worst_op;
    bool all = true, has_vit = false;
    for (const auto& c : gradcheck_cases()) {
        const auto r = run_gradcheck(c);
        all = all && r.passed;
        has_vit = has_vit || c.name == "vit_end_to_end";
        if (r.max_rel_error >= worst) {
            worst = r.max_rel_error;
            worst_op = r.name;
        }
    }
    const double secs = seconds_since(t0);
    report(1, all && has_vit && worst < 1e-4 && secs < 120.0,
           std::to_string(gradcheck_cases().size()) + " ops, max rel error " + fmt("%.2e", worst) + " (" + worst_op +
               "), " + fmt("%.1f s", secs));
}

// --- 2 ---------------------------------------------------------------------

void conservation() {
    const auto t0 = Clock::now();
    CounterRng rng(21);
    std::vector<double> v(3 * 6 * 5);
    for (auto& x : v) x = rng.uniform(-4.0, 4.0);
    const Tensor in = Tensor::from({3, 6, 5}, v);
    const Tensor flat = upsample_const(in, 2);
    std::vector<double> cb(flat.values());
    for (std::size_t i = 0; i < cb.size(); ++i) cb[i] += ((i / 10 + i % 10) % 2 ? 0.7 : -0.7);
    const Tensor checker = Tensor::from({3, 12, 10}, cb);
    double worst = 0.0;
    for (bool per_var : {true, false}) {
        worst = std::max(worst, mass_loss(flat, in, MassConvention::mean_preserving, per_var).item());
        worst = std::max(worst, mass_loss(checker, in, MassConvention::mean_preserving, per_var).item());
    }
    const double raw = mass_loss(Tensor::from({1, 2, 2}, {1, 2, 3, 4}), Tensor::from({1, 1, 1}, {2.5}),
                                 MassConvention::raw_sum)
                           .item();
    // one channel, one coarse cell: the normalizer is 1
    const bool ok = worst <= 1e-12 && raw == std::abs(10.0 - 2.5) && seconds_since(t0) < 10.0;
    report(2, ok, "mean_preserving max " + fmt("%.1e", worst) + ", raw_sum hand case " + fmt("%g", raw));
}

// --- 3 ---------------------------------------------------------------------

void baseline() {
    const std::size_t h = 16, w = 16, H = 32, W = 32;
    const double a = 2.0, b = -0.35, c = 0.8;
    std::vector<double> coarse(h * w), truth(H * W);
    for (std::size_t y = 0; y < h; ++y)
        for (std::size_t x = 0; x < w; ++x) coarse[y * w + x] = a + b * x + c * y;
    const double ry = (h - 1.0) / (H - 1.0), rx = (w - 1.0) / (W - 1.0);
    for (std::size_t y = 0; y < H; ++y)
        for (std::size_t x = 0; x < W; ++x) truth[y * W + x] = a + b * (x * rx) + c * (y * ry);
    const Tensor up = bilinear_upsample(Tensor::from({1, h, w}, coarse));
    const auto [mn, mx] = std::minmax_element(truth.begin(), truth.end());
    const double e = rmse(up.values(), truth), s = ssim(up.values(), truth, H, W, *mx - *mn);
    report(3, e < 1e-10 && std::abs(s - 1.0) < 1e-9, "rmse " + fmt("%.1e", e) + ", 1 - ssim " + fmt("%.1e", 1.0 - s));
}

// --- 4 ---------------------------------------------------------------------

void zero_init() {
    CounterRng rng(4);
    std::vector<double> v(19 * 16 * 16);
    for (auto& x : v) x = rng.uniform(-3.0, 3.0);
    const Tensor x = Tensor::from({19, 16, 16}, v);
    const Tensor bl = bilinear_upsample(x);
    ModelSpec vit;
    ModelSpec res;
    res.kind = ModelKind::resnet;
    const bool vit_eq = forward(vit, init_params(vit, 1), x).values() == bl.values();
    const bool res_eq = forward(res, init_params(res, 1), x).values() == bl.values();

    // epoch-0 loss of a training run equals the bilinear loss on the same pairs
    const auto data = synth_set(2, 32, 300);
    TrainConfig tc;
    tc.epochs = 1;
    LossConfig lc;
    const auto r = train(vit, data, {}, tc, lc);
    const auto pairs = make_pairs(data, all_vars(), r.checkpoint.norm);
    double total = 0.0;
    for (const auto& p : pairs) {
        const ChannelScale cs = channel_scale(r.checkpoint.norm, all_vars());
        total += total_loss(bilinear_upsample(p.input), p.truth, p.input, lc, &cs).total.item();
    }
    const double bl_loss = total / static_cast<double>(pairs.size());
    report(4, vit_eq && res_eq && r.initial_total == bl_loss,
           std::string("vit ") + (vit_eq ? "bit-identical" : "differs") + ", resnet " +
               (res_eq ? "bit-identical" : "differs") + ", epoch-0 loss " + fmt("%.6g", r.initial_total) +
               " vs bilinear " + fmt("%.6g", bl_loss));
}

// --- 8 ---------------------------------------------------------------------

double ssim_brute(const std::vector<double>& a, const std::vector<double>& b, std::size_t ny, std::size_t nx,
                  double range) {
    double w[11][11], z = 0;
    for (int i = 0; i < 11; ++i)
        for (int j = 0; j < 11; ++j) z += w[i][j] = std::exp(-((i - 5.0) * (i - 5.0) + (j - 5.0) * (j - 5.0)) / 4.5);
    const double c1 = 0.0001 * range * range, c2 = 0.0009 * range * range;
    double acc = 0;
    std::size_t n = 0;
    for (std::size_t y = 0; y + 11 <= ny; ++y)
        for (std::size_t x = 0; x + 11 <= nx; ++x, ++n) {
            double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
            for (int i = 0; i < 11; ++i)
                for (int j = 0; j < 11; ++j) {
                    const double p = a[(y + i) * nx + x + j], q = b[(y + i) * nx + x + j], k = w[i][j] / z;
                    ma += k * p;
                    mb += k * q;
                    saa += k * p * p;
                    sbb += k * q * q;
                    sab += k * p * q;
                }
            const double va = saa - ma * ma, vb = sbb - mb * mb, cov = sab - ma * mb;
            acc += (2 * ma * mb + c1) * (2 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
    return acc / static_cast<double>(n);
}

void metric_oracles() {
    double worst = 0.0;
    for (std::size_t ny : {11, 20, 32}) {
        const std::size_t nx = 43 - ny;
        CounterRng rng(ny);
        std::vector<double> a(ny * nx), b(ny * nx);
        for (std::size_t i = 0; i < a.size(); ++i) {
            a[i] = rng.uniform(250.0, 300.0);
            b[i] = a[i] + rng.uniform(-5.0, 5.0);
        }
        double se = 0;
        for (std::size_t y = 0; y < ny; ++y)
            for (std::size_t x = 0; x < nx; ++x) se += std::pow(a[y * nx + x] - b[y * nx + x], 2);
        const double m = se / static_cast<double>(ny * nx);
        worst = std::max(worst, std::abs(rmse(a, b) - std::sqrt(m)));
        worst = std::max(worst, std::abs(psnr(a, b, 50.0) - 10.0 * std::log10(2500.0 / m)));
        worst = std::max(worst, std::abs(ssim(a, b, ny, nx, 50.0) - ssim_brute(a, b, ny, nx, 50.0)));
    }
    const double p = psnr_from_mse(1.0, 255.0);
    CounterRng rng(8);
    std::vector<double> f(24 * 24);
    for (auto& x : f) x = rng.uniform();
    const double self = ssim(f, f, 24, 24, 1.0);
    report(8, worst <= 1e-10 && std::abs(p - 48.1308) <= 1e-3 && self == 1.0,
           "max oracle diff " + fmt("%.1e", worst) + ", psnr(1, 255) " + fmt("%.4f", p) + ", ssim(a,a) " +
               fmt("%.17g", self));
}

// --- 9 ---------------------------------------------------------------------

void determinism(const fs::path& work) {
    const auto data = synth_set(4, 32, 900);
    ModelSpec spec;
    spec.in_channels = 4;
    spec.vit.dim = 32;
    spec.vit.heads = 2;
    spec.vit.blocks = 2;
    TrainConfig tc;
    tc.epochs = 3;
    tc.seed = 5;
    tc.channels = ChannelMask::surface;
    LossConfig lc;
    const auto a = train(spec, data, {}, tc, lc);
    const auto b = train(spec, data, {}, tc, lc);
    const bool same_ckpt = encode_checkpoint(a.checkpoint) == encode_checkpoint(b.checkpoint);
    const bool same_csv = format_loss_csv(a.log) == format_loss_csv(b.log);

    save_grid(work / "rt.grd", data[0]);
    const bool grd = load_grid(work / "rt.grd") == data[0] && encode_grid(load_grid(work / "rt.grd")) == encode_grid(data[0]);
    save_checkpoint(work / "rt.ckpt", a.checkpoint);
    const auto back = load_checkpoint(work / "rt.ckpt");
    bool ckpt = encode_checkpoint(back) == encode_checkpoint(a.checkpoint) && back.spec == a.checkpoint.spec &&
                back.norm == a.checkpoint.norm && back.meta == a.checkpoint.meta;
    for (const auto& [name, t] : a.checkpoint.params) ckpt = ckpt && back.params.at(name).values() == t.values();
    report(9, same_ckpt && same_csv && grd && ckpt,
           std::string("checkpoint ") + (same_ckpt ? "identical" : "differs") + ", loss csv " +
               (same_csv ? "identical" : "differs") + ", grd round trip " + (grd ? "exact" : "differs") +
               ", ckpt round trip " + (ckpt ? "exact" : "differs"));
}

// --- 5, 6, 7, 10 -------------------------------------------------------------

struct DeskRuns {
    TrainResult mse_only, with_mass;
    double mse_secs = 0, mass_secs = 0;
};

TrainResult desk_run(const std::vector<FieldStack>& train_set, bool mass, double& secs) {
    ModelSpec spec;  // dim 96, 4 blocks, window 4, patch 2
    TrainConfig tc;
    tc.epochs = 30;
    tc.lr = 1e-4;
    tc.batch_size = 1;
    tc.seed = 7;
    LossConfig lc;
    lc.use_mass_loss = mass;
    const auto t0 = Clock::now();
    auto r = train(spec, train_set, {}, tc, lc, [&](const EpochLog& e) {
        if (e.epoch % 10 == 0)
            std::fprintf(stderr, "  [%s] epoch %zu mse %.6g mass %.6g (%.0f s)\n", mass ? "mass" : "mse", e.epoch,
                         e.train_mse, e.train_mass, seconds_since(t0));
    });
    secs = seconds_since(t0);
    return r;
}

std::size_t wins(const EvalReport& rep, const std::string& model, double factor) {
    std::size_t n = 0;
    for (Var v : surface_vars()) {
        const std::string name(var_name(v));
        n += rep.row(model, name).rmse <= factor * rep.row("bilinear", name).rmse &&
             (factor > 1.0 || rep.row(model, name).rmse < rep.row("bilinear", name).rmse);
    }
    return n;
}

std::string rmse_table(const EvalReport& rep, const std::string& model) {
    std::string s;
    for (Var v : surface_vars()) {
        const std::string name(var_name(v));
        char buf[96];
        std::snprintf(buf, sizeof buf, "%s%s %.4f/%.4f", s.empty() ? "" : ", ", name.c_str(),
                      rep.row(model, name).rmse, rep.row("bilinear", name).rmse);
        s += buf;
    }
    return s;
}

void desk_scale(const fs::path& work) {
    const auto train_set = synth_set(64, 64, 1000);
    const auto test_set = synth_set(16, 64, 5000);
    DeskRuns runs;
    runs.mse_only = desk_run(train_set, false, runs.mse_secs);
    runs.with_mass = desk_run(train_set, true, runs.mass_secs);

    EvalOptions opt;
    opt.dataset = "desk-64";
    const EvalModel bl{"bilinear", std::nullopt, 0.0};
    const EvalModel mse_model{"vit_mse", runs.mse_only.checkpoint, runs.mse_secs};
    const EvalModel mass_model{"vit_mass", runs.with_mass.checkpoint, runs.mass_secs};
    EvalReport rep;
    guarded(5, [&] {
        rep = evaluate({bl, mse_model, mass_model}, test_set, opt);
        const double ratio = runs.mse_only.log.back().train_mse / runs.mse_only.initial_mse;
        const std::size_t w = wins(rep, "vit_mse", 1.0);
        report(5, ratio < 0.7 && w >= 3 && runs.mse_secs < 900.0,
               "train mse ratio " + fmt("%.3f", ratio) + ", beats bilinear on " + std::to_string(w) +
                   "/4 (rmse model/bilinear: " + rmse_table(rep, "vit_mse") + "), " + fmt("%.0f s", runs.mse_secs));
        std::printf("  note: mass-loss run reaches train mse ratio %.3f and beats bilinear on %zu/4\n",
                    runs.with_mass.log.back().train_mse / runs.with_mass.initial_mse, wins(rep, "vit_mass", 1.0));
    });

    guarded(6, [&] {
        // surface-variable mean of the global gap, each in units of its training std
        const auto& norm = runs.mse_only.checkpoint.norm;
        double g_mse = 0, g_mass = 0;
        for (Var v : surface_vars()) {
            const std::string name(var_name(v));
            g_mse += rep.row("vit_mse", name).cons_gap_global / norm.std_of(v) / 4.0;
            g_mass += rep.row("vit_mass", name).cons_gap_global / norm.std_of(v) / 4.0;
        }
        report(6, g_mass <= g_mse,
               "standardized global gap with mass loss " + fmt("%.5f", g_mass) + " vs mse-only " + fmt("%.5f", g_mse));
    });

    guarded(7, [&] {
        const auto t0 = Clock::now();
        const auto big = synth_set(8, 192, 9000);
        const auto tr = evaluate({bl, mse_model}, big, opt);
        const double secs = seconds_since(t0);
        const std::size_t w = wins(tr, "vit_mse", 1.1);
        report(7, w >= 3 && secs < 300.0,
               "96->192 without retraining: within 1.1x bilinear on " + std::to_string(w) + "/4 (" +
                   rmse_table(tr, "vit_mse") + "), " + fmt("%.0f s", secs));
    });

    guarded(10, [&] {
        const double kg = estimate_carbon(3600.0, {100.0, 0.7});
        const auto csv = format_report_csv(rep);
        write_text(work / "report.csv", csv);
        const auto back = parse_report_csv(read_text(work / "report.csv"));
        report(10, kg == 0.07 && back.rows == rep.rows && !rep.rows.empty(),
               "carbon(3600 s, 100 W, 0.7) = " + fmt("%.17g", kg) + " kg, report csv round trip " +
                   (back.rows == rep.rows ? "exact" : "differs") + " over " + std::to_string(rep.rows.size()) +
                   " rows");
    });
}

}  // namespace

int main() {
    const fs::path work = fs::temp_directory_path() / "downscale_acceptance";
    fs::remove_all(work);
    fs::create_directories(work);
    const auto t0 = Clock::now();

    guarded(1, gradients);
    guarded(2, conservation);
    guarded(3, baseline);
    guarded(4, zero_init);
    guarded(8, metric_oracles);
    guarded(9, [&] { determinism(work); });
    try {
        desk_scale(work);
    } catch (const std::exception& e) {
        for (int id : {5, 6, 7, 10}) report(id, false, std::string("training failed: ") + e.what());
    }

    std::printf("%d criteria failed, total %.0f s\n", failures, seconds_since(t0));
    return failures == 0 ? 0 : 1;
}
