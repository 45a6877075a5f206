// downscale: synthesize data, train, evaluate, run zero-shot transfer and
// gradient checks.
//
// Exit codes: 0 ok, 1 usage or config error, 2 numerical failure,
// 3 I/O or file-format error.

#include <CLI11.hpp>

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "downscale/downscale.hpp"

namespace fs = std::filesystem;
using namespace downscale;

namespace {

enum Exit { kOk = 0, kUsage = 1, kNumeric = 2, kIo = 3 };

struct Globals {
    std::string config_path;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::vector<std::string> sets;
};

// defaults <- --config file <- subcommand flags <- --seed <- --set
KeyValues effective_config(const Globals& g, const std::vector<std::string>& flag_sets) {
    KeyValues cfg = g.config_path.empty() ? default_config() : load_config(g.config_path);
    for (const auto& s : flag_sets) apply_override(cfg, s);
    if (g.seed) set_key(cfg, "seed", std::to_string(*g.seed));
    for (const auto& s : g.sets) apply_override(cfg, s);
    return cfg;
}

fs::path prepare_out(const Globals& g, const std::string& fallback) {
    fs::path out = g.out.empty() ? fs::path(fallback) : fs::path(g.out);
    std::error_code ec;
    fs::create_directories(out, ec);
    if (ec) throw FormatError(FormatError::Kind::io, "cannot create " + out.string() + ": " + ec.message());
    return out;
}

void echo_config(const fs::path& dir, const KeyValues& cfg) { write_text(dir / "config.txt", format_key_values(cfg)); }

std::string four_digits(std::size_t i) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%04zu", i);
    return buf;
}

int cmd_synth(const Globals& g, const KeyValues& cfg) {
    const std::size_t n = cfg_size(cfg, "synth.samples"), ny = cfg_size(cfg, "synth.ny"), nx = cfg_size(cfg, "synth.nx");
    const double spacing = cfg_double(cfg, "synth.spacing_m");
    const std::string profile_name = cfg_string(cfg, "synth.profile");
    if (n == 0) throw ConfigError("synth.samples must be positive");
    if (ny % 4 != 0 || nx % 4 != 0 || ny == 0 || nx == 0)
        throw ConfigError("synth grid " + std::to_string(ny) + "x" + std::to_string(nx) +
                          " refused: both dims must be multiples of 4 so the 2x coarse grid has even dims");
    Profile profile;
    try {
        profile = profile_by_name(profile_name);
    } catch (const FormatError& e) {
        throw ConfigError(e.what());
    }
    const auto seed = cfg_seed(cfg);
    const fs::path out = prepare_out(g, "data");

    KeyValues manifest{{"seed", std::to_string(seed)},
                       {"samples", std::to_string(n)},
                       {"ny", std::to_string(ny)},
                       {"nx", std::to_string(nx)},
                       {"profile", profile.name},
                       {"spacing_m", format_double(spacing)},
                       {"variables", detail::join_vars(all_vars())},
                       {"note", "fine grids only; coarse inputs are derived by 2x area-mean coarsening"}};
    for (std::size_t i = 0; i < n; ++i) {
        const std::string name = "sample_" + four_digits(i) + ".grd";
        save_grid(out / name, synth_stack(ny, nx, CounterRng::derive(seed, i), profile, spacing));
        manifest["file." + four_digits(i)] = name;
    }
    write_text(out / "manifest.txt", format_key_values(manifest));
    echo_config(out, cfg);
    std::cout << "wrote " << n << " samples of " << ny << "x" << nx << " to " << out.string() << "\n";
    return kOk;
}

int cmd_train(const Globals& g, const KeyValues& cfg) {
    const ModelSpec spec = model_spec(cfg);
    const TrainConfig tc = train_config(cfg);
    const LossConfig lc = loss_config(cfg);
    const CarbonConfig cc = carbon_config(cfg);
    const auto train_set = load_dataset(cfg_string(cfg, "data.train"));
    std::vector<FieldStack> val_set;
    if (!cfg_string(cfg, "data.val").empty()) val_set = load_dataset(cfg_string(cfg, "data.val"));
    const fs::path out = prepare_out(g, "run");
    echo_config(out, cfg);

    const auto t0 = std::chrono::steady_clock::now();
    TrainResult r;
    try {
        r = train(spec, train_set, val_set, tc, lc, [&](const EpochLog& e) {
            std::cerr << "epoch " << e.epoch << "/" << tc.epochs << " mse " << e.train_mse << " mass " << e.train_mass
                      << " total " << e.train_total << "\n";
        });
    } catch (const std::invalid_argument& e) {
        throw ConfigError(e.what());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();

    save_checkpoint(out / "model.ckpt", r.checkpoint);
    write_text(out / "loss.csv", format_loss_csv(r.log));
    KeyValues meta{{"wall_seconds", format_double(secs)},
                   {"carbon_kg_estimate", format_double(estimate_carbon(secs, cc))},
                   {"carbon_method", "wall_seconds x device_power_watts x emission factor (estimate)"},
                   {"parameters", std::to_string(parameter_count(r.checkpoint.params))}};
    write_text(out / "run_meta.txt", format_key_values(meta));
    std::cout << "trained " << kind_name(spec.kind) << " (" << parameter_count(r.checkpoint.params)
              << " parameters) for " << tc.epochs << " epochs; final mse " << r.log.back().train_mse << "\n";
    return kOk;
}

std::vector<Var> eval_vars(const KeyValues& cfg) {
    return detail::config_value(cfg, "eval.variables", [](const std::string& s) { return vars_for(parse_mask(s)); });
}

EvalModel load_model(const fs::path& path) {
    EvalModel m;
    m.checkpoint = load_checkpoint(path);
    m.name = path.filename() == "model.ckpt" && path.has_parent_path() ? path.parent_path().filename().string()
                                                                       : path.stem().string();
    const fs::path meta = path.parent_path() / "run_meta.txt";
    if (fs::exists(meta)) {
        const auto kv = read_key_values(meta);
        if (auto it = kv.find("wall_seconds"); it != kv.end()) m.train_seconds = parse_double(it->second, "wall_seconds");
    }
    return m;
}

void write_report(const fs::path& out, const EvalReport& rep) {
    write_text(out / "report.csv", format_report_csv(rep));
    write_text(out / "report.txt", render_report_text(rep));
    std::cout << render_report_text(rep);
}

void write_heatmaps(const fs::path& out, const KeyValues& cfg, const std::vector<EvalModel>& models,
                    const std::vector<FieldStack>& test) {
    const auto var_s = cfg_string(cfg, "eval.heatmap_variable");
    const auto var = var_from_name(var_s);
    if (!var) throw ConfigError("eval.heatmap_variable: unknown variable '" + var_s + "'");
    // the prediction shown is the first trained model, or bilinear without one
    const EvalModel* shown = &models.front();
    for (const auto& m : models)
        if (m.checkpoint) {
            shown = &m;
            break;
        }
    for (const auto& s : cfg_list(cfg, "eval.heatmap_samples")) {
        const std::size_t i = static_cast<std::size_t>(parse_int(s, "eval.heatmap_samples"));
        if (i >= test.size()) throw ConfigError("eval.heatmap_samples: no sample " + s);
        const FieldStack coarse = coarsen(test[i], 2);
        const FieldStack pred = predict_fine(*shown, shown->checkpoint ? coarse : select(coarse, {*var}));
        render_triptych(coarse.get(*var), test[i].get(*var), pred.get(*var), out,
                        "sample_" + four_digits(i) + "_" + var_s);
    }
}

int cmd_eval(const Globals& g, const KeyValues& cfg) {
    std::vector<EvalModel> models;
    if (cfg_bool(cfg, "eval.include_bilinear")) models.push_back({"bilinear", std::nullopt, 0.0});
    for (const auto& p : cfg_list(cfg, "eval.checkpoints")) models.push_back(load_model(p));
    if (models.empty()) throw ConfigError("eval: nothing to evaluate (no checkpoints and bilinear disabled)");
    for (std::size_t i = 0; i < models.size(); ++i)
        for (std::size_t j = 0; j < i; ++j)
            if (models[i].name == models[j].name) models[i].name += "#" + std::to_string(i);

    const auto test = load_dataset(cfg_string(cfg, "data.test"));
    const fs::path out = prepare_out(g, "eval");
    echo_config(out, cfg);
    EvalOptions opt{eval_vars(cfg), carbon_config(cfg), cfg_string(cfg, "data.test")};
    const EvalReport rep = evaluate(models, test, opt);
    write_report(out, rep);
    write_heatmaps(out, cfg, models, test);
    return kOk;
}

int cmd_transfer(const Globals& g, const KeyValues& cfg) {
    const auto paths = cfg_list(cfg, "eval.checkpoints");
    if (paths.size() != 1) throw ConfigError("transfer needs exactly one checkpoint");
    EvalModel model = load_model(paths.front());
    const auto test = load_dataset(cfg_string(cfg, "data.test"));
    const std::size_t cy = test.front().ny() / 2, cx = test.front().nx() / 2;
    const auto& ck = *model.checkpoint;
    if (ck.spec.kind == ModelKind::vit) check_vit_grid(ck.spec, cy, cx);

    const fs::path out = prepare_out(g, "transfer");
    echo_config(out, cfg);
    std::vector<EvalModel> models;
    if (cfg_bool(cfg, "eval.include_bilinear")) models.push_back({"bilinear", std::nullopt, 0.0});
    models.push_back(model);
    EvalOptions opt{eval_vars(cfg), carbon_config(cfg), cfg_string(cfg, "data.test")};
    EvalReport rep = evaluate(models, test, opt);

    const auto meta_or = [&](const std::string& k) {
        auto it = ck.meta.find(k);
        return it == ck.meta.end() ? std::string("unknown") : it->second;
    };
    const std::string train_grid = meta_or("train.coarse_ny") + "x" + meta_or("train.coarse_nx");
    const std::string test_grid = std::to_string(cy) + "x" + std::to_string(cx);
    rep.meta["transfer.checkpoint"] = paths.front();
    rep.meta["transfer.train_coarse_grid"] = train_grid;
    rep.meta["transfer.test_coarse_grid"] = test_grid;
    rep.meta["transfer.grid_size_differs"] = train_grid != test_grid ? "true" : "false";
    rep.meta["transfer.finetuned"] = "false";
    write_report(out, rep);
    write_text(out / "transfer_meta.txt", format_key_values(rep.meta));
    write_heatmaps(out, cfg, models, test);
    return kOk;
}

int cmd_gradcheck(bool inject_fault) {
    auto cases = gradcheck_cases();
    if (inject_fault) cases.push_back(sign_flip_fixture());
    bool ok = true;
    std::printf("%-28s %14s %8s  %s\n", "op", "max_rel_error", "checked", "status");
    for (const auto& c : cases) {
        const auto r = run_gradcheck(c);
        ok = ok && r.passed;
        std::printf("%-28s %14.3e %8zu  %s\n", r.name.c_str(), r.max_rel_error, r.checked, r.passed ? "ok" : "FAIL");
    }
    std::printf("%zu ops, tolerance %.0e: %s\n", cases.size(), kGradcheckTolerance, ok ? "all passed" : "FAILED");
    return ok ? kOk : kNumeric;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Downscaling engine: synth | train | eval | transfer | gradcheck"};
    app.require_subcommand(1);
    app.fallthrough();
    Globals g;
    app.add_option("--config", g.config_path, "key=value config file");
    app.add_option("--seed", g.seed, "seed (overrides the config)");
    app.add_option("--out", g.out, "output directory");
    app.add_option("--set", g.sets, "override a config key, key=value (repeatable)");

    std::vector<std::string> flag_sets;
    auto bind = [&](CLI::App* sub, const std::string& flag, const std::string& key, const std::string& help) {
        sub->add_option_function<std::string>(
            flag, [&flag_sets, key](const std::string& v) { flag_sets.push_back(key + "=" + v); }, help);
    };

    auto* synth = app.add_subcommand("synth", "write synthetic fine-resolution samples");
    bind(synth, "--samples", "synth.samples", "number of samples");
    bind(synth, "--ny", "synth.ny", "fine grid rows");
    bind(synth, "--nx", "synth.nx", "fine grid columns");
    bind(synth, "--profile", "synth.profile", "default | smooth");

    auto* train_cmd = app.add_subcommand("train", "train a model");
    bind(train_cmd, "--data", "data.train", "training dataset directory");
    bind(train_cmd, "--val", "data.val", "validation dataset directory");
    bind(train_cmd, "--model", "model.kind", "vit | resnet | bilinear");
    bind(train_cmd, "--epochs", "train.epochs", "epochs");
    bind(train_cmd, "--channels", "train.channels", "full | surface");
    train_cmd->add_option_function<std::string>(
        "--mass-loss",
        [&flag_sets](const std::string& v) {
            if (v == "none" || v == "off") {
                flag_sets.push_back("loss.use_mass_loss=false");
            } else {
                flag_sets.push_back("loss.use_mass_loss=true");
                flag_sets.push_back("loss.mass_convention=" + v);
            }
        },
        "none | mean_preserving | raw_sum");

    std::vector<std::string> checkpoints;
    auto* eval_cmd = app.add_subcommand("eval", "evaluate bilinear and checkpoints on a test set");
    bind(eval_cmd, "--data", "data.test", "test dataset directory");
    eval_cmd->add_option("--checkpoint", checkpoints, "checkpoint file (repeatable)");

    auto* transfer_cmd = app.add_subcommand("transfer", "apply a checkpoint to a larger grid without retraining");
    bind(transfer_cmd, "--data", "data.test", "high-resolution test dataset directory");
    transfer_cmd->add_option("--checkpoint", checkpoints, "checkpoint file");

    bool inject_fault = false;
    auto* grad_cmd = app.add_subcommand("gradcheck", "finite-difference check of every differentiable op");
    grad_cmd->add_flag("--inject-fault", inject_fault, "add an op with a sign-flipped backward (test fixture)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kOk : kUsage;
    }

    try {
        if (grad_cmd->parsed()) return cmd_gradcheck(inject_fault);
        if (!checkpoints.empty()) {
            std::string joined;
            for (const auto& c : checkpoints) joined += (joined.empty() ? "" : ",") + c;
            flag_sets.push_back("eval.checkpoints=" + joined);
        }
        const KeyValues cfg = effective_config(g, flag_sets);
        if (synth->parsed()) return cmd_synth(g, cfg);
        if (train_cmd->parsed()) return cmd_train(g, cfg);
        if (eval_cmd->parsed()) return cmd_eval(g, cfg);
        if (transfer_cmd->parsed()) return cmd_transfer(g, cfg);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kUsage;
    } catch (const NumericError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return kNumeric;
    } catch (const FormatError& e) {
        std::cerr << "i/o error: " << e.what() << "\n";
        return kIo;
    } catch (const fs::filesystem_error& e) {
        std::cerr << "i/o error: " << e.what() << "\n";
        return kIo;
    } catch (const ShapeError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kUsage;
    }
    return kUsage;
}
