#pragma once

// Composite MSE + mass-conservation loss, Adam, and the training loop.

#include "downscale/fields.hpp"
#include "downscale/io.hpp"
#include "downscale/models.hpp"
#include "downscale/rng.hpp"
#include "downscale/tensor.hpp"

#include <cmath>
#include <functional>
#include <limits>
#include <numeric>
#include <span>
#include <map>
#include <optional>
#include <string>
#include <vector>

namespace downscale {

/// How coarse cells relate to fine ones when comparing totals.
///  mean_preserving: coarse cells are block means, so sum(fine)/s^2 is compared with sum(coarse).
///  raw_sum: sum(fine) is compared with sum(coarse) literally.
enum class MassConvention { mean_preserving, raw_sum };

/// Units the mass gap is measured in while training. Physical gaps are the
/// standardized gap scaled by each variable's standard deviation.
enum class MassUnits { normalized, physical };

inline std::string_view convention_name(MassConvention c) {
    return c == MassConvention::mean_preserving ? "mean_preserving" : "raw_sum";
}

inline MassConvention parse_convention(const std::string& s) {
    if (s == "mean_preserving") return MassConvention::mean_preserving;
    if (s == "raw_sum") return MassConvention::raw_sum;
    throw FormatError(FormatError::Kind::bad_value,
                      "mass convention must be mean_preserving or raw_sum, got '" + s + "'");
}

inline std::string_view units_name(MassUnits u) { return u == MassUnits::normalized ? "normalized" : "physical"; }

inline MassUnits parse_units(const std::string& s) {
    if (s == "normalized") return MassUnits::normalized;
    if (s == "physical") return MassUnits::physical;
    throw FormatError(FormatError::Kind::bad_value, "mass units must be normalized or physical, got '" + s + "'");
}

struct LossConfig {
    bool use_mass_loss = true;
    double mass_weight = 1.0;
    MassConvention convention = MassConvention::mean_preserving;
    bool per_variable = true;
    MassUnits units = MassUnits::normalized;
};

inline void validate(const LossConfig& c) {
    if (!(c.mass_weight >= 0.0)) throw std::invalid_argument("mass_weight must be >= 0");
}

/// Per-channel affine map from standardized to physical values.
struct ChannelScale {
    std::vector<double> mean;
    std::vector<double> stddev;
};

inline ChannelScale channel_scale(const NormStats& st, const std::vector<Var>& vars) {
    ChannelScale cs;
    for (Var v : vars) {
        cs.mean.push_back(st.mean_of(v));
        cs.stddev.push_back(st.std_of(v));
    }
    return cs;
}

// ---------------------------------------------------------------------------
// Losses

inline void check_same_shape(const char* op, const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(op) + ": shapes " + shape_str(a.shape()) + " and " + shape_str(b.shape()) +
                         " differ");
}

/// Mean squared error. With per_variable the mean is taken per channel of a
/// [C, H, W] tensor and then averaged over channels.
inline Tensor mse_loss(const Tensor& pred, const Tensor& truth, bool per_variable = true) {
    check_same_shape("mse_loss", pred, truth);
    Tensor sq = square(pred - truth.detach());
    if (!per_variable || pred.dim() != 3) return mean(sq);
    const std::size_t C = pred.size(0), hw = pred.numel() / C;
    return mean(sum_last(reshape(sq, {C, hw})) / static_cast<double>(hw));
}

/// Conservation penalty between a fine prediction [C, sH, sW] and the coarse
/// input [C, H, W]. Per channel the gap is |sum(pred)*k - sum(input)| with
/// k = 1/s^2 (mean_preserving) or 1 (raw_sum); gaps are summed over channels
/// (or the signed gaps are summed first when per_variable is false) and
/// divided by the channel count and the coarse pixel count.
inline Tensor mass_loss(const Tensor& pred, const Tensor& input, MassConvention convention,
                        bool per_variable = true, const ChannelScale* physical = nullptr) {
    if (pred.dim() != 3 || input.dim() != 3 || pred.size(0) != input.size(0) || input.size(1) == 0 ||
        pred.size(1) % input.size(1) != 0 || pred.size(2) % input.size(2) != 0 ||
        pred.size(1) / input.size(1) != pred.size(2) / input.size(2) || pred.size(1) == input.size(1))
        throw ShapeError("mass_loss: prediction " + shape_str(pred.shape()) + " is not an integer upscaling of input " +
                         shape_str(input.shape()));
    const std::size_t C = pred.size(0);
    const std::size_t s = pred.size(1) / input.size(1);
    const std::size_t n_coarse = input.size(1) * input.size(2), n_fine = n_coarse * s * s;
    const double k = convention == MassConvention::mean_preserving ? 1.0 / static_cast<double>(s * s) : 1.0;

    Tensor sum_pred = sum_last(reshape(pred, {C, n_fine}));
    Tensor sum_in = sum_last(reshape(input.detach(), {C, n_coarse}));
    Tensor gap = sum_pred * k - sum_in;
    if (physical) {
        if (physical->stddev.size() != C) throw ShapeError("mass_loss: channel scale does not match channel count");
        std::vector<double> offset(C);
        for (std::size_t c = 0; c < C; ++c)
            offset[c] = physical->mean[c] * (static_cast<double>(n_fine) * k - static_cast<double>(n_coarse));
        gap = gap * Tensor::from({C}, physical->stddev) + Tensor::from({C}, std::move(offset));
    }
    Tensor total = per_variable ? sum(abs(gap)) : abs(sum(gap));
    return total / static_cast<double>(C * n_coarse);
}

struct LossTerms {
    Tensor total;
    Tensor mse;
    Tensor mass;  // undefined when the mass term is disabled
};

inline LossTerms total_loss(const Tensor& pred, const Tensor& truth, const Tensor& input, const LossConfig& cfg,
                            const ChannelScale* physical = nullptr) {
    validate(cfg);
    LossTerms t;
    t.mse = mse_loss(pred, truth, cfg.per_variable);
    if (!cfg.use_mass_loss) {
        t.total = t.mse;
        return t;
    }
    t.mass = mass_loss(pred, input, cfg.convention, cfg.per_variable,
                       cfg.units == MassUnits::physical ? physical : nullptr);
    t.total = t.mse + t.mass * cfg.mass_weight;
    return t;
}

// ---------------------------------------------------------------------------
// Adam

struct AdamConfig {
    double lr = 1e-4;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamMoments {
    std::vector<double> m;
    std::vector<double> v;
};

/// One bias-corrected Adam update; `step` is the 1-based step number.
inline void adam_step(std::span<double> param, std::span<const double> grad, AdamMoments& state, long step,
                      const AdamConfig& cfg) {
    if (state.m.empty()) {
        state.m.assign(param.size(), 0.0);
        state.v.assign(param.size(), 0.0);
    }
    if (grad.size() != param.size() || state.m.size() != param.size() || state.v.size() != param.size())
        throw ShapeError("adam_step: parameter, gradient and moment sizes differ");
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
    for (std::size_t i = 0; i < param.size(); ++i) {
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * grad[i];
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
        const double mhat = state.m[i] / c1;
        const double vhat = state.v[i] / c2;
        param[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
}

class Adam {
  public:
    explicit Adam(AdamConfig cfg) : cfg_(cfg) {}

    /// Applies the accumulated gradients of every parameter, then clears them.
    void step(Params& params) {
        ++t_;
        for (auto& [name, p] : params) {
            const auto g = p.grad();
            adam_step(p.mutable_data(), g, state_[name], t_, cfg_);
            p.zero_grad();
        }
    }

    long steps() const { return t_; }

  private:
    AdamConfig cfg_;
    long t_ = 0;
    std::map<std::string, AdamMoments> state_;
};

// ---------------------------------------------------------------------------
// Training loop

struct TrainConfig {
    double lr = 1e-4;
    std::size_t epochs = 50;
    std::size_t batch_size = 1;
    std::uint64_t seed = 0;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    ChannelMask channels = ChannelMask::full;
};

inline void validate(const TrainConfig& c) {
    if (!(c.lr > 0.0)) throw std::invalid_argument("lr must be > 0");
    if (c.epochs < 1) throw std::invalid_argument("epochs must be >= 1");
    if (c.batch_size < 1) throw std::invalid_argument("batch_size must be >= 1");
}

struct EpochLog {
    std::size_t epoch = 0;
    double train_mse = 0.0;
    double train_mass = 0.0;
    double train_total = 0.0;
    double val_rmse = std::numeric_limits<double>::quiet_NaN();  // standardized units; NaN without validation
};

inline std::string format_loss_csv(const std::vector<EpochLog>& log) {
    std::string out = "epoch,train_mse,train_mass,train_total,val_rmse\n";
    for (const auto& e : log) {
        out += std::to_string(e.epoch) + "," + format_double(e.train_mse) + "," + format_double(e.train_mass) + "," +
               format_double(e.train_total) + "," + (std::isnan(e.val_rmse) ? "" : format_double(e.val_rmse)) + "\n";
    }
    return out;
}

/// A (coarse input, fine truth) pair in standardized units, as [C, H, W] tensors.
struct TensorPair {
    Tensor input;
    Tensor truth;
};

/// Coarse inputs are always derived from the fine truth by area-mean coarsening.
inline std::vector<TensorPair> make_pairs(const std::vector<FieldStack>& fine, const std::vector<Var>& vars,
                                          const NormStats& norm, std::size_t scale = 2) {
    std::vector<TensorPair> out;
    for (const auto& f : fine) {
        const auto sel = select(f, vars);
        out.push_back({to_tensor(apply_norm(coarsen(sel, scale), norm), vars), to_tensor(apply_norm(sel, norm), vars)});
    }
    return out;
}

/// Parameter copies that do not record a graph.
inline Params detached(const Params& p) {
    Params out;
    for (const auto& [name, t] : p) out.emplace(name, t.detach());
    return out;
}

struct TrainResult {
    Checkpoint checkpoint;
    std::vector<EpochLog> log;
    double initial_mse = 0.0;    // mean over the training set before the first step
    double initial_mass = 0.0;
    double initial_total = 0.0;
};

using EpochCallback = std::function<void(const EpochLog&)>;

namespace detail {

struct SetLoss {
    double mse = 0.0, mass = 0.0, total = 0.0;
};

inline SetLoss evaluate_loss(const ModelSpec& spec, const Params& params, const std::vector<TensorPair>& pairs,
                             const LossConfig& loss, const ChannelScale& scale) {
    SetLoss s;
    const Params frozen = detached(params);
    for (const auto& p : pairs) {
        const Tensor pred = forward(spec, frozen, p.input);
        const auto t = total_loss(pred, p.truth, p.input, loss, &scale);
        s.mse += t.mse.item();
        s.mass += t.mass.defined() ? t.mass.item() : 0.0;
        s.total += t.total.item();
    }
    const double n = static_cast<double>(pairs.size());
    return {s.mse / n, s.mass / n, s.total / n};
}

inline double rmse_standardized(const ModelSpec& spec, const Params& params, const std::vector<TensorPair>& pairs) {
    const Params frozen = detached(params);
    double se = 0.0;
    std::size_t n = 0;
    for (const auto& p : pairs) {
        const Tensor pred = forward(spec, frozen, p.input);
        for (std::size_t i = 0; i < pred.numel(); ++i) {
            const double d = pred[i] - p.truth[i];
            se += d * d;
        }
        n += pred.numel();
    }
    return std::sqrt(se / static_cast<double>(n));
}

}  // namespace detail

/// Trains `spec` on fine-truth stacks. The model sees standardized coarse
/// inputs derived by coarsening; the checkpoint carries the fitted
/// normalization. Deterministic for a given seed.
inline TrainResult train(ModelSpec spec, const std::vector<FieldStack>& train_set,
                         const std::vector<FieldStack>& val_set, const TrainConfig& cfg, const LossConfig& loss,
                         const EpochCallback& on_epoch = {}) {
    validate(cfg);
    validate(loss);
    if (train_set.empty()) throw std::invalid_argument("train: empty training set");
    const auto vars = vars_for(cfg.channels);
    if (spec.in_channels != vars.size())
        throw std::invalid_argument("train: model expects " + std::to_string(spec.in_channels) +
                                    " channels but the channel mask selects " + std::to_string(vars.size()));
    validate(spec);

    std::vector<FieldStack> selected;
    for (const auto& s : train_set) selected.push_back(select(s, vars));
    const NormStats norm = fit_norm(selected);
    const ChannelScale scale = channel_scale(norm, vars);
    const auto pairs = make_pairs(train_set, vars, norm, spec.scale);
    const auto val_pairs = make_pairs(val_set, vars, norm, spec.scale);
    for (const auto& p : pairs) {
        if (p.input.shape() != pairs.front().input.shape())
            throw ShapeError("train: training samples have inconsistent shapes");
        if (spec.kind == ModelKind::vit) check_vit_grid(spec, p.input.size(1), p.input.size(2));
    }

    TrainResult result;
    Params params = init_params(spec, CounterRng::derive(cfg.seed, 0));
    const auto init = detail::evaluate_loss(spec, params, pairs, loss, scale);
    result.initial_mse = init.mse;
    result.initial_mass = init.mass;
    result.initial_total = init.total;

    Adam adam({cfg.lr, cfg.beta1, cfg.beta2, cfg.eps});
    CounterRng order_rng(CounterRng::derive(cfg.seed, 1));
    std::vector<std::size_t> order(pairs.size());
    const bool learnable = spec.kind != ModelKind::bilinear;

    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        shuffle(order, order_rng);
        EpochLog log;
        log.epoch = epoch;
        for (std::size_t start = 0, batch = 0; start < order.size(); start += cfg.batch_size, ++batch) {
            const std::size_t end = std::min(order.size(), start + cfg.batch_size);
            const double inv_b = 1.0 / static_cast<double>(end - start);
            for (std::size_t i = start; i < end; ++i) {
                const auto& p = pairs[order[i]];
                const Tensor pred = forward(spec, params, p.input);
                const auto t = total_loss(pred, p.truth, p.input, loss, &scale);
                const double v = t.total.item();
                if (!std::isfinite(v))
                    throw NumericError("non-finite loss at epoch " + std::to_string(epoch) + ", batch " +
                                       std::to_string(batch) + ", sample " + std::to_string(order[i]));
                log.train_mse += t.mse.item();
                log.train_mass += t.mass.defined() ? t.mass.item() : 0.0;
                log.train_total += v;
                if (learnable) backward(t.total * inv_b);
            }
            if (learnable) adam.step(params);
        }
        const double n = static_cast<double>(pairs.size());
        log.train_mse /= n;
        log.train_mass /= n;
        log.train_total /= n;
        if (!val_pairs.empty()) log.val_rmse = detail::rmse_standardized(spec, params, val_pairs);
        result.log.push_back(log);
        if (on_epoch) on_epoch(log);
    }

    auto& ck = result.checkpoint;
    ck.spec = spec;
    ck.params = std::move(params);
    ck.norm = norm;
    const auto& last = result.log.back();
    ck.meta = {
        {"train.epochs", std::to_string(cfg.epochs)},
        {"train.seed", std::to_string(cfg.seed)},
        {"train.lr", format_double(cfg.lr)},
        {"train.batch_size", std::to_string(cfg.batch_size)},
        {"train.channels", std::string(mask_name(cfg.channels))},
        {"train.samples", std::to_string(pairs.size())},
        {"train.coarse_ny", std::to_string(pairs.front().input.size(1))},
        {"train.coarse_nx", std::to_string(pairs.front().input.size(2))},
        {"train.fine_spacing_m", format_double(train_set.front().spacing_m())},
        {"loss.use_mass_loss", loss.use_mass_loss ? "true" : "false"},
        {"loss.mass_weight", format_double(loss.mass_weight)},
        {"loss.mass_convention", std::string(convention_name(loss.convention))},
        {"loss.per_variable", loss.per_variable ? "true" : "false"},
        {"loss.mass_units", std::string(units_name(loss.units))},
        {"loss.initial_mse", format_double(result.initial_mse)},
        {"loss.initial_total", format_double(result.initial_total)},
        {"loss.final_mse", format_double(last.train_mse)},
        {"loss.final_mass", format_double(last.train_mass)},
        {"loss.final_total", format_double(last.train_total)},
    };
    return result;
}

/// Runs a checkpointed (or bilinear) model on a physical-unit coarse stack
/// and returns the physical-unit fine prediction for the same variables.
inline FieldStack predict(const Checkpoint& ck, const FieldStack& coarse) {
    const auto vars = ck.norm.vars;
    const auto sel = select(coarse, vars);
    const Params frozen = detached(ck.params);
    const Tensor out = forward(ck.spec, frozen, to_tensor(apply_norm(sel, ck.norm), vars));
    return invert_norm(from_tensor(out, vars, coarse.spacing_m() / static_cast<double>(ck.spec.scale)), ck.norm);
}

}  // namespace downscale
