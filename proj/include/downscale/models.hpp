#pragma once

// The three downscalers: a shifted-window vision transformer, a residual
// CNN, and align-corners bilinear interpolation. Both learned models add
// their output to the bilinear upsample of the input, and both start with a
// zero output projection, so a freshly initialized model *is* the bilinear
// baseline.

#include "downscale/fields.hpp"
#include "downscale/io.hpp"
#include "downscale/rng.hpp"
#include "downscale/tensor.hpp"

#include <cmath>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

namespace downscale {

enum class ModelKind { vit, resnet, bilinear };

inline std::string_view kind_name(ModelKind k) {
    switch (k) {
        case ModelKind::vit: return "vit";
        case ModelKind::resnet: return "resnet";
        case ModelKind::bilinear: return "bilinear";
    }
    return "?";
}

inline ModelKind parse_kind(const std::string& s) {
    if (s == "vit") return ModelKind::vit;
    if (s == "resnet") return ModelKind::resnet;
    if (s == "bilinear") return ModelKind::bilinear;
    throw FormatError(FormatError::Kind::bad_value, "model kind must be vit, resnet or bilinear, got '" + s + "'");
}

struct VitSpec {
    std::size_t patch = 2;
    std::size_t window = 4;
    std::size_t dim = 96;
    std::size_t heads = 4;
    std::size_t blocks = 4;
    bool operator==(const VitSpec&) const = default;
};

/// Defaults are the residual-network hyperparameters used for the CNN baseline.
struct ResnetSpec {
    std::size_t channels = 64;
    std::size_t blocks = 16;
    std::size_t large_kernel = 9;
    std::size_t small_kernel = 3;
    bool operator==(const ResnetSpec&) const = default;
};

struct ModelSpec {
    ModelKind kind = ModelKind::vit;
    std::size_t in_channels = kNumVars;
    std::size_t scale = 2;
    VitSpec vit;
    ResnetSpec resnet;
    bool operator==(const ModelSpec&) const = default;

    /// Spatial dims of the coarse input must be multiples of this.
    std::size_t required_multiple() const { return kind == ModelKind::vit ? vit.patch * vit.window : 1; }
};

inline void validate(const ModelSpec& s) {
    auto bad = [](const std::string& m) { throw std::invalid_argument("model spec: " + m); };
    if (s.scale != 2) bad("scale must be 2, got " + std::to_string(s.scale));
    if (s.in_channels == 0) bad("in_channels must be positive");
    if (s.kind == ModelKind::vit) {
        const auto& v = s.vit;
        if (v.patch == 0 || v.window == 0 || v.dim == 0 || v.heads == 0 || v.blocks == 0)
            bad("vit sizes must be positive");
        if (v.dim % v.heads != 0)
            bad("vit dim " + std::to_string(v.dim) + " not divisible by heads " + std::to_string(v.heads));
        if (v.window % 2 != 0) bad("vit window must be even so it can be shifted by half");
    }
    if (s.kind == ModelKind::resnet) {
        const auto& r = s.resnet;
        if (r.channels == 0) bad("resnet channels must be positive");
        if (r.large_kernel % 2 == 0 || r.small_kernel % 2 == 0) bad("resnet kernel sizes must be odd");
    }
}

inline KeyValues spec_to_kv(const ModelSpec& s) {
    return {
        {"kind", std::string(kind_name(s.kind))},
        {"in_channels", std::to_string(s.in_channels)},
        {"scale", std::to_string(s.scale)},
        {"vit.patch", std::to_string(s.vit.patch)},
        {"vit.window", std::to_string(s.vit.window)},
        {"vit.dim", std::to_string(s.vit.dim)},
        {"vit.heads", std::to_string(s.vit.heads)},
        {"vit.blocks", std::to_string(s.vit.blocks)},
        {"resnet.channels", std::to_string(s.resnet.channels)},
        {"resnet.blocks", std::to_string(s.resnet.blocks)},
        {"resnet.large_kernel", std::to_string(s.resnet.large_kernel)},
        {"resnet.small_kernel", std::to_string(s.resnet.small_kernel)},
    };
}

inline ModelSpec spec_from_kv(const KeyValues& kv) {
    auto get = [&](const std::string& k) -> const std::string& {
        auto it = kv.find(k);
        if (it == kv.end()) throw FormatError(FormatError::Kind::missing_parameter, "model spec lacks key " + k);
        return it->second;
    };
    auto sz = [&](const std::string& k) {
        const auto v = parse_int(get(k), k);
        if (v < 0) throw FormatError(FormatError::Kind::bad_value, k + " must be non-negative");
        return static_cast<std::size_t>(v);
    };
    ModelSpec s;
    s.kind = parse_kind(get("kind"));
    s.in_channels = sz("in_channels");
    s.scale = sz("scale");
    s.vit = {sz("vit.patch"), sz("vit.window"), sz("vit.dim"), sz("vit.heads"), sz("vit.blocks")};
    s.resnet = {sz("resnet.channels"), sz("resnet.blocks"), sz("resnet.large_kernel"), sz("resnet.small_kernel")};
    return s;
}

/// Named parameter tensors, iterated in name order.
using Params = std::map<std::string, Tensor>;

inline std::size_t parameter_count(const Params& p) {
    std::size_t n = 0;
    for (const auto& [_, t] : p) n += t.numel();
    return n;
}

// ---------------------------------------------------------------------------
// Bilinear baseline

/// Align-corners bilinear interpolation of the last two axes by `scale`:
/// fine index i samples coarse coordinate i * (n - 1) / (scale * n - 1), so
/// the outermost fine rows and columns coincide with the coarse ones.
inline Tensor bilinear_upsample(const Tensor& coarse, std::size_t scale = 2) {
    const auto [c, h, w] = detail::as_chw("bilinear_upsample", coarse);
    if (h < 2 || w < 2) throw ShapeError("bilinear_upsample: need at least 2x2, got " + shape_str(coarse.shape()));
    const std::size_t H = h * scale, W = w * scale;
    struct Tap {
        std::size_t i0;
        double t;
    };
    auto taps = [scale](std::size_t n) {
        std::vector<Tap> out(n * scale);
        const double ratio = static_cast<double>(n - 1) / static_cast<double>(n * scale - 1);
        for (std::size_t i = 0; i < out.size(); ++i) {
            const double src = static_cast<double>(i) * ratio;
            const auto i0 = std::min(static_cast<std::size_t>(std::floor(src)), n - 2);
            out[i] = {i0, src - static_cast<double>(i0)};
        }
        return out;
    };
    const auto ty = taps(h), tx = taps(w);
    const auto& x = coarse.values();
    std::vector<double> out(c * H * W);
    for (std::size_t ch = 0; ch < c; ++ch) {
        const double* src = x.data() + ch * h * w;
        for (std::size_t Y = 0; Y < H; ++Y) {
            const auto [y0, fy] = ty[Y];
            for (std::size_t X = 0; X < W; ++X) {
                const auto [x0, fx] = tx[X];
                const double* r0 = src + y0 * w + x0;
                const double* r1 = r0 + w;
                const double top = r0[0] + (r0[1] - r0[0]) * fx;
                const double bot = r1[0] + (r1[1] - r1[0]) * fx;
                out[(ch * H + Y) * W + X] = top + (bot - top) * fy;
            }
        }
    }
    Shape shape = coarse.dim() == 3 ? Shape{c, H, W} : Shape{H, W};
    return Tensor::from(std::move(shape), std::move(out));
}

// ---------------------------------------------------------------------------
// Parameter initialization

namespace detail {

struct ParamInit {
    std::string name;
    Shape shape;
    enum { glorot, zeros, ones } fill;
    std::size_t fan_in = 0, fan_out = 0;
};

inline std::vector<ParamInit> vit_layout(const ModelSpec& s) {
    const auto& v = s.vit;
    const std::size_t d = v.dim, rel = (2 * v.window - 1) * (2 * v.window - 1);
    const std::size_t patch_in = s.in_channels * v.patch * v.patch;
    const std::size_t head_out = s.in_channels * (v.patch * s.scale) * (v.patch * s.scale);
    std::vector<ParamInit> L;
    L.push_back({"embed.w", {patch_in, d}, ParamInit::glorot, patch_in, d});
    L.push_back({"embed.b", {d}, ParamInit::zeros});
    L.push_back({"embed.edge", {4, d}, ParamInit::zeros});
    for (std::size_t b = 0; b < v.blocks; ++b) {
        const std::string p = "blocks." + std::to_string(b) + ".";
        L.push_back({p + "ln1.g", {d}, ParamInit::ones});
        L.push_back({p + "ln1.b", {d}, ParamInit::zeros});
        L.push_back({p + "attn.qkv.w", {d, 3 * d}, ParamInit::glorot, d, 3 * d});
        L.push_back({p + "attn.qkv.b", {3 * d}, ParamInit::zeros});
        L.push_back({p + "attn.rel_bias", {v.heads, rel}, ParamInit::zeros});
        L.push_back({p + "attn.proj.w", {d, d}, ParamInit::glorot, d, d});
        L.push_back({p + "attn.proj.b", {d}, ParamInit::zeros});
        L.push_back({p + "ln2.g", {d}, ParamInit::ones});
        L.push_back({p + "ln2.b", {d}, ParamInit::zeros});
        L.push_back({p + "mlp.fc1.w", {d, 4 * d}, ParamInit::glorot, d, 4 * d});
        L.push_back({p + "mlp.fc1.b", {4 * d}, ParamInit::zeros});
        L.push_back({p + "mlp.fc2.w", {4 * d, d}, ParamInit::glorot, 4 * d, d});
        L.push_back({p + "mlp.fc2.b", {d}, ParamInit::zeros});
    }
    L.push_back({"norm.g", {d}, ParamInit::ones});
    L.push_back({"norm.b", {d}, ParamInit::zeros});
    L.push_back({"head.w", {d, head_out}, ParamInit::zeros});
    L.push_back({"head.b", {head_out}, ParamInit::zeros});
    return L;
}

inline std::vector<ParamInit> resnet_layout(const ModelSpec& s) {
    const auto& r = s.resnet;
    const std::size_t c = s.in_channels, f = r.channels, kl = r.large_kernel, ks = r.small_kernel;
    const std::size_t up = c * s.scale * s.scale;
    std::vector<ParamInit> L;
    L.push_back({"stem.w", {f, c, kl, kl}, ParamInit::glorot, c * kl * kl, f * kl * kl});
    L.push_back({"stem.b", {f}, ParamInit::zeros});
    for (std::size_t b = 0; b < r.blocks; ++b) {
        const std::string p = "blocks." + std::to_string(b) + ".";
        L.push_back({p + "conv1.w", {f, f, ks, ks}, ParamInit::glorot, f * ks * ks, f * ks * ks});
        L.push_back({p + "conv1.b", {f}, ParamInit::zeros});
        L.push_back({p + "conv2.w", {f, f, ks, ks}, ParamInit::glorot, f * ks * ks, f * ks * ks});
        L.push_back({p + "conv2.b", {f}, ParamInit::zeros});
    }
    L.push_back({"upsample.w", {up, f, ks, ks}, ParamInit::glorot, f * ks * ks, up * ks * ks});
    L.push_back({"upsample.b", {up}, ParamInit::zeros});
    L.push_back({"refine.w", {c, c, kl, kl}, ParamInit::zeros});
    L.push_back({"refine.b", {c}, ParamInit::zeros});
    return L;
}

inline std::vector<ParamInit> layout(const ModelSpec& s) {
    switch (s.kind) {
        case ModelKind::vit: return vit_layout(s);
        case ModelKind::resnet: return resnet_layout(s);
        case ModelKind::bilinear: return {};
    }
    return {};
}

}  // namespace detail

/// Glorot-uniform weights (bound sqrt(6 / (fan_in + fan_out))), zero biases,
/// unit layer-norm gains, and a zero output projection. Parameter i of the
/// layout draws from sub-stream i of `seed`.
inline Params init_params(const ModelSpec& spec, std::uint64_t seed) {
    validate(spec);
    Params p;
    const auto L = detail::layout(spec);
    for (std::size_t i = 0; i < L.size(); ++i) {
        const auto& e = L[i];
        Tensor t = Tensor::zeros(e.shape, true);
        auto d = t.mutable_data();
        if (e.fill == detail::ParamInit::ones) std::fill(d.begin(), d.end(), 1.0);
        if (e.fill == detail::ParamInit::glorot) {
            const double bound = std::sqrt(6.0 / static_cast<double>(e.fan_in + e.fan_out));
            CounterRng rng(CounterRng::derive(seed, i));
            for (auto& v : d) v = rng.uniform(-bound, bound);
        }
        p.emplace(e.name, std::move(t));
    }
    return p;
}

/// Throws FormatError if `p` does not hold exactly the parameters `spec` names.
inline void check_params(const ModelSpec& spec, const Params& p) {
    const auto L = detail::layout(spec);
    for (const auto& e : L) {
        auto it = p.find(e.name);
        if (it == p.end()) throw FormatError(FormatError::Kind::missing_parameter, "missing parameter " + e.name);
        if (it->second.shape() != e.shape)
            throw FormatError(FormatError::Kind::shape_mismatch, "parameter " + e.name + " has shape " +
                                                                     shape_str(it->second.shape()) + ", expected " +
                                                                     shape_str(e.shape));
    }
    if (p.size() != L.size())
        throw FormatError(FormatError::Kind::shape_mismatch, "unexpected extra parameters for " +
                                                                 std::string(kind_name(spec.kind)) + " spec");
}

// ---------------------------------------------------------------------------
// Windowed transformer

namespace detail {

inline std::shared_ptr<std::vector<std::size_t>> make_index(std::size_t n) {
    return std::make_shared<std::vector<std::size_t>>(n);
}

// Token (gy, gx) after a cyclic shift lands at ((gy - shift) mod gh, ...).
// Windows are enumerated row-major over the shifted grid, tokens row-major
// within each window.
struct WindowGrid {
    std::size_t gh, gw, win, shift;

    std::size_t windows() const { return (gh / win) * (gw / win); }
    std::size_t tokens_per_window() const { return win * win; }

    /// Source token (flat gy*gw+gx) of window slot (w, t).
    std::size_t source(std::size_t w, std::size_t t) const {
        const std::size_t wy = w / (gw / win), wx = w % (gw / win);
        const std::size_t sy = (wy * win + t / win + shift) % gh;
        const std::size_t sx = (wx * win + t % win + shift) % gw;
        return sy * gw + sx;
    }
};

}  // namespace detail

/// Cyclic roll of a [gh*gw, d] token matrix: output token (y, x) is input
/// token ((y + shift) mod gh, (x + shift) mod gw).
inline Tensor cyclic_shift(const Tensor& tokens, std::size_t gh, std::size_t gw, std::size_t shift) {
    const std::size_t d = tokens.size(1);
    auto idx = detail::make_index(tokens.numel());
    for (std::size_t y = 0; y < gh; ++y)
        for (std::size_t x = 0; x < gw; ++x) {
            const std::size_t src = ((y + shift) % gh) * gw + (x + shift) % gw;
            for (std::size_t e = 0; e < d; ++e) (*idx)[(y * gw + x) * d + e] = src * d + e;
        }
    return gather(tokens, std::move(idx), tokens.shape(), "cyclic_shift");
}

/// Inverse of cyclic_shift.
inline Tensor cyclic_unshift(const Tensor& tokens, std::size_t gh, std::size_t gw, std::size_t shift) {
    const std::size_t d = tokens.size(1);
    auto idx = detail::make_index(tokens.numel());
    for (std::size_t y = 0; y < gh; ++y)
        for (std::size_t x = 0; x < gw; ++x) {
            const std::size_t dst = ((y + shift) % gh) * gw + (x + shift) % gw;
            for (std::size_t e = 0; e < d; ++e) (*idx)[dst * d + e] = (y * gw + x) * d + e;
        }
    return gather(tokens, std::move(idx), tokens.shape(), "cyclic_unshift");
}

namespace detail {

// Additive attention mask for shifted windows: tokens that were not adjacent
// before the cyclic roll must not attend to each other.
inline Tensor shift_mask(const WindowGrid& g, std::size_t heads) {
    const std::size_t nw = g.windows(), T = g.tokens_per_window();
    auto region = [&](std::size_t pos, std::size_t n) -> std::size_t {
        if (pos < n - g.win) return 0;
        if (pos < n - g.shift) return 1;
        return 2;
    };
    std::vector<double> m(nw * heads * T * T, 0.0);
    for (std::size_t w = 0; w < nw; ++w) {
        const std::size_t wy = w / (g.gw / g.win), wx = w % (g.gw / g.win);
        std::vector<std::size_t> label(T);
        for (std::size_t t = 0; t < T; ++t)
            label[t] = region(wy * g.win + t / g.win, g.gh) * 3 + region(wx * g.win + t % g.win, g.gw);
        for (std::size_t h = 0; h < heads; ++h)
            for (std::size_t a = 0; a < T; ++a)
                for (std::size_t b = 0; b < T; ++b)
                    if (label[a] != label[b]) m[((w * heads + h) * T + a) * T + b] = -1e9;
    }
    return Tensor::from({nw, heads, T, T}, std::move(m));
}

}  // namespace detail

/// One windowed multi-head self-attention layer over a [gh*gw, d] token matrix.
inline Tensor window_attention(const Tensor& x, const Params& p, const std::string& prefix, std::size_t gh,
                               std::size_t gw, std::size_t window, std::size_t heads, std::size_t shift) {
    const std::size_t d = x.size(1), hd = d / heads;
    const detail::WindowGrid g{gh, gw, window, shift};
    const std::size_t nw = g.windows(), T = g.tokens_per_window();

    // window partition (with the cyclic shift folded in)
    auto part = detail::make_index(nw * T * d);
    for (std::size_t w = 0; w < nw; ++w)
        for (std::size_t t = 0; t < T; ++t) {
            const std::size_t src = g.source(w, t);
            for (std::size_t e = 0; e < d; ++e) (*part)[(w * T + t) * d + e] = src * d + e;
        }
    Tensor xw = gather(x, part, {nw * T, d}, "window_partition");
    Tensor qkv = linear(xw, p.at(prefix + "qkv.w"), p.at(prefix + "qkv.b"));

    auto split = [&](std::size_t which) {
        auto idx = detail::make_index(nw * heads * T * hd);
        for (std::size_t w = 0; w < nw; ++w)
            for (std::size_t h = 0; h < heads; ++h)
                for (std::size_t t = 0; t < T; ++t)
                    for (std::size_t e = 0; e < hd; ++e)
                        (*idx)[((w * heads + h) * T + t) * hd + e] = (w * T + t) * 3 * d + which * d + h * hd + e;
        return gather(qkv, std::move(idx), {nw * heads, T, hd}, "split_heads");
    };
    Tensor q = split(0), k = split(1), v = split(2);

    Tensor scores = bmm(q, k, true) * (1.0 / std::sqrt(static_cast<double>(hd)));
    scores = reshape(scores, {nw, heads, T, T});

    // learned bias indexed by the relative offset of the two tokens
    const std::size_t span = 2 * window - 1;
    auto rel = detail::make_index(heads * T * T);
    for (std::size_t h = 0; h < heads; ++h)
        for (std::size_t a = 0; a < T; ++a)
            for (std::size_t b = 0; b < T; ++b) {
                const std::size_t dy = a / window + window - 1 - b / window;
                const std::size_t dx = a % window + window - 1 - b % window;
                (*rel)[(h * T + a) * T + b] = h * span * span + dy * span + dx;
            }
    scores = scores + gather(p.at(prefix + "rel_bias"), rel, {heads, T, T}, "rel_bias");
    if (shift > 0) scores = scores + detail::shift_mask(g, heads);

    Tensor attn = softmax(scores, 3);
    Tensor out = bmm(reshape(attn, {nw * heads, T, T}), v);  // [nw*heads, T, hd]

    // merge heads and undo the partition / shift
    auto merge = detail::make_index(gh * gw * d);
    for (std::size_t w = 0; w < nw; ++w)
        for (std::size_t t = 0; t < T; ++t) {
            const std::size_t dst = g.source(w, t);
            for (std::size_t h = 0; h < heads; ++h)
                for (std::size_t e = 0; e < hd; ++e)
                    (*merge)[dst * d + h * hd + e] = ((w * heads + h) * T + t) * hd + e;
        }
    Tensor merged = gather(out, std::move(merge), {gh * gw, d}, "window_merge");
    return linear(merged, p.at(prefix + "proj.w"), p.at(prefix + "proj.b"));
}

namespace detail {

// [gh*gw, 4] indicator of the token lying on the top, bottom, left, right
// edge of the grid. Lets the model treat boundary tokens differently without
// tying any parameter to the grid size.
inline Tensor boundary_indicator(std::size_t gh, std::size_t gw) {
    std::vector<double> e(gh * gw * 4, 0.0);
    for (std::size_t y = 0; y < gh; ++y)
        for (std::size_t x = 0; x < gw; ++x) {
            double* row = e.data() + (y * gw + x) * 4;
            row[0] = y == 0 ? 1.0 : 0.0;
            row[1] = y + 1 == gh ? 1.0 : 0.0;
            row[2] = x == 0 ? 1.0 : 0.0;
            row[3] = x + 1 == gw ? 1.0 : 0.0;
        }
    return Tensor::from({gh * gw, 4}, std::move(e));
}

}  // namespace detail

inline void check_vit_grid(const ModelSpec& spec, std::size_t h, std::size_t w) {
    const std::size_t m = spec.required_multiple();
    if (h % m != 0 || w % m != 0)
        throw ShapeError("vit: input grid " + std::to_string(h) + "x" + std::to_string(w) +
                         " must be a multiple of patch*window = " + std::to_string(m) + " in both dimensions");
}

/// coarse [C, H, W] -> fine [C, 2H, 2W]
inline Tensor vit_forward(const ModelSpec& spec, const Params& p, const Tensor& coarse) {
    const auto& v = spec.vit;
    if (coarse.dim() != 3 || coarse.size(0) != spec.in_channels)
        throw ShapeError("vit: expected [" + std::to_string(spec.in_channels) + ",H,W] input, got " +
                         shape_str(coarse.shape()));
    const std::size_t C = coarse.size(0), H = coarse.size(1), W = coarse.size(2);
    check_vit_grid(spec, H, W);
    const std::size_t P = v.patch, gh = H / P, gw = W / P, N = gh * gw, pin = C * P * P;

    // non-overlapping patches -> token rows
    auto pidx = detail::make_index(N * pin);
    for (std::size_t gy = 0; gy < gh; ++gy)
        for (std::size_t gx = 0; gx < gw; ++gx)
            for (std::size_t c = 0; c < C; ++c)
                for (std::size_t dy = 0; dy < P; ++dy)
                    for (std::size_t dx = 0; dx < P; ++dx)
                        (*pidx)[(gy * gw + gx) * pin + (c * P + dy) * P + dx] =
                            (c * H + gy * P + dy) * W + gx * P + dx;
    Tensor x = linear(gather(coarse, pidx, {N, pin}, "patchify"), p.at("embed.w"), p.at("embed.b"));
    x = x + matmul(detail::boundary_indicator(gh, gw), p.at("embed.edge"));

    for (std::size_t b = 0; b < v.blocks; ++b) {
        const std::string pre = "blocks." + std::to_string(b) + ".";
        const std::size_t shift = (b % 2 == 1) ? v.window / 2 : 0;
        Tensor h = layer_norm(x, p.at(pre + "ln1.g"), p.at(pre + "ln1.b"));
        x = x + window_attention(h, p, pre + "attn.", gh, gw, v.window, v.heads, shift);
        h = layer_norm(x, p.at(pre + "ln2.g"), p.at(pre + "ln2.b"));
        h = gelu(linear(h, p.at(pre + "mlp.fc1.w"), p.at(pre + "mlp.fc1.b")));
        x = x + linear(h, p.at(pre + "mlp.fc2.w"), p.at(pre + "mlp.fc2.b"));
    }

    x = layer_norm(x, p.at("norm.g"), p.at("norm.b"));
    Tensor y = linear(x, p.at("head.w"), p.at("head.b"));  // [N, C*r*r]
    const std::size_t r = P * spec.scale;
    y = reshape(transpose_last2(y), {C * r * r, gh, gw});
    return pixel_shuffle(y, r) + bilinear_upsample(coarse, spec.scale);
}

// ---------------------------------------------------------------------------
// Residual CNN

inline Tensor resnet_forward(const ModelSpec& spec, const Params& p, const Tensor& coarse) {
    if (coarse.dim() != 3 || coarse.size(0) != spec.in_channels)
        throw ShapeError("resnet: expected [" + std::to_string(spec.in_channels) + ",H,W] input, got " +
                         shape_str(coarse.shape()));
    Tensor h = conv2d_same(coarse, p.at("stem.w"), p.at("stem.b"));
    for (std::size_t b = 0; b < spec.resnet.blocks; ++b) {
        const std::string pre = "blocks." + std::to_string(b) + ".";
        Tensor r = gelu(conv2d_same(h, p.at(pre + "conv1.w"), p.at(pre + "conv1.b")));
        h = h + conv2d_same(r, p.at(pre + "conv2.w"), p.at(pre + "conv2.b"));
    }
    Tensor u = pixel_shuffle(conv2d_same(h, p.at("upsample.w"), p.at("upsample.b")), spec.scale);
    return conv2d_same(u, p.at("refine.w"), p.at("refine.b")) + bilinear_upsample(coarse, spec.scale);
}

inline Tensor forward(const ModelSpec& spec, const Params& p, const Tensor& coarse) {
    switch (spec.kind) {
        case ModelKind::vit: return vit_forward(spec, p, coarse);
        case ModelKind::resnet: return resnet_forward(spec, p, coarse);
        case ModelKind::bilinear: return bilinear_upsample(coarse, spec.scale);
    }
    throw std::logic_error("unknown model kind");
}

// ---------------------------------------------------------------------------
// Checkpoints
//
//   "CKP1", u8 version,
//   u32 length + model spec (key=value text),
//   u32 length + metadata (key=value text),
//   u32 tensor count, then per tensor:
//     u16 name length, name bytes, u8 rank, rank x u64 dims, f64 values
// Normalization statistics travel as the tensors "norm.mean" / "norm.std"
// with the variable order in metadata key "norm.vars".

inline constexpr std::string_view kCheckpointMagic = "CKP1";
inline constexpr std::uint8_t kCheckpointVersion = 1;

struct Checkpoint {
    ModelSpec spec;
    Params params;
    NormStats norm;
    KeyValues meta;  // training metadata: epochs, seed, losses, loss convention, grid sizes
};

namespace detail {

inline void write_tensor(ByteWriter& w, const std::string& name, const Shape& shape, std::span<const double> data) {
    w.u16(static_cast<std::uint16_t>(name.size()));
    w.bytes(name);
    w.u8(static_cast<std::uint8_t>(shape.size()));
    for (auto d : shape) w.u64(d);
    for (double v : data) w.f64(v);
}

inline std::string join_vars(const std::vector<Var>& vars) {
    std::string s;
    for (std::size_t i = 0; i < vars.size(); ++i) s += (i ? "," : "") + std::string(var_name(vars[i]));
    return s;
}

inline std::vector<Var> split_vars(const std::string& s) {
    std::vector<Var> out;
    std::size_t start = 0;
    while (start < s.size()) {
        auto end = s.find(',', start);
        if (end == std::string::npos) end = s.size();
        const auto name = trim(s.substr(start, end - start));
        auto v = var_from_name(name);
        if (!v) throw FormatError(FormatError::Kind::unknown_variable, "unknown variable '" + name + "'");
        out.push_back(*v);
        start = end + 1;
    }
    return out;
}

}  // namespace detail

inline std::vector<std::uint8_t> encode_checkpoint(const Checkpoint& c) {
    validate(c.spec);
    check_params(c.spec, c.params);
    ByteWriter w;
    w.bytes(kCheckpointMagic);
    w.u8(kCheckpointVersion);
    const auto spec_text = format_key_values(spec_to_kv(c.spec));
    w.u32(static_cast<std::uint32_t>(spec_text.size()));
    w.bytes(spec_text);
    KeyValues meta = c.meta;
    meta["norm.vars"] = detail::join_vars(c.norm.vars);
    const auto meta_text = format_key_values(meta);
    w.u32(static_cast<std::uint32_t>(meta_text.size()));
    w.bytes(meta_text);
    w.u32(static_cast<std::uint32_t>(c.params.size() + 2));
    for (const auto& [name, t] : c.params) detail::write_tensor(w, name, t.shape(), t.data());
    detail::write_tensor(w, "norm.mean", {c.norm.mean.size()}, c.norm.mean);
    detail::write_tensor(w, "norm.std", {c.norm.stddev.size()}, c.norm.stddev);
    return w.buffer();
}

inline Checkpoint decode_checkpoint(ByteReader r) {
    using K = FormatError::Kind;
    if (r.remaining() < 4 || r.bytes(4) != kCheckpointMagic)
        throw FormatError(K::bad_magic, r.source() + ": bad magic (not a checkpoint)");
    const auto version = r.u8();
    if (version != kCheckpointVersion)
        throw FormatError(K::version_mismatch, r.source() + ": checkpoint version " + std::to_string(version) +
                                                   ", expected " + std::to_string(kCheckpointVersion));
    Checkpoint c;
    c.spec = spec_from_kv(parse_key_values(r.bytes(r.u32()), r.source() + " (spec)"));
    c.meta = parse_key_values(r.bytes(r.u32()), r.source() + " (meta)");
    const std::uint32_t count = r.u32();
    std::vector<double> norm_mean, norm_std;
    for (std::uint32_t i = 0; i < count; ++i) {
        const std::string name = r.bytes(r.u16());
        const std::size_t rank = r.u8();
        if (rank == 0) throw FormatError(K::invalid_dimensions, r.source() + ": tensor " + name + " has rank 0");
        Shape shape(rank);
        std::uint64_t n = 1;
        for (auto& d : shape) {
            d = r.u64();
            if (d == 0 || d > kMaxGridCells || n * d > kMaxGridCells)
                throw FormatError(K::dimension_overflow, r.source() + ": tensor " + name + " dimension overflow");
            n *= d;
        }
        std::vector<double> values(n);
        r.f64_array(values.data(), n);
        if (name == "norm.mean") {
            norm_mean = std::move(values);
        } else if (name == "norm.std") {
            norm_std = std::move(values);
        } else {
            c.params.emplace(name, Tensor::from(std::move(shape), std::move(values), true));
        }
    }
    auto it = c.meta.find("norm.vars");
    if (it == c.meta.end()) throw FormatError(K::missing_parameter, r.source() + ": no normalization statistics");
    c.norm.vars = detail::split_vars(it->second);
    c.meta.erase(it);
    c.norm.mean = std::move(norm_mean);
    c.norm.stddev = std::move(norm_std);
    if (c.norm.mean.size() != c.norm.vars.size() || c.norm.stddev.size() != c.norm.vars.size())
        throw FormatError(K::shape_mismatch, r.source() + ": normalization statistics do not match norm.vars");
    validate(c.spec);
    check_params(c.spec, c.params);
    return c;
}

inline void save_checkpoint(const std::filesystem::path& path, const Checkpoint& c) {
    const auto bytes = encode_checkpoint(c);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError(FormatError::Kind::io, "cannot open " + path.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError(FormatError::Kind::io, "write failed: " + path.string());
}

inline Checkpoint load_checkpoint(const std::filesystem::path& path) {
    return decode_checkpoint(ByteReader::from_file(path));
}

}  // namespace downscale
