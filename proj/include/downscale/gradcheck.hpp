#pragma once

// Finite-difference checks of every differentiable operation and of small
// end-to-end models.

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "downscale/models.hpp"
#include "downscale/rng.hpp"
#include "downscale/tensor.hpp"
#include "downscale/training.hpp"

namespace downscale {

inline constexpr double kGradcheckTolerance = 1e-4;

/// A scalar function of some leaf tensors.
struct GradCase {
    std::string name;
    std::vector<Tensor> inputs;  // values to check at; cloned as leaves
    std::function<Tensor(const std::vector<Tensor>&)> loss;
};

struct GradResult {
    std::string name;
    double max_rel_error = 0.0;
    std::size_t checked = 0;
    bool passed = false;
};

struct GradcheckOptions {
    double step = 1e-5;               // scaled by max(1, |x|)
    double floor = 1e-3;              // denominator floor of the relative error
    std::size_t max_elements = 256;   // per input; larger inputs are subsampled
    double tolerance = kGradcheckTolerance;
};

/// Compares analytic gradients with central differences. The error of one
/// element is |analytic - numeric| / max(|analytic|, |numeric|, floor).
inline GradResult run_gradcheck(const GradCase& c, const GradcheckOptions& opt = {}) {
    auto leaves = [&](bool grad) {
        std::vector<Tensor> out;
        for (const auto& t : c.inputs) out.push_back(Tensor::from(t.shape(), t.values(), grad));
        return out;
    };
    auto analytic_in = leaves(true);
    Tensor l = c.loss(analytic_in);
    if (l.numel() != 1) throw ShapeError("gradcheck " + c.name + ": loss is not a scalar");
    backward(l);

    GradResult r{c.name};
    auto probe = leaves(false);
    for (std::size_t k = 0; k < probe.size(); ++k) {
        const auto g = analytic_in[k].grad();
        const std::size_t n = probe[k].numel();
        const std::size_t stride = n > opt.max_elements ? (n + opt.max_elements - 1) / opt.max_elements : 1;
        auto data = probe[k].mutable_data();
        for (std::size_t i = (k * 7) % stride; i < n; i += stride) {
            const double orig = data[i];
            const double h = opt.step * std::max(1.0, std::abs(orig));
            data[i] = orig + h;
            const double up = c.loss(probe).item();
            data[i] = orig - h;
            const double down = c.loss(probe).item();
            data[i] = orig;
            const double num = (up - down) / (2.0 * h);
            const double err = std::abs(g[i] - num) / std::max({std::abs(g[i]), std::abs(num), opt.floor});
            r.max_rel_error = std::max(r.max_rel_error, err);
            ++r.checked;
        }
    }
    r.passed = r.checked > 0 && r.max_rel_error < opt.tolerance;
    return r;
}

namespace detail {

inline Tensor random_tensor(Shape shape, CounterRng& rng, double lo = -1.0, double hi = 1.0) {
    std::vector<double> v(numel_of(shape));
    for (auto& x : v) x = rng.uniform(lo, hi);
    return Tensor::from(std::move(shape), std::move(v));
}

// Values bounded away from zero, for ops with a kink there.
inline Tensor away_from_zero(Shape shape, CounterRng& rng) {
    std::vector<double> v(numel_of(shape));
    for (auto& x : v) x = (rng.uniform() < 0.5 ? -1.0 : 1.0) * rng.uniform(0.2, 1.0);
    return Tensor::from(std::move(shape), std::move(v));
}

// Reduces an op output to a scalar through fixed random weights so every
// output element contributes a distinct gradient.
inline Tensor project(const Tensor& out, std::uint64_t seed) {
    CounterRng rng(seed);
    return sum(out * random_tensor(out.shape(), rng));
}

inline Params random_params(const ModelSpec& spec, std::uint64_t seed, double scale) {
    Params p = init_params(spec, seed);
    CounterRng rng(CounterRng::derive(seed, 99));
    for (auto& [name, t] : p) {
        std::vector<double> v(t.values());
        for (auto& x : v) x += scale * rng.normal();
        t = Tensor::from(t.shape(), std::move(v));
    }
    return p;
}

}  // namespace detail

/// Every differentiable operation plus tiny end-to-end models.
inline std::vector<GradCase> gradcheck_cases(std::uint64_t seed = 1234) {
    using detail::project;
    CounterRng rng(seed);
    auto rt = [&](Shape s) { return detail::random_tensor(std::move(s), rng); };
    auto pos = [&](Shape s) { return detail::random_tensor(std::move(s), rng, 0.5, 2.0); };
    std::vector<GradCase> cs;
    auto add_case = [&](std::string name, std::vector<Tensor> in, std::function<Tensor(const std::vector<Tensor>&)> f) {
        cs.push_back({std::move(name), std::move(in), std::move(f)});
    };

    add_case("add", {rt({3, 4}), rt({3, 4})}, [](auto& x) { return project(x[0] + x[1], 1); });
    add_case("add_broadcast", {rt({2, 3, 4}), rt({4})}, [](auto& x) { return project(x[0] + x[1], 2); });
    add_case("sub", {rt({3, 4}), rt({3, 4})}, [](auto& x) { return project(x[0] - x[1], 3); });
    add_case("sub_broadcast", {rt({3, 4}), rt({1})}, [](auto& x) { return project(x[0] - x[1], 4); });
    add_case("mul", {rt({3, 4}), rt({3, 4})}, [](auto& x) { return project(x[0] * x[1], 5); });
    add_case("mul_broadcast", {rt({2, 3, 4}), rt({3, 4})}, [](auto& x) { return project(x[0] * x[1], 6); });
    add_case("div", {rt({3, 4}), pos({3, 4})}, [](auto& x) { return project(x[0] / x[1], 7); });
    add_case("div_broadcast", {rt({3, 4}), pos({4})}, [](auto& x) { return project(x[0] / x[1], 8); });
    add_case("neg", {rt({5})}, [](auto& x) { return project(neg(x[0]), 9); });
    add_case("square", {rt({5})}, [](auto& x) { return project(square(x[0]), 10); });
    add_case("abs", {detail::away_from_zero({6}, rng)}, [](auto& x) { return project(abs(x[0]), 11); });
    add_case("gelu", {rt({2, 5})}, [](auto& x) { return project(gelu(x[0]), 12); });
    add_case("sum", {rt({3, 4})}, [](auto& x) { return sum(x[0]) * sum(x[0]); });
    add_case("mean", {rt({3, 4})}, [](auto& x) { return square(mean(x[0])); });
    add_case("sum_last", {rt({3, 4})}, [](auto& x) { return project(sum_last(x[0]), 13); });
    add_case("reshape", {rt({3, 4})}, [](auto& x) { return project(reshape(x[0], {2, 6}), 14); });
    add_case("gather", {rt({6})}, [](auto& x) {
        auto idx = std::make_shared<std::vector<std::size_t>>(std::vector<std::size_t>{5, 0, 0, 3, 2, 2, 2, 1});
        return project(gather(x[0], idx, {2, 4}), 15);
    });
    add_case("transpose_last2", {rt({2, 3, 4})}, [](auto& x) { return project(transpose_last2(x[0]), 16); });
    add_case("bmm", {rt({2, 3, 4}), rt({2, 4, 5})}, [](auto& x) { return project(bmm(x[0], x[1]), 17); });
    add_case("bmm_transposed", {rt({2, 3, 4}), rt({2, 5, 4})},
             [](auto& x) { return project(bmm(x[0], x[1], true), 18); });
    add_case("matmul", {rt({3, 4}), rt({4, 2})}, [](auto& x) { return project(matmul(x[0], x[1]), 19); });
    add_case("linear", {rt({3, 4}), rt({4, 5}), rt({5})},
             [](auto& x) { return project(linear(x[0], x[1], x[2]), 20); });
    add_case("softmax_last", {rt({3, 5})}, [](auto& x) { return project(softmax(x[0], 1), 21); });
    add_case("softmax_axis0", {rt({4, 3})}, [](auto& x) { return project(softmax(x[0], 0), 22); });
    add_case("layer_norm", {rt({3, 6}), rt({6}), rt({6})},
             [](auto& x) { return project(layer_norm(x[0], x[1], x[2]), 23); });
    add_case("conv2d_same", {rt({2, 5, 6}), rt({3, 2, 3, 3}), rt({3})},
             [](auto& x) { return project(conv2d_same(x[0], x[1], x[2]), 24); });
    add_case("conv2d_stride2", {rt({2, 6, 6}), rt({2, 2, 3, 3}), rt({2})},
             [](auto& x) { return project(conv2d(x[0], x[1], x[2], 2, 1), 25); });
    add_case("avg_pool2d", {rt({2, 4, 6})}, [](auto& x) { return project(avg_pool2d(x[0], 2), 26); });
    add_case("pixel_shuffle", {rt({8, 2, 3})}, [](auto& x) { return project(pixel_shuffle(x[0], 2), 27); });
    add_case("upsample_const", {rt({2, 2, 3})}, [](auto& x) { return project(upsample_const(x[0], 2), 28); });
    add_case("cyclic_shift", {rt({16, 3})}, [](auto& x) { return project(cyclic_shift(x[0], 4, 4, 2), 29); });
    add_case("cyclic_unshift", {rt({16, 3})}, [](auto& x) { return project(cyclic_unshift(x[0], 4, 4, 2), 30); });
    // the truth is a constant of the loss, only the prediction is checked
    const Tensor truth = rt({2, 4, 4});
    add_case("mse_loss", {rt({2, 4, 4})}, [truth](auto& x) { return mse_loss(x[0], truth); });
    add_case("mse_loss_pooled", {rt({2, 4, 4})}, [truth](auto& x) { return mse_loss(x[0], truth, false); });
    // inputs offset so no channel gap sits at the kink of |.|
    const Tensor coarse = Tensor::from({2, 2, 2}, {0.1, -0.3, 0.2, 0.4, 5.0, 4.0, 6.0, 5.5});
    add_case("mass_loss_mean_preserving", {rt({2, 4, 4})},
             [coarse](auto& x) { return mass_loss(x[0], coarse, MassConvention::mean_preserving); });
    add_case("mass_loss_raw_sum", {rt({2, 4, 4})},
             [coarse](auto& x) { return mass_loss(x[0], coarse, MassConvention::raw_sum); });
    add_case("mass_loss_pooled", {rt({2, 4, 4})},
             [coarse](auto& x) { return mass_loss(x[0], coarse, MassConvention::mean_preserving, false); });
    const ChannelScale scale{{1.5, -2.0}, {0.5, 3.0}};
    add_case("mass_loss_physical", {rt({2, 4, 4})}, [coarse, scale](auto& x) {
        return mass_loss(x[0], coarse, MassConvention::mean_preserving, true, &scale);
    });

    // one shifted attention layer, all parameters checked
    {
        const std::size_t d = 8, heads = 2;
        std::vector<Tensor> in{rt({16, d}), rt({d, 3 * d}), rt({3 * d}), rt({heads, 9}), rt({d, d}), rt({d})};
        add_case("window_attention_shifted", in, [](auto& x) {
            const Params p{{"qkv.w", x[1]}, {"qkv.b", x[2]}, {"rel_bias", x[3]}, {"proj.w", x[4]}, {"proj.b", x[5]}};
            return project(window_attention(x[0], p, "", 4, 4, 2, 2, 1), 31);
        });
    }

    // end-to-end models with the composite loss; parameters are perturbed
    // away from the zero-initialized heads so every gradient path is live
    auto model_case = [&](const std::string& name, ModelSpec spec, std::size_t h, std::size_t w,
                          std::uint64_t s) {
        const Params p = detail::random_params(spec, s, 0.05);
        std::vector<std::string> names;
        std::vector<Tensor> in;
        for (const auto& [k, t] : p) {
            names.push_back(k);
            in.push_back(t);
        }
        CounterRng data_rng(s + 1);
        const Tensor input = detail::random_tensor({spec.in_channels, h, w}, data_rng);
        const Tensor truth = bilinear_upsample(input) + detail::random_tensor({spec.in_channels, 2 * h, 2 * w}, data_rng, -0.1, 0.1);
        LossConfig lc;
        add_case(name, in, [spec, names, input, truth, lc](const std::vector<Tensor>& x) {
            Params q;
            for (std::size_t i = 0; i < names.size(); ++i) q.emplace(names[i], x[i]);
            return total_loss(forward(spec, q, input), truth, input, lc).total;
        });
    };
    ModelSpec vit;
    vit.in_channels = 2;
    vit.vit = {2, 2, 8, 2, 2};
    model_case("vit_end_to_end", vit, 8, 8, 40);
    ModelSpec res;
    res.kind = ModelKind::resnet;
    res.in_channels = 2;
    res.resnet = {4, 1, 3, 3};
    model_case("resnet_end_to_end", res, 4, 4, 41);
    return cs;
}

/// An op whose backward deliberately has the wrong sign; gradcheck must flag it.
inline GradCase sign_flip_fixture() {
    auto bad_square = [](const Tensor& a) {
        std::vector<double> out(a.values());
        for (auto& v : out) v *= v;
        return make_op("sign_flipped_square", a.shape(), std::move(out), {a}, [](detail::Node& self) {
            auto& in = *self.inputs[0];
            auto& g = in.grad_buffer();
            for (std::size_t i = 0; i < g.size(); ++i) g[i] -= 2.0 * in.value[i] * self.grad[i];
        });
    };
    CounterRng rng(7);
    return {"sign_flipped_square", {detail::random_tensor({5}, rng)},
            [bad_square](auto& x) { return detail::project(bad_square(x[0]), 32); }};
}

}  // namespace downscale
