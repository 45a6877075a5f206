#include <gtest/gtest.h>

#include <cmath>

#include "downscale/training.hpp"

using namespace downscale;

namespace {

Tensor t3(std::size_t c, std::size_t h, std::size_t w, std::vector<double> v, bool grad = false) {
    return Tensor::from({c, h, w}, std::move(v), grad);
}

Tensor random_input(std::size_t c, std::size_t h, std::size_t w, std::uint64_t seed) {
    CounterRng rng(seed);
    std::vector<double> v(c * h * w);
    for (auto& x : v) x = rng.uniform(-2.0, 2.0);
    return Tensor::from({c, h, w}, std::move(v));
}

ModelSpec tiny_resnet() {
    ModelSpec s;
    s.kind = ModelKind::resnet;
    s.in_channels = 4;
    s.resnet = {8, 1, 5, 3};
    return s;
}

std::vector<FieldStack> dataset(std::size_t n, std::size_t size, std::uint64_t seed) {
    std::vector<FieldStack> out;
    for (std::size_t i = 0; i < n; ++i)
        out.push_back(synth_stack(size, size, CounterRng::derive(seed, i), default_profile()));
    return out;
}

TrainConfig surface_cfg(std::size_t epochs, double lr = 1e-3) {
    TrainConfig c;
    c.epochs = epochs;
    c.lr = lr;
    c.channels = ChannelMask::surface;
    c.seed = 7;
    return c;
}

}  // namespace

TEST(Mse, Examples) {
    EXPECT_EQ(mse_loss(t3(1, 1, 2, {0, 0}), t3(1, 1, 2, {5, 0})).item(), 12.5);
    EXPECT_EQ(mse_loss(t3(1, 2, 2, {1, 2, 3, 4}), t3(1, 2, 2, {1, 2, 3, 4})).item(), 0.0);
    // per-variable averaging matches pooled averaging when channel sizes agree
    auto a = random_input(3, 4, 4, 1), b = random_input(3, 4, 4, 2);
    EXPECT_NEAR(mse_loss(a, b, true).item(), mse_loss(a, b, false).item(), 1e-14);
}

TEST(Mse, ShapeMismatch) {
    EXPECT_THROW(mse_loss(t3(1, 2, 2, {1, 2, 3, 4}), t3(1, 1, 4, {1, 2, 3, 4})), ShapeError);
}

TEST(Mass, BlockMeanExample) {
    const auto pred = t3(1, 2, 2, {1, 2, 3, 4});
    const auto in = t3(1, 1, 1, {2.5});
    EXPECT_EQ(mass_loss(pred, in, MassConvention::mean_preserving).item(), 0.0);
    EXPECT_EQ(mass_loss(pred, in, MassConvention::raw_sum).item(), 7.5);
}

TEST(Mass, NormalizedByChannelsAndCoarseCells) {
    // channel 0 conserves, channel 1 overshoots each of its 2 coarse cells by 1
    const auto pred = t3(2, 2, 4, {1, 2, 5, 5, 3, 4, 5, 5, 1, 1, 1, 1, 1, 1, 1, 1});
    const auto in = t3(2, 1, 2, {2.5, 5, 0, 0});
    EXPECT_DOUBLE_EQ(mass_loss(pred, in, MassConvention::mean_preserving).item(), 2.0 / 4.0);
    // signed gaps +0 and +2 pooled
    EXPECT_DOUBLE_EQ(mass_loss(pred, in, MassConvention::mean_preserving, false).item(), 2.0 / 4.0);
    const auto neg = t3(2, 1, 2, {2.5, 5, 2, 2});
    // gaps 0 and 2 - 4 = -2: per-variable 2/4, pooled |-2|/4
    EXPECT_DOUBLE_EQ(mass_loss(pred, neg, MassConvention::mean_preserving).item(), 0.5);
    const auto cancel = t3(2, 1, 2, {2.5, 7, 0, 0});
    EXPECT_DOUBLE_EQ(mass_loss(pred, cancel, MassConvention::mean_preserving, false).item(), 0.0);
    EXPECT_DOUBLE_EQ(mass_loss(pred, cancel, MassConvention::mean_preserving, true).item(), 1.0);
}

TEST(Mass, BilinearRampConserves) {
    std::vector<double> v(8 * 8);
    for (std::size_t y = 0; y < 8; ++y)
        for (std::size_t x = 0; x < 8; ++x) v[y * 8 + x] = 0.5 * y - 0.3 * x + 1.0;
    const auto in = t3(1, 8, 8, v);
    EXPECT_LT(mass_loss(bilinear_upsample(in), in, MassConvention::mean_preserving).item(), 1e-10);
}

TEST(Mass, ZeroForConstantUpsampleAndCheckerboard) {
    const auto in = random_input(2, 4, 4, 3);
    EXPECT_LT(mass_loss(upsample_const(in, 2), in, MassConvention::mean_preserving).item(), 1e-14);
    std::vector<double> cb(2 * 8 * 8);
    for (std::size_t i = 0; i < cb.size(); ++i) {
        const std::size_t y = (i / 8) % 8, x = i % 8;
        cb[i] = (x + y) % 2 ? 1.0 : -1.0;
    }
    EXPECT_EQ(mass_loss(t3(2, 8, 8, cb), Tensor::zeros({2, 4, 4}), MassConvention::mean_preserving).item(), 0.0);
}

TEST(Mass, PhysicalUnits) {
    const auto pred = random_input(2, 4, 4, 5), in = random_input(2, 2, 2, 6);
    ChannelScale cs{{10.0, -3.0}, {3.0, 3.0}};
    const double norm = mass_loss(pred, in, MassConvention::mean_preserving).item();
    const double phys = mass_loss(pred, in, MassConvention::mean_preserving, true, &cs).item();
    EXPECT_NEAR(phys, 3.0 * norm, 1e-12);
    // raw sums: physical gap is std * gap + mean * (n_fine - n_coarse)
    const auto p1 = t3(1, 2, 2, {0, 0, 0, 0}), i1 = t3(1, 1, 1, {0});
    ChannelScale one{{2.0}, {1.0}};
    EXPECT_DOUBLE_EQ(mass_loss(p1, i1, MassConvention::raw_sum, true, &one).item(), 6.0);
}

TEST(Mass, RejectsNonUpscaledShapes) {
    EXPECT_THROW(mass_loss(random_input(1, 4, 4, 1), random_input(1, 4, 4, 1), MassConvention::raw_sum), ShapeError);
    EXPECT_THROW(mass_loss(random_input(1, 4, 6, 1), random_input(1, 2, 2, 1), MassConvention::raw_sum), ShapeError);
}

TEST(TotalLoss, MonotoneInWeightAndDisabledEqualsMse) {
    const auto pred = random_input(2, 4, 4, 7), truth = random_input(2, 4, 4, 8), in = random_input(2, 2, 2, 9);
    LossConfig off;
    off.use_mass_loss = false;
    const auto base = total_loss(pred, truth, in, off);
    EXPECT_EQ(base.total.item(), mse_loss(pred, truth).item());
    EXPECT_FALSE(base.mass.defined());
    double prev = -1.0;
    for (double w : {0.0, 0.1, 1.0, 10.0}) {
        LossConfig c;
        c.mass_weight = w;
        const double t = total_loss(pred, truth, in, c).total.item();
        EXPECT_GT(t, prev);
        prev = t;
    }
    LossConfig bad;
    bad.mass_weight = -1;
    EXPECT_THROW(total_loss(pred, truth, in, bad), std::invalid_argument);
}

TEST(Adam, ZeroGradientDoesNotMove) {
    std::vector<double> p{1.0, -2.0}, g{0.0, 0.0};
    AdamMoments m;
    for (long s = 1; s <= 10; ++s) adam_step(p, g, m, s, {});
    EXPECT_EQ(p, (std::vector<double>{1.0, -2.0}));
}

TEST(Adam, FirstStepIsLearningRate) {
    std::vector<double> p{1.0, 1.0}, g{0.3, -7.0};
    AdamMoments m;
    adam_step(p, g, m, 1, {});
    EXPECT_NEAR(p[0], 1.0 - 1e-4, 1e-10);
    EXPECT_NEAR(p[1], 1.0 + 1e-4, 1e-10);
}

TEST(Adam, QuadraticBowl) {
    Params params;
    params.emplace("x", Tensor::from({2}, {3.0, -2.0}, true));
    Adam opt({0.05});
    for (int i = 0; i < 500; ++i) {
        backward(sum(square(params.at("x"))));
        opt.step(params);
    }
    for (double v : params.at("x").values()) EXPECT_LT(std::abs(v), 1e-2);
    EXPECT_EQ(opt.steps(), 500);
}

TEST(Train, LossDecreases) {
    const auto data = dataset(4, 16, 1);
    LossConfig loss;
    loss.use_mass_loss = false;
    const auto r = train(tiny_resnet(), data, {}, surface_cfg(15), loss);
    ASSERT_EQ(r.log.size(), 15u);
    std::vector<double> avg;
    for (std::size_t i = 4; i < r.log.size(); ++i) {
        double s = 0;
        for (std::size_t k = i - 4; k <= i; ++k) s += r.log[k].train_total;
        avg.push_back(s / 5);
    }
    for (std::size_t i = 1; i < avg.size(); ++i) EXPECT_LE(avg[i], avg[i - 1] + 1e-12) << i;
    EXPECT_LT(r.log.back().train_total, r.initial_total);
}

TEST(Train, Deterministic) {
    const auto data = dataset(3, 16, 2);
    const auto val = dataset(1, 16, 3);
    LossConfig loss;
    const auto a = train(tiny_resnet(), data, val, surface_cfg(3), loss);
    const auto b = train(tiny_resnet(), data, val, surface_cfg(3), loss);
    EXPECT_EQ(encode_checkpoint(a.checkpoint), encode_checkpoint(b.checkpoint));
    EXPECT_EQ(format_loss_csv(a.log), format_loss_csv(b.log));
    for (const auto& e : a.log) EXPECT_FALSE(std::isnan(e.val_rmse));
}

TEST(Train, InitialLossIsBilinear) {
    const auto data = dataset(3, 16, 4);
    LossConfig loss;
    loss.use_mass_loss = false;
    const auto r = train(tiny_resnet(), data, {}, surface_cfg(1), loss);
    const auto pairs = make_pairs(data, surface_vars(), r.checkpoint.norm);
    double m = 0;
    for (const auto& p : pairs) m += mse_loss(bilinear_upsample(p.input), p.truth).item();
    EXPECT_NEAR(r.initial_mse, m / 3.0, 1e-12);
}

TEST(Train, NonFiniteLossRaises) {
    const auto data = dataset(3, 16, 5);
    LossConfig loss;
    EXPECT_THROW(train(tiny_resnet(), data, {}, surface_cfg(3, 1e200), loss), NumericError);
}

TEST(Train, RejectsChannelMismatchAndBadConfig) {
    const auto data = dataset(1, 16, 6);
    LossConfig loss;
    auto cfg = surface_cfg(1);
    cfg.channels = ChannelMask::full;
    EXPECT_THROW(train(tiny_resnet(), data, {}, cfg, loss), std::invalid_argument);
    cfg = surface_cfg(0);
    EXPECT_THROW(train(tiny_resnet(), data, {}, cfg, loss), std::invalid_argument);
}

TEST(Train, CheckpointMetadata) {
    const auto data = dataset(2, 16, 7);
    LossConfig loss;
    loss.convention = MassConvention::raw_sum;
    const auto r = train(tiny_resnet(), data, {}, surface_cfg(2), loss);
    EXPECT_EQ(r.checkpoint.meta.at("loss.mass_convention"), "raw_sum");
    EXPECT_EQ(r.checkpoint.meta.at("train.epochs"), "2");
    EXPECT_EQ(r.checkpoint.meta.at("train.coarse_ny"), "8");
    EXPECT_EQ(r.checkpoint.norm.vars, surface_vars());
}

TEST(Train, LossCsvLayout) {
    std::vector<EpochLog> log{{1, 0.5, 0.25, 0.75}, {2, 0.25, 0.125, 0.375, 0.1}};
    EXPECT_EQ(format_loss_csv(log),
              "epoch,train_mse,train_mass,train_total,val_rmse\n1,0.5,0.25,0.75,\n2,0.25,0.125,0.375,0.1\n");
}

TEST(Predict, FineGridInPhysicalUnits) {
    const auto data = dataset(2, 16, 8);
    ModelSpec spec = tiny_resnet();
    LossConfig loss;
    const auto r = train(spec, data, {}, surface_cfg(1), loss);
    const auto coarse = coarsen(data[0], 2);
    const auto fine = predict(r.checkpoint, coarse);
    EXPECT_EQ(fine.channels(), 4u);
    EXPECT_EQ(fine.fields[0].ny, 16u);
    EXPECT_DOUBLE_EQ(fine.spacing_m(), data[0].spacing_m());
}
