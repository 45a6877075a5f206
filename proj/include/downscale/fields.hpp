#pragma once

// Gridded climate variables: the 19-channel variable set, area-mean
// coarsening between resolutions, a seeded Gaussian-random-field generator
// used in place of reanalysis archives, standardization, and the .grd
// container format.

#include "downscale/io.hpp"
#include "downscale/rng.hpp"
#include "downscale/tensor.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

namespace downscale {

// Surface variables first, then the five upper-air variables, each at 50,
// 100 and 150 hPa. The numeric value is the on-disk variable id and the
// canonical channel position.
enum class Var : std::uint16_t {
    U10,
    V10,
    T2M,
    PR,
    Z50,
    Z100,
    Z150,
    Q50,
    Q100,
    Q150,
    T50,
    T100,
    T150,
    U50,
    U100,
    U150,
    V50,
    V100,
    V150,
};

inline constexpr std::size_t kNumVars = 19;
inline constexpr std::size_t kNumSurfaceVars = 4;

struct VarInfo {
    std::string_view name;
    std::string_view units;
};

inline constexpr std::array<VarInfo, kNumVars> kVarInfo{{
    {"u10", "m s-1"},  {"v10", "m s-1"},  {"t2m", "K"},      {"pr", "mm day-1"}, {"z50", "m2 s-2"},
    {"z100", "m2 s-2"}, {"z150", "m2 s-2"}, {"q50", "kg kg-1"}, {"q100", "kg kg-1"}, {"q150", "kg kg-1"},
    {"t50", "K"},      {"t100", "K"},     {"t150", "K"},     {"u50", "m s-1"},   {"u100", "m s-1"},
    {"u150", "m s-1"}, {"v50", "m s-1"},  {"v100", "m s-1"}, {"v150", "m s-1"},
}};

inline std::size_t index_of(Var v) { return static_cast<std::size_t>(v); }
inline std::string_view var_name(Var v) { return kVarInfo[index_of(v)].name; }
inline std::string_view var_units(Var v) { return kVarInfo[index_of(v)].units; }
inline bool is_surface(Var v) { return index_of(v) < kNumSurfaceVars; }

inline std::optional<Var> var_from_id(std::uint16_t id) {
    if (id >= kNumVars) return std::nullopt;
    return static_cast<Var>(id);
}

inline std::optional<Var> var_from_name(std::string_view name) {
    for (std::size_t i = 0; i < kNumVars; ++i)
        if (kVarInfo[i].name == name) return static_cast<Var>(i);
    return std::nullopt;
}

inline std::vector<Var> all_vars() {
    std::vector<Var> v;
    for (std::size_t i = 0; i < kNumVars; ++i) v.push_back(static_cast<Var>(i));
    return v;
}

inline std::vector<Var> surface_vars() { return {Var::U10, Var::V10, Var::T2M, Var::PR}; }

enum class ChannelMask { surface, full };

inline std::vector<Var> vars_for(ChannelMask m) { return m == ChannelMask::surface ? surface_vars() : all_vars(); }

inline std::string_view mask_name(ChannelMask m) { return m == ChannelMask::surface ? "surface" : "full"; }

inline ChannelMask parse_mask(const std::string& s) {
    if (s == "surface") return ChannelMask::surface;
    if (s == "full") return ChannelMask::full;
    throw FormatError(FormatError::Kind::bad_value, "channel mask must be 'surface' or 'full', got '" + s + "'");
}

// ---------------------------------------------------------------------------

struct GridField {
    Var var = Var::U10;
    std::size_t ny = 0;
    std::size_t nx = 0;
    double spacing_m = 0.0;  // nominal cell size
    std::vector<double> values;

    double spacing_km() const { return spacing_m / 1000.0; }
    std::string_view units() const { return var_units(var); }
    double at(std::size_t y, std::size_t x) const { return values[y * nx + x]; }

    double mean() const {
        double s = 0.0;
        for (double v : values) s += v;
        return s / static_cast<double>(values.size());
    }

    bool operator==(const GridField&) const = default;
};

inline void validate(const GridField& f) {
    if (f.ny < 2 || f.nx < 2)
        throw ShapeError(std::string(var_name(f.var)) + ": grid " + std::to_string(f.ny) + "x" + std::to_string(f.nx) +
                         " is smaller than 2x2");
    if (f.values.size() != f.ny * f.nx)
        throw ShapeError(std::string(var_name(f.var)) + ": " + std::to_string(f.values.size()) +
                         " values for a " + std::to_string(f.ny) + "x" + std::to_string(f.nx) + " grid");
}

/// Co-registered fields in canonical (ascending Var) order.
struct FieldStack {
    std::vector<GridField> fields;

    std::size_t channels() const { return fields.size(); }
    std::size_t ny() const { return fields.empty() ? 0 : fields.front().ny; }
    std::size_t nx() const { return fields.empty() ? 0 : fields.front().nx; }
    double spacing_m() const { return fields.empty() ? 0.0 : fields.front().spacing_m; }

    const GridField& get(Var v) const {
        for (const auto& f : fields)
            if (f.var == v) return f;
        throw std::out_of_range("stack has no channel " + std::string(var_name(v)));
    }

    bool has(Var v) const {
        return std::any_of(fields.begin(), fields.end(), [v](const GridField& f) { return f.var == v; });
    }

    std::vector<Var> vars() const {
        std::vector<Var> out;
        for (const auto& f : fields) out.push_back(f.var);
        return out;
    }

    bool operator==(const FieldStack&) const = default;
};

inline void validate(const FieldStack& s) {
    if (s.fields.empty()) throw ShapeError("field stack is empty");
    for (std::size_t i = 0; i < s.fields.size(); ++i) {
        const auto& f = s.fields[i];
        validate(f);
        if (f.ny != s.ny() || f.nx != s.nx() || f.spacing_m != s.spacing_m())
            throw ShapeError("channel " + std::string(var_name(f.var)) + " is not co-registered with " +
                             std::string(var_name(s.fields[0].var)));
        if (i > 0 && index_of(f.var) <= index_of(s.fields[i - 1].var))
            throw ShapeError("channels out of canonical order at " + std::string(var_name(f.var)));
    }
}

/// Keeps only the listed variables (which must be present), in canonical order.
inline FieldStack select(const FieldStack& s, const std::vector<Var>& vars) {
    FieldStack out;
    for (const auto& f : s.fields)
        if (std::find(vars.begin(), vars.end(), f.var) != vars.end()) out.fields.push_back(f);
    if (out.fields.size() != vars.size()) throw std::out_of_range("stack is missing requested channels");
    return out;
}

// ---------------------------------------------------------------------------
// Coarsening

/// Area-mean coarsening: every coarse cell is the mean of its factor x factor block.
inline GridField coarsen(const GridField& f, std::size_t factor) {
    if (factor == 0 || f.ny % factor != 0 || f.nx % factor != 0)
        throw ShapeError("coarsen: grid " + std::to_string(f.ny) + "x" + std::to_string(f.nx) +
                         " not divisible by factor " + std::to_string(factor));
    GridField out;
    out.var = f.var;
    out.ny = f.ny / factor;
    out.nx = f.nx / factor;
    out.spacing_m = f.spacing_m * static_cast<double>(factor);
    out.values.assign(out.ny * out.nx, 0.0);
    for (std::size_t cy = 0; cy < out.ny; ++cy)
        for (std::size_t cx = 0; cx < out.nx; ++cx) {
            double s = 0.0;
            for (std::size_t y = 0; y < factor; ++y)
                for (std::size_t x = 0; x < factor; ++x) s += f.values[(cy * factor + y) * f.nx + cx * factor + x];
            out.values[cy * out.nx + cx] = s / static_cast<double>(factor * factor);
        }
    return out;
}

inline FieldStack coarsen(const FieldStack& s, std::size_t factor) {
    FieldStack out;
    for (const auto& f : s.fields) out.fields.push_back(coarsen(f, factor));
    return out;
}

// ---------------------------------------------------------------------------
// Synthetic Gaussian random fields

namespace detail {

// Periodic 1-D Gaussian kernel folded onto n taps.
inline std::vector<double> wrapped_gaussian(std::size_t n, double sigma) {
    std::vector<double> k(n, 0.0);
    const long radius = static_cast<long>(std::ceil(4.0 * sigma));
    for (long d = -radius; d <= radius; ++d) {
        const long idx = ((d % static_cast<long>(n)) + static_cast<long>(n)) % static_cast<long>(n);
        k[static_cast<std::size_t>(idx)] += std::exp(-0.5 * static_cast<double>(d * d) / (sigma * sigma));
    }
    return k;
}

inline void periodic_convolve(std::vector<double>& v, std::size_t ny, std::size_t nx, double sigma) {
    const auto kx = wrapped_gaussian(nx, sigma);
    const auto ky = wrapped_gaussian(ny, sigma);
    std::vector<double> tmp(v.size(), 0.0);
    for (std::size_t y = 0; y < ny; ++y)
        for (std::size_t x = 0; x < nx; ++x) {
            double s = 0.0;
            for (std::size_t d = 0; d < nx; ++d)
                if (kx[d] != 0.0) s += kx[d] * v[y * nx + (x + d) % nx];
            tmp[y * nx + x] = s;
        }
    for (std::size_t y = 0; y < ny; ++y)
        for (std::size_t x = 0; x < nx; ++x) {
            double s = 0.0;
            for (std::size_t d = 0; d < ny; ++d)
                if (ky[d] != 0.0) s += ky[d] * tmp[((y + d) % ny) * nx + x];
            v[y * nx + x] = s;
        }
}

}  // namespace detail

inline constexpr double kRainDryFraction = 0.45;

/// Seeded white noise smoothed by a periodic Gaussian kernel whose standard
/// deviation is `correlation_len_cells`, rescaled to exactly the requested
/// sample mean and standard deviation. Precipitation is then shifted down by
/// its 45th percentile and clipped at zero, so at least 45% of cells are dry.
inline GridField synth_grf(Var var, std::size_t ny, std::size_t nx, double correlation_len_cells, double mean,
                           double stddev, std::uint64_t seed, double spacing_m = 25000.0) {
    if (correlation_len_cells < 1.0) throw std::invalid_argument("synth_grf: correlation length must be >= 1 cell");
    if (stddev < 0.0) throw std::invalid_argument("synth_grf: std must be >= 0");
    GridField f{var, ny, nx, spacing_m, std::vector<double>(ny * nx, mean)};
    validate(f);
    if (stddev > 0.0) {
        CounterRng rng(seed);
        std::vector<double> noise(ny * nx);
        for (auto& v : noise) v = rng.normal();
        detail::periodic_convolve(noise, ny, nx, correlation_len_cells);
        double m = 0.0;
        for (double v : noise) m += v;
        m /= static_cast<double>(noise.size());
        double var_sum = 0.0;
        for (double v : noise) var_sum += (v - m) * (v - m);
        const double s = std::sqrt(var_sum / static_cast<double>(noise.size()));
        for (std::size_t i = 0; i < noise.size(); ++i) f.values[i] = mean + stddev * (noise[i] - m) / s;
    }
    if (var == Var::PR) {
        std::vector<double> sorted = f.values;
        const auto k = static_cast<std::size_t>(std::ceil(kRainDryFraction * static_cast<double>(sorted.size()))) - 1;
        std::nth_element(sorted.begin(), sorted.begin() + static_cast<long>(k), sorted.end());
        const double threshold = sorted[k];
        for (auto& v : f.values) v = std::max(0.0, v - threshold);
    }
    return f;
}

struct VarProfile {
    double mean;
    double stddev;
    double correlation_len_cells;
    double mean_jitter;  // per-sample offset of the mean, in units of stddev
};

/// Generation parameters for all 19 variables, with magnitudes typical of
/// reanalysis data at the corresponding levels.
struct Profile {
    std::string name;
    std::array<VarProfile, kNumVars> vars;
};

inline Profile default_profile() {
    return {"default",
            {{
                {0.0, 5.0, 4.0, 0.3},       // u10
                {0.0, 5.0, 4.0, 0.3},       // v10
                {288.0, 6.0, 6.0, 0.3},     // t2m
                {2.0, 3.0, 3.0, 0.2},       // pr
                {202000.0, 1200.0, 8.0, 0.3}, // z50
                {159000.0, 1000.0, 8.0, 0.3}, // z100
                {133000.0, 900.0, 8.0, 0.3},  // z150
                {2.6e-6, 2.0e-7, 6.0, 0.3},   // q50
                {3.0e-6, 4.0e-7, 6.0, 0.3},   // q100
                {8.0e-6, 2.0e-6, 6.0, 0.3},   // q150
                {210.0, 4.0, 6.0, 0.3},     // t50
                {205.0, 4.0, 6.0, 0.3},     // t100
                {212.0, 4.0, 6.0, 0.3},     // t150
                {5.0, 10.0, 6.0, 0.3},      // u50
                {10.0, 12.0, 6.0, 0.3},     // u100
                {15.0, 15.0, 6.0, 0.3},     // u150
                {0.0, 6.0, 6.0, 0.3},       // v50
                {0.0, 6.0, 6.0, 0.3},       // v100
                {0.0, 6.0, 6.0, 0.3},       // v150
            }}};
}

/// Same magnitudes with correlation lengths doubled.
inline Profile smooth_profile() {
    Profile p = default_profile();
    p.name = "smooth";
    for (auto& v : p.vars) v.correlation_len_cells *= 2.0;
    return p;
}

inline Profile profile_by_name(const std::string& name) {
    if (name == "default") return default_profile();
    if (name == "smooth") return smooth_profile();
    throw FormatError(FormatError::Kind::bad_value, "unknown profile '" + name + "' (expected default or smooth)");
}

/// One field per variable. Variable v uses sub-stream 2v of `seed` for its
/// noise and sub-stream 2v+1 for its per-sample mean offset.
inline FieldStack synth_stack(std::size_t ny, std::size_t nx, std::uint64_t seed, const Profile& profile,
                              double spacing_m = 25000.0) {
    FieldStack s;
    for (std::size_t i = 0; i < kNumVars; ++i) {
        const auto& p = profile.vars[i];
        CounterRng jitter(CounterRng::derive(seed, 2 * i + 1));
        const double mean = p.mean + p.mean_jitter * p.stddev * jitter.normal();
        s.fields.push_back(synth_grf(static_cast<Var>(i), ny, nx, p.correlation_len_cells, mean, p.stddev,
                                     CounterRng::derive(seed, 2 * i), spacing_m));
    }
    return s;
}

// ---------------------------------------------------------------------------
// Standardization

struct NormStats {
    std::vector<Var> vars;
    std::vector<double> mean;
    std::vector<double> stddev;

    std::size_t slot(Var v) const {
        for (std::size_t i = 0; i < vars.size(); ++i)
            if (vars[i] == v) return i;
        throw std::out_of_range("no normalization stats for " + std::string(var_name(v)));
    }
    double mean_of(Var v) const { return mean[slot(v)]; }
    double std_of(Var v) const { return stddev[slot(v)]; }

    bool operator==(const NormStats&) const = default;
};

/// Pooled per-variable mean and (population) standard deviation.
inline NormStats fit_norm(const std::vector<FieldStack>& stacks) {
    if (stacks.empty()) throw std::invalid_argument("fit_norm: no stacks");
    NormStats st;
    st.vars = stacks.front().vars();
    for (Var v : st.vars) {
        double s = 0.0;
        std::size_t n = 0;
        for (const auto& stack : stacks)
            for (double x : stack.get(v).values) {
                s += x;
                ++n;
            }
        const double m = s / static_cast<double>(n);
        double ss = 0.0;
        for (const auto& stack : stacks)
            for (double x : stack.get(v).values) ss += (x - m) * (x - m);
        const double sd = std::sqrt(ss / static_cast<double>(n));
        if (!(sd > 0.0))
            throw std::invalid_argument("fit_norm: variable " + std::string(var_name(v)) + " has zero variance");
        st.mean.push_back(m);
        st.stddev.push_back(sd);
    }
    return st;
}

inline FieldStack apply_norm(FieldStack s, const NormStats& st) {
    for (auto& f : s.fields) {
        const double m = st.mean_of(f.var), sd = st.std_of(f.var);
        for (auto& v : f.values) v = (v - m) / sd;
    }
    return s;
}

inline FieldStack invert_norm(FieldStack s, const NormStats& st) {
    for (auto& f : s.fields) {
        const double m = st.mean_of(f.var), sd = st.std_of(f.var);
        for (auto& v : f.values) v = v * sd + m;
    }
    return s;
}

// ---------------------------------------------------------------------------
// Tensor conversion

/// Stacks the listed channels into a [C, H, W] tensor.
inline Tensor to_tensor(const FieldStack& s, const std::vector<Var>& vars) {
    const std::size_t hw = s.ny() * s.nx();
    std::vector<double> data;
    data.reserve(vars.size() * hw);
    for (Var v : vars) {
        const auto& f = s.get(v);
        data.insert(data.end(), f.values.begin(), f.values.end());
    }
    return Tensor::from({vars.size(), s.ny(), s.nx()}, std::move(data));
}

inline FieldStack from_tensor(const Tensor& t, const std::vector<Var>& vars, double spacing_m) {
    if (t.dim() != 3 || t.size(0) != vars.size())
        throw ShapeError("from_tensor: tensor " + shape_str(t.shape()) + " does not hold " +
                         std::to_string(vars.size()) + " channels");
    const std::size_t ny = t.size(1), nx = t.size(2), hw = ny * nx;
    FieldStack s;
    for (std::size_t c = 0; c < vars.size(); ++c) {
        const auto d = t.data().subspan(c * hw, hw);
        s.fields.push_back(GridField{vars[c], ny, nx, spacing_m, std::vector<double>(d.begin(), d.end())});
    }
    return s;
}

// ---------------------------------------------------------------------------
// .grd container
//
//   0..3   magic "GRD1"
//   4      version (1)
//   5      channel count
//   6..7   reserved, zero
//   per channel: u16 variable id, u32 ny, u32 nx, f64 spacing in metres,
//                ny*nx f64 values (row-major)
// All integers and floats little-endian; channels in canonical order.

inline constexpr std::string_view kGridMagic = "GRD1";
inline constexpr std::uint8_t kGridVersion = 1;
inline constexpr std::uint64_t kMaxGridCells = std::uint64_t{1} << 28;

inline std::vector<std::uint8_t> encode_grid(const FieldStack& s) {
    validate(s);
    if (s.channels() > 255) throw ShapeError("encode_grid: too many channels");
    ByteWriter w;
    w.bytes(kGridMagic);
    w.u8(kGridVersion);
    w.u8(static_cast<std::uint8_t>(s.channels()));
    w.u8(0);
    w.u8(0);
    for (const auto& f : s.fields) {
        w.u16(static_cast<std::uint16_t>(f.var));
        w.u32(static_cast<std::uint32_t>(f.ny));
        w.u32(static_cast<std::uint32_t>(f.nx));
        w.f64(f.spacing_m);
        for (double v : f.values) w.f64(v);
    }
    return w.buffer();
}

inline FieldStack decode_grid(ByteReader r) {
    using K = FormatError::Kind;
    if (r.remaining() < 4 || r.bytes(4) != kGridMagic) throw FormatError(K::bad_magic, r.source() + ": bad magic");
    const auto version = r.u8();
    if (version != kGridVersion)
        throw FormatError(K::version_mismatch, r.source() + ": version mismatch (file " + std::to_string(version) +
                                                   ", expected " + std::to_string(kGridVersion) + ")");
    const std::size_t channels = r.u8();
    r.u8();
    r.u8();
    FieldStack s;
    for (std::size_t c = 0; c < channels; ++c) {
        GridField f;
        const auto id = r.u16();
        const auto var = var_from_id(id);
        if (!var) throw FormatError(K::unknown_variable, r.source() + ": unknown variable id " + std::to_string(id));
        f.var = *var;
        const std::uint64_t ny = r.u32(), nx = r.u32();
        if (ny * nx > kMaxGridCells)
            throw FormatError(K::dimension_overflow, r.source() + ": dimension overflow (" + std::to_string(ny) + "x" +
                                                         std::to_string(nx) + ")");
        if (ny < 2 || nx < 2)
            throw FormatError(K::invalid_dimensions,
                              r.source() + ": invalid grid " + std::to_string(ny) + "x" + std::to_string(nx));
        f.ny = ny;
        f.nx = nx;
        f.spacing_m = r.f64();
        f.values.resize(ny * nx);
        r.f64_array(f.values.data(), f.values.size());
        if (!s.fields.empty()) {
            const auto& prev = s.fields.back();
            if (index_of(f.var) <= index_of(prev.var))
                throw FormatError(K::channel_order, r.source() + ": channels out of canonical order at " +
                                                        std::string(var_name(f.var)));
            if (f.ny != prev.ny || f.nx != prev.nx)
                throw FormatError(K::invalid_dimensions, r.source() + ": channel " + std::string(var_name(f.var)) +
                                                             " not co-registered");
        }
        s.fields.push_back(std::move(f));
    }
    if (s.fields.empty()) throw FormatError(K::invalid_dimensions, r.source() + ": no channels");
    return s;
}

inline void save_grid(const std::filesystem::path& path, const FieldStack& s) {
    const auto bytes = encode_grid(s);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw FormatError(FormatError::Kind::io, "cannot open " + path.string() + " for writing");
    out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw FormatError(FormatError::Kind::io, "write failed: " + path.string());
}

inline FieldStack load_grid(const std::filesystem::path& path) { return decode_grid(ByteReader::from_file(path)); }

/// The .grd files of a dataset directory in name order.
inline std::vector<std::filesystem::path> list_grid_files(const std::filesystem::path& dir) {
    if (!std::filesystem::is_directory(dir)) throw FormatError(FormatError::Kind::io, "no dataset directory " + dir.string());
    std::vector<std::filesystem::path> out;
    for (const auto& e : std::filesystem::directory_iterator(dir))
        if (e.is_regular_file() && e.path().extension() == ".grd") out.push_back(e.path());
    std::sort(out.begin(), out.end());
    if (out.empty()) throw FormatError(FormatError::Kind::io, "no .grd files in " + dir.string());
    return out;
}

inline std::vector<FieldStack> load_dataset(const std::filesystem::path& dir) {
    std::vector<FieldStack> out;
    for (const auto& f : list_grid_files(dir)) out.push_back(load_grid(f));
    return out;
}

}  // namespace downscale
