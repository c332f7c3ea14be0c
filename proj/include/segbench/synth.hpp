#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "segbench/rng.hpp"
#include "segbench/tensor.hpp"

namespace segbench {

// Two-modality scene description. Modality A is RGB-like; modality B is the
// same geometry pushed through a channel-mixing row, optional inversion, a
// per-image affine jitter and independent noise. Class 0 of the mask is
// background (leftover mass); foreground channels may overlap.
struct SceneSpec {
    int height = 64, width = 64;
    // expected pixel fraction per foreground class; the last one is rare by
    // default, mirroring the natural imbalance of the domain
    std::vector<double> frequencies = {0.08, 0.06, 0.05, 0.04, 0.03, 0.005};
    std::array<double, 3> mix = {0.299, 0.587, 0.114}; // luminance = the identity mixing
    bool invert_b = true;
    double noise = 0.02;
    double gain_lo = 0.9, gain_hi = 1.1;
    double offset_lo = -0.05, offset_hi = 0.05;

    int foreground_classes() const { return static_cast<int>(frequencies.size()); }
    int num_classes() const { return foreground_classes() + 1; } // + background

    void validate() const {
        if (height < 8 || width < 8) throw std::invalid_argument("SceneSpec: image size too small");
        if (frequencies.empty()) throw std::invalid_argument("SceneSpec: no foreground classes");
        double total = 0;
        bool has_rare = false;
        for (double f : frequencies) {
            if (f < 0) throw std::invalid_argument("SceneSpec: negative class frequency");
            total += f;
            has_rare = has_rare || f < 0.01;
        }
        if (total > 1.0)
            throw std::invalid_argument("SceneSpec: infeasible frequencies, total " + std::to_string(total) +
                                        " > 1");
        if (!has_rare)
            throw std::invalid_argument("SceneSpec: at least one class must be rare (frequency < 0.01)");
        if (noise < 0) throw std::invalid_argument("SceneSpec: negative noise scale");
    }
};

// One paired sample: identical ground truth rendered under both appearances.
struct SegSample {
    Tensor image_a; // (3,H,W), values in [0,1]
    Tensor image_b; // (1,H,W), values in [0,1]
    Tensor mask;    // (m,H,W), binary, channel 0 = background
    int64_t id = 0;
    uint64_t seed = 0;
};

namespace detail {

// fixed palette; distinct, not too dark
inline std::array<double, 3> class_color(int k) {
    static const std::array<double, 3> palette[] = {
        {0.85, 0.25, 0.20}, {0.20, 0.35, 0.85}, {0.90, 0.80, 0.25},
        {0.55, 0.20, 0.70}, {0.15, 0.75, 0.75}, {0.95, 0.55, 0.15},
        {0.60, 0.85, 0.30}, {0.80, 0.30, 0.60},
    };
    return palette[static_cast<size_t>(k) % 8];
}

// Geometry per class: ellipses, bands and wobbly blobs rotate through the
// vocabulary by class index. Shapes are sized so the expected pixel fraction
// matches the configured frequency; rare classes (< 0.02) appear with probability 0.4
// and are upsized accordingly.
inline void render_class_mask(std::vector<double>& mask, int H, int W, int k, double freq,
                              CounterRng& rng) {
    if (freq <= 0) {
        rng.uniform(); // keep the draw budget fixed so later classes stay aligned
        return;
    }
    double presence = freq < 0.02 ? 0.4 : 1.0;
    if (rng.uniform() >= presence) return;
    const double f = freq / presence;
    const double area = f * H * W;

    auto inside_ellipse = [&](double cy, double cx, double a, double b, double th, int h, int w) {
        const double dy = h + 0.5 - cy, dx = w + 0.5 - cx;
        const double u = std::cos(th) * dx + std::sin(th) * dy;
        const double v = -std::sin(th) * dx + std::cos(th) * dy;
        return (u * u) / (a * a) + (v * v) / (b * b) <= 1.0;
    };

    switch (k % 3) {
        case 0: { // ellipse, fully inside so the analytic area holds
            const double r0 = std::sqrt(area / M_PI);
            const double aspect = rng.uniform(0.7, 1.3);
            const double a = r0 * aspect, b = r0 / aspect;
            const double margin = std::max(a, b) + 1.0;
            if (2 * margin >= std::min(H, W)) throw std::invalid_argument("SceneSpec: class too large");
            const double cy = rng.uniform(margin, H - margin);
            const double cx = rng.uniform(margin, W - margin);
            const double th = rng.uniform(0, M_PI);
            for (int h = 0; h < H; ++h)
                for (int w = 0; w < W; ++w)
                    if (inside_ellipse(cy, cx, a, b, th, h, w)) mask[static_cast<size_t>(h) * W + w] = 1.0;
            break;
        }
        case 1: { // axis-aligned band across the full image
            const bool horizontal = rng.uniform() < 0.5;
            const double span = horizontal ? H : W;
            const double bw = f * span;
            const double c = rng.uniform(bw / 2, span - bw / 2);
            for (int h = 0; h < H; ++h)
                for (int w = 0; w < W; ++w) {
                    const double pos = (horizontal ? h : w) + 0.5;
                    if (std::abs(pos - c) < bw / 2) mask[static_cast<size_t>(h) * W + w] = 1.0;
                }
            break;
        }
        default: { // wobbly blob: disc with sinusoidal boundary
            const double wobble = 0.25;
            const double r0 = std::sqrt(area / (M_PI * (1.0 + wobble * wobble / 2.0)));
            const double margin = r0 * (1 + wobble) + 1.0;
            if (2 * margin >= std::min(H, W)) throw std::invalid_argument("SceneSpec: class too large");
            const double cy = rng.uniform(margin, H - margin);
            const double cx = rng.uniform(margin, W - margin);
            const double phase = rng.uniform(0, 2 * M_PI);
            for (int h = 0; h < H; ++h)
                for (int w = 0; w < W; ++w) {
                    const double dy = h + 0.5 - cy, dx = w + 0.5 - cx;
                    const double r = std::sqrt(dy * dy + dx * dx);
                    const double th = std::atan2(dy, dx);
                    if (r <= r0 * (1.0 + wobble * std::sin(3 * th + phase)))
                        mask[static_cast<size_t>(h) * W + w] = 1.0;
                }
            break;
        }
    }
}

} // namespace detail

// Ground-truth geometry only; both appearance renders consume this mask.
inline Tensor gen_mask(const SceneSpec& spec, CounterRng& rng) {
    const int H = spec.height, W = spec.width, F = spec.foreground_classes();
    const int64_t plane = static_cast<int64_t>(H) * W;
    std::vector<double> mask(static_cast<size_t>((F + 1) * plane), 0.0);
    for (int k = 0; k < F; ++k) {
        std::vector<double> ch(static_cast<size_t>(plane), 0.0);
        detail::render_class_mask(ch, H, W, k, spec.frequencies[static_cast<size_t>(k)], rng);
        std::copy(ch.begin(), ch.end(), mask.begin() + static_cast<int64_t>(k + 1) * plane);
    }
    // background = not covered by any foreground class
    for (int64_t i = 0; i < plane; ++i) {
        bool covered = false;
        for (int k = 1; k <= F; ++k) covered = covered || mask[static_cast<size_t>(k * plane + i)] != 0.0;
        mask[static_cast<size_t>(i)] = covered ? 0.0 : 1.0;
    }
    return Tensor::from_data({F + 1, H, W}, std::move(mask));
}

inline Tensor render_modality_a(const SceneSpec& spec, const Tensor& mask, CounterRng& rng) {
    const int H = spec.height, W = spec.width, F = spec.foreground_classes();
    const int64_t plane = static_cast<int64_t>(H) * W;
    std::array<double, 3> base = {0.20 + rng.uniform(-0.05, 0.05), 0.45 + rng.uniform(-0.05, 0.05),
                                  0.15 + rng.uniform(-0.05, 0.05)};
    const double grad = rng.uniform(0.0, 0.08); // mild horizontal shading
    std::vector<double> img(static_cast<size_t>(3 * plane));
    for (int c = 0; c < 3; ++c)
        for (int h = 0; h < H; ++h)
            for (int w = 0; w < W; ++w)
                img[static_cast<size_t>(c * plane + h * static_cast<int64_t>(W) + w)] =
                    base[static_cast<size_t>(c)] + grad * w / W;
    for (int k = 0; k < F; ++k) {
        const std::array<double, 3> col = detail::class_color(k);
        const double* m = mask.data() + static_cast<int64_t>(k + 1) * plane;
        for (int64_t i = 0; i < plane; ++i) {
            if (m[i] == 0.0) continue;
            for (int c = 0; c < 3; ++c) {
                double& px = img[static_cast<size_t>(c * plane + i)];
                px = 0.65 * col[static_cast<size_t>(c)] + 0.35 * px;
            }
        }
    }
    for (double& v : img) {
        v += spec.noise * rng.normal();
        v = std::min(1.0, std::max(0.0, v));
    }
    return Tensor::from_data({3, H, W}, std::move(img));
}

inline Tensor render_modality_b(const SceneSpec& spec, const Tensor& image_a, CounterRng& rng) {
    const int H = spec.height, W = spec.width;
    const int64_t plane = static_cast<int64_t>(H) * W;
    const double gain = rng.uniform(spec.gain_lo, spec.gain_hi);
    const double offset = rng.uniform(spec.offset_lo, spec.offset_hi);
    std::vector<double> img(static_cast<size_t>(plane));
    for (int64_t i = 0; i < plane; ++i) {
        double v = spec.mix[0] * image_a[i] + spec.mix[1] * image_a[plane + i] +
                   spec.mix[2] * image_a[2 * plane + i];
        if (spec.invert_b) v = 1.0 - v;
        v = v * gain + offset + spec.noise * rng.normal();
        img[static_cast<size_t>(i)] = std::min(1.0, std::max(0.0, v));
    }
    return Tensor::from_data({1, H, W}, std::move(img));
}

// Sample i is a pure function of (spec, seed, i): the per-sample stream is
// CounterRng(seed, i) and every draw happens in a fixed order.
inline SegSample gen_sample(const SceneSpec& spec, uint64_t seed, int64_t id) {
    spec.validate();
    CounterRng rng(seed, static_cast<uint64_t>(id));
    SegSample s;
    s.id = id;
    s.seed = seed;
    s.mask = gen_mask(spec, rng);
    s.image_a = render_modality_a(spec, s.mask, rng);
    s.image_b = render_modality_b(spec, s.image_a, rng);
    return s;
}

// Ordered, indexable stream of deterministic samples.
class SampleStream {
public:
    SampleStream() = default;
    SampleStream(SceneSpec spec, int64_t count, uint64_t seed)
        : spec_(std::move(spec)), count_(count), seed_(seed) {
        if (count_ < 1) throw std::invalid_argument("SampleStream: count must be >= 1");
        spec_.validate();
    }

    int64_t size() const { return count_; }
    const SceneSpec& spec() const { return spec_; }
    uint64_t seed() const { return seed_; }
    SegSample at(int64_t i) const {
        if (i < 0 || i >= count_) throw std::out_of_range("SampleStream: index out of range");
        return gen_sample(spec_, seed_, i);
    }

private:
    SceneSpec spec_;
    int64_t count_ = 0;
    uint64_t seed_ = 0;
};

inline SampleStream gen_dataset(const SceneSpec& spec, int64_t n, uint64_t seed) {
    return SampleStream(spec, n, seed);
}

// Mean over samples of the per-class positive-pixel fraction (all channels,
// background first).
inline std::vector<double> empirical_frequencies(const SampleStream& stream, int64_t n) {
    if (n < 1) throw std::invalid_argument("empirical_frequencies: n must be >= 1");
    n = std::min(n, stream.size());
    std::vector<double> acc;
    for (int64_t i = 0; i < n; ++i) {
        SegSample s = stream.at(i);
        const int m = s.mask.extent(0);
        const int64_t plane = static_cast<int64_t>(s.mask.extent(1)) * s.mask.extent(2);
        if (acc.empty()) acc.assign(static_cast<size_t>(m), 0.0);
        for (int c = 0; c < m; ++c) {
            double pos = 0;
            const double* p = s.mask.data() + static_cast<int64_t>(c) * plane;
            for (int64_t j = 0; j < plane; ++j) pos += p[j];
            acc[static_cast<size_t>(c)] += pos / static_cast<double>(plane);
        }
    }
    for (double& v : acc) v /= static_cast<double>(n);
    return acc;
}

// --- dataset export -----------------------------------------------------------

inline void export_dataset(const SampleStream& stream, const std::string& dir) {
    namespace fs = std::filesystem;
    fs::create_directories(dir);
    std::ofstream m(fs::path(dir) / "manifest.txt");
    if (!m) throw std::runtime_error("cannot write dataset manifest in " + dir);
    m << "segbench dataset v1\n";
    m << "count " << stream.size() << "\n";
    m << "height " << stream.spec().height << "\n";
    m << "width " << stream.spec().width << "\n";
    m << "classes " << stream.spec().num_classes() << "\n";
    m << "seed " << stream.seed() << "\n";
    for (int64_t i = 0; i < stream.size(); ++i) {
        char name[32];
        std::snprintf(name, sizeof(name), "sample_%05lld", static_cast<long long>(i));
        fs::path sd = fs::path(dir) / name;
        fs::create_directories(sd);
        SegSample s = stream.at(i);
        s.image_a.save_v1((sd / "imageA").string());
        s.image_b.save_v1((sd / "imageB").string());
        s.mask.save_v1((sd / "mask").string());
        m << name << "\n";
    }
}

// Reads a directory produced by export_dataset.
class ExportedDataset {
public:
    explicit ExportedDataset(std::string dir) : dir_(std::move(dir)) {
        namespace fs = std::filesystem;
        std::ifstream m(fs::path(dir_) / "manifest.txt");
        if (!m) throw std::runtime_error("cannot open dataset manifest in " + dir_);
        std::string line;
        std::getline(m, line);
        if (line != "segbench dataset v1") throw std::runtime_error("bad dataset magic in " + dir_);
        while (std::getline(m, line)) {
            std::istringstream ls(line);
            std::string key, val;
            ls >> key >> val;
            if (key == "count" || key == "height" || key == "width" || key == "classes" || key == "seed")
                continue;
            if (!key.empty() && key.rfind("sample_", 0) == 0) names_.push_back(key);
        }
    }

    int64_t size() const { return static_cast<int64_t>(names_.size()); }

    SegSample at(int64_t i) const {
        namespace fs = std::filesystem;
        fs::path sd = fs::path(dir_) / names_.at(static_cast<size_t>(i));
        SegSample s;
        s.id = i;
        s.image_a = Tensor::load_v1((sd / "imageA").string());
        s.image_b = Tensor::load_v1((sd / "imageB").string());
        s.mask = Tensor::load_v1((sd / "mask").string());
        return s;
    }

private:
    std::string dir_;
    std::vector<std::string> names_;
};

} // namespace segbench
