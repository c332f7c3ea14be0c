#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "segbench/blocks.hpp"
#include "segbench/tensor.hpp"

namespace segbench {

// Streaming Gaussian summary of one channel (Welford). Merge is exact up to
// rounding, so sharded accumulation matches streamed accumulation.
struct ChannelStats {
    int64_t count = 0;
    double mean = 0.0;
    double m2 = 0.0; // sum of squared deviations

    void push(double x) {
        ++count;
        const double d = x - mean;
        mean += d / static_cast<double>(count);
        m2 += d * (x - mean);
    }

    double variance() const { return count > 0 ? m2 / static_cast<double>(count) : 0.0; } // biased

    static ChannelStats merge(const ChannelStats& a, const ChannelStats& b) {
        if (a.count == 0) return b;
        if (b.count == 0) return a;
        ChannelStats r;
        r.count = a.count + b.count;
        const double d = b.mean - a.mean;
        r.mean = a.mean + d * static_cast<double>(b.count) / static_cast<double>(r.count);
        r.m2 = a.m2 + b.m2 +
               d * d * static_cast<double>(a.count) * static_cast<double>(b.count) /
                   static_cast<double>(r.count);
        return r;
    }
};

// Per-channel statistics of a probe site over a dataset.
struct LayerStats {
    std::string probe;
    std::vector<ChannelStats> channels;

    explicit LayerStats(std::string name = "", int c = 0)
        : probe(std::move(name)), channels(static_cast<size_t>(c)) {}

    int channel_count() const { return static_cast<int>(channels.size()); }
};

// Every (n,h,w) scalar of each channel counts as one observation.
inline void accumulate(LayerStats& stats, const Tensor& activation) {
    if (activation.rank() != 4)
        throw std::invalid_argument("accumulate: expects NCHW, got " + activation.shape_str());
    if (activation.extent(1) != stats.channel_count())
        throw std::invalid_argument("accumulate: channel mismatch, activation " + activation.shape_str() +
                                    " vs stats C=" + std::to_string(stats.channel_count()));
    const int N = activation.extent(0), C = activation.extent(1);
    const int64_t plane = static_cast<int64_t>(activation.extent(2)) * activation.extent(3);
    for (int n = 0; n < N; ++n)
        for (int c = 0; c < C; ++c) {
            const double* p = activation.data() + (static_cast<int64_t>(n) * C + c) * plane;
            ChannelStats& ch = stats.channels[static_cast<size_t>(c)];
            for (int64_t i = 0; i < plane; ++i) ch.push(p[i]);
        }
}

inline LayerStats merge(const LayerStats& a, const LayerStats& b) {
    if (a.channel_count() != b.channel_count()) throw std::invalid_argument("merge: channel mismatch");
    LayerStats r(a.probe, a.channel_count());
    for (size_t c = 0; c < a.channels.size(); ++c)
        r.channels[c] = ChannelStats::merge(a.channels[c], b.channels[c]);
    return r;
}

enum class KlLogOrientation {
    standard,   // log(sigma_b / sigma_a); the proper Gaussian KL
    as_printed, // log(sigma_a / sigma_b); can go negative on its own
};

// Gaussian KL divergence with a variance floor. The symmetric sum below is
// identical under either log orientation because the log terms cancel.
inline double kl_gaussian(double mean_a, double var_a, double mean_b, double var_b, double floor,
                          KlLogOrientation orientation = KlLogOrientation::standard) {
    if (floor <= 0) throw std::invalid_argument("kl_gaussian: floor must be positive");
    var_a = std::max(var_a, floor);
    var_b = std::max(var_b, floor);
    const double d = mean_a - mean_b;
    const double log_term = 0.5 * std::log(orientation == KlLogOrientation::standard ? var_b / var_a
                                                                                     : var_a / var_b);
    return log_term + (var_a + d * d) / (2.0 * var_b) - 0.5;
}

// D(A||B) = KL(A||B) + KL(B||A); closed form
// (va + d^2)/(2 vb) + (vb + d^2)/(2 va) - 1, always >= 0.
inline double sym_kl(double mean_a, double var_a, double mean_b, double var_b, double floor) {
    return kl_gaussian(mean_a, var_a, mean_b, var_b, floor) +
           kl_gaussian(mean_b, var_b, mean_a, var_a, floor);
}

// Channel-mean symmetric KL between two modalities at one probe.
// flagged, when given, counts channels where either variance hit the floor.
inline double layer_divergence(const LayerStats& a, const LayerStats& b, double floor,
                               int* flagged = nullptr) {
    if (a.channel_count() != b.channel_count())
        throw std::invalid_argument("layer_divergence: channel count mismatch " +
                                    std::to_string(a.channel_count()) + " vs " +
                                    std::to_string(b.channel_count()));
    double acc = 0.0;
    int floored = 0;
    for (size_t c = 0; c < a.channels.size(); ++c) {
        const ChannelStats& ca = a.channels[c];
        const ChannelStats& cb = b.channels[c];
        if (ca.variance() < floor || cb.variance() < floor) ++floored;
        acc += sym_kl(ca.mean, ca.variance(), cb.mean, cb.variance(), floor);
    }
    if (flagged) *flagged = floored;
    return acc / static_cast<double>(a.channels.size());
}

// One row per probe, in registry (depth) order.
struct DivergenceReport {
    struct Row {
        std::string probe;
        int depth = 0;
        double divergence = 0.0;
        int floored_channels = 0;
    };
    std::vector<Row> rows;
    std::string model_id, modality_a, modality_b;
    int64_t samples_a = 0, samples_b = 0;
    double floor = 1e-8;

    double mean_divergence() const {
        double acc = 0;
        for (const Row& r : rows) acc += r.divergence;
        return rows.empty() ? 0.0 : acc / static_cast<double>(rows.size());
    }
};

// A modality's samples for profiling: count plus an indexed loader returning
// (C,H,W) or (N=1 adaptable) input tensors.
struct ModalityDataset {
    std::string id;
    int64_t count = 0;
    std::function<Tensor(int64_t)> input_at; // returns (C,H,W)
};

// Runs the net in eval mode with capture over both streams and reports the
// per-probe feature divergence between the two modalities.
inline DivergenceReport divergence_profile(ToyNet& net, const ModalityDataset& a, const ModalityDataset& b,
                                           const std::set<std::string>& probes, double floor,
                                           int batch = 8) {
    if (a.count < 1 || b.count < 1) throw std::invalid_argument("divergence_profile: empty sample stream");
    for (const std::string& p : probes)
        if (!net.has_probe(p)) throw std::invalid_argument("divergence_profile: unknown probe '" + p + "'");

    std::vector<std::string> ordered;
    for (const std::string& p : net.probes)
        if (probes.empty() || probes.count(p)) ordered.push_back(p);
    std::set<std::string> capture(ordered.begin(), ordered.end());

    auto scan = [&](const ModalityDataset& ds) {
        std::vector<LayerStats> stats;
        bool init = false;
        for (int64_t at = 0; at < ds.count; at += batch) {
            const int64_t n = std::min<int64_t>(batch, ds.count - at);
            // assemble a batch tensor from per-sample planes
            Tensor first = ds.input_at(at);
            const int C = first.extent(0), H = first.extent(1), W = first.extent(2);
            std::vector<double> buf(static_cast<size_t>(n) * C * H * W);
            for (int64_t i = 0; i < n; ++i) {
                Tensor s = i == 0 ? first : ds.input_at(at + i);
                if (s.rank() != 3 || s.extent(0) != C || s.extent(1) != H || s.extent(2) != W)
                    throw std::invalid_argument("divergence_profile: inconsistent sample shapes");
                std::copy(s.data(), s.data() + s.numel(),
                          buf.begin() + static_cast<int64_t>(i) * C * H * W);
            }
            Tensor x = Tensor::from_data({static_cast<int>(n), C, H, W}, std::move(buf));
            Tape tape;
            Binder bind(tape);
            ForwardResult res = forward_segmentation(net, bind, x, Mode::eval, capture);
            if (!init) {
                for (const std::string& p : ordered)
                    stats.emplace_back(p, res.captured.at(p).extent(1));
                init = true;
            }
            for (size_t k = 0; k < ordered.size(); ++k) accumulate(stats[k], res.captured.at(ordered[k]));
        }
        return stats;
    };

    std::vector<LayerStats> sa = scan(a);
    std::vector<LayerStats> sb = scan(b);

    DivergenceReport rep;
    rep.model_id = to_string(net.policy);
    rep.modality_a = a.id;
    rep.modality_b = b.id;
    rep.samples_a = a.count;
    rep.samples_b = b.count;
    rep.floor = floor;
    for (size_t k = 0; k < ordered.size(); ++k) {
        DivergenceReport::Row row;
        row.probe = ordered[k];
        // depth index = position in the full registry
        for (size_t d = 0; d < net.probes.size(); ++d)
            if (net.probes[d] == ordered[k]) row.depth = static_cast<int>(d);
        row.divergence = layer_divergence(sa[k], sb[k], floor, &row.floored_channels);
        rep.rows.push_back(row);
    }
    return rep;
}

// --- CSV (plot-ready, Fig.2-style) ------------------------------------------

inline void write_divergence_csv(const DivergenceReport& rep, std::ostream& os) {
    char buf[64];
    os << "# segbench divergence report\n";
    os << "# model " << rep.model_id << "\n";
    os << "# modality_a " << rep.modality_a << "\n";
    os << "# modality_b " << rep.modality_b << "\n";
    os << "# samples_a " << rep.samples_a << "\n";
    os << "# samples_b " << rep.samples_b << "\n";
    std::snprintf(buf, sizeof(buf), "%.17g", rep.floor);
    os << "# floor " << buf << "\n";
    os << "probe,depth,divergence,floored_channels\n";
    for (const DivergenceReport::Row& r : rep.rows) {
        std::snprintf(buf, sizeof(buf), "%.17g", r.divergence);
        os << r.probe << "," << r.depth << "," << buf << "," << r.floored_channels << "\n";
    }
}

inline void save_divergence_csv(const DivergenceReport& rep, const std::string& path) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write " + path);
    write_divergence_csv(rep, os);
}

inline DivergenceReport read_divergence_csv(std::istream& is) {
    DivergenceReport rep;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        if (line[0] == '#') {
            std::istringstream ls(line.substr(1));
            std::string key;
            ls >> key;
            if (key == "model") ls >> rep.model_id;
            else if (key == "modality_a") ls >> rep.modality_a;
            else if (key == "modality_b") ls >> rep.modality_b;
            else if (key == "samples_a") ls >> rep.samples_a;
            else if (key == "samples_b") ls >> rep.samples_b;
            else if (key == "floor") ls >> rep.floor;
            continue;
        }
        if (line.rfind("probe,", 0) == 0) continue; // header
        std::istringstream ls(line);
        DivergenceReport::Row r;
        std::string tok;
        std::getline(ls, r.probe, ',');
        std::getline(ls, tok, ',');
        r.depth = std::stoi(tok);
        std::getline(ls, tok, ',');
        r.divergence = std::stod(tok);
        std::getline(ls, tok, ',');
        r.floored_channels = std::stoi(tok);
        rep.rows.push_back(r);
    }
    return rep;
}

} // namespace segbench
