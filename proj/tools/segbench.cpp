// segbench command-line driver: train / eval / divergence / matrix /
// verify / gen-data over the synthetic two-modality benchmark.
//
// Exit codes: 0 ok, 1 config or I/O error, 2 training divergence,
// 3 verification failure.

#include <CLI11.hpp>

#include <filesystem>
#include <future>
#include <iostream>
#include <optional>
#include <sstream>
#include <thread>

#include "segbench/config.hpp"
#include "segbench/experiment.hpp"
#include "segbench/verify.hpp"

namespace fs = std::filesystem;
using namespace segbench;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitConfig = 1;
constexpr int kExitDiverged = 2;
constexpr int kExitVerify = 3;

RunConfig load_config_or_default(const std::string& path) {
    if (path.empty()) return RunConfig{};
    return load_run_config(path); // throws ConfigError naming the path
}

std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.6g", v);
    return buf;
}

std::string cell_dir_name(NormPolicy policy, double l1, double l2, uint64_t seed) {
    std::ostringstream os;
    os << to_string(policy) << "_l" << fmt(l1) << "_" << fmt(l2) << "_s" << seed;
    return os.str();
}

void print_iou(const IouReport& r, const std::string& label) {
    std::cout << label << ": mIoU " << fmt(r.mean) << " [";
    for (size_t c = 0; c < r.per_class.size(); ++c) {
        if (c) std::cout << " ";
        std::cout << fmt(r.per_class[c]);
        if (r.empty_union[c]) std::cout << "*";
    }
    std::cout << "]  (* = empty union)\n";
}

// "DIR" or "DIR:A" / "DIR:B" exported-dataset reference
struct DataRef {
    std::string dir;
    char modality = 'A';
};

DataRef parse_data_ref(const std::string& s) {
    DataRef ref;
    size_t colon = s.rfind(':');
    if (colon != std::string::npos && colon + 2 == s.size() &&
        (s[colon + 1] == 'A' || s[colon + 1] == 'B')) {
        ref.dir = s.substr(0, colon);
        ref.modality = s[colon + 1];
    } else {
        ref.dir = s;
    }
    return ref;
}

int run_train(const std::string& config_path, const std::string& policy, double* l1, double* l2,
              int64_t* seed, const std::string& out) {
    RunConfig cfg = load_config_or_default(config_path);
    if (!policy.empty()) cfg.policy = policy_from_string(policy);
    if (l1) cfg.loss.lambda1 = *l1;
    if (l2) cfg.loss.lambda2 = *l2;
    if (seed) cfg.train_seed = static_cast<uint64_t>(*seed);

    std::string dir = out.empty()
                          ? (fs::path(cfg.resolved_out_dir()) /
                             ("train_" + cell_dir_name(cfg.policy, cfg.loss.lambda1, cfg.loss.lambda2,
                                                       cfg.train_seed)))
                                .string()
                          : out;
    std::cout << "training " << to_string(cfg.policy) << " (l1=" << fmt(cfg.loss.lambda1)
              << ", l2=" << fmt(cfg.loss.lambda2) << ", seed=" << cfg.train_seed << ", "
              << cfg.optim.total_iters() << " iters) -> " << dir << "\n";
    CellResult cell = run_cell(cfg, dir);
    print_iou(cell.cross.report_same, std::string("val on ") + cfg.train_modality);
    print_iou(cell.cross.report_cross, std::string("val on ") + (cfg.train_modality == 'A' ? 'B' : 'A'));
    std::cout << "performance decay " << fmt(cell.cross.decay) << ", mean feature divergence "
              << fmt(cell.divergence.mean_divergence()) << "\n";
    std::cout << "artifacts: " << dir << "/{checkpoint,runlog_iters.csv,runlog_evals.csv,divergence.csv}\n";
    return kExitOk;
}

int run_eval(const std::string& config_path, const std::string& checkpoint, char modality,
             const std::string& data_dir, const std::string& out) {
    RunConfig cfg = load_config_or_default(config_path);
    ToyNet net = load_checkpoint(checkpoint);
    IouReport rep;
    if (!data_dir.empty()) {
        ExportedDataset ds(data_dir);
        rep = eval_miou_source(
            net, [&ds](int64_t i) { return ds.at(i); }, ds.size(), modality);
    } else {
        SampleStream val = val_stream(cfg);
        rep = eval_miou(net, val, modality);
    }
    print_iou(rep, std::string("eval on ") + modality);
    if (!out.empty()) {
        std::ofstream os(out);
        if (!os) throw ConfigError("cannot write " + out);
        char buf[64];
        os << "class,iou\n";
        for (size_t c = 0; c < rep.per_class.size(); ++c) {
            std::snprintf(buf, sizeof(buf), "%.17g", rep.per_class[c]);
            os << "c" << c << "," << buf << "\n";
        }
        std::snprintf(buf, sizeof(buf), "%.17g", rep.mean);
        os << "mean," << buf << "\n";
    }
    return kExitOk;
}

// first few samples of a stream, forwarded with full capture, one tensor v1
// file per probe
void dump_activations(ToyNet& net, const ModalityDataset& ds, const fs::path& dir) {
    fs::create_directories(dir);
    const int64_t n = std::min<int64_t>(ds.count, 4);
    Tensor first = ds.input_at(0);
    std::vector<double> buf(static_cast<size_t>(n) * first.numel());
    for (int64_t i = 0; i < n; ++i) {
        Tensor s = i == 0 ? first : ds.input_at(i);
        std::copy(s.data(), s.data() + s.numel(), buf.begin() + i * first.numel());
    }
    Tensor x = Tensor::from_data(
        {static_cast<int>(n), first.extent(0), first.extent(1), first.extent(2)}, std::move(buf));
    Tape tape;
    Binder bind(tape);
    std::set<std::string> all(net.probes.begin(), net.probes.end());
    ForwardResult res = forward_segmentation(net, bind, x, Mode::eval, all);
    for (const auto& [probe, activation] : res.captured)
        activation.save_v1((dir / (probe + ".t1")).string());
    res.logits.value.save_v1((dir / "logits.t1").string());
}

int run_divergence(const std::string& config_path, const std::string& checkpoint,
                   const std::string& data_a, const std::string& data_b, double* floor,
                   const std::string& out, const std::string& dump_dir) {
    RunConfig cfg = load_config_or_default(config_path);
    if (floor) cfg.floor = *floor;
    ToyNet net = load_checkpoint(checkpoint);
    std::vector<std::string> saved_probes = load_probe_registry(checkpoint);
    if (saved_probes != net.probes)
        throw ConfigError("checkpoint probe registry does not match the rebuilt model");

    DivergenceReport rep;
    std::optional<ExportedDataset> dsa, dsb;
    SampleStream val;
    if (!data_a.empty() || !data_b.empty()) {
        if (data_a.empty() || data_b.empty())
            throw ConfigError("divergence: give both --data-a and --data-b, or neither");
        DataRef ra = parse_data_ref(data_a), rb = parse_data_ref(data_b);
        dsa.emplace(ra.dir);
        dsb.emplace(rb.dir);
        ModalityDataset ma{std::string(1, ra.modality) + ":" + ra.dir, dsa->size(),
                           [&, m = ra.modality](int64_t i) {
                               SegSample s = dsa->at(i);
                               return m == 'A' ? s.image_a : s.image_b;
                           }};
        ModalityDataset mb{std::string(1, rb.modality) + ":" + rb.dir, dsb->size(),
                           [&, m = rb.modality](int64_t i) {
                               SegSample s = dsb->at(i);
                               return m == 'A' ? s.image_a : s.image_b;
                           }};
        rep = divergence_profile(net, ma, mb, {}, cfg.floor);
        if (!dump_dir.empty()) {
            dump_activations(net, ma, fs::path(dump_dir) / "a");
            dump_activations(net, mb, fs::path(dump_dir) / "b");
        }
    } else {
        val = val_stream(cfg);
        ModalityDataset ma = modality_view(val, 'A');
        ModalityDataset mb = modality_view(val, 'B');
        rep = divergence_profile(net, ma, mb, {}, cfg.floor);
        if (!dump_dir.empty()) {
            dump_activations(net, ma, fs::path(dump_dir) / "a");
            dump_activations(net, mb, fs::path(dump_dir) / "b");
        }
    }
    if (out.empty()) {
        write_divergence_csv(rep, std::cout);
    } else {
        save_divergence_csv(rep, out);
        std::cout << "wrote " << out << " (" << rep.rows.size() << " probes, mean divergence "
                  << fmt(rep.mean_divergence()) << ")\n";
    }
    return kExitOk;
}

int run_matrix(const std::string& config_path, const std::string& policies, const std::string& lambdas,
               const std::string& seeds, const std::string& out, int jobs) {
    RunConfig base = load_config_or_default(config_path);
    std::vector<NormPolicy> pols;
    {
        std::stringstream ss(policies);
        std::string tok;
        while (std::getline(ss, tok, ',')) pols.push_back(policy_from_string(tok));
    }
    std::vector<std::pair<double, double>> ls;
    {
        std::stringstream ss(lambdas);
        std::string tok;
        while (std::getline(ss, tok, ',')) {
            size_t colon = tok.find(':');
            if (colon == std::string::npos)
                throw ConfigError("matrix: --lambdas entries look like l1:l2, got '" + tok + "'");
            ls.emplace_back(std::stod(tok.substr(0, colon)), std::stod(tok.substr(colon + 1)));
        }
    }
    std::vector<uint64_t> sds;
    {
        std::stringstream ss(seeds);
        std::string tok;
        while (std::getline(ss, tok, ',')) sds.push_back(std::stoull(tok));
    }
    if (pols.empty() || ls.empty() || sds.empty())
        throw ConfigError("matrix: --policies, --lambdas and --seeds must be non-empty");

    std::string out_dir = out.empty() ? (fs::path(base.resolved_out_dir()) / "matrix").string() : out;
    fs::create_directories(out_dir);

    std::vector<RunConfig> cells;
    for (NormPolicy p : pols)
        for (auto [l1, l2] : ls)
            for (uint64_t s : sds) {
                RunConfig c = base;
                c.policy = p;
                c.loss.lambda1 = l1;
                c.loss.lambda2 = l2;
                c.train_seed = s;
                cells.push_back(c);
            }
    std::cout << "matrix: " << cells.size() << " cells (" << pols.size() << " policies x " << ls.size()
              << " loss settings x " << sds.size() << " seeds), " << jobs << " parallel\n";

    std::vector<CellResult> results(cells.size());
    auto worker = [&](size_t i) {
        const RunConfig& c = cells[i];
        std::string dir =
            (fs::path(out_dir) / cell_dir_name(c.policy, c.loss.lambda1, c.loss.lambda2, c.train_seed))
                .string();
        CellResult r;
        try {
            r = run_cell(c, dir);
        } catch (const std::exception& e) {
            r.policy = c.policy;
            r.lambda1 = c.loss.lambda1;
            r.lambda2 = c.loss.lambda2;
            r.seed = c.train_seed;
            r.failed = true;
            r.error = e.what();
        }
        return r;
    };
    for (size_t at = 0; at < cells.size(); at += static_cast<size_t>(jobs)) {
        std::vector<std::future<CellResult>> wave;
        for (size_t i = at; i < std::min(cells.size(), at + static_cast<size_t>(jobs)); ++i)
            wave.push_back(std::async(std::launch::async, worker, i));
        for (size_t k = 0; k < wave.size(); ++k) {
            results[at + k] = wave[k].get();
            const CellResult& r = results[at + k];
            std::cout << cell_dir_name(r.policy, r.lambda1, r.lambda2, r.seed) << ": "
                      << (r.failed ? ("FAILED " + r.error)
                                   : ("mIoU " + fmt(r.cross.miou_same) + " decay " + fmt(r.cross.decay) +
                                      " mean_div " + fmt(r.divergence.mean_divergence())))
                      << "\n";
        }
    }

    std::ofstream os(fs::path(out_dir) / "summary.csv");
    if (!os) throw ConfigError("cannot write matrix summary in " + out_dir);
    write_matrix_csv(results, base.scene.num_classes(), os);
    std::cout << "summary: " << (fs::path(out_dir) / "summary.csv").string() << "\n";

    bool diverged = false, failed = false;
    for (const CellResult& r : results) {
        failed = failed || r.failed;
        diverged = diverged || (r.failed && r.error.find("non-finite") != std::string::npos);
    }
    if (diverged) return kExitDiverged;
    return failed ? kExitConfig : kExitOk;
}

int run_verify(const std::string& suite) {
    std::vector<CheckResult> results;
    if (suite == "gradcheck") results = verify_gradcheck();
    else if (suite == "lovasz-oracle") results = verify_lovasz_oracle();
    else if (suite == "divergence-math") results = verify_divergence_math();
    else if (suite == "schedule") results = verify_schedule();
    else if (suite == "all") {
        for (auto&& batch : {verify_gradcheck(), verify_lovasz_oracle(), verify_divergence_math(),
                             verify_schedule()})
            results.insert(results.end(), batch.begin(), batch.end());
    } else {
        throw ConfigError("unknown verify suite '" + suite +
                          "' (gradcheck|lovasz-oracle|divergence-math|schedule|all)");
    }
    int failures = 0;
    for (const CheckResult& r : results) {
        std::cout << (r.pass ? "[PASS] " : "[FAIL] ") << r.name;
        if (!r.detail.empty()) std::cout << " - " << r.detail;
        std::cout << "\n";
        failures += r.pass ? 0 : 1;
    }
    std::cout << results.size() << " checks, " << failures << " failures\n";
    return failures == 0 ? kExitOk : kExitVerify;
}

int run_gen_data(const std::string& config_path, const std::string& out, int64_t count, int64_t seed) {
    RunConfig cfg = load_config_or_default(config_path);
    if (count > 0) cfg.train_count = count;
    uint64_t s = seed >= 0 ? static_cast<uint64_t>(seed) : cfg.data_seed;
    SampleStream stream = gen_dataset(cfg.scene, cfg.train_count, s);
    export_dataset(stream, out);
    std::cout << "wrote " << stream.size() << " samples to " << out << "\n";
    return kExitOk;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"segbench: normalization-vs-feature-divergence benchmark on synthetic two-modality data"};
    app.require_subcommand(1);

    std::string config_path, policy, out, checkpoint, data_dir, data_a, data_b, suite, dump_dir;
    std::string policies = "PLAIN_BN,IBN_A,IBN_S", lambdas = "1:0", seeds = "1";
    char modality = 'A';
    double l1 = 0, l2 = 0, floor = 0;
    bool has_l1 = false, has_l2 = false, has_floor = false;
    int64_t seed = 0, count = 0, gen_seed = -1;
    bool has_seed = false;
    int jobs = std::max(1u, std::min(2u, std::thread::hardware_concurrency()));

    CLI::App* train = app.add_subcommand("train", "train one model per config, archive checkpoint + logs");
    train->add_option("--config", config_path, "run config file (defaults used when omitted)");
    train->add_option("--policy", policy, "PLAIN_BN|IBN_A|IBN_B|IBN_S (overrides config)");
    train->add_option("--lambda1", l1, "dice weight")->each([&](const std::string&) { has_l1 = true; });
    train->add_option("--lambda2", l2, "lovasz weight")->each([&](const std::string&) { has_l2 = true; });
    train->add_option("--seed", seed, "training seed")->each([&](const std::string&) { has_seed = true; });
    train->add_option("--out", out, "output directory (default <out_root>/train_<cell>)");

    CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint's mIoU on one modality");
    eval->add_option("--config", config_path, "run config file");
    eval->add_option("--checkpoint", checkpoint, "checkpoint directory")->required();
    eval->add_option("--modality", modality, "A or B")->check(CLI::IsMember({'A', 'B'}));
    eval->add_option("--data", data_dir, "exported dataset directory (default: synthetic val split)");
    eval->add_option("--out", out, "write class,iou CSV here");

    CLI::App* dive = app.add_subcommand("divergence", "per-probe feature divergence between modalities");
    dive->add_option("--config", config_path, "run config file");
    dive->add_option("--checkpoint", checkpoint, "checkpoint directory")->required();
    dive->add_option("--data-a", data_a, "exported dataset DIR[:A|B] for side A (default synthetic :A)");
    dive->add_option("--data-b", data_b, "exported dataset DIR[:A|B] for side B (default synthetic :B)");
    dive->add_option("--floor", floor, "variance floor")->each([&](const std::string&) { has_floor = true; });
    dive->add_option("--out", out, "CSV path (stdout when omitted)");
    dive->add_option("--dump-activations", dump_dir,
                     "also write captured probe activations (tensor v1) under this directory");

    CLI::App* matrix = app.add_subcommand("matrix", "policy x loss x seed experiment grid");
    matrix->add_option("--config", config_path, "base run config");
    matrix->add_option("--policies", policies, "comma list of policies");
    matrix->add_option("--lambdas", lambdas, "comma list of l1:l2 pairs");
    matrix->add_option("--seeds", seeds, "comma list of seeds");
    matrix->add_option("--out", out, "matrix output directory");
    matrix->add_option("--jobs", jobs, "parallel cells");

    CLI::App* verify = app.add_subcommand("verify", "run a verification suite");
    verify->add_option("suite", suite, "gradcheck|lovasz-oracle|divergence-math|schedule|all")->required();

    CLI::App* gen = app.add_subcommand("gen-data", "export a synthetic dataset");
    gen->add_option("--config", config_path, "run config file");
    gen->add_option("--out", out, "output directory")->required();
    gen->add_option("--count", count, "sample count (default: config train_count)");
    gen->add_option("--seed", gen_seed, "dataset seed (default: config data seed)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? kExitOk : kExitConfig;
    }

    try {
        if (train->parsed())
            return run_train(config_path, policy, has_l1 ? &l1 : nullptr, has_l2 ? &l2 : nullptr,
                             has_seed ? &seed : nullptr, out);
        if (eval->parsed()) return run_eval(config_path, checkpoint, modality, data_dir, out);
        if (dive->parsed())
            return run_divergence(config_path, checkpoint, data_a, data_b, has_floor ? &floor : nullptr,
                                  out, dump_dir);
        if (matrix->parsed()) return run_matrix(config_path, policies, lambdas, seeds, out, jobs);
        if (verify->parsed()) return run_verify(suite);
        if (gen->parsed()) return run_gen_data(config_path, out, count, gen_seed);
    } catch (const TrainingDiverged& e) {
        std::cerr << "training diverged: " << e.what() << "\n";
        return kExitDiverged;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitConfig;
    }
    return kExitOk;
}
