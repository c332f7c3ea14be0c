#pragma once

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include "segbench/config.hpp"
#include "segbench/divergence.hpp"
#include "segbench/train.hpp"

namespace segbench {

// validation stream uses its own seed lane so it never collides with training ids
constexpr uint64_t kValSeedSalt = 0x56414C5EEDull;

inline SampleStream train_stream(const RunConfig& cfg) {
    return gen_dataset(cfg.scene, cfg.train_count, cfg.data_seed);
}

inline SampleStream val_stream(const RunConfig& cfg) {
    return gen_dataset(cfg.scene, cfg.val_count, cfg.data_seed ^ kValSeedSalt);
}

inline ToyNet build_net(const RunConfig& cfg) {
    return build_toynet(cfg.policy, cfg.widths, cfg.scene.num_classes(), cfg.model_seed, cfg.sn_branches,
                        cfg.eps, cfg.bn_momentum);
}

inline ModalityDataset modality_view(const SampleStream& stream, char modality, std::string id = "") {
    ModalityDataset ds;
    ds.id = id.empty() ? std::string(1, modality) : std::move(id);
    ds.count = stream.size();
    if (modality == 'A' || modality == 'a')
        ds.input_at = [&stream](int64_t i) { return stream.at(i).image_a; };
    else
        ds.input_at = [&stream](int64_t i) { return stream.at(i).image_b; };
    return ds;
}

// One experiment cell: train per config, evaluate same- and cross-modality
// mIoU on the validation stream, profile the feature divergence between the
// two modalities, optionally archive all artifacts under out_dir.
struct CellResult {
    NormPolicy policy = NormPolicy::PLAIN_BN;
    double lambda1 = 0, lambda2 = 0;
    uint64_t seed = 0;
    CrossModalityResult cross;
    DivergenceReport divergence;
    RunLog log;
    bool failed = false;
    std::string error;
    int failed_iteration = -1;
};

inline CellResult run_cell(const RunConfig& cfg, const std::optional<std::string>& out_dir) {
    CellResult cell;
    cell.policy = cfg.policy;
    cell.lambda1 = cfg.loss.lambda1;
    cell.lambda2 = cfg.loss.lambda2;
    cell.seed = cfg.train_seed;

    SampleStream tr = train_stream(cfg);
    SampleStream val = val_stream(cfg);
    ToyNet net = build_net(cfg);

    TrainOptions opts;
    opts.modality = cfg.train_modality;
    opts.lovasz_per_image = cfg.lovasz_per_image;
    opts.eval_interval = cfg.eval_interval;
    opts.val = cfg.eval_interval > 0 ? &val : nullptr;
    cell.log = train(net, tr, cfg.loss, cfg.optim, cfg.train_seed, opts);

    cell.cross = cross_modality_eval(net, val, cfg.train_modality);

    ModalityDataset da = modality_view(val, 'A');
    ModalityDataset db = modality_view(val, 'B');
    cell.divergence = divergence_profile(net, da, db, {}, cfg.floor);

    if (out_dir) {
        namespace fs = std::filesystem;
        fs::create_directories(*out_dir);
        save_checkpoint(net, (fs::path(*out_dir) / "checkpoint").string());
        save_runlog_csv(cell.log, (fs::path(*out_dir) / "runlog_iters.csv").string(),
                        (fs::path(*out_dir) / "runlog_evals.csv").string());
        save_divergence_csv(cell.divergence, (fs::path(*out_dir) / "divergence.csv").string());
    }
    return cell;
}

// summary row: policy,l1,l2,seed,iou_c1..iou_cm,miou,decay,mean_div
inline void write_matrix_csv(const std::vector<CellResult>& cells, int num_classes, std::ostream& os) {
    char buf[64];
    os << "policy,l1,l2,seed";
    for (int c = 1; c <= num_classes; ++c) os << ",iou_c" << c;
    os << ",miou,decay,mean_div\n";
    for (const CellResult& cell : cells) {
        os << to_string(cell.policy) << ",";
        std::snprintf(buf, sizeof(buf), "%.17g", cell.lambda1);
        os << buf << ",";
        std::snprintf(buf, sizeof(buf), "%.17g", cell.lambda2);
        os << buf << "," << cell.seed;
        if (cell.failed) {
            for (int c = 0; c < num_classes + 3; ++c) os << ",nan";
            os << "\n";
            continue;
        }
        for (double v : cell.cross.report_same.per_class) {
            std::snprintf(buf, sizeof(buf), "%.17g", v);
            os << "," << buf;
        }
        std::snprintf(buf, sizeof(buf), "%.17g", cell.cross.miou_same);
        os << "," << buf;
        std::snprintf(buf, sizeof(buf), "%.17g", cell.cross.decay);
        os << "," << buf;
        std::snprintf(buf, sizeof(buf), "%.17g", cell.divergence.mean_divergence());
        os << "," << buf << "\n";
    }
}

} // namespace segbench
