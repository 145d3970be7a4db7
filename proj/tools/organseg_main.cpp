#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "organseg/config.hpp"
#include "organseg/errors.hpp"
#include "organseg/grid_io.hpp"
#include "organseg/report.hpp"
#include "organseg/trainer.hpp"

namespace fs = std::filesystem;
using namespace organseg;

namespace {

// exit codes: 0 ok, 2 config/argument, 3 I/O, 4 pipeline order, 5 training failure

fs::path find_resolved_config(const fs::path& ckpt) {
    fs::path p = ckpt;
    for (int depth = 0; depth < 5 && !p.empty(); ++depth) {
        if (fs::exists(p / "resolved_config.json")) return p / "resolved_config.json";
        if (p == p.parent_path()) break;
        p = p.parent_path();
    }
    throw IoError("no resolved_config.json found beside checkpoint " + ckpt.string());
}

// Loads the latest checkpoint reachable from `ckpt`: a step dir, a stage dir,
// or a run dir (latest stage in schedule order).
void load_best_checkpoint(Trainer& trainer, const fs::path& ckpt) {
    if (fs::exists(ckpt / "weights.bin") ||
        ckpt.filename().string().rfind("stage_", 0) == 0) {
        trainer.load_stage_checkpoint(ckpt);
        return;
    }
    for (int i = 4; i >= 0; --i) {
        const fs::path stage = ckpt / (std::string("stage_") + kStageOrder[i]);
        if (fs::exists(stage)) {
            trainer.load_stage_checkpoint(stage);
            return;
        }
    }
    throw IoError("no stage checkpoints found under " + ckpt.string());
}

int cmd_gen_data(const fs::path& config_path, const fs::path& out,
                 const std::vector<std::string>& overrides) {
    ExperimentConfig cfg = parse_experiment_config(config_path, overrides);
    if (!out.empty()) {
        cfg.dataset_root = out;
        cfg.train.dataset_root = out;
        cfg.train.config_hash = config_hash(cfg);
    }
    const DatasetManifest manifest = generate_dataset(cfg.dataset_root, cfg.roster, cfg.gen,
                                                      cfg.dataset_seed, cfg.train_cases,
                                                      cfg.test_cases);
    archive_resolved_config(cfg, cfg.dataset_root);

    // imbalance summary over all written cases
    Dataset data(manifest);
    double min_ratio = 0.0, sum_ratio = 0.0;
    const std::size_t total = data.train_count() + data.test_count();
    for (std::size_t i = 0; i < total; ++i) {
        const CaseRecord& rec = i < data.train_count()
                                    ? data.train_case(i)
                                    : data.test_case(i - data.train_count());
        const auto counts = label_voxel_counts(rec.labels);
        std::int64_t mx = 0, mn = 0;
        for (const auto& [cid, n] : counts) {
            mx = std::max(mx, n);
            mn = mn == 0 ? n : std::min(mn, n);
        }
        const double r = static_cast<double>(mx) / static_cast<double>(mn);
        min_ratio = min_ratio == 0.0 ? r : std::min(min_ratio, r);
        sum_ratio += r;
    }
    std::cout << "wrote " << manifest.train_cases.size() << " train / "
              << manifest.test_cases.size() << " test cases to " << cfg.dataset_root.string()
              << "\n";
    std::cout << "voxel imbalance ratio (largest organ / smallest): min " << min_ratio
              << ", mean " << sum_ratio / static_cast<double>(total) << "\n";
    return 0;
}

int cmd_train(const fs::path& config_path, const std::string& stage, const fs::path& resume,
              const std::vector<std::string>& overrides) {
    ExperimentConfig cfg = parse_experiment_config(config_path, overrides);
    const bool resuming = !resume.empty();
    if (resuming) {
        cfg.out_dir = resume;
        cfg.train.out_dir = resume;
    }
    archive_resolved_config(cfg, cfg.out_dir);
    Trainer trainer(cfg.train);

    if (stage == "all") {
        for (const char* s : kStageOrder) trainer.run_stage(s, resuming);
    } else {
        bool known = false;
        for (const char* s : kStageOrder) known = known || stage == s;
        if (!known) throw ConfigError("unknown stage '" + stage + "'");
        trainer.run_stage(stage, resuming);
    }
    std::cout << "training complete; checkpoints under " << cfg.out_dir.string() << "\n";
    return 0;
}

int cmd_predict(const fs::path& ckpt, const fs::path& case_base, const fs::path& out,
                const std::vector<std::string>& overrides) {
    ExperimentConfig cfg = parse_experiment_config(find_resolved_config(ckpt), overrides);
    Trainer trainer(cfg.train);
    load_best_checkpoint(trainer, ckpt);

    const Volume image = read_volume(fs::path(case_base).concat("_img"));
    const auto& manifest = trainer.dataset().manifest();
    if (image.spacing != manifest.spacing)
        throw ConfigError("case spacing does not match the checkpoint's dataset spacing");

    const PredictResult pr = trainer.predict(image);

    std::error_code ec;
    fs::create_directories(out, ec);
    if (ec) throw IoError("cannot create output dir " + out.string());
    const std::string case_id = case_base.filename().string();
    write_labelmap(out / (case_id + "_pred"), pr.labels);
    const auto& small_ids = trainer.pipeline().small_ids;
    for (std::size_t k = 0; k < pr.heatmaps.size(); ++k)
        write_volume(out / (case_id + "_heatmap_c" + std::to_string(small_ids[k])),
                     pr.heatmaps[k]);
    for (const auto& sp : pr.small_preds)
        write_volume(out / (case_id + "_mask_c" + std::to_string(sp.class_id)), sp.mask);
    std::cout << "wrote prediction for " << case_id << " to " << out.string() << "\n";
    return 0;
}

int cmd_eval(const fs::path& ckpt, const fs::path& dataset, const fs::path& out_json,
             const std::string& robustness_list, const std::vector<std::string>& overrides) {
    ExperimentConfig cfg = parse_experiment_config(find_resolved_config(ckpt), overrides);
    if (!dataset.empty()) {
        cfg.dataset_root = dataset;
        cfg.train.dataset_root = dataset;
    }
    Trainer trainer(cfg.train);
    if (trainer.dataset().test_count() == 0) throw ConfigError("eval: empty test split");
    load_best_checkpoint(trainer, ckpt);

    const MetricReport report = trainer.evaluate_test_split();
    std::optional<RobustnessTable> robustness;
    if (!robustness_list.empty()) {
        std::vector<double> distances;
        std::string token;
        std::istringstream ss(robustness_list);
        while (std::getline(ss, token, ',')) distances.push_back(std::stod(token));
        robustness = trainer.robustness_sweep(distances, cfg.train.seed);
    }

    const fs::path dir = out_json.parent_path().empty() ? fs::path(".") : out_json.parent_path();
    write_full_report(dir, report, robustness);
    if (out_json.filename() != "report.json")
        fs::copy_file(dir / "report.json", out_json, fs::copy_options::overwrite_existing);
    std::cout << render_text_table(report);
    if (robustness) std::cout << "\n" << render_robustness_table(*robustness);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"imbalanced small/large structure segmentation pipeline"};
    app.require_subcommand(1);

    std::string config_path, stage = "all", resume, ckpt, case_base, dataset, out,
                robustness_list;
    std::vector<std::string> overrides;

    auto add_overrides = [&](CLI::App* cmd) {
        cmd->add_option("--set", overrides, "override config keys, e.g. --set train.lr=0.001");
    };

    CLI::App* gen = app.add_subcommand("gen-data", "generate a phantom dataset");
    gen->add_option("--config", config_path, "experiment config JSON")->required();
    gen->add_option("--out", out, "dataset output directory (overrides dataset.root)");
    add_overrides(gen);

    CLI::App* train = app.add_subcommand("train", "run training stages");
    train->add_option("--config", config_path, "experiment config JSON")->required();
    train->add_option("--stage", stage, "stage name or 'all'");
    train->add_option("--resume", resume, "existing run directory to resume");
    add_overrides(train);

    CLI::App* predict = app.add_subcommand("predict", "predict one case");
    predict->add_option("--ckpt", ckpt, "checkpoint (run/stage/step dir)")->required();
    predict->add_option("--case", case_base, "case path stem (expects <stem>_img.raw/.json)")
        ->required();
    predict->add_option("--out", out, "output directory")->required();
    add_overrides(predict);

    CLI::App* eval = app.add_subcommand("eval", "evaluate the test split");
    eval->add_option("--ckpt", ckpt, "checkpoint (run/stage/step dir)")->required();
    eval->add_option("--dataset", dataset, "dataset root (defaults to the archived config)");
    eval->add_option("--out", out, "report.json output path")->required();
    eval->add_option("--robustness", robustness_list, "comma-separated jitter distances in mm");
    add_overrides(eval);

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    try {
        if (gen->parsed()) return cmd_gen_data(config_path, out, overrides);
        if (train->parsed()) return cmd_train(config_path, stage, resume, overrides);
        if (predict->parsed()) return cmd_predict(ckpt, case_base, out, overrides);
        if (eval->parsed()) return cmd_eval(ckpt, dataset, out, robustness_list, overrides);
    } catch (const TrainingFailure& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 5;
    } catch (const PipelineOrderError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 4;
    } catch (const IoError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::invalid_argument& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
