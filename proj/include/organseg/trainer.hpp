#pragma once

#include <filesystem>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "organseg/checkpoint.hpp"
#include "organseg/focus.hpp"
#include "organseg/metrics.hpp"
#include "organseg/model.hpp"
#include "organseg/objective.hpp"
#include "organseg/optim.hpp"
#include "organseg/phantom.hpp"

namespace organseg {

inline constexpr const char* kStageOrder[5] = {"pretrain_aae", "train_snet", "train_solnet",
                                               "train_sosnet_adversarial", "finetune_all"};

struct StageSteps {
    std::int64_t pretrain_aae = 400;
    std::int64_t train_snet = 320;
    std::int64_t train_solnet = 160;
    std::int64_t train_sosnet_adversarial = 240;
    std::int64_t finetune_all = 40;

    std::int64_t of(const std::string& stage) const;
};

struct TrainConfig {
    std::filesystem::path dataset_root;
    std::filesystem::path out_dir;

    double width_multiplier = 0.25;
    std::vector<std::int64_t> aspp_rates{3, 6, 12, 18};
    std::int64_t se_reduction = 8;
    Vec3i roi_size{8, 32, 32};
    std::string normalization = "instance";

    LossWeights loss;  // empty alpha = derive from the training split

    double lr = 5e-4;
    std::int64_t batch_size = 1;
    std::uint64_t seed = 7;
    std::int64_t chunk = 16;
    double sigma_voxels = 5.0;
    StageSteps steps;
    std::int64_t checkpoint_every = 0;  // 0 = final only
    double teacher_forcing = 0.5;
    bool sos_use_aae = true;            // false trains the plain two-stage variant
    bool finetune_include_shape = true;

    AffineBounds augment{{0.0, 10.0, 10.0}, 10.0, 0.7, 1.3};
    bool augment_enabled = true;

    std::string config_hash;  // hash of the resolved experiment config
};

// In-memory dataset with lazy per-case caching.
class Dataset {
public:
    explicit Dataset(DatasetManifest manifest);

    const DatasetManifest& manifest() const { return m_; }
    std::size_t train_count() const { return m_.train_cases.size(); }
    std::size_t test_count() const { return m_.test_cases.size(); }
    const CaseRecord& train_case(std::size_t i) const;
    const CaseRecord& test_case(std::size_t i) const;

    const std::vector<int>& small_class_ids() const { return small_ids_; }
    std::int64_t num_classes() const;  // organs + background

    // Mean voxels per class over the training split, background included;
    // index 0 = background, index i = roster[i-1].
    std::vector<double> mean_class_voxels() const;

private:
    DatasetManifest m_;
    std::vector<int> small_ids_;
    mutable std::vector<std::unique_ptr<CaseRecord>> train_cache_, test_cache_;
};

// All four networks plus their optimizers, built from one config + dataset.
struct Pipeline {
    Pipeline(const TrainConfig& cfg, const Dataset& data);

    SNetConfig snet_cfg;
    std::unique_ptr<SNet> snet;
    std::unique_ptr<SolNet> sol;
    std::vector<std::unique_ptr<SosNet>> sos;  // one per small organ, roster order
    std::unique_ptr<Aae> aae;
    std::vector<int> small_ids;

    std::vector<Tensor> all_params() const;
    std::vector<Tensor> sos_params() const;
    std::vector<Tensor> seg_params() const;  // snet + sol + sos
    void set_all_requires_grad(bool v);
};

struct PredictOptions {
    enum class Centers { sol_peaks, gt_centroids, jittered_gt };
    bool use_small_branch = true;
    Centers centers = Centers::sol_peaks;
    const std::map<int, Vec3d>* gt_centroids_mm = nullptr;
    double jitter_mm = 0.0;
    std::uint64_t jitter_seed = 0;
    double threshold = 0.5;
    std::int64_t chunk_override = 0;  // 0 = config chunk
};

struct PredictResult {
    LabelMap labels;
    std::vector<Volume> heatmaps;                  // per small organ, full volume
    std::vector<SmallOrganPrediction> small_preds; // per small organ
    std::map<int, Vec3d> sol_centroids_mm;         // SOL peak locations
};

struct RobustnessRow {
    double distance_mm = 0.0;
    double small_dsc = 0.0;
};

struct RobustnessTable {
    double sol_small_dsc = 0.0;  // SOL-driven boxes
    std::vector<RobustnessRow> rows;
};

// Recorded (gt, pred) ROI mask pairs, used by the decoupled-run oracle.
// Consecutive runs of `group_size` items belong to one optimizer step.
struct MaskStream {
    struct Item {
        std::vector<double> gt, pred;
        Vec3i size;
    };
    std::vector<Item> items;
    std::size_t group_size = 1;
};

struct StageLossRecord {
    std::int64_t step;
    std::map<std::string, double> components;
};

class Trainer {
public:
    explicit Trainer(TrainConfig cfg);

    const TrainConfig& config() const { return cfg_; }
    Dataset& dataset() { return data_; }
    Pipeline& pipeline() { return *pipe_; }
    const LossWeights& loss_weights() const { return loss_; }

    // Stage entry points; each writes checkpoints and a jsonl loss log under
    // out_dir/stage_<name>/ and returns the per-step loss trajectory.
    std::vector<StageLossRecord> pretrain_aae();
    std::vector<StageLossRecord> train_snet();
    std::vector<StageLossRecord> train_solnet();
    std::vector<StageLossRecord> train_sosnet_adversarial(MaskStream* record = nullptr);
    // Plain SOS training (no AAE anywhere); same sampling stream as the
    // adversarial stage so the two are comparable step-for-step.
    std::vector<StageLossRecord> train_sosnet_plain(MaskStream* record = nullptr);
    std::vector<StageLossRecord> finetune_all();

    // Runs one named stage (loading upstream state), or all in order.
    void run_stage(const std::string& stage, bool resume = false);
    void run_all();

    // Loads every network's weights from a stage checkpoint directory.
    void load_stage_checkpoint(const std::filesystem::path& stage_or_step_dir);

    PredictResult predict(const Volume& image, const PredictOptions& opts = {}) const;

    MetricReport evaluate_test_split(const PredictOptions& opts = {}) const;

    // Mirrors the jitter-robustness protocol: ground-truth boxes translated by
    // exactly d mm in random directions, plus the SOL-driven row.
    RobustnessTable robustness_sweep(const std::vector<double>& distances_mm,
                                     std::uint64_t sweep_seed = 0) const;

    // Held-out AAE reconstruction quality (DSC at 0.5) over gt ROI masks.
    double aae_heldout_recon_dsc() const;

    std::filesystem::path stage_dir(const std::string& stage) const;
    std::optional<std::filesystem::path> latest_step_dir(const std::string& stage) const;

private:
    struct ChunkSample;
    ChunkSample sample_chunk(std::uint64_t stage_id, std::int64_t step, bool small_inclusive) const;
    std::vector<StageLossRecord> sos_stage_impl(bool use_aae, MaskStream* record);
    void save_stage_checkpoint(const std::string& stage, std::int64_t step, const Adam* opt);
    double heldout_mean_dsc_all() const;

    TrainConfig cfg_;
    Dataset data_;
    std::unique_ptr<Pipeline> pipe_;
    LossWeights loss_;  // resolved (alpha filled)
};

// AAE reconstruction training over a fixed recorded mask stream; returns the
// per-step reconstruction losses. Used as the decoupled-run oracle.
std::vector<double> train_aae_on_stream(Aae& aae, const MaskStream& stream, double lr);

}  // namespace organseg
