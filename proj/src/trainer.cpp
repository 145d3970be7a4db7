#include "organseg/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstring>
#include <fstream>
#include <iostream>

#include <nlohmann/json.hpp>

#include "organseg/errors.hpp"
#include "organseg/ops.hpp"

namespace organseg {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr double kIntensityScale = 50.0;

// rng stream ids
enum : std::uint64_t {
    kStreamAae = 0,
    kStreamSnet = 1,
    kStreamSol = 2,
    kStreamSos = 3,
    kStreamFinetune = 4,
    kStreamTeacherForcing = 101,
    kStreamBoxJitter = 102,
};

std::int64_t stage_index(const std::string& stage) {
    for (int i = 0; i < 5; ++i)
        if (stage == kStageOrder[i]) return i;
    throw ConfigError("unknown stage '" + stage + "'");
}

Tensor to_image_tensor(const Volume& v, double background) {
    std::vector<double> vals(v.data.size());
    const double inv = 1.0 / kIntensityScale;
    for (std::size_t i = 0; i < vals.size(); ++i) vals[i] = (v.data[i] - background) * inv;
    return Tensor::from_values({1, v.shape[0], v.shape[1], v.shape[2]}, std::move(vals));
}

Tensor onehot_tensor(const LabelMap& lab, const std::vector<int>& class_ids_by_index) {
    const std::int64_t C = static_cast<std::int64_t>(class_ids_by_index.size());
    const std::int64_t S = numel(lab.shape);
    std::vector<double> vals(static_cast<std::size_t>(C * S), 0.0);
    std::vector<std::int64_t> index_of_id(65536, 0);
    for (std::int64_t c = 0; c < C; ++c)
        index_of_id[static_cast<std::size_t>(class_ids_by_index[static_cast<std::size_t>(c)])] = c;
    for (std::int64_t i = 0; i < S; ++i)
        vals[static_cast<std::size_t>(index_of_id[lab.data[static_cast<std::size_t>(i)]] * S + i)] =
            1.0;
    return Tensor::from_values({C, lab.shape[0], lab.shape[1], lab.shape[2]}, std::move(vals));
}

Tensor binary_mask_tensor(const LabelMap& lab, int class_id) {
    std::vector<double> vals(lab.data.size());
    for (std::size_t i = 0; i < vals.size(); ++i) vals[i] = lab.data[i] == class_id ? 1.0 : 0.0;
    return Tensor::from_values({1, lab.shape[0], lab.shape[1], lab.shape[2]}, std::move(vals));
}

Tensor onehot2_of_mask(const Tensor& mask01) {
    return concat_channels({scalar_add(scalar_mul(mask01, -1.0), 1.0), mask01});
}

std::vector<Tensor> latent_bundle(const AaeOutputs& out) {
    std::vector<Tensor> b{out.code};
    for (const auto& f : out.decoder_features) b.push_back(f);
    return b;
}

struct FreezeGuard {
    explicit FreezeGuard(const std::vector<Tensor>& params) {
        for (const auto& p : params) {
            saved_.emplace_back(p, p.requires_grad());
            saved_.back().first.set_requires_grad(false);
        }
    }
    ~FreezeGuard() {
        for (auto& [t, v] : saved_) t.set_requires_grad(v);
    }
    std::vector<std::pair<Tensor, bool>> saved_;
};

struct StageLogWriter {
    explicit StageLogWriter(const fs::path& dir) {
        std::error_code ec;
        fs::create_directories(dir, ec);
        f.open(dir / "train_log.jsonl", std::ios::app);
    }
    void write(const std::string& stage, std::int64_t step,
               const std::map<std::string, double>& components, double wall_ms) {
        if (!f) return;
        json j;
        j["stage"] = stage;
        j["step"] = step;
        for (const auto& [k, v] : components) j[k] = v;
        j["wall_ms"] = wall_ms;
        f << j.dump() << "\n";
        f.flush();
    }
    std::ofstream f;
};

double now_ms() {
    return std::chrono::duration<double, std::milli>(
               std::chrono::steady_clock::now().time_since_epoch())
        .count();
}

void check_loss_finite(double v, const std::string& stage, std::int64_t step) {
    if (!std::isfinite(v)) throw TrainingFailure(stage, step, "loss is not finite");
}

struct BBoxInfo {
    Vec3i lo{0, 0, 0}, hi{-1, -1, -1};
    std::int64_t count = 0;
};

BBoxInfo class_bbox(const LabelMap& lab, int class_id) {
    BBoxInfo b;
    b.lo = {lab.shape[0], lab.shape[1], lab.shape[2]};
    for (std::int64_t z = 0; z < lab.shape[0]; ++z)
        for (std::int64_t y = 0; y < lab.shape[1]; ++y)
            for (std::int64_t x = 0; x < lab.shape[2]; ++x)
                if (lab.at(z, y, x) == class_id) {
                    ++b.count;
                    b.lo[0] = std::min(b.lo[0], z); b.hi[0] = std::max(b.hi[0], z);
                    b.lo[1] = std::min(b.lo[1], y); b.hi[1] = std::max(b.hi[1], y);
                    b.lo[2] = std::min(b.lo[2], x); b.hi[2] = std::max(b.hi[2], x);
                }
    return b;
}

}  // namespace

std::int64_t StageSteps::of(const std::string& stage) const {
    if (stage == "pretrain_aae") return pretrain_aae;
    if (stage == "train_snet") return train_snet;
    if (stage == "train_solnet") return train_solnet;
    if (stage == "train_sosnet_adversarial") return train_sosnet_adversarial;
    if (stage == "finetune_all") return finetune_all;
    throw ConfigError("unknown stage '" + stage + "'");
}

Dataset::Dataset(DatasetManifest manifest) : m_(std::move(manifest)) {
    for (const auto& o : m_.roster)
        if (o.size_class == SizeClass::small) small_ids_.push_back(o.class_id);
    train_cache_.resize(m_.train_cases.size());
    test_cache_.resize(m_.test_cases.size());
}

const CaseRecord& Dataset::train_case(std::size_t i) const {
    if (!train_cache_.at(i))
        train_cache_[i] = std::make_unique<CaseRecord>(read_case(m_, m_.train_cases[i]));
    return *train_cache_[i];
}

const CaseRecord& Dataset::test_case(std::size_t i) const {
    if (!test_cache_.at(i))
        test_cache_[i] = std::make_unique<CaseRecord>(read_case(m_, m_.test_cases[i]));
    return *test_cache_[i];
}

std::int64_t Dataset::num_classes() const {
    return static_cast<std::int64_t>(m_.roster.size()) + 1;
}

std::vector<double> Dataset::mean_class_voxels() const {
    std::vector<double> sums(static_cast<std::size_t>(num_classes()), 0.0);
    for (std::size_t i = 0; i < train_count(); ++i) {
        const auto& rec = train_case(i);
        const auto counts = label_voxel_counts(rec.labels);
        std::int64_t fg = 0;
        for (std::size_t r = 0; r < m_.roster.size(); ++r) {
            const auto it = counts.find(m_.roster[r].class_id);
            const std::int64_t c = it == counts.end() ? 0 : it->second;
            sums[r + 1] += static_cast<double>(c);
            fg += c;
        }
        sums[0] += static_cast<double>(numel(rec.labels.shape) - fg);
    }
    for (auto& s : sums) s /= static_cast<double>(train_count());
    return sums;
}

Pipeline::Pipeline(const TrainConfig& cfg, const Dataset& data) {
    small_ids = data.small_class_ids();
    snet_cfg.num_classes = data.num_classes();
    snet_cfg.width_multiplier = cfg.width_multiplier;
    snet_cfg.aspp_rates = cfg.aspp_rates;
    snet_cfg.se_reduction = cfg.se_reduction;
    snet = std::make_unique<SNet>(snet_cfg, mix_seed(cfg.seed, 11), "snet/");
    sol = std::make_unique<SolNet>(snet->feature_channels(),
                                   static_cast<std::int64_t>(small_ids.size()),
                                   cfg.se_reduction, mix_seed(cfg.seed, 12), "sol/");
    for (std::size_t k = 0; k < small_ids.size(); ++k) {
        SosNetConfig sc;
        sc.feature_channels = snet->feature_channels();
        sc.include_raw_image = true;
        sc.in_channels = sc.feature_channels + 1;
        sc.width = nn::scaled_width(32, cfg.width_multiplier);
        sc.se_reduction = cfg.se_reduction;
        sos.push_back(std::make_unique<SosNet>(sc, mix_seed(cfg.seed, 13, k),
                                               "sos" + std::to_string(k) + "/"));
    }
    AaeConfig ac;
    ac.width_multiplier = cfg.width_multiplier;
    ac.roi_size = {cfg.roi_size[0], cfg.roi_size[1], cfg.roi_size[2]};
    aae = std::make_unique<Aae>(ac, mix_seed(cfg.seed, 14), "aae/");
}

std::vector<Tensor> Pipeline::all_params() const {
    std::vector<Tensor> out;
    auto push = [&](const nn::ParamStore& ps) {
        for (const auto& p : ps.params()) out.push_back(p);
    };
    push(snet->params());
    push(sol->params());
    for (const auto& s : sos) push(s->params());
    push(aae->params());
    return out;
}

std::vector<Tensor> Pipeline::sos_params() const {
    std::vector<Tensor> out;
    for (const auto& s : sos)
        for (const auto& p : s->params().params()) out.push_back(p);
    return out;
}

std::vector<Tensor> Pipeline::seg_params() const {
    std::vector<Tensor> out;
    for (const auto& p : snet->params().params()) out.push_back(p);
    for (const auto& p : sol->params().params()) out.push_back(p);
    for (auto& p : sos_params()) out.push_back(p);
    return out;
}

void Pipeline::set_all_requires_grad(bool v) {
    snet->params().set_requires_grad(v);
    sol->params().set_requires_grad(v);
    for (auto& s : sos) s->params().set_requires_grad(v);
    aae->params().set_requires_grad(v);
}

Trainer::Trainer(TrainConfig cfg)
    : cfg_(std::move(cfg)), data_(read_manifest(cfg_.dataset_root)) {
    pipe_ = std::make_unique<Pipeline>(cfg_, data_);
    loss_ = cfg_.loss;
    if (loss_.alpha.empty()) loss_.alpha = alpha_from_voxel_counts(data_.mean_class_voxels());
    validate_loss_weights(loss_, data_.num_classes());
    if (cfg_.lr <= 0.0) throw ConfigError("learning rate must be > 0");
    if (cfg_.chunk < 2 || cfg_.chunk % 2 != 0)
        throw ConfigError("chunk length must be an even integer >= 2");
}

struct Trainer::ChunkSample {
    Volume image;
    LabelMap labels;
    std::map<int, Vec3d> small_centroids_voxel;  // within the chunk
};

Trainer::ChunkSample Trainer::sample_chunk(std::uint64_t stage_id, std::int64_t step,
                                           bool small_inclusive) const {
    Rng rng(mix_seed(cfg_.seed, stage_id, static_cast<std::uint64_t>(step)));
    const std::size_t case_idx = static_cast<std::size_t>(
        rng.uniform_int(0, static_cast<std::int64_t>(data_.train_count()) - 1));
    const CaseRecord& rec = data_.train_case(case_idx);
    const double fill = data_.manifest().gen.background;
    const Vec3i roi = cfg_.roi_size;

    Volume img = rec.image;
    LabelMap lab = rec.labels;
    if (cfg_.augment_enabled) {
        const int max_attempts = 25;
        for (int attempt = 0; attempt < max_attempts; ++attempt) {
            const AffineParams params =
                attempt + 1 == max_attempts ? AffineParams{} : sample_affine(rng, cfg_.augment);
            auto [aimg, alab] = random_affine(rec.image, rec.labels, params, fill);
            if (!small_inclusive) {
                img = std::move(aimg);
                lab = std::move(alab);
                break;
            }
            // small organs must stay complete and ROI-fittable after augmentation
            bool ok = true;
            for (int cid : data_.small_class_ids()) {
                const BBoxInfo b = class_bbox(alab, cid);
                if (b.count < 1) { ok = false; break; }
                for (int a = 0; a < 3; ++a) {
                    if (b.lo[a] < 1 || b.hi[a] > alab.shape[a] - 2 ||
                        b.hi[a] - b.lo[a] + 1 > roi[a] - 2) {
                        ok = false;
                        break;
                    }
                }
                if (!ok) break;
            }
            if (ok) {
                img = std::move(aimg);
                lab = std::move(alab);
                break;
            }
        }
    }

    ChunkSample out;
    const std::int64_t Z = img.shape[0];
    const std::int64_t chunk = std::min<std::int64_t>(cfg_.chunk, Z);

    std::map<int, Vec3d> centroids;  // voxel coords in the full augmented volume
    if (small_inclusive) {
        for (int cid : data_.small_class_ids()) {
            const BBoxInfo b = class_bbox(lab, cid);
            if (b.count >= 1) centroids[cid] = lab.to_voxel(label_centroid_mm(lab, cid));
        }
    }

    std::int64_t start = 0;
    if (Z > chunk) {
        if (small_inclusive && !centroids.empty()) {
            std::int64_t lo = 0, hi = Z - chunk;
            double mean_cz = 0.0;
            for (const auto& [cid, c] : centroids) {
                const std::int64_t sk = std::clamp<std::int64_t>(
                    std::llround(c[0]) - roi[0] / 2, 0, Z - roi[0]);
                lo = std::max(lo, sk + roi[0] - chunk);
                hi = std::min(hi, sk);
                mean_cz += c[0];
            }
            mean_cz /= static_cast<double>(centroids.size());
            if (lo <= hi)
                start = rng.uniform_int(lo, hi);
            else
                start = std::clamp<std::int64_t>(std::llround(mean_cz) - chunk / 2, 0, Z - chunk);
        } else {
            start = rng.uniform_int(0, Z - chunk);
        }
    }

    const RoiBox box{{start, 0, 0}, {chunk, img.shape[1], img.shape[2]}};
    out.image = roi_pool(img, box);
    out.labels = roi_pool(lab, box);
    for (auto& [cid, c] : centroids) {
        const Vec3d shifted{c[0] - static_cast<double>(start), c[1], c[2]};
        if (shifted[0] >= 0.0 && shifted[0] <= static_cast<double>(chunk - 1))
            out.small_centroids_voxel[cid] = shifted;
    }
    return out;
}

fs::path Trainer::stage_dir(const std::string& stage) const {
    return cfg_.out_dir / ("stage_" + stage);
}

std::optional<fs::path> Trainer::latest_step_dir(const std::string& stage) const {
    const fs::path dir = stage_dir(stage);
    if (!fs::exists(dir)) return std::nullopt;
    std::int64_t best = -1;
    for (const auto& e : fs::directory_iterator(dir)) {
        const std::string name = e.path().filename().string();
        if (name.rfind("step_", 0) != 0) continue;
        if (!fs::exists(e.path() / "weights.bin")) continue;
        best = std::max<std::int64_t>(best, std::stoll(name.substr(5)));
    }
    if (best < 0) return std::nullopt;
    return dir / ("step_" + std::to_string(best));
}

void Trainer::save_stage_checkpoint(const std::string& stage, std::int64_t step,
                                    const Adam* opt) {
    CheckpointMeta meta;
    meta.config_hash = cfg_.config_hash;
    meta.stage = stage;
    meta.step = step;
    meta.seed = cfg_.seed;
    meta.normalization = cfg_.normalization;
    auto params = pipe_->all_params();
    save_checkpoint(stage_dir(stage) / ("step_" + std::to_string(step)), params, opt, meta);
}

void Trainer::load_stage_checkpoint(const fs::path& dir) {
    fs::path step_dir = dir;
    if (!fs::exists(step_dir / "weights.bin")) {
        std::int64_t best = -1;
        if (fs::exists(dir))
            for (const auto& e : fs::directory_iterator(dir)) {
                const std::string name = e.path().filename().string();
                if (name.rfind("step_", 0) == 0 && fs::exists(e.path() / "weights.bin"))
                    best = std::max<std::int64_t>(best, std::stoll(name.substr(5)));
            }
        if (best < 0) throw IoError("no checkpoint found under " + dir.string());
        step_dir = dir / ("step_" + std::to_string(best));
    }
    auto params = pipe_->all_params();
    load_checkpoint(step_dir, params, nullptr);
}

namespace {
std::int64_t maybe_resume(const std::optional<fs::path>& latest, std::vector<Tensor>& params,
                          Adam& opt) {
    if (!latest) return 0;
    const CheckpointMeta meta = load_checkpoint(*latest, params, &opt);
    return meta.step;
}
}  // namespace

std::vector<StageLossRecord> Trainer::pretrain_aae() {
    const std::string stage = "pretrain_aae";
    StageLogWriter log(stage_dir(stage));
    Adam opt({cfg_.lr});
    auto params = pipe_->all_params();
    const std::int64_t start = maybe_resume(latest_step_dir(stage), params, opt);
    auto& aae = *pipe_->aae;
    std::vector<StageLossRecord> records;

    for (std::int64_t step = start + 1; step <= cfg_.steps.pretrain_aae; ++step) {
        const double t0 = now_ms();
        const ChunkSample s = sample_chunk(kStreamAae, step, true);
        Rng rng(mix_seed(cfg_.seed, kStreamAae, static_cast<std::uint64_t>(step),
                         kStreamBoxJitter));
        std::vector<int> present;
        for (const auto& [cid, c] : s.small_centroids_voxel) present.push_back(cid);
        if (present.empty()) continue;
        const int cid = present[static_cast<std::size_t>(
            rng.uniform_int(0, static_cast<std::int64_t>(present.size()) - 1))];
        const Vec3d c = s.small_centroids_voxel.at(cid);
        Vec3i center{std::llround(c[0]) + rng.uniform_int(-2, 2),
                     std::llround(c[1]) + rng.uniform_int(-2, 2),
                     std::llround(c[2]) + rng.uniform_int(-2, 2)};
        for (int a = 0; a < 3; ++a)
            center[a] = std::clamp<std::int64_t>(center[a], 0, s.labels.shape[a] - 1);
        const RoiBox box = roi_box(center, cfg_.roi_size, s.labels.shape);
        const LabelMap roi_lab = roi_pool(s.labels, box);
        const Tensor mask = binary_mask_tensor(roi_lab, cid);

        const AaeOutputs out = aae.forward(mask);
        const Tensor loss = mse_loss(out.reconstruction, mask);
        check_loss_finite(loss.item(), stage, step);
        auto aae_params = std::vector<Tensor>(aae.params().params());
        opt.zero_grad(aae_params);
        backward(loss);
        opt.step(aae_params);

        StageLossRecord rec{step, {{"recon", loss.item()}}};
        log.write(stage, step, rec.components, now_ms() - t0);
        records.push_back(std::move(rec));
        if (cfg_.checkpoint_every > 0 && step % cfg_.checkpoint_every == 0 &&
            step != cfg_.steps.pretrain_aae)
            save_stage_checkpoint(stage, step, &opt);
    }
    save_stage_checkpoint(stage, cfg_.steps.pretrain_aae, &opt);
    return records;
}

std::vector<StageLossRecord> Trainer::train_snet() {
    const std::string stage = "train_snet";
    StageLogWriter log(stage_dir(stage));
    Adam opt({cfg_.lr});
    auto params = pipe_->all_params();
    const std::int64_t start = maybe_resume(latest_step_dir(stage), params, opt);
    auto& snet = *pipe_->snet;

    std::vector<int> ids_by_index{0};
    for (const auto& o : data_.manifest().roster) ids_by_index.push_back(o.class_id);

    std::vector<StageLossRecord> records;
    for (std::int64_t step = start + 1; step <= cfg_.steps.train_snet; ++step) {
        const double t0 = now_ms();
        const ChunkSample s = sample_chunk(kStreamSnet, step, false);
        const Tensor x = to_image_tensor(s.image, data_.manifest().gen.background);
        const Tensor y = onehot_tensor(s.labels, ids_by_index);

        const SegOutputs out = snet.forward(x);
        const Tensor loss = seg_loss(out.probs, y, loss_);
        check_loss_finite(loss.item(), stage, step);
        auto snet_params = std::vector<Tensor>(snet.params().params());
        opt.zero_grad(snet_params);
        backward(loss);
        opt.step(snet_params);

        StageLossRecord rec{step, {{"seg", loss.item()}}};
        log.write(stage, step, rec.components, now_ms() - t0);
        records.push_back(std::move(rec));
        if (cfg_.checkpoint_every > 0 && step % cfg_.checkpoint_every == 0 &&
            step != cfg_.steps.train_snet)
            save_stage_checkpoint(stage, step, &opt);
    }
    save_stage_checkpoint(stage, cfg_.steps.train_snet, &opt);
    return records;
}

std::vector<StageLossRecord> Trainer::train_solnet() {
    const std::string stage = "train_solnet";
    StageLogWriter log(stage_dir(stage));
    Adam opt({cfg_.lr});
    auto params = pipe_->all_params();
    const std::int64_t start = maybe_resume(latest_step_dir(stage), params, opt);
    auto& snet = *pipe_->snet;
    auto& sol = *pipe_->sol;
    const auto& small_ids = pipe_->small_ids;

    std::vector<StageLossRecord> records;
    for (std::int64_t step = start + 1; step <= cfg_.steps.train_solnet; ++step) {
        const double t0 = now_ms();
        const ChunkSample s = sample_chunk(kStreamSol, step, true);
        const Tensor x = to_image_tensor(s.image, data_.manifest().gen.background);

        FreezeGuard freeze(std::vector<Tensor>(snet.params().params()));
        const SegOutputs seg = snet.forward(x);
        const Tensor heat = sol.forward(seg.decoder_features);

        // Gaussian heatmap targets at the (augmented) label centroids
        const Vec3i cs = s.labels.shape;
        std::vector<double> target(
            static_cast<std::size_t>(static_cast<std::int64_t>(small_ids.size()) * numel(cs)),
            0.0);
        for (std::size_t k = 0; k < small_ids.size(); ++k) {
            const auto it = s.small_centroids_voxel.find(small_ids[k]);
            if (it == s.small_centroids_voxel.end()) continue;
            const Volume h = make_heatmap(it->second, cs, s.labels.spacing, cfg_.sigma_voxels);
            std::memcpy(target.data() + static_cast<std::int64_t>(k) * numel(cs), h.data.data(),
                        static_cast<std::size_t>(numel(cs)) * sizeof(double));
        }
        const Tensor y = Tensor::from_values(
            {static_cast<std::int64_t>(small_ids.size()), cs[0], cs[1], cs[2]},
            std::move(target));

        const Tensor loss = mse_loss(heat, y);
        check_loss_finite(loss.item(), stage, step);
        auto sol_params = std::vector<Tensor>(sol.params().params());
        opt.zero_grad(sol_params);
        backward(loss);
        opt.step(sol_params);

        StageLossRecord rec{step, {{"heatmap_mse", loss.item()}}};
        log.write(stage, step, rec.components, now_ms() - t0);
        records.push_back(std::move(rec));
        if (cfg_.checkpoint_every > 0 && step % cfg_.checkpoint_every == 0 &&
            step != cfg_.steps.train_solnet)
            save_stage_checkpoint(stage, step, &opt);
    }
    save_stage_checkpoint(stage, cfg_.steps.train_solnet, &opt);
    return records;
}

std::vector<StageLossRecord> Trainer::train_sosnet_adversarial(MaskStream* record) {
    return sos_stage_impl(cfg_.sos_use_aae, record);
}

std::vector<StageLossRecord> Trainer::train_sosnet_plain(MaskStream* record) {
    return sos_stage_impl(false, record);
}

std::vector<StageLossRecord> Trainer::sos_stage_impl(bool use_aae, MaskStream* record) {
    const std::string stage = "train_sosnet_adversarial";
    StageLogWriter log(stage_dir(stage));
    Adam opt_g({cfg_.lr});
    Adam opt_d({cfg_.lr});
    auto params = pipe_->all_params();
    const std::int64_t start = maybe_resume(latest_step_dir(stage), params, opt_g);
    auto& snet = *pipe_->snet;
    auto& sol = *pipe_->sol;
    auto& aae = *pipe_->aae;
    const auto& small_ids = pipe_->small_ids;
    if (record) record->group_size = small_ids.size();

    LossWeights sos_w = loss_;
    sos_w.alpha = {1.0, 1.0};
    const bool shape_on = use_aae && loss_.lambda1 > 0.0;

    std::int64_t g_steps = 0, d_steps = 0;
    std::vector<StageLossRecord> records;

    for (std::int64_t step = start + 1; step <= cfg_.steps.train_sosnet_adversarial; ++step) {
        const double t0 = now_ms();
        const ChunkSample s = sample_chunk(kStreamSos, step, true);
        const Tensor x = to_image_tensor(s.image, data_.manifest().gen.background);

        FreezeGuard freeze_backbone(std::vector<Tensor>(snet.params().params()));
        FreezeGuard freeze_sol(std::vector<Tensor>(sol.params().params()));
        const SegOutputs seg = snet.forward(x);
        const Tensor heat = sol.forward(seg.decoder_features);

        Rng tf_rng(mix_seed(cfg_.seed, kStreamSos, static_cast<std::uint64_t>(step),
                            kStreamTeacherForcing));

        // --- G step: SOS weights only (AAE frozen while the shape loss flows)
        std::vector<Tensor> preds(small_ids.size());
        std::vector<Tensor> gts(small_ids.size());
        std::vector<bool> organ_ok(small_ids.size(), false);
        Tensor seg_sum, shape_sum;
        {
            FreezeGuard freeze_aae(std::vector<Tensor>(aae.params().params()));
            for (std::size_t k = 0; k < small_ids.size(); ++k) {
                const int cid = small_ids[k];
                const bool use_gt = tf_rng.uniform() < cfg_.teacher_forcing;
                Vec3i center;
                const auto it = s.small_centroids_voxel.find(cid);
                if (use_gt && it != s.small_centroids_voxel.end()) {
                    center = {std::llround(it->second[0]), std::llround(it->second[1]),
                              std::llround(it->second[2])};
                } else {
                    Volume h(s.labels.shape, s.labels.spacing);
                    std::memcpy(h.data.data(),
                                heat.data() +
                                    static_cast<std::int64_t>(k) * numel(s.labels.shape),
                                h.data.size() * sizeof(double));
                    center = find_peak(h);
                }
                const RoiBox box = roi_box(center, cfg_.roi_size, s.labels.shape);
                const std::array<std::int64_t, 3> st{box.start[0], box.start[1], box.start[2]};
                const std::array<std::int64_t, 3> sz{box.size[0], box.size[1], box.size[2]};
                const Tensor sos_in =
                    concat_channels({crop3d(seg.decoder_features, st, sz), crop3d(x, st, sz)});
                preds[k] = pipe_->sos[k]->forward(sos_in);
                gts[k] = binary_mask_tensor(roi_pool(s.labels, box), cid);
                organ_ok[k] = true;

                const Tensor seg_k =
                    seg_loss(binary_probs(preds[k]), onehot2_of_mask(gts[k]), sos_w);
                seg_sum = seg_sum.defined() ? add(seg_sum, seg_k) : seg_k;
                if (shape_on) {
                    const AaeOutputs a_gt = aae.forward(gts[k]);
                    const AaeOutputs a_pred = aae.forward(preds[k]);
                    const Tensor sh = shape_loss(latent_bundle(a_gt), latent_bundle(a_pred));
                    shape_sum = shape_sum.defined() ? add(shape_sum, sh) : sh;
                }
                if (record) {
                    MaskStream::Item item;
                    item.gt = gts[k].values();
                    item.pred = preds[k].values();
                    item.size = box.size;
                    record->items.push_back(std::move(item));
                }
            }
            if (!seg_sum.defined())
                throw TrainingFailure(stage, step, "no small organ present in sampled chunk");
            const Tensor g_loss =
                shape_on ? generator_objective(seg_sum, shape_sum, loss_) : seg_sum;
            check_loss_finite(g_loss.item(), stage, step);
            auto sos_params = pipe_->sos_params();
            opt_g.zero_grad(sos_params);
            backward(g_loss);
            opt_g.step(sos_params);
            ++g_steps;

            StageLossRecord rec{step,
                                {{"g_loss", g_loss.item()},
                                 {"seg", seg_sum.item()},
                                 {"shape", shape_on ? shape_sum.item() : 0.0}}};
            records.push_back(std::move(rec));
        }

        // --- D step: AAE weights only, predictions detached; strict 1:1
        if (use_aae) {
            FreezeGuard freeze_sos(pipe_->sos_params());
            Tensor recon_sum, shape_sum2;
            for (std::size_t k = 0; k < small_ids.size(); ++k) {
                if (!organ_ok[k]) continue;
                const Tensor pred_const = detach(preds[k]);
                const AaeOutputs a_gt = aae.forward(gts[k]);
                const AaeOutputs a_pred = aae.forward(pred_const);
                const Tensor rec_k =
                    recon_loss(a_gt.reconstruction, gts[k], a_pred.reconstruction, pred_const);
                recon_sum = recon_sum.defined() ? add(recon_sum, rec_k) : rec_k;
                if (loss_.lambda2 > 0.0) {
                    const Tensor sh = shape_loss(latent_bundle(a_gt), latent_bundle(a_pred));
                    shape_sum2 = shape_sum2.defined() ? add(shape_sum2, sh) : sh;
                }
            }
            if (recon_sum.defined()) {
                const Tensor d_loss = loss_.lambda2 > 0.0
                                          ? discriminator_objective(recon_sum, shape_sum2, loss_)
                                          : recon_sum;
                check_loss_finite(d_loss.item(), stage, step);
                auto aae_params = std::vector<Tensor>(aae.params().params());
                opt_d.zero_grad(aae_params);
                backward(d_loss);
                opt_d.step(aae_params);
                ++d_steps;
                records.back().components["d_loss"] = d_loss.item();
                records.back().components["recon"] = recon_sum.item();
            }
        }
        if (use_aae && std::llabs(g_steps - d_steps) > 1)
            throw TrainingFailure(stage, step, "alternation audit failed");

        log.write(stage, step, records.back().components, now_ms() - t0);
        if (cfg_.checkpoint_every > 0 && step % cfg_.checkpoint_every == 0 &&
            step != cfg_.steps.train_sosnet_adversarial)
            save_stage_checkpoint(stage, step, &opt_g);
    }
    save_stage_checkpoint(stage, cfg_.steps.train_sosnet_adversarial, &opt_g);
    return records;
}

std::vector<StageLossRecord> Trainer::finetune_all() {
    const std::string stage = "finetune_all";
    StageLogWriter log(stage_dir(stage));
    Adam opt({cfg_.lr});
    auto params = pipe_->all_params();
    const std::int64_t start = maybe_resume(latest_step_dir(stage), params, opt);
    auto& snet = *pipe_->snet;
    auto& sol = *pipe_->sol;
    auto& aae = *pipe_->aae;
    const auto& small_ids = pipe_->small_ids;

    std::vector<int> ids_by_index{0};
    for (const auto& o : data_.manifest().roster) ids_by_index.push_back(o.class_id);
    LossWeights sos_w = loss_;
    sos_w.alpha = {1.0, 1.0};
    const bool shape_on = cfg_.sos_use_aae && cfg_.finetune_include_shape && loss_.lambda1 > 0.0;

    // regression guard baseline
    const double pre_dsc = heldout_mean_dsc_all();
    std::vector<std::vector<double>> snapshot;
    for (const auto& p : params) snapshot.push_back(p.values());

    std::vector<StageLossRecord> records;
    for (std::int64_t step = start + 1; step <= cfg_.steps.finetune_all; ++step) {
        const double t0 = now_ms();
        const ChunkSample s = sample_chunk(kStreamFinetune, step, true);
        const Tensor x = to_image_tensor(s.image, data_.manifest().gen.background);
        const Tensor y = onehot_tensor(s.labels, ids_by_index);

        FreezeGuard freeze_aae(std::vector<Tensor>(aae.params().params()));
        const SegOutputs seg = snet.forward(x);
        Tensor total = seg_loss(seg.probs, y, loss_);

        const Tensor heat = sol.forward(seg.decoder_features);
        const Vec3i cs = s.labels.shape;
        std::vector<double> target(
            static_cast<std::size_t>(static_cast<std::int64_t>(small_ids.size()) * numel(cs)),
            0.0);
        for (std::size_t k = 0; k < small_ids.size(); ++k) {
            const auto it = s.small_centroids_voxel.find(small_ids[k]);
            if (it == s.small_centroids_voxel.end()) continue;
            const Volume h = make_heatmap(it->second, cs, s.labels.spacing, cfg_.sigma_voxels);
            std::memcpy(target.data() + static_cast<std::int64_t>(k) * numel(cs), h.data.data(),
                        static_cast<std::size_t>(numel(cs)) * sizeof(double));
        }
        total = add(total,
                    mse_loss(heat, Tensor::from_values(
                                       {static_cast<std::int64_t>(small_ids.size()), cs[0],
                                        cs[1], cs[2]},
                                       std::move(target))));

        Rng tf_rng(mix_seed(cfg_.seed, kStreamFinetune, static_cast<std::uint64_t>(step),
                            kStreamTeacherForcing));
        for (std::size_t k = 0; k < small_ids.size(); ++k) {
            const int cid = small_ids[k];
            const auto it = s.small_centroids_voxel.find(cid);
            if (it == s.small_centroids_voxel.end()) continue;
            const bool use_gt = tf_rng.uniform() < cfg_.teacher_forcing;
            Vec3i center;
            if (use_gt) {
                center = {std::llround(it->second[0]), std::llround(it->second[1]),
                          std::llround(it->second[2])};
            } else {
                Volume h(cs, s.labels.spacing);
                std::memcpy(h.data.data(),
                            heat.data() + static_cast<std::int64_t>(k) * numel(cs),
                            h.data.size() * sizeof(double));
                center = find_peak(h);
            }
            const RoiBox box = roi_box(center, cfg_.roi_size, cs);
            const std::array<std::int64_t, 3> st{box.start[0], box.start[1], box.start[2]};
            const std::array<std::int64_t, 3> sz{box.size[0], box.size[1], box.size[2]};
            const Tensor sos_in =
                concat_channels({crop3d(seg.decoder_features, st, sz), crop3d(x, st, sz)});
            const Tensor pred = pipe_->sos[k]->forward(sos_in);
            const Tensor gt = binary_mask_tensor(roi_pool(s.labels, box), cid);
            total = add(total, seg_loss(binary_probs(pred), onehot2_of_mask(gt), sos_w));
            if (shape_on) {
                const Tensor sh = shape_loss(latent_bundle(aae.forward(gt)),
                                             latent_bundle(aae.forward(pred)));
                total = add(total, scalar_mul(sh, loss_.lambda1));
            }
        }

        check_loss_finite(total.item(), stage, step);
        auto seg_params = pipe_->seg_params();
        opt.zero_grad(seg_params);
        backward(total);
        opt.step(seg_params);

        StageLossRecord rec{step, {{"joint", total.item()}}};
        log.write(stage, step, rec.components, now_ms() - t0);
        records.push_back(std::move(rec));
    }

    const double post_dsc = heldout_mean_dsc_all();
    if (post_dsc < pre_dsc - 0.02) {
        std::cerr << "warning: finetune_all held-out mean DSC regressed from " << pre_dsc
                  << " to " << post_dsc << "; keeping pre-finetune weights\n";
        for (std::size_t i = 0; i < params.size(); ++i) params[i].values() = snapshot[i];
        log.write(stage, cfg_.steps.finetune_all,
                  {{"regression_guard_fired", 1.0}, {"pre_dsc", pre_dsc}, {"post_dsc", post_dsc}},
                  0.0);
    } else {
        log.write(stage, cfg_.steps.finetune_all,
                  {{"regression_guard_fired", 0.0}, {"pre_dsc", pre_dsc}, {"post_dsc", post_dsc}},
                  0.0);
    }
    save_stage_checkpoint(stage, cfg_.steps.finetune_all, &opt);
    return records;
}

void Trainer::run_stage(const std::string& stage, bool resume) {
    const std::int64_t idx = stage_index(stage);
    for (std::int64_t j = 0; j < idx; ++j) {
        if (!latest_step_dir(kStageOrder[j]))
            throw PipelineOrderError("stage '" + stage + "' requires a checkpoint from stage '" +
                                     std::string(kStageOrder[j]) + "'");
    }
    const auto own = latest_step_dir(stage);
    if (own && !resume) {
        std::error_code ec;
        fs::remove_all(stage_dir(stage), ec);
    }
    if (!latest_step_dir(stage) && idx > 0)
        load_stage_checkpoint(*latest_step_dir(kStageOrder[idx - 1]));

    if (stage == "pretrain_aae") pretrain_aae();
    else if (stage == "train_snet") train_snet();
    else if (stage == "train_solnet") train_solnet();
    else if (stage == "train_sosnet_adversarial") train_sosnet_adversarial();
    else finetune_all();
}

void Trainer::run_all() {
    pretrain_aae();
    train_snet();
    train_solnet();
    train_sosnet_adversarial();
    finetune_all();
}

PredictResult Trainer::predict(const Volume& image, const PredictOptions& opts) const {
    FreezeGuard freeze(pipe_->all_params());
    const auto& manifest = data_.manifest();
    const auto& small_ids = pipe_->small_ids;
    auto& snet = *pipe_->snet;
    auto& sol = *pipe_->sol;

    const std::int64_t Z = image.shape[0], Y = image.shape[1], X = image.shape[2];
    std::int64_t chunk = opts.chunk_override > 0 ? opts.chunk_override : cfg_.chunk;
    chunk = std::min(chunk, Z);
    if (chunk % 2 != 0)
        throw std::invalid_argument("predict: chunk z extent " + std::to_string(chunk) +
                                    " not divisible by 2");
    if (Y % 4 != 0 || X % 4 != 0)
        throw std::invalid_argument("predict: in-plane extents must be divisible by 4");

    const std::int64_t C = data_.num_classes();
    const std::int64_t ns = static_cast<std::int64_t>(small_ids.size());
    const std::int64_t w1 = snet.feature_channels();
    const std::int64_t plane = Y * X;
    std::vector<double> probs(static_cast<std::size_t>(C * Z * plane));
    std::vector<double> feats(static_cast<std::size_t>(w1 * Z * plane));
    std::vector<double> heat(static_cast<std::size_t>(ns * Z * plane));

    const Chunked<Volume> chunks = chunk_z(image, chunk, chunk);
    for (std::size_t i = 0; i < chunks.chunks.size(); ++i) {
        const Tensor x = to_image_tensor(chunks.chunks[i], manifest.gen.background);
        const SegOutputs seg = snet.forward(x);
        const Tensor h = sol.forward(seg.decoder_features);
        const ZRange r = chunks.ranges[i];
        const std::int64_t zlen = r.z1 - r.z0;
        const std::int64_t cz = chunks.chunks[i].shape[0];
        for (std::int64_t c = 0; c < C; ++c)
            std::memcpy(probs.data() + (c * Z + r.z0) * plane, seg.probs.data() + c * cz * plane,
                        static_cast<std::size_t>(zlen * plane) * sizeof(double));
        for (std::int64_t c = 0; c < w1; ++c)
            std::memcpy(feats.data() + (c * Z + r.z0) * plane,
                        seg.decoder_features.data() + c * cz * plane,
                        static_cast<std::size_t>(zlen * plane) * sizeof(double));
        for (std::int64_t c = 0; c < ns; ++c)
            std::memcpy(heat.data() + (c * Z + r.z0) * plane, h.data() + c * cz * plane,
                        static_cast<std::size_t>(zlen * plane) * sizeof(double));
    }

    PredictResult result;
    result.labels = LabelMap(image.shape, image.spacing, 0, image.origin);
    std::vector<int> ids_by_index{0};
    for (const auto& o : manifest.roster) ids_by_index.push_back(o.class_id);
    for (std::int64_t i = 0; i < Z * plane; ++i) {
        std::int64_t best_c = 0;
        double best = probs[static_cast<std::size_t>(i)];
        for (std::int64_t c = 1; c < C; ++c) {
            const double v = probs[static_cast<std::size_t>(c * Z * plane + i)];
            if (v > best) {
                best = v;
                best_c = c;
            }
        }
        result.labels.data[static_cast<std::size_t>(i)] =
            static_cast<std::uint16_t>(ids_by_index[static_cast<std::size_t>(best_c)]);
    }

    for (std::int64_t k = 0; k < ns; ++k) {
        Volume h(image.shape, image.spacing, 0.0, image.origin);
        std::memcpy(h.data.data(), heat.data() + k * Z * plane,
                    static_cast<std::size_t>(Z * plane) * sizeof(double));
        const Vec3i peak = find_peak(h);
        result.sol_centroids_mm[small_ids[static_cast<std::size_t>(k)]] =
            h.to_mm({static_cast<double>(peak[0]), static_cast<double>(peak[1]),
                     static_cast<double>(peak[2])});
        result.heatmaps.push_back(std::move(h));
    }

    if (opts.use_small_branch) {
        Rng jitter_rng(mix_seed(opts.jitter_seed, 0x6a69ull));
        for (std::int64_t k = 0; k < ns; ++k) {
            const int cid = small_ids[static_cast<std::size_t>(k)];
            Vec3d center_mm;
            if (opts.centers == PredictOptions::Centers::sol_peaks) {
                center_mm = result.sol_centroids_mm.at(cid);
            } else {
                if (!opts.gt_centroids_mm || !opts.gt_centroids_mm->count(cid))
                    throw std::invalid_argument("predict: gt centroid missing for class " +
                                                std::to_string(cid));
                center_mm = opts.gt_centroids_mm->at(cid);
                if (opts.centers == PredictOptions::Centers::jittered_gt)
                    center_mm = jitter_centroid(center_mm, opts.jitter_mm, jitter_rng, image);
            }
            const Vec3d cv = image.to_voxel(center_mm);
            const Vec3i center{std::llround(cv[0]), std::llround(cv[1]), std::llround(cv[2])};
            const RoiBox box = roi_box(center, cfg_.roi_size, image.shape);

            // assemble SOS input from the stitched features + raw image
            const std::int64_t rz = box.size[0], ry = box.size[1], rx = box.size[2];
            std::vector<double> in_vals(static_cast<std::size_t>((w1 + 1) * rz * ry * rx));
            for (std::int64_t c = 0; c < w1; ++c)
                for (std::int64_t z = 0; z < rz; ++z)
                    for (std::int64_t y = 0; y < ry; ++y) {
                        const double* src =
                            feats.data() +
                            ((c * Z + box.start[0] + z) * Y + box.start[1] + y) * X +
                            box.start[2];
                        std::memcpy(in_vals.data() + ((c * rz + z) * ry + y) * rx, src,
                                    static_cast<std::size_t>(rx) * sizeof(double));
                    }
            const double inv = 1.0 / kIntensityScale;
            for (std::int64_t z = 0; z < rz; ++z)
                for (std::int64_t y = 0; y < ry; ++y)
                    for (std::int64_t xx = 0; xx < rx; ++xx)
                        in_vals[static_cast<std::size_t>(((w1 * rz + z) * ry + y) * rx + xx)] =
                            (image.at(box.start[0] + z, box.start[1] + y, box.start[2] + xx) -
                             manifest.gen.background) *
                            inv;
            const Tensor sos_in = Tensor::from_values({w1 + 1, rz, ry, rx}, std::move(in_vals));
            const Tensor pred = pipe_->sos[static_cast<std::size_t>(k)]->forward(sos_in);

            SmallOrganPrediction sp;
            sp.class_id = cid;
            sp.box = box;
            sp.mask = Volume(box.size, image.spacing, 0.0,
                             image.to_mm({static_cast<double>(box.start[0]),
                                          static_cast<double>(box.start[1]),
                                          static_cast<double>(box.start[2])}));
            std::memcpy(sp.mask.data.data(), pred.data(), sp.mask.data.size() * sizeof(double));
            result.small_preds.push_back(std::move(sp));
        }
        std::vector<int> roster_ids;
        for (const auto& o : manifest.roster) roster_ids.push_back(o.class_id);
        result.labels = overlay(result.labels, result.small_preds, roster_ids, opts.threshold);
    }
    return result;
}

MetricReport Trainer::evaluate_test_split(const PredictOptions& opts) const {
    if (data_.test_count() == 0) throw ConfigError("evaluate: empty test split");
    std::vector<CaseMetrics> cases;
    std::map<int, Vec3d> sol_all, gt_all;
    int tag = 0;
    for (std::size_t i = 0; i < data_.test_count(); ++i) {
        const CaseRecord& rec = data_.test_case(i);
        PredictOptions o = opts;
        o.gt_centroids_mm = &rec.centroids_mm;
        o.jitter_seed = mix_seed(opts.jitter_seed, i);
        const PredictResult pr = predict(rec.image, o);
        CaseMetrics cm = evaluate_case(pr.labels, rec.labels, rec.roster);
        cm.case_id = rec.case_id;
        cases.push_back(std::move(cm));
        for (const auto& [cid, c] : pr.sol_centroids_mm) {
            sol_all[tag] = c;
            gt_all[tag] = rec.centroids_mm.at(cid);
            ++tag;
        }
    }
    MetricReport rep = aggregate_metrics(cases, data_.manifest().roster);
    if (!gt_all.empty()) rep.localization = localization_stats(sol_all, gt_all, {3.0, 4.0, 5.0});
    return rep;
}

RobustnessTable Trainer::robustness_sweep(const std::vector<double>& distances,
                                          std::uint64_t sweep_seed) const {
    RobustnessTable table;
    {
        PredictOptions o;
        o.centers = PredictOptions::Centers::sol_peaks;
        table.sol_small_dsc = evaluate_test_split(o).mean_dsc_small;
    }
    for (std::size_t di = 0; di < distances.size(); ++di) {
        PredictOptions o;
        o.centers = distances[di] == 0.0 ? PredictOptions::Centers::gt_centroids
                                         : PredictOptions::Centers::jittered_gt;
        o.jitter_mm = distances[di];
        o.jitter_seed = mix_seed(sweep_seed, 1000 + di);
        table.rows.push_back({distances[di], evaluate_test_split(o).mean_dsc_small});
    }
    return table;
}

double Trainer::aae_heldout_recon_dsc() const {
    FreezeGuard freeze(pipe_->all_params());
    auto& aae = *pipe_->aae;
    double sum = 0.0;
    std::int64_t n = 0;
    for (std::size_t i = 0; i < data_.test_count(); ++i) {
        const CaseRecord& rec = data_.test_case(i);
        for (int cid : pipe_->small_ids) {
            const Vec3d cv = rec.labels.to_voxel(rec.centroids_mm.at(cid));
            const Vec3i center{std::llround(cv[0]), std::llround(cv[1]), std::llround(cv[2])};
            const RoiBox box = roi_box(center, cfg_.roi_size, rec.labels.shape);
            const LabelMap roi_lab = roi_pool(rec.labels, box);
            const Tensor mask = binary_mask_tensor(roi_lab, cid);
            const AaeOutputs out = aae.forward(mask);
            Mask mp, mg;
            mp.shape = box.size;
            mg.shape = box.size;
            mp.data.resize(mask.values().size());
            mg.data.resize(mask.values().size());
            for (std::size_t j = 0; j < mask.values().size(); ++j) {
                mp.data[j] = out.reconstruction.values()[j] >= 0.5 ? 1 : 0;
                mg.data[j] = mask.values()[j] >= 0.5 ? 1 : 0;
            }
            sum += dsc(mp, mg);
            ++n;
        }
    }
    return n ? sum / static_cast<double>(n) : 0.0;
}

double Trainer::heldout_mean_dsc_all() const {
    return evaluate_test_split({}).mean_dsc_all;
}

std::vector<double> train_aae_on_stream(Aae& aae, const MaskStream& stream, double lr) {
    Adam opt({lr});
    std::vector<double> losses;
    auto aae_params = std::vector<Tensor>(aae.params().params());
    std::size_t i = 0;
    while (i < stream.items.size()) {
        const std::size_t group_end = std::min(i + stream.group_size, stream.items.size());
        Tensor total;
        for (std::size_t j = i; j < group_end; ++j) {
            const auto& item = stream.items[j];
            const Shape shape{1, item.size[0], item.size[1], item.size[2]};
            const Tensor gt = Tensor::from_values(shape, item.gt);
            const Tensor pred = Tensor::from_values(shape, item.pred);
            const AaeOutputs a_gt = aae.forward(gt);
            const AaeOutputs a_pred = aae.forward(pred);
            const Tensor rec = recon_loss(a_gt.reconstruction, gt, a_pred.reconstruction, pred);
            total = total.defined() ? add(total, rec) : rec;
        }
        opt.zero_grad(aae_params);
        backward(total);
        opt.step(aae_params);
        losses.push_back(total.item());
        i = group_end;
    }
    return losses;
}

}  // namespace organseg
