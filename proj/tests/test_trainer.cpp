#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "organseg/errors.hpp"
#include "organseg/trainer.hpp"

using namespace organseg;
namespace fs = std::filesystem;

namespace {

// miniature dataset sized for fast behavioral tests
std::vector<OrganSpec> mini_roster() {
    std::vector<OrganSpec> r(3);
    r[0] = {1, "blob", ShapeKind::ellipsoid, SizeClass::large,
            {8.0, 10.0, 10.0}, 30.0, 0.0, {0.40, 0.28, 0.30}, {0.60, 0.38, 0.42}, 40.0};
    r[1] = {2, "pea", ShapeKind::ellipsoid, SizeClass::small,
            {3.0, 3.5, 3.5}, 14.0, 0.0, {0.40, 0.62, 0.25}, {0.55, 0.72, 0.40}, 40.0};
    r[2] = {3, "star", ShapeKind::x_cross, SizeClass::small,
            {2.5, 5.0, 1.8}, 14.0, 0.0, {0.40, 0.62, 0.60}, {0.55, 0.72, 0.75}, 40.0};
    return r;
}

const fs::path& mini_dataset() {
    static fs::path root = [] {
        const fs::path dir = fs::temp_directory_path() / "organseg_trainer_ds";
        fs::remove_all(dir);
        GeneratorConfig cfg;
        cfg.shape = {16, 48, 48};
        cfg.spacing = {3.0, 1.0, 1.0};
        cfg.noise_sd = 6.0;
        cfg.bias_amplitude = 3.0;
        cfg.imbalance_target = 10.0;
        cfg.roi_size = {8, 16, 16};
        generate_dataset(dir, mini_roster(), cfg, 2024, 3, 2);
        return dir;
    }();
    return root;
}

TrainConfig mini_config(const fs::path& out_dir, std::uint64_t seed = 5) {
    TrainConfig cfg;
    cfg.dataset_root = mini_dataset();
    cfg.out_dir = out_dir;
    cfg.width_multiplier = 0.125;
    cfg.roi_size = {8, 16, 16};
    cfg.chunk = 8;
    cfg.seed = seed;
    cfg.steps = {2, 3, 2, 2, 1};
    cfg.augment.max_translation = {0.0, 4.0, 4.0};
    return cfg;
}

std::vector<std::vector<double>> snapshot_params(const Pipeline& p) {
    std::vector<std::vector<double>> out;
    for (const auto& t : p.all_params()) out.push_back(t.values());
    return out;
}

std::string read_file(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    REQUIRE(f.good());
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

// one longer shared run for tests that need a genuinely trained state
const fs::path& trained_run() {
    static fs::path out = [] {
        const fs::path dir = fs::temp_directory_path() / "organseg_tr_shared";
        fs::remove_all(dir);
        TrainConfig cfg = mini_config(dir, 5);
        cfg.steps = {2, 120, 10, 2, 1};
        Trainer tr(cfg);
        tr.pretrain_aae();
        tr.train_snet();
        tr.train_solnet();
        tr.train_sosnet_adversarial();
        return dir;
    }();
    return out;
}

}  // namespace

TEST_SUITE("trainer") {

TEST_CASE("zero-step stage leaves weights at initialization") {
    const fs::path out = fs::temp_directory_path() / "organseg_tr_zero";
    fs::remove_all(out);
    TrainConfig cfg = mini_config(out);
    cfg.steps.pretrain_aae = 0;
    Trainer tr(cfg);
    const auto before = snapshot_params(tr.pipeline());
    tr.pretrain_aae();
    const auto after = snapshot_params(tr.pipeline());
    CHECK(before == after);
    CHECK(tr.latest_step_dir("pretrain_aae").has_value());
    fs::remove_all(out);
}

TEST_CASE("training is run-to-run deterministic under a fixed seed") {
    const fs::path out1 = fs::temp_directory_path() / "organseg_tr_det1";
    const fs::path out2 = fs::temp_directory_path() / "organseg_tr_det2";
    fs::remove_all(out1);
    fs::remove_all(out2);

    Trainer a(mini_config(out1));
    Trainer b(mini_config(out2));
    const auto la = a.train_snet();
    const auto lb = b.train_snet();
    REQUIRE(la.size() == lb.size());
    for (std::size_t i = 0; i < la.size(); ++i)
        CHECK(la[i].components.at("seg") == lb[i].components.at("seg"));
    CHECK(snapshot_params(a.pipeline()) == snapshot_params(b.pipeline()));
    fs::remove_all(out1);
    fs::remove_all(out2);
}

TEST_CASE("solnet training freezes the backbone bitwise") {
    const fs::path out = fs::temp_directory_path() / "organseg_tr_freeze";
    fs::remove_all(out);
    Trainer tr(mini_config(out));
    tr.train_snet();
    for (auto& p : tr.pipeline().snet->params().params()) p.zero_grad();
    std::vector<std::vector<double>> snet_before;
    for (const auto& p : tr.pipeline().snet->params().params()) snet_before.push_back(p.values());
    tr.train_solnet();
    std::vector<std::vector<double>> snet_after;
    for (const auto& p : tr.pipeline().snet->params().params()) snet_after.push_back(p.values());
    CHECK(snet_before == snet_after);
    // frozen parameters never accumulated a gradient
    for (const auto& p : tr.pipeline().snet->params().params()) CHECK_FALSE(p.has_grad());
    fs::remove_all(out);
}

TEST_CASE("adversarial stage freezes backbone and keeps strict alternation") {
    const fs::path out = fs::temp_directory_path() / "organseg_tr_adv";
    fs::remove_all(out);
    Trainer tr(mini_config(out));
    tr.pretrain_aae();
    tr.train_snet();
    tr.train_solnet();
    std::vector<std::vector<double>> frozen_before;
    for (const auto& p : tr.pipeline().snet->params().params()) frozen_before.push_back(p.values());
    for (const auto& p : tr.pipeline().sol->params().params()) frozen_before.push_back(p.values());

    const auto records = tr.train_sosnet_adversarial();
    REQUIRE_FALSE(records.empty());
    for (const auto& rec : records) {
        CHECK(rec.components.count("g_loss") == 1);
        CHECK(rec.components.count("d_loss") == 1);  // 1:1 alternation
    }

    std::vector<std::vector<double>> frozen_after;
    for (const auto& p : tr.pipeline().snet->params().params()) frozen_after.push_back(p.values());
    for (const auto& p : tr.pipeline().sol->params().params()) frozen_after.push_back(p.values());
    CHECK(frozen_before == frozen_after);
    fs::remove_all(out);
}

TEST_CASE("checkpoint save-load-save produces identical bytes") {
    const fs::path out = fs::temp_directory_path() / "organseg_tr_ckpt";
    fs::remove_all(out);
    TrainConfig cfg = mini_config(out);
    cfg.steps.train_snet = 2;
    Trainer tr(cfg);
    tr.train_snet();
    const fs::path step_dir = *tr.latest_step_dir("train_snet");
    const std::string bytes1 = read_file(step_dir / "weights.bin");

    // load into a fresh trainer and save again
    const fs::path out2 = fs::temp_directory_path() / "organseg_tr_ckpt2";
    fs::remove_all(out2);
    Trainer tr2(mini_config(out2));
    tr2.load_stage_checkpoint(step_dir);
    auto params = tr2.pipeline().all_params();
    CheckpointMeta meta;
    meta.stage = "train_snet";
    meta.step = 2;
    save_checkpoint(out2 / "resaved", params, nullptr, meta);
    const auto saved = load_weights(out2 / "resaved" / "weights.bin");
    const auto orig = load_weights(step_dir / "weights.bin");
    for (const auto& [name, t] : saved) {
        if (name.rfind("adam.", 0) == 0) continue;
        REQUIRE(orig.count(name) == 1);
        CHECK(orig.at(name).second == t.second);
    }
    fs::remove_all(out);
    fs::remove_all(out2);
}

TEST_CASE("run_stage enforces the stage order") {
    const fs::path out = fs::temp_directory_path() / "organseg_tr_order";
    fs::remove_all(out);
    Trainer tr(mini_config(out));
    CHECK_THROWS_AS(tr.run_stage("train_solnet"), PipelineOrderError);
    CHECK_THROWS_AS(tr.run_stage("bogus"), ConfigError);
    fs::remove_all(out);
}

TEST_CASE("resumed stage reproduces an uninterrupted run exactly") {
    const fs::path out1 = fs::temp_directory_path() / "organseg_tr_res1";
    const fs::path out2 = fs::temp_directory_path() / "organseg_tr_res2";
    fs::remove_all(out1);
    fs::remove_all(out2);

    TrainConfig straight = mini_config(out1);
    straight.steps.train_snet = 4;
    Trainer a(straight);
    a.train_snet();

    TrainConfig half = mini_config(out2);
    half.steps.train_snet = 2;
    {
        Trainer b(half);
        b.train_snet();
    }
    TrainConfig full = mini_config(out2);
    full.steps.train_snet = 4;
    Trainer c(full);
    c.train_snet();  // resumes from step 2 inside the same out_dir

    const auto wa = load_weights(*a.latest_step_dir("train_snet") / "weights.bin");
    const auto wc = load_weights(*c.latest_step_dir("train_snet") / "weights.bin");
    REQUIRE(wa.size() == wc.size());
    for (const auto& [name, t] : wa) CHECK(wc.at(name).second == t.second);
    // step numbering continued from the checkpoint
    CHECK(c.latest_step_dir("train_snet")->filename().string() == "step_4");
    fs::remove_all(out1);
    fs::remove_all(out2);
}

TEST_CASE("predict is deterministic, labels stay in the roster, chunking is validated") {
    const fs::path out = fs::temp_directory_path() / "organseg_tr_pred";
    fs::remove_all(out);
    Trainer tr(mini_config(out));
    tr.train_snet();
    tr.train_solnet();

    const CaseRecord& rec = tr.dataset().test_case(0);
    const PredictResult p1 = tr.predict(rec.image);
    const PredictResult p2 = tr.predict(rec.image);
    CHECK(p1.labels.data == p2.labels.data);
    for (auto v : p1.labels.data) CHECK((v == 0 || v == 1 || v == 2 || v == 3));
    CHECK(p1.heatmaps.size() == 2);
    CHECK(p1.small_preds.size() == 2);

    Volume bad({15, 48, 48}, {3, 1, 1});
    PredictOptions opts;
    opts.chunk_override = 15;
    CHECK_THROWS_AS(tr.predict(bad, opts), std::invalid_argument);
    fs::remove_all(out);
}

TEST_CASE("finetune regression guard fires on a destructive learning rate") {
    const fs::path out = fs::temp_directory_path() / "organseg_tr_guard";
    fs::remove_all(out);

    // adversarially misconfigured finetune: lr 1.0 wrecks a trained network
    TrainConfig bad = mini_config(out);
    bad.steps = {2, 120, 10, 2, 4};
    bad.lr = 1.0;
    Trainer tr2(bad);
    tr2.load_stage_checkpoint(trained_run() / "stage_train_sosnet_adversarial");
    const auto before = snapshot_params(tr2.pipeline());
    tr2.finetune_all();
    // guard restored the pre-finetune weights
    CHECK(snapshot_params(tr2.pipeline()) == before);
    fs::remove_all(out);
}

TEST_CASE("degenerate lambdas make the adversarial stage match decoupled runs") {
    // mini version of the decoupled-run oracle
    const fs::path out1 = fs::temp_directory_path() / "organseg_tr_deg1";
    const fs::path out2 = fs::temp_directory_path() / "organseg_tr_deg2";
    fs::remove_all(out1);
    fs::remove_all(out2);

    TrainConfig cfg = mini_config(out1);
    cfg.steps = {1, 2, 1, 3, 1};
    cfg.loss.lambda1 = 0.0;
    cfg.loss.lambda2 = 0.0;
    Trainer adv(cfg);
    adv.pretrain_aae();
    adv.train_snet();
    adv.train_solnet();

    TrainConfig cfg2 = cfg;
    cfg2.out_dir = out2;
    Trainer plain(cfg2);
    plain.load_stage_checkpoint(*adv.latest_step_dir("train_solnet"));

    MaskStream stream_adv, stream_plain;
    const auto radv = adv.train_sosnet_adversarial(&stream_adv);
    const auto rplain = plain.train_sosnet_plain(&stream_plain);

    REQUIRE(radv.size() == rplain.size());
    for (std::size_t i = 0; i < radv.size(); ++i)
        CHECK(radv[i].components.at("g_loss") ==
              doctest::Approx(rplain[i].components.at("g_loss")).epsilon(1e-14));

    // identical data streams step for step
    REQUIRE(stream_adv.items.size() == stream_plain.items.size());
    for (std::size_t i = 0; i < stream_adv.items.size(); ++i) {
        CHECK(stream_adv.items[i].gt == stream_plain.items[i].gt);
        CHECK(stream_adv.items[i].pred == stream_plain.items[i].pred);
    }

    // the adversarial D losses match an AAE trained on the recorded stream
    TrainConfig cfg3 = cfg;
    cfg3.out_dir = out2 / "aae_replay";
    Trainer replay(cfg3);
    // the adversarial run entered the stage with the pretrained AAE state
    replay.load_stage_checkpoint(*adv.latest_step_dir("train_solnet"));
    std::vector<double> d_losses;
    for (const auto& r : radv) d_losses.push_back(r.components.at("d_loss"));
    const std::vector<double> replayed =
        train_aae_on_stream(*replay.pipeline().aae, stream_plain, cfg.lr);
    REQUIRE(replayed.size() == d_losses.size());
    for (std::size_t i = 0; i < replayed.size(); ++i)
        CHECK(replayed[i] == doctest::Approx(d_losses[i]).epsilon(1e-10));

    fs::remove_all(out1);
    fs::remove_all(out2);
}

TEST_CASE("aae pretraining reconstruction improves and its loss trends down") {
    const fs::path out = fs::temp_directory_path() / "organseg_tr_aae";
    fs::remove_all(out);
    TrainConfig cfg = mini_config(out, 6);
    cfg.steps.pretrain_aae = 90;
    Trainer tr(cfg);
    const double before = tr.aae_heldout_recon_dsc();
    const auto records = tr.pretrain_aae();
    const double after = tr.aae_heldout_recon_dsc();
    CHECK(after > before);

    // first-third vs last-third moving average of the reconstruction loss
    REQUIRE(records.size() >= 60);
    double head = 0.0, tail = 0.0;
    const std::size_t third = records.size() / 3;
    for (std::size_t i = 0; i < third; ++i) head += records[i].components.at("recon");
    for (std::size_t i = records.size() - third; i < records.size(); ++i)
        tail += records[i].components.at("recon");
    CHECK(tail < head);
    fs::remove_all(out);
}

TEST_CASE("chunked prediction agrees with whole-volume prediction") {
    Trainer tr(mini_config(trained_run(), 5));
    tr.load_stage_checkpoint(trained_run() / "stage_train_sosnet_adversarial");
    const CaseRecord& rec = tr.dataset().test_case(0);

    const PredictResult chunked = tr.predict(rec.image);  // chunk 8 of 16 slices
    PredictOptions whole;
    whole.chunk_override = rec.image.shape[0];
    const PredictResult full = tr.predict(rec.image, whole);

    std::int64_t agree = 0;
    for (std::size_t i = 0; i < chunked.labels.data.size(); ++i)
        agree += chunked.labels.data[i] == full.labels.data[i];
    const double frac = static_cast<double>(agree) /
                        static_cast<double>(chunked.labels.data.size());
    CHECK(frac >= 0.995);
}

}  // TEST_SUITE
