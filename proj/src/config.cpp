#include "organseg/config.hpp"

#include <fstream>
#include <set>

#include <nlohmann/json.hpp>

#include "organseg/errors.hpp"

namespace organseg {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void reject_unknown(const json& j, const std::set<std::string>& known, const std::string& where) {
    for (const auto& [key, val] : j.items())
        if (!known.count(key))
            throw ConfigError("unknown config key '" + where + key + "'");
}

Vec3i vec3i_of(const json& j, const std::string& where) {
    if (!j.is_array() || j.size() != 3) throw ConfigError(where + " must be a 3-array");
    return {j.at(0).get<std::int64_t>(), j.at(1).get<std::int64_t>(), j.at(2).get<std::int64_t>()};
}

Vec3d vec3d_of(const json& j, const std::string& where) {
    if (!j.is_array() || j.size() != 3) throw ConfigError(where + " must be a 3-array");
    return {j.at(0).get<double>(), j.at(1).get<double>(), j.at(2).get<double>()};
}

json to_json(const ExperimentConfig& c) {
    json j;
    json d;
    d["root"] = c.dataset_root.string();
    d["train_cases"] = c.train_cases;
    d["test_cases"] = c.test_cases;
    d["shape"] = {c.gen.shape[0], c.gen.shape[1], c.gen.shape[2]};
    d["spacing_mm"] = {c.gen.spacing[0], c.gen.spacing[1], c.gen.spacing[2]};
    d["seed"] = c.dataset_seed;
    d["background"] = c.gen.background;
    d["noise_sd"] = c.gen.noise_sd;
    d["bias_amplitude"] = c.gen.bias_amplitude;
    d["imbalance_target"] = c.gen.imbalance_target;
    json roster = json::array();
    for (const auto& o : c.roster) roster.push_back(organ_to_json(o));
    d["roster"] = roster;
    j["dataset"] = d;

    json m;
    m["width_multiplier"] = c.train.width_multiplier;
    m["aspp_rates"] = c.train.aspp_rates;
    m["se_reduction"] = c.train.se_reduction;
    m["roi_size"] = {c.train.roi_size[0], c.train.roi_size[1], c.train.roi_size[2]};
    m["normalization"] = c.train.normalization;
    j["model"] = m;

    json l;
    l["gamma"] = c.train.loss.gamma;
    l["lambda_seg"] = c.train.loss.lambda_seg;
    l["lambda1"] = c.train.loss.lambda1;
    l["lambda2"] = c.train.loss.lambda2;
    if (c.train.loss.alpha.empty()) l["alpha"] = "auto";
    else l["alpha"] = c.train.loss.alpha;
    l["reduction"] = c.train.loss.reduction == LossReduction::mean ? "mean" : "sum";
    j["loss"] = l;

    json t;
    t["lr"] = c.train.lr;
    t["batch_size"] = c.train.batch_size;
    t["seed"] = c.train.seed;
    t["chunk"] = c.train.chunk;
    t["sigma_voxels"] = c.train.sigma_voxels;
    json steps;
    steps["pretrain_aae"] = c.train.steps.pretrain_aae;
    steps["train_snet"] = c.train.steps.train_snet;
    steps["train_solnet"] = c.train.steps.train_solnet;
    steps["train_sosnet_adversarial"] = c.train.steps.train_sosnet_adversarial;
    steps["finetune_all"] = c.train.steps.finetune_all;
    t["steps"] = steps;
    t["checkpoint_every"] = c.train.checkpoint_every;
    t["teacher_forcing"] = c.train.teacher_forcing;
    t["sos_use_aae"] = c.train.sos_use_aae;
    t["finetune_include_shape"] = c.train.finetune_include_shape;
    json a;
    a["enabled"] = c.train.augment_enabled;
    a["max_translation"] = {c.train.augment.max_translation[0], c.train.augment.max_translation[1],
                            c.train.augment.max_translation[2]};
    a["max_rotation_deg"] = c.train.augment.max_rotation_deg;
    a["scale_min"] = c.train.augment.scale_min;
    a["scale_max"] = c.train.augment.scale_max;
    t["augment"] = a;
    j["train"] = t;

    json o;
    o["dir"] = c.out_dir.string();
    j["output"] = o;
    return j;
}

void apply_json(ExperimentConfig& c, const json& j) {
    reject_unknown(j, {"dataset", "model", "loss", "train", "output"}, "");
    if (j.contains("dataset")) {
        const json& d = j.at("dataset");
        reject_unknown(d,
                       {"root", "train_cases", "test_cases", "shape", "spacing_mm", "seed",
                        "background", "noise_sd", "bias_amplitude", "imbalance_target",
                        "roster"},
                       "dataset.");
        if (d.contains("root")) c.dataset_root = d.at("root").get<std::string>();
        if (d.contains("train_cases")) c.train_cases = d.at("train_cases").get<int>();
        if (d.contains("test_cases")) c.test_cases = d.at("test_cases").get<int>();
        if (d.contains("shape")) c.gen.shape = vec3i_of(d.at("shape"), "dataset.shape");
        if (d.contains("spacing_mm"))
            c.gen.spacing = vec3d_of(d.at("spacing_mm"), "dataset.spacing_mm");
        if (d.contains("seed")) c.dataset_seed = d.at("seed").get<std::uint64_t>();
        if (d.contains("background")) c.gen.background = d.at("background").get<double>();
        if (d.contains("noise_sd")) c.gen.noise_sd = d.at("noise_sd").get<double>();
        if (d.contains("bias_amplitude"))
            c.gen.bias_amplitude = d.at("bias_amplitude").get<double>();
        if (d.contains("imbalance_target"))
            c.gen.imbalance_target = d.at("imbalance_target").get<double>();
        if (d.contains("roster")) {
            c.roster.clear();
            for (const auto& oj : d.at("roster")) {
                reject_unknown(oj,
                               {"class_id", "name", "kind", "size_class", "radius_mm",
                                "contrast", "intensity_sd", "centroid_lo", "centroid_hi",
                                "cross_angle_deg"},
                               "dataset.roster[].");
                c.roster.push_back(organ_from_json(oj));
            }
            try {
                validate_roster(c.roster);
            } catch (const std::invalid_argument& e) {
                throw ConfigError(std::string("dataset.roster: ") + e.what());
            }
        }
    }
    if (j.contains("model")) {
        const json& m = j.at("model");
        reject_unknown(m, {"width_multiplier", "aspp_rates", "se_reduction", "roi_size",
                           "normalization"},
                       "model.");
        if (m.contains("width_multiplier"))
            c.train.width_multiplier = m.at("width_multiplier").get<double>();
        if (m.contains("aspp_rates"))
            c.train.aspp_rates = m.at("aspp_rates").get<std::vector<std::int64_t>>();
        if (m.contains("se_reduction"))
            c.train.se_reduction = m.at("se_reduction").get<std::int64_t>();
        if (m.contains("roi_size")) c.train.roi_size = vec3i_of(m.at("roi_size"), "model.roi_size");
        if (m.contains("normalization")) {
            c.train.normalization = m.at("normalization").get<std::string>();
            if (c.train.normalization != "instance")
                throw ConfigError("model.normalization: only 'instance' is implemented");
        }
    }
    if (j.contains("loss")) {
        const json& l = j.at("loss");
        reject_unknown(l, {"gamma", "lambda_seg", "lambda1", "lambda2", "alpha", "reduction"},
                       "loss.");
        if (l.contains("gamma")) c.train.loss.gamma = l.at("gamma").get<double>();
        if (l.contains("lambda_seg")) c.train.loss.lambda_seg = l.at("lambda_seg").get<double>();
        if (l.contains("lambda1")) c.train.loss.lambda1 = l.at("lambda1").get<double>();
        if (l.contains("lambda2")) c.train.loss.lambda2 = l.at("lambda2").get<double>();
        if (l.contains("alpha")) {
            if (l.at("alpha").is_string()) {
                if (l.at("alpha").get<std::string>() != "auto")
                    throw ConfigError("loss.alpha must be 'auto' or an array");
                c.train.loss.alpha.clear();
            } else {
                c.train.loss.alpha = l.at("alpha").get<std::vector<double>>();
            }
        }
        if (l.contains("reduction")) {
            const std::string r = l.at("reduction").get<std::string>();
            if (r == "mean") c.train.loss.reduction = LossReduction::mean;
            else if (r == "sum") c.train.loss.reduction = LossReduction::sum;
            else throw ConfigError("loss.reduction must be 'mean' or 'sum'");
        }
    }
    if (j.contains("train")) {
        const json& t = j.at("train");
        reject_unknown(t,
                       {"lr", "batch_size", "seed", "chunk", "sigma_voxels", "steps",
                        "checkpoint_every", "teacher_forcing", "sos_use_aae",
                        "finetune_include_shape", "augment"},
                       "train.");
        if (t.contains("lr")) c.train.lr = t.at("lr").get<double>();
        if (t.contains("batch_size")) c.train.batch_size = t.at("batch_size").get<std::int64_t>();
        if (t.contains("seed")) c.train.seed = t.at("seed").get<std::uint64_t>();
        if (t.contains("chunk")) c.train.chunk = t.at("chunk").get<std::int64_t>();
        if (t.contains("sigma_voxels")) c.train.sigma_voxels = t.at("sigma_voxels").get<double>();
        if (t.contains("steps")) {
            const json& s = t.at("steps");
            reject_unknown(s,
                           {"pretrain_aae", "train_snet", "train_solnet",
                            "train_sosnet_adversarial", "finetune_all"},
                           "train.steps.");
            if (s.contains("pretrain_aae"))
                c.train.steps.pretrain_aae = s.at("pretrain_aae").get<std::int64_t>();
            if (s.contains("train_snet"))
                c.train.steps.train_snet = s.at("train_snet").get<std::int64_t>();
            if (s.contains("train_solnet"))
                c.train.steps.train_solnet = s.at("train_solnet").get<std::int64_t>();
            if (s.contains("train_sosnet_adversarial"))
                c.train.steps.train_sosnet_adversarial =
                    s.at("train_sosnet_adversarial").get<std::int64_t>();
            if (s.contains("finetune_all"))
                c.train.steps.finetune_all = s.at("finetune_all").get<std::int64_t>();
        }
        if (t.contains("checkpoint_every"))
            c.train.checkpoint_every = t.at("checkpoint_every").get<std::int64_t>();
        if (t.contains("teacher_forcing"))
            c.train.teacher_forcing = t.at("teacher_forcing").get<double>();
        if (t.contains("sos_use_aae")) c.train.sos_use_aae = t.at("sos_use_aae").get<bool>();
        if (t.contains("finetune_include_shape"))
            c.train.finetune_include_shape = t.at("finetune_include_shape").get<bool>();
        if (t.contains("augment")) {
            const json& a = t.at("augment");
            reject_unknown(a, {"enabled", "max_translation", "max_rotation_deg", "scale_min",
                               "scale_max"},
                           "train.augment.");
            if (a.contains("enabled")) c.train.augment_enabled = a.at("enabled").get<bool>();
            if (a.contains("max_translation"))
                c.train.augment.max_translation =
                    vec3d_of(a.at("max_translation"), "train.augment.max_translation");
            if (a.contains("max_rotation_deg"))
                c.train.augment.max_rotation_deg = a.at("max_rotation_deg").get<double>();
            if (a.contains("scale_min")) c.train.augment.scale_min = a.at("scale_min").get<double>();
            if (a.contains("scale_max")) c.train.augment.scale_max = a.at("scale_max").get<double>();
        }
    }
    if (j.contains("output")) {
        const json& o = j.at("output");
        reject_unknown(o, {"dir"}, "output.");
        if (o.contains("dir")) c.out_dir = o.at("dir").get<std::string>();
    }
}

json parse_override(const std::string& kv) {
    const auto eq = kv.find('=');
    if (eq == std::string::npos)
        throw ConfigError("override '" + kv + "' must look like key.path=value");
    const std::string path = kv.substr(0, eq);
    const std::string raw = kv.substr(eq + 1);
    json value;
    try {
        value = json::parse(raw);
    } catch (const json::exception&) {
        value = raw;  // plain string
    }
    json root;
    json* cursor = &root;
    std::size_t pos = 0;
    while (true) {
        const auto dot = path.find('.', pos);
        const std::string part = path.substr(pos, dot == std::string::npos ? dot : dot - pos);
        if (part.empty()) throw ConfigError("override '" + kv + "' has an empty key segment");
        if (dot == std::string::npos) {
            (*cursor)[part] = value;
            break;
        }
        cursor = &(*cursor)[part];
        pos = dot + 1;
    }
    return root;
}

void merge_into(json& base, const json& patch) {
    for (const auto& [key, val] : patch.items()) {
        if (val.is_object() && base.contains(key) && base.at(key).is_object())
            merge_into(base.at(key), val);
        else
            base[key] = val;
    }
}

}  // namespace

ExperimentConfig default_experiment_config() {
    ExperimentConfig c;
    c.roster = default_roster();
    c.train.dataset_root = c.dataset_root;
    c.train.out_dir = c.out_dir;
    return c;
}

ExperimentConfig parse_experiment_config(const fs::path& file,
                                         const std::vector<std::string>& overrides) {
    std::ifstream f(file, std::ios::binary);
    if (!f) throw IoError("cannot open config " + file.string());
    json j;
    try {
        f >> j;
    } catch (const json::exception& e) {
        throw ConfigError("malformed config " + file.string() + ": " + e.what());
    }
    for (const auto& kv : overrides) merge_into(j, parse_override(kv));

    ExperimentConfig c = default_experiment_config();
    apply_json(c, j);
    c.train.dataset_root = c.dataset_root;
    c.train.out_dir = c.out_dir;
    c.train.config_hash = "";
    c.train.config_hash = config_hash(c);
    return c;
}

std::string dump_experiment_config(const ExperimentConfig& c) {
    return to_json(c).dump(2) + "\n";
}

std::string config_hash(const ExperimentConfig& c) {
    const std::string s = to_json(c).dump();
    std::uint64_t h = 1469598103934665603ull;
    for (unsigned char ch : s) {
        h ^= ch;
        h *= 1099511628211ull;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return std::string(buf);
}

void archive_resolved_config(const ExperimentConfig& c, const fs::path& dir) {
    std::error_code ec;
    fs::create_directories(dir, ec);
    if (ec) throw IoError("cannot create output dir " + dir.string());
    std::ofstream f(dir / "resolved_config.json", std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write resolved_config.json in " + dir.string());
    f << dump_experiment_config(c);
}

}  // namespace organseg
