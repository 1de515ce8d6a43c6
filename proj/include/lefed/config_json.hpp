#ifndef LEFED_CONFIG_JSON_HPP
#define LEFED_CONFIG_JSON_HPP

#include <json.hpp>

#include "lefed/dataset.hpp"
#include "lefed/trainer.hpp"
#include "lefed/volume.hpp"

namespace lefed {

using json = nlohmann::json;

// Strict parsing: every key must be known, every known key optional with the
// struct default. Configs are the reproducibility record, so typos fail loud.

namespace cfgjson {

inline void check_keys(const json& j, const std::vector<std::string>& known,
                       const std::string& where) {
    if (!j.is_object()) throw std::invalid_argument(where + ": expected object");
    for (auto it = j.begin(); it != j.end(); ++it)
        if (std::find(known.begin(), known.end(), it.key()) == known.end())
            throw std::invalid_argument(where + ": unknown key \"" + it.key() + "\"");
}

template <class T>
void get(const json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

template <class T, size_t N>
void get_array(const json& j, const char* key, std::array<T, N>& out,
               const std::string& where) {
    if (!j.contains(key)) return;
    const auto& a = j.at(key);
    if (!a.is_array() || a.size() != N)
        throw std::invalid_argument(where + ": \"" + key + "\" must be an array of " +
                                    std::to_string(N));
    for (size_t i = 0; i < N; ++i) out[i] = a[i].get<T>();
}

}  // namespace cfgjson

inline json to_json(const NetworkConfig& c) {
    return json{{"in_channels", c.in_channels},
                {"num_classes", c.num_classes},
                {"base_width", c.base_width},
                {"num_stages", c.num_stages},
                {"lambda_feedback", c.lambda_feedback},
                {"iterations", c.iterations},
                {"feedback_source", c.feedback_source},
                {"eval_decoder", c.eval_decoder}};
}

inline NetworkConfig network_config_from_json(const json& j) {
    cfgjson::check_keys(j,
                        {"in_channels", "num_classes", "base_width", "num_stages",
                         "lambda_feedback", "iterations", "feedback_source",
                         "eval_decoder"},
                        "network");
    NetworkConfig c;
    cfgjson::get(j, "in_channels", c.in_channels);
    cfgjson::get(j, "num_classes", c.num_classes);
    cfgjson::get(j, "base_width", c.base_width);
    cfgjson::get(j, "num_stages", c.num_stages);
    cfgjson::get(j, "lambda_feedback", c.lambda_feedback);
    cfgjson::get(j, "iterations", c.iterations);
    cfgjson::get(j, "feedback_source", c.feedback_source);
    cfgjson::get(j, "eval_decoder", c.eval_decoder);
    c.validate();
    return c;
}

inline json to_json(const AblationFlags& a) {
    return json{{"use_feedback", a.use_feedback},
                {"use_distinct_losses", a.use_distinct_losses},
                {"use_deep_supervision", a.use_deep_supervision},
                {"use_consistency", a.use_consistency},
                {"scales", std::vector<int>(a.scales.begin(), a.scales.end())},
                {"encoding", a.encoding},
                {"t", a.t},
                {"lambda", a.lambda},
                {"include_first_iteration_loss", a.include_first_iteration_loss}};
}

inline AblationFlags ablation_from_json(const json& j) {
    cfgjson::check_keys(j,
                        {"use_feedback", "use_distinct_losses", "use_deep_supervision",
                         "use_consistency", "scales", "encoding", "t", "lambda",
                         "include_first_iteration_loss"},
                        "ablation");
    AblationFlags a;
    cfgjson::get(j, "use_feedback", a.use_feedback);
    cfgjson::get(j, "use_distinct_losses", a.use_distinct_losses);
    cfgjson::get(j, "use_deep_supervision", a.use_deep_supervision);
    cfgjson::get(j, "use_consistency", a.use_consistency);
    if (j.contains("scales")) {
        a.scales.clear();
        for (int s : j.at("scales").get<std::vector<int>>()) a.scales.insert(s);
    }
    cfgjson::get(j, "encoding", a.encoding);
    cfgjson::get(j, "t", a.t);
    cfgjson::get(j, "lambda", a.lambda);
    cfgjson::get(j, "include_first_iteration_loss", a.include_first_iteration_loss);
    a.validate();
    return a;
}

inline json to_json(const TrainConfig& c) {
    return json{{"lr", c.lr},
                {"momentum", c.momentum},
                {"weight_decay", c.weight_decay},
                {"batch_size", c.batch_size},
                {"max_iterations", c.max_iterations},
                {"label_fraction", c.label_fraction},
                {"patch_size", c.patch_size},
                {"seed", c.seed},
                {"val_interval", c.val_interval},
                {"poly_lr_decay", c.poly_lr_decay},
                {"poly_power", c.poly_power},
                {"strict_epoch", c.strict_epoch},
                {"ds_weights", c.ds_weights},
                {"eval_overlap", c.eval_overlap},
                {"ablation", to_json(c.ablation)}};
}

inline TrainConfig train_config_from_json(const json& j) {
    cfgjson::check_keys(j,
                        {"lr", "momentum", "weight_decay", "batch_size",
                         "max_iterations", "label_fraction", "patch_size", "seed",
                         "val_interval", "poly_lr_decay", "poly_power", "strict_epoch",
                         "ds_weights", "eval_overlap", "ablation"},
                        "train");
    TrainConfig c;
    cfgjson::get(j, "lr", c.lr);
    cfgjson::get(j, "momentum", c.momentum);
    cfgjson::get(j, "weight_decay", c.weight_decay);
    cfgjson::get(j, "batch_size", c.batch_size);
    cfgjson::get(j, "max_iterations", c.max_iterations);
    cfgjson::get(j, "label_fraction", c.label_fraction);
    cfgjson::get_array(j, "patch_size", c.patch_size, "train");
    cfgjson::get(j, "seed", c.seed);
    cfgjson::get(j, "val_interval", c.val_interval);
    cfgjson::get(j, "poly_lr_decay", c.poly_lr_decay);
    cfgjson::get(j, "poly_power", c.poly_power);
    cfgjson::get(j, "strict_epoch", c.strict_epoch);
    cfgjson::get(j, "ds_weights", c.ds_weights);
    cfgjson::get(j, "eval_overlap", c.eval_overlap);
    if (j.contains("ablation")) c.ablation = ablation_from_json(j.at("ablation"));
    c.validate();
    return c;
}

inline json to_json(const PreprocessSpec& s) {
    json j{{"crop_margin_voxels", s.crop_margin_voxels},
           {"target_spacing", s.target_spacing},
           {"normalize", s.normalize}};
    if (s.hu_clip) j["hu_clip"] = std::vector<double>{s.hu_clip->first, s.hu_clip->second};
    return j;
}

inline PreprocessSpec preprocess_spec_from_json(const json& j) {
    cfgjson::check_keys(
        j, {"crop_margin_voxels", "target_spacing", "hu_clip", "normalize", "enabled"},
        "preprocess");
    PreprocessSpec s;
    cfgjson::get(j, "crop_margin_voxels", s.crop_margin_voxels);
    cfgjson::get_array(j, "target_spacing", s.target_spacing, "preprocess");
    cfgjson::get(j, "normalize", s.normalize);
    if (j.contains("hu_clip") && !j.at("hu_clip").is_null()) {
        const auto v = j.at("hu_clip").get<std::vector<double>>();
        if (v.size() != 2)
            throw std::invalid_argument("preprocess: hu_clip must be [low, high]");
        s.hu_clip = {v[0], v[1]};
    }
    s.validate();
    return s;
}

inline json to_json(const SyntheticSpec& s) {
    return json{{"grid_size", s.grid_size},
                {"num_blobs", s.num_blobs},
                {"blob_radius_range",
                 std::vector<double>{s.blob_radius_range.first, s.blob_radius_range.second}},
                {"noise_sigma", s.noise_sigma},
                {"seed", s.seed}};
}

inline SyntheticSpec synthetic_spec_from_json(const json& j) {
    cfgjson::check_keys(
        j, {"grid_size", "num_blobs", "blob_radius_range", "noise_sigma", "seed"},
        "synthetic");
    SyntheticSpec s;
    cfgjson::get_array(j, "grid_size", s.grid_size, "synthetic");
    cfgjson::get(j, "num_blobs", s.num_blobs);
    if (j.contains("blob_radius_range")) {
        const auto v = j.at("blob_radius_range").get<std::vector<double>>();
        if (v.size() != 2)
            throw std::invalid_argument("synthetic: blob_radius_range must be [min, max]");
        s.blob_radius_range = {v[0], v[1]};
    }
    cfgjson::get(j, "noise_sigma", s.noise_sigma);
    cfgjson::get(j, "seed", s.seed);
    s.validate();
    return s;
}

}  // namespace lefed

#endif
