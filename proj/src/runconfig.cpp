#include "lefed/runconfig.hpp"

#include <fstream>

namespace lefed {

json to_json(const RunConfig& c) {
    json jd{{"train_manifest", c.data.train_manifest},
            {"val_manifest", c.data.val_manifest},
            {"test_manifest", c.data.test_manifest}};
    json jp = to_json(c.preprocess);
    jp["enabled"] = c.preprocess_enabled;
    return json{{"run_name", c.run_name}, {"out_dir", c.out_dir},
                {"data", jd},             {"preprocess", jp},
                {"network", to_json(c.network)}, {"train", to_json(c.train)},
                {"synthetic", to_json(c.synthetic)}};
}

RunConfig run_config_from_json(const json& j) {
    cfgjson::check_keys(j,
                        {"run_name", "out_dir", "data", "preprocess", "network",
                         "train", "synthetic"},
                        "config");
    RunConfig c;
    cfgjson::get(j, "run_name", c.run_name);
    cfgjson::get(j, "out_dir", c.out_dir);
    if (j.contains("data")) {
        const json& d = j.at("data");
        cfgjson::check_keys(d, {"train_manifest", "val_manifest", "test_manifest"},
                            "data");
        cfgjson::get(d, "train_manifest", c.data.train_manifest);
        cfgjson::get(d, "val_manifest", c.data.val_manifest);
        cfgjson::get(d, "test_manifest", c.data.test_manifest);
    }
    if (j.contains("preprocess")) {
        c.preprocess = preprocess_spec_from_json(j.at("preprocess"));
        cfgjson::get(j.at("preprocess"), "enabled", c.preprocess_enabled);
    }
    if (j.contains("network")) c.network = network_config_from_json(j.at("network"));
    if (j.contains("train")) c.train = train_config_from_json(j.at("train"));
    if (j.contains("synthetic")) c.synthetic = synthetic_spec_from_json(j.at("synthetic"));
    c.validate();
    return c;
}

RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("config: cannot open " + path.string());
    json j;
    try {
        in >> j;
    } catch (const json::parse_error& e) {
        throw std::runtime_error("config: " + path.string() + ": " + e.what());
    }
    return run_config_from_json(j);
}

void save_run_config(const RunConfig& c, const std::filesystem::path& path) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("config: cannot write " + path.string());
    out << to_json(c).dump(2) << "\n";
}

}  // namespace lefed
