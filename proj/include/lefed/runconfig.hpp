#ifndef LEFED_RUNCONFIG_HPP
#define LEFED_RUNCONFIG_HPP

#include <filesystem>

#include "lefed/config_json.hpp"

namespace lefed {

struct DataPaths {
    std::string train_manifest;
    std::string val_manifest;
    std::string test_manifest;
};

// One file describes one run end to end; it is copied into the run directory
// so every result stays reproducible from its own record.
struct RunConfig {
    std::string run_name = "run";
    std::string out_dir = "runs";
    DataPaths data;
    bool preprocess_enabled = true;
    PreprocessSpec preprocess;
    NetworkConfig network;
    TrainConfig train;
    SyntheticSpec synthetic;

    void validate() const {
        if (run_name.empty()) throw std::invalid_argument("config: empty run_name");
        preprocess.validate();
        network.validate();
        train.validate();
        synthetic.validate();
    }

    std::filesystem::path run_dir() const {
        return std::filesystem::path(out_dir) / run_name;
    }
};

json to_json(const RunConfig& c);
RunConfig run_config_from_json(const json& j);

RunConfig load_run_config(const std::filesystem::path& path);
void save_run_config(const RunConfig& c, const std::filesystem::path& path);

}  // namespace lefed

#endif
