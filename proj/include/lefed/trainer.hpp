#ifndef LEFED_TRAINER_HPP
#define LEFED_TRAINER_HPP

#include <functional>
#include <map>

#include "lefed/dataset.hpp"
#include "lefed/metrics.hpp"
#include "lefed/network.hpp"

namespace lefed {

// Ablation switches: feedback (IL), distinct losses (DL), deep supervision
// (DS), plus the t, lambda and encoding sweeps.
struct AblationFlags {
    bool use_feedback = true;         // "IL": iterative discrepancy feedback
    bool use_distinct_losses = true;  // "DL": Dice on A, CE on B
    bool use_deep_supervision = true; // "DS"
    bool use_consistency = true;      // MSE on unlabeled patches (off = supervised-only)
    std::set<int> scales;             // empty = all scales
    std::string encoding = "A-B";
    int t = 3;
    double lambda = 1e-3;
    // whether the iteration-1 loss joins the per-sample average
    bool include_first_iteration_loss = true;

    void validate() const {
        if (t < 1) throw std::invalid_argument("ablation: t < 1");
        if (lambda < 0) throw std::invalid_argument("ablation: lambda < 0");
        encoding_from_string(encoding);
        for (int s : scales)
            if (s < 1) throw std::invalid_argument("ablation: bad scale index");
    }
    EncodingKind encoding_kind() const { return encoding_from_string(encoding); }
};

struct TrainConfig {
    double lr = 0.01;
    double momentum = 0.9;
    double weight_decay = 1e-4;
    int batch_size = 4;  // 2 labeled + 2 unlabeled
    int max_iterations = 1000;
    double label_fraction = 0.1;
    std::array<int64_t, 3> patch_size{96, 96, 96};
    uint64_t seed = 0;
    int val_interval = 200;
    bool poly_lr_decay = false;
    double poly_power = 0.9;
    bool strict_epoch = false;
    std::vector<double> ds_weights;  // empty = default {0.8,0.6,...} truncated
    double eval_overlap = 0.25;
    AblationFlags ablation;

    void validate() const {
        if (!(lr > 0)) throw std::invalid_argument("train: lr <= 0");
        if (momentum < 0 || momentum >= 1)
            throw std::invalid_argument("train: momentum out of range");
        if (weight_decay < 0) throw std::invalid_argument("train: negative weight decay");
        if (max_iterations < 1) throw std::invalid_argument("train: max_iterations < 1");
        if (!(label_fraction > 0) || label_fraction > 1)
            throw std::invalid_argument("train: label_fraction out of (0,1]");
        if (batch_size < 2 || batch_size % 2)
            throw std::invalid_argument("train: batch_size must be even");
        if (val_interval < 1) throw std::invalid_argument("train: val_interval < 1");
        ablation.validate();
    }

    LossWeights loss_weights(int num_stages) const {
        LossWeights lw;
        if (!ds_weights.empty()) {
            lw.ds_weights = ds_weights;
        } else {
            const std::vector<double> def{0.8, 0.6, 0.4, 0.2, 0.1};
            lw.ds_weights.clear();
            for (int s = 0; s < num_stages; ++s)
                lw.ds_weights.push_back(
                    s < static_cast<int>(def.size()) ? def[static_cast<size_t>(s)]
                                                     : def.back() / 2);
        }
        lw.validate(static_cast<size_t>(num_stages));
        return lw;
    }
};

struct TrainState {
    int64_t step = 0;
    Model model;
    std::map<std::string, Tensor> momentum;
    std::mt19937_64 rng{0};
    double best_val_dice = -1;
    std::string sampler_state;  // batch composer snapshot for exact resume
};

struct StepResult {
    LossBreakdown losses;
    std::vector<ScaleStats> discrepancy;
    double lr = 0;
};

TrainState init_train_state(const NetworkConfig& net_cfg, const TrainConfig& cfg);

// One optimizer step: t-iteration forward with detached feedback per patch,
// supervised loss on labeled and MSE consistency on unlabeled patches, each
// averaged over iterations, then a single SGD-with-momentum update.
StepResult train_step(TrainState& state, const PatchBatch& batch,
                      const TrainConfig& cfg);

struct TrainDataset {
    std::vector<PreprocessedCase> labeled, unlabeled, val;
};

struct TrainResult {
    TrainState state;
    std::filesystem::path run_dir;
};

using StepCallback = std::function<void(int64_t step, const StepResult&)>;

TrainResult train(const NetworkConfig& net_cfg, const TrainConfig& cfg,
                  const TrainDataset& data, const std::filesystem::path& run_dir,
                  bool resume = false, const StepCallback& on_step = {});

void save_checkpoint(const TrainState& state, const std::filesystem::path& path);
TrainState load_checkpoint(const std::filesystem::path& path);
// rejects a checkpoint whose embedded NetworkConfig differs
TrainState load_checkpoint(const std::filesystem::path& path,
                           const NetworkConfig& expected);

// Component / hyper-parameter ablation grid. Axes subset of
// {IL, DL, DS, scales, t, lambda, encoding}.
std::vector<std::pair<std::string, TrainConfig>> ablation_matrix(
    const TrainConfig& base, const std::set<std::string>& axes);

bool operator==(const NetworkConfig& a, const NetworkConfig& b);

}  // namespace lefed

#endif
