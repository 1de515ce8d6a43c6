// lefed: dataset preparation, training and evaluation for the dual-decoder
// discrepancy-feedback segmentation framework.

#include <CLI11.hpp>
#include <cstdlib>
#ifdef __GLIBC__
#include <malloc.h>
#endif
#include <iomanip>
#include <iostream>

#include "lefed/nifti.hpp"
#include "lefed/runconfig.hpp"
#include "lefed/trainer.hpp"

namespace fs = std::filesystem;
using namespace lefed;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitRuntime = 2;

fs::path resolve_config_path(const std::string& flag) {
    if (!flag.empty()) return flag;
    if (const char* env = std::getenv("LEFED_CONFIG")) return env;
    throw std::invalid_argument("no config: pass --config or set LEFED_CONFIG");
}

RunConfig load_config_or_default(const std::string& flag) {
    if (flag.empty() && !std::getenv("LEFED_CONFIG")) return RunConfig{};
    return load_run_config(resolve_config_path(flag));
}

std::string case_name(int i) {
    std::ostringstream os;
    os << "case_" << std::setw(3) << std::setfill('0') << i;
    return os.str();
}

int cmd_synth(const RunConfig& cfg, int n, uint64_t seed, const fs::path& out) {
    fs::create_directories(out / "images");
    fs::create_directories(out / "labels");
    Manifest man;
    for (int i = 0; i < n; ++i) {
        SyntheticSpec spec = cfg.synthetic;
        spec.seed = seed + static_cast<uint64_t>(i);
        auto [vol, mask] = generate_synthetic_case(spec);
        const std::string id = case_name(i);
        const fs::path img = out / "images" / (id + ".nii.gz");
        const fs::path lab = out / "labels" / (id + ".nii.gz");
        write_nifti(img, vol);
        write_nifti(lab, mask, vol.spacing, vol.origin);
        man.cases.push_back({id, img, lab});
    }
    save_manifest(man, out / "manifest.json");
    std::cout << "wrote " << n << " cases to " << out << "\n";
    return kExitOk;
}

int cmd_preprocess(const RunConfig& cfg, const fs::path& in_manifest,
                   const fs::path& out) {
    const Manifest man = load_manifest(in_manifest);
    fs::create_directories(out / "images");
    fs::create_directories(out / "labels");
    Manifest out_man;
    std::vector<std::string> failures;
    for (const auto& c : man.cases) {
        try {
            auto [vol, mask] = load_case(c);
            auto [pv, pm] = preprocess_case(vol, mask, cfg.preprocess);
            const fs::path img = out / "images" / (c.id + ".nii.gz");
            write_nifti(img, pv);
            CaseEntry oc{c.id, img, std::nullopt};
            if (pm) {
                const fs::path lab = out / "labels" / (c.id + ".nii.gz");
                write_nifti(lab, *pm, pv.spacing, pv.origin);
                oc.label = lab;
            }
            out_man.cases.push_back(std::move(oc));
        } catch (const std::exception& e) {
            failures.push_back(c.id + ": " + e.what());
        }
    }
    save_manifest(out_man, out / "manifest.json");
    for (const auto& f : failures) std::cerr << "failed " << f << "\n";
    std::cout << "preprocessed " << out_man.cases.size() << "/" << man.cases.size()
              << " cases to " << out << "\n";
    return failures.empty() ? kExitOk : kExitRuntime;
}

std::vector<PreprocessedCase> load_cases(const fs::path& manifest_path,
                                         const RunConfig& cfg, bool keep_masks) {
    std::vector<PreprocessedCase> out;
    for (const auto& c : load_manifest(manifest_path).cases) {
        auto [vol, mask] = load_case(c);
        if (cfg.preprocess_enabled) std::tie(vol, mask) = preprocess_case(vol, mask, cfg.preprocess);
        if (!keep_masks) mask.reset();
        out.push_back({c.id, std::move(vol), std::move(mask)});
    }
    return out;
}

TrainDataset build_dataset(const RunConfig& cfg) {
    TrainDataset ds;
    auto train_cases = load_cases(cfg.data.train_manifest, cfg, true);
    std::vector<std::string> labeled_ids;
    for (const auto& c : train_cases)
        if (c.mask) labeled_ids.push_back(c.id);
    if (labeled_ids.empty()) throw std::runtime_error("train manifest has no labels");
    auto [lab, unlab] = split_labeled_unlabeled(labeled_ids, cfg.train.label_fraction,
                                                cfg.train.seed);
    const std::set<std::string> lab_set(lab.begin(), lab.end());
    for (auto& c : train_cases) {
        if (c.mask && !lab_set.count(c.id)) c.mask.reset();
        (c.mask ? ds.labeled : ds.unlabeled).push_back(std::move(c));
    }
    if (!cfg.data.val_manifest.empty())
        ds.val = load_cases(cfg.data.val_manifest, cfg, true);
    return ds;
}

int cmd_train(const RunConfig& cfg, bool resume) {
    const fs::path run_dir = cfg.run_dir();
    const TrainDataset ds = build_dataset(cfg);
    auto result = train(cfg.network, cfg.train, ds, run_dir, resume,
                        [](int64_t step, const StepResult& r) {
                            if ((step + 1) % 50 == 0)
                                std::cout << "step " << step + 1 << " l_total "
                                          << r.losses.l_total << "\n";
                        });
    save_run_config(cfg, run_dir / "config.json");

    const std::string eval_manifest = !cfg.data.test_manifest.empty()
                                          ? cfg.data.test_manifest
                                          : cfg.data.val_manifest;
    if (!eval_manifest.empty()) {
        const auto cases = load_cases(eval_manifest, cfg, true);
        const TrainState best = load_checkpoint(run_dir / "ckpt_best");
        const auto rep =
            evaluate(best.model, cases, cfg.train.patch_size, cfg.train.eval_overlap);
        write_report_json(rep, run_dir / "report.json");
        write_report_csv(rep, run_dir / "report.csv");
        std::cout << "eval dice " << rep.mean_dice << " +/- " << rep.std_dice << "\n";
    }
    std::cout << "run complete: " << run_dir << "\n";
    return kExitOk;
}

int cmd_eval(const fs::path& ckpt, const fs::path& manifest, const RunConfig& cfg,
             const fs::path& out) {
    const TrainState st = load_checkpoint(ckpt);
    const auto cases = load_cases(manifest, cfg, true);
    const auto rep =
        evaluate(st.model, cases, cfg.train.patch_size, cfg.train.eval_overlap);
    fs::create_directories(out);
    write_report_json(rep, out / "report.json");
    write_report_csv(rep, out / "report.csv");
    std::cout << "dice " << rep.mean_dice << " jaccard " << rep.mean_jaccard << " asd "
              << rep.mean_asd << " hd95 " << rep.mean_hd95 << "\n";
    return kExitOk;
}

int cmd_ablate(const RunConfig& cfg, const std::vector<std::string>& axes,
               bool resume) {
    const auto matrix =
        ablation_matrix(cfg.train, std::set<std::string>(axes.begin(), axes.end()));
    const fs::path base_dir = cfg.run_dir();
    fs::create_directories(base_dir);

    json table = json::array();
    std::ofstream csv(base_dir / "ablation.csv");
    csv << "name,dice,jaccard,asd,hd95\n";
    for (const auto& [name, tc] : matrix) {
        RunConfig rc = cfg;
        rc.train = tc;
        std::string dir_name = name;
        for (char& ch : dir_name)
            if (ch == '(' || ch == ')' || ch == '|' || ch == '+') ch = '_';
        const fs::path run_dir = base_dir / dir_name;
        std::cout << "== " << name << " ==\n";
        const TrainDataset ds = build_dataset(rc);
        auto result = train(rc.network, rc.train, ds, run_dir, resume);
        save_run_config(rc, run_dir / "config.json");

        MetricsReport rep;
        const std::string eval_manifest = !rc.data.test_manifest.empty()
                                              ? rc.data.test_manifest
                                              : rc.data.val_manifest;
        if (!eval_manifest.empty()) {
            const auto cases = load_cases(eval_manifest, rc, true);
            const TrainState best = load_checkpoint(run_dir / "ckpt_best");
            rep = evaluate(best.model, cases, rc.train.patch_size,
                           rc.train.eval_overlap);
            write_report_json(rep, run_dir / "report.json");
        }
        table.push_back({{"name", name},
                         {"dice", rep.mean_dice},
                         {"jaccard", rep.mean_jaccard},
                         {"asd", rep.mean_asd},
                         {"hd95", rep.mean_hd95}});
        csv << "\"" << name << "\"," << rep.mean_dice << "," << rep.mean_jaccard << ","
            << rep.mean_asd << "," << rep.mean_hd95 << "\n";
        csv.flush();
    }
    std::ofstream(base_dir / "ablation.json") << table.dump(2) << "\n";
    std::cout << "ablation table: " << (base_dir / "ablation.csv") << "\n";
    return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
#ifdef __GLIBC__
    // Training churns through large short-lived buffers; keep them in the heap
    // instead of handing pages back to the kernel on every free.
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
#endif
    CLI::App app{"dual-decoder discrepancy-feedback segmentation"};
    app.require_subcommand(1);

    std::string config_flag;
    app.add_option("--config", config_flag, "JSON run config (or $LEFED_CONFIG)");

    auto* synth = app.add_subcommand("synth", "generate a synthetic dataset");
    int synth_n = 5;
    uint64_t synth_seed = 0;
    std::string synth_out = "data";
    synth->add_option("--n", synth_n, "number of cases")->check(CLI::NonNegativeNumber);
    synth->add_option("--seed", synth_seed, "base seed");
    synth->add_option("--out", synth_out, "output directory")->required();

    auto* prep = app.add_subcommand("preprocess", "preprocess a dataset");
    std::string prep_in, prep_out;
    prep->add_option("--in", prep_in, "input manifest JSON")->required();
    prep->add_option("--out", prep_out, "output directory")->required();

    auto* trn = app.add_subcommand("train", "train a model");
    bool resume = false;
    uint64_t seed_flag = 0;
    bool seed_set = false;
    std::string out_flag;
    trn->add_flag("--resume", resume, "resume from ckpt_last");
    trn->add_option("--seed", seed_flag, "override config seed")
        ->each([&](const std::string&) { seed_set = true; });
    trn->add_option("--out", out_flag, "override output directory");

    auto* evl = app.add_subcommand("eval", "evaluate a checkpoint");
    std::string eval_ckpt, eval_data, eval_out = "eval";
    evl->add_option("--ckpt", eval_ckpt, "checkpoint path")->required();
    evl->add_option("--data", eval_data, "manifest JSON")->required();
    evl->add_option("--out", eval_out, "report directory");

    auto* abl = app.add_subcommand("ablate", "run an ablation matrix");
    std::vector<std::string> axes;
    bool abl_resume = false;
    abl->add_option("--axes", axes, "axes: IL DL DS scales t lambda encoding");
    abl->add_flag("--resume", abl_resume, "resume finished/partial runs");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? kExitOk : kExitUsage;
    }

    try {
        RunConfig cfg = load_config_or_default(config_flag);
        if (seed_set) cfg.train.seed = seed_flag;
        if (!out_flag.empty()) cfg.out_dir = out_flag;

        if (synth->parsed()) return cmd_synth(cfg, synth_n, synth_seed, synth_out);
        if (prep->parsed()) return cmd_preprocess(cfg, prep_in, prep_out);
        if (trn->parsed()) return cmd_train(cfg, resume);
        if (evl->parsed()) return cmd_eval(eval_ckpt, eval_data, cfg, eval_out);
        if (abl->parsed()) return cmd_ablate(cfg, axes, abl_resume);
    } catch (const std::invalid_argument& e) {
        std::cerr << "usage error: " << e.what() << "\n";
        return kExitUsage;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
    return kExitUsage;
}
