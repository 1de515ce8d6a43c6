#include <doctest.h>

#include <filesystem>
#include <fstream>

#include "lefed/trainer.hpp"

using namespace lefed;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir(const std::string& leaf) {
    auto d = fs::temp_directory_path() / "lefed_trainer_test" / leaf;
    fs::remove_all(d);
    fs::create_directories(d.parent_path());
    return d;
}

NetworkConfig tiny_net() {
    NetworkConfig nc;
    nc.base_width = 2;
    nc.num_stages = 2;
    return nc;
}

TrainConfig tiny_train(uint64_t seed = 1) {
    TrainConfig cfg;
    cfg.batch_size = 2;
    cfg.max_iterations = 4;
    cfg.patch_size = {8, 8, 8};
    cfg.seed = seed;
    cfg.val_interval = 2;
    cfg.ablation.t = 2;
    return cfg;
}

TrainDataset tiny_data(int labeled = 2, int unlabeled = 2, int val = 1) {
    TrainDataset d;
    SyntheticSpec spec;
    spec.grid_size = {16, 16, 16};
    spec.blob_radius_range = {3.0, 6.0};
    int idx = 0;
    auto push = [&](std::vector<PreprocessedCase>& dst, bool with_mask) {
        spec.seed = static_cast<uint64_t>(idx);
        auto [v, m] = generate_synthetic_case(spec);
        PreprocessedCase c;
        c.id = "case" + std::to_string(idx++);
        c.image = normalize_zscore(v);
        if (with_mask) c.mask = m;
        dst.push_back(std::move(c));
    };
    for (int i = 0; i < labeled; ++i) push(d.labeled, true);
    for (int i = 0; i < unlabeled; ++i) push(d.unlabeled, false);
    for (int i = 0; i < val; ++i) push(d.val, true);
    return d;
}

PatchBatch make_batch(const TrainDataset& d, const TrainConfig& cfg, uint64_t seed) {
    BatchConfig bc;
    bc.batch_size = cfg.batch_size;
    bc.patch_size = cfg.patch_size;
    BatchComposer comp(d.labeled, d.unlabeled, bc, seed);
    return comp.next();
}

std::vector<double> param_copy(const TrainState& st, const std::string& name) {
    auto p = st.model.find_param(name);
    return {p->value.data.begin(), p->value.data.end()};
}

}  // namespace

TEST_CASE("train_step runs, logs components and advances") {
    auto data = tiny_data();
    auto cfg = tiny_train();
    auto st = init_train_state(tiny_net(), cfg);
    const auto before = param_copy(st, "enc.0.block.conv1.w");
    auto batch = make_batch(data, cfg, 1);
    auto res = train_step(st, batch, cfg);
    CHECK(st.step == 1);
    CHECK(res.losses.finite());
    CHECK(res.losses.l_total ==
          doctest::Approx(res.losses.l_sup + res.losses.l_unsup).epsilon(1e-9));
    CHECK(res.losses.l_sup > 0);
    CHECK(res.lr == doctest::Approx(cfg.lr));
    CHECK_FALSE(res.discrepancy.empty());
    CHECK(param_copy(st, "enc.0.block.conv1.w") != before);
}

TEST_CASE("train_step is deterministic") {
    auto data = tiny_data();
    auto cfg = tiny_train();
    auto a = init_train_state(tiny_net(), cfg);
    auto b = init_train_state(tiny_net(), cfg);
    for (int i = 0; i < 3; ++i) {
        auto batch = make_batch(data, cfg, static_cast<uint64_t>(i));
        auto ra = train_step(a, batch, cfg);
        auto rb = train_step(b, batch, cfg);
        CHECK(ra.losses.l_total == rb.losses.l_total);
    }
    CHECK(param_copy(a, "head_a.w") == param_copy(b, "head_a.w"));
}

TEST_CASE("feedback off is equivalent to a single iteration") {
    auto data = tiny_data();
    auto cfg_off = tiny_train();
    cfg_off.ablation.use_feedback = false;
    cfg_off.ablation.t = 3;  // must be ignored when feedback is off

    auto cfg_t1 = tiny_train();
    cfg_t1.ablation.t = 1;

    auto a = init_train_state(tiny_net(), cfg_off);
    auto b = init_train_state(tiny_net(), cfg_t1);
    auto batch = make_batch(data, cfg_off, 5);
    auto ra = train_step(a, batch, cfg_off);
    auto rb = train_step(b, batch, cfg_t1);
    CHECK(ra.losses.l_total == rb.losses.l_total);
    CHECK(param_copy(a, "head_b.w") == param_copy(b, "head_b.w"));
}

TEST_CASE("weight decay alone shrinks unused parameters geometrically") {
    // deep supervision off: the ds heads get zero loss gradient, so SGD with
    // zero momentum reduces to w <- w * (1 - lr * wd) each step
    auto data = tiny_data();
    auto cfg = tiny_train();
    cfg.ablation.use_deep_supervision = false;
    cfg.momentum = 0.0;
    cfg.weight_decay = 1e-2;
    auto st = init_train_state(tiny_net(), cfg);
    const auto w0 = param_copy(st, "ds_head.0.w");
    auto batch = make_batch(data, cfg, 2);
    train_step(st, batch, cfg);
    train_step(st, batch, cfg);
    const auto w2 = param_copy(st, "ds_head.0.w");
    const double f = (1.0 - cfg.lr * cfg.weight_decay) *
                     (1.0 - cfg.lr * cfg.weight_decay);
    for (size_t i = 0; i < w0.size(); ++i)
        CHECK(w2[i] == doctest::Approx(w0[i] * f).epsilon(1e-5));
}

TEST_CASE("consistency off ignores unlabeled patches") {
    auto data = tiny_data();
    auto cfg = tiny_train();
    cfg.ablation.use_consistency = false;
    auto st = init_train_state(tiny_net(), cfg);
    auto batch = make_batch(data, cfg, 3);
    auto res = train_step(st, batch, cfg);
    CHECK(res.losses.l_unsup == 0.0);
    CHECK(res.losses.l_total == res.losses.l_sup);
}

TEST_CASE("empty labeled group is rejected") {
    auto cfg = tiny_train();
    auto st = init_train_state(tiny_net(), cfg);
    PatchBatch batch;  // nothing in it
    CHECK_THROWS_AS(train_step(st, batch, cfg), std::invalid_argument);
}

TEST_CASE("poly lr decay shows up in the reported rate") {
    auto data = tiny_data();
    auto cfg = tiny_train();
    cfg.poly_lr_decay = true;
    cfg.max_iterations = 10;
    auto st = init_train_state(tiny_net(), cfg);
    auto batch = make_batch(data, cfg, 4);
    auto r0 = train_step(st, batch, cfg);
    auto r1 = train_step(st, batch, cfg);
    CHECK(r0.lr == doctest::Approx(cfg.lr));
    CHECK(r1.lr < r0.lr);
    CHECK(r1.lr == doctest::Approx(cfg.lr * std::pow(1.0 - 1.0 / 10.0, 0.9)));
}

TEST_CASE("checkpoint save / load") {
    auto data = tiny_data();
    auto cfg = tiny_train();
    auto st = init_train_state(tiny_net(), cfg);
    auto batch = make_batch(data, cfg, 6);
    train_step(st, batch, cfg);

    const auto path = temp_dir("ckpt");
    save_checkpoint(st, path);

    SUBCASE("round trip is byte-identical") {
        auto st2 = load_checkpoint(path);
        const auto path2 = temp_dir("ckpt2");
        save_checkpoint(st2, path2);
        std::ifstream a(path, std::ios::binary), b(path2, std::ios::binary);
        std::vector<char> ba{std::istreambuf_iterator<char>(a), {}};
        std::vector<char> bb{std::istreambuf_iterator<char>(b), {}};
        CHECK(ba == bb);
    }
    SUBCASE("restored model reproduces the forward pass") {
        auto st2 = load_checkpoint(path);
        CHECK(st2.step == st.step);
        std::mt19937_64 rng(9);
        Tensor x = Tensor::randn({1, 8, 8, 8}, rng, 1.f);
        auto o1 = forward_once(st.model, x);
        auto o2 = forward_once(st2.model, x);
        CHECK(o1.logits_a.data == o2.logits_a.data);
    }
    SUBCASE("config mismatch is rejected") {
        NetworkConfig other = tiny_net();
        other.base_width = 4;
        CHECK_THROWS(load_checkpoint(path, other));
    }
    SUBCASE("missing file is a clean error") {
        CHECK_THROWS(load_checkpoint(temp_dir("absent")));
    }
}

TEST_CASE("train writes artifacts and can resume to an identical loss stream") {
    auto data = tiny_data();
    auto cfg = tiny_train();
    cfg.max_iterations = 6;
    cfg.val_interval = 3;

    // uninterrupted reference run
    std::vector<double> full_losses;
    const auto ref_dir = temp_dir("ref_run");
    train(tiny_net(), cfg, data, ref_dir, false,
          [&](int64_t, const StepResult& r) { full_losses.push_back(r.losses.l_total); });
    REQUIRE(full_losses.size() == 6);
    CHECK(fs::exists(ref_dir / "config.json"));
    CHECK(fs::exists(ref_dir / "log.jsonl"));
    CHECK(fs::exists(ref_dir / "ckpt_last"));
    CHECK(fs::exists(ref_dir / "ckpt_best"));

    // interrupted at step 3, then resumed
    std::vector<double> resumed_losses;
    const auto dir = temp_dir("resume_run");
    TrainConfig half = cfg;
    half.max_iterations = 3;
    train(tiny_net(), half, data, dir, false,
          [&](int64_t, const StepResult& r) { resumed_losses.push_back(r.losses.l_total); });
    train(tiny_net(), cfg, data, dir, /*resume=*/true,
          [&](int64_t, const StepResult& r) { resumed_losses.push_back(r.losses.l_total); });
    REQUIRE(resumed_losses.size() == 6);
    for (size_t i = 0; i < 6; ++i)
        CHECK(resumed_losses[i] == doctest::Approx(full_losses[i]).epsilon(1e-12));
}

TEST_CASE("single-step run logs exactly one line") {
    auto data = tiny_data();
    auto cfg = tiny_train();
    cfg.max_iterations = 1;
    cfg.val_interval = 1;
    const auto dir = temp_dir("one_step");
    train(tiny_net(), cfg, data, dir);
    std::ifstream log(dir / "log.jsonl");
    int steps = 0, vals = 0;
    std::string line;
    while (std::getline(log, line)) {
        if (line.find("l_total") != std::string::npos) ++steps;
        if (line.find("val_dice") != std::string::npos) ++vals;
    }
    CHECK(steps == 1);
    CHECK(vals == 1);
}

TEST_CASE("ablation_matrix") {
    TrainConfig base = tiny_train();

    SUBCASE("no axes yields the base run") {
        auto m = ablation_matrix(base, {});
        REQUIRE(m.size() == 1);
        CHECK(m[0].first == "base");
    }
    SUBCASE("component axes produce the full component table") {
        auto m = ablation_matrix(base, {"IL", "DL", "DS", "scales"});
        std::vector<std::string> names;
        for (auto& [n, c] : m) names.push_back(n);
        const std::vector<std::string> want{
            "Baseline(VNet)", "+IL",           "+IL+DL",
            "+IL+DS",         "+DL+DS+S1",     "+DL+DS+S1+S2",
            "+DL+DS+S1+S2+S3", "+DL+DS+IL"};
        CHECK(names == want);
        // baseline is fully supervised-only
        CHECK_FALSE(m[0].second.ablation.use_feedback);
        CHECK_FALSE(m[0].second.ablation.use_consistency);
        // scale-restricted rows carry the right subsets
        CHECK(m[4].second.ablation.scales == std::set<int>{1});
        CHECK(m[5].second.ablation.scales == std::set<int>({1, 2}));
        // the full row uses every scale
        CHECK(m[7].second.ablation.scales.empty());
        CHECK(m[7].second.ablation.use_feedback);
        CHECK(m[7].second.ablation.use_distinct_losses);
        CHECK(m[7].second.ablation.use_deep_supervision);
    }
    SUBCASE("t axis sweeps 2, 3, 4") {
        auto m = ablation_matrix(base, {"t"});
        REQUIRE(m.size() == 3);
        CHECK(m[0].first == "t=2");
        CHECK(m[0].second.ablation.t == 2);
        CHECK(m[2].first == "t=4");
        CHECK(m[2].second.ablation.t == 4);
    }
    SUBCASE("lambda axis sweeps three magnitudes") {
        auto m = ablation_matrix(base, {"lambda"});
        REQUIRE(m.size() == 3);
        CHECK(m[0].second.ablation.lambda == doctest::Approx(1e-2));
        CHECK(m[1].second.ablation.lambda == doctest::Approx(1e-3));
        CHECK(m[2].second.ablation.lambda == doctest::Approx(1e-4));
    }
    SUBCASE("encoding axis covers the four encodings") {
        auto m = ablation_matrix(base, {"encoding"});
        std::vector<std::string> names;
        for (auto& [n, c] : m) names.push_back(n);
        CHECK(names == std::vector<std::string>({"A-B", "B-A", "|A-B|", "Entropy"}));
    }
    SUBCASE("unknown axis throws") {
        CHECK_THROWS_AS(ablation_matrix(base, {"dropout"}), std::invalid_argument);
    }
}

TEST_CASE("config validation catches bad values") {
    auto cfg = tiny_train();
    cfg.batch_size = 3;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = tiny_train();
    cfg.ablation.t = 0;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = tiny_train();
    cfg.ablation.encoding = "A*B";
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
    cfg = tiny_train();
    cfg.label_fraction = 0;
    CHECK_THROWS_AS(cfg.validate(), std::invalid_argument);
}

TEST_CASE("loss weights default to the truncated schedule") {
    TrainConfig cfg;
    auto lw3 = cfg.loss_weights(3);
    CHECK(lw3.ds_weights == std::vector<double>({0.8, 0.6, 0.4}));
    auto lw5 = cfg.loss_weights(5);
    CHECK(lw5.ds_weights == std::vector<double>({0.8, 0.6, 0.4, 0.2, 0.1}));
    cfg.ds_weights = {1.0, 2.0};
    CHECK(cfg.loss_weights(2).ds_weights == std::vector<double>({1.0, 2.0}));
    CHECK_THROWS(cfg.loss_weights(3));
}
