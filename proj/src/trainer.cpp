#include "lefed/trainer.hpp"

#include <cstring>
#include <fstream>
#include <sstream>

#include "lefed/config_json.hpp"
#include "lefed/losses.hpp"

namespace lefed {

namespace {

NetworkConfig effective_network_config(const NetworkConfig& net_cfg,
                                       const AblationFlags& abl) {
    NetworkConfig eff = net_cfg;
    eff.iterations = abl.use_feedback ? abl.t : 1;
    eff.lambda_feedback = abl.use_feedback ? abl.lambda : 0.0;
    return eff;
}

}  // namespace

bool operator==(const NetworkConfig& a, const NetworkConfig& b) {
    return to_json(a) == to_json(b);
}

TrainState init_train_state(const NetworkConfig& net_cfg, const TrainConfig& cfg) {
    net_cfg.validate();
    cfg.validate();
    TrainState st;
    st.model = build_model<float>(effective_network_config(net_cfg, cfg.ablation),
                                  cfg.seed);
    st.rng.seed(cfg.seed ^ 0x72a19e5dULL);
    return st;
}

StepResult train_step(TrainState& st, const PatchBatch& batch,
                      const TrainConfig& cfg) {
    cfg.validate();
    if (batch.labeled.empty())
        throw std::invalid_argument("train_step: batch has no labeled patches");
    for (const auto& ps : batch.labeled)
        if (!ps.mask) throw std::invalid_argument("train_step: labeled patch lacks mask");

    Model& m = st.model;
    const AblationFlags& abl = cfg.ablation;
    const int t_eff = m.cfg.iterations;
    const int first = (abl.include_first_iteration_loss || t_eff == 1) ? 0 : 1;
    const int counted = t_eff - first;
    const auto lw = cfg.loss_weights(m.cfg.num_stages);
    const std::set<int>* scales = abl.scales.empty() ? nullptr : &abl.scales;
    const EncodingKind kind = abl.encoding_kind();

    for (auto& [name, p] : m.params)
        if (p->has_grad()) p->grad.fill(0);

    LossBreakdown bd;
    std::vector<ScaleStats> disc;

    auto run_group = [&](const std::vector<PatchSample>& group, bool labeled) {
        const double inv = 1.0 / (static_cast<double>(group.size()) * counted);
        for (size_t gi = 0; gi < group.size(); ++gi) {
            const auto& ps = group[gi];
            const std::vector<int64_t> dims{ps.image.shape[1], ps.image.shape[2],
                                            ps.image.shape[3]};
            DualOutput prev;
            for (int k = 0; k < t_eff; ++k) {
                Tensor fb;
                const Tensor* fbp = nullptr;
                if (k > 0) {
                    // the feedback is a constant in this iteration's graph
                    fb = feedback_from_output(m.cfg, prev, kind, scales, dims);
                    fbp = &fb;
                }
                if (k < first) {
                    prev = forward_once(m, ps.image, fbp);
                    continue;
                }
                auto art = forward(m, ps.image, fbp);
                if (labeled) {
                    auto sup = supervised_loss(art.logits_a, art.logits_b,
                                               art.ds_logits_a, *ps.mask, lw,
                                               abl.use_deep_supervision,
                                               abl.use_distinct_losses);
                    backward(sup.sum, static_cast<float>(inv));
                    bd.l_dice += sup.dice->value[0] * inv;
                    bd.l_ce += sup.ce->value[0] * inv;
                    bd.l_ds += sup.ds->value[0] * inv;
                    bd.l_sup += sup.sum->value[0] * inv;
                } else {
                    auto uns = consistency_mse(art.logits_a, art.logits_b);
                    backward(uns, static_cast<float>(inv));
                    bd.l_unsup += uns->value[0] * inv;
                }
                prev = to_dual_output(art);
                if (labeled && gi + 1 == group.size() && k + 1 == t_eff) {
                    auto [fa, fbt] = feedback_source_tensors(m.cfg, prev);
                    auto d = compute_discrepancy(fa, fbt, kind);
                    if (scales) d = select_scales(d, *scales);
                    disc = discrepancy_stats(d);
                }
            }
        }
    };

    run_group(batch.labeled, true);
    if (abl.use_consistency && !batch.unlabeled.empty())
        run_group(batch.unlabeled, false);
    bd.l_total = bd.l_sup + bd.l_unsup;
    if (!bd.finite()) {
        std::ostringstream os;
        os << "train_step: non-finite loss at step " << st.step << " (dice=" << bd.l_dice
           << " ce=" << bd.l_ce << " ds=" << bd.l_ds << " unsup=" << bd.l_unsup << ")";
        throw std::runtime_error(os.str());
    }

    const double lr =
        cfg.poly_lr_decay
            ? cfg.lr * std::pow(1.0 - static_cast<double>(st.step) / cfg.max_iterations,
                                cfg.poly_power)
            : cfg.lr;
    const float mom = static_cast<float>(cfg.momentum);
    const float wd = static_cast<float>(cfg.weight_decay);
    const float flr = static_cast<float>(lr);
    for (auto& [name, p] : m.params) {
        auto it = st.momentum.find(name);
        if (it == st.momentum.end())
            it = st.momentum.emplace(name, Tensor::zeros_like(p->value)).first;
        Tensor& v = it->second;
        const bool hg = p->has_grad();
        const int64_t n = p->value.numel();
        for (int64_t i = 0; i < n; ++i) {
            const float g = (hg ? p->grad[i] : 0.0f) + wd * p->value[i];
            v[i] = mom * v[i] + g;
            p->value[i] -= flr * v[i];
        }
    }
    ++st.step;
    return StepResult{bd, std::move(disc), lr};
}

namespace {

json step_log_line(int64_t step, const StepResult& r) {
    json disc = json::array();
    for (const auto& s : r.discrepancy)
        disc.push_back({{"mean_abs", s.mean_abs},
                        {"max_abs", s.max_abs},
                        {"frac_above", s.frac_above}});
    return json{{"step", step},       {"lr", r.lr},
                {"l_dice", r.losses.l_dice}, {"l_ce", r.losses.l_ce},
                {"l_ds", r.losses.l_ds},     {"l_sup", r.losses.l_sup},
                {"l_unsup", r.losses.l_unsup}, {"l_total", r.losses.l_total},
                {"discrepancy", disc}};
}

}  // namespace

TrainResult train(const NetworkConfig& net_cfg, const TrainConfig& cfg,
                  const TrainDataset& data, const std::filesystem::path& run_dir,
                  bool resume, const StepCallback& on_step) {
    net_cfg.validate();
    cfg.validate();
    if (data.labeled.empty()) throw std::invalid_argument("train: no labeled cases");
    std::filesystem::create_directories(run_dir);
    const auto ckpt_last = run_dir / "ckpt_last";
    const auto ckpt_best = run_dir / "ckpt_best";
    const NetworkConfig eff = effective_network_config(net_cfg, cfg.ablation);

    BatchConfig bc{cfg.batch_size, cfg.patch_size, cfg.strict_epoch};
    // with no unlabeled pool the consistency patches are drawn from the
    // labeled cases (their masks are simply unused)
    BatchComposer composer(data.labeled,
                           data.unlabeled.empty() ? data.labeled : data.unlabeled, bc,
                           cfg.seed);

    TrainState st;
    if (resume && std::filesystem::exists(ckpt_last)) {
        st = load_checkpoint(ckpt_last, eff);
        composer.restore(st.sampler_state);
    } else {
        st = init_train_state(net_cfg, cfg);
        std::ofstream cf(run_dir / "config.json");
        cf << json{{"network", to_json(net_cfg)}, {"train", to_json(cfg)}}.dump(2)
           << "\n";
    }

    std::ofstream log(run_dir / "log.jsonl",
                      st.step > 0 ? std::ios::app : std::ios::trunc);
    if (!log) throw std::runtime_error("train: cannot open log at " +
                                       (run_dir / "log.jsonl").string());

    while (st.step < cfg.max_iterations) {
        const auto batch = composer.next();
        StepResult res;
        try {
            res = train_step(st, batch, cfg);
        } catch (const std::exception& e) {
            std::ofstream diag(run_dir / "diagnostic.json");
            diag << json{{"step", st.step}, {"error", e.what()}}.dump(2) << "\n";
            throw;
        }
        log << step_log_line(st.step - 1, res).dump() << "\n";
        log.flush();
        if (on_step) on_step(st.step - 1, res);

        const bool at_val =
            st.step % cfg.val_interval == 0 || st.step == cfg.max_iterations;
        if (at_val) {
            if (!data.val.empty()) {
                auto rep = evaluate(st.model, data.val, cfg.patch_size, cfg.eval_overlap);
                log << json{{"step", st.step - 1},
                            {"val_dice", rep.mean_dice},
                            {"val_jaccard", rep.mean_jaccard}}
                           .dump()
                    << "\n";
                log.flush();
                if (rep.mean_dice > st.best_val_dice) {
                    st.best_val_dice = rep.mean_dice;
                    st.sampler_state = composer.state();
                    save_checkpoint(st, ckpt_best);
                }
            }
            st.sampler_state = composer.state();
            save_checkpoint(st, ckpt_last);
        }
    }
    st.sampler_state = composer.state();
    save_checkpoint(st, ckpt_last);
    if (!std::filesystem::exists(ckpt_best)) save_checkpoint(st, ckpt_best);
    return TrainResult{std::move(st), run_dir};
}

namespace {

constexpr char kCkptMagic[8] = {'L', 'F', 'C', 'K', 'P', 'T', '0', '1'};

void write_u64(std::ostream& os, uint64_t v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(v));
}

uint64_t read_u64(std::istream& is) {
    uint64_t v = 0;
    is.read(reinterpret_cast<char*>(&v), sizeof(v));
    return v;
}

void write_tensor(std::ostream& os, const Tensor& t) {
    write_u64(os, static_cast<uint64_t>(t.numel()));
    os.write(reinterpret_cast<const char*>(t.data.data()),
             static_cast<std::streamsize>(t.data.size() * sizeof(float)));
}

void read_tensor(std::istream& is, Tensor& t) {
    const uint64_t n = read_u64(is);
    if (n != static_cast<uint64_t>(t.numel()))
        throw std::runtime_error("checkpoint: tensor size mismatch");
    is.read(reinterpret_cast<char*>(t.data.data()),
            static_cast<std::streamsize>(t.data.size() * sizeof(float)));
}

}  // namespace

void save_checkpoint(const TrainState& st, const std::filesystem::path& path) {
    std::ostringstream rng_os;
    rng_os << st.rng;
    json meta{{"network", to_json(st.model.cfg)},
              {"step", st.step},
              {"best_val_dice", st.best_val_dice},
              {"rng", rng_os.str()},
              {"sampler_state", st.sampler_state}};
    const std::string header = meta.dump();

    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw std::runtime_error("checkpoint: cannot write " + path.string());
    os.write(kCkptMagic, sizeof(kCkptMagic));
    write_u64(os, header.size());
    os.write(header.data(), static_cast<std::streamsize>(header.size()));
    for (const auto& [name, p] : st.model.params) write_tensor(os, p->value);
    for (const auto& [name, p] : st.model.params) {
        auto it = st.momentum.find(name);
        if (it != st.momentum.end()) {
            write_tensor(os, it->second);
        } else {
            write_tensor(os, Tensor::zeros_like(p->value));
        }
    }
    if (!os) throw std::runtime_error("checkpoint: write failed for " + path.string());
}

TrainState load_checkpoint(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw std::runtime_error("checkpoint: cannot open " + path.string());
    char magic[8];
    is.read(magic, sizeof(magic));
    if (!is || std::memcmp(magic, kCkptMagic, sizeof(magic)) != 0)
        throw std::runtime_error("checkpoint: bad magic / version in " + path.string());
    const uint64_t hlen = read_u64(is);
    std::string header(hlen, '\0');
    is.read(header.data(), static_cast<std::streamsize>(hlen));
    if (!is) throw std::runtime_error("checkpoint: truncated header");
    const json meta = json::parse(header);

    TrainState st;
    st.model = build_model<float>(network_config_from_json(meta.at("network")), 0);
    st.step = meta.at("step").get<int64_t>();
    st.best_val_dice = meta.at("best_val_dice").get<double>();
    st.sampler_state = meta.at("sampler_state").get<std::string>();
    std::istringstream rng_is(meta.at("rng").get<std::string>());
    rng_is >> st.rng;

    for (auto& [name, p] : st.model.params) read_tensor(is, p->value);
    for (auto& [name, p] : st.model.params) {
        Tensor t = Tensor::zeros_like(p->value);
        read_tensor(is, t);
        st.momentum.emplace(name, std::move(t));
    }
    if (!is) throw std::runtime_error("checkpoint: truncated tensor data");
    return st;
}

TrainState load_checkpoint(const std::filesystem::path& path,
                           const NetworkConfig& expected) {
    TrainState st = load_checkpoint(path);
    if (!(st.model.cfg == expected))
        throw std::runtime_error("checkpoint: network config mismatch in " +
                                 path.string());
    return st;
}

std::vector<std::pair<std::string, TrainConfig>> ablation_matrix(
    const TrainConfig& base, const std::set<std::string>& axes) {
    static const std::set<std::string> known{"IL", "DL",     "DS",      "scales",
                                             "t",  "lambda", "encoding"};
    for (const auto& a : axes)
        if (!known.count(a)) throw std::invalid_argument("ablation_matrix: unknown axis " + a);

    std::vector<std::pair<std::string, TrainConfig>> out;
    if (axes.empty()) {
        out.push_back({"base", base});
        return out;
    }

    auto component = [&](bool il, bool dl, bool ds, std::set<int> scales,
                         bool consistency) {
        TrainConfig c = base;
        c.ablation.use_feedback = il;
        c.ablation.use_distinct_losses = dl;
        c.ablation.use_deep_supervision = ds;
        c.ablation.scales = std::move(scales);
        c.ablation.use_consistency = consistency;
        return c;
    };

    if (axes.count("IL") || axes.count("DL") || axes.count("DS") ||
        axes.count("scales")) {
        out.push_back({"Baseline(VNet)", component(false, false, false, {}, false)});
        out.push_back({"+IL", component(true, false, false, {}, true)});
        out.push_back({"+IL+DL", component(true, true, false, {}, true)});
        out.push_back({"+IL+DS", component(true, false, true, {}, true)});
        out.push_back({"+DL+DS+S1", component(true, true, true, {1}, true)});
        out.push_back({"+DL+DS+S1+S2", component(true, true, true, {1, 2}, true)});
        out.push_back(
            {"+DL+DS+S1+S2+S3", component(true, true, true, {1, 2, 3}, true)});
        out.push_back({"+DL+DS+IL", component(true, true, true, {}, true)});
    }
    if (axes.count("t")) {
        for (int t : {2, 3, 4}) {
            TrainConfig c = base;
            c.ablation.use_feedback = true;
            c.ablation.t = t;
            out.push_back({"t=" + std::to_string(t), c});
        }
    }
    if (axes.count("lambda")) {
        for (const auto& [name, l] :
             std::vector<std::pair<std::string, double>>{
                 {"lambda=1e-2", 1e-2}, {"lambda=1e-3", 1e-3}, {"lambda=1e-4", 1e-4}}) {
            TrainConfig c = base;
            c.ablation.use_feedback = true;
            c.ablation.lambda = l;
            out.push_back({name, c});
        }
    }
    if (axes.count("encoding")) {
        for (const char* e : {"A-B", "B-A", "|A-B|", "Entropy"}) {
            TrainConfig c = base;
            c.ablation.use_feedback = true;
            c.ablation.encoding = e;
            out.push_back({e, c});
        }
    }
    return out;
}

}  // namespace lefed
