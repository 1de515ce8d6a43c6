#include "lefed/dataset.hpp"

#include <fstream>

#include <json.hpp>

#include "lefed/nifti.hpp"

namespace lefed {

namespace fs = std::filesystem;
using nlohmann::json;

Manifest load_manifest(const fs::path& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("manifest: cannot open " + path.string());
    json j = json::parse(in);
    if (!j.contains("cases") || !j["cases"].is_array())
        throw std::runtime_error("manifest: missing \"cases\" array in " + path.string());
    Manifest m;
    const fs::path base = path.parent_path();
    for (const auto& c : j["cases"]) {
        CaseEntry e;
        e.id = c.at("id").get<std::string>();
        fs::path img = c.at("image").get<std::string>();
        e.image = img.is_absolute() ? img : base / img;
        if (c.contains("label")) {
            fs::path lab = c["label"].get<std::string>();
            e.label = lab.is_absolute() ? lab : base / lab;
        }
        m.cases.push_back(std::move(e));
    }
    return m;
}

void save_manifest(const Manifest& m, const fs::path& path) {
    json j;
    j["cases"] = json::array();
    const fs::path base = path.parent_path();
    for (const auto& c : m.cases) {
        json e;
        e["id"] = c.id;
        e["image"] = fs::relative(c.image, base).string();
        if (c.label) e["label"] = fs::relative(*c.label, base).string();
        j["cases"].push_back(e);
    }
    std::ofstream out(path);
    if (!out) throw std::runtime_error("manifest: cannot write " + path.string());
    out << j.dump(2) << "\n";
}

std::pair<Volume, std::optional<SegmentationMask>> load_volume(const fs::path& path) {
    Volume v = nifti_to_volume(read_nifti(path));
    std::optional<SegmentationMask> mask;
    // sibling label per layout convention
    const fs::path parent = path.parent_path();
    if (parent.filename() == "images") {
        const fs::path lab = parent.parent_path() / "labels" / path.filename();
        if (fs::exists(lab)) {
            SegmentationMask m;
            m.labels = nifti_to_labels(read_nifti(lab));
            int32_t mx = 1;
            for (int64_t i = 0; i < m.labels.numel(); ++i) mx = std::max(mx, m.labels[i]);
            m.num_classes = mx + 1;
            m.validate_paired(v);
            mask = std::move(m);
        }
    }
    return {std::move(v), std::move(mask)};
}

std::pair<Volume, std::optional<SegmentationMask>> load_case(const CaseEntry& c) {
    Volume v = nifti_to_volume(read_nifti(c.image));
    std::optional<SegmentationMask> mask;
    if (c.label) {
        SegmentationMask m;
        m.labels = nifti_to_labels(read_nifti(*c.label));
        int32_t mx = 1;
        for (int64_t i = 0; i < m.labels.numel(); ++i) mx = std::max(mx, m.labels[i]);
        m.num_classes = mx + 1;
        m.validate_paired(v);
        mask = std::move(m);
    }
    return {std::move(v), std::move(mask)};
}

namespace {

// symmetric edge-value padding up to the patch size
template <class T, class Get>
void pad_copy(const std::vector<int64_t>& in_sh, const std::vector<int64_t>& out_sh,
              const std::array<int64_t, 3>& before, TensorT<T>& out, Get get,
              int64_t chan_offset = 0) {
    for (int64_t i = 0; i < out_sh[0]; ++i)
        for (int64_t j = 0; j < out_sh[1]; ++j)
            for (int64_t k = 0; k < out_sh[2]; ++k) {
                const int64_t si = std::clamp<int64_t>(i - before[0], 0, in_sh[0] - 1);
                const int64_t sj = std::clamp<int64_t>(j - before[1], 0, in_sh[1] - 1);
                const int64_t sk = std::clamp<int64_t>(k - before[2], 0, in_sh[2] - 1);
                out[chan_offset + (i * out_sh[1] + j) * out_sh[2] + k] = get(si, sj, sk);
            }
}

}  // namespace

PatchSample sample_patch(const Volume& v, const std::optional<SegmentationMask>& m,
                         const std::array<int64_t, 3>& size, std::mt19937_64& rng,
                         const std::string& case_id) {
    v.validate();
    if (m) m->validate_paired(v);
    const auto& sh = v.data.shape;
    std::array<int64_t, 3> before{0, 0, 0};
    std::vector<int64_t> psh(3);
    bool padded = false;
    for (int a = 0; a < 3; ++a) {
        psh[static_cast<size_t>(a)] = std::max(sh[static_cast<size_t>(a)],
                                               size[static_cast<size_t>(a)]);
        const int64_t pad = psh[static_cast<size_t>(a)] - sh[static_cast<size_t>(a)];
        before[static_cast<size_t>(a)] = pad / 2;
        padded = padded || pad > 0;
    }
    // padded working copies only when needed
    const Tensor* img = &v.data;
    Tensor padded_img;
    Labels padded_lab;
    const Labels* lab = m ? &m->labels : nullptr;
    if (padded) {
        padded_img = Tensor(psh);
        pad_copy(sh, psh, before, padded_img,
                 [&](int64_t i, int64_t j, int64_t k) { return v.data.at3(i, j, k); });
        img = &padded_img;
        if (m) {
            padded_lab = Labels(psh);
            pad_copy(sh, psh, before, padded_lab, [&](int64_t i, int64_t j, int64_t k) {
                return m->labels.at3(i, j, k);
            });
            lab = &padded_lab;
        }
    }
    PatchSample s;
    s.case_id = case_id;
    s.padded = padded;
    for (int a = 0; a < 3; ++a) {
        const int64_t room = psh[static_cast<size_t>(a)] - size[static_cast<size_t>(a)];
        s.corner[static_cast<size_t>(a)] =
            room > 0 ? static_cast<int64_t>(rng() % static_cast<uint64_t>(room + 1)) : 0;
    }
    s.image = Tensor({1, size[0], size[1], size[2]});
    if (m) s.mask = Labels({size[0], size[1], size[2]});
    for (int64_t i = 0; i < size[0]; ++i)
        for (int64_t j = 0; j < size[1]; ++j)
            for (int64_t k = 0; k < size[2]; ++k) {
                const int64_t si = s.corner[0] + i, sj = s.corner[1] + j,
                              sk = s.corner[2] + k;
                s.image.at4(0, i, j, k) = img->at3(si, sj, sk);
                if (m) s.mask->at3(i, j, k) = lab->at3(si, sj, sk);
            }
    return s;
}

std::pair<Volume, SegmentationMask> generate_synthetic_case(const SyntheticSpec& spec) {
    spec.validate();
    std::mt19937_64 rng(spec.seed ^ 0x9e3779b97f4a7c15ULL);
    const auto& g = spec.grid_size;
    Volume v;
    v.data = Tensor({g[0], g[1], g[2]});
    SegmentationMask m;
    m.num_classes = 2;
    m.labels = Labels({g[0], g[1], g[2]});

    std::uniform_real_distribution<double> unit(0.0, 1.0);
    for (int b = 0; b < spec.num_blobs; ++b) {
        const double rmax = spec.blob_radius_range.second;
        double center[3], semi[3];
        for (int a = 0; a < 3; ++a) {
            const double lo = rmax, hi = static_cast<double>(g[static_cast<size_t>(a)]) - rmax;
            center[a] = lo + (hi - lo) * unit(rng);
            semi[a] = spec.blob_radius_range.first +
                      (spec.blob_radius_range.second - spec.blob_radius_range.first) *
                          unit(rng);
        }
        const double amp = 0.6 + 0.8 * unit(rng);
        for (int64_t i = 0; i < g[0]; ++i)
            for (int64_t j = 0; j < g[1]; ++j)
                for (int64_t k = 0; k < g[2]; ++k) {
                    const double di = (static_cast<double>(i) - center[0]) / semi[0];
                    const double dj = (static_cast<double>(j) - center[1]) / semi[1];
                    const double dk = (static_cast<double>(k) - center[2]) / semi[2];
                    const double r2 = di * di + dj * dj + dk * dk;
                    if (r2 < 1.0) {
                        v.data.at3(i, j, k) += static_cast<float>(amp * (1.0 - r2));
                        m.labels.at3(i, j, k) = 1;
                    }
                }
    }
    if (spec.noise_sigma > 0) {
        std::normal_distribution<double> noise(0.0, spec.noise_sigma);
        for (auto& x : v.data.data) x += static_cast<float>(noise(rng));
    }
    return {std::move(v), std::move(m)};
}

std::pair<std::vector<std::string>, std::vector<std::string>> split_labeled_unlabeled(
    const std::vector<std::string>& case_ids, double label_fraction, uint64_t seed) {
    if (case_ids.empty()) throw std::invalid_argument("split: empty case list");
    if (!(label_fraction > 0) || label_fraction > 1)
        throw std::invalid_argument("split: label_fraction must be in (0, 1]");
    const size_t n = case_ids.size();
    const size_t k = std::max<size_t>(
        1, static_cast<size_t>(std::llround(label_fraction * static_cast<double>(n))));
    std::vector<std::string> order = case_ids;
    std::mt19937_64 rng(seed ^ 0x51ab51edULL);
    std::shuffle(order.begin(), order.end(), rng);
    return {std::vector<std::string>(order.begin(), order.begin() + static_cast<long>(k)),
            std::vector<std::string>(order.begin() + static_cast<long>(k), order.end())};
}

EpochSampler::EpochSampler(size_t pool_size, uint64_t seed, bool strict_epoch)
    : pool_size_(pool_size), strict_epoch_(strict_epoch), rng_(seed) {
    if (pool_size_ == 0) throw std::invalid_argument("EpochSampler: empty pool");
    reshuffle();
}

void EpochSampler::reshuffle() {
    order_.resize(pool_size_);
    for (size_t i = 0; i < pool_size_; ++i) order_[i] = i;
    std::shuffle(order_.begin(), order_.end(), rng_);
    cursor_ = 0;
}

std::string EpochSampler::state() const {
    std::ostringstream os;
    os << rng_ << "\n" << cursor_ << " " << order_.size();
    for (size_t i : order_) os << " " << i;
    return os.str();
}

void EpochSampler::restore(const std::string& s) {
    std::istringstream is(s);
    is >> rng_ >> cursor_;
    size_t n = 0;
    is >> n;
    order_.resize(n);
    for (auto& i : order_) is >> i;
    if (!is) throw std::runtime_error("EpochSampler: corrupt state");
}

size_t EpochSampler::next() {
    if (cursor_ >= order_.size()) {
        if (strict_epoch_)
            throw std::runtime_error("EpochSampler: pool exhausted within epoch");
        reshuffle();
    }
    return order_[cursor_++];
}

BatchComposer::BatchComposer(std::vector<PreprocessedCase> labeled_pool,
                             std::vector<PreprocessedCase> unlabeled_pool,
                             const BatchConfig& cfg, uint64_t seed)
    : labeled_(std::move(labeled_pool)),
      unlabeled_(std::move(unlabeled_pool)),
      cfg_(cfg),
      labeled_sampler_(labeled_.empty() ? 1 : labeled_.size(), seed ^ 0xA1,
                       cfg.strict_epoch),
      unlabeled_sampler_(unlabeled_.empty() ? 1 : unlabeled_.size(), seed ^ 0xB2,
                         cfg.strict_epoch),
      patch_rng_(seed ^ 0xC3) {
    if (labeled_.empty()) throw std::invalid_argument("BatchComposer: no labeled cases");
    if (unlabeled_.empty())
        throw std::invalid_argument("BatchComposer: no unlabeled cases");
    if (cfg.batch_size < 2 || cfg.batch_size % 2 != 0)
        throw std::invalid_argument("BatchComposer: batch_size must be even and >= 2");
    for (const auto& c : labeled_)
        if (!c.mask) throw std::invalid_argument("BatchComposer: unlabeled case in labeled pool");
}

std::string BatchComposer::state() const {
    std::ostringstream os;
    os << labeled_sampler_.state() << "\n|\n" << unlabeled_sampler_.state() << "\n|\n"
       << patch_rng_;
    return os.str();
}

void BatchComposer::restore(const std::string& s) {
    const auto p1 = s.find("\n|\n");
    const auto p2 = s.find("\n|\n", p1 + 3);
    if (p1 == std::string::npos || p2 == std::string::npos)
        throw std::runtime_error("BatchComposer: corrupt state");
    labeled_sampler_.restore(s.substr(0, p1));
    unlabeled_sampler_.restore(s.substr(p1 + 3, p2 - p1 - 3));
    std::istringstream is(s.substr(p2 + 3));
    is >> patch_rng_;
    if (!is) throw std::runtime_error("BatchComposer: corrupt state");
}

PatchBatch BatchComposer::next() {
    PatchBatch b;
    const int half = cfg_.batch_size / 2;
    for (int i = 0; i < half; ++i) {
        const auto& c = labeled_[labeled_sampler_.next()];
        b.labeled.push_back(sample_patch(c.image, c.mask, cfg_.patch_size, patch_rng_, c.id));
    }
    for (int i = 0; i < half; ++i) {
        const auto& c = unlabeled_[unlabeled_sampler_.next()];
        b.unlabeled.push_back(
            sample_patch(c.image, std::nullopt, cfg_.patch_size, patch_rng_, c.id));
    }
    return b;
}

}  // namespace lefed
