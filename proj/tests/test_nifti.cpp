#include <doctest.h>

#include <fstream>

#include "lefed/nifti.hpp"

using namespace lefed;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir() {
    auto d = fs::temp_directory_path() / "lefed_nifti_test";
    fs::create_directories(d);
    return d;
}

Volume sample_volume() {
    Volume v;
    std::mt19937_64 rng(11);
    v.data = Tensor::randn({5, 6, 7}, rng, 10.f);
    v.spacing = {0.8, 0.8, 2.5};
    v.origin = {-10, 4, 2.5};
    return v;
}

std::vector<char> slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("uncompressed round trip preserves data and geometry") {
    const auto path = temp_dir() / "vol.nii";
    auto v = sample_volume();
    write_nifti(path, v);
    auto n = read_nifti(path);
    REQUIRE(n.dims == std::vector<int64_t>({5, 6, 7}));
    auto back = nifti_to_volume(n);
    CHECK(back.data.shape == v.data.shape);
    CHECK(back.data.data == v.data.data);
    for (int a = 0; a < 3; ++a) {
        CHECK(back.spacing[a] == doctest::Approx(v.spacing[a]).epsilon(1e-6));
        CHECK(back.origin[a] == doctest::Approx(v.origin[a]).epsilon(1e-5));
    }
}

TEST_CASE("gzip round trip") {
    const auto path = temp_dir() / "vol.nii.gz";
    auto v = sample_volume();
    write_nifti(path, v);
    auto back = nifti_to_volume(read_nifti(path));
    CHECK(back.data.data == v.data.data);
    CHECK(back.spacing[2] == doctest::Approx(2.5));

    // the gzip stream really is compressed (magic bytes)
    auto bytes = slurp(path);
    REQUIRE(bytes.size() > 2);
    CHECK(static_cast<unsigned char>(bytes[0]) == 0x1f);
    CHECK(static_cast<unsigned char>(bytes[1]) == 0x8b);
}

TEST_CASE("label round trip stays integral") {
    const auto path = temp_dir() / "seg.nii.gz";
    SegmentationMask m;
    m.labels = Labels({4, 4, 4});
    for (int64_t i = 0; i < m.labels.numel(); ++i) m.labels[i] = i % 2;
    write_nifti(path, m, {1, 1, 1}, {0, 0, 0});
    auto lab = nifti_to_labels(read_nifti(path));
    CHECK(lab.shape == m.labels.shape);
    CHECK(lab.data == m.labels.data);
}

TEST_CASE("writes are deterministic") {
    const auto a = temp_dir() / "det_a.nii";
    const auto b = temp_dir() / "det_b.nii";
    auto v = sample_volume();
    write_nifti(a, v);
    write_nifti(b, v);
    CHECK(slurp(a) == slurp(b));
}

TEST_CASE("rank-4 payloads are rejected as volumes") {
    const auto path = temp_dir() / "vol4.nii";
    auto v = sample_volume();
    write_nifti(path, v);
    // byte-patch the header to dims (5, 6, 1, 7): same voxel count as the
    // (5, 6, 7) payload, but a genuine non-singleton 4th axis
    {
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        REQUIRE(f.good());
        const int16_t dims[5] = {4, 5, 6, 1, 7};
        f.seekp(40);  // nifti dim[] field
        f.write(reinterpret_cast<const char*>(dims), sizeof(dims));
    }
    auto n = read_nifti(path);
    REQUIRE(n.dims.size() == 4);
    CHECK_THROWS_AS(nifti_to_volume(n), std::runtime_error);
    CHECK_THROWS_AS(nifti_to_labels(n), std::runtime_error);
}

TEST_CASE("missing file raises a clean error") {
    CHECK_THROWS(read_nifti(temp_dir() / "absent.nii.gz"));
}
