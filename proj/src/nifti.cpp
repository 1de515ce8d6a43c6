#include "lefed/nifti.hpp"

#include <zlib.h>

#include <cstring>

namespace lefed {

namespace {

#pragma pack(push, 1)
struct Nifti1Header {
    int32_t sizeof_hdr;
    char data_type[10];
    char db_name[18];
    int32_t extents;
    int16_t session_error;
    char regular;
    char dim_info;
    int16_t dim[8];
    float intent_p1, intent_p2, intent_p3;
    int16_t intent_code;
    int16_t datatype;
    int16_t bitpix;
    int16_t slice_start;
    float pixdim[8];
    float vox_offset;
    float scl_slope;
    float scl_inter;
    int16_t slice_end;
    char slice_code;
    char xyzt_units;
    float cal_max, cal_min;
    float slice_duration;
    float toffset;
    int32_t glmax, glmin;
    char descrip[80];
    char aux_file[24];
    int16_t qform_code;
    int16_t sform_code;
    float quatern_b, quatern_c, quatern_d;
    float qoffset_x, qoffset_y, qoffset_z;
    float srow_x[4], srow_y[4], srow_z[4];
    char intent_name[16];
    char magic[4];
};
#pragma pack(pop)
static_assert(sizeof(Nifti1Header) == 348, "NIfTI-1 header must be 348 bytes");

constexpr int16_t kDtUint8 = 2, kDtInt16 = 4, kDtInt32 = 8, kDtFloat32 = 16,
                  kDtFloat64 = 64;

struct GzFileCloser {
    void operator()(gzFile f) const {
        if (f) gzclose(f);
    }
};
using GzPtr = std::unique_ptr<gzFile_s, GzFileCloser>;

void gz_read_exact(gzFile f, void* buf, size_t n, const std::string& path) {
    if (gzread(f, buf, static_cast<unsigned>(n)) != static_cast<int>(n))
        throw std::runtime_error("nifti: truncated file: " + path);
}

void gz_write_exact(gzFile f, const void* buf, size_t n, const std::string& path) {
    if (gzwrite(f, buf, static_cast<unsigned>(n)) != static_cast<int>(n))
        throw std::runtime_error("nifti: write failed: " + path);
}

}  // namespace

NiftiData read_nifti(const std::filesystem::path& path) {
    if (!std::filesystem::exists(path))
        throw std::runtime_error("nifti: no such file: " + path.string());
    GzPtr f(gzopen(path.string().c_str(), "rb"));
    if (!f) throw std::runtime_error("nifti: cannot open: " + path.string());
    Nifti1Header h{};
    gz_read_exact(f.get(), &h, sizeof(h), path.string());
    if (h.sizeof_hdr != 348)
        throw std::runtime_error(
            "nifti: unsupported header (bad size or byte order): " + path.string());
    if (std::strncmp(h.magic, "n+1", 3) != 0 && std::strncmp(h.magic, "ni1", 3) != 0)
        throw std::runtime_error("nifti: bad magic: " + path.string());
    if (h.dim[0] < 1 || h.dim[0] > 7)
        throw std::runtime_error("nifti: bad rank: " + path.string());

    NiftiData out;
    int rank = h.dim[0];
    while (rank > 1 && h.dim[rank] == 1) --rank;  // drop trailing singletons
    int64_t n = 1;
    for (int i = 1; i <= rank; ++i) {
        if (h.dim[i] < 1)
            throw std::runtime_error("nifti: non-positive dim: " + path.string());
        out.dims.push_back(h.dim[i]);
        n *= h.dim[i];
    }
    for (int i = 0; i < 3 && i < rank; ++i) {
        const float s = h.pixdim[i + 1];
        if (!(s > 0))
            throw std::runtime_error("nifti: spacing missing or non-positive: " +
                                     path.string());
        out.spacing[static_cast<size_t>(i)] = s;
    }
    out.origin = {h.srow_x[3], h.srow_y[3], h.srow_z[3]};

    const int64_t skip = static_cast<int64_t>(h.vox_offset) -
                         static_cast<int64_t>(sizeof(h));
    if (skip < 0) throw std::runtime_error("nifti: bad vox_offset: " + path.string());
    std::vector<char> junk(static_cast<size_t>(skip));
    if (skip > 0) gz_read_exact(f.get(), junk.data(), junk.size(), path.string());

    out.values.resize(static_cast<size_t>(n));
    auto load = [&](auto tag) {
        using T = decltype(tag);
        std::vector<T> raw(static_cast<size_t>(n));
        gz_read_exact(f.get(), raw.data(), raw.size() * sizeof(T), path.string());
        for (int64_t i = 0; i < n; ++i)
            out.values[static_cast<size_t>(i)] =
                static_cast<float>(raw[static_cast<size_t>(i)]);
    };
    switch (h.datatype) {
        case kDtUint8: load(uint8_t{}); break;
        case kDtInt16: load(int16_t{}); break;
        case kDtInt32: load(int32_t{}); break;
        case kDtFloat32: load(float{}); break;
        case kDtFloat64: load(double{}); break;
        default:
            throw std::runtime_error("nifti: unsupported datatype " +
                                     std::to_string(h.datatype) + ": " + path.string());
    }
    if (h.scl_slope != 0 && !(h.scl_slope == 1 && h.scl_inter == 0))
        for (auto& v : out.values) v = v * h.scl_slope + h.scl_inter;
    return out;
}

namespace {
// file order is x-fastest; internal rank-3 tensors are row-major (x slowest)
template <class Store>
void reindex_from_file(const NiftiData& n, Store&& store) {
    const int64_t nx = n.dims[0], ny = n.dims[1], nz = n.dims[2];
    size_t src = 0;
    for (int64_t k = 0; k < nz; ++k)
        for (int64_t j = 0; j < ny; ++j)
            for (int64_t i = 0; i < nx; ++i) store(i, j, k, n.values[src++]);
}
}  // namespace

Volume nifti_to_volume(const NiftiData& n) {
    if (n.dims.size() != 3)
        throw std::runtime_error("nifti: expected rank-3 volume, got rank " +
                                 std::to_string(n.dims.size()));
    Volume v;
    v.data = Tensor({n.dims[0], n.dims[1], n.dims[2]});
    v.spacing = n.spacing;
    v.origin = n.origin;
    reindex_from_file(n, [&](int64_t i, int64_t j, int64_t k, float x) {
        v.data.at3(i, j, k) = x;
    });
    v.validate();
    return v;
}

Labels nifti_to_labels(const NiftiData& n) {
    if (n.dims.size() != 3)
        throw std::runtime_error("nifti: expected rank-3 label volume, got rank " +
                                 std::to_string(n.dims.size()));
    Labels l({n.dims[0], n.dims[1], n.dims[2]});
    reindex_from_file(n, [&](int64_t i, int64_t j, int64_t k, float x) {
        l.at3(i, j, k) = static_cast<int32_t>(std::lround(x));
    });
    return l;
}

void write_nifti(const std::filesystem::path& path, const Tensor& data,
                 const std::array<double, 3>& spacing,
                 const std::array<double, 3>& origin, bool as_labels) {
    if (data.rank() != 3) throw std::invalid_argument("write_nifti: rank-3 only");
    Nifti1Header h{};
    h.sizeof_hdr = 348;
    h.regular = 'r';
    h.dim[0] = 3;
    for (int i = 0; i < 3; ++i) h.dim[i + 1] = static_cast<int16_t>(data.dim(i));
    for (int i = 4; i < 8; ++i) h.dim[i] = 1;
    h.datatype = as_labels ? kDtUint8 : kDtFloat32;
    h.bitpix = as_labels ? 8 : 32;
    h.pixdim[0] = 1;
    for (int i = 0; i < 3; ++i)
        h.pixdim[i + 1] = static_cast<float>(spacing[static_cast<size_t>(i)]);
    h.vox_offset = 352;
    h.scl_slope = 1;
    h.xyzt_units = 2;  // mm
    h.sform_code = 1;
    h.srow_x[0] = static_cast<float>(spacing[0]);
    h.srow_y[1] = static_cast<float>(spacing[1]);
    h.srow_z[2] = static_cast<float>(spacing[2]);
    h.srow_x[3] = static_cast<float>(origin[0]);
    h.srow_y[3] = static_cast<float>(origin[1]);
    h.srow_z[3] = static_cast<float>(origin[2]);
    std::memcpy(h.magic, "n+1", 4);

    const bool gz = path.string().size() > 3 &&
                    path.string().substr(path.string().size() - 3) == ".gz";
    // mode "wT" writes transparently (no gzip container) for plain .nii
    GzPtr f(gzopen(path.string().c_str(), gz ? "wb" : "wbT"));
    if (!f) throw std::runtime_error("nifti: cannot create: " + path.string());
    gz_write_exact(f.get(), &h, sizeof(h), path.string());
    const char ext[4] = {0, 0, 0, 0};
    gz_write_exact(f.get(), ext, 4, path.string());

    const int64_t nx = data.dim(0), ny = data.dim(1), nz = data.dim(2);
    if (as_labels) {
        std::vector<uint8_t> raw(static_cast<size_t>(data.numel()));
        size_t dst = 0;
        for (int64_t k = 0; k < nz; ++k)
            for (int64_t j = 0; j < ny; ++j)
                for (int64_t i = 0; i < nx; ++i)
                    raw[dst++] = static_cast<uint8_t>(
                        std::lround(data.at3(i, j, k)));
        gz_write_exact(f.get(), raw.data(), raw.size(), path.string());
    } else {
        std::vector<float> raw(static_cast<size_t>(data.numel()));
        size_t dst = 0;
        for (int64_t k = 0; k < nz; ++k)
            for (int64_t j = 0; j < ny; ++j)
                for (int64_t i = 0; i < nx; ++i) raw[dst++] = data.at3(i, j, k);
        gz_write_exact(f.get(), raw.data(), raw.size() * sizeof(float),
                       path.string());
    }
}

void write_nifti(const std::filesystem::path& path, const SegmentationMask& m,
                 const std::array<double, 3>& spacing,
                 const std::array<double, 3>& origin) {
    Tensor t(m.labels.shape);
    for (int64_t i = 0; i < t.numel(); ++i)
        t[i] = static_cast<float>(m.labels[i]);
    write_nifti(path, t, spacing, origin, true);
}

}  // namespace lefed
