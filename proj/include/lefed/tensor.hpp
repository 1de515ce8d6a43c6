#ifndef LEFED_TENSOR_HPP
#define LEFED_TENSOR_HPP

#include <cstdint>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>
#include <vector>

namespace lefed {

// Dense row-major n-d array. Rank is dynamic; the network code uses rank-4
// (channels, depth, height, width), volumes use rank-3.
template <class S>
struct TensorT {
    std::vector<int64_t> shape;
    std::vector<S> data;

    TensorT() = default;
    explicit TensorT(std::vector<int64_t> sh, S fill = S(0))
        : shape(std::move(sh)),
          data(static_cast<size_t>(numel_of(shape)), fill) {}

    static int64_t numel_of(const std::vector<int64_t>& sh) {
        int64_t n = 1;
        for (int64_t d : sh) {
            if (d < 0) throw std::invalid_argument("negative tensor dim");
            n *= d;
        }
        return n;
    }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int rank() const { return static_cast<int>(shape.size()); }
    int64_t dim(int i) const { return shape.at(static_cast<size_t>(i)); }

    S& operator[](int64_t i) { return data[static_cast<size_t>(i)]; }
    const S& operator[](int64_t i) const { return data[static_cast<size_t>(i)]; }

    // rank-4 accessor
    S& at4(int64_t c, int64_t d, int64_t h, int64_t w) {
        return data[static_cast<size_t>(((c * shape[1] + d) * shape[2] + h) * shape[3] + w)];
    }
    const S& at4(int64_t c, int64_t d, int64_t h, int64_t w) const {
        return data[static_cast<size_t>(((c * shape[1] + d) * shape[2] + h) * shape[3] + w)];
    }
    // rank-3 accessor
    S& at3(int64_t i, int64_t j, int64_t k) {
        return data[static_cast<size_t>((i * shape[1] + j) * shape[2] + k)];
    }
    const S& at3(int64_t i, int64_t j, int64_t k) const {
        return data[static_cast<size_t>((i * shape[1] + j) * shape[2] + k)];
    }

    bool same_shape(const TensorT& o) const { return shape == o.shape; }

    void fill(S v) { std::fill(data.begin(), data.end(), v); }

    static TensorT zeros_like(const TensorT& o) { return TensorT(o.shape); }

    static TensorT randn(const std::vector<int64_t>& sh, std::mt19937_64& rng,
                         S stddev = S(1)) {
        TensorT t(sh);
        std::normal_distribution<double> nd(0.0, static_cast<double>(stddev));
        for (auto& v : t.data) v = static_cast<S>(nd(rng));
        return t;
    }

    std::string shape_str() const {
        std::ostringstream os;
        os << "(";
        for (size_t i = 0; i < shape.size(); ++i)
            os << shape[i] << (i + 1 < shape.size() ? "," : "");
        os << ")";
        return os.str();
    }
};

template <class S>
void check_same_shape(const TensorT<S>& a, const TensorT<S>& b, const char* where) {
    if (!a.same_shape(b))
        throw std::invalid_argument(std::string(where) + ": shape mismatch " +
                                    a.shape_str() + " vs " + b.shape_str());
}

using Tensor = TensorT<float>;

}  // namespace lefed

#endif
