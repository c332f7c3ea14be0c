#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <memory>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace segbench {

// Dense row-major array of doubles, rank <= 4, all extents >= 1.
// Immutable after construction; copies share storage.
class Tensor {
public:
    Tensor() = default;

    static Tensor from_data(std::vector<int> shape, std::vector<double> data) {
        Tensor t;
        t.init(std::move(shape));
        if (static_cast<int64_t>(data.size()) != t.numel_)
            throw std::invalid_argument("Tensor: data length " + std::to_string(data.size()) +
                                        " does not match shape " + t.shape_str());
        t.data_ = std::make_shared<const std::vector<double>>(std::move(data));
        return t;
    }

    static Tensor zeros(std::vector<int> shape) { return full(std::move(shape), 0.0); }

    static Tensor full(std::vector<int> shape, double v) {
        Tensor t;
        t.init(std::move(shape));
        t.data_ = std::make_shared<const std::vector<double>>(t.numel_, v);
        return t;
    }

    static Tensor scalar(double v) { return full({1}, v); }

    bool defined() const { return data_ != nullptr; }
    int rank() const { return static_cast<int>(shape_.size()); }
    const std::vector<int>& shape() const { return shape_; }
    int extent(int axis) const { return shape_.at(static_cast<size_t>(axis)); }
    int64_t numel() const { return numel_; }
    bool is_scalar() const { return numel_ == 1; }

    double operator[](int64_t i) const { return (*data_)[static_cast<size_t>(i)]; }
    const double* data() const { return data_->data(); }
    const std::vector<double>& vec() const { return *data_; }

    // rank-4 accessor; lower ranks index as if right-aligned is not supported,
    // callers reshape explicitly instead
    double at4(int n, int c, int h, int w) const {
        return (*data_)[static_cast<size_t>(((static_cast<int64_t>(n) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    // same storage, new shape; numel must match
    Tensor reshaped(std::vector<int> shape) const {
        Tensor t;
        t.init(std::move(shape));
        if (t.numel_ != numel_)
            throw std::invalid_argument("reshaped: numel mismatch " + shape_str() + " -> " + t.shape_str());
        t.data_ = data_;
        return t;
    }

    std::string shape_str() const {
        std::string s = "(";
        for (size_t i = 0; i < shape_.size(); ++i) {
            if (i) s += ",";
            s += std::to_string(shape_[i]);
        }
        return s + ")";
    }

    double max_abs() const {
        double m = 0.0;
        for (double v : *data_) m = std::max(m, v < 0 ? -v : v);
        return m;
    }

    // --- tensor v1 container ---------------------------------------------
    // text header "tensor v1 <rank> <d1> ... <dk>\n" + little-endian float32
    // payload. Lossy for doubles; used for activation dumps and checkpoints.

    void write_v1(std::ostream& os) const {
        os << "tensor v1 " << rank();
        for (int d : shape_) os << ' ' << d;
        os << '\n';
        std::vector<unsigned char> payload(static_cast<size_t>(numel_) * 4);
        for (int64_t i = 0; i < numel_; ++i) {
            float f = static_cast<float>((*data_)[static_cast<size_t>(i)]);
            uint32_t bits;
            std::memcpy(&bits, &f, 4);
            payload[static_cast<size_t>(i) * 4 + 0] = static_cast<unsigned char>(bits & 0xff);
            payload[static_cast<size_t>(i) * 4 + 1] = static_cast<unsigned char>((bits >> 8) & 0xff);
            payload[static_cast<size_t>(i) * 4 + 2] = static_cast<unsigned char>((bits >> 16) & 0xff);
            payload[static_cast<size_t>(i) * 4 + 3] = static_cast<unsigned char>((bits >> 24) & 0xff);
        }
        os.write(reinterpret_cast<const char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
    }

    static Tensor read_v1(std::istream& is) {
        std::string line;
        if (!std::getline(is, line)) throw std::runtime_error("tensor v1: missing header");
        std::istringstream hs(line);
        std::string word, ver;
        int rk = -1;
        hs >> word >> ver >> rk;
        if (word != "tensor" || ver != "v1" || rk < 0 || rk > 4)
            throw std::runtime_error("tensor v1: bad header '" + line + "'");
        std::vector<int> shape(static_cast<size_t>(rk));
        for (int i = 0; i < rk; ++i) {
            if (!(hs >> shape[static_cast<size_t>(i)]) || shape[static_cast<size_t>(i)] < 1)
                throw std::runtime_error("tensor v1: bad extents in '" + line + "'");
        }
        int64_t n = 1;
        for (int d : shape) n *= d;
        std::vector<unsigned char> payload(static_cast<size_t>(n) * 4);
        is.read(reinterpret_cast<char*>(payload.data()), static_cast<std::streamsize>(payload.size()));
        if (is.gcount() != static_cast<std::streamsize>(payload.size()))
            throw std::runtime_error("tensor v1: truncated payload");
        std::vector<double> data(static_cast<size_t>(n));
        for (int64_t i = 0; i < n; ++i) {
            uint32_t bits = static_cast<uint32_t>(payload[static_cast<size_t>(i) * 4 + 0]) |
                            (static_cast<uint32_t>(payload[static_cast<size_t>(i) * 4 + 1]) << 8) |
                            (static_cast<uint32_t>(payload[static_cast<size_t>(i) * 4 + 2]) << 16) |
                            (static_cast<uint32_t>(payload[static_cast<size_t>(i) * 4 + 3]) << 24);
            float f;
            std::memcpy(&f, &bits, 4);
            data[static_cast<size_t>(i)] = static_cast<double>(f);
        }
        return Tensor::from_data(std::move(shape), std::move(data));
    }

    void save_v1(const std::string& path) const {
        std::ofstream os(path, std::ios::binary);
        if (!os) throw std::runtime_error("cannot open for writing: " + path);
        write_v1(os);
    }

    static Tensor load_v1(const std::string& path) {
        std::ifstream is(path, std::ios::binary);
        if (!is) throw std::runtime_error("cannot open for reading: " + path);
        return read_v1(is);
    }

private:
    void init(std::vector<int> shape) {
        if (shape.size() > 4) throw std::invalid_argument("Tensor: rank > 4");
        int64_t n = 1;
        for (int d : shape) {
            if (d < 1) throw std::invalid_argument("Tensor: extent < 1 in shape");
            n *= d;
        }
        shape_ = std::move(shape);
        numel_ = n;
    }

    std::vector<int> shape_;
    int64_t numel_ = 0;
    std::shared_ptr<const std::vector<double>> data_;
};

inline int64_t shape_numel(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int d : shape) n *= d;
    return n;
}

} // namespace segbench
