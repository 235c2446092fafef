#include <cstring>
#include <fstream>
#include <iterator>

#include "safe/errors.hpp"
#include "safe/feature_store.hpp"

namespace safe {

namespace {

constexpr char kMagic[4] = {'S', 'A', 'F', 'T'};

void put_le(std::vector<std::uint8_t>& out, std::uint64_t v, std::size_t bytes) {
    for (std::size_t i = 0; i < bytes; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

class Reader {
public:
    explicit Reader(const std::vector<std::uint8_t>& bytes) : bytes_(bytes) {}

    std::uint64_t get_le(std::size_t n, const char* what) {
        if (bytes_.size() - pos_ < n) throw FormatError(std::string("truncated ") + what, pos_);
        std::uint64_t v = 0;
        for (std::size_t i = 0; i < n; ++i) v |= static_cast<std::uint64_t>(bytes_[pos_ + i]) << (8 * i);
        pos_ += n;
        return v;
    }

    std::size_t pos() const { return pos_; }
    std::size_t remaining() const { return bytes_.size() - pos_; }

private:
    const std::vector<std::uint8_t>& bytes_;
    std::size_t pos_ = 0;
};

}  // namespace

std::vector<std::uint8_t> encode_tensor(const Tensor& t) {
    if (t.rank() > 255) throw DimensionError("tensor rank exceeds 255");
    std::vector<std::uint8_t> out(kMagic, kMagic + 4);
    put_le(out, kTensorFileVersion, 2);
    put_le(out, static_cast<std::uint8_t>(t.dtype()), 1);
    put_le(out, t.rank(), 1);
    for (auto d : t.dims()) put_le(out, d, 8);
    out.reserve(out.size() + t.size() * dtype_size(t.dtype()));
    for (double v : t.data()) {
        if (t.dtype() == DType::Float32) {
            std::uint32_t bits;
            const float f = static_cast<float>(v);
            std::memcpy(&bits, &f, 4);
            put_le(out, bits, 4);
        } else {
            std::uint64_t bits;
            std::memcpy(&bits, &v, 8);
            put_le(out, bits, 8);
        }
    }
    return out;
}

Tensor decode_tensor(const std::vector<std::uint8_t>& bytes) {
    Reader r(bytes);
    if (bytes.size() < 4) throw FormatError("truncated magic", 0);
    if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw FormatError("bad magic, expected SAFT", 0);
    r.get_le(4, "magic");
    const auto version_at = r.pos();
    const auto version = r.get_le(2, "version");
    if (version != kTensorFileVersion) {
        throw FormatError("unsupported version " + std::to_string(version), version_at);
    }
    const auto dtype_at = r.pos();
    const auto code = r.get_le(1, "dtype");
    if (code != 1 && code != 2) throw FormatError("unknown dtype code " + std::to_string(code), dtype_at);
    const DType dtype = static_cast<DType>(code);
    const auto rank_at = r.pos();
    const auto rank = r.get_le(1, "rank");
    if (rank == 0) throw FormatError("rank must be at least 1", rank_at);
    std::vector<std::size_t> dims;
    std::uint64_t count = 1;
    const std::size_t width = dtype_size(dtype);
    for (std::uint64_t i = 0; i < rank; ++i) {
        const auto at = r.pos();
        const auto d = r.get_le(8, "dims");
        if (d == 0) throw FormatError("zero-sized dimension", at);
        if (count > (std::uint64_t{1} << 60) / d) throw FormatError("element count overflows", at);
        count *= d;
        dims.push_back(static_cast<std::size_t>(d));
    }
    if (r.remaining() < count * width) throw FormatError("truncated payload", r.pos() + r.remaining());
    if (r.remaining() > count * width) throw FormatError("trailing bytes after payload", r.pos() + count * width);
    std::vector<double> values(count);
    for (auto& v : values) {
        if (dtype == DType::Float32) {
            const auto bits = static_cast<std::uint32_t>(r.get_le(4, "payload"));
            float f;
            std::memcpy(&f, &bits, 4);
            v = f;
        } else {
            const auto bits = r.get_le(8, "payload");
            std::memcpy(&v, &bits, 8);
        }
    }
    return Tensor(std::move(dims), std::move(values), dtype);
}

void write_tensor(const std::filesystem::path& path, const Tensor& t) {
    const auto bytes = encode_tensor(t);
    std::ofstream os(path, std::ios::binary | std::ios::trunc);
    if (!os) throw DataError("cannot open " + path.string() + " for writing");
    os.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
    if (!os) throw DataError("failed writing " + path.string());
}

Tensor read_tensor(const std::filesystem::path& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw DataError("cannot open " + path.string());
    std::vector<std::uint8_t> bytes((std::istreambuf_iterator<char>(is)), std::istreambuf_iterator<char>());
    try {
        return decode_tensor(bytes);
    } catch (const FormatError& e) {
        throw FormatError(path.string() + ": " + std::string(e.what()).substr(0, std::string(e.what()).find(" (at byte")),
                          e.offset());
    }
}

}  // namespace safe
