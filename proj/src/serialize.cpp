#include "fusedopt/serialize.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace fusedopt {

namespace {

static_assert(std::endian::native == std::endian::little,
              "serialization assumes a little-endian host");

template <typename T>
void write_raw(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T read_raw(std::istream& is) {
    T v;
    is.read(reinterpret_cast<char*>(&v), sizeof(T));
    if (!is) throw TensorError("tensor deserialization: unexpected end of stream");
    return v;
}

}  // namespace

void write_tensor(std::ostream& os, const Tensor& t) {
    write_raw<std::uint32_t>(os, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) write_raw<std::uint32_t>(os, static_cast<std::uint32_t>(d));
    write_raw<std::uint8_t>(os, static_cast<std::uint8_t>(t.precision()));
    if (t.precision() == Precision::fp32) {
        for (std::size_t i = 0; i < t.size(); ++i) write_raw<float>(os, static_cast<float>(t[i]));
    } else {
        for (std::size_t i = 0; i < t.size(); ++i) write_raw<double>(os, t[i]);
    }
}

Tensor read_tensor(std::istream& is) {
    const auto rank = read_raw<std::uint32_t>(is);
    if (rank > 8) throw TensorError("tensor deserialization: bad rank");
    Shape shape(rank);
    for (auto& d : shape) d = read_raw<std::uint32_t>(is);
    const auto tag = read_raw<std::uint8_t>(is);
    if (tag > 1) throw TensorError("tensor deserialization: bad precision tag");
    const Precision prec = static_cast<Precision>(tag);
    Tensor t(shape, prec);
    if (prec == Precision::fp32) {
        for (std::size_t i = 0; i < t.size(); ++i) t[i] = read_raw<float>(is);
    } else {
        for (std::size_t i = 0; i < t.size(); ++i) t[i] = read_raw<double>(is);
    }
    return t;
}

void save_tensor(const std::string& path, const Tensor& t) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw TensorError("cannot open for writing: " + path);
    write_tensor(os, t);
}

Tensor load_tensor(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw TensorError("cannot open for reading: " + path);
    return read_tensor(is);
}

}  // namespace fusedopt
