#include "catagg/tensor_io.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

namespace catagg {

static_assert(std::endian::native == std::endian::little, "tensor files assume a little-endian host");

namespace {

constexpr char kMagic[4] = {'C', 'A', 'T', 'T'};

void read_exact(std::istream& in, void* dst, std::size_t n, const char* what) {
  in.read(static_cast<char*>(dst), static_cast<std::streamsize>(n));
  if (static_cast<std::size_t>(in.gcount()) != n) {
    throw LoadError(std::string("tensor file truncated while reading ") + what);
  }
}

}  // namespace

void write_tensor(std::ostream& out, const Tensor& t) {
  if (t.rank() > 255) throw ArgumentError("tensor rank too large to serialize");
  out.write(kMagic, 4);
  const std::uint8_t tag = static_cast<std::uint8_t>(t.dtype());
  const std::uint8_t rank = static_cast<std::uint8_t>(t.rank());
  out.put(static_cast<char>(tag));
  out.put(static_cast<char>(rank));
  for (auto e : t.shape()) {
    const std::uint32_t v = static_cast<std::uint32_t>(e);
    out.write(reinterpret_cast<const char*>(&v), 4);
  }
  dispatch(t.dtype(), [&]<class T>() {
    auto d = t.data<T>();
    out.write(reinterpret_cast<const char*>(d.data()),
              static_cast<std::streamsize>(d.size() * sizeof(T)));
  });
  if (!out) throw IoError("failed writing tensor data");
}

Tensor read_tensor(std::istream& in) {
  char magic[4];
  read_exact(in, magic, 4, "magic");
  if (std::memcmp(magic, kMagic, 4) != 0) throw LoadError("bad tensor magic");
  std::uint8_t header[2];
  read_exact(in, header, 2, "header");
  if (header[0] > 1) throw LoadError("unknown tensor dtype tag " + std::to_string(header[0]));
  Shape shape(header[1]);
  for (auto& e : shape) {
    std::uint32_t v = 0;
    read_exact(in, &v, 4, "extents");
    e = v;
  }
  Tensor t(shape, static_cast<DType>(header[0]));
  dispatch(t.dtype(), [&]<class T>() {
    auto d = t.data_mut<T>();
    read_exact(in, d.data(), d.size() * sizeof(T), "data");
  });
  return t;
}

void save_tensor(const std::string& path, const Tensor& t) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open '" + path + "' for writing");
  write_tensor(out, t);
}

Tensor load_tensor(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open '" + path + "'");
  return read_tensor(in);
}

}  // namespace catagg
