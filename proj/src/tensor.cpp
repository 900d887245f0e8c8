#include "ordalign/tensor.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <limits>

namespace ordalign {

namespace {

constexpr char kMagic[4] = {'O', 'T', 'E', 'N'};
constexpr std::size_t kMaxRank = 16;

void put_u32(std::ostream& os, std::uint32_t v) {
  unsigned char b[4];
  for (int i = 0; i < 4; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(b), 4);
}

void put_u64(std::ostream& os, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xff);
  os.write(reinterpret_cast<const char*>(b), 8);
}

std::uint32_t get_u32(std::istream& is) {
  unsigned char b[4];
  if (!is.read(reinterpret_cast<char*>(b), 4)) throw IoError("tensor read: truncated header");
  std::uint32_t v = 0;
  for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(b[i]) << (8 * i);
  return v;
}

std::uint64_t get_u64(std::istream& is) {
  unsigned char b[8];
  if (!is.read(reinterpret_cast<char*>(b), 8)) throw IoError("tensor read: truncated header");
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= static_cast<std::uint64_t>(b[i]) << (8 * i);
  return v;
}

template <typename T>
void put_scalar(std::ostream& os, T v) {
  if constexpr (sizeof(T) == 4) {
    std::uint32_t bits;
    std::memcpy(&bits, &v, 4);
    put_u32(os, bits);
  } else {
    std::uint64_t bits;
    std::memcpy(&bits, &v, 8);
    put_u64(os, bits);
  }
}

template <typename T>
T get_scalar(std::istream& is) {
  T v;
  if constexpr (sizeof(T) == 4) {
    std::uint32_t bits = get_u32(is);
    std::memcpy(&v, &bits, 4);
  } else {
    std::uint64_t bits = get_u64(is);
    std::memcpy(&v, &bits, 8);
  }
  return v;
}

template <typename T>
void write_oten_impl(std::ostream& os, const TensorT<T>& t, std::uint8_t dtype) {
  if (!t.defined()) throw UsageError("tensor write: undefined tensor");
  os.write(kMagic, 4);
  put_u32(os, static_cast<std::uint32_t>(t.rank()));
  for (std::size_t d : t.shape()) put_u64(os, static_cast<std::uint64_t>(d));
  os.put(static_cast<char>(dtype));
  for (T v : t.data()) put_scalar(os, v);
  if (!os) throw IoError("tensor write: stream failure");
}

template <typename T>
TensorT<T> read_payload(std::istream& is, Shape shape) {
  std::vector<T> values(shape_numel(shape));
  for (auto& v : values) {
    v = get_scalar<T>(is);
    if (!is) throw IoError("tensor read: truncated payload");
  }
  return TensorT<T>::from_data(std::move(shape), std::move(values));
}

}  // namespace

void write_oten(std::ostream& os, const TensorT<float>& t) { write_oten_impl(os, t, 0); }
void write_oten(std::ostream& os, const TensorT<double>& t) { write_oten_impl(os, t, 1); }

void save_oten(const std::string& path, const TensorT<float>& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("tensor write: cannot open " + path);
  write_oten(os, t);
}

void save_oten(const std::string& path, const TensorT<double>& t) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("tensor write: cannot open " + path);
  write_oten(os, t);
}

OtenAny read_oten(std::istream& is) {
  char magic[4];
  if (!is.read(magic, 4) || std::memcmp(magic, kMagic, 4) != 0)
    throw IoError("tensor read: bad magic");
  const std::uint32_t rank = get_u32(is);
  if (rank > kMaxRank) throw IoError("tensor read: implausible rank " + std::to_string(rank));
  Shape shape(rank);
  std::size_t numel = 1;
  for (auto& d : shape) {
    const std::uint64_t dv = get_u64(is);
    if (dv == 0 || dv > std::numeric_limits<std::size_t>::max() / 8 ||
        (numel != 0 && dv > (std::size_t(1) << 40) / numel))
      throw IoError("tensor read: implausible dim " + std::to_string(dv));
    d = static_cast<std::size_t>(dv);
    numel *= d;
  }
  const int tag = is.get();
  if (tag != 0 && tag != 1) throw IoError("tensor read: unknown dtype tag " + std::to_string(tag));
  OtenAny out;
  out.dtype = tag;
  if (tag == 0)
    out.f32 = read_payload<float>(is, std::move(shape));
  else
    out.f64 = read_payload<double>(is, std::move(shape));
  return out;
}

OtenAny load_oten(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw IoError("tensor read: cannot open " + path);
  return read_oten(is);
}

TensorT<float> load_oten_f32(const std::string& path) {
  OtenAny any = load_oten(path);
  return any.dtype == 0 ? any.f32 : any.f64.template cast<float>();
}

TensorT<double> load_oten_f64(const std::string& path) {
  OtenAny any = load_oten(path);
  return any.dtype == 1 ? any.f64 : any.f32.template cast<double>();
}

}  // namespace ordalign
