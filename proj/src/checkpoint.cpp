#include "mmc/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace mmc {

namespace {

constexpr char kMagic[4] = {'M', 'M', 'C', '1'};

void put_u32(std::string& buf, std::uint32_t v) {
  char b[4];
  b[0] = static_cast<char>(v & 0xff);
  b[1] = static_cast<char>((v >> 8) & 0xff);
  b[2] = static_cast<char>((v >> 16) & 0xff);
  b[3] = static_cast<char>((v >> 24) & 0xff);
  buf.append(b, 4);
}

std::uint32_t get_u32(const std::string& buf, std::size_t& pos) {
  if (pos + 4 > buf.size()) throw std::runtime_error("checkpoint: truncated file");
  const unsigned char* p = reinterpret_cast<const unsigned char*>(buf.data() + pos);
  pos += 4;
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) |
         (static_cast<std::uint32_t>(p[3]) << 24);
}

}  // namespace

void save_checkpoint(const std::string& path, const NamedTensors& tensors) {
  std::string buf;
  buf.append(kMagic, 4);
  put_u32(buf, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    put_u32(buf, static_cast<std::uint32_t>(name.size()));
    buf.append(name);
    put_u32(buf, static_cast<std::uint32_t>(t.shape().size()));
    for (auto d : t.shape()) put_u32(buf, static_cast<std::uint32_t>(d));
    // f64 payload; x86-64 doubles are already little-endian
    const auto& data = t.data();
    buf.append(reinterpret_cast<const char*>(data.data()), data.size() * sizeof(double));
  }
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("checkpoint: cannot open " + path + " for writing");
  out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
  if (!out) throw std::runtime_error("checkpoint: write failed for " + path);
}

NamedTensors load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("checkpoint: cannot open " + path);
  std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (buf.size() < 8 || std::memcmp(buf.data(), kMagic, 4) != 0) {
    throw std::runtime_error("checkpoint: bad magic in " + path);
  }
  std::size_t pos = 4;
  const std::uint32_t count = get_u32(buf, pos);
  NamedTensors out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const std::uint32_t name_len = get_u32(buf, pos);
    if (pos + name_len > buf.size()) throw std::runtime_error("checkpoint: truncated file");
    std::string name(buf.data() + pos, name_len);
    pos += name_len;
    const std::uint32_t ndim = get_u32(buf, pos);
    Shape shape(ndim);
    std::int64_t n = 1;
    for (std::uint32_t d = 0; d < ndim; ++d) {
      shape[d] = static_cast<std::int64_t>(get_u32(buf, pos));
      n *= shape[d];
    }
    const std::size_t bytes = static_cast<std::size_t>(n) * sizeof(double);
    if (pos + bytes > buf.size()) throw std::runtime_error("checkpoint: truncated file");
    std::vector<double> data(static_cast<std::size_t>(n));
    std::memcpy(data.data(), buf.data() + pos, bytes);
    pos += bytes;
    out.emplace_back(std::move(name), Tensor::from_data(std::move(shape), std::move(data)));
  }
  if (pos != buf.size()) {
    throw std::runtime_error("checkpoint: trailing bytes in " + path);
  }
  return out;
}

void restore_checkpoint(const std::string& path, const NamedTensors& dest) {
  NamedTensors loaded = load_checkpoint(path);
  for (const auto& [name, t] : dest) {
    bool found = false;
    for (const auto& [lname, lt] : loaded) {
      if (lname != name) continue;
      if (lt.shape() != t.shape()) {
        throw std::runtime_error("checkpoint: shape mismatch for " + name + ": file has " +
                                 shape_str(lt.shape()) + ", expected " +
                                 shape_str(t.shape()));
      }
      const_cast<Tensor&>(t).mutable_data() = lt.data();
      found = true;
      break;
    }
    if (!found) throw std::runtime_error("checkpoint: missing tensor " + name);
  }
}

}  // namespace mmc
