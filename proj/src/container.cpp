#include "lvlm/container.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <iterator>
#include <unordered_set>

#include "lvlm/error.hpp"

namespace lvlm {
namespace {

template <typename U>
void put_le(std::string& out, U value) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((value >> (8 * i)) & 0xff));
}

class Reader {
 public:
  Reader(std::string_view bytes, std::string_view source) : bytes_(bytes), source_(source) {}

  bool has(std::size_t n) const { return pos_ + n <= bytes_.size(); }
  std::size_t position() const { return pos_; }

  template <typename U>
  U get_le(const std::string& context) {
    need(sizeof(U), context);
    U v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
    pos_ += sizeof(U);
    return v;
  }

  std::string_view take(std::size_t n, const std::string& context) {
    need(n, context);
    auto s = bytes_.substr(pos_, n);
    pos_ += n;
    return s;
  }

 private:
  void need(std::size_t n, const std::string& context) const {
    if (!has(n)) {
      fail(Errc::truncated, std::string(source_) + ": truncated while reading " + context + " (offset " +
                                std::to_string(pos_) + ", need " + std::to_string(n) + " bytes, " +
                                std::to_string(bytes_.size() - pos_) + " left)");
    }
  }

  std::string_view bytes_;
  std::string_view source_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string encode_tensors(const NamedTensors& tensors) {
  std::unordered_set<std::string> seen;
  std::string out = "LVLM";
  put_le<std::uint32_t>(out, kContainerVersion);
  put_le<std::uint32_t>(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    if (!seen.insert(t.name).second) fail(Errc::duplicate_name, "duplicate tensor name '" + t.name + "'");
    if (t.name.size() > 0xffff) fail(Errc::invalid_argument, "tensor name longer than 65535 bytes");
    if (t.value.rank() > 0xff) fail(Errc::invalid_argument, "tensor '" + t.name + "' has too many dimensions");
    put_le<std::uint16_t>(out, static_cast<std::uint16_t>(t.name.size()));
    out += t.name;
    out.push_back(0);  // f32
    out.push_back(static_cast<char>(t.value.rank()));
    for (auto d : t.value.shape()) put_le<std::uint32_t>(out, static_cast<std::uint32_t>(d));
    for (float v : t.value.values()) put_le<std::uint32_t>(out, std::bit_cast<std::uint32_t>(v));
  }
  return out;
}

NamedTensors decode_tensors(std::string_view bytes, std::string_view source) {
  Reader r(bytes, source);
  if (!r.has(4) || bytes.substr(0, 4) != "LVLM") {
    fail(Errc::bad_magic, std::string(source) + ": not a tensor container (bad magic)");
  }
  r.take(4, "magic");
  const auto version = r.get_le<std::uint32_t>("version");
  if (version != kContainerVersion) {
    fail(Errc::bad_version, std::string(source) + ": unsupported container version " + std::to_string(version) +
                                " (supported: " + std::to_string(kContainerVersion) + ")");
  }
  const auto count = r.get_le<std::uint32_t>("entry count");
  NamedTensors out;
  std::unordered_set<std::string> seen;
  for (std::uint32_t e = 0; e < count; ++e) {
    const std::string where = "entry " + std::to_string(e);
    const auto len = r.get_le<std::uint16_t>(where + " name length");
    std::string name(r.take(len, where + " name"));
    const std::string ctx = "entry '" + name + "'";
    const auto dtype = r.get_le<std::uint8_t>(ctx + " dtype");
    if (dtype != 0) fail(Errc::bad_dtype, std::string(source) + ": " + ctx + " has unsupported dtype " + std::to_string(dtype));
    const auto ndim = r.get_le<std::uint8_t>(ctx + " rank");
    Shape shape(ndim);
    for (auto& d : shape) d = r.get_le<std::uint32_t>(ctx + " dims");
    const std::size_t n = shape_numel(shape);
    auto payload = r.take(n * 4, ctx + " payload");
    std::vector<float> data(n);
    for (std::size_t i = 0; i < n; ++i) {
      std::uint32_t bits = 0;
      for (int b = 0; b < 4; ++b) bits |= static_cast<std::uint32_t>(static_cast<unsigned char>(payload[i * 4 + b])) << (8 * b);
      data[i] = std::bit_cast<float>(bits);
    }
    if (!seen.insert(name).second) fail(Errc::duplicate_name, std::string(source) + ": duplicate tensor name '" + name + "'");
    out.push_back({std::move(name), Tensor(std::move(shape), std::move(data))});
  }
  if (r.position() != bytes.size()) {
    fail(Errc::length_mismatch, std::string(source) + ": " + std::to_string(bytes.size() - r.position()) +
                                    " trailing bytes after the last entry");
  }
  return out;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) fail(Errc::io, "cannot open '" + path.string() + "' for reading");
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  if (in.bad()) fail(Errc::io, "error reading '" + path.string() + "'");
  return bytes;
}

void write_file(const std::filesystem::path& path, std::string_view bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) fail(Errc::io, "cannot open '" + path.string() + "' for writing");
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) fail(Errc::io, "error writing '" + path.string() + "'");
}

void save_tensors(const std::filesystem::path& path, const NamedTensors& tensors) {
  write_file(path, encode_tensors(tensors));
}

NamedTensors load_tensors(const std::filesystem::path& path) {
  return decode_tensors(read_file(path), path.string());
}

}  // namespace lvlm
