#include "capsteer/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>

#include "capsteer/errors.hpp"

namespace capsteer {

namespace {

void put_u32(std::string& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_u64(std::string& out, std::uint64_t v) {
  for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xFF));
}

void put_f32(std::string& out, float f) {
  put_u32(out, std::bit_cast<std::uint32_t>(f));
}

struct Reader {
  const std::string& buf;
  std::size_t pos = 0;
  const std::string& path;

  void need(std::size_t n) const {
    if (pos + n > buf.size()) {
      throw FormatError(path + ": truncated checkpoint (need " +
                        std::to_string(n) + " bytes at offset " +
                        std::to_string(pos) + ", have " +
                        std::to_string(buf.size() - pos) + ")");
    }
  }
  std::uint32_t u32() {
    need(4);
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) {
      v |= static_cast<std::uint32_t>(static_cast<unsigned char>(buf[pos + static_cast<std::size_t>(i)]))
           << (8 * i);
    }
    pos += 4;
    return v;
  }
  std::uint64_t u64() {
    need(8);
    std::uint64_t v = 0;
    for (int i = 0; i < 8; ++i) {
      v |= static_cast<std::uint64_t>(static_cast<unsigned char>(buf[pos + static_cast<std::size_t>(i)]))
           << (8 * i);
    }
    pos += 8;
    return v;
  }
  std::string bytes(std::size_t n) {
    need(n);
    std::string s = buf.substr(pos, n);
    pos += n;
    return s;
  }
  float f32() { return std::bit_cast<float>(u32()); }
};

}  // namespace

void write_checkpoint(const std::string& path, const nlohmann::json& header,
                      const std::vector<NamedTensor>& tensors) {
  std::string out;
  out += "CSTR";
  put_u32(out, kCheckpointVersion);
  const std::string h = header.dump();
  put_u64(out, h.size());
  out += h;
  put_u32(out, static_cast<std::uint32_t>(tensors.size()));
  for (const auto& t : tensors) {
    put_u32(out, static_cast<std::uint32_t>(t.name.size()));
    out += t.name;
    put_u32(out, static_cast<std::uint32_t>(t.dims.size()));
    std::uint64_t count = 1;
    for (std::uint64_t d : t.dims) {
      put_u64(out, d);
      count *= d;
    }
    if (count != t.data.size()) {
      throw ShapeError("checkpoint tensor '" + t.name +
                       "': dims disagree with data length");
    }
    for (float f : t.data) put_f32(out, f);
  }

  const std::string tmp = path + ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw FormatError("cannot open checkpoint for write: " + tmp);
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw FormatError("short write to checkpoint: " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    throw FormatError("cannot move checkpoint into place: " + path + ": " +
                      ec.message());
  }
}

Checkpoint read_checkpoint(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw FormatError("cannot open checkpoint: " + path);
  std::string buf((std::istreambuf_iterator<char>(f)),
                  std::istreambuf_iterator<char>());
  Reader r{buf, 0, path};

  if (r.bytes(4) != "CSTR") {
    throw FormatError(path + ": bad checkpoint magic, expected CSTR");
  }
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw FormatError(path + ": unsupported checkpoint version " +
                      std::to_string(version));
  }
  Checkpoint ck;
  const std::uint64_t hlen = r.u64();
  const std::string htxt = r.bytes(hlen);
  try {
    ck.header = nlohmann::json::parse(htxt);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path + ": malformed checkpoint header: " + e.what());
  }
  const std::uint32_t count = r.u32();
  ck.tensors.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    NamedTensor t;
    t.name = r.bytes(r.u32());
    const std::uint32_t nd = r.u32();
    if (nd > 8) throw FormatError(path + ": implausible tensor rank");
    std::uint64_t total = 1;
    for (std::uint32_t d = 0; d < nd; ++d) {
      t.dims.push_back(r.u64());
      total *= t.dims.back();
    }
    if (total > (1ull << 32)) {
      throw FormatError(path + ": implausible tensor size");
    }
    t.data.resize(total);
    for (std::uint64_t j = 0; j < total; ++j) t.data[j] = r.f32();
    ck.tensors.push_back(std::move(t));
  }
  return ck;
}

std::uint64_t fingerprint(const std::vector<NamedTensor>& tensors) {
  std::vector<const NamedTensor*> sorted;
  sorted.reserve(tensors.size());
  for (const auto& t : tensors) sorted.push_back(&t);
  std::sort(sorted.begin(), sorted.end(),
            [](const NamedTensor* a, const NamedTensor* b) {
              return a->name < b->name;
            });

  std::uint64_t h = 0xCBF29CE484222325ull;
  auto mix = [&h](unsigned char byte) {
    h ^= byte;
    h *= 0x100000001B3ull;
  };
  for (const NamedTensor* t : sorted) {
    for (char c : t->name) mix(static_cast<unsigned char>(c));
    mix(0);
    for (std::uint64_t d : t->dims) {
      for (int i = 0; i < 8; ++i) mix(static_cast<unsigned char>((d >> (8 * i)) & 0xFF));
    }
    for (float f : t->data) {
      const std::uint32_t bits = std::bit_cast<std::uint32_t>(f);
      for (int i = 0; i < 4; ++i) mix(static_cast<unsigned char>((bits >> (8 * i)) & 0xFF));
    }
  }
  return h;
}

std::string fingerprint_hex(std::uint64_t fp) {
  static const char* digits = "0123456789abcdef";
  std::string s(16, '0');
  for (int i = 15; i >= 0; --i) {
    s[static_cast<std::size_t>(i)] = digits[fp & 0xF];
    fp >>= 4;
  }
  return s;
}

}  // namespace capsteer
