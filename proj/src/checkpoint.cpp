#include "nif/checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>

namespace nif {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

namespace {

constexpr char kMagic[4] = {'N', 'I', 'F', '1'};

void put_u32(std::string& out, std::uint32_t v) {
  char buf[4];
  std::memcpy(buf, &v, 4);
  out.append(buf, 4);
}

std::uint32_t crc_of(const char* data, std::size_t n) {
  return static_cast<std::uint32_t>(crc32(0L, reinterpret_cast<const Bytef*>(data), static_cast<uInt>(n)));
}

class Reader {
 public:
  explicit Reader(const std::string& bytes) : bytes_(bytes) {}

  std::uint32_t u32() {
    std::uint32_t v;
    std::memcpy(&v, take(4), 4);
    return v;
  }
  std::string str(std::size_t n) { return std::string(take(n), n); }
  const char* take(std::size_t n) {
    if (n > bytes_.size() - pos_) throw CorruptCheckpoint("checkpoint truncated");
    const char* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }
  std::size_t pos() const { return pos_; }

 private:
  const std::string& bytes_;
  std::size_t pos_ = 0;
};

}  // namespace

Checkpoint make_checkpoint(const Model& model, nlohmann::json meta) {
  Checkpoint c;
  c.model = model.config();
  c.meta = std::move(meta);
  for (const auto& [name, tensor] : model.named_tensors()) c.tensors.emplace_back(name, *tensor);
  return c;
}

std::string serialize_checkpoint(const Checkpoint& c) {
  std::string out(kMagic, 4);
  put_u32(out, kCheckpointVersion);
  const std::string header = nlohmann::json{{"model", to_json(c.model)}, {"meta", c.meta}}.dump();
  put_u32(out, static_cast<std::uint32_t>(header.size()));
  out += header;
  put_u32(out, static_cast<std::uint32_t>(c.tensors.size()));
  for (const auto& [name, t] : c.tensors) {
    put_u32(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    put_u32(out, static_cast<std::uint32_t>(t.shape().size()));
    for (std::size_t d : t.shape()) put_u32(out, static_cast<std::uint32_t>(d));
    out.append(reinterpret_cast<const char*>(t.data()), t.size() * sizeof(float));
  }
  put_u32(out, crc_of(out.data(), out.size()));
  return out;
}

Checkpoint deserialize_checkpoint(const std::string& bytes) {
  if (bytes.size() < 12) throw CorruptCheckpoint("checkpoint truncated");
  if (std::memcmp(bytes.data(), kMagic, 4) != 0) throw CorruptCheckpoint("bad checkpoint magic");
  Reader r(bytes);
  r.take(4);
  const std::uint32_t version = r.u32();
  if (version != kCheckpointVersion) {
    throw VersionMismatch("checkpoint format version " + std::to_string(version) + ", expected " +
                          std::to_string(kCheckpointVersion));
  }
  std::uint32_t stored_crc;
  std::memcpy(&stored_crc, bytes.data() + bytes.size() - 4, 4);
  if (stored_crc != crc_of(bytes.data(), bytes.size() - 4)) throw CorruptCheckpoint("checkpoint checksum mismatch");

  Checkpoint c;
  try {
    const nlohmann::json header = nlohmann::json::parse(r.str(r.u32()));
    c.model = model_config_from_json(header.at("model"));
    c.meta = header.at("meta");
  } catch (const nlohmann::json::exception& e) {
    throw CorruptCheckpoint(std::string("bad checkpoint header: ") + e.what());
  }
  const std::uint32_t count = r.u32();
  for (std::uint32_t i = 0; i < count; ++i) {
    std::string name = r.str(r.u32());
    const std::uint32_t rank = r.u32();
    if (rank == 0 || rank > 8) throw CorruptCheckpoint("bad tensor rank for " + name);
    std::vector<std::size_t> shape(rank);
    std::size_t n = 1;
    for (auto& d : shape) {
      d = r.u32();
      n *= d;
    }
    if (n == 0 || n * sizeof(float) > bytes.size()) throw CorruptCheckpoint("bad tensor shape for " + name);
    std::vector<float> data(n);
    std::memcpy(data.data(), r.take(n * sizeof(float)), n * sizeof(float));
    c.tensors.emplace_back(std::move(name), dc::Tensor(std::move(shape), std::move(data)));
  }
  if (r.pos() != bytes.size() - 4) throw CorruptCheckpoint("trailing bytes in checkpoint");
  return c;
}

void save_checkpoint(const Checkpoint& c, const std::string& path) {
  const std::string bytes = serialize_checkpoint(c);
  const std::string tmp = path + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + tmp);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw IoError("write failed: " + tmp);
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) throw IoError("rename failed: " + path + ": " + ec.message());
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint: " + path);
  std::string bytes((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return deserialize_checkpoint(bytes);
}

void load_into(Model& model, const Checkpoint& c) {
  if (!(model.config() == c.model)) {
    throw VersionMismatch("checkpoint config " + to_json(c.model).dump() + " does not match model config " +
                          to_json(model.config()).dump());
  }
  const auto expected = model.named_tensors();
  if (expected.size() != c.tensors.size()) throw CorruptCheckpoint("checkpoint tensor count mismatch");
  try {
    for (const auto& [name, t] : c.tensors) model.set_tensor(name, t);
  } catch (const ShapeMismatch& e) {
    throw CorruptCheckpoint(e.what());
  }
}

Model model_from_checkpoint(const Checkpoint& c) {
  Model m(c.model, 0);
  load_into(m, c);
  return m;
}

}  // namespace nif
