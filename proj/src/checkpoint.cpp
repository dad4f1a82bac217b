#include "clipmap/checkpoint.hpp"

#include <zlib.h>

#include <bit>
#include <cstring>
#include <fstream>

#include "clipmap/errors.hpp"

namespace clipmap {

static_assert(std::endian::native == std::endian::little, "checkpoint I/O assumes a little-endian host");

void CheckpointBundle::add(std::string name, Tensor t) {
  if (contains(name)) throw ContractError("checkpoint: duplicate tensor " + name);
  t.drop_grad();
  tensors.emplace_back(std::move(name), std::move(t));
}

bool CheckpointBundle::contains(std::string_view name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return true;
  return false;
}

const Tensor& CheckpointBundle::get(std::string_view name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return t;
  throw InputError("checkpoint: missing tensor " + std::string(name));
}

namespace {

constexpr char kMagic[4] = {'C', 'M', 'A', 'P'};
constexpr std::uint8_t kF32 = 1, kF64 = 2;
constexpr std::uint8_t kNativeDtype = sizeof(Real) == 4 ? kF32 : kF64;

template <class T>
void put(std::vector<std::uint8_t>& out, T v) {
  const auto* p = reinterpret_cast<const std::uint8_t*>(&v);
  out.insert(out.end(), p, p + sizeof v);
}

class Reader {
 public:
  explicit Reader(std::span<const std::uint8_t> bytes) : bytes_(bytes) {}

  template <class T>
  T get() {
    need(sizeof(T));
    T v;
    std::memcpy(&v, bytes_.data() + pos_, sizeof v);
    pos_ += sizeof v;
    return v;
  }
  std::string str(std::size_t n) {
    need(n);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::size_t pos() const { return pos_; }

 private:
  void need(std::size_t n) const {
    if (bytes_.size() - pos_ < n) throw IoError("checkpoint: truncated manifest");
  }
  std::span<const std::uint8_t> bytes_;
  std::size_t pos_ = 0;
};

std::uint32_t crc_of(std::span<const std::uint8_t> bytes) {
  uLong crc = crc32(0L, Z_NULL, 0);
  // zlib takes uInt lengths; feed in bounded pieces.
  std::size_t off = 0;
  while (off < bytes.size()) {
    const std::size_t n = std::min<std::size_t>(bytes.size() - off, 1u << 30);
    crc = crc32(crc, bytes.data() + off, static_cast<uInt>(n));
    off += n;
  }
  return static_cast<std::uint32_t>(crc);
}

}  // namespace

std::vector<std::uint8_t> encode_bundle(const CheckpointBundle& bundle) {
  std::vector<std::uint8_t> out(kMagic, kMagic + 4);
  put<std::uint32_t>(out, kCheckpointVersion);
  put<std::uint32_t>(out, static_cast<std::uint32_t>(bundle.tensors.size()));
  std::uint64_t offset = 0;
  for (const auto& [name, t] : bundle.tensors) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    put<std::uint8_t>(out, kNativeDtype);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (std::size_t d : t.shape()) put<std::uint64_t>(out, d);
    put<std::uint64_t>(out, offset);
    offset += t.numel() * sizeof(Real);
  }
  for (const auto& [name, t] : bundle.tensors) {
    const auto* p = reinterpret_cast<const std::uint8_t*>(t.data().data());
    out.insert(out.end(), p, p + t.numel() * sizeof(Real));
  }
  put<std::uint32_t>(out, crc_of(out));
  return out;
}

CheckpointBundle decode_bundle(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 4) != 0) throw IoError("checkpoint: bad magic");
  std::uint32_t stored;
  std::memcpy(&stored, bytes.data() + bytes.size() - 4, 4);
  if (crc_of(bytes.first(bytes.size() - 4)) != stored) throw IoError("checkpoint: CRC mismatch");

  Reader r(bytes.first(bytes.size() - 4));
  r.str(4);
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) throw IoError("checkpoint: unsupported version " + std::to_string(version));
  const auto count = r.get<std::uint32_t>();
  struct Entry {
    std::string name;
    std::uint8_t dtype;
    Shape shape;
    std::uint64_t offset;
  };
  std::vector<Entry> entries;
  for (std::uint32_t i = 0; i < count; ++i) {
    Entry e;
    e.name = r.str(r.get<std::uint32_t>());
    e.dtype = r.get<std::uint8_t>();
    if (e.dtype != kF32 && e.dtype != kF64) throw IoError("checkpoint: unknown dtype for " + e.name);
    const auto rank = r.get<std::uint32_t>();
    if (rank > 8) throw IoError("checkpoint: implausible rank for " + e.name);
    for (std::uint32_t d = 0; d < rank; ++d) e.shape.push_back(r.get<std::uint64_t>());
    e.offset = r.get<std::uint64_t>();
    entries.push_back(std::move(e));
  }
  const std::size_t payload_start = r.pos();
  const std::size_t payload_size = bytes.size() - 4 - payload_start;
  CheckpointBundle out;
  std::uint64_t expected = 0;
  for (const auto& e : entries) {
    const std::size_t width = e.dtype == kF32 ? 4 : 8;
    const std::size_t n = shape_numel(e.shape);
    if (e.offset != expected || e.offset + n * width > payload_size)
      throw IoError("checkpoint: bad payload layout at " + e.name);
    expected += n * width;
    Tensor t(e.shape);
    const std::uint8_t* src = bytes.data() + payload_start + e.offset;
    for (std::size_t i = 0; i < n; ++i) {
      if (e.dtype == kF64) {
        double v;
        std::memcpy(&v, src + 8 * i, 8);
        t[i] = Real(v);
      } else {
        float v;
        std::memcpy(&v, src + 4 * i, 4);
        t[i] = Real(v);
      }
    }
    out.add(e.name, std::move(t));
  }
  if (expected != payload_size) throw IoError("checkpoint: trailing payload bytes");
  return out;
}

void write_file_atomic(const std::filesystem::path& path, std::string_view contents) {
  auto tmp = path;
  tmp += ".tmp";
  {
    std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
    if (!f) throw IoError("cannot write " + tmp.string());
    f.write(contents.data(), static_cast<std::streamsize>(contents.size()));
    if (!f) throw IoError("short write to " + tmp.string());
  }
  std::error_code ec;
  std::filesystem::rename(tmp, path, ec);
  if (ec) {
    std::filesystem::remove(tmp, ec);
    throw IoError("cannot rename onto " + path.string());
  }
}

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path.string());
  return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

void save_bundle(const std::filesystem::path& path, const CheckpointBundle& bundle) {
  const auto bytes = encode_bundle(bundle);
  write_file_atomic(path, std::string_view(reinterpret_cast<const char*>(bytes.data()), bytes.size()));
}

CheckpointBundle load_bundle(const std::filesystem::path& path) {
  try {
    return decode_bundle(read_file(path));
  } catch (const IoError& e) {
    throw IoError(path.string() + ": " + e.what());
  }
}

namespace {

Tensor config_tensor(const EncoderConfig& c) {
  return Tensor({11}, {Real(c.tower == Tower::Image), Real(c.width), Real(c.depth), Real(c.heads), Real(c.ffn_mult),
                       Real(c.embed_dim), Real(c.vocab), Real(c.max_len), Real(c.grid), Real(c.patch),
                       Real(c.channels)});
}

EncoderConfig config_from(const Tensor& t) {
  if (t.numel() != 11) throw InputError("checkpoint: malformed encoder config");
  auto u = [&](std::size_t i) { return static_cast<std::size_t>(t[i]); };
  EncoderConfig c;
  c.tower = t[0] != 0 ? Tower::Image : Tower::Text;
  c.width = u(1);
  c.depth = u(2);
  c.heads = u(3);
  c.ffn_mult = u(4);
  c.embed_dim = u(5);
  c.vocab = u(6);
  c.max_len = u(7);
  c.grid = u(8);
  c.patch = u(9);
  c.channels = u(10);
  c.validate();
  return c;
}

Tensor spec_tensor(const TowerCompression& s) {
  return Tensor({4}, {Real(s.source_width), Real(s.target_width), Real(s.source_depth), Real(s.target_depth)});
}

TowerCompression spec_from(const Tensor& t) {
  if (t.numel() != 4) throw InputError("checkpoint: malformed compression spec");
  return {static_cast<std::size_t>(t[0]), static_cast<std::size_t>(t[1]), static_cast<std::size_t>(t[2]),
          static_cast<std::size_t>(t[3])};
}

}  // namespace

void add_model(CheckpointBundle& b, const ClipModel& model) {
  b.add("config.image", config_tensor(model.image.config));
  b.add("config.text", config_tensor(model.text.config));
  for (const auto& [name, t] : model.named_params()) b.add(name, *t);
}

ClipModel model_from_bundle(const CheckpointBundle& b) {
  ClipModel m;
  m.image.config = config_from(b.get("config.image"));
  m.text.config = config_from(b.get("config.text"));
  if (m.image.config.tower != Tower::Image || m.text.config.tower != Tower::Text)
    throw InputError("checkpoint: tower configs swapped");
  m.image.params.blocks.resize(m.image.config.depth);
  m.text.params.blocks.resize(m.text.config.depth);
  for (auto& [name, t] : m.named_params()) *t = b.get(name);
  m.image.check_shapes();
  m.text.check_shapes();
  if (m.log_logit_scale.numel() != 1) throw DimensionError("checkpoint: logit_scale must be a scalar");
  return m;
}

void add_maps(CheckpointBundle& b, const CompressionMaps& maps, const CompressionSpec& spec, std::size_t ffn_mult) {
  b.add("spec.image", spec_tensor(spec.image));
  b.add("spec.text", spec_tensor(spec.text));
  b.add("spec.ffn_mult", Tensor::scalar(Real(ffn_mult)));
  for (const auto& [name, t] : maps.named_params()) b.add("maps." + name, *t);
}

LoadedMaps maps_from_bundle(const CheckpointBundle& b) {
  LoadedMaps out;
  out.spec.image = spec_from(b.get("spec.image"));
  out.spec.text = spec_from(b.get("spec.text"));
  out.ffn_mult = static_cast<std::size_t>(b.get("spec.ffn_mult").item());
  out.maps.image.layers.resize(out.spec.image.source_depth);
  out.maps.text.layers.resize(out.spec.text.source_depth);
  for (auto& [name, t] : out.maps.named_params()) *t = b.get("maps." + name);
  for (const auto& [tower, spec] : {std::pair{&out.maps.image, out.spec.image}, std::pair{&out.maps.text, out.spec.text}}) {
    const std::size_t w1 = spec.source_width, w2 = spec.target_width, f = out.ffn_mult;
    auto expect = [](const Tensor& t, Shape s) {
      if (t.shape() != s) throw DimensionError("checkpoint: map shape " + shape_str(t.shape()) + ", expected " + shape_str(s));
    };
    expect(tower->emb_out, {w2, w1});
    for (const auto& l : tower->layers) {
      expect(l.qk_out, {w2, w1});
      expect(l.v_out, {w2, w1});
      expect(l.fc1_out, {f * w2, f * w1});
    }
    expect(tower->depth, {spec.target_depth, spec.source_depth});
  }
  return out;
}

void add_optim(CheckpointBundle& b, const OptimState& state, const std::vector<ParamRef>& params) {
  b.add("optim.step", Tensor::scalar(Real(state.step)));
  for (std::size_t i = 0; i < state.m.size() && i < params.size(); ++i) {
    b.add("optim.m." + params[i].name, state.m[i]);
    b.add("optim.v." + params[i].name, state.v[i]);
  }
}

}  // namespace clipmap
