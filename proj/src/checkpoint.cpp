#include "ddunet/checkpoint.hpp"

#include <bit>
#include <fstream>
#include <iterator>
#include <vector>

namespace ddunet {
namespace {

constexpr char kMagic[4] = {'D', 'D', 'U', 'N'};
// magic + version + base/input/in_channels + flags + epoch + seed
constexpr std::size_t kChecksumOffset = 4 + 4 + 12 + 1 + 4 + 8;
constexpr std::size_t kPayloadOffset = kChecksumOffset + 8;

std::uint64_t fnv1a(const std::uint8_t* data, std::size_t size) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (std::size_t i = 0; i < size; ++i) {
    h ^= data[i];
    h *= 0x100000001b3ULL;
  }
  return h;
}

class Writer {
 public:
  template <typename U>
  void put(U value) {
    for (std::size_t i = 0; i < sizeof(U); ++i) bytes.push_back(static_cast<std::uint8_t>(value >> (8 * i)));
  }
  void put_bytes(const void* data, std::size_t n) {
    const auto* p = static_cast<const std::uint8_t*>(data);
    bytes.insert(bytes.end(), p, p + n);
  }
  std::vector<std::uint8_t> bytes;
};

class Reader {
 public:
  Reader(const std::vector<std::uint8_t>& bytes, const std::string& path) : bytes_(bytes), path_(path) {}

  template <typename U>
  U get(const char* what) {
    need(sizeof(U), what);
    U value = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) value |= static_cast<U>(static_cast<U>(bytes_[pos_ + i]) << (8 * i));
    pos_ += sizeof(U);
    return value;
  }
  std::string get_string(std::size_t n, const char* what) {
    need(n, what);
    std::string s(reinterpret_cast<const char*>(bytes_.data() + pos_), n);
    pos_ += n;
    return s;
  }
  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  void need(std::size_t n, const char* what) {
    if (remaining() < n) {
      throw CheckpointError(CheckpointErrorKind::truncated, "checkpoint '" + path_ + "' is truncated (while reading " +
                                                                what + " at byte " + std::to_string(pos_) + ")");
    }
  }
  const std::vector<std::uint8_t>& bytes_;
  std::string path_;
  std::size_t pos_ = 0;
};

std::vector<std::uint8_t> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint '" + path.string() + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

CheckpointMeta parse_header(Reader& r, const std::string& path) {
  const std::string magic = r.get_string(4, "magic");
  if (magic != std::string(kMagic, 4)) {
    throw CheckpointError(CheckpointErrorKind::bad_magic, "'" + path + "' is not a checkpoint (bad magic)");
  }
  const auto version = r.get<std::uint32_t>("version");
  if (version != kCheckpointVersion) {
    throw CheckpointError(CheckpointErrorKind::bad_version, "checkpoint '" + path + "' has format version " +
                                                                std::to_string(version) + ", expected " +
                                                                std::to_string(kCheckpointVersion));
  }
  CheckpointMeta meta;
  meta.config.base_channels = r.get<std::uint32_t>("base_channels");
  meta.config.input_size = r.get<std::uint32_t>("input_size");
  meta.config.in_channels = r.get<std::uint32_t>("in_channels");
  const auto flags = r.get<std::uint8_t>("flags");
  meta.config.use_dmsc = flags & 1;
  meta.config.use_dwbg = flags & 2;
  meta.config.dmsc_skip_fuse = flags & 4;
  meta.epoch = r.get<std::uint32_t>("epoch");
  meta.seed = r.get<std::uint64_t>("seed");
  return meta;
}

}  // namespace

std::string to_string(CheckpointErrorKind kind) {
  switch (kind) {
    case CheckpointErrorKind::bad_magic: return "bad_magic";
    case CheckpointErrorKind::bad_version: return "bad_version";
    case CheckpointErrorKind::truncated: return "truncated";
    case CheckpointErrorKind::shape_mismatch: return "shape_mismatch";
    case CheckpointErrorKind::checksum: return "checksum";
    case CheckpointErrorKind::trailing_data: break;
  }
  return "trailing_data";
}

template <typename T>
void save_checkpoint(const DdunetModel<T>& model, const std::filesystem::path& path, const CheckpointMeta& meta) {
  const DdunetConfig& cfg = model.config();
  Writer w;
  w.put_bytes(kMagic, 4);
  w.put<std::uint32_t>(kCheckpointVersion);
  w.put<std::uint32_t>(static_cast<std::uint32_t>(cfg.base_channels));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(cfg.input_size));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(cfg.in_channels));
  w.put<std::uint8_t>(static_cast<std::uint8_t>((cfg.use_dmsc ? 1 : 0) | (cfg.use_dwbg ? 2 : 0) |
                                                (cfg.dmsc_skip_fuse ? 4 : 0)));
  w.put<std::uint32_t>(meta.epoch);
  w.put<std::uint64_t>(meta.seed);
  w.put<std::uint64_t>(0);  // checksum, patched below

  const auto tensors = model.params().all();
  w.put<std::uint32_t>(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    w.put<std::uint16_t>(static_cast<std::uint16_t>(name.size()));
    w.put_bytes(name.data(), name.size());
    w.put<std::uint8_t>(static_cast<std::uint8_t>(t.rank()));
    for (std::size_t e : t.shape()) w.put<std::uint32_t>(static_cast<std::uint32_t>(e));
    for (T v : t.data()) w.put<std::uint32_t>(std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  }
  const std::uint64_t sum = fnv1a(w.bytes.data() + kPayloadOffset, w.bytes.size() - kPayloadOffset);
  for (std::size_t i = 0; i < 8; ++i) w.bytes[kChecksumOffset + i] = static_cast<std::uint8_t>(sum >> (8 * i));

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write checkpoint '" + path.string() + "'");
  out.write(reinterpret_cast<const char*>(w.bytes.data()), static_cast<std::streamsize>(w.bytes.size()));
  if (!out) throw IoError("failed writing checkpoint '" + path.string() + "'");
}

CheckpointMeta read_checkpoint_meta(const std::filesystem::path& path) {
  const auto bytes = read_file(path);
  Reader r(bytes, path.string());
  return parse_header(r, path.string());
}

template <typename T>
std::unique_ptr<DdunetModel<T>> load_checkpoint(const std::filesystem::path& path, CheckpointMeta* meta_out,
                                                const LoadOptions& options) {
  const std::string where = path.string();
  const auto bytes = read_file(path);
  Reader r(bytes, where);
  const CheckpointMeta meta = parse_header(r, where);
  const auto stored_sum = r.get<std::uint64_t>("checksum");
  if (options.verify_checksum) {
    // Walk the structure first so a short file reports as truncated, not as a checksum failure.
    Reader probe(bytes, where);
    parse_header(probe, where);
    probe.get<std::uint64_t>("checksum");
    const auto count = probe.get<std::uint32_t>("tensor count");
    for (std::uint32_t i = 0; i < count; ++i) {
      probe.get_string(probe.get<std::uint16_t>("name length"), "tensor name");
      const auto rank = probe.get<std::uint8_t>("rank");
      std::size_t numel = 1;
      for (std::uint8_t d = 0; d < rank; ++d) numel *= probe.get<std::uint32_t>("extent");
      probe.get_string(numel * 4, "tensor payload");
    }
    if (probe.remaining() != 0) {
      throw CheckpointError(CheckpointErrorKind::trailing_data, "checkpoint '" + where + "' has " +
                                                                    std::to_string(probe.remaining()) +
                                                                    " unexpected trailing bytes");
    }
    if (fnv1a(bytes.data() + kPayloadOffset, bytes.size() - kPayloadOffset) != stored_sum) {
      throw CheckpointError(CheckpointErrorKind::checksum, "checkpoint '" + where + "' failed its checksum");
    }
  }

  meta.config.validate();
  auto model = std::make_unique<DdunetModel<T>>(meta.config, meta.seed);
  const auto targets = model->params().all();
  const auto count = r.get<std::uint32_t>("tensor count");
  if (count != targets.size()) {
    throw CheckpointError(CheckpointErrorKind::shape_mismatch,
                          "checkpoint '" + where + "' holds " + std::to_string(count) + " tensors, the stored config builds " +
                              std::to_string(targets.size()));
  }
  for (const auto& [name, target] : targets) {
    const auto len = r.get<std::uint16_t>("name length");
    const std::string stored = r.get_string(len, "tensor name");
    if (stored != name) {
      throw CheckpointError(CheckpointErrorKind::shape_mismatch,
                            "checkpoint '" + where + "': found tensor '" + stored + "' where '" + name + "' was expected");
    }
    const auto rank = r.get<std::uint8_t>("rank");
    Shape shape(rank);
    for (auto& e : shape) e = r.get<std::uint32_t>("extent");
    if (shape != target.shape()) {
      throw CheckpointError(CheckpointErrorKind::shape_mismatch, "checkpoint '" + where + "': tensor '" + name +
                                                                     "' has shape " + shape_str(shape) + ", expected " +
                                                                     shape_str(target.shape()));
    }
    Tensor<T> handle = target;
    auto dst = handle.mutable_data();
    for (auto& v : dst) v = static_cast<T>(std::bit_cast<float>(r.get<std::uint32_t>("tensor payload")));
  }
  if (r.remaining() != 0) {
    throw CheckpointError(CheckpointErrorKind::trailing_data,
                          "checkpoint '" + where + "' has " + std::to_string(r.remaining()) + " unexpected trailing bytes");
  }
  if (meta_out) *meta_out = meta;
  return model;
}

template void save_checkpoint(const DdunetModel<float>&, const std::filesystem::path&, const CheckpointMeta&);
template void save_checkpoint(const DdunetModel<double>&, const std::filesystem::path&, const CheckpointMeta&);
template std::unique_ptr<DdunetModel<float>> load_checkpoint(const std::filesystem::path&, CheckpointMeta*,
                                                             const LoadOptions&);
template std::unique_ptr<DdunetModel<double>> load_checkpoint(const std::filesystem::path&, CheckpointMeta*,
                                                              const LoadOptions&);

}  // namespace ddunet
