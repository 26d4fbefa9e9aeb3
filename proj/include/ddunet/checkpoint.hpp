#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <string>

#include "ddunet/errors.hpp"
#include "ddunet/model.hpp"

namespace ddunet {

// Binary layout, all integers little-endian:
//   "DDUN" | u32 version
//   u32 base_channels | u32 input_size | u32 in_channels | u8 flags
//   u32 epoch | u64 seed | u64 payload checksum (FNV-1a 64 over everything after it)
//   u32 tensor count, then per tensor:
//   u16 name length | name bytes | u8 rank | u32 extent * rank | f32 * numel
// flags: bit 0 use_dmsc, bit 1 use_dwbg, bit 2 dmsc_skip_fuse.
inline constexpr std::uint32_t kCheckpointVersion = 1;

enum class CheckpointErrorKind { bad_magic, bad_version, truncated, shape_mismatch, checksum, trailing_data };

std::string to_string(CheckpointErrorKind kind);

class CheckpointError : public IoError {
 public:
  CheckpointError(CheckpointErrorKind kind, const std::string& message)
      : IoError(message), kind_(kind) {}
  CheckpointErrorKind kind() const { return kind_; }

 private:
  CheckpointErrorKind kind_;
};

struct CheckpointMeta {
  DdunetConfig config;
  std::uint32_t epoch = 0;
  std::uint64_t seed = 0;
};

struct LoadOptions {
  // Off only for corruption experiments that want to see what a damaged
  // payload does to the forward pass.
  bool verify_checksum = true;
};

template <typename T>
void save_checkpoint(const DdunetModel<T>& model, const std::filesystem::path& path, const CheckpointMeta& meta);

/// Parses the header and metadata only (no checksum check).
CheckpointMeta read_checkpoint_meta(const std::filesystem::path& path);

/// Rebuilds the model from the stored config, then copies every stored tensor
/// into it. Names, order and shapes must match what that config builds.
template <typename T>
std::unique_ptr<DdunetModel<T>> load_checkpoint(const std::filesystem::path& path, CheckpointMeta* meta = nullptr,
                                                const LoadOptions& options = {});

extern template void save_checkpoint(const DdunetModel<float>&, const std::filesystem::path&, const CheckpointMeta&);
extern template void save_checkpoint(const DdunetModel<double>&, const std::filesystem::path&, const CheckpointMeta&);
extern template std::unique_ptr<DdunetModel<float>> load_checkpoint(const std::filesystem::path&, CheckpointMeta*,
                                                                    const LoadOptions&);
extern template std::unique_ptr<DdunetModel<double>> load_checkpoint(const std::filesystem::path&, CheckpointMeta*,
                                                                     const LoadOptions&);

}  // namespace ddunet
