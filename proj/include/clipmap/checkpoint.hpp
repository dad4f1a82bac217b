#pragma once

// Binary tensor container.
//
//   "CMAP" | u32 version | u32 count
//   count × { u32 name_len | name | u8 dtype | u32 rank | rank × u64 dim | u64 offset }
//   payload (little-endian elements, offsets relative to payload start)
//   u32 CRC32 over every preceding byte
//
// dtype 1 = f32, 2 = f64. All integers little-endian.

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "clipmap/mapping.hpp"
#include "clipmap/model.hpp"
#include "clipmap/optim.hpp"
#include "clipmap/tensor.hpp"

namespace clipmap {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointBundle {
  std::vector<std::pair<std::string, Tensor>> tensors;

  void add(std::string name, Tensor t);
  bool contains(std::string_view name) const;
  // InputError when absent.
  const Tensor& get(std::string_view name) const;
};

std::vector<std::uint8_t> encode_bundle(const CheckpointBundle& bundle);
// IoError on bad magic, version, CRC, or layout.
CheckpointBundle decode_bundle(std::span<const std::uint8_t> bytes);

void save_bundle(const std::filesystem::path& path, const CheckpointBundle& bundle);
CheckpointBundle load_bundle(const std::filesystem::path& path);

// Writes to a sibling temporary and renames over `path`.
void write_file_atomic(const std::filesystem::path& path, std::string_view contents);
std::vector<std::uint8_t> read_file(const std::filesystem::path& path);

// Model, map, and optimizer round-trips. Configs travel as small f64 tensors.
void add_model(CheckpointBundle& b, const ClipModel& model);
ClipModel model_from_bundle(const CheckpointBundle& b);

void add_maps(CheckpointBundle& b, const CompressionMaps& maps, const CompressionSpec& spec, std::size_t ffn_mult);
struct LoadedMaps {
  CompressionMaps maps;
  CompressionSpec spec;
  std::size_t ffn_mult = 0;
};
LoadedMaps maps_from_bundle(const CheckpointBundle& b);

void add_optim(CheckpointBundle& b, const OptimState& state, const std::vector<ParamRef>& params);

}  // namespace clipmap
