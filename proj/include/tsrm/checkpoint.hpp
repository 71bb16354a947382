#pragma once

#include <filesystem>
#include <iosfwd>

#include "json.hpp"
#include "tsrm/model.hpp"

namespace tsrm {

// Binary layout, all integers little-endian:
//   "TSRMCKPT" | u32 version | u64 n | n bytes of JSON {"model": ..., "meta": ...}
//   | u32 count | count x (u32 name_len | name | u8 dtype (0 = f64, 1 = f32)
//   | u32 rank | rank x u64 dim | payload)
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct Checkpoint {
  ModelConfig config;
  nlohmann::ordered_json meta;
  std::vector<std::pair<std::string, Tensor>> params;
};

void write_checkpoint(std::ostream& out, const TsrmModel& model, const nlohmann::ordered_json& meta = {});
void save_checkpoint(const std::filesystem::path& path, const TsrmModel& model,
                     const nlohmann::ordered_json& meta = {});

Checkpoint read_checkpoint(std::istream& in);
Checkpoint read_checkpoint(const std::filesystem::path& path);

// Builds a model from the stored config and copies every parameter, checking
// names and shapes. Throws ConfigError on mismatch.
TsrmModel restore_model(const Checkpoint& ckpt, bool force_ranges = true);
void load_into(TsrmModel& model, const Checkpoint& ckpt);

}  // namespace tsrm
