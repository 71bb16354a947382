#include "tsrm/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>

#include "tsrm/error.hpp"

namespace tsrm {

namespace {

constexpr char kMagic[8] = {'T', 'S', 'R', 'M', 'C', 'K', 'P', 'T'};

template <typename U>
void put(std::ostream& out, U v) {
  unsigned char buf[sizeof(U)];
  for (std::size_t i = 0; i < sizeof(U); ++i) buf[i] = static_cast<unsigned char>((v >> (8 * i)) & 0xFF);
  out.write(reinterpret_cast<const char*>(buf), sizeof(U));
}

template <typename U>
U get(std::istream& in) {
  unsigned char buf[sizeof(U)];
  if (!in.read(reinterpret_cast<char*>(buf), sizeof(U))) throw DataError("truncated checkpoint");
  U v = 0;
  for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<U>(buf[i]) << (8 * i);
  return v;
}

}  // namespace

void write_checkpoint(std::ostream& out, const TsrmModel& model, const nlohmann::ordered_json& meta) {
  out.write(kMagic, sizeof(kMagic));
  put<std::uint32_t>(out, kCheckpointVersion);
  nlohmann::ordered_json header{{"model", to_json(model.config())}, {"meta", meta}};
  const std::string text = header.dump();
  put<std::uint64_t>(out, text.size());
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  const auto params = model.parameters();
  put<std::uint32_t>(out, static_cast<std::uint32_t>(params.size()));
  const std::uint8_t dtype = sizeof(real) == 8 ? 0 : 1;
  for (const auto* p : params) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(p->name.size()));
    out.write(p->name.data(), static_cast<std::streamsize>(p->name.size()));
    put<std::uint8_t>(out, dtype);
    put<std::uint32_t>(out, static_cast<std::uint32_t>(p->value.rank()));
    for (auto d : p->value.shape()) put<std::uint64_t>(out, d);
    using Bits = std::conditional_t<sizeof(real) == 8, std::uint64_t, std::uint32_t>;
    for (real v : p->value.data()) put<Bits>(out, std::bit_cast<Bits>(v));
  }
  if (!out) throw DataError("failed writing checkpoint");
}

void save_checkpoint(const std::filesystem::path& path, const TsrmModel& model, const nlohmann::ordered_json& meta) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write checkpoint " + path.string());
  write_checkpoint(out, model, meta);
}

Checkpoint read_checkpoint(std::istream& in) {
  char magic[8];
  if (!in.read(magic, sizeof(magic)) || std::memcmp(magic, kMagic, sizeof(magic)) != 0) {
    throw DataError("not a TSRM checkpoint (bad magic)");
  }
  const auto version = get<std::uint32_t>(in);
  if (version != kCheckpointVersion) {
    throw DataError("unsupported checkpoint version " + std::to_string(version));
  }
  const auto n = get<std::uint64_t>(in);
  if (n > (1ULL << 30)) throw DataError("corrupt checkpoint header length");
  std::string text(n, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(n))) throw DataError("truncated checkpoint");
  Checkpoint ckpt;
  try {
    auto header = nlohmann::ordered_json::parse(text);
    ckpt.config = model_config_from_json(nlohmann::json(header.at("model")));
    ckpt.meta = header.value("meta", nlohmann::ordered_json::object());
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("corrupt checkpoint header: ") + e.what());
  }
  const auto count = get<std::uint32_t>(in);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = get<std::uint32_t>(in);
    if (len > 4096) throw DataError("corrupt parameter name length");
    std::string name(len, '\0');
    if (!in.read(name.data(), len)) throw DataError("truncated checkpoint");
    const auto dtype = get<std::uint8_t>(in);
    if (dtype > 1) throw DataError("unknown dtype in checkpoint for " + name);
    const auto rank = get<std::uint32_t>(in);
    if (rank == 0 || rank > 8) throw DataError("bad rank for " + name);
    Shape shape;
    std::size_t total = 1;
    for (std::uint32_t r = 0; r < rank; ++r) {
      shape.push_back(get<std::uint64_t>(in));
      total *= shape.back();
    }
    if (total > (1ULL << 32)) throw DataError("parameter " + name + " too large");
    std::vector<real> data(total);
    for (auto& v : data) {
      if (dtype == 0) {
        v = static_cast<real>(std::bit_cast<double>(get<std::uint64_t>(in)));
      } else {
        v = static_cast<real>(std::bit_cast<float>(get<std::uint32_t>(in)));
      }
    }
    ckpt.params.emplace_back(std::move(name), Tensor(std::move(shape), std::move(data)));
  }
  return ckpt;
}

Checkpoint read_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open checkpoint " + path.string());
  return read_checkpoint(in);
}

void load_into(TsrmModel& model, const Checkpoint& ckpt) {
  auto params = model.parameters();
  if (params.size() != ckpt.params.size()) {
    throw ConfigError("checkpoint has " + std::to_string(ckpt.params.size()) + " parameters, model expects " +
                      std::to_string(params.size()));
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    const auto& [name, value] = ckpt.params[i];
    if (params[i]->name != name || params[i]->value.shape() != value.shape()) {
      throw ConfigError("checkpoint parameter " + name + " " + shape_str(value.shape()) + " does not match model " +
                        params[i]->name + " " + shape_str(params[i]->value.shape()));
    }
    params[i]->value = value;
  }
}

TsrmModel restore_model(const Checkpoint& ckpt, bool force_ranges) {
  TsrmModel model(ckpt.config, force_ranges);
  load_into(model, ckpt);
  return model;
}

}  // namespace tsrm
