// SPDX-License-Identifier: Apache-2.0
#pragma once

// Checkpoint file, little-endian throughout:
//   magic "MLRV", version u32
//   JSON state block (u64 length prefix, UTF-8): model config + train state
//   tensor table: count u64, then per tensor
//     name (u64 len + UTF-8), flags u8 (bit0 = trainable),
//     dtype u8 (0 = f32, 1 = f64), ndim u8, dims u64 x ndim, raw data
//   trailing CRC32 over all preceding bytes
// Optimizer moments ride along as tensors named adam.m.<p> / adam.v.<p>.

#include <filesystem>
#include <limits>

#include "milora/io_util.hpp"
#include "milora/optim.hpp"
#include "milora/serialize_json.hpp"

namespace milora {

inline constexpr char kCheckpointMagic[4] = {'M', 'L', 'R', 'V'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

struct TrainState {
  std::uint64_t step = 0;          // completed optimizer steps
  double best_val = -1.0;          // best validation score; -1 = none yet
  std::uint64_t stale_epochs = 0;  // epochs since the best score improved
};

namespace detail {

template <class T>
constexpr std::uint8_t dtype_code() {
  static_assert(std::is_same_v<T, float> || std::is_same_v<T, double>);
  return std::is_same_v<T, float> ? 0 : 1;
}

template <class T>
void write_tensor_payload(ByteWriter& w, const Tensor<T>& t) {
  for (T v : t.data()) {
    if constexpr (std::is_same_v<T, float>) {
      w.f32(v);
    } else {
      w.f64(v);
    }
  }
}

template <class T>
Tensor<T> read_tensor_payload(ByteReader& r, Shape shape, std::uint8_t dtype) {
  Tensor<T> t(std::move(shape));
  for (auto& v : t.data()) {
    if (dtype == 0) {
      v = static_cast<T>(r.f32());
    } else if (dtype == 1) {
      v = static_cast<T>(r.f64());
    } else {
      throw IoError(IoError::Kind::Malformed, "unknown dtype code " + std::to_string(dtype));
    }
  }
  return t;
}

}  // namespace detail

template <class T>
void save_checkpoint(const Model<T>& model, const AdamState<T>& opt,
                     const TrainState& state, const std::filesystem::path& path) {
  ByteWriter w;
  w.bytes(kCheckpointMagic, 4);
  w.u32(kCheckpointVersion);

  nlohmann::json j{{"model", model_config_to_json(model.config())},
                   {"train_state", {{"step", state.step},
                                    {"best_val", state.best_val},
                                    {"stale_epochs", state.stale_epochs},
                                    {"adam_step", opt.step}}}};
  w.str(j.dump());

  std::uint64_t count = model.params().size();
  count += opt.m.size() + opt.v.size();
  w.u64(count);
  auto write_entry = [&](const std::string& name, const Tensor<T>& t, bool trainable) {
    w.str(name);
    w.u8(trainable ? 1 : 0);
    w.u8(detail::dtype_code<T>());
    w.u8(static_cast<std::uint8_t>(t.ndim()));
    for (std::size_t d : t.shape()) w.u64(d);
    detail::write_tensor_payload(w, t);
  };
  for (const auto& e : model.params()) write_entry(e.name, e.var.value(), e.trainable);
  for (const auto& [name, t] : opt.m) write_entry("adam.m." + name, t, false);
  for (const auto& [name, t] : opt.v) write_entry("adam.v." + name, t, false);

  w.append_crc();
  w.write_file(path);
}

template <class T>
struct LoadedCheckpoint {
  Model<T> model;
  AdamState<T> opt;
  TrainState state;
};

template <class T>
LoadedCheckpoint<T> load_checkpoint(const std::filesystem::path& path) {
  ByteReader r = ByteReader::from_file(path);
  char magic[4];
  r.bytes(magic, 4);
  if (std::memcmp(magic, kCheckpointMagic, 4) != 0)
    throw IoError(IoError::Kind::BadMagic, "bad magic in " + path.string());
  std::uint32_t version = r.u32();
  if (version != kCheckpointVersion)
    throw IoError(IoError::Kind::VersionMismatch,
                  "unsupported checkpoint version " + std::to_string(version));

  nlohmann::json j;
  try {
    j = nlohmann::json::parse(r.str());
  } catch (const nlohmann::json::exception& e) {
    throw IoError(IoError::Kind::Malformed, std::string("bad state block: ") + e.what());
  }

  LoadedCheckpoint<T> out{Model<T>::build(model_config_from_json(j.at("model"))), {}, {}};
  if (j.contains("train_state")) {
    const auto& ts = j.at("train_state");
    out.state.step = ts.value("step", std::uint64_t(0));
    out.state.best_val = ts.value("best_val", 0.0);
    out.state.stale_epochs = ts.value("stale_epochs", std::uint64_t(0));
    out.opt.step = ts.value("adam_step", std::uint64_t(0));
  }

  std::uint64_t count = r.u64();
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name = r.str();
    std::uint8_t flags = r.u8();
    std::uint8_t dtype = r.u8();
    std::uint8_t ndim = r.u8();
    Shape shape(ndim);
    std::uint64_t numel = 1;
    for (auto& d : shape) {
      d = r.u64();
      if (d == 0) throw IoError(IoError::Kind::InvalidDims, "zero dim in tensor " + name);
      if (d != 0 && numel > std::numeric_limits<std::uint64_t>::max() / d)
        throw IoError(IoError::Kind::InvalidDims, "dim overflow in tensor " + name);
      numel *= d;
    }
    if (numel > std::numeric_limits<std::uint64_t>::max() / 8)
      throw IoError(IoError::Kind::InvalidDims, "dim overflow in tensor " + name);
    r.need(numel * (dtype == 0 ? 4 : 8));  // reject before allocating
    Tensor<T> t = detail::read_tensor_payload<T>(r, std::move(shape), dtype);
    if (name.rfind("adam.m.", 0) == 0) {
      out.opt.m.emplace(name.substr(7), std::move(t));
    } else if (name.rfind("adam.v.", 0) == 0) {
      out.opt.v.emplace(name.substr(7), std::move(t));
    } else {
      const ParamEntry<T>* entry = out.model.find(name);
      if (!entry)
        throw IoError(IoError::Kind::Malformed, "tensor " + name + " not in model");
      if (entry->var.value().shape() != t.shape())
        throw IoError(IoError::Kind::Malformed, "shape mismatch for tensor " + name);
      if (entry->trainable != ((flags & 1) != 0))
        throw IoError(IoError::Kind::Malformed, "trainable flag mismatch for " + name);
      entry->var.value() = std::move(t);
    }
  }
  r.check_trailing_crc();
  return out;
}

}  // namespace milora
