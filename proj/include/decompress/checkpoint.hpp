#pragma once

// DCMP checkpoint files.
//
//   "DCMP"                       4 bytes
//   uint32 format version        (kCheckpointVersion)
//   uint32 header length, header text: one "key = value" per line
//   uint32 tensor count
//   per tensor: uint32 name length, name bytes, tensor blob
//
// All integers little-endian; tensor blobs as in serialize.hpp.

#include <charconv>
#include <cstdint>
#include <filesystem>
#include <iomanip>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "decompress/codec.hpp"
#include "decompress/serialize.hpp"

namespace decompress {

inline constexpr std::uint32_t kCheckpointVersion = 1;

struct CheckpointMeta {
  CodecConfig arch;
  double lambda = 0;
  double sigma = 0;
  std::uint64_t steps = 0;
  std::uint64_t seed = 0;
};

/// Parses "key = value" lines; blank lines and '#' comments are ignored.
inline std::map<std::string, std::string> parse_key_values(const std::string& text, const std::string& source) {
  std::map<std::string, std::string> out;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  auto trim = [](std::string s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return std::string{};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
  };
  while (std::getline(in, line)) {
    ++lineno;
    line = trim(line);
    if (line.empty() || line[0] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw FormatError(source + ":" + std::to_string(lineno) + ": expected 'key = value'");
    }
    out[trim(line.substr(0, eq))] = trim(line.substr(eq + 1));
  }
  return out;
}

namespace detail {

inline std::string format_real(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

inline const std::string& header_field(const std::map<std::string, std::string>& kv, const std::string& key,
                                       const std::string& source) {
  const auto it = kv.find(key);
  if (it == kv.end()) throw FormatError(source + ": checkpoint header lacks '" + key + "'");
  return it->second;
}

inline double header_real(const std::map<std::string, std::string>& kv, const std::string& key,
                          const std::string& source) {
  const std::string& s = header_field(kv, key, source);
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used != s.size()) throw std::invalid_argument(s);
    return v;
  } catch (const std::exception&) {
    throw FormatError(source + ": header field '" + key + "' is not a number: " + s);
  }
}

inline std::uint64_t header_uint(const std::map<std::string, std::string>& kv, const std::string& key,
                                 const std::string& source) {
  const std::string& s = header_field(kv, key, source);
  std::uint64_t v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc{} || ptr != s.data() + s.size()) {
    throw FormatError(source + ": header field '" + key + "' is not an unsigned integer: " + s);
  }
  return v;
}

}  // namespace detail

inline std::string checkpoint_header_text(const CheckpointMeta& meta) {
  std::ostringstream os;
  os << "model = decompress-factorized-prior\n"
     << "patch_size = " << meta.arch.patch_size << "\n"
     << "hidden_channels = " << meta.arch.hidden_channels << "\n"
     << "latent_channels = " << meta.arch.latent_channels << "\n"
     << "kernel = " << meta.arch.kernel << "\n"
     << "intensity_scale = " << detail::format_real(meta.arch.intensity_scale) << "\n"
     << "lambda = " << detail::format_real(meta.lambda) << "\n"
     << "sigma = " << detail::format_real(meta.sigma) << "\n"
     << "steps = " << meta.steps << "\n"
     << "seed = " << meta.seed << "\n";
  return os.str();
}

template <typename T>
std::vector<std::uint8_t> encode_checkpoint(NeuralCodec<T>& codec, CheckpointMeta meta) {
  meta.arch = codec.config();
  std::vector<std::uint8_t> out{'D', 'C', 'M', 'P'};
  detail::put_u32le(out, kCheckpointVersion);
  const std::string header = checkpoint_header_text(meta);
  detail::put_u32le(out, static_cast<std::uint32_t>(header.size()));
  out.insert(out.end(), header.begin(), header.end());
  const auto params = codec.named_parameters();
  detail::put_u32le(out, static_cast<std::uint32_t>(params.size()));
  for (const auto& [name, tensor] : params) {
    detail::put_u32le(out, static_cast<std::uint32_t>(name.size()));
    out.insert(out.end(), name.begin(), name.end());
    append_tensor_blob(out, *tensor);
  }
  return out;
}

template <typename T>
void save_checkpoint(NeuralCodec<T>& codec, const CheckpointMeta& meta, const std::filesystem::path& path) {
  detail::write_file(path, encode_checkpoint(codec, meta));
}

template <typename T>
struct LoadedCheckpoint {
  NeuralCodec<T> codec;
  CheckpointMeta meta;
};

template <typename T>
LoadedCheckpoint<T> decode_checkpoint(const std::vector<std::uint8_t>& bytes, const std::string& source) {
  ByteReader in(bytes, source);
  const std::string magic = in.bytes_as_string(4, "magic");
  if (magic != "DCMP") throw FormatError(source + ": bad magic at offset 0 (not a DCMP checkpoint)");
  const std::uint32_t version = in.u32("format version");
  if (version != kCheckpointVersion) {
    throw VersionError(source + ": checkpoint format version " + std::to_string(version) + ", expected " +
                       std::to_string(kCheckpointVersion));
  }
  const std::uint32_t header_len = in.u32("header length");
  const auto kv = parse_key_values(in.bytes_as_string(header_len, "header"), source);

  CheckpointMeta meta;
  meta.arch.patch_size = detail::header_uint(kv, "patch_size", source);
  meta.arch.hidden_channels = detail::header_uint(kv, "hidden_channels", source);
  meta.arch.latent_channels = detail::header_uint(kv, "latent_channels", source);
  meta.arch.kernel = detail::header_uint(kv, "kernel", source);
  meta.arch.intensity_scale = detail::header_real(kv, "intensity_scale", source);
  meta.lambda = detail::header_real(kv, "lambda", source);
  meta.sigma = detail::header_real(kv, "sigma", source);
  meta.steps = detail::header_uint(kv, "steps", source);
  meta.seed = detail::header_uint(kv, "seed", source);
  try {
    meta.arch.validate();
  } catch (const Error& e) {
    throw VersionError(source + ": unsupported architecture in checkpoint: " + e.what());
  }

  LoadedCheckpoint<T> out{NeuralCodec<T>::empty_like(meta.arch), meta};
  auto params = out.codec.named_parameters();
  const std::uint32_t count = in.u32("tensor count");
  if (count != params.size()) {
    throw VersionError(source + ": checkpoint holds " + std::to_string(count) + " tensors, architecture expects " +
                       std::to_string(params.size()));
  }
  for (auto& [name, tensor] : params) {
    const std::size_t at = in.offset();
    const std::string stored = in.bytes_as_string(in.u32("tensor name length"), "tensor name");
    if (stored != name) {
      throw VersionError(source + ": tensor '" + stored + "' at offset " + std::to_string(at) + ", expected '" +
                         name + "'");
    }
    Tensor<T> loaded = in.template tensor<T>("tensor blob");
    if (loaded.shape() != tensor->shape()) {
      throw VersionError(source + ": tensor '" + name + "' has shape " + shape_str(loaded.shape()) + ", expected " +
                         shape_str(tensor->shape()));
    }
    std::copy(loaded.data().begin(), loaded.data().end(), tensor->data().begin());
  }
  if (in.remaining() != 0) {
    throw FormatError(source + ": " + std::to_string(in.remaining()) + " trailing bytes at offset " +
                      std::to_string(in.offset()));
  }
  return out;
}

template <typename T>
LoadedCheckpoint<T> load_checkpoint(const std::filesystem::path& path) {
  return decode_checkpoint<T>(detail::read_file(path), path.string());
}

}  // namespace decompress
