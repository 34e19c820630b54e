#include "dain/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

namespace dain::ad {

namespace {

template <class U>
void put_le(std::string& out, U v) {
  for (std::size_t i = 0; i < sizeof(U); ++i) out.push_back(static_cast<char>((static_cast<std::uint64_t>(v) >> (8 * i)) & 0xff));
}

template <class F>
void put_float(std::string& out, F v) {
  if constexpr (sizeof(F) == 4)
    put_le(out, std::bit_cast<std::uint32_t>(v));
  else
    put_le(out, std::bit_cast<std::uint64_t>(v));
}

class Reader {
 public:
  explicit Reader(const std::string& s) : s_(s) {}

  template <class U>
  U get() {
    need(sizeof(U));
    std::uint64_t v = 0;
    for (std::size_t i = 0; i < sizeof(U); ++i) v |= static_cast<std::uint64_t>(static_cast<unsigned char>(s_[pos_ + i])) << (8 * i);
    pos_ += sizeof(U);
    return static_cast<U>(v);
  }

  std::string bytes(std::size_t n) {
    need(n);
    std::string out = s_.substr(pos_, n);
    pos_ += n;
    return out;
  }

  bool done() const { return pos_ == s_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > s_.size()) throw CheckpointError("checkpoint truncated");
  }
  const std::string& s_;
  std::size_t pos_ = 0;
};

}  // namespace

std::string canonical_config_text(const ConfigMap& config) {
  std::string out;
  for (const auto& [k, v] : config) {
    if (k.empty() || k.find_first_of("=\n") != std::string::npos)
      throw CheckpointError("invalid config key '" + k + "'");
    if (v.find('\n') != std::string::npos) throw CheckpointError("config value for '" + k + "' contains a newline");
    out += k;
    out += '=';
    out += v;
    out += '\n';
  }
  return out;
}

ConfigMap parse_config_text(const std::string& text) {
  ConfigMap out;
  std::istringstream is(text);
  std::string line;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos || eq == 0) throw CheckpointError("malformed config line '" + line + "'");
    out[line.substr(0, eq)] = line.substr(eq + 1);
  }
  return out;
}

const Tensor& Checkpoint::tensor(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return t;
  throw CheckpointError("checkpoint has no tensor '" + name + "'");
}

std::string encode_checkpoint(const ConfigMap& config, std::span<const Parameter* const> params) {
  std::string out(kCheckpointMagic, sizeof(kCheckpointMagic));
  put_le<std::uint32_t>(out, kCheckpointVersion);
  const std::string text = canonical_config_text(config);
  put_le<std::uint64_t>(out, text.size());
  out += text;
  put_le<std::uint64_t>(out, params.size());
  for (const auto* p : params) {
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(p->name.size()));
    out += p->name;
    const Tensor& t = p->value;
    put_le<std::uint8_t>(out, static_cast<std::uint8_t>(t.dtype()));
    put_le<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (auto d : t.shape()) put_le<std::uint64_t>(out, d);
    dispatch(t.dtype(), [&](auto tag) {
      using T = decltype(tag);
      for (T v : t.data<T>()) put_float(out, v);
    });
  }
  return out;
}

Checkpoint decode_checkpoint(const std::string& bytes) {
  Reader r(bytes);
  if (r.bytes(sizeof(kCheckpointMagic)) != std::string(kCheckpointMagic, sizeof(kCheckpointMagic)))
    throw CheckpointError("not a checkpoint (bad magic)");
  if (const auto v = r.get<std::uint32_t>(); v != kCheckpointVersion)
    throw CheckpointError("unsupported checkpoint version " + std::to_string(v));
  Checkpoint ck;
  ck.config = parse_config_text(r.bytes(r.get<std::uint64_t>()));
  const auto count = r.get<std::uint64_t>();
  for (std::uint64_t i = 0; i < count; ++i) {
    std::string name = r.bytes(r.get<std::uint32_t>());
    const auto dt = r.get<std::uint8_t>();
    if (dt > 1) throw CheckpointError("bad dtype tag in record '" + name + "'");
    const auto rank = r.get<std::uint32_t>();
    Shape shape(rank);
    for (auto& d : shape) d = r.get<std::uint64_t>();
    Tensor t(shape, static_cast<DType>(dt));
    dispatch(t.dtype(), [&](auto tag) {
      using T = decltype(tag);
      for (T& v : t.data<T>()) {
        if constexpr (sizeof(T) == 4)
          v = std::bit_cast<float>(r.get<std::uint32_t>());
        else
          v = std::bit_cast<double>(r.get<std::uint64_t>());
      }
    });
    ck.tensors.emplace_back(std::move(name), std::move(t));
  }
  if (!r.done()) throw CheckpointError("trailing bytes after last record");
  return ck;
}

void save_checkpoint(const std::filesystem::path& path, const ConfigMap& config,
                     std::span<const Parameter* const> params) {
  const std::string bytes = encode_checkpoint(config, params);
  std::ofstream os(path, std::ios::binary | std::ios::trunc);
  if (!os) throw CheckpointError("cannot write " + path.string());
  os.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!os) throw CheckpointError("write failed for " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw CheckpointError("cannot open " + path.string());
  std::ostringstream ss;
  ss << is.rdbuf();
  return decode_checkpoint(ss.str());
}

}  // namespace dain::ad
