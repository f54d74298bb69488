#include "mlma/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <sstream>

MLMA_NAMESPACE_BEGIN

namespace {

class Writer {
 public:
  template <typename T>
  void put(T value) {
    static_assert(std::is_integral_v<T>);
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      bytes.push_back(static_cast<std::uint8_t>(static_cast<std::make_unsigned_t<T>>(value) >> (8 * i)));
    }
  }
  void put_bytes(const void* p, std::size_t n) {
    const auto* b = static_cast<const std::uint8_t*>(p);
    bytes.insert(bytes.end(), b, b + n);
  }
  std::vector<std::uint8_t> bytes;
};

class Reader {
 public:
  explicit Reader(const std::vector<std::uint8_t>& b) : bytes_(b) {}
  template <typename T>
  T get() {
    need(sizeof(T));
    std::make_unsigned_t<T> v = 0;
    for (std::size_t i = 0; i < sizeof(T); ++i) {
      v |= static_cast<std::make_unsigned_t<T>>(static_cast<std::make_unsigned_t<T>>(bytes_[pos_ + i]) << (8 * i));
    }
    pos_ += sizeof(T);
    return static_cast<T>(v);
  }
  const std::uint8_t* take(std::size_t n) {
    need(n);
    const std::uint8_t* p = bytes_.data() + pos_;
    pos_ += n;
    return p;
  }
  bool done() const { return pos_ == bytes_.size(); }

 private:
  void need(std::size_t n) const {
    if (pos_ + n > bytes_.size()) throw ParseError("checkpoint: truncated at byte " + std::to_string(pos_));
  }
  const std::vector<std::uint8_t>& bytes_;
  std::size_t pos_ = 0;
};

template <typename F>
void put_float(Writer& w, F value) {
  using U = std::conditional_t<sizeof(F) == 4, std::uint32_t, std::uint64_t>;
  w.put(std::bit_cast<U>(value));
}

}  // namespace

std::vector<std::uint8_t> encode_checkpoint(const NamedTensors& tensors) {
  Writer w;
  w.put_bytes("MLMA", 4);
  w.put(kCheckpointVersion);
  w.put(static_cast<std::uint32_t>(tensors.size()));
  for (const auto& [name, t] : tensors) {
    if (name.size() > UINT16_MAX) throw ContractError("checkpoint: tensor name too long");
    if (t.rank() > UINT8_MAX) throw ContractError("checkpoint: rank too large");
    w.put(static_cast<std::uint16_t>(name.size()));
    w.put_bytes(name.data(), name.size());
    w.put(kRealDtype);
    w.put(static_cast<std::uint8_t>(t.rank()));
    for (auto e : t.shape()) w.put(static_cast<std::uint64_t>(e));
    for (Real v : t.data()) put_float(w, v);
  }
  return std::move(w.bytes);
}

NamedTensors decode_checkpoint(const std::vector<std::uint8_t>& bytes) {
  Reader r(bytes);
  const std::uint8_t* magic = r.take(4);
  if (std::memcmp(magic, "MLMA", 4) != 0) throw ParseError("checkpoint: bad magic");
  const auto version = r.get<std::uint32_t>();
  if (version != kCheckpointVersion) throw ParseError("checkpoint: unsupported version " + std::to_string(version));
  const auto count = r.get<std::uint32_t>();
  NamedTensors out;
  out.reserve(count);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto len = r.get<std::uint16_t>();
    const std::uint8_t* np = r.take(len);
    std::string name(reinterpret_cast<const char*>(np), len);
    const auto dtype = r.get<std::uint8_t>();
    if (dtype > 1) throw ParseError("checkpoint: unknown dtype " + std::to_string(dtype) + " for " + name);
    const auto rank = r.get<std::uint8_t>();
    Shape shape(rank);
    for (auto& e : shape) e = static_cast<std::size_t>(r.get<std::uint64_t>());
    const std::size_t n = shape_numel(shape);
    std::vector<Real> values(n);
    for (std::size_t j = 0; j < n; ++j) {
      if (dtype == 0) {
        values[j] = static_cast<Real>(std::bit_cast<float>(r.get<std::uint32_t>()));
      } else {
        values[j] = static_cast<Real>(std::bit_cast<double>(r.get<std::uint64_t>()));
      }
    }
    out.emplace_back(std::move(name), Tensor::from(std::move(shape), std::move(values)));
  }
  if (!r.done()) throw ParseError("checkpoint: trailing bytes");
  return out;
}

std::vector<std::uint8_t> read_file_bytes(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  return std::vector<std::uint8_t>(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
}

void write_file_bytes(const std::filesystem::path& path, const std::vector<std::uint8_t>& bytes) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw IoError("cannot write " + path.string());
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

void save_checkpoint(const std::filesystem::path& path, const NamedTensors& tensors) {
  write_file_bytes(path, encode_checkpoint(tensors));
}

NamedTensors load_checkpoint(const std::filesystem::path& path) { return decode_checkpoint(read_file_bytes(path)); }

void assign_by_name(const NamedTensors& target, const NamedTensors& source) {
  std::map<std::string, const Tensor*> lookup;
  for (const auto& [name, t] : source) lookup[name] = &t;
  for (const auto& [name, t] : target) {
    auto it = lookup.find(name);
    if (it == lookup.end()) throw ParseError("checkpoint: missing tensor " + name);
    if (it->second->shape() != t.shape()) {
      throw DimensionError("checkpoint: tensor " + name + " has shape " + shape_str(it->second->shape()) +
                           ", expected " + shape_str(t.shape()));
    }
    Tensor dst = t;
    auto src = it->second->data();
    std::copy(src.begin(), src.end(), dst.mutable_data().begin());
  }
}

std::uint64_t parameter_hash(const NamedTensors& tensors) {
  std::uint64_t h = 1469598103934665603ULL;
  for (std::uint8_t b : encode_checkpoint(tensors)) {
    h ^= b;
    h *= 1099511628211ULL;
  }
  return h;
}

namespace {
std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}
}  // namespace

KeyValues parse_key_values(const std::string& text, const std::string& origin) {
  KeyValues kv;
  std::istringstream in(text);
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#') continue;
    const auto eq = t.find('=');
    if (eq == std::string::npos) {
      throw ParseError(origin + ":" + std::to_string(lineno) + ": expected key=value");
    }
    std::string key = trim(t.substr(0, eq));
    if (key.empty()) throw ParseError(origin + ":" + std::to_string(lineno) + ": empty key");
    kv[key] = trim(t.substr(eq + 1));
  }
  return kv;
}

KeyValues read_key_values(const std::filesystem::path& path) {
  auto bytes = read_file_bytes(path);
  return parse_key_values(std::string(bytes.begin(), bytes.end()), path.string());
}

std::string format_key_values(const KeyValues& kv) {
  std::string out;
  for (const auto& [k, v] : kv) out += k + "=" + v + "\n";
  return out;
}

void write_key_values(const std::filesystem::path& path, const KeyValues& kv) {
  const std::string text = format_key_values(kv);
  write_file_bytes(path, std::vector<std::uint8_t>(text.begin(), text.end()));
}

MLMA_NAMESPACE_END
