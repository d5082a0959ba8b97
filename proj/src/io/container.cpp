#include "mkbe/io/container.hpp"

#include <bit>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>

#include "mkbe/errors.hpp"
#include "mkbe/kg/tsv.hpp"

namespace mkbe::io {

static_assert(std::endian::native == std::endian::little);

namespace {

enum class DType : std::uint8_t { f32 = 1, f64 = 2, u32 = 3 };

template <class T>
void put_raw(std::string& out, T v) {
  char buf[sizeof(T)];
  std::memcpy(buf, &v, sizeof(T));
  out.append(buf, sizeof(T));
}

class Reader {
 public:
  explicit Reader(std::string_view bytes) : bytes_(bytes) {}

  template <class T>
  T get() {
    T v;
    std::memcpy(&v, take(sizeof(T)).data(), sizeof(T));
    return v;
  }

  std::string_view take(std::size_t n) {
    if (n > bytes_.size() - pos_) throw StateError("container truncated");
    auto out = bytes_.substr(pos_, n);
    pos_ += n;
    return out;
  }

  std::size_t remaining() const { return bytes_.size() - pos_; }

 private:
  std::string_view bytes_;
  std::size_t pos_ = 0;
};

template <class T>
void read_payload(Reader& r, Array& a, std::size_t n) {
  if (n > r.remaining() / sizeof(T)) throw StateError("container truncated");
  std::vector<T> v(n);
  const auto bytes = r.take(n * sizeof(T));
  if (n) std::memcpy(v.data(), bytes.data(), bytes.size());
  a.data = std::move(v);
}

}  // namespace

template <class T>
const std::vector<T>& Array::as() const {
  if (auto* v = std::get_if<std::vector<T>>(&data)) return *v;
  throw StateError("container array has unexpected element type");
}

std::size_t Array::numel() const {
  return std::visit([](const auto& v) { return v.size(); }, data);
}

template <class T>
void Container::put(const std::string& name, std::vector<T> values, std::vector<std::uint64_t> shape) {
  if (shape.empty()) shape = {values.size()};
  std::uint64_t n = 1;
  for (auto d : shape) n *= d;
  if (n != values.size()) throw std::invalid_argument("container array '" + name + "': shape does not match size");
  arrays[name] = Array{std::move(shape), std::move(values)};
}

template <class T>
const std::vector<T>& Container::get(const std::string& name) const {
  return array(name).as<T>();
}

const Array& Container::array(const std::string& name) const {
  auto it = arrays.find(name);
  if (it == arrays.end()) throw StateError("container is missing array '" + name + "'");
  return it->second;
}

template void Container::put<float>(const std::string&, std::vector<float>, std::vector<std::uint64_t>);
template void Container::put<double>(const std::string&, std::vector<double>, std::vector<std::uint64_t>);
template void Container::put<std::uint32_t>(const std::string&, std::vector<std::uint32_t>,
                                            std::vector<std::uint64_t>);
template const std::vector<float>& Container::get<float>(const std::string&) const;
template const std::vector<double>& Container::get<double>(const std::string&) const;
template const std::vector<std::uint32_t>& Container::get<std::uint32_t>(const std::string&) const;
template const std::vector<float>& Array::as<float>() const;
template const std::vector<double>& Array::as<double>() const;
template const std::vector<std::uint32_t>& Array::as<std::uint32_t>() const;

std::uint64_t fnv1a64(std::string_view bytes, std::uint64_t seed) {
  std::uint64_t h = seed;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

std::string encode(const Container& c) {
  if (c.kind.size() != 4) throw std::invalid_argument("container kind must be 4 characters");
  std::string out = "MKBE" + c.kind;
  put_raw<std::uint32_t>(out, c.version);
  const auto header = c.header.dump();
  put_raw<std::uint64_t>(out, header.size());
  out += header;
  put_raw<std::uint32_t>(out, static_cast<std::uint32_t>(c.arrays.size()));
  for (const auto& [name, a] : c.arrays) {
    put_raw<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out += name;
    std::visit(
        [&](const auto& v) {
          using T = typename std::decay_t<decltype(v)>::value_type;
          const DType dt = std::is_same_v<T, float> ? DType::f32 : std::is_same_v<T, double> ? DType::f64 : DType::u32;
          put_raw<std::uint8_t>(out, static_cast<std::uint8_t>(dt));
          put_raw<std::uint32_t>(out, static_cast<std::uint32_t>(a.shape.size()));
          for (auto d : a.shape) put_raw<std::uint64_t>(out, d);
          out.append(reinterpret_cast<const char*>(v.data()), v.size() * sizeof(T));
        },
        a.data);
  }
  put_raw<std::uint64_t>(out, fnv1a64(out));
  return out;
}

Container decode(std::string_view bytes, std::string_view expected_kind) {
  if (bytes.size() < 8 + 4 + 8 + 4 + 8) throw StateError("container truncated");
  const auto body = bytes.substr(0, bytes.size() - 8);
  std::uint64_t stored;
  std::memcpy(&stored, bytes.data() + body.size(), 8);
  if (stored != fnv1a64(body)) throw StateError("container checksum mismatch (file is corrupted)");

  Reader r(body);
  if (r.take(4) != "MKBE") throw StateError("not an MKBE container (bad magic)");
  Container c;
  c.kind = std::string(r.take(4));
  if (c.kind != expected_kind)
    throw StateError("container kind is '" + c.kind + "', expected '" + std::string(expected_kind) + "'");
  c.version = r.get<std::uint32_t>();
  const auto header_len = r.get<std::uint64_t>();
  if (header_len > r.remaining()) throw StateError("container truncated");
  try {
    c.header = nlohmann::json::parse(r.take(header_len));
  } catch (const nlohmann::json::exception& e) {
    throw StateError(std::string("container header is not valid JSON: ") + e.what());
  }
  const auto count = r.get<std::uint32_t>();
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = r.get<std::uint32_t>();
    std::string name(r.take(name_len));
    const auto dtype = static_cast<DType>(r.get<std::uint8_t>());
    const auto rank = r.get<std::uint32_t>();
    if (rank > 8) throw StateError("container array '" + name + "' has implausible rank");
    Array a;
    std::uint64_t n = 1;
    for (std::uint32_t k = 0; k < rank; ++k) {
      a.shape.push_back(r.get<std::uint64_t>());
      n *= a.shape.back();
    }
    switch (dtype) {
      case DType::f32: read_payload<float>(r, a, n); break;
      case DType::f64: read_payload<double>(r, a, n); break;
      case DType::u32: read_payload<std::uint32_t>(r, a, n); break;
      default: throw StateError("container array '" + name + "' has unknown dtype");
    }
    c.arrays.emplace(std::move(name), std::move(a));
  }
  if (r.remaining() != 0) throw StateError("container has trailing bytes");
  return c;
}

void save(const std::string& path, const Container& c) { kg::write_file_atomic(path, encode(c)); }

Container load(const std::string& path, std::string_view expected_kind) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw StateError("cannot open " + path);
  std::ostringstream ss;
  ss << in.rdbuf();
  return decode(ss.str(), expected_kind);
}

}  // namespace mkbe::io
