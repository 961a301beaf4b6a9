#include "wpl/params.hpp"

#include <algorithm>
#include <array>
#include <bit>
#include <cstring>
#include <fstream>
#include <istream>
#include <ostream>

#include "wpl/error.hpp"

namespace wpl {
namespace {

constexpr std::array<char, 8> kStoreMagic{'W', 'P', 'L', 'S', 'T', 'O', 'R', 'E'};
// Keeps a corrupt length field from triggering a huge allocation.
constexpr std::uint64_t kMaxIdLength = 1 << 16;
constexpr std::uint64_t kMaxRank = 16;

template <typename T>
void write_le(std::ostream& out, T v) {
  std::array<unsigned char, sizeof(T)> bytes{};
  std::memcpy(bytes.data(), &v, sizeof(T));
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  out.write(reinterpret_cast<const char*>(bytes.data()), bytes.size());
}

template <typename T>
T read_le(std::istream& in) {
  std::array<unsigned char, sizeof(T)> bytes{};
  in.read(reinterpret_cast<char*>(bytes.data()), bytes.size());
  if (in.gcount() != static_cast<std::streamsize>(bytes.size())) throw FormatError("unexpected end of file");
  if constexpr (std::endian::native == std::endian::big) std::reverse(bytes.begin(), bytes.end());
  T v;
  std::memcpy(&v, bytes.data(), sizeof(T));
  return v;
}

}  // namespace

namespace binio {

void write_u32(std::ostream& out, std::uint32_t v) { write_le(out, v); }
void write_u64(std::ostream& out, std::uint64_t v) { write_le(out, v); }
void write_i64(std::ostream& out, std::int64_t v) { write_le(out, v); }
void write_f64(std::ostream& out, double v) { write_le(out, std::bit_cast<std::uint64_t>(v)); }
std::uint32_t read_u32(std::istream& in) { return read_le<std::uint32_t>(in); }
std::uint64_t read_u64(std::istream& in) { return read_le<std::uint64_t>(in); }
std::int64_t read_i64(std::istream& in) { return read_le<std::int64_t>(in); }
double read_f64(std::istream& in) { return std::bit_cast<double>(read_le<std::uint64_t>(in)); }

void write_record(std::ostream& out, const std::string& id, const Tensor& value) {
  write_u64(out, id.size());
  out.write(id.data(), static_cast<std::streamsize>(id.size()));
  write_u64(out, value.rank());
  for (auto d : value.shape()) write_u64(out, d);
  for (double x : value.data()) write_f64(out, x);
}

bool read_record(std::istream& in, std::string& id, Tensor& value) {
  if (in.peek() == std::char_traits<char>::eof()) return false;
  const auto len = read_u64(in);
  if (len > kMaxIdLength) throw FormatError("parameter id length " + std::to_string(len) + " is implausible");
  id.assign(len, '\0');
  in.read(id.data(), static_cast<std::streamsize>(len));
  if (in.gcount() != static_cast<std::streamsize>(len)) throw FormatError("unexpected end of file in id");
  const auto rank = read_u64(in);
  if (rank > kMaxRank) throw FormatError("rank " + std::to_string(rank) + " is implausible for '" + id + "'");
  Shape shape(rank);
  for (auto& d : shape) d = read_u64(in);
  std::vector<double> data(shape_size(shape));
  for (auto& x : data) x = read_f64(in);
  value = Tensor(std::move(shape), std::move(data));
  return true;
}

}  // namespace binio

// ---------------------------------------------------------------------------

Snapshot::Snapshot(TensorMap values, std::string model_id, int epoch)
    : values_(std::move(values)), model_id_(std::move(model_id)), epoch_(epoch) {}

const Tensor& Snapshot::get(const ParamId& id) const {
  auto it = values_.find(id);
  if (it == values_.end()) throw KeyError("snapshot has no parameter '" + id + "'");
  return it->second;
}

void ParameterStore::add(const ParamId& id, Tensor value) {
  if (id.empty()) throw KeyError("parameter id must be nonempty");
  if (!values_.emplace(id, std::move(value)).second) throw KeyError("duplicate parameter '" + id + "'");
}

const Tensor& ParameterStore::get(const ParamId& id) const {
  auto it = values_.find(id);
  if (it == values_.end()) throw KeyError("unknown parameter '" + id + "'");
  return it->second;
}

Tensor& ParameterStore::get_mutable(const ParamId& id) {
  auto it = values_.find(id);
  if (it == values_.end()) throw KeyError("unknown parameter '" + id + "'");
  return it->second;
}

void ParameterStore::set(const ParamId& id, Tensor value) {
  Tensor& dst = get_mutable(id);
  if (dst.shape() != value.shape()) {
    throw ShapeError("set '" + id + "': shape " + shape_string(value.shape()) + " != " + shape_string(dst.shape()));
  }
  dst = std::move(value);
}

const ParamSet& ParameterStore::register_model(const std::string& model_id, const std::vector<ParamId>& ids) {
  if (models_.count(model_id) != 0) throw KeyError("model '" + model_id + "' already registered");
  if (ids.empty()) throw KeyError("model '" + model_id + "' needs at least one parameter");
  ParamSet members;
  for (const auto& id : ids) {
    if (!contains(id)) throw KeyError("model '" + model_id + "' references unknown parameter '" + id + "'");
    members.insert(id);
  }
  return models_.emplace(model_id, std::move(members)).first->second;
}

const ParamSet& ParameterStore::membership(const std::string& model_id) const {
  auto it = models_.find(model_id);
  if (it == models_.end()) throw KeyError("unknown model '" + model_id + "'");
  return it->second;
}

std::vector<std::string> ParameterStore::model_ids() const {
  std::vector<std::string> ids;
  for (const auto& [id, _] : models_) ids.push_back(id);
  return ids;
}

ParamSet ParameterStore::shared(const std::string& a, const std::string& b) const {
  const auto& ma = membership(a);
  const auto& mb = membership(b);
  ParamSet out;
  std::set_intersection(ma.begin(), ma.end(), mb.begin(), mb.end(), std::inserter(out, out.end()));
  return out;
}

ParamSet ParameterStore::shared_with_any(const std::string& model_id) const {
  const auto& mine = membership(model_id);
  ParamSet out;
  for (const auto& [other, members] : models_) {
    if (other == model_id) continue;
    for (const auto& id : mine) {
      if (members.count(id) != 0) out.insert(id);
    }
  }
  return out;
}

ParamSet ParameterStore::private_params(const std::string& model_id) const {
  const auto& mine = membership(model_id);
  const auto sharedset = shared_with_any(model_id);
  ParamSet out;
  std::set_difference(mine.begin(), mine.end(), sharedset.begin(), sharedset.end(), std::inserter(out, out.end()));
  return out;
}

Snapshot ParameterStore::take_snapshot(const std::vector<ParamId>& ids, const std::string& model_id,
                                       int epoch) const {
  TensorMap copy;
  for (const auto& id : ids) copy[id] = get(id);
  return Snapshot(std::move(copy), model_id, epoch);
}

Snapshot ParameterStore::take_snapshot(const ParamSet& ids, const std::string& model_id, int epoch) const {
  return take_snapshot(std::vector<ParamId>(ids.begin(), ids.end()), model_id, epoch);
}

void ParameterStore::restore(const Snapshot& snapshot) {
  for (const auto& [id, value] : snapshot.values()) set(id, value);
}

void ParameterStore::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  out.write(kStoreMagic.data(), kStoreMagic.size());
  binio::write_u32(out, binio::kStoreVersion);
  for (const auto& [id, value] : values_) binio::write_record(out, id, value);
  if (!out) throw Error("write failed for '" + path.string() + "'");
}

ParameterStore ParameterStore::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path.string() + "'");
  std::array<char, 8> magic{};
  in.read(magic.data(), magic.size());
  if (in.gcount() != static_cast<std::streamsize>(magic.size()) || magic != kStoreMagic) {
    throw FormatError("'" + path.string() + "' is not a parameter store (bad magic)");
  }
  const auto version = binio::read_u32(in);
  if (version != binio::kStoreVersion) {
    throw FormatError("'" + path.string() + "': unsupported store version " + std::to_string(version));
  }
  ParameterStore store;
  std::string id;
  Tensor value;
  while (binio::read_record(in, id, value)) store.add(id, std::move(value));
  return store;
}

}  // namespace wpl
