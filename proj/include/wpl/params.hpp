#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "wpl/tensor.hpp"

namespace wpl {

using ParamId = std::string;
using ParamSet = std::set<ParamId>;

/// Frozen deep copy of a set of parameters.
class Snapshot {
 public:
  Snapshot() = default;
  Snapshot(TensorMap values, std::string model_id, int epoch);

  const TensorMap& values() const { return values_; }
  const Tensor& get(const ParamId& id) const;
  bool contains(const ParamId& id) const { return values_.count(id) != 0; }
  const std::string& model_id() const { return model_id_; }
  int epoch() const { return epoch_; }

 private:
  TensorMap values_;
  std::string model_id_;
  int epoch_ = 0;
};

/// Named parameter tensors plus per-model membership. Two models share a
/// parameter exactly when both membership sets contain its id.
class ParameterStore {
 public:
  void add(const ParamId& id, Tensor value);
  bool contains(const ParamId& id) const { return values_.count(id) != 0; }
  const Tensor& get(const ParamId& id) const;
  Tensor& get_mutable(const ParamId& id);
  void set(const ParamId& id, Tensor value);
  const TensorMap& values() const { return values_; }
  std::size_t size() const { return values_.size(); }

  const ParamSet& register_model(const std::string& model_id, const std::vector<ParamId>& ids);
  bool has_model(const std::string& model_id) const { return models_.count(model_id) != 0; }
  const ParamSet& membership(const std::string& model_id) const;
  std::vector<std::string> model_ids() const;

  ParamSet shared(const std::string& a, const std::string& b) const;
  /// Members of `model_id` that belong to no other registered model.
  ParamSet private_params(const std::string& model_id) const;
  /// Members of `model_id` that belong to at least one other registered model.
  ParamSet shared_with_any(const std::string& model_id) const;

  Snapshot take_snapshot(const std::vector<ParamId>& ids, const std::string& model_id = {}, int epoch = 0) const;
  Snapshot take_snapshot(const ParamSet& ids, const std::string& model_id = {}, int epoch = 0) const;
  /// Overwrites live values with the snapshot's (shapes must match).
  void restore(const Snapshot& snapshot);

  void save(const std::filesystem::path& path) const;
  static ParameterStore load(const std::filesystem::path& path);

 private:
  TensorMap values_;
  std::map<std::string, ParamSet> models_;
};

namespace binio {

inline constexpr std::uint32_t kStoreVersion = 1;

void write_u32(std::ostream& out, std::uint32_t v);
void write_u64(std::ostream& out, std::uint64_t v);
void write_i64(std::ostream& out, std::int64_t v);
void write_f64(std::ostream& out, double v);
std::uint32_t read_u32(std::istream& in);
std::uint64_t read_u64(std::istream& in);
std::int64_t read_i64(std::istream& in);
double read_f64(std::istream& in);

/// One record: id length, id bytes, rank, dims, data (all little-endian).
void write_record(std::ostream& out, const std::string& id, const Tensor& value);
/// Returns false at a clean end of stream.
bool read_record(std::istream& in, std::string& id, Tensor& value);

}  // namespace binio

}  // namespace wpl
