#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "wpl/tensor.hpp"

namespace wpl::data {

/// Inputs are [n, features]; labels are class indices in [0, num_classes).
struct Split {
  Tensor x;
  std::vector<int> y;
  std::size_t size() const { return y.size(); }
};

struct Dataset {
  Split train;
  Split validation;
  int num_classes = 0;
  std::size_t features() const { return train.x.cols(); }
};

void validate(const Dataset& dataset);

struct SyntheticSpec {
  enum class Kind { blobs, arcs };
  Kind kind = Kind::arcs;
  int classes = 4;
  int per_class = 500;      // training points per class
  int val_per_class = 125;  // validation points per class
  double noise = 0.3;
};

std::string kind_name(SyntheticSpec::Kind kind);
SyntheticSpec::Kind kind_from_name(const std::string& name);

/// Gaussian blobs on a circle, or k interleaved spiral arcs. Deterministic in `seed`.
Dataset make_synthetic(const SyntheticSpec& spec, std::uint64_t seed);

/// Raw IDX contents (images or labels) as stored on disk.
struct IdxArray {
  std::uint32_t magic = 0;
  std::vector<std::uint32_t> dims;
  std::vector<std::uint8_t> bytes;
};

inline constexpr std::uint32_t kIdxImagesMagic = 0x00000803;
inline constexpr std::uint32_t kIdxLabelsMagic = 0x00000801;

IdxArray read_idx(const std::filesystem::path& path);
void write_idx(const std::filesystem::path& path, const IdxArray& array);

/// Parses an image/label file pair. Pixels are scaled to value / 255 and
/// flattened to [count, rows * cols].
Split load_idx(const std::filesystem::path& images, const std::filesystem::path& labels);

/// Rows `indices` of `split`.
Split gather(const Split& split, const std::vector<std::size_t>& indices);
/// First `count` rows.
Split head(const Split& split, std::size_t count);
Tensor one_hot(const std::vector<int>& labels, int num_classes);

}  // namespace wpl::data
