#include "wpl/dataset.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iterator>
#include <numbers>
#include <numeric>

#include "wpl/error.hpp"
#include "wpl/random.hpp"

namespace wpl::data {
namespace {

std::uint32_t read_be32(const std::vector<std::uint8_t>& buf, std::size_t offset) {
  return (std::uint32_t{buf[offset]} << 24) | (std::uint32_t{buf[offset + 1]} << 16) |
         (std::uint32_t{buf[offset + 2]} << 8) | std::uint32_t{buf[offset + 3]};
}

void append_be32(std::vector<std::uint8_t>& buf, std::uint32_t v) {
  buf.push_back(static_cast<std::uint8_t>(v >> 24));
  buf.push_back(static_cast<std::uint8_t>(v >> 16));
  buf.push_back(static_cast<std::uint8_t>(v >> 8));
  buf.push_back(static_cast<std::uint8_t>(v));
}

void shuffle_split(Split& split, Rng& rng) {
  std::vector<std::size_t> order(split.size());
  std::iota(order.begin(), order.end(), std::size_t{0});
  rng.shuffle(order);
  split = gather(split, order);
}

Split sample_split(const SyntheticSpec& spec, int per_class, Rng& rng) {
  const auto n = static_cast<std::size_t>(per_class * spec.classes);
  Split s{Tensor(Shape{n, 2}), {}};
  s.y.reserve(n);
  std::size_t row = 0;
  for (int c = 0; c < spec.classes; ++c) {
    const double base = 2.0 * std::numbers::pi * c / spec.classes;
    for (int i = 0; i < per_class; ++i, ++row) {
      double px = 0.0;
      double py = 0.0;
      if (spec.kind == SyntheticSpec::Kind::blobs) {
        px = 2.0 * std::cos(base);
        py = 2.0 * std::sin(base);
      } else {
        // Arm c sweeps a quarter turn while its radius grows from 0.5 to 2.5.
        const double t = rng.uniform();
        const double r = 0.5 + 2.0 * t;
        const double a = base + 0.5 * std::numbers::pi * t;
        px = r * std::cos(a);
        py = r * std::sin(a);
      }
      s.x.at(row, 0) = px + spec.noise * rng.normal();
      s.x.at(row, 1) = py + spec.noise * rng.normal();
      s.y.push_back(c);
    }
  }
  shuffle_split(s, rng);
  return s;
}

}  // namespace

void validate(const Dataset& dataset) {
  auto check = [&](const Split& s, const char* name) {
    if (s.x.rank() != 2 || s.x.rows() != s.y.size()) {
      throw ShapeError(std::string(name) + ": input rows do not match label count");
    }
    for (int label : s.y) {
      if (label < 0 || label >= dataset.num_classes) {
        throw ConfigError(std::string(name) + ": label " + std::to_string(label) + " out of range");
      }
    }
  };
  if (dataset.num_classes < 2) throw ConfigError("dataset needs at least two classes");
  check(dataset.train, "train");
  check(dataset.validation, "validation");
  if (dataset.train.x.cols() != dataset.validation.x.cols()) throw ShapeError("train/validation feature counts differ");
}

std::string kind_name(SyntheticSpec::Kind kind) { return kind == SyntheticSpec::Kind::blobs ? "blobs" : "arcs"; }

SyntheticSpec::Kind kind_from_name(const std::string& name) {
  if (name == "blobs") return SyntheticSpec::Kind::blobs;
  if (name == "arcs") return SyntheticSpec::Kind::arcs;
  throw ConfigError("unknown synthetic dataset kind '" + name + "'");
}

Dataset make_synthetic(const SyntheticSpec& spec, std::uint64_t seed) {
  if (spec.classes < 2) throw ConfigError("synthetic data needs at least 2 classes");
  if (spec.per_class < 50) throw ConfigError("synthetic data needs at least 50 points per class");
  if (spec.val_per_class < 1) throw ConfigError("synthetic data needs validation points");
  if (!(spec.noise >= 0.0)) throw ConfigError("synthetic noise must be >= 0");
  Rng rng(seed);
  Dataset d;
  d.num_classes = spec.classes;
  d.train = sample_split(spec, spec.per_class, rng);
  d.validation = sample_split(spec, spec.val_per_class, rng);
  return d;
}

IdxArray read_idx(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open IDX file '" + path.string() + "'");
  std::vector<std::uint8_t> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  const std::string where = "IDX file '" + path.string() + "'";
  if (buf.size() < 4) throw FormatError(where + " is truncated");
  IdxArray out;
  out.magic = read_be32(buf, 0);
  if (out.magic != kIdxImagesMagic && out.magic != kIdxLabelsMagic) {
    throw FormatError(where + " has bad magic 0x" + [&] {
      char hex[9];
      std::snprintf(hex, sizeof hex, "%08x", out.magic);
      return std::string(hex);
    }());
  }
  const std::size_t ndims = out.magic & 0xff;
  if (buf.size() < 4 + 4 * ndims) throw FormatError(where + " is truncated in its header");
  std::size_t count = 1;
  for (std::size_t i = 0; i < ndims; ++i) {
    out.dims.push_back(read_be32(buf, 4 + 4 * i));
    count *= out.dims.back();
  }
  const std::size_t offset = 4 + 4 * ndims;
  if (buf.size() - offset != count) {
    throw FormatError(where + (buf.size() - offset < count ? " is truncated" : " has trailing bytes"));
  }
  out.bytes.assign(buf.begin() + static_cast<std::ptrdiff_t>(offset), buf.end());
  return out;
}

void write_idx(const std::filesystem::path& path, const IdxArray& array) {
  std::vector<std::uint8_t> buf;
  append_be32(buf, array.magic);
  for (auto d : array.dims) append_be32(buf, d);
  buf.insert(buf.end(), array.bytes.begin(), array.bytes.end());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  out.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
}

Split load_idx(const std::filesystem::path& images, const std::filesystem::path& labels) {
  const auto img = read_idx(images);
  const auto lab = read_idx(labels);
  if (img.magic != kIdxImagesMagic || img.dims.size() != 3) {
    throw FormatError("IDX file '" + images.string() + "' is not a 3-d image array");
  }
  if (lab.magic != kIdxLabelsMagic || lab.dims.size() != 1) {
    throw FormatError("IDX file '" + labels.string() + "' is not a 1-d label array");
  }
  if (img.dims[0] != lab.dims[0]) {
    throw FormatError("image count " + std::to_string(img.dims[0]) + " in '" + images.string() +
                      "' does not match label count " + std::to_string(lab.dims[0]) + " in '" + labels.string() + "'");
  }
  const std::size_t n = img.dims[0];
  const std::size_t features = std::size_t{img.dims[1]} * img.dims[2];
  Split s{Tensor(Shape{n, features}), {}};
  for (std::size_t i = 0; i < img.bytes.size(); ++i) s.x[i] = img.bytes[i] / 255.0;
  s.y.assign(lab.bytes.begin(), lab.bytes.end());
  return s;
}

Split gather(const Split& split, const std::vector<std::size_t>& indices) {
  const std::size_t f = split.x.cols();
  Split out{Tensor(Shape{indices.size(), f}), {}};
  out.y.reserve(indices.size());
  for (std::size_t r = 0; r < indices.size(); ++r) {
    const std::size_t src = indices[r];
    if (src >= split.size()) throw ShapeError("row index " + std::to_string(src) + " out of range");
    for (std::size_t c = 0; c < f; ++c) out.x.at(r, c) = split.x.at(src, c);
    out.y.push_back(split.y[src]);
  }
  return out;
}

Split head(const Split& split, std::size_t count) {
  std::vector<std::size_t> idx(std::min(count, split.size()));
  std::iota(idx.begin(), idx.end(), std::size_t{0});
  return gather(split, idx);
}

Tensor one_hot(const std::vector<int>& labels, int num_classes) {
  if (num_classes < 1) throw ConfigError("one_hot needs at least one class");
  Tensor t(Shape{labels.size(), static_cast<std::size_t>(num_classes)});
  for (std::size_t i = 0; i < labels.size(); ++i) {
    if (labels[i] < 0 || labels[i] >= num_classes) {
      throw ConfigError("label " + std::to_string(labels[i]) + " out of range");
    }
    t.at(i, static_cast<std::size_t>(labels[i])) = 1.0;
  }
  return t;
}

}  // namespace wpl::data
