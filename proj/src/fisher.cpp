#include "wpl/fisher.hpp"

#include <array>
#include <cmath>
#include <fstream>

#include "wpl/error.hpp"

namespace wpl {
namespace {

constexpr std::array<char, 8> kFisherMagic{'W', 'P', 'L', 'F', 'I', 'S', 'H', 'R'};
constexpr std::uint32_t kFisherVersion = 1;

}  // namespace

TensorMap fisher_from_gradients(const ad::GradientMap& grads) {
  TensorMap out;
  for (const auto& [id, g] : grads) {
    if (!g.all_finite()) throw NumericError("non-finite gradient for '" + id + "'");
    Tensor sq = g;
    for (auto& x : sq.data()) x *= x;
    out.emplace(id, std::move(sq));
  }
  return out;
}

FisherState::FisherState(double eta, int flush_period, int last_flush_epoch)
    : eta_(eta), flush_period_(flush_period), last_flush_epoch_(last_flush_epoch) {
  if (!(eta >= 0.0 && eta <= 1.0)) throw ConfigError("fisher momentum eta must lie in [0, 1]");
  if (flush_period <= 0) throw ConfigError("fisher flush period must be positive");
}

const Snapshot& FisherState::anchor() const {
  if (!anchor_) throw KeyError("fisher state has no anchor snapshot");
  return *anchor_;
}

void FisherState::momentum_update(const TensorMap& fresh) {
  for (const auto& [id, value] : fresh) {
    if (!value.all_finite()) throw NumericError("non-finite fisher contribution for '" + id + "'");
    auto it = fisher_.find(id);
    if (it == fisher_.end()) {
      if (anchor_ && !anchor_->contains(id)) throw KeyError("anchor does not cover fisher entry '" + id + "'");
      it = fisher_.emplace(id, Tensor(value.shape(), 0.0)).first;
    }
    Tensor& f = it->second;
    if (f.shape() != value.shape()) {
      throw ShapeError("fisher '" + id + "': shape " + shape_string(value.shape()) + " != " +
                       shape_string(f.shape()));
    }
    for (std::size_t i = 0; i < f.size(); ++i) f[i] = (1.0 - eta_) * f[i] + eta_ * value[i];
  }
}

void FisherState::assign(TensorMap fisher) {
  for (const auto& [id, value] : fisher) {
    for (double x : value.data()) {
      if (!(x >= 0.0) || !std::isfinite(x)) throw NumericError("fisher entries for '" + id + "' must be finite and >= 0");
    }
  }
  if (anchor_) check_coverage(*anchor_, fisher);
  fisher_ = std::move(fisher);
}

bool FisherState::maybe_flush(int epoch) {
  if (epoch - last_flush_epoch_ < flush_period_) return false;
  for (auto& [_, f] : fisher_) f.fill(0.0);
  last_flush_epoch_ = epoch;
  return true;
}

void FisherState::check_coverage(const Snapshot& snapshot, const TensorMap& fisher) const {
  for (const auto& [id, f] : fisher) {
    if (!snapshot.contains(id)) throw KeyError("anchor snapshot does not cover fisher entry '" + id + "'");
    if (snapshot.get(id).shape() != f.shape()) throw ShapeError("anchor shape mismatch for '" + id + "'");
  }
}

void FisherState::set_anchor(Snapshot snapshot) {
  check_coverage(snapshot, fisher_);
  anchor_ = std::move(snapshot);
}

void FisherState::save(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open '" + path.string() + "' for writing");
  out.write(kFisherMagic.data(), kFisherMagic.size());
  binio::write_u32(out, kFisherVersion);
  binio::write_f64(out, eta_);
  binio::write_u64(out, static_cast<std::uint64_t>(flush_period_));
  binio::write_i64(out, last_flush_epoch_);
  binio::write_u64(out, fisher_.size());
  for (const auto& [id, value] : fisher_) binio::write_record(out, id, value);
  const TensorMap empty;
  const TensorMap& anchor_values = anchor_ ? anchor_->values() : empty;
  binio::write_u64(out, anchor_values.size());
  for (const auto& [id, value] : anchor_values) binio::write_record(out, id, value);
  if (!out) throw Error("write failed for '" + path.string() + "'");
}

FisherState FisherState::load(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error("cannot open '" + path.string() + "'");
  std::array<char, 8> magic{};
  in.read(magic.data(), magic.size());
  if (in.gcount() != static_cast<std::streamsize>(magic.size()) || magic != kFisherMagic) {
    throw FormatError("'" + path.string() + "' is not a fisher state (bad magic)");
  }
  if (binio::read_u32(in) != kFisherVersion) throw FormatError("'" + path.string() + "': unsupported version");
  const double eta = binio::read_f64(in);
  const auto period = binio::read_u64(in);
  const auto last = binio::read_i64(in);
  FisherState state(eta, static_cast<int>(period), static_cast<int>(last));

  auto read_section = [&](TensorMap& dst) {
    const auto count = binio::read_u64(in);
    std::string id;
    Tensor value;
    for (std::uint64_t i = 0; i < count; ++i) {
      if (!binio::read_record(in, id, value)) throw FormatError("'" + path.string() + "' is truncated");
      dst[id] = value;
    }
  };
  TensorMap fisher;
  TensorMap anchor;
  read_section(fisher);
  read_section(anchor);
  if (!anchor.empty()) state.set_anchor(Snapshot(std::move(anchor), {}, 0));
  state.assign(std::move(fisher));
  return state;
}

}  // namespace wpl
