#include <gtest/gtest.h>

#include <cstring>
#include <filesystem>
#include <fstream>
#include <iterator>
#include <limits>

#include "test_support.hpp"
#include "wpl/error.hpp"
#include "wpl/params.hpp"

namespace wpl {
namespace {

namespace fs = std::filesystem;

fs::path temp_file(const std::string& name) {
  const fs::path dir = fs::temp_directory_path() / "wpl_params_test";
  fs::create_directories(dir);
  return dir / name;
}

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

ParameterStore three_param_store() {
  ParameterStore s;
  s.add("w1", Tensor::vector({1.0}));
  s.add("w2", Tensor::vector({2.0}));
  s.add("w3", Tensor::vector({3.0}));
  return s;
}

TEST(ParameterStore, SharedAndPrivateSets) {
  ParameterStore s = three_param_store();
  s.register_model("A", {"w1", "w2"});
  s.register_model("B", {"w1", "w2", "w3"});
  EXPECT_EQ(s.shared("A", "B"), (ParamSet{"w1", "w2"}));
  EXPECT_EQ(s.private_params("B"), (ParamSet{"w3"}));
  EXPECT_TRUE(s.private_params("A").empty());
}

TEST(ParameterStore, DisjointModelsShareNothing) {
  ParameterStore s = three_param_store();
  s.register_model("A", {"w1"});
  s.register_model("B", {"w2", "w3"});
  EXPECT_TRUE(s.shared("A", "B").empty());
}

TEST(ParameterStore, RegistrationErrors) {
  ParameterStore s = three_param_store();
  EXPECT_THROW(s.register_model("A", {"nope"}), KeyError);
  EXPECT_THROW(s.register_model("A", {}), KeyError);
  s.register_model("A", {"w1"});
  EXPECT_THROW(s.register_model("A", {"w2"}), KeyError);
  EXPECT_THROW(s.add("w1", Tensor::vector({0.0})), KeyError);
  EXPECT_THROW(s.set("w1", Tensor::vector({0.0, 1.0})), ShapeError);
  EXPECT_THROW(s.membership("Z"), KeyError);
}

TEST(ParameterStore, SharedSetsGrowWithSharedLayerCount) {
  ParameterStore s;
  std::vector<ParamId> a;
  for (int i = 0; i < 4; ++i) {
    s.add("A." + std::to_string(i), Tensor::vector({0.0}));
    a.push_back("A." + std::to_string(i));
  }
  s.register_model("A", a);
  std::size_t previous = 0;
  for (int shared = 1; shared <= 4; ++shared) {
    std::vector<ParamId> b(a.begin(), a.begin() + shared);
    for (int i = shared; i < 6; ++i) {
      const ParamId id = "B" + std::to_string(shared) + "." + std::to_string(i);
      s.add(id, Tensor::vector({0.0}));
      b.push_back(id);
    }
    const std::string model = "B" + std::to_string(shared);
    s.register_model(model, b);
    const auto now = s.shared("A", model).size();
    EXPECT_EQ(now, static_cast<std::size_t>(shared));
    EXPECT_GT(now, previous);
    previous = now;
  }
}

TEST(ParameterStoreProperty, SharingIsSymmetricAndPartitionsMembership) {
  Rng rng(11);
  for (int trial = 0; trial < 100; ++trial) {
    ParameterStore s;
    const std::size_t n = test::random_dim(rng, 1, 12);
    for (std::size_t i = 0; i < n; ++i) s.add("p" + std::to_string(i), Tensor::vector({0.0}));
    const std::size_t models = test::random_dim(rng, 1, 5);
    for (std::size_t m = 0; m < models; ++m) {
      std::vector<ParamId> ids;
      for (std::size_t i = 0; i < n; ++i) {
        if (rng.uniform() < 0.5) ids.push_back("p" + std::to_string(i));
      }
      if (ids.empty()) ids.push_back("p0");
      s.register_model("m" + std::to_string(m), ids);
    }
    for (const auto& a : s.model_ids()) {
      const ParamSet& all = s.membership(a);
      const ParamSet priv = s.private_params(a);
      const ParamSet shared = s.shared_with_any(a);
      ParamSet joined = priv;
      for (const auto& id : shared) EXPECT_TRUE(joined.insert(id).second) << "overlap at " << id;
      EXPECT_EQ(joined, all);
      for (const auto& b : s.model_ids()) EXPECT_EQ(s.shared(a, b), s.shared(b, a));
    }
  }
}

TEST(Snapshot, IsADeepCopy) {
  ParameterStore s = three_param_store();
  const Snapshot snap = s.take_snapshot(std::vector<ParamId>{"w1", "w2"}, "A", 4);
  s.get_mutable("w1")[0] = 99.0;
  EXPECT_EQ(snap.get("w1")[0], 1.0);
  EXPECT_EQ(snap.model_id(), "A");
  EXPECT_EQ(snap.epoch(), 4);
  EXPECT_FALSE(snap.contains("w3"));
  EXPECT_THROW(snap.get("w3"), KeyError);
  EXPECT_THROW(s.take_snapshot(std::vector<ParamId>{"missing"}), KeyError);
}

TEST(Snapshot, RestoreIsBitExactAndEpochSnapshotsDifferOnlyWhenChanged) {
  ParameterStore s = three_param_store();
  const Snapshot before = s.take_snapshot(std::vector<ParamId>{"w1", "w2", "w3"}, "A", 0);
  const Snapshot same = s.take_snapshot(std::vector<ParamId>{"w1", "w2", "w3"}, "A", 1);
  EXPECT_EQ(before.values(), same.values());
  s.get_mutable("w2")[0] += 0.5;
  const Snapshot after = s.take_snapshot(std::vector<ParamId>{"w1", "w2", "w3"}, "A", 2);
  EXPECT_EQ(before.get("w1"), after.get("w1"));
  EXPECT_NE(before.get("w2"), after.get("w2"));
  s.restore(before);
  EXPECT_EQ(s.take_snapshot(std::vector<ParamId>{"w1", "w2", "w3"}).values(), before.values());
}

TEST(StoreFile, RoundTripIsBitExact) {
  ParameterStore s;
  s.add("scalar", Tensor::scalar(-0.0));
  s.add("edge", Tensor::vector({std::numeric_limits<double>::denorm_min(), std::numeric_limits<double>::max(),
                                -std::numeric_limits<double>::min(), 0.1}));
  Rng rng(5);
  s.add("matrix", test::random_tensor(rng, {7, 3}, -1e6, 1e6));
  const fs::path p = temp_file("roundtrip.bin");
  s.save(p);
  const ParameterStore back = ParameterStore::load(p);
  ASSERT_EQ(back.size(), s.size());
  for (const auto& [id, t] : s.values()) {
    const Tensor& u = back.get(id);
    ASSERT_EQ(u.shape(), t.shape());
    EXPECT_EQ(std::memcmp(u.data().data(), t.data().data(), t.size() * sizeof(double)), 0) << id;
  }
  const fs::path q = temp_file("roundtrip2.bin");
  back.save(q);
  EXPECT_EQ(read_bytes(p), read_bytes(q));
  EXPECT_EQ(read_bytes(p).substr(0, 8), "WPLSTORE");
}

TEST(StoreFile, RejectsCorruptFiles) {
  ParameterStore s = three_param_store();
  const fs::path good = temp_file("good.bin");
  s.save(good);
  const std::string bytes = read_bytes(good);

  const fs::path bad_magic = temp_file("bad_magic.bin");
  {
    std::ofstream out(bad_magic, std::ios::binary);
    out << "NOTSTORE" << bytes.substr(8);
  }
  EXPECT_THROW(ParameterStore::load(bad_magic), FormatError);

  const fs::path truncated = temp_file("truncated.bin");
  {
    std::ofstream out(truncated, std::ios::binary);
    out << bytes.substr(0, bytes.size() - 3);
  }
  EXPECT_THROW(ParameterStore::load(truncated), FormatError);

  const fs::path bad_version = temp_file("bad_version.bin");
  {
    std::string v = bytes;
    v[8] = 9;
    std::ofstream out(bad_version, std::ios::binary);
    out << v;
  }
  EXPECT_THROW(ParameterStore::load(bad_version), FormatError);
  EXPECT_THROW(ParameterStore::load(temp_file("does_not_exist.bin")), Error);
}

}  // namespace
}  // namespace wpl
