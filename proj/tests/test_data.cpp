#include <gtest/gtest.h>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include <fmt/format.h>

#include "oslo/data.hpp"
#include "oslo/errors.hpp"
#include "oslo/synthetic.hpp"
#include "test_support.hpp"

namespace oslo {
namespace {

std::string read_file(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

TEST(Splits, MatchShippedFixtures) {
  for (const std::string name : {"pacs", "vlcs", "office_home", "multi_dataset", "mini_domainnet"}) {
    const auto& info = dataset_info(name);
    for (const auto& target : info.domains) {
      const std::string expected = read_file("data/splits/" + name + ".tsv");
      ASSERT_FALSE(expected.empty()) << name;
      EXPECT_EQ(render_split_table(build_splits(name, target)), expected) << name << " / " << target;
    }
  }
}

TEST(Splits, PacsSourcesAndNovel) {
  const auto spec = build_splits("PACS", "sketch");
  EXPECT_EQ(spec.source_domains, (std::vector<std::string>{"art_painting", "cartoon", "photo"}));
  EXPECT_EQ(spec.per_source_classes[0], (std::vector<int>{0, 1, 3}));
  EXPECT_EQ(spec.per_source_classes[1], (std::vector<int>{0, 2, 4}));
  EXPECT_EQ(spec.per_source_classes[2], (std::vector<int>{1, 2, 5}));
  EXPECT_EQ(spec.target_known, (std::vector<int>{0, 1, 2, 3, 4, 5}));
  EXPECT_EQ(spec.target_novel, (std::vector<int>{6}));
  EXPECT_EQ(spec.class_names[6], "person");
  EXPECT_EQ(spec.target_prompt, "sketch");
}

TEST(Splits, VlcsNovelIsFour) {
  const auto spec = build_splits("vlcs", "VOC2007");
  EXPECT_EQ(spec.target_novel, (std::vector<int>{4}));
  EXPECT_EQ(spec.source_prompts, (std::vector<std::string>{"photo", "photo", "photo"}));
}

// Known = union of sources and known/novel disjoint, for every registered split.
TEST(Splits, UnionAndDisjointInvariants) {
  for (const auto& name : registered_datasets()) {
    for (const auto& target : dataset_info(name).domains) {
      const auto spec = build_splits(name, target);
      std::set<int> u;
      for (const auto& s : spec.per_source_classes) u.insert(s.begin(), s.end());
      EXPECT_EQ(std::vector<int>(u.begin(), u.end()), spec.target_known) << name;
      for (int c : spec.target_novel) EXPECT_EQ(u.count(c), 0u) << name;
      EXPECT_EQ(std::find(spec.source_domains.begin(), spec.source_domains.end(), spec.target_domain),
                spec.source_domains.end());
    }
  }
}

TEST(Splits, AmbiguousDatasetsAreFlagged) {
  EXPECT_TRUE(build_splits("mini-domainnet", "sketch").ambiguous);
  EXPECT_TRUE(build_splits("Multi Dataset", "stl10").ambiguous);
  EXPECT_FALSE(build_splits("office_home", "Art").ambiguous);
}

TEST(Splits, UnknownNamesThrow) {
  EXPECT_THROW(dataset_info("imagenet"), InputError);
  EXPECT_THROW(build_splits("pacs", "watercolor"), InputError);
}

TEST(Splits, IndexCellParsing) {
  EXPECT_EQ(parse_index_cell("3, 0, 1"), (std::vector<int>{3, 0, 1}));
  EXPECT_EQ(parse_index_cell("0–2, 9-10"), (std::vector<int>{0, 1, 2, 9, 10}));
  EXPECT_THROW(parse_index_cell("5–2"), InputError);
  EXPECT_THROW(parse_index_cell("a"), InputError);
}

TEST(Splits, OfficeHomeIndicesAreCaseInsensitiveSorted) {
  const auto& names = dataset_info("office_home").class_names;
  ASSERT_EQ(names.size(), 65u);
  auto lower = [](std::string s) {
    for (auto& c : s) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
    return s;
  };
  for (size_t i = 1; i < names.size(); ++i) EXPECT_LT(lower(names[i - 1]), lower(names[i]));
  EXPECT_EQ(names[63], "TV");
}

DataPool memory_pool(const DatasetInfo& info, int per_class, std::uint64_t seed) {
  DataPool pool;
  Rng rng(seed);
  for (const auto& d : info.domains) {
    for (size_t c = 0; c < info.class_names.size(); ++c) {
      for (int i = 0; i < per_class; ++i) {
        pool.push_back({d, static_cast<int>(c), fmt::format("{}/{}/{}", d, c, i), testing::random_image(rng, 8, 3)});
      }
    }
  }
  return pool;
}

TEST(KShot, PacsOneShotCount) {
  const auto spec = build_splits("pacs", "photo");
  const auto pool = memory_pool(dataset_info("pacs"), 3, 1);
  for (int k : {1, 2, 3}) {
    const auto items = sample_k_shot(spec, {k, 5}, pool, 8);
    // Counting oracle: k per (source, class) pair in the table.
    size_t expected = 0;
    for (const auto& s : spec.per_source_classes) expected += s.size() * static_cast<size_t>(k);
    EXPECT_EQ(items.size(), expected);
    if (k == 1) {
      EXPECT_EQ(items.size(), 9u);
    }
    std::map<std::pair<int, int>, int> per_pair;
    for (const auto& it : items) ++per_pair[{it.domain, it.label}];
    for (const auto& [pair, n] : per_pair) EXPECT_EQ(n, k);
  }
}

TEST(KShot, LabelsAreKnownPositions) {
  const auto spec = build_splits("office_home", "Product");
  const auto pool = memory_pool(dataset_info("office_home"), 1, 2);
  const auto items = sample_k_shot(spec, {1, 0}, pool, 8);
  for (const auto& it : items) {
    const auto& src = spec.per_source_classes[static_cast<size_t>(it.domain)];
    EXPECT_TRUE(std::binary_search(src.begin(), src.end(), spec.target_known[static_cast<size_t>(it.label)]));
  }
}

TEST(KShot, DeterministicPerPair) {
  const auto spec = build_splits("pacs", "cartoon");
  const auto pool = memory_pool(dataset_info("pacs"), 4, 3);
  const auto a = sample_k_shot(spec, {1, 11}, pool, 8);
  const auto b = sample_k_shot(spec, {1, 11}, pool, 8);
  ASSERT_EQ(a.size(), b.size());
  for (size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].image.pixels, b[i].image.pixels);
  // A pool with an extra unrelated image leaves other pairs' draws unchanged.
  auto bigger = pool;
  Rng extra(9);
  bigger.push_back({"sketch", 0, "extra", testing::random_image(extra, 8, 3)});
  const auto c = sample_k_shot(spec, {1, 11}, bigger, 8);
  for (size_t i = 0; i < a.size(); ++i) EXPECT_EQ(a[i].image.pixels, c[i].image.pixels);
}

TEST(KShot, TooFewImagesNamesThePair) {
  const auto spec = build_splits("pacs", "photo");
  const auto pool = memory_pool(dataset_info("pacs"), 1, 4);
  try {
    sample_k_shot(spec, {2, 0}, pool, 8);
    FAIL() << "expected InputError";
  } catch (const InputError& e) {
    EXPECT_NE(std::string(e.what()).find("art_painting"), std::string::npos);
  }
}

TEST(TargetItems, NovelGetsUnknownLabel) {
  const auto spec = build_splits("pacs", "photo");
  const auto pool = memory_pool(dataset_info("pacs"), 2, 5);
  const auto items = target_items(spec, pool, 6, 8);
  EXPECT_EQ(items.size(), 14u);
  EXPECT_EQ(std::count_if(items.begin(), items.end(), [](const LabeledItem& i) { return i.label == 6; }), 2);
}

TEST(Ingest, FolderLayoutAndCaseInsensitiveNames) {
  const auto root = std::filesystem::temp_directory_path() / "oslo_ingest_test";
  std::filesystem::remove_all(root);
  write_synthetic_dataset(root, 2, 3, 12);
  std::filesystem::rename(root / "flat" / "circle", root / "flat" / "Circle");
  std::filesystem::create_directories(root / "unrelated");
  const auto pool = ingest_folder(root, dataset_info("synthetic_shapes"));
  EXPECT_EQ(pool.size(), 4u * 5u * 2u);
  const auto circles = std::count_if(pool.begin(), pool.end(),
                                     [](const PoolItem& p) { return p.domain == "flat" && p.class_index == 0; });
  EXPECT_EQ(circles, 2);
  const Image img = materialize(pool.front(), 8);
  EXPECT_EQ(img.height, 8);
  EXPECT_EQ(img.channels, 3);
  std::filesystem::remove_all(root);
  EXPECT_THROW(ingest_folder(root, dataset_info("synthetic_shapes")), InputError);
}

std::vector<LabeledItem> augmented_fixture(int n_known, int open_per_domain, int n_sources, int unknown) {
  std::vector<LabeledItem> out;
  Rng rng(8);
  for (int i = 0; i < n_known; ++i) out.push_back({testing::random_image(rng, 4, 3), i % unknown, i % n_sources});
  for (int s = 0; s < n_sources; ++s) {
    for (int j = 0; j < open_per_domain; ++j) out.push_back({testing::random_image(rng, 4, 3), unknown, s});
  }
  return out;
}

TEST(Batches, CompositionSixKnownPlusThreePerSource) {
  const auto aug = augmented_fixture(20, 5, 3, 6);
  const auto batches = make_batches(aug, BatchPlan{}, 3, 6, 1);
  ASSERT_EQ(batches.size(), 4u);
  for (size_t b = 0; b < batches.size(); ++b) {
    int known = 0;
    std::map<int, int> open;
    for (const auto& it : batches[b].items) {
      if (it.label == 6) {
        ++open[it.domain];
      } else {
        ++known;
      }
    }
    EXPECT_EQ(known, b + 1 < batches.size() ? 6 : 2);
    EXPECT_EQ(batches[b].partial, b + 1 == batches.size());
    for (int s = 0; s < 3; ++s) EXPECT_EQ(open[s], 3);
  }
}

TEST(Batches, EpochCoversEveryKnownItemOnce) {
  const auto aug = augmented_fixture(18, 2, 3, 6);
  const auto batches = make_batches(aug, BatchPlan{}, 3, 6, 2);
  size_t known = 0;
  for (const auto& b : batches) {
    for (const auto& it : b.items) known += it.label != 6;
  }
  EXPECT_EQ(known, 18u);
  EXPECT_FALSE(batches.back().partial);
}

TEST(Batches, InclusiveInterpretationShrinksKnownShare) {
  const auto aug = augmented_fixture(12, 3, 2, 6);
  const auto batches = make_batches(aug, BatchPlan{9, 3, false}, 2, 6, 3);
  for (const auto& b : batches) EXPECT_EQ(b.items.size(), b.partial ? b.items.size() : 9u);
  EXPECT_THROW(validate(BatchPlan{6, 3, false}, 2), ConfigError);
}

TEST(Batches, UnassignedPoolBacksEverySource) {
  auto aug = augmented_fixture(6, 0, 3, 6);
  Rng rng(1);
  aug.push_back({testing::random_image(rng, 4, 3), 6, -1});
  const auto batches = make_batches(aug, BatchPlan{}, 3, 6, 4);
  ASSERT_EQ(batches.size(), 1u);
  EXPECT_EQ(batches[0].items.size(), 15u);
  EXPECT_THROW(make_batches(augmented_fixture(6, 0, 3, 6), BatchPlan{}, 3, 6, 4), InputError);
}

TEST(Batches, SeedChangesOrderDeterministically) {
  const auto aug = augmented_fixture(30, 4, 3, 6);
  auto labels = [](const std::vector<LabeledBatch>& bs) {
    std::vector<double> v;
    for (const auto& b : bs) {
      for (const auto& it : b.items) v.push_back(it.image.pixels[0]);
    }
    return v;
  };
  EXPECT_EQ(labels(make_batches(aug, BatchPlan{}, 3, 6, 5)), labels(make_batches(aug, BatchPlan{}, 3, 6, 5)));
  EXPECT_NE(labels(make_batches(aug, BatchPlan{}, 3, 6, 5)), labels(make_batches(aug, BatchPlan{}, 3, 6, 6)));
}

TEST(Batches, StreamYieldsAllThenEnds) {
  BatchStream stream(make_batches(augmented_fixture(13, 1, 1, 6), BatchPlan{}, 1, 6, 0));
  EXPECT_EQ(stream.remaining(), 3u);
  int n = 0;
  while (stream.next()) ++n;
  EXPECT_EQ(n, 3);
  EXPECT_FALSE(stream.next().has_value());
}

}  // namespace
}  // namespace oslo
