#include <gtest/gtest.h>

#include <set>

#include "corrosion/dataset.hpp"
#include "corrosion/synthgen.hpp"
#include "support.hpp"

using namespace corrosion;
using namespace corrosion::dataset;
using testsupport::TempDir;

namespace {

DatasetManifest n_images(std::size_t n) {
  DatasetManifest m;
  for (std::size_t i = 0; i < n; ++i) {
    const std::string id = "im" + std::to_string(i);
    m.entries.push_back({id, 0, 0, static_cast<int>(i % 3 == 0), Split::train, "t/" + id + ".png"});
    m.entries.push_back({id, 0, 1, 0, Split::train, "t/" + id + "_b.png"});
  }
  m.recompute();
  return m;
}

std::array<std::size_t, 3> image_split_sizes(const DatasetManifest& m) {
  return {m.images_in(Split::train).size(), m.images_in(Split::val).size(), m.images_in(Split::test).size()};
}

void expect_partition_invariants(const DatasetManifest& before, const DatasetManifest& after) {
  std::map<std::string, std::set<Split>> splits;
  for (const auto& e : after.entries) splits[e.image_id].insert(e.split);
  for (const auto& [id, s] : splits) EXPECT_EQ(s.size(), 1u) << id;
  const auto sizes = image_split_sizes(after);
  EXPECT_EQ(sizes[0] + sizes[1] + sizes[2], before.images.size());
  EXPECT_EQ(after.tiles_in(Split::train).size() + after.tiles_in(Split::val).size() +
                after.tiles_in(Split::test).size(),
            before.entries.size());
  ASSERT_EQ(after.images.size(), before.images.size());
  for (std::size_t i = 0; i < before.images.size(); ++i) {
    EXPECT_EQ(after.images[i].image_label, before.images[i].image_label);
    EXPECT_EQ(after.images[i].n_tiles, before.images[i].n_tiles);
  }
  for (std::size_t i = 0; i < before.entries.size(); ++i) EXPECT_EQ(after.entries[i].label, before.entries[i].label);
  after.validate();
}

}  // namespace

TEST(AllocateCounts, SixtyTwentyTwentyOf166) {
  EXPECT_EQ(allocate_counts(166, {}), (std::array<std::size_t, 3>{99, 34, 33}));
  EXPECT_EQ(allocate_counts(120, {}), (std::array<std::size_t, 3>{72, 24, 24}));
}

TEST(AllocateCounts, SingleImageGoesToTrain) {
  EXPECT_EQ(allocate_counts(1, {}), (std::array<std::size_t, 3>{1, 0, 0}));
  EXPECT_EQ(allocate_counts(2, {}), (std::array<std::size_t, 3>{1, 1, 0}));
  EXPECT_EQ(allocate_counts(3, {}), (std::array<std::size_t, 3>{1, 1, 1}));
}

TEST(AllocateCounts, AlwaysSumsToN) {
  for (std::size_t n = 1; n < 400; ++n)
    for (const Fractions f : {Fractions{}, Fractions{0.7, 0.15, 0.15}, Fractions{0.34, 0.33, 0.33}}) {
      const auto c = allocate_counts(n, f);
      EXPECT_EQ(c[0] + c[1] + c[2], n);
    }
}

TEST(SplitGrouped, OneSixtySixImages) {
  const auto m = n_images(166);
  const auto s = split_grouped(m, {}, 3);
  EXPECT_EQ(image_split_sizes(s), (std::array<std::size_t, 3>{99, 34, 33}));
  expect_partition_invariants(m, s);
}

TEST(SplitGrouped, SingleImage) {
  const auto s = split_grouped(n_images(1), {}, 5);
  EXPECT_EQ(image_split_sizes(s), (std::array<std::size_t, 3>{1, 0, 0}));
}

TEST(SplitGrouped, SeedDeterminesAssignment) {
  const auto m = n_images(50);
  EXPECT_EQ(split_grouped(m, {}, 11), split_grouped(m, {}, 11));
  EXPECT_NE(split_grouped(m, {}, 11), split_grouped(m, {}, 12));
}

TEST(SplitGrouped, InvariantsOnRandomManifests) {
  std::mt19937_64 gen(1);
  for (int trial = 0; trial < 100; ++trial) {
    const auto m = testsupport::random_manifest(1 + trial * 3, 12, gen);
    const auto s = split_grouped(m, {}, trial);
    expect_partition_invariants(m, s);
    EXPECT_EQ(image_split_sizes(s), allocate_counts(m.images.size(), {}));
  }
}

TEST(SplitGrouped, StratifiedSplitsEachClass) {
  const auto m = n_images(90);  // 30 corroded, 60 intact
  const auto s = split_grouped(m, {}, 4, true);
  expect_partition_invariants(m, s);
  EXPECT_EQ(class_counts(s, Split::train).corroded_images, 18u);
  EXPECT_EQ(class_counts(s, Split::val).corroded_images, 6u);
  EXPECT_EQ(class_counts(s, Split::test).intact_images, 12u);
}

TEST(SplitGrouped, Errors) {
  try {
    split_grouped(DatasetManifest{}, {}, 0);
    FAIL();
  } catch (const Error& e) {
    EXPECT_EQ(e.code(), ErrorCode::EmptyManifest);
  }
  for (const Fractions f : {Fractions{0.5, 0.5, 0.0}, Fractions{0.6, 0.2, 0.3}, Fractions{-0.2, 0.6, 0.6}}) {
    try {
      split_grouped(n_images(4), f, 0);
      FAIL();
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), ErrorCode::BadFractions);
    }
  }
}

TEST(ClassCounts, TrainRowOfTheReferenceTable) {
  // 99 images: 50 corroded carrying 2898 corroded tiles, and 19317 intact tiles overall
  DatasetManifest m;
  int corroded_left = 2898, intact_left = 19317;
  for (int i = 0; i < 99; ++i) {
    const std::string id = "im" + std::to_string(i);
    const bool corroded_image = i < 50;
    const int n_corr = corroded_image ? corroded_left / (50 - i) : 0;
    corroded_left -= n_corr;
    const int n_int = intact_left / (99 - i);
    intact_left -= n_int;
    int k = 0;
    for (int t = 0; t < n_corr; ++t, ++k) m.entries.push_back({id, k / 19, k % 19, 1, Split::train, ""});
    for (int t = 0; t < n_int; ++t, ++k) m.entries.push_back({id, k / 19, k % 19, 0, Split::train, ""});
  }
  m.recompute();
  const auto c = class_counts(m, Split::train);
  EXPECT_EQ(c.corroded_tiles, 2898u);
  EXPECT_EQ(c.intact_tiles, 19317u);
  EXPECT_EQ(c.corroded_images, 50u);
  EXPECT_EQ(c.intact_images, 49u);
}

TEST(ClassCounts, EmptySplit) {
  EXPECT_EQ(class_counts(n_images(5), Split::test), (ClassCounts{0, 0, 0, 0}));
}

TEST(ClassCounts, SyntheticSetAccountsForEveryImage) {
  TempDir dir("ds");
  synth::SurfaceSpec spec;
  spec.width = 256;
  spec.height = 256;
  synth::DatasetOptions opt;
  opt.write_files = false;
  opt.tiling = TilingSpec::non_overlapping(64);
  const auto m = split_grouped(synth::generate_dataset(spec, 60, 60, 7, dir.path(), opt), {}, 7);
  std::size_t images = 0, tiles = 0;
  for (Split s : {Split::train, Split::val, Split::test}) {
    const auto c = class_counts(m, s);
    images += c.corroded_images + c.intact_images;
    tiles += c.corroded_tiles + c.intact_tiles;
  }
  EXPECT_EQ(images, 120u);
  EXPECT_EQ(tiles, m.entries.size());
  EXPECT_EQ(image_split_sizes(m), (std::array<std::size_t, 3>{72, 24, 24}));
}

TEST(ManifestFiles, RoundTripIsBitExact) {
  std::mt19937_64 gen(2);
  const auto m = split_grouped(testsupport::random_manifest(40, 9, gen), {}, 1);
  TempDir dir("ds");
  write_manifest(m, dir / "manifest.csv");
  const auto back = read_manifest(dir / "manifest.csv");
  EXPECT_EQ(back, m);
  EXPECT_EQ(read_text(dir / "manifest.csv"), tiles_csv(m));
  write_manifest(back, dir / "again.csv");
  EXPECT_EQ(read_text(dir / "again.csv"), read_text(dir / "manifest.csv"));
  EXPECT_EQ(tiles_csv(m).substr(0, tiles_csv(m).find('\n')), "image_id,row,col,label,split,path");
}

TEST(ManifestFiles, ImageLabelLawAfterRecompute) {
  std::mt19937_64 gen(3);
  const auto m = testsupport::random_manifest(60, 10, gen);
  for (const auto& img : m.images) {
    int any = 0, n = 0;
    for (const auto& e : m.entries)
      if (e.image_id == img.image_id) any = std::max(any, e.label), ++n;
    EXPECT_EQ(img.image_label, any);
    EXPECT_EQ(img.n_tiles, n);
  }
}

TEST(ManifestFiles, MalformedInputIsRejected) {
  EXPECT_THROW(parse_manifest("image_id,row,col,label,split,path\na,0,0,1,nowhere,p\n",
                              "image_id,n_tiles,image_label,split\n"),
               Error);
  EXPECT_THROW(parse_manifest("wrong header\n", "image_id,n_tiles,image_label,split\n"), Error);
  EXPECT_THROW(parse_manifest("image_id,row,col,label,split,path\na,x,0,1,train,p\n",
                              "image_id,n_tiles,image_label,split\n"),
               Error);
}
