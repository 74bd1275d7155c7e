// Copyright (c) 2026 The t3d Authors
// SPDX-License-Identifier: Apache-2.0

#include <gtest/gtest.h>

#include <cstring>
#include <deque>
#include <set>

#include "t3d/corpus.hpp"
#include "t3d/phantom.hpp"
#include "t3d/tokenizer.hpp"
#include "t3d/volume.hpp"
#include "test_util.hpp"

using namespace t3d;

namespace {

template <class F>
Errc error_code_of(F&& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  ADD_FAILURE() << "expected an Error";
  return Errc::precondition;
}

Volume ramp_x(Index3 dims, double slope, Spacing3 spacing = {1.f, 1.f, 1.f}) {
  Volume v(dims, spacing, 0.f, true);
  for (std::size_t z = 0; z < dims[2]; ++z)
    for (std::size_t y = 0; y < dims[1]; ++y)
      for (std::size_t x = 0; x < dims[0]; ++x) v.at(x, y, z) = static_cast<float>(slope * x);
  return v;
}

Volume random_volume(Rng& rng, std::size_t max_dim = 6) {
  std::uniform_int_distribution<std::size_t> d(1, max_dim);
  Volume v({d(rng), d(rng), d(rng)}, {1.f, 1.f, 1.f});
  std::uniform_real_distribution<float> sp(0.1f, 5.f);
  v.spacing = {sp(rng), sp(rng), sp(rng)};
  std::uniform_real_distribution<float> val(-2000.f, 3000.f);
  for (float& x : v.voxels) x = val(rng);
  return v;
}

/// Number of 6-connected components of voxels above `threshold`.
std::size_t count_components(const Volume& v, float threshold) {
  std::vector<char> seen(v.size(), 0);
  std::size_t count = 0;
  const auto& d = v.dims;
  for (std::size_t start = 0; start < v.size(); ++start) {
    if (seen[start] || v.voxels[start] <= threshold) continue;
    ++count;
    std::deque<std::size_t> queue{start};
    seen[start] = 1;
    while (!queue.empty()) {
      const std::size_t i = queue.front();
      queue.pop_front();
      const std::size_t x = i % d[0], y = (i / d[0]) % d[1], z = i / (d[0] * d[1]);
      const long nb[6][3] = {{-1, 0, 0}, {1, 0, 0}, {0, -1, 0}, {0, 1, 0}, {0, 0, -1}, {0, 0, 1}};
      for (const auto& o : nb) {
        const long nx = long(x) + o[0], ny = long(y) + o[1], nz = long(z) + o[2];
        if (nx < 0 || ny < 0 || nz < 0 || nx >= long(d[0]) || ny >= long(d[1]) || nz >= long(d[2])) continue;
        const std::size_t j = v.offset(nx, ny, nz);
        if (!seen[j] && v.voxels[j] > threshold) {
          seen[j] = 1;
          queue.push_back(j);
        }
      }
    }
  }
  return count;
}

}  // namespace

// ---------------------------------------------------------------------------
// hu_window

TEST(HuWindow, BoundaryValues) {
  Volume v({3, 1, 1}, {1.f, 1.f, 1.f});
  v.voxels = {-1500.f, 1000.f, 0.f};
  const Volume w = hu_window(v, -1000, 1000);
  EXPECT_EQ(w.voxels[0], 0.0f);
  EXPECT_EQ(w.voxels[1], 1.0f);
  EXPECT_EQ(w.voxels[2], 0.5f);  // (0 - lo) / (hi - lo)
  EXPECT_TRUE(w.unit_range);
  EXPECT_EQ(w.spacing, v.spacing);
}

TEST(HuWindow, RejectsEmptyWindow) {
  Volume v({1, 1, 1}, {1.f, 1.f, 1.f});
  EXPECT_EQ(error_code_of([&] { hu_window(v, 5, 5); }), Errc::invalid_window);
  EXPECT_EQ(error_code_of([&] { hu_window(v, 6, 5); }), Errc::invalid_window);
}

TEST(HuWindow, IdempotentOnUnitRange) {
  Rng rng(3);
  Volume v = hu_window(random_volume(rng), -1000, 1000);
  EXPECT_EQ(hu_window(v, 0, 1), v);
}

// ---------------------------------------------------------------------------
// resample / resize

TEST(Resample, SameSpacingIsIdentity) {
  Rng rng(1);
  for (int i = 0; i < 20; ++i) {
    Volume v = random_volume(rng);
    const std::array<double, 3> s{v.spacing[0], v.spacing[1], v.spacing[2]};
    EXPECT_EQ(resample(v, s), v);
  }
}

TEST(Resample, ConstantStaysConstant) {
  Volume v({5, 4, 3}, {1.f, 2.f, 3.f}, 0.37f, true);
  const Volume r = resample(v, {0.7, 1.3, 4.0});
  for (float x : r.voxels) EXPECT_EQ(x, 0.37f);
}

TEST(Resample, HalvedSpacingFollowsRamp) {
  const double slope = 1.0 / 16.0;
  const Volume v = ramp_x({9, 3, 2}, slope, {1.f, 1.f, 1.f});
  const Volume r = resample(v, {0.5, 1.0, 1.0});
  ASSERT_EQ(r.dims, (Index3{18, 3, 2}));
  EXPECT_EQ(r.spacing, (Spacing3{0.5f, 1.f, 1.f}));
  for (std::size_t z = 0; z < 2; ++z)
    for (std::size_t y = 0; y < 3; ++y)
      for (std::size_t x = 0; x < 18; ++x) {
        // sample position x * 0.5 mm, clamped to the last voxel at 8 mm
        const double expected = slope * std::min(0.5 * x, 8.0);
        EXPECT_NEAR(r.at(x, y, z), expected, 1e-6);
      }
}

TEST(Resample, StaysWithinInputEnvelope) {
  Rng rng(11);
  std::uniform_real_distribution<double> sp(0.3, 3.0);
  for (int i = 0; i < 50; ++i) {
    const Volume v = random_volume(rng);
    const auto [lo, hi] = std::minmax_element(v.voxels.begin(), v.voxels.end());
    const Volume r = resample(v, {sp(rng), sp(rng), sp(rng)});
    for (float x : r.voxels) {
      EXPECT_GE(x, *lo);
      EXPECT_LE(x, *hi);
    }
  }
}

TEST(Resample, RejectsNonPositiveSpacing) {
  Volume v({2, 2, 2}, {1.f, 1.f, 1.f});
  EXPECT_EQ(error_code_of([&] { resample(v, {1.0, 0.0, 1.0}); }), Errc::invalid_spacing);
  EXPECT_EQ(error_code_of([&] { resample(v, {-1.0, 1.0, 1.0}); }), Errc::invalid_spacing);
}

TEST(Resize, SameDimsIsIdentity) {
  Rng rng(5);
  Volume v = random_volume(rng);
  EXPECT_EQ(resize(v, v.dims), v);
}

TEST(Resize, ConstantStaysConstant) {
  Volume v({7, 5, 3}, {1.f, 1.f, 1.f}, -12.5f);
  for (float x : resize(v, {3, 9, 2}).voxels) EXPECT_EQ(x, -12.5f);
}

TEST(Resize, HalvesRampAndPreservesExtent) {
  const double slope = 1.0 / 16.0;
  const Volume v = ramp_x({16, 16, 8}, slope, {1.f, 1.f, 4.f});
  const Volume r = resize(v, {8, 8, 4});
  EXPECT_EQ(r.spacing, (Spacing3{2.f, 2.f, 8.f}));
  for (std::size_t z = 0; z < 4; ++z)
    for (std::size_t y = 0; y < 8; ++y)
      for (std::size_t x = 0; x < 8; ++x) EXPECT_NEAR(r.at(x, y, z), slope * 2.0 * x, 1e-6);
}

TEST(Resize, RejectsZeroDim) {
  Volume v({2, 2, 2}, {1.f, 1.f, 1.f});
  EXPECT_EQ(error_code_of([&] { resize(v, {0, 2, 2}); }), Errc::invalid_dims);
}

// ---------------------------------------------------------------------------
// crops and views

TEST(RandomCrop, FullSizeCropIsIdentity) {
  Rng rng(0), src(9);
  const Volume v = random_volume(src);
  const auto c = random_crop_at(v, v.dims, rng);
  EXPECT_EQ(c.origin, (Index3{0, 0, 0}));
  EXPECT_EQ(c.volume, v);
}

TEST(RandomCrop, SameSeedSameOrigin) {
  const Volume v({20, 20, 10}, {1.f, 1.f, 1.f});
  Rng a(42), b(42);
  for (int i = 0; i < 5; ++i) EXPECT_EQ(random_crop_at(v, {5, 6, 3}, a).origin, random_crop_at(v, {5, 6, 3}, b).origin);
}

TEST(RandomCrop, MatchesManualSliceAtOrigin) {
  Volume v({8, 8, 8}, {1.f, 1.f, 1.f});
  for (std::size_t i = 0; i < v.size(); ++i) v.voxels[i] = static_cast<float>(i);
  Rng rng(17);
  for (int t = 0; t < 20; ++t) {
    const auto c = random_crop_at(v, {4, 4, 4}, rng);
    for (std::size_t z = 0; z < 4; ++z)
      for (std::size_t y = 0; y < 4; ++y)
        for (std::size_t x = 0; x < 4; ++x) {
          const std::size_t gx = c.origin[0] + x, gy = c.origin[1] + y, gz = c.origin[2] + z;
          EXPECT_EQ(c.volume.at(x, y, z), static_cast<float>(gx + gy * 8 + gz * 64));
        }
  }
}

TEST(RandomCrop, RejectsOversizedCrop) {
  Volume v({4, 4, 4}, {1.f, 1.f, 1.f});
  Rng rng(0);
  EXPECT_EQ(error_code_of([&] { random_crop(v, {5, 4, 4}, rng); }), Errc::crop_too_large);
}

TEST(RandomCrop, AlwaysAnExactSubArray) {
  Rng rng(23);
  for (int t = 0; t < 100; ++t) {
    const Volume v = random_volume(rng, 9);
    Index3 cd{};
    for (std::size_t a = 0; a < 3; ++a) cd[a] = std::uniform_int_distribution<std::size_t>(1, v.dims[a])(rng);
    const auto c = random_crop_at(v, cd, rng);
    for (std::size_t z = 0; z < cd[2]; ++z)
      for (std::size_t y = 0; y < cd[1]; ++y)
        for (std::size_t x = 0; x < cd[0]; ++x)
          ASSERT_EQ(c.volume.at(x, y, z), v.at(c.origin[0] + x, c.origin[1] + y, c.origin[2] + z));
  }
}

TEST(MakeViews, ThreeViewsOfCropDims) {
  const Volume v({32, 32, 16}, {1.f, 1.f, 1.f});
  Rng rng(1);
  const auto views = make_views(v, 3, {16, 16, 8}, rng);
  ASSERT_EQ(views.size(), 3u);
  for (const auto& w : views) EXPECT_EQ(w.dims, (Index3{16, 16, 8}));
}

TEST(MakeViews, SingleFullView) {
  Rng src(2), rng(3);
  const Volume v = random_volume(src);
  const auto views = make_views(v, 1, v.dims, rng);
  ASSERT_EQ(views.size(), 1u);
  EXPECT_EQ(views[0], v);
}

TEST(MakeViews, FixedSeedReproducesViews) {
  Volume v({12, 12, 6}, {1.f, 1.f, 1.f});
  for (std::size_t i = 0; i < v.size(); ++i) v.voxels[i] = static_cast<float>(i);
  Rng a(77), b(77);
  EXPECT_EQ(make_views(v, 3, {5, 5, 3}, a), make_views(v, 3, {5, 5, 3}, b));
}

TEST(MakeViews, RejectsZeroViews) {
  Volume v({4, 4, 4}, {1.f, 1.f, 1.f});
  Rng rng(0);
  EXPECT_EQ(error_code_of([&] { make_views(v, 0, {2, 2, 2}, rng); }), Errc::config);
}

// ---------------------------------------------------------------------------
// phantoms

TEST(Phantom, EmptyPhantomHasNoFindings) {
  PhantomSpec spec = PhantomSpec::standard();
  spec.n_shapes = 0;
  Rng rng(4);
  const Phantom ph = generate_phantom(spec, rng);
  EXPECT_EQ(ph.report, "no findings");
  for (const auto& [k, v] : ph.labels) EXPECT_EQ(v, 0) << k;
  for (float x : ph.volume.voxels) EXPECT_LT(x, spec.noise);
}

TEST(Phantom, EmptyFractionExtremes) {
  PhantomSpec spec = PhantomSpec::standard();
  Rng rng(8);
  spec.empty_fraction = 1.0;
  for (int i = 0; i < 20; ++i) EXPECT_EQ(generate_phantom(spec, rng).report, "no findings");
  spec.empty_fraction = 0.0;
  for (int i = 0; i < 20; ++i) {
    const Phantom ph = generate_phantom(spec, rng);
    EXPECT_GE(ph.planted.size(), 1u);
    EXPECT_LE(ph.planted.size(), spec.n_shapes);
  }
  spec.empty_fraction = 1.5;
  EXPECT_EQ(error_code_of([&] { spec.validate(); }), Errc::spec);
}

TEST(Phantom, FixedSeedIsBitIdentical) {
  PhantomSpec spec = PhantomSpec::standard();
  spec.n_shapes = 2;
  Rng a(99), b(99);
  const Phantom p = generate_phantom(spec, a), q = generate_phantom(spec, b);
  EXPECT_EQ(p.volume, q.volume);
  EXPECT_EQ(p.report, q.report);
  EXPECT_EQ(p.labels, q.labels);
}

TEST(Phantom, ComponentCountMatchesPhrases) {
  const PhantomSpec spec = PhantomSpec::standard();
  for (std::uint64_t seed = 0; seed < 60; ++seed) {
    Rng rng(seed);
    const Phantom ph = generate_phantom(spec, rng);
    std::size_t phrases = 0;
    for (char c : ph.report) phrases += c == ';';
    phrases += ph.report == "no findings" ? 0 : 1;
    EXPECT_EQ(count_components(ph.volume, 0.3f), phrases) << "seed " << seed << ": " << ph.report;
  }
}

TEST(Phantom, LabelsAgreeWithReport) {
  const PhantomSpec spec = PhantomSpec::standard();
  for (std::uint64_t seed = 0; seed < 100; ++seed) {
    Rng rng(seed);
    const Phantom ph = generate_phantom(spec, rng);
    const auto words = split_words(ph.report);
    const std::set<std::string> present(words.begin(), words.end());
    for (const auto& [attr, v] : ph.labels) EXPECT_EQ(v, present.count(attr) ? 1 : 0) << attr;
    ph.volume.validate();
  }
}

TEST(Phantom, EmptyCatalogWithShapesIsSpecError) {
  PhantomSpec spec = PhantomSpec::standard();
  spec.shape_catalog.clear();
  Rng rng(0);
  EXPECT_EQ(error_code_of([&] { generate_phantom(spec, rng); }), Errc::spec);
}

TEST(Phantom, SpecJsonRoundTrip) {
  const PhantomSpec spec = PhantomSpec::standard();
  const nlohmann::json j = spec;
  const PhantomSpec back = phantom_spec_from_json(j);
  EXPECT_EQ(back.shape_catalog, spec.shape_catalog);
  EXPECT_EQ(back.vocab, spec.vocab);
  EXPECT_EQ(back.grid_dims, spec.grid_dims);
  EXPECT_EQ(error_code_of([] { phantom_spec_from_json({{"shapes", 3}}); }), Errc::spec);
}

// ---------------------------------------------------------------------------
// volume files

TEST(VolumeFile, RoundTrip) {
  testutil::TempDir dir("vol");
  Rng rng(8);
  const Volume v = random_volume(rng);
  write_volume(v, dir / "a.t3dv");
  EXPECT_EQ(read_volume(dir / "a.t3dv"), v);
}

TEST(VolumeFile, ByteLayoutFollowsOffsetFormula) {
  Volume v({2, 2, 2}, {0.5f, 1.f, 4.f}, 0.f, true);
  for (std::size_t z = 0; z < 2; ++z)
    for (std::size_t y = 0; y < 2; ++y)
      for (std::size_t x = 0; x < 2; ++x) v.at(x, y, z) = 0.1f * float(x) + 0.2f * float(y) + 0.4f * float(z);
  const std::string bytes = serialize_volume(v);
  ASSERT_EQ(bytes.size(), 33u + 8 * 4);
  EXPECT_EQ(bytes.substr(0, 4), "T3DV");
  EXPECT_EQ(bytes[4], 1);
  EXPECT_EQ(bytes[5], 0);
  EXPECT_EQ(bytes[6], 0);
  EXPECT_EQ(bytes[32], 1);
  for (std::size_t z = 0; z < 2; ++z)
    for (std::size_t y = 0; y < 2; ++y)
      for (std::size_t x = 0; x < 2; ++x) {
        const std::size_t off = 33 + 4 * (x + y * 2 + z * 4);  // hand-computed offset
        float f;
        std::memcpy(&f, bytes.data() + off, 4);
        EXPECT_EQ(f, v.at(x, y, z));
      }
  float sx;
  std::memcpy(&sx, bytes.data() + 20, 4);
  EXPECT_EQ(sx, 0.5f);
}

TEST(VolumeFile, FormatErrorsNameTheField) {
  Volume v({2, 2, 1}, {1.f, 1.f, 1.f});
  const std::string good = serialize_volume(v);
  auto message_of = [](const std::string& bytes) {
    try {
      deserialize_volume(bytes);
    } catch (const Error& e) {
      EXPECT_EQ(e.code(), Errc::format);
      return std::string(e.what());
    }
    ADD_FAILURE() << "expected a format error";
    return std::string();
  };
  std::string bad = good;
  bad[0] = 'X';
  EXPECT_NE(message_of(bad).find("magic"), std::string::npos);
  bad = good;
  bad[6] = 3;
  EXPECT_NE(message_of(bad).find("dtype"), std::string::npos);
  EXPECT_NE(message_of(good.substr(0, good.size() - 2)).find("voxels"), std::string::npos);
  EXPECT_NE(message_of(good.substr(0, 10)).find("header"), std::string::npos);
}

TEST(VolumeFile, RandomizedRoundTripsAreBitExact) {
  testutil::TempDir dir("vols");
  Rng rng(2024);
  for (int i = 0; i < 500; ++i) {
    Volume v = random_volume(rng, 5);
    v.unit_range = false;
    const auto path = dir / "v.t3dv";
    write_volume(v, path);
    const Volume back = read_volume(path);
    ASSERT_EQ(back.dims, v.dims);
    ASSERT_EQ(std::memcmp(back.spacing.data(), v.spacing.data(), sizeof(v.spacing)), 0);
    ASSERT_EQ(std::memcmp(back.voxels.data(), v.voxels.data(), 4 * v.size()), 0);
  }
}

// ---------------------------------------------------------------------------
// tokenizer

TEST(Tokenize, EmptyTextIsClsThenPadding) {
  const Vocab vocab = Vocab::from_words({"no", "findings"});
  const TokenSequence t = tokenize("", vocab, 8);
  ASSERT_EQ(t.length(), 8u);
  EXPECT_EQ(t.ids[0], Vocab::kCls);
  EXPECT_EQ(t.mask[0], 1);
  for (std::size_t i = 1; i < 8; ++i) {
    EXPECT_EQ(t.ids[i], Vocab::kPad);
    EXPECT_EQ(t.mask[i], 0);
  }
}

TEST(Tokenize, DirectLookup) {
  const Vocab vocab = Vocab::from_words({"no", "findings"});
  const TokenSequence t = tokenize("No findings.", vocab, 5);
  EXPECT_EQ(t.ids, (std::vector<std::size_t>{Vocab::kCls, vocab.id("no"), vocab.id("findings"), 0, 0}));
  EXPECT_EQ(t.mask, (std::vector<std::uint8_t>{1, 1, 1, 0, 0}));
}

TEST(Tokenize, TruncatesAtTail) {
  const Vocab vocab = Vocab::from_words({"a", "b", "c"});
  const TokenSequence t = tokenize("a b c a b c a b c", vocab, 4);
  EXPECT_EQ(t.ids, (std::vector<std::size_t>{Vocab::kCls, vocab.id("a"), vocab.id("b"), vocab.id("c")}));
  EXPECT_EQ(t.mask, (std::vector<std::uint8_t>(4, 1)));
}

TEST(Tokenize, UnknownWordsMapToUnk) {
  const Vocab vocab = Vocab::from_words({"sphere"});
  const TokenSequence t = tokenize("sphere, cube", vocab, 4);
  EXPECT_EQ(t.ids[2], Vocab::kUnk);
}

TEST(Tokenize, EmptyVocabularyIsConfigError) {
  EXPECT_EQ(error_code_of([] { Vocab v(std::vector<std::string>{}); }), Errc::config);
  EXPECT_EQ(error_code_of([] { tokenize("x", Vocab(), 4); }), Errc::config);
}

// ---------------------------------------------------------------------------
// corpus

TEST(Corpus, HundredIdsSplitEightyTenTen) {
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < 100; ++i) ids.push_back(phantom_id(i));
  const auto splits = assign_splits(ids);
  std::map<Split, int> counts;
  for (const auto& [id, s] : splits) ++counts[s];
  EXPECT_EQ(counts[Split::train], 80);
  EXPECT_EQ(counts[Split::val], 10);
  EXPECT_EQ(counts[Split::test], 10);
}

TEST(Corpus, SplitFollowsHashOrder) {
  std::vector<std::string> ids;
  for (std::size_t i = 0; i < 40; ++i) ids.push_back(phantom_id(i));
  std::vector<std::pair<std::uint64_t, std::string>> keyed;
  for (const auto& id : ids) keyed.emplace_back(fnv1a64(id), id);
  std::sort(keyed.begin(), keyed.end());
  const auto splits = assign_splits(ids);
  for (std::size_t i = 0; i < keyed.size(); ++i) {
    const Split expected = i < 4 ? Split::test : (i < 8 ? Split::val : Split::train);
    EXPECT_EQ(splits.at(keyed[i].second), expected);
  }
}

TEST(Corpus, SynthesisIsIndependentOfWorkerCount) {
  testutil::TempDir a("c1"), b("c4");
  const PhantomSpec spec = PhantomSpec::standard();
  const auto ra = synthesize_corpus(spec, a.path(), 12, 5, 1);
  const auto rb = synthesize_corpus(spec, b.path(), 12, 5, 4);
  EXPECT_EQ(ra, rb);
  for (const auto& r : ra) EXPECT_EQ(read_volume(a / r.volume_path), read_volume(b / r.volume_path));
  EXPECT_EQ(detail::read_file(a / "manifest.jsonl"), detail::read_file(b / "manifest.jsonl"));
}

TEST(Corpus, LoadPreparesVolumesAndTokens) {
  testutil::TempDir dir("load");
  synthesize_corpus(PhantomSpec::standard(), dir.path(), 6, 1);
  const Corpus c = load_corpus(dir.path(), {16, 16, 8}, 32);
  ASSERT_EQ(c.records.size(), 6u);
  for (std::size_t i = 0; i < 6; ++i) {
    EXPECT_EQ(c.volumes[i].dims, (Index3{16, 16, 8}));
    EXPECT_TRUE(c.volumes[i].unit_range);
    EXPECT_EQ(c.tokens[i].ids[0], Vocab::kCls);
  }
  EXPECT_EQ(c.attributes(), (std::vector<std::string>{"box", "bright", "ellipsoid", "faint", "moderate", "sphere"}));
}

TEST(Corpus, ManifestRejectsDuplicateIds) {
  testutil::TempDir dir("dup");
  SampleRecord r{"x", "volumes/x.t3dv", "no findings", {{"sphere", 0}}, Split::train};
  write_manifest({r, r}, dir / "manifest.jsonl");
  EXPECT_EQ(error_code_of([&] { read_manifest(dir / "manifest.jsonl"); }), Errc::format);
  EXPECT_EQ(error_code_of([&] { read_manifest(dir / "missing.jsonl"); }), Errc::io);
}

TEST(Corpus, HuVolumesAreWindowedOnLoad) {
  Volume v({4, 4, 2}, {1.f, 1.f, 1.f}, 0.f, false);
  v.voxels[0] = -3000.f;
  v.voxels[1] = 2500.f;
  const Volume p = prepare_volume(v, {4, 4, 2});
  EXPECT_TRUE(p.unit_range);
  EXPECT_EQ(p.voxels[0], 0.f);
  EXPECT_EQ(p.voxels[1], 1.f);
  EXPECT_EQ(p.voxels[2], 0.5f);
}

TEST(Corpus, WorkerEnvironmentVariableIsValidated) {
  ::setenv("T3D_NUM_WORKERS", "3", 1);
  EXPECT_EQ(env_workers(), 3u);
  ::setenv("T3D_NUM_WORKERS", "zero", 1);
  EXPECT_EQ(error_code_of([] { env_workers(); }), Errc::config);
  ::unsetenv("T3D_NUM_WORKERS");
  EXPECT_EQ(env_workers(), 1u);
}
