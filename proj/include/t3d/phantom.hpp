// Copyright (c) 2026 The t3d Authors
// SPDX-License-Identifier: Apache-2.0
//
// Synthetic volume/report pairs. Each phantom plants a few primitives into a noisy
// background; every primitive occupies its own cell of a 3x3x2 location grid, and
// the report names it by intensity band, shape kind and location words.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "t3d/error.hpp"
#include "t3d/rng.hpp"
#include "t3d/tokenizer.hpp"
#include "t3d/volume.hpp"

namespace t3d {

inline constexpr Index3 kLocationBins{3, 3, 2};
inline const std::array<std::string, 3> kShapeKinds{"sphere", "box", "ellipsoid"};
inline const std::array<std::array<std::string, 3>, 3> kLocationWords{{
    {"left", "center", "right"},
    {"anterior", "middle", "posterior"},
    {"superior", "inferior", ""},
}};
inline const std::vector<std::string> kFillerWords{"no", "findings"};

struct IntensityBand {
  std::string name;
  float level = 0.f;
};

struct CatalogEntry {
  std::string kind;
  std::string band;
  Index3 bin{};

  bool operator==(const CatalogEntry&) const = default;
};

struct PhantomSpec {
  Index3 grid_dims{32, 32, 16};
  std::size_t n_shapes = 3;
  double empty_fraction = 0.03125;  // chance of a "no findings" sample; otherwise 1..n_shapes uniformly
  std::vector<IntensityBand> bands{{"faint", 0.45f}, {"moderate", 0.7f}, {"bright", 0.95f}};
  std::vector<CatalogEntry> shape_catalog;
  std::vector<std::string> vocab;  // report words, reserved tokens excluded
  float noise = 0.15f;             // background is uniform in [0, noise)
  float shape_jitter = 0.03f;      // primitive voxels are level +- jitter
  std::uint64_t rng_seed = 0;

  /// Every (kind, band, bin) combination, with the matching word list.
  static PhantomSpec standard() {
    PhantomSpec s;
    s.shape_catalog = full_catalog(s.bands);
    s.vocab = default_vocab(s.bands);
    return s;
  }

  static std::vector<CatalogEntry> full_catalog(const std::vector<IntensityBand>& bands) {
    std::vector<CatalogEntry> cat;
    for (const auto& kind : kShapeKinds)
      for (const auto& band : bands)
        for (std::size_t z = 0; z < kLocationBins[2]; ++z)
          for (std::size_t y = 0; y < kLocationBins[1]; ++y)
            for (std::size_t x = 0; x < kLocationBins[0]; ++x) cat.push_back({kind, band.name, {x, y, z}});
    return cat;
  }

  static std::vector<std::string> default_vocab(const std::vector<IntensityBand>& bands) {
    std::vector<std::string> words = kFillerWords;
    for (const auto& k : kShapeKinds) words.push_back(k);
    for (const auto& b : bands) words.push_back(b.name);
    for (std::size_t a = 0; a < 3; ++a)
      for (std::size_t i = 0; i < kLocationBins[a]; ++i) words.push_back(kLocationWords[a][i]);
    return words;
  }

  const IntensityBand* band(const std::string& name) const {
    for (const auto& b : bands)
      if (b.name == name) return &b;
    return nullptr;
  }

  /// Attribute names that carry labels: every kind and band mentioned in the catalog.
  std::vector<std::string> attributes() const {
    std::vector<std::string> out;
    for (const auto& k : kShapeKinds)
      if (std::any_of(shape_catalog.begin(), shape_catalog.end(), [&](auto& e) { return e.kind == k; }))
        out.push_back(k);
    for (const auto& b : bands)
      if (std::any_of(shape_catalog.begin(), shape_catalog.end(), [&](auto& e) { return e.band == b.name; }))
        out.push_back(b.name);
    return out;
  }

  void validate() const {
    for (std::size_t a = 0; a < 3; ++a)
      require(grid_dims[a] >= 8, Errc::spec, "grid dims must be at least 8 on every axis");
    require(empty_fraction >= 0.0 && empty_fraction <= 1.0, Errc::spec, "empty_fraction must lie in [0, 1]");
    require(!(shape_catalog.empty() && n_shapes > 0), Errc::spec, "empty shape catalog with n_shapes > 0");
    require(noise >= 0.f && noise < 0.3f, Errc::spec, "background noise must lie in [0, 0.3)");
    std::set<std::string> words(vocab.begin(), vocab.end());
    for (const auto& w : kFillerWords)
      require(words.count(w), Errc::spec, "vocabulary lacks '" + w + "'");
    std::set<std::size_t> bins;
    for (const auto& e : shape_catalog) {
      require(std::find(kShapeKinds.begin(), kShapeKinds.end(), e.kind) != kShapeKinds.end(), Errc::spec,
              "unknown shape kind '" + e.kind + "'");
      const IntensityBand* b = band(e.band);
      require(b != nullptr, Errc::spec, "unknown intensity band '" + e.band + "'");
      require(b->level - shape_jitter > 0.3f && b->level + shape_jitter <= 1.f, Errc::spec,
              "band '" + e.band + "' is not separable from the background");
      for (std::size_t a = 0; a < 3; ++a)
        require(e.bin[a] < kLocationBins[a], Errc::spec, "location bin out of range");
      for (const auto& w : split_words(phrase(e)))
        require(words.count(w), Errc::spec, "catalog phrase word '" + w + "' missing from vocabulary");
      bins.insert(bin_index(e.bin));
    }
    require(n_shapes <= bins.size() || shape_catalog.empty(), Errc::spec,
            "n_shapes exceeds the number of distinct catalog locations");
  }

  static std::size_t bin_index(const Index3& b) {
    return (b[2] * kLocationBins[1] + b[1]) * kLocationBins[0] + b[0];
  }

  static std::string phrase(const CatalogEntry& e) {
    return e.kind + " " + e.band + " " + kLocationWords[0][e.bin[0]] + " " + kLocationWords[1][e.bin[1]] +
           " " + kLocationWords[2][e.bin[2]];
  }
};

inline void to_json(nlohmann::json& j, const PhantomSpec& s) {
  j = nlohmann::json::object();
  j["grid_dims"] = s.grid_dims;
  j["n_shapes"] = s.n_shapes;
  j["empty_fraction"] = s.empty_fraction;
  j["noise"] = s.noise;
  j["shape_jitter"] = s.shape_jitter;
  j["rng_seed"] = s.rng_seed;
  j["bands"] = nlohmann::json::array();
  for (const auto& b : s.bands) j["bands"].push_back({{"name", b.name}, {"level", b.level}});
  j["catalog"] = nlohmann::json::array();
  for (const auto& e : s.shape_catalog) j["catalog"].push_back({{"kind", e.kind}, {"band", e.band}, {"bin", e.bin}});
  j["vocab"] = s.vocab;
}

/// Parses a phantom spec document. Missing keys take the standard values; an absent
/// catalog means the full kind x band x location product.
inline PhantomSpec phantom_spec_from_json(const nlohmann::json& j) {
  static const std::set<std::string> known{"grid_dims", "n_shapes", "empty_fraction", "noise", "shape_jitter",
                                           "rng_seed",  "bands",    "catalog",    "vocab"};
  require(j.is_object(), Errc::spec, "phantom spec must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it)
    require(known.count(it.key()) > 0, Errc::spec, "unknown phantom spec key '" + it.key() + "'");
  PhantomSpec s = PhantomSpec::standard();
  try {
    if (j.contains("grid_dims")) s.grid_dims = j["grid_dims"].get<Index3>();
    if (j.contains("n_shapes")) s.n_shapes = j["n_shapes"].get<std::size_t>();
    if (j.contains("empty_fraction")) s.empty_fraction = j["empty_fraction"].get<double>();
    if (j.contains("noise")) s.noise = j["noise"].get<float>();
    if (j.contains("shape_jitter")) s.shape_jitter = j["shape_jitter"].get<float>();
    if (j.contains("rng_seed")) s.rng_seed = j["rng_seed"].get<std::uint64_t>();
    if (j.contains("bands")) {
      s.bands.clear();
      for (const auto& b : j["bands"]) s.bands.push_back({b.at("name").get<std::string>(), b.at("level").get<float>()});
      s.shape_catalog = PhantomSpec::full_catalog(s.bands);
      s.vocab = PhantomSpec::default_vocab(s.bands);
    }
    if (j.contains("catalog")) {
      s.shape_catalog.clear();
      for (const auto& e : j["catalog"])
        s.shape_catalog.push_back(
            {e.at("kind").get<std::string>(), e.at("band").get<std::string>(), e.at("bin").get<Index3>()});
    }
    if (j.contains("vocab")) s.vocab = j["vocab"].get<std::vector<std::string>>();
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::spec, std::string("malformed phantom spec: ") + e.what());
  }
  s.validate();
  return s;
}

struct Phantom {
  Volume volume;
  std::string report;
  std::map<std::string, int> labels;
  std::vector<CatalogEntry> planted;  // in report order
};

namespace detail {

inline bool inside_primitive(const std::string& kind, const std::array<double, 3>& d,
                             const std::array<double, 3>& h) {
  if (kind == "box") {
    return std::abs(d[0]) <= 0.8 * h[0] && std::abs(d[1]) <= 0.8 * h[1] && std::abs(d[2]) <= 0.8 * h[2];
  }
  std::array<double, 3> r = h;
  if (kind == "ellipsoid") {
    r[1] *= 0.45;
    r[2] *= 0.6;
  }
  double q = 0;
  for (std::size_t a = 0; a < 3; ++a) q += (d[a] / r[a]) * (d[a] / r[a]);
  return q <= 1.0;
}

}  // namespace detail

/// Renders one phantom. Primitives sit in distinct location cells with a gap of at
/// least one background voxel between any two, so each is its own 6-connected
/// component above the background noise.
inline Phantom generate_phantom(const PhantomSpec& spec, Rng& rng) {
  spec.validate();
  const Index3 g = spec.grid_dims;
  Phantom ph;
  ph.volume = Volume(g, {1.f, 1.f, 1.f}, 0.f, true);
  for (float& v : ph.volume.voxels)
    v = static_cast<float>(uniform01(rng) * spec.noise);

  std::size_t count = 0;
  const bool empty = uniform01(rng) < spec.empty_fraction;
  if (!empty && spec.n_shapes > 0) count = std::uniform_int_distribution<std::size_t>(1, spec.n_shapes)(rng);

  std::vector<std::size_t> order(spec.shape_catalog.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::shuffle(order.begin(), order.end(), rng);
  std::set<std::size_t> used_bins;
  for (std::size_t idx : order) {
    if (ph.planted.size() == count) break;
    const auto& e = spec.shape_catalog[idx];
    if (used_bins.insert(PhantomSpec::bin_index(e.bin)).second) ph.planted.push_back(e);
  }
  require(ph.planted.size() == count, Errc::spec, "not enough distinct catalog locations");
  std::sort(ph.planted.begin(), ph.planted.end(), [](const CatalogEntry& a, const CatalogEntry& b) {
    return PhantomSpec::bin_index(a.bin) < PhantomSpec::bin_index(b.bin);
  });

  for (const auto& e : ph.planted) {
    std::array<double, 3> center{}, half{};
    for (std::size_t a = 0; a < 3; ++a) {
      const double cell = static_cast<double>(g[a]) / static_cast<double>(kLocationBins[a]);
      const auto jitter = static_cast<long>(std::floor(0.1 * cell));
      const long shift = jitter > 0 ? std::uniform_int_distribution<long>(-jitter, jitter)(rng) : 0;
      center[a] = (static_cast<double>(e.bin[a]) + 0.5) * cell + static_cast<double>(shift);
      half[a] = 0.3 * cell;
    }
    const float level = spec.band(e.band)->level;
    for (std::size_t z = 0; z < g[2]; ++z)
      for (std::size_t y = 0; y < g[1]; ++y)
        for (std::size_t x = 0; x < g[0]; ++x) {
          const std::array<double, 3> d{x + 0.5 - center[0], y + 0.5 - center[1], z + 0.5 - center[2]};
          if (!detail::inside_primitive(e.kind, d, half)) continue;
          const double noise = (2.0 * uniform01(rng) - 1.0) * spec.shape_jitter;
          ph.volume.at(x, y, z) = static_cast<float>(std::clamp(level + noise, 0.0, 1.0));
        }
  }

  if (ph.planted.empty()) {
    ph.report = "no findings";
  } else {
    for (std::size_t i = 0; i < ph.planted.size(); ++i) {
      if (i) ph.report += "; ";
      ph.report += PhantomSpec::phrase(ph.planted[i]);
    }
  }
  const auto words = split_words(ph.report);
  const std::set<std::string> present(words.begin(), words.end());
  for (const auto& attr : spec.attributes()) ph.labels[attr] = present.count(attr) ? 1 : 0;
  return ph;
}

}  // namespace t3d
