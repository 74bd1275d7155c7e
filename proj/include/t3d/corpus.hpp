// Copyright (c) 2026 The t3d Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <nlohmann/json.hpp>

#include "t3d/error.hpp"
#include "t3d/phantom.hpp"
#include "t3d/rng.hpp"
#include "t3d/tokenizer.hpp"
#include "t3d/volume.hpp"

namespace t3d {

enum class Split { train, val, test };

inline const char* split_name(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::val: return "val";
    case Split::test: return "test";
  }
  return "train";
}

inline Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "val") return Split::val;
  if (s == "test") return Split::test;
  fail(Errc::format, "split: unknown value '" + s + "'");
}

struct SampleRecord {
  std::string id;
  std::string volume_path;  // relative to the manifest directory unless absolute
  std::string report_text;
  std::map<std::string, int> labels;
  Split split = Split::train;

  bool operator==(const SampleRecord&) const = default;
};

inline nlohmann::json to_json(const SampleRecord& r) {
  return {{"id", r.id},
          {"volume_path", r.volume_path},
          {"report_text", r.report_text},
          {"labels", r.labels},
          {"split", split_name(r.split)}};
}

inline SampleRecord record_from_json(const nlohmann::json& j) {
  SampleRecord r;
  try {
    r.id = j.at("id").get<std::string>();
    r.volume_path = j.at("volume_path").get<std::string>();
    r.report_text = j.at("report_text").get<std::string>();
    r.labels = j.at("labels").get<std::map<std::string, int>>();
    r.split = parse_split(j.at("split").get<std::string>());
  } catch (const nlohmann::json::exception& e) {
    fail(Errc::format, std::string("manifest record: ") + e.what());
  }
  for (const auto& [k, v] : r.labels)
    require(v == 0 || v == 1, Errc::format, "labels: '" + k + "' must be 0 or 1");
  return r;
}

/// One JSON document per line.
inline void write_manifest(const std::vector<SampleRecord>& records, const std::filesystem::path& path) {
  std::string out;
  for (const auto& r : records) out += to_json(r).dump() + "\n";
  detail::write_file_atomic(path, out);
}

inline std::vector<SampleRecord> read_manifest(const std::filesystem::path& path) {
  std::ifstream in(path);
  require(in.good(), Errc::io, "cannot open manifest " + path.string());
  std::vector<SampleRecord> records;
  std::set<std::string> ids;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    nlohmann::json j;
    try {
      j = nlohmann::json::parse(line);
    } catch (const nlohmann::json::exception& e) {
      fail(Errc::format, "manifest line " + std::to_string(lineno) + ": " + e.what());
    }
    records.push_back(record_from_json(j));
    require(ids.insert(records.back().id).second, Errc::format, "duplicate sample id '" + records.back().id + "'");
  }
  return records;
}

/// Deterministic split by id hash: ids are ordered by FNV-1a hash, the first
/// round(n/10) go to test, the next round(n/10) to val, the rest to train.
inline std::map<std::string, Split> assign_splits(const std::vector<std::string>& ids) {
  std::vector<std::pair<std::uint64_t, std::string>> keyed;
  keyed.reserve(ids.size());
  for (const auto& id : ids) keyed.emplace_back(fnv1a64(id), id);
  std::sort(keyed.begin(), keyed.end());
  const auto tenth = static_cast<std::size_t>(std::llround(static_cast<double>(ids.size()) / 10.0));
  std::map<std::string, Split> out;
  for (std::size_t i = 0; i < keyed.size(); ++i)
    out[keyed[i].second] = i < tenth ? Split::test : (i < 2 * tenth ? Split::val : Split::train);
  return out;
}

inline std::string phantom_id(std::size_t i) {
  std::ostringstream os;
  os << "phantom_" << std::setw(5) << std::setfill('0') << i;
  return os.str();
}

/// T3D_NUM_WORKERS, default 1.
inline std::size_t env_workers() {
  const char* s = std::getenv("T3D_NUM_WORKERS");
  if (!s || !*s) return 1;
  char* end = nullptr;
  const long v = std::strtol(s, &end, 10);
  require(end && *end == '\0' && v >= 1 && v <= 256, Errc::config, "T3D_NUM_WORKERS must be an integer in [1, 256]");
  return static_cast<std::size_t>(v);
}

/// Runs fn(i) for i in [0, n) across `workers` threads; each index is handled once.
template <class F>
void parallel_for(std::size_t n, std::size_t workers, F&& fn) {
  workers = std::max<std::size_t>(1, std::min(workers, n));
  if (workers == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(workers);
  for (std::size_t w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      try {
        for (std::size_t i = w; i < n; i += workers) fn(i);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : pool) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

/// Writes `n` phantoms under `out_dir`: volumes/<id>.t3dv, manifest.jsonl, vocab.txt
/// and the phantom spec actually used (phantom_spec.json). Each sample draws from its own
/// generator seeded by (seed, id), so the output does not depend on worker count.
inline std::vector<SampleRecord> synthesize_corpus(const PhantomSpec& spec, const std::filesystem::path& out_dir,
                                                   std::size_t n, std::uint64_t seed, std::size_t workers = 1) {
  spec.validate();
  namespace fs = std::filesystem;
  std::error_code ec;
  fs::create_directories(out_dir / "volumes", ec);
  require(!ec, Errc::io, "cannot create " + (out_dir / "volumes").string() + ": " + ec.message());

  std::vector<std::string> ids(n);
  for (std::size_t i = 0; i < n; ++i) ids[i] = phantom_id(i);
  const auto splits = assign_splits(ids);

  std::vector<SampleRecord> records(n);
  parallel_for(n, workers, [&](std::size_t i) {
    Rng rng(child_seed(seed, ids[i]));
    Phantom ph = generate_phantom(spec, rng);
    SampleRecord& r = records[i];
    r.id = ids[i];
    r.volume_path = "volumes/" + ids[i] + ".t3dv";
    r.report_text = ph.report;
    r.labels = ph.labels;
    r.split = splits.at(ids[i]);
    write_volume(ph.volume, out_dir / r.volume_path);
  });

  write_manifest(records, out_dir / "manifest.jsonl");
  Vocab::from_words(spec.vocab).save(out_dir / "vocab.txt");
  nlohmann::json sj = spec;
  sj["rng_seed"] = seed;
  detail::write_file_atomic(out_dir / "phantom_spec.json", sj.dump(2) + "\n");
  return records;
}

inline std::filesystem::path resolve_volume_path(const std::filesystem::path& corpus_dir, const SampleRecord& r) {
  std::filesystem::path p(r.volume_path);
  return p.is_absolute() ? p : corpus_dir / p;
}

/// Brings an arbitrary volume into model input form: intensities are windowed to
/// [-1000, 1000] unless already in unit range, then resized to `dims`.
inline Volume prepare_volume(const Volume& v, const Index3& dims) {
  Volume out = v.unit_range ? v : hu_window(v, -1000.0, 1000.0);
  if (out.dims != dims) out = resize(out, dims);
  return out;
}

/// A loaded corpus: records with their preprocessed volumes and tokenized reports.
struct Corpus {
  std::filesystem::path dir;
  Vocab vocab;
  std::vector<SampleRecord> records;
  std::vector<Volume> volumes;
  std::vector<TokenSequence> tokens;

  std::vector<std::size_t> indices(Split s) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < records.size(); ++i)
      if (records[i].split == s) out.push_back(i);
    return out;
  }

  std::vector<std::string> attributes() const {
    std::set<std::string> names;
    for (const auto& r : records)
      for (const auto& [k, v] : r.labels) names.insert(k);
    return {names.begin(), names.end()};
  }
};

inline Corpus load_corpus(const std::filesystem::path& dir, const Index3& volume_dims, std::size_t max_tokens,
                          std::size_t workers = 1) {
  Corpus c;
  c.dir = dir;
  c.vocab = Vocab::load(dir / "vocab.txt");
  c.records = read_manifest(dir / "manifest.jsonl");
  c.volumes.resize(c.records.size());
  c.tokens.resize(c.records.size());
  parallel_for(c.records.size(), workers, [&](std::size_t i) {
    c.volumes[i] = prepare_volume(read_volume(resolve_volume_path(dir, c.records[i])), volume_dims);
    c.tokens[i] = tokenize(c.records[i].report_text, c.vocab, max_tokens);
  });
  return c;
}

}  // namespace t3d
