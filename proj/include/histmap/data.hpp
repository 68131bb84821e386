#pragma once

#include <algorithm>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include "histmap/core.hpp"
#include "histmap/errors.hpp"

namespace histmap {

/// Parameters of the synthetic embedding generator. Identity centers are
/// drawn at scale inter_scale; each identity gets clothing sub-centers
/// offset at clothing_shift_sigma; instances are sub-center plus isotropic
/// noise at intra_sigma. The seed fully determines the output.
struct SyntheticSpec {
  std::size_t num_identities = 32;
  std::size_t instances_per_identity = 12;
  std::size_t dim = 32;
  double intra_sigma = 0.25;
  double inter_scale = 1.0;
  std::size_t clothing_clusters_per_identity = 2;
  double clothing_shift_sigma = 0.0;
  std::uint64_t seed = 17;

  void validate() const {
    if (num_identities == 0 || instances_per_identity == 0 || dim == 0)
      throw InvalidSpec("counts must be positive");
    if (clothing_clusters_per_identity == 0)
      throw InvalidSpec("clothing_clusters_per_identity must be positive");
    if (intra_sigma < 0 || inter_scale < 0 || clothing_shift_sigma < 0)
      throw InvalidSpec("sigmas must be non-negative");
  }
};

inline LabeledSet generate_synthetic(const SyntheticSpec& spec) {
  spec.validate();
  std::mt19937_64 rng(spec.seed);
  std::normal_distribution<double> unit(0.0, 1.0);

  const std::size_t n = spec.num_identities * spec.instances_per_identity;
  LabeledSet set;
  set.embeddings = EmbeddingMatrix(n, spec.dim);
  set.identity.resize(n);
  set.camera.resize(n);
  set.clothing.resize(n);
  set.role = SetRole::Train;

  std::size_t row = 0;
  std::vector<double> center(spec.dim), sub(spec.dim);
  for (std::size_t id = 0; id < spec.num_identities; ++id) {
    for (double& c : center) c = spec.inter_scale * unit(rng);
    std::vector<std::vector<double>> subcenters(spec.clothing_clusters_per_identity);
    for (auto& sc : subcenters) {
      sc.resize(spec.dim);
      for (std::size_t t = 0; t < spec.dim; ++t)
        sc[t] = center[t] + spec.clothing_shift_sigma * unit(rng);
    }
    for (std::size_t inst = 0; inst < spec.instances_per_identity; ++inst) {
      std::size_t cloth = inst % spec.clothing_clusters_per_identity;
      double* r = set.embeddings.row(row);
      for (std::size_t t = 0; t < spec.dim; ++t)
        r[t] = subcenters[cloth][t] + spec.intra_sigma * unit(rng);
      set.identity[row] = static_cast<std::uint32_t>(id);
      // each frame is captured by its own camera
      set.camera[row] = static_cast<std::uint32_t>(row);
      set.clothing[row] = static_cast<std::uint32_t>(cloth);
      ++row;
    }
  }
  return set;
}

inline LabeledSet subset_rows(const LabeledSet& set,
                              const std::vector<std::size_t>& rows,
                              SetRole role) {
  LabeledSet out;
  out.embeddings = EmbeddingMatrix(rows.size(), set.embeddings.d);
  out.identity.resize(rows.size());
  out.camera.resize(rows.size());
  out.clothing.resize(rows.size());
  out.role = role;
  out.original_identity = set.original_identity;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    std::copy_n(set.embeddings.row(rows[i]), set.embeddings.d,
                out.embeddings.row(i));
    out.identity[i] = set.identity[rows[i]];
    out.camera[i] = set.camera[rows[i]];
    out.clothing[i] = set.clothing[rows[i]];
  }
  return out;
}

/// Splits a set by instance index within each identity: the first
/// train_per_id instances go to Train, then query_per_id to Query, the rest
/// to Gallery. Identities are shared across the splits (held-out instances,
/// not held-out identities).
struct InstanceSplit {
  LabeledSet train, query, gallery;
};

inline InstanceSplit split_by_instance(const LabeledSet& set,
                                       std::size_t train_per_id,
                                       std::size_t query_per_id) {
  std::map<std::uint32_t, std::size_t> seen;
  std::vector<std::size_t> tr, qu, ga;
  for (std::size_t i = 0; i < set.size(); ++i) {
    std::size_t k = seen[set.identity[i]]++;
    if (k < train_per_id)
      tr.push_back(i);
    else if (k < train_per_id + query_per_id)
      qu.push_back(i);
    else
      ga.push_back(i);
  }
  return {subset_rows(set, tr, SetRole::Train),
          subset_rows(set, qu, SetRole::Query),
          subset_rows(set, ga, SetRole::Gallery)};
}

/// One P*K mini-batch: p distinct identities, k row indices each.
struct PkBatch {
  std::vector<std::size_t> indices;
  std::size_t p = 0;
  std::size_t k = 0;
};

/// Deterministic P*K epoch sampler. Every identity appears at least once
/// per epoch where feasible; identities with fewer than k instances are
/// sampled with replacement.
inline std::vector<PkBatch> pk_sampler(const LabeledSet& set, std::size_t p,
                                       std::size_t k, std::uint64_t seed,
                                       std::uint64_t epoch) {
  std::map<std::uint32_t, std::vector<std::size_t>> by_id;
  for (std::size_t i = 0; i < set.size(); ++i)
    by_id[set.identity[i]].push_back(i);
  if (by_id.size() < p) throw TooFewIdentities(by_id.size(), p);

  std::mt19937_64 rng(seed * 0x9E3779B97F4A7C15ULL + epoch);
  std::vector<std::uint32_t> ids;
  ids.reserve(by_id.size());
  for (const auto& [id, _] : by_id) ids.push_back(id);
  std::shuffle(ids.begin(), ids.end(), rng);

  // pad the tail so the last batch still has p distinct identities
  std::size_t n_batches = (ids.size() + p - 1) / p;
  std::size_t deficit = n_batches * p - ids.size();
  for (std::size_t t = 0; t < deficit; ++t) ids.push_back(ids[t]);

  std::vector<PkBatch> batches;
  for (std::size_t b = 0; b < n_batches; ++b) {
    PkBatch batch;
    batch.p = p;
    batch.k = k;
    for (std::size_t s = 0; s < p; ++s) {
      const auto& pool = by_id[ids[b * p + s]];
      std::vector<std::size_t> picks(pool);
      std::shuffle(picks.begin(), picks.end(), rng);
      for (std::size_t t = 0; t < k; ++t)
        batch.indices.push_back(picks[t % picks.size()]);
    }
    batches.push_back(std::move(batch));
  }
  return batches;
}

struct RelabelResult {
  LabeledSet set;
  // class_pairs[c] = (original identity, clothing) of new class c
  std::vector<std::pair<std::uint32_t, std::uint32_t>> class_pairs;
};

/// Treats each (identity, clothing) pair as its own training class.
inline RelabelResult relabel_by_clothing(const LabeledSet& set) {
  if (set.clothing.size() != set.size() || set.size() == 0)
    throw MissingClothingLabels();

  std::map<std::pair<std::uint32_t, std::uint32_t>, std::uint32_t> remap;
  for (std::size_t i = 0; i < set.size(); ++i)
    remap.emplace(std::make_pair(set.identity[i], set.clothing[i]), 0);
  std::uint32_t next = 0;
  for (auto& [pair, cls] : remap) cls = next++;

  RelabelResult res;
  res.set = set;
  res.class_pairs.resize(remap.size());
  res.set.original_identity.resize(remap.size());
  for (const auto& [pair, cls] : remap) {
    res.class_pairs[cls] = pair;
    res.set.original_identity[cls] = pair.first;
  }
  for (std::size_t i = 0; i < set.size(); ++i)
    res.set.identity[i] = remap.at({set.identity[i], set.clothing[i]});
  return res;
}

/// Remaps identity labels to a dense 0..C-1 range, recording the mapping.
inline LabeledSet densify_identities(const LabeledSet& set) {
  std::map<std::uint32_t, std::uint32_t> remap;
  for (auto id : set.identity) remap.emplace(id, 0);
  std::uint32_t next = 0;
  for (auto& [orig, dense] : remap) dense = next++;
  LabeledSet out = set;
  out.original_identity.resize(remap.size());
  for (const auto& [orig, dense] : remap) out.original_identity[dense] = orig;
  for (auto& id : out.identity) id = remap.at(id);
  return out;
}

// ---------------------------------------------------------------------------
// File formats.
// CSV: header `id,camera,clothing,f0..f{D-1}`; the clothing column is
// optional and defaults to 0.
// Binary: magic "HMAPDSET", version u32, N u64, D u64, fp64 payload,
// identity/camera/clothing as u32 arrays.
// ---------------------------------------------------------------------------

inline void save_labeled_set_csv(const LabeledSet& set, const std::string& path) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open " + path + " for writing");
  os << "id,camera,clothing";
  for (std::size_t t = 0; t < set.embeddings.d; ++t) os << ",f" << t;
  os << "\n";
  char buf[32];
  for (std::size_t i = 0; i < set.size(); ++i) {
    os << set.identity[i] << ',' << set.camera[i] << ',' << set.clothing[i];
    for (std::size_t t = 0; t < set.embeddings.d; ++t) {
      std::snprintf(buf, sizeof(buf), "%.17g", set.embeddings.at(i, t));
      os << ',' << buf;
    }
    os << "\n";
  }
  if (!os) throw IoError("failed writing " + path);
}

namespace detail {

inline constexpr char kDsetMagic[8] = {'H', 'M', 'A', 'P', 'D', 'S', 'E', 'T'};
inline constexpr std::uint32_t kDsetVersion = 1;

inline std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (c != '\r') {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

}  // namespace detail

inline void save_labeled_set_binary(const LabeledSet& set, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path + " for writing");
  os.write(detail::kDsetMagic, 8);
  auto write_pod = [&](auto v) { os.write(reinterpret_cast<const char*>(&v), sizeof(v)); };
  write_pod(detail::kDsetVersion);
  write_pod(static_cast<std::uint64_t>(set.size()));
  write_pod(static_cast<std::uint64_t>(set.embeddings.d));
  os.write(reinterpret_cast<const char*>(set.embeddings.data.data()),
           static_cast<std::streamsize>(set.embeddings.data.size() * sizeof(double)));
  auto write_labels = [&](const std::vector<std::uint32_t>& v) {
    os.write(reinterpret_cast<const char*>(v.data()),
             static_cast<std::streamsize>(v.size() * sizeof(std::uint32_t)));
  };
  write_labels(set.identity);
  write_labels(set.camera);
  write_labels(set.clothing);
  if (!os) throw IoError("failed writing " + path);
}

enum class SetFormat { Csv, Binary };

inline LabeledSet load_labeled_set(const std::string& path, SetFormat format,
                                   SetRole role = SetRole::Train,
                                   bool densify = true) {
  LabeledSet raw;
  raw.role = role;
  if (format == SetFormat::Binary) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open " + path);
    char magic[8];
    is.read(magic, 8);
    if (!is || std::memcmp(magic, detail::kDsetMagic, 8) != 0)
      throw ParseError(path, 0, "bad magic");
    auto read_pod = [&](auto& v) {
      is.read(reinterpret_cast<char*>(&v), sizeof(v));
      if (!is) throw ParseError(path, 0, "truncated header");
    };
    std::uint32_t version;
    std::uint64_t n, d;
    read_pod(version);
    if (version != detail::kDsetVersion) throw ParseError(path, 0, "bad version");
    read_pod(n);
    read_pod(d);
    raw.embeddings = EmbeddingMatrix(n, d);
    is.read(reinterpret_cast<char*>(raw.embeddings.data.data()),
            static_cast<std::streamsize>(n * d * sizeof(double)));
    raw.identity.resize(n);
    raw.camera.resize(n);
    raw.clothing.resize(n);
    auto read_labels = [&](std::vector<std::uint32_t>& v) {
      is.read(reinterpret_cast<char*>(v.data()),
              static_cast<std::streamsize>(v.size() * sizeof(std::uint32_t)));
    };
    read_labels(raw.identity);
    read_labels(raw.camera);
    read_labels(raw.clothing);
    if (!is) throw ParseError(path, 0, "truncated payload");
  } else {
    std::ifstream is(path);
    if (!is) throw IoError("cannot open " + path);
    std::string line;
    if (!std::getline(is, line)) throw ParseError(path, 1, "empty file");
    auto header = detail::split_csv_line(line);
    if (header.size() < 3 || header[0] != "id")
      throw LabelColumnMissing("id");
    if (header[1] != "camera") throw LabelColumnMissing("camera");
    bool has_clothing = header[2] == "clothing";
    std::size_t feat_start = has_clothing ? 3 : 2;
    std::size_t d = header.size() - feat_start;
    if (d == 0) throw ParseError(path, 1, "no feature columns");

    std::vector<double> values;
    std::size_t line_no = 1;
    while (std::getline(is, line)) {
      ++line_no;
      if (line.empty()) continue;
      auto cells = detail::split_csv_line(line);
      if (cells.size() != header.size())
        throw ParseError(path, line_no, "wrong column count");
      try {
        raw.identity.push_back(static_cast<std::uint32_t>(std::stoul(cells[0])));
        raw.camera.push_back(static_cast<std::uint32_t>(std::stoul(cells[1])));
        raw.clothing.push_back(
            has_clothing ? static_cast<std::uint32_t>(std::stoul(cells[2])) : 0u);
        for (std::size_t t = 0; t < d; ++t)
          values.push_back(std::stod(cells[feat_start + t]));
      } catch (const std::logic_error&) {
        throw ParseError(path, line_no, "unparsable cell");
      }
    }
    raw.embeddings.n = raw.identity.size();
    raw.embeddings.d = d;
    raw.embeddings.data = std::move(values);
  }

  for (std::size_t i = 0; i < raw.size(); ++i)
    for (std::size_t t = 0; t < raw.embeddings.d; ++t)
      if (!std::isfinite(raw.embeddings.at(i, t))) throw NonFiniteValue(i, t);

  return densify ? densify_identities(raw) : raw;
}

// ---------------------------------------------------------------------------
// Split manifest: plain structured text, `key = value` per line. Keys are
// <subset>.identities and <subset>.images for the declared subsets.
// ---------------------------------------------------------------------------

struct SubsetStats {
  long identities = 0;
  long images = 0;
};

struct SplitManifest {
  std::map<std::string, SubsetStats> subsets;
};

inline std::string manifest_to_text(const SplitManifest& manifest) {
  std::ostringstream os;
  for (const auto& [name, st] : manifest.subsets) {
    os << name << ".identities = " << st.identities << "\n";
    os << name << ".images = " << st.images << "\n";
  }
  return os.str();
}

inline SplitManifest parse_manifest(const std::string& text) {
  SplitManifest m;
  std::istringstream is(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    auto eq = line.find('=');
    auto dot = line.find('.');
    if (eq == std::string::npos || dot == std::string::npos || dot > eq)
      throw ParseError("<manifest>", line_no, "expected '<subset>.<field> = <count>'");
    std::string subset = line.substr(0, dot);
    std::string field = line.substr(dot + 1, eq - dot - 1);
    while (!field.empty() && field.back() == ' ') field.pop_back();
    long value = std::stol(line.substr(eq + 1));
    if (field == "identities")
      m.subsets[subset].identities = value;
    else if (field == "images")
      m.subsets[subset].images = value;
    else
      throw ParseError("<manifest>", line_no, "unknown field '" + field + "'");
  }
  return m;
}

inline std::set<std::uint32_t> original_identity_set(const LabeledSet& set) {
  std::set<std::uint32_t> ids;
  if (!set.original_identity.empty()) {
    for (auto id : set.identity) ids.insert(set.original_identity[id]);
  } else {
    ids.insert(set.identity.begin(), set.identity.end());
  }
  return ids;
}

/// Checks declared counts against recomputed ones and asserts train/test
/// identity disjointness. Throws ManifestMismatch on the first discrepancy.
inline void validate_manifest(const SplitManifest& manifest,
                              const std::map<std::string, LabeledSet>& sets) {
  for (const auto& [name, declared] : manifest.subsets) {
    auto it = sets.find(name);
    if (it == sets.end())
      throw ManifestMismatch(name + " (missing set)", declared.images, 0);
    long images = static_cast<long>(it->second.size());
    long identities = static_cast<long>(original_identity_set(it->second).size());
    if (images != declared.images)
      throw ManifestMismatch(name + ".images", declared.images, images);
    if (identities != declared.identities)
      throw ManifestMismatch(name + ".identities", declared.identities, identities);
  }
  // train identities must not leak into any test subset
  auto train_it = sets.find("train");
  if (train_it != sets.end()) {
    auto train_ids = original_identity_set(train_it->second);
    for (const auto& [name, set] : sets) {
      if (name.rfind("test", 0) != 0) continue;
      for (auto id : original_identity_set(set))
        if (train_ids.count(id))
          throw ManifestMismatch(name + " (identity overlap with train)",
                                 static_cast<long>(id), static_cast<long>(id));
    }
  }
}

}  // namespace histmap
