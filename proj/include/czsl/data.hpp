#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "czsl/numerics/tensor.hpp"

namespace czsl {

using Pair = std::pair<std::size_t, std::size_t>;  // (state index, object index)

enum class World { Closed, Open };

inline std::string to_string(World w) { return w == World::Closed ? "closed" : "open"; }
inline World parse_world(const std::string& s) {
  if (s == "closed") return World::Closed;
  if (s == "open") return World::Open;
  throw ConfigError("unknown world '" + s + "' (expected closed or open)");
}

struct Sample {
  std::size_t state = 0;
  std::size_t object = 0;
  std::string image_path;       // relative to the manifest directory; may be empty
  std::optional<Tensor> image;  // H x W x C once loaded or generated

  Pair pair() const { return {state, object}; }
};

inline const std::array<std::string, 3>& split_names() {
  static const std::array<std::string, 3> names{"train", "val", "test"};
  return names;
}

struct SplitManifest {
  std::vector<std::string> states;
  std::vector<std::string> objects;
  std::vector<Pair> seen_pairs;
  std::vector<Pair> unseen_pairs;
  std::map<std::string, std::vector<Sample>> splits;
  World world = World::Closed;

  const std::vector<Sample>& split(const std::string& name) const {
    static const std::vector<Sample> empty;
    auto it = splits.find(name);
    return it == splits.end() ? empty : it->second;
  }

  bool is_seen(const Pair& p) const {
    return std::find(seen_pairs.begin(), seen_pairs.end(), p) != seen_pairs.end();
  }

  /// Throws ValidationError on the first broken invariant.
  void validate() const {
    if (states.empty() || objects.empty()) throw ValidationError("manifest needs at least one state and one object");
    auto check_pair = [&](const Pair& p, const char* where) {
      if (p.first >= states.size() || p.second >= objects.size())
        throw ValidationError(std::string(where) + " pair (" + std::to_string(p.first) + ", " +
                              std::to_string(p.second) + ") out of range");
    };
    std::set<Pair> seen;
    for (const Pair& p : seen_pairs) {
      check_pair(p, "seen");
      if (!seen.insert(p).second) throw ValidationError("duplicate seen pair " + describe(p));
    }
    std::set<Pair> unseen;
    for (const Pair& p : unseen_pairs) {
      check_pair(p, "unseen");
      if (seen.count(p)) throw ValidationError("pair " + describe(p) + " is both seen and unseen");
      if (!unseen.insert(p).second) throw ValidationError("duplicate unseen pair " + describe(p));
    }
    std::vector<bool> state_seen(states.size(), false), object_seen(objects.size(), false);
    for (const Pair& p : seen_pairs) state_seen[p.first] = object_seen[p.second] = true;
    for (std::size_t i = 0; i < states.size(); ++i)
      if (!state_seen[i]) throw ValidationError("state '" + states[i] + "' appears in no seen pair");
    for (std::size_t j = 0; j < objects.size(); ++j)
      if (!object_seen[j]) throw ValidationError("object '" + objects[j] + "' appears in no seen pair");
    for (const auto& [name, samples] : splits) {
      for (const Sample& s : samples) {
        check_pair(s.pair(), name.c_str());
        if (name == "train" && !seen.count(s.pair()))
          throw ValidationError("train sample with non-seen pair " + describe(s.pair()));
        if (world == World::Closed && !seen.count(s.pair()) && !unseen.count(s.pair()))
          throw ValidationError(name + " sample pair " + describe(s.pair()) + " outside the closed label space");
      }
    }
  }

  std::string describe(const Pair& p) const {
    const std::string s = p.first < states.size() ? states[p.first] : std::to_string(p.first);
    const std::string o = p.second < objects.size() ? objects[p.second] : std::to_string(p.second);
    return "(" + s + ", " + o + ")";
  }
};

/// Ordered label space with its (state, object) index map.
struct TargetSpace {
  std::vector<Pair> pairs;
  std::vector<bool> seen;  // per composition
  std::map<Pair, std::size_t> index;

  std::size_t size() const { return pairs.size(); }

  std::size_t index_of(const Pair& p) const {
    auto it = index.find(p);
    if (it == index.end())
      throw IndexError("pair (" + std::to_string(p.first) + ", " + std::to_string(p.second) + ") not in label space");
    return it->second;
  }
  bool contains(const Pair& p) const { return index.count(p) != 0; }
};

inline TargetSpace make_target_space(std::vector<Pair> pairs, const std::set<Pair>& seen) {
  std::sort(pairs.begin(), pairs.end());
  pairs.erase(std::unique(pairs.begin(), pairs.end()), pairs.end());
  TargetSpace t;
  t.pairs = std::move(pairs);
  for (std::size_t k = 0; k < t.pairs.size(); ++k) {
    t.index[t.pairs[k]] = k;
    t.seen.push_back(seen.count(t.pairs[k]) != 0);
  }
  return t;
}

/// Closed: seen and unseen pairs. Open: every state x object pair. Sorted by
/// state index, then object index.
inline TargetSpace target_space(const SplitManifest& m, World world) {
  std::set<Pair> seen(m.seen_pairs.begin(), m.seen_pairs.end());
  std::vector<Pair> pairs;
  if (world == World::Closed) {
    pairs = m.seen_pairs;
    pairs.insert(pairs.end(), m.unseen_pairs.begin(), m.unseen_pairs.end());
  } else {
    pairs.reserve(m.states.size() * m.objects.size());
    for (std::size_t i = 0; i < m.states.size(); ++i)
      for (std::size_t j = 0; j < m.objects.size(); ++j) pairs.emplace_back(i, j);
  }
  return make_target_space(std::move(pairs), seen);
}

inline TargetSpace target_space(const SplitManifest& m) { return target_space(m, m.world); }

/// Only the seen pairs; the label space of the training loss.
inline TargetSpace seen_space(const SplitManifest& m) {
  return make_target_space(m.seen_pairs, std::set<Pair>(m.seen_pairs.begin(), m.seen_pairs.end()));
}

struct ManifestStats {
  std::size_t states = 0, objects = 0;
  std::map<std::string, std::size_t> samples;
  std::map<std::string, std::size_t> seen_pairs;    // distinct seen pairs per split
  std::map<std::string, std::size_t> unseen_pairs;  // distinct unseen pairs per split
};

inline ManifestStats manifest_stats(const SplitManifest& m) {
  ManifestStats st;
  st.states = m.states.size();
  st.objects = m.objects.size();
  std::set<Pair> seen(m.seen_pairs.begin(), m.seen_pairs.end());
  for (const auto& name : split_names()) {
    std::set<Pair> s, u;
    for (const Sample& x : m.split(name)) (seen.count(x.pair()) ? s : u).insert(x.pair());
    st.samples[name] = m.split(name).size();
    st.seen_pairs[name] = s.size();
    st.unseen_pairs[name] = u.size();
  }
  return st;
}

// ---------------------------------------------------------------------------
// Synthetic dataset

struct SyntheticConfig {
  std::size_t num_states = 6;
  std::size_t num_objects = 6;
  std::size_t train_per_pair = 50;
  std::size_t val_per_pair = 10;
  std::size_t test_per_pair = 10;
  std::size_t height = 16;
  std::size_t width = 16;
  std::size_t channels = 3;
  double noise_std = 0.05;
  double unseen_fraction = 1.0 / 6.0;
  std::uint64_t seed = 1;

  static SyntheticConfig preset(const std::string& name) {
    if (name == "synth-6x6") return {};
    if (name == "synth-4x4") {
      SyntheticConfig c;
      c.num_states = c.num_objects = 4;
      c.unseen_fraction = 0.25;
      c.train_per_pair = 20;
      c.val_per_pair = c.test_per_pair = 5;
      return c;
    }
    throw ConfigError("unknown dataset preset '" + name + "'");
  }

  std::size_t unseen_count() const {
    return static_cast<std::size_t>(std::llround(unseen_fraction * static_cast<double>(num_states * num_objects)));
  }
};

inline void to_json(nlohmann::json& j, const SyntheticConfig& c) {
  j = {{"num_states", c.num_states},         {"num_objects", c.num_objects},   {"train_per_pair", c.train_per_pair},
       {"val_per_pair", c.val_per_pair},     {"test_per_pair", c.test_per_pair}, {"height", c.height},
       {"width", c.width},                   {"channels", c.channels},         {"noise_std", c.noise_std},
       {"unseen_fraction", c.unseen_fraction}, {"seed", c.seed}};
}

inline void from_json(const nlohmann::json& j, SyntheticConfig& c) {
  for (auto it = j.begin(); it != j.end(); ++it) {
    const std::string& k = it.key();
    if (k == "num_states") c.num_states = it->get<std::size_t>();
    else if (k == "num_objects") c.num_objects = it->get<std::size_t>();
    else if (k == "train_per_pair") c.train_per_pair = it->get<std::size_t>();
    else if (k == "val_per_pair") c.val_per_pair = it->get<std::size_t>();
    else if (k == "test_per_pair") c.test_per_pair = it->get<std::size_t>();
    else if (k == "height") c.height = it->get<std::size_t>();
    else if (k == "width") c.width = it->get<std::size_t>();
    else if (k == "channels") c.channels = it->get<std::size_t>();
    else if (k == "noise_std") c.noise_std = it->get<double>();
    else if (k == "unseen_fraction") c.unseen_fraction = it->get<double>();
    else if (k == "seed") c.seed = it->get<std::uint64_t>();
    else throw ConfigError("unknown synthetic config key '" + k + "'");
  }
}

namespace detail {

inline const std::vector<std::string>& color_names() {
  static const std::vector<std::string> names{"red", "green", "blue", "yellow", "cyan", "magenta",
                                              "orange", "purple", "white", "teal", "pink", "olive"};
  return names;
}
inline const std::vector<std::string>& shape_names() {
  static const std::vector<std::string> names{"square", "disk", "hstripes", "vstripes", "cross",
                                              "triangle", "ring", "diagonal", "frame", "checker"};
  return names;
}

inline std::string primitive_name(const std::vector<std::string>& table, std::size_t i, const char* fallback) {
  if (i < table.size()) return table[i];
  return std::string(fallback) + std::to_string(i);
}

// Shape family for an object: a mask value in {0, 1} at (y, x) in unit coordinates.
inline bool shape_mask(std::size_t object, double y, double x) {
  const double cy = y - 0.5, cx = x - 0.5;
  const double scale = 1.0 - 0.08 * static_cast<double>(object / shape_names().size());
  const double ay = std::abs(cy) / scale, ax = std::abs(cx) / scale;
  switch (object % shape_names().size()) {
    case 0: return ay < 0.3 && ax < 0.3;
    case 1: return ay * ay + ax * ax < 0.12;
    case 2: return static_cast<int>(std::floor(y * 8.0)) % 2 == 0 && ax < 0.42;
    case 3: return static_cast<int>(std::floor(x * 8.0)) % 2 == 0 && ay < 0.42;
    case 4: return (ay < 0.1 && ax < 0.42) || (ax < 0.1 && ay < 0.42);
    case 5: return cy > -0.35 && cy < 0.35 && ax < (cy + 0.35) * 0.6;
    case 6: return ay * ay + ax * ax < 0.16 && ay * ay + ax * ax > 0.05;
    case 7: return std::abs(cy - cx) < 0.12;
    case 8: return (ay < 0.42 && ax < 0.42) && !(ay < 0.28 && ax < 0.28);
    default: return (static_cast<int>(std::floor(y * 4.0)) + static_cast<int>(std::floor(x * 4.0))) % 2 == 0;
  }
}

// Color (and, past the first twelve states, a dotted texture) for a state.
inline std::array<double, 3> state_color(std::size_t state, std::size_t num_states) {
  static const std::vector<std::array<double, 3>> palette{
      {0.9, 0.1, 0.1}, {0.1, 0.8, 0.1}, {0.15, 0.25, 0.95}, {0.95, 0.9, 0.1}, {0.1, 0.9, 0.9}, {0.9, 0.1, 0.9},
      {1.0, 0.55, 0.0}, {0.5, 0.1, 0.6}, {0.95, 0.95, 0.95}, {0.0, 0.5, 0.5}, {1.0, 0.6, 0.75}, {0.5, 0.5, 0.0}};
  if (state < palette.size()) return palette[state];
  const double hue = static_cast<double>(state) / static_cast<double>(num_states);
  return {0.5 + 0.5 * std::cos(6.283185307179586 * hue), 0.5 + 0.5 * std::cos(6.283185307179586 * (hue - 1.0 / 3.0)),
          0.5 + 0.5 * std::cos(6.283185307179586 * (hue - 2.0 / 3.0))};
}

}  // namespace detail

/// Noise-free rendering of a (state, object) pair: the object picks the shape
/// mask, the state colors the pixels inside it.
inline Tensor render_pair(std::size_t state, std::size_t object, const SyntheticConfig& cfg) {
  Tensor img({cfg.height, cfg.width, cfg.channels}, 0.0);
  const auto color = detail::state_color(state, cfg.num_states);
  const bool dotted = state >= detail::color_names().size();
  for (std::size_t y = 0; y < cfg.height; ++y)
    for (std::size_t x = 0; x < cfg.width; ++x) {
      const double uy = (static_cast<double>(y) + 0.5) / static_cast<double>(cfg.height);
      const double ux = (static_cast<double>(x) + 0.5) / static_cast<double>(cfg.width);
      if (!detail::shape_mask(object, uy, ux)) continue;
      if (dotted && (x + y) % 2 == 1) continue;
      for (std::size_t c = 0; c < cfg.channels; ++c) img.values[(y * cfg.width + x) * cfg.channels + c] = color[c % 3];
    }
  return img;
}

/// Chooses the unseen pairs so every primitive keeps at least one seen pair.
/// Throws ConfigError naming the primitive that would be orphaned.
inline std::vector<Pair> choose_unseen_pairs(const SyntheticConfig& cfg, const std::vector<std::string>& states,
                                             const std::vector<std::string>& objects) {
  const std::size_t want = cfg.unseen_count();
  std::vector<Pair> all;
  for (std::size_t i = 0; i < cfg.num_states; ++i)
    for (std::size_t j = 0; j < cfg.num_objects; ++j) all.emplace_back(i, j);
  Rng rng = make_rng(cfg.seed, "data.unseen");
  std::shuffle(all.begin(), all.end(), rng);
  std::vector<std::size_t> state_left(cfg.num_states, cfg.num_objects), object_left(cfg.num_objects, cfg.num_states);
  std::vector<Pair> unseen;
  std::string orphan;
  for (const Pair& p : all) {
    if (unseen.size() == want) break;
    if (state_left[p.first] == 1) {
      if (orphan.empty()) orphan = "state '" + states[p.first] + "'";
      continue;
    }
    if (object_left[p.second] == 1) {
      if (orphan.empty()) orphan = "object '" + objects[p.second] + "'";
      continue;
    }
    --state_left[p.first];
    --object_left[p.second];
    unseen.push_back(p);
  }
  if (unseen.size() < want)
    throw ConfigError("unseen_fraction " + std::to_string(cfg.unseen_fraction) + " would leave " + orphan +
                      " without any seen pair");
  std::sort(unseen.begin(), unseen.end());
  return unseen;
}

/// Deterministic synthetic dataset; images are attached to every sample.
inline SplitManifest generate_synthetic(const SyntheticConfig& cfg) {
  if (cfg.num_states == 0 || cfg.num_objects == 0) throw ConfigError("need at least one state and one object");
  if (cfg.height == 0 || cfg.width == 0 || cfg.channels == 0) throw ConfigError("image dimensions must be positive");
  if (cfg.noise_std < 0.0) throw ConfigError("noise_std must be non-negative");
  if (cfg.unseen_fraction < 0.0 || cfg.unseen_fraction > 1.0) throw ConfigError("unseen_fraction must lie in [0, 1]");
  SplitManifest m;
  for (std::size_t i = 0; i < cfg.num_states; ++i) m.states.push_back(detail::primitive_name(detail::color_names(), i, "state"));
  for (std::size_t j = 0; j < cfg.num_objects; ++j) m.objects.push_back(detail::primitive_name(detail::shape_names(), j, "object"));
  m.unseen_pairs = choose_unseen_pairs(cfg, m.states, m.objects);
  const std::set<Pair> unseen(m.unseen_pairs.begin(), m.unseen_pairs.end());
  for (std::size_t i = 0; i < cfg.num_states; ++i)
    for (std::size_t j = 0; j < cfg.num_objects; ++j)
      if (!unseen.count({i, j})) m.seen_pairs.emplace_back(i, j);

  std::normal_distribution<double> noise(0.0, cfg.noise_std > 0.0 ? cfg.noise_std : 1.0);
  const std::array<std::size_t, 3> per_pair{cfg.train_per_pair, cfg.val_per_pair, cfg.test_per_pair};
  for (std::size_t s = 0; s < 3; ++s) {
    const std::string& name = split_names()[s];
    Rng rng = make_rng(cfg.seed, "data.noise." + name);
    auto& samples = m.splits[name];
    for (std::size_t i = 0; i < cfg.num_states; ++i)
      for (std::size_t j = 0; j < cfg.num_objects; ++j) {
        if (name == "train" && unseen.count({i, j})) continue;
        const Tensor clean = render_pair(i, j, cfg);
        for (std::size_t n = 0; n < per_pair[s]; ++n) {
          Sample x;
          x.state = i;
          x.object = j;
          Tensor img = clean;
          if (cfg.noise_std > 0.0)
            for (double& v : img.values) v += noise(rng);
          x.image = std::move(img);
          samples.push_back(std::move(x));
        }
      }
  }
  m.validate();
  return m;
}

// ---------------------------------------------------------------------------
// Serialization

namespace detail {

inline std::string base64_encode(const std::vector<unsigned char>& bytes) {
  static const char* alphabet = "ABCDEFGHIJKLMNOPQRSTUVWXYZabcdefghijklmnopqrstuvwxyz0123456789+/";
  std::string out;
  out.reserve((bytes.size() + 2) / 3 * 4);
  for (std::size_t i = 0; i < bytes.size(); i += 3) {
    std::uint32_t n = static_cast<std::uint32_t>(bytes[i]) << 16;
    if (i + 1 < bytes.size()) n |= static_cast<std::uint32_t>(bytes[i + 1]) << 8;
    if (i + 2 < bytes.size()) n |= bytes[i + 2];
    out += alphabet[(n >> 18) & 63];
    out += alphabet[(n >> 12) & 63];
    out += i + 1 < bytes.size() ? alphabet[(n >> 6) & 63] : '=';
    out += i + 2 < bytes.size() ? alphabet[n & 63] : '=';
  }
  return out;
}

inline std::vector<unsigned char> base64_decode(const std::string& text) {
  auto value = [](char c) -> int {
    if (c >= 'A' && c <= 'Z') return c - 'A';
    if (c >= 'a' && c <= 'z') return c - 'a' + 26;
    if (c >= '0' && c <= '9') return c - '0' + 52;
    if (c == '+') return 62;
    if (c == '/') return 63;
    return -1;
  };
  std::vector<unsigned char> out;
  std::uint32_t acc = 0;
  int bits = 0;
  for (char c : text) {
    if (c == '=') break;
    const int v = value(c);
    if (v < 0) throw ValidationError("invalid base64 character in inline image");
    acc = (acc << 6) | static_cast<std::uint32_t>(v);
    bits += 6;
    if (bits >= 8) {
      bits -= 8;
      out.push_back(static_cast<unsigned char>((acc >> bits) & 0xFF));
    }
  }
  return out;
}

inline std::vector<unsigned char> doubles_to_le_bytes(const std::vector<double>& values) {
  std::vector<unsigned char> bytes(values.size() * 8);
  for (std::size_t i = 0; i < values.size(); ++i) {
    const auto bits = std::bit_cast<std::uint64_t>(values[i]);
    for (int b = 0; b < 8; ++b) bytes[i * 8 + b] = static_cast<unsigned char>(bits >> (8 * b));
  }
  return bytes;
}

inline std::vector<double> le_bytes_to_doubles(const unsigned char* data, std::size_t count) {
  std::vector<double> values(count);
  for (std::size_t i = 0; i < count; ++i) {
    std::uint64_t bits = 0;
    for (int b = 0; b < 8; ++b) bits |= static_cast<std::uint64_t>(data[i * 8 + b]) << (8 * b);
    values[i] = std::bit_cast<double>(bits);
  }
  return values;
}

inline nlohmann::json pairs_to_json(const std::vector<Pair>& pairs) {
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& [i, j] : pairs) arr.push_back({i, j});
  return arr;
}

inline std::vector<Pair> pairs_from_json(const nlohmann::json& arr, const char* key) {
  if (!arr.is_array()) throw ValidationError(std::string("'") + key + "' must be an array of [state, object] pairs");
  std::vector<Pair> out;
  for (const auto& p : arr) {
    if (!p.is_array() || p.size() != 2) throw ValidationError(std::string("malformed pair in '") + key + "'");
    out.emplace_back(p[0].get<std::size_t>(), p[1].get<std::size_t>());
  }
  return out;
}

}  // namespace detail

/// How sample images are written by save_manifest.
enum class ImageStorage { Files, Inline, None };

/// Writes `manifest.json` (and `images/<split>/<n>.f64` for file storage) under `dir`.
///
/// JSON keys: `states`, `objects` (name lists), `seen_pairs`, `unseen_pairs`
/// ([state, object] index pairs), `world`, `image_shape` ([H, W, C] when
/// images exist) and `splits` (split name -> list of samples with `state`,
/// `object` and either `image` (relative path to raw little-endian float64
/// row-major data) or `image_b64` (the same bytes, base64)).
inline void save_manifest(const SplitManifest& m, const std::filesystem::path& dir,
                          ImageStorage storage = ImageStorage::Files) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  nlohmann::json j;
  j["states"] = m.states;
  j["objects"] = m.objects;
  j["seen_pairs"] = detail::pairs_to_json(m.seen_pairs);
  j["unseen_pairs"] = detail::pairs_to_json(m.unseen_pairs);
  j["world"] = to_string(m.world);
  nlohmann::json splits = nlohmann::json::object();
  for (const auto& [name, samples] : m.splits) {
    nlohmann::json arr = nlohmann::json::array();
    for (std::size_t n = 0; n < samples.size(); ++n) {
      const Sample& s = samples[n];
      nlohmann::json e = {{"state", s.state}, {"object", s.object}};
      if (s.image && storage != ImageStorage::None) {
        j["image_shape"] = s.image->shape;
        const auto bytes = detail::doubles_to_le_bytes(s.image->values);
        if (storage == ImageStorage::Inline) {
          e["image_b64"] = detail::base64_encode(bytes);
        } else {
          const std::string rel = "images/" + name + "/" + std::to_string(n) + ".f64";
          fs::create_directories(dir / "images" / name);
          std::ofstream f(dir / rel, std::ios::binary);
          f.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
          if (!f) throw DataError("cannot write " + (dir / rel).string());
          e["image"] = rel;
        }
      } else if (!s.image_path.empty()) {
        e["image"] = s.image_path;
      }
      arr.push_back(std::move(e));
    }
    splits[name] = std::move(arr);
  }
  j["splits"] = std::move(splits);
  std::ofstream out(dir / "manifest.json");
  out << j.dump(1) << "\n";
  if (!out) throw DataError("cannot write " + (dir / "manifest.json").string());
}

/// Reads and validates a manifest. `path` may name the JSON file or its directory.
inline SplitManifest load_manifest(const std::filesystem::path& path, bool load_images = true) {
  namespace fs = std::filesystem;
  const fs::path file = fs::is_directory(path) ? path / "manifest.json" : path;
  std::ifstream in(file);
  if (!in) throw DataError("cannot open manifest " + file.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed manifest JSON: ") + e.what());
  }
  SplitManifest m;
  try {
    m.states = j.at("states").get<std::vector<std::string>>();
    m.objects = j.at("objects").get<std::vector<std::string>>();
    m.seen_pairs = detail::pairs_from_json(j.at("seen_pairs"), "seen_pairs");
    m.unseen_pairs = detail::pairs_from_json(j.value("unseen_pairs", nlohmann::json::array()), "unseen_pairs");
    m.world = parse_world(j.value("world", std::string("closed")));
    std::vector<std::size_t> shape;
    if (j.contains("image_shape")) shape = j["image_shape"].get<std::vector<std::size_t>>();
    for (auto it = j.at("splits").begin(); it != j.at("splits").end(); ++it) {
      auto& samples = m.splits[it.key()];
      for (const auto& e : *it) {
        Sample s;
        s.state = e.at("state").get<std::size_t>();
        s.object = e.at("object").get<std::size_t>();
        if (e.contains("image")) s.image_path = e["image"].get<std::string>();
        if (load_images && (e.contains("image") || e.contains("image_b64"))) {
          if (shape.empty()) throw ValidationError("samples carry images but 'image_shape' is missing");
          const std::size_t count = Tensor::count(shape);
          std::vector<unsigned char> bytes;
          if (e.contains("image_b64")) {
            bytes = detail::base64_decode(e["image_b64"].get<std::string>());
          } else {
            std::ifstream f(file.parent_path() / s.image_path, std::ios::binary);
            if (!f) throw DataError("cannot open image " + (file.parent_path() / s.image_path).string());
            bytes.assign(std::istreambuf_iterator<char>(f), {});
          }
          if (bytes.size() != count * 8) throw ValidationError("image data size does not match image_shape");
          s.image = Tensor(shape, detail::le_bytes_to_doubles(bytes.data(), count));
        }
        samples.push_back(std::move(s));
      }
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("manifest field error: ") + e.what());
  }
  m.validate();
  return m;
}

// ---------------------------------------------------------------------------
// Primitive embeddings for feasibility scoring

struct PrimitiveEmbeddingTable {
  std::map<std::string, std::vector<double>> vectors;

  const std::vector<double>& at(const std::string& name) const {
    auto it = vectors.find(name);
    if (it == vectors.end()) throw LookupError("no embedding for primitive '" + name + "'");
    return it->second;
  }
};

/// Random unit vectors of width `dim`, one per state and object name.
inline PrimitiveEmbeddingTable random_embedding_table(const SplitManifest& m, std::size_t dim, std::uint64_t seed) {
  PrimitiveEmbeddingTable t;
  auto add = [&](const std::string& name) {
    Rng rng = make_rng(seed, "embedding." + name);
    Tensor v = normal_tensor({dim}, 1.0, rng);
    double norm = 0.0;
    for (double x : v.values) norm += x * x;
    norm = std::sqrt(norm);
    for (double& x : v.values) x /= norm;
    t.vectors[name] = v.values;
  };
  for (const auto& s : m.states) add(s);
  for (const auto& o : m.objects) add(o);
  return t;
}

inline void save_embedding_table(const PrimitiveEmbeddingTable& t, const std::filesystem::path& file) {
  nlohmann::json j = t.vectors;
  std::ofstream out(file);
  out << j.dump(1) << "\n";
  if (!out) throw DataError("cannot write " + file.string());
}

inline PrimitiveEmbeddingTable load_embedding_table(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw DataError("cannot open embedding table " + file.string());
  PrimitiveEmbeddingTable t;
  try {
    nlohmann::json j;
    in >> j;
    t.vectors = j.get<std::map<std::string, std::vector<double>>>();
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed embedding table: ") + e.what());
  }
  for (const auto& [name, v] : t.vectors)
    for (double x : v)
      if (!std::isfinite(x)) throw ValidationError("non-finite embedding for '" + name + "'");
  return t;
}

}  // namespace czsl
