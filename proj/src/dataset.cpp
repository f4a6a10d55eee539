#include "dfcr/dataset.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <functional>
#include <numbers>
#include <numeric>

#include "dfcr/linalg.hpp"

namespace dfcr {

namespace fs = std::filesystem;

static_assert(std::endian::native == std::endian::little, "MBT encoding assumes a little-endian host");

namespace {

constexpr char kMbtMagic[4] = {'M', 'B', 'T', '1'};
constexpr std::uint8_t kDtypeFloat32 = 1;

void put_u32(std::vector<std::uint8_t>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<std::uint8_t>(v >> (8 * i)));
}

std::uint32_t get_u32(const std::uint8_t* p) {
  return std::uint32_t{p[0]} | std::uint32_t{p[1]} << 8 | std::uint32_t{p[2]} << 16 | std::uint32_t{p[3]} << 24;
}

std::vector<std::uint8_t> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path);
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

}  // namespace

std::size_t mbt_payload_bytes(std::uint32_t height, std::uint32_t width, std::uint32_t bands) {
  return std::size_t{height} * width * bands * sizeof(float);
}

std::vector<std::uint8_t> write_mbt(const MbtTile& tile) {
  const std::size_t payload = mbt_payload_bytes(tile.height, tile.width, tile.bands);
  if (tile.data.size() * sizeof(float) != payload) {
    throw ShapeError("tile holds " + std::to_string(tile.data.size()) + " values, header implies " +
                     std::to_string(payload / sizeof(float)));
  }
  std::vector<std::uint8_t> out;
  out.reserve(kMbtHeaderBytes + payload);
  out.insert(out.end(), kMbtMagic, kMbtMagic + 4);
  put_u32(out, tile.height);
  put_u32(out, tile.width);
  put_u32(out, tile.bands);
  out.push_back(kDtypeFloat32);
  const std::size_t at = out.size();
  out.resize(at + payload);
  std::memcpy(out.data() + at, tile.data.data(), payload);
  return out;
}

MbtTile read_mbt(std::span<const std::uint8_t> bytes) {
  if (bytes.size() < 4 || std::memcmp(bytes.data(), kMbtMagic, 4) != 0) throw FormatError("not an MBT1 tile (bad magic)");
  if (bytes.size() < kMbtHeaderBytes) throw TruncationError("MBT header truncated");
  MbtTile t;
  t.height = get_u32(bytes.data() + 4);
  t.width = get_u32(bytes.data() + 8);
  t.bands = get_u32(bytes.data() + 12);
  if (bytes[16] != kDtypeFloat32) throw FormatError("unsupported MBT dtype code " + std::to_string(bytes[16]));
  const std::size_t payload = mbt_payload_bytes(t.height, t.width, t.bands);
  if (bytes.size() - kMbtHeaderBytes != payload) {
    throw TruncationError("MBT payload is " + std::to_string(bytes.size() - kMbtHeaderBytes) + " bytes, header implies " +
                          std::to_string(payload));
  }
  t.data.resize(payload / sizeof(float));
  std::memcpy(t.data.data(), bytes.data() + kMbtHeaderBytes, payload);
  return t;
}

void save_mbt(const std::string& path, const MbtTile& tile) {
  const auto bytes = write_mbt(tile);
  std::ofstream out(path, std::ios::binary);
  if (!out) throw InputError("cannot write " + path);
  out.write(reinterpret_cast<const char*>(bytes.data()), static_cast<std::streamsize>(bytes.size()));
}

MbtTile load_mbt(const std::string& path) {
  const auto bytes = read_file(path);
  return read_mbt(bytes);
}

std::vector<TileWindow> tile_image(const MbtTile& image, std::size_t window) {
  if (window == 0) throw InputError("tiling window must be positive");
  std::vector<TileWindow> tiles;
  const auto w32 = static_cast<std::uint32_t>(window);
  for (std::size_t r = 0; r + window <= image.height; r += window) {
    for (std::size_t c = 0; c + window <= image.width; c += window) {
      TileWindow tw{r, c, MbtTile(w32, w32, image.bands)};
      for (std::size_t b = 0; b < image.bands; ++b) {
        for (std::size_t y = 0; y < window; ++y) {
          const float* src = &image.data[(b * image.height + r + y) * image.width + c];
          std::copy(src, src + window, &tw.tile.at(b, y, 0));
        }
      }
      tiles.push_back(std::move(tw));
    }
  }
  return tiles;
}

std::string to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
    case Split::Unassigned: return "none";
  }
  return "none";
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  if (s == "test") return Split::Test;
  if (s == "none") return Split::Unassigned;
  throw ConfigError("unknown split '" + s + "' (expected train, val or test)");
}

std::size_t DatasetManifest::count(Split s) const {
  return static_cast<std::size_t>(std::count_if(entries.begin(), entries.end(), [s](const auto& e) { return e.split == s; }));
}

std::vector<std::size_t> DatasetManifest::class_counts() const {
  std::vector<std::size_t> c(class_names.size(), 0);
  for (const auto& e : entries) {
    if (e.label >= c.size()) c.resize(e.label + 1, 0);
    ++c[e.label];
  }
  return c;
}

nlohmann::json manifest_to_json(const DatasetManifest& m) {
  nlohmann::json entries = nlohmann::json::array();
  for (const auto& e : m.entries) entries.push_back({{"path", e.path}, {"label", e.label}, {"split", to_string(e.split)}});
  return {{"format", "dfcr-manifest-1"},
          {"class_names", m.class_names},
          {"seed", m.seed},
          {"generator", m.generator},
          {"fractions", m.fractions},
          {"entries", entries}};
}

DatasetManifest manifest_from_json(const nlohmann::json& j) {
  DatasetManifest m;
  m.class_names = j.at("class_names").get<std::vector<std::string>>();
  m.seed = j.value("seed", std::uint64_t{0});
  m.generator = j.value("generator", nlohmann::json::object());
  if (j.contains("fractions")) m.fractions = j.at("fractions").get<std::array<double, 3>>();
  for (const auto& e : j.at("entries")) {
    ManifestEntry me{e.at("path").get<std::string>(), e.at("label").get<std::size_t>(),
                     parse_split(e.value("split", "none"))};
    if (me.label >= m.class_names.size()) {
      throw InputError("manifest entry " + me.path + " has label " + std::to_string(me.label) + " but only " +
                       std::to_string(m.class_names.size()) + " classes");
    }
    m.entries.push_back(std::move(me));
  }
  return m;
}

void save_manifest(const std::string& path, const DatasetManifest& m) {
  std::ofstream out(path);
  if (!out) throw InputError("cannot write " + path);
  out << manifest_to_json(m).dump(1) << '\n';
}

DatasetManifest load_manifest(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw InputError("cannot open manifest " + path);
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw InputError("manifest " + path + " is not valid JSON: " + e.what());
  }
  auto m = manifest_from_json(j);
  m.root = fs::path(path).parent_path().string();
  for (const auto& e : m.entries) {
    if (!fs::exists(fs::path(m.root) / e.path)) throw InputError("manifest references missing tile " + e.path);
  }
  return m;
}

DatasetManifest split_dataset(DatasetManifest m, std::array<double, 3> fractions, std::uint64_t seed, bool stratified,
                              std::vector<std::string>* warnings) {
  for (double f : fractions) {
    if (!(f >= 0.0)) throw ConfigError("split fractions must be non-negative");
  }
  if (std::abs(fractions[0] + fractions[1] + fractions[2] - 1.0) > 1e-9) {
    throw ConfigError("split fractions must sum to 1");
  }
  m.fractions = fractions;
  auto take = [](std::size_t n, double f) { return static_cast<std::size_t>(std::floor(n * f + 1e-9)); };

  // Groups of entry indices, split independently.
  std::vector<std::vector<std::size_t>> groups;
  if (stratified) {
    std::size_t k = m.class_names.size();
    for (const auto& e : m.entries) k = std::max(k, e.label + 1);
    groups.resize(k);
    for (std::size_t i = 0; i < m.entries.size(); ++i) groups[m.entries[i].label].push_back(i);
  } else {
    groups.emplace_back(m.entries.size());
    std::iota(groups[0].begin(), groups[0].end(), 0);
  }

  const std::size_t n = m.entries.size();
  const std::size_t g_count = groups.size();
  // Global split sizes: val and test round down, train takes the rest.
  const std::array<std::size_t, 3> target{n - take(n, fractions[1]) - take(n, fractions[2]), take(n, fractions[1]),
                                          take(n, fractions[2])};
  // Per-group counts start at floor(n_g * f_s); the leftover units are then
  // placed so that group and split totals both come out exact, each cell
  // rising by at most one (a small bipartite flow).
  std::vector<std::array<std::size_t, 3>> alloc(g_count);
  std::vector<std::array<double, 3>> frac(g_count);
  std::vector<std::size_t> row_left(g_count);
  std::array<std::size_t, 3> col_left = target;
  for (std::size_t g = 0; g < g_count; ++g) {
    std::size_t used = 0;
    for (std::size_t s = 0; s < 3; ++s) {
      const double ideal = groups[g].size() * fractions[s];
      alloc[g][s] = take(groups[g].size(), fractions[s]);
      frac[g][s] = ideal - static_cast<double>(alloc[g][s]);
      used += alloc[g][s];
      col_left[s] -= alloc[g][s];
    }
    row_left[g] = groups[g].size() - used;
  }
  std::vector<std::array<bool, 3>> bumped(g_count, {false, false, false});
  for (bool any_cell : {false, true}) {
    auto usable = [&](std::size_t g, std::size_t s) { return !bumped[g][s] && (any_cell || frac[g][s] > 1e-9); };
    // Augmenting paths alternate group -> split (new bump) and split -> group
    // (undo an existing bump).
    std::function<bool(std::size_t, std::vector<bool>&)> augment = [&](std::size_t g, std::vector<bool>& seen) {
      std::array<std::size_t, 3> order{0, 1, 2};
      std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) { return frac[g][a] > frac[g][b]; });
      for (std::size_t s : order) {
        if (!usable(g, s)) continue;
        if (col_left[s] > 0) {
          bumped[g][s] = true;
          --col_left[s];
          return true;
        }
        for (std::size_t h = 0; h < g_count; ++h) {
          if (h == g || seen[h] || !bumped[h][s]) continue;
          seen[h] = true;
          // h gives up its bump in s and places the unit elsewhere.
          bumped[h][s] = false;
          if (augment(h, seen)) {
            bumped[g][s] = true;
            return true;
          }
          bumped[h][s] = true;
        }
      }
      return false;
    };
    for (std::size_t g = 0; g < g_count; ++g) {
      while (row_left[g] > 0) {
        std::vector<bool> seen(g_count, false);
        seen[g] = true;
        if (!augment(g, seen)) break;
        --row_left[g];
      }
    }
  }
  for (std::size_t g = 0; g < g_count; ++g) {
    for (std::size_t s = 0; s < 3; ++s) alloc[g][s] += bumped[g][s] ? 1 : 0;
    alloc[g][0] += row_left[g];  // only reachable if the flow could not place everything
  }

  const std::size_t nonempty = static_cast<std::size_t>(std::count_if(fractions.begin(), fractions.end(), [](double f) { return f > 0.0; }));
  Rng rng(seed);
  for (std::size_t g = 0; g < groups.size(); ++g) {
    auto& idx = groups[g];
    if (stratified && !idx.empty() && idx.size() < nonempty && warnings) {
      warnings->push_back("class " + std::to_string(g) + " has " + std::to_string(idx.size()) +
                          " items, fewer than the " + std::to_string(nonempty) + " requested splits");
    }
    std::shuffle(idx.begin(), idx.end(), rng.engine());
    for (std::size_t i = 0; i < idx.size(); ++i) {
      Split s = i < alloc[g][1] ? Split::Val : i < alloc[g][1] + alloc[g][2] ? Split::Test : Split::Train;
      m.entries[idx[i]].split = s;
    }
  }
  return m;
}

std::vector<std::size_t> GeneratorParams::scaled_counts(double scale) {
  std::vector<std::size_t> c;
  for (auto n : kTemplateCounts) c.push_back(std::max<std::size_t>(1, static_cast<std::size_t>(std::lround(n * scale))));
  return c;
}

nlohmann::json to_json(const GeneratorParams& p) {
  return {{"counts", p.counts}, {"size", p.size}, {"seed", p.seed}, {"noise", p.noise}};
}

GeneratorParams generator_from_json(const nlohmann::json& j) {
  GeneratorParams p;
  if (j.contains("counts")) {
    p.counts = j.at("counts").get<std::vector<std::size_t>>();
  } else if (j.contains("scale")) {
    p.counts = GeneratorParams::scaled_counts(j.at("scale").get<double>());
  }
  p.size = j.value("size", p.size);
  p.seed = j.value("seed", p.seed);
  p.noise = j.value("noise", p.noise);
  if (p.counts.empty()) throw ConfigError("generator needs at least one class");
  if (p.size == 0) throw ConfigError("generator tile size must be positive");
  return p;
}

namespace {

// Sum of a few random plane waves, roughly zero-mean with unit amplitude.
struct WaveField {
  struct Wave { double ky, kx, phase, amp; };
  std::vector<Wave> waves;

  WaveField(Rng& rng, std::size_t count, double max_freq) {
    for (std::size_t i = 0; i < count; ++i) {
      waves.push_back({rng.uniform(-max_freq, max_freq), rng.uniform(-max_freq, max_freq),
                       rng.uniform(0.0, 2.0 * std::numbers::pi), rng.uniform(0.5, 1.0) / std::sqrt(double(count))});
    }
  }
  double operator()(double y, double x) const {
    double v = 0.0;
    for (const auto& w : waves) v += w.amp * std::cos(2.0 * std::numbers::pi * (w.ky * y + w.kx * x) + w.phase);
    return v;
  }
};

std::uint64_t mix_seed(std::uint64_t seed, std::size_t label, std::size_t index) {
  std::uint64_t h = seed * 0x9E3779B97F4A7C15ULL + label * 0xBF58476D1CE4E5B9ULL + index * 0x94D049BB133111EBULL;
  h ^= h >> 31;
  h *= 0xD6E8FEB86659FD39ULL;
  return h ^ (h >> 28);
}

}  // namespace

MbtTile synthetic_tile(std::size_t label, std::size_t index, std::size_t size, std::uint64_t seed, double noise) {
  Rng rng(mix_seed(seed, label, index));
  const auto s = static_cast<std::uint32_t>(size);
  MbtTile t(s, s, 9);
  const double ds = static_cast<double>(size);

  // base spectra per class: r, g, b, nir, sar level, sar roughness, dem level, relief
  struct Signature { double r, g, b, nir, sar, sar_rough, dem, relief; };
  static constexpr Signature sig[4] = {
      {0.55, 0.50, 0.45, 0.22, 0.45, 0.25, 0.40, 0.06},
      {0.12, 0.28, 0.10, 0.65, 0.35, 0.08, 0.50, 0.12},
      {0.30, 0.42, 0.22, 0.45, 0.25, 0.05, 0.30, 0.03},
      {0.06, 0.12, 0.22, 0.04, 0.08, 0.02, 0.10, 0.004},
  };
  // Extra classes beyond the template reuse signatures with a spectral shift.
  Signature base = sig[label % 4];
  const double shift = 0.15 * static_cast<double>(label / 4);
  base.r += shift;
  base.nir -= shift;

  const double jitter = 0.06 * noise;
  const double pix = 0.04 * noise;
  const double r = base.r + jitter * rng.normal(), g = base.g + jitter * rng.normal(), b = base.b + jitter * rng.normal();
  const double nir = base.nir + jitter * rng.normal();
  const double sar = base.sar + jitter * rng.normal();
  const double dem0 = base.dem + 2.0 * jitter * rng.normal();

  WaveField texture(rng, 4, 4.0 / ds * 2.0);
  WaveField terrain(rng, 3, 1.5 / ds);

  // crop stripes
  const double period = rng.uniform(4.0, 8.0);
  const double theta = rng.uniform(0.0, std::numbers::pi);
  const double stripe_ky = std::sin(theta) / period, stripe_kx = std::cos(theta) / period;
  const double stripe_phase = rng.uniform(0.0, 2.0 * std::numbers::pi);

  // mine pits
  struct Pit { double y, x, radius, depth; };
  std::vector<Pit> pits;
  if (label % 4 == 0) {
    const std::size_t count = 2 + rng.index(3);
    for (std::size_t i = 0; i < count; ++i) {
      pits.push_back({rng.uniform(0.0, ds), rng.uniform(0.0, ds), rng.uniform(ds / 10.0, ds / 5.0), rng.uniform(0.2, 0.4)});
    }
  }

  std::vector<double> dem(std::size_t{s} * s);
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      const double fy = double(y), fx = double(x);
      double tex = texture(fy, fx);
      double stripe = 0.0;
      if (label % 4 == 2) stripe = std::sin(2.0 * std::numbers::pi * (stripe_ky * fy + stripe_kx * fx) + stripe_phase);
      const double mod = 0.05 * tex + 0.12 * stripe;
      t.at(0, y, x) = static_cast<float>(r + mod + pix * rng.normal());
      t.at(1, y, x) = static_cast<float>(g + mod + pix * rng.normal());
      t.at(2, y, x) = static_cast<float>(b + 0.5 * mod + pix * rng.normal());
      t.at(3, y, x) = static_cast<float>(nir + mod * (label % 4 == 1 ? 0.6 : 1.0) + pix * rng.normal());
      // multiplicative speckle around the level
      const double speckle = 1.0 + base.sar_rough / std::max(base.sar, 1e-3) * rng.normal();
      t.at(4, y, x) = static_cast<float>(std::max(0.0, sar * speckle) + 0.5 * pix * rng.normal());
      double h = dem0 + base.relief * terrain(fy, fx);
      for (const auto& p : pits) {
        const double d2 = ((fy - p.y) * (fy - p.y) + (fx - p.x) * (fx - p.x)) / (p.radius * p.radius);
        h -= p.depth * std::exp(-d2);
      }
      dem[y * size + x] = h + 0.002 * noise * rng.normal();
      t.at(5, y, x) = static_cast<float>(dem[y * size + x]);
    }
  }

  // slope, aspect, hillshade from central differences (one-sided at edges)
  constexpr double kRelief = 8.0;
  const double zenith = std::numbers::pi / 4.0, azimuth = 1.75 * std::numbers::pi;
  auto at = [&](std::size_t y, std::size_t x) { return dem[y * size + x]; };
  for (std::size_t y = 0; y < size; ++y) {
    for (std::size_t x = 0; x < size; ++x) {
      const std::size_t x0 = x > 0 ? x - 1 : x, x1 = x + 1 < size ? x + 1 : x;
      const std::size_t y0 = y > 0 ? y - 1 : y, y1 = y + 1 < size ? y + 1 : y;
      const double gx = kRelief * (at(y, x1) - at(y, x0)) / std::max<double>(1.0, double(x1 - x0));
      const double gy = kRelief * (at(y1, x) - at(y0, x)) / std::max<double>(1.0, double(y1 - y0));
      const double slope = std::atan(std::sqrt(gx * gx + gy * gy));
      const double aspect = std::atan2(gy, -gx);
      const double shade = std::cos(zenith) * std::cos(slope) + std::sin(zenith) * std::sin(slope) * std::cos(azimuth - aspect);
      t.at(6, y, x) = static_cast<float>(slope / (0.5 * std::numbers::pi));
      t.at(7, y, x) = static_cast<float>((aspect + std::numbers::pi) / (2.0 * std::numbers::pi));
      t.at(8, y, x) = static_cast<float>(std::max(0.0, shade));
    }
  }
  return t;
}

namespace {

struct TileJob {
  std::size_t label, index;
};

std::vector<TileJob> jobs_for(const GeneratorParams& p) {
  std::vector<TileJob> jobs;
  for (std::size_t c = 0; c < p.counts.size(); ++c) {
    for (std::size_t i = 0; i < p.counts[c]; ++i) jobs.push_back({c, i});
  }
  return jobs;
}

std::vector<std::string> class_names_for(std::size_t k) {
  std::vector<std::string> names;
  for (std::size_t c = 0; c < k; ++c) names.push_back(c < 4 ? kTemplateClasses[c] : "class" + std::to_string(c));
  return names;
}

}  // namespace

DatasetManifest generate_synthetic(const GeneratorParams& params, const std::string& dir) {
  const auto jobs = jobs_for(params);
  const auto names = class_names_for(params.counts.size());
  fs::create_directories(fs::path(dir) / "tiles");
  std::vector<std::string> paths(jobs.size());
  for (std::size_t j = 0; j < jobs.size(); ++j) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "_%05zu.mbt", jobs[j].index);
    paths[j] = "tiles/" + names[jobs[j].label] + buf;
  }
  std::string failure;
#pragma omp parallel for schedule(dynamic, 8)
  for (std::size_t j = 0; j < jobs.size(); ++j) {
    try {
      save_mbt((fs::path(dir) / paths[j]).string(),
               synthetic_tile(jobs[j].label, jobs[j].index, params.size, params.seed, params.noise));
    } catch (const std::exception& e) {
#pragma omp critical
      failure = e.what();
    }
  }
  if (!failure.empty()) throw InputError(failure);

  DatasetManifest m;
  m.class_names = names;
  m.seed = params.seed;
  m.generator = to_json(params);
  m.root = dir;
  for (std::size_t j = 0; j < jobs.size(); ++j) m.entries.push_back({paths[j], jobs[j].label, Split::Unassigned});
  save_manifest((fs::path(dir) / "manifest.json").string(), m);
  return m;
}

InMemoryData to_nhwc(const std::vector<MbtTile>& tiles, const std::vector<std::size_t>& labels) {
  InMemoryData d;
  d.labels = labels;
  if (tiles.empty()) return d;
  const std::size_t h = tiles[0].height, w = tiles[0].width, c = tiles[0].bands;
  d.images = Tensor({tiles.size(), h, w, c});
#pragma omp parallel for schedule(static)
  for (std::size_t n = 0; n < tiles.size(); ++n) {
    const auto& t = tiles[n];
    if (t.height != h || t.width != w || t.bands != c) continue;
    double* dst = d.images.data() + n * h * w * c;
    for (std::size_t b = 0; b < c; ++b) {
      for (std::size_t p = 0; p < h * w; ++p) dst[p * c + b] = t.data[b * h * w + p];
    }
  }
  for (const auto& t : tiles) {
    if (t.height != h || t.width != w || t.bands != c) {
      throw ShapeError("tiles differ in size: " + std::to_string(t.height) + "x" + std::to_string(t.width) + "x" +
                       std::to_string(t.bands) + " vs " + std::to_string(h) + "x" + std::to_string(w) + "x" +
                       std::to_string(c));
    }
  }
  return d;
}

InMemoryData synthetic_batch(const GeneratorParams& params) {
  const auto jobs = jobs_for(params);
  std::vector<MbtTile> tiles(jobs.size());
  std::vector<std::size_t> labels(jobs.size());
#pragma omp parallel for schedule(dynamic, 8)
  for (std::size_t j = 0; j < jobs.size(); ++j) {
    tiles[j] = synthetic_tile(jobs[j].label, jobs[j].index, params.size, params.seed, params.noise);
    labels[j] = jobs[j].label;
  }
  return to_nhwc(tiles, labels);
}

InMemoryData load_split(const DatasetManifest& m, Split split) {
  std::vector<const ManifestEntry*> picked;
  for (const auto& e : m.entries) {
    if (e.split == split) picked.push_back(&e);
  }
  std::vector<MbtTile> tiles(picked.size());
  std::vector<std::size_t> labels(picked.size());
  std::string failure;
#pragma omp parallel for schedule(dynamic, 8)
  for (std::size_t i = 0; i < picked.size(); ++i) {
    try {
      tiles[i] = load_mbt((fs::path(m.root) / picked[i]->path).string());
    } catch (const std::exception& e) {
#pragma omp critical
      failure = e.what();
    }
    labels[i] = picked[i]->label;
  }
  if (!failure.empty()) throw InputError(failure);
  return to_nhwc(tiles, labels);
}

BandStats band_stats(const Tensor& images) {
  if (images.rank() != 4 || images.dim(0) == 0) throw InputError("band statistics need a non-empty [N,H,W,C] set");
  const std::size_t c = images.dim(3), pixels = images.size() / c;
  BandStats s{std::vector<double>(c, 0.0), std::vector<double>(c, 0.0)};
  const double* v = images.data();
  for (std::size_t p = 0; p < pixels; ++p) {
    for (std::size_t b = 0; b < c; ++b) s.mean[b] += v[p * c + b];
  }
  for (auto& m : s.mean) m /= double(pixels);
  for (std::size_t p = 0; p < pixels; ++p) {
    for (std::size_t b = 0; b < c; ++b) {
      const double d = v[p * c + b] - s.mean[b];
      s.stddev[b] += d * d;
    }
  }
  for (auto& sd : s.stddev) sd = std::max(std::sqrt(sd / double(pixels)), 1e-8);
  return s;
}

void standardize(Tensor& images, const BandStats& stats) {
  const std::size_t c = images.dim(images.rank() - 1);
  if (stats.mean.size() != c) throw ShapeError("band statistics for " + std::to_string(stats.mean.size()) +
                                               " bands applied to " + std::to_string(c));
  double* v = images.data();
  const std::size_t pixels = images.size() / c;
#pragma omp parallel for schedule(static) if (pixels > 65536)
  for (std::size_t p = 0; p < pixels; ++p) {
    for (std::size_t b = 0; b < c; ++b) v[p * c + b] = (v[p * c + b] - stats.mean[b]) / stats.stddev[b];
  }
}

namespace {

std::vector<double> band_means(const Tensor& images) {
  const std::size_t n = images.dim(0), c = images.dim(3), hw = images.dim(1) * images.dim(2);
  std::vector<double> f(n * c, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    const double* v = images.data() + i * hw * c;
    for (std::size_t p = 0; p < hw; ++p) {
      for (std::size_t b = 0; b < c; ++b) f[i * c + b] += v[p * c + b];
    }
    for (std::size_t b = 0; b < c; ++b) f[i * c + b] /= double(hw);
  }
  return f;
}

}  // namespace

double linear_probe_accuracy(const InMemoryData& train, const InMemoryData& test, std::size_t num_classes, double ridge) {
  if (train.labels.empty() || test.labels.empty()) throw InputError("linear probe needs non-empty train and test sets");
  const std::size_t c = train.images.dim(3), dim = c + 1;
  auto ftr = band_means(train.images);
  auto fte = band_means(test.images);
  // standardize features on train statistics
  std::vector<double> mu(c, 0.0), sd(c, 0.0);
  const std::size_t n = train.labels.size();
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t b = 0; b < c; ++b) mu[b] += ftr[i * c + b] / double(n);
  }
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t b = 0; b < c; ++b) sd[b] += (ftr[i * c + b] - mu[b]) * (ftr[i * c + b] - mu[b]) / double(n);
  }
  for (auto& v : sd) v = std::max(std::sqrt(v), 1e-12);
  auto row = [&](const std::vector<double>& f, std::size_t i, std::vector<double>& out) {
    for (std::size_t b = 0; b < c; ++b) out[b] = (f[i * c + b] - mu[b]) / sd[b];
    out[c] = 1.0;
  };

  std::vector<double> xtx(dim * dim, 0.0), xty(dim * num_classes, 0.0), x(dim);
  for (std::size_t i = 0; i < n; ++i) {
    row(ftr, i, x);
    for (std::size_t a = 0; a < dim; ++a) {
      for (std::size_t b = 0; b < dim; ++b) xtx[a * dim + b] += x[a] * x[b];
      xty[a * num_classes + train.labels[i]] += x[a];
    }
  }
  for (std::size_t a = 0; a < dim; ++a) xtx[a * dim + a] += ridge * double(n);
  std::vector<double> lower;
  if (!linalg::cholesky(xtx, dim, lower)) throw NumericError("linear probe normal equations are singular");
  std::vector<double> w(dim * num_classes);
  for (std::size_t k = 0; k < num_classes; ++k) {
    std::vector<double> col(dim);
    for (std::size_t a = 0; a < dim; ++a) col[a] = xty[a * num_classes + k];
    linalg::cholesky_solve(lower, dim, col);
    for (std::size_t a = 0; a < dim; ++a) w[a * num_classes + k] = col[a];
  }

  std::size_t correct = 0;
  for (std::size_t i = 0; i < test.labels.size(); ++i) {
    row(fte, i, x);
    std::size_t best = 0;
    double best_score = -1e300;
    for (std::size_t k = 0; k < num_classes; ++k) {
      double sc = 0.0;
      for (std::size_t a = 0; a < dim; ++a) sc += x[a] * w[a * num_classes + k];
      if (sc > best_score) {
        best_score = sc;
        best = k;
      }
    }
    correct += best == test.labels[i];
  }
  return double(correct) / double(test.labels.size());
}

}  // namespace dfcr
