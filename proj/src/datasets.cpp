#include "coarseseg/datasets.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <set>
#include <sstream>

#include <nlohmann/json.hpp>

#include "coarseseg/io.hpp"

namespace coarseseg {
namespace fs = std::filesystem;
using json = nlohmann::json;

void LabelSpace::validate() const {
  if (num_classes < 2 || num_classes > 254) {
    throw ValidationError("label space needs 2..254 classes, got " +
                          std::to_string(num_classes));
  }
  if (static_cast<int>(class_names.size()) != num_classes) {
    throw ValidationError("label space: class_names has " +
                          std::to_string(class_names.size()) +
                          " entries for " + std::to_string(num_classes) +
                          " classes");
  }
  std::set<std::string> seen(class_names.begin(), class_names.end());
  if (seen.size() != class_names.size()) {
    throw ValidationError("label space: class names are not unique");
  }
}

LabelSpace LabelSpace::binary() { return {2, {"background", "foreground"}}; }

LabelSpace LabelSpace::mnist_multiclass() {
  LabelSpace s{11, {"background"}};
  for (int d = 0; d < 10; ++d) s.class_names.push_back("digit" + std::to_string(d));
  return s;
}

const CoarseMap* SegSample::find_pos(const std::string& source) const {
  for (const auto& c : pos_coarse)
    if (c.source == source) return &c;
  return nullptr;
}

const CoarseMap* SegSample::find_neg(const std::string& source) const {
  for (const auto& c : neg_coarse)
    if (c.source == source) return &c;
  return nullptr;
}

std::string to_string(SplitTag tag) {
  switch (tag) {
    case SplitTag::train: return "train";
    case SplitTag::val: return "val";
    case SplitTag::test: return "test";
  }
  return "train";
}

SplitTag split_tag_from_string(const std::string& s) {
  if (s == "train") return SplitTag::train;
  if (s == "val") return SplitTag::val;
  if (s == "test") return SplitTag::test;
  throw ValidationError("unknown split tag '" + s + "'");
}

namespace {

void check_labels(const LabelMap& m, int num_classes, const std::string& id,
                  const char* what) {
  for (auto v : m.data) {
    if (v != kIgnore && v >= num_classes) {
      throw ValidationError("sample '" + id + "': " + what + " contains label " +
                                std::to_string(v) + " >= num_classes " +
                                std::to_string(num_classes),
                            "E_LABEL_RANGE");
    }
  }
}

void check_sources(const std::vector<CoarseMap>& maps, CoarseKind kind,
                   const SegSample& s, int num_classes) {
  std::set<std::string> names;
  for (const auto& c : maps) {
    if (c.kind != kind) {
      throw ValidationError("sample '" + s.id + "': coarse source '" + c.source +
                            "' is filed under the wrong kind");
    }
    if (c.source.empty() || !names.insert(c.source).second) {
      throw ValidationError("sample '" + s.id +
                            "': empty or duplicate coarse source name '" +
                            c.source + "'");
    }
    if (c.labels.height != s.gt_label.height ||
        c.labels.width != s.gt_label.width) {
      throw ShapeError("sample '" + s.id + "': coarse map '" + c.source +
                       "' shape differs from ground truth");
    }
    check_labels(c.labels, num_classes, s.id, "coarse map");
  }
}

std::vector<std::string> union_sources(const SegDataset& ds, bool positive) {
  std::set<std::string> names;
  for (const auto& s : ds.samples)
    for (const auto& c : positive ? s.pos_coarse : s.neg_coarse)
      names.insert(c.source);
  return {names.begin(), names.end()};
}

}  // namespace

void SegDataset::validate() const {
  space.validate();
  std::set<std::string> ids;
  for (const auto& s : samples) {
    if (s.id.empty()) throw ValidationError("sample with empty id");
    if (!ids.insert(s.id).second) {
      throw ValidationError("duplicate sample id '" + s.id + "'");
    }
    const auto& im = s.image;
    if (im.height <= 0 || im.width <= 0 || im.channels < 1 ||
        im.data.size() != static_cast<std::size_t>(im.height) * im.width * im.channels) {
      throw ShapeError("sample '" + s.id + "': malformed image buffer");
    }
    if (s.gt_label.height != im.height || s.gt_label.width != im.width ||
        s.gt_label.size() != static_cast<std::size_t>(im.height) * im.width) {
      throw ShapeError("sample '" + s.id + "': label map shape differs from image");
    }
    check_labels(s.gt_label, space.num_classes, s.id, "gt label");
    check_sources(s.pos_coarse, CoarseKind::positive, s, space.num_classes);
    check_sources(s.neg_coarse, CoarseKind::negative, s, space.num_classes);
  }
}

std::vector<std::string> SegDataset::pos_sources() const {
  return union_sources(*this, true);
}
std::vector<std::string> SegDataset::neg_sources() const {
  return union_sources(*this, false);
}

// ---------------------------------------------------------------------------

MnistMode mnist_mode_from_string(const std::string& s) {
  if (s == "binary") return MnistMode::binary;
  if (s == "multiclass") return MnistMode::multiclass;
  throw ValidationError("unknown mnist mode '" + s + "' (binary|multiclass)");
}

namespace {

std::uint32_t read_be32(const std::vector<std::uint8_t>& b, std::size_t off) {
  if (off + 4 > b.size()) throw IoError("idx: truncated header");
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) |
         (std::uint32_t{b[off + 2]} << 8) | std::uint32_t{b[off + 3]};
}

std::vector<RawDigit> read_mnist_idx(const fs::path& dir, std::size_t offset,
                                     std::size_t limit) {
  auto find = [&](const char* stem) {
    for (const char* suffix : {"", ".gz"}) {
      fs::path p = dir / (std::string(stem) + suffix);
      if (fs::exists(p)) return p;
    }
    throw IoError("mnist: missing " + (dir / stem).string(), "E_MISSING_FILE");
  };
  auto bytes_of = [](const fs::path& p) {
    std::string s = io::read_maybe_gzip(p);
    return std::vector<std::uint8_t>(s.begin(), s.end());
  };
  const auto images = bytes_of(find("train-images-idx3-ubyte"));
  const auto labels = bytes_of(find("train-labels-idx1-ubyte"));
  if (read_be32(images, 0) != 2051 || read_be32(labels, 0) != 2049) {
    throw IoError("mnist: bad IDX magic in " + dir.string());
  }
  const std::size_t n = read_be32(images, 4);
  const std::size_t rows = read_be32(images, 8), cols = read_be32(images, 12);
  if (read_be32(labels, 4) != n || images.size() < 16 + n * rows * cols ||
      labels.size() < 8 + n) {
    throw IoError("mnist: IDX files are inconsistent or truncated");
  }
  std::vector<RawDigit> out;
  for (std::size_t i = offset; i < n && out.size() < limit; ++i) {
    RawDigit d;
    d.image = Image(static_cast<int>(rows), static_cast<int>(cols), 1);
    std::copy_n(images.begin() + 16 + i * rows * cols, rows * cols,
                d.image.data.begin());
    d.digit = labels[8 + i];
    out.push_back(std::move(d));
  }
  return out;
}

std::vector<RawDigit> read_mnist_csv(const fs::path& path, std::size_t offset,
                                     std::size_t limit) {
  const std::string text = io::read_maybe_gzip(path);
  std::istringstream is(text);
  std::string line;
  std::vector<RawDigit> out;
  std::size_t row = 0;
  while (std::getline(is, line) && out.size() < limit) {
    if (line.empty()) continue;
    if (row++ < offset) continue;
    std::vector<int> vals;
    vals.reserve(785);
    std::size_t pos = 0;
    while (pos <= line.size()) {
      const std::size_t next = line.find(',', pos);
      const std::string tok =
          line.substr(pos, next == std::string::npos ? std::string::npos : next - pos);
      try {
        vals.push_back(static_cast<int>(std::lround(std::stod(tok))));
      } catch (const std::exception&) {
        throw IoError("mnist csv: bad value '" + tok + "' on row " +
                      std::to_string(row));
      }
      if (next == std::string::npos) break;
      pos = next + 1;
    }
    if (vals.size() != 785) {
      throw ShapeError("mnist csv: row " + std::to_string(row) + " has " +
                       std::to_string(vals.size()) +
                       " fields, expected 784 pixels + label");
    }
    RawDigit d;
    d.image = Image(28, 28, 1);
    for (int i = 0; i < 784; ++i) {
      d.image.data[i] = static_cast<std::uint8_t>(std::clamp(vals[i], 0, 255));
    }
    d.digit = vals[784];
    if (d.digit < 0 || d.digit > 9) {
      throw IoError("mnist csv: digit label out of range on row " +
                    std::to_string(row));
    }
    out.push_back(std::move(d));
  }
  return out;
}

}  // namespace

std::vector<RawDigit> read_mnist(const fs::path& path, std::size_t offset,
                                 std::size_t limit) {
  if (fs::is_directory(path)) return read_mnist_idx(path, offset, limit);
  if (!fs::exists(path)) {
    throw IoError("mnist source not found: " + path.string(), "E_MISSING_FILE");
  }
  return read_mnist_csv(path, offset, limit);
}

SegDataset build_mnist_seg(std::span<const RawDigit> raw, MnistMode mode,
                           float threshold, const std::string& id_prefix) {
  if (!(threshold > 0.0f && threshold < 1.0f)) {
    throw ValidationError("threshold must lie in (0,1)");
  }
  if (raw.empty()) throw ValidationError("empty input: no digits", "E_EMPTY");
  SegDataset ds;
  ds.space = mode == MnistMode::binary ? LabelSpace::binary()
                                       : LabelSpace::mnist_multiclass();
  ds.samples.reserve(raw.size());
  for (std::size_t i = 0; i < raw.size(); ++i) {
    const RawDigit& d = raw[i];
    if (d.image.height != 28 || d.image.width != 28 || d.image.channels != 1) {
      throw ShapeError("digit " + std::to_string(i) + " is " +
                       std::to_string(d.image.height) + "x" +
                       std::to_string(d.image.width) + "x" +
                       std::to_string(d.image.channels) +
                       ", expected 28x28 grayscale");
    }
    if (d.digit < 0 || d.digit > 9) {
      throw ValidationError("digit class out of range at index " + std::to_string(i));
    }
    SegSample s;
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%06zu", i);
    s.id = id_prefix + "_" + buf;
    s.image = d.image;
    s.gt_label = LabelMap(28, 28, 0);
    const auto fg = static_cast<std::uint8_t>(
        mode == MnistMode::binary ? 1 : d.digit + 1);
    for (int y = 0; y < 28; ++y)
      for (int x = 0; x < 28; ++x)
        if (d.image.intensity(y, x) > threshold) s.gt_label.at(y, x) = fg;
    ds.samples.push_back(std::move(s));
  }
  return ds;
}

// ---------------------------------------------------------------------------

namespace {

io::RawImage to_raw(const Image& im) {
  return {im.height, im.width, im.channels, im.data};
}

io::RawImage to_raw(const LabelMap& m) { return {m.height, m.width, 1, m.data}; }

LabelMap label_from_png(const fs::path& p, const std::string& id) {
  io::RawImage r = io::read_png(p);
  if (r.channels != 1) {
    throw IoError("sample '" + id + "': label file is not single-channel: " +
                  p.string());
  }
  LabelMap m;
  m.height = r.height;
  m.width = r.width;
  m.data = std::move(r.data);
  return m;
}

bool safe_name(const std::string& s) {
  return !s.empty() && s != "." && s != ".." &&
         s.find_first_of("/\\") == std::string::npos;
}

}  // namespace

ManifestSummary save_dataset(const SegDataset& ds, const fs::path& dir) {
  ds.validate();
  fs::create_directories(dir);
  json manifest;
  manifest["version"] = kManifestVersion;
  manifest["num_classes"] = ds.space.num_classes;
  manifest["class_names"] = ds.space.class_names;
  manifest["split"] = to_string(ds.split_tag);
  manifest["samples"] = json::array();
  for (const auto& s : ds.samples) {
    if (!safe_name(s.id)) throw ValidationError("sample id not usable as a file name: " + s.id);
    io::write_png(dir / "images" / (s.id + ".png"), to_raw(s.image));
    io::write_png(dir / "labels" / (s.id + ".png"), to_raw(s.gt_label));
    json entry{{"id", s.id}, {"pos_sources", json::array()}, {"neg_sources", json::array()}};
    for (const auto& c : s.pos_coarse) {
      if (!safe_name(c.source)) throw ValidationError("bad source name: " + c.source);
      io::write_png(dir / "coarse_pos" / c.source / (s.id + ".png"), to_raw(c.labels));
      entry["pos_sources"].push_back(c.source);
    }
    for (const auto& c : s.neg_coarse) {
      if (!safe_name(c.source)) throw ValidationError("bad source name: " + c.source);
      io::write_png(dir / "coarse_neg" / c.source / (s.id + ".png"), to_raw(c.labels));
      entry["neg_sources"].push_back(c.source);
    }
    manifest["samples"].push_back(std::move(entry));
  }
  io::write_text_atomic(dir / "manifest.json", manifest.dump(1) + "\n");
  return {dir, ds.samples.size(), ds.space.num_classes, ds.pos_sources(),
          ds.neg_sources()};
}

SegDataset load_dataset(const fs::path& dir) {
  const fs::path manifest_path = dir / "manifest.json";
  if (!fs::exists(manifest_path)) {
    throw IoError("missing manifest: " + manifest_path.string(), "E_MISSING_MANIFEST");
  }
  json m;
  try {
    m = json::parse(io::read_text(manifest_path));
  } catch (const json::exception& e) {
    throw IoError("manifest is not valid JSON: " + std::string(e.what()), "E_MANIFEST");
  }
  try {
    const int version = m.at("version").get<int>();
    if (version != kManifestVersion) {
      throw IoError("manifest version " + std::to_string(version) +
                        " not supported (expected " +
                        std::to_string(kManifestVersion) + ")",
                    "E_VERSION");
    }
    SegDataset ds;
    ds.space.num_classes = m.at("num_classes").get<int>();
    ds.space.class_names = m.at("class_names").get<std::vector<std::string>>();
    ds.space.validate();
    if (m.contains("split")) ds.split_tag = split_tag_from_string(m["split"]);
    for (const auto& e : m.at("samples")) {
      SegSample s;
      s.id = e.at("id").get<std::string>();
      if (!safe_name(s.id)) throw IoError("manifest: bad sample id '" + s.id + "'");
      auto need = [&](const fs::path& p) {
        if (!fs::exists(p)) {
          throw IoError("sample '" + s.id + "': referenced file absent: " + p.string(),
                        "E_MISSING_FILE");
        }
        return p;
      };
      io::RawImage im = io::read_png(need(dir / "images" / (s.id + ".png")));
      s.image.height = im.height;
      s.image.width = im.width;
      s.image.channels = im.channels;
      s.image.data = std::move(im.data);
      s.gt_label = label_from_png(need(dir / "labels" / (s.id + ".png")), s.id);
      for (const auto& src : e.value("pos_sources", json::array())) {
        const auto name = src.get<std::string>();
        if (!safe_name(name)) throw IoError("manifest: bad source name '" + name + "'");
        s.pos_coarse.push_back({name, CoarseKind::positive,
                                label_from_png(need(dir / "coarse_pos" / name / (s.id + ".png")), s.id)});
      }
      for (const auto& src : e.value("neg_sources", json::array())) {
        const auto name = src.get<std::string>();
        if (!safe_name(name)) throw IoError("manifest: bad source name '" + name + "'");
        s.neg_coarse.push_back({name, CoarseKind::negative,
                                label_from_png(need(dir / "coarse_neg" / name / (s.id + ".png")), s.id)});
      }
      ds.samples.push_back(std::move(s));
    }
    ds.validate();
    return ds;
  } catch (const json::exception& e) {
    throw IoError("malformed manifest " + manifest_path.string() + ": " + e.what(),
                  "E_MANIFEST");
  } catch (const ValidationError& e) {
    throw IoError("load " + dir.string() + ": " + e.what(), e.code());
  }
}

std::vector<SegDataset> split(const SegDataset& ds, std::span<const double> fractions,
                              std::uint64_t seed) {
  if (fractions.empty()) throw ValidationError("split: no fractions given");
  double total = 0.0;
  for (double f : fractions) {
    if (!(f >= 0.0 && f <= 1.0)) {
      throw ValidationError("split: fraction outside [0,1]");
    }
    total += f;
  }
  if (std::abs(total - 1.0) > 1e-9) {
    throw ValidationError("split: fractions sum to " + std::to_string(total) +
                          ", expected 1");
  }
  const std::size_t n = ds.samples.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(order.begin(), order.end(), rng);

  std::vector<SegDataset> parts;
  double cumulative = 0.0;
  std::size_t begin = 0;
  for (std::size_t k = 0; k < fractions.size(); ++k) {
    cumulative += fractions[k];
    std::size_t end = k + 1 == fractions.size()
                          ? n
                          : std::min<std::size_t>(n, static_cast<std::size_t>(
                                                         std::llround(cumulative * n)));
    end = std::max(end, begin);
    SegDataset part;
    part.space = ds.space;
    part.split_tag = ds.split_tag;
    std::vector<std::size_t> idx(order.begin() + begin, order.begin() + end);
    std::sort(idx.begin(), idx.end());  // keep original relative order
    for (auto i : idx) part.samples.push_back(ds.samples[i]);
    parts.push_back(std::move(part));
    begin = end;
  }
  return parts;
}

}  // namespace coarseseg
