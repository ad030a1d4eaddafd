#pragma once

#include <cmath>
#include <cstddef>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <limits>
#include <map>
#include <memory>
#include <sstream>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "nmil/bag.hpp"
#include "nmil/synth.hpp"
#include "nmil/tensor.hpp"
#include "nmil/training.hpp"

namespace nmil {

namespace fs = std::filesystem;

class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

inline constexpr int kManifestSchemaVersion = 1;

inline std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  if (!in.good() && !in.eof()) throw IoError("read failed: " + path.string());
  return ss.str();
}

/// Writes `contents` next to `path` and renames it into place.
inline void atomic_write(const fs::path& path, const std::string& contents) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + tmp.string());
    out << contents;
    out.flush();
    if (!out) throw IoError("write failed: " + tmp.string());
  }
  std::error_code ec;
  fs::rename(tmp, path, ec);
  if (ec) throw IoError("cannot rename " + tmp.string() + " to " + path.string() + ": " + ec.message());
}

/// Replaces directory `target` with the fully written `staging` directory.
inline void publish_directory(const fs::path& staging, const fs::path& target) {
  const fs::path old = target.string() + ".old";
  std::error_code ec;
  fs::remove_all(old, ec);
  if (fs::exists(target)) {
    fs::rename(target, old, ec);
    if (ec) throw IoError("cannot move aside " + target.string() + ": " + ec.message());
  }
  fs::rename(staging, target, ec);
  if (ec) throw IoError("cannot rename " + staging.string() + " to " + target.string() + ": " + ec.message());
  fs::remove_all(old, ec);
}

// ---------------------------------------------------------------------------
// Binary PPM (P6, 8 bit). Pixel values are stored as round(255 v).

inline std::string encode_ppm(const Tensor& img) {
  if (img.rank() != 3 || img.dim(0) != 3) throw ShapeError("encode_ppm: expected [3,H,W], got " + to_string(img.shape()));
  const std::size_t h = img.dim(1), w = img.dim(2);
  std::string out = "P6\n" + std::to_string(w) + " " + std::to_string(h) + "\n255\n";
  out.reserve(out.size() + 3 * h * w);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t c = 0; c < 3; ++c) {
        const double v = std::clamp(img.at(c, y, x), 0.0, 1.0);
        out.push_back(static_cast<char>(static_cast<unsigned char>(std::lround(v * 255.0))));
      }
    }
  }
  return out;
}

inline Tensor decode_ppm(const std::string& bytes, const std::string& what = "image") {
  std::istringstream in(bytes);
  std::string magic;
  std::size_t w = 0, h = 0, maxval = 0;
  in >> magic >> w >> h >> maxval;
  if (!in || magic != "P6" || maxval != 255 || w == 0 || h == 0) throw IoError(what + ": not an 8-bit P6 image");
  in.get();
  const auto offset = static_cast<std::size_t>(in.tellg());
  if (bytes.size() < offset + 3 * w * h) throw IoError(what + ": truncated pixel data");
  Tensor img({3, h, w});
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data() + offset);
  for (std::size_t y = 0; y < h; ++y) {
    for (std::size_t x = 0; x < w; ++x) {
      for (std::size_t c = 0; c < 3; ++c) img.at(c, y, x) = static_cast<double>(*p++) / 255.0;
    }
  }
  return img;
}

// ---------------------------------------------------------------------------
// Dataset manifest

inline nlohmann::json manifest_json(const std::vector<Bag>& bags) {
  nlohmann::json j;
  j["schema_version"] = kManifestSchemaVersion;
  j["num_subbags"] = bags.empty() ? 0 : bags.front().sub_bags.size();
  nlohmann::json arr = nlohmann::json::array();
  for (const Bag& b : bags) {
    nlohmann::json jb;
    jb["id"] = b.id;
    jb["label"] = b.label;
    nlohmann::json subs = nlohmann::json::array();
    for (const SubBag& sb : b.sub_bags) {
      nlohmann::json imgs = nlohmann::json::array();
      for (const SourceImage& img : sb.images) imgs.push_back({{"id", img.id}, {"file", "images/" + img.id + ".ppm"}});
      subs.push_back(imgs);
    }
    jb["sub_bags"] = subs;
    arr.push_back(jb);
  }
  j["bags"] = arr;
  return j;
}

inline constexpr const char* kManifest = "manifest.json";
inline constexpr const char* kSourceManifest = "manifest_source.json";

/// Writes manifest.json, metadata.json and images/ under `dir` (staged, then renamed into place).
/// `source_bags`, when given, is the undropped dataset; it gets its own manifest over the same images.
inline void write_dataset(const fs::path& dir, const std::vector<Bag>& bags, const nlohmann::json& metadata,
                          const std::string& drop_log_csv = {}, const std::vector<Bag>* source_bags = nullptr) {
  const fs::path staging = dir.string() + ".tmp";
  std::error_code ec;
  fs::remove_all(staging, ec);
  fs::create_directories(staging / "images");
  std::map<std::string, const SourceImage*> seen;
  for (const std::vector<Bag>* set : {source_bags, &bags}) {
    if (!set) continue;
    for (const Bag& b : *set) {
      for (const SubBag& sb : b.sub_bags) {
        for (const SourceImage& img : sb.images) {
          if (!seen.emplace(img.id, &img).second) continue;
          atomic_write(staging / "images" / (img.id + ".ppm"), encode_ppm(*img.pixels));
        }
      }
    }
  }
  atomic_write(staging / kManifest, manifest_json(bags).dump(1) + "\n");
  if (source_bags) atomic_write(staging / kSourceManifest, manifest_json(*source_bags).dump(1) + "\n");
  atomic_write(staging / "metadata.json", metadata.dump(1) + "\n");
  if (!drop_log_csv.empty()) atomic_write(staging / "drop_log.csv", drop_log_csv);
  publish_directory(staging, dir);
}

/// Loads a dataset written by write_dataset. Classes holding less than
/// `min_class_fraction` of all bags are removed.
inline std::vector<Bag> read_dataset(const fs::path& dir, double min_class_fraction = 0.0,
                                     const std::string& manifest_name = kManifest) {
  const fs::path manifest = dir / manifest_name;
  if (!fs::exists(manifest)) throw IoError("missing dataset manifest " + manifest.string() + " (run gen-data first)");
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_file(manifest));
  } catch (const nlohmann::json::exception& e) {
    throw IoError(manifest.string() + ": " + e.what());
  }
  if (j.value("schema_version", -1) != kManifestSchemaVersion) {
    throw IoError(manifest.string() + ": unsupported schema_version");
  }
  std::vector<Bag> bags;
  std::map<std::string, std::shared_ptr<const Tensor>> cache;
  for (const auto& jb : j.at("bags")) {
    Bag b{jb.at("id").get<std::size_t>(), jb.at("label").get<std::size_t>(), {}};
    std::size_t idx = 0;
    for (const auto& js : jb.at("sub_bags")) {
      SubBag sb{idx++, {}};
      for (const auto& ji : js) {
        const std::string file = ji.at("file").get<std::string>();
        auto& px = cache[file];
        if (!px) px = std::make_shared<const Tensor>(decode_ppm(read_file(dir / file), (dir / file).string()));
        sb.images.push_back({ji.at("id").get<std::string>(), px});
      }
      b.sub_bags.push_back(std::move(sb));
    }
    validate(b);
    bags.push_back(std::move(b));
  }
  if (min_class_fraction > 0.0 && !bags.empty()) {
    std::map<std::size_t, std::size_t> counts;
    for (const Bag& b : bags) counts[b.label]++;
    std::vector<Bag> kept;
    for (Bag& b : bags) {
      if (static_cast<double>(counts[b.label]) >= min_class_fraction * static_cast<double>(bags.size())) {
        kept.push_back(std::move(b));
      }
    }
    bags = std::move(kept);
  }
  return bags;
}

// ---------------------------------------------------------------------------
// CSV

inline std::string format_double(double v) {
  if (std::isnan(v)) return "";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string metrics_csv_header() { return "stage,epoch,subset,accuracy,loss\n"; }

/// Rows: one "train" row per epoch, then "full", "all" and "config:<bits>" rows for evaluations.
inline std::string metrics_csv_rows(const std::vector<MetricsRecord>& records) {
  std::string out;
  for (const MetricsRecord& r : records) {
    const std::string prefix = r.stage + "," + std::to_string(r.epoch) + ",";
    const bool evaluated = !std::isnan(r.all_accuracy);
    if (!evaluated) {
      out += prefix + "train,," + format_double(r.train_loss) + "\n";
      continue;
    }
    if (!std::isnan(r.full_accuracy)) out += prefix + "full," + format_double(r.full_accuracy) + "," + format_double(r.full_loss) + "\n";
    out += prefix + "all," + format_double(r.all_accuracy) + "," + format_double(r.all_loss) + "\n";
    for (const auto& [cfg, acc] : r.config_accuracy) out += prefix + "config:" + cfg + "," + format_double(acc) + ",\n";
  }
  return out;
}

struct MetricsRow {
  std::string stage;
  std::size_t epoch = 0;
  std::string subset;
  double accuracy = std::numeric_limits<double>::quiet_NaN();
  double loss = std::numeric_limits<double>::quiet_NaN();
};

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

inline std::vector<MetricsRow> parse_metrics_csv(const std::string& text, const std::string& what = "metrics") {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line + "\n" != metrics_csv_header()) throw IoError(what + ": unexpected header");
  std::vector<MetricsRow> rows;
  std::size_t lineno = 1;
  auto num = [&](const std::string& s) { return s.empty() ? std::numeric_limits<double>::quiet_NaN() : std::stod(s); };
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto f = split_csv_line(line);
    if (f.size() != 5) throw IoError(what + ":" + std::to_string(lineno) + ": expected 5 fields");
    try {
      rows.push_back({f[0], std::stoul(f[1]), f[2], num(f[3]), num(f[4])});
    } catch (const std::exception&) {
      throw IoError(what + ":" + std::to_string(lineno) + ": malformed number");
    }
  }
  return rows;
}

inline std::string trace_csv(const std::vector<std::pair<std::size_t, double>>& trace) {
  std::string out = "iteration,l2_norm\n";
  for (const auto& [it, norm] : trace) out += std::to_string(it) + "," + format_double(norm) + "\n";
  return out;
}

inline std::string drop_log_csv(const std::vector<synth::DropRecord>& log) {
  std::string out = "bag_id,subbag,image_id,relevance\n";
  for (const auto& r : log) {
    out += std::to_string(r.bag_id) + "," + std::to_string(r.subbag) + "," + r.image_id + "," + format_double(r.relevance) + "\n";
  }
  return out;
}

}  // namespace nmil
