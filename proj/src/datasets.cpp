#include "mpamatch/datasets.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <set>

#include <opencv2/core.hpp>
#include <opencv2/imgcodecs.hpp>
#include <opencv2/imgproc.hpp>

#include "mpamatch/errors.hpp"
#include "mpamatch/hashing.hpp"

namespace mpamatch::datasets {

namespace fs = std::filesystem;

namespace {

cv::Mat read_raw_mask(const fs::path& path) {
  cv::Mat m = cv::imread(path.string(), cv::IMREAD_UNCHANGED);
  if (m.empty()) throw DataError("unreadable mask " + path.string());
  if (m.channels() == 3 || m.channels() == 4) {
    std::vector<cv::Mat> ch;
    cv::split(m, ch);
    if (cv::countNonZero(ch[0] != ch[1]) || cv::countNonZero(ch[0] != ch[2]))
      throw DataError("mask " + path.string() + " is colored; expected a single-channel index mask");
    m = ch[0];
  } else if (m.channels() != 1) {
    throw DataError("mask " + path.string() + " has an unsupported channel count");
  }
  if (m.depth() != CV_8U && m.depth() != CV_16U) throw DataError("mask " + path.string() + " must be 8 or 16 bit");
  m.convertTo(m, CV_32S);
  return m;
}

std::set<int> distinct_values(const cv::Mat& m) {
  std::set<int> values;
  for (int y = 0; y < m.rows; ++y) {
    const int* row = m.ptr<int>(y);
    for (int x = 0; x < m.cols; ++x) values.insert(row[x]);
  }
  return values;
}

std::vector<std::string> read_id_list(const nlohmann::json& j, const char* key) {
  if (!j.contains(key)) return {};
  return j.at(key).get<std::vector<std::string>>();
}

}  // namespace

int Palette::num_classes() const {
  int hi = other_nonzero.value_or(-1);
  for (const auto& [v, c] : values) hi = std::max(hi, c);
  return hi + 1;
}

bool Palette::covers(int value) const { return values.count(value) > 0 || (value != 0 && other_nonzero.has_value()); }

int Palette::map(int value) const {
  if (auto it = values.find(value); it != values.end()) return it->second;
  if (value != 0 && other_nonzero) return *other_nonzero;
  throw DataError("mask value " + std::to_string(value) + " is not in the palette");
}

nlohmann::json Palette::to_json() const {
  nlohmann::json v = nlohmann::json::object();
  for (const auto& [value, cls] : values) v[std::to_string(value)] = cls;
  nlohmann::json j{{"values", v}};
  if (other_nonzero) j["other_nonzero"] = *other_nonzero;
  return j;
}

Palette Palette::from_json(const nlohmann::json& j) {
  Palette p;
  p.values.clear();
  try {
    for (const auto& [key, cls] : j.at("values").items()) p.values[std::stoi(key)] = cls.get<int>();
    if (j.contains("other_nonzero")) p.other_nonzero = j.at("other_nonzero").get<int>();
  } catch (const std::exception& e) {
    throw ConfigError(std::string("malformed palette: ") + e.what());
  }
  if (p.values.empty() && !p.other_nonzero) throw ConfigError("palette is empty");
  for (const auto& [v, c] : p.values)
    if (c < 0) throw ConfigError("palette class indices must be non-negative");
  return p;
}

Palette Palette::identity(int num_classes) {
  Palette p;
  p.values.clear();
  for (int c = 0; c < num_classes; ++c) p.values[c] = c;
  return p;
}

std::string to_string(Split s) {
  switch (s) {
    case Split::train: return "train";
    case Split::train_labeled: return "train_labeled";
    case Split::train_unlabeled: return "train_unlabeled";
    case Split::test: return "test";
  }
  return "train";
}

Split parse_split(const std::string& s) {
  if (s == "train") return Split::train;
  if (s == "train_labeled" || s == "labeled") return Split::train_labeled;
  if (s == "train_unlabeled" || s == "unlabeled") return Split::train_unlabeled;
  if (s == "test") return Split::test;
  throw ConfigError("unknown split '" + s + "'");
}

std::size_t DatasetManifest::count(Split s) const {
  return static_cast<std::size_t>(std::count_if(entries.begin(), entries.end(), [&](const auto& e) { return e.split == s; }));
}

std::vector<const ManifestEntry*> DatasetManifest::select(Split s) const {
  std::vector<const ManifestEntry*> out;
  for (const auto& e : entries)
    if (e.split == s) out.push_back(&e);
  return out;
}

nlohmann::json DatasetManifest::to_json() const {
  nlohmann::json list = nlohmann::json::array();
  for (const auto& e : entries) {
    list.push_back({{"id", e.id},
                    {"image", e.image},
                    {"mask", e.mask},
                    {"split", to_string(e.split)},
                    {"image_hash", e.image_hash},
                    {"mask_hash", e.mask_hash},
                    {"classes", e.classes}});
  }
  return {{"schema_version", kSchemaVersion},
          {"name", name},
          {"root", root.string()},
          {"palette", palette.to_json()},
          {"predefined_split", predefined_split},
          {"entries", list}};
}

DatasetManifest DatasetManifest::from_json(const nlohmann::json& j) {
  try {
    if (j.at("schema_version").get<int>() != kSchemaVersion)
      throw DataError("unsupported manifest schema version " + j.at("schema_version").dump());
    DatasetManifest m;
    m.name = j.at("name").get<std::string>();
    m.root = j.at("root").get<std::string>();
    m.palette = Palette::from_json(j.at("palette"));
    m.predefined_split = j.value("predefined_split", false);
    for (const auto& e : j.at("entries")) {
      ManifestEntry entry;
      entry.id = e.at("id").get<std::string>();
      entry.image = e.at("image").get<std::string>();
      entry.mask = e.at("mask").get<std::string>();
      entry.split = parse_split(e.at("split").get<std::string>());
      entry.image_hash = e.at("image_hash").get<std::string>();
      entry.mask_hash = e.at("mask_hash").get<std::string>();
      entry.classes = e.at("classes").get<std::vector<int>>();
      m.entries.push_back(std::move(entry));
    }
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed manifest: ") + e.what());
  }
}

void DatasetManifest::save(const fs::path& path) const {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write manifest " + path.string());
  out << to_json().dump(2) << '\n';
}

DatasetManifest DatasetManifest::load(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest " + path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw DataError("manifest " + path.string() + " is not valid JSON: " + e.what());
  }
  return from_json(j);
}

DatasetManifest scan(const fs::path& root, const Palette& palette, const std::string& name) {
  if (!fs::is_directory(root)) throw DataError("dataset root " + root.string() + " does not exist");
  const auto image_dir = root / "images";
  const auto mask_dir = root / "masks";
  std::vector<std::string> stems;
  if (fs::is_directory(image_dir)) {
    for (const auto& f : fs::directory_iterator(image_dir)) {
      if (f.is_regular_file() && f.path().extension() == ".png") stems.push_back(f.path().stem().string());
    }
  }
  if (stems.empty()) throw DataError("dataset " + root.string() + " is empty (no images/*.png)");
  std::sort(stems.begin(), stems.end());

  DatasetManifest m;
  m.root = fs::absolute(root).lexically_normal();
  m.name = name.empty() ? m.root.filename().string() : name;
  m.palette = palette;

  std::set<std::string> train_ids, test_ids, labeled_ids, unlabeled_ids;
  if (fs::exists(root / "split.json")) {
    std::ifstream in(root / "split.json");
    nlohmann::json j;
    try {
      in >> j;
    } catch (const nlohmann::json::exception& e) {
      throw DataError("split.json is not valid JSON: " + std::string(e.what()));
    }
    for (const auto& id : read_id_list(j, "train")) train_ids.insert(id);
    for (const auto& id : read_id_list(j, "test")) test_ids.insert(id);
    for (const auto& id : read_id_list(j, "labeled")) labeled_ids.insert(id);
    for (const auto& id : read_id_list(j, "unlabeled")) unlabeled_ids.insert(id);
    m.predefined_split = true;
  }

  std::vector<std::string> palette_errors;
  for (const auto& stem : stems) {
    ManifestEntry e;
    e.id = stem;
    e.image = (fs::path("images") / (stem + ".png")).string();
    const auto image_path = root / e.image;
    if (cv::imread(image_path.string(), cv::IMREAD_COLOR).empty()) throw DataError("unreadable image " + image_path.string());
    e.image_hash = sha256_file(image_path);

    const auto mask_path = mask_dir / (stem + ".png");
    if (fs::exists(mask_path)) {
      e.mask = (fs::path("masks") / (stem + ".png")).string();
      e.mask_hash = sha256_file(mask_path);
      std::set<int> classes;
      std::vector<int> bad;
      for (int v : distinct_values(read_raw_mask(mask_path))) {
        if (palette.covers(v)) {
          classes.insert(palette.map(v));
        } else {
          bad.push_back(v);
        }
      }
      if (!bad.empty()) {
        std::string msg = e.mask + ": values";
        for (int v : bad) msg += " " + std::to_string(v);
        palette_errors.push_back(msg);
      }
      e.classes.assign(classes.begin(), classes.end());
    }

    if (m.predefined_split) {
      if (test_ids.count(stem)) {
        e.split = Split::test;
      } else if (labeled_ids.count(stem)) {
        e.split = Split::train_labeled;
      } else if (unlabeled_ids.count(stem) || !e.has_mask()) {
        e.split = Split::train_unlabeled;
      } else {
        e.split = Split::train;
      }
    } else {
      e.split = e.has_mask() ? Split::train : Split::train_unlabeled;
    }
    if (!e.has_mask() && (e.split == Split::test || e.split == Split::train_labeled))
      throw DataError("missing mask for labeled entry '" + stem + "'");
    m.entries.push_back(std::move(e));
  }
  if (!palette_errors.empty()) {
    std::string msg = "mask values outside the palette:";
    for (const auto& p : palette_errors) msg += "\n  " + p;
    throw DataError(msg);
  }
  return m;
}

DatasetManifest split(const DatasetManifest& manifest, double labeled_fraction, std::uint64_t seed,
                      double test_fraction) {
  if (!(labeled_fraction > 0.0 && labeled_fraction <= 1.0)) throw ConfigError("labeled fraction must lie in (0,1]");
  if (!(test_fraction >= 0.0 && test_fraction < 1.0)) throw ConfigError("test fraction must lie in [0,1)");
  DatasetManifest out = manifest;
  std::mt19937_64 rng(seed);

  bool has_test = out.count(Split::test) > 0;
  if (!has_test && !out.predefined_split) {
    std::vector<std::size_t> annotated;
    for (std::size_t i = 0; i < out.entries.size(); ++i)
      if (out.entries[i].has_mask()) annotated.push_back(i);
    std::shuffle(annotated.begin(), annotated.end(), rng);
    const auto n_test = static_cast<std::size_t>(std::llround(test_fraction * static_cast<double>(annotated.size())));
    for (std::size_t i = 0; i < n_test; ++i) out.entries[annotated[i]].split = Split::test;
  }

  std::vector<std::size_t> pool;  // annotated training entries
  std::size_t n_train = 0;
  for (std::size_t i = 0; i < out.entries.size(); ++i) {
    auto& e = out.entries[i];
    if (e.split == Split::test) continue;
    ++n_train;
    e.split = Split::train_unlabeled;
    if (e.has_mask()) pool.push_back(i);
  }
  const auto n_labeled = std::min<std::size_t>(
      pool.size(), static_cast<std::size_t>(std::llround(labeled_fraction * static_cast<double>(n_train))));
  std::shuffle(pool.begin(), pool.end(), rng);

  // one labeled entry per class first, then fill in shuffled order
  std::set<int> needed;
  for (auto i : pool)
    for (int c : out.entries[i].classes) needed.insert(c);
  std::vector<std::size_t> chosen;
  std::set<int> covered;
  for (int c : needed) {
    if (covered.count(c)) continue;
    for (auto i : pool) {
      const auto& cls = out.entries[i].classes;
      if (std::find(cls.begin(), cls.end(), c) != cls.end() &&
          std::find(chosen.begin(), chosen.end(), i) == chosen.end()) {
        chosen.push_back(i);
        covered.insert(cls.begin(), cls.end());
        break;
      }
    }
  }
  if (chosen.size() > n_labeled) chosen.resize(n_labeled);
  for (auto i : pool) {
    if (chosen.size() >= n_labeled) break;
    if (std::find(chosen.begin(), chosen.end(), i) == chosen.end()) chosen.push_back(i);
  }
  std::set<int> labeled_classes;
  for (auto i : chosen) {
    out.entries[i].split = Split::train_labeled;
    labeled_classes.insert(out.entries[i].classes.begin(), out.entries[i].classes.end());
  }
  for (int c : needed) {
    if (!labeled_classes.count(c))
      throw DataError("split: class " + std::to_string(c) + " is absent from the labeled pool");
  }
  return out;
}

torch::Tensor load_image(const fs::path& path) {
  cv::Mat bgr = cv::imread(path.string(), cv::IMREAD_COLOR);
  if (bgr.empty()) throw DataError("unreadable image " + path.string());
  cv::Mat rgb;
  cv::cvtColor(bgr, rgb, cv::COLOR_BGR2RGB);
  auto t = torch::from_blob(rgb.data, {rgb.rows, rgb.cols, 3}, torch::kUInt8).clone();
  return t.permute({2, 0, 1}).to(torch::kFloat).div_(255.0).contiguous();
}

torch::Tensor load_mask(const fs::path& path, const Palette& palette) {
  cv::Mat raw = read_raw_mask(path);
  auto out = torch::empty({raw.rows, raw.cols}, torch::kLong);
  auto acc = out.accessor<std::int64_t, 2>();
  for (int y = 0; y < raw.rows; ++y) {
    const int* row = raw.ptr<int>(y);
    for (int x = 0; x < raw.cols; ++x) {
      if (!palette.covers(row[x]))
        throw DataError(path.string() + ": mask value " + std::to_string(row[x]) + " is not in the palette");
      acc[y][x] = palette.map(row[x]);
    }
  }
  return out;
}

void save_mask(const fs::path& path, const torch::Tensor& mask) {
  auto m = mask.to(torch::kUInt8).contiguous();
  cv::Mat img(static_cast<int>(m.size(0)), static_cast<int>(m.size(1)), CV_8UC1, m.data_ptr<std::uint8_t>());
  if (!cv::imwrite(path.string(), img)) throw DataError("cannot write " + path.string());
}

void save_overlay(const fs::path& path, const torch::Tensor& image, const torch::Tensor& mask) {
  static const float kColors[][3] = {{0, 0, 0}, {1, 0.2f, 0.2f}, {0.2f, 1, 0.2f}, {0.2f, 0.4f, 1}, {1, 1, 0.2f}};
  auto rgb = image.to(torch::kFloat).clone();
  auto m = mask.to(torch::kLong);
  for (int c = 1; c < 5; ++c) {
    auto sel = (m == c).unsqueeze(0).expand_as(rgb);
    auto color = torch::tensor({kColors[c][0], kColors[c][1], kColors[c][2]}).view({3, 1, 1}).expand_as(rgb);
    rgb = torch::where(sel, 0.5 * rgb + 0.5 * color, rgb);
  }
  auto hwc = (rgb.clamp(0, 1) * 255.0).round().to(torch::kUInt8).permute({1, 2, 0}).contiguous();
  cv::Mat out(static_cast<int>(hwc.size(0)), static_cast<int>(hwc.size(1)), CV_8UC3, hwc.data_ptr<std::uint8_t>());
  cv::Mat bgr;
  cv::cvtColor(out, bgr, cv::COLOR_RGB2BGR);
  if (!cv::imwrite(path.string(), bgr)) throw DataError("cannot write " + path.string());
}

DatasetManifest make_synthetic(const SyntheticSpec& spec, const fs::path& out) {
  if (spec.count < 1 || spec.size < 8 || spec.classes < 2 || spec.classes > 255 || spec.noise < 0.0)
    throw ConfigError("invalid synthetic dataset spec");
  fs::create_directories(out / "images");
  fs::create_directories(out / "masks");
  std::mt19937_64 rng(spec.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> normal(0.0, 1.0);
  const int S = spec.size;

  // one base color per class, spread around the hue circle
  std::vector<std::array<double, 3>> base(spec.classes);
  base[0] = {0.85, 0.70, 0.80};
  for (int c = 1; c < spec.classes; ++c) {
    const double h = 2.0 * M_PI * (c - 1) / std::max(1, spec.classes - 1);
    base[c] = {0.45 + 0.25 * std::cos(h), 0.25 + 0.15 * std::sin(h), 0.55 - 0.15 * std::cos(h)};
  }

  auto draw_region = [&](cv::Mat& mask, int cls) {
    if (spec.family == ShapeFamily::ellipses) {
      const double cy = unit(rng) * S, cx = unit(rng) * S;
      const double ry = S * (0.10 + 0.15 * unit(rng)), rx = S * (0.10 + 0.15 * unit(rng));
      const double th = unit(rng) * M_PI, ct = std::cos(th), st = std::sin(th);
      for (int y = 0; y < S; ++y)
        for (int x = 0; x < S; ++x) {
          const double dy = y + 0.5 - cy, dx = x + 0.5 - cx;
          const double u = (dx * ct + dy * st) / rx, v = (-dx * st + dy * ct) / ry;
          if (u * u + v * v <= 1.0) mask.at<std::uint8_t>(y, x) = static_cast<std::uint8_t>(cls);
        }
    } else {
      double bumps[3][3];
      for (auto& b : bumps) {
        b[0] = unit(rng) * S;
        b[1] = unit(rng) * S;
        b[2] = S * (0.06 + 0.08 * unit(rng));
      }
      for (int y = 0; y < S; ++y)
        for (int x = 0; x < S; ++x) {
          double field = 0.0;
          for (auto& b : bumps) {
            const double dy = y + 0.5 - b[0], dx = x + 0.5 - b[1];
            field += std::exp(-(dx * dx + dy * dy) / (2.0 * b[2] * b[2]));
          }
          if (field > 0.6) mask.at<std::uint8_t>(y, x) = static_cast<std::uint8_t>(cls);
        }
    }
  };

  for (int i = 0; i < spec.count; ++i) {
    cv::Mat mask(S, S, CV_8UC1, cv::Scalar(0));
    for (int c = 1; c < spec.classes; ++c) {
      const int shapes = 1 + static_cast<int>(unit(rng) * 2.0);
      for (int s = 0; s < shapes; ++s) draw_region(mask, c);
    }
    for (int c = 1; c < spec.classes; ++c) {
      for (int attempt = 0; attempt < 16 && cv::countNonZero(mask == c) == 0; ++attempt) draw_region(mask, c);
    }

    std::vector<std::array<double, 3>> color(spec.classes);
    for (int c = 0; c < spec.classes; ++c)
      for (int k = 0; k < 3; ++k) color[c][k] = base[c][k] + spec.appearance_jitter * (2.0 * unit(rng) - 1.0);
    if (spec.illumination > 0.0) {
      const double gain = std::exp(spec.illumination * (2.0 * unit(rng) - 1.0));
      for (auto& col : color)
        for (auto& v : col) v *= gain;
    }
    if (spec.color_shift > 0.0) {
      std::array<double, 3> tint;
      for (auto& t : tint) t = spec.color_shift * (2.0 * unit(rng) - 1.0);
      for (auto& col : color)
        for (int k = 0; k < 3; ++k) col[k] += tint[k];
    }

    cv::Mat img(S, S, CV_8UC3);
    for (int y = 0; y < S; ++y)
      for (int x = 0; x < S; ++x) {
        const int c = mask.at<std::uint8_t>(y, x);
        auto& px = img.at<cv::Vec3b>(y, x);
        for (int k = 0; k < 3; ++k) {
          const double v = std::clamp(color[c][k] + spec.noise * normal(rng), 0.0, 1.0);
          px[2 - k] = static_cast<std::uint8_t>(std::lround(v * 255.0));  // BGR on disk
        }
      }

    char stem[32];
    std::snprintf(stem, sizeof stem, "img_%04d", i);
    if (!cv::imwrite((out / "images" / (std::string(stem) + ".png")).string(), img) ||
        !cv::imwrite((out / "masks" / (std::string(stem) + ".png")).string(), mask))
      throw DataError("cannot write synthetic sample to " + out.string());
  }
  auto manifest = scan(out, Palette::identity(spec.classes), spec.name);
  manifest.save(out / "manifest.json");
  return manifest;
}

}  // namespace mpamatch::datasets
