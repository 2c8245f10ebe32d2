#pragma once

// Fundus image and mask ingestion, resizing to the 256x256 working grid, and
// balanced extraction of labelled 32x32 patches.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <tuple>
#include <vector>

#include <json.hpp>

#include "exuseg/container.hpp"
#include "exuseg/image_io.hpp"
#include "exuseg/log.hpp"
#include "exuseg/rng.hpp"
#include "exuseg/tensor.hpp"

namespace exuseg {

namespace geom {
inline constexpr std::size_t kWorking = 256;
inline constexpr std::size_t kPatch = 32;
// A patch's labelled pixel sits at local (16,16), i.e. 1-indexed (17,17).
inline constexpr std::size_t kHalf = 16;
inline constexpr std::size_t kCenterMin = kHalf;                // 16
inline constexpr std::size_t kCenterMax = kWorking - kHalf - 1;  // 239, inclusive
inline constexpr std::size_t kCentersPerAxis = kCenterMax - kCenterMin + 1;  // 224
inline constexpr std::size_t kPatchValues = kPatch * kPatch * 3;
}  // namespace geom

struct FundusImage {
  std::string id;
  Tensor pixels;  // [H, W, 3], values in [0, 1]
  std::size_t original_height = 0;
  std::size_t original_width = 0;

  std::size_t height() const { return pixels.dim(0); }
  std::size_t width() const { return pixels.dim(1); }
};

struct GroundTruthMask {
  std::string id;
  Tensor pixels;  // [H, W], values in {0, 1}
  std::size_t original_height = 0;
  std::size_t original_width = 0;

  std::size_t height() const { return pixels.dim(0); }
  std::size_t width() const { return pixels.dim(1); }
};

inline FundusImage image_from_8bit(std::string id, const Image8& im) {
  if (im.height < geom::kPatch || im.width < geom::kPatch)
    throw FormatError("image '" + id + "' is smaller than 32x32");
  FundusImage out{std::move(id), Tensor({im.height, im.width, 3}), im.height, im.width};
  for (std::size_t r = 0; r < im.height; ++r)
    for (std::size_t c = 0; c < im.width; ++c)
      for (std::size_t ch = 0; ch < 3; ++ch)
        out.pixels.at(r, c, ch) = static_cast<real>(im.at(r, c, im.channels == 3 ? ch : 0)) / real{255};
  return out;
}

// Multi-channel masks take the per-pixel maximum; set iff value/255 > 0.5.
inline GroundTruthMask mask_from_8bit(std::string id, const Image8& im) {
  GroundTruthMask out{std::move(id), Tensor({im.height, im.width}), im.height, im.width};
  for (std::size_t r = 0; r < im.height; ++r)
    for (std::size_t c = 0; c < im.width; ++c) {
      std::uint8_t v = 0;
      for (std::size_t ch = 0; ch < im.channels; ++ch) v = std::max(v, im.at(r, c, ch));
      out.pixels.at(r, c) = v / 255.0 > 0.5 ? 1 : 0;
    }
  return out;
}

inline FundusImage load_image(const std::filesystem::path& path) {
  return image_from_8bit(path.stem().string(), read_image(path));
}

inline GroundTruthMask load_mask(const std::filesystem::path& path) {
  return mask_from_8bit(path.stem().string(), read_image(path));
}

inline void check_pair(const FundusImage& img, const GroundTruthMask& mask) {
  if (img.height() != mask.height() || img.width() != mask.width())
    throw ShapeError("image '" + img.id + "' is " + std::to_string(img.height()) + "x" + std::to_string(img.width()) +
                     " but its mask is " + std::to_string(mask.height()) + "x" + std::to_string(mask.width()));
}

inline real quantize8(real v) { return std::round(std::clamp<real>(v, 0, 1) * 255) / 255; }

// Bilinear resize with half-pixel centres, then rounding to the 8-bit grid
// (the working image is an 8-bit image, as written by common resize tools).
inline FundusImage resize_to_working(const FundusImage& img, std::size_t size = geom::kWorking) {
  const std::size_t h = img.height(), w = img.width();
  FundusImage out{img.id, Tensor({size, size, 3}), img.original_height, img.original_width};
  auto coord = [](std::size_t dst, std::size_t src_n, std::size_t dst_n) {
    const double s = (static_cast<double>(dst) + 0.5) * static_cast<double>(src_n) / static_cast<double>(dst_n) - 0.5;
    const double c = std::clamp(s, 0.0, static_cast<double>(src_n - 1));
    const auto i0 = static_cast<std::size_t>(std::floor(c));
    const std::size_t i1 = std::min(i0 + 1, src_n - 1);
    return std::tuple<std::size_t, std::size_t, double>{i0, i1, c - static_cast<double>(i0)};
  };
  for (std::size_t r = 0; r < size; ++r) {
    const auto [r0, r1, fr] = coord(r, h, size);
    for (std::size_t c = 0; c < size; ++c) {
      const auto [c0, c1, fc] = coord(c, w, size);
      for (std::size_t ch = 0; ch < 3; ++ch) {
        const double top = img.pixels.at(r0, c0, ch) * (1 - fc) + img.pixels.at(r0, c1, ch) * fc;
        const double bot = img.pixels.at(r1, c0, ch) * (1 - fc) + img.pixels.at(r1, c1, ch) * fc;
        out.pixels.at(r, c, ch) = quantize8(static_cast<real>(top * (1 - fr) + bot * fr));
      }
    }
  }
  return out;
}

// Nearest-neighbour source index for destination `dst` of `dst_n` samples.
inline std::size_t nearest_source(std::size_t dst, std::size_t src_n, std::size_t dst_n) {
  return std::min((2 * dst + 1) * src_n / (2 * dst_n), src_n - 1);
}

inline GroundTruthMask resize_mask(const GroundTruthMask& mask, std::size_t size = geom::kWorking) {
  GroundTruthMask out{mask.id, Tensor({size, size}), mask.original_height, mask.original_width};
  for (std::size_t r = 0; r < size; ++r) {
    const std::size_t sr = nearest_source(r, mask.height(), size);
    for (std::size_t c = 0; c < size; ++c)
      out.pixels.at(r, c) = mask.pixels.at(sr, nearest_source(c, mask.width(), size));
  }
  return out;
}

enum class PatchClass : std::uint8_t { background = 0, exudate = 1 };

inline const char* class_name(PatchClass c) { return c == PatchClass::exudate ? "exudate" : "background"; }

struct PatchCenter {
  std::size_t row = 0;
  std::size_t col = 0;
  friend bool operator==(const PatchCenter&, const PatchCenter&) = default;
  friend auto operator<=>(const PatchCenter&, const PatchCenter&) = default;
};

// All centres whose 32x32 patch fits inside the working image, row-major.
inline std::vector<PatchCenter> candidate_centers() {
  std::vector<PatchCenter> out;
  out.reserve(geom::kCentersPerAxis * geom::kCentersPerAxis);
  for (std::size_t r = geom::kCenterMin; r <= geom::kCenterMax; ++r)
    for (std::size_t c = geom::kCenterMin; c <= geom::kCenterMax; ++c) out.push_back({r, c});
  return out;
}

struct PatchRecord {
  std::array<std::uint8_t, geom::kPatchValues> pixels{};  // 32x32x3, 8-bit
  PatchClass label = PatchClass::background;
  std::string source_id;
  PatchCenter center;

  // Pixels as a [32,32,3] tensor in [0,1].
  Tensor tensor() const {
    Tensor t({geom::kPatch, geom::kPatch, 3});
    for (std::size_t i = 0; i < pixels.size(); ++i) t[i] = static_cast<real>(pixels[i]) / real{255};
    return t;
  }

  // background = [1,0], exudate = [0,1]
  std::array<real, 2> one_hot() const {
    return label == PatchClass::exudate ? std::array<real, 2>{0, 1} : std::array<real, 2>{1, 0};
  }

  friend bool operator==(const PatchRecord&, const PatchRecord&) = default;
};

// Reported when a class partition cannot supply `requested` distinct centres.
struct ExtractionWarning {
  std::string source_id;
  PatchClass cls = PatchClass::exudate;
  std::size_t requested = 0;
  std::size_t available = 0;
  bool with_replacement = false;

  std::string message() const {
    std::string m = "image '" + source_id + "': " + std::to_string(available) + " " + class_name(cls) +
                    " centres available, " + std::to_string(requested) + " requested";
    return m + (with_replacement ? "; sampled with replacement" : "; no patches of this class");
  }
  friend bool operator==(const ExtractionWarning&, const ExtractionWarning&) = default;
};

struct PatchSet {
  std::vector<PatchRecord> records;
  std::vector<ExtractionWarning> warnings;
  nlohmann::json provenance = nlohmann::json::object();

  std::size_t size() const { return records.size(); }

  std::array<std::size_t, 2> class_counts() const {
    std::array<std::size_t, 2> n{0, 0};
    for (const auto& r : records) ++n[static_cast<std::size_t>(r.label)];
    return n;
  }

  void append(PatchSet&& other) {
    records.insert(records.end(), std::make_move_iterator(other.records.begin()),
                   std::make_move_iterator(other.records.end()));
    warnings.insert(warnings.end(), other.warnings.begin(), other.warnings.end());
  }
};

// Crops the 32x32 patch whose local (16,16) pixel is `center`.
inline std::array<std::uint8_t, geom::kPatchValues> crop_patch(const FundusImage& img, PatchCenter center) {
  if (center.row < geom::kHalf || center.col < geom::kHalf || center.row + geom::kHalf > img.height() ||
      center.col + geom::kHalf > img.width())
    throw ShapeError("patch centre (" + std::to_string(center.row) + "," + std::to_string(center.col) +
                     ") does not fit inside the image");
  std::array<std::uint8_t, geom::kPatchValues> out{};
  std::size_t k = 0;
  for (std::size_t r = center.row - geom::kHalf; r < center.row + geom::kHalf; ++r)
    for (std::size_t c = center.col - geom::kHalf; c < center.col + geom::kHalf; ++c)
      for (std::size_t ch = 0; ch < 3; ++ch)
        out[k++] = static_cast<std::uint8_t>(std::lround(std::clamp<real>(img.pixels.at(r, c, ch), 0, 1) * 255));
  return out;
}

// Samples `per_class` background and `per_class` exudate patches, classes
// decided by the mask at the centre. Partitions smaller than `per_class` are
// sampled with replacement; empty partitions yield no patches. Both cases
// are recorded as warnings.
inline PatchSet extract_balanced(const FundusImage& img, const GroundTruthMask& mask, std::size_t per_class, Rng rng) {
  if (img.height() != geom::kWorking || img.width() != geom::kWorking)
    throw ShapeError("extract_balanced: image '" + img.id + "' must be resized to 256x256 first");
  check_pair(img, mask);
  std::array<std::vector<PatchCenter>, 2> part;
  for (const PatchCenter& c : candidate_centers())
    part[mask.pixels.at(c.row, c.col) == 1 ? 1 : 0].push_back(c);

  PatchSet out;
  for (std::size_t cls = 0; cls < 2; ++cls) {
    auto& pool = part[cls];
    const auto label = static_cast<PatchClass>(cls);
    Rng stream = rng.split(class_name(label));
    std::vector<PatchCenter> chosen;
    if (pool.size() >= per_class) {
      for (std::size_t i = 0; i < per_class; ++i) {
        const std::size_t j = i + static_cast<std::size_t>(stream.below(pool.size() - i));
        std::swap(pool[i], pool[j]);
        chosen.push_back(pool[i]);
      }
    } else if (!pool.empty()) {
      for (std::size_t i = 0; i < per_class; ++i) chosen.push_back(pool[static_cast<std::size_t>(stream.below(pool.size()))]);
      out.warnings.push_back({img.id, label, per_class, pool.size(), true});
    } else if (per_class > 0) {
      out.warnings.push_back({img.id, label, per_class, 0, false});
    }
    for (const PatchCenter& c : chosen) out.records.push_back({crop_patch(img, c), label, img.id, c});
  }
  for (const auto& w : out.warnings) log::warn(w.message());
  return out;
}

// ---- archive -------------------------------------------------------------------

inline constexpr std::uint32_t kPatchArchiveVersion = 1;

inline void to_json(nlohmann::json& j, const ExtractionWarning& w) {
  j = {{"source", w.source_id}, {"class", class_name(w.cls)}, {"requested", w.requested},
       {"available", w.available}, {"with_replacement", w.with_replacement}, {"message", w.message()}};
}

inline void from_json(const nlohmann::json& j, ExtractionWarning& w) {
  w.source_id = j.at("source").get<std::string>();
  w.cls = j.at("class").get<std::string>() == "exudate" ? PatchClass::exudate : PatchClass::background;
  w.requested = j.at("requested").get<std::size_t>();
  w.available = j.at("available").get<std::size_t>();
  w.with_replacement = j.at("with_replacement").get<bool>();
}

inline std::vector<std::uint8_t> encode_patchset(const PatchSet& ps) {
  std::vector<std::string> sources;
  std::map<std::string, std::size_t> index;
  for (const auto& r : ps.records)
    if (index.emplace(r.source_id, sources.size()).second) sources.push_back(r.source_id);
  if (sources.size() > 0xFFFF) throw Error("patch archive supports at most 65535 source images");

  const auto counts = ps.class_counts();
  Container c;
  c.magic = "EXPS";
  c.version = kPatchArchiveVersion;
  c.manifest = {{"format", "EXPS"},
                {"version", kPatchArchiveVersion},
                {"record_count", ps.records.size()},
                {"patch_shape", {geom::kPatch, geom::kPatch, 3}},
                {"pixel_encoding", "u8, value/255"},
                {"record_layout", "u16 source index, u16 centre row, u16 centre col, u8 label, 3072 x u8 pixels (HWC)"},
                {"labels", {{"background", {1, 0}}, {"exudate", {0, 1}}}},
                {"class_counts", {{"background", counts[0]}, {"exudate", counts[1]}}},
                {"sources", sources},
                {"warnings", ps.warnings},
                {"provenance", ps.provenance}};
  ByteWriter w;
  w.reserve(ps.records.size() * (7 + geom::kPatchValues));
  for (const auto& r : ps.records) {
    w.u16(static_cast<std::uint16_t>(index.at(r.source_id)));
    w.u16(static_cast<std::uint16_t>(r.center.row));
    w.u16(static_cast<std::uint16_t>(r.center.col));
    w.u8(static_cast<std::uint8_t>(r.label));
    w.bytes(r.pixels.data(), r.pixels.size());
  }
  c.payload = w.take();
  return encode_container(c);
}

inline PatchSet decode_patchset(const std::vector<std::uint8_t>& bytes, const std::string& origin) {
  const Container c = decode_container(bytes, "EXPS", kPatchArchiveVersion, origin);
  PatchSet ps;
  try {
    const auto sources = c.manifest.at("sources").get<std::vector<std::string>>();
    const auto n = c.manifest.at("record_count").get<std::size_t>();
    if (c.payload.size() != n * (7 + geom::kPatchValues))
      throw CorruptionError(origin + ": payload size does not match record count");
    ByteReader r(c.payload.data(), c.payload.size());
    ps.records.resize(n);
    for (auto& rec : ps.records) {
      const std::size_t src = r.u16();
      if (src >= sources.size()) throw CorruptionError(origin + ": source index out of range");
      rec.source_id = sources[src];
      rec.center.row = r.u16();
      rec.center.col = r.u16();
      const std::uint8_t label = r.u8();
      if (label > 1) throw CorruptionError(origin + ": invalid label byte");
      rec.label = static_cast<PatchClass>(label);
      const std::uint8_t* px = r.take(geom::kPatchValues);
      std::copy(px, px + geom::kPatchValues, rec.pixels.begin());
    }
    ps.warnings = c.manifest.at("warnings").get<std::vector<ExtractionWarning>>();
    ps.provenance = c.manifest.at("provenance");
    const auto counts = ps.class_counts();
    const auto& cc = c.manifest.at("class_counts");
    if (cc.at("background").get<std::size_t>() != counts[0] || cc.at("exudate").get<std::size_t>() != counts[1])
      throw CorruptionError(origin + ": manifest class counts disagree with records");
  } catch (const nlohmann::json::exception& e) {
    throw CorruptionError(origin + ": malformed manifest: " + e.what());
  }
  return ps;
}

inline void save_patchset(const PatchSet& ps, const std::filesystem::path& path) { write_file(path, encode_patchset(ps)); }

inline PatchSet load_patchset(const std::filesystem::path& path) { return decode_patchset(read_file(path), path.string()); }

}  // namespace exuseg
