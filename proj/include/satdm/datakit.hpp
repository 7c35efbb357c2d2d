#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "satdm/png_io.hpp"
#include "satdm/rng.hpp"
#include "satdm/tensor.hpp"

namespace satdm {

/// One dataset unit: an RGB tile, its binary building mask, and provenance.
struct TileRecord {
  ImageU8 image;                   // S x S x 3
  std::vector<std::uint8_t> mask;  // S x S, values in {0, 1}
  std::string id;
  std::string split = "train";
  std::string origin_source = "toy";
  std::size_t origin_x = 0, origin_y = 0;
  std::string augmentation;  // empty for organic tiles

  std::size_t size() const { return image.width; }
  double positive_ratio() const {
    std::size_t pos = 0;
    for (auto v : mask) pos += v;
    return static_cast<double>(pos) / static_cast<double>(mask.size());
  }
};

struct DatasetManifest {
  int version = 1;
  std::size_t tile_size = 0;
  std::size_t count_train = 0, count_test = 0, count_train_augmented = 0;
  double pos_ratio_min = 0, pos_ratio_mean = 0, pos_ratio_max = 0;
  nlohmann::json generator;  // seed / params for toy sets, empty otherwise
  struct Entry {
    std::string id, split, image_file, mask_file, augmentation, origin_source;
    std::size_t origin_x = 0, origin_y = 0;
    double positive_ratio = 0;
  };
  std::vector<Entry> files;
};

inline void to_json(nlohmann::json& j, const DatasetManifest::Entry& e) {
  j = {{"id", e.id},           {"split", e.split},
       {"image", e.image_file}, {"mask", e.mask_file},
       {"augmentation", e.augmentation},
       {"origin", {{"source", e.origin_source}, {"x", e.origin_x}, {"y", e.origin_y}}},
       {"positive_ratio", e.positive_ratio}};
}

inline void from_json(const nlohmann::json& j, DatasetManifest::Entry& e) {
  j.at("id").get_to(e.id);
  j.at("split").get_to(e.split);
  j.at("image").get_to(e.image_file);
  j.at("mask").get_to(e.mask_file);
  e.augmentation = j.value("augmentation", "");
  if (j.contains("origin")) {
    e.origin_source = j["origin"].value("source", "");
    e.origin_x = j["origin"].value("x", 0u);
    e.origin_y = j["origin"].value("y", 0u);
  }
  e.positive_ratio = j.value("positive_ratio", 0.0);
}

inline void to_json(nlohmann::json& j, const DatasetManifest& m) {
  j = {{"version", m.version},
       {"tile_size", m.tile_size},
       {"counts",
        {{"train", m.count_train}, {"test", m.count_test}, {"train_augmented", m.count_train_augmented}}},
       {"positive_ratio", {{"min", m.pos_ratio_min}, {"mean", m.pos_ratio_mean}, {"max", m.pos_ratio_max}}},
       {"generator", m.generator},
       {"files", m.files}};
}

inline void from_json(const nlohmann::json& j, DatasetManifest& m) {
  j.at("version").get_to(m.version);
  j.at("tile_size").get_to(m.tile_size);
  m.count_train = j["counts"].value("train", 0u);
  m.count_test = j["counts"].value("test", 0u);
  m.count_train_augmented = j["counts"].value("train_augmented", 0u);
  m.pos_ratio_min = j["positive_ratio"].value("min", 0.0);
  m.pos_ratio_mean = j["positive_ratio"].value("mean", 0.0);
  m.pos_ratio_max = j["positive_ratio"].value("max", 0.0);
  m.generator = j.value("generator", nlohmann::json::object());
  m.files = j.at("files").get<std::vector<DatasetManifest::Entry>>();
}

// ---------------------------------------------------------------------------
// Toy generator
// ---------------------------------------------------------------------------

/// Color statistics shared between the generator and the classical segmenter.
struct ToyPalette {
  static constexpr std::array<std::array<int, 3>, 4> terrain{
      {{92, 108, 66}, {121, 114, 80}, {104, 126, 84}, {139, 128, 94}}};
  static constexpr std::array<std::array<int, 3>, 4> roofs{
      {{178, 62, 54}, {198, 200, 204}, {70, 76, 96}, {222, 219, 210}}};
  static constexpr double shadow_factor = 0.55;
};

namespace detail {

/// Two-octave value noise in [0, 1], bilinear over a seeded lattice.
class ValueNoise {
 public:
  ValueNoise(Rng rng, std::size_t size, std::size_t cell) : cell_(cell) {
    grid_w_ = size / cell + 2;
    values_.resize(grid_w_ * grid_w_);
    for (auto& v : values_) v = rng.uniform();
  }

  double operator()(double x, double y) const {
    const double gx = x / cell_, gy = y / cell_;
    const std::size_t x0 = static_cast<std::size_t>(gx), y0 = static_cast<std::size_t>(gy);
    const double fx = gx - x0, fy = gy - y0;
    auto at = [&](std::size_t yy, std::size_t xx) { return values_[yy * grid_w_ + xx]; };
    const double a = at(y0, x0) * (1 - fx) + at(y0, x0 + 1) * fx;
    const double b = at(y0 + 1, x0) * (1 - fx) + at(y0 + 1, x0 + 1) * fx;
    return a * (1 - fy) + b * fy;
  }

 private:
  std::size_t cell_, grid_w_;
  std::vector<double> values_;
};

struct Quad {
  std::array<double, 4> xs, ys;

  bool contains(double px, double py) const {
    // convex, consistent winding: all cross products share a sign
    double sign = 0;
    for (int i = 0; i < 4; ++i) {
      const int j = (i + 1) % 4;
      const double cross = (xs[j] - xs[i]) * (py - ys[i]) - (ys[j] - ys[i]) * (px - xs[i]);
      if (cross == 0) continue;
      if (sign == 0) {
        sign = cross;
      } else if ((sign > 0) != (cross > 0)) {
        return false;
      }
    }
    return true;
  }

  Quad translated(double dx, double dy) const {
    Quad q = *this;
    for (auto& v : q.xs) v += dx;
    for (auto& v : q.ys) v += dy;
    return q;
  }
};

inline Quad make_building(Rng& rng, std::size_t size) {
  const double min_side = std::max(4.0, size / 6.4);  // 5 px at size 32
  const double max_side = size / 2.7;                 // ~12 px at size 32
  const double w = min_side + rng.uniform() * (max_side - min_side);
  const double h = min_side + rng.uniform() * (max_side - min_side);
  const double angle = rng.bernoulli(0.5) ? 0.0 : rng.uniform() * 1.57079632679489662;
  const double margin = 1.0;
  const double cx = margin + w / 2 + rng.uniform() * (size - w - 2 * margin);
  const double cy = margin + h / 2 + rng.uniform() * (size - h - 2 * margin);
  const double ca = std::cos(angle), sa = std::sin(angle);
  Quad q;
  const double hx[4] = {-w / 2, w / 2, w / 2, -w / 2};
  const double hy[4] = {-h / 2, -h / 2, h / 2, h / 2};
  for (int i = 0; i < 4; ++i) {
    q.xs[i] = cx + hx[i] * ca - hy[i] * sa;
    q.ys[i] = cy + hx[i] * sa + hy[i] * ca;
  }
  return q;
}

}  // namespace detail

/// One procedural tile: value-noise terrain, 1-6 rectangular buildings with
/// uniform roof colors, a fixed-direction shadow per building, and the exact
/// rasterized footprint union as the mask. Fully determined by `rng`.
inline TileRecord generate_toy_tile(Rng rng, std::size_t size) {
  for (std::uint64_t attempt = 0;; ++attempt) {
    Rng r = rng.fork(attempt);
    TileRecord rec;
    rec.image = ImageU8::make(size, size, 3);
    rec.mask.assign(size * size, 0);

    detail::ValueNoise coarse(r.fork(1), size, std::max<std::size_t>(8, size / 4));
    detail::ValueNoise fine(r.fork(2), size, std::max<std::size_t>(4, size / 8));
    detail::ValueNoise palette_field(r.fork(3), size, std::max<std::size_t>(16, size / 2));
    Rng jitter = r.fork(4);

    for (std::size_t y = 0; y < size; ++y) {
      for (std::size_t x = 0; x < size; ++x) {
        const double n = 0.65 * coarse(x + 0.5, y + 0.5) + 0.35 * fine(x + 0.5, y + 0.5);
        const std::size_t pi = std::min<std::size_t>(
            ToyPalette::terrain.size() - 1,
            static_cast<std::size_t>(palette_field(x + 0.5, y + 0.5) * ToyPalette::terrain.size()));
        const auto& base = ToyPalette::terrain[pi];
        const double shade = 0.8 + 0.4 * n;
        for (std::size_t c = 0; c < 3; ++c) {
          const double v = base[c] * shade + (jitter.uniform() - 0.5) * 20.0;
          rec.image.at(y, x, c) = static_cast<std::uint8_t>(std::clamp(v, 0.0, 255.0));
        }
      }
    }

    Rng br = r.fork(5);
    const int n_buildings = 1 + static_cast<int>(br.uniform_int(0, 5));
    std::vector<detail::Quad> footprints;
    std::vector<std::array<int, 3>> colors;
    for (int b = 0; b < n_buildings; ++b) {
      footprints.push_back(detail::make_building(br, size));
      auto color = ToyPalette::roofs[br.uniform_int(0, ToyPalette::roofs.size() - 1)];
      for (auto& c : color) c = std::clamp<int>(c + static_cast<int>(br.uniform_int(-8, 8)), 0, 255);
      colors.push_back(color);
    }

    // shadows first (darken terrain), then roofs in order, mask = footprints
    const double shadow_off = std::max(2.0, size * 3.0 / 32.0);
    for (const auto& fp : footprints) {
      const auto sh = fp.translated(shadow_off, shadow_off);
      for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x)
          if (sh.contains(x + 0.5, y + 0.5))
            for (std::size_t c = 0; c < 3; ++c)
              rec.image.at(y, x, c) =
                  static_cast<std::uint8_t>(rec.image.at(y, x, c) * ToyPalette::shadow_factor);
    }
    for (std::size_t b = 0; b < footprints.size(); ++b) {
      for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x)
          if (footprints[b].contains(x + 0.5, y + 0.5)) {
            for (std::size_t c = 0; c < 3; ++c)
              rec.image.at(y, x, c) = static_cast<std::uint8_t>(colors[b][c]);
            rec.mask[y * size + x] = 1;
          }
    }

    if (rec.positive_ratio() >= 0.01) return rec;  // the 1% positive-class floor
  }
}

// ---------------------------------------------------------------------------
// Pipeline operations
// ---------------------------------------------------------------------------

/// Sliding-window tiling: stride = size * (1 - overlap_fraction), top-left
/// anchored, trailing partial windows dropped.
inline std::vector<TileRecord> tile(const ImageU8& image, const std::vector<std::uint8_t>& mask,
                                    std::size_t size, double overlap_fraction,
                                    const std::string& source_id = "raster") {
  if (overlap_fraction < 0.0 || overlap_fraction >= 1.0) {
    throw ContractError("tile: overlap_fraction must be in [0, 1)");
  }
  if (mask.size() != image.width * image.height) throw ContractError("tile: mask size mismatch");
  std::vector<TileRecord> out;
  if (image.width < size || image.height < size) {
    std::cerr << "warning: image " << image.width << "x" << image.height
              << " smaller than tile size " << size << ", no tiles emitted\n";
    return out;
  }
  const std::size_t stride =
      std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(size * (1.0 - overlap_fraction))));
  for (std::size_t y = 0; y + size <= image.height; y += stride) {
    for (std::size_t x = 0; x + size <= image.width; x += stride) {
      TileRecord rec;
      rec.image = ImageU8::make(size, size, image.channels);
      rec.mask.assign(size * size, 0);
      for (std::size_t yy = 0; yy < size; ++yy)
        for (std::size_t xx = 0; xx < size; ++xx) {
          for (std::size_t c = 0; c < image.channels; ++c)
            rec.image.at(yy, xx, c) = image.at(y + yy, x + xx, c);
          rec.mask[yy * size + xx] = mask[(y + yy) * image.width + (x + xx)];
        }
      rec.origin_source = source_id;
      rec.origin_x = x;
      rec.origin_y = y;
      rec.id = source_id + "_" + std::to_string(x) + "_" + std::to_string(y);
      out.push_back(std::move(rec));
    }
  }
  return out;
}

/// Pixel-area 2x downsampling: image pixels average their 2x2 block, the
/// mask takes the block max (thin footprints survive), re-binarized.
inline TileRecord downsample_area2x(const TileRecord& rec) {
  const std::size_t s = rec.size();
  if (s % 2 != 0) throw ContractError("downsample_area2x: extents must be even");
  TileRecord out = rec;
  const std::size_t hs = s / 2;
  out.image = ImageU8::make(hs, hs, rec.image.channels);
  out.mask.assign(hs * hs, 0);
  for (std::size_t y = 0; y < hs; ++y)
    for (std::size_t x = 0; x < hs; ++x) {
      for (std::size_t c = 0; c < rec.image.channels; ++c) {
        const int sum = rec.image.at(2 * y, 2 * x, c) + rec.image.at(2 * y, 2 * x + 1, c) +
                        rec.image.at(2 * y + 1, 2 * x, c) + rec.image.at(2 * y + 1, 2 * x + 1, c);
        out.image.at(y, x, c) = static_cast<std::uint8_t>((sum + 2) / 4);
      }
      const std::uint8_t m =
          std::max(std::max(rec.mask[2 * y * s + 2 * x], rec.mask[2 * y * s + 2 * x + 1]),
                   std::max(rec.mask[(2 * y + 1) * s + 2 * x], rec.mask[(2 * y + 1) * s + 2 * x + 1]));
      out.mask[y * hs + x] = m ? 1 : 0;
    }
  return out;
}

/// Drops records whose positive-class ratio is below min_ratio.
inline std::vector<TileRecord> filter_min_positive(std::vector<TileRecord> records,
                                                   double min_ratio = 0.01) {
  std::vector<TileRecord> out;
  out.reserve(records.size());
  for (auto& r : records) {
    if (r.positive_ratio() >= min_ratio) out.push_back(std::move(r));
  }
  return out;
}

/// k quarter-turns counterclockwise plus optional vertical flip, applied to
/// image and mask identically.
inline TileRecord transform_tile(const TileRecord& rec, int rot90_k, bool vflip) {
  const std::size_t s = rec.size();
  if (rec.image.width != rec.image.height) throw ContractError("transform_tile: tiles must be square");
  TileRecord out = rec;
  rot90_k = ((rot90_k % 4) + 4) % 4;
  auto src_index = [&](std::size_t y, std::size_t x) {
    // invert the output transform to find the source pixel
    std::size_t yy = y, xx = x;
    if (vflip) yy = s - 1 - yy;  // flip applied last; undo it first
    for (int k = 0; k < rot90_k; ++k) {
      // inverse of a CCW quarter turn is CW: (y, x) <- (x, s-1-y)
      const std::size_t ny = xx, nx = s - 1 - yy;
      yy = ny;
      xx = nx;
    }
    return std::pair(yy, xx);
  };
  for (std::size_t y = 0; y < s; ++y)
    for (std::size_t x = 0; x < s; ++x) {
      const auto [sy, sx] = src_index(y, x);
      for (std::size_t c = 0; c < rec.image.channels; ++c)
        out.image.at(y, x, c) = rec.image.at(sy, sx, c);
      out.mask[y * s + x] = rec.mask[sy * s + sx];
    }
  std::string tag;
  if (rot90_k) tag += "rot90x" + std::to_string(rot90_k);
  if (vflip) tag += tag.empty() ? "vflip" : "+vflip";
  out.augmentation = tag;
  return out;
}

/// Train/test assignment by source hash: every record from one origin
/// source lands in the same split, so overlapping tiles never straddle
/// the boundary.
inline void assign_split_by_source(std::vector<TileRecord>& records, double test_fraction,
                                   std::uint64_t seed) {
  for (auto& rec : records) {
    std::uint64_t h = Rng::mix(seed ^ 0x5B17ULL);
    for (char ch : rec.origin_source) h = Rng::mix(h ^ static_cast<std::uint64_t>(ch));
    const double u = static_cast<double>(h >> 11) * 0x1.0p-53;
    rec.split = u < test_fraction ? "test" : "train";
  }
}

/// All seven non-identity rot90/vflip transforms of a record.
inline std::vector<TileRecord> augment(const TileRecord& rec) {
  std::vector<TileRecord> out;
  for (int k = 0; k < 4; ++k) {
    for (int f = 0; f < 2; ++f) {
      if (k == 0 && f == 0) continue;
      out.push_back(transform_tile(rec, k, f != 0));
    }
  }
  return out;
}

// ---------------------------------------------------------------------------
// Encoding
// ---------------------------------------------------------------------------

/// Images to [-1, 1]; masks to a 2-channel one-hot SegMap
/// (channel 0 background, channel 1 building).
template <typename S>
std::pair<Tensor<S>, Tensor<S>> encode_batch(const std::vector<const TileRecord*>& records) {
  if (records.empty()) throw DataError("encode_batch: empty batch");
  const std::size_t s = records[0]->size();
  const std::size_t n = records.size();
  auto images = Tensor<S>::zeros({n, 3, s, s});
  auto segmaps = Tensor<S>::zeros({n, 2, s, s});
  auto id = images.mutable_data();
  auto sd = segmaps.mutable_data();
  for (std::size_t i = 0; i < n; ++i) {
    const auto& r = *records[i];
    if (r.size() != s) throw DataError("encode_batch: mixed tile sizes");
    for (std::size_t c = 0; c < 3; ++c)
      for (std::size_t p = 0; p < s * s; ++p) {
        const std::uint8_t px =
            r.image.channels == 3 ? r.image.pixels[p * 3 + c] : r.image.pixels[p];
        id[((i * 3 + c) * s * s) + p] = static_cast<S>(px / 127.5 - 1.0);
      }
    for (std::size_t p = 0; p < s * s; ++p) {
      const std::uint8_t m = r.mask[p];
      if (m != 0 && m != 1) throw DataError("encode_batch: mask values must be 0 or 1");
      sd[((i * 2 + 0) * s * s) + p] = static_cast<S>(m == 0 ? 1 : 0);
      sd[((i * 2 + 1) * s * s) + p] = static_cast<S>(m);
    }
  }
  return {std::move(images), std::move(segmaps)};
}

/// [-1, 1] float image back to 8-bit RGB.
template <typename S>
ImageU8 decode_image(const Tensor<S>& img, std::size_t item) {
  const std::size_t c = img.dim(1), h = img.dim(2), w = img.dim(3);
  ImageU8 out = ImageU8::make(w, h, c == 1 ? 1 : 3);
  auto d = img.data();
  for (std::size_t ch = 0; ch < out.channels; ++ch)
    for (std::size_t p = 0; p < h * w; ++p) {
      const double v = std::clamp(static_cast<double>(d[((item * c + ch) * h * w) + p]), -1.0, 1.0);
      out.pixels[p * out.channels + ch] = static_cast<std::uint8_t>(std::lround((v + 1.0) * 127.5));
    }
  return out;
}

/// Binary mask to a one-hot segmap tensor for a single item.
template <typename S>
Tensor<S> segmap_from_mask(const std::vector<std::uint8_t>& mask, std::size_t s) {
  auto seg = Tensor<S>::zeros({1, 2, s, s});
  auto d = seg.mutable_data();
  for (std::size_t p = 0; p < s * s; ++p) {
    d[p] = static_cast<S>(mask[p] == 0 ? 1 : 0);
    d[s * s + p] = static_cast<S>(mask[p] ? 1 : 0);
  }
  return seg;
}

// ---------------------------------------------------------------------------
// Dataset directory I/O
// ---------------------------------------------------------------------------

inline void write_dataset(const std::filesystem::path& dir, const std::vector<TileRecord>& records,
                          std::size_t tile_size, nlohmann::json generator_info) {
  namespace fs = std::filesystem;
  fs::create_directories(dir / "images");
  fs::create_directories(dir / "masks");
  DatasetManifest manifest;
  manifest.tile_size = tile_size;
  manifest.generator = std::move(generator_info);
  double rmin = 1.0, rmax = 0.0, rsum = 0.0;
  for (const auto& rec : records) {
    const std::string img_file = "images/" + rec.id + ".png";
    const std::string mask_file = "masks/" + rec.id + ".png";
    write_png(dir / img_file, rec.image);
    ImageU8 m = ImageU8::make(rec.size(), rec.size(), 1);
    for (std::size_t p = 0; p < m.pixels.size(); ++p) m.pixels[p] = rec.mask[p] ? 255 : 0;
    write_png(dir / mask_file, m);
    const double ratio = rec.positive_ratio();
    rmin = std::min(rmin, ratio);
    rmax = std::max(rmax, ratio);
    rsum += ratio;
    if (rec.split == "test") {
      ++manifest.count_test;
    } else if (rec.augmentation.empty()) {
      ++manifest.count_train;
    } else {
      ++manifest.count_train_augmented;
    }
    manifest.files.push_back({rec.id, rec.split, img_file, mask_file, rec.augmentation,
                              rec.origin_source, rec.origin_x, rec.origin_y, ratio});
  }
  manifest.pos_ratio_min = records.empty() ? 0 : rmin;
  manifest.pos_ratio_max = rmax;
  manifest.pos_ratio_mean = records.empty() ? 0 : rsum / records.size();
  std::ofstream out(dir / "manifest.json");
  out << nlohmann::json(manifest).dump(2) << "\n";
}

/// Procedural dataset: n_tiles organic tiles plus `augment_count` augmented
/// copies of uniformly chosen train tiles. Byte-reproducible from the seed.
inline DatasetManifest generate_toy_dataset(std::size_t n_tiles, std::size_t tile_size,
                                            std::uint64_t seed, const std::filesystem::path& out_dir,
                                            std::size_t augment_count = 0,
                                            double test_fraction = 0.1) {
  if (tile_size != 32 && tile_size != 64 && tile_size != 128) {
    throw ContractError("generate_toy_dataset: tile_size must be 32, 64, or 128");
  }
  Rng base(seed);
  std::vector<TileRecord> records;
  records.reserve(n_tiles + augment_count);
  std::vector<std::size_t> train_indices;
  char idbuf[32];
  for (std::size_t i = 0; i < n_tiles; ++i) {
    auto rec = generate_toy_tile(base.fork(0x7469 /*ti*/).fork(i), tile_size);
    std::snprintf(idbuf, sizeof idbuf, "tile_%06zu", i);
    rec.id = idbuf;
    rec.split = base.fork(0x7370 /*sp*/).fork(i).uniform() < test_fraction ? "test" : "train";
    if (rec.split == "train") train_indices.push_back(records.size());
    records.push_back(std::move(rec));
  }
  // augmentation policy: uniform random over train tiles and the seven
  // non-identity transforms; recorded in the manifest
  Rng aug_rng = base.fork(0x6175 /*au*/);
  for (std::size_t a = 0; a < augment_count && !train_indices.empty(); ++a) {
    const auto& src = records[train_indices[aug_rng.uniform_int(0, train_indices.size() - 1)]];
    const int variant = 1 + static_cast<int>(aug_rng.uniform_int(0, 6));
    auto rec = transform_tile(src, variant / 2, variant % 2 != 0);
    std::snprintf(idbuf, sizeof idbuf, "aug_%06zu", a);
    rec.id = idbuf;
    rec.split = "train";
    rec.origin_source = src.id;
    records.push_back(std::move(rec));
  }
  nlohmann::json gen = {{"kind", "toy"},
                        {"seed", seed},
                        {"n_tiles", n_tiles},
                        {"tile_size", tile_size},
                        {"augment_count", augment_count},
                        {"augment_policy", "uniform_random_over_train"},
                        {"test_fraction", test_fraction}};
  write_dataset(out_dir, records, tile_size, gen);
  std::ifstream in(out_dir / "manifest.json");
  nlohmann::json j;
  in >> j;
  return j.get<DatasetManifest>();
}

struct Dataset {
  DatasetManifest manifest;
  std::vector<TileRecord> records;

  std::vector<const TileRecord*> split(const std::string& name) const {
    std::vector<const TileRecord*> out;
    for (const auto& r : records)
      if (r.split == name) out.push_back(&r);
    return out;
  }
};

inline Dataset load_dataset(const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  const auto manifest_path = dir / "manifest.json";
  if (!fs::exists(manifest_path)) throw DataError("dataset: missing " + manifest_path.string());
  Dataset ds;
  try {
    std::ifstream in(manifest_path);
    nlohmann::json j;
    in >> j;
    ds.manifest = j.get<DatasetManifest>();
  } catch (const nlohmann::json::exception& e) {
    throw DataError("dataset: unparsable manifest: " + std::string(e.what()));
  }
  for (const auto& entry : ds.manifest.files) {
    TileRecord rec;
    rec.id = entry.id;
    rec.split = entry.split;
    rec.augmentation = entry.augmentation;
    rec.origin_source = entry.origin_source;
    rec.origin_x = entry.origin_x;
    rec.origin_y = entry.origin_y;
    rec.image = read_png(dir / entry.image_file);
    auto mask_img = read_png(dir / entry.mask_file);
    if (mask_img.channels != 1 || mask_img.width != rec.image.width ||
        mask_img.height != rec.image.height) {
      throw DataError("dataset: mask/image mismatch for " + entry.id);
    }
    rec.mask.resize(mask_img.pixels.size());
    for (std::size_t p = 0; p < rec.mask.size(); ++p) rec.mask[p] = mask_img.pixels[p] >= 128 ? 1 : 0;
    if (rec.image.width != ds.manifest.tile_size) {
      throw DataError("dataset: tile size mismatch for " + entry.id);
    }
    ds.records.push_back(std::move(rec));
  }
  return ds;
}

}  // namespace satdm
