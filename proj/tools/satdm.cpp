// satdm: conditional diffusion on semantic layouts, desk scale.
// Subcommands: make-data, train, sample, eval, inpaint, interpolate, similar.

#include <CLI11.hpp>
#include <json.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include "satdm/checkpoint.hpp"
#include "satdm/common.hpp"
#include "satdm/datakit.hpp"
#include "satdm/evalkit.hpp"
#include "satdm/png_io.hpp"
#include "satdm/sampler.hpp"
#include "satdm/trainer.hpp"
#include "satdm/unet.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using Scalar = float;

namespace {

constexpr int kExitOk = 0;
constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitNumerical = 3;

void write_run_json(const fs::path& out_dir, json run) {
  fs::create_directories(out_dir);
  std::ofstream f(out_dir / "run.json");
  f << run.dump(2) << "\n";
}

std::vector<int> parse_int_list(const std::string& csv) {
  std::vector<int> out;
  std::string cur;
  for (char c : csv + ",") {
    if (c == ',') {
      if (!cur.empty()) out.push_back(std::stoi(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  return out;
}

std::vector<double> parse_double_list(const std::string& csv) {
  std::vector<double> out;
  std::string cur;
  for (char c : csv + ",") {
    if (c == ',') {
      if (!cur.empty()) out.push_back(std::stod(cur));
      cur.clear();
    } else {
      cur += c;
    }
  }
  return out;
}

/// dotted-key overrides: "model.image_size=32" -> json pointer patch
void apply_override(json& cfg, const std::string& kv) {
  const auto eq = kv.find('=');
  if (eq == std::string::npos) throw satdm::ConfigError("--set expects key=value, got '" + kv + "'");
  std::string key = kv.substr(0, eq);
  std::string val = kv.substr(eq + 1);
  std::string pointer = "/" + key;
  for (auto& c : pointer) {
    if (c == '.') c = '/';
  }
  json parsed;
  try {
    parsed = json::parse(val);
  } catch (...) {
    parsed = val;  // plain string
  }
  cfg[json::json_pointer(pointer)] = parsed;
}

struct LoadedModel {
  satdm::TrainConfig cfg;
  std::unique_ptr<satdm::DenoiserModel<Scalar>> model;  // holds the weights used for inference
  satdm::ScheduleTable sched;
  std::int64_t iteration = 0;
};

LoadedModel load_model_from_checkpoint(const fs::path& ckpt, bool use_ema) {
  auto info = satdm::read_checkpoint_info(ckpt);
  LoadedModel lm;
  lm.cfg = info.config.get<satdm::TrainConfig>();
  lm.iteration = info.iteration;
  lm.model = std::make_unique<satdm::DenoiserModel<Scalar>>(lm.cfg.model, lm.cfg.seed);
  satdm::ParamStore<Scalar> ema;
  for (const auto& [name, t] : lm.model->params().items()) ema.items().emplace_back(name, t.clone());
  satdm::load_checkpoint_weights(ckpt, lm.model->params(), ema);
  if (use_ema) lm.model->params().copy_values_from(ema);
  lm.sched = satdm::build_schedule(lm.cfg.T, lm.cfg.schedule_s, lm.cfg.beta_max_clip);
  return lm;
}

satdm::Tensor<Scalar> image_tensor_from_png(const fs::path& path) {
  auto img = satdm::read_png(path);
  if (img.channels != 3) throw satdm::DataError("expected RGB image: " + path.string());
  auto t = satdm::Tensor<Scalar>::zeros({1, 3, img.height, img.width});
  auto d = t.mutable_data();
  for (std::size_t c = 0; c < 3; ++c)
    for (std::size_t p = 0; p < img.height * img.width; ++p)
      d[c * img.height * img.width + p] = static_cast<Scalar>(img.pixels[p * 3 + c] / 127.5 - 1.0);
  return t;
}

std::vector<std::uint8_t> mask_from_png(const fs::path& path) {
  auto img = satdm::read_png(path);
  std::vector<std::uint8_t> mask(img.width * img.height);
  for (std::size_t p = 0; p < mask.size(); ++p) {
    const std::uint8_t v = img.channels == 1 ? img.pixels[p] : img.pixels[p * img.channels];
    mask[p] = v >= 128 ? 1 : 0;
  }
  return mask;
}

satdm::ImageU8 mask_to_image(const std::vector<std::uint8_t>& mask, std::size_t s) {
  auto img = satdm::ImageU8::make(s, s, 1);
  for (std::size_t p = 0; p < mask.size(); ++p) img.pixels[p] = mask[p] ? 255 : 0;
  return img;
}

/// Conditioning masks for sampling: either a dataset directory (test split)
/// or a directory of mask PNGs.
std::vector<std::vector<std::uint8_t>> collect_segmaps(const fs::path& dir, std::size_t n,
                                                       std::size_t expect_size) {
  std::vector<std::vector<std::uint8_t>> masks;
  if (fs::exists(dir / "manifest.json")) {
    auto ds = satdm::load_dataset(dir);
    auto split = ds.split("test");
    if (split.empty()) split = ds.split("train");
    for (std::size_t i = 0; i < n && !split.empty(); ++i) {
      masks.push_back(split[i % split.size()]->mask);
    }
  } else {
    std::vector<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir)) {
      if (e.path().extension() == ".png") files.push_back(e.path());
    }
    std::sort(files.begin(), files.end());
    if (files.empty()) throw satdm::DataError("no .png masks in " + dir.string());
    for (std::size_t i = 0; i < n; ++i) masks.push_back(mask_from_png(files[i % files.size()]));
  }
  for (const auto& m : masks) {
    if (m.size() != expect_size * expect_size) {
      throw satdm::DataError("segmap size does not match the model image size");
    }
  }
  return masks;
}

satdm::Tensor<Scalar> stack_segmaps(const std::vector<std::vector<std::uint8_t>>& masks,
                                    std::size_t lo, std::size_t hi, std::size_t s) {
  auto seg = satdm::Tensor<Scalar>::zeros({hi - lo, 2, s, s});
  auto d = seg.mutable_data();
  for (std::size_t i = lo; i < hi; ++i) {
    for (std::size_t p = 0; p < s * s; ++p) {
      const std::size_t base = (i - lo) * 2 * s * s;
      d[base + p] = masks[i][p] ? 0.0f : 1.0f;
      d[base + s * s + p] = masks[i][p] ? 1.0f : 0.0f;
    }
  }
  return seg;
}

/// Fig-4-style sheet: alternating rows of conditioning maps and images.
satdm::ImageU8 alternating_sheet(const std::vector<satdm::ImageU8>& maps,
                                 const std::vector<satdm::ImageU8>& images, std::size_t cols) {
  std::vector<satdm::ImageU8> cells;
  for (std::size_t row = 0; row * cols < maps.size(); ++row) {
    for (std::size_t c = 0; c < cols && row * cols + c < maps.size(); ++c)
      cells.push_back(maps[row * cols + c]);
    for (std::size_t c = 0; c < cols && row * cols + c < images.size(); ++c)
      cells.push_back(images[row * cols + c]);
  }
  return satdm::make_contact_sheet(cells, cols);
}

struct SamplingRun {
  std::vector<satdm::ImageU8> images;
  std::vector<satdm::Trajectory<Scalar>> trajectories;
  satdm::Tensor<Scalar> raw;  // N x 3 x S x S in [-1, 1]
};

SamplingRun run_sampling(const LoadedModel& lm, const std::vector<std::vector<std::uint8_t>>& masks,
                         double w, std::uint64_t seed, const std::vector<int>& snapshots,
                         const std::string& variance_mode, std::size_t batch) {
  const std::size_t s = lm.cfg.model.image_size;
  const std::size_t n = masks.size();
  SamplingRun run;
  run.raw = satdm::Tensor<Scalar>::zeros({n, 3, s, s});
  for (std::size_t lo = 0; lo < n; lo += batch) {
    const std::size_t hi = std::min(n, lo + batch);
    satdm::SampleJob<Scalar> job;
    job.segmap = stack_segmaps(masks, lo, hi, s);
    job.guidance_w = w;
    job.seed = seed;
    job.snapshot_steps = snapshots;
    job.variance_mode = satdm::variance_mode_from_string(variance_mode);
    job.chain_offset = lo;
    auto [img, traj] = satdm::sample(*lm.model, job, lm.sched);
    auto src = img.data();
    auto dst = run.raw.mutable_data();
    std::copy(src.begin(), src.end(), dst.begin() + lo * 3 * s * s);
    for (std::size_t i = lo; i < hi; ++i) run.images.push_back(satdm::decode_image(img, i - lo));
    if (!snapshots.empty()) {
      for (std::size_t i = lo; i < hi; ++i) {
        satdm::Trajectory<Scalar> t;
        for (auto& [step, snap] : traj.snapshots) {
          t.snapshots.emplace_back(step, satdm::slice_item(snap, i - lo));
        }
        run.trajectories.push_back(std::move(t));
      }
    }
    std::cerr << "sampled " << hi << "/" << n << "\n";
  }
  return run;
}

// ---------------------------------------------------------------------------

int cmd_make_data(std::size_t n, std::size_t size, std::uint64_t seed, const fs::path& out,
                  std::size_t augment_count, double test_fraction) {
  auto manifest = satdm::generate_toy_dataset(n, size, seed, out, augment_count, test_fraction);
  write_run_json(out, {{"subcommand", "make-data"},
                       {"n", n},
                       {"size", size},
                       {"seed", seed},
                       {"augment", augment_count},
                       {"test_fraction", test_fraction},
                       {"out", out.string()}});
  std::cout << "wrote " << manifest.files.size() << " tiles to " << out << "\n";
  return kExitOk;
}

int cmd_train(const fs::path& data, const fs::path& out, const std::string& config_file,
              const std::vector<std::string>& sets, std::int64_t seed_override,
              const fs::path& resume, std::int64_t stop_after) {
  satdm::TrainConfig defaults;
  json cfg = defaults;
  if (!config_file.empty()) {
    std::ifstream in(config_file);
    if (!in) throw satdm::DataError("cannot read config file " + config_file);
    json file_cfg;
    try {
      in >> file_cfg;
    } catch (const json::exception& e) {
      throw satdm::DataError("unparsable config file: " + std::string(e.what()));
    }
    cfg.merge_patch(file_cfg);
  }
  for (const auto& kv : sets) apply_override(cfg, kv);
  if (seed_override >= 0) cfg["seed"] = seed_override;
  auto train_cfg = cfg.get<satdm::TrainConfig>();
  train_cfg.validate();

  write_run_json(out, {{"subcommand", "train"},
                       {"data", data.string()},
                       {"out", out.string()},
                       {"resume", resume.string()},
                       {"stop_after", stop_after},
                       {"config", json(train_cfg)}});
  auto final_ckpt = satdm::train<Scalar>(train_cfg, data, out, resume, {}, stop_after);
  std::cout << "final checkpoint: " << final_ckpt << "\n";
  return kExitOk;
}

int cmd_sample(const fs::path& ckpt, const fs::path& segmap_dir, double w, std::size_t n,
               const std::string& snapshots_csv, std::uint64_t seed, const fs::path& out,
               const std::string& variance_mode, std::size_t batch, bool use_raw) {
  auto lm = load_model_from_checkpoint(ckpt, !use_raw);
  const std::size_t s = lm.cfg.model.image_size;
  auto masks = collect_segmaps(segmap_dir, n, s);
  auto snapshots = parse_int_list(snapshots_csv);
  write_run_json(out, {{"subcommand", "sample"},
                       {"checkpoint", ckpt.string()},
                       {"segmap_dir", segmap_dir.string()},
                       {"w", w},
                       {"n", n},
                       {"snapshots", snapshots},
                       {"seed", seed},
                       {"variance_mode", variance_mode},
                       {"batch", batch},
                       {"use_ema", !use_raw},
                       {"model_iteration", lm.iteration},
                       {"out", out.string()}});

  auto run = run_sampling(lm, masks, w, seed, snapshots, variance_mode, batch);

  fs::create_directories(out / "samples");
  std::vector<satdm::ImageU8> map_cells;
  char buf[32];
  for (std::size_t i = 0; i < run.images.size(); ++i) {
    std::snprintf(buf, sizeof buf, "sample_%04zu.png", i);
    satdm::write_png(out / "samples" / buf, run.images[i]);
    map_cells.push_back(mask_to_image(masks[i], s));
  }
  const std::size_t cols = std::min<std::size_t>(8, run.images.size());
  satdm::write_png(out / "grid.png", alternating_sheet(map_cells, run.images, cols));

  if (!run.trajectories.empty()) {
    fs::create_directories(out / "trajectories");
    for (std::size_t i = 0; i < run.trajectories.size(); ++i) {
      std::vector<satdm::ImageU8> cells;
      for (auto& [t, snap] : run.trajectories[i].snapshots) {
        auto clamped = satdm::clamp(snap, -1.0f, 1.0f);
        cells.push_back(satdm::decode_image(clamped, 0));
      }
      std::snprintf(buf, sizeof buf, "traj_%04zu.png", i);
      satdm::write_png(out / "trajectories" / buf,
                       satdm::make_contact_sheet(cells, cells.size()));
    }
  }
  std::cout << "wrote " << run.images.size() << " samples to " << out << "\n";
  return kExitOk;
}

int cmd_eval(const fs::path& ckpt, const fs::path& dataset, const fs::path& out, std::size_t n,
             double w, std::uint64_t seed, std::size_t batch) {
  auto lm = load_model_from_checkpoint(ckpt, true);
  const std::size_t s = lm.cfg.model.image_size;
  auto ds = satdm::load_dataset(dataset);
  auto test_split = ds.split("test");
  auto train_split = ds.split("train");
  if (test_split.empty()) throw satdm::DataError("eval: dataset has no test split");
  n = std::min(n, test_split.size());

  write_run_json(out, {{"subcommand", "eval"},
                       {"checkpoint", ckpt.string()},
                       {"dataset", dataset.string()},
                       {"n", n},
                       {"w", w},
                       {"seed", seed},
                       {"model_iteration", lm.iteration},
                       {"out", out.string()}});

  std::vector<std::vector<std::uint8_t>> masks;
  for (std::size_t i = 0; i < n; ++i) masks.push_back(test_split[i]->mask);
  auto run = run_sampling(lm, masks, w, seed, {}, "learned", batch);

  fs::create_directories(out / "samples");
  char buf[32];
  for (std::size_t i = 0; i < run.images.size(); ++i) {
    std::snprintf(buf, sizeof buf, "sample_%04zu.png", i);
    satdm::write_png(out / "samples" / buf, run.images[i]);
  }

  satdm::FeatureExtractor<Scalar> fx(seed ^ 0xfea7ULL);
  auto gen_feats = fx.extract(run.raw);
  std::vector<const satdm::TileRecord*> real_refs(test_split.begin(), test_split.begin() + n);
  auto [real_imgs, real_segs] = satdm::encode_batch<Scalar>(real_refs);
  auto real_feats = fx.extract(real_imgs);

  satdm::EvalReport report;
  report.proxy_fid = satdm::frechet_distance(gen_feats, real_feats);

  std::vector<std::vector<std::uint8_t>> preds, truths;
  for (std::size_t i = 0; i < run.images.size(); ++i) {
    preds.push_back(satdm::segment_classical(run.images[i]));
    truths.push_back(masks[i]);
  }
  report.miou = satdm::miou(preds, truths, &report.per_image_iou);

  std::vector<const satdm::TileRecord*> train_refs;
  std::vector<std::string> train_ids;
  for (auto* r : train_split) {
    train_refs.push_back(r);
    train_ids.push_back(r->id);
  }
  auto [train_imgs, train_segs] = satdm::encode_batch<Scalar>(train_refs);
  auto train_feats = fx.extract(train_imgs);
  const std::size_t n_show = std::min<std::size_t>(16, run.images.size());
  Eigen::MatrixXd query = gen_feats.topRows(n_show);
  report.nearest = satdm::nearest_training_sample(query, train_feats, train_ids, 3);
  report.config = {{"n", n}, {"w", w}, {"seed", seed}, {"extractor_dim", fx.dim()},
                   {"checkpoint", ckpt.string()}, {"dataset", dataset.string()}};

  // nearest-neighbor contact sheet: generated next to its closest match
  std::vector<satdm::ImageU8> nn_cells;
  for (std::size_t i = 0; i < n_show; ++i) {
    nn_cells.push_back(run.images[i]);
    for (auto* r : train_split) {
      if (r->id == report.nearest[i][0].id) {
        nn_cells.push_back(r->image);
        break;
      }
    }
  }
  satdm::write_png(out / "nn_sheet.png", satdm::make_contact_sheet(nn_cells, 8));

  std::ofstream rf(out / "report.json");
  rf << json(report).dump(2) << "\n";
  std::cout << "proxy_fid " << report.proxy_fid << "  miou " << report.miou << "\n";
  return kExitOk;
}

int cmd_inpaint(const fs::path& ckpt, const fs::path& image_path, const fs::path& region_path,
                const fs::path& segmap_path, int t_start, double w, std::uint64_t seed,
                const fs::path& out) {
  auto lm = load_model_from_checkpoint(ckpt, true);
  const std::size_t s = lm.cfg.model.image_size;
  auto image = image_tensor_from_png(image_path);
  auto region = mask_from_png(region_path);
  auto seg_mask = mask_from_png(segmap_path);
  if (image.dim(2) != s || region.size() != s * s || seg_mask.size() != s * s) {
    throw satdm::DataError("inpaint: image/region/segmap sizes must match the model");
  }
  write_run_json(out, {{"subcommand", "inpaint"},
                       {"checkpoint", ckpt.string()},
                       {"image", image_path.string()},
                       {"region", region_path.string()},
                       {"segmap", segmap_path.string()},
                       {"t_start", t_start},
                       {"w", w},
                       {"seed", seed},
                       {"out", out.string()}});

  auto region_t = satdm::Tensor<Scalar>::zeros({1, 1, s, s});
  for (std::size_t p = 0; p < region.size(); ++p)
    region_t.mutable_data()[p] = static_cast<Scalar>(region[p]);
  auto segmap = satdm::segmap_from_mask<Scalar>(seg_mask, s);

  satdm::SampleJob<Scalar> job;
  job.segmap = segmap;
  job.guidance_w = w;
  job.seed = seed;
  auto result = satdm::inpaint(*lm.model, image, region_t, segmap, t_start, job, lm.sched);

  auto result_img = satdm::decode_image(result, 0);
  satdm::write_png(out / "inpainted.png", result_img);
  std::vector<satdm::ImageU8> cells{satdm::decode_image(image, 0), mask_to_image(region, s),
                                    mask_to_image(seg_mask, s), result_img};
  satdm::write_png(out / "sheet.png", satdm::make_contact_sheet(cells, 4));
  std::cout << "wrote " << (out / "inpainted.png") << "\n";
  return kExitOk;
}

int cmd_interpolate(const fs::path& ckpt, const fs::path& a_path, const fs::path& b_path,
                    const fs::path& segmap_path, const std::string& eta_csv, int t_mix, double w,
                    std::uint64_t seed, const fs::path& out) {
  auto lm = load_model_from_checkpoint(ckpt, true);
  const std::size_t s = lm.cfg.model.image_size;
  auto img_a = image_tensor_from_png(a_path);
  auto img_b = image_tensor_from_png(b_path);
  auto seg_mask = mask_from_png(segmap_path);
  if (img_a.dim(2) != s || img_b.dim(2) != s || seg_mask.size() != s * s) {
    throw satdm::DataError("interpolate: inputs must match the model image size");
  }
  if (t_mix <= 0) t_mix = static_cast<int>(std::lround(0.6 * lm.cfg.T));
  auto etas = parse_double_list(eta_csv);
  if (etas.empty()) throw satdm::ConfigError("interpolate: --eta-list is empty");

  write_run_json(out, {{"subcommand", "interpolate"},
                       {"checkpoint", ckpt.string()},
                       {"a", a_path.string()},
                       {"b", b_path.string()},
                       {"segmap", segmap_path.string()},
                       {"eta_list", etas},
                       {"t_mix", t_mix},
                       {"w", w},
                       {"seed", seed},
                       {"out", out.string()}});

  auto segmap = satdm::segmap_from_mask<Scalar>(seg_mask, s);
  satdm::SampleJob<Scalar> job;
  job.segmap = segmap;
  job.guidance_w = w;
  job.seed = seed;

  fs::create_directories(out);
  std::vector<satdm::ImageU8> cells{satdm::decode_image(img_a, 0)};
  char buf[48];
  for (double eta : etas) {
    auto result = satdm::interpolate(*lm.model, img_a, img_b, segmap, eta, t_mix, job, lm.sched);
    auto img = satdm::decode_image(result, 0);
    std::snprintf(buf, sizeof buf, "eta_%.3f.png", eta);
    satdm::write_png(out / buf, img);
    cells.push_back(std::move(img));
  }
  cells.push_back(satdm::decode_image(img_b, 0));
  satdm::write_png(out / "sheet.png", satdm::make_contact_sheet(cells, cells.size()));
  std::cout << "wrote " << etas.size() << " interpolants to " << out << "\n";
  return kExitOk;
}

int cmd_similar(const fs::path& images_dir, const fs::path& dataset, std::size_t k,
                std::uint64_t seed, const fs::path& out) {
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(images_dir)) {
    if (e.path().extension() == ".png") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  if (files.empty()) throw satdm::DataError("similar: no .png images in " + images_dir.string());

  auto ds = satdm::load_dataset(dataset);
  auto train_split = ds.split("train");
  if (train_split.empty()) throw satdm::DataError("similar: dataset has no train split");
  const std::size_t s = ds.manifest.tile_size;

  write_run_json(out, {{"subcommand", "similar"},
                       {"images", images_dir.string()},
                       {"dataset", dataset.string()},
                       {"k", k},
                       {"seed", seed},
                       {"out", out.string()}});

  auto queries = satdm::Tensor<Scalar>::zeros({files.size(), 3, s, s});
  for (std::size_t i = 0; i < files.size(); ++i) {
    auto t = image_tensor_from_png(files[i]);
    if (t.dim(2) != s) throw satdm::DataError("similar: image size mismatch: " + files[i].string());
    auto src = t.data();
    std::copy(src.begin(), src.end(), queries.mutable_data().begin() + i * 3 * s * s);
  }

  satdm::FeatureExtractor<Scalar> fx(seed ^ 0xfea7ULL);
  auto query_feats = fx.extract(queries);
  std::vector<const satdm::TileRecord*> refs;
  std::vector<std::string> ids;
  for (auto* r : train_split) {
    refs.push_back(r);
    ids.push_back(r->id);
  }
  auto [train_imgs, train_segs] = satdm::encode_batch<Scalar>(refs);
  auto train_feats = fx.extract(train_imgs);
  auto matches = satdm::nearest_training_sample(query_feats, train_feats, ids, k);

  json result = json::array();
  std::vector<satdm::ImageU8> cells;
  for (std::size_t i = 0; i < files.size(); ++i) {
    json row = {{"query", files[i].filename().string()}, {"matches", matches[i]}};
    result.push_back(row);
    cells.push_back(satdm::read_png(files[i]));
    for (auto* r : train_split) {
      if (r->id == matches[i][0].id) {
        cells.push_back(r->image);
        break;
      }
    }
  }
  std::ofstream f(out / "similar.json");
  f << result.dump(2) << "\n";
  satdm::write_png(out / "sheet.png", satdm::make_contact_sheet(cells, 8));
  std::cout << "matched " << files.size() << " images\n";
  return kExitOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"satdm: semantic-layout-conditioned diffusion, desk scale"};
  app.require_subcommand(1);
  int threads = 0;
  app.add_option("--threads", threads, "worker thread cap (or SATDM_THREADS)");

  // make-data
  auto* mk = app.add_subcommand("make-data", "generate a procedural toy dataset");
  std::size_t mk_n = 2000, mk_size = 32, mk_aug = 0;
  std::uint64_t mk_seed = 0;
  double mk_test_fraction = 0.1;
  std::string mk_out;
  mk->add_option("--n", mk_n, "organic tile count");
  mk->add_option("--size", mk_size, "tile size (32, 64, 128)");
  mk->add_option("--seed", mk_seed, "generator seed");
  mk->add_option("--augment", mk_aug, "augmented tile count");
  mk->add_option("--test-fraction", mk_test_fraction, "held-out fraction");
  mk->add_option("--out", mk_out, "output directory")->required();

  // train
  auto* tr = app.add_subcommand("train", "train the denoiser");
  std::string tr_data, tr_out, tr_config, tr_resume;
  std::vector<std::string> tr_sets;
  std::int64_t tr_seed = -1, tr_stop = -1;
  tr->add_option("--data", tr_data, "dataset directory")->required();
  tr->add_option("--out", tr_out, "output directory")->required();
  tr->add_option("--config", tr_config, "JSON config file");
  tr->add_option("--set", tr_sets, "dotted-key overrides, key=value");
  tr->add_option("--seed", tr_seed, "seed override");
  tr->add_option("--resume", tr_resume, "checkpoint directory to resume from");
  tr->add_option("--stop-after", tr_stop, "stop after this iteration (same horizon)");

  // sample
  auto* sa = app.add_subcommand("sample", "generate images from a checkpoint");
  std::string sa_ckpt, sa_segdir, sa_out, sa_snapshots, sa_varmode = "learned";
  double sa_w = 1.5;
  std::size_t sa_n = 16, sa_batch = 32;
  std::uint64_t sa_seed = 0;
  bool sa_raw = false;
  sa->add_option("--checkpoint", sa_ckpt, "checkpoint directory")->required();
  sa->add_option("--segmap-dir", sa_segdir, "dataset dir or directory of mask PNGs")->required();
  sa->add_option("--w", sa_w, "guidance scale");
  sa->add_option("--n", sa_n, "sample count");
  sa->add_option("--snapshots", sa_snapshots, "comma-separated trajectory steps");
  sa->add_option("--seed", sa_seed, "sampling seed");
  sa->add_option("--variance-mode", sa_varmode, "learned | fixed_beta | fixed_tilde_beta");
  sa->add_option("--batch", sa_batch, "chains per chunk");
  sa->add_flag("--raw-weights", sa_raw, "use raw weights instead of EMA");
  sa->add_option("--out", sa_out, "output directory")->required();

  // eval
  auto* ev = app.add_subcommand("eval", "proxy-FID / mIoU / similarity report");
  std::string ev_ckpt, ev_data, ev_out;
  std::size_t ev_n = 256, ev_batch = 32;
  double ev_w = 1.5;
  std::uint64_t ev_seed = 0;
  ev->add_option("--checkpoint", ev_ckpt, "checkpoint directory")->required();
  ev->add_option("--dataset", ev_data, "dataset directory")->required();
  ev->add_option("--n", ev_n, "generated sample count");
  ev->add_option("--w", ev_w, "guidance scale");
  ev->add_option("--seed", ev_seed, "sampling seed");
  ev->add_option("--batch", ev_batch, "chains per chunk");
  ev->add_option("--out", ev_out, "output directory")->required();

  // inpaint
  auto* ip = app.add_subcommand("inpaint", "regenerate a masked region");
  std::string ip_ckpt, ip_img, ip_region, ip_seg, ip_out;
  int ip_tstart = 0;
  double ip_w = 1.5;
  std::uint64_t ip_seed = 0;
  ip->add_option("--checkpoint", ip_ckpt, "checkpoint directory")->required();
  ip->add_option("--image", ip_img, "input image PNG")->required();
  ip->add_option("--region", ip_region, "hole mask PNG (255 = regenerate)")->required();
  ip->add_option("--segmap", ip_seg, "conditioning mask PNG")->required();
  ip->add_option("--t-start", ip_tstart, "diffusion depth")->required();
  ip->add_option("--w", ip_w, "guidance scale");
  ip->add_option("--seed", ip_seed, "seed");
  ip->add_option("--out", ip_out, "output directory")->required();

  // interpolate
  auto* it = app.add_subcommand("interpolate", "latent interpolation between two images");
  std::string it_ckpt, it_a, it_b, it_seg, it_etas = "0,0.25,0.5,0.75,1", it_out;
  int it_tmix = 0;  // 0 -> default 0.6 * T
  double it_w = 1.5;
  std::uint64_t it_seed = 0;
  it->add_option("--checkpoint", it_ckpt, "checkpoint directory")->required();
  it->add_option("--a", it_a, "image A PNG")->required();
  it->add_option("--b", it_b, "image B PNG")->required();
  it->add_option("--segmap", it_seg, "segmap of image B")->required();
  it->add_option("--eta-list", it_etas, "comma-separated interpolation strengths");
  it->add_option("--t-mix", it_tmix, "mixing timestep (default 0.6*T)");
  it->add_option("--w", it_w, "guidance scale");
  it->add_option("--seed", it_seed, "seed");
  it->add_option("--out", it_out, "output directory")->required();

  // similar
  auto* si = app.add_subcommand("similar", "nearest training samples by cosine similarity");
  std::string si_images, si_data, si_out;
  std::size_t si_k = 3;
  std::uint64_t si_seed = 0;
  si->add_option("--images", si_images, "directory of query PNGs")->required();
  si->add_option("--dataset", si_data, "dataset directory")->required();
  si->add_option("--k", si_k, "matches per query");
  si->add_option("--seed", si_seed, "feature extractor seed");
  si->add_option("--out", si_out, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // --help
    std::cerr << "error: " << nlohmann::json({{"code", kExitUsage},
                                              {"message", e.what()}}).dump() << "\n";
    std::cerr << app.help() << "\n";
    return kExitUsage;
  }

  satdm::set_num_threads(satdm::resolve_threads(threads));

  try {
    if (*mk) return cmd_make_data(mk_n, mk_size, mk_seed, mk_out, mk_aug, mk_test_fraction);
    if (*tr) return cmd_train(tr_data, tr_out, tr_config, tr_sets, tr_seed, tr_resume, tr_stop);
    if (*sa)
      return cmd_sample(sa_ckpt, sa_segdir, sa_w, sa_n, sa_snapshots, sa_seed, sa_out, sa_varmode,
                        sa_batch, sa_raw);
    if (*ev) return cmd_eval(ev_ckpt, ev_data, ev_out, ev_n, ev_w, ev_seed, ev_batch);
    if (*ip)
      return cmd_inpaint(ip_ckpt, ip_img, ip_region, ip_seg, ip_tstart, ip_w, ip_seed, ip_out);
    if (*it)
      return cmd_interpolate(it_ckpt, it_a, it_b, it_seg, it_etas, it_tmix, it_w, it_seed, it_out);
    if (*si) return cmd_similar(si_images, si_data, si_k, si_seed, si_out);
  } catch (const satdm::ConfigError& e) {
    std::cerr << "error: " << json({{"code", kExitUsage}, {"message", e.what()}}).dump() << "\n";
    return kExitUsage;
  } catch (const satdm::ContractError& e) {
    std::cerr << "error: " << json({{"code", kExitUsage}, {"message", e.what()}}).dump() << "\n";
    return kExitUsage;
  } catch (const satdm::DataError& e) {
    std::cerr << "error: " << json({{"code", kExitData}, {"message", e.what()}}).dump() << "\n";
    return kExitData;
  } catch (const satdm::NumericalError& e) {
    std::cerr << "error: " << json({{"code", kExitNumerical}, {"message", e.what()}}).dump() << "\n";
    return kExitNumerical;
  } catch (const std::exception& e) {
    std::cerr << "error: " << json({{"code", kExitNumerical}, {"message", e.what()}}).dump() << "\n";
    return kExitNumerical;
  }
  return kExitUsage;
}
