#include "cvc/runner.hpp"

#include <algorithm>
#include <filesystem>
#include <fstream>

#include <json.hpp>

namespace fs = std::filesystem;

namespace cvc {

void prepare_out_dir(const std::string& path, bool force) {
  fs::path p(path);
  if (fs::exists(p)) {
    if (!fs::is_directory(p))
      throw ConfigError("output path exists and is not a directory: " + path);
    if (!fs::is_empty(p) && !force)
      throw ConfigError("output directory not empty (use --force): " + path);
  } else {
    std::error_code ec;
    fs::create_directories(p, ec);
    if (ec) throw DataError("cannot create output directory: " + path);
  }
}

namespace {

struct PairDataset {
  std::vector<Image> view1, view2;
};

PairDataset load_pair_dataset(const std::string& manifest_path) {
  auto entries = read_manifest(manifest_path);
  if (entries.empty()) throw DataError("pair manifest is empty: " + manifest_path);
  const fs::path base = fs::path(manifest_path).parent_path();
  auto resolve = [&base](const std::string& p) {
    fs::path fp(p);
    return fp.is_absolute() ? fp.string() : (base / fp).string();
  };
  PairDataset ds;
  for (const auto& e : entries) {
    ds.view1.push_back(read_ppm(resolve(e.path_view1)));
    ds.view2.push_back(read_ppm(resolve(e.path_view2)));
  }
  return ds;
}

// Deterministic epoch-shuffled sample index for a global slot counter.
size_t sample_index(uint64_t seed, size_t n, int64_t slot) {
  const int64_t epoch = slot / static_cast<int64_t>(n);
  const int64_t within = slot % static_cast<int64_t>(n);
  std::vector<size_t> order(n);
  for (size_t i = 0; i < n; ++i) order[i] = i;
  std::mt19937_64 rng(derive_seed(seed, "order", static_cast<uint64_t>(epoch)));
  std::shuffle(order.begin(), order.end(), rng);
  return order[static_cast<size_t>(within)];
}

}  // namespace

PretrainResult run_pretrain(const RunConfig& cfg, const std::string& out_dir, bool force) {
  cfg.validate();
  if (cfg.data_manifest.empty())
    throw ConfigError("pretrain: config key data_manifest is required");
  prepare_out_dir(out_dir, force);
  PairDataset ds = load_pair_dataset(cfg.data_manifest);
  const int64_t n_pairs = static_cast<int64_t>(ds.view1.size());
  for (int64_t i = 0; i < n_pairs; ++i) {
    if (ds.view1[i].height != cfg.model.image_size ||
        ds.view1[i].width != cfg.model.image_size ||
        ds.view2[i].height != cfg.model.image_size ||
        ds.view2[i].width != cfg.model.image_size)
      throw DataError("pretrain: pair " + std::to_string(i) +
                      " does not match the configured image size");
  }

  const int64_t steps_per_epoch = (n_pairs + cfg.batch_size - 1) / cfg.batch_size;
  const int64_t total_steps =
      cfg.steps > 0 ? cfg.steps : cfg.epochs * steps_per_epoch;
  const int64_t warmup_steps = cfg.warmup_steps >= 0
                                   ? cfg.warmup_steps
                                   : cfg.warmup_epochs * steps_per_epoch;

  auto model = Model<float>::create(cfg.model, derive_seed(cfg.seed, "model", 0));
  AdamWConfig oc;
  oc.base_lr = cfg.base_lr;
  oc.warmup_lr = cfg.warmup_lr;
  oc.weight_decay = cfg.weight_decay;
  oc.beta1 = cfg.beta1;
  oc.beta2 = cfg.beta2;
  oc.warmup_steps = warmup_steps;
  oc.total_steps = total_steps;
  AdamW<float> optim(model.params(), oc);

  int64_t start_step = 0;
  if (!cfg.resume.empty()) {
    auto resumed = checkpoint_load(model, cfg.resume, &optim);
    start_step = resumed.value_or(0);
  } else if (!cfg.init_checkpoint.empty()) {
    checkpoint_load(model, cfg.init_checkpoint);
  }
  if (start_step >= total_steps)
    throw ConfigError("pretrain: resume step is past the end of the schedule");

  RunConfig resolved = cfg;
  resolved.write_file((fs::path(out_dir) / "config.txt").string());

  const std::string csv_path = (fs::path(out_dir) / "loss_curve.csv").string();
  std::ofstream csv(csv_path, start_step > 0 ? std::ios::app : std::ios::out);
  if (!csv) throw DataError("cannot write loss curve: " + csv_path);
  if (start_step == 0) csv << "step,lr,loss\n";

  PretrainResult result;
  std::vector<const Image*> b1(static_cast<size_t>(cfg.batch_size));
  std::vector<const Image*> b2(static_cast<size_t>(cfg.batch_size));
  for (int64_t step = start_step; step < total_steps; ++step) {
    for (int64_t k = 0; k < cfg.batch_size; ++k) {
      const int64_t slot = step * cfg.batch_size + k;
      const size_t idx = sample_index(cfg.seed, static_cast<size_t>(n_pairs), slot);
      bool swap = cfg.swap_views &&
                  (derive_seed(cfg.seed, "swap", static_cast<uint64_t>(slot)) & 1u);
      b1[k] = swap ? &ds.view2[idx] : &ds.view1[idx];
      b2[k] = swap ? &ds.view1[idx] : &ds.view2[idx];
    }
    const double lr = cosine_lr(optim.step_count(), total_steps, warmup_steps,
                                cfg.base_lr, cfg.warmup_lr);
    const double loss = pretrain_batch_step(
        model, optim, b1, b2, derive_seed(cfg.seed, "step", static_cast<uint64_t>(step)));
    csv << step << "," << lr << "," << loss << "\n";
    if (step == start_step) result.first_loss = loss;
    result.final_loss = loss;
    ++result.steps_run;
    if (cfg.checkpoint_every > 0 && (step + 1) % cfg.checkpoint_every == 0 &&
        step + 1 < total_steps) {
      checkpoint_save(model,
                      (fs::path(out_dir) / ("ckpt_" + std::to_string(step + 1) + ".bin"))
                          .string(),
                      &optim);
    }
  }
  result.checkpoint_path = (fs::path(out_dir) / "model.bin").string();
  result.loss_csv_path = csv_path;
  checkpoint_save(model, result.checkpoint_path, &optim);
  return result;
}

ReconstructResult run_reconstruct(const std::string& checkpoint,
                                  const std::string& view1_ppm,
                                  const std::string& view2_ppm, uint64_t seed,
                                  const std::string& out_dir, bool force) {
  prepare_out_dir(out_dir, force);
  const ModelConfig mc = checkpoint_peek_config(checkpoint);
  auto model = Model<float>::create(mc, 0);
  checkpoint_load(model, checkpoint);
  Image img1 = read_ppm(view1_ppm);
  Image img2 = read_ppm(view2_ppm);
  if (img1.height != mc.image_size || img1.width != mc.image_size ||
      img2.height != mc.image_size || img2.width != mc.image_size)
    throw DataError("reconstruct: images do not match the checkpoint image size");

  auto ps1 = patchify<float>(img1, mc.patch);
  auto ps2 = patchify<float>(img2, mc.patch);
  MaskSpec mask = sample_mask(mc.n_tokens(), mc.mask_ratio, derive_seed(seed, "mask", 0));

  TensorF pred = model.reconstruct(ps1, mask, ps2);
  double loss = 0;
  if (mask.n_masked() > 0) {
    GraphF g;
    loss = g.val(pretrain_loss(g, g.constant(pred), ps1, mask, mc.normalized_targets))
               .scalar();
  }

  // masked input: masked patches drawn mid-gray
  PatchSet<float> masked_ps = ps1;
  for (int64_t i = 0; i < mc.n_tokens(); ++i)
    if (mask.mask[i])
      for (int64_t c = 0; c < mc.token_len(); ++c) masked_ps.tokens.at(i, c) = 0.5f;

  // composite: prediction at masked positions (un-normalized with target
  // patch statistics when training used normalized targets), ground truth at
  // visible ones
  PatchSet<float> composite = ps1;
  for (int64_t i = 0; i < mc.n_tokens(); ++i) {
    if (!mask.mask[i]) continue;
    for (int64_t c = 0; c < mc.token_len(); ++c) {
      float v = pred.at(i, c);
      if (mc.normalized_targets) {
        double mean = 0, var = 0;
        for (int64_t k = 0; k < mc.token_len(); ++k) mean += ps1.tokens.at(i, k);
        mean /= static_cast<double>(mc.token_len());
        for (int64_t k = 0; k < mc.token_len(); ++k) {
          const double d = ps1.tokens.at(i, k) - mean;
          var += d * d;
        }
        var /= static_cast<double>(mc.token_len());
        v = static_cast<float>(v * (std::sqrt(var) + 1e-6) + mean);
      }
      composite.tokens.at(i, c) = v;
    }
  }

  ReconstructResult out;
  out.masked_loss = loss;
  out.reference_ppm = (fs::path(out_dir) / "reference.ppm").string();
  out.masked_ppm = (fs::path(out_dir) / "masked.ppm").string();
  out.prediction_ppm = (fs::path(out_dir) / "prediction.ppm").string();
  out.target_ppm = (fs::path(out_dir) / "target.ppm").string();
  write_ppm(out.reference_ppm, img2);
  write_ppm(out.masked_ppm, unpatchify(masked_ps));
  write_ppm(out.prediction_ppm, unpatchify(composite));
  write_ppm(out.target_ppm, img1);
  return out;
}

void save_camera_view(const std::string& dir, const std::string& stem,
                      const CameraView& view) {
  const fs::path base = fs::path(dir) / stem;
  write_ppm(base.string() + ".ppm", view.image);
  write_crdp(base.string() + ".crdp", view.depth.dim(0), view.depth.dim(1), 0,
             view.depth.data);
  nlohmann::json j = {{"fx", view.intr.fx},
                      {"fy", view.intr.fy},
                      {"cx", view.intr.cx},
                      {"cy", view.intr.cy},
                      {"R", view.pose.R.m},
                      {"t", {view.pose.t.x, view.pose.t.y, view.pose.t.z}}};
  std::ofstream f(base.string() + ".cam");
  if (!f) throw DataError("cannot write camera file: " + base.string() + ".cam");
  f << j.dump() << "\n";
}

CameraView load_camera_view(const std::string& dir, const std::string& stem) {
  const fs::path base = fs::path(dir) / stem;
  CameraView v;
  v.id = stem + ".ppm";
  v.image = read_ppm(base.string() + ".ppm");
  auto depth = read_crdp(base.string() + ".crdp");
  if (depth.channels != 1)
    throw DataError("depth map must be single channel: " + base.string() + ".crdp");
  if (depth.height != v.image.height || depth.width != v.image.width)
    throw DataError("depth dims do not match image: " + base.string() + ".crdp");
  v.depth = TensorF({depth.height, depth.width}, std::move(depth.data));
  std::ifstream f(base.string() + ".cam");
  if (!f) throw DataError("cannot open camera file: " + base.string() + ".cam");
  nlohmann::json j = nlohmann::json::parse(f, nullptr, false);
  if (j.is_discarded())
    throw DataError("camera file is not valid JSON: " + base.string() + ".cam");
  v.intr.fx = j.at("fx").get<double>();
  v.intr.fy = j.at("fy").get<double>();
  v.intr.cx = j.at("cx").get<double>();
  v.intr.cy = j.at("cy").get<double>();
  auto R = j.at("R").get<std::array<double, 9>>();
  v.pose.R.m = R;
  auto t = j.at("t").get<std::array<double, 3>>();
  v.pose.t = {t[0], t[1], t[2]};
  v.validate();
  return v;
}

std::vector<CameraView> load_scene_dir(const std::string& dir) {
  if (!fs::is_directory(dir)) throw DataError("scene directory not found: " + dir);
  std::vector<std::string> stems;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.path().extension() == ".ppm") stems.push_back(e.path().stem().string());
  }
  std::sort(stems.begin(), stems.end());
  if (stems.empty()) throw DataError("scene directory has no .ppm views: " + dir);
  std::vector<CameraView> views;
  views.reserve(stems.size());
  for (const auto& s : stems) views.push_back(load_camera_view(dir, s));
  return views;
}

CovisResultFiles run_covis(const std::string& scene_dir, double lo, double hi,
                           int64_t cap, uint64_t seed, double tau,
                           const std::string& out_dir, bool force) {
  prepare_out_dir(out_dir, force);
  auto views = load_scene_dir(scene_dir);
  auto entries = sample_pairs(views, lo, hi, cap, derive_seed(seed, "pairs", 0), tau);

  CovisResultFiles out;
  out.n_pairs = static_cast<int64_t>(entries.size());
  out.manifest_path = (fs::path(out_dir) / "pairs.jsonl").string();
  write_manifest(out.manifest_path, entries);

  std::unordered_map<std::string, const CameraView*> by_id;
  for (const auto& v : views) by_id[v.id] = &v;
  out.stats_csv_path = (fs::path(out_dir) / "pair_stats.csv").string();
  std::ofstream csv(out.stats_csv_path);
  if (!csv) throw DataError("cannot write stats csv: " + out.stats_csv_path);
  csv << "view1,view2,distance_m,angle_deg,covis\n";
  for (const auto& e : entries) {
    const CameraView* a = by_id.at(e.path_view1);
    const CameraView* b = by_id.at(e.path_view2);
    const double dist = (a->pose.t - b->pose.t).norm();
    const Mat3 rel = a->pose.R.transposed().mul(b->pose.R);
    const double tr = rel(0, 0) + rel(1, 1) + rel(2, 2);
    const double angle =
        std::acos(std::min(1.0, std::max(-1.0, (tr - 1.0) / 2.0))) * 180.0 / M_PI;
    csv << e.path_view1 << "," << e.path_view2 << "," << dist << "," << angle << ","
        << e.covis << "\n";
  }
  return out;
}

FlopsReport run_flops(const ModelConfig& cfg) {
  cfg.validate();
  FlopsReport r;
  r.enc_params = count_params_encoder(cfg);
  r.enc_flops = flops_encoder(cfg);
  ModelConfig cross = cfg, cat = cfg;
  cross.variant = DecoderVariant::kCross;
  cat.variant = DecoderVariant::kCat;
  r.dec_params_cross = count_params_decoder(cross);
  r.dec_params_cat = count_params_decoder(cat);
  r.dec_flops_cross = flops_decoder(cross);
  r.dec_flops_cat = flops_decoder(cat);
  return r;
}

template <typename T>
void save_flow_model(const FlowRegressor<T>& fr, const std::string& path,
                     AdamW<T>* optim) {
  checkpoint_save_sets<T>(fr.model.config(), {&fr.model.params(), &fr.head_params},
                          path, optim);
}

template <typename T>
FlowRegressor<T> load_flow_model(const std::string& path) {
  const ModelConfig mc = checkpoint_peek_config(path);
  auto fr = FlowRegressor<T>::create(Model<T>::create(mc, 0), 0);
  checkpoint_load_sets<T>(mc, {&fr.model.params(), &fr.head_params}, path);
  return fr;
}

template void save_flow_model<float>(const FlowRegressor<float>&, const std::string&,
                                     AdamW<float>*);
template FlowRegressor<float> load_flow_model<float>(const std::string&);

namespace {

struct FlowTriplet {
  Image img1, img2;
  CrdpMap flow;
  std::string stem;
};

std::vector<FlowTriplet> load_flow_dataset(const std::string& dir, int64_t image_size) {
  if (!fs::is_directory(dir)) throw DataError("flow data directory not found: " + dir);
  std::vector<std::string> stems;
  const std::string suffix = "_img1.ppm";
  for (const auto& e : fs::directory_iterator(dir)) {
    const std::string name = e.path().filename().string();
    if (name.size() > suffix.size() &&
        name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0)
      stems.push_back(name.substr(0, name.size() - suffix.size()));
  }
  std::sort(stems.begin(), stems.end());
  if (stems.empty())
    throw DataError("no *_img1.ppm samples in flow data directory: " + dir);
  std::vector<FlowTriplet> out;
  for (const auto& s : stems) {
    FlowTriplet t;
    t.stem = s;
    t.img1 = read_ppm((fs::path(dir) / (s + "_img1.ppm")).string());
    t.img2 = read_ppm((fs::path(dir) / (s + "_img2.ppm")).string());
    t.flow = read_crdp((fs::path(dir) / (s + "_flow.crdp")).string());
    if (t.flow.channels != 2)
      throw DataError("flow map must have 2 channels (header reserved field): " +
                      (fs::path(dir) / (s + "_flow.crdp")).string());
    if (t.img1.height != image_size || t.img1.width != image_size ||
        t.img2.height != image_size || t.img2.width != image_size ||
        t.flow.height != image_size || t.flow.width != image_size)
      throw DataError("flow sample '" + s + "' does not match the configured image size");
    out.push_back(std::move(t));
  }
  return out;
}

}  // namespace

FinetuneFlowResult run_finetune_flow(const RunConfig& cfg, const std::string& out_dir,
                                     bool force) {
  cfg.validate();
  if (cfg.data_dir.empty())
    throw ConfigError("finetune-flow: config key data_dir is required");
  prepare_out_dir(out_dir, force);
  auto data = load_flow_dataset(cfg.data_dir, cfg.model.image_size);
  const int64_t n = static_cast<int64_t>(data.size());

  auto model = Model<float>::create(cfg.model, derive_seed(cfg.seed, "model", 0));
  if (!cfg.init_checkpoint.empty()) checkpoint_load(model, cfg.init_checkpoint);
  auto fr = FlowRegressor<float>::create(std::move(model), derive_seed(cfg.seed, "head", 0));

  const int64_t steps_per_epoch = (n + cfg.batch_size - 1) / cfg.batch_size;
  const int64_t total_steps = cfg.steps > 0 ? cfg.steps : cfg.epochs * steps_per_epoch;
  const int64_t warmup_steps =
      cfg.warmup_steps >= 0 ? cfg.warmup_steps : cfg.warmup_epochs * steps_per_epoch;

  AdamWConfig oc;
  oc.base_lr = cfg.base_lr;
  oc.warmup_lr = cfg.warmup_lr;
  oc.weight_decay = cfg.weight_decay;
  oc.beta1 = cfg.beta1;
  oc.beta2 = cfg.beta2;
  oc.warmup_steps = warmup_steps;
  oc.total_steps = total_steps;
  AdamW<float> optim({&fr.model.params(), &fr.head_params}, oc);

  RunConfig resolved = cfg;
  resolved.write_file((fs::path(out_dir) / "config.txt").string());
  const std::string csv_path = (fs::path(out_dir) / "loss_curve.csv").string();
  std::ofstream csv(csv_path);
  csv << "step,lr,loss\n";

  // tokenized targets; token MSE equals per-pixel MSE up to layout
  std::vector<TensorF> targets;
  std::vector<PatchSet<float>> ps1s, ps2s;
  for (const auto& t : data) {
    targets.push_back(patchify_channels<float>(t.flow.data, t.flow.height, t.flow.width,
                                               2, cfg.model.patch));
    ps1s.push_back(patchify<float>(t.img1, cfg.model.patch));
    ps2s.push_back(patchify<float>(t.img2, cfg.model.patch));
  }

  FinetuneFlowResult result;
  for (int64_t step = 0; step < total_steps; ++step) {
    fr.model.params().zero_grad();
    fr.head_params.zero_grad();
    const double scale = 1.0 / static_cast<double>(cfg.batch_size);
    double loss_sum = 0;
    for (int64_t k = 0; k < cfg.batch_size; ++k) {
      const int64_t slot = step * cfg.batch_size + k;
      const size_t idx = sample_index(cfg.seed, static_cast<size_t>(n), slot);
      GraphF g;
      auto pred = fr.forward(g, ps1s[idx], ps2s[idx]);
      auto loss = g.mean_sq_err(pred, targets[idx]);
      loss_sum += scale * g.val(loss).scalar();
      g.backward(g.scale(loss, static_cast<float>(scale)));
    }
    if (!std::isfinite(loss_sum)) throw NumericError("flow finetuning loss is non-finite");
    const double lr = cosine_lr(optim.step_count(), total_steps, warmup_steps,
                                cfg.base_lr, cfg.warmup_lr);
    optim.step_scheduled();
    csv << step << "," << lr << "," << loss_sum << "\n";
    result.final_loss = loss_sum;
    ++result.steps_run;
  }

  // predictions + train AEPE
  double aepe_sum = 0;
  for (int64_t i = 0; i < n; ++i) {
    FlowField pred = fr.infer(data[i].img1, data[i].img2);
    FlowField gt;
    gt.u = TensorF({cfg.model.image_size, cfg.model.image_size});
    gt.v = TensorF({cfg.model.image_size, cfg.model.image_size});
    for (int64_t px = 0; px < cfg.model.image_size * cfg.model.image_size; ++px) {
      gt.u.data[px] = data[i].flow.data[2 * px];
      gt.v.data[px] = data[i].flow.data[2 * px + 1];
    }
    aepe_sum += metric_aepe(pred, gt);
    std::vector<float> interleaved(static_cast<size_t>(2 * pred.u.numel()));
    for (int64_t px = 0; px < pred.u.numel(); ++px) {
      interleaved[2 * px] = pred.u.data[px];
      interleaved[2 * px + 1] = pred.v.data[px];
    }
    write_crdp((fs::path(out_dir) / ("pred_" + data[i].stem + "_flow.crdp")).string(),
               cfg.model.image_size, cfg.model.image_size, 2, interleaved);
  }
  result.train_aepe = aepe_sum / static_cast<double>(n);
  result.checkpoint_path = (fs::path(out_dir) / "flow_model.bin").string();
  save_flow_model(fr, result.checkpoint_path, &optim);
  return result;
}

EvalReport run_eval(const std::string& pred_path, const std::string& gt_path) {
  CrdpMap pred = read_crdp(pred_path);
  CrdpMap gt = read_crdp(gt_path);
  if (pred.channels != gt.channels)
    throw DataError("eval: channel count mismatch between " + pred_path + " (" +
                    std::to_string(pred.channels) + ") and " + gt_path + " (" +
                    std::to_string(gt.channels) + ")");
  if (pred.height != gt.height || pred.width != gt.width)
    throw DataError("eval: map dims mismatch between " + pred_path + " and " + gt_path);
  EvalReport r;
  r.channels = pred.channels;
  if (pred.channels == 2) {
    FlowField fp, fg;
    fp.u = TensorF({pred.height, pred.width});
    fp.v = TensorF({pred.height, pred.width});
    fg = fp;
    for (int64_t px = 0; px < pred.height * pred.width; ++px) {
      fp.u.data[px] = pred.data[2 * px];
      fp.v.data[px] = pred.data[2 * px + 1];
      fg.u.data[px] = gt.data[2 * px];
      fg.v.data[px] = gt.data[2 * px + 1];
    }
    r.aepe = metric_aepe(fp, fg);
  } else if (pred.channels == 1) {
    TensorF tp({pred.height, pred.width}, std::move(pred.data));
    TensorF tg({gt.height, gt.width}, std::move(gt.data));
    r.delta1 = metric_delta1(tp, tg);
    r.bad3 = metric_bad3(tp, tg);
    r.l1x1000 = metric_l1x1000(tp, tg);
  } else {
    throw DataError("eval: unsupported channel count " + std::to_string(pred.channels));
  }
  return r;
}

}  // namespace cvc
