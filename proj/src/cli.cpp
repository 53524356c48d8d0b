#include "amsam/cli.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <optional>
#include <ostream>
#include <sstream>

#include "amsam/data_io.hpp"
#include "amsam/trainer.hpp"

namespace amsam {

namespace fs = std::filesystem;

namespace {

// Flat key=value configuration shared by every command: training keys,
// synthetic-data keys and the dataset path.
struct RunConfig {
  TrainConfig train;
  SyntheticSpec synth;
  std::size_t test_count = 0;
  std::string data;

  KeyValues to_key_values() const {
    KeyValues kv = train.to_key_values();
    char buf[40];
    auto real = [&](double v) {
      std::snprintf(buf, sizeof buf, "%.17g", v);
      return std::string(buf);
    };
    kv.emplace_back("count", std::to_string(synth.count));
    kv.emplace_back("test_count", std::to_string(test_count));
    kv.emplace_back("shape", to_string(synth.family));
    kv.emplace_back("fg_mean", real(synth.fg_mean));
    kv.emplace_back("bg_mean", real(synth.bg_mean));
    kv.emplace_back("noise_sigma", real(synth.noise_sigma));
    if (!data.empty()) kv.emplace_back("data", data);
    return kv;
  }

  void apply(const KeyValues& kv) {
    KeyValues train_kv;
    for (const auto& [key, value] : kv) {
      try {
        if (TrainConfig::is_key(key)) {
          train_kv.emplace_back(key, value);
        } else if (key == "count") {
          synth.count = std::stoul(value);
        } else if (key == "test_count") {
          test_count = std::stoul(value);
        } else if (key == "shape") {
          synth.family = parse_shape_family(value);
        } else if (key == "fg_mean") {
          synth.fg_mean = std::stod(value);
        } else if (key == "bg_mean") {
          synth.bg_mean = std::stod(value);
        } else if (key == "noise_sigma") {
          synth.noise_sigma = std::stod(value);
        } else if (key == "data") {
          data = value;
        } else {
          throw UsageError("unknown config key '" + key + "'");
        }
      } catch (const std::logic_error& e) {
        if (dynamic_cast<const UsageError*>(&e)) throw;
        throw UsageError("config key '" + key + "': invalid value '" + value + "'");
      }
    }
    train = TrainConfig::from_key_values(train_kv, train);
  }
};

struct CommonFlags {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs;
  std::optional<double> lower_lr, upper_lr, lambda, alpha;
  std::optional<std::size_t> rank;
  bool no_box = false;
  bool no_calibration = false;
  std::string detections_file;
};

void add_training_flags(CLI::App* cmd, CommonFlags& f) {
  cmd->add_option("--config", f.config_path, "key=value config file");
  cmd->add_option("--seed", f.seed, "Run seed");
  cmd->add_option("--epochs", f.epochs, "Training epochs");
  cmd->add_option("--lower-lr", f.lower_lr, "Initial learning rate of the weights");
  cmd->add_option("--upper-lr", f.upper_lr, "Initial learning rate of the prompt embedding");
  cmd->add_option("--lambda", f.lambda, "Dice weight in the loss");
  cmd->add_option("--alpha", f.alpha, "Weight of the dot-product mask in the fusion");
  cmd->add_option("--rank", f.rank, "LoRA rank");
  cmd->add_flag("--no-box-prompts", f.no_box, "Disable automated box prompts");
  cmd->add_flag("--no-calibration", f.no_calibration, "Disable mask calibration");
  cmd->add_option("--detections-file", f.detections_file, "Detector output to use instead of oracle boxes");
}

std::string real_text(double v) {
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

RunConfig resolve(const CommonFlags& f, const std::string& data_flag) {
  RunConfig rc;
  if (!f.config_path.empty()) {
    if (!fs::exists(f.config_path)) throw UsageError("config file " + f.config_path + " does not exist");
    rc.apply(parse_key_values(read_file(f.config_path), f.config_path));
  }
  KeyValues over;
  if (f.seed) over.emplace_back("seed", std::to_string(*f.seed));
  if (f.epochs) over.emplace_back("epochs", std::to_string(*f.epochs));
  if (f.lower_lr) over.emplace_back("lower_lr", real_text(*f.lower_lr));
  if (f.upper_lr) over.emplace_back("upper_lr", real_text(*f.upper_lr));
  if (f.lambda) over.emplace_back("lambda", real_text(*f.lambda));
  if (f.alpha) over.emplace_back("alpha", real_text(*f.alpha));
  if (f.rank) over.emplace_back("rank", std::to_string(*f.rank));
  if (f.no_box) over.emplace_back("box_prompts", "false");
  if (f.no_calibration) over.emplace_back("calibration", "false");
  if (!f.detections_file.empty()) over.emplace_back("detections_file", f.detections_file);
  if (!data_flag.empty()) over.emplace_back("data", data_flag);
  rc.apply(over);
  rc.train.validate();
  return rc;
}

struct Dataset {
  std::vector<Sample> train;
  std::vector<Sample> test;
};

void check_sizes(const std::vector<Sample>& samples, const TrainConfig& cfg, const std::string& dir) {
  for (const auto& s : samples) {
    if (s.image.dim(1) != cfg.image_size || s.image.dim(2) != cfg.image_size) {
      throw std::runtime_error("image '" + s.id + "' in " + dir + " is " + std::to_string(s.image.dim(2)) + "x" +
                               std::to_string(s.image.dim(1)) + ", the model expects " +
                               std::to_string(cfg.image_size) + "x" + std::to_string(cfg.image_size));
    }
  }
}

Dataset load_run_data(const RunConfig& rc) {
  if (rc.data.empty()) throw UsageError("--data is required");
  Dataset ds;
  ds.train = load_dataset(rc.data);
  if (fs::is_directory(fs::path(rc.data) / "test")) ds.test = load_dataset(fs::path(rc.data) / "test");
  check_sizes(ds.train, rc.train, rc.data);
  check_sizes(ds.test, rc.train, rc.data + "/test");
  return ds;
}

std::optional<BoundingBox> parse_box(const std::string& text) {
  std::vector<double> v;
  std::stringstream in(text);
  std::string part;
  while (std::getline(in, part, ',')) {
    try {
      std::size_t used = 0;
      v.push_back(std::stod(part, &used));
      if (used != part.size()) throw std::invalid_argument(part);
    } catch (const std::exception&) {
      throw UsageError("malformed --box '" + text + "' (expected x1,y1,x2,y2)");
    }
  }
  if (v.size() != 4) throw UsageError("malformed --box '" + text + "' (expected x1,y1,x2,y2)");
  if (!(v[0] < v[2] && v[1] < v[3])) throw UsageError("--box needs x1 < x2 and y1 < y2");
  return BoundingBox{v[0], v[1], v[2], v[3], 1.0};
}

std::string percent(double dice) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f", dice * 100.0);
  return buf;
}

int cmd_gen_data(const CommonFlags& f, const std::string& out_dir, std::optional<std::size_t> count,
                 std::optional<std::size_t> test_count, std::ostream& out) {
  RunConfig rc = resolve(f, "");
  if (count) rc.synth.count = *count;
  if (test_count) rc.test_count = *test_count;
  if (rc.synth.count == 0) throw UsageError("--count must be at least 1");
  rc.synth.height = rc.synth.width = rc.train.image_size;
  rc.synth.seed = rc.train.seed;
  rc.synth.id_prefix = "";
  save_dataset(out_dir, gen_synthetic(rc.synth));
  if (rc.test_count > 0) {
    SyntheticSpec test = rc.synth;
    test.count = rc.test_count;
    test.seed = rc.synth.seed + 1000003;
    test.id_prefix = "t";
    save_dataset(fs::path(out_dir) / "test", gen_synthetic(test));
  }
  write_file(fs::path(out_dir) / "config.txt", format_key_values(rc.to_key_values()));
  out << "wrote " << rc.synth.count << " training";
  if (rc.test_count > 0) out << " and " << rc.test_count << " test";
  out << " samples to " << out_dir << "\n";
  return kExitOk;
}

int cmd_train(const CommonFlags& f, const std::string& data_flag, const std::string& out_dir, std::ostream& out) {
  RunConfig rc = resolve(f, data_flag);
  Dataset ds = load_run_data(rc);
  SplitDataset split = split_dataset(ds.train, rc.train.seed, ds.test);
  fs::create_directories(out_dir);
  write_file(fs::path(out_dir) / "config.txt", format_key_values(rc.to_key_values()));
  TrainResult result = train(rc.train, split);
  save_checkpoint(fs::path(out_dir) / "checkpoint.amck", result.best);
  write_metrics(fs::path(out_dir) / "metrics.csv", result.metrics);
  out << "best D2 dice " << percent(result.best.best_d2_dice) << " at epoch " << result.best.best_epoch << "\n";
  if (result.best_test_dice) out << "test dice " << percent(*result.best_test_dice) << "\n";
  return kExitOk;
}

int cmd_eval(const std::string& checkpoint_path, const std::string& data_dir, std::ostream& out) {
  if (!fs::exists(checkpoint_path)) throw std::runtime_error("checkpoint " + checkpoint_path + " does not exist");
  Checkpoint ck = load_checkpoint(checkpoint_path);
  AmSamModel model = AmSamModel::from_checkpoint(ck);
  std::vector<Sample> samples = load_dataset(data_dir);
  if (samples.empty()) throw UsageError("dataset " + data_dir + " contains no samples");
  check_sizes(samples, model.config(), data_dir);
  out << percent(evaluate(model, samples)) << "\n";
  return kExitOk;
}

int cmd_predict(const std::string& checkpoint_path, const std::string& image_path, const std::string& box_text,
                const std::string& mask_path, const std::string& out_path, std::ostream& out) {
  std::optional<BoundingBox> box;
  if (!box_text.empty()) box = parse_box(box_text);
  if (!fs::exists(checkpoint_path)) throw std::runtime_error("checkpoint " + checkpoint_path + " does not exist");
  AmSamModel model = AmSamModel::from_checkpoint(load_checkpoint(checkpoint_path));
  Tensor image = load_image(image_path);
  if (image.dim(1) != model.config().image_size || image.dim(2) != model.config().image_size) {
    throw std::runtime_error("image " + image_path + " does not match the model's input size");
  }
  if (!box && !std::holds_alternative<NoDetector>(model.detector())) {
    std::string id = fs::path(image_path).stem().string();
    if (id.starts_with("img_")) id = id.substr(4);
    std::optional<Tensor> gt;
    if (!mask_path.empty()) gt = load_mask(mask_path);
    if (std::holds_alternative<OracleDetector>(model.detector()) && !gt) {
      throw UsageError("the oracle detector needs --mask (or pass --box)");
    }
    box = select_best_box(detect_boxes(model.detector(), id, gt ? &*gt : nullptr));
  }
  Tensor mask = binarize_prediction(model.forward_image(image, box).m_final);
  save_mask(out_path, mask);
  out << "wrote " << out_path << "\n";
  return kExitOk;
}

int cmd_ablate(const CommonFlags& f, const std::string& data_flag, const std::string& out_dir,
               const std::vector<std::uint64_t>& seeds, std::ostream& out) {
  if (seeds.empty()) throw UsageError("--seeds needs at least one seed");
  RunConfig rc = resolve(f, data_flag);
  Dataset ds = load_run_data(rc);
  if (ds.test.empty()) throw std::runtime_error("ablation needs a test set in " + rc.data + "/test");
  fs::create_directories(out_dir);
  write_file(fs::path(out_dir) / "config.txt", format_key_values(rc.to_key_values()));
  const std::vector<std::pair<bool, bool>> arms = {{false, false}, {true, false}, {false, true}, {true, true}};
  std::string summary = "automated_prompting,mask_calibration,mean_test_dice,seeds\n";
  std::string runs = "automated_prompting,mask_calibration,seed,test_dice,best_d2_dice\n";
  auto flag = [](bool on) { return on ? std::string("on") : std::string("off"); };
  char buf[64];
  for (const auto& [box, calibration] : arms) {
    double total = 0.0;
    for (auto seed : seeds) {
      TrainConfig cfg = rc.train;
      cfg.seed = seed;
      cfg.box_prompts = box;
      cfg.calibration = calibration;
      TrainResult r = train(cfg, split_dataset(ds.train, seed, ds.test));
      total += *r.best_test_dice;
      std::snprintf(buf, sizeof buf, "%.6f,%.6f", *r.best_test_dice, r.best.best_d2_dice);
      runs += flag(box) + "," + flag(calibration) + "," + std::to_string(seed) + "," + buf + "\n";
    }
    const double mean = total / static_cast<double>(seeds.size());
    std::snprintf(buf, sizeof buf, "%.6f", mean);
    summary += flag(box) + "," + flag(calibration) + "," + buf + "," + std::to_string(seeds.size()) + "\n";
    out << "prompting " << flag(box) << ", calibration " << flag(calibration) << ": " << percent(mean) << "\n";
  }
  write_file(fs::path(out_dir) / "ablation.csv", summary);
  write_file(fs::path(out_dir) / "ablation_runs.csv", runs);
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Few-shot segmentation with LoRA-adapted mask decoding and bi-level prompt optimisation", "amsam"};
  app.require_subcommand(1);

  CommonFlags gen_flags, train_flags, ablate_flags;
  std::string gen_out, train_data, train_out, eval_ckpt, eval_data, pred_ckpt, pred_image, pred_box, pred_mask,
      pred_out, ablate_data, ablate_out;
  std::optional<std::size_t> gen_count, gen_test_count;
  std::vector<std::uint64_t> ablate_seeds = {0, 1, 2};

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic few-shot dataset");
  gen->add_option("--out", gen_out, "Output directory")->required();
  gen->add_option("--count", gen_count, "Number of training samples");
  gen->add_option("--test-count", gen_test_count, "Number of held-out samples written to <out>/test");
  gen->add_option("--config", gen_flags.config_path, "key=value config file");
  gen->add_option("--seed", gen_flags.seed, "Generator seed");

  auto* tr = app.add_subcommand("train", "Run bi-level training and keep the best checkpoint on D2");
  tr->add_option("--data", train_data, "Dataset directory");
  tr->add_option("--out", train_out, "Output directory")->required();
  add_training_flags(tr, train_flags);

  auto* ev = app.add_subcommand("eval", "Print the mean dice (percent) of a checkpoint on a dataset");
  ev->add_option("--checkpoint", eval_ckpt, "Checkpoint file")->required();
  ev->add_option("--data", eval_data, "Dataset directory")->required();

  auto* pr = app.add_subcommand("predict", "Write the predicted mask of one image");
  pr->add_option("--checkpoint", pred_ckpt, "Checkpoint file")->required();
  pr->add_option("--image", pred_image, "Input image (binary graymap)")->required();
  pr->add_option("--box", pred_box, "Box prompt x1,y1,x2,y2 (overrides the detector)");
  pr->add_option("--mask", pred_mask, "Ground-truth mask for the oracle detector");
  pr->add_option("--out", pred_out, "Output mask path")->required();

  auto* ab = app.add_subcommand("ablate", "Box prompts x calibration ablation over several seeds");
  ab->add_option("--data", ablate_data, "Dataset directory (with a test/ subdirectory)");
  ab->add_option("--out", ablate_out, "Output directory")->required();
  ab->add_option("--seeds", ablate_seeds, "Seeds to average over")->delimiter(',');
  add_training_flags(ab, ablate_flags);

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp& e) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      out << app.help();
      return kExitOk;
    }
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(gen_flags, gen_out, gen_count, gen_test_count, out);
    if (tr->parsed()) return cmd_train(train_flags, train_data, train_out, out);
    if (ev->parsed()) return cmd_eval(eval_ckpt, eval_data, out);
    if (pr->parsed()) return cmd_predict(pred_ckpt, pred_image, pred_box, pred_mask, pred_out, out);
    if (ab->parsed()) return cmd_ablate(ablate_flags, ablate_data, ablate_out, ablate_seeds, out);
  } catch (const UsageError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const ConfigError& e) {
    err << "error: " << e.what() << "\n";
    return kExitUsage;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << "\n";
    return kExitRuntime;
  }
  return kExitUsage;
}

}  // namespace amsam
