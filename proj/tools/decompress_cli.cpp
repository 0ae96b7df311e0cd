// decompress: noise synthesis, training, denoising, evaluation, the wavelet
// baseline and rate-distortion sweeps from the command line.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "decompress/decompress.hpp"

namespace fs = std::filesystem;
namespace dc = decompress;

namespace {

std::string fmt(double v, int precision = 6) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", precision, v);
  return buf;
}

std::string real_str(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

/// RFC 4180 field quoting.
std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\r\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) out += c == '"' ? std::string("\"\"") : std::string(1, c);
  return out + "\"";
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary);
  if (!out) throw dc::IoError("cannot write " + path.string());
  out << text;
  if (!out) throw dc::IoError("write failed for " + path.string());
}

void ensure_parent(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
}

/// Options registered on one subcommand, remembered so the resolved values
/// can be echoed and a config file can fill the ones not given as flags.
class Command {
 public:
  Command(CLI::App& app, const std::string& name, const std::string& description)
      : sub_(app.add_subcommand(name, description)), name_(name) {
    sub_->add_option("--config", config_path_, "Read 'key = value' defaults from this file (flags override it)");
    threads_ = default_threads();
    add("--threads", threads_, "Worker threads for patch inference (default $DECOMPRESS_THREADS or 1)");
  }

  template <typename V>
  CLI::Option* add(const std::string& flag, V& var, const std::string& description) {
    CLI::Option* opt = sub_->add_option(flag, var, description);
    echo_.emplace_back(flag.substr(2), [&var] { return to_text(var); });
    return opt;
  }

  CLI::Option* add_flag(const std::string& flag, bool& var, const std::string& description) {
    CLI::Option* opt = sub_->add_flag(flag, var, description);
    echo_.emplace_back(flag.substr(2), [&var] { return std::string(var ? "true" : "false"); });
    return opt;
  }

  CLI::App* app() const { return sub_; }
  const std::string& name() const { return name_; }
  std::size_t threads() const { return threads_; }

  /// Fills options that were not given on the command line from --config.
  void apply_config_file() {
    if (config_path_.empty()) return;
    std::ifstream in(config_path_, std::ios::binary);
    if (!in) throw dc::IoError("cannot read config file " + config_path_);
    std::stringstream ss;
    ss << in.rdbuf();
    for (const auto& [key, value] : dc::parse_key_values(ss.str(), config_path_)) {
      if (key == "config") continue;
      CLI::Option* opt = nullptr;
      try {
        opt = sub_->get_option("--" + key);
      } catch (const CLI::OptionNotFound&) {
        throw dc::ConfigError(config_path_ + ": unknown key '" + key + "' for command " + name_);
      }
      if (opt->count() > 0) continue;
      if (opt->get_type_size() == 0) {
        if (value == "true") {
          opt->add_result("true");
        } else if (value != "false") {
          throw dc::ConfigError(config_path_ + ": '" + key + "' must be true or false");
        } else {
          continue;
        }
      } else {
        std::string list = value;
        std::replace(list.begin(), list.end(), ',', ' ');
        std::istringstream items(list);
        for (std::string item; items >> item;) opt->add_result(item);
      }
      try {
        opt->run_callback();
      } catch (const CLI::Error& e) {
        throw dc::ConfigError(config_path_ + ": bad value for '" + key + "': " + e.what());
      }
    }
  }

  /// Writes every resolved option as 'key = value' next to the primary output.
  void echo(const fs::path& primary_output) const {
    std::string text = "# resolved configuration for 'decompress " + name_ + "'\n";
    for (const auto& [key, render] : echo_) text += key + " = " + render() + "\n";
    write_text(fs::path(primary_output.string() + ".config"), text);
  }

 private:
  static std::size_t default_threads() {
    if (const char* env = std::getenv("DECOMPRESS_THREADS")) {
      try {
        const long v = std::stol(env);
        if (v > 0) return static_cast<std::size_t>(v);
      } catch (const std::exception&) {
      }
      throw dc::ConfigError("DECOMPRESS_THREADS must be a positive integer, got '" + std::string(env) + "'");
    }
    return 1;
  }

  static std::string to_text(const std::string& s) { return s; }
  static std::string to_text(double v) { return real_str(v); }
  template <typename V>
  static std::string to_text(const std::vector<V>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + to_text(v[i]);
    return out;
  }
  template <typename V>
  static std::string to_text(const V& v) {
    return std::to_string(v);
  }

  CLI::App* sub_;
  std::string name_;
  std::string config_path_;
  std::size_t threads_ = 1;
  std::vector<std::pair<std::string, std::function<std::string()>>> echo_;
};

// --- corpus handling ---------------------------------------------------------

struct CorpusEntry {
  std::string id;
  std::optional<dc::Image> clean;  // absent for DCF32 inputs
  dc::Image noisy;
};

std::vector<fs::path> list_images(const fs::path& corpus) {
  if (!fs::exists(corpus)) throw dc::IoError("corpus not found: " + corpus.string());
  std::vector<fs::path> files;
  if (fs::is_directory(corpus)) {
    for (const auto& entry : fs::directory_iterator(corpus))
      if (entry.is_regular_file() && dc::is_image_path(entry.path())) files.push_back(entry.path());
    std::sort(files.begin(), files.end());
    if (files.empty()) throw dc::ContractError("corpus directory " + corpus.string() + " contains no images");
  } else {
    files.push_back(corpus);
  }
  return files;
}

bool is_real_valued(const fs::path& path) { return dc::format_from_extension(path) == dc::ImageFormat::Dcf32; }

/// 8-bit images are clean and get AWGN with seed noise_seed + index; DCF32
/// images are taken as already noisy.
std::vector<CorpusEntry> load_corpus(const fs::path& corpus, double sigma, std::uint64_t noise_seed,
                                     std::size_t patch_size) {
  std::vector<CorpusEntry> out;
  const auto files = list_images(corpus);
  for (std::size_t i = 0; i < files.size(); ++i) {
    dc::Image img = dc::read_image(files[i]);
    if (img.height < patch_size || img.width < patch_size) {
      throw dc::GeometryError(files[i].string() + ": " + std::to_string(img.height) + "x" +
                              std::to_string(img.width) + " is smaller than one " + std::to_string(patch_size) +
                              "x" + std::to_string(patch_size) + " patch");
    }
    CorpusEntry e;
    e.id = files[i].filename().string();
    if (is_real_valued(files[i])) {
      e.noisy = std::move(img);
    } else {
      e.noisy = dc::add_awgn(img, {sigma, noise_seed + i});
      e.clean = std::move(img);
    }
    out.push_back(std::move(e));
  }
  return out;
}

// --- shared training options ----------------------------------------------------

struct TrainOptions {
  double sigma = 25;
  double lambda = 0;  // 0: derive from sigma
  std::size_t steps = 50000;
  std::size_t batch_size = 64;
  double learning_rate = 2e-4;
  std::uint64_t seed = 0;
  std::uint64_t noise_seed = 0;
  std::size_t patch_stride = 1;
  std::size_t max_patches = 0;
  std::size_t log_interval = 100;
  std::string precision = "f32";

  void register_on(Command& cmd, bool with_lambda) {
    cmd.add("--sigma", sigma, "Noise standard deviation on the 0..255 scale")->check(CLI::NonNegativeNumber);
    if (with_lambda) cmd.add("--lambda", lambda, "Rate weight (default from sigma: 15->300, 25->1000, 50->3000)");
    cmd.add("--steps", steps, "Optimizer steps");
    cmd.add("--batch-size", batch_size, "Patches per minibatch");
    cmd.add("--learning-rate", learning_rate, "Adam learning rate");
    cmd.add("--seed", seed, "Seed for initialization, patch order and quantization noise");
    cmd.add("--noise-seed", noise_seed, "Seed for synthesizing noise on 8-bit corpus images");
    cmd.add("--patch-stride", patch_stride, "Stride between training patches");
    cmd.add("--max-patches", max_patches, "Uniformly subsample at most this many patches (0 keeps all)");
    cmd.add("--log-interval", log_interval, "Steps per training-log row");
    cmd.add("--precision", precision, "Training arithmetic: f32 or f64")->check(CLI::IsMember({"f32", "f64"}));
  }

  double resolved_lambda() const {
    if (lambda > 0) return lambda;
    if (lambda < 0) throw dc::ConfigError("lambda must be positive");
    if (const auto v = dc::default_lambda_for_sigma(sigma)) return *v;
    throw dc::ConfigError("no default lambda for sigma " + real_str(sigma) + "; pass --lambda");
  }

  dc::TrainConfig config(double lam) const {
    dc::TrainConfig cfg;
    cfg.lambda = lam;
    cfg.learning_rate = learning_rate;
    cfg.batch_size = batch_size;
    cfg.steps = steps;
    cfg.seed = seed;
    cfg.patch_stride = patch_stride;
    cfg.max_patches = max_patches;
    cfg.log_interval = log_interval;
    cfg.require_standard_patch();
    cfg.validate();
    return cfg;
  }
};

struct Trained {
  dc::NeuralCodec<float> codec;
  std::vector<dc::LogRecord> log;
  std::size_t skipped = 0;
};

Trained run_training(const std::vector<CorpusEntry>& corpus, const dc::TrainConfig& cfg, const std::string& precision,
                     const std::function<void(const dc::LogRecord&)>& on_log) {
  std::vector<dc::Image> noisy;
  for (const auto& e : corpus) noisy.push_back(e.noisy);
  if (precision == "f64") {
    auto r = dc::train<double>(noisy, cfg, on_log);
    return {r.codec.cast<float>(), std::move(r.log), r.skipped_steps};
  }
  auto r = dc::train<float>(noisy, cfg, on_log);
  return {r.codec.cast<float>(), std::move(r.log), r.skipped_steps};
}

const char* kEvalHeader = "image,sigma,method,psnr_noisy,psnr_denoised,rate_bpp,seconds\n";

std::string eval_row(const std::string& image, double sigma, const std::string& method, double psnr_noisy,
                     double psnr_denoised, std::optional<double> rate, double seconds) {
  return csv_field(image) + "," + fmt(sigma, 2) + "," + method + "," + fmt(psnr_noisy, 4) + "," +
         fmt(psnr_denoised, 4) + "," + (rate ? fmt(*rate, 6) : std::string()) + "," + fmt(seconds, 3) + "\n";
}

// --- commands --------------------------------------------------------------------

struct SynthNoise {
  std::string clean, out;
  double sigma = 25;
  std::uint64_t seed = 0;

  void register_on(Command& cmd) {
    cmd.add("--clean", clean, "Clean 8-bit image (PGM or PNG)")->required();
    cmd.add("--sigma", sigma, "Noise standard deviation")->check(CLI::NonNegativeNumber);
    cmd.add("--seed", seed, "Noise seed");
    cmd.add("--out", out, "Output DCF32 path; an 8-bit preview is written to <out>.preview.png")->required();
  }

  void run(const Command& cmd) const {
    const dc::Image img = dc::read_image(clean);
    const dc::Image noisy = dc::add_awgn(img, {sigma, seed});
    ensure_parent(out);
    dc::detail::write_file(out, dc::encode_dcf32(noisy));
    dc::write_png(out + ".preview.png", noisy);
    cmd.echo(out);
    std::cout << "psnr_noisy " << fmt(dc::psnr(img, noisy), 4) << "\n";
  }
};

struct Train {
  std::string corpus, out, log_path;
  TrainOptions opts;

  void register_on(Command& cmd) {
    cmd.add("--corpus", corpus, "Training image or directory of images")->required();
    opts.register_on(cmd, true);
    cmd.add("--out", out, "Checkpoint path")->required();
    cmd.add("--log", log_path, "Training log CSV (default <out>.log.csv)");
  }

  void run(const Command& cmd) const {
    const double lambda = opts.resolved_lambda();
    const dc::TrainConfig cfg = opts.config(lambda);
    const auto entries = load_corpus(corpus, opts.sigma, opts.noise_seed, cfg.arch.patch_size);
    const fs::path log_file = log_path.empty() ? fs::path(out + ".log.csv") : fs::path(log_path);
    ensure_parent(out);
    cmd.echo(out);

    write_text(log_file, "step,D,R,total,wall_ms\n");
    std::ofstream log(log_file, std::ios::app);
    const Trained t = run_training(entries, cfg, opts.precision, [&](const dc::LogRecord& r) {
      log << r.step << "," << fmt(r.loss.distortion) << "," << fmt(r.loss.rate) << "," << fmt(r.loss.total)
          << "," << fmt(r.wall_ms, 1) << "\n";
      log.flush();
    });
    dc::CheckpointMeta meta;
    meta.lambda = lambda;
    meta.sigma = opts.sigma;
    meta.steps = opts.steps;
    meta.seed = opts.seed;
    auto codec = t.codec;
    dc::save_checkpoint(codec, meta, out);
    std::cout << "trained " << opts.steps << " steps on " << entries.size() << " image(s), lambda " << real_str(lambda)
              << ", skipped " << t.skipped << "\n";
  }
};

struct Denoise {
  std::string ckpt, noisy, out;
  std::size_t stride = 1;

  void register_on(Command& cmd) {
    cmd.add("--ckpt", ckpt, "Checkpoint")->required();
    cmd.add("--noisy", noisy, "Noisy image (DCF32, PGM or PNG)")->required();
    cmd.add("--out", out, "Denoised image (PGM, PNG or DCF32 by extension)")->required();
    cmd.add("--stride", stride, "Patch stride at inference (1 = every position)");
  }

  void run(const Command& cmd) const {
    auto loaded = dc::load_checkpoint<float>(ckpt);
    dc::DenoiseOptions o;
    o.stride = stride;
    o.threads = cmd.threads();
    const auto r = dc::denoise_detailed(dc::read_image(noisy), loaded.codec, o);
    ensure_parent(out);
    dc::write_image(out, r.image);
    cmd.echo(out);
    std::cout << "patches " << r.patches << " rate_bpp " << fmt(r.mean_rate_bpp) << "\n";
  }
};

struct Eval {
  std::string ckpt, clean, noisy, report, out_image;
  double sigma = -1;
  std::size_t stride = 1;
  bool baseline = false;
  std::size_t levels = 3;

  void register_on(Command& cmd) {
    cmd.add("--ckpt", ckpt, "Checkpoint")->required();
    cmd.add("--clean", clean, "Reference image")->required();
    cmd.add("--noisy", noisy, "Noisy image")->required();
    cmd.add("--report", report, "CSV report")->required();
    cmd.add("--sigma", sigma, "Sigma recorded in the report (default: the checkpoint's)");
    cmd.add("--stride", stride, "Patch stride at inference");
    cmd.add("--out", out_image, "Also write the denoised image here");
    cmd.add_flag("--baseline", baseline, "Append a wavelet-baseline row for the same input");
    cmd.add("--levels", levels, "Wavelet levels for --baseline");
  }

  void run(const Command& cmd) const {
    auto loaded = dc::load_checkpoint<float>(ckpt);
    const double s = sigma >= 0 ? sigma : loaded.meta.sigma;
    const dc::Image ref = dc::read_image(clean), in = dc::read_image(noisy);
    dc::DenoiseOptions o;
    o.stride = stride;
    o.threads = cmd.threads();
    const std::string id = fs::path(noisy).filename().string();
    const auto ev = dc::evaluate(ref, in, loaded.codec, id, s, o);
    std::string csv = kEvalHeader;
    csv += eval_row(id, s, "decompress", ev.report.psnr_noisy, ev.report.psnr_denoised, ev.report.rate_bpp,
                    ev.report.seconds);
    if (baseline) {
      const auto start = std::chrono::steady_clock::now();
      const dc::Image b = dc::bayes_shrink_denoise(in, s, levels);
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
      csv += eval_row(id, s, "wavelet", ev.report.psnr_noisy, dc::psnr(ref, b), std::nullopt, secs);
    }
    write_text(report, csv);
    if (!out_image.empty()) {
      ensure_parent(out_image);
      dc::write_image(out_image, ev.denoised);
    }
    cmd.echo(report);
    std::cout << csv;
  }
};

struct Baseline {
  std::string noisy, out, clean, report;
  double sigma = 25;
  std::size_t levels = 3;

  void register_on(Command& cmd) {
    cmd.add("--noisy", noisy, "Noisy image")->required();
    cmd.add("--sigma", sigma, "Noise standard deviation")->check(CLI::NonNegativeNumber);
    cmd.add("--out", out, "Denoised image")->required();
    cmd.add("--levels", levels, "Haar decomposition levels");
    cmd.add("--clean", clean, "Reference image; enables the PSNR report");
    cmd.add("--report", report, "CSV report (requires --clean)");
  }

  void run(const Command& cmd) const {
    const dc::Image in = dc::read_image(noisy);
    const auto start = std::chrono::steady_clock::now();
    const dc::Image result = dc::bayes_shrink_denoise(in, sigma, levels);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    ensure_parent(out);
    dc::write_image(out, result);
    cmd.echo(out);
    if (!report.empty() && clean.empty()) throw dc::ConfigError("--report requires --clean");
    if (!clean.empty()) {
      const dc::Image ref = dc::read_image(clean);
      const std::string row = eval_row(fs::path(noisy).filename().string(), sigma, "wavelet", dc::psnr(ref, in),
                                       dc::psnr(ref, result), std::nullopt, secs);
      if (!report.empty()) write_text(report, std::string(kEvalHeader) + row);
      std::cout << kEvalHeader << row;
    }
  }
};

struct RdSweep {
  std::string corpus, report;
  std::vector<double> lambdas{300, 1000, 3000};
  std::size_t eval_stride = 1;
  TrainOptions opts;

  void register_on(Command& cmd) {
    cmd.add("--corpus", corpus, "Clean 8-bit image or directory (noised with --sigma/--noise-seed)")->required();
    opts.register_on(cmd, false);
    cmd.add("--lambdas", lambdas, "Comma-separated rate weights")->delimiter(',');
    cmd.add("--report", report, "CSV report")->required();
    cmd.add("--eval-stride", eval_stride, "Patch stride for the final rate/distortion and denoising pass");
  }

  void run(const Command& cmd) const {
    if (lambdas.empty()) throw dc::ConfigError("--lambdas is empty");
    const auto entries = load_corpus(corpus, opts.sigma, opts.noise_seed, 16);
    ensure_parent(report);
    cmd.echo(report);
    std::string csv = "lambda,D,R,psnr_denoised\n";
    for (double lambda : lambdas) {
      const Trained t = run_training(entries, opts.config(lambda), opts.precision, {});
      dc::DenoiseOptions o;
      o.stride = eval_stride;
      o.threads = cmd.threads();
      double d = 0, r = 0, psnr_sum = 0, patches = 0;
      std::size_t scored = 0;
      for (const auto& e : entries) {
        const auto res = dc::denoise_detailed(e.noisy, t.codec, o);
        const double n = static_cast<double>(res.patches);
        d += res.mean_patch_distortion * n;
        r += res.mean_rate_bpp * n;
        patches += n;
        if (e.clean) {
          psnr_sum += dc::psnr(*e.clean, res.image);
          ++scored;
        }
      }
      csv += real_str(lambda) + "," + fmt(d / patches) + "," + fmt(r / patches) + "," +
             (scored ? fmt(psnr_sum / static_cast<double>(scored), 4) : std::string()) + "\n";
      write_text(report, csv);
    }
    std::cout << csv;
  }
};

std::string one_line(std::string s) {
  std::replace(s.begin(), s.end(), '\n', ' ');
  std::replace(s.begin(), s.end(), '\r', ' ');
  return s;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Compression-based image denoising"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every command");

  try {
    Command synth_cmd(app, "synth-noise", "Add seeded Gaussian noise to a clean image");
    Command train_cmd(app, "train", "Train a codec on noisy patches");
    Command denoise_cmd(app, "denoise", "Denoise an image with a trained codec");
    Command eval_cmd(app, "eval", "Denoise and report PSNR against a clean reference");
    Command baseline_cmd(app, "baseline", "Wavelet soft-thresholding baseline");
    Command sweep_cmd(app, "rd-sweep", "Train one codec per lambda and report rate and distortion");

    SynthNoise synth;
    Train train;
    Denoise denoise;
    Eval eval;
    Baseline baseline;
    RdSweep sweep;
    synth.register_on(synth_cmd);
    train.register_on(train_cmd);
    denoise.register_on(denoise_cmd);
    eval.register_on(eval_cmd);
    baseline.register_on(baseline_cmd);
    sweep.register_on(sweep_cmd);

    // Required flags may come from --config, so defer that check.
    std::vector<std::pair<Command*, CLI::Option*>> required;
    for (Command* c : {&synth_cmd, &train_cmd, &denoise_cmd, &eval_cmd, &baseline_cmd, &sweep_cmd})
      for (CLI::Option* o : c->app()->get_options())
        if (o->get_required()) {
          o->required(false);
          required.emplace_back(c, o);
        }

    try {
      app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
      return app.exit(e);
    } catch (const CLI::CallForAllHelp& e) {
      return app.exit(e);
    } catch (const CLI::ParseError& e) {
      std::cerr << "error: kind=usage message=" << one_line(e.what()) << "\n";
      return 2;
    }

    const std::vector<std::pair<Command*, std::function<void(const Command&)>>> commands = {
        {&synth_cmd, [&](const Command& c) { synth.run(c); }},
        {&train_cmd, [&](const Command& c) { train.run(c); }},
        {&denoise_cmd, [&](const Command& c) { denoise.run(c); }},
        {&eval_cmd, [&](const Command& c) { eval.run(c); }},
        {&baseline_cmd, [&](const Command& c) { baseline.run(c); }},
        {&sweep_cmd, [&](const Command& c) { sweep.run(c); }},
    };
    for (auto& [cmd, run] : commands) {
      if (!cmd->app()->parsed()) continue;
      cmd->apply_config_file();
      for (auto [owner, o] : required) {
        if (owner == cmd && o->count() == 0) {
          std::cerr << "error: kind=usage message=" << o->get_name() << " is required\n";
          return 2;
        }
      }
      run(*cmd);
    }
    return 0;
  } catch (const dc::Error& e) {
    std::cerr << "error: kind=" << e.kind() << " message=" << one_line(e.what()) << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: kind=internal message=" << one_line(e.what()) << "\n";
    return 1;
  }
}
