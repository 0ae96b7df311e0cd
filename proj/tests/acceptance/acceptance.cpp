// End-to-end acceptance suite. Prints one PASS/FAIL line per criterion and
// exits nonzero if any criterion fails. Criteria 5, 6, 7 and 9 drive the
// command-line tool; the rest exercise the library directly.

#include <sys/resource.h>
#include <sys/wait.h>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iostream>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "decompress/decompress.hpp"
#include "gradcheck.hpp"

namespace dc = decompress;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

struct Context {
  fs::path work;
  fs::path data;
  std::string cli;
};

std::string fmt(const char* spec, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, spec, v);
  return buf;
}

// User plus system CPU seconds of this process and its reaped children.
double cpu_seconds() {
  double total = 0;
  for (int who : {RUSAGE_SELF, RUSAGE_CHILDREN}) {
    rusage u{};
    getrusage(who, &u);
    total += static_cast<double>(u.ru_utime.tv_sec + u.ru_stime.tv_sec) +
             1e-6 * static_cast<double>(u.ru_utime.tv_usec + u.ru_stime.tv_usec);
  }
  return total;
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  if (!in) throw dc::IoError("cannot read " + p.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

using Table = std::vector<std::map<std::string, std::string>>;

Table read_csv(const fs::path& p) {
  std::istringstream in(slurp(p));
  auto split = [](const std::string& line) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ls(line);
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    return cells;
  };
  std::string line;
  std::getline(in, line);
  const auto header = split(line);
  Table rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto cells = split(line);
    std::map<std::string, std::string> row;
    for (std::size_t i = 0; i < header.size() && i < cells.size(); ++i) row[header[i]] = cells[i];
    rows.push_back(std::move(row));
  }
  return rows;
}

/// The CSV text with the named timing column blanked, for byte comparison.
std::string mask_column(const fs::path& p, const std::string& column) {
  std::istringstream in(slurp(p));
  std::string out, line;
  std::ptrdiff_t index = -1;
  for (bool first = true; std::getline(in, line); first = false) {
    std::vector<std::string> cells;
    std::string cell;
    std::istringstream ls(line);
    while (std::getline(ls, cell, ',')) cells.push_back(cell);
    if (!line.empty() && line.back() == ',') cells.emplace_back();
    if (first) {
      const auto it = std::find(cells.begin(), cells.end(), column);
      if (it != cells.end()) index = it - cells.begin();
    } else if (index >= 0 && static_cast<std::size_t>(index) < cells.size()) {
      cells[static_cast<std::size_t>(index)] = "*";
    }
    for (std::size_t i = 0; i < cells.size(); ++i) out += (i ? "," : "") + cells[i];
    out += "\n";
  }
  return out;
}

double number(const std::map<std::string, std::string>& row, const std::string& key) {
  const auto it = row.find(key);
  if (it == row.end() || it->second.empty()) throw dc::FormatError("report lacks a value for " + key);
  return std::stod(it->second);
}

/// Runs the command-line tool; output goes to <log>. Throws on a nonzero exit.
void run_cli(const Context& ctx, const std::string& args, const fs::path& log) {
  const std::string cmd = "\"" + ctx.cli + "\" " + args + " > \"" + log.string() + "\" 2>&1";
  const int raw = std::system(cmd.c_str());
  const int status = WIFEXITED(raw) ? WEXITSTATUS(raw) : -1;
  if (status != 0) {
    std::string tail = fs::exists(log) ? slurp(log) : std::string();
    if (tail.size() > 400) tail = tail.substr(tail.size() - 400);
    throw dc::Error("cli", "command failed (exit " + std::to_string(status) + "): " + args + "\n" + tail);
  }
}

std::string q(const fs::path& p) { return "\"" + p.string() + "\""; }

// --- criterion 1 -------------------------------------------------------------

Outcome gradient_fidelity() {
  const dc::CodecConfig mini{8, 4, 2, 3, 255.0};
  double worst = 0;
  std::string where;
  std::size_t checked = 0;
  // The loss is O(1e4), so round-off in the difference quotient is about
  // 1e-16 * |L| / eps; eps = 1e-4 balances it against truncation error.
  for (std::uint64_t seed : {11u, 12u, 13u, 14u, 15u}) {
    dc::Rng rng(seed);
    dc::NeuralCodec<double> codec(mini, rng);
    dc::Tensor<double> y({3, 1, 8, 8});
    for (auto& v : y.data()) v = rng.uniform(0, 255);
    dc::Tensor<double> noise({3, 2, 1, 1});
    for (auto& v : noise.data()) v = rng.uniform(-0.5, 0.5);
    const auto r = dc::testing::check_gradients<double>(
        codec.named_parameters(), [&] { return dc::rd_loss_with_noise(y, codec, 1000.0, noise).total; }, 1e-4);
    checked += r.checked;
    if (r.max_rel_error >= worst) {
      worst = r.max_rel_error;
      where = r.worst;
    }
  }
  return {worst <= 1e-3, "max rel error " + fmt("%.2e", worst) + " over " + std::to_string(checked) +
                             " parameters (limit 1e-3); worst " + where};
}

// --- criterion 2 -------------------------------------------------------------

// CDF range and monotonicity are checked on randomized parameters. The pmf
// sum and the Monte-Carlo entropy are checked at the default initialization:
// every bin is floored at 1e-9, so a sharply peaked random prior sums to
// slightly above 1 over 201 bins, and its near-zero entropy makes a relative
// comparison meaningless.
Outcome entropy_soundness() {
  using Prior = dc::FactorizedPrior<double>;
  std::vector<double> grid;
  for (int i = -3000; i <= 3000; ++i) grid.push_back(i * 0.01);
  dc::Rng rng(21);
  std::size_t bad_cdf = 0, bad_sum = 0;
  double min_sum = 2, max_sum = 0, worst_mc = 0;
  for (int draw = 0; draw < 100; ++draw) {
    Prior random(1, rng);
    for (auto& [name, t] : random.named_parameters())
      for (auto& v : t->data()) v = rng.uniform(-2.0, 2.0);
    const auto f = dc::channel_cdf<double>(random, 0, grid);
    for (std::size_t i = 0; i < f.size(); ++i)
      if (!(f[i] > 0 && f[i] < 1) || (i > 0 && f[i] < f[i - 1])) {
        ++bad_cdf;
        break;
      }

    const Prior fresh(1, rng);
    const auto m = dc::channel_pmf(fresh, 0, -100, 100);
    double sum = 0, entropy = 0;
    for (double v : m) sum += v;
    min_sum = std::min(min_sum, sum);
    max_sum = std::max(max_sum, sum);
    if (!(sum >= 0.999 && sum <= 1.0)) ++bad_sum;

    // Sample symbols from the normalized pmf and compare the mean code length
    // with the analytic entropy.
    std::vector<double> cumulative(m.size());
    double acc = 0;
    for (std::size_t i = 0; i < m.size(); ++i) {
      entropy -= (m[i] / sum) * std::log2(m[i]);
      cumulative[i] = (acc += m[i] / sum);
    }
    const int samples = 20000;
    double bits = 0;
    for (int s = 0; s < samples; ++s) {
      const auto it = std::lower_bound(cumulative.begin(), cumulative.end(), rng.uniform());
      bits -= std::log2(m[std::min<std::size_t>(it - cumulative.begin(), m.size() - 1)]);
    }
    bits /= samples;
    worst_mc = std::max(worst_mc, std::abs(bits / entropy - 1.0));
  }
  const bool pass = bad_cdf == 0 && bad_sum == 0 && worst_mc <= 0.02;
  return {pass, std::to_string(bad_cdf) + "/100 random priors with a non-monotone or out-of-range CDF; default-init "
                "pmf sums in [" + fmt("%.6f", min_sum) + ", " + fmt("%.6f", max_sum) + "] (" +
                    std::to_string(bad_sum) + "/100 outside [0.999, 1]); worst Monte-Carlo entropy deviation " +
                    fmt("%.2f%%", 100 * worst_mc) + " (limit 2%)"};
}

// --- criterion 3 -------------------------------------------------------------

Outcome patch_oracles() {
  dc::Rng rng(31);
  const std::size_t p = 16;
  std::size_t failures = 0;
  std::string first;
  auto fail = [&](const std::string& why) {
    if (failures++ == 0) first = why;
  };
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t h = p + rng.below(60), w = p + rng.below(60);
    const std::string tag = std::to_string(h) + "x" + std::to_string(w);
    dc::Image img(h, w);
    for (auto& v : img.pixels) v = static_cast<float>(rng.uniform(-40, 300));

    std::size_t brute = 0;
    std::vector<std::uint32_t> cover(h * w, 0);
    for (std::size_t r = 0; r + p <= h; ++r)
      for (std::size_t c = 0; c + p <= w; ++c) {
        ++brute;
        for (std::size_t i = 0; i < p; ++i)
          for (std::size_t j = 0; j < p; ++j) ++cover[(r + i) * w + c + j];
      }
    if (brute != (h - p + 1) * (w - p + 1)) fail(tag + ": closed-form count");
    if (dc::extract_patches(img, p, 1).size() != brute) fail(tag + ": extract_patches count");
    if (dc::coverage_counts(h, w, p, 1) != cover) fail(tag + ": coverage buffer");

    const auto out = dc::assemble_overlapping(img, p, {}, [&](std::size_t, const float* in, std::size_t n, float* o) {
      std::copy(in, in + n * p * p, o);
    });
    if (out.patches != brute) fail(tag + ": assembled patch count");
    if (out.image != img) fail(tag + ": identity reassembly is not exact");
  }
  return {failures == 0, failures == 0 ? "50 random sizes: counts, coverage and identity reassembly exact"
                                       : std::to_string(failures) + " mismatches; first: " + first};
}

// --- criterion 4 -------------------------------------------------------------

Outcome noise_calibration(const Context& ctx) {
  const fs::path dir = ctx.work / "c4";
  fs::create_directories(dir);
  run_cli(ctx, "synth-noise --clean " + q(ctx.data / "camera_256.pgm") + " --sigma 25 --seed 4 --out " +
                   q(dir / "noisy.dcf32"),
          dir / "synth.log");
  const double p = dc::psnr(dc::read_image(ctx.data / "camera_256.pgm"), dc::read_image(dir / "noisy.dcf32"));
  const double expected = 10 * std::log10(255.0 * 255.0 / 625.0);
  return {std::abs(p - expected) <= 0.15,
          "PSNR " + fmt("%.4f", p) + " dB vs closed form " + fmt("%.4f", expected) + " dB (tolerance 0.15)"};
}

// --- criteria 5 to 7 -----------------------------------------------------------

struct RunFiles {
  fs::path dir;
  fs::path sweep() const { return dir / "sweep.csv"; }
  fs::path model() const { return dir / "model.dcmp"; }
  fs::path train_log() const { return dir / "model.dcmp.log.csv"; }
  fs::path eval() const { return dir / "eval.csv"; }
  fs::path denoised() const { return dir / "denoised.dcf32"; }
  fs::path self_eval() const { return dir / "self_eval.csv"; }
  fs::path self_denoised() const { return dir / "self_denoised.dcf32"; }
  fs::path train_noisy() const { return dir / "train_noisy.dcf32"; }
  fs::path test_noisy() const { return dir / "test_noisy.dcf32"; }
};

constexpr double kSweepBudgetSeconds = 30 * 60;
constexpr double kTrainBudgetSeconds = 2 * 60 * 60;

struct TimedRun {
  double sweep_cpu = 0;
  double denoise_cpu = 0;
};

TimedRun sweep_run(const Context& ctx, const RunFiles& f) {
  fs::create_directories(f.dir);
  const double t0 = cpu_seconds();
  run_cli(ctx,
          "rd-sweep --corpus " + q(ctx.data / "astronaut_256.pgm") +
              " --sigma 25 --noise-seed 101 --lambdas 300,1000,3000 --steps 5000 --batch-size 64"
              " --max-patches 20000 --seed 5 --eval-stride 4 --report " +
              q(f.sweep()),
          f.dir / "sweep.log");
  return {cpu_seconds() - t0, 0};
}

TimedRun denoise_run(const Context& ctx, const RunFiles& f) {
  fs::create_directories(f.dir);
  run_cli(ctx, "synth-noise --clean " + q(ctx.data / "astronaut_256.pgm") + " --sigma 25 --seed 101 --out " +
                   q(f.train_noisy()),
          f.dir / "synth_train.log");
  run_cli(ctx, "synth-noise --clean " + q(ctx.data / "camera_256.pgm") + " --sigma 25 --seed 202 --out " +
                   q(f.test_noisy()),
          f.dir / "synth_test.log");
  const double t0 = cpu_seconds();
  run_cli(ctx,
          "train --corpus " + q(f.train_noisy()) +
              " --sigma 25 --lambda 1000 --steps 20000 --batch-size 64 --seed 7 --log-interval 500 --out " +
              q(f.model()),
          f.dir / "train.log");
  run_cli(ctx,
          "eval --ckpt " + q(f.model()) + " --clean " + q(ctx.data / "camera_256.pgm") + " --noisy " +
              q(f.test_noisy()) + " --report " + q(f.eval()) + " --out " + q(f.denoised()) + " --baseline",
          f.dir / "eval.log");
  const double elapsed = cpu_seconds() - t0;
  run_cli(ctx,
          "eval --ckpt " + q(f.model()) + " --clean " + q(f.train_noisy()) + " --noisy " + q(f.train_noisy()) +
              " --report " + q(f.self_eval()) + " --out " + q(f.self_denoised()),
          f.dir / "self_eval.log");
  return {0, elapsed};
}

Outcome rate_monotonicity(const RunFiles& f, double cpu) {
  const Table rows = read_csv(f.sweep());
  std::string listing;
  bool decreasing = rows.size() == 3;
  for (std::size_t i = 0; i < rows.size(); ++i) {
    listing += (i ? ", " : "") + std::string("R(") + rows[i].at("lambda") + ")=" + rows[i].at("R");
    if (i > 0 && !(number(rows[i], "R") < number(rows[i - 1], "R"))) decreasing = false;
  }
  const bool in_budget = cpu <= kSweepBudgetSeconds;
  return {decreasing && in_budget, listing + (decreasing ? " strictly decreasing" : " NOT strictly decreasing") +
                                       "; CPU " + fmt("%.0f", cpu) + " s (budget " +
                                       fmt("%.0f", kSweepBudgetSeconds) + " s" +
                                       (in_budget ? ")" : ", exceeded)")};
}

Outcome denoising_gain(const RunFiles& f, double cpu) {
  const Table rows = read_csv(f.eval());
  double noisy = 0, ours = 0, wavelet = 0;
  for (const auto& r : rows) {
    if (r.at("method") == "decompress") {
      noisy = number(r, "psnr_noisy");
      ours = number(r, "psnr_denoised");
    } else if (r.at("method") == "wavelet") {
      wavelet = number(r, "psnr_denoised");
    }
  }
  const bool gain = ours >= noisy + 4.0;
  const bool beats = ours > wavelet;
  const bool in_budget = cpu <= kTrainBudgetSeconds;
  return {gain && beats && in_budget,
          "noisy " + fmt("%.2f", noisy) + " dB, denoised " + fmt("%.2f", ours) + " dB (need >= " +
              fmt("%.2f", noisy + 4.0) + "), wavelet " + fmt("%.2f", wavelet) + " dB; CPU " + fmt("%.0f", cpu) +
              " s (budget " + fmt("%.0f", kTrainBudgetSeconds) + " s" + (in_budget ? ")" : ", exceeded)")};
}

Outcome no_overfitting(const RunFiles& f) {
  const Table rows = read_csv(f.self_eval());
  if (rows.empty()) return {false, "empty self-evaluation report"};
  const double p = number(rows.front(), "psnr_denoised");
  const double r = number(rows.front(), "rate_bpp");
  return {p <= 45.0 && r > 0.01, "reconstruction of the noisy training image " + fmt("%.2f", p) +
                                     " dB (limit 45), rate " + fmt("%.4f", r) + " bpp (must exceed 0.01)"};
}

// --- criterion 8 -------------------------------------------------------------

dc::Image phantom(std::size_t n) {
  dc::Image img(n, n);
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t c = 0; c < n; ++c) {
      float v = 60;
      if (r >= n / 8 && r < n / 2 && c >= n / 8 && c < 7 * n / 8) v = 200;
      const double dr = r - 0.7 * n, dcol = c - 0.5 * n;
      if (dr * dr + dcol * dcol < 0.04 * n * n) v = 120;
      img.at(r, c) = v;
    }
  return img;
}

Outcome wavelet_baseline() {
  dc::Rng rng(81);
  double worst_rel = 0;
  for (int trial = 0; trial < 10; ++trial) {
    dc::Plane x(8 * (1 + rng.below(32)), 8 * (1 + rng.below(32)));
    for (double& v : x.data) v = rng.uniform(0, 255);
    const dc::Plane y = dc::haar_inverse(dc::haar_forward(x, 3));
    double err = 0, norm = 0;
    for (std::size_t i = 0; i < x.size(); ++i) {
      err += (y.data[i] - x.data[i]) * (y.data[i] - x.data[i]);
      norm += x.data[i] * x.data[i];
    }
    worst_rel = std::max(worst_rel, std::sqrt(err / norm));
  }
  const dc::Image clean = phantom(256);
  const dc::Image noisy = dc::add_awgn(clean, {25.0, 82});
  const double before = dc::psnr(clean, noisy);
  const double after = dc::psnr(clean, dc::bayes_shrink_denoise(noisy, 25.0));
  return {worst_rel <= 1e-9 && after - before >= 2.0,
          "reconstruction rel. error " + fmt("%.1e", worst_rel) + " (limit 1e-9); phantom " + fmt("%.2f", before) +
              " -> " + fmt("%.2f", after) + " dB, gain " + fmt("%.2f", after - before) + " dB (need >= 2)"};
}

// --- criterion 9 -------------------------------------------------------------

Outcome reproducibility(const RunFiles& a, const RunFiles& b) {
  struct Artifact {
    std::string name;
    std::function<std::string(const RunFiles&)> bytes;
  };
  const std::vector<Artifact> artifacts = {
      {"sweep report", [](const RunFiles& f) { return slurp(f.sweep()); }},
      {"checkpoint", [](const RunFiles& f) { return slurp(f.model()); }},
      {"training log", [](const RunFiles& f) { return mask_column(f.train_log(), "wall_ms"); }},
      {"eval report", [](const RunFiles& f) { return mask_column(f.eval(), "seconds"); }},
      {"denoised image", [](const RunFiles& f) { return slurp(f.denoised()); }},
      {"self-eval report", [](const RunFiles& f) { return mask_column(f.self_eval(), "seconds"); }},
      {"self-denoised image", [](const RunFiles& f) { return slurp(f.self_denoised()); }},
  };
  std::vector<std::string> differing;
  for (const auto& art : artifacts)
    if (art.bytes(a) != art.bytes(b)) differing.push_back(art.name);
  std::string detail = std::to_string(artifacts.size() - differing.size()) + "/" +
                       std::to_string(artifacts.size()) + " artifacts byte-identical (timing columns masked)";
  for (std::size_t i = 0; i < differing.size(); ++i) detail += (i ? ", " : "; differ: ") + differing[i];
  return {differing.empty(), detail};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance suite"};
  Context ctx;
  std::string work;
  std::string data = DECOMPRESS_TEST_DATA;
  ctx.cli = DECOMPRESS_CLI_PATH;
  std::vector<int> only;
  app.add_option("--work-dir", work, "Scratch directory for end-to-end runs")->required();
  app.add_option("--data", data, "Directory holding the test images");
  app.add_option("--cli", ctx.cli, "Path of the command-line tool");
  app.add_option("--only", only, "Run only these criteria (comma-separated)")->delimiter(',');
  CLI11_PARSE(app, argc, argv);
  ctx.work = work;
  ctx.data = data;

  const std::set<int> selected(only.begin(), only.end());
  auto wanted = [&](int id) { return selected.empty() || selected.count(id) != 0; };

  int failures = 0;
  auto report = [&](int id, const std::string& name, const std::function<Outcome()>& body) {
    if (!wanted(id)) return;
    const auto start = std::chrono::steady_clock::now();
    Outcome o;
    try {
      o = body();
    } catch (const std::exception& e) {
      o = {false, std::string("error: ") + e.what()};
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (!o.pass) ++failures;
    std::cout << "criterion " << id << " " << (o.pass ? "PASS" : "FAIL") << " [" << name << "] " << o.detail << " ("
              << fmt("%.1f", secs) << " s wall)" << std::endl;
  };

  report(1, "gradient fidelity", gradient_fidelity);
  report(2, "entropy model soundness", entropy_soundness);
  report(3, "patch and assembly oracles", patch_oracles);
  report(4, "noise and PSNR calibration", [&] { return noise_calibration(ctx); });

  const RunFiles run_a{ctx.work / "run_a"}, run_b{ctx.work / "run_b"};
  for (const auto& f : {run_a, run_b}) fs::remove_all(f.dir);

  TimedRun sweep_a, denoise_a;
  bool sweep_ok = false, denoise_ok = false;
  std::string sweep_error, denoise_error;
  if (wanted(5) || wanted(9)) {
    try {
      sweep_a = sweep_run(ctx, run_a);
      sweep_ok = true;
    } catch (const std::exception& e) {
      sweep_error = e.what();
    }
  }
  if (wanted(6) || wanted(7) || wanted(9)) {
    try {
      denoise_a = denoise_run(ctx, run_a);
      denoise_ok = true;
    } catch (const std::exception& e) {
      denoise_error = e.what();
    }
  }
  report(5, "lambda-rate monotonicity", [&] {
    if (!sweep_ok) throw dc::Error("cli", sweep_error);
    return rate_monotonicity(run_a, sweep_a.sweep_cpu);
  });
  report(6, "denoising gain", [&] {
    if (!denoise_ok) throw dc::Error("cli", denoise_error);
    return denoising_gain(run_a, denoise_a.denoise_cpu);
  });
  report(7, "no overfitting", [&] {
    if (!denoise_ok) throw dc::Error("cli", denoise_error);
    return no_overfitting(run_a);
  });
  report(8, "wavelet baseline", wavelet_baseline);
  report(9, "reproducibility", [&] {
    if (!sweep_ok || !denoise_ok) throw dc::Error("cli", "first run incomplete: " + sweep_error + denoise_error);
    sweep_run(ctx, run_b);
    denoise_run(ctx, run_b);
    return reproducibility(run_a, run_b);
  });

  std::cout << (failures == 0 ? "all criteria passed" : std::to_string(failures) + " criteria failed") << std::endl;
  return failures == 0 ? 0 : 1;
}
