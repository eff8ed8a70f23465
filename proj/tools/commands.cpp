#include "commands.hpp"

#include <CLI11.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <limits>
#include <map>
#include <mutex>
#include <optional>
#include <ostream>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "manifest.hpp"
#include "qsm/dipole.hpp"
#include "qsm/error.hpp"
#include "qsm/field_prep.hpp"
#include "qsm/inversion.hpp"
#include "qsm/metrics.hpp"
#include "qsm/nn/checkpoint.hpp"
#include "qsm/nn/train.hpp"
#include "qsm/phantom.hpp"
#include "qsm/volume.hpp"
#include "qsm/volume_io.hpp"
#include "slice_export.hpp"

namespace qsm::tools {
namespace {

namespace fs = std::filesystem;
using json = nlohmann::json;

constexpr int kExitUsage = 2;
constexpr int kExitInternal = 1;

constexpr ErrorCode kAllCodes[] = {
    ErrorCode::invalid_argument, ErrorCode::dim_mismatch,      ErrorCode::unit_mismatch,
    ErrorCode::non_finite,       ErrorCode::empty_mask,        ErrorCode::bad_magic,
    ErrorCode::bad_header,       ErrorCode::invalid_dims,      ErrorCode::unknown_unit,
    ErrorCode::truncated_payload, ErrorCode::payload_mismatch, ErrorCode::io_failure,
    ErrorCode::not_converged,    ErrorCode::diverged,          ErrorCode::ill_conditioned,
    ErrorCode::shape_rejected,   ErrorCode::memory_cap,        ErrorCode::checkpoint_mismatch,
};

std::string exit_code_footer() {
  std::ostringstream s;
  s << "Exit codes:\n  0   success\n  1   internal error\n  2   usage error (unknown flag, bad value)\n";
  for (ErrorCode c : kAllCodes) {
    s << "  " << std::left << std::setw(4) << static_cast<int>(c) << error_code_name(c) << "\n";
  }
  s << "Failures print {\"error\": {code, exit_code, message}} on stderr.";
  return s.str();
}

void print_error(std::ostream& err, std::string_view code, int exit_code, const std::string& msg) {
  json j = {{"error", {{"code", code}, {"exit_code", exit_code}, {"message", msg}}}};
  err << j.dump() << "\n";
}

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

B0Direction parse_b0(const std::string& text) {
  std::array<double, 3> v{};
  std::stringstream ss(text);
  std::string part;
  std::size_t n = 0;
  while (std::getline(ss, part, ',')) {
    if (n == 3) fail(ErrorCode::invalid_argument, "b0 must be 'x,y,z', got '" + text + "'");
    try {
      v[n++] = std::stod(part);
    } catch (const std::exception&) {
      fail(ErrorCode::invalid_argument, "b0 must be 'x,y,z', got '" + text + "'");
    }
  }
  if (n != 3) fail(ErrorCode::invalid_argument, "b0 must be 'x,y,z', got '" + text + "'");
  return B0Direction::normalized(v[0], v[1], v[2]);
}

/// Direction from the flag when given, else from the volume header, else +z.
B0Direction resolve_b0(const std::string& flag, const Volume& vol) {
  if (!flag.empty()) return parse_b0(flag);
  if (vol.b0()) return *vol.b0();
  return B0Direction{};
}

/// Runs fn(i) for i in [0, n) on up to `threads` workers. When several items
/// fail, the error of the lowest index is rethrown so the outcome does not
/// depend on scheduling.
void parallel_for(std::size_t n, int threads, const std::function<void(std::size_t)>& fn) {
  const std::size_t workers = std::min<std::size_t>(n, static_cast<std::size_t>(std::max(1, threads)));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::mutex mu;
  std::size_t failed_index = n;
  std::exception_ptr failure;
  auto work = [&] {
    for (std::size_t i = next++; i < n; i = next++) {
      try {
        fn(i);
      } catch (...) {
        std::lock_guard lock(mu);
        if (i < failed_index) {
          failed_index = i;
          failure = std::current_exception();
        }
      }
    }
  };
  std::vector<std::thread> pool;
  for (std::size_t w = 0; w < workers; ++w) pool.emplace_back(work);
  for (auto& t : pool) t.join();
  if (failure) std::rethrow_exception(failure);
}

std::string item_stem(std::size_t i) {
  std::ostringstream s;
  s << "phantom_" << std::setw(3) << std::setfill('0') << i;
  return s.str();
}

/// Stems of every `<stem>_chi.vol` in a directory, sorted.
std::vector<std::string> list_stems(const fs::path& dir) {
  if (!fs::is_directory(dir)) fail(ErrorCode::io_failure, "'" + dir.string() + "' is not a directory");
  std::vector<std::string> stems;
  const std::string suffix = "_chi.vol";
  for (const auto& e : fs::directory_iterator(dir)) {
    const std::string name = e.path().filename().string();
    if (name.size() > suffix.size() && name.ends_with(suffix)) {
      stems.push_back(name.substr(0, name.size() - suffix.size()));
    }
  }
  std::sort(stems.begin(), stems.end());
  if (stems.empty()) fail(ErrorCode::io_failure, "no *_chi.vol files in '" + dir.string() + "'");
  return stems;
}

PhantomPair load_pair(const fs::path& dir, const std::string& stem, RunManifest& manifest) {
  const fs::path chi_p = dir / (stem + "_chi.vol");
  const fs::path field_p = dir / (stem + "_field.vol");
  const fs::path mask_p = dir / (stem + "_mask.vol");
  manifest.add_input(chi_p);
  manifest.add_input(field_p);
  manifest.add_input(mask_p);
  Volume chi = read_volume(chi_p);
  Volume field = read_volume(field_p);
  Mask mask = read_mask(mask_p);
  const B0Direction b0 = resolve_b0("", field);
  PhantomSpec spec;
  spec.grid = field.grid();
  spec.b0 = b0;
  return PhantomPair{std::move(chi), std::move(field), std::move(mask), b0, spec};
}

void write_json_file(const fs::path& path, const json& j) { atomic_write(path, j.dump(2) + "\n"); }

struct Global {
  int threads = 1;
  bool strict = false;
  std::uint64_t seed = 0;
  std::string manifest_path;
};

/// Every option of a subcommand with its effective value, defaults included.
// Numeric option values are recorded as numbers, everything else verbatim.
json typed_value(const std::string& s) {
  char* end = nullptr;
  const double d = std::strtod(s.c_str(), &end);
  if (s.empty() || end != s.c_str() + s.size() || !std::isfinite(d)) return s;
  if (s.find_first_of(".eE") == std::string::npos && std::abs(d) < 9e15) return static_cast<long long>(d);
  return d;
}

json typed_values(const std::vector<std::string>& v) {
  json a = json::array();
  for (const auto& s : v) a.push_back(typed_value(s));
  return a;
}

json resolved_options(const CLI::App* app) {
  json j = json::object();
  for (const CLI::Option* opt : app->get_options()) {
    const std::string name = opt->get_name();
    if (name == "--help" || name.empty()) continue;
    const std::string key = name.substr(name.find_first_not_of('-'));
    const bool flag = opt->get_expected_max() == 0;
    const bool multi = opt->get_expected_max() > 1;
    if (flag) {
      j[key] = opt->count() > 0;
    } else if (opt->count() > 0) {
      const auto& r = opt->results();
      j[key] = multi ? typed_values(r) : typed_value(r.empty() ? std::string() : r.front());
    } else {
      j[key] = multi ? json::array() : typed_value(opt->get_default_str());
    }
  }
  return j;
}

// ---------------------------------------------------------------- options

struct SynthOpts {
  std::size_t count = 1, size = 64;
  double voxel = 1.0, snr = kNoiseless;
  int n_shapes = 8;
  double chi_lo = -1.0, chi_hi = 1.0;
  double elastic_spacing = 8.0, elastic_displacement = 4.0;
  int blobs = 3;
  std::string b0, out;
};

struct ForwardOpts {
  std::string chi, b0, mask, out;
  bool pad = false;
  double snr = kNoiseless;
};

struct BgremoveOpts {
  std::string field, mask, out_field, out_mask;
  std::vector<std::string> phase, magnitude;
  std::vector<double> te;
  double b0_tesla = 3.0;
  ResharpConfig cfg;
};

struct InvertOpts {
  std::string method, mask, out, log, checkpoint, weights, edge_ref;
  std::vector<std::string> field, b0;
  TkdConfig tkd;
  TvAdmmConfig admm;
  MediConfig medi;
  CosmosConfig cosmos;
};

struct TrainOpts {
  std::string data, checkpoint, log;
  nn::TrainConfig cfg;
  bool resume = false;
  double snr = kNoiseless;
};

struct EvalOpts {
  std::string pred, ref, mask, ref_dir, out;
  std::vector<std::string> pred_dir, label;
  MetricsConfig cfg;
};

struct SliceOpts {
  std::string in, axis = "z", out;
  std::size_t index = 0;
  std::vector<double> window;
};

struct ReplayOpts {
  std::string from;
};

// ---------------------------------------------------------------- commands

struct Runner {
  Global& g;
  RunManifest& manifest;
  std::ostream& out;
  fs::path default_manifest;
};

void cmd_synth(const SynthOpts& o, Runner& r) {
  if (o.count < 1) fail(ErrorCode::invalid_argument, "--count must be >= 1");
  PhantomSpec base;
  base.grid = Grid(Dims{o.size, o.size, o.size}, VoxelSize{o.voxel, o.voxel, o.voxel});
  base.n_shapes = o.n_shapes;
  base.chi_lo = o.chi_lo;
  base.chi_hi = o.chi_hi;
  base.elastic = ElasticParams{o.elastic_spacing, o.elastic_displacement};
  base.contrast.n_blobs = o.blobs;
  if (!o.b0.empty()) base.b0 = parse_b0(o.b0);
  base.validate();
  if (!(o.snr > 0.0)) fail(ErrorCode::invalid_argument, "--snr must be > 0");

  const fs::path dir = o.out;
  fs::create_directories(dir);
  const auto t0 = std::chrono::steady_clock::now();
  std::vector<json> records(o.count);
  parallel_for(o.count, r.g.threads, [&](std::size_t i) {
    PhantomSpec spec = base;
    spec.seed = derive_seed(r.g.seed, i);
    PhantomPair pair = generate_phantom(spec);
    const std::uint64_t noise_seed = derive_seed(spec.seed, 5);
    Volume field = std::isinf(o.snr) ? pair.local_field
                                     : simulate_measurement(pair.local_field, pair.mask, o.snr, noise_seed);
    field.set_b0(pair.b0);
    const std::string stem = item_stem(i);
    write_volume(pair.chi_true, dir / (stem + "_chi.vol"));
    write_volume(field, dir / (stem + "_field.vol"));
    write_mask(pair.mask, dir / (stem + "_mask.vol"));
    json prov = {{"index", i},
                 {"master_seed", r.g.seed},
                 {"spec", to_json(pair.provenance)},
                 {"snr", std::isinf(o.snr) ? json("inf") : json(o.snr)},
                 {"noise_seed", noise_seed},
                 {"mask_voxels", pair.mask.count()}};
    write_json_file(dir / (stem + "_provenance.json"), prov);
    records[i] = {{"stem", stem}, {"seed", spec.seed}};
  });
  r.manifest.time_stage("generate", seconds_since(t0));
  for (std::size_t i = 0; i < o.count; ++i) {
    const std::string stem = item_stem(i);
    for (const char* s : {"_chi.vol", "_field.vol", "_mask.vol", "_provenance.json"}) {
      r.manifest.add_output(dir / (stem + s));
    }
  }
  r.manifest.add_result("items", records);
  r.default_manifest = dir / "synth.manifest.json";
}

void cmd_forward(const ForwardOpts& o, Runner& r) {
  r.manifest.add_input(o.chi);
  Volume chi = read_volume(o.chi);
  if (chi.unit() != Unit::ppm) fail(ErrorCode::unit_mismatch, "--chi must be in ppm");
  const B0Direction b0 = resolve_b0(o.b0, chi);
  const auto t0 = std::chrono::steady_clock::now();
  Volume field = forward_field(chi, build_dipole_kernel(chi.grid(), b0), o.pad);
  if (!o.mask.empty()) {
    r.manifest.add_input(o.mask);
    const Mask mask = read_mask(o.mask);
    field = simulate_measurement(field, mask, o.snr, derive_seed(r.g.seed, 5));
  } else if (!std::isinf(o.snr)) {
    fail(ErrorCode::invalid_argument, "--snr needs --mask (noise is scaled by the masked RMS)");
  }
  field.set_b0(b0);
  r.manifest.time_stage("forward", seconds_since(t0));
  write_volume(field, o.out);
  r.manifest.add_output(o.out);
  r.default_manifest = o.out + ".manifest.json";
}

void cmd_bgremove(const BgremoveOpts& o, Runner& r) {
  r.manifest.add_input(o.mask);
  const Mask mask = read_mask(o.mask);
  Volume total;
  const auto t0 = std::chrono::steady_clock::now();
  if (!o.phase.empty()) {
    if (o.te.size() != o.phase.size()) fail(ErrorCode::invalid_argument, "--te needs one value per --phase");
    if (!o.magnitude.empty() && o.magnitude.size() != o.phase.size()) {
      fail(ErrorCode::invalid_argument, "--magnitude needs one file per --phase");
    }
    EchoSeries series;
    for (std::size_t e = 0; e < o.phase.size(); ++e) {
      r.manifest.add_input(o.phase[e]);
      Echo echo{o.te[e], read_volume(o.phase[e]), std::nullopt};
      if (!o.magnitude.empty()) {
        r.manifest.add_input(o.magnitude[e]);
        echo.magnitude = read_volume(o.magnitude[e]);
      }
      series.echoes.push_back(std::move(echo));
    }
    const FieldFit fit = fit_field(series, mask);
    total = hz_to_ppm(fit.field_hz, o.b0_tesla);
    r.manifest.add_result("degenerate_voxels", fit.n_degenerate);
    r.manifest.time_stage("fit_field", seconds_since(t0));
  } else {
    r.manifest.add_input(o.field);
    total = read_volume(o.field);
  }
  const auto t1 = std::chrono::steady_clock::now();
  ResharpResult res = resharp(total, mask, o.cfg);
  r.manifest.time_stage("resharp", seconds_since(t1));
  res.local_field.set_b0(total.b0());
  write_volume(res.local_field, o.out_field);
  write_mask(res.reliable_mask, o.out_mask);
  r.manifest.add_output(o.out_field);
  r.manifest.add_output(o.out_mask);
  r.manifest.add_result("cg_iterations", res.iterations);
  r.manifest.add_result("relative_residual", res.relative_residual);
  r.manifest.add_result("reliable_voxels", res.reliable_mask.count());
  r.default_manifest = o.out_field + ".manifest.json";
}

void cmd_invert(const InvertOpts& o, Runner& r) {
  if (o.field.empty()) fail(ErrorCode::invalid_argument, "--field is required");
  r.manifest.add_input(o.mask);
  const Mask mask = read_mask(o.mask);
  const bool multi = o.method == "cosmos";
  if (!multi && o.field.size() != 1) fail(ErrorCode::invalid_argument, "--field given more than once");
  if (!multi && o.b0.size() > 1) fail(ErrorCode::invalid_argument, "--b0 given more than once");
  if (multi && o.field.size() < 3) fail(ErrorCode::invalid_argument, "cosmos needs at least 3 orientations");
  if (multi && !o.b0.empty() && o.b0.size() != o.field.size()) {
    fail(ErrorCode::invalid_argument, "cosmos needs one --b0 per --field (or none to use headers)");
  }

  std::vector<Volume> fields;
  for (const auto& f : o.field) {
    r.manifest.add_input(f);
    fields.push_back(read_volume(f));
  }
  auto b0_of = [&](std::size_t i) { return resolve_b0(o.b0.empty() ? "" : o.b0[i], fields[i]); };
  auto weights = [&] {
    if (o.weights.empty()) return mask.volume().relabeled(Unit::dimensionless);
    r.manifest.add_input(o.weights);
    return read_volume(o.weights);
  };

  json log;
  Volume chi;
  const auto t0 = std::chrono::steady_clock::now();
  if (o.method == "tkd") {
    const DipoleKernel k = build_dipole_kernel(fields[0].grid(), b0_of(0));
    chi = invert_tkd(fields[0], k, o.tkd, mask);
    log = {{"method", "tkd"}, {"config", {{"threshold", o.tkd.threshold}}}};
  } else if (o.method == "tv") {
    const DipoleKernel k = build_dipole_kernel(fields[0].grid(), b0_of(0));
    SolveResult res = invert_tv_admm(fields[0], k, weights(), o.admm);
    chi = std::move(res.chi);
    log = res.log.to_json();
  } else if (o.method == "medi") {
    if (o.edge_ref.empty()) fail(ErrorCode::invalid_argument, "medi needs --edge-ref");
    r.manifest.add_input(o.edge_ref);
    const Volume ref = read_volume(o.edge_ref);
    const DipoleKernel k = build_dipole_kernel(fields[0].grid(), b0_of(0));
    SolveResult res = invert_medi_like(fields[0], k, ref, weights(), o.medi);
    chi = std::move(res.chi);
    log = res.log.to_json();
  } else if (o.method == "cosmos") {
    OrientationSet set;
    for (std::size_t i = 0; i < fields.size(); ++i) set.entries.push_back({fields[i], b0_of(i), mask});
    CosmosResult res = invert_cosmos(set, o.cosmos);
    chi = std::move(res.chi);
    log = {{"method", "cosmos"},
           {"config", {{"eps", o.cosmos.eps}}},
           {"unique_orientations", res.conditioning.unique_orientations},
           {"min_sum_d2", res.conditioning.min_sum_d2},
           {"ill_conditioned_bins", res.conditioning.ill_conditioned_bins.size()}};
  } else if (o.method == "nn") {
    if (o.checkpoint.empty()) fail(ErrorCode::invalid_argument, "nn needs --checkpoint");
    r.manifest.add_input(o.checkpoint);
    const nn::Checkpoint ck = nn::load_checkpoint(o.checkpoint);
    chi = nn::infer(ck.net, ck.params, fields[0], mask);
    log = {{"method", "nn"}, {"net", ck.net.to_json()}, {"state", ck.state}};
  } else {
    fail(ErrorCode::invalid_argument, "unknown --method '" + o.method + "'");
  }
  r.manifest.time_stage("invert", seconds_since(t0));
  chi = apply_mask(chi, mask);
  chi.set_b0(fields[0].b0() ? fields[0].b0() : std::optional<B0Direction>(b0_of(0)));
  write_volume(chi, o.out);
  const std::string log_path = o.log.empty() ? o.out + ".log.json" : o.log;
  write_json_file(log_path, log);
  r.manifest.add_output(o.out);
  r.manifest.add_output(log_path);
  if (log.contains("iterations")) r.manifest.add_result("iterations", log["iterations"]);
  r.default_manifest = o.out + ".manifest.json";
}

void cmd_train(TrainOpts o, Runner& r) {
  const auto stems = list_stems(o.data);
  std::vector<PhantomPair> data;
  for (std::size_t i = 0; i < stems.size(); ++i) {
    PhantomPair p = load_pair(o.data, stems[i], r.manifest);
    if (!std::isinf(o.snr)) {
      p.local_field = simulate_measurement(p.local_field, p.mask, o.snr, derive_seed(r.g.seed, 7000 + i));
    }
    data.push_back(std::move(p));
  }
  const Dims d = data.front().local_field.dims();
  o.cfg.net.input_shape = {d.nz, d.ny, d.nx};
  o.cfg.seed = r.g.seed;
  r.manifest.config()["train_config"] = o.cfg.to_json();
  const auto t0 = std::chrono::steady_clock::now();
  const nn::TrainResult res = nn::train(o.cfg, data, fs::path(o.checkpoint), o.resume);
  r.manifest.time_stage("train", seconds_since(t0));
  const std::string log_path = o.log.empty() ? o.checkpoint + ".train.json" : o.log;
  write_json_file(log_path, res.log.to_json());
  r.manifest.add_output(o.checkpoint);
  r.manifest.add_output(log_path);
  r.manifest.add_result("epochs_completed", res.log.epochs_completed);
  r.manifest.add_result("epoch_loss", res.log.epoch_loss);
  r.default_manifest = o.checkpoint + ".manifest.json";
}

struct Stat {
  double mean = 0.0, std = 0.0;
};

Stat mean_std(const std::vector<double>& v) {
  Stat s;
  for (double x : v) s.mean += x;
  s.mean /= static_cast<double>(v.size());
  if (v.size() > 1) {
    double ss = 0.0;
    for (double x : v) ss += (x - s.mean) * (x - s.mean);
    s.std = std::sqrt(ss / static_cast<double>(v.size() - 1));
  }
  return s;
}

std::string fmt_stat(const Stat& s, int precision) {
  std::ostringstream o;
  o << std::fixed << std::setprecision(precision) << s.mean << " ± " << s.std;
  return o.str();
}

void cmd_eval(const EvalOpts& o, Runner& r) {
  json report;
  const auto t0 = std::chrono::steady_clock::now();
  if (!o.ref_dir.empty()) {
    if (o.pred_dir.empty()) fail(ErrorCode::invalid_argument, "batch eval needs --pred-dir");
    if (!o.label.empty() && o.label.size() != o.pred_dir.size()) {
      fail(ErrorCode::invalid_argument, "--label needs one value per --pred-dir");
    }
    const auto stems = list_stems(o.ref_dir);
    json rows = json::array();
    std::vector<std::string> table{"method | RMSE (%) | HFEN (%) | SSIM | n"};
    for (std::size_t m = 0; m < o.pred_dir.size(); ++m) {
      const std::string label = o.label.empty() ? fs::path(o.pred_dir[m]).filename().string() : o.label[m];
      std::vector<MetricsReport> reps(stems.size());
      for (const auto& stem : stems) {
        r.manifest.add_input(fs::path(o.ref_dir) / (stem + "_chi.vol"));
        r.manifest.add_input(fs::path(o.ref_dir) / (stem + "_mask.vol"));
        r.manifest.add_input(fs::path(o.pred_dir[m]) / (stem + ".vol"));
      }
      parallel_for(stems.size(), r.g.threads, [&](std::size_t i) {
        const Volume ref = read_volume(fs::path(o.ref_dir) / (stems[i] + "_chi.vol"));
        const Mask mask = read_mask(fs::path(o.ref_dir) / (stems[i] + "_mask.vol"));
        const Volume pred = read_volume(fs::path(o.pred_dir[m]) / (stems[i] + ".vol"));
        reps[i] = evaluate(pred, ref, mask, o.cfg);
      });
      std::vector<double> rmse, hfen, ssim_v;
      json items = json::array();
      for (std::size_t i = 0; i < stems.size(); ++i) {
        rmse.push_back(reps[i].rmse_percent);
        hfen.push_back(reps[i].hfen_percent);
        ssim_v.push_back(reps[i].ssim);
        items.push_back({{"stem", stems[i]}, {"rmse_percent", rmse.back()}, {"hfen_percent", hfen.back()},
                         {"ssim", ssim_v.back()}});
      }
      const Stat sr = mean_std(rmse), sh = mean_std(hfen), ss = mean_std(ssim_v);
      rows.push_back({{"label", label},
                      {"n", stems.size()},
                      {"rmse_percent", {{"mean", sr.mean}, {"std", sr.std}}},
                      {"hfen_percent", {{"mean", sh.mean}, {"std", sh.std}}},
                      {"ssim", {{"mean", ss.mean}, {"std", ss.std}}},
                      {"items", items}});
      table.push_back(label + " | " + fmt_stat(sr, 1) + " | " + fmt_stat(sh, 1) + " | " + fmt_stat(ss, 3) +
                      " | " + std::to_string(stems.size()));
    }
    report = {{"rows", rows}, {"table", table}};
  } else {
    if (o.pred.empty() || o.ref.empty() || o.mask.empty()) {
      fail(ErrorCode::invalid_argument, "eval needs --pred, --ref and --mask (or --ref-dir and --pred-dir)");
    }
    for (const auto& p : {o.pred, o.ref, o.mask}) r.manifest.add_input(p);
    report = evaluate(read_volume(o.pred), read_volume(o.ref), read_mask(o.mask), o.cfg).to_json();
  }
  r.manifest.time_stage("evaluate", seconds_since(t0));
  if (!o.out.empty()) {
    write_json_file(o.out, report);
    r.manifest.add_output(o.out);
    r.default_manifest = o.out + ".manifest.json";
  }
  r.out << report.dump(2) << "\n";
}

void cmd_export_slice(const SliceOpts& o, Runner& r) {
  if (o.window.size() != 2) fail(ErrorCode::invalid_argument, "--window needs lo,hi");
  r.manifest.add_input(o.in);
  const Volume vol = read_volume(o.in);
  const GrayImage img = extract_slice(vol, parse_axis(o.axis), o.index, o.window[0], o.window[1]);
  atomic_write(o.out, encode_pgm(img));
  r.manifest.add_output(o.out);
  r.manifest.add_result("image", {{"width", img.width}, {"height", img.height}});
  r.default_manifest = o.out + ".manifest.json";
}

// ---------------------------------------------------------------- wiring

void add_metrics_flags(CLI::App* sub, MetricsConfig& c) {
  sub->add_option("--log-kernel-size", c.log_kernel_size, "HFEN LoG kernel size");
  sub->add_option("--log-sigma", c.log_sigma, "HFEN LoG sigma (voxels)");
  sub->add_option("--ssim-window", c.ssim_window_size, "SSIM Gaussian window size");
  sub->add_option("--ssim-sigma", c.ssim_sigma, "SSIM Gaussian window sigma");
  sub->add_flag("--ssim-symmetric-range", c.ssim_symmetric_range,
                "SSIM dynamic range from both volumes instead of the reference");
}

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err, int depth);

int run_parsed(CLI::App& app, Global& g, const std::vector<std::string>& args, std::ostream& out,
               std::ostream& err, const std::map<std::string, std::function<void(Runner&)>>& handlers,
               const ReplayOpts& replay, int depth) {
  CLI::App* sub = app.get_subcommands().front();
  const std::string name = sub->get_name();
  if (name == "replay") {
    if (depth > 0) fail(ErrorCode::invalid_argument, "a replayed manifest cannot itself be a replay");
    std::ifstream in(replay.from);
    if (!in) fail(ErrorCode::io_failure, "cannot open '" + replay.from + "'");
    json m;
    try {
      m = json::parse(in);
    } catch (const json::exception& e) {
      fail(ErrorCode::bad_header, std::string("manifest is not valid JSON: ") + e.what());
    }
    if (!m.contains("argv") || !m["argv"].is_array()) fail(ErrorCode::bad_header, "manifest has no argv");
    return dispatch(m["argv"].get<std::vector<std::string>>(), out, err, depth + 1);
  }
  if (g.strict) g.threads = 1;
  if (g.threads < 1) fail(ErrorCode::invalid_argument, "--threads must be >= 1");

  RunManifest manifest(name, args);
  manifest.set_seed(g.seed);
  manifest.set_execution(g.threads, g.strict);
  Runner runner{g, manifest, out, {}};
  handlers.at(name)(runner);

  json cfg = resolved_options(sub);
  for (auto& [k, v] : manifest.config().items()) cfg[k] = v;
  cfg["global"] = {{"threads", g.threads}, {"strict_deterministic", g.strict}, {"seed", g.seed}};
  manifest.set_config(cfg);
  fs::path mpath = g.manifest_path.empty() ? runner.default_manifest : fs::path(g.manifest_path);
  if (mpath.empty()) {
    err << json{{"manifest", manifest.to_json()}}.dump() << "\n";
  } else {
    write_json_file(mpath, manifest.to_json());
  }
  return 0;
}

int dispatch(const std::vector<std::string>& args, std::ostream& out, std::ostream& err, int depth) {
  CLI::App app{"qsmtool: quantitative susceptibility mapping toolkit", "qsmtool"};
  app.footer(exit_code_footer());
  app.require_subcommand(1, 1);
  app.fallthrough();
  app.option_defaults()->always_capture_default();

  Global g;
  app.add_option("--threads", g.threads, "Worker threads for synth and batch eval");
  app.add_flag("--strict-deterministic", g.strict, "Single-threaded, bit-reproducible execution");
  app.add_option("--seed", g.seed, "Master seed");
  app.add_option("--manifest", g.manifest_path, "Run manifest path (default derived from the output)");

  std::map<std::string, std::function<void(Runner&)>> handlers;

  SynthOpts so;
  auto* synth = app.add_subcommand("synth", "Generate seeded phantom triples (chi, field, mask)");
  synth->add_option("--count", so.count, "Number of phantoms");
  synth->add_option("--size", so.size, "Cubic grid edge in voxels");
  synth->add_option("--voxel", so.voxel, "Isotropic voxel size (mm)");
  synth->add_option("--snr", so.snr, "Field SNR; inf for noiseless");
  synth->add_option("--n-shapes", so.n_shapes, "Random inclusions per phantom");
  synth->add_option("--chi-lo", so.chi_lo, "Lowest inclusion susceptibility (ppm)");
  synth->add_option("--chi-hi", so.chi_hi, "Highest inclusion susceptibility (ppm)");
  synth->add_option("--elastic-spacing", so.elastic_spacing, "Elastic control grid spacing (voxels)");
  synth->add_option("--elastic-displacement", so.elastic_displacement, "Max elastic displacement (voxels)");
  synth->add_option("--blobs", so.blobs, "Local contrast blobs");
  synth->add_option("--b0", so.b0, "B0 direction x,y,z (default 0,0,1)");
  synth->add_option("--out", so.out, "Output directory")->required();
  handlers["synth"] = [&](Runner& r) { cmd_synth(so, r); };

  ForwardOpts fo;
  auto* fwd = app.add_subcommand("forward", "Dipole forward model of a susceptibility map");
  fwd->add_option("--chi", fo.chi, "Susceptibility volume (ppm)")->required();
  fwd->add_option("--b0", fo.b0, "B0 direction x,y,z (default from header, else 0,0,1)");
  fwd->add_flag("--pad", fo.pad, "Zero-pad to twice the size before the FFT");
  fwd->add_option("--snr", fo.snr, "Add Gaussian noise at this SNR (needs --mask)");
  fwd->add_option("--mask", fo.mask, "Mask applied to the field");
  fwd->add_option("--out", fo.out, "Output field volume")->required();
  handlers["forward"] = [&](Runner& r) { cmd_forward(fo, r); };

  BgremoveOpts bo;
  auto* bg = app.add_subcommand("bgremove", "Background field removal (RESHARP)");
  auto* bg_field = bg->add_option("--field", bo.field, "Total field volume (ppm)");
  auto* bg_phase = bg->add_option("--phase", bo.phase, "Unwrapped phase per echo (radians), repeatable");
  bg_field->excludes(bg_phase);
  bg->add_option("--te", bo.te, "Echo time per --phase (ms), repeatable");
  bg->add_option("--magnitude", bo.magnitude, "Magnitude per --phase, repeatable");
  bg->add_option("--b0-tesla", bo.b0_tesla, "Main field strength for Hz to ppm");
  bg->add_option("--mask", bo.mask, "Brain mask")->required();
  bg->add_option("--radius-mm", bo.cfg.radius_mm, "Spherical kernel radius (mm)");
  bg->add_option("--lambda", bo.cfg.tikhonov_lambda, "Tikhonov weight");
  bg->add_option("--max-iters", bo.cfg.cg_max_iters, "CG iteration cap");
  bg->add_option("--tol", bo.cfg.cg_tol, "CG relative residual tolerance");
  bg->add_option("--out-field", bo.out_field, "Local field output")->required();
  bg->add_option("--out-mask", bo.out_mask, "Reliable (eroded) mask output")->required();
  handlers["bgremove"] = [&](Runner& r) {
    if (bo.field.empty() && bo.phase.empty()) fail(ErrorCode::invalid_argument, "bgremove needs --field or --phase");
    cmd_bgremove(bo, r);
  };

  InvertOpts io;
  auto* inv = app.add_subcommand("invert", "Dipole inversion of a local field");
  inv->add_option("--method", io.method, "tkd | tv | medi | cosmos | nn")
      ->required()
      ->check(CLI::IsMember({"tkd", "tv", "medi", "cosmos", "nn"}));
  inv->add_option("--field", io.field, "Local field (ppm); repeat per orientation for cosmos")->required();
  inv->add_option("--b0", io.b0, "B0 direction x,y,z; repeat per orientation for cosmos");
  inv->add_option("--mask", io.mask, "Mask")->required();
  inv->add_option("--out", io.out, "Susceptibility output (ppm)")->required();
  inv->add_option("--log", io.log, "Solve log JSON (default <out>.log.json)");
  inv->add_option("--threshold", io.tkd.threshold, "tkd: kernel truncation threshold");
  inv->add_option("--alpha", io.admm.alpha1, "tv: TV weight");
  inv->add_option("--mu1", io.admm.mu1, "tv/medi: gradient split penalty");
  inv->add_option("--mu2", io.admm.mu2, "tv/medi: data split penalty");
  inv->add_option("--max-iters", io.admm.max_iters, "tv/medi: iteration cap");
  inv->add_option("--tol", io.admm.tol, "tv/medi: stopping tolerance");
  inv->add_option("--weights", io.weights, "tv/medi: fidelity weights volume (default mask)");
  inv->add_option("--lambda", io.medi.lambda, "medi: fidelity weight");
  inv->add_option("--edge-percentile", io.medi.edge_percentile, "medi: percent of voxels treated as edges");
  inv->add_option("--edge-ref", io.edge_ref, "medi: volume whose gradients define edges");
  inv->add_option("--eps", io.cosmos.eps, "cosmos: denominator floor");
  inv->add_option("--checkpoint", io.checkpoint, "nn: trained checkpoint");
  handlers["invert"] = [&](Runner& r) {
    io.medi.admm = io.admm;
    cmd_invert(io, r);
  };

  TrainOpts to;
  auto* tr = app.add_subcommand("train", "Train the inversion network on a synth directory");
  tr->add_option("--data", to.data, "Directory of phantom triples")->required();
  tr->add_option("--epochs", to.cfg.epochs, "Epochs");
  tr->add_option("--batch", to.cfg.batch, "Batch size");
  tr->add_option("--base-channels", to.cfg.net.base_channels, "Channels at the first level");
  tr->add_option("--lr", to.cfg.optimizer.lr0, "Initial learning rate");
  tr->add_option("--rho", to.cfg.optimizer.rho, "RMSprop decay of the squared-gradient average");
  tr->add_option("--gamma", to.cfg.optimizer.gamma, "Learning-rate decay factor");
  tr->add_option("--decay-every", to.cfg.optimizer.decay_every, "Steps between learning-rate decays");
  tr->add_option("--snr", to.snr, "Add field noise at this SNR when loading");
  tr->add_option("--checkpoint", to.checkpoint, "Checkpoint path (written every epoch)")->required();
  tr->add_flag("--resume", to.resume, "Continue from --checkpoint");
  tr->add_option("--log", to.log, "Training log JSON (default <checkpoint>.train.json)");
  handlers["train"] = [&](Runner& r) { cmd_train(to, r); };

  EvalOpts eo;
  auto* ev = app.add_subcommand("eval", "RMSE, HFEN and SSIM against a reference");
  ev->add_option("--pred", eo.pred, "Predicted susceptibility");
  ev->add_option("--ref", eo.ref, "Reference susceptibility");
  ev->add_option("--mask", eo.mask, "Evaluation mask");
  ev->add_option("--ref-dir", eo.ref_dir, "Batch: directory of phantom triples");
  ev->add_option("--pred-dir", eo.pred_dir, "Batch: directory of <stem>.vol predictions, repeatable");
  ev->add_option("--label", eo.label, "Batch: row label per --pred-dir");
  ev->add_option("--out", eo.out, "Also write the report to this file");
  add_metrics_flags(ev, eo.cfg);
  handlers["eval"] = [&](Runner& r) { cmd_eval(eo, r); };

  SliceOpts xo;
  auto* xs = app.add_subcommand("export-slice", "Write one slice as an 8-bit PGM image");
  xs->add_option("--in", xo.in, "Input volume")->required();
  xs->add_option("--axis", xo.axis, "Slice normal: x, y or z");
  xs->add_option("--index", xo.index, "Slice index along the axis")->required();
  xs->add_option("--window", xo.window, "Display window lo,hi")->required()->delimiter(',')->expected(2);
  xs->add_option("--out", xo.out, "Output .pgm")->required();
  handlers["export-slice"] = [&](Runner& r) { cmd_export_slice(xo, r); };

  ReplayOpts ro;
  auto* rp = app.add_subcommand("replay", "Re-run the command recorded in a run manifest");
  rp->add_option("--from", ro.from, "Manifest JSON")->required();

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    err << app.help();
    return 0;
  } catch (const CLI::CallForAllHelp&) {
    err << app.help("", CLI::AppFormatMode::All);
    return 0;
  } catch (const CLI::ParseError& e) {
    print_error(err, "usage", kExitUsage, e.what());
    return kExitUsage;
  }
  return run_parsed(app, g, args, out, err, handlers, ro, depth);
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  try {
    return dispatch(args, out, err, 0);
  } catch (const Error& e) {
    print_error(err, error_code_name(e.code()), static_cast<int>(e.code()), e.what());
    return static_cast<int>(e.code());
  } catch (const fs::filesystem_error& e) {
    print_error(err, error_code_name(ErrorCode::io_failure), static_cast<int>(ErrorCode::io_failure), e.what());
    return static_cast<int>(ErrorCode::io_failure);
  } catch (const std::exception& e) {
    print_error(err, "internal", kExitInternal, e.what());
    return kExitInternal;
  }
}

}  // namespace qsm::tools
