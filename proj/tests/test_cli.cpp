// End-to-end tests for the sfanet command-line tool. Every case shells out to
// the real binary (path supplied via the SFANET_CLI environment variable by
// CMake) and checks exit codes, stdout/stderr text, and the files left behind.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <sys/wait.h>

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

using namespace std::string_literals;
namespace fs = std::filesystem;

#define CHECK_NEAR(got, want, tol)     \
  do {                                 \
    const double got_ = (got);         \
    const double want_ = (want);       \
    CAPTURE(got_);                     \
    CAPTURE(want_);                    \
    CHECK(std::abs(got_ - want_) <= (tol)); \
  } while (0)

namespace {

std::string cli_path() {
  const char* p = std::getenv("SFANET_CLI");
  REQUIRE_MESSAGE(p != nullptr, "SFANET_CLI must point at the sfanet binary");
  return p;
}

struct CmdResult {
  int status = -1;
  std::string out;  // stdout and stderr merged
};

CmdResult run_cli(const std::string& args) {
  const std::string cmd = cli_path() + " " + args + " 2>&1";
  FILE* pipe = popen(cmd.c_str(), "r");
  REQUIRE(pipe != nullptr);
  CmdResult r;
  char buf[4096];
  size_t n;
  while ((n = fread(buf, 1, sizeof buf, pipe)) > 0) r.out.append(buf, n);
  const int raw = pclose(pipe);
  REQUIRE(raw != -1);
  REQUIRE(WIFEXITED(raw));
  r.status = WEXITSTATUS(raw);
  return r;
}

fs::path test_root() {
  static fs::path dir = [] {
    fs::path d = fs::temp_directory_path() / "sfanet_cli_test";
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
  }();
  return dir;
}

std::vector<uint8_t> file_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE_MESSAGE(in.good(), p.string());
  return std::vector<uint8_t>(std::istreambuf_iterator<char>(in),
                              std::istreambuf_iterator<char>());
}

void write_bytes(const fs::path& p, const std::vector<uint8_t>& bytes) {
  std::ofstream out(p, std::ios::binary | std::ios::trunc);
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  REQUIRE(out.good());
}

std::vector<std::string> lines_of(const std::string& text) {
  std::vector<std::string> out;
  std::istringstream ss(text);
  std::string line;
  while (std::getline(ss, line)) out.push_back(line);
  return out;
}

std::vector<std::string> file_lines(const fs::path& p) {
  std::ifstream in(p);
  REQUIRE_MESSAGE(in.good(), p.string());
  std::vector<std::string> out;
  std::string line;
  while (std::getline(in, line)) out.push_back(line);
  return out;
}

bool contains(const std::string& haystack, const std::string& needle) {
  return haystack.find(needle) != std::string::npos;
}

// "step iter=3 lr=0.05 ..." -> {"iter": "3", "lr": "0.05", ...}
std::map<std::string, std::string> parse_kv(const std::string& line) {
  std::map<std::string, std::string> kv;
  std::istringstream ss(line);
  std::string tok;
  ss >> tok;  // tag
  while (ss >> tok) {
    const size_t eq = tok.find('=');
    REQUIRE(eq != std::string::npos);
    kv[tok.substr(0, eq)] = tok.substr(eq + 1);
  }
  return kv;
}

double field(const std::map<std::string, std::string>& kv, const std::string& key) {
  auto it = kv.find(key);
  REQUIRE_MESSAGE(it != kv.end(), key);
  return std::stod(it->second);
}

// Shared fixture paths: the dataset and first training run are reused by the
// eval / infer / resume cases below.
const int64_t kIters = 6;
fs::path dataset_dir() { return test_root() / "ds"; }
fs::path run1_dir() { return test_root() / "c1"; }
fs::path final_ckpt() { return run1_dir() / "ckpt_000006.sfaw"; }

std::string small_model_flags() {
  return "--model.classes 4 --model.width 0.0625 --model.in_h 32 --model.in_w 32";
}

std::string gen_flags(const fs::path& dir) {
  return "gen-data --paths.data_dir " + dir.string() +
         " --data.height 32 --data.width 32 --data.train_count 6 --data.val_count 3 "
         "--data.seed 9 " +
         small_model_flags();
}

std::string train_flags(const fs::path& ckpt_dir) {
  return "train --paths.data_dir " + dataset_dir().string() + " --paths.checkpoint_dir " +
         ckpt_dir.string() + " " + small_model_flags() +
         " --train.total_iters 6 --train.batch_size 2 --train.base_lr 0.02 "
         "--train.val_every 3 --train.log_every 2";
}

std::string g_train_stdout;  // kept for the eval cross-check

}  // namespace

TEST_CASE("usage and parse errors exit with code 1") {
  CHECK(run_cli("").status == 1);
  CHECK(run_cli("no-such-command").status == 1);
  CHECK(run_cli("bench --bogus-flag 3").status == 1);
  CHECK(run_cli("eval").status == 1);  // --weights is required

  const CmdResult help = run_cli("--help");
  CHECK(help.status == 0);
  CHECK(contains(help.out, "gen-data"));
  CHECK(contains(help.out, "train"));
  CHECK(contains(help.out, "bench"));
}

TEST_CASE("gen-data is deterministic, complete, and collision-safe") {
  const CmdResult r = run_cli(gen_flags(dataset_dir()));
  CAPTURE(r.out);
  REQUIRE(r.status == 0);
  CHECK(contains(r.out, "wrote 9 image/mask pairs"));
  CHECK(contains(r.out, "(train 6, val 3)"));

  // Manifest lists every emitted pair and all files exist.
  const auto manifest = file_lines(dataset_dir() / "manifest.txt");
  int train_rows = 0, val_rows = 0;
  for (const auto& line : manifest) {
    std::istringstream ss(line);
    std::string head;
    ss >> head;
    if (head != "train" && head != "val") continue;
    (head == "train" ? train_rows : val_rows)++;
    int64_t index;
    std::string img, mask;
    ss >> index >> img >> mask;
    CHECK(fs::exists(dataset_dir() / img));
    CHECK(fs::exists(dataset_dir() / mask));
    if (head == "train") CHECK(index < 6);
    if (head == "val") CHECK(index >= 6);  // split index ranges stay disjoint
  }
  CHECK(train_rows == 6);
  CHECK(val_rows == 3);

  // Same seed -> byte-identical corpus; different seed -> different pixels.
  const fs::path twin = test_root() / "ds_twin";
  REQUIRE(run_cli(gen_flags(twin)).status == 0);
  for (const char* name : {"train_000000.ppm", "train_000003.pgm", "val_000008.ppm"})
    CHECK(file_bytes(dataset_dir() / name) == file_bytes(twin / name));

  const fs::path other = test_root() / "ds_other";
  std::string reseeded = gen_flags(other);
  const size_t at = reseeded.find("--data.seed 9");
  REQUIRE(at != std::string::npos);
  reseeded.replace(at, 13, "--data.seed 10");
  REQUIRE(run_cli(reseeded).status == 0);
  CHECK(file_bytes(dataset_dir() / "train_000000.ppm") != file_bytes(other / "train_000000.ppm"));

  // Re-running on an existing dataset is refused unless forced.
  const CmdResult clash = run_cli(gen_flags(dataset_dir()));
  CHECK(clash.status == 2);
  CHECK(contains(clash.out, "use --force"));
  CHECK(run_cli(gen_flags(dataset_dir()) + " --force").status == 0);
}

TEST_CASE("train writes checkpoints and an auditable metrics log") {
  const CmdResult r = run_cli(train_flags(run1_dir()));
  CAPTURE(r.out);
  REQUIRE(r.status == 0);
  g_train_stdout = r.out;
  CHECK(contains(r.out, "final val miou"));

  // total_iters 6 -> a checkpoint every max(1, 6/20) = 1 iterations.
  for (int64_t i = 1; i <= kIters; ++i) {
    char name[32];
    std::snprintf(name, sizeof name, "ckpt_%06lld.sfaw", static_cast<long long>(i));
    CHECK(fs::exists(run1_dir() / name));
  }

  const auto log = file_lines(run1_dir() / "metrics.log");
  std::vector<std::string> steps, vals;
  bool saw_lambda3 = false, saw_resume0 = false;
  for (const auto& line : log) {
    if (line.rfind("step ", 0) == 0) steps.push_back(line);
    if (line.rfind("val ", 0) == 0) vals.push_back(line);
    if (line == "# model.lambda3 = 1") saw_lambda3 = true;
    if (line == "# resume_iter = 0") saw_resume0 = true;
  }
  CHECK(saw_lambda3);  // run header records the effective config
  CHECK(saw_resume0);
  REQUIRE(static_cast<int64_t>(steps.size()) == kIters);

  // Row-by-row audit: the logged total must reassemble from its parts under
  // the default weights (0, 0, 1, 1), and lr must follow the 0.9-power poly
  // schedule.
  for (size_t i = 0; i < steps.size(); ++i) {
    const auto kv = parse_kv(steps[i]);
    CHECK(field(kv, "iter") == static_cast<double>(i));
    const double total = field(kv, "total");
    const double sum = field(kv, "principal") + 0.0 * field(kv, "aux1") +
                       0.0 * field(kv, "aux2") + 1.0 * field(kv, "aux3") +
                       1.0 * field(kv, "aux4");
    CAPTURE(steps[i]);
    CHECK_NEAR(total, sum, 1e-7);
    const double frac = static_cast<double>(i) / static_cast<double>(kIters);
    CHECK_NEAR(field(kv, "lr"), 0.02 * std::pow(1.0 - frac, 0.9), 1e-12);
  }

  // val_every 3 on a 6-iteration run: evaluations after iterations 3 and 6.
  REQUIRE(vals.size() == 2);
  CHECK(field(parse_kv(vals[0]), "iter") == 3.0);
  CHECK(field(parse_kv(vals[1]), "iter") == 6.0);

  // Bitwise run-to-run determinism, through the filesystem and the process
  // boundary: a second run with the same seeds leaves an identical checkpoint.
  const fs::path twin = test_root() / "c1_twin";
  REQUIRE(run_cli(train_flags(twin)).status == 0);
  CHECK(file_bytes(final_ckpt()) == file_bytes(twin / "ckpt_000006.sfaw"));
}

TEST_CASE("train resumes from a checkpoint and continues the schedule") {
  const fs::path resumed = test_root() / "c_resume";
  const CmdResult r = run_cli(train_flags(resumed) + " --resume " +
                              (run1_dir() / "ckpt_000003.sfaw").string());
  CAPTURE(r.out);
  REQUIRE(r.status == 0);

  const auto log = file_lines(resumed / "metrics.log");
  std::vector<std::string> steps;
  bool saw_resume3 = false;
  for (const auto& line : log) {
    if (line.rfind("step ", 0) == 0) steps.push_back(line);
    if (line == "# resume_iter = 3") saw_resume3 = true;
  }
  CHECK(saw_resume3);
  REQUIRE(steps.size() == 3);  // iterations 3, 4, 5 remain

  // The learning rate picks up exactly where the schedule left off.
  const auto kv = parse_kv(steps[0]);
  CHECK(field(kv, "iter") == 3.0);
  CHECK_NEAR(field(kv, "lr"), 0.02 * std::pow(1.0 - 3.0 / 6.0, 0.9), 1e-12);
  CHECK(fs::exists(resumed / "ckpt_000006.sfaw"));

  // Resuming a finished run is rejected outright.
  const CmdResult done = run_cli(train_flags(test_root() / "c_done") + " --resume " +
                                 final_ckpt().string());
  CHECK(done.status == 2);
  CHECK(contains(done.out, "already at iter"));
}

TEST_CASE("eval reports per-class iou and matches the training-side score") {
  const CmdResult r = run_cli("eval --weights " + final_ckpt().string() + " --paths.data_dir " +
                              dataset_dir().string() + " " + small_model_flags());
  CAPTURE(r.out);
  REQUIRE(r.status == 0);
  CHECK(contains(r.out, "evaluated 3 images from split 'val'"));

  int class_rows = 0;
  double miou = -1;
  for (const auto& line : lines_of(r.out)) {
    if (line.rfind("class ", 0) == 0) {
      ++class_rows;
      CHECK((contains(line, " iou ") || contains(line, " iou absent")));
    }
    if (line.rfind("miou ", 0) == 0) miou = std::stod(line.substr(5));
  }
  CHECK(class_rows == 4);
  REQUIRE(miou >= 0.0);
  CHECK(miou <= 1.0);

  // The score must agree with the "final val miou" the training run printed
  // for the same weights and split.
  double train_miou = -1;
  for (const auto& line : lines_of(g_train_stdout))
    if (line.rfind("final val miou ", 0) == 0) train_miou = std::stod(line.substr(15));
  REQUIRE(train_miou >= 0.0);
  CHECK_NEAR(miou, train_miou, 1e-6);

  const CmdResult tr = run_cli("eval --weights " + final_ckpt().string() + " --split train " +
                               "--paths.data_dir " + dataset_dir().string() + " " +
                               small_model_flags());
  CHECK(tr.status == 0);
  CHECK(contains(tr.out, "evaluated 6 images from split 'train'"));
}

TEST_CASE("eval rejects corrupt or mismatched weights") {
  // Flip one payload byte: the stored CRC no longer matches.
  auto bytes = file_bytes(final_ckpt());
  bytes[bytes.size() / 2] ^= 0xFF;
  const fs::path bad = test_root() / "corrupt.sfaw";
  write_bytes(bad, bytes);
  const CmdResult r = run_cli("eval --weights " + bad.string() + " --paths.data_dir " +
                              dataset_dir().string() + " " + small_model_flags());
  CHECK(r.status == 2);
  CHECK(contains(r.out, "CRC mismatch"));

  // The checkpoint records its class count; a conflicting config is an error.
  const CmdResult mm = run_cli("eval --weights " + final_ckpt().string() + " --paths.data_dir " +
                               dataset_dir().string() +
                               " --model.classes 5 --model.width 0.0625 "
                               "--model.in_h 32 --model.in_w 32");
  CHECK(mm.status == 2);
  CHECK(contains(mm.out, "class-count mismatch"));
}

TEST_CASE("infer writes a mask with the input's extents") {
  const fs::path input = dataset_dir() / "val_000007.ppm";
  const fs::path out_mask = test_root() / "pred.pgm";
  const CmdResult r = run_cli("infer --weights " + final_ckpt().string() + " --input " +
                              input.string() + " --output " + out_mask.string() + " " +
                              small_model_flags());
  CAPTURE(r.out);
  REQUIRE(r.status == 0);
  CHECK(contains(r.out, "wrote " + out_mask.string() + " (32x32)"));

  const auto mask = file_bytes(out_mask);
  const std::string header(mask.begin(), mask.begin() + 11);
  CHECK(header == "P5\n32 32\n25");  // "P5\n32 32\n255\n" prefix
  // Every predicted label is a valid class id.
  for (size_t i = mask.size() - 32 * 32; i < mask.size(); ++i) CHECK(mask[i] < 4);

  // Same weights, same input -> byte-identical prediction.
  const fs::path again = test_root() / "pred_again.pgm";
  REQUIRE(run_cli("infer --weights " + final_ckpt().string() + " --input " + input.string() +
                  " --output " + again.string() + " " + small_model_flags())
              .status == 0);
  CHECK(file_bytes(out_mask) == file_bytes(again));
}

TEST_CASE("infer refuses extents that are not divisible by 32") {
  const fs::path odd = test_root() / "odd.ppm";
  std::vector<uint8_t> ppm = {'P', '6', '\n', '2', '0', ' ', '3', '0', '\n',
                              '2', '5', '5', '\n'};
  ppm.resize(ppm.size() + 20 * 30 * 3, 128);
  write_bytes(odd, ppm);
  const CmdResult r = run_cli("infer --weights " + final_ckpt().string() + " --input " +
                              odd.string() + " --output " + (test_root() / "x.pgm").string() +
                              " " + small_model_flags());
  CHECK(r.status == 2);
  CHECK(contains(r.out, "not divisible by 32"));
  CHECK(contains(r.out, "pad the image to 32x32"));
}

TEST_CASE("bench reports timing for a folded model and refuses unfolded runs") {
  const std::string base = "bench " + small_model_flags() +
                           " --height 32 --width 32 --iters 20 --warmup 2";
  const CmdResult r = run_cli(base + " --weights " + final_ckpt().string());
  CAPTURE(r.out);
  REQUIRE(r.status == 0);
  CHECK(contains(r.out, "input 1x3x32x32, 20 iterations (2 warm-up), bn folded: yes"));

  double fps = -1, mean_ms = -1;
  for (const auto& line : lines_of(r.out)) {
    std::istringstream ss(line);
    std::string key;
    ss >> key;
    if (key != "mean") continue;
    std::string unit, med_key, med_val, med_unit, fps_key;
    double med;
    ss >> mean_ms >> unit >> med_key >> med >> med_unit >> fps_key >> fps;
  }
  CHECK(mean_ms > 0.0);
  CHECK(fps > 0.0);
  CHECK_NEAR(fps, 1000.0 / mean_ms, 0.05 * fps);

  // Timing an unfolded model would measure the wrong thing, so it is an error.
  const CmdResult unfolded = run_cli(base + " --no-fold");
  CHECK(unfolded.status == 2);
  CHECK(contains(unfolded.out, "folded"));
}

TEST_CASE("gradcheck audits every op and catches a broken gradient") {
  const CmdResult r = run_cli("gradcheck");
  CAPTURE(r.out);
  REQUIRE(r.status == 0);
  CHECK(contains(r.out, "gradient checks: 27/27 passed"));
  CHECK(!contains(r.out, "FAIL"));
  for (const char* row : {"conv2d", "batch_norm", "grid_sample_warp", "sfa_stage", "full_model"})
    CHECK(contains(r.out, row));

  // Negative control: a deliberately wrong conv backward must be flagged, and
  // only it.
  const CmdResult sab = run_cli("gradcheck --sabotage-conv");
  CAPTURE(sab.out);
  CHECK(sab.status == 2);
  CHECK(contains(sab.out, "gradient checks: 26/27 passed"));
  int fail_rows = 0;
  for (const auto& line : lines_of(sab.out))
    if (contains(line, "FAIL")) {
      ++fail_rows;
      CHECK(contains(line, "conv2d"));
    }
  CHECK(fail_rows == 1);
}

TEST_CASE("config file, flag overrides, and --seed plumbing") {
  const fs::path cfg = test_root() / "run.cfg";
  {
    std::ofstream out(cfg);
    out << "# tiny run\n";
    out << "train.base_lr = 0.125\n";
    out << "train.total_iters = 1\n";
    out << "train.batch_size = 1\n";
    out << "train.val_every = 0\n";
  }
  const std::string stem = "train --paths.data_dir " + dataset_dir().string() + " " +
                           small_model_flags() + " --config " + cfg.string();

  const fs::path c_cfg = test_root() / "c_cfg";
  REQUIRE(run_cli(stem + " --paths.checkpoint_dir " + c_cfg.string()).status == 0);
  auto log = file_lines(c_cfg / "metrics.log");
  CHECK(std::count(log.begin(), log.end(), "# train.base_lr = 0.125"s) == 1);
  CHECK(std::count(log.begin(), log.end(), "# train.total_iters = 1"s) == 1);

  // A flag on the command line beats the config file.
  const fs::path c_flag = test_root() / "c_flag";
  REQUIRE(run_cli(stem + " --train.base_lr 0.25 --paths.checkpoint_dir " + c_flag.string())
              .status == 0);
  log = file_lines(c_flag / "metrics.log");
  CHECK(std::count(log.begin(), log.end(), "# train.base_lr = 0.25"s) == 1);

  // --seed retargets both the training and the data seed.
  const fs::path c_seed = test_root() / "c_seed";
  REQUIRE(run_cli(stem + " --seed 42 --paths.checkpoint_dir " + c_seed.string()).status == 0);
  log = file_lines(c_seed / "metrics.log");
  CHECK(std::count(log.begin(), log.end(), "# train.seed = 42"s) == 1);
  CHECK(std::count(log.begin(), log.end(), "# data.seed = 42"s) == 1);

  // Unknown keys are rejected, not silently ignored.
  const fs::path bad = test_root() / "bad.cfg";
  {
    std::ofstream out(bad);
    out << "train.base_lrr = 0.125\n";
  }
  const CmdResult r = run_cli("train --paths.data_dir " + dataset_dir().string() + " --config " +
                              bad.string());
  CHECK(r.status == 2);
  CHECK(contains(r.out, "unknown key 'train.base_lrr'"));
}

TEST_CASE("train refuses a dataset whose class count contradicts the config") {
  const CmdResult r = run_cli("train --paths.data_dir " + dataset_dir().string() +
                              " --model.classes 7 --model.width 0.0625 --model.in_h 32 "
                              "--model.in_w 32 --train.total_iters 1 --train.batch_size 1 "
                              "--paths.checkpoint_dir " +
                              (test_root() / "c_mismatch").string());
  CHECK(r.status == 2);
  CHECK(contains(r.out, "mismatch"));

  const CmdResult missing = run_cli("train --paths.data_dir " +
                                    (test_root() / "nowhere").string());
  CHECK(missing.status == 2);
  CHECK(contains(missing.out, "run gen-data first"));
}
