// Acceptance runner: one PASS/FAIL line per criterion, exit status 1 if any
// fails. `--skip-study` leaves out the desk-scale study (about 20 minutes).

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <functional>
#include <iostream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "ganbalance/experiment.hpp"
#include "gradient_cases.hpp"
#include "oracle_cases.hpp"

using namespace ganbalance;
namespace fs = std::filesystem;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

double seconds_since(std::chrono::steady_clock::time_point t0) {
  return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

fs::path scratch(const std::string& tag) {
  auto p = fs::temp_directory_path() / ("ganbalance_acceptance_" + tag);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

Outcome gradient_suite() {
  const auto t0 = std::chrono::steady_clock::now();
  const auto reports = gradcases::run_suite(50);
  const double secs = seconds_since(t0);
  std::size_t cases = 0, failures = 0;
  std::string first;
  bool enough = true;
  for (const auto& [layer, rep] : reports) {
    cases += rep.cases;
    failures += rep.failures;
    enough = enough && rep.cases >= 50;
    if (rep.failures && first.empty()) first = "; " + layer + ": " + rep.first_failure;
  }
  return {failures == 0 && enough && secs < 60.0,
          std::to_string(reports.size()) + " layers x 50 cases (" + std::to_string(cases) + "), " +
              std::to_string(failures) + " failures, " + fmt("%.1f s", secs) + first};
}

Outcome oracle_suite() {
  const auto conv = oraclecases::conv2d_vs_loops(20, 42, 1e-5);
  const auto adj = oraclecases::conv_transpose_adjoint(20, 7, 1e-4);
  const auto pool = oraclecases::maxpool_vs_scan(20, 3);
  const bool ok = conv.trials == 20 && conv.failures == 0 && adj.trials == 20 && adj.failures == 0 &&
                  pool.trials == 20 && pool.failures == 0;
  std::ostringstream d;
  d << "conv2d worst " << conv.worst << " over " << conv.trials << ", adjoint worst rel " << adj.worst << " over "
    << adj.trials << ", maxpool worst " << pool.worst << " over " << pool.trials;
  return {ok, d.str()};
}

Outcome balance_arithmetic() {
  const auto t0 = std::chrono::steady_clock::now();
  // Class totals in code order: Pneumothorax, Pulmonary Edema, Pleural Effusion, Normal, Cardiomegaly.
  const ClassCounts totals{4013, 5018, 14510, 15781, 17098};
  auto m = empty_manifest();
  for (auto c : kAllClasses)
    for (std::size_t i = 0; i < totals[static_cast<std::size_t>(c)]; ++i)
      m[static_cast<std::size_t>(c)].records.push_back(
          {std::string(name(c)) + "/" + std::to_string(i) + ".png", c, Source::real, "00000000"});
  const auto splits = make_splits(m, {1000, 1000, 1});
  const auto plan = plan_balance(splits.train);
  const double secs = seconds_since(t0);
  // Hand arithmetic: train = total - 2000; target = 2 x 15,098; quota = target - train.
  const ClassCounts quotas{28183, 27178, 17686, 16415, 15098};
  std::string q;
  for (auto v : plan.quota) q += (q.empty() ? "" : ",") + std::to_string(v);
  return {plan.target == 30196 && plan.quota == quotas && secs < 1.0,
          "target " + std::to_string(plan.target) + ", quotas " + q + ", " + fmt("%.3f s", secs)};
}

Outcome classifier_geometry() {
  auto cfg = ClassifierConfig::full_scale();
  cfg.zero_init_output = true;
  cfg.batch_size = 8;
  cfg.iterations = 1;
  cfg.batches_per_iteration = 1;
  Rng rng(1);
  Classifier model(cfg, rng);
  const auto features = model.feature_length();
  ImageSet train{cfg.input_size, {}, {}};
  Rng px(2);
  std::vector<std::uint8_t> img(cfg.input_size * cfg.input_size);
  for (int i = 0; i < 10; ++i) {
    for (auto& v : img) v = static_cast<std::uint8_t>(uniform_index(px, 256));
    train.add(img, i % 5);
  }
  double worst = 0.0;
  {
    NoGradGuard no_grad;
    const auto p = model.forward(to_tensor(train, PixelScale::unit));
    for (float v : p.data()) worst = std::max(worst, std::abs(static_cast<double>(v) - 0.2));
  }
  const auto res = train_classifier(model, train, train, rng);
  const double dev = std::abs(res.first_batch_loss - std::log(5.0));
  return {features == 4096 && worst <= 1e-6 && dev <= 1e-3,
          "features " + std::to_string(features) + ", max |p - 0.2| " + fmt("%.2e", worst) + ", first loss " +
              fmt("%.6f", res.first_batch_loss) + " (ln 5 = 1.609438)"};
}

Outcome toy_gan() {
  const auto t0 = std::chrono::steady_clock::now();
  ToyGanConfig cfg;
  const auto res = run_toy_gan(cfg, 2024);
  const double secs = seconds_since(t0);
  const bool ok = res.history.size() == 2000 && std::abs(res.generated_mean - cfg.data_mean) <= 0.5 &&
                  res.discriminator_accuracy >= 0.40 && res.discriminator_accuracy <= 0.80 && secs < 180.0;
  return {ok, "mean " + fmt("%.3f", res.generated_mean) + " (data " + fmt("%.1f", cfg.data_mean) + "), D accuracy " +
                  fmt("%.3f", res.discriminator_accuracy) + ", " + std::to_string(res.history.size()) + " steps, " +
                  fmt("%.1f s", secs)};
}

Outcome desk_study(const fs::path& run_dir) {
  const auto t0 = std::chrono::steady_clock::now();
  fs::remove_all(run_dir);
  auto cfg = StudyConfig::desk();
  cfg.finalize();
  const auto report = run_pipeline(cfg, run_dir, classifier_trainer(cfg.classifier), [&](const std::string& s) {
    std::cerr << fmt("[%6.0f s] ", seconds_since(t0)) << s << "\n";
  });
  const double secs = seconds_since(t0);
  // Minority class: the fewest generated images.
  std::size_t minority = 0;
  for (std::size_t c = 1; c < kNumClasses; ++c)
    if (cfg.class_counts[c] < cfg.class_counts[minority]) minority = c;
  auto per_repeat = [&](Protocol p) {
    std::vector<double> v;
    for (const auto& rep : report.results.at(p).repeats) v.push_back(rep.test.per_class[minority].value_or(0.0));
    return v;
  };
  const auto t1 = report.total_stat(Protocol::ds1), t3 = report.total_stat(Protocol::ds3);
  const double m1 = median(per_repeat(Protocol::ds1)), m3 = median(per_repeat(Protocol::ds3));
  const bool ok = report.results.at(Protocol::ds3).repeats.size() == 5 && t3.mean > t1.mean && m3 - m1 >= 5.0 &&
                  secs <= 1800.0;
  std::cout << render_table(report);
  return {ok, "total DS1 " + format_mean_std(t1.mean, t1.std) + " vs DS3 " + format_mean_std(t3.mean, t3.std) + "; " +
                  std::string(display_name(static_cast<ClassLabel>(minority))) + " median DS1 " + format2(m1) +
                  " vs DS3 " + format2(m3) + " (" + fmt("%+.2f", m3 - m1) + "); " + fmt("%.0f s", secs)};
}

StudyConfig tiny_config() {
  StudyConfig c;
  c.apply(
      "repeats = 2\n"
      "data.image_size = 32\n"
      "data.count.Pneumothorax = 12\ndata.count.PulmonaryEdema = 14\ndata.count.PleuralEffusion = 18\n"
      "data.count.Normal = 20\ndata.count.Cardiomegaly = 22\n"
      "data.val_per_class = 3\ndata.test_per_class = 3\n"
      "gan.stages = 3\ngan.base_channels = 16\ngan.z_dim = 8\ngan.batch_size = 4\ngan.iterations = 2\n"
      "clf.stages = 4,4,4\nclf.hidden_units = 8\nclf.batch_size = 16\nclf.iterations = 3\n"
      "clf.batches_per_iteration = 1\n");
  return c;
}

Outcome determinism_and_formats() {
  std::vector<std::string> notes;
  bool ok = true;

  // GBCK round trip of a trained-shape generator state.
  {
    auto cfg = GanConfig::desk();
    cfg.base_channels = 64;
    Rng rng(5);
    Generator g(cfg, rng);
    const auto dir = scratch("ckpt");
    save_checkpoint(dir / "g.gbck", g.state());
    const auto bytes = read_file_bytes(dir / "g.gbck");
    Rng other(6);
    Generator h(cfg, other);
    h.load_state(load_checkpoint(dir / "g.gbck"));
    const bool same = encode_checkpoint(h.state()) == bytes;
    ok = ok && same;
    notes.push_back(std::string("checkpoint ") + (same ? "bit-identical" : "DIFFERS") + " (" +
                    std::to_string(bytes.size()) + " bytes)");
    fs::remove_all(dir);
  }

  // Repeated end-to-end study, same seeds.
  {
    const auto a = scratch("study_a"), b = scratch("study_b");
    const auto cfg = tiny_config();
    (void)run_pipeline(cfg, a, classifier_trainer(cfg.classifier));
    (void)run_pipeline(cfg, b, classifier_trainer(cfg.classifier));
    bool same = true;
    for (const char* f : {"report.csv", "curves_ds1.csv", "curves_ds2.csv", "curves_ds3.csv"})
      same = same && read_text(a / f) == read_text(b / f);
    ok = ok && same;
    notes.push_back(std::string("study CSVs ") + (same ? "bit-identical" : "DIFFER"));
    fs::remove_all(a);
    fs::remove_all(b);
  }

  // Outcome-log replay.
  {
    const auto dir = scratch("replay");
    ImageSet imgs{4, {}, {}};
    for (int i = 0; i < 60; ++i) imgs.add(std::vector<std::uint8_t>(16, static_cast<std::uint8_t>(i)), i % 5);
    std::string before, after;
    auto snapshot = [](const CurationStore& s) {
      std::string out;
      for (const auto& x : s.samples()) out += to_json(x).dump() + "\n";
      for (const auto& v : s.verdicts()) out += v.sample_id + "," + std::string(decision_name(v.decision)) + "," + v.reviewer + "\n";
      return out;
    };
    {
      CurationStore store(dir / "log.jsonl");
      const auto samples = stage_generated(dir / "img", imgs, "s", "ck", 1);
      store.enqueue(samples);
      Rng rng(9);
      for (const auto& s : samples)
        if (uniform01(rng) < 0.7)
          store.post_verdict(s.id, uniform01(rng) < 0.5 ? Decision::accept : Decision::reject, "r", 100);
      before = snapshot(store);
    }
    CurationStore replayed(dir / "log.jsonl");
    after = snapshot(replayed);
    const bool same = before == after && !before.empty();
    ok = ok && same;
    notes.push_back(std::string("log replay ") + (same ? "exact" : "DIFFERS"));
    fs::remove_all(dir);
  }

  std::string detail;
  for (const auto& n : notes) detail += (detail.empty() ? "" : ", ") + n;
  return {ok, detail};
}

}  // namespace

int main(int argc, char** argv) {
  bool skip_study = false;
  fs::path run_dir = fs::temp_directory_path() / "ganbalance_acceptance_desk";
  for (int i = 1; i < argc; ++i) {
    if (!std::strcmp(argv[i], "--skip-study"))
      skip_study = true;
    else if (!std::strcmp(argv[i], "--run-dir") && i + 1 < argc)
      run_dir = argv[++i];
    else {
      std::cerr << "usage: acceptance [--skip-study] [--run-dir DIR]\n";
      return 2;
    }
  }

  std::vector<std::pair<std::string, std::function<Outcome()>>> criteria{
      {"gradient suite", gradient_suite},
      {"oracle suite", oracle_suite},
      {"balance arithmetic", balance_arithmetic},
      {"classifier geometry", classifier_geometry},
      {"toy GAN equilibrium", toy_gan},
  };
  if (!skip_study) criteria.push_back({"desk-scale study", [&] { return desk_study(run_dir); }});
  criteria.push_back({"determinism and formats", determinism_and_formats});

  int failed = 0;
  for (const auto& [label, run] : criteria) {
    Outcome v;
    try {
      v = run();
    } catch (const std::exception& e) {
      v = {false, std::string("exception: ") + e.what()};
    }
    failed += !v.pass;
    std::cout << (v.pass ? "PASS " : "FAIL ") << label << ": " << v.detail << std::endl;
  }
  if (skip_study) std::cout << "SKIP desk-scale study: --skip-study" << std::endl;
  std::cout << (failed ? std::to_string(failed) + " criteria failed" : std::string("all criteria passed")) << std::endl;
  return failed ? 1 : 0;
}
