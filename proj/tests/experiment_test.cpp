#include <gtest/gtest.h>

#include <filesystem>
#include <map>
#include <set>

#include "ganbalance/experiment.hpp"

using namespace ganbalance;
namespace fs = std::filesystem;

namespace {

struct TempDir {
  fs::path path;
  explicit TempDir(const std::string& tag) {
    path = fs::temp_directory_path() / ("ganbalance_exp_" + tag);
    fs::remove_all(path);
    fs::create_directories(path);
  }
  ~TempDir() { fs::remove_all(path); }
};

constexpr ClassCounts kFullTrain{2013, 3018, 12510, 13781, 15098};

DatasetManifest fake_manifest(const ClassCounts& n, Source source) {
  auto m = empty_manifest();
  for (auto c : kAllClasses)
    for (std::size_t i = 0; i < n[static_cast<std::size_t>(c)]; ++i)
      m[static_cast<std::size_t>(c)].records.push_back(
          {std::string(name(c)) + "/" + std::string(source_name(source)) + std::to_string(i) + ".png", c, source,
           "00000000"});
  return m;
}

std::multiset<std::string> paths(const std::vector<ImageRecord>& v) {
  std::multiset<std::string> s;
  for (const auto& r : v) s.insert(r.path);
  return s;
}

// Tiny images whose first pixel encodes which record they are.
struct FakeStudy {
  DatasetManifest train, accepted;
  BalancePlan plan;
  ImagePool pool{4};
  ImageSet val{4, {}, {}}, test{4, {}, {}};
  TempDir dir{"fake"};

  explicit FakeStudy(const ClassCounts& n) {
    train = fake_manifest(n, Source::real);
    plan = plan_balance(train);
    accepted = fake_manifest(plan.quota, Source::synthetic_accepted);
    std::uint8_t k = 0;
    for (const auto* m : {&train, &accepted})
      for (const auto& r : flatten(*m)) {
        std::vector<std::uint8_t> px(16, k++);
        write_gray_png(dir.path / r.path, 4, 4, px);
      }
    pool.add(dir.path, train);
    pool.add(dir.path, accepted);
    for (auto c : kAllClasses)
      for (int i = 0; i < 3; ++i) {
        std::vector<std::uint8_t> px(16, static_cast<std::uint8_t>(i));
        val.add(px, code(c));
        test.add(px, code(c));
      }
  }
  StudyInputs inputs() const { return {train, accepted, plan, val, test, &pool}; }
};

RepeatOutcome perfect(const ImageSet&, const ImageSet&, const ImageSet& test, std::uint64_t) {
  return {std::vector<double>(4, 100.0), accuracy_from_predictions(test.labels, test.labels)};
}

StudyConfig small_config(std::size_t repeats) {
  StudyConfig c;
  c.repeats = repeats;
  return c;
}

}  // namespace

// --- configuration

TEST(StudyConfig, LockRoundTrips) {
  auto c = StudyConfig::desk();
  c.finalize();
  const auto lock = c.lock();
  StudyConfig back;
  back.apply(lock);
  EXPECT_EQ(back.lock(), lock);
  EXPECT_NE(lock.find("clf.batch_size = 128\n"), std::string::npos);
  EXPECT_NE(lock.find("gan.beta1 = 0.5\n"), std::string::npos);
  EXPECT_NE(lock.find("data.count.Pneumothorax = 401\n"), std::string::npos);
}

TEST(StudyConfig, AppliesValuesAndRejectsBadInput) {
  StudyConfig c;
  c.apply("# comment\nrepeats = 3\nprotocols = DS3, ds1\nclf.iterations = 40  # trailing\n");
  EXPECT_EQ(c.repeats, 3u);
  EXPECT_EQ(c.protocols, (std::vector<Protocol>{Protocol::ds3, Protocol::ds1}));
  EXPECT_DOUBLE_EQ(c.classifier.schedule.midpoint, 20.0);  // follows the run length
  StudyConfig explicit_schedule;
  explicit_schedule.apply("clf.iterations = 40\nclf.lr_midpoint = 7\n");
  EXPECT_DOUBLE_EQ(explicit_schedule.classifier.schedule.midpoint, 7.0);

  StudyConfig d;
  EXPECT_THROW(d.apply("nonsense = 1\n"), ConfigError);
  EXPECT_THROW(d.apply("repeats = -2\n"), ConfigError);
  EXPECT_THROW(d.apply("repeats = 2x\n"), ConfigError);
  EXPECT_THROW(d.apply("protocols = ds4\n"), ConfigError);
  EXPECT_THROW(d.apply("just text\n"), ConfigError);
  StudyConfig e;
  EXPECT_THROW(e.apply("gan.stages = 5\n"), ConfigError);  // 128 px generator for 64 px data
}

// --- assembly

TEST(Assemble, FullCountsDs1Ds2Ds3) {
  const auto train = fake_manifest(kFullTrain, Source::real);
  const auto plan = plan_balance(train);
  const auto accepted = fake_manifest(plan.quota, Source::synthetic_accepted);

  const auto ds1 = assemble(Protocol::ds1, train, plan, accepted, 1);
  EXPECT_EQ(counts_of(ds1), kFullTrain);

  const auto ds2 = assemble(Protocol::ds2, train, plan, accepted, 1);
  EXPECT_EQ(counts_of(ds2), (ClassCounts{2013, 2013, 2013, 2013, 2013}));
  for (const auto& r : ds2) EXPECT_EQ(r.source, Source::real);

  const auto ds3 = assemble(Protocol::ds3, train, plan, accepted, 1);
  EXPECT_EQ(counts_of(ds3), (ClassCounts{30196, 30196, 30196, 30196, 30196}));
  std::size_t real = 0;
  for (const auto& r : ds3) real += r.source == Source::real;
  EXPECT_EQ(real, total_of(kFullTrain));
}

TEST(Assemble, BalancedInputMakesDs1EqualDs2) {
  const auto train = fake_manifest({40, 40, 40, 40, 40}, Source::real);
  const auto plan = plan_balance(train);
  const auto accepted = fake_manifest(plan.quota, Source::synthetic_accepted);
  EXPECT_EQ(paths(assemble(Protocol::ds1, train, plan, accepted, 5)),
            paths(assemble(Protocol::ds2, train, plan, accepted, 5)));
}

TEST(Assemble, SeededSelection) {
  const auto train = fake_manifest({10, 20, 30, 40, 50}, Source::real);
  const auto plan = plan_balance(train);
  const auto accepted = fake_manifest({200, 200, 200, 200, 200}, Source::synthetic_accepted);
  for (auto p : {Protocol::ds2, Protocol::ds3}) {
    const auto a = assemble(p, train, plan, accepted, 9), b = assemble(p, train, plan, accepted, 9),
               other = assemble(p, train, plan, accepted, 10);
    EXPECT_EQ(a, b);
    EXPECT_NE(paths(a), paths(other)) << protocol_name(p);
  }
  // DS3 is shuffled, not grouped by class.
  const auto ds3 = assemble(Protocol::ds3, train, plan, accepted, 9);
  std::size_t changes = 0;
  for (std::size_t i = 1; i < ds3.size(); ++i) changes += ds3[i].label != ds3[i - 1].label;
  EXPECT_GT(changes, 50u);
}

TEST(Assemble, Ds3DeficitNeedsOverride) {
  const auto train = fake_manifest({10, 20, 30, 40, 50}, Source::real);
  const auto plan = plan_balance(train);  // target 100
  auto quota = plan.quota;
  quota[0] -= 5;
  const auto accepted = fake_manifest(quota, Source::synthetic_accepted);
  try {
    (void)assemble(Protocol::ds3, train, plan, accepted, 1);
    FAIL() << "expected DataError";
  } catch (const DataError& e) {
    const std::string msg = e.what();
    EXPECT_NE(msg.find("Pneumothorax: have 85, need 90"), std::string::npos) << msg;
    EXPECT_EQ(msg.find("Cardiomegaly"), std::string::npos) << msg;
  }
  const auto ds3 = assemble(Protocol::ds3, train, plan, accepted, 1, true);
  EXPECT_EQ(counts_of(ds3), (ClassCounts{95, 100, 100, 100, 100}));
}

TEST(Assemble, RejectsMislabelledSources) {
  const auto train = fake_manifest({3, 3, 3, 3, 3}, Source::real);
  const auto plan = plan_balance(train);
  auto pending = fake_manifest(plan.quota, Source::synthetic);
  EXPECT_THROW((void)assemble(Protocol::ds3, train, plan, pending, 1), DataError);
  auto bad_train = train;
  bad_train[2].records[0].source = Source::synthetic_accepted;
  EXPECT_THROW((void)assemble(Protocol::ds1, bad_train, plan, pending, 1), DataError);
}

TEST(Assemble, Ds3HoldsOnlyAcceptedSamplesFromTheStore) {
  TempDir dir("store");
  CurationStore store;
  ImageSet imgs{4, {}, {}};
  for (int i = 0; i < 30; ++i) imgs.add(std::vector<std::uint8_t>(16, static_cast<std::uint8_t>(i)), code(ClassLabel::Pneumothorax));
  const auto samples = stage_generated(dir.path, imgs, "p-", "ck", 1);
  store.enqueue(samples);
  std::set<std::string> accepted_paths;
  for (std::size_t i = 0; i < samples.size(); ++i) {
    if (i % 3 == 2) continue;  // left pending
    const auto d = i % 3 == 0 ? Decision::accept : Decision::reject;
    store.post_verdict(samples[i].id, d, "r");
    if (d == Decision::accept) accepted_paths.insert(samples[i].png_path);
  }
  const auto train = fake_manifest({1, 4, 4, 4, 4}, Source::real);
  const auto plan = plan_balance(train);  // target 8, Pneumothorax needs 7
  const auto ds3 = assemble(Protocol::ds3, train, plan, store.export_all_accepted(), 3, true);
  std::size_t synthetic = 0;
  for (const auto& r : ds3)
    if (r.source != Source::real) {
      ++synthetic;
      EXPECT_TRUE(accepted_paths.count(r.path)) << r.path;
    }
  EXPECT_EQ(synthetic, 7u);
}

// --- aggregation and rendering

TEST(Aggregate, SampleStandardDeviation) {
  const auto s = mean_std({1.0, 2.0, 3.0, 4.0});
  EXPECT_DOUBLE_EQ(s.mean, 2.5);
  EXPECT_NEAR(s.std, std::sqrt(5.0 / 3.0), 1e-12);
  EXPECT_EQ(mean_std({7.0, 7.0, 7.0}).std, 0.0);
  EXPECT_EQ(mean_std({7.0}).std, 0.0);
  EXPECT_DOUBLE_EQ(median({3.0, 1.0, 2.0}), 2.0);
  EXPECT_DOUBLE_EQ(median({4.0, 1.0, 2.0, 3.0}), 2.5);
}

namespace {

RepeatOutcome fabricated(std::array<double, kNumClasses> per_class, double total, std::vector<double> curve = {}) {
  RepeatOutcome o;
  for (std::size_t c = 0; c < kNumClasses; ++c) o.test.per_class[c] = per_class[c];
  o.test.total = total;
  o.curve = std::move(curve);
  return o;
}

}  // namespace

TEST(Report, TableLayoutAndCells) {
  ExperimentReport r;
  r.protocols = {Protocol::ds1, Protocol::ds2, Protocol::ds3};
  r.results[Protocol::ds1].repeats = {fabricated({50, 60, 70, 80, 90}, 92.1 - 0.41),
                                      fabricated({50, 60, 70, 80, 90}, 92.1 + 0.41)};
  r.results[Protocol::ds3].repeats = {fabricated({1, 2, 3, 4, 5}, 10)};
  const auto table = render_table(r);
  std::istringstream in(table);
  std::vector<std::string> lines;
  for (std::string l; std::getline(in, l);) lines.push_back(l);
  ASSERT_GE(lines.size(), 8u);
  EXPECT_EQ(lines[0].substr(0, 5), "Class");
  EXPECT_NE(lines[0].find("DS1"), std::string::npos);
  EXPECT_EQ(lines[0].find("DS2"), std::string::npos);
  EXPECT_NE(lines[0].find("DS3"), std::string::npos);
  const char* rows[] = {"Cardiomegaly", "Normal", "Pleural Effusion", "Pulmonary Edema", "Pneumothorax", "Total"};
  for (std::size_t i = 0; i < 6; ++i) EXPECT_EQ(lines[i + 1].rfind(rows[i], 0), 0u) << lines[i + 1];
  // sample std of {91.69, 92.51} is 0.41 * sqrt(2)
  EXPECT_NE(lines[6].find(format_mean_std(92.1, 0.41 * std::sqrt(2.0))), std::string::npos) << lines[6];
  EXPECT_NE(lines[1].find("90.00±0.00"), std::string::npos) << lines[1];
  EXPECT_NE(table.find("note: ds2 omitted"), std::string::npos);
  EXPECT_EQ(format_mean_std(92.1, 0.41), "92.10±0.41");
}

TEST(Report, CsvRowOrder) {
  ExperimentReport r;
  r.protocols = {Protocol::ds1};
  r.results[Protocol::ds1].repeats = {fabricated({50, 60, 70, 80, 90}, 75)};
  EXPECT_EQ(render_csv(r),
            "protocol,class,accuracy,std\nds1,Cardiomegaly,90.00,0.00\nds1,Normal,80.00,0.00\n"
            "ds1,PleuralEffusion,70.00,0.00\nds1,PulmonaryEdema,60.00,0.00\nds1,Pneumothorax,50.00,0.00\n"
            "ds1,Total,75.00,0.00\n");
}

TEST(Curves, OneRowPerIterationAndCarryForward) {
  ProtocolResult r;
  std::vector<double> full(100);
  for (std::size_t i = 0; i < full.size(); ++i) full[i] = static_cast<double>(i) * 0.5;
  r.repeats = {fabricated({}, 0, full)};
  const auto single = parse_curve_csv(render_curve_csv(r));
  ASSERT_EQ(single.size(), 100u);
  for (std::size_t i = 0; i < 100; ++i) {
    EXPECT_EQ(single[i].iteration, i + 1);
    EXPECT_DOUBLE_EQ(single[i].mean, full[i]);  // monotone curve survives the round trip
    EXPECT_EQ(single[i].std, 0.0);
  }
  r.repeats.push_back(fabricated({}, 0, {10.0, 20.0}));  // stopped after two iterations
  const auto both = parse_curve_csv(render_curve_csv(r));
  ASSERT_EQ(both.size(), 100u);
  EXPECT_NEAR(both[50].mean, (25.0 + 20.0) / 2, 1e-4);
  EXPECT_NEAR(both[50].std, mean_std({25.0, 20.0}).std, 1e-4);
}

// --- study harness

TEST(Study, PerfectStubGivesHundredEverywhere) {
  FakeStudy f({3, 4, 5, 6, 7});
  const auto report = run_study(f.inputs(), small_config(3), perfect, f.dir.path / "run");
  for (auto p : {Protocol::ds1, Protocol::ds2, Protocol::ds3}) {
    ASSERT_EQ(report.results.at(p).repeats.size(), 3u);
    for (auto c : kAllClasses) {
      const auto s = report.class_stat(p, c);
      ASSERT_TRUE(s);
      EXPECT_EQ(s->mean, 100.0);
      EXPECT_EQ(s->std, 0.0);
    }
  }
  const auto csv = read_text(f.dir.path / "run" / "report.csv");
  EXPECT_NE(csv.find("ds3,Total,100.00,0.00"), std::string::npos);
  for (const char* file : {"report.txt", "curves_ds1.csv", "curves_ds2.csv", "curves_ds3.csv", "config.lock", "repeats.csv"})
    EXPECT_TRUE(fs::exists(f.dir.path / "run" / file)) << file;
  EXPECT_EQ(report.results.at(Protocol::ds3).train_counts, (ClassCounts{14, 14, 14, 14, 14}));
  EXPECT_EQ(report.results.at(Protocol::ds2).train_counts, (ClassCounts{3, 3, 3, 3, 3}));
}

TEST(Study, ProtocolsSeeIdenticalValAndTest) {
  FakeStudy f({3, 4, 5, 6, 7});
  std::set<std::string> seen;
  std::map<std::uint64_t, std::set<std::string>> train_by_seed;
  auto spy = [&](const ImageSet& train, const ImageSet& val, const ImageSet& test, std::uint64_t seed) {
    seen.insert(image_set_checksum(val) + image_set_checksum(test));
    train_by_seed[seed].insert(image_set_checksum(train));
    return perfect(train, val, test, seed);
  };
  (void)run_study(f.inputs(), small_config(2), spy);
  EXPECT_EQ(seen.size(), 1u);
  ASSERT_EQ(train_by_seed.size(), 2u);  // one seed per repeat, shared by its protocols
  for (const auto& [seed, sets] : train_by_seed) EXPECT_EQ(sets.size(), 3u);
}

TEST(Study, FailedRepeatKeepsFinishedOnes) {
  FakeStudy f({3, 4, 5, 6, 7});
  int calls = 0;
  auto flaky = [&](const ImageSet& train, const ImageSet& val, const ImageSet& test, std::uint64_t seed) {
    if (++calls == 5) throw std::runtime_error("trainer crashed");
    return perfect(train, val, test, seed);
  };
  EXPECT_THROW((void)run_study(f.inputs(), small_config(2), flaky, f.dir.path / "run"), std::runtime_error);
  const auto partial = read_text(f.dir.path / "run" / "repeats.csv");
  std::size_t totals = 0;
  for (std::size_t pos = 0; (pos = partial.find(",Total,", pos)) != std::string::npos; ++pos) ++totals;
  EXPECT_EQ(totals, 4u);
  EXPECT_NE(partial.find("ds1,1,"), std::string::npos);
  EXPECT_EQ(partial.find("ds2,1,"), std::string::npos);
}

TEST(Study, SameSeedsSameCsv) {
  FakeStudy f({3, 4, 5, 6, 7});
  // Accuracy depends on the seed and the assembled training set.
  auto noisy = [](const ImageSet& train, const ImageSet&, const ImageSet& test, std::uint64_t seed) {
    Rng rng(seed ^ crc32_of(train.pixels));
    auto pred = test.labels;
    for (auto& p : pred)
      if (uniform01(rng) < 0.3) p = (p + 1) % static_cast<int>(kNumClasses);
    return RepeatOutcome{{50.0, 60.0}, accuracy_from_predictions(pred, test.labels)};
  };
  auto cfg = small_config(3);
  const auto a = run_study(f.inputs(), cfg, noisy), b = run_study(f.inputs(), cfg, noisy);
  EXPECT_EQ(render_csv(a), render_csv(b));
  cfg.seed += 1;
  EXPECT_NE(render_csv(a), render_csv(run_study(f.inputs(), cfg, noisy)));
  const auto identical = [](const ImageSet&, const ImageSet&, const ImageSet& test, std::uint64_t) {
    return RepeatOutcome{{1.0}, accuracy_from_predictions(std::vector<int>(test.labels.size(), 0), test.labels)};
  };
  const auto flat = run_study(f.inputs(), cfg, identical);
  EXPECT_EQ(flat.total_stat(Protocol::ds1).std, 0.0);
}

// --- end to end on a very small procedural dataset

namespace {

StudyConfig tiny_pipeline_config() {
  StudyConfig c;
  c.apply(
      "repeats = 2\n"
      "data.image_size = 32\n"
      "data.count.Pneumothorax = 12\ndata.count.PulmonaryEdema = 14\ndata.count.PleuralEffusion = 18\n"
      "data.count.Normal = 20\ndata.count.Cardiomegaly = 22\n"
      "data.val_per_class = 3\ndata.test_per_class = 3\n"
      "gan.stages = 3\ngan.base_channels = 16\ngan.z_dim = 8\ngan.batch_size = 4\ngan.iterations = 1\n"
      "gan.images_per_class = 8\n"
      "clf.stages = 4,4,4\nclf.hidden_units = 8\nclf.batch_size = 16\nclf.iterations = 2\n"
      "clf.batches_per_iteration = 1\n");
  return c;
}

}  // namespace

TEST(Pipeline, GanStepsDoNotDependOnClassSize) {
  auto cfg = tiny_pipeline_config();
  cfg.apply("gan.iterations = 2\n");
  cfg.finalize();
  const auto images = generate_desk_images({3, 0, 0, 0, 20}, 32, 5);
  ImageSet few{32, {}, {}}, many{32, {}, {}};
  for (std::size_t i = 0; i < images.size(); ++i) (images.labels[i] == 0 ? few : many).add(images.image(i), images.labels[i]);
  const auto small = train_class_gan(cfg, few, ClassLabel::Pneumothorax).second;
  const auto large = train_class_gan(cfg, many, ClassLabel::Cardiomegaly).second;
  // a pass is 8 pool images at batch 4 whatever the class holds
  EXPECT_EQ(small.history.size(), 4u);
  EXPECT_EQ(large.history.size(), 4u);
  EXPECT_THROW(train_class_gan(cfg, ImageSet{32, {}, {}}, ClassLabel::Normal), std::invalid_argument);
}

TEST(Pipeline, EndToEndIsDeterministic) {
  TempDir a("pipe_a"), b("pipe_b");
  const auto cfg = tiny_pipeline_config();
  const auto ra = run_pipeline(cfg, a.path, classifier_trainer(cfg.classifier));
  const auto rb = run_pipeline(cfg, b.path, classifier_trainer(cfg.classifier));
  EXPECT_EQ(read_text(a.path / "report.csv"), read_text(b.path / "report.csv"));
  for (const char* f : {"curves_ds1.csv", "curves_ds2.csv", "curves_ds3.csv", "config.lock", "plan.csv"})
    EXPECT_EQ(read_text(a.path / f), read_text(b.path / f)) << f;
  EXPECT_EQ(read_text(a.path / "config.lock"), cfg.lock());
  const auto plan = parse_manifest(read_text(a.path / "accepted.tsv"));
  // train counts 6,8,12,14,16: target 32
  EXPECT_EQ(counts_of(plan), (ClassCounts{26, 24, 20, 18, 16}));
  EXPECT_EQ(ra.results.at(Protocol::ds3).train_counts, (ClassCounts{32, 32, 32, 32, 32}));
  EXPECT_EQ(ra.results.at(Protocol::ds2).train_counts, (ClassCounts{6, 6, 6, 6, 6}));
  EXPECT_EQ(ra.results.at(Protocol::ds1).train_counts, (ClassCounts{6, 8, 12, 14, 16}));
  EXPECT_EQ(ra.results.at(Protocol::ds1).repeats[0].curve.size(), 2u);
  EXPECT_EQ(ra.val_checksum, rb.val_checksum);

  // A second run in the same directory reuses the dataset and the curated images.
  const auto again = run_pipeline(cfg, a.path, classifier_trainer(cfg.classifier));
  EXPECT_EQ(render_csv(again), render_csv(ra));
}

TEST(Pipeline, PendingReviewBlocksDs3UntilAccepted) {
  TempDir a("pipe_review");
  auto cfg = tiny_pipeline_config();
  cfg.auto_accept = false;
  EXPECT_THROW((void)run_pipeline(cfg, a.path, perfect), DataError);
  // Everything is queued and pending; accept all and rerun.
  CurationStore store(a.path / "curation" / "verdicts.jsonl");
  for (const auto& s : store.list_pending(std::nullopt, 1000, std::nullopt)) store.post_verdict(s.id, Decision::accept, "t");
  const auto r = run_pipeline(cfg, a.path, perfect);
  EXPECT_EQ(r.results.at(Protocol::ds3).train_counts, (ClassCounts{32, 32, 32, 32, 32}));
}
