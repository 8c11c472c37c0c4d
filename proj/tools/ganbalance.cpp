// ganbalance command-line tool.

#include <CLI11.hpp>
#include <chrono>
#include <csignal>
#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>

#include "ganbalance/curation_server.hpp"
#include "ganbalance/experiment.hpp"

namespace fs = std::filesystem;
using namespace ganbalance;

namespace {

void say(const std::string& s) {
  std::cout << s << std::endl;
}

StudyConfig config_from(const std::string& path) {
  StudyConfig cfg;
  if (!path.empty()) cfg.apply(read_text(path));
  cfg.finalize();
  return cfg;
}

ClassLabel class_from(const std::string& s) {
  const auto label = parse_label(s);
  if (!label) throw CLI::ValidationError("--class", "unknown class " + s);
  return *label;
}

httplib::Server* g_server = nullptr;

void stop_server(int) {
  if (g_server) g_server->stop();
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ganbalance: GAN-based class balancing for image classification"};
  app.require_subcommand(1);

  // gen-data
  std::string config_path, out_dir;
  auto* gen = app.add_subcommand("gen-data", "Generate the procedural desk dataset (PNG per class + manifest.tsv)");
  gen->add_option("--out", out_dir, "Dataset root")->required();
  gen->add_option("--config", config_path, "Study config (data.* keys)");

  // plan-balance
  std::string run_dir = "run";
  std::vector<std::size_t> counts;
  std::size_t reserve = 0, multiplier = 2;
  auto* plan = app.add_subcommand("plan-balance", "Split a dataset and compute per-class synthesis quotas");
  plan->add_option("--run", run_dir, "Run directory (dataset under <run>/data)");
  plan->add_option("--config", config_path, "Study config");
  plan->add_option("--counts", counts, "Per-class totals in code order; arithmetic only, no dataset")->expected(5);
  plan->add_option("--reserve", reserve, "Per-class val+test reserve used with --counts");
  plan->add_option("--multiplier", multiplier, "Target = multiplier x largest class (with --counts)");

  // train-gan
  std::string class_name;
  auto* tgan = app.add_subcommand("train-gan", "Train one class's GAN on its training split");
  tgan->add_option("--class", class_name, "Class name")->required();
  tgan->add_option("--run", run_dir, "Run directory");
  tgan->add_option("--config", config_path, "Study config");

  // enqueue
  std::string store_path, checkpoint, stage_dir;
  std::size_t count = 0;
  std::uint64_t sample_seed = 1;
  bool auto_accept = false;
  auto* enq = app.add_subcommand("enqueue", "Sample a trained generator and queue the images for review");
  enq->add_option("--checkpoint", checkpoint, "Generator checkpoint (.gbck)")->required();
  enq->add_option("--class", class_name, "Class of the generated images")->required();
  enq->add_option("--count", count, "Number of images")->required();
  enq->add_option("--store", store_path, "Verdict log")->required();
  enq->add_option("--stage", stage_dir, "Directory for the staged PNGs")->required();
  enq->add_option("--config", config_path, "Study config (gan.* keys must match the checkpoint)");
  enq->add_option("--seed", sample_seed, "Noise seed");
  enq->add_flag("--auto-accept", auto_accept, "Accept on enqueue");

  // serve-curation
  int port = 8080;
  std::string host = "127.0.0.1";
  auto* serve = app.add_subcommand("serve-curation", "Serve the curation HTTP API");
  serve->add_option("--port", port, "Port");
  serve->add_option("--host", host, "Bind address");
  serve->add_option("--store", store_path, "Verdict log")->required();
  serve->add_flag("--auto-accept", auto_accept, "Accept everything on enqueue");

  // study
  std::string protocols;
  std::size_t repeats = 0;
  std::uint64_t seed = 0;
  auto* study = app.add_subcommand("study", "Run the DS1/DS2/DS3 study end to end");
  study->add_option("--protocols", protocols, "Comma-separated subset of ds1,ds2,ds3");
  study->add_option("--repeats", repeats, "Repeats per protocol");
  auto* seed_opt = study->add_option("--seed", seed, "Study seed");
  study->add_option("--config", config_path, "Study config");
  study->add_option("--run", run_dir, "Run directory");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) {
      const auto cfg = config_from(config_path);
      const auto m = ensure_desk_dataset(cfg, out_dir);
      say("wrote " + std::to_string(total_of(counts_of(m))) + " images to " + out_dir);
    } else if (*plan) {
      if (!counts.empty()) {
        ClassCounts train{};
        for (std::size_t c = 0; c < kNumClasses; ++c) {
          if (counts[c] < reserve) throw DataError("count below reserve for " + std::string(name(static_cast<ClassLabel>(c))));
          train[c] = counts[c] - reserve;
        }
        std::cout << serialize_plan(plan_balance(train, multiplier));
      } else {
        const auto cfg = config_from(config_path);
        fs::create_directories(run_dir);
        const auto m = ensure_desk_dataset(cfg, fs::path(run_dir) / "data");
        const auto [splits, p] = plan_study(cfg, m, run_dir);
        std::cout << serialize_plan(p);
      }
    } else if (*tgan) {
      const auto cfg = config_from(config_path);
      const auto label = class_from(class_name);
      fs::create_directories(run_dir);
      const auto data_root = fs::path(run_dir) / "data";
      const auto m = ensure_desk_dataset(cfg, data_root);
      const auto [splits, p] = plan_study(cfg, m, run_dir);
      const auto images = load_images(data_root, splits.train[static_cast<std::size_t>(label)].records, cfg.image_size);
      auto [g, result] = train_class_gan(cfg, images, label);
      const auto ckpt = fs::path(run_dir) / "gan" / (std::string(name(label)) + ".gbck");
      save_checkpoint(ckpt, g.state());
      write_text(fs::path(run_dir) / "gan" / (std::string(name(label)) + "_losses.csv"), loss_history_csv(result));
      say("trained " + std::to_string(result.history.size()) + " steps; checkpoint " + ckpt.string() + "; quota " +
          std::to_string(p.quota[static_cast<std::size_t>(label)]));
    } else if (*enq) {
      const auto cfg = config_from(config_path);
      const auto label = class_from(class_name);
      Rng rng(0);
      Generator g(cfg.gan, rng);
      g.load_state(load_checkpoint(checkpoint));
      CurationStore store(store_path);
      store.set_auto_accept(auto_accept);
      const auto images = sample_generator(g, label, count, sample_seed);
      const std::string prefix = std::string(name(label)) + "-s" + std::to_string(sample_seed) + "-";
      const auto staged = stage_generated(fs::absolute(stage_dir), images, prefix, fs::path(checkpoint).filename().string(), now_ms());
      store.enqueue(staged);
      say("queued " + std::to_string(staged.size()) + " " + std::string(name(label)) + " images");
    } else if (*serve) {
      CurationStore store(store_path);
      if (store.replayed_torn_write()) say("dropped a torn final log line");
      store.set_auto_accept(auto_accept);
      httplib::Server server;
      register_curation_routes(server, store);
      g_server = &server;
      std::signal(SIGINT, stop_server);
      std::signal(SIGTERM, stop_server);
      say("serving " + store_path + " on http://" + host + ":" + std::to_string(port));
      if (!server.listen(host, port)) throw std::runtime_error("cannot listen on port " + std::to_string(port));
    } else if (*study) {
      StudyConfig cfg;
      if (!config_path.empty()) cfg.apply(read_text(config_path));
      if (!protocols.empty()) {
        auto b = cfg.bindings();
        std::find_if(b.begin(), b.end(), [](const auto& x) { return x.key == "protocols"; })->set(protocols);
      }
      if (repeats) cfg.repeats = repeats;
      if (*seed_opt) cfg.seed = seed;
      cfg.finalize();
      const auto t0 = std::chrono::steady_clock::now();
      const auto report = run_pipeline(cfg, run_dir, classifier_trainer(cfg.classifier), say);
      std::cout << render_table(report);
      const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      say("finished in " + std::to_string(static_cast<long>(secs)) + " s; outputs in " + run_dir);
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
