// Command-line front end: generate datasets, pretrain checkpoint pools,
// distill synthetic sets, evaluate them, and export features. Outputs land
// under the given --out location; any failure exits nonzero with a one-line
// JSON error record on stderr.

#include <algorithm>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <numeric>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "tinydd/tinydd.hpp"

namespace {

using namespace tinydd;
namespace fs = std::filesystem;

// --data may name either a dataset file or a gen-data output directory; a
// directory resolves to the named split inside it.
std::string resolve_dataset(const std::string& path, const char* split) {
  if (fs::is_directory(path)) return (fs::path(path) / split).string();
  return path;
}

// Paths inside a distill config are taken relative to the config file so a
// run directory can be replayed from anywhere.
std::string resolve_near(const fs::path& cfg_dir, const std::string& p) {
  const fs::path q(p);
  if (q.is_absolute() || fs::exists(q)) return q.string();
  return (cfg_dir / q).string();
}

void run_gen_data(const std::string& recipe, const std::string& out,
                  std::uint64_t seed, int per_class, int image_size,
                  int classes, double separation) {
  fs::create_directories(out);
  const std::uint64_t test_seed = derive_seed(seed, fnv1a("held-out"));
  const int test_per_class = (per_class + 1) / 2;
  LabeledDataset train, test;
  if (recipe == "blobs-a") {
    BlobConfig cfg;
    cfg.classes = classes > 0 ? classes : 3;
    cfg.per_class = per_class;
    cfg.image_size = image_size;
    cfg.separation = separation;
    cfg.seed = seed;
    train = generate_blobs(cfg);
    cfg.seed = test_seed;
    cfg.per_class = test_per_class;
    test = generate_blobs(cfg);
  } else {
    StripeConfig cfg;
    cfg.classes = classes > 0 ? classes : 4;
    cfg.per_class = per_class;
    cfg.image_size = image_size;
    cfg.seed = seed;
    train = generate_stripes(cfg);
    cfg.seed = test_seed;
    cfg.per_class = test_per_class;
    test = generate_stripes(cfg);
  }
  save_labeled((fs::path(out) / "train.bin").string(), train);
  save_labeled((fs::path(out) / "test.bin").string(), test);

  nlohmann::ordered_json manifest;
  manifest["kind"] = "dataset";
  manifest["recipe"] = recipe;
  manifest["seed"] = seed;
  manifest["classes"] = train.classes;
  manifest["image_shape"] = train.image_shape;
  manifest["train_images"] = train.size();
  manifest["test_images"] = test.size();
  std::ofstream mout(fs::path(out) / "data.json");
  if (!mout) throw std::runtime_error("cannot write manifest in " + out);
  mout << manifest.dump(2) << "\n";
  std::cout << "wrote " << train.size() << " train / " << test.size()
            << " test images (" << train.domain_id << ") -> " << out << "\n";
}

void run_pretrain(const std::vector<std::string>& archs,
                  const std::string& data, int n_seeds,
                  std::vector<int> snapshots, const std::string& out,
                  int epochs) {
  const LabeledDataset train = load_labeled(resolve_dataset(data, "train.bin"));
  std::sort(snapshots.begin(), snapshots.end());
  snapshots.erase(std::unique(snapshots.begin(), snapshots.end()),
                  snapshots.end());
  PretrainConfig cfg;
  cfg.snapshot_epochs = snapshots;
  cfg.epochs = epochs > 0 ? epochs : snapshots.back();

  // An existing pool in the output directory is extended, so one pool can be
  // grown across several invocations (more seeds, more architectures).
  std::vector<ModelCheckpoint> ckpts;
  if (fs::exists(fs::path(out) / "pool.json"))
    ckpts = load_pool(out).checkpoints;

  for (const std::string& id : archs) {
    const ArchitectureSpec spec =
        parse_arch(id, train.image_shape, train.classes);
    for (int s = 1; s <= n_seeds; ++s) {
      auto snaps =
          pretrain(spec, static_cast<std::uint64_t>(s), train, cfg);
      std::cout << "pretrained " << spec.id() << " seed " << s << ": "
                << snaps.size() << " snapshots\n";
      for (auto& c : snaps) ckpts.push_back(std::move(c));
    }
  }
  const PretrainedPool pool = PretrainedPool::from_checkpoints(
      std::move(ckpts), train.domain_id, train.classes);
  save_pool(out, pool);
  std::cout << "pool: " << pool.checkpoints.size() << " checkpoints ("
            << pool.n_seeds() << " seeds x " << pool.n_archs() << " archs x "
            << pool.n_epochs() << " epochs) -> " << out << "\n";
}

void run_distill(const std::string& config, const std::string& out) {
  std::ifstream in(config);
  if (!in) throw std::runtime_error("cannot open " + config);
  const nlohmann::json j = nlohmann::json::parse(in);
  const nlohmann::json& body = j.contains("job") ? j.at("job") : j;
  DistillJob job = job_from_json(body);

  const fs::path cfg_dir = fs::path(config).parent_path();
  check(j.contains("data"),
        "distill config needs a \"data\" entry naming the target dataset");
  const std::string data_path = resolve_near(cfg_dir, j.at("data"));
  const LabeledDataset target =
      load_labeled(resolve_dataset(data_path, "train.bin"));

  PretrainedPool pool;
  std::string pool_path;
  const bool supervised = job.supervision.kind != SupervisionConfig::Kind::none;
  if (supervised) {
    check(j.contains("pool"),
          "supervised distillation needs a \"pool\" entry in the config");
    pool_path = resolve_near(cfg_dir, j.at("pool"));
    pool = load_pool(pool_path);
  }

  const int budget = job.budget();
  const int stride = std::max(1, budget / 10);
  job.sink = [&](const IterationRecord& r) {
    if (r.iteration % stride == 0 || r.iteration == budget - 1)
      std::cout << "iter " << r.iteration << " base " << r.base_loss
                << " supervision " << r.supervision_loss << " total "
                << r.total_loss << "\n";
  };

  const RunResult result =
      run_distillation(job, target, supervised ? &pool : nullptr);
  job.sink = nullptr;
  write_run_outputs(out, job, result);

  // Record where the inputs came from so the manifest alone can replay.
  const fs::path mpath = fs::path(out) / "manifest.json";
  std::ifstream min(mpath);
  nlohmann::ordered_json manifest = nlohmann::ordered_json::parse(min);
  min.close();
  manifest["data"] = fs::absolute(data_path).string();
  if (!pool_path.empty())
    manifest["pool"] = fs::absolute(pool_path).string();
  std::ofstream mout(mpath);
  mout << manifest.dump(2) << "\n";

  for (const std::string& note : result.log.notes)
    std::cout << "note: " << note << "\n";
  std::cout << "distilled " << result.synthetic.size() << " images in "
            << result.log.rows.size() << " iterations -> " << out << "\n";
}

std::map<std::string, double> read_baseline(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open " + path);
  const nlohmann::json j = nlohmann::json::parse(in);
  std::map<std::string, double> means;
  if (j.contains("per_arch")) {
    for (const auto& [id, rep] : j.at("per_arch").items())
      means[id] = rep.at("mean");
  } else if (j.contains("arch") && j.contains("mean")) {
    means[j.at("arch").get<std::string>()] = j.at("mean");
  } else {
    means = j.get<std::map<std::string, double>>();
  }
  return means;
}

void run_eval(const std::string& synthetic, const std::string& data,
              const std::vector<std::string>& arch_ids, int repeats,
              const std::string& baseline, const std::string& out,
              std::uint64_t seed, int epochs) {
  const SyntheticDataset syn = load_synthetic(synthetic);
  const LabeledDataset test = load_labeled(resolve_dataset(data, "test.bin"));
  std::vector<ArchitectureSpec> archs;
  for (const std::string& id : arch_ids)
    archs.push_back(parse_arch(id, syn.image_shape, syn.classes));

  EvalConfig cfg;
  if (epochs > 0) {
    cfg.epochs = epochs;
    cfg.decay_at = std::max(1, epochs / 2);
  }
  fs::create_directories(out);
  nlohmann::ordered_json report;

  if (!baseline.empty()) {
    const CrossArchReport cross = cross_arch_eval(
        syn, test, archs, read_baseline(baseline), repeats, seed, cfg);
    for (const auto& [id, rep] : cross.per_arch)
      std::cout << id << ": mean " << rep.mean << " std " << rep.stddev
                << " gain " << cross.gain.at(id)
                << (rep.valid ? "" : " [invalid]") << "\n";
    std::cout << "avg gain " << cross.avg_gain << "\n";
    report = cross_report_to_json(cross);
  } else {
    report["per_arch"] = nlohmann::ordered_json::object();
    for (const ArchitectureSpec& arch : archs) {
      const EvalReport rep = evaluate(syn, test, arch, repeats, seed, cfg);
      std::cout << arch.id() << ": mean " << rep.mean << " std " << rep.stddev
                << " (" << rep.accuracies.size() << " repeats"
                << (rep.valid ? ")" : ", invalid)") << "\n";
      report["per_arch"][arch.id()] = report_to_json(rep);
    }
  }
  const fs::path rpath = fs::path(out) / "report.json";
  std::ofstream rout(rpath);
  if (!rout) throw std::runtime_error("cannot write " + rpath.string());
  rout << report.dump(2) << "\n";
  std::cout << "report -> " << rpath.string() << "\n";
}

void run_export(const std::string& model, const std::string& data,
                const std::string& out) {
  const ModelCheckpoint ckpt = load_checkpoint(model);
  Tensor images;
  std::vector<int> labels;
  try {
    const LabeledDataset ds = load_labeled(data);
    std::vector<int> idx(ds.size());
    std::iota(idx.begin(), idx.end(), 0);
    images = ds.batch(idx);
    labels = ds.labels;
  } catch (const std::exception&) {
    const SyntheticDataset syn = load_synthetic(data);
    images = syn.as_tensor();
    labels = syn.labels;
  }
  const fs::path parent = fs::path(out).parent_path();
  if (!parent.empty()) fs::create_directories(parent);
  export_features(ckpt, images, labels, out);
  std::cout << "wrote " << labels.size() << " feature rows -> " << out << "\n";
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"desk-scale dataset distillation workbench"};
  app.require_subcommand(1);
  std::string active = "cli";

  std::string gd_recipe, gd_out;
  std::uint64_t gd_seed = 1;
  int gd_per_class = 200, gd_image_size = 16, gd_classes = 0;
  double gd_separation = 2.0;
  CLI::App* gen = app.add_subcommand("gen-data", "generate a dataset");
  gen->add_option("--recipe", gd_recipe, "dataset recipe")
      ->required()
      ->check(CLI::IsMember({"blobs-a", "stripes-b"}));
  gen->add_option("--out", gd_out, "output directory")->required();
  gen->add_option("--seed", gd_seed, "generation seed");
  gen->add_option("--per-class", gd_per_class, "training images per class");
  gen->add_option("--image-size", gd_image_size, "square image side");
  gen->add_option("--classes", gd_classes, "class count (0: recipe default)");
  gen->add_option("--separation", gd_separation,
                  "difficulty knob, blobs only");
  gen->callback([&] {
    active = "gen-data";
    run_gen_data(gd_recipe, gd_out, gd_seed, gd_per_class, gd_image_size,
                 gd_classes, gd_separation);
  });

  std::vector<std::string> pt_archs;
  std::string pt_data, pt_out;
  int pt_seeds = 1, pt_epochs = 0;
  std::vector<int> pt_snapshots{30};
  CLI::App* pt = app.add_subcommand("pretrain",
                                    "train checkpoints into a pool");
  pt->add_option("--arch", pt_archs, "architecture id, repeatable")
      ->required();
  pt->add_option("--data", pt_data, "dataset directory or file")->required();
  pt->add_option("--seeds", pt_seeds, "number of seeds, trained as 1..N");
  pt->add_option("--snapshots", pt_snapshots, "epochs to keep")
      ->delimiter(',');
  pt->add_option("--epochs", pt_epochs,
                 "training length (0: last snapshot epoch)");
  pt->add_option("--out", pt_out, "pool directory")->required();
  pt->callback([&] {
    active = "pretrain";
    run_pretrain(pt_archs, pt_data, pt_seeds, pt_snapshots, pt_out, pt_epochs);
  });

  std::string di_config, di_out;
  CLI::App* di = app.add_subcommand("distill", "run a distillation job");
  di->add_option("--config", di_config, "job config or run manifest")
      ->required();
  di->add_option("--out", di_out, "run output directory")->required();
  di->callback([&] {
    active = "distill";
    run_distill(di_config, di_out);
  });

  std::string ev_synthetic, ev_data, ev_baseline, ev_out = "eval-out";
  std::vector<std::string> ev_archs;
  int ev_repeats = 5, ev_epochs = 0;
  std::uint64_t ev_seed = 1;
  CLI::App* ev = app.add_subcommand("eval", "train on synthetic, score on real");
  ev->add_option("--synthetic", ev_synthetic, "distilled set file")
      ->required();
  ev->add_option("--data", ev_data, "held-out dataset directory or file")
      ->required();
  ev->add_option("--arch", ev_archs, "architecture id, repeatable")
      ->required();
  ev->add_option("--repeats", ev_repeats, "fresh models per architecture");
  ev->add_option("--baseline", ev_baseline, "report to compute gains against");
  ev->add_option("--out", ev_out, "report directory");
  ev->add_option("--seed", ev_seed, "evaluation seed");
  ev->add_option("--epochs", ev_epochs, "training length (0: default)");
  ev->callback([&] {
    active = "eval";
    run_eval(ev_synthetic, ev_data, ev_archs, ev_repeats, ev_baseline, ev_out,
             ev_seed, ev_epochs);
  });

  std::string ex_model, ex_data, ex_out;
  CLI::App* ex = app.add_subcommand("export-features",
                                    "dump model features as CSV");
  ex->add_option("--model", ex_model, "checkpoint file")->required();
  ex->add_option("--data", ex_data, "dataset or synthetic file")->required();
  ex->add_option("--out", ex_out, "CSV path")->required();
  ex->callback([&] {
    active = "export-features";
    run_export(ex_model, ex_data, ex_out);
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) return app.exit(e);  // help and friends
    nlohmann::ordered_json err;
    err["error"] = {{"command", active}, {"message", e.what()}};
    std::cerr << err.dump() << std::endl;
    return e.get_exit_code();
  } catch (const std::exception& e) {
    nlohmann::ordered_json err;
    err["error"] = {{"command", active}, {"message", e.what()}};
    std::cerr << err.dump() << std::endl;
    return 1;
  }
  return 0;
}
