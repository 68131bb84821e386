// Command-line front end: train, eval, rank, sweep-bins, gen.

#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>

#include "CLI11.hpp"
#include "histmap/data.hpp"
#include "histmap/eval.hpp"
#include "histmap/trainer.hpp"

namespace fs = std::filesystem;
using namespace histmap;

namespace {

SetFormat format_of(const std::string& path) {
  return path.size() >= 4 && path.substr(path.size() - 4) == ".csv"
             ? SetFormat::Csv
             : SetFormat::Binary;
}

void write_file(const fs::path& path, const std::string& content) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw IoError("cannot open " + path.string() + " for writing");
  os << content;
  if (!os) throw IoError("failed writing " + path.string());
}

// Flat key-value config file; unknown keys are rejected so typos surface.
void apply_config_file(TrainConfig& cfg, const std::string& path) {
  std::ifstream is(path);
  if (!is) throw IoError("cannot open config file " + path);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(is, line)) {
    ++line_no;
    if (line.empty() || line[0] == '#') continue;
    auto eq = line.find('=');
    if (eq == std::string::npos)
      throw ParseError(path, line_no, "expected 'key = value'");
    auto trim = [](std::string s) {
      auto b = s.find_first_not_of(" \t");
      auto e = s.find_last_not_of(" \t");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    std::string key = trim(line.substr(0, eq));
    std::string value = trim(line.substr(eq + 1));
    try {
      if (key == "p") cfg.p = std::stoul(value);
      else if (key == "k") cfg.k = std::stoul(value);
      else if (key == "epochs") cfg.epochs = std::stoul(value);
      else if (key == "steps_per_epoch") cfg.steps_per_epoch = std::stoul(value);
      else if (key == "learning_rate") cfg.learning_rate = std::stod(value);
      else if (key == "momentum") cfg.momentum = std::stod(value);
      else if (key == "weight_decay") cfg.weight_decay = std::stod(value);
      else if (key == "margin") cfg.margin = std::stod(value);
      else if (key == "m_bins") cfg.m_bins = std::stoul(value);
      else if (key == "bin_lo") cfg.bin_lo = std::stod(value);
      else if (key == "bin_hi") cfg.bin_hi = std::stod(value);
      else if (key == "tau") cfg.tau = std::stod(value);
      else if (key == "weight_id") cfg.loss_weights.id = std::stod(value);
      else if (key == "weight_triplet") cfg.loss_weights.triplet = std::stod(value);
      else if (key == "weight_map") cfg.loss_weights.map = std::stod(value);
      else if (key == "feature_dim") cfg.feature_dim = std::stoul(value);
      else if (key == "seed") cfg.seed = std::stoull(value);
      else if (key == "eval_every") cfg.eval_every = std::stoul(value);
      else if (key == "max_rank") cfg.max_rank = std::stoul(value);
      else if (key == "hidden_widths") {
        cfg.hidden_widths.clear();
        std::istringstream ws(value);
        std::size_t w;
        while (ws >> w) cfg.hidden_widths.push_back(w);
      } else {
        throw ParseError(path, line_no, "unknown config key '" + key + "'");
      }
    } catch (const std::logic_error&) {
      throw ParseError(path, line_no, "bad value for '" + key + "'");
    }
  }
}

struct SplitPaths {
  std::string train, query, gallery;
};

// Loads the train/query/gallery triple from files, or falls back to the
// default synthetic problem when no paths are given.
InstanceSplit load_splits(const SplitPaths& paths, std::uint64_t seed) {
  if (paths.train.empty() && paths.query.empty() && paths.gallery.empty())
    return default_synthetic_splits(seed);
  if (paths.train.empty() || paths.query.empty() || paths.gallery.empty())
    throw InvalidSpec("either give all of --train/--query/--gallery or none");
  InstanceSplit s;
  s.train = load_labeled_set(paths.train, format_of(paths.train), SetRole::Train);
  s.query = load_labeled_set(paths.query, format_of(paths.query), SetRole::Query);
  s.gallery =
      load_labeled_set(paths.gallery, format_of(paths.gallery), SetRole::Gallery);
  return s;
}

EmbeddingMatrix embed_with(const std::optional<Checkpoint>& ckpt,
                           const LabeledSet& set) {
  if (!ckpt) return l2_normalize(set.embeddings);
  auto [features, cache] = forward(ckpt->model, set.embeddings);
  (void)cache;
  return l2_normalize(features);
}

int cmd_train(const TrainConfig& cfg, const SplitPaths& paths,
              const fs::path& out_dir) {
  cfg.validate();
  fs::create_directories(out_dir);
  auto splits = load_splits(paths, cfg.seed);

  Trainer trainer(cfg, splits.train.embeddings.d, splits.train.num_identities());
  std::string log;
  std::string eval_log;
  auto on_eval = [&](std::size_t step) {
    auto res = trainer.evaluate_split(splits.query, splits.gallery);
    std::ostringstream os;
    os << "step " << step << "\n" << report_key_value(res);
    eval_log += os.str();
    std::cout << "[step " << step << "] map " << res.map << "\n";
  };
  trainer.run(splits.train, log, on_eval);

  Checkpoint ckpt;
  ckpt.model = trainer.model;
  ckpt.head = trainer.head;
  ckpt.has_head = true;
  ckpt.optimizer = trainer.optimizer;
  ckpt.config_echo = cfg.echo();
  ckpt.seed = cfg.seed;
  save_checkpoint(ckpt, (out_dir / "checkpoint.bin").string());
  write_file(out_dir / "train.log", log);
  write_file(out_dir / "config.txt", cfg.echo());

  auto final_res = trainer.evaluate_split(splits.query, splits.gallery);
  write_file(out_dir / "eval.txt",
             "# config\n" + cfg.echo() + "# result\n" + report_key_value(final_res));
  write_file(out_dir / "evals.txt", eval_log);
  std::cout << report_table(final_res);
  return 0;
}

int cmd_eval(const std::string& checkpoint_path, const SplitPaths& paths,
             bool camera_filter, std::size_t max_rank, const fs::path& out_dir) {
  if (paths.query.empty() || paths.gallery.empty())
    throw InvalidSpec("eval requires --query and --gallery");
  auto query =
      load_labeled_set(paths.query, format_of(paths.query), SetRole::Query, false);
  auto gallery = load_labeled_set(paths.gallery, format_of(paths.gallery),
                                  SetRole::Gallery, false);
  std::optional<Checkpoint> ckpt;
  std::string config_echo = "raw features\n";
  if (!checkpoint_path.empty()) {
    ckpt = load_checkpoint(checkpoint_path);
    config_echo = ckpt->config_echo;
  }
  auto q = embed_with(ckpt, query);
  auto g = embed_with(ckpt, gallery);
  auto sim = cosine_similarity(q, g, query.identity, gallery.identity);
  auto res = evaluate(sim, max_rank, camera_filter, query.camera, gallery.camera);

  std::cout << report_table(res);
  fs::create_directories(out_dir);
  write_file(out_dir / "eval_report.txt",
             "# config\n" + config_echo + "# result\n" + report_key_value(res));
  return 0;
}

int cmd_rank(const std::string& checkpoint_path, const SplitPaths& paths,
             std::size_t query_index, std::size_t top_k) {
  if (paths.query.empty() || paths.gallery.empty())
    throw InvalidSpec("rank requires --query and --gallery");
  auto query =
      load_labeled_set(paths.query, format_of(paths.query), SetRole::Query, false);
  auto gallery = load_labeled_set(paths.gallery, format_of(paths.gallery),
                                  SetRole::Gallery, false);
  std::optional<Checkpoint> ckpt;
  if (!checkpoint_path.empty()) ckpt = load_checkpoint(checkpoint_path);
  auto q = embed_with(ckpt, query);
  auto g = embed_with(ckpt, gallery);
  auto sim = cosine_similarity(q, g, query.identity, gallery.identity);
  auto list = ranking_list(sim, query_index, top_k);

  std::printf("rank\tgallery_id\tsimilarity\tmatch\n");
  for (std::size_t r = 0; r < list.size(); ++r)
    std::printf("%zu\t%u\t%.6f\t%c\n", r + 1,
                gallery.identity[list[r].gallery_index], list[r].similarity,
                list[r].is_match ? '+' : '-');
  return 0;
}

int cmd_sweep_bins(TrainConfig cfg, const SplitPaths& paths,
                   const std::vector<std::size_t>& bins, const fs::path& out_dir) {
  cfg.validate();
  if (bins.empty()) throw InvalidSpec("sweep-bins requires --bins");
  for (auto m : bins)
    if (m < 2) throw InvalidSpec("bin counts must be >= 2");
  fs::create_directories(out_dir);
  auto splits = load_splits(paths, cfg.seed);

  std::string table = "M\tR1\tmAP\n";
  std::printf("M\tR1\tmAP\n");
  for (auto m : bins) {
    TrainConfig run_cfg = cfg;
    run_cfg.m_bins = m;
    try {
      Trainer trainer(run_cfg, splits.train.embeddings.d,
                      splits.train.num_identities());
      std::string log;
      trainer.run(splits.train, log);
      auto res = trainer.evaluate_split(splits.query, splits.gallery);
      char buf[96];
      std::snprintf(buf, sizeof(buf), "%zu\t%.6f\t%.6f\n", m,
                    res.cmc.empty() ? 0.0 : res.cmc[0], res.map);
      table += buf;
      std::printf("%s", buf);
    } catch (const Error& e) {
      std::fprintf(stderr, "M=%zu failed: %s\n", m, e.what());
      table += std::to_string(m) + "\tfailed\tfailed\n";
    }
  }
  write_file(out_dir / "sweep.tsv", "# " + cfg.echo() + table);
  return 0;
}

int cmd_gen(const SyntheticSpec& spec, double train_fraction,
            const fs::path& out_dir) {
  spec.validate();
  if (train_fraction <= 0.0 || train_fraction >= 1.0)
    throw InvalidSpec("train fraction must be in (0, 1)");
  fs::create_directories(out_dir);
  auto all = generate_synthetic(spec);

  auto n_train_ids =
      static_cast<std::uint32_t>(spec.num_identities * train_fraction);
  if (n_train_ids == 0 || n_train_ids >= spec.num_identities)
    throw InvalidSpec("train fraction leaves an empty split");

  std::vector<std::size_t> train_rows, query_rows, gallery_rows;
  std::map<std::uint32_t, std::size_t> seen;
  std::size_t query_per_id = std::max<std::size_t>(1, spec.instances_per_identity / 4);
  for (std::size_t i = 0; i < all.size(); ++i) {
    if (all.identity[i] < n_train_ids) {
      train_rows.push_back(i);
    } else if (seen[all.identity[i]]++ < query_per_id) {
      query_rows.push_back(i);
    } else {
      gallery_rows.push_back(i);
    }
  }
  auto train = subset_rows(all, train_rows, SetRole::Train);
  auto query = subset_rows(all, query_rows, SetRole::Query);
  auto gallery = subset_rows(all, gallery_rows, SetRole::Gallery);

  for (const auto& [name, set] :
       {std::pair<std::string, const LabeledSet*>{"train", &train},
        {"test_query", &query},
        {"test_gallery", &gallery}}) {
    save_labeled_set_binary(*set, (out_dir / (name + ".bin")).string());
    save_labeled_set_csv(*set, (out_dir / (name + ".csv")).string());
  }

  SplitManifest manifest;
  manifest.subsets["train"] = {static_cast<long>(n_train_ids),
                               static_cast<long>(train.size())};
  manifest.subsets["test_query"] = {
      static_cast<long>(spec.num_identities - n_train_ids),
      static_cast<long>(query.size())};
  manifest.subsets["test_gallery"] = {
      static_cast<long>(spec.num_identities - n_train_ids),
      static_cast<long>(gallery.size())};
  std::ostringstream mtext;
  mtext << "# seed = " << spec.seed << "\n" << manifest_to_text(manifest);
  write_file(out_dir / "manifest.txt", mtext.str());

  // self-check the freshly written files against the manifest
  std::map<std::string, LabeledSet> sets;
  sets["train"] = load_labeled_set((out_dir / "train.bin").string(),
                                   SetFormat::Binary, SetRole::Train, false);
  sets["test_query"] = load_labeled_set((out_dir / "test_query.bin").string(),
                                        SetFormat::Binary, SetRole::Query, false);
  sets["test_gallery"] = load_labeled_set((out_dir / "test_gallery.bin").string(),
                                          SetFormat::Binary, SetRole::Gallery, false);
  validate_manifest(manifest, sets);
  std::cout << "wrote " << out_dir.string() << " (" << all.size() << " rows, "
            << spec.num_identities << " identities)\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"histogram-mAP retrieval toolkit"};
  app.require_subcommand(1);

  std::string config_path, out_dir = "out";
  TrainConfig cfg;
  SplitPaths paths;

  // precedence is flags > file > defaults: the file is applied into cfg
  // before CLI11 parses, so flags simply overwrite file values
  for (int i = 1; i + 1 < argc; ++i)
    if (std::string(argv[i]) == "--config") config_path = argv[i + 1];
  if (!config_path.empty()) {
    try {
      apply_config_file(cfg, config_path);
    } catch (const Error& e) {
      std::cerr << "error: " << e.what() << "\n";
      return 1;
    }
  }

  app.add_option("--config", config_path, "flat key-value config file");
  app.add_option("--out-dir", out_dir, "output directory");
  auto* seed_opt = app.add_option("--seed", cfg.seed, "global RNG seed");

  auto add_data_options = [&](CLI::App* sub) {
    sub->add_option("--train", paths.train, "training set (.csv or .bin)");
    sub->add_option("--query", paths.query, "query set (.csv or .bin)");
    sub->add_option("--gallery", paths.gallery, "gallery set (.csv or .bin)");
  };
  auto add_train_options = [&](CLI::App* sub) {
    sub->add_option("--p", cfg.p, "identities per batch");
    sub->add_option("--k", cfg.k, "instances per identity");
    sub->add_option("--epochs", cfg.epochs, "epochs");
    sub->add_option("--steps-per-epoch", cfg.steps_per_epoch, "steps per epoch");
    sub->add_option("--lr", cfg.learning_rate, "learning rate");
    sub->add_option("--momentum", cfg.momentum, "SGD momentum");
    sub->add_option("--weight-decay", cfg.weight_decay, "weight decay");
    sub->add_option("--margin", cfg.margin, "triplet margin");
    sub->add_option("--m-bins", cfg.m_bins, "histogram bin count");
    sub->add_option("--bin-lo", cfg.bin_lo, "bin range low end");
    sub->add_option("--bin-hi", cfg.bin_hi, "bin range high end");
    sub->add_option("--tau", cfg.tau, "precision denominator floor");
    sub->add_option("--weight-id", cfg.loss_weights.id, "identity loss weight");
    sub->add_option("--weight-triplet", cfg.loss_weights.triplet,
                    "triplet loss weight");
    sub->add_option("--weight-map", cfg.loss_weights.map, "mAP loss weight");
    sub->add_option("--feature-dim", cfg.feature_dim, "embedding dimension");
    sub->add_option("--eval-every", cfg.eval_every, "evaluation period in steps");
  };

  auto* train = app.add_subcommand("train", "train a model");
  add_data_options(train);
  add_train_options(train);

  std::string checkpoint_path;
  bool camera_filter = false;
  std::size_t max_rank = 20;
  auto* eval = app.add_subcommand("eval", "evaluate mAP and CMC");
  eval->add_option("--checkpoint", checkpoint_path, "model checkpoint");
  eval->add_option("--query", paths.query, "query set");
  eval->add_option("--gallery", paths.gallery, "gallery set");
  eval->add_flag("--camera-filter", camera_filter,
                 "exclude same-identity-same-camera entries");
  eval->add_option("--max-rank", max_rank, "CMC rank cutoff");

  std::size_t query_index = 0, top_k = 10;
  auto* rank = app.add_subcommand("rank", "inspect one query's ranking");
  rank->add_option("--checkpoint", checkpoint_path, "model checkpoint");
  rank->add_option("--query", paths.query, "query set");
  rank->add_option("--gallery", paths.gallery, "gallery set");
  rank->add_option("--query-index", query_index, "query row to inspect");
  rank->add_option("--top-k", top_k, "ranking depth");

  std::vector<std::size_t> bins;
  auto* sweep = app.add_subcommand("sweep-bins", "train across bin counts");
  add_data_options(sweep);
  add_train_options(sweep);
  sweep->add_option("--bins", bins, "bin counts to sweep")->required();

  SyntheticSpec spec = default_synthetic_spec(42);
  double train_fraction = 0.5;
  auto* gen = app.add_subcommand("gen", "generate a synthetic dataset");
  gen->add_option("--identities", spec.num_identities, "identity count");
  gen->add_option("--instances", spec.instances_per_identity,
                  "instances per identity");
  gen->add_option("--dim", spec.dim, "input dimension");
  gen->add_option("--intra-sigma", spec.intra_sigma, "within-cluster noise");
  gen->add_option("--inter-scale", spec.inter_scale, "identity center scale");
  gen->add_option("--clothing-clusters", spec.clothing_clusters_per_identity,
                  "clothing clusters per identity");
  gen->add_option("--clothing-shift", spec.clothing_shift_sigma,
                  "clothing sub-center shift");
  gen->add_option("--train-fraction", train_fraction,
                  "fraction of identities used for training");

  // let --config/--seed/--out-dir appear after the subcommand name too
  for (auto* sub : app.get_subcommands(nullptr)) sub->fallthrough();

  CLI11_PARSE(app, argc, argv);

  try {
    if (seed_opt->count() > 0) spec.seed = cfg.seed;

    if (train->parsed()) return cmd_train(cfg, paths, out_dir);
    if (eval->parsed())
      return cmd_eval(checkpoint_path, paths, camera_filter, max_rank, out_dir);
    if (rank->parsed()) return cmd_rank(checkpoint_path, paths, query_index, top_k);
    if (sweep->parsed()) return cmd_sweep_bins(cfg, paths, bins, out_dir);
    if (gen->parsed()) return cmd_gen(spec, train_fraction, out_dir);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
