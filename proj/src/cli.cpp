#include "fusedrec/cli.hpp"

#include <fstream>
#include <iostream>
#include <memory>

#include "CLI11.hpp"

#include "fusedrec/config.hpp"
#include "fusedrec/embedtable.hpp"
#include "fusedrec/eval.hpp"
#include "fusedrec/trainer.hpp"

namespace fusedrec {
namespace {

std::pair<std::size_t, std::size_t> parse_range(const std::string& text) {
  const auto colon = text.find(':');
  if (colon == std::string::npos) throw UsageError("--seq-len expects MIN:MAX, got '" + text + "'");
  try {
    std::size_t used_a = 0;
    std::size_t used_b = 0;
    const std::string a = text.substr(0, colon);
    const std::string b = text.substr(colon + 1);
    const auto lo = std::stoull(a, &used_a);
    const auto hi = std::stoull(b, &used_b);
    if (used_a != a.size() || used_b != b.size()) throw std::invalid_argument(text);
    return {lo, hi};
  } catch (const std::logic_error&) {
    throw UsageError("--seq-len expects MIN:MAX, got '" + text + "'");
  }
}

std::vector<std::string> read_id_list(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open id list " + path.string());
  std::vector<std::string> ids;
  std::string line;
  while (std::getline(in, line)) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    // vocab_items.tsv is accepted too; only the first column is the id.
    const auto tab = line.find('\t');
    if (tab != std::string::npos) line.resize(tab);
    if (!line.empty()) ids.push_back(line);
  }
  return ids;
}

void write_text(const std::filesystem::path& path, const std::string& text) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot write " + path.string());
  out << text;
  if (!out) throw Error("write failed for " + path.string());
}

}  // namespace

PreparedDataset prepare_dataset(const std::filesystem::path& interactions, std::size_t k,
                                const std::filesystem::path& out) {
  const InteractionLog raw = ingest_interactions(interactions);
  const InteractionLog core = kcore_filter(raw, k);
  PreparedDataset data;
  data.vocab = build_vocab(core);
  data.split = chronological_split(core, data.vocab);
  write_prepared(data, out);
  std::cerr << "prepare: " << raw.size() << " events -> " << core.size() << " after " << k << "-core; "
            << data.vocab.users.size() << " users, " << data.vocab.items.size() << " items\n";
  return data;
}

PreparedDataset synth_dataset(const SynthConfig& cfg, const std::filesystem::path& out,
                              std::optional<std::uint32_t> table_dim, double table_noise) {
  const SynthResult synth = synth_markov(cfg);
  PreparedDataset data;
  data.vocab = build_vocab(synth.log);
  data.split = chronological_split(synth.log, data.vocab);
  write_prepared(data, out);
  write_interactions(synth.log, out / "interactions.tsv");

  std::vector<std::uint32_t> cluster_by_index(data.vocab.items.size());
  for (std::size_t i = 0; i < cluster_by_index.size(); ++i) {
    const std::string& id = data.vocab.items.id(static_cast<std::uint32_t>(i));
    cluster_by_index[i] = synth.cluster_of.at(std::stoull(id.substr(1)));
  }
  write_clusters(cluster_by_index, out);
  if (table_dim) {
    const auto table = cluster_table(data.vocab.items.ids(), cluster_by_index, *table_dim, table_noise,
                                     derive_seed(cfg.seed, "cluster_table"));
    write_table(table, out / "text_emb");
  }
  return data;
}

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"fusedrec: sequential recommendation with fused text and ID item embeddings"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Show help for every subcommand");

  // prepare
  std::string interactions_path;
  std::size_t core_k = 5;
  std::string out_path;
  auto* prepare = app.add_subcommand("prepare", "Ingest interactions, k-core filter, split leave-one-out");
  prepare->add_option("--interactions", interactions_path, "user<TAB>item<TAB>timestamp file")->required();
  prepare->add_option("--k", core_k, "Minimum degree of the user/item core")->required();
  prepare->add_option("--out", out_path, "Output dataset directory")->required();

  // synth
  SynthConfig synth_cfg;
  std::string seq_len = "10:30";
  std::optional<std::uint32_t> emit_dim;
  auto* synth = app.add_subcommand("synth", "Generate a cluster-Markov synthetic dataset");
  synth->add_option("--users", synth_cfg.n_users)->required();
  synth->add_option("--items", synth_cfg.n_items)->required();
  synth->add_option("--clusters", synth_cfg.n_clusters)->required();
  synth->add_option("--seq-len", seq_len, "MIN:MAX sequence length")->required();
  synth->add_option("--intra-p", synth_cfg.intra_cluster_prob, "Probability of staying in the cluster")->required();
  synth->add_option("--seed", synth_cfg.seed)->required();
  synth->add_option("--out", out_path, "Output dataset directory")->required();
  synth->add_option("--emit-cluster-table", emit_dim, "Also write <out>/text_emb with this dim");

  // table
  auto* table = app.add_subcommand("table", "Embedding-table utilities");
  table->require_subcommand(1);
  std::string ids_path;
  std::uint32_t table_dim = 0;
  std::uint64_t table_seed = 0;
  bool normalized = false;
  auto* table_random = table->add_subcommand("random", "Write a table of i.i.d. normal rows");
  table_random->add_option("--ids", ids_path, "One id per line (vocab_items.tsv also accepted)")->required();
  table_random->add_option("--dim", table_dim)->required();
  table_random->add_option("--seed", table_seed)->required();
  table_random->add_flag("--normalized", normalized, "Unit-normalize rows");
  table_random->add_option("--out", out_path, "Output stem; writes <stem>.bin and <stem>.ids.tsv")->required();
  std::string validate_path;
  auto* table_validate = table->add_subcommand("validate", "Check a table pair");
  table_validate->add_option("path", validate_path, "Table stem or .bin path")->required();

  // train
  std::string data_dir;
  std::optional<std::string> embeddings;
  std::string fusion_text;
  std::optional<std::string> config_path;
  std::optional<std::uint64_t> train_seed;
  bool deterministic = false;
  std::optional<std::string> resume;
  std::optional<std::size_t> train_workers;
  auto* train = app.add_subcommand("train", "Train a model");
  train->add_option("--data", data_dir, "Prepared dataset directory")->required();
  train->add_option("--embeddings", embeddings, "Text embedding table stem");
  train->add_option("--fusion", fusion_text, "none|add|gate")
      ->required()
      ->check(CLI::IsMember({"none", "add", "gate"}));
  train->add_option("--config", config_path, "key = value config file");
  train->add_option("--seed", train_seed);
  train->add_flag("--deterministic", deterministic, "64-bit checkpoints for bit-exact resume");
  train->add_option("--resume", resume, "Continue from a checkpoint with trainer state");
  train->add_option("--workers", train_workers, "Threads for batch gradients and eval");
  train->add_option("--out", out_path, "Output run directory")->required();

  // eval
  std::string ckpt_path;
  std::string ks_text = "10,50,200";
  bool filter_seen = false;
  std::size_t eval_workers = 1;
  std::string report_path;
  auto* eval = app.add_subcommand("eval", "Full-catalog leave-one-out evaluation");
  eval->add_option("--ckpt", ckpt_path)->required();
  eval->add_option("--data", data_dir, "Prepared dataset directory")->required();
  eval->add_option("--k", ks_text, "Comma-separated cutoffs");
  eval->add_flag("--filter-seen", filter_seen, "Exclude history items from candidates");
  eval->add_option("--workers", eval_workers)->check(CLI::PositiveNumber);
  eval->add_option("--report", report_path, "Output JSON report")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e, std::cerr, std::cerr);
    return 1;
  }

  try {
    if (prepare->parsed()) {
      prepare_dataset(interactions_path, core_k, out_path);
    } else if (synth->parsed()) {
      synth_cfg.seq_len_range = parse_range(seq_len);
      const auto data = synth_dataset(synth_cfg, out_path, emit_dim);
      std::cerr << "synth: " << data.vocab.users.size() << " users, " << data.vocab.items.size() << " items\n";
    } else if (table_random->parsed()) {
      if (table_dim == 0) throw UsageError("--dim must be positive");
      const auto t = random_table(read_id_list(ids_path), table_dim, table_seed, normalized);
      write_table(t, out_path);
      std::cerr << "table: wrote " << t.count() << " x " << t.dim << '\n';
    } else if (table_validate->parsed()) {
      std::filesystem::path stem = validate_path;
      if (stem.extension() == ".bin") stem.replace_extension();
      const auto t = load_table(stem);
      std::cerr << "table ok: " << t.count() << " x " << t.dim << (t.normalized ? ", normalized" : "") << '\n';
    } else if (train->parsed()) {
      TrainConfig cfg = config_path ? load_train_config(*config_path) : TrainConfig{};
      cfg.fusion = parse_fusion_mode(fusion_text);
      if (train_seed) cfg.seed = *train_seed;
      if (deterministic) cfg.deterministic = true;
      if (train_workers) cfg.workers = *train_workers;
      if (cfg.fusion != FusionMode::none && !embeddings && !resume) {
        throw UsageError("--fusion " + fusion_text + " requires --embeddings");
      }
      const PreparedDataset data = load_prepared(data_dir);
      std::shared_ptr<const Matrix> text;
      if (embeddings && cfg.fusion != FusionMode::none) {
        text = std::make_shared<const Matrix>(align(load_table(*embeddings), data.vocab));
      }
      FitOptions options;
      if (resume) options.resume_from = *resume;
      const FitResult result = fit(data.split, text, cfg, out_path, options);
      std::cerr << "train: best " << result.best_checkpoint.string() << ", last " << result.last_checkpoint.string()
                << '\n';
    } else if (eval->parsed()) {
      EvalOptions options;
      options.ks = parse_ks(ks_text);
      options.filter_seen = filter_seen;
      options.workers = eval_workers;
      const PreparedDataset data = load_prepared(data_dir);
      const EvalReport report = evaluate(std::filesystem::path(ckpt_path), data.split, options);
      write_text(report_path, report.to_json() + "\n");
      std::cerr << "eval: " << report.to_json() << '\n';
    }
  } catch (const UsageError& e) {
    std::cerr << "usage error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 0;
}

int run_cli(const std::vector<std::string>& args) {
  std::vector<const char*> argv;
  argv.reserve(args.size() + 1);
  argv.push_back("fusedrec");
  for (const auto& a : args) argv.push_back(a.c_str());
  return run_cli(static_cast<int>(argv.size()), argv.data());
}

}  // namespace fusedrec
