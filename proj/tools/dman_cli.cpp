// dman: generate synthetic logs, train, evaluate, benchmark and ablate.
// Exit codes: 0 success, 1 validation error, 2 runtime failure.

#include <CLI11.hpp>

#include <cstdio>
#include <fstream>
#include <iostream>

#include "dman/dman.hpp"

namespace {

using namespace dman;

struct Dataset {
  std::vector<SegmentedHistory> users;
  std::vector<TrainSequence> train;
  ItemId vocab = 0;
};

Dataset load_dataset(const std::string& path, Index window) {
  if (path.empty()) throw ValidationError("no data path given");
  const BehaviorLog log = ingest(path);
  if (log.records.empty()) throw ValidationError(path + ": no users with enough interactions");
  Dataset d;
  d.users = segment(log, window, true);
  for (const auto& r : log.records) d.vocab = std::max(d.vocab, r.item);
  for (const auto& h : d.users) d.train.push_back(TrainSequence::from(h));
  return d;
}

std::string fmt(double v, int digits = 4) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

void print_metrics(std::ostream& out, const std::string& label, const RankingMetrics& m) {
  for (std::size_t i = 0; i < m.ks.size(); ++i) {
    out << label << "HR@" << m.ks[i] << "=" << fmt(m.hit_rate[i]) << " NDCG@" << m.ks[i] << "="
        << fmt(m.ndcg[i]) << " Recall@" << m.ks[i] << "=" << fmt(m.recall[i]) << "\n";
  }
  out << label << "users=" << m.users << "\n";
}

void write_metrics_kv(const std::string& path, const RankingMetrics& m) {
  std::ofstream out(path);
  if (!out) throw RuntimeFailure("cannot write report " + path);
  out << "users=" << m.users << "\n";
  for (std::size_t i = 0; i < m.ks.size(); ++i) {
    out << "hr@" << m.ks[i] << "=" << m.hit_rate[i] << "\n";
    out << "ndcg@" << m.ks[i] << "=" << m.ndcg[i] << "\n";
    out << "recall@" << m.ks[i] << "=" << m.recall[i] << "\n";
  }
}

Trainer train_model(const ModelConfig& cfg, const Dataset& d, std::ostream* loss_log) {
  Trainer tr = Trainer::create(cfg);
  for (int e = 0; e < cfg.epochs; ++e) {
    const auto records = tr.train_epoch(d.train, e);
    double main = 0.0;
    double aux = 0.0;
    for (const auto& r : records) {
      main += r.main;
      aux += r.aux;
      if (loss_log != nullptr) {
        *loss_log << r.epoch << "\t" << r.segment << "\t" << r.main << "\t" << r.aux << "\n";
      }
    }
    std::cout << "epoch " << e << " " << to_string(cfg.variant) << " main=" << fmt(main)
              << " aux=" << fmt(aux) << std::endl;
  }
  return tr;
}

int cmd_gen_data(Index users, Index segments, Index window, ItemId vocab, double ps,
                 std::uint64_t seed, const std::string& out) {
  const BehaviorLog log = generate_synthetic(users, segments, window, vocab, ps, seed);
  write_log(log, out);
  std::cout << "wrote " << log.records.size() << " interactions for " << users << " users to "
            << out << "\n";
  return 0;
}

int cmd_train(const std::string& config_path, std::string out) {
  RunConfig rc = load_run_config(config_path);
  if (out.empty()) out = rc.out_path;
  if (out.empty()) throw ValidationError("no output path (set out_path or pass --out)");
  const Dataset d = load_dataset(rc.data_path, rc.model.window);
  rc.model.vocab_size = d.vocab;
  std::ofstream log(out + ".loss");
  if (!log) throw RuntimeFailure("cannot write loss log " + out + ".loss");
  log << "# epoch\tsegment\tmain\taux\n";
  const Trainer tr = train_model(rc.model, d, &log);
  save_checkpoint(Checkpoint::of(tr), out);
  std::cout << "checkpoint " << out << "\nloss log " << out << ".loss\n";
  return 0;
}

int cmd_eval(const std::string& ckpt_path, const std::string& data, const std::vector<Index>& ks,
             Index sampled, const std::string& report) {
  const Checkpoint c = load_checkpoint(ckpt_path);
  const Dataset d = load_dataset(data, c.config.window);
  if (d.vocab > c.config.vocab_size) {
    throw ValidationError("data has item " + std::to_string(d.vocab) + " beyond the model's " +
                          std::to_string(c.config.vocab_size) + " items");
  }
  const auto mode = sampled > 0 ? CandidateMode::sampled : CandidateMode::all_items;
  const RankingMetrics m =
      rank_eval(model_embedder(c.params, c.config), c.params.embedding, d.users, ks,
                c.config.window, mode, c.config.seed, sampled);
  print_metrics(std::cout, "", m);
  if (!report.empty()) write_metrics_kv(report, m);
  return 0;
}

int cmd_bench(const std::string& ckpt_path, const std::vector<Index>& ns,
              const std::vector<std::string>& variant_names, Index users, int reps) {
  const Checkpoint c = load_checkpoint(ckpt_path);
  std::vector<Variant> variants;
  for (const auto& v : variant_names) variants.push_back(parse_variant(v));
  const auto reports =
      efficiency_bench(c.params, c.config, variants, ns, {users, reps, c.config.seed});
  std::cout << "variant\tN\tseconds_per_1024\tscores_per_user\tscores_computed\n";
  for (const auto& r : reports) {
    std::cout << to_string(r.variant) << "\t" << r.segments << "\t" << fmt(r.seconds_per_1024, 6)
              << "\t" << r.scores_per_user << "\t" << r.scores_computed << "\n";
  }
  return 0;
}

int cmd_ablate(const std::string& config_path, const std::vector<std::string>& variant_names,
               const std::vector<Index>& ks) {
  RunConfig rc = load_run_config(config_path);
  const Dataset d = load_dataset(rc.data_path, rc.model.window);
  rc.model.vocab_size = d.vocab;
  std::vector<Variant> variants{Variant::dman};
  for (const auto& v : variant_names) {
    const Variant parsed = parse_variant(v);
    if (parsed == Variant::full_scan) throw ValidationError("full_scan cannot be trained");
    if (parsed != Variant::dman) variants.push_back(parsed);
  }
  std::vector<RankingMetrics> results;
  for (Variant v : variants) {
    ModelConfig cfg = rc.model;
    cfg.variant = v;
    const Trainer tr = train_model(cfg, d, nullptr);
    results.push_back(rank_eval(tr.params(), cfg, d.users, ks));
  }
  std::cout << "variant\tseed";
  for (Index k : ks) std::cout << "\tHR@" << k << "\tNDCG@" << k;
  std::cout << "\n";
  for (std::size_t i = 0; i < variants.size(); ++i) {
    std::cout << to_string(variants[i]) << "\t" << rc.model.seed;
    for (std::size_t j = 0; j < ks.size(); ++j) {
      std::cout << "\t" << fmt(results[i].hit_rate[j]) << "\t" << fmt(results[i].ndcg[j]);
    }
    std::cout << "\n";
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dynamic memory sequential recommender"};
  app.require_subcommand(1);

  auto* gen = app.add_subcommand("gen-data", "Write a synthetic long-range behavior log");
  Index users = 2000, segments = 6, window = 20;
  ItemId vocab = 5000;
  double ps = 0.9;
  std::uint64_t seed = 0;
  std::string out;
  gen->add_option("--users", users)->capture_default_str();
  gen->add_option("--segments", segments)->capture_default_str();
  gen->add_option("--window", window)->capture_default_str();
  gen->add_option("--vocab", vocab)->capture_default_str();
  gen->add_option("--period-strength", ps)->capture_default_str();
  gen->add_option("--seed", seed)->capture_default_str();
  gen->add_option("--out", out)->required();

  auto* train = app.add_subcommand("train", "Train a model from a run config");
  std::string config;
  std::string train_out;
  train->add_option("--config", config)->required();
  train->add_option("--out", train_out, "Checkpoint path (defaults to out_path)");

  auto* eval = app.add_subcommand("eval", "Rank held-out items with a checkpoint");
  std::string ckpt;
  std::string data;
  std::vector<Index> ks{10, 50, 100};
  Index sampled = 0;
  std::string report;
  eval->add_option("--checkpoint", ckpt)->required();
  eval->add_option("--data", data)->required();
  eval->add_option("--k", ks)->delimiter(',')->capture_default_str();
  eval->add_option("--sampled", sampled, "Rank against this many sampled negatives (0: all)");
  eval->add_option("--report", report, "Also write key=value metrics here");

  auto* bench = app.add_subcommand("bench", "Time the inference forward pass");
  std::vector<Index> ns{4, 16, 64};
  std::vector<std::string> bench_variants{"dman", "full_scan"};
  Index bench_users = 1024;
  int reps = 5;
  bench->add_option("--checkpoint", ckpt)->required();
  bench->add_option("--history-segments", ns)->delimiter(',')->capture_default_str();
  bench->add_option("--variants", bench_variants)->delimiter(',')->capture_default_str();
  bench->add_option("--users", bench_users)->capture_default_str();
  bench->add_option("--repetitions", reps)->capture_default_str();

  auto* ablate = app.add_subcommand("ablate", "Train dman and each variant with one seed");
  std::vector<std::string> ablate_variants{"xl", "fifo", "nran"};
  std::vector<Index> ablate_ks{10};
  ablate->add_option("--config", config)->required();
  ablate->add_option("--variants", ablate_variants)->delimiter(',')->capture_default_str();
  ablate->add_option("--k", ablate_ks)->delimiter(',')->capture_default_str();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  try {
    if (*gen) return cmd_gen_data(users, segments, window, vocab, ps, seed, out);
    if (*train) return cmd_train(config, train_out);
    if (*eval) return cmd_eval(ckpt, data, ks, sampled, report);
    if (*bench) return cmd_bench(ckpt, ns, bench_variants, bench_users, reps);
    if (*ablate) return cmd_ablate(config, ablate_variants, ablate_ks);
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "failure: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
