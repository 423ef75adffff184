// Command-line front end: dataset generation, training, evaluation, ablation
// sweeps and interactive embedding arithmetic.

#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

#include "nif/algebra_eval.hpp"
#include "nif/checkpoint.hpp"
#include "nif/training.hpp"

namespace fs = std::filesystem;
using namespace nif;

namespace {

constexpr int kExitUsage = 1;
constexpr int kExitData = 2;
constexpr int kExitTraining = 3;

struct UsageError : Error {
  using Error::Error;
};

void write_file_atomic(const fs::path& path, const std::string& body) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot open for writing: " + tmp.string());
    out << body;
    if (!out) throw IoError("write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create directory " + dir.string() + ": " + ec.message());
}

// FNV-1a over the compact JSON dump.
std::string config_hash(const nlohmann::json& j) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (unsigned char c : j.dump()) {
    h ^= c;
    h *= 0x100000001b3ULL;
  }
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (!item.empty()) out.push_back(item);
  }
  return out;
}

// "negbin", "negbin:2:0.45", "geometric:0.5", "poisson:1.5".
LengthDistribution parse_distribution(const std::string& spec, int r, double p, double lambda) {
  std::vector<std::string> parts;
  std::stringstream ss(spec);
  std::string item;
  while (std::getline(ss, item, ':')) parts.push_back(item);
  if (parts.empty()) throw UsageError("empty distribution");
  try {
    if (parts[0] == "negbin") {
      if (parts.size() > 1) r = std::stoi(parts[1]);
      if (parts.size() > 2) p = std::stod(parts[2]);
      return NegBinomial{r, p};
    }
    if (parts[0] == "geometric") return GeometricShifted{parts.size() > 1 ? std::stod(parts[1]) : p};
    if (parts[0] == "poisson") return Poisson{parts.size() > 1 ? std::stod(parts[1]) : lambda};
  } catch (const std::logic_error&) {
    throw UsageError("bad distribution parameters: " + spec);
  }
  throw UsageError("unknown distribution: " + spec);
}

// Options shared by `train` and `ablate`.
struct TrainOptions {
  std::string regime = "field";
  std::string train_path, eval_path;
  TrainConfig cfg;

  void attach(CLI::App* app) {
    app->add_option("--regime", regime, "add-group | mul-group | field");
    app->add_option("--train", train_path, "training dataset file");
    app->add_option("--eval", eval_path, "evaluation dataset file");
    app->add_option("--epochs", cfg.epochs);
    app->add_option("--batch", cfg.batch_size);
    app->add_option("--seed", cfg.seed)->envname("NIF_SEED");
    app->add_option("--d-model", cfg.model.d_model);
    app->add_option("--layers", cfg.model.n_layers);
    app->add_option("--heads", cfg.model.n_heads);
    app->add_option("--d-ff", cfg.model.d_ff, "0 selects 4 * d-model");
    app->add_option("--k-ac", cfg.model.k_ac);
    app->add_option("--max-len", cfg.model.max_len);
    app->add_option("--lr-scale", cfg.schedule.base_scale);
    app->add_option("--warmup", cfg.schedule.warmup_steps);
    app->add_option("--w-rec", cfg.weights.rec);
    app->add_option("--w-iso-add", cfg.weights.iso_add);
    app->add_option("--w-iso-mul", cfg.weights.iso_mul);
    app->add_option("--w-ord", cfg.weights.ord);
    app->add_option("--stop-target-gradient", cfg.stop_target_gradient);
    app->add_option("--order-in-groups", cfg.order_in_groups);
    app->add_option("--approx-fraction", cfg.approx_fraction);
    app->add_option("--eval-samples", cfg.eval_samples);
    app->add_option("--steps-per-epoch", cfg.steps_per_epoch, "0: one pass over the training pool");
  }

  TrainConfig resolve() const {
    TrainConfig c = cfg;
    c.regime = parse_regime(regime);
    c.train_path = train_path;
    c.eval_path = eval_path;
    c.validate();
    return c;
  }
};

// Trains and keeps `out_dir` current after every epoch: checkpoint and
// metrics are replaced atomically, so an interrupted run leaves the last
// completed epoch intact.
TrainResult train_into(const TrainConfig& cfg, const fs::path& out_dir, bool verbose) {
  if (cfg.train_path.empty() || cfg.eval_path.empty()) throw IoError("--train and --eval datasets are required");
  const Dataset train_set = read_dataset(cfg.train_path);
  const Dataset eval_set = read_dataset(cfg.eval_path);
  ensure_dir(out_dir);
  write_file_atomic(out_dir / "config.json", to_json(cfg).dump(2) + "\n");
  PoolBatchSource source(train_set.numerals, cfg);
  // First line echoes the resolved config; one object per epoch follows.
  std::string metrics = nlohmann::json{{"config", to_json(cfg)}}.dump() + "\n";
  return train(cfg, source, eval_set.numerals, [&](const Model& model, const EpochMetrics& m, std::int64_t step) {
    save_checkpoint(make_checkpoint(model, checkpoint_meta(cfg, step, train_set.header)),
                    (out_dir / "ckpt.nif").string());
    metrics += to_json(m).dump() + "\n";
    write_file_atomic(out_dir / "metrics.jsonl", metrics);
    if (verbose) {
      std::printf("epoch %d  step %lld  rec %.4f  iso_add %.4f  iso_mul %.4f  ord %.4f  eval acc %.4f  exact %.4f  %.0fs\n",
                  m.epoch, static_cast<long long>(m.steps), m.rec, m.iso_add, m.iso_mul, m.ord, m.eval_token_accuracy,
                  m.eval_exact_match, m.seconds);
      std::fflush(stdout);
    }
  });
}

Model load_model(const std::string& path) { return model_from_checkpoint(load_checkpoint(path)); }

std::string decode_one(const Model& model, const dc::Tensor& h, int length) {
  const int len[] = {length};
  const auto decoded = model.decode_greedy(h, len);
  return detokenize(decoded[0]).text;
}

// Reads `key = value` lines and turns them into `--key=value` arguments.
// Blank lines and lines starting with '#' are skipped.
std::vector<std::string> config_arguments(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config: " + path);
  std::vector<std::string> args;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const auto first = line.find_first_not_of(" \t");
    if (first == std::string::npos || line[first] == '#') continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw UsageError(path + ":" + std::to_string(lineno) + ": expected key = value");
    auto trim = [](std::string s) {
      const auto b = s.find_first_not_of(" \t\r");
      const auto e = s.find_last_not_of(" \t\r");
      return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
    };
    args.push_back("--" + trim(line.substr(0, eq)) + "=" + trim(line.substr(eq + 1)));
  }
  return args;
}

// Splices config-file arguments in front of the command-line flags so that
// flags override the file.
std::vector<std::string> expand_config(int argc, char** argv) {
  std::vector<std::string> args(argv + 1, argv + argc);
  for (std::size_t i = 0; i < args.size(); ++i) {
    std::string path;
    std::size_t consumed = 0;
    if (args[i] == "--config" && i + 1 < args.size()) {
      path = args[i + 1];
      consumed = 2;
    } else if (args[i].rfind("--config=", 0) == 0) {
      path = args[i].substr(9);
      consumed = 1;
    }
    if (consumed == 0) continue;
    args.erase(args.begin() + i, args.begin() + i + consumed);
    const auto extra = config_arguments(path);
    args.insert(args.begin() + (args.empty() ? 0 : 1), extra.begin(), extra.end());
    break;
  }
  std::reverse(args.begin(), args.end());  // CLI11 consumes the vector from the back
  return args;
}

int run(int argc, char** argv) {
  CLI::App app{"Numeral embeddings with learned field operations"};
  app.require_subcommand(1);
  app.option_defaults()->multi_option_policy(CLI::MultiOptionPolicy::TakeLast);
  app.set_help_all_flag("--help-all");
  std::string unused_config;
  app.add_option("--config", unused_config, "key = value file; flags override it");

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "sample a numeral dataset");
  std::string dist = "negbin", out_path, split = "train";
  int nb_r = 2;
  double nb_p = 0.45, lambda = 1.0;
  SamplerConfig sampler;
  std::size_t n_samples = 0;
  gen->add_option("--dist", dist, "negbin | geometric | poisson");
  gen->add_option("--r", nb_r);
  gen->add_option("--p", nb_p);
  gen->add_option("--lambda", lambda);
  gen->add_option("--max-len", sampler.max_len);
  gen->add_option("--neg-prob", sampler.neg_prob);
  gen->add_option("--n", n_samples)->required();
  gen->add_option("--seed", sampler.seed)->envname("NIF_SEED");
  gen->add_option("--split", split, "train | eval")->check(CLI::IsMember({"train", "eval"}));
  gen->add_option("--out", out_path)->required();

  // train
  auto* tr = app.add_subcommand("train", "train a model; writes ckpt.nif, metrics.jsonl, config.json");
  TrainOptions train_opts;
  train_opts.attach(tr);
  std::string out_dir;
  tr->add_option("--out-dir", out_dir)->required();

  // eval-algebra
  auto* ev = app.add_subcommand("eval-algebra", "run the algebraic test battery");
  std::string ckpt_path, tests = "all", eval_out;
  EvalConfig eval_cfg;
  int n_seeds = 3;
  std::uint64_t base_seed = 0;
  ev->add_option("--ckpt", ckpt_path)->required();
  ev->add_option("--tests", tests, "all or a comma list such as closure-add,order");
  ev->add_option("--n", eval_cfg.n);
  ev->add_option("--seeds", n_seeds, "number of evaluation seeds");
  ev->add_option("--seed", base_seed, "first evaluation seed")->envname("NIF_SEED");
  ev->add_option("--out", eval_out, "directory for report.json and report.txt");

  // arith / order
  auto* ar = app.add_subcommand("arith", "apply a learned operator to two numerals");
  std::string op_name_arg = "add", lhs, rhs;
  ar->add_option("--ckpt", ckpt_path)->required();
  ar->add_option("--op", op_name_arg)->check(CLI::IsMember({"add", "mul"}));
  ar->add_option("a", lhs)->required();
  ar->add_option("b", rhs)->required();
  auto* od = app.add_subcommand("order", "compare two numerals with the order head");
  od->add_option("--ckpt", ckpt_path)->required();
  od->add_option("a", lhs)->required();
  od->add_option("b", rhs)->required();

  // ablate
  auto* ab = app.add_subcommand("ablate", "short training runs over one hyperparameter");
  TrainOptions ablate_opts;
  ablate_opts.attach(ab);
  std::string sweep, values, ablate_out, ablate_dist = "negbin";
  std::size_t n_train = 20000, n_eval = 2000;
  ab->add_option("--sweep", sweep)->required()->check(CLI::IsMember({"max-len", "d-model", "k-ac", "dist"}));
  ab->add_option("--values", values, "comma-separated sweep values")->required();
  ab->add_option("--n-train", n_train);
  ab->add_option("--n-eval", n_eval);
  ab->add_option("--dist", ablate_dist, "length distribution for generated data");
  ab->add_option("--out", ablate_out)->required();

  try {
    app.parse(expand_config(argc, argv));
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitUsage;
  }

  if (gen->parsed()) {
    sampler.length_dist = parse_distribution(dist, nb_r, nb_p, lambda);
    sampler.validate();
    write_dataset({n_samples, split == "train" ? Split::kTrain : Split::kEval, out_path}, sampler);
    std::printf("wrote %zu numerals to %s\n", n_samples, out_path.c_str());
    return 0;
  }

  if (tr->parsed()) {
    const TrainConfig cfg = train_opts.resolve();
    std::printf("%s\n", to_json(cfg).dump(2).c_str());
    const TrainResult r = train_into(cfg, out_dir, true);
    std::printf("done: %lld steps, checkpoint %s\n", static_cast<long long>(r.steps),
                (fs::path(out_dir) / "ckpt.nif").c_str());
    return 0;
  }

  if (ev->parsed()) {
    const Checkpoint ckpt = load_checkpoint(ckpt_path);
    const Model model = model_from_checkpoint(ckpt);
    std::vector<TestKind> kinds;
    if (tests == "all") {
      kinds = all_tests();
    } else {
      for (const auto& name : split_list(tests)) kinds.push_back(parse_test_kind(name));
    }
    if (kinds.empty() || n_seeds < 1 || eval_cfg.n < 1) throw UsageError("nothing to evaluate");
    // Operands follow the training distribution recorded in the checkpoint.
    if (ckpt.meta.contains("sampler")) {
      eval_cfg.sampler = sampler_config_from_json(ckpt.meta.at("sampler"));
    }
    eval_cfg.sampler.max_len = model.config().max_len;
    std::vector<std::uint64_t> seeds;
    for (int i = 0; i < n_seeds; ++i) seeds.push_back(base_seed + static_cast<std::uint64_t>(i));
    const auto reports = run_all(model, kinds, eval_cfg, seeds);
    const std::string table = format_table(reports);
    std::fputs(table.c_str(), stdout);
    if (!eval_out.empty()) {
      ensure_dir(eval_out);
      write_file_atomic(fs::path(eval_out) / "report.json", reports_to_json(reports).dump(2) + "\n");
      write_file_atomic(fs::path(eval_out) / "report.txt", table);
    }
    return 0;
  }

  if (ar->parsed()) {
    const Op op = parse_op(op_name_arg);
    const Model model = load_model(ckpt_path);
    const std::string a = canonicalize(lhs), b = canonicalize(rhs);
    const std::string truth = oracle_decimal(op, a, b);
    const std::vector<std::string> as{a}, bs{b};
    const dc::Tensor h = model.apply_operator(op, model.embed_numerals(as), model.embed_numerals(bs));
    std::printf("model \"%s\" | oracle \"%s\"\n",
                decode_one(model, h, static_cast<int>(tokenize(truth).size())).c_str(), truth.c_str());
    return 0;
  }

  if (od->parsed()) {
    const Model model = load_model(ckpt_path);
    const std::string a = canonicalize(lhs), b = canonicalize(rhs);
    const std::vector<std::string> as{a}, bs{b};
    const dc::Tensor probs = model.order(model.embed_numerals(as), model.embed_numerals(bs));
    const auto predicted = relation_from_probs(probs.row(0));
    const auto truth = static_cast<OrderRelation>(order_class(oracle_cmp(parse(a), parse(b))));
    std::printf("model %s (p = %.3f %.3f %.3f) | oracle %s\n", relation_name(predicted), probs[0], probs[1],
                probs[2], relation_name(truth));
    return 0;
  }

  if (ab->parsed()) {
    ensure_dir(ablate_out);
    const TrainConfig base = ablate_opts.resolve();
    std::string csv = "sweep,value,config_hash,seed,token_accuracy,exact_match,status\n";
    int cell = 0;
    for (const auto& value : split_list(values)) {
      TrainConfig c = base;
      SamplerConfig s;
      s.seed = base.seed;
      s.length_dist = parse_distribution(ablate_dist, 2, 0.45, 1.0);
      std::string status = "ok";
      double token_acc = 0, exact = 0;
      try {
        if (sweep == "max-len") {
          c.model.max_len = std::stoi(value);
        } else if (sweep == "d-model") {
          c.model.d_model = std::stoi(value);
        } else if (sweep == "k-ac") {
          c.model.k_ac = std::stoi(value);
        } else {
          s.length_dist = parse_distribution(value, 2, 0.45, 1.0);
        }
        s.max_len = c.model.max_len;
        const fs::path dir = fs::path(ablate_out) / ("cell-" + std::to_string(cell));
        ensure_dir(dir);
        c.train_path = (dir / "train.txt").string();
        c.eval_path = (dir / "eval.txt").string();
        write_dataset({n_train, Split::kTrain, c.train_path}, s);
        write_dataset({n_eval, Split::kEval, c.eval_path}, s);
        c.validate();
        const TrainResult r = train_into(c, dir, false);
        token_acc = r.metrics.back().eval_token_accuracy;
        exact = r.metrics.back().eval_exact_match;
      } catch (const std::exception& e) {
        status = std::string("error: ") + e.what();
        for (auto& ch : status) {
          if (ch == ',' || ch == '\n') ch = ';';
        }
      }
      // Dataset paths depend on --out; the sampler config identifies the data.
      nlohmann::json train_json = to_json(c);
      train_json.erase("train_path");
      train_json.erase("eval_path");
      const nlohmann::json resolved = {{"train", train_json}, {"sampler", to_json(s)}, {"n_train", n_train},
                                       {"n_eval", n_eval}};
      char row[256];
      std::snprintf(row, sizeof row, "%s,%s,%s,%llu,%.6f,%.6f,", sweep.c_str(), value.c_str(),
                    config_hash(resolved).c_str(), static_cast<unsigned long long>(c.seed), token_acc, exact);
      csv += row + status + "\n";
      std::printf("%s", (std::string(row) + status + "\n").c_str());
      std::fflush(stdout);
      write_file_atomic(fs::path(ablate_out) / "ablate.csv", csv);
      ++cell;
    }
    return 0;
  }
  return kExitUsage;
}

}  // namespace

int main(int argc, char** argv) {
  configure_allocator();
  try {
    return run(argc, argv);
  } catch (const TrainingDiverged& e) {
    std::fprintf(stderr, "training aborted: %s\n", e.what());
    return kExitTraining;
  } catch (const UsageError& e) {
    std::fprintf(stderr, "usage error: %s\n", e.what());
    return kExitUsage;
  } catch (const IoError& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return kExitData;
  } catch (const MalformedNumeral& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return kExitData;
  } catch (const CorruptCheckpoint& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return kExitData;
  } catch (const VersionMismatch& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return kExitData;
  } catch (const SequenceTooLong& e) {
    std::fprintf(stderr, "data error: %s\n", e.what());
    return kExitData;
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitUsage;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kExitData;
  }
}
