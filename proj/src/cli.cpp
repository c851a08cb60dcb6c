#include "bae/cli.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <optional>

#include "CLI11.hpp"
#include "json.hpp"

#include "bae/analysis.hpp"
#include "bae/checkpoint.hpp"
#include "bae/data.hpp"
#include "bae/error.hpp"
#include "bae/export.hpp"
#include "bae/objective.hpp"
#include "bae/parallel.hpp"
#include "bae/selfcheck.hpp"
#include "bae/training.hpp"

namespace bae {

namespace {

// Held-out evaluation never reuses the training stream.
std::uint64_t train_stream_seed(std::uint64_t seed) { return seed * 2 + 1; }
std::uint64_t eval_stream_seed(std::uint64_t seed) { return seed * 2 + 2; }

struct Options {
  std::uint64_t seed = 0;
  std::size_t threads = 0;

  std::string data;
  std::string out;
  std::string config;
  std::string report;
  std::string model;
  std::string model_b;
  std::size_t rows = 4096;
  std::size_t d = 0;
  std::optional<std::size_t> steps;
  std::string prior;
  bool baseline = false;
  std::size_t topk = 0;
  bool quiet = false;

  double tau = 0.5;
  std::vector<std::size_t> d_list{64, 128, 256, 512, 1024};
  std::uint64_t mc = 0;

  std::size_t capacity = 500;
  double epsilon = 1e-3;
  std::string weight = "per_latent";
};

Matrix held_out(const std::string& uri, std::size_t d, std::size_t rows, std::uint64_t seed) {
  auto source = open_source(uri, d, eval_stream_seed(seed));
  ActivationBatch b = source->next(rows);
  if (b.n() < 2) throw Error(ErrorCode::IoError, "need at least 2 evaluation rows");
  return std::move(b.rows);
}

int cmd_gen_data(const Options& o, std::ostream& out) {
  const DataUri uri = parse_data_uri(o.data);
  if (uri.scheme != "synthetic") throw Error(ErrorCode::ConfigError, "gen-data needs a synthetic: URI");
  const SyntheticSpec spec = synthetic_spec_from_uri(uri, o.d);
  SyntheticStream stream(spec, o.seed);
  const ActivationBatch b = stream.next(o.rows);
  write_shard(o.out, b.rows);
  std::vector<TokenMeta> tokens(b.n());
  for (std::size_t s = 0; s < b.n(); ++s) tokens[s] = {b.labels[s].kind, b.labels[s].describe()};
  write_token_sidecar(o.out, tokens);
  out << nlohmann::json{{"command", "gen-data"}, {"shard", o.out}, {"rows", b.n()}, {"d", spec.d}}.dump() << '\n';
  return kExitOk;
}

TrainConfig resolve_config(const Options& o, bool seed_given) {
  TrainConfig c = o.config.empty() ? TrainConfig{} : load_train_config(o.config);
  if (o.steps) c.steps = *o.steps;
  if (!o.prior.empty()) c.prior = parse_prior_kind(o.prior);
  if (seed_given) c.seed = o.seed;
  if (o.d != 0) c.d = o.d;
  if (o.topk != 0) c.topk_active = o.topk;
  c.validate();
  return c;
}

int cmd_train(const Options& o, bool seed_given, std::ostream& out, std::ostream& err) {
  const TrainConfig c = resolve_config(o, seed_given);
  auto source = open_source(o.data, c.d, train_stream_seed(c.seed));
  BilinearAutoencoder model =
      BilinearAutoencoder::initialize(c.d, c.h, c.k, c.make_prior(), c.seed);
  if (c.prior == PriorKind::Composite) model.prior.active_fraction = 1.0;
  const std::size_t every = std::max<std::size_t>(1, c.steps / 16);
  const TrainReport rep = train(model, *source, c, [&](const StepRecord& r) {
    if (!o.quiet && (r.step % every == 0 || r.step + 1 == c.steps)) {
      char buf[160];
      std::snprintf(buf, sizeof buf, "step %zu/%zu nmse %.5f density %.4f active %.5f\n", r.step + 1, c.steps, r.nmse,
                    r.density, r.active_fraction);
      err << buf;
    }
  });
  save_checkpoint(o.out, model);
  const std::string report_path = o.report.empty() ? o.out + ".report.jsonl" : o.report;
  std::ofstream rf(report_path, std::ios::trunc);
  if (!rf) throw Error(ErrorCode::IoError, "cannot write " + report_path);
  rf << rep.to_jsonl();
  if (!o.quiet) err << "wall clock " << rep.wall_clock_seconds << " s\n";
  out << nlohmann::json{{"command", "train"},
                        {"checkpoint", o.out},
                        {"report", report_path},
                        {"prior", to_string(c.prior)},
                        {"steps", c.steps},
                        {"nmse", rep.final_loss.nmse},
                        {"density", rep.final_loss.density}}
             .dump()
      << '\n';
  return kExitOk;
}

int cmd_eval(const Options& o, bool seed_given, std::ostream& out, std::ostream& err) {
  const BilinearAutoencoder model = load_checkpoint(o.model);
  const Matrix x = held_out(o.data, model.d(), o.rows, o.seed);
  TrainConfig c = o.config.empty() ? TrainConfig{} : load_train_config(o.config);
  const LossBreakdown loss = total_loss(model, x, c.alpha);
  nlohmann::json table = nlohmann::json::array();
  table.push_back({{"model", std::string("bilinear/") + to_string(model.prior.kind)},
                   {"product_space_nmse", loss.nmse},
                   {"density", loss.density}});
  if (o.baseline) {
    c.d = model.d();
    if (o.steps) c.steps = *o.steps;
    if (seed_given) c.seed = o.seed;
    const std::size_t kact = o.topk != 0 ? o.topk : c.topk_active;
    auto source = open_source(o.data, model.d(), train_stream_seed(c.seed));
    if (!o.quiet) err << "training TopK baseline (K=" << kact << ", " << c.steps << " steps)\n";
    const TopKSae sae = train_topk_baseline(*source, c, std::min(kact, model.k()), model.k());
    const BaselineError be = evaluate_topk(sae, x);
    table.push_back({{"model", "topk"},
                     {"k_active", sae.k_active},
                     {"input_mse", be.input_mse},
                     {"product_space_nmse", be.product_space_nmse}});
  }
  out << nlohmann::json{{"command", "eval"},
                        {"rows", x.rows()},
                        {"nmse", loss.nmse},
                        {"density", loss.density},
                        {"total", loss.total},
                        {"table", table}}
             .dump()
      << '\n';
  return kExitOk;
}

int cmd_analyze(const Options& o, std::ostream& out) {
  const BilinearAutoencoder model = load_checkpoint(o.model);
  std::optional<Matrix> x;
  if (!o.data.empty()) x = held_out(o.data, model.d(), o.rows, o.seed);
  const auto spectra = all_spectra(model, x ? &*x : nullptr);
  std::ofstream file;
  if (!o.out.empty()) {
    file.open(o.out, std::ios::trunc);
    if (!file) throw Error(ErrorCode::IoError, "cannot write " + o.out);
  }
  std::ostream& sink = o.out.empty() ? out : file;
  for (const auto& s : spectra) sink << to_json(s).dump() << '\n';
  nlohmann::json stats = to_json(rank_statistics(spectra));
  stats["command"] = "analyze";
  stats["latents"] = spectra.size();
  out << stats.dump() << '\n';
  return kExitOk;
}

int cmd_similarity(const Options& o, std::ostream& out) {
  const BilinearAutoencoder a = load_checkpoint(o.model);
  const BilinearAutoencoder b = load_checkpoint(o.model_b);
  nlohmann::json j = to_json(sim_hungarian(a, b));
  j["command"] = "similarity";
  out << j.dump() << '\n';
  return kExitOk;
}

int cmd_verify_theory(const Options& o, std::ostream& out) {
  nlohmann::json j = to_json(verify_receptive_field_gap(o.d_list, o.tau, o.mc, o.seed));
  j["command"] = "verify-theory";
  out << j.dump() << '\n';
  return kExitOk;
}

int cmd_export(const Options& o, std::ostream& out) {
  const BilinearAutoencoder model = load_checkpoint(o.model);
  auto source = open_source(o.data, model.d(), eval_stream_seed(o.seed));
  ExportOptions eo;
  eo.capacity_per_latent = o.capacity;
  eo.epsilon = o.epsilon;
  eo.seed = o.seed;
  eo.max_rows = o.rows;
  eo.weight = o.weight == "code_norm" ? ReservoirWeight::CodeNorm : ReservoirWeight::PerLatent;
  const ExportManifest m = export_bundle(model, *source, o.out, eo);
  out << nlohmann::json{{"command", "export-viewer"},
                        {"dir", m.output_dir},
                        {"latents", m.latents},
                        {"rows", m.rows_streamed},
                        {"files", m.files.size()}}
             .dump()
      << '\n';
  return kExitOk;
}

int cmd_selfcheck(const Options& o, std::ostream& out) {
  bool ok = true;
  for (const auto& c : run_selfcheck(o.seed)) {
    ok = ok && c.passed;
    out << nlohmann::json{{"check", c.name}, {"pass", c.passed}, {"worst", c.worst}, {"tolerance", c.tolerance}}.dump()
        << '\n';
  }
  return ok ? kExitOk : kExitRuntime;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Bilinear autoencoders: training, weight-only analysis and viewer export", "bae"};
  app.require_subcommand(1, 1);
  app.fallthrough();
  Options o;
  app.add_option("--seed", o.seed, "RNG seed");
  app.add_option("--threads", o.threads, "worker threads (default: BAE_THREADS or all cores)")
      ->check(CLI::PositiveNumber);

  auto* gen = app.add_subcommand("gen-data", "write a synthetic activation shard with a label sidecar");
  gen->add_option("--data", o.data, "synthetic:<kind>[?d=&noise=&m=&seed=]")->required();
  gen->add_option("--rows", o.rows, "row count")->check(CLI::PositiveNumber);
  gen->add_option("--d", o.d, "ambient dimension (overrides the URI)");
  gen->add_option("--out", o.out, "shard path")->required();

  auto* tr = app.add_subcommand("train", "train a bilinear autoencoder");
  tr->add_option("--config", o.config, "key = value config file")->check(CLI::ExistingFile);
  tr->add_option("--data", o.data, "data URI")->required();
  tr->add_option("--out", o.out, "checkpoint path")->required();
  tr->add_option("--report", o.report, "JSONL report path (default <out>.report.jsonl)");
  tr->add_option("--steps", o.steps, "override steps")->check(CLI::PositiveNumber);
  tr->add_option("--prior", o.prior, "atomic | composite | quadratic")
      ->check(CLI::IsMember({"atomic", "composite", "quadratic"}));
  tr->add_option("--d", o.d, "override d");
  tr->add_flag("--quiet", o.quiet, "no progress on stderr");

  auto* ev = app.add_subcommand("eval", "held-out nmse, density and the corrected TopK comparison");
  ev->add_option("--model", o.model, "checkpoint")->required()->check(CLI::ExistingFile);
  ev->add_option("--data", o.data, "data URI")->required();
  ev->add_option("--rows", o.rows, "held-out rows")->check(CLI::PositiveNumber);
  ev->add_option("--config", o.config, "config used for the baseline")->check(CLI::ExistingFile);
  ev->add_flag("--baseline", o.baseline, "also train and score a TopK SAE");
  ev->add_option("--topk", o.topk, "TopK active count")->check(CLI::PositiveNumber);
  ev->add_option("--steps", o.steps, "baseline steps")->check(CLI::PositiveNumber);
  ev->add_flag("--quiet", o.quiet, "no progress on stderr");

  auto* an = app.add_subcommand("analyze", "per-latent spectra and rank statistics");
  an->add_option("--model", o.model, "checkpoint")->required()->check(CLI::ExistingFile);
  an->add_option("--data", o.data, "data URI for densities");
  an->add_option("--rows", o.rows, "rows for densities")->check(CLI::PositiveNumber);
  an->add_option("--out", o.out, "write spectra JSONL here instead of stdout");

  auto* sim = app.add_subcommand("similarity", "Frobenius and Hungarian similarity of two checkpoints");
  sim->add_option("--a", o.model, "first checkpoint")->required()->check(CLI::ExistingFile);
  sim->add_option("--b", o.model_b, "second checkpoint")->required()->check(CLI::ExistingFile);

  auto* vt = app.add_subcommand("verify-theory", "exact and Monte-Carlo sphere-cap tails");
  vt->add_option("--tau", o.tau, "threshold in (0, 1)")->check(CLI::Range(0.0, 1.0));
  vt->add_option("--d", o.d_list, "dimensions")->delimiter(',');
  vt->add_option("--mc", o.mc, "Monte-Carlo samples per d");

  auto* ex = app.add_subcommand("export-viewer", "write a bae-viewer/1 bundle");
  ex->add_option("--model", o.model, "checkpoint")->required()->check(CLI::ExistingFile);
  ex->add_option("--data", o.data, "data URI")->required();
  ex->add_option("--out", o.out, "bundle directory")->required();
  ex->add_option("--capacity", o.capacity, "points per latent")->check(CLI::PositiveNumber);
  ex->add_option("--epsilon", o.epsilon, "reservoir weight epsilon")->check(CLI::PositiveNumber);
  ex->add_option("--rows", o.rows, "rows streamed")->check(CLI::PositiveNumber);
  ex->add_option("--weight", o.weight, "per_latent | code_norm")->check(CLI::IsMember({"per_latent", "code_norm"}));

  auto* sc = app.add_subcommand("selfcheck", "oracle-equivalence suite");

  std::vector<std::string> reversed(args.rbegin(), args.rend());
  try {
    app.parse(reversed);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e, out, err);
    return code == 0 ? kExitOk : kExitUsage;
  }

  set_thread_count(o.threads);
  const bool seed_given = app.count("--seed") > 0;
  try {
    if (*gen) return cmd_gen_data(o, out);
    if (*tr) return cmd_train(o, seed_given, out, err);
    if (*ev) return cmd_eval(o, seed_given, out, err);
    if (*an) return cmd_analyze(o, out);
    if (*sim) return cmd_similarity(o, out);
    if (*vt) return cmd_verify_theory(o, out);
    if (*ex) return cmd_export(o, out);
    if (*sc) return cmd_selfcheck(o, out);
  } catch (const Error& e) {
    err << "error: " << e.what() << '\n';
    return e.code() == ErrorCode::ConfigError ? kExitUsage : kExitRuntime;
  } catch (const std::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitRuntime;
  }
  return kExitUsage;
}

}  // namespace bae
