#include "xrs/cli.hpp"

#include <cstdio>
#include <iomanip>
#include <iostream>
#include <sstream>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "xrs/errors.hpp"
#include "xrs/harness.hpp"
#include "xrs/io.hpp"
#include "xrs/rng.hpp"
#include "xrs/verify.hpp"

#ifndef XRS_FIXTURE_DIR
#define XRS_FIXTURE_DIR "fixtures"
#endif

namespace xrs {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string one_line(std::string s) {
  for (auto& c : s) {
    if (c == '\n' || c == '\r') c = ' ';
  }
  return s;
}

ShapeWeights parse_weights(const std::string& text, std::size_t expected) {
  std::vector<double> w;
  for (auto part : split(text, ',')) {
    part = trim(part);
    std::size_t used = 0;
    double v = 0.0;
    try {
      v = std::stod(std::string(part), &used);
    } catch (const std::exception&) {
      used = 0;
    }
    if (used == 0 || used != part.size()) {
      throw UsageError("malformed weight '" + std::string(part) + "'");
    }
    w.push_back(v);
  }
  if (w.size() != expected) {
    throw UsageError("expected " + std::to_string(expected) +
                     " comma-separated weights (one per source, then the scalar), got " +
                     std::to_string(w.size()));
  }
  return ShapeWeights(std::move(w));
}

struct Scored {
  double scalar = 0.0;
  std::vector<Attribution> attributions;
};

// Scores and attributes every sequence with every configured source.
std::vector<Scored> score_sequences(const ExperimentConfig& config,
                                    const Scorer& scorer,
                                    const std::vector<TokenSequence>& seqs) {
  std::vector<Attribution> external;
  if (config.external_scores) external = load_external_scores(*config.external_scores, seqs);
  std::vector<Scored> out(seqs.size());
  for (std::size_t i = 0; i < seqs.size(); ++i) {
    out[i].scalar = scorer.score(seqs[i]);
    for (std::size_t k = 0; k < config.sources.size(); ++k) {
      if (config.sources[k] == AttributionMethod::kExternal) {
        out[i].attributions.push_back(external[i]);
      } else {
        out[i].attributions.push_back(attribute(config.sources[k], scorer, seqs[i],
                                                config.attribution,
                                                derive_seed(derive_seed(config.seed, i), k)));
      }
    }
  }
  return out;
}

void emit_lines(const std::vector<json>& lines, const std::string& out_path,
                std::ostream& out) {
  if (out_path.empty()) {
    for (const auto& l : lines) out << l.dump() << "\n";
    return;
  }
  std::string content;
  for (const auto& l : lines) content += l.dump() + "\n";
  write_file_atomic(out_path, content);
}

std::string fmt(double v, int precision = 6) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(precision) << v;
  return s.str();
}

std::string weights_text(const std::vector<double>& w) {
  std::string s;
  for (std::size_t i = 0; i < w.size(); ++i) {
    if (i) s += ",";
    s += fmt(w[i], 4);
  }
  return s;
}

int run_verify(const std::string& fixture, int cases, std::uint64_t seed,
               std::ostream& out) {
  const CoalitionTable table = load_coalition_table(fixture);
  const GoldenCheck golden = check_coalition_table(table);
  out << "token\tphi\texpected\tabs_error\n";
  for (std::size_t i = 0; i < table.tokens.size(); ++i) {
    out << table.tokens[i] << "\t" << fmt(golden.attribution.phi[i]) << "\t";
    if (i < table.expected_phi.size()) {
      out << fmt(table.expected_phi[i], 3) << "\t"
          << fmt(std::abs(golden.attribution.phi[i] - table.expected_phi[i]));
    } else {
      out << "-\t-";
    }
    out << "\n";
  }
  out << "phi0 " << fmt(golden.attribution.phi0) << ", efficiency error "
      << golden.efficiency_error << ", evaluations " << golden.attribution.budget_used
      << "\n";
  out << "golden: " << (golden.pass ? "PASS" : "FAIL") << " (tolerance "
      << table.tolerance << ")\n";

  const InvarianceSuite suite = run_invariance_suite(cases, seed);
  out << "invariance: " << suite.shaped_pass << "/" << suite.cases
      << " potential cases invariant (worst policy gap " << suite.worst_policy_gap
      << ", worst value gap " << suite.worst_value_gap << "); " << suite.control_fail
      << "/" << suite.cases << " non-potential controls detected: "
      << (suite.pass() ? "PASS" : "FAIL") << "\n";
  const bool ok = golden.pass && suite.pass();
  out << (ok ? "PASS" : "FAIL") << "\n";
  return ok ? 0 : 1;
}

int run_report(const fs::path& dir, bool as_json, std::ostream& out) {
  const RunSummary s = summarize_run(dir);
  if (!s.has_manifest && s.trials.empty()) {
    throw UsageError("no manifest or trial records under " + dir.string());
  }
  if (as_json) {
    json j = {{"complete", s.complete}, {"has_manifest", s.has_manifest}};
    j["trials"] = json::array();
    for (const auto& t : s.trials) j["trials"].push_back(t.to_json());
    if (s.manifest) j["manifest"] = s.manifest->to_json();
    out << j.dump(2) << "\n";
    return 0;
  }
  out << "trial\tweights\tval_reward\tstderr\tutility\tfailed\tincumbent\tscorer_evals\t"
         "seconds\n";
  for (const auto& t : s.trials) {
    out << t.index << "\t" << weights_text(t.weights) << "\t"
        << (t.validation_reward ? fmt(*t.validation_reward) : std::string("-")) << "\t"
        << fmt(t.validation_stderr) << "\t" << fmt(t.utility) << "\t"
        << (t.failed ? "yes" : "no") << "\t" << t.checkpoint_id << "\t" << t.scorer_evals
        << "\t" << fmt(t.wall_clock_seconds, 2) << "\n";
  }
  out << "status: " << (s.complete ? "complete" : "INCOMPLETE") << ", "
      << s.trials.size() << " trial records\n";
  if (s.manifest) {
    const RunManifest& m = *s.manifest;
    if (!m.error.empty()) out << "error: " << m.error << "\n";
    out << "baseline validation reward: " << fmt(m.baseline_validation_reward) << "\n";
    if (!m.best_weights.empty()) out << "best weights: " << weights_text(m.best_weights) << "\n";
    if (m.final_result) {
      out << "final validation reward: " << fmt(m.final_result->validation_reward)
          << " +/- " << fmt(m.final_result->validation_stderr) << " over "
          << m.final_result->steps << " steps\n";
    }
    out << "prompt draws: " << m.prompt_draws() << " of at most " << 2 * m.train_size
        << (m.within_data_pass_bound() ? "" : " (bound exceeded)") << "\n";
  }
  return 0;
}

}  // namespace

int cli_dispatch(int argc, const char* const* argv, std::ostream& out,
                 std::ostream& err) {
  CLI::App app{"Explainable dense reward shaping with Bayesian-optimized weights"};
  app.require_subcommand(1);

  std::string config_path, sequences_path, out_path, weights, run_dir, name;
  std::string fixture = std::string(XRS_FIXTURE_DIR) + "/golden_coalitions.json";
  bool validate_only = false, sparse = false, as_json = false;
  int cases = 100;
  std::uint64_t seed = 0;

  auto* attribute_cmd = app.add_subcommand("attribute", "Score and attribute a sequence file");
  attribute_cmd->add_option("-c,--config", config_path, "Experiment config")->required();
  attribute_cmd->add_option("-s,--sequences", sequences_path,
                            "Lines of 'prompt ids | completion ids'")
      ->required();
  attribute_cmd->add_option("-o,--out", out_path, "Output file (default stdout)");

  auto* shape_cmd = app.add_subcommand("shape", "Emit dense reward traces for a sequence file");
  shape_cmd->add_option("-c,--config", config_path, "Experiment config")->required();
  shape_cmd->add_option("-s,--sequences", sequences_path, "Sequence file")->required();
  shape_cmd->add_option("-w,--weights", weights,
                        "Comma-separated simplex weights: sources, then scalar")
      ->required();
  shape_cmd->add_option("-o,--out", out_path, "Output file (default stdout)");

  auto* train_cmd = app.add_subcommand("train", "Single inner training run with fixed weights");
  train_cmd->add_option("-c,--config", config_path, "Experiment config")->required();
  auto* weights_opt =
      train_cmd->add_option("-w,--weights", weights, "Comma-separated simplex weights");
  train_cmd->add_flag("--sparse", sparse, "All weight on the scalar reward")
      ->excludes(weights_opt);
  train_cmd->add_option("-o,--out", out_path, "Output directory")->required();
  train_cmd->add_option("-n,--name", name, "Run name for metrics and checkpoint files");

  auto* bo_cmd = app.add_subcommand("bo-run", "Full bilevel run");
  bo_cmd->add_option("-c,--config", config_path, "Experiment config")->required();
  bo_cmd->add_option("-r,--run-dir", run_dir, "Override the config's run_dir");
  bo_cmd->add_flag("--validate-only", validate_only, "Check the config and exit");

  auto* verify_cmd = app.add_subcommand("verify", "Golden coalition table and invariance suite");
  verify_cmd->add_option("-f,--fixture", fixture, "Coalition table fixture");
  verify_cmd->add_option("--cases", cases, "Random invariance cases")
      ->check(CLI::PositiveNumber);
  verify_cmd->add_option("--seed", seed, "Seed for the invariance cases");

  auto* report_cmd = app.add_subcommand("report", "Summarize a run directory");
  report_cmd->add_option("run_dir", run_dir, "Run directory")->required();
  report_cmd->add_flag("--json", as_json, "Emit JSON instead of a table");

  try {
    try {
      app.parse(argc, argv);
    } catch (const CLI::CallForHelp&) {
      out << app.help();
      return 0;
    } catch (const CLI::CallForAllHelp&) {
      out << app.help("", CLI::AppFormatMode::All);
      return 0;
    } catch (const CLI::ParseError& e) {
      throw UsageError(e.what());
    }

    if (app.got_subcommand(verify_cmd)) return run_verify(fixture, cases, seed, out);
    if (app.got_subcommand(report_cmd)) return run_report(run_dir, as_json, out);

    ExperimentConfig config = ExperimentConfig::load(config_path);

    if (app.got_subcommand(attribute_cmd) || app.got_subcommand(shape_cmd)) {
      config.validate(ConfigUse::kAttribution);
      std::optional<ShapeWeights> w;
      if (app.got_subcommand(shape_cmd)) w = parse_weights(weights, config.num_weights());
      const RewardModel scorer = build_reward_model(config);
      const auto seqs = read_sequences(sequences_path, config.mdp);
      const auto scored = score_sequences(config, scorer, seqs);
      std::vector<json> lines;
      for (std::size_t i = 0; i < seqs.size(); ++i) {
        json line = {{"index", i}, {"sequence", to_json(seqs[i])}, {"scalar", scored[i].scalar}};
        if (w) {
          const DenseReward dense = shape_rewards(scored[i].attributions, scored[i].scalar, *w);
          line["weights"] = w->values();
          line["dense"] = dense.to_json();
        } else {
          line["attributions"] = json::array();
          for (const auto& a : scored[i].attributions) line["attributions"].push_back(a.to_json());
        }
        lines.push_back(std::move(line));
      }
      emit_lines(lines, out_path, out);
      return 0;
    }

    if (app.got_subcommand(train_cmd)) {
      config.validate(ConfigUse::kTraining);
      if (!sparse && weights.empty()) throw UsageError("train needs --weights or --sparse");
      const ShapeWeights w = sparse ? ShapeWeights::sparse(config.sources.size())
                                    : parse_weights(weights, config.num_weights());
      if (name.empty()) name = sparse ? "sparse" : "dense";
      const FinalResult r = train_fixed(config, w, out_path, name);
      out << json{{"name", name},
                  {"weights", r.weights},
                  {"validation_reward", r.validation_reward},
                  {"validation_stderr", r.validation_stderr},
                  {"steps", r.steps},
                  {"metrics", (fs::path(out_path) / "metrics" / (name + ".jsonl")).string()}}
                 .dump()
          << "\n";
      return 0;
    }

    // bo-run
    if (!run_dir.empty()) config.run_dir = run_dir;
    config.validate(ConfigUse::kBilevel);
    if (config.run_dir.empty()) throw UsageError("no run directory: set run_dir or --run-dir");
    if (validate_only) {
      out << "config ok: hash " << config.hash() << ", run dir "
          << resolve_run_dir(config.run_dir).string() << "\n";
      return 0;
    }
    const RunManifest m = run_bilevel(config);
    out << json{{"run_dir", resolve_run_dir(config.run_dir).string()},
                {"trials", m.trials.size()},
                {"best_weights", m.best_weights},
                {"final_validation_reward",
                 m.final_result ? json(m.final_result->validation_reward) : json(nullptr)},
                {"config_hash", m.config_hash}}
               .dump()
        << "\n";
    return 0;
  } catch (const UsageError& e) {
    err << "error: " << e.kind() << ": " << one_line(e.what()) << std::endl;
    return 2;
  } catch (const Error& e) {
    err << "error: " << e.kind() << ": " << one_line(e.what()) << std::endl;
    return 1;
  } catch (const std::exception& e) {
    err << "error: internal: " << one_line(e.what()) << std::endl;
    return 1;
  }
}

int cli_dispatch(int argc, const char* const* argv) {
  return cli_dispatch(argc, argv, std::cout, std::cerr);
}

}  // namespace xrs
