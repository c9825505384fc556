// Experiment driver. Subcommands cover the whole flow: generate datasets,
// pretrain the server model, run adaptation sessions (in-process or over
// TCP as two processes), run baselines and the inversion attack, and
// aggregate result rows into comparison tables.

#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <memory>
#include <string>
#include <thread>
#include <vector>

#include <CLI11.hpp>

#include "sa/adapt.hpp"
#include "sa/config.hpp"
#include "sa/experiment.hpp"
#include "sa/report.hpp"

namespace {

using namespace sa;

std::string find_config_path(int argc, char** argv) {
  for (int i = 1; i < argc; ++i) {
    const std::string a = argv[i];
    if (a == "--config" && i + 1 < argc) return argv[i + 1];
    if (a.rfind("--config=", 0) == 0) return a.substr(9);
  }
  return "";
}

ExperimentData load_data_or_explain(const Workspace& ws) {
  try {
    return read_experiment_data(ws);
  } catch (const Error& e) {
    throw ConfigError(std::string(e.what()) +
                      " (generate datasets with gen-data first)");
  }
}

ServerModel load_model_or_explain(const Workspace& ws) {
  try {
    return read_server_model(ws);
  } catch (const Error& e) {
    throw ConfigError(std::string(e.what()) +
                      " (train the model with pretrain first)");
  }
}

void print_row(const ResultRow& row) {
  std::printf("%s\n", csv_header());
  std::printf("%s\n", format_result_row(row).c_str());
}

int fail_run(const ExperimentConfig& cfg, const std::string& run_id,
             const Error& e) {
  std::fprintf(stderr, "error: %s\n", e.what());
  ResultRow row;
  row.run_id = run_id;
  row.mode = "error";
  row.shots = cfg.shots;
  row.seed = cfg.seed;
  try {
    write_run_record(cfg, row);
  } catch (const Error& inner) {
    std::fprintf(stderr, "error: could not record the failure: %s\n",
                 inner.what());
  }
  return 1;
}

int cmd_gen_data(const ExperimentConfig& cfg) {
  const ExperimentData data = generate_experiment_data(cfg);
  const Workspace ws{cfg.out_dir};
  write_experiment_data(data, ws);
  std::printf("wrote %zu server train, %zu server test, %zu client pool, "
              "%zu client test images under %s\n",
              data.server_train.size(), data.server_test.size(),
              data.client_pool.size(), data.client_test.size(),
              ws.data_dir().c_str());
  return 0;
}

int cmd_pretrain(const ExperimentConfig& cfg) {
  const Workspace ws{cfg.out_dir};
  const ExperimentData data = load_data_or_explain(ws);
  ServerModel sm =
      pretrain_server_model(cfg.spec, data.server_train, cfg.pretrain_epochs,
                            cfg.model_seed, cfg.pretrain_lr,
                            cfg.pretrain_batch);
  const double train_acc = model_accuracy(sm.model, sm.head, data.server_train);
  const double test_acc = model_accuracy(sm.model, sm.head, data.server_test);
  write_server_model(sm, ws);
  std::printf("pretrained %zu epochs: train accuracy %.4f, test accuracy "
              "%.4f; model written to %s\n",
              cfg.pretrain_epochs, train_acc, test_acc,
              ws.model_dir().c_str());
  return 0;
}

int cmd_serve(const ExperimentConfig& cfg) {
  const Workspace ws{cfg.out_dir};
  const ExperimentData data = load_data_or_explain(ws);
  ServerModel sm = load_model_or_explain(ws);
  const ServerState st = prepare_server_state(cfg, std::move(sm),
                                              data.server_train);
  const AdaptationConfig acfg = adaptation_config(cfg);

  TcpListener listener(cfg.port);
  std::printf("listening on port %u for %zu session(s)\n", listener.port(),
              cfg.max_sessions);
  std::fflush(stdout);

  std::vector<std::thread> workers;
  std::vector<ServerSessionReport> reports(cfg.max_sessions);
  for (size_t s = 0; s < cfg.max_sessions; ++s) {
    std::unique_ptr<TcpTransport> t = listener.accept(cfg.timeout_seconds);
    t->set_timeout(cfg.timeout_seconds);
    workers.emplace_back(
        [t = std::move(t), &st, &acfg, &reports, s]() mutable {
          Connection conn(*t, 0);
          conn.adopt_session_from_peer();
          reports[s] = serve_adaptation(conn, st, acfg);
        });
  }
  for (std::thread& w : workers) w.join();

  int bad = 0;
  for (size_t s = 0; s < cfg.max_sessions; ++s) {
    if (reports[s].ok) {
      std::printf("session %zu: ok, %zu reps, %zu adaptation steps\n", s,
                  reports[s].reps_received, reports[s].adapt_steps);
    } else {
      std::fprintf(stderr, "session %zu: failed: %s\n", s,
                   reports[s].error.c_str());
      ++bad;
    }
  }
  return bad == 0 ? 0 : 1;
}

int cmd_client(const ExperimentConfig& cfg) {
  const Workspace ws{cfg.out_dir};
  const std::string run_id = sa_run_id(cfg);
  try {
    Dataset pool = read_dataset(ws.client_pool_path());
    Dataset test = read_dataset(ws.client_test_path());
    Rng rng(cfg.seed + 4);
    const ClientTask task =
        client_task(cfg, sample_few_shot(pool, cfg.shots, rng),
                    std::move(test));
    const experiment_detail::WallTimer timer;
    auto transport = TcpTransport::connect(cfg.host, cfg.port);
    transport->set_timeout(cfg.timeout_seconds);
    Connection conn(*transport, session_id_for(cfg));
    const ClientSessionReport report = run_client_session(conn, task);
    if (!report.ok) throw ProtocolError("session failed: " + report.error);
    ResultRow row;
    row.run_id = run_id;
    row.mode = sa_mode_name(cfg);
    row.shots = cfg.shots;
    row.seed = cfg.seed;
    row.accuracy = report.accuracy;
    row.wall_seconds = timer.seconds();
    write_run_record(cfg, row);
    print_row(row);
    return 0;
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    return fail_run(cfg, run_id, e);
  }
}

int cmd_run_local(const ExperimentConfig& cfg, const std::string& wiretap_path) {
  const Workspace ws{cfg.out_dir};
  const std::string run_id = sa_run_id(cfg);
  try {
    const ExperimentData data = load_data_or_explain(ws);
    ServerModel sm = load_model_or_explain(ws);
    const ServerState st =
        prepare_server_state(cfg, std::move(sm), data.server_train);
    Wiretap tap;
    const ResultRow row =
        run_sa(cfg, st, data, wiretap_path.empty() ? nullptr : &tap);
    const std::string dir = write_run_record(cfg, row);
    if (!wiretap_path.empty()) tap.save(wiretap_path);
    print_row(row);
    std::printf("run recorded in %s\n", dir.c_str());
    return 0;
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    return fail_run(cfg, run_id, e);
  }
}

int cmd_baseline(const ExperimentConfig& cfg, const std::string& mode) {
  const Workspace ws{cfg.out_dir};
  const std::string run_id =
      mode + "_s" + std::to_string(cfg.shots) + "_seed" +
      std::to_string(cfg.seed);
  try {
    const ExperimentData data = load_data_or_explain(ws);
    ServerModel sm = load_model_or_explain(ws);
    ResultRow row;
    if (mode == "lp") {
      row = run_linear_probe(cfg, sm, data);
    } else if (mode == "sl") {
      row = run_split_learning(cfg, sm, data);
    } else if (mode == "qfprobe") {
      // the probe never touches the backend, so skip its hardening
      ExperimentConfig probe_cfg = cfg;
      probe_cfg.ood_qat = false;
      const ServerState st =
          prepare_server_state(probe_cfg, std::move(sm), data.server_train);
      row = run_quant_frontend_probe(cfg, st, data);
    } else {
      throw ConfigError("baseline: unknown mode '" + mode +
                        "' (expected lp, sl, or qfprobe)");
    }
    write_run_record(cfg, row);
    print_row(row);
    return 0;
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    return fail_run(cfg, run_id, e);
  }
}

int cmd_attack(const ExperimentConfig& cfg, const std::string& dump_path) {
  const Workspace ws{cfg.out_dir};
  const std::string run_id = attack_run_id(cfg);
  try {
    const ExperimentData data = load_data_or_explain(ws);
    ServerModel sm = load_model_or_explain(ws);
    const ServerState st =
        prepare_server_state(cfg, std::move(sm), data.server_train);
    if (!dump_path.empty()) {
      // reconstruct captured uploads; no ground truth, images only
      InverseDecoder dec = fit_attack_decoder(cfg, st, data.server_train);
      const std::vector<Tensor> captured = reps_from_dump(dump_path, cfg.spec);
      const std::string dir = ws.run_dir(run_id);
      std::filesystem::create_directories(dir);
      const size_t dump = std::min(cfg.attack_dump_images, captured.size());
      for (size_t i = 0; i < dump; ++i)
        write_pgm(reconstruct_image(dec, captured[i]),
                  dir + "/captured_" + std::to_string(i) + ".pgm");
      std::printf("reconstructed %zu captured upload(s) into %s\n", dump,
                  dir.c_str());
      return 0;
    }
    const AttackArtifacts art = run_attack(cfg, st, data);
    const std::string dir = write_run_record(cfg, art.row, &art);
    print_row(art.row);
    std::printf("attack images in %s\n", dir.c_str());
    return 0;
  } catch (const ConfigError&) {
    throw;
  } catch (const Error& e) {
    return fail_run(cfg, run_id, e);
  }
}

int cmd_report(const ExperimentConfig& cfg) {
  const std::vector<ResultRow> rows = collect_results(cfg.out_dir);
  if (rows.empty()) {
    std::printf("no results under %s\n", cfg.out_dir.c_str());
    return 0;
  }
  const std::vector<ExperimentSummary> aggs = aggregate_results(rows);
  std::printf("%s", format_report(aggs).c_str());
  const std::string csv = format_report_csv(aggs);
  const std::string path = cfg.out_dir + "/report.csv";
  write_file_atomic(path, std::vector<uint8_t>(csv.begin(), csv.end()));
  std::printf("aggregate written to %s\n", path.c_str());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  ExperimentConfig cfg;
  try {
    const std::string config_path = find_config_path(argc, argv);
    if (!config_path.empty()) {
      const std::vector<uint8_t> bytes = read_file_bytes(config_path);
      apply_config(cfg, parse_config_text(
                            std::string(bytes.begin(), bytes.end())));
    }
    if (const char* env = std::getenv("SA_OUTPUT_DIR"); env && *env)
      cfg.out_dir = env;
  } catch (const Error& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  }

  CLI::App app{"split adaptation experiment driver"};
  app.require_subcommand(1);
  app.fallthrough();
  std::string config_path_opt;
  app.add_option("--config", config_path_opt,
                 "config file (key = value sections)");
  app.add_option("--out", cfg.out_dir, "output directory");
  app.add_option("--seed", cfg.seed, "run seed");
  app.add_option("--shots", cfg.shots, "few-shot examples per class");
  app.add_option("--transport", cfg.transport, "channel or tcp");
  app.add_option("--host", cfg.host, "server host");
  app.add_option("--port", cfg.port, "server port");
  app.add_option("--alpha", cfg.alpha, "frontend perturbation scale");
  app.add_option("--laplace-b", cfg.laplace_b, "code noise scale");
  app.add_option("--adapt-epochs", cfg.adapt_epochs, "adaptation epochs");
  app.add_option("--timeout", cfg.timeout_seconds, "protocol timeout seconds");
  app.add_flag_callback("--no-ht", [&cfg] { cfg.ht = false; },
                        "disable spectral merge of the calibration data");
  app.add_flag_callback("--no-ood-qat", [&cfg] { cfg.ood_qat = false; },
                        "disable backend hardening");
  app.add_flag_callback("--no-pr", [&cfg] { cfg.pr = false; },
                        "disable client-side representation augmentation");

  CLI::App* gen = app.add_subcommand("gen-data", "generate the datasets");
  CLI::App* pre = app.add_subcommand("pretrain", "pretrain the server model");
  CLI::App* serve = app.add_subcommand("serve", "serve adaptation sessions");
  serve->add_option("--max-sessions", cfg.max_sessions,
                    "sessions to accept (served concurrently)");
  CLI::App* client = app.add_subcommand("client", "run the client side");
  std::string wiretap_path;
  CLI::App* local = app.add_subcommand("run-local", "full session in-process");
  local->add_option("--wiretap", wiretap_path,
                    "record every frame to this file");
  std::string baseline_mode;
  CLI::App* base = app.add_subcommand("baseline", "run a comparison method");
  base->add_option("--mode", baseline_mode, "lp, sl, or qfprobe")
      ->required();
  std::string dump_path;
  CLI::App* attack = app.add_subcommand("attack", "reconstruction attack");
  attack->add_option("--from-dump", dump_path,
                     "reconstruct uploads captured in a wiretap dump");
  CLI::App* report = app.add_subcommand("report", "aggregate result rows");

  CLI11_PARSE(app, argc, argv);

  try {
    cfg.validate();
    if (gen->parsed()) return cmd_gen_data(cfg);
    if (pre->parsed()) return cmd_pretrain(cfg);
    if (serve->parsed()) return cmd_serve(cfg);
    if (client->parsed()) return cmd_client(cfg);
    if (local->parsed()) return cmd_run_local(cfg, wiretap_path);
    if (base->parsed()) return cmd_baseline(cfg, baseline_mode);
    if (attack->parsed()) return cmd_attack(cfg, dump_path);
    if (report->parsed()) return cmd_report(cfg);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "config error: %s\n", e.what());
    return 2;
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 0;
}
