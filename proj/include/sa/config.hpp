#pragma once

// Experiment configuration: a struct of every knob, a key=value section
// parser, and a canonical serializer. The serialized form is written into
// each run directory and parses back to an identical struct, so a run can
// be replayed from its own record.

#include <charconv>
#include <cstdint>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "sa/error.hpp"
#include "sa/vit.hpp"

namespace sa {

struct ExperimentConfig {
  ModelSpec spec;
  size_t split = 4;
  uint64_t model_seed = 7;

  // data
  std::vector<int> server_families = {0, 1, 2, 3, 5, 9};
  std::vector<int> client_families = {4, 6, 7, 8};
  size_t server_per_class = 200;
  size_t server_test_per_class = 50;
  size_t client_pool_per_class = 40;
  size_t client_test_per_class = 100;
  uint64_t data_seed = 100;

  // pretraining
  size_t pretrain_epochs = 30;
  double pretrain_lr = 1e-3;
  size_t pretrain_batch = 8;

  // quantization and backend hardening
  int bits = 8;
  size_t subsets = 3;
  size_t calib = 32;
  size_t qat_epochs = 1;
  double qat_lr = 1e-5;
  size_t qat_batch = 8;

  // client protections and augmentation
  double alpha = 0.01;
  double laplace_b = 0.8;
  size_t n_aug = 16;
  size_t n_p = 5;
  size_t shots = 5;

  // adaptation
  size_t adapt_epochs = 100;
  double adapt_lr = 1e-5;
  size_t adapt_batch = 16;

  // reconstruction attack
  size_t attack_epochs = 40;
  double attack_lr = 1e-3;
  size_t attack_batch = 8;
  size_t attack_train_count = 120;
  uint64_t attack_seed = 9;
  size_t attack_dump_images = 4;

  // pipeline stage toggles
  bool ht = true;
  bool ood_qat = true;
  bool pr = true;

  // run control
  uint64_t seed = 1;
  std::vector<uint64_t> seeds = {1, 42, 215};
  std::string transport = "channel";
  std::string host = "127.0.0.1";
  uint16_t port = 7441;
  std::string out_dir = "runs";
  double timeout_seconds = 30.0;
  size_t max_sessions = 1;

  void validate() const {
    spec.validate();
    if (!spec.valid_split(split))
      throw ConfigError(
          "[model] split: frontend must hold more than half the layers "
          "but not all of them");
    if (server_families.empty())
      throw ConfigError("[data] server_families: must not be empty");
    if (client_families.empty())
      throw ConfigError("[data] client_families: must not be empty");
    if (server_per_class < 1 || client_pool_per_class < 1 ||
        client_test_per_class < 1 || server_test_per_class < 1)
      throw ConfigError("[data] per-class counts: must be at least 1");
    if (pretrain_lr <= 0.0)
      throw ConfigError("[pretrain] lr: must be positive");
    if (pretrain_batch < 1)
      throw ConfigError("[pretrain] batch: must be at least 1");
    if (bits < 2 || bits > 8)
      throw ConfigError("[quant] bits: must be in [2, 8]");
    if (subsets < 1) throw ConfigError("[quant] subsets: must be at least 1");
    if (calib < 1) throw ConfigError("[quant] calib: must be at least 1");
    if (qat_lr <= 0.0) throw ConfigError("[quant] qat_lr: must be positive");
    if (qat_batch < 1)
      throw ConfigError("[quant] qat_batch: must be at least 1");
    if (alpha < 0.0) throw ConfigError("[client] alpha: must be >= 0");
    if (laplace_b < 0.0)
      throw ConfigError("[client] laplace_b: must be >= 0");
    if (n_p < 1) throw ConfigError("[client] n_p: must be at least 1");
    if (shots < 1) throw ConfigError("[client] shots: must be at least 1");
    if (adapt_lr <= 0.0) throw ConfigError("[adapt] lr: must be positive");
    if (adapt_batch < 1)
      throw ConfigError("[adapt] batch: must be at least 1");
    if (attack_lr <= 0.0) throw ConfigError("[attack] lr: must be positive");
    if (attack_batch < 1)
      throw ConfigError("[attack] batch: must be at least 1");
    if (attack_train_count < 1)
      throw ConfigError("[attack] train_count: must be at least 1");
    if (seeds.empty()) throw ConfigError("[run] seeds: must not be empty");
    if (transport != "channel" && transport != "tcp")
      throw ConfigError("[run] transport: must be channel or tcp");
    if (out_dir.empty()) throw ConfigError("[run] out_dir: must not be empty");
    if (timeout_seconds <= 0.0)
      throw ConfigError("[run] timeout_seconds: must be positive");
    if (max_sessions < 1)
      throw ConfigError("[run] max_sessions: must be at least 1");
  }
};

namespace config_detail {

inline std::string trim(const std::string& s) {
  size_t b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  size_t e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

inline uint64_t parse_u64(const std::string& s) {
  uint64_t v = 0;
  const char* b = s.data();
  const char* e = b + s.size();
  auto [p, ec] = std::from_chars(b, e, v);
  if (ec != std::errc() || p != e)
    throw ConfigError("expected an unsigned integer, got '" + s + "'");
  return v;
}

inline size_t parse_count(const std::string& s) {
  return static_cast<size_t>(parse_u64(s));
}

inline int parse_int(const std::string& s) {
  int v = 0;
  const char* b = s.data();
  const char* e = b + s.size();
  auto [p, ec] = std::from_chars(b, e, v);
  if (ec != std::errc() || p != e)
    throw ConfigError("expected an integer, got '" + s + "'");
  return v;
}

inline double parse_double(const std::string& s) {
  if (s.empty()) throw ConfigError("expected a number, got ''");
  char* end = nullptr;
  const double v = std::strtod(s.c_str(), &end);
  if (end != s.c_str() + s.size())
    throw ConfigError("expected a number, got '" + s + "'");
  return v;
}

inline bool parse_bool(const std::string& s) {
  if (s == "true" || s == "1") return true;
  if (s == "false" || s == "0") return false;
  throw ConfigError("expected true or false, got '" + s + "'");
}

template <typename T, typename Parse>
std::vector<T> parse_list(const std::string& s, Parse parse) {
  std::vector<T> out;
  std::string item;
  std::stringstream ss(s);
  while (std::getline(ss, item, ',')) {
    item = trim(item);
    if (item.empty()) throw ConfigError("empty list item in '" + s + "'");
    out.push_back(parse(item));
  }
  if (out.empty()) throw ConfigError("expected a non-empty list");
  return out;
}

template <typename T>
std::string join(const std::vector<T>& v) {
  std::string out;
  for (size_t i = 0; i < v.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(v[i]);
  }
  return out;
}

inline std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace config_detail

// Flat section.key -> value view of a config file. Duplicate keys and
// lines that are not blank, comment, [section], or key=value are rejected.
inline std::map<std::string, std::string> parse_config_text(
    const std::string& text) {
  using config_detail::trim;
  std::map<std::string, std::string> out;
  std::string section;
  std::stringstream ss(text);
  std::string raw;
  size_t lineno = 0;
  while (std::getline(ss, raw)) {
    ++lineno;
    const std::string line = trim(raw);
    if (line.empty() || line[0] == '#' || line[0] == ';') continue;
    if (line.front() == '[') {
      if (line.back() != ']' || line.size() < 3)
        throw ConfigError("config line " + std::to_string(lineno) +
                          ": malformed section header '" + line + "'");
      section = trim(line.substr(1, line.size() - 2));
      if (section.empty())
        throw ConfigError("config line " + std::to_string(lineno) +
                          ": empty section name");
      continue;
    }
    const size_t eq = line.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) +
                        ": expected key = value, got '" + line + "'");
    const std::string key = trim(line.substr(0, eq));
    const std::string value = trim(line.substr(eq + 1));
    if (key.empty())
      throw ConfigError("config line " + std::to_string(lineno) +
                        ": empty key");
    const std::string full = section.empty() ? key : section + "." + key;
    if (out.count(full))
      throw ConfigError("config line " + std::to_string(lineno) +
                        ": duplicate key " + full);
    out[full] = value;
  }
  return out;
}

// Applies parsed keys onto a config. Unknown keys are errors; parse
// failures carry the offending key.
inline void apply_config(ExperimentConfig& cfg,
                         const std::map<std::string, std::string>& kv) {
  using namespace config_detail;
  std::map<std::string, std::function<void(const std::string&)>> fields;
  auto u64f = [&](const char* k, uint64_t* p) {
    fields[k] = [p](const std::string& v) { *p = parse_u64(v); };
  };
  auto countf = [&](const char* k, size_t* p) {
    fields[k] = [p](const std::string& v) { *p = parse_count(v); };
  };
  auto dblf = [&](const char* k, double* p) {
    fields[k] = [p](const std::string& v) { *p = parse_double(v); };
  };
  auto boolf = [&](const char* k, bool* p) {
    fields[k] = [p](const std::string& v) { *p = parse_bool(v); };
  };
  auto strf = [&](const char* k, std::string* p) {
    fields[k] = [p](const std::string& v) { *p = v; };
  };

  countf("model.image_size", &cfg.spec.image_size);
  countf("model.channels", &cfg.spec.channels);
  countf("model.patch_size", &cfg.spec.patch_size);
  countf("model.embed_dim", &cfg.spec.embed_dim);
  countf("model.num_heads", &cfg.spec.num_heads);
  countf("model.mlp_hidden", &cfg.spec.mlp_hidden);
  countf("model.num_layers", &cfg.spec.num_layers);
  countf("model.split", &cfg.split);
  u64f("model.model_seed", &cfg.model_seed);

  fields["data.server_families"] = [&cfg](const std::string& v) {
    cfg.server_families = parse_list<int>(v, parse_int);
  };
  fields["data.client_families"] = [&cfg](const std::string& v) {
    cfg.client_families = parse_list<int>(v, parse_int);
  };
  countf("data.server_per_class", &cfg.server_per_class);
  countf("data.server_test_per_class", &cfg.server_test_per_class);
  countf("data.client_pool_per_class", &cfg.client_pool_per_class);
  countf("data.client_test_per_class", &cfg.client_test_per_class);
  u64f("data.data_seed", &cfg.data_seed);

  countf("pretrain.epochs", &cfg.pretrain_epochs);
  dblf("pretrain.lr", &cfg.pretrain_lr);
  countf("pretrain.batch", &cfg.pretrain_batch);

  fields["quant.bits"] = [&cfg](const std::string& v) {
    cfg.bits = parse_int(v);
  };
  countf("quant.subsets", &cfg.subsets);
  countf("quant.calib", &cfg.calib);
  countf("quant.qat_epochs", &cfg.qat_epochs);
  dblf("quant.qat_lr", &cfg.qat_lr);
  countf("quant.qat_batch", &cfg.qat_batch);

  dblf("client.alpha", &cfg.alpha);
  dblf("client.laplace_b", &cfg.laplace_b);
  countf("client.n_aug", &cfg.n_aug);
  countf("client.n_p", &cfg.n_p);
  countf("client.shots", &cfg.shots);

  countf("adapt.epochs", &cfg.adapt_epochs);
  dblf("adapt.lr", &cfg.adapt_lr);
  countf("adapt.batch", &cfg.adapt_batch);

  countf("attack.epochs", &cfg.attack_epochs);
  dblf("attack.lr", &cfg.attack_lr);
  countf("attack.batch", &cfg.attack_batch);
  countf("attack.train_count", &cfg.attack_train_count);
  u64f("attack.seed", &cfg.attack_seed);
  countf("attack.dump_images", &cfg.attack_dump_images);

  boolf("toggles.ht", &cfg.ht);
  boolf("toggles.ood_qat", &cfg.ood_qat);
  boolf("toggles.pr", &cfg.pr);

  u64f("run.seed", &cfg.seed);
  fields["run.seeds"] = [&cfg](const std::string& v) {
    cfg.seeds = parse_list<uint64_t>(v, parse_u64);
  };
  strf("run.transport", &cfg.transport);
  strf("run.host", &cfg.host);
  fields["run.port"] = [&cfg](const std::string& v) {
    const uint64_t p = parse_u64(v);
    if (p > 65535) throw ConfigError("port out of range");
    cfg.port = static_cast<uint16_t>(p);
  };
  strf("run.out_dir", &cfg.out_dir);
  dblf("run.timeout_seconds", &cfg.timeout_seconds);
  countf("run.max_sessions", &cfg.max_sessions);

  for (const auto& [key, value] : kv) {
    auto it = fields.find(key);
    if (it == fields.end())
      throw ConfigError("config: unknown key " + key);
    try {
      it->second(value);
    } catch (const ConfigError& e) {
      throw ConfigError("config: " + key + ": " + e.what());
    }
  }
}

inline ExperimentConfig config_from_text(const std::string& text) {
  ExperimentConfig cfg;
  apply_config(cfg, parse_config_text(text));
  return cfg;
}

// Canonical form: parses back to an identical struct, doubles at full
// precision.
inline std::string serialize_config(const ExperimentConfig& cfg) {
  using config_detail::fmt_double;
  using config_detail::join;
  std::string s;
  s += "[model]\n";
  s += "image_size = " + std::to_string(cfg.spec.image_size) + "\n";
  s += "channels = " + std::to_string(cfg.spec.channels) + "\n";
  s += "patch_size = " + std::to_string(cfg.spec.patch_size) + "\n";
  s += "embed_dim = " + std::to_string(cfg.spec.embed_dim) + "\n";
  s += "num_heads = " + std::to_string(cfg.spec.num_heads) + "\n";
  s += "mlp_hidden = " + std::to_string(cfg.spec.mlp_hidden) + "\n";
  s += "num_layers = " + std::to_string(cfg.spec.num_layers) + "\n";
  s += "split = " + std::to_string(cfg.split) + "\n";
  s += "model_seed = " + std::to_string(cfg.model_seed) + "\n";
  s += "\n[data]\n";
  s += "server_families = " + join(cfg.server_families) + "\n";
  s += "client_families = " + join(cfg.client_families) + "\n";
  s += "server_per_class = " + std::to_string(cfg.server_per_class) + "\n";
  s += "server_test_per_class = " + std::to_string(cfg.server_test_per_class) +
       "\n";
  s += "client_pool_per_class = " + std::to_string(cfg.client_pool_per_class) +
       "\n";
  s += "client_test_per_class = " + std::to_string(cfg.client_test_per_class) +
       "\n";
  s += "data_seed = " + std::to_string(cfg.data_seed) + "\n";
  s += "\n[pretrain]\n";
  s += "epochs = " + std::to_string(cfg.pretrain_epochs) + "\n";
  s += "lr = " + fmt_double(cfg.pretrain_lr) + "\n";
  s += "batch = " + std::to_string(cfg.pretrain_batch) + "\n";
  s += "\n[quant]\n";
  s += "bits = " + std::to_string(cfg.bits) + "\n";
  s += "subsets = " + std::to_string(cfg.subsets) + "\n";
  s += "calib = " + std::to_string(cfg.calib) + "\n";
  s += "qat_epochs = " + std::to_string(cfg.qat_epochs) + "\n";
  s += "qat_lr = " + fmt_double(cfg.qat_lr) + "\n";
  s += "qat_batch = " + std::to_string(cfg.qat_batch) + "\n";
  s += "\n[client]\n";
  s += "alpha = " + fmt_double(cfg.alpha) + "\n";
  s += "laplace_b = " + fmt_double(cfg.laplace_b) + "\n";
  s += "n_aug = " + std::to_string(cfg.n_aug) + "\n";
  s += "n_p = " + std::to_string(cfg.n_p) + "\n";
  s += "shots = " + std::to_string(cfg.shots) + "\n";
  s += "\n[adapt]\n";
  s += "epochs = " + std::to_string(cfg.adapt_epochs) + "\n";
  s += "lr = " + fmt_double(cfg.adapt_lr) + "\n";
  s += "batch = " + std::to_string(cfg.adapt_batch) + "\n";
  s += "\n[attack]\n";
  s += "epochs = " + std::to_string(cfg.attack_epochs) + "\n";
  s += "lr = " + fmt_double(cfg.attack_lr) + "\n";
  s += "batch = " + std::to_string(cfg.attack_batch) + "\n";
  s += "train_count = " + std::to_string(cfg.attack_train_count) + "\n";
  s += "seed = " + std::to_string(cfg.attack_seed) + "\n";
  s += "dump_images = " + std::to_string(cfg.attack_dump_images) + "\n";
  s += "\n[toggles]\n";
  s += std::string("ht = ") + (cfg.ht ? "true" : "false") + "\n";
  s += std::string("ood_qat = ") + (cfg.ood_qat ? "true" : "false") + "\n";
  s += std::string("pr = ") + (cfg.pr ? "true" : "false") + "\n";
  s += "\n[run]\n";
  s += "seed = " + std::to_string(cfg.seed) + "\n";
  s += "seeds = " + join(cfg.seeds) + "\n";
  s += "transport = " + cfg.transport + "\n";
  s += "host = " + cfg.host + "\n";
  s += "port = " + std::to_string(cfg.port) + "\n";
  s += "out_dir = " + cfg.out_dir + "\n";
  s += "timeout_seconds = " + fmt_double(cfg.timeout_seconds) + "\n";
  s += "max_sessions = " + std::to_string(cfg.max_sessions) + "\n";
  return s;
}

}  // namespace sa
