#include "e2ebt/config.hpp"

#include <charconv>
#include <cstdlib>
#include <fstream>
#include <functional>
#include <sstream>

namespace e2ebt {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <class T>
T parse_number(const std::string& key, const std::string& text) {
  T out{};
  const char* end = text.data() + text.size();
  const auto [ptr, ec] = std::from_chars(text.data(), end, out);
  if (ec != std::errc() || ptr != end) throw ConfigError("bad value for " + key + ": '" + text + "'");
  return out;
}

std::string format(double v) {
  std::ostringstream out;
  out.precision(17);
  out << v;
  return out.str();
}

struct Field {
  std::string key;
  std::function<void(RunConfig&, const std::string&)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <class T, class Access>
Field field(std::string key, Access access) {
  Field f;
  f.key = key;
  f.set = [key, access](RunConfig& c, const std::string& text) {
    T& slot = access(c);
    if constexpr (std::is_same_v<T, bool>) {
      if (text == "true" || text == "1") slot = true;
      else if (text == "false" || text == "0") slot = false;
      else throw ConfigError("bad value for " + key + ": '" + text + "' (expected true or false)");
    } else if constexpr (std::is_same_v<T, std::filesystem::path>) {
      slot = text;
    } else if constexpr (std::is_same_v<T, LatentMethod>) {
      if (text == "crt") slot = LatentMethod::crt;
      else if (text == "gst") slot = LatentMethod::gst;
      else throw ConfigError("bad value for " + key + ": '" + text + "' (expected crt or gst)");
    } else {
      slot = parse_number<T>(key, text);
    }
  };
  f.get = [access](const RunConfig& c) -> std::string {
    const T& slot = access(const_cast<RunConfig&>(c));
    if constexpr (std::is_same_v<T, bool>) return slot ? "true" : "false";
    else if constexpr (std::is_same_v<T, std::filesystem::path>) return slot.string();
    else if constexpr (std::is_same_v<T, LatentMethod>) return slot == LatentMethod::crt ? "crt" : "gst";
    else if constexpr (std::is_floating_point_v<T>) return format(slot);
    else return std::to_string(slot);
  };
  return f;
}

#define E2EBT_FIELD(type, key, expr) field<type>(key, [](RunConfig& c) -> type& { return c.expr; })

const std::vector<Field>& fields() {
  static const std::vector<Field> table = {
      E2EBT_FIELD(std::uint64_t, "seed", seed),
      E2EBT_FIELD(std::filesystem::path, "paths.data", paths.data),
      E2EBT_FIELD(std::filesystem::path, "paths.work", paths.work),
      E2EBT_FIELD(std::filesystem::path, "paths.metrics", paths.metrics),
      E2EBT_FIELD(int, "data.vocab_size", data.vocab_size),
      E2EBT_FIELD(std::uint64_t, "data.permutation_seed", data.permutation_seed),
      E2EBT_FIELD(int, "data.window", data.window),
      E2EBT_FIELD(int, "data.min_length", data.min_length),
      E2EBT_FIELD(int, "data.max_length", data.max_length),
      E2EBT_FIELD(int, "data.bilingual_pairs", data.bilingual_pairs),
      E2EBT_FIELD(int, "data.monolingual", data.monolingual),
      E2EBT_FIELD(int, "data.test_pairs", data.test_pairs),
      E2EBT_FIELD(int, "data.branching", data.branching),
      E2EBT_FIELD(int, "data.length_cap", length_cap),
      E2EBT_FIELD(int, "model.width", model.width),
      E2EBT_FIELD(int, "model.heads", model.heads),
      E2EBT_FIELD(int, "model.ffn", model.ffn),
      E2EBT_FIELD(int, "model.encoder_layers", model.encoder_layers),
      E2EBT_FIELD(int, "model.decoder_layers", model.decoder_layers),
      E2EBT_FIELD(double, "model.dropout", model.dropout),
      E2EBT_FIELD(int, "model.max_positions", model.max_positions),
      E2EBT_FIELD(int, "lm.width", lm.width),
      E2EBT_FIELD(int, "lm.heads", lm.heads),
      E2EBT_FIELD(int, "lm.ffn", lm.ffn),
      E2EBT_FIELD(int, "lm.layers", lm.decoder_layers),
      E2EBT_FIELD(double, "lm.dropout", lm.dropout),
      E2EBT_FIELD(int, "lm.max_positions", lm.max_positions),
      E2EBT_FIELD(long, "pretrain.iters", pretrain.iters),
      E2EBT_FIELD(int, "pretrain.batch", pretrain.batch),
      E2EBT_FIELD(double, "pretrain.lr", pretrain.lr),
      E2EBT_FIELD(int, "pretrain.warmup_iters", pretrain.warmup_iters),
      E2EBT_FIELD(long, "lm_pretrain.iters", lm_pretrain.iters),
      E2EBT_FIELD(int, "lm_pretrain.batch", lm_pretrain.batch),
      E2EBT_FIELD(double, "lm_pretrain.lr", lm_pretrain.lr),
      E2EBT_FIELD(int, "lm_pretrain.warmup_iters", lm_pretrain.warmup_iters),
      E2EBT_FIELD(double, "bt.lambda_x", bt.lambda_x),
      E2EBT_FIELD(double, "bt.lambda_y", bt.lambda_y),
      E2EBT_FIELD(double, "bt.alpha_x", bt.alpha_x),
      E2EBT_FIELD(double, "bt.alpha_y", bt.alpha_y),
      E2EBT_FIELD(int, "bt.feg_interval", bt.feg_interval),
      E2EBT_FIELD(double, "bt.as_start_ratio", bt.as_start_ratio),
      E2EBT_FIELD(double, "bt.as_end_ratio", bt.as_end_ratio),
      E2EBT_FIELD(long, "bt.as_total_iters", bt.as_total_iters),
      E2EBT_FIELD(double, "bt.cache_load_prob", bt.cache_load_prob),
      E2EBT_FIELD(int, "bt.batch_bilingual", bt.batch_bilingual),
      E2EBT_FIELD(int, "bt.batch_monolingual", bt.batch_monolingual),
      E2EBT_FIELD(double, "bt.lr", bt.lr),
      E2EBT_FIELD(int, "bt.warmup_iters", bt.warmup_iters),
      E2EBT_FIELD(double, "bt.adam_beta1", bt.adam.beta1),
      E2EBT_FIELD(double, "bt.adam_beta2", bt.adam.beta2),
      E2EBT_FIELD(double, "bt.adam_eps", bt.adam.eps),
      E2EBT_FIELD(long, "bt.max_iters", bt.max_iters),
      E2EBT_FIELD(bool, "bt.share_embeddings", bt.share_embeddings),
      E2EBT_FIELD(LatentMethod, "bt.latent_method", bt.latent_method),
      E2EBT_FIELD(double, "bt.gst_tau", bt.gst_tau),
      E2EBT_FIELD(long, "bt.log_interval", log_interval),
      E2EBT_FIELD(long, "bt.checkpoint_interval", checkpoint_interval),
      E2EBT_FIELD(int, "eval.beam", beam),
  };
  return table;
}

#undef E2EBT_FIELD

const Field& find_field(const std::string& key) {
  for (const Field& f : fields())
    if (f.key == key) return f;
  throw ConfigError("unknown config key '" + key + "'");
}

}  // namespace

RunConfig::RunConfig() {
  bt.as_total_iters = 0;
  lm.encoder_layers = 0;
}

void RunConfig::set(const std::string& key, const std::string& value) { find_field(key).set(*this, value); }

std::string RunConfig::get(const std::string& key) const { return find_field(key).get(*this); }

const std::vector<std::string>& RunConfig::keys() {
  static const std::vector<std::string> names = [] {
    std::vector<std::string> out;
    for (const Field& f : fields()) out.push_back(f.key);
    return out;
  }();
  return names;
}

void RunConfig::apply_text(const std::string& text, const std::string& origin) {
  std::istringstream in(text);
  std::string line;
  int number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.erase(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(origin + ":" + std::to_string(number) + ": expected key = value");
    try {
      set(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    } catch (const ConfigError& e) {
      throw ConfigError(origin + ":" + std::to_string(number) + ": " + e.what());
    }
  }
}

void RunConfig::apply_file(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config " + path.string());
  std::ostringstream text;
  text << in.rdbuf();
  apply_text(text.str(), path.string());
}

std::string RunConfig::to_text() const {
  std::string out;
  for (const Field& f : fields()) out += f.key + " = " + f.get(*this) + "\n";
  return out;
}

BTConfig RunConfig::resolved_bt() const {
  BTConfig c = bt;
  c.seed = seed;
  if (c.as_total_iters == 0) c.as_total_iters = c.max_iters;
  c.validate();
  return c;
}

PretrainConfig RunConfig::resolved_pretrain() const {
  PretrainConfig c = pretrain;
  c.seed = seed;
  return c;
}

PretrainConfig RunConfig::resolved_lm_pretrain() const {
  PretrainConfig c = lm_pretrain;
  c.seed = seed;
  return c;
}

RunConfig load_run_config(const std::optional<std::filesystem::path>& file, const std::vector<std::string>& overrides) {
  RunConfig config;
  if (const char* env = std::getenv("E2EBT_SEED"); env && *env) {
    try {
      config.set("seed", env);
    } catch (const ConfigError&) {
      throw ConfigError(std::string("bad E2EBT_SEED: '") + env + "'");
    }
  }
  if (file) config.apply_file(*file);
  for (const std::string& o : overrides) {
    const auto eq = o.find('=');
    if (eq == std::string::npos) throw ConfigError("override '" + o + "' is not key=value");
    config.set(trim(o.substr(0, eq)), trim(o.substr(eq + 1)));
  }
  return config;
}

}  // namespace e2ebt
