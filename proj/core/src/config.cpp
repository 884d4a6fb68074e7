// SPDX-License-Identifier: Apache-2.0
#include "csn/config.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <sstream>

namespace csn {

const std::vector<ConfigKey>& config_keys() {
  static const std::vector<ConfigKey> keys = {
      {"seed", "1", "run seed; --seed and CSN_SEED override it"},

      {"model.arch", "adaffn", "adaffn | adacnn | adaresnet | adalstm | lstm_adaffn"},
      {"model.classes", "auto", "output classes; auto = episode.ways"},
      {"model.input_dim", "auto", "vector input width; auto = data.gaussian.dim"},
      {"model.image_size", "auto", "image side; auto = data.omniglot.image_size"},
      {"model.vocab", "auto", "token vocabulary; auto = data.cloze.vocab"},
      {"model.seq_len", "auto", "sequence length S; auto = data.cloze.length"},
      {"model.embed_dim", "32", "token embedding width"},
      {"model.hidden", "auto",
       "dense hidden widths before the output, comma separated or 'none'; auto = 64,64 for "
       "adaffn, 64 for adaresnet and lstm_adaffn, none otherwise"},
      {"model.activation", "auto", "dense hidden activation tanh | relu; auto = tanh, relu for image models"},
      {"model.filters", "32", "adacnn filters per conv layer"},
      {"model.conv_layers", "5", "adacnn conv layers (3x3, relu, 2x2 max-pool)"},
      {"model.res_filters", "64,96,128,256", "adaresnet block filters before the divisor"},
      {"model.res_divisor", "4", "adaresnet filter divisor for desk runs"},
      {"model.lstm_layers", "1", "stacked LSTM layers"},
      {"model.lstm_hidden", "64", "LSTM hidden size"},
      {"model.csn_layers", "auto",
       "layers, counted from the output, that carry CSNs, or 'all'; auto = 4 for image models, all otherwise"},
      {"model.dropout", "0", "inverted dropout rate on hidden outputs during training"},
      {"model.shifts", "true", "false builds the shift-disabled control (memory unused)"},

      {"cond.mode", "grad", "conditioning information: grad | df"},
      {"cond.p", "7", "gradient preprocessing constant p"},
      {"cond.stop_grad", "true",
       "treat conditioning information as a constant; false is supported for df only"},

      {"memory.attention", "soft", "soft | hard"},
      {"memory.value", "mlp3", "value function: mlp3 | scalar_lambda | perceptron1"},
      {"memory.value_hidden", "20", "mlp3 hidden width (20 or 40)"},
      {"memory.key_dim", "64", "key size d"},
      {"memory.key_hidden", "64", "hidden width of the vector key MLP"},

      {"ablation.shift_mode", "normalized", "hidden shift: normalized | raw_additive | pre_activation"},
      {"ablation.resblock_shift_granularity", "channel", "conv/residual shifts per channel | unit"},

      {"data.source", "gaussian", "gaussian | cloze | omniglot"},
      {"data.seed", "7", "seed of the task distribution (prototypes, templates, class split)"},
      {"data.train_classes", "30", "classes in the training split (before rotations)"},
      {"data.val_classes", "10", "classes in the validation split"},
      {"data.test_classes", "10", "classes in the test split"},
      {"data.gaussian.dim", "16", "prototype dimension D"},
      {"data.gaussian.noise", "0.1", "isotropic noise scale"},
      {"data.cloze.vocab", "64", "token vocabulary (id 0 is the blank)"},
      {"data.cloze.length", "8", "sentence length S"},
      {"data.cloze.noise", "0.2", "probability a context token is replaced at random"},
      {"data.omniglot.dir", "", "directory holding manifest.csv"},
      {"data.omniglot.image_size", "14", "images are bilinearly resized to this side"},
      {"data.omniglot.rotations", "true", "add 90/180/270 degree rotated training classes"},

      {"episode.ways", "5", "classes per episode C"},
      {"episode.shots", "1", "description examples per class k"},
      {"episode.queries", "auto", "queries per episode; auto = 15 per class, 1 for cloze"},

      {"train.episodes", "5000", "training episode budget"},
      {"train.optimizer", "adam", "adam | sgd (momentum)"},
      {"train.lr", "0.001", "learning rate"},
      {"train.momentum", "0.9", "sgd momentum"},
      {"train.clip", "auto", "gradient clip threshold or 'none'; auto = 10 for adacnn, none otherwise"},
      {"train.clip_kind", "norm", "norm (global) | value"},
      {"train.val_interval", "400", "episodes between validations"},
      {"train.val_episodes", "400", "validation episodes"},

      {"eval.episodes", "400", "test episodes"},
  };
  return keys;
}

const std::vector<std::string>& model_key_prefixes() {
  static const std::vector<std::string> p = {"model.", "cond.", "memory.", "ablation."};
  return p;
}

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

}  // namespace

Config::Config() {
  for (const auto& k : config_keys()) values_[k.name] = k.default_value;
}

Config Config::parse(std::string_view text, const std::string& origin) {
  Config c;
  std::size_t line_no = 0;
  std::size_t pos = 0;
  while (pos <= text.size()) {
    const auto nl = text.find('\n', pos);
    std::string_view line = text.substr(pos, nl == std::string_view::npos ? std::string_view::npos : nl - pos);
    pos = nl == std::string_view::npos ? text.size() + 1 : nl + 1;
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string_view::npos) line = line.substr(0, hash);
    const std::string body = trim(line);
    if (body.empty()) continue;
    const auto eq = body.find('=');
    if (eq == std::string::npos) {
      throw ConfigError(origin + ":" + std::to_string(line_no) + ": expected 'key = value'");
    }
    const std::string key = trim(std::string_view(body).substr(0, eq));
    const std::string value = trim(std::string_view(body).substr(eq + 1));
    try {
      c.set(key, value);
    } catch (const ConfigError& e) {
      throw ConfigError(origin + ":" + std::to_string(line_no) + ": " + e.what());
    }
  }
  return c;
}

Config Config::load(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse(ss.str(), path.string());
}

void Config::set(const std::string& key, const std::string& value) {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
  it->second = value;
  explicit_[key] = true;
}

const std::string& Config::get(const std::string& key) const {
  auto it = values_.find(key);
  if (it == values_.end()) throw ConfigError("unknown config key '" + key + "'");
  return it->second;
}

bool Config::is_default(const std::string& key) const { return !explicit_.contains(key); }

double Config::get_double(const std::string& key) const {
  const std::string& s = get(key);
  try {
    std::size_t used = 0;
    const double v = std::stod(s, &used);
    if (used == s.size()) return v;
  } catch (const std::exception&) {
  }
  throw ConfigError("config key '" + key + "': expected a number, got '" + s + "'");
}

std::int64_t Config::get_int(const std::string& key) const {
  const std::string& s = get(key);
  std::int64_t v = 0;
  const auto [end, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || end != s.data() + s.size()) {
    throw ConfigError("config key '" + key + "': expected an integer, got '" + s + "'");
  }
  return v;
}

std::size_t Config::get_size(const std::string& key) const {
  const auto v = get_int(key);
  if (v < 0) throw ConfigError("config key '" + key + "': must be non-negative");
  return std::size_t(v);
}

bool Config::get_bool(const std::string& key) const {
  const std::string& s = get(key);
  if (s == "true" || s == "on" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "off" || s == "0" || s == "no") return false;
  throw ConfigError("config key '" + key + "': expected true|false, got '" + s + "'");
}

std::vector<std::size_t> Config::get_sizes(const std::string& key) const {
  const std::string& s = get(key);
  std::vector<std::size_t> out;
  if (s == "none" || s.empty()) return out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    const std::string t = trim(item);
    std::size_t v = 0;
    const auto [end, ec] = std::from_chars(t.data(), t.data() + t.size(), v);
    if (ec != std::errc() || end != t.data() + t.size() || v == 0) {
      throw ConfigError("config key '" + key + "': expected positive integers, got '" + s + "'");
    }
    out.push_back(v);
  }
  return out;
}

std::string Config::to_text(const std::vector<std::string>& prefixes) const {
  std::string out;
  for (const auto& k : config_keys()) {
    const bool wanted =
        prefixes.empty() || std::any_of(prefixes.begin(), prefixes.end(), [&](const auto& p) {
          return k.name.starts_with(p);
        });
    if (wanted) out += k.name + " = " + get(k.name) + "\n";
  }
  return out;
}

Config resolve(const Config& config) {
  Config c = config;
  const std::string arch = c.get("model.arch");
  const bool image = arch == "adacnn" || arch == "adaresnet";
  auto fill = [&](const std::string& key, const std::string& value) {
    if (c.get(key) == "auto") {
      const bool was_default = c.is_default(key);
      c.set(key, value);
      if (was_default) c.explicit_.erase(key);
    }
  };
  fill("model.classes", c.get("episode.ways"));
  fill("model.input_dim", c.get("data.gaussian.dim"));
  fill("model.image_size", c.get("data.omniglot.image_size"));
  fill("model.vocab", c.get("data.cloze.vocab"));
  fill("model.seq_len", c.get("data.cloze.length"));
  fill("model.hidden", arch == "adaffn"                              ? "64,64"
                       : arch == "adaresnet" || arch == "lstm_adaffn" ? "64"
                                                                      : "none");
  fill("model.activation", image ? "relu" : "tanh");
  fill("model.csn_layers", image ? "4" : "all");
  fill("episode.queries",
       c.get("data.source") == "cloze" ? "1" : std::to_string(15 * c.get_size("episode.ways")));
  fill("train.clip", arch == "adacnn" ? "10" : "none");
  return c;
}

}  // namespace csn
