#include "mtfuse/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <sstream>

#include "mtfuse/errors.hpp"

namespace mtfuse {

std::vector<TaskId> ModelConfig::active_tasks() const {
  std::vector<TaskId> out;
  for (auto t : kAllTasks)
    if (!ablation.drop_tasks[index(t)]) out.push_back(t);
  return out;
}

std::vector<Modality> ModelConfig::active_modalities() const {
  std::vector<Modality> out;
  for (auto m : kAllModalities)
    if (!ablation.drop_modalities[index(m)]) out.push_back(m);
  return out;
}

void ModelConfig::validate() const {
  auto positive = [](std::size_t v, const char* key) {
    if (v == 0) throw ConfigError(std::string(key) + ": must be positive");
  };
  positive(frame_count, "frame_count");
  positive(channels, "channels");
  positive(height, "height");
  positive(width, "width");
  positive(state_dim, "state_dim");
  positive(depth, "depth");
  positive(joint_count, "joint_count");
  positive(stem_kernel, "stem_kernel");
  positive(global_pool, "global_pool");
  positive(batch_size, "batch_size");
  if (channels % frame_count != 0) {
    throw ConfigError("channels: constraint C % T == 0 violated (channels=" + std::to_string(channels) +
                      ", frame_count=" + std::to_string(frame_count) + ")");
  }
  if (channels / frame_count < 3) {
    throw ConfigError("channels: channels/frame_count must be at least 3 (one channel per view per frame)");
  }
  if (view_height < stem_kernel || view_width < stem_kernel) {
    throw ConfigError("view_height: views must be at least stem_kernel pixels on each side");
  }
  if (view_height - stem_kernel + 1 < height || view_width - stem_kernel + 1 < width) {
    throw ConfigError("height: stem output grid larger than the convolved view");
  }
  for (auto t : kAllTasks) {
    if (num_classes[index(t)] < 2) {
      throw ConfigError("classes_" + std::string(task_name(t)) + ": need at least 2 classes");
    }
  }
  if (active_tasks().empty()) throw ConfigError("drop_tasks: every task is dropped");
  if (active_modalities().empty()) throw ConfigError("drop_modalities: every modality is dropped");
  for (auto [v, key] : {std::pair{split_train, "split_train"}, {split_test, "split_test"}, {split_val, "split_val"}}) {
    if (v < 0.0 || v > 1.0) throw ConfigError(std::string(key) + ": must lie in [0, 1]");
  }
  if (std::abs(split_train + split_test + split_val - 1.0) > 1e-9) {
    throw ConfigError("split_train: split fractions must sum to 1");
  }
  if (!(momentum >= 0.0) || !(weight_decay >= 0.0)) throw ConfigError("momentum: must be non-negative");
}

ModelConfig toy_config() {
  ModelConfig c;
  c.frame_count = 4;
  c.channels = 16;
  c.height = 4;
  c.width = 4;
  c.state_dim = 4;
  c.depth = 2;
  c.joint_count = 8;
  c.view_height = 10;
  c.view_width = 10;
  c.global_pool = 2;
  c.batch_size = 8;
  c.schedule.base = 0.05;
  c.schedule.mid = 0.025;
  c.schedule.late = 0.0025;
  return c;
}

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r\n");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r\n");
  return std::string(s.substr(b, e - b + 1));
}

std::size_t to_size(const std::string& key, const std::string& v) {
  std::size_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) {
    throw ConfigError(key + ": expected a non-negative integer, got '" + v + "'");
  }
  return out;
}

std::uint64_t to_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || p != v.data() + v.size()) {
    throw ConfigError(key + ": expected an unsigned integer, got '" + v + "'");
  }
  return out;
}

double to_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double d = std::stod(v, &used);
    if (used != v.size() || !std::isfinite(d)) throw std::invalid_argument(v);
    return d;
  } catch (const std::exception&) {
    throw ConfigError(key + ": expected a number, got '" + v + "'");
  }
}

bool to_bool(const std::string& key, const std::string& v) {
  if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
  if (v == "0" || v == "false" || v == "no" || v == "off") return false;
  throw ConfigError(key + ": expected a boolean, got '" + v + "'");
}

std::vector<std::string> split_list(const std::string& v) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : v) {
    if (ch == ',' || ch == '+' || ch == ' ') {
      if (!cur.empty()) out.push_back(cur);
      cur.clear();
    } else {
      cur += ch;
    }
  }
  if (!cur.empty()) out.push_back(cur);
  if (out.size() == 1 && out[0] == "none") out.clear();
  return out;
}

using Setter = std::function<void(ModelConfig&, const std::string& key, const std::string& value)>;

const std::map<std::string, Setter>& setters() {
  static const std::map<std::string, Setter> table = [] {
    std::map<std::string, Setter> t;
    auto size_field = [&t](const char* key, std::size_t ModelConfig::*field) {
      t[key] = [field](ModelConfig& c, const std::string& k, const std::string& v) { c.*field = to_size(k, v); };
    };
    auto double_field = [&t](const char* key, double ModelConfig::*field) {
      t[key] = [field](ModelConfig& c, const std::string& k, const std::string& v) { c.*field = to_double(k, v); };
    };
    auto flag_field = [&t](const char* key, bool AblationFlags::*field) {
      t[key] = [field](ModelConfig& c, const std::string& k, const std::string& v) {
        c.ablation.*field = to_bool(k, v);
      };
    };
    size_field("frame_count", &ModelConfig::frame_count);
    size_field("channels", &ModelConfig::channels);
    size_field("height", &ModelConfig::height);
    size_field("width", &ModelConfig::width);
    size_field("state_dim", &ModelConfig::state_dim);
    size_field("depth", &ModelConfig::depth);
    size_field("joint_count", &ModelConfig::joint_count);
    size_field("view_height", &ModelConfig::view_height);
    size_field("view_width", &ModelConfig::view_width);
    size_field("stem_kernel", &ModelConfig::stem_kernel);
    size_field("global_pool", &ModelConfig::global_pool);
    size_field("batch_size", &ModelConfig::batch_size);
    double_field("gamma_init", &ModelConfig::gamma_init);
    double_field("momentum", &ModelConfig::momentum);
    double_field("weight_decay", &ModelConfig::weight_decay);
    double_field("split_train", &ModelConfig::split_train);
    double_field("split_test", &ModelConfig::split_test);
    double_field("split_val", &ModelConfig::split_val);
    for (auto task : kAllTasks) {
      t["classes_" + std::string(task_name(task))] = [task](ModelConfig& c, const std::string& k,
                                                             const std::string& v) {
        c.num_classes[index(task)] = to_size(k, v);
      };
    }
    flag_field("no_mgmi", &AblationFlags::no_mgmi);
    flag_field("no_dual_scan", &AblationFlags::no_dual_scan);
    flag_field("no_global_local", &AblationFlags::no_global_local);
    flag_field("no_self_attention", &AblationFlags::no_self_attention);
    flag_field("no_multi_gating", &AblationFlags::no_multi_gating);
    t["drop_tasks"] = [](ModelConfig& c, const std::string& k, const std::string& v) {
      c.ablation.drop_tasks.fill(false);
      for (const auto& name : split_list(v)) {
        TaskId id;
        if (!parse_task(name, id)) throw ConfigError(k + ": unknown task '" + name + "'");
        c.ablation.drop_tasks[index(id)] = true;
      }
    };
    t["drop_modalities"] = [](ModelConfig& c, const std::string& k, const std::string& v) {
      c.ablation.drop_modalities.fill(false);
      for (const auto& name : split_list(v)) {
        Modality m;
        if (!parse_modality(name, m)) throw ConfigError(k + ": unknown modality '" + name + "'");
        c.ablation.drop_modalities[index(m)] = true;
      }
    };
    t["lr"] = [](ModelConfig& c, const std::string& k, const std::string& v) { c.schedule.base = to_double(k, v); };
    t["lr_mid"] = [](ModelConfig& c, const std::string& k, const std::string& v) { c.schedule.mid = to_double(k, v); };
    t["lr_late"] = [](ModelConfig& c, const std::string& k, const std::string& v) {
      c.schedule.late = to_double(k, v);
    };
    t["lr_mid_epoch"] = [](ModelConfig& c, const std::string& k, const std::string& v) {
      c.schedule.mid_epoch = to_size(k, v);
    };
    t["lr_late_epoch"] = [](ModelConfig& c, const std::string& k, const std::string& v) {
      c.schedule.late_epoch = to_size(k, v);
    };
    t["seed"] = [](ModelConfig& c, const std::string& k, const std::string& v) { c.seed = to_u64(k, v); };
    return t;
  }();
  return table;
}

std::string format_double(double v) {
  std::ostringstream os;
  os << std::setprecision(17) << v;
  return os.str();
}

}  // namespace

ModelConfig apply_overrides(ModelConfig base, std::string_view text) {
  std::vector<std::pair<std::string, std::string>> entries;
  std::istringstream lines{std::string(text)};
  std::string line;
  while (std::getline(lines, line)) {
    if (auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    std::istringstream tokens(line);
    std::string token;
    while (std::getline(tokens, token, ',')) {
      token = trim(token);
      if (token.empty()) continue;
      const auto eq = token.find('=');
      if (eq == std::string::npos) {
        if (entries.empty()) throw ConfigError("malformed entry '" + token + "' (expected key=value)");
        entries.back().second += "," + token;
        continue;
      }
      std::string key = trim(std::string_view(token).substr(0, eq));
      if (key.empty()) throw ConfigError("malformed entry '" + token + "' (empty key)");
      entries.emplace_back(std::move(key), trim(std::string_view(token).substr(eq + 1)));
    }
  }
  const auto& table = setters();
  for (const auto& [key, value] : entries) {
    auto it = table.find(key);
    if (it == table.end()) throw ConfigError(key + ": unknown key");
    it->second(base, key, value);
  }
  base.validate();
  return base;
}

ModelConfig parse_config(std::string_view text) { return apply_overrides(ModelConfig{}, text); }

std::string to_text(const ModelConfig& c) {
  std::ostringstream os;
  os << "frame_count=" << c.frame_count << '\n'
     << "channels=" << c.channels << '\n'
     << "height=" << c.height << '\n'
     << "width=" << c.width << '\n'
     << "state_dim=" << c.state_dim << '\n'
     << "depth=" << c.depth << '\n'
     << "joint_count=" << c.joint_count << '\n'
     << "view_height=" << c.view_height << '\n'
     << "view_width=" << c.view_width << '\n'
     << "stem_kernel=" << c.stem_kernel << '\n'
     << "global_pool=" << c.global_pool << '\n'
     << "gamma_init=" << format_double(c.gamma_init) << '\n';
  for (auto t : kAllTasks) os << "classes_" << task_name(t) << '=' << c.num_classes[index(t)] << '\n';
  os << "no_mgmi=" << c.ablation.no_mgmi << '\n'
     << "no_dual_scan=" << c.ablation.no_dual_scan << '\n'
     << "no_global_local=" << c.ablation.no_global_local << '\n'
     << "no_self_attention=" << c.ablation.no_self_attention << '\n'
     << "no_multi_gating=" << c.ablation.no_multi_gating << '\n';
  os << "drop_tasks=";
  bool any = false;
  for (auto t : kAllTasks) {
    if (!c.ablation.drop_tasks[index(t)]) continue;
    os << (any ? "+" : "") << task_name(t);
    any = true;
  }
  os << (any ? "" : "none") << '\n' << "drop_modalities=";
  any = false;
  for (auto m : kAllModalities) {
    if (!c.ablation.drop_modalities[index(m)]) continue;
    os << (any ? "+" : "") << modality_name(m);
    any = true;
  }
  os << (any ? "" : "none") << '\n'
     << "lr=" << format_double(c.schedule.base) << '\n'
     << "lr_mid=" << format_double(c.schedule.mid) << '\n'
     << "lr_late=" << format_double(c.schedule.late) << '\n'
     << "lr_mid_epoch=" << c.schedule.mid_epoch << '\n'
     << "lr_late_epoch=" << c.schedule.late_epoch << '\n'
     << "momentum=" << format_double(c.momentum) << '\n'
     << "weight_decay=" << format_double(c.weight_decay) << '\n'
     << "batch_size=" << c.batch_size << '\n'
     << "split_train=" << format_double(c.split_train) << '\n'
     << "split_test=" << format_double(c.split_test) << '\n'
     << "split_val=" << format_double(c.split_val) << '\n'
     << "seed=" << c.seed << '\n';
  return os.str();
}

ModelConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file " + path.string());
  std::stringstream ss;
  ss << is.rdbuf();
  return parse_config(ss.str());
}

std::string config_hash(const ModelConfig& config) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char ch : to_text(config)) {
    h ^= ch;
    h *= 1099511628211ULL;
  }
  std::ostringstream os;
  os << std::hex << std::setw(16) << std::setfill('0') << h;
  return os.str();
}

}  // namespace mtfuse
