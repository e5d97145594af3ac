#include "cast/run_config.hpp"

#include "cast/kv.hpp"
#include "cast/rng.hpp"

#include <fstream>
#include <map>
#include <sstream>

namespace cast {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
  std::vector<std::string> out;
  std::stringstream in(s);
  std::string item;
  while (std::getline(in, item, ','))
    if (!trim(item).empty()) out.push_back(trim(item));
  return out;
}

std::string join(const std::vector<std::string>& items) {
  std::string s;
  for (const auto& i : items) s += (s.empty() ? "" : ",") + i;
  return s;
}

}  // namespace

void RunConfig::set(const std::string& key, const std::string& value) {
  const auto dot = key.find('.');
  if (dot == std::string::npos) throw ConfigError("key '" + key + "' needs a section prefix (model., train., data., run.)");
  const std::string section = key.substr(0, dot), name = key.substr(dot + 1);
  if (section == "model") {
    model.set(name, value);
    explicit_model_keys.insert(name);
  } else if (section == "train") {
    train.set(name, value);
  } else if (section == "data") {
    data.set(name, value);
  } else if (section == "run") {
    if (name == "data") data_path = value;
    else if (name == "checkpoint") checkpoint_path = value;
    else if (name == "out") out = value;
    else if (name == "views") views = parse_views(value);
    else if (name == "variants") variants = split_list(value);
    else if (name == "seeds") {
      seeds.clear();
      for (const auto& s : split_list(value)) seeds.push_back(parse_u64(key, s));
    } else throw ConfigError("unknown key '" + key + "'");
  } else {
    throw ConfigError("unknown section in key '" + key + "'");
  }
}

void RunConfig::sync_model_from_data() {
  auto keep = [&](const char* k) { return explicit_model_keys.count(k) > 0; };
  if (!keep("frames")) model.frames = data.frames;
  if (!keep("height")) model.height = data.height;
  if (!keep("width")) model.width = data.width;
  if (!keep("channels")) model.channels = data.channels;
  if (!keep("appearance_classes")) model.appearance_classes = data.appearance_classes;
  if (!keep("motion_classes")) model.motion_classes = data.motion_classes;
  if (!keep("num_classes")) model.num_classes = data.appearance_classes * data.motion_classes;
}

void RunConfig::validate() const {
  model.validate();
  train.validate();
  data.validate();
  if (seeds.empty()) throw ConfigError("run.seeds must list at least one seed");
  for (const auto& v : variants) apply_variant(model, v);
}

std::vector<std::pair<std::string, std::string>> RunConfig::to_kv() const {
  std::vector<std::pair<std::string, std::string>> kv;
  for (const auto& [k, v] : model.to_kv()) kv.emplace_back("model." + k, v);
  for (const auto& [k, v] : train.to_kv()) kv.emplace_back("train." + k, v);
  for (const auto& [k, v] : data.to_kv()) kv.emplace_back("data." + k, v);
  std::vector<std::string> seed_text;
  for (auto s : seeds) seed_text.push_back(std::to_string(s));
  kv.emplace_back("run.checkpoint", checkpoint_path);
  kv.emplace_back("run.data", data_path);
  kv.emplace_back("run.out", out);
  kv.emplace_back("run.seeds", join(seed_text));
  kv.emplace_back("run.variants", join(variants));
  kv.emplace_back("run.views", std::to_string(views.temporal) + "x" + std::to_string(views.spatial));
  return kv;
}

std::uint64_t RunConfig::hash() const {
  std::map<std::string, std::string> sorted;
  for (const auto& [k, v] : to_kv())
    if (k.rfind("run.", 0) != 0) sorted[k] = v;  // paths do not change results
  std::string text;
  for (const auto& [k, v] : sorted) text += k + "=" + v + "\n";
  return fnv1a(text);
}

std::string RunConfig::to_text() const {
  std::string s;
  for (const auto& [k, v] : to_kv()) s += k + " = " + v + "\n";
  return s;
}

RunConfig parse_run_config(const std::string& text, const std::vector<std::string>& overrides) {
  struct Entry {
    std::string key, value, where;
  };
  std::vector<Entry> entries;
  std::map<std::string, int> seen;
  auto take = [&](const std::string& raw, const std::string& where) {
    std::string line = raw.substr(0, raw.find('#'));
    line = trim(line);
    if (line.empty()) return;
    const auto eq = line.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected key = value, got '" + line + "'");
    entries.push_back({trim(line.substr(0, eq)), trim(line.substr(eq + 1)), where});
  };
  std::stringstream in(text);
  std::string line;
  int n = 0;
  while (std::getline(in, line)) {
    ++n;
    const auto before = entries.size();
    take(line, "line " + std::to_string(n));
    if (entries.size() > before && seen.count(entries.back().key))
      throw ConfigError("line " + std::to_string(n) + ": key '" + entries.back().key + "' repeated");
    if (entries.size() > before) seen[entries.back().key] = n;
  }
  // Overrides replace file entries with the same key.
  for (const auto& o : overrides) {
    std::vector<Entry> one;
    std::swap(one, entries);
    take(o, "override '" + o + "'");
    std::swap(one, entries);
    if (one.empty()) continue;
    std::erase_if(entries, [&](const Entry& e) { return e.key == one.front().key; });
    entries.push_back(one.front());
  }
  RunConfig rc;
  auto apply = [&](const Entry& e) {
    try {
      rc.set(e.key, e.value);
    } catch (const ConfigError& err) {
      throw ConfigError(e.where + ": " + err.what());
    }
  };
  for (const auto& e : entries)
    if (e.key == "model.variant") apply(e);
  for (const auto& e : entries)
    if (e.key != "model.variant") apply(e);
  rc.sync_model_from_data();
  rc.validate();
  return rc;
}

RunConfig load_run_config(const std::string& path, const std::vector<std::string>& overrides) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read config '" + path + "'");
  std::stringstream buf;
  buf << in.rdbuf();
  return parse_run_config(buf.str(), overrides);
}

}  // namespace cast
