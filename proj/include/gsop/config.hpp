#pragma once

// Run configuration files.
//
// Grammar (line oriented, UTF-8):
//
//   file     := { line '\n' }
//   line     := blank | comment | section | entry
//   comment  := '#' any*                  ('#' also ends any other line)
//   section  := '[' name ']'              name in {network, train, data, output}
//   entry    := key '=' value             key := [a-z0-9_]+, unique within its section
//   value    := scalar | '[' [ scalar { ',' scalar } ] ']'
//   scalar   := text without ',' '[' ']' '#', surrounding whitespace trimmed
//
// Scalars are unsigned integers, decimal floats, true/false, enum names,
// paths, HxW sizes ("16x16") or epoch:multiplier pairs ("30:0.1"). Every
// entry must belong to a section, and unknown sections or keys are errors.
// A `preset` key in [network] or [train] is applied first; the remaining
// keys of that section override fields of the preset.
//
// [network]  preset name classes input stem_kernel stem_stride stem_channels
//            stem_max_pool stage_bottlenecks stage_inner stage_stride stage_gsop
//            stage_gsop_every preact downsample_last_stage gsop_reduced position
//            fusion head head_gsop isqrt_reduced isqrt_iterations isqrt_epsilon
//            isqrt_prenorm isqrt_sqrt2_offdiag dropout
// [train]    preset(default|imagenet|cifar) lr_initial lr_schedule momentum
//            weight_decay batch_size epochs seed checkpoint_every eval_every
//            prefetch flip crop mean std
// [data]     source(synth|cifar10|cifar100|raw) dir classes per_class size seed
//            rho offset noise smoothness grating val_count train_limit
// [output]   dir
//
// serialize_config writes every field explicitly, so its output reproduces a
// run without depending on preset definitions.

#include <charconv>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "gsop/backbone.hpp"
#include "gsop/data.hpp"
#include "gsop/trainer.hpp"

namespace gsop {

struct DataConfig {
  std::string source = "synth";
  std::filesystem::path dir;
  std::size_t classes = 2;
  std::size_t per_class = 500;
  std::size_t size = 16;
  std::uint64_t seed = 0;
  SynthOptions synth;
  std::size_t val_count = 200;    // synthetic data: images held out for validation
  std::size_t train_limit = 0;    // 0: use every training image

  void validate() const {
    if (source != "synth" && source != "cifar10" && source != "cifar100" && source != "raw")
      throw ConfigError("data.source must be synth, cifar10, cifar100 or raw (got '" + source + "')");
    if (source != "synth" && dir.empty()) throw ConfigError("data.dir is required for source " + source);
    if (source == "synth" && val_count >= classes * per_class)
      throw ConfigError("data.val_count must be smaller than classes * per_class");
  }
};

struct RunConfig {
  NetworkSpec network;
  TrainConfig train;
  DataConfig data;
  std::filesystem::path out_dir;
};

namespace detail {

struct ConfigEntry {
  std::string value;
  std::size_t line = 0;
};

using ConfigSections = std::map<std::string, std::map<std::string, ConfigEntry>>;

inline std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  return s.substr(b, s.find_last_not_of(" \t\r") - b + 1);
}

inline ConfigSections parse_sections(const std::string& text, const std::string& origin) {
  static const std::set<std::string> known{"network", "train", "data", "output"};
  ConfigSections out;
  std::istringstream in(text);
  std::string raw, section;
  std::size_t line = 0;
  while (std::getline(in, raw)) {
    ++line;
    const std::string where = origin + ":" + std::to_string(line) + ": ";
    std::string s = trim(raw.substr(0, raw.find('#')));
    if (s.empty()) continue;
    if (s.front() == '[' && s.back() == ']' && s.find('=') == std::string::npos) {
      section = trim(s.substr(1, s.size() - 2));
      if (!known.count(section)) throw ConfigError(where + "unknown section [" + section + "]");
      out[section];
      continue;
    }
    const auto eq = s.find('=');
    if (eq == std::string::npos) throw ConfigError(where + "expected 'key = value'");
    if (section.empty()) throw ConfigError(where + "entry outside of a section");
    const std::string key = trim(s.substr(0, eq));
    if (key.empty() || key.find_first_not_of("abcdefghijklmnopqrstuvwxyz0123456789_") != std::string::npos)
      throw ConfigError(where + "invalid key '" + key + "'");
    auto& sec = out[section];
    if (sec.count(key)) throw ConfigError(where + "duplicate key '" + key + "' in [" + section + "]");
    sec[key] = {trim(s.substr(eq + 1)), line};
  }
  return out;
}

/// Typed access to one section; remembers which keys were consumed.
class SectionReader {
 public:
  SectionReader(const ConfigSections& all, std::string name, std::string origin)
      : name_(std::move(name)), origin_(std::move(origin)) {
    if (auto it = all.find(name_); it != all.end()) entries_ = &it->second;
  }

  bool has(const std::string& key) const { return entries_ && entries_->count(key); }

  const std::string* raw(const std::string& key) {
    if (!has(key)) return nullptr;
    used_.insert(key);
    return &entries_->at(key).value;
  }

  [[noreturn]] void fail(const std::string& key, const std::string& msg) const {
    const std::size_t line = has(key) ? entries_->at(key).line : 0;
    throw ConfigError(origin_ + ":" + std::to_string(line) + ": " + name_ + "." + key + ": " + msg);
  }

  template <class Fn>
  void scalar(const std::string& key, Fn&& apply) {
    if (const std::string* v = raw(key)) {
      try {
        apply(*v);
      } catch (const ConfigError& e) {
        fail(key, e.what());
      }
    }
  }

  template <class Fn>
  void list(const std::string& key, Fn&& apply) {
    if (const std::string* v = raw(key)) {
      try {
        apply(parse_list(*v));
      } catch (const ConfigError& e) {
        fail(key, e.what());
      }
    }
  }

  void size(const std::string& key, std::size_t& out) {
    scalar(key, [&](const std::string& v) { out = parse_size(v); });
  }
  void u64(const std::string& key, std::uint64_t& out) {
    scalar(key, [&](const std::string& v) { out = parse_u64(v); });
  }
  void real(const std::string& key, double& out) {
    scalar(key, [&](const std::string& v) { out = parse_double(v); });
  }
  void boolean(const std::string& key, bool& out) {
    scalar(key, [&](const std::string& v) { out = parse_bool(v); });
  }
  void text(const std::string& key, std::string& out) {
    scalar(key, [&](const std::string& v) { out = v; });
  }

  void finish() const {
    if (!entries_) return;
    for (const auto& [k, e] : *entries_)
      if (!used_.count(k))
        throw ConfigError(origin_ + ":" + std::to_string(e.line) + ": unknown key '" + k + "' in [" + name_ + "]");
  }

  static std::uint64_t parse_u64(const std::string& v) {
    std::uint64_t x = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
    if (ec != std::errc() || p != v.data() + v.size() || v.empty())
      throw ConfigError("expected an unsigned integer, got '" + v + "'");
    return x;
  }
  static std::size_t parse_size(const std::string& v) { return static_cast<std::size_t>(parse_u64(v)); }
  static double parse_double(const std::string& v) {
    double x = 0;
    auto [p, ec] = std::from_chars(v.data(), v.data() + v.size(), x);
    if (ec != std::errc() || p != v.data() + v.size() || v.empty())
      throw ConfigError("expected a number, got '" + v + "'");
    return x;
  }
  static bool parse_bool(const std::string& v) {
    if (v == "true") return true;
    if (v == "false") return false;
    throw ConfigError("expected true or false, got '" + v + "'");
  }
  static std::pair<std::size_t, std::size_t> parse_hw(const std::string& v) {
    const auto x = v.find('x');
    if (x == std::string::npos) throw ConfigError("expected HxW, got '" + v + "'");
    return {parse_size(v.substr(0, x)), parse_size(v.substr(x + 1))};
  }
  static std::vector<std::string> parse_list(const std::string& v) {
    if (v.size() < 2 || v.front() != '[' || v.back() != ']') throw ConfigError("expected a [list], got '" + v + "'");
    std::vector<std::string> out;
    const std::string body = trim(v.substr(1, v.size() - 2));
    if (body.empty()) return out;
    std::size_t start = 0;
    while (true) {
      const auto comma = body.find(',', start);
      std::string item = trim(body.substr(start, comma == std::string::npos ? std::string::npos : comma - start));
      if (item.empty() || item.find_first_of("[]") != std::string::npos)
        throw ConfigError("malformed list '" + v + "'");
      out.push_back(item);
      if (comma == std::string::npos) break;
      start = comma + 1;
    }
    return out;
  }

 private:
  const std::map<std::string, ConfigEntry>* entries_ = nullptr;
  std::set<std::string> used_;
  std::string name_, origin_;
};

inline std::string format_double(double v) {
  char buf[64];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

inline std::string format_float(float v) {
  char buf[32];
  auto [p, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, p);
}

inline std::array<float, 3> parse_triple(const std::vector<std::string>& items) {
  if (items.size() != 3) throw ConfigError("expected 3 values");
  std::array<float, 3> out{};
  for (std::size_t i = 0; i < 3; ++i) out[i] = static_cast<float>(SectionReader::parse_double(items[i]));
  return out;
}

template <class T, class Fn>
std::string join(const std::vector<T>& v, Fn&& f) {
  std::string s = "[";
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? ", " : "") + f(v[i]);
  return s + "]";
}

inline void read_network(SectionReader& r, NetworkSpec& spec) {
  r.scalar("preset", [&](const std::string& v) { spec = preset(v); });
  r.text("name", spec.name);
  r.size("classes", spec.classes);
  r.scalar("input", [&](const std::string& v) { std::tie(spec.input_h, spec.input_w) = SectionReader::parse_hw(v); });
  r.size("stem_kernel", spec.stem.kernel);
  r.size("stem_stride", spec.stem.stride);
  r.size("stem_channels", spec.stem.channels);
  r.boolean("stem_max_pool", spec.stem.max_pool);
  r.list("stage_bottlenecks", [&](const std::vector<std::string>& items) {
    spec.stages.resize(items.size());
    for (std::size_t i = 0; i < items.size(); ++i) spec.stages[i].bottlenecks = SectionReader::parse_size(items[i]);
  });
  auto per_stage = [&](const std::string& key, auto&& set) {
    r.list(key, [&](const std::vector<std::string>& items) {
      if (items.size() != spec.stages.size())
        throw ConfigError("expected " + std::to_string(spec.stages.size()) + " entries (one per stage)");
      for (std::size_t i = 0; i < items.size(); ++i) set(spec.stages[i], items[i]);
    });
  };
  per_stage("stage_inner", [](StageSpec& s, const std::string& v) { s.inner = SectionReader::parse_size(v); });
  per_stage("stage_stride", [](StageSpec& s, const std::string& v) { s.stride = SectionReader::parse_size(v); });
  per_stage("stage_gsop", [](StageSpec& s, const std::string& v) { s.gsop = parse_gsop_kind(v); });
  per_stage("stage_gsop_every", [](StageSpec& s, const std::string& v) { s.gsop_every = SectionReader::parse_size(v); });
  r.boolean("preact", spec.preact);
  r.boolean("downsample_last_stage", spec.downsample_last_stage);
  r.size("gsop_reduced", spec.gsop_reduced);
  r.scalar("position", [&](const std::string& v) {
    std::tie(spec.position_h, spec.position_w) = SectionReader::parse_hw(v);
  });
  r.scalar("fusion", [&](const std::string& v) { spec.fusion = parse_fusion_mode(v); });
  r.scalar("head", [&](const std::string& v) { spec.head = parse_head_kind(v); });
  r.scalar("head_gsop", [&](const std::string& v) { spec.head_gsop = parse_gsop_kind(v); });
  r.size("isqrt_reduced", spec.isqrt.c_reduced);
  r.size("isqrt_iterations", spec.isqrt.iterations);
  r.real("isqrt_epsilon", spec.isqrt.epsilon);
  r.scalar("isqrt_prenorm", [&](const std::string& v) { spec.isqrt.prenorm = parse_prenorm(v); });
  r.boolean("isqrt_sqrt2_offdiag", spec.isqrt.sqrt2_offdiag);
  r.real("dropout", spec.dropout);
  r.finish();
}

inline void read_train(SectionReader& r, TrainConfig& c) {
  r.scalar("preset", [&](const std::string& v) {
    if (v == "imagenet") c = imagenet_train_config();
    else if (v == "cifar") c = cifar_train_config();
    else if (v == "default") c = TrainConfig{};
    else throw ConfigError("unknown train preset '" + v + "' (expected default, imagenet or cifar)");
  });
  r.real("lr_initial", c.lr_initial);
  r.list("lr_schedule", [&](const std::vector<std::string>& items) {
    c.lr_schedule.clear();
    for (const auto& it : items) {
      const auto colon = it.find(':');
      if (colon == std::string::npos) throw ConfigError("expected epoch:multiplier, got '" + it + "'");
      c.lr_schedule.push_back({SectionReader::parse_size(trim(it.substr(0, colon))),
                               SectionReader::parse_double(trim(it.substr(colon + 1)))});
    }
  });
  r.real("momentum", c.momentum);
  r.real("weight_decay", c.weight_decay);
  r.size("batch_size", c.batch_size);
  r.size("epochs", c.epochs);
  r.u64("seed", c.seed);
  r.size("checkpoint_every", c.checkpoint_every);
  r.size("eval_every", c.eval_every);
  r.size("prefetch", c.prefetch);
  r.real("flip", c.train_policy.horizontal_flip);
  r.size("crop", c.train_policy.random_crop);
  r.list("mean", [&](const std::vector<std::string>& items) {
    c.train_policy.mean = c.eval_policy.mean = parse_triple(items);
  });
  r.list("std", [&](const std::vector<std::string>& items) {
    if (items.empty()) {
      c.train_policy.stddev.reset();
    } else {
      c.train_policy.stddev = parse_triple(items);
    }
    c.eval_policy.stddev = c.train_policy.stddev;
  });
  r.finish();
}

inline void read_data(SectionReader& r, DataConfig& d) {
  r.text("source", d.source);
  r.scalar("dir", [&](const std::string& v) { d.dir = v; });
  r.size("classes", d.classes);
  r.size("per_class", d.per_class);
  r.size("size", d.size);
  r.u64("seed", d.seed);
  r.real("rho", d.synth.rho);
  r.real("offset", d.synth.offset);
  r.real("noise", d.synth.noise);
  r.real("smoothness", d.synth.smoothness);
  r.real("grating", d.synth.grating);
  r.size("val_count", d.val_count);
  r.size("train_limit", d.train_limit);
  r.finish();
}

}  // namespace detail

inline RunConfig parse_config(const std::string& text, const std::string& origin = "config") {
  const auto sections = detail::parse_sections(text, origin);
  RunConfig rc;
  detail::SectionReader net(sections, "network", origin), tr(sections, "train", origin),
      data(sections, "data", origin), out(sections, "output", origin);
  detail::read_network(net, rc.network);
  detail::read_train(tr, rc.train);
  detail::read_data(data, rc.data);
  out.scalar("dir", [&](const std::string& v) { rc.out_dir = v; });
  out.finish();
  rc.network.validate();
  rc.train.validate();
  rc.data.validate();
  return rc;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot read config file " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str(), path.string());
}

/// Complete, preset-independent text form; parse_config(serialize_config(c)) == c.
inline std::string serialize_config(const RunConfig& c) {
  using detail::format_double;
  using detail::join;
  const auto& n = c.network;
  auto sz = [](std::size_t v) { return std::to_string(v); };
  auto b = [](bool v) { return std::string(v ? "true" : "false"); };
  std::ostringstream o;
  o << "[network]\n";
  o << "name = " << n.name << "\n";
  o << "classes = " << n.classes << "\n";
  o << "input = " << n.input_h << "x" << n.input_w << "\n";
  o << "stem_kernel = " << n.stem.kernel << "\n";
  o << "stem_stride = " << n.stem.stride << "\n";
  o << "stem_channels = " << n.stem.channels << "\n";
  o << "stem_max_pool = " << b(n.stem.max_pool) << "\n";
  o << "stage_bottlenecks = " << join(n.stages, [&](const StageSpec& s) { return sz(s.bottlenecks); }) << "\n";
  o << "stage_inner = " << join(n.stages, [&](const StageSpec& s) { return sz(s.inner); }) << "\n";
  o << "stage_stride = " << join(n.stages, [&](const StageSpec& s) { return sz(s.stride); }) << "\n";
  o << "stage_gsop = " << join(n.stages, [](const StageSpec& s) { return std::string(to_string(s.gsop)); }) << "\n";
  o << "stage_gsop_every = " << join(n.stages, [&](const StageSpec& s) { return sz(s.gsop_every); }) << "\n";
  o << "preact = " << b(n.preact) << "\n";
  o << "downsample_last_stage = " << b(n.downsample_last_stage) << "\n";
  o << "gsop_reduced = " << n.gsop_reduced << "\n";
  o << "position = " << n.position_h << "x" << n.position_w << "\n";
  o << "fusion = " << to_string(n.fusion) << "\n";
  o << "head = " << to_string(n.head) << "\n";
  o << "head_gsop = " << to_string(n.head_gsop) << "\n";
  o << "isqrt_reduced = " << n.isqrt.c_reduced << "\n";
  o << "isqrt_iterations = " << n.isqrt.iterations << "\n";
  o << "isqrt_epsilon = " << format_double(n.isqrt.epsilon) << "\n";
  o << "isqrt_prenorm = " << to_string(n.isqrt.prenorm) << "\n";
  o << "isqrt_sqrt2_offdiag = " << b(n.isqrt.sqrt2_offdiag) << "\n";
  o << "dropout = " << format_double(n.dropout) << "\n";

  const auto& t = c.train;
  o << "\n[train]\n";
  o << "lr_initial = " << format_double(t.lr_initial) << "\n";
  o << "lr_schedule = "
    << join(t.lr_schedule, [](const LrStep& s) { return std::to_string(s.epoch) + ":" + format_double(s.multiplier); })
    << "\n";
  o << "momentum = " << format_double(t.momentum) << "\n";
  o << "weight_decay = " << format_double(t.weight_decay) << "\n";
  o << "batch_size = " << t.batch_size << "\n";
  o << "epochs = " << t.epochs << "\n";
  o << "seed = " << t.seed << "\n";
  o << "checkpoint_every = " << t.checkpoint_every << "\n";
  o << "eval_every = " << t.eval_every << "\n";
  o << "prefetch = " << t.prefetch << "\n";
  o << "flip = " << format_double(t.train_policy.horizontal_flip) << "\n";
  o << "crop = " << t.train_policy.random_crop << "\n";
  auto triple = [](const std::array<float, 3>& a) {
    return join(std::vector<float>(a.begin(), a.end()), [](float v) { return detail::format_float(v); });
  };
  o << "mean = " << triple(t.train_policy.mean) << "\n";
  o << "std = " << (t.train_policy.stddev ? triple(*t.train_policy.stddev) : "[]") << "\n";

  const auto& d = c.data;
  o << "\n[data]\n";
  o << "source = " << d.source << "\n";
  if (!d.dir.empty()) o << "dir = " << d.dir.string() << "\n";
  o << "classes = " << d.classes << "\n";
  o << "per_class = " << d.per_class << "\n";
  o << "size = " << d.size << "\n";
  o << "seed = " << d.seed << "\n";
  o << "rho = " << format_double(d.synth.rho) << "\n";
  o << "offset = " << format_double(d.synth.offset) << "\n";
  o << "noise = " << format_double(d.synth.noise) << "\n";
  o << "smoothness = " << format_double(d.synth.smoothness) << "\n";
  o << "grating = " << format_double(d.synth.grating) << "\n";
  o << "val_count = " << d.val_count << "\n";
  o << "train_limit = " << d.train_limit << "\n";
  if (!c.out_dir.empty()) o << "\n[output]\ndir = " << c.out_dir.string() << "\n";
  return o.str();
}

/// Training and validation sets described by a data section.
inline std::pair<Dataset, Dataset> load_data(const DataConfig& d) {
  d.validate();
  if (!d.dir.empty() && !std::filesystem::is_directory(d.dir))
    throw IngestionError("data directory " + d.dir.string() + " does not exist");
  std::pair<Dataset, Dataset> out;
  if (d.source == "synth") {
    auto all = synth_dataset(d.classes, d.per_class, d.size, d.seed, d.synth);
    out = all.split_at(all.size() - d.val_count);
    out.second.split = Split::val;
  } else if (d.source == "raw") {
    out.first = read_raw(d.dir / "train.raw");
    out.second = read_raw(d.dir / "val.raw", out.first.class_count);
    out.second.split = Split::val;
  } else {
    out = load_cifar(d.dir, d.source == "cifar10" ? CifarVariant::cifar10 : CifarVariant::cifar100);
  }
  if (d.train_limit > 0 && d.train_limit < out.first.size()) {
    std::vector<std::size_t> idx(d.train_limit);
    std::iota(idx.begin(), idx.end(), std::size_t{0});
    out.first = out.first.subset(idx);
  }
  return out;
}

}  // namespace gsop
