#include "clp/pipeline.hpp"

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>
#include <charconv>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <ostream>
#include <sstream>

#include <json.hpp>

#include "clp/binio.hpp"
#include "clp/errors.hpp"

namespace clp::run {

namespace fs = std::filesystem;

namespace {

// ---- value codecs -----------------------------------------------------------

std::string trim(std::string s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return "";
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

template <class T>
T parse_number(const std::string& key, const std::string& raw) {
  const std::string s = trim(raw);
  T v{};
  const auto [p, ec] = std::from_chars(s.data(), s.data() + s.size(), v);
  if (ec != std::errc() || p != s.data() + s.size() || s.empty()) {
    throw ConfigError(key + ": cannot parse '" + raw + "' as a number");
  }
  return v;
}

bool parse_bool(const std::string& key, const std::string& raw) {
  const std::string s = trim(raw);
  if (s == "true" || s == "1" || s == "yes") return true;
  if (s == "false" || s == "0" || s == "no") return false;
  throw ConfigError(key + ": expected true or false, got '" + raw + "'");
}

std::vector<std::size_t> parse_list(const std::string& key, const std::string& raw) {
  std::vector<std::size_t> out;
  std::stringstream ss(raw);
  std::string item;
  while (std::getline(ss, item, ',')) {
    if (trim(item).empty()) continue;
    out.push_back(parse_number<std::size_t>(key, item));
  }
  return out;
}

std::string fmt(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, r.ptr);
}

std::string fmt_list(const std::vector<std::size_t>& v) {
  std::string s;
  for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
  return s;
}

std::string to_string(AugmentMode m) {
  switch (m) {
    case AugmentMode::Both: return "both";
    case AugmentMode::Counterfactual: return "cf";
    case AugmentMode::Factual: return "f";
    case AugmentMode::None: return "none";
  }
  return "?";
}

AugmentMode parse_augment_mode(const std::string& key, const std::string& s) {
  if (s == "both") return AugmentMode::Both;
  if (s == "cf") return AugmentMode::Counterfactual;
  if (s == "f") return AugmentMode::Factual;
  if (s == "none") return AugmentMode::None;
  throw ConfigError(key + ": expected both, cf, f or none, got '" + s + "'");
}

// ---- key table --------------------------------------------------------------

struct Field {
  std::function<void(RunConfig&, const std::string& key, const std::string& raw)> set;
  std::function<std::string(const RunConfig&)> get;
};

template <class T>
Field number_field(std::function<T&(RunConfig&)> ref) {
  return {[ref](RunConfig& c, const std::string& k, const std::string& v) { ref(c) = parse_number<T>(k, v); },
          [ref](const RunConfig& c) {
            if constexpr (std::is_floating_point_v<T>) {
              return fmt(ref(const_cast<RunConfig&>(c)));
            } else {
              return std::to_string(ref(const_cast<RunConfig&>(c)));
            }
          }};
}

Field bool_field(std::function<bool&(RunConfig&)> ref) {
  return {[ref](RunConfig& c, const std::string& k, const std::string& v) { ref(c) = parse_bool(k, v); },
          [ref](const RunConfig& c) { return std::string(ref(const_cast<RunConfig&>(c)) ? "true" : "false"); }};
}

Field string_field(std::function<std::string&(RunConfig&)> ref) {
  return {[ref](RunConfig& c, const std::string&, const std::string& v) { ref(c) = trim(v); },
          [ref](const RunConfig& c) { return ref(const_cast<RunConfig&>(c)); }};
}

Field list_field(std::function<std::vector<std::size_t>&(RunConfig&)> ref) {
  return {[ref](RunConfig& c, const std::string& k, const std::string& v) { ref(c) = parse_list(k, v); },
          [ref](const RunConfig& c) { return fmt_list(ref(const_cast<RunConfig&>(c))); }};
}

const std::vector<std::pair<std::string, Field>>& fields() {
  using S = std::size_t;
  using U = std::uint64_t;
  static const std::vector<std::pair<std::string, Field>> table = {
      {"run.name", string_field([](RunConfig& c) -> std::string& { return c.run_name; })},
      {"run.output_dir", string_field([](RunConfig& c) -> std::string& { return c.output_dir; })},

      {"data.classes", number_field<S>([](RunConfig& c) -> S& { return c.data.train.classes; })},
      {"data.backgrounds", number_field<S>([](RunConfig& c) -> S& { return c.data.train.backgrounds; })},
      {"data.height", number_field<S>([](RunConfig& c) -> S& { return c.data.train.height; })},
      {"data.width", number_field<S>([](RunConfig& c) -> S& { return c.data.train.width; })},
      {"data.n_per_class", number_field<S>([](RunConfig& c) -> S& { return c.data.train.n_per_class; })},
      {"data.spuriousness", number_field<double>([](RunConfig& c) -> double& { return c.data.train.spuriousness; })},
      {"data.seed", number_field<U>([](RunConfig& c) -> U& { return c.data.train.seed; })},
      {"data.test_per_cell", number_field<S>([](RunConfig& c) -> S& { return c.data.test_per_cell; })},
      {"data.test_seed", number_field<U>([](RunConfig& c) -> U& { return c.data.test_seed; })},
      {"data.meta_per_class", number_field<S>([](RunConfig& c) -> S& { return c.data.meta_per_class; })},
      {"data.meta_seed", number_field<U>([](RunConfig& c) -> U& { return c.data.meta_seed; })},
      {"data.longtail_ratio", number_field<double>([](RunConfig& c) -> double& { return c.data.longtail_ratio; })},
      {"data.noise",
       {[](RunConfig& c, const std::string&, const std::string& v) { c.data.noise = data::parse_noise_kind(trim(v)); },
        [](const RunConfig& c) { return data::to_string(c.data.noise); }}},
      {"data.noise_ratio", number_field<double>([](RunConfig& c) -> double& { return c.data.noise_ratio; })},
      {"data.noise_seed", number_field<U>([](RunConfig& c) -> U& { return c.data.noise_seed; })},

      {"augment.mode",
       {[](RunConfig& c, const std::string& k, const std::string& v) { c.augment.mode = parse_augment_mode(k, trim(v)); },
        [](const RunConfig& c) { return to_string(c.augment.mode); }}},
      {"augment.cf_method",
       {[](RunConfig& c, const std::string&, const std::string& v) { c.augment.plan.cf_method = aug::parse_method(trim(v)); },
        [](const RunConfig& c) { return aug::to_string(c.augment.plan.cf_method); }}},
      {"augment.f_method",
       {[](RunConfig& c, const std::string&, const std::string& v) { c.augment.plan.f_method = aug::parse_method(trim(v)); },
        [](const RunConfig& c) { return aug::to_string(c.augment.plan.f_method); }}},
      {"augment.epsilon", number_field<double>([](RunConfig& c) -> double& { return c.augment.plan.epsilon; })},
      {"augment.fgsm_target",
       {[](RunConfig& c, const std::string&, const std::string& v) {
          c.augment.plan.fgsm_target = aug::parse_fgsm_target(trim(v));
        },
        [](const RunConfig& c) { return aug::to_string(c.augment.plan.fgsm_target); }}},
      {"augment.seed", number_field<U>([](RunConfig& c) -> U& { return c.augment.plan.seed; })},

      {"model.hidden_widths", list_field([](RunConfig& c) -> std::vector<S>& { return c.model.hidden_widths; })},
      {"model.pnet_hidden", number_field<S>([](RunConfig& c) -> S& { return c.model.pnet_hidden; })},
      {"model.init_seed", number_field<U>([](RunConfig& c) -> U& { return c.model.init_seed; })},

      {"train.eta1", number_field<double>([](RunConfig& c) -> double& { return c.train.eta1; })},
      {"train.eta2", number_field<double>([](RunConfig& c) -> double& { return c.train.eta2; })},
      {"train.batch_n", number_field<S>([](RunConfig& c) -> S& { return c.train.batch_n; })},
      {"train.batch_m", number_field<S>([](RunConfig& c) -> S& { return c.train.batch_m; })},
      {"train.iters", number_field<S>([](RunConfig& c) -> S& { return c.train.iters; })},
      {"train.lambda", number_field<double>([](RunConfig& c) -> double& { return c.train.lambda; })},
      {"train.momentum", number_field<double>([](RunConfig& c) -> double& { return c.train.momentum; })},
      {"train.weight_decay", number_field<double>([](RunConfig& c) -> double& { return c.train.weight_decay; })},
      {"train.detach_saliency", bool_field([](RunConfig& c) -> bool& { return c.train.detach_saliency; })},
      {"train.train_saliency", bool_field([](RunConfig& c) -> bool& { return c.train.train_saliency; })},
      {"train.erm_saliency", bool_field([](RunConfig& c) -> bool& { return c.erm_saliency; })},
      {"train.seed", number_field<U>([](RunConfig& c) -> U& { return c.train.seed; })},

      {"eval.saliency_indices", list_field([](RunConfig& c) -> std::vector<S>& { return c.eval.saliency_indices; })},
  };
  return table;
}

void validate(const RunConfig& c) {
  for (auto w : c.model.hidden_widths) {
    if (w == 0) throw ConfigError("[model] hidden_widths: widths must be positive");
  }
  if (c.model.pnet_hidden == 0) throw ConfigError("[model] pnet_hidden must be positive");
  if (c.data.longtail_ratio < 1.0) throw ConfigError("[data] longtail_ratio must be >= 1");
  if (c.data.meta_per_class == 0) throw ConfigError("[data] meta_per_class must be positive");
  if (c.data.test_per_cell == 0) throw ConfigError("[data] test_per_cell must be positive");
  c.train.validate();
  c.augment.plan.validate();
}

void write_container_logged(const data::DatasetContainer& ds, const fs::path& path, std::ostream& log,
                            const std::string& name) {
  data::write_container(ds, path);
  log << name << ": " << ds.size() << " samples -> " << path.string() << "\n";
}

void print_count_table(const data::DatasetContainer& ds, std::size_t backgrounds, std::ostream& log) {
  const std::size_t C = ds.num_classes();
  std::vector<std::size_t> cell(C * backgrounds, 0);
  for (const auto& s : ds.samples()) {
    if (s.group < cell.size()) ++cell[s.group];
  }
  log << "  class";
  for (std::size_t b = 0; b < backgrounds; ++b) log << std::setw(7) << ("bg" + std::to_string(b));
  log << std::setw(8) << "total\n";
  for (std::size_t k = 0; k < C; ++k) {
    log << std::setw(7) << k;
    for (std::size_t b = 0; b < backgrounds; ++b) log << std::setw(7) << cell[k * backgrounds + b];
    log << std::setw(7) << ds.class_counts()[k] << "\n";
  }
}

fs::path ckpt_path(const fs::path& dir, TrainMode m) { return dir / (to_string(m) + ".clpw"); }

}  // namespace

RunConfig parse_config(const std::string& text) {
  namespace pt = boost::property_tree;
  pt::ptree tree;
  try {
    std::istringstream in(text);
    pt::ini_parser::read_ini(in, tree);
  } catch (const pt::ini_parser_error& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  std::map<std::string, const Field*> index;
  for (const auto& [k, f] : fields()) index[k] = &f;

  RunConfig cfg;
  for (const auto& [section, body] : tree) {
    if (body.empty()) throw ConfigError("config: key '" + section + "' must sit inside a [section]");
    for (const auto& [key, value] : body) {
      const std::string path = section + "." + key;
      const auto it = index.find(path);
      if (it == index.end()) throw ConfigError("config: unknown key [" + section + "] " + key);
      it->second->set(cfg, "[" + section + "] " + key, value.data());
    }
  }
  validate(cfg);
  return cfg;
}

RunConfig load_config(const fs::path& path) {
  const auto bytes = binio::read_file(path);
  return parse_config(std::string(bytes.begin(), bytes.end()));
}

std::string dump_config(const RunConfig& cfg) {
  std::string out, current;
  for (const auto& [k, f] : fields()) {
    const auto dot = k.find('.');
    const std::string section = k.substr(0, dot);
    if (section != current) {
      out += (current.empty() ? "" : "\n") + std::string("[") + section + "]\n";
      current = section;
    }
    out += k.substr(dot + 1) + " = " + f.get(cfg) + "\n";
  }
  return out;
}

TrainMode parse_mode(const std::string& s) {
  if (s == "clp") return TrainMode::Clp;
  if (s == "erm") return TrainMode::Erm;
  if (s == "meta_lp") return TrainMode::MetaLp;
  throw ConfigError("unknown mode '" + s + "' (clp, erm, meta_lp)");
}

std::string to_string(TrainMode m) {
  switch (m) {
    case TrainMode::Clp: return "clp";
    case TrainMode::Erm: return "erm";
    case TrainMode::MetaLp: return "meta_lp";
  }
  return "?";
}

Datasets synthesize(const RunConfig& cfg) {
  validate(cfg);
  auto full = data::synth_spurshapes(cfg.data.train);
  if (cfg.data.longtail_ratio > 1.0) full = data::apply_longtail(full, cfg.data.longtail_ratio, cfg.data.train.seed);
  if (cfg.data.noise != data::NoiseKind::None) {
    full = data::inject_label_noise(full, cfg.data.noise, cfg.data.noise_ratio, cfg.data.noise_seed);
  }
  auto split = data::draw_meta_subset(full, cfg.data.meta_per_class, cfg.data.meta_seed);

  data::SpurShapesConfig tc = cfg.data.train;
  tc.seed = cfg.data.test_seed;
  tc.group_counts = data::balanced_group_counts(tc.classes, tc.backgrounds, cfg.data.test_per_cell);
  return Datasets{std::move(split.rest), data::synth_spurshapes(tc), std::move(split.meta)};
}

Datasets load_datasets(const fs::path& dir) {
  return Datasets{data::read_container(dir / "train.clpd"), data::read_container(dir / "test.clpd"),
                  data::read_container(dir / "meta.clpd")};
}

TrainOutcome run_training(const RunConfig& cfg, TrainMode mode, const Datasets& ds) {
  validate(cfg);
  const std::size_t D = 3 * ds.train.pixels_per_image();
  const std::size_t C = ds.train.num_classes();
  models::Classifier clf(D, cfg.model.hidden_widths, C, cfg.model.init_seed);
  models::PerturbNet pnet(C, cfg.model.pnet_hidden, cfg.model.init_seed + 1);
  auto state = train::init_state(std::move(clf), std::move(pnet), ds.train, cfg.train);

  TrainOutcome out;
  if (mode == TrainMode::Erm) {
    train::TrainConfig tc = cfg.train;
    if (!cfg.erm_saliency) tc.lambda = 0.0;
    out.result = train::train_erm(tc, std::move(state), ds.train);
    return out;
  }
  if (mode == TrainMode::MetaLp || cfg.augment.mode == AugmentMode::None) {
    out.meta_size = ds.meta.size();
    out.result = train::train(cfg.train, std::move(state), ds.train, ds.meta);
    return out;
  }
  aug::AugmentPlan plan = cfg.augment.plan;
  plan.cf_fraction = cfg.augment.mode == AugmentMode::Both ? 0.5 : (cfg.augment.mode == AugmentMode::Counterfactual ? 1.0 : 0.0);
  const auto meta = aug::augment_metadata(ds.meta, plan, &state.clf, &out.augment);
  out.meta_size = meta.size();
  out.result = train::train(cfg.train, std::move(state), ds.train, meta);
  return out;
}

models::Checkpoint make_checkpoint(const train::TrainState& st, const RunConfig& cfg) {
  models::Checkpoint ck;
  models::add_params(ck, "clf.", st.clf.params());
  models::add_params(ck, "pnet.", st.pnet.params());
  ck["stats.table"] = st.stats.to_tensor();
  ck["norm.state"] = st.norm.to_tensor();
  std::vector<double> arch{static_cast<double>(st.clf.input_dim()), static_cast<double>(st.clf.classes()),
                           static_cast<double>(cfg.model.pnet_hidden)};
  for (auto w : cfg.model.hidden_widths) arch.push_back(static_cast<double>(w));
  const std::size_t n = arch.size();
  ck["model.arch"] = Tensor(Shape{n}, std::move(arch));
  return ck;
}

LoadedModel load_model(const RunConfig& cfg, const models::Checkpoint& ckpt, std::size_t input_dim,
                       std::size_t classes) {
  LoadedModel m{models::Classifier(input_dim, cfg.model.hidden_widths, classes, cfg.model.init_seed),
                models::PerturbNet(classes, cfg.model.pnet_hidden, cfg.model.init_seed + 1), {},
                chars::FeatureNormalizer()};
  models::load_params(ckpt, "clf.", m.clf.params());
  models::load_params(ckpt, "pnet.", m.pnet.params());
  const auto st = ckpt.find("stats.table");
  const auto nm = ckpt.find("norm.state");
  if (st == ckpt.end() || nm == ckpt.end()) throw ConfigError("checkpoint lacks training statistics blocks");
  m.stats = chars::ClassStats::from_tensor(st->second);
  m.norm = chars::FeatureNormalizer::from_tensor(nm->second);
  return m;
}

void cmd_synth(const RunConfig& cfg, const fs::path& out_dir, std::ostream& log) {
  fs::create_directories(out_dir);
  const Datasets ds = synthesize(cfg);
  write_container_logged(ds.train, out_dir / "train.clpd", log, "train");
  print_count_table(ds.train, cfg.data.train.backgrounds, log);
  write_container_logged(ds.test, out_dir / "test.clpd", log, "test");
  print_count_table(ds.test, cfg.data.train.backgrounds, log);
  write_container_logged(ds.meta, out_dir / "meta.clpd", log, "meta");
  print_count_table(ds.meta, cfg.data.train.backgrounds, log);
}

void cmd_train(const RunConfig& cfg, TrainMode mode, const fs::path& out_dir, std::ostream& log) {
  const Datasets ds = load_datasets(out_dir);
  const std::string name = to_string(mode);
  log << name << ": training " << cfg.train.iters << " iterations on " << ds.train.size() << " samples\n";
  const TrainOutcome out = run_training(cfg, mode, ds);
  if (mode != TrainMode::Erm) {
    log << name << ": metadata " << ds.meta.size() << " original + " << out.augment.counterfactual
        << " counterfactual + " << out.augment.factual << " factual = " << out.meta_size << "\n";
    if (out.augment.grey_fallbacks) {
      log << "warning: " << out.augment.grey_fallbacks << " tile infills fell back to grey (no background strip)\n";
    }
  }
  models::write_checkpoint(make_checkpoint(out.result.state, cfg), ckpt_path(out_dir, mode));
  binio::write_text_atomic(out_dir / (name + "_history.csv"), eval::history_csv(out.result.history));
  binio::write_text_atomic(out_dir / (name + "_config.ini"), dump_config(cfg));
  if (!out.result.history.empty()) {
    log << name << ": final train loss " << out.result.history.back().train_loss << "\n";
  }
}

eval::MetricsReport cmd_eval(const RunConfig& cfg, const fs::path& checkpoint, const fs::path& out_dir,
                             std::ostream& log) {
  const auto test = data::read_container(out_dir / "test.clpd");
  for (auto i : cfg.eval.saliency_indices) {
    if (i >= test.size()) {
      throw ConfigError("[eval] saliency_indices: index " + std::to_string(i) + " outside the valid range 0.." +
                        std::to_string(test.size() - 1));
    }
  }
  const auto ckpt = models::read_checkpoint(checkpoint);
  const auto m = load_model(cfg, ckpt, 3 * test.pixels_per_image(), test.num_classes());
  const auto report = eval::evaluate(m.clf, test);
  const std::string stem = checkpoint.stem().string();
  binio::write_text_atomic(out_dir / (stem + "_metrics.json"), eval::metrics_json(report));
  for (auto i : cfg.eval.saliency_indices) {
    const auto map = eval::saliency_map(m.clf, test[i], test);
    eval::write_pgm(out_dir / (stem + "_saliency_" + std::to_string(i) + ".pgm"), map, test.height(), test.width());
  }
  log << stem << ": top1 " << report.top1_acc << "  worst-group " << report.worst_group_acc << "  macro-precision "
      << report.macro_precision << "  (n=" << report.n_eval << ")\n";
  return report;
}

void cmd_report(const RunConfig& cfg, const fs::path& out_dir, std::ostream& log) {
  nlohmann::json j;
  j["run_name"] = cfg.run_name;
  j["config"] = dump_config(cfg);
  j["modes"] = nlohmann::json::object();
  bool any = false;
  for (TrainMode m : {TrainMode::Erm, TrainMode::MetaLp, TrainMode::Clp}) {
    const fs::path ck = ckpt_path(out_dir, m);
    if (!fs::exists(ck)) continue;
    any = true;
    const auto r = cmd_eval(cfg, ck, out_dir, log);
    j["modes"][to_string(m)] = nlohmann::json::parse(eval::metrics_json(r));
  }
  if (!any) throw IoError("report: no checkpoints found in " + out_dir.string());
  binio::write_text_atomic(out_dir / "report.json", j.dump(2) + "\n");
  log << "report: " << (out_dir / "report.json").string() << "\n";
}

}  // namespace clp::run
