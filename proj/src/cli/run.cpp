#include "mkbe/cli/run.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <ostream>
#include <set>
#include <sstream>

#include "mkbe/errors.hpp"
#include "mkbe/eval/eval.hpp"
#include "mkbe/kg/tsv.hpp"

namespace mkbe::cli {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

void reject_unknown_keys(const json& j, const std::set<std::string>& known, const std::string& what) {
  if (!j.is_object()) throw InputError(what + ": expected an object");
  for (const auto& [key, _] : j.items())
    if (!known.count(key)) throw InputError(what + ": unknown key '" + key + "'");
}

template <class T>
void get(const json& j, const char* key, T& field, const std::string& what) {
  if (!j.contains(key)) return;
  try {
    j.at(key).get_to(field);
  } catch (const json::exception& e) {
    throw InputError(what + "." + key + ": " + e.what());
  }
}

std::string resolve(const json& j, const char* key, const fs::path& base, const std::string& what) {
  std::string s;
  get(j, key, s, what);
  if (s.empty()) return s;
  fs::path p(s);
  if (p.is_relative()) p = base / p;
  if (!fs::exists(p)) throw InputError(what + "." + key + ": no such file: " + p.string());
  return p.lexically_normal().string();
}

KbSources kb_from_json(const json& j, const fs::path& base) {
  const std::string what = "kb";
  reject_unknown_keys(j,
                      {"schema", "train", "valid", "test", "numeric", "categorical", "text", "image_features",
                       "image_map", "year_filter", "attribute_holdout", "attribute_holdout_seed"},
                      what);
  KbSources k;
  k.schema = resolve(j, "schema", base, what);
  k.train = resolve(j, "train", base, what);
  k.valid = resolve(j, "valid", base, what);
  k.test = resolve(j, "test", base, what);
  k.numeric = resolve(j, "numeric", base, what);
  k.categorical = resolve(j, "categorical", base, what);
  k.text = resolve(j, "text", base, what);
  k.image_features = resolve(j, "image_features", base, what);
  k.image_map = resolve(j, "image_map", base, what);
  get(j, "year_filter", k.year_filter, what);
  get(j, "attribute_holdout", k.attribute_holdout, what);
  get(j, "attribute_holdout_seed", k.attribute_holdout_seed, what);
  if (k.schema.empty()) throw InputError("kb.schema is required");
  if (k.train.empty()) throw InputError("kb.train is required");
  if (!(k.attribute_holdout >= 0.0 && k.attribute_holdout < 1.0))
    throw InputError("kb.attribute_holdout must be in [0, 1)");
  return k;
}

EvalSettings eval_from_json(const json& j) {
  const std::string what = "eval";
  reject_unknown_keys(j, {"task", "split", "ks", "rating_decoder", "batch"}, what);
  EvalSettings e;
  get(j, "task", e.task, what);
  get(j, "split", e.split, what);
  get(j, "ks", e.ks, what);
  get(j, "rating_decoder", e.rating_decoder, what);
  get(j, "batch", e.batch, what);
  if (e.task != "auto" && e.task != "links" && e.task != "ratings")
    throw InputError("eval.task must be auto, links or ratings");
  if (e.split != "valid" && e.split != "test") throw InputError("eval.split must be valid or test");
  if (e.rating_decoder != "expectation" && e.rating_decoder != "argmax")
    throw InputError("eval.rating_decoder must be expectation or argmax");
  if (e.ks.empty() || std::any_of(e.ks.begin(), e.ks.end(), [](int k) { return k < 1; }))
    throw InputError("eval.ks must be positive integers");
  if (e.batch == 0) throw InputError("eval.batch must be positive");
  return e;
}

ImputeSettings impute_from_json(const json& j) {
  const std::string what = "impute";
  reject_unknown_keys(j, {"targets", "methods", "decoder"}, what);
  ImputeSettings s;
  if (j.contains("targets")) {
    if (!j.at("targets").is_array()) throw InputError("impute.targets must be an array");
    for (const auto& t : j.at("targets")) {
      reject_unknown_keys(t, {"relation", "lo", "hi"}, "impute.targets[]");
      ImputeTarget target;
      get(t, "relation", target.relation, "impute.targets[]");
      if (target.relation.empty()) throw InputError("impute.targets[].relation is required");
      if (t.contains("lo")) target.lo = t.at("lo").get<int>();
      if (t.contains("hi")) target.hi = t.at("hi").get<int>();
      s.targets.push_back(target);
    }
  }
  get(j, "methods", s.methods, what);
  for (const auto& m : s.methods)
    if (m != "neural" && m != "search") throw InputError("impute.methods: unknown method '" + m + "'");
  if (j.contains("decoder")) {
    if (j.at("decoder").contains("seed")) throw InputError("impute.decoder.seed: use the top-level seed");
    s.decoder = impute::DecoderConfig::from_json(j.at("decoder"));
  }
  return s;
}

std::string hex(const unsigned char* bytes, std::size_t n) {
  std::ostringstream out;
  for (std::size_t i = 0; i < n; ++i) out << std::hex << std::setw(2) << std::setfill('0') << int(bytes[i]);
  return out.str();
}

std::string sha1_hex(std::string_view bytes) {
  unsigned char md[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  if (!EVP_Digest(bytes.data(), bytes.size(), md, &len, EVP_sha1(), nullptr))
    throw std::runtime_error("SHA-1 digest failed");
  return hex(md, len);
}

kg::Split parse_split(const std::string& s) { return s == "valid" ? kg::Split::valid : kg::Split::test; }

json decision_tags(const RunConfig& c) {
  return {{"tie_policy", eval::kTiePolicy},
          {"filter_policy", eval::kFilterPolicy},
          {"ranking_side", "object"},
          {"candidate_sampling", "shared per batch and relation; all train values up to max_candidates, "
                                 "else the batch positives plus a uniform fill"},
          {"max_candidates", c.train.max_candidates},
          {"label_smoothing", "t(1-eps)+eps/2"},
          {"rating_decoder", c.eval.rating_decoder},
          {"imputation_embeddings", "frozen"}};
}

void write_json(const fs::path& p, const json& j) { kg::write_file_atomic(p.string(), j.dump(2) + "\n"); }

kg::MultimodalKB obtain_kb(const RunConfig& c, std::ostream& err) {
  const auto path = c.prepared_path();
  if (fs::exists(path)) return kg::MultimodalKB::load(path.string());
  err << "note: no prepared KB at " << path.string() << "; building from sources\n";
  auto kb = build_kb(c.kb);
  fs::create_directories(path.parent_path());
  kb.save(path.string());
  return kb;
}

train::Checkpoint obtain_checkpoint(const RunConfig& c, const Overrides& o, const kg::MultimodalKB& kb) {
  const fs::path path = o.checkpoint.empty() ? c.run_dir() / "checkpoint.ckpt" : fs::path(o.checkpoint);
  if (!fs::exists(path)) throw StateError("checkpoint not found: " + path.string() + " (run train first)");
  auto ck = train::Checkpoint::load(path.string());
  ck.check_compatible(kb);
  return ck;
}

void write_run_record(const RunConfig& c, std::string_view command) {
  const auto dir = c.run_dir();
  fs::create_directories(dir);
  write_json(dir / "config.json", c.to_json());
  write_json(dir / "run.json", {{"command", std::string(command)},
                                {"seed", c.seed},
                                {"config_hash", c.hash()},
                                {"inputs", input_hashes(c.kb)},
                                {"groups", c.train.groups},
                                {"tags", decision_tags(c)}});
}

int cmd_prepare(const RunConfig& c, std::ostream& out) {
  const auto kb = build_kb(c.kb);
  const auto path = c.prepared_path();
  fs::create_directories(path.parent_path());
  kb.save(path.string());
  auto stats = kg::kb_stats(kb);
  stats["inputs"] = input_hashes(c.kb);
  write_json(path.parent_path() / (path.stem().string() + ".stats.json"), stats);
  out << kg::format_stats(stats) << "kb: " << path.string() << "\n";
  return 0;
}

int cmd_train(const RunConfig& c, const Overrides& o, std::ostream& out, std::ostream& err) {
  const auto kb = obtain_kb(c, err);
  c.train.validate(kb);
  std::ostringstream log;
  log << "epoch\tmean_loss\tsteps\n";
  train::FitOptions fo;
  fo.workers = o.workers;
  fo.on_epoch = [&](const train::EpochStats& s) {
    log << s.epoch << '\t' << std::setprecision(9) << s.mean_loss << '\t' << s.steps << '\n';
    err << "epoch " << s.epoch << " loss " << s.mean_loss << "\n";
  };
  fo.on_eval = [&](std::size_t epoch, double v) { err << "epoch " << epoch << " validation mrr " << v << "\n"; };
  const auto result = train::fit(kb, c.train, fo);
  write_run_record(c, "train");
  const auto dir = c.run_dir();
  kg::write_file_atomic((dir / "train_log.tsv").string(), log.str());
  result.best.save((dir / "checkpoint.ckpt").string());
  write_json(dir / "train.json", {{"best_epoch", result.best.epoch},
                                  {"valid_metric", result.best.valid_metric},
                                  {"valid_mrr", result.best.valid_mrr},
                                  {"epochs_run", result.epochs.size()},
                                  {"history", result.best.history}});
  out << (dir / "checkpoint.ckpt").string() << "\n";
  return 0;
}

int cmd_eval(const RunConfig& c, const Overrides& o, std::ostream& out, std::ostream& err) {
  const auto kb = obtain_kb(c, err);
  const auto ck = obtain_checkpoint(c, o, kb);
  const auto model = ck.model();
  eval::EvalOptions opt;
  opt.ks = c.eval.ks;
  opt.per_relation = o.per_relation;
  opt.workers = o.workers;
  opt.batch = c.eval.batch;
  opt.decoder = c.eval.rating_decoder == "argmax" ? eval::RatingDecoder::argmax : eval::RatingDecoder::expectation;
  const auto ratings = kb.schema().rating_relations();
  bool use_ratings = c.eval.task == "ratings";
  if (c.eval.task == "auto")
    use_ratings = !ratings.empty() && std::all_of(ratings.begin(), ratings.end(), [&](const std::string& r) {
      return ck.config.enabled(kb, kb.relations().id(r));
    });
  const auto split = parse_split(c.eval.split);
  eval::RankingReport report;
  if (use_ratings) {
    report = eval::evaluate_ratings(kb, model, split, opt);
  } else {
    for (std::uint32_t r = 0; r < kb.num_relations(); ++r)
      if (kb.modality(r) == kg::Modality::entity && ck.config.enabled(kb, r)) opt.relations.push_back(r);
    report = eval::evaluate_links(kb, model, split, opt);
  }
  auto summary = report.summary(kb);
  summary["groups"] = ck.config.groups;
  const auto dir = c.run_dir();
  fs::create_directories(dir);
  const std::string stem = "eval_" + c.eval.split;
  kg::write_file_atomic((dir / (stem + "_queries.tsv")).string(), report.queries_tsv(kb));
  if (o.per_relation) kg::write_file_atomic((dir / (stem + "_per_relation.tsv")).string(), report.per_relation_tsv(kb));
  write_json(dir / (stem + ".json"), summary);
  out << summary.dump(2) << "\n";
  return 0;
}

std::pair<int, int> search_range(const kg::MultimodalKB& kb, std::uint32_t r, const ImputeTarget& t) {
  if (t.lo && t.hi) return {*t.lo, *t.hi};
  int lo = 1000, hi = 2017;
  if (!kb.relation(r).year) {
    const auto values = kb.train_values(r);
    if (values.empty()) throw InputError("impute: relation '" + t.relation + "' has no train values");
    double mn = kb.numeric_value(values[0]), mx = mn;
    for (auto v : values) {
      mn = std::min(mn, kb.numeric_value(v));
      mx = std::max(mx, kb.numeric_value(v));
    }
    lo = static_cast<int>(std::floor(mn));
    hi = static_cast<int>(std::ceil(mx));
  }
  return {t.lo.value_or(lo), t.hi.value_or(hi)};
}

int cmd_impute(const RunConfig& c, const Overrides& o, std::ostream& out, std::ostream& err) {
  if (c.impute.targets.empty()) throw InputError("impute.targets is empty");
  const auto kb = obtain_kb(c, err);
  const auto ck = obtain_checkpoint(c, o, kb);
  const auto model = ck.model();
  auto dc = c.impute.decoder;
  dc.seed = c.seed;
  const auto wants = [&](const char* m) {
    return std::find(c.impute.methods.begin(), c.impute.methods.end(), m) != c.impute.methods.end();
  };
  std::vector<impute::ImputationResult> rows;
  auto reports = json::array();
  for (const auto& t : c.impute.targets) {
    const auto id = kb.relations().find(t.relation);
    if (!id) throw InputError("impute: unknown relation '" + t.relation + "'");
    const auto m = kb.modality(*id);
    if (m == kg::Modality::numeric) {
      if (wants("neural")) {
        const auto rep = impute::neural_numeric(kb, model, *id, dc);
        rows.insert(rows.end(), rep.predictions.begin(), rep.predictions.end());
        reports.push_back(rep.to_json(kb));
      }
      if (wants("search")) {
        const auto [lo, hi] = search_range(kb, *id, t);
        if (!ck.config.model.numeric_selu)
          err << "warning: " << t.relation
              << ": search with the affine numeric encoder scores linearly in the value and picks a range end\n";
        err << "search: " << t.relation << ": " << (hi >= lo ? hi - lo + 1 : 0) << " candidates in [" << lo << ", "
            << hi << "]\n";
        const auto rep = impute::search_numeric(kb, model, *id, lo, hi, dc);
        rows.insert(rows.end(), rep.predictions.begin(), rep.predictions.end());
        auto j = rep.to_json(kb);
        j["range"] = {lo, hi};
        reports.push_back(j);
      }
    } else if (m == kg::Modality::categorical) {
      if (!wants("neural")) continue;
      const auto rep = impute::neural_categorical(kb, model, *id, dc);
      rows.insert(rows.end(), rep.predictions.begin(), rep.predictions.end());
      reports.push_back(rep.to_json(kb));
    } else {
      throw InputError("impute: relation '" + t.relation + "' is " + std::string(kg::modality_name(m)) +
                       "; only numeric and categorical relations are imputed");
    }
  }
  const auto dir = c.run_dir();
  fs::create_directories(dir);
  kg::write_file_atomic((dir / "impute.tsv").string(), impute::predictions_tsv(kb, rows));
  const json summary{{"reports", reports}, {"embeddings", "frozen"}, {"decoder", dc.to_json()}};
  write_json(dir / "impute.json", summary);
  out << summary.dump(2) << "\n";
  return 0;
}

}  // namespace

json KbSources::to_json() const {
  return {{"schema", schema},
          {"train", train},
          {"valid", valid},
          {"test", test},
          {"numeric", numeric},
          {"categorical", categorical},
          {"text", text},
          {"image_features", image_features},
          {"image_map", image_map},
          {"year_filter", year_filter},
          {"attribute_holdout", attribute_holdout},
          {"attribute_holdout_seed", attribute_holdout_seed}};
}

json EvalSettings::to_json() const {
  return {{"task", task}, {"split", split}, {"ks", ks}, {"rating_decoder", rating_decoder}, {"batch", batch}};
}

json ImputeSettings::to_json() const {
  auto ts = json::array();
  for (const auto& t : targets) {
    json j{{"relation", t.relation}};
    if (t.lo) j["lo"] = *t.lo;
    if (t.hi) j["hi"] = *t.hi;
    ts.push_back(j);
  }
  auto d = decoder.to_json();
  d.erase("seed");
  return {{"targets", ts}, {"methods", methods}, {"decoder", d}};
}

RunConfig RunConfig::from_json(const json& j, const fs::path& base_dir) {
  reject_unknown_keys(j, {"output_dir", "kb", "train", "eval", "impute", "seed"}, "config");
  RunConfig c;
  get(j, "output_dir", c.output_dir, "config");
  if (c.output_dir.empty()) throw InputError("config.output_dir is required");
  if (fs::path(c.output_dir).is_relative()) c.output_dir = (base_dir / c.output_dir).lexically_normal().string();
  if (!j.contains("kb")) throw InputError("config.kb is required");
  c.kb = kb_from_json(j.at("kb"), base_dir);
  if (j.contains("train")) {
    if (j.at("train").contains("seed")) throw InputError("train.seed: use the top-level seed");
    c.train = train::TrainConfig::from_json(j.at("train"));
  }
  if (j.contains("eval")) c.eval = eval_from_json(j.at("eval"));
  if (j.contains("impute")) c.impute = impute_from_json(j.at("impute"));
  get(j, "seed", c.seed, "config");
  c.train.seed = c.seed;
  c.impute.decoder.seed = c.seed;
  return c;
}

RunConfig RunConfig::load(const std::string& path) {
  if (!fs::exists(path)) throw InputError("config file not found: " + path);
  json j;
  try {
    j = json::parse(kg::read_file(path));
  } catch (const json::parse_error& e) {
    throw InputError(path + ": " + e.what());
  }
  return from_json(j, fs::absolute(path).parent_path());
}

json RunConfig::to_json() const {
  auto t = train.to_json();
  t.erase("seed");
  return {{"output_dir", output_dir}, {"kb", kb.to_json()},         {"train", t},
          {"eval", eval.to_json()},   {"impute", impute.to_json()}, {"seed", seed}};
}

std::string RunConfig::hash() const {
  auto j = to_json();
  j.erase("seed");
  j.erase("output_dir");
  const auto sources = kb.to_json();
  for (const auto& [key, value] : sources.items())
    if (value.is_string()) j["kb"].erase(key);
  j["inputs"] = input_hashes(kb);
  return sha1_hex(j.dump()).substr(0, 12);
}

fs::path RunConfig::run_dir() const {
  return fs::path(output_dir) / "runs" / (hash() + "-s" + std::to_string(seed));
}

fs::path RunConfig::prepared_path() const {
  json j{{"inputs", input_hashes(kb)},
         {"year_filter", kb.year_filter},
         {"attribute_holdout", kb.attribute_holdout},
         {"attribute_holdout_seed", kb.attribute_holdout_seed}};
  return fs::path(output_dir) / "prepared" / (sha1_hex(j.dump()).substr(0, 12) + ".kb");
}

std::string git_blob_sha1(std::string_view bytes) {
  std::string blob = "blob " + std::to_string(bytes.size());
  blob.push_back('\0');
  blob.append(bytes);
  return sha1_hex(blob);
}

json input_hashes(const KbSources& s) {
  json j = json::object();
  const std::pair<const char*, const std::string*> files[] = {
      {"schema", &s.schema},   {"train", &s.train}, {"valid", &s.valid},
      {"test", &s.test},       {"numeric", &s.numeric}, {"categorical", &s.categorical},
      {"text", &s.text},       {"image_features", &s.image_features}, {"image_map", &s.image_map}};
  for (const auto& [key, path] : files)
    if (!path->empty()) j[key] = git_blob_sha1(kg::read_file(*path));
  return j;
}

kg::MultimodalKB build_kb(const KbSources& s) {
  kg::MultimodalKB kb(kg::ModalitySchema::load(s.schema));
  kb.load_triples(s.train, kg::Split::train);
  if (!s.valid.empty()) kb.load_triples(s.valid, kg::Split::valid);
  if (!s.test.empty()) kb.load_triples(s.test, kg::Split::test);
  kg::AttributeFiles files{s.numeric, s.categorical, s.text, s.image_features, s.image_map, s.year_filter};
  kb.attach_attributes(files);
  if (s.attribute_holdout > 0.0) kb.hold_out_attributes(s.attribute_holdout, s.attribute_holdout_seed);
  kb.finalize();
  return kb;
}

int run_command(std::string_view command, const std::string& config_path, const Overrides& o, std::ostream& out,
                std::ostream& err) {
  try {
    auto c = RunConfig::load(config_path);
    if (o.seed) {
      c.seed = *o.seed;
      c.train.seed = c.seed;
      c.impute.decoder.seed = c.seed;
    }
    if (o.modalities) c.train.groups = *o.modalities;
    if (o.workers == 0) throw InputError("--workers must be positive");
    if (command == "prepare") return cmd_prepare(c, out);
    if (command == "train") return cmd_train(c, o, out, err);
    if (command == "eval") return cmd_eval(c, o, out, err);
    if (command == "impute") return cmd_impute(c, o, out, err);
    throw InputError("unknown command '" + std::string(command) + "'");
  } catch (const InputError& e) {
    err << "error: " << e.what() << "\n";
    return 2;
  } catch (const StateError& e) {
    err << "error: " << e.what() << "\n";
    return 3;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << "\n";
    return 3;
  }
}

}  // namespace mkbe::cli
