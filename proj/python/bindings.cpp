#include <pybind11/numpy.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include <numeric>
#include <sstream>

#include "mkbe/cli/run.hpp"
#include "mkbe/eval/eval.hpp"
#include "mkbe/kg/kb.hpp"
#include "mkbe/train/train.hpp"

namespace py = pybind11;
using namespace mkbe;

namespace {

py::object to_python(const nlohmann::json& j) { return py::module_::import("json").attr("loads")(j.dump()); }

nlohmann::json from_python(const py::object& o) {
  return nlohmann::json::parse(py::module_::import("json").attr("dumps")(o).cast<std::string>());
}

kg::Split parse_split(const std::string& s) {
  if (s == "train") return kg::Split::train;
  if (s == "valid") return kg::Split::valid;
  if (s == "test") return kg::Split::test;
  throw InputError("split must be train, valid or test");
}

std::uint32_t relation_id(const kg::MultimodalKB& kb, const std::string& name) {
  const auto id = kb.relations().find(name);
  if (!id) throw InputError("unknown relation '" + name + "'");
  return *id;
}

py::dict evaluate(const train::Checkpoint& ck, const kg::MultimodalKB& kb, const std::string& split,
                  const std::string& task, std::vector<int> ks, std::size_t workers) {
  ck.check_compatible(kb);
  const auto model = ck.model();
  eval::EvalOptions opt;
  opt.ks = std::move(ks);
  opt.workers = workers;
  eval::RankingReport report;
  if (task == "ratings") {
    report = eval::evaluate_ratings(kb, model, parse_split(split), opt);
  } else if (task == "links") {
    for (std::uint32_t r = 0; r < kb.num_relations(); ++r)
      if (kb.modality(r) == kg::Modality::entity && ck.config.enabled(kb, r)) opt.relations.push_back(r);
    report = eval::evaluate_links(kb, model, parse_split(split), opt);
  } else {
    throw InputError("task must be links or ratings");
  }
  return to_python(report.summary(kb));
}

py::array_t<float> score_objects(const train::Checkpoint& ck, const kg::MultimodalKB& kb, const std::string& subject,
                                 const std::string& relation) {
  ck.check_compatible(kb);
  const auto s = kb.entities().find(subject);
  if (!s) throw InputError("unknown entity '" + subject + "'");
  const std::uint32_t r = relation_id(kb, relation);
  if (kb.modality(r) != kg::Modality::entity) throw InputError("'" + relation + "' is not an entity relation");
  const auto model = ck.model();
  std::vector<std::uint32_t> all(kb.num_entities());
  std::iota(all.begin(), all.end(), 0u);
  const std::uint32_t sv[] = {*s}, rv[] = {r};
  const auto scores =
      model::Model<float>::score(model.query(sv, rv, model::Mode::eval()), model.embed_entities(all)).data();
  py::array_t<float> out(static_cast<py::ssize_t>(scores.size()));
  std::copy(scores.begin(), scores.end(), out.mutable_data());
  return out;
}

}  // namespace

PYBIND11_MODULE(_mkbe, m) {
  m.doc() = "Multimodal knowledge base embeddings";

  py::register_exception<InputError>(m, "InputError", PyExc_ValueError);
  py::register_exception<StateError>(m, "StateError", PyExc_RuntimeError);

  py::class_<kg::MultimodalKB>(m, "KB")
      .def_static("load", &kg::MultimodalKB::load, py::arg("path"))
      .def("save", &kg::MultimodalKB::save, py::arg("path"))
      .def_property_readonly("num_entities", &kg::MultimodalKB::num_entities)
      .def_property_readonly("num_relations", &kg::MultimodalKB::num_relations)
      .def("entities", [](const kg::MultimodalKB& kb) { return kb.entities().names(); })
      .def("relations", [](const kg::MultimodalKB& kb) { return kb.relations().names(); })
      .def("modality",
           [](const kg::MultimodalKB& kb, const std::string& r) {
             return std::string(kg::modality_name(kb.modality(relation_id(kb, r))));
           })
      .def("num_triples", [](const kg::MultimodalKB& kb, const std::string& split) {
        return kb.triples(parse_split(split)).size();
      })
      .def("stats", [](const kg::MultimodalKB& kb) { return to_python(kg::kb_stats(kb)); });

  m.def(
      "build_kb",
      [](const std::string& config) {
        py::gil_scoped_release release;
        return cli::build_kb(cli::RunConfig::load(config).kb);
      },
      py::arg("config"), "Builds the KB described by a run config file.");

  py::class_<train::Checkpoint>(m, "Checkpoint")
      .def_static("load", &train::Checkpoint::load, py::arg("path"))
      .def_static(
          "fit",
          [](const kg::MultimodalKB& kb, const py::dict& config) {
            auto c = train::TrainConfig::from_json(from_python(config));
            c.validate(kb);
            py::gil_scoped_release release;
            return train::fit(kb, c).best;
          },
          py::arg("kb"), py::arg("config"))
      .def("save", &train::Checkpoint::save, py::arg("path"))
      .def_property_readonly("epoch", [](const train::Checkpoint& c) { return c.epoch; })
      .def_property_readonly("valid_mrr", [](const train::Checkpoint& c) { return c.valid_mrr; })
      .def_property_readonly("config", [](const train::Checkpoint& c) { return to_python(c.config.to_json()); })
      .def("evaluate", &evaluate, py::arg("kb"), py::arg("split") = "test", py::arg("task") = "links",
           py::arg("ks") = std::vector<int>{1, 3, 10}, py::arg("workers") = 1)
      .def("score_objects", &score_objects, py::arg("kb"), py::arg("subject"), py::arg("relation"));

  m.def(
      "run",
      [](const std::string& command, const std::string& config, std::optional<std::uint64_t> seed,
         std::size_t workers, bool per_relation, std::optional<std::vector<std::string>> modalities,
         const std::string& checkpoint) {
        cli::Overrides o;
        o.seed = seed;
        o.workers = workers;
        o.per_relation = per_relation;
        o.modalities = std::move(modalities);
        o.checkpoint = checkpoint;
        std::ostringstream out, err;
        int code;
        {
          py::gil_scoped_release release;
          code = cli::run_command(command, config, o, out, err);
        }
        return py::make_tuple(code, out.str(), err.str());
      },
      py::arg("command"), py::arg("config"), py::arg("seed") = py::none(), py::arg("workers") = 1,
      py::arg("per_relation") = false, py::arg("modalities") = py::none(), py::arg("checkpoint") = "",
      "Runs prepare, train, eval or impute. Returns (exit code, stdout, stderr).");

  m.def("git_blob_sha1", [](const py::bytes& b) { return cli::git_blob_sha1(std::string(b)); }, py::arg("data"));
}
