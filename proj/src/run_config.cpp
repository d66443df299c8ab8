#include "dnet/run_config.hpp"

#include <fstream>
#include <functional>
#include <map>
#include <sstream>

#include "json.hpp"

namespace dnet {

using nlohmann::json;
using nlohmann::ordered_json;

namespace {

using Setter = std::function<void(const json&)>;

template <typename T>
Setter set(T& field) {
  return [&field](const json& v) { field = v.get<T>(); };
}

// Applies `section` through the setter table; any key without a setter is
// rejected with its dotted path.
void apply(const json& section, const std::string& path, const std::map<std::string, Setter>& setters) {
  if (!section.is_object()) throw ConfigError("config: '" + path + "' must be an object");
  for (const auto& [key, value] : section.items()) {
    const std::string where = path.empty() ? key : path + "." + key;
    auto it = setters.find(key);
    if (it == setters.end()) throw ConfigError("config: unknown key '" + where + "'");
    try {
      it->second(value);
    } catch (const json::exception& e) {
      throw ConfigError("config: bad value for '" + where + "': " + e.what());
    } catch (const std::invalid_argument& e) {
      throw ConfigError("config: bad value for '" + where + "': " + e.what());
    }
  }
}

}  // namespace

RunConfig RunConfig::desk() {
  RunConfig c;
  c.profile = "desk";
  c.model = ModelConfig::desk();
  c.model.num_classes = c.data.scene.num_classes;
  c.train.batch_size = 4;
  c.train.epochs = 30;
  // From-scratch training has to converge within the 30-epoch budget.
  c.train.learning_rate = 1e-3;
  c.pipeline.train_stride = 32;
  return c;
}

RunConfig RunConfig::paper() {
  RunConfig c;
  c.profile = "paper";
  auto& s = c.data.scene;
  s.height = 800;
  s.width = 800;
  s.num_classes = 9;
  s.ratios = {10000.0, 3000.0, 30.0, 10.0, 6.0, 4.0, 3.0, 2.0, 1.0};
  s.blob_radius = {{8, 20}, {6, 16}, {5, 14}, {3, 8}, {4, 12}, {5, 14}, {4, 10}};
  c.model = ModelConfig::paper(9);
  c.train.batch_size = 10;
  c.pipeline = {400, 20, 3, 200};
  return c;
}

RunConfig RunConfig::preset(const std::string& profile) {
  if (profile == "desk") return desk();
  if (profile == "paper") return paper();
  throw ConfigError("config: unknown profile '" + profile + "' (expected desk or paper)");
}

std::vector<std::size_t> RunConfig::defect_classes() const {
  if (!ablate.defect_classes.empty()) return ablate.defect_classes;
  std::vector<std::size_t> out;
  for (std::size_t c = 2; c < model.num_classes; ++c) out.push_back(c);
  return out;
}

void RunConfig::validate() const {
  try {
    data.scene.validate();
    model.validate();
    train.validate();
  } catch (const ConfigError&) {
    throw;
  } catch (const std::invalid_argument& e) {
    throw ConfigError(std::string("config: ") + e.what());
  }
  if (data.scenes == 0) throw ConfigError("config: data.scenes must be positive");
  if (!(data.test_fraction >= 0.0 && data.test_fraction < 1.0))
    throw ConfigError("config: data.test_fraction must lie in [0,1)");
  if (model.num_classes != data.scene.num_classes)
    throw ConfigError("config: model.num_classes differs from data.num_classes");
  if (pipeline.patch_size == 0 || pipeline.train_stride == 0)
    throw ConfigError("config: pipeline patch_size and train_stride must be positive");
  if (pipeline.tile_overlap >= pipeline.patch_size)
    throw ConfigError("config: pipeline.tile_overlap must be smaller than patch_size");
  if (pipeline.patch_size > data.scene.height || pipeline.patch_size > data.scene.width)
    throw ConfigError("config: pipeline.patch_size exceeds the scene size");
  if (!model.pad_input && pipeline.patch_size % model.input_multiple() != 0)
    throw ConfigError("config: pipeline.patch_size must be a multiple of " + std::to_string(model.input_multiple()) +
                      " unless model.pad_input is set");
  if (ablate.seeds.empty()) throw ConfigError("config: ablate.seeds must not be empty");
  if (ablate.losses.empty()) throw ConfigError("config: ablate.losses must not be empty");
  for (auto c : defect_classes())
    if (c >= model.num_classes) throw ConfigError("config: defect class id outside [0,K)");
}

RunConfig parse_run_config(const std::string& json_text, const std::string& default_profile) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config: invalid JSON: ") + e.what());
  }
  if (!doc.is_object()) throw ConfigError("config: top level must be an object");
  std::string profile = default_profile;
  if (doc.contains("profile")) {
    if (!doc["profile"].is_string()) throw ConfigError("config: 'profile' must be a string");
    profile = doc["profile"].get<std::string>();
  }
  RunConfig c = RunConfig::preset(profile);
  bool classes_given = false;

  std::map<std::string, Setter> top{
      {"profile", [](const json&) {}},
      {"data",
       [&](const json& v) {
         auto& s = c.data.scene;
         apply(v, "data",
               {{"scenes", set(c.data.scenes)},
                {"test_fraction", set(c.data.test_fraction)},
                {"height", set(s.height)},
                {"width", set(s.width)},
                {"num_classes", [&](const json& x) { s.num_classes = x.get<std::size_t>(); classes_given = true; }},
                {"ratios", set(s.ratios)},
                {"blob_radius", set(s.blob_radius)},
                {"noise_sigma", set(s.noise_sigma)},
                {"defect_contrast", set(s.defect_contrast)},
                {"seed", set(s.seed)},
                {"max_placement_attempts", set(s.max_placement_attempts)}});
       }},
      {"model",
       [&](const json& v) {
         auto& m = c.model;
         apply(v, "model",
               {{"block_channels", set(m.block_channels)},
                {"block_convs", set(m.block_convs)},
                {"dilated_channels", set(m.dilated_channels)},
                {"dilation_schedule", set(m.dilation_schedule)},
                {"skip_stages", set(m.skip_stages)},
                {"branch_stage", set(m.branch_stage)},
                {"leaky_alpha", set(m.leaky_alpha)},
                {"pad_input", set(m.pad_input)}});
       }},
      {"train",
       [&](const json& v) {
         auto& t = c.train;
         apply(v, "train",
               {{"loss", [&](const json& x) { t.loss = parse_loss_kind(x.get<std::string>()); }},
                {"learning_rate", set(t.learning_rate)},
                {"batch_size", set(t.batch_size)},
                {"epochs", set(t.epochs)},
                {"seed", set(t.seed)},
                {"beta1", set(t.beta1)},
                {"beta2", set(t.beta2)},
                {"adam_epsilon", set(t.adam_epsilon)},
                {"ce_clamp", [&](const json& x) { t.ce_clamp = parse_ce_clamp(x.get<std::string>()); }},
                {"class_weight_basis",
                 [&](const json& x) { t.class_weight_basis = parse_weight_basis(x.get<std::string>()); }},
                {"grad_clip", set(t.grad_clip)}});
       }},
      {"pipeline",
       [&](const json& v) {
         auto& p = c.pipeline;
         apply(v, "pipeline",
               {{"patch_size", set(p.patch_size)},
                {"train_stride", set(p.train_stride)},
                {"min_distinct_classes", set(p.min_distinct_classes)},
                {"tile_overlap", set(p.tile_overlap)}});
       }},
      {"ablate",
       [&](const json& v) {
         auto& a = c.ablate;
         apply(v, "ablate",
               {{"seeds", set(a.seeds)},
                {"losses",
                 [&](const json& x) {
                   a.losses.clear();
                   for (const auto& name : x) a.losses.push_back(parse_loss_kind(name.get<std::string>()));
                 }},
                {"defect_classes", set(a.defect_classes)}});
       }},
  };
  apply(doc, "", top);
  if (classes_given) c.model.num_classes = c.data.scene.num_classes;
  c.validate();
  return c;
}

RunConfig load_run_config(const std::string& path, const std::string& default_profile) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str(), default_profile);
}

std::string to_json(const RunConfig& c) {
  ordered_json j;
  j["profile"] = c.profile;
  const auto& s = c.data.scene;
  j["data"] = {{"scenes", c.data.scenes},
               {"test_fraction", c.data.test_fraction},
               {"height", s.height},
               {"width", s.width},
               {"num_classes", s.num_classes},
               {"ratios", s.ratios},
               {"blob_radius", s.blob_radius},
               {"noise_sigma", s.noise_sigma},
               {"defect_contrast", s.defect_contrast},
               {"seed", s.seed},
               {"max_placement_attempts", s.max_placement_attempts}};
  const auto& m = c.model;
  j["model"] = {{"block_channels", m.block_channels},   {"block_convs", m.block_convs},
                {"dilated_channels", m.dilated_channels}, {"dilation_schedule", m.dilation_schedule},
                {"skip_stages", m.skip_stages},         {"branch_stage", m.branch_stage},
                {"leaky_alpha", m.leaky_alpha},         {"pad_input", m.pad_input}};
  const auto& t = c.train;
  j["train"] = {{"loss", to_string(t.loss)},   {"learning_rate", t.learning_rate},
                {"batch_size", t.batch_size},  {"epochs", t.epochs},
                {"seed", t.seed},              {"beta1", t.beta1},
                {"beta2", t.beta2},            {"adam_epsilon", t.adam_epsilon},
                {"ce_clamp", to_string(t.ce_clamp)}, {"class_weight_basis", to_string(t.class_weight_basis)},
                {"grad_clip", t.grad_clip}};
  const auto& p = c.pipeline;
  j["pipeline"] = {{"patch_size", p.patch_size},
                   {"train_stride", p.train_stride},
                   {"min_distinct_classes", p.min_distinct_classes},
                   {"tile_overlap", p.tile_overlap}};
  std::vector<std::string> losses;
  for (auto k : c.ablate.losses) losses.push_back(to_string(k));
  j["ablate"] = {{"seeds", c.ablate.seeds}, {"losses", losses}, {"defect_classes", c.ablate.defect_classes}};
  return j.dump(2);
}

}  // namespace dnet
