#include "cgrseg/config.hpp"

#include "cgrseg/io.hpp"

#include <json.hpp>

#include <functional>
#include <map>

namespace cgr {

namespace {

using nlohmann::json;

using FieldReader = std::function<void(const json&, const std::string& path)>;

[[noreturn]] void fail(const std::string& source, const std::string& path, const std::string& what) {
  throw Error(source + ": " + path + ": " + what);
}

template <typename T>
FieldReader integer(T& field, const std::string& source) {
  return [&field, source](const json& v, const std::string& path) {
    if (!v.is_number_integer()) fail(source, path, "expected an integer");
    if constexpr (std::is_unsigned_v<T>) {
      if (!v.is_number_unsigned()) fail(source, path, "expected a non-negative integer");
      field = v.get<T>();
    } else {
      field = v.get<T>();
    }
  };
}

FieldReader number(double& field, const std::string& source) {
  return [&field, source](const json& v, const std::string& path) {
    if (!v.is_number()) fail(source, path, "expected a number");
    field = v.get<double>();
  };
}

void read_object(const json& obj, const std::string& path, const std::map<std::string, FieldReader>& fields,
                 const std::string& source) {
  if (!obj.is_object()) fail(source, path, "expected an object");
  for (const auto& [key, value] : obj.items()) {
    auto it = fields.find(key);
    if (it == fields.end()) fail(source, path + "." + key, "unknown key");
    it->second(value, path + "." + key);
  }
}

}  // namespace

RunConfig parse_config(std::string_view text, const std::string& source) {
  json root;
  try {
    root = json::parse(text);
  } catch (const json::parse_error& e) {
    throw Error(source + ": invalid JSON: " + e.what());
  }
  RunConfig cfg;
  ModelConfig& m = cfg.model;
  TrainConfig& t = cfg.train;

  const std::map<std::string, FieldReader> model_fields{
      {"in_channels", integer(m.in_channels, source)},
      {"stage_channels",
       [&](const json& v, const std::string& path) {
         if (!v.is_array() || v.size() != 4) fail(source, path, "expected an array of 4 integers");
         for (std::size_t i = 0; i < 4; ++i) {
           integer(m.stage_channels[i], source)(v[i], path + "[" + std::to_string(i) + "]");
         }
       }},
      {"num_classes", integer(m.num_classes, source)},
      {"strip_kernel", integer(m.strip_kernel, source)},
      {"fusion_kernel", integer(m.fusion_kernel, source)},
      {"mlp_ratio", integer(m.mlp_ratio, source)},
      {"num_pyramid_rcm", integer(m.num_pyramid_rcm, source)},
      {"rca_variant",
       [&](const json& v, const std::string& path) {
         if (!v.is_string()) fail(source, path, "expected \"add\" or \"mul\"");
         try {
           m.rca_variant = parse_rca_variant(v.get<std::string>());
         } catch (const Error& e) {
           fail(source, path, e.what());
         }
       }},
      {"head_width", integer(m.head_width, source)},
      {"head_hidden", integer(m.head_hidden, source)},
      {"input_h", integer(m.input_h, source)},
      {"input_w", integer(m.input_w, source)},
      {"use_rcm",
       [&](const json& v, const std::string& path) {
         if (!v.is_boolean()) fail(source, path, "expected a boolean");
         m.use_rcm = v.get<bool>();
       }},
  };
  const std::map<std::string, FieldReader> train_fields{
      {"steps", integer(t.steps, source)},
      {"batch_size", integer(t.batch_size, source)},
      {"lr", number(t.lr, source)},
      {"momentum", number(t.momentum, source)},
      {"weight_decay", number(t.weight_decay, source)},
      {"poly_power", number(t.poly_power, source)},
      {"grad_clip", number(t.grad_clip, source)},
      {"seed", integer(t.seed, source)},
      {"eval_interval", integer(t.eval_interval, source)},
      {"eval_samples", integer(t.eval_samples, source)},
  };
  const std::map<std::string, FieldReader> root_fields{
      {"model", [&](const json& v, const std::string& path) { read_object(v, path, model_fields, source); }},
      {"train", [&](const json& v, const std::string& path) { read_object(v, path, train_fields, source); }},
  };
  read_object(root, "$", root_fields, source);

  try {
    cfg.model.validate();
    cfg.train.validate();
  } catch (const Error& e) {
    throw Error(source + ": " + e.what());
  }
  return cfg;
}

RunConfig load_config(const std::string& path) { return parse_config(read_file(path), path); }

std::string dump_config(const RunConfig& cfg) {
  const ModelConfig& m = cfg.model;
  const TrainConfig& t = cfg.train;
  json root;
  root["model"] = {
      {"in_channels", m.in_channels},
      {"stage_channels", m.stage_channels},
      {"num_classes", m.num_classes},
      {"strip_kernel", m.strip_kernel},
      {"fusion_kernel", m.fusion_kernel},
      {"mlp_ratio", m.mlp_ratio},
      {"num_pyramid_rcm", m.num_pyramid_rcm},
      {"rca_variant", to_string(m.rca_variant)},
      {"head_width", m.head_width},
      {"head_hidden", m.head_hidden},
      {"input_h", m.input_h},
      {"input_w", m.input_w},
      {"use_rcm", m.use_rcm},
  };
  root["train"] = {
      {"steps", t.steps},
      {"batch_size", t.batch_size},
      {"lr", t.lr},
      {"momentum", t.momentum},
      {"weight_decay", t.weight_decay},
      {"poly_power", t.poly_power},
      {"grad_clip", t.grad_clip},
      {"seed", t.seed},
      {"eval_interval", t.eval_interval},
      {"eval_samples", t.eval_samples},
  };
  return root.dump(2) + "\n";
}

}  // namespace cgr
