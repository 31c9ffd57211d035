#pragma once

// Model checkpoints: parameters, optimizer moments, step and sampling RNG
// state in a tensor container of kind "checkpoint".

#include <cstdint>
#include <string>

#include "json.hpp"
#include "ringformer/config.hpp"
#include "ringformer/container.hpp"
#include "ringformer/model.hpp"
#include "ringformer/optim.hpp"

namespace ringformer {

inline nlohmann::ordered_json model_config_json(const ModelConfig& c) {
  nlohmann::ordered_json j;
  j["arch"] = std::string(to_string(c.arch));
  j["mode"] = std::string(to_string(c.mode));
  j["hidden"] = c.hidden;
  j["ff"] = c.ff;
  j["levels"] = c.levels;
  j["heads"] = c.heads;
  j["rank"] = c.rank.to_string();
  j["signal"] = std::string(to_string(c.signal));
  j["norm"] = c.norm ? std::string(to_string(*c.norm)) : std::string("default");
  j["vocab"] = c.vocab;
  j["max_seq_len"] = c.max_seq_len;
  j["image_size"] = c.image_size;
  j["patch_size"] = c.patch_size;
  j["channels"] = c.channels;
  j["classes"] = c.classes;
  return j;
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    c.arch = parse_arch(j.at("arch").get<std::string>());
    c.mode = parse_mode(j.at("mode").get<std::string>());
    c.hidden = j.at("hidden").get<std::size_t>();
    c.ff = j.at("ff").get<std::size_t>();
    c.levels = j.at("levels").get<std::size_t>();
    c.heads = j.at("heads").get<std::size_t>();
    c.rank = RankPolicy::parse(j.at("rank").get<std::string>());
    c.signal = parse_signal(j.at("signal").get<std::string>());
    const std::string norm = j.at("norm").get<std::string>();
    if (norm != "default") c.norm = parse_norm(norm);
    c.vocab = j.at("vocab").get<std::size_t>();
    c.max_seq_len = j.at("max_seq_len").get<std::size_t>();
    c.image_size = j.at("image_size").get<std::size_t>();
    c.patch_size = j.at("patch_size").get<std::size_t>();
    c.channels = j.at("channels").get<std::size_t>();
    c.classes = j.at("classes").get<std::size_t>();
  } catch (const nlohmann::json::exception& e) {
    throw CheckpointError(std::string("model config in manifest: ") + e.what());
  }
  c.validate();
  return c;
}

/// Training progress needed to resume bitwise: optimizer moments, step and
/// the state of the sampling/dropout generator.
template <typename T>
struct TrainState {
  std::int64_t step = 0;
  std::uint64_t rng_state = 0;
  AdamState<T> adam;
};

template <typename T>
std::string checkpoint_bytes(const Model<T>& model, const TrainState<T>& state) {
  ContainerWriter w("checkpoint");
  w.meta()["model"] = model_config_json(model.config());
  w.meta()["step"] = state.step;
  w.meta()["rng_state"] = state.rng_state;
  w.meta()["adam_step"] = state.adam.step;
  const auto& params = model.params().params();
  for (const auto& p : params) w.add(p.name, p.var.value());
  if (!state.adam.m.empty()) {
    if (state.adam.m.size() != params.size() || state.adam.v.size() != params.size()) {
      throw CheckpointNameError("optimizer state covers " + std::to_string(state.adam.m.size()) + " tensors, model has " +
                                std::to_string(params.size()));
    }
    for (std::size_t i = 0; i < params.size(); ++i) w.add("adam.m." + params[i].name, state.adam.m[i]);
    for (std::size_t i = 0; i < params.size(); ++i) w.add("adam.v." + params[i].name, state.adam.v[i]);
  }
  return w.bytes();
}

template <typename T>
void save_checkpoint(const std::string& path, const Model<T>& model, const TrainState<T>& state = {}) {
  detail::write_file_bytes(path, checkpoint_bytes(model, state));
}

template <typename T>
struct LoadedCheckpoint {
  Model<T> model;
  TrainState<T> state;
};

template <typename T>
LoadedCheckpoint<T> parse_checkpoint(std::string bytes, const std::string& origin) {
  const ContainerReader r(std::move(bytes), origin, "checkpoint");
  const ModelConfig cfg = model_config_from_json(r.meta().at("model"));
  const auto layout = model_layout(cfg);
  const bool has_adam = r.contains("adam.m." + layout.front().name);
  const std::size_t expected = layout.size() * (has_adam ? 3 : 1);
  if (r.names().size() != expected) {
    throw CheckpointNameError(origin + ": " + std::to_string(r.names().size()) + " tensors, the recorded config needs " +
                              std::to_string(expected));
  }
  ParamStore<T> store;
  TrainState<T> state;
  for (std::size_t i = 0; i < layout.size(); ++i) {
    const auto& spec = layout[i];
    if (r.names()[i] != spec.name) {
      throw CheckpointNameError(origin + ": tensor #" + std::to_string(i) + " is '" + r.names()[i] + "', expected '" +
                                spec.name + "'");
    }
    Tensor<T> value = r.template get<T>(spec.name);
    if (value.shape() != spec.shape) {
      throw CheckpointNameError(origin + ": '" + spec.name + "' has shape " + shape_string(value.shape()) +
                                ", expected " + shape_string(spec.shape));
    }
    store.add(spec.name, std::move(value), spec.group, spec.is_bias);
    if (has_adam) {
      state.adam.m.push_back(r.template get<T>("adam.m." + spec.name));
      state.adam.v.push_back(r.template get<T>("adam.v." + spec.name));
    }
  }
  state.step = r.meta().at("step").get<std::int64_t>();
  state.rng_state = r.meta().at("rng_state").get<std::uint64_t>();
  state.adam.step = r.meta().at("adam_step").get<std::int64_t>();
  return {Model<T>::from_store(cfg, std::move(store)), std::move(state)};
}

template <typename T>
LoadedCheckpoint<T> load_checkpoint(const std::string& path) {
  return parse_checkpoint<T>(detail::read_file_bytes(path), path);
}

}  // namespace ringformer
