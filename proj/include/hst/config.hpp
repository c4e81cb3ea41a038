#pragma once

// JSON forms of every configuration struct. Unknown keys are rejected so a
// typo in a run config fails loudly instead of silently using a default.

#include "hst/dataio.hpp"
#include "hst/model.hpp"

#include <json.hpp>

#include <cstdint>
#include <set>
#include <string>

namespace hst {

struct TrainConfig {
    int phase1_steps = 4000;
    int phase2_epochs = 200;
    double learning_rate = 2e-4;
    int batch_size = 32;
    std::uint64_t seed = 0;
    std::string optimizer = "adam";
    WindowSpec windows{100, 100};
    // Log every n-th phase-1 step (1 logs every step).
    int log_every = 1;

    void validate() const {
        if (phase1_steps < 0) throw ConfigError("phase1_steps must be >= 0");
        if (phase2_epochs < 0) throw ConfigError("phase2_epochs must be >= 0");
        if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
        if (batch_size < 1) throw ConfigError("batch_size must be positive");
        if (optimizer != "adam") throw ConfigError("optimizer must be 'adam'");
        if (log_every < 1) throw ConfigError("log_every must be >= 1");
        windows.validate();
    }
};

namespace detail {

inline void reject_unknown(const nlohmann::json& j, std::initializer_list<const char*> keys, const char* what) {
    if (!j.is_object()) throw ConfigError(std::string(what) + ": expected an object");
    std::set<std::string> known(keys.begin(), keys.end());
    for (const auto& [k, _] : j.items())
        if (!known.count(k)) throw ConfigError(std::string(what) + ": unknown key '" + k + "'");
}

template <typename T>
void read(const nlohmann::json& j, const char* key, T& out) {
    if (j.contains(key)) out = j.at(key).get<T>();
}

}  // namespace detail

inline nlohmann::json to_json(const EncoderConfig& c) {
    return {{"layers", c.layers},
            {"heads", c.heads},
            {"dropout", c.dropout},
            {"temporal_positions", c.temporal_positions},
            {"spatial_gate_from_temporal", c.spatial_gate_from_temporal}};
}

inline EncoderConfig encoder_config_from_json(const nlohmann::json& j) {
    detail::reject_unknown(j, {"layers", "heads", "dropout", "temporal_positions", "spatial_gate_from_temporal"}, "encoder");
    EncoderConfig c;
    detail::read(j, "layers", c.layers);
    detail::read(j, "heads", c.heads);
    detail::read(j, "dropout", c.dropout);
    detail::read(j, "temporal_positions", c.temporal_positions);
    detail::read(j, "spatial_gate_from_temporal", c.spatial_gate_from_temporal);
    return c;
}

inline nlohmann::json to_json(const SsmConfig& c) {
    return {{"backend", to_string(c.backend)},
            {"hidden", c.hidden},
            {"layers", c.layers},
            {"linear_state_head", c.linear_state_head}};
}

inline SsmConfig ssm_config_from_json(const nlohmann::json& j) {
    detail::reject_unknown(j, {"backend", "hidden", "layers", "linear_state_head"}, "ssm");
    SsmConfig c;
    if (j.contains("backend")) c.backend = backend_from_string(j.at("backend").get<std::string>());
    detail::read(j, "hidden", c.hidden);
    detail::read(j, "layers", c.layers);
    detail::read(j, "linear_state_head", c.linear_state_head);
    return c;
}

inline nlohmann::json to_json(const QuantConfig& c) {
    return {{"state_codes", c.state_codes},
            {"transition_codes", c.transition_codes},
            {"state_residual_codes", c.state_residual_codes},
            {"transition_residual_codes", c.transition_residual_codes},
            {"gamma", c.gamma},
            {"mode", to_string(c.mode)},
            {"transition_residual_uses_state_book", c.transition_residual_uses_state_book},
            {"revival", c.revival}};
}

inline QuantConfig quant_config_from_json(const nlohmann::json& j) {
    detail::reject_unknown(j,
                           {"state_codes", "transition_codes", "state_residual_codes", "transition_residual_codes",
                            "gamma", "mode", "transition_residual_uses_state_book", "revival"},
                           "quant");
    QuantConfig c;
    detail::read(j, "state_codes", c.state_codes);
    detail::read(j, "transition_codes", c.transition_codes);
    detail::read(j, "state_residual_codes", c.state_residual_codes);
    detail::read(j, "transition_residual_codes", c.transition_residual_codes);
    detail::read(j, "gamma", c.gamma);
    if (j.contains("mode")) c.mode = quant_mode_from_string(j.at("mode").get<std::string>());
    detail::read(j, "transition_residual_uses_state_book", c.transition_residual_uses_state_book);
    detail::read(j, "revival", c.revival);
    return c;
}

inline nlohmann::json to_json(const DecoderConfig& c) { return {{"layers", c.layers}, {"heads", c.heads}}; }

inline DecoderConfig decoder_config_from_json(const nlohmann::json& j) {
    detail::reject_unknown(j, {"layers", "heads"}, "decoder");
    DecoderConfig c;
    detail::read(j, "layers", c.layers);
    detail::read(j, "heads", c.heads);
    return c;
}

inline nlohmann::json to_json(const LossWeights& w) {
    return {{"alpha", w.alpha}, {"beta", w.beta}, {"gamma_loss", w.gamma_loss}, {"commitment", w.commitment}};
}

inline LossWeights loss_weights_from_json(const nlohmann::json& j) {
    detail::reject_unknown(j, {"alpha", "beta", "gamma_loss", "commitment"}, "loss");
    LossWeights w;
    detail::read(j, "alpha", w.alpha);
    detail::read(j, "beta", w.beta);
    detail::read(j, "gamma_loss", w.gamma_loss);
    detail::read(j, "commitment", w.commitment);
    return w;
}

inline nlohmann::json to_json(const ClassifierConfig& c) {
    return {{"hidden1", c.hidden1}, {"hidden2", c.hidden2}, {"classes", c.classes}, {"continuous_input", c.continuous_input}};
}

inline ClassifierConfig classifier_config_from_json(const nlohmann::json& j) {
    detail::reject_unknown(j, {"hidden1", "hidden2", "classes", "continuous_input"}, "classifier");
    ClassifierConfig c;
    detail::read(j, "hidden1", c.hidden1);
    detail::read(j, "hidden2", c.hidden2);
    detail::read(j, "classes", c.classes);
    detail::read(j, "continuous_input", c.continuous_input);
    return c;
}

inline nlohmann::json to_json(const HstConfig& c) {
    return {{"rois", c.rois},
            {"window", c.window},
            {"encoder", to_json(c.encoder)},
            {"ssm", to_json(c.ssm)},
            {"quant", to_json(c.quant)},
            {"decoder", to_json(c.decoder)},
            {"loss", to_json(c.loss)},
            {"classifier", to_json(c.classifier)}};
}

inline HstConfig hst_config_from_json(const nlohmann::json& j) {
    detail::reject_unknown(j, {"rois", "window", "encoder", "ssm", "quant", "decoder", "loss", "classifier"}, "model");
    HstConfig c;
    detail::read(j, "rois", c.rois);
    detail::read(j, "window", c.window);
    if (j.contains("encoder")) c.encoder = encoder_config_from_json(j.at("encoder"));
    if (j.contains("ssm")) c.ssm = ssm_config_from_json(j.at("ssm"));
    if (j.contains("quant")) c.quant = quant_config_from_json(j.at("quant"));
    if (j.contains("decoder")) c.decoder = decoder_config_from_json(j.at("decoder"));
    if (j.contains("loss")) c.loss = loss_weights_from_json(j.at("loss"));
    if (j.contains("classifier")) c.classifier = classifier_config_from_json(j.at("classifier"));
    c.validate();
    return c;
}

inline nlohmann::json to_json(const TrainConfig& c) {
    return {{"phase1_steps", c.phase1_steps},
            {"phase2_epochs", c.phase2_epochs},
            {"learning_rate", c.learning_rate},
            {"batch_size", c.batch_size},
            {"seed", c.seed},
            {"optimizer", c.optimizer},
            {"window_length", c.windows.length},
            {"window_stride", c.windows.stride},
            {"log_every", c.log_every}};
}

inline TrainConfig train_config_from_json(const nlohmann::json& j) {
    detail::reject_unknown(j,
                           {"phase1_steps", "phase2_epochs", "learning_rate", "batch_size", "seed", "optimizer",
                            "window_length", "window_stride", "log_every"},
                           "train");
    TrainConfig c;
    detail::read(j, "phase1_steps", c.phase1_steps);
    detail::read(j, "phase2_epochs", c.phase2_epochs);
    detail::read(j, "learning_rate", c.learning_rate);
    detail::read(j, "batch_size", c.batch_size);
    detail::read(j, "seed", c.seed);
    detail::read(j, "optimizer", c.optimizer);
    detail::read(j, "window_length", c.windows.length);
    detail::read(j, "window_stride", c.windows.stride);
    detail::read(j, "log_every", c.log_every);
    c.validate();
    return c;
}

}  // namespace hst
