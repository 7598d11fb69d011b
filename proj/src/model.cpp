#include "actbit/model.hpp"

#include <nlohmann/json.hpp>

#include <cmath>
#include <fstream>
#include <stdexcept>

namespace actbit {

namespace {

Vector apply_activation(Activation a, const Vector& z) {
    switch (a) {
        case Activation::identity: return z;
        case Activation::relu: return z.cwiseMax(0.0);
        case Activation::tanh: return z.array().tanh().matrix();
    }
    throw std::logic_error("unknown activation");
}

// Derivative at the pre-activation value. relu uses subgradient 0 at 0.
double activation_derivative(Activation a, double pre) {
    switch (a) {
        case Activation::identity: return 1.0;
        case Activation::relu: return pre > 0.0 ? 1.0 : 0.0;
        case Activation::tanh: {
            const double t = std::tanh(pre);
            return 1.0 - t * t;
        }
    }
    throw std::logic_error("unknown activation");
}

Vector run_downstream(const PolicyModel& model, int from_layer, Vector x) {
    for (std::size_t k = static_cast<std::size_t>(from_layer) + 1; k < model.layers.size(); ++k) {
        const Layer& layer = model.layers[k];
        x = apply_activation(layer.activation, matvec(layer.weight, x) + layer.bias);
    }
    return x;
}

} // namespace

std::string_view to_string(Activation a) {
    switch (a) {
        case Activation::identity: return "identity";
        case Activation::relu: return "relu";
        case Activation::tanh: return "tanh";
    }
    throw std::logic_error("unknown activation");
}

std::string_view to_string(ModuleTag t) {
    switch (t) {
        case ModuleTag::vision: return "vision";
        case ModuleTag::projector: return "projector";
        case ModuleTag::backbone: return "backbone";
        case ModuleTag::action_head: return "action_head";
    }
    throw std::logic_error("unknown tag");
}

Activation activation_from_string(std::string_view s) {
    if (s == "identity") return Activation::identity;
    if (s == "relu") return Activation::relu;
    if (s == "tanh") return Activation::tanh;
    throw std::invalid_argument("unknown activation: " + std::string(s));
}

ModuleTag tag_from_string(std::string_view s) {
    if (s == "vision") return ModuleTag::vision;
    if (s == "projector") return ModuleTag::projector;
    if (s == "backbone") return ModuleTag::backbone;
    if (s == "action_head") return ModuleTag::action_head;
    throw std::invalid_argument("unknown module tag: " + std::string(s));
}

PolicyModel make_policy_model(std::vector<Layer> layers) {
    PolicyModel model;
    model.layers = std::move(layers);
    if (!model.layers.empty()) {
        model.input_dim = static_cast<int>(model.layers.front().weight.cols());
        model.output_dim = static_cast<int>(model.layers.back().weight.rows());
    }
    validate(model);
    return model;
}

void validate(const PolicyModel& model) {
    if (model.layers.empty()) {
        throw std::invalid_argument("model: needs at least one layer");
    }
    Index prev = model.input_dim;
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
        const Layer& layer = model.layers[l];
        const std::string where = "model layer " + std::to_string(l);
        if (layer.weight.rows() != layer.bias.size()) {
            throw std::invalid_argument(where + ": weight rows != bias length");
        }
        if (layer.weight.cols() != prev) {
            throw std::invalid_argument(where + ": expects input dim " + std::to_string(prev) +
                                        ", got " + std::to_string(layer.weight.cols()));
        }
        require_finite(layer.weight, where.c_str());
        require_finite(layer.bias, where.c_str());
        prev = layer.weight.rows();
    }
    if (prev != model.output_dim) {
        throw std::invalid_argument("model: last layer rows != output_dim");
    }
    if (model.layers.back().activation != Activation::identity) {
        throw std::invalid_argument("model: action layer must use identity activation");
    }
}

void validate_channel(const PolicyModel& model, ChannelId ch) {
    if (ch.layer < 0 || ch.layer >= static_cast<int>(model.layers.size())) {
        throw std::invalid_argument("channel: layer index " + std::to_string(ch.layer) +
                                    " out of range");
    }
    const Index rows = model.layers[static_cast<std::size_t>(ch.layer)].weight.rows();
    if (ch.channel < 0 || ch.channel >= rows) {
        throw std::invalid_argument("channel: row index " + std::to_string(ch.channel) +
                                    " out of range for layer " + std::to_string(ch.layer));
    }
}

ForwardTrace forward(const PolicyModel& model, const Vector& obs) {
    if (obs.size() != model.input_dim) {
        throw std::invalid_argument("forward: observation length " + std::to_string(obs.size()) +
                                    " != input_dim " + std::to_string(model.input_dim));
    }
    ForwardTrace trace;
    trace.pre.reserve(model.layers.size());
    trace.post.reserve(model.layers.size());
    Vector x = obs;
    for (const Layer& layer : model.layers) {
        Vector z = matvec(layer.weight, x) + layer.bias;
        x = apply_activation(layer.activation, z);
        trace.pre.push_back(std::move(z));
        trace.post.push_back(x);
    }
    return trace;
}

Matrix action_jacobian_wrt_channel(const PolicyModel& model, const Vector& obs, ChannelId ch) {
    validate_channel(model, ch);
    const ForwardTrace trace = forward(model, obs);
    Vector v = Vector::Zero(model.layers[static_cast<std::size_t>(ch.layer)].weight.rows());
    v[ch.channel] = 1.0;
    for (std::size_t k = static_cast<std::size_t>(ch.layer) + 1; k < model.layers.size(); ++k) {
        const Layer& layer = model.layers[k];
        Vector u = matvec(layer.weight, v);
        for (Index i = 0; i < u.size(); ++i) {
            u[i] *= activation_derivative(layer.activation, trace.pre[k][i]);
        }
        v = std::move(u);
    }
    return Matrix(v);
}

Matrix fd_jacobian_wrt_channel(const PolicyModel& model, const Vector& obs, ChannelId ch,
                               double h) {
    if (!(h > 0.0)) {
        throw std::invalid_argument("fd_jacobian: step must be positive");
    }
    validate_channel(model, ch);
    const ForwardTrace trace = forward(model, obs);
    Vector plus = trace.post[static_cast<std::size_t>(ch.layer)];
    Vector minus = plus;
    plus[ch.channel] += h;
    minus[ch.channel] -= h;
    const Vector a_plus = run_downstream(model, ch.layer, std::move(plus));
    const Vector a_minus = run_downstream(model, ch.layer, std::move(minus));
    return Matrix((a_plus - a_minus) / (2.0 * h));
}

std::vector<ChannelId> channels(const PolicyModel& model,
                                const std::optional<std::set<ModuleTag>>& tags) {
    std::vector<ChannelId> out;
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
        if (tags && tags->count(model.layers[l].tag) == 0) {
            continue;
        }
        for (Index c = 0; c < model.layers[l].weight.rows(); ++c) {
            out.push_back({static_cast<int>(l), static_cast<int>(c)});
        }
    }
    return out;
}

std::vector<ChannelId> default_designated_channels(const PolicyModel& model) {
    std::set<ModuleTag> tags{ModuleTag::vision, ModuleTag::backbone};
    return channels(model, tags);
}

PolicyModel load_model(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw std::runtime_error("cannot open model file: " + path);
    }
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::parse_error& e) {
        throw std::runtime_error("model file " + path + ": " + e.what());
    }
    std::vector<Layer> layers;
    for (const auto& jl : j.at("layers")) {
        Layer layer;
        layer.tag = tag_from_string(jl.at("tag").get<std::string>());
        layer.activation = activation_from_string(jl.at("activation").get<std::string>());
        const auto& jw = jl.at("weight");
        const std::size_t rows = jw.size();
        if (rows == 0) {
            throw std::runtime_error("model file " + path + ": empty weight matrix");
        }
        const std::size_t cols = jw.at(0).size();
        layer.weight.resize(static_cast<Index>(rows), static_cast<Index>(cols));
        for (std::size_t r = 0; r < rows; ++r) {
            if (jw.at(r).size() != cols) {
                throw std::runtime_error("model file " + path + ": ragged weight matrix");
            }
            for (std::size_t c = 0; c < cols; ++c) {
                layer.weight(static_cast<Index>(r), static_cast<Index>(c)) =
                    jw.at(r).at(c).get<double>();
            }
        }
        const auto& jb = jl.at("bias");
        layer.bias.resize(static_cast<Index>(jb.size()));
        for (std::size_t i = 0; i < jb.size(); ++i) {
            layer.bias[static_cast<Index>(i)] = jb.at(i).get<double>();
        }
        layers.push_back(std::move(layer));
    }
    PolicyModel model = make_policy_model(std::move(layers));
    if (model.input_dim != j.at("input_dim").get<int>() ||
        model.output_dim != j.at("output_dim").get<int>()) {
        throw std::runtime_error("model file " + path + ": declared dims do not match layers");
    }
    return model;
}

void save_model(const PolicyModel& model, const std::string& path) {
    nlohmann::json j;
    j["input_dim"] = model.input_dim;
    j["output_dim"] = model.output_dim;
    nlohmann::json jlayers = nlohmann::json::array();
    for (const Layer& layer : model.layers) {
        nlohmann::json jl;
        jl["tag"] = std::string(to_string(layer.tag));
        jl["activation"] = std::string(to_string(layer.activation));
        nlohmann::json jw = nlohmann::json::array();
        for (Index r = 0; r < layer.weight.rows(); ++r) {
            nlohmann::json row = nlohmann::json::array();
            for (Index c = 0; c < layer.weight.cols(); ++c) {
                row.push_back(layer.weight(r, c));
            }
            jw.push_back(std::move(row));
        }
        jl["weight"] = std::move(jw);
        nlohmann::json jb = nlohmann::json::array();
        for (Index i = 0; i < layer.bias.size(); ++i) {
            jb.push_back(layer.bias[i]);
        }
        jl["bias"] = std::move(jb);
        jlayers.push_back(std::move(jl));
    }
    j["layers"] = std::move(jlayers);
    std::ofstream out(path);
    if (!out) {
        throw std::runtime_error("cannot write model file: " + path);
    }
    out << j.dump(2) << "\n";
}

} // namespace actbit
