#pragma once

// Policy network as an explicit chain of linear layers. The model stays
// immutable after construction; forward/Jacobian calls are pure.

#include "actbit/tensor.hpp"

#include <compare>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

namespace actbit {

enum class Activation { identity, relu, tanh };
enum class ModuleTag { vision, projector, backbone, action_head };

std::string_view to_string(Activation a);
std::string_view to_string(ModuleTag t);
Activation activation_from_string(std::string_view s);
ModuleTag tag_from_string(std::string_view s);

struct Layer {
    Matrix weight; // out x in; row = output channel
    Vector bias;   // out
    Activation activation = Activation::identity;
    ModuleTag tag = ModuleTag::backbone;
};

struct PolicyModel {
    std::vector<Layer> layers;
    int input_dim = 0;
    int output_dim = 0;
};

// Output channel (l, c): row c of layer l's weight matrix.
struct ChannelId {
    int layer = 0;
    int channel = 0;
    auto operator<=>(const ChannelId&) const = default;
};

struct ForwardTrace {
    std::vector<Vector> pre;  // per-layer pre-activation
    std::vector<Vector> post; // per-layer post-activation
    const Vector& action() const { return post.back(); }
};

// Validates the layer chain (dimension chaining, finite weights, identity
// activation on the action layer) and fills input/output dims.
PolicyModel make_policy_model(std::vector<Layer> layers);
void validate(const PolicyModel& model);
void validate_channel(const PolicyModel& model, ChannelId ch);

ForwardTrace forward(const PolicyModel& model, const Vector& obs);

// d(action)/d(post-activation output of channel ch), output_dim x 1,
// chain rule over the downstream layers at the trace of `obs`.
Matrix action_jacobian_wrt_channel(const PolicyModel& model, const Vector& obs, ChannelId ch);

// Central-difference oracle for the analytic Jacobian: perturbs the
// channel's post-activation by +-h and re-runs the downstream sub-chain.
Matrix fd_jacobian_wrt_channel(const PolicyModel& model, const Vector& obs, ChannelId ch,
                               double h);

// All channel ids in (layer, channel) ascending order, optionally
// restricted to a tag set.
std::vector<ChannelId> channels(const PolicyModel& model,
                                const std::optional<std::set<ModuleTag>>& tags = std::nullopt);

// Channels of the layers designated for quantization by default:
// everything except the projector and the action head.
std::vector<ChannelId> default_designated_channels(const PolicyModel& model);

// JSON model file: {"input_dim", "output_dim", "layers": [{"tag",
// "activation", "weight": [[...]], "bias": [...]}]}, one inner weight
// array per output channel.
PolicyModel load_model(const std::string& path);
void save_model(const PolicyModel& model, const std::string& path);

} // namespace actbit
