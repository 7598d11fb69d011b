#include "actbit/quant.hpp"

#include "actbit/allocator.hpp"
#include "test_helpers.hpp"

#include <doctest.h>

#include <cmath>
#include <filesystem>

using namespace actbit;
using namespace actbit::testing;

namespace {

// Independent scalar re-implementation of the symmetric quantizer:
// scale = max|w| / (2^(b-1)-1), q = clamp(round(w/scale)), deq = q*scale.
std::vector<double> scalar_dequant(const std::vector<double>& row, int bits) {
    double max_abs = 0.0;
    for (double w : row) {
        max_abs = std::max(max_abs, std::abs(w));
    }
    const double qmax = static_cast<double>((1 << (bits - 1)) - 1);
    const double scale = max_abs > 0.0 ? max_abs / qmax : 1.0;
    std::vector<double> out;
    for (double w : row) {
        double q = std::nearbyint(w / scale);
        q = std::min(std::max(q, -qmax - 1.0), qmax);
        out.push_back(q * scale);
    }
    return out;
}

CalibrationSet tiny_calib(const PolicyModel& model, Rng& rng, int n = 16) {
    CalibrationSet calib;
    calib.source_trajectories = 1;
    for (int i = 0; i < n; ++i) {
        calib.observations.push_back(random_vector(rng, model.input_dim));
    }
    return calib;
}

} // namespace

TEST_CASE("channel_scale forced by the formula") {
    Vector row(3);
    row << -1.0, 0.5, 1.0;
    const ChannelQuantParams p = channel_scale(row, BitWidth::b8);
    CHECK(p.scale == doctest::Approx(1.0 / 127.0).epsilon(1e-15));
    CHECK(p.zero_point == 0);
}

TEST_CASE("channel_scale degenerate all-zero row") {
    Vector row = Vector::Zero(5);
    const ChannelQuantParams p = channel_scale(row, BitWidth::b4);
    CHECK(p.scale == 1.0);
}

TEST_CASE("channel_scale rejects bit 0 and 16") {
    Vector row(2);
    row << 1.0, -1.0;
    CHECK_THROWS_AS(channel_scale(row, BitWidth::b0), std::invalid_argument);
    CHECK_THROWS_AS(channel_scale(row, BitWidth::b16), std::invalid_argument);
}

TEST_CASE("2-bit grid is {-2,-1,0,1} * scale") {
    Rng rng(20);
    Vector row(64);
    for (Index i = 0; i < row.size(); ++i) {
        row[i] = rng.normal();
    }
    const ChannelQuantParams p = channel_scale(row, BitWidth::b2);
    const QuantizedRow qr = quantize_channel(row, p);
    for (Index i = 0; i < row.size(); ++i) {
        CHECK(qr.q[i] >= -2);
        CHECK(qr.q[i] <= 1);
        CHECK(qr.deq[i] == qr.q[i] * p.scale);
    }
}

TEST_CASE("quantize_channel direct evaluation at 8 bits") {
    Vector row(3);
    row << -1.0, 0.5, 1.0;
    const ChannelQuantParams p = channel_scale(row, BitWidth::b8);
    const QuantizedRow qr = quantize_channel(row, p);
    CHECK(qr.q[0] == -127);
    CHECK(qr.q[1] == 64); // 63.5 ties to even
    CHECK(qr.q[2] == 127);
    for (Index i = 0; i < 3; ++i) {
        CHECK(std::abs(qr.deq[i] - row[i]) <= p.scale / 2.0 + 1e-15);
    }
}

TEST_CASE("round-trip bound on unclamped entries, clamp boundaries exact") {
    Rng rng(21);
    for (BitWidth bit : kGridBits) {
        for (int trial = 0; trial < 50; ++trial) {
            Vector row(40);
            for (Index i = 0; i < row.size(); ++i) {
                row[i] = rng.normal() * 2.0;
            }
            // Natural params never clamp; a shrunken scale exercises the clamp.
            const ChannelQuantParams p = channel_scale(row, bit);
            for (double shrink : {1.0, 0.25}) {
                ChannelQuantParams q = p;
                q.scale *= shrink;
                const QuantizedRow qr = quantize_channel(row, q);
                const int qmin = -(1 << (to_int(bit) - 1));
                const int qmax = (1 << (to_int(bit) - 1)) - 1;
                for (Index i = 0; i < row.size(); ++i) {
                    const double r = row[i] / q.scale;
                    if (r > qmax + 0.5) {
                        CHECK(qr.deq[i] == qmax * q.scale);
                    } else if (r < qmin - 0.5) {
                        CHECK(qr.deq[i] == qmin * q.scale);
                    } else {
                        CHECK(std::abs(row[i] - qr.deq[i]) <= q.scale / 2.0 + 1e-12);
                    }
                }
            }
        }
    }
}

TEST_CASE("quantize_channel honors a nonzero zero_point") {
    // The asymmetric path is kept in the mechanism even though weight
    // params default to symmetric (zero_point 0).
    Vector row(3);
    row << 0.0, 0.5, 1.0;
    ChannelQuantParams p{BitWidth::b8, 1.0 / 127.0, -32};
    const QuantizedRow qr = quantize_channel(row, p);
    for (Index i = 0; i < row.size(); ++i) {
        CHECK(qr.q[i] == static_cast<int>(std::nearbyint(row[i] / p.scale)) + p.zero_point);
        CHECK(qr.deq[i] == (qr.q[i] - p.zero_point) * p.scale);
        CHECK(std::abs(qr.deq[i] - row[i]) <= p.scale / 2.0 + 1e-15);
    }
}

TEST_CASE("monotone fidelity: dequantization MSE improves with bits") {
    Rng rng(22);
    Vector row(128);
    for (Index i = 0; i < row.size(); ++i) {
        row[i] = rng.normal();
    }
    auto mse = [&](BitWidth bit) {
        const QuantizedRow qr = quantize_channel(row, channel_scale(row, bit));
        return (qr.deq - row).squaredNorm() / static_cast<double>(row.size());
    };
    CHECK(mse(BitWidth::b8) <= mse(BitWidth::b4));
    CHECK(mse(BitWidth::b4) <= mse(BitWidth::b2));
}

TEST_CASE("apply_allocation: all-16 is bit-identical passthrough") {
    Rng rng(23);
    PolicyModel model = random_net(rng, 3, 6, 4, 2);
    CalibrationSet calib = tiny_calib(model, rng);
    const BitAllocation alloc =
        uniform_allocation(default_designated_channels(model), BitWidth::b16);
    const QuantizedModel qm = apply_allocation(model, alloc, BitWidth::b16, calib);
    for (const Vector& obs : calib.observations) {
        CHECK(quantized_action(qm, obs) == forward(model, obs).action());
    }
}

TEST_CASE("apply_allocation: all-0 equals zeroed rows") {
    Rng rng(24);
    PolicyModel model = random_net(rng, 3, 6, 4, 2);
    CalibrationSet calib = tiny_calib(model, rng);
    const auto designated = default_designated_channels(model);
    const BitAllocation alloc = uniform_allocation(designated, BitWidth::b0);
    const QuantizedModel qm = apply_allocation(model, alloc, BitWidth::b16, calib);

    PolicyModel zeroed = model;
    for (const ChannelId& ch : designated) {
        zeroed.layers[static_cast<std::size_t>(ch.layer)].weight.row(ch.channel).setZero();
        zeroed.layers[static_cast<std::size_t>(ch.layer)].bias[ch.channel] = 0.0;
    }
    for (const Vector& obs : calib.observations) {
        CHECK(quantized_action(qm, obs) == forward(zeroed, obs).action());
    }
}

TEST_CASE("apply_allocation: mixed allocation matches a scalar oracle") {
    Rng rng(25);
    PolicyModel model = random_net(rng, 2, 4, 3, 2);
    CalibrationSet calib = tiny_calib(model, rng, 8);
    const auto designated = channels(model); // every channel, both layers
    BitAllocation alloc;
    alloc.designated = designated;
    alloc.budget = 16.0;
    const BitWidth cycle[] = {BitWidth::b2, BitWidth::b4, BitWidth::b8, BitWidth::b16,
                              BitWidth::b0};
    for (std::size_t i = 0; i < designated.size(); ++i) {
        alloc.assignment[designated[i]] = cycle[i % 5];
    }
    const QuantizedModel qm = apply_allocation(model, alloc, BitWidth::b16, calib);

    // Scalar re-implementation: dequantize every row, then a plain loop
    // forward with the layer activations.
    std::vector<std::vector<std::vector<double>>> weights;
    std::vector<std::vector<double>> biases;
    for (std::size_t l = 0; l < model.layers.size(); ++l) {
        const Layer& layer = model.layers[l];
        std::vector<std::vector<double>> w;
        std::vector<double> b;
        for (Index r = 0; r < layer.weight.rows(); ++r) {
            std::vector<double> row;
            for (Index c = 0; c < layer.weight.cols(); ++c) {
                row.push_back(layer.weight(r, c));
            }
            const BitWidth bits =
                alloc.assignment.at(ChannelId{static_cast<int>(l), static_cast<int>(r)});
            if (bits == BitWidth::b0) {
                row.assign(row.size(), 0.0);
                b.push_back(0.0);
            } else {
                if (bits != BitWidth::b16) {
                    row = scalar_dequant(row, to_int(bits));
                }
                b.push_back(layer.bias[r]);
            }
            w.push_back(std::move(row));
        }
        weights.push_back(std::move(w));
        biases.push_back(std::move(b));
    }
    for (const Vector& obs : calib.observations) {
        std::vector<double> x(obs.data(), obs.data() + obs.size());
        for (std::size_t l = 0; l < weights.size(); ++l) {
            std::vector<double> y(weights[l].size());
            for (std::size_t r = 0; r < weights[l].size(); ++r) {
                double acc = biases[l][r];
                for (std::size_t c = 0; c < weights[l][r].size(); ++c) {
                    acc += weights[l][r][c] * x[c];
                }
                const Activation act = model.layers[l].activation;
                if (act == Activation::relu) {
                    acc = std::max(acc, 0.0);
                } else if (act == Activation::tanh) {
                    acc = std::tanh(acc);
                }
                y[r] = acc;
            }
            x = std::move(y);
        }
        const Vector got = quantized_action(qm, obs);
        REQUIRE(got.size() == static_cast<Index>(x.size()));
        for (Index i = 0; i < got.size(); ++i) {
            CHECK(got[i] == doctest::Approx(x[i]).epsilon(1e-14));
        }
    }
}

TEST_CASE("apply_allocation rejects missing assignments") {
    Rng rng(26);
    PolicyModel model = random_net(rng, 2, 4, 3, 2);
    CalibrationSet calib = tiny_calib(model, rng, 2);
    BitAllocation alloc;
    alloc.designated = default_designated_channels(model);
    alloc.budget = 16.0;
    CHECK_THROWS_AS(apply_allocation(model, alloc, BitWidth::b16, calib), std::invalid_argument);
}

TEST_CASE("calibrate_activations: constant activations collapse the range") {
    // Single layer y = 0*x + c.
    Matrix w = Matrix::Zero(2, 2);
    Vector b(2);
    b << 0.7, 0.7;
    PolicyModel model =
        make_policy_model({make_layer(w, b, Activation::identity, ModuleTag::action_head)});
    Rng rng(27);
    CalibrationSet calib = tiny_calib(model, rng, 32);
    const auto ranges = calibrate_activations(model, calib, BitWidth::b8, 99.9);
    REQUIRE(ranges.size() == 1);
    CHECK(ranges[0].first == doctest::Approx(0.7));
    CHECK(ranges[0].second == doctest::Approx(0.7));
    Vector c(1);
    c << 0.7;
    CHECK(fake_quantize_activation(c, ranges[0].first, ranges[0].second, BitWidth::b8)[0] ==
          doctest::Approx(0.7));
}

TEST_CASE("calibrate_activations: percentile 100 is exact min/max") {
    Matrix w = Matrix::Identity(1, 1);
    PolicyModel model = make_policy_model(
        {make_layer(w, Vector::Zero(1), Activation::identity, ModuleTag::action_head)});
    CalibrationSet calib;
    calib.source_trajectories = 1;
    for (double v : {0.4, -1.5, 2.25, 0.0}) {
        Vector obs(1);
        obs << v;
        calib.observations.push_back(obs);
    }
    const auto ranges = calibrate_activations(model, calib, BitWidth::b8, 100.0);
    CHECK(ranges[0].first == -1.5);
    CHECK(ranges[0].second == 2.25);
}

TEST_CASE("calibrate_activations: uniform[0,1] tail percentiles") {
    Matrix w = Matrix::Identity(1, 1);
    PolicyModel model = make_policy_model(
        {make_layer(w, Vector::Zero(1), Activation::identity, ModuleTag::action_head)});
    CalibrationSet calib;
    calib.source_trajectories = 1;
    Rng rng(28);
    for (int i = 0; i < 100000; ++i) {
        Vector obs(1);
        obs << rng.uniform();
        calib.observations.push_back(obs);
    }
    const auto ranges = calibrate_activations(model, calib, BitWidth::b8, 99.9);
    CHECK(std::abs(ranges[0].first - 0.001) <= 0.01);
    CHECK(std::abs(ranges[0].second - 0.999) <= 0.01);
}

TEST_CASE("calibrate_activations rejects empty calibration sets") {
    Matrix w = Matrix::Identity(1, 1);
    PolicyModel model = make_policy_model(
        {make_layer(w, Vector::Zero(1), Activation::identity, ModuleTag::action_head)});
    CalibrationSet empty;
    CHECK_THROWS(calibrate_activations(model, empty, BitWidth::b8, 99.9));
}

TEST_CASE("fake_quantize_activation grid and clamp behavior") {
    const double lo = -1.0, hi = 1.0;
    SUBCASE("grid points are fixed points") {
        const double scale = (hi - lo) / 255.0;
        Vector x(3);
        x << lo, lo + 7 * scale, hi;
        const Vector y = fake_quantize_activation(x, lo, hi, BitWidth::b8);
        for (Index i = 0; i < 3; ++i) {
            CHECK(y[i] == doctest::Approx(x[i]).epsilon(1e-15));
        }
    }
    SUBCASE("out-of-range input clamps to the endpoints") {
        Vector x(2);
        x << -3.0, 42.0;
        const Vector y = fake_quantize_activation(x, lo, hi, BitWidth::b8);
        CHECK(y[0] == lo);
        CHECK(y[1] == hi);
    }
    SUBCASE("8-bit over [0,255] is exact on integer inputs") {
        Vector x(4);
        x << 0.0, 1.0, 128.0, 255.0;
        const Vector y = fake_quantize_activation(x, 0.0, 255.0, BitWidth::b8);
        CHECK(y == x);
    }
    SUBCASE("16-bit is the identity") {
        Vector x(3);
        x << -7.5, 0.123456789, 1e6;
        CHECK(fake_quantize_activation(x, lo, hi, BitWidth::b16) == x);
    }
    SUBCASE("lo > hi is rejected") {
        CHECK_THROWS_AS(fake_quantize_activation(Vector::Zero(1), 1.0, -1.0, BitWidth::b8),
                        std::invalid_argument);
    }
}

TEST_CASE("bit map round trip") {
    Rng rng(29);
    PolicyModel model = random_net(rng, 2, 4, 3, 2);
    const auto designated = default_designated_channels(model);
    BitAllocation alloc = uniform_allocation(designated, BitWidth::b4);
    const BitMapFile map = make_bit_map(model, alloc, BitWidth::b16, {"backbone"});
    const std::string path =
        (std::filesystem::temp_directory_path() / "actbit_bitmap_roundtrip.json").string();
    save_bit_map(map, path);
    const BitMapFile loaded = load_bit_map(path);
    CHECK(loaded.activation_bits == 16);
    REQUIRE(loaded.assignments.size() == map.assignments.size());
    for (std::size_t i = 0; i < map.assignments.size(); ++i) {
        CHECK(loaded.assignments[i].layer == map.assignments[i].layer);
        CHECK(loaded.assignments[i].channel == map.assignments[i].channel);
        CHECK(loaded.assignments[i].bits == map.assignments[i].bits);
        CHECK(loaded.assignments[i].scale == map.assignments[i].scale);
    }
    std::remove(path.c_str());
}
