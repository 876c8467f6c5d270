#include <doctest.h>

#include <cmath>

#include "balab/model.hpp"
#include "balab/ops.hpp"
#include "balab/quant.hpp"
#include "balab/rng.hpp"

using namespace balab;

namespace {

ModelConfig quant_config() {
    ModelConfig cfg;
    cfg.enc_layers = 4;
    cfg.enc_dim = 16;
    cfg.enc_heads = 2;
    cfg.patch_size = 4;
    cfg.image_size = 8;
    cfg.lm_layers = 2;
    cfg.lm_dim = 16;
    cfg.lm_heads = 2;
    cfg.vocab = 64;
    cfg.max_seq = 48;
    cfg.cls_stride = 2;
    cfg.neck_dim = 8;
    cfg.adapter.bottleneck_dim = 4;
    cfg.adapter.groups = 2;
    return cfg;
}

}  // namespace

TEST_CASE("per-channel quantization examples") {
    // column [0, 1.27]: scale 0.01, q = [0, 127], dequant exact
    Tensor w = Tensor::from_values({2, 1}, {0.0, 1.27}, DType::f64);
    QuantWeight qw = quantize_weight(w, DType::f64);
    CHECK(qw.scales.at(size_t{0}) == doctest::Approx(0.01).epsilon(1e-15));
    CHECK(qw.q.at(0, 0) == 0.0);
    CHECK(qw.q.at(0, 1) == 127.0);
    Tensor back = dequantize_weight(qw, DType::f64);
    CHECK(back.at(0, 0) == 0.0);
    CHECK(back.at(1, 0) == 1.27);

    // all-zero column: sentinel scale 1.0, zero codes
    Tensor z = Tensor::zeros({3, 2}, DType::f64);
    QuantWeight qz = quantize_weight(z, DType::f64);
    CHECK(qz.scales.at(size_t{0}) == 1.0);
    CHECK(qz.scales.at(1) == 1.0);
    for (size_t i = 0; i < qz.q.numel(); ++i) CHECK(qz.q.at(i) == 0.0);
}

TEST_CASE("quantization round trip bound and idempotence") {
    Rng rng(19);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> vals(8 * 6);
        for (auto& v : vals) v = rng.normal();
        Tensor w = Tensor::from_values({8, 6}, vals, DType::f32);
        QuantWeight q1 = quantize_weight(w, DType::f32);

        // elementwise |w - dequant| <= scale/2
        Tensor dq = dequantize_weight(q1, DType::f64);
        for (int i = 0; i < 8; ++i)
            for (int j = 0; j < 6; ++j) {
                const double s = q1.scales.at(static_cast<size_t>(j));
                CHECK(std::abs(w.at(i, j) - dq.at(i, j)) <= s / 2 * (1.0 + 1e-12));
            }

        // quantize(dequantize(quantize(w))) == quantize(w), bitwise
        Tensor dq32 = dequantize_weight(q1, DType::f32);
        QuantWeight q2 = quantize_weight(dq32, DType::f32);
        CHECK(bitwise_equal(q1.q, q2.q));
        CHECK(bitwise_equal(q1.scales, q2.scales));
    }
}

TEST_CASE("model quantization accounting and fidelity") {
    Model mf = Model::build(quant_config(), DType::f32, 33);
    Model mq = Model::build(quant_config(), DType::f32, 33);
    MemoryReport report = mq.quantize();
    CHECK(mq.quantized());
    CHECK_THROWS_AS(mq.quantize(), ContractError);

    // bytes match the shape formula exactly: float/4 + 4*out per layer
    CHECK(report.layers.size() == 4u * 6u + 2u * 7u + 2u);  // enc blocks, lm blocks, patch+unembed
    for (const auto& row : report.layers) {
        CHECK(row.float_weight_bytes == 4ll * row.in_channels * row.out_channels);
        CHECK(row.quant_weight_bytes == row.float_weight_bytes / 4 + 4ll * row.out_channels);
    }
    CHECK(report.reduction_ratio() > 3.0);

    // every frozen linear is int8-backed now
    CHECK(mq.patch_proj.quant.active());
    CHECK(mq.unembed.quant.active());
    for (const auto& blk : mq.enc) {
        CHECK(blk.q.quant.active());
        CHECK(blk.fc2.quant.active());
    }
    for (const auto& blk : mq.lm) {
        CHECK(blk.gate.quant.active());
        CHECK(blk.down.quant.active());
    }

    // quantized vs float logits stay close in relative L2
    Graph g;
    g.enabled = false;
    Rng rng(3);
    for (int trial = 0; trial < 20; ++trial) {
        Sample s;
        s.modality = Modality::text_image;
        s.image.assign(8 * 8 * 3, 0.0f);
        for (float& v : s.image) v = static_cast<float>(rng.uniform());
        s.instruction = {token_id("count"), token_id("red"), token_id("?"), kAnsId};
        s.answer = {token_id("1")};
        Tensor lf = mf.lm_forward(g, mf.prompt_rows(g, s));
        Tensor lq = mq.lm_forward(g, mq.prompt_rows(g, s));
        double num = 0.0, den = 0.0;
        for (size_t i = 0; i < lf.numel(); ++i) {
            const double d = lf.at(i) - lq.at(i);
            num += d * d;
            den += lf.at(i) * lf.at(i);
        }
        CHECK(std::sqrt(num) / std::sqrt(den) <= 3e-2);
    }
}

TEST_CASE("quantized weights never record gradients") {
    Model mq = Model::build(quant_config(), DType::f32, 33);
    mq.quantize();
    Sample s;
    s.modality = Modality::text_only;
    s.instruction = {token_id("copy"), token_id("a"), kAnsId};
    s.answer = {token_id("a")};
    Graph g;
    Tensor loss = mq.sample_loss(g, s);
    g.backward(loss);
    // gradient flows to the trainable head but no int8 tensor carries grads
    bool some_trainable_grad = false;
    for (const ParamRef& p : mq.trainable_params())
        if (p.tensor.has_grad()) some_trainable_grad = true;
    CHECK(some_trainable_grad);
    for (const ParamRef& p : mq.params)
        if (p.tensor.dtype() == DType::i8) CHECK_FALSE(p.tensor.has_grad());
}
