#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "balab/adapters.hpp"
#include "balab/quant.hpp"
#include "balab/tasks.hpp"
#include "balab/tensor.hpp"

namespace balab {

struct PlacementPolicy {
    bool lm_before_block = true;
    bool vit_before_mha = true;
    bool vit_before_ffn = true;
    bool any() const { return lm_before_block || vit_before_mha || vit_before_ffn; }
};

struct ModelConfig {
    // image encoder
    int enc_layers = 8;
    int enc_dim = 64;
    int enc_heads = 4;
    int patch_size = 4;
    int image_size = 16;
    // language model
    int lm_layers = 4;
    int lm_dim = 64;
    int lm_heads = 4;
    int vocab = 64;
    int max_seq = 64;
    // fusion
    int cls_stride = 4;
    int neck_dim = 16;
    AdapterSpec adapter;  // channel_dim is overridden per placement site
    PlacementPolicy placement;
    bool quantize_backbone = false;

    void validate() const;  // throws ConfigError naming the offending field
    int num_visual_tokens() const { return enc_layers / cls_stride; }
    int num_patches() const {
        const int side = image_size / patch_size;
        return side * side;
    }
    AdapterSpec site_adapter(int channel_dim) const;
    // canonical text form; the fingerprint hashes it together with the build seed
    std::string canonical() const;
    uint64_t fingerprint(uint64_t seed) const;
};

struct Linear {
    Tensor w;  // [in x out]; cleared once quantized
    Tensor b;  // [out]
    QuantWeight quant;

    Tensor forward(Graph& g, const Tensor& x, DType dt) const;
    int in_dim() const;
    int out_dim() const;
};

struct EncBlock {
    Tensor ln1_g, ln2_g;
    Linear q, k, v, o;
    Linear fc1, fc2;
    std::optional<Adapter> ad_mha, ad_ffn;
};

struct LmBlock {
    Tensor ln1_g, ln2_g;
    Linear q, k, v, o;
    Linear gate, up, down;
    std::optional<Adapter> ad;
};

struct ParamRef {
    std::string name;
    Tensor tensor;
    bool trainable = false;
};

struct TrainablePartition {
    std::vector<std::string> frozen;
    std::vector<std::string> trainable;
};

// Tiny ViT-style encoder + decoder LM joined by a two-stage visual neck.
// Backbone weights are frozen; adapters, neck and modality prefixes train.
class Model {
  public:
    ModelConfig cfg;
    DType dtype = DType::f32;
    uint64_t seed = 0;

    Linear patch_proj;
    Tensor cls_token;  // [1 x d]
    Tensor enc_pos;    // constant sinusoidal table, not a parameter
    std::vector<EncBlock> enc;

    Tensor tok_embed;  // [vocab x c]
    std::vector<LmBlock> lm;
    Tensor lm_final_norm_g;
    Linear unembed;

    Linear neck1, neck2;               // d -> d_v -> c, trainable
    Tensor prefix_image, prefix_text;  // [1 x c] modality embeddings, trainable

    std::vector<ParamRef> params;  // stable registration order

    static Model build(const ModelConfig& cfg, DType dt, uint64_t seed);

    // [cls] row collected after every cls_stride-th block -> [n x d]
    Tensor encode_image(Graph& g, const Tensor& img) const;
    Tensor image_tensor(const std::vector<float>& pixels) const;
    Tensor visual_neck(Graph& g, const Tensor& v) const;  // [n x d] -> [n x c]
    // row concatenation [prefix, visual?, text]
    Tensor fuse(Graph& g, const Tensor& prefix, const Tensor* visual, const Tensor& text) const;
    Tensor lm_forward(Graph& g, const Tensor& z) const;  // [s x c] -> [s x vocab]
    Tensor embed_tokens(Graph& g, const std::vector<int>& ids) const;

    Tensor enc_block_forward(Graph& g, const EncBlock& blk, const Tensor& x) const;
    Tensor lm_block_forward(Graph& g, const LmBlock& blk, const Tensor& x, int pos0) const;

    // prefix + visual rows + instruction embeddings, ready for decoding
    Tensor prompt_rows(Graph& g, const Sample& s) const;
    // next-token cross-entropy over the answer span plus the end token
    Tensor sample_loss(Graph& g, const Sample& s) const;

    std::vector<ParamRef> trainable_params() const;
    std::vector<ParamRef> frozen_params() const;
    TrainablePartition partition() const;
    int64_t total_param_count() const;
    int64_t trainable_param_count() const;

    // replace every frozen linear weight with int8 + per-channel scales
    MemoryReport quantize();
    bool quantized() const { return quantized_; }

    // add small noise to every trainable tensor; gradient-check helper that
    // wakes up branches which are dead at identity-init
    void jiggle_trainables(uint64_t noise_seed);

  private:
    bool quantized_ = false;
    void register_param(const std::string& name, Tensor t, bool trainable);
    void register_adapter(const std::string& prefix, Adapter& a);
    Tensor mha(Graph& g, const Tensor& x, const Linear& wq, const Linear& wk, const Linear& wv,
               const Linear& wo, int heads, bool causal, bool use_rope, int pos0) const;
};

}  // namespace balab
