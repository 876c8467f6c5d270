#include "balab/model.hpp"

#include <cmath>
#include <cstdlib>
#include <sstream>

#include "balab/rng.hpp"

namespace balab {

namespace {

// Input and initialization gains. Sparse glyphs get amplified before the
// patch projection; adapter down projections start at half Kaiming so the
// paper's batch-1 learning rate stays stable; the tied readout gain keeps
// confident distributions expressible through the final rmsnorm.
constexpr double kPixelGain = 4.0;
constexpr double kAdapterDownGain = 0.5;
constexpr double kReadoutGain = 4.0;

Rng named_rng(uint64_t seed, const std::string& name) { return Rng(seed ^ fnv1a64(name)); }

Tensor xavier_uniform(std::vector<int> shape, int fan_in, int fan_out, double mult, DType dt,
                      Rng& rng) {
    const double limit = mult * std::sqrt(6.0 / (fan_in + fan_out));
    size_t n = 1;
    for (int e : shape) n *= static_cast<size_t>(e);
    std::vector<double> vals(n);
    for (double& v : vals) v = rng.uniform(-limit, limit);
    return Tensor::from_values(std::move(shape), vals, dt);
}

Tensor normal_init(std::vector<int> shape, double stddev, DType dt, Rng& rng) {
    size_t n = 1;
    for (int e : shape) n *= static_cast<size_t>(e);
    std::vector<double> vals(n);
    for (double& v : vals) v = stddev * rng.normal();
    return Tensor::from_values(std::move(shape), vals, dt);
}

Tensor sinusoid_table(int rows, int dim, DType dt) {
    std::vector<double> vals(static_cast<size_t>(rows) * static_cast<size_t>(dim));
    for (int pos = 0; pos < rows; ++pos)
        for (int j = 0; j < dim; j += 2) {
            const double freq = std::pow(10000.0, -static_cast<double>(j) / dim);
            vals[static_cast<size_t>(pos) * dim + j] = std::sin(pos * freq);
            if (j + 1 < dim) vals[static_cast<size_t>(pos) * dim + j + 1] = std::cos(pos * freq);
        }
    return Tensor::from_values({rows, dim}, vals, dt);
}

Tensor causal_mask(int s, DType dt) {
    Tensor m = Tensor::zeros({s, s}, dt);
    if (dt == DType::f32) {
        auto v = m.mutable_data<float>();
        for (int i = 0; i < s; ++i)
            for (int j = i + 1; j < s; ++j) v[static_cast<size_t>(i) * s + j] = -1e30f;
    } else {
        auto v = m.mutable_data<double>();
        for (int i = 0; i < s; ++i)
            for (int j = i + 1; j < s; ++j) v[static_cast<size_t>(i) * s + j] = -1e30;
    }
    return m;
}

void check_positive(int v, const char* field) {
    if (v <= 0) throw ConfigError(std::string(field) + " must be positive, got " + std::to_string(v));
}

}  // namespace

void ModelConfig::validate() const {
    check_positive(enc_layers, "model.enc_layers");
    check_positive(enc_dim, "model.enc_dim");
    check_positive(enc_heads, "model.enc_heads");
    check_positive(patch_size, "model.patch_size");
    check_positive(image_size, "model.image_size");
    check_positive(lm_layers, "model.lm_layers");
    check_positive(lm_dim, "model.lm_dim");
    check_positive(lm_heads, "model.lm_heads");
    check_positive(vocab, "model.vocab");
    check_positive(max_seq, "model.max_seq");
    check_positive(cls_stride, "model.cls_stride");
    check_positive(neck_dim, "model.neck_dim");
    if (enc_dim % enc_heads != 0)
        throw ConfigError("model.enc_heads must divide model.enc_dim (" + std::to_string(enc_heads) +
                          " vs " + std::to_string(enc_dim) + ")");
    if (lm_dim % lm_heads != 0)
        throw ConfigError("model.lm_heads must divide model.lm_dim (" + std::to_string(lm_heads) +
                          " vs " + std::to_string(lm_dim) + ")");
    if ((lm_dim / lm_heads) % 2 != 0)
        throw ConfigError("model.lm_dim / model.lm_heads must be even for the rotary transform");
    if (image_size % patch_size != 0)
        throw ConfigError("model.patch_size must divide model.image_size (" +
                          std::to_string(patch_size) + " vs " + std::to_string(image_size) + ")");
    if (enc_layers % cls_stride != 0)
        throw ConfigError("model.cls_stride must divide model.enc_layers (" +
                          std::to_string(cls_stride) + " vs " + std::to_string(enc_layers) + ")");
    if (neck_dim >= enc_dim || neck_dim >= lm_dim)
        throw ConfigError("model.neck_dim must be smaller than both model.enc_dim and model.lm_dim");
    if (placement.any()) {
        try {
            if (placement.vit_before_mha || placement.vit_before_ffn) site_adapter(enc_dim).validate();
            if (placement.lm_before_block) site_adapter(lm_dim).validate();
        } catch (const SpecError& e) {
            throw ConfigError(std::string("model.adapter: ") + e.what());
        }
    }
}

AdapterSpec ModelConfig::site_adapter(int channel_dim) const {
    AdapterSpec s = adapter;
    s.channel_dim = channel_dim;
    return s;
}

std::string ModelConfig::canonical() const {
    std::ostringstream os;
    os << "enc_layers=" << enc_layers << "\nenc_dim=" << enc_dim << "\nenc_heads=" << enc_heads
       << "\npatch_size=" << patch_size << "\nimage_size=" << image_size
       << "\nlm_layers=" << lm_layers << "\nlm_dim=" << lm_dim << "\nlm_heads=" << lm_heads
       << "\nvocab=" << vocab << "\nmax_seq=" << max_seq << "\ncls_stride=" << cls_stride
       << "\nneck_dim=" << neck_dim << "\nadapter.family=" << family_name(adapter.family)
       << "\nadapter.bottleneck_dim=" << adapter.bottleneck_dim
       << "\nadapter.groups=" << adapter.groups << "\nadapter.rank=" << adapter.rank
       << "\nadapter.route_temperature=" << adapter.route_temperature
       << "\nplacement.lm_before_block=" << placement.lm_before_block
       << "\nplacement.vit_before_mha=" << placement.vit_before_mha
       << "\nplacement.vit_before_ffn=" << placement.vit_before_ffn
       << "\nquantize_backbone=" << quantize_backbone << "\n";
    return os.str();
}

uint64_t ModelConfig::fingerprint(uint64_t seed) const {
    return fnv1a64(canonical() + "|seed=" + std::to_string(seed));
}

Tensor Linear::forward(Graph& g, const Tensor& x, DType dt) const {
    if (quant.active()) return add_rowvec(g, matmul(g, x, dequantize_weight(quant, dt)), b);
    return add_rowvec(g, matmul(g, x, w), b);
}

int Linear::in_dim() const { return quant.active() ? quant.q.cols() : w.rows(); }
int Linear::out_dim() const { return quant.active() ? quant.q.rows() : w.cols(); }

void Model::register_param(const std::string& name, Tensor t, bool trainable) {
    if (trainable) t.mark_leaf();
    params.push_back(ParamRef{name, std::move(t), trainable});
}

void Model::register_adapter(const std::string& prefix, Adapter& a) {
    for (auto& [local, t] : a.params) register_param(prefix + local, t, true);
}

Model Model::build(const ModelConfig& cfg, DType dt, uint64_t seed) {
    cfg.validate();
    if (!is_float_dtype(dt)) throw ContractError("model dtype must be float");
    Model m;
    m.cfg = cfg;
    m.dtype = dt;
    m.seed = seed;

    const int d = cfg.enc_dim, c = cfg.lm_dim;
    const double enc_out_mult = 1.0 / std::sqrt(2.0 * cfg.enc_layers);
    const double lm_out_mult = 1.0 / std::sqrt(2.0 * cfg.lm_layers);
    const int ffn_ratio = 4;

    auto make_linear = [&](const std::string& name, int in, int out, double mult, bool trainable,
                           bool fan_in_only = false) {
        Linear lin;
        Rng rng = named_rng(seed, name + ".w");
        lin.w = xavier_uniform({in, out}, in, fan_in_only ? 0 : out, mult, dt, rng);
        lin.b = Tensor::zeros({out}, dt);
        m.register_param(name + ".w", lin.w, trainable);
        m.register_param(name + ".b", lin.b, trainable);
        return lin;
    };
    auto make_gain = [&](const std::string& name, int dim) {
        Tensor t = Tensor::full({dim}, 1.0, dt);
        m.register_param(name, t, false);
        return t;
    };

    // encoder
    const int patch_in = cfg.patch_size * cfg.patch_size * 3;
    m.patch_proj = make_linear("enc.patch", patch_in, d, 1.0, false);
    {
        Rng rng = named_rng(seed, "enc.cls");
        m.cls_token = normal_init({1, d}, 0.02, dt, rng);
        m.register_param("enc.cls", m.cls_token, false);
    }
    m.enc_pos = sinusoid_table(cfg.num_patches() + 1, d, dt);
    m.enc.reserve(static_cast<size_t>(cfg.enc_layers));
    for (int l = 0; l < cfg.enc_layers; ++l) {
        const std::string p = "enc." + std::to_string(l) + ".";
        EncBlock blk;
        blk.ln1_g = make_gain(p + "ln1.g", d);
        blk.q = make_linear(p + "attn.q", d, d, 1.0, false);
        blk.k = make_linear(p + "attn.k", d, d, 1.0, false);
        blk.v = make_linear(p + "attn.v", d, d, 1.0, false);
        blk.o = make_linear(p + "attn.o", d, d, enc_out_mult, false);
        blk.ln2_g = make_gain(p + "ln2.g", d);
        blk.fc1 = make_linear(p + "ffn.fc1", d, ffn_ratio * d, 1.0, false);
        blk.fc2 = make_linear(p + "ffn.fc2", ffn_ratio * d, d, enc_out_mult, false);
        if (cfg.placement.vit_before_mha) {
            blk.ad_mha = Adapter::init(cfg.site_adapter(d), dt, seed ^ fnv1a64(p + "ad_mha"),
                                       kAdapterDownGain);
            m.register_adapter(p + "ad_mha.", *blk.ad_mha);
        }
        if (cfg.placement.vit_before_ffn) {
            blk.ad_ffn = Adapter::init(cfg.site_adapter(d), dt, seed ^ fnv1a64(p + "ad_ffn"),
                                       kAdapterDownGain);
            m.register_adapter(p + "ad_ffn.", *blk.ad_ffn);
        }
        m.enc.push_back(std::move(blk));
    }

    // language model
    {
        Rng rng = named_rng(seed, "lm.embed");
        m.tok_embed = normal_init({cfg.vocab, c}, 1.0 / std::sqrt(static_cast<double>(c)), dt, rng);
        m.register_param("lm.embed", m.tok_embed, false);
    }
    m.lm.reserve(static_cast<size_t>(cfg.lm_layers));
    for (int l = 0; l < cfg.lm_layers; ++l) {
        const std::string p = "lm." + std::to_string(l) + ".";
        LmBlock blk;
        blk.ln1_g = make_gain(p + "ln1.g", c);
        blk.q = make_linear(p + "attn.q", c, c, 1.0, false);
        blk.k = make_linear(p + "attn.k", c, c, 1.0, false);
        blk.v = make_linear(p + "attn.v", c, c, 1.0, false);
        blk.o = make_linear(p + "attn.o", c, c, lm_out_mult, false);
        blk.ln2_g = make_gain(p + "ln2.g", c);
        blk.gate = make_linear(p + "ffn.gate", c, ffn_ratio * c, 1.0, false);
        blk.up = make_linear(p + "ffn.up", c, ffn_ratio * c, 1.0, false);
        blk.down = make_linear(p + "ffn.down", ffn_ratio * c, c, lm_out_mult, false);
        if (cfg.placement.lm_before_block) {
            blk.ad =
                Adapter::init(cfg.site_adapter(c), dt, seed ^ fnv1a64(p + "ad"), kAdapterDownGain);
            m.register_adapter(p + "ad.", *blk.ad);
        }
        m.lm.push_back(std::move(blk));
    }
    m.lm_final_norm_g = make_gain("lm.norm.g", c);
    // tied readout: the unembedding is the scaled transpose of the token
    // embedding, so the residual stream decodes directly in embedding space
    {
        Linear lin;
        std::vector<double> wt(static_cast<size_t>(c) * static_cast<size_t>(cfg.vocab));
        for (int i = 0; i < c; ++i)
            for (int j = 0; j < cfg.vocab; ++j)
                wt[static_cast<size_t>(i) * cfg.vocab + j] = kReadoutGain * m.tok_embed.at(j, i);
        lin.w = Tensor::from_values({c, cfg.vocab}, wt, dt);
        lin.b = Tensor::zeros({cfg.vocab}, dt);
        m.register_param("lm.unembed.w", lin.w, false);
        m.register_param("lm.unembed.b", lin.b, false);
        m.unembed = lin;
    }

    // trainable head: neck + modality prefixes
    m.neck1 = make_linear("neck.l1", d, cfg.neck_dim, 1.0, true);
    // visual rows start as soft mixtures of token embeddings, so the frozen
    // language circuits read them natively from the first step
    {
        Linear lin;
        Rng rng = named_rng(seed, "neck.l2.w");
        std::vector<double> wt(static_cast<size_t>(cfg.neck_dim) * static_cast<size_t>(c), 0.0);
        const double coef = 1.0 / std::sqrt(static_cast<double>(cfg.vocab));
        for (int i = 0; i < cfg.neck_dim; ++i)
            for (int v = 0; v < cfg.vocab; ++v) {
                const double a = coef * rng.normal();
                for (int j = 0; j < c; ++j)
                    wt[static_cast<size_t>(i) * c + j] += a * m.tok_embed.at(v, j);
            }
        lin.w = Tensor::from_values({cfg.neck_dim, c}, wt, dt);
        lin.b = Tensor::zeros({c}, dt);
        m.register_param("neck.l2.w", lin.w, true);
        m.register_param("neck.l2.b", lin.b, true);
        m.neck2 = lin;
    }
    {
        Rng r1 = named_rng(seed, "prefix.image");
        Rng r2 = named_rng(seed, "prefix.text");
        m.prefix_image = normal_init({1, c}, 1.0 / std::sqrt(static_cast<double>(c)), dt, r1);
        m.prefix_text = normal_init({1, c}, 1.0 / std::sqrt(static_cast<double>(c)), dt, r2);
        m.register_param("prefix.image", m.prefix_image, true);
        m.register_param("prefix.text", m.prefix_text, true);
    }

    if (cfg.quantize_backbone) m.quantize();
    return m;
}

Tensor Model::mha(Graph& g, const Tensor& x, const Linear& wq, const Linear& wk, const Linear& wv,
                  const Linear& wo, int heads, bool causal, bool use_rope, int pos0) const {
    const int s = x.rows(), dm = x.cols(), dh = dm / heads;
    Tensor q = wq.forward(g, x, dtype);
    Tensor k = wk.forward(g, x, dtype);
    Tensor v = wv.forward(g, x, dtype);
    Tensor mask;
    if (causal) mask = causal_mask(s, dtype);
    std::vector<Tensor> head_outs;
    head_outs.reserve(static_cast<size_t>(heads));
    for (int h = 0; h < heads; ++h) {
        Tensor qh = slice_cols(g, q, h * dh, (h + 1) * dh);
        Tensor kh = slice_cols(g, k, h * dh, (h + 1) * dh);
        Tensor vh = slice_cols(g, v, h * dh, (h + 1) * dh);
        if (use_rope) {
            qh = rope(g, qh, pos0);
            kh = rope(g, kh, pos0);
        }
        Tensor att = scale(g, matmul(g, qh, transpose(g, kh)), 1.0 / std::sqrt(static_cast<double>(dh)));
        if (causal) att = add(g, att, mask);
        att = softmax(g, att);
        head_outs.push_back(matmul(g, att, vh));
    }
    return wo.forward(g, heads > 1 ? concat_cols(g, head_outs) : head_outs[0], dtype);
}

Tensor Model::enc_block_forward(Graph& g, const EncBlock& blk, const Tensor& x) const {
    Tensor t = rmsnorm(g, x, blk.ln1_g);
    if (blk.ad_mha) t = blk.ad_mha->forward(g, t);
    Tensor h = add(g, x, mha(g, t, blk.q, blk.k, blk.v, blk.o, cfg.enc_heads, false, false, 0));
    Tensor t2 = rmsnorm(g, h, blk.ln2_g);
    if (blk.ad_ffn) t2 = blk.ad_ffn->forward(g, t2);
    Tensor f = blk.fc2.forward(g, silu(g, blk.fc1.forward(g, t2, dtype)), dtype);
    return add(g, h, f);
}

Tensor Model::lm_block_forward(Graph& g, const LmBlock& blk, const Tensor& x, int pos0) const {
    Tensor z = x;
    if (blk.ad) z = blk.ad->forward(g, z);  // adapter applied prior to the block
    Tensor t = rmsnorm(g, z, blk.ln1_g);
    Tensor h = add(g, z, mha(g, t, blk.q, blk.k, blk.v, blk.o, cfg.lm_heads, true, true, pos0));
    Tensor t2 = rmsnorm(g, h, blk.ln2_g);
    Tensor gated = mul(g, silu(g, blk.gate.forward(g, t2, dtype)), blk.up.forward(g, t2, dtype));
    return add(g, h, blk.down.forward(g, gated, dtype));
}

Tensor Model::image_tensor(const std::vector<float>& pixels) const {
    const size_t expect =
        static_cast<size_t>(cfg.image_size) * static_cast<size_t>(cfg.image_size) * 3;
    if (pixels.size() != expect)
        throw InputError("image has " + std::to_string(pixels.size()) + " values, expected " +
                         std::to_string(expect));
    std::vector<double> vals(pixels.size());
    for (size_t i = 0; i < pixels.size(); ++i) vals[i] = kPixelGain * pixels[i];
    return Tensor::from_values({cfg.image_size, cfg.image_size, 3}, vals, dtype);
}

Tensor Model::encode_image(Graph& g, const Tensor& img) const {
    if (img.ndim() != 3 || img.dim(0) != cfg.image_size || img.dim(1) != cfg.image_size ||
        img.dim(2) != 3)
        throw InputError("encode_image: image shape " + shape_str(img.shape()) + ", expected [" +
                         std::to_string(cfg.image_size) + "x" + std::to_string(cfg.image_size) + "x3]");
    const int p = cfg.patch_size, side = cfg.image_size / p, np = side * side;
    const int pv = p * p * 3;
    // patch extraction is data movement, not a differentiable op
    std::vector<double> rows(static_cast<size_t>(np) * static_cast<size_t>(pv));
    for (int py = 0; py < side; ++py)
        for (int px = 0; px < side; ++px) {
            const size_t row = static_cast<size_t>(py) * side + px;
            size_t out = row * pv;
            for (int dy = 0; dy < p; ++dy)
                for (int dx = 0; dx < p; ++dx)
                    for (int ch = 0; ch < 3; ++ch)
                        rows[out++] = img.at(
                            (static_cast<size_t>(py * p + dy) * cfg.image_size + (px * p + dx)) * 3 +
                            ch);
        }
    Tensor patches = Tensor::from_values({np, pv}, rows, dtype);
    Tensor x = add(g, concat_rows(g, {cls_token, patch_proj.forward(g, patches, dtype)}), enc_pos);
    std::vector<Tensor> cls_rows;
    cls_rows.reserve(static_cast<size_t>(cfg.num_visual_tokens()));
    for (int l = 0; l < cfg.enc_layers; ++l) {
        x = enc_block_forward(g, enc[static_cast<size_t>(l)], x);
        if ((l + 1) % cfg.cls_stride == 0) cls_rows.push_back(slice_rows(g, x, 0, 1));
    }
    return cls_rows.size() > 1 ? concat_rows(g, cls_rows) : cls_rows[0];
}

Tensor Model::visual_neck(Graph& g, const Tensor& v) const {
    if (v.ndim() != 2 || v.cols() != cfg.enc_dim)
        throw DimensionError("visual_neck: input " + shape_str(v.shape()) + ", expected columns " +
                             std::to_string(cfg.enc_dim));
    return neck2.forward(g, silu(g, neck1.forward(g, v, dtype)), dtype);
}

Tensor Model::fuse(Graph& g, const Tensor& prefix, const Tensor* visual, const Tensor& text) const {
    std::vector<Tensor> parts{prefix};
    if (visual != nullptr) parts.push_back(*visual);
    parts.push_back(text);
    return concat_rows(g, parts);
}

Tensor Model::lm_forward(Graph& g, const Tensor& z) const {
    if (z.ndim() != 2 || z.cols() != cfg.lm_dim)
        throw DimensionError("lm_forward: input " + shape_str(z.shape()) + ", expected columns " +
                             std::to_string(cfg.lm_dim));
    if (z.rows() > cfg.max_seq)
        throw InputError("lm_forward: sequence length " + std::to_string(z.rows()) +
                         " exceeds max_seq " + std::to_string(cfg.max_seq));
    Tensor x = z;
    for (const LmBlock& blk : lm) x = lm_block_forward(g, blk, x, 0);
    return unembed.forward(g, rmsnorm(g, x, lm_final_norm_g), dtype);
}

Tensor Model::embed_tokens(Graph& g, const std::vector<int>& ids) const {
    return gather_rows(g, tok_embed, ids);
}

Tensor Model::prompt_rows(Graph& g, const Sample& s) const {
    if ((s.modality == Modality::text_image) != s.has_image())
        throw InputError("sample modality flag does not match image presence");
    Tensor text = embed_tokens(g, s.instruction);
    if (s.has_image()) {
        Tensor v = encode_image(g, image_tensor(s.image));
        Tensor vp = visual_neck(g, v);
        return fuse(g, prefix_image, &vp, text);
    }
    return fuse(g, prefix_text, nullptr, text);
}

Tensor Model::sample_loss(Graph& g, const Sample& s) const {
    if (s.answer.empty()) throw ContractError("sample has an empty answer region");
    if ((s.modality == Modality::text_image) != s.has_image())
        throw InputError("sample modality flag does not match image presence");
    std::vector<int> text_ids = s.instruction;
    text_ids.insert(text_ids.end(), s.answer.begin(), s.answer.end());
    Tensor text = embed_tokens(g, text_ids);
    Tensor rows;
    if (s.has_image()) {
        Tensor vp = visual_neck(g, encode_image(g, image_tensor(s.image)));
        rows = fuse(g, prefix_image, &vp, text);
    } else {
        rows = fuse(g, prefix_text, nullptr, text);
    }
    Tensor logits = lm_forward(g, rows);
    // loss over answer positions only: the row holding the token before
    // answer[j] predicts answer[j]; the last answer row predicts the end token
    const int nvis = s.has_image() ? cfg.num_visual_tokens() : 0;
    const int text_base = 1 + nvis;
    const int li = static_cast<int>(s.instruction.size());
    const int la = static_cast<int>(s.answer.size());
    std::vector<int> targets(static_cast<size_t>(logits.rows()), -1);
    for (int j = 0; j < la; ++j)
        targets[static_cast<size_t>(text_base + li + j - 1)] = s.answer[static_cast<size_t>(j)];
    targets[static_cast<size_t>(text_base + li + la - 1)] = kEosId;
    return cross_entropy(g, logits, targets);
}

std::vector<ParamRef> Model::trainable_params() const {
    std::vector<ParamRef> out;
    for (const ParamRef& p : params)
        if (p.trainable) out.push_back(p);
    return out;
}

std::vector<ParamRef> Model::frozen_params() const {
    std::vector<ParamRef> out;
    for (const ParamRef& p : params)
        if (!p.trainable) out.push_back(p);
    return out;
}

TrainablePartition Model::partition() const {
    TrainablePartition part;
    for (const ParamRef& p : params) (p.trainable ? part.trainable : part.frozen).push_back(p.name);
    return part;
}

int64_t Model::total_param_count() const {
    int64_t n = 0;
    for (const ParamRef& p : params) n += static_cast<int64_t>(p.tensor.numel());
    return n;
}

int64_t Model::trainable_param_count() const {
    int64_t n = 0;
    for (const ParamRef& p : params)
        if (p.trainable) n += static_cast<int64_t>(p.tensor.numel());
    return n;
}

MemoryReport Model::quantize() {
    if (quantized_) throw ContractError("model backbone is already quantized");
    MemoryReport report;
    auto swap_registry = [&](const std::string& wname, const QuantWeight& qw) {
        for (ParamRef& p : params) {
            if (p.name == wname) {
                p.name = wname + ".q8";
                p.tensor = qw.q;
                break;
            }
        }
        params.push_back(ParamRef{wname + ".scale", qw.scales, false});
    };
    auto quantize_linear = [&](Linear& lin, const std::string& name) {
        const int in = lin.w.rows(), out = lin.w.cols();
        QuantWeight qw = quantize_weight(lin.w, dtype);
        lin.quant = qw;
        lin.w = Tensor();
        swap_registry(name + ".w", qw);
        QuantLayerReport row;
        row.name = name;
        row.out_channels = out;
        row.in_channels = in;
        row.float_weight_bytes = 4ll * in * out;
        row.quant_weight_bytes = 1ll * in * out + 4ll * out;
        report.layers.push_back(row);
        report.float_weight_bytes += row.float_weight_bytes;
        report.quant_weight_bytes += row.quant_weight_bytes;
    };

    quantize_linear(patch_proj, "enc.patch");
    for (size_t l = 0; l < enc.size(); ++l) {
        const std::string p = "enc." + std::to_string(l) + ".";
        quantize_linear(enc[l].q, p + "attn.q");
        quantize_linear(enc[l].k, p + "attn.k");
        quantize_linear(enc[l].v, p + "attn.v");
        quantize_linear(enc[l].o, p + "attn.o");
        quantize_linear(enc[l].fc1, p + "ffn.fc1");
        quantize_linear(enc[l].fc2, p + "ffn.fc2");
    }
    for (size_t l = 0; l < lm.size(); ++l) {
        const std::string p = "lm." + std::to_string(l) + ".";
        quantize_linear(lm[l].q, p + "attn.q");
        quantize_linear(lm[l].k, p + "attn.k");
        quantize_linear(lm[l].v, p + "attn.v");
        quantize_linear(lm[l].o, p + "attn.o");
        quantize_linear(lm[l].gate, p + "ffn.gate");
        quantize_linear(lm[l].up, p + "ffn.up");
        quantize_linear(lm[l].down, p + "ffn.down");
    }
    quantize_linear(unembed, "lm.unembed");
    quantized_ = true;
    return report;
}

void Model::jiggle_trainables(uint64_t noise_seed) {
    for (ParamRef& p : params) {
        if (!p.trainable) continue;
        Rng rng = named_rng(noise_seed, "jiggle." + p.name);
        if (dtype == DType::f64) {
            auto s = p.tensor.mutable_data<double>();
            for (auto& v : s) v += rng.uniform(-0.05, 0.05);
        } else {
            auto s = p.tensor.mutable_data<float>();
            for (auto& v : s) v += static_cast<float>(rng.uniform(-0.05, 0.05));
        }
    }
}

}  // namespace balab
