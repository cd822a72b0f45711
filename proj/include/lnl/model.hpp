#ifndef LNL_MODEL_HPP
#define LNL_MODEL_HPP

#include <functional>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "lnl/config.hpp"
#include "lnl/nn.hpp"

namespace lnl {

enum class Mode { train, eval };

/// Word embeddings [B*n, m, c] and sentence embeddings [B, n+1, d] (class token at row 0).
struct TokenState {
    Tensor words;
    Tensor sentences;
};

/// Transformer block over the m words of each sentence. Its FFN is always an MLP.
struct InnerBlock {
    LayerNorm norm1;
    MultiHeadAttention attn;
    LayerNorm norm2;
    Mlp mlp;

    InnerBlock() = default;
    InnerBlock(const LnlConfig& cfg, Rng& rng)
        : norm1(cfg.word_dim),
          attn(cfg.word_dim, cfg.inner_heads, rng),
          norm2(cfg.word_dim),
          mlp(cfg.word_dim, cfg.word_dim * cfg.ffn_ratio, rng) {}

    Tensor operator()(const Tensor& words, Tensor* attn_out = nullptr) const {
        auto a = attn(norm1(words));
        if (attn_out) *attn_out = a.attn;
        Tensor mid = words + a.out;
        return mid + mlp(norm2(mid));
    }

    void collect(const std::string& prefix, ParamList& out) const {
        norm1.collect(prefix + ".norm1", out);
        attn.collect(prefix + ".attn", out);
        norm2.collect(prefix + ".norm2", out);
        mlp.collect(prefix + ".mlp", out);
    }
};

/// Adds FC(VEC(LN(Y_i))) to sentence i >= 1; the class token row is left alone.
struct WordToSentence {
    LayerNorm norm;
    Linear fc;  // m*c -> d

    WordToSentence() = default;
    WordToSentence(const LnlConfig& cfg, Rng& rng)
        : norm(cfg.word_dim), fc(cfg.words_per_patch() * cfg.word_dim, cfg.sentence_dim, rng) {}

    Tensor operator()(const Tensor& sentences, const Tensor& words) const {
        if (sentences.rank() != 3 || words.rank() != 3) throw ShapeError("word_to_sentence: bad ranks");
        const std::size_t batch = sentences.shape()[0];
        const std::size_t n = sentences.shape()[1] - 1;
        if (words.shape()[0] != batch * n) {
            throw ShapeError("word_to_sentence: " + shape_str(words.shape()) + " words for sentences " +
                             shape_str(sentences.shape()));
        }
        const std::size_t flat = words.shape()[1] * words.shape()[2];
        Tensor injected = fc(reshape(norm(words), {batch, n, flat}));
        Tensor cls = slice(sentences, 1, 0, 1);
        Tensor patches = slice(sentences, 1, 1, n) + injected;
        return concat({cls, patches}, 1);
    }

    void collect(const std::string& prefix, ParamList& out) const {
        norm.collect(prefix + ".norm", out);
        fc.collect(prefix + ".fc", out);
    }
};

/**
 * Locality feed-forward branch on the sentence grid:
 * expand d -> gamma*d, GELU, S2I, depth-wise k x k, I2S, shrink gamma*d -> d.
 * The class token bypasses the branch, so its output row is zero.
 */
struct LocallyFeedForward {
    Linear expand;
    DepthwiseConv dw;
    Linear shrink;

    LocallyFeedForward() = default;
    LocallyFeedForward(const LnlConfig& cfg, Rng& rng)
        : expand(cfg.sentence_dim, cfg.sentence_dim * cfg.ffn_ratio, rng),
          dw(cfg.sentence_dim * cfg.ffn_ratio, cfg.dw_kernel, rng),
          shrink(cfg.sentence_dim * cfg.ffn_ratio, cfg.sentence_dim, rng) {}

    Tensor operator()(const Tensor& z) const {
        if (z.rank() != 3 || z.shape()[1] < 2) throw ShapeError("locally_ff expects [B, n+1, d], got " + shape_str(z.shape()));
        const std::size_t batch = z.shape()[0];
        const std::size_t n = z.shape()[1] - 1;
        exact_sqrt(n);
        Tensor tokens = slice(z, 1, 1, n);
        Tensor grid = seq_to_image(gelu(expand(tokens)));
        Tensor local = shrink(image_to_seq(dw(grid)));
        return concat({Tensor::zeros({batch, 1, z.shape()[2]}), local}, 1);
    }

    void collect(const std::string& prefix, ParamList& out) const {
        expand.collect(prefix + ".expand", out);
        dw.collect(prefix + ".dw", out);
        shrink.collect(prefix + ".shrink", out);
    }
};

struct OuterOutput {
    Tensor sentences;
    Tensor attn;        // [B, h, n+1, n+1]
    Tensor after_attn;  // Z' (post-attention residual)
};

/// Transformer block over sentences; the FFN branch is the MLP or the locality FFN.
struct OuterBlock {
    FfnVariant variant = FfnVariant::locally_ff;
    LayerNorm norm1;
    MultiHeadAttention attn;
    LayerNorm norm2;
    Mlp mlp;                  // used when variant == mlp
    LocallyFeedForward local; // used when variant == locally_ff

    OuterBlock() = default;
    OuterBlock(const LnlConfig& cfg, Rng& rng)
        : variant(cfg.ffn_variant),
          norm1(cfg.sentence_dim),
          attn(cfg.sentence_dim, cfg.outer_heads, rng),
          norm2(cfg.sentence_dim) {
        if (variant == FfnVariant::mlp) {
            mlp = Mlp(cfg.sentence_dim, cfg.sentence_dim * cfg.ffn_ratio, rng);
        } else {
            local = LocallyFeedForward(cfg, rng);
        }
    }

    Tensor ffn_branch(const Tensor& z) const {
        return variant == FfnVariant::mlp ? mlp(norm2(z)) : local(norm2(z));
    }

    OuterOutput operator()(const Tensor& sentences) const {
        auto a = attn(norm1(sentences));
        Tensor mid = sentences + a.out;
        return {mid + ffn_branch(mid), a.attn, mid};
    }

    void collect(const std::string& prefix, ParamList& out) const {
        norm1.collect(prefix + ".norm1", out);
        attn.collect(prefix + ".attn", out);
        norm2.collect(prefix + ".norm2", out);
        if (variant == FfnVariant::mlp) {
            mlp.collect(prefix + ".mlp", out);
        } else {
            local.collect(prefix + ".local", out);
        }
    }
};

struct LnlBlock {
    InnerBlock inner;
    WordToSentence inject;
    OuterBlock outer;
};

struct ForwardOutput {
    Tensor logits;                         // [B, classes]
    std::vector<Tensor> outer_attention;   // per layer, [B, h, n+1, n+1]
    std::vector<Tensor> word_features;     // per layer, [B*n, m, c]
    std::vector<Tensor> sentence_features; // per layer, [B, n+1, d]
};

/// Called after each outer block in train mode; may replace the sentence tensor.
using SentenceHook = std::function<Tensor(const Tensor& sentences, std::size_t layer)>;

/// Closed-form trainable parameter count for a configuration.
inline std::size_t param_count(const LnlConfig& cfg) {
    cfg.validate();
    const std::size_t c = cfg.word_dim;
    const std::size_t d = cfg.sentence_dim;
    const std::size_t m = cfg.words_per_patch();
    const std::size_t n = cfg.num_patches();
    const std::size_t s = cfg.word_size;
    const std::size_t p = cfg.patch_size;
    const std::size_t g = cfg.ffn_ratio;
    const std::size_t k = cfg.dw_kernel;
    auto linear = [](std::size_t in, std::size_t out) { return in * out + out; };
    auto attention = [&](std::size_t dim) { return 4 * linear(dim, dim); };
    auto mlp = [&](std::size_t dim) { return linear(dim, g * dim) + linear(g * dim, dim); };

    std::size_t embed = linear(3 * s * s, c) + m * c + linear(3 * p * p, d) + d + (n + 1) * d;
    std::size_t inner = 4 * c + attention(c) + mlp(c);
    std::size_t inject = 2 * c + linear(m * c, d);
    std::size_t ffn = cfg.ffn_variant == FfnVariant::mlp ? mlp(d) : mlp(d) + g * d * k * k + g * d;
    std::size_t outer = 4 * d + attention(d) + ffn;
    std::size_t head = 2 * d + linear(d, cfg.num_classes);
    return embed + cfg.depth * (inner + inject + outer) + head;
}

/**
 * Locality-in-locality vision transformer: TNT word/sentence streams with a
 * switchable outer feed-forward network.
 */
class LnlModel {
  public:
    /// Pixels arrive in [0, 1] and are shifted by this before embedding.
    static constexpr double kPixelCenter = 0.5;

    LnlModel(const LnlConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
        cfg_.validate();
        Rng rng(seed);
        const std::size_t c = cfg_.word_dim;
        const std::size_t d = cfg_.sentence_dim;
        word_embed_ = Linear(3 * cfg_.word_size * cfg_.word_size, c, rng);
        word_pos_ = make_param({cfg_.words_per_patch(), c});
        fill_truncated_normal(word_pos_, rng, 0.02);
        patch_embed_ = Linear(3 * cfg_.patch_size * cfg_.patch_size, d, rng);
        cls_token_ = make_param({1, d});
        fill_truncated_normal(cls_token_, rng, 0.02);
        sentence_pos_ = make_param({cfg_.num_patches() + 1, d});
        fill_truncated_normal(sentence_pos_, rng, 0.02);
        for (std::size_t l = 0; l < cfg_.depth; ++l) {
            LnlBlock block;
            block.inner = InnerBlock(cfg_, rng);
            block.inject = WordToSentence(cfg_, rng);
            block.outer = OuterBlock(cfg_, rng);
            blocks_.push_back(std::move(block));
        }
        head_norm_ = LayerNorm(d);
        head_ = Linear(d, cfg_.num_classes, rng);
        fill_truncated_normal(head_.weight, rng, 0.02);
        build_indices();
    }

    const LnlConfig& config() const { return cfg_; }
    const std::vector<LnlBlock>& blocks() const { return blocks_; }
    std::vector<LnlBlock>& blocks() { return blocks_; }

    /// Splits images [B, 3, H, W] into word and sentence embeddings.
    TokenState tokenize(const Tensor& images) const {
        const std::size_t batch = check_images(images);
        const std::size_t n = cfg_.num_patches();
        const std::size_t m = cfg_.words_per_patch();
        const std::size_t d = cfg_.sentence_dim;
        const std::size_t word_len = 3 * cfg_.word_size * cfg_.word_size;
        const std::size_t patch_len = 3 * cfg_.patch_size * cfg_.patch_size;
        const Tensor centered = add_scalar(images, -kPixelCenter);

        Tensor words = gather(centered, batched_index(word_index_, batch), {batch * n, m, word_len});
        Tensor word_emb = word_embed_(words) + word_pos_;

        Tensor patches = gather(centered, batched_index(patch_index_, batch), {batch, n, patch_len});
        Tensor cls = expand(cls_token_, {batch, 1, d});
        Tensor sentences = concat({cls, patch_embed_(patches)}, 1) + sentence_pos_;
        return {word_emb, sentences};
    }

    /// Eq-level pieces exposed for tests and tools.
    Tensor inner_block(std::size_t layer, const Tensor& words) const { return blocks_.at(layer).inner(words); }
    Tensor word_to_sentence(std::size_t layer, const Tensor& sentences, const Tensor& words) const {
        return blocks_.at(layer).inject(sentences, words);
    }
    OuterOutput outer_block(std::size_t layer, const Tensor& sentences) const {
        return blocks_.at(layer).outer(sentences);
    }

    ForwardOutput forward(const Tensor& images, Mode mode = Mode::eval, const SentenceHook& hook = {}) const {
        ForwardOutput out;
        TokenState state = tokenize(images);
        for (std::size_t l = 0; l < blocks_.size(); ++l) {
            const auto& block = blocks_[l];
            state.words = block.inner(state.words);
            state.sentences = block.inject(state.sentences, state.words);
            auto outer = block.outer(state.sentences);
            state.sentences = outer.sentences;
            if (mode == Mode::train && hook) state.sentences = hook(state.sentences, l);
            out.outer_attention.push_back(outer.attn);
            out.word_features.push_back(state.words);
            out.sentence_features.push_back(state.sentences);
        }
        Tensor cls = reshape(slice(state.sentences, 1, 0, 1), {state.sentences.shape()[0], cfg_.sentence_dim});
        out.logits = head_(head_norm_(cls));
        return out;
    }

    Tensor logits(const Tensor& images) const { return forward(images, Mode::eval).logits; }

    ParamList parameters() const {
        ParamList out;
        word_embed_.collect("word_embed", out);
        out.push_back({"word_pos", word_pos_});
        patch_embed_.collect("patch_embed", out);
        out.push_back({"cls_token", cls_token_});
        out.push_back({"sentence_pos", sentence_pos_});
        for (std::size_t l = 0; l < blocks_.size(); ++l) {
            const std::string prefix = "blocks." + std::to_string(l);
            blocks_[l].inner.collect(prefix + ".inner", out);
            blocks_[l].inject.collect(prefix + ".inject", out);
            blocks_[l].outer.collect(prefix + ".outer", out);
        }
        head_norm_.collect("head_norm", out);
        head_.collect("head", out);
        return out;
    }

    std::size_t num_parameters() const {
        std::size_t total = 0;
        for (const auto& p : parameters()) total += p.tensor.numel();
        return total;
    }

    void zero_grad() const {
        for (auto p : parameters()) p.tensor.zero_grad();
    }

  private:
    std::size_t check_images(const Tensor& images) const {
        if (images.rank() != 4 || images.shape()[1] != 3 || images.shape()[2] != cfg_.image_size ||
            images.shape()[3] != cfg_.image_size) {
            throw ShapeError("expected images [B, 3, " + std::to_string(cfg_.image_size) + ", " +
                             std::to_string(cfg_.image_size) + "], got " + shape_str(images.shape()));
        }
        return images.shape()[0];
    }

    // Flat pixel offsets within one image: words ordered (patch, word, channel, y, x),
    // patches ordered (patch, channel, y, x).
    void build_indices() {
        const std::size_t H = cfg_.image_size;
        const std::size_t p = cfg_.patch_size;
        const std::size_t s = cfg_.word_size;
        const std::size_t pg = cfg_.patch_grid();
        const std::size_t wg = cfg_.word_grid();
        for (std::size_t pr = 0; pr < pg; ++pr)
            for (std::size_t pc = 0; pc < pg; ++pc) {
                for (std::size_t wr = 0; wr < wg; ++wr)
                    for (std::size_t wc = 0; wc < wg; ++wc)
                        for (std::size_t ch = 0; ch < 3; ++ch)
                            for (std::size_t dy = 0; dy < s; ++dy)
                                for (std::size_t dx = 0; dx < s; ++dx)
                                    word_index_.push_back(ch * H * H + (pr * p + wr * s + dy) * H +
                                                          (pc * p + wc * s + dx));
                for (std::size_t ch = 0; ch < 3; ++ch)
                    for (std::size_t dy = 0; dy < p; ++dy)
                        for (std::size_t dx = 0; dx < p; ++dx)
                            patch_index_.push_back(ch * H * H + (pr * p + dy) * H + (pc * p + dx));
            }
    }

    std::shared_ptr<const std::vector<std::size_t>> batched_index(const std::vector<std::size_t>& per_image,
                                                                  std::size_t batch) const {
        const std::size_t image_len = 3 * cfg_.image_size * cfg_.image_size;
        auto index = std::make_shared<std::vector<std::size_t>>();
        index->reserve(per_image.size() * batch);
        for (std::size_t b = 0; b < batch; ++b)
            for (auto i : per_image) index->push_back(b * image_len + i);
        return index;
    }

    LnlConfig cfg_;
    Linear word_embed_;
    Tensor word_pos_;
    Linear patch_embed_;
    Tensor cls_token_;
    Tensor sentence_pos_;
    std::vector<LnlBlock> blocks_;
    LayerNorm head_norm_;
    Linear head_;
    std::vector<std::size_t> word_index_;
    std::vector<std::size_t> patch_index_;
};

}  // namespace lnl

#endif
