#include "dcv/encoder.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "dcv/error.hpp"
#include "dcv/ops.hpp"
#include "dcv/tape.hpp"

namespace dcv {

void EncoderConfig::validate() const {
    auto positive = [](std::size_t v, const char* name) {
        if (v == 0) throw ConfigError(std::string(name) + " must be >= 1");
    };
    positive(layers, "layers");
    positive(heads, "heads");
    positive(width, "width");
    positive(patch_size, "patch_size");
    positive(image_side, "image_side");
    positive(channels, "channels");
    positive(joint_dim, "joint_dim");
    positive(mlp_ratio, "mlp_ratio");
    positive(vocab_size, "vocab_size");
    positive(text_len, "text_len");
    positive(text_layers, "text_layers");
    if (width % heads != 0) {
        throw ConfigError("width " + std::to_string(width) + " is not divisible by heads " + std::to_string(heads));
    }
    if (image_side % patch_size != 0) {
        throw ConfigError("image_side " + std::to_string(image_side) + " is not divisible by patch_size " +
                          std::to_string(patch_size));
    }
    if (!(ln_eps > 0.0)) throw ConfigError("ln_eps must be positive");
}

// ---------------------------------------------------------------- parameters

void ModelParams::add(std::string name, Tensor value) {
    if (index_.count(name)) throw ArgumentError("duplicate parameter " + name);
    index_.emplace(name, entries_.size());
    entries_.emplace_back(std::move(name), std::move(value));
}

const Tensor& ModelParams::get(std::string_view name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ArgumentError("unknown parameter " + std::string(name));
    return entries_[it->second].second;
}

Tensor& ModelParams::get(std::string_view name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ArgumentError("unknown parameter " + std::string(name));
    return entries_[it->second].second;
}

bool ModelParams::contains(std::string_view name) const { return index_.find(name) != index_.end(); }

std::size_t ModelParams::parameter_count() const {
    std::size_t n = 0;
    for (const auto& [name, t] : entries_) n += t.size();
    return n;
}

bool ModelParams::bitwise_equal(const ModelParams& other) const {
    if (!(config_ == other.config_) || entries_.size() != other.entries_.size()) return false;
    for (std::size_t i = 0; i < entries_.size(); ++i) {
        if (entries_[i].first != other.entries_[i].first) return false;
        if (!entries_[i].second.bitwise_equal(other.entries_[i].second)) return false;
    }
    return true;
}

namespace {

void block_layout(std::vector<std::pair<std::string, Shape>>& out, const std::string& prefix, std::size_t d,
                  std::size_t hidden) {
    out.emplace_back(prefix + "ln1_g", Shape{d});
    out.emplace_back(prefix + "ln1_b", Shape{d});
    out.emplace_back(prefix + "qkv_w", Shape{d, 3 * d});
    // No key bias: it shifts every score in a row equally and softmax ignores that.
    out.emplace_back(prefix + "q_b", Shape{d});
    out.emplace_back(prefix + "v_b", Shape{d});
    out.emplace_back(prefix + "out_w", Shape{d, d});
    out.emplace_back(prefix + "out_b", Shape{d});
    out.emplace_back(prefix + "ln2_g", Shape{d});
    out.emplace_back(prefix + "ln2_b", Shape{d});
    out.emplace_back(prefix + "fc1_w", Shape{d, hidden});
    out.emplace_back(prefix + "fc1_b", Shape{hidden});
    out.emplace_back(prefix + "fc2_w", Shape{hidden, d});
    out.emplace_back(prefix + "fc2_b", Shape{d});
}

std::string block_prefix(const char* tower, std::size_t l) {
    return std::string(tower) + ".block" + std::to_string(l) + ".";
}

bool ends_with(const std::string& s, std::string_view suffix) {
    return s.size() >= suffix.size() && s.compare(s.size() - suffix.size(), suffix.size(), suffix) == 0;
}

} // namespace

std::vector<std::pair<std::string, Shape>> parameter_layout(const EncoderConfig& c) {
    c.validate();
    const std::size_t d = c.width;
    const std::size_t hidden = c.width * c.mlp_ratio;
    std::vector<std::pair<std::string, Shape>> out;
    out.emplace_back("visual.patch_w", Shape{c.patch_dim(), d});
    out.emplace_back("visual.cls", Shape{d});
    out.emplace_back("visual.pos", Shape{c.tokens(), d});
    for (std::size_t l = 0; l < c.layers; ++l) block_layout(out, block_prefix("visual", l), d, hidden);
    out.emplace_back("visual.lnf_g", Shape{d});
    out.emplace_back("visual.lnf_b", Shape{d});
    out.emplace_back("visual.proj", Shape{d, c.joint_dim});
    out.emplace_back("text.tok", Shape{c.vocab_size, d});
    out.emplace_back("text.pos", Shape{c.text_len, d});
    for (std::size_t l = 0; l < c.text_layers; ++l) block_layout(out, block_prefix("text", l), d, hidden);
    out.emplace_back("text.lnf_g", Shape{d});
    out.emplace_back("text.lnf_b", Shape{d});
    out.emplace_back("text.proj", Shape{d, c.joint_dim});
    out.emplace_back("logit_scale", Shape{1});
    return out;
}

ModelParams init_params(const EncoderConfig& config, Rng& rng, double temperature) {
    if (!(temperature > 0.0)) throw ArgumentError("temperature must be positive");
    ModelParams params(config);
    for (const auto& [name, shape] : parameter_layout(config)) {
        Tensor t(shape);
        auto v = t.mutable_data();
        if (ends_with(name, "_g")) {
            std::fill(v.begin(), v.end(), 1.0);
        } else if (ends_with(name, "_b")) {
            // zero
        } else if (name == "logit_scale") {
            v[0] = std::log(1.0 / temperature);
        } else if (name == "text.tok") {
            for (auto& x : v) x = 0.5 * rng.normal();
        } else if (name == "visual.cls" || name == "visual.pos" || name == "text.pos") {
            for (auto& x : v) x = 0.1 * rng.normal();
        } else {
            const double sd = 1.0 / std::sqrt(static_cast<double>(shape[0]));
            for (auto& x : v) x = sd * rng.normal();
        }
        params.add(name, std::move(t));
    }
    return params;
}

Embedding Embedding::normalized_copy() const {
    NoGradScope off;
    return Embedding{ops::l2_normalize(vector.detach()), true};
}

Tensor ResidualLedger::total() const {
    const std::size_t j = joint_dim();
    Tensor out = input_term.detach();
    auto o = out.mutable_data();
    auto m = msa_terms.data();
    for (std::size_t i = 0; i < m.size(); ++i) o[i % j] += m[i];
    auto p = mlp_terms.data();
    for (std::size_t i = 0; i < p.size(); ++i) o[i % j] += p[i];
    return out;
}

Tensor ResidualLedger::layer_msa(std::size_t layer) const {
    if (layer >= layers()) throw ArgumentError("layer " + std::to_string(layer) + " out of range");
    const std::size_t j = joint_dim();
    const std::size_t per_layer = heads() * tokens() * j;
    Tensor out(Shape{j});
    auto o = out.mutable_data();
    auto m = msa_terms.data();
    for (std::size_t i = 0; i < per_layer; ++i) o[i % j] += m[layer * per_layer + i];
    return out;
}

// ---------------------------------------------------------------- forward

namespace {

struct BlockOut {
    Tensor x;
    Tensor attention;
    Tensor values;
    Tensor mlp;
};

const std::vector<std::size_t> kSplitHeads = {0, 2, 1, 3};

BlockOut transformer_block(const ModelParams& p, const std::string& prefix, const Tensor& x, std::size_t heads,
                           double eps) {
    const std::size_t batch = x.shape()[0];
    const std::size_t tokens = x.shape()[1];
    const std::size_t d = x.shape()[2];
    const std::size_t dh = d / heads;

    const Tensor h = ops::layer_norm(x, p.get(prefix + "ln1_g"), p.get(prefix + "ln1_b"), eps);
    const std::vector<Tensor> bias_parts = {p.get(prefix + "q_b"), Tensor(Shape{d}, 0.0), p.get(prefix + "v_b")};
    const Tensor qkv = ops::add(ops::matmul(h, p.get(prefix + "qkv_w")), ops::concat(bias_parts, 0));
    auto split = [&](std::size_t which) {
        const Tensor part = ops::reshape(ops::slice(qkv, 2, which * d, d), Shape{batch, tokens, heads, dh});
        return ops::permute(part, kSplitHeads);
    };
    const Tensor q = split(0);
    const Tensor k = split(1);
    const Tensor v = split(2);
    const Tensor scores = ops::scale(ops::matmul(q, k, false, true), 1.0 / std::sqrt(static_cast<double>(dh)));
    const Tensor attn = ops::softmax(scores, -1);
    const Tensor mixed = ops::reshape(ops::permute(ops::matmul(attn, v), kSplitHeads), Shape{batch, tokens, d});
    const Tensor attn_out = ops::add(ops::matmul(mixed, p.get(prefix + "out_w")), p.get(prefix + "out_b"));
    const Tensor x1 = ops::add(x, attn_out);

    const Tensor h2 = ops::layer_norm(x1, p.get(prefix + "ln2_g"), p.get(prefix + "ln2_b"), eps);
    const Tensor hidden = ops::gelu(ops::add(ops::matmul(h2, p.get(prefix + "fc1_w")), p.get(prefix + "fc1_b")));
    const Tensor mlp = ops::add(ops::matmul(hidden, p.get(prefix + "fc2_w")), p.get(prefix + "fc2_b"));
    return BlockOut{ops::add(x1, mlp), attn, v, mlp};
}

Tensor cls_row(const Tensor& x) {
    const std::size_t batch = x.shape()[0];
    const std::size_t d = x.shape()[2];
    return ops::reshape(ops::slice(x, 1, 0, 1), Shape{batch, d});
}

void check_finite(const Tensor& t, const std::string& where) {
    if (!t.all_finite()) throw NumericError("non-finite activation in " + where);
}

} // namespace

Tensor patchify(const EncoderConfig& c, std::span<const Image> images) {
    if (images.empty()) throw ArgumentError("patchify: empty image batch");
    const std::size_t grid = c.grid();
    const std::size_t ps = c.patch_size;
    Tensor out(Shape{images.size(), c.patches(), c.patch_dim()});
    auto o = out.mutable_data();
    std::size_t w = 0;
    for (std::size_t b = 0; b < images.size(); ++b) {
        const Image& img = images[b];
        if (img.height != c.image_side || img.width != c.image_side || img.channels != c.channels ||
            img.pixels.size() != img.height * img.width * img.channels) {
            throw ConfigError("image " + std::to_string(img.height) + "x" + std::to_string(img.width) + "x" +
                              std::to_string(img.channels) + " does not match encoder input " +
                              std::to_string(c.image_side) + "x" + std::to_string(c.image_side) + "x" +
                              std::to_string(c.channels));
        }
        for (double v : img.pixels) {
            if (!(v >= 0.0 && v <= 1.0)) throw ArgumentError("pixel value outside [0, 1]");
        }
        for (std::size_t gy = 0; gy < grid; ++gy) {
            for (std::size_t gx = 0; gx < grid; ++gx) {
                for (std::size_t py = 0; py < ps; ++py) {
                    for (std::size_t px = 0; px < ps; ++px) {
                        for (std::size_t ch = 0; ch < c.channels; ++ch) {
                            o[w++] = img.at(gy * ps + py, gx * ps + px, ch);
                        }
                    }
                }
            }
        }
    }
    return out;
}

VisualTrace visual_forward(const ModelParams& params, const Tensor& patches) {
    const EncoderConfig& c = params.config();
    if (patches.rank() != 3 || patches.shape()[1] != c.patches() || patches.shape()[2] != c.patch_dim()) {
        throw ConfigError("patch tensor " + shape_string(patches.shape()) + " does not match config");
    }
    const std::size_t batch = patches.shape()[0];
    const std::size_t d = c.width;

    const Tensor tokens = ops::matmul(patches, params.get("visual.patch_w"));
    const Tensor cls = ops::add(Tensor(Shape{batch, 1, d}, 0.0), params.get("visual.cls"));
    const std::vector<Tensor> parts = {cls, tokens};
    Tensor x = ops::add(ops::concat(parts, 1), params.get("visual.pos"));

    VisualTrace trace;
    trace.cls_input = cls_row(x);
    for (std::size_t l = 0; l < c.layers; ++l) {
        BlockOut out = transformer_block(params, block_prefix("visual", l), x, c.heads, c.ln_eps);
        check_finite(out.x, "visual layer " + std::to_string(l));
        trace.attention.push_back(std::move(out.attention));
        trace.values.push_back(std::move(out.values));
        trace.mlp_cls.push_back(cls_row(out.mlp));
        x = std::move(out.x);
    }
    trace.cls_final = cls_row(x);
    const Tensor normed = ops::layer_norm(trace.cls_final, params.get("visual.lnf_g"), params.get("visual.lnf_b"),
                                          c.ln_eps);
    trace.embedding = ops::matmul(normed, params.get("visual.proj"));
    return trace;
}

Tensor weighted_token_contributions(const ModelParams& params, const VisualTrace& trace,
                                    std::span<const double> layer_weights) {
    const EncoderConfig& c = params.config();
    if (layer_weights.size() != c.layers) {
        throw ArgumentError("got " + std::to_string(layer_weights.size()) + " layer weights for " +
                            std::to_string(c.layers) + " layers");
    }
    const std::size_t batch = trace.embedding.shape()[0];
    const std::size_t t = c.tokens();
    const std::size_t d = c.width;
    std::optional<Tensor> total;
    for (std::size_t l = 0; l < c.layers; ++l) {
        if (layer_weights[l] == 0.0) continue;
        const std::string prefix = block_prefix("visual", l);
        const Tensor& attn = trace.attention[l];  // [B, M, T, T]
        const Tensor cls_attn = ops::reshape(ops::slice(attn, 2, 0, 1), Shape{batch, c.heads, t, 1});
        const Tensor weighted = ops::mul(trace.values[l], cls_attn);  // [B, M, T, dh]
        const Tensor merged = ops::reshape(ops::permute(weighted, kSplitHeads), Shape{batch, t, d});
        Tensor layer = ops::matmul(merged, params.get(prefix + "out_w"));
        // The output bias reaches the class token with total attention weight 1;
        // spread it over source tokens in proportion to their head-averaged weight.
        const Tensor share = ops::reshape(ops::mean(ops::reshape(cls_attn, Shape{batch, c.heads, t}), 1),
                                          Shape{batch, t, 1});
        layer = ops::add(layer, ops::mul(share, params.get(prefix + "out_b")));
        layer = ops::scale(layer, layer_weights[l]);
        total = total ? ops::add(*total, layer) : layer;
    }
    if (!total) throw ArgumentError("all layer weights are zero");
    const Tensor folded = ops::ln_fold(*total, trace.cls_final, params.get("visual.lnf_g"), c.ln_eps);
    return ops::matmul(folded, params.get("visual.proj"));
}

ResidualLedger build_ledger(const ModelParams& params, const VisualTrace& trace, std::size_t index) {
    NoGradScope off;
    const EncoderConfig& c = params.config();
    const std::size_t batch = trace.embedding.shape()[0];
    if (index >= batch) throw ArgumentError("ledger index out of range");
    const std::size_t t = c.tokens();
    const std::size_t d = c.width;
    const std::size_t dh = c.head_dim();
    const std::size_t jd = c.joint_dim;
    const std::size_t heads = c.heads;

    const Tensor ref = ops::slice(trace.cls_final.detach(), 0, index, 1);  // [1, d]
    const Tensor& gain = params.get("visual.lnf_g");
    const Tensor& proj = params.get("visual.proj");

    // Residual-space parts for this image: [L*M*T] msa rows, then L mlp rows, then the input row.
    const std::size_t msa_rows = c.layers * heads * t;
    Tensor parts(Shape{1, msa_rows + c.layers + 1, d});
    auto pv = parts.mutable_data();
    for (std::size_t l = 0; l < c.layers; ++l) {
        const std::string prefix = block_prefix("visual", l);
        auto ow = params.get(prefix + "out_w").data();
        auto ob = params.get(prefix + "out_b").data();
        auto attn = trace.attention[l].data();
        auto vals = trace.values[l].data();
        for (std::size_t m = 0; m < heads; ++m) {
            for (std::size_t i = 0; i < t; ++i) {
                const double a = attn[((index * heads + m) * t + 0) * t + i];
                const double* v = vals.data() + ((index * heads + m) * t + i) * dh;
                double* row = pv.data() + ((l * heads + m) * t + i) * d;
                for (std::size_t k = 0; k < dh; ++k) {
                    const double av = a * v[k];
                    const double* w = ow.data() + (m * dh + k) * d;
                    for (std::size_t j = 0; j < d; ++j) row[j] += av * w[j];
                }
                for (std::size_t j = 0; j < d; ++j) row[j] += a * ob[j] / static_cast<double>(heads);
            }
        }
        auto mlp = trace.mlp_cls[l].data();
        std::copy_n(mlp.begin() + static_cast<std::ptrdiff_t>(index * d), d,
                    pv.begin() + static_cast<std::ptrdiff_t>((msa_rows + l) * d));
    }
    auto cin = trace.cls_input.data();
    std::copy_n(cin.begin() + static_cast<std::ptrdiff_t>(index * d), d,
                pv.begin() + static_cast<std::ptrdiff_t>((msa_rows + c.layers) * d));

    const Tensor folded = ops::ln_fold(parts, ref, gain, c.ln_eps);
    const Tensor joint = ops::matmul(folded, proj);  // [1, rows, J]
    auto jv = joint.data();

    ResidualLedger ledger;
    ledger.msa_terms = Tensor(Shape{c.layers, heads, t, jd},
                              std::vector<double>(jv.begin(), jv.begin() + static_cast<std::ptrdiff_t>(msa_rows * jd)));
    ledger.mlp_terms = Tensor(Shape{c.layers, jd},
                              std::vector<double>(jv.begin() + static_cast<std::ptrdiff_t>(msa_rows * jd),
                                                  jv.begin() + static_cast<std::ptrdiff_t>((msa_rows + c.layers) * jd)));
    // Input term carries the final layernorm bias as well.
    const Tensor bias_joint = ops::matmul(ops::reshape(params.get("visual.lnf_b"), Shape{1, d}), proj);
    Tensor input(Shape{jd});
    for (std::size_t j = 0; j < jd; ++j) input[j] = jv[(msa_rows + c.layers) * jd + j] + bias_joint[j];
    ledger.input_term = std::move(input);
    return ledger;
}

std::vector<ImageEncoding> encode_images(std::span<const Image> images, const ModelParams& params,
                                         bool record_ledger, std::size_t batch_size) {
    if (batch_size == 0) throw ArgumentError("batch_size must be >= 1");
    NoGradScope off;
    std::vector<ImageEncoding> out;
    out.reserve(images.size());
    const std::size_t jd = params.config().joint_dim;
    for (std::size_t start = 0; start < images.size(); start += batch_size) {
        const std::size_t n = std::min(batch_size, images.size() - start);
        const Tensor patches = patchify(params.config(), images.subspan(start, n));
        const VisualTrace trace = visual_forward(params, patches);
        auto e = trace.embedding.data();
        for (std::size_t b = 0; b < n; ++b) {
            ImageEncoding enc;
            enc.embedding.vector =
                Tensor(Shape{jd}, std::vector<double>(e.begin() + static_cast<std::ptrdiff_t>(b * jd),
                                                      e.begin() + static_cast<std::ptrdiff_t>((b + 1) * jd)));
            if (record_ledger) enc.ledger = build_ledger(params, trace, b);
            out.push_back(std::move(enc));
        }
    }
    return out;
}

ImageEncoding encode_image(const Image& image, const ModelParams& params, bool record_ledger) {
    auto out = encode_images(std::span<const Image>(&image, 1), params, record_ledger);
    return std::move(out.front());
}

// ---------------------------------------------------------------- text

namespace {

void check_ids(const EncoderConfig& c, const TokenIds& ids) {
    if (ids.empty()) throw ArgumentError("empty token sequence");
    if (ids.size() > c.text_len) {
        throw ArgumentError("token sequence of length " + std::to_string(ids.size()) + " exceeds text_len " +
                            std::to_string(c.text_len));
    }
    for (auto id : ids) {
        if (id >= c.vocab_size) throw ArgumentError("token id " + std::to_string(id) + " outside vocabulary");
    }
}

} // namespace

Tensor encode_texts(const ModelParams& params, std::span<const TokenIds> texts) {
    const EncoderConfig& c = params.config();
    if (texts.empty()) throw ArgumentError("encode_texts: no texts");
    for (const auto& ids : texts) check_ids(c, ids);

    std::map<std::size_t, std::vector<std::size_t>> by_length;
    for (std::size_t i = 0; i < texts.size(); ++i) by_length[texts[i].size()].push_back(i);

    std::vector<Tensor> groups;
    std::vector<std::size_t> position(texts.size());
    std::size_t row = 0;
    for (const auto& [len, members] : by_length) {
        std::vector<std::size_t> flat;
        for (auto i : members) {
            flat.insert(flat.end(), texts[i].begin(), texts[i].end());
            position[i] = row++;
        }
        const std::size_t g = members.size();
        Tensor x = ops::reshape(ops::embedding(params.get("text.tok"), flat), Shape{g, len, c.width});
        x = ops::add(x, ops::slice(params.get("text.pos"), 0, 0, len));
        for (std::size_t l = 0; l < c.text_layers; ++l) {
            x = transformer_block(params, block_prefix("text", l), x, c.heads, c.ln_eps).x;
        }
        check_finite(x, "text encoder");
        x = ops::layer_norm(x, params.get("text.lnf_g"), params.get("text.lnf_b"), c.ln_eps);
        groups.push_back(ops::matmul(ops::mean(x, 1), params.get("text.proj")));
    }
    const Tensor stacked = groups.size() == 1 ? groups.front() : ops::concat(groups, 0);
    return ops::embedding(stacked, position);
}

Embedding encode_text(const TokenIds& ids, const ModelParams& params) {
    NoGradScope off;
    const std::vector<TokenIds> one = {ids};
    const Tensor out = encode_texts(params, one);
    return Embedding{out.reshaped(Shape{params.config().joint_dim}), false};
}

} // namespace dcv
