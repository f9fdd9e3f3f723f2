#include "uniicl/backbone.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <random>
#include <sstream>

#include "uniicl/errors.hpp"
#include "uniicl/io.hpp"

namespace uniicl {

namespace {

constexpr char kCheckpointMagic[8] = {'U', 'I', 'C', 'L', 'B', 'K', 'B', 'N'};
constexpr std::uint32_t kCheckpointVersion = 1;

Tensor normal_tensor(Shape shape, double stddev, std::mt19937_64& rng) {
  std::normal_distribution<double> dist(0.0, stddev);
  std::vector<double> v(shape_numel(shape));
  for (double& x : v) x = dist(rng);
  return Tensor::from(std::move(shape), std::move(v));
}

}  // namespace

void BackboneConfig::validate() const {
  if (vocab_size < 16) throw ConfigError("vocab_size must be at least 16");
  if (embed_dim == 0) throw ConfigError("embed_dim must be positive");
  if (n_layers == 0) throw ConfigError("n_layers must be positive");
  if (n_heads == 0 || embed_dim % n_heads != 0)
    throw ConfigError("embed_dim must be divisible by n_heads");
  if (max_positions < 2) throw ConfigError("max_positions must be at least 2");
  if (mlp_mult == 0) throw ConfigError("mlp_mult must be positive");
}

void ForwardStats::record_forward(std::uint64_t positions, std::uint64_t flops) {
  forward_calls_.fetch_add(1, std::memory_order_relaxed);
  token_positions_.fetch_add(positions, std::memory_order_relaxed);
  flops_.fetch_add(flops, std::memory_order_relaxed);
}

void ForwardStats::record_flops(std::uint64_t flops) {
  flops_.fetch_add(flops, std::memory_order_relaxed);
}

ForwardCounts ForwardStats::snapshot() const {
  return {forward_calls_.load(std::memory_order_relaxed),
          token_positions_.load(std::memory_order_relaxed), flops_.load(std::memory_order_relaxed)};
}

void ForwardStats::reset() {
  forward_calls_ = 0;
  token_positions_ = 0;
  flops_ = 0;
}

Backbone::Backbone(BackboneConfig cfg) : cfg_(cfg), stats_(std::make_unique<ForwardStats>()) {
  cfg_.validate();
  std::mt19937_64 rng(cfg_.seed);
  const std::size_t d = cfg_.embed_dim, h = cfg_.mlp_mult * d;
  const double std_w = 0.02;
  const double std_out = 0.02 / std::sqrt(2.0 * static_cast<double>(cfg_.n_layers));
  token_emb_ = normal_tensor({cfg_.vocab_size, d}, std_w, rng);
  pos_emb_ = normal_tensor({cfg_.max_positions, d}, std_w, rng);
  layers_.resize(cfg_.n_layers);
  for (auto& l : layers_) {
    l.ln1_gain = Tensor::full({d}, 1.0);
    l.ln1_bias = Tensor::zeros({d});
    l.wq = normal_tensor({d, d}, std_w, rng);
    l.bq = Tensor::zeros({d});
    l.wk = normal_tensor({d, d}, std_w, rng);
    l.bk = Tensor::zeros({d});
    l.wv = normal_tensor({d, d}, std_w, rng);
    l.bv = Tensor::zeros({d});
    l.wo = normal_tensor({d, d}, std_out, rng);
    l.bo = Tensor::zeros({d});
    l.ln2_gain = Tensor::full({d}, 1.0);
    l.ln2_bias = Tensor::zeros({d});
    l.w_up = normal_tensor({d, h}, std_w, rng);
    l.b_up = Tensor::zeros({h});
    l.w_down = normal_tensor({h, d}, std_out, rng);
    l.b_down = Tensor::zeros({d});
  }
  lnf_gain_ = Tensor::full({d}, 1.0);
  lnf_bias_ = Tensor::zeros({d});
  lm_head_ = normal_tensor({d, cfg_.vocab_size}, std_w, rng);
}

Tensor Backbone::embed_tokens(std::span<const TokenId> ids) const {
  return embedding(token_emb_, ids);
}

std::uint64_t Backbone::layer_param_count() const {
  std::uint64_t n = 0;
  for (const auto& l : layers_) {
    for (const Tensor* t : {&l.ln1_gain, &l.ln1_bias, &l.wq, &l.bq, &l.wk, &l.bk, &l.wv, &l.bv,
                            &l.wo, &l.bo, &l.ln2_gain, &l.ln2_bias, &l.w_up, &l.b_up, &l.w_down,
                            &l.b_down})
      n += t->numel();
  }
  return n + lnf_gain_.numel() + lnf_bias_.numel();
}

Tensor Backbone::forward_embeds(const Tensor& embeds, std::vector<AttentionTrace>* traces) const {
  if (embeds.rank() != 2 || embeds.dim(1) != cfg_.embed_dim) {
    throw DimensionError("forward_embeds: expected [N x " + std::to_string(cfg_.embed_dim) +
                         "], got " + shape_str(embeds.shape()));
  }
  const std::size_t n = embeds.dim(0);
  if (n == 0) throw ContractError("forward_embeds: empty input");
  if (n > cfg_.max_positions) {
    throw LengthError("sequence of " + std::to_string(n) + " positions exceeds max_positions " +
                      std::to_string(cfg_.max_positions));
  }
  Tensor x = add(embeds, slice_rows(pos_emb_, 0, n));
  if (traces) traces->assign(layers_.size(), {});
  for (std::size_t li = 0; li < layers_.size(); ++li) {
    const auto& l = layers_[li];
    Tensor hn = layernorm(x, l.ln1_gain, l.ln1_bias);
    Tensor q = add_bias(matmul(hn, l.wq), l.bq);
    Tensor k = add_bias(matmul(hn, l.wk), l.bk);
    Tensor v = add_bias(matmul(hn, l.wv), l.bv);
    Tensor att = causal_attention(q, k, v, cfg_.n_heads, traces ? &(*traces)[li] : nullptr);
    x = add(x, add_bias(matmul(att, l.wo), l.bo));
    Tensor hm = layernorm(x, l.ln2_gain, l.ln2_bias);
    Tensor up = gelu(add_bias(matmul(hm, l.w_up), l.b_up));
    x = add(x, add_bias(matmul(up, l.w_down), l.b_down));
  }
  stats_->record_forward(n, 2ULL * layer_param_count() * n);
  return layernorm(x, lnf_gain_, lnf_bias_);
}

Tensor Backbone::forward_hidden(const Tensor& prefix, std::span<const TokenId> ids,
                                std::vector<AttentionTrace>* traces) const {
  const std::size_t p = prefix.defined() ? prefix.rows() : 0;
  if (prefix.defined() && prefix.numel() > 0 && prefix.cols() != cfg_.embed_dim) {
    throw DimensionError("forward_hidden: prefix " + shape_str(prefix.shape()) +
                         " does not match embed_dim " + std::to_string(cfg_.embed_dim));
  }
  const std::size_t total = (prefix.defined() && prefix.numel() > 0 ? p : 0) + ids.size();
  if (total > cfg_.max_positions) {
    throw LengthError("prefix " + std::to_string(prefix.numel() ? p : 0) + " + tokens " +
                      std::to_string(ids.size()) + " = " + std::to_string(total) +
                      " exceeds max_positions " + std::to_string(cfg_.max_positions));
  }
  if (!prefix.defined() || prefix.numel() == 0) return forward_embeds(embed_tokens(ids), traces);
  if (ids.empty()) return forward_embeds(prefix, traces);
  const Tensor parts[] = {prefix, embed_tokens(ids)};
  return forward_embeds(concat_rows(parts), traces);
}

Tensor Backbone::logits(const Tensor& hidden) const {
  Tensor out = matmul(hidden, lm_head_);
  stats_->record_flops(2ULL * lm_head_.numel() * hidden.rows());
  return out;
}

Tensor Backbone::sequence_nll(const Tensor& prefix, std::span<const TokenId> context,
                              std::span<const TokenId> continuation) const {
  if (continuation.empty()) throw ContractError("sequence_nll: empty continuation");
  const std::size_t p = prefix.defined() && prefix.numel() > 0 ? prefix.rows() : 0;
  if (p + context.size() == 0) {
    throw ContractError("sequence_nll: nothing to condition the first continuation token on");
  }
  std::vector<TokenId> ids(context.begin(), context.end());
  ids.insert(ids.end(), continuation.begin(), continuation.end() - 1);
  Tensor hidden = forward_hidden(prefix, ids);
  const std::size_t first = p + context.size() - 1;
  Tensor rows = slice_rows(hidden, first, first + continuation.size());
  return cross_entropy(logits(rows), continuation);
}

std::vector<std::pair<std::string, Tensor>> Backbone::named_parameters() const {
  std::vector<std::pair<std::string, Tensor>> out;
  out.emplace_back("token_emb", token_emb_);
  out.emplace_back("pos_emb", pos_emb_);
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    const auto& l = layers_[i];
    const std::string p = "layer" + std::to_string(i) + ".";
    out.emplace_back(p + "ln1_gain", l.ln1_gain);
    out.emplace_back(p + "ln1_bias", l.ln1_bias);
    out.emplace_back(p + "wq", l.wq);
    out.emplace_back(p + "bq", l.bq);
    out.emplace_back(p + "wk", l.wk);
    out.emplace_back(p + "bk", l.bk);
    out.emplace_back(p + "wv", l.wv);
    out.emplace_back(p + "bv", l.bv);
    out.emplace_back(p + "wo", l.wo);
    out.emplace_back(p + "bo", l.bo);
    out.emplace_back(p + "ln2_gain", l.ln2_gain);
    out.emplace_back(p + "ln2_bias", l.ln2_bias);
    out.emplace_back(p + "w_up", l.w_up);
    out.emplace_back(p + "b_up", l.b_up);
    out.emplace_back(p + "w_down", l.w_down);
    out.emplace_back(p + "b_down", l.b_down);
  }
  out.emplace_back("lnf_gain", lnf_gain_);
  out.emplace_back("lnf_bias", lnf_bias_);
  out.emplace_back("lm_head", lm_head_);
  return out;
}

std::vector<Tensor> Backbone::parameters() const {
  std::vector<Tensor> out;
  for (auto& [_, t] : named_parameters()) out.push_back(t);
  return out;
}

std::size_t Backbone::parameter_count() const {
  std::size_t n = 0;
  for (const auto& t : parameters()) n += t.numel();
  return n;
}

void Backbone::set_trainable(bool trainable) {
  for (auto& t : parameters()) t.set_requires_grad(trainable);
  trainable_ = trainable;
}

Digest Backbone::digest() const {
  Hasher h;
  h.update_u64(cfg_.vocab_size).update_u64(cfg_.embed_dim).update_u64(cfg_.n_layers);
  h.update_u64(cfg_.n_heads).update_u64(cfg_.max_positions).update_u64(cfg_.mlp_mult);
  for (const auto& [name, t] : named_parameters()) {
    h.update(name);
    for (auto s : t.shape()) h.update_u64(s);
    h.update(t.data());
  }
  return h.finish();
}

void Backbone::save(const std::filesystem::path& path) const {
  io::BinaryWriter w;
  w.bytes(kCheckpointMagic, sizeof kCheckpointMagic);
  w.u32(kCheckpointVersion);
  std::ostringstream header;
  header << "vocab_size=" << cfg_.vocab_size << '\n'
         << "embed_dim=" << cfg_.embed_dim << '\n'
         << "n_layers=" << cfg_.n_layers << '\n'
         << "n_heads=" << cfg_.n_heads << '\n'
         << "max_positions=" << cfg_.max_positions << '\n'
         << "mlp_mult=" << cfg_.mlp_mult << '\n'
         << "seed=" << cfg_.seed << '\n'
         << "digest_algorithm=" << kDigestAlgorithm << '\n'
         << "digest=" << to_hex(digest()) << '\n';
  w.str(header.str());
  auto params = named_parameters();
  w.u64(params.size());
  for (const auto& [name, t] : params) {
    w.str(name);
    w.tensor(t);
  }
  io::write_file_atomic(path, w.buffer());
}

Backbone Backbone::load(const std::filesystem::path& path) {
  auto buf = io::read_file(path);
  io::BinaryReader r(buf, path.string());
  char magic[8];
  r.bytes(magic, sizeof magic);
  if (std::memcmp(magic, kCheckpointMagic, sizeof magic) != 0)
    throw FormatError(path.string() + ": not a backbone checkpoint");
  auto version = r.u32();
  if (version != kCheckpointVersion)
    throw FormatError(path.string() + ": checkpoint format version " + std::to_string(version) +
                      ", expected " + std::to_string(kCheckpointVersion));
  auto header = io::parse_key_values(r.str());
  BackboneConfig cfg;
  cfg.vocab_size = std::stoull(header.at("vocab_size"));
  cfg.embed_dim = std::stoull(header.at("embed_dim"));
  cfg.n_layers = std::stoull(header.at("n_layers"));
  cfg.n_heads = std::stoull(header.at("n_heads"));
  cfg.max_positions = std::stoull(header.at("max_positions"));
  cfg.mlp_mult = std::stoull(header.at("mlp_mult"));
  cfg.seed = std::stoull(header.at("seed"));
  if (header.at("digest_algorithm") != kDigestAlgorithm)
    throw FormatError(path.string() + ": unsupported digest algorithm " +
                      header.at("digest_algorithm"));
  Backbone b(cfg);
  auto params = b.named_parameters();
  auto count = r.u64();
  if (count != params.size())
    throw FormatError(path.string() + ": expected " + std::to_string(params.size()) +
                      " tensors, found " + std::to_string(count));
  PrecisionScope exact(Precision::kFloat64);
  for (auto& [name, t] : params) {
    auto stored_name = r.str();
    if (stored_name != name)
      throw FormatError(path.string() + ": tensor '" + stored_name + "' where '" + name +
                        "' expected");
    Tensor stored = r.tensor();
    if (stored.shape() != t.shape())
      throw FormatError(path.string() + ": tensor '" + name + "' has shape " +
                        shape_str(stored.shape()));
    t.assign(stored.data());
  }
  r.expect_end();
  if (to_hex(b.digest()) != header.at("digest"))
    throw FormatError(path.string() + ": parameter digest mismatch");
  return b;
}

}  // namespace uniicl
