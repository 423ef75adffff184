#include "nif/model.hpp"

#include <algorithm>
#include <cmath>
#include <random>

namespace nif {

using dc::AttentionLayout;
using dc::Segment;

void ModelConfig::validate() const {
  if (d_model < 1 || n_heads < 1 || d_model % n_heads != 0) {
    throw Error("d_model must be a positive multiple of n_heads");
  }
  if (n_layers < 1) throw Error("n_layers must be at least 1");
  if (d_ff < 0) throw Error("d_ff must be non-negative");
  if (k_ac < 0) throw Error("k_ac must be non-negative");
  if (max_len < 1) throw Error("max_len must be at least 1");
}

nlohmann::json to_json(const ModelConfig& c) {
  return {{"d_model", c.d_model}, {"n_layers", c.n_layers}, {"n_heads", c.n_heads},
          {"d_ff", c.d_ff},       {"k_ac", c.k_ac},         {"max_len", c.max_len}};
}

ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  c.d_model = j.at("d_model").get<int>();
  c.n_layers = j.at("n_layers").get<int>();
  c.n_heads = j.at("n_heads").get<int>();
  c.d_ff = j.at("d_ff").get<int>();
  c.k_ac = j.at("k_ac").get<int>();
  c.max_len = j.at("max_len").get<int>();
  return c;
}

const char* relation_name(OrderRelation r) {
  switch (r) {
    case OrderRelation::kLt:
      return "Lt";
    case OrderRelation::kGt:
      return "Gt";
    case OrderRelation::kApprox:
      return "Approx";
  }
  return "?";
}

int order_class(Ordering o) {
  switch (o) {
    case Ordering::kLt:
      return 0;
    case Ordering::kGt:
      return 1;
    case Ordering::kEq:
      return 2;
  }
  return 2;
}

OrderRelation relation_from_probs(std::span<const float> probs) {
  int best = 0;
  for (int c = 1; c < 3; ++c) {
    if (probs[c] > probs[best]) best = c;
  }
  return static_cast<OrderRelation>(best);
}

template <typename T>
dc::BasicVar<T> BasicGraph<T>::bind(const dc::BasicParameter<T>& p) {
  auto it = bound_.find(&p);
  if (it != bound_.end()) return it->second;
  // Recording graphs belong to the training loop, which owns the model
  // mutably; inference graphs only alias the weights.
  dc::BasicVar<T> v = tape.recording() ? tape.param(const_cast<dc::BasicParameter<T>&>(p)) : tape.constant_ref(p.value);
  bound_.emplace(&p, v);
  return v;
}

template <typename T>
dc::BasicTensor<T> sinusoidal_positions(int rows, int d) {
  dc::BasicTensor<T> pe = dc::BasicTensor<T>::matrix(rows, d);
  for (int p = 0; p < rows; ++p) {
    for (int i = 0; i < d; i += 2) {
      const double angle = p / std::pow(10000.0, static_cast<double>(i) / d);
      pe.at(p, i) = static_cast<T>(std::sin(angle));
      if (i + 1 < d) pe.at(p, i + 1) = static_cast<T>(std::cos(angle));
    }
  }
  return pe;
}

namespace {

template <typename T>
struct Initializer {
  std::mt19937_64 rng;
  std::normal_distribution<double> normal{0.0, 1.0};

  dc::BasicTensor<T> gaussian(std::vector<std::size_t> shape, double stddev) {
    dc::BasicTensor<T> t(std::move(shape));
    for (auto& v : t.values()) v = static_cast<T>(normal(rng) * stddev);
    return t;
  }

  LinearParams<T> linear(const std::string& name, int in, int out) {
    // Glorot-scaled normal weights, zero bias.
    return {dc::BasicParameter<T>(name + ".weight", gaussian({std::size_t(in), std::size_t(out)},
                                                             std::sqrt(2.0 / (in + out)))),
            dc::BasicParameter<T>(name + ".bias", dc::BasicTensor<T>({std::size_t(out)}))};
  }

  NormParams<T> norm(const std::string& name, int d) {
    return {dc::BasicParameter<T>(name + ".gain", dc::BasicTensor<T>({std::size_t(d)}, T(1))),
            dc::BasicParameter<T>(name + ".bias", dc::BasicTensor<T>({std::size_t(d)}))};
  }

  AttentionParams<T> attention(const std::string& name, int d) {
    return {linear(name + ".query", d, d), linear(name + ".key", d, d), linear(name + ".value", d, d),
            linear(name + ".out", d, d)};
  }
};

}  // namespace

template <typename T>
BasicModel<T>::BasicModel(const ModelConfig& config, std::uint64_t seed) : config_(config) {
  config_.validate();
  const int d = config_.d_model;
  const int ff = config_.ff_width();
  Initializer<T> init{std::mt19937_64(seed)};
  positions_ = sinusoidal_positions<T>(config_.max_decode_len(), d);
  token_embedding_ = Parameter("embedding.tokens", init.gaussian({kVocabSize, std::size_t(d)}, 1.0));
  for (int l = 0; l < config_.n_layers; ++l) {
    const std::string p = "encoder." + std::to_string(l);
    encoder_.push_back({init.norm(p + ".norm_attn", d), init.norm(p + ".norm_ff", d), init.attention(p + ".self", d),
                        init.linear(p + ".ff_in", d, ff), init.linear(p + ".ff_out", ff, d)});
  }
  encoder_norm_ = init.norm("encoder.norm", d);
  for (int l = 0; l < config_.n_layers; ++l) {
    const std::string p = "decoder." + std::to_string(l);
    decoder_.push_back({init.norm(p + ".norm_self", d), init.norm(p + ".norm_cross", d), init.norm(p + ".norm_ff", d),
                        init.attention(p + ".self", d), init.attention(p + ".cross", d),
                        init.linear(p + ".ff_in", d, ff), init.linear(p + ".ff_out", ff, d)});
  }
  decoder_norm_ = init.norm("decoder.norm", d);
  readout_ = init.linear("decoder.readout", d, kVocabSize);
  for (int l = 0; l < config_.k_ac; ++l) {
    add_op_.push_back({init.linear("ano_add." + std::to_string(l) + ".hidden", 2 * d, d),
                       init.linear("ano_add." + std::to_string(l) + ".out", d, d)});
  }
  for (int l = 0; l < config_.k_ac; ++l) {
    mul_op_.push_back({init.linear("ano_mul." + std::to_string(l) + ".hidden", 2 * d, d),
                       init.linear("ano_mul." + std::to_string(l) + ".out", d, d)});
  }
  order_head_ = {init.linear("order.hidden1", 2 * d, d), init.linear("order.hidden2", d, d),
                 init.linear("order.out", d, 3)};
}

template <typename T>
template <typename Fn>
void BasicModel<T>::visit(Fn&& fn) {
  auto lin = [&](LinearParams<T>& p) {
    fn(p.weight);
    fn(p.bias);
  };
  auto nrm = [&](NormParams<T>& p) {
    fn(p.gain);
    fn(p.bias);
  };
  auto att = [&](AttentionParams<T>& p) {
    lin(p.query);
    lin(p.key);
    lin(p.value);
    lin(p.out);
  };
  fn(token_embedding_);
  for (auto& l : encoder_) {
    nrm(l.norm_attn);
    nrm(l.norm_ff);
    att(l.self_attn);
    lin(l.ff_in);
    lin(l.ff_out);
  }
  nrm(encoder_norm_);
  for (auto& l : decoder_) {
    nrm(l.norm_self);
    nrm(l.norm_cross);
    nrm(l.norm_ff);
    att(l.self_attn);
    att(l.cross_attn);
    lin(l.ff_in);
    lin(l.ff_out);
  }
  nrm(decoder_norm_);
  lin(readout_);
  for (auto& l : add_op_) {
    lin(l.hidden);
    lin(l.out);
  }
  for (auto& l : mul_op_) {
    lin(l.hidden);
    lin(l.out);
  }
  lin(order_head_.hidden1);
  lin(order_head_.hidden2);
  lin(order_head_.out);
}

template <typename T>
template <typename Fn>
void BasicModel<T>::visit(Fn&& fn) const {
  const_cast<BasicModel*>(this)->visit([&](const Parameter& p) { fn(p); });
}

template <typename T>
std::vector<typename BasicModel<T>::Parameter*> BasicModel<T>::parameters() {
  std::vector<Parameter*> out;
  visit([&](Parameter& p) { out.push_back(&p); });
  return out;
}

template <typename T>
std::vector<const typename BasicModel<T>::Parameter*> BasicModel<T>::parameters() const {
  std::vector<const Parameter*> out;
  visit([&](const Parameter& p) { out.push_back(&p); });
  return out;
}

template <typename T>
std::size_t BasicModel<T>::parameter_count() const {
  std::size_t n = 0;
  visit([&](const Parameter& p) { n += p.value.size(); });
  return n;
}

namespace {

template <typename P>
std::vector<P*> with_prefix(const std::vector<P*>& all, std::initializer_list<const char*> prefixes) {
  std::vector<P*> out;
  for (P* p : all) {
    for (const char* pre : prefixes) {
      if (p->name.rfind(pre, 0) == 0) {
        out.push_back(p);
        break;
      }
    }
  }
  return out;
}

}  // namespace

template <typename T>
std::vector<typename BasicModel<T>::Parameter*> BasicModel<T>::encoder_parameters() {
  return with_prefix(parameters(), {"embedding.", "encoder."});
}

template <typename T>
std::vector<typename BasicModel<T>::Parameter*> BasicModel<T>::decoder_parameters() {
  return with_prefix(parameters(), {"decoder."});
}

template <typename T>
std::vector<typename BasicModel<T>::Parameter*> BasicModel<T>::operator_parameters(Op op) {
  return with_prefix(parameters(), {op == Op::kAdd ? "ano_add." : "ano_mul."});
}

template <typename T>
std::vector<typename BasicModel<T>::Parameter*> BasicModel<T>::order_parameters() {
  return with_prefix(parameters(), {"order."});
}

template <typename T>
void BasicModel<T>::zero_grad() {
  visit([](Parameter& p) { p.zero_grad(); });
}

template <typename T>
template <typename U>
BasicModel<U> BasicModel<T>::cast() const {
  BasicModel<U> out(config_, 0);
  auto src = parameters();
  auto dst = out.parameters();
  for (std::size_t i = 0; i < src.size(); ++i) {
    dst[i]->value = src[i]->value.template cast<U>();
    dst[i]->grad = dc::BasicTensor<U>(dst[i]->value.shape());
  }
  return out;
}

template <typename T>
std::vector<std::pair<std::string, const dc::BasicTensor<T>*>> BasicModel<T>::named_tensors() const {
  std::vector<std::pair<std::string, const Tensor*>> out;
  visit([&](const Parameter& p) { out.emplace_back(p.name, &p.value); });
  return out;
}

template <typename T>
void BasicModel<T>::set_tensor(const std::string& name, const Tensor& value) {
  for (Parameter* p : parameters()) {
    if (p->name != name) continue;
    if (!p->value.same_shape(value)) {
      throw ShapeMismatch("tensor " + name + " has shape " + value.shape_str() + ", expected " + p->value.shape_str());
    }
    p->value = value;
    return;
  }
  throw ShapeMismatch("unknown tensor " + name);
}

template <typename T>
typename BasicModel<T>::Var BasicModel<T>::lin(Graph& g, const LinearParams<T>& p, Var x) const {
  return dc::linear(x, g.bind(p.weight), g.bind(p.bias));
}

template <typename T>
typename BasicModel<T>::Var BasicModel<T>::norm(Graph& g, const NormParams<T>& p, Var x) const {
  return dc::layer_norm(x, g.bind(p.gain), g.bind(p.bias));
}

template <typename T>
typename BasicModel<T>::Var BasicModel<T>::embed_tokens(Graph& g, std::span<const int> ids,
                                                        std::span<const int> positions) const {
  Var tok = dc::embedding_lookup(g.bind(token_embedding_), ids);
  Var pos = dc::gather_rows(g.tape.constant_ref(positions_), positions);
  return dc::add(tok, pos);
}

template <typename T>
typename BasicModel<T>::Var BasicModel<T>::encoder_block(Graph& g, const EncoderLayerParams<T>& p, Var x,
                                                         const AttentionLayout& layout) const {
  Var y = norm(g, p.norm_attn, x);
  Var a = dc::attention(lin(g, p.self_attn.query, y), lin(g, p.self_attn.key, y), lin(g, p.self_attn.value, y), layout);
  x = dc::add(x, lin(g, p.self_attn.out, a));
  y = norm(g, p.norm_ff, x);
  return dc::add(x, lin(g, p.ff_out, dc::relu(lin(g, p.ff_in, y))));
}

template <typename T>
typename BasicModel<T>::Var BasicModel<T>::decoder_block(Graph& g, const DecoderLayerParams<T>& p, Var x, Var memory,
                                                         const AttentionLayout& self_layout,
                                                         const AttentionLayout& cross_layout) const {
  Var y = norm(g, p.norm_self, x);
  Var a = dc::attention(lin(g, p.self_attn.query, y), lin(g, p.self_attn.key, y), lin(g, p.self_attn.value, y),
                        self_layout);
  x = dc::add(x, lin(g, p.self_attn.out, a));
  y = norm(g, p.norm_cross, x);
  a = dc::attention(lin(g, p.cross_attn.query, y), lin(g, p.cross_attn.key, memory),
                    lin(g, p.cross_attn.value, memory), cross_layout);
  x = dc::add(x, lin(g, p.cross_attn.out, a));
  y = norm(g, p.norm_ff, x);
  return dc::add(x, lin(g, p.ff_out, dc::relu(lin(g, p.ff_in, y))));
}

template <typename T>
typename BasicModel<T>::Var BasicModel<T>::encode(Graph& g, std::span<const TokenSequence> batch) const {
  if (batch.empty()) throw ShapeMismatch("encode: empty batch");
  std::vector<int> ids, positions, start_rows;
  AttentionLayout layout;
  layout.heads = config_.n_heads;
  for (const TokenSequence& seq : batch) {
    const int len = static_cast<int>(seq.size()) + 1;
    if (len > config_.max_decode_len()) {
      throw SequenceTooLong("encoder input of " + std::to_string(len) + " positions exceeds " +
                            std::to_string(config_.max_decode_len()));
    }
    const int offset = static_cast<int>(ids.size());
    start_rows.push_back(offset);
    layout.queries.push_back({offset, len});
    ids.push_back(kStartToken);
    positions.push_back(0);
    for (std::size_t i = 0; i < seq.size(); ++i) {
      ids.push_back(seq[i]);
      positions.push_back(static_cast<int>(i) + 1);
    }
  }
  layout.keys = layout.queries;
  Var x = embed_tokens(g, ids, positions);
  for (const auto& layer : encoder_) x = encoder_block(g, layer, x, layout);
  x = norm(g, encoder_norm_, x);
  return dc::gather_rows(x, start_rows);
}

template <typename T>
typename BasicModel<T>::Var BasicModel<T>::build_memory(Graph& g, Var h, std::span<const int> lengths) const {
  std::vector<int> rows, positions;
  for (std::size_t b = 0; b < lengths.size(); ++b) {
    const int n = lengths[b];
    if (n < 0 || n + 1 > config_.max_decode_len()) {
      throw SequenceTooLong("memory of " + std::to_string(n + 1) + " rows exceeds " +
                            std::to_string(config_.max_decode_len()));
    }
    for (int i = 0; i <= n; ++i) {
      rows.push_back(static_cast<int>(b));
      positions.push_back(i);
    }
  }
  return dc::add(dc::gather_rows(h, rows), dc::gather_rows(g.tape.constant_ref(positions_), positions));
}

// Runs the decoder over `inputs` (each starting with the start token) with
// memories sized from `lengths`; returns logits for every input row.
template <typename T>
typename BasicModel<T>::Var BasicModel<T>::decoder_forward(Graph& g, Var h, std::span<const TokenSequence> inputs,
                                                           std::span<const int> lengths) const {
  std::vector<int> ids, positions;
  AttentionLayout self_layout, cross_layout;
  self_layout.heads = cross_layout.heads = config_.n_heads;
  self_layout.causal = true;
  int mem_offset = 0;
  for (std::size_t b = 0; b < inputs.size(); ++b) {
    const int offset = static_cast<int>(ids.size());
    const int len = static_cast<int>(inputs[b].size());
    self_layout.queries.push_back({offset, len});
    cross_layout.queries.push_back({offset, len});
    cross_layout.keys.push_back({mem_offset, lengths[b] + 1});
    mem_offset += lengths[b] + 1;
    for (int i = 0; i < len; ++i) {
      ids.push_back(inputs[b][i]);
      positions.push_back(i);
    }
  }
  self_layout.keys = self_layout.queries;
  Var memory = build_memory(g, h, lengths);
  Var x = embed_tokens(g, ids, positions);
  for (const auto& layer : decoder_) x = decoder_block(g, layer, x, memory, self_layout, cross_layout);
  return lin(g, readout_, norm(g, decoder_norm_, x));
}

template <typename T>
typename BasicModel<T>::Var BasicModel<T>::decode_logits(Graph& g, Var h, std::span<const TokenSequence> targets) const {
  if (h.value().rows() != targets.size()) throw ShapeMismatch("decode: embedding rows do not match targets");
  std::vector<TokenSequence> inputs;
  std::vector<int> lengths;
  inputs.reserve(targets.size());
  for (const TokenSequence& t : targets) {
    const int n = static_cast<int>(t.size());
    if (n < 1) throw ShapeMismatch("decode: empty target");
    if (n > config_.max_decode_len() - 1) {
      throw SequenceTooLong("target of " + std::to_string(n) + " tokens exceeds " +
                            std::to_string(config_.max_decode_len() - 1));
    }
    TokenSequence in;
    in.reserve(n);
    in.push_back(kStartToken);
    in.insert(in.end(), t.begin(), t.end() - 1);
    inputs.push_back(std::move(in));
    lengths.push_back(n);
  }
  return decoder_forward(g, h, inputs, lengths);
}

template <typename T>
typename BasicModel<T>::Var BasicModel<T>::ac_map(Graph& g, const AcLayerParams<T>& p, Var x) const {
  return lin(g, p.out, dc::relu(lin(g, p.hidden, x)));
}

template <typename T>
typename BasicModel<T>::Var BasicModel<T>::ano(Graph& g, Op op, Var h1, Var h2) const {
  const auto& layers = op == Op::kAdd ? add_op_ : mul_op_;
  if (layers.empty()) return op == Op::kAdd ? dc::add(h1, h2) : dc::mul(h1, h2);
  Var t1 = h1, t2 = h2;
  for (const auto& layer : layers) {
    // Same weights for both concatenation orders; the two maps are evaluated
    // separately so each sees identical row layouts when h1, h2 are swapped.
    Var n1 = ac_map(g, layer, dc::concat(t1, t2));
    Var n2 = ac_map(g, layer, dc::concat(t2, t1));
    t1 = n1;
    t2 = n2;
  }
  return dc::add(t1, t2);
}

template <typename T>
typename BasicModel<T>::Var BasicModel<T>::order_logits(Graph& g, Var h1, Var h2) const {
  Var x = dc::relu(lin(g, order_head_.hidden1, dc::concat(h1, h2)));
  x = dc::relu(lin(g, order_head_.hidden2, x));
  return lin(g, order_head_.out, x);
}

template <typename T>
typename BasicModel<T>::Var BasicModel<T>::order_probs(Graph& g, Var h1, Var h2) const {
  return dc::softmax(order_logits(g, h1, h2));
}

template <typename T>
dc::BasicTensor<T> BasicModel<T>::embed(std::span<const TokenSequence> batch) const {
  Graph g(false);
  return encode(g, batch).value();
}

template <typename T>
dc::BasicTensor<T> BasicModel<T>::embed_numerals(std::span<const std::string> numerals) const {
  std::vector<TokenSequence> seqs;
  seqs.reserve(numerals.size());
  for (const auto& s : numerals) seqs.push_back(tokenize(s));
  return embed(seqs);
}

template <typename T>
dc::BasicTensor<T> BasicModel<T>::apply_operator(Op op, const Tensor& h1, const Tensor& h2) const {
  Graph g(false);
  return ano(g, op, g.tape.constant_ref(h1), g.tape.constant_ref(h2)).value();
}

template <typename T>
dc::BasicTensor<T> BasicModel<T>::order(const Tensor& h1, const Tensor& h2) const {
  Graph g(false);
  return order_probs(g, g.tape.constant_ref(h1), g.tape.constant_ref(h2)).value();
}

template <typename T>
std::vector<TokenSequence> BasicModel<T>::decode_greedy(const Tensor& h, std::span<const int> lengths) const {
  if (h.rows() != lengths.size()) throw ShapeMismatch("decode_greedy: embedding rows do not match lengths");
  int longest = 0;
  for (int n : lengths) {
    if (n < 0 || n > config_.max_decode_len() - 1) {
      throw SequenceTooLong("decode length " + std::to_string(n) + " exceeds " +
                            std::to_string(config_.max_decode_len() - 1));
    }
    longest = std::max(longest, n);
  }
  std::vector<TokenSequence> out(lengths.size());
  for (int step = 0; step < longest; ++step) {
    std::vector<int> active;
    for (std::size_t b = 0; b < lengths.size(); ++b) {
      if (lengths[b] > step) active.push_back(static_cast<int>(b));
    }
    std::vector<TokenSequence> inputs;
    std::vector<int> active_lengths;
    for (int b : active) {
      TokenSequence in{kStartToken};
      in.insert(in.end(), out[b].begin(), out[b].end());
      inputs.push_back(std::move(in));
      active_lengths.push_back(lengths[b]);
    }
    Graph g(false);
    Var hv = dc::gather_rows(g.tape.constant_ref(h), active);
    const Tensor& logits = decoder_forward(g, hv, inputs, active_lengths).value();
    std::size_t row = 0;
    for (std::size_t i = 0; i < active.size(); ++i) {
      row += inputs[i].size();
      auto r = logits.row(row - 1);
      const auto best = std::max_element(r.begin(), r.end()) - r.begin();
      out[active[i]].push_back(static_cast<Token>(best));
    }
  }
  return out;
}

template class BasicGraph<float>;
template class BasicGraph<double>;
template class BasicModel<float>;
template class BasicModel<double>;
template BasicModel<double> BasicModel<float>::cast<double>() const;
template BasicModel<float> BasicModel<double>::cast<float>() const;
template dc::BasicTensor<float> sinusoidal_positions<float>(int, int);
template dc::BasicTensor<double> sinusoidal_positions<double>(int, int);

}  // namespace nif
