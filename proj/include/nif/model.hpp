#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "json.hpp"
#include "nif/diffcore/kernels.hpp"
#include "nif/numerals.hpp"

namespace nif {

struct ModelConfig {
  int d_model = 512;
  int n_layers = 4;
  int n_heads = 8;
  int d_ff = 0;  // 0 selects 4 * d_model
  int k_ac = 1;  // AC layers per operator; 0 means plain vector sum / Hadamard product
  int max_len = 20;

  int ff_width() const { return d_ff > 0 ? d_ff : 4 * d_model; }
  // Longest decoder memory (target length + 1) and encoder input (+ start).
  int max_decode_len() const { return 2 * max_len + 2; }
  void validate() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

nlohmann::json to_json(const ModelConfig& c);
ModelConfig model_config_from_json(const nlohmann::json& j);

enum class OrderRelation { kLt = 0, kGt = 1, kApprox = 2 };

const char* relation_name(OrderRelation r);

/// Class index used by the order head for an oracle comparison: Lt -> 0,
/// Gt -> 1, Eq -> 2 (Approx).
int order_class(Ordering o);

// Argmax over the three order probabilities, ties to the lowest index.
OrderRelation relation_from_probs(std::span<const float> probs);

/// A tape plus the parameters already bound to it. Each parameter is bound
/// once per graph; on a recording graph its gradient accumulates into the
/// parameter's grad buffer.
template <typename T>
class BasicGraph {
 public:
  explicit BasicGraph(bool record) : tape(record) {}

  dc::BasicTape<T> tape;

  dc::BasicVar<T> bind(const dc::BasicParameter<T>& p);
  dc::BasicVar<T> constant(dc::BasicTensor<T> t) { return tape.constant(std::move(t)); }

 private:
  std::unordered_map<const dc::BasicParameter<T>*, dc::BasicVar<T>> bound_;
};

template <typename T>
struct LinearParams {
  dc::BasicParameter<T> weight;
  dc::BasicParameter<T> bias;
};

template <typename T>
struct NormParams {
  dc::BasicParameter<T> gain;
  dc::BasicParameter<T> bias;
};

template <typename T>
struct AttentionParams {
  LinearParams<T> query, key, value, out;
};

template <typename T>
struct EncoderLayerParams {
  NormParams<T> norm_attn, norm_ff;
  AttentionParams<T> self_attn;
  LinearParams<T> ff_in, ff_out;
};

template <typename T>
struct DecoderLayerParams {
  NormParams<T> norm_self, norm_cross, norm_ff;
  AttentionParams<T> self_attn, cross_attn;
  LinearParams<T> ff_in, ff_out;
};

// One AC layer: f([x, y]) = W_out relu(W_in [x, y] + b_in) + b_out.
template <typename T>
struct AcLayerParams {
  LinearParams<T> hidden, out;
};

template <typename T>
struct OrderHeadParams {
  LinearParams<T> hidden1, hidden2, out;
};

/// The embedding autoencoder with its two commutative operators and the
/// order head. Graph-building members record onto a caller-owned graph and
/// work on batches: embeddings are [batch, d_model] matrices.
template <typename T>
class BasicModel {
 public:
  using Var = dc::BasicVar<T>;
  using Graph = BasicGraph<T>;
  using Tensor = dc::BasicTensor<T>;
  using Parameter = dc::BasicParameter<T>;

  BasicModel(const ModelConfig& config, std::uint64_t seed);
  BasicModel(const BasicModel&) = delete;
  BasicModel& operator=(const BasicModel&) = delete;
  BasicModel(BasicModel&&) = default;

  const ModelConfig& config() const { return config_; }

  // Every trainable tensor in a fixed registration order.
  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;
  std::size_t parameter_count() const;

  std::vector<Parameter*> encoder_parameters();
  std::vector<Parameter*> decoder_parameters();
  std::vector<Parameter*> operator_parameters(Op op);
  std::vector<Parameter*> order_parameters();

  void zero_grad();

  /// Copy of all weights converted to another scalar type.
  template <typename U>
  BasicModel<U> cast() const;

  // [batch, d]: final encoder state at the start-token position of [s] + tokens.
  Var encode(Graph& g, std::span<const TokenSequence> batch) const;

  // [sum of (n_b + 1), d]: per sequence, n_b + 1 copies of h_b plus
  // positional encodings p_1..p_{n_b+1}.
  Var build_memory(Graph& g, Var h, std::span<const int> lengths) const;

  // [sum of target lengths, 14]: teacher-forced logits for each target.
  Var decode_logits(Graph& g, Var h, std::span<const TokenSequence> targets) const;

  Var ano(Graph& g, Op op, Var h1, Var h2) const;

  // [batch, 3] unnormalized scores of the order head.
  Var order_logits(Graph& g, Var h1, Var h2) const;
  Var order_probs(Graph& g, Var h1, Var h2) const;

  // Inference helpers over plain tensors (non-recording graphs).
  Tensor embed(std::span<const TokenSequence> batch) const;
  Tensor embed_numerals(std::span<const std::string> numerals) const;
  Tensor apply_operator(Op op, const Tensor& h1, const Tensor& h2) const;
  Tensor order(const Tensor& h1, const Tensor& h2) const;
  std::vector<TokenSequence> decode_greedy(const Tensor& h, std::span<const int> lengths) const;

  const Tensor& positional_table() const { return positions_; }

  // Named weights for checkpointing, in registration order.
  std::vector<std::pair<std::string, const Tensor*>> named_tensors() const;
  void set_tensor(const std::string& name, const Tensor& value);

 private:
  template <typename U>
  friend class BasicModel;

  Var encoder_block(Graph& g, const EncoderLayerParams<T>& p, Var x, const dc::AttentionLayout& layout) const;
  Var decoder_block(Graph& g, const DecoderLayerParams<T>& p, Var x, Var memory,
                    const dc::AttentionLayout& self_layout, const dc::AttentionLayout& cross_layout) const;
  Var decoder_forward(Graph& g, Var h, std::span<const TokenSequence> inputs, std::span<const int> lengths) const;
  Var lin(Graph& g, const LinearParams<T>& p, Var x) const;
  Var norm(Graph& g, const NormParams<T>& p, Var x) const;
  Var ac_map(Graph& g, const AcLayerParams<T>& p, Var x) const;
  Var embed_tokens(Graph& g, std::span<const int> ids, std::span<const int> positions) const;

  template <typename Fn>
  void visit(Fn&& fn);
  template <typename Fn>
  void visit(Fn&& fn) const;

  ModelConfig config_;
  Tensor positions_;
  Parameter token_embedding_;
  std::vector<EncoderLayerParams<T>> encoder_;
  NormParams<T> encoder_norm_;
  std::vector<DecoderLayerParams<T>> decoder_;
  NormParams<T> decoder_norm_;
  LinearParams<T> readout_;
  std::vector<AcLayerParams<T>> add_op_;
  std::vector<AcLayerParams<T>> mul_op_;
  OrderHeadParams<T> order_head_;
};

using Model = BasicModel<float>;
using Graph = BasicGraph<float>;

/// Sinusoidal encodings: row p holds sin/cos of p / 10000^(2i/d).
template <typename T>
dc::BasicTensor<T> sinusoidal_positions(int rows, int d);

}  // namespace nif
