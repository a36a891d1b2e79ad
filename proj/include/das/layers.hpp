#pragma once

// Building blocks of the summarizer: LSTMCell, the attention scorer, and the
// two-layer perceptrons used by the fusion modules.

#include <utility>
#include <vector>

#include "das/tensor.hpp"

namespace das {

constexpr double kInitRange = 0.08;  // uniform(-0.08, 0.08) init for all weights

// Single transformation matrix over (z_t; h_{t-1}) producing the four gate
// pre-activations stacked as (i, f, o, g), plus a bias.
struct LstmParams {
  Tensor u;     // [4H x (Z+H)]
  Tensor bias;  // [4H]

  int hidden() const { return u.shape()[0] / 4; }
  int context() const { return u.shape()[1] - hidden(); }
};

inline LstmParams init_lstm(Rng& rng, int hidden, int context) {
  LstmParams p;
  p.u = uniform_leaf(rng, {4 * hidden, context + hidden}, -kInitRange, kInitRange);
  std::vector<double> b(static_cast<std::size_t>(4 * hidden), 0.0);
  // forget-gate bias starts at 1 so early training does not wipe the cell state
  for (int i = hidden; i < 2 * hidden; ++i) b[static_cast<std::size_t>(i)] = 1.0;
  p.bias = make_leaf({4 * hidden}, std::move(b), true);
  return p;
}

// layer1 -> tanh -> layer2 (linear output)
struct Mlp2Params {
  Tensor w1;  // [hidden x in]
  Tensor b1;  // [hidden]
  Tensor w2;  // [out x hidden]
  Tensor b2;  // [out]

  int in_width() const { return w1.shape()[1]; }
  int out_width() const { return w2.shape()[0]; }
};

inline Mlp2Params init_mlp2(Rng& rng, int in, int hidden, int out) {
  Mlp2Params p;
  p.w1 = uniform_leaf(rng, {hidden, in}, -kInitRange, kInitRange);
  p.b1 = uniform_leaf(rng, {hidden}, -kInitRange, kInitRange);
  p.w2 = uniform_leaf(rng, {out, hidden}, -kInitRange, kInitRange);
  p.b2 = uniform_leaf(rng, {out}, -kInitRange, kInitRange);
  return p;
}

// Scores one input feature against the previous hidden state; out width 1.
using AttentionParams = Mlp2Params;

inline AttentionParams init_attention(Rng& rng, int feature_dim, int query_dim, int hidden) {
  return init_mlp2(rng, feature_dim + query_dim, hidden, 1);
}

struct EmbeddingTable {
  Tensor table;  // [N_v x E]

  int vocab_size() const { return table.shape()[0]; }
  int dim() const { return table.shape()[1]; }
};

inline EmbeddingTable init_embedding(Rng& rng, int vocab, int dim) {
  return EmbeddingTable{uniform_leaf(rng, {vocab, dim}, -kInitRange, kInitRange)};
}

inline Tensor mlp2(Tape& tape, const Tensor& x, const Mlp2Params& p) {
  auto h = tanh_op(tape, add(tape, matmul(tape, p.w1, x), p.b1));
  return add(tape, matmul(tape, p.w2, h), p.b2);
}

// Row-batched variant: applies the perceptron to every row of X.
inline Tensor mlp2_rows(Tape& tape, const Tensor& x, const Mlp2Params& p) {
  const int n = x.shape()[0];
  auto h = tanh_op(tape, add_rows(tape, matmul_nt(tape, x, p.w1), p.b1));
  auto out = add_rows(tape, matmul_nt(tape, h, p.w2), p.b2);
  if (p.out_width() == 1) return reshape(tape, out, {n});
  return out;
}

// One LSTMCell step: gates from U * (z; h_prev) + bias, stacked (i, f, o, g);
// c_t = f (.) c_prev + i (.) g, h_t = o (.) tanh(c_t).
inline std::pair<Tensor, Tensor> lstm_cell_step(Tape& tape, const Tensor& z,
                                                const Tensor& h_prev, const Tensor& c_prev,
                                                const LstmParams& p) {
  const int hidden = p.hidden();
  if (z.rank() != 1 || h_prev.shape() != Shape{hidden} || c_prev.shape() != Shape{hidden} ||
      z.shape()[0] != p.context())
    throw std::invalid_argument("lstm_cell_step: dimension mismatch z=" + shape_str(z.shape()) +
                                " h=" + shape_str(h_prev.shape()) + " U=" + shape_str(p.u.shape()));
  auto zh = concat(tape, {z, h_prev});
  auto pre = add(tape, matmul(tape, p.u, zh), p.bias);
  auto gi = sigmoid(tape, slice(tape, pre, 0, hidden));
  auto gf = sigmoid(tape, slice(tape, pre, hidden, 2 * hidden));
  auto go = sigmoid(tape, slice(tape, pre, 2 * hidden, 3 * hidden));
  auto gg = tanh_op(tape, slice(tape, pre, 3 * hidden, 4 * hidden));
  auto c = add(tape, mul(tape, gf, c_prev), mul(tape, gi, gg));
  auto h = mul(tape, go, tanh_op(tape, c));
  return {h, c};
}

struct AttendResult {
  Tensor context;  // [D]
  Tensor weights;  // [N], masked positions exactly 0
};

// f_att: softmax-normalized MLP scores of (x_i, query) weighting the rows of X.
inline AttendResult attend(Tape& tape, const Tensor& features, const Tensor& query,
                           const AttentionParams& p, const Mask* mask = nullptr) {
  if (features.rank() != 2 || features.shape()[0] < 1)
    throw std::invalid_argument("attend: features must be a non-empty [N x D] matrix, got " +
                                shape_str(features.shape()));
  const int n = features.shape()[0];
  auto paired = concat_features_query(tape, features, query);
  auto scores = mlp2_rows(tape, paired, p);
  auto weights = softmax(tape, scores, mask);
  auto context = matvec_t(tape, features, weights);
  return {context, weights};
}

// List-of-features convenience overload.
inline AttendResult attend(Tape& tape, const std::vector<Tensor>& features, const Tensor& query,
                           const AttentionParams& p, const Mask* mask = nullptr) {
  if (features.empty()) throw std::invalid_argument("attend: empty feature list");
  return attend(tape, stack_rows(tape, features), query, p, mask);
}

}  // namespace das
