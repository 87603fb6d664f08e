#pragma once

#include <cstddef>
#include <cstdint>
#include <iosfwd>
#include <span>
#include <vector>

namespace rnnafem {

/// Identity/plumbing weights inserted by combinators; never counted as
/// independent parameters.
inline constexpr std::uint64_t kStructuralParam = 0;

/// Fresh parameter id for a hand-specified or trainable weight.
std::uint64_t fresh_param_id();
/// Parameter id shared by every weight with the same canonical value, where
/// the remaining factor is a tag in {+-1} x {1, 2, 4, 1/2, 1/4}.
std::uint64_t interned_param_id(double value);

/// Row-major dense matrix, used for hand-written networks and serialization.
struct Matrix {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Matrix() = default;
  Matrix(std::size_t r, std::size_t c, std::vector<double> d = {});
  double& operator()(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double operator()(std::size_t r, std::size_t c) const { return data[r * cols + c]; }
};

/// One weight matrix in compressed-row form. Column index `cols` addresses
/// the constant input when the owning network has one. Entries are summed in
/// stored order.
struct DnnLayer {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<std::uint32_t> row_ptr{0};
  std::vector<std::uint32_t> col;
  std::vector<double> value;
  std::vector<std::uint64_t> param;

  std::size_t nnz() const { return col.size(); }
};

struct WeightBudget {
  std::size_t total_weights = 0;        // sum of dense matrix sizes
  std::size_t nonzero_weights = 0;
  std::size_t independent_weights = 0;  // distinct non-structural parameter ids
};

class DnnWorkspace {
 public:
  std::vector<double> a;
  std::vector<double> b;
};

/// ReLU network y = W_d phi(W_{d-1} ... phi(W_0 x)). With a constant input
/// slot every layer sees an extra trailing 1 (bias emulation).
class Dnn {
 public:
  Dnn() = default;
  Dnn(std::size_t input_size, bool constant_input, std::vector<DnnLayer> layers);

  /// Each nonzero entry receives its own parameter id. With constant_input
  /// the last column of every matrix multiplies the constant 1.
  static Dnn from_dense(const std::vector<Matrix>& weights, bool constant_input = false);
  /// Same, but every entry is assigned the given id (shared weights).
  static Dnn from_dense_with_params(const std::vector<Matrix>& weights,
                                    const std::vector<std::vector<std::uint64_t>>& params,
                                    bool constant_input = false);

  std::size_t input_size() const { return input_size_; }
  std::size_t output_size() const { return layers_.empty() ? input_size_ : layers_.back().rows; }
  std::size_t depth() const { return layers_.empty() ? 0 : layers_.size() - 1; }
  std::size_t width() const { return width_; }
  bool constant_input() const { return constant_input_; }
  const std::vector<DnnLayer>& layers() const { return layers_; }

  std::vector<double> operator()(std::span<const double> x) const;
  void evaluate(std::span<const double> x, std::span<double> y, DnnWorkspace& ws) const;
  /// Feature-major batch: x[c * batch + b]. Bit-identical to evaluate().
  void evaluate_batch(std::span<const double> x, std::span<double> y, std::size_t batch, DnnWorkspace& ws) const;

  WeightBudget weight_budget() const;
  std::vector<Matrix> dense() const;

 private:
  std::size_t input_size_ = 0;
  std::size_t width_ = 0;
  bool constant_input_ = false;
  std::vector<DnnLayer> layers_;
};

/// Flat n x dim sequence.
struct Sequence {
  std::size_t dim = 0;
  std::vector<double> data;

  Sequence() = default;
  Sequence(std::size_t length, std::size_t d) : dim(d), data(length * d, 0.0) {}
  static Sequence from_scalars(std::span<const double> xs);

  std::size_t length() const { return dim == 0 ? 0 : data.size() / dim; }
  std::span<double> operator[](std::size_t i) { return {data.data() + i * dim, dim}; }
  std::span<const double> operator[](std::size_t i) const { return {data.data() + i * dim, dim}; }
  std::vector<double> channel(std::size_t c) const;
};

/// y_i = B(x_i, y_{i-1}) with y_0 = 0.
struct BasicRnn {
  Dnn dnn;
  std::size_t input_size = 0;
  std::size_t output_size = 0;

  BasicRnn() = default;
  BasicRnn(Dnn net, std::size_t s, std::size_t s_out);
  /// True if no weight reads the previous output (pure elementwise map).
  bool is_elementwise() const;
};

Sequence eval_basic_rnn(const BasicRnn& net, const Sequence& xs);

enum class Wiring {
  plain,           // next stage reads the previous outputs
  init_with_last,  // next stage reads (y_i, y_n * [i == 1])
};

struct DeepRnn {
  std::vector<BasicRnn> stages;
  std::vector<Wiring> wiring;  // wiring[i] describes the input of stage i; wiring[0] is plain

  std::size_t input_size() const { return stages.empty() ? 0 : stages.front().input_size; }
  std::size_t output_size() const { return stages.empty() ? 0 : stages.back().output_size; }
  void push(BasicRnn stage, Wiring w = Wiring::plain);
  void append(const DeepRnn& other, Wiring first = Wiring::plain);
  WeightBudget weight_budget() const;
};

DeepRnn single_stage(BasicRnn stage);
Sequence eval_deep_rnn(const DeepRnn& net, const Sequence& xs);
/// Evaluates independent sequences together; results match eval_deep_rnn.
std::vector<Sequence> eval_deep_rnn_batch(const DeepRnn& net, std::span<const Sequence> xs);

// Combinators. All are exact: extra layers only copy values through
// relu(v), relu(-v) pairs.
Dnn identity_dnn(std::size_t width);
Dnn linear_dnn(const Matrix& m);
Dnn extend_depth(const Dnn& net, std::size_t extra_layers);
Dnn parallel(const Dnn& a, const Dnn& b);
/// Both networks read the same input; outputs are concatenated.
Dnn fan_out(const Dnn& a, const Dnn& b);
/// outer(inner(x)).
Dnn compose(const Dnn& outer, const Dnn& inner);
/// outer's input c reads inner's output source[c]; -1 feeds zero.
Dnn compose_selected(const Dnn& outer, const Dnn& inner, std::span<const std::int64_t> source);
Dnn select_outputs(const Dnn& net, std::span<const std::size_t> outputs);
/// New network with `new_inputs` inputs; old input c reads new input map[c] or zero for -1.
Dnn embed_inputs(const Dnn& net, std::size_t new_inputs, std::span<const std::int64_t> map);
/// Removes neurons that are identically zero or unused. Exact.
Dnn prune(const Dnn& net);

/// Stage-wise parallel combination; both nets need the same wiring pattern.
/// Input and output channels are concatenated (a first).
DeepRnn parallel(const DeepRnn& a, const DeepRnn& b);
/// Appends one channel that every stage copies unchanged.
DeepRnn pass_through(const DeepRnn& net);
/// Single basic RNN equivalent to stacking `second` on `first` with plain wiring;
/// its output is (y_first, y_second).
BasicRnn fuse(const BasicRnn& first, const BasicRnn& second);

/// DNN on the flattened sequence (x_1..x_n) returning (y_1..y_n).
Dnn unroll(const BasicRnn& net, std::size_t n);
Dnn unroll(const DeepRnn& net, std::size_t n);
/// DNN x -> y_n for the input sequence (x, 0, ..., 0) of length n, pruned.
Dnn rnn_as_dnn(const DeepRnn& net, std::size_t n);

void write_network(std::ostream& out, const DeepRnn& net);
DeepRnn read_network(std::istream& in);

}  // namespace rnnafem
