#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <unordered_map>
#include <utility>
#include <vector>

#include "rnnafem/network.hpp"

namespace rnnafem {

/// A linear form over the neurons of one layer (layer 0 = network inputs),
/// plus a constant. Its value is the left-to-right sum of the terms followed
/// by the bias.
struct Signal {
  struct Term {
    std::uint32_t neuron = 0;
    double coef = 0.0;
    std::uint64_t param = kStructuralParam;  // 0: interned by value when used
  };
  std::size_t layer = 0;
  std::vector<Term> terms;
  double bias = 0.0;
  bool nonneg = false;
  bool pair = false;  // relu(v) - relu(-v): one of the two terms is zero

  bool is_constant() const { return terms.empty(); }
};

/// Incremental construction of a feed-forward ReLU network. Signals living
/// on different layers are combined by carrying the shallower one forward
/// through relu(v) (nonnegative) or relu(v), relu(-v) pairs, which is exact.
class NetBuilder {
 public:
  explicit NetBuilder(std::size_t inputs);

  std::size_t input_count() const { return inputs_; }
  Signal input(std::size_t i) const;
  /// Input known to be nonnegative.
  Signal nonneg_input(std::size_t i) const;
  static Signal constant(double c);

  /// New neuron relu(s) one layer above s.
  Signal relu(const Signal& s);
  /// Sum of c_k * s_k (expanded term by term) plus bias.
  Signal lin(std::initializer_list<std::pair<double, Signal>> parts, double bias = 0.0);
  Signal lin(std::span<const std::pair<double, Signal>> parts, double bias = 0.0);
  Signal add(const Signal& a, const Signal& b) { return lin({{1.0, a}, {1.0, b}}); }
  Signal sub(const Signal& a, const Signal& b) { return lin({{1.0, a}, {-1.0, b}}); }
  Signal scale(const Signal& a, double c) { return lin({{c, a}}); }
  /// Rounds s to a single exact value on the next layer.
  Signal materialize(const Signal& s);
  /// Makes the form cheap to expand exactly (materializes compound forms).
  Signal simple(const Signal& s);
  Signal lift(const Signal& s, std::size_t layer);
  Signal abs(const Signal& s);

  /// Embeds `net` with its inputs fed by `inputs`; returns its output forms.
  std::vector<Signal> embed(const Dnn& net, std::span<const Signal> inputs);

  std::size_t top_layer() const { return layers_.size(); }
  Dnn build(std::span<const Signal> outputs);
  Dnn build(std::initializer_list<Signal> outputs) { return build(std::span<const Signal>(outputs.begin(), outputs.size())); }

 private:
  struct Entry {
    std::uint32_t col;  // kBias for the constant input
    double value;
    std::uint64_t param;
  };
  using Row = std::vector<Entry>;

  static constexpr std::uint32_t kBias = 0xFFFFFFFFu;

  std::uint32_t add_neuron(std::size_t layer, Row row);
  Row row_of(const Signal& s, double sign) const;
  Signal carry_neuron_term(const Signal::Term& t, std::size_t layer);
  Signal lift_one(const Signal& s);

  std::size_t inputs_;
  std::vector<std::vector<Row>> layers_;  // layers_[l-1] holds the neurons of layer l
  std::vector<std::unordered_map<std::uint32_t, std::uint32_t>> carry_;  // per source layer
  bool uses_bias_ = false;
};

}  // namespace rnnafem
