#include "rnnafem/net_builder.hpp"

#include <algorithm>
#include <cmath>

#include "rnnafem/errors.hpp"

namespace rnnafem {

namespace {

bool power_of_two(double c) {
  if (c == 0.0 || !std::isfinite(c)) return false;
  int e = 0;
  return std::fabs(std::frexp(c, &e)) == 0.5;
}

}  // namespace

NetBuilder::NetBuilder(std::size_t inputs) : inputs_(inputs) {}

Signal NetBuilder::input(std::size_t i) const {
  if (i >= inputs_) throw ValidationError("builder input index out of range");
  Signal s;
  s.terms.push_back({static_cast<std::uint32_t>(i), 1.0, kStructuralParam});
  return s;
}

Signal NetBuilder::nonneg_input(std::size_t i) const {
  Signal s = input(i);
  s.nonneg = true;
  return s;
}

Signal NetBuilder::constant(double c) {
  Signal s;
  s.bias = c;
  s.nonneg = c >= 0.0;
  return s;
}

std::uint32_t NetBuilder::add_neuron(std::size_t layer, Row row) {
  if (layer == 0) throw ValidationError("neurons live on layers >= 1");
  if (layers_.size() < layer) layers_.resize(layer);
  for (const auto& e : row)
    if (e.col == kBias) uses_bias_ = true;
  auto& rows = layers_[layer - 1];
  rows.push_back(std::move(row));
  return static_cast<std::uint32_t>(rows.size() - 1);
}

NetBuilder::Row NetBuilder::row_of(const Signal& s, double sign) const {
  Row row;
  row.reserve(s.terms.size() + 1);
  for (const auto& t : s.terms) {
    const double v = sign * t.coef;
    row.push_back({t.neuron, v, t.param != kStructuralParam ? t.param : interned_param_id(v)});
  }
  if (s.bias != 0.0) row.push_back({kBias, sign * s.bias, interned_param_id(s.bias)});
  return row;
}

Signal NetBuilder::relu(const Signal& s) {
  Signal out;
  out.layer = s.layer + 1;
  out.terms.push_back({add_neuron(out.layer, row_of(s, 1.0)), 1.0, kStructuralParam});
  out.nonneg = true;
  return out;
}

Signal NetBuilder::carry_neuron_term(const Signal::Term& t, std::size_t layer) {
  if (carry_.size() <= layer) carry_.resize(layer + 1);
  auto& memo = carry_[layer];
  auto it = memo.find(t.neuron);
  std::uint32_t id = 0;
  if (it != memo.end()) {
    id = it->second;
  } else {
    id = add_neuron(layer + 1, Row{{t.neuron, 1.0, kStructuralParam}});
    memo.emplace(t.neuron, id);
  }
  Signal out;
  out.layer = layer + 1;
  out.terms.push_back({id, t.coef, t.param});
  return out;
}

Signal NetBuilder::lift_one(const Signal& s) {
  if (s.is_constant()) {
    Signal out = s;
    ++out.layer;
    return out;
  }
  if (s.layer >= 1 && s.bias == 0.0 && s.terms.size() <= 2) {
    Signal out;
    out.layer = s.layer + 1;
    out.nonneg = s.nonneg;
    out.pair = s.pair;
    for (const auto& t : s.terms) out.terms.push_back(carry_neuron_term(t, s.layer).terms.front());
    return out;
  }
  return materialize(s);
}

Signal NetBuilder::lift(const Signal& s, std::size_t layer) {
  if (layer < s.layer) throw ValidationError("cannot lift a signal to a shallower layer");
  Signal cur = s;
  while (cur.layer < layer) cur = lift_one(cur);
  return cur;
}

Signal NetBuilder::materialize(const Signal& s) {
  if (s.is_constant() || s.pair) return s;
  if (s.layer >= 1 && s.bias == 0.0 && s.terms.size() == 1 && s.terms[0].coef == 1.0) return s;
  if (s.nonneg) return relu(s);
  Signal out;
  out.layer = s.layer + 1;
  out.terms.push_back({add_neuron(out.layer, row_of(s, 1.0)), 1.0, kStructuralParam});
  out.terms.push_back({add_neuron(out.layer, row_of(s, -1.0)), -1.0, kStructuralParam});
  out.pair = true;
  return out;
}

Signal NetBuilder::simple(const Signal& s) {
  if (s.is_constant() || s.pair) return s;
  if (s.bias == 0.0 && s.terms.size() == 1 && power_of_two(s.terms[0].coef)) return s;
  return materialize(s);
}

Signal NetBuilder::abs(const Signal& s) {
  if (s.nonneg) return s;
  if (s.is_constant()) return constant(std::fabs(s.bias));
  Signal out = s;
  if (!s.pair) {
    out = Signal{};
    out.layer = s.layer + 1;
    out.terms.push_back({add_neuron(out.layer, row_of(s, 1.0)), 1.0, kStructuralParam});
    out.terms.push_back({add_neuron(out.layer, row_of(s, -1.0)), -1.0, kStructuralParam});
  }
  out.terms[1].coef = -out.terms[1].coef;
  out.pair = false;
  out.nonneg = true;
  return out;
}

Signal NetBuilder::lin(std::initializer_list<std::pair<double, Signal>> parts, double bias) {
  return lin(std::span<const std::pair<double, Signal>>(parts.begin(), parts.size()), bias);
}

Signal NetBuilder::lin(std::span<const std::pair<double, Signal>> parts, double bias) {
  std::size_t layer = 0;
  for (const auto& [c, s] : parts)
    if (!s.is_constant()) layer = std::max(layer, s.layer);
  Signal out;
  out.layer = layer;
  bool nonneg = bias >= 0.0;
  double b = 0.0;
  std::size_t nonconstant = 0;
  bool only_pair = false;
  for (const auto& [c, s0] : parts) {
    if (c == 0.0) continue;
    if (s0.is_constant()) {
      b += c * s0.bias;
    } else {
      // lifting may materialize the form, which absorbs its bias
      const Signal s = lift(s0, layer);
      for (const auto& t : s.terms) {
        const std::uint64_t p = (t.param != kStructuralParam && power_of_two(c)) ? t.param : kStructuralParam;
        out.terms.push_back({t.neuron, c * t.coef, p});
      }
      b += c * s.bias;
      ++nonconstant;
      only_pair = s.pair && c == 1.0;
    }
    nonneg = nonneg && c > 0.0 && s0.nonneg;
  }
  out.bias = b + bias;
  out.nonneg = nonneg;
  out.pair = nonconstant == 1 && only_pair && out.bias == 0.0;
  return out;
}

std::vector<Signal> NetBuilder::embed(const Dnn& net, std::span<const Signal> inputs) {
  if (inputs.size() != net.input_size()) throw ValidationError("embedded network input count mismatch");
  if (net.layers().empty()) return {inputs.begin(), inputs.end()};
  std::vector<Signal> in(inputs.size());
  std::size_t layer = 0;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    in[i] = simple(inputs[i]);
    if (!in[i].is_constant()) layer = std::max(layer, in[i].layer);
  }
  for (auto& s : in) s = s.is_constant() ? s : lift(s, layer);

  const auto& layers = net.layers();
  const std::size_t last = layers.size() - 1;
  std::vector<std::uint32_t> ids;
  std::vector<Signal> outputs;
  for (std::size_t k = 0; k <= last; ++k) {
    const DnnLayer& w = layers[k];
    std::vector<std::uint32_t> next;
    for (std::size_t r = 0; r < w.rows; ++r) {
      Row row;
      for (std::uint32_t e = w.row_ptr[r]; e < w.row_ptr[r + 1]; ++e) {
        const double v = w.value[e];
        const std::uint64_t p = w.param[e];
        if (w.col[e] == w.cols) {
          row.push_back({kBias, v, p});
        } else if (k == 0) {
          const Signal& s = in[w.col[e]];
          for (const auto& t : s.terms) row.push_back({t.neuron, v * t.coef, p});
          if (s.bias != 0.0) row.push_back({kBias, v * s.bias, p});
        } else {
          row.push_back({ids[w.col[e]], v, p});
        }
      }
      if (k < last) {
        next.push_back(add_neuron(layer + k + 1, std::move(row)));
      } else {
        Signal o;
        o.layer = layer + k;
        for (const auto& en : row) {
          if (en.col == kBias) o.bias += en.value;
          else o.terms.push_back({en.col, en.value, en.param});
        }
        outputs.push_back(std::move(o));
      }
    }
    ids = std::move(next);
  }
  return outputs;
}

Dnn NetBuilder::build(std::span<const Signal> outputs) {
  std::size_t top = layers_.size();
  for (const auto& s : outputs)
    if (!s.is_constant()) top = std::max(top, s.layer);
  std::vector<Signal> lifted;
  lifted.reserve(outputs.size());
  for (const auto& s : outputs) lifted.push_back(s.is_constant() ? s : lift(s, top));
  for (const auto& s : lifted)
    if (s.bias != 0.0) uses_bias_ = true;
  if (layers_.size() < top) layers_.resize(top);

  auto to_layer = [&](const std::vector<Row>& rows, std::size_t cols) {
    DnnLayer out;
    out.rows = rows.size();
    out.cols = cols;
    for (const auto& row : rows) {
      for (const auto& e : row) {
        out.col.push_back(e.col == kBias ? static_cast<std::uint32_t>(cols) : e.col);
        out.value.push_back(e.value);
        out.param.push_back(e.param);
      }
      out.row_ptr.push_back(static_cast<std::uint32_t>(out.col.size()));
    }
    return out;
  };

  std::vector<DnnLayer> mats;
  std::size_t cols = inputs_;
  for (std::size_t l = 1; l <= top; ++l) {
    mats.push_back(to_layer(layers_[l - 1], cols));
    cols = layers_[l - 1].size();
  }
  std::vector<Row> out_rows;
  for (const auto& s : lifted) out_rows.push_back(row_of(s, 1.0));
  mats.push_back(to_layer(out_rows, cols));
  return prune(Dnn(inputs_, uses_bias_, std::move(mats)));
}

}  // namespace rnnafem
