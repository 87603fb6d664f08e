#include "rnnafem/network.hpp"

#include <algorithm>
#include <memory>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <istream>
#include <limits>
#include <ostream>
#include <sstream>
#include <string>
#include <unordered_set>

#include "rnnafem/errors.hpp"

namespace rnnafem {

namespace {

std::atomic<std::uint64_t> g_next_param{1};

constexpr std::uint32_t kBiasSentinel = std::numeric_limits<std::uint32_t>::max();

inline double relu(double v) { return v > 0.0 ? v : 0.0; }

}  // namespace

std::uint64_t fresh_param_id() { return g_next_param.fetch_add(1, std::memory_order_relaxed); }

std::uint64_t interned_param_id(double value) {
  constexpr std::uint64_t kInterned = std::uint64_t{1} << 63;
  if (value == 0.0 || !std::isfinite(value)) return kInterned;
  std::uint64_t bits = 0;
  const double mag = std::fabs(value);
  std::memcpy(&bits, &mag, sizeof bits);
  const std::uint64_t mantissa = bits & ((std::uint64_t{1} << 52) - 1);
  // exponents 5b-2 .. 5b+2 share block b; the offset is the {1,2,4,1/2,1/4} tag
  const int e = std::ilogb(mag);
  const int block = static_cast<int>(std::floor((e + 2) / 5.0));
  const auto block_bits = static_cast<std::uint64_t>(block + 1024) & 0x7FF;
  return kInterned | (block_bits << 52) | mantissa;
}

Matrix::Matrix(std::size_t r, std::size_t c, std::vector<double> d)
    : rows(r), cols(c), data(std::move(d)) {
  if (data.empty()) data.assign(r * c, 0.0);
  if (data.size() != r * c) throw ValidationError("matrix data size does not match its shape");
}

// ---------------------------------------------------------------------------
// Dnn

Dnn::Dnn(std::size_t input_size, bool constant_input, std::vector<DnnLayer> layers)
    : input_size_(input_size), constant_input_(constant_input), layers_(std::move(layers)) {
  std::size_t width = input_size_;
  for (const auto& layer : layers_) {
    if (layer.cols != width) throw ValidationError("layer column count does not match previous width");
    if (layer.row_ptr.size() != layer.rows + 1 || layer.row_ptr.back() != layer.nnz() ||
        layer.value.size() != layer.nnz() || layer.param.size() != layer.nnz())
      throw ValidationError("malformed sparse layer");
    const std::size_t limit = layer.cols + (constant_input_ ? 1 : 0);
    for (auto c : layer.col)
      if (c >= limit) throw ValidationError("layer entry column out of range");
    width = layer.rows;
  }
  width_ = input_size_;
  for (const auto& layer : layers_) width_ = std::max(width_, layer.rows);
}

Dnn Dnn::from_dense(const std::vector<Matrix>& weights, bool constant_input) {
  std::vector<std::vector<std::uint64_t>> params;
  params.reserve(weights.size());
  for (const auto& w : weights) {
    std::vector<std::uint64_t> ids(w.data.size(), kStructuralParam);
    for (std::size_t i = 0; i < ids.size(); ++i)
      if (w.data[i] != 0.0) ids[i] = fresh_param_id();
    params.push_back(std::move(ids));
  }
  return from_dense_with_params(weights, params, constant_input);
}

Dnn Dnn::from_dense_with_params(const std::vector<Matrix>& weights,
                                const std::vector<std::vector<std::uint64_t>>& params,
                                bool constant_input) {
  if (weights.empty()) throw ValidationError("network needs at least one layer");
  if (params.size() != weights.size()) throw ValidationError("parameter table shape mismatch");
  const std::size_t extra = constant_input ? 1 : 0;
  if (weights.front().cols < extra) throw ValidationError("matrix too narrow for constant input");
  const std::size_t input_size = weights.front().cols - extra;
  std::vector<DnnLayer> layers;
  layers.reserve(weights.size());
  for (std::size_t k = 0; k < weights.size(); ++k) {
    const Matrix& w = weights[k];
    if (params[k].size() != w.data.size()) throw ValidationError("parameter table shape mismatch");
    if (w.cols < extra) throw ValidationError("matrix too narrow for constant input");
    DnnLayer layer;
    layer.rows = w.rows;
    layer.cols = w.cols - extra;
    for (std::size_t r = 0; r < w.rows; ++r) {
      for (std::size_t c = 0; c < w.cols; ++c) {
        const double v = w(r, c);
        if (v == 0.0) continue;
        layer.col.push_back(static_cast<std::uint32_t>(c));
        layer.value.push_back(v);
        layer.param.push_back(params[k][r * w.cols + c]);
      }
      layer.row_ptr.push_back(static_cast<std::uint32_t>(layer.col.size()));
    }
    layers.push_back(std::move(layer));
  }
  return Dnn(input_size, constant_input, std::move(layers));
}


std::vector<double> Dnn::operator()(std::span<const double> x) const {
  std::vector<double> y(output_size());
  DnnWorkspace ws;
  evaluate(x, y, ws);
  return y;
}

void Dnn::evaluate(std::span<const double> x, std::span<double> y, DnnWorkspace& ws) const {
  if (x.size() != input_size_) throw ValidationError("network input has the wrong size");
  if (y.size() != output_size()) throw ValidationError("network output buffer has the wrong size");
  if (layers_.empty()) {
    std::copy(x.begin(), x.end(), y.begin());
    return;
  }
  const std::size_t cap = width_ + 1;
  if (ws.a.size() < cap) ws.a.resize(cap);
  if (ws.b.size() < cap) ws.b.resize(cap);
  double* in = ws.a.data();
  double* out = ws.b.data();
  std::copy(x.begin(), x.end(), in);
  const std::size_t last = layers_.size() - 1;
  for (std::size_t k = 0; k <= last; ++k) {
    const DnnLayer& layer = layers_[k];
    in[layer.cols] = 1.0;
    const std::uint32_t* rp = layer.row_ptr.data();
    const std::uint32_t* col = layer.col.data();
    const double* val = layer.value.data();
    for (std::size_t r = 0; r < layer.rows; ++r) {
      double s = 0.0;
      for (std::uint32_t e = rp[r]; e < rp[r + 1]; ++e) s += val[e] * in[col[e]];
      out[r] = k == last ? s : relu(s);
    }
    std::swap(in, out);
  }
  std::copy(in, in + layers_.back().rows, y.begin());
}

void Dnn::evaluate_batch(std::span<const double> x, std::span<double> y, std::size_t batch,
                         DnnWorkspace& ws) const {
  if (x.size() != input_size_ * batch) throw ValidationError("network batch input has the wrong size");
  if (y.size() != output_size() * batch) throw ValidationError("network batch output has the wrong size");
  if (layers_.empty()) {
    std::copy(x.begin(), x.end(), y.begin());
    return;
  }
  // columns are processed in tiles that keep both layer buffers in L1
  constexpr std::size_t kTile = 64;
  const std::size_t cap = (width_ + 1) * kTile;
  if (ws.a.size() < cap) ws.a.resize(cap);
  if (ws.b.size() < cap) ws.b.resize(cap);
  const std::size_t out_rows = layers_.back().rows;
  const std::size_t last = layers_.size() - 1;
  for (std::size_t b0 = 0; b0 < batch; b0 += kTile) {
    const std::size_t nb = std::min(kTile, batch - b0);
    double* in = ws.a.data();
    double* out = ws.b.data();
    for (std::size_t c = 0; c < input_size_; ++c) std::copy_n(x.data() + c * batch + b0, nb, in + c * nb);
    for (std::size_t k = 0; k <= last; ++k) {
      const DnnLayer& layer = layers_[k];
      std::fill_n(in + layer.cols * nb, nb, 1.0);
      for (std::size_t r = 0; r < layer.rows; ++r) {
        double* acc = out + r * nb;
        const std::uint32_t lo = layer.row_ptr[r];
        const std::uint32_t hi = layer.row_ptr[r + 1];
        if (lo == hi) std::fill_n(acc, nb, 0.0);
        const bool hidden = k != last;
        for (std::uint32_t e = lo; e < hi; ++e) {
          const double v = layer.value[e];
          const double* src = in + static_cast<std::size_t>(layer.col[e]) * nb;
          const bool first = e == lo;
          // 0.0 + v * x keeps the scalar path's signed-zero behaviour
          if (hidden && e + 1 == hi) {
            if (first)
              for (std::size_t j = 0; j < nb; ++j) acc[j] = relu(0.0 + v * src[j]);
            else
              for (std::size_t j = 0; j < nb; ++j) acc[j] = relu(acc[j] + v * src[j]);
          } else if (first) {
            for (std::size_t j = 0; j < nb; ++j) acc[j] = 0.0 + v * src[j];
          } else {
            for (std::size_t j = 0; j < nb; ++j) acc[j] += v * src[j];
          }
        }
      }
      std::swap(in, out);
    }
    for (std::size_t c = 0; c < out_rows; ++c) std::copy_n(in + c * nb, nb, y.data() + c * batch + b0);
  }
}

WeightBudget Dnn::weight_budget() const {
  WeightBudget b;
  std::unordered_set<std::uint64_t> ids;
  const std::size_t extra = constant_input_ ? 1 : 0;
  for (const auto& layer : layers_) {
    b.total_weights += layer.rows * (layer.cols + extra);
    for (std::size_t e = 0; e < layer.nnz(); ++e) {
      if (layer.value[e] != 0.0) ++b.nonzero_weights;
      if (layer.param[e] != kStructuralParam) ids.insert(layer.param[e]);
    }
  }
  b.independent_weights = ids.size();
  return b;
}

std::vector<Matrix> Dnn::dense() const {
  std::vector<Matrix> out;
  const std::size_t extra = constant_input_ ? 1 : 0;
  for (const auto& layer : layers_) {
    Matrix m(layer.rows, layer.cols + extra);
    for (std::size_t r = 0; r < layer.rows; ++r)
      for (std::uint32_t e = layer.row_ptr[r]; e < layer.row_ptr[r + 1]; ++e)
        m(r, layer.col[e]) += layer.value[e];
    out.push_back(std::move(m));
  }
  return out;
}

// ---------------------------------------------------------------------------
// Sequences and recurrent evaluation

Sequence Sequence::from_scalars(std::span<const double> xs) {
  Sequence s;
  s.dim = 1;
  s.data.assign(xs.begin(), xs.end());
  return s;
}

std::vector<double> Sequence::channel(std::size_t c) const {
  std::vector<double> out(length());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = data[i * dim + c];
  return out;
}

BasicRnn::BasicRnn(Dnn net, std::size_t s, std::size_t s_out)
    : dnn(std::move(net)), input_size(s), output_size(s_out) {
  if (dnn.input_size() != s + s_out) throw ValidationError("basic RNN input must be (x, y_prev)");
  if (dnn.output_size() != s_out) throw ValidationError("basic RNN output size mismatch");
}

bool BasicRnn::is_elementwise() const {
  if (dnn.layers().empty()) return false;
  const auto& first = dnn.layers().front();
  for (std::size_t e = 0; e < first.nnz(); ++e)
    if (first.col[e] >= input_size && first.col[e] < input_size + output_size) return false;
  return true;
}

namespace {

std::size_t batch_chunk(const Dnn& net) {
  return std::clamp<std::size_t>(32768 / (net.width() + 1), 8, 1024);
}

// Positions are independent when no weight reads y_{i-1}.
Sequence eval_elementwise(const BasicRnn& net, const Sequence& xs) {
  const std::size_t n = xs.length();
  const std::size_t s = net.input_size;
  const std::size_t t = net.output_size;
  Sequence ys(n, t);
  const std::size_t chunk = batch_chunk(net.dnn);
  std::vector<double> in, out;
  DnnWorkspace ws;
  for (std::size_t start = 0; start < n; start += chunk) {
    const std::size_t m = std::min(chunk, n - start);
    in.assign((s + t) * m, 0.0);
    out.resize(t * m);
    for (std::size_t b = 0; b < m; ++b)
      for (std::size_t c = 0; c < s; ++c) in[c * m + b] = xs[start + b][c];
    net.dnn.evaluate_batch(in, out, m, ws);
    for (std::size_t b = 0; b < m; ++b)
      for (std::size_t c = 0; c < t; ++c) ys[start + b][c] = out[c * m + b];
  }
  return ys;
}

}  // namespace

Sequence eval_basic_rnn(const BasicRnn& net, const Sequence& xs) {
  if (xs.dim != net.input_size) throw ValidationError("sequence dimension does not match the RNN input");
  const std::size_t n = xs.length();
  if (n > 1 && net.is_elementwise()) return eval_elementwise(net, xs);
  Sequence ys(n, net.output_size);
  std::vector<double> buf(net.input_size + net.output_size, 0.0);
  DnnWorkspace ws;
  for (std::size_t i = 0; i < n; ++i) {
    std::copy(xs[i].begin(), xs[i].end(), buf.begin());
    if (i > 0) std::copy(ys[i - 1].begin(), ys[i - 1].end(), buf.begin() + static_cast<std::ptrdiff_t>(net.input_size));
    net.dnn.evaluate(buf, ys[i], ws);
  }
  return ys;
}

void DeepRnn::push(BasicRnn stage, Wiring w) {
  if (stages.empty()) {
    w = Wiring::plain;
  } else {
    const std::size_t prev = stages.back().output_size;
    const std::size_t want = w == Wiring::plain ? prev : 2 * prev;
    if (stage.input_size != want) throw ValidationError("stage input size does not match its wiring");
  }
  stages.push_back(std::move(stage));
  wiring.push_back(w);
}

void DeepRnn::append(const DeepRnn& other, Wiring first) {
  for (std::size_t i = 0; i < other.stages.size(); ++i)
    push(other.stages[i], i == 0 ? first : other.wiring[i]);
}

WeightBudget DeepRnn::weight_budget() const {
  WeightBudget b;
  std::unordered_set<std::uint64_t> ids;
  for (const auto& st : stages) {
    const auto sb = st.dnn.weight_budget();
    b.total_weights += sb.total_weights;
    b.nonzero_weights += sb.nonzero_weights;
    for (const auto& layer : st.dnn.layers())
      for (auto p : layer.param)
        if (p != kStructuralParam) ids.insert(p);
  }
  b.independent_weights = ids.size();
  return b;
}

DeepRnn single_stage(BasicRnn stage) {
  DeepRnn net;
  net.push(std::move(stage));
  return net;
}

namespace {

Sequence wire_last(const Sequence& cur) {
  const std::size_t n = cur.length();
  const std::size_t t = cur.dim;
  Sequence next(n, 2 * t);
  for (std::size_t i = 0; i < n; ++i) std::copy(cur[i].begin(), cur[i].end(), next[i].begin());
  if (n > 0) std::copy(cur[n - 1].begin(), cur[n - 1].end(), next[0].begin() + static_cast<std::ptrdiff_t>(t));
  return next;
}

}  // namespace

Sequence eval_deep_rnn(const DeepRnn& net, const Sequence& xs) {
  Sequence cur = xs;
  for (std::size_t k = 0; k < net.stages.size(); ++k) {
    if (k > 0 && net.wiring[k] == Wiring::init_with_last) cur = wire_last(cur);
    cur = eval_basic_rnn(net.stages[k], cur);
  }
  return cur;
}

namespace {

// Sequences sorted longest first and stored position-major: the block of
// position i holds dim channels of the active[i] sequences still running,
// channel-major, so each block is a ready-made evaluate_batch input. The
// storage is allocated once for the widest stage and reused.
struct PackedBatch {
  const std::vector<std::size_t>* active = nullptr;
  std::vector<std::size_t> offset;
  std::size_t dim = 0;
  std::unique_ptr<double[]> data;

  PackedBatch(const std::vector<std::size_t>& act, std::size_t max_dim) : active(&act) {
    offset.resize(act.size() + 1, 0);
    for (std::size_t i = 0; i < act.size(); ++i) offset[i + 1] = offset[i] + act[i];
    data = std::make_unique_for_overwrite<double[]>(offset.back() * max_dim);
  }
  double* block(std::size_t i) { return data.get() + offset[i] * dim; }
  const double* block(std::size_t i) const { return data.get() + offset[i] * dim; }
};

}  // namespace

std::vector<Sequence> eval_deep_rnn_batch(const DeepRnn& net, std::span<const Sequence> xs) {
  if (xs.empty() || net.stages.empty()) return {xs.begin(), xs.end()};
  for (const auto& seq : xs)
    if (seq.dim != net.stages.front().input_size)
      throw ValidationError("sequence dimension does not match the RNN input");
  std::vector<std::size_t> order(xs.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return xs[a].length() > xs[b].length(); });
  const std::size_t longest = xs[order.front()].length();
  std::vector<std::size_t> active(longest, 0);
  for (std::size_t i = 0; i < longest; ++i)
    while (active[i] < order.size() && xs[order[active[i]]].length() > i) ++active[i];

  std::size_t max_dim = xs.front().dim;
  for (const auto& st : net.stages) max_dim = std::max({max_dim, st.input_size, st.output_size});
  PackedBatch cur(active, max_dim);
  PackedBatch next(active, max_dim);
  cur.dim = xs.front().dim;
  for (std::size_t i = 0; i < longest; ++i) {
    double* blk = cur.block(i);
    const std::size_t m = active[i];
    for (std::size_t b = 0; b < m; ++b) {
      const auto x = xs[order[b]][i];
      for (std::size_t c = 0; c < cur.dim; ++c) blk[c * m + b] = x[c];
    }
  }

  DnnWorkspace ws;
  std::vector<double> in;
  for (std::size_t k = 0; k < net.stages.size(); ++k) {
    const BasicRnn& st = net.stages[k];
    if (k > 0 && net.wiring[k] == Wiring::init_with_last) {
      next.dim = 2 * cur.dim;
      for (std::size_t i = 0; i < longest; ++i) {
        const std::size_t m = active[i];
        double* dst = next.block(i);
        std::copy(cur.block(i), cur.block(i) + cur.dim * m, dst);
        std::fill(dst + cur.dim * m, dst + next.dim * m, 0.0);
      }
      // sequence b ends at position len_b - 1, where it is column b
      double* head = next.block(0);
      const std::size_t m0 = active[0];
      for (std::size_t b = 0; b < m0; ++b) {
        const std::size_t last = xs[order[b]].length() - 1;
        const double* src = cur.block(last);
        const std::size_t ml = active[last];
        for (std::size_t c = 0; c < cur.dim; ++c) head[(cur.dim + c) * m0 + b] = src[c * ml + b];
      }
      std::swap(cur, next);
    }
    if (cur.dim != st.input_size) throw ValidationError("sequence dimension does not match the RNN input");
    const std::size_t s = st.input_size;
    const std::size_t t = st.output_size;
    const bool elementwise = st.is_elementwise();
    next.dim = t;
    for (std::size_t i = 0; i < longest; ++i) {
      const std::size_t m = active[i];
      in.resize((s + t) * m);
      std::copy(cur.block(i), cur.block(i) + s * m, in.begin());
      if (i == 0 || elementwise) {
        std::fill(in.begin() + static_cast<std::ptrdiff_t>(s * m), in.end(), 0.0);
      } else {
        const double* prev = next.block(i - 1);
        const std::size_t mp = active[i - 1];
        for (std::size_t c = 0; c < t; ++c)
          std::copy(prev + c * mp, prev + c * mp + m, in.begin() + static_cast<std::ptrdiff_t>((s + c) * m));
      }
      st.dnn.evaluate_batch(in, std::span<double>(next.block(i), t * m), m, ws);
    }
    std::swap(cur, next);
  }

  std::vector<Sequence> out(xs.size());
  for (std::size_t b = 0; b < order.size(); ++b) {
    const std::size_t len = xs[order[b]].length();
    Sequence seq(len, cur.dim);
    for (std::size_t i = 0; i < len; ++i) {
      const double* blk = cur.block(i);
      const std::size_t m = active[i];
      for (std::size_t c = 0; c < cur.dim; ++c) seq[i][c] = blk[c * m + b];
    }
    out[order[b]] = std::move(seq);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Network assembly

namespace {

// Handle to a value living in the current (last committed) layer.
struct Src {
  enum Kind : std::uint8_t { zero, input, single, pair } kind = zero;
  std::uint32_t a = 0;
  std::uint32_t b = 0;

  static Src in(std::size_t c) { return {input, static_cast<std::uint32_t>(c), 0}; }
};

class Assembler {
 public:
  Assembler(std::size_t inputs, bool constant) : inputs_(inputs), width_(inputs), constant_(constant) {}

  void entry(std::uint32_t col, double v, std::uint64_t p) {
    pend_.col.push_back(col);
    pend_.value.push_back(v);
    pend_.param.push_back(p);
  }
  std::uint32_t finish_row() {
    pend_.row_ptr.push_back(static_cast<std::uint32_t>(pend_.col.size()));
    return static_cast<std::uint32_t>(pend_.rows++);
  }

  // Appends row r of W (sign-scaled) read through colmap, without finishing it.
  void mapped(const DnnLayer& w, std::size_t r, std::span<const Src> colmap, double sign) {
    for (std::uint32_t e = w.row_ptr[r]; e < w.row_ptr[r + 1]; ++e) {
      const double v = sign * w.value[e];
      const std::uint64_t p = w.param[e];
      if (w.col[e] == w.cols) {
        entry(kBiasSentinel, v, p);
        continue;
      }
      const Src& s = colmap[w.col[e]];
      switch (s.kind) {
        case Src::zero: break;
        case Src::input:
        case Src::single: entry(s.a, v, p); break;
        case Src::pair:
          entry(s.a, v, p);
          entry(s.b, -v, p);
          break;
      }
    }
  }

  Src single_row(const DnnLayer& w, std::size_t r, std::span<const Src> colmap) {
    mapped(w, r, colmap, 1.0);
    return {Src::single, finish_row(), 0};
  }
  Src pair_row(const DnnLayer& w, std::size_t r, std::span<const Src> colmap) {
    mapped(w, r, colmap, 1.0);
    const auto p = finish_row();
    mapped(w, r, colmap, -1.0);
    const auto m = finish_row();
    return {Src::pair, p, m};
  }
  void linear_row(const DnnLayer& w, std::size_t r, std::span<const Src> colmap) {
    mapped(w, r, colmap, 1.0);
    finish_row();
  }

  Src carry(const Src& s) {
    switch (s.kind) {
      case Src::zero: return s;
      case Src::input: {
        entry(s.a, 1.0, kStructuralParam);
        const auto p = finish_row();
        entry(s.a, -1.0, kStructuralParam);
        const auto m = finish_row();
        return {Src::pair, p, m};
      }
      case Src::single:
        entry(s.a, 1.0, kStructuralParam);
        return {Src::single, finish_row(), 0};
      case Src::pair: {
        entry(s.a, 1.0, kStructuralParam);
        const auto p = finish_row();
        entry(s.b, 1.0, kStructuralParam);
        const auto m = finish_row();
        return {Src::pair, p, m};
      }
    }
    return s;
  }
  void carry_all(std::span<Src> values) {
    for (auto& v : values) v = carry(v);
  }

  // Linear output row reproducing the value of s.
  void output_row(const Src& s) {
    switch (s.kind) {
      case Src::zero: break;
      case Src::input:
      case Src::single: entry(s.a, 1.0, kStructuralParam); break;
      case Src::pair:
        entry(s.a, 1.0, kStructuralParam);
        entry(s.b, -1.0, kStructuralParam);
        break;
    }
    finish_row();
  }

  void commit() {
    pend_.cols = width_;
    for (auto& c : pend_.col)
      if (c == kBiasSentinel) c = static_cast<std::uint32_t>(width_);
    width_ = pend_.rows;
    layers_.push_back(std::move(pend_));
    pend_ = DnnLayer{};
  }

  Dnn finish() { return Dnn(inputs_, constant_, std::move(layers_)); }

 private:
  std::size_t inputs_;
  std::size_t width_;
  bool constant_;
  std::vector<DnnLayer> layers_;
  DnnLayer pend_;
};

std::vector<Src> input_map(std::size_t n, std::size_t offset = 0) {
  std::vector<Src> m(n);
  for (std::size_t i = 0; i < n; ++i) m[i] = Src::in(offset + i);
  return m;
}

// Runs the hidden layers of `net` on colmap; carried values move along.
// Returns handles to the last hidden layer (or colmap itself for depth 0).
std::vector<Src> run_hidden(Assembler& as, const Dnn& net, std::vector<Src> colmap,
                            std::span<Src> carried) {
  const auto& layers = net.layers();
  for (std::size_t k = 0; k + 1 < layers.size(); ++k) {
    std::vector<Src> next(layers[k].rows);
    for (std::size_t r = 0; r < layers[k].rows; ++r) next[r] = as.single_row(layers[k], r, colmap);
    as.carry_all(carried);
    as.commit();
    colmap = std::move(next);
  }
  return colmap;
}

}  // namespace

Dnn identity_dnn(std::size_t width) {
  Assembler as(width, false);
  for (std::size_t i = 0; i < width; ++i) as.output_row(Src::in(i));
  as.commit();
  return as.finish();
}

Dnn linear_dnn(const Matrix& m) {
  std::vector<std::vector<std::uint64_t>> ids(1, std::vector<std::uint64_t>(m.data.size()));
  for (std::size_t i = 0; i < m.data.size(); ++i) ids[0][i] = interned_param_id(m.data[i]);
  return Dnn::from_dense_with_params({m}, ids, false);
}

Dnn extend_depth(const Dnn& net, std::size_t extra_layers) {
  if (extra_layers == 0) return net;
  if (net.layers().empty()) throw ValidationError("cannot extend an empty network");
  Assembler as(net.input_size(), net.constant_input());
  auto h = run_hidden(as, net, input_map(net.input_size()), {});
  const auto& out = net.layers().back();
  std::vector<Src> y(out.rows);
  for (std::size_t r = 0; r < out.rows; ++r) y[r] = as.pair_row(out, r, h);
  as.commit();
  for (std::size_t k = 1; k < extra_layers; ++k) {
    as.carry_all(y);
    as.commit();
  }
  for (const auto& s : y) as.output_row(s);
  as.commit();
  return as.finish();
}

Dnn fan_out(const Dnn& a0, const Dnn& b0) {
  if (a0.layers().empty() || b0.layers().empty()) throw ValidationError("cannot combine empty networks");
  if (a0.input_size() != b0.input_size()) throw ValidationError("fan-out networks need the same input");
  const std::size_t depth = std::max(a0.depth(), b0.depth());
  const Dnn a = extend_depth(a0, depth - a0.depth());
  const Dnn b = extend_depth(b0, depth - b0.depth());
  Assembler as(a.input_size(), a.constant_input() || b.constant_input());
  auto ha = input_map(a.input_size());
  auto hb = ha;
  for (std::size_t k = 0; k <= depth; ++k) {
    const auto& la = a.layers()[k];
    const auto& lb = b.layers()[k];
    if (k == depth) {
      for (std::size_t r = 0; r < la.rows; ++r) as.linear_row(la, r, ha);
      for (std::size_t r = 0; r < lb.rows; ++r) as.linear_row(lb, r, hb);
    } else {
      std::vector<Src> na(la.rows), nb(lb.rows);
      for (std::size_t r = 0; r < la.rows; ++r) na[r] = as.single_row(la, r, ha);
      for (std::size_t r = 0; r < lb.rows; ++r) nb[r] = as.single_row(lb, r, hb);
      ha = std::move(na);
      hb = std::move(nb);
    }
    as.commit();
  }
  return as.finish();
}

Dnn parallel(const Dnn& a, const Dnn& b) {
  const std::size_t total = a.input_size() + b.input_size();
  std::vector<std::int64_t> ma(a.input_size()), mb(b.input_size());
  for (std::size_t i = 0; i < ma.size(); ++i) ma[i] = static_cast<std::int64_t>(i);
  for (std::size_t i = 0; i < mb.size(); ++i) mb[i] = static_cast<std::int64_t>(a.input_size() + i);
  return fan_out(embed_inputs(a, total, ma), embed_inputs(b, total, mb));
}

Dnn compose_selected(const Dnn& outer, const Dnn& inner, std::span<const std::int64_t> source) {
  if (source.size() != outer.input_size()) throw ValidationError("selection map must cover every outer input");
  if (inner.layers().empty() || outer.layers().empty()) throw ValidationError("cannot compose empty networks");
  for (auto s : source)
    if (s >= static_cast<std::int64_t>(inner.output_size())) throw ValidationError("selection index out of range");
  Assembler as(inner.input_size(), inner.constant_input() || outer.constant_input());
  auto h = run_hidden(as, inner, input_map(inner.input_size()), {});
  const auto& last = inner.layers().back();
  std::vector<Src> cols(source.size());
  for (std::size_t c = 0; c < source.size(); ++c)
    if (source[c] >= 0) cols[c] = as.pair_row(last, static_cast<std::size_t>(source[c]), h);
  as.commit();
  auto g = run_hidden(as, outer, std::move(cols), {});
  const auto& out = outer.layers().back();
  for (std::size_t r = 0; r < out.rows; ++r) as.linear_row(out, r, g);
  as.commit();
  return as.finish();
}

Dnn compose(const Dnn& outer, const Dnn& inner) {
  if (outer.input_size() != inner.output_size()) throw ValidationError("composition size mismatch");
  std::vector<std::int64_t> map(outer.input_size());
  for (std::size_t i = 0; i < map.size(); ++i) map[i] = static_cast<std::int64_t>(i);
  return compose_selected(outer, inner, map);
}

Dnn select_outputs(const Dnn& net, std::span<const std::size_t> outputs) {
  if (net.layers().empty()) throw ValidationError("cannot select outputs of an empty network");
  auto layers = net.layers();
  const DnnLayer& old = net.layers().back();
  DnnLayer sel;
  sel.cols = old.cols;
  for (auto r : outputs) {
    if (r >= old.rows) throw ValidationError("output index out of range");
    for (std::uint32_t e = old.row_ptr[r]; e < old.row_ptr[r + 1]; ++e) {
      sel.col.push_back(old.col[e]);
      sel.value.push_back(old.value[e]);
      sel.param.push_back(old.param[e]);
    }
    sel.row_ptr.push_back(static_cast<std::uint32_t>(sel.col.size()));
    ++sel.rows;
  }
  layers.back() = std::move(sel);
  return Dnn(net.input_size(), net.constant_input(), std::move(layers));
}

Dnn embed_inputs(const Dnn& net, std::size_t new_inputs, std::span<const std::int64_t> map) {
  if (map.size() != net.input_size()) throw ValidationError("input map must cover every input");
  if (net.layers().empty()) throw ValidationError("cannot embed an empty network");
  auto layers = net.layers();
  const DnnLayer& old = net.layers().front();
  DnnLayer first;
  first.rows = old.rows;
  first.cols = new_inputs;
  for (std::size_t r = 0; r < old.rows; ++r) {
    for (std::uint32_t e = old.row_ptr[r]; e < old.row_ptr[r + 1]; ++e) {
      std::uint32_t c = old.col[e];
      if (c == old.cols) {
        c = static_cast<std::uint32_t>(new_inputs);
      } else {
        const auto m = map[c];
        if (m < 0) continue;
        if (m >= static_cast<std::int64_t>(new_inputs)) throw ValidationError("input map index out of range");
        c = static_cast<std::uint32_t>(m);
      }
      first.col.push_back(c);
      first.value.push_back(old.value[e]);
      first.param.push_back(old.param[e]);
    }
    first.row_ptr.push_back(static_cast<std::uint32_t>(first.col.size()));
  }
  layers.front() = std::move(first);
  return Dnn(new_inputs, net.constant_input(), std::move(layers));
}

namespace {

// Rebuilds `layer` keeping rows flagged in keep_row and remapping columns
// (remap[c] < 0 drops the entry). The bias column moves to new_cols.
DnnLayer filter_layer(const DnnLayer& layer, const std::vector<char>& keep_row,
                      const std::vector<std::int64_t>& remap, std::size_t new_cols) {
  DnnLayer out;
  out.cols = new_cols;
  for (std::size_t r = 0; r < layer.rows; ++r) {
    if (!keep_row[r]) continue;
    for (std::uint32_t e = layer.row_ptr[r]; e < layer.row_ptr[r + 1]; ++e) {
      std::int64_t c = layer.col[e] == layer.cols ? static_cast<std::int64_t>(new_cols) : remap[layer.col[e]];
      if (c < 0 || layer.value[e] == 0.0) continue;
      out.col.push_back(static_cast<std::uint32_t>(c));
      out.value.push_back(layer.value[e]);
      out.param.push_back(layer.param[e]);
    }
    out.row_ptr.push_back(static_cast<std::uint32_t>(out.col.size()));
    ++out.rows;
  }
  return out;
}

}  // namespace

Dnn prune(const Dnn& net) {
  if (net.layers().size() < 2) return net;
  std::vector<DnnLayer> layers = net.layers();
  const std::size_t last = layers.size() - 1;

  // Forward: hidden neurons whose row is empty after dropping dead inputs are 0.
  std::vector<std::int64_t> remap(net.input_size());
  for (std::size_t i = 0; i < remap.size(); ++i) remap[i] = static_cast<std::int64_t>(i);
  std::size_t cols = net.input_size();
  for (std::size_t k = 0; k <= last; ++k) {
    const DnnLayer& layer = layers[k];
    std::vector<char> keep(layer.rows, 1);
    DnnLayer filtered = filter_layer(layer, keep, remap, cols);
    if (k == last) {
      layers[k] = std::move(filtered);
      break;
    }
    std::vector<std::int64_t> next(layer.rows, -1);
    std::vector<char> alive(layer.rows, 0);
    std::size_t count = 0;
    for (std::size_t r = 0; r < filtered.rows; ++r)
      if (filtered.row_ptr[r + 1] > filtered.row_ptr[r]) {
        alive[r] = 1;
        next[r] = static_cast<std::int64_t>(count++);
      }
    std::vector<std::int64_t> same(cols + 0);
    for (std::size_t i = 0; i < same.size(); ++i) same[i] = static_cast<std::int64_t>(i);
    layers[k] = filter_layer(filtered, alive, same, cols);
    remap = std::move(next);
    cols = count;
  }

  // Backward: drop hidden neurons no later layer reads.
  for (std::size_t k = last; k >= 1; --k) {
    const DnnLayer& reader = layers[k];
    std::vector<char> used(reader.cols, 0);
    for (std::size_t e = 0; e < reader.nnz(); ++e)
      if (reader.col[e] < reader.cols) used[reader.col[e]] = 1;
    std::vector<std::int64_t> map(reader.cols, -1);
    std::size_t count = 0;
    for (std::size_t i = 0; i < reader.cols; ++i)
      if (used[i]) map[i] = static_cast<std::int64_t>(count++);
    layers[k] = filter_layer(reader, std::vector<char>(reader.rows, 1), map, count);
    std::vector<std::int64_t> same(layers[k - 1].cols);
    for (std::size_t i = 0; i < same.size(); ++i) same[i] = static_cast<std::int64_t>(i);
    layers[k - 1] = filter_layer(layers[k - 1], used, same, layers[k - 1].cols);
  }
  return Dnn(net.input_size(), net.constant_input(), std::move(layers));
}

// ---------------------------------------------------------------------------
// Recurrent combinators

DeepRnn parallel(const DeepRnn& a, const DeepRnn& b) {
  if (a.stages.size() != b.stages.size()) throw ValidationError("parallel deep RNNs need the same stage count");
  DeepRnn out;
  for (std::size_t k = 0; k < a.stages.size(); ++k) {
    if (a.wiring[k] != b.wiring[k]) throw ValidationError("parallel deep RNNs need the same wiring");
    const BasicRnn& sa = a.stages[k];
    const BasicRnn& sb = b.stages[k];
    const std::size_t s = sa.input_size + sb.input_size;
    const std::size_t total = s + sa.output_size + sb.output_size;
    // combined x: (x_a, x_b) for plain wiring, (y_a, y_b, last_a, last_b) otherwise
    std::vector<std::int64_t> ma(sa.input_size + sa.output_size), mb(sb.input_size + sb.output_size);
    const bool last = k > 0 && a.wiring[k] == Wiring::init_with_last;
    const std::size_t ha = sa.input_size / 2, hb = sb.input_size / 2;
    for (std::size_t j = 0; j < sa.input_size; ++j)
      ma[j] = static_cast<std::int64_t>(!last ? j : (j < ha ? j : j - ha + ha + hb));
    for (std::size_t j = 0; j < sb.input_size; ++j)
      mb[j] = static_cast<std::int64_t>(!last ? sa.input_size + j : (j < hb ? ha + j : 2 * ha + hb + (j - hb)));
    for (std::size_t j = 0; j < sa.output_size; ++j) ma[sa.input_size + j] = static_cast<std::int64_t>(s + j);
    for (std::size_t j = 0; j < sb.output_size; ++j)
      mb[sb.input_size + j] = static_cast<std::int64_t>(s + sa.output_size + j);
    Dnn net = fan_out(embed_inputs(sa.dnn, total, ma), embed_inputs(sb.dnn, total, mb));
    out.push(BasicRnn(std::move(net), s, sa.output_size + sb.output_size), a.wiring[k]);
  }
  return out;
}

DeepRnn pass_through(const DeepRnn& net) {
  DeepRnn out;
  for (std::size_t k = 0; k < net.stages.size(); ++k) {
    const BasicRnn& st = net.stages[k];
    const bool last_wired = k > 0 && net.wiring[k] == Wiring::init_with_last;
    const std::size_t s = st.input_size;
    const std::size_t t = st.output_size;
    // new input layout: x' (s + 1 or s + 2), then y_prev (t), c_prev
    const std::size_t s_new = last_wired ? s + 2 : s + 1;
    const std::size_t half = s / 2;
    std::vector<Src> colmap(s + t);
    std::size_t carry_col = s;
    for (std::size_t j = 0; j < s; ++j)
      colmap[j] = Src::in(last_wired ? (j < half ? j : j + 1) : j);
    if (last_wired) carry_col = half;
    for (std::size_t j = 0; j < t; ++j) colmap[s + j] = Src::in(s_new + j);

    Assembler as(s_new + t + 1, st.dnn.constant_input());
    std::vector<Src> carried{Src::in(carry_col)};
    auto h = run_hidden(as, st.dnn, colmap, carried);
    const auto& outl = st.dnn.layers().back();
    for (std::size_t r = 0; r < outl.rows; ++r) as.linear_row(outl, r, h);
    as.output_row(carried[0]);
    as.commit();
    out.push(BasicRnn(as.finish(), s_new, t + 1), net.wiring[k]);
  }
  return out;
}

namespace {

// `second` reads outputs [offset, offset + second.input_size) of `first`.
BasicRnn fuse_reading(const BasicRnn& first, const BasicRnn& second, std::size_t offset) {
  if (offset + second.input_size > first.output_size) throw ValidationError("fused stage reads past the outputs");
  const std::size_t s = first.input_size;
  const std::size_t t1 = first.output_size;
  const std::size_t t2 = second.output_size;
  Assembler as(s + t1 + t2, first.dnn.constant_input() || second.dnn.constant_input());

  std::vector<Src> y2prev = input_map(t2, s + t1);
  auto h = run_hidden(as, first.dnn, input_map(s + t1), y2prev);
  const auto& l1 = first.dnn.layers().back();
  std::vector<Src> y1(t1);
  for (std::size_t r = 0; r < t1; ++r) y1[r] = as.pair_row(l1, r, h);
  as.carry_all(y2prev);
  as.commit();

  std::vector<Src> colmap(second.input_size + t2);
  for (std::size_t j = 0; j < second.input_size; ++j) colmap[j] = y1[offset + j];
  for (std::size_t j = 0; j < t2; ++j) colmap[second.input_size + j] = y2prev[j];
  auto g = run_hidden(as, second.dnn, colmap, y1);
  for (const auto& v : y1) as.output_row(v);
  const auto& l2 = second.dnn.layers().back();
  for (std::size_t r = 0; r < t2; ++r) as.linear_row(l2, r, g);
  as.commit();
  return BasicRnn(as.finish(), s, t1 + t2);
}

}  // namespace

BasicRnn fuse(const BasicRnn& first, const BasicRnn& second) {
  if (second.input_size != first.output_size) throw ValidationError("fused stages do not chain");
  return fuse_reading(first, second, 0);
}

Dnn unroll(const BasicRnn& net, std::size_t n) {
  if (n == 0) throw ValidationError("unroll length must be positive");
  const auto& layers = net.dnn.layers();
  if (layers.empty()) throw ValidationError("cannot unroll an empty network");
  const std::size_t d = layers.size() - 1;
  const std::size_t s = net.input_size;
  const std::size_t t = net.output_size;
  Assembler as(n * s, net.dnn.constant_input());
  std::vector<Src> xs = input_map(n * s);
  std::vector<Src> ys(n * t);

  for (std::size_t j = 0; j < n; ++j) {
    std::vector<Src> colmap(s + t);
    for (std::size_t c = 0; c < s; ++c) colmap[c] = xs[j * s + c];
    if (j > 0)
      for (std::size_t c = 0; c < t; ++c) colmap[s + c] = ys[(j - 1) * t + c];
    const std::span<Src> future(xs.data() + (j + 1) * s, (n - j - 1) * s);
    for (std::size_t k = 0; k <= d; ++k) {
      const std::span<Src> past(ys.data(), j * t);
      const DnnLayer& w = layers[k];
      if (k == d && j + 1 == n) {
        for (std::size_t i = 0; i + 1 < n; ++i)
          for (std::size_t c = 0; c < t; ++c) as.output_row(ys[i * t + c]);
        for (std::size_t r = 0; r < t; ++r) as.linear_row(w, r, colmap);
        as.commit();
        break;
      }
      if (k < d) {
        std::vector<Src> next(w.rows);
        for (std::size_t r = 0; r < w.rows; ++r) next[r] = as.single_row(w, r, colmap);
        as.carry_all(future);
        as.carry_all(past);
        as.commit();
        colmap = std::move(next);
      } else {
        std::vector<Src> yj(t);
        for (std::size_t r = 0; r < t; ++r) yj[r] = as.pair_row(w, r, colmap);
        as.carry_all(future);
        as.carry_all(past);
        as.commit();
        std::copy(yj.begin(), yj.end(), ys.begin() + static_cast<std::ptrdiff_t>(j * t));
      }
    }
  }
  return as.finish();
}

namespace {

struct Group {
  BasicRnn net;
  std::size_t offset = 0;  // start of the last stage's outputs
  std::size_t visible = 0;
};

std::vector<Group> fused_groups(const DeepRnn& net) {
  std::vector<Group> groups;
  for (std::size_t k = 0; k < net.stages.size(); ++k) {
    const BasicRnn& st = net.stages[k];
    if (k == 0 || net.wiring[k] == Wiring::init_with_last) {
      groups.push_back({st, 0, st.output_size});
      continue;
    }
    Group& g = groups.back();
    const std::size_t before = g.net.output_size;
    g.net = fuse_reading(g.net, st, g.offset);
    g.offset = before;
    g.visible = st.output_size;
  }
  return groups;
}

std::vector<std::int64_t> last_wired_sources(std::size_t n, std::size_t stride, std::size_t offset,
                                             std::size_t visible) {
  std::vector<std::int64_t> map(n * 2 * visible, -1);
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t c = 0; c < visible; ++c) {
      map[j * 2 * visible + c] = static_cast<std::int64_t>(j * stride + offset + c);
      if (j == 0)
        map[visible + c] = static_cast<std::int64_t>((n - 1) * stride + offset + c);
    }
  return map;
}

}  // namespace

Dnn unroll(const DeepRnn& net, std::size_t n) {
  if (net.stages.empty()) throw ValidationError("cannot unroll an empty network");
  const auto groups = fused_groups(net);
  Dnn cur = unroll(groups.front().net, n);
  for (std::size_t g = 1; g < groups.size(); ++g) {
    const Group& prev = groups[g - 1];
    cur = compose_selected(unroll(groups[g].net, n), cur,
                           last_wired_sources(n, prev.net.output_size, prev.offset, prev.visible));
  }
  const Group& back = groups.back();
  std::vector<std::size_t> outs;
  for (std::size_t j = 0; j < n; ++j)
    for (std::size_t c = 0; c < back.visible; ++c) outs.push_back(j * back.net.output_size + back.offset + c);
  return select_outputs(cur, outs);
}

Dnn rnn_as_dnn(const DeepRnn& net, std::size_t n) {
  if (net.stages.empty()) throw ValidationError("cannot convert an empty network");
  if (n == 0) throw ValidationError("sequence length must be positive");
  const auto groups = fused_groups(net);
  const std::size_t s = groups.front().net.input_size;
  std::vector<std::int64_t> first(n * s, -1);
  for (std::size_t c = 0; c < s; ++c) first[c] = static_cast<std::int64_t>(c);
  Dnn cur = prune(embed_inputs(unroll(groups.front().net, n), s, first));
  for (std::size_t g = 1; g < groups.size(); ++g) {
    const Group& prev = groups[g - 1];
    cur = prune(compose_selected(unroll(groups[g].net, n), cur,
                                 last_wired_sources(n, prev.net.output_size, prev.offset, prev.visible)));
  }
  const Group& back = groups.back();
  std::vector<std::size_t> outs;
  for (std::size_t c = 0; c < back.visible; ++c) outs.push_back((n - 1) * back.net.output_size + back.offset + c);
  return prune(select_outputs(cur, outs));
}

// ---------------------------------------------------------------------------
// Serialization: sparse rows with hex-float values, exact round trip.

namespace {

std::string hex(double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%a", v);
  return buf;
}

double parse_double(const std::string& tok) {
  char* end = nullptr;
  const double v = std::strtod(tok.c_str(), &end);
  if (end == tok.c_str() || *end != '\0') throw ValidationError("bad number in network file: " + tok);
  return v;
}

void expect(std::istream& in, const std::string& word) {
  std::string tok;
  if (!(in >> tok) || tok != word) throw ValidationError("network file: expected '" + word + "'");
}

template <class T>
T read_value(std::istream& in) {
  T v{};
  if (!(in >> v)) throw ValidationError("network file: truncated");
  return v;
}

}  // namespace

void write_network(std::ostream& out, const DeepRnn& net) {
  out << "rnnafem-network 1\n";
  out << "stages " << net.stages.size() << '\n';
  for (std::size_t k = 0; k < net.stages.size(); ++k) {
    const BasicRnn& st = net.stages[k];
    out << "stage " << st.input_size << ' ' << st.output_size << ' '
        << (net.wiring[k] == Wiring::plain ? "plain" : "init_with_last") << ' '
        << (st.dnn.constant_input() ? 1 : 0) << ' ' << st.dnn.layers().size() << '\n';
    for (const auto& layer : st.dnn.layers()) {
      out << "layer " << layer.rows << ' ' << layer.cols << '\n';
      for (std::size_t r = 0; r < layer.rows; ++r) {
        out << (layer.row_ptr[r + 1] - layer.row_ptr[r]);
        for (std::uint32_t e = layer.row_ptr[r]; e < layer.row_ptr[r + 1]; ++e)
          out << ' ' << layer.col[e] << ' ' << hex(layer.value[e]) << ' ' << layer.param[e];
        out << '\n';
      }
    }
  }
}

DeepRnn read_network(std::istream& in) {
  expect(in, "rnnafem-network");
  if (read_value<int>(in) != 1) throw ValidationError("unsupported network file version");
  expect(in, "stages");
  const auto count = read_value<std::size_t>(in);
  DeepRnn net;
  for (std::size_t k = 0; k < count; ++k) {
    expect(in, "stage");
    const auto s = read_value<std::size_t>(in);
    const auto t = read_value<std::size_t>(in);
    const auto wiring_name = read_value<std::string>(in);
    const bool constant = read_value<int>(in) != 0;
    const auto n_layers = read_value<std::size_t>(in);
    Wiring w;
    if (wiring_name == "plain") w = Wiring::plain;
    else if (wiring_name == "init_with_last") w = Wiring::init_with_last;
    else throw ValidationError("unknown wiring '" + wiring_name + "'");
    std::vector<DnnLayer> layers(n_layers);
    for (auto& layer : layers) {
      expect(in, "layer");
      layer.rows = read_value<std::size_t>(in);
      layer.cols = read_value<std::size_t>(in);
      for (std::size_t r = 0; r < layer.rows; ++r) {
        const auto nnz = read_value<std::size_t>(in);
        for (std::size_t e = 0; e < nnz; ++e) {
          layer.col.push_back(read_value<std::uint32_t>(in));
          layer.value.push_back(parse_double(read_value<std::string>(in)));
          layer.param.push_back(read_value<std::uint64_t>(in));
        }
        layer.row_ptr.push_back(static_cast<std::uint32_t>(layer.col.size()));
      }
    }
    net.push(BasicRnn(Dnn(s + t, constant, std::move(layers)), s, t), w);
  }
  return net;
}

}  // namespace rnnafem
