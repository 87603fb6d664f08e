#include "rnnafem/blocks.hpp"

#include <cmath>
#include <map>
#include <memory>
#include <mutex>

#include "rnnafem/errors.hpp"

namespace rnnafem {

namespace {

bool is_complement(Comparator cmp) { return cmp == Comparator::greater_equal || cmp == Comparator::less_equal; }

// relu(v) - relu(-v) split into its nonnegative parts.
std::pair<Signal, Signal> split_pair(const Signal& pair) {
  Signal pos, neg;
  pos.layer = neg.layer = pair.layer;
  pos.terms.push_back(pair.terms[0]);
  neg.terms.push_back(pair.terms[1]);
  neg.terms[0].coef = -neg.terms[0].coef;
  pos.nonneg = neg.nonneg = true;
  return {pos, neg};
}

}  // namespace

// ---------------------------------------------------------------------------
// Gadgets

Signal Gadgets::hat(const Signal& a, const Signal& d, int shift) {
  if (!a.nonneg) throw ValidationError("IF payload must be nonnegative here");
  const int steps = opt_.n_min + shift;
  const Signal am = b_.materialize(a);
  const Signal dp = b_.relu(d);
  if (opt_.if_form == IfForm::one_layer) {
    const Signal u = b_.relu(b_.lin({{1.0, am}, {-std::ldexp(1.0, steps), dp}}));
    return b_.relu(b_.lin({{1.0, am}, {-1.0, u}}));
  }
  // u_i = a - y_i for the doubling recurrence y_i = min(2 y_{i-1}, a)
  Signal u = b_.relu(b_.lin({{1.0, am}, {-2.0, dp}}));
  for (int i = 1; i < steps; ++i) u = b_.relu(b_.lin({{2.0, u}, {-1.0, am}}));
  return b_.relu(b_.lin({{1.0, am}, {-1.0, u}}));
}

Signal Gadgets::select(const Signal& a, Comparator cmp, const Signal& b, const Signal& c, int shift) {
  const bool forward = cmp == Comparator::greater || cmp == Comparator::less_equal;
  const Signal d = forward ? b_.lin({{1.0, b}, {-1.0, c}}) : b_.lin({{1.0, c}, {-1.0, b}});
  auto one = [&](const Signal& part) {
    const Signal pm = b_.materialize(part);
    const Signal h = hat(pm, d, shift);
    return is_complement(cmp) ? b_.relu(b_.lin({{1.0, pm}, {-1.0, h}})) : h;
  };
  if (a.nonneg) return one(a);
  const Signal pair = b_.materialize(a);
  if (!pair.pair) return one(pair);
  const auto [pos, neg] = split_pair(pair);
  Signal out = b_.lin({{1.0, one(pos)}, {-1.0, one(neg)}});
  out.pair = true;
  return out;
}

Signal Gadgets::max_nonneg(const Signal& a, const Signal& b) {
  const Signal am = b_.materialize(a);
  const Signal bm = b_.materialize(b);
  const Signal first = select(am, Comparator::greater_equal, am, bm);
  const Signal second = select(bm, Comparator::greater, bm, am);
  return b_.relu(b_.lin({{1.0, first}, {1.0, second}}));
}

Signal Gadgets::scale_if(const Signal& v, const Signal& cond_d, int k, int shift) {
  const double factor = std::ldexp(1.0, k);
  auto one = [&](const Signal& part) {
    const Signal pm = b_.materialize(part);
    const Signal h = hat(pm, cond_d, shift);
    const Signal rest = b_.relu(b_.lin({{1.0, pm}, {-1.0, h}}));
    return b_.relu(b_.lin({{factor, h}, {1.0, rest}}));
  };
  if (v.nonneg) return one(v);
  const Signal pair = b_.materialize(v);
  if (!pair.pair) return one(pair);
  const auto [pos, neg] = split_pair(pair);
  Signal out = b_.lin({{1.0, one(pos)}, {-1.0, one(neg)}});
  out.pair = true;
  return out;
}

Signal Gadgets::pow2_scale(const Signal& x, int k) {
  // steps of 4^(+-1) keep every weight in the shared tag set
  Signal cur = x;
  while (k != 0) {
    const int step = k >= 2 ? 2 : k <= -2 ? -2 : k;
    k -= step;
    cur = b_.lin({{std::ldexp(1.0, step), cur}});
    if (k != 0) cur = b_.materialize(cur);
  }
  return cur;
}

Signal Gadgets::square(const Signal& x, int n, int scale_exp) {
  const Signal scaled = pow2_scale(x, -scale_exp);
  const Signal y = b_.embed(square_dnn(n), std::span<const Signal>(&scaled, 1)).front();
  Signal out = pow2_scale(b_.relu(y), 2 * scale_exp);
  out.nonneg = true;
  return out;
}

Signal Gadgets::multiply(const Signal& x, const Signal& y, int n, int scale_exp) {
  const Signal s = b_.lin({{1.0, x}, {1.0, y}});
  const Signal q1 = square(s, n, scale_exp);
  const Signal q2 = square(x, n, scale_exp);
  const Signal q3 = square(y, n, scale_exp);
  return b_.lin({{0.5, q1}, {-0.5, q2}, {-0.5, q3}});
}

// ---------------------------------------------------------------------------
// IF as a literal recurrence

DeepRnn build_if(Comparator cmp, int n_steps) {
  if (n_steps < 1) throw ValidationError("IF needs at least one doubling step");
  const bool forward = cmp == Comparator::greater || cmp == Comparator::less_equal;

  // stage 1: state (A+, A-, Y+, Y-), A_i = a_i + A_{i-1}, Y_i = min(2 relu(Y_{i-1} + d_i), A_i)
  NetBuilder nb(7);
  const Signal a = nb.input(0);
  const Signal d = forward ? nb.lin({{1.0, nb.input(1)}, {-1.0, nb.input(2)}})
                           : nb.lin({{1.0, nb.input(2)}, {-1.0, nb.input(1)}});
  const Signal parts[2] = {nb.relu(a), nb.relu(nb.lin({{-1.0, a}}))};
  std::vector<Signal> acc, dbl;
  for (int s = 0; s < 2; ++s) {
    const Signal acc_i = nb.relu(nb.lin({{1.0, parts[s]}, {1.0, nb.nonneg_input(3 + s)}}));
    const Signal t = nb.relu(nb.lin({{1.0, nb.input(5 + s)}, {1.0, d}}));
    const Signal v = nb.relu(nb.lin({{1.0, acc_i}, {-2.0, t}}));
    acc.push_back(acc_i);
    dbl.push_back(nb.lin({{1.0, acc_i}, {-1.0, v}}));
  }
  DeepRnn net;
  net.push(BasicRnn(nb.build({acc[0], acc[1], dbl[0], dbl[1]}), 3, 4));

  NetBuilder out(5);
  Signal y;
  if (is_complement(cmp)) {
    const Signal pos = out.relu(out.lin({{1.0, out.input(0)}, {-1.0, out.input(2)}}));
    const Signal neg = out.relu(out.lin({{1.0, out.input(1)}, {-1.0, out.input(3)}}));
    y = out.lin({{1.0, pos}, {-1.0, neg}});
  } else {
    y = out.lin({{1.0, out.input(2)}, {-1.0, out.input(3)}});
  }
  net.push(BasicRnn(out.build({y}), 4, 1));
  return net;
}

double eval_if_rnn(const DeepRnn& net, int n_steps, double a, double b, double c) {
  const double x[3] = {a, b, c};
  return eval_at_last(net, static_cast<std::size_t>(n_steps), x).front();
}

// ---------------------------------------------------------------------------
// SQUARE and MULTIPLY

namespace {

// One step applies the hat G(v) = 2 relu(v) - 4 relu(v - 1/2) twice:
// v = |x_i| + Q_{i-1}, P = G(v), Q = G(P); A accumulates |x_i|.
BasicRnn square_sawtooth_stage(std::size_t input_size, std::size_t x_col) {
  NetBuilder nb(input_size + 3);
  const Signal ax = nb.abs(nb.input(x_col));
  const Signal v = nb.lin({{1.0, ax}, {1.0, nb.nonneg_input(input_size + 1)}});
  const Signal p = nb.lin({{2.0, nb.relu(v)}, {-4.0, nb.relu(nb.lin({{1.0, v}}, -0.5))}});
  const Signal q = nb.lin({{2.0, nb.relu(p)}, {-4.0, nb.relu(nb.lin({{1.0, p}}, -0.5))}});
  const Signal acc = nb.lin({{1.0, ax}, {1.0, nb.nonneg_input(input_size + 2)}});
  return BasicRnn(nb.build({p, q, acc}), input_size, 3);
}

// Y_i = 16 Y_{i-1} + 4 P_i + Q_i with the factor 16 split as 4 * 4; A passes.
BasicRnn square_horner_stage() {
  NetBuilder nb(5);
  const Signal inner = nb.relu(nb.lin({{4.0, nb.nonneg_input(3)}, {1.0, nb.nonneg_input(0)}}));
  const Signal y = nb.lin({{4.0, inner}, {1.0, nb.nonneg_input(1)}});
  return BasicRnn(nb.build({y, nb.nonneg_input(2)}), 3, 2);
}

// Z_i = Y_n / 16^i via Z_i = (1/4) relu((1/4)(Ylast_i + Z_{i-1})); R_i = A_i - Z_i.
BasicRnn square_tail_stage() {
  NetBuilder nb(6);
  const Signal z = nb.lin({{0.25, nb.relu(nb.lin({{0.25, nb.nonneg_input(2)}, {0.25, nb.nonneg_input(4)}}))}});
  const Signal r = nb.lin({{1.0, nb.nonneg_input(1)}, {-1.0, z}});
  return BasicRnn(nb.build({z, r}), 4, 2);
}

BasicRnn select_stage(std::size_t inputs, std::size_t channel) {
  NetBuilder nb(inputs + 1);
  return BasicRnn(nb.build({nb.input(channel)}), inputs, 1);
}

}  // namespace

DeepRnn build_square(int n, int scale_exponent) {
  if (n < 1) throw ValidationError("SQUARE needs n >= 1");
  if (scale_exponent != 0 && scale_exponent != n)
    throw ValidationError("SQUARE supports scale exponent 0 or n only");
  DeepRnn net;
  if (scale_exponent == 0) {
    net.push(square_sawtooth_stage(1, 0));
  } else {
    // H_i = (relu(x_i + H_{i-1}) - relu(-x_i - H_{i-1})) / 2, so H_n = x / 2^n
    NetBuilder h(2);
    const Signal sum = h.lin({{1.0, h.input(0)}, {1.0, h.input(1)}});
    const Signal half = h.lin({{0.5, h.relu(sum)}, {-0.5, h.relu(h.lin({{-1.0, sum}}))}});
    net.push(BasicRnn(h.build({half}), 1, 1));
    net.push(square_sawtooth_stage(2, 1), Wiring::init_with_last);
  }
  net.push(square_horner_stage());
  net.push(square_tail_stage(), Wiring::init_with_last);
  net.push(select_stage(2, 1));
  if (scale_exponent != 0) {
    // W_i = 4 relu(Rlast_i + W_{i-1}), so W_n = 4^n R_n
    NetBuilder w(3);
    const Signal grow = w.lin({{4.0, w.relu(w.lin({{1.0, w.input(1)}, {1.0, w.input(2)}}))}});
    net.push(BasicRnn(w.build({grow}), 2, 1), Wiring::init_with_last);
  }
  return net;
}

DeepRnn build_multiply(int n) {
  if (n < 1) throw ValidationError("MULTIPLY needs n >= 1");
  DeepRnn net;
  NetBuilder in(5);
  net.push(BasicRnn(in.build({in.lin({{1.0, in.input(0)}, {1.0, in.input(1)}}), in.input(0), in.input(1)}), 2, 3));
  const DeepRnn sq = build_square(n, n);
  net.append(parallel(parallel(sq, sq), sq));
  NetBuilder out(4);
  const Signal prod = out.lin({{0.5, out.input(0)}, {-0.5, out.input(1)}, {-0.5, out.input(2)}});
  net.push(BasicRnn(out.build({prod}), 3, 1));
  return net;
}

std::vector<double> eval_at_last(const DeepRnn& net, std::size_t n, std::span<const double> x) {
  if (x.size() != net.input_size()) throw ValidationError("block input has the wrong size");
  Sequence xs(n, x.size());
  std::copy(x.begin(), x.end(), xs[0].begin());
  const Sequence ys = eval_deep_rnn(net, xs);
  const auto last = ys[n - 1];
  return {last.begin(), last.end()};
}

const Dnn& square_dnn(int n) {
  static std::mutex mu;
  static std::map<int, std::unique_ptr<Dnn>> cache;
  std::lock_guard lock(mu);
  auto& slot = cache[n];
  if (!slot) slot = std::make_unique<Dnn>(rnn_as_dnn(build_square(n, 0), static_cast<std::size_t>(n)));
  return *slot;
}

// ---------------------------------------------------------------------------
// DIAM, SUMY, ROUND

Dnn build_diam(BlockOptions opt) {
  NetBuilder nb(6);
  Gadgets g(nb, opt);
  std::vector<Signal> comps;
  const int pairs[3][2] = {{0, 1}, {1, 2}, {2, 0}};
  for (const auto& p : pairs)
    for (int c = 0; c < 2; ++c)
      comps.push_back(nb.abs(nb.lin({{1.0, nb.input(2 * p[1] + c)}, {-1.0, nb.input(2 * p[0] + c)}})));
  const Signal m01 = g.max_nonneg(comps[0], comps[1]);
  const Signal m23 = g.max_nonneg(comps[2], comps[3]);
  const Signal m45 = g.max_nonneg(comps[4], comps[5]);
  return nb.build({g.max_nonneg(g.max_nonneg(m01, m23), m45)});
}

BasicRnn build_sumy(BlockOptions opt) {
  NetBuilder nb(3);
  Gadgets g(nb, opt);
  const Signal x = nb.nonneg_input(0);
  const Signal kept = g.select(x, Comparator::greater_equal, x, nb.nonneg_input(1));
  return BasicRnn(nb.build({nb.lin({{1.0, nb.nonneg_input(2)}, {1.0, kept}})}), 2, 1);
}

namespace {

// Exact band snap: hi if lo <= x <= hi, else x.
Signal snap_to_band(Gadgets& g, const Signal& x, const Signal& lo, const Signal& hi) {
  NetBuilder& nb = g.builder();
  const Signal above_hi = g.select(hi, Comparator::greater, x, hi);
  const Signal below_lo = g.select(hi, Comparator::less, x, lo, 4);
  const Signal inband = nb.relu(nb.lin({{1.0, hi}, {-1.0, above_hi}, {-1.0, below_lo}}));
  const Signal out_hi = g.select(x, Comparator::greater, x, hi);
  const Signal out_lo = g.select(x, Comparator::less, x, lo);
  return nb.relu(nb.lin({{1.0, inband}, {1.0, out_hi}, {1.0, out_lo}}));
}

}  // namespace

BasicRnn build_round(BlockOptions opt) {
  NetBuilder nb(4);
  Gadgets g(nb, opt);
  const Signal y = snap_to_band(g, nb.nonneg_input(0), nb.input(1), nb.relu(nb.input(2)));
  return BasicRnn(nb.build({y}), 3, 1);
}

// ---------------------------------------------------------------------------
// BINARY and MARK

int theta_shift(double theta) {
  if (!(theta > 0.0 && theta <= 1.0)) throw ValidationError("theta must lie in (0, 1]");
  return 2 + static_cast<int>(std::ceil(std::log2(1.0 / theta)));
}

DeepRnn build_binary(double theta, int k, BlockOptions opt) {
  if (k < 1) throw ValidationError("BINARY needs k >= 1");
  const int shift = theta_shift(theta);
  DeepRnn net;
  {
    // running exact max M and running total T
    NetBuilder nb(4);
    Gadgets g(nb, opt);
    const Signal x = nb.nonneg_input(0);
    const Signal m = g.max_nonneg(x, nb.nonneg_input(2));
    const Signal t = nb.lin({{1.0, nb.nonneg_input(3)}, {1.0, x}});
    net.push(BasicRnn(nb.build({x, m, t}), 1, 3));
  }
  {
    // broadcast y = M/2, z = M/4, T; S = 0
    NetBuilder nb(6 + kBinWidth);
    const Signal y = nb.lin({{1.0, nb.nonneg_input(6 + kBinY)}, {0.5, nb.nonneg_input(4)}});
    const Signal z = nb.lin({{1.0, nb.nonneg_input(6 + kBinZ)}, {0.25, nb.nonneg_input(4)}});
    const Signal t = nb.lin({{1.0, nb.nonneg_input(6 + kBinT)}, {1.0, nb.nonneg_input(5)}});
    net.push(BasicRnn(nb.build({nb.nonneg_input(0), y, z, t, NetBuilder::constant(0.0)}), 6, kBinWidth),
             Wiring::init_with_last);
  }
  for (int it = 0; it < k; ++it) {
    {
      // S_i = S_{i-1} + IF(x_i; x_i >= y)
      NetBuilder nb(2 * kBinWidth);
      Gadgets g(nb, opt);
      const Signal x = nb.nonneg_input(kBinX);
      const Signal kept = g.select(x, Comparator::greater_equal, x, nb.nonneg_input(kBinY));
      const Signal s = nb.lin({{1.0, nb.nonneg_input(kBinWidth + kBinS)}, {1.0, kept}});
      net.push(BasicRnn(nb.build({x, nb.nonneg_input(kBinY), nb.nonneg_input(kBinZ), nb.nonneg_input(kBinT), s}),
                        kBinWidth, kBinWidth));
    }
    {
      // pivot update: y -= z if S < theta T else y += z; z /= 2
      NetBuilder nb(3 * kBinWidth);
      Gadgets g(nb, opt);
      const std::size_t last = kBinWidth;
      const std::size_t prev = 2 * kBinWidth;
      const Signal sb = nb.lin({{1.0, nb.nonneg_input(prev + kBinS)}, {1.0, nb.nonneg_input(last + kBinS)}});
      const Signal z = nb.nonneg_input(kBinZ);
      const Signal target = nb.lin({{theta, nb.nonneg_input(kBinT)}});
      const Signal down = g.select(z, Comparator::less, sb, target, shift);
      const Signal up = nb.relu(nb.lin({{1.0, z}, {-1.0, down}}));
      const Signal y = nb.relu(nb.lin({{1.0, nb.nonneg_input(kBinY)}, {1.0, up}, {-1.0, down}}));
      const Signal z2 = nb.lin({{0.5, z}});
      net.push(BasicRnn(nb.build({nb.nonneg_input(kBinX), y, z2, nb.nonneg_input(kBinT), sb}), 2 * kBinWidth,
                        kBinWidth),
               Wiring::init_with_last);
    }
  }
  return net;
}

namespace {

// channels of the first MARK stage
constexpr std::size_t kSnap = 0, kHi = 1, kAbove = 2, kTie = 3, kSt = 4, kSa = 5, kP = 6, kPex = 7, kT1 = 8,
                      kM1Width = 9;

}  // namespace

void append_mark_stages(DeepRnn& net, double theta, BlockOptions opt) {
  if (net.output_size() != kBinWidth) throw ValidationError("MARK stages expect BINARY channels");
  const int shift = theta_shift(theta);
  {
    NetBuilder nb(kBinWidth + kM1Width);
    Gadgets g(nb, opt);
    const Signal x = nb.nonneg_input(kBinX);
    const Signal y = nb.nonneg_input(kBinY);
    const Signal z = nb.nonneg_input(kBinZ);
    const Signal hi = nb.materialize(nb.lin({{1.0, y}, {2.0, z}}));
    const Signal lo = nb.materialize(nb.lin({{1.0, y}, {-2.0, z}}));
    const Signal snapped = nb.materialize(snap_to_band(g, x, lo, hi));
    const Signal above = nb.relu(nb.lin({{1.0, snapped}, {-1.0, hi}}));
    const Signal tie_hi = g.select(hi, Comparator::greater, hi, snapped);
    const Signal tie_lo = g.select(hi, Comparator::less, hi, snapped);
    const Signal tie = nb.relu(nb.lin({{1.0, hi}, {-1.0, tie_hi}, {-1.0, tie_lo}}));
    const auto prev = [&](std::size_t c) { return nb.nonneg_input(kBinWidth + c); };
    const Signal st = nb.lin({{1.0, prev(kSt)}, {1.0, snapped}});
    const Signal sa = nb.lin({{1.0, prev(kSa)}, {1.0, g.select(snapped, Comparator::greater, snapped, hi)}});
    const Signal p = nb.lin({{1.0, prev(kP)}, {1.0, tie}});
    net.push(BasicRnn(nb.build({snapped, hi, above, tie, st, sa, p, prev(kP), nb.nonneg_input(kBinT)}), kBinWidth,
                      kM1Width));
  }
  {
    NetBuilder nb(2 * kM1Width + kMarkWidth);
    Gadgets g(nb, opt);
    const auto cur = [&](std::size_t c) { return nb.nonneg_input(c); };
    const auto last = [&](std::size_t c) { return nb.nonneg_input(kM1Width + c); };
    const auto prev = [&](std::size_t c) { return nb.nonneg_input(2 * kM1Width + c); };
    const Signal stb = nb.lin({{1.0, prev(kMarkSnappedTotal)}, {1.0, last(kSt)}});
    const Signal sab = nb.lin({{1.0, prev(kMarkAbove)}, {1.0, last(kSa)}});
    const Signal q = nb.relu(nb.lin({{1.0, sab}, {1.0, cur(kPex)}}));
    const Signal accept = g.select(cur(kHi), Comparator::greater, nb.lin({{theta, stb}}), q, shift);
    const Signal over = nb.relu(nb.lin({{1.0, accept}, {-1.0, cur(kTie)}}));
    const Signal tie_mark = nb.relu(nb.lin({{1.0, accept}, {-1.0, over}}));
    const Signal mark = nb.lin({{1.0, cur(kAbove)}, {1.0, tie_mark}});
    net.push(BasicRnn(nb.build({mark, cur(kSnap), cur(kT1), stb, sab}), 2 * kM1Width, kMarkWidth),
             Wiring::init_with_last);
  }
}

DeepRnn build_mark(double theta, int k, BlockOptions opt) {
  DeepRnn net = build_binary(theta, k, opt);
  append_mark_stages(net, theta, opt);
  return net;
}

}  // namespace rnnafem
