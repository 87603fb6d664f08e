#pragma once

#include <cstddef>
#include <span>
#include <vector>

#include "rnnafem/mesh.hpp"
#include "rnnafem/net_builder.hpp"
#include "rnnafem/network.hpp"

namespace rnnafem {

enum class Comparator { less, less_equal, greater, greater_equal };

enum class IfForm {
  recurrent,  // n doubling steps, one ReLU layer each
  one_layer,  // min(a, 2^n relu(d)) with a single large weight
};

struct BlockOptions {
  int n_min = 52;                     // round-off exponent of the float model
  IfForm if_form = IfForm::recurrent;
};

/// Signal-level gadgets shared by the block constructions.
class Gadgets {
 public:
  explicit Gadgets(NetBuilder& b, BlockOptions opt = {}) : b_(b), opt_(opt) {}

  NetBuilder& builder() { return b_; }
  const BlockOptions& options() const { return opt_; }

  /// a if d > 0 else 0 for nonnegative a; exact when 2^(n_min + shift) d >= a
  /// whenever d > 0.
  Signal hat(const Signal& a, const Signal& d, int shift = 2);
  /// IF(a; b cmp c) for a signed or nonnegative payload; exactly a or 0.
  Signal select(const Signal& a, Comparator cmp, const Signal& b, const Signal& c, int shift = 2);
  /// max(a, b) of nonnegative values, returned exactly.
  Signal max_nonneg(const Signal& a, const Signal& b);
  /// v * 2^k if cond_d > 0 else v, exact for signed v (cond_d is the IF test form).
  Signal scale_if(const Signal& v, const Signal& cond_d, int k, int shift = 2);

  /// x * 2^k through a chain of factor-4 layers.
  Signal pow2_scale(const Signal& x, int k);
  /// x^2 through the unscaled SQUARE network after scaling x by 2^-scale_exp.
  Signal square(const Signal& x, int n, int scale_exp = 0);
  /// x*y = (sq(x+y) - sq(x) - sq(y)) / 2 with the given window exponent.
  Signal multiply(const Signal& x, const Signal& y, int n, int scale_exp);

 private:
  NetBuilder& b_;
  BlockOptions opt_;
};

/// Literal doubling recurrence; input sequence (a, b, c) at position 1,
/// zeros afterwards, length n_steps; IF(a; b cmp c) at the last position.
DeepRnn build_if(Comparator cmp, int n_steps);
double eval_if_rnn(const DeepRnn& net, int n_steps, double a, double b, double c);

/// SQUARE for |x| <= 2^scale_exponent; scale_exponent must be 0 or n. Input
/// (x, 0, ..., 0) of length n, output channel 0 at position n.
DeepRnn build_square(int n, int scale_exponent = 0);
/// MULTIPLY on inputs (x, y) in [-2^(n-1), 2^(n-1)]^2.
DeepRnn build_multiply(int n);
/// Evaluates a block DeepRnn on (x, 0, ..., 0) of length n and returns the last output.
std::vector<double> eval_at_last(const DeepRnn& net, std::size_t n, std::span<const double> x);
/// Cached rnn_as_dnn(build_square(n, 0), n).
const Dnn& square_dnn(int n);

/// diam_inf of the triangle (x0, y0, x1, y1, x2, y2).
Dnn build_diam(BlockOptions opt = {});

/// z_i = z_{i-1} + IF(x_i; x_i >= y); input (x, y), output z.
BasicRnn build_sumy(BlockOptions opt = {});
/// y_i = hi if lo <= x_i <= hi else x_i; input (x, lo, hi).
BasicRnn build_round(BlockOptions opt = {});

/// Channels of the BINARY output.
inline constexpr std::size_t kBinX = 0, kBinY = 1, kBinZ = 2, kBinT = 3, kBinS = 4, kBinWidth = 5;
DeepRnn build_binary(double theta, int k, BlockOptions opt = {});

/// Channels of the MARK output.
inline constexpr std::size_t kMarkY = 0, kMarkSnapped = 1, kMarkT = 2, kMarkSnappedTotal = 3, kMarkAbove = 4,
                             kMarkWidth = 5;
DeepRnn build_mark(double theta, int k, BlockOptions opt = {});
/// Appends the two MARK stages to a network whose output has BINARY channels.
void append_mark_stages(DeepRnn& net, double theta, BlockOptions opt = {});

/// IF payload shift that keeps threshold comparisons against theta*T exact.
int theta_shift(double theta);

/// Per-element record layout of the estimator input sequence.
inline constexpr std::size_t kEstimatorInputSize = 27;
inline constexpr std::size_t kInVertices = 0;    // x0 y0 x1 y1 x2 y2
inline constexpr std::size_t kInOpposite = 6;    // far vertex of the neighbour across edge j
inline constexpr std::size_t kInCoeffSelf = 12;  // U = c0 + c1 x + c2 y on the element
inline constexpr std::size_t kInCoeffNeighbor = 15;  // 3 coefficients per edge neighbour
inline constexpr std::size_t kInSource = 24;     // f, 0, 0

/// Encodes mesh, nodal P1 values and elementwise constant f. Boundary edges
/// repeat the element's own vertex and coefficients, so their jump is zero.
Sequence encode_estimator_inputs(const Mesh& mesh, std::span<const double> nodal, std::span<const double> source);

/// diam_inf^2 f^2 for inputs with |f|, diam_inf <= 2^ceil(n/8).
DeepRnn build_vol(int n, BlockOptions opt = {});
/// diam_inf * sum_e |e| |[grad U]|^2 / |dT| for jumps and diam_inf <= 2^ceil(n/8).
DeepRnn build_jump(int n, BlockOptions opt = {});
/// Squared indicator diam_inf^4 f^2 + diam_inf^2 sum_e |e| |[grad U]|^2 / |dT|,
/// clipped at zero. Requires diam_inf < 256 and |f|, |[grad U]| <= 2^ceil(n/2).
BasicRnn build_estimator(int n, BlockOptions opt = {});
/// Accuracy parameter for an estimator over `elements` entries at budget eps.
int estimator_accuracy(std::size_t elements, double eps);

}  // namespace rnnafem
