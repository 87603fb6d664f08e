#include <doctest.h>

#include <algorithm>
#include <cstring>
#include <random>
#include <sstream>
#include <vector>

#include "rnnafem/errors.hpp"
#include "rnnafem/net_builder.hpp"
#include "rnnafem/network.hpp"

using namespace rnnafem;

namespace {

BasicRnn summation() { return BasicRnn(Dnn::from_dense({Matrix(1, 2, {1.0, 1.0})}), 1, 1); }

// y_i = (x_i + y_{i-1}) / 2
BasicRnn halving() { return BasicRnn(Dnn::from_dense({Matrix(1, 2, {0.5, 0.5})}), 1, 1); }

Matrix random_matrix(std::size_t r, std::size_t c, std::mt19937_64& gen) {
  std::uniform_real_distribution<double> w(-1.0, 1.0);
  Matrix m(r, c);
  for (double& v : m.data) v = w(gen);
  return m;
}

// Random basic RNN with input s, output s_out and one hidden layer of width h.
BasicRnn random_rnn(std::size_t s, std::size_t s_out, std::size_t h, std::mt19937_64& gen, bool bias) {
  const std::size_t extra = bias ? 1 : 0;
  return BasicRnn(Dnn::from_dense({random_matrix(h, s + s_out + extra, gen), random_matrix(s_out, h + extra, gen)}, bias),
                  s, s_out);
}

Sequence random_sequence(std::size_t len, std::size_t dim, std::mt19937_64& gen) {
  std::normal_distribution<double> x(0.0, 1.0);
  Sequence s(len, dim);
  for (double& v : s.data) v = x(gen);
  return s;
}

bool bit_equal(std::span<const double> a, std::span<const double> b) {
  return a.size() == b.size() && std::memcmp(a.data(), b.data(), a.size() * sizeof(double)) == 0;
}

}  // namespace

TEST_CASE("elementary networks") {
  const std::vector<double> x = {-3.5};
  CHECK(identity_dnn(1)(x)[0] == -3.5);
  const auto y = linear_dnn(Matrix(2, 2, {2, 0, 0, 3}))(std::vector<double>{1, 1});
  CHECK(y == std::vector<double>{2, 3});
  CHECK(summation().dnn(std::vector<double>{2, 5})[0] == 7.0);
  CHECK_THROWS_AS(identity_dnn(2)(x), ValidationError);
}

TEST_CASE("basic RNN recurrences") {
  const double xs[] = {1, 2, 3, 4};
  CHECK(eval_basic_rnn(summation(), Sequence::from_scalars(xs))[3][0] == 10.0);
  const Sequence zeros(5, 1);
  for (double v : eval_basic_rnn(summation(), zeros).data) CHECK(v == 0.0);
  const double start[] = {8, 0, 0};
  CHECK(eval_basic_rnn(halving(), Sequence::from_scalars(start))[2][0] == 1.0);
  CHECK_THROWS_AS(eval_basic_rnn(summation(), Sequence(3, 2)), ValidationError);
}

TEST_CASE("deep RNN wiring") {
  const double xs[] = {1, 2, 3};
  const Sequence in = Sequence::from_scalars(xs);
  CHECK(eval_deep_rnn(single_stage(summation()), in).data == eval_basic_rnn(summation(), in).data);

  DeepRnn two = single_stage(summation());
  // stage 2 reads (y_i, y_n [i == 1]) and halves the running value
  two.push(BasicRnn(Dnn::from_dense({Matrix(1, 3, {0.0, 0.5, 0.5})}), 2, 1), Wiring::init_with_last);
  const Sequence out = eval_deep_rnn(two, in);
  CHECK(out.data == std::vector<double>{3, 1.5, 0.75});

  std::mt19937_64 gen(1);
  const Sequence r = random_sequence(7, 3, gen);
  DeepRnn ids;
  for (int i = 0; i < 3; ++i) ids.push(BasicRnn(embed_inputs(identity_dnn(3), 6, std::vector<std::int64_t>{0, 1, 2}), 3, 3));
  CHECK(eval_deep_rnn(ids, r).data == r.data);
}

TEST_CASE("combinators are exact") {
  const Dnn both = parallel(identity_dnn(1), identity_dnn(1));
  CHECK(both(std::vector<double>{1, 2}) == std::vector<double>{1, 2});

  std::mt19937_64 gen(2);
  const Dnn a = Dnn::from_dense({random_matrix(4, 2, gen), random_matrix(3, 4, gen)});
  const Dnn b = Dnn::from_dense({random_matrix(5, 3, gen), random_matrix(6, 5, gen), random_matrix(2, 6, gen)});
  const Dnn ab = parallel(a, b);
  CHECK(ab.depth() <= std::max(a.depth(), b.depth()) + 2);
  const Dnn ba = compose(a, b);
  std::normal_distribution<double> x(0.0, 1.0);
  for (int t = 0; t < 50; ++t) {
    const std::vector<double> u = {x(gen), x(gen)}, v = {x(gen), x(gen), x(gen)};
    std::vector<double> uv = u;
    uv.insert(uv.end(), v.begin(), v.end());
    const auto both_out = ab(uv);
    const auto au = a(u), bv = b(v);
    CHECK(std::equal(au.begin(), au.end(), both_out.begin()));
    CHECK(std::equal(bv.begin(), bv.end(), both_out.begin() + 3));
    CHECK(ba(v) == a(b(v)));
    CHECK(compose(a, identity_dnn(2))(u) == a(u));
    CHECK(prune(ab)(uv) == both_out);
  }
}

TEST_CASE("pass_through appends an untouched channel") {
  std::mt19937_64 gen(4);
  DeepRnn net = single_stage(random_rnn(2, 2, 5, gen, false));
  net.push(random_rnn(2, 1, 4, gen, true));
  const DeepRnn wide = pass_through(net);
  CHECK(wide.input_size() == 3);
  CHECK(wide.output_size() == 2);
  const Sequence in = random_sequence(6, 2, gen);
  Sequence in3(6, 3);
  for (std::size_t i = 0; i < 6; ++i) {
    in3[i][0] = in[i][0];
    in3[i][1] = in[i][1];
    in3[i][2] = 0.25 * static_cast<double>(i) - 1.0;
  }
  const Sequence base = eval_deep_rnn(net, in), out = eval_deep_rnn(wide, in3);
  for (std::size_t i = 0; i < 6; ++i) {
    CHECK(out[i][0] == base[i][0]);
    CHECK(out[i][1] == in3[i][2]);
  }
}

TEST_CASE("unrolling reproduces the recurrence bit for bit") {
  const double xs[] = {1, 2, 3, 4};
  const Dnn u = unroll(summation(), 4);
  CHECK(u(xs)[3] == 10.0);

  std::mt19937_64 gen(7);
  for (bool bias : {false, true}) {
    const BasicRnn net = random_rnn(3, 2, 6, gen, bias);
    for (std::size_t n : {1u, 3u, 8u}) {
      const Sequence in = random_sequence(n, 3, gen);
      const Sequence seq = eval_basic_rnn(net, in);
      CHECK(bit_equal(unroll(net, n)(in.data), seq.data));
    }
  }
}

TEST_CASE("unrolled networks keep their independent weights") {
  std::mt19937_64 gen(8);
  const BasicRnn net = random_rnn(2, 2, 5, gen, true);
  const WeightBudget rnn_budget = net.dnn.weight_budget();
  std::size_t prev_total = 0;
  for (std::size_t n : {2u, 4u, 8u, 16u}) {
    const WeightBudget b = unroll(net, n).weight_budget();
    CHECK(b.independent_weights == rnn_budget.independent_weights);
    CHECK(b.independent_weights <= b.total_weights);
    CHECK(b.total_weights > prev_total);
    prev_total = b.total_weights;
  }
}

TEST_CASE("batch evaluation matches sequential evaluation") {
  std::mt19937_64 gen(9);
  DeepRnn net = single_stage(random_rnn(2, 3, 6, gen, true));
  net.push(random_rnn(3, 2, 4, gen, false), Wiring::plain);
  std::vector<Sequence> batch;
  for (std::size_t len : {1u, 5u, 5u, 9u}) batch.push_back(random_sequence(len, 2, gen));
  const auto out = eval_deep_rnn_batch(net, batch);
  for (std::size_t k = 0; k < batch.size(); ++k) CHECK(bit_equal(out[k].data, eval_deep_rnn(net, batch[k]).data));
}

TEST_CASE("network text format round-trips bit for bit") {
  std::mt19937_64 gen(10);
  DeepRnn net = single_stage(random_rnn(2, 2, 3, gen, true));
  net.push(BasicRnn(Dnn::from_dense({random_matrix(1, 5, gen)}), 4, 1), Wiring::init_with_last);
  std::stringstream io;
  write_network(io, net);
  const DeepRnn back = read_network(io);
  const Sequence in = random_sequence(5, 2, gen);
  CHECK(bit_equal(eval_deep_rnn(back, in).data, eval_deep_rnn(net, in).data));

  std::istringstream bad("stages x");
  CHECK_THROWS_AS(read_network(bad), ValidationError);
}

TEST_CASE("NetBuilder carries signals across layers exactly") {
  NetBuilder nb(2);
  const Signal a = nb.input(0), b = nb.input(1);
  const Signal d = nb.abs(nb.sub(a, b));
  const Signal deep = nb.relu(nb.relu(nb.relu(d)));
  const Dnn net = nb.build({nb.add(deep, a), b});
  for (double x : {-2.5, 0.0, 1.25})
    for (double y : {-1.0, 3.0}) {
      const auto out = net(std::vector<double>{x, y});
      CHECK(out[0] == std::abs(x - y) + x);
      CHECK(out[1] == y);
    }
}
