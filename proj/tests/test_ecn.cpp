#include <catch2/catch_amalgamated.hpp>

#include "mecformer/ecn.hpp"
#include "mecformer/gradcheck.hpp"

using namespace mecformer;

namespace {

std::vector<double> softmax_oracle(std::vector<double> v) {
  double mx = *std::max_element(v.begin(), v.end());
  double z = 0.0;
  for (double& x : v) {
    x = std::exp(x - mx);
    z += x;
  }
  for (double& x : v) x /= z;
  return v;
}

}  // namespace

TEST_CASE("route of zero input with zero biases is zero") {
  Rng rng(3);
  EcnParams p = EcnParams::init(3, 4, 6, rng);
  Tensor x({2, 4});
  Tensor w = route(x, p);
  REQUIRE(w.shape() == std::vector<int>{3, 2});
  for (long long i = 0; i < w.size(); ++i) REQUIRE(w.data()[i] == 0.0);
}

TEST_CASE("route single patch shape") {
  Rng rng(5);
  EcnParams p = EcnParams::init(4, 3, 5, rng);
  Tensor x = Tensor::uniform({1, 3}, rng, -1.0, 1.0);
  REQUIRE(route(x, p).shape() == std::vector<int>{4, 1});
}

TEST_CASE("route matches explicit two-layer arithmetic") {
  Rng rng(7);
  int n = 3, d_f = 4, d_model = 5, tasks = 2;
  EcnParams p = EcnParams::init(tasks, d_f, d_model, rng);
  for (long long i = 0; i < p.fc1_b.size(); ++i) p.fc1_b.data()[i] = rng.uniform(-0.5, 0.5);
  for (long long i = 0; i < p.fc2_b.size(); ++i) p.fc2_b.data()[i] = rng.uniform(-0.5, 0.5);
  Tensor x = Tensor::uniform({n, d_f}, rng, -1.0, 1.0);
  Tensor w = route(x, p);
  for (int i = 0; i < n; ++i) {
    std::vector<double> hidden(d_model, 0.0);
    for (int j = 0; j < d_model; ++j) {
      double acc = p.fc1_b(j);
      for (int k = 0; k < d_f; ++k) acc += x(i, k) * p.fc1_w(k, j);
      hidden[j] = std::max(0.0, acc);
    }
    for (int t = 0; t < tasks; ++t) {
      double acc = p.fc2_b(t);
      for (int j = 0; j < d_model; ++j) acc += hidden[j] * p.fc2_w(j, t);
      REQUIRE(std::abs(w(t, i) - acc) < 1e-12);
    }
  }
}

TEST_CASE("route rejects feature-width mismatch") {
  Rng rng(11);
  EcnParams p = EcnParams::init(2, 4, 6, rng);
  Tensor x({2, 5});
  REQUIRE_THROWS_AS(route(x, p), ShapeError);
}

TEST_CASE("scaling leaves zero logits at uniform") {
  Tensor w({2, 1});
  Tensor ws = scale_weights(w, 0, 5.0);
  REQUIRE(std::abs(ws(0, 0) - 0.5) < 1e-15);
  REQUIRE(std::abs(ws(1, 0) - 0.5) < 1e-15);
}

TEST_CASE("scaling boosts the target row through the temperature") {
  Tensor w = Tensor::from({{1.0}, {0.0}});
  Tensor ws = scale_weights(w, 0, 5.0);
  double expect = std::exp(5.0) / (std::exp(5.0) + 1.0);
  REQUIRE(std::abs(ws(0, 0) - expect) < 1e-12);
  REQUIRE(std::abs(ws(1, 0) - (1.0 - expect)) < 1e-12);
}

TEST_CASE("scaling columns match the scalar softmax oracle") {
  Tensor w = Tensor::from({{0.1, 0.2}, {0.3, -0.1}, {0.0, 0.0}});
  Tensor ws = scale_weights(w, 1, 5.0);
  auto c0 = softmax_oracle({0.1, 1.5, 0.0});
  auto c1 = softmax_oracle({0.2, -0.5, 0.0});
  for (int i = 0; i < 3; ++i) {
    REQUIRE(std::abs(ws(i, 0) - c0[i]) < 1e-12);
    REQUIRE(std::abs(ws(i, 1) - c1[i]) < 1e-12);
  }
}

TEST_CASE("unexponentiated-target normalization matches the literal formula") {
  Tensor w = Tensor::from({{0.4, 1.1}, {-0.2, 0.3}, {0.9, 0.0}});
  int t = 0;
  double gamma = 5.0;
  Tensor ws = scale_weights(w, t, gamma, ScaleNorm::kUnexpTarget);
  for (int j = 0; j < 2; ++j) {
    double denom = gamma * w(t, j);
    for (int i = 0; i < 3; ++i)
      if (i != t) denom += std::exp(w(i, j));
    for (int i = 0; i < 3; ++i) {
      double numer = std::exp(i == t ? gamma * w(i, j) : w(i, j));
      REQUIRE(std::abs(ws(i, j) - numer / denom) < 1e-12);
    }
  }
}

TEST_CASE("shifting adds beta to the target mean") {
  Tensor ws = Tensor::from({{0.7, 0.5}, {0.3, 0.5}});
  Tensor wb = shift_weights(ws, 0, 5.0);
  REQUIRE(std::abs(wb(0) - 5.6) < 1e-12);
  REQUIRE(std::abs(wb(1) - 0.4) < 1e-12);
}

TEST_CASE("single-task shift is one plus beta") {
  Tensor ws = Tensor::full({1, 4}, 1.0);  // softmax over one task is 1
  Tensor wb = shift_weights(ws, 0, 5.0);
  REQUIRE(wb(0) == 6.0);
}

TEST_CASE("zero shift preserves total mass one") {
  Rng rng(13);
  Tensor w = Tensor::uniform({4, 7}, rng, -2.0, 2.0);
  Tensor ws = scale_weights(w, 2, 5.0);
  Tensor wb = shift_weights(ws, 2, 0.0);
  double total = 0.0;
  for (int i = 0; i < 4; ++i) total += wb(i);
  REQUIRE(std::abs(total - 1.0) < 1e-12);
}

TEST_CASE("consult identity expert doubles the input") {
  Rng rng(17);
  int d = 4;
  EcnParams p = EcnParams::init(1, d, d, rng);
  p.experts[0] = Tensor::identity(d).set_requires_grad();
  p.common = Tensor::zeros({d, d}).set_requires_grad();
  Tensor x = Tensor::uniform({3, d}, rng, -1.0, 1.0);
  Tensor wb({1}, {2.0});
  Tensor v = consult(x, wb, p);
  for (int i = 0; i < 3; ++i)
    for (int j = 0; j < d; ++j) REQUIRE(std::abs(v(i, j) - 2.0 * x(i, j)) < 1e-12);
}

TEST_CASE("consult with zero experts falls back to common knowledge") {
  Rng rng(19);
  EcnParams p = EcnParams::init(3, 4, 5, rng);
  for (auto& e : p.experts) e = Tensor::zeros({4, 5}).set_requires_grad();
  Tensor x = Tensor::uniform({2, 4}, rng, -1.0, 1.0);
  Tensor wb({3}, {9.0, -3.0, 0.5});
  Tensor v = consult(x, wb, p);
  Tensor expect = matmul(x, p.common);
  for (long long i = 0; i < v.size(); ++i)
    REQUIRE(std::abs(v.data()[i] - expect.data()[i]) < 1e-12);
}

TEST_CASE("consult matches dense recomputation") {
  Rng rng(23);
  int n = 3, d_f = 4, d_model = 5, tasks = 3;
  EcnParams p = EcnParams::init(tasks, d_f, d_model, rng);
  Tensor x = Tensor::uniform({n, d_f}, rng, -1.0, 1.0);
  Tensor wb = Tensor::uniform({tasks}, rng, -1.0, 2.0);
  Tensor v = consult(x, wb, p);
  for (int i = 0; i < n; ++i) {
    for (int j = 0; j < d_model; ++j) {
      double acc = 0.0;
      for (int k = 0; k < d_f; ++k) {
        double blended = p.common(k, j);
        for (int t = 0; t < tasks; ++t) blended += wb(t) * p.experts[t](k, j);
        acc += x(i, k) * blended;
      }
      REQUIRE(std::abs(v(i, j) - acc) < 1e-12);
    }
  }
}

TEST_CASE("baseline P1 maps zero to zero") {
  Rng rng(29);
  BaselineProjection p = BaselineProjection::init_p1(4, 6, rng);
  Tensor x({3, 4});
  Tensor v = project_baseline(x, p, ProjectionKind::kP1);
  for (long long i = 0; i < v.size(); ++i) REQUIRE(v.data()[i] == 0.0);
}

TEST_CASE("baseline PT with one task equals P1 given identical weights") {
  Rng rng(31);
  BaselineProjection pt = BaselineProjection::init_pt(1, 4, 6, rng);
  BaselineProjection p1;
  p1.p1_w = pt.pt_w[0];
  p1.p1_b = pt.pt_b[0];
  Tensor x = Tensor::uniform({2, 4}, rng, -1.0, 1.0);
  Tensor a = project_baseline(x, pt, ProjectionKind::kPT, 0);
  Tensor b = project_baseline(x, p1, ProjectionKind::kP1);
  for (long long i = 0; i < a.size(); ++i) REQUIRE(a.data()[i] == b.data()[i]);
}

TEST_CASE("baseline PT output ignores other tasks' weights") {
  Rng rng(37);
  BaselineProjection pt = BaselineProjection::init_pt(3, 4, 6, rng);
  Tensor x = Tensor::uniform({2, 4}, rng, -1.0, 1.0);
  Tensor before = project_baseline(x, pt, ProjectionKind::kPT, 1);
  for (long long i = 0; i < pt.pt_w[0].size(); ++i) pt.pt_w[0].data()[i] += 3.5;
  Tensor after = project_baseline(x, pt, ProjectionKind::kPT, 1);
  for (long long i = 0; i < before.size(); ++i)
    REQUIRE(before.data()[i] == after.data()[i]);
}

TEST_CASE("baseline PT requires a task index") {
  Rng rng(41);
  BaselineProjection pt = BaselineProjection::init_pt(2, 4, 6, rng);
  Tensor x({1, 4});
  REQUIRE_THROWS_AS(project_baseline(x, pt, ProjectionKind::kPT), ContractError);
}

TEST_CASE("scaled weights are column-stochastic") {
  Rng rng(43);
  for (int trial = 0; trial < 50; ++trial) {
    int tasks = rng.randint(1, 5), n = rng.randint(1, 8);
    Tensor w = Tensor::uniform({tasks, n}, rng, -3.0, 3.0);
    int t = rng.randint(0, tasks - 1);
    Tensor ws = scale_weights(w, t, 5.0);
    for (int j = 0; j < n; ++j) {
      double acc = 0.0;
      for (int i = 0; i < tasks; ++i) {
        acc += ws(i, j);
        REQUIRE(ws(i, j) >= 0.0);
        REQUIRE(ws(i, j) <= 1.0);
      }
      REQUIRE(std::abs(acc - 1.0) < 1e-9);
    }
  }
}

TEST_CASE("beta five makes the target weight dominant") {
  Rng rng(47);
  for (int trial = 0; trial < 200; ++trial) {
    int tasks = rng.randint(2, 5), n = rng.randint(1, 8);
    Tensor w = Tensor::uniform({tasks, n}, rng, -3.0, 3.0);
    int t = rng.randint(0, tasks - 1);
    Tensor wb = shift_weights(scale_weights(w, t, 5.0), t, 5.0);
    int argmax = 0;
    for (int i = 1; i < tasks; ++i)
      if (wb(i) > wb(argmax)) argmax = i;
    REQUIRE(argmax == t);
    REQUIRE(wb(t) - 5.0 >= -1e-12);
    REQUIRE(wb(t) - 5.0 <= 1.0 + 1e-12);
    for (int i = 0; i < tasks; ++i)
      if (i != t) {
        REQUIRE(wb(i) >= -1e-12);
        REQUIRE(wb(i) <= 1.0 + 1e-12);
      }
  }
}

TEST_CASE("raising gamma never lowers the target weight when its logit is positive") {
  Rng rng(53);
  for (int trial = 0; trial < 100; ++trial) {
    int tasks = rng.randint(2, 4), n = rng.randint(1, 5);
    Tensor w = Tensor::uniform({tasks, n}, rng, -2.0, 2.0);
    int t = rng.randint(0, tasks - 1);
    for (int j = 0; j < n; ++j) w.ref(t, j) = rng.uniform(0.05, 2.0);  // positive target
    double g1 = rng.uniform(1.0, 4.0);
    double g2 = g1 + rng.uniform(0.1, 3.0);
    Tensor a = scale_weights(w, t, g1);
    Tensor b = scale_weights(w, t, g2);
    for (int j = 0; j < n; ++j) REQUIRE(b(t, j) >= a(t, j) - 1e-12);
  }
}

TEST_CASE("full projection is permutation-equivariant over patches") {
  Rng rng(59);
  int n = 6, d_f = 4, d_model = 5;
  EcnParams p = EcnParams::init(3, d_f, d_model, rng);
  Tensor x = Tensor::uniform({n, d_f}, rng, -1.0, 1.0);
  std::vector<int> perm = {2, 5, 0, 3, 1, 4};
  Tensor xp({n, d_f});
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d_f; ++j) xp.ref(i, j) = x(perm[i], j);
  Tensor v = ecn_project(x, 1, p);
  Tensor vp = ecn_project(xp, 1, p);
  for (int i = 0; i < n; ++i)
    for (int j = 0; j < d_model; ++j)
      REQUIRE(std::abs(vp(i, j) - v(perm[i], j)) < 1e-12);
}

TEST_CASE("gradients flow through route, scale, shift, consult") {
  Rng rng(61), wrng(62);
  int n = 3, d_f = 4, d_model = 5, tasks = 2;
  EcnParams p = EcnParams::init(tasks, d_f, d_model, rng);
  Tensor x = Tensor::uniform({n, d_f}, rng, -1.0, 1.0).set_requires_grad();
  Tensor wsum = Tensor::uniform({n, d_model}, wrng, 0.5, 1.5);
  auto loss = [&] { return sum(mul(ecn_project(x, 1, p), wsum)); };
  std::vector<std::pair<std::string, Tensor>> groups = {
      {"x", x},           {"fc1_w", p.fc1_w},   {"fc1_b", p.fc1_b},
      {"fc2_w", p.fc2_w}, {"fc2_b", p.fc2_b},   {"common", p.common},
      {"tau0", p.experts[0]}, {"tau1", p.experts[1]},
  };
  auto reports = finite_difference_check(loss, groups);
  for (const auto& r : reports) {
    INFO(r.group << " worst rel " << r.worst_rel);
    CHECK(r.pass);
  }
}

TEST_CASE("single-task projection has closed form") {
  Rng rng(67);
  int d_f = 5, d_model = 4;
  EcnParams p = EcnParams::init(1, d_f, d_model, rng);
  Tensor x = Tensor::uniform({7, d_f}, rng, -1.0, 1.0);
  Tensor got = ecn_project(x, 0, p);
  NoGradGuard ng;
  Tensor blended({d_f, d_model});
  for (long long i = 0; i < blended.size(); ++i)
    blended.data()[i] = p.common.data()[i] + (1.0 + p.beta) * p.experts[0].data()[i];
  Tensor expect = matmul(x, blended);
  for (long long i = 0; i < got.size(); ++i)
    REQUIRE(std::abs(got.data()[i] - expect.data()[i]) < 1e-12);
}
