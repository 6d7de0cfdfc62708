#include "itsr/selfcheck.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>

#include "itsr/errors.hpp"
#include "itsr/heads.hpp"
#include "itsr/metrics.hpp"
#include "itsr/model.hpp"
#include "itsr/ops.hpp"
#include "itsr/retrieval.hpp"

namespace itsr::inline ITSR_ABI {

namespace {

constexpr bool kDouble = sizeof(Real) == 8;

Tensor random_input(Shape shape, Rng& rng, double lo = -1.0, double hi = 1.0) {
  std::vector<Real> v(shape_numel(shape));
  for (auto& x : v) x = static_cast<Real>(rng.uniform(lo, hi));
  Tensor t(std::move(shape), std::move(v));
  t.set_requires_grad(true);
  return t;
}

// Weighted sum so that every output element carries a distinct upstream
// gradient.
Tensor weighted(const Tensor& out, std::uint64_t seed) {
  Rng rng = Rng::stream(seed, "selfcheck-weights");
  std::vector<Real> w(out.numel());
  for (auto& x : w) x = static_cast<Real>(rng.uniform(-1.0, 1.0));
  return sum(mul(out, Tensor(out.shape(), std::move(w))));
}

struct GradCase {
  std::string name;
  std::vector<Tensor> inputs;
  std::function<Tensor()> loss;
};

CheckOutcome run_case(const GradCase& c, std::string_view fault_op) {
  CheckOutcome outcome{"gradient", c.name, false, 0.0, {}};
  try {
    for (auto t : c.inputs) t.zero_grad();
    {
      Tape tape;
      if (!fault_op.empty()) tape.inject_gradient_fault(std::string(fault_op));
      TapeScope scope(tape);
      tape.backward(c.loss());
    }
    const double h = kDouble ? 1e-6 : 1e-2;
    NoGradScope no_grad;
    double worst = 0.0;
    for (std::size_t k = 0; k < c.inputs.size(); ++k) {
      Tensor t = c.inputs[k];
      std::vector<double> analytic(t.numel(), 0.0);
      for (std::size_t i = 0; i < t.grad().size(); ++i) analytic[i] = t.grad()[i];
      double diff = 0, na = 0, nn = 0;
      for (std::size_t i = 0; i < t.numel(); ++i) {
        const Real old = t[i];
        t[i] = static_cast<Real>(old + h);
        const double up = c.loss().item();
        t[i] = static_cast<Real>(old - h);
        const double down = c.loss().item();
        t[i] = old;
        const double numeric = (up - down) / (2 * h);
        diff += (numeric - analytic[i]) * (numeric - analytic[i]);
        na += analytic[i] * analytic[i];
        nn += numeric * numeric;
      }
      const double scale = std::sqrt(std::max(na, nn));
      const double rel = scale > 1e-12 ? std::sqrt(diff) / scale : 0.0;
      if (rel > worst) {
        worst = rel;
        outcome.detail = "input " + std::to_string(k);
      }
    }
    outcome.error = worst;
    outcome.passed = worst <= gradient_tolerance();
  } catch (const std::exception& e) {
    outcome.detail = e.what();
  }
  return outcome;
}

std::vector<GradCase> gradient_cases() {
  Rng rng(20240611);
  std::vector<GradCase> cases;
  auto unary = [&](std::string name, Shape shape, std::function<Tensor(const Tensor&)> f,
                   double lo = -1.0, double hi = 1.0) {
    Tensor x = random_input(shape, rng, lo, hi);
    const auto seed = cases.size();
    cases.push_back({std::move(name), {x}, [x, f, seed] { return weighted(f(x), seed); }});
  };
  auto binary = [&](std::string name, Shape sa, Shape sb,
                    std::function<Tensor(const Tensor&, const Tensor&)> f) {
    Tensor a = random_input(sa, rng), b = random_input(sb, rng);
    const auto seed = cases.size();
    cases.push_back({std::move(name), {a, b}, [a, b, f, seed] { return weighted(f(a, b), seed); }});
  };

  binary("matmul", {3, 4}, {4, 2}, matmul);
  unary("transpose", {3, 4}, transpose);
  binary("add", {3, 4}, {3, 4}, add);
  binary("sub", {3, 4}, {3, 4}, sub);
  binary("mul", {3, 4}, {3, 4}, mul);
  binary("add_bias", {3, 4}, {4}, add_bias);
  unary("scale", {2, 3}, [](const Tensor& x) { return scale(x, Real(-2.5)); });
  binary("mul_scalar", {2, 3}, {1}, mul_scalar);
  unary("exp", {2, 3}, [](const Tensor& x) { return exp(x); });
  unary("tanh", {2, 3}, [](const Tensor& x) { return tanh(x); });
  unary("relu", {2, 5}, [](const Tensor& x) { return relu(x); }, 0.1, 1.0);
  unary("relu", {2, 5}, [](const Tensor& x) { return relu(x); }, -1.0, -0.1);
  unary("dropout", {4, 5}, [](const Tensor& x) {
    Rng r(3);
    return dropout(x, 0.3, r, Mode::Train);
  });
  unary("sum", {2, 3}, [](const Tensor& x) { return sum(x); });
  unary("mean", {2, 3}, [](const Tensor& x) { return mean(x); });
  unary("softmax_rows", {3, 4}, softmax_rows, -2.0, 2.0);
  {
    Tensor x = random_input({3, 5}, rng, -2.0, 2.0);
    Tensor g = random_input({5}, rng), b = random_input({5}, rng);
    const auto seed = cases.size();
    cases.push_back({"layer_norm", {x, g, b}, [=] { return weighted(layer_norm(x, g, b), seed); }});
  }
  {
    Tensor x = random_input({6, 3}, rng, -2.0, 2.0);
    auto bn = std::make_shared<BatchNorm>(3);
    bn->gamma.set_requires_grad(true);
    bn->beta.set_requires_grad(true);
    for (std::size_t i = 0; i < 3; ++i) {
      bn->gamma[i] = static_cast<Real>(rng.uniform(0.5, 1.5));
      bn->beta[i] = static_cast<Real>(rng.uniform(-0.5, 0.5));
    }
    const auto seed = cases.size();
    cases.push_back({"batch_norm", {x, bn->gamma, bn->beta},
                     [=] { return weighted(batch_norm(x, *bn, Mode::Train), seed); }});
  }
  {
    Tensor x = random_input({2 * 5, 3}, rng), w = random_input({4, 3, 3}, rng);
    const auto seed = cases.size();
    cases.push_back({"conv1d_tokens", {x, w}, [=] { return weighted(conv1d_tokens(x, w, 1, 5), seed); }});
  }
  binary("concat_cols", {3, 2}, {3, 4}, concat_cols);
  {
    Tensor a = random_input({4}, rng), b = random_input({4}, rng);
    const auto seed = cases.size();
    cases.push_back({"stack_rows", {a, b}, [=] {
                       const std::vector<Tensor> rows{a, b};
                       return weighted(stack_rows(rows), seed);
                     }});
  }
  unary("mean_pool_tokens", {6, 3}, [](const Tensor& x) { return mean_pool_tokens(x, 3); });
  unary("segment_mean", {6, 3}, [](const Tensor& x) {
    const std::vector<std::size_t> offsets{0, 1, 4, 6};
    return segment_mean(x, offsets);
  });
  unary("gather_rows", {5, 3}, [](const Tensor& x) {
    const std::vector<std::size_t> idx{4, 0, 4, 2};
    return gather_rows(x, idx);
  });
  unary("reshape", {2, 6}, [](const Tensor& x) { return reshape(x, {3, 4}); });
  unary("l2_normalize_rows", {3, 4}, l2_normalize_rows);
  {
    Tensor s = random_input({4, 4}, rng, -2.0, 2.0);
    cases.push_back({"diagonal_cross_entropy", {s}, [=] { return diagonal_cross_entropy(s); }});
  }
  {
    Tensor q = random_input({3, 4}, rng), k = random_input({5, 4}, rng), v = random_input({5, 4}, rng);
    const auto seed = cases.size();
    cases.push_back({"cross_attention", {q, k, v}, [=] { return weighted(cross_attention(q, k, v), seed); }});
  }
  {
    Tensor q = random_input({2 * 3, 4}, rng), k = random_input({2 * 5, 4}, rng),
           v = random_input({2 * 5, 4}, rng);
    const auto seed = cases.size();
    cases.push_back({"block_cross_attention", {q, k, v},
                     [=] { return weighted(block_cross_attention(q, k, v, 2, 3, 5), seed); }});
  }
  {
    Tensor fx = random_input({4, 6}, rng), fy = random_input({4, 6}, rng);
    Tensor kappa = random_input({1}, rng, 0.0, 1.0);
    cases.push_back({"contrastive_loss", {fx, fy, kappa},
                     [=] { return contrastive_loss(fx, fy, kappa).total; }});
  }
  for (const char* strategy : {"gff-sub", "gff-concat", "tff"}) {
    ModelConfig mc;
    mc.fusion.strategy = parse_fusion_strategy(strategy);
    mc.fusion.embed_dim = 8;
    mc.fusion.heads = 2;
    mc.fusion.stages = 2;
    mc.head_hidden = 8;
    mc.head_output = 6;
    mc.text_vocab = 16;
    mc.seed = 4;
    auto model = std::make_shared<Model>(mc);
    auto samples = std::make_shared<std::vector<BitemporalSample>>(3);
    for (std::size_t i = 0; i < samples->size(); ++i) {
      auto& p = (*samples)[i];
      p.id = "s" + std::to_string(i);
      p.emb_t1 = random_input({4, 8}, rng).set_requires_grad(false);
      p.emb_t2 = random_input({4, 8}, rng).set_requires_grad(false);
      p.cls_t1 = random_input({8}, rng).set_requires_grad(false);
      p.cls_t2 = random_input({8}, rng).set_requires_grad(false);
    }
    std::vector<Tensor> params;
    for (auto& p : model->trainable()) params.push_back(p.tensor);
    cases.push_back({std::string("model_") + strategy, params, [model, samples] {
                       std::vector<const BitemporalSample*> pairs;
                       for (const auto& p : *samples) pairs.push_back(&p);
                       const std::vector<std::vector<std::string>> text{
                           {"a", "red", "block"}, {"nothing", "changed"}, {"a", "blue", "one"}};
                       Rng r(8);
                       return contrastive_loss(model->encode_images(pairs, r, Mode::Train),
                                               model->encode_texts(text), model->kappa())
                           .total;
                     }});
  }
  return cases;
}

CheckOutcome check(std::string suite, std::string name, bool ok, double error = 0.0,
                   std::string detail = {}) {
  return {std::move(suite), std::move(name), ok, error, std::move(detail)};
}

}  // namespace

double gradient_tolerance() { return kDouble ? 1e-5 : 5e-2; }

std::vector<CheckOutcome> gradient_checks(std::string_view fault_op) {
  std::vector<CheckOutcome> out;
  for (const auto& c : gradient_cases()) out.push_back(run_case(c, fault_op));
  return out;
}

std::vector<CheckOutcome> retrieval_checks() {
  std::vector<CheckOutcome> out;
  Rng rng(99);
  const std::size_t n = 300, dim = 16;
  std::vector<Real> rows(n * dim);
  for (auto& x : rows) x = static_cast<Real>(rng.uniform(-1.0, 1.0));
  // Duplicate some rows so equal scores exercise the id tie-break.
  for (std::size_t i = 0; i < 30; ++i) {
    const auto src = rng.below(n), dst = rng.below(n);
    std::copy_n(rows.begin() + static_cast<std::ptrdiff_t>(src * dim), dim,
                rows.begin() + static_cast<std::ptrdiff_t>(dst * dim));
  }
  std::vector<std::string> ids(n);
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), 0);
  shuffle(perm.begin(), perm.end(), rng);
  for (std::size_t i = 0; i < n; ++i) ids[i] = "item" + std::to_string(10000 + perm[i]);
  const auto archive = RetrievalArchive::from_rows(ids, Tensor({n, dim}, rows), {},
                                                   std::vector<bool>(n, true));

  std::size_t mismatches = 0, total = 0;
  for (std::size_t qi = 0; qi < 40; ++qi) {
    std::vector<Real> q(dim);
    if (qi % 4 == 0) {
      const auto src = rng.below(n);
      std::copy_n(rows.begin() + static_cast<std::ptrdiff_t>(src * dim), dim, q.begin());
    } else {
      for (auto& x : q) x = static_cast<Real>(rng.uniform(-1.0, 1.0));
    }
    double qn = 0;
    for (Real x : q) qn += static_cast<double>(x) * x;
    qn = std::sqrt(qn);
    std::vector<std::pair<double, std::string>> oracle;
    for (std::size_t r = 0; r < n; ++r) {
      double dot = 0, rn = 0;
      for (std::size_t j = 0; j < dim; ++j) {
        dot += static_cast<double>(rows[r * dim + j]) * static_cast<double>(q[j]);
        rn += static_cast<double>(rows[r * dim + j]) * static_cast<double>(rows[r * dim + j]);
      }
      oracle.emplace_back(dot / (std::sqrt(rn) * qn), ids[r]);
    }
    std::sort(oracle.begin(), oracle.end(), [](const auto& a, const auto& b) {
      return a.first != b.first ? a.first > b.first : a.second < b.second;
    });
    for (std::size_t k : {1, 5, 50}) {
      ++total;
      const auto hits = query_topk(archive, q, k);
      bool same = hits.size() == k;
      for (std::size_t i = 0; same && i < k; ++i) same = hits[i].id == oracle[i].second;
      if (!same) ++mismatches;
    }
  }
  out.push_back(check("retrieval", "topk_vs_full_sort", mismatches == 0,
                      static_cast<double>(mismatches),
                      std::to_string(mismatches) + "/" + std::to_string(total) + " differ"));
  return out;
}

std::vector<CheckOutcome> metric_checks() {
  struct Fixture {
    std::string name;
    double value;
    double expected;
  };
  auto t = [](const char* s) { return tokenize(s); };
  const std::vector<Fixture> fixtures = {
      {"bleu1_clipped", bleu(t("a b c"), {t("a b d")}, 1), 2.0 / 3.0},
      {"bleu4_identical", bleu(t("the red block appears"), {t("the red block appears")}, 4), 1.0},
      {"bleu1_disjoint", bleu(t("x y"), {t("a b")}, 1), 0.0},
      {"rouge_l_transposition", rouge_l(t("a b c d"), {t("a c b d")}), 0.75},
      {"rouge_l_identical", rouge_l(t("a b c"), {t("a b c")}), 1.0},
      {"meteor_two_words", meteor(t("the cat"), {t("the cat")}), 0.9375},
      {"meteor_one_word", meteor(t("cat"), {t("cat")}), 0.5},
      {"meteor_disjoint", meteor(t("a b"), {t("c d")}), 0.0},
  };
  std::vector<CheckOutcome> out;
  for (const auto& f : fixtures) {
    const double err = std::abs(f.value - f.expected);
    std::ostringstream detail;
    detail.precision(12);
    detail << "got " << f.value << ", want " << f.expected;
    out.push_back(check("metrics", f.name, err <= 1e-9, err, detail.str()));
  }
  return out;
}

}  // namespace itsr
