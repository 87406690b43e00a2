#include "cte/ops.hpp"

#include <algorithm>
#include <cmath>
#include <memory>
#include <numbers>
#include <string>

#include "cte/error.hpp"

namespace cte::num {

namespace {

using Index = Eigen::Index;
using StridedMap = Eigen::Map<RowMatrix, 0, Eigen::OuterStride<>>;
using ConstStridedMap = Eigen::Map<const RowMatrix, 0, Eigen::OuterStride<>>;

MatrixMap as_matrix(std::span<double> data, std::size_t rows, std::size_t cols) {
  return {data.data(), static_cast<Index>(rows), static_cast<Index>(cols)};
}

ConstMatrixMap as_matrix(std::span<const double> data, std::size_t rows, std::size_t cols) {
  return {data.data(), static_cast<Index>(rows), static_cast<Index>(cols)};
}

void require_same_tape(const Var& a, const Var& b) {
  if (&a.tape() != &b.tape()) throw ContractError("operands recorded on different tapes");
}

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_string(a.shape()) + " vs " +
                         shape_string(b.shape()));
  }
}

Shape with_last(Shape shape, std::size_t last) {
  shape.back() = last;
  return shape;
}

}  // namespace

Var matmul(Var a, Var b) {
  require_same_tape(a, b);
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2) throw DimensionError("matmul expects rank-2 operands");
  if (av.dim(1) != bv.dim(0)) {
    throw DimensionError("matmul: inner extents differ " + shape_string(av.shape()) + " x " +
                         shape_string(bv.shape()));
  }
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor out({m, n});
  out.matrix().noalias() = av.matrix() * bv.matrix();
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record("matmul", std::move(out), {ia, ib}, [=](Tape& t, std::size_t self) {
    auto g = as_matrix(t.output_grad(self), m, n);
    if (t.requires_grad(ia)) {
      as_matrix(t.grad_buffer(ia), m, k).noalias() += g * t.value(ib).matrix().transpose();
    }
    if (t.requires_grad(ib)) {
      as_matrix(t.grad_buffer(ib), k, n).noalias() += t.value(ia).matrix().transpose() * g;
    }
  });
}

Var linear(Var x, Var weight, Var bias) {
  require_same_tape(x, weight);
  require_same_tape(x, bias);
  const Tensor& xv = x.value();
  const Tensor& wv = weight.value();
  const Tensor& bv = bias.value();
  if (wv.rank() != 2 || xv.cols() != wv.dim(0) || bv.size() != wv.dim(1)) {
    throw DimensionError("linear: incompatible shapes x" + shape_string(xv.shape()) + " w" +
                         shape_string(wv.shape()) + " b" + shape_string(bv.shape()));
  }
  const std::size_t rows = xv.rows(), in = wv.dim(0), outd = wv.dim(1);
  Tensor out(with_last(xv.shape(), outd));
  auto o = out.matrix();
  o.noalias() = xv.matrix() * wv.matrix();
  o.rowwise() += as_matrix(bv.data(), 1, outd).row(0);
  const std::size_t ix = x.id(), iw = weight.id(), ib = bias.id();
  return x.tape().record("linear", std::move(out), {ix, iw, ib}, [=](Tape& t, std::size_t self) {
    auto g = as_matrix(t.output_grad(self), rows, outd);
    if (t.requires_grad(ix)) {
      as_matrix(t.grad_buffer(ix), rows, in).noalias() += g * t.value(iw).matrix().transpose();
    }
    if (t.requires_grad(iw)) {
      as_matrix(t.grad_buffer(iw), in, outd).noalias() +=
          as_matrix(t.value(ix).data(), rows, in).transpose() * g;
    }
    if (t.requires_grad(ib)) {
      as_matrix(t.grad_buffer(ib), 1, outd).row(0) += g.colwise().sum();
    }
  });
}

Var add(Var a, Var b) {
  require_same_tape(a, b);
  require_same_shape("add", a.value(), b.value());
  Tensor out = a.value();
  out.clear_grad();
  out.set_requires_grad(false);
  const auto bd = b.value().data();
  auto od = out.data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] += bd[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record("add", std::move(out), {ia, ib}, [=](Tape& t, std::size_t self) {
    auto g = t.output_grad(self);
    for (std::size_t in : {ia, ib}) {
      if (!t.requires_grad(in)) continue;
      auto dst = t.grad_buffer(in);
      for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
    }
  });
}

Var mul(Var a, Var b) {
  require_same_tape(a, b);
  require_same_shape("mul", a.value(), b.value());
  const auto ad = a.value().data();
  const auto bd = b.value().data();
  Tensor out(a.value().shape());
  auto od = out.data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] = ad[i] * bd[i];
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record("mul", std::move(out), {ia, ib}, [=](Tape& t, std::size_t self) {
    auto g = t.output_grad(self);
    const auto av = t.value(ia).data();
    const auto bv = t.value(ib).data();
    // Two separate passes so that mul(x, x) accumulates both terms.
    if (t.requires_grad(ia)) {
      auto dst = t.grad_buffer(ia);
      for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] * bv[i];
    }
    if (t.requires_grad(ib)) {
      auto dst = t.grad_buffer(ib);
      for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i] * av[i];
    }
  });
}

Var affine(Var x, double alpha, double beta) {
  const auto xd = x.value().data();
  Tensor out(x.value().shape());
  auto od = out.data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] = alpha * xd[i] + beta;
  const std::size_t ix = x.id();
  return x.tape().record("affine", std::move(out), {ix}, [=](Tape& t, std::size_t self) {
    auto g = t.output_grad(self);
    auto dst = t.grad_buffer(ix);
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += alpha * g[i];
  });
}

Var sum(Var x) {
  double total = 0.0;
  for (double v : x.value().data()) total += v;
  const std::size_t ix = x.id();
  return x.tape().record("sum", Tensor::scalar(total), {ix}, [=](Tape& t, std::size_t self) {
    const double g = t.output_grad(self)[0];
    for (double& d : t.grad_buffer(ix)) d += g;
  });
}

Var mean(Var x) { return affine(sum(x), 1.0 / static_cast<double>(x.value().size())); }

Var layer_norm(Var x, std::optional<Var> gamma, std::optional<Var> beta, double eps) {
  const Tensor& xv = x.value();
  const std::size_t d = xv.cols();
  if (d < 2) throw DimensionError("layer_norm needs a last extent of at least 2");
  if (!(eps > 0.0)) throw ContractError("layer_norm eps must be positive");
  if (gamma && gamma->value().size() != d) throw DimensionError("layer_norm gamma size");
  if (beta && beta->value().size() != d) throw DimensionError("layer_norm beta size");
  const std::size_t rows = xv.rows();

  auto xhat = std::make_shared<std::vector<double>>(xv.size());
  auto rstd = std::make_shared<std::vector<double>>(rows);
  Tensor out(xv.shape());
  const auto xd = xv.data();
  const double* g = gamma ? gamma->value().data().data() : nullptr;
  const double* b = beta ? beta->value().data().data() : nullptr;
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xd.data() + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    const double rs = 1.0 / std::sqrt(var + eps);
    (*rstd)[r] = rs;
    for (std::size_t j = 0; j < d; ++j) {
      const double h = (row[j] - mu) * rs;
      (*xhat)[r * d + j] = h;
      out[r * d + j] = h * (g ? g[j] : 1.0) + (b ? b[j] : 0.0);
    }
  }

  std::vector<std::size_t> inputs{x.id()};
  const std::size_t ig = gamma ? gamma->id() : 0, ib = beta ? beta->id() : 0;
  if (gamma) inputs.push_back(ig);
  if (beta) inputs.push_back(ib);
  const bool has_gamma = gamma.has_value(), has_beta = beta.has_value();
  const std::size_t ix = x.id();
  return x.tape().record("layer_norm", std::move(out), std::move(inputs),
                         [=](Tape& t, std::size_t self) {
    auto gout = t.output_grad(self);
    const double* gm = has_gamma ? t.value(ig).data().data() : nullptr;
    std::vector<double> dxhat(d);
    for (std::size_t r = 0; r < rows; ++r) {
      const double* go = gout.data() + r * d;
      const double* h = xhat->data() + r * d;
      if (has_gamma && t.requires_grad(ig)) {
        auto dg = t.grad_buffer(ig);
        for (std::size_t j = 0; j < d; ++j) dg[j] += go[j] * h[j];
      }
      if (has_beta && t.requires_grad(ib)) {
        auto db = t.grad_buffer(ib);
        for (std::size_t j = 0; j < d; ++j) db[j] += go[j];
      }
      if (!t.requires_grad(ix)) continue;
      double m1 = 0.0, m2 = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        dxhat[j] = go[j] * (gm ? gm[j] : 1.0);
        m1 += dxhat[j];
        m2 += dxhat[j] * h[j];
      }
      m1 /= static_cast<double>(d);
      m2 /= static_cast<double>(d);
      double* dx = t.grad_buffer(ix).data() + r * d;
      const double rs = (*rstd)[r];
      for (std::size_t j = 0; j < d; ++j) dx[j] += rs * (dxhat[j] - m1 - h[j] * m2);
    }
  });
}

void softmax_rows(std::span<double> values, std::size_t cols, std::span<const std::uint8_t> mask) {
  if (cols == 0) throw DimensionError("softmax over an empty axis");
  if (!mask.empty() && mask.size() != values.size()) throw DimensionError("softmax mask size mismatch");
  const std::size_t rows = values.size() / cols;
  for (std::size_t r = 0; r < rows; ++r) {
    double* row = values.data() + r * cols;
    const std::uint8_t* keep = mask.empty() ? nullptr : mask.data() + r * cols;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t j = 0; j < cols; ++j) {
      if (!keep || keep[j]) mx = std::max(mx, row[j]);
    }
    if (mx == -std::numeric_limits<double>::infinity()) {
      throw ContractError("softmax row " + std::to_string(r) + " is fully masked");
    }
    if (!keep) {
      auto a = Eigen::Map<Eigen::ArrayXd>(row, static_cast<Index>(cols));
      a = (a - mx).exp();
      a *= 1.0 / a.sum();
      continue;
    }
    double total = 0.0;
    for (std::size_t j = 0; j < cols; ++j) {
      if (!keep[j]) {
        row[j] = 0.0;
        continue;
      }
      row[j] = std::exp(row[j] - mx);
      total += row[j];
    }
    const double inv = 1.0 / total;
    for (std::size_t j = 0; j < cols; ++j) row[j] *= inv;
  }
}

Var softmax(Var x, std::span<const std::uint8_t> mask) {
  Tensor out = x.value();
  out.clear_grad();
  out.set_requires_grad(false);
  const std::size_t cols = out.cols();
  softmax_rows(out.data(), cols, mask);
  const std::size_t ix = x.id();
  return x.tape().record("softmax", std::move(out), {ix}, [=](Tape& t, std::size_t self) {
    auto g = t.output_grad(self);
    const auto y = t.value(self).data();
    auto dx = t.grad_buffer(ix);
    const std::size_t rows = y.size() / cols;
    for (std::size_t r = 0; r < rows; ++r) {
      double dot = 0.0;
      for (std::size_t j = 0; j < cols; ++j) dot += g[r * cols + j] * y[r * cols + j];
      for (std::size_t j = 0; j < cols; ++j) {
        dx[r * cols + j] += y[r * cols + j] * (g[r * cols + j] - dot);
      }
    }
  });
}

namespace {

// erf on |x| < 0.84375 by the rational form used in fdlibm; outside that
// range the library erf is used. The split keeps the common case in a
// branch-free loop the compiler can vectorise.
constexpr double kErfSmall = 0.84375;

inline double erf_small(double x) {
  constexpr double pp0 = 1.28379167095512558561e-01, pp1 = -3.25042107247001499370e-01,
                   pp2 = -2.84817495755985104766e-02, pp3 = -5.77027029648944159157e-03,
                   pp4 = -2.37630166566501626084e-05;
  constexpr double qq1 = 3.97917223959155352819e-01, qq2 = 6.50222499887672944485e-02,
                   qq3 = 5.08130628187576562776e-03, qq4 = 1.32494738004321644526e-04,
                   qq5 = -3.96022827877536812320e-06;
  const double z = x * x;
  const double r = pp0 + z * (pp1 + z * (pp2 + z * (pp3 + z * pp4)));
  const double s = 1.0 + z * (qq1 + z * (qq2 + z * (qq3 + z * (qq4 + z * qq5))));
  return x + x * (r / s);
}

// Gaussian CDF of every element of x.
void normal_cdf(std::span<const double> x, std::span<double> cdf) {
  const std::size_t n = x.size();
  for (std::size_t i = 0; i < n; ++i) {
    const double u = x[i] * (std::numbers::sqrt2 / 2.0);
    cdf[i] = 0.5 * (1.0 + erf_small(u));
  }
  for (std::size_t i = 0; i < n; ++i) {
    const double u = x[i] * (std::numbers::sqrt2 / 2.0);
    if (!(std::abs(u) < kErfSmall)) cdf[i] = 0.5 * (1.0 + std::erf(u));
  }
}

}  // namespace

double gelu_value(double x) {
  const double u = x * (std::numbers::sqrt2 / 2.0);
  return 0.5 * x * (1.0 + (std::abs(u) < kErfSmall ? erf_small(u) : std::erf(u)));
}

Var gelu(Var x) {
  const auto xd = x.value().data();
  auto cdf = std::make_shared<std::vector<double>>(xd.size());
  normal_cdf(xd, *cdf);
  Tensor out(x.value().shape());
  auto od = out.data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] = xd[i] * (*cdf)[i];
  const std::size_t ix = x.id();
  return x.tape().record("gelu", std::move(out), {ix}, [=](Tape& t, std::size_t self) {
    auto g = t.output_grad(self);
    const auto xs = t.value(ix).data();
    auto dx = t.grad_buffer(ix);
    constexpr double inv_sqrt_2pi = 0.3989422804014327;
    const auto n = static_cast<Index>(g.size());
    const auto v = Eigen::Map<const Eigen::ArrayXd>(xs.data(), n);
    const auto p = Eigen::Map<const Eigen::ArrayXd>(cdf->data(), n);
    Eigen::Map<Eigen::ArrayXd>(dx.data(), n) +=
        Eigen::Map<const Eigen::ArrayXd>(g.data(), n) * (p + v * inv_sqrt_2pi * (-0.5 * v * v).exp());
  });
}

Var dropout(Var x, double p, Rng& rng) {
  if (p < 0.0 || p >= 1.0) throw ContractError("dropout probability must lie in [0, 1)");
  if (p == 0.0) return x;
  const double keep_scale = 1.0 / (1.0 - p);
  // One draw from rng keys a counter-based stream (splitmix64 of the
  // element index), which is much cheaper than a generator call per element.
  const std::uint64_t key = rng.next();
  const auto threshold = static_cast<std::uint64_t>(p * 0x1.0p53);
  auto mask = std::make_shared<std::vector<double>>(x.value().size());
  auto& m = *mask;
  for (std::size_t i = 0; i < m.size(); ++i) {
    std::uint64_t z = key + (static_cast<std::uint64_t>(i) + 1) * 0x9e3779b97f4a7c15ULL;
    z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
    z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
    z ^= z >> 31;
    m[i] = (z >> 11) < threshold ? 0.0 : keep_scale;
  }
  const auto xd = x.value().data();
  Tensor out(x.value().shape());
  auto od = out.data();
  for (std::size_t i = 0; i < od.size(); ++i) od[i] = xd[i] * (*mask)[i];
  const std::size_t ix = x.id();
  return x.tape().record("dropout", std::move(out), {ix}, [=](Tape& t, std::size_t self) {
    auto g = t.output_grad(self);
    auto dx = t.grad_buffer(ix);
    for (std::size_t i = 0; i < g.size(); ++i) dx[i] += g[i] * (*mask)[i];
  });
}

Var gather_rows(Var x, std::span<const std::size_t> rows) {
  const Tensor& xv = x.value();
  const std::size_t cols = xv.cols();
  if (rows.empty()) throw DimensionError("gather_rows: empty selection");
  Tensor out({rows.size(), cols});
  for (std::size_t i = 0; i < rows.size(); ++i) {
    if (rows[i] >= xv.rows()) throw DimensionError("gather_rows: row index out of range");
    std::copy_n(xv.data().begin() + static_cast<std::ptrdiff_t>(rows[i] * cols), cols,
                out.data().begin() + static_cast<std::ptrdiff_t>(i * cols));
  }
  std::vector<std::size_t> picked(rows.begin(), rows.end());
  const std::size_t ix = x.id();
  return x.tape().record("gather_rows", std::move(out), {ix},
                         [=, picked = std::move(picked)](Tape& t, std::size_t self) {
    auto g = t.output_grad(self);
    auto dx = t.grad_buffer(ix);
    for (std::size_t i = 0; i < picked.size(); ++i) {
      for (std::size_t j = 0; j < cols; ++j) dx[picked[i] * cols + j] += g[i * cols + j];
    }
  });
}

Var cosine_similarity_rows(Var a, Var b, double eps) {
  require_same_tape(a, b);
  require_same_shape("cosine_similarity_rows", a.value(), b.value());
  const std::size_t rows = a.value().rows(), d = a.value().cols();
  const auto ad = a.value().data();
  const auto bd = b.value().data();
  auto norms = std::make_shared<std::vector<double>>(2 * rows);
  Tensor out({rows});
  for (std::size_t r = 0; r < rows; ++r) {
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (std::size_t j = 0; j < d; ++j) {
      dot += ad[r * d + j] * bd[r * d + j];
      na += ad[r * d + j] * ad[r * d + j];
      nb += bd[r * d + j] * bd[r * d + j];
    }
    na = std::sqrt(na);
    nb = std::sqrt(nb);
    if (na <= eps || nb <= eps) {
      throw DegenerateInputError("cosine similarity of a near-zero vector (row " + std::to_string(r) + ")");
    }
    (*norms)[2 * r] = na;
    (*norms)[2 * r + 1] = nb;
    out[r] = dot / (na * nb);
  }
  const std::size_t ia = a.id(), ib = b.id();
  return a.tape().record("cosine_similarity_rows", std::move(out), {ia, ib},
                         [=](Tape& t, std::size_t self) {
    auto g = t.output_grad(self);
    const auto c = t.value(self).data();
    const auto av = t.value(ia).data();
    const auto bv = t.value(ib).data();
    for (std::size_t r = 0; r < rows; ++r) {
      const double na = (*norms)[2 * r], nb = (*norms)[2 * r + 1];
      if (t.requires_grad(ia)) {
        double* da = t.grad_buffer(ia).data() + r * d;
        for (std::size_t j = 0; j < d; ++j) {
          da[j] += g[r] * (bv[r * d + j] / (na * nb) - c[r] * av[r * d + j] / (na * na));
        }
      }
      if (t.requires_grad(ib)) {
        double* db = t.grad_buffer(ib).data() + r * d;
        for (std::size_t j = 0; j < d; ++j) {
          db[j] += g[r] * (av[r * d + j] / (na * nb) - c[r] * bv[r * d + j] / (nb * nb));
        }
      }
    }
  });
}

Var attention(Var q, Var k, Var v, std::span<const Segment> segments, std::size_t heads) {
  return attention(q, k, v, segments, segments, heads);
}

Var attention(Var q, Var k, Var v, std::span<const Segment> query_segments, std::span<const Segment> key_segments,
              std::size_t heads) {
  require_same_tape(q, k);
  require_same_tape(q, v);
  const Tensor& qv = q.value();
  require_same_shape("attention", k.value(), v.value());
  if (qv.rank() != 2 || k.value().rank() != 2) throw DimensionError("attention expects packed [N x d] inputs");
  if (qv.dim(1) != k.value().dim(1)) throw DimensionError("attention: query and key widths differ");
  if (query_segments.size() != key_segments.size()) throw DimensionError("attention: segment lists differ in length");
  const std::size_t nq = qv.dim(0), nk = k.value().dim(0), d = qv.dim(1);
  if (heads == 0 || d % heads != 0) throw DimensionError("attention: model dim not divisible by heads");
  const std::size_t dh = d / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
  std::vector<Segment> qsegs(query_segments.begin(), query_segments.end());
  std::vector<Segment> ksegs(key_segments.begin(), key_segments.end());
  for (std::size_t i = 0; i < qsegs.size(); ++i) {
    if (qsegs[i].length == 0 || qsegs[i].offset + qsegs[i].length > nq || ksegs[i].length == 0 ||
        ksegs[i].offset + ksegs[i].length > nk) {
      throw DimensionError("attention: segment out of range");
    }
  }

  const auto stride = Eigen::OuterStride<>(static_cast<Index>(d));
  auto cblock = [stride, d, dh](const double* base, const Segment& s, std::size_t h) {
    return ConstStridedMap(base + s.offset * d + h * dh, static_cast<Index>(s.length), static_cast<Index>(dh), stride);
  };
  auto mblock = [stride, d, dh](double* base, const Segment& s, std::size_t h) {
    return StridedMap(base + s.offset * d + h * dh, static_cast<Index>(s.length), static_cast<Index>(dh), stride);
  };

  auto probs = std::make_shared<std::vector<RowMatrix>>();
  probs->reserve(qsegs.size() * heads);
  Tensor out({nq, d});
  for (std::size_t i = 0; i < qsegs.size(); ++i) {
    for (std::size_t h = 0; h < heads; ++h) {
      RowMatrix p = (cblock(qv.data().data(), qsegs[i], h) *
                     cblock(k.value().data().data(), ksegs[i], h).transpose()) * scale;
      softmax_rows(std::span<double>(p.data(), static_cast<std::size_t>(p.size())), ksegs[i].length);
      mblock(out.data().data(), qsegs[i], h).noalias() = p * cblock(v.value().data().data(), ksegs[i], h);
      probs->push_back(std::move(p));
    }
  }

  const std::size_t iq = q.id(), ik = k.id(), iv = v.id();
  return q.tape().record("attention", std::move(out), {iq, ik, iv},
                         [=, qsegs = std::move(qsegs), ksegs = std::move(ksegs)](Tape& t, std::size_t self) {
    const auto gout = t.output_grad(self);
    const double* qd = t.value(iq).data().data();
    const double* kd = t.value(ik).data().data();
    const double* vd = t.value(iv).data().data();
    double* dq = t.requires_grad(iq) ? t.grad_buffer(iq).data() : nullptr;
    double* dk = t.requires_grad(ik) ? t.grad_buffer(ik).data() : nullptr;
    double* dv = t.requires_grad(iv) ? t.grad_buffer(iv).data() : nullptr;
    std::size_t idx = 0;
    for (std::size_t i = 0; i < qsegs.size(); ++i) {
      const Segment& qs = qsegs[i];
      const Segment& ks = ksegs[i];
      for (std::size_t h = 0; h < heads; ++h, ++idx) {
        const RowMatrix& p = (*probs)[idx];
        const auto g = cblock(gout.data(), qs, h);
        if (dv) mblock(dv, ks, h).noalias() += p.transpose() * g;
        if (!dq && !dk) continue;
        RowMatrix dp = g * cblock(vd, ks, h).transpose();
        const Eigen::VectorXd row_dot = (dp.array() * p.array()).rowwise().sum();
        RowMatrix ds = (p.array() * (dp.colwise() - row_dot).array()).matrix() * scale;
        if (dq) mblock(dq, qs, h).noalias() += ds * cblock(kd, ks, h);
        if (dk) mblock(dk, ks, h).noalias() += ds.transpose() * cblock(qd, qs, h);
      }
    }
  });
}

std::vector<double> normalize_vector(std::span<const double> x, double eps) {
  const std::size_t d = x.size();
  if (d < 2) throw DimensionError("layer normalisation needs at least 2 elements");
  double mu = 0.0;
  for (double v : x) mu += v;
  mu /= static_cast<double>(d);
  double var = 0.0;
  for (double v : x) var += (v - mu) * (v - mu);
  var /= static_cast<double>(d);
  const double rs = 1.0 / std::sqrt(var + eps);
  std::vector<double> out(d);
  for (std::size_t j = 0; j < d; ++j) out[j] = (x[j] - mu) * rs;
  return out;
}

}  // namespace cte::num
