#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include "mflow/dynamics.hpp"
#include "mflow/geometry.hpp"
#include "mflow/random.hpp"
#include "oracles.hpp"
#include "testutil.hpp"

using namespace mflow;
using testutil::random_field;
using testutil::random_point;
using testutil::random_tangent;

namespace {

Vec to_input(const Vec& z, double t) {
  Vec u(z.size() + 1);
  u.head(z.size()) = z;
  u(z.size()) = t;
  return u;
}

double frob_rel(const Mat& got, const Mat& want) {
  return (got - want).norm() / std::max(want.norm(), 1e-10);
}

// raw unnormalized-projector extension of the field; this is exactly the
// function field_jacobian_z differentiates, so its ambient FD Jacobian is a
// full-matrix oracle
Vec plain_projected(const FieldParams& p, const Vec& u, double t) {
  Vec m = mlp_forward(p, to_input(u, t));
  Vec ul = metric_lower(p.manifold, u);
  if (p.manifold.kind == ManifoldKind::Sphere) return m - u * (ul.dot(m));
  return m + u * (ul.dot(m));
}

}  // namespace

TEST_CASE("field shapes, flatten roundtrip, parameter count") {
  Manifold h2 = Manifold::hyperboloid(2);
  FieldParams p = make_field(h2, FieldMode::AmbientProjected, 32, 4);
  CHECK(p.input_width() == 4);
  CHECK(p.output_width() == 3);
  CHECK(p.layer_count() == 4);
  // 32x4 + 32 + 32x32 + 32 + 32x32 + 32 + 3x32 + 3
  CHECK(p.param_count() == 128 + 32 + 1024 + 32 + 1024 + 32 + 96 + 3);

  Rng rng = make_rng(7);
  glorot_init(p, rng);
  for (auto& bv : p.b)
    for (int i = 0; i < bv.size(); ++i) bv[i] = 0.01 * (i + 1);
  Vec flat = p.flatten();
  FieldParams q = make_field(h2, FieldMode::AmbientProjected, 32, 4);
  q.unflatten(flat);
  for (size_t i = 0; i < p.W.size(); ++i) {
    CHECK((p.W[i] - q.W[i]).norm() == 0.0);
    CHECK((p.b[i] - q.b[i]).norm() == 0.0);
  }

  FieldParams td = make_field(h2, FieldMode::TangentDirect, 16, 3);
  CHECK(td.input_width() == 3);
  CHECK(td.output_width() == 2);
  CHECK_THROWS_AS(make_field(Manifold::sphere(2), FieldMode::TangentDirect, 8, 2),
                  ArgumentError);
}

TEST_CASE("glorot init stays in the fan bound, biases zero, deterministic") {
  Manifold s2 = Manifold::sphere(2);
  FieldParams p = make_field(s2, FieldMode::AmbientProjected, 32, 4);
  Rng r1 = make_rng(123);
  glorot_init(p, r1);
  for (size_t i = 0; i < p.W.size(); ++i) {
    double a = std::sqrt(6.0 / double(p.W[i].rows() + p.W[i].cols()));
    CHECK(p.W[i].cwiseAbs().maxCoeff() <= a);
    CHECK(p.W[i].cwiseAbs().maxCoeff() > 0.0);
    CHECK(p.b[i].norm() == 0.0);
  }
  FieldParams q = make_field(s2, FieldMode::AmbientProjected, 32, 4);
  Rng r2 = make_rng(123);
  glorot_init(q, r2);
  for (size_t i = 0; i < p.W.size(); ++i) CHECK((p.W[i] - q.W[i]).norm() == 0.0);
}

TEST_CASE("mlp forward against a hand-built two-layer net") {
  Manifold h2 = Manifold::hyperboloid(2);
  FieldParams p = make_field(h2, FieldMode::TangentDirect, 2, 2);  // 3 -> 2 -> 2
  p.W[0] << 0.3, -0.2, 0.5, 0.1, 0.4, -0.6;
  p.b[0] << 0.05, -0.1;
  p.W[1] << 1.0, -0.5, 0.25, 0.75;
  p.b[1] << -0.2, 0.3;
  Vec u(3);
  u << 0.4, -0.7, 0.2;
  Vec h1(2);
  h1[0] = std::tanh(0.3 * 0.4 - 0.2 * -0.7 + 0.5 * 0.2 + 0.05);
  h1[1] = std::tanh(0.1 * 0.4 + 0.4 * -0.7 - 0.6 * 0.2 - 0.1);
  Vec want(2);
  want[0] = 1.0 * h1[0] - 0.5 * h1[1] - 0.2;
  want[1] = 0.25 * h1[0] + 0.75 * h1[1] + 0.3;
  Vec got = mlp_forward(p, u);
  CHECK((got - want).lpNorm<Eigen::Infinity>() < 1e-15);
}

TEST_CASE("zero parameters give a zero field everywhere") {
  for (auto m : {Manifold::hyperboloid(2), Manifold::sphere(2)}) {
    FieldParams p = make_field(m, FieldMode::AmbientProjected);
    Rng rng = make_rng(5);
    for (int k = 0; k < 5; ++k) {
      ManifoldPoint z = random_point(rng, m);
      TangentVector f = field_eval(p, z, 0.37);
      CHECK(f.v.norm() == 0.0);
      CHECK(field_jacobian_z(p, z, 0.37).norm() == 0.0);
      CHECK(manifold_divergence(p, z, 0.37) == 0.0);
      Vec cot = Vec::Ones(m.ambient_dim());
      CHECK(field_vjp_params(p, z, 0.37, cot).head(64).norm() == 0.0);
    }
  }
}

TEST_CASE("mlp input jacobian matches finite differences") {
  Rng rng = make_rng(41);
  for (int cfg = 0; cfg < 20; ++cfg) {
    Manifold m = (cfg % 2 == 0) ? Manifold::hyperboloid(2 + cfg % 3) : Manifold::sphere(2 + cfg % 3);
    FieldMode mode = (cfg % 4 == 1 && m.kind == ManifoldKind::Hyperboloid)
                         ? FieldMode::TangentDirect
                         : FieldMode::AmbientProjected;
    FieldParams p = random_field(rng, m, mode);
    Vec u(p.input_width());
    for (int i = 0; i < u.size(); ++i) u[i] = normal01(rng);
    MlpCache cache;
    mlp_forward(p, u, &cache);
    Mat J = mlp_input_jacobian(p, cache);
    Mat Jfd = oracle::fd_jacobian([&](const Vec& v) { return mlp_forward(p, v); }, u, 1e-6);
    CHECK(frob_rel(J, Jfd) < 1e-6);
  }
}

TEST_CASE("mlp parameter vjp matches finite differences over every block") {
  Rng rng = make_rng(42);
  for (int cfg = 0; cfg < 6; ++cfg) {
    Manifold m = (cfg % 2 == 0) ? Manifold::hyperboloid(2) : Manifold::sphere(3);
    FieldParams p = random_field(rng, m, FieldMode::AmbientProjected, 6, 3);
    Vec u(p.input_width());
    for (int i = 0; i < u.size(); ++i) u[i] = normal01(rng);
    Vec cot(p.output_width());
    for (int i = 0; i < cot.size(); ++i) cot[i] = normal01(rng);

    MlpCache cache;
    mlp_forward(p, u, &cache);
    Vec grad = Vec::Zero(p.param_count());
    Vec grad_in;
    mlp_vjp_params(p, cache, cot, grad, &grad_in);

    Vec flat = p.flatten();
    FieldParams q = p;
    Vec fd(p.param_count());
    for (int k = 0; k < flat.size(); ++k) {
      Vec fp = flat, fm = flat;
      fp[k] += 1e-6;
      fm[k] -= 1e-6;
      q.unflatten(fp);
      double up = cot.dot(mlp_forward(q, u));
      q.unflatten(fm);
      double dn = cot.dot(mlp_forward(q, u));
      fd[k] = (up - dn) / 2e-6;
    }
    CHECK((grad - fd).norm() / std::max(fd.norm(), 1e-10) < 1e-5);

    Vec gfd = oracle::fd_grad([&](const Vec& v) { return cot.dot(mlp_forward(p, v)); }, u);
    CHECK((grad_in - gfd).norm() / std::max(gfd.norm(), 1e-10) < 1e-6);

    // output-layer bias block receives the raw cotangent, exactly
    int tail = p.output_width();
    CHECK((grad.tail(tail) - cot).norm() == 0.0);
  }
}

TEST_CASE("trace form: value, input gradient, and parameter gradient") {
  Rng rng = make_rng(43);
  for (int cfg = 0; cfg < 6; ++cfg) {
    Manifold m = (cfg % 2 == 0) ? Manifold::hyperboloid(3) : Manifold::sphere(2);
    FieldParams p = random_field(rng, m, FieldMode::AmbientProjected, 6, (cfg % 3) + 2);
    Mat A(p.input_width(), p.output_width());
    for (int r = 0; r < A.rows(); ++r)
      for (int c = 0; c < A.cols(); ++c) A(r, c) = normal01(rng);
    Vec u(p.input_width());
    for (int i = 0; i < u.size(); ++i) u[i] = normal01(rng);

    MlpCache cache;
    mlp_forward(p, u, &cache);
    Vec gp = Vec::Zero(p.param_count());
    Vec gi;
    double phi = mlp_trace_form(p, cache, A, &gp, &gi);

    // value oracle: contract A against the FD Jacobian
    Mat Jfd = oracle::fd_jacobian([&](const Vec& v) { return mlp_forward(p, v); }, u, 1e-6);
    CHECK(oracle::rel_err(phi, (A * Jfd).trace(), 1e-10) < 1e-6);

    // input gradient oracle: FD of phi(u) computed through the (already
    // validated) analytic jacobian
    auto phi_at = [&](const Vec& v) {
      MlpCache c2;
      mlp_forward(p, v, &c2);
      return (A * mlp_input_jacobian(p, c2)).trace();
    };
    Vec gi_fd = oracle::fd_grad(phi_at, u, 1e-5);
    CHECK((gi - gi_fd).norm() / std::max(gi_fd.norm(), 1e-10) < 1e-4);

    // parameter gradient oracle: FD across every parameter
    Vec flat = p.flatten();
    FieldParams q = p;
    Vec fd(p.param_count());
    for (int k = 0; k < flat.size(); ++k) {
      Vec fp = flat, fm = flat;
      fp[k] += 1e-5;
      fm[k] -= 1e-5;
      q.unflatten(fp);
      MlpCache cp;
      mlp_forward(q, u, &cp);
      double up = mlp_trace_form(q, cp, A);
      q.unflatten(fm);
      MlpCache cm;
      mlp_forward(q, u, &cm);
      double dn = mlp_trace_form(q, cm, A);
      fd[k] = (up - dn) / 2e-5;
    }
    CHECK((gp - fd).norm() / std::max(fd.norm(), 1e-10) < 1e-4);
  }
}

TEST_CASE("field_eval is tangent and respects the affine norm bound") {
  Rng rng = make_rng(44);
  for (auto m : {Manifold::hyperboloid(2), Manifold::sphere(2)}) {
    FieldParams p = random_field(rng, m, FieldMode::AmbientProjected, 32, 4);
    // unrolled 1-Lipschitz bound |h_i| <= |W_i| |h_{i-1}| + |b_i|
    auto bound_m = [&](const Vec& u) {
      double s = u.norm();
      for (int i = 0; i < p.layer_count(); ++i) {
        Eigen::JacobiSVD<Mat> svd(p.W[i]);
        s = svd.singularValues()(0) * s + p.b[i].norm();
      }
      return s;
    };
    for (int k = 0; k < 20; ++k) {
      ManifoldPoint z = random_point(rng, m, 2.0);
      double t = uniform01(rng);
      TangentVector f = field_eval(p, z, t);
      double ip = ambient_inner(m, z.x, f.v);
      CHECK(std::abs(ip) < 1e-9 * std::max(1.0, z.x.squaredNorm()) * std::max(1.0, f.v.norm()));
      Eigen::JacobiSVD<Mat> svd(tangent_projector(z));
      CHECK(f.v.norm() <= svd.singularValues()(0) * bound_m(to_input(z.x, t)) + 1e-12);
    }
  }
}

TEST_CASE("field jacobian: full ambient FD on the plain projected extension") {
  Rng rng = make_rng(45);
  for (auto m : {Manifold::hyperboloid(2), Manifold::sphere(3)}) {
    for (int k = 0; k < 8; ++k) {
      FieldParams p = random_field(rng, m, FieldMode::AmbientProjected);
      ManifoldPoint z = random_point(rng, m, 1.5);
      double t = uniform01(rng);
      Mat J = field_jacobian_z(p, z, t);
      Mat Jfd = oracle::fd_jacobian(
          [&](const Vec& u) { return plain_projected(p, u, t); }, z.x, 1e-6);
      CHECK(frob_rel(J, Jfd) < 1e-6);
    }
  }
}

TEST_CASE("field jacobian agrees with the smooth extension along tangents") {
  // any two extensions share directional derivatives in tangent directions
  Rng rng = make_rng(46);
  for (auto m : {Manifold::hyperboloid(2), Manifold::sphere(2)}) {
    FieldParams p = random_field(rng, m, FieldMode::AmbientProjected);
    ManifoldPoint z = random_point(rng, m, 1.2);
    double t = 0.3;
    Mat J = field_jacobian_z(p, z, t);
    for (int k = 0; k < 4; ++k) {
      Vec d = random_tangent(rng, z).v;
      d /= d.norm();
      double h = 1e-6;
      Vec fd = (field_eval_ambient(p, m, Vec(z.x + h * d), t) -
                field_eval_ambient(p, m, Vec(z.x - h * d), t)) /
               (2.0 * h);
      CHECK((J * d - fd).norm() < 1e-6 * std::max(1.0, fd.norm()));
    }
  }
}

TEST_CASE("field vjp over parameters matches finite differences") {
  Rng rng = make_rng(47);
  for (auto m : {Manifold::hyperboloid(2), Manifold::sphere(2)}) {
    FieldParams p = random_field(rng, m, FieldMode::AmbientProjected, 6, 3);
    ManifoldPoint z = random_point(rng, m, 1.5);
    double t = 0.6;
    Vec cot(m.ambient_dim());
    for (int i = 0; i < cot.size(); ++i) cot[i] = normal01(rng);
    Vec grad = field_vjp_params(p, z, t, cot);

    Vec flat = p.flatten();
    FieldParams q = p;
    Vec fd(p.param_count());
    for (int k = 0; k < flat.size(); ++k) {
      Vec fp = flat, fm = flat;
      fp[k] += 1e-6;
      fm[k] -= 1e-6;
      q.unflatten(fp);
      double up = cot.dot(field_eval(q, z, t).v);
      q.unflatten(fm);
      double dn = cot.dot(field_eval(q, z, t).v);
      fd[k] = (up - dn) / 2e-6;
    }
    CHECK((grad - fd).norm() / std::max(fd.norm(), 1e-10) < 1e-5);
  }
}

TEST_CASE("wide sweep: jacobian and directional parameter gradient, 120 configs") {
  for (int cfg = 0; cfg < 120; ++cfg) {
    Rng rng = make_rng(1000 + cfg);
    int n = 2 + cfg % 3;
    Manifold m = (cfg % 2 == 0) ? Manifold::hyperboloid(n) : Manifold::sphere(n);
    FieldMode mode = (cfg % 6 == 4 && m.kind == ManifoldKind::Hyperboloid)
                         ? FieldMode::TangentDirect
                         : FieldMode::AmbientProjected;
    FieldParams p = random_field(rng, m, mode, 8, 3);
    ManifoldPoint z = random_point(rng, m, 1.5);
    double t = uniform01(rng);

    Mat J = field_jacobian_z(p, z, t);
    if (mode == FieldMode::AmbientProjected) {
      Mat Jfd = oracle::fd_jacobian(
          [&](const Vec& u) { return plain_projected(p, u, t); }, z.x, 1e-5);
      CHECK(frob_rel(J, Jfd) < 1e-4);
    } else {
      // chart-coordinate jacobian against FD in the global chart
      ManifoldPoint o = manifold_origin(m);
      Mat F = orthonormal_frame(o);
      Vec y = frame_coords(m, F, log_map(o, z).v);
      Mat Jfd = oracle::fd_jacobian(
          [&](const Vec& yy) {
            ManifoldPoint zz = exp_map(TangentVector{o, F * yy});
            ManifoldPoint oo = manifold_origin(m);
            Vec cc = frame_coords(m, F, log_map(oo, zz).v);
            return mlp_forward(p, to_input(cc, t));
          },
          y, 1e-5);
      CHECK(frob_rel(J, Jfd) < 1e-4);
    }

    // whole parameter gradient probed in one random direction
    Vec cot(p.output_width());
    for (int i = 0; i < cot.size(); ++i) cot[i] = normal01(rng);
    Vec grad;
    if (mode == FieldMode::AmbientProjected) {
      Vec cot_a(m.ambient_dim());
      for (int i = 0; i < cot_a.size(); ++i) cot_a[i] = normal01(rng);
      grad = field_vjp_params(p, z, t, cot_a);
      Vec flat = p.flatten();
      Vec dir(flat.size());
      for (int i = 0; i < dir.size(); ++i) dir[i] = normal01(rng);
      dir /= dir.norm();
      FieldParams q = p;
      q.unflatten(Vec(flat + 1e-5 * dir));
      double up = cot_a.dot(field_eval(q, z, t).v);
      q.unflatten(Vec(flat - 1e-5 * dir));
      double dn = cot_a.dot(field_eval(q, z, t).v);
      double fd = (up - dn) / 2e-5;
      CHECK(oracle::rel_err(grad.dot(dir), fd, 1e-8) < 1e-4);
    } else {
      grad = field_vjp_params(p, z, t, cot);
      Vec flat = p.flatten();
      Vec dir(flat.size());
      for (int i = 0; i < dir.size(); ++i) dir[i] = normal01(rng);
      dir /= dir.norm();
      ManifoldPoint o = manifold_origin(m);
      Mat F = orthonormal_frame(o);
      Vec y = frame_coords(m, F, log_map(o, z).v);
      FieldParams q = p;
      q.unflatten(Vec(flat + 1e-5 * dir));
      double up = cot.dot(mlp_forward(q, to_input(y, t)));
      q.unflatten(Vec(flat - 1e-5 * dir));
      double dn = cot.dot(mlp_forward(q, to_input(y, t)));
      double fd = (up - dn) / 2e-5;
      CHECK(oracle::rel_err(grad.dot(dir), fd, 1e-8) < 1e-4);
    }
  }
}

TEST_CASE("divergence matches the transport-based intrinsic oracle") {
  Rng rng = make_rng(48);
  for (auto m : {Manifold::hyperboloid(2), Manifold::sphere(2), Manifold::hyperboloid(3)}) {
    for (int k = 0; k < 6; ++k) {
      FieldParams p = random_field(rng, m, FieldMode::AmbientProjected);
      ManifoldPoint z = random_point(rng, m, 1.5);
      double t = uniform01(rng);
      double S = manifold_divergence(p, z, t);

      // sum_i d/dh <PT_{c(h) -> z} f(c(h)), e_i> along geodesics c(h) = exp(h e_i)
      Mat F = orthonormal_frame(z);
      double h = 1e-5;
      double acc = 0.0;
      for (int i = 0; i < m.dim; ++i) {
        TangentVector ei{z, F.col(i)};
        ManifoldPoint zp = exp_map(TangentVector{z, h * F.col(i)});
        ManifoldPoint zm = exp_map(TangentVector{z, -h * F.col(i)});
        TangentVector fp = field_eval(p, zp, t);
        TangentVector fm = field_eval(p, zm, t);
        Vec back_p = parallel_transport(zp, z, fp).v;
        Vec back_m = parallel_transport(zm, z, fm).v;
        acc += ambient_inner(m, Vec(back_p - back_m), F.col(i)) / (2.0 * h);
      }
      CHECK(oracle::rel_err(S, acc, 1e-8) < 1e-4);

      // and against the frame-restricted trace of the analytic jacobian
      Mat J = field_jacobian_z(p, z, t);
      double tr = 0.0;
      for (int i = 0; i < m.dim; ++i)
        tr += ambient_inner(m, Vec(F.col(i)), Vec(J * F.col(i)));
      CHECK(oracle::rel_err(S, tr, 1e-12) < 1e-10);
    }
  }
}

TEST_CASE("divergence gradient along tangent directions") {
  Rng rng = make_rng(49);
  for (auto m : {Manifold::hyperboloid(2), Manifold::sphere(2)}) {
    FieldParams p = random_field(rng, m, FieldMode::AmbientProjected);
    ManifoldPoint z = random_point(rng, m, 1.2);
    double t = 0.45;
    DivergenceEval de = manifold_divergence_grad(p, z, t);
    CHECK(oracle::rel_err(de.S, manifold_divergence(p, z, t), 1e-12) < 1e-12);
    Mat F = orthonormal_frame(z);
    double h = 1e-5;
    for (int i = 0; i < m.dim; ++i) {
      ManifoldPoint zp = exp_map(TangentVector{z, h * F.col(i)});
      ManifoldPoint zm = exp_map(TangentVector{z, -h * F.col(i)});
      double fd = (manifold_divergence(p, zp, t) - manifold_divergence(p, zm, t)) / (2.0 * h);
      CHECK(oracle::rel_err(de.dS_dz.dot(F.col(i)), fd, 1e-8) < 1e-4);
    }
  }
}

TEST_CASE("divergence parameter gradient matches finite differences") {
  Rng rng = make_rng(50);
  for (auto m : {Manifold::hyperboloid(2), Manifold::sphere(2)}) {
    FieldParams p = random_field(rng, m, FieldMode::AmbientProjected, 6, 3);
    ManifoldPoint z = random_point(rng, m, 1.5);
    double t = 0.2;
    Vec grad = Vec::Zero(p.param_count());
    manifold_divergence_vjp(p, z, t, 1.0, grad);

    Vec flat = p.flatten();
    FieldParams q = p;
    Vec fd(p.param_count());
    for (int k = 0; k < flat.size(); ++k) {
      Vec fp = flat, fm = flat;
      fp[k] += 1e-5;
      fm[k] -= 1e-5;
      q.unflatten(fp);
      double up = manifold_divergence(q, z, t);
      q.unflatten(fm);
      double dn = manifold_divergence(q, z, t);
      fd[k] = (up - dn) / 2e-5;
    }
    CHECK((grad - fd).norm() / std::max(fd.norm(), 1e-10) < 1e-4);
  }
}

TEST_CASE("chart pullback then pushforward recovers the field") {
  Rng rng = make_rng(51);
  for (auto m : {Manifold::hyperboloid(2), Manifold::sphere(2), Manifold::sphere(3)}) {
    FieldParams p = random_field(rng, m, FieldMode::AmbientProjected);
    ManifoldPoint anchor = random_point(rng, m, 1.0);
    ChartContext ctx(p, anchor);
    for (int k = 0; k < 6; ++k) {
      Vec y(m.dim);
      for (int i = 0; i < m.dim; ++i) y[i] = 0.5 * normal01(rng);
      double t = uniform01(rng);
      Vec g = ctx.velocity(y, t);
      ManifoldPoint z = ctx.push(y);
      Mat E = exp_map_differential(TangentVector{anchor, Vec(ctx.frame() * y)});
      Vec pushed = E * (ctx.frame() * g);
      Vec f = field_eval(p, z, t).v;
      CHECK((pushed - f).norm() < 1e-8 * std::max(1.0, f.norm()));
    }
  }
}

TEST_CASE("chart pullback at the anchor itself") {
  // y = 0 must work exactly: L at coincidence is the tangent projector
  Rng rng = make_rng(52);
  for (auto m : {Manifold::hyperboloid(2), Manifold::sphere(2)}) {
    FieldParams p = random_field(rng, m, FieldMode::AmbientProjected);
    ManifoldPoint anchor = random_point(rng, m, 1.3);
    ChartContext ctx(p, anchor);
    Vec y = Vec::Zero(m.dim);
    Vec g = ctx.velocity(y, 0.8);
    Vec f = field_eval(p, anchor, 0.8).v;
    Vec g_want = frame_coords(m, ctx.frame(), f);
    CHECK((g - g_want).norm() < 1e-12 * std::max(1.0, f.norm()));
  }
}

TEST_CASE("tangent-direct chart velocity is the raw network output") {
  Manifold h2 = Manifold::hyperboloid(2);
  Rng rng = make_rng(53);
  FieldParams p = random_field(rng, h2, FieldMode::TangentDirect);
  ChartContext ctx(p, manifold_origin(h2));
  Vec y(2);
  y << 0.7, -1.1;
  Vec g = ctx.velocity(y, 0.25);
  CHECK((g - mlp_forward(p, to_input(y, 0.25))).norm() == 0.0);
  // anchored anywhere else it refuses
  ManifoldPoint off = random_point(rng, h2, 1.0);
  if ((off.x - manifold_origin(h2).x).norm() > 1e-6)
    CHECK_THROWS_AS(ChartContext(p, off), ArgumentError);
}

TEST_CASE("chart overflow at the sphere validity limit") {
  Manifold s2 = Manifold::sphere(2);
  Rng rng = make_rng(54);
  FieldParams p = random_field(rng, s2, FieldMode::AmbientProjected);
  ChartContext ctx(p, manifold_origin(s2));
  Vec y(2);
  y << (1.0 - 1e-6) * M_PI, 0.0;
  CHECK_THROWS_AS(ctx.velocity(y, 0.1), ChartOverflow);
  CHECK_THROWS_AS(ctx.grad_bundle(y, 0.1), ChartOverflow);
  y << 0.95 * M_PI, 0.0;
  CHECK_NOTHROW(ctx.velocity(y, 0.1));

  Manifold h2 = Manifold::hyperboloid(2);
  FieldParams ph = random_field(rng, h2, FieldMode::AmbientProjected);
  ChartContext ch(ph, manifold_origin(h2));
  Vec yh(2);
  yh << 50.0, 0.0;
  CHECK_NOTHROW(ch.velocity(yh, 0.1));
}

TEST_CASE("chart trace equals the jacobian trace and diagonal FDs") {
  Rng rng = make_rng(55);
  for (auto m : {Manifold::hyperboloid(2), Manifold::sphere(2), Manifold::hyperboloid(3)}) {
    FieldParams p = random_field(rng, m, FieldMode::AmbientProjected);
    ManifoldPoint anchor = random_point(rng, m, 0.8);
    ChartContext ctx(p, anchor);
    for (int k = 0; k < 5; ++k) {
      Vec y(m.dim);
      for (int i = 0; i < m.dim; ++i) y[i] = 0.6 * normal01(rng);
      double t = uniform01(rng);
      Vec g;
      double trace;
      ctx.velocity_and_trace(y, t, g, trace);

      // divergence identity vs direct jacobian trace: two different formulas
      ChartContext::GradBundle b = ctx.grad_bundle(y, t);
      CHECK(oracle::rel_err(b.dg_dy.trace(), trace, 1e-9) < 1e-9);
      CHECK(oracle::rel_err(b.trace, trace, 1e-14) < 1e-14);

      // and vs summed diagonal finite differences of the velocity
      double h = 1e-5;
      double diag = 0.0;
      for (int i = 0; i < m.dim; ++i) {
        Vec yp = y, ym = y;
        yp[i] += h;
        ym[i] -= h;
        diag += (ctx.velocity(yp, t)(i) - ctx.velocity(ym, t)(i)) / (2.0 * h);
      }
      CHECK(oracle::rel_err(trace, diag, 1e-8) < 1e-5);
    }
  }
}

TEST_CASE("chart gradient bundle against finite differences") {
  Rng rng = make_rng(56);
  for (auto m : {Manifold::hyperboloid(2), Manifold::sphere(2)}) {
    for (int mode_i = 0; mode_i < (m.kind == ManifoldKind::Hyperboloid ? 2 : 1); ++mode_i) {
      FieldMode mode = mode_i == 0 ? FieldMode::AmbientProjected : FieldMode::TangentDirect;
      FieldParams p = random_field(rng, m, mode);
      ManifoldPoint anchor =
          mode == FieldMode::TangentDirect ? manifold_origin(m) : random_point(rng, m, 0.9);
      ChartContext ctx(p, anchor);
      for (int k = 0; k < 4; ++k) {
        Vec y(m.dim);
        for (int i = 0; i < m.dim; ++i) y[i] = 0.7 * normal01(rng);
        double t = uniform01(rng);
        ChartContext::GradBundle b = ctx.grad_bundle(y, t);

        Mat Jfd = oracle::fd_jacobian([&](const Vec& yy) { return ctx.velocity(yy, t); }, y, 1e-6);
        CHECK(frob_rel(b.dg_dy, Jfd) < 1e-6);

        Vec gfd = oracle::fd_grad(
            [&](const Vec& yy) {
              Vec gg;
              double tt;
              ctx.velocity_and_trace(yy, t, gg, tt);
              return tt;
            },
            y, 1e-5);
        CHECK((b.dtrace_dy - gfd).norm() / std::max(gfd.norm(), 1e-10) < 1e-4);
      }
    }
  }
}

TEST_CASE("chart boundary terms: logdet and its gradient") {
  Rng rng = make_rng(57);
  for (auto m : {Manifold::hyperboloid(2), Manifold::sphere(2), Manifold::hyperboloid(4)}) {
    FieldParams p = random_field(rng, m, FieldMode::AmbientProjected);
    ManifoldPoint anchor = random_point(rng, m, 1.0);
    ChartContext ctx(p, anchor);
    for (double r : {1e-9, 1e-4, 0.05, 0.09999, 0.10001, 0.5, 1.7, 2.9}) {
      Vec y(m.dim);
      for (int i = 0; i < m.dim; ++i) y[i] = normal01(rng);
      y *= r / y.norm();
      if (m.kind == ManifoldKind::Sphere && r > 2.9) continue;
      CHECK(oracle::rel_err(ctx.boundary_logdet(y),
                            logdet_exp(TangentVector{anchor, Vec(ctx.frame() * y)}),
                            1e-14) < 1e-12);
      Vec w = ctx.boundary_w(y);
      if (r >= 1e-4) {
        Vec wfd = oracle::fd_grad([&](const Vec& yy) { return ctx.boundary_logdet(yy); }, y, 1e-6);
        CHECK((w - wfd).norm() / std::max(wfd.norm(), 1e-12) < 1e-5);
      } else {
        CHECK(w.norm() <= 1e-4);  // w ~ (n-1) y / 3
      }
    }
  }
}

TEST_CASE("chart parameter contractions match finite differences") {
  Rng rng = make_rng(58);
  for (auto m : {Manifold::hyperboloid(2), Manifold::sphere(2)}) {
    for (int mode_i = 0; mode_i < (m.kind == ManifoldKind::Hyperboloid ? 2 : 1); ++mode_i) {
      FieldMode mode = mode_i == 0 ? FieldMode::AmbientProjected : FieldMode::TangentDirect;
      FieldParams p = random_field(rng, m, mode, 6, 3);
      ManifoldPoint anchor =
          mode == FieldMode::TangentDirect ? manifold_origin(m) : random_point(rng, m, 0.8);
      ChartContext ctx(p, anchor);
      Vec y(m.dim);
      for (int i = 0; i < m.dim; ++i) y[i] = 0.5 * normal01(rng);
      double t = 0.55;
      Vec a(m.dim);
      for (int i = 0; i < a.size(); ++i) a[i] = normal01(rng);

      for (double lam : {0.0, 1.0, -0.7}) {
        Vec grad = Vec::Zero(p.param_count());
        ctx.vjp_theta(y, t, a, lam, 1.0, grad);

        Vec flat = p.flatten();
        FieldParams q = p;
        Vec fd(p.param_count());
        for (int k = 0; k < flat.size(); ++k) {
          Vec fp = flat, fm = flat;
          fp[k] += 1e-5;
          fm[k] -= 1e-5;
          auto value = [&](const Vec& fl) {
            q.unflatten(fl);
            ChartContext c2(q, anchor);
            Vec gg;
            double tt;
            c2.velocity_and_trace(y, t, gg, tt);
            return a.dot(gg) + lam * tt;
          };
          fd[k] = (value(fp) - value(fm)) / 2e-5;
        }
        double tol = lam == 0.0 ? 1e-5 : 1e-4;
        CHECK((grad - fd).norm() / std::max(fd.norm(), 1e-10) < tol);
      }
    }
  }
}

TEST_CASE("segment velocity scale multiplies everything uniformly") {
  Manifold s2 = Manifold::sphere(2);
  Rng rng = make_rng(59);
  FieldParams p = random_field(rng, s2, FieldMode::AmbientProjected);
  ManifoldPoint anchor = random_point(rng, s2, 0.7);
  ChartContext full(p, anchor);
  ChartContext half(p, anchor);
  half.scale = 0.5;
  Vec y(2);
  y << 0.4, -0.9;
  double t = 0.33;

  Vec g1, g2;
  double t1, t2;
  full.velocity_and_trace(y, t, g1, t1);
  half.velocity_and_trace(y, t, g2, t2);
  CHECK((0.5 * g1 - g2).norm() < 1e-15);
  CHECK(std::abs(0.5 * t1 - t2) < 1e-15);

  auto b1 = full.grad_bundle(y, t);
  auto b2 = half.grad_bundle(y, t);
  CHECK((0.5 * b1.dg_dy - b2.dg_dy).norm() < 1e-15);
  CHECK((0.5 * b1.dtrace_dy - b2.dtrace_dy).norm() < 1e-15);

  Vec a(2);
  a << 1.0, -2.0;
  Vec gr1 = Vec::Zero(p.param_count());
  Vec gr2 = Vec::Zero(p.param_count());
  full.vjp_theta(y, t, a, 0.8, 1.0, gr1);
  half.vjp_theta(y, t, a, 0.8, 1.0, gr2);
  CHECK((0.5 * gr1 - gr2).norm() < 1e-15 * std::max(1.0, gr1.norm()));
}

TEST_CASE("spec-level chart pullback wrapper") {
  Manifold h2 = Manifold::hyperboloid(2);
  Rng rng = make_rng(60);
  FieldParams p = random_field(rng, h2, FieldMode::AmbientProjected);
  ManifoldPoint anchor = random_point(rng, h2, 1.0);
  Vec y(2);
  y << 0.3, 0.2;
  ChartContext ctx(p, anchor);
  CHECK((chart_pullback_dynamics(p, anchor, y, 0.7) - ctx.velocity(y, 0.7)).norm() == 0.0);
}

TEST_CASE("time enters as a raw appended coordinate") {
  Manifold s2 = Manifold::sphere(2);
  Rng rng = make_rng(61);
  FieldParams p = random_field(rng, s2, FieldMode::AmbientProjected);
  ManifoldPoint z = random_point(rng, s2, 1.0);
  // field at t equals the raw network read at input (z, t), projected
  for (double t : {0.0, 0.5, 3.7, -2.0}) {
    Vec m = mlp_forward(p, to_input(z.x, t));
    Vec want = tangent_project(z, m).v;
    CHECK((field_eval(p, z, t).v - want).norm() == 0.0);
  }
}
