// Serial against parallel execution of the OpenMP kernels.

#include <benchmark/benchmark.h>

#include "nlms/linearization.hpp"
#include "nlms/recovery.hpp"

using namespace nlms;

namespace {

Exec exec_of(const benchmark::State& st) { return st.range(0) == 0 ? Exec::Serial : Exec::Parallel; }

const Mesh& mesh() {
  static const Mesh m = build_mesh(32, 16);
  return m;
}

const FEOperator& op() {
  static const FEOperator o(mesh(), ProductManifold{});
  return o;
}

void BM_AssembleStiffness(benchmark::State& st) {
  for (auto _ : st) benchmark::DoNotOptimize(assemble_stiffness(mesh(), ProductManifold{}, exec_of(st)));
}

void BM_ApplyLAV(benchmark::State& st) {
  const NonlinearPotentials p = potential_preset("bump-AV").sample(mesh());
  CVec u(mesh().num_vertices());
  for (int i = 0; i < u.size(); ++i) u[i] = cplx(0.01 * std::sin(i), 0.01 * std::cos(i));
  const FEOperator& o = op();
  for (auto _ : st) benchmark::DoNotOptimize(apply_LAV(o, p, u, exec_of(st)));
}

void BM_BeamSample(benchmark::State& st) {
  const ProductManifold M;
  const Geodesic g = shoot_geodesic(M.transversal, Vec2(0.1, -0.2), Vec2(1.0, 0.3).normalized());
  const GaussianBeam b(g, M);
  for (auto _ : st) benchmark::DoNotOptimize(b.sample(mesh(), 16.0, exec_of(st)));
}

void BM_StationaryPhase(benchmark::State& st) {
  StationaryPhaseOptions opt;
  opt.exec = exec_of(st);
  for (auto _ : st)
    benchmark::DoNotOptimize(rough_stationary_phase([](const Vec2& z) { return 0.5 * z.squaredNorm(); },
                                                    [](const Vec2&) { return 1.0; }, {8, 16, 32, 64}, opt));
}

void BM_DirectionalMoment(benchmark::State& st) {
  const ProductManifold M;
  const Geodesic d1 = shoot_geodesic(M.transversal, Vec2::Zero(), Vec2(1, 0));
  const Geodesic d2 = shoot_geodesic(M.transversal, Vec2::Zero(), Vec2(0, 1));
  const OneFormField A = [](const Vec3& x) -> Eigen::Vector3cd {
    return (smooth_bump(x, Vec3::Zero(), 0.9) * Vec3(0.5, 1.0, -0.7)).cast<cplx>();
  };
  MomentOptions opt;
  opt.s_list = {64};
  opt.exec = exec_of(st);
  for (auto _ : st) benchmark::DoNotOptimize(directional_moment(A, M, d1, d2, 1.0, -1.0, 2.0, opt));
}

void BM_ThirdLinearization(benchmark::State& st) {
  const NonlinearPotentials p = potential_preset("cubic").sample(mesh());
  std::vector<CVec> fs(3, CVec::Zero(mesh().num_boundary()));
  for (int k = 0; k < mesh().num_boundary(); ++k) {
    const Vec3& x = mesh().vertices[static_cast<std::size_t>(mesh().boundary_vertices[static_cast<std::size_t>(k)])];
    fs[0][k] = x.x();
    fs[1][k] = x.y() + 0.5;
    fs[2][k] = 1.0 + 0.5 * x.z();
  }
  LinearizeOptions opt;
  opt.exec = exec_of(st);
  const FEOperator& o = op();
  for (auto _ : st) benchmark::DoNotOptimize(multilinearize_dn(o, p, fs, 3, opt));
}

}  // namespace

// Argument 0 runs the serial reference, 1 the OpenMP path.
BENCHMARK(BM_AssembleStiffness)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_ApplyLAV)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_BeamSample)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_StationaryPhase)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_DirectionalMoment)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond);
BENCHMARK(BM_ThirdLinearization)->Arg(0)->Arg(1)->Unit(benchmark::kMillisecond)->Iterations(2);

BENCHMARK_MAIN();
