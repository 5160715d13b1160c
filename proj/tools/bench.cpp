// Benchmark of the OpenMP row kernels against the plain serial reference.
// Builds a random trivalent model, simulates data, and times loglik and EM
// sweeps at 1 thread and at the current thread limit.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <string>

#include "arbor/models.hpp"
#include "arbor/parallel.hpp"
#include "arbor/rng.hpp"
#include "arbor/structure.hpp"

using namespace arbor;

namespace {

LeafLabeledTree random_trivalent(int m, Rng& rng) {
  std::vector<Edge> edges = {Edge(1, m + 1), Edge(2, m + 1), Edge(3, m + 1)};
  int next = m + 2;
  for (int leaf = 4; leaf <= m; ++leaf) {
    std::uniform_int_distribution<std::size_t> pick(0, edges.size() - 1);
    const Edge e = edges[pick(rng)];
    const int mid = next++;
    edges.erase(std::find(edges.begin(), edges.end(), e));
    edges.emplace_back(e.u, mid);
    edges.emplace_back(e.v, mid);
    edges.emplace_back(leaf, mid);
  }
  return LeafLabeledTree::make(m, std::move(edges));
}

double time_ms(const std::function<void()>& fn) {
  const auto t0 = std::chrono::steady_clock::now();
  fn();
  const auto t1 = std::chrono::steady_clock::now();
  return std::chrono::duration<double, std::milli>(t1 - t0).count();
}

void set_threads(int k) {
  setenv("ARBOR_THREADS", std::to_string(k).c_str(), 1);
}

}  // namespace

int main(int argc, char** argv) {
  long n = argc > 1 ? std::atol(argv[1]) : 200000;
  const int m = 10;
  Rng rng = make_rng(17, "bench");

  const LeafLabeledTree tree = random_trivalent(m, rng);
  GaussianParams gp = random_gaussian_params(tree, {}, rng);
  MarkovParams mp = random_markov_params(tree, 3, rng);

  const int max_threads = thread_limit();
  std::printf("bench: m=%d n=%ld threads=%d\n", m, n, max_threads);

  set_threads(max_threads);
  const Dataset gdata = simulate(gp, n, 7);
  const Dataset mdata = simulate(mp, n, 7);

  const auto report = [&](const char* name, double serial_ms, double par_ms) {
    std::printf("%-22s serial %8.1f ms   parallel %8.1f ms   speedup %.2fx\n", name, serial_ms,
                par_ms, serial_ms / par_ms);
  };

  {
    double ref = 0, par = 0;
    const double t_ref = time_ms([&] { ref = loglik_serial(gp, gdata); });
    const double t_par = time_ms([&] { par = loglik(gp, gdata); });
    report("gaussian loglik", t_ref, t_par);
    if (ref != par) std::printf("  MISMATCH: %.17g vs %.17g\n", ref, par);
  }
  {
    double ref = 0, par = 0;
    const double t_ref = time_ms([&] { ref = loglik_serial(mp, mdata); });
    const double t_par = time_ms([&] { par = loglik(mp, mdata); });
    report("markov loglik", t_ref, t_par);
    if (ref != par) std::printf("  MISMATCH: %.17g vs %.17g\n", ref, par);
  }
  {
    EmOptions em;
    em.max_iter = 2;
    em.restarts = 1;
    set_threads(1);
    const double t1 = time_ms([&] { (void)em_fixed_tree(tree, mdata, mp, em); });
    set_threads(max_threads);
    const double tk = time_ms([&] { (void)em_fixed_tree(tree, mdata, mp, em); });
    report("markov EM (2 sweeps)", t1, tk);
  }
  {
    EmOptions em;
    em.max_iter = 2;
    em.restarts = 1;
    set_threads(1);
    const double t1 = time_ms([&] { (void)em_fixed_tree(tree, gdata, gp, em); });
    set_threads(max_threads);
    const double tk = time_ms([&] { (void)em_fixed_tree(tree, gdata, gp, em); });
    report("gaussian EM (2 sweeps)", t1, tk);
  }
  {
    set_threads(1);
    const double t1 = time_ms([&] { (void)simulate(mp, n, 11); });
    set_threads(max_threads);
    const double tk = time_ms([&] { (void)simulate(mp, n, 11); });
    report("markov simulate", t1, tk);
  }
  return 0;
}
