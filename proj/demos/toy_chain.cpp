// Runs APM MI+MH and PM-MH on the 5-D Gaussian toy and prints acceptance,
// cost and the ESS of theta_1 for each.
//
//   toy_chain [n_iters] [sigma]

#include <cstdlib>
#include <iostream>
#include <string>
#include <vector>

#include "apm/diagnostics.hpp"
#include "apm/estimators.hpp"
#include "apm/kernels.hpp"

int main(int argc, char** argv) {
  const std::size_t n_iters = argc > 1 ? std::stoul(argv[1]) : 20000;
  const double sigma = argc > 2 ? std::stod(argv[2]) : 0.85;

  apm::ToyGaussianEstimator est;
  for (const char* name : {"apm-mi+mh", "pm-mh"}) {
    apm::KernelConfig cfg;
    cfg.spec = *apm::KernelSpec::parse(name);
    cfg.proposal.sigma = {sigma};
    apm::Kernel kernel(est, cfg);

    const auto seeds = apm::chain_seeds(7, 0);
    apm::KernelRng rng(seeds.kernel);
    auto state = apm::initialize_state(est, std::vector<double>(5, 0.0),
                                       apm::RandomDb(apm::BaseSpace::StandardNormal, seeds.db));

    apm::RunOptions opts;
    opts.n_iters = n_iters;
    opts.burn_in = n_iters / 10;
    std::vector<double> theta1;
    const auto sum = apm::run_chain(kernel, state, opts, rng, [&](const apm::TraceRecord& r) { theta1.push_back(r.theta[0]); });

    std::cout << name << ": theta acceptance " << sum.theta_acceptance() << ", "
              << double(sum.total_evals) / double(sum.iterations) << " evals/iter";
    if (theta1.size() >= 100) std::cout << ", ESS(theta_1) " << apm::diag::ess(theta1).ess << " of " << theta1.size();
    std::cout << '\n';
  }
  return EXIT_SUCCESS;
}
