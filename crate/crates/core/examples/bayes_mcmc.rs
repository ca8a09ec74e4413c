//! Random-walk Metropolis on two regional log-coefficients.

use hdd_core::bayes::{self, BayesProblem, ChainSpec, ForwardModel, ForwardPath, Prior, PriorComponent};
use hdd_core::{functionals, Mesh};

fn main() -> hdd_core::Result<()> {
    let mesh = Mesh::new(3)?;
    let g = vec![0.0; 4 * (mesh.nodes_per_side() - 1)];
    let forward = ForwardModel::new(mesh.clone(), 2, vec![1.0; mesh.node_count()], g)?;
    let requests = functionals::mean_per_subdomain(&forward.tree, 3)?;
    let z_true = [0.3, -0.2];
    let model = bayes::synthetic_observations(&forward, requests, &z_true, 0.01, 13)?;
    let prior = Prior::iid(PriorComponent::Uniform { lo: -1.0, hi: 1.0 }, 2)?;
    let problem = BayesProblem::new(forward, prior, model)?;

    let spec = ChainSpec { length: 8000, burn_in: 1000, thin: 1, scale: 0.01, seed: 13 };
    let chain = problem.posterior_mcmc(&spec, &[0.0, 0.0], ForwardPath::Functionals)?;
    println!("true {z_true:?}");
    println!("mean {:.4?}, sd {:.4?}", chain.mean(), chain.std_dev());
    println!("acceptance rate {:.2}", chain.acceptance_rate);
    Ok(())
}
