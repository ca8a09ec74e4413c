//! Posterior of a single log-coefficient on a grid, with synthetic
//! subdomain-mean observations.

use hdd_core::bayes::{self, BayesProblem, ForwardModel, ForwardPath, GridSpec, Prior, PriorComponent};
use hdd_core::{functionals, Mesh};

fn main() -> hdd_core::Result<()> {
    let mesh = Mesh::new(4)?;
    let g = vec![0.0; 4 * (mesh.nodes_per_side() - 1)];
    let forward = ForwardModel::new(mesh.clone(), 1, vec![1.0; mesh.node_count()], g)?;
    let requests = functionals::mean_per_subdomain(&forward.tree, 3)?;
    let model = bayes::synthetic_observations(&forward, requests, &[0.3], 0.01, 11)?;
    let prior = Prior::iid(PriorComponent::Uniform { lo: -1.0, hi: 1.0 }, 1)?;
    let problem = BayesProblem::new(forward, prior, model)?;

    let post = problem.posterior_grid(&GridSpec::uniform(1, -1.0, 1.0, 101), ForwardPath::Functionals)?;
    println!("mode {:.3}, mean {:.4}", post.mode[0], post.mean()[0]);
    println!("log evidence {:.3}, integral {:.6}", post.log_evidence, post.integral());
    Ok(())
}
