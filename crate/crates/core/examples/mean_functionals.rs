//! Subdomain means and point values from the upward pass alone, for a
//! nodal load and for a fixed load basis.

use std::sync::Arc;

use hdd_core::functionals::{self, FunctionalRequest};
use hdd_core::hdd::{self, BuildOptions, SolveMode};
use hdd_core::{oracle, CoefficientField, DDTree, Mesh};

fn main() -> hdd_core::Result<()> {
    let mesh = Mesh::new(6)?;
    let tree = Arc::new(DDTree::new(&mesh));
    let kappa = CoefficientField::from_fn(&mesh, |x, y| 1.0 + 0.5 * (6.0 * x).sin() * (4.0 * y).cos())?;
    let f = mesh.nodal(|x, y| 1.0 + x - y);
    let g = vec![0.0; tree.root().idx_boundary.len()];

    let mut requests = functionals::mean_per_subdomain(&tree, 4)?;
    requests.push(FunctionalRequest::Point(mesh.node_index(20, 40)));

    let values = functionals::evaluate(&tree, &mesh, &kappa, requests.clone(), None, &f, &g)?;

    let opts = BuildOptions::new(SolveMode::FunctionalsOnly)
        .with_functionals(requests.clone())
        .with_fixed_loads(vec![vec![1.0; mesh.node_count()], mesh.nodal(|x, _| x), mesh.nodal(|_, y| y)]);
    let fixed = hdd::leaves_to_root(&tree, &mesh, &kappa, &opts)?;
    let from_basis = fixed.evaluate_fixed(&[1.0, 1.0, -1.0], &g)?;

    let u = oracle::direct_solve(&mesh, &kappa, &f, &g)?;
    let mut worst = 0.0f64;
    for ((req, a), b) in requests.iter().zip(&values).zip(&from_basis) {
        let direct = match *req {
            FunctionalRequest::Mean(id) => oracle::direct_mean(&mesh, &u, &tree.region(id))?,
            FunctionalRequest::Point(p) => u[p],
        };
        worst = worst.max((a - direct).abs()).max((b - direct).abs());
    }
    println!("{} functionals, max error against direct solve {worst:.2e}", requests.len());
    println!("first means: {:.6?}", &values[..4]);
    Ok(())
}
