//! Low-rank compression of the interface maps: storage per depth and the
//! effect of the truncation tolerance on the solution.

use std::sync::Arc;

use hdd_core::hdd::{self, BuildOptions};
use hdd_core::lowrank;
use hdd_core::{CoefficientField, DDTree, Mesh, ToleranceSpec};

fn main() -> hdd_core::Result<()> {
    let mesh = Mesh::new(6)?;
    let tree = Arc::new(DDTree::new(&mesh));
    let kappa = CoefficientField::constant(&mesh, 1.0)?;
    let f = vec![1.0; mesh.node_count()];
    let g = vec![0.0; tree.root().idx_boundary.len()];

    let exact_store = hdd::leaves_to_root(&tree, &mesh, &kappa, &BuildOptions::default())?;
    let exact = hdd::root_to_leaves(&exact_store, &f, &g)?;
    let scale = exact.iter().fold(0.0f64, |m, v| m.max(v.abs()));

    for eps in [1e-2, 1e-4, 1e-6, 1e-8] {
        let spec = ToleranceSpec::with_eps(eps);
        let store = hdd::leaves_to_root(&tree, &mesh, &kappa, &BuildOptions::default().compressed(spec))?;
        let u = hdd::root_to_leaves(&store, &f, &g)?;
        let err = u.iter().zip(&exact).fold(0.0f64, |m, (a, b)| m.max((a - b).abs())) / scale;
        let (dense, packed) = store
            .stats()
            .iter()
            .fold((0, 0), |(d, c), s| (d + s.dense_bytes, c + s.compressed_bytes));
        println!("eps {eps:.0e}: rel err {err:.2e}, storage {packed} of {dense} bytes");
    }

    let psi = exact_store.root_psi().psi_g.to_dense();
    let pts: Vec<[f64; 2]> = tree.root().idx_boundary.iter().map(|i| mesh.coord(i)).collect();
    let block = lowrank::largest_admissible_block(&psi, &pts, &pts, 32).expect("boundary has admissible blocks");
    let sv = lowrank::singular_values(&block);
    let decay: Vec<String> = sv.iter().take(12).map(|s| format!("{:.1e}", s / sv[0])).collect();
    println!("{}x{} off-diagonal block of the root boundary map", block.nrows(), block.ncols());
    println!("relative singular values: {}", decay.join(" "));
    Ok(())
}
