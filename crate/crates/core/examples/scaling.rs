//! Build time, solve time and peak map storage across mesh levels.

use std::sync::Arc;
use std::time::Instant;

use hdd_core::hdd::{self, BuildOptions};
use hdd_core::{CoefficientField, DDTree, Mesh, ToleranceSpec};

fn main() -> hdd_core::Result<()> {
    println!("level n build_ms solve_ms peak_bytes");
    for level in 3..=7 {
        let mesh = Mesh::new(level)?;
        let tree = Arc::new(DDTree::new(&mesh));
        let kappa = CoefficientField::constant(&mesh, 1.0)?;
        let f = vec![1.0; mesh.node_count()];
        let g = vec![0.0; tree.root().idx_boundary.len()];
        let opts = BuildOptions::default().compressed(ToleranceSpec::default());

        let t = Instant::now();
        let store = hdd::leaves_to_root(&tree, &mesh, &kappa, &opts)?;
        let build = t.elapsed().as_secs_f64() * 1e3;
        let t = Instant::now();
        hdd::root_to_leaves(&store, &f, &g)?;
        let solve = t.elapsed().as_secs_f64() * 1e3;
        println!("{level} {} {build:.1} {solve:.2} {}", mesh.node_count(), store.peak_bytes());
    }
    Ok(())
}
