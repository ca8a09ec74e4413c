//! Command-line front end: run configuration and the `hdd` subcommands.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Instant;

use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bayes::{
    self, BayesProblem, ChainSpec, ForwardModel, ForwardPath, GridSpec, Prior, PriorComponent,
};
use crate::ddtree::DDTree;
use crate::error::{HddError, Result};
use crate::fem::CoefficientField;
use crate::functionals::{self, FunctionalRequest};
use crate::hdd::{self, BuildOptions, MapStore, SolveMode};
use crate::lowrank::ToleranceSpec;
use crate::mesh::{self, IndexSet, Mesh};
use crate::oracle;

#[derive(Debug, Parser)]
#[command(
    name = "hdd",
    version,
    about = "Hierarchical domain decomposition solver"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Option<Command>,
    /// TOML run configuration; defaults are used for missing keys.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads; 0 picks the number of cores.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
    /// Compare against the direct solver and write a report.
    #[arg(long, global = true)]
    pub check_oracle: bool,
    /// Print the resolved configuration as TOML and exit.
    #[arg(long, global = true)]
    pub print_config: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Full solve on the whole domain.
    Solve,
    /// Solve on one subdomain keeping only the maps on its path.
    Subdomain,
    /// Subdomain means and skeleton values without forming the solution.
    Functionals,
    /// Grid posterior for one or two parameters.
    BayesGrid,
    /// Random-walk Metropolis posterior.
    BayesMcmc,
    /// Build and solve timings over a range of levels.
    Scaling,
}

/// Closed-form nodal data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Expression {
    Zero,
    One,
    X1,
    X2,
    X1X2,
    /// `sin(πx₁) sin(πx₂)`.
    SineProduct,
    /// `2π² sin(πx₁) sin(πx₂)`.
    SineSource,
    /// `exp(−20 |x − (½, ½)|²)`.
    Bump,
}

impl Expression {
    pub fn eval(self, x: f64, y: f64) -> f64 {
        use std::f64::consts::PI;
        match self {
            Self::Zero => 0.0,
            Self::One => 1.0,
            Self::X1 => x,
            Self::X2 => y,
            Self::X1X2 => x * y,
            Self::SineProduct => (PI * x).sin() * (PI * y).sin(),
            Self::SineSource => 2.0 * PI * PI * (PI * x).sin() * (PI * y).sin(),
            Self::Bump => (-20.0 * ((x - 0.5).powi(2) + (y - 0.5).powi(2))).exp(),
        }
    }
}

/// Nodal data: right-hand side or boundary values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum DataSpec {
    Constant {
        value: f64,
    },
    Expression {
        name: Expression,
    },
    /// Whitespace-separated nodal values on the mesh of `level`, prolonged bilinearly.
    Coarse {
        path: PathBuf,
        level: u32,
    },
}

impl DataSpec {
    pub fn nodal(&self, mesh: &Mesh) -> Result<Vec<f64>> {
        match self {
            Self::Constant { value } => Ok(vec![*value; mesh.node_count()]),
            Self::Expression { name } => Ok(mesh.nodal(|x, y| name.eval(x, y))),
            Self::Coarse { path, level } => {
                let coarse = read_values(path)?;
                mesh::prolong_bilinear(*level, &coarse, mesh)
            }
        }
    }
}

fn read_values(path: &Path) -> Result<Vec<f64>> {
    let text = fs::read_to_string(path)
        .map_err(|e| HddError::Config(format!("cannot read {}: {e}", path.display())))?;
    text.lines()
        .filter(|l| !l.trim_start().starts_with('#'))
        .flat_map(str::split_whitespace)
        .map(|t| {
            t.parse::<f64>()
                .map_err(|e| HddError::Parse(format!("{}: {t:?}: {e}", path.display())))
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum CoefficientSpec {
    Constant {
        value: f64,
    },
    Checkerboard {
        blocks: usize,
        values: [f64; 2],
    },
    /// Log-uniform per-triangle values on `[lo, hi]`, drawn from the run seed.
    Random {
        lo: f64,
        hi: f64,
    },
    /// `exp(z_i)` on the tree regions at depth `log2(len z)`.
    Parametrized {
        z: Vec<f64>,
    },
}

impl CoefficientSpec {
    pub fn field(&self, mesh: &Mesh, tree: &DDTree, seed: u64) -> Result<CoefficientField> {
        match self {
            Self::Constant { value } => CoefficientField::constant(mesh, *value),
            Self::Checkerboard { blocks, values } => {
                CoefficientField::checkerboard(mesh, *blocks, *values)
            }
            Self::Random { lo, hi } => CoefficientField::random_log_uniform(mesh, *lo, *hi, seed),
            Self::Parametrized { z } => bayes::ParamField::new(mesh, tree, z.len())?.kappa(z),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompressionConfig {
    pub enabled: bool,
    pub eps: f64,
    pub k_max: usize,
    pub n_min: usize,
}

impl Default for CompressionConfig {
    fn default() -> Self {
        let t = ToleranceSpec::default();
        Self {
            enabled: false,
            eps: t.eps,
            k_max: t.k_max,
            n_min: t.n_min,
        }
    }
}

impl CompressionConfig {
    pub fn spec(&self) -> Result<Option<ToleranceSpec>> {
        if !self.enabled {
            return Ok(None);
        }
        let t = ToleranceSpec {
            eps: self.eps,
            k_max: self.k_max,
            n_min: self.n_min,
        };
        t.validate()?;
        Ok(Some(t))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("hdd-out"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SubdomainConfig {
    /// Son choices from the root, e.g. `"011"`.
    pub path: String,
}

impl Default for SubdomainConfig {
    fn default() -> Self {
        Self { path: "01".into() }
    }
}

impl SubdomainConfig {
    pub fn choices(&self) -> Result<Vec<u8>> {
        self.path
            .chars()
            .map(|c| match c {
                '0' => Ok(0),
                '1' => Ok(1),
                _ => Err(HddError::Config(format!(
                    "subdomain path {:?} must contain only 0 and 1",
                    self.path
                ))),
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FunctionalsConfig {
    /// Means on every subdomain of this depth, values on the skeleton above it.
    pub depth: usize,
    /// Extra point observations, snapped to the nearest mesh node.
    pub points: Vec<[f64; 2]>,
}

impl Default for FunctionalsConfig {
    fn default() -> Self {
        Self {
            depth: 2,
            points: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BayesConfig {
    pub z_true: Vec<f64>,
    /// Noise standard deviation as a fraction of the range of the clean data.
    pub noise_frac: f64,
    /// Observations are the means on the subdomains of this depth.
    pub obs_depth: usize,
    pub prior: PriorComponent,
    pub path: ForwardPath,
    pub grid_lo: f64,
    pub grid_hi: f64,
    pub grid_n: usize,
    pub chain_length: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub proposal_scale: f64,
    /// Prior draws timed on both likelihood paths.
    pub timing_batch: usize,
}

impl Default for BayesConfig {
    fn default() -> Self {
        Self {
            z_true: vec![0.3],
            noise_frac: 0.01,
            obs_depth: 3,
            prior: PriorComponent::Uniform { lo: -1.0, hi: 1.0 },
            path: ForwardPath::Functionals,
            grid_lo: -1.0,
            grid_hi: 1.0,
            grid_n: 101,
            chain_length: 4000,
            burn_in: 500,
            thin: 1,
            proposal_scale: 0.05,
            timing_batch: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScalingConfig {
    pub levels: Vec<u32>,
    pub compressed: bool,
}

impl Default for ScalingConfig {
    fn default() -> Self {
        Self {
            levels: vec![3, 4, 5, 6],
            compressed: true,
        }
    }
}

/// Complete run configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub level: u32,
    pub seed: u64,
    pub threads: usize,
    pub coefficient: CoefficientSpec,
    pub rhs: DataSpec,
    pub boundary: DataSpec,
    pub compression: CompressionConfig,
    pub output: OutputConfig,
    pub subdomain: SubdomainConfig,
    pub functionals: FunctionalsConfig,
    pub bayes: BayesConfig,
    pub scaling: ScalingConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            level: 4,
            seed: 0,
            threads: 0,
            coefficient: CoefficientSpec::Constant { value: 1.0 },
            rhs: DataSpec::Constant { value: 1.0 },
            boundary: DataSpec::Constant { value: 0.0 },
            compression: CompressionConfig::default(),
            output: OutputConfig::default(),
            subdomain: SubdomainConfig::default(),
            functionals: FunctionalsConfig::default(),
            bayes: BayesConfig::default(),
            scaling: ScalingConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| HddError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| HddError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| HddError::Internal(e.to_string()))
    }

    pub fn validate(&self) -> Result<()> {
        if !(mesh::MIN_LEVEL..=mesh::MAX_LEVEL).contains(&self.level) {
            return Err(HddError::Config(format!(
                "level {} outside [{}, {}]",
                self.level,
                mesh::MIN_LEVEL,
                mesh::MAX_LEVEL
            )));
        }
        self.compression.spec()?;
        self.subdomain.choices()?;
        let b = &self.bayes;
        if !(b.noise_frac > 0.0) || b.grid_n < 2 || !(b.grid_lo < b.grid_hi) || b.thin == 0 {
            return Err(HddError::Config(
                "bayes section has out-of-range values".into(),
            ));
        }
        for l in &self.scaling.levels {
            if !(mesh::MIN_LEVEL..=mesh::MAX_LEVEL).contains(l) {
                return Err(HddError::Config(format!("scaling level {l} out of range")));
            }
        }
        for src in [&self.rhs, &self.boundary] {
            if let DataSpec::Coarse { path, .. } = src {
                if !path.exists() {
                    return Err(HddError::Config(format!(
                        "data file {} does not exist",
                        path.display()
                    )));
                }
            }
        }
        Ok(())
    }
}

/// What a command produced.
#[derive(Debug, Clone, Default)]
pub struct Summary {
    pub lines: Vec<String>,
    pub files: Vec<PathBuf>,
}

impl Summary {
    fn say(&mut self, line: impl Into<String>) {
        self.lines.push(line.into());
    }

    fn write(&mut self, dir: &Path, name: &str, contents: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        let p = dir.join(name);
        fs::write(&p, contents)?;
        self.files.push(p);
        Ok(())
    }
}

/// Mesh, tree and data of one run.
pub struct Problem {
    pub mesh: Mesh,
    pub tree: Arc<DDTree>,
    pub kappa: CoefficientField,
    pub f: Vec<f64>,
    pub g: Vec<f64>,
}

impl Problem {
    pub fn from_config(cfg: &RunConfig) -> Result<Self> {
        Self::at_level(cfg, cfg.level)
    }

    pub fn at_level(cfg: &RunConfig, level: u32) -> Result<Self> {
        let mesh = Mesh::new(level)?;
        let tree = Arc::new(DDTree::new(&mesh));
        let kappa = cfg.coefficient.field(&mesh, &tree, cfg.seed)?;
        let f = cfg.rhs.nodal(&mesh)?;
        let g = hdd::boundary_values(&tree, &cfg.boundary.nodal(&mesh)?);
        Ok(Self {
            mesh,
            tree,
            kappa,
            f,
            g,
        })
    }

    fn build(&self, opts: &BuildOptions) -> Result<MapStore> {
        hdd::leaves_to_root(&self.tree, &self.mesh, &self.kappa, opts)
    }
}

fn rel_linf(a: &[f64], reference: &[f64]) -> f64 {
    let err = a
        .iter()
        .zip(reference)
        .fold(0.0f64, |m, (x, y)| m.max((x - y).abs()));
    let scale = reference.iter().fold(0.0f64, |m, y| m.max(y.abs()));
    if scale > 0.0 {
        err / scale
    } else {
        err
    }
}

fn nodal_table(
    mesh: &Mesh,
    nodes: impl Iterator<Item = usize>,
    values: impl Iterator<Item = f64>,
) -> String {
    let mut s = String::from("index x1 x2 u\n");
    for (i, v) in nodes.zip(values) {
        let [x, y] = mesh.coord(i);
        let _ = writeln!(s, "{i} {x} {y} {v:.16e}");
    }
    s
}

fn storage_by_depth(store: &MapStore) -> String {
    let depth = store.tree().depth();
    let mut rows = vec![(0usize, 0usize, 0usize, 0usize); depth + 1];
    for st in store.stats() {
        let r = &mut rows[st.depth];
        r.0 += 1;
        r.1 += st.dense_bytes;
        r.2 += st.compressed_bytes;
        r.3 = r.3.max(st.max_rank);
    }
    let mut s = String::from("depth nodes dense_bytes compressed_bytes max_block_rank\n");
    for (d, r) in rows.iter().enumerate() {
        let _ = writeln!(s, "{d} {} {} {} {}", r.0, r.1, r.2, r.3);
    }
    s
}

pub fn cmd_solve(cfg: &RunConfig, check_oracle: bool) -> Result<Summary> {
    let p = Problem::from_config(cfg)?;
    let compression = cfg.compression.spec()?;
    let mut opts = BuildOptions::new(SolveMode::KeepPhiAll);
    opts.compression = compression;
    let store = p.build(&opts)?;
    let u = hdd::root_to_leaves(&store, &p.f, &p.g)?;
    let mut out = Summary::default();
    let dir = &cfg.output.dir;
    out.write(
        dir,
        "solution.txt",
        &nodal_table(&p.mesh, 0..u.len(), u.iter().copied()),
    )?;
    out.write(dir, "stats.txt", &store.stats_dump())?;
    if compression.is_some() {
        out.write(dir, "storage.txt", &storage_by_depth(&store))?;
    }
    out.say(format!(
        "solved level {} with {} nodes, peak map bytes {}",
        cfg.level,
        u.len(),
        store.peak_bytes()
    ));
    if check_oracle {
        let reference = oracle::direct_solve(&p.mesh, &p.kappa, &p.f, &p.g)?;
        let err = rel_linf(&u, &reference);
        out.write(dir, "report.txt", &format!("rel_linf_err\n{err:.6e}\n"))?;
        out.say(format!("rel_linf_err {err:.3e}"));
    }
    Ok(out)
}

pub fn cmd_subdomain(cfg: &RunConfig, check_oracle: bool) -> Result<Summary> {
    let p = Problem::from_config(cfg)?;
    let target = p.tree.node_by_path(&cfg.subdomain.choices()?)?;
    let mut opts = BuildOptions::new(SolveMode::KeepPhiPath(target));
    opts.compression = cfg.compression.spec()?;
    let store = p.build(&opts)?;
    let values = hdd::solve_subdomain(&store, target, &p.f, &p.g)?;
    let node = p.tree.node(target);
    let mut out = Summary::default();
    let dir = &cfg.output.dir;
    out.write(
        dir,
        "subdomain.txt",
        &nodal_table(&p.mesh, node.idx_omega.iter(), values.iter().copied()),
    )?;
    out.write(
        dir,
        "storage.txt",
        &format!(
            "retained_phi tree_nodes retained_phi_bytes\n{} {} {}\n",
            store.phi_count(),
            p.tree.len(),
            store.phi_bytes()
        ),
    )?;
    out.say(format!(
        "subdomain {} ({}) solved on {} nodes, {} of {} maps retained",
        cfg.subdomain.path,
        p.tree.region(target),
        values.len(),
        store.phi_count(),
        p.tree.len()
    ));
    if check_oracle {
        let reference = oracle::direct_solve(&p.mesh, &p.kappa, &p.f, &p.g)?;
        let restricted: Vec<f64> = node.idx_omega.iter().map(|i| reference[i]).collect();
        let err = rel_linf(&values, &restricted);
        out.write(dir, "report.txt", &format!("rel_linf_err\n{err:.6e}\n"))?;
        out.say(format!("rel_linf_err {err:.3e}"));
    }
    Ok(out)
}

/// Mesh nodes on the interfaces of all tree nodes above `depth`.
pub fn skeleton_nodes(tree: &DDTree, depth: usize) -> IndexSet {
    tree.nodes()
        .iter()
        .filter(|n| n.depth < depth)
        .flat_map(|n| n.idx_interface.iter())
        .collect()
}

fn snap(mesh: &Mesh, p: [f64; 2]) -> Result<usize> {
    if !(0.0..=1.0).contains(&p[0]) || !(0.0..=1.0).contains(&p[1]) {
        return Err(HddError::Config(format!(
            "point {p:?} lies outside the unit square"
        )));
    }
    let n = mesh.cells_per_side() as f64;
    Ok(mesh.node_index((p[0] * n).round() as usize, (p[1] * n).round() as usize))
}

pub fn cmd_functionals(cfg: &RunConfig, check_oracle: bool) -> Result<Summary> {
    let p = Problem::from_config(cfg)?;
    let depth = cfg.functionals.depth;
    let means = functionals::mean_per_subdomain(&p.tree, depth)?;
    let skeleton = skeleton_nodes(&p.tree, depth);
    let points: Vec<usize> = cfg
        .functionals
        .points
        .iter()
        .map(|&q| snap(&p.mesh, q))
        .collect::<Result<_>>()?;
    let mut requests = means.clone();
    requests.extend(skeleton.iter().map(FunctionalRequest::Point));
    requests.extend(points.iter().map(|&i| FunctionalRequest::Point(i)));
    let mut opts = BuildOptions::new(SolveMode::FunctionalsOnly).with_functionals(requests.clone());
    opts.compression = cfg.compression.spec()?;
    let store = p.build(&opts)?;
    let values = store.evaluate_functionals(&p.f, &p.g)?;
    let (mean_vals, rest) = values.split_at(means.len());
    let (skel_vals, point_vals) = rest.split_at(skeleton.len());

    let mut out = Summary::default();
    let dir = &cfg.output.dir;
    let mut s = String::from("node depth x0 x1 y0 y1 mean\n");
    for (r, v) in means.iter().zip(mean_vals) {
        if let FunctionalRequest::Mean(id) = *r {
            let b = p.tree.region(id);
            let _ = writeln!(
                s,
                "{id} {depth} {} {} {} {} {v:.16e}",
                b.x0, b.x1, b.y0, b.y1
            );
        }
    }
    out.write(dir, "means.txt", &s)?;
    out.write(
        dir,
        "skeleton.txt",
        &nodal_table(&p.mesh, skeleton.iter(), skel_vals.iter().copied()),
    )?;
    if !points.is_empty() {
        out.write(
            dir,
            "points.txt",
            &nodal_table(&p.mesh, points.iter().copied(), point_vals.iter().copied()),
        )?;
    }
    out.write(
        dir,
        "functionals_dump.txt",
        &functionals::dump(&p.tree, store.functionals()),
    )?;
    out.say(format!(
        "{} means at depth {depth}, {} skeleton values, {} points; solution allocations {}",
        means.len(),
        skeleton.len(),
        points.len(),
        hdd::solution_allocations()
    ));
    if check_oracle {
        let u = oracle::direct_solve(&p.mesh, &p.kappa, &p.f, &p.g)?;
        let mut err = 0.0f64;
        for (r, v) in requests.iter().zip(&values) {
            let exact = match *r {
                FunctionalRequest::Mean(id) => {
                    oracle::direct_mean(&p.mesh, &u, &p.tree.region(id))?
                }
                FunctionalRequest::Point(i) => u[i],
            };
            err = err.max((exact - v).abs());
        }
        out.write(dir, "report.txt", &format!("max_abs_err\n{err:.6e}\n"))?;
        out.say(format!("max_abs_err {err:.3e}"));
    }
    Ok(out)
}

/// Bayes problem of a run: synthetic oracle data at `bayes.z_true`.
pub fn bayes_problem(cfg: &RunConfig) -> Result<BayesProblem> {
    let b = &cfg.bayes;
    let mesh = Mesh::new(cfg.level)?;
    let f = cfg.rhs.nodal(&mesh)?;
    let g = mesh
        .dirichlet_nodes()
        .iter()
        .map(|i| cfg.boundary.nodal(&mesh).map(|v| v[i]))
        .collect::<Result<Vec<_>>>()?;
    let forward =
        ForwardModel::new(mesh, b.z_true.len(), f, g)?.with_compression(cfg.compression.spec()?);
    let requests = functionals::mean_per_subdomain(&forward.tree, b.obs_depth)?;
    let model =
        bayes::synthetic_observations(&forward, requests, &b.z_true, b.noise_frac, cfg.seed)?;
    let prior = Prior::iid(b.prior, b.z_true.len())?;
    BayesProblem::new(forward, prior, model)
}

/// Wall time of the likelihood paths on one batch of prior draws.
pub fn likelihood_timing(problem: &BayesProblem, batch: usize, seed: u64) -> Result<String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let zs: Vec<Vec<f64>> = (0..batch).map(|_| problem.prior.sample(&mut rng)).collect();
    let mut s = String::from("path evaluations total_ms per_eval_ms\n");
    for (name, path) in [
        ("functionals", ForwardPath::Functionals),
        ("nodal_functionals", ForwardPath::NodalFunctionals),
        ("full_solve", ForwardPath::FullSolve),
    ] {
        let t = Instant::now();
        for z in &zs {
            problem.log_likelihood(z, path)?;
        }
        let ms = t.elapsed().as_secs_f64() * 1e3;
        let _ = writeln!(s, "{name} {batch} {ms:.3} {:.3}", ms / batch.max(1) as f64);
    }
    Ok(s)
}

fn bayes_check(problem: &BayesProblem, z: &[f64], path: ForwardPath) -> Result<f64> {
    let fw = &problem.forward;
    let a = fw.predict(z, &problem.model.requests, path)?;
    let o = fw.predict(z, &problem.model.requests, ForwardPath::Oracle)?;
    Ok(rel_linf(&a, &o))
}

pub fn cmd_bayes_grid(cfg: &RunConfig, check_oracle: bool) -> Result<Summary> {
    let b = &cfg.bayes;
    let problem = bayes_problem(cfg)?;
    let n_z = b.z_true.len();
    let spec = GridSpec::uniform(n_z, b.grid_lo, b.grid_hi, b.grid_n);
    let post = problem.posterior_grid(&spec, b.path)?;
    let mut out = Summary::default();
    let dir = &cfg.output.dir;
    out.write(dir, "grid.txt", &post.to_table())?;
    out.write(
        dir,
        "timing.txt",
        &likelihood_timing(&problem, b.timing_batch, cfg.seed)?,
    )?;
    out.say(format!(
        "mode {:?} mean {:?} log_evidence {:.6} integral {:.12}",
        post.mode,
        post.mean(),
        post.log_evidence,
        post.integral()
    ));
    if check_oracle {
        let err = bayes_check(&problem, &b.z_true, b.path)?;
        out.say(format!("forward rel_linf_err at z_true {err:.3e}"));
    }
    Ok(out)
}

pub fn cmd_bayes_mcmc(cfg: &RunConfig, check_oracle: bool) -> Result<Summary> {
    let b = &cfg.bayes;
    let problem = bayes_problem(cfg)?;
    let chain = ChainSpec {
        length: b.chain_length,
        burn_in: b.burn_in,
        thin: b.thin,
        scale: b.proposal_scale,
        seed: cfg.seed,
    };
    let start = vec![0.0; b.z_true.len()];
    let post = problem.posterior_mcmc(&chain, &start, b.path)?;
    let mut out = Summary::default();
    let dir = &cfg.output.dir;
    out.write(dir, "chain.txt", &post.to_table())?;
    out.write(
        dir,
        "timing.txt",
        &likelihood_timing(&problem, b.timing_batch, cfg.seed)?,
    )?;
    out.say(format!(
        "mean {:?} std {:?} acceptance {:.3}",
        post.mean(),
        post.std_dev(),
        post.acceptance_rate
    ));
    if check_oracle {
        let err = bayes_check(&problem, &b.z_true, b.path)?;
        out.say(format!("forward rel_linf_err at z_true {err:.3e}"));
    }
    Ok(out)
}

/// One row of the scaling table.
#[derive(Debug, Clone, PartialEq)]
pub struct ScalingRow {
    pub level: u32,
    pub n: usize,
    pub build_ms: f64,
    pub solve_ms: f64,
    pub peak_bytes: usize,
    pub functionals_peak_bytes: usize,
    pub root_psi_g_bytes: usize,
}

pub fn scaling_rows(cfg: &RunConfig) -> Result<Vec<ScalingRow>> {
    let spec = if cfg.scaling.compressed {
        Some(ToleranceSpec {
            eps: cfg.compression.eps,
            k_max: cfg.compression.k_max,
            n_min: cfg.compression.n_min,
        })
    } else {
        None
    };
    let mut rows = Vec::new();
    for &level in &cfg.scaling.levels {
        let p = Problem::at_level(cfg, level)?;
        let mut opts = BuildOptions::new(SolveMode::KeepPhiAll);
        opts.compression = spec;
        let t = Instant::now();
        let store = p.build(&opts)?;
        let build_ms = t.elapsed().as_secs_f64() * 1e3;
        let t = Instant::now();
        let u = hdd::root_to_leaves(&store, &p.f, &p.g)?;
        let solve_ms = t.elapsed().as_secs_f64() * 1e3;
        let mut fopts = BuildOptions::new(SolveMode::FunctionalsOnly)
            .with_functionals(vec![FunctionalRequest::Mean(0)]);
        fopts.compression = spec;
        let fstore = p.build(&fopts)?;
        rows.push(ScalingRow {
            level,
            n: u.len(),
            build_ms,
            solve_ms,
            peak_bytes: store.peak_bytes(),
            functionals_peak_bytes: fstore.peak_bytes(),
            root_psi_g_bytes: store.root_psi().psi_g.bytes(),
        });
    }
    Ok(rows)
}

pub fn cmd_scaling(cfg: &RunConfig) -> Result<Summary> {
    let rows = scaling_rows(cfg)?;
    let mut table = String::from("level n build_ms solve_ms peak_bytes\n");
    let mut modes =
        String::from("level keep_phi_all_peak functionals_only_peak root_psi_g_bytes\n");
    for r in &rows {
        let _ = writeln!(
            table,
            "{} {} {:.3} {:.3} {}",
            r.level, r.n, r.build_ms, r.solve_ms, r.peak_bytes
        );
        let _ = writeln!(
            modes,
            "{} {} {} {}",
            r.level, r.peak_bytes, r.functionals_peak_bytes, r.root_psi_g_bytes
        );
    }
    let mut out = Summary::default();
    let dir = &cfg.output.dir;
    out.write(dir, "scaling.txt", &table)?;
    out.write(dir, "scaling_modes.txt", &modes)?;
    out.lines.extend(table.lines().map(String::from));
    Ok(out)
}

/// Resolves the configuration: file (or defaults) overridden by flags.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(t) = cli.threads {
        cfg.threads = t;
    }
    Ok(cfg)
}

/// Runs the parsed command line.
pub fn run(cli: &Cli) -> Result<Summary> {
    let cfg = resolve_config(cli)?;
    if cli.print_config {
        return Ok(Summary {
            lines: vec![cfg.to_toml()?],
            files: Vec::new(),
        });
    }
    cfg.validate()?;
    let command = cli
        .command
        .ok_or_else(|| HddError::Usage("no subcommand given; see --help".into()))?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.threads)
        .build()
        .map_err(|e| HddError::Internal(e.to_string()))?;
    pool.install(|| match command {
        Command::Solve => cmd_solve(&cfg, cli.check_oracle),
        Command::Subdomain => cmd_subdomain(&cfg, cli.check_oracle),
        Command::Functionals => cmd_functionals(&cfg, cli.check_oracle),
        Command::BayesGrid => cmd_bayes_grid(&cfg, cli.check_oracle),
        Command::BayesMcmc => cmd_bayes_mcmc(&cfg, cli.check_oracle),
        Command::Scaling => cmd_scaling(&cfg),
    })
}
