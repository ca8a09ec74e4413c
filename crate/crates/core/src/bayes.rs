//! Bayesian inversion for a parametrized log-coefficient.
//!
//! The coefficient is `κ(x, z) = exp(Σ z_i 1_{Ω_i}(x))` with `Ω_i` the tree
//! regions at depth `log2(n_z)`. Observations are subdomain means or point
//! values of the discrete solution, corrupted by independent Gaussian noise.

use std::f64::consts::PI;
use std::sync::Arc;

use log::warn;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ddtree::{DDTree, NodeId};
use crate::error::{HddError, Result};
use crate::fem::CoefficientField;
use crate::functionals::{self, FunctionalRequest};
use crate::hdd::{self, BuildOptions, SolveMode};
use crate::lowrank::ToleranceSpec;
use crate::mesh::Mesh;
use crate::oracle;

/// Piecewise-constant log-coefficient on the tree regions of one depth.
#[derive(Debug, Clone)]
pub struct ParamField {
    regions: Vec<NodeId>,
    /// Region index of every triangle.
    owner: Vec<usize>,
}

impl ParamField {
    /// `n_z` must be a power of two no larger than the number of leaves.
    pub fn new(mesh: &Mesh, tree: &DDTree, n_z: usize) -> Result<Self> {
        if n_z == 0 || !n_z.is_power_of_two() {
            return Err(HddError::Config(format!(
                "parameter count {n_z} is not a power of two"
            )));
        }
        let depth = n_z.trailing_zeros() as usize;
        if depth > tree.depth() {
            return Err(HddError::Config(format!(
                "{n_z} parameters exceed the tree depth {}",
                tree.depth()
            )));
        }
        let regions = tree.nodes_at_depth(depth);
        let mut owner = vec![usize::MAX; mesh.triangles().len()];
        for (k, &id) in regions.iter().enumerate() {
            for t in mesh.region_triangles_grid(&tree.node(id).region) {
                owner[t] = k;
            }
        }
        debug_assert!(owner.iter().all(|&k| k < n_z));
        Ok(Self { regions, owner })
    }

    pub fn n_z(&self) -> usize {
        self.regions.len()
    }

    /// Tree nodes carrying the parameters, in parameter order.
    pub fn regions(&self) -> &[NodeId] {
        &self.regions
    }

    pub fn kappa(&self, z: &[f64]) -> Result<CoefficientField> {
        if z.len() != self.n_z() {
            return Err(HddError::Usage(format!(
                "expected {} parameters, got {}",
                self.n_z(),
                z.len()
            )));
        }
        if z.iter().any(|v| !v.is_finite()) {
            return Err(HddError::Usage(format!(
                "non-finite parameter vector {z:?}"
            )));
        }
        CoefficientField::new(self.owner.iter().map(|&k| z[k].exp()).collect())
    }
}

/// One independent prior component.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum PriorComponent {
    StandardNormal,
    Uniform { lo: f64, hi: f64 },
}

impl PriorComponent {
    pub fn log_density(&self, z: f64) -> f64 {
        match *self {
            Self::StandardNormal => -0.5 * z * z - 0.5 * (2.0 * PI).ln(),
            Self::Uniform { lo, hi } => {
                if (lo..=hi).contains(&z) {
                    -(hi - lo).ln()
                } else {
                    f64::NEG_INFINITY
                }
            }
        }
    }

    pub fn cdf(&self, z: f64) -> f64 {
        match *self {
            Self::StandardNormal => 0.5 * (1.0 + libm::erf(z / 2f64.sqrt())),
            Self::Uniform { lo, hi } => ((z - lo) / (hi - lo)).clamp(0.0, 1.0),
        }
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        match *self {
            Self::StandardNormal => rng.sample(StandardNormal),
            Self::Uniform { lo, hi } => rng.gen_range(lo..hi),
        }
    }
}

/// Product prior `π(z) = Π π_i(z_i)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prior {
    pub components: Vec<PriorComponent>,
}

impl Prior {
    pub fn new(components: Vec<PriorComponent>) -> Result<Self> {
        for c in &components {
            if let PriorComponent::Uniform { lo, hi } = *c {
                if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                    return Err(HddError::Config(format!(
                        "uniform prior bounds [{lo}, {hi}] are invalid"
                    )));
                }
            }
        }
        Ok(Self { components })
    }

    pub fn iid(component: PriorComponent, n: usize) -> Result<Self> {
        Self::new(vec![component; n])
    }

    pub fn dim(&self) -> usize {
        self.components.len()
    }

    pub fn log_density(&self, z: &[f64]) -> f64 {
        self.components
            .iter()
            .zip(z)
            .map(|(c, &v)| c.log_density(v))
            .sum()
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        self.components.iter().map(|c| c.sample(rng)).collect()
    }
}

/// Observation functionals, noise levels and data.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementModel {
    pub requests: Vec<FunctionalRequest>,
    pub sigma: Vec<f64>,
    pub y: Vec<f64>,
}

impl MeasurementModel {
    pub fn new(requests: Vec<FunctionalRequest>, sigma: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        if sigma.len() != requests.len() || y.len() != requests.len() {
            return Err(HddError::Config(format!(
                "{} observations with {} noise levels and {} data values",
                requests.len(),
                sigma.len(),
                y.len()
            )));
        }
        if let Some(s) = sigma.iter().find(|s| !(s.is_finite() && **s > 0.0)) {
            return Err(HddError::Config(format!(
                "noise level {s} must be positive"
            )));
        }
        Ok(Self { requests, sigma, y })
    }

    /// No observations: the likelihood is identically one.
    pub fn flat() -> Self {
        Self {
            requests: Vec::new(),
            sigma: Vec::new(),
            y: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    /// Gaussian log-likelihood of predictions `s`.
    pub fn log_likelihood(&self, s: &[f64]) -> Result<f64> {
        if s.len() != self.len() {
            return Err(HddError::Usage(format!(
                "{} predictions for {} observations",
                s.len(),
                self.len()
            )));
        }
        if let Some(v) = s.iter().find(|v| !v.is_finite()) {
            return Err(HddError::Numerical {
                node: 0,
                msg: format!("non-finite prediction {v}"),
            });
        }
        Ok(self
            .y
            .iter()
            .zip(s)
            .zip(&self.sigma)
            .map(|((y, s), sig)| {
                let r = (y - s) / sig;
                -0.5 * r * r - (sig * (2.0 * PI).sqrt()).ln()
            })
            .sum())
    }

    /// The same observations in the order given by `perm`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        Self {
            requests: perm.iter().map(|&i| self.requests[i]).collect(),
            sigma: perm.iter().map(|&i| self.sigma[i]).collect(),
            y: perm.iter().map(|&i| self.y[i]).collect(),
        }
    }
}

/// How the forward map `z ↦ S(z)` is computed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForwardPath {
    /// Functionals assembled during the upward pass over the model's single
    /// load `f`; `u` is never formed.
    Functionals,
    /// Functionals over nodal loads, usable for any `f`.
    NodalFunctionals,
    /// Full map store, downward pass, then the functionals on `u`.
    FullSolve,
    /// Direct global solve.
    Oracle,
}

/// Fixed part of the forward problem: mesh, data `f`, `g` and the parameter map.
#[derive(Debug, Clone)]
pub struct ForwardModel {
    pub mesh: Mesh,
    pub tree: Arc<DDTree>,
    pub param: ParamField,
    pub f: Vec<f64>,
    pub g: Vec<f64>,
    pub compression: Option<ToleranceSpec>,
}

impl ForwardModel {
    pub fn new(mesh: Mesh, n_z: usize, f: Vec<f64>, g: Vec<f64>) -> Result<Self> {
        let tree = Arc::new(DDTree::new(&mesh));
        let param = ParamField::new(&mesh, &tree, n_z)?;
        if f.len() != mesh.node_count() || g.len() != tree.root().idx_boundary.len() {
            return Err(HddError::Config(
                "forward data sizes do not match the mesh".into(),
            ));
        }
        Ok(Self {
            mesh,
            tree,
            param,
            f,
            g,
            compression: None,
        })
    }

    pub fn with_compression(mut self, spec: Option<ToleranceSpec>) -> Self {
        self.compression = spec;
        self
    }

    /// Predicted observations `S(z)`.
    pub fn predict(
        &self,
        z: &[f64],
        requests: &[FunctionalRequest],
        path: ForwardPath,
    ) -> Result<Vec<f64>> {
        self.predict_inner(z, requests, path)
            .map_err(|e| HddError::Forward {
                z: z.to_vec(),
                source: Box::new(e),
            })
    }

    fn predict_inner(
        &self,
        z: &[f64],
        requests: &[FunctionalRequest],
        path: ForwardPath,
    ) -> Result<Vec<f64>> {
        let kappa = self.param.kappa(z)?;
        let u = match path {
            ForwardPath::Functionals => {
                let mut opts = BuildOptions::new(SolveMode::FunctionalsOnly)
                    .with_functionals(requests.to_vec())
                    .with_fixed_loads(vec![self.f.clone()]);
                opts.compression = self.compression;
                let store = hdd::leaves_to_root(&self.tree, &self.mesh, &kappa, &opts)?;
                return store.evaluate_fixed(&[1.0], &self.g);
            }
            ForwardPath::NodalFunctionals => {
                return functionals::evaluate(
                    &self.tree,
                    &self.mesh,
                    &kappa,
                    requests.to_vec(),
                    self.compression,
                    &self.f,
                    &self.g,
                );
            }
            ForwardPath::FullSolve => {
                let mut opts = BuildOptions::new(SolveMode::KeepPhiAll);
                opts.compression = self.compression;
                let store = hdd::leaves_to_root(&self.tree, &self.mesh, &kappa, &opts)?;
                hdd::root_to_leaves(&store, &self.f, &self.g)?
            }
            ForwardPath::Oracle => oracle::direct_solve(&self.mesh, &kappa, &self.f, &self.g)?,
        };
        requests.iter().map(|r| self.observe(&u, *r)).collect()
    }

    /// Applies one observation functional to a nodal solution.
    pub fn observe(&self, u: &[f64], request: FunctionalRequest) -> Result<f64> {
        match request {
            FunctionalRequest::Mean(id) => {
                if id >= self.tree.len() {
                    return Err(HddError::Usage(format!("node {id} is not in the tree")));
                }
                oracle::direct_mean(&self.mesh, u, &self.tree.region(id))
            }
            FunctionalRequest::Point(i) => u
                .get(i)
                .copied()
                .ok_or_else(|| HddError::Usage(format!("mesh node {i} out of range"))),
        }
    }
}

/// Forward model, prior and measurements.
#[derive(Debug, Clone)]
pub struct BayesProblem {
    pub forward: ForwardModel,
    pub prior: Prior,
    pub model: MeasurementModel,
}

impl BayesProblem {
    pub fn new(forward: ForwardModel, prior: Prior, model: MeasurementModel) -> Result<Self> {
        if prior.dim() != forward.param.n_z() {
            return Err(HddError::Config(format!(
                "prior has {} components for {} parameters",
                prior.dim(),
                forward.param.n_z()
            )));
        }
        Ok(Self {
            forward,
            prior,
            model,
        })
    }

    pub fn log_likelihood(&self, z: &[f64], path: ForwardPath) -> Result<f64> {
        if self.model.is_empty() {
            return Ok(0.0);
        }
        let s = self.forward.predict(z, &self.model.requests, path)?;
        self.model.log_likelihood(&s)
    }

    pub fn posterior_grid(&self, grid: &GridSpec, path: ForwardPath) -> Result<GridPosterior> {
        posterior_grid(|z| self.log_likelihood(z, path), &self.prior, grid)
    }

    pub fn posterior_mcmc(
        &self,
        chain: &ChainSpec,
        start: &[f64],
        path: ForwardPath,
    ) -> Result<ChainPosterior> {
        posterior_mcmc(|z| self.log_likelihood(z, path), &self.prior, chain, start)
    }
}

/// Observations of the oracle solution at `z_true` with seeded Gaussian noise.
///
/// Every observation gets `σ = noise_frac · (max ŷ − min ŷ)`, falling back to
/// `noise_frac · max |ŷ|` when all predictions coincide.
pub fn synthetic_observations(
    forward: &ForwardModel,
    requests: Vec<FunctionalRequest>,
    z_true: &[f64],
    noise_frac: f64,
    seed: u64,
) -> Result<MeasurementModel> {
    if !(noise_frac.is_finite() && noise_frac > 0.0) {
        return Err(HddError::Config(format!(
            "noise fraction {noise_frac} must be positive"
        )));
    }
    let clean = forward.predict(z_true, &requests, ForwardPath::Oracle)?;
    let (lo, hi) = clean
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| {
            (a.min(v), b.max(v))
        });
    let mut scale = hi - lo;
    if scale <= 0.0 {
        scale = clean.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    }
    if scale <= 0.0 {
        return Err(HddError::Config(
            "synthetic signal is identically zero".into(),
        ));
    }
    let sigma = noise_frac * scale;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let y = clean
        .iter()
        .map(|v| v + sigma * rng.sample::<f64, _>(StandardNormal))
        .collect();
    MeasurementModel::new(requests, vec![sigma; clean.len()], y)
}

/// Tensor grid, `n[i]` equispaced points on `[lo[i], hi[i]]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub n: Vec<usize>,
}

impl GridSpec {
    pub fn uniform(dim: usize, lo: f64, hi: f64, n: usize) -> Self {
        Self {
            lo: vec![lo; dim],
            hi: vec![hi; dim],
            n: vec![n; dim],
        }
    }

    fn validate(&self) -> Result<()> {
        let d = self.lo.len();
        if d == 0 || d > 2 || self.hi.len() != d || self.n.len() != d {
            return Err(HddError::Config(
                "grid posteriors need one or two consistent axes".into(),
            ));
        }
        for k in 0..d {
            if self.n[k] < 2 || !(self.lo[k] < self.hi[k]) {
                return Err(HddError::Config(format!("grid axis {k} is degenerate")));
            }
        }
        Ok(())
    }

    pub fn axes(&self) -> Vec<Vec<f64>> {
        (0..self.lo.len())
            .map(|k| {
                let h = self.spacing(k);
                (0..self.n[k]).map(|i| self.lo[k] + i as f64 * h).collect()
            })
            .collect()
    }

    pub fn spacing(&self, axis: usize) -> f64 {
        (self.hi[axis] - self.lo[axis]) / (self.n[axis] - 1) as f64
    }
}

/// Posterior evaluated on a tensor grid. Points run with the first axis fastest.
#[derive(Debug, Clone)]
pub struct GridPosterior {
    pub spec: GridSpec,
    pub points: Vec<Vec<f64>>,
    pub log_prior: Vec<f64>,
    pub log_like: Vec<f64>,
    /// Normalized log density.
    pub log_post: Vec<f64>,
    pub log_evidence: f64,
    pub mode: Vec<f64>,
}

impl GridPosterior {
    pub fn density(&self) -> Vec<f64> {
        self.log_post.iter().map(|v| v.exp()).collect()
    }

    /// Trapezoidal integral of the normalized density.
    pub fn integral(&self) -> f64 {
        trapezoid(&self.spec, &self.density())
    }

    pub fn mean(&self) -> Vec<f64> {
        let p = self.density();
        (0..self.spec.lo.len())
            .map(|k| {
                trapezoid(
                    &self.spec,
                    &p.iter()
                        .zip(&self.points)
                        .map(|(p, z)| p * z[k])
                        .collect::<Vec<_>>(),
                )
            })
            .collect()
    }

    /// Text table with header `z1 [z2] log_prior log_like log_post`.
    pub fn to_table(&self) -> String {
        let d = self.spec.lo.len();
        let mut s: String = (1..=d).map(|k| format!("z{k} ")).collect();
        s.push_str("log_prior log_like log_post\n");
        for (i, z) in self.points.iter().enumerate() {
            for v in z {
                s.push_str(&format!("{v:.10e} "));
            }
            s.push_str(&format!(
                "{:.10e} {:.10e} {:.10e}\n",
                self.log_prior[i], self.log_like[i], self.log_post[i]
            ));
        }
        s
    }
}

fn trapezoid(spec: &GridSpec, values: &[f64]) -> f64 {
    let axes = spec.axes();
    let weight = |k: usize, i: usize| {
        let h = spec.spacing(k);
        if i == 0 || i + 1 == axes[k].len() {
            0.5 * h
        } else {
            h
        }
    };
    let n0 = spec.n[0];
    values
        .iter()
        .enumerate()
        .map(|(p, v)| {
            let w = if spec.n.len() == 1 {
                weight(0, p)
            } else {
                weight(0, p % n0) * weight(1, p / n0)
            };
            w * v
        })
        .sum()
}

fn log_sum_weighted(spec: &GridSpec, log_values: &[f64]) -> f64 {
    let m = log_values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    let shifted: Vec<f64> = log_values.iter().map(|v| (v - m).exp()).collect();
    m + trapezoid(spec, &shifted).ln()
}

/// Grid posterior for an arbitrary log-likelihood. Evaluations run in parallel.
pub fn posterior_grid<F>(log_like: F, prior: &Prior, spec: &GridSpec) -> Result<GridPosterior>
where
    F: Fn(&[f64]) -> Result<f64> + Sync,
{
    spec.validate()?;
    if prior.dim() != spec.lo.len() {
        return Err(HddError::Config(format!(
            "prior dimension {} differs from grid dimension {}",
            prior.dim(),
            spec.lo.len()
        )));
    }
    let axes = spec.axes();
    let points: Vec<Vec<f64>> = if axes.len() == 1 {
        axes[0].iter().map(|&a| vec![a]).collect()
    } else {
        axes[1]
            .iter()
            .flat_map(|&b| axes[0].iter().map(move |&a| vec![a, b]))
            .collect()
    };
    let log_prior: Vec<f64> = points.iter().map(|z| prior.log_density(z)).collect();
    let log_like = points
        .par_iter()
        .zip(&log_prior)
        .map(|(z, &lp)| {
            if lp == f64::NEG_INFINITY {
                Ok(0.0)
            } else {
                log_like(z)
            }
        })
        .collect::<Result<Vec<f64>>>()?;
    let joint: Vec<f64> = log_prior
        .iter()
        .zip(&log_like)
        .map(|(a, b)| a + b)
        .collect();
    let log_evidence = log_sum_weighted(spec, &joint);
    if !log_evidence.is_finite() {
        return Err(HddError::Numerical {
            node: 0,
            msg: "posterior has no mass on the grid".into(),
        });
    }
    let log_post: Vec<f64> = joint.iter().map(|v| v - log_evidence).collect();
    let best = (0..joint.len()).fold(0, |b, i| if joint[i] > joint[b] { i } else { b });
    let mode = points[best].clone();
    Ok(GridPosterior {
        spec: spec.clone(),
        points,
        log_prior,
        log_like,
        log_post,
        log_evidence,
        mode,
    })
}

/// Random-walk Metropolis settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ChainSpec {
    /// Total iterations after burn-in.
    pub length: usize,
    pub burn_in: usize,
    /// Keep every `thin`-th state.
    pub thin: usize,
    /// Gaussian proposal standard deviation.
    pub scale: f64,
    pub seed: u64,
}

impl Default for ChainSpec {
    fn default() -> Self {
        Self {
            length: 4000,
            burn_in: 1000,
            thin: 1,
            scale: 0.1,
            seed: 0,
        }
    }
}

/// Recorded chain states.
#[derive(Debug, Clone)]
pub struct ChainPosterior {
    pub iterations: Vec<usize>,
    pub samples: Vec<Vec<f64>>,
    pub log_post: Vec<f64>,
    pub accepted: Vec<bool>,
    pub acceptance_rate: f64,
}

impl ChainPosterior {
    pub fn mean(&self) -> Vec<f64> {
        let n = self.samples.len() as f64;
        let d = self.samples.first().map_or(0, Vec::len);
        (0..d)
            .map(|k| self.samples.iter().map(|z| z[k]).sum::<f64>() / n)
            .collect()
    }

    pub fn std_dev(&self) -> Vec<f64> {
        let mean = self.mean();
        let n = self.samples.len() as f64;
        mean.iter()
            .enumerate()
            .map(|(k, m)| {
                (self.samples.iter().map(|z| (z[k] - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            })
            .collect()
    }

    pub fn component(&self, k: usize) -> Vec<f64> {
        self.samples.iter().map(|z| z[k]).collect()
    }

    /// Text table with header `iter z1 .. log_post accepted`.
    pub fn to_table(&self) -> String {
        let d = self.samples.first().map_or(0, Vec::len);
        let mut s = String::from("iter ");
        for k in 1..=d {
            s.push_str(&format!("z{k} "));
        }
        s.push_str("log_post accepted\n");
        for (i, z) in self.samples.iter().enumerate() {
            s.push_str(&format!("{} ", self.iterations[i]));
            for v in z {
                s.push_str(&format!("{v:.10e} "));
            }
            s.push_str(&format!(
                "{:.10e} {}\n",
                self.log_post[i],
                u8::from(self.accepted[i])
            ));
        }
        s
    }
}

/// Random-walk Metropolis targeting `L·π`, started at `start`.
pub fn posterior_mcmc<F>(
    log_like: F,
    prior: &Prior,
    spec: &ChainSpec,
    start: &[f64],
) -> Result<ChainPosterior>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    if start.len() != prior.dim() || prior.dim() == 0 || prior.dim() > 4 {
        return Err(HddError::Config(format!(
            "chains need 1 to 4 parameters matching the prior, got {}",
            start.len()
        )));
    }
    if !(spec.scale.is_finite() && spec.scale >= 0.0) || spec.thin == 0 || spec.length == 0 {
        return Err(HddError::Config(
            "chain spec needs length > 0, thin > 0 and a finite scale".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let mut z = start.to_vec();
    let lp0 = prior.log_density(&z);
    if lp0 == f64::NEG_INFINITY {
        return Err(HddError::Config(format!(
            "chain start {z:?} has zero prior density"
        )));
    }
    let mut current = lp0 + log_like(&z)?;
    let total = spec.burn_in + spec.length;
    let mut out = ChainPosterior {
        iterations: Vec::new(),
        samples: Vec::new(),
        log_post: Vec::new(),
        accepted: Vec::new(),
        acceptance_rate: 0.0,
    };
    let mut n_acc = 0usize;
    for it in 0..total {
        let proposal: Vec<f64> = z
            .iter()
            .map(|v| v + spec.scale * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let lp = prior.log_density(&proposal);
        let u: f64 = rng.gen();
        let mut accepted = false;
        if lp > f64::NEG_INFINITY {
            let cand = lp + log_like(&proposal)?;
            if u.ln() < cand - current {
                z = proposal;
                current = cand;
                accepted = true;
            }
        }
        if it >= spec.burn_in {
            n_acc += usize::from(accepted);
            if (it - spec.burn_in) % spec.thin == 0 {
                out.iterations.push(it);
                out.samples.push(z.clone());
                out.log_post.push(current);
                out.accepted.push(accepted);
            }
        }
    }
    out.acceptance_rate = n_acc as f64 / spec.length as f64;
    if !(0.05..=0.95).contains(&out.acceptance_rate) {
        warn!(
            "acceptance rate {:.3} is outside [0.05, 0.95]",
            out.acceptance_rate
        );
    }
    Ok(out)
}

/// Two-sided Kolmogorov–Smirnov statistic of `samples` against `cdf`.
pub fn ks_statistic<F: Fn(f64) -> f64>(samples: &[f64], cdf: F) -> f64 {
    let mut x = samples.to_vec();
    x.sort_by(f64::total_cmp);
    let n = x.len() as f64;
    x.iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = cdf(v);
            (c - i as f64 / n).abs().max(((i + 1) as f64 / n - c).abs())
        })
        .fold(0.0, f64::max)
}
