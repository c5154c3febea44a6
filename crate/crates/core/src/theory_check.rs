//! Brute-force numerical checks of the theory behind desensitization:
//! Gaussian KL, conditional independence of a latent from the domain given
//! the intrinsic feature, the reconstruction-likelihood bound on the
//! cross-domain KL, the NLL/MSE equivalence under an isotropic Gaussian
//! decoder, and the log-density gap `Δ` between latent and pixel space.

use std::f64::consts::PI;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{CdnError, Result};

/// Diagonal Gaussian.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianSpec {
    pub mean: Vec<f64>,
    pub diag_var: Vec<f64>,
}

impl GaussianSpec {
    pub fn new(mean: Vec<f64>, diag_var: Vec<f64>) -> Result<Self> {
        if mean.len() != diag_var.len() || mean.is_empty() {
            return Err(CdnError::ShapeMismatch { expected: vec![mean.len()], got: vec![diag_var.len()] });
        }
        if diag_var.iter().any(|&v| !(v > 0.0) || !v.is_finite()) || mean.iter().any(|m| !m.is_finite()) {
            return Err(CdnError::invalid("Gaussian needs finite mean and positive variances"));
        }
        Ok(GaussianSpec { mean, diag_var })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn log_density(&self, z: &[f64]) -> f64 {
        self.mean
            .iter()
            .zip(&self.diag_var)
            .zip(z)
            .map(|((m, v), z)| -0.5 * (2.0 * PI * v).ln() - (z - m).powi(2) / (2.0 * v))
            .sum()
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Vec<f64> {
        self.mean
            .iter()
            .zip(&self.diag_var)
            .map(|(m, v)| {
                let e: f64 = StandardNormal.sample(rng);
                m + v.sqrt() * e
            })
            .collect()
    }

    /// Differential entropy in nats.
    pub fn entropy(&self) -> f64 {
        self.diag_var.iter().map(|v| 0.5 * (2.0 * PI * std::f64::consts::E * v).ln()).sum()
    }
}

/// Closed-form `KL(p ‖ q)`.
pub fn gaussian_kl(p: &GaussianSpec, q: &GaussianSpec) -> Result<f64> {
    if p.dim() != q.dim() {
        return Err(CdnError::ShapeMismatch { expected: vec![p.dim()], got: vec![q.dim()] });
    }
    let kl: f64 = (0..p.dim())
        .map(|k| {
            let (vp, vq) = (p.diag_var[k], q.diag_var[k]);
            0.5 * ((vq / vp).ln() + (vp + (p.mean[k] - q.mean[k]).powi(2)) / vq - 1.0)
        })
        .sum();
    Ok(kl.max(0.0))
}

/// Mean and standard error of a sample.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct McEstimate {
    pub mean: f64,
    pub std_err: f64,
}

impl McEstimate {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
        McEstimate { mean, std_err: (var / n).sqrt() }
    }
}

/// Monte-Carlo estimate of `E_p[log p − log q]`.
pub fn gaussian_kl_mc(p: &GaussianSpec, q: &GaussianSpec, n_samples: usize, seed: u64) -> Result<McEstimate> {
    if p.dim() != q.dim() {
        return Err(CdnError::ShapeMismatch { expected: vec![p.dim()], got: vec![q.dim()] });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let vals: Vec<f64> = (0..n_samples)
        .map(|_| {
            let z = p.sample(&mut rng);
            p.log_density(&z) - q.log_density(&z)
        })
        .collect();
    Ok(McEstimate::of(&vals))
}

/// Finite tables `P(z | i, d)` and a domain prior `P(d | i)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiscreteCondModel {
    pub n_i: usize,
    pub n_d: usize,
    pub n_z: usize,
    /// Indexed `[(i * n_d + d) * n_z + z]`.
    pub table: Vec<f64>,
    /// Indexed `[i * n_d + d]`.
    pub prior: Vec<f64>,
}

const ROW_TOL: f64 = 1e-12;

impl DiscreteCondModel {
    pub fn new(n_i: usize, n_d: usize, n_z: usize, table: Vec<f64>, prior: Vec<f64>) -> Result<Self> {
        let m = DiscreteCondModel { n_i, n_d, n_z, table, prior };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_i == 0 || self.n_d == 0 || self.n_z == 0 {
            return Err(CdnError::InvalidModel("empty set".into()));
        }
        if self.table.len() != self.n_i * self.n_d * self.n_z || self.prior.len() != self.n_i * self.n_d {
            return Err(CdnError::InvalidModel("table sizes do not match the set sizes".into()));
        }
        if self.table.iter().chain(&self.prior).any(|&p| !(p >= 0.0) || !p.is_finite()) {
            return Err(CdnError::InvalidModel("probabilities must be finite and non-negative".into()));
        }
        for (k, row) in self.table.chunks_exact(self.n_z).enumerate() {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > ROW_TOL {
                return Err(CdnError::InvalidModel(format!("row (i={}, d={}) sums to {s}", k / self.n_d, k % self.n_d)));
            }
        }
        for (i, row) in self.prior.chunks_exact(self.n_d).enumerate() {
            let s: f64 = row.iter().sum();
            if (s - 1.0).abs() > ROW_TOL {
                return Err(CdnError::InvalidModel(format!("prior for i={i} sums to {s}")));
            }
        }
        Ok(())
    }

    pub fn p(&self, z: usize, i: usize, d: usize) -> f64 {
        self.table[(i * self.n_d + d) * self.n_z + z]
    }

    fn row_mut(&mut self, i: usize, d: usize) -> &mut [f64] {
        let n_z = self.n_z;
        &mut self.table[(i * self.n_d + d) * n_z..][..n_z]
    }

    /// Random positive tables and prior.
    pub fn random<R: Rng>(n_i: usize, n_d: usize, n_z: usize, rng: &mut R) -> Self {
        let mut draw_rows = |len: usize, width: usize| -> Vec<f64> {
            let mut v: Vec<f64> = (0..len * width).map(|_| rng.random_range(0.05..1.0)).collect();
            for row in v.chunks_exact_mut(width) {
                let s: f64 = row.iter().sum();
                row.iter_mut().for_each(|p| *p /= s);
            }
            v
        };
        let table = draw_rows(n_i * n_d, n_z);
        let prior = draw_rows(n_i, n_d);
        DiscreteCondModel { n_i, n_d, n_z, table, prior }
    }

    /// Replaces every row of each `i` by the average of its rows over `d`.
    pub fn equalized(&self) -> Self {
        let mut out = self.clone();
        for i in 0..self.n_i {
            let avg: Vec<f64> = (0..self.n_z).map(|z| (0..self.n_d).map(|d| self.p(z, i, d)).sum::<f64>() / self.n_d as f64).collect();
            for d in 0..self.n_d {
                out.row_mut(i, d).copy_from_slice(&avg);
            }
        }
        out
    }

    /// Adds `delta` to one entry and renormalizes its row.
    pub fn perturbed(&self, i: usize, d: usize, z: usize, delta: f64) -> Result<Self> {
        if i >= self.n_i || d >= self.n_d || z >= self.n_z {
            return Err(CdnError::invalid("perturbation index out of range"));
        }
        let mut out = self.clone();
        let row = out.row_mut(i, d);
        row[z] += delta;
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|p| *p /= s);
        out.validate()?;
        Ok(out)
    }

    /// `P(z | i) = Σ_d P(d | i) P(z | i, d)`.
    pub fn marginal(&self, z: usize, i: usize) -> f64 {
        (0..self.n_d).map(|d| self.prior[i * self.n_d + d] * self.p(z, i, d)).sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Theorem1Report {
    pub max_ci_violation: f64,
    pub holds: bool,
}

/// Largest `|P(z|i,d) − P(z|i)|` over the table; the latent is independent
/// of the domain given `i` when it is within `tol`.
pub fn verify_theorem1(model: &DiscreteCondModel, tol: f64) -> Result<Theorem1Report> {
    model.validate()?;
    let mut worst: f64 = 0.0;
    for i in 0..model.n_i {
        for z in 0..model.n_z {
            let m = model.marginal(z, i);
            for d in 0..model.n_d {
                worst = worst.max((model.p(z, i, d) - m).abs());
            }
        }
    }
    Ok(Theorem1Report { max_ci_violation: worst, holds: worst <= tol })
}

/// `x ~ N(W z + c, λ I)` with `W` stored row-major `(n, m)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AffineDecoder {
    pub w: Vec<f64>,
    pub c: Vec<f64>,
    pub lambda_var: f64,
}

impl AffineDecoder {
    pub fn out_dim(&self) -> usize {
        self.c.len()
    }

    pub fn mean(&self, z: &[f64]) -> Vec<f64> {
        let m = z.len();
        self.c.iter().enumerate().map(|(r, c)| c + (0..m).map(|k| self.w[r * m + k] * z[k]).sum::<f64>()).collect()
    }

    pub fn log_density(&self, x: &[f64], z: &[f64]) -> f64 {
        let mu = self.mean(z);
        let n = x.len() as f64;
        let sq: f64 = x.iter().zip(&mu).map(|(a, b)| (a - b).powi(2)).sum();
        -0.5 * n * (2.0 * PI * self.lambda_var).ln() - sq / (2.0 * self.lambda_var)
    }
}

/// Latent laws of one sample under its own domain (`a`) and a foreign one
/// (`b`), a fixed decoder, and the observed sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem2Setup {
    pub latent_a: GaussianSpec,
    pub latent_b: GaussianSpec,
    pub decoder: AffineDecoder,
    pub x_a: Vec<f64>,
    /// Double the decoder variance until the latent density dominates the
    /// decoder density at every sampled `z`.
    pub enforce_assumption: bool,
}

const MAX_DOUBLINGS: usize = 200;

impl Theorem2Setup {
    /// A random 2-D latent setup with latent scales in `[0.5, 2]`.
    pub fn random<R: Rng>(n_x: usize, rng: &mut R) -> Self {
        let m = 2;
        let mut normal = || -> f64 { StandardNormal.sample(&mut *rng) };
        let mean_a: Vec<f64> = (0..m).map(|_| normal()).collect();
        let mean_b: Vec<f64> = (0..m).map(|_| normal()).collect();
        let w: Vec<f64> = (0..n_x * m).map(|_| normal()).collect();
        let c: Vec<f64> = (0..n_x).map(|_| normal()).collect();
        let noise: Vec<f64> = (0..n_x).map(|_| 0.1 * normal()).collect();
        let var = |rng: &mut R| (0..m).map(|_| rng.random_range(0.5f64..2.0).powi(2)).collect::<Vec<_>>();
        let latent_a = GaussianSpec::new(mean_a, var(rng)).unwrap();
        let latent_b = GaussianSpec::new(mean_b, var(rng)).unwrap();
        let decoder = AffineDecoder { w, c, lambda_var: 0.1 };
        let x_a = decoder.mean(&latent_a.mean).iter().zip(&noise).map(|(a, e)| a + e).collect();
        Theorem2Setup { latent_a, latent_b, decoder, x_a, enforce_assumption: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Theorem2Report {
    /// `−E_{z~b} log P(x_a | z)`.
    pub nll: McEstimate,
    /// `E_{z~b}[log P_b(z) − log P_a(z)]`.
    pub kl: McEstimate,
    pub kl_closed_form: f64,
    /// Per-sample `nll − kl` term.
    pub gap: McEstimate,
    /// Differential entropy of the foreign latent law; the second step of
    /// the bound needs it non-negative.
    pub entropy_b: f64,
    pub lambda_var: f64,
    pub assumption_violated: bool,
    pub holds: bool,
}

/// Monte-Carlo check that the cross-domain reconstruction NLL bounds the
/// latent KL from above, within 3 standard errors.
pub fn verify_theorem2_bound(setup: &Theorem2Setup, n_samples: usize, seed: u64) -> Result<Theorem2Report> {
    let (a, b) = (&setup.latent_a, &setup.latent_b);
    if a.dim() != b.dim() || setup.decoder.w.len() != setup.decoder.out_dim() * a.dim() || setup.x_a.len() != setup.decoder.out_dim() {
        return Err(CdnError::invalid("theorem setup dimensions disagree"));
    }
    if !(setup.decoder.lambda_var > 0.0) || n_samples < 2 {
        return Err(CdnError::invalid("need positive decoder variance and at least two samples"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let zs: Vec<Vec<f64>> = (0..n_samples).map(|_| b.sample(&mut rng)).collect();
    let log_a: Vec<f64> = zs.iter().map(|z| a.log_density(z)).collect();
    let log_b: Vec<f64> = zs.iter().map(|z| b.log_density(z)).collect();
    let sq: Vec<f64> = zs
        .iter()
        .map(|z| setup.decoder.mean(z).iter().zip(&setup.x_a).map(|(m, x)| (m - x).powi(2)).sum())
        .collect();
    let n_x = setup.x_a.len() as f64;
    let log_dec = |lambda: f64, s: f64| -0.5 * n_x * (2.0 * PI * lambda).ln() - s / (2.0 * lambda);
    let dominated = |lambda: f64| sq.iter().zip(&log_a).all(|(&s, &la)| la >= log_dec(lambda, s));

    let mut lambda = setup.decoder.lambda_var;
    let mut ok = dominated(lambda);
    if setup.enforce_assumption {
        for _ in 0..MAX_DOUBLINGS {
            if ok {
                break;
            }
            lambda *= 2.0;
            ok = dominated(lambda);
        }
    }
    let nll: Vec<f64> = sq.iter().map(|&s| -log_dec(lambda, s)).collect();
    let kl: Vec<f64> = log_b.iter().zip(&log_a).map(|(lb, la)| lb - la).collect();
    let gap: Vec<f64> = nll.iter().zip(&kl).map(|(n, k)| n - k).collect();
    let gap = McEstimate::of(&gap);
    Ok(Theorem2Report {
        nll: McEstimate::of(&nll),
        kl: McEstimate::of(&kl),
        kl_closed_form: gaussian_kl(b, a)?,
        gap,
        entropy_b: b.entropy(),
        lambda_var: lambda,
        assumption_violated: !ok,
        holds: gap.mean >= -3.0 * gap.std_err,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NllEquivalenceReport {
    /// `NLL = a·MSE + b`.
    pub a: f64,
    pub b: f64,
    pub max_residual: f64,
    pub argmin_nll: usize,
    pub argmin_mse: usize,
    pub holds: bool,
}

pub const NLL_TOL: f64 = 1e-10;

/// Sweeps the decoder family `W z + c + t·1` over `grid` and compares the
/// mean Gaussian NLL of `x_a` with the mean squared error.
pub fn gaussian_nll_equivalence(zs: &[Vec<f64>], x_a: &[f64], decoder: &AffineDecoder, lambda_var: f64, grid: &[f64]) -> Result<NllEquivalenceReport> {
    if !(lambda_var > 0.0) {
        return Err(CdnError::invalid(format!("variance {lambda_var} must be positive")));
    }
    if zs.is_empty() || grid.is_empty() || x_a.len() != decoder.out_dim() {
        return Err(CdnError::invalid("need samples, a grid and matching output size"));
    }
    let n = x_a.len() as f64;
    let a = 1.0 / (2.0 * lambda_var);
    let b = 0.5 * n * (2.0 * PI * lambda_var).ln();
    let mut mse = Vec::with_capacity(grid.len());
    let mut nll = Vec::with_capacity(grid.len());
    for &t in grid {
        let (mut m, mut l) = (0.0, 0.0);
        for z in zs {
            let mu = decoder.mean(z);
            for (mk, xk) in mu.iter().zip(x_a) {
                let r = xk - (mk + t);
                m += r * r;
                l += 0.5 * (2.0 * PI * lambda_var).ln() + r * r / (2.0 * lambda_var);
            }
        }
        mse.push(m / zs.len() as f64);
        nll.push(l / zs.len() as f64);
    }
    let argmin = |v: &[f64]| v.iter().enumerate().min_by(|x, y| x.1.total_cmp(y.1)).map_or(0, |(k, _)| k);
    let max_residual = nll.iter().zip(&mse).map(|(l, m)| (l - (a * m + b)).abs()).fold(0.0, f64::max);
    let (argmin_nll, argmin_mse) = (argmin(&nll), argmin(&mse));
    Ok(NllEquivalenceReport { a, b, max_residual, argmin_nll, argmin_mse, holds: max_residual <= NLL_TOL && argmin_nll == argmin_mse })
}

/// `log P(z|x) − log P(x|z)` for Gaussian encoder and decoder: a variance
/// term plus a bias term.
pub fn assumption_delta(n: usize, m: usize, sigma_theta2: f64, sigma_phi2: f64, bias_x: f64, bias_z: f64) -> Result<f64> {
    if !(sigma_theta2 > 0.0) || !(sigma_phi2 > 0.0) {
        return Err(CdnError::invalid("variances must be positive"));
    }
    if n == 0 || m == 0 {
        return Err(CdnError::invalid("dimensions must be at least 1"));
    }
    let variance = n as f64 / 2.0 * (2.0 * PI * sigma_phi2).ln() - m as f64 / 2.0 * (2.0 * PI * sigma_theta2).ln();
    Ok(variance + bias_x / (2.0 * sigma_phi2) - bias_z / (2.0 * sigma_theta2))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CheckName {
    Kl,
    Theorem1,
    Theorem2,
    Nll,
    Delta,
}

impl CheckName {
    pub const ALL: [CheckName; 5] = [CheckName::Kl, CheckName::Theorem1, CheckName::Theorem2, CheckName::Nll, CheckName::Delta];
}

impl fmt::Display for CheckName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CheckName::Kl => "kl",
            CheckName::Theorem1 => "theorem1",
            CheckName::Theorem2 => "theorem2",
            CheckName::Nll => "nll",
            CheckName::Delta => "delta",
        })
    }
}

impl FromStr for CheckName {
    type Err = CdnError;
    fn from_str(s: &str) -> Result<Self> {
        CheckName::ALL
            .into_iter()
            .find(|c| c.to_string() == s)
            .ok_or_else(|| CdnError::invalid(format!("unknown check {s:?}; expected one of kl, theorem1, theorem2, nll, delta")))
    }
}

/// One line of the verification report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckRecord {
    pub name: String,
    pub statistic: f64,
    pub threshold: f64,
    pub pass: bool,
}

pub const THEOREM1_TOL: f64 = 1e-12;
pub const THEOREM2_SAMPLES: usize = 100_000;

fn kl_records(seed: u64) -> Result<Vec<CheckRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    for k in 0..10 {
        let spec = |rng: &mut ChaCha8Rng| {
            let mean = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let var = (0..3).map(|_| rng.random_range(0.3..2.0)).collect();
            GaussianSpec::new(mean, var)
        };
        let (p, q) = (spec(&mut rng)?, spec(&mut rng)?);
        let mc = gaussian_kl_mc(&p, &q, 100_000, seed.wrapping_add(k))?;
        worst = worst.max((gaussian_kl(&p, &q)? - mc.mean).abs() / mc.std_err);
    }
    Ok(vec![CheckRecord { name: "kl_closed_form_vs_mc_max_z".into(), statistic: worst, threshold: 4.0, pass: worst <= 4.0 }])
}

fn theorem1_records(seed: u64) -> Result<Vec<CheckRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut worst_equal, mut weakest_perturbed) = (0.0f64, f64::INFINITY);
    for _ in 0..50 {
        let (ni, nd, nz) = (rng.random_range(1..=8), rng.random_range(2..=8), rng.random_range(2..=8));
        let model = DiscreteCondModel::random(ni, nd, nz, &mut rng);
        let equal = model.equalized();
        worst_equal = worst_equal.max(verify_theorem1(&equal, THEOREM1_TOL)?.max_ci_violation);
        let (i, d, z) = (rng.random_range(0..ni), rng.random_range(0..nd), rng.random_range(0..nz));
        let bumped = equal.perturbed(i, d, z, 0.1)?;
        weakest_perturbed = weakest_perturbed.min(verify_theorem1(&bumped, THEOREM1_TOL)?.max_ci_violation);
    }
    Ok(vec![
        CheckRecord { name: "theorem1_equalized_max_violation".into(), statistic: worst_equal, threshold: THEOREM1_TOL, pass: worst_equal <= THEOREM1_TOL },
        CheckRecord { name: "theorem1_perturbed_min_violation".into(), statistic: weakest_perturbed, threshold: THEOREM1_TOL, pass: weakest_perturbed > THEOREM1_TOL },
    ])
}

/// Runs 100 random assumption-enforced setups; returns how many satisfy
/// the bound and how many could not meet the assumption.
pub fn theorem2_sweep(setups: usize, n_samples: usize, seed: u64) -> Result<(usize, usize)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut holds, mut violated) = (0, 0);
    for k in 0..setups {
        let n_x = rng.random_range(2..=6);
        let setup = Theorem2Setup::random(n_x, &mut rng);
        let r = verify_theorem2_bound(&setup, n_samples, seed.wrapping_add(1 + k as u64))?;
        holds += usize::from(r.holds && !r.assumption_violated);
        violated += usize::from(r.assumption_violated);
    }
    Ok((holds, violated))
}

fn theorem2_records(seed: u64) -> Result<Vec<CheckRecord>> {
    let (holds, violated) = theorem2_sweep(100, THEOREM2_SAMPLES, seed)?;
    Ok(vec![
        CheckRecord { name: "theorem2_bound_holds_of_100".into(), statistic: holds as f64, threshold: 95.0, pass: holds >= 95 },
        CheckRecord { name: "theorem2_assumption_violations".into(), statistic: violated as f64, threshold: 0.0, pass: violated == 0 },
    ])
}

fn nll_records(seed: u64) -> Result<Vec<CheckRecord>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut same = true;
    for &lambda in &[0.05, 0.5, 1.0, 3.0] {
        let (n, m) = (4, 2);
        let decoder = AffineDecoder {
            w: (0..n * m).map(|_| rng.random_range(-1.0..1.0)).collect(),
            c: (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
            lambda_var: lambda,
        };
        let zs: Vec<Vec<f64>> = (0..50).map(|_| (0..m).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let grid: Vec<f64> = (0..41).map(|k| -1.0 + 0.05 * k as f64).collect();
        let r = gaussian_nll_equivalence(&zs, &x, &decoder, lambda, &grid)?;
        worst = worst.max(r.max_residual);
        same &= r.argmin_nll == r.argmin_mse;
    }
    Ok(vec![
        CheckRecord { name: "nll_minus_scaled_mse_max_residual".into(), statistic: worst, threshold: NLL_TOL, pass: worst <= NLL_TOL },
        CheckRecord { name: "nll_mse_same_argmin".into(), statistic: f64::from(u8::from(same)), threshold: 1.0, pass: same },
    ])
}

fn delta_records() -> Result<Vec<CheckRecord>> {
    let d = assumption_delta(12288, 128, 1.0, 2.0, 0.0, 0.0)?;
    Ok(vec![CheckRecord { name: "delta_image_scale_positive".into(), statistic: d, threshold: 0.0, pass: d > 0.0 }])
}

/// Runs the selected checks in a fixed order.
pub fn run_checks(checks: &[CheckName], seed: u64) -> Result<Vec<CheckRecord>> {
    let mut selected = checks.to_vec();
    selected.sort();
    selected.dedup();
    let mut out = Vec::new();
    for c in selected {
        out.extend(match c {
            CheckName::Kl => kl_records(seed)?,
            CheckName::Theorem1 => theorem1_records(seed)?,
            CheckName::Theorem2 => theorem2_records(seed)?,
            CheckName::Nll => nll_records(seed)?,
            CheckName::Delta => delta_records()?,
        });
    }
    Ok(out)
}
