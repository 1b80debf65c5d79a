//! Counterexamples showing that `AᵀB = 0` does not force `f(Ax) = f((A+B)x)`
//! for a nonlinear `f`, plus a randomized study over projected pairs.

use std::fmt;

use rand::Rng as _;

use crate::error::{Error, Result};
use crate::rng::{gaussian_vec, rng_for, sub_seed};
use crate::tensor::Tensor;

/// One constructed or sampled `(A, B, x, f)` instance.
#[derive(Debug, Clone, PartialEq)]
pub struct CounterexampleRecord {
    pub n: usize,
    pub a: Tensor,
    pub b: Tensor,
    pub x: Vec<f64>,
    pub function: String,
    pub f_ax: Vec<f64>,
    pub f_abx: Vec<f64>,
    /// Largest absolute entry of the orthogonality product.
    pub residual: f64,
    /// Euclidean distance between the two outputs.
    pub deviation: f64,
}

impl CounterexampleRecord {
    /// Zero residual and a strictly positive deviation.
    pub fn certifies(&self) -> bool {
        self.residual == 0.0 && self.deviation > 0.0
    }
}

fn matvec(m: &Tensor, x: &[f64]) -> Vec<f64> {
    let cols = m.shape()[1];
    m.data().chunks(cols).map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum()).collect()
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q) * (p - q)).sum::<f64>().sqrt()
}

fn max_abs(t: &Tensor) -> f64 {
    t.data().iter().fold(0.0, |m, v| m.max(v.abs()))
}

fn record(n: usize, a: Tensor, b: Tensor, x: Vec<f64>, function: &str, residual: f64, f: impl Fn(&[f64]) -> Vec<f64>) -> Result<CounterexampleRecord> {
    let ax = matvec(&a, &x);
    let abx = matvec(&a.add(&b)?, &x);
    let (f_ax, f_abx) = (f(&ax), f(&abx));
    let deviation = distance(&f_ax, &f_abx);
    Ok(CounterexampleRecord {
        n,
        a,
        b,
        x,
        function: function.into(),
        f_ax,
        f_abx,
        residual,
        deviation,
    })
}

/// Row vectors `A = (1, 0)`, `B = (0, −1)`, `x = (π/2, π)` under `sin`.
/// The orthogonality residual is the inner product `A·B`.
pub fn counterexample_1d() -> CounterexampleRecord {
    counterexample_1d_with(Tensor::from_rows(&[vec![0.0, -1.0]]).expect("1x2"))
}

/// [`counterexample_1d`] with a caller-chosen `B` (row vector).
pub fn counterexample_1d_with(b: Tensor) -> CounterexampleRecord {
    let a = Tensor::from_rows(&[vec![1.0, 0.0]]).expect("1x2");
    let residual = a.data().iter().zip(b.data()).map(|(p, q)| p * q).sum::<f64>().abs();
    let x = vec![std::f64::consts::FRAC_PI_2, std::f64::consts::PI];
    record(1, a, b, x, "sin", residual, |v| v.iter().map(|t| t.sin()).collect()).expect("1x2 shapes")
}

/// The 2×2 construction: `A = e₁e₁ᵀ`, `B = e₂e₂ᵀ`, `x = (1, −1)` and the
/// piecewise-linear `f(v) = relu(M·v)` with `M = [[1, 1], [0, −1]]`.
pub fn counterexample_2d() -> CounterexampleRecord {
    let a = Tensor::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]]).expect("2x2");
    let b = Tensor::from_rows(&[vec![0.0, 0.0], vec![0.0, 1.0]]).expect("2x2");
    let m = Tensor::from_rows(&[vec![1.0, 1.0], vec![0.0, -1.0]]).expect("2x2");
    let residual = max_abs(&a.transpose().and_then(|t| t.matmul(&b)).expect("2x2"));
    record(2, a, b, vec![1.0, -1.0], "relu-2d", residual, move |v| {
        matvec(&m, v).into_iter().map(|t| t.max(0.0)).collect()
    })
    .expect("2x2 shapes")
}

/// The `n`-dimensional extension: `A = e₁e₁ᵀ`, `B = eₙeₙᵀ`, `x = e₁ − eₙ`,
/// `f(v) = relu(M·v)` where `M` has row 1 = `e₁ + eₙ`, row n = `−eₙ` and
/// zeros elsewhere.
pub fn counterexample_nd(n: usize) -> Result<CounterexampleRecord> {
    if n < 2 {
        return Err(Error::Usage(format!("counterexample_nd needs n >= 2, got {n}")));
    }
    let unit = |i: usize, j: usize| {
        let mut t = Tensor::zeros(&[n, n]);
        t.data_mut()[i * n + j] = 1.0;
        t
    };
    let a = unit(0, 0);
    let b = unit(n - 1, n - 1);
    let mut m = Tensor::zeros(&[n, n]);
    m.data_mut()[0] = 1.0;
    m.data_mut()[n - 1] = 1.0;
    m.data_mut()[(n - 1) * n + n - 1] = -1.0;
    let mut x = vec![0.0; n];
    x[0] = 1.0;
    x[n - 1] = -1.0;
    let residual = max_abs(&a.transpose()?.matmul(&b)?);
    record(n, a, b, x, "relu-nd", residual, move |v| {
        matvec(&m, v).into_iter().map(|t| t.max(0.0)).collect()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Nonlinearity {
    Sin,
    Relu,
    /// Two-layer relu network with fixed random weights.
    Mlp,
    /// Linear control arm.
    Identity,
}

impl fmt::Display for Nonlinearity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Nonlinearity::Sin => "sin",
            Nonlinearity::Relu => "relu",
            Nonlinearity::Mlp => "mlp",
            Nonlinearity::Identity => "identity",
        })
    }
}

impl std::str::FromStr for Nonlinearity {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sin" => Ok(Nonlinearity::Sin),
            "relu" => Ok(Nonlinearity::Relu),
            "mlp" => Ok(Nonlinearity::Mlp),
            "identity" => Ok(Nonlinearity::Identity),
            other => Err(Error::Config(format!("unknown nonlinearity {other:?}"))),
        }
    }
}

/// Options for [`random_orthogonality_study`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StudyOptions {
    pub n: usize,
    pub trials: usize,
    pub nonlinearity: Nonlinearity,
    pub seed: u64,
    /// Rank of `A`. `n` makes the constraint infeasible and every trial is
    /// skipped.
    pub rank_a: usize,
    /// Force `B = 0` (control arm).
    pub zero_b: bool,
}

impl StudyOptions {
    pub fn new(n: usize, trials: usize, nonlinearity: Nonlinearity, seed: u64) -> Self {
        StudyOptions {
            n,
            trials,
            nonlinearity,
            seed,
            rank_a: n / 2,
            zero_b: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrialRecord {
    pub trial: usize,
    pub n: usize,
    pub residual: f64,
    pub deviation: f64,
    /// `‖Bx‖`, the deviation of the linear control.
    pub bx_norm: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StudySummary {
    pub options: StudyOptions,
    pub trials: Vec<TrialRecord>,
    pub skipped: usize,
    pub max_residual: f64,
    pub mean_deviation: f64,
    pub max_deviation: f64,
    /// Fraction of completed trials with deviation above 1e-6.
    pub fraction_nonzero: f64,
}

/// Residual bound every sampled pair must satisfy.
pub const STUDY_RESIDUAL_TOL: f64 = 1e-10;
const NONZERO_DEVIATION: f64 = 1e-6;

/// Orthonormal basis of the column space of `m` (`n×k`, column-major input
/// as a list of columns) by modified Gram-Schmidt.
fn orthonormal_columns(cols: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for c in cols {
        let mut v = c.clone();
        for _ in 0..2 {
            for q in &basis {
                let d: f64 = v.iter().zip(q).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(q).for_each(|(a, b)| *a -= d * b);
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-9 {
            basis.push(v.into_iter().map(|a| a / norm).collect());
        }
    }
    basis
}

fn apply(kind: Nonlinearity, v: &[f64], mlp: &(Tensor, Tensor)) -> Vec<f64> {
    match kind {
        Nonlinearity::Sin => v.iter().map(|t| t.sin()).collect(),
        Nonlinearity::Relu => v.iter().map(|t| t.max(0.0)).collect(),
        Nonlinearity::Identity => v.to_vec(),
        Nonlinearity::Mlp => {
            let h: Vec<f64> = matvec(&mlp.0, v).into_iter().map(|t| t.max(0.0)).collect();
            matvec(&mlp.1, &h)
        }
    }
}

/// Sample `A` of rank `rank_a`, then `B` with every column projected onto
/// the orthogonal complement of `A`'s column space, and compare `f(Ax)`
/// with `f((A+B)x)`. A trial whose residual exceeds
/// [`STUDY_RESIDUAL_TOL`] after projection aborts the study.
pub fn random_orthogonality_study(opts: StudyOptions) -> Result<StudySummary> {
    let n = opts.n;
    if n < 2 {
        return Err(Error::Usage(format!("study needs n >= 2, got {n}")));
    }
    if opts.rank_a == 0 || opts.rank_a > n {
        return Err(Error::Usage(format!("rank of A must be in 1..={n}")));
    }
    let mut mlp_rng = rng_for(opts.seed, "ortho.mlp");
    let scale = 1.0 / (n as f64).sqrt();
    let mlp = (
        Tensor::new(vec![2 * n, n], gaussian_vec(&mut mlp_rng, 2 * n * n, scale))?,
        Tensor::new(vec![n, 2 * n], gaussian_vec(&mut mlp_rng, 2 * n * n, scale))?,
    );
    let mut trials = Vec::new();
    let mut skipped = 0;
    for trial in 0..opts.trials {
        let mut rng = rng_for(sub_seed(opts.seed, trial as u64), "ortho.trial");
        // A = U·V with U n×k, V k×n: rank k almost surely.
        let k = opts.rank_a;
        let u = Tensor::new(vec![n, k], gaussian_vec(&mut rng, n * k, 1.0))?;
        let v = Tensor::new(vec![k, n], gaussian_vec(&mut rng, k * n, 1.0))?;
        let a = u.matmul(&v)?;
        let a_cols: Vec<Vec<f64>> = (0..n).map(|j| (0..n).map(|i| a.data()[i * n + j]).collect()).collect();
        let basis = orthonormal_columns(&a_cols);
        if basis.len() >= n {
            skipped += 1;
            continue;
        }
        let mut b = Tensor::new(vec![n, n], gaussian_vec(&mut rng, n * n, 1.0))?;
        if opts.zero_b {
            b = Tensor::zeros(&[n, n]);
        }
        for j in 0..n {
            let mut col: Vec<f64> = (0..n).map(|i| b.data()[i * n + j]).collect();
            for _ in 0..2 {
                for q in &basis {
                    let d: f64 = col.iter().zip(q).map(|(p, r)| p * r).sum();
                    col.iter_mut().zip(q).for_each(|(p, r)| *p -= d * r);
                }
            }
            for (i, c) in col.into_iter().enumerate() {
                b.data_mut()[i * n + j] = c;
            }
        }
        let residual = max_abs(&a.transpose()?.matmul(&b)?);
        if residual >= STUDY_RESIDUAL_TOL {
            return Err(Error::Validation(format!(
                "trial {trial}: orthogonality residual {residual:e} after projection"
            )));
        }
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let ax = matvec(&a, &x);
        let abx = matvec(&a.add(&b)?, &x);
        let deviation = distance(&apply(opts.nonlinearity, &ax, &mlp), &apply(opts.nonlinearity, &abx, &mlp));
        let bx_norm = matvec(&b, &x).iter().map(|t| t * t).sum::<f64>().sqrt();
        trials.push(TrialRecord {
            trial,
            n,
            residual,
            deviation,
            bx_norm,
        });
    }
    let done = trials.len().max(1) as f64;
    Ok(StudySummary {
        options: opts,
        skipped,
        max_residual: trials.iter().fold(0.0, |m, t| m.max(t.residual)),
        mean_deviation: trials.iter().map(|t| t.deviation).sum::<f64>() / done,
        max_deviation: trials.iter().fold(0.0, |m, t| m.max(t.deviation)),
        fraction_nonzero: trials.iter().filter(|t| t.deviation > NONZERO_DEVIATION).count() as f64 / done,
        trials,
    })
}

/// `trial, n, residual, deviation` rows.
pub fn study_csv(summary: &StudySummary) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["trial", "n", "residual", "deviation"])?;
    for t in &summary.trials {
        w.write_record([t.trial.to_string(), t.n.to_string(), t.residual.to_string(), t.deviation.to_string()])?;
    }
    w.into_inner().map_err(|e| Error::Format(format!("csv buffer: {e}")))
}
