//! Exact t-SNE: Gaussian input affinities calibrated per point to a target
//! perplexity, Student-t output affinities, gradient descent with momentum
//! and early exaggeration. Duplicate rows are optimized as one point.

use ndarray::{Array1, Array2, ArrayView2};
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Bisection stops once `|H - ln(perplexity)|` drops below this (nats).
pub const ENTROPY_TOL: f64 = 1e-5;
const MAX_BISECTION: usize = 200;
const INIT_SCALE: f64 = 1e-4;
/// Floor for output affinities inside the logarithm.
const Q_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TsneConfig {
    pub perplexity: f64,
    pub iterations: usize,
    pub learning_rate: f64,
    pub initial_momentum: f64,
    pub final_momentum: f64,
    pub momentum_switch: usize,
    pub exaggeration: f64,
    pub exaggeration_steps: usize,
    pub seed: u64,
}

impl Default for TsneConfig {
    fn default() -> Self {
        TsneConfig {
            perplexity: 5.0,
            iterations: 1000,
            learning_rate: 200.0,
            initial_momentum: 0.5,
            final_momentum: 0.8,
            momentum_switch: 250,
            exaggeration: 4.0,
            exaggeration_steps: 100,
            seed: 0,
        }
    }
}

impl TsneConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if !(self.perplexity >= 1.0 && self.perplexity.is_finite()) {
            return err(format!("tsne.perplexity = {} must be >= 1", self.perplexity));
        }
        if self.iterations == 0 {
            return err("tsne.iterations must be >= 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return err(format!("tsne.learning_rate = {} must be > 0", self.learning_rate));
        }
        for (name, m) in [
            ("initial_momentum", self.initial_momentum),
            ("final_momentum", self.final_momentum),
        ] {
            if !(0.0..1.0).contains(&m) {
                return err(format!("tsne.{name} = {m} must lie in [0, 1)"));
            }
        }
        if !(self.exaggeration >= 1.0 && self.exaggeration.is_finite()) {
            return err(format!("tsne.exaggeration = {} must be >= 1", self.exaggeration));
        }
        Ok(())
    }
}

/// Symmetrized input affinities with the per-point calibration that produced
/// them.
#[derive(Debug, Clone)]
pub struct Affinities {
    /// `N × N`, symmetric, zero diagonal, sums to one.
    pub p: Array2<f64>,
    /// Gaussian precision `1 / (2σ²)` per point.
    pub beta: Array1<f64>,
    /// Entropy of each conditional distribution, nats.
    pub entropy: Array1<f64>,
}

impl Affinities {
    /// `exp(H)` per point, the achieved perplexity.
    pub fn perplexities(&self) -> Array1<f64> {
        self.entropy.mapv(f64::exp)
    }
}

fn squared_distances(x: ArrayView2<'_, f64>) -> Array2<f64> {
    let n = x.nrows();
    let mut d = Array2::zeros((n, n));
    for i in 0..n {
        for j in i + 1..n {
            let v: f64 = x.row(i).iter().zip(x.row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
            d[[i, j]] = v;
            d[[j, i]] = v;
        }
    }
    d
}

/// Conditional row `p_{j|i}` for precision `beta` and its entropy (nats).
fn conditional(dist: &[f64], i: usize, beta: f64, out: &mut [f64]) -> f64 {
    // Shifting by the nearest distance keeps the largest weight at exp(0).
    let nearest = dist
        .iter()
        .enumerate()
        .filter(|&(j, _)| j != i)
        .map(|(_, &d)| d)
        .fold(f64::INFINITY, f64::min);
    let mut total = 0.0;
    for (j, (o, &d)) in out.iter_mut().zip(dist).enumerate() {
        *o = if j == i { 0.0 } else { (-(d - nearest) * beta).exp() };
        total += *o;
    }
    let mut weighted = 0.0;
    for (o, &d) in out.iter_mut().zip(dist) {
        *o /= total;
        weighted += *o * (d - nearest);
    }
    total.ln() + beta * weighted
}

/// Calibrates each point by bisection on `beta` and symmetrizes.
pub fn affinities(x: ArrayView2<'_, f64>, perplexity: f64) -> Result<Affinities> {
    let n = x.nrows();
    if !(perplexity >= 1.0) || perplexity >= n as f64 {
        return Err(Error::Config(format!(
            "perplexity {perplexity} needs 1 <= perplexity < number of distinct points ({n})"
        )));
    }
    let dist = squared_distances(x);
    let target = perplexity.ln();
    let mut cond = Array2::<f64>::zeros((n, n));
    let mut beta = Array1::<f64>::ones(n);
    let mut entropy = Array1::<f64>::zeros(n);
    let mut row = vec![0.0; n];
    for i in 0..n {
        let d = dist.row(i).to_vec();
        let (mut lo, mut hi) = (0.0_f64, f64::INFINITY);
        let mut b = 1.0;
        let mut h = conditional(&d, i, b, &mut row);
        for _ in 0..MAX_BISECTION {
            if (h - target).abs() < ENTROPY_TOL {
                break;
            }
            if h > target {
                lo = b;
                b = if hi.is_finite() { (b + hi) / 2.0 } else { b * 2.0 };
            } else {
                hi = b;
                b = (b + lo) / 2.0;
            }
            h = conditional(&d, i, b, &mut row);
        }
        if (h - target).abs() >= ENTROPY_TOL {
            return Err(Error::Numeric(format!(
                "perplexity calibration failed for point {i}: entropy {h} vs target {target}"
            )));
        }
        beta[i] = b;
        entropy[i] = h;
        cond.row_mut(i).assign(&Array1::from(row.clone()));
    }
    let p = (&cond + &cond.t()) / (2.0 * n as f64);
    Ok(Affinities { p, beta, entropy })
}

/// Unnormalized Student-t kernel `1 / (1 + |y_i - y_j|²)` with zero diagonal,
/// and its sum.
fn kernel(y: ArrayView2<'_, f64>) -> (Array2<f64>, f64) {
    let mut w = squared_distances(y).mapv(|d| 1.0 / (1.0 + d));
    w.diag_mut().fill(0.0);
    let z = w.sum();
    (w, z)
}

/// `KL(P ‖ Q)` for output coordinates `y`.
pub fn kl_divergence(p: &Array2<f64>, y: ArrayView2<'_, f64>) -> f64 {
    let (w, z) = kernel(y);
    p.iter()
        .zip(&w)
        .filter(|(&pij, _)| pij > 0.0)
        .map(|(&pij, &wij)| pij * (pij / (wij / z).max(Q_FLOOR)).ln())
        .sum()
}

/// `∂KL/∂y_i = 4 Σ_j (p_ij − q_ij)(y_i − y_j) / (1 + |y_i − y_j|²)`.
pub fn kl_gradient(p: &Array2<f64>, y: ArrayView2<'_, f64>) -> Array2<f64> {
    let (n, dims) = y.dim();
    let (w, z) = kernel(y);
    let mut grad = Array2::zeros((n, dims));
    for i in 0..n {
        for j in 0..n {
            if i == j {
                continue;
            }
            let coeff = 4.0 * (p[[i, j]] - w[[i, j]] / z) * w[[i, j]];
            for k in 0..dims {
                grad[[i, k]] += coeff * (y[[i, k]] - y[[j, k]]);
            }
        }
    }
    grad
}

#[derive(Debug, Clone)]
pub struct TsneResult {
    /// `N × 2`, one row per input row; duplicates share coordinates.
    pub y: Array2<f64>,
    /// Input row → distinct point it was collapsed to.
    pub point_of_row: Vec<usize>,
    pub affinities: Affinities,
    /// KL at the initial coordinates, without exaggeration.
    pub initial_kl: f64,
    pub final_kl: f64,
}

/// Distinct rows (bitwise equality) in first-seen order plus the row map.
pub fn collapse_duplicates(x: ArrayView2<'_, f64>) -> (Array2<f64>, Vec<usize>) {
    let mut keys: Vec<Vec<u64>> = Vec::new();
    let mut map = Vec::with_capacity(x.nrows());
    for row in x.rows() {
        let key: Vec<u64> = row.iter().map(|v| (v + 0.0).to_bits()).collect();
        let idx = match keys.iter().position(|k| *k == key) {
            Some(i) => i,
            None => {
                keys.push(key);
                keys.len() - 1
            }
        };
        map.push(idx);
    }
    let mut distinct = Array2::zeros((keys.len(), x.ncols()));
    for (r, &idx) in map.iter().enumerate() {
        distinct.row_mut(idx).assign(&x.row(r));
    }
    (distinct, map)
}

pub fn tsne(x: ArrayView2<'_, f64>, cfg: &TsneConfig) -> Result<TsneResult> {
    cfg.validate()?;
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("t-SNE input".into()));
    }
    let (distinct, point_of_row) = collapse_duplicates(x);
    let m = distinct.nrows();
    if m == 1 {
        return Err(Error::Config("t-SNE input rows are all identical".into()));
    }
    if m < 4 {
        return Err(Error::Config(format!("t-SNE needs at least 4 distinct rows, got {m}")));
    }
    let aff = affinities(distinct.view(), cfg.perplexity)?;

    let normal = Normal::new(0.0, INIT_SCALE).expect("positive scale");
    let mut r = rng::named(cfg.seed, "tsne.init");
    let mut y = Array2::from_shape_fn((m, 2), |_| normal.sample(&mut r));
    let initial_kl = kl_divergence(&aff.p, y.view());

    let exaggerated = &aff.p * cfg.exaggeration;
    let mut velocity = Array2::<f64>::zeros((m, 2));
    for step in 0..cfg.iterations {
        let p = if step < cfg.exaggeration_steps {
            &exaggerated
        } else {
            &aff.p
        };
        let momentum = if step < cfg.momentum_switch {
            cfg.initial_momentum
        } else {
            cfg.final_momentum
        };
        let grad = kl_gradient(p, y.view());
        velocity = momentum * &velocity - cfg.learning_rate * &grad;
        y += &velocity;
        // Translation leaves the objective unchanged; keep the layout centred.
        let centre = y.mean_axis(ndarray::Axis(0)).expect("non-empty");
        y -= &centre;
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!("t-SNE diverged at iteration {step}")));
        }
    }
    let final_kl = kl_divergence(&aff.p, y.view());

    let mut out = Array2::zeros((x.nrows(), 2));
    for (r, &idx) in point_of_row.iter().enumerate() {
        out.row_mut(r).assign(&y.row(idx));
    }
    Ok(TsneResult {
        y: out,
        point_of_row,
        affinities: aff,
        initial_kl,
        final_kl,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn conditional_of_equidistant_points_is_uniform() {
        let mut out = vec![0.0; 4];
        let h = conditional(&[0.0, 2.0, 2.0, 2.0], 0, 0.7, &mut out);
        assert_eq!(out[0], 0.0);
        for v in &out[1..] {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!((h - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn kl_is_zero_when_q_equals_p() {
        let y = array![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
        let (w, z) = kernel(y.view());
        let p = w / z;
        assert!(kl_divergence(&p, y.view()).abs() < 1e-15);
        assert!(kl_gradient(&p, y.view()).iter().all(|g| g.abs() < 1e-15));
    }

    #[test]
    fn collapse_keeps_first_seen_order() {
        let x = array![[1.0, 2.0], [3.0, 4.0], [1.0, 2.0], [-0.0, 0.0], [0.0, 0.0]];
        let (d, map) = collapse_duplicates(x.view());
        assert_eq!(map, vec![0, 1, 0, 2, 2]);
        assert_eq!(d.nrows(), 3);
    }

    #[test]
    fn config_rejects_bad_values() {
        assert!(TsneConfig::default().validate().is_ok());
        assert!(TsneConfig {
            perplexity: 0.5,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TsneConfig {
            iterations: 0,
            ..Default::default()
        }
        .validate()
        .is_err());
        assert!(TsneConfig {
            final_momentum: 1.0,
            ..Default::default()
        }
        .validate()
        .is_err());
    }
}
