//! Batch normalization over a `(outer, channels, inner)` layout; statistics
//! are per channel, pooled over `outer` and `inner`.

use super::BN_EPS;

#[derive(Debug, Clone)]
pub(crate) struct BnCache {
    pub xhat: Vec<f64>,
    pub inv_std: Vec<f64>,
    pub mean: Vec<f64>,
    pub var_unbiased: Vec<f64>,
    pub batch_stats: bool,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct Layout {
    pub outer: usize,
    pub channels: usize,
    pub inner: usize,
}

impl Layout {
    fn for_each_channel(&self, x: &[f64], mut f: impl FnMut(usize, f64)) {
        for o in 0..self.outer {
            for c in 0..self.channels {
                let base = (o * self.channels + c) * self.inner;
                for &v in &x[base..base + self.inner] {
                    f(c, v);
                }
            }
        }
    }

    fn count(&self) -> usize {
        self.outer * self.inner
    }
}

pub(crate) fn forward(
    x: &[f64],
    layout: Layout,
    gamma: &[f64],
    beta: &[f64],
    running_mean: &[f64],
    running_var: &[f64],
    batch_stats: bool,
) -> (Vec<f64>, BnCache) {
    let ch = layout.channels;
    let (mean, var, var_unbiased) = if batch_stats {
        let n = layout.count() as f64;
        let mut mean = vec![0.0; ch];
        layout.for_each_channel(x, |c, v| mean[c] += v);
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; ch];
        layout.for_each_channel(x, |c, v| var[c] += (v - mean[c]).powi(2));
        let unbiased = var
            .iter()
            .map(|s| if n > 1.0 { s / (n - 1.0) } else { s / n })
            .collect();
        var.iter_mut().for_each(|s| *s /= n);
        (mean, var, unbiased)
    } else {
        (running_mean.to_vec(), running_var.to_vec(), running_var.to_vec())
    };
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut xhat = vec![0.0; x.len()];
    let mut out = vec![0.0; x.len()];
    for o in 0..layout.outer {
        for c in 0..ch {
            let base = (o * ch + c) * layout.inner;
            for i in base..base + layout.inner {
                let h = (x[i] - mean[c]) * inv_std[c];
                xhat[i] = h;
                out[i] = gamma[c] * h + beta[c];
            }
        }
    }
    (
        out,
        BnCache {
            xhat,
            inv_std,
            mean,
            var_unbiased,
            batch_stats,
        },
    )
}

/// Returns the input gradient and accumulates into `dgamma` / `dbeta`.
pub(crate) fn backward(
    dy: &[f64],
    cache: &BnCache,
    layout: Layout,
    gamma: &[f64],
    dgamma: &mut [f64],
    dbeta: &mut [f64],
) -> Vec<f64> {
    let ch = layout.channels;
    let mut sum_dy = vec![0.0; ch];
    let mut sum_dy_xhat = vec![0.0; ch];
    for o in 0..layout.outer {
        for c in 0..ch {
            let base = (o * ch + c) * layout.inner;
            let span = base..base + layout.inner;
            for (&g, &x) in dy[span.clone()].iter().zip(&cache.xhat[span]) {
                sum_dy[c] += g;
                sum_dy_xhat[c] += g * x;
            }
        }
    }
    for c in 0..ch {
        dgamma[c] += sum_dy_xhat[c];
        dbeta[c] += sum_dy[c];
    }
    let n = layout.count() as f64;
    let mut dx = vec![0.0; dy.len()];
    for o in 0..layout.outer {
        for c in 0..ch {
            let scale = gamma[c] * cache.inv_std[c];
            let base = (o * ch + c) * layout.inner;
            for i in base..base + layout.inner {
                dx[i] = if cache.batch_stats {
                    scale * (dy[i] - sum_dy[c] / n - cache.xhat[i] * sum_dy_xhat[c] / n)
                } else {
                    scale * dy[i]
                };
            }
        }
    }
    dx
}
