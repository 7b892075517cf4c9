//! Compact CNN: temporal convolution, depthwise spatial convolution and a
//! separable convolution block, each followed by batch normalization.
//!
//! Intermediate layouts: the temporal convolution output is stored as
//! `(b, row, t, filter)` (the im2col GEMM order), everything after the
//! spatial convolution as `(b, map, t)`.

use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, Array3, ArrayView2, ArrayView3, ArrayViewMut2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::bn::{self, BnCache, Layout};
use super::{add, check_finite, grad, Mode, ModelParams, ParamSet};
use crate::error::Result;

#[derive(Debug, Clone)]
pub(crate) struct Cache {
    dims: Dims,
    patches: Array2<f64>,
    bn1: BnCache,
    z1: Vec<f64>,
    bn2: BnCache,
    a2: Vec<f64>,
    mask: Option<Vec<f64>>,
    d1: Vec<f64>,
    s1: Vec<f64>,
    bn3: BnCache,
    a3: Vec<f64>,
    flat: Array2<f64>,
}

impl Cache {
    pub(crate) fn bn_layers(&self) -> [(&'static str, &BnCache); 3] {
        [("bn1", &self.bn1), ("bn2", &self.bn2), ("bn3", &self.bn3)]
    }
}

#[derive(Debug, Clone, Copy)]
struct Dims {
    b: usize,
    c: usize,
    t: usize,
    f1: usize,
    k1: usize,
    depth: usize,
    maps: usize,
    pool1: usize,
    t1: usize,
    k2: usize,
    f2: usize,
    pool2: usize,
    t2: usize,
}

impl Dims {
    fn new(model: &ModelParams, b: usize, c: usize, t: usize) -> Self {
        let e = &model.spec.eegnet;
        let t1 = t / e.pool1;
        Dims {
            b,
            c,
            t,
            f1: e.f1,
            k1: e.temporal_kernel,
            depth: e.depth_mult,
            maps: e.maps(),
            pool1: e.pool1,
            t1,
            k2: e.separable_kernel,
            f2: e.f2,
            pool2: e.pool2,
            t2: t1 / e.pool2,
        }
    }
}

fn elu(z: f64) -> f64 {
    if z > 0.0 {
        z
    } else {
        z.exp_m1()
    }
}

/// ELU derivative expressed through its output.
fn elu_grad(a: f64) -> f64 {
    if a > 0.0 {
        1.0
    } else {
        a + 1.0
    }
}

fn into_vec(a: Array2<f64>) -> Vec<f64> {
    if a.is_standard_layout() {
        let (v, offset) = a.into_raw_vec_and_offset();
        debug_assert_eq!(offset, Some(0));
        v
    } else {
        a.iter().copied().collect()
    }
}

pub(crate) fn forward(
    model: &ModelParams,
    x: ArrayView3<'_, f64>,
    mode: Mode,
    rng: &mut ChaCha8Rng,
) -> Result<(Array2<f64>, Cache)> {
    let (b, c, t) = x.dim();
    let d = Dims::new(model, b, c, t);
    let xs = x.as_slice().expect("standard layout");

    // Temporal convolution, "same" padding with the extra sample on the right.
    let pad1 = (d.k1 - 1) / 2;
    let rows = b * c * t;
    let mut patches = Array2::zeros((rows, d.k1));
    {
        let ps = patches.as_slice_mut().expect("fresh array");
        for bc in 0..b * c {
            let src = &xs[bc * t..(bc + 1) * t];
            for tt in 0..t {
                let row = &mut ps[(bc * t + tt) * d.k1..(bc * t + tt + 1) * d.k1];
                let lo = pad1.saturating_sub(tt);
                let hi = (t + pad1 - tt).min(d.k1);
                for k in lo..hi {
                    row[k] = src[tt + k - pad1];
                }
            }
        }
    }
    let y1 = into_vec(patches.dot(&model.p("conv1.weight").view2().t()));
    let bn1_layout = Layout {
        outer: rows,
        channels: d.f1,
        inner: 1,
    };
    let (z1, bn1) = bn::forward(
        &y1,
        bn1_layout,
        &model.p("bn1.gamma").data,
        &model.p("bn1.beta").data,
        &model.buf("bn1.running_mean").data,
        &model.buf("bn1.running_var").data,
        mode.batch_stats(),
    );
    check_finite("bn1", &z1)?;

    // Depthwise spatial convolution: map m reads temporal filter m / depth.
    let wd = &model.p("depthwise.weight").data;
    let mut y2 = vec![0.0; b * d.maps * t];
    for bi in 0..b {
        for r in 0..c {
            for tt in 0..t {
                let zrow = &z1[((bi * c + r) * t + tt) * d.f1..][..d.f1];
                for (f, &z) in zrow.iter().enumerate() {
                    for j in 0..d.depth {
                        let m = f * d.depth + j;
                        y2[(bi * d.maps + m) * t + tt] += wd[m * c + r] * z;
                    }
                }
            }
        }
    }
    let bn2_layout = Layout {
        outer: b,
        channels: d.maps,
        inner: t,
    };
    let (z2, bn2) = bn::forward(
        &y2,
        bn2_layout,
        &model.p("bn2.gamma").data,
        &model.p("bn2.beta").data,
        &model.buf("bn2.running_mean").data,
        &model.buf("bn2.running_var").data,
        mode.batch_stats(),
    );
    let a2: Vec<f64> = z2.into_iter().map(elu).collect();
    check_finite("block1", &a2)?;

    let bm_count = b * d.maps;
    let mut p1 = vec![0.0; bm_count * d.t1];
    for bm in 0..bm_count {
        for q in 0..d.t1 {
            let s: f64 = a2[bm * t + q * d.pool1..][..d.pool1].iter().sum();
            p1[bm * d.t1 + q] = s / d.pool1 as f64;
        }
    }
    let rate = model.spec.eegnet.dropout;
    let mask = (mode == Mode::Train && rate > 0.0).then(|| {
        let keep = 1.0 / (1.0 - rate);
        (0..p1.len())
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect::<Vec<f64>>()
    });
    let d1 = match &mask {
        Some(m) => p1.iter().zip(m).map(|(v, k)| v * k).collect(),
        None => p1,
    };

    // Separable convolution: per-map temporal kernel, then pointwise mixing.
    let wsd = &model.p("separable.depthwise").data;
    let pad2 = (d.k2 - 1) / 2;
    let mut s1 = vec![0.0; bm_count * d.t1];
    for bm in 0..bm_count {
        let m = bm % d.maps;
        let src = &d1[bm * d.t1..(bm + 1) * d.t1];
        let w = &wsd[m * d.k2..(m + 1) * d.k2];
        for tt in 0..d.t1 {
            let lo = pad2.saturating_sub(tt);
            let hi = (d.t1 + pad2 - tt).min(d.k2);
            s1[bm * d.t1 + tt] = (lo..hi).map(|k| w[k] * src[tt + k - pad2]).sum();
        }
    }
    let wp = model.p("separable.pointwise").view2();
    let mut s2 = vec![0.0; b * d.f2 * d.t1];
    for bi in 0..b {
        let src = ArrayView2::from_shape((d.maps, d.t1), &s1[bi * d.maps * d.t1..(bi + 1) * d.maps * d.t1])
            .expect("block shape");
        let mut dst = ArrayViewMut2::from_shape((d.f2, d.t1), &mut s2[bi * d.f2 * d.t1..(bi + 1) * d.f2 * d.t1])
            .expect("block shape");
        general_mat_mul(1.0, &wp, &src, 0.0, &mut dst);
    }
    let bn3_layout = Layout {
        outer: b,
        channels: d.f2,
        inner: d.t1,
    };
    let (z3, bn3) = bn::forward(
        &s2,
        bn3_layout,
        &model.p("bn3.gamma").data,
        &model.p("bn3.beta").data,
        &model.buf("bn3.running_mean").data,
        &model.buf("bn3.running_var").data,
        mode.batch_stats(),
    );
    let a3: Vec<f64> = z3.into_iter().map(elu).collect();
    check_finite("block2", &a3)?;

    let mut flat = Array2::zeros((b, d.f2 * d.t2));
    for bi in 0..b {
        for o in 0..d.f2 {
            for q in 0..d.t2 {
                let s: f64 = a3[(bi * d.f2 + o) * d.t1 + q * d.pool2..][..d.pool2].iter().sum();
                flat[[bi, o * d.t2 + q]] = s / d.pool2 as f64;
            }
        }
    }
    let bias = model.p("dense.bias").view2();
    let logits = flat.dot(&model.p("dense.weight").view2().t()) + bias;

    let cache = Cache {
        dims: d,
        patches,
        bn1,
        z1,
        bn2,
        a2,
        mask,
        d1,
        s1,
        bn3,
        a3,
        flat,
    };
    Ok((logits, cache))
}

pub(crate) fn backward(
    model: &ModelParams,
    cache: &Cache,
    dlogits: ArrayView2<'_, f64>,
    want_input: bool,
    grads: &mut ParamSet,
) -> Option<Array3<f64>> {
    let d = cache.dims;
    let (b, c, t) = (d.b, d.c, d.t);

    let dw_dense = dlogits.t().dot(&cache.flat);
    grad(grads, "dense.weight")
        .iter_mut()
        .zip(dw_dense.iter())
        .for_each(|(g, v)| *g += v);
    for (k, g) in grad(grads, "dense.bias").iter_mut().enumerate() {
        *g += dlogits.column(k).sum();
    }
    let dflat = dlogits.dot(&model.p("dense.weight").view2());

    let mut dz3 = vec![0.0; b * d.f2 * d.t1];
    for bi in 0..b {
        for o in 0..d.f2 {
            for q in 0..d.t2 {
                let g = dflat[[bi, o * d.t2 + q]] / d.pool2 as f64;
                let base = (bi * d.f2 + o) * d.t1 + q * d.pool2;
                let span = base..base + d.pool2;
                for (dz, &a) in dz3[span.clone()].iter_mut().zip(&cache.a3[span]) {
                    *dz = g * elu_grad(a);
                }
            }
        }
    }
    let ds2 = {
        let mut dgamma = vec![0.0; d.f2];
        let mut dbeta = vec![0.0; d.f2];
        let layout = Layout {
            outer: b,
            channels: d.f2,
            inner: d.t1,
        };
        let dx = bn::backward(
            &dz3,
            &cache.bn3,
            layout,
            &model.p("bn3.gamma").data,
            &mut dgamma,
            &mut dbeta,
        );
        add(grad(grads, "bn3.gamma"), &dgamma);
        add(grad(grads, "bn3.beta"), &dbeta);
        dx
    };

    let wp = model.p("separable.pointwise").view2();
    let mut dwp = Array2::<f64>::zeros((d.f2, d.maps));
    let mut ds1 = vec![0.0; b * d.maps * d.t1];
    for bi in 0..b {
        let g = ArrayView2::from_shape((d.f2, d.t1), &ds2[bi * d.f2 * d.t1..(bi + 1) * d.f2 * d.t1]).expect("block");
        let s = ArrayView2::from_shape((d.maps, d.t1), &cache.s1[bi * d.maps * d.t1..(bi + 1) * d.maps * d.t1])
            .expect("block");
        general_mat_mul(1.0, &g, &s.t(), 1.0, &mut dwp);
        let mut dst = ArrayViewMut2::from_shape((d.maps, d.t1), &mut ds1[bi * d.maps * d.t1..(bi + 1) * d.maps * d.t1])
            .expect("block");
        general_mat_mul(1.0, &wp.t(), &g, 0.0, &mut dst);
    }
    add(grad(grads, "separable.pointwise"), dwp.as_slice().expect("fresh array"));

    let wsd = &model.p("separable.depthwise").data;
    let pad2 = (d.k2 - 1) / 2;
    let mut dwsd = vec![0.0; d.maps * d.k2];
    let mut dd1 = vec![0.0; b * d.maps * d.t1];
    for bm in 0..b * d.maps {
        let m = bm % d.maps;
        for tt in 0..d.t1 {
            let g = ds1[bm * d.t1 + tt];
            let lo = pad2.saturating_sub(tt);
            let hi = (d.t1 + pad2 - tt).min(d.k2);
            for k in lo..hi {
                let src = bm * d.t1 + tt + k - pad2;
                dwsd[m * d.k2 + k] += g * cache.d1[src];
                dd1[src] += wsd[m * d.k2 + k] * g;
            }
        }
    }
    add(grad(grads, "separable.depthwise"), &dwsd);
    if let Some(mask) = &cache.mask {
        dd1.iter_mut().zip(mask).for_each(|(g, k)| *g *= k);
    }

    let mut dz2 = vec![0.0; b * d.maps * t];
    for bm in 0..b * d.maps {
        for q in 0..d.t1 {
            let g = dd1[bm * d.t1 + q] / d.pool1 as f64;
            let base = bm * t + q * d.pool1;
            let span = base..base + d.pool1;
            for (dz, &a) in dz2[span.clone()].iter_mut().zip(&cache.a2[span]) {
                *dz = g * elu_grad(a);
            }
        }
    }
    let dy2 = {
        let mut dgamma = vec![0.0; d.maps];
        let mut dbeta = vec![0.0; d.maps];
        let layout = Layout {
            outer: b,
            channels: d.maps,
            inner: t,
        };
        let dx = bn::backward(
            &dz2,
            &cache.bn2,
            layout,
            &model.p("bn2.gamma").data,
            &mut dgamma,
            &mut dbeta,
        );
        add(grad(grads, "bn2.gamma"), &dgamma);
        add(grad(grads, "bn2.beta"), &dbeta);
        dx
    };

    let wd = &model.p("depthwise.weight").data;
    let mut dwd = vec![0.0; d.maps * c];
    let mut dz1 = vec![0.0; b * c * t * d.f1];
    for bi in 0..b {
        for r in 0..c {
            for tt in 0..t {
                let base = ((bi * c + r) * t + tt) * d.f1;
                for f in 0..d.f1 {
                    let z = cache.z1[base + f];
                    let mut acc = 0.0;
                    for j in 0..d.depth {
                        let m = f * d.depth + j;
                        let g = dy2[(bi * d.maps + m) * t + tt];
                        dwd[m * c + r] += g * z;
                        acc += wd[m * c + r] * g;
                    }
                    dz1[base + f] = acc;
                }
            }
        }
    }
    add(grad(grads, "depthwise.weight"), &dwd);

    let dy1 = {
        let mut dgamma = vec![0.0; d.f1];
        let mut dbeta = vec![0.0; d.f1];
        let layout = Layout {
            outer: b * c * t,
            channels: d.f1,
            inner: 1,
        };
        let dx = bn::backward(
            &dz1,
            &cache.bn1,
            layout,
            &model.p("bn1.gamma").data,
            &mut dgamma,
            &mut dbeta,
        );
        add(grad(grads, "bn1.gamma"), &dgamma);
        add(grad(grads, "bn1.beta"), &dbeta);
        dx
    };
    let dy1 = ArrayView2::from_shape((b * c * t, d.f1), &dy1).expect("conv1 output");
    let dw1 = dy1.t().dot(&cache.patches);
    add(grad(grads, "conv1.weight"), dw1.as_slice().expect("fresh array"));

    want_input.then(|| {
        let dpatches = dy1.dot(&model.p("conv1.weight").view2());
        let pad1 = (d.k1 - 1) / 2;
        let mut dx = Array3::zeros((b, c, t));
        let dxs = dx.as_slice_mut().expect("fresh array");
        for bc in 0..b * c {
            for tt in 0..t {
                let lo = pad1.saturating_sub(tt);
                let hi = (t + pad1 - tt).min(d.k1);
                for k in lo..hi {
                    dxs[bc * t + tt + k - pad1] += dpatches[[bc * t + tt, k]];
                }
            }
        }
        dx
    })
}
