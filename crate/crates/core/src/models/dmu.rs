//! Delayed memory unit: a recurrent cell whose delay gate mixes the last `D`
//! hidden states into a memory vector before a gated update.
//!
//! ```text
//! a_t = softmax_d(W_g x_t + U_g h_{t-1} + b_g)      per hidden unit, D weights
//! m_t = sum_d a_t[d] * h_{t-d}                       (h_s = 0 for s < 1)
//! z_t = sigmoid(W_z x_t + U_z m_t + b_z)
//! c_t = tanh(W_c x_t + U_c m_t + b_c)
//! h_t = (1 - z_t) * m_t + z_t * c_t
//! ```
//!
//! Gate-logit row `(d - 1) * H + j` belongs to delay `d` and unit `j`.

use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3, Axis};

use super::lstm::{batch_major, time_major};
use super::{add, check_finite, grad, sigmoid, ModelParams, ParamSet};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub(crate) struct Cache {
    xs: Array2<f64>,
    /// `hs[s]` is `h_s`; `hs[0]` is zero.
    hs: Vec<Array2<f64>>,
    /// Per step (index `t - 1`): delay weights `B × HD`, memory, update gate
    /// and candidate, each `B × H`.
    a: Vec<Array2<f64>>,
    m: Vec<Array2<f64>>,
    z: Vec<Array2<f64>>,
    c: Vec<Array2<f64>>,
}

fn run(model: &ModelParams, x: ArrayView3<'_, f64>) -> Cache {
    let (b, _, t) = x.dim();
    let h = model.spec.hidden;
    let xs = time_major(x);
    let gin_g = xs.dot(&model.p("dmu.w_g").view2().t());
    let gin_z = xs.dot(&model.p("dmu.w_z").view2().t());
    let gin_c = xs.dot(&model.p("dmu.w_c").view2().t());
    let (u_g, u_z, u_c) = (
        model.p("dmu.u_g").view2(),
        model.p("dmu.u_z").view2(),
        model.p("dmu.u_c").view2(),
    );
    let (b_g, b_z, b_c) = (
        model.p("dmu.b_g").view2(),
        model.p("dmu.b_z").view2(),
        model.p("dmu.b_c").view2(),
    );

    let mut hs = vec![Array2::<f64>::zeros((b, h))];
    let mut cache_a = Vec::with_capacity(t);
    let mut cache_m = Vec::with_capacity(t);
    let mut cache_z = Vec::with_capacity(t);
    let mut cache_c = Vec::with_capacity(t);
    for step in 1..=t {
        let rows = s![(step - 1) * b..step * b, ..];
        let mut a = hs[step - 1].dot(&u_g.t()) + gin_g.slice(rows) + b_g;
        let mut m = Array2::<f64>::zeros((b, h));
        let mut max = vec![0.0; h];
        let mut total = vec![0.0; h];
        let ms = m.as_slice_mut().expect("fresh array");
        for bi in 0..b {
            let mut row = a.row_mut(bi);
            let row = row.as_slice_mut().expect("contiguous row");
            max.fill(f64::NEG_INFINITY);
            for block in row.chunks_exact(h) {
                max.iter_mut().zip(block).for_each(|(m, &v)| *m = m.max(v));
            }
            total.fill(0.0);
            for block in row.chunks_exact_mut(h) {
                for j in 0..h {
                    block[j] = (block[j] - max[j]).exp();
                    total[j] += block[j];
                }
            }
            let mrow = &mut ms[bi * h..(bi + 1) * h];
            for (d, block) in row.chunks_exact_mut(h).enumerate() {
                block.iter_mut().zip(&total).for_each(|(v, t)| *v /= t);
                if step > d + 1 {
                    let past = &hs[step - 1 - d].as_slice().expect("fresh array")[bi * h..(bi + 1) * h];
                    for j in 0..h {
                        mrow[j] += block[j] * past[j];
                    }
                }
            }
        }
        let mut z = m.dot(&u_z.t()) + gin_z.slice(rows) + b_z;
        z.mapv_inplace(sigmoid);
        let mut c = m.dot(&u_c.t()) + gin_c.slice(rows) + b_c;
        c.mapv_inplace(f64::tanh);
        let hn = (1.0 - &z) * &m + &z * &c;
        hs.push(hn);
        cache_a.push(a);
        cache_m.push(m);
        cache_z.push(z);
        cache_c.push(c);
    }
    Cache {
        xs,
        hs,
        a: cache_a,
        m: cache_m,
        z: cache_z,
        c: cache_c,
    }
}

pub(crate) fn forward(model: &ModelParams, x: ArrayView3<'_, f64>) -> Result<(Array2<f64>, Cache)> {
    let cache = run(model, x);
    let last = cache.hs.last().expect("at least the initial state");
    check_finite("dmu", last.as_slice().expect("fresh array"))?;
    let logits = last.dot(&model.p("dense.weight").view2().t()) + model.p("dense.bias").view2();
    Ok((logits, cache))
}

/// Hidden states `h_1 .. h_T` (one row per step) for a single `C' × T` input.
pub fn hidden_states(model: &ModelParams, x: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let spec = &model.spec;
    if spec.backbone != super::Backbone::Dmu {
        return Err(Error::Config(format!(
            "hidden_states needs a dmu model, got {}",
            spec.backbone
        )));
    }
    let (c, t) = x.dim();
    if c != spec.input_channels() || t != spec.samples {
        return Err(Error::Shape(format!(
            "input is {c}x{t}, model expects {}x{}",
            spec.input_channels(),
            spec.samples
        )));
    }
    let x3 = x.to_owned().into_shape_with_order((1, c, t)).expect("same size");
    let cache = run(model, x3.view());
    let mut out = Array2::zeros((t, spec.hidden));
    for (step, h) in cache.hs.iter().skip(1).enumerate() {
        out.row_mut(step).assign(&h.row(0));
    }
    Ok(out)
}

pub(crate) fn backward(
    model: &ModelParams,
    cache: &Cache,
    dlogits: ArrayView2<'_, f64>,
    want_input: bool,
    grads: &mut ParamSet,
) -> Option<Array3<f64>> {
    let t = cache.m.len();
    let (b, h) = cache.hs[0].dim();
    let depth = model.spec.dmu_delays;
    add(grad(grads, "dense.weight"), &dlogits.t().dot(&cache.hs[t]));
    add(grad(grads, "dense.bias"), &dlogits.sum_axis(Axis(0)));

    let (u_g, u_z, u_c) = (
        model.p("dmu.u_g").view2(),
        model.p("dmu.u_z").view2(),
        model.p("dmu.u_c").view2(),
    );
    let mut dh: Vec<Array2<f64>> = (0..=t).map(|_| Array2::zeros((b, h))).collect();
    dh[t] = dlogits.dot(&model.p("dense.weight").view2());
    let mut dgin_g = Array2::<f64>::zeros((t * b, h * depth));
    let mut dgin_z = Array2::<f64>::zeros((t * b, h));
    let mut dgin_c = Array2::<f64>::zeros((t * b, h));
    let mut du_g = Array2::<f64>::zeros((h * depth, h));
    let mut du_z = Array2::<f64>::zeros((h, h));
    let mut du_c = Array2::<f64>::zeros((h, h));

    for step in (1..=t).rev() {
        let i = step - 1;
        let (m, z, c, a) = (&cache.m[i], &cache.z[i], &cache.c[i], &cache.a[i]);
        let g = &dh[step];
        let dpz = g * &(c - m) * z * &(1.0 - z);
        let dpc = g * z * &(1.0 - &(c * c));
        let dm = g * &(1.0 - z) + dpz.dot(&u_z) + dpc.dot(&u_c);
        ndarray::linalg::general_mat_mul(1.0, &dpz.t(), m, 1.0, &mut du_z);
        ndarray::linalg::general_mat_mul(1.0, &dpc.t(), m, 1.0, &mut du_c);
        dgin_z.slice_mut(s![i * b..step * b, ..]).assign(&dpz);
        dgin_c.slice_mut(s![i * b..step * b, ..]).assign(&dpc);

        let mut dg = dgin_g.slice_mut(s![i * b..step * b, ..]);
        let dms = dm.as_slice().expect("fresh array");
        let mut weighted = vec![0.0; h];
        for bi in 0..b {
            let arow = &a.as_slice().expect("fresh array")[bi * h * depth..(bi + 1) * h * depth];
            let mut grow = dg.row_mut(bi);
            let grow = grow.as_slice_mut().expect("contiguous row");
            let dmrow = &dms[bi * h..(bi + 1) * h];
            weighted.fill(0.0);
            for d in 0..depth.min(step - 1) {
                let past = &cache.hs[step - 1 - d].as_slice().expect("fresh array")[bi * h..(bi + 1) * h];
                let dpast = &mut dh[step - 1 - d].as_slice_mut().expect("fresh array")[bi * h..(bi + 1) * h];
                for j in 0..h {
                    let w = arow[d * h + j];
                    let da = dmrow[j] * past[j];
                    grow[d * h + j] = da;
                    weighted[j] += w * da;
                    dpast[j] += w * dmrow[j];
                }
            }
            for d in 0..depth {
                for j in 0..h {
                    grow[d * h + j] = arow[d * h + j] * (grow[d * h + j] - weighted[j]);
                }
            }
        }
        ndarray::linalg::general_mat_mul(1.0, &dg.t(), &cache.hs[i], 1.0, &mut du_g);
        let back = dg.dot(&u_g);
        dh[i] += &back;
    }
    add(grad(grads, "dmu.u_g"), &du_g);
    add(grad(grads, "dmu.u_z"), &du_z);
    add(grad(grads, "dmu.u_c"), &du_c);
    add(grad(grads, "dmu.b_g"), &dgin_g.sum_axis(Axis(0)));
    add(grad(grads, "dmu.b_z"), &dgin_z.sum_axis(Axis(0)));
    add(grad(grads, "dmu.b_c"), &dgin_c.sum_axis(Axis(0)));
    add(grad(grads, "dmu.w_g"), &dgin_g.t().dot(&cache.xs));
    add(grad(grads, "dmu.w_z"), &dgin_z.t().dot(&cache.xs));
    add(grad(grads, "dmu.w_c"), &dgin_c.t().dot(&cache.xs));
    want_input.then(|| {
        let dx = dgin_g.dot(&model.p("dmu.w_g").view2())
            + dgin_z.dot(&model.p("dmu.w_z").view2())
            + dgin_c.dot(&model.p("dmu.w_c").view2());
        batch_major(&dx, b)
    })
}
