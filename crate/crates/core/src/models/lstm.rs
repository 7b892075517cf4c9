//! Single-layer LSTM over the time axis; the last hidden state feeds the
//! output layer. Gate blocks are ordered input, forget, candidate, output.

use ndarray::{s, Array2, Array3, ArrayView2, ArrayView3, Axis};

use super::{add, check_finite, grad, sigmoid, ModelParams, ParamSet};
use crate::error::Result;

#[derive(Debug, Clone)]
pub(crate) struct Cache {
    /// Inputs as `(t * B + b) × C'`.
    xs: Array2<f64>,
    /// `hs[0]` and `cs[0]` are the zero initial state.
    hs: Vec<Array2<f64>>,
    cs: Vec<Array2<f64>>,
    /// Activated gates per step, `B × 4H`.
    gates: Vec<Array2<f64>>,
    tanh_c: Vec<Array2<f64>>,
}

/// Rearranges `B × C × T` into time-major rows `(t * B + b) × C`.
pub(crate) fn time_major(x: ArrayView3<'_, f64>) -> Array2<f64> {
    let (b, c, t) = x.dim();
    let mut xs = Array2::zeros((t * b, c));
    for bi in 0..b {
        for ci in 0..c {
            for ti in 0..t {
                xs[[ti * b + bi, ci]] = x[[bi, ci, ti]];
            }
        }
    }
    xs
}

/// Inverse of [`time_major`].
pub(crate) fn batch_major(xs: &Array2<f64>, b: usize) -> Array3<f64> {
    let (tb, c) = xs.dim();
    let t = tb / b;
    let mut x = Array3::zeros((b, c, t));
    for ti in 0..t {
        for bi in 0..b {
            for ci in 0..c {
                x[[bi, ci, ti]] = xs[[ti * b + bi, ci]];
            }
        }
    }
    x
}

pub(crate) fn forward(model: &ModelParams, x: ArrayView3<'_, f64>) -> Result<(Array2<f64>, Cache)> {
    let (b, _, t) = x.dim();
    let h = model.spec.hidden;
    let xs = time_major(x);
    let gin = xs.dot(&model.p("lstm.w_ih").view2().t());
    let w_hh = model.p("lstm.w_hh").view2();
    let bias = model.p("lstm.bias").view2();

    let mut hs = vec![Array2::<f64>::zeros((b, h))];
    let mut cs = vec![Array2::<f64>::zeros((b, h))];
    let mut gates = Vec::with_capacity(t);
    let mut tanh_c = Vec::with_capacity(t);
    for ti in 0..t {
        let mut g = hs[ti].dot(&w_hh.t()) + gin.slice(s![ti * b..(ti + 1) * b, ..]) + bias;
        let mut c = Array2::zeros((b, h));
        let mut tc = Array2::zeros((b, h));
        let mut hn = Array2::zeros((b, h));
        for bi in 0..b {
            let mut row = g.row_mut(bi);
            for j in 0..h {
                row[j] = sigmoid(row[j]);
                row[h + j] = sigmoid(row[h + j]);
                row[2 * h + j] = row[2 * h + j].tanh();
                row[3 * h + j] = sigmoid(row[3 * h + j]);
                let cv: f64 = row[h + j] * cs[ti][[bi, j]] + row[j] * row[2 * h + j];
                c[[bi, j]] = cv;
                tc[[bi, j]] = cv.tanh();
                hn[[bi, j]] = row[3 * h + j] * tc[[bi, j]];
            }
        }
        gates.push(g);
        cs.push(c);
        tanh_c.push(tc);
        hs.push(hn);
    }
    check_finite("lstm", hs[t].as_slice().expect("fresh array"))?;
    let logits = hs[t].dot(&model.p("dense.weight").view2().t()) + model.p("dense.bias").view2();
    Ok((
        logits,
        Cache {
            xs,
            hs,
            cs,
            gates,
            tanh_c,
        },
    ))
}

pub(crate) fn backward(
    model: &ModelParams,
    cache: &Cache,
    dlogits: ArrayView2<'_, f64>,
    want_input: bool,
    grads: &mut ParamSet,
) -> Option<Array3<f64>> {
    let t = cache.gates.len();
    let (b, h) = cache.hs[0].dim();
    add(grad(grads, "dense.weight"), &dlogits.t().dot(&cache.hs[t]));
    add(grad(grads, "dense.bias"), &dlogits.sum_axis(Axis(0)));

    let w_hh = model.p("lstm.w_hh").view2();
    let mut dh = dlogits.dot(&model.p("dense.weight").view2());
    let mut dc = Array2::<f64>::zeros((b, h));
    let mut dgin = Array2::<f64>::zeros((t * b, 4 * h));
    for ti in (0..t).rev() {
        let g = &cache.gates[ti];
        let tc = &cache.tanh_c[ti];
        let c_prev = &cache.cs[ti];
        let mut dg = dgin.slice_mut(s![ti * b..(ti + 1) * b, ..]);
        for bi in 0..b {
            for j in 0..h {
                let (i, f, gg, o) = (g[[bi, j]], g[[bi, h + j]], g[[bi, 2 * h + j]], g[[bi, 3 * h + j]]);
                let dhv = dh[[bi, j]];
                let dcv = dc[[bi, j]] + dhv * o * (1.0 - tc[[bi, j]] * tc[[bi, j]]);
                dg[[bi, j]] = dcv * gg * i * (1.0 - i);
                dg[[bi, h + j]] = dcv * c_prev[[bi, j]] * f * (1.0 - f);
                dg[[bi, 2 * h + j]] = dcv * i * (1.0 - gg * gg);
                dg[[bi, 3 * h + j]] = dhv * tc[[bi, j]] * o * (1.0 - o);
                dc[[bi, j]] = dcv * f;
            }
        }
        dh = dg.dot(&w_hh);
    }
    let mut dw_hh = Array2::<f64>::zeros((4 * h, h));
    for ti in 0..t {
        let dg = dgin.slice(s![ti * b..(ti + 1) * b, ..]);
        ndarray::linalg::general_mat_mul(1.0, &dg.t(), &cache.hs[ti], 1.0, &mut dw_hh);
    }
    add(grad(grads, "lstm.w_hh"), &dw_hh);
    add(grad(grads, "lstm.bias"), &dgin.sum_axis(Axis(0)));
    add(grad(grads, "lstm.w_ih"), &dgin.t().dot(&cache.xs));
    want_input.then(|| batch_major(&dgin.dot(&model.p("lstm.w_ih").view2()), b))
}
