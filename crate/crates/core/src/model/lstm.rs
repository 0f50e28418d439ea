//! Batched LSTM cell with a hand-written backward pass.

use ndarray::{s, Array2, Axis, Zip};

use super::LstmWeights;

pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Values saved by [`cell_forward`] for the backward pass.
#[derive(Debug, Clone)]
pub(crate) struct CellCache {
    x: Array2<f64>,
    h_prev: Array2<f64>,
    c_prev: Array2<f64>,
    i: Array2<f64>,
    f: Array2<f64>,
    g: Array2<f64>,
    o: Array2<f64>,
    tanh_c: Array2<f64>,
    /// `[B, 1]`; rows with 0 carry the previous state through unchanged.
    mask: Option<Array2<f64>>,
}

/// One step for a batch. With a mask, masked rows return `(h_prev, c_prev)`.
pub(crate) fn cell_forward(
    w: &LstmWeights,
    x: Array2<f64>,
    h_prev: &Array2<f64>,
    c_prev: &Array2<f64>,
    mask: Option<Array2<f64>>,
) -> (Array2<f64>, Array2<f64>, CellCache) {
    let hd = w.hidden_units();
    let z = x.dot(&w.input) + h_prev.dot(&w.recurrent) + &w.bias;
    let i = z.slice(s![.., 0..hd]).mapv(sigmoid);
    let f = z.slice(s![.., hd..2 * hd]).mapv(sigmoid);
    let g = z.slice(s![.., 2 * hd..3 * hd]).mapv(f64::tanh);
    let o = z.slice(s![.., 3 * hd..4 * hd]).mapv(sigmoid);
    let c_new = &f * c_prev + &i * &g;
    let tanh_c = c_new.mapv(f64::tanh);
    let h_new = &o * &tanh_c;
    let (h, c) = match &mask {
        None => (h_new, c_new),
        Some(m) => {
            let keep = m.mapv(|v| 1.0 - v);
            (m * &h_new + &keep * h_prev, m * &c_new + &keep * c_prev)
        }
    };
    let cache = CellCache {
        x,
        h_prev: h_prev.clone(),
        c_prev: c_prev.clone(),
        i,
        f,
        g,
        o,
        tanh_c,
        mask,
    };
    (h, c, cache)
}

/// Backpropagates `(dh, dc)` through one step, accumulating weight gradients
/// into `grad`. Returns `(dx, dh_prev, dc_prev)`.
pub(crate) fn cell_backward(
    w: &LstmWeights,
    cache: &CellCache,
    dh: &Array2<f64>,
    dc: &Array2<f64>,
    grad: &mut LstmWeights,
) -> (Array2<f64>, Array2<f64>, Array2<f64>) {
    let hd = w.hidden_units();
    let (dh_new, dc_out, mut dh_prev, mut dc_prev) = match &cache.mask {
        None => (dh.clone(), dc.clone(), None, None),
        Some(m) => {
            let keep = m.mapv(|v| 1.0 - v);
            (m * dh, m * dc, Some(&keep * dh), Some(&keep * dc))
        }
    };

    // dc_new = dc_out + dh_new * o * (1 - tanh(c)^2)
    let mut dc_new = dc_out;
    Zip::from(&mut dc_new)
        .and(&dh_new)
        .and(&cache.o)
        .and(&cache.tanh_c)
        .for_each(|d, &dh, &o, &tc| *d += dh * o * (1.0 - tc * tc));

    let batch = dh.nrows();
    let mut dz = Array2::<f64>::zeros((batch, 4 * hd));
    Zip::from(dz.slice_mut(s![.., 0..hd]))
        .and(&dc_new)
        .and(&cache.g)
        .and(&cache.i)
        .for_each(|d, &dc, &g, &i| *d = dc * g * i * (1.0 - i));
    Zip::from(dz.slice_mut(s![.., hd..2 * hd]))
        .and(&dc_new)
        .and(&cache.c_prev)
        .and(&cache.f)
        .for_each(|d, &dc, &cp, &f| *d = dc * cp * f * (1.0 - f));
    Zip::from(dz.slice_mut(s![.., 2 * hd..3 * hd]))
        .and(&dc_new)
        .and(&cache.i)
        .and(&cache.g)
        .for_each(|d, &dc, &i, &g| *d = dc * i * (1.0 - g * g));
    Zip::from(dz.slice_mut(s![.., 3 * hd..4 * hd]))
        .and(&dh_new)
        .and(&cache.tanh_c)
        .and(&cache.o)
        .for_each(|d, &dh, &tc, &o| *d = dh * tc * o * (1.0 - o));

    grad.input += &cache.x.t().dot(&dz);
    grad.recurrent += &cache.h_prev.t().dot(&dz);
    grad.bias += &dz.sum_axis(Axis(0)).insert_axis(Axis(0));

    let dx = dz.dot(&w.input.t());
    let dh_rec = dz.dot(&w.recurrent.t());
    let dc_rec = &dc_new * &cache.f;
    let dh_prev = match dh_prev.take() {
        Some(d) => d + dh_rec,
        None => dh_rec,
    };
    let dc_prev = match dc_prev.take() {
        Some(d) => d + dc_rec,
        None => dc_rec,
    };
    (dx, dh_prev, dc_prev)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.gen_range(-0.5..0.5))
    }

    fn weights(rng: &mut ChaCha8Rng, input: usize, hidden: usize) -> LstmWeights {
        LstmWeights {
            input: random(rng, input, 4 * hidden),
            recurrent: random(rng, hidden, 4 * hidden),
            bias: random(rng, 1, 4 * hidden),
        }
    }

    #[test]
    fn masked_rows_pass_state_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let w = weights(&mut rng, 2, 3);
        let x = random(&mut rng, 2, 2);
        let h = random(&mut rng, 2, 3);
        let c = random(&mut rng, 2, 3);
        let mask = Array2::from_shape_vec((2, 1), vec![1.0, 0.0]).unwrap();
        let (h1, c1, _) = cell_forward(&w, x.clone(), &h, &c, Some(mask));
        let (h_full, c_full, _) = cell_forward(&w, x, &h, &c, None);
        assert_eq!(h1.row(1), h.row(1));
        assert_eq!(c1.row(1), c.row(1));
        assert_eq!(h1.row(0), h_full.row(0));
        assert_eq!(c1.row(0), c_full.row(0));
    }

    /// Finite differences of `sum(h * a) + sum(c * b)` against the backward pass.
    #[test]
    fn cell_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let w = weights(&mut rng, 2, 3);
        let x = random(&mut rng, 2, 2);
        let h = random(&mut rng, 2, 3);
        let c = random(&mut rng, 2, 3);
        let a = random(&mut rng, 2, 3);
        let b = random(&mut rng, 2, 3);
        let mask = Array2::from_shape_vec((2, 1), vec![1.0, 0.0]).unwrap();
        let objective = |w: &LstmWeights, x: &Array2<f64>, h: &Array2<f64>, c: &Array2<f64>| {
            let (h1, c1, _) = cell_forward(w, x.clone(), h, c, Some(mask.clone()));
            (&h1 * &a).sum() + (&c1 * &b).sum()
        };
        let (_, _, cache) = cell_forward(&w, x.clone(), &h, &c, Some(mask.clone()));
        let mut grad = LstmWeights {
            input: Array2::zeros(w.input.raw_dim()),
            recurrent: Array2::zeros(w.recurrent.raw_dim()),
            bias: Array2::zeros(w.bias.raw_dim()),
        };
        let (dx, dh, dc) = cell_backward(&w, &cache, &a, &b, &mut grad);
        let eps = 1e-6;
        let check = |analytic: f64, plus: f64, minus: f64| {
            let numeric = (plus - minus) / (2.0 * eps);
            assert!((analytic - numeric).abs() < 1e-7, "{analytic} vs {numeric}");
        };
        for idx in 0..w.input.len() {
            let (r, col) = (idx / w.input.ncols(), idx % w.input.ncols());
            let mut wp = w.clone();
            wp.input[[r, col]] += eps;
            let mut wm = w.clone();
            wm.input[[r, col]] -= eps;
            check(grad.input[[r, col]], objective(&wp, &x, &h, &c), objective(&wm, &x, &h, &c));
        }
        for (analytic, which) in [(&dx, 0), (&dh, 1), (&dc, 2)] {
            for r in 0..analytic.nrows() {
                for col in 0..analytic.ncols() {
                    let mut args = [x.clone(), h.clone(), c.clone()];
                    args[which][[r, col]] += eps;
                    let plus = objective(&w, &args[0], &args[1], &args[2]);
                    args[which][[r, col]] -= 2.0 * eps;
                    let minus = objective(&w, &args[0], &args[1], &args[2]);
                    check(analytic[[r, col]], plus, minus);
                }
            }
        }
    }
}
