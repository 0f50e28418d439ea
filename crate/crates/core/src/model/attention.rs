//! Global attention with a bilinear score `hᵀ W e`.

use ndarray::{Array1, ArrayView1, ArrayView2, ArrayViewMut2};

use super::ModelError;

/// Softmax over the positions where `mask` is non-zero; masked positions get
/// weight exactly 0.
pub fn masked_softmax(scores: ArrayView1<f64>, mask: ArrayView1<f64>) -> Result<Array1<f64>, ModelError> {
    let max = scores
        .iter()
        .zip(mask.iter())
        .filter(|(_, &m)| m != 0.0)
        .map(|(&s, _)| s)
        .fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(ModelError::AllMasked);
    }
    let mut w: Array1<f64> = scores
        .iter()
        .zip(mask.iter())
        .map(|(&s, &m)| if m != 0.0 { (s - max).exp() } else { 0.0 })
        .collect();
    let total = w.sum();
    w.mapv_inplace(|x| x / total);
    Ok(w)
}

/// Attends from `decoder_state` (`[H]`) over `encoder_states` (`[S, 2H]`)
/// with score matrix `attention` (`[H, 2H]`). Returns the context vector and
/// the attention weights.
pub fn attend(
    attention: ArrayView2<f64>,
    decoder_state: ArrayView1<f64>,
    encoder_states: ArrayView2<f64>,
    mask: ArrayView1<f64>,
) -> Result<(Array1<f64>, Array1<f64>), ModelError> {
    if attention.nrows() != decoder_state.len() || attention.ncols() != encoder_states.ncols() {
        return Err(ModelError::Shape(format!(
            "attention {:?}, decoder state {}, encoder states {:?}",
            attention.dim(),
            decoder_state.len(),
            encoder_states.dim()
        )));
    }
    let query = decoder_state.dot(&attention);
    attend_query(query.view(), encoder_states, mask)
}

/// Attention given the already projected query `hᵀ W`.
pub(crate) fn attend_query(
    query: ArrayView1<f64>,
    encoder_states: ArrayView2<f64>,
    mask: ArrayView1<f64>,
) -> Result<(Array1<f64>, Array1<f64>), ModelError> {
    let scores = encoder_states.dot(&query);
    let weights = masked_softmax(scores.view(), mask)?;
    let context = weights.dot(&encoder_states);
    Ok((context, weights))
}

/// Backward of [`attend_query`] for one row. Accumulates into
/// `d_encoder` and returns the gradient with respect to the query.
pub(crate) fn attend_query_backward(
    query: ArrayView1<f64>,
    encoder_states: ArrayView2<f64>,
    weights: ArrayView1<f64>,
    d_context: ArrayView1<f64>,
    mut d_encoder: ArrayViewMut2<f64>,
) -> Array1<f64> {
    // context = Σ_s a_s e_s
    let d_weights = encoder_states.dot(&d_context);
    let inner = weights.dot(&d_weights);
    let d_scores: Array1<f64> = weights
        .iter()
        .zip(d_weights.iter())
        .map(|(&a, &da)| a * (da - inner))
        .collect();
    for (s, mut row) in d_encoder.rows_mut().into_iter().enumerate() {
        let a = weights[s];
        let ds = d_scores[s];
        if a == 0.0 && ds == 0.0 {
            continue;
        }
        row.zip_mut_with(&d_context, |d, &dc| *d += a * dc);
        row.zip_mut_with(&query, |d, &q| *d += ds * q);
    }
    d_scores.dot(&encoder_states)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};

    #[test]
    fn weights_sum_to_one() {
        let w = array![[0.3, -0.2], [0.1, 0.5]];
        let h = array![0.7, -1.1];
        let enc = array![[0.1, 0.2], [0.9, -0.4], [-0.3, 0.3]];
        let (ctx, a) = attend(w.view(), h.view(), enc.view(), array![1.0, 1.0, 1.0].view()).unwrap();
        assert!((a.sum() - 1.0).abs() < 1e-12);
        assert!(a.iter().all(|&x| x >= 0.0));
        assert_eq!(ctx.len(), 2);
    }

    #[test]
    fn single_unmasked_position_gets_all_weight() {
        let a = masked_softmax(array![3.0, -1.0, 2.0].view(), array![0.0, 1.0, 0.0].view()).unwrap();
        assert_eq!(a, array![0.0, 1.0, 0.0]);
    }

    #[test]
    fn constant_scores_are_uniform() {
        let a = masked_softmax(Array1::zeros(4).view(), Array1::ones(4).view()).unwrap();
        for &x in &a {
            assert!((x - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn fully_masked_is_an_error() {
        assert_eq!(
            masked_softmax(array![1.0, 2.0].view(), array![0.0, 0.0].view()),
            Err(ModelError::AllMasked)
        );
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let w = Array2::<f64>::zeros((3, 2));
        let r = attend(w.view(), array![1.0, 2.0].view(), Array2::zeros((2, 2)).view(), array![1.0, 1.0].view());
        assert!(matches!(r, Err(ModelError::Shape(_))));
    }
}
