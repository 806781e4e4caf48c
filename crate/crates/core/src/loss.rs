use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Label-smoothed softmax cross-entropy averaged over the batch.
///
/// The target distribution puts `1 - smoothing + smoothing / C` on the true
/// class and `smoothing / C` elsewhere. Returns the loss and its gradient with
/// respect to the logits.
pub fn smoothed_cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[usize],
    smoothing: T,
) -> Result<(T, Tensor<T>)> {
    let [batch, classes] = logits.dims2()?;
    if batch == 0 {
        return Err(Error::Input("empty batch".into()));
    }
    if labels.len() != batch {
        return Err(Error::Input(format!("{} labels for a batch of {}", labels.len(), batch)));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(Error::Input(format!("label {} out of range for {} classes", bad, classes)));
    }
    let off = smoothing / T::lit(classes as f64);
    let on = T::one() - smoothing + off;
    let inv_batch = T::one() / T::lit(batch as f64);
    let mut grad = Tensor::zeros(&[batch, classes]);
    let mut total = T::zero();
    for (b, &y) in labels.iter().enumerate() {
        let row = &logits.data()[b * classes..(b + 1) * classes];
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = row.iter().map(|&z| (z - max).exp()).sum();
        let log_z = max + sum.ln();
        let g = &mut grad.data_mut()[b * classes..(b + 1) * classes];
        for (c, &z) in row.iter().enumerate() {
            let target = if c == y { on } else { off };
            let log_p = z - log_z;
            total -= target * log_p;
            g[c] = (log_p.exp() - target) * inv_batch;
        }
    }
    Ok((total * inv_batch, grad))
}

/// Index of the largest logit per row; ties resolve to the lower class index.
pub fn argmax_rows<T: Scalar>(logits: &Tensor<T>) -> Result<Vec<usize>> {
    let [batch, classes] = logits.dims2()?;
    Ok((0..batch)
        .map(|b| {
            let row = &logits.data()[b * classes..(b + 1) * classes];
            let mut best = 0;
            for c in 1..classes {
                if row[c] > row[best] {
                    best = c;
                }
            }
            best
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_classes() {
        let logits = Tensor::from_vec(&[2, 5], vec![0.3f64; 10]).unwrap();
        let (loss, _) = smoothed_cross_entropy(&logits, &[1, 4], 0.0).unwrap();
        assert!((loss - 5f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confident_correct_logits_approach_zero() {
        let logits = Tensor::from_vec(&[1, 3], vec![-40.0f64, 40.0, -40.0]).unwrap();
        let (loss, _) = smoothed_cross_entropy(&logits, &[1], 0.0).unwrap();
        assert!((0.0..1e-30).contains(&loss));
    }

    #[test]
    fn smoothed_loss_matches_scalar_formula() {
        let z = [1.0f64, -0.5, 2.0, 0.25];
        let logits = Tensor::from_vec(&[1, 4], z.to_vec()).unwrap();
        let (loss, grad) = smoothed_cross_entropy(&logits, &[2], 0.1).unwrap();
        // Direct evaluation: q = 0.9 one-hot + 0.1/4 uniform.
        let denom: f64 = z.iter().map(|v| v.exp()).sum();
        let p: Vec<f64> = z.iter().map(|v| v.exp() / denom).collect();
        let q = [0.025, 0.025, 0.925, 0.025];
        let expect: f64 = -(0..4).map(|c| q[c] * p[c].ln()).sum::<f64>();
        assert!((loss - expect).abs() < 1e-12);
        for c in 0..4 {
            assert!((grad.data()[c] - (p[c] - q[c])).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let z = vec![0.2f64, -1.0, 0.7, 1.3, 0.0, -0.4];
        let labels = [2, 0];
        let logits = Tensor::from_vec(&[2, 3], z.clone()).unwrap();
        let (_, grad) = smoothed_cross_entropy(&logits, &labels, 0.1).unwrap();
        for i in 0..z.len() {
            let eval = |d: f64| {
                let mut zz = z.clone();
                zz[i] += d;
                smoothed_cross_entropy(&Tensor::from_vec(&[2, 3], zz).unwrap(), &labels, 0.1).unwrap().0
            };
            let fd = (eval(1e-6) - eval(-1e-6)) / 2e-6;
            assert!((fd - grad.data()[i]).abs() < 1e-7);
        }
    }

    #[test]
    fn label_out_of_range_is_input_error() {
        let logits = Tensor::from_vec(&[1, 3], vec![0.0f32; 3]).unwrap();
        assert!(matches!(smoothed_cross_entropy(&logits, &[3], 0.0), Err(Error::Input(_))));
        let empty = Tensor::<f32>::zeros(&[0, 3]);
        assert!(matches!(smoothed_cross_entropy(&empty, &[], 0.0), Err(Error::Input(_))));
    }

    #[test]
    fn argmax_prefers_lower_index_on_ties() {
        let logits = Tensor::from_vec(&[2, 3], vec![1.0f32, 1.0, 0.0, 0.0, 2.0, 2.0]).unwrap();
        assert_eq!(argmax_rows(&logits).unwrap(), vec![0, 1]);
    }
}
