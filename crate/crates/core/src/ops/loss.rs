use crate::error::{Error, Result};
use crate::tensor::Tensor5;

/// Row-wise softmax of `(N, K, 1, 1, 1)` logits.
pub fn softmax(logits: &Tensor5) -> Result<Tensor5> {
    let s = logits.shape();
    if s.volume() != 1 {
        return Err(Error::InvalidConfig(format!("softmax expects (N, K, 1, 1, 1), got {s}")));
    }
    let k = s.c;
    let mut out = logits.detach();
    for row in out.data_mut().chunks_mut(k) {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        row.iter_mut().for_each(|v| *v /= z);
    }
    Ok(out)
}

/// Mean cross-entropy over the batch and its gradient w.r.t. the logits.
pub fn softmax_cross_entropy(logits: &Tensor5, labels: &[usize]) -> Result<(f64, Tensor5)> {
    let s = logits.shape();
    if labels.len() != s.n {
        return Err(Error::InvalidConfig(format!("{} labels for batch of {}", labels.len(), s.n)));
    }
    let k = s.c;
    let probs = softmax(logits)?;
    let mut grad = probs.clone();
    let mut loss = 0.0;
    let scale = 1.0 / s.n as f64;
    for (b, &y) in labels.iter().enumerate() {
        if y >= k {
            return Err(Error::InvalidConfig(format!("label {y} out of range for {k} classes")));
        }
        let row = &logits.data()[b * k..(b + 1) * k];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        loss += lse - row[y];
        let g = &mut grad.data_mut()[b * k..(b + 1) * k];
        g[y] -= 1.0;
        g.iter_mut().for_each(|v| *v *= scale);
    }
    let loss = loss * scale;
    if !loss.is_finite() {
        return Err(Error::NonFinite("softmax_cross_entropy"));
    }
    Ok((loss, grad))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_ln_k() {
        let l = Tensor5::zeros((2, 7, 1, 1, 1)).unwrap();
        let (loss, _) = softmax_cross_entropy(&l, &[0, 3]).unwrap();
        assert!((loss - 7f64.ln()).abs() < 1e-14);
    }

    #[test]
    fn confident_correct_logit() {
        let l = Tensor5::from_vec((1, 3, 1, 1, 1), vec![0.0, 500.0, 0.0]).unwrap();
        let (loss, g) = softmax_cross_entropy(&l, &[1]).unwrap();
        assert!(loss < 1e-12);
        assert!(g.data().iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let l = Tensor5::from_vec((2, 2, 1, 1, 1), vec![1.0, 2.0, -3.0, 0.5]).unwrap();
        let p = softmax(&l).unwrap();
        assert!((p.data()[0] + p.data()[1] - 1.0).abs() < 1e-15);
        assert!((p.data()[2] + p.data()[3] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn bad_label() {
        let l = Tensor5::zeros((1, 2, 1, 1, 1)).unwrap();
        assert!(softmax_cross_entropy(&l, &[2]).is_err());
    }
}
