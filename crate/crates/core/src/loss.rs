use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A scalar loss together with its gradient w.r.t. the logits it was computed from.
#[derive(Clone, Debug)]
pub struct Loss {
    pub value: f32,
    pub grad: Tensor,
}

/// Log-softmax of one row, in f64.
pub(crate) fn log_softmax(row: &[f32]) -> Vec<f64> {
    let m = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max) as f64;
    let lse = row.iter().map(|&v| (v as f64 - m).exp()).sum::<f64>().ln() + m;
    row.iter().map(|&v| v as f64 - lse).collect()
}

fn check_logits(logits: &Tensor) -> Result<(usize, usize)> {
    if logits.rank() != 2 {
        return Err(Error::Input(format!(
            "logits must be [batch, classes], got {:?}",
            logits.shape()
        )));
    }
    Ok((logits.shape()[0], logits.shape()[1]))
}

/// Mean over the batch of `-log softmax(logits)[label]`.
pub fn cross_entropy(logits: &Tensor, labels: &[usize]) -> Result<Loss> {
    let (batch, classes) = check_logits(logits)?;
    if labels.len() != batch {
        return Err(Error::Input(format!(
            "{} labels for a batch of {batch}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
        return Err(Error::Input(format!(
            "label {bad} out of range for {classes} classes"
        )));
    }
    let mut total = 0.0f64;
    let mut grad = vec![0.0f32; batch * classes];
    let inv_b = 1.0 / batch as f64;
    for ((row, g), &label) in logits
        .data()
        .chunks_exact(classes)
        .zip(grad.chunks_exact_mut(classes))
        .zip(labels)
    {
        let ls = log_softmax(row);
        total -= ls[label];
        for (j, (gj, l)) in g.iter_mut().zip(&ls).enumerate() {
            let p = l.exp();
            *gj = ((p - if j == label { 1.0 } else { 0.0 }) * inv_b) as f32;
        }
    }
    Ok(Loss {
        value: (total * inv_b) as f32,
        grad: Tensor::from_parts(vec![batch, classes], grad),
    })
}

/// Index of the largest logit in each row; ties go to the lower class.
pub fn argmax_rows(logits: &Tensor) -> Vec<usize> {
    let classes = logits.shape()[1];
    logits
        .data()
        .chunks_exact(classes)
        .map(|row| {
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best
        })
        .collect()
}
