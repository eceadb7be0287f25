//! Negative cosine similarity with stop-gradient, the symmetric Siamese
//! loss, and squared-error regression loss.

use super::real::Real;
use super::tensor::Tensor;
use crate::error::{Error, Result};

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Cosine similarity of two vectors, clamped to `[-1, 1]`.
pub fn cosine_similarity(p: &[f64], z: &[f64]) -> Result<f64> {
    let pp: f64 = p.iter().map(|x| x * x).sum();
    let zz: f64 = z.iter().map(|x| x * x).sum();
    if pp == 0.0 || zz == 0.0 {
        return Err(Error::Numeric("cosine similarity of a zero-norm vector".into()));
    }
    let dot: f64 = p.iter().zip(z).map(|(a, b)| a * b).sum();
    Ok((dot / (pp * zz).sqrt()).clamp(-1.0, 1.0))
}

/// `D(p, SG(z)) = -(p/|p|) . (z/|z|)` and its gradient with respect to `p`.
/// `z` is a constant: no gradient is produced for it.
pub fn neg_cos_loss(p: &[f64], z: &[f64]) -> Result<(f64, Vec<f64>)> {
    let np = norm(p);
    let nz = norm(z);
    if np == 0.0 || nz == 0.0 {
        return Err(Error::Numeric("negative cosine loss on a zero-norm vector".into()));
    }
    let cos: f64 = p.iter().zip(z).map(|(a, b)| a * b).sum::<f64>() / (np * nz);
    // d/dp [-(p.z)/(|p||z|)] = -(z_hat - cos * p_hat) / |p|
    let grad = p
        .iter()
        .zip(z)
        .map(|(a, b)| -(b / nz - cos * a / np) / np)
        .collect();
    Ok((-cos, grad))
}

#[derive(Debug)]
pub struct SiameseLoss<T> {
    /// Batch-mean loss.
    pub loss: f64,
    /// Per-sample similarities `cos(p1, z2)` and `cos(p2, z1)`, batch means.
    pub sim_a: f64,
    pub sim_b: f64,
    pub d_p1: Tensor<T>,
    pub d_p2: Tensor<T>,
}

fn rows_f64<T: Real>(t: &Tensor<T>, i: usize) -> Vec<f64> {
    t.row(i).iter().map(|v| v.as_f64()).collect()
}

/// `L = 1/2 D(p1, SG(z2)) + 1/2 D(p2, SG(z1))`, averaged over the batch.
/// Gradients are returned for `p1` and `p2` only.
pub fn simsiam_loss<T: Real>(p1: &Tensor<T>, z2: &Tensor<T>, p2: &Tensor<T>, z1: &Tensor<T>) -> Result<SiameseLoss<T>> {
    if p1.shape != z2.shape || p2.shape != z1.shape || p1.shape != p2.shape || p1.shape.len() != 2 {
        return Err(Error::dim(
            "simsiam_loss",
            format!("shapes p1 {:?} z2 {:?} p2 {:?} z1 {:?}", p1.shape, z2.shape, p2.shape, z1.shape),
        ));
    }
    let b = p1.shape[0];
    let scale = 0.5 / b as f64;
    let mut d_p1 = Vec::with_capacity(p1.len());
    let mut d_p2 = Vec::with_capacity(p2.len());
    let (mut loss, mut sa, mut sb) = (0.0, 0.0, 0.0);
    for i in 0..b {
        let (la, ga) = neg_cos_loss(&rows_f64(p1, i), &rows_f64(z2, i))?;
        let (lb, gb) = neg_cos_loss(&rows_f64(p2, i), &rows_f64(z1, i))?;
        loss += scale * (la + lb);
        sa -= la / b as f64;
        sb -= lb / b as f64;
        d_p1.extend(ga.iter().map(|g| T::from_f64(g * scale)));
        d_p2.extend(gb.iter().map(|g| T::from_f64(g * scale)));
    }
    Ok(SiameseLoss {
        loss,
        sim_a: sa,
        sim_b: sb,
        d_p1: Tensor::from_vec(&p1.shape, d_p1),
        d_p2: Tensor::from_vec(&p2.shape, d_p2),
    })
}

/// Mean over the batch of the squared Euclidean distance between rows.
pub fn mse_loss<T: Real>(pred: &Tensor<T>, target: &Tensor<T>) -> Result<(f64, Tensor<T>)> {
    if pred.shape != target.shape || pred.shape.len() != 2 {
        return Err(Error::dim("mse_loss", format!("pred {:?} vs target {:?}", pred.shape, target.shape)));
    }
    let b = pred.shape[0] as f64;
    let mut loss = 0.0;
    let grad = pred
        .data
        .iter()
        .zip(&target.data)
        .map(|(p, t)| {
            let d = p.as_f64() - t.as_f64();
            loss += d * d / b;
            T::from_f64(2.0 * d / b)
        })
        .collect();
    Ok((loss, Tensor::from_vec(&pred.shape, grad)))
}
