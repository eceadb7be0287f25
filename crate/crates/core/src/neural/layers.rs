//! Layer kinds with explicit forward/backward passes.
//!
//! Activations are `[batch, channels, time]` for the temporal layers and
//! `[batch, features]` for the dense ones. Forward passes return a cache
//! that the matching backward pass consumes, so one network can be run on
//! several inputs before any of them is back-propagated.

use rand::Rng;

use super::params::{ParamId, ParamKind, ParamStore};
use super::real::{gemm, MatRef, Real};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Declarative layer description used to build a [`super::net::Sequential`].
#[derive(Debug, Clone, PartialEq)]
pub enum LayerSpec {
    ReflectionPad1d { pad: usize },
    Conv1d { out_channels: usize, kernel: usize },
    BatchNorm { momentum: f64, eps: f64 },
    Relu,
    AvgPoolTime,
    Flatten,
    Linear { out_features: usize },
}

impl LayerSpec {
    pub fn batch_norm() -> Self {
        LayerSpec::BatchNorm { momentum: 0.1, eps: 1e-5 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    ReflectionPad1d { pad: usize },
    Conv1d { weight: ParamId, bias: ParamId, cin: usize, cout: usize, k: usize },
    BatchNorm { gamma: ParamId, beta: ParamId, mean: ParamId, var: ParamId, c: usize, momentum: f64, eps: f64 },
    Relu,
    AvgPoolTime,
    Flatten,
    Linear { weight: ParamId, bias: ParamId, fin: usize, fout: usize },
}

#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub name: String,
    pub kind: LayerKind,
}

#[derive(Debug)]
pub enum Cache<T> {
    Pad { t: usize },
    Conv { col: Vec<T>, b: usize, t: usize },
    BatchNorm { xhat: Vec<T>, inv_std: Vec<T>, shape: Vec<usize>, mode: Mode },
    Relu { positive: Vec<bool> },
    Pool { t: usize },
    Flatten { shape: Vec<usize> },
    Linear { input: Tensor<T> },
}

fn uniform_tensor<T: Real, R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor<T> {
    let n = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(rng.random_range(-bound..=bound))).collect();
    Tensor::from_vec(shape, data)
}

/// Split `[B, C, L]` (or `[B, C]`, L = 1) into its three extents.
fn bcl(shape: &[usize]) -> Option<(usize, usize, usize)> {
    match *shape {
        [b, c] => Some((b, c, 1)),
        [b, c, l] => Some((b, c, l)),
        _ => None,
    }
}

impl Layer {
    /// Create the layer and register its parameters under `name`.
    /// `in_shape` excludes the batch dimension; returns the output shape.
    pub fn build<T: Real, R: Rng + ?Sized>(
        name: &str,
        spec: &LayerSpec,
        in_shape: &[usize],
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<(Layer, Vec<usize>)> {
        let bad = |msg: String| Error::dim(name, msg);
        let (kind, out) = match *spec {
            LayerSpec::ReflectionPad1d { pad } => {
                let [c, t] = *in_shape else {
                    return Err(bad(format!("reflection pad expects [C, T], got {in_shape:?}")));
                };
                if t <= pad {
                    return Err(bad(format!("reflection pad {pad} needs T > {pad}, got {t}")));
                }
                (LayerKind::ReflectionPad1d { pad }, vec![c, t + 2 * pad])
            }
            LayerSpec::Conv1d { out_channels, kernel } => {
                let [cin, t] = *in_shape else {
                    return Err(bad(format!("conv1d expects [C, T], got {in_shape:?}")));
                };
                if kernel == 0 || t < kernel {
                    return Err(bad(format!("conv1d kernel {kernel} does not fit length {t}")));
                }
                let bound = 1.0 / ((cin * kernel) as f64).sqrt();
                let weight = store.add(
                    format!("{name}.weight"),
                    uniform_tensor(&[out_channels, cin, kernel], bound, rng),
                    ParamKind::Weight,
                );
                let bias = store.add(format!("{name}.bias"), uniform_tensor(&[out_channels], bound, rng), ParamKind::Weight);
                (
                    LayerKind::Conv1d { weight, bias, cin, cout: out_channels, k: kernel },
                    vec![out_channels, t - kernel + 1],
                )
            }
            LayerSpec::BatchNorm { momentum, eps } => {
                let c = in_shape.first().copied().ok_or_else(|| bad("batch norm on a scalar".into()))?;
                if in_shape.len() > 2 {
                    return Err(bad(format!("batch norm expects [C] or [C, T], got {in_shape:?}")));
                }
                let gamma = store.add(format!("{name}.gamma"), Tensor::filled(&[c], T::one()), ParamKind::Weight);
                let beta = store.add(format!("{name}.beta"), Tensor::zeros(&[c]), ParamKind::Weight);
                let mean = store.add(format!("{name}.running_mean"), Tensor::zeros(&[c]), ParamKind::Buffer);
                let var = store.add(format!("{name}.running_var"), Tensor::filled(&[c], T::one()), ParamKind::Buffer);
                (
                    LayerKind::BatchNorm { gamma, beta, mean, var, c, momentum, eps },
                    in_shape.to_vec(),
                )
            }
            LayerSpec::Relu => (LayerKind::Relu, in_shape.to_vec()),
            LayerSpec::AvgPoolTime => {
                let [c, _] = *in_shape else {
                    return Err(bad(format!("temporal pooling expects [C, T], got {in_shape:?}")));
                };
                (LayerKind::AvgPoolTime, vec![c])
            }
            LayerSpec::Flatten => (LayerKind::Flatten, vec![in_shape.iter().product()]),
            LayerSpec::Linear { out_features } => {
                let [fin] = *in_shape else {
                    return Err(bad(format!("linear expects [F], got {in_shape:?}")));
                };
                let bound = 1.0 / (fin as f64).sqrt();
                let weight = store.add(
                    format!("{name}.weight"),
                    uniform_tensor(&[out_features, fin], bound, rng),
                    ParamKind::Weight,
                );
                let bias = store.add(format!("{name}.bias"), uniform_tensor(&[out_features], bound, rng), ParamKind::Weight);
                (LayerKind::Linear { weight, bias, fin, fout: out_features }, vec![out_features])
            }
        };
        Ok((Layer { name: name.to_string(), kind }, out))
    }

    fn err(&self, msg: String) -> Error {
        Error::dim(&self.name, msg)
    }

    pub fn forward<T: Real>(&self, store: &mut ParamStore<T>, x: Tensor<T>, mode: Mode) -> Result<(Tensor<T>, Cache<T>)> {
        match self.kind {
            LayerKind::ReflectionPad1d { pad } => {
                let [b, c, t] = x.shape[..] else {
                    return Err(self.err(format!("expected [B, C, T], got {:?}", x.shape)));
                };
                if t <= pad {
                    return Err(self.err(format!("length {t} too short for pad {pad}")));
                }
                let to = t + 2 * pad;
                let mut out = vec![T::zero(); b * c * to];
                for (src, dst) in x.data.chunks_exact(t).zip(out.chunks_exact_mut(to)) {
                    dst[pad..pad + t].copy_from_slice(src);
                    for i in 0..pad {
                        dst[pad - 1 - i] = src[i + 1];
                        dst[pad + t + i] = src[t - 2 - i];
                    }
                }
                Ok((Tensor::from_vec(&[b, c, to], out), Cache::Pad { t }))
            }
            LayerKind::Conv1d { weight, bias, cin, cout, k } => {
                let [b, c, t] = x.shape[..] else {
                    return Err(self.err(format!("expected [B, C, T], got {:?}", x.shape)));
                };
                if c != cin || t < k {
                    return Err(self.err(format!("expected [B, {cin}, >= {k}], got {:?}", x.shape)));
                }
                let to = t - k + 1;
                let n = b * to;
                // im2col: row (ci, kk), column (b, t)
                let mut col = vec![T::zero(); cin * k * n];
                for ci in 0..cin {
                    for kk in 0..k {
                        let row = &mut col[(ci * k + kk) * n..(ci * k + kk + 1) * n];
                        for bi in 0..b {
                            let src = &x.data[(bi * cin + ci) * t + kk..(bi * cin + ci) * t + kk + to];
                            row[bi * to..(bi + 1) * to].copy_from_slice(src);
                        }
                    }
                }
                let mut y2 = vec![T::zero(); cout * n];
                gemm(
                    MatRef::row_major(&store.value(weight).data, cout, cin * k),
                    MatRef::row_major(&col, cin * k, n),
                    &mut y2,
                    T::zero(),
                );
                let bv = &store.value(bias).data;
                let mut out = vec![T::zero(); b * cout * to];
                for co in 0..cout {
                    for bi in 0..b {
                        let src = &y2[co * n + bi * to..co * n + (bi + 1) * to];
                        let dst = &mut out[(bi * cout + co) * to..(bi * cout + co + 1) * to];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d = *s + bv[co];
                        }
                    }
                }
                Ok((Tensor::from_vec(&[b, cout, to], out), Cache::Conv { col, b, t }))
            }
            LayerKind::BatchNorm { gamma, beta, mean, var, c, momentum, eps } => {
                let Some((b, cc, l)) = bcl(&x.shape) else {
                    return Err(self.err(format!("expected [B, C] or [B, C, T], got {:?}", x.shape)));
                };
                if cc != c {
                    return Err(self.err(format!("expected {c} channels, got {:?}", x.shape)));
                }
                let n = b * l;
                let eps_t = T::from_f64(eps);
                let (mu, var_b): (Vec<T>, Vec<T>) = match mode {
                    Mode::Train => {
                        if n < 2 {
                            return Err(self.err("training-mode batch norm needs at least 2 values per channel".into()));
                        }
                        let mut mu = vec![T::zero(); c];
                        let mut vr = vec![T::zero(); c];
                        let nt = T::from_f64(n as f64);
                        for ch in 0..c {
                            let mut s = T::zero();
                            for bi in 0..b {
                                for v in &x.data[(bi * c + ch) * l..(bi * c + ch + 1) * l] {
                                    s += *v;
                                }
                            }
                            let m = s / nt;
                            let mut q = T::zero();
                            for bi in 0..b {
                                for v in &x.data[(bi * c + ch) * l..(bi * c + ch + 1) * l] {
                                    let d = *v - m;
                                    q += d * d;
                                }
                            }
                            mu[ch] = m;
                            vr[ch] = q / nt;
                        }
                        let mom = T::from_f64(momentum);
                        let unbias = T::from_f64(n as f64 / (n as f64 - 1.0));
                        {
                            let rm = &mut store.value_mut(mean).data;
                            for ch in 0..c {
                                rm[ch] = (T::one() - mom) * rm[ch] + mom * mu[ch];
                            }
                        }
                        {
                            let rv = &mut store.value_mut(var).data;
                            for ch in 0..c {
                                rv[ch] = (T::one() - mom) * rv[ch] + mom * vr[ch] * unbias;
                            }
                        }
                        (mu, vr)
                    }
                    Mode::Eval => (store.value(mean).data.clone(), store.value(var).data.clone()),
                };
                let inv_std: Vec<T> = var_b.iter().map(|v| T::one() / (*v + eps_t).sqrt()).collect();
                let g = &store.value(gamma).data;
                let be = &store.value(beta).data;
                let mut xhat = vec![T::zero(); x.data.len()];
                let mut out = vec![T::zero(); x.data.len()];
                for bi in 0..b {
                    for ch in 0..c {
                        let base = (bi * c + ch) * l;
                        for i in base..base + l {
                            let h = (x.data[i] - mu[ch]) * inv_std[ch];
                            xhat[i] = h;
                            out[i] = g[ch] * h + be[ch];
                        }
                    }
                }
                let shape = x.shape.clone();
                Ok((Tensor::from_vec(&shape, out), Cache::BatchNorm { xhat, inv_std, shape, mode }))
            }
            LayerKind::Relu => {
                let positive: Vec<bool> = x.data.iter().map(|v| *v > T::zero()).collect();
                let mut x = x;
                for (v, p) in x.data.iter_mut().zip(&positive) {
                    if !p {
                        *v = T::zero();
                    }
                }
                Ok((x, Cache::Relu { positive }))
            }
            LayerKind::AvgPoolTime => {
                let [b, c, t] = x.shape[..] else {
                    return Err(self.err(format!("expected [B, C, T], got {:?}", x.shape)));
                };
                let inv = T::from_f64(1.0 / t as f64);
                let out = x.data.chunks_exact(t).map(|r| r.iter().copied().sum::<T>() * inv).collect();
                Ok((Tensor::from_vec(&[b, c], out), Cache::Pool { t }))
            }
            LayerKind::Flatten => {
                let shape = x.shape.clone();
                let b = shape[0];
                let rest = x.data.len() / b.max(1);
                Ok((x.reshape(&[b, rest]), Cache::Flatten { shape }))
            }
            LayerKind::Linear { weight, bias, fin, fout } => {
                let [b, f] = x.shape[..] else {
                    return Err(self.err(format!("expected [B, F], got {:?}", x.shape)));
                };
                if f != fin {
                    return Err(self.err(format!("expected {fin} input features, got {f}")));
                }
                let bv = &store.value(bias).data;
                let mut out = Vec::with_capacity(b * fout);
                for _ in 0..b {
                    out.extend_from_slice(bv);
                }
                gemm(
                    MatRef::row_major(&x.data, b, fin),
                    MatRef::row_major(&store.value(weight).data, fout, fin).t(),
                    &mut out,
                    T::one(),
                );
                Ok((Tensor::from_vec(&[b, fout], out), Cache::Linear { input: x }))
            }
        }
    }

    /// Back-propagate `dy`, accumulating parameter gradients for unfrozen
    /// parameters, and return the input gradient.
    pub fn backward<T: Real>(&self, store: &mut ParamStore<T>, cache: Cache<T>, dy: Tensor<T>) -> Result<Tensor<T>> {
        match (&self.kind, cache) {
            (&LayerKind::ReflectionPad1d { pad }, Cache::Pad { t }) => {
                let [b, c, to] = dy.shape[..] else {
                    return Err(self.err("bad gradient shape".into()));
                };
                let mut dx = vec![T::zero(); b * c * t];
                for (src, dst) in dy.data.chunks_exact(to).zip(dx.chunks_exact_mut(t)) {
                    for (d, s) in dst.iter_mut().zip(&src[pad..pad + t]) {
                        *d += *s;
                    }
                    for i in 0..pad {
                        dst[i + 1] += src[pad - 1 - i];
                        dst[t - 2 - i] += src[pad + t + i];
                    }
                }
                Ok(Tensor::from_vec(&[b, c, t], dx))
            }
            (&LayerKind::Conv1d { weight, bias, cin, cout, k }, Cache::Conv { col, b, t }) => {
                let to = t - k + 1;
                let n = b * to;
                if dy.shape != [b, cout, to] {
                    return Err(self.err(format!("gradient shape {:?}, expected [{b}, {cout}, {to}]", dy.shape)));
                }
                let mut dy2 = vec![T::zero(); cout * n];
                for bi in 0..b {
                    for co in 0..cout {
                        dy2[co * n + bi * to..co * n + (bi + 1) * to]
                            .copy_from_slice(&dy.data[(bi * cout + co) * to..(bi * cout + co + 1) * to]);
                    }
                }
                if !store.is_frozen(weight) {
                    gemm(
                        MatRef::row_major(&dy2, cout, n),
                        MatRef::row_major(&col, cin * k, n).t(),
                        &mut store.grad_mut(weight).data,
                        T::one(),
                    );
                }
                if !store.is_frozen(bias) {
                    let gb = &mut store.grad_mut(bias).data;
                    for co in 0..cout {
                        gb[co] += dy2[co * n..(co + 1) * n].iter().copied().sum::<T>();
                    }
                }
                let mut dcol = vec![T::zero(); cin * k * n];
                gemm(
                    MatRef::row_major(&store.value(weight).data, cout, cin * k).t(),
                    MatRef::row_major(&dy2, cout, n),
                    &mut dcol,
                    T::zero(),
                );
                let mut dx = vec![T::zero(); b * cin * t];
                for ci in 0..cin {
                    for kk in 0..k {
                        let row = &dcol[(ci * k + kk) * n..(ci * k + kk + 1) * n];
                        for bi in 0..b {
                            let dst = &mut dx[(bi * cin + ci) * t + kk..(bi * cin + ci) * t + kk + to];
                            for (d, s) in dst.iter_mut().zip(&row[bi * to..(bi + 1) * to]) {
                                *d += *s;
                            }
                        }
                    }
                }
                Ok(Tensor::from_vec(&[b, cin, t], dx))
            }
            (&LayerKind::BatchNorm { gamma, beta, c, .. }, Cache::BatchNorm { xhat, inv_std, shape, mode }) => {
                if dy.shape != shape {
                    return Err(self.err(format!("gradient shape {:?}, expected {shape:?}", dy.shape)));
                }
                let (b, _, l) = bcl(&shape).expect("checked in forward");
                let n = T::from_f64((b * l) as f64);
                let mut sum_dy = vec![T::zero(); c];
                let mut sum_dy_xhat = vec![T::zero(); c];
                for bi in 0..b {
                    for ch in 0..c {
                        let base = (bi * c + ch) * l;
                        for i in base..base + l {
                            sum_dy[ch] += dy.data[i];
                            sum_dy_xhat[ch] += dy.data[i] * xhat[i];
                        }
                    }
                }
                let g = store.value(gamma).data.clone();
                if !store.is_frozen(gamma) {
                    for (d, s) in store.grad_mut(gamma).data.iter_mut().zip(&sum_dy_xhat) {
                        *d += *s;
                    }
                }
                if !store.is_frozen(beta) {
                    for (d, s) in store.grad_mut(beta).data.iter_mut().zip(&sum_dy) {
                        *d += *s;
                    }
                }
                let mut dx = vec![T::zero(); dy.data.len()];
                for bi in 0..b {
                    for ch in 0..c {
                        let base = (bi * c + ch) * l;
                        for i in base..base + l {
                            dx[i] = match mode {
                                Mode::Eval => dy.data[i] * g[ch] * inv_std[ch],
                                Mode::Train => {
                                    g[ch] * inv_std[ch] / n
                                        * (n * dy.data[i] - sum_dy[ch] - xhat[i] * sum_dy_xhat[ch])
                                }
                            };
                        }
                    }
                }
                Ok(Tensor::from_vec(&shape, dx))
            }
            (LayerKind::Relu, Cache::Relu { positive }) => {
                let mut dy = dy;
                for (v, p) in dy.data.iter_mut().zip(&positive) {
                    if !p {
                        *v = T::zero();
                    }
                }
                Ok(dy)
            }
            (LayerKind::AvgPoolTime, Cache::Pool { t }) => {
                let [b, c] = dy.shape[..] else {
                    return Err(self.err("bad gradient shape".into()));
                };
                let inv = T::from_f64(1.0 / t as f64);
                let mut dx = Vec::with_capacity(b * c * t);
                for v in &dy.data {
                    dx.extend(std::iter::repeat_n(*v * inv, t));
                }
                Ok(Tensor::from_vec(&[b, c, t], dx))
            }
            (LayerKind::Flatten, Cache::Flatten { shape }) => Ok(dy.reshape(&shape)),
            (&LayerKind::Linear { weight, bias, fin, fout }, Cache::Linear { input }) => {
                let b = input.shape[0];
                if dy.shape != [b, fout] {
                    return Err(self.err(format!("gradient shape {:?}, expected [{b}, {fout}]", dy.shape)));
                }
                if !store.is_frozen(weight) {
                    gemm(
                        MatRef::row_major(&dy.data, b, fout).t(),
                        MatRef::row_major(&input.data, b, fin),
                        &mut store.grad_mut(weight).data,
                        T::one(),
                    );
                }
                if !store.is_frozen(bias) {
                    let gb = &mut store.grad_mut(bias).data;
                    for row in dy.data.chunks_exact(fout) {
                        for (g, v) in gb.iter_mut().zip(row) {
                            *g += *v;
                        }
                    }
                }
                let mut dx = vec![T::zero(); b * fin];
                gemm(
                    MatRef::row_major(&dy.data, b, fout),
                    MatRef::row_major(&store.value(weight).data, fout, fin),
                    &mut dx,
                    T::zero(),
                );
                Ok(Tensor::from_vec(&[b, fin], dx))
            }
            _ => Err(self.err("cache does not belong to this layer".into())),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed;

    fn one<T: Real>(spec: LayerSpec, in_shape: &[usize]) -> (Layer, ParamStore<T>) {
        let mut store = ParamStore::new();
        let (l, _) = Layer::build("t", &spec, in_shape, &mut store, &mut seed::rng(0)).unwrap();
        (l, store)
    }

    #[test]
    fn relu_forward_backward() {
        let (l, mut s) = one::<f64>(LayerSpec::Relu, &[3]);
        let (y, c) = l.forward(&mut s, Tensor::from_vec(&[1, 3], vec![-1.0, 0.0, 2.0]), Mode::Train).unwrap();
        assert_eq!(y.data, vec![0.0, 0.0, 2.0]);
        let dx = l.backward(&mut s, c, Tensor::from_vec(&[1, 3], vec![5.0, 5.0, 5.0])).unwrap();
        assert_eq!(dx.data, vec![0.0, 0.0, 5.0]);
    }

    #[test]
    fn reflection_pad_definition() {
        let (l, mut s) = one::<f64>(LayerSpec::ReflectionPad1d { pad: 1 }, &[1, 3]);
        let (y, _) = l.forward(&mut s, Tensor::from_vec(&[1, 1, 3], vec![1.0, 2.0, 3.0]), Mode::Train).unwrap();
        assert_eq!(y.data, vec![2.0, 1.0, 2.0, 3.0, 2.0]);
    }

    #[test]
    fn identity_conv() {
        let (l, mut s) = one::<f64>(LayerSpec::Conv1d { out_channels: 2, kernel: 1 }, &[2, 4]);
        let LayerKind::Conv1d { weight, bias, .. } = l.kind else { unreachable!() };
        s.value_mut(weight).data = vec![1.0, 0.0, 0.0, 1.0];
        s.value_mut(bias).fill(0.0);
        let x = Tensor::from_vec(&[1, 2, 4], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0]);
        let (y, _) = l.forward(&mut s, x.clone(), Mode::Train).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn shape_mismatch_names_layer() {
        let (l, mut s) = one::<f32>(LayerSpec::Linear { out_features: 2 }, &[3]);
        let err = l.forward(&mut s, Tensor::zeros(&[1, 4]), Mode::Train).unwrap_err();
        assert!(matches!(&err, Error::Dimension { layer, .. } if layer == "t"), "{err}");
    }

    #[test]
    fn batchnorm_eval_is_affine_in_running_stats() {
        let (l, mut s) = one::<f64>(LayerSpec::batch_norm(), &[2]);
        let x = Tensor::from_vec(&[3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 9.0]);
        // Update running stats once, then evaluation is fixed.
        l.forward(&mut s, x.clone(), Mode::Train).unwrap();
        let (a, _) = l.forward(&mut s, x.clone(), Mode::Eval).unwrap();
        let (b, _) = l.forward(&mut s, x.clone(), Mode::Eval).unwrap();
        assert_eq!(a, b);
        let rm = s.get("t.running_mean").unwrap().value.data.clone();
        let rv = s.get("t.running_var").unwrap().value.data.clone();
        // running mean = 0.1 * batch mean; running var = 0.9 + 0.1 * unbiased var
        assert!((rm[0] - 0.3).abs() < 1e-12);
        assert!((rv[0] - (0.9 + 0.1 * 4.0)).abs() < 1e-12);
        let want = (1.0 - rm[0]) / (rv[0] + 1e-5).sqrt();
        assert!((a.data[0] - want).abs() < 1e-12);
    }
}
