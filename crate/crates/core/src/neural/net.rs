use rand::Rng;

use super::layers::{Cache, Layer, LayerSpec, Mode};
use super::params::ParamStore;
use super::real::Real;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// A chain of layers whose parameters live in a shared [`ParamStore`] under
/// `name.<layer>`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sequential {
    pub name: String,
    pub layers: Vec<Layer>,
    pub in_shape: Vec<usize>,
    pub out_shape: Vec<usize>,
}

/// Per-layer caches from one forward pass.
#[derive(Debug)]
pub struct Tape<T> {
    caches: Vec<Cache<T>>,
}

impl Sequential {
    pub fn build<T: Real, R: Rng + ?Sized>(
        name: &str,
        specs: &[LayerSpec],
        in_shape: &[usize],
        store: &mut ParamStore<T>,
        rng: &mut R,
    ) -> Result<Self> {
        let mut shape = in_shape.to_vec();
        let mut layers = Vec::with_capacity(specs.len());
        for (i, spec) in specs.iter().enumerate() {
            let tag = match spec {
                LayerSpec::ReflectionPad1d { .. } => "pad",
                LayerSpec::Conv1d { .. } => "conv",
                LayerSpec::BatchNorm { .. } => "bn",
                LayerSpec::Relu => "relu",
                LayerSpec::AvgPoolTime => "pool",
                LayerSpec::Flatten => "flatten",
                LayerSpec::Linear { .. } => "fc",
            };
            let (layer, out) = Layer::build(&format!("{name}.{tag}{i}"), spec, &shape, store, rng)?;
            layers.push(layer);
            shape = out;
        }
        Ok(Sequential {
            name: name.to_string(),
            layers,
            in_shape: in_shape.to_vec(),
            out_shape: shape,
        })
    }

    pub fn out_features(&self) -> usize {
        self.out_shape.iter().product()
    }

    pub fn forward<T: Real>(&self, store: &mut ParamStore<T>, x: Tensor<T>, mode: Mode) -> Result<(Tensor<T>, Tape<T>)> {
        if x.shape.len() != self.in_shape.len() + 1 || x.shape[1..] != self.in_shape[..] {
            return Err(Error::dim(
                &self.name,
                format!("input shape {:?}, expected [B, {:?}]", x.shape, self.in_shape),
            ));
        }
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut h = x;
        for layer in &self.layers {
            let (y, c) = layer.forward(store, h, mode)?;
            caches.push(c);
            h = y;
        }
        Ok((h, Tape { caches }))
    }

    /// Forward without keeping caches.
    pub fn infer<T: Real>(&self, store: &mut ParamStore<T>, x: Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        Ok(self.forward(store, x, mode)?.0)
    }

    pub fn backward<T: Real>(&self, store: &mut ParamStore<T>, tape: Tape<T>, dy: Tensor<T>) -> Result<Tensor<T>> {
        let mut g = dy;
        for (layer, cache) in self.layers.iter().zip(tape.caches).rev() {
            g = layer.backward(store, cache, g)?;
        }
        Ok(g)
    }
}
