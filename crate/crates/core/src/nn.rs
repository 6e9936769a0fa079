//! Named parameter storage, tape binding and small layer helpers.

use rand::Rng;
use regimenas_tensor::{Gradients, Graph, PowerIterState, Tensor, Var};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    /// Subject to spectral normalization and the Lipschitz penalty.
    pub spectral: bool,
    /// Excluded from weight decay (biases, scalars).
    pub no_decay: bool,
    pub power: Option<PowerIterState>,
}

#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub fan_in: usize,
    pub fan_out: usize,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param] {
        &mut self.params
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, spectral: bool, no_decay: bool) -> ParamId {
        let power = spectral.then(|| PowerIterState::new(value.shape()[0], value.cols()));
        self.params.push(Param {
            name: name.into(),
            value: value.with_grad(),
            spectral,
            no_decay,
            power,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn constant_init(&mut self, name: impl Into<String>, shape: &[usize], value: f64) -> ParamId {
        self.add(name, Tensor::full(shape.to_vec(), value), false, true)
    }

    /// Glorot-uniform weight and zero bias.
    pub fn linear<R: Rng>(&mut self, rng: &mut R, name: &str, fan_in: usize, fan_out: usize, spectral: bool) -> Linear {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out).map(|_| rng.random_range(-bound..bound)).collect();
        let w = self.add(
            format!("{name}.w"),
            Tensor::new([fan_in, fan_out], data).expect("positive layer sizes"),
            spectral,
            false,
        );
        let b = self.add(format!("{name}.b"), Tensor::zeros([1, fan_out]), false, true);
        Linear { w, b, fan_in, fan_out }
    }

    /// Uniform matrix in `[-scale, scale]`.
    pub fn matrix<R: Rng>(&mut self, rng: &mut R, name: &str, rows: usize, cols: usize, scale: f64, spectral: bool) -> ParamId {
        let data = (0..rows * cols).map(|_| rng.random_range(-scale..=scale)).collect();
        self.add(name, Tensor::new([rows, cols], data).expect("positive sizes"), spectral, false)
    }

    pub fn bind<'g>(&self, g: &'g Graph) -> Bound<'g> {
        Bound {
            vars: self.params.iter().map(|p| g.param(&p.value)).collect(),
        }
    }

    /// Gradients of every parameter in store order (zeros where the loss does not depend on it).
    pub fn collect_grads(&self, bound: &Bound<'_>, grads: &Gradients) -> Vec<Vec<f64>> {
        self.params
            .iter()
            .zip(&bound.vars)
            .map(|(p, v)| {
                grads
                    .get(*v)
                    .map(<[f64]>::to_vec)
                    .unwrap_or_else(|| vec![0.0; p.value.numel()])
            })
            .collect()
    }

    pub fn spectral_ids(&self) -> Vec<ParamId> {
        (0..self.params.len())
            .filter(|&i| self.params[i].spectral)
            .map(ParamId)
            .collect()
    }

    pub fn snapshot(&self) -> Vec<Vec<f64>> {
        self.params.iter().map(|p| p.value.data().to_vec()).collect()
    }

    pub fn restore(&mut self, values: &[Vec<f64>]) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(CoreError::Config(format!(
                "snapshot has {} tensors, model has {}",
                values.len(),
                self.params.len()
            )));
        }
        for (p, v) in self.params.iter_mut().zip(values) {
            if v.len() != p.value.numel() {
                return Err(CoreError::Config(format!("snapshot size mismatch for {}", p.name)));
            }
            p.value.data_mut().copy_from_slice(v);
        }
        Ok(())
    }

    pub fn to_checkpoint(&self, config_hash: &str) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.to_string(),
            config_hash: config_hash.to_string(),
            tensors: self
                .params
                .iter()
                .map(|p| CheckpointTensor {
                    name: p.name.clone(),
                    shape: p.value.shape().to_vec(),
                    data: p.value.data().to_vec(),
                })
                .collect(),
        }
    }

    /// Loads weights from a checkpoint whose manifest matches this store.
    pub fn load_checkpoint(&mut self, ck: &Checkpoint, config_hash: &str) -> Result<()> {
        if ck.config_hash != config_hash {
            return Err(CoreError::Config(format!(
                "checkpoint config hash {} does not match {config_hash}",
                ck.config_hash
            )));
        }
        if ck.tensors.len() != self.params.len() {
            return Err(CoreError::Config("checkpoint tensor count mismatch".into()));
        }
        for (p, t) in self.params.iter_mut().zip(&ck.tensors) {
            if p.name != t.name || p.value.shape() != t.shape.as_slice() || t.data.len() != p.value.numel() {
                return Err(CoreError::Config(format!("checkpoint entry {} does not match the model", t.name)));
            }
            p.value.data_mut().copy_from_slice(&t.data);
        }
        Ok(())
    }
}

pub const CHECKPOINT_FORMAT: &str = "regimenas-weights-v1";

/// JSON weight container with a shape manifest and the hash of the producing config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub config_hash: String,
    pub tensors: Vec<CheckpointTensor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// Parameters of one [`ParamStore`] placed on a graph.
pub struct Bound<'g> {
    pub vars: Vec<Var<'g>>,
}

impl<'g> Bound<'g> {
    pub fn get(&self, id: ParamId) -> Var<'g> {
        self.vars[id.0]
    }

    /// `x·W + b` for `[N×in]` or `[B×T×in]` input.
    pub fn linear(&self, lin: &Linear, x: Var<'g>) -> Result<Var<'g>> {
        let shape = x.shape();
        match shape.len() {
            2 => Ok(x.matmul(self.get(lin.w))?.add(self.get(lin.b))?),
            3 => {
                let (b, t, f) = (shape[0], shape[1], shape[2]);
                let flat = x.reshape(&[b * t, f])?;
                let y = flat.matmul(self.get(lin.w))?.add(self.get(lin.b))?;
                Ok(y.reshape(&[b, t, lin.fan_out])?)
            }
            _ => Err(CoreError::Tensor(regimenas_tensor::TensorError::Dimension {
                op: "linear",
                detail: format!("input of shape {shape:?}"),
            })),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Activation {
    Relu,
    Gelu,
}

impl Activation {
    pub fn apply<'g>(self, x: Var<'g>) -> Result<Var<'g>> {
        Ok(match self {
            Activation::Relu => x.relu()?,
            Activation::Gelu => x.gelu()?,
        })
    }
}

/// Inverted dropout with a mask drawn from `rng`; identity when `rate` is 0.
pub fn dropout<'g, R: Rng>(x: Var<'g>, rate: f64, rng: &mut R) -> Result<Var<'g>> {
    if rate <= 0.0 {
        return Ok(x);
    }
    let shape = x.shape();
    let n: usize = shape.iter().product();
    let keep = 1.0 - rate;
    let mask = (0..n)
        .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
        .collect();
    let m = x.graph().constant_from(shape, mask)?;
    Ok(x.mul(m)?)
}
