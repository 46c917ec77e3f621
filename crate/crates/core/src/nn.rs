//! Small neural-network toolkit over `candle`: seeded parameter stores, the
//! layers the three models are built from, checkpoints and loss logs.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor, Var, D};
use candle_nn::{Conv2dConfig, ConvTranspose2dConfig, Module, Optimizer, ParamsAdamW};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::latent::DiagonalGaussian;

/// Named trainable parameters, initialised from a seeded generator so that
/// two stores built with the same seed are bit-identical.
pub struct ParamStore {
    vars: BTreeMap<String, Var>,
    dtype: DType,
    device: Device,
    rng: ChaCha8Rng,
}

impl ParamStore {
    pub fn new(seed: u64, dtype: DType) -> Self {
        Self {
            vars: BTreeMap::new(),
            dtype,
            device: Device::Cpu,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    fn insert(&mut self, name: &str, values: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if self.vars.contains_key(name) {
            return Err(Error::Config(format!("parameter {name} declared twice")));
        }
        let t = Tensor::from_vec(values, shape, &self.device)?.to_dtype(self.dtype)?;
        let var = Var::from_tensor(&t)?;
        let out = var.as_tensor().clone();
        self.vars.insert(name.to_string(), var);
        Ok(out)
    }

    pub fn uniform(&mut self, name: &str, shape: &[usize], bound: f64) -> Result<Tensor> {
        let n = shape.iter().product();
        let values = (0..n)
            .map(|_| self.rng.random_range(-bound..=bound))
            .collect();
        self.insert(name, values, shape)
    }

    pub fn normal(&mut self, name: &str, shape: &[usize], stddev: f64) -> Result<Tensor> {
        let n = shape.iter().product();
        let values = (0..n)
            .map(|_| stddev * self.rng.sample::<f64, _>(StandardNormal))
            .collect();
        self.insert(name, values, shape)
    }

    pub fn zeros(&mut self, name: &str, shape: &[usize]) -> Result<Tensor> {
        let n = shape.iter().product();
        self.insert(name, vec![0.0; n], shape)
    }

    /// All variables, ordered by name.
    pub fn vars(&self) -> Vec<Var> {
        self.vars.values().cloned().collect()
    }

    pub fn named_vars(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn get(&self, name: &str) -> Option<&Var> {
        self.vars.get(name)
    }

    pub fn num_parameters(&self) -> usize {
        self.vars.values().map(|v| v.elem_count()).sum()
    }

    /// Copies of the current parameter values, for comparing before/after an update.
    pub fn snapshot(&self) -> Result<BTreeMap<String, Vec<f64>>> {
        self.vars
            .iter()
            .map(|(k, v)| Ok((k.clone(), flatten_f64(v.as_tensor())?)))
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let tensors: HashMap<String, Tensor> = self
            .vars
            .iter()
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect();
        candle_core::safetensors::save(&tensors, path)?;
        Ok(())
    }

    /// Overwrites every parameter with the tensor of the same name in `path`.
    pub fn load(&mut self, path: &Path) -> Result<()> {
        let mut tensors = candle_core::safetensors::load(path, &self.device)?;
        for (name, var) in &self.vars {
            let t = tensors
                .remove(name)
                .ok_or_else(|| Error::Config(format!("checkpoint lacks parameter {name}")))?;
            if t.dims() != var.dims() {
                return Err(Error::ShapeMismatch {
                    expected: var.dims().to_vec(),
                    actual: t.dims().to_vec(),
                });
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        if let Some(extra) = tensors.keys().next() {
            return Err(Error::Config(format!(
                "checkpoint has unexpected parameter {extra}"
            )));
        }
        Ok(())
    }
}

pub fn flatten_f64(t: &Tensor) -> Result<Vec<f64>> {
    Ok(t.flatten_all()?.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

pub fn rows_f64(t: &Tensor) -> Result<Vec<Vec<f64>>> {
    Ok(t.to_dtype(DType::F64)?.to_vec2::<f64>()?)
}

pub fn scalar_f64(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

/// Stacks row vectors into a `(rows, dim)` tensor.
pub fn matrix(rows: &[Vec<f64>], dtype: DType) -> Result<Tensor> {
    let dim = rows.first().map_or(0, Vec::len);
    let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
    Ok(Tensor::from_vec(flat, (rows.len(), dim), &Device::Cpu)?.to_dtype(dtype)?)
}

pub fn linear(
    store: &mut ParamStore,
    name: &str,
    in_dim: usize,
    out_dim: usize,
) -> Result<candle_nn::Linear> {
    let bound = 1.0 / (in_dim as f64).sqrt();
    let w = store.uniform(&format!("{name}.weight"), &[out_dim, in_dim], bound)?;
    let b = store.uniform(&format!("{name}.bias"), &[out_dim], bound)?;
    Ok(candle_nn::Linear::new(w, Some(b)))
}

/// Stride-2, kernel-4, padding-1 convolution: halves both spatial dimensions.
pub fn down_conv(
    store: &mut ParamStore,
    name: &str,
    in_ch: usize,
    out_ch: usize,
) -> Result<candle_nn::Conv2d> {
    let bound = 1.0 / ((in_ch * 16) as f64).sqrt();
    let w = store.uniform(&format!("{name}.weight"), &[out_ch, in_ch, 4, 4], bound)?;
    let b = store.uniform(&format!("{name}.bias"), &[out_ch], bound)?;
    let cfg = Conv2dConfig {
        padding: 1,
        stride: 2,
        ..Default::default()
    };
    Ok(candle_nn::Conv2d::new(w, Some(b), cfg))
}

/// Transposed counterpart of [`down_conv`]: doubles both spatial dimensions.
pub fn up_conv(
    store: &mut ParamStore,
    name: &str,
    in_ch: usize,
    out_ch: usize,
) -> Result<candle_nn::ConvTranspose2d> {
    let bound = 1.0 / ((out_ch * 16) as f64).sqrt();
    let w = store.uniform(&format!("{name}.weight"), &[in_ch, out_ch, 4, 4], bound)?;
    let b = store.uniform(&format!("{name}.bias"), &[out_ch], bound)?;
    let cfg = ConvTranspose2dConfig {
        padding: 1,
        stride: 2,
        ..Default::default()
    };
    Ok(candle_nn::ConvTranspose2d::new(w, Some(b), cfg))
}

pub fn embedding(
    store: &mut ParamStore,
    name: &str,
    vocab: usize,
    dim: usize,
) -> Result<candle_nn::Embedding> {
    let w = store.normal(&format!("{name}.weight"), &[vocab, dim], 1.0)?;
    Ok(candle_nn::Embedding::new(w, dim))
}

/// Single LSTM cell with fused gate weights (input, forget, cell, output order).
#[derive(Debug, Clone)]
pub struct LstmCell {
    w_ih: Tensor,
    w_hh: Tensor,
    bias: Tensor,
    hidden: usize,
}

impl LstmCell {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, hidden: usize) -> Result<Self> {
        let bound = 1.0 / (hidden as f64).sqrt();
        Ok(Self {
            w_ih: store.uniform(&format!("{name}.w_ih"), &[4 * hidden, in_dim], bound)?,
            w_hh: store.uniform(&format!("{name}.w_hh"), &[4 * hidden, hidden], bound)?,
            bias: store.uniform(&format!("{name}.bias"), &[4 * hidden], bound)?,
            hidden,
        })
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    /// Input-to-gate projection for a whole `(batch, time, in)` sequence at once.
    pub fn project_inputs(&self, xs: &Tensor) -> Result<Tensor> {
        let (b, t, d) = xs.dims3()?;
        let flat = xs.reshape((b * t, d))?.matmul(&self.w_ih.t()?)?;
        Ok(flat.broadcast_add(&self.bias)?.reshape((b, t, 4 * self.hidden))?)
    }

    /// One step from an already projected input `(batch, 4*hidden)`.
    pub fn step(&self, projected: &Tensor, h: &Tensor, c: &Tensor) -> Result<(Tensor, Tensor)> {
        let gates = (projected + h.matmul(&self.w_hh.t()?)?)?;
        let chunks = gates.chunk(4, 1)?;
        let i = candle_nn::ops::sigmoid(&chunks[0])?;
        let f = candle_nn::ops::sigmoid(&chunks[1])?;
        let g = chunks[2].tanh()?;
        let o = candle_nn::ops::sigmoid(&chunks[3])?;
        let c = ((f * c)? + (i * g)?)?;
        let h = (o * c.tanh()?)?;
        Ok((h, c))
    }

    pub fn zero_state(&self, batch: usize, dtype: DType) -> Result<(Tensor, Tensor)> {
        let z = Tensor::zeros((batch, self.hidden), dtype, &Device::Cpu)?;
        Ok((z.clone(), z))
    }
}

/// Three-layer perceptron with ReLU between layers.
#[derive(Debug, Clone)]
pub struct Mlp {
    layers: Vec<candle_nn::Linear>,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        hidden: &[usize],
        out_dim: usize,
    ) -> Result<Self> {
        let mut dims = vec![in_dim];
        dims.extend_from_slice(hidden);
        dims.push(out_dim);
        let layers = dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| linear(store, &format!("{name}.{i}"), w[0], w[1]))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self { layers })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(&h)?;
            if i < last {
                h = h.relu()?;
            }
        }
        Ok(h)
    }
}

/// Per-row `KL(N(mean, exp(log_std)^2) || N(0, I))`, shape `(batch,)`.
pub fn kl_standard_rows(mean: &Tensor, log_std: &Tensor) -> Result<Tensor> {
    let var = (log_std * 2.0)?.exp()?;
    let terms = (((var + mean.sqr()?)? - 1.0)? * 0.5)?;
    Ok((terms - log_std)?.sum(D::Minus1)?)
}

/// Per-row `KL(q || p)` between diagonal Gaussians given by mean and log-stddev.
pub fn kl_between_rows(
    q_mean: &Tensor,
    q_log_std: &Tensor,
    p_mean: &Tensor,
    p_log_std: &Tensor,
) -> Result<Tensor> {
    let log_ratio = (q_log_std - p_log_std)?;
    let ratio_sq = (&log_ratio * 2.0)?.exp()?;
    let diff_sq = ((q_mean - p_mean)? / p_log_std.exp()?)?.sqr()?;
    let terms = (((ratio_sq + diff_sq)? - 1.0)? * 0.5)?;
    Ok((terms - log_ratio)?.sum(D::Minus1)?)
}

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: &Tensor) -> Result<Tensor> {
    let pos = x.relu()?;
    let tail = ((x.abs()?.neg()?.exp()?) + 1.0)?.log()?;
    Ok((pos + tail)?)
}

/// Converts rows of network outputs into validated Gaussians.
pub fn gaussians_from_rows(mean: &Tensor, log_std: &Tensor) -> Result<Vec<DiagonalGaussian>> {
    rows_f64(mean)?
        .into_iter()
        .zip(rows_f64(log_std)?)
        .map(|(m, l)| DiagonalGaussian::from_log_stddev(m, &l))
        .collect()
}

/// Stacks the mean and log-stddev of each Gaussian into two `(batch, dim)` tensors.
pub fn gaussian_tensors(gs: &[&DiagonalGaussian], dtype: DType) -> Result<(Tensor, Tensor)> {
    let means: Vec<Vec<f64>> = gs.iter().map(|g| g.mean().to_vec()).collect();
    let logs: Vec<Vec<f64>> = gs
        .iter()
        .map(|g| g.stddev().iter().map(|s| s.ln()).collect())
        .collect();
    Ok((matrix(&means, dtype)?, matrix(&logs, dtype)?))
}

/// Adam (AdamW with zero weight decay) over the given variables.
pub fn adam(vars: Vec<Var>, lr: f64) -> Result<candle_nn::AdamW> {
    let params = ParamsAdamW {
        lr,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
        weight_decay: 0.0,
    };
    Ok(candle_nn::AdamW::new(vars, params)?)
}

/// Checkpoint layout: `<dir>/<stem>.safetensors` plus `<dir>/<stem>.json` for the config.
pub struct CheckpointPaths {
    pub weights: PathBuf,
    pub config: PathBuf,
}

impl CheckpointPaths {
    pub fn new(dir: &Path, stem: &str) -> Self {
        Self {
            weights: dir.join(format!("{stem}.safetensors")),
            config: dir.join(format!("{stem}.json")),
        }
    }

    pub fn exists(&self) -> bool {
        self.weights.exists() && self.config.exists()
    }

    pub fn write<C: Serialize>(&self, store: &ParamStore, config: &C) -> Result<()> {
        if let Some(parent) = self.weights.parent() {
            std::fs::create_dir_all(parent)?;
        }
        store.save(&self.weights)?;
        std::fs::write(&self.config, serde_json::to_string_pretty(config)?)?;
        Ok(())
    }

    pub fn read_config<C: DeserializeOwned>(&self) -> Result<C> {
        let text = std::fs::read_to_string(&self.config)?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Column-oriented loss history, written out as CSV with a `step` column first.
#[derive(Debug, Clone, PartialEq)]
pub struct LossHistory {
    columns: Vec<&'static str>,
    rows: Vec<Vec<f64>>,
}

impl LossHistory {
    pub fn new(columns: &[&'static str]) -> Self {
        Self {
            columns: columns.to_vec(),
            rows: Vec::new(),
        }
    }

    pub fn push(&mut self, values: &[f64]) {
        debug_assert_eq!(values.len(), self.columns.len());
        self.rows.push(values.to_vec());
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let idx = self.columns.iter().position(|c| *c == name)?;
        Some(self.rows.iter().map(|r| r[idx]).collect())
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.rows
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step");
        for c in &self.columns {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for (step, row) in self.rows.iter().enumerate() {
            let _ = write!(out, "{}", step + 1);
            for v in row {
                let _ = write!(out, ",{v}");
            }
            out.push('\n');
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }
}

/// Returns `Err(Diverged)` when any of `values` is NaN or infinite.
pub fn check_finite(step: usize, named: &[(&str, f64)]) -> Result<()> {
    for (name, v) in named {
        if !v.is_finite() {
            return Err(Error::Diverged {
                step,
                detail: format!("{name} = {v}"),
            });
        }
    }
    Ok(())
}

/// Gradient of `loss` with respect to every parameter in `store`, by name.
pub fn gradients(store: &ParamStore, loss: &Tensor) -> Result<BTreeMap<String, Vec<f64>>> {
    let grads = loss.backward()?;
    store
        .named_vars()
        .map(|(name, var)| {
            let g = match grads.get(var.as_tensor()) {
                Some(g) => flatten_f64(g)?,
                None => vec![0.0; var.as_tensor().elem_count()],
            };
            Ok((name.to_string(), g))
        })
        .collect()
}

/// Runs one optimizer step on `loss`.
pub fn backward_step(opt: &mut candle_nn::AdamW, loss: &Tensor) -> Result<()> {
    opt.backward_step(loss)?;
    Ok(())
}
