//! Multi-layer perceptron with optional batch normalization and dropout.
//!
//! Each hidden block is `Linear -> BatchNorm -> ReLU -> Dropout`, and the
//! last layer is a plain `Linear`. In [`Mode::Partial`] the batch-norm and
//! dropout steps are skipped entirely; in [`Mode::Eval`] batch-norm uses the
//! running statistics and dropout is the identity.

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::{Gradients, Matrix, Mode, Parameterized};
use crate::error::{Error, Result};

pub const BN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    /// `in_dim x out_dim`
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl Linear {
    /// Glorot-uniform weights, zero bias.
    pub fn new(in_dim: usize, out_dim: usize, rng: &mut dyn RngCore) -> Self {
        let bound = (6.0 / (in_dim + out_dim) as f64).sqrt();
        let data = (0..in_dim * out_dim).map(|_| rng.random_range(-bound..bound)).collect();
        Self {
            weight: Matrix::from_vec(in_dim, out_dim, data).expect("sized"),
            bias: vec![0.0; out_dim],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn out_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut y = x.matmul(&self.weight)?;
        y.add_row_vector(&self.bias);
        Ok(y)
    }
}

/// Batch normalization over rows.
///
/// `running_var` tracks `var + eps`, so evaluation divides by
/// `sqrt(running_var)` directly and a layer with running stats `(0, 1)` and
/// affine `(1, 0)` is exactly the identity.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNorm {
    pub gamma: Vec<f64>,
    pub beta: Vec<f64>,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new(dim: usize, momentum: f64) -> Self {
        Self {
            gamma: vec![1.0; dim],
            beta: vec![0.0; dim],
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
            momentum,
        }
    }
}

#[derive(Debug, Clone)]
struct NormCache {
    x_hat: Matrix,
    inv_std: Vec<f64>,
    /// Batch statistics `(mean, var + eps)` when computed in train mode.
    batch_stats: Option<(Vec<f64>, Vec<f64>)>,
}

#[derive(Debug, Clone)]
struct BlockCache {
    norm: Option<NormCache>,
    /// Post-ReLU activations, used for the ReLU mask.
    activated: Matrix,
    dropout_scale: Option<Vec<f64>>,
}

/// Forward record of one [`Mlp::forward`] call.
#[derive(Debug, Clone)]
pub struct MlpTape {
    /// Input of every linear layer.
    inputs: Vec<Matrix>,
    blocks: Vec<BlockCache>,
}

impl MlpTape {
    /// Which hidden units passed the ReLU, block by block in row-major order.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.blocks
            .iter()
            .flat_map(|b| b.activated.data().iter().map(|&v| v > 0.0))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub linears: Vec<Linear>,
    /// One per hidden block, or empty for an MLP without batch-norm.
    pub norms: Vec<BatchNorm>,
    pub dropout: f64,
}

impl Mlp {
    /// `dims = [in, hidden..., out]`.
    pub fn new(dims: &[usize], batch_norm: bool, dropout: f64, momentum: f64, rng: &mut dyn RngCore) -> Result<Self> {
        if dims.len() < 2 || dims.contains(&0) {
            return Err(Error::Dimension(format!("bad MLP dims {dims:?}")));
        }
        if !(0.0..1.0).contains(&dropout) {
            return Err(Error::Dimension(format!("dropout {dropout} not in [0,1)")));
        }
        let linears = dims.windows(2).map(|w| Linear::new(w[0], w[1], rng)).collect();
        let norms = if batch_norm {
            dims[1..dims.len() - 1]
                .iter()
                .map(|&d| BatchNorm::new(d, momentum))
                .collect()
        } else {
            Vec::new()
        };
        Ok(Self {
            linears,
            norms,
            dropout,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.linears[0].in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.linears.last().expect("nonempty").out_dim()
    }

    pub fn forward(&self, x: &Matrix, mode: Mode, rng: &mut dyn RngCore) -> Result<(Matrix, MlpTape)> {
        if x.cols() != self.in_dim() {
            return Err(Error::Dimension(format!(
                "MLP expects {} input columns, got {}",
                self.in_dim(),
                x.cols()
            )));
        }
        let hidden = self.linears.len() - 1;
        let mut inputs = Vec::with_capacity(self.linears.len());
        let mut blocks = Vec::with_capacity(hidden);
        let mut h = x.clone();
        for (i, linear) in self.linears.iter().enumerate() {
            let z = linear.forward(&h)?;
            inputs.push(h);
            if i == hidden {
                return Ok((z, MlpTape { inputs, blocks }));
            }
            let (mut z, norm) = match (self.norms.get(i), mode) {
                (Some(bn), Mode::Train) => batch_norm_train(bn, &z),
                (Some(bn), Mode::Eval) => batch_norm_eval(bn, &z),
                _ => (z, None),
            };
            for v in z.data_mut() {
                *v = v.max(0.0);
            }
            let activated = z.clone();
            let dropout_scale = if mode == Mode::Train && self.dropout > 0.0 {
                let keep = 1.0 - self.dropout;
                let scale: Vec<f64> = (0..z.data().len())
                    .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                for (v, s) in z.data_mut().iter_mut().zip(&scale) {
                    *v *= s;
                }
                Some(scale)
            } else {
                None
            };
            blocks.push(BlockCache {
                norm,
                activated,
                dropout_scale,
            });
            h = z;
        }
        unreachable!("loop returns at the final layer")
    }

    /// Gradients in [`Parameterized::tensors`] order, and the gradient with
    /// respect to the input.
    pub fn backward(&self, tape: &MlpTape, grad_out: &Matrix) -> Result<(Gradients, Matrix)> {
        let layers = self.linears.len();
        if tape.inputs.len() != layers {
            return Err(Error::Dimension("tape does not match MLP depth".into()));
        }
        let mut per_layer: Vec<Vec<Vec<f64>>> = vec![Vec::new(); layers];
        let mut g = grad_out.clone();
        for i in (0..layers).rev() {
            let linear = &self.linears[i];
            let input = &tape.inputs[i];
            if g.shape() != (input.rows(), linear.out_dim()) {
                return Err(Error::Dimension(format!(
                    "upstream gradient {:?} does not match layer output ({}, {})",
                    g.shape(),
                    input.rows(),
                    linear.out_dim()
                )));
            }
            let dw = input.t_matmul(&g)?;
            let db = g.column_sums();
            let mut dx = g.matmul_t(&linear.weight)?;
            let mut tensors = vec![dw.into_data(), db];
            if i > 0 {
                let block = &tape.blocks[i - 1];
                if let Some(scale) = &block.dropout_scale {
                    for (v, s) in dx.data_mut().iter_mut().zip(scale) {
                        *v *= s;
                    }
                }
                for (v, a) in dx.data_mut().iter_mut().zip(block.activated.data()) {
                    if *a <= 0.0 {
                        *v = 0.0;
                    }
                }
                if let Some(cache) = &block.norm {
                    let bn = &self.norms[i - 1];
                    let (dgamma, dbeta, dz) = batch_norm_backward(bn, cache, &dx);
                    per_layer[i - 1].push(dgamma);
                    per_layer[i - 1].push(dbeta);
                    dx = dz;
                } else if i - 1 < self.norms.len() {
                    let dim = self.norms[i - 1].gamma.len();
                    per_layer[i - 1].push(vec![0.0; dim]);
                    per_layer[i - 1].push(vec![0.0; dim]);
                }
            }
            tensors.append(&mut per_layer[i]);
            per_layer[i] = tensors;
            g = dx;
        }
        Ok((Gradients(per_layer.into_iter().flatten().collect()), g))
    }

    /// Folds the batch statistics recorded on `tape` into the running stats.
    pub fn update_running_stats(&mut self, tape: &MlpTape) {
        for (bn, block) in self.norms.iter_mut().zip(&tape.blocks) {
            let Some(NormCache {
                batch_stats: Some((mean, var)),
                ..
            }) = &block.norm
            else {
                continue;
            };
            let m = bn.momentum;
            for j in 0..mean.len() {
                bn.running_mean[j] = (1.0 - m) * bn.running_mean[j] + m * mean[j];
                bn.running_var[j] = (1.0 - m) * bn.running_var[j] + m * var[j];
            }
        }
    }
}

fn batch_norm_train(bn: &BatchNorm, z: &Matrix) -> (Matrix, Option<NormCache>) {
    let (n, d) = z.shape();
    let nf = n as f64;
    let mean: Vec<f64> = z.column_sums().into_iter().map(|s| s / nf).collect();
    let mut var = vec![0.0; d];
    for i in 0..n {
        for (j, &x) in z.row(i).iter().enumerate() {
            var[j] += (x - mean[j]).powi(2);
        }
    }
    let var_eps: Vec<f64> = var.iter().map(|v| v / nf + BN_EPS).collect();
    let inv_std: Vec<f64> = var_eps.iter().map(|v| 1.0 / v.sqrt()).collect();
    let (x_hat, y) = normalize(bn, z, &mean, &inv_std);
    let cache = NormCache {
        x_hat,
        inv_std,
        batch_stats: Some((mean, var_eps)),
    };
    (y, Some(cache))
}

fn batch_norm_eval(bn: &BatchNorm, z: &Matrix) -> (Matrix, Option<NormCache>) {
    let inv_std: Vec<f64> = bn.running_var.iter().map(|v| 1.0 / v.sqrt()).collect();
    let (x_hat, y) = normalize(bn, z, &bn.running_mean, &inv_std);
    let cache = NormCache {
        x_hat,
        inv_std,
        batch_stats: None,
    };
    (y, Some(cache))
}

fn normalize(bn: &BatchNorm, z: &Matrix, mean: &[f64], inv_std: &[f64]) -> (Matrix, Matrix) {
    let (n, d) = z.shape();
    let mut x_hat = Matrix::zeros(n, d);
    let mut y = Matrix::zeros(n, d);
    for i in 0..n {
        for j in 0..d {
            let xh = (z.get(i, j) - mean[j]) * inv_std[j];
            x_hat.set(i, j, xh);
            y.set(i, j, bn.gamma[j] * xh + bn.beta[j]);
        }
    }
    (x_hat, y)
}

fn batch_norm_backward(bn: &BatchNorm, cache: &NormCache, dy: &Matrix) -> (Vec<f64>, Vec<f64>, Matrix) {
    let (n, d) = dy.shape();
    let mut dgamma = vec![0.0; d];
    let dbeta = dy.column_sums();
    for i in 0..n {
        for (j, g) in dgamma.iter_mut().enumerate() {
            *g += dy.get(i, j) * cache.x_hat.get(i, j);
        }
    }
    let mut dx = Matrix::zeros(n, d);
    if cache.batch_stats.is_some() {
        // dx = inv_std / n * (n * dxh - sum(dxh) - x_hat * sum(dxh * x_hat))
        let nf = n as f64;
        let mut sum_dxh = vec![0.0; d];
        let mut sum_dxh_xh = vec![0.0; d];
        for i in 0..n {
            for j in 0..d {
                let dxh = dy.get(i, j) * bn.gamma[j];
                sum_dxh[j] += dxh;
                sum_dxh_xh[j] += dxh * cache.x_hat.get(i, j);
            }
        }
        for i in 0..n {
            for j in 0..d {
                let dxh = dy.get(i, j) * bn.gamma[j];
                let v = cache.inv_std[j] / nf * (nf * dxh - sum_dxh[j] - cache.x_hat.get(i, j) * sum_dxh_xh[j]);
                dx.set(i, j, v);
            }
        }
    } else {
        for i in 0..n {
            for j in 0..d {
                dx.set(i, j, dy.get(i, j) * bn.gamma[j] * cache.inv_std[j]);
            }
        }
    }
    (dgamma, dbeta, dx)
}

impl Parameterized for Mlp {
    fn tensors(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for (i, l) in self.linears.iter().enumerate() {
            out.push(l.weight.data());
            out.push(l.bias.as_slice());
            if let Some(bn) = self.norms.get(i) {
                out.push(bn.gamma.as_slice());
                out.push(bn.beta.as_slice());
            }
        }
        out
    }

    fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        let mut norms = self.norms.iter_mut();
        for l in self.linears.iter_mut() {
            out.push(l.weight.data_mut());
            out.push(l.bias.as_mut_slice());
            if let Some(bn) = norms.next() {
                out.push(bn.gamma.as_mut_slice());
                out.push(bn.beta.as_mut_slice());
            }
        }
        out
    }
}
