//! Channel-wise batch normalization for rank-2 `[n, c]` and rank-4
//! `[n, c, h, w]` tensors.

use crate::optim::Param;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
    cache: Option<Cache>,
}

#[derive(Clone, Debug)]
struct Cache {
    xhat: Vec<f64>,
    inv_std: Vec<f64>,
    shape: Vec<usize>,
}

/// Splits a BN input shape into `(batch, channels, spatial)`.
fn layout(shape: &[usize]) -> (usize, usize, usize) {
    match shape.len() {
        2 => (shape[0], shape[1], 1),
        4 => (shape[0], shape[1], shape[2] * shape[3]),
        _ => panic!("batchnorm expects rank 2 or 4, got {:?}", shape),
    }
}

/// Inference-path normalization, shared with the integer-model exporter so
/// both code paths produce bit-identical float results.
pub fn bn_eval(
    x: &[f64],
    shape: &[usize],
    gamma: &[f64],
    beta: &[f64],
    mean: &[f64],
    var: &[f64],
    eps: f64,
) -> Vec<f64> {
    let (n, c, s) = layout(shape);
    assert_eq!(x.len(), n * c * s);
    let mut out = vec![0.0; x.len()];
    for ci in 0..c {
        let inv = 1.0 / (var[ci] + eps).sqrt();
        let g = gamma[ci];
        let b = beta[ci];
        let m = mean[ci];
        for ni in 0..n {
            let base = (ni * c + ci) * s;
            for j in 0..s {
                out[base + j] = g * ((x[base + j] - m) * inv) + b;
            }
        }
    }
    out
}

impl BatchNorm {
    pub fn new(channels: usize) -> BatchNorm {
        BatchNorm {
            gamma: Param::new(Tensor::new(&[channels], vec![1.0; channels]), true),
            beta: Param::new(Tensor::zeros(&[channels]), true),
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: 0.1,
            eps: BN_EPS,
            cache: None,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }

    pub fn forward(&mut self, x: &Tensor, training: bool) -> Tensor {
        let (n, c, s) = layout(x.shape());
        assert_eq!(c, self.channels(), "batchnorm channel mismatch");
        if !training {
            let out = bn_eval(
                x.data(),
                x.shape(),
                self.gamma.value.data(),
                self.beta.value.data(),
                &self.running_mean,
                &self.running_var,
                self.eps,
            );
            return Tensor::new(x.shape(), out);
        }

        let count = (n * s) as f64;
        let xd = x.data();
        let mut out = vec![0.0; xd.len()];
        let mut xhat = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; c];
        for ci in 0..c {
            let mut sum = 0.0;
            let mut sum2 = 0.0;
            for ni in 0..n {
                let base = (ni * c + ci) * s;
                for j in 0..s {
                    let v = xd[base + j];
                    sum += v;
                    sum2 += v * v;
                }
            }
            let mean = sum / count;
            let var = (sum2 / count - mean * mean).max(0.0);
            let inv = 1.0 / (var + self.eps).sqrt();
            inv_std[ci] = inv;
            let g = self.gamma.value.data()[ci];
            let b = self.beta.value.data()[ci];
            for ni in 0..n {
                let base = (ni * c + ci) * s;
                for j in 0..s {
                    let h = (xd[base + j] - mean) * inv;
                    xhat[base + j] = h;
                    out[base + j] = g * h + b;
                }
            }
            self.running_mean[ci] = (1.0 - self.momentum) * self.running_mean[ci] + self.momentum * mean;
            self.running_var[ci] = (1.0 - self.momentum) * self.running_var[ci] + self.momentum * var;
        }
        self.cache = Some(Cache { xhat, inv_std, shape: x.shape().to_vec() });
        Tensor::new(x.shape(), out)
    }

    /// Accumulates gamma/beta grads and returns the input gradient.
    /// Requires a previous training-mode forward.
    pub fn backward(&mut self, g: &Tensor) -> Tensor {
        let cache = self.cache.take().expect("batchnorm backward without forward");
        assert_eq!(g.shape(), &cache.shape[..], "batchnorm grad shape");
        let (n, c, s) = layout(&cache.shape);
        let count = (n * s) as f64;
        let gd = g.data();
        let mut gx = vec![0.0; gd.len()];
        let mut ggamma = vec![0.0; c];
        let mut gbeta = vec![0.0; c];
        for ci in 0..c {
            let mut sum_g = 0.0;
            let mut sum_gh = 0.0;
            for ni in 0..n {
                let base = (ni * c + ci) * s;
                for j in 0..s {
                    sum_g += gd[base + j];
                    sum_gh += gd[base + j] * cache.xhat[base + j];
                }
            }
            ggamma[ci] = sum_gh;
            gbeta[ci] = sum_g;
            let gscale = self.gamma.value.data()[ci] * cache.inv_std[ci];
            let mean_g = sum_g / count;
            let mean_gh = sum_gh / count;
            for ni in 0..n {
                let base = (ni * c + ci) * s;
                for j in 0..s {
                    gx[base + j] =
                        gscale * (gd[base + j] - mean_g - cache.xhat[base + j] * mean_gh);
                }
            }
        }
        self.gamma.value.accumulate_grad(&ggamma);
        self.beta.value.accumulate_grad(&gbeta);
        Tensor::new(&cache.shape, gx)
    }
}
