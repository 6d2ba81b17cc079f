//! Binary checkpoints: full network state (master weights, optimizer
//! velocities, quantizer states, σ trackers, batchnorm statistics), the
//! epoch counter, and the RNG state, in a versioned little-endian format.
//!
//! Layout (all integers little-endian, floats as raw IEEE-754 bits):
//!
//! ```text
//! "SDQC" | version u32 | epoch u64 | rng seed u64 | rng counter u64
//! input_shape: usize[] | classes usize | layer count usize
//! per layer:
//!   op tag u8 (0 conv2d, 1 linear) + dims (+ stride/pad for conv)
//!   input stage u8 (0 raw, 1 relu, 2 quantizer)
//!   weights Param | bias Option<Param>
//!   weight_quant Option<QuantizerState> | act_quant Option<QuantizerState>
//!   act_tracker Option<SigmaTracker> | bn Option<BatchNorm>
//!   w_alpha_vel f64 | a_alpha_vel f64
//! ```
//!
//! Every field that influences behavior is stored bit-exactly, so
//! save -> load -> save reproduces the file byte for byte.

use std::io;
use std::path::Path;

use thiserror::Error;

use crate::batchnorm::BatchNorm;
use crate::layers::{InputStage, LayerOp, Network, QuantizedLayer};
use crate::ops::ConvGeom;
use crate::optim::Param;
use crate::rng::Rng;
use crate::serial::{get_quantizer, put_quantizer, ReadError, Reader, Writer};
use crate::stats::{SigmaMode, SigmaTracker};
use crate::tensor::Tensor;

pub const MAGIC: [u8; 4] = *b"SDQC";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint file (magic {0:02x?})")]
    Magic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error(transparent)]
    Corrupt(#[from] ReadError),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
}

pub struct Checkpoint {
    pub net: Network,
    pub epoch: usize,
    pub rng: Rng,
}

fn put_param(w: &mut Writer, p: &Param) {
    w.usize_slice(p.value.shape());
    w.f64_slice(p.value.data());
    w.f64_slice(&p.velocity);
    w.bool(p.decay);
}

fn get_param(r: &mut Reader) -> Result<Param, CheckpointError> {
    let shape = r.usize_vec()?;
    let data = r.f64_vec()?;
    let velocity = r.f64_vec()?;
    let decay = r.bool()?;
    let numel: usize = shape.iter().product();
    if data.len() != numel || velocity.len() != numel {
        return Err(CheckpointError::Malformed(format!(
            "param shape {:?} does not match {} values / {} velocities",
            shape,
            data.len(),
            velocity.len()
        )));
    }
    let mut p = Param::new(Tensor::new(&shape, data), decay);
    p.velocity = velocity;
    Ok(p)
}

fn put_tracker(w: &mut Writer, t: &SigmaTracker) {
    w.f64(t.sigma_hat);
    w.f64(t.momentum);
    w.u8(match t.mode {
        SigmaMode::Weights => 0,
        SigmaMode::Activations => 1,
    });
    w.bool(t.initialized);
}

fn get_tracker(r: &mut Reader) -> Result<SigmaTracker, CheckpointError> {
    let sigma_hat = r.f64()?;
    let momentum = r.f64()?;
    let mode = match r.u8()? {
        0 => SigmaMode::Weights,
        1 => SigmaMode::Activations,
        v => return Err(CheckpointError::Malformed(format!("unknown tracker mode {v}"))),
    };
    let initialized = r.bool()?;
    let mut t = SigmaTracker::new(mode);
    t.sigma_hat = sigma_hat;
    t.momentum = momentum;
    t.initialized = initialized;
    Ok(t)
}

fn put_bn(w: &mut Writer, bn: &BatchNorm) {
    put_param(w, &bn.gamma);
    put_param(w, &bn.beta);
    w.f64_slice(&bn.running_mean);
    w.f64_slice(&bn.running_var);
    w.f64(bn.momentum);
    w.f64(bn.eps);
}

fn get_bn(r: &mut Reader) -> Result<BatchNorm, CheckpointError> {
    let gamma = get_param(r)?;
    let beta = get_param(r)?;
    let running_mean = r.f64_vec()?;
    let running_var = r.f64_vec()?;
    let c = gamma.value.numel();
    if beta.value.numel() != c || running_mean.len() != c || running_var.len() != c {
        return Err(CheckpointError::Malformed("batchnorm channel count disagrees".into()));
    }
    let mut bn = BatchNorm::new(c);
    bn.gamma = gamma;
    bn.beta = beta;
    bn.running_mean = running_mean;
    bn.running_var = running_var;
    bn.momentum = r.f64()?;
    bn.eps = r.f64()?;
    Ok(bn)
}

fn put_layer(w: &mut Writer, layer: &QuantizedLayer) {
    match layer.op {
        LayerOp::Conv2d { in_ch, out_ch, k, geom } => {
            w.u8(0);
            w.usize(in_ch);
            w.usize(out_ch);
            w.usize(k);
            w.usize(geom.stride);
            w.usize(geom.pad);
        }
        LayerOp::Linear { in_f, out_f } => {
            w.u8(1);
            w.usize(in_f);
            w.usize(out_f);
        }
    }
    w.u8(match layer.input {
        InputStage::Raw => 0,
        InputStage::Relu => 1,
        InputStage::Quantizer => 2,
    });
    put_param(w, &layer.weights);
    w.bool(layer.bias.is_some());
    if let Some(b) = &layer.bias {
        put_param(w, b);
    }
    w.bool(layer.weight_quant.is_some());
    if let Some(st) = &layer.weight_quant {
        put_quantizer(w, st);
    }
    w.bool(layer.act_quant.is_some());
    if let Some(st) = &layer.act_quant {
        put_quantizer(w, st);
    }
    w.bool(layer.act_tracker.is_some());
    if let Some(t) = &layer.act_tracker {
        put_tracker(w, t);
    }
    w.bool(layer.bn.is_some());
    if let Some(bn) = &layer.bn {
        put_bn(w, bn);
    }
    w.f64(layer.w_alpha_vel);
    w.f64(layer.a_alpha_vel);
}

fn get_layer(r: &mut Reader) -> Result<QuantizedLayer, CheckpointError> {
    let op = match r.u8()? {
        0 => LayerOp::Conv2d {
            in_ch: r.usize()?,
            out_ch: r.usize()?,
            k: r.usize()?,
            geom: ConvGeom { stride: r.usize()?, pad: r.usize()? },
        },
        1 => LayerOp::Linear { in_f: r.usize()?, out_f: r.usize()? },
        v => return Err(CheckpointError::Malformed(format!("unknown layer op {v}"))),
    };
    let input = match r.u8()? {
        0 => InputStage::Raw,
        1 => InputStage::Relu,
        2 => InputStage::Quantizer,
        v => return Err(CheckpointError::Malformed(format!("unknown input stage {v}"))),
    };
    let weights = get_param(r)?;
    let bias = if r.bool()? { Some(get_param(r)?) } else { None };
    let weight_quant = if r.bool()? { Some(get_quantizer(r)?) } else { None };
    let act_quant = if r.bool()? { Some(get_quantizer(r)?) } else { None };
    let act_tracker = if r.bool()? { Some(get_tracker(r)?) } else { None };
    let bn = if r.bool()? { Some(get_bn(r)?) } else { None };
    let w_alpha_vel = r.f64()?;
    let a_alpha_vel = r.f64()?;
    Ok(QuantizedLayer::from_parts(
        op,
        weights,
        bias,
        input,
        weight_quant,
        act_quant,
        act_tracker,
        bn,
        w_alpha_vel,
        a_alpha_vel,
    ))
}

pub fn to_bytes(net: &Network, epoch: usize, rng: &Rng) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(&MAGIC);
    w.u32(VERSION);
    w.u64(epoch as u64);
    let (seed, counter) = rng.state();
    w.u64(seed);
    w.u64(counter);
    w.usize_slice(&net.input_shape);
    w.usize(net.classes);
    w.usize(net.layers.len());
    for layer in &net.layers {
        put_layer(&mut w, layer);
    }
    w.into_bytes()
}

pub fn from_bytes(buf: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let mut r = Reader::new(buf);
    let magic = r.bytes(4)?;
    if magic != MAGIC {
        return Err(CheckpointError::Magic(magic.try_into().unwrap()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let epoch = r.u64()? as usize;
    let seed = r.u64()?;
    let counter = r.u64()?;
    let input_shape = r.usize_vec()?;
    let classes = r.usize()?;
    let n_layers = r.usize()?;
    let mut layers = Vec::with_capacity(n_layers);
    for _ in 0..n_layers {
        layers.push(get_layer(&mut r)?);
    }
    r.finish()?;
    // Network::new re-validates layer shape compatibility.
    let net = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
        Network::new(layers, input_shape, classes)
    }))
    .map_err(|_| CheckpointError::Malformed("layer shapes are inconsistent".into()))?;
    Ok(Checkpoint { net, epoch, rng: Rng::from_state(seed, counter) })
}

pub fn save(path: &Path, net: &Network, epoch: usize, rng: &Rng) -> Result<(), CheckpointError> {
    std::fs::write(path, to_bytes(net, epoch, rng))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint, CheckpointError> {
    from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::LayerPlan;
    use crate::ops;
    use crate::optim::OptimizerCfg;
    use crate::quant::QuantMode;
    use crate::tensor::Tensor;

    /// A toy net with every feature engaged: conv+bn bypass head, log2 conv,
    /// uniform linear tail with bias.
    fn build_net(rng: &mut Rng) -> Network {
        let geom = ConvGeom { stride: 2, pad: 1 };
        let layers = vec![
            QuantizedLayer::conv2d(1, 2, 3, geom, &LayerPlan::off(), true, true, rng).unwrap(),
            QuantizedLayer::conv2d(2, 3, 3, geom, &LayerPlan::full(3, QuantMode::Log2), false, true, rng)
                .unwrap(),
            QuantizedLayer::linear(3 * 2 * 2, 4, &LayerPlan::input_only(3), false, true, false, rng)
                .unwrap(),
        ];
        Network::new(layers, vec![1, 8, 8], 4)
    }

    /// Runs a few optimizer steps so velocities, σ trackers, bn statistics,
    /// and α values all leave their initial values.
    fn train_a_bit(net: &mut Network, rng: &mut Rng) {
        let cfg = OptimizerCfg { lr: 0.05, momentum: 0.9, weight_decay: 5e-4 };
        for step in 0..4 {
            let x = Tensor::init_uniform(&[3, 1, 8, 8], 1, rng);
            let labels = vec![step % 4, (step + 1) % 4, (step + 2) % 4];
            net.zero_grads();
            let logits = net.forward(&x, true);
            let (_, g) = ops::softmax_cross_entropy(&logits, &labels);
            net.backward(&g);
            net.apply_updates(cfg.lr, &cfg);
        }
    }

    #[test]
    fn save_load_save_is_byte_identical() {
        let mut rng = Rng::new(41);
        let mut net = build_net(&mut rng);
        train_a_bit(&mut net, &mut rng);
        let bytes = to_bytes(&net, 7, &rng);
        let ckpt = from_bytes(&bytes).unwrap();
        assert_eq!(ckpt.epoch, 7);
        let again = to_bytes(&ckpt.net, ckpt.epoch, &ckpt.rng);
        assert_eq!(bytes, again);
    }

    #[test]
    fn round_trip_preserves_eval_outputs_exactly() {
        let mut rng = Rng::new(42);
        let mut net = build_net(&mut rng);
        train_a_bit(&mut net, &mut rng);
        let x = Tensor::init_uniform(&[5, 1, 8, 8], 1, &mut rng);
        let want = net.forward(&x, false);
        let mut back = from_bytes(&to_bytes(&net, 0, &rng)).unwrap().net;
        let got = back.forward(&x, false);
        assert_eq!(want.data(), got.data());
    }

    #[test]
    fn round_trip_resumes_rng_state() {
        let mut rng = Rng::new(9);
        rng.next_u64();
        rng.next_u64();
        let net = build_net(&mut Rng::new(1));
        let mut restored = from_bytes(&to_bytes(&net, 0, &rng)).unwrap().rng;
        let mut original = rng;
        assert_eq!(original.next_u64(), restored.next_u64());
    }

    #[test]
    fn rejects_bad_magic_version_and_truncation() {
        let rng = Rng::new(1);
        let net = build_net(&mut Rng::new(1));
        let bytes = to_bytes(&net, 0, &rng);

        let mut wrong_magic = bytes.clone();
        wrong_magic[0] = b'X';
        assert!(matches!(from_bytes(&wrong_magic), Err(CheckpointError::Magic(_))));

        let mut wrong_version = bytes.clone();
        wrong_version[4] = 99;
        assert!(matches!(from_bytes(&wrong_version), Err(CheckpointError::Version(99))));

        match from_bytes(&bytes[..bytes.len() - 3]) {
            Err(CheckpointError::Corrupt(e)) => assert!(e.offset <= bytes.len() - 3),
            other => panic!("expected corrupt error, got {:?}", other.err()),
        }

        let mut trailing = bytes.clone();
        trailing.push(0);
        assert!(matches!(from_bytes(&trailing), Err(CheckpointError::Corrupt(_))));
    }
}
