//! Forward/backward kernels for the layer types used by the trainer.
//!
//! Everything is written against plain f64 buffers. Convolution is lowered
//! to im2col plus matmul so the inner loops stay dense.

use crate::tensor::Tensor;

// ---- matmul ----

/// `a [m,k] * b [k,n] -> [m,n]`
pub fn matmul_fwd(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k) = dims2(a);
    let (k2, n) = dims2(b);
    assert_eq!(k, k2, "matmul inner dims {k} vs {k2}");
    let mut out = vec![0.0; m * n];
    let ad = a.data();
    let bd = b.data();
    for i in 0..m {
        for p in 0..k {
            let av = ad[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    Tensor::new(&[m, n], out)
}

/// Gradients of `matmul_fwd`: returns `(g_a, g_b)`.
pub fn matmul_bwd(a: &Tensor, b: &Tensor, g: &Tensor) -> (Tensor, Tensor) {
    let (m, k) = dims2(a);
    let (_, n) = dims2(b);
    assert_eq!(g.shape(), &[m, n], "matmul grad shape");
    let ad = a.data();
    let bd = b.data();
    let gd = g.data();
    let mut ga = vec![0.0; m * k];
    let mut gb = vec![0.0; k * n];
    for i in 0..m {
        let grow = &gd[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &bd[p * n..(p + 1) * n];
            let mut acc = 0.0;
            for j in 0..n {
                acc += grow[j] * brow[j];
            }
            ga[i * k + p] = acc;
        }
        let arow = &ad[i * k..(i + 1) * k];
        for p in 0..k {
            let av = arow[p];
            if av == 0.0 {
                continue;
            }
            let gbrow = &mut gb[p * n..(p + 1) * n];
            for j in 0..n {
                gbrow[j] += av * grow[j];
            }
        }
    }
    (Tensor::new(&[m, k], ga), Tensor::new(&[k, n], gb))
}

fn dims2(t: &Tensor) -> (usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 2, "expected rank-2 tensor, got {:?}", s);
    (s[0], s[1])
}

// ---- linear ----

/// `x [n,in] * w [out,in]^T (+ bias) -> [n,out]`
pub fn linear_fwd(x: &Tensor, w: &Tensor, bias: Option<&Tensor>) -> Tensor {
    let (n, inf) = dims2(x);
    let (outf, inf2) = dims2(w);
    assert_eq!(inf, inf2, "linear input features {inf} vs weight {inf2}");
    let xd = x.data();
    let wd = w.data();
    let mut out = vec![0.0; n * outf];
    for i in 0..n {
        let xrow = &xd[i * inf..(i + 1) * inf];
        let orow = &mut out[i * outf..(i + 1) * outf];
        for o in 0..outf {
            let wrow = &wd[o * inf..(o + 1) * inf];
            let mut acc = 0.0;
            for p in 0..inf {
                acc += xrow[p] * wrow[p];
            }
            orow[o] = acc;
        }
        if let Some(b) = bias {
            for o in 0..outf {
                orow[o] += b.data()[o];
            }
        }
    }
    Tensor::new(&[n, outf], out)
}

/// Gradients of `linear_fwd`: returns `(g_x, g_w, g_bias)`.
pub fn linear_bwd(x: &Tensor, w: &Tensor, g: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (n, inf) = dims2(x);
    let (outf, _) = dims2(w);
    assert_eq!(g.shape(), &[n, outf], "linear grad shape");
    let xd = x.data();
    let wd = w.data();
    let gd = g.data();
    let mut gx = vec![0.0; n * inf];
    let mut gw = vec![0.0; outf * inf];
    let mut gb = vec![0.0; outf];
    for i in 0..n {
        let grow = &gd[i * outf..(i + 1) * outf];
        let xrow = &xd[i * inf..(i + 1) * inf];
        let gxrow = &mut gx[i * inf..(i + 1) * inf];
        for o in 0..outf {
            let gv = grow[o];
            gb[o] += gv;
            if gv == 0.0 {
                continue;
            }
            let wrow = &wd[o * inf..(o + 1) * inf];
            let gwrow = &mut gw[o * inf..(o + 1) * inf];
            for p in 0..inf {
                gxrow[p] += gv * wrow[p];
                gwrow[p] += gv * xrow[p];
            }
        }
    }
    (
        Tensor::new(&[n, inf], gx),
        Tensor::new(&[outf, inf], gw),
        Tensor::new(&[outf], gb),
    )
}

// ---- conv2d ----

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: usize,
    pub pad: usize,
}

pub fn conv_out_dim(input: usize, k: usize, geom: ConvGeom) -> usize {
    assert!(input + 2 * geom.pad >= k, "kernel larger than padded input");
    (input + 2 * geom.pad - k) / geom.stride + 1
}

/// Gathers conv patches of one sample into a `[c*k*k, oh*ow]` matrix.
/// Out-of-bounds taps read as zero.
fn im2col(x: &Tensor, n: usize, k: usize, geom: ConvGeom, oh: usize, ow: usize) -> Vec<f64> {
    let (c, h, w) = (x.shape()[1], x.shape()[2], x.shape()[3]);
    let mut cols = vec![0.0; c * k * k * oh * ow];
    let xd = x.data();
    let base = n * c * h * w;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * (oh * ow);
                for oy in 0..oh {
                    let iy = oy * geom.stride + ky;
                    if iy < geom.pad || iy >= h + geom.pad {
                        continue;
                    }
                    let iy = iy - geom.pad;
                    let xrow = base + (ci * h + iy) * w;
                    let crow = row + oy * ow;
                    for ox in 0..ow {
                        let ix = ox * geom.stride + kx;
                        if ix < geom.pad || ix >= w + geom.pad {
                            continue;
                        }
                        cols[crow + ox] = xd[xrow + ix - geom.pad];
                    }
                }
            }
        }
    }
    cols
}

/// Scatters a `[c*k*k, oh*ow]` gradient matrix back onto the input layout.
fn col2im(
    gcols: &[f64],
    gx: &mut [f64],
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    geom: ConvGeom,
    oh: usize,
    ow: usize,
) {
    let base = n * c * h * w;
    for ci in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = ((ci * k + ky) * k + kx) * (oh * ow);
                for oy in 0..oh {
                    let iy = oy * geom.stride + ky;
                    if iy < geom.pad || iy >= h + geom.pad {
                        continue;
                    }
                    let iy = iy - geom.pad;
                    let xrow = base + (ci * h + iy) * w;
                    let crow = row + oy * ow;
                    for ox in 0..ow {
                        let ix = ox * geom.stride + kx;
                        if ix < geom.pad || ix >= w + geom.pad {
                            continue;
                        }
                        gx[xrow + ix - geom.pad] += gcols[crow + ox];
                    }
                }
            }
        }
    }
}

/// `x [n,c,h,w]` convolved with `w [oc,c,k,k] -> [n,oc,oh,ow]`.
pub fn conv2d_fwd(x: &Tensor, w: &Tensor, geom: ConvGeom) -> Tensor {
    let (n, c, h, wd_) = shape4(x);
    let (oc, c2, k, k2) = shape4(w);
    assert_eq!(c, c2, "conv channels {c} vs weight {c2}");
    assert_eq!(k, k2, "conv kernels must be square");
    let oh = conv_out_dim(h, k, geom);
    let ow = conv_out_dim(wd_, k, geom);
    let ck2 = c * k * k;
    let wd = w.data();
    let mut out = vec![0.0; n * oc * oh * ow];
    for ni in 0..n {
        let cols = im2col(x, ni, k, geom, oh, ow);
        let obase = ni * oc * oh * ow;
        for o in 0..oc {
            let wrow = &wd[o * ck2..(o + 1) * ck2];
            let orow = &mut out[obase + o * oh * ow..obase + (o + 1) * oh * ow];
            for p in 0..ck2 {
                let wv = wrow[p];
                if wv == 0.0 {
                    continue;
                }
                let crow = &cols[p * oh * ow..(p + 1) * oh * ow];
                for j in 0..oh * ow {
                    orow[j] += wv * crow[j];
                }
            }
        }
    }
    Tensor::new(&[n, oc, oh, ow], out)
}

/// Gradients of `conv2d_fwd`: returns `(g_x, g_w)`.
pub fn conv2d_bwd(x: &Tensor, w: &Tensor, geom: ConvGeom, g: &Tensor) -> (Tensor, Tensor) {
    let (n, c, h, wd_) = shape4(x);
    let (oc, _, k, _) = shape4(w);
    let oh = conv_out_dim(h, k, geom);
    let ow = conv_out_dim(wd_, k, geom);
    assert_eq!(g.shape(), &[n, oc, oh, ow], "conv grad shape");
    let ck2 = c * k * k;
    let wd = w.data();
    let gd = g.data();
    let mut gx = vec![0.0; n * c * h * wd_];
    let mut gw = vec![0.0; oc * ck2];
    let mut gcols = vec![0.0; ck2 * oh * ow];
    for ni in 0..n {
        let cols = im2col(x, ni, k, geom, oh, ow);
        gcols.iter_mut().for_each(|v| *v = 0.0);
        let gbase = ni * oc * oh * ow;
        for o in 0..oc {
            let grow = &gd[gbase + o * oh * ow..gbase + (o + 1) * oh * ow];
            let wrow = &wd[o * ck2..(o + 1) * ck2];
            let gwrow = &mut gw[o * ck2..(o + 1) * ck2];
            for p in 0..ck2 {
                let crow = &cols[p * oh * ow..(p + 1) * oh * ow];
                let gcrow = &mut gcols[p * oh * ow..(p + 1) * oh * ow];
                let wv = wrow[p];
                let mut acc = 0.0;
                for j in 0..oh * ow {
                    let gv = grow[j];
                    acc += gv * crow[j];
                    gcrow[j] += wv * gv;
                }
                gwrow[p] += acc;
            }
        }
        col2im(&gcols, &mut gx, ni, c, h, wd_, k, geom, oh, ow);
    }
    (Tensor::new(&[n, c, h, wd_], gx), Tensor::new(&[oc, c, k, k], gw))
}

fn shape4(t: &Tensor) -> (usize, usize, usize, usize) {
    let s = t.shape();
    assert_eq!(s.len(), 4, "expected rank-4 tensor, got {:?}", s);
    (s[0], s[1], s[2], s[3])
}

// ---- pointwise ----

pub fn relu_fwd(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

pub fn relu_bwd(x: &Tensor, g: &Tensor) -> Tensor {
    assert_eq!(x.shape(), g.shape(), "relu grad shape");
    let data = x
        .data()
        .iter()
        .zip(g.data())
        .map(|(&xv, &gv)| if xv > 0.0 { gv } else { 0.0 })
        .collect();
    Tensor::new(x.shape(), data)
}

// ---- loss ----

/// Mean cross-entropy over the batch plus the gradient w.r.t. the logits.
pub fn softmax_cross_entropy(logits: &Tensor, labels: &[usize]) -> (f64, Tensor) {
    let (n, c) = dims2(logits);
    assert_eq!(labels.len(), n, "one label per row");
    let ld = logits.data();
    let mut grad = vec![0.0; n * c];
    let mut loss = 0.0;
    let inv_n = 1.0 / n as f64;
    for i in 0..n {
        let row = &ld[i * c..(i + 1) * c];
        let y = labels[i];
        assert!(y < c, "label {y} out of range for {c} classes");
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for &v in row {
            z += (v - m).exp();
        }
        let lse = m + z.ln();
        loss += lse - row[y];
        let grow = &mut grad[i * c..(i + 1) * c];
        for j in 0..c {
            grow[j] = ((row[j] - m).exp() / z) * inv_n;
        }
        grow[y] -= inv_n;
    }
    (loss * inv_n, Tensor::new(&[n, c], grad))
}

/// Fraction of rows whose argmax matches the label.
pub fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let (n, c) = dims2(logits);
    assert_eq!(labels.len(), n);
    let ld = logits.data();
    let mut hits = 0usize;
    for i in 0..n {
        let row = &ld[i * c..(i + 1) * c];
        let mut best = 0usize;
        for j in 1..c {
            if row[j] > row[best] {
                best = j;
            }
        }
        if best == labels[i] {
            hits += 1;
        }
    }
    hits as f64 / n as f64
}
