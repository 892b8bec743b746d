//! Convolution via im2col + GEMM, and max pooling.

use crate::linalg::{gemm, Op as Trans};
use crate::tensor::{Result, Tensor, TensorError};

pub(crate) struct ConvCtx {
    pub x: usize,
    pub kernels: usize,
    pub bias: Option<usize>,
    geom: ConvGeom,
}

impl ConvCtx {
    pub(crate) fn parents(&self) -> Vec<usize> {
        let mut p = vec![self.x, self.kernels];
        p.extend(self.bias);
        p
    }
}

#[derive(Clone, Copy)]
struct ConvGeom {
    batch: usize,
    ch: usize,
    h: usize,
    w: usize,
    k: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.ch * self.kh * self.kw
    }

    fn out_px(&self) -> usize {
        self.oh * self.ow
    }

    /// Unfolds one image `[ch, h, w]` into `[ch*kh*kw, oh*ow]` columns.
    fn im2col(&self, img: &[f64], cols: &mut [f64]) {
        let g = self;
        let n = g.out_px();
        for c in 0..g.ch {
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let row = (c * g.kh + ki) * g.kw + kj;
                    let dst = &mut cols[row * n..(row + 1) * n];
                    for oi in 0..g.oh {
                        let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                        for oj in 0..g.ow {
                            let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                            dst[oi * g.ow + oj] = if ii < 0
                                || jj < 0
                                || ii as usize >= g.h
                                || jj as usize >= g.w
                            {
                                0.0
                            } else {
                                img[(c * g.h + ii as usize) * g.w + jj as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`Self::im2col`]: scatters column gradients back.
    fn col2im(&self, cols: &[f64], img: &mut [f64]) {
        let g = self;
        let n = g.out_px();
        for c in 0..g.ch {
            for ki in 0..g.kh {
                for kj in 0..g.kw {
                    let row = (c * g.kh + ki) * g.kw + kj;
                    let src = &cols[row * n..(row + 1) * n];
                    for oi in 0..g.oh {
                        let ii = (oi * g.stride + ki) as isize - g.pad as isize;
                        if ii < 0 || ii as usize >= g.h {
                            continue;
                        }
                        for oj in 0..g.ow {
                            let jj = (oj * g.stride + kj) as isize - g.pad as isize;
                            if jj < 0 || jj as usize >= g.w {
                                continue;
                            }
                            img[(c * g.h + ii as usize) * g.w + jj as usize] += src[oi * g.ow + oj];
                        }
                    }
                }
            }
        }
    }
}

/// Splits `[ch,h,w]` / `[n,ch,h,w]` into (batch, ch, h, w, batched).
fn image_dims(op: &'static str, shape: &[usize]) -> Result<(usize, usize, usize, usize, bool)> {
    match *shape {
        [c, h, w] => Ok((1, c, h, w, false)),
        [n, c, h, w] => Ok((n, c, h, w, true)),
        _ => Err(TensorError::Invalid {
            op,
            reason: format!("expected [ch, h, w] or [batch, ch, h, w], got {shape:?}"),
        }),
    }
}

pub(crate) fn conv2d_forward(
    x_id: usize,
    x: &Tensor,
    k_id: usize,
    kernels: &Tensor,
    bias: Option<(usize, Tensor)>,
    stride: usize,
    pad: usize,
) -> Result<(ConvCtx, Vec<usize>, Vec<f64>)> {
    let (batch, ch, h, w, batched) = image_dims("conv2d", x.shape())?;
    let &[k, kch, kh, kw] = kernels.shape() else {
        return Err(TensorError::Shape {
            op: "conv2d",
            lhs: x.shape().to_vec(),
            rhs: kernels.shape().to_vec(),
        });
    };
    if kch != ch {
        return Err(TensorError::Shape {
            op: "conv2d",
            lhs: x.shape().to_vec(),
            rhs: kernels.shape().to_vec(),
        });
    }
    if stride == 0 {
        return Err(TensorError::Invalid {
            op: "conv2d",
            reason: "stride must be positive".into(),
        });
    }
    if kh > h + 2 * pad || kw > w + 2 * pad {
        return Err(TensorError::Invalid {
            op: "conv2d",
            reason: format!("kernel {kh}x{kw} larger than padded input {}x{}", h + 2 * pad, w + 2 * pad),
        });
    }
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (w + 2 * pad - kw) / stride + 1;
    let geom = ConvGeom {
        batch,
        ch,
        h,
        w,
        k,
        kh,
        kw,
        stride,
        pad,
        oh,
        ow,
    };
    if let Some((_, b)) = &bias {
        if b.shape() != [k] {
            return Err(TensorError::Shape {
                op: "conv2d",
                lhs: kernels.shape().to_vec(),
                rhs: b.shape().to_vec(),
            });
        }
    }

    let (patch, npx) = (geom.patch(), geom.out_px());
    let mut out = vec![0.0; batch * k * npx];
    let mut cols = vec![0.0; patch * npx];
    for n in 0..batch {
        geom.im2col(&x.data()[n * ch * h * w..(n + 1) * ch * h * w], &mut cols);
        let dst = &mut out[n * k * npx..(n + 1) * k * npx];
        if let Some((_, b)) = &bias {
            for (row, &bv) in dst.chunks_exact_mut(npx).zip(b.data()) {
                row.fill(bv);
            }
        }
        let beta = if bias.is_some() { 1.0 } else { 0.0 };
        gemm(k, patch, npx, 1.0, kernels.data(), Trans::N, &cols, Trans::N, beta, dst);
    }
    let shape = if batched {
        vec![batch, k, oh, ow]
    } else {
        vec![k, oh, ow]
    };
    Ok((
        ConvCtx {
            x: x_id,
            kernels: k_id,
            bias: bias.map(|(id, _)| id),
            geom,
        },
        shape,
        out,
    ))
}

/// Returns (dx, dkernels, dbias).
pub(crate) fn conv2d_backward(
    ctx: &ConvCtx,
    x: &[f64],
    kernels: &[f64],
    upstream: &[f64],
    want_x: bool,
    want_k: bool,
) -> (Option<Vec<f64>>, Option<Vec<f64>>, Vec<f64>) {
    let g = ctx.geom;
    let (patch, npx) = (g.patch(), g.out_px());
    let img = g.ch * g.h * g.w;
    let mut gx = want_x.then(|| vec![0.0; g.batch * img]);
    let mut gk = want_k.then(|| vec![0.0; g.k * patch]);
    let mut gb = vec![0.0; g.k];
    let mut cols = vec![0.0; patch * npx];
    let mut gcols = vec![0.0; patch * npx];
    for n in 0..g.batch {
        let up = &upstream[n * g.k * npx..(n + 1) * g.k * npx];
        for (b, row) in gb.iter_mut().zip(up.chunks_exact(npx)) {
            *b += row.iter().sum::<f64>();
        }
        if let Some(gk) = gk.as_mut() {
            g.im2col(&x[n * img..(n + 1) * img], &mut cols);
            gemm(g.k, npx, patch, 1.0, up, Trans::N, &cols, Trans::T, 1.0, gk);
        }
        if let Some(gx) = gx.as_mut() {
            gemm(patch, g.k, npx, 1.0, kernels, Trans::T, up, Trans::N, 0.0, &mut gcols);
            g.col2im(&gcols, &mut gx[n * img..(n + 1) * img]);
        }
    }
    (gx, gk, gb)
}

pub(crate) struct PoolCtx {
    pub x: usize,
    /// Flat input offset of the maximum feeding each output element.
    argmax: Vec<usize>,
}

pub(crate) fn maxpool_forward(
    x_id: usize,
    x: &Tensor,
    window: usize,
    stride: usize,
) -> Result<(PoolCtx, Vec<usize>, Vec<f64>)> {
    let (batch, ch, h, w, batched) = image_dims("maxpool2d", x.shape())?;
    if window == 0 || stride == 0 || window > h || window > w {
        return Err(TensorError::Invalid {
            op: "maxpool2d",
            reason: format!("window {window} / stride {stride} invalid for {h}x{w} input"),
        });
    }
    let oh = (h - window) / stride + 1;
    let ow = (w - window) / stride + 1;
    let mut out = Vec::with_capacity(batch * ch * oh * ow);
    let mut argmax = Vec::with_capacity(batch * ch * oh * ow);
    let data = x.data();
    for plane in 0..batch * ch {
        let base = plane * h * w;
        for oi in 0..oh {
            for oj in 0..ow {
                let mut best = f64::NEG_INFINITY;
                let mut best_at = 0;
                // row-major scan with strict `>` keeps the first maximum
                for di in 0..window {
                    for dj in 0..window {
                        let at = base + (oi * stride + di) * w + oj * stride + dj;
                        if data[at] > best {
                            best = data[at];
                            best_at = at;
                        }
                    }
                }
                out.push(best);
                argmax.push(best_at);
            }
        }
    }
    let shape = if batched {
        vec![batch, ch, oh, ow]
    } else {
        vec![ch, oh, ow]
    };
    Ok((PoolCtx { x: x_id, argmax }, shape, out))
}

pub(crate) fn maxpool_backward(ctx: &PoolCtx, input_len: usize, upstream: &[f64]) -> Vec<f64> {
    let mut gx = vec![0.0; input_len];
    for (&at, &g) in ctx.argmax.iter().zip(upstream) {
        gx[at] += g;
    }
    gx
}

#[cfg(test)]
mod tests {
    use crate::autodiff::{ParamId, Tape};
    use crate::tensor::Tensor;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct six-loop cross-correlation.
    fn naive_conv(x: &Tensor, k: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Tensor {
        let (ch, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (nk, kh, kw) = (k.shape()[0], k.shape()[2], k.shape()[3]);
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; nk * oh * ow];
        for o in 0..nk {
            for i in 0..oh {
                for j in 0..ow {
                    let mut s = b.data()[o];
                    for c in 0..ch {
                        for di in 0..kh {
                            for dj in 0..kw {
                                let ii = (i * stride + di) as isize - pad as isize;
                                let jj = (j * stride + dj) as isize - pad as isize;
                                if ii >= 0 && jj >= 0 && (ii as usize) < h && (jj as usize) < w {
                                    s += x.get(&[c, ii as usize, jj as usize]) * k.get(&[o, c, di, dj]);
                                }
                            }
                        }
                    }
                    out[(o * oh + i) * ow + j] = s;
                }
            }
        }
        Tensor::new(&[nk, oh, ow], out).unwrap()
    }

    #[test]
    fn unit_kernel_is_identity() {
        let tape = Tape::new();
        let x = Tensor::new(&[1, 3, 3], (0..9).map(f64::from).collect()).unwrap();
        let k = Tensor::full(&[1, 1, 1, 1], 1.0);
        let y = tape.constant(&x).conv2d(&tape.constant(&k), None, 1, 0).unwrap();
        assert_eq!(y.value(), x);
    }

    #[test]
    fn ones_kernel_over_ones() {
        let tape = Tape::new();
        let x = tape.constant(&Tensor::full(&[1, 3, 3], 1.0));
        let k = tape.constant(&Tensor::full(&[1, 1, 3, 3], 1.0));
        let y = x.conv2d(&k, None, 1, 0).unwrap().value();
        assert_eq!(y.shape(), &[1, 1, 1]);
        assert_eq!(y.item(), 9.0);
    }

    #[test]
    fn matches_six_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random(&mut rng, &[2, 8, 8]);
        let b = random(&mut rng, &[3]);
        for (stride, pad) in [(1, 0), (1, 1), (2, 1), (3, 2)] {
            let k = random(&mut rng, &[3, 2, 3, 3]);
            let tape = Tape::new();
            let got = tape
                .constant(&x)
                .conv2d(&tape.constant(&k), Some(&tape.constant(&b)), stride, pad)
                .unwrap()
                .value();
            let want = naive_conv(&x, &k, &b, stride, pad);
            assert_eq!(got.shape(), want.shape());
            assert!(got.max_abs_diff(&want) < 1e-12);
        }
    }

    #[test]
    fn batched_matches_per_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let xs = random(&mut rng, &[3, 2, 6, 5]);
        let k = random(&mut rng, &[4, 2, 3, 2]);
        let b = random(&mut rng, &[4]);
        let tape = Tape::new();
        let y = tape
            .constant(&xs)
            .conv2d(&tape.constant(&k), Some(&tape.constant(&b)), 1, 1)
            .unwrap()
            .value();
        for n in 0..3 {
            let want = naive_conv(&xs.row(n), &k, &b, 1, 1);
            assert!(y.row(n).max_abs_diff(&want) < 1e-12);
        }
    }

    #[test]
    fn kernel_larger_than_input_is_rejected() {
        let tape = Tape::new();
        let x = tape.constant(&Tensor::zeros(&[1, 2, 2]));
        let k = tape.constant(&Tensor::zeros(&[1, 1, 3, 3]));
        assert!(x.conv2d(&k, None, 1, 0).is_err());
        assert!(x.conv2d(&k, None, 1, 1).is_ok());
    }

    #[test]
    fn pool_examples() {
        let tape = Tape::new();
        let x = tape.constant(&Tensor::new(&[1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        assert_eq!(x.maxpool2d(2, 2).unwrap().value().data(), &[4.0]);

        let c = tape.constant(&Tensor::full(&[2, 4, 4], 0.7));
        let y = c.maxpool2d(2, 2).unwrap().value();
        assert_eq!(y.shape(), &[2, 2, 2]);
        assert!(y.data().iter().all(|&v| v == 0.7));

        assert!(x.maxpool2d(3, 1).is_err());
        assert!(x.maxpool2d(0, 1).is_err());
    }

    #[test]
    fn pool_matches_naive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random(&mut rng, &[3, 7, 6]);
        let tape = Tape::new();
        let y = tape.constant(&x).maxpool2d(3, 2).unwrap().value();
        let (oh, ow) = (3, 2);
        assert_eq!(y.shape(), &[3, oh, ow]);
        for c in 0..3 {
            for i in 0..oh {
                for j in 0..ow {
                    let mut m = f64::NEG_INFINITY;
                    for di in 0..3 {
                        for dj in 0..3 {
                            m = m.max(x.get(&[c, i * 2 + di, j * 2 + dj]));
                        }
                    }
                    assert_eq!(y.get(&[c, i, j]), m);
                }
            }
        }
    }

    #[test]
    fn pool_gradient_goes_to_first_maximum() {
        let tape = Tape::new();
        let x = tape.leaf(&Tensor::new(&[1, 2, 2], vec![5.0, 5.0, 1.0, 5.0]).unwrap());
        let loss = x.maxpool2d(2, 2).unwrap().sum().unwrap();
        let g = loss.backward().unwrap().wrt(&x);
        assert_eq!(g.data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn bias_gradient_sums_over_positions() {
        let tape = Tape::new();
        let x = tape.constant(&Tensor::full(&[1, 4, 4], 1.0));
        let k = tape.param(ParamId(0), &Tensor::full(&[2, 1, 3, 3], 0.1));
        let b = tape.param(ParamId(1), &Tensor::zeros(&[2]));
        let loss = x.conv2d(&k, Some(&b), 1, 0).unwrap().sum().unwrap();
        let grads = loss.backward().unwrap();
        assert_eq!(grads.params().get(ParamId(1)).unwrap().data(), &[4.0, 4.0]);
        assert!(grads.params().get(ParamId(0)).unwrap().data().iter().all(|&v| v == 4.0));
    }
}
