//! Frame-by-frame inference at a chosen float precision.

use num_complex::Complex;
use num_traits::Float;

use super::cirm::{compress, MaskFrame, MASK_BOUND};
use super::genome::{Activation, BottleneckKind, LayerId, Topology, BOTTLENECK_KERNEL};
use super::network::{FeatureNormalizer, ParamLayout};
use super::ModelError;
use crate::tensor::Tensor;

struct Weights<T> {
    data: Vec<T>,
}

/// Streaming inference state for one audio stream.
pub struct Streamer<T> {
    topology: Topology,
    layout: ParamLayout,
    weights: Vec<Weights<T>>,
    norm: FeatureNormalizer,
    hidden: Vec<T>,
    cell: Vec<T>,
}

fn cast<T: Float>(v: f64) -> T {
    T::from(v).unwrap()
}

fn sigmoid<T: Float>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[allow(clippy::too_many_arguments)]
fn conv<T: Float>(
    x: &[T],
    bins: usize,
    cin: usize,
    w: &[T],
    bias: &[T],
    kernel: usize,
    cout: usize,
    stride: usize,
) -> Vec<T> {
    let pad = (kernel - 1) / 2;
    let fo = (bins + 2 * pad - kernel) / stride + 1;
    let mut out = Vec::with_capacity(fo * cout);
    for _ in 0..fo {
        out.extend_from_slice(bias);
    }
    for p in 0..fo {
        let orow = &mut out[p * cout..(p + 1) * cout];
        for j in 0..kernel {
            let q = (p * stride + j) as isize - pad as isize;
            if q < 0 || q >= bins as isize {
                continue;
            }
            let xrow = &x[q as usize * cin..(q as usize + 1) * cin];
            for (ci, &xv) in xrow.iter().enumerate() {
                let wrow = &w[(j * cin + ci) * cout..(j * cin + ci + 1) * cout];
                for (o, &wv) in orow.iter_mut().zip(wrow) {
                    *o = *o + xv * wv;
                }
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
fn conv_transpose<T: Float>(
    x: &[T],
    bins: usize,
    cin: usize,
    w: &[T],
    bias: &[T],
    kernel: usize,
    cout: usize,
    stride: usize,
) -> Vec<T> {
    let pad = (kernel - 1) / 2;
    let fo = bins * stride;
    let mut out = Vec::with_capacity(fo * cout);
    for _ in 0..fo {
        out.extend_from_slice(bias);
    }
    for q in 0..bins {
        let xrow = &x[q * cin..(q + 1) * cin];
        for j in 0..kernel {
            let p = (q * stride + j) as isize - pad as isize;
            if p < 0 || p >= fo as isize {
                continue;
            }
            let p = p as usize;
            let orow = &mut out[p * cout..(p + 1) * cout];
            for (ci, &xv) in xrow.iter().enumerate() {
                let wrow = &w[(j * cin + ci) * cout..(j * cin + ci + 1) * cout];
                for (o, &wv) in orow.iter_mut().zip(wrow) {
                    *o = *o + xv * wv;
                }
            }
        }
    }
    out
}

/// `out = x W + b` for one row.
fn affine<T: Float>(x: &[T], w: &[T], b: Option<&[T]>, cols: usize, out: &mut [T]) {
    match b {
        Some(b) => out.copy_from_slice(b),
        None => out.iter_mut().for_each(|v| *v = T::zero()),
    }
    for (r, &xv) in x.iter().enumerate() {
        let wrow = &w[r * cols..(r + 1) * cols];
        for (o, &wv) in out.iter_mut().zip(wrow) {
            *o = *o + xv * wv;
        }
    }
}

impl<T: Float> Streamer<T> {
    pub fn new(topology: &Topology, params: &[Tensor]) -> Self {
        let fl = topology.bins_at(topology.n_levels());
        Self {
            topology: topology.clone(),
            layout: ParamLayout::new(topology),
            weights: params
                .iter()
                .map(|p| Weights {
                    data: p.data().iter().map(|&v| cast(v)).collect(),
                })
                .collect(),
            norm: FeatureNormalizer::default(),
            hidden: vec![T::zero(); fl * topology.hidden],
            cell: vec![T::zero(); fl * topology.hidden],
        }
    }

    pub fn frame_bins(&self) -> usize {
        self.topology.bins + 1
    }

    pub fn reset(&mut self) {
        self.norm.reset();
        self.hidden.iter_mut().for_each(|v| *v = T::zero());
        self.cell.iter_mut().for_each(|v| *v = T::zero());
    }

    fn w(&self, i: usize) -> &[T] {
        &self.weights[i].data
    }

    fn activate(&self, v: &mut [T]) {
        match self.topology.activation {
            Activation::Relu => v.iter_mut().for_each(|x| *x = x.max(T::zero())),
            Activation::Tanh => v.iter_mut().for_each(|x| *x = x.tanh()),
        }
    }

    /// Consumes one noisy one-sided spectrum frame and returns the compressed
    /// mask for all of its bins. Bins above the network width get the identity mask.
    pub fn step(&mut self, frame: &[Complex<T>]) -> Result<MaskFrame<T>, ModelError> {
        let t = &self.topology;
        let bins = t.bins;
        if frame.len() != bins + 1 {
            return Err(ModelError::BinMismatch {
                got: frame.len(),
                want: bins + 1,
            });
        }
        let mut x = vec![T::zero(); bins * 2];
        self.norm.features(frame, bins, &mut x);
        let features = self.forward_features(&x);
        let mut values: Vec<Complex<T>> = features
            .chunks_exact(2)
            .map(|c| Complex::new(c[0], c[1]))
            .collect();
        values.push(Complex::new(cast(compress(1.0)), T::zero()));
        Ok(MaskFrame { values })
    }

    /// Runs the network on one normalized `[bins, 2]` feature frame.
    pub fn forward_features(&mut self, x: &[T]) -> Vec<T> {
        let t = self.topology.clone();
        let layout = self.layout;
        let mut h = x.to_vec();
        let mut skips = Vec::with_capacity(t.n_levels());
        for (i, l) in t.levels.iter().enumerate() {
            let s = layout.start(LayerId::Encoder(i));
            h = conv(
                &h,
                t.bins_at(i),
                t.enc_in_channels(i),
                self.w(s),
                self.w(s + 1),
                l.kernel,
                l.enc_channels,
                l.stride,
            );
            self.activate(&mut h);
            skips.push(h.clone());
        }
        let bn = layout.start(LayerId::Bottleneck);
        let fl = t.bins_at(t.n_levels());
        let hid = t.hidden;
        let c = t.bottleneck_in_channels();
        h = match t.bottleneck {
            BottleneckKind::Conv => {
                let mut y = conv(&h, fl, c, self.w(bn), self.w(bn + 1), BOTTLENECK_KERNEL, hid, 1);
                self.activate(&mut y);
                y
            }
            BottleneckKind::Gru => {
                let mut xg = vec![T::zero(); 3 * hid];
                let mut hg = vec![T::zero(); 3 * hid];
                let mut out = vec![T::zero(); fl * hid];
                for p in 0..fl {
                    let prev = &self.hidden[p * hid..(p + 1) * hid];
                    affine(&h[p * c..(p + 1) * c], self.w(bn), Some(self.w(bn + 2)), 3 * hid, &mut xg);
                    affine(prev, self.w(bn + 1), Some(self.w(bn + 3)), 3 * hid, &mut hg);
                    for u in 0..hid {
                        let r = sigmoid(xg[u] + hg[u]);
                        let z = sigmoid(xg[hid + u] + hg[hid + u]);
                        let n = (xg[2 * hid + u] + r * hg[2 * hid + u]).tanh();
                        out[p * hid + u] = n + z * (prev[u] - n);
                    }
                }
                self.hidden.copy_from_slice(&out);
                out
            }
            BottleneckKind::Lstm => {
                let mut xg = vec![T::zero(); 4 * hid];
                let mut hg = vec![T::zero(); 4 * hid];
                let mut out = vec![T::zero(); fl * hid];
                for p in 0..fl {
                    affine(&h[p * c..(p + 1) * c], self.w(bn), Some(self.w(bn + 2)), 4 * hid, &mut xg);
                    affine(&self.hidden[p * hid..(p + 1) * hid], self.w(bn + 1), None, 4 * hid, &mut hg);
                    for u in 0..hid {
                        let i = sigmoid(xg[u] + hg[u]);
                        let f = sigmoid(xg[hid + u] + hg[hid + u]);
                        let g = (xg[2 * hid + u] + hg[2 * hid + u]).tanh();
                        let o = sigmoid(xg[3 * hid + u] + hg[3 * hid + u]);
                        let cell = f * self.cell[p * hid + u] + i * g;
                        self.cell[p * hid + u] = cell;
                        out[p * hid + u] = o * cell.tanh();
                    }
                }
                self.hidden.copy_from_slice(&out);
                out
            }
        };
        let mut ch = hid;
        for i in (0..t.n_levels()).rev() {
            let l = &t.levels[i];
            let s = layout.start(LayerId::Decoder(i));
            let fin = t.bins_at(i + 1);
            let input = if l.skip {
                let sc = l.enc_channels;
                let mut cat = Vec::with_capacity(fin * (ch + sc));
                for p in 0..fin {
                    cat.extend_from_slice(&h[p * ch..(p + 1) * ch]);
                    cat.extend_from_slice(&skips[i][p * sc..(p + 1) * sc]);
                }
                ch += sc;
                cat
            } else {
                h
            };
            h = if l.stride > 1 {
                conv_transpose(&input, fin, ch, self.w(s), self.w(s + 1), l.kernel, l.dec_channels, l.stride)
            } else {
                conv(&input, fin, ch, self.w(s), self.w(s + 1), l.kernel, l.dec_channels, 1)
            };
            self.activate(&mut h);
            ch = l.dec_channels;
        }
        let s = layout.start(LayerId::Head);
        let mut y = conv(&h, t.bins, ch, self.w(s), self.w(s + 1), 1, 2, 1);
        let k: T = cast(MASK_BOUND);
        y.iter_mut().for_each(|v| *v = k * v.tanh());
        y
    }
}
