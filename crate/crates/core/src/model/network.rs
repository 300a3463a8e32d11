//! Weighted network instances and the differentiable batch forward pass.

use num_complex::Complex;
use num_traits::Float;
use rand::Rng;

use super::cirm::{compress, MaskFrame, MASK_BOUND};
use super::genome::{BottleneckKind, Genome, LayerId, Topology, BOTTLENECK_KERNEL, NETWORK_BINS};
use super::infer::Streamer;
use super::ModelError;
use crate::tensor::{ConvSpec, Tape, Tensor, TensorError, Var};

/// Smoothing of the running feature power, per frame.
pub const FEATURE_SMOOTHING: f64 = 0.99;

/// Scale of the output head's initial weights relative to the fan-in bound,
/// so a fresh network starts close to the identity mask.
pub const HEAD_INIT_GAIN: f64 = 0.01;
const FEATURE_EPS: f64 = 1e-12;

/// Causal running-RMS normalization of network input frames.
#[derive(Debug, Clone, Default)]
pub struct FeatureNormalizer {
    power: Option<f64>,
}

impl FeatureNormalizer {
    pub fn reset(&mut self) {
        self.power = None;
    }

    /// Writes `[bins, 2]` interleaved real/imag features for the first `bins` bins.
    pub fn features<T: Float>(&mut self, frame: &[Complex<T>], bins: usize, out: &mut [T]) {
        let p = frame[..bins]
            .iter()
            .map(|c| c.norm_sqr().to_f64().unwrap())
            .sum::<f64>()
            / bins as f64;
        let g = match self.power {
            None => p,
            Some(prev) => FEATURE_SMOOTHING * prev + (1.0 - FEATURE_SMOOTHING) * p,
        };
        self.power = Some(g);
        let scale = T::from(1.0 / (g + FEATURE_EPS).sqrt()).unwrap();
        for (k, c) in frame[..bins].iter().enumerate() {
            out[2 * k] = c.re * scale;
            out[2 * k + 1] = c.im * scale;
        }
    }
}

/// Features for a whole spectrogram, `[frames, bins, 2]` row-major.
pub fn offline_features(frames: &[Vec<Complex<f64>>], bins: usize) -> Vec<f64> {
    let mut norm = FeatureNormalizer::default();
    let mut out = vec![0.0; frames.len() * bins * 2];
    for (t, f) in frames.iter().enumerate() {
        norm.features(f, bins, &mut out[t * bins * 2..(t + 1) * bins * 2]);
    }
    out
}

/// Parameter tensor shapes in storage order: encoder levels, bottleneck,
/// decoder levels from deepest to shallowest, head.
pub fn param_shapes(t: &Topology) -> Vec<Vec<usize>> {
    let mut shapes = Vec::new();
    for (i, l) in t.levels.iter().enumerate() {
        shapes.push(vec![l.kernel, t.enc_in_channels(i), l.enc_channels]);
        shapes.push(vec![l.enc_channels]);
    }
    let (c, h) = (t.bottleneck_in_channels(), t.hidden);
    match t.bottleneck {
        BottleneckKind::Conv => {
            shapes.push(vec![BOTTLENECK_KERNEL, c, h]);
            shapes.push(vec![h]);
        }
        BottleneckKind::Gru => {
            shapes.push(vec![c, 3 * h]);
            shapes.push(vec![h, 3 * h]);
            shapes.push(vec![3 * h]);
            shapes.push(vec![3 * h]);
        }
        BottleneckKind::Lstm => {
            shapes.push(vec![c, 4 * h]);
            shapes.push(vec![h, 4 * h]);
            shapes.push(vec![4 * h]);
        }
    }
    for i in (0..t.n_levels()).rev() {
        let l = &t.levels[i];
        shapes.push(vec![l.kernel, t.dec_in_channels(i), l.dec_channels]);
        shapes.push(vec![l.dec_channels]);
    }
    shapes.push(vec![1, t.head_in_channels(), 2]);
    shapes.push(vec![2]);
    shapes
}

/// Index of the first parameter tensor of each layer.
#[derive(Debug, Clone, Copy)]
pub struct ParamLayout {
    levels: usize,
    bottleneck_len: usize,
}

impl ParamLayout {
    pub fn new(t: &Topology) -> Self {
        Self {
            levels: t.n_levels(),
            bottleneck_len: match t.bottleneck {
                BottleneckKind::Conv => 2,
                BottleneckKind::Gru => 4,
                BottleneckKind::Lstm => 3,
            },
        }
    }

    pub fn start(&self, id: LayerId) -> usize {
        match id {
            LayerId::Encoder(i) => 2 * i,
            LayerId::Bottleneck => 2 * self.levels,
            LayerId::Decoder(i) => 2 * self.levels + self.bottleneck_len + 2 * (self.levels - 1 - i),
            LayerId::Head => 4 * self.levels + self.bottleneck_len,
        }
    }

    pub fn len(&self) -> usize {
        4 * self.levels + self.bottleneck_len + 2
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// An instantiated denoising network with its own streaming state.
pub struct NetworkInstance {
    topology: Topology,
    params: Vec<Tensor>,
    stream: Option<Streamer<f64>>,
}

impl Clone for NetworkInstance {
    fn clone(&self) -> Self {
        Self {
            topology: self.topology.clone(),
            params: self.params.clone(),
            stream: None,
        }
    }
}

impl std::fmt::Debug for NetworkInstance {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("NetworkInstance")
            .field("topology", &self.topology)
            .field("macs_per_frame", &self.macs_per_frame())
            .finish()
    }
}

impl NetworkInstance {
    pub fn build<R: Rng + ?Sized>(genome: &Genome, rng: &mut R) -> Result<Self, ModelError> {
        Self::build_with_bins(genome, NETWORK_BINS, rng)
    }

    /// Uniform fan-in-scaled weights, zero biases.
    pub fn build_with_bins<R: Rng + ?Sized>(genome: &Genome, bins: usize, rng: &mut R) -> Result<Self, ModelError> {
        let topology = Topology::new(genome, bins)?;
        let shapes = param_shapes(&topology);
        let layout = ParamLayout::new(&topology);
        let recurrent = topology.bottleneck != BottleneckKind::Conv;
        let bn = layout.start(LayerId::Bottleneck);
        let head = layout.start(LayerId::Head);
        let params = shapes
            .iter()
            .enumerate()
            .map(|(i, shape)| {
                let n: usize = shape.iter().product();
                if i == head + 1 {
                    // start at the identity mask: real part compress(1), imaginary 0
                    let re = (compress(1.0) / MASK_BOUND).atanh();
                    return Tensor::new(shape, vec![re, 0.0]).expect("head bias");
                }
                if shape.len() == 1 {
                    return Tensor::zeros(shape);
                }
                let fan_in = if recurrent && (i == bn || i == bn + 1) {
                    shape[0]
                } else {
                    shape[0] * shape[1]
                };
                let gain = if i == head { HEAD_INIT_GAIN } else { 1.0 };
                let bound = gain / (fan_in as f64).sqrt();
                let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
                Tensor::new(shape, data).expect("shape matches data")
            })
            .collect();
        Ok(Self {
            topology,
            params,
            stream: None,
        })
    }

    pub fn from_parts(topology: Topology, params: Vec<Tensor>) -> Result<Self, ModelError> {
        let shapes = param_shapes(&topology);
        if shapes.len() != params.len() {
            return Err(ModelError::Shape(format!(
                "{} parameter tensors, topology needs {}",
                params.len(),
                shapes.len()
            )));
        }
        for (i, (s, p)) in shapes.iter().zip(&params).enumerate() {
            if s.as_slice() != p.shape() {
                return Err(ModelError::Shape(format!(
                    "parameter {i}: shape {:?}, topology needs {s:?}",
                    p.shape()
                )));
            }
            if p.data().iter().any(|v| !v.is_finite()) {
                return Err(ModelError::Shape(format!("parameter {i} has non-finite values")));
            }
        }
        Ok(Self {
            topology,
            params,
            stream: None,
        })
    }

    pub fn topology(&self) -> &Topology {
        &self.topology
    }

    pub fn params(&self) -> &[Tensor] {
        &self.params
    }

    /// Mutable weights; drops any cached streaming state.
    pub fn params_mut(&mut self) -> &mut [Tensor] {
        self.stream = None;
        &mut self.params
    }

    pub fn into_parts(self) -> (Topology, Vec<Tensor>) {
        (self.topology, self.params)
    }

    pub fn layout(&self) -> ParamLayout {
        ParamLayout::new(&self.topology)
    }

    pub fn n_params(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn macs_per_frame(&self) -> u64 {
        self.topology.macs()
    }

    /// Bins of the one-sided spectrum frames the network consumes.
    pub fn frame_bins(&self) -> usize {
        self.topology.bins + 1
    }

    /// Streaming inference engine at precision `T` with fresh state.
    pub fn streamer<T: Float>(&self) -> Streamer<T> {
        Streamer::new(&self.topology, &self.params)
    }

    /// Advances the 64-bit stream state by one frame.
    pub fn stream_step(&mut self, frame: &[Complex<f64>]) -> Result<MaskFrame<f64>, ModelError> {
        if self.stream.is_none() {
            self.stream = Some(self.streamer());
        }
        self.stream.as_mut().unwrap().step(frame)
    }

    pub fn reset_stream(&mut self) {
        if let Some(s) = &mut self.stream {
            s.reset();
        }
    }

    /// Records the parameters on `tape`, in storage order.
    pub fn record_params(&self, tape: &mut Tape, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|p| {
                if trainable {
                    tape.param(p.clone())
                } else {
                    tape.constant(p.clone())
                }
            })
            .collect()
    }

    /// Batch forward on the tape.
    ///
    /// `x` holds features `[steps * batch, bins, 2]` in time-major order
    /// (row `t * batch + b`); the result is the compressed mask with the same
    /// shape. Recurrent state starts at zero for every sequence.
    pub fn forward_tape(
        &self,
        tape: &mut Tape,
        p: &[Var],
        x: Var,
        steps: usize,
        batch: usize,
    ) -> Result<Var, TensorError> {
        let t = &self.topology;
        let layout = self.layout();
        let act = |tape: &mut Tape, v: Var| match t.activation {
            super::genome::Activation::Relu => tape.relu(v),
            super::genome::Activation::Tanh => tape.tanh(v),
        };
        let mut h = x;
        let mut skips = Vec::with_capacity(t.n_levels());
        for (i, l) in t.levels.iter().enumerate() {
            let s = layout.start(LayerId::Encoder(i));
            h = tape.conv1d(h, p[s], ConvSpec::same(l.kernel, l.stride))?;
            h = tape.add_bias(h, p[s + 1])?;
            h = act(tape, h);
            skips.push(h);
        }
        let bn = layout.start(LayerId::Bottleneck);
        let fl = t.bins_at(t.n_levels());
        let hid = t.hidden;
        let rows = batch * fl;
        h = match t.bottleneck {
            BottleneckKind::Conv => {
                let y = tape.conv1d(h, p[bn], ConvSpec::same(BOTTLENECK_KERNEL, 1))?;
                let y = tape.add_bias(y, p[bn + 1])?;
                act(tape, y)
            }
            BottleneckKind::Gru => {
                let c = t.bottleneck_in_channels();
                let flat = tape.reshape(h, &[steps * rows, c])?;
                let xw = tape.matmul(flat, p[bn])?;
                let xw = tape.add_bias(xw, p[bn + 2])?;
                let mut state = tape.constant(Tensor::zeros(&[rows, hid]));
                let mut outs = Vec::with_capacity(steps);
                for step in 0..steps {
                    let xt = tape.slice_rows(xw, step * rows, (step + 1) * rows)?;
                    let hw = tape.matmul(state, p[bn + 1])?;
                    let hw = tape.add_bias(hw, p[bn + 3])?;
                    let xr = tape.slice_last(xt, 0, hid)?;
                    let hr = tape.slice_last(hw, 0, hid)?;
                    let r = tape.add(xr, hr)?;
                    let r = tape.sigmoid(r);
                    let xz = tape.slice_last(xt, hid, 2 * hid)?;
                    let hz = tape.slice_last(hw, hid, 2 * hid)?;
                    let z = tape.add(xz, hz)?;
                    let z = tape.sigmoid(z);
                    let xn = tape.slice_last(xt, 2 * hid, 3 * hid)?;
                    let hn = tape.slice_last(hw, 2 * hid, 3 * hid)?;
                    let rn = tape.mul(r, hn)?;
                    let n = tape.add(xn, rn)?;
                    let n = tape.tanh(n);
                    // h' = n + z (h - n)
                    let d = tape.sub(state, n)?;
                    let zd = tape.mul(z, d)?;
                    state = tape.add(n, zd)?;
                    outs.push(state);
                }
                let all = tape.concat_rows(&outs)?;
                tape.reshape(all, &[steps * batch, fl, hid])?
            }
            BottleneckKind::Lstm => {
                let c = t.bottleneck_in_channels();
                let flat = tape.reshape(h, &[steps * rows, c])?;
                let xw = tape.matmul(flat, p[bn])?;
                let xw = tape.add_bias(xw, p[bn + 2])?;
                let mut state = tape.constant(Tensor::zeros(&[rows, hid]));
                let mut cell = tape.constant(Tensor::zeros(&[rows, hid]));
                let mut outs = Vec::with_capacity(steps);
                for step in 0..steps {
                    let xt = tape.slice_rows(xw, step * rows, (step + 1) * rows)?;
                    let hw = tape.matmul(state, p[bn + 1])?;
                    let g = tape.add(xt, hw)?;
                    let gi = tape.slice_last(g, 0, hid)?;
                    let i = tape.sigmoid(gi);
                    let gf = tape.slice_last(g, hid, 2 * hid)?;
                    let f = tape.sigmoid(gf);
                    let gg = tape.slice_last(g, 2 * hid, 3 * hid)?;
                    let gg = tape.tanh(gg);
                    let go = tape.slice_last(g, 3 * hid, 4 * hid)?;
                    let o = tape.sigmoid(go);
                    let fc = tape.mul(f, cell)?;
                    let ig = tape.mul(i, gg)?;
                    cell = tape.add(fc, ig)?;
                    let tc = tape.tanh(cell);
                    state = tape.mul(o, tc)?;
                    outs.push(state);
                }
                let all = tape.concat_rows(&outs)?;
                tape.reshape(all, &[steps * batch, fl, hid])?
            }
        };
        for i in (0..t.n_levels()).rev() {
            let l = &t.levels[i];
            let s = layout.start(LayerId::Decoder(i));
            let input = if l.skip { tape.concat_last(&[h, skips[i]])? } else { h };
            h = if l.stride > 1 {
                tape.conv_transpose1d(input, p[s], ConvSpec::same(l.kernel, l.stride))?
            } else {
                tape.conv1d(input, p[s], ConvSpec::same(l.kernel, 1))?
            };
            h = tape.add_bias(h, p[s + 1])?;
            h = act(tape, h);
        }
        let s = layout.start(LayerId::Head);
        h = tape.conv1d(h, p[s], ConvSpec::same(1, 1))?;
        h = tape.add_bias(h, p[s + 1])?;
        let h = tape.tanh(h);
        Ok(tape.scale(h, super::cirm::MASK_BOUND))
    }

    /// Offline forward over a whole feature sequence (one sequence, 64-bit),
    /// returning `[frames, bins, 2]` compressed mask values.
    pub fn forward_offline(&self, features: &[f64], frames: usize) -> Result<Vec<f64>, ModelError> {
        let bins = self.topology.bins;
        let mut tape = Tape::new();
        let p = self.record_params(&mut tape, false);
        let x = tape.constant(Tensor::new(&[frames, bins, 2], features.to_vec())?);
        let y = self.forward_tape(&mut tape, &p, x, frames, 1)?;
        Ok(tape.value(y).data().to_vec())
    }
}
