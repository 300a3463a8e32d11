//! Searchable U-Net genome and the concrete topology it expands to.

use std::fmt;

use serde::{Deserialize, Serialize};

use super::ModelError;

/// Bins fed to the network: the one-sided spectrum minus the Nyquist bin.
pub const NETWORK_BINS: usize = 512;

pub const MAX_LEVELS: usize = 4;
pub const CHANNEL_RANGE: (usize, usize) = (4, 64);
pub const HIDDEN_RANGE: (usize, usize) = (8, 128);
pub const KERNELS: [usize; 2] = [3, 5];
pub const STRIDES: [usize; 2] = [1, 2];
/// Kernel width of the convolutional bottleneck.
pub const BOTTLENECK_KERNEL: usize = 3;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BottleneckKind {
    Gru,
    Lstm,
    Conv,
}

impl BottleneckKind {
    pub const ALL: [BottleneckKind; 3] = [Self::Gru, Self::Lstm, Self::Conv];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    pub const ALL: [Activation; 2] = [Self::Relu, Self::Tanh];
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LevelGene {
    pub channels: usize,
    pub kernel: usize,
    pub freq_stride: usize,
    pub skip: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Bottleneck {
    pub kind: BottleneckKind,
    pub hidden: usize,
}

/// Encoder levels (the decoder mirrors them), bottleneck and activation.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Genome {
    pub levels: Vec<LevelGene>,
    pub bottleneck: Bottleneck,
    pub activation: Activation,
}

impl Genome {
    /// One conv level with a conv bottleneck.
    pub fn minimal() -> Self {
        Self {
            levels: vec![LevelGene {
                channels: 4,
                kernel: 3,
                freq_stride: 1,
                skip: false,
            }],
            bottleneck: Bottleneck {
                kind: BottleneckKind::Conv,
                hidden: 8,
            },
            activation: Activation::Relu,
        }
    }

    /// Two strided levels with skips and a small conv bottleneck; trains to a
    /// few dB of improvement in minutes on one core.
    pub fn desk() -> Self {
        let level = |kernel| LevelGene {
            channels: 16,
            kernel,
            freq_stride: 2,
            skip: true,
        };
        Self {
            levels: vec![level(5), level(3)],
            bottleneck: Bottleneck {
                kind: BottleneckKind::Conv,
                hidden: 24,
            },
            activation: Activation::Relu,
        }
    }

    /// Checks per-gene ranges (not the bin-count algebra; see [`Topology::new`]).
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: String| Err(ModelError::InvalidGenome(m));
        if self.levels.is_empty() || self.levels.len() > MAX_LEVELS {
            return bad(format!("{} levels, need 1..={MAX_LEVELS}", self.levels.len()));
        }
        for (i, l) in self.levels.iter().enumerate() {
            if l.channels < CHANNEL_RANGE.0 || l.channels > CHANNEL_RANGE.1 {
                return bad(format!("level {i}: {} channels outside {CHANNEL_RANGE:?}", l.channels));
            }
            if !KERNELS.contains(&l.kernel) {
                return bad(format!("level {i}: kernel {} not in {KERNELS:?}", l.kernel));
            }
            if !STRIDES.contains(&l.freq_stride) {
                return bad(format!("level {i}: stride {} not in {STRIDES:?}", l.freq_stride));
            }
        }
        let h = self.bottleneck.hidden;
        if h < HIDDEN_RANGE.0 || h > HIDDEN_RANGE.1 {
            return bad(format!("hidden size {h} outside {HIDDEN_RANGE:?}"));
        }
        Ok(())
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("genome serializes")
    }

    pub fn from_toml(s: &str) -> Result<Self, ModelError> {
        let g: Genome = toml::from_str(s).map_err(|e| ModelError::Parse(e.to_string()))?;
        g.validate()?;
        Ok(g)
    }

    /// Compact one-line description, also used as the latency replay key.
    pub fn key(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for Genome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for l in &self.levels {
            write!(
                f,
                "c{}k{}s{}{}-",
                l.channels,
                l.kernel,
                l.freq_stride,
                if l.skip { "+" } else { "" }
            )?;
        }
        let kind = match self.bottleneck.kind {
            BottleneckKind::Gru => "gru",
            BottleneckKind::Lstm => "lstm",
            BottleneckKind::Conv => "conv",
        };
        let act = match self.activation {
            Activation::Relu => "relu",
            Activation::Tanh => "tanh",
        };
        write!(f, "{kind}{}-{act}", self.bottleneck.hidden)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LevelTopology {
    pub enc_channels: usize,
    pub dec_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub skip: bool,
}

/// Concrete layer widths. Starts as the genome's mirror image and drifts
/// from it as pruning removes channels.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Topology {
    pub bins: usize,
    pub activation: Activation,
    pub bottleneck: BottleneckKind,
    pub hidden: usize,
    pub levels: Vec<LevelTopology>,
}

/// Identifies a prunable or costed layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LayerId {
    Encoder(usize),
    Bottleneck,
    Decoder(usize),
    Head,
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            LayerId::Encoder(i) => write!(f, "enc{i}"),
            LayerId::Bottleneck => write!(f, "bottleneck"),
            LayerId::Decoder(i) => write!(f, "dec{i}"),
            LayerId::Head => write!(f, "head"),
        }
    }
}

/// Shape-level description of one layer, enough to count its MACs.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerShape {
    Linear {
        inputs: usize,
        outputs: usize,
    },
    Conv {
        out_positions: usize,
        c_in: usize,
        c_out: usize,
        kernel: usize,
    },
    /// Transposed convolution; every input position scatters through all taps.
    ConvTranspose {
        in_positions: usize,
        c_in: usize,
        c_out: usize,
        kernel: usize,
    },
    /// A recurrent cell applied independently at each of `positions` bins.
    Gru {
        positions: usize,
        input: usize,
        hidden: usize,
    },
    Lstm {
        positions: usize,
        input: usize,
        hidden: usize,
    },
}

impl LayerShape {
    pub fn macs(&self) -> u64 {
        let m = match *self {
            LayerShape::Linear { inputs, outputs } => inputs * outputs,
            LayerShape::Conv {
                out_positions,
                c_in,
                c_out,
                kernel,
            } => out_positions * c_out * c_in * kernel,
            LayerShape::ConvTranspose {
                in_positions,
                c_in,
                c_out,
                kernel,
            } => in_positions * c_in * c_out * kernel,
            LayerShape::Gru {
                positions,
                input,
                hidden,
            } => positions * 3 * hidden * (hidden + input),
            LayerShape::Lstm {
                positions,
                input,
                hidden,
            } => positions * 4 * hidden * (hidden + input),
        };
        m as u64
    }
}

impl Topology {
    pub fn new(genome: &Genome, bins: usize) -> Result<Self, ModelError> {
        genome.validate()?;
        let mut running = bins;
        for (i, l) in genome.levels.iter().enumerate() {
            if running % l.freq_stride != 0 {
                return Err(ModelError::Shape(format!(
                    "level {i}: stride {} does not divide {running} bins",
                    l.freq_stride
                )));
            }
            running /= l.freq_stride;
        }
        Ok(Self {
            bins,
            activation: genome.activation,
            bottleneck: genome.bottleneck.kind,
            hidden: genome.bottleneck.hidden,
            levels: genome
                .levels
                .iter()
                .map(|l| LevelTopology {
                    enc_channels: l.channels,
                    dec_channels: l.channels,
                    kernel: l.kernel,
                    stride: l.freq_stride,
                    skip: l.skip,
                })
                .collect(),
        })
    }

    pub fn n_levels(&self) -> usize {
        self.levels.len()
    }

    /// Bin count entering encoder level `i` (`bins_at(n_levels)` is the bottleneck width).
    pub fn bins_at(&self, i: usize) -> usize {
        self.levels[..i].iter().fold(self.bins, |b, l| b / l.stride)
    }

    pub fn enc_in_channels(&self, i: usize) -> usize {
        if i == 0 {
            2
        } else {
            self.levels[i - 1].enc_channels
        }
    }

    pub fn bottleneck_in_channels(&self) -> usize {
        self.levels.last().unwrap().enc_channels
    }

    /// Channels produced by the stage feeding decoder level `i`.
    pub fn dec_upstream_channels(&self, i: usize) -> usize {
        if i + 1 == self.levels.len() {
            self.hidden
        } else {
            self.levels[i + 1].dec_channels
        }
    }

    pub fn dec_in_channels(&self, i: usize) -> usize {
        let l = &self.levels[i];
        self.dec_upstream_channels(i) + if l.skip { l.enc_channels } else { 0 }
    }

    pub fn head_in_channels(&self) -> usize {
        self.levels[0].dec_channels
    }

    /// Layers in execution order.
    pub fn layers(&self) -> Vec<(LayerId, LayerShape)> {
        let n = self.levels.len();
        let mut out = Vec::with_capacity(2 * n + 2);
        for (i, l) in self.levels.iter().enumerate() {
            out.push((
                LayerId::Encoder(i),
                LayerShape::Conv {
                    out_positions: self.bins_at(i + 1),
                    c_in: self.enc_in_channels(i),
                    c_out: l.enc_channels,
                    kernel: l.kernel,
                },
            ));
        }
        let positions = self.bins_at(n);
        let input = self.bottleneck_in_channels();
        let hidden = self.hidden;
        out.push((
            LayerId::Bottleneck,
            match self.bottleneck {
                BottleneckKind::Conv => LayerShape::Conv {
                    out_positions: positions,
                    c_in: input,
                    c_out: hidden,
                    kernel: BOTTLENECK_KERNEL,
                },
                BottleneckKind::Gru => LayerShape::Gru {
                    positions,
                    input,
                    hidden,
                },
                BottleneckKind::Lstm => LayerShape::Lstm {
                    positions,
                    input,
                    hidden,
                },
            },
        ));
        for i in (0..n).rev() {
            let l = &self.levels[i];
            let shape = if l.stride > 1 {
                LayerShape::ConvTranspose {
                    in_positions: self.bins_at(i + 1),
                    c_in: self.dec_in_channels(i),
                    c_out: l.dec_channels,
                    kernel: l.kernel,
                }
            } else {
                LayerShape::Conv {
                    out_positions: self.bins_at(i),
                    c_in: self.dec_in_channels(i),
                    c_out: l.dec_channels,
                    kernel: l.kernel,
                }
            };
            out.push((LayerId::Decoder(i), shape));
        }
        out.push((
            LayerId::Head,
            LayerShape::Conv {
                out_positions: self.bins,
                c_in: self.head_in_channels(),
                c_out: 2,
                kernel: 1,
            },
        ));
        out
    }

    /// Multiply-accumulates per frame.
    pub fn macs(&self) -> u64 {
        self.layers().iter().map(|(_, s)| s.macs()).sum()
    }

    /// Output channel count of a prunable layer.
    pub fn out_channels(&self, id: LayerId) -> usize {
        match id {
            LayerId::Encoder(i) => self.levels[i].enc_channels,
            LayerId::Decoder(i) => self.levels[i].dec_channels,
            LayerId::Bottleneck => self.hidden,
            LayerId::Head => 2,
        }
    }

    /// Prunable layers ordered from the output side to the input side.
    pub fn prune_order(&self) -> Vec<LayerId> {
        let n = self.levels.len();
        let mut ids: Vec<LayerId> = (0..n).map(LayerId::Decoder).collect();
        ids.push(LayerId::Bottleneck);
        ids.extend((0..n).rev().map(LayerId::Encoder));
        ids
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("topology serializes")
    }

    pub fn from_toml(s: &str) -> Result<Self, ModelError> {
        let t: Topology = toml::from_str(s).map_err(|e| ModelError::Parse(e.to_string()))?;
        if t.levels.is_empty() || t.bins == 0 || t.hidden == 0 {
            return Err(ModelError::Parse("empty topology".into()));
        }
        let mut running = t.bins;
        for l in &t.levels {
            if l.stride == 0 || running % l.stride != 0 || l.enc_channels == 0 || l.dec_channels == 0 {
                return Err(ModelError::Parse("inconsistent topology".into()));
            }
            running /= l.stride;
        }
        Ok(t)
    }
}
