//! Iterative structured pruning of output channels with fine-tuning between steps.

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::audio::Mixture;
use crate::dsp::StftConfig;
use crate::model::{BottleneckKind, LayerId, ModelError, NetworkInstance};
use crate::tensor::Tensor;
use crate::train::{quality, sgd_steps, HyperParams, SgdState, TrainError, TrainSet};

#[derive(Debug, Error)]
pub enum PruneError {
    #[error("the output head is not prunable")]
    ProtectedHead,
    #[error("{layer} has {channels} channels; removing {k} would leave fewer than one")]
    TooFew { layer: LayerId, channels: usize, k: usize },
    #[error("layer {0} does not exist")]
    NoSuchLayer(LayerId),
    #[error("invalid schedule: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PruneSchedule {
    pub fraction_per_step: f64,
    pub finetune_steps: usize,
    pub passes: usize,
    /// Minimum allowed mean SI-SDR improvement, dB.
    pub quality_floor_db: f64,
    /// Stop once MACs have dropped by this fraction of the starting count.
    pub target_mac_reduction: Option<f64>,
    /// Batch shape and learning rate for fine-tuning; `steps` is unused.
    pub hp: HyperParams,
}

impl Default for PruneSchedule {
    fn default() -> Self {
        Self {
            fraction_per_step: 0.05,
            finetune_steps: 100,
            passes: 3,
            quality_floor_db: 0.0,
            target_mac_reduction: None,
            hp: HyperParams {
                learning_rate: 0.01,
                ..HyperParams::default()
            },
        }
    }
}

impl PruneSchedule {
    pub fn validate(&self) -> Result<(), PruneError> {
        if !(self.fraction_per_step > 0.0 && self.fraction_per_step <= 0.25) {
            return Err(PruneError::Config(format!(
                "fraction_per_step {} outside (0, 0.25]",
                self.fraction_per_step
            )));
        }
        if self.passes == 0 {
            return Err(PruneError::Config("passes must be at least 1".into()));
        }
        if self.quality_floor_db.is_nan() {
            return Err(PruneError::Config("quality floor is NaN".into()));
        }
        if let Some(t) = self.target_mac_reduction {
            if !(t > 0.0 && t < 1.0) {
                return Err(PruneError::Config(format!("target reduction {t} outside (0, 1)")));
            }
        }
        self.hp.validate()?;
        Ok(())
    }

    /// Channels removed from a layer of width `channels` per touch.
    pub fn step_count(&self, channels: usize) -> usize {
        ((self.fraction_per_step * channels as f64).ceil() as usize).max(1)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneStep {
    pub pass: usize,
    pub layer: LayerId,
    pub removed: usize,
    pub macs_before: u64,
    pub macs_after: u64,
    pub quality_db: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneReport {
    pub steps: Vec<PruneStep>,
    pub macs_start: u64,
    pub macs_end: u64,
    pub quality_start_db: f64,
    pub quality_end_db: f64,
    /// The step that fell below the quality floor and was rolled back, if any.
    pub floor_hit: Option<(LayerId, f64)>,
}

impl PruneReport {
    pub fn mac_reduction(&self) -> f64 {
        1.0 - self.macs_end as f64 / self.macs_start as f64
    }

    /// Steps as CSV, followed by a `total` row.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("pass,layer,removed,macs_before,macs_after,quality_db\n");
        for st in &self.steps {
            s.push_str(&format!(
                "{},{},{},{},{},{}\n",
                st.pass, st.layer, st.removed, st.macs_before, st.macs_after, st.quality_db
            ));
        }
        let removed: usize = self.steps.iter().map(|s| s.removed).sum();
        s.push_str(&format!(
            "total,all,{removed},{},{},{}\n",
            self.macs_start, self.macs_end, self.quality_end_db
        ));
        s
    }
}

/// Copy of `t` without the listed indices along `axis`.
fn drop_axis(t: &Tensor, axis: usize, remove: &[usize]) -> Tensor {
    let shape = t.shape();
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    let n = shape[axis];
    let keep: Vec<usize> = (0..n).filter(|i| !remove.contains(i)).collect();
    let mut data = Vec::with_capacity(outer * keep.len() * inner);
    for o in 0..outer {
        for &k in &keep {
            let at = (o * n + k) * inner;
            data.extend_from_slice(&t.data()[at..at + inner]);
        }
    }
    let mut new_shape = shape.to_vec();
    new_shape[axis] = keep.len();
    Tensor::new(&new_shape, data).expect("kept slice matches shape")
}

/// Column indices of hidden units `units` in every gate block.
fn gate_columns(units: &[usize], hidden: usize, gates: usize) -> Vec<usize> {
    (0..gates).flat_map(|g| units.iter().map(move |u| g * hidden + u)).collect()
}

fn gates(kind: BottleneckKind) -> usize {
    match kind {
        BottleneckKind::Conv => 1,
        BottleneckKind::Gru => 3,
        BottleneckKind::Lstm => 4,
    }
}

/// L1 norm of the weights and bias producing each output channel (for
/// recurrent units, summed over every gate).
pub fn channel_saliency(net: &NetworkInstance, layer: LayerId) -> Result<Vec<f64>, PruneError> {
    let t = net.topology();
    check_layer(net, layer)?;
    let p = net.params();
    let s = net.layout().start(layer);
    let n = t.out_channels(layer);
    let mut norms = vec![0.0; n];
    let mut add_cols = |x: &Tensor, blocks: usize| {
        let cols = *x.shape().last().unwrap();
        for (i, v) in x.data().iter().enumerate() {
            let c = i % cols;
            norms[(c % (cols / blocks)) % n] += v.abs();
        }
    };
    match (layer, t.bottleneck) {
        (LayerId::Bottleneck, BottleneckKind::Gru) => {
            for x in &p[s..s + 4] {
                add_cols(x, 3);
            }
        }
        (LayerId::Bottleneck, BottleneckKind::Lstm) => {
            for x in &p[s..s + 3] {
                add_cols(x, 4);
            }
        }
        _ => {
            add_cols(&p[s], 1);
            add_cols(&p[s + 1], 1);
        }
    }
    Ok(norms)
}

fn check_layer(net: &NetworkInstance, layer: LayerId) -> Result<(), PruneError> {
    let n = net.topology().n_levels();
    match layer {
        LayerId::Head => Err(PruneError::ProtectedHead),
        LayerId::Encoder(i) | LayerId::Decoder(i) if i >= n => Err(PruneError::NoSuchLayer(layer)),
        _ => Ok(()),
    }
}

/// Removes the `k` output channels of `layer` with the smallest saliency,
/// along with the matching input slices of every consumer.
pub fn prune_channels(net: &NetworkInstance, layer: LayerId, k: usize) -> Result<NetworkInstance, PruneError> {
    check_layer(net, layer)?;
    let t = net.topology();
    let channels = t.out_channels(layer);
    if k >= channels {
        return Err(PruneError::TooFew { layer, channels, k });
    }
    if k == 0 {
        return Ok(net.clone());
    }
    let norms = channel_saliency(net, layer)?;
    let mut order: Vec<usize> = (0..channels).collect();
    order.sort_by(|&a, &b| norms[a].total_cmp(&norms[b]).then(a.cmp(&b)));
    let mut remove = order[..k].to_vec();
    remove.sort_unstable();

    let layout = net.layout();
    let mut topo = t.clone();
    let mut p = net.params().to_vec();
    let n = t.n_levels();
    let shift = |r: &[usize], by: usize| r.iter().map(|i| i + by).collect::<Vec<_>>();

    // producer
    let s = layout.start(layer);
    match (layer, t.bottleneck) {
        (LayerId::Bottleneck, BottleneckKind::Gru | BottleneckKind::Lstm) => {
            let h = t.hidden;
            let cols = gate_columns(&remove, h, gates(t.bottleneck));
            p[s] = drop_axis(&p[s], 1, &cols);
            p[s + 1] = drop_axis(&drop_axis(&p[s + 1], 1, &cols), 0, &remove);
            p[s + 2] = drop_axis(&p[s + 2], 0, &cols);
            if t.bottleneck == BottleneckKind::Gru {
                p[s + 3] = drop_axis(&p[s + 3], 0, &cols);
            }
        }
        _ => {
            p[s] = drop_axis(&p[s], 2, &remove);
            p[s + 1] = drop_axis(&p[s + 1], 0, &remove);
        }
    }

    // consumers
    match layer {
        LayerId::Encoder(i) => {
            if i + 1 < n {
                let c = layout.start(LayerId::Encoder(i + 1));
                p[c] = drop_axis(&p[c], 1, &remove);
            } else {
                let c = layout.start(LayerId::Bottleneck);
                let axis = if t.bottleneck == BottleneckKind::Conv { 1 } else { 0 };
                p[c] = drop_axis(&p[c], axis, &remove);
            }
            if t.levels[i].skip {
                // the skip slice follows the upstream channels in the decoder input
                let c = layout.start(LayerId::Decoder(i));
                p[c] = drop_axis(&p[c], 1, &shift(&remove, t.dec_upstream_channels(i)));
            }
            topo.levels[i].enc_channels -= k;
        }
        LayerId::Bottleneck => {
            let c = layout.start(LayerId::Decoder(n - 1));
            p[c] = drop_axis(&p[c], 1, &remove);
            topo.hidden -= k;
        }
        LayerId::Decoder(i) => {
            let c = if i == 0 {
                layout.start(LayerId::Head)
            } else {
                layout.start(LayerId::Decoder(i - 1))
            };
            p[c] = drop_axis(&p[c], 1, &remove);
            topo.levels[i].dec_channels -= k;
        }
        LayerId::Head => unreachable!(),
    }
    Ok(NetworkInstance::from_parts(topo, p)?)
}

/// Prunes pass by pass from the output side to the input side, fine-tuning
/// after every removal. A step that drops quality below the floor is rolled
/// back and ends the loop.
pub fn prune_loop<R: Rng + ?Sized>(
    net: &NetworkInstance,
    schedule: &PruneSchedule,
    data: &TrainSet,
    valid: &[Mixture],
    stft_cfg: &StftConfig,
    rng: &mut R,
) -> Result<(NetworkInstance, PruneReport), PruneError> {
    schedule.validate()?;
    let mut current = net.clone();
    let macs_start = current.macs_per_frame();
    let quality_start = quality(&current, valid, stft_cfg)?;
    let mut report = PruneReport {
        steps: Vec::new(),
        macs_start,
        macs_end: macs_start,
        quality_start_db: quality_start,
        quality_end_db: quality_start,
        floor_hit: None,
    };
    let target_reached = |macs: u64| {
        schedule
            .target_mac_reduction
            .is_some_and(|t| 1.0 - macs as f64 / macs_start as f64 >= t)
    };

    'passes: for pass in 0..schedule.passes {
        for layer in current.topology().prune_order() {
            if target_reached(current.macs_per_frame()) {
                break 'passes;
            }
            let channels = current.topology().out_channels(layer);
            let k = schedule.step_count(channels).min(channels - 1);
            if k == 0 {
                continue;
            }
            let mut candidate = prune_channels(&current, layer, k)?;
            let mut state = SgdState::new(&candidate);
            let tuned = sgd_steps(
                &mut candidate,
                &mut state,
                data,
                &schedule.hp,
                schedule.finetune_steps,
                0,
                rng,
            );
            let q = match tuned {
                Ok(_) => quality(&candidate, valid, stft_cfg)?,
                Err(TrainError::Diverged { .. }) => f64::NEG_INFINITY,
                Err(e) => return Err(e.into()),
            };
            if q < schedule.quality_floor_db {
                report.floor_hit = Some((layer, q));
                break 'passes;
            }
            report.steps.push(PruneStep {
                pass,
                layer,
                removed: k,
                macs_before: current.macs_per_frame(),
                macs_after: candidate.macs_per_frame(),
                quality_db: q,
            });
            report.quality_end_db = q;
            current = candidate;
        }
    }
    report.macs_end = current.macs_per_frame();
    Ok((current, report))
}
