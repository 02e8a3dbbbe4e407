//! The three networks: the siamese temporal-order network, the frame-wise
//! phase classifier and the recurrent phase classifier.
//!
//! All three share one convolutional trunk (Conv1..Conv5 followed by FC6)
//! whose parameters are named `conv{i}.kernel`, `conv{i}.bias`, `fc6.weight`
//! and `fc6.bias`, so pretrained trunk weights transfer by name.

mod checkpoint;
mod config;

use std::collections::BTreeMap;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{
    load_checkpoint, save_checkpoint, Checkpoint, ParamRecord, TrainCounters, CHECKPOINT_MAGIC, CHECKPOINT_VERSION,
};
pub use config::{ArchConfig, ConvSpec, PoolSpec, ResolvedArch, ResolvedConv};

use crate::error::{Error, Result};
use crate::tensor::{DropoutMode, ParamId, ParamStore, Scalar, Tape, Tensor, Var};

/// Learning-rate multiplier given to transferred trunk parameters.
pub const PRETRAINED_LR_MULTIPLIER: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum Topology {
    /// Two weight-sharing chains, concat, FC7, FC8, 2-way FC9.
    TemporalOrder,
    /// Trunk plus two dense layers, one phase distribution per frame.
    NaivePhase { n_phases: usize },
    /// Trunk, GRU over the batch as a sequence, dense softmax classifier.
    RecurrentPhase { n_phases: usize },
}

impl Topology {
    pub fn n_outputs(&self) -> usize {
        match *self {
            Topology::TemporalOrder => 2,
            Topology::NaivePhase { n_phases } | Topology::RecurrentPhase { n_phases } => n_phases,
        }
    }
}

/// One entry of the ordered layer listing.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Layer {
    Conv { name: String, kernel: usize, out_channels: usize, stride: usize, padding: usize },
    Relu,
    Lrn,
    MaxPool { window: usize, stride: usize },
    Flatten,
    Dense { name: String, units: usize },
    Dropout,
    Concat,
    SequenceReshape,
    Gru { name: String, hidden: usize },
    Softmax,
}

#[derive(Debug, Clone)]
struct TrunkIds {
    conv: Vec<(ParamId, ParamId)>,
    fc6: (ParamId, ParamId),
}

#[derive(Debug, Clone)]
enum HeadIds {
    TemporalOrder { fc7: (ParamId, ParamId), fc8: (ParamId, ParamId), fc9: (ParamId, ParamId) },
    Naive { hidden: (ParamId, ParamId), out: (ParamId, ParamId) },
    Recurrent { gru: [ParamId; 9], out: (ParamId, ParamId) },
}

/// A built network: layer listing, parameter table, siamese alias table and,
/// for the recurrent network, the hidden state carried between batches.
#[derive(Debug, Clone)]
pub struct NetworkGraph<T: Scalar = f32> {
    arch: ArchConfig,
    resolved: ResolvedArch,
    topology: Topology,
    layers: Vec<Layer>,
    params: ParamStore<T>,
    aliases: BTreeMap<String, ParamId>,
    trunk: TrunkIds,
    head: HeadIds,
    hidden: Option<Tensor<T>>,
}

/// Uniform He fan-in initialization: `U(-sqrt(6 / fan_in), sqrt(6 / fan_in))`.
fn he_uniform<T: Scalar>(shape: Vec<usize>, fan_in: usize, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.random_range(-bound..bound)))
}

struct Builder<T: Scalar> {
    params: ParamStore<T>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Builder<T> {
    fn weight(&mut self, name: &str, shape: Vec<usize>, fan_in: usize) -> Result<ParamId> {
        let value = he_uniform(shape, fan_in, &mut self.rng);
        self.params.add(name, value, true)
    }

    fn bias(&mut self, name: &str, len: usize) -> Result<ParamId> {
        self.params.add(name, Tensor::zeros(vec![len]), false)
    }

    fn dense(&mut self, name: &str, inputs: usize, units: usize) -> Result<(ParamId, ParamId)> {
        let w = self.weight(&format!("{name}.weight"), vec![inputs, units], inputs)?;
        let b = self.bias(&format!("{name}.bias"), units)?;
        Ok((w, b))
    }
}

fn trunk_layers(r: &ResolvedArch) -> Vec<Layer> {
    let mut layers = Vec::new();
    for (i, c) in r.conv.iter().enumerate() {
        layers.push(Layer::Conv {
            name: format!("conv{}", i + 1),
            kernel: c.kernel,
            out_channels: c.out_channels,
            stride: c.stride,
            padding: c.padding,
        });
        layers.push(Layer::Relu);
        if c.lrn {
            layers.push(Layer::Lrn);
        }
        if let Some(p) = c.pool {
            layers.push(Layer::MaxPool { window: p.window, stride: p.stride });
        }
    }
    layers.push(Layer::Flatten);
    layers.push(Layer::Dense { name: "fc6".into(), units: r.fc6_units });
    layers.push(Layer::Relu);
    layers.push(Layer::Dropout);
    layers
}

impl<T: Scalar> NetworkGraph<T> {
    fn build(arch: &ArchConfig, topology: Topology, seed: u64) -> Result<Self> {
        let resolved = arch.resolve()?;
        if let Topology::NaivePhase { n_phases } | Topology::RecurrentPhase { n_phases } = topology {
            if n_phases < 2 {
                return Err(Error::config(format!("need at least 2 phases, got {n_phases}")));
            }
        }
        let mut b = Builder { params: ParamStore::new(), rng: ChaCha8Rng::seed_from_u64(seed) };
        let mut conv = Vec::new();
        for (i, c) in resolved.conv.iter().enumerate() {
            let fan_in = c.in_channels * c.kernel * c.kernel;
            let k = b.weight(
                &format!("conv{}.kernel", i + 1),
                vec![c.out_channels, c.in_channels, c.kernel, c.kernel],
                fan_in,
            )?;
            let bias = b.bias(&format!("conv{}.bias", i + 1), c.out_channels)?;
            conv.push((k, bias));
        }
        let fc6 = b.dense("fc6", resolved.fc6_inputs, resolved.fc6_units)?;
        let trunk = TrunkIds { conv, fc6 };
        let mut layers = trunk_layers(&resolved);
        let mut aliases = BTreeMap::new();
        let mut hidden = None;

        let head = match topology {
            Topology::TemporalOrder => {
                let names: Vec<String> = b.params.iter().map(|p| p.name.clone()).collect();
                for name in names {
                    let id = b.params.id(&name).expect("just added");
                    aliases.insert(format!("chain_b.{name}"), id);
                }
                let fc7 = b.dense("fc7", 2 * resolved.fc6_units, resolved.fc7_units)?;
                let fc8 = b.dense("fc8", resolved.fc7_units, resolved.fc8_units)?;
                let fc9 = b.dense("fc9", resolved.fc8_units, 2)?;
                layers.extend([
                    Layer::Concat,
                    Layer::Dense { name: "fc7".into(), units: resolved.fc7_units },
                    Layer::Relu,
                    Layer::Dropout,
                    Layer::Dense { name: "fc8".into(), units: resolved.fc8_units },
                    Layer::Dense { name: "fc9".into(), units: 2 },
                    Layer::Softmax,
                ]);
                HeadIds::TemporalOrder { fc7, fc8, fc9 }
            }
            Topology::NaivePhase { n_phases } => {
                let h = b.dense("head1", resolved.fc6_units, resolved.classifier_units)?;
                let out = b.dense("head2", resolved.classifier_units, n_phases)?;
                layers.extend([
                    Layer::Dense { name: "head1".into(), units: resolved.classifier_units },
                    Layer::Relu,
                    Layer::Dropout,
                    Layer::Dense { name: "head2".into(), units: n_phases },
                    Layer::Softmax,
                ]);
                HeadIds::Naive { hidden: h, out }
            }
            Topology::RecurrentPhase { n_phases } => {
                let (f, h) = (resolved.fc6_units, resolved.gru_hidden);
                let mut gru = Vec::with_capacity(9);
                for gate in ["wz", "wr", "wh"] {
                    gru.push(b.weight(&format!("gru.{gate}"), vec![f, h], f)?);
                }
                for gate in ["uz", "ur", "uh"] {
                    gru.push(b.weight(&format!("gru.{gate}"), vec![h, h], h)?);
                }
                for gate in ["bz", "br", "bh"] {
                    gru.push(b.bias(&format!("gru.{gate}"), h)?);
                }
                let out = b.dense("classifier", h, n_phases)?;
                layers.extend([
                    Layer::SequenceReshape,
                    Layer::Gru { name: "gru".into(), hidden: h },
                    Layer::Dense { name: "classifier".into(), units: n_phases },
                    Layer::Softmax,
                ]);
                hidden = Some(Tensor::zeros(vec![1, h]));
                HeadIds::Recurrent { gru: gru.try_into().expect("nine gate tensors"), out }
            }
        };
        Ok(NetworkGraph {
            arch: arch.clone(),
            resolved,
            topology,
            layers,
            params: b.params,
            aliases,
            trunk,
            head,
            hidden,
        })
    }

    pub fn arch(&self) -> &ArchConfig {
        &self.arch
    }

    pub fn resolved(&self) -> &ResolvedArch {
        &self.resolved
    }

    pub fn topology(&self) -> Topology {
        self.topology
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    /// `(chain-B name, shared id)` pairs of the siamese network.
    pub fn aliases(&self) -> impl Iterator<Item = (&str, ParamId)> {
        self.aliases.iter().map(|(k, v)| (k.as_str(), *v))
    }

    /// Looks a name up in the parameter table, then in the alias table.
    pub fn resolve_param(&self, name: &str) -> Option<ParamId> {
        self.params.id(name).or_else(|| self.aliases.get(name).copied())
    }

    /// Ids of the Conv1..FC6 parameters in layer order.
    pub fn trunk_param_ids(&self) -> Vec<ParamId> {
        let mut ids: Vec<ParamId> = self.trunk.conv.iter().flat_map(|&(k, b)| [k, b]).collect();
        ids.extend([self.trunk.fc6.0, self.trunk.fc6.1]);
        ids
    }

    pub fn hidden_state(&self) -> Option<&Tensor<T>> {
        self.hidden.as_ref()
    }

    pub fn set_hidden_state(&mut self, h: Tensor<T>) -> Result<()> {
        match &self.hidden {
            Some(cur) if cur.shape() == h.shape() => {
                self.hidden = Some(h);
                Ok(())
            }
            Some(cur) => Err(Error::shape(format!("hidden state {:?} expected, got {:?}", cur.shape(), h.shape()))),
            None => Err(Error::config("network has no recurrent state")),
        }
    }

    /// Zeroes the recurrent state; called at every video start.
    pub fn reset_hidden_state(&mut self) {
        if let Some(h) = &mut self.hidden {
            h.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }

    /// Same network with every parameter converted to another element type.
    pub fn cast<U: Scalar>(&self) -> NetworkGraph<U> {
        NetworkGraph {
            arch: self.arch.clone(),
            resolved: self.resolved.clone(),
            topology: self.topology,
            layers: self.layers.clone(),
            params: self.params.cast(),
            aliases: self.aliases.clone(),
            trunk: self.trunk.clone(),
            head: self.head.clone(),
            hidden: self.hidden.as_ref().map(Tensor::cast),
        }
    }

    fn dense_layer(&self, tape: &mut Tape<T>, x: Var, (w, b): (ParamId, ParamId)) -> Result<Var> {
        let w = tape.param(&self.params, w);
        let b = tape.param(&self.params, b);
        tape.dense(x, w, b)
    }

    /// Conv1..Conv5 and FC6 (with its ReLU) on an `N x 3 x H x W` batch.
    /// Returns the `N x fc6_units` activation before dropout.
    pub fn trunk_forward(&self, tape: &mut Tape<T>, frames: Var) -> Result<Var> {
        let shape = tape.value(frames).shape().to_vec();
        let r = &self.resolved;
        let expected = [r.in_channels, r.input_height, r.input_width];
        if shape.len() != 4 || shape[1..] != expected {
            return Err(Error::shape(format!(
                "network expects N×{}×{}×{} frames, got {shape:?}",
                expected[0], expected[1], expected[2]
            )));
        }
        let mut x = frames;
        for (spec, &(k, b)) in r.conv.iter().zip(&self.trunk.conv) {
            let kv = tape.param(&self.params, k);
            let bv = tape.param(&self.params, b);
            x = tape.conv2d(x, kv, bv, spec.stride, spec.padding)?;
            x = tape.relu(x)?;
            if spec.lrn {
                x = tape.local_response_norm(x, self.arch.lrn)?;
            }
            if let Some(p) = spec.pool {
                x = tape.max_pool2d(x, p.window, p.stride)?;
            }
        }
        let n = shape[0];
        x = tape.reshape(x, vec![n, r.fc6_inputs])?;
        x = self.dense_layer(tape, x, self.trunk.fc6)?;
        tape.relu(x)
    }

    /// Siamese head on two FC6 batches (`N x fc6`). Returns `N x 2` probabilities.
    pub fn temporal_order_head(
        &self,
        tape: &mut Tape<T>,
        fc6_a: Var,
        fc6_b: Var,
        mode: DropoutMode,
        rng: &mut impl Rng,
    ) -> Result<Var> {
        let HeadIds::TemporalOrder { fc7, fc8, fc9 } = self.head else {
            return Err(Error::config("not a temporal-order network"));
        };
        let p = self.arch.dropout_p;
        let a = tape.dropout(fc6_a, p, mode, rng)?;
        let b = tape.dropout(fc6_b, p, mode, rng)?;
        let mut x = tape.concat(a, b)?;
        x = self.dense_layer(tape, x, fc7)?;
        x = tape.relu(x)?;
        x = tape.dropout(x, p, mode, rng)?;
        x = self.dense_layer(tape, x, fc8)?;
        x = self.dense_layer(tape, x, fc9)?;
        tape.softmax(x)
    }

    /// Full siamese pass: chain A on `frames_a`, chain B on `frames_b`, both
    /// through the same parameters. Returns `(fc6_a, fc6_b, probs)`.
    pub fn temporal_order_forward(
        &self,
        tape: &mut Tape<T>,
        frames_a: Var,
        frames_b: Var,
        mode: DropoutMode,
        rng: &mut impl Rng,
    ) -> Result<(Var, Var, Var)> {
        let fa = self.trunk_forward(tape, frames_a)?;
        let fb = self.trunk_forward(tape, frames_b)?;
        let probs = self.temporal_order_head(tape, fa, fb, mode, rng)?;
        Ok((fa, fb, probs))
    }

    /// Frame-wise phase probabilities `N x n_phases`.
    pub fn naive_forward(&self, tape: &mut Tape<T>, frames: Var, mode: DropoutMode, rng: &mut impl Rng) -> Result<Var> {
        let HeadIds::Naive { hidden, out } = self.head else {
            return Err(Error::config("not a frame-wise phase network"));
        };
        let p = self.arch.dropout_p;
        let mut x = self.trunk_forward(tape, frames)?;
        x = tape.dropout(x, p, mode, rng)?;
        x = self.dense_layer(tape, x, hidden)?;
        x = tape.relu(x)?;
        x = tape.dropout(x, p, mode, rng)?;
        x = self.dense_layer(tape, x, out)?;
        tape.softmax(x)
    }

    /// Recurrent pass over a temporally ordered batch of `T` frames of one
    /// video, viewed as a single sequence of length `T`. `h0` is `1 x H`.
    /// Returns `(probs T x n_phases, h_T)`.
    pub fn recurrent_forward(
        &self,
        tape: &mut Tape<T>,
        frames: Var,
        h0: Var,
        mode: DropoutMode,
        rng: &mut impl Rng,
    ) -> Result<(Var, Var)> {
        let HeadIds::Recurrent { gru, out } = self.head else {
            return Err(Error::config("not a recurrent phase network"));
        };
        let steps = tape.value(frames).shape()[0];
        let mut x = self.trunk_forward(tape, frames)?;
        x = tape.dropout(x, self.arch.dropout_p, mode, rng)?;
        let seq = tape.reshape(x, vec![steps, 1, self.resolved.fc6_units])?;
        let weights = gru.map(|id| tape.param(&self.params, id));
        let (outputs, last) = tape.gru_sequence(seq, h0, weights)?;
        let flat = tape.reshape(outputs, vec![steps, self.resolved.gru_hidden])?;
        let logits = self.dense_layer(tape, flat, out)?;
        Ok((tape.softmax(logits)?, last))
    }

    /// Phase probabilities for one chunk of frames, whichever phase topology
    /// this is. The recurrent variant starts from and updates the stored
    /// hidden state; the carried state is a constant on the tape.
    pub fn phase_forward(&mut self, tape: &mut Tape<T>, frames: Var, mode: DropoutMode, rng: &mut impl Rng) -> Result<Var> {
        match self.topology {
            Topology::NaivePhase { .. } => self.naive_forward(tape, frames, mode, rng),
            Topology::RecurrentPhase { .. } => {
                let h0 = tape.input(self.hidden.clone().expect("recurrent net has state"));
                let (probs, last) = self.recurrent_forward(tape, frames, h0, mode, rng)?;
                self.hidden = Some(tape.value(last).clone());
                Ok(probs)
            }
            Topology::TemporalOrder => Err(Error::config("temporal-order network has no phase output")),
        }
    }
}

/// Siamese temporal-order network with shared Conv1..FC6.
pub fn build_tcl_net<T: Scalar>(cfg: &ArchConfig, seed: u64) -> Result<NetworkGraph<T>> {
    NetworkGraph::build(cfg, Topology::TemporalOrder, seed)
}

/// Trunk plus two dense layers with an `n_phases` softmax.
pub fn build_naive_lwfnet<T: Scalar>(cfg: &ArchConfig, n_phases: usize, seed: u64) -> Result<NetworkGraph<T>> {
    NetworkGraph::build(cfg, Topology::NaivePhase { n_phases }, seed)
}

/// Trunk, GRU and dense softmax classifier.
pub fn build_tempconet<T: Scalar>(cfg: &ArchConfig, n_phases: usize, seed: u64) -> Result<NetworkGraph<T>> {
    NetworkGraph::build(cfg, Topology::RecurrentPhase { n_phases }, seed)
}

pub fn build_network<T: Scalar>(cfg: &ArchConfig, topology: Topology, seed: u64) -> Result<NetworkGraph<T>> {
    NetworkGraph::build(cfg, topology, seed)
}

/// Copies Conv1..FC6 out of a temporal-order checkpoint into `dst` and gives
/// those parameters the reduced learning-rate multiplier. Every other
/// parameter of `dst` is left as initialized.
pub fn transfer_pretrained<T: Scalar>(src: &Checkpoint, dst: &mut NetworkGraph<T>) -> Result<()> {
    if src.topology != Topology::TemporalOrder {
        return Err(Error::IncompatibleCheckpoint("source is not a temporal-order network".into()));
    }
    if let Some(layer) = src.arch.first_trunk_mismatch(&dst.arch) {
        return Err(Error::IncompatibleCheckpoint(format!("architecture differs at {layer}")));
    }
    let ids = dst.trunk_param_ids();
    for &id in &ids {
        let name = dst.params.get(id).name.clone();
        let layer = name.split('.').next().unwrap_or(&name).to_string();
        let rec = src
            .params
            .iter()
            .find(|r| r.name == name)
            .ok_or_else(|| Error::IncompatibleCheckpoint(format!("{layer}: {name} missing from checkpoint")))?;
        let p = dst.params.get(id);
        if rec.shape != p.value.shape() {
            return Err(Error::IncompatibleCheckpoint(format!(
                "{layer}: {name} has shape {:?} in checkpoint but {:?} in network",
                rec.shape,
                p.value.shape()
            )));
        }
    }
    for id in ids {
        let name = dst.params.get(id).name.clone();
        let rec = src.params.iter().find(|r| r.name == name).expect("checked above");
        let p = dst.params.get_mut(id);
        p.value = Tensor::new(rec.shape.clone(), rec.data.iter().map(|&v| T::from_f64_lossy(v as f64)).collect())?;
        p.lr_multiplier = PRETRAINED_LR_MULTIPLIER;
    }
    Ok(())
}
