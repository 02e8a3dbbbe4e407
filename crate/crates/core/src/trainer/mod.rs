//! Pretraining on the frame-order task and phase fine-tuning.

mod optim;

use std::collections::BTreeMap;
use std::ops::ControlFlow;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use optim::{
    apply_regularization, csv_line, decay_learning_rate, regularization_penalty, sgd_nesterov_step, EpochRecord,
    OptimizerState, Task, TrainConfig, TrainLog, LOG_HEADER,
};

use crate::datapipe::{batch_video_sequences, sample_inequations, stack_frames, InequationSample, VideoDataset};
use crate::error::{Error, Result};
use crate::netarch::{build_tcl_net, ArchConfig, Checkpoint, NetworkGraph, Topology, TrainCounters};
use crate::tensor::{DropoutMode, Tape, Tensor, Var};

/// FNV-1a over `(root, tag, n)`; used to split one root seed into
/// independent streams.
pub fn derive_seed(root: u64, tag: &str, n: u64) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in root.to_le_bytes().iter().chain(tag.as_bytes()).chain(&n.to_le_bytes()) {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

pub(crate) fn stream(root: u64, tag: &str, n: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(root, tag, n))
}

/// Preprocessed frames of one video with 0-based class targets.
#[derive(Debug, Clone)]
pub struct PreparedVideo {
    pub id: String,
    pub frames: Tensor,
    pub targets: Option<Vec<usize>>,
}

impl PreparedVideo {
    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Frames `start..end` as their own batch tensor.
    pub fn slice(&self, start: usize, end: usize) -> Tensor {
        let per: usize = self.frames.shape()[1..].iter().product();
        let mut shape = self.frames.shape().to_vec();
        shape[0] = end - start;
        Tensor::new(shape, self.frames.data()[start * per..end * per].to_vec()).expect("slice within bounds")
    }
}

/// Preprocesses every video of `data` to the network input size, in id order.
pub fn prepare_videos(data: &VideoDataset, arch: &ArchConfig) -> Result<Vec<PreparedVideo>> {
    data.videos()
        .map(|(id, frames)| {
            let targets = frames
                .iter()
                .map(|f| f.phase_label.map(|l| l - 1))
                .collect::<Option<Vec<_>>>();
            Ok(PreparedVideo {
                id: id.to_string(),
                frames: stack_frames(frames, (arch.input_height, arch.input_width))?,
                targets,
            })
        })
        .collect()
}

fn gather(videos: &[PreparedVideo], rows: &[(usize, usize)]) -> Result<Tensor> {
    let first = &videos.first().ok_or_else(|| Error::Data("no videos".into()))?.frames;
    let per: usize = first.shape()[1..].iter().product();
    let mut data = Vec::with_capacity(rows.len() * per);
    for &(v, i) in rows {
        data.extend_from_slice(&videos[v].frames.data()[i * per..(i + 1) * per]);
    }
    let mut shape = first.shape().to_vec();
    shape[0] = rows.len();
    Tensor::new(shape, data)
}

/// Order probabilities for a batch of pairs. Each distinct frame goes
/// through the shared trunk once; both chains read their rows from it.
fn pair_forward(
    net: &NetworkGraph,
    tape: &mut Tape,
    videos: &[PreparedVideo],
    pairs: &[InequationSample],
    mode: DropoutMode,
    rng: &mut ChaCha8Rng,
) -> Result<Var> {
    let mut rows: BTreeMap<(usize, usize), usize> = BTreeMap::new();
    for p in pairs {
        for key in [(p.video, p.a), (p.video, p.b)] {
            let next = rows.len();
            rows.entry(key).or_insert(next);
        }
    }
    let mut order = vec![(0, 0); rows.len()];
    for (&key, &row) in &rows {
        order[row] = key;
    }
    let x = tape.input(gather(videos, &order)?);
    let fc6 = net.trunk_forward(tape, x)?;
    let ia: Vec<usize> = pairs.iter().map(|p| rows[&(p.video, p.a)]).collect();
    let ib: Vec<usize> = pairs.iter().map(|p| rows[&(p.video, p.b)]).collect();
    let fa = tape.gather_rows(fc6, &ia)?;
    let fb = tape.gather_rows(fc6, &ib)?;
    net.temporal_order_head(tape, fa, fb, mode, rng)
}

fn argmax(row: &[f32]) -> usize {
    row.iter().enumerate().fold(0, |best, (i, &v)| if v > row[best] { i } else { best })
}

fn count_correct(probs: &Tensor, targets: &[usize]) -> usize {
    targets.iter().enumerate().filter(|&(i, &t)| argmax(probs.row(i)) == t).count()
}

fn diverged(epoch: usize, detail: String, last_good: &Checkpoint) -> Error {
    Error::Diverged { epoch, detail, last_good: Some(Box::new(last_good.clone())) }
}

fn snapshot(net: &NetworkGraph, state: &OptimizerState) -> Checkpoint {
    let mut ckpt = Checkpoint::from_network(net);
    ckpt.counters = TrainCounters { epoch: state.epoch as u64, lr: state.lr };
    ckpt.velocity = Some(state.velocity.iter().map(|v| v.data().to_vec()).collect());
    ckpt
}

fn restore_state(ckpt: &Checkpoint, net: &NetworkGraph, fallback_lr: f64) -> Result<OptimizerState> {
    let mut state = OptimizerState::new(net.params(), fallback_lr);
    state.epoch = ckpt.counters.epoch as usize;
    state.lr = ckpt.counters.lr;
    if let Some(vel) = &ckpt.velocity {
        for (dst, src) in state.velocity.iter_mut().zip(vel) {
            if dst.len() != src.len() {
                return Err(Error::IncompatibleCheckpoint("velocity buffer sizes differ".into()));
            }
            dst.data_mut().copy_from_slice(src);
        }
    }
    Ok(state)
}

/// Mean order accuracy of `net` on `pairs`, dropout off.
pub fn pair_accuracy(net: &NetworkGraph, videos: &[PreparedVideo], pairs: &[InequationSample], batch_size: usize) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut correct = 0;
    for batch in pairs.chunks(batch_size.max(1)) {
        let mut tape = Tape::new();
        let probs = pair_forward(net, &mut tape, videos, batch, DropoutMode::Eval, &mut rng)?;
        let targets: Vec<usize> = batch.iter().map(|p| p.label).collect();
        correct += count_correct(tape.value(probs), &targets);
    }
    Ok(correct as f64 / pairs.len().max(1) as f64)
}

/// One optimizer step of the siamese network on explicit pair tensors,
/// running the two chains separately. Returns the batch loss.
#[allow(clippy::too_many_arguments)]
pub fn tcl_step(
    net: &mut NetworkGraph,
    state: &mut OptimizerState,
    momentum: f64,
    frames_a: &Tensor,
    frames_b: &Tensor,
    labels: &[usize],
    mode: DropoutMode,
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let mut tape = Tape::new();
    let (a, b) = (tape.input(frames_a.clone()), tape.input(frames_b.clone()));
    let (_, _, probs) = net.temporal_order_forward(&mut tape, a, b, mode, rng)?;
    let loss = tape.cross_entropy(probs, labels)?;
    let value = tape.value(loss).item() as f64;
    net.params_mut().zero_grads();
    tape.backward(loss, net.params_mut())?;
    sgd_nesterov_step(net.params_mut(), state, momentum)?;
    Ok(value)
}

/// Pretraining of the siamese network, one epoch at a time.
pub struct Pretrainer {
    cfg: TrainConfig,
    data: VideoDataset,
    videos: Vec<PreparedVideo>,
    net: NetworkGraph,
    state: OptimizerState,
    log: TrainLog,
}

impl Pretrainer {
    pub fn new(cfg: &TrainConfig, data: &VideoDataset, arch: &ArchConfig) -> Result<Self> {
        cfg.validate()?;
        let net = build_tcl_net(arch, derive_seed(cfg.seed, "init", 0))?;
        let state = OptimizerState::new(net.params(), cfg.base_lr);
        Self::with_parts(cfg, data, net, state, TrainLog::default())
    }

    /// Continues from a checkpoint written by [`Pretrainer::checkpoint`] and
    /// the log up to that point.
    pub fn resume(cfg: &TrainConfig, data: &VideoDataset, ckpt: &Checkpoint, log: TrainLog) -> Result<Self> {
        cfg.validate()?;
        if ckpt.topology != Topology::TemporalOrder {
            return Err(Error::IncompatibleCheckpoint("not a temporal-order checkpoint".into()));
        }
        let net = ckpt.to_network()?;
        let state = restore_state(ckpt, &net, cfg.base_lr)?;
        if log.records.len() != state.epoch {
            return Err(Error::Data(format!(
                "log has {} epochs but checkpoint has {}",
                log.records.len(),
                state.epoch
            )));
        }
        Self::with_parts(cfg, data, net, state, log)
    }

    fn with_parts(cfg: &TrainConfig, data: &VideoDataset, net: NetworkGraph, state: OptimizerState, log: TrainLog) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::Data("pretraining needs at least one video".into()));
        }
        let videos = prepare_videos(data, net.arch())?;
        Ok(Pretrainer { cfg: cfg.clone(), data: data.clone(), videos, net, state, log })
    }

    pub fn epoch(&self) -> usize {
        self.state.epoch
    }

    pub fn net(&self) -> &NetworkGraph {
        &self.net
    }

    pub fn log(&self) -> &TrainLog {
        &self.log
    }

    pub fn checkpoint(&self) -> Checkpoint {
        snapshot(&self.net, &self.state)
    }

    pub fn run_epoch(&mut self) -> Result<EpochRecord> {
        let epoch = self.state.epoch;
        let last_good = self.checkpoint();
        let mut data_rng = stream(self.cfg.seed, "pretrain-data", epoch as u64);
        let mut drop_rng = stream(self.cfg.seed, "pretrain-dropout", epoch as u64);
        let samples = sample_inequations(&self.data, self.cfg.n_ops, &mut data_rng)?;
        let (mut loss_sum, mut correct) = (0.0, 0);
        for batch in samples.chunks(self.cfg.batch_size) {
            let mut tape = Tape::new();
            let probs = pair_forward(&self.net, &mut tape, &self.videos, batch, DropoutMode::Train, &mut drop_rng)?;
            let targets: Vec<usize> = batch.iter().map(|p| p.label).collect();
            correct += count_correct(tape.value(probs), &targets);
            let loss = tape.cross_entropy(probs, &targets)?;
            let value = tape.value(loss).item() as f64;
            if !value.is_finite() {
                return Err(diverged(epoch, format!("loss is {value}"), &last_good));
            }
            loss_sum += value * batch.len() as f64;
            self.net.params_mut().zero_grads();
            tape.backward(loss, self.net.params_mut())?;
            sgd_nesterov_step(self.net.params_mut(), &mut self.state, self.cfg.momentum).map_err(|e| match e {
                Error::Diverged { detail, .. } => diverged(epoch, detail, &last_good),
                other => other,
            })?;
        }
        let rec = EpochRecord {
            epoch,
            lr: self.state.lr,
            loss: loss_sum / samples.len() as f64,
            accuracy: correct as f64 / samples.len() as f64,
        };
        self.log.push(rec);
        self.state.epoch += 1;
        Ok(rec)
    }

    /// Trains up to `cfg.epochs`, calling `on_epoch` after each epoch;
    /// `Break` stops early.
    pub fn run(mut self, mut on_epoch: impl FnMut(&Self, &EpochRecord) -> ControlFlow<()>) -> Result<(Checkpoint, TrainLog)> {
        while self.state.epoch < self.cfg.epochs {
            let rec = self.run_epoch()?;
            if on_epoch(&self, &rec).is_break() {
                break;
            }
        }
        Ok((self.checkpoint(), self.log))
    }
}

/// Trains a fresh siamese network for `cfg.epochs` epochs.
pub fn pretrain(cfg: &TrainConfig, data: &VideoDataset, arch: &ArchConfig) -> Result<(Checkpoint, TrainLog)> {
    Pretrainer::new(cfg, data, arch)?.run(|_, _| ControlFlow::Continue(()))
}

fn check_phase_net(net: &NetworkGraph, use_gru: bool) -> Result<()> {
    match (net.topology(), use_gru) {
        (Topology::RecurrentPhase { .. }, true) | (Topology::NaivePhase { .. }, false) => Ok(()),
        (t, _) => Err(Error::config(format!("network {t:?} does not match use_gru={use_gru}"))),
    }
}

/// Mean cross-entropy of one video, processed in chunks of `batch_size`
/// with hidden-state carryover and dropout off.
pub fn video_loss(net: &mut NetworkGraph, video: &PreparedVideo, batch_size: usize) -> Result<f64> {
    let targets = video.targets.as_ref().ok_or_else(|| Error::Data(format!("video {} is unlabeled", video.id)))?;
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    net.reset_hidden_state();
    let mut total = 0.0;
    let idx: Vec<usize> = (0..video.len()).collect();
    for chunk in batch_video_sequences(&idx, batch_size)? {
        let (s, e) = (chunk[0], chunk[chunk.len() - 1] + 1);
        let mut tape = Tape::new();
        let x = tape.input(video.slice(s, e));
        let probs = net.phase_forward(&mut tape, x, DropoutMode::Eval, &mut rng)?;
        let loss = tape.cross_entropy(probs, &targets[s..e])?;
        total += tape.value(loss).item() as f64 * (e - s) as f64;
    }
    Ok(total / video.len().max(1) as f64)
}

/// Fine-tunes a phase network in place; see [`finetune_with`].
pub fn finetune(cfg: &TrainConfig, data: &VideoDataset, net: &mut NetworkGraph, use_gru: bool) -> Result<(Checkpoint, TrainLog)> {
    finetune_with(cfg, data, net, use_gru, |_, _| Ok(()))
}

/// Per epoch: shuffle the videos, then run every video chunk by chunk from
/// a zero hidden state, carrying the detached state between chunks. The
/// learning rate decays by `lr_decay_alpha` after each epoch. `on_epoch`
/// sees the network after each epoch.
pub fn finetune_with(
    cfg: &TrainConfig,
    data: &VideoDataset,
    net: &mut NetworkGraph,
    use_gru: bool,
    mut on_epoch: impl FnMut(&EpochRecord, &mut NetworkGraph) -> Result<()>,
) -> Result<(Checkpoint, TrainLog)> {
    cfg.validate()?;
    check_phase_net(net, use_gru)?;
    let videos = prepare_videos(data, net.arch())?;
    for (v, (_, frames)) in videos.iter().zip(data.videos()) {
        if v.targets.is_none() {
            let f = frames.iter().find(|f| f.phase_label.is_none()).expect("some frame is unlabeled");
            return Err(Error::Data(format!("video {} frame {} is unlabeled", v.id, f.index)));
        }
    }
    let n_out = net.topology().n_outputs();
    if let Some(t) = videos.iter().flat_map(|v| v.targets.as_deref().unwrap()).find(|&&t| t >= n_out) {
        return Err(Error::InvalidLabel(format!("phase {} exceeds the network's {n_out} outputs", t + 1)));
    }
    let mut state = OptimizerState::new(net.params(), cfg.base_lr);
    let mut log = TrainLog::default();
    for epoch in 0..cfg.epochs {
        let last_good = snapshot(net, &state);
        let mut order: Vec<usize> = (0..videos.len()).collect();
        order.shuffle(&mut stream(cfg.seed, "finetune-order", epoch as u64));
        let mut drop_rng = stream(cfg.seed, "finetune-dropout", epoch as u64);
        let (mut loss_sum, mut correct, mut frames) = (0.0, 0, 0);
        for &v in &order {
            let video = &videos[v];
            let targets = video.targets.as_ref().unwrap();
            net.reset_hidden_state();
            let mut start = 0;
            while start < video.len() {
                let end = (start + cfg.batch_size).min(video.len());
                let mut tape = Tape::new();
                let x = tape.input(video.slice(start, end));
                let probs = net.phase_forward(&mut tape, x, DropoutMode::Train, &mut drop_rng)?;
                correct += count_correct(tape.value(probs), &targets[start..end]);
                let loss = tape.cross_entropy(probs, &targets[start..end])?;
                let value = tape.value(loss).item() as f64;
                if !value.is_finite() {
                    return Err(diverged(epoch, format!("loss is {value} on video {}", video.id), &last_good));
                }
                loss_sum += value * (end - start) as f64;
                frames += end - start;
                net.params_mut().zero_grads();
                tape.backward(loss, net.params_mut())?;
                apply_regularization(net.params_mut(), cfg.l1_weight, cfg.l2_weight);
                sgd_nesterov_step(net.params_mut(), &mut state, cfg.momentum).map_err(|e| match e {
                    Error::Diverged { detail, .. } => diverged(epoch, detail, &last_good),
                    other => other,
                })?;
                start = end;
            }
        }
        let rec = EpochRecord {
            epoch,
            lr: state.lr,
            loss: loss_sum / frames.max(1) as f64,
            accuracy: correct as f64 / frames.max(1) as f64,
        };
        log.push(rec);
        decay_learning_rate(&mut state, cfg.lr_decay_alpha);
        state.epoch += 1;
        net.reset_hidden_state();
        on_epoch(&rec, net)?;
    }
    net.reset_hidden_state();
    Ok((snapshot(net, &state), log))
}
