use std::fs;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};

use tempco::datapipe::{ingest_frames, read_annotations, synthetic_dataset, write_dataset, VideoDataset, MANIFEST_FILE};
use tempco::evaluator::{compute_metrics, fold_csv, run_loso, summary_csv, write_loso_reports, Variant};
use tempco::gradcheck::{run_gradcheck, GradcheckOptions, DIFFERENTIABLE_OPS};
use tempco::netarch::{transfer_pretrained, ArchConfig, Checkpoint};
use tempco::trainer::{csv_line, derive_seed, finetune_with, Pretrainer, Task, TrainLog};
use tempco::{Error, Result};

use crate::config::RunConfig;
use crate::{ArchPreset, Command, Common, Failure, NetFlag, TrainFlags};

pub const CHECKPOINT_FILE: &str = "checkpoint.tcln";
pub const MODEL_FILE: &str = "model.tcln";
pub const LAST_GOOD_FILE: &str = "last_good.tcln";
pub const LOG_FILE: &str = "log.csv";

pub fn run(command: Command) -> std::result::Result<(), Failure> {
    match command {
        Command::Synth { common, videos, frames, phases, height, width, ambiguity, force } => {
            let mut cfg = RunConfig::load(Task::Pretrain, common.config.as_deref())?;
            apply_common(&mut cfg, &common);
            let s = &mut cfg.synth;
            set(&mut s.videos, videos);
            set(&mut s.n_frames, frames);
            set(&mut s.n_phases, phases);
            set(&mut s.height, height);
            set(&mut s.width, width);
            set(&mut s.ambiguity, ambiguity);
            synth(&cfg, force)?;
        }
        Command::Pretrain { common, train, resume, static_threshold, checkpoint_every } => {
            let mut cfg = RunConfig::load(Task::Pretrain, common.config.as_deref())?;
            apply_common(&mut cfg, &common);
            apply_train(&mut cfg, &train);
            if resume.is_some() {
                cfg.resume = resume;
            }
            set(&mut cfg.static_threshold, static_threshold);
            set(&mut cfg.checkpoint_every, checkpoint_every);
            pretrain(&cfg)?;
        }
        Command::Finetune { common, train, net, pretrained } => {
            let cfg = phase_config(&common, &train, net, pretrained)?;
            finetune(&cfg)?;
        }
        Command::Loso { common, train, net, pretrained } => {
            let cfg = phase_config(&common, &train, net, pretrained)?;
            loso(&cfg)?;
        }
        Command::Evaluate { predictions, annotations, phases, out } => {
            evaluate(&predictions, &annotations, phases, out.as_deref())?;
        }
        Command::Gradcheck { seed, no_networks, inject_fault } => gradcheck(seed, !no_networks, inject_fault)?,
    }
    Ok(())
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn apply_common(cfg: &mut RunConfig, c: &Common) {
    if c.out.is_some() {
        cfg.out = c.out.clone();
    }
    set(&mut cfg.train.seed, c.seed);
}

fn apply_train(cfg: &mut RunConfig, t: &TrainFlags) {
    if t.data.is_some() {
        cfg.data = t.data.clone();
    }
    match t.arch {
        Some(ArchPreset::Full) => cfg.arch = ArchConfig::default(),
        Some(ArchPreset::Desk) => cfg.arch = ArchConfig::desk(24, 32),
        None => {}
    }
    set(&mut cfg.train.epochs, t.epochs);
    set(&mut cfg.train.base_lr, t.lr);
    set(&mut cfg.train.momentum, t.momentum);
    set(&mut cfg.train.batch_size, t.batch_size);
}

fn phase_config(common: &Common, train: &TrainFlags, net: Option<NetFlag>, pretrained: Option<PathBuf>) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(Task::Finetune, common.config.as_deref())?;
    apply_common(&mut cfg, common);
    apply_train(&mut cfg, train);
    match net {
        Some(NetFlag::Naive) => cfg.net = Variant::Naive,
        Some(NetFlag::Tempconet) => cfg.net = Variant::TempCoNet,
        None => {}
    }
    if pretrained.is_some() {
        cfg.pretrained = pretrained;
    }
    Ok(cfg)
}

/// Validates, then writes the snapshot before any work starts.
fn start(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.validate()?;
    let out = cfg.out_dir()?.to_path_buf();
    cfg.write_snapshot()?;
    Ok(out)
}

fn load_data(path: &Path) -> Result<VideoDataset> {
    if path.is_dir() {
        ingest_frames(path.join(MANIFEST_FILE))
    } else {
        ingest_frames(path)
    }
}

fn save_last_good(e: Error, out: &Path) -> Error {
    if let Error::Diverged { last_good: Some(ckpt), .. } = &e {
        let path = out.join(LAST_GOOD_FILE);
        match ckpt.save(&path) {
            Ok(()) => eprintln!("last good checkpoint: {}", path.display()),
            Err(err) => eprintln!("could not save last good checkpoint: {err}"),
        }
    }
    e
}

fn synth(cfg: &RunConfig, force: bool) -> Result<()> {
    cfg.validate()?;
    let out = cfg.out_dir()?;
    if !force && fs::read_dir(out).is_ok_and(|mut d| d.next().is_some()) {
        return Err(Error::InvalidConfig(format!("{} is not empty; pass --force to overwrite", out.display())));
    }
    let synth = cfg.synth.synth_config();
    synth.validate()?;
    cfg.write_snapshot()?;
    let data = synthetic_dataset(cfg.train.seed, cfg.synth.videos, &synth)?;
    let manifest = write_dataset(&data, out)?;
    println!("{} videos, {} frames -> {}", data.len(), data.n_frames(), manifest.display());
    Ok(())
}

fn pretrain(cfg: &RunConfig) -> Result<()> {
    let out = start(cfg)?;
    let t = &cfg.train;
    println!(
        "pretrain: lr {} momentum {} epochs {} batch {} ops {} seed {}",
        t.base_lr, t.momentum, t.epochs, t.batch_size, t.n_ops, t.seed
    );
    let raw = load_data(cfg.data_path()?)?;
    let data = raw.filtered(cfg.static_threshold);
    if data.n_frames() < raw.n_frames() {
        println!("static filter kept {} of {} frames", data.n_frames(), raw.n_frames());
    }
    let log_path = out.join(LOG_FILE);
    let trainer = match &cfg.resume {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            let mut log = TrainLog::read_csv(&log_path)?;
            log.records.truncate(ckpt.counters.epoch as usize);
            println!("resuming at epoch {}", ckpt.counters.epoch);
            Pretrainer::resume(t, &data, &ckpt, log)?
        }
        None => Pretrainer::new(t, &data, &cfg.arch)?,
    };
    let ckpt_path = out.join(CHECKPOINT_FILE);
    let mut write_err = None;
    let result = trainer.run(|p, rec| {
        println!("{}", csv_line(rec));
        if (rec.epoch + 1) % cfg.checkpoint_every == 0 {
            if let Err(e) = p.checkpoint().save(&ckpt_path).and_then(|_| p.log().write_csv(&log_path)) {
                write_err = Some(e);
                return ControlFlow::Break(());
            }
        }
        ControlFlow::Continue(())
    });
    let (ckpt, log) = result.map_err(|e| save_last_good(e, &out))?;
    if let Some(e) = write_err {
        return Err(e);
    }
    ckpt.save(&ckpt_path)?;
    log.write_csv(&log_path)?;
    println!("checkpoint: {}", ckpt_path.display());
    Ok(())
}

fn n_phases(data: &VideoDataset) -> Result<usize> {
    data.n_phases().ok_or_else(|| Error::Data("dataset has no phase labels".into()))
}

fn finetune(cfg: &RunConfig) -> Result<()> {
    let out = start(cfg)?;
    let t = &cfg.train;
    println!(
        "finetune {}: lr {} momentum {} decay {} epochs {} batch {} seed {}",
        cfg.net.name(),
        t.base_lr,
        t.momentum,
        t.lr_decay_alpha,
        t.epochs,
        t.batch_size,
        t.seed
    );
    let data = load_data(cfg.data_path()?)?;
    let mut net = cfg.net.build(&cfg.arch, n_phases(&data)?, derive_seed(t.seed, "init", 0))?;
    if let Some(path) = &cfg.pretrained {
        transfer_pretrained(&Checkpoint::load(path)?, &mut net)?;
    }
    let (ckpt, log) = finetune_with(t, &data, &mut net, cfg.net.uses_gru(), |rec, _| {
        println!("{}", csv_line(rec));
        Ok(())
    })
    .map_err(|e| save_last_good(e, &out))?;
    ckpt.save(out.join(MODEL_FILE))?;
    log.write_csv(out.join(LOG_FILE))?;
    println!("model: {}", out.join(MODEL_FILE).display());
    Ok(())
}

fn loso(cfg: &RunConfig) -> Result<()> {
    let out = start(cfg)?;
    let data = load_data(cfg.data_path()?)?;
    let pretrained = cfg.pretrained.as_ref().map(Checkpoint::load).transpose()?;
    println!("loso {}: {} folds, {} epochs per fold", cfg.net.name(), data.len(), cfg.train.epochs);
    let outcome = run_loso(&data, &cfg.arch, &cfg.train, pretrained.as_ref(), cfg.net).map_err(|e| save_last_good(e, &out))?;
    write_loso_reports(&outcome, &data, &out)?;
    print!("{}", summary_csv(&outcome));
    Ok(())
}

fn evaluate(predictions: &Path, annotations: &Path, phases: usize, out: Option<&Path>) -> Result<()> {
    let pred = read_annotations(predictions)?;
    let truth = read_annotations(annotations)?;
    let by_index: std::collections::HashMap<u64, usize> = pred.into_iter().collect();
    let mut p = Vec::with_capacity(truth.len());
    for (index, _) in &truth {
        let Some(&label) = by_index.get(index) else {
            return Err(Error::Data(format!("no prediction for frame {index}")));
        };
        p.push(label);
    }
    let t: Vec<usize> = truth.iter().map(|&(_, l)| l).collect();
    let id = annotations.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
    let report = compute_metrics(&p, &t, phases)?.with_video(id);
    let csv = fold_csv(&report);
    print!("{csv}");
    if let Some(path) = out {
        fs::write(path, csv)?;
    }
    Ok(())
}

fn gradcheck(seed: u64, networks: bool, fault: Option<String>) -> std::result::Result<(), Failure> {
    let fault = match fault {
        None => None,
        Some(name) => Some(
            DIFFERENTIABLE_OPS
                .into_iter()
                .find(|k| k.name() == name)
                .ok_or_else(|| Error::InvalidConfig(format!("unknown op `{name}`")))?,
        ),
    };
    let report = run_gradcheck(&GradcheckOptions { seed, networks, fault, ..Default::default() })?;
    print!("{}", report.to_text());
    match report.first_failure() {
        None => Ok(()),
        Some(c) => {
            eprintln!("first failure: {} max relative error {:.3e} (tolerance {:.0e})", c.name, c.max_rel_error, c.tolerance);
            Err(Failure::ChecksFailed)
        }
    }
}
