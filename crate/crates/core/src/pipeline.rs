//! The end-to-end stages behind the command-line tool. Each stage reads its
//! inputs from a [`Layout`], writes its outputs atomically, and returns the
//! paths it wrote.

use std::path::PathBuf;

use crate::config::{Layout, RunConfig};
use crate::dataset::{self, DataSet};
use crate::encoder::{self, EncoderParams};
use crate::error::{Error, Result};
use crate::eval::{self, PairSetting, VerificationReport};
use crate::fsutil;
use crate::probe::{self, ProbeReport};
use crate::trainer::{self, TrainHistory};

fn load(path: &std::path::Path) -> Result<DataSet> {
    dataset::load_manifest(path)
}

/// Writes the synthetic manifest (and the shifted companion when configured).
pub fn synth(config: &RunConfig, layout: &Layout) -> Result<Vec<PathBuf>> {
    let synthetic = config.synthetic()?;
    let data = dataset::generate_synthetic(&synthetic.in_distribution())?;
    let mut written = Vec::new();
    dataset::save_manifest(&data, &layout.data())?;
    written.push(layout.data());
    if let Some(ood_cfg) = synthetic.out_of_distribution() {
        let ood = dataset::generate_synthetic(&ood_cfg)?;
        dataset::save_manifest(&ood, &layout.ood())?;
        written.push(layout.ood());
    }
    Ok(written)
}

/// Splits the manifest into patient-disjoint train/validation/test manifests.
pub fn split(config: &RunConfig, layout: &Layout) -> Result<Vec<PathBuf>> {
    let data = load(&layout.data())?;
    let (train, val, test) = dataset::split_by_patient(&data, &config.split)?;
    let mut written = Vec::new();
    for (ds, path) in [(train, layout.train()), (val, layout.val()), (test, layout.test())] {
        dataset::save_manifest(&ds, &path)?;
        written.push(path);
    }
    Ok(written)
}

pub fn initial_params(config: &RunConfig, input_dim: usize) -> Result<EncoderParams> {
    EncoderParams::init(&config.encoder.for_input(input_dim))
}

/// Trains the encoder; writes the checkpoint and the per-epoch history CSV.
pub fn train(config: &RunConfig, layout: &Layout) -> Result<(EncoderParams, TrainHistory, Vec<PathBuf>)> {
    let train_set = load(&layout.train())?;
    let val_set = load(&layout.val())?;
    let init = initial_params(config, train_set.ambient_dim())?;
    let (params, history) = trainer::train(&config.train, &init, &train_set, &val_set)?;
    if history.epochs() != config.train.epochs {
        return Err(Error::InvalidDataset(format!(
            "history holds {} epochs, expected {}",
            history.epochs(),
            config.train.epochs
        )));
    }
    encoder::save_checkpoint(&params, &layout.checkpoint())?;
    fsutil::write_atomic(&layout.history(), history.to_csv().as_bytes())?;
    Ok((params, history, vec![layout.checkpoint(), layout.history()]))
}

fn check_report(r: &VerificationReport) -> Result<()> {
    let unit = |v: f64| (0.0..=1.0).contains(&v);
    let ok = unit(r.auroc)
        && unit(r.eer)
        && unit(r.test_accuracy)
        && unit(r.validation_accuracy)
        && r.threshold.is_finite()
        && r.tpr_at_fpr.values().all(|&v| unit(v))
        && r.n_pos > 0
        && r.n_neg > 0;
    if ok {
        Ok(())
    } else {
        Err(Error::InvalidDataset(format!("report for {} failed validation: {r:?}", r.setting)))
    }
}

/// Evaluates the checkpoint on the test manifest under every configured
/// setting; writes the JSON report array and one ROC CSV per setting.
pub fn evaluate(config: &RunConfig, layout: &Layout) -> Result<(Vec<VerificationReport>, Vec<PathBuf>)> {
    let params = encoder::load_checkpoint(&layout.checkpoint())?;
    let test = load(&layout.test())?;
    let val = load(&layout.val())?;
    let settings = config.eval.pair_settings()?;
    let ood = if settings.contains(&PairSetting::Ood) {
        Some(load(&layout.ood())?)
    } else {
        None
    };
    let reports = eval::evaluate(&params, &test, &val, ood.as_ref(), &config.eval)?;
    for r in &reports {
        check_report(r)?;
    }
    let mut written = Vec::new();
    for r in &reports {
        let path = layout.roc_csv(&r.setting);
        fsutil::write_atomic(&path, r.roc.to_csv().as_bytes())?;
        written.push(path);
    }
    let mut json = serde_json::to_vec_pretty(&reports)?;
    json.push(b'\n');
    fsutil::write_atomic(&layout.eval_report(), &json)?;
    written.push(layout.eval_report());
    Ok((reports, written))
}

/// Trains a linear probe on frozen train-split embeddings and reports on the
/// patient-disjoint test split.
pub fn probe(config: &RunConfig, layout: &Layout) -> Result<(ProbeReport, PathBuf)> {
    let probe_cfg = config.probe()?;
    let params = encoder::load_checkpoint(&layout.checkpoint())?;
    let train_set = load(&layout.train())?;
    let test = load(&layout.test())?;
    test.attribute_kind(&probe_cfg.task_attribute)?;
    let (_, report) = probe::run_probe(&params, &train_set, &test, probe_cfg)?;
    let path = layout.probe_report(&report.task);
    let mut json = serde_json::to_vec_pretty(&report)?;
    json.push(b'\n');
    fsutil::write_atomic(&path, &json)?;
    Ok((report, path))
}
