//! The five pipeline commands.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use gdnet_core::eval::{evaluate_pairs, write_report};
use gdnet_core::imaging::{
    degrade_optical, generate_toy_pair, read_pgm16, read_ppm8, write_pgm16, write_ppm8, Attribute,
    DatasetManifest, DegradationMode, ManifestRecord,
};
use gdnet_core::model::{GDNet, GDNetConfig};
use gdnet_core::train::{
    load_checkpoint, loss_log_csv, read_checkpoint_config, run_stage, save_checkpoint, LossRecord, PairLoader,
    StageId, StageSpec, TrainingPair,
};
use gdnet_core::{ParamStore, SeededRng};
use log::info;
use rayon::prelude::*;

use crate::config::{RunConfig, StageSelection};

pub const MANIFEST_NAME: &str = "manifest.jsonl";
pub const DEGRADED_MANIFEST_NAME: &str = "degraded.jsonl";

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// Unique per-record seed derived from the run seed.
fn record_seed(seed: u64, i: usize) -> u64 {
    SeededRng::new(seed).fork(i as u64).next_u64()
}

/// Clean toy pairs under `out/clean` and `out/thermal`, plus a manifest
/// tagging every record `normal`.
pub fn synth(cfg: &RunConfig) -> Result<()> {
    let out = cfg.require("out", &cfg.out)?;
    let n = cfg.n.unwrap_or(12);
    let size = cfg.size.unwrap_or(64);
    let (scale, mode, seed) = (cfg.scale(), cfg.mode.unwrap_or(DegradationMode::BI), cfg.seed());
    if !size.is_multiple_of(scale) || !(size / scale).is_multiple_of(8) {
        bail!("size {size} must be a multiple of 8 * scale ({})", 8 * scale);
    }
    create_dir(&out.join("clean"))?;
    create_dir(&out.join("thermal"))?;
    let records = (0..n)
        .into_par_iter()
        .map(|i| -> Result<ManifestRecord> {
            let id = format!("toy_{i:04}");
            let rec_seed = record_seed(seed, i);
            let (optical, thermal) = generate_toy_pair(&mut SeededRng::new(rec_seed), size, size)?;
            let rec = ManifestRecord {
                optical: PathBuf::from(format!("clean/{id}.ppm")),
                thermal: PathBuf::from(format!("thermal/{id}.pgm")),
                attr: Attribute::Normal,
                mode,
                scale,
                seed: rec_seed,
            };
            write_ppm8(out.join(&rec.optical), &optical)?;
            write_pgm16(out.join(&rec.thermal), &thermal)?;
            Ok(rec)
        })
        .collect::<Result<Vec<_>>>()?;
    let manifest = DatasetManifest::new(out, records);
    manifest.save(out.join(MANIFEST_NAME))?;
    info!("wrote {n} pairs of {size}x{size} to {}", out.display());
    Ok(())
}

/// Attribute tags in a 1:1:1 ratio over a seeded permutation of the records.
pub fn balanced_attributes(n: usize, seed: u64) -> Vec<Attribute> {
    let mut order: Vec<usize> = (0..n).collect();
    SeededRng::new(seed).fork(0xa77).shuffle(&mut order);
    let mut attrs = vec![Attribute::Normal; n];
    for (k, &i) in order.iter().enumerate() {
        attrs[i] = Attribute::ALL[k % 3];
    }
    attrs
}

/// Tag records 1:1:1, degrade each optical image for its tag into
/// `<root>/optical/`, and write the degraded manifest (by default
/// `<root>/degraded.jsonl`). Always reads the input manifest's optical
/// files, so re-running reproduces the same outputs.
pub fn degrade(cfg: &RunConfig) -> Result<()> {
    let path = cfg.require("manifest", &cfg.manifest)?;
    let manifest = DatasetManifest::load(path)?;
    manifest.validate()?;
    let seed = cfg.seed();
    let attrs = balanced_attributes(manifest.records.len(), seed);
    create_dir(&manifest.root.join("optical"))?;
    let records = manifest
        .records
        .par_iter()
        .zip(attrs)
        .map(|(r, attr)| -> Result<ManifestRecord> {
            let mut rec = r.clone();
            rec.attr = attr;
            rec.scale = cfg.scale.unwrap_or(r.scale);
            rec.mode = cfg.mode.unwrap_or(r.mode);
            let hr = read_pgm16(manifest.resolve(&r.thermal))?;
            if hr.height % rec.scale != 0 || hr.width % rec.scale != 0 {
                bail!("{}: {}x{} is not divisible by scale {}", r.id(), hr.height, hr.width, rec.scale);
            }
            let clean = read_ppm8(manifest.resolve(&r.optical))?;
            let mut rng = SeededRng::new(seed).fork(r.seed);
            let degraded = degrade_optical(&clean, attr, &mut rng)?;
            rec.optical = PathBuf::from(format!("optical/{}.ppm", r.id()));
            write_ppm8(manifest.resolve(&rec.optical), &degraded)?;
            Ok(rec)
        })
        .collect::<Result<Vec<_>>>()?;
    let out = cfg.out.clone().unwrap_or_else(|| manifest.root.join(DEGRADED_MANIFEST_NAME));
    let counts: Vec<String> = Attribute::ALL
        .iter()
        .map(|a| format!("{a} {}", records.iter().filter(|r| r.attr == *a).count()))
        .collect();
    DatasetManifest::new(&manifest.root, records).save(&out)?;
    info!("degraded manifest {} ({})", out.display(), counts.join(", "));
    Ok(())
}

fn config_json(model: &GDNetConfig) -> String {
    serde_json::to_string(model).expect("serializable config")
}

/// Build the model described by a checkpoint and restore all parameters.
fn load_model(path: &Path) -> Result<(GDNet, ParamStore<f32>)> {
    let model: GDNetConfig = serde_json::from_str(&read_checkpoint_config(path)?)
        .with_context(|| format!("model config in checkpoint {}", path.display()))?;
    let mut store = ParamStore::new();
    let net = GDNet::new(model, &mut store, &mut SeededRng::new(0))?;
    load_checkpoint(path, &mut store, None)?;
    Ok((net, store))
}

/// Run the selected stages. A missing checkpoint starts from a fresh
/// initialization (stage 1 or `all` only); an existing one is resumed and
/// the loss log is appended to.
pub fn train(cfg: &RunConfig) -> Result<()> {
    let manifest_path = cfg.require("manifest", &cfg.manifest)?;
    let ckpt = cfg.require("checkpoint", &cfg.checkpoint)?.to_path_buf();
    let stages = cfg.stage_selection()?;
    let tc = cfg.train();
    let log_path = cfg
        .loss_log
        .clone()
        .unwrap_or_else(|| ckpt.with_extension("loss.csv"));

    let (net, mut store, mut log) = if ckpt.exists() {
        let (net, store) = load_model(&ckpt)?;
        if (cfg.preset.is_some() || cfg.scale.is_some()) && net.config != cfg.model() {
            bail!(
                "checkpoint {} holds a different model ({}) than the configured preset/scale",
                ckpt.display(),
                config_json(&net.config)
            );
        }
        let prior = fs::read_to_string(&log_path).unwrap_or_default();
        info!("resuming from {}", ckpt.display());
        (net, store, prior)
    } else {
        let fresh = matches!(stages, StageSelection::All | StageSelection::One(StageId::Stage1));
        if !fresh {
            bail!(
                "missing checkpoint {}: stage {} resumes from an earlier stage",
                ckpt.display(),
                cfg.stage.as_deref().unwrap_or("all")
            );
        }
        let mut store = ParamStore::new();
        let net = GDNet::new(cfg.model(), &mut store, &mut SeededRng::new(tc.seed))?;
        (net, store, String::new())
    };
    tc.validate(net.config.window)?;
    let manifest = DatasetManifest::load(manifest_path)?;
    manifest.validate()?;
    if let Some(r) = manifest.records.iter().find(|r| r.scale != net.config.scale) {
        bail!("record {} has scale {}, model scale is {}", r.id(), r.scale, net.config.scale);
    }
    for p in [&ckpt, &log_path] {
        if let Some(dir) = p.parent().filter(|d| !d.as_os_str().is_empty()) {
            create_dir(dir)?;
        }
    }
    let mut loader = PairLoader::from_manifest(manifest);
    for id in stages.stages() {
        let spec = StageSpec::new(id, &tc);
        let records: Vec<LossRecord> = run_stage(&spec, &mut loader, &net, &mut store, &tc, tc.steps)?;
        let csv = loss_log_csv(&records);
        if log.is_empty() {
            log = csv;
        } else {
            // drop the repeated header
            log.push_str(csv.split_once('\n').map_or("", |(_, body)| body));
        }
        fs::write(&log_path, &log).with_context(|| format!("writing {}", log_path.display()))?;
        save_checkpoint(&ckpt, &store, &config_json(&net.config))?;
        let last = records.last().map_or(f64::NAN, |r| r.loss);
        info!("stage {id}: {} steps, final loss {last:.5}, saved {}", records.len(), ckpt.display());
    }
    Ok(())
}

/// Super-resolve every manifest record into `out/{id}.pgm`.
pub fn infer(cfg: &RunConfig) -> Result<()> {
    let ckpt = cfg.require("checkpoint", &cfg.checkpoint)?;
    let manifest_path = cfg.require("manifest", &cfg.manifest)?;
    let out = cfg.require("out", &cfg.out)?;
    if !ckpt.is_file() {
        bail!("missing checkpoint {} (run train first)", ckpt.display());
    }
    let mode = cfg.stage_mode()?;
    let (net, store) = load_model(ckpt)?;
    let manifest = DatasetManifest::load(manifest_path)?;
    manifest.validate()?;
    create_dir(out)?;
    manifest.records.par_iter().try_for_each(|r| -> Result<()> {
        let optical = read_ppm8(manifest.resolve(&r.optical))?;
        let hr = read_pgm16(manifest.resolve(&r.thermal))?;
        let pair = TrainingPair::from_hr(r.id(), r.attr, optical, hr, r.scale, r.mode)?;
        let sr = net.super_resolve(&store, &pair.lr, &pair.optical, mode)?;
        write_pgm16(out.join(format!("{}.pgm", pair.id)), &sr)?;
        Ok(())
    })?;
    info!("wrote {} SR images to {}", manifest.records.len(), out.display());
    Ok(())
}

/// Write the metric CSV, print the summary table, and fail when any SR
/// file is missing.
pub fn eval(cfg: &RunConfig) -> Result<()> {
    let manifest = DatasetManifest::load(cfg.require("manifest", &cfg.manifest)?)?;
    let sr = cfg.require("sr", &cfg.sr)?;
    let report_path = cfg.require("report", &cfg.report)?;
    let report = evaluate_pairs(&manifest, sr)?;
    write_report(&report, report_path)?;
    print!("{}", report.to_table());
    let missing = report.missing();
    if !missing.is_empty() {
        bail!("{} of {} records have no SR image in {}", missing.len(), report.rows.len(), sr.display());
    }
    Ok(())
}
