//! Small end-to-end training runs on procedural pairs.

use gdnet_core::eval::{bicubic_baseline, psnr};
use gdnet_core::imaging::{degrade_optical, generate_toy_pair, Attribute, DegradationMode};
use gdnet_core::model::{groups, GDNet, GDNetConfig, StageMode};
use gdnet_core::train::{run_stage, PairLoader, StageId, StageSpec, TrainConfig, TrainingPair};
use gdnet_core::{ParamStore, SeededRng};

pub const SCALE: usize = 4;

/// `per_attr` pairs of each listed attribute, optical degraded per tag.
pub fn toy_pairs(seed: u64, size: usize, attrs: &[Attribute], per_attr: usize) -> Vec<TrainingPair> {
    let mut rng = SeededRng::new(seed);
    let mut pairs = Vec::new();
    for &attr in attrs {
        for i in 0..per_attr {
            let (optical, hr) = generate_toy_pair(&mut rng, size, size).unwrap();
            let optical = degrade_optical(&optical, attr, &mut rng).unwrap();
            let id = format!("{attr}_{seed}_{i:03}");
            pairs.push(TrainingPair::from_hr(id, attr, optical, hr, SCALE, DegradationMode::BI).unwrap());
        }
    }
    pairs
}

pub fn tiny_net(seed: u64) -> (GDNet, ParamStore<f32>) {
    let mut store = ParamStore::new();
    let net = GDNet::new(GDNetConfig::tiny(SCALE), &mut store, &mut SeededRng::new(seed)).unwrap();
    (net, store)
}

/// Mean SR and bicubic PSNR over `pairs` in `mode`.
pub fn mean_psnr(net: &GDNet, store: &ParamStore<f32>, pairs: &[TrainingPair], mode: StageMode) -> (f64, f64) {
    let (mut sr, mut bic) = (0.0, 0.0);
    for p in pairs {
        let out = net.super_resolve(store, &p.lr, &p.optical, mode).unwrap();
        sr += psnr(&out, &p.hr).unwrap();
        bic += psnr(&bicubic_baseline(&p.hr, SCALE, DegradationMode::BI).unwrap(), &p.hr).unwrap();
    }
    (sr / pairs.len() as f64, bic / pairs.len() as f64)
}

pub struct OverfitOutcome {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub sr_psnr: f64,
    pub bicubic_psnr: f64,
    pub seconds: f64,
}

pub const OVERFIT_PAIRS: usize = 4;
pub const OVERFIT_STEPS: usize = 500;
/// Loss endpoints are averaged over this many steps to smooth batch noise.
pub const LOSS_WINDOW: usize = 10;

/// Stage-1 training on four 32x32 pairs; each 8x8 LR patch (one attention
/// window) is a whole image, so every step sees two complete pairs.
pub fn overfit() -> OverfitOutcome {
    let pairs = toy_pairs(1, 32, &[Attribute::Normal], OVERFIT_PAIRS);
    let (net, mut store) = tiny_net(2);
    let cfg = TrainConfig {
        seed: 3,
        steps: OVERFIT_STEPS,
        batch_size: 2,
        patch: 8,
        base_lr: 2e-3,
        halve_every: 250,
        stage3_train_head: false,
    };
    let mut loader = PairLoader::from_pairs(pairs.clone());
    let start = std::time::Instant::now();
    let spec = StageSpec::new(StageId::Stage1, &cfg);
    let log = run_stage(&spec, &mut loader, &net, &mut store, &cfg, OVERFIT_STEPS).unwrap();
    let seconds = start.elapsed().as_secs_f64();
    let avg = |r: &[gdnet_core::train::LossRecord]| r.iter().map(|r| r.loss).sum::<f64>() / r.len() as f64;
    let (sr_psnr, bicubic_psnr) = mean_psnr(&net, &store, &pairs, StageMode::Stage1);
    OverfitOutcome {
        initial_loss: avg(&log[..LOSS_WINDOW]),
        final_loss: avg(&log[log.len() - LOSS_WINDOW..]),
        sr_psnr,
        bicubic_psnr,
        seconds,
    }
}

pub const AUDIT_STEPS: usize = 50;

/// Stage 2-NC then stage 3; frozen group checksums must not move and
/// stage 2 must only read normal-tagged records.
pub fn freezing_audit() -> Result<String, String> {
    let pairs = toy_pairs(10, 32, &Attribute::ALL, 3);
    let (net, mut store) = tiny_net(11);
    let cfg = TrainConfig {
        seed: 12,
        steps: AUDIT_STEPS,
        batch_size: 2,
        patch: 8,
        base_lr: 1e-3,
        halve_every: 200,
        stage3_train_head: false,
    };
    let mut loader = PairLoader::from_pairs(pairs);
    for id in [StageId::Stage2(Attribute::Normal), StageId::Stage3] {
        let spec = StageSpec::new(id, &cfg);
        let trained = |g: &str| spec.lr_multiplier(g) > 0.0;
        let before: Vec<u64> = groups::ALL.iter().map(|g| store.checksum(g)).collect();
        loader.clear_reads();
        run_stage(&spec, &mut loader, &net, &mut store, &cfg, AUDIT_STEPS).map_err(|e| e.to_string())?;
        for (g, b) in groups::ALL.iter().zip(&before) {
            let moved = store.checksum(g) != *b;
            if trained(g) && !moved {
                return Err(format!("stage {id}: trainable group {g} never changed"));
            }
            if !trained(g) && moved {
                return Err(format!("stage {id}: frozen group {g} changed"));
            }
        }
        if let Some(a) = spec.filter {
            if let Some((rid, tag)) = loader.reads().iter().find(|(_, t)| *t != a) {
                return Err(format!("stage {id} read {rid} tagged {tag}"));
            }
        }
        if loader.reads().is_empty() {
            return Err(format!("stage {id} read no records"));
        }
    }
    Ok(format!("{AUDIT_STEPS} steps each of stages 2nc and 3"))
}

pub const ATTR_TRAIN_PER_ATTR: usize = 20;
pub const ATTR_SIZE: usize = 32;
/// Steps per stage in schedule order (1, 2nc, 2li, 2fo, 3); 2,000 in total.
pub const ATTR_STAGE_STEPS: [usize; 5] = [800, 300, 300, 300, 300];

/// `psnr[subset][branch]`, subsets and branches in `Attribute::ALL` order,
/// on each attribute's training subset after the full three-stage schedule.
pub fn attribute_branches() -> [[f64; 3]; 3] {
    let train = toy_pairs(20, ATTR_SIZE, &Attribute::ALL, ATTR_TRAIN_PER_ATTR);
    let (net, mut store) = tiny_net(22);
    let cfg = TrainConfig {
        seed: 23,
        steps: 0,
        batch_size: 2,
        patch: 8,
        base_lr: 2e-3,
        halve_every: 250,
        stage3_train_head: false,
    };
    let mut loader = PairLoader::from_pairs(train.clone());
    for (id, steps) in StageId::SCHEDULE.into_iter().zip(ATTR_STAGE_STEPS) {
        run_stage(&StageSpec::new(id, &cfg), &mut loader, &net, &mut store, &cfg, steps).unwrap();
    }
    let mut table = [[0.0; 3]; 3];
    for (i, subset) in Attribute::ALL.into_iter().enumerate() {
        let pairs: Vec<_> = train.iter().filter(|p| p.attr == subset).cloned().collect();
        for (j, branch) in Attribute::ALL.into_iter().enumerate() {
            table[i][j] = mean_psnr(&net, &store, &pairs, StageMode::Branch(branch)).0;
        }
    }
    table
}
