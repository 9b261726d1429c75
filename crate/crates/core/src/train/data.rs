//! Training pairs, an instrumented loader and deterministic crops.

use crate::error::{ensure, Error, Result};
use crate::imaging::{
    degrade_thermal, planes_to_batch, read_pgm16, read_ppm8, rgb_to_batch, Attribute, DatasetManifest,
    DegradationMode, ImagePlane, ImageRGB,
};
use crate::numcore::{Scalar, SeededRng, Tensor};

/// One aligned example: LR thermal, (degraded) HR optical, HR thermal.
#[derive(Clone, Debug)]
pub struct TrainingPair {
    pub id: String,
    pub attr: Attribute,
    pub lr: ImagePlane,
    pub optical: ImageRGB,
    pub hr: ImagePlane,
}

impl TrainingPair {
    /// Build from HR images; the LR plane is derived with `degrade_thermal`.
    pub fn from_hr(
        id: impl Into<String>,
        attr: Attribute,
        optical: ImageRGB,
        hr: ImagePlane,
        scale: usize,
        mode: DegradationMode,
    ) -> Result<Self> {
        ensure!(
            optical.height == hr.height && optical.width == hr.width,
            "training_pair",
            "optical {}x{} and thermal {}x{} differ",
            optical.height,
            optical.width,
            hr.height,
            hr.width
        );
        let lr = degrade_thermal(&hr, scale, mode)?;
        Ok(TrainingPair {
            id: id.into(),
            attr,
            lr,
            optical,
            hr,
        })
    }

    pub fn scale(&self) -> usize {
        self.hr.height / self.lr.height
    }
}

enum Source {
    Manifest(DatasetManifest),
    Memory(Vec<TrainingPair>),
}

/// Pair loader that logs every record it reads, so data routing can be
/// audited.
pub struct PairLoader {
    source: Source,
    meta: Vec<(String, Attribute)>,
    cache: Vec<Option<TrainingPair>>,
    reads: Vec<(String, Attribute)>,
}

impl PairLoader {
    pub fn from_manifest(manifest: DatasetManifest) -> Self {
        let meta: Vec<_> = manifest.records.iter().map(|r| (r.id(), r.attr)).collect();
        let n = meta.len();
        PairLoader {
            source: Source::Manifest(manifest),
            meta,
            cache: vec![None; n],
            reads: Vec::new(),
        }
    }

    pub fn from_pairs(pairs: Vec<TrainingPair>) -> Self {
        let meta: Vec<_> = pairs.iter().map(|p| (p.id.clone(), p.attr)).collect();
        let n = meta.len();
        PairLoader {
            source: Source::Memory(pairs),
            meta,
            cache: vec![None; n],
            reads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    /// Record indices whose tag matches `filter` (all when `None`), using
    /// metadata only.
    pub fn indices(&self, filter: Option<Attribute>) -> Vec<usize> {
        (0..self.meta.len())
            .filter(|&i| filter.is_none_or(|a| self.meta[i].1 == a))
            .collect()
    }

    pub fn get(&mut self, i: usize) -> Result<&TrainingPair> {
        ensure!(i < self.meta.len(), "pair_loader", "index {i} out of range");
        self.reads.push(self.meta[i].clone());
        if self.cache[i].is_none() {
            let pair = match &self.source {
                Source::Memory(p) => p[i].clone(),
                Source::Manifest(m) => {
                    let r = &m.records[i];
                    let optical = read_ppm8(m.resolve(&r.optical))?;
                    let hr = read_pgm16(m.resolve(&r.thermal))?;
                    TrainingPair::from_hr(r.id(), r.attr, optical, hr, r.scale, r.mode)?
                }
            };
            self.cache[i] = Some(pair);
        }
        Ok(self.cache[i].as_ref().expect("just filled"))
    }

    /// Every (id, tag) read so far, in order.
    pub fn reads(&self) -> &[(String, Attribute)] {
        &self.reads
    }

    pub fn clear_reads(&mut self) {
        self.reads.clear();
    }
}

/// One training batch as tensors.
#[derive(Clone, Debug)]
pub struct Batch<T: Scalar> {
    pub lr: Tensor<T>,
    pub optical: Tensor<T>,
    pub hr: Tensor<T>,
}

/// LR crop origin aligned to multiples of `align`.
fn aligned_origin(rng: &mut SeededRng, size: usize, patch: usize, align: usize) -> usize {
    let slots = (size - patch) / align + 1;
    rng.below(slots as u64) as usize * align
}

/// Random co-located crops: `patch x patch` LR, `patch*scale` optical and
/// HR thermal. Contents depend only on `rng` state.
pub fn crop_pair(pair: &TrainingPair, patch: usize, align: usize, rng: &mut SeededRng) -> Result<TrainingPair> {
    let s = pair.scale();
    let (h, w) = (pair.lr.height, pair.lr.width);
    if patch > h || patch > w {
        return Err(Error::Config(format!(
            "LR patch {patch} larger than image {} ({h}x{w})",
            pair.id
        )));
    }
    let y0 = aligned_origin(rng, h, patch, align);
    let x0 = aligned_origin(rng, w, patch, align);
    Ok(TrainingPair {
        id: pair.id.clone(),
        attr: pair.attr,
        lr: pair.lr.crop(y0, x0, patch, patch)?,
        optical: pair.optical.crop(y0 * s, x0 * s, patch * s, patch * s)?,
        hr: pair.hr.crop(y0 * s, x0 * s, patch * s, patch * s)?,
    })
}

pub fn stack_batch<T: Scalar>(pairs: &[TrainingPair]) -> Result<Batch<T>> {
    let lr: Vec<_> = pairs.iter().map(|p| p.lr.clone()).collect();
    let hr: Vec<_> = pairs.iter().map(|p| p.hr.clone()).collect();
    let opt: Vec<_> = pairs.iter().map(|p| p.optical.clone()).collect();
    Ok(Batch {
        lr: planes_to_batch(&lr)?,
        optical: rgb_to_batch(&opt)?,
        hr: planes_to_batch(&hr)?,
    })
}
