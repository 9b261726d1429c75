//! PSNR/SSIM on [0, 1] thermal planes and dataset-level reports.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{ensure, Error, Result};
use crate::imaging::{
    decode_pgm16, degrade_thermal, encode_pgm16, read_pgm16, Attribute, DatasetManifest, ImagePlane,
};
use crate::numcore::bicubic_resize;

/// Reported for identical images.
pub const PSNR_CAP_DB: f64 = 99.0;
pub const SSIM_WINDOW: usize = 11;
pub const SSIM_SIGMA: f64 = 1.5;
pub const SSIM_K1: f64 = 0.01;
pub const SSIM_K2: f64 = 0.03;

fn same_dims(op: &'static str, a: &ImagePlane, b: &ImagePlane) -> Result<()> {
    ensure!(
        a.height == b.height && a.width == b.width,
        op,
        "image sizes differ: {}x{} vs {}x{}",
        a.height,
        a.width,
        b.height,
        b.width
    );
    Ok(())
}

/// `10 log10(1 / MSE)`, capped at 99 dB.
pub fn psnr(a: &ImagePlane, b: &ImagePlane) -> Result<f64> {
    same_dims("psnr", a, b)?;
    let mse = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.data.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_CAP_DB))
}

fn gaussian_window() -> Vec<f64> {
    let r = (SSIM_WINDOW / 2) as f64;
    let taps: Vec<f64> = (0..SSIM_WINDOW)
        .map(|i| {
            let d = i as f64 - r;
            (-(d * d) / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = taps.iter().sum();
    taps.into_iter().map(|t| t / s).collect()
}

/// Separable "valid" filtering.
fn filter_valid(data: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let k = taps.len();
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * data[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps.iter().enumerate().map(|(i, t)| t * tmp[(y + i) * ow + x]).sum();
        }
    }
    out
}

/// Mean of the local SSIM map (Gaussian 11x11, sigma 1.5, L = 1).
pub fn ssim(a: &ImagePlane, b: &ImagePlane) -> Result<f64> {
    same_dims("ssim", a, b)?;
    let (h, w) = (a.height, a.width);
    ensure!(
        h >= SSIM_WINDOW && w >= SSIM_WINDOW,
        "ssim",
        "image {h}x{w} smaller than the {SSIM_WINDOW}x{SSIM_WINDOW} window"
    );
    let taps = gaussian_window();
    let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> {
        a.data.iter().zip(&b.data).map(|(&x, &y)| f(x, y)).collect()
    };
    let mu_a = filter_valid(&a.data, h, w, &taps);
    let mu_b = filter_valid(&b.data, h, w, &taps);
    let aa = filter_valid(&prod(&|x, _| x * x), h, w, &taps);
    let bb = filter_valid(&prod(&|_, y| y * y), h, w, &taps);
    let ab = filter_valid(&prod(&|x, y| x * y), h, w, &taps);
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    let n = mu_a.len();
    let mut total = 0.0;
    for i in 0..n {
        let (ma, mb) = (mu_a[i], mu_b[i]);
        let va = aa[i] - ma * ma;
        let vb = bb[i] - mb * mb;
        let cov = ab[i] - ma * mb;
        total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
    }
    Ok(total / n as f64)
}

/// Per-image metrics; `None` marks a missing SR file.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub id: String,
    pub attr: Attribute,
    pub psnr: Option<f64>,
    pub ssim: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Aggregate {
    pub count: usize,
    pub psnr: f64,
    pub ssim: f64,
}

fn aggregate<'a>(rows: impl Iterator<Item = &'a MetricRow>) -> Aggregate {
    let (mut n, mut p, mut s) = (0usize, 0.0, 0.0);
    for r in rows {
        if let (Some(rp), Some(rs)) = (r.psnr, r.ssim) {
            n += 1;
            p += rp;
            s += rs;
        }
    }
    if n == 0 {
        return Aggregate {
            count: 0,
            psnr: f64::NAN,
            ssim: f64::NAN,
        };
    }
    Aggregate {
        count: n,
        psnr: p / n as f64,
        ssim: s / n as f64,
    }
}

/// Metrics for every record, sorted by id, plus the bicubic baseline.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    pub bicubic: Vec<MetricRow>,
}

pub const REPORT_HEADER: &str = "id,attr,psnr,ssim";

fn fmt_metric(v: Option<f64>) -> String {
    match v {
        Some(v) => format!("{v}"),
        None => "missing".into(),
    }
}

fn fmt_mean(v: f64) -> String {
    if v.is_nan() {
        String::new()
    } else {
        format!("{v}")
    }
}

impl MetricReport {
    pub fn missing(&self) -> Vec<&str> {
        self.rows
            .iter()
            .filter(|r| r.psnr.is_none())
            .map(|r| r.id.as_str())
            .collect()
    }

    pub fn overall(&self) -> Aggregate {
        aggregate(self.rows.iter())
    }

    pub fn by_attr(&self, attr: Attribute) -> Aggregate {
        aggregate(self.rows.iter().filter(|r| r.attr == attr))
    }

    pub fn bicubic_overall(&self) -> Aggregate {
        aggregate(self.bicubic.iter())
    }

    pub fn bicubic_by_attr(&self, attr: Attribute) -> Aggregate {
        aggregate(self.bicubic.iter().filter(|r| r.attr == attr))
    }

    fn footer(&self) -> Vec<(String, &'static str, Aggregate)> {
        let mut f = vec![(format!("mean[n={}]", self.overall().count), "all", self.overall())];
        for a in Attribute::ALL {
            let g = self.by_attr(a);
            f.push((format!("mean[n={}]", g.count), a.as_str(), g));
        }
        let b = self.bicubic_overall();
        f.push((format!("bicubic[n={}]", b.count), "all", b));
        for a in Attribute::ALL {
            let g = self.bicubic_by_attr(a);
            f.push((format!("bicubic[n={}]", g.count), a.as_str(), g));
        }
        f
    }

    /// CSV body (sorted by id) followed by aggregate rows.
    pub fn to_csv(&self) -> String {
        let mut s = String::from(REPORT_HEADER);
        s.push('\n');
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{},{}", r.id, r.attr, fmt_metric(r.psnr), fmt_metric(r.ssim));
        }
        for (label, attr, g) in self.footer() {
            let _ = writeln!(s, "{label},{attr},{},{}", fmt_mean(g.psnr), fmt_mean(g.ssim));
        }
        s
    }

    pub fn to_table(&self) -> String {
        let mut s = format!("{:<16} {:>6} {:>10} {:>8}\n", "group", "n", "PSNR(dB)", "SSIM");
        for (label, attr, g) in self.footer() {
            let name = format!("{}:{attr}", label.split('[').next().unwrap_or(""));
            let _ = writeln!(s, "{:<16} {:>6} {:>10.3} {:>8.4}", name, g.count, g.psnr, g.ssim);
        }
        let missing = self.missing();
        if !missing.is_empty() {
            let _ = writeln!(s, "missing: {}", missing.join(", "));
        }
        s
    }
}

pub fn write_report(report: &MetricReport, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, report.to_csv()).map_err(|e| Error::io(path, e))
}

/// Round trip through the 16-bit file format, so the baseline matches what
/// an SR file holding the same image would decode to.
pub fn quantize16(img: &ImagePlane) -> Result<ImagePlane> {
    decode_pgm16(&encode_pgm16(img))
}

/// Bicubic upsampling of the record's LR plane, quantized to 16 bits.
pub fn bicubic_baseline(hr: &ImagePlane, scale: usize, mode: crate::imaging::DegradationMode) -> Result<ImagePlane> {
    let lr = degrade_thermal(hr, scale, mode)?;
    let up = bicubic_resize(&lr.to_tensor::<f64>(), scale as f64)?;
    quantize16(&ImagePlane::from_tensor(&up)?)
}

/// Compare `sr_dir/{id}.pgm` against each record's HR thermal plane.
pub fn evaluate_pairs(manifest: &DatasetManifest, sr_dir: impl AsRef<Path>) -> Result<MetricReport> {
    let sr_dir = sr_dir.as_ref();
    let mut order: Vec<usize> = (0..manifest.records.len()).collect();
    order.sort_by_key(|&i| manifest.records[i].id());
    let mut report = MetricReport::default();
    for i in order {
        let r = &manifest.records[i];
        let id = r.id();
        let gt = read_pgm16(manifest.resolve(&r.thermal))?;
        let bic = bicubic_baseline(&gt, r.scale, r.mode)?;
        report.bicubic.push(MetricRow {
            id: id.clone(),
            attr: r.attr,
            psnr: Some(psnr(&bic, &gt)?),
            ssim: Some(ssim(&bic, &gt)?),
        });
        let sr_path = sr_dir.join(format!("{id}.pgm"));
        let row = if sr_path.exists() {
            let sr = read_pgm16(&sr_path)?;
            MetricRow {
                id,
                attr: r.attr,
                psnr: Some(psnr(&sr, &gt)?),
                ssim: Some(ssim(&sr, &gt)?),
            }
        } else {
            MetricRow {
                id,
                attr: r.attr,
                psnr: None,
                ssim: None,
            }
        };
        report.rows.push(row);
    }
    Ok(report)
}
