//! Segmentation quality and uncertainty-calibration metrics.
//!
//! Overlap scores (Dice, Jaccard) are plain set counts on the 0–100 scale.
//! Surface scores (95th-percentile Hausdorff, average symmetric surface
//! distance) measure exact Euclidean distances between 4-connected
//! boundary sets, computed with the two-pass exact squared-distance
//! transform of Felzenszwalb & Huttenlocher — squared pixel distances are
//! integers, so the fast transform agrees bit-for-bit with an all-pairs
//! scan. The calibration suite covers ECE (10 equal-width confidence
//! bins), NLL, Brier, the Mann–Whitney AUROC of uncertainty against pixel
//! error, and risk–coverage curves with their trapezoidal area.
//!
//! Degenerate-case conventions, fixed here and asserted in tests: a class
//! empty in both masks scores a perfect 100 overlap; a class with an empty
//! boundary on either side has undefined surface distances and is excluded
//! from aggregates (with an exclusion count); AUROC with single-class
//! error input is undefined and reported as an error.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::LOG_FLOOR;
use crate::models::ProbMap;

/// Confidence bins used for ECE and reliability diagrams.
pub const CALIB_BINS: usize = 10;

pub type MetricResult<T> = Result<T, MetricError>;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("mask/field length {got}, expected {expected}")]
    ShapeMismatch { expected: usize, got: usize },
    #[error("metric input empty: {0}")]
    EmptyInput(String),
    #[error("label {label} out of range for {classes} classes (sample {sample})")]
    ClassOutOfRange {
        label: u8,
        classes: usize,
        sample: usize,
    },
    #[error("uncertainty values must be finite")]
    NonFinite,
    #[error("AUROC undefined: {0}")]
    SingleClass(String),
}

// ---------------------------------------------------------------------------
// Overlap
// ---------------------------------------------------------------------------

/// Per-class Dice and Jaccard on the 0–100 scale, indexed by class id.
#[derive(Debug, Clone, PartialEq)]
pub struct OverlapScores {
    pub dsc: Vec<f64>,
    pub jaccard: Vec<f64>,
}

/// Set-counting overlap per class. A class absent from both masks scores
/// 100 on both metrics.
pub fn overlap_metrics(pred: &[u8], gt: &[u8], classes: usize) -> MetricResult<OverlapScores> {
    if pred.len() != gt.len() {
        return Err(MetricError::ShapeMismatch {
            expected: gt.len(),
            got: pred.len(),
        });
    }
    let mut inter = vec![0u64; classes];
    let mut np = vec![0u64; classes];
    let mut ng = vec![0u64; classes];
    for (i, (&p, &g)) in pred.iter().zip(gt).enumerate() {
        if p as usize >= classes {
            return Err(MetricError::ClassOutOfRange {
                label: p,
                classes,
                sample: i,
            });
        }
        if g as usize >= classes {
            return Err(MetricError::ClassOutOfRange {
                label: g,
                classes,
                sample: i,
            });
        }
        np[p as usize] += 1;
        ng[g as usize] += 1;
        if p == g {
            inter[p as usize] += 1;
        }
    }
    let mut dsc = Vec::with_capacity(classes);
    let mut jaccard = Vec::with_capacity(classes);
    for c in 0..classes {
        let (i, p, g) = (inter[c] as f64, np[c] as f64, ng[c] as f64);
        if np[c] + ng[c] == 0 {
            dsc.push(100.0);
            jaccard.push(100.0);
        } else {
            dsc.push(100.0 * 2.0 * i / (p + g));
            jaccard.push(100.0 * i / (p + g - i));
        }
    }
    Ok(OverlapScores { dsc, jaccard })
}

// ---------------------------------------------------------------------------
// Surface distances
// ---------------------------------------------------------------------------

/// 95th-percentile Hausdorff and average symmetric surface distance, in
/// pixel units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SurfaceScores {
    pub hd95: f64,
    pub asd: f64,
}

/// Row-major border pixels of a mask: members with a 4-neighbor outside
/// the mask (image borders count as outside).
fn boundary_pixels(mask: &[bool], h: usize, w: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !mask[y * w + x] {
                continue;
            }
            let interior = y > 0
                && y + 1 < h
                && x > 0
                && x + 1 < w
                && mask[(y - 1) * w + x]
                && mask[(y + 1) * w + x]
                && mask[y * w + x - 1]
                && mask[y * w + x + 1];
            if !interior {
                out.push((y, x));
            }
        }
    }
    out
}

/// One-dimensional exact squared-distance transform (lower envelope of
/// parabolas). `f` holds squared costs, `INFINITY` for absent sites.
fn dt1d(f: &[f64]) -> Vec<f64> {
    let n = f.len();
    let mut d = vec![f64::INFINITY; n];
    let mut v = vec![0usize; n]; // parabola vertices in the hull
    let mut z = vec![0.0f64; n + 1]; // hull cell boundaries
    let mut k = 0usize;
    let mut started = false;
    for q in 0..n {
        if f[q] == f64::INFINITY {
            continue;
        }
        if !started {
            v[0] = q;
            z[0] = f64::NEG_INFINITY;
            z[1] = f64::INFINITY;
            started = true;
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64))
                / (2.0 * q as f64 - 2.0 * p as f64);
            if s <= z[k] {
                if k == 0 {
                    // q dominates the whole hull so far.
                    v[0] = q;
                    z[0] = f64::NEG_INFINITY;
                    z[1] = f64::INFINITY;
                    break;
                }
                k -= 1;
            } else {
                k += 1;
                v[k] = q;
                z[k] = s;
                z[k + 1] = f64::INFINITY;
                break;
            }
        }
    }
    if !started {
        return d;
    }
    let mut k = 0usize;
    for (q, slot) in d.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let p = v[k];
        let diff = q as f64 - p as f64;
        *slot = diff * diff + f[p];
    }
    d
}

/// Exact squared Euclidean distance from every grid cell to the nearest
/// `true` site (`INFINITY` when there are none).
fn squared_edt(sites: &[bool], h: usize, w: usize) -> Vec<f64> {
    let mut g = vec![f64::INFINITY; h * w];
    // Column pass: distance along y to the nearest site in the column.
    for x in 0..w {
        let col: Vec<f64> = (0..h)
            .map(|y| if sites[y * w + x] { 0.0 } else { f64::INFINITY })
            .collect();
        for (y, v) in dt1d(&col).into_iter().enumerate() {
            g[y * w + x] = v;
        }
    }
    // Row pass combines squared column distances with squared x offsets.
    let mut out = vec![f64::INFINITY; h * w];
    for y in 0..h {
        let row: Vec<f64> = (0..w).map(|x| g[y * w + x]).collect();
        for (x, v) in dt1d(&row).into_iter().enumerate() {
            out[y * w + x] = v;
        }
    }
    out
}

/// 95th percentile by linear interpolation on an ascending-sorted slice.
fn percentile95(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    debug_assert!(n > 0);
    let pos = 0.95 * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + (sorted[hi] - sorted[lo]) * frac
}

/// Directed Euclidean distances from each boundary pixel of `from` to the
/// nearest boundary pixel of `to`, in row-major enumeration order.
fn directed_distances(from: &[(usize, usize)], to_edt: &[f64], w: usize) -> Vec<f64> {
    from.iter()
        .map(|&(y, x)| to_edt[y * w + x].sqrt())
        .collect()
}

/// Boundary-distance scores for one class. `Ok(None)` when either mask has
/// no boundary for the class (the sample is excluded from aggregates).
pub fn surface_metrics(
    pred: &[u8],
    gt: &[u8],
    h: usize,
    w: usize,
    class_id: u8,
) -> MetricResult<Option<SurfaceScores>> {
    if pred.len() != h * w || gt.len() != h * w {
        return Err(MetricError::ShapeMismatch {
            expected: h * w,
            got: pred.len().min(gt.len()),
        });
    }
    let mask_p: Vec<bool> = pred.iter().map(|&v| v == class_id).collect();
    let mask_g: Vec<bool> = gt.iter().map(|&v| v == class_id).collect();
    let bp = boundary_pixels(&mask_p, h, w);
    let bg = boundary_pixels(&mask_g, h, w);
    if bp.is_empty() || bg.is_empty() {
        return Ok(None);
    }
    let sites_p: Vec<bool> = {
        let mut s = vec![false; h * w];
        for &(y, x) in &bp {
            s[y * w + x] = true;
        }
        s
    };
    let sites_g: Vec<bool> = {
        let mut s = vec![false; h * w];
        for &(y, x) in &bg {
            s[y * w + x] = true;
        }
        s
    };
    let edt_p = squared_edt(&sites_p, h, w);
    let edt_g = squared_edt(&sites_g, h, w);
    let d_pg = directed_distances(&bp, &edt_g, w);
    let d_gp = directed_distances(&bg, &edt_p, w);

    let mut s_pg = d_pg.clone();
    let mut s_gp = d_gp.clone();
    s_pg.sort_by(|a, b| a.partial_cmp(b).expect("distances are finite"));
    s_gp.sort_by(|a, b| a.partial_cmp(b).expect("distances are finite"));
    let hd95 = percentile95(&s_pg).max(percentile95(&s_gp));
    let total: f64 = d_pg.iter().sum::<f64>() + d_gp.iter().sum::<f64>();
    let asd = total / (d_pg.len() + d_gp.len()) as f64;
    Ok(Some(SurfaceScores { hd95, asd }))
}

// ---------------------------------------------------------------------------
// Calibration
// ---------------------------------------------------------------------------

/// One reliability-diagram bin over `[lo, hi)` confidence (the last bin is
/// closed at 1).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibBin {
    pub lo: f64,
    pub hi: f64,
    pub count: usize,
    pub confidence: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CalibReport {
    pub ece: f64,
    pub nll: f64,
    pub brier: f64,
    pub bins: Vec<CalibBin>,
    pub n_pixels: usize,
}

/// Pixel-level calibration over a set of predictions. Confidence is the
/// maximum class probability; correctness compares its argmax (ties to the
/// lowest class id) with ground truth; NLL floors probabilities at
/// [`LOG_FLOOR`] so an exactly-zero vote stays finite.
pub fn calibration(probs: &[&ProbMap], gts: &[&[u8]]) -> MetricResult<CalibReport> {
    if probs.len() != gts.len() {
        return Err(MetricError::ShapeMismatch {
            expected: probs.len(),
            got: gts.len(),
        });
    }
    if probs.is_empty() {
        return Err(MetricError::EmptyInput("calibration needs samples".into()));
    }
    let mut bin_count = vec![0usize; CALIB_BINS];
    let mut bin_conf = vec![0.0f64; CALIB_BINS];
    let mut bin_acc = vec![0.0f64; CALIB_BINS];
    let mut nll_sum = 0.0;
    let mut brier_sum = 0.0;
    let mut n = 0usize;

    for (si, (pm, gt)) in probs.iter().zip(gts).enumerate() {
        if gt.len() != pm.n_pixels() {
            return Err(MetricError::ShapeMismatch {
                expected: pm.n_pixels(),
                got: gt.len(),
            });
        }
        let c = pm.classes();
        let argmax = pm.argmax();
        for i in 0..pm.n_pixels() {
            let y = gt[i];
            if y as usize >= c {
                return Err(MetricError::ClassOutOfRange {
                    label: y,
                    classes: c,
                    sample: si,
                });
            }
            let row = pm.pixel(i);
            let conf = row[argmax[i] as usize];
            let correct = argmax[i] == y;
            let bin = ((conf * CALIB_BINS as f64) as usize).min(CALIB_BINS - 1);
            bin_count[bin] += 1;
            bin_conf[bin] += conf;
            bin_acc[bin] += correct as usize as f64;
            nll_sum += -(row[y as usize].max(LOG_FLOOR)).ln();
            let mut sq = 0.0;
            for (cls, &p) in row.iter().enumerate() {
                let target = (cls == y as usize) as usize as f64;
                sq += (p - target) * (p - target);
            }
            brier_sum += sq / c as f64;
            n += 1;
        }
    }

    let mut ece = 0.0;
    let width = 1.0 / CALIB_BINS as f64;
    let bins: Vec<CalibBin> = (0..CALIB_BINS)
        .map(|b| {
            let count = bin_count[b];
            let (confidence, accuracy) = if count > 0 {
                (bin_conf[b] / count as f64, bin_acc[b] / count as f64)
            } else {
                (0.0, 0.0)
            };
            if count > 0 {
                ece += count as f64 / n as f64 * (accuracy - confidence).abs();
            }
            CalibBin {
                lo: b as f64 * width,
                hi: (b + 1) as f64 * width,
                count,
                confidence,
                accuracy,
            }
        })
        .collect();

    Ok(CalibReport {
        ece,
        nll: nll_sum / n as f64,
        brier: brier_sum / n as f64,
        bins,
        n_pixels: n,
    })
}

// ---------------------------------------------------------------------------
// AUROC
// ---------------------------------------------------------------------------

/// Probability that a uniformly random erroneous pixel carries strictly
/// higher uncertainty than a random correct one, ties counted half
/// (Mann–Whitney U through midranks).
pub fn auroc(uncertainty: &[f64], error: &[bool]) -> MetricResult<f64> {
    if uncertainty.len() != error.len() {
        return Err(MetricError::ShapeMismatch {
            expected: error.len(),
            got: uncertainty.len(),
        });
    }
    if uncertainty.iter().any(|u| !u.is_finite()) {
        return Err(MetricError::NonFinite);
    }
    let n = uncertainty.len();
    let ne = error.iter().filter(|&&e| e).count();
    if ne == 0 || ne == n {
        return Err(MetricError::SingleClass(format!(
            "{ne} errors among {n} pixels"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| {
        uncertainty[a]
            .partial_cmp(&uncertainty[b])
            .expect("finite")
            .then(a.cmp(&b))
    });
    // Midranks: runs of equal uncertainty share the average of their
    // 1-based rank range, so every rank is a multiple of one half and the
    // rank sum is exact in 64-bit floats.
    let mut rank_sum_err = 0.0f64;
    let mut i = 0usize;
    while i < n {
        let mut j = i;
        while j < n && uncertainty[idx[j]] == uncertainty[idx[i]] {
            j += 1;
        }
        let midrank = ((i + 1) + j) as f64 / 2.0;
        for &k in &idx[i..j] {
            if error[k] {
                rank_sum_err += midrank;
            }
        }
        i = j;
    }
    let ne_f = ne as f64;
    let nc_f = (n - ne) as f64;
    Ok((rank_sum_err - ne_f * (ne_f + 1.0) / 2.0) / (ne_f * nc_f))
}

// ---------------------------------------------------------------------------
// Risk–coverage
// ---------------------------------------------------------------------------

/// Selective-prediction curve: points (coverage k/n, error rate among the
/// k most-confident pixels), anchored at (0, 0), plus its trapezoidal area.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RiskCoverage {
    pub points: Vec<(f64, f64)>,
    pub aurc: f64,
}

pub fn risk_coverage(uncertainty: &[f64], error: &[bool]) -> MetricResult<RiskCoverage> {
    if uncertainty.len() != error.len() {
        return Err(MetricError::ShapeMismatch {
            expected: error.len(),
            got: uncertainty.len(),
        });
    }
    if uncertainty.is_empty() {
        return Err(MetricError::EmptyInput("risk–coverage needs pixels".into()));
    }
    if uncertainty.iter().any(|u| !u.is_finite()) {
        return Err(MetricError::NonFinite);
    }
    let n = uncertainty.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| {
        uncertainty[a]
            .partial_cmp(&uncertainty[b])
            .expect("finite")
            .then(a.cmp(&b))
    });
    let mut points = Vec::with_capacity(n + 1);
    points.push((0.0, 0.0));
    let mut errors = 0usize;
    let mut aurc = 0.0;
    let mut prev_risk = 0.0;
    for (k, &i) in idx.iter().enumerate() {
        errors += error[i] as usize;
        let coverage = (k + 1) as f64 / n as f64;
        let risk = errors as f64 / (k + 1) as f64;
        aurc += (prev_risk + risk) / 2.0 / n as f64;
        points.push((coverage, risk));
        prev_risk = risk;
    }
    Ok(RiskCoverage { points, aurc })
}

// ---------------------------------------------------------------------------
// Aggregated reports
// ---------------------------------------------------------------------------

/// Mean ± population standard deviation over `n` values.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

fn stat(values: &[f64]) -> Option<Stat> {
    if values.is_empty() {
        return None;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Some(Stat {
        mean,
        std: var.sqrt(),
        n: values.len(),
    })
}

/// Per-foreground-class aggregates over a sample set.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClassStats {
    pub class_id: u8,
    pub dsc: Stat,
    pub jaccard: Stat,
    /// `None` when every sample's surface was undefined for this class.
    pub hd95: Option<Stat>,
    pub asd: Option<Stat>,
    /// Samples excluded from the surface aggregates.
    pub surface_excluded: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub n_samples: usize,
    pub classes: usize,
    pub per_class: Vec<ClassStats>,
    /// Means over foreground classes of the per-class sample means.
    pub mean_dsc: f64,
    pub mean_jaccard: f64,
    pub mean_hd95: Option<f64>,
    pub mean_asd: Option<f64>,
    pub surface_excluded_total: usize,
}

/// One flat row: a (sample, foreground class) pair.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleClassRow {
    pub sample: usize,
    pub class_id: u8,
    pub dsc: f64,
    pub jaccard: f64,
    pub hd95: Option<f64>,
    pub asd: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: MetricReport,
    pub rows: Vec<SampleClassRow>,
}

/// Overlap + surface metrics for every (sample, foreground class) pair,
/// aggregated per class and overall.
pub fn evaluate_masks(
    preds: &[Vec<u8>],
    gts: &[Vec<u8>],
    h: usize,
    w: usize,
    classes: usize,
) -> MetricResult<Evaluation> {
    if preds.len() != gts.len() {
        return Err(MetricError::ShapeMismatch {
            expected: gts.len(),
            got: preds.len(),
        });
    }
    if preds.is_empty() {
        return Err(MetricError::EmptyInput("evaluation needs samples".into()));
    }
    let per_sample: Vec<(OverlapScores, Vec<Option<SurfaceScores>>)> = preds
        .par_iter()
        .zip(gts)
        .map(|(p, g)| -> MetricResult<_> {
            let overlap = overlap_metrics(p, g, classes)?;
            let surfaces = (1..classes)
                .map(|c| surface_metrics(p, g, h, w, c as u8))
                .collect::<MetricResult<Vec<_>>>()?;
            Ok((overlap, surfaces))
        })
        .collect::<MetricResult<_>>()?;

    let mut rows = Vec::with_capacity(preds.len() * (classes - 1));
    for (si, (overlap, surfaces)) in per_sample.iter().enumerate() {
        for c in 1..classes {
            let surf = surfaces[c - 1];
            rows.push(SampleClassRow {
                sample: si,
                class_id: c as u8,
                dsc: overlap.dsc[c],
                jaccard: overlap.jaccard[c],
                hd95: surf.map(|s| s.hd95),
                asd: surf.map(|s| s.asd),
            });
        }
    }

    let mut per_class = Vec::with_capacity(classes - 1);
    let mut surface_excluded_total = 0;
    for c in 1..classes {
        let class_rows: Vec<&SampleClassRow> =
            rows.iter().filter(|r| r.class_id as usize == c).collect();
        let dscs: Vec<f64> = class_rows.iter().map(|r| r.dsc).collect();
        let jacs: Vec<f64> = class_rows.iter().map(|r| r.jaccard).collect();
        let hds: Vec<f64> = class_rows.iter().filter_map(|r| r.hd95).collect();
        let asds: Vec<f64> = class_rows.iter().filter_map(|r| r.asd).collect();
        let excluded = class_rows.len() - hds.len();
        surface_excluded_total += excluded;
        per_class.push(ClassStats {
            class_id: c as u8,
            dsc: stat(&dscs).expect("samples nonempty"),
            jaccard: stat(&jacs).expect("samples nonempty"),
            hd95: stat(&hds),
            asd: stat(&asds),
            surface_excluded: excluded,
        });
    }

    let fg = per_class.len() as f64;
    let mean_dsc = per_class.iter().map(|c| c.dsc.mean).sum::<f64>() / fg;
    let mean_jaccard = per_class.iter().map(|c| c.jaccard.mean).sum::<f64>() / fg;
    let hd_means: Vec<f64> = per_class.iter().filter_map(|c| c.hd95.map(|s| s.mean)).collect();
    let asd_means: Vec<f64> = per_class.iter().filter_map(|c| c.asd.map(|s| s.mean)).collect();
    let report = MetricReport {
        n_samples: preds.len(),
        classes,
        per_class,
        mean_dsc,
        mean_jaccard,
        mean_hd95: (!hd_means.is_empty())
            .then(|| hd_means.iter().sum::<f64>() / hd_means.len() as f64),
        mean_asd: (!asd_means.is_empty())
            .then(|| asd_means.iter().sum::<f64>() / asd_means.len() as f64),
        surface_excluded_total,
    };
    Ok(Evaluation { report, rows })
}

/// Flat CSV for the per-(sample, class) rows; undefined surface cells stay
/// empty.
pub fn rows_to_csv(rows: &[SampleClassRow]) -> String {
    let mut out = String::from("sample,class,dsc,jaccard,hd95,asd\n");
    for r in rows {
        let cell = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.sample,
            r.class_id,
            r.dsc,
            r.jaccard,
            cell(r.hd95),
            cell(r.asd)
        ));
    }
    out
}
