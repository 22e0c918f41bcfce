//! Seeded synthetic 2D scenes and everything that derives from them:
//! corpus/split assembly with disjoint seed streams, copy-paste patch
//! mixing, box-prompt synthesis, and binary scene serialization.
//!
//! Scenes are smooth multi-class "blob" images: each foreground class paints
//! one deformed disk, pixel intensities are a per-class mean plus Gaussian
//! noise, and overall foreground coverage is kept inside a fixed band by
//! re-drawing with a derived sub-seed when a draw lands outside it.

pub mod container;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Array, ArrayError};
use crate::derive_seed;

/// Foreground coverage band enforced by [`gen_scene`].
pub const COVERAGE_MIN: f64 = 0.05;
pub const COVERAGE_MAX: f64 = 0.60;
/// Bounded retry budget for the coverage constraint.
pub const MAX_COVERAGE_ATTEMPTS: u64 = 64;

// Seed-stream roles. Every consumer of a derived stream has its own role so
// adding a consumer never shifts another one.
pub(crate) mod roles {
    pub const SCENE: u64 = 0x01;
    pub const TEACHER_SPLIT: u64 = 0x10;
    pub const LABELED_SPLIT: u64 = 0x11;
    pub const UNLABELED_SPLIT: u64 = 0x12;
    pub const VAL_SPLIT: u64 = 0x13;
    pub const TEST_SPLIT: u64 = 0x14;
    pub const MIX: u64 = 0x20;
    pub const PROMPT: u64 = 0x21;
    pub const PRETRAIN_BATCH: u64 = 0x30;
    pub const PRETRAIN_PROMPT: u64 = 0x31;
}

pub type SynthResult<T> = Result<T, SynthError>;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("coverage constraint unsatisfiable for seed {seed} after {attempts} attempts")]
    CoverageUnsatisfiable { seed: u64, attempts: u64 },
    #[error("class {class_id} has no pixels in the label map")]
    ClassAbsent { class_id: u8 },
    #[error("image {h}x{w} not divisible by patch grid {grid}")]
    GridIndivisible { h: usize, w: usize, grid: usize },
    #[error("mix ratio {ratio} outside (0, 1)")]
    RatioOutOfRange { ratio: f64 },
    #[error("invalid split: {0}")]
    SplitInvalid(String),
    #[error("derived scene seeds collide across splits (seed {seed})")]
    SeedOverlap { seed: u64 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error(transparent)]
    Array(#[from] ArrayError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("malformed scene container: {0}")]
    BadContainer(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Knobs of one scene-generating domain. The teacher corpus uses a broader
/// setting (larger jitter / wider deformation) than the task domain, which
/// is what creates the domain gap the pipeline has to bridge.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DomainParams {
    /// Upper bound on foreground blobs per scene (further capped at C−1).
    pub shape_count: usize,
    /// Per-class base intensity mean, indexed by class id (length C).
    pub intensity_means: Vec<f64>,
    /// Std-dev of additive pixel noise.
    pub noise_std: f64,
    /// Relative amplitude of the radial boundary deformation harmonics.
    pub deformation_amplitude: f64,
    /// Half-width of the per-scene uniform offset applied to every class
    /// mean; models acquisition variation between scenes.
    pub intensity_jitter: f64,
}

/// A fully annotated scene.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    /// H×W intensities in [0, 1].
    pub image: Array,
    /// Row-major H·W class ids, each < `classes`.
    pub label: Vec<u8>,
    pub classes: usize,
    pub seed: u64,
}

impl Scene {
    pub fn h(&self) -> usize {
        self.image.shape()[0]
    }
    pub fn w(&self) -> usize {
        self.image.shape()[1]
    }
    pub fn foreground_fraction(&self) -> f64 {
        self.label.iter().filter(|&&l| l != 0).count() as f64 / self.label.len() as f64
    }
}

/// The training view of an unannotated scene. There is deliberately no
/// label field: code holding one of these cannot read ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct UnlabeledScene {
    pub image: Array,
    pub seed: u64,
}

impl From<&Scene> for UnlabeledScene {
    fn from(s: &Scene) -> Self {
        UnlabeledScene {
            image: s.image.clone(),
            seed: s.seed,
        }
    }
}

/// Sizes and base seed of the task-data splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub n_labeled: usize,
    pub n_unlabeled: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub seed: u64,
}

/// All scene collections a full run needs.
#[derive(Debug, Clone)]
pub struct Corpus {
    pub teacher: Vec<Scene>,
    pub labeled: Vec<Scene>,
    pub unlabeled: Vec<UnlabeledScene>,
    pub val: Vec<Scene>,
    pub test: Vec<Scene>,
}

/// Deterministic scene synthesis. Identical `(seed, params)` produce an
/// identical scene; the coverage band is enforced by bounded re-draws from
/// derived sub-seeds.
pub fn gen_scene(
    seed: u64,
    params: &DomainParams,
    classes: usize,
    h: usize,
    w: usize,
) -> SynthResult<Scene> {
    if classes < 2 {
        return Err(SynthError::SplitInvalid(format!(
            "need at least 2 classes, got {classes}"
        )));
    }
    if params.intensity_means.len() != classes {
        return Err(SynthError::ShapeMismatch(format!(
            "intensity_means length {} vs {classes} classes",
            params.intensity_means.len()
        )));
    }
    for attempt in 0..MAX_COVERAGE_ATTEMPTS {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, roles::SCENE, attempt));
        let label = draw_label(&mut rng, params, classes, h, w);
        let fg = label.iter().filter(|&&l| l != 0).count() as f64 / (h * w) as f64;
        if (COVERAGE_MIN..=COVERAGE_MAX).contains(&fg) {
            let image = render_image(&mut rng, params, &label, classes, h, w)?;
            return Ok(Scene {
                image,
                label,
                classes,
                seed,
            });
        }
    }
    Err(SynthError::CoverageUnsatisfiable {
        seed,
        attempts: MAX_COVERAGE_ATTEMPTS,
    })
}

fn draw_label(
    rng: &mut ChaCha8Rng,
    params: &DomainParams,
    classes: usize,
    h: usize,
    w: usize,
) -> Vec<u8> {
    let max_blobs = params.shape_count.clamp(1, classes - 1);
    let n_blobs = rng.gen_range(1..=max_blobs);
    let mut class_pool: Vec<u8> = (1..classes as u8).collect();
    class_pool.shuffle(rng);
    class_pool.truncate(n_blobs);

    let mut label = vec![0u8; h * w];
    let min_side = h.min(w) as f64;
    for &cls in &class_pool {
        let cy = rng.gen_range(0.18..0.82) * h as f64;
        let cx = rng.gen_range(0.18..0.82) * w as f64;
        let base_r = rng.gen_range(0.10..0.26) * min_side;
        // Low-order radial harmonics deform the disk boundary smoothly.
        let harmonics: Vec<(f64, f64, f64)> = (2..=4)
            .map(|m| {
                (
                    m as f64,
                    params.deformation_amplitude * rng.gen_range(-1.0..1.0) / m as f64,
                    rng.gen_range(0.0..std::f64::consts::TAU),
                )
            })
            .collect();
        for y in 0..h {
            for x in 0..w {
                let dy = y as f64 + 0.5 - cy;
                let dx = x as f64 + 0.5 - cx;
                let r = (dy * dy + dx * dx).sqrt();
                if r > base_r * 2.0 {
                    continue; // cheap reject: deformation factor is < 2
                }
                let theta = dy.atan2(dx);
                let mut factor = 1.0;
                for &(m, amp, phase) in &harmonics {
                    factor += amp * (m * theta + phase).cos();
                }
                if r <= base_r * factor.max(0.2) {
                    label[y * w + x] = cls;
                }
            }
        }
    }
    label
}

fn render_image(
    rng: &mut ChaCha8Rng,
    params: &DomainParams,
    label: &[u8],
    classes: usize,
    h: usize,
    w: usize,
) -> SynthResult<Array> {
    let mut means = params.intensity_means.clone();
    if params.intensity_jitter > 0.0 {
        for m in means.iter_mut() {
            *m += rng.gen_range(-params.intensity_jitter..=params.intensity_jitter);
        }
    }
    let _ = classes;
    let noise = Normal::new(0.0, params.noise_std.max(0.0))
        .map_err(|e| SynthError::SplitInvalid(format!("noise distribution: {e}")))?;
    let data: Vec<f64> = label
        .iter()
        .map(|&l| (means[l as usize] + noise.sample(rng)).clamp(0.0, 1.0))
        .collect();
    Ok(Array::from_vec(vec![h, w], data)?)
}

/// Builds the five scene collections from disjoint derived seed streams.
/// The teacher corpus is drawn from `corpus_params` (the broad distribution)
/// under its own `teacher_seed`; all task splits come from `params` under
/// `split.seed`. `teacher_factor` is the corpus size as a multiple of
/// |D_L| and must be at least 10.
pub fn make_corpus(
    split: &SplitSpec,
    params: &DomainParams,
    corpus_params: &DomainParams,
    teacher_seed: u64,
    teacher_factor: usize,
    classes: usize,
    h: usize,
    w: usize,
) -> SynthResult<Corpus> {
    if split.n_labeled == 0 || split.n_val == 0 || split.n_test == 0 {
        return Err(SynthError::SplitInvalid(
            "labeled, val and test splits must be non-empty".into(),
        ));
    }
    if split.n_unlabeled < split.n_labeled {
        return Err(SynthError::SplitInvalid(format!(
            "unlabeled split ({}) smaller than labeled split ({})",
            split.n_unlabeled, split.n_labeled
        )));
    }
    if teacher_factor < 10 {
        return Err(SynthError::SplitInvalid(format!(
            "teacher corpus factor {teacher_factor} < 10"
        )));
    }

    let n_teacher = teacher_factor * split.n_labeled;
    let plan: Vec<(u64, u64, usize)> = vec![
        (teacher_seed, roles::TEACHER_SPLIT, n_teacher),
        (split.seed, roles::LABELED_SPLIT, split.n_labeled),
        (split.seed, roles::UNLABELED_SPLIT, split.n_unlabeled),
        (split.seed, roles::VAL_SPLIT, split.n_val),
        (split.seed, roles::TEST_SPLIT, split.n_test),
    ];
    // Scene seeds must be globally unique across splits.
    let mut seen = std::collections::HashSet::new();
    let mut seeds: Vec<Vec<u64>> = Vec::new();
    for (base, role, n) in &plan {
        let mut v = Vec::with_capacity(*n);
        for i in 0..*n {
            let s = derive_seed(*base, *role, i as u64);
            if !seen.insert(s) {
                return Err(SynthError::SeedOverlap { seed: s });
            }
            v.push(s);
        }
        seeds.push(v);
    }

    let gen_split = |seeds: &[u64], p: &DomainParams| -> SynthResult<Vec<Scene>> {
        seeds
            .iter()
            .map(|&s| gen_scene(s, p, classes, h, w))
            .collect()
    };

    let teacher = gen_split(&seeds[0], corpus_params)?;
    let labeled = gen_split(&seeds[1], params)?;
    let unlabeled_scenes = gen_split(&seeds[2], params)?;
    let val = gen_split(&seeds[3], params)?;
    let test = gen_split(&seeds[4], params)?;
    let unlabeled = unlabeled_scenes.iter().map(UnlabeledScene::from).collect();

    Ok(Corpus {
        teacher,
        labeled,
        unlabeled,
        val,
        test,
    })
}

/// Output of [`copy_paste_mix`]: the mixed image/label pair plus the patch
/// mask (true where the source was pasted), which callers reuse to mix any
/// companion per-pixel map consistently.
#[derive(Debug, Clone)]
pub struct MixResult {
    pub image: Array,
    pub label: Vec<u8>,
    pub patch_mask: Vec<bool>,
}

/// Replaces ⌈ratio·g²⌉ randomly chosen grid patches of `dst` with the
/// corresponding patches of `src`, applying the identical patch choice to
/// image and label.
pub fn copy_paste_mix(
    src: (&Array, &[u8]),
    dst: (&Array, &[u8]),
    grid: usize,
    ratio: f64,
    seed: u64,
) -> SynthResult<MixResult> {
    let (src_img, src_lab) = src;
    let (dst_img, dst_lab) = dst;
    if src_img.shape() != dst_img.shape() {
        return Err(SynthError::ShapeMismatch(format!(
            "src image {:?} vs dst image {:?}",
            src_img.shape(),
            dst_img.shape()
        )));
    }
    let (h, w) = src_img.dims2()?;
    if src_lab.len() != h * w || dst_lab.len() != h * w {
        return Err(SynthError::ShapeMismatch(
            "label length does not match image".into(),
        ));
    }
    if grid == 0 || h % grid != 0 || w % grid != 0 {
        return Err(SynthError::GridIndivisible { h, w, grid });
    }
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(SynthError::RatioOutOfRange { ratio });
    }

    let n_cells = grid * grid;
    let n_replace = (ratio * n_cells as f64).ceil() as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, roles::MIX, 0));
    let mut cells: Vec<usize> = (0..n_cells).collect();
    // Partial Fisher–Yates: the first n_replace entries are the chosen cells.
    for i in 0..n_replace {
        let j = rng.gen_range(i..n_cells);
        cells.swap(i, j);
    }

    let (ph, pw) = (h / grid, w / grid);
    let mut patch_mask = vec![false; h * w];
    for &cell in &cells[..n_replace] {
        let (cy, cx) = (cell / grid, cell % grid);
        for y in cy * ph..(cy + 1) * ph {
            let row = y * w + cx * pw;
            patch_mask[row..row + pw].iter_mut().for_each(|m| *m = true);
        }
    }

    let image = Array::from_vec(
        vec![h, w],
        mix_plane_f64(&patch_mask, src_img.data(), dst_img.data()),
    )?;
    let label = mix_plane_u8(&patch_mask, src_lab, dst_lab);
    Ok(MixResult {
        image,
        label,
        patch_mask,
    })
}

/// Selects `src` where the mask is true, `dst` elsewhere.
pub fn mix_plane_f64(mask: &[bool], src: &[f64], dst: &[f64]) -> Vec<f64> {
    mask.iter()
        .zip(src.iter().zip(dst))
        .map(|(&m, (&s, &d))| if m { s } else { d })
        .collect()
}

pub fn mix_plane_u8(mask: &[bool], src: &[u8], dst: &[u8]) -> Vec<u8> {
    mask.iter()
        .zip(src.iter().zip(dst))
        .map(|(&m, (&s, &d))| if m { s } else { d })
        .collect()
}

pub fn mix_plane_bool(mask: &[bool], src: &[bool], dst: &[bool]) -> Vec<bool> {
    mask.iter()
        .zip(src.iter().zip(dst))
        .map(|(&m, (&s, &d))| if m { s } else { d })
        .collect()
}

/// An axis-aligned box prompt. `y1`/`x1` are exclusive; the box is never
/// degenerate and always contains the center pixel of the tight box it was
/// derived from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BoxPrompt {
    pub y0: usize,
    pub x0: usize,
    pub y1: usize,
    pub x1: usize,
    pub class_id: u8,
}

impl BoxPrompt {
    pub fn full_image(h: usize, w: usize) -> Self {
        BoxPrompt {
            y0: 0,
            x0: 0,
            y1: h,
            x1: w,
            class_id: 0,
        }
    }

    pub fn is_valid(&self, h: usize, w: usize) -> bool {
        self.y0 < self.y1 && self.x0 < self.x1 && self.y1 <= h && self.x1 <= w
    }
}

/// Tight bounding box of `class_id` in the label map, with each edge
/// independently shifted by a uniform integer in
/// `[−⌊jitter_frac·side⌋, +⌊jitter_frac·side⌋]` (side = image extent along
/// that axis), then clamped so the box stays inside the image, never
/// degenerates, and still contains the tight box's center pixel.
pub fn synth_box_prompt(
    label: &[u8],
    h: usize,
    w: usize,
    class_id: u8,
    jitter_frac: f64,
    seed: u64,
) -> SynthResult<BoxPrompt> {
    debug_assert_eq!(label.len(), h * w);
    let (mut y0, mut x0, mut y1, mut x1) = (usize::MAX, usize::MAX, 0usize, 0usize);
    for y in 0..h {
        for x in 0..w {
            if label[y * w + x] == class_id {
                y0 = y0.min(y);
                x0 = x0.min(x);
                y1 = y1.max(y + 1);
                x1 = x1.max(x + 1);
            }
        }
    }
    if y0 == usize::MAX {
        return Err(SynthError::ClassAbsent { class_id });
    }
    // Center pixel of the tight box (floor midpoint).
    let cy = (y0 + y1 - 1) / 2;
    let cx = (x0 + x1 - 1) / 2;

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, roles::PROMPT, class_id as u64));
    let max_dy = (jitter_frac * h as f64).floor() as i64;
    let max_dx = (jitter_frac * w as f64).floor() as i64;
    let mut shift = |lo: i64| -> i64 {
        if lo == 0 {
            0
        } else {
            rng.gen_range(-lo..=lo)
        }
    };
    let jy0 = y0 as i64 + shift(max_dy);
    let jy1 = y1 as i64 + shift(max_dy);
    let jx0 = x0 as i64 + shift(max_dx);
    let jx1 = x1 as i64 + shift(max_dx);

    Ok(BoxPrompt {
        y0: jy0.clamp(0, cy as i64) as usize,
        y1: jy1.clamp(cy as i64 + 1, h as i64) as usize,
        x0: jx0.clamp(0, cx as i64) as usize,
        x1: jx1.clamp(cx as i64 + 1, w as i64) as usize,
        class_id,
    })
}

/// One jittered tight box per foreground class present in the label map,
/// ordered by class id; falls back to the full-image box when the map has
/// no foreground at all.
pub fn prompt_set_from_label(
    label: &[u8],
    h: usize,
    w: usize,
    classes: usize,
    jitter_frac: f64,
    seed: u64,
) -> SynthResult<Vec<BoxPrompt>> {
    let mut present = vec![false; classes];
    for &l in label {
        if (l as usize) < classes {
            present[l as usize] = true;
        }
    }
    let mut prompts = Vec::new();
    for cls in 1..classes {
        if present[cls] {
            prompts.push(synth_box_prompt(
                label,
                h,
                w,
                cls as u8,
                jitter_frac,
                seed,
            )?);
        }
    }
    if prompts.is_empty() {
        prompts.push(BoxPrompt::full_image(h, w));
    }
    Ok(prompts)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_params() -> DomainParams {
        DomainParams {
            shape_count: 4,
            intensity_means: vec![0.15, 0.35, 0.55, 0.75, 0.9],
            noise_std: 0.04,
            deformation_amplitude: 0.3,
            intensity_jitter: 0.05,
        }
    }

    #[test]
    fn identical_seed_and_params_reproduce_the_scene() {
        let p = test_params();
        let a = gen_scene(77, &p, 5, 64, 64).unwrap();
        let b = gen_scene(77, &p, 5, 64, 64).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn different_params_change_the_scene_for_the_same_seed() {
        let p = test_params();
        let mut q = p.clone();
        q.deformation_amplitude = 0.6;
        let a = gen_scene(77, &p, 5, 64, 64).unwrap();
        let b = gen_scene(77, &q, 5, 64, 64).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn coverage_band_holds_across_a_thousand_seeds() {
        let p = test_params();
        for seed in 0..1000 {
            let s = gen_scene(seed, &p, 5, 64, 64).unwrap();
            let fg = s.foreground_fraction();
            assert!(
                (COVERAGE_MIN..=COVERAGE_MAX).contains(&fg),
                "seed {seed}: coverage {fg}"
            );
            assert!(s.image.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
            assert!(s.label.iter().all(|&l| (l as usize) < 5));
        }
    }

    #[test]
    fn zero_noise_zero_jitter_gives_piecewise_constant_class_means() {
        let mut p = test_params();
        p.noise_std = 0.0;
        p.intensity_jitter = 0.0;
        let s = gen_scene(3, &p, 5, 32, 32).unwrap();
        for (px, &l) in s.image.data().iter().zip(&s.label) {
            assert_eq!(*px, p.intensity_means[l as usize]);
        }
    }

    #[test]
    fn corpus_splits_are_sized_and_seed_disjoint() {
        let p = test_params();
        let split = SplitSpec {
            n_labeled: 2,
            n_unlabeled: 4,
            n_val: 1,
            n_test: 2,
            seed: 5,
        };
        let c = make_corpus(&split, &p, &p, 999, 10, 5, 32, 32).unwrap();
        assert_eq!(c.teacher.len(), 20);
        assert_eq!(c.labeled.len(), 2);
        assert_eq!(c.unlabeled.len(), 4);
        assert_eq!(c.val.len(), 1);
        assert_eq!(c.test.len(), 2);
        let mut seen = std::collections::HashSet::new();
        for s in c
            .teacher
            .iter()
            .chain(&c.labeled)
            .chain(&c.val)
            .chain(&c.test)
        {
            assert!(seen.insert(s.seed));
        }
        for u in &c.unlabeled {
            assert!(seen.insert(u.seed));
        }
    }

    #[test]
    fn corpus_rejects_inverted_label_regime() {
        let p = test_params();
        let split = SplitSpec {
            n_labeled: 5,
            n_unlabeled: 3,
            n_val: 1,
            n_test: 1,
            seed: 5,
        };
        assert!(matches!(
            make_corpus(&split, &p, &p, 999, 10, 5, 32, 32),
            Err(SynthError::SplitInvalid(_))
        ));
    }

    #[test]
    fn mix_replaces_exactly_ceil_ratio_cells() {
        // ratio 0.6 on a 4×4 grid → ⌈9.6⌉ = 10 patches for every seed.
        let p = test_params();
        let a = gen_scene(1, &p, 5, 32, 32).unwrap();
        let b = gen_scene(2, &p, 5, 32, 32).unwrap();
        let cell_px = (32 / 4) * (32 / 4);
        for seed in 0..1000 {
            let m = copy_paste_mix(
                (&a.image, &a.label),
                (&b.image, &b.label),
                4,
                0.6,
                seed,
            )
            .unwrap();
            let marked = m.patch_mask.iter().filter(|&&x| x).count();
            assert_eq!(marked, 10 * cell_px, "seed {seed}");
            // Image and label are mixed with the identical mask.
            for i in 0..m.patch_mask.len() {
                if m.patch_mask[i] {
                    assert_eq!(m.image.data()[i], a.image.data()[i]);
                    assert_eq!(m.label[i], a.label[i]);
                } else {
                    assert_eq!(m.image.data()[i], b.image.data()[i]);
                    assert_eq!(m.label[i], b.label[i]);
                }
            }
        }
    }

    #[test]
    fn mix_validates_grid_and_ratio() {
        let p = test_params();
        let a = gen_scene(1, &p, 5, 30, 30).unwrap();
        assert!(matches!(
            copy_paste_mix((&a.image, &a.label), (&a.image, &a.label), 4, 0.6, 0),
            Err(SynthError::GridIndivisible { .. })
        ));
        let b = gen_scene(1, &p, 5, 32, 32).unwrap();
        assert!(matches!(
            copy_paste_mix((&b.image, &b.label), (&b.image, &b.label), 4, 1.0, 0),
            Err(SynthError::RatioOutOfRange { .. })
        ));
    }

    #[test]
    fn tight_box_is_exact_without_jitter() {
        // A 5×13 rectangle of class 2 at rows 4..9, cols 6..19.
        let (h, w) = (32, 32);
        let mut label = vec![0u8; h * w];
        for y in 4..9 {
            for x in 6..19 {
                label[y * w + x] = 2;
            }
        }
        let b = synth_box_prompt(&label, h, w, 2, 0.0, 123).unwrap();
        assert_eq!((b.y0, b.x0, b.y1, b.x1), (4, 6, 9, 19));
        assert_eq!(b.class_id, 2);
    }

    #[test]
    fn jittered_boxes_stay_valid_and_cover_the_tight_center() {
        let (h, w) = (64, 64);
        let mut label = vec![0u8; h * w];
        for y in 10..22 {
            for x in 30..45 {
                label[y * w + x] = 1;
            }
        }
        let (cy, cx) = ((10 + 22 - 1) / 2, (30 + 45 - 1) / 2);
        let mut saw_shift = false;
        for seed in 0..1000 {
            let b = synth_box_prompt(&label, h, w, 1, 20.0 / 256.0, seed).unwrap();
            assert!(b.is_valid(h, w), "seed {seed}: {b:?}");
            assert!(b.y0 <= cy && cy < b.y1, "seed {seed}: {b:?}");
            assert!(b.x0 <= cx && cx < b.x1, "seed {seed}: {b:?}");
            if (b.y0, b.x0, b.y1, b.x1) != (10, 30, 22, 45) {
                saw_shift = true;
            }
        }
        assert!(saw_shift, "jitter never moved any edge");
    }

    #[test]
    fn jitter_magnitude_follows_the_image_side() {
        // jitter_frac = 20/256 on a 256-wide axis allows shifts up to 20 px.
        let (h, w) = (256, 256);
        let mut label = vec![0u8; h * w];
        for y in 100..140 {
            for x in 100..140 {
                label[y * w + x] = 1;
            }
        }
        let mut max_seen = 0i64;
        for seed in 0..500 {
            let b = synth_box_prompt(&label, h, w, 1, 20.0 / 256.0, seed).unwrap();
            for (jittered, tight) in [
                (b.y0 as i64, 100),
                (b.y1 as i64, 140),
                (b.x0 as i64, 100),
                (b.x1 as i64, 140),
            ] {
                max_seen = max_seen.max((jittered - tight).abs());
            }
        }
        assert!(max_seen <= 20);
        assert!(max_seen >= 15, "jitter suspiciously small: {max_seen}");
    }

    #[test]
    fn absent_class_is_an_error_and_empty_label_falls_back_to_full_box() {
        let label = vec![0u8; 16 * 16];
        assert!(matches!(
            synth_box_prompt(&label, 16, 16, 3, 0.1, 0),
            Err(SynthError::ClassAbsent { class_id: 3 })
        ));
        let ps = prompt_set_from_label(&label, 16, 16, 4, 0.1, 0).unwrap();
        assert_eq!(ps, vec![BoxPrompt::full_image(16, 16)]);
    }

    #[test]
    fn prompt_set_has_one_box_per_present_class() {
        let (h, w) = (32, 32);
        let mut label = vec![0u8; h * w];
        for x in 2..9 {
            label[5 * w + x] = 1;
        }
        for x in 12..20 {
            label[20 * w + x] = 3;
        }
        let ps = prompt_set_from_label(&label, h, w, 5, 0.0, 9).unwrap();
        assert_eq!(ps.len(), 2);
        assert_eq!(ps[0].class_id, 1);
        assert_eq!(ps[1].class_id, 3);
    }
}
