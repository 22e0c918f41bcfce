//! Uncertainty-aware pseudo-label fusion.
//!
//! Two probability fields vote on every pixel of an unannotated image: one
//! from the frozen prompt-conditioned network (the "generalist") and one
//! from the EMA twin of the task network (the "specialist"). Normalized
//! entropy grades each vote; a pixel joins the trusted region Ω* when at
//! least one voter's entropy clears the confidence threshold τ, and inside
//! the region the fused distribution is either the confident voter's own
//! or, when both qualify, their exponential-weight blend
//! `w = e^(−u_G) / (e^(−u_G) + e^(−u_S))`.
//!
//! Pixels outside Ω* still carry the blend (for inspection and export) but
//! are excluded from every loss.

use thiserror::Error;

use crate::autodiff::{Graph, GraphError, NodeId};
use crate::models::{ModelError, ProbMap};
use crate::objectives::{masked_ce_dice, CeDice, ObjectiveError};

/// Simplex tolerance applied to fusion inputs.
pub const SIMPLEX_TOL: f64 = 1e-9;

pub type UaplResult<T> = Result<T, UaplError>;

#[derive(Debug, Error)]
pub enum UaplError {
    #[error("probability fields disagree in shape: {0}")]
    ShapeMismatch(String),
    #[error("confidence threshold {tau} outside [0, 1]")]
    TauOutOfRange { tau: f64 },
    #[error("normalized entropy needs >= 2 classes, got {classes}")]
    TooFewClasses { classes: usize },
    #[error("restriction mask has {got} entries, expected {expected}")]
    RestrictLength { expected: usize, got: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Per-pixel normalized entropy in [0, 1]: 0 = a one-hot vote, 1 = uniform.
#[derive(Debug, Clone, PartialEq)]
pub struct UncMap {
    h: usize,
    w: usize,
    data: Vec<f64>,
}

impl UncMap {
    pub fn h(&self) -> usize {
        self.h
    }

    pub fn w(&self) -> usize {
        self.w
    }

    pub fn values(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data[y * self.w + x]
    }
}

/// Shannon entropy of each pixel's class vector, normalized by ln C so the
/// range is exactly [0, 1]. `0·ln 0` contributes zero. The input must lie
/// on the simplex within [`SIMPLEX_TOL`].
pub fn entropy_map(prob: &ProbMap) -> UaplResult<UncMap> {
    let c = prob.classes();
    if c < 2 {
        return Err(UaplError::TooFewClasses { classes: c });
    }
    prob.validate_simplex(SIMPLEX_TOL)?;
    let ln_c = (c as f64).ln();
    let data = (0..prob.n_pixels())
        .map(|i| {
            let raw: f64 = prob
                .pixel(i)
                .iter()
                .map(|&p| if p > 0.0 { -p * p.ln() } else { 0.0 })
                .sum();
            // Floating-point slack can push u a hair outside [0, 1]; the
            // invariant is exact, so clamp.
            (raw / ln_c).clamp(0.0, 1.0)
        })
        .collect();
    Ok(UncMap {
        h: prob.h(),
        w: prob.w(),
        data,
    })
}

/// `true` where uncertainty does not exceed the threshold (boundary pixels
/// count as confident).
pub fn confidence_mask(u: &UncMap, tau: f64) -> UaplResult<Vec<bool>> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(UaplError::TauOutOfRange { tau });
    }
    Ok(u.data.iter().map(|&v| v <= tau).collect())
}

/// One pixel's fusion outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct PixelFusion {
    pub p: Vec<f64>,
    /// Weight given to the generalist's vote (1 = generalist only).
    pub weight: f64,
    /// Whether the pixel belongs to the trusted region Ω*.
    pub in_region: bool,
}

/// The per-pixel fusion rule. Exposed separately so its arithmetic can be
/// pinned against hand-computed values.
pub fn fuse_pixel(
    p_gen: &[f64],
    p_spec: &[f64],
    u_gen: f64,
    u_spec: f64,
    confident_gen: bool,
    confident_spec: bool,
) -> PixelFusion {
    let blend_w = {
        let eg = (-u_gen).exp();
        let es = (-u_spec).exp();
        eg / (eg + es)
    };
    match (confident_gen, confident_spec) {
        (true, false) => PixelFusion {
            p: p_gen.to_vec(),
            weight: 1.0,
            in_region: true,
        },
        (false, true) => PixelFusion {
            p: p_spec.to_vec(),
            weight: 0.0,
            in_region: true,
        },
        (both, _) => PixelFusion {
            p: p_gen
                .iter()
                .zip(p_spec)
                .map(|(&a, &b)| blend_w * a + (1.0 - blend_w) * b)
                .collect(),
            weight: blend_w,
            in_region: both, // true only for the (true, true) arm here
        },
    }
}

/// Fused pseudo-labels over one image.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionResult {
    pub p_tilde: ProbMap,
    /// Per-pixel argmax of `p_tilde` (ties to the lowest class id).
    pub y_tilde: Vec<u8>,
    /// The trusted region Ω*: at least one voter was confident.
    pub omega: Vec<bool>,
    /// Generalist weight per pixel (formula value everywhere, including
    /// outside Ω*).
    pub weight_gen: Vec<f64>,
}

impl FusionResult {
    /// Fraction of pixels inside Ω*.
    pub fn coverage(&self) -> f64 {
        if self.omega.is_empty() {
            return 0.0;
        }
        self.omega.iter().filter(|&&b| b).count() as f64 / self.omega.len() as f64
    }
}

/// Fuses the generalist and specialist probability fields at threshold τ.
pub fn fuse(p_gen: &ProbMap, p_spec: &ProbMap, tau: f64) -> UaplResult<FusionResult> {
    if p_gen.h() != p_spec.h() || p_gen.w() != p_spec.w() || p_gen.classes() != p_spec.classes()
    {
        return Err(UaplError::ShapeMismatch(format!(
            "{}x{}x{} vs {}x{}x{}",
            p_gen.h(),
            p_gen.w(),
            p_gen.classes(),
            p_spec.h(),
            p_spec.w(),
            p_spec.classes()
        )));
    }
    let u_gen = entropy_map(p_gen)?;
    let u_spec = entropy_map(p_spec)?;
    let m_gen = confidence_mask(&u_gen, tau)?;
    let m_spec = confidence_mask(&u_spec, tau)?;

    let n = p_gen.n_pixels();
    let c = p_gen.classes();
    let mut fused = Vec::with_capacity(n * c);
    let mut omega = Vec::with_capacity(n);
    let mut weight_gen = Vec::with_capacity(n);
    for i in 0..n {
        let px = fuse_pixel(
            p_gen.pixel(i),
            p_spec.pixel(i),
            u_gen.values()[i],
            u_spec.values()[i],
            m_gen[i],
            m_spec[i],
        );
        fused.extend_from_slice(&px.p);
        omega.push(px.in_region);
        weight_gen.push(px.weight);
    }
    let p_tilde = ProbMap::from_vec(p_gen.h(), p_gen.w(), c, fused)?;
    let y_tilde = p_tilde.argmax();
    Ok(FusionResult {
        p_tilde,
        y_tilde,
        omega,
        weight_gen,
    })
}

/// Degenerate fusion with the specialist as the only voter (the
/// mean-teacher ablation): the field is copied, the trusted region is the
/// specialist's own confidence mask, and the generalist weight is zero.
pub fn specialist_only(p_spec: &ProbMap, tau: f64) -> UaplResult<FusionResult> {
    let u = entropy_map(p_spec)?;
    let omega = confidence_mask(&u, tau)?;
    Ok(FusionResult {
        y_tilde: p_spec.argmax(),
        p_tilde: p_spec.clone(),
        omega,
        weight_gen: vec![0.0; u.values().len()],
    })
}

/// Pseudo-label supervision: CE + soft Dice of `prob` against the fused
/// hard labels, over `Ω* ∩ restrict`. Returns `Ok(None)` when that
/// intersection is empty — the caller decides what zero supervision means.
pub fn pseudo_loss(
    g: &mut Graph,
    prob: NodeId,
    fusion: &FusionResult,
    restrict: &[bool],
) -> UaplResult<Option<CeDice>> {
    let n = fusion.omega.len();
    if restrict.len() != n {
        return Err(UaplError::RestrictLength {
            expected: n,
            got: restrict.len(),
        });
    }
    let mask: Vec<bool> = fusion
        .omega
        .iter()
        .zip(restrict)
        .map(|(&o, &r)| o && r)
        .collect();
    Ok(masked_ce_dice(
        g,
        prob,
        &fusion.y_tilde,
        &mask,
        fusion.p_tilde.classes(),
    )?)
}
