//! Feature distillation between the two encoders.
//!
//! The compact encoder's intermediate token maps are matched against
//! deeper layers of the wide frozen encoder through a fixed layer pairing,
//! after a learned projection lifts them into the wide model's embedding
//! width. A second, separately parameterized projection of the compact
//! encoder's final layer is matched against the frozen encoder's
//! prompt-fused embedding.

use thiserror::Error;

use crate::autodiff::{Graph, GraphError, GraphResult, NodeId};

pub type DistillResult<T> = Result<T, DistillError>;

#[derive(Debug, Error)]
pub enum DistillError {
    #[error("layer map is empty")]
    EmptyMap,
    #[error("layer map pair ({student}, {teacher}) outside depths {student_depth}/{teacher_depth}")]
    PairOutOfRange {
        student: usize,
        teacher: usize,
        student_depth: usize,
        teacher_depth: usize,
    },
    #[error("duplicate student layer {student} in layer map")]
    DuplicateStudentLayer { student: usize },
    #[error("feature list length {got} does not match layer map size {expected}")]
    FeatureCount { expected: usize, got: usize },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

/// Pairs of (compact-encoder layer, wide-encoder layer), 1-indexed.
///
/// The default pairing matches compact layers 1, 2, 3 against wide layers
/// 4, 8, 12 — each shallow layer supervised by a proportionally deeper one.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerMap {
    pairs: Vec<(usize, usize)>,
}

impl LayerMap {
    pub fn new(
        pairs: Vec<(usize, usize)>,
        student_depth: usize,
        teacher_depth: usize,
    ) -> DistillResult<Self> {
        if pairs.is_empty() {
            return Err(DistillError::EmptyMap);
        }
        let mut seen = std::collections::HashSet::new();
        for &(s, t) in &pairs {
            if s == 0 || t == 0 || s > student_depth || t > teacher_depth {
                return Err(DistillError::PairOutOfRange {
                    student: s,
                    teacher: t,
                    student_depth,
                    teacher_depth,
                });
            }
            if !seen.insert(s) {
                return Err(DistillError::DuplicateStudentLayer { student: s });
            }
        }
        Ok(Self { pairs })
    }

    /// The standard 3-pair map for a 4-layer compact / 12-layer wide pair.
    pub fn standard(student_depth: usize, teacher_depth: usize) -> DistillResult<Self> {
        Self::new(vec![(1, 4), (2, 8), (3, 12)], student_depth, teacher_depth)
    }

    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Mean over layer pairs of the elementwise MSE between the projected
/// compact-encoder features and the matching frozen-encoder features.
///
/// `projected` must be ordered exactly as the layer map's pairs; each entry
/// is already lifted to the frozen encoder's width.
pub fn visual_loss(
    g: &mut Graph,
    map: &LayerMap,
    projected: &[NodeId],
    teacher: &[NodeId],
) -> DistillResult<NodeId> {
    if projected.len() != map.len() || teacher.len() != map.len() {
        return Err(DistillError::FeatureCount {
            expected: map.len(),
            got: projected.len().min(teacher.len()),
        });
    }
    let mut acc: Option<NodeId> = None;
    for (&p, &t) in projected.iter().zip(teacher) {
        let pair = g.mse(p, t)?;
        acc = Some(match acc {
            Some(a) => g.add(a, pair)?,
            None => pair,
        });
    }
    Ok(g.scale(acc.expect("map non-empty"), 1.0 / map.len() as f64)?)
}

/// MSE between the projected final compact-encoder features and the frozen
/// encoder's prompt-fused embedding.
pub fn semantic_loss(g: &mut Graph, projected_final: NodeId, fused: NodeId) -> GraphResult<NodeId> {
    g.mse(projected_final, fused)
}

/// Combined distillation term `L_vis + L_sem` (the stage objective applies
/// the ramp weight).
pub fn distill_loss(g: &mut Graph, l_vis: NodeId, l_sem: NodeId) -> GraphResult<NodeId> {
    g.add(l_vis, l_sem)
}
