//! Flat binary containers for scenes (and, alongside, a JSON sidecar with
//! the generator settings), chosen over a general serialization format so
//! round trips are bit-exact by construction: `f64` values are written as
//! little-endian bit patterns and read back verbatim.
//!
//! Scene layout:
//!
//! ```text
//! magic  b"UNCL"        4 bytes
//! version u32 LE        currently 1
//! h, w, c u32 LE        image height, width, class count
//! image  h·w f64 LE     row-major intensities
//! label  h·w u8         row-major class ids, each < c
//! ```
//!
//! The sidecar (same path with a `.json` extension) records the generator
//! seed and [`DomainParams`] so a scene file is reproducible evidence, not
//! just pixels.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DomainParams, Scene, SynthError, SynthResult};
use crate::autodiff::Array;
use crate::models::ProbMap;
use crate::uapl::FusionResult;

pub const SCENE_MAGIC: &[u8; 4] = b"UNCL";
pub const SCENE_VERSION: u32 = 1;
pub const FUSION_MAGIC: &[u8; 4] = b"UNCF";
pub const FUSION_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSidecar {
    pub seed: u64,
    pub classes: usize,
    pub params: DomainParams,
}

fn sidecar_path(path: &Path) -> std::path::PathBuf {
    path.with_extension("json")
}

fn put_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn take_u32(bytes: &[u8], off: &mut usize) -> SynthResult<u32> {
    let end = *off + 4;
    if end > bytes.len() {
        return Err(SynthError::BadContainer("truncated header".into()));
    }
    let v = u32::from_le_bytes(bytes[*off..end].try_into().expect("4 bytes"));
    *off = end;
    Ok(v)
}

/// Writes the binary scene plus its JSON sidecar.
pub fn write_scene(path: &Path, scene: &Scene, params: &DomainParams) -> SynthResult<()> {
    let (h, w) = (scene.h(), scene.w());
    if scene.label.len() != h * w {
        return Err(SynthError::ShapeMismatch(format!(
            "label length {} vs {h}x{w} image",
            scene.label.len()
        )));
    }
    let mut buf = Vec::with_capacity(20 + h * w * 9);
    buf.extend_from_slice(SCENE_MAGIC);
    put_u32(&mut buf, SCENE_VERSION);
    put_u32(&mut buf, h as u32);
    put_u32(&mut buf, w as u32);
    put_u32(&mut buf, scene.classes as u32);
    for &v in scene.image.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&scene.label);
    fs::File::create(path)?.write_all(&buf)?;

    let sidecar = SceneSidecar {
        seed: scene.seed,
        classes: scene.classes,
        params: params.clone(),
    };
    let json = serde_json::to_string_pretty(&sidecar)
        .map_err(|e| SynthError::BadContainer(format!("sidecar encode: {e}")))?;
    fs::write(sidecar_path(path), json)?;
    Ok(())
}

/// Reads a scene and its sidecar back, validating the header and that every
/// label id is below the recorded class count.
pub fn read_scene(path: &Path) -> SynthResult<(Scene, SceneSidecar)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 20 || &bytes[..4] != SCENE_MAGIC {
        return Err(SynthError::BadContainer("bad magic".into()));
    }
    let mut off = 4;
    let version = take_u32(&bytes, &mut off)?;
    if version != SCENE_VERSION {
        return Err(SynthError::BadContainer(format!(
            "unsupported version {version}"
        )));
    }
    let h = take_u32(&bytes, &mut off)? as usize;
    let w = take_u32(&bytes, &mut off)? as usize;
    let c = take_u32(&bytes, &mut off)? as usize;
    let n = h * w;
    let expected = off + n * 8 + n;
    if bytes.len() != expected {
        return Err(SynthError::BadContainer(format!(
            "length {} != expected {expected}",
            bytes.len()
        )));
    }
    let mut image = Vec::with_capacity(n);
    for i in 0..n {
        let s = off + i * 8;
        image.push(f64::from_le_bytes(
            bytes[s..s + 8].try_into().expect("8 bytes"),
        ));
    }
    off += n * 8;
    let label = bytes[off..off + n].to_vec();
    if let Some(&bad) = label.iter().find(|&&l| l as usize >= c) {
        return Err(SynthError::BadContainer(format!(
            "label id {bad} >= class count {c}"
        )));
    }

    let json = fs::read_to_string(sidecar_path(path))?;
    let sidecar: SceneSidecar = serde_json::from_str(&json)
        .map_err(|e| SynthError::BadContainer(format!("sidecar decode: {e}")))?;
    if sidecar.classes != c {
        return Err(SynthError::BadContainer(format!(
            "sidecar classes {} != container classes {c}",
            sidecar.classes
        )));
    }
    let scene = Scene {
        image: Array::from_vec(vec![h, w], image)?,
        label,
        classes: c,
        seed: sidecar.seed,
    };
    Ok((scene, sidecar))
}

/// Writes a fused pseudo-label record:
///
/// ```text
/// magic  b"UNCF"        4 bytes
/// version u32 LE        currently 1
/// h, w, c u32 LE
/// p_tilde h·w·c f64 LE  class-major (one full-resolution plane per class)
/// y_tilde h·w u8        fused hard labels
/// omega   h·w u8        1 inside the trusted region, 0 outside
/// weights h·w f64 LE    per-pixel generalist weight
/// ```
pub fn write_fusion(path: &Path, fusion: &FusionResult) -> SynthResult<()> {
    let (h, w, c) = (
        fusion.p_tilde.h(),
        fusion.p_tilde.w(),
        fusion.p_tilde.classes(),
    );
    let n = h * w;
    if fusion.y_tilde.len() != n || fusion.omega.len() != n || fusion.weight_gen.len() != n {
        return Err(SynthError::ShapeMismatch(format!(
            "fusion side arrays ({}, {}, {}) vs {n} pixels",
            fusion.y_tilde.len(),
            fusion.omega.len(),
            fusion.weight_gen.len()
        )));
    }
    let mut buf = Vec::with_capacity(20 + n * (c + 1) * 8 + 2 * n);
    buf.extend_from_slice(FUSION_MAGIC);
    put_u32(&mut buf, FUSION_VERSION);
    put_u32(&mut buf, h as u32);
    put_u32(&mut buf, w as u32);
    put_u32(&mut buf, c as u32);
    for v in fusion.p_tilde.to_class_major() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&fusion.y_tilde);
    buf.extend(fusion.omega.iter().map(|&b| b as u8));
    for &v in &fusion.weight_gen {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

/// Reads a fused pseudo-label record, validating the header, region flags,
/// and that the stored hard labels are the argmax of the stored field.
pub fn read_fusion(path: &Path) -> SynthResult<FusionResult> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 20 || &bytes[..4] != FUSION_MAGIC {
        return Err(SynthError::BadContainer("bad magic".into()));
    }
    let mut off = 4;
    let version = take_u32(&bytes, &mut off)?;
    if version != FUSION_VERSION {
        return Err(SynthError::BadContainer(format!(
            "unsupported version {version}"
        )));
    }
    let h = take_u32(&bytes, &mut off)? as usize;
    let w = take_u32(&bytes, &mut off)? as usize;
    let c = take_u32(&bytes, &mut off)? as usize;
    let n = h * w;
    let expected = off + n * c * 8 + 2 * n + n * 8;
    if bytes.len() != expected {
        return Err(SynthError::BadContainer(format!(
            "length {} != expected {expected}",
            bytes.len()
        )));
    }
    let mut planes = Vec::with_capacity(n * c);
    for i in 0..n * c {
        let s = off + i * 8;
        planes.push(f64::from_le_bytes(
            bytes[s..s + 8].try_into().expect("8 bytes"),
        ));
    }
    off += n * c * 8;
    let p_tilde = ProbMap::from_class_major(h, w, c, &planes)
        .map_err(|e| SynthError::BadContainer(format!("field decode: {e}")))?;
    let y_tilde = bytes[off..off + n].to_vec();
    off += n;
    if y_tilde != p_tilde.argmax() {
        return Err(SynthError::BadContainer(
            "stored labels disagree with the stored field's argmax".into(),
        ));
    }
    let mut omega = Vec::with_capacity(n);
    for &b in &bytes[off..off + n] {
        match b {
            0 => omega.push(false),
            1 => omega.push(true),
            other => {
                return Err(SynthError::BadContainer(format!(
                    "region flag {other} is not 0/1"
                )))
            }
        }
    }
    off += n;
    let mut weight_gen = Vec::with_capacity(n);
    for i in 0..n {
        let s = off + i * 8;
        weight_gen.push(f64::from_le_bytes(
            bytes[s..s + 8].try_into().expect("8 bytes"),
        ));
    }
    Ok(FusionResult {
        p_tilde,
        y_tilde,
        omega,
        weight_gen,
    })
}
