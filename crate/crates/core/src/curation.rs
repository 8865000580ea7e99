//! Dataset curation pipeline: quality-metric gating, non-overlapping patch
//! extraction, flat-region rejection, and a line-delimited record ledger.
//!
//! An image enters, gets scored (NIQE-style, BRISQUE-style, optional plugged
//! NIMA), passes the gate only if every enabled gate agrees, and its 512^2
//! patches are kept unless more than half of a patch's 16x16 cells are flat.
//! The ledger is exact: images_in == accepted + rejected, and the emitted
//! patch count is the sum over accepted images after flat filtering.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imageio::{load_image, luminance, save_png};
use crate::quality::{BrisqueModel, NiqeModel, NIQE_PATCH};

/// Lower-is-better thresholds for NIQE/BRISQUE-style gates; higher-is-better
/// for the optional NIMA gate. A `None` disables that gate.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct QualityThresholds {
    pub niqe: Option<f64>,
    pub brisque: Option<f64>,
    pub nima: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurationConfig {
    pub thresholds: QualityThresholds,
    pub patch_size: usize,
    pub flat_cell: usize,
    pub flat_tau: f64,
    pub flat_max_fraction: f64,
}

impl Default for CurationConfig {
    fn default() -> Self {
        CurationConfig {
            thresholds: QualityThresholds::default(),
            patch_size: 512,
            flat_cell: 16,
            flat_tau: 2.0,
            flat_max_fraction: 0.5,
        }
    }
}

/// Pluggable aesthetic scorer. The pipeline ships no model; the slot reports
/// "unavailable" unless an external scorer is provided.
pub trait NimaScorer: Sync {
    fn score(&self, img: &Array3<f64>) -> f64;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub niqe: f64,
    pub brisque: f64,
    /// None = scorer unavailable.
    pub nima: Option<f64>,
}

/// Score one decoded image with the given pristine models.
pub fn score_image(
    img: &Array3<f64>,
    niqe: &NiqeModel,
    brisque: &BrisqueModel,
    nima: Option<&dyn NimaScorer>,
) -> Result<Scores> {
    let (_, h, w) = img.dim();
    if h < NIQE_PATCH || w < NIQE_PATCH {
        return Err(Error::argument(
            "image",
            format!("metric validity floor is {NIQE_PATCH}^2, got {h}x{w}"),
        ));
    }
    let luma = luminance(img);
    Ok(Scores {
        niqe: niqe.score(&luma)?,
        brisque: brisque.score(&luma),
        nima: nima.map(|s| s.score(img)),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateDecision {
    Accept,
    Reject { reason: String },
}

/// Consensus = conjunction: accept iff every enabled gate passes.
pub fn gate(scores: &Scores, thresholds: &QualityThresholds) -> Result<GateDecision> {
    if let Some(t) = thresholds.niqe {
        if scores.niqe > t {
            return Ok(GateDecision::Reject {
                reason: format!("niqe {:.4} > {:.4}", scores.niqe, t),
            });
        }
    }
    if let Some(t) = thresholds.brisque {
        if scores.brisque > t {
            return Ok(GateDecision::Reject {
                reason: format!("brisque {:.4} > {:.4}", scores.brisque, t),
            });
        }
    }
    if let Some(t) = thresholds.nima {
        match scores.nima {
            None => {
                return Err(Error::config(
                    "thresholds.nima",
                    "NIMA gate enabled but no scorer is plugged in",
                ))
            }
            Some(s) if s < t => {
                return Ok(GateDecision::Reject {
                    reason: format!("nima {s:.4} < {t:.4}"),
                })
            }
            Some(_) => {}
        }
    }
    Ok(GateDecision::Accept)
}

/// Row-major non-overlapping tiling; the remainder is cropped away.
pub fn extract_patches(img: &Array3<f64>, size: usize) -> Vec<Array3<f64>> {
    let (_, h, w) = img.dim();
    if size == 0 || h < size || w < size {
        return Vec::new();
    }
    let mut out = Vec::with_capacity((h / size) * (w / size));
    for py in 0..h / size {
        for px in 0..w / size {
            let mut patch = Array3::zeros((3, size, size));
            for c in 0..3 {
                for y in 0..size {
                    for x in 0..size {
                        patch[(c, y, x)] = img[(c, py * size + y, px * size + x)];
                    }
                }
            }
            out.push(patch);
        }
    }
    out
}

/// Fraction of `cell x cell` blocks whose luminance standard deviation falls
/// below `tau` (8-bit scale).
pub fn flat_fraction(luma: &Array2<f64>, cell: usize, tau: f64) -> f64 {
    let (h, w) = luma.dim();
    let (cy, cx) = (h / cell, w / cell);
    if cy == 0 || cx == 0 {
        return 1.0;
    }
    let mut flat = 0usize;
    for by in 0..cy {
        for bx in 0..cx {
            let mut sum = 0.0;
            let mut sq = 0.0;
            for y in by * cell..(by + 1) * cell {
                for x in bx * cell..(bx + 1) * cell {
                    let v = luma[(y, x)];
                    sum += v;
                    sq += v * v;
                }
            }
            let n = (cell * cell) as f64;
            let mean = sum / n;
            let var = (sq / n - mean * mean).max(0.0);
            if var.sqrt() < tau {
                flat += 1;
            }
        }
    }
    flat as f64 / (cy * cx) as f64
}

/// A patch is rejected when strictly more than `max_fraction` of it is flat;
/// exactly at the boundary it is kept.
pub fn reject_if_flat(patch: &Array3<f64>, cfg: &CurationConfig) -> bool {
    flat_fraction(&luminance(patch), cfg.flat_cell, cfg.flat_tau) > cfg.flat_max_fraction
}

/// One ledger line per source image, bit-stable field order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurationRecord {
    pub source: String,
    pub width: usize,
    pub height: usize,
    pub scores: Option<Scores>,
    pub decision: String,
    pub reject_reason: Option<String>,
    pub patch_count: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CurationSummary {
    pub images_in: usize,
    pub accepted: usize,
    pub rejected: usize,
    pub patches_emitted: usize,
    pub patches_rejected_flat: usize,
}

impl CurationSummary {
    /// Conservation: every input is either accepted or rejected.
    pub fn conserved(&self) -> bool {
        self.images_in == self.accepted + self.rejected
    }
}

/// Run the pipeline over a manifest of image paths. Writes accepted patches
/// as PNGs under `out_dir/patches/<stem>/pNNNN.png` and one JSONL record per
/// image to `out_dir/records.jsonl`. Deterministic and idempotent for a
/// fixed corpus and configuration.
pub fn run_curation(
    manifest: &[PathBuf],
    out_dir: &Path,
    cfg: &CurationConfig,
    niqe: &NiqeModel,
    brisque: &BrisqueModel,
    nima: Option<&dyn NimaScorer>,
) -> Result<(CurationSummary, Vec<CurationRecord>)> {
    fs::create_dir_all(out_dir.join("patches"))?;
    let mut records = Vec::new();
    let mut summary = CurationSummary::default();

    for path in manifest {
        summary.images_in += 1;
        let source = path.display().to_string();
        let img = match load_image(path) {
            Ok(img) => img,
            Err(e) => {
                summary.rejected += 1;
                records.push(CurationRecord {
                    source,
                    width: 0,
                    height: 0,
                    scores: None,
                    decision: "rejected".into(),
                    reject_reason: Some(format!("undecodable: {e}")),
                    patch_count: 0,
                });
                continue;
            }
        };
        let (_, h, w) = img.dim();
        let scores = match score_image(&img, niqe, brisque, nima) {
            Ok(s) => s,
            Err(e) => {
                summary.rejected += 1;
                records.push(CurationRecord {
                    source,
                    width: w,
                    height: h,
                    scores: None,
                    decision: "rejected".into(),
                    reject_reason: Some(e.to_string()),
                    patch_count: 0,
                });
                continue;
            }
        };
        match gate(&scores, &cfg.thresholds)? {
            GateDecision::Reject { reason } => {
                summary.rejected += 1;
                records.push(CurationRecord {
                    source,
                    width: w,
                    height: h,
                    scores: Some(scores),
                    decision: "rejected".into(),
                    reject_reason: Some(reason),
                    patch_count: 0,
                });
            }
            GateDecision::Accept => {
                summary.accepted += 1;
                let stem = path
                    .file_stem()
                    .map(|s| s.to_string_lossy().to_string())
                    .unwrap_or_else(|| format!("img{}", summary.images_in));
                let patch_dir = out_dir.join("patches").join(&stem);
                let mut kept = 0usize;
                let patches = extract_patches(&img, cfg.patch_size);
                if !patches.is_empty() {
                    fs::create_dir_all(&patch_dir)?;
                }
                for (i, patch) in patches.iter().enumerate() {
                    if reject_if_flat(patch, cfg) {
                        summary.patches_rejected_flat += 1;
                        continue;
                    }
                    kept += 1;
                    save_png(patch, patch_dir.join(format!("p{i:04}.png")))?;
                }
                summary.patches_emitted += kept;
                records.push(CurationRecord {
                    source,
                    width: w,
                    height: h,
                    scores: Some(scores),
                    decision: "accepted".into(),
                    reject_reason: None,
                    patch_count: kept,
                });
            }
        }
    }

    let mut ledger = fs::File::create(out_dir.join("records.jsonl"))?;
    for rec in &records {
        serde_json::to_writer(&mut ledger, rec)?;
        ledger.write_all(b"\n")?;
    }
    let mut sfile = fs::File::create(out_dir.join("summary.json"))?;
    serde_json::to_writer_pretty(&mut sfile, &summary)?;
    Ok((summary, records))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quality::synthetic_natural_luma;
    use ndarray::Array3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn gray_to_rgb(luma: &Array2<f64>) -> Array3<f64> {
        let (h, w) = luma.dim();
        let mut img = Array3::zeros((3, h, w));
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    img[(c, y, x)] = luma[(y, x)];
                }
            }
        }
        img
    }

    fn noise_rgb(seed: u64, h: usize, w: usize) -> Array3<f64> {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut img = Array3::zeros((3, h, w));
        for v in img.iter_mut() {
            *v = rng.gen_range(0.0..255.0);
        }
        img
    }

    #[test]
    fn gate_conjunction_and_reasons() {
        let scores = Scores {
            niqe: 2.0,
            brisque: 4.0,
            nima: None,
        };
        // all gates disabled: accept
        assert_eq!(
            gate(&scores, &QualityThresholds::default()).unwrap(),
            GateDecision::Accept
        );
        // one failing gate rejects and names itself
        let t = QualityThresholds {
            niqe: Some(1.0),
            ..Default::default()
        };
        match gate(&scores, &t).unwrap() {
            GateDecision::Reject { reason } => assert!(reason.contains("niqe")),
            _ => panic!("should reject"),
        }
        // enabled NIMA without a scorer is a configuration error
        let t = QualityThresholds {
            nima: Some(5.0),
            ..Default::default()
        };
        assert!(gate(&scores, &t).is_err());
    }

    #[test]
    fn patch_tiling_arithmetic() {
        let img = Array3::zeros((3, 1024, 1024));
        assert_eq!(extract_patches(&img, 512).len(), 4);
        let img = Array3::zeros((3, 1023, 1024));
        assert_eq!(extract_patches(&img, 512).len(), 2);
        let img = Array3::from_elem((3, 512, 512), 7.0);
        let ps = extract_patches(&img, 512);
        assert_eq!(ps.len(), 1);
        assert_eq!(ps[0], img);
        let img = Array3::zeros((3, 300, 600));
        assert!(extract_patches(&img, 512).is_empty());
    }

    #[test]
    fn flat_fraction_boundary_rule() {
        // constant patch: fraction 1, rejected
        let cfg = CurationConfig::default();
        let flat = Array3::from_elem((3, 128, 128), 50.0);
        assert!((flat_fraction(&luminance(&flat), 16, 2.0) - 1.0).abs() < 1e-12);
        assert!(reject_if_flat(&flat, &cfg));

        // i.i.d. noise (sigma 25): fraction 0, accepted
        let noisy = noise_rgb(5, 128, 128);
        assert_eq!(flat_fraction(&luminance(&noisy), 16, 2.0), 0.0);
        assert!(!reject_if_flat(&noisy, &cfg));

        // half flat / half noise: exactly 0.5 is kept (strict >)
        let mut half = noise_rgb(6, 128, 128);
        for c in 0..3 {
            for y in 0..64 {
                for x in 0..128 {
                    half[(c, y, x)] = 80.0;
                }
            }
        }
        let f = flat_fraction(&luminance(&half), 16, 2.0);
        assert!((f - 0.5).abs() < 1e-12, "fraction {f}");
        assert!(!reject_if_flat(&half, &cfg));
    }

    #[test]
    fn calibrated_thresholds_give_expected_acceptance_rate() {
        // 100-image calibration corpus; thresholds at the 60th percentile of
        // each score. With two strongly correlated gates the measured accept
        // rate sits between 0.6^2 and 0.6.
        let niqe = NiqeModel::synthetic_default();
        let brisque = BrisqueModel::synthetic_default();
        let mut scores = Vec::new();
        for i in 0..100u64 {
            let mut luma = synthetic_natural_luma(3000 + i, 128, 128);
            // spread of quality: add increasing amounts of noise
            let mut rng = ChaCha12Rng::seed_from_u64(i);
            let amp = (i % 10) as f64 * 4.0;
            for v in luma.iter_mut() {
                *v = (*v + rng.gen_range(-amp..=amp.max(1e-9))).clamp(0.0, 255.0);
            }
            let img = gray_to_rgb(&luma);
            scores.push(score_image(&img, niqe, brisque, None).unwrap());
        }
        let mut niqe_sorted: Vec<f64> = scores.iter().map(|s| s.niqe).collect();
        niqe_sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut brisque_sorted: Vec<f64> = scores.iter().map(|s| s.brisque).collect();
        brisque_sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let t = QualityThresholds {
            niqe: Some(niqe_sorted[59]),
            brisque: Some(brisque_sorted[59]),
            nima: None,
        };
        let accepted = scores
            .iter()
            .filter(|s| gate(s, &t).unwrap() == GateDecision::Accept)
            .count();
        let rate = accepted as f64 / 100.0;
        assert!(
            (0.36..=0.61).contains(&rate),
            "measured acceptance rate {rate}"
        );
    }

    #[test]
    fn loosening_thresholds_never_shrinks_the_accepted_set() {
        let niqe = NiqeModel::synthetic_default();
        let brisque = BrisqueModel::synthetic_default();
        let imgs: Vec<Array3<f64>> = (0..10)
            .map(|i| {
                if i % 3 == 0 {
                    noise_rgb(i as u64, 128, 128)
                } else {
                    gray_to_rgb(&synthetic_natural_luma(500 + i as u64, 128, 128))
                }
            })
            .collect();
        let scores: Vec<Scores> = imgs
            .iter()
            .map(|im| score_image(im, niqe, brisque, None).unwrap())
            .collect();
        let tight = QualityThresholds {
            niqe: Some(3.0),
            brisque: Some(1.0),
            nima: None,
        };
        let loose = QualityThresholds {
            niqe: Some(6.0),
            brisque: Some(2.5),
            nima: None,
        };
        for s in &scores {
            if gate(s, &tight).unwrap() == GateDecision::Accept {
                assert_eq!(gate(s, &loose).unwrap(), GateDecision::Accept);
            }
        }
    }
}
