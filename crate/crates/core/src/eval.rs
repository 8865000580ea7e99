//! Restoration metrics (PSNR/SSIM on RGB, 8-bit peak), the gray-world
//! color-balance pre-step, and benchmark execution over task manifests.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::arch::Model;
use crate::error::{Error, Result};
use crate::imageio::{from_model_output, load_image, to_model_batch};

pub const PSNR_CAP_DB: f64 = 100.0;
const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;

/// Peak signal-to-noise ratio over all RGB pixels, 255 peak, capped at
/// 100 dB for identical inputs.
pub fn psnr(reference: &Array3<f64>, output: &Array3<f64>) -> Result<f64> {
    if reference.dim() != output.dim() {
        return Err(Error::argument(
            "psnr",
            format!("shape mismatch {:?} vs {:?}", reference.dim(), output.dim()),
        ));
    }
    let mse = reference
        .iter()
        .zip(output.iter())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / reference.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (255.0f64 * 255.0 / mse).log10()).min(PSNR_CAP_DB))
}

fn gaussian_window(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size / 2) as isize;
    let mut taps: Vec<f64> = (-half..=half)
        .map(|i| (-((i * i) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = taps.iter().sum();
    for t in &mut taps {
        *t /= s;
    }
    taps
}

/// Mean structural similarity with an 11x11 Gaussian window (sigma 1.5),
/// standard stabilizing constants, valid-region windows, averaged over the
/// three channels.
pub fn ssim(reference: &Array3<f64>, output: &Array3<f64>) -> Result<f64> {
    if reference.dim() != output.dim() {
        return Err(Error::argument(
            "ssim",
            format!("shape mismatch {:?} vs {:?}", reference.dim(), output.dim()),
        ));
    }
    let (c, h, w) = reference.dim();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::argument(
            "ssim",
            format!("images must be at least {SSIM_WINDOW}x{SSIM_WINDOW}"),
        ));
    }
    let taps = gaussian_window(SSIM_WINDOW, SSIM_SIGMA);
    let c1 = (0.01f64 * 255.0) * (0.01 * 255.0);
    let c2 = (0.03f64 * 255.0) * (0.03 * 255.0);
    let half = SSIM_WINDOW / 2;

    let mut total = 0.0;
    let mut count = 0usize;
    for ch in 0..c {
        for wy in half..h - half {
            for wx in half..w - half {
                let mut mx = 0.0;
                let mut my = 0.0;
                let mut sxx = 0.0;
                let mut syy = 0.0;
                let mut sxy = 0.0;
                for (ky, ty) in taps.iter().enumerate() {
                    for (kx, tx) in taps.iter().enumerate() {
                        let wgt = ty * tx;
                        let a = reference[(ch, wy + ky - half, wx + kx - half)];
                        let b = output[(ch, wy + ky - half, wx + kx - half)];
                        mx += wgt * a;
                        my += wgt * b;
                        sxx += wgt * a * a;
                        syy += wgt * b * b;
                        sxy += wgt * a * b;
                    }
                }
                let vx = sxx - mx * mx;
                let vy = syy - my * my;
                let cov = sxy - mx * my;
                let val = ((2.0 * mx * my + c1) * (2.0 * cov + c2))
                    / ((mx * mx + my * my + c1) * (vx + vy + c2));
                total += val;
                count += 1;
            }
        }
    }
    Ok(total / count as f64)
}

/// Gray-World color balance: scale each channel so all channel means equal
/// the global mean, then clip. Returns the balanced image and whether the
/// scaling was applied (false = degenerate zero-mean channel, pass-through).
pub fn gray_world_balance(img: &Array3<f64>) -> (Array3<f64>, bool) {
    let (c, h, w) = img.dim();
    debug_assert_eq!(c, 3);
    let n = (h * w) as f64;
    let means: Vec<f64> = (0..3)
        .map(|ch| {
            let mut s = 0.0;
            for y in 0..h {
                for x in 0..w {
                    s += img[(ch, y, x)];
                }
            }
            s / n
        })
        .collect();
    if means.iter().any(|m| m.abs() < 1e-9) {
        return (img.clone(), false);
    }
    let global = means.iter().sum::<f64>() / 3.0;
    let mut out = img.clone();
    for ch in 0..3 {
        let scale = global / means[ch];
        for y in 0..h {
            for x in 0..w {
                out[(ch, y, x)] = (img[(ch, y, x)] * scale).clamp(0.0, 255.0);
            }
        }
    }
    (out, true)
}

/// What restores images during a benchmark run.
pub enum Restorer<'a> {
    /// Pass the degraded input through unchanged (oracle/identity baseline).
    Identity,
    Model(&'a Model),
}

impl Restorer<'_> {
    pub fn restore(&self, degraded: &Array3<f64>, gwa: bool) -> Result<Array3<f64>> {
        let pre = if gwa {
            gray_world_balance(degraded).0
        } else {
            degraded.clone()
        };
        match self {
            Restorer::Identity => Ok(pre),
            Restorer::Model(m) => {
                let batch = to_model_batch(&[pre])?;
                let out = m.forward(&batch)?;
                Ok(from_model_output(&out, 0))
            }
        }
    }
}

/// One line of a benchmark manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub task: String,
    pub degraded: PathBuf,
    pub clean: PathBuf,
}

/// Parse a line-delimited manifest: `task<TAB>degraded<TAB>clean` (any
/// whitespace run separates fields). Blank lines and `#` comments skipped.
pub fn parse_manifest(text: &str) -> Result<Vec<ManifestEntry>> {
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 3 {
            return Err(Error::Manifest(format!(
                "line {}: expected `task degraded clean`, got {line:?}",
                lineno + 1
            )));
        }
        out.push(ManifestEntry {
            task: fields[0].to_string(),
            degraded: PathBuf::from(fields[1]),
            clean: PathBuf::from(fields[2]),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task: String,
    pub evaluated: usize,
    pub skipped: usize,
    pub avg_psnr: f64,
    pub avg_ssim: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchResults {
    pub per_task: Vec<TaskResult>,
    pub overall_psnr: f64,
    pub overall_ssim: f64,
    pub evaluated: usize,
    pub skipped: usize,
}

impl BenchResults {
    /// Fixed-precision text table; byte-identical across runs on the same
    /// inputs.
    pub fn render_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{:<12} {:>6} {:>8} {:>10} {:>8}", "task", "n", "skipped", "PSNR", "SSIM");
        for t in &self.per_task {
            let _ = writeln!(
                s,
                "{:<12} {:>6} {:>8} {:>10.4} {:>8.4}",
                t.task, t.evaluated, t.skipped, t.avg_psnr, t.avg_ssim
            );
        }
        let _ = writeln!(
            s,
            "{:<12} {:>6} {:>8} {:>10.4} {:>8.4}",
            "average", self.evaluated, self.skipped, self.overall_psnr, self.overall_ssim
        );
        s
    }
}

/// Evaluate in-memory (task, degraded, clean) triples in manifest order.
pub fn evaluate_pairs(
    restorer: &Restorer,
    pairs: &[(String, Array3<f64>, Array3<f64>)],
    gwa: bool,
) -> Result<BenchResults> {
    let mut task_order: Vec<String> = Vec::new();
    let mut acc: std::collections::HashMap<String, (usize, f64, f64)> =
        std::collections::HashMap::new();
    for (task, degraded, clean) in pairs {
        if !task_order.contains(task) {
            task_order.push(task.clone());
        }
        let restored = restorer.restore(degraded, gwa)?;
        let p = psnr(clean, &restored)?;
        let s = ssim(clean, &restored)?;
        let e = acc.entry(task.clone()).or_insert((0, 0.0, 0.0));
        e.0 += 1;
        e.1 += p;
        e.2 += s;
    }
    let mut per_task = Vec::new();
    let mut tot_p = 0.0;
    let mut tot_s = 0.0;
    let mut tot_n = 0usize;
    for task in task_order {
        let (n, p, s) = acc[&task];
        per_task.push(TaskResult {
            task,
            evaluated: n,
            skipped: 0,
            avg_psnr: p / n as f64,
            avg_ssim: s / n as f64,
        });
        tot_p += p;
        tot_s += s;
        tot_n += n;
    }
    Ok(BenchResults {
        per_task,
        overall_psnr: tot_p / tot_n.max(1) as f64,
        overall_ssim: tot_s / tot_n.max(1) as f64,
        evaluated: tot_n,
        skipped: 0,
    })
}

/// Run a file-backed benchmark. Unreadable entries are recorded as skips and
/// excluded from the averages; the caller decides the exit status from
/// `skipped`.
pub fn run_benchmark(
    restorer: &Restorer,
    manifest: &[ManifestEntry],
    gwa: bool,
) -> Result<BenchResults> {
    let mut task_order: Vec<String> = Vec::new();
    let mut acc: std::collections::HashMap<String, (usize, usize, f64, f64)> =
        std::collections::HashMap::new();
    for entry in manifest {
        if !task_order.contains(&entry.task) {
            task_order.push(entry.task.clone());
        }
        let slot = acc.entry(entry.task.clone()).or_insert((0, 0, 0.0, 0.0));
        let loaded = load_image(&entry.degraded).and_then(|d| Ok((d, load_image(&entry.clean)?)));
        let (degraded, clean) = match loaded {
            Ok(pair) => pair,
            Err(_) => {
                slot.1 += 1;
                continue;
            }
        };
        let restored = restorer.restore(&degraded, gwa)?;
        let p = psnr(&clean, &restored)?;
        let s = ssim(&clean, &restored)?;
        slot.0 += 1;
        slot.2 += p;
        slot.3 += s;
    }
    let mut per_task = Vec::new();
    let mut tot_p = 0.0;
    let mut tot_s = 0.0;
    let mut tot_n = 0usize;
    let mut tot_skip = 0usize;
    for task in task_order {
        let (n, skipped, p, s) = acc[&task];
        per_task.push(TaskResult {
            task,
            evaluated: n,
            skipped,
            avg_psnr: if n > 0 { p / n as f64 } else { f64::NAN },
            avg_ssim: if n > 0 { s / n as f64 } else { f64::NAN },
        });
        tot_p += p;
        tot_s += s;
        tot_n += n;
        tot_skip += skipped;
    }
    Ok(BenchResults {
        per_task,
        overall_psnr: tot_p / tot_n.max(1) as f64,
        overall_ssim: tot_s / tot_n.max(1) as f64,
        evaluated: tot_n,
        skipped: tot_skip,
    })
}

/// Write results to a machine-readable JSON file next to the text table.
pub fn write_results(results: &BenchResults, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    serde_json::to_writer_pretty(&mut f, results)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::degrade::add_gaussian_noise;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn gradient_image(h: usize, w: usize) -> Array3<f64> {
        let mut img = Array3::zeros((3, h, w));
        for c in 0..3 {
            for y in 0..h {
                for x in 0..w {
                    img[(c, y, x)] = ((x + y * 2 + c * 17) % 200) as f64 + 20.0;
                }
            }
        }
        img
    }

    #[test]
    fn psnr_oracles() {
        let img = gradient_image(32, 32);
        assert_eq!(psnr(&img, &img).unwrap(), 100.0);

        // uniform +1 offset: MSE = 1 exactly, 20 log10(255) dB
        let plus1 = img.mapv(|v| v + 1.0);
        let expected = 20.0 * 255.0f64.log10();
        assert!((psnr(&img, &plus1).unwrap() - expected).abs() < 0.01);

        // +255 on a zero image: MSE = 255^2, 0 dB
        let zeros = Array3::zeros((3, 16, 16));
        let full = Array3::from_elem((3, 16, 16), 255.0);
        assert!((psnr(&zeros, &full).unwrap() - 0.0).abs() < 1e-12);

        // symmetry
        assert_eq!(
            psnr(&img, &plus1).unwrap(),
            psnr(&plus1, &img).unwrap()
        );

        let other = Array3::zeros((3, 8, 8));
        assert!(psnr(&img, &other).is_err());
    }

    #[test]
    fn psnr_decreases_with_noise_level() {
        let img = Array3::from_elem((3, 64, 64), 128.0);
        let mut prev = f64::INFINITY;
        for (i, sigma) in [15.0, 25.0, 50.0].into_iter().enumerate() {
            let mut rng = ChaCha12Rng::seed_from_u64(i as u64);
            let noisy = add_gaussian_noise(&img, sigma, &mut rng).unwrap();
            let p = psnr(&img, &noisy).unwrap();
            assert!(p < prev, "sigma {sigma}: {p} not below {prev}");
            prev = p;
        }
    }

    #[test]
    fn ssim_oracles() {
        let img = gradient_image(48, 48);
        assert!((ssim(&img, &img).unwrap() - 1.0).abs() < 1e-12);

        // inversion destroys structure on a fixed high-contrast test image
        let mut textured = Array3::zeros((3, 48, 48));
        for c in 0..3 {
            for y in 0..48 {
                for x in 0..48 {
                    let phase = (x + y) as f64 * std::f64::consts::PI / 4.0 + c as f64;
                    textured[(c, y, x)] = 127.5 + 127.5 * phase.sin();
                }
            }
        }
        let inverted = textured.mapv(|v| 255.0 - v);
        let s = ssim(&textured, &inverted).unwrap();
        assert!(s < 0.2, "inverted ssim {s}");
        let img = textured;

        // symmetry
        assert_eq!(ssim(&img, &inverted).unwrap(), ssim(&inverted, &img).unwrap());

        // constant vs constant+noise scores below the identical case
        let flat = Array3::from_elem((3, 48, 48), 100.0);
        let mut rng = ChaCha12Rng::seed_from_u64(1);
        let noisy = add_gaussian_noise(&flat, 50.0, &mut rng).unwrap();
        assert!(ssim(&flat, &noisy).unwrap() < 1.0);
    }

    #[test]
    fn gray_world_properties() {
        // already gray: unchanged up to clipping
        let gray = gradient_image(32, 32);
        let mut truly_gray = gray.clone();
        for y in 0..32 {
            for x in 0..32 {
                let v = gray[(0, y, x)];
                truly_gray[(1, y, x)] = v;
                truly_gray[(2, y, x)] = v;
            }
        }
        let (balanced, applied) = gray_world_balance(&truly_gray);
        assert!(applied);
        assert!(balanced
            .iter()
            .zip(truly_gray.iter())
            .all(|(a, b)| (a - b).abs() < 1e-9));

        // yellow cast: R, G high, B low; post-balance means equal within 1
        let mut cast = Array3::zeros((3, 64, 64));
        for y in 0..64 {
            for x in 0..64 {
                let base = 80.0 + ((x + y) % 60) as f64;
                cast[(0, y, x)] = base * 1.3;
                cast[(1, y, x)] = base * 1.2;
                cast[(2, y, x)] = base * 0.6;
            }
        }
        let (balanced, applied) = gray_world_balance(&cast);
        assert!(applied);
        let mean = |img: &Array3<f64>, c: usize| -> f64 {
            let mut s = 0.0;
            for y in 0..64 {
                for x in 0..64 {
                    s += img[(c, y, x)];
                }
            }
            s / (64.0 * 64.0)
        };
        let (m0, m1, m2) = (mean(&balanced, 0), mean(&balanced, 1), mean(&balanced, 2));
        assert!((m0 - m1).abs() < 1.0 && (m1 - m2).abs() < 1.0 && (m0 - m2).abs() < 1.0);

        // idempotent within 1 unit
        let (twice, _) = gray_world_balance(&balanced);
        assert!(twice
            .iter()
            .zip(balanced.iter())
            .all(|(a, b)| (a - b).abs() < 1.0));

        // zero-mean channel: pass-through
        let mut degenerate = cast.clone();
        for y in 0..64 {
            for x in 0..64 {
                degenerate[(2, y, x)] = 0.0;
            }
        }
        let (out, applied) = gray_world_balance(&degenerate);
        assert!(!applied);
        assert_eq!(out, degenerate);
    }

    #[test]
    fn benchmark_identity_on_clean_pairs_hits_caps() {
        let img = gradient_image(32, 32);
        let pairs = vec![("noise".to_string(), img.clone(), img.clone())];
        let r = evaluate_pairs(&Restorer::Identity, &pairs, false).unwrap();
        assert_eq!(r.per_task[0].avg_psnr, 100.0);
        assert!((r.per_task[0].avg_ssim - 1.0).abs() < 1e-12);
    }

    #[test]
    fn benchmark_identity_on_sigma25_noise() {
        // identity restorer on sigma-25 noise: 20 log10(255/25) ~ 20.17 dB
        let mut pairs = Vec::new();
        for i in 0..4 {
            let clean = Array3::from_elem((3, 64, 64), 100.0 + 20.0 * i as f64);
            let mut rng = ChaCha12Rng::seed_from_u64(i as u64);
            let noisy = add_gaussian_noise(&clean, 25.0, &mut rng).unwrap();
            pairs.push(("noise".to_string(), noisy, clean));
        }
        let r = evaluate_pairs(&Restorer::Identity, &pairs, false).unwrap();
        let expected = 20.0 * (255.0f64 / 25.0).log10();
        assert!(
            (r.overall_psnr - expected).abs() < 0.3,
            "psnr {} vs {expected}",
            r.overall_psnr
        );
    }

    #[test]
    fn gwa_prestep_near_noop_on_balanced_inputs() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let mut pairs = Vec::new();
        for _ in 0..3 {
            let mut clean = Array3::zeros((3, 32, 32));
            for v in clean.iter_mut() {
                *v = rng.gen_range(60.0..200.0);
            }
            let noisy = add_gaussian_noise(&clean, 15.0, &mut rng).unwrap();
            pairs.push(("noise".to_string(), noisy, clean));
        }
        let plain = evaluate_pairs(&Restorer::Identity, &pairs, false).unwrap();
        let gwa = evaluate_pairs(&Restorer::Identity, &pairs, true).unwrap();
        assert!(
            (plain.overall_psnr - gwa.overall_psnr).abs() < 0.05,
            "balanced set shifted {} -> {}",
            plain.overall_psnr,
            gwa.overall_psnr
        );
    }

    #[test]
    fn results_table_is_deterministic() {
        let img = gradient_image(32, 32);
        let pairs = vec![
            ("rain".to_string(), img.clone(), img.clone()),
            ("haze".to_string(), img.mapv(|v| v + 1.0), img.clone()),
        ];
        let a = evaluate_pairs(&Restorer::Identity, &pairs, false).unwrap();
        let b = evaluate_pairs(&Restorer::Identity, &pairs, false).unwrap();
        assert_eq!(a.render_table(), b.render_table());
        assert_eq!(a.per_task[0].task, "rain"); // manifest order preserved
    }

    #[test]
    fn manifest_parsing() {
        let text = "# comment\nnoise a.png b.png\n\nrain c.png d.png\n";
        let m = parse_manifest(text).unwrap();
        assert_eq!(m.len(), 2);
        assert_eq!(m[0].task, "noise");
        assert!(parse_manifest("bad line here extra field").is_err() || parse_manifest("onlytwo fields").is_err());
    }

    #[test]
    fn missing_files_are_recorded_skips() {
        let dir = tempfile::tempdir().unwrap();
        let good = dir.path().join("good.png");
        crate::imageio::save_png(&gradient_image(32, 32), &good).unwrap();
        let manifest = vec![
            ManifestEntry {
                task: "noise".into(),
                degraded: good.clone(),
                clean: good.clone(),
            },
            ManifestEntry {
                task: "noise".into(),
                degraded: dir.path().join("missing.png"),
                clean: good.clone(),
            },
        ];
        let r = run_benchmark(&Restorer::Identity, &manifest, false).unwrap();
        assert_eq!(r.evaluated, 1);
        assert_eq!(r.skipped, 1);
    }
}
