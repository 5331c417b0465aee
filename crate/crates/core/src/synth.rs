//! Synthetic fundus-like dataset where keywords fix the description.
//!
//! Images show a fundus disc with an optic disc on the side given by the
//! laterality keyword and lesions for each visible finding. History
//! keywords leave no trace in the image, so only expert keywords can
//! recover their phrases.

use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::manifest::{write_manifest, ManifestRecord};
use crate::dataset::streams;
use crate::error::{Error, Result};
use crate::numeric::seeded_rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SynthMode {
    /// Short reports: laterality, findings and history phrases.
    Standard,
    /// Reports of at least 40 tokens whose closing clause is set by an
    /// urgency keyword that is invisible in the image.
    LongReport,
}

impl std::str::FromStr for SynthMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "standard" => Ok(SynthMode::Standard),
            "long" => Ok(SynthMode::LongReport),
            other => Err(Error::Config(format!("unknown synthetic mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub n: usize,
    pub seed: u64,
    pub size: u32,
    pub mode: SynthMode,
}

impl SynthConfig {
    pub fn new(n: usize, seed: u64) -> Self {
        SynthConfig {
            n,
            seed,
            size: 64,
            mode: SynthMode::Standard,
        }
    }
}

pub const LATERALITY: [&str; 2] = ["left eye", "right eye"];
pub const FINDINGS: [&str; 4] = ["hemorrhage", "hard exudates", "drusen", "cotton wool spots"];
pub const HISTORY: [&str; 2] = ["diabetes", "hypertension"];
pub const URGENCY: [&str; 2] = ["urgent referral", "routine review"];

/// Phrase contributed to the description by each keyword.
pub fn keyword_phrase(keyword: &str) -> Option<&'static str> {
    Some(match keyword {
        "left eye" => "the left eye fundus is shown .",
        "right eye" => "the right eye fundus is shown .",
        "hemorrhage" => "scattered retinal hemorrhages are present .",
        "hard exudates" => "hard exudates are seen near the macula .",
        "drusen" => "multiple drusen are noted .",
        "cotton wool spots" => "cotton wool spots are visible .",
        "diabetes" => "history of diabetes mellitus .",
        "hypertension" => "known systemic hypertension .",
        "urgent referral" => "recommend urgent referral to the retina service .",
        "routine review" => "recommend routine review in twelve months .",
        _ => return None,
    })
}

pub const NO_FINDINGS: &str = "no retinal lesions are seen .";

/// Keyword-independent middle section of long reports.
pub const LONG_FILLER: &str = "the optic disc has sharp margins and a healthy rim . \
the retinal vessels show normal caliber and course . \
the macula appears flat with a normal foveal reflex . \
the peripheral retina is attached in all quadrants .";

#[derive(Debug, Clone)]
pub struct SynthRecord {
    pub id: String,
    pub keywords: Vec<String>,
    pub description: String,
    pub image: RgbImage,
}

fn describe(keywords: &[String], mode: SynthMode) -> String {
    let phrase = |k: &str| keyword_phrase(k).expect("known keyword");
    let mut parts: Vec<&str> = Vec::new();
    parts.push(phrase(&keywords[0]));
    let findings: Vec<&str> = keywords
        .iter()
        .filter(|k| FINDINGS.contains(&k.as_str()))
        .map(|k| phrase(k))
        .collect();
    if findings.is_empty() {
        parts.push(NO_FINDINGS);
    } else {
        parts.extend(findings);
    }
    match mode {
        SynthMode::Standard => parts.extend(
            keywords
                .iter()
                .filter(|k| HISTORY.contains(&k.as_str()))
                .map(|k| phrase(k)),
        ),
        SynthMode::LongReport => {
            parts.push(LONG_FILLER);
            parts.extend(
                keywords
                    .iter()
                    .filter(|k| URGENCY.contains(&k.as_str()))
                    .map(|k| phrase(k)),
            );
        }
    }
    parts.join(" ")
}

struct Canvas {
    size: usize,
    px: Vec<[f64; 3]>,
}

impl Canvas {
    fn disc(&mut self, cx: f64, cy: f64, r: f64, color: [f64; 3], strength: f64) {
        let s = self.size as f64;
        let (cx, cy, r) = (cx * s, cy * s, r * s);
        for y in 0..self.size {
            for x in 0..self.size {
                let d = ((x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2)).sqrt();
                // Soft edge over one pixel.
                let a = (r + 0.5 - d).clamp(0.0, 1.0) * strength;
                if a > 0.0 {
                    let p = &mut self.px[y * self.size + x];
                    for c in 0..3 {
                        p[c] = (1.0 - a) * p[c] + a * color[c];
                    }
                }
            }
        }
    }
}

/// Uniform point inside the fundus, away from the optic disc.
fn lesion_site(rng: &mut ChaCha8Rng, disc_x: f64) -> (f64, f64) {
    loop {
        let x = rng.gen_range(0.18..0.82);
        let y = rng.gen_range(0.18..0.82);
        let in_fundus = (x - 0.5f64).powi(2) + (y - 0.5f64).powi(2) < 0.3f64.powi(2);
        let off_disc = (x - disc_x).powi(2) + (y - 0.5f64).powi(2) > 0.14f64.powi(2);
        if in_fundus && off_disc {
            return (x, y);
        }
    }
}

fn draw(keywords: &[String], size: u32, rng: &mut ChaCha8Rng) -> RgbImage {
    let n = size as usize;
    let mut cv = Canvas {
        size: n,
        px: vec![[0.02, 0.01, 0.01]; n * n],
    };
    cv.disc(0.5, 0.5, 0.46, [0.78, 0.33, 0.14], 1.0);
    let right = keywords.iter().any(|k| k == "right eye");
    let disc_x = if right { 0.72 } else { 0.28 };
    let macula_x = 1.0 - disc_x * 0.9 - 0.05;
    cv.disc(macula_x, 0.5, 0.08, [0.55, 0.2, 0.08], 0.7);
    cv.disc(disc_x, 0.5, 0.09, [1.0, 0.88, 0.6], 1.0);
    let has = |k: &str| keywords.iter().any(|x| x == k);
    if has("hemorrhage") {
        for _ in 0..3 {
            let (x, y) = lesion_site(rng, disc_x);
            cv.disc(x, y, 0.045, [0.35, 0.03, 0.03], 1.0);
        }
    }
    if has("hard exudates") {
        for _ in 0..6 {
            let (x, y) = lesion_site(rng, disc_x);
            cv.disc(x, y, 0.022, [1.0, 0.95, 0.25], 1.0);
        }
    }
    if has("drusen") {
        for _ in 0..8 {
            let x = macula_x + rng.gen_range(-0.12..0.12);
            let y = 0.5 + rng.gen_range(-0.12..0.12);
            cv.disc(x, y, 0.018, [0.92, 0.8, 0.5], 0.9);
        }
    }
    if has("cotton wool spots") {
        for _ in 0..3 {
            let (x, y) = lesion_site(rng, disc_x);
            cv.disc(x, y, 0.04, [0.95, 0.95, 0.92], 0.9);
        }
    }
    RgbImage::from_fn(size, size, |x, y| {
        let p = cv.px[y as usize * n + x as usize];
        let mut out = [0u8; 3];
        for c in 0..3 {
            let v = p[c] + rng.gen_range(-0.03..0.03);
            out[c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
        Rgb(out)
    })
}

/// Deterministic records for `cfg`. Every record carries at least the
/// laterality keyword, so no record has an empty keyword set.
pub fn synth_records(cfg: &SynthConfig) -> Vec<SynthRecord> {
    let mut rng = seeded_rng(cfg.seed, streams::SYNTH);
    (0..cfg.n)
        .map(|i| {
            let mut keywords = vec![LATERALITY[rng.gen_range(0..2)].to_string()];
            for f in FINDINGS {
                if rng.gen_bool(0.4) {
                    keywords.push(f.to_string());
                }
            }
            match cfg.mode {
                SynthMode::Standard => {
                    for h in HISTORY {
                        if rng.gen_bool(0.5) {
                            keywords.push(h.to_string());
                        }
                    }
                }
                SynthMode::LongReport => keywords.push(URGENCY[rng.gen_range(0..2)].to_string()),
            }
            let description = describe(&keywords, cfg.mode);
            let image = draw(&keywords, cfg.size, &mut rng);
            SynthRecord {
                id: format!("s{i:04}"),
                keywords,
                description,
                image,
            }
        })
        .collect()
}

/// Writes `images/<id>.png` and `manifest.jsonl` under `out`; returns the
/// manifest path.
pub fn write_synth_dataset(out: &Path, cfg: &SynthConfig) -> Result<PathBuf> {
    let images = out.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut records = Vec::with_capacity(cfg.n);
    for r in synth_records(cfg) {
        let rel = format!("images/{}.png", r.id);
        let path = out.join(&rel);
        r.image.save(&path).map_err(|e| Error::Image {
            path: path.clone(),
            msg: e.to_string(),
        })?;
        records.push(ManifestRecord {
            sample_id: r.id,
            image: rel,
            image_path: path,
            keywords: r.keywords,
            description: r.description,
            split: None,
        });
    }
    let manifest = out.join("manifest.jsonl");
    std::fs::write(&manifest, write_manifest(&records)).map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{load_manifest, SCHEMA_VERSION};
    use crate::text::tokenize;

    #[test]
    fn descriptions_contain_every_keyword_phrase() {
        for mode in [SynthMode::Standard, SynthMode::LongReport] {
            let cfg = SynthConfig {
                mode,
                ..SynthConfig::new(50, 3)
            };
            for r in synth_records(&cfg) {
                assert!(!r.keywords.is_empty());
                for k in &r.keywords {
                    assert!(r.description.contains(keyword_phrase(k).unwrap()), "{k}");
                }
                if mode == SynthMode::LongReport {
                    assert!(tokenize(&r.description).len() >= 40);
                }
            }
        }
    }

    #[test]
    fn dataset_is_deterministic_and_valid() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        let cfg = SynthConfig::new(6, 1);
        let ma = write_synth_dataset(a.path(), &cfg).unwrap();
        let mb = write_synth_dataset(b.path(), &cfg).unwrap();
        assert_eq!(std::fs::read(&ma).unwrap(), std::fs::read(&mb).unwrap());
        for i in 0..6 {
            let f = format!("images/s{i:04}.png");
            assert_eq!(
                std::fs::read(a.path().join(&f)).unwrap(),
                std::fs::read(b.path().join(&f)).unwrap()
            );
        }
        let m = load_manifest(&ma, SCHEMA_VERSION).unwrap();
        assert_eq!(m.records.len(), 6);
    }

    #[test]
    fn laterality_moves_the_optic_disc() {
        let mut rng = seeded_rng(0, 0);
        let left = draw(&["left eye".to_string()], 64, &mut rng);
        let right = draw(&["right eye".to_string()], 64, &mut rng);
        let bright = |img: &RgbImage, x: u32| img.get_pixel(x, 32).0[1];
        assert!(bright(&left, 18) > 180 && bright(&left, 46) < 150);
        assert!(bright(&right, 46) > 180 && bright(&right, 18) < 150);
    }
}
