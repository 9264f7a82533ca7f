use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::aifs::{Modality, ModalityLayout};
use crate::error::{Error, Result};
use crate::numerics::io::{read_tensor, write_tensor};
use crate::numerics::Tensor;

pub const SAMPLE_EXTENSION: &str = "mqs";

/// Visual token features are uniform on this interval.
pub const VISUAL_RANGE: (f64, f64) = (-20.0, 10.0);
/// Text token features are `N(0, TEXT_STD)` clamped to `±TEXT_BOUND`.
pub const TEXT_STD: f64 = 0.15;
pub const TEXT_BOUND: f64 = 0.5;

/// Pre-embedding token features and their modalities.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibSample {
    pub tokens: Tensor,
    pub layout: ModalityLayout,
}

impl CalibSample {
    pub fn new(tokens: Tensor, layout: ModalityLayout) -> Result<Self> {
        layout.check_rows(&tokens)?;
        Ok(Self { tokens, layout })
    }

    pub fn len(&self) -> usize {
        self.tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.rows() == 0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LayoutSpec {
    Fixed(ModalityLayout),
    /// One visual run of random length in `[min_visual, max_visual]` at a random offset.
    RandomSpan {
        min_visual: usize,
        max_visual: usize,
    },
}

impl LayoutSpec {
    /// A visual run covering roughly a quarter to three quarters of the sequence.
    pub fn balanced(len: usize) -> Self {
        LayoutSpec::RandomSpan {
            min_visual: len / 4,
            max_visual: (3 * len) / 4,
        }
    }

    fn sample(&self, len: usize, rng: &mut ChaCha8Rng) -> Result<ModalityLayout> {
        match self {
            LayoutSpec::Fixed(l) if l.len() == len => Ok(l.clone()),
            LayoutSpec::Fixed(l) => Err(Error::Config(format!(
                "fixed layout covers {} tokens, samples have {len}",
                l.len()
            ))),
            LayoutSpec::RandomSpan { min_visual, max_visual } => {
                let hi = (*max_visual).min(len);
                let lo = (*min_visual).min(hi);
                let v = rng.random_range(lo..=hi);
                let start = rng.random_range(0..=len - v);
                Ok(ModalityLayout::text_visual_text(start, v, len - start - v))
            }
        }
    }
}

/// Deterministic synthetic samples: visual rows uniform on [-20, 10], text rows
/// concentrated near zero within ±0.5.
pub fn generate_synthetic_samples(
    count: usize,
    len: usize,
    spec: &LayoutSpec,
    d_model: usize,
    seed: u64,
) -> Result<Vec<CalibSample>> {
    if count == 0 || len == 0 || d_model == 0 {
        return Err(Error::Empty("sample count, length and width must be positive"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let text = Normal::new(0.0, TEXT_STD).map_err(|e| Error::Config(e.to_string()))?;
    (0..count)
        .map(|_| {
            let layout = spec.sample(len, &mut rng)?;
            let tags = layout.modalities();
            let tokens = Tensor::from_fn(len, d_model, |i, _| match tags[i] {
                Modality::Visual => rng.random_range(VISUAL_RANGE.0..=VISUAL_RANGE.1),
                Modality::Text => text.sample(&mut rng).clamp(-TEXT_BOUND, TEXT_BOUND),
            });
            CalibSample::new(tokens, layout)
        })
        .collect()
}

/// Tensor record followed by one modality tag byte per token.
pub fn write_sample<W: Write>(w: &mut W, s: &CalibSample) -> Result<()> {
    write_tensor(w, &s.tokens)?;
    w.write_all(&s.layout.tags())?;
    Ok(())
}

pub fn read_sample<R: Read>(r: &mut R) -> Result<CalibSample> {
    let tokens = read_tensor(r)?;
    let mut tags = vec![0u8; tokens.rows()];
    r.read_exact(&mut tags)
        .map_err(|_| Error::Format("sample file ends before its modality tags".into()))?;
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes after sample", rest.len())));
    }
    CalibSample::new(tokens, ModalityLayout::from_tags(&tags)?)
}

/// Writes `sample_00000.mqs`, `sample_00001.mqs`, ... into `dir`.
pub fn write_samples_dir(dir: &Path, samples: &[CalibSample]) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let path = dir.join(format!("sample_{i:05}.{SAMPLE_EXTENSION}"));
            let mut w = BufWriter::new(File::create(&path)?);
            write_sample(&mut w, s)?;
            w.flush()?;
            Ok(path)
        })
        .collect()
}

/// Reads every `.mqs` file in `dir`, in file-name order.
pub fn read_samples_dir(dir: &Path) -> Result<Vec<CalibSample>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)?
        .map(|e| e.map(|e| e.path()))
        .collect::<std::io::Result<_>>()?;
    paths.retain(|p| p.extension().is_some_and(|e| e == SAMPLE_EXTENSION));
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Empty("no sample files found"));
    }
    paths
        .iter()
        .map(|p| {
            read_sample(&mut BufReader::new(File::open(p)?)).map_err(|e| Error::Format(format!("{}: {e}", p.display())))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn deterministic_per_seed() {
        let spec = LayoutSpec::balanced(16);
        let a = generate_synthetic_samples(3, 16, &spec, 8, 5).unwrap();
        assert_eq!(a, generate_synthetic_samples(3, 16, &spec, 8, 5).unwrap());
        assert_ne!(a, generate_synthetic_samples(3, 16, &spec, 8, 6).unwrap());
        assert!(generate_synthetic_samples(0, 16, &spec, 8, 5).is_err());
    }

    #[test]
    fn ranges_follow_modality() {
        let spec = LayoutSpec::Fixed(ModalityLayout::text_visual_text(4, 8, 4));
        for s in generate_synthetic_samples(20, 16, &spec, 64, 1).unwrap() {
            for (i, m) in s.layout.modalities().iter().enumerate() {
                let absmax = s.tokens.row(i).iter().fold(0.0f64, |a, v| a.max(v.abs()));
                match m {
                    Modality::Visual => assert!((10.0..=20.0).contains(&absmax)),
                    Modality::Text => assert!(absmax <= 0.5),
                }
            }
        }
    }

    #[test]
    fn empirical_moments() {
        // 10^4 draws of each modality
        let spec = LayoutSpec::Fixed(ModalityLayout::text_visual_text(0, 50, 50));
        let s = generate_synthetic_samples(2, 100, &spec, 100, 2).unwrap();
        let mut vis = Vec::new();
        let mut txt = Vec::new();
        for sample in &s {
            for i in 0..100 {
                let dst = if i < 50 { &mut vis } else { &mut txt };
                dst.extend_from_slice(sample.tokens.row(i));
            }
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        assert_eq!(vis.len(), 10_000);
        // uniform [-20, 10]: mean -5, std 30/√12 ≈ 8.66, so 4σ/√n ≈ 0.35
        assert!((mean(&vis) + 5.0).abs() < 0.35);
        assert!(vis.iter().cloned().fold(f64::INFINITY, f64::min) < -19.9);
        assert!(vis.iter().cloned().fold(f64::NEG_INFINITY, f64::max) > 9.9);
        assert!(mean(&txt).abs() < 0.01);
        let var = mean(&txt.iter().map(|v| v * v).collect::<Vec<_>>());
        assert!((var.sqrt() - TEXT_STD).abs() < 0.005);
    }

    #[test]
    fn file_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let samples = generate_synthetic_samples(3, 12, &LayoutSpec::balanced(12), 8, 3).unwrap();
        write_samples_dir(dir.path(), &samples).unwrap();
        assert_eq!(read_samples_dir(dir.path()).unwrap(), samples);

        let mut bytes = Vec::new();
        write_sample(&mut bytes, &samples[0]).unwrap();
        assert!(read_sample(&mut &bytes[..bytes.len() - 1]).is_err());
        let mut extra = bytes.clone();
        extra.push(0);
        assert!(read_sample(&mut &extra[..]).is_err());
        let last = bytes.len() - 1;
        bytes[last] = 7;
        assert!(read_sample(&mut &bytes[..]).is_err());
        let empty = tempfile::tempdir().unwrap();
        assert!(read_samples_dir(empty.path()).is_err());
    }
}
