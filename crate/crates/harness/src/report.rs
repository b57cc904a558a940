//! Aggregation (mean with 95% confidence interval), CSV tables and PGM
//! activation-map images.

use std::fmt::Write as _;
use std::path::Path;

use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{HarnessError, Result};

/// Mean and 95% confidence half-width (Student t) of repeated runs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Summary {
    pub mean: f64,
    /// `None` for fewer than two runs.
    pub ci95: Option<f64>,
    pub n: usize,
}

pub fn summarise(values: &[f64]) -> Summary {
    let n = values.len();
    let mean = if n == 0 { f64::NAN } else { values.iter().sum::<f64>() / n as f64 };
    let ci95 = (n >= 2).then(|| {
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let t = StudentsT::new(0.0, 1.0, (n - 1) as f64).expect("positive degrees of freedom").inverse_cdf(0.975);
        t * (var / n as f64).sqrt()
    });
    Summary { mean, ci95, n }
}

impl Summary {
    /// `mean,ci95,n` with an empty CI column for a single run.
    pub fn csv_fields(&self) -> String {
        let ci = self.ci95.map(|c| format!("{c:.6}")).unwrap_or_default();
        format!("{:.6},{ci},{}", self.mean, self.n)
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| HarnessError::io(path, e))
}

/// 8-bit binary PGM of a `height x width` map scaled so its minimum maps
/// to 0 and its maximum to 255. Constant maps are written as all zeros.
pub fn pgm_bytes(map: &[f64], height: usize, width: usize) -> Vec<u8> {
    assert_eq!(map.len(), height * width, "map size");
    let lo = map.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(map.iter().map(|&v| {
        if hi > lo {
            ((v - lo) / (hi - lo) * 255.0).round() as u8
        } else {
            0
        }
    }));
    out
}

/// Writes one PGM per channel of a `[C, H, W]` activation and returns the
/// file names.
pub fn write_activation_maps(dir: &Path, prefix: &str, shape: &[usize], values: &[f64]) -> Result<Vec<String>> {
    let &[c, h, w] = shape else {
        return Err(HarnessError::Config(format!("activation maps need a CxHxW layer, got shape {shape:?}")));
    };
    std::fs::create_dir_all(dir).map_err(|e| HarnessError::io(dir, e))?;
    let mut names = Vec::with_capacity(c);
    for ch in 0..c {
        let name = format!("{prefix}_c{ch:03}.pgm");
        let p = dir.join(&name);
        std::fs::write(&p, pgm_bytes(&values[ch * h * w..(ch + 1) * h * w], h, w)).map_err(|e| HarnessError::io(&p, e))?;
        names.push(name);
    }
    Ok(names)
}

/// Rows of `label,metric,mean,ci95,n`.
pub fn summary_table(rows: &[(String, String, Summary)]) -> String {
    let mut s = String::from("group,metric,mean,ci95,n\n");
    for (g, m, v) in rows {
        let _ = writeln!(s, "{g},{m},{}", v.csv_fields());
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ci_matches_t_table() {
        let s = summarise(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_eq!(s.mean, 3.0);
        // t(0.975, 4) = 2.776445, sd = sqrt(2.5)
        let expected = 2.776445 * (2.5f64 / 5.0).sqrt();
        assert!((s.ci95.unwrap() - expected).abs() < 1e-5);
        let one = summarise(&[0.7]);
        assert_eq!(one.ci95, None);
        assert_eq!(one.csv_fields(), "0.700000,,1");
    }

    #[test]
    fn pgm_is_normalised_per_map() {
        let b = pgm_bytes(&[-2.0, 0.0, 2.0, 1.0], 2, 2);
        let header = b"P5\n2 2\n255\n";
        assert_eq!(&b[..header.len()], header);
        assert_eq!(&b[header.len()..], &[0, 128, 255, 191]);
        assert_eq!(&pgm_bytes(&[3.0; 4], 2, 2)[header.len()..], &[0; 4]);
    }

    #[test]
    fn one_file_per_channel() {
        let dir = tempfile::tempdir().unwrap();
        let values: Vec<f64> = (0..20 * 9).map(f64::from).collect();
        let names = write_activation_maps(dir.path(), "l0", &[20, 3, 3], &values).unwrap();
        assert_eq!(names.len(), 20);
        let first = std::fs::read(dir.path().join(&names[0])).unwrap();
        assert_eq!(first.len(), b"P5\n3 3\n255\n".len() + 9);
        assert!(write_activation_maps(dir.path(), "x", &[9], &values[..9]).is_err());
    }
}
