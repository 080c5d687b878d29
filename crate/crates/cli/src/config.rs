//! TOML run configuration. Every key mirrors a command-line flag.

use std::path::Path;

use nfsense::simulate::SimulationConfig;
use serde::Deserialize;

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub seed: Option<u64>,
    pub threads: Option<usize>,
    pub memory_budget: Option<String>,
    pub simulate: Option<SimulationConfig>,
    pub masks: MasksSection,
    pub sensmaps: SensmapsSection,
    pub b0map: B0mapSection,
    pub kfilter: KfilterSection,
    pub recon: ReconSection,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MasksSection {
    pub bias_degree: Option<usize>,
    pub dilate: Option<usize>,
    pub threshold: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SensmapsSection {
    pub alpha_s: Option<f64>,
    pub precond: Option<String>,
    pub tol: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct B0mapSection {
    pub alpha_b: Option<f64>,
    pub precond: Option<String>,
    pub tol: Option<f64>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KfilterSection {
    pub dilate: Option<usize>,
    pub per_slice: Option<bool>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconSection {
    pub iters: Option<usize>,
    pub split_block: Option<String>,
    pub order: Option<u8>,
    pub conjugate_trajectory: Option<bool>,
}

pub fn load(path: &Path) -> Result<FileConfig, String> {
    let text = std::fs::read_to_string(path).map_err(|e| format!("cannot read {}: {e}", path.display()))?;
    toml::from_str(&text).map_err(|e| format!("invalid config {}: {e}", path.display()))
}

/// Bytes from `1024`, `512K`, `64M`, `2G` or `1T` (binary multiples).
pub fn parse_bytes(s: &str) -> Result<u64, String> {
    let t = s.trim();
    let (digits, shift) = match t.char_indices().last() {
        Some((i, c)) if c.is_ascii_alphabetic() => {
            let shift = match c.to_ascii_uppercase() {
                'K' => 10,
                'M' => 20,
                'G' => 30,
                'T' => 40,
                _ => return Err(format!("unknown size suffix in `{s}`")),
            };
            (&t[..i], shift)
        }
        _ => (t, 0),
    };
    let value: f64 = digits
        .trim()
        .parse()
        .map_err(|_| format!("invalid memory size `{s}`"))?;
    if !(value > 0.0 && value.is_finite()) {
        return Err(format!("memory size must be positive, got `{s}`"));
    }
    Ok((value * (1u64 << shift) as f64) as u64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sizes() {
        assert_eq!(parse_bytes("1024").unwrap(), 1024);
        assert_eq!(parse_bytes("2G").unwrap(), 2 << 30);
        assert_eq!(parse_bytes("1.5k").unwrap(), 1536);
        assert!(parse_bytes("3X").is_err());
        assert!(parse_bytes("-1M").is_err());
    }

    #[test]
    fn sections() {
        let cfg: FileConfig = toml::from_str(
            "seed = 3\n[simulate]\ndims = [16, 16, 1]\ncoils = 2\n[recon]\niters = 5\n",
        )
        .unwrap();
        assert_eq!(cfg.seed, Some(3));
        assert_eq!(cfg.simulate.unwrap().coils, 2);
        assert_eq!(cfg.recon.iters, Some(5));
        assert!(toml::from_str::<FileConfig>("bogus = 1\n").is_err());
    }
}
