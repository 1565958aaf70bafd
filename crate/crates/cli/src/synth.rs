//! `key=value` description of a synthetic corpus.

use std::str::FromStr;

use gft_core::data::BoundaryTask;
use gft_core::vit::ViTConfig;

#[derive(Clone, Debug, PartialEq)]
pub struct SynthSpec {
    pub n: usize,
    pub sigma: f64,
    /// Falls back to the run seed.
    pub seed: Option<u64>,
}

impl SynthSpec {
    pub fn task(&self, vit: &ViTConfig, num_classes: usize, default_seed: u64) -> BoundaryTask {
        BoundaryTask {
            grid: vit.grid(),
            patch_size: vit.patch_size,
            num_classes,
            noise: self.sigma,
            seed: self.seed.unwrap_or(default_seed),
            ..BoundaryTask::desk(self.sigma, 0)
        }
    }
}

impl FromStr for SynthSpec {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut spec = SynthSpec {
            n: 320,
            sigma: 0.05,
            seed: None,
        };
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (key, value) = part
                .split_once('=')
                .ok_or_else(|| format!("expected key=value, got `{part}`"))?;
            let bad = |e: &dyn std::fmt::Display| format!("bad value for {key}: {e}");
            match key.trim() {
                "n" => spec.n = value.parse().map_err(|e| bad(&e))?,
                "sigma" => spec.sigma = value.parse().map_err(|e| bad(&e))?,
                "seed" => spec.seed = Some(value.parse().map_err(|e| bad(&e))?),
                other => return Err(format!("unknown key `{other}` (expected n, sigma, seed)")),
            }
        }
        Ok(spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_keys_and_defaults() {
        let s: SynthSpec = "n=40, sigma=0.1".parse().unwrap();
        assert_eq!(
            s,
            SynthSpec {
                n: 40,
                sigma: 0.1,
                seed: None
            }
        );
        assert_eq!("seed=3".parse::<SynthSpec>().unwrap().seed, Some(3));
        assert!("n=x".parse::<SynthSpec>().is_err());
        assert!("colour=red".parse::<SynthSpec>().is_err());
        assert!("n".parse::<SynthSpec>().is_err());
    }
}
