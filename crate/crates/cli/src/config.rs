//! Config resolution: defaults, then a JSON/TOML file, then flags.

use std::fs;
use std::path::Path;

use absentreg::synth::SynthConfig;
use absentreg::{Alpha, RegistrationConfig};
use anyhow::{bail, Context, Result};
use clap::Args;
use serde::de::DeserializeOwned;

#[derive(Args, Debug, Default)]
pub struct RegisterOverrides {
    #[arg(long)]
    pub lambda_reg: Option<f64>,
    #[arg(long)]
    pub lambda_inv: Option<f64>,
    #[arg(long)]
    pub lambda_m: Option<f64>,
    /// Mask tolerance as a fraction of the mean grid half-extent.
    #[arg(long, conflicts_with = "alpha_voxels")]
    pub alpha: Option<f64>,
    /// Mask tolerance in voxels.
    #[arg(long)]
    pub alpha_voxels: Option<f64>,
    /// Half-width of the mask averaging filter.
    #[arg(long)]
    pub p: Option<usize>,
    /// Pyramid scales, e.g. 0.25,0.5,1.
    #[arg(long, value_delimiter = ',')]
    pub levels: Option<Vec<f64>>,
    /// Iterations per pyramid level, e.g. 200,150,100.
    #[arg(long, value_delimiter = ',')]
    pub iters: Option<Vec<usize>>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Force empty masks throughout.
    #[arg(long)]
    pub no_masking: bool,
}

/// Parses `path` as TOML or JSON by extension. A run manifest is accepted in
/// place of a plain config; its `config` snapshot is used.
fn parse_file<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let is_toml = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("toml"));
    let value: serde_json::Value = if is_toml {
        toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
    } else {
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?
    };
    let value = match value {
        serde_json::Value::Object(mut m) if m.contains_key("command") && m.contains_key("config") => {
            m.remove("config").unwrap_or_default()
        }
        v => v,
    };
    serde_json::from_value(value).with_context(|| format!("invalid config in {}", path.display()))
}

pub fn load_registration_config(path: Option<&Path>, o: &RegisterOverrides) -> Result<RegistrationConfig> {
    let mut cfg = match path {
        Some(p) => parse_file(p)?,
        None => RegistrationConfig::default(),
    };
    if let Some(v) = o.lambda_reg {
        cfg.weights.lambda_reg = v;
    }
    if let Some(v) = o.lambda_inv {
        cfg.weights.lambda_inv = v;
    }
    if let Some(v) = o.lambda_m {
        cfg.weights.lambda_m = v;
    }
    if let Some(v) = o.alpha {
        cfg.fbc.alpha = Alpha::GridRelative(v);
    }
    if let Some(v) = o.alpha_voxels {
        cfg.fbc.alpha = Alpha::Voxels(v);
    }
    if let Some(v) = o.p {
        cfg.fbc.p = v;
    }
    match (&o.levels, &o.iters) {
        (Some(l), Some(i)) => {
            cfg.pyramid_scales = l.clone();
            cfg.iters_per_level = i.clone();
        }
        (Some(l), None) => {
            if l.len() != cfg.iters_per_level.len() {
                bail!("--levels has {} entries; pass --iters with the same count", l.len());
            }
            cfg.pyramid_scales = l.clone();
        }
        (None, Some(i)) => cfg.iters_per_level = i.clone(),
        (None, None) => {}
    }
    if let Some(s) = o.seed {
        cfg.seed = s;
    }
    if o.no_masking {
        cfg.masking = false;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_synth_config(path: Option<&Path>) -> Result<SynthConfig> {
    match path {
        Some(p) => parse_file(p),
        None => Ok(SynthConfig::default()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_which_overrides_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        fs::write(&p, "seed = 7\nncc_radius = 2\n[weights]\nlambda_reg = 0.2\nlambda_inv = 0.5\nlambda_m = 0.01\n")
            .unwrap();
        let o = RegisterOverrides { lambda_reg: Some(0.4), ..Default::default() };
        let cfg = load_registration_config(Some(&p), &o).unwrap();
        assert_eq!(cfg.weights.lambda_reg, 0.4);
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.ncc_radius, 2);
        assert_eq!(cfg.iters_per_level, RegistrationConfig::default().iters_per_level);
    }

    #[test]
    fn partial_tables_keep_remaining_defaults() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.toml");
        fs::write(&p, "[step]\nrate = 0.02\n[fbc]\nalpha = { voxels = 0.5 }\n").unwrap();
        let cfg = load_registration_config(Some(&p), &RegisterOverrides::default()).unwrap();
        assert_eq!(cfg.step.rate, 0.02);
        assert_eq!(cfg.step.beta1, RegistrationConfig::default().step.beta1);
        assert_eq!(cfg.fbc.alpha, Alpha::Voxels(0.5));
        assert_eq!(cfg.fbc.p, 4);
    }

    #[test]
    fn manifest_config_is_accepted() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("manifest.json");
        let cfg = RegistrationConfig { seed: 42, ..Default::default() };
        fs::write(&p, serde_json::json!({ "command": "register", "config": cfg }).to_string()).unwrap();
        assert_eq!(load_registration_config(Some(&p), &RegisterOverrides::default()).unwrap(), cfg);
    }

    #[test]
    fn mismatched_levels_are_rejected() {
        let o = RegisterOverrides { levels: Some(vec![0.5, 1.0]), ..Default::default() };
        assert!(load_registration_config(None, &o).is_err());
    }
}
