//! Flat `key = value` configuration files.
//!
//! Blank lines and text after `#` are ignored. Every key may appear once;
//! command-line overrides are applied afterwards in the order given.
//!
//! Compression keys:
//!
//! | key | values |
//! |-----|--------|
//! | `profile` | `default`, `performance`, `throughput`, `lossless` (applied before all other keys) |
//! | `merge` | `fisher`, `fisher-scalar`, `mean`, `frequency` |
//! | `fisher_mode` | `sampled-label`, `data-label` |
//! | `fisher_seed` | unsigned integer |
//! | `calib_samples`, `batch_size` | positive integer |
//! | `ratio_delta` | fraction in (0, 1], or `lossless` |
//! | `rank` | fixed delta rank, positive integer |
//! | `layer_ratios` | comma-separated fractions, one per layer |
//! | `svd` | `truncation-aware`, `vanilla`, `activation-aware` |
//! | `sparsity` | fraction in [0, 1) |
//! | `trim` | experts whose deltas are dropped per layer |
//! | `damping`, `epsilon`, `tolerance` | non-negative / positive floats |
//! | `expert_subset` | `all` or comma-separated expert ids |
//! | `timings` | `on` or `off`: include wall-times in the report |

use std::path::Path;

use d2moe::factorize::{RankPolicy, SvdMethod};
use d2moe::grad::FisherMode;
use d2moe::merge::MergeMethod;
use d2moe::pipeline::CompressionConfig;

use crate::error::{CliError, CliResult};

/// Ordered `key = value` pairs.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct KeyValues(pub Vec<(String, String)>);

impl KeyValues {
    pub fn parse(text: &str) -> CliResult<Self> {
        let mut out: Vec<(String, String)> = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap().trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CliError::Config(format!("line {}: expected `key = value`, got `{line}`", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if k.is_empty() || k.contains(char::is_whitespace) {
                return Err(CliError::Config(format!("line {}: invalid key `{k}`", i + 1)));
            }
            if out.iter().any(|(e, _)| e == k) {
                return Err(CliError::key(k, format!("line {}: duplicate key", i + 1)));
            }
            out.push((k.to_string(), v.to_string()));
        }
        Ok(KeyValues(out))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        Self::parse(&text)
    }

    /// Parses a `key=value` override.
    pub fn push_override(&mut self, s: &str) -> CliResult<()> {
        let (k, v) = s.split_once('=').ok_or_else(|| CliError::Config(format!("override `{s}` is not key=value")))?;
        self.set(k.trim(), v.trim());
        Ok(())
    }

    pub fn set(&mut self, k: &str, v: &str) {
        match self.0.iter_mut().find(|(e, _)| e == k) {
            Some(entry) => entry.1 = v.to_string(),
            None => self.0.push((k.to_string(), v.to_string())),
        }
    }

    pub fn get(&self, k: &str) -> Option<&str> {
        self.0.iter().find(|(e, _)| e == k).map(|(_, v)| v.as_str())
    }
}

pub fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> CliResult<T> {
    v.parse().map_err(|_| CliError::key(key, format!("cannot parse `{v}`")))
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> CliResult<Vec<T>> {
    v.split(',').map(|t| parse_num(key, t.trim())).collect()
}

fn parse_bool(key: &str, v: &str) -> CliResult<bool> {
    match v {
        "on" | "true" | "yes" | "1" => Ok(true),
        "off" | "false" | "no" | "0" => Ok(false),
        _ => Err(CliError::key(key, format!("expected on/off, got `{v}`"))),
    }
}

/// Compression settings plus report options.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub compression: CompressionConfig,
    pub profile: String,
    pub timings: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig { compression: CompressionConfig::default(), profile: "default".into(), timings: false }
    }
}

impl RunConfig {
    pub fn from_kv(kv: &KeyValues) -> CliResult<Self> {
        let mut rc = RunConfig::default();
        if let Some(p) = kv.get("profile") {
            rc.compression = match p {
                "default" => CompressionConfig::default(),
                "performance" => CompressionConfig::performance(),
                "throughput" => CompressionConfig::throughput(),
                "lossless" => CompressionConfig::lossless(),
                _ => return Err(CliError::key("profile", format!("unknown profile `{p}`"))),
            };
            rc.profile = p.to_string();
        }
        let c = &mut rc.compression;
        for (k, v) in &kv.0 {
            let v = v.as_str();
            match k.as_str() {
                "profile" => {}
                "merge" => {
                    c.merge = MergeMethod::parse(v).ok_or_else(|| CliError::key(k, format!("unknown merge method `{v}`")))?
                }
                "fisher_mode" => {
                    c.fisher_mode = FisherMode::parse(v).ok_or_else(|| CliError::key(k, format!("unknown fisher mode `{v}`")))?
                }
                "fisher_seed" => c.fisher_seed = parse_num(k, v)?,
                "calib_samples" => c.calib_samples = parse_num(k, v)?,
                "batch_size" => c.batch_size = parse_num(k, v)?,
                "ratio_delta" => {
                    c.rank_policy = if v == "lossless" { RankPolicy::Lossless } else { RankPolicy::Ratio(parse_num(k, v)?) }
                }
                "rank" => c.rank_policy = RankPolicy::Fixed(parse_num(k, v)?),
                "layer_ratios" => c.layer_ratios = Some(parse_list(k, v)?),
                "svd" => c.svd = SvdMethod::parse(v).ok_or_else(|| CliError::key(k, format!("unknown svd method `{v}`")))?,
                "sparsity" => c.sparsity = parse_num(k, v)?,
                "trim" => c.trim = parse_num(k, v)?,
                "damping" => c.damping = parse_num(k, v)?,
                "epsilon" => c.epsilon = parse_num(k, v)?,
                "tolerance" => c.tolerance = parse_num(k, v)?,
                "expert_subset" => c.expert_subset = if v == "all" { None } else { Some(parse_list(k, v)?) },
                "timings" => rc.timings = parse_bool(k, v)?,
                other => return Err(CliError::key(other, "unknown key")),
            }
        }
        if c.layer_ratios.is_some() && !matches!(c.rank_policy, RankPolicy::Ratio(_)) {
            return Err(CliError::key("layer_ratios", "requires a ratio rank policy"));
        }
        c.validate().map_err(|e| match e {
            d2moe::Error::InvalidParameter { name, detail } => CliError::key(name, detail),
            other => CliError::Core(other),
        })?;
        Ok(rc)
    }

    /// Canonical echo of every setting, in a fixed order.
    pub fn to_pairs(&self) -> Vec<(String, String)> {
        let c = &self.compression;
        let list_f = |v: &[f64]| v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",");
        let mut out = vec![
            ("profile", self.profile.clone()),
            ("merge", c.merge.name().to_string()),
            ("fisher_mode", c.fisher_mode.name().to_string()),
            ("fisher_seed", c.fisher_seed.to_string()),
            ("calib_samples", c.calib_samples.to_string()),
            ("batch_size", c.batch_size.to_string()),
        ];
        match c.rank_policy {
            RankPolicy::Ratio(p) => out.push(("ratio_delta", format!("{p:?}"))),
            RankPolicy::Fixed(k) => out.push(("rank", k.to_string())),
            RankPolicy::Lossless => out.push(("ratio_delta", "lossless".into())),
        }
        if let Some(r) = &c.layer_ratios {
            out.push(("layer_ratios", list_f(r)));
        }
        out.extend([
            ("svd", c.svd.name().to_string()),
            ("sparsity", format!("{:?}", c.sparsity)),
            ("trim", c.trim.to_string()),
            ("damping", format!("{:?}", c.damping)),
            ("epsilon", format!("{:?}", c.epsilon)),
            ("tolerance", format!("{:?}", c.tolerance)),
            (
                "expert_subset",
                c.expert_subset.as_ref().map_or("all".to_string(), |s| crate::io::join_usize(s)),
            ),
            ("timings", if self.timings { "on" } else { "off" }.to_string()),
        ]);
        out.into_iter().map(|(k, v)| (k.to_string(), v)).collect()
    }
}
