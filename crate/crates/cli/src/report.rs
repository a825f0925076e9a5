//! Line-delimited compression report.
//!
//! The first line is `d2moe-report 1`. Every other line is a record type
//! followed by space-separated `key=value` fields:
//!
//! ```text
//! version value=<tool version>
//! config key=<name> value=<setting>
//! seed name=<what> value=<u64>
//! eval loss_before=<f64> loss_after=<f64> perplexity_before=<f64> perplexity_after=<f64> tokens=<usize>
//! layer index=<l> n=.. m=.. k_top=.. p=.. s=.. p_realized=.. s_realized_static=.. s_realized_active=..
//!       original_static=.. compressed_static=.. original_active=.. compressed_active=..
//!       literal_static=.. literal_active=.. census_static=.. literal_discrepancy=<bool>
//!       merge_fallback_up=.. merge_fallback_down=.. trimmed=<ids|-> frequency=<f64,..>
//! factor layer=<l> expert=<i> role=<up|down> rank=.. weighted_error=.. weighted_norm=.. damping=..
//! timing stage=<name> layer=<l|-> seconds=<f64>
//! ```
//!
//! (A `layer` record is a single line.) Floats use Rust's shortest
//! round-trip formatting, so parse then serialize reproduces the file.

use d2moe::pipeline::{FactorRecord, LayerSummary};
use d2moe::runtime::ParamReport;
use d2moe::Role;

use crate::error::{CliError, CliResult};
use crate::io::{join_usize, split_usize};

pub const HEADER: &str = "d2moe-report 1";

#[derive(Debug, Clone, PartialEq)]
pub struct EvalSummary {
    pub loss_before: f64,
    pub loss_after: f64,
    pub perplexity_before: f64,
    pub perplexity_after: f64,
    pub tokens: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Timing {
    pub stage: String,
    pub layer: Option<usize>,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompressionReport {
    pub version: String,
    pub config: Vec<(String, String)>,
    pub seeds: Vec<(String, u64)>,
    pub eval: Option<EvalSummary>,
    pub layers: Vec<LayerSummary>,
    pub timings: Vec<Timing>,
}

fn f(v: f64) -> String {
    format!("{v:?}")
}

fn check_token(what: &str, s: &str) -> CliResult<()> {
    if s.is_empty() || s.contains(char::is_whitespace) {
        return Err(CliError::Report { line: 0, detail: format!("{what} `{s}` is empty or contains whitespace") });
    }
    Ok(())
}

impl CompressionReport {
    pub fn to_text(&self) -> CliResult<String> {
        let mut s = String::new();
        s.push_str(HEADER);
        s.push('\n');
        check_token("version", &self.version)?;
        s.push_str(&format!("version value={}\n", self.version));
        for (k, v) in &self.config {
            check_token("config key", k)?;
            check_token("config value", v)?;
            s.push_str(&format!("config key={k} value={v}\n"));
        }
        for (k, v) in &self.seeds {
            check_token("seed name", k)?;
            s.push_str(&format!("seed name={k} value={v}\n"));
        }
        if let Some(e) = &self.eval {
            s.push_str(&format!(
                "eval loss_before={} loss_after={} perplexity_before={} perplexity_after={} tokens={}\n",
                f(e.loss_before),
                f(e.loss_after),
                f(e.perplexity_before),
                f(e.perplexity_after),
                e.tokens
            ));
        }
        for l in &self.layers {
            let p = &l.params;
            let freq = if l.frequency.is_empty() {
                "-".to_string()
            } else {
                l.frequency.iter().map(|v| f(*v)).collect::<Vec<_>>().join(",")
            };
            s.push_str(&format!(
                "layer index={} n={} m={} k_top={} p={} s={} p_realized={} s_realized_static={} s_realized_active={} \
                 original_static={} compressed_static={} original_active={} compressed_active={} literal_static={} \
                 literal_active={} census_static={} literal_discrepancy={} merge_fallback_up={} merge_fallback_down={} \
                 trimmed={} frequency={}\n",
                l.layer,
                p.n,
                p.m,
                p.k_top,
                f(p.p),
                f(p.s),
                f(p.p_realized),
                f(p.s_realized_static),
                f(p.s_realized_active),
                f(p.original_static),
                f(p.compressed_static),
                f(p.original_active),
                f(p.compressed_active),
                f(p.literal_static),
                f(p.literal_active),
                p.census_static,
                p.literal_discrepancy,
                l.merge_fallback[0],
                l.merge_fallback[1],
                join_usize(&l.trimmed),
                freq
            ));
            for r in &l.factors {
                s.push_str(&format!(
                    "factor layer={} expert={} role={} rank={} weighted_error={} weighted_norm={} damping={}\n",
                    l.layer,
                    r.expert,
                    r.role.name(),
                    r.rank,
                    f(r.weighted_error),
                    f(r.weighted_norm),
                    f(r.damping)
                ));
            }
        }
        for t in &self.timings {
            check_token("stage", &t.stage)?;
            let layer = t.layer.map_or("-".to_string(), |l| l.to_string());
            s.push_str(&format!("timing stage={} layer={layer} seconds={}\n", t.stage, f(t.seconds)));
        }
        Ok(s)
    }

    pub fn parse(text: &str) -> CliResult<Self> {
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, HEADER)) => {}
            _ => return Err(CliError::Report { line: 1, detail: format!("expected header `{HEADER}`") }),
        }
        let mut rep = CompressionReport {
            version: String::new(),
            config: Vec::new(),
            seeds: Vec::new(),
            eval: None,
            layers: Vec::new(),
            timings: Vec::new(),
        };
        let mut have_version = false;
        for (i, line) in lines {
            let line_no = i + 1;
            let mut rec = Record::parse(line_no, line)?;
            match rec.kind.as_str() {
                "version" => {
                    rep.version = rec.take("value")?;
                    have_version = true;
                }
                "config" => rep.config.push((rec.take("key")?, rec.take("value")?)),
                "seed" => rep.seeds.push((rec.take("name")?, rec.num("value")?)),
                "eval" => {
                    rep.eval = Some(EvalSummary {
                        loss_before: rec.num("loss_before")?,
                        loss_after: rec.num("loss_after")?,
                        perplexity_before: rec.num("perplexity_before")?,
                        perplexity_after: rec.num("perplexity_after")?,
                        tokens: rec.num("tokens")?,
                    })
                }
                "layer" => {
                    let params = ParamReport {
                        n: rec.num("n")?,
                        m: rec.num("m")?,
                        k_top: rec.num("k_top")?,
                        p: rec.num("p")?,
                        s: rec.num("s")?,
                        p_realized: rec.num("p_realized")?,
                        s_realized_static: rec.num("s_realized_static")?,
                        s_realized_active: rec.num("s_realized_active")?,
                        original_static: rec.num("original_static")?,
                        compressed_static: rec.num("compressed_static")?,
                        original_active: rec.num("original_active")?,
                        compressed_active: rec.num("compressed_active")?,
                        literal_static: rec.num("literal_static")?,
                        literal_active: rec.num("literal_active")?,
                        census_static: rec.num("census_static")?,
                        literal_discrepancy: rec.num("literal_discrepancy")?,
                    };
                    let trimmed_raw = rec.take("trimmed")?;
                    let trimmed = split_usize("trimmed", &trimmed_raw)
                        .map_err(|e| CliError::Report { line: line_no, detail: e.to_string() })?;
                    let freq_raw = rec.take("frequency")?;
                    let frequency = if freq_raw == "-" {
                        Vec::new()
                    } else {
                        freq_raw
                            .split(',')
                            .map(|t| t.parse().map_err(|_| rec.bad(format!("bad frequency `{t}`"))))
                            .collect::<CliResult<Vec<f64>>>()?
                    };
                    rep.layers.push(LayerSummary {
                        layer: rec.num("index")?,
                        params,
                        factors: Vec::new(),
                        merge_fallback: [rec.num("merge_fallback_up")?, rec.num("merge_fallback_down")?],
                        trimmed,
                        frequency,
                    });
                }
                "factor" => {
                    let layer: usize = rec.num("layer")?;
                    let role_name = rec.take("role")?;
                    let role = Role::parse(&role_name).ok_or_else(|| rec.bad(format!("unknown role `{role_name}`")))?;
                    let record = FactorRecord {
                        expert: rec.num("expert")?,
                        role,
                        rank: rec.num("rank")?,
                        weighted_error: rec.num("weighted_error")?,
                        weighted_norm: rec.num("weighted_norm")?,
                        damping: rec.num("damping")?,
                    };
                    match rep.layers.last_mut() {
                        Some(l) if l.layer == layer => l.factors.push(record),
                        _ => return Err(rec.bad(format!("factor for layer {layer} outside its layer record"))),
                    }
                }
                "timing" => {
                    let layer_raw = rec.take("layer")?;
                    let layer = if layer_raw == "-" {
                        None
                    } else {
                        Some(layer_raw.parse().map_err(|_| rec.bad(format!("bad layer `{layer_raw}`")))?)
                    };
                    rep.timings.push(Timing { stage: rec.take("stage")?, layer, seconds: rec.num("seconds")? });
                }
                other => return Err(rec.bad(format!("unknown record `{other}`"))),
            }
            rec.finish()?;
        }
        if !have_version {
            return Err(CliError::Report { line: 0, detail: "missing version record".into() });
        }
        Ok(rep)
    }
}

struct Record {
    line: usize,
    kind: String,
    fields: Vec<(String, String)>,
}

impl Record {
    fn parse(line: usize, text: &str) -> CliResult<Self> {
        let mut parts = text.split(' ');
        let kind = parts.next().unwrap_or("").to_string();
        let mut fields = Vec::new();
        for p in parts {
            let (k, v) = p
                .split_once('=')
                .ok_or_else(|| CliError::Report { line, detail: format!("field `{p}` is not key=value") })?;
            fields.push((k.to_string(), v.to_string()));
        }
        Ok(Record { line, kind, fields })
    }

    fn bad(&self, detail: String) -> CliError {
        CliError::Report { line: self.line, detail }
    }

    fn take(&mut self, key: &str) -> CliResult<String> {
        let pos = self.fields.iter().position(|(k, _)| k == key).ok_or_else(|| self.bad(format!("missing field `{key}`")))?;
        Ok(self.fields.remove(pos).1)
    }

    fn num<T: std::str::FromStr>(&mut self, key: &str) -> CliResult<T> {
        let raw = self.take(key)?;
        raw.parse().map_err(|_| self.bad(format!("field `{key}`: cannot parse `{raw}`")))
    }

    fn finish(self) -> CliResult<()> {
        match self.fields.first() {
            None => Ok(()),
            Some((k, _)) => Err(self.bad(format!("unexpected field `{k}`"))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimal_round_trip() {
        let rep = CompressionReport {
            version: "0.1.0".into(),
            config: vec![("merge".into(), "mean".into())],
            seeds: vec![("fisher".into(), 7)],
            eval: Some(EvalSummary {
                loss_before: 0.1,
                loss_after: 0.30000000000000004,
                perplexity_before: 1.1,
                perplexity_after: 1.35,
                tokens: 512,
            }),
            layers: Vec::new(),
            timings: vec![Timing { stage: "merge".into(), layer: Some(0), seconds: 1e-3 }],
        };
        let text = rep.to_text().unwrap();
        let back = CompressionReport::parse(&text).unwrap();
        assert_eq!(back, rep);
        assert_eq!(back.to_text().unwrap(), text);
    }

    #[test]
    fn rejects_malformed() {
        assert!(CompressionReport::parse("nope").is_err());
        assert!(CompressionReport::parse("d2moe-report 1\nversion value=1 extra=2\n").is_err());
        assert!(CompressionReport::parse("d2moe-report 1\nwhat value=1\n").is_err());
        assert!(CompressionReport::parse("d2moe-report 1\n").is_err());
    }
}
