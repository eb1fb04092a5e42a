//! Probe list syntax.
//!
//! Each comma-separated entry is either a covariate quantile level
//! `qNN` (percent, applied column by column) or raw covariate values joined by
//! `:` (one per covariate, original units).

use vqr_core::classical_qr::covariate_quantile;
use vqr_core::quantile::Probe;
use vqr_core::{Dataset, Result, VqrError};

#[derive(Debug, Clone, PartialEq)]
pub enum ProbeSpec {
    Level(f64),
    Raw(Vec<f64>),
}

impl ProbeSpec {
    pub fn label(&self) -> String {
        match self {
            ProbeSpec::Level(l) => format!("q{}", fmt_pct(l * 100.0)),
            ProbeSpec::Raw(v) => v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(":"),
        }
    }

    pub fn resolve(&self, data: &Dataset, eta: Option<f64>) -> Result<Probe> {
        let x = match self {
            ProbeSpec::Level(l) => covariate_quantile(data, *l),
            ProbeSpec::Raw(v) => {
                if v.len() != data.n_covariates() {
                    return Err(VqrError::Config(format!(
                        "probe `{}` has {} values, the model has {} covariates",
                        self.label(),
                        v.len(),
                        data.n_covariates()
                    )));
                }
                v.clone()
            }
        };
        Ok(Probe {
            label: self.label(),
            x,
            eta,
        })
    }
}

fn fmt_pct(p: f64) -> String {
    if (p - p.round()).abs() < 1e-9 {
        format!("{}", p.round() as i64)
    } else {
        format!("{p}")
    }
}

pub fn parse_probe(s: &str) -> std::result::Result<ProbeSpec, String> {
    let s = s.trim();
    if let Some(pct) = s.strip_prefix('q').or_else(|| s.strip_prefix('Q')) {
        let p: f64 = pct.parse().map_err(|_| format!("bad quantile probe `{s}`"))?;
        if !(p > 0.0 && p < 100.0) {
            return Err(format!("quantile probe `{s}` must lie strictly between q0 and q100"));
        }
        return Ok(ProbeSpec::Level(p / 100.0));
    }
    let vals = s
        .split(':')
        .map(|v| v.trim().parse::<f64>().ok().filter(|x| x.is_finite()))
        .collect::<Option<Vec<_>>>()
        .ok_or_else(|| format!("bad probe `{s}`: expected qNN or numbers joined by `:`"))?;
    Ok(ProbeSpec::Raw(vals))
}
