//! Offspring and step laws.

mod offspring;
mod step;

pub use offspring::{OffspringLaw, OffspringSpec, TailIndex};
pub use step::{StepLaw, StepSpec};

use crate::error::{Error, Result};

/// Split `name:k1=v1,k2=v2` into the name and numeric parameters.
pub(crate) fn split_spec(s: &str) -> Result<(&str, Vec<(&str, f64)>)> {
    let s = s.trim();
    let (name, rest) = match s.split_once(':') {
        Some((n, r)) => (n, r),
        None => (s, ""),
    };
    let mut params = Vec::new();
    for item in rest.split(',').map(str::trim).filter(|x| !x.is_empty()) {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| Error::Parse(format!("expected key=value, got {item:?} in {s:?}")))?;
        let v: f64 = v
            .trim()
            .parse()
            .map_err(|_| Error::Parse(format!("bad number {v:?} for {k} in {s:?}")))?;
        params.push((k.trim(), v));
    }
    Ok((name, params))
}
