//! Text form of attacks and attack chains.
//!
//! ```text
//! chain    := attack ( "|" attack )*
//! attack   := name [ ":" param ( "," param )* ]
//! param    := key "=" value
//! value    := number | number ".." number | word
//! ```
//!
//! Ranges are only meaningful in sampler templates, where each draw picks a
//! uniform value inside the range.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;

use super::AttackSpec;
use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub enum TemplateValue {
    Number(f64),
    Range(f64, f64),
    Word(String),
}

impl fmt::Display for TemplateValue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TemplateValue::Number(v) => write!(f, "{v}"),
            TemplateValue::Range(a, b) => write!(f, "{a}..{b}"),
            TemplateValue::Word(w) => f.write_str(w),
        }
    }
}

/// Concrete parameter value handed to [`AttackSpec::from_parts`].
#[derive(Clone, Debug, PartialEq)]
pub enum Value {
    Number(f64),
    Word(String),
}

/// An attack whose numeric parameters may be ranges.
#[derive(Clone, Debug, PartialEq)]
pub struct AttackTemplate {
    pub name: String,
    pub params: Vec<(String, TemplateValue)>,
}

fn parse_number(s: &str) -> Option<f64> {
    s.parse::<f64>().ok().filter(|v| v.is_finite())
}

impl FromStr for AttackTemplate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        let (name, rest) = match s.split_once(':') {
            Some((n, r)) => (n.trim(), Some(r)),
            None => (s, None),
        };
        if name.is_empty() || !name.chars().all(|c| c.is_ascii_alphanumeric() || c == '_') {
            return Err(Error::Parameter(format!("bad attack name in '{s}'")));
        }
        let mut params = Vec::new();
        for item in rest.into_iter().flat_map(|r| r.split(',')) {
            let item = item.trim();
            if item.is_empty() {
                continue;
            }
            let (key, value) = item
                .split_once('=')
                .ok_or_else(|| Error::Parameter(format!("expected key=value, got '{item}'")))?;
            let (key, value) = (key.trim(), value.trim());
            if params.iter().any(|(k, _)| k == key) {
                return Err(Error::Parameter(format!("duplicate parameter '{key}'")));
            }
            let parsed = if let Some((a, b)) = value.split_once("..") {
                match (parse_number(a), parse_number(b)) {
                    (Some(a), Some(b)) if a <= b => TemplateValue::Range(a, b),
                    _ => return Err(Error::Parameter(format!("bad range '{value}'"))),
                }
            } else if let Some(v) = parse_number(value) {
                TemplateValue::Number(v)
            } else if !value.is_empty() {
                TemplateValue::Word(value.to_string())
            } else {
                return Err(Error::Parameter(format!("empty value for '{key}'")));
            };
            params.push((key.to_string(), parsed));
        }
        Ok(Self {
            name: name.to_ascii_lowercase(),
            params,
        })
    }
}

impl fmt::Display for AttackTemplate {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.name)?;
        for (i, (k, v)) in self.params.iter().enumerate() {
            f.write_str(if i == 0 { ":" } else { "," })?;
            write!(f, "{k}={v}")?;
        }
        Ok(())
    }
}

impl AttackTemplate {
    pub fn is_fixed(&self) -> bool {
        !self
            .params
            .iter()
            .any(|(_, v)| matches!(v, TemplateValue::Range(..)))
    }

    /// Draws range parameters uniformly and builds the attack.
    pub fn instantiate<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<AttackSpec> {
        let params: BTreeMap<String, Value> = self
            .params
            .iter()
            .map(|(k, v)| {
                let v = match v {
                    TemplateValue::Number(x) => Value::Number(*x),
                    TemplateValue::Range(a, b) if a == b => Value::Number(*a),
                    TemplateValue::Range(a, b) => Value::Number(rng.gen_range(*a..*b)),
                    TemplateValue::Word(w) => Value::Word(w.clone()),
                };
                (k.clone(), v)
            })
            .collect();
        AttackSpec::from_parts(&self.name, &params)
    }

    /// Builds the attack, rejecting ranges.
    pub fn fixed(&self) -> Result<AttackSpec> {
        if !self.is_fixed() {
            return Err(Error::Parameter(format!(
                "'{self}' has ranges; only sampler templates may use them"
            )));
        }
        self.instantiate(&mut rand::rngs::mock::StepRng::new(0, 0))
    }
}

/// Attacks applied left to right.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct AttackChain(pub Vec<AttackSpec>);

impl FromStr for AttackChain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.trim().is_empty() {
            return Err(Error::Parameter("empty attack chain".into()));
        }
        s.split('|')
            .map(|part| part.parse::<AttackSpec>())
            .collect::<Result<Vec<_>>>()
            .map(AttackChain)
    }
}

impl fmt::Display for AttackChain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, a) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str("|")?;
            }
            write!(f, "{a}")?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_params_and_ranges() {
        let t: AttackTemplate = "tsm:rate=0.8..1.2".parse().unwrap();
        assert_eq!(t.name, "tsm");
        assert_eq!(t.params, vec![("rate".into(), TemplateValue::Range(0.8, 1.2))]);
        assert!(!t.is_fixed());
        assert!(t.fixed().is_err());

        let t: AttackTemplate = " crop : fraction=0.2 , position=random ".parse().unwrap();
        assert_eq!(t.to_string(), "crop:fraction=0.2,position=random");
    }

    #[test]
    fn rejects_malformed() {
        for bad in ["", ":x=1", "tsm:rate", "tsm:rate=", "tsm:rate=1..0.5", "tsm:rate=1,rate=2", "ts m"] {
            assert!(bad.parse::<AttackTemplate>().is_err(), "{bad}");
        }
        assert!("".parse::<AttackChain>().is_err());
        assert!("tsm:rate=0.9||noise:snr=3".parse::<AttackChain>().is_err());
    }

    #[test]
    fn chain_round_trips() {
        let c: AttackChain = "tsm:rate=0.9|noise:snr=30".parse().unwrap();
        assert_eq!(c.0.len(), 2);
        assert_eq!(c.to_string().parse::<AttackChain>().unwrap(), c);
    }
}
