//! Per-layer pruning schedule grammar.
//!
//! `const:<a>:<b>`  — ratio `a` for the first `b` layers, 0 after.
//! `decr:<a>:<b>`   — linear decrease from `a` (layer 0) to exactly 0 at
//!                    layer `b-1`, 0 after.
//! `list:<r0>,<r1>,…` — explicit per-layer ratios, one per layer.
//!
//! A truncated schedule is expressed as `const:<a>:<L/2>`.

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct PruneSchedule {
    ratios: Vec<f32>,
}

impl PruneSchedule {
    pub fn from_ratios(ratios: Vec<f32>) -> Result<Self> {
        for &r in &ratios {
            if !(0.0..1.0).contains(&r) {
                return Err(Error::Config(format!("ratio {r} outside [0, 1)")));
            }
        }
        Ok(Self { ratios })
    }

    pub fn zeros(depth: usize) -> Self {
        Self {
            ratios: vec![0.0; depth],
        }
    }

    pub fn ratios(&self) -> &[f32] {
        &self.ratios
    }

    pub fn depth(&self) -> usize {
        self.ratios.len()
    }

    pub fn is_vanilla(&self) -> bool {
        self.ratios.iter().all(|&r| r == 0.0)
    }
}

/// Expands a schedule string to exactly `depth` per-layer ratios.
pub fn expand_schedule(spec: &str, depth: usize) -> Result<PruneSchedule> {
    let malformed = || Error::Config(format!("malformed schedule \"{spec}\""));
    let mut parts = spec.splitn(2, ':');
    let kind = parts.next().ok_or_else(malformed)?;
    let rest = parts.next().ok_or_else(malformed)?;

    let parse_ratio = |s: &str| -> Result<f32> {
        let a: f32 = s
            .parse()
            .map_err(|_| Error::Config(format!("bad ratio \"{s}\" in schedule \"{spec}\"")))?;
        if !(0.0..1.0).contains(&a) {
            return Err(Error::Config(format!(
                "ratio {a} outside [0, 1) in schedule \"{spec}\""
            )));
        }
        Ok(a)
    };

    let ratios = match kind {
        "const" | "decr" => {
            let (a_str, b_str) = rest.split_once(':').ok_or_else(malformed)?;
            let a = parse_ratio(a_str)?;
            let b: usize = b_str
                .parse()
                .map_err(|_| Error::Config(format!("bad layer count \"{b_str}\" in \"{spec}\"")))?;
            if b > depth {
                return Err(Error::Config(format!(
                    "schedule \"{spec}\" prunes {b} layers but the model has {depth}"
                )));
            }
            (0..depth)
                .map(|l| {
                    if l >= b {
                        0.0
                    } else if kind == "const" {
                        a
                    } else if b > 1 {
                        // Linear from a down to exactly 0 at layer b-1.
                        a * (b - 1 - l) as f32 / (b - 1) as f32
                    } else {
                        0.0
                    }
                })
                .collect()
        }
        "list" => {
            let vals: Vec<f32> = rest
                .split(',')
                .map(parse_ratio)
                .collect::<Result<Vec<_>>>()?;
            if vals.len() != depth {
                return Err(Error::Config(format!(
                    "schedule \"{spec}\" lists {} ratios but the model has {depth} layers",
                    vals.len()
                )));
            }
            vals
        }
        _ => return Err(malformed()),
    };
    Ok(PruneSchedule { ratios })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn const_full_depth() {
        let s = expand_schedule("const:0.05:12", 12).unwrap();
        assert_eq!(s.ratios(), &[0.05; 12]);
    }

    #[test]
    fn const_truncated_on_deeper_model() {
        let s = expand_schedule("const:0.05:12", 24).unwrap();
        assert_eq!(&s.ratios()[..12], &[0.05; 12]);
        assert_eq!(&s.ratios()[12..], &[0.0; 12]);
    }

    #[test]
    fn decreasing_endpoints() {
        let s = expand_schedule("decr:0.10:12", 12).unwrap();
        assert!((s.ratios()[0] - 0.10).abs() < 1e-7);
        assert_eq!(s.ratios()[11], 0.0);
        // Strictly decreasing over the pruned prefix.
        for w in s.ratios().windows(2) {
            assert!(w[0] > w[1] || (w[0] == 0.0 && w[1] == 0.0));
        }
    }

    #[test]
    fn list_exact_length() {
        let s = expand_schedule("list:0.1,0,0.2", 3).unwrap();
        assert_eq!(s.ratios(), &[0.1, 0.0, 0.2]);
        assert!(expand_schedule("list:0.1,0", 3).is_err());
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(expand_schedule("const:0.05:13", 12).is_err()); // b > L
        assert!(expand_schedule("const:1.0:4", 12).is_err()); // a out of range
        assert!(expand_schedule("const:-0.1:4", 12).is_err());
        assert!(expand_schedule("ramp:0.1:4", 12).is_err()); // unknown kind
        assert!(expand_schedule("const:0.05", 12).is_err()); // missing field
        assert!(expand_schedule("", 12).is_err());
    }

    #[test]
    fn vanilla_detection() {
        assert!(expand_schedule("const:0:12", 12).unwrap().is_vanilla());
        assert!(!expand_schedule("const:0.05:1", 12).unwrap().is_vanilla());
    }
}
