//! Token-reduction strategy configuration: which tokens get selected, how
//! votes are cast, which feature and metric measure similarity, and how
//! queries and attention handle the pruned set. One pipeline skeleton serves
//! every combination; the default configuration is the hard-coded Vote&Mix
//! path, not a second implementation.

use crate::attention::SimilarityMatrix;
use crate::error::{Error, Result};
use crate::rng::SplitMix64;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Selection {
    /// Similarity voting: prune the tokens that receive the most weighted votes.
    Vote,
    /// Prune the tokens with the highest mean similarity to all others.
    MaxSim,
    /// Deterministic pseudo-random scores from the given seed.
    Random { seed: u64 },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fanout {
    Top1,
    Top2,
    /// Each token votes for its `floor(N * r)` most similar tokens, where
    /// `r` is the layer's pruning ratio.
    TopR,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Feature {
    Query,
    Key,
    Value,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    Cosine,
    L2,
    Dot,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum QueryMix {
    /// Soft mixture of every pruned query into all retained ones.
    Global,
    /// Each pruned query folds entirely into its most similar retained query.
    Max,
    /// Pruned queries and their sizes are discarded (mass not conserved).
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AttnMix {
    /// Proportional attention: logits biased by log of the previous sizes,
    /// keys/values cover all input tokens.
    Prop,
    /// Keys/values cover all input tokens, no size bias.
    NoProp,
    /// Attention restricted to the retained q, k, v; no size bias.
    None,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StrategyConfig {
    pub selection: Selection,
    pub fanout: Fanout,
    pub feature: Feature,
    pub metric: Metric,
    pub query_mix: QueryMix,
    pub attn_mix: AttnMix,
}

impl Default for StrategyConfig {
    fn default() -> Self {
        Self {
            selection: Selection::Vote,
            fanout: Fanout::Top1,
            feature: Feature::Key,
            metric: Metric::Cosine,
            query_mix: QueryMix::Global,
            attn_mix: AttnMix::Prop,
        }
    }
}

/// A validated configuration plus any non-fatal warnings.
#[derive(Clone, Debug)]
pub struct ValidatedStrategy {
    pub config: StrategyConfig,
    pub warnings: Vec<String>,
}

/// Parses the CLI/config-file spelling of each axis. `None` fields fall back
/// to the defaults. A fanout given together with a non-vote selection is
/// accepted with a warning; unknown values are configuration errors.
pub fn validate(
    selection: Option<&str>,
    fanout: Option<&str>,
    feature: Option<&str>,
    metric: Option<&str>,
    query_mix: Option<&str>,
    attn_mix: Option<&str>,
    random_seed: u64,
) -> Result<ValidatedStrategy> {
    let mut cfg = StrategyConfig::default();
    let mut warnings = Vec::new();

    if let Some(s) = selection {
        cfg.selection = match s {
            "vote" => Selection::Vote,
            "max_sim" | "max-sim" => Selection::MaxSim,
            "random" => Selection::Random { seed: random_seed },
            other => return Err(Error::Config(format!("unknown selection \"{other}\""))),
        };
    }
    if let Some(s) = fanout {
        cfg.fanout = match s {
            "top1" => Fanout::Top1,
            "top2" => Fanout::Top2,
            "topr" => Fanout::TopR,
            other => return Err(Error::Config(format!("unknown fanout \"{other}\""))),
        };
        if cfg.selection != Selection::Vote {
            warnings.push(format!(
                "fanout \"{s}\" has no effect with selection != vote"
            ));
        }
    }
    if let Some(s) = feature {
        cfg.feature = match s {
            "q" => Feature::Query,
            "k" => Feature::Key,
            "v" => Feature::Value,
            other => return Err(Error::Config(format!("unknown feature \"{other}\""))),
        };
    }
    if let Some(s) = metric {
        cfg.metric = match s {
            "cosine" => Metric::Cosine,
            "l2" => Metric::L2,
            "dot" => Metric::Dot,
            other => return Err(Error::Config(format!("unknown metric \"{other}\""))),
        };
    }
    if let Some(s) = query_mix {
        cfg.query_mix = match s {
            "global" => QueryMix::Global,
            "max" => QueryMix::Max,
            "none" => QueryMix::None,
            other => return Err(Error::Config(format!("unknown query-mix \"{other}\""))),
        };
    }
    if let Some(s) = attn_mix {
        cfg.attn_mix = match s {
            "prop" => AttnMix::Prop,
            "no_prop" | "no-prop" => AttnMix::NoProp,
            "none" => AttnMix::None,
            other => return Err(Error::Config(format!("unknown attn-mix \"{other}\""))),
        };
    }
    Ok(ValidatedStrategy {
        config: cfg,
        warnings,
    })
}

impl StrategyConfig {
    /// Short stable identifier, used in CSV output.
    pub fn id(&self) -> String {
        let sel = match self.selection {
            Selection::Vote => "vote".to_string(),
            Selection::MaxSim => "max_sim".to_string(),
            Selection::Random { .. } => "random".to_string(),
        };
        let fan = match self.fanout {
            Fanout::Top1 => "top1",
            Fanout::Top2 => "top2",
            Fanout::TopR => "topr",
        };
        let feat = match self.feature {
            Feature::Query => "q",
            Feature::Key => "k",
            Feature::Value => "v",
        };
        let met = match self.metric {
            Metric::Cosine => "cosine",
            Metric::L2 => "l2",
            Metric::Dot => "dot",
        };
        let qm = match self.query_mix {
            QueryMix::Global => "global",
            QueryMix::Max => "max",
            QueryMix::None => "none",
        };
        let am = match self.attn_mix {
            AttnMix::Prop => "prop",
            AttnMix::NoProp => "no_prop",
            AttnMix::None => "none",
        };
        format!("{sel}/{fan}/{feat}/{met}/{qm}/{am}")
    }
}

/// Mean similarity of each token to all others (diagonal excluded). Higher
/// means more homogeneous, so pruned first.
pub fn max_sim_scores(a: &SimilarityMatrix) -> Vec<f32> {
    let n = a.matrix().rows();
    let inv = if n > 1 { 1.0 / (n as f32 - 1.0) } else { 0.0 };
    crate::opcount::add(n as u64);
    (0..n)
        .map(|i| {
            let mut sum = 0.0f32;
            for (j, &v) in a.matrix().row(i).iter().enumerate() {
                if j != i {
                    sum += v;
                }
            }
            sum * inv
        })
        .collect()
}

/// Deterministic pseudo-random scores in [0, 1).
pub fn random_scores(n: usize, seed: u64) -> Vec<f32> {
    let mut rng = SplitMix64::new(seed);
    (0..n).map(|_| rng.next_unit_f32()).collect()
}
