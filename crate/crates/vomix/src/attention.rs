//! Vote&Mix attention: per-layer token voting, query mixing with size
//! bookkeeping, and proportional attention.
//!
//! Each block, given N tokens, measures pairwise similarity between the
//! head-wise mean of a chosen projection feature, lets every token cast a
//! weighted vote for its most similar peers, prunes the most-voted tokens,
//! softly mixes their queries into the retained ones (conserving total
//! token mass), and then runs attention with the mixed queries against the
//! original keys and values, biasing logits by the log of each key's
//! accumulated size.
//!
//! Determinism contract shared with [`crate::reference`]: accumulations run
//! over ascending indices, ties in argmax/argsort resolve to the lowest
//! index, cosine similarity normalizes by a reciprocal square root
//! (zero-norm vectors normalize to zero, so their similarity is exactly 0)
//! and is clamped to [-1, 1], and pruned counts use
//! `floor((n - protected) as f64 * r as f64)`.

use crate::error::{Error, Result};
use crate::opcount;
use crate::rng::layer_seed;
use crate::strategy::{
    max_sim_scores, random_scores, AttnMix, Fanout, Feature, Metric, QueryMix, Selection,
    StrategyConfig,
};
use crate::tensor::{self, Matrix};

/// Token embeddings paired with per-token mixed sizes. The object that flows
/// between layers: `sizes[i]` counts how much original token mass has been
/// mixed into token `i` (all 1 at the input).
#[derive(Clone, Debug)]
pub struct TokenState {
    pub x: Matrix,
    pub sizes: Vec<f32>,
    pub layer: usize,
}

impl TokenState {
    pub fn new(x: Matrix) -> Self {
        let n = x.rows();
        Self {
            x,
            sizes: vec![1.0; n],
            layer: 0,
        }
    }

    pub fn n(&self) -> usize {
        self.x.rows()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn total_size(&self) -> f32 {
        self.sizes.iter().sum()
    }
}

/// Per-token q, k, v projections. Stored as N x D row-major; head `h`
/// occupies the column block `h*d_head..(h+1)*d_head`.
#[derive(Clone, Debug)]
pub struct AttentionProjections {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    pub heads: usize,
}

impl AttentionProjections {
    pub fn head_dim(&self) -> usize {
        self.q.cols() / self.heads
    }

    fn feature(&self, f: Feature) -> &Matrix {
        match f {
            Feature::Query => &self.q,
            Feature::Key => &self.k,
            Feature::Value => &self.v,
        }
    }
}

/// N x N similarity matrix with the diagonal masked to -inf so no token can
/// vote for itself.
#[derive(Clone, Debug)]
pub struct SimilarityMatrix {
    a: Matrix,
}

impl SimilarityMatrix {
    pub fn from_matrix(mut a: Matrix) -> Result<Self> {
        if a.rows() != a.cols() {
            return Err(Error::Config(format!(
                "similarity matrix must be square, got {}x{}",
                a.rows(),
                a.cols()
            )));
        }
        for i in 0..a.rows() {
            a.set(i, i, f32::NEG_INFINITY);
        }
        Ok(Self { a })
    }

    pub fn matrix(&self) -> &Matrix {
        &self.a
    }

    pub fn n(&self) -> usize {
        self.a.rows()
    }
}

/// Vote outcome: `target[i]` is the token that token `i` voted for first,
/// `score[i]` the weighted votes token `i` received.
#[derive(Clone, Debug)]
pub struct VoteResult {
    pub target: Vec<usize>,
    pub score: Vec<f32>,
}

/// Pruned/retained split, both sorted ascending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Partition {
    pub pruned: Vec<usize>,
    pub retained: Vec<usize>,
}

/// Row-stochastic mixture weights from pruned tokens (rows) to retained
/// tokens (columns).
#[derive(Clone, Debug)]
pub struct MixtureWeights {
    pub w: Matrix,
}

/// Head-wise mean of a projection feature: one D/H vector per token.
pub fn head_mean(m: &Matrix, heads: usize) -> Matrix {
    let n = m.rows();
    let dh = m.cols() / heads;
    let inv_h = 1.0 / heads as f32;
    opcount::add((n * dh) as u64);
    let mut out = Matrix::zeros(n, dh);
    for i in 0..n {
        let row = m.row(i);
        let orow = out.row_mut(i);
        for (d, o) in orow.iter_mut().enumerate() {
            let mut sum = 0.0f32;
            for h in 0..heads {
                sum += row[h * dh + d];
            }
            *o = sum * inv_h;
        }
    }
    out
}

/// Pairwise similarity between head-wise mean features, diagonal masked.
pub fn compute_similarity(
    proj: &AttentionProjections,
    feature: Feature,
    metric: Metric,
) -> SimilarityMatrix {
    let f = head_mean(proj.feature(feature), proj.heads);
    let n = f.rows();
    let dh = f.cols();
    let mut a = Matrix::zeros(n, n);

    match metric {
        Metric::Cosine => {
            // Normalize once, then pairwise dots; zero-norm rows normalize
            // to zero so their similarity to everything is exactly 0.
            let mut unit = f;
            opcount::add((n * dh * 2) as u64);
            for i in 0..n {
                let row = unit.row_mut(i);
                let mut selfdot = 0.0f32;
                for &v in row.iter() {
                    selfdot += v * v;
                }
                let inv = if selfdot == 0.0 {
                    0.0
                } else {
                    1.0 / selfdot.sqrt()
                };
                for v in row.iter_mut() {
                    *v *= inv;
                }
            }
            opcount::add((n * (n - 1) * dh) as u64);
            for i in 0..n {
                for j in 0..n {
                    if i == j {
                        continue;
                    }
                    let mut d = 0.0f32;
                    for (x, y) in unit.row(i).iter().zip(unit.row(j)) {
                        d += x * y;
                    }
                    a.set(i, j, d.clamp(-1.0, 1.0));
                }
            }
        }
        Metric::L2 => {
            opcount::add((n * (n - 1) * dh) as u64);
            for i in 0..n {
                for j in 0..n {
                    if i == j {
                        continue;
                    }
                    let mut d = 0.0f32;
                    for (x, y) in f.row(i).iter().zip(f.row(j)) {
                        let t = x - y;
                        d += t * t;
                    }
                    a.set(i, j, -d.sqrt());
                }
            }
        }
        Metric::Dot => {
            opcount::add((n * (n - 1) * dh) as u64);
            for i in 0..n {
                for j in 0..n {
                    if i == j {
                        continue;
                    }
                    let mut d = 0.0f32;
                    for (x, y) in f.row(i).iter().zip(f.row(j)) {
                        d += x * y;
                    }
                    a.set(i, j, d);
                }
            }
        }
    }
    for i in 0..n {
        a.set(i, i, f32::NEG_INFINITY);
    }
    SimilarityMatrix { a }
}

/// Weighted similarity voting. Every token casts a vote for its most
/// similar peers (1, 2, or `floor(N*r)` of them depending on fanout), each
/// vote weighted by the similarity; a token's score is the sum of votes it
/// received. Votes are tallied in ascending voter order.
pub fn vote_scores(a: &SimilarityMatrix, fanout: Fanout, ratio: f32) -> VoteResult {
    let n = a.n();
    if n == 1 {
        return VoteResult {
            target: vec![0],
            score: vec![0.0],
        };
    }
    let votes_per_token = match fanout {
        Fanout::Top1 => 1,
        Fanout::Top2 => 2.min(n - 1),
        Fanout::TopR => ((n as f64 * ratio as f64).floor() as usize).min(n - 1),
    };
    let mut target = vec![0usize; n];
    let mut score = vec![0.0f32; n];

    if votes_per_token == 1 {
        for (i, t) in target.iter_mut().enumerate() {
            *t = tensor::argmax_first(a.matrix().row(i));
        }
        for j in 0..n {
            score[target[j]] += a.matrix().get(j, target[j]);
        }
    } else {
        let mut firsts = vec![0usize; n];
        let mut ranked: Vec<Vec<usize>> = Vec::with_capacity(n);
        for i in 0..n {
            let order = tensor::argsort_desc(a.matrix().row(i));
            // -inf diagonal always sorts last, so the head of the order is
            // purely non-self.
            firsts[i] = order[0];
            ranked.push(order.into_iter().take(votes_per_token).collect());
        }
        for j in 0..n {
            for &t in &ranked[j] {
                score[t] += a.matrix().get(j, t);
            }
        }
        target = firsts;
    }
    VoteResult { target, score }
}

/// Splits tokens into pruned and retained sets: the `floor((n-|protected|)*r)`
/// highest-score unprotected tokens are pruned. Protected tokens vote and
/// receive mixture but are never pruned.
pub fn select_tokens(scores: &[f32], r: f32, protected: &[usize]) -> Result<Partition> {
    if !(0.0..1.0).contains(&r) {
        return Err(Error::Config(format!("pruning ratio {r} outside [0, 1)")));
    }
    let n = scores.len();
    let mut is_protected = vec![false; n];
    for &p in protected {
        if p >= n {
            return Err(Error::Config(format!(
                "protected index {p} out of range for {n} tokens"
            )));
        }
        is_protected[p] = true;
    }
    let n_protected = is_protected.iter().filter(|&&b| b).count();
    let k_p = ((n - n_protected) as f64 * r as f64).floor() as usize;

    let order = tensor::argsort_desc(scores);
    let mut pruned = Vec::with_capacity(k_p);
    for &i in &order {
        if pruned.len() == k_p {
            break;
        }
        if !is_protected[i] {
            pruned.push(i);
        }
    }
    pruned.sort_unstable();
    let mut in_pruned = vec![false; n];
    for &p in &pruned {
        in_pruned[p] = true;
    }
    let retained = (0..n).filter(|&i| !in_pruned[i]).collect();
    Ok(Partition { pruned, retained })
}

/// Row-softmaxed similarity gathered from pruned rows to retained columns.
pub fn mixture_weights(a: &SimilarityMatrix, part: &Partition) -> MixtureWeights {
    let k_p = part.pruned.len();
    let n_r = part.retained.len();
    let mut w = Matrix::zeros(k_p, n_r);
    for (jj, &p) in part.pruned.iter().enumerate() {
        let src = a.matrix().row(p);
        let dst = w.row_mut(jj);
        for (ii, &r) in part.retained.iter().enumerate() {
            dst[ii] = src[r];
        }
    }
    if k_p > 0 {
        // Gathered entries are off-diagonal, so every row has finite support.
        tensor::row_softmax_in_place(&mut w).expect("gathered similarity rows are finite");
    }
    MixtureWeights { w }
}

/// Mixed queries in factored form: the returned rows are
/// `q_i + sum_j W_ji * (s_j / s_i) * q_j` and `row_scale[i] = s_i / s_new_i`,
/// so that `row_scale[i] * q_row[i]` equals the size-weighted mixture
/// `(q_i s_i + sum_j W_ji q_j s_j) / s_new_i`. The scale is folded into the
/// attention logit scaling, which keeps the mixing cost at the cross-term
/// matmul.
#[derive(Clone, Debug)]
pub struct MixedQueries {
    pub q: Matrix,
    pub row_scale: Vec<f32>,
    pub sizes: Vec<f32>,
    pub mass_conserved: bool,
    /// The weights the mixture actually applied, when they differ from the
    /// caller's (max mode replaces each row by a one-hot).
    pub used_weights: Option<Matrix>,
}

pub fn mix_queries(
    proj: &AttentionProjections,
    sizes: &[f32],
    part: &Partition,
    weights: &MixtureWeights,
    mode: QueryMix,
) -> Result<MixedQueries> {
    let n_r = part.retained.len();
    let k_p = part.pruned.len();
    let d = proj.q.cols();

    if mode == QueryMix::None {
        let q = proj.q.gather_rows(&part.retained);
        let sizes = part.retained.iter().map(|&i| sizes[i]).collect();
        return Ok(MixedQueries {
            q,
            row_scale: vec![1.0; n_r],
            sizes,
            mass_conserved: false,
            used_weights: None,
        });
    }

    // Max mode: replace each row of W by a one-hot at its argmax.
    let mut one_hot = None;
    let w = if mode == QueryMix::Max && k_p > 0 {
        let mut oh = Matrix::zeros(k_p, n_r);
        for j in 0..k_p {
            oh.set(j, tensor::argmax_first(weights.w.row(j)), 1.0);
        }
        one_hot = Some(oh);
        one_hot.as_ref().unwrap()
    } else {
        &weights.w
    };

    // New sizes first (ascending pruned order per retained token).
    opcount::add((k_p * n_r) as u64);
    let mut new_sizes = vec![0.0f32; n_r];
    for (ii, ns) in new_sizes.iter_mut().enumerate() {
        let mut acc = sizes[part.retained[ii]];
        for (jj, &p) in part.pruned.iter().enumerate() {
            acc += w.get(jj, ii) * sizes[p];
        }
        *ns = acc;
    }
    for (ii, &s) in new_sizes.iter().enumerate() {
        if s <= 0.0 {
            return Err(Error::Invariant(format!(
                "mixed size {s} <= 0 for retained token {}",
                part.retained[ii]
            )));
        }
    }

    let mut q = proj.q.gather_rows(&part.retained);
    opcount::add((k_p * n_r * (d + 2)) as u64);
    for ii in 0..n_r {
        let ri = part.retained[ii];
        let inv_si = 1.0 / sizes[ri];
        for (jj, &p) in part.pruned.iter().enumerate() {
            let coeff = (w.get(jj, ii) * sizes[p]) * inv_si;
            let src = proj.q.row(p);
            let dst = q.row_mut(ii);
            for (o, &v) in dst.iter_mut().zip(src) {
                *o += coeff * v;
            }
        }
    }
    opcount::add(n_r as u64);
    let row_scale = (0..n_r)
        .map(|ii| sizes[part.retained[ii]] * (1.0 / new_sizes[ii]))
        .collect();

    Ok(MixedQueries {
        q,
        row_scale,
        sizes: new_sizes,
        mass_conserved: true,
        used_weights: one_hot,
    })
}

/// Attention with the mixed queries. Keys and values are the original
/// N-token projections (mode `None` restricts them to the retained set);
/// sizes are the pre-mixing sizes of this layer. Mode `Prop` adds
/// `ln(s_prev[j])` to every logit column. Returns the concatenated head
/// outputs; the caller applies the output projection.
pub fn proportional_attention(
    mixed: &MixedQueries,
    proj: &AttentionProjections,
    s_prev: &[f32],
    part: &Partition,
    mode: AttnMix,
) -> Result<Matrix> {
    for &s in s_prev {
        if s <= 0.0 {
            return Err(Error::Invariant(format!("token size {s} <= 0")));
        }
    }
    let heads = proj.heads;
    let d = proj.q.cols();
    let dh = d / heads;
    let n_r = mixed.q.rows();
    let restricted;
    let (keys, values): (&Matrix, &Matrix) = match mode {
        AttnMix::Prop | AttnMix::NoProp => (&proj.k, &proj.v),
        AttnMix::None => {
            restricted = (
                proj.k.gather_rows(&part.retained),
                proj.v.gather_rows(&part.retained),
            );
            (&restricted.0, &restricted.1)
        }
    };
    let n_k = keys.rows();
    let log_bias: Option<Vec<f32>> = match mode {
        AttnMix::Prop => Some(s_prev.iter().map(|&s| s.ln()).collect()),
        _ => None,
    };

    let inv_sqrt_d = 1.0 / (dh as f32).sqrt();
    opcount::add(n_r as u64);
    let scales: Vec<f32> = mixed.row_scale.iter().map(|&b| inv_sqrt_d * b).collect();

    let mut out = Matrix::zeros(n_r, d);
    let mut logits = Matrix::zeros(n_r, n_k);
    for h in 0..heads {
        let off = h * dh;
        opcount::add((n_r * n_k * (dh + 1)) as u64);
        for i in 0..n_r {
            let qrow = &mixed.q.row(i)[off..off + dh];
            let lrow = logits.row_mut(i);
            for (j, l) in lrow.iter_mut().enumerate() {
                let mut acc = 0.0f32;
                for (x, y) in qrow.iter().zip(&keys.row(j)[off..off + dh]) {
                    acc += x * y;
                }
                *l = acc * scales[i];
            }
            if let Some(bias) = &log_bias {
                for (l, &b) in lrow.iter_mut().zip(bias) {
                    *l += b;
                }
            }
        }
        tensor::row_softmax_in_place(&mut logits)?;
        opcount::add((n_r * n_k * dh) as u64);
        for i in 0..n_r {
            let orow = &mut out.row_mut(i)[off..off + dh];
            for j in 0..n_k {
                let p = logits.get(i, j);
                for (o, &v) in orow.iter_mut().zip(&values.row(j)[off..off + dh]) {
                    *o += p * v;
                }
            }
        }
    }
    Ok(out)
}

/// Layer-norm scale/shift, fused qkv projection and output projection of
/// one attention sub-block.
#[derive(Clone, Debug)]
pub struct AttentionLayerWeights {
    pub ln_gamma: Vec<f32>,
    pub ln_beta: Vec<f32>,
    /// D x 3D: columns 0..D are q, D..2D are k, 2D..3D are v.
    pub qkv_weight: Matrix,
    pub qkv_bias: Vec<f32>,
    pub out_weight: Matrix,
    pub out_bias: Vec<f32>,
}

/// Instrumented multiply counts per pipeline phase of one block.
#[derive(Clone, Copy, Debug, Default)]
pub struct PhaseOps {
    pub norm: u64,
    pub qkv: u64,
    pub similarity: u64,
    pub vote: u64,
    pub mix_softmax: u64,
    pub query_mix: u64,
    pub attention: u64,
    pub out_proj: u64,
    pub mlp: u64,
}

impl PhaseOps {
    /// Multiplies in the Vote&Mix-specific steps (everything a vanilla
    /// attention block would not do).
    pub fn overhead(&self) -> u64 {
        self.similarity + self.vote + self.mix_softmax + self.query_mix
    }

    pub fn total(&self) -> u64 {
        self.norm
            + self.qkv
            + self.similarity
            + self.vote
            + self.mix_softmax
            + self.query_mix
            + self.attention
            + self.out_proj
            + self.mlp
    }
}

/// What one block did: the partition, the mixture weights and size vectors
/// (kept only when tracing is requested), and instrumented op counts.
#[derive(Clone, Debug)]
pub struct LayerTrace {
    pub layer: usize,
    pub n_in: usize,
    pub n_out: usize,
    pub ratio: f32,
    pub pruned: Vec<usize>,
    pub retained: Vec<usize>,
    pub mix_weights: Option<Matrix>,
    pub sizes_before: Option<Vec<f32>>,
    pub sizes_after: Option<Vec<f32>>,
    pub mass_conserved: bool,
    pub phase_ops: PhaseOps,
}

/// One Vote&Mix attention block: layer norm, qkv projection on all N
/// tokens, similarity, vote, selection, mixture weights, query mix,
/// proportional attention, output projection, and a residual add of the
/// unmixed retained rows of the input.
#[allow(clippy::too_many_arguments)]
pub fn vomix_attention_block(
    state: &TokenState,
    w: &AttentionLayerWeights,
    heads: usize,
    ratio: f32,
    strategy: &StrategyConfig,
    protected: &[usize],
    collect_trace: bool,
) -> Result<(TokenState, LayerTrace)> {
    let n = state.n();
    let d = state.dim();
    if heads == 0 || d % heads != 0 {
        return Err(Error::Config(format!(
            "head count {heads} must divide embed dim {d}"
        )));
    }
    if w.qkv_weight.rows() != d || w.qkv_weight.cols() != 3 * d {
        return Err(Error::Config(format!(
            "qkv weight must be {d}x{}, got {}x{}",
            3 * d,
            w.qkv_weight.rows(),
            w.qkv_weight.cols()
        )));
    }
    let mut ops = PhaseOps::default();
    let mut mark = opcount::total();
    let mut phase = |slot: &mut u64| {
        let now = opcount::total();
        *slot = now - mark;
        mark = now;
    };

    let normed = tensor::layer_norm(&state.x, &w.ln_gamma, &w.ln_beta, tensor::LAYER_NORM_EPS)?;
    phase(&mut ops.norm);

    let qkv = tensor::linear(&normed, &w.qkv_weight, &w.qkv_bias)?;
    let proj = AttentionProjections {
        q: qkv.slice_cols(0, d),
        k: qkv.slice_cols(d, 2 * d),
        v: qkv.slice_cols(2 * d, 3 * d),
        heads,
    };
    phase(&mut ops.qkv);

    let sim = compute_similarity(&proj, strategy.feature, strategy.metric);
    phase(&mut ops.similarity);

    let scores = match strategy.selection {
        Selection::Vote => vote_scores(&sim, strategy.fanout, ratio).score,
        Selection::MaxSim => max_sim_scores(&sim),
        Selection::Random { seed } => random_scores(n, layer_seed(seed, state.layer)),
    };
    let part = select_tokens(&scores, ratio, protected)?;
    phase(&mut ops.vote);

    let weights = mixture_weights(&sim, &part);
    phase(&mut ops.mix_softmax);

    let mixed = mix_queries(&proj, &state.sizes, &part, &weights, strategy.query_mix)?;
    phase(&mut ops.query_mix);

    let attn = proportional_attention(&mixed, &proj, &state.sizes, &part, strategy.attn_mix)?;
    phase(&mut ops.attention);

    let projected = tensor::linear(&attn, &w.out_weight, &w.out_bias)?;
    phase(&mut ops.out_proj);

    let mut x_out = state.x.gather_rows(&part.retained);
    for (o, p) in x_out.data_mut().iter_mut().zip(projected.data()) {
        *o += p;
    }

    let trace = LayerTrace {
        layer: state.layer,
        n_in: n,
        n_out: part.retained.len(),
        ratio,
        // Trace the weights the mixture actually applied (one-hot in max
        // mode) so provenance reproduces the size bookkeeping.
        mix_weights: collect_trace
            .then(|| mixed.used_weights.clone().unwrap_or_else(|| weights.w.clone())),
        sizes_before: collect_trace.then(|| state.sizes.clone()),
        sizes_after: collect_trace.then(|| mixed.sizes.clone()),
        pruned: part.pruned,
        retained: part.retained,
        mass_conserved: mixed.mass_conserved,
        phase_ops: ops,
    };
    Ok((
        TokenState {
            x: x_out,
            sizes: mixed.sizes,
            layer: state.layer + 1,
        },
        trace,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use crate::strategy::StrategyConfig;

    fn random_matrix(rng: &mut SplitMix64, rows: usize, cols: usize, amp: f32) -> Matrix {
        let data = (0..rows * cols)
            .map(|_| rng.next_range(-amp, amp))
            .collect();
        Matrix::from_vec(rows, cols, data).unwrap()
    }

    fn proj_from(q: Matrix, heads: usize) -> AttentionProjections {
        AttentionProjections {
            k: q.clone(),
            v: q.clone(),
            q,
            heads,
        }
    }

    fn random_layer_weights(rng: &mut SplitMix64, d: usize) -> AttentionLayerWeights {
        AttentionLayerWeights {
            ln_gamma: (0..d).map(|_| rng.next_range(0.5, 1.5)).collect(),
            ln_beta: (0..d).map(|_| rng.next_range(-0.1, 0.1)).collect(),
            qkv_weight: random_matrix(rng, d, 3 * d, 0.1),
            qkv_bias: (0..3 * d).map(|_| rng.next_range(-0.05, 0.05)).collect(),
            out_weight: random_matrix(rng, d, d, 0.1),
            out_bias: (0..d).map(|_| rng.next_range(-0.05, 0.05)).collect(),
        }
    }

    fn sim_from(rows: &[Vec<f32>]) -> SimilarityMatrix {
        SimilarityMatrix::from_matrix(Matrix::from_rows(rows)).unwrap()
    }

    #[test]
    fn identical_keys_cosine_one() {
        let q = Matrix::from_rows(&[vec![0.3, 0.4], vec![0.3, 0.4], vec![0.3, 0.4]]);
        let sim = compute_similarity(&proj_from(q, 1), Feature::Key, Metric::Cosine);
        for i in 0..3 {
            for j in 0..3 {
                if i == j {
                    assert_eq!(sim.matrix().get(i, j), f32::NEG_INFINITY);
                } else {
                    assert!((sim.matrix().get(i, j) - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn orthogonal_keys_cosine_zero() {
        let q = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let sim = compute_similarity(&proj_from(q, 1), Feature::Key, Metric::Cosine);
        assert_eq!(sim.matrix().get(0, 1), 0.0);
        assert_eq!(sim.matrix().get(0, 0), f32::NEG_INFINITY);
    }

    #[test]
    fn head_mean_two_heads() {
        // Two tokens, H=2, d_head=2: head slices (1,0) and (0,1) average to
        // (0.5, 0.5); identical tokens have cosine similarity 1.
        let k = Matrix::from_rows(&[vec![1.0, 0.0, 0.0, 1.0], vec![1.0, 0.0, 0.0, 1.0]]);
        let mean = head_mean(&k, 2);
        assert_eq!(mean.row(0), &[0.5, 0.5]);
        let sim = compute_similarity(&proj_from(k, 2), Feature::Key, Metric::Cosine);
        assert!((sim.matrix().get(0, 1) - 1.0).abs() < 1e-6);
    }

    #[test]
    fn zero_norm_key_similarity_is_zero() {
        let q = Matrix::from_rows(&[vec![0.0, 0.0], vec![1.0, 2.0], vec![2.0, 1.0]]);
        let sim = compute_similarity(&proj_from(q, 1), Feature::Key, Metric::Cosine);
        assert_eq!(sim.matrix().get(0, 1), 0.0);
        assert_eq!(sim.matrix().get(1, 0), 0.0);
        assert!(sim.matrix().get(1, 2) > 0.0);
    }

    #[test]
    fn similarity_is_bitwise_symmetric() {
        let mut rng = SplitMix64::new(31);
        let q = random_matrix(&mut rng, 9, 8, 1.0);
        for metric in [Metric::Cosine, Metric::L2, Metric::Dot] {
            let sim = compute_similarity(&proj_from(q.clone(), 2), Feature::Key, metric);
            for i in 0..9 {
                for j in 0..i {
                    assert_eq!(
                        sim.matrix().get(i, j).to_bits(),
                        sim.matrix().get(j, i).to_bits(),
                        "{metric:?} at ({i},{j})"
                    );
                }
            }
        }
    }

    #[test]
    fn l2_and_dot_metrics() {
        let q = Matrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 1.0]]);
        let l2 = compute_similarity(&proj_from(q.clone(), 1), Feature::Key, Metric::L2);
        assert!((l2.matrix().get(0, 1) + 2.0f32.sqrt()).abs() < 1e-6);
        let dot = compute_similarity(&proj_from(q, 1), Feature::Key, Metric::Dot);
        assert_eq!(dot.matrix().get(0, 1), 0.0);
    }

    #[test]
    fn vote_hand_example() {
        let inf = f32::NEG_INFINITY;
        let a = sim_from(&[
            vec![inf, 0.9, 0.1],
            vec![0.9, inf, 0.2],
            vec![0.1, 0.2, inf],
        ]);
        let v = vote_scores(&a, Fanout::Top1, 0.0);
        assert_eq!(v.target, vec![1, 0, 1]);
        assert!((v.score[0] - 0.9).abs() < 1e-6);
        assert!((v.score[1] - 1.1).abs() < 1e-6);
        assert_eq!(v.score[2], 0.0);
        // Score mass equals the sum of cast vote weights.
        let cast: f32 = (0..3).map(|j| a.matrix().get(j, v.target[j])).sum();
        let received: f32 = v.score.iter().sum();
        assert!((cast - received).abs() < 1e-5);
    }

    #[test]
    fn vote_all_equal_ties_to_lowest_index() {
        let c = 0.5;
        let inf = f32::NEG_INFINITY;
        let a = sim_from(&[
            vec![inf, c, c, c],
            vec![c, inf, c, c],
            vec![c, c, inf, c],
            vec![c, c, c, inf],
        ]);
        let v = vote_scores(&a, Fanout::Top1, 0.0);
        assert_eq!(v.target, vec![1, 0, 0, 0]);
        let total: f32 = v.score.iter().sum();
        assert!((total - 4.0 * c).abs() < 1e-6);
    }

    #[test]
    fn vote_top2_matches_brute_force() {
        let inf = f32::NEG_INFINITY;
        let a = sim_from(&[
            vec![inf, 0.9, 0.1],
            vec![0.9, inf, 0.2],
            vec![0.1, 0.2, inf],
        ]);
        let v = vote_scores(&a, Fanout::Top2, 0.0);
        // Brute force: every token votes for both other tokens.
        let mut expect = vec![0.0f32; 3];
        for j in 0..3 {
            for t in 0..3 {
                if t != j {
                    expect[t] += a.matrix().get(j, t);
                }
            }
        }
        for (got, want) in v.score.iter().zip(&expect) {
            assert!((got - want).abs() < 1e-6);
        }
    }

    #[test]
    fn select_hand_example() {
        let part = select_tokens(&[0.9, 1.1, 0.0], 1.0 / 3.0, &[]).unwrap();
        assert_eq!(part.pruned, vec![1]);
        assert_eq!(part.retained, vec![0, 2]);
    }

    #[test]
    fn select_zero_ratio_keeps_all() {
        let part = select_tokens(&[0.5, 0.1], 0.0, &[]).unwrap();
        assert!(part.pruned.is_empty());
        assert_eq!(part.retained, vec![0, 1]);
    }

    #[test]
    fn select_protects_top_scorer() {
        // k_p = floor(2 * 0.5) = 1: token 0 has the highest score but is
        // protected, so the best unprotected token goes instead.
        let part = select_tokens(&[9.0, 1.0, 0.5], 0.5, &[0]).unwrap();
        assert!(!part.pruned.contains(&0));
        assert_eq!(part.pruned, vec![1]);
        assert_eq!(part.retained, vec![0, 2]);
    }

    #[test]
    fn select_rejects_bad_ratio() {
        assert!(select_tokens(&[0.0], 1.0, &[]).is_err());
        assert!(select_tokens(&[0.0], -0.1, &[]).is_err());
    }

    #[test]
    fn mixture_weights_hand_example() {
        let inf = f32::NEG_INFINITY;
        let a = sim_from(&[
            vec![inf, 0.9, 0.1],
            vec![0.9, inf, 0.2],
            vec![0.1, 0.2, inf],
        ]);
        let part = Partition {
            pruned: vec![1],
            retained: vec![0, 2],
        };
        let mw = mixture_weights(&a, &part);
        assert!((mw.w.get(0, 0) - 0.6682).abs() < 1e-3);
        assert!((mw.w.get(0, 1) - 0.3318).abs() < 1e-3);
        let sum: f32 = mw.w.row(0).iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
    }

    #[test]
    fn mixture_weights_uniform_when_equidistant() {
        let inf = f32::NEG_INFINITY;
        let a = sim_from(&[
            vec![inf, 0.4, 0.4],
            vec![0.4, inf, 0.1],
            vec![0.4, 0.1, inf],
        ]);
        let part = Partition {
            pruned: vec![0],
            retained: vec![1, 2],
        };
        let mw = mixture_weights(&a, &part);
        assert!((mw.w.get(0, 0) - 0.5).abs() < 1e-6);
        assert!((mw.w.get(0, 1) - 0.5).abs() < 1e-6);
    }

    #[test]
    fn mixture_weights_empty_partition() {
        let inf = f32::NEG_INFINITY;
        let a = sim_from(&[vec![inf, 0.2], vec![0.2, inf]]);
        let part = Partition {
            pruned: vec![],
            retained: vec![0, 1],
        };
        let mw = mixture_weights(&a, &part);
        assert_eq!(mw.w.rows(), 0);
        assert_eq!(mw.w.cols(), 2);
    }

    #[test]
    fn mix_queries_identical_tokens_is_identity() {
        let q = Matrix::from_rows(&[vec![0.2, 0.7], vec![0.2, 0.7], vec![0.2, 0.7]]);
        let proj = proj_from(q, 1);
        let sim = compute_similarity(&proj, Feature::Key, Metric::Cosine);
        let part = Partition {
            pruned: vec![1],
            retained: vec![0, 2],
        };
        let w = mixture_weights(&sim, &part);
        let sizes = vec![1.0; 3];
        let mixed = mix_queries(&proj, &sizes, &part, &w, QueryMix::Global).unwrap();
        for i in 0..2 {
            for (j, &v) in mixed.q.row(i).iter().enumerate() {
                let full = v * mixed.row_scale[i];
                assert!((full - proj.q.get(0, j)).abs() < 1e-6);
            }
        }
        let total: f32 = mixed.sizes.iter().sum();
        assert!((total - 3.0).abs() < 1e-5);
    }

    #[test]
    fn mix_queries_size_update_hand_example() {
        let q = Matrix::zeros(3, 2);
        let proj = proj_from(q, 1);
        let part = Partition {
            pruned: vec![1],
            retained: vec![0, 2],
        };
        let w = MixtureWeights {
            w: Matrix::from_rows(&[vec![0.6682, 0.3318]]),
        };
        let sizes = vec![1.0; 3];
        let mixed = mix_queries(&proj, &sizes, &part, &w, QueryMix::Global).unwrap();
        assert!((mixed.sizes[0] - 1.6682).abs() < 1e-5);
        assert!((mixed.sizes[1] - 1.3318).abs() < 1e-5);
        let total: f32 = mixed.sizes.iter().sum();
        assert!((total - 3.0).abs() < 1e-5);
    }

    #[test]
    fn mix_queries_none_discards_mass() {
        let q = Matrix::from_rows(&[vec![1.0], vec![2.0], vec![3.0]]);
        let proj = proj_from(q, 1);
        let part = Partition {
            pruned: vec![1],
            retained: vec![0, 2],
        };
        let w = MixtureWeights {
            w: Matrix::from_rows(&[vec![0.5, 0.5]]),
        };
        let sizes = vec![1.0; 3];
        let mixed = mix_queries(&proj, &sizes, &part, &w, QueryMix::None).unwrap();
        assert!(!mixed.mass_conserved);
        assert_eq!(mixed.sizes, vec![1.0, 1.0]);
        assert_eq!(mixed.q.get(0, 0), 1.0);
        assert_eq!(mixed.q.get(1, 0), 3.0);
    }

    #[test]
    fn proportional_attention_unit_sizes_match_standard() {
        let mut rng = SplitMix64::new(11);
        let q = random_matrix(&mut rng, 4, 6, 0.5);
        let k = random_matrix(&mut rng, 4, 6, 0.5);
        let v = random_matrix(&mut rng, 4, 6, 0.5);
        let proj = AttentionProjections { q: q.clone(), k, v, heads: 2 };
        let part = Partition {
            pruned: vec![],
            retained: (0..4).collect(),
        };
        let mixed = MixedQueries {
            q,
            row_scale: vec![1.0; 4],
            sizes: vec![1.0; 4],
            mass_conserved: true,
            used_weights: None,
        };
        let sizes = vec![1.0; 4];
        let with_prop =
            proportional_attention(&mixed, &proj, &sizes, &part, AttnMix::Prop).unwrap();
        let without =
            proportional_attention(&mixed, &proj, &sizes, &part, AttnMix::NoProp).unwrap();
        assert!(with_prop.max_abs_diff(&without) < 1e-6);
        // With no pruning, restricting keys/values changes nothing either.
        let none = proportional_attention(&mixed, &proj, &sizes, &part, AttnMix::None).unwrap();
        assert!(with_prop.max_abs_diff(&none) < 1e-6);
    }

    #[test]
    fn proportional_attention_size_bias() {
        // One retained query, two keys with sizes (1, 3) and equal logits:
        // attention weights must be (1/4, 3/4).
        let q = Matrix::from_rows(&[vec![0.0]]);
        let k = Matrix::from_rows(&[vec![1.0], vec![1.0]]);
        let v = Matrix::from_rows(&[vec![1.0], vec![0.0]]);
        let proj = AttentionProjections { q: q.clone(), k, v, heads: 1 };
        let part = Partition {
            pruned: vec![1],
            retained: vec![0],
        };
        let mixed = MixedQueries {
            q,
            row_scale: vec![1.0],
            sizes: vec![1.0],
            mass_conserved: true,
            used_weights: None,
        };
        let out =
            proportional_attention(&mixed, &proj, &[1.0, 3.0], &part, AttnMix::Prop).unwrap();
        // Output = w0 * 1 + w1 * 0 = 1/4.
        assert!((out.get(0, 0) - 0.25).abs() < 1e-6);
    }

    #[test]
    fn proportional_attention_rejects_nonpositive_size() {
        let q = Matrix::from_rows(&[vec![0.0]]);
        let proj = proj_from(q.clone(), 1);
        let part = Partition {
            pruned: vec![],
            retained: vec![0],
        };
        let mixed = MixedQueries {
            q,
            row_scale: vec![1.0],
            sizes: vec![1.0],
            mass_conserved: true,
            used_weights: None,
        };
        assert!(proportional_attention(&mixed, &proj, &[0.0], &part, AttnMix::Prop).is_err());
    }

    #[test]
    fn block_prunes_one_of_four_and_conserves_mass() {
        let mut rng = SplitMix64::new(42);
        let d = 8;
        let w = random_layer_weights(&mut rng, d);
        let x = random_matrix(&mut rng, 4, d, 1.0);
        let state = TokenState::new(x.clone());
        let (next, trace) = vomix_attention_block(
            &state,
            &w,
            2,
            0.25,
            &StrategyConfig::default(),
            &[],
            true,
        )
        .unwrap();
        assert_eq!(trace.pruned.len(), 1);
        assert_eq!(next.n(), 3);
        assert!((next.total_size() - 4.0).abs() < 1e-4);

        // Same block through the brute-force reference path.
        let rows: Vec<Vec<f32>> = (0..4).map(|i| x.row(i).to_vec()).collect();
        let oracle = crate::reference::vomix_block_reference(
            &rows,
            &[1.0; 4],
            &w,
            2,
            0.25,
            &StrategyConfig::default(),
            &[],
            0,
        );
        assert_eq!(trace.pruned, oracle.pruned);
        for (i, orow) in oracle.x_out.iter().enumerate() {
            for (j, &ov) in orow.iter().enumerate() {
                assert!((next.x.get(i, j) - ov).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn block_token_counts_follow_floor_rule() {
        let mut rng = SplitMix64::new(7);
        let d = 8;
        let w = random_layer_weights(&mut rng, d);
        let x = random_matrix(&mut rng, 8, d, 1.0);
        let mut state = TokenState::new(x);
        let mut counts = vec![state.n()];
        for _ in 0..2 {
            let (next, _) = vomix_attention_block(
                &state,
                &w,
                2,
                0.25,
                &StrategyConfig::default(),
                &[],
                false,
            )
            .unwrap();
            counts.push(next.n());
            state = next;
        }
        assert_eq!(counts, vec![8, 6, 5]);
    }

    #[test]
    fn block_conserves_mass_in_max_mode() {
        let mut rng = SplitMix64::new(9);
        let d = 8;
        let w = random_layer_weights(&mut rng, d);
        let x = random_matrix(&mut rng, 10, d, 1.0);
        let state = TokenState::new(x);
        let strategy = StrategyConfig {
            query_mix: QueryMix::Max,
            ..StrategyConfig::default()
        };
        let (next, _) =
            vomix_attention_block(&state, &w, 2, 0.3, &StrategyConfig::default(), &[], false)
                .unwrap();
        assert!((next.total_size() - 10.0).abs() < 1e-4);
        let (next_max, _) =
            vomix_attention_block(&state, &w, 2, 0.3, &strategy, &[], false).unwrap();
        assert!((next_max.total_size() - 10.0).abs() < 1e-4);
    }

    #[test]
    fn block_protected_token_survives() {
        let mut rng = SplitMix64::new(13);
        let d = 8;
        let w = random_layer_weights(&mut rng, d);
        let x = random_matrix(&mut rng, 6, d, 1.0);
        let state = TokenState::new(x);
        let (_, trace) = vomix_attention_block(
            &state,
            &w,
            2,
            0.5,
            &StrategyConfig::default(),
            &[0],
            false,
        )
        .unwrap();
        assert!(trace.retained.contains(&0));
        assert!(!trace.pruned.contains(&0));
    }
}
