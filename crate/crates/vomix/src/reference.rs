//! Naive reference implementation of one Vote&Mix attention block, written
//! as plain nested loops over `Vec<Vec<f32>>` with no shared kernels. The
//! engine's self-tests and the acceptance suite compare the optimized path
//! against this one: pruned/retained index sets must match exactly and
//! outputs must agree to 1e-6.
//!
//! It mirrors the documented arithmetic recipes (ascending accumulation,
//! bias after accumulation, reciprocal-multiply normalization, lowest-index
//! tie-breaks, f64 floor for the pruned count) but keeps its own control
//! flow, sorting, and data layout throughout.

use crate::attention::AttentionLayerWeights;
use crate::strategy::{AttnMix, Fanout, Feature, Metric, QueryMix, Selection, StrategyConfig};

pub struct RefOutput {
    pub x_out: Vec<Vec<f32>>,
    pub sizes_out: Vec<f32>,
    pub pruned: Vec<usize>,
    pub retained: Vec<usize>,
}

// Local SplitMix64 so random-selection trials reproduce the engine's
// documented stream without touching its code.
fn splitmix_stream(seed: u64, count: usize) -> Vec<f32> {
    let mut state = seed;
    (0..count)
        .map(|_| {
            state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
            let mut z = state;
            z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
            z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
            z ^= z >> 31;
            ((z >> 40) as f32) * (1.0 / 16_777_216.0)
        })
        .collect()
}

fn layer_norm_rows(
    x: &[Vec<f32>],
    gamma: &[f32],
    beta: &[f32],
    eps: f32,
) -> Vec<Vec<f32>> {
    let d = gamma.len();
    x.iter()
        .map(|row| {
            let mut sum = 0.0f32;
            for &v in row {
                sum += v;
            }
            let mean = sum / d as f32;
            let mut var = 0.0f32;
            for &v in row {
                let t = v - mean;
                var += t * t;
            }
            var /= d as f32;
            let inv = 1.0 / (var + eps).sqrt();
            (0..d)
                .map(|j| ((row[j] - mean) * inv) * gamma[j] + beta[j])
                .collect()
        })
        .collect()
}

/// Plain i-j-k matmul against a weight stored as in x out, bias added after
/// the accumulation.
fn project(x: &[Vec<f32>], w_rows: usize, w_cols: usize, w: &[f32], bias: &[f32]) -> Vec<Vec<f32>> {
    x.iter()
        .map(|row| {
            (0..w_cols)
                .map(|j| {
                    let mut acc = 0.0f32;
                    for (k, &xv) in row.iter().enumerate().take(w_rows) {
                        acc += xv * w[k * w_cols + j];
                    }
                    acc + bias[j]
                })
                .collect()
        })
        .collect()
}

fn softmax_row(vals: &[f32]) -> Vec<f32> {
    let mut max = f32::NEG_INFINITY;
    for &v in vals {
        if v > max {
            max = v;
        }
    }
    let exps: Vec<f32> = vals
        .iter()
        .map(|&v| {
            if v == f32::NEG_INFINITY {
                0.0
            } else {
                (v - max).exp()
            }
        })
        .collect();
    let mut sum = 0.0f32;
    for &e in &exps {
        sum += e;
    }
    let inv = 1.0 / sum;
    exps.into_iter().map(|e| e * inv).collect()
}

/// First index of the maximum (lowest index wins ties).
fn first_max(vals: &[f32]) -> usize {
    let mut best = 0;
    let mut best_v = vals[0];
    for (i, &v) in vals.iter().enumerate().skip(1) {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

/// Stable descending order via insertion sort: equal values keep ascending
/// index order.
fn sort_desc_stable(vals: &[f32]) -> Vec<usize> {
    let mut order: Vec<usize> = Vec::with_capacity(vals.len());
    for i in 0..vals.len() {
        let mut pos = order.len();
        while pos > 0 && vals[order[pos - 1]] < vals[i] {
            pos -= 1;
        }
        order.insert(pos, i);
    }
    order
}

#[allow(clippy::too_many_arguments)]
pub fn vomix_block_reference(
    x: &[Vec<f32>],
    sizes: &[f32],
    w: &AttentionLayerWeights,
    heads: usize,
    ratio: f32,
    strategy: &StrategyConfig,
    protected: &[usize],
    layer: usize,
) -> RefOutput {
    let n = x.len();
    let d = x[0].len();
    let dh = d / heads;

    // Layer norm and qkv projection.
    let normed = layer_norm_rows(x, &w.ln_gamma, &w.ln_beta, 1e-6);
    let qkv_flat: Vec<f32> = w.qkv_weight.data().to_vec();
    let qkv = project(&normed, d, 3 * d, &qkv_flat, &w.qkv_bias);
    let q: Vec<Vec<f32>> = qkv.iter().map(|r| r[0..d].to_vec()).collect();
    let k: Vec<Vec<f32>> = qkv.iter().map(|r| r[d..2 * d].to_vec()).collect();
    let v: Vec<Vec<f32>> = qkv.iter().map(|r| r[2 * d..3 * d].to_vec()).collect();

    // Head-wise mean of the similarity feature.
    let feat = match strategy.feature {
        Feature::Query => &q,
        Feature::Key => &k,
        Feature::Value => &v,
    };
    let inv_h = 1.0 / heads as f32;
    let mean: Vec<Vec<f32>> = feat
        .iter()
        .map(|row| {
            (0..dh)
                .map(|dd| {
                    let mut s = 0.0f32;
                    for h in 0..heads {
                        s += row[h * dh + dd];
                    }
                    s * inv_h
                })
                .collect()
        })
        .collect();

    // Pairwise similarity, diagonal -inf.
    let mut sim = vec![vec![f32::NEG_INFINITY; n]; n];
    match strategy.metric {
        Metric::Cosine => {
            let unit: Vec<Vec<f32>> = mean
                .iter()
                .map(|row| {
                    let mut selfdot = 0.0f32;
                    for &vv in row {
                        selfdot += vv * vv;
                    }
                    let inv = if selfdot == 0.0 { 0.0 } else { 1.0 / selfdot.sqrt() };
                    row.iter().map(|&vv| vv * inv).collect()
                })
                .collect();
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        let mut dot = 0.0f32;
                        for dd in 0..dh {
                            dot += unit[i][dd] * unit[j][dd];
                        }
                        sim[i][j] = dot.clamp(-1.0, 1.0);
                    }
                }
            }
        }
        Metric::L2 => {
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        let mut dist = 0.0f32;
                        for dd in 0..dh {
                            let t = mean[i][dd] - mean[j][dd];
                            dist += t * t;
                        }
                        sim[i][j] = -dist.sqrt();
                    }
                }
            }
        }
        Metric::Dot => {
            for i in 0..n {
                for j in 0..n {
                    if i != j {
                        let mut dot = 0.0f32;
                        for dd in 0..dh {
                            dot += mean[i][dd] * mean[j][dd];
                        }
                        sim[i][j] = dot;
                    }
                }
            }
        }
    }

    // Selection scores.
    let scores: Vec<f32> = match strategy.selection {
        Selection::Vote => {
            let votes = match strategy.fanout {
                Fanout::Top1 => 1usize,
                Fanout::Top2 => 2.min(n.saturating_sub(1)),
                Fanout::TopR => ((n as f64 * ratio as f64).floor() as usize)
                    .min(n.saturating_sub(1)),
            };
            let mut score = vec![0.0f32; n];
            if n > 1 {
                // Votes tallied in ascending voter order.
                for row in &sim {
                    if votes == 1 {
                        let t = first_max(row);
                        score[t] += row[t];
                    } else {
                        let order = sort_desc_stable(row);
                        for &t in order.iter().take(votes) {
                            score[t] += row[t];
                        }
                    }
                }
            }
            score
        }
        Selection::MaxSim => {
            let inv = if n > 1 { 1.0 / (n as f32 - 1.0) } else { 0.0 };
            sim.iter()
                .enumerate()
                .map(|(i, row)| {
                    let mut s = 0.0f32;
                    for (j, &vv) in row.iter().enumerate() {
                        if j != i {
                            s += vv;
                        }
                    }
                    s * inv
                })
                .collect()
        }
        Selection::Random { seed } => {
            let layer_seed = seed.wrapping_add((layer as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            splitmix_stream(layer_seed, n)
        }
    };

    // Partition: prune the k_p highest-score unprotected tokens.
    let mut is_protected = vec![false; n];
    for &p in protected {
        is_protected[p] = true;
    }
    let n_protected = is_protected.iter().filter(|&&b| b).count();
    let k_p = ((n - n_protected) as f64 * ratio as f64).floor() as usize;
    let order = sort_desc_stable(&scores);
    let mut pruned: Vec<usize> = Vec::with_capacity(k_p);
    for &i in &order {
        if pruned.len() == k_p {
            break;
        }
        if !is_protected[i] {
            pruned.push(i);
        }
    }
    pruned.sort_unstable();
    let retained: Vec<usize> = (0..n).filter(|i| !pruned.contains(i)).collect();
    let n_r = retained.len();

    // Mixture weights: softmaxed gathered similarity.
    let weights: Vec<Vec<f32>> = pruned
        .iter()
        .map(|&p| {
            let gathered: Vec<f32> = retained.iter().map(|&r| sim[p][r]).collect();
            softmax_row(&gathered)
        })
        .collect();
    let weights = match strategy.query_mix {
        QueryMix::Max => weights
            .iter()
            .map(|row| {
                let mut oh = vec![0.0f32; n_r];
                if !row.is_empty() {
                    oh[first_max(row)] = 1.0;
                }
                oh
            })
            .collect(),
        _ => weights,
    };

    // Query mix per the size-weighted mixture, then normalize by new size.
    let (q_mixed, sizes_out): (Vec<Vec<f32>>, Vec<f32>) = match strategy.query_mix {
        QueryMix::None => (
            retained.iter().map(|&r| q[r].clone()).collect(),
            retained.iter().map(|&r| sizes[r]).collect(),
        ),
        _ => {
            let mut qm = Vec::with_capacity(n_r);
            let mut so = Vec::with_capacity(n_r);
            for (ii, &r) in retained.iter().enumerate() {
                let mut s_new = sizes[r];
                for (jj, &p) in pruned.iter().enumerate() {
                    s_new += weights[jj][ii] * sizes[p];
                }
                let mut row: Vec<f32> = q[r].iter().map(|&vv| vv * sizes[r]).collect();
                for (jj, &p) in pruned.iter().enumerate() {
                    let wv = weights[jj][ii];
                    for (dd, o) in row.iter_mut().enumerate() {
                        *o += wv * q[p][dd] * sizes[p];
                    }
                }
                for o in row.iter_mut() {
                    *o /= s_new;
                }
                qm.push(row);
                so.push(s_new);
            }
            (qm, so)
        }
    };

    // Attention with original keys/values (or the retained subset).
    let key_rows: Vec<usize> = match strategy.attn_mix {
        AttnMix::None => retained.clone(),
        _ => (0..n).collect(),
    };
    let use_log = strategy.attn_mix == AttnMix::Prop;
    let scale = 1.0 / (dh as f32).sqrt();
    let mut attn_out = vec![vec![0.0f32; d]; n_r];
    for h in 0..heads {
        let off = h * dh;
        for (i, qrow) in q_mixed.iter().enumerate() {
            let logits: Vec<f32> = key_rows
                .iter()
                .map(|&j| {
                    let mut acc = 0.0f32;
                    for dd in 0..dh {
                        acc += qrow[off + dd] * k[j][off + dd];
                    }
                    let mut l = acc * scale;
                    if use_log {
                        l += sizes[j].ln();
                    }
                    l
                })
                .collect();
            let probs = softmax_row(&logits);
            for (jj, &j) in key_rows.iter().enumerate() {
                for dd in 0..dh {
                    attn_out[i][off + dd] += probs[jj] * v[j][off + dd];
                }
            }
        }
    }

    // Output projection and residual add of the unmixed retained rows.
    let out_flat: Vec<f32> = w.out_weight.data().to_vec();
    let projected = project(&attn_out, d, d, &out_flat, &w.out_bias);
    let x_out = retained
        .iter()
        .zip(&projected)
        .map(|(&r, prow)| {
            x[r].iter()
                .zip(prow)
                .map(|(&xv, &pv)| xv + pv)
                .collect()
        })
        .collect();

    RefOutput {
        x_out,
        sizes_out,
        pruned,
        retained,
    }
}
