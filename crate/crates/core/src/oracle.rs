//! Straight-loop reference implementations.
//!
//! These share no code with the production paths beyond the basic containers.
//! They are slow on purpose and are used by the unit tests and by the
//! `verify` subcommand.

use crate::attention::{AttnWeights, LayerNormParams};
use crate::tensor::{Mat, Ten3};

fn exp_normalize(v: &[f64]) -> Vec<f64> {
    let mut m = f64::NEG_INFINITY;
    for &x in v {
        if x > m {
            m = x;
        }
    }
    let mut e = vec![0.0; v.len()];
    let mut z = 0.0;
    for i in 0..v.len() {
        if v[i] != f64::NEG_INFINITY {
            e[i] = (v[i] - m).exp();
            z += e[i];
        }
    }
    for x in e.iter_mut() {
        *x /= z;
    }
    e
}

/// Rank of `q` in row `p` by descending score, lower index first on ties.
fn rank_in_row(row: &[f64], p: usize, q: usize) -> usize {
    let mut rank = 0;
    for r in 0..row.len() {
        if r != p && r != q && (row[r] > row[q] || (row[r] == row[q] && r < q)) {
            rank += 1;
        }
    }
    rank
}

/// Top-`η` mask by pairwise ranking.
pub fn topk_mask(s: &Mat, eta: usize) -> Mat {
    let f = s.rows();
    let k = eta.min(f.saturating_sub(1));
    let mut m = Mat::zeros(f, f);
    for p in 0..f {
        m.set(p, p, 1.0);
        for q in 0..f {
            if q != p && rank_in_row(s.row(p), p, q) < k {
                m.set(p, q, 1.0);
                m.set(q, p, 1.0);
            }
        }
    }
    m
}

/// Symmetrized frame similarity `Y Yᵀ / √D`.
pub fn similarity(y: &Mat) -> Mat {
    let (f, d) = y.shape();
    let mut s = Mat::zeros(f, f);
    for p in 0..f {
        for q in 0..f {
            let mut a = 0.0;
            for c in 0..d {
                a += y.get(p, c) * y.get(q, c);
            }
            s.set(p, q, a / (d as f64).sqrt());
        }
    }
    let t = s.clone();
    for p in 0..f {
        for q in 0..f {
            s.set(p, q, 0.5 * (t.get(p, q) + t.get(q, p)));
        }
    }
    s
}

/// kNN density by counting strictly closer points.
pub fn knn_density(d: &Mat, k: usize) -> Vec<f64> {
    let f = d.rows();
    if f < 2 {
        return vec![1.0; f];
    }
    let mut phi = vec![0.0; f];
    for p in 0..f {
        let mut members = Vec::new();
        for q in 0..f {
            if q == p {
                continue;
            }
            let closer = (0..f).filter(|&r| r != p && d.get(p, r) < d.get(p, q)).count();
            if closer < k {
                members.push(d.get(p, q));
            }
        }
        // Ascending summation order, matching the production tie semantics.
        members.sort_by(f64::total_cmp);
        let sum: f64 = members.iter().map(|v| v * v).sum();
        phi[p] = (-sum / k as f64).exp();
    }
    phi
}

/// Retained frame indices for tokens `J × F × D` and binary masks `J × F × F`.
pub fn mgptp_indices(y: &Ten3, mask: &Ten3, tau: f64, k: usize, f_keep: usize) -> Vec<usize> {
    let (jn, f, dn) = y.shape();
    let mut z = vec![vec![0.0; dn]; f];
    let mut pool = vec![vec![0.0; f]; f];
    for j in 0..jn {
        for p in 0..f {
            for c in 0..dn {
                z[p][c] += y.get(j, p, c);
            }
            for q in 0..f {
                pool[p][q] += mask.get(j, p, q);
            }
        }
    }
    for p in 0..f {
        for c in 0..dn {
            z[p][c] /= jn as f64;
        }
        for q in 0..f {
            pool[p][q] = if pool[p][q] / jn as f64 >= tau { 1.0 } else { 0.0 };
        }
    }
    let mut d = Mat::zeros(f, f);
    let mut max = 0.0f64;
    for p in 0..f {
        for q in 0..f {
            if p != q {
                let mut sq = 0.0;
                for c in 0..dn {
                    sq += (z[p][c] - z[q][c]) * (z[p][c] - z[q][c]);
                }
                let v = sq.sqrt() / (dn as f64).sqrt();
                d.set(p, q, v);
                if v > max {
                    max = v;
                }
            }
        }
    }
    for p in 0..f {
        for q in 0..f {
            if p != q && pool[p][q] == 0.0 {
                d.set(p, q, max + 1e-6);
            }
        }
    }
    let k = k.min(f - 1).max(1);
    let phi = knn_density(&d, k);
    let s: Vec<f64> = pool.iter().map(|r| r.iter().sum::<f64>()).collect();
    let w = exp_normalize(&s);
    let phi_hat: Vec<f64> = (0..f).map(|p| phi[p] * w[p]).collect();
    let mut score = vec![0.0; f];
    for p in 0..f {
        let mut best: Option<f64> = None;
        for q in 0..f {
            let higher = phi_hat[q] > phi_hat[p] || (phi_hat[q] == phi_hat[p] && q < p);
            if q != p && higher && best.is_none_or(|b| d.get(p, q) < b) {
                best = Some(d.get(p, q));
            }
        }
        let omega = match best {
            Some(b) => b,
            None => (0..f).map(|q| d.get(p, q)).fold(0.0, f64::max),
        };
        score[p] = omega * phi_hat[p];
    }
    let mut taken = vec![false; f];
    for _ in 0..f_keep {
        let mut arg = None;
        for p in 0..f {
            if !taken[p] && arg.is_none_or(|a: usize| score[p] > score[a]) {
                arg = Some(p);
            }
        }
        taken[arg.unwrap()] = true;
    }
    (0..f).filter(|&p| taken[p]).collect()
}

/// Pre-LN residual attention over the rows of `x`, optionally with an additive mask.
pub fn temporal_attention(x: &Mat, w: &AttnWeights, norm: &LayerNormParams, mask: Option<&[f64]>) -> Mat {
    let (l, d) = x.shape();
    let dk = d / w.heads;
    let mut n = x.clone();
    for r in 0..l {
        let row: Vec<f64> = n.row(r).to_vec();
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / d as f64;
        for c in 0..d {
            n.set(r, c, (row[c] - mean) / (var + 1e-5).sqrt() * norm.gamma[c] + norm.beta[c]);
        }
    }
    let proj = |m: &Mat| {
        let mut o = Mat::zeros(l, d);
        for r in 0..l {
            for c in 0..d {
                o.set(r, c, (0..d).map(|k| n.get(r, k) * m.get(k, c)).sum());
            }
        }
        o
    };
    let (q, k, v) = (proj(&w.w_q), proj(&w.w_k), proj(&w.w_v));
    let mut concat = Mat::zeros(l, d);
    for h in 0..w.heads {
        for p in 0..l {
            let logits: Vec<f64> = (0..l)
                .map(|s| {
                    let dot: f64 = (0..dk).map(|i| q.get(p, h * dk + i) * k.get(s, h * dk + i)).sum();
                    dot / (dk as f64).sqrt() + mask.map_or(0.0, |m| m[p * l + s])
                })
                .collect();
            let pr = exp_normalize(&logits);
            for i in 0..dk {
                concat.set(p, h * dk + i, (0..l).map(|s| pr[s] * v.get(s, h * dk + i)).sum());
            }
        }
    }
    let mut out = x.clone();
    for r in 0..l {
        for c in 0..d {
            let add: f64 = (0..d).map(|k| concat.get(r, k) * w.w_o.get(k, c)).sum();
            out.set(r, c, out.get(r, c) + add);
        }
    }
    out
}
