//! Naive reference implementations used as test oracles. None of them share
//! code with the library beyond plain data types.
#![allow(dead_code)]

use grounder::attention::AttentionParams;
use grounder::layers::LstmCell;
use grounder::{BBox, Tensor};

/// IoU of integer-cornered boxes by counting unit cells.
pub fn pixel_iou(a: [i64; 4], b: [i64; 4]) -> f64 {
    let inside = |r: [i64; 4], x: i64, y: i64| x >= r[0] && x < r[2] && y >= r[1] && y < r[3];
    let (lo_x, lo_y) = (a[0].min(b[0]), a[1].min(b[1]));
    let (hi_x, hi_y) = (a[2].max(b[2]), a[3].max(b[3]));
    let (mut inter, mut union) = (0u64, 0u64);
    for x in lo_x..hi_x {
        for y in lo_y..hi_y {
            let (ia, ib) = (inside(a, x, y), inside(b, x, y));
            inter += (ia && ib) as u64;
            union += (ia || ib) as u64;
        }
    }
    inter as f64 / union as f64
}

pub fn to_bbox(r: [i64; 4]) -> BBox {
    BBox::new(r[0] as f64, r[1] as f64, r[2] as f64, r[3] as f64).unwrap()
}

pub fn naive_matmul(a: &Tensor, b: &Tensor) -> Vec<f64> {
    let (n, k, m) = (a.rows(), a.cols(), b.cols());
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for j in 0..m {
            let mut s = 0.0;
            for p in 0..k {
                s += a.get(i, p) * b.get(p, j);
            }
            out[i * m + j] = s;
        }
    }
    out
}

fn sig(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// One LSTM step written unit by unit; gate blocks `[i | f | o | g]`.
pub fn scalar_lstm_step(cell: &LstmCell, x: &[f64], h: &[f64], c: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let hd = h.len();
    let pre = |col: usize| -> f64 {
        let mut s = cell.bias.data()[col];
        for (r, xv) in x.iter().enumerate() {
            s += xv * cell.w_x.get(r, col);
        }
        for (r, hv) in h.iter().enumerate() {
            s += hv * cell.w_h.get(r, col);
        }
        s
    };
    let mut h_new = vec![0.0; hd];
    let mut c_new = vec![0.0; hd];
    for j in 0..hd {
        let i = sig(pre(j));
        let f = sig(pre(hd + j));
        let o = sig(pre(2 * hd + j));
        let g = pre(3 * hd + j).tanh();
        c_new[j] = f * c[j] + i * g;
        h_new[j] = o * c_new[j].tanh();
    }
    (h_new, c_new)
}

/// Attention score of each proposal, one box at a time.
pub fn naive_scores(p: &AttentionParams, h: &[f64], features: &Tensor) -> Vec<f64> {
    let k = p.b1.len();
    (0..features.rows())
        .map(|i| {
            let mut s = p.b2.data()[0];
            for m in 0..k {
                let mut z = p.b1.data()[m];
                for (j, hv) in h.iter().enumerate() {
                    z += hv * p.w_h.get(j, m);
                }
                for (j, vv) in features.row(i).iter().enumerate() {
                    z += vv * p.w_v.get(j, m);
                }
                s += z.max(0.0) * p.w2.get(m, 0);
            }
            s
        })
        .collect()
}

/// The greedy rule replayed by sorting every (phrase, box) pair by score
/// descending, then phrase, then box, and taking each pair whose phrase and
/// box are both still free.
pub fn greedy_replay(scores: &[Vec<f64>]) -> Vec<usize> {
    let mut pairs: Vec<(usize, usize)> = (0..scores.len())
        .flat_map(|p| (0..scores[p].len()).map(move |b| (p, b)))
        .collect();
    pairs.sort_by(|&(p1, b1), &(p2, b2)| {
        scores[p2][b2]
            .total_cmp(&scores[p1][b1])
            .then(p1.cmp(&p2))
            .then(b1.cmp(&b2))
    });
    let mut out = vec![usize::MAX; scores.len()];
    let mut used = vec![false; scores.first().map_or(0, Vec::len)];
    for (p, b) in pairs {
        if out[p] == usize::MAX && !used[b] {
            out[p] = b;
            used[b] = true;
        }
    }
    out
}

/// Best total score over all injective assignments, by exhaustive search.
pub fn optimal_total(scores: &[Vec<f64>]) -> f64 {
    fn go(scores: &[Vec<f64>], p: usize, used: &mut Vec<bool>) -> f64 {
        if p == scores.len() {
            return 0.0;
        }
        let mut best = f64::NEG_INFINITY;
        for b in 0..used.len() {
            if !used[b] {
                used[b] = true;
                best = best.max(scores[p][b] + go(scores, p + 1, used));
                used[b] = false;
            }
        }
        best
    }
    let n = scores.first().map_or(0, Vec::len);
    go(scores, 0, &mut vec![false; n])
}

pub fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}
