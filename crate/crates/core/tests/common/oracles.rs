//! Slow, direct reference implementations used to check the library.

use cadnet::data::Image;
use cadnet::eval::Labeled;

fn dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum::<f64>().sqrt()
}

/// Batch-hard triplet loss with explicit loops over anchors.
pub fn triplet(x: &[f32], dim: usize, labels: &[usize], margin: f64) -> f64 {
    let n = labels.len();
    let row = |i: usize| &x[i * dim..(i + 1) * dim];
    let mut total = 0.0;
    for a in 0..n {
        let mut hardest_pos = f64::NEG_INFINITY;
        let mut hardest_neg = f64::INFINITY;
        for j in 0..n {
            if j == a {
                continue;
            }
            let d = dist(row(a), row(j));
            if labels[j] == labels[a] {
                hardest_pos = hardest_pos.max(d);
            } else {
                hardest_neg = hardest_neg.min(d);
            }
        }
        total += (margin + hardest_pos - hardest_neg).max(0.0);
    }
    total / n as f64
}

/// Retrieval order by pairwise comparison: position = number of gallery
/// items strictly closer, or equally close with a smaller index.
pub fn retrieve(query: &[f32], gallery: &[Vec<f32>]) -> Vec<usize> {
    let d: Vec<f64> = gallery.iter().map(|g| dist(query, g)).collect();
    let mut order = vec![usize::MAX; gallery.len()];
    for i in 0..gallery.len() {
        let pos = (0..gallery.len())
            .filter(|&j| d[j] < d[i] || (d[j] == d[i] && j < i))
            .count();
        order[pos] = i;
    }
    order
}

/// Single-shot CMC averaged exactly over every possible gallery draw (one
/// pool image per identity, all draws equally likely).
pub fn cmc_exhaustive(queries: &[Labeled], pool: &[Labeled]) -> Vec<f64> {
    let mut ids: Vec<usize> = pool.iter().map(|p| p.identity).collect();
    ids.sort();
    ids.dedup();
    let members: Vec<Vec<usize>> = ids
        .iter()
        .map(|&id| (0..pool.len()).filter(|&i| pool[i].identity == id).collect())
        .collect();
    let draws: usize = members.iter().map(Vec::len).product();
    let mut curve = vec![0.0; ids.len()];
    for code in 0..draws {
        // mixed-radix decode of the draw index
        let mut rest = code;
        let gallery: Vec<usize> = members
            .iter()
            .map(|m| {
                let pick = m[rest % m.len()];
                rest /= m.len();
                pick
            })
            .collect();
        for q in queries {
            let truth = ids.iter().position(|&id| id == q.identity).expect("query identity in pool");
            let d_truth = dist(&q.embedding, &pool[gallery[truth]].embedding);
            let rank = 1 + (0..gallery.len())
                .filter(|&g| {
                    let d = dist(&q.embedding, &pool[gallery[g]].embedding);
                    d < d_truth || (d == d_truth && g < truth)
                })
                .count();
            for v in curve.iter_mut().skip(rank - 1) {
                *v += 1.0;
            }
        }
    }
    let norm = (draws * queries.len()) as f64;
    curve.iter().map(|v| v / norm).collect()
}

/// SSIM by direct summation over every 8×8 window of every channel.
pub fn ssim(a: &Image, b: &Image) -> f64 {
    const K: usize = 8;
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let (h, w) = (a.height(), a.width());
    let mut total = 0.0;
    let mut count = 0usize;
    for c in 0..3 {
        for y in 0..=h - K {
            for x in 0..=w - K {
                let px = |img: &Image| -> Vec<f64> {
                    let mut v = Vec::with_capacity(K * K);
                    for dy in 0..K {
                        for dx in 0..K {
                            v.push(img.get(c, y + dy, x + dx) as f64);
                        }
                    }
                    v
                };
                let (pa, pb) = (px(a), px(b));
                let n = (K * K) as f64;
                let ma = pa.iter().sum::<f64>() / n;
                let mb = pb.iter().sum::<f64>() / n;
                let va = pa.iter().map(|v| (v - ma).powi(2)).sum::<f64>() / n;
                let vb = pb.iter().map(|v| (v - mb).powi(2)).sum::<f64>() / n;
                let cov = pa.iter().zip(&pb).map(|(p, q)| (p - ma) * (q - mb)).sum::<f64>() / n;
                total += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
                count += 1;
            }
        }
    }
    total / count as f64
}
