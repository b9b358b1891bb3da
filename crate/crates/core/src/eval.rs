//! Retrieval, single-shot CMC, image quality metrics and embedding export.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{synth_lr, tensor_to_images, write_bytes, Image, LabeledImage, MlrDataset};
use crate::error::{Error, Result};
use crate::model::CadNet;

/// Side of the square SSIM window.
pub const SSIM_WINDOW: usize = 8;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;
/// PSNR reported for identical images.
pub const PSNR_CAP: f64 = 100.0;
/// Images per forward pass when embedding.
const EMBED_CHUNK: usize = 64;

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| ((x - y) as f64).powi(2)).sum()
}

/// Gallery indices sorted by ascending Euclidean distance to `query`, ties
/// by index.
pub fn retrieve(query: &[f32], gallery: &[Vec<f32>]) -> Result<Vec<usize>> {
    if gallery.is_empty() {
        return Err(Error::invalid("retrieve", "empty gallery"));
    }
    if let Some(g) = gallery.iter().find(|g| g.len() != query.len()) {
        return Err(Error::ShapeMismatch {
            op: "retrieve",
            lhs: vec![query.len()],
            rhs: vec![g.len()],
        });
    }
    let dist: Vec<f64> = gallery.iter().map(|g| sq_dist(query, g)).collect();
    let mut order: Vec<usize> = (0..gallery.len()).collect();
    order.sort_by(|&i, &j| dist[i].total_cmp(&dist[j]).then(i.cmp(&j)));
    Ok(order)
}

/// `cmc[k-1]` is the fraction of queries whose true match ranks within the
/// top `k` (ranks are 1-based).
pub fn cmc_from_ranks(ranks: &[usize], gallery_size: usize) -> Vec<f64> {
    let mut counts = vec![0usize; gallery_size];
    for &r in ranks {
        if (1..=gallery_size).contains(&r) {
            counts[r - 1] += 1;
        }
    }
    let n = ranks.len().max(1) as f64;
    let mut acc = 0;
    counts
        .into_iter()
        .map(|c| {
            acc += c;
            acc as f64 / n
        })
        .collect()
}

/// An embedding with its identity.
#[derive(Clone, Debug, PartialEq)]
pub struct Labeled {
    pub identity: usize,
    pub embedding: Vec<f32>,
}

/// One random gallery draw: for each identity (ascending), an index into
/// the pool.
fn draw_gallery(by_id: &BTreeMap<usize, Vec<usize>>, rng: &mut impl Rng) -> Vec<(usize, usize)> {
    by_id
        .iter()
        .map(|(&id, members)| (id, *members.choose(rng).expect("non-empty identity")))
        .collect()
}

fn group_pool(pool: &[Labeled]) -> BTreeMap<usize, Vec<usize>> {
    let mut by_id: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for (i, g) in pool.iter().enumerate() {
        by_id.entry(g.identity).or_default().push(i);
    }
    by_id
}

/// 1-based rank of each query's identity against one single-shot gallery.
fn ranks_against(queries: &[Labeled], pool: &[Labeled], draw: &[(usize, usize)]) -> Result<Vec<usize>> {
    let gallery: Vec<Vec<f32>> = draw.iter().map(|&(_, i)| pool[i].embedding.clone()).collect();
    queries
        .iter()
        .map(|q| {
            let order = retrieve(&q.embedding, &gallery)?;
            order
                .iter()
                .position(|&g| draw[g].0 == q.identity)
                .map(|p| p + 1)
                .ok_or_else(|| Error::Dataset(format!("query identity {} missing from the gallery", q.identity)))
        })
        .collect()
}

/// Single-shot CMC averaged over `trials` random galleries holding one
/// pool image per identity.
pub fn cmc(queries: &[Labeled], pool: &[Labeled], trials: usize, rng: &mut impl Rng) -> Result<Vec<f64>> {
    if trials == 0 {
        return Err(Error::invalid("cmc", "trials must be positive"));
    }
    let by_id = group_pool(pool);
    if by_id.is_empty() {
        return Err(Error::invalid("cmc", "empty gallery pool"));
    }
    let mut mean = vec![0.0; by_id.len()];
    for _ in 0..trials {
        let draw = draw_gallery(&by_id, rng);
        let curve = cmc_from_ranks(&ranks_against(queries, pool, &draw)?, by_id.len());
        mean.iter_mut().zip(curve).for_each(|(m, c)| *m += c / trials as f64);
    }
    Ok(mean)
}

fn check_pair(op: &'static str, a: &Image, b: &Image) -> Result<()> {
    if (a.height(), a.width()) != (b.height(), b.width()) {
        return Err(Error::ShapeMismatch {
            op,
            lhs: vec![3, a.height(), a.width()],
            rhs: vec![3, b.height(), b.width()],
        });
    }
    Ok(())
}

/// Summed-area table with a zero first row and column.
fn integral(plane: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut t = vec![0.0; (h + 1) * (w + 1)];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += plane[y * w + x];
            t[(y + 1) * (w + 1) + x + 1] = t[y * (w + 1) + x + 1] + row;
        }
    }
    t
}

/// Mean SSIM over all 8×8 windows (stride 1) and the three channels, with
/// uniform weights and population statistics.
pub fn ssim(a: &Image, b: &Image) -> Result<f64> {
    check_pair("ssim", a, b)?;
    let (h, w) = (a.height(), a.width());
    let k = SSIM_WINDOW;
    if h < k || w < k {
        return Err(Error::invalid("ssim", format!("{h}x{w} image is smaller than the {k}x{k} window")));
    }
    let plane = h * w;
    let n = (k * k) as f64;
    let (oh, ow) = (h - k + 1, w - k + 1);
    let mut total = 0.0;
    for c in 0..3 {
        let xa: Vec<f64> = a.data()[c * plane..(c + 1) * plane].iter().map(|&v| v as f64).collect();
        let xb: Vec<f64> = b.data()[c * plane..(c + 1) * plane].iter().map(|&v| v as f64).collect();
        let prod = |p: &[f64], q: &[f64]| p.iter().zip(q).map(|(x, y)| x * y).collect::<Vec<_>>();
        let tables = [
            integral(&xa, h, w),
            integral(&xb, h, w),
            integral(&prod(&xa, &xa), h, w),
            integral(&prod(&xb, &xb), h, w),
            integral(&prod(&xa, &xb), h, w),
        ];
        let window = |t: &[f64], y: usize, x: usize| {
            let s = w + 1;
            t[(y + k) * s + x + k] - t[y * s + x + k] - t[(y + k) * s + x] + t[y * s + x]
        };
        for y in 0..oh {
            for x in 0..ow {
                let [sa, sb, saa, sbb, sab] = [0, 1, 2, 3, 4].map(|i| window(&tables[i], y, x) / n);
                let var_a = saa - sa * sa;
                let var_b = sbb - sb * sb;
                let cov = sab - sa * sb;
                total += ((2.0 * sa * sb + SSIM_C1) * (2.0 * cov + SSIM_C2))
                    / ((sa * sa + sb * sb + SSIM_C1) * (var_a + var_b + SSIM_C2));
            }
        }
    }
    Ok(total / (3 * oh * ow) as f64)
}

pub fn psnr_from_mse(mse: f64) -> f64 {
    if mse <= 0.0 {
        PSNR_CAP
    } else {
        (10.0 * (1.0 / mse).log10()).min(PSNR_CAP)
    }
}

/// `10·log10(1/MSE)` on unit-range images, capped at [`PSNR_CAP`].
pub fn psnr(a: &Image, b: &Image) -> Result<f64> {
    check_pair("psnr", a, b)?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| ((x - y) as f64).powi(2))
        .sum::<f64>()
        / a.data().len() as f64;
    Ok(psnr_from_mse(mse))
}

/// Worker threads for evaluation: `CADNET_THREADS` if set, else the
/// available parallelism.
pub fn eval_threads() -> usize {
    std::env::var("CADNET_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}

/// Runs `f` over chunks of `items` on up to [`eval_threads`] threads and
/// concatenates the results in order.
fn par_chunks<T: Sync, R: Send>(items: &[T], f: impl Fn(&[T]) -> Result<Vec<R>> + Sync) -> Result<Vec<R>> {
    let chunks: Vec<&[T]> = items.chunks(EMBED_CHUNK).collect();
    let threads = eval_threads().min(chunks.len()).max(1);
    if threads == 1 {
        let mut out = Vec::with_capacity(items.len());
        for c in chunks {
            out.extend(f(c)?);
        }
        return Ok(out);
    }
    let per_thread = chunks.len().div_ceil(threads);
    let results: Vec<Result<Vec<R>>> = std::thread::scope(|s| {
        let handles: Vec<_> = chunks
            .chunks(per_thread)
            .map(|group| {
                let f = &f;
                s.spawn(move || -> Result<Vec<R>> {
                    let mut out = Vec::new();
                    for c in group {
                        out.extend(f(c)?);
                    }
                    Ok(out)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("evaluation worker panicked")).collect()
    });
    let mut out = Vec::with_capacity(items.len());
    for r in results {
        out.extend(r?);
    }
    Ok(out)
}

/// `(w, u)` for every image.
pub fn embed_all(model: &CadNet, images: &[&Image]) -> Result<Vec<(Vec<f32>, Vec<f32>)>> {
    par_chunks(images, |chunk| model.embed(chunk))
}

/// `G(E(x))` for every image.
pub fn recover_all(model: &CadNet, images: &[&Image]) -> Result<Vec<Image>> {
    par_chunks(images, |chunk| tensor_to_images(&model.recover(chunk)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub rates: Vec<u32>,
    pub trials: usize,
    pub seed: u64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            rates: vec![2, 3, 4],
            trials: 10,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RateReport {
    pub queries: usize,
    pub rank1: f64,
    pub ssim: Option<f64>,
    pub psnr: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub rank1: f64,
    pub rank5: f64,
    pub rank10: f64,
    /// Over all evaluated queries, pooled across rates.
    pub cmc: Vec<f64>,
    pub ssim_mean: Option<f64>,
    pub psnr_mean: Option<f64>,
    pub per_rate: BTreeMap<u32, RateReport>,
    pub trials: usize,
}

fn at_rank(cmc: &[f64], k: usize) -> f64 {
    cmc[k.min(cmc.len()) - 1]
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{v:.6}"))
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serialises")
    }

    pub fn csv_header(&self) -> String {
        let mut h = String::from("rank1,rank5,rank10,ssim,psnr,trials");
        for r in self.per_rate.keys() {
            write!(h, ",r{r}_rank1,r{r}_ssim,r{r}_psnr").expect("write to string");
        }
        h
    }

    pub fn csv_row(&self) -> String {
        let mut row = format!(
            "{:.6},{:.6},{:.6},{},{},{}",
            self.rank1,
            self.rank5,
            self.rank10,
            opt(self.ssim_mean),
            opt(self.psnr_mean),
            self.trials
        );
        for r in self.per_rate.values() {
            write!(row, ",{:.6},{},{}", r.rank1, opt(r.ssim), opt(r.psnr)).expect("write to string");
        }
        row
    }
}

/// Queries at rate `r`: synthesised from the HR references when the
/// dataset keeps them, otherwise the stored queries recorded at that rate.
/// The second element pairs each query with its HR ground truth if known.
fn queries_at_rate(dataset: &MlrDataset, r: u32) -> Result<(Vec<LabeledImage>, Option<Vec<&Image>>)> {
    if r == 0 {
        return Err(Error::invalid("evaluate", "rate must be at least 1"));
    }
    if !dataset.references.is_empty() {
        let queries = dataset
            .references
            .iter()
            .map(|hr| if r == 1 { Ok(hr.clone()) } else { synth_lr(hr, r) })
            .collect::<Result<Vec<_>>>()?;
        return Ok((queries, Some(dataset.references.iter().map(|i| &i.pixels).collect())));
    }
    let queries: Vec<LabeledImage> = dataset.queries.iter().filter(|q| q.rate == r).cloned().collect();
    if queries.is_empty() {
        return Err(Error::Dataset(format!(
            "no queries at rate {r} and no HR references to synthesise them"
        )));
    }
    Ok((queries, None))
}

fn mean(values: &[f64]) -> f64 {
    values.iter().sum::<f64>() / values.len().max(1) as f64
}

/// Cross-resolution retrieval of LR queries against single-shot HR
/// galleries, per rate and pooled, plus SSIM/PSNR of the recovered queries
/// where HR ground truth exists.
pub fn evaluate(model: &CadNet, dataset: &MlrDataset, opts: &EvalOptions) -> Result<EvalReport> {
    if opts.rates.is_empty() {
        return Err(Error::invalid("evaluate", "no rates to evaluate"));
    }
    if opts.trials == 0 {
        return Err(Error::invalid("evaluate", "trials must be positive"));
    }
    if dataset.gallery.is_empty() {
        return Err(Error::Dataset("dataset has no gallery".into()));
    }
    let gallery_imgs: Vec<&Image> = dataset.gallery.iter().map(|g| &g.pixels).collect();
    let pool: Vec<Labeled> = embed_all(model, &gallery_imgs)?
        .into_iter()
        .zip(&dataset.gallery)
        .map(|((_, u), g)| Labeled {
            identity: g.identity,
            embedding: u,
        })
        .collect();

    let mut rates: Vec<u32> = opts.rates.clone();
    rates.sort_unstable();
    rates.dedup();
    struct RateQueries {
        rate: u32,
        queries: Vec<Labeled>,
        ssim: Option<f64>,
        psnr: Option<f64>,
    }
    let mut per_rate_queries = Vec::with_capacity(rates.len());
    for &r in &rates {
        let (queries, truth) = queries_at_rate(dataset, r)?;
        let imgs: Vec<&Image> = queries.iter().map(|q| &q.pixels).collect();
        let embedded = embed_all(model, &imgs)?;
        let (ssim_r, psnr_r) = match truth {
            Some(truth) => {
                let recovered = recover_all(model, &imgs)?;
                let mut s = Vec::with_capacity(recovered.len());
                let mut p = Vec::with_capacity(recovered.len());
                for (rec, hr) in recovered.iter().zip(truth) {
                    s.push(ssim(rec, hr)?);
                    p.push(psnr(rec, hr)?);
                }
                (Some(mean(&s)), Some(mean(&p)))
            }
            None => (None, None),
        };
        per_rate_queries.push(RateQueries {
            rate: r,
            queries: embedded
                .into_iter()
                .zip(&queries)
                .map(|((_, u), q)| Labeled {
                    identity: q.identity,
                    embedding: u,
                })
                .collect(),
            ssim: ssim_r,
            psnr: psnr_r,
        });
    }

    let by_id = group_pool(&pool);
    let g = by_id.len();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let total_queries: usize = per_rate_queries.iter().map(|r| r.queries.len()).sum();
    let mut pooled = vec![0.0; g];
    let mut rate_rank1 = vec![0.0; per_rate_queries.len()];
    for _ in 0..opts.trials {
        let draw = draw_gallery(&by_id, &mut rng);
        let mut all_ranks = Vec::with_capacity(total_queries);
        for (i, rq) in per_rate_queries.iter().enumerate() {
            let ranks = ranks_against(&rq.queries, &pool, &draw)?;
            rate_rank1[i] += cmc_from_ranks(&ranks, g)[0] / opts.trials as f64;
            all_ranks.extend(ranks);
        }
        let curve = cmc_from_ranks(&all_ranks, g);
        pooled.iter_mut().zip(curve).for_each(|(m, c)| *m += c / opts.trials as f64);
    }

    let weighted = |f: fn(&RateQueries) -> Option<f64>| -> Option<f64> {
        let mut acc = 0.0;
        for rq in &per_rate_queries {
            acc += f(rq)? * rq.queries.len() as f64;
        }
        Some(acc / total_queries as f64)
    };
    let ssim_mean = weighted(|r| r.ssim);
    let psnr_mean = weighted(|r| r.psnr);
    let per_rate = per_rate_queries
        .iter()
        .zip(rate_rank1)
        .map(|(rq, rank1)| {
            (
                rq.rate,
                RateReport {
                    queries: rq.queries.len(),
                    rank1,
                    ssim: rq.ssim,
                    psnr: rq.psnr,
                },
            )
        })
        .collect();
    Ok(EvalReport {
        rank1: at_rank(&pooled, 1),
        rank5: at_rank(&pooled, 5),
        rank10: at_rank(&pooled, 10),
        cmc: pooled,
        ssim_mean,
        psnr_mean,
        per_rate,
        trials: opts.trials,
    })
}

/// CSV of `identity,rate,w_0..,u_0..` for every image of the dataset, in
/// `MlrDataset::all_images` order.
pub fn embeddings_csv(model: &CadNet, dataset: &MlrDataset) -> Result<String> {
    let images: Vec<&LabeledImage> = dataset.all_images().collect();
    let pixels: Vec<&Image> = images.iter().map(|i| &i.pixels).collect();
    let embedded = embed_all(model, &pixels)?;
    let (wd, ud) = embedded.first().map_or((0, 0), |(w, u)| (w.len(), u.len()));
    let mut out = String::from("identity,rate");
    for i in 0..wd {
        write!(out, ",w_{i}").expect("write to string");
    }
    for i in 0..ud {
        write!(out, ",u_{i}").expect("write to string");
    }
    out.push('\n');
    for (img, (w, u)) in images.iter().zip(&embedded) {
        write!(out, "{},{}", img.identity, img.rate).expect("write to string");
        for v in w.iter().chain(u) {
            write!(out, ",{v}").expect("write to string");
        }
        out.push('\n');
    }
    Ok(out)
}

pub fn export_embeddings(model: &CadNet, dataset: &MlrDataset, path: &Path) -> Result<()> {
    write_bytes(path, embeddings_csv(model, dataset)?.as_bytes())
}

/// Mean pairwise distances of `w = GAP(f)` between images of the same
/// identity and of different identities, over HR test images and their
/// copies down-sampled at each rate.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClusterStats {
    pub intra: f64,
    pub inter: f64,
}

impl ClusterStats {
    /// `intra / inter`; below 1 means identities cluster across rates.
    pub fn ratio(&self) -> f64 {
        self.intra / self.inter
    }
}

pub fn resolution_clustering(model: &CadNet, dataset: &MlrDataset, rates: &[u32]) -> Result<ClusterStats> {
    let sources = if dataset.references.is_empty() {
        &dataset.gallery
    } else {
        &dataset.references
    };
    let mut samples = Vec::with_capacity(sources.len() * rates.len());
    for src in sources {
        for &r in rates {
            samples.push(if r <= 1 { src.clone() } else { synth_lr(src, r)? });
        }
    }
    let imgs: Vec<&Image> = samples.iter().map(|s| &s.pixels).collect();
    let w: Vec<Vec<f32>> = embed_all(model, &imgs)?.into_iter().map(|(w, _)| w).collect();
    let (mut intra, mut n_intra, mut inter, mut n_inter) = (0.0, 0usize, 0.0, 0usize);
    for i in 0..samples.len() {
        for j in i + 1..samples.len() {
            let d = sq_dist(&w[i], &w[j]).sqrt();
            if samples[i].identity == samples[j].identity {
                intra += d;
                n_intra += 1;
            } else {
                inter += d;
                n_inter += 1;
            }
        }
    }
    if n_intra == 0 || n_inter == 0 {
        return Err(Error::Dataset("clustering needs at least two identities with two samples".into()));
    }
    Ok(ClusterStats {
        intra: intra / n_intra as f64,
        inter: inter / n_inter as f64,
    })
}
