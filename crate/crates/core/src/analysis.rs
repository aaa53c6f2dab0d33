//! Diagnostics over trained aligners: which dictionary atoms fire for which
//! poses, a 2-D projection of identity representations, robustness to noisy
//! Euler angles and small ablation grids.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io::Write;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::aligner::{tokenize, AlignerConfig, AlignerParams, FaceInput, PairBatch, Pooling};
use crate::pose::EulerAngles;
use crate::rng::{stream, Domain};
use crate::synth::WorldConfig;
use crate::trainer::{face_reps, retrieval_accuracy, train, TrainConfig};
use crate::{Error, Result};

/// Indices of the `k` largest weights in descending weight order; equal
/// weights keep ascending index order.
pub fn top_k_atoms(w: ArrayView1<'_, f64>, k: usize) -> Result<Vec<usize>> {
    if k > w.len() {
        return Err(Error::InvalidArgument(format!("k = {k} exceeds the {} available atoms", w.len())));
    }
    if let Some(i) = w.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("dictionary weight {i}")));
    }
    let mut idx: Vec<usize> = (0..w.len()).collect();
    idx.sort_by(|&a, &b| w[b].total_cmp(&w[a]).then(a.cmp(&b)));
    idx.truncate(k);
    Ok(idx)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoseBucket {
    Frontal,
    Left,
    Right,
    Up,
    Down,
}

/// Half-width of the frontal band in degrees.
pub const FRONTAL_BAND: f64 = 15.0;

impl PoseBucket {
    pub const ALL: [PoseBucket; 5] = [PoseBucket::Frontal, PoseBucket::Left, PoseBucket::Right, PoseBucket::Up, PoseBucket::Down];

    /// Dominant-angle rule. Positive yaw looks left, positive pitch looks up;
    /// when |yaw| and |pitch| tie the yaw axis wins.
    pub fn of(e: &EulerAngles) -> Self {
        let (p, y) = (e.pitch(), e.yaw());
        if y.abs() <= FRONTAL_BAND && p.abs() <= FRONTAL_BAND {
            PoseBucket::Frontal
        } else if y.abs() >= p.abs() {
            if y > 0.0 { PoseBucket::Left } else { PoseBucket::Right }
        } else if p > 0.0 {
            PoseBucket::Up
        } else {
            PoseBucket::Down
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PoseBucket::Frontal => "frontal",
            PoseBucket::Left => "left",
            PoseBucket::Right => "right",
            PoseBucket::Up => "up",
            PoseBucket::Down => "down",
        }
    }
}

impl fmt::Display for PoseBucket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BucketStats {
    pub bucket: PoseBucket,
    pub samples: usize,
    /// How often each atom appeared in a top-k set, length `C`.
    pub histogram: Vec<usize>,
    /// Mean Jaccard over unordered pairs inside the bucket; `None` for a
    /// single-sample bucket.
    pub within_jaccard: Option<f64>,
    /// Mean Jaccard between this bucket's samples and all other buckets'.
    pub cross_jaccard: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationStats {
    pub k: usize,
    pub buckets: Vec<BucketStats>,
    /// Pooled over every within-bucket pair.
    pub within_jaccard: f64,
    /// Pooled over every pair drawn from two different buckets.
    pub cross_jaccard: f64,
}

fn jaccard(a: &BTreeSet<usize>, b: &BTreeSet<usize>) -> f64 {
    let inter = a.intersection(b).count();
    let union = a.len() + b.len() - inter;
    if union == 0 { 1.0 } else { inter as f64 / union as f64 }
}

/// `weights` is `N × C`, one row per sample, with `buckets[i]` its pose class.
/// Only buckets that occur are reported; each needs at least two samples.
pub fn activation_stats(weights: ArrayView2<'_, f64>, buckets: &[PoseBucket], k: usize) -> Result<ActivationStats> {
    if weights.nrows() != buckets.len() {
        return Err(Error::Shape(format!("{} weight rows but {} bucket labels", weights.nrows(), buckets.len())));
    }
    if k == 0 {
        return Err(Error::InvalidArgument("k must be positive".into()));
    }
    let mut members: BTreeMap<PoseBucket, Vec<usize>> = BTreeMap::new();
    for (i, b) in buckets.iter().enumerate() {
        members.entry(*b).or_default().push(i);
    }
    if members.len() < 2 {
        return Err(Error::InvalidArgument(format!("need at least 2 pose buckets, found {}", members.len())));
    }
    if members.values().all(|m| m.len() < 2) {
        return Err(Error::InvalidArgument("every pose bucket has a single sample; no within-bucket pair exists".into()));
    }
    let sets: Vec<BTreeSet<usize>> = weights
        .rows()
        .into_iter()
        .map(|w| top_k_atoms(w, k).map(|v| v.into_iter().collect()))
        .collect::<Result<_>>()?;

    let n = sets.len();
    let mut within = (0.0, 0usize);
    let mut cross = (0.0, 0usize);
    let mut per_bucket: BTreeMap<PoseBucket, ((f64, usize), (f64, usize))> = BTreeMap::new();
    for i in 0..n {
        for j in i + 1..n {
            let jac = jaccard(&sets[i], &sets[j]);
            if buckets[i] == buckets[j] {
                within.0 += jac;
                within.1 += 1;
                let e = per_bucket.entry(buckets[i]).or_default();
                e.0 .0 += jac;
                e.0 .1 += 1;
            } else {
                cross.0 += jac;
                cross.1 += 1;
                for b in [buckets[i], buckets[j]] {
                    let e = per_bucket.entry(b).or_default();
                    e.1 .0 += jac;
                    e.1 .1 += 1;
                }
            }
        }
    }
    let mean = |(sum, count): (f64, usize)| sum / count as f64;
    let bucket_stats = members
        .iter()
        .map(|(&bucket, idx)| {
            let mut histogram = vec![0; weights.ncols()];
            for &i in idx {
                for &a in &sets[i] {
                    histogram[a] += 1;
                }
            }
            let (w, c) = per_bucket[&bucket];
            let within_jaccard = (w.1 > 0).then(|| mean(w));
            BucketStats { bucket, samples: idx.len(), histogram, within_jaccard, cross_jaccard: mean(c) }
        })
        .collect();
    Ok(ActivationStats { k, buckets: bucket_stats, within_jaccard: mean(within), cross_jaccard: mean(cross) })
}

pub const ACTIVATION_HEADER: &str = "bucket,samples,within_jaccard,cross_jaccard,top_atoms";

impl ActivationStats {
    /// One row per bucket then an `all` row with the pooled values. `top_atoms`
    /// lists the bucket's `k` most frequent atoms separated by `;`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "{ACTIVATION_HEADER}")?;
        let mut total = vec![0usize; self.buckets.first().map_or(0, |b| b.histogram.len())];
        for b in &self.buckets {
            for (t, h) in total.iter_mut().zip(&b.histogram) {
                *t += h;
            }
            let within = b.within_jaccard.map_or(String::new(), |v| v.to_string());
            writeln!(w, "{},{},{within},{},{}", b.bucket, b.samples, b.cross_jaccard, frequent(&b.histogram, self.k))?;
        }
        let samples: usize = self.buckets.iter().map(|b| b.samples).sum();
        writeln!(w, "all,{samples},{},{},{}", self.within_jaccard, self.cross_jaccard, frequent(&total, self.k))
    }
}

fn frequent(histogram: &[usize], k: usize) -> String {
    let mut idx: Vec<usize> = (0..histogram.len()).filter(|&i| histogram[i] > 0).collect();
    idx.sort_by(|&a, &b| histogram[b].cmp(&histogram[a]).then(a.cmp(&b)));
    idx.iter().take(k).map(|i| i.to_string()).collect::<Vec<_>>().join(";")
}

pub const POWER_ITERATIONS: usize = 100;
pub const POWER_TOLERANCE: f64 = 1e-9;
/// Each direction is iterated with `cov^(2^SQUARINGS)` (deflated for the
/// second). Plain iteration converges like `(λ3/λ2)^k`, which stalls when
/// those eigenvalues are close.
pub const SQUARINGS: u32 = 6;

/// Top-2 principal directions (`D × 2`, orthonormal columns, larger variance
/// first) of row-wise data, by power iteration with deflation started from
/// the first two coordinate axes.
pub fn principal_axes(data: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let (m, d) = data.dim();
    if m < 3 {
        return Err(Error::InvalidArgument(format!("projection needs at least 3 samples, got {m}")));
    }
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("projection input".into()));
    }
    let centered = &data - &data.mean_axis(Axis(0)).expect("m >= 3");
    let scale = data.iter().map(|v| v * v).sum::<f64>().sqrt();
    let spread = centered.iter().map(|v| v * v).sum::<f64>().sqrt();
    if spread <= 1e-12 * scale.max(f64::MIN_POSITIVE) || spread == 0.0 {
        return Err(Error::InvalidArgument("data has rank 0 after centering".into()));
    }
    let cov = centered.t().dot(&centered);
    let axis = |j: usize| {
        let mut e = Array1::zeros(d);
        e[j] = 1.0;
        e
    };
    let v1 = dominant_direction(&squared_power(&cov), axis(0), None);
    let v2 = if d > 1 {
        // Deflate the first direction so the second iteration sees λ2 on top.
        let lambda1 = v1.dot(&cov.dot(&v1));
        let outer = v1.view().insert_axis(Axis(1)).dot(&v1.view().insert_axis(Axis(0)));
        let deflated = &cov - &(outer * lambda1);
        if frobenius(&deflated) <= 1e-12 * frobenius(&cov) {
            // Rank-1 data: any orthogonal axis carries zero variance.
            orthogonal_fallback(&v1, d)
        } else {
            dominant_direction(&squared_power(&deflated), axis(1), Some(&v1))
        }
    } else {
        Array1::zeros(d)
    };

    // Rotate within the found plane so the columns are ordered eigenvectors.
    let mut basis = Array2::zeros((d, 2));
    basis.column_mut(0).assign(&v1);
    basis.column_mut(1).assign(&v2);
    if d > 1 {
        let small = basis.t().dot(&cov).dot(&basis);
        let (a, b, c) = (small[[0, 0]], small[[0, 1]], small[[1, 1]]);
        let theta = 0.5 * (2.0 * b).atan2(a - c);
        let (sn, cs) = theta.sin_cos();
        let r1 = &v1 * cs + &v2 * sn;
        let r2 = &v2 * cs - &v1 * sn;
        basis.column_mut(0).assign(&r1);
        basis.column_mut(1).assign(&r2);
    }
    // Sign convention: the largest-magnitude entry of each axis is positive.
    for mut col in basis.columns_mut() {
        let pivot = col.iter().enumerate().fold(0, |b, (i, v)| if v.abs() > col[b].abs() { i } else { b });
        if col[pivot] < 0.0 {
            col.mapv_inplace(|v| -v);
        }
    }
    Ok(basis)
}

fn frobenius(a: &Array2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// `a^(2^SQUARINGS)`, rescaled after every squaring.
fn squared_power(a: &Array2<f64>) -> Array2<f64> {
    let mut op = a / frobenius(a);
    for _ in 0..SQUARINGS {
        let sq = op.dot(&op);
        op = &sq / frobenius(&sq);
    }
    op
}

fn orthogonalize(v: &Array1<f64>, against: Option<&Array1<f64>>) -> Array1<f64> {
    match against {
        Some(u) => v - &(u * u.dot(v)),
        None => v.clone(),
    }
}

fn orthogonal_fallback(u: &Array1<f64>, d: usize) -> Array1<f64> {
    (0..d)
        .find_map(|j| {
            let mut e = Array1::zeros(d);
            e[j] = 1.0;
            normalize(orthogonalize(&e, Some(u))).filter(|_| u[j].abs() < 1.0 - 1e-8)
        })
        .expect("some axis is independent of u")
}

/// Power iteration on `op`, kept orthogonal to `against`.
fn dominant_direction(op: &Array2<f64>, start: Array1<f64>, against: Option<&Array1<f64>>) -> Array1<f64> {
    let d = start.len();
    let mut v = normalize(orthogonalize(&start, against)).unwrap_or_else(|| orthogonal_fallback(against.expect("start is nonzero"), d));
    for _ in 0..POWER_ITERATIONS {
        let Some(next) = normalize(orthogonalize(&op.dot(&v), against)) else {
            break;
        };
        let sine = (1.0 - next.dot(&v).powi(2)).max(0.0).sqrt();
        v = next;
        if sine < POWER_TOLERANCE {
            break;
        }
    }
    v
}

fn normalize(v: Array1<f64>) -> Option<Array1<f64>> {
    let n = v.dot(&v).sqrt();
    (n > 0.0 && n.is_finite()).then(|| v / n)
}

/// Centered data projected on its top-2 principal directions, `m × 2`.
pub fn project_2d(data: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let axes = principal_axes(data)?;
    let centered = &data - &data.mean_axis(Axis(0)).expect("checked above");
    Ok(centered.dot(&axes))
}

/// Mean distance between identity centroids divided by the mean distance of
/// points to their own centroid.
pub fn separation_ratio(coords: ArrayView2<'_, f64>, labels: &[u64]) -> Result<f64> {
    if coords.nrows() != labels.len() {
        return Err(Error::Shape(format!("{} points but {} labels", coords.nrows(), labels.len())));
    }
    let mut groups: BTreeMap<u64, Vec<usize>> = BTreeMap::new();
    for (i, l) in labels.iter().enumerate() {
        groups.entry(*l).or_default().push(i);
    }
    if groups.len() < 2 {
        return Err(Error::InvalidArgument("separation needs at least 2 identities".into()));
    }
    let dist = |a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>| (&a - &b).mapv(|v| v * v).sum().sqrt();
    let centroids: Vec<Array1<f64>> = groups
        .values()
        .map(|idx| coords.select(Axis(0), idx).mean_axis(Axis(0)).expect("groups are non-empty"))
        .collect();
    let mut intra = 0.0;
    for (idx, c) in groups.values().zip(&centroids) {
        intra += idx.iter().map(|&i| dist(coords.row(i), c.view())).sum::<f64>();
    }
    intra /= labels.len() as f64;
    let mut inter = 0.0;
    let mut pairs = 0;
    for i in 0..centroids.len() {
        for j in i + 1..centroids.len() {
            inter += dist(centroids[i].view(), centroids[j].view());
            pairs += 1;
        }
    }
    inter /= pairs as f64;
    if intra == 0.0 {
        return Ok(if inter > 0.0 { f64::INFINITY } else { 0.0 });
    }
    Ok(inter / intra)
}

pub const PROJECTION_HEADER: &str = "id,bucket,x,y";

pub fn write_projection_csv<W: Write>(mut w: W, ids: &[u64], buckets: &[PoseBucket], coords: ArrayView2<'_, f64>) -> std::io::Result<()> {
    writeln!(w, "{PROJECTION_HEADER}")?;
    for ((id, b), row) in ids.iter().zip(buckets).zip(coords.rows()) {
        writeln!(w, "{id},{b},{},{}", row[0], row[1])?;
    }
    Ok(())
}

/// Representation without the aligner: the mean over tokens of the tokenizer
/// output, one `D`-row per face.
pub fn tokenizer_mean_reps<'a>(p: &AlignerParams, faces: impl IntoIterator<Item = &'a FaceInput>) -> Result<Array2<f64>> {
    let rows = faces
        .into_iter()
        .map(|f| Ok(tokenize(f.raw.view(), p)?.0.mean_axis(Axis(0)).expect("L >= 1")))
        .collect::<Result<Vec<_>>>()?;
    let mut out = Array2::zeros((rows.len(), p.dim()));
    for (mut dst, r) in out.rows_mut().into_iter().zip(rows) {
        dst.assign(&r);
    }
    Ok(out)
}

/// Default perturbation ranges in degrees.
pub const PERTURBATION_RANGES: [f64; 5] = [0.0, 5.0, 10.0, 15.0, 20.0];

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PerturbationResult {
    pub range: f64,
    pub mean_drift: f64,
    pub retrieval_accuracy: f64,
}

/// Perturb every Euler angle of both views by uniform noise in `[-r, r]` and
/// measure how far representations move.
///
/// One unit noise vector per face is drawn up front and scaled by each
/// range, so the ranges are compared on the same draws. A range and its
/// negation give identical results.
pub fn perturbation_sweep(
    p: &AlignerParams,
    cfg: &AlignerConfig,
    eval: &PairBatch,
    ranges: &[f64],
    seed: u64,
) -> Result<Vec<PerturbationResult>> {
    let faces: Vec<&FaceInput> = eval.first.iter().chain(&eval.second).collect();
    let mut rng = stream(seed, Domain::Perturb, 0);
    let unit: Vec<[f64; 3]> = faces
        .iter()
        .map(|_| [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)])
        .collect();
    let (_, base) = face_reps(p, cfg, faces.iter().copied())?;
    let n = eval.len();

    ranges
        .iter()
        .map(|&range| {
            if !range.is_finite() {
                return Err(Error::InvalidArgument(format!("perturbation range must be finite, got {range}")));
            }
            let r = range.abs();
            let perturbed = faces
                .iter()
                .zip(&unit)
                .map(|(f, u)| {
                    Ok(FaceInput { raw: f.raw.clone(), euler: f.euler.offset(r * u[0], r * u[1], r * u[2])? })
                })
                .collect::<Result<Vec<_>>>()?;
            let (_, reps) = face_reps(p, cfg, &perturbed)?;
            let drift = base
                .rows()
                .into_iter()
                .zip(reps.rows())
                .map(|(a, b)| if a == b { 0.0 } else { 1.0 - cosine(a, b) })
                .sum::<f64>()
                / faces.len() as f64;
            let accuracy = retrieval_accuracy(reps.slice(s![..n, ..]), reps.slice(s![n.., ..]))?;
            Ok(PerturbationResult { range, mean_drift: drift, retrieval_accuracy: accuracy })
        })
        .collect()
}

fn cosine(a: ArrayView1<'_, f64>, b: ArrayView1<'_, f64>) -> f64 {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.dot(&b) / (na * nb)
}

pub const PERTURBATION_HEADER: &str = "range,mean_drift,retrieval_accuracy";

pub fn write_perturbation_csv<W: Write>(mut w: W, rows: &[PerturbationResult]) -> std::io::Result<()> {
    writeln!(w, "{PERTURBATION_HEADER}")?;
    for r in rows {
        writeln!(w, "{},{},{}", r.range, r.mean_drift, r.retrieval_accuracy)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationAxes {
    pub pooling: Vec<Pooling>,
    pub num_atoms: Vec<usize>,
    pub euler: Vec<bool>,
    /// Training seeds shared by every config.
    pub seeds: Vec<u64>,
    /// Range in degrees used for the drift column.
    pub perturb_range: f64,
}

impl Default for AblationAxes {
    fn default() -> Self {
        Self { pooling: Pooling::ALL.to_vec(), num_atoms: vec![256], euler: vec![true], seeds: vec![0, 1, 2], perturb_range: 15.0 }
    }
}

impl AblationAxes {
    pub fn validate(&self) -> Result<()> {
        if self.pooling.is_empty() || self.num_atoms.is_empty() || self.euler.is_empty() || self.seeds.is_empty() {
            return Err(Error::InvalidArgument("every ablation axis and the seed list must be non-empty".into()));
        }
        Ok(())
    }

    pub fn configs(&self) -> usize {
        self.pooling.len() * self.num_atoms.len() * self.euler.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AblationResult {
    pub pooling: Pooling,
    pub num_atoms: usize,
    pub euler: bool,
    pub perturb_range: f64,
    pub seeds: usize,
    /// Medians over seeds.
    pub final_loss: f64,
    pub retrieval_accuracy: f64,
    pub mean_drift: f64,
    /// Per-seed retrieval accuracy in seed order.
    pub per_seed_retrieval: Vec<f64>,
}

pub const SMOOTHING_WINDOW: usize = 50;

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.is_empty() {
        f64::NAN
    } else if v.len() % 2 == 1 {
        v[m]
    } else {
        (v[m - 1] + v[m]) / 2.0
    }
}

/// Train one model per `(pooling, C, euler)` config and seed. Rows are sorted
/// by config. `progress` is called after each finished run.
pub fn ablation_grid(
    base: &TrainConfig,
    world: &WorldConfig,
    axes: &AblationAxes,
    mut progress: impl FnMut(&TrainConfig),
) -> Result<Vec<AblationResult>> {
    axes.validate()?;
    let mut rows = Vec::with_capacity(axes.configs());
    for &pooling in &axes.pooling {
        for &num_atoms in &axes.num_atoms {
            for &euler in &axes.euler {
                let mut losses = Vec::new();
                let mut accs = Vec::new();
                let mut drifts = Vec::new();
                for &seed in &axes.seeds {
                    let cfg = TrainConfig { pooling, atoms: num_atoms, euler_enabled: euler, seed, ..base.clone() };
                    let (params, metrics) = train(&cfg, world)?;
                    let world_gen = crate::trainer::build_world(&cfg, world)?;
                    let eval = world_gen.eval_pairs(cfg.eval_identities.max(2), 0)?;
                    let sweep = perturbation_sweep(&params, &cfg.aligner(), &eval, &[axes.perturb_range], seed)?;
                    losses.push(metrics.final_smoothed_loss(SMOOTHING_WINDOW).unwrap_or(f64::NAN));
                    accs.push(match metrics.final_retrieval {
                        Some(a) => a,
                        None => crate::trainer::retrieval_eval(&params, &cfg.aligner(), &eval)?,
                    });
                    drifts.push(sweep[0].mean_drift);
                    progress(&cfg);
                }
                rows.push(AblationResult {
                    pooling,
                    num_atoms,
                    euler,
                    perturb_range: axes.perturb_range,
                    seeds: axes.seeds.len(),
                    final_loss: median(&losses),
                    retrieval_accuracy: median(&accs),
                    mean_drift: median(&drifts),
                    per_seed_retrieval: accs,
                });
            }
        }
    }
    rows.sort_by(|a, b| {
        (a.pooling.name(), a.num_atoms, a.euler).cmp(&(b.pooling.name(), b.num_atoms, b.euler))
    });
    Ok(rows)
}

pub const ABLATION_HEADER: &str = "pooling,num_atoms,euler,perturb_range,seeds,final_loss,retrieval_accuracy,mean_drift";

pub fn write_ablation_csv<W: Write>(mut w: W, rows: &[AblationResult]) -> std::io::Result<()> {
    writeln!(w, "{ABLATION_HEADER}")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{},{},{},{},{},{}",
            r.pooling, r.num_atoms, r.euler, r.perturb_range, r.seeds, r.final_loss, r.retrieval_accuracy, r.mean_drift
        )?;
    }
    Ok(())
}
