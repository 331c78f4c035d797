//! Evaluation protocol for swap checkpoints: identity similarity, source
//! retrieval, pose and expression error, and a Fréchet distance over the
//! frozen encoder's 17-dimensional feature space. Every run also scores two
//! calibration rows — ground-truth outputs as the upper bound and the raw
//! targets as the lower bound — so the model's numbers are interpretable
//! without any external baseline.

pub mod plot;

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::synthfaces::dataset::load_image_png;
use crate::synthfaces::factors::{ATTRIBUTE_DEFS, AT_MOUTH_CURVATURE, AT_PITCH, AT_YAW};
use crate::synthfaces::oracle::OracleEncoders;
use crate::tensor::Tensor;
use crate::trainer::{swap, CheckpointBundle};
use crate::tripletforge::load_triplet_manifest;
use crate::util::derive_seed;
use crate::{Result, SwapLabError};

/// Identity-embedding dimensions plus attribute dimensions: the feature
/// space used for Fréchet moments.
pub const FEATURE_DIM: usize = 8 + 9;

/// Histogram bins for the similarity plot.
const SIMILARITY_BINS: usize = 40;

// ---- embedding-level primitives ----

/// Cosine similarity with a zero-norm guard: an all-zero embedding counts as
/// maximally dissimilar (0) instead of poisoning the mean with NaN.
fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        dot / (na * nb)
    }
}

/// Mean pairwise cosine similarity between two equally long embedding lists.
pub fn mean_cosine(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(SwapLabError::Shape(format!(
            "paired embedding lists must be non-empty and equally long, got {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(a.iter().zip(b).map(|(x, y)| cosine(x, y)).sum::<f64>() / a.len() as f64)
}

/// Mean identity-embedding cosine between paired swapped and source images.
pub fn id_similarity(
    swapped: &[Tensor],
    sources: &[Tensor],
    encoders: &OracleEncoders,
) -> Result<f64> {
    let sw = embed_all(swapped, encoders);
    let src = embed_all(sources, encoders);
    mean_cosine(&sw, &src)
}

fn embed_all(images: &[Tensor], encoders: &OracleEncoders) -> Vec<Vec<f64>> {
    images.iter().map(|img| encoders.identity_embedding(img).to_vec()).collect()
}

// ---- retrieval ----

/// Paired identity embeddings for retrieval: `sources[i]` is the embedding of
/// swapped image `i`'s true source, so the index doubles as the sample id.
#[derive(Debug, Clone, PartialEq)]
pub struct Gallery {
    sources: Vec<Vec<f64>>,
    swapped: Vec<Vec<f64>>,
}

impl Gallery {
    /// Embeds both image lists with the frozen identity encoder.
    pub fn build(
        swapped: &[Tensor],
        sources: &[Tensor],
        encoders: &OracleEncoders,
    ) -> Result<Self> {
        Gallery::from_embeddings(embed_all(swapped, encoders), embed_all(sources, encoders))
    }

    /// Builds from precomputed embeddings. Lists must be equally long,
    /// non-empty, and dimensionally uniform.
    pub fn from_embeddings(swapped: Vec<Vec<f64>>, sources: Vec<Vec<f64>>) -> Result<Self> {
        if swapped.len() != sources.len() || sources.is_empty() {
            return Err(SwapLabError::Shape(format!(
                "gallery needs equally many swapped and source embeddings (≥ 1), got {} vs {}",
                swapped.len(),
                sources.len()
            )));
        }
        let dim = sources[0].len();
        if dim == 0 || swapped.iter().chain(&sources).any(|v| v.len() != dim) {
            return Err(SwapLabError::Shape("gallery embeddings must share one non-zero dimension".into()));
        }
        Ok(Gallery { sources, swapped })
    }

    pub fn len(&self) -> usize {
        self.sources.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sources.is_empty()
    }
}

/// Percentage of swapped images whose true source ranks inside the top `k`
/// gallery entries by cosine similarity. Equal similarities rank by sample
/// id, lowest first, so results never depend on iteration order.
pub fn id_retrieval(gallery: &Gallery, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(SwapLabError::Shape("retrieval needs k ≥ 1".into()));
    }
    let mut hits = 0usize;
    for (i, sw) in gallery.swapped.iter().enumerate() {
        let true_sim = cosine(sw, &gallery.sources[i]);
        let mut ahead = 0usize;
        for (j, src) in gallery.sources.iter().enumerate() {
            if j == i {
                continue;
            }
            let s = cosine(sw, src);
            if s > true_sim || (s == true_sim && j < i) {
                ahead += 1;
            }
        }
        if ahead < k {
            hits += 1;
        }
    }
    Ok(100.0 * hits as f64 / gallery.len() as f64)
}

// ---- pose / expression ----

fn pose_expr_from_attrs(swapped: &[[f64; 9]], targets: &[[f64; 9]]) -> (f64, f64) {
    let n = swapped.len() as f64;
    let mut pose = 0.0;
    let mut expr = 0.0;
    for (s, t) in swapped.iter().zip(targets) {
        let dy = s[AT_YAW] - t[AT_YAW];
        let dp = s[AT_PITCH] - t[AT_PITCH];
        pose += (dy * dy + dp * dp).sqrt();
        expr += (s[AT_MOUTH_CURVATURE] - t[AT_MOUTH_CURVATURE]).abs();
    }
    (pose / n, expr / n)
}

/// Mean L2 distance between regressed (yaw, pitch) vectors and mean absolute
/// difference of regressed mouth curvature, over paired image lists.
pub fn pose_expression_error(
    swapped: &[Tensor],
    targets: &[Tensor],
    encoders: &OracleEncoders,
) -> Result<(f64, f64)> {
    if swapped.len() != targets.len() || swapped.is_empty() {
        return Err(SwapLabError::Shape(format!(
            "paired image lists must be non-empty and equally long, got {} vs {}",
            swapped.len(),
            targets.len()
        )));
    }
    let sw: Vec<[f64; 9]> = swapped.iter().map(|i| encoders.attribute_estimate(i)).collect();
    let tg: Vec<[f64; 9]> = targets.iter().map(|i| encoders.attribute_estimate(i)).collect();
    Ok(pose_expr_from_attrs(&sw, &tg))
}

// ---- Fréchet feature distance ----

fn feature_moments(set: &[Vec<f64>]) -> (nalgebra::DVector<f64>, nalgebra::DMatrix<f64>) {
    let n = set.len();
    let d = set[0].len();
    let mut mu = nalgebra::DVector::zeros(d);
    for v in set {
        for j in 0..d {
            mu[j] += v[j];
        }
    }
    mu /= n as f64;
    let mut cov = nalgebra::DMatrix::zeros(d, d);
    for v in set {
        let c = nalgebra::DVector::from_iterator(d, v.iter().copied()) - &mu;
        cov += &c * c.transpose();
    }
    cov /= (n - 1) as f64;
    (mu, cov)
}

/// Symmetric PSD square root via eigendecomposition; negative eigenvalues
/// (rounding noise on a rank-deficient covariance) clamp to zero.
fn sym_sqrt(m: &nalgebra::DMatrix<f64>) -> nalgebra::DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = nalgebra::SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * nalgebra::DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Fréchet distance between Gaussians fitted to two feature clouds:
/// `‖μa−μb‖² + Tr(Σa + Σb − 2(ΣaΣb)^{1/2})`, with the cross term computed as
/// `Tr((Σb^{1/2} Σa Σb^{1/2})^{1/2})` so every square root is of a symmetric
/// matrix. Covariances use the unbiased 1/(n−1) normalization. Each set
/// needs at least `dim + 1` samples.
pub fn frechet_from_features(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(SwapLabError::Shape("feature sets must be non-empty".into()));
    }
    let dim = a[0].len();
    if dim == 0 || a.iter().chain(b).any(|v| v.len() != dim) {
        return Err(SwapLabError::Shape("feature vectors must share one non-zero dimension".into()));
    }
    if a.len() <= dim || b.len() <= dim {
        return Err(SwapLabError::Shape(format!(
            "{dim}-dimensional moments need at least {} samples per set, got {} and {}",
            dim + 1,
            a.len(),
            b.len()
        )));
    }
    let (mu_a, cov_a) = feature_moments(a);
    let (mu_b, cov_b) = feature_moments(b);
    let sb = sym_sqrt(&cov_b);
    let cross = sym_sqrt(&(&sb * &cov_a * &sb));
    let d = (mu_a - mu_b).norm_squared() + cov_a.trace() + cov_b.trace() - 2.0 * cross.trace();
    // Exact-zero cases land a hair below zero through rounding; the distance
    // itself is nonnegative by construction.
    Ok(d.max(0.0))
}

/// The frozen encoders' view of one image: centered identity embedding
/// concatenated with attribute estimates, [`FEATURE_DIM`] values.
pub fn oracle_features(encoders: &OracleEncoders, image: &Tensor) -> Vec<f64> {
    let mut f = Vec::with_capacity(FEATURE_DIM);
    f.extend_from_slice(&encoders.identity_embedding(image));
    f.extend_from_slice(&encoders.attribute_estimate(image));
    f
}

/// [`frechet_from_features`] over [`oracle_features`] of two image sets.
pub fn frechet_feature_distance(
    set_a: &[Tensor],
    set_b: &[Tensor],
    encoders: &OracleEncoders,
) -> Result<f64> {
    let fa: Vec<Vec<f64>> = set_a.iter().map(|i| oracle_features(encoders, i)).collect();
    let fb: Vec<Vec<f64>> = set_b.iter().map(|i| oracle_features(encoders, i)).collect();
    frechet_from_features(&fa, &fb)
}

// ---- reports ----

/// One evaluation row. `label` names what stood in for the model output:
/// `"model"` for real swaps, `"ground-truth"` and `"raw-target"` for the
/// calibration bounds. `config` carries run provenance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub label: String,
    pub id_similarity: f64,
    pub retrieval_top1: f64,
    pub retrieval_top5: f64,
    pub pose_l2: f64,
    pub expression_l2: f64,
    pub frechet: f64,
    pub n: usize,
    pub config: String,
}

impl MetricReport {
    /// Structural sanity: percentages ordered and bounded, distance
    /// nonnegative, similarity a real cosine.
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=self.retrieval_top5).contains(&self.retrieval_top1)
            && self.retrieval_top5 <= 100.0
            && self.frechet >= 0.0
            && self.id_similarity.abs() <= 1.0 + 1e-9
            && self.pose_l2 >= 0.0
            && self.expression_l2 >= 0.0
            && self.n > 0;
        if ok {
            Ok(())
        } else {
            Err(SwapLabError::Shape(format!("metric report fails its invariants: {self:?}")))
        }
    }
}

/// A full evaluation: the model row bracketed by its calibration rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOutcome {
    /// Ground-truth images scored as if the model had produced them.
    pub upper: MetricReport,
    /// The checkpoint's actual swaps.
    pub model: MetricReport,
    /// Raw target images scored as if the model had produced them.
    pub lower: MetricReport,
}

impl EvalOutcome {
    pub fn rows(&self) -> [&MetricReport; 3] {
        [&self.upper, &self.model, &self.lower]
    }

    /// Aligned plain-text table, one metric column per protocol quantity.
    pub fn table(&self) -> String {
        let mut out = String::new();
        out.push_str(&format!(
            "{:<14} {:>10} {:>8} {:>8} {:>8} {:>8} {:>9} {:>6}\n",
            "row", "id-cosine", "top-1%", "top-5%", "pose", "expr", "frechet", "n"
        ));
        for r in self.rows() {
            out.push_str(&format!(
                "{:<14} {:>10.4} {:>8.2} {:>8.2} {:>8.4} {:>8.4} {:>9.4} {:>6}\n",
                r.label,
                r.id_similarity,
                r.retrieval_top1,
                r.retrieval_top5,
                r.pose_l2,
                r.expression_l2,
                r.frechet,
                r.n
            ));
        }
        out.push_str(&format!("# {}\n", self.model.config));
        out
    }
}

// ---- full protocol ----

struct ImageStats {
    ident: Vec<f64>,
    attrs: [f64; 9],
}

fn stats_of(images: &[Tensor], encoders: &OracleEncoders) -> Vec<ImageStats> {
    images
        .iter()
        .map(|img| ImageStats {
            ident: encoders.identity_embedding(img).to_vec(),
            attrs: encoders.attribute_estimate(img),
        })
        .collect()
}

fn features_of(stats: &[ImageStats]) -> Vec<Vec<f64>> {
    stats
        .iter()
        .map(|s| {
            let mut f = Vec::with_capacity(FEATURE_DIM);
            f.extend_from_slice(&s.ident);
            f.extend_from_slice(&s.attrs);
            f
        })
        .collect()
}

fn row_from_stats(
    label: &str,
    candidate: &[ImageStats],
    sources: &[ImageStats],
    targets: &[ImageStats],
    reference: &[ImageStats],
    config: &str,
) -> Result<MetricReport> {
    let cand_ident: Vec<Vec<f64>> = candidate.iter().map(|s| s.ident.clone()).collect();
    let src_ident: Vec<Vec<f64>> = sources.iter().map(|s| s.ident.clone()).collect();
    let similarity = mean_cosine(&cand_ident, &src_ident)?;
    let gallery = Gallery::from_embeddings(cand_ident, src_ident)?;
    let top1 = id_retrieval(&gallery, 1)?;
    let top5 = id_retrieval(&gallery, 5)?;
    let cand_attrs: Vec<[f64; 9]> = candidate.iter().map(|s| s.attrs).collect();
    let tgt_attrs: Vec<[f64; 9]> = targets.iter().map(|s| s.attrs).collect();
    let (pose, expr) = pose_expr_from_attrs(&cand_attrs, &tgt_attrs);
    let frechet = frechet_from_features(&features_of(candidate), &features_of(reference))?;
    let report = MetricReport {
        label: label.to_string(),
        id_similarity: similarity,
        retrieval_top1: top1,
        retrieval_top5: top5,
        pose_l2: pose,
        expression_l2: expr,
        frechet,
        n: candidate.len(),
        config: config.to_string(),
    };
    report.validate()?;
    Ok(report)
}

fn per_pair_cosines(candidate: &[ImageStats], sources: &[ImageStats]) -> Vec<f64> {
    candidate.iter().zip(sources).map(|(c, s)| cosine(&c.ident, &s.ident)).collect()
}

fn per_factor_abs_error(candidate: &[ImageStats], targets: &[ImageStats]) -> Vec<f64> {
    let mut err = vec![0.0; 9];
    for (c, t) in candidate.iter().zip(targets) {
        for f in 0..9 {
            err[f] += (c.attrs[f] - t.attrs[f]).abs();
        }
    }
    for e in &mut err {
        *e /= candidate.len() as f64;
    }
    err
}

/// Runs the whole protocol on a triplet manifest: swaps every source onto its
/// target with `k_steps` denoising steps, scores the swaps against sources
/// (identity, retrieval), targets (pose, expression) and ground truths
/// (Fréchet), and writes `report.json`, `report.txt`, `similarity_hist.png`
/// and `attribute_error.png` under `out_dir`. The two calibration rows run
/// the same scoring with ground-truth and raw-target images standing in for
/// the swaps. Per-pair swap noise derives from the manifest seed, so a rerun
/// reproduces the report byte for byte.
pub fn evaluate_run(
    bundle: &CheckpointBundle,
    encoders: &OracleEncoders,
    manifest_dir: &Path,
    k_steps: usize,
    out_dir: &Path,
) -> Result<EvalOutcome> {
    let manifest = load_triplet_manifest(manifest_dir)?;
    let n = manifest.records.len();
    if n <= FEATURE_DIM {
        return Err(SwapLabError::Shape(format!(
            "evaluation needs more than {FEATURE_DIM} pairs for feature moments, got {n}"
        )));
    }

    let mut swapped = Vec::with_capacity(n);
    let mut sources = Vec::with_capacity(n);
    let mut targets = Vec::with_capacity(n);
    let mut truths = Vec::with_capacity(n);
    for (i, record) in manifest.records.iter().enumerate() {
        let source = load_image_png(&manifest_dir.join(&record.source.image))?;
        let target = load_image_png(&manifest_dir.join(&record.pseudo_target.image))?;
        let truth = load_image_png(&manifest_dir.join(&record.ground_truth.image))?;
        let noise_seed = derive_seed(manifest.seed, "eval-noise", i as u64);
        swapped.push(swap(bundle, encoders, &source, &target, k_steps, noise_seed)?);
        sources.push(source);
        targets.push(target);
        truths.push(truth);
    }

    let sw = stats_of(&swapped, encoders);
    let src = stats_of(&sources, encoders);
    let tgt = stats_of(&targets, encoders);
    let gt = stats_of(&truths, encoders);

    let config = format!(
        "ckpt {} step {} | k={} | manifest seed {} proxy {} | n={}",
        &bundle.params_hash()[..12],
        bundle.step,
        k_steps,
        manifest.seed,
        manifest.proxy.name(),
        n
    );
    let outcome = EvalOutcome {
        upper: row_from_stats("ground-truth", &gt, &src, &tgt, &gt, &config)?,
        model: row_from_stats("model", &sw, &src, &tgt, &gt, &config)?,
        lower: row_from_stats("raw-target", &tgt, &src, &tgt, &gt, &config)?,
    };

    std::fs::create_dir_all(out_dir)
        .map_err(|e| SwapLabError::io(out_dir.display().to_string(), e))?;
    let json_path = out_dir.join("report.json");
    std::fs::write(&json_path, serde_json::to_string_pretty(&outcome)?)
        .map_err(|e| SwapLabError::io(json_path.display().to_string(), e))?;
    let txt_path = out_dir.join("report.txt");
    std::fs::write(&txt_path, outcome.table())
        .map_err(|e| SwapLabError::io(txt_path.display().to_string(), e))?;

    let sim_model = per_pair_cosines(&sw, &src);
    let sim_upper = per_pair_cosines(&gt, &src);
    let sim_lower = per_pair_cosines(&tgt, &src);
    plot::histogram_png(
        &out_dir.join("similarity_hist.png"),
        "identity cosine vs source",
        &[
            plot::Series { name: "model", values: &sim_model, color: [60, 100, 220] },
            plot::Series { name: "truth", values: &sim_upper, color: [220, 120, 40] },
            plot::Series { name: "target", values: &sim_lower, color: [120, 120, 120] },
        ],
        -1.0,
        1.0,
        SIMILARITY_BINS,
    )?;

    let err_model = per_factor_abs_error(&sw, &tgt);
    let err_upper = per_factor_abs_error(&gt, &tgt);
    let labels: Vec<&str> = ATTRIBUTE_DEFS.iter().map(|d| d.name).collect();
    plot::grouped_bars_png(
        &out_dir.join("attribute_error.png"),
        "mean abs attribute error vs target",
        &labels,
        &[
            plot::Series { name: "model", values: &err_model, color: [60, 100, 220] },
            plot::Series { name: "truth", values: &err_upper, color: [220, 120, 40] },
        ],
    )?;

    Ok(outcome)
}
