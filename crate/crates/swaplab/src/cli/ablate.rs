//! Comparison suites: train a family of model variants under identical data
//! and budget, score each on one shared held-out evaluation manifest, and
//! emit a side-by-side table. A variant that fails is reported in its row and
//! the suite keeps going, so one bad configuration never wastes the rest of
//! an overnight run.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::evalsuite::{evaluate_run, MetricReport};
use crate::synthfaces::oracle::OracleEncoders;
use crate::swapnets::ModelConfig;
use crate::trainer::{train_loop, CheckpointBundle, TrainConfig, TrainOptions};
use crate::tripletforge::{build_manifest, DatasetManifest, ProxySwapper};
use crate::util::derive_seed;
use crate::{Result, SwapLabError};

/// Which family of variants a run compares.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SuiteKind {
    /// Full model against each branch removal and each loss removal.
    Architecture,
    /// Full model against loss removals only.
    Losses,
    /// One proxy swapper per variant, identical everything else.
    Proxy,
    /// One trained model evaluated with a 1-step and a 4-step ladder.
    Steps,
}

impl SuiteKind {
    pub fn by_name(name: &str) -> Result<Self> {
        match name {
            "architecture" => Ok(SuiteKind::Architecture),
            "losses" => Ok(SuiteKind::Losses),
            "proxy" => Ok(SuiteKind::Proxy),
            "steps" => Ok(SuiteKind::Steps),
            other => Err(SwapLabError::Shape(format!(
                "unknown suite '{other}' (expected architecture, losses, proxy or steps)"
            ))),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            SuiteKind::Architecture => "architecture",
            SuiteKind::Losses => "losses",
            SuiteKind::Proxy => "proxy",
            SuiteKind::Steps => "steps",
        }
    }

    /// The variant list, in report order.
    pub fn variants(self) -> Vec<Variant> {
        let plain = |name: &str| Variant {
            name: name.to_string(),
            proxy: ProxySwapper::oracle(),
            k_override: None,
            mutate: None,
        };
        match self {
            SuiteKind::Architecture => vec![
                plain("full"),
                Variant { mutate: Some(|c| c.no_facenet = true), ..plain("no_facenet") },
                Variant { mutate: Some(|c| c.no_id_adapter = true), ..plain("no_id_adapter") },
                Variant { mutate: Some(|c| c.no_id_loss = true), ..plain("no_id_loss") },
                Variant { mutate: Some(|c| c.no_rec_loss = true), ..plain("no_rec_loss") },
            ],
            SuiteKind::Losses => vec![
                plain("full"),
                Variant { mutate: Some(|c| c.no_id_loss = true), ..plain("no_id_loss") },
                Variant { mutate: Some(|c| c.no_rec_loss = true), ..plain("no_rec_loss") },
            ],
            SuiteKind::Proxy => vec![
                Variant { proxy: ProxySwapper::oracle(), ..plain("oracle") },
                Variant { proxy: ProxySwapper::attr_noisy(), ..plain("attr_noisy") },
                Variant { proxy: ProxySwapper::id_weak(), ..plain("id_weak") },
            ],
            SuiteKind::Steps => vec![
                Variant { k_override: Some(1), ..plain("k=1") },
                Variant { k_override: Some(4), ..plain("k=4") },
            ],
        }
    }
}

/// One row's recipe: a name, the proxy its training data is built with, an
/// optional evaluation-ladder override, and a config mutation.
pub struct Variant {
    pub name: String,
    pub proxy: ProxySwapper,
    pub k_override: Option<usize>,
    pub mutate: Option<fn(&mut TrainConfig)>,
}

/// Everything a suite run needs besides the suite itself. Data seeds derive
/// from `data_seed`; every proxy's training manifest shares the same
/// identity/donor pairs, so proxies differ only in their pseudo targets.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblateSpec {
    pub suite: SuiteKind,
    /// Triplets in each training manifest.
    pub train_pairs: usize,
    /// Held-out pairs in the shared evaluation manifest.
    pub eval_pairs: usize,
    pub train_steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub level_widths: [usize; 2],
    /// Evaluation ladder length for variants that do not override it.
    pub k_eval: usize,
    /// Training seeds; each variant runs once per seed.
    pub seeds: Vec<u64>,
    pub data_seed: u64,
}

impl Default for AblateSpec {
    fn default() -> Self {
        AblateSpec {
            suite: SuiteKind::Architecture,
            train_pairs: 256,
            eval_pairs: 50,
            train_steps: 800,
            batch_size: 8,
            learning_rate: 2e-4,
            level_widths: [32, 48],
            k_eval: 1,
            seeds: vec![0],
            data_seed: 0,
        }
    }
}

/// One variant × seed result: either its evaluation row or the error that
/// stopped it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub seed: u64,
    pub report: Option<MetricReport>,
    pub error: Option<String>,
}

/// A finished suite: rows in variant-major order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationOutcome {
    pub suite: String,
    pub rows: Vec<AblationRow>,
}

impl AblationOutcome {
    pub fn failed_rows(&self) -> usize {
        self.rows.iter().filter(|r| r.error.is_some()).count()
    }

    /// Side-by-side text table, one line per variant × seed.
    pub fn table(&self) -> String {
        let mut out = format!("suite: {}\n", self.suite);
        out.push_str(&format!(
            "{:<14} {:>5} {:>10} {:>8} {:>8} {:>8} {:>8} {:>9}\n",
            "variant", "seed", "id-cosine", "top-1%", "top-5%", "pose", "expr", "frechet"
        ));
        for row in &self.rows {
            match (&row.report, &row.error) {
                (Some(r), _) => out.push_str(&format!(
                    "{:<14} {:>5} {:>10.4} {:>8.2} {:>8.2} {:>8.4} {:>8.4} {:>9.4}\n",
                    row.variant,
                    row.seed,
                    r.id_similarity,
                    r.retrieval_top1,
                    r.retrieval_top5,
                    r.pose_l2,
                    r.expression_l2,
                    r.frechet
                )),
                (None, Some(e)) => {
                    out.push_str(&format!("{:<14} {:>5} FAILED: {e}\n", row.variant, row.seed))
                }
                (None, None) => unreachable!("row carries neither report nor error"),
            }
        }
        out
    }
}

fn slug(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() { c } else { '-' }).collect()
}

struct SuiteData {
    eval_dir: PathBuf,
    train_dirs: HashMap<String, (PathBuf, DatasetManifest)>,
}

impl SuiteData {
    fn train_manifest(
        &mut self,
        work_dir: &Path,
        spec: &AblateSpec,
        proxy: &ProxySwapper,
    ) -> Result<&(PathBuf, DatasetManifest)> {
        let key = proxy.name().to_string();
        if !self.train_dirs.contains_key(&key) {
            let dir = work_dir.join(format!("train_{key}"));
            let manifest = build_manifest(
                &dir,
                spec.train_pairs,
                proxy,
                None,
                derive_seed(spec.data_seed, "ablate-train", 0),
            )?;
            self.train_dirs.insert(key.clone(), (dir, manifest));
        }
        Ok(&self.train_dirs[&key])
    }
}

/// Runs every variant of `spec.suite` for every seed, writing per-run
/// artifacts under `work_dir` (`train_*` and `runs/*` for training,
/// `eval_data` and `eval/*` for scoring) plus `ablation.json` and
/// `ablation.txt` at the top. Variant failures land in their rows; the
/// function itself only fails on setup problems (bad spec, unwritable
/// directories, evaluation data).
pub fn run_ablation(
    oracles: &OracleEncoders,
    spec: &AblateSpec,
    work_dir: &Path,
) -> Result<AblationOutcome> {
    if spec.seeds.is_empty() {
        return Err(SwapLabError::Shape("ablation needs at least one seed".into()));
    }
    std::fs::create_dir_all(work_dir)
        .map_err(|e| SwapLabError::io(work_dir.display().to_string(), e))?;

    let eval_dir = work_dir.join("eval_data");
    build_manifest(
        &eval_dir,
        spec.eval_pairs,
        &ProxySwapper::oracle(),
        None,
        derive_seed(spec.data_seed, "ablate-eval", 0),
    )?;
    let mut data = SuiteData { eval_dir, train_dirs: HashMap::new() };

    // Identical configs share one training run (the steps suite evaluates a
    // single model twice), keyed by the full config serialization.
    let mut trained: HashMap<String, CheckpointBundle> = HashMap::new();
    let mut rows = Vec::new();
    for variant in spec.suite.variants() {
        for &seed in &spec.seeds {
            let row = run_variant(oracles, spec, work_dir, &mut data, &mut trained, &variant, seed);
            rows.push(match row {
                Ok(report) => {
                    AblationRow { variant: variant.name.clone(), seed, report: Some(report), error: None }
                }
                Err(e) => AblationRow {
                    variant: variant.name.clone(),
                    seed,
                    report: None,
                    error: Some(e.to_string()),
                },
            });
        }
    }

    let outcome = AblationOutcome { suite: spec.suite.name().to_string(), rows };
    let json_path = work_dir.join("ablation.json");
    std::fs::write(&json_path, serde_json::to_string_pretty(&outcome)?)
        .map_err(|e| SwapLabError::io(json_path.display().to_string(), e))?;
    let txt_path = work_dir.join("ablation.txt");
    std::fs::write(&txt_path, outcome.table())
        .map_err(|e| SwapLabError::io(txt_path.display().to_string(), e))?;
    Ok(outcome)
}

fn run_variant(
    oracles: &OracleEncoders,
    spec: &AblateSpec,
    work_dir: &Path,
    data: &mut SuiteData,
    trained: &mut HashMap<String, CheckpointBundle>,
    variant: &Variant,
    seed: u64,
) -> Result<MetricReport> {
    let mut config = TrainConfig {
        batch_size: spec.batch_size,
        learning_rate: spec.learning_rate,
        total_steps: spec.train_steps,
        proxy: Some(variant.proxy.name().to_string()),
        seed,
        model: ModelConfig { level_widths: spec.level_widths, ..ModelConfig::default() },
        ..TrainConfig::default()
    };
    if let Some(mutate) = variant.mutate {
        mutate(&mut config);
    }

    let cache_key = serde_json::to_string(&config)?;
    if !trained.contains_key(&cache_key) {
        let (train_dir, manifest) = data.train_manifest(work_dir, spec, &variant.proxy)?;
        let run_dir = work_dir.join("runs").join(format!("{}_s{seed}", slug(&variant.name)));
        std::fs::create_dir_all(&run_dir)
            .map_err(|e| SwapLabError::io(run_dir.display().to_string(), e))?;
        let opts = TrainOptions {
            log_path: Some(run_dir.join("train_log.jsonl")),
            log_every: (spec.train_steps / 10).max(1),
            checkpoint_path: Some(run_dir.join("checkpoint.swlb")),
            checkpoint_every: 0,
            resume: None,
        };
        let bundle = train_loop(train_dir, manifest, &config, oracles, &opts)?;
        trained.insert(cache_key.clone(), bundle);
    }
    let bundle = &trained[&cache_key];

    let k = variant.k_override.unwrap_or(spec.k_eval);
    let eval_out = work_dir.join("eval").join(format!("{}_s{seed}", slug(&variant.name)));
    let outcome = evaluate_run(bundle, oracles, &data.eval_dir, k, &eval_out)?;
    Ok(outcome.model)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evalsuite::FEATURE_DIM;
    use crate::synthfaces::oracle::untrained_encoders_for_tests;

    fn tiny_spec(suite: SuiteKind) -> AblateSpec {
        AblateSpec {
            suite,
            train_pairs: 4,
            eval_pairs: FEATURE_DIM + 1,
            train_steps: 1,
            batch_size: 2,
            learning_rate: 1e-3,
            level_widths: [16, 24],
            k_eval: 1,
            seeds: vec![11],
            data_seed: 5,
        }
    }

    #[test]
    fn suites_list_their_documented_variants() {
        let names = |s: SuiteKind| -> Vec<String> {
            s.variants().into_iter().map(|v| v.name).collect()
        };
        assert_eq!(
            names(SuiteKind::Architecture),
            ["full", "no_facenet", "no_id_adapter", "no_id_loss", "no_rec_loss"]
        );
        assert_eq!(names(SuiteKind::Losses), ["full", "no_id_loss", "no_rec_loss"]);
        assert_eq!(names(SuiteKind::Proxy), ["oracle", "attr_noisy", "id_weak"]);
        assert_eq!(names(SuiteKind::Steps), ["k=1", "k=4"]);
        for kind in [SuiteKind::Architecture, SuiteKind::Losses, SuiteKind::Proxy, SuiteKind::Steps]
        {
            assert_eq!(SuiteKind::by_name(kind.name()).unwrap(), kind);
        }
        assert!(SuiteKind::by_name("everything").is_err());
    }

    // The 16-head-dim default does not divide the tiny widths; the suite must
    // use models the trainer accepts, so this exercises the real validation.
    #[test]
    fn steps_suite_shares_one_training_run_and_reruns_identically() {
        let oracles = untrained_encoders_for_tests(3);
        let dir = tempfile::tempdir().unwrap();
        let mut spec = tiny_spec(SuiteKind::Steps);
        spec.level_widths = [32, 48];

        let first = run_ablation(&oracles, &spec, &dir.path().join("a")).unwrap();
        assert_eq!(first.failed_rows(), 0, "table:\n{}", first.table());
        assert_eq!(first.rows.len(), 2);
        assert_eq!(first.rows[0].variant, "k=1");
        assert_eq!(first.rows[1].variant, "k=4");
        // One shared training run: only the k=1 directory exists.
        assert!(dir.path().join("a/runs/k-1_s11/checkpoint.swlb").exists());
        assert!(!dir.path().join("a/runs/k-4_s11").exists());
        for name in ["ablation.json", "ablation.txt"] {
            assert!(dir.path().join("a").join(name).exists(), "{name} missing");
        }

        let second = run_ablation(&oracles, &spec, &dir.path().join("b")).unwrap();
        assert_eq!(second.table(), first.table(), "suites must be rerun-stable");
    }

    #[test]
    fn variant_failures_are_isolated_into_their_rows() {
        let oracles = untrained_encoders_for_tests(3);
        let dir = tempfile::tempdir().unwrap();
        let mut spec = tiny_spec(SuiteKind::Steps);
        spec.level_widths = [32, 48];
        // Too few evaluation pairs for the feature dimension: training
        // succeeds, every evaluation fails, the suite still completes.
        spec.eval_pairs = 4;

        let outcome = run_ablation(&oracles, &spec, dir.path()).unwrap();
        assert_eq!(outcome.rows.len(), 2);
        assert_eq!(outcome.failed_rows(), 2);
        for row in &outcome.rows {
            let err = row.error.as_deref().unwrap();
            assert!(err.contains("pairs"), "unexpected error: {err}");
        }
        assert!(outcome.table().contains("FAILED"));

        assert!(run_ablation(
            &oracles,
            &AblateSpec { seeds: vec![], ..tiny_spec(SuiteKind::Losses) },
            dir.path()
        )
        .is_err());
    }
}
