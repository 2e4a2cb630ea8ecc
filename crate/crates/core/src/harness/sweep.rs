use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use super::config::{ExperimentConfig, Variant};
use super::pipeline::{cmd_eval, cmd_prepare, cmd_pretrain, cmd_train, cmd_trainwv, Run, TrainSummary, PRETRAINED_CKPT, TRAIN_SUMMARY, WORD_VECTORS};
use crate::error::{Error, IoContext, Result};
use crate::eval::emit_plot;

pub const SWEEP_CSV: &str = "sweep.csv";
pub const SWEEP_SVG: &str = "sweep.svg";
const CELL_DONE: &str = "cell.done";

/// Variants crossed with amounts of paired data and seeds.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    /// Directory name under `runs/`.
    pub name: String,
    /// Paired-data amounts in minutes, strictly increasing.
    pub paired_minutes: Vec<f64>,
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    /// Cells trained at once.
    pub workers: usize,
    /// Fixes the utterance order the paired subsets are prefixes of.
    pub subsample_seed: u64,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            name: "sweep".into(),
            paired_minutes: vec![0.25, 0.5, 1.0],
            variants: Variant::ALL.to_vec(),
            seeds: vec![0, 1, 2],
            workers: 1,
            subsample_seed: 0,
        }
    }
}

impl SweepSpec {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).at(path)?;
        let spec: Self = serde_json::from_str(&text).map_err(|e| Error::Validation(format!("{}: {e}", path.display())))?;
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() || self.name.contains(['/', '\\']) || self.name.starts_with('.') {
            return Err(Error::Validation(format!("sweep name `{}` is not a plain directory name", self.name)));
        }
        if self.paired_minutes.is_empty() || self.variants.is_empty() || self.seeds.is_empty() {
            return Err(Error::Validation("sweep needs at least one amount, variant and seed".into()));
        }
        if self.paired_minutes.iter().any(|m| !(m.is_finite() && *m > 0.0)) {
            return Err(Error::Validation("paired amounts must be positive".into()));
        }
        if self.paired_minutes.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::Validation("paired amounts must be strictly increasing".into()));
        }
        if self.workers == 0 {
            return Err(Error::Validation("workers must be at least 1".into()));
        }
        Ok(())
    }

    /// Cells in a fixed order: variant, then amount, then seed.
    pub fn cells(&self) -> Vec<(Variant, f64, u64)> {
        let mut out = Vec::new();
        for &v in &self.variants {
            for &m in &self.paired_minutes {
                for &s in &self.seeds {
                    out.push((v, m, s));
                }
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub variant: Variant,
    pub paired_minutes: f64,
    pub seed: u64,
    /// Mean MCD over the evaluation set in dB.
    pub mcd: f64,
    pub median_mcd: f64,
    pub n_paired: usize,
    pub best_step: u64,
    pub best_loss: f64,
    pub steps_run: u64,
    pub config_hash: String,
}

#[derive(Clone, Debug)]
pub struct SweepOutcome {
    pub rows: Vec<SweepRow>,
    pub dir: PathBuf,
    pub csv: PathBuf,
    pub svg: PathBuf,
}

impl SweepOutcome {
    pub fn cell_dir(&self, variant: Variant, minutes: f64, seed: u64) -> PathBuf {
        cell_dir(&self.dir, variant, minutes, seed)
    }

    pub fn summary(&self, variant: Variant, minutes: f64, seed: u64) -> Result<TrainSummary> {
        let p = self.cell_dir(variant, minutes, seed).join(TRAIN_SUMMARY);
        Ok(serde_json::from_slice(&std::fs::read(&p).at(&p)?)?)
    }
}

pub fn cell_dir(sweep_dir: &Path, variant: Variant, minutes: f64, seed: u64) -> PathBuf {
    sweep_dir.join("cells").join(format!("{variant}-{minutes}m-s{seed}"))
}

/// Configuration of one variant with consistent conditioning and seed.
/// Artifacts the variant does not use are dropped so they do not enter its hash.
pub fn variant_config(base: &ExperimentConfig, variant: Variant, seed: u64) -> ExperimentConfig {
    let mut cfg = base.clone();
    cfg.variant = variant;
    cfg.seed = seed;
    cfg.model.conditioning.enabled = variant.uses_word_vectors();
    if !variant.uses_word_vectors() {
        cfg.paths.word_vectors = None;
    }
    if !variant.uses_pretraining() {
        cfg.paths.pretrained_checkpoint = None;
    }
    cfg.name = format!("{variant}-s{seed}");
    cfg
}

/// Runs `job` over `0..n` with up to `workers` threads; the first error wins.
fn parallel(n: usize, workers: usize, job: impl Fn(usize) -> Result<()> + Sync) -> Result<()> {
    let next = AtomicUsize::new(0);
    let failure: Mutex<Option<Error>> = Mutex::new(None);
    std::thread::scope(|s| {
        for _ in 0..workers.min(n).max(1) {
            s.spawn(|| loop {
                if failure.lock().expect("lock").is_some() {
                    break;
                }
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= n {
                    break;
                }
                if let Err(e) = job(i) {
                    failure.lock().expect("lock").get_or_insert(e);
                }
            });
        }
    });
    match failure.into_inner().expect("lock") {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

/// Prepares data once, trains shared word vectors and pretrained decoders,
/// then trains and evaluates every cell. Finished cells are skipped; the CSV
/// is rebuilt in cell order so reruns give identical bytes.
pub fn run_sweep(base: &ExperimentConfig, spec: &SweepSpec) -> Result<SweepOutcome> {
    spec.validate()?;
    let dir = base.run_root().join("runs").join(&spec.name);
    let mut shared = base.clone();
    shared.paths.features = Some(dir.join("features"));

    let prep_cfg = variant_config(&shared, Variant::TBase, base.seed);
    let prep = Run::at(prep_cfg, dir.join("prepare"))?;
    cmd_prepare(&prep)?;
    let paired = prep.paired_manifest()?;
    let available = paired.total_seconds() / 60.0;
    if let Some(&most) = spec.paired_minutes.last() {
        if most > available + 1e-9 {
            return Err(Error::Validation(format!(
                "sweep asks for {most} paired minutes but the manifest holds {available:.3}"
            )));
        }
    }

    if spec.variants.iter().any(|v| v.uses_word_vectors()) && shared.paths.word_vectors.is_none() {
        let wv = Run::at(variant_config(&shared, Variant::TEnc, base.seed), dir.join("wordvec"))?;
        let path = wv.path(WORD_VECTORS);
        if !path.exists() {
            cmd_trainwv(&wv)?;
        }
        shared.paths.word_vectors = Some(path);
    }

    let pretrain_jobs: Vec<(Variant, u64)> = if shared.paths.pretrained_checkpoint.is_none() {
        spec.variants
            .iter()
            .filter(|v| v.uses_pretraining())
            .flat_map(|&v| spec.seeds.iter().map(move |&s| (v, s)))
            .collect()
    } else {
        Vec::new()
    };
    let pretrain_dir = |v: Variant, s: u64| dir.join("pretrain").join(format!("{v}-s{s}"));
    parallel(pretrain_jobs.len(), spec.workers, |i| {
        let (v, s) = pretrain_jobs[i];
        let run = Run::at(variant_config(&shared, v, s), pretrain_dir(v, s))?;
        if run.path("pretrain.done").exists() && run.path(PRETRAINED_CKPT).exists() {
            return Ok(());
        }
        log::info!("pre-training {v} seed {s}");
        cmd_pretrain(&run).map(|_| ())
    })?;

    let cells = spec.cells();
    let rows: Vec<Mutex<Option<SweepRow>>> = cells.iter().map(|_| Mutex::new(None)).collect();
    parallel(cells.len(), spec.workers, |i| {
        let (v, minutes, seed) = cells[i];
        let cdir = cell_dir(&dir, v, minutes, seed);
        let mut cfg = variant_config(&shared, v, seed);
        if v.uses_pretraining() && shared.paths.pretrained_checkpoint.is_none() {
            cfg.paths.pretrained_checkpoint = Some(pretrain_dir(v, seed).join(PRETRAINED_CKPT));
        }
        let subset = paired.subsample_minutes(minutes, spec.subsample_seed)?.absolutized();
        std::fs::create_dir_all(&cdir).at(&cdir)?;
        let manifest_path = cdir.join("paired.jsonl");
        subset.save(&manifest_path)?;
        cfg.paths.paired_manifest = manifest_path;
        let run = Run::at(cfg, cdir.clone())?;
        let done = cdir.join(CELL_DONE);
        if let Ok(bytes) = std::fs::read(&done) {
            let row: SweepRow = serde_json::from_slice(&bytes)?;
            if row.config_hash == run.cfg.hash() {
                *rows[i].lock().expect("lock") = Some(row);
                return Ok(());
            }
        }
        log::info!("cell {v} {minutes} min seed {seed}: {} paired utterances", subset.len());
        let out = cmd_train(&run)?;
        let report = cmd_eval(&run)?;
        let row = SweepRow {
            variant: v,
            paired_minutes: minutes,
            seed,
            mcd: report.mean().unwrap_or(f64::NAN),
            median_mcd: report.median().unwrap_or(f64::NAN),
            n_paired: subset.len(),
            best_step: out.best_step,
            best_loss: out.best_loss,
            steps_run: out.steps_run,
            config_hash: run.cfg.hash(),
        };
        std::fs::write(&done, serde_json::to_vec_pretty(&row)?).at(&done)?;
        *rows[i].lock().expect("lock") = Some(row);
        Ok(())
    })?;
    let rows: Vec<SweepRow> = rows
        .into_iter()
        .map(|r| r.into_inner().expect("lock").expect("every cell finished"))
        .collect();

    let mut w = csv::Writer::from_writer(Vec::new());
    for r in &rows {
        w.serialize(r)?;
    }
    let body = String::from_utf8(w.into_inner().map_err(|e| csv::Error::from(e.into_error()))?).expect("utf-8");
    let csv_path = dir.join(SWEEP_CSV);
    std::fs::write(&csv_path, &body).at(&csv_path)?;
    let svg_path = dir.join(SWEEP_SVG);
    std::fs::write(&svg_path, emit_plot(&body)?).at(&svg_path)?;
    Ok(SweepOutcome {
        rows,
        dir,
        csv: csv_path,
        svg: svg_path,
    })
}
