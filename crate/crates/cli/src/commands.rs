//! Subcommand implementations. Every command reads and writes inside one run
//! directory:
//!
//! ```text
//! OUT/data/manifest.json, OUT/data/{train,support,test}/scene_NNNNN.bin
//! OUT/phase1.ckpt  OUT/phase2.ckpt
//! OUT/metrics/{phase1,phase2,eval}.jsonl and CSV exports
//! OUT/ablate/runs.jsonl, OUT/ablate/<group>/<cell>/seed-<s>/metrics.jsonl,
//! OUT/ablate/report/*.csv
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use hop_core::data::{class_signatures, load_scene, save_scene, DataConfig, Dataset, Scene};
use hop_core::hop_rep::cosine_similarity_matrix;
use hop_core::linalg::Mat;
use hop_core::trainer::ablation::RunRecord;
use hop_core::trainer::{
    ablation_cells, ablation_suite, evaluate, evaluate_oracle, phase1_train, phase2_train, AblationTable,
};
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::config::{Predictor, RunConfig};
use crate::output::{
    class_frequency_csv, confusion_csv, emit_jsonl, histogram_csv, matrix_csv, read_jsonl, series_csv,
    summary_csv, write_text, MetricsRecord,
};
use crate::Common;

const MANIFEST_FORMAT: u32 = 1;
const SPLITS: [&str; 3] = ["train", "support", "test"];

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format: u32,
    seed: u64,
    train_scenes: usize,
    support_scenes: usize,
    test_scenes: usize,
    data: DataConfig,
    signatures: Vec<Vec<f64>>,
}

fn load_config(c: &Common) -> Result<RunConfig> {
    RunConfig::load(c.config.as_deref(), &c.set, c.seed)
}

fn data_dir(out: &Path) -> PathBuf {
    out.join("data")
}

fn metrics_dir(out: &Path) -> PathBuf {
    out.join("metrics")
}

fn scene_path(out: &Path, split: &str, i: usize) -> PathBuf {
    data_dir(out).join(split).join(format!("scene_{i:05}.bin"))
}

pub fn gen(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let data = cfg.data();
    let ds = Dataset::generate(&data)?;
    let dir = data_dir(&c.out);
    if dir.exists() {
        std::fs::remove_dir_all(&dir).with_context(|| format!("clearing {}", dir.display()))?;
    }
    for (split, scenes) in SPLITS.iter().zip([&ds.train, &ds.support_pool, &ds.test]) {
        std::fs::create_dir_all(dir.join(split)).with_context(|| format!("creating {}", dir.join(split).display()))?;
        for (i, s) in scenes.iter().enumerate() {
            save_scene(s, &scene_path(&c.out, split, i)).with_context(|| format!("writing {split} scene {i}"))?;
        }
    }
    let manifest = Manifest {
        format: MANIFEST_FORMAT,
        seed: data.split.seed,
        train_scenes: ds.train.len(),
        support_scenes: ds.support_pool.len(),
        test_scenes: ds.test.len(),
        data,
        signatures: ds.signatures.row_iter().map(<[f64]>::to_vec).collect(),
    };
    write_text(&dir.join("manifest.json"), &serde_json::to_string_pretty(&manifest)?)?;
    println!(
        "wrote {} train, {} support, {} test scenes to {}",
        manifest.train_scenes,
        manifest.support_scenes,
        manifest.test_scenes,
        dir.display()
    );
    Ok(())
}

fn load_dataset(out: &Path) -> Result<Dataset> {
    let path = data_dir(out).join("manifest.json");
    if !path.exists() {
        bail!(
            "no dataset at {}; run `hop gen --out {}` first",
            data_dir(out).display(),
            out.display()
        );
    }
    let manifest: Manifest = serde_json::from_str(&std::fs::read_to_string(&path)?)
        .with_context(|| format!("parsing {}", path.display()))?;
    ensure!(
        manifest.format == MANIFEST_FORMAT,
        "dataset manifest format {} is not supported",
        manifest.format
    );
    let read = |split: &str, n: usize| -> Result<Vec<Scene>> {
        (0..n)
            .map(|i| {
                let p = scene_path(out, split, i);
                load_scene(&p).with_context(|| format!("reading {}", p.display()))
            })
            .collect()
    };
    let signatures = if manifest.signatures.is_empty() {
        class_signatures(&manifest.data)
    } else {
        Mat::from_rows(&manifest.signatures)?
    };
    Ok(Dataset {
        config: manifest.data,
        signatures,
        train: read("train", manifest.train_scenes)?,
        support_pool: read("support", manifest.support_scenes)?,
        test: read("test", manifest.test_scenes)?,
    })
}

fn warn_data_mismatch(cfg: &RunConfig, ds: &Dataset) {
    if cfg.data() != ds.config {
        eprintln!("warning: data keys differ from the generated dataset; using the dataset's settings");
    }
}

fn record(stage: &str, cfg: &RunConfig, flags: bool, metrics: hop_core::trainer::MetricsReport) -> MetricsRecord {
    MetricsRecord {
        stage: stage.into(),
        seed: cfg.seed,
        flags: flags.then(|| cfg.flags()),
        metrics,
    }
}

pub fn phase1(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let ds = load_dataset(&c.out)?;
    warn_data_mismatch(&cfg, &ds);
    let out = phase1_train(&cfg.train(), &ds)?;
    checkpoint::save(&c.out.join("phase1.ckpt"), &out.model, Some(&out.basis))?;
    let m = metrics_dir(&c.out);
    write_text(&m.join("phase1_confusion.csv"), &confusion_csv(&out.report.confusion))?;
    write_text(&m.join("phase1_loss.csv"), &series_csv("loss", &out.losses))?;
    eprintln!("projection basis rank {} of dimension {}", out.basis.rank(), out.basis.dim());
    emit_jsonl(&m.join("phase1.jsonl"), &[record("phase1", &cfg, false, out.report)])
}

pub fn phase2(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let ckpt_path = c.out.join("phase1.ckpt");
    if !ckpt_path.exists() {
        bail!(
            "missing {}; run `hop phase1 --out {}` first",
            ckpt_path.display(),
            c.out.display()
        );
    }
    let ds = load_dataset(&c.out)?;
    warn_data_mismatch(&cfg, &ds);
    let ckpt = checkpoint::load(&ckpt_path)?;
    let Some(basis) = ckpt.basis else {
        bail!("{} has no projection basis; rerun `hop phase1`", ckpt_path.display());
    };
    let out = phase2_train(&cfg.train(), &ckpt.model, &basis, &ds, cfg.flags())?;
    checkpoint::save(&c.out.join("phase2.ckpt"), &out.model, Some(&basis))?;
    let m = metrics_dir(&c.out);
    let split = ds.config.split;
    write_text(&m.join("phase2_confusion.csv"), &confusion_csv(&out.report.confusion))?;
    write_text(&m.join("phase2_confidence_histogram.csv"), &histogram_csv(&out.report.confidence_histogram))?;
    write_text(&m.join("phase2_class_frequency.csv"), &class_frequency_csv(&split, &out.report))?;
    write_text(
        &m.join("phase2_prototype_cosine.csv"),
        &matrix_csv(&cosine_similarity_matrix(&out.model.all_prototypes())?),
    )?;
    write_text(&m.join("phase2_loss.csv"), &series_csv("loss", &out.losses))?;
    write_text(&m.join("phase2_support.json"), &serde_json::to_string(&out.selection)?)?;
    emit_jsonl(&m.join("phase2.jsonl"), &[record("phase2", &cfg, true, out.report)])
}

pub fn eval(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let ds = load_dataset(&c.out)?;
    let split = ds.config.split;
    let (stage, report) = match cfg.eval_predictor {
        Predictor::Oracle => ("eval_oracle", evaluate_oracle(&ds.test, &split)),
        Predictor::Model => {
            let path = ["phase2.ckpt", "phase1.ckpt"]
                .iter()
                .map(|f| c.out.join(f))
                .find(|p| p.exists());
            let Some(path) = path else {
                bail!(
                    "no checkpoint in {}; run `hop phase1` (and `hop phase2`) first",
                    c.out.display()
                );
            };
            let ckpt = checkpoint::load(&path)?;
            ("eval", evaluate(&ckpt.model, &ds.test, &split)?)
        }
    };
    let m = metrics_dir(&c.out);
    write_text(&m.join(format!("{stage}_confusion.csv")), &confusion_csv(&report.confusion))?;
    emit_jsonl(&m.join(format!("{stage}.jsonl")), &[record(stage, &cfg, false, report)])
}

fn thread_pool() -> Result<rayon::ThreadPool> {
    let mut b = rayon::ThreadPoolBuilder::new();
    if let Ok(v) = std::env::var("HOP_THREADS") {
        let n: usize = v.parse().with_context(|| format!("HOP_THREADS={v} is not a number"))?;
        b = b.num_threads(n);
    }
    Ok(b.build()?)
}

pub fn ablate(c: &Common) -> Result<()> {
    let cfg = load_config(c)?;
    let train = cfg.train();
    let cells = ablation_cells(&train);
    let seeds: Vec<u64> = (0..cfg.ablate_seeds as u64).map(|i| cfg.seed + i).collect();
    let table = thread_pool()?.install(|| ablation_suite(&cfg.data(), &train, &cells, &seeds))?;
    let dir = c.out.join("ablate");
    for r in &table.runs {
        let run_dir = dir.join(&r.group).join(&r.name).join(format!("seed-{}", r.seed));
        let mut text = String::new();
        for (stage, m) in [("phase1", &r.phase1), ("phase2", &r.phase2)] {
            let rec = MetricsRecord {
                stage: stage.into(),
                seed: r.seed,
                flags: None,
                metrics: m.clone(),
            };
            text.push_str(&serde_json::to_string(&rec)?);
            text.push('\n');
        }
        write_text(&run_dir.join("metrics.jsonl"), &text)?;
    }
    let mut text = String::new();
    for r in &table.runs {
        text.push_str(&serde_json::to_string(r)?);
        text.push('\n');
    }
    write_text(&dir.join("runs.jsonl"), &text)?;
    write_report(&table, &dir.join("report"))?;
    for row in &table.rows {
        println!("{}", serde_json::to_string(row)?);
    }
    Ok(())
}

pub fn report(metrics: &Path, out: Option<&Path>) -> Result<()> {
    ensure!(metrics.is_dir(), "{} is not a directory", metrics.display());
    let mut files: Vec<PathBuf> = walkdir::WalkDir::new(metrics)
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_file() && e.file_name() == "runs.jsonl")
        .map(|e| e.into_path())
        .collect();
    files.sort();
    let mut runs: Vec<RunRecord> = Vec::new();
    for f in &files {
        runs.extend(read_jsonl::<RunRecord>(f)?);
    }
    if runs.is_empty() {
        eprintln!("warning: no runs.jsonl records under {}; writing empty tables", metrics.display());
    }
    let table = AblationTable::from_runs(runs);
    let out = out.map(Path::to_path_buf).unwrap_or_else(|| metrics.join("report"));
    write_report(&table, &out)?;
    println!("wrote {} cells to {}", table.rows.len(), out.display());
    Ok(())
}

fn write_report(table: &AblationTable, out: &Path) -> Result<()> {
    for group in ["flags", "lambda_orth", "adaptation_ratio"] {
        let rows: Vec<_> = table.rows.iter().filter(|r| r.group == group).collect();
        write_text(&out.join(format!("{group}.csv")), &summary_csv(&rows))?;
    }

    // summed confidence histograms per cell
    let mut hist: BTreeMap<(String, String), Vec<u64>> = BTreeMap::new();
    let mut freq = String::from("group,cell,seed,class_rank,predicted_points\n");
    for r in &table.runs {
        let h = hist
            .entry((r.group.clone(), r.name.clone()))
            .or_insert_with(|| vec![0; r.phase2.confidence_histogram.len()]);
        h.iter_mut().zip(&r.phase2.confidence_histogram).for_each(|(a, b)| *a += b);
        for (k, c) in r.phase2.novel_pred_counts.iter().enumerate() {
            freq.push_str(&format!("{},{},{},{k},{c}\n", r.group, r.name, r.seed));
        }
    }
    let mut conf = String::from("group,cell,bin,count\n");
    for ((g, n), h) in &hist {
        for (b, c) in h.iter().enumerate() {
            conf.push_str(&format!("{g},{n},{b},{c}\n"));
        }
    }
    write_text(&out.join("confidence_histograms.csv"), &conf)?;
    write_text(&out.join("class_frequency.csv"), &freq)?;
    Ok(())
}
