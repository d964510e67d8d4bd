//! Flag grid and hyper-parameter sweeps over paired seeds.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::metrics::{summarize, MetricsReport, Summary};
use super::{phase1_train, phase2_train, Flags, Phase1Output, TrainConfig};
use crate::data::{DataConfig, Dataset};
use crate::error::Result;
use crate::hop_ent::EntropyMode;

/// One configuration of the grid.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub group: String,
    pub name: String,
    pub flags: Flags,
    /// Orthogonality weight for both phases (zero when `hop_rep` is off).
    pub lambda_orth: f64,
    pub adaptation_ratio: f64,
}

impl AblationCell {
    fn lambda_p1(&self) -> f64 {
        if self.flags.hop_rep {
            self.lambda_orth
        } else {
            0.0
        }
    }
}

/// The six flag rows, the orthogonality-weight sweep and the
/// adaptation-ratio sweep, built around `base`'s defaults.
pub fn ablation_cells(base: &TrainConfig) -> Vec<AblationCell> {
    let flag = |hop_rep, hop_grad, hop_ent| Flags {
        hop_grad,
        hop_rep,
        hop_ent,
    };
    let rows = [
        ("none", flag(false, false, EntropyMode::Off)),
        ("rep", flag(true, false, EntropyMode::Off)),
        ("grad", flag(false, true, EntropyMode::Off)),
        ("rep+grad", flag(true, true, EntropyMode::Off)),
        ("rep+grad+marg", flag(true, true, EntropyMode::MarginalOnly)),
        ("full", Flags::FULL),
    ];
    let mut cells: Vec<AblationCell> = rows
        .into_iter()
        .map(|(name, flags)| AblationCell {
            group: "flags".into(),
            name: name.into(),
            flags,
            lambda_orth: base.lambda_orth_p1,
            adaptation_ratio: base.adaptation_ratio,
        })
        .collect();
    for lambda in [0.0, 0.01, 0.1, 1.0] {
        cells.push(AblationCell {
            group: "lambda_orth".into(),
            name: format!("{lambda}"),
            flags: Flags::FULL,
            lambda_orth: lambda,
            adaptation_ratio: base.adaptation_ratio,
        });
    }
    for ar in [0.00625, 0.025, 0.1] {
        cells.push(AblationCell {
            group: "adaptation_ratio".into(),
            name: format!("{ar}"),
            flags: Flags::FULL,
            lambda_orth: base.lambda_orth_p1,
            adaptation_ratio: ar,
        });
    }
    cells
}

/// Metrics of one cell on one seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub group: String,
    pub name: String,
    pub seed: u64,
    pub phase1: MetricsReport,
    pub phase2: MetricsReport,
}

impl RunRecord {
    /// Base mIoU lost across adaptation.
    pub fn base_drop(&self) -> Option<f64> {
        Some(self.phase1.miou_b? - self.phase2.miou_b?)
    }
}

/// Per-cell summaries across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub group: String,
    pub name: String,
    pub seeds: usize,
    pub miou_b: Option<Summary>,
    pub miou_n: Option<Summary>,
    pub miou_a: Option<Summary>,
    pub hm: Option<Summary>,
    pub base_drop: Option<Summary>,
    pub mean_confidence: Option<Summary>,
    pub class_frequency_cv: Option<Summary>,
    pub prototype_offdiag_cos: Option<Summary>,
}

impl AblationRow {
    pub fn from_runs(group: &str, name: &str, runs: &[&RunRecord]) -> Self {
        let stat = |f: &dyn Fn(&RunRecord) -> Option<f64>| -> Option<Summary> {
            let v: Vec<f64> = runs.iter().filter_map(|r| f(r)).collect();
            summarize(&v)
        };
        Self {
            group: group.into(),
            name: name.into(),
            seeds: runs.len(),
            miou_b: stat(&|r| r.phase2.miou_b),
            miou_n: stat(&|r| r.phase2.miou_n),
            miou_a: stat(&|r| r.phase2.miou_a),
            hm: stat(&|r| r.phase2.hm),
            base_drop: stat(&|r| r.base_drop()),
            mean_confidence: stat(&|r| r.phase2.mean_confidence),
            class_frequency_cv: stat(&|r| r.phase2.class_frequency_cv),
            prototype_offdiag_cos: stat(&|r| r.phase2.prototype_offdiag_cos),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub runs: Vec<RunRecord>,
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn row(&self, group: &str, name: &str) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.group == group && r.name == name)
    }

    /// Groups `runs` by cell in first-appearance order.
    pub fn from_runs(runs: Vec<RunRecord>) -> Self {
        let mut order: Vec<(String, String)> = Vec::new();
        for r in &runs {
            let key = (r.group.clone(), r.name.clone());
            if !order.contains(&key) {
                order.push(key);
            }
        }
        let rows = order
            .iter()
            .map(|(g, n)| {
                let cell: Vec<&RunRecord> = runs.iter().filter(|r| &r.group == g && &r.name == n).collect();
                AblationRow::from_runs(g, n, &cell)
            })
            .collect();
        Self { runs, rows }
    }
}

/// Runs every cell on every seed. The seed sets both the data and the
/// training streams, so cells are paired. Base pretraining is shared by
/// cells with equal base orthogonality weight; work fans out over the rayon
/// pool and results are assembled in cell-then-seed order.
pub fn ablation_suite(data: &DataConfig, train: &TrainConfig, cells: &[AblationCell], seeds: &[u64]) -> Result<AblationTable> {
    if cells.is_empty() || seeds.is_empty() {
        return Ok(AblationTable::default());
    }
    let datasets: Vec<Dataset> = seeds
        .par_iter()
        .map(|&seed| {
            let mut cfg = *data;
            cfg.split.seed = seed;
            Dataset::generate(&cfg)
        })
        .collect::<Result<_>>()?;

    let mut p1_keys: Vec<(usize, u64)> = Vec::new();
    for s in 0..seeds.len() {
        for c in cells {
            let key = (s, c.lambda_p1().to_bits());
            if !p1_keys.contains(&key) {
                p1_keys.push(key);
            }
        }
    }
    let p1: BTreeMap<(usize, u64), Phase1Output> = p1_keys
        .par_iter()
        .map(|&(s, lambda_bits)| {
            let cfg = TrainConfig {
                lambda_orth_p1: f64::from_bits(lambda_bits),
                seed: seeds[s],
                ..*train
            };
            phase1_train(&cfg, &datasets[s]).map(|out| ((s, lambda_bits), out))
        })
        .collect::<Result<_>>()?;

    let jobs: Vec<(&AblationCell, usize)> = cells.iter().flat_map(|c| (0..seeds.len()).map(move |s| (c, s))).collect();
    let runs: Vec<RunRecord> = jobs
        .par_iter()
        .map(|&(cell, s)| {
            let base = &p1[&(s, cell.lambda_p1().to_bits())];
            let cfg = TrainConfig {
                lambda_orth_p1: cell.lambda_p1(),
                lambda_orth_p2: cell.lambda_orth,
                adaptation_ratio: cell.adaptation_ratio,
                seed: seeds[s],
                ..*train
            };
            let out = phase2_train(&cfg, &base.model, &base.basis, &datasets[s], cell.flags)?;
            Ok(RunRecord {
                group: cell.group.clone(),
                name: cell.name.clone(),
                seed: seeds[s],
                phase1: base.report.clone(),
                phase2: out.report,
            })
        })
        .collect::<Result<_>>()?;
    Ok(AblationTable::from_runs(runs))
}
