//! Synthetic labeled point-cloud scenes.
//!
//! Each foreground class present in a scene is a Gaussian blob at a seeded
//! center; the remaining points are background, uniform in the unit cube.
//! Per-point features are the coordinates followed by a fixed per-class
//! signature vector corrupted with Gaussian noise, so labels are recoverable
//! point-wise but not trivially.
//!
//! Labels: 0 = background, `1..=K_b` base, `K_b+1..=K_b+K_n` novel.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::net::{softmax, Model, IGNORE};

const SCENE_MAGIC: &[u8; 8] = b"HOPSCN01";

/// Class split and the seeds of every sampling stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub k_base: usize,
    pub k_novel: usize,
    /// Support scenes per novel class.
    pub shots: usize,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self {
            k_base: 6,
            k_novel: 4,
            shots: 1,
            seed: 0,
        }
    }
}

impl SplitSpec {
    pub fn base_classes(&self) -> Vec<usize> {
        (1..=self.k_base).collect()
    }

    pub fn novel_classes(&self) -> Vec<usize> {
        (self.k_base + 1..=self.k_base + self.k_novel).collect()
    }

    pub fn num_classes(&self) -> usize {
        1 + self.k_base + self.k_novel
    }

    pub fn is_novel(&self, label: usize) -> bool {
        label != IGNORE && label > self.k_base && label <= self.k_base + self.k_novel
    }

    pub fn validate(&self) -> Result<()> {
        if self.k_base == 0 {
            return Err(Error::Config("k_base must be at least 1".into()));
        }
        if self.shots == 0 {
            return Err(Error::Config("shots must be at least 1".into()));
        }
        Ok(())
    }
}

/// Independent random streams derived from the master seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Signatures = 1,
    Train = 2,
    SupportPool = 3,
    Test = 4,
    SupportSelect = 5,
    Phase1Batches = 6,
    GradientBatches = 7,
    Init = 8,
    Phase2 = 9,
}

/// SplitMix64-style mixing of `(master, stream, index)` into one seed.
pub fn derive_seed(master: u64, stream: Stream, index: u64) -> u64 {
    let mut z = master
        .wrapping_add((stream as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(index.wrapping_mul(0xD1B5_4A32_D192_ED69));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn stream_rng(master: u64, stream: Stream, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(master, stream, index))
}

/// Scene geometry and dataset sizes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DataConfig {
    pub split: SplitSpec,
    pub points_per_scene: usize,
    pub signature_dim: usize,
    /// Standard deviation of each signature entry.
    pub signature_scale: f64,
    pub noise_std: f64,
    pub blob_sigma: f64,
    pub classes_per_scene: usize,
    /// Points in each foreground blob.
    pub blob_points: usize,
    pub min_points: usize,
    pub train_scenes: usize,
    pub support_pool_scenes: usize,
    pub test_scenes: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            split: SplitSpec::default(),
            points_per_scene: 2048,
            signature_dim: 8,
            signature_scale: 0.3,
            noise_std: 0.3,
            blob_sigma: 0.05,
            classes_per_scene: 4,
            blob_points: 256,
            min_points: 64,
            train_scenes: 200,
            support_pool_scenes: 40,
            test_scenes: 100,
        }
    }
}

impl DataConfig {
    pub fn f_in(&self) -> usize {
        3 + self.signature_dim
    }

    pub fn validate(&self) -> Result<()> {
        self.split.validate()?;
        let fg = self.split.k_base + self.split.k_novel;
        if self.classes_per_scene > fg {
            return Err(Error::Config(format!(
                "classes_per_scene ({}) exceeds the number of foreground classes ({fg})",
                self.classes_per_scene
            )));
        }
        if self.blob_points < self.min_points {
            return Err(Error::Config("blob_points must be at least min_points".into()));
        }
        if self.classes_per_scene * self.blob_points > self.points_per_scene {
            return Err(Error::Config("blobs do not fit in points_per_scene".into()));
        }
        Ok(())
    }
}

/// Which label view a scene is generated for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScenePhase {
    /// Novel-class points are relabeled background.
    Base,
    Full,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    /// `N × 3`, inside the unit cube.
    pub coords: Mat,
    /// `N × F_in`.
    pub feats: Mat,
    pub labels: Vec<usize>,
}

impl Scene {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Number of points carrying each label `0..num_classes`.
    pub fn class_counts(&self, num_classes: usize) -> Vec<usize> {
        let mut c = vec![0; num_classes];
        for &l in &self.labels {
            if l < num_classes {
                c[l] += 1;
            }
        }
        c
    }

    pub fn contains(&self, class: usize) -> bool {
        self.labels.contains(&class)
    }
}

/// Per-class signature vectors (row 0 is background).
///
/// Candidates are redrawn until every pair is at least 60% of the typical
/// pairwise distance apart, so no two classes are near-duplicates.
pub fn class_signatures(cfg: &DataConfig) -> Mat {
    let k = cfg.split.num_classes();
    let d = cfg.signature_dim;
    let normal = Normal::new(0.0, cfg.signature_scale).expect("finite scale");
    let min_dist = 0.6 * cfg.signature_scale * (2.0 * d as f64).sqrt();
    let mut rng = stream_rng(cfg.split.seed, Stream::Signatures, 0);
    let mut best = Mat::zeros(k, d);
    let mut best_gap = f64::NEG_INFINITY;
    for _ in 0..10_000 {
        let cand = Mat::from_vec(k, d, (0..k * d).map(|_| normal.sample(&mut rng)).collect())
            .expect("sized above");
        let gap = min_pairwise_distance(&cand);
        if gap > best_gap {
            best_gap = gap;
            best = cand;
        }
        if best_gap >= min_dist {
            break;
        }
    }
    best
}

fn min_pairwise_distance(m: &Mat) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..m.rows() {
        for j in (i + 1)..m.rows() {
            let d: f64 = m
                .row(i)
                .iter()
                .zip(m.row(j))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>()
                .sqrt();
            best = best.min(d);
        }
    }
    best
}

/// Pure function of `(seed, cfg, phase)`.
pub fn generate_scene(seed: u64, cfg: &DataConfig, signatures: &Mat, phase: ScenePhase) -> Scene {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = cfg.points_per_scene;
    let split = &cfg.split;
    let fg = split.k_base + split.k_novel;
    let blob = Normal::new(0.0, cfg.blob_sigma).expect("finite sigma");
    let noise = Normal::new(0.0, cfg.noise_std).expect("finite noise");

    let mut present: Vec<usize> = sample(&mut rng, fg, cfg.classes_per_scene)
        .into_iter()
        .map(|c| c + 1)
        .collect();
    present.sort_unstable();

    let mut coords = Mat::zeros(n, 3);
    let mut truth = Vec::with_capacity(n);
    for &class in &present {
        let center: [f64; 3] = std::array::from_fn(|_| rng.random_range(0.15..0.85));
        for _ in 0..cfg.blob_points {
            let i = truth.len();
            for (a, c) in center.iter().enumerate() {
                coords[(i, a)] = (c + blob.sample(&mut rng)).clamp(0.0, 1.0);
            }
            truth.push(class);
        }
    }
    while truth.len() < n {
        let i = truth.len();
        for a in 0..3 {
            coords[(i, a)] = rng.random_range(0.0..1.0);
        }
        truth.push(0);
    }

    let f_in = cfg.f_in();
    let mut feats = Mat::zeros(n, f_in);
    for i in 0..n {
        let row = feats.row_mut(i);
        row[..3].copy_from_slice(coords.row(i));
        for (j, s) in signatures.row(truth[i]).iter().enumerate() {
            row[3 + j] = s + noise.sample(&mut rng);
        }
    }

    let labels = match phase {
        ScenePhase::Full => truth,
        ScenePhase::Base => truth
            .into_iter()
            .map(|l| if split.is_novel(l) { 0 } else { l })
            .collect(),
    };
    Scene {
        coords,
        feats,
        labels,
    }
}

/// Generates scenes `0..count` of one stream in parallel; the output does
/// not depend on the thread count.
pub fn generate_scenes(cfg: &DataConfig, signatures: &Mat, stream: Stream, count: usize, phase: ScenePhase) -> Vec<Scene> {
    (0..count)
        .into_par_iter()
        .map(|i| generate_scene(derive_seed(cfg.split.seed, stream, i as u64), cfg, signatures, phase))
        .collect()
}

/// Train, support-pool and test scenes for one master seed.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub config: DataConfig,
    pub signatures: Mat,
    /// Base-phase view: novel points labeled background.
    pub train: Vec<Scene>,
    pub support_pool: Vec<Scene>,
    pub test: Vec<Scene>,
}

impl Dataset {
    pub fn generate(cfg: &DataConfig) -> Result<Self> {
        cfg.validate()?;
        let signatures = class_signatures(cfg);
        Ok(Self {
            config: *cfg,
            train: generate_scenes(cfg, &signatures, Stream::Train, cfg.train_scenes, ScenePhase::Base),
            support_pool: generate_scenes(cfg, &signatures, Stream::SupportPool, cfg.support_pool_scenes, ScenePhase::Full),
            test: generate_scenes(cfg, &signatures, Stream::Test, cfg.test_scenes, ScenePhase::Full),
            signatures,
        })
    }
}

/// Chooses `shots` distinct pool scenes for every novel class (in class
/// order). Only scenes where the class occupies at least `min_points`
/// points qualify.
pub fn sample_support(split: &SplitSpec, min_points: usize, pool: &[Scene], seed: u64) -> Result<Vec<Vec<usize>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = split.num_classes();
    let counts: Vec<Vec<usize>> = pool.iter().map(|s| s.class_counts(k)).collect();
    split
        .novel_classes()
        .into_iter()
        .map(|class| {
            let candidates: Vec<usize> = (0..pool.len())
                .filter(|&i| counts[i][class] >= min_points)
                .collect();
            if candidates.len() < split.shots {
                return Err(Error::InsufficientPool {
                    class,
                    available: candidates.len(),
                    required: split.shots,
                });
            }
            let mut picked: Vec<usize> = sample(&mut rng, candidates.len(), split.shots)
                .into_iter()
                .map(|j| candidates[j])
                .collect();
            picked.sort_unstable();
            Ok(picked)
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PseudoLabelMode {
    /// Ground-truth labels.
    Gt,
    /// Model argmax where its max probability is at least 0.9, else IGNORE.
    Thresh,
}

pub const PSEUDO_LABEL_CONFIDENCE: f64 = 0.9;

/// Stand-in for an external pseudo-labeling pipeline.
pub fn pseudo_label_stub(model: &Model, scene: &Scene, mode: PseudoLabelMode) -> Result<Vec<usize>> {
    match mode {
        PseudoLabelMode::Gt => Ok(scene.labels.clone()),
        PseudoLabelMode::Thresh => {
            let (logits, _) = model.forward(&scene.feats)?;
            let probs = softmax(&logits);
            Ok(probs
                .row_iter()
                .map(|row| {
                    let c = crate::net::argmax(row);
                    if row[c] >= PSEUDO_LABEL_CONFIDENCE {
                        c
                    } else {
                        IGNORE
                    }
                })
                .collect())
        }
    }
}

/// Labels for a support scene selected for `class`: that class keeps its
/// ground truth, other novel classes are ignored (the scene is a `K`-shot
/// example of `class` only) and everything else comes from `stub`.
pub fn support_labels(split: &SplitSpec, scene: &Scene, class: usize, stub: &[usize]) -> Vec<usize> {
    scene
        .labels
        .iter()
        .zip(stub)
        .map(|(&truth, &pseudo)| {
            if truth == class {
                class
            } else if split.is_novel(truth) || split.is_novel(pseudo) {
                IGNORE
            } else {
                pseudo
            }
        })
        .collect()
}

pub fn write_scene<W: Write>(scene: &Scene, mut w: W) -> Result<()> {
    let n = scene.len();
    let f = scene.feats.cols();
    w.write_all(SCENE_MAGIC)?;
    w.write_all(&(n as u64).to_le_bytes())?;
    w.write_all(&(f as u64).to_le_bytes())?;
    let mut buf = Vec::with_capacity(n * (3 + f + 1) * 8);
    for i in 0..n {
        for v in scene.coords.row(i).iter().chain(scene.feats.row(i)) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
        let label: i64 = if scene.labels[i] == IGNORE { -1 } else { scene.labels[i] as i64 };
        buf.extend_from_slice(&label.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_scene<R: Read>(mut r: R) -> Result<Scene> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != SCENE_MAGIC {
        return Err(Error::Format("not a scene file (bad magic)".into()));
    }
    let mut word = [0u8; 8];
    r.read_exact(&mut word)?;
    let n = u64::from_le_bytes(word) as usize;
    r.read_exact(&mut word)?;
    let f = u64::from_le_bytes(word) as usize;
    let mut body = vec![0u8; n * (3 + f + 1) * 8];
    r.read_exact(&mut body)?;
    let mut words = body.chunks_exact(8).map(|c| c.try_into().expect("chunk of 8"));
    let mut coords = Mat::zeros(n, 3);
    let mut feats = Mat::zeros(n, f);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        for v in coords.row_mut(i).iter_mut().chain(feats.row_mut(i).iter_mut()) {
            *v = f64::from_le_bytes(words.next().expect("sized above"));
        }
        let l = i64::from_le_bytes(words.next().expect("sized above"));
        labels.push(if l < 0 { IGNORE } else { l as usize });
    }
    Ok(Scene {
        coords,
        feats,
        labels,
    })
}

pub fn save_scene(scene: &Scene, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    write_scene(scene, std::io::BufWriter::new(file))
}

pub fn load_scene(path: &Path) -> Result<Scene> {
    let file = std::fs::File::open(path)?;
    read_scene(std::io::BufReader::new(file))
}
