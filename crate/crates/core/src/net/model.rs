use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{next_version, Mlp, MlpTape};
use crate::error::{check_dim, Error, Result};
use crate::hop_rep::{
    normalize_rows_backward, phase1_logits, phase2_logits, phase2_split_grad,
    project_onto, project_onto_backward, Decomposition, Phase2HeadTapes, PrototypeRole,
    PrototypeSet,
};
use crate::linalg::Mat;

/// Network sizes. Defaults are the desk-scale configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub f_in: usize,
    pub backbone_hidden: usize,
    pub feat_dim: usize,
    pub head_hidden: usize,
    pub k_base: usize,
    pub k_novel: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            f_in: 11,
            backbone_hidden: 32,
            feat_dim: 16,
            head_hidden: 16,
            k_base: 6,
            k_novel: 4,
        }
    }
}

impl ModelConfig {
    pub fn backbone_dims(&self) -> [usize; 3] {
        [self.f_in, self.backbone_hidden, self.feat_dim]
    }

    pub fn shared_head_dims(&self) -> [usize; 3] {
        [2 * self.feat_dim, self.head_hidden, self.k_base + 1]
    }

    pub fn base_head_dims(&self) -> [usize; 3] {
        [self.feat_dim, self.head_hidden, self.k_base]
    }

    pub fn novel_head_dims(&self) -> [usize; 3] {
        [2 * self.feat_dim, self.head_hidden, self.k_novel + 1]
    }

    /// Number of classes including background.
    pub fn num_classes(&self) -> usize {
        1 + self.k_base + self.k_novel
    }
}

/// Stage-specific parts of the model.
#[derive(Debug, Clone, PartialEq)]
pub enum Stage {
    /// Base pretraining: one shared head over `[f_b | r0]`.
    Base { shared_head: Mlp },
    /// Novel adaptation: novel prototypes, `h_b` over `f_b` and `h_n` over
    /// `[f_n | r1]`.
    Adapted {
        novel: PrototypeSet,
        base_head: Mlp,
        novel_head: Mlp,
    },
}

/// One named tensor inside the flattened parameter vector.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub offset: usize,
    pub rows: usize,
    pub cols: usize,
}

impl ParamEntry {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Ordered layout of the flattened parameters.
///
/// The `phi` tensors (prototypes and head parameters) come first and occupy
/// `0..phi_len`; backbone tensors follow. Biases are stored as `rows × 1`.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamIndex {
    pub entries: Vec<ParamEntry>,
    pub phi_len: usize,
}

impl ParamIndex {
    pub fn total_len(&self) -> usize {
        self.entries.last().map_or(0, |e| e.offset + e.len())
    }

    pub fn get(&self, name: &str) -> Option<&ParamEntry> {
        self.entries.iter().find(|e| e.name == name)
    }

    /// Layout of a model with the given sizes, base or adapted stage.
    pub fn for_stage(cfg: &ModelConfig, adapted: bool) -> Self {
        let mut idx = ParamIndex::default();
        idx.push("base_prototypes".into(), cfg.k_base, cfg.feat_dim);
        if adapted {
            idx.push("novel_prototypes".into(), cfg.k_novel, cfg.feat_dim);
            idx.push_dims("base_head", &cfg.base_head_dims());
            idx.push_dims("novel_head", &cfg.novel_head_dims());
        } else {
            idx.push_dims("shared_head", &cfg.shared_head_dims());
        }
        idx.phi_len = idx.total_len();
        idx.push_dims("backbone", &cfg.backbone_dims());
        idx
    }

    fn push(&mut self, name: String, rows: usize, cols: usize) {
        let offset = self.total_len();
        self.entries.push(ParamEntry {
            name,
            offset,
            rows,
            cols,
        });
    }

    fn push_dims(&mut self, prefix: &str, dims: &[usize]) {
        for (l, w) in dims.windows(2).enumerate() {
            self.push(format!("{prefix}.{l}.weight"), w[1], w[0]);
            self.push(format!("{prefix}.{l}.bias"), w[1], 1);
        }
    }
}

#[derive(Debug, Clone)]
pub struct Model {
    config: ModelConfig,
    backbone: Mlp,
    base: PrototypeSet,
    stage: Stage,
    version: u64,
}

impl PartialEq for Model {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.backbone == other.backbone
            && self.base == other.base
            && self.stage == other.stage
    }
}

/// Everything the reverse pass needs from one forward pass.
#[derive(Debug, Clone)]
pub struct ModelTape {
    version: u64,
    backbone: MlpTape,
    features: Mat,
    base_hat: Mat,
    base_coeffs: Mat,
    heads: HeadTape,
}

#[derive(Debug, Clone)]
enum HeadTape {
    Base {
        shared: MlpTape,
    },
    Adapted {
        r0: Mat,
        novel_hat: Mat,
        novel_coeffs: Mat,
        tapes: Phase2HeadTapes,
    },
}

/// Gradient of a scalar loss w.r.t. every parameter, flattened in
/// [`ParamIndex`] order, plus the gradient w.r.t. the input features.
#[derive(Debug, Clone)]
pub struct ModelGrads {
    pub flat: Vec<f64>,
    pub input: Mat,
}

fn random_unit_rows<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Mat {
    let mut m = Mat::zeros(rows, cols);
    for i in 0..rows {
        let r = m.row_mut(i);
        loop {
            r.iter_mut().for_each(|v| *v = StandardNormal.sample(rng));
            let n = crate::linalg::norm(r);
            if n > 1e-8 {
                r.iter_mut().for_each(|v| *v /= n);
                break;
            }
        }
    }
    m
}

impl Model {
    /// Fresh base-stage model: Glorot MLPs, base prototypes uniform on the
    /// unit sphere.
    pub fn new_base<R: Rng + ?Sized>(config: ModelConfig, rng: &mut R) -> Self {
        let backbone = Mlp::new(&config.backbone_dims(), rng);
        let base = PrototypeSet::new(
            random_unit_rows(config.k_base, config.feat_dim, rng),
            PrototypeRole::Base,
        );
        let shared_head = Mlp::new(&config.shared_head_dims(), rng);
        Self {
            config,
            backbone,
            base,
            stage: Stage::Base { shared_head },
            version: next_version(),
        }
    }

    /// All-zero base-stage model (prototypes still need nonzero rows to be
    /// normalizable, so they are set to unit axes).
    pub fn zeros(config: ModelConfig) -> Self {
        let mut protos = Mat::zeros(config.k_base, config.feat_dim);
        for k in 0..config.k_base {
            protos[(k, k % config.feat_dim)] = 1.0;
        }
        Self {
            config,
            backbone: Mlp::zeros(&config.backbone_dims()),
            base: PrototypeSet::new(protos, PrototypeRole::Base),
            stage: Stage::Base {
                shared_head: Mlp::zeros(&config.shared_head_dims()),
            },
            version: next_version(),
        }
    }

    pub fn from_parts(config: ModelConfig, backbone: Mlp, base: PrototypeSet, stage: Stage) -> Result<Self> {
        check_dim("backbone input", config.f_in, backbone.in_dim())?;
        check_dim("backbone output", config.feat_dim, backbone.out_dim())?;
        check_dim("base prototype count", config.k_base, base.len())?;
        check_dim("base prototype width", config.feat_dim, base.dim())?;
        match &stage {
            Stage::Base { shared_head } => {
                check_dim("shared head dims", 3, shared_head.dims().len())?;
                check_dim("shared head input", 2 * config.feat_dim, shared_head.in_dim())?;
                check_dim("shared head output", config.k_base + 1, shared_head.out_dim())?;
            }
            Stage::Adapted {
                novel,
                base_head,
                novel_head,
            } => {
                check_dim("novel prototype count", config.k_novel, novel.len())?;
                check_dim("novel prototype width", config.feat_dim, novel.dim())?;
                check_dim("h_b input", config.feat_dim, base_head.in_dim())?;
                check_dim("h_b output", config.k_base, base_head.out_dim())?;
                check_dim("h_n input", 2 * config.feat_dim, novel_head.in_dim())?;
                check_dim("h_n output", config.k_novel + 1, novel_head.out_dim())?;
            }
        }
        Ok(Self {
            config,
            backbone,
            base,
            stage,
            version: next_version(),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn backbone(&self) -> &Mlp {
        &self.backbone
    }

    pub fn base_prototypes(&self) -> &PrototypeSet {
        &self.base
    }

    pub fn stage(&self) -> &Stage {
        &self.stage
    }

    pub fn is_adapted(&self) -> bool {
        matches!(self.stage, Stage::Adapted { .. })
    }

    /// Number of logits the model emits.
    pub fn num_outputs(&self) -> usize {
        match self.stage {
            Stage::Base { .. } => 1 + self.config.k_base,
            Stage::Adapted { .. } => self.config.num_classes(),
        }
    }

    /// Base prototypes followed by novel prototypes (if any), raw rows.
    pub fn all_prototypes(&self) -> Mat {
        match &self.stage {
            Stage::Base { .. } => self.base.raw.clone(),
            Stage::Adapted { novel, .. } => self.base.raw.vcat(&novel.raw).expect("same width"),
        }
    }

    /// Switches to the adapted stage.
    ///
    /// `h_b` inherits the `f_b` column block and the base-class rows of the
    /// shared head (see [`carry_over_pairs`]); `h_n` is freshly initialized.
    pub fn into_adapted<R: Rng + ?Sized>(self, novel_raw: Mat, rng: &mut R) -> Result<Self> {
        let cfg = self.config;
        check_dim("novel prototype count", cfg.k_novel, novel_raw.rows())?;
        check_dim("novel prototype width", cfg.feat_dim, novel_raw.cols())?;
        let Stage::Base { .. } = &self.stage else {
            return Err(Error::Stage("into_adapted requires a base-stage model"));
        };
        let (p1_flat, p1_index) = self.flatten_all();
        let mut adapted = Model {
            config: cfg,
            backbone: self.backbone,
            base: self.base,
            stage: Stage::Adapted {
                novel: PrototypeSet::new(novel_raw, PrototypeRole::Novel),
                base_head: Mlp::zeros(&cfg.base_head_dims()),
                novel_head: Mlp::new(&cfg.novel_head_dims(), rng),
            },
            version: next_version(),
        };
        let (mut p2_flat, p2_index) = adapted.flatten_all();
        for (src, dst) in carry_over_pairs(&p1_index, &p2_index, &cfg)? {
            p2_flat[dst] = p1_flat[src];
        }
        adapted.scatter_all(&p2_flat, &p2_index)?;
        Ok(adapted)
    }

    pub fn param_index(&self) -> ParamIndex {
        ParamIndex::for_stage(&self.config, self.is_adapted())
    }

    pub fn flatten_all(&self) -> (Vec<f64>, ParamIndex) {
        let index = self.param_index();
        let mut flat = Vec::with_capacity(index.total_len());
        flat.extend_from_slice(self.base.raw.as_slice());
        match &self.stage {
            Stage::Base { shared_head } => shared_head.flatten_into(&mut flat),
            Stage::Adapted {
                novel,
                base_head,
                novel_head,
            } => {
                flat.extend_from_slice(novel.raw.as_slice());
                base_head.flatten_into(&mut flat);
                novel_head.flatten_into(&mut flat);
            }
        }
        self.backbone.flatten_into(&mut flat);
        debug_assert_eq!(flat.len(), index.total_len());
        (flat, index)
    }

    pub fn scatter_all(&mut self, flat: &[f64], index: &ParamIndex) -> Result<()> {
        if *index != self.param_index() {
            return Err(Error::Format("parameter index does not match model topology".into()));
        }
        check_dim("scatter_all length", index.total_len(), flat.len())?;
        let mut at = self.base.raw.as_slice().len();
        self.base.raw.as_mut_slice().copy_from_slice(&flat[..at]);
        match &mut self.stage {
            Stage::Base { shared_head } => at += shared_head.scatter_from(&flat[at..])?,
            Stage::Adapted {
                novel,
                base_head,
                novel_head,
            } => {
                let n = novel.raw.as_slice().len();
                novel.raw.as_mut_slice().copy_from_slice(&flat[at..at + n]);
                at += n;
                at += base_head.scatter_from(&flat[at..])?;
                at += novel_head.scatter_from(&flat[at..])?;
            }
        }
        at += self.backbone.scatter_from(&flat[at..])?;
        debug_assert_eq!(at, flat.len());
        self.version = next_version();
        Ok(())
    }

    /// The `phi` slice: prototypes and head parameters.
    pub fn flatten_phi(&self) -> (Vec<f64>, ParamIndex) {
        let (mut flat, index) = self.flatten_all();
        flat.truncate(index.phi_len);
        (flat, index)
    }

    pub fn scatter_phi(&mut self, phi: &[f64], index: &ParamIndex) -> Result<()> {
        check_dim("scatter_phi length", index.phi_len, phi.len())?;
        let (mut flat, _) = self.flatten_all();
        flat[..phi.len()].copy_from_slice(phi);
        self.scatter_all(&flat, index)
    }

    /// Backbone features `f_θ(x)` for each input row.
    pub fn features(&self, feats: &Mat) -> Result<Mat> {
        Ok(self.backbone.forward(feats)?.0)
    }

    /// Hierarchical decomposition of the backbone features.
    pub fn decompose(&self, feats: &Mat) -> Result<Decomposition> {
        let f = self.features(feats)?;
        let base = project_onto(&f, &self.base.normalized()?)?;
        let (f_n, r1) = match &self.stage {
            Stage::Base { .. } => (None, None),
            Stage::Adapted { novel, .. } => {
                let p = project_onto(&base.resid, &novel.normalized()?)?;
                (Some(p.proj), Some(p.resid))
            }
        };
        Ok(Decomposition {
            f_b: base.proj,
            r0: base.resid,
            f_n,
            r1,
        })
    }

    pub fn forward(&self, feats: &Mat) -> Result<(Mat, ModelTape)> {
        let (features, backbone) = self.backbone.forward(feats)?;
        let base_hat = self.base.normalized()?;
        let base = project_onto(&features, &base_hat)?;
        let (logits, heads) = match &self.stage {
            Stage::Base { shared_head } => {
                let (z, shared) = phase1_logits(&base.proj, &base.resid, shared_head)?;
                (z, HeadTape::Base { shared })
            }
            Stage::Adapted {
                novel,
                base_head,
                novel_head,
            } => {
                let novel_hat = novel.normalized()?;
                let nov = project_onto(&base.resid, &novel_hat)?;
                let (z, tapes) = phase2_logits(&base.proj, &nov.proj, &nov.resid, base_head, novel_head)?;
                (
                    z,
                    HeadTape::Adapted {
                        r0: base.resid,
                        novel_hat,
                        novel_coeffs: nov.coeffs,
                        tapes,
                    },
                )
            }
        };
        Ok((
            logits,
            ModelTape {
                version: self.version,
                backbone,
                features,
                base_hat,
                base_coeffs: base.coeffs,
                heads,
            },
        ))
    }

    pub fn backward(&self, tape: &ModelTape, d_logits: &Mat) -> Result<ModelGrads> {
        if tape.version != self.version {
            return Err(Error::StaleTape);
        }
        check_dim("backward logits width", self.num_outputs(), d_logits.cols())?;
        let c = self.config.feat_dim;
        let mut flat = Vec::with_capacity(self.param_index().total_len());
        let (g_base_hat, g_features, head_grads) = match (&self.stage, &tape.heads) {
            (Stage::Base { shared_head }, HeadTape::Base { shared }) => {
                let hg = shared_head.backward(shared, d_logits)?;
                let (g_fb, g_r0) = hg.input.hsplit(c);
                let (g_f, g_hat) =
                    project_onto_backward(&tape.features, &tape.base_hat, &tape.base_coeffs, &g_fb, &g_r0)?;
                let mut heads = Vec::new();
                hg.flatten_into(&mut heads);
                (g_hat, g_f, heads)
            }
            (
                Stage::Adapted {
                    novel,
                    base_head,
                    novel_head,
                },
                HeadTape::Adapted {
                    r0,
                    novel_hat,
                    novel_coeffs,
                    tapes,
                },
            ) => {
                let (d_hb, d_hn) = phase2_split_grad(d_logits, self.config.k_base);
                let gb = base_head.backward(&tapes.base, &d_hb)?;
                let gn = novel_head.backward(&tapes.novel, &d_hn)?;
                let (g_fn, g_r1) = gn.input.hsplit(c);
                let (g_r0, g_novel_hat) = project_onto_backward(r0, novel_hat, novel_coeffs, &g_fn, &g_r1)?;
                let (g_f, g_base_hat) =
                    project_onto_backward(&tape.features, &tape.base_hat, &tape.base_coeffs, &gb.input, &g_r0)?;
                let g_novel = normalize_rows_backward(&novel.raw, novel_hat, &g_novel_hat);
                let mut heads = g_novel.into_vec();
                gb.flatten_into(&mut heads);
                gn.flatten_into(&mut heads);
                (g_base_hat, g_f, heads)
            }
            _ => return Err(Error::StaleTape),
        };
        let g_base = normalize_rows_backward(&self.base.raw, &tape.base_hat, &g_base_hat);
        flat.extend_from_slice(g_base.as_slice());
        flat.extend_from_slice(&head_grads);
        let gbb = self.backbone.backward(&tape.backbone, &g_features)?;
        gbb.flatten_into(&mut flat);
        Ok(ModelGrads {
            flat,
            input: gbb.input,
        })
    }
}

/// Index pairs `(base-stage flat index, adapted-stage flat index)` for the
/// parameters that continue from base pretraining into adaptation: the base
/// prototypes, the backbone, the `f_b` input columns and hidden bias of the
/// shared head's first layer (→ `h_b` layer 0), and the base-class rows of
/// its output layer (→ `h_b` layer 1).
pub fn carry_over_pairs(base_index: &ParamIndex, adapted_index: &ParamIndex, cfg: &ModelConfig) -> Result<Vec<(usize, usize)>> {
    let get = |idx: &ParamIndex, name: &str| -> Result<ParamEntry> {
        idx.get(name)
            .cloned()
            .ok_or_else(|| Error::Format(format!("missing parameter tensor {name}")))
    };
    let mut pairs = Vec::new();
    let same = |a: &ParamEntry, b: &ParamEntry, pairs: &mut Vec<(usize, usize)>| {
        pairs.extend(a.range().zip(b.range()));
    };
    same(&get(base_index, "base_prototypes")?, &get(adapted_index, "base_prototypes")?, &mut pairs);
    for e in base_index.entries.iter().filter(|e| e.name.starts_with("backbone.")) {
        same(e, &get(adapted_index, &e.name)?, &mut pairs);
    }

    let c = cfg.feat_dim;
    let sw0 = get(base_index, "shared_head.0.weight")?;
    let bw0 = get(adapted_index, "base_head.0.weight")?;
    for h in 0..bw0.rows {
        for j in 0..c {
            pairs.push((sw0.offset + h * sw0.cols + j, bw0.offset + h * bw0.cols + j));
        }
    }
    same(&get(base_index, "shared_head.0.bias")?, &get(adapted_index, "base_head.0.bias")?, &mut pairs);
    let sw1 = get(base_index, "shared_head.1.weight")?;
    let bw1 = get(adapted_index, "base_head.1.weight")?;
    let sb1 = get(base_index, "shared_head.1.bias")?;
    let bb1 = get(adapted_index, "base_head.1.bias")?;
    for k in 0..cfg.k_base {
        // shared head row 0 is the background logit
        for h in 0..bw1.cols {
            pairs.push((sw1.offset + (k + 1) * sw1.cols + h, bw1.offset + k * bw1.cols + h));
        }
        pairs.push((sb1.offset + k + 1, bb1.offset + k));
    }
    Ok(pairs)
}
