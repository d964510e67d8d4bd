//! Text checkpoints: model parameters plus an optional projection basis.
//!
//! ```text
//! hop-checkpoint 1
//! config <f_in> <backbone_hidden> <feat_dim> <head_hidden> <k_base> <k_novel>
//! stage base|adapted
//! tensors <count> <phi_len>
//! tensor <name> <rows> <cols>
//! <row values, space separated>          (rows lines)
//! ...
//! basis <d> <r>                          (optional)
//! <column values>                        (r lines of d values)
//! end
//! ```
//! Values use 17 significant digits, so a save/load cycle is bit-exact.

use std::fmt::Write as _;
use std::path::Path;

use anyhow::{anyhow, bail, ensure, Context, Result};
use hop_core::linalg::{Mat, OrthoBasis};
use hop_core::net::{Model, ModelConfig, ParamIndex};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub model: Model,
    pub basis: Option<OrthoBasis>,
}

fn push_row(out: &mut String, values: &[f64]) {
    for (i, v) in values.iter().enumerate() {
        if i > 0 {
            out.push(' ');
        }
        write!(out, "{v:.16e}").expect("writing to a String");
    }
    out.push('\n');
}

pub fn to_text(model: &Model, basis: Option<&OrthoBasis>) -> String {
    let c = model.config();
    let (flat, index) = model.flatten_all();
    let mut out = String::new();
    writeln!(out, "hop-checkpoint {FORMAT_VERSION}").unwrap();
    writeln!(
        out,
        "config {} {} {} {} {} {}",
        c.f_in, c.backbone_hidden, c.feat_dim, c.head_hidden, c.k_base, c.k_novel
    )
    .unwrap();
    writeln!(out, "stage {}", if model.is_adapted() { "adapted" } else { "base" }).unwrap();
    writeln!(out, "tensors {} {}", index.entries.len(), index.phi_len).unwrap();
    for e in &index.entries {
        writeln!(out, "tensor {} {} {}", e.name, e.rows, e.cols).unwrap();
        let values = &flat[e.range()];
        for r in 0..e.rows {
            push_row(&mut out, &values[r * e.cols..(r + 1) * e.cols]);
        }
    }
    if let Some(b) = basis {
        writeln!(out, "basis {} {}", b.dim(), b.rank()).unwrap();
        for col in b.columns() {
            push_row(&mut out, col);
        }
    }
    out.push_str("end\n");
    out
}

struct Lines<'a> {
    inner: std::iter::Enumerate<std::str::Lines<'a>>,
}

impl<'a> Lines<'a> {
    fn next(&mut self, what: &str) -> Result<(usize, &'a str)> {
        self.inner
            .next()
            .map(|(i, l)| (i + 1, l))
            .ok_or_else(|| anyhow!("checkpoint ends early: expected {what}"))
    }

    fn keyword(&mut self, key: &str) -> Result<(usize, Vec<&'a str>)> {
        let (n, line) = self.next(key)?;
        let mut parts = line.split_whitespace();
        ensure!(parts.next() == Some(key), "line {n}: expected `{key}`, found `{line}`");
        Ok((n, parts.collect()))
    }

    fn values(&mut self, count: usize, what: &str) -> Result<Vec<f64>> {
        let (n, line) = self.next(what)?;
        let v: Vec<f64> = line
            .split_whitespace()
            .map(str::parse)
            .collect::<Result<_, _>>()
            .with_context(|| format!("line {n}: bad number in {what}"))?;
        ensure!(v.len() == count, "line {n}: expected {count} values for {what}, found {}", v.len());
        Ok(v)
    }
}

fn nums(n: usize, parts: &[&str], count: usize) -> Result<Vec<usize>> {
    ensure!(parts.len() == count, "line {n}: expected {count} fields");
    parts
        .iter()
        .map(|p| p.parse().with_context(|| format!("line {n}: bad integer `{p}`")))
        .collect()
}

pub fn from_text(text: &str) -> Result<Checkpoint> {
    let mut lines = Lines {
        inner: text.lines().enumerate(),
    };
    let (n, v) = lines.keyword("hop-checkpoint")?;
    let version = nums(n, &v, 1)?[0];
    ensure!(
        version == FORMAT_VERSION as usize,
        "checkpoint format version {version} is not supported (expected {FORMAT_VERSION})"
    );
    let (n, v) = lines.keyword("config")?;
    let c = nums(n, &v, 6)?;
    let cfg = ModelConfig {
        f_in: c[0],
        backbone_hidden: c[1],
        feat_dim: c[2],
        head_hidden: c[3],
        k_base: c[4],
        k_novel: c[5],
    };
    let (n, v) = lines.keyword("stage")?;
    let adapted = match v.as_slice() {
        ["base"] => false,
        ["adapted"] => true,
        _ => bail!("line {n}: unknown stage"),
    };
    let expected = ParamIndex::for_stage(&cfg, adapted);
    let (n, v) = lines.keyword("tensors")?;
    let t = nums(n, &v, 2)?;
    ensure!(
        t[0] == expected.entries.len() && t[1] == expected.phi_len,
        "line {n}: tensor manifest does not match the model configuration"
    );
    let mut flat = Vec::with_capacity(expected.total_len());
    for e in &expected.entries {
        let (n, v) = lines.keyword("tensor")?;
        ensure!(v.len() == 3, "line {n}: malformed tensor header");
        ensure!(v[0] == e.name, "line {n}: expected tensor {}, found {}", e.name, v[0]);
        let dims = nums(n, &v[1..], 2)?;
        ensure!(dims == [e.rows, e.cols], "line {n}: tensor {} has wrong shape", e.name);
        for _ in 0..e.rows {
            flat.extend(lines.values(e.cols, &e.name)?);
        }
    }
    let mut model = Model::zeros(cfg);
    if adapted {
        // placeholder prototypes; every parameter is overwritten below
        model = model.into_adapted(Mat::zeros(cfg.k_novel, cfg.feat_dim), &mut ChaCha8Rng::seed_from_u64(0))?;
    }
    model.scatter_all(&flat, &expected)?;

    let (n, line) = lines.next("basis or end")?;
    let basis = if let Some(rest) = line.strip_prefix("basis ") {
        let parts: Vec<&str> = rest.split_whitespace().collect();
        let dr = nums(n, &parts, 2)?;
        let mut cols = Vec::with_capacity(dr[1]);
        for _ in 0..dr[1] {
            cols.push(lines.values(dr[0], "basis column")?);
        }
        lines.keyword("end")?;
        Some(OrthoBasis::from_orthonormal_columns(dr[0], cols, 1e-8)?)
    } else {
        ensure!(line.trim() == "end", "line {n}: expected `basis` or `end`");
        None
    };
    Ok(Checkpoint { model, basis })
}

pub fn save(path: &Path, model: &Model, basis: Option<&OrthoBasis>) -> Result<()> {
    std::fs::write(path, to_text(model, basis)).with_context(|| format!("writing checkpoint {}", path.display()))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    from_text(&text).with_context(|| format!("loading checkpoint {}", path.display()))
}
