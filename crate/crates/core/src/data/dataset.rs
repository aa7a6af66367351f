//! Reproducible synthetic corpora and their text manifests.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::preprocess::preprocess;
use super::render::{render_word, RenderMeta, RenderOptions};
use super::transform::Transform;
use super::{pgm, Image};
use crate::config::Config;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// One manifest line: the image is regenerated from `(label, seed)`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Record {
    pub index: usize,
    pub label: String,
    pub seed: u64,
}

/// A preprocessed sample.
#[derive(Clone, Debug)]
pub struct SampleRecord {
    pub image: Tensor<f32>,
    pub label: String,
    pub seed: u64,
    pub meta: RenderMeta,
}

/// What to draw labels from and how to render them.
#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSpec {
    pub alphabet: Vec<char>,
    pub min_len: usize,
    pub max_len: usize,
    pub render: RenderOptions,
}

impl CorpusSpec {
    pub fn from_config(cfg: &Config) -> Self {
        Self {
            alphabet: cfg.alphabet.chars().collect(),
            min_len: cfg.min_label_len,
            max_len: cfg.max_label_len,
            render: RenderOptions {
                noise: cfg.noise,
                max_shear_deg: cfg.max_shear_deg,
                scale: None,
                allow_empty: false,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub records: Vec<Record>,
    pub render: RenderOptions,
}

/// Seed offset separating a held-out corpus from the training corpus.
pub const HELD_OUT_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

impl Dataset {
    /// `n` records drawn from `master_seed`; the same arguments always give
    /// the same `(label, seed)` sequence.
    pub fn generate(spec: &CorpusSpec, n: usize, master_seed: u64) -> Result<Self> {
        if spec.alphabet.is_empty() || spec.min_len == 0 || spec.min_len > spec.max_len {
            return Err(Error::Config("empty alphabet or label length range".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
        let records = (0..n)
            .map(|index| {
                let len = rng.gen_range(spec.min_len..=spec.max_len);
                let label = (0..len).map(|_| *spec.alphabet.choose(&mut rng).expect("non-empty")).collect();
                Record { index, label, seed: rng.gen() }
            })
            .collect();
        Ok(Self { records, render: spec.render })
    }

    pub fn training(cfg: &Config) -> Result<Self> {
        Self::generate(&CorpusSpec::from_config(cfg), cfg.num_samples, cfg.seed)
    }

    pub fn held_out(cfg: &Config, n: usize) -> Result<Self> {
        Self::generate(&CorpusSpec::from_config(cfg), n, cfg.seed ^ HELD_OUT_STREAM)
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn raw(&self, i: usize) -> Result<(Image, RenderMeta)> {
        let r = &self.records[i];
        render_word(&r.label, r.seed, &self.render)
    }

    /// Rendered, transformed and preprocessed sample `i`.
    pub fn sample(&self, i: usize, transform: Transform) -> Result<SampleRecord> {
        let r = &self.records[i];
        let (raw, meta) = self.raw(i)?;
        let img = transform.apply(&raw, r.seed.rotate_left(17) ^ 0x5a5a);
        Ok(SampleRecord { image: preprocess(&img), label: r.label.clone(), seed: r.seed, meta })
    }

    /// Stacks samples `idx` into an `N×3×32×128` batch.
    pub fn batch(&self, idx: &[usize], transform: Transform) -> Result<(Tensor<f32>, Vec<String>)> {
        let mut data = Vec::new();
        let mut labels = Vec::with_capacity(idx.len());
        for &i in idx {
            let s = self.sample(i, transform)?;
            data.extend_from_slice(s.image.data());
            labels.push(s.label);
        }
        let mut shape = vec![idx.len()];
        shape.extend_from_slice(&[3, super::preprocess::HEIGHT, super::preprocess::WIDTH]);
        Ok((Tensor::new(&shape, data)?, labels))
    }

    pub fn manifest(&self) -> String {
        let mut out = String::new();
        for r in &self.records {
            writeln!(out, "{}\t{}\t{}", r.index, r.label, r.seed).expect("string write");
        }
        out
    }

    pub fn parse_manifest(text: &str, render: RenderOptions) -> Result<Self> {
        let mut records = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let bad = |detail: &str| Error::Manifest { line: i + 1, detail: detail.into() };
            let mut fields = line.split('\t');
            let (Some(index), Some(label), Some(seed), None) =
                (fields.next(), fields.next(), fields.next(), fields.next())
            else {
                return Err(bad("expected index<TAB>label<TAB>seed"));
            };
            records.push(Record {
                index: index.parse().map_err(|_| bad("bad index"))?,
                label: label.to_string(),
                seed: seed.parse().map_err(|_| bad("bad seed"))?,
            });
        }
        Ok(Self { records, render })
    }

    pub fn write_manifest(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.manifest())?;
        Ok(())
    }

    pub fn read_manifest(path: &Path, render: RenderOptions) -> Result<Self> {
        Self::parse_manifest(&std::fs::read_to_string(path)?, render)
    }

    /// Writes `{index:06}.pgm` for every record into `dir`.
    pub fn export_pgm(&self, dir: &Path) -> Result<()> {
        for (i, r) in self.records.iter().enumerate() {
            let (img, _) = self.raw(i)?;
            pgm::write(&dir.join(format!("{:06}.pgm", r.index)), &img)?;
        }
        Ok(())
    }
}
