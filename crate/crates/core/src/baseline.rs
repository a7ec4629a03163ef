//! Random-forest pixel classifier: bootstrap trees with Gini splits.

use std::path::Path;

use rand::RngCore;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::PatchSample;
use crate::error::{Error, Result};
use crate::rng::{keyed_prng, uniform_below};

const FOREST_STREAM: u64 = 0xF0_4E57;
const SAMPLE_STREAM: u64 = 0x5A_3B1E;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForestConfig {
    pub n_trees: usize,
    pub max_depth: usize,
    pub min_leaf: usize,
    /// `None` means `ceil(sqrt(n_features))`.
    pub features_per_split: Option<usize>,
    pub seed: u64,
    pub max_samples_per_class: usize,
}

impl Default for ForestConfig {
    fn default() -> Self {
        Self {
            n_trees: 100,
            max_depth: 20,
            min_leaf: 5,
            features_per_split: None,
            seed: 0,
            max_samples_per_class: 200_000,
        }
    }
}

impl ForestConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_trees == 0 || self.max_depth == 0 || self.min_leaf == 0 {
            return Err(Error::invalid("forest counts must all be at least 1"));
        }
        if self.features_per_split == Some(0) || self.max_samples_per_class == 0 {
            return Err(Error::invalid("forest counts must all be at least 1"));
        }
        Ok(())
    }

    pub fn features_for(&self, n_features: usize) -> usize {
        self.features_per_split
            .unwrap_or_else(|| (n_features as f64).sqrt().ceil() as usize)
            .clamp(1, n_features)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Node {
    Split {
        feature: usize,
        threshold: f32,
        left: usize,
        right: usize,
    },
    Leaf {
        histogram: Vec<u32>,
    },
}

/// Binary tree; node 0 is the root. Samples with `x <= threshold` go left.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn leaf(&self, x: &[f32]) -> &[u32] {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                Node::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => i = if x[*feature] <= *threshold { *left } else { *right },
                Node::Leaf { histogram } => return histogram,
            }
        }
    }

    pub fn predict(&self, x: &[f32]) -> u8 {
        argmax_lowest(self.leaf(x)) as u8
    }
}

fn argmax_lowest<T: PartialOrd + Copy>(v: &[T]) -> usize {
    let mut best = 0;
    for (i, &c) in v.iter().enumerate() {
        if c > v[best] {
            best = i;
        }
    }
    best
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Forest {
    pub config: ForestConfig,
    pub n_features: usize,
    pub n_classes: usize,
    pub trees: Vec<Tree>,
}

/// Row-major training table.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Samples {
    pub n_features: usize,
    pub x: Vec<f32>,
    pub y: Vec<u8>,
}

impl Samples {
    pub fn new(n_features: usize) -> Self {
        Self {
            n_features,
            ..Self::default()
        }
    }

    pub fn push(&mut self, x: &[f32], y: u8) {
        debug_assert_eq!(x.len(), self.n_features);
        self.x.extend_from_slice(x);
        self.y.push(y);
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.x[i * self.n_features..(i + 1) * self.n_features]
    }
}

/// Labelled pixels from patches, class 0 excluded, at most `cap` per class
/// by seeded reservoir sampling.
pub fn pixel_samples(patches: &[PatchSample], cap: usize, seed: u64) -> Result<Samples> {
    let d = patches
        .first()
        .ok_or_else(|| Error::invalid("no patches to sample pixels from"))?
        .channels;
    let mut rng = keyed_prng(&[seed, SAMPLE_STREAM]);
    let mut seen = [0u64; 256];
    let mut reservoir: Vec<Vec<(usize, usize)>> = vec![Vec::new(); 256];
    for (pi, p) in patches.iter().enumerate() {
        if p.channels != d {
            return Err(Error::Shape("patches disagree on channel count".into()));
        }
        for (i, &l) in p.labels.iter().enumerate() {
            if l == 0 {
                continue;
            }
            let k = l as usize;
            seen[k] += 1;
            if reservoir[k].len() < cap {
                reservoir[k].push((pi, i));
            } else {
                let j = uniform_below(&mut rng, seen[k]) as usize;
                if j < cap {
                    reservoir[k][j] = (pi, i);
                }
            }
        }
    }
    let mut out = Samples::new(d);
    for (k, picks) in reservoir.iter().enumerate() {
        for &(pi, i) in picks {
            out.push(&patches[pi].pixel(i), k as u8);
        }
    }
    Ok(out)
}

struct Builder<'a> {
    data: &'a Samples,
    cfg: &'a ForestConfig,
    n_classes: usize,
    mtry: usize,
    nodes: Vec<Node>,
    order: Vec<(f32, u8)>,
}

impl Builder<'_> {
    fn histogram(&self, idx: &[usize]) -> Vec<u32> {
        let mut h = vec![0u32; self.n_classes];
        for &i in idx {
            h[self.data.y[i] as usize] += 1;
        }
        h
    }

    fn build(&mut self, idx: &mut [usize], depth: usize, rng: &mut dyn RngCore) -> usize {
        let hist = self.histogram(idx);
        let pure = hist.iter().filter(|&&c| c > 0).count() <= 1;
        let split = if pure || depth >= self.cfg.max_depth || idx.len() < 2 * self.cfg.min_leaf {
            None
        } else {
            self.best_split(idx, &hist, rng)
        };
        let Some((feature, threshold)) = split else {
            self.nodes.push(Node::Leaf { histogram: hist });
            return self.nodes.len() - 1;
        };
        let at = self.nodes.len();
        self.nodes.push(Node::Leaf { histogram: Vec::new() });
        let d = self.data.n_features;
        let x = &self.data.x;
        let mut lo = 0;
        for k in 0..idx.len() {
            if x[idx[k] * d + feature] <= threshold {
                idx.swap(lo, k);
                lo += 1;
            }
        }
        let (l, r) = idx.split_at_mut(lo);
        let left = self.build(l, depth + 1, rng);
        let right = self.build(r, depth + 1, rng);
        self.nodes[at] = Node::Split {
            feature,
            threshold,
            left,
            right,
        };
        at
    }

    /// Largest Gini decrease over `mtry` random features; children keep at
    /// least `min_leaf` samples.
    fn best_split(&mut self, idx: &[usize], hist: &[u32], rng: &mut dyn RngCore) -> Option<(usize, f32)> {
        let d = self.data.n_features;
        let n = idx.len() as f64;
        let mut feats: Vec<usize> = (0..d).collect();
        for i in 0..self.mtry {
            let j = i + uniform_below(rng, (d - i) as u64) as usize;
            feats.swap(i, j);
        }
        let parent_sq: f64 = hist.iter().map(|&c| (c as f64).powi(2)).sum();
        let parent = 1.0 - parent_sq / (n * n);
        let min_leaf = self.cfg.min_leaf;
        let mut best: Option<(f64, usize, f32)> = None;
        let mut left = vec![0u32; self.n_classes];
        for &f in &feats[..self.mtry] {
            self.order.clear();
            self.order
                .extend(idx.iter().map(|&i| (self.data.x[i * d + f], self.data.y[i])));
            self.order.sort_unstable_by(|a, b| a.0.total_cmp(&b.0));
            left.iter_mut().for_each(|c| *c = 0);
            // running sums of squared class counts on each side
            let mut l_sq = 0.0f64;
            let mut r_sq = parent_sq;
            for k in 0..self.order.len() - 1 {
                let c = self.order[k].1 as usize;
                let lc = left[c] as f64;
                let rc = (hist[c] - left[c]) as f64;
                l_sq += 2.0 * lc + 1.0;
                r_sq -= 2.0 * rc - 1.0;
                left[c] += 1;
                let (a, b) = (self.order[k].0, self.order[k + 1].0);
                let nl = k + 1;
                let nr = self.order.len() - nl;
                if a == b || nl < min_leaf || nr < min_leaf {
                    continue;
                }
                let (nl, nr) = (nl as f64, nr as f64);
                let child = (nl - l_sq / nl) / n + (nr - r_sq / nr) / n;
                let gain = parent - child;
                if best.is_none_or(|(g, _, _)| gain > g + 1e-12) {
                    let mut t = ((a as f64 + b as f64) / 2.0) as f32;
                    if t >= b {
                        t = a;
                    }
                    best = Some((gain, f, t));
                }
            }
        }
        best.map(|(_, f, t)| (f, t))
    }
}

impl Forest {
    pub fn fit(data: &Samples, cfg: &ForestConfig) -> Result<Forest> {
        cfg.validate()?;
        if data.n_features == 0 || data.x.len() != data.len() * data.n_features {
            return Err(Error::Shape("sample table is ragged".into()));
        }
        let mut present = [false; 256];
        for &y in &data.y {
            present[y as usize] = true;
        }
        if present.iter().filter(|&&p| p).count() < 2 {
            return Err(Error::invalid("random forest needs at least two classes"));
        }
        let n_classes = data.y.iter().copied().max().unwrap_or(0) as usize + 1;
        let mtry = cfg.features_for(data.n_features);
        let n = data.len();
        let trees = (0..cfg.n_trees)
            .into_par_iter()
            .map(|t| {
                let mut rng = keyed_prng(&[cfg.seed, FOREST_STREAM, t as u64]);
                let mut idx: Vec<usize> = (0..n).map(|_| uniform_below(&mut rng, n as u64) as usize).collect();
                let mut b = Builder {
                    data,
                    cfg,
                    n_classes,
                    mtry,
                    nodes: Vec::new(),
                    order: Vec::with_capacity(n),
                };
                b.build(&mut idx, 0, &mut rng);
                Tree { nodes: b.nodes }
            })
            .collect();
        Ok(Forest {
            config: cfg.clone(),
            n_features: data.n_features,
            n_classes,
            trees,
        })
    }

    /// Majority vote of per-tree leaf argmax; ties go to the lower class.
    /// A feature vector that is entirely 0 is a masked pixel and maps to 0.
    pub fn predict(&self, x: &[f32]) -> u8 {
        if x.iter().all(|&v| v == 0.0) {
            return 0;
        }
        let mut votes = vec![0u32; self.n_classes];
        for t in &self.trees {
            votes[t.predict(x) as usize] += 1;
        }
        argmax_lowest(&votes) as u8
    }

    pub fn predict_rows(&self, x: &[f32]) -> Result<Vec<u8>> {
        if x.len() % self.n_features != 0 {
            return Err(Error::Shape("row-major input is not a multiple of the feature count".into()));
        }
        Ok(x.par_chunks(self.n_features).map(|r| self.predict(r)).collect())
    }

    /// Per-pixel predictions for one patch.
    pub fn predict_patch(&self, p: &PatchSample) -> Result<Vec<u8>> {
        if p.channels != self.n_features {
            return Err(Error::Shape(format!(
                "forest expects {} features, patch has {}",
                self.n_features, p.channels
            )));
        }
        Ok((0..p.pixels())
            .into_par_iter()
            .map(|i| self.predict(&p.pixel(i)))
            .collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        serde_json::to_writer(std::io::BufWriter::new(f), self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Forest> {
        let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_reader(std::io::BufReader::new(f))?)
    }
}
