//! Synthetic hierarchical pair data.
//!
//! A concept tree carries one prototype vector per node; child prototypes are
//! the parent prototype plus a Gaussian offset whose scale halves per level,
//! so the data has an intrinsic tree metric. Each record pairs a "generic"
//! text feature (the prototype of a uniformly chosen ancestor-or-self of a
//! leaf) with a "specific" image feature (the leaf prototype); both sides
//! share one per-record noise vector, which keeps the positive pair
//! identifiable among same-leaf records while leaving the hierarchy intact.
//! Everything is a pure function of (spec, seed).

use std::fmt::Write as _;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fsutil::atomic_write;

/// Shape and noise parameters of the synthetic hierarchy.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HierarchySpec {
    /// Tree levels including the root; leaves sit at level `depth - 1`.
    pub depth: usize,
    /// Children per internal node.
    pub branching: usize,
    /// Raw feature dimension of prototypes and records.
    pub feature_dim: usize,
    /// Standard deviation of the shared within-record perturbation.
    pub noise_sigma: f64,
    /// Records generated per leaf.
    pub pairs_per_leaf: usize,
    pub seed: u64,
}

impl Default for HierarchySpec {
    fn default() -> Self {
        HierarchySpec {
            depth: 3,
            branching: 4,
            feature_dim: 32,
            noise_sigma: 0.1,
            pairs_per_leaf: 10,
            seed: 42,
        }
    }
}

impl HierarchySpec {
    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::Config(format!("depth must be >= 2, got {}", self.depth)));
        }
        if self.branching < 2 {
            return Err(Error::Config(format!(
                "branching must be >= 2, got {}",
                self.branching
            )));
        }
        if self.feature_dim == 0 {
            return Err(Error::Config("feature_dim must be >= 1".into()));
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::Config(format!(
                "noise_sigma must be >= 0, got {}",
                self.noise_sigma
            )));
        }
        if self.pairs_per_leaf == 0 {
            return Err(Error::Config("pairs_per_leaf must be >= 1".into()));
        }
        Ok(())
    }

    pub fn leaf_count(&self) -> usize {
        self.branching.pow(self.depth as u32 - 1)
    }
}

/// One node of the concept tree.
#[derive(Clone, Debug)]
pub struct ConceptNode {
    pub id: usize,
    pub parent: Option<usize>,
    /// 0 for the root.
    pub level: usize,
    pub prototype: Vec<f64>,
}

/// Complete concept tree in breadth-first order.
#[derive(Clone, Debug)]
pub struct ConceptTree {
    pub nodes: Vec<ConceptNode>,
    pub leaves: Vec<usize>,
    pub feature_dim: usize,
}

impl ConceptTree {
    /// Node ids on the path root -> ... -> `node`, inclusive.
    pub fn path_to_root(&self, node: usize) -> Vec<usize> {
        let mut path = vec![node];
        let mut cur = node;
        while let Some(p) = self.nodes[cur].parent {
            path.push(p);
            cur = p;
        }
        path.reverse();
        path
    }
}

/// Grow the prototype tree. Offset scale at level L (children of level L-1)
/// is `0.5^(L-1)`, so siblings separate less the deeper they sit.
pub fn generate_tree(spec: &HierarchySpec) -> Result<ConceptTree> {
    spec.validate()?;
    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let f = spec.feature_dim;

    let root_proto: Vec<f64> = (0..f).map(|_| normal.sample(&mut rng)).collect();
    let mut nodes = vec![ConceptNode { id: 0, parent: None, level: 0, prototype: root_proto }];
    let mut frontier = vec![0usize];
    for level in 1..spec.depth {
        let scale = 0.5_f64.powi(level as i32 - 1);
        let mut next = Vec::with_capacity(frontier.len() * spec.branching);
        for &parent in &frontier {
            for _ in 0..spec.branching {
                let id = nodes.len();
                let prototype: Vec<f64> = nodes[parent]
                    .prototype
                    .iter()
                    .map(|&p| p + scale * normal.sample(&mut rng))
                    .collect();
                nodes.push(ConceptNode { id, parent: Some(parent), level, prototype });
                next.push(id);
            }
        }
        frontier = next;
    }
    Ok(ConceptTree { nodes, leaves: frontier, feature_dim: f })
}

/// One (text, image) record with its hierarchy labels.
#[derive(Clone, Debug, PartialEq)]
pub struct PairRecord {
    pub text: Vec<f64>,
    pub image: Vec<f64>,
    pub leaf_id: usize,
    /// Level of the node the text feature was drawn from (0 = root).
    pub ancestor_level: usize,
    /// Node ids root -> leaf; empty for records read back from disk.
    pub ancestor_path: Vec<usize>,
}

/// A full dataset of paired records.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct PairDataset {
    pub records: Vec<PairRecord>,
    pub feature_dim: usize,
}

impl PairDataset {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Distinct leaf ids in first-appearance order.
    pub fn leaf_ids(&self) -> Vec<usize> {
        let mut out = Vec::new();
        for r in &self.records {
            if !out.contains(&r.leaf_id) {
                out.push(r.leaf_id);
            }
        }
        out
    }
}

/// Sample `pairs_per_leaf` records per leaf. The text side is the prototype
/// of a uniformly chosen node on the leaf's root path (leaf included); both
/// sides share one noise draw per record.
pub fn sample_pairs(tree: &ConceptTree, spec: &HierarchySpec) -> Result<PairDataset> {
    spec.validate()?;
    // Offset the stream so pair sampling does not replay tree randomness.
    let mut rng = ChaCha12Rng::seed_from_u64(spec.seed.wrapping_add(0x9E3779B97F4A7C15));
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let f = spec.feature_dim;
    let mut records = Vec::with_capacity(tree.leaves.len() * spec.pairs_per_leaf);
    for &leaf in &tree.leaves {
        let path = tree.path_to_root(leaf);
        for _ in 0..spec.pairs_per_leaf {
            let pick = rng.gen_range(0..path.len());
            let ancestor = path[pick];
            let noise: Vec<f64> = (0..f)
                .map(|_| spec.noise_sigma * normal.sample(&mut rng))
                .collect();
            let text: Vec<f64> = tree.nodes[ancestor]
                .prototype
                .iter()
                .zip(&noise)
                .map(|(p, e)| p + e)
                .collect();
            let image: Vec<f64> = tree.nodes[leaf]
                .prototype
                .iter()
                .zip(&noise)
                .map(|(p, e)| p + e)
                .collect();
            records.push(PairRecord {
                text,
                image,
                leaf_id: leaf,
                ancestor_level: tree.nodes[ancestor].level,
                ancestor_path: path.clone(),
            });
        }
    }
    Ok(PairDataset { records, feature_dim: f })
}

/// Generate a dataset in one shot.
pub fn synthesize(spec: &HierarchySpec) -> Result<PairDataset> {
    let tree = generate_tree(spec)?;
    sample_pairs(&tree, spec)
}

/// Hold out whole leaves: every record of an evaluation leaf goes to the
/// evaluation split, so evaluation leaves are never seen in training.
pub fn split(ds: &PairDataset, eval_fraction: f64, seed: u64) -> Result<(PairDataset, PairDataset)> {
    if !(eval_fraction > 0.0 && eval_fraction < 1.0) {
        return Err(Error::Split(format!(
            "eval_fraction must be in (0, 1), got {eval_fraction}"
        )));
    }
    let leaves = ds.leaf_ids();
    let n_eval = (eval_fraction * leaves.len() as f64).floor() as usize;
    if n_eval >= leaves.len() {
        return Err(Error::Split(format!(
            "holding out {n_eval} of {} leaves leaves no training data",
            leaves.len()
        )));
    }
    let mut shuffled = leaves.clone();
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    // Fisher-Yates, explicit so the shuffle is stable across rand versions.
    for i in (1..shuffled.len()).rev() {
        let j = rng.gen_range(0..=i);
        shuffled.swap(i, j);
    }
    let eval_set: Vec<usize> = shuffled[..n_eval].to_vec();
    let mut train = PairDataset { records: Vec::new(), feature_dim: ds.feature_dim };
    let mut eval = PairDataset { records: Vec::new(), feature_dim: ds.feature_dim };
    for r in &ds.records {
        if eval_set.contains(&r.leaf_id) {
            eval.records.push(r.clone());
        } else {
            train.records.push(r.clone());
        }
    }
    Ok((train, eval))
}

// ---------------------------------------------------------------------------
// Columnar text format: one header row, then one record per line as
// leaf_id, ancestor_level, text features, image features.
// ---------------------------------------------------------------------------

/// Render a dataset in the columnar text format.
pub fn to_text(ds: &PairDataset) -> String {
    let f = ds.feature_dim;
    let mut out = String::new();
    out.push_str("leaf_id,ancestor_level");
    for j in 0..f {
        let _ = write!(out, ",text_{j}");
    }
    for j in 0..f {
        let _ = write!(out, ",image_{j}");
    }
    out.push('\n');
    for r in &ds.records {
        let _ = write!(out, "{},{}", r.leaf_id, r.ancestor_level);
        for v in &r.text {
            let _ = write!(out, ",{v}");
        }
        for v in &r.image {
            let _ = write!(out, ",{v}");
        }
        out.push('\n');
    }
    out
}

/// Parse the columnar text format. Ancestor paths are not stored on disk and
/// come back empty; regenerate from the sidecar spec when they matter.
pub fn from_text(text: &str) -> Result<PairDataset> {
    let mut lines = text.lines();
    let header = lines
        .next()
        .ok_or_else(|| Error::Config("dataset file is empty".into()))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 4 || cols[0] != "leaf_id" || cols[1] != "ancestor_level" {
        return Err(Error::Config(format!("unrecognised dataset header: {header}")));
    }
    let f = cols.iter().filter(|c| c.starts_with("text_")).count();
    if f == 0 || cols.len() != 2 + 2 * f {
        return Err(Error::Config(format!(
            "dataset header implies inconsistent feature columns: {header}"
        )));
    }
    let mut records = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 2 + 2 * f {
            return Err(Error::Config(format!(
                "line {}: expected {} fields, got {}",
                lineno + 2,
                2 + 2 * f,
                fields.len()
            )));
        }
        let parse_usize = |s: &str, what: &str| -> Result<usize> {
            s.parse()
                .map_err(|_| Error::Config(format!("line {}: bad {what}: {s}", lineno + 2)))
        };
        let parse_f64 = |s: &str| -> Result<f64> {
            let v: f64 = s
                .parse()
                .map_err(|_| Error::Config(format!("line {}: bad float: {s}", lineno + 2)))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::Domain(format!("line {}: non-finite feature {v}", lineno + 2)))
            }
        };
        let leaf_id = parse_usize(fields[0], "leaf_id")?;
        let ancestor_level = parse_usize(fields[1], "ancestor_level")?;
        let text: Vec<f64> = fields[2..2 + f]
            .iter()
            .map(|s| parse_f64(s))
            .collect::<Result<_>>()?;
        let image: Vec<f64> = fields[2 + f..]
            .iter()
            .map(|s| parse_f64(s))
            .collect::<Result<_>>()?;
        records.push(PairRecord {
            text,
            image,
            leaf_id,
            ancestor_level,
            ancestor_path: Vec::new(),
        });
    }
    Ok(PairDataset { records, feature_dim: f })
}

/// Write a dataset atomically.
pub fn save_dataset(ds: &PairDataset, path: &Path) -> Result<()> {
    atomic_write(path, to_text(ds).as_bytes())
}

/// Read a dataset from disk.
pub fn load_dataset(path: &Path) -> Result<PairDataset> {
    let text = std::fs::read_to_string(path)?;
    from_text(&text)
}
