//! Turning learned architecture weights into a discrete genotype.
//!
//! Per layer the cell kind with the larger fusion weight is kept. Inside
//! that cell every node keeps two incoming edges: each edge is scored by its
//! strongest non-discarding candidate weight, the two best-scoring edges
//! survive, and each keeps that strongest candidate. Ties go to the lower
//! input index, then to the earlier menu position.
//!
//! The zero op is never selected: it would contribute nothing to the node.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::search_space::{CellKind, OpFamily, OpName, MENU_LEN};

pub const GENOTYPE_SCHEMA_VERSION: u32 = 1;

/// Fixed architecture hyperparameters shared by the supernet, the genotype
/// and the compact network.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetShape {
    pub bands: usize,
    pub classes: usize,
    pub layers: usize,
    pub nodes: usize,
    pub width: usize,
}

impl NetShape {
    pub fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("bands", self.bands),
            ("classes", self.classes),
            ("layers", self.layers),
            ("nodes", self.nodes),
            ("width", self.width),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be positive"));
            }
        }
        Ok(())
    }

    /// Channels of a cell output: the concatenation of all nodes.
    pub fn cell_channels(&self) -> usize {
        self.nodes * self.width
    }
}

/// Architecture logits of one supercell, `[node][input][candidate]`.
pub type CellArch = Vec<Vec<Vec<f64>>>;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerArch {
    pub alpha: f64,
    pub beta: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spa: Option<CellArch>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub spe: Option<CellArch>,
}

impl LayerArch {
    pub fn cell(&self, kind: CellKind) -> Option<&CellArch> {
        match kind {
            CellKind::Spa => self.spa.as_ref(),
            CellKind::Spe => self.spe.as_ref(),
        }
    }
}

/// Every architecture parameter of a supernet.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchSnapshot {
    pub shape: NetShape,
    /// True when the values are already softmax weights rather than logits.
    #[serde(default)]
    pub normalized: bool,
    pub layers: Vec<LayerArch>,
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = logits.iter().map(|&x| (x - m).exp()).collect();
    let z: f64 = e.iter().sum();
    e.into_iter().map(|x| x / z).collect()
}

impl ArchSnapshot {
    /// The same snapshot with every edge and every (α, β) pair replaced by
    /// its softmax weights.
    pub fn normalized(&self) -> ArchSnapshot {
        if self.normalized {
            return self.clone();
        }
        let norm_cell = |c: &CellArch| -> CellArch {
            c.iter()
                .map(|node| node.iter().map(|edge| softmax(edge)).collect())
                .collect()
        };
        ArchSnapshot {
            shape: self.shape,
            normalized: true,
            layers: self
                .layers
                .iter()
                .map(|l| {
                    let ab = softmax(&[l.alpha, l.beta]);
                    LayerArch {
                        alpha: ab[0],
                        beta: ab[1],
                        spa: l.spa.as_ref().map(norm_cell),
                        spe: l.spe.as_ref().map(norm_cell),
                    }
                })
                .collect(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EdgeGene {
    /// 0 and 1 are the cell inputs, `2 + k` is node `k`.
    pub input: usize,
    pub op: OpName,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LayerGene {
    pub cell: CellKind,
    /// Two edges per node, sorted by input index.
    pub nodes: Vec<Vec<EdgeGene>>,
}

/// A discrete architecture.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Genotype {
    pub schema_version: u32,
    pub shape: NetShape,
    pub layers: Vec<LayerGene>,
}

impl Genotype {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::Contract(format!("invalid genotype: {msg}")));
        if self.schema_version != GENOTYPE_SCHEMA_VERSION {
            return Err(Error::SchemaVersion {
                what: "genotype",
                found: self.schema_version,
                supported: GENOTYPE_SCHEMA_VERSION,
            });
        }
        self.shape.validate()?;
        if self.layers.len() != self.shape.layers {
            return bad(format!("{} layers listed, shape says {}", self.layers.len(), self.shape.layers));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.nodes.len() != self.shape.nodes {
                return bad(format!("layer {l} has {} nodes, expected {}", layer.nodes.len(), self.shape.nodes));
            }
            for (i, node) in layer.nodes.iter().enumerate() {
                if node.len() != 2 {
                    return bad(format!("layer {l} node {i} keeps {} edges, expected 2", node.len()));
                }
                if node[0].input == node[1].input {
                    return bad(format!("layer {l} node {i} uses input {} twice", node[0].input));
                }
                for e in node {
                    if e.input >= i + 2 {
                        return bad(format!("layer {l} node {i} reads input {} which does not precede it", e.input));
                    }
                    if e.op.is_discarding() || layer.cell.index_of(e.op).is_none() {
                        return bad(format!("layer {l} node {i}: {} is not selectable in a {} cell", e.op, layer.cell));
                    }
                }
            }
        }
        Ok(())
    }

    /// Canonical text form: pretty JSON with sorted keys and a trailing
    /// newline, so equal genotypes are byte-identical.
    pub fn to_canonical_json(&self) -> String {
        let value = serde_json::to_value(self).expect("genotype serializes");
        let mut s = serde_json::to_string_pretty(&value).expect("value serializes");
        s.push('\n');
        s
    }

    pub fn from_json(path: &Path, text: &str) -> Result<Genotype> {
        let value: serde_json::Value = serde_json::from_str(text).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        let version = value
            .get("schema_version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| Error::format(path, "missing schema_version"))?;
        if version != GENOTYPE_SCHEMA_VERSION as u64 {
            return Err(Error::SchemaVersion {
                what: "genotype",
                found: version as u32,
                supported: GENOTYPE_SCHEMA_VERSION,
            });
        }
        let g: Genotype = serde_json::from_value(value).map_err(|source| Error::Json {
            path: path.to_path_buf(),
            source,
        })?;
        g.validate()?;
        Ok(g)
    }

    pub fn load(path: &Path) -> Result<Genotype> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Genotype::from_json(path, &text)
    }

    /// Every selected operation, layer by layer.
    pub fn ops(&self) -> impl Iterator<Item = (usize, OpName)> + '_ {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(l, layer)| layer.nodes.iter().flatten().map(move |e| (l, e.op)))
    }
}

/// Index of the largest value; the earliest one on ties.
fn argmax_first(xs: impl Iterator<Item = f64>) -> Option<(usize, f64)> {
    let mut best: Option<(usize, f64)> = None;
    for (i, x) in xs.enumerate() {
        if best.is_none_or(|(_, b)| x > b) {
            best = Some((i, x));
        }
    }
    best
}

/// Best non-discarding candidate on one edge: `(menu index, weight)`.
pub fn best_candidate(kind: CellKind, weights: &[f64]) -> (usize, f64) {
    let menu = kind.menu();
    argmax_first(
        weights
            .iter()
            .zip(menu)
            .map(|(&w, op)| if op.is_discarding() { f64::NEG_INFINITY } else { w }),
    )
    .expect("non-empty menu")
}

/// Selects the two kept edges of one node from its per-edge candidate
/// weights. Returned edges are sorted by input index.
pub fn select_node(kind: CellKind, edges: &[Vec<f64>]) -> Result<Vec<EdgeGene>> {
    if edges.len() < 2 {
        return Err(Error::Contract(format!(
            "a node needs at least 2 incoming edges, found {}",
            edges.len()
        )));
    }
    let mut scored: Vec<(usize, usize, f64)> = edges
        .iter()
        .enumerate()
        .map(|(j, w)| {
            let (op, s) = best_candidate(kind, w);
            (j, op, s)
        })
        .collect();
    // stable sort keeps lower input indices first among equal scores
    scored.sort_by(|a, b| b.2.total_cmp(&a.2));
    let mut kept: Vec<EdgeGene> = scored[..2]
        .iter()
        .map(|&(input, op, _)| EdgeGene {
            input,
            op: kind.menu()[op],
        })
        .collect();
    kept.sort_by_key(|e| e.input);
    Ok(kept)
}

/// Derives the discrete architecture from a snapshot of logits or weights.
pub fn derive_genotype(snapshot: &ArchSnapshot) -> Result<Genotype> {
    let snap = snapshot.normalized();
    let shape = snap.shape;
    if snap.layers.len() != shape.layers {
        return Err(Error::Contract(format!(
            "snapshot has {} layers, shape says {}",
            snap.layers.len(),
            shape.layers
        )));
    }
    let mut layers = Vec::with_capacity(snap.layers.len());
    for (l, layer) in snap.layers.iter().enumerate() {
        let cell = match (&layer.spa, &layer.spe) {
            (Some(_), Some(_)) => {
                if layer.beta > layer.alpha {
                    CellKind::Spe
                } else {
                    CellKind::Spa
                }
            }
            (Some(_), None) => CellKind::Spa,
            (None, Some(_)) => CellKind::Spe,
            (None, None) => return Err(Error::Contract(format!("snapshot layer {l} has no cell"))),
        };
        let arch = layer.cell(cell).expect("chosen cell exists");
        if arch.len() != shape.nodes {
            return Err(Error::Contract(format!(
                "snapshot layer {l} has {} nodes, shape says {}",
                arch.len(),
                shape.nodes
            )));
        }
        let mut nodes = Vec::with_capacity(arch.len());
        for (i, edges) in arch.iter().enumerate() {
            if edges.len() != i + 2 || edges.iter().any(|e| e.len() != MENU_LEN) {
                return Err(Error::Contract(format!(
                    "snapshot layer {l} node {i}: expected {} edges of {MENU_LEN} weights",
                    i + 2
                )));
            }
            nodes.push(select_node(cell, edges)?);
        }
        layers.push(LayerGene { cell, nodes });
    }
    Ok(Genotype {
        schema_version: GENOTYPE_SCHEMA_VERSION,
        shape,
        layers,
    })
}

/// Share of each operation family among selected operations.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Proportions {
    pub count: usize,
    pub spatial_2d: f64,
    pub spectral_2d: f64,
    pub three_d: f64,
    pub skip: f64,
}

impl Proportions {
    fn from_ops(ops: impl Iterator<Item = OpName>) -> Self {
        let mut counts = [0usize; 4];
        let mut n = 0;
        for op in ops {
            n += 1;
            match op.family() {
                OpFamily::Spatial2d => counts[0] += 1,
                OpFamily::Spectral2d => counts[1] += 1,
                OpFamily::ThreeD => counts[2] += 1,
                OpFamily::Skip => counts[3] += 1,
                OpFamily::Zero => unreachable!("validated genotypes contain no zero op"),
            }
        }
        let p = |c: usize| if n == 0 { 0.0 } else { c as f64 / n as f64 };
        Proportions {
            count: n,
            spatial_2d: p(counts[0]),
            spectral_2d: p(counts[1]),
            three_d: p(counts[2]),
            skip: p(counts[3]),
        }
    }

    pub fn total(&self) -> f64 {
        self.spatial_2d + self.spectral_2d + self.three_d + self.skip
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenotypeStats {
    pub overall: Proportions,
    pub layers: Vec<Proportions>,
}

pub fn genotype_stats(g: &Genotype) -> GenotypeStats {
    GenotypeStats {
        overall: Proportions::from_ops(g.ops().map(|(_, op)| op)),
        layers: (0..g.layers.len())
            .map(|l| Proportions::from_ops(g.ops().filter(move |&(k, _)| k == l).map(|(_, op)| op)))
            .collect(),
    }
}

impl GenotypeStats {
    /// Aligned plain-text table.
    pub fn table(&self, g: &Genotype) -> String {
        let mut s = String::new();
        writeln!(s, "{:<8} {:<5} {:>5} {:>10} {:>11} {:>8} {:>7}", "layer", "cell", "ops", "spatial2d", "spectral2d", "3d", "skip").unwrap();
        let row = |s: &mut String, name: &str, cell: &str, p: &Proportions| {
            writeln!(
                s,
                "{:<8} {:<5} {:>5} {:>10.4} {:>11.4} {:>8.4} {:>7.4}",
                name, cell, p.count, p.spatial_2d, p.spectral_2d, p.three_d, p.skip
            )
            .unwrap();
        };
        for (l, p) in self.layers.iter().enumerate() {
            row(&mut s, &l.to_string(), g.layers[l].cell.as_str(), p);
        }
        row(&mut s, "overall", "-", &self.overall);
        s
    }
}
