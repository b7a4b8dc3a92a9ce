//! On-disk formats: the `EMB1` matrix container, graph edge lists, label
//! files and benchmark directories.
//!
//! `EMB1` layout: magic `b"EMB1"`, `u32` rows, `u32` dim, then `rows · dim`
//! little-endian `f32` values in row-major order. Several records may be
//! concatenated in one file (checkpoints do this).

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const EMB_MAGIC: &[u8; 4] = b"EMB1";
const HEADER_LEN: usize = 12;

/// Row-major `f32` matrix as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingMatrix {
    rows: usize,
    dim: usize,
    values: Vec<f32>,
}

impl EmbeddingMatrix {
    pub fn new(rows: usize, dim: usize, values: Vec<f32>) -> Result<Self> {
        if values.len() != rows * dim {
            return Err(Error::Data(format!(
                "embedding matrix {rows}x{dim} needs {} values, got {}",
                rows * dim,
                values.len()
            )));
        }
        if let Some(pos) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!("non-finite value in row {}", pos / dim.max(1))));
        }
        Ok(EmbeddingMatrix { rows, dim, values })
    }

    /// Narrows a 64-bit tensor to the storage precision.
    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        Self::new(t.rows(), t.cols(), t.data().iter().map(|&v| v as f32).collect())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn values(&self) -> &[f32] {
        &self.values
    }

    /// Widens to the 64-bit compute representation.
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(self.rows, self.dim, self.values.iter().map(|&v| f64::from(v)).collect())
            .expect("validated on construction")
    }

    pub fn encode(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(EMB_MAGIC);
        out.extend_from_slice(&(self.rows as u32).to_le_bytes());
        out.extend_from_slice(&(self.dim as u32).to_le_bytes());
        for v in &self.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    /// Decodes one record from the front of `bytes`, returning it and the
    /// number of bytes consumed.
    pub fn decode(bytes: &[u8], path: &Path) -> Result<(Self, usize)> {
        if bytes.len() < HEADER_LEN {
            return Err(Error::Size {
                path: path.to_owned(),
                expected: HEADER_LEN,
                found: bytes.len(),
            });
        }
        if &bytes[..4] != EMB_MAGIC {
            return Err(Error::Format {
                path: path.to_owned(),
                msg: format!("bad magic {:?}, expected \"EMB1\"", &bytes[..4]),
            });
        }
        let rows = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
        let dim = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let total = HEADER_LEN + rows * dim * 4;
        if bytes.len() < total {
            return Err(Error::Size {
                path: path.to_owned(),
                expected: total,
                found: bytes.len(),
            });
        }
        let mut values = Vec::with_capacity(rows * dim);
        for (i, chunk) in bytes[HEADER_LEN..total].chunks_exact(4).enumerate() {
            let v = f32::from_le_bytes(chunk.try_into().expect("4 bytes"));
            if !v.is_finite() {
                return Err(Error::Data(format!(
                    "{}: non-finite value in row {}",
                    path.display(),
                    i / dim
                )));
            }
            values.push(v);
        }
        Ok((EmbeddingMatrix { rows, dim, values }, total))
    }
}

fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    write_bytes(path, text.as_bytes())
}

/// Loads a single-record `EMB1` file. Trailing bytes are a size error.
pub fn load_embeddings(path: &Path) -> Result<EmbeddingMatrix> {
    let bytes = read_bytes(path)?;
    let (matrix, used) = EmbeddingMatrix::decode(&bytes, path)?;
    if used != bytes.len() {
        return Err(Error::Size {
            path: path.to_owned(),
            expected: used,
            found: bytes.len(),
        });
    }
    Ok(matrix)
}

pub fn save_embeddings(path: &Path, matrix: &EmbeddingMatrix) -> Result<()> {
    let mut out = Vec::with_capacity(HEADER_LEN + matrix.values.len() * 4);
    matrix.encode(&mut out);
    write_bytes(path, &out)
}

/// Loads every concatenated `EMB1` record in a file.
pub fn load_embedding_records(path: &Path) -> Result<Vec<EmbeddingMatrix>> {
    let bytes = read_bytes(path)?;
    let mut offset = 0;
    let mut records = Vec::new();
    while offset < bytes.len() {
        let (m, used) = EmbeddingMatrix::decode(&bytes[offset..], path)?;
        records.push(m);
        offset += used;
    }
    Ok(records)
}

pub fn save_embedding_records(path: &Path, records: &[EmbeddingMatrix]) -> Result<()> {
    let mut out = Vec::new();
    for r in records {
        r.encode(&mut out);
    }
    write_bytes(path, &out)
}

/// One non-negative integer per line; blank lines are skipped.
pub fn parse_indices(text: &str, path: &Path) -> Result<Vec<usize>> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(n, l)| {
            l.trim().parse::<usize>().map_err(|_| Error::Format {
                path: path.to_owned(),
                msg: format!("line {}: expected a non-negative integer, got {:?}", n + 1, l.trim()),
            })
        })
        .collect()
}

pub fn load_indices(path: &Path) -> Result<Vec<usize>> {
    parse_indices(&read_text(path)?, path)
}

pub fn save_indices(path: &Path, values: &[usize]) -> Result<()> {
    let mut text = String::with_capacity(values.len() * 3);
    for v in values {
        text.push_str(&v.to_string());
        text.push('\n');
    }
    write_text(path, &text)
}

/// Semantic relation graph over class and ancestor nodes.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassGraph {
    node_count: usize,
    edges: Vec<(usize, usize)>,
    class_nodes: Vec<usize>,
    node_init: Tensor,
}

impl ClassGraph {
    /// Validates and builds a graph. Self-loops are rejected; duplicate
    /// edges (in either orientation) are collapsed.
    pub fn new(
        node_count: usize,
        edges: Vec<(usize, usize)>,
        class_nodes: Vec<usize>,
        node_init: Tensor,
    ) -> Result<Self> {
        let mut seen_edges = std::collections::BTreeSet::new();
        for &(u, v) in &edges {
            if u >= node_count || v >= node_count {
                return Err(Error::Graph(format!(
                    "edge ({u}, {v}) out of range for {node_count} nodes"
                )));
            }
            if u == v {
                return Err(Error::Graph(format!("self-loop on node {u}")));
            }
            seen_edges.insert((u.min(v), u.max(v)));
        }
        if class_nodes.is_empty() {
            return Err(Error::Graph("no class nodes".into()));
        }
        let mut is_class = vec![false; node_count];
        for &c in &class_nodes {
            if c >= node_count {
                return Err(Error::Graph(format!(
                    "class node {c} out of range for {node_count} nodes"
                )));
            }
            if std::mem::replace(&mut is_class[c], true) {
                return Err(Error::Graph(format!("duplicate class node {c}")));
            }
        }
        if node_init.rows() != node_count {
            return Err(Error::Graph(format!(
                "node_init has {} rows for {node_count} nodes",
                node_init.rows()
            )));
        }
        Ok(ClassGraph {
            node_count,
            edges: seen_edges.into_iter().collect(),
            class_nodes,
            node_init,
        })
    }

    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn class_nodes(&self) -> &[usize] {
        &self.class_nodes
    }

    pub fn class_count(&self) -> usize {
        self.class_nodes.len()
    }

    pub fn node_init(&self) -> &Tensor {
        &self.node_init
    }

    pub fn dim(&self) -> usize {
        self.node_init.cols()
    }

    /// Initial embeddings of the class nodes, in class order.
    pub fn class_embeddings(&self) -> Tensor {
        self.node_init.gather_rows(&self.class_nodes)
    }

    /// Replaces class-node rows of `node_init` with the given class embeddings.
    pub fn set_class_embeddings(&mut self, e: &Tensor) -> Result<()> {
        if e.rows() != self.class_nodes.len() || e.cols() != self.node_init.cols() {
            return Err(Error::Dimension {
                op: "set_class_embeddings",
                left: [self.class_nodes.len(), self.node_init.cols()],
                right: e.shape(),
            });
        }
        for (k, &node) in self.class_nodes.iter().enumerate() {
            self.node_init.row_mut(node).copy_from_slice(e.row(k));
        }
        Ok(())
    }

    /// Number of connected components (union-find).
    pub fn component_count(&self) -> usize {
        let mut parent: Vec<usize> = (0..self.node_count).collect();
        fn find(p: &mut [usize], mut x: usize) -> usize {
            while p[x] != x {
                p[x] = p[p[x]];
                x = p[x];
            }
            x
        }
        let mut components = self.node_count;
        for &(u, v) in &self.edges {
            let (ru, rv) = (find(&mut parent, u), find(&mut parent, v));
            if ru != rv {
                parent[ru] = rv;
                components -= 1;
            }
        }
        components
    }

    pub fn edge_list_text(&self) -> String {
        let mut text = format!("nodes {}\n", self.node_count);
        for (u, v) in &self.edges {
            text.push_str(&format!("{u} {v}\n"));
        }
        text
    }
}

/// Parses the edge-list format: first line `nodes N`, then one `u v` per line.
pub fn parse_edge_list(text: &str, path: &Path) -> Result<(usize, Vec<(usize, usize)>)> {
    let mut lines = text
        .lines()
        .enumerate()
        .map(|(n, l)| (n + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty());
    let format_err = |line: usize, msg: String| Error::Format {
        path: path.to_owned(),
        msg: format!("line {line}: {msg}"),
    };
    let (n, header) = lines
        .next()
        .ok_or_else(|| format_err(1, "missing \"nodes N\" header".into()))?;
    let node_count = header
        .strip_prefix("nodes")
        .and_then(|rest| rest.trim().parse::<usize>().ok())
        .ok_or_else(|| format_err(n, format!("expected \"nodes N\", got {header:?}")))?;
    let mut edges = Vec::new();
    for (n, line) in lines {
        let mut parts = line.split_whitespace();
        let parse = |p: Option<&str>| p.and_then(|s| s.parse::<usize>().ok());
        match (parse(parts.next()), parse(parts.next()), parts.next()) {
            (Some(u), Some(v), None) => edges.push((u, v)),
            _ => return Err(format_err(n, format!("expected \"u v\", got {line:?}"))),
        }
    }
    Ok((node_count, edges))
}

pub fn load_graph(edge_path: &Path, class_nodes_path: &Path, node_init_path: &Path) -> Result<ClassGraph> {
    let (node_count, edges) = parse_edge_list(&read_text(edge_path)?, edge_path)?;
    let class_nodes = load_indices(class_nodes_path)?;
    let node_init = load_embeddings(node_init_path)?.to_tensor();
    let graph = ClassGraph::new(node_count, edges, class_nodes, node_init)?;
    let components = graph.component_count();
    if components > 1 {
        eprintln!(
            "warning: class graph {} has {components} connected components",
            edge_path.display()
        );
    }
    Ok(graph)
}

/// Per-class synonym embeddings in CSR layout: rows of `embeddings` for
/// class `k` are `offsets[k]..offsets[k + 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct SynonymTable {
    pub embeddings: Tensor,
    pub offsets: Vec<usize>,
}

impl SynonymTable {
    pub fn from_groups(groups: &[Vec<Vec<f64>>]) -> Result<Self> {
        let mut offsets = vec![0];
        let mut rows = Vec::new();
        for g in groups {
            rows.extend(g.iter().cloned());
            offsets.push(rows.len());
        }
        Ok(SynonymTable {
            embeddings: Tensor::from_rows(&rows)?,
            offsets,
        })
    }

    pub fn class_count(&self) -> usize {
        self.offsets.len().saturating_sub(1)
    }

    pub fn groups(&self) -> Vec<Vec<&[f64]>> {
        self.offsets
            .windows(2)
            .map(|w| (w[0]..w[1]).map(|r| self.embeddings.row(r)).collect())
            .collect()
    }
}

/// File names inside a benchmark directory.
pub mod layout {
    pub const SOURCE_FEATURES: &str = "source_features.emb";
    pub const SOURCE_LABELS: &str = "source_labels.txt";
    pub const TARGET_FEATURES: &str = "target_features.emb";
    pub const TARGET_LABELS: &str = "target_labels.txt";
    pub const SEEN_MASK: &str = "seen_mask.txt";
    pub const GRAPH_EDGES: &str = "graph_edges.txt";
    pub const CLASS_NODES: &str = "class_nodes.txt";
    pub const NODE_INIT: &str = "node_init.emb";
    pub const SYNONYMS: &str = "synonyms.emb";
    pub const SYNONYM_OFFSETS: &str = "synonym_offsets.txt";
}

/// Everything a run needs, as loaded from a benchmark directory.
#[derive(Clone, Debug)]
pub struct DatasetBundle {
    pub source_features: Tensor,
    pub source_labels: Vec<usize>,
    pub target_features: Tensor,
    /// Inference-time only. Training entry points take [`TrainingData`],
    /// which has no field for these.
    pub target_eval_labels: Vec<usize>,
    pub seen_mask: Vec<bool>,
}

/// The label-free view of a bundle handed to the trainer.
#[derive(Clone, Copy, Debug)]
pub struct TrainingData<'a> {
    pub source_features: &'a Tensor,
    pub source_labels: &'a [usize],
    pub target_features: &'a Tensor,
    pub seen_mask: &'a [bool],
}

impl DatasetBundle {
    pub fn new(
        source_features: Tensor,
        source_labels: Vec<usize>,
        target_features: Tensor,
        target_eval_labels: Vec<usize>,
        seen_mask: Vec<bool>,
    ) -> Result<Self> {
        let classes = seen_mask.len();
        let seen = seen_mask.iter().filter(|&&s| s).count();
        if seen == 0 || seen == classes {
            return Err(Error::Data(format!(
                "need at least one seen and one unseen class, got {seen} seen of {classes}"
            )));
        }
        if source_features.rows() != source_labels.len() {
            return Err(Error::Data(format!(
                "{} source features but {} source labels",
                source_features.rows(),
                source_labels.len()
            )));
        }
        if target_features.rows() != target_eval_labels.len() {
            return Err(Error::Data(format!(
                "{} target features but {} target labels",
                target_features.rows(),
                target_eval_labels.len()
            )));
        }
        if source_features.cols() != target_features.cols() && target_features.rows() > 0 {
            return Err(Error::Dimension {
                op: "dataset",
                left: source_features.shape(),
                right: target_features.shape(),
            });
        }
        for &l in source_labels.iter().chain(&target_eval_labels) {
            if l >= classes {
                return Err(Error::Label { label: l, classes });
            }
        }
        if let Some(&l) = source_labels.iter().find(|&&l| !seen_mask[l]) {
            return Err(Error::Data(format!("source label {l} is not a seen class")));
        }
        Ok(DatasetBundle {
            source_features,
            source_labels,
            target_features,
            target_eval_labels,
            seen_mask,
        })
    }

    pub fn class_count(&self) -> usize {
        self.seen_mask.len()
    }

    pub fn training_view(&self) -> TrainingData<'_> {
        TrainingData {
            source_features: &self.source_features,
            source_labels: &self.source_labels,
            target_features: &self.target_features,
            seen_mask: &self.seen_mask,
        }
    }
}

/// A benchmark directory: dataset, class graph and optional synonym table.
#[derive(Clone, Debug)]
pub struct Benchmark {
    pub bundle: DatasetBundle,
    pub graph: ClassGraph,
    pub synonyms: Option<SynonymTable>,
}

fn join(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}

pub fn save_benchmark(dir: &Path, bench: &Benchmark) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let b = &bench.bundle;
    save_embeddings(
        &join(dir, layout::SOURCE_FEATURES),
        &EmbeddingMatrix::from_tensor(&b.source_features)?,
    )?;
    save_indices(&join(dir, layout::SOURCE_LABELS), &b.source_labels)?;
    save_embeddings(
        &join(dir, layout::TARGET_FEATURES),
        &EmbeddingMatrix::from_tensor(&b.target_features)?,
    )?;
    save_indices(&join(dir, layout::TARGET_LABELS), &b.target_eval_labels)?;
    let mask: Vec<usize> = b.seen_mask.iter().map(|&s| usize::from(s)).collect();
    save_indices(&join(dir, layout::SEEN_MASK), &mask)?;
    let g = &bench.graph;
    write_text(&join(dir, layout::GRAPH_EDGES), &g.edge_list_text())?;
    save_indices(&join(dir, layout::CLASS_NODES), g.class_nodes())?;
    save_embeddings(
        &join(dir, layout::NODE_INIT),
        &EmbeddingMatrix::from_tensor(g.node_init())?,
    )?;
    if let Some(s) = &bench.synonyms {
        save_embeddings(
            &join(dir, layout::SYNONYMS),
            &EmbeddingMatrix::from_tensor(&s.embeddings)?,
        )?;
        save_indices(&join(dir, layout::SYNONYM_OFFSETS), &s.offsets)?;
    }
    Ok(())
}

/// Loads a benchmark directory. When a synonym table is present, class-node
/// rows of the graph's `node_init` are replaced by the pooled synonyms.
pub fn load_benchmark(dir: &Path) -> Result<Benchmark> {
    let source_features = load_embeddings(&join(dir, layout::SOURCE_FEATURES))?.to_tensor();
    let source_labels = load_indices(&join(dir, layout::SOURCE_LABELS))?;
    let target_features = load_embeddings(&join(dir, layout::TARGET_FEATURES))?.to_tensor();
    let target_labels = load_indices(&join(dir, layout::TARGET_LABELS))?;
    let mask_path = join(dir, layout::SEEN_MASK);
    let seen_mask = load_indices(&mask_path)?
        .into_iter()
        .map(|v| match v {
            0 => Ok(false),
            1 => Ok(true),
            other => Err(Error::Format {
                path: mask_path.clone(),
                msg: format!("seen mask entries must be 0 or 1, got {other}"),
            }),
        })
        .collect::<Result<Vec<_>>>()?;
    let bundle = DatasetBundle::new(
        source_features,
        source_labels,
        target_features,
        target_labels,
        seen_mask,
    )?;

    let mut graph = load_graph(
        &join(dir, layout::GRAPH_EDGES),
        &join(dir, layout::CLASS_NODES),
        &join(dir, layout::NODE_INIT),
    )?;
    if graph.class_count() != bundle.class_count() {
        return Err(Error::Graph(format!(
            "graph has {} class nodes, dataset has {} classes",
            graph.class_count(),
            bundle.class_count()
        )));
    }

    let syn_path = join(dir, layout::SYNONYMS);
    let synonyms = if syn_path.exists() {
        let embeddings = load_embeddings(&syn_path)?.to_tensor();
        let offsets = load_indices(&join(dir, layout::SYNONYM_OFFSETS))?;
        if offsets.first() != Some(&0)
            || offsets.last() != Some(&embeddings.rows())
            || offsets.windows(2).any(|w| w[0] > w[1])
        {
            return Err(Error::Data("synonym offsets are not a valid partition".into()));
        }
        let table = SynonymTable { embeddings, offsets };
        let pooled = crate::prototype::pool_synonyms(&table.groups())?;
        graph.set_class_embeddings(&pooled)?;
        Some(table)
    } else {
        None
    };

    Ok(Benchmark {
        bundle,
        graph,
        synonyms,
    })
}
