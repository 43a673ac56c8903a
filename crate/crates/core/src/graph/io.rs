//! `DAGNET1` model files.
//!
//! Little-endian, no padding:
//!
//! ```text
//! magic "DAGNET1\0" | version u32
//! node count u32
//!   per node: id u32 | kind u8 | hyperparameters (u32 each) | parent count u8 | parent ids u32…
//! parameter count u32
//!   per parameter: owner u32 | name len u8 | name utf-8 | rank u8 | extents u32… | f64 values…
//! input id u32 | loss id u32
//! ```
//!
//! Hyperparameter fields by kind: input (height, width, channels); conv
//! (kernel_h, kernel_w, out_channels, stride, pad); maxpool (window, stride);
//! l2 normalize (epsilon as the low and high halves of its f64 bit pattern);
//! fully connected (outputs); softmax loss (classes); none for the rest.
//! A graph without a loss node stores `u32::MAX` as its loss id.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;

use byteorder::{LittleEndian as LE, ReadBytesExt, WriteBytesExt};
use thiserror::Error;

use super::{Graph, GraphError, LayerKind, NodeId};
use crate::tensor::{Shape, Tensor};

pub const MODEL_MAGIC: &[u8; 8] = b"DAGNET1\0";
pub const MODEL_VERSION: u32 = 1;
const NO_NODE: u32 = u32::MAX;

#[derive(Debug, Error)]
pub enum ModelFormatError {
    #[error("not a model file (bad magic)")]
    BadMagic,
    #[error("unsupported model format version {0}")]
    Version(u32),
    #[error("model file is truncated")]
    Truncated,
    #[error("malformed model file: {0}")]
    Malformed(String),
    #[error("model failed validation: {0}")]
    Validation(#[from] GraphError),
    #[error(transparent)]
    Io(io::Error),
}

impl From<io::Error> for ModelFormatError {
    fn from(e: io::Error) -> Self {
        if e.kind() == io::ErrorKind::UnexpectedEof {
            ModelFormatError::Truncated
        } else {
            ModelFormatError::Io(e)
        }
    }
}

fn to_u32(v: usize, what: &str) -> io::Result<u32> {
    u32::try_from(v).map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, format!("{what} exceeds u32")))
}

fn kind_code(kind: &LayerKind) -> (u8, Vec<u32>) {
    let c = |v: usize| v as u32;
    match kind {
        LayerKind::Input { height, width, channels } => (0, vec![c(*height), c(*width), c(*channels)]),
        LayerKind::Conv { kernel_h, kernel_w, out_channels, stride, pad } => {
            (1, vec![c(*kernel_h), c(*kernel_w), c(*out_channels), c(*stride), c(*pad)])
        }
        LayerKind::Relu => (2, vec![]),
        LayerKind::MaxPool { window, stride } => (3, vec![c(*window), c(*stride)]),
        LayerKind::GlobalAvgPool => (4, vec![]),
        LayerKind::L2Normalize { epsilon } => {
            let bits = epsilon.to_bits();
            (5, vec![bits as u32, (bits >> 32) as u32])
        }
        LayerKind::FullyConnected { outputs } => (6, vec![c(*outputs)]),
        LayerKind::Add => (7, vec![]),
        LayerKind::SoftmaxLoss { classes } => (8, vec![c(*classes)]),
    }
}

fn read_kind<R: Read>(r: &mut R, code: u8) -> Result<LayerKind, ModelFormatError> {
    let mut u = || -> Result<usize, ModelFormatError> { Ok(r.read_u32::<LE>()? as usize) };
    Ok(match code {
        0 => LayerKind::Input { height: u()?, width: u()?, channels: u()? },
        1 => LayerKind::Conv { kernel_h: u()?, kernel_w: u()?, out_channels: u()?, stride: u()?, pad: u()? },
        2 => LayerKind::Relu,
        3 => LayerKind::MaxPool { window: u()?, stride: u()? },
        4 => LayerKind::GlobalAvgPool,
        5 => {
            let lo = u()? as u64;
            let hi = u()? as u64;
            LayerKind::L2Normalize { epsilon: f64::from_bits(lo | (hi << 32)) }
        }
        6 => LayerKind::FullyConnected { outputs: u()? },
        7 => LayerKind::Add,
        8 => LayerKind::SoftmaxLoss { classes: u()? },
        other => return Err(ModelFormatError::Malformed(format!("unknown layer kind {other}"))),
    })
}

/// Writes one named tensor in the shared parameter-blob encoding.
pub(crate) fn write_tensor_blob<W: Write>(w: &mut W, name: &str, t: &Tensor) -> io::Result<()> {
    let name_len = u8::try_from(name.len())
        .map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "parameter name longer than 255 bytes"))?;
    w.write_u8(name_len)?;
    w.write_all(name.as_bytes())?;
    let rank = u8::try_from(t.shape().rank())
        .map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "tensor rank exceeds 255"))?;
    w.write_u8(rank)?;
    for &d in t.dims() {
        w.write_u32::<LE>(to_u32(d, "extent")?)?;
    }
    for &v in t.data() {
        w.write_f64::<LE>(v)?;
    }
    Ok(())
}

pub(crate) fn read_tensor_blob<R: Read>(r: &mut R) -> Result<(String, Tensor), ModelFormatError> {
    let name_len = r.read_u8()? as usize;
    let mut name = vec![0u8; name_len];
    r.read_exact(&mut name)?;
    let name = String::from_utf8(name).map_err(|_| ModelFormatError::Malformed("parameter name is not UTF-8".into()))?;
    let rank = r.read_u8()? as usize;
    let dims = (0..rank).map(|_| r.read_u32::<LE>().map(|d| d as usize)).collect::<io::Result<Vec<_>>>()?;
    let shape = Shape::new(dims).map_err(|e| ModelFormatError::Malformed(e.to_string()))?;
    let mut data = vec![0.0; shape.numel()];
    r.read_f64_into::<LE>(&mut data)?;
    let t = Tensor::new(shape, data).map_err(|e| ModelFormatError::Malformed(e.to_string()))?;
    Ok((name, t))
}

pub fn write_model<W: Write>(graph: &Graph, w: &mut W) -> io::Result<()> {
    w.write_all(MODEL_MAGIC)?;
    w.write_u32::<LE>(MODEL_VERSION)?;
    w.write_u32::<LE>(to_u32(graph.len(), "node count")?)?;
    for node in graph.nodes() {
        w.write_u32::<LE>(to_u32(node.id(), "node id")?)?;
        let (code, hyper) = kind_code(node.kind());
        w.write_u8(code)?;
        for h in hyper {
            w.write_u32::<LE>(h)?;
        }
        let count = u8::try_from(node.parents().len())
            .map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "more than 255 parents"))?;
        w.write_u8(count)?;
        for &p in node.parents() {
            w.write_u32::<LE>(to_u32(p, "parent id")?)?;
        }
    }
    let params: Vec<(NodeId, &str, &Tensor)> = graph
        .nodes()
        .iter()
        .flat_map(|n| n.params().iter().map(move |p| (n.id(), p.name.as_str(), &p.value)))
        .collect();
    w.write_u32::<LE>(to_u32(params.len(), "parameter count")?)?;
    for (owner, name, value) in params {
        w.write_u32::<LE>(to_u32(owner, "owner id")?)?;
        write_tensor_blob(w, name, value)?;
    }
    w.write_u32::<LE>(graph.input_id().map_or(NO_NODE, |v| v as u32))?;
    w.write_u32::<LE>(graph.loss_id().map_or(NO_NODE, |v| v as u32))?;
    Ok(())
}

type NodeRecord = (LayerKind, Vec<NodeId>, Vec<(String, Tensor)>);

pub fn read_model<R: Read>(r: &mut R) -> Result<Graph, ModelFormatError> {
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MODEL_MAGIC {
        return Err(ModelFormatError::BadMagic);
    }
    let version = r.read_u32::<LE>()?;
    if version != MODEL_VERSION {
        return Err(ModelFormatError::Version(version));
    }
    let count = r.read_u32::<LE>()? as usize;
    let mut table: Vec<NodeRecord> = Vec::with_capacity(count.min(1 << 16));
    for expected in 0..count {
        let id = r.read_u32::<LE>()? as usize;
        if id != expected {
            return Err(ModelFormatError::Malformed(format!("node ids must be dense: found {id} at {expected}")));
        }
        let code = r.read_u8()?;
        let kind = read_kind(r, code)?;
        let parent_count = r.read_u8()? as usize;
        let parents = (0..parent_count).map(|_| r.read_u32::<LE>().map(|p| p as usize)).collect::<io::Result<Vec<_>>>()?;
        table.push((kind, parents, Vec::new()));
    }
    let param_count = r.read_u32::<LE>()? as usize;
    for _ in 0..param_count {
        let owner = r.read_u32::<LE>()? as usize;
        let blob = read_tensor_blob(r)?;
        table
            .get_mut(owner)
            .ok_or_else(|| ModelFormatError::Malformed(format!("parameter owned by unknown node {owner}")))?
            .2
            .push(blob);
    }
    let input_id = r.read_u32::<LE>()?;
    let loss_id = r.read_u32::<LE>()?;
    let mut trailing = [0u8; 1];
    if r.read(&mut trailing)? != 0 {
        return Err(ModelFormatError::Malformed("trailing bytes after model".into()));
    }

    let mut raw = Vec::with_capacity(table.len());
    for (id, (kind, parents, params)) in table.into_iter().enumerate() {
        let expected: &[&str] = if kind.has_params() { &["weight", "bias"] } else { &[] };
        let names: Vec<&str> = params.iter().map(|(n, _)| n.as_str()).collect();
        if names != expected {
            return Err(ModelFormatError::Malformed(format!(
                "node {id} ({}) has parameters {names:?}, expected {expected:?}",
                kind.name()
            )));
        }
        raw.push((kind, parents, params.into_iter().map(|(_, t)| t).collect()));
    }
    let graph = Graph::from_table(raw)?;
    if graph.input_id().map(|v| v as u32) != Some(input_id) {
        return Err(ModelFormatError::Malformed(format!("input id {input_id} does not name the input node")));
    }
    if graph.loss_id().map_or(NO_NODE, |v| v as u32) != loss_id {
        return Err(ModelFormatError::Malformed(format!("loss id {loss_id} does not name the loss node")));
    }
    Ok(graph)
}

pub fn save_model(graph: &Graph, path: impl AsRef<Path>) -> io::Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    write_model(graph, &mut w)?;
    w.flush()
}

pub fn load_model(path: impl AsRef<Path>) -> Result<Graph, ModelFormatError> {
    let file = File::open(path).map_err(ModelFormatError::Io)?;
    read_model(&mut BufReader::new(file))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::init::Init;

    fn chain() -> Graph {
        let mut g = Graph::new();
        let x = g.add_node(LayerKind::Input { height: 1, width: 1, channels: 3 }, &[], &Init::Zeros).unwrap();
        let fc = g
            .add_node(LayerKind::FullyConnected { outputs: 2 }, &[x], &Init::Uniform { scale: 1.0, seed: 5, stream: 0 })
            .unwrap();
        g.add_node(LayerKind::SoftmaxLoss { classes: 2 }, &[fc], &Init::Zeros).unwrap();
        g
    }

    fn bytes(g: &Graph) -> Vec<u8> {
        let mut buf = Vec::new();
        write_model(g, &mut buf).unwrap();
        buf
    }

    #[test]
    fn three_node_round_trip() {
        let g = chain();
        let buf = bytes(&g);
        let back = read_model(&mut buf.as_slice()).unwrap();
        assert_eq!(back, g);
        assert_eq!(back.topo_order(), g.topo_order());
        assert_eq!(bytes(&back), buf);
    }

    #[test]
    fn layout_prefix() {
        let buf = bytes(&chain());
        assert_eq!(&buf[..8], b"DAGNET1\0");
        assert_eq!(&buf[8..12], &1u32.to_le_bytes());
        assert_eq!(&buf[12..16], &3u32.to_le_bytes());
        // node 0: id, kind 0, three u32 extents, zero parents
        assert_eq!(&buf[16..20], &0u32.to_le_bytes());
        assert_eq!(buf[20], 0);
        assert_eq!(&buf[21..25], &1u32.to_le_bytes());
        assert_eq!(buf[33], 0);
    }

    #[test]
    fn bad_magic() {
        let mut buf = bytes(&chain());
        buf[0] = b'X';
        assert!(matches!(read_model(&mut buf.as_slice()), Err(ModelFormatError::BadMagic)));
    }

    #[test]
    fn wrong_version() {
        let mut buf = bytes(&chain());
        buf[8] = 9;
        assert!(matches!(read_model(&mut buf.as_slice()), Err(ModelFormatError::Version(9))));
    }

    #[test]
    fn truncation_detected_everywhere() {
        let buf = bytes(&chain());
        for cut in [0, 5, 10, 15, 30, buf.len() / 2, buf.len() - 1] {
            assert!(
                matches!(read_model(&mut &buf[..cut]), Err(ModelFormatError::Truncated)),
                "cut at {cut}"
            );
        }
    }

    #[test]
    fn forward_parent_reference_rejected() {
        let mut buf = bytes(&chain());
        // node 1 header starts after node 0 (4 + 1 + 12 + 1 bytes at offset 16)
        let node1 = 16 + 18;
        // node 1: id(4) kind(1) outputs(4) parent count(1) parent id(4)
        let parent_at = node1 + 4 + 1 + 4 + 1;
        buf[parent_at..parent_at + 4].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(read_model(&mut buf.as_slice()), Err(ModelFormatError::Validation(_))));
    }
}
