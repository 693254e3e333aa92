//! Binary model files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "GDCK" | version u32 | kind u8 (0 = U-Net, 1 = tree) | body
//! ```
//!
//! A U-Net body holds the architecture, training metadata and a manifest of
//! named `f32` tensors (parameters, then normalization statistics). A tree body
//! holds the node arena. Parameters are stored as `f32`; models produced by
//! training are already rounded to `f32`, so reloading reproduces inference
//! bit for bit.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{Layer, Loss, UNet, UNetConfig, UNetMode};
use crate::train::{Checkpoint, EpochScores};
use crate::tree::{TreeModel, TreeNode};

const MAGIC: &[u8; 4] = b"GDCK";
const VERSION: u32 = 1;
const KIND_UNET: u8 = 0;
const KIND_TREE: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct TreeCheckpoint {
    pub model: TreeModel,
    pub palette_digest: Option<u64>,
}

#[derive(Debug, Clone)]
pub enum ModelFile {
    UNet(Checkpoint),
    Tree(TreeCheckpoint),
}

#[derive(Default)]
struct Writer(Vec<u8>);

impl Writer {
    fn u8(&mut self, v: u8) {
        self.0.push(v);
    }
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn f64(&mut self, v: f64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn opt_u64(&mut self, v: Option<u64>) {
        self.u8(v.is_some() as u8);
        self.u64(v.unwrap_or(0));
    }
    fn opt_f64(&mut self, v: Option<f64>) {
        self.u8(v.is_some() as u8);
        self.f64(v.unwrap_or(0.0));
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }
    fn tensor(&mut self, name: &str, shape: &[usize], values: &[f64]) {
        self.str(name);
        self.u8(shape.len() as u8);
        shape.iter().for_each(|&d| self.u32(d));
        for &v in values {
            self.0.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint("truncated file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
    fn opt_u64(&mut self) -> Result<Option<u64>> {
        let flag = self.u8()?;
        let v = self.u64()?;
        Ok((flag != 0).then_some(v))
    }
    fn opt_f64(&mut self) -> Result<Option<f64>> {
        let flag = self.u8()?;
        let v = self.f64()?;
        Ok((flag != 0).then_some(v))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))
    }
    fn tensor(&mut self) -> Result<(String, Vec<usize>, Vec<f64>)> {
        let name = self.str()?;
        let rank = self.u8()? as usize;
        let shape = (0..rank).map(|_| self.u32()).collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let raw = self.take(len * 4)?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect();
        Ok((name, shape, values))
    }
}

fn header(kind: u8) -> Writer {
    let mut w = Writer::default();
    w.0.extend_from_slice(MAGIC);
    w.u32(VERSION as usize);
    w.u8(kind);
    w
}

fn encode_loss(w: &mut Writer, loss: Loss) {
    let (tag, gamma) = match loss {
        Loss::L2 => (0, 0.0),
        Loss::CrossEntropy => (1, 0.0),
        Loss::Focal { gamma } => (2, gamma),
    };
    w.u8(tag);
    w.f64(gamma);
}

fn decode_loss(r: &mut Reader) -> Result<Loss> {
    let tag = r.u8()?;
    let gamma = r.f64()?;
    match tag {
        0 => Ok(Loss::L2),
        1 => Ok(Loss::CrossEntropy),
        2 => Ok(Loss::Focal { gamma }),
        t => Err(Error::Checkpoint(format!("unknown loss tag {t}"))),
    }
}

pub fn encode_unet(checkpoint: &Checkpoint) -> Vec<u8> {
    let mut model = checkpoint.model.clone();
    let config = *model.config();
    let mut w = header(KIND_UNET);
    w.u8(match config.mode {
        UNetMode::Regression => 0,
        UNetMode::Classification => 1,
    });
    w.u32(config.k_in);
    w.u32(config.k_out);
    config.widths.iter().for_each(|&v| w.u32(v));
    encode_loss(&mut w, checkpoint.loss);
    w.opt_u64(checkpoint.palette_digest);
    let s = &checkpoint.scores;
    w.u32(s.epoch);
    w.f64(s.lr);
    w.f64(s.train_loss);
    w.f64(s.val_l2);
    w.f64(s.val_loss);
    w.opt_f64(s.val_ce);

    let mut count = 0;
    model.visit_params(&mut |_| count += 1);
    model.visit_buffers(&mut |_, _| count += 1);
    w.u32(count);
    model.visit_params(&mut |p| w.tensor(&p.name, &p.shape, &p.value));
    model.visit_buffers(&mut |name, b| w.tensor(name, &[b.len()], b));
    w.0
}

fn check_header(r: &mut Reader, kind: u8) -> Result<()> {
    if r.take(4)? != MAGIC {
        return Err(Error::Checkpoint("not a model file".into()));
    }
    let version = r.u32()?;
    if version != VERSION as usize {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let found = r.u8()?;
    if found != kind {
        return Err(Error::Checkpoint(format!("expected model kind {kind}, found {found}")));
    }
    Ok(())
}

pub fn decode_unet(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    check_header(&mut r, KIND_UNET)?;
    let mode = match r.u8()? {
        0 => UNetMode::Regression,
        1 => UNetMode::Classification,
        m => return Err(Error::Checkpoint(format!("unknown network mode {m}"))),
    };
    let k_in = r.u32()?;
    let k_out = r.u32()?;
    let mut widths = [0; 4];
    for v in &mut widths {
        *v = r.u32()?;
    }
    let config = UNetConfig {
        mode,
        k_in,
        k_out,
        widths,
    };
    config.validate().map_err(|e| Error::Checkpoint(e.to_string()))?;
    let loss = decode_loss(&mut r)?;
    let palette_digest = r.opt_u64()?;
    let scores = EpochScores {
        epoch: r.u32()?,
        lr: r.f64()?,
        train_loss: r.f64()?,
        val_l2: r.f64()?,
        val_loss: r.f64()?,
        val_ce: r.opt_f64()?,
    };
    let count = r.u32()?;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        tensors.push(r.tensor()?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after tensors".into()));
    }

    let mut model = UNet::new(config, 0)?;
    let mut next = tensors.into_iter();
    let mut problem: Option<String> = None;
    let mut fill = |name: &str, shape: &[usize], dst: &mut Vec<f64>| {
        if problem.is_some() {
            return;
        }
        match next.next() {
            Some((n, s, v)) if n == name && s == shape => *dst = v,
            Some((n, s, _)) => problem = Some(format!("tensor {n} {s:?} where {name} {shape:?} expected")),
            None => problem = Some(format!("missing tensor {name}")),
        }
    };
    model.visit_params(&mut |p| fill(&p.name, &p.shape.clone(), &mut p.value));
    model.visit_buffers(&mut |name, b| fill(name, &[b.len()], b));
    if let Some(p) = problem {
        return Err(Error::Checkpoint(p));
    }
    if next.next().is_some() {
        return Err(Error::Checkpoint("unexpected extra tensors".into()));
    }
    Ok(Checkpoint {
        model,
        loss,
        scores,
        palette_digest,
    })
}

pub fn encode_tree(checkpoint: &TreeCheckpoint) -> Vec<u8> {
    let m = &checkpoint.model;
    let mut w = header(KIND_TREE);
    w.u32(m.layer_count());
    w.u32(m.classes());
    w.opt_u64(checkpoint.palette_digest);
    w.u32(m.nodes().len());
    for n in m.nodes() {
        match *n {
            TreeNode::Split { layer, low, high } => {
                w.u8(0);
                w.u32(layer);
                w.u32(low);
                w.u32(high);
            }
            TreeNode::Leaf { class } => {
                w.u8(1);
                w.u8(class);
            }
        }
    }
    w.0
}

pub fn decode_tree(bytes: &[u8]) -> Result<TreeCheckpoint> {
    let mut r = Reader { bytes, pos: 0 };
    check_header(&mut r, KIND_TREE)?;
    let layers = r.u32()?;
    let classes = r.u32()?;
    let palette_digest = r.opt_u64()?;
    let n = r.u32()?;
    let mut nodes = Vec::with_capacity(n.min(bytes.len()));
    for _ in 0..n {
        nodes.push(match r.u8()? {
            0 => TreeNode::Split {
                layer: r.u32()?,
                low: r.u32()?,
                high: r.u32()?,
            },
            1 => TreeNode::Leaf { class: r.u8()? },
            t => return Err(Error::Checkpoint(format!("unknown node tag {t}"))),
        });
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint("trailing bytes after nodes".into()));
    }
    Ok(TreeCheckpoint {
        model: TreeModel::from_parts(layers, classes, nodes)?,
        palette_digest,
    })
}

pub fn decode(bytes: &[u8]) -> Result<ModelFile> {
    match bytes.get(8) {
        Some(&KIND_UNET) => decode_unet(bytes).map(ModelFile::UNet),
        Some(&KIND_TREE) => decode_tree(bytes).map(ModelFile::Tree),
        _ => Err(Error::Checkpoint("not a model file".into())),
    }
}

pub fn save(path: &Path, model: &ModelFile) -> Result<()> {
    let bytes = match model {
        ModelFile::UNet(c) => encode_unet(c),
        ModelFile::Tree(t) => encode_tree(t),
    };
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ModelFile> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| match e {
        Error::Checkpoint(m) => Error::Checkpoint(format!("{}: {m}", path.display())),
        other => other,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::infer::infer;
    use crate::raster::CadStack;

    fn sample_checkpoint() -> Checkpoint {
        let config = UNetConfig::classification(3, 8).with_widths([2, 4, 4, 8]);
        let mut model = UNet::new(config, 5).unwrap();
        model.visit_buffers(&mut |_, b| b.iter_mut().enumerate().for_each(|(i, v)| *v += i as f64 * 0.1));
        model.round_to_f32();
        Checkpoint {
            model,
            loss: Loss::Focal { gamma: 2.0 },
            scores: EpochScores {
                epoch: 3,
                lr: 3e-3,
                train_loss: 1.5,
                val_l2: 0.01,
                val_loss: 1.2,
                val_ce: Some(1.7),
            },
            palette_digest: Some(42),
        }
    }

    #[test]
    fn unet_round_trip_is_bit_exact() {
        let cp = sample_checkpoint();
        let back = decode_unet(&encode_unet(&cp)).unwrap();
        assert_eq!(back.scores, cp.scores);
        assert_eq!(back.loss, cp.loss);
        assert_eq!(back.palette_digest, Some(42));
        let mut cad = CadStack::empty(24, 40, 3);
        for x in 0..40 {
            cad.set(x % 3, x % 24, x, true);
        }
        let palette = crate::palette::Palette::from_ordered((0..8).map(|i| [i as f64 / 8.0; 3]).collect()).unwrap();
        let mut a = cp.model.clone();
        let mut b = back.model;
        assert_eq!(
            infer(&mut a, &cad, Some(&palette), 16, 2).unwrap(),
            infer(&mut b, &cad, Some(&palette), 16, 3).unwrap()
        );
        let mut pa = Vec::new();
        let mut pb = Vec::new();
        a.visit_params(&mut |p| pa.push(p.value.clone()));
        b.visit_params(&mut |p| pb.push(p.value.clone()));
        assert_eq!(pa, pb);
    }

    #[test]
    fn corrupt_files_are_rejected() {
        let bytes = encode_unet(&sample_checkpoint());
        assert!(decode_unet(&bytes[..bytes.len() - 3]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode(&bad).is_err());
        let mut extra = bytes;
        extra.push(0);
        assert!(decode_unet(&extra).is_err());
    }

    #[test]
    fn tree_round_trip() {
        let nodes = vec![
            TreeNode::Split { layer: 1, low: 1, high: 2 },
            TreeNode::Leaf { class: 3 },
            TreeNode::Leaf { class: 0 },
        ];
        let cp = TreeCheckpoint {
            model: TreeModel::from_parts(2, 4, nodes).unwrap(),
            palette_digest: None,
        };
        match decode(&encode_tree(&cp)).unwrap() {
            ModelFile::Tree(t) => assert_eq!(t, cp),
            ModelFile::UNet(_) => panic!("wrong kind"),
        }
    }

    #[test]
    fn cyclic_tree_is_rejected() {
        let nodes = vec![TreeNode::Split { layer: 0, low: 0, high: 0 }];
        assert!(TreeModel::from_parts(1, 2, nodes).is_err());
    }
}
