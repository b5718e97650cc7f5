//! Siamese feature extractor and its checkpoint format.
//!
//! One parameter set encodes both augmented views (siamese sharing). Each
//! view runs a graph branch (propagate-then-transform layers over the view's
//! propagation matrix) and an attribute branch (affine layers over the view's
//! features); the per-view embedding is the mean of the enabled branch
//! outputs, and the fused embedding is the mean of the two views. A decoder
//! mirroring the attribute branch supports the reconstruction loss.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::Rng;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{stream, sub_rng};
use crate::tape::{Tape, Var};

/// Layer widths: `input → hidden[0] → … → latent`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderDims {
    pub input: usize,
    pub hidden: Vec<usize>,
    pub latent: usize,
}

impl EncoderDims {
    /// Default stack for a `D`-dimensional dataset: one 256-wide hidden
    /// layer into a 20-dimensional latent space.
    pub fn for_input(input: usize) -> Self {
        Self {
            input,
            hidden: vec![256],
            latent: 20,
        }
    }

    /// The widths traversed encoding (input first) — decoder reverses them.
    fn chain(&self) -> Vec<usize> {
        let mut c = Vec::with_capacity(self.hidden.len() + 2);
        c.push(self.input);
        c.extend_from_slice(&self.hidden);
        c.push(self.latent);
        c
    }
}

/// One affine layer: weight plus a single-row bias.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub w: Array2<f64>,
    pub b: Array2<f64>,
}

/// All trainable encoder parameters, shared by both views.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderState {
    pub dims: EncoderDims,
    pub graph_layers: Vec<Layer>,
    pub att_layers: Vec<Layer>,
    pub dec_layers: Vec<Layer>,
    pub use_graph_branch: bool,
    pub use_attribute_branch: bool,
}

fn glorot_layers(dims: &[usize], rng: &mut rand_chacha::ChaCha8Rng) -> Vec<Layer> {
    dims.windows(2)
        .map(|pair| {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let mut w = Array2::zeros((fan_in, fan_out));
            w.iter_mut()
                .for_each(|v| *v = rng.random_range(-bound..bound));
            Layer {
                w,
                b: Array2::zeros((1, fan_out)),
            }
        })
        .collect()
}

impl EncoderState {
    /// Seed-reproducible initialization: weights uniform in
    /// ±sqrt(6/(fan_in+fan_out)), biases zero.
    pub fn init(dims: EncoderDims, seed: u64) -> Self {
        let mut rng = sub_rng(seed, stream::WEIGHT_INIT);
        let chain = dims.chain();
        let mut rev = chain.clone();
        rev.reverse();
        Self {
            graph_layers: glorot_layers(&chain, &mut rng),
            att_layers: glorot_layers(&chain, &mut rng),
            dec_layers: glorot_layers(&rev, &mut rng),
            dims,
            use_graph_branch: true,
            use_attribute_branch: true,
        }
    }

    /// Trainable matrices in declaration order (graph, attribute, decoder).
    pub fn params(&self) -> Vec<&Array2<f64>> {
        self.layer_iter().flat_map(|l| [&l.w, &l.b]).collect()
    }

    pub fn params_mut(&mut self) -> Vec<&mut Array2<f64>> {
        self.graph_layers
            .iter_mut()
            .chain(self.att_layers.iter_mut())
            .chain(self.dec_layers.iter_mut())
            .flat_map(|l| [&mut l.w, &mut l.b])
            .collect()
    }

    fn layer_iter(&self) -> impl Iterator<Item = &Layer> {
        self.graph_layers
            .iter()
            .chain(self.att_layers.iter())
            .chain(self.dec_layers.iter())
    }

    /// Place every parameter on a tape, in [`Self::params`] order.
    pub fn to_tape(&self, tape: &mut Tape, trainable: bool) -> EncoderVars {
        let mut emit = |layers: &[Layer]| -> Vec<(Var, Var)> {
            layers
                .iter()
                .map(|l| {
                    if trainable {
                        (tape.param(l.w.clone()), tape.param(l.b.clone()))
                    } else {
                        (tape.constant(l.w.clone()), tape.constant(l.b.clone()))
                    }
                })
                .collect()
        };
        EncoderVars {
            graph: emit(&self.graph_layers),
            att: emit(&self.att_layers),
            dec: emit(&self.dec_layers),
            use_graph_branch: self.use_graph_branch,
            use_attribute_branch: self.use_attribute_branch,
        }
    }

    /// Value-only forward pass for one view.
    pub fn encode(&self, x: &Array2<f64>, a: &Array2<f64>) -> Result<Array2<f64>> {
        let mut tape = Tape::new();
        let vars = self.to_tape(&mut tape, false);
        let xv = constant_checked(&mut tape, x, self.dims.input)?;
        let av = tape.constant(a.clone());
        let z = vars.encode(&mut tape, xv, av);
        Ok(tape.value(z).clone())
    }
}

fn constant_checked(tape: &mut Tape, x: &Array2<f64>, input: usize) -> Result<Var> {
    if x.ncols() != input {
        return Err(Error::ShapeMismatch {
            expected: format!("{input} feature columns"),
            got: format!("{}", x.ncols()),
        });
    }
    Ok(tape.constant(x.clone()))
}

/// Tape handles for the encoder parameters plus branch switches.
pub struct EncoderVars {
    pub graph: Vec<(Var, Var)>,
    pub att: Vec<(Var, Var)>,
    pub dec: Vec<(Var, Var)>,
    use_graph_branch: bool,
    use_attribute_branch: bool,
}

impl EncoderVars {
    /// Tape handles in [`EncoderState::params`] order.
    pub fn all(&self) -> Vec<Var> {
        self.graph
            .iter()
            .chain(self.att.iter())
            .chain(self.dec.iter())
            .flat_map(|&(w, b)| [w, b])
            .collect()
    }

    /// Graph branch only: `h ← act(A · h · W + b)` per layer, linear output.
    pub fn graph_branch(&self, tape: &mut Tape, x: Var, a: Var) -> Var {
        let last = self.graph.len() - 1;
        let mut h = x;
        for (i, &(w, b)) in self.graph.iter().enumerate() {
            let prop = tape.matmul(a, h);
            let lin = tape.matmul(prop, w);
            h = tape.add_row_broadcast(lin, b);
            if i != last {
                h = tape.tanh(h);
            }
        }
        h
    }

    /// Attribute branch only: affine layers, linear output.
    pub fn attribute_branch(&self, tape: &mut Tape, x: Var) -> Var {
        let last = self.att.len() - 1;
        let mut h = x;
        for (i, &(w, b)) in self.att.iter().enumerate() {
            let lin = tape.matmul(h, w);
            h = tape.add_row_broadcast(lin, b);
            if i != last {
                h = tape.tanh(h);
            }
        }
        h
    }

    /// One view's embedding: mean of the enabled branch outputs.
    pub fn encode(&self, tape: &mut Tape, x: Var, a: Var) -> Var {
        match (self.use_graph_branch, self.use_attribute_branch) {
            (true, true) => {
                let g = self.graph_branch(tape, x, a);
                let t = self.attribute_branch(tape, x);
                let sum = tape.add(g, t);
                tape.scale(sum, 0.5)
            }
            (true, false) => self.graph_branch(tape, x, a),
            (false, true) => self.attribute_branch(tape, x),
            (false, false) => panic!("at least one encoder branch must be enabled"),
        }
    }

    /// Decode a latent matrix back to feature space.
    pub fn decode(&self, tape: &mut Tape, z: Var) -> Var {
        let last = self.dec.len() - 1;
        let mut h = z;
        for (i, &(w, b)) in self.dec.iter().enumerate() {
            let lin = tape.matmul(h, w);
            h = tape.add_row_broadcast(lin, b);
            if i != last {
                h = tape.tanh(h);
            }
        }
        h
    }
}

/// The two per-view embeddings and their fusion.
#[derive(Debug, Clone)]
pub struct LatentViews {
    pub z1: Array2<f64>,
    pub z2: Array2<f64>,
    pub z_fused: Array2<f64>,
}

/// Elementwise mean of the two view embeddings.
pub fn fuse(z1: &Array2<f64>, z2: &Array2<f64>) -> Result<Array2<f64>> {
    if z1.dim() != z2.dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", z1.dim()),
            got: format!("{:?}", z2.dim()),
        });
    }
    Ok((z1 + z2) * 0.5)
}

/// Value-level encoding of both views plus fusion.
pub fn encode_views(
    state: &EncoderState,
    x1: &Array2<f64>,
    x2: &Array2<f64>,
    a1: &Array2<f64>,
    a2: &Array2<f64>,
) -> Result<LatentViews> {
    let z1 = state.encode(x1, a1)?;
    let z2 = state.encode(x2, a2)?;
    let z_fused = fuse(&z1, &z2)?;
    Ok(LatentViews { z1, z2, z_fused })
}

/// Tape nodes of the reconstruction loss and its two components.
pub struct ReconVars {
    /// Feature mean-squared error, averaged over views.
    pub feature: Var,
    /// Structure term: mean((A_view − σ(Z Zᵀ))²), averaged over views.
    pub adjacency: Var,
    /// feature + weight · adjacency.
    pub total: Var,
}

/// Build the reconstruction loss on the tape.
///
/// Per view: MSE between decoded features and that view's perturbed features,
/// plus the weighted structure term against the view's propagation matrix.
pub fn recon_loss_on_tape(
    tape: &mut Tape,
    vars: &EncoderVars,
    x: [Var; 2],
    a: [Var; 2],
    z: [Var; 2],
    adjacency_weight: f64,
) -> ReconVars {
    let mut feature = None;
    let mut adjacency = None;
    for v in 0..2 {
        let (n, d) = tape.value(x[v]).dim();
        let xhat = vars.decode(tape, z[v]);
        let diff = tape.sub(xhat, x[v]);
        let sq = tape.hadamard(diff, diff);
        let sum = tape.sum_all(sq);
        let mse = tape.scale(sum, 1.0 / (n * d) as f64);
        feature = Some(match feature {
            None => mse,
            Some(acc) => tape.add(acc, mse),
        });

        let zt = tape.transpose(z[v]);
        let zzt = tape.matmul(z[v], zt);
        let sig = tape.sigmoid(zzt);
        let adiff = tape.sub(a[v], sig);
        let asq = tape.hadamard(adiff, adiff);
        let asum = tape.sum_all(asq);
        let aterm = tape.scale(asum, 1.0 / (n * n) as f64);
        adjacency = Some(match adjacency {
            None => aterm,
            Some(acc) => tape.add(acc, aterm),
        });
    }
    let feature = tape.scale(feature.expect("two views"), 0.5);
    let adjacency = tape.scale(adjacency.expect("two views"), 0.5);
    let weighted = tape.scale(adjacency, adjacency_weight);
    let total = tape.add(feature, weighted);
    ReconVars {
        feature,
        adjacency,
        total,
    }
}

/// Value-level reconstruction loss (feature term, adjacency term, total).
pub fn reconstruction_loss(
    state: &EncoderState,
    x: [&Array2<f64>; 2],
    a: [&Array2<f64>; 2],
    adjacency_weight: f64,
) -> Result<(f64, f64, f64)> {
    let mut tape = Tape::new();
    let vars = state.to_tape(&mut tape, false);
    let xv = [
        constant_checked(&mut tape, x[0], state.dims.input)?,
        constant_checked(&mut tape, x[1], state.dims.input)?,
    ];
    let av = [tape.constant(a[0].clone()), tape.constant(a[1].clone())];
    let zv = [
        vars.encode(&mut tape, xv[0], av[0]),
        vars.encode(&mut tape, xv[1], av[1]),
    ];
    let recon = recon_loss_on_tape(&mut tape, &vars, xv, av, zv, adjacency_weight);
    Ok((
        tape.scalar(recon.feature),
        tape.scalar(recon.adjacency),
        tape.scalar(recon.total),
    ))
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"DGCK";
const CHECKPOINT_VERSION: u32 = 1;

fn push_u32(buf: &mut Vec<u8>, v: u32) {
    buf.extend_from_slice(&v.to_le_bytes());
}

fn push_matrix(buf: &mut Vec<u8>, m: &Array2<f64>) {
    for v in m.iter() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Checkpoint(format!("{}: truncated file", self.path)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn matrix(&mut self, rows: usize, cols: usize) -> Result<Array2<f64>> {
        let raw = self.take(rows * cols * 8)?;
        let mut m = Array2::zeros((rows, cols));
        for (i, chunk) in raw.chunks_exact(8).enumerate() {
            m[[i / cols, i % cols]] = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        Ok(m)
    }
}

/// Serialize the encoder (and, optionally, cluster centers) to a binary
/// container plus a text manifest (`<path>.manifest`) listing every block
/// shape and the container's SHA-256.
pub fn save_checkpoint(
    state: &EncoderState,
    centers: Option<&Array2<f64>>,
    path: &Path,
) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    push_u32(&mut buf, CHECKPOINT_VERSION);
    push_u32(&mut buf, state.dims.input as u32);
    push_u32(&mut buf, state.dims.hidden.len() as u32);
    for &h in &state.dims.hidden {
        push_u32(&mut buf, h as u32);
    }
    push_u32(&mut buf, state.dims.latent as u32);
    buf.push(state.use_graph_branch as u8);
    buf.push(state.use_attribute_branch as u8);
    for p in state.params() {
        push_matrix(&mut buf, p);
    }
    match centers {
        Some(c) => {
            buf.push(1);
            push_u32(&mut buf, c.nrows() as u32);
            push_matrix(&mut buf, c);
        }
        None => buf.push(0),
    }
    fs::write(path, &buf)?;

    let mut hasher = Sha256::new();
    hasher.update(&buf);
    let digest = hex::encode(hasher.finalize());

    let mut manifest = String::new();
    manifest.push_str("format = dualgc-checkpoint\n");
    manifest.push_str(&format!("version = {CHECKPOINT_VERSION}\n"));
    let chain: Vec<String> = state.dims.chain().iter().map(usize::to_string).collect();
    manifest.push_str(&format!("dims = {}\n", chain.join(" -> ")));
    let names = ["graph", "attribute", "decoder"];
    let groups = [&state.graph_layers, &state.att_layers, &state.dec_layers];
    for (name, layers) in names.iter().zip(groups.iter()) {
        for (i, l) in layers.iter().enumerate() {
            manifest.push_str(&format!(
                "block {name}.{i}.w shape {}x{}\n",
                l.w.nrows(),
                l.w.ncols()
            ));
            manifest.push_str(&format!(
                "block {name}.{i}.b shape {}x{}\n",
                l.b.nrows(),
                l.b.ncols()
            ));
        }
    }
    if let Some(c) = centers {
        manifest.push_str(&format!(
            "block centers shape {}x{}\n",
            c.nrows(),
            c.ncols()
        ));
    }
    manifest.push_str(&format!("sha256 = {digest}\n"));
    fs::write(manifest_path(path), manifest)?;
    Ok(())
}

fn manifest_path(path: &Path) -> std::path::PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".manifest");
    os.into()
}

/// Load a checkpoint container written by [`save_checkpoint`].
pub fn load_checkpoint(path: &Path) -> Result<(EncoderState, Option<Array2<f64>>)> {
    let bytes = fs::read(path)?;
    let mut r = Reader {
        bytes: &bytes,
        pos: 0,
        path: path.display().to_string(),
    };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Checkpoint(format!(
            "{}: not a checkpoint container",
            path.display()
        )));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint(format!(
            "{}: unsupported version {version}",
            path.display()
        )));
    }
    let input = r.u32()? as usize;
    let n_hidden = r.u32()? as usize;
    let hidden: Vec<usize> = (0..n_hidden)
        .map(|_| r.u32().map(|v| v as usize))
        .collect::<Result<_>>()?;
    let latent = r.u32()? as usize;
    let dims = EncoderDims {
        input,
        hidden,
        latent,
    };
    let use_graph_branch = r.u8()? != 0;
    let use_attribute_branch = r.u8()? != 0;

    let chain = dims.chain();
    let mut rev = chain.clone();
    rev.reverse();
    let read_layers = |dims: &[usize], r: &mut Reader| -> Result<Vec<Layer>> {
        dims.windows(2)
            .map(|pair| {
                Ok(Layer {
                    w: r.matrix(pair[0], pair[1])?,
                    b: r.matrix(1, pair[1])?,
                })
            })
            .collect()
    };
    let graph_layers = read_layers(&chain, &mut r)?;
    let att_layers = read_layers(&chain, &mut r)?;
    let dec_layers = read_layers(&rev, &mut r)?;
    let centers = if r.u8()? != 0 {
        let c = r.u32()? as usize;
        Some(r.matrix(c, dims.latent)?)
    } else {
        None
    };
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{}: {} trailing bytes",
            path.display(),
            bytes.len() - r.pos
        )));
    }
    Ok((
        EncoderState {
            dims,
            graph_layers,
            att_layers,
            dec_layers,
            use_graph_branch,
            use_attribute_branch,
        },
        centers,
    ))
}
