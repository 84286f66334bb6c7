//! Layers and networks that record their forward pass on a [`Graph`].
//!
//! Parameters live in plain [`Matrix`] values. A forward pass first binds
//! them to graph leaves ([`bind`]), trainable or constant, then consumes
//! the bound ids in the same order [`Network::params`] lists them.

use crate::error::{Error, Result};
use crate::numcore::{Graph, ImageShape, Matrix, NodeId, Rng};

const BN_EPS: f64 = 1e-5;

/// Anything with an ordered parameter list and a graph forward pass.
pub trait Network {
    fn params(&self) -> Vec<&Matrix>;
    fn params_mut(&mut self) -> Vec<&mut Matrix>;
    /// Records the forward pass of `x` using `ids` (as returned by [`bind`]).
    fn forward(&self, g: &mut Graph, x: NodeId, ids: &[NodeId]) -> Result<NodeId>;

    fn num_params(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }
}

/// Registers every parameter of `net` on `g`.
pub fn bind<N: Network + ?Sized>(net: &N, g: &mut Graph, trainable: bool) -> Vec<NodeId> {
    net.params()
        .into_iter()
        .map(|p| if trainable { g.param(p.clone()) } else { g.constant(p.clone()) })
        .collect()
}

/// Forward pass with constant parameters, returning the output value.
pub fn infer<N: Network + ?Sized>(net: &N, x: &Matrix) -> Result<Matrix> {
    let mut g = Graph::new();
    let ids = bind(net, &mut g, false);
    let xn = g.constant(x.clone());
    let out = net.forward(&mut g, xn, &ids)?;
    Ok(g.value(out).clone())
}

fn gaussian(rows: usize, cols: usize, std: f64, rng: &mut Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| std * rng.normal())
}

/// Affine layer with optional batch standardization and ReLU.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `in × out`.
    pub weight: Matrix,
    /// `1 × out`.
    pub bias: Matrix,
    pub batch_norm: bool,
    pub relu: bool,
}

impl Dense {
    pub fn new(input: usize, output: usize, batch_norm: bool, relu: bool, rng: &mut Rng) -> Self {
        let gain = if relu { 2.0 } else { 1.0 };
        Self {
            weight: gaussian(input, output, (gain / input as f64).sqrt(), rng),
            bias: Matrix::zeros(1, output),
            batch_norm,
            relu,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.cols()
    }
}

impl Network for Dense {
    fn params(&self) -> Vec<&Matrix> {
        vec![&self.weight, &self.bias]
    }

    fn params_mut(&mut self) -> Vec<&mut Matrix> {
        vec![&mut self.weight, &mut self.bias]
    }

    fn forward(&self, g: &mut Graph, x: NodeId, ids: &[NodeId]) -> Result<NodeId> {
        let y = g.matmul(x, ids[0])?;
        let mut y = g.add_row(y, ids[1])?;
        if self.batch_norm {
            y = g.batch_norm(y, BN_EPS)?;
        }
        if self.relu {
            y = g.relu(y);
        }
        Ok(y)
    }
}

/// Stack of [`Dense`] layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    /// Layers `dims[0] → dims[1] → … → dims[last]`. Hidden layers use batch
    /// standardization and ReLU; the last layer does iff `activate_last`.
    pub fn new(dims: &[usize], activate_last: bool, rng: &mut Rng) -> Self {
        let n = dims.len().saturating_sub(1);
        let layers = (0..n)
            .map(|i| {
                let act = i + 1 < n || activate_last;
                Dense::new(dims[i], dims[i + 1], act, act, rng)
            })
            .collect();
        Self { layers }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, Dense::input_dim)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Dense::output_dim)
    }
}

impl Network for Mlp {
    fn params(&self) -> Vec<&Matrix> {
        self.layers.iter().flat_map(Dense::params).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.layers.iter_mut().flat_map(Dense::params_mut).collect()
    }

    fn forward(&self, g: &mut Graph, x: NodeId, ids: &[NodeId]) -> Result<NodeId> {
        let mut y = x;
        for (layer, chunk) in self.layers.iter().zip(ids.chunks(2)) {
            y = layer.forward(g, y, chunk)?;
        }
        Ok(y)
    }
}

/// 3×3 same-padded convolution blocks with ReLU; 2×2 average pooling
/// between blocks and global average pooling after the last.
#[derive(Debug, Clone, PartialEq)]
pub struct ConvNet {
    pub input: ImageShape,
    /// `(weight: out × in·9, bias: 1 × out)` per block.
    pub blocks: Vec<(Matrix, Matrix)>,
}

pub const CONV_KERNEL: usize = 3;

impl ConvNet {
    pub fn new(input: ImageShape, channels: &[usize], rng: &mut Rng) -> Result<Self> {
        let pools = channels.len().saturating_sub(1) as u32;
        let div = 1usize << pools;
        if channels.is_empty() || input.height % div != 0 || input.width % div != 0 {
            return Err(Error::InvalidArgument(format!(
                "{} conv blocks do not fit a {}x{} image",
                channels.len(),
                input.height,
                input.width
            )));
        }
        let mut prev = input.channels;
        let mut blocks = Vec::with_capacity(channels.len());
        for &c in channels {
            let fan_in = prev * CONV_KERNEL * CONV_KERNEL;
            blocks.push((gaussian(c, fan_in, (2.0 / fan_in as f64).sqrt(), rng), Matrix::zeros(1, c)));
            prev = c;
        }
        Ok(Self { input, blocks })
    }

    /// Rebuilds the block list from stored parameter shapes.
    pub fn from_params(input: ImageShape, blocks: Vec<(Matrix, Matrix)>) -> Result<Self> {
        let mut prev = input.channels;
        for (w, b) in &blocks {
            if w.cols() != prev * CONV_KERNEL * CONV_KERNEL || b.shape() != (1, w.rows()) {
                return Err(Error::Format(format!("conv block shape {:?} after {prev} channels", w.shape())));
            }
            prev = w.rows();
        }
        Ok(Self { input, blocks })
    }

    pub fn output_dim(&self) -> usize {
        self.blocks.last().map_or(0, |(w, _)| w.rows())
    }
}

impl Network for ConvNet {
    fn params(&self) -> Vec<&Matrix> {
        self.blocks.iter().flat_map(|(w, b)| [w, b]).collect()
    }

    fn params_mut(&mut self) -> Vec<&mut Matrix> {
        self.blocks.iter_mut().flat_map(|(w, b)| [w, b]).collect()
    }

    fn forward(&self, g: &mut Graph, x: NodeId, ids: &[NodeId]) -> Result<NodeId> {
        let mut shape = self.input;
        let mut y = x;
        let last = self.blocks.len() - 1;
        for (k, ((w, _), chunk)) in self.blocks.iter().zip(ids.chunks(2)).enumerate() {
            y = g.conv2d(y, chunk[0], chunk[1], shape, CONV_KERNEL)?;
            y = g.relu(y);
            shape = ImageShape { channels: w.rows(), ..shape };
            if k < last {
                y = g.avg_pool2(y, shape)?;
                shape = ImageShape { channels: shape.channels, height: shape.height / 2, width: shape.width / 2 };
            } else {
                y = g.global_avg_pool(y, shape)?;
            }
        }
        Ok(y)
    }
}

/// Representation network before the projector.
#[derive(Debug, Clone, PartialEq)]
pub enum Backbone {
    Mlp(Mlp),
    Conv(ConvNet),
}

impl Backbone {
    pub fn output_dim(&self) -> usize {
        match self {
            Backbone::Mlp(m) => m.output_dim(),
            Backbone::Conv(c) => c.output_dim(),
        }
    }
}

impl Network for Backbone {
    fn params(&self) -> Vec<&Matrix> {
        match self {
            Backbone::Mlp(m) => m.params(),
            Backbone::Conv(c) => c.params(),
        }
    }

    fn params_mut(&mut self) -> Vec<&mut Matrix> {
        match self {
            Backbone::Mlp(m) => m.params_mut(),
            Backbone::Conv(c) => c.params_mut(),
        }
    }

    fn forward(&self, g: &mut Graph, x: NodeId, ids: &[NodeId]) -> Result<NodeId> {
        match self {
            Backbone::Mlp(m) => m.forward(g, x, ids),
            Backbone::Conv(c) => c.forward(g, x, ids),
        }
    }
}

/// Backbone followed by a two-layer projector to dimension `D`.
#[derive(Debug, Clone, PartialEq)]
pub struct Encoder {
    pub backbone: Backbone,
    pub projector: Mlp,
}

/// Graph nodes of one encoder pass.
#[derive(Debug, Clone, Copy)]
pub struct EncoderNodes {
    pub representation: NodeId,
    pub projection: NodeId,
}

impl Encoder {
    pub fn new(backbone: Backbone, proj_hidden: usize, dim: usize, rng: &mut Rng) -> Self {
        let projector = Mlp::new(&[backbone.output_dim(), proj_hidden, dim], false, rng);
        Self { backbone, projector }
    }

    pub fn dim(&self) -> usize {
        self.projector.output_dim()
    }

    pub fn representation_dim(&self) -> usize {
        self.backbone.output_dim()
    }

    fn split_ids<'a>(&self, ids: &'a [NodeId]) -> (&'a [NodeId], &'a [NodeId]) {
        ids.split_at(self.backbone.params().len())
    }

    pub fn encode(&self, g: &mut Graph, x: NodeId, ids: &[NodeId]) -> Result<EncoderNodes> {
        let (b, p) = self.split_ids(ids);
        let representation = self.backbone.forward(g, x, b)?;
        let projection = self.projector.forward(g, representation, p)?;
        Ok(EncoderNodes { representation, projection })
    }

    /// Backbone features with constant parameters, in chunks of `batch` rows.
    pub fn represent(&self, x: &Matrix, batch: usize) -> Result<Matrix> {
        let mut out = Matrix::zeros(x.rows(), self.representation_dim());
        let idx: Vec<usize> = (0..x.rows()).collect();
        for chunk in idx.chunks(batch.max(1)) {
            let y = infer(&self.backbone, &x.select_rows(chunk))?;
            for (k, &r) in chunk.iter().enumerate() {
                out.row_mut(r).copy_from_slice(y.row(k));
            }
        }
        Ok(out)
    }
}

impl Network for Encoder {
    fn params(&self) -> Vec<&Matrix> {
        let mut p = self.backbone.params();
        p.extend(self.projector.params());
        p
    }

    fn params_mut(&mut self) -> Vec<&mut Matrix> {
        let mut p = self.backbone.params_mut();
        p.extend(self.projector.params_mut());
        p
    }

    fn forward(&self, g: &mut Graph, x: NodeId, ids: &[NodeId]) -> Result<NodeId> {
        Ok(self.encode(g, x, ids)?.projection)
    }
}
