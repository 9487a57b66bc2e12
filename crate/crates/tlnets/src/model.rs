//! The four two-branch forecasting architectures plus single-block ablation
//! variants, assembled from the transform blocks.
//!
//! Hidden layers map `(d, T) -> (d, T)` and sum two branches; the activation
//! sits inside the SVD branch only. The output layer changes the time length
//! from `T` to `tau`: spectral weights for the FT-family, a same-padded conv
//! followed by a dense time projection for the conv-family, a masked matrix
//! for `matrix_only`, and an SVD block read off at the last `tau` steps for
//! `svd_only`.

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::blocks::{
    build_default_mask, conv_block_forward, ft_block_forward, sparse_matrix_forward,
    svd_block_forward, ConvBlockParams, FtBlockParams, SparseMatrixParams, SvdBlockParams,
};
use crate::error::{Error, Result};
use crate::graph::{Activation, Graph, LossKind, NodeId};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    FtSvd,
    FtMatrix,
    FtConv,
    ConvSvd,
    FtOnly,
    SvdOnly,
    MatrixOnly,
    ConvOnly,
}

impl Arch {
    pub const ALL: [Arch; 8] = [
        Arch::FtSvd,
        Arch::FtMatrix,
        Arch::FtConv,
        Arch::ConvSvd,
        Arch::FtOnly,
        Arch::SvdOnly,
        Arch::MatrixOnly,
        Arch::ConvOnly,
    ];

    pub const COMPOSED: [Arch; 4] = [Arch::FtSvd, Arch::FtMatrix, Arch::FtConv, Arch::ConvSvd];

    pub fn name(&self) -> &'static str {
        match self {
            Arch::FtSvd => "ft_svd",
            Arch::FtMatrix => "ft_matrix",
            Arch::FtConv => "ft_conv",
            Arch::ConvSvd => "conv_svd",
            Arch::FtOnly => "ft_only",
            Arch::SvdOnly => "svd_only",
            Arch::MatrixOnly => "matrix_only",
            Arch::ConvOnly => "conv_only",
        }
    }

    pub fn parse(s: &str) -> Result<Arch> {
        Arch::ALL
            .iter()
            .copied()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown arch `{s}`")))
    }

    fn uses_svd(&self) -> bool {
        matches!(self, Arch::FtSvd | Arch::ConvSvd | Arch::SvdOnly)
    }
}

/// Shape-mask description for the sparse matrix blocks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MaskSpec {
    pub band_widths: Vec<usize>,
    pub global_rows: usize,
}

impl Default for MaskSpec {
    fn default() -> Self {
        MaskSpec {
            band_widths: vec![3, 9, 27],
            global_rows: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub arch: Arch,
    /// Input window length T.
    pub input_len: usize,
    /// Prediction horizon tau.
    pub pred_len: usize,
    /// Number of variates d.
    pub channels: usize,
    /// Total layer count L; L-1 hidden layers plus the output layer.
    pub layers: usize,
    #[serde(default = "default_activation")]
    pub activation: Activation,
    #[serde(default)]
    pub mask: MaskSpec,
    #[serde(default = "default_kernel")]
    pub conv_kernel: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_activation() -> Activation {
    Activation::Relu
}

fn default_kernel() -> usize {
    3
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.layers < 2 {
            return Err(Error::invalid(format!(
                "layers must be >= 2, got {}",
                self.layers
            )));
        }
        if self.channels < 1 {
            return Err(Error::invalid("channels must be >= 1"));
        }
        if self.input_len < 2 {
            return Err(Error::invalid("input_len must be >= 2"));
        }
        if self.pred_len < 1 {
            return Err(Error::invalid("pred_len must be >= 1"));
        }
        if self.conv_kernel % 2 == 0 || self.conv_kernel > self.input_len {
            return Err(Error::invalid(format!(
                "conv_kernel {} must be odd and <= input_len",
                self.conv_kernel
            )));
        }
        if self.arch.uses_svd() && self.channels > self.input_len {
            return Err(Error::dim(format!(
                "svd blocks want channels <= input_len; got ({}, {}) — orient the data features x time",
                self.channels, self.input_len
            )));
        }
        if self.arch == Arch::SvdOnly && self.pred_len > self.input_len {
            return Err(Error::invalid(
                "svd_only reads its prediction from the last pred_len steps and needs pred_len <= input_len",
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub value: Arc<Tensor>,
}

/// A configured model: named parameter tensors plus the fixed masks.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    params: Vec<Param>,
    hidden_mask: Option<Arc<Tensor>>,
    output_mask: Option<Arc<Tensor>>,
}

impl Model {
    /// Builds and initializes a model. Two calls with the same config are
    /// bitwise identical.
    pub fn new(config: ModelConfig) -> Result<Model> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let (d, t, tau, k) = (
            config.channels,
            config.input_len,
            config.pred_len,
            config.conv_kernel,
        );
        let hidden_mask = match config.arch {
            Arch::FtMatrix | Arch::MatrixOnly => Some(Arc::new(build_default_mask(
                t,
                t,
                &config.mask.band_widths,
                config.mask.global_rows,
            )?)),
            _ => None,
        };
        let output_mask = match config.arch {
            Arch::MatrixOnly => Some(Arc::new(build_default_mask(
                tau,
                t,
                &config.mask.band_widths,
                config.mask.global_rows,
            )?)),
            _ => None,
        };

        let mut params = Vec::new();
        let mut push = |params: &mut Vec<Param>, name: String, value: Tensor| {
            params.push(Param {
                name,
                value: Arc::new(value),
            });
        };

        for l in 0..config.layers - 1 {
            match config.arch {
                Arch::FtSvd | Arch::FtMatrix | Arch::FtConv | Arch::FtOnly => {
                    let ft = FtBlockParams::init(d, t, t, &mut rng);
                    push(&mut params, format!("layer{l}.ft.w_re"), ft.w_re);
                    push(&mut params, format!("layer{l}.ft.w_im"), ft.w_im);
                }
                Arch::ConvSvd | Arch::ConvOnly => {
                    let conv = ConvBlockParams::init_near_identity(d, k, &mut rng);
                    push(&mut params, format!("layer{l}.conv.kernels"), conv.kernels);
                }
                Arch::SvdOnly => {}
                Arch::MatrixOnly => {}
            }
            match config.arch {
                Arch::FtSvd | Arch::ConvSvd | Arch::SvdOnly => {
                    let svd = SvdBlockParams::init(d, t, &mut rng);
                    push(&mut params, format!("layer{l}.svd.phi"), svd.phi);
                }
                Arch::FtMatrix | Arch::MatrixOnly => {
                    let m =
                        SparseMatrixParams::init(Arc::clone(hidden_mask.as_ref().unwrap()), &mut rng);
                    push(&mut params, format!("layer{l}.matrix.phi"), m.phi_m);
                }
                Arch::FtConv => {
                    let conv = ConvBlockParams::init(d, d, k, &mut rng);
                    push(&mut params, format!("layer{l}.conv.kernels"), conv.kernels);
                }
                _ => {}
            }
        }

        match config.arch {
            Arch::FtSvd | Arch::FtMatrix | Arch::FtConv | Arch::FtOnly => {
                let ft = FtBlockParams::init(d, t, tau, &mut rng);
                push(&mut params, "output.ft.w_re".into(), ft.w_re);
                push(&mut params, "output.ft.w_im".into(), ft.w_im);
            }
            Arch::ConvSvd | Arch::ConvOnly => {
                let conv = ConvBlockParams::init_near_identity(d, k, &mut rng);
                push(&mut params, "output.conv.kernels".into(), conv.kernels);
                let proj = crate::blocks::noise_tensor(&mut rng, vec![t, tau]);
                push(&mut params, "output.proj".into(), proj);
            }
            Arch::SvdOnly => {
                let svd = SvdBlockParams::init(d, t, &mut rng);
                push(&mut params, "output.svd.phi".into(), svd.phi);
            }
            Arch::MatrixOnly => {
                let m =
                    SparseMatrixParams::init(Arc::clone(output_mask.as_ref().unwrap()), &mut rng);
                push(&mut params, "output.matrix.phi".into(), m.phi_m);
            }
        }

        Ok(Model {
            config,
            params,
            hidden_mask,
            output_mask,
        })
    }

    pub fn params(&self) -> &[Param] {
        &self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn param_index(&self, name: &str) -> Result<usize> {
        self.params
            .iter()
            .position(|p| p.name == name)
            .ok_or_else(|| Error::invalid(format!("no parameter named `{name}`")))
    }

    pub fn param(&self, name: &str) -> Result<&Arc<Tensor>> {
        Ok(&self.params[self.param_index(name)?].value)
    }

    /// Mutable access for tests and the optimizer; clones on write only if
    /// some graph still holds the tensor.
    pub fn param_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        let i = self.param_index(name)?;
        Ok(Arc::make_mut(&mut self.params[i].value))
    }

    pub fn param_mut_at(&mut self, index: usize) -> &mut Tensor {
        Arc::make_mut(&mut self.params[index].value)
    }

    /// Replaces every parameter; shapes must match the existing layout.
    pub fn set_params(&mut self, values: &[Tensor]) -> Result<()> {
        if values.len() != self.params.len() {
            return Err(Error::invalid("parameter count mismatch"));
        }
        for (p, v) in self.params.iter_mut().zip(values) {
            if p.value.shape() != v.shape() {
                return Err(Error::dim(format!(
                    "parameter {} has shape {:?}, replacement {:?}",
                    p.name,
                    p.value.shape(),
                    v.shape()
                )));
            }
            p.value = Arc::new(v.clone());
        }
        Ok(())
    }

    /// Registers every parameter on a graph, in layout order.
    pub fn bind(&self, g: &mut Graph, trainable: bool) -> Result<Vec<NodeId>> {
        self.params
            .iter()
            .map(|p| g.leaf_arc(Arc::clone(&p.value), trainable))
            .collect()
    }

    /// Forward pass for one `(d, T)` sample with parameters already bound.
    pub fn forward_bound(&self, g: &mut Graph, ids: &[NodeId], x: &Tensor) -> Result<NodeId> {
        if x.shape() != [self.config.channels, self.config.input_len] {
            return Err(Error::dim(format!(
                "sample shape {:?}, model wants ({}, {})",
                x.shape(),
                self.config.channels,
                self.config.input_len
            )));
        }
        let mut h = g.leaf(x.clone(), false)?;
        for l in 0..self.config.layers - 1 {
            h = self.hidden_layer(g, ids, l, h)?;
        }
        self.output_layer(g, ids, h)
    }

    fn id(&self, ids: &[NodeId], name: &str) -> Result<NodeId> {
        Ok(ids[self.param_index(name)?])
    }

    fn hidden_layer(&self, g: &mut Graph, ids: &[NodeId], l: usize, x: NodeId) -> Result<NodeId> {
        let sigma = self.config.activation;
        match self.config.arch {
            Arch::FtSvd => {
                let ft = self.ft_branch(g, ids, &format!("layer{l}.ft"), x, self.config.input_len)?;
                let phi = self.id(ids, &format!("layer{l}.svd.phi"))?;
                let sv = svd_block_forward(g, x, phi, sigma)?;
                g.add(ft, sv)
            }
            Arch::FtMatrix => {
                let ft = self.ft_branch(g, ids, &format!("layer{l}.ft"), x, self.config.input_len)?;
                let phi = self.id(ids, &format!("layer{l}.matrix.phi"))?;
                let m =
                    sparse_matrix_forward(g, x, phi, Arc::clone(self.hidden_mask.as_ref().unwrap()))?;
                g.add(ft, m)
            }
            Arch::FtConv => {
                let ft = self.ft_branch(g, ids, &format!("layer{l}.ft"), x, self.config.input_len)?;
                let kn = self.id(ids, &format!("layer{l}.conv.kernels"))?;
                let cv = conv_block_forward(g, x, kn)?;
                g.add(ft, cv)
            }
            Arch::ConvSvd => {
                let kn = self.id(ids, &format!("layer{l}.conv.kernels"))?;
                let cv = conv_block_forward(g, x, kn)?;
                let phi = self.id(ids, &format!("layer{l}.svd.phi"))?;
                let sv = svd_block_forward(g, x, phi, sigma)?;
                g.add(cv, sv)
            }
            Arch::FtOnly => self.ft_branch(g, ids, &format!("layer{l}.ft"), x, self.config.input_len),
            Arch::SvdOnly => {
                let phi = self.id(ids, &format!("layer{l}.svd.phi"))?;
                svd_block_forward(g, x, phi, sigma)
            }
            Arch::MatrixOnly => {
                let phi = self.id(ids, &format!("layer{l}.matrix.phi"))?;
                sparse_matrix_forward(g, x, phi, Arc::clone(self.hidden_mask.as_ref().unwrap()))
            }
            Arch::ConvOnly => {
                let kn = self.id(ids, &format!("layer{l}.conv.kernels"))?;
                conv_block_forward(g, x, kn)
            }
        }
    }

    fn output_layer(&self, g: &mut Graph, ids: &[NodeId], x: NodeId) -> Result<NodeId> {
        let tau = self.config.pred_len;
        match self.config.arch {
            Arch::FtSvd | Arch::FtMatrix | Arch::FtConv | Arch::FtOnly => {
                self.ft_branch(g, ids, "output.ft", x, tau)
            }
            Arch::ConvSvd | Arch::ConvOnly => {
                let kn = self.id(ids, "output.conv.kernels")?;
                let cv = conv_block_forward(g, x, kn)?;
                let proj = self.id(ids, "output.proj")?;
                g.matmul(cv, proj)
            }
            Arch::SvdOnly => {
                let phi = self.id(ids, "output.svd.phi")?;
                let sv = svd_block_forward(g, x, phi, self.config.activation)?;
                g.slice_cols(sv, self.config.input_len - tau, tau)
            }
            Arch::MatrixOnly => {
                let phi = self.id(ids, "output.matrix.phi")?;
                sparse_matrix_forward(g, x, phi, Arc::clone(self.output_mask.as_ref().unwrap()))
            }
        }
    }

    fn ft_branch(
        &self,
        g: &mut Graph,
        ids: &[NodeId],
        prefix: &str,
        x: NodeId,
        n_out: usize,
    ) -> Result<NodeId> {
        let w_re = self.id(ids, &format!("{prefix}.w_re"))?;
        let w_im = self.id(ids, &format!("{prefix}.w_im"))?;
        ft_block_forward(g, x, w_re, w_im, n_out)
    }

    /// Batched forward by value: `(B, d, T) -> (B, d, tau)`. Samples run on
    /// independent graphs, in parallel, and assemble in batch order.
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        if x.rank() != 3 {
            return Err(Error::dim("forward expects a (batch, channels, time) tensor"));
        }
        let (b, d, t) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        if d != self.config.channels || t != self.config.input_len {
            return Err(Error::dim(format!(
                "batch shape ({b}, {d}, {t}) does not match model ({}, {})",
                self.config.channels, self.config.input_len
            )));
        }
        let tau = self.config.pred_len;
        let samples: Vec<Tensor> = (0..b).map(|i| slice_sample(x, i)).collect();
        let outs: Result<Vec<Tensor>> = samples
            .par_iter()
            .map(|s| {
                let mut g = Graph::new();
                let ids = self.bind(&mut g, false)?;
                let out = self.forward_bound(&mut g, &ids, s)?;
                Ok(g.value(out).clone())
            })
            .collect();
        let outs = outs?;
        let mut data = vec![0.0; b * d * tau];
        for (i, o) in outs.iter().enumerate() {
            data[i * d * tau..(i + 1) * d * tau].copy_from_slice(o.data());
        }
        Tensor::new(vec![b, d, tau], data)
    }
}

/// Sample `i` of a `(B, d, T)` tensor as a `(d, T)` matrix.
pub fn slice_sample(x: &Tensor, i: usize) -> Tensor {
    let (d, t) = (x.shape()[1], x.shape()[2]);
    let start = i * d * t;
    Tensor::new(vec![d, t], x.data()[start..start + d * t].to_vec()).unwrap()
}

/// Mean squared or mean absolute error over every element.
pub fn loss_value(pred: &Tensor, target: &Tensor, kind: LossKind) -> Result<f64> {
    if pred.shape() != target.shape() {
        return Err(Error::dim(format!(
            "loss shapes differ: {:?} vs {:?}",
            pred.shape(),
            target.shape()
        )));
    }
    let n = pred.len() as f64;
    let total: f64 = match kind {
        LossKind::Mse => pred
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum(),
        LossKind::Mae => pred
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b).abs())
            .sum(),
    };
    Ok(total / n)
}

/// Expands a univariate batch `(B, 1, T)` to `(B, C, T)` features with a
/// bank of conv kernels `(C, 1, K)`; prepend to any architecture for
/// univariate runs.
pub fn expand_univariate(x: &Tensor, kernels: &Tensor) -> Result<Tensor> {
    if x.rank() != 3 || x.shape()[1] != 1 {
        return Err(Error::invalid(format!(
            "expand_univariate wants (B, 1, T) input, got {:?}",
            x.shape()
        )));
    }
    if kernels.rank() != 3 || kernels.shape()[1] != 1 {
        return Err(Error::invalid("expansion kernels must be (C, 1, K)"));
    }
    let (b, t) = (x.shape()[0], x.shape()[2]);
    let c = kernels.shape()[0];
    let mut data = vec![0.0; b * c * t];
    for i in 0..b {
        let sample = slice_sample(x, i);
        let mut g = Graph::new();
        let xn = g.leaf(sample, false)?;
        let kn = g.leaf(kernels.clone(), false)?;
        let out = conv_block_forward(&mut g, xn, kn)?;
        data[i * c * t..(i + 1) * c * t].copy_from_slice(g.value(out).data());
    }
    Tensor::new(vec![b, c, t], data)
}

/// Finite-difference check of every parameter gradient of a model on one
/// random sample; used by tests and the `gradcheck` command. SVD weight
/// matrices are replaced with spectra whose squared singular values stay
/// well separated.
pub fn model_gradcheck(config: &ModelConfig, seed: u64) -> Result<crate::gradcheck::GradCheckSummary> {
    use crate::gradcheck::{check_against_fd, matrix_with_gapped_spectrum, FD_STEP, REL_TOL};
    use rand::Rng;

    let mut model = Model::new(config.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9).wrapping_add(17));
    let names: Vec<String> = model.params().iter().map(|p| p.name.clone()).collect();
    for name in &names {
        if name.ends_with("svd.phi") {
            let shape = model.param(name)?.shape().to_vec();
            *model.param_mut(name)? = matrix_with_gapped_spectrum(&mut rng, shape[0], shape[1]);
        }
    }
    let x = matrix_with_gapped_spectrum(&mut rng, config.channels, config.input_len);
    let target = Tensor::new(
        vec![config.channels, config.pred_len],
        (0..config.channels * config.pred_len)
            .map(|_| rng.gen_range(-1.0..1.0))
            .collect(),
    )?;

    let run = |params: &[Tensor]| -> Result<(f64, Vec<Tensor>)> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = params
            .iter()
            .map(|t| g.leaf(t.clone(), true))
            .collect::<Result<_>>()?;
        let pred = model.forward_bound(&mut g, &ids, &x)?;
        let tn = g.leaf(target.clone(), false)?;
        let l = g.loss(pred, tn, LossKind::Mse)?;
        let loss = g.value(l).item()?;
        let mut grads = g.backward(l)?;
        let out = ids
            .iter()
            .map(|id| {
                grads
                    .take(*id)
                    .unwrap_or_else(|| Tensor::zeros(g.value(*id).shape().to_vec()))
            })
            .collect();
        Ok((loss, out))
    };

    let base: Vec<Tensor> = model.params().iter().map(|p| (*p.value).clone()).collect();
    let (_, analytic) = run(&base)?;
    Ok(check_against_fd(
        &base,
        &analytic,
        |p| run(p).map(|r| r.0).unwrap_or(f64::NAN),
        FD_STEP,
        REL_TOL,
    ))
}
