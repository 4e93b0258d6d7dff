//! Autodecoders mapping per-image latents to template displacements: the
//! graph-convolutional decoder and a fully connected baseline, with exact
//! reverse-mode gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::Conformation;
use crate::graph::ProteinGraph;

/// Scale of the normal distribution latents are drawn from.
pub const LATENT_INIT_SCALE: f64 = 0.01;

/// Affine map `y = Wᵀx + b`, `W` stored `in×out` row-major.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Linear {
    pub in_dim: usize,
    pub out_dim: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
}

impl Linear {
    pub fn zeros(in_dim: usize, out_dim: usize) -> Self {
        Self {
            in_dim,
            out_dim,
            weight: vec![0.0; in_dim * out_dim],
            bias: vec![0.0; out_dim],
        }
    }

    /// Fan-in scaled uniform weights, zero bias.
    fn init(in_dim: usize, out_dim: usize, rng: &mut impl Rng) -> Self {
        let bound = 1.0 / (in_dim as f64).sqrt();
        let mut l = Self::zeros(in_dim, out_dim);
        for w in &mut l.weight {
            *w = rng.random_range(-bound..bound);
        }
        l
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    /// Applies the map to every row of an `rows×in` block.
    fn forward_rows(&self, x: &[f64], rows: usize) -> Vec<f64> {
        let mut y = Vec::with_capacity(rows * self.out_dim);
        for r in 0..rows {
            y.extend_from_slice(&self.bias);
            let out = &mut y[r * self.out_dim..];
            for (k, &xv) in x[r * self.in_dim..(r + 1) * self.in_dim].iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                let w = &self.weight[k * self.out_dim..(k + 1) * self.out_dim];
                for (o, wv) in out.iter_mut().zip(w) {
                    *o += xv * wv;
                }
            }
        }
        y
    }

    /// Accumulates parameter gradients into `grad` and returns the input gradient.
    fn backward_rows(&self, x: &[f64], gy: &[f64], rows: usize, grad: &mut Linear) -> Vec<f64> {
        let mut gx = vec![0.0; rows * self.in_dim];
        for r in 0..rows {
            let g = &gy[r * self.out_dim..(r + 1) * self.out_dim];
            for (gb, gv) in grad.bias.iter_mut().zip(g) {
                *gb += gv;
            }
            let xr = &x[r * self.in_dim..(r + 1) * self.in_dim];
            let gxr = &mut gx[r * self.in_dim..(r + 1) * self.in_dim];
            for k in 0..self.in_dim {
                let w = &self.weight[k * self.out_dim..(k + 1) * self.out_dim];
                let gw = &mut grad.weight[k * self.out_dim..(k + 1) * self.out_dim];
                let xv = xr[k];
                let mut acc = 0.0;
                for o in 0..self.out_dim {
                    gw[o] += xv * g[o];
                    acc += w[o] * g[o];
                }
                gxr[k] = acc;
            }
        }
        gx
    }
}

fn relu_grad(pre: f64) -> f64 {
    if pre > 0.0 {
        1.0
    } else {
        0.0
    }
}

/// How a graph-convolution layer is combined with its input.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SkipForm {
    /// `X + ReLU(conv(X))`
    #[default]
    Residual,
    /// `ReLU(X + conv(X))`
    Inside,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GnnConfig {
    pub latent_dim: usize,
    pub node_count: usize,
    /// Width of the node features produced by the latent embedding.
    pub embed_dim: usize,
    /// Width of the graph-convolution layers.
    pub channels: usize,
    pub layers: usize,
    #[serde(default)]
    pub skip: SkipForm,
}

impl GnnConfig {
    /// Input width of layer `l`.
    fn layer_in(&self, l: usize) -> usize {
        if l == 0 {
            self.embed_dim
        } else {
            self.channels
        }
    }

    fn head_in(&self) -> usize {
        if self.layers == 0 {
            self.embed_dim
        } else {
            self.channels
        }
    }

    fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.node_count == 0 || self.embed_dim == 0 || self.channels == 0 {
            return Err(Error::InvalidInput(format!("GNN dimensions must be positive: {self:?}")));
        }
        Ok(())
    }

    /// Trainable weights and biases, excluding latents.
    pub fn param_count(&self) -> usize {
        let (d, n, e, c) = (self.latent_dim, self.node_count, self.embed_dim, self.channels);
        let embed = d * n * e + n * e;
        let layers: usize = (0..self.layers).map(|l| self.layer_in(l) * c + c).sum();
        let head = self.head_in() * 3 + 3;
        embed + layers + head
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub latent_dim: usize,
    pub node_count: usize,
    pub hidden_layers: usize,
    pub width: usize,
}

impl MlpConfig {
    fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.latent_dim];
        w.extend(std::iter::repeat_n(self.width, self.hidden_layers));
        w.push(3 * self.node_count);
        w
    }

    fn validate(&self) -> Result<()> {
        if self.latent_dim == 0 || self.node_count == 0 || (self.hidden_layers > 0 && self.width == 0) {
            return Err(Error::InvalidInput(format!("MLP dimensions must be positive: {self:?}")));
        }
        Ok(())
    }

    pub fn param_count(&self) -> usize {
        self.widths().windows(2).map(|w| w[0] * w[1] + w[1]).sum()
    }
}

/// Weights of the graph-convolutional autodecoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecoderParams {
    pub config: GnnConfig,
    /// Latent to per-node features, `d → N·E`.
    pub embed: Linear,
    pub layers: Vec<Linear>,
    /// Node-wise output layer producing displacements.
    pub head: Linear,
}

impl DecoderParams {
    pub fn zeros(config: GnnConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            embed: Linear::zeros(config.latent_dim, config.node_count * config.embed_dim),
            layers: (0..config.layers).map(|l| Linear::zeros(config.layer_in(l), config.channels)).collect(),
            head: Linear::zeros(config.head_in(), 3),
        })
    }

    pub fn init(config: GnnConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            config,
            embed: Linear::init(config.latent_dim, config.node_count * config.embed_dim, &mut rng),
            layers: (0..config.layers)
                .map(|l| Linear::init(config.layer_in(l), config.channels, &mut rng))
                .collect(),
            head: Linear::init(config.head_in(), 3, &mut rng),
        })
    }

    pub fn param_count(&self) -> usize {
        self.embed.param_count() + self.layers.iter().map(Linear::param_count).sum::<usize>() + self.head.param_count()
    }

    fn linears(&self) -> impl Iterator<Item = (String, &Linear)> {
        std::iter::once(("embed".to_string(), &self.embed))
            .chain(self.layers.iter().enumerate().map(|(i, l)| (format!("gnn{i}"), l)))
            .chain(std::iter::once(("head".to_string(), &self.head)))
    }

    fn linears_mut(&mut self) -> impl Iterator<Item = &mut Linear> {
        std::iter::once(&mut self.embed).chain(self.layers.iter_mut()).chain(std::iter::once(&mut self.head))
    }

    fn check(&self, z: &[f64], graph: &ProteinGraph, template: &Conformation) -> Result<()> {
        let c = &self.config;
        if z.len() != c.latent_dim {
            return Err(Error::Dimension(format!("latent of size {} for decoder expecting {}", z.len(), c.latent_dim)));
        }
        if graph.node_count() != c.node_count || template.residue_count() != c.node_count {
            return Err(Error::Dimension(format!(
                "decoder built for {} nodes, graph has {} and template {}",
                c.node_count,
                graph.node_count(),
                template.residue_count()
            )));
        }
        Ok(())
    }

    fn has_skip(&self, l: usize) -> bool {
        self.layers[l].in_dim == self.layers[l].out_dim
    }

    fn run(&self, z: &[f64], graph: &ProteinGraph) -> GnnTape {
        let n = self.config.node_count;
        let mut feats = vec![self.embed.forward_rows(z, 1)];
        let mut aggs = Vec::with_capacity(self.layers.len());
        let mut pres = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let x = feats.last().expect("embedding present");
            let mut agg = vec![0.0; x.len()];
            graph.aggregate_into(x, layer.in_dim, &mut agg);
            let h = layer.forward_rows(&agg, n);
            let skip = self.has_skip(l);
            let next: Vec<f64> = match (skip, self.config.skip) {
                (true, SkipForm::Residual) => x.iter().zip(&h).map(|(xv, hv)| xv + hv.max(0.0)).collect(),
                (true, SkipForm::Inside) => x.iter().zip(&h).map(|(xv, hv)| (xv + hv).max(0.0)).collect(),
                (false, _) => h.iter().map(|hv| hv.max(0.0)).collect(),
            };
            // for the inside form the ReLU argument is X + H; store that as the pre-activation
            let pre = match (skip, self.config.skip) {
                (true, SkipForm::Inside) => x.iter().zip(&h).map(|(xv, hv)| xv + hv).collect(),
                _ => h,
            };
            aggs.push(agg);
            pres.push(pre);
            feats.push(next);
        }
        let delta = self.head.forward_rows(feats.last().expect("features present"), n);
        GnnTape { feats, aggs, pres, delta }
    }

    /// Displacement field `Δ` (row-major `N×3`) for latent `z`.
    pub fn displacements(&self, z: &[f64], graph: &ProteinGraph) -> Vec<f64> {
        self.run(z, graph).delta
    }

    fn backward(&self, z: &[f64], graph: &ProteinGraph, tape: &GnnTape, grad_out: &[f64]) -> (DecoderParams, Vec<f64>) {
        let n = self.config.node_count;
        let mut grad = DecoderParams::zeros(self.config).expect("config already validated");
        let mut gx = self.head.backward_rows(tape.feats.last().expect("features"), grad_out, n, &mut grad.head);
        for l in (0..self.layers.len()).rev() {
            let layer = &self.layers[l];
            let skip = self.has_skip(l);
            let pre = &tape.pres[l];
            let gh: Vec<f64> = gx.iter().zip(pre).map(|(g, p)| g * relu_grad(*p)).collect();
            let ga = layer.backward_rows(&tape.aggs[l], &gh, n, &mut grad.layers[l]);
            let mut gprev = vec![0.0; ga.len()];
            graph.aggregate_into(&ga, layer.in_dim, &mut gprev);
            if skip {
                match self.config.skip {
                    SkipForm::Residual => {
                        for (gp, g) in gprev.iter_mut().zip(&gx) {
                            *gp += g;
                        }
                    }
                    SkipForm::Inside => {
                        for (gp, g) in gprev.iter_mut().zip(&gh) {
                            *gp += g;
                        }
                    }
                }
            }
            gx = gprev;
        }
        let gz = self.embed.backward_rows(z, &gx, 1, &mut grad.embed);
        (grad, gz)
    }
}

struct GnnTape {
    feats: Vec<Vec<f64>>,
    aggs: Vec<Vec<f64>>,
    pres: Vec<Vec<f64>>,
    delta: Vec<f64>,
}

fn displaced(template: &Conformation, delta: &[f64]) -> Result<Conformation> {
    let mut flat = template.to_flat();
    for (x, d) in flat.iter_mut().zip(delta) {
        *x += d;
    }
    Conformation::from_flat(&flat)
}

/// `f_θ(z; G, x₀) = x₀ + Δ`.
pub fn decode_gnn(params: &DecoderParams, z: &[f64], graph: &ProteinGraph, template: &Conformation) -> Result<Conformation> {
    params.check(z, graph, template)?;
    displaced(template, &params.run(z, graph).delta)
}

/// Gradients of `⟨grad_out, decode_gnn(z)⟩` with respect to every weight and to `z`.
pub fn decode_gnn_backward(
    params: &DecoderParams,
    z: &[f64],
    graph: &ProteinGraph,
    template: &Conformation,
    grad_out: &[f64],
) -> Result<(DecoderParams, Vec<f64>)> {
    params.check(z, graph, template)?;
    check_grad_out(grad_out, params.config.node_count)?;
    let tape = params.run(z, graph);
    Ok(params.backward(z, graph, &tape, grad_out))
}

fn check_grad_out(grad_out: &[f64], n: usize) -> Result<()> {
    if grad_out.len() != 3 * n {
        return Err(Error::Dimension(format!("output gradient of length {} for {n} residues", grad_out.len())));
    }
    if grad_out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("output gradient".into()));
    }
    Ok(())
}

/// Weights of the fully connected baseline decoder.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub config: MlpConfig,
    /// Hidden layers followed by the output layer.
    pub layers: Vec<Linear>,
}

impl MlpParams {
    pub fn zeros(config: MlpConfig) -> Result<Self> {
        config.validate()?;
        let w = config.widths();
        Ok(Self {
            config,
            layers: w.windows(2).map(|p| Linear::zeros(p[0], p[1])).collect(),
        })
    }

    pub fn init(config: MlpConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = config.widths();
        Ok(Self {
            config,
            layers: w.windows(2).map(|p| Linear::init(p[0], p[1], &mut rng)).collect(),
        })
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(Linear::param_count).sum()
    }

    fn check(&self, z: &[f64], template: &Conformation) -> Result<()> {
        if z.len() != self.config.latent_dim {
            return Err(Error::Dimension(format!(
                "latent of size {} for decoder expecting {}",
                z.len(),
                self.config.latent_dim
            )));
        }
        if template.residue_count() != self.config.node_count {
            return Err(Error::Dimension(format!(
                "decoder built for {} residues, template has {}",
                self.config.node_count,
                template.residue_count()
            )));
        }
        Ok(())
    }

    /// Activations after each layer (ReLU on all but the last).
    fn run(&self, z: &[f64]) -> Vec<Vec<f64>> {
        let last = self.layers.len() - 1;
        let mut acts = vec![z.to_vec()];
        for (l, layer) in self.layers.iter().enumerate() {
            let mut y = layer.forward_rows(acts.last().expect("input"), 1);
            if l < last {
                y.iter_mut().for_each(|v| *v = v.max(0.0));
            }
            acts.push(y);
        }
        acts
    }

    pub fn displacements(&self, z: &[f64]) -> Vec<f64> {
        self.run(z).pop().expect("output layer")
    }

    fn backward(&self, acts: &[Vec<f64>], grad_out: &[f64]) -> (MlpParams, Vec<f64>) {
        let mut grad = MlpParams::zeros(self.config).expect("config already validated");
        let mut g = grad_out.to_vec();
        for l in (0..self.layers.len()).rev() {
            if l + 1 < self.layers.len() {
                // post-ReLU activation is positive exactly where the pre-activation was
                for (gv, a) in g.iter_mut().zip(&acts[l + 1]) {
                    *gv *= relu_grad(*a);
                }
            }
            g = self.layers[l].backward_rows(&acts[l], &g, 1, &mut grad.layers[l]);
        }
        (grad, g)
    }
}

pub fn decode_mlp(params: &MlpParams, z: &[f64], template: &Conformation) -> Result<Conformation> {
    params.check(z, template)?;
    displaced(template, &params.displacements(z))
}

pub fn decode_mlp_backward(
    params: &MlpParams,
    z: &[f64],
    template: &Conformation,
    grad_out: &[f64],
) -> Result<(MlpParams, Vec<f64>)> {
    params.check(z, template)?;
    check_grad_out(grad_out, params.config.node_count)?;
    let acts = params.run(z);
    Ok(params.backward(&acts, grad_out))
}

/// Either decoder architecture behind one interface.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Decoder {
    Gnn(DecoderParams),
    Mlp(MlpParams),
}

impl Decoder {
    pub fn latent_dim(&self) -> usize {
        match self {
            Decoder::Gnn(p) => p.config.latent_dim,
            Decoder::Mlp(p) => p.config.latent_dim,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            Decoder::Gnn(_) => "gnn",
            Decoder::Mlp(_) => "mlp",
        }
    }

    pub fn param_count(&self) -> usize {
        match self {
            Decoder::Gnn(p) => p.param_count(),
            Decoder::Mlp(p) => p.param_count(),
        }
    }

    pub fn decode(&self, z: &[f64], graph: &ProteinGraph, template: &Conformation) -> Result<Conformation> {
        match self {
            Decoder::Gnn(p) => decode_gnn(p, z, graph, template),
            Decoder::Mlp(p) => decode_mlp(p, z, template),
        }
    }

    /// Decoded conformation plus a closure-free backward: returns `(x̂, grads, grad_z)`
    /// for the given conformation-space gradient callback.
    pub fn decode_with_grad<F>(
        &self,
        z: &[f64],
        graph: &ProteinGraph,
        template: &Conformation,
        conformation_grad: F,
    ) -> Result<(f64, Decoder, Vec<f64>)>
    where
        F: FnOnce(&Conformation) -> Result<(f64, Vec<f64>)>,
    {
        match self {
            Decoder::Gnn(p) => {
                p.check(z, graph, template)?;
                let tape = p.run(z, graph);
                let x = displaced(template, &tape.delta)?;
                let (value, gx) = conformation_grad(&x)?;
                check_grad_out(&gx, p.config.node_count)?;
                let (g, gz) = p.backward(z, graph, &tape, &gx);
                Ok((value, Decoder::Gnn(g), gz))
            }
            Decoder::Mlp(p) => {
                p.check(z, template)?;
                let acts = p.run(z);
                let x = displaced(template, acts.last().expect("output"))?;
                let (value, gx) = conformation_grad(&x)?;
                check_grad_out(&gx, p.config.node_count)?;
                let (g, gz) = p.backward(&acts, &gx);
                Ok((value, Decoder::Mlp(g), gz))
            }
        }
    }

    pub fn zeros_like(&self) -> Decoder {
        match self {
            Decoder::Gnn(p) => Decoder::Gnn(DecoderParams::zeros(p.config).expect("valid config")),
            Decoder::Mlp(p) => Decoder::Mlp(MlpParams::zeros(p.config).expect("valid config")),
        }
    }

    /// Named parameter tensors in a fixed order (weight then bias per layer).
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        let linears: Vec<(String, &Linear)> = match self {
            Decoder::Gnn(p) => p.linears().collect(),
            Decoder::Mlp(p) => p.layers.iter().enumerate().map(|(i, l)| (format!("fc{i}"), l)).collect(),
        };
        linears
            .into_iter()
            .flat_map(|(name, l)| [(format!("{name}.weight"), l.weight.as_slice()), (format!("{name}.bias"), l.bias.as_slice())])
            .collect()
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let linears: Vec<&mut Linear> = match self {
            Decoder::Gnn(p) => p.linears_mut().collect(),
            Decoder::Mlp(p) => p.layers.iter_mut().collect(),
        };
        linears
            .into_iter()
            .flat_map(|l| [l.weight.as_mut_slice(), l.bias.as_mut_slice()])
            .collect()
    }

    /// Elementwise `self += other`; both must share an architecture.
    pub fn add_assign(&mut self, other: &Decoder) {
        let src: Vec<Vec<f64>> = other.tensors().into_iter().map(|(_, t)| t.to_vec()).collect();
        for (dst, s) in self.tensors_mut().into_iter().zip(&src) {
            for (d, v) in dst.iter_mut().zip(s) {
                *d += v;
            }
        }
    }
}

/// Per-image latent vectors, indexed by image.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentTable {
    dim: usize,
    data: Vec<f64>,
}

impl LatentTable {
    pub fn zeros(count: usize, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidInput("latent dimension must be positive".into()));
        }
        Ok(Self {
            dim,
            data: vec![0.0; count * dim],
        })
    }

    /// Standard normal entries scaled by [`LATENT_INIT_SCALE`].
    pub fn init(count: usize, dim: usize, seed: u64) -> Result<Self> {
        let mut t = Self::zeros(count, dim)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for v in &mut t.data {
            let s: f64 = rng.sample(StandardNormal);
            *v = LATENT_INIT_SCALE * s;
        }
        Ok(t)
    }

    pub fn from_flat(dim: usize, data: Vec<f64>) -> Result<Self> {
        if dim == 0 || !data.len().is_multiple_of(dim) {
            return Err(Error::Dimension(format!("{} latent values do not split into rows of {dim}", data.len())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("latent table".into()));
        }
        Ok(Self { dim, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn get(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn get_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn as_flat(&self) -> &[f64] {
        &self.data
    }
}
