//! KAN and MLP function approximators of the time input, and the pair of
//! networks (differential / algebraic) trained together.

use std::io::{self, BufRead, Read, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::autodiff::ADScalar;
use crate::bsplines::{edge_eval_with, EdgeActivation, SplineError, SplineGrid};

#[derive(Debug, Error)]
pub enum NetworkError {
    #[error("invalid network shape {0:?}")]
    InvalidShape(Vec<usize>),
    #[error("expected {expected} parameters, got {got}")]
    ParameterCount { expected: usize, got: usize },
    #[error("non-finite activation in layer {layer}")]
    NonFinite { layer: usize },
    #[error(transparent)]
    Spline(#[from] SplineError),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

/// Spline grid settings of a KAN: the input layer uses `input_domain`, every
/// later layer uses `hidden_domain`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GridSpec {
    pub intervals: usize,
    pub order: usize,
    pub input_domain: (f64, f64),
    pub hidden_domain: (f64, f64),
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            intervals: 5,
            order: 3,
            input_domain: (0.0, 1.0),
            hidden_domain: (-1.0, 1.0),
        }
    }
}

impl GridSpec {
    pub fn grid_for_layer(&self, layer: usize) -> Result<SplineGrid, SplineError> {
        let (lo, hi) = if layer == 0 {
            self.input_domain
        } else {
            self.hidden_domain
        };
        SplineGrid::new(lo, hi, self.intervals, self.order)
    }
}

/// Edge `(i, j)` connects input node `j` to output node `i` and is stored at
/// `edges[i * n_in + j]`.
#[derive(Debug, Clone, PartialEq)]
pub struct KanLayer {
    pub n_in: usize,
    pub n_out: usize,
    pub grid: SplineGrid,
    pub edges: Vec<EdgeActivation>,
}

impl KanLayer {
    pub fn edge(&self, i: usize, j: usize) -> &EdgeActivation {
        &self.edges[i * self.n_in + j]
    }

    fn params_per_edge(&self) -> usize {
        1 + self.grid.basis_count()
    }

    fn parameter_count(&self) -> usize {
        self.edges.len() * self.params_per_edge()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct KanNetwork {
    shape: Vec<usize>,
    grid: GridSpec,
    seed: u64,
    layers: Vec<KanLayer>,
}

fn check_shape(shape: &[usize]) -> Result<(), NetworkError> {
    // time is the only input
    if shape.len() < 2 || shape[0] != 1 || shape.contains(&0) {
        return Err(NetworkError::InvalidShape(shape.to_vec()));
    }
    Ok(())
}

impl KanNetwork {
    /// Xavier-uniform edge weights and `N(0, 0.1²)` spline coefficients,
    /// drawn in parameter order from a ChaCha stream seeded with `seed`.
    pub fn new(shape: &[usize], grid: GridSpec, seed: u64) -> Result<Self, NetworkError> {
        check_shape(shape)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let coeff_dist = Normal::new(0.0, 0.1).expect("valid normal");
        let mut layers = Vec::with_capacity(shape.len() - 1);
        for (l, dims) in shape.windows(2).enumerate() {
            let (n_in, n_out) = (dims[0], dims[1]);
            let g = grid.grid_for_layer(l)?;
            let bound = (6.0 / (n_in + n_out) as f64).sqrt();
            let edges = (0..n_in * n_out)
                .map(|_| {
                    let weight = rng.gen_range(-bound..=bound);
                    let coefficients = (0..g.basis_count())
                        .map(|_| coeff_dist.sample(&mut rng))
                        .collect();
                    EdgeActivation {
                        weight,
                        coefficients,
                    }
                })
                .collect();
            layers.push(KanLayer {
                n_in,
                n_out,
                grid: g,
                edges,
            });
        }
        Ok(Self {
            shape: shape.to_vec(),
            grid,
            seed,
            layers,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn grid_spec(&self) -> GridSpec {
        self.grid
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn layers(&self) -> &[KanLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [KanLayer] {
        &mut self.layers
    }

    pub fn edge_count(&self) -> usize {
        self.layers.iter().map(|l| l.edges.len()).sum()
    }

    pub fn parameter_count(&self) -> usize {
        self.layers.iter().map(KanLayer::parameter_count).sum()
    }

    /// Flat parameters: layer by layer, edge by edge, `[w, c_0, ..., c_{G+k-1}]`.
    pub fn parameters(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for layer in &self.layers {
            for edge in &layer.edges {
                out.push(edge.weight);
                out.extend_from_slice(&edge.coefficients);
            }
        }
        out
    }

    pub fn load_parameters(&mut self, flat: &[f64]) -> Result<(), NetworkError> {
        let expected = self.parameter_count();
        if flat.len() != expected {
            return Err(NetworkError::ParameterCount {
                expected,
                got: flat.len(),
            });
        }
        let mut it = flat.iter().copied();
        for layer in &mut self.layers {
            for edge in &mut layer.edges {
                edge.weight = it.next().unwrap_or_default();
                for c in &mut edge.coefficients {
                    *c = it.next().unwrap_or_default();
                }
            }
        }
        Ok(())
    }

    /// Forward pass with `params` in the order of [`KanNetwork::parameters`].
    pub fn forward<'r>(
        &self,
        params: &[ADScalar<'r>],
        t: ADScalar<'r>,
    ) -> Result<Vec<ADScalar<'r>>, NetworkError> {
        if params.len() != self.parameter_count() {
            return Err(NetworkError::ParameterCount {
                expected: self.parameter_count(),
                got: params.len(),
            });
        }
        let mut activations = vec![t];
        let mut offset = 0;
        let mut terms = Vec::new();
        for (l, layer) in self.layers.iter().enumerate() {
            let per_edge = layer.params_per_edge();
            let bases: Vec<_> = activations
                .iter()
                .map(|x| layer.grid.evaluate(x.primal()))
                .collect();
            let silus: Vec<_> = activations.iter().map(|x| x.silu()).collect();
            let mut next = Vec::with_capacity(layer.n_out);
            for i in 0..layer.n_out {
                terms.clear();
                for j in 0..layer.n_in {
                    let base = offset + (i * layer.n_in + j) * per_edge;
                    let w = params[base];
                    let coeffs = &params[base + 1..base + per_edge];
                    terms.push(edge_eval_with(
                        w,
                        coeffs,
                        &bases[j],
                        activations[j],
                        silus[j],
                    ));
                }
                let node = if terms.len() == 1 {
                    terms[0]
                } else {
                    ADScalar::sum(&terms)
                };
                if !(node.primal().is_finite() && node.tangent().is_finite()) {
                    return Err(NetworkError::NonFinite { layer: l });
                }
                next.push(node);
            }
            offset += layer.parameter_count();
            activations = next;
        }
        Ok(activations)
    }

    /// Forward pass with the network's own (constant) parameters.
    pub fn forward_constant<'r>(&self, t: ADScalar<'r>) -> Result<Vec<ADScalar<'r>>, NetworkError> {
        let params: Vec<_> = self
            .parameters()
            .into_iter()
            .map(ADScalar::constant)
            .collect();
        self.forward(&params, t)
    }
}

/// Fully connected network with `tanh` hidden activations and a linear output.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpNetwork {
    widths: Vec<usize>,
    seed: u64,
    // weights[l] is row-major (out x in)
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
}

impl MlpNetwork {
    /// Xavier-normal weights and zero biases.
    pub fn new(widths: &[usize], seed: u64) -> Result<Self, NetworkError> {
        check_shape(widths)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for dims in widths.windows(2) {
            let (n_in, n_out) = (dims[0], dims[1]);
            let std = (2.0 / (n_in + n_out) as f64).sqrt();
            let dist = Normal::new(0.0, std).expect("valid normal");
            weights.push((0..n_in * n_out).map(|_| dist.sample(&mut rng)).collect());
            biases.push(vec![0.0; n_out]);
        }
        Ok(Self {
            widths: widths.to_vec(),
            seed,
            weights,
            biases,
        })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn weights_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.weights
    }

    pub fn biases_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.biases
    }

    pub fn parameter_count(&self) -> usize {
        self.widths.windows(2).map(|d| d[0] * d[1] + d[1]).sum()
    }

    /// Flat parameters: per layer, the weight matrix row-major, then biases.
    pub fn parameters(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.parameter_count());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }

    pub fn load_parameters(&mut self, flat: &[f64]) -> Result<(), NetworkError> {
        let expected = self.parameter_count();
        if flat.len() != expected {
            return Err(NetworkError::ParameterCount {
                expected,
                got: flat.len(),
            });
        }
        let mut offset = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            let (nw, nb) = (w.len(), b.len());
            w.copy_from_slice(&flat[offset..offset + nw]);
            offset += nw;
            b.copy_from_slice(&flat[offset..offset + nb]);
            offset += nb;
        }
        Ok(())
    }

    pub fn forward<'r>(
        &self,
        params: &[ADScalar<'r>],
        t: ADScalar<'r>,
    ) -> Result<Vec<ADScalar<'r>>, NetworkError> {
        if params.len() != self.parameter_count() {
            return Err(NetworkError::ParameterCount {
                expected: self.parameter_count(),
                got: params.len(),
            });
        }
        let depth = self.widths.len() - 1;
        let mut h = vec![t];
        let mut offset = 0;
        for (l, dims) in self.widths.windows(2).enumerate() {
            let (n_in, n_out) = (dims[0], dims[1]);
            let w = &params[offset..offset + n_in * n_out];
            let b = &params[offset + n_in * n_out..offset + n_in * n_out + n_out];
            offset += n_in * n_out + n_out;
            let mut next = Vec::with_capacity(n_out);
            for i in 0..n_out {
                let z = ADScalar::affine(&w[i * n_in..(i + 1) * n_in], &h, b[i]);
                let a = if l + 1 < depth { z.tanh() } else { z };
                if !(a.primal().is_finite() && a.tangent().is_finite()) {
                    return Err(NetworkError::NonFinite { layer: l });
                }
                next.push(a);
            }
            h = next;
        }
        Ok(h)
    }

    pub fn forward_constant<'r>(&self, t: ADScalar<'r>) -> Result<Vec<ADScalar<'r>>, NetworkError> {
        let params: Vec<_> = self
            .parameters()
            .into_iter()
            .map(ADScalar::constant)
            .collect();
        self.forward(&params, t)
    }

    /// Dense pass carrying values and time derivatives with flat parameters
    /// `theta`; the outputs are `trace.output()`.
    pub fn forward_dual(
        &self,
        theta: &[f64],
        t: f64,
        trace: &mut MlpTrace,
    ) -> Result<(), NetworkError> {
        if theta.len() != self.parameter_count() {
            return Err(NetworkError::ParameterCount {
                expected: self.parameter_count(),
                got: theta.len(),
            });
        }
        let depth = self.widths.len() - 1;
        trace.values.resize(depth + 1, Vec::new());
        trace.tangents.resize(depth + 1, Vec::new());
        trace.slopes.resize(depth + 1, Vec::new());
        trace.values[0].clear();
        trace.values[0].push(t);
        trace.tangents[0].clear();
        trace.tangents[0].push(1.0);
        let mut offset = 0;
        for (l, dims) in self.widths.windows(2).enumerate() {
            let (n_in, n_out) = (dims[0], dims[1]);
            let w = &theta[offset..offset + n_in * n_out];
            let b = &theta[offset + n_in * n_out..offset + n_in * n_out + n_out];
            offset += n_in * n_out + n_out;
            let (head, tail) = trace.values.split_at_mut(l + 1);
            let (h, next) = (&head[l], &mut tail[0]);
            let (head, tail) = trace.tangents.split_at_mut(l + 1);
            let (hd, next_d) = (&head[l], &mut tail[0]);
            next.clear();
            next_d.clear();
            let slopes = &mut trace.slopes[l + 1];
            slopes.clear();
            for i in 0..n_out {
                let row = &w[i * n_in..(i + 1) * n_in];
                let mut a = b[i];
                let mut ad = 0.0;
                for j in 0..n_in {
                    a += row[j] * h[j];
                    ad += row[j] * hd[j];
                }
                let (v, d) = if l + 1 < depth {
                    let v = a.tanh();
                    (v, (1.0 - v * v) * ad)
                } else {
                    (a, ad)
                };
                if !(v.is_finite() && d.is_finite()) {
                    return Err(NetworkError::NonFinite { layer: l });
                }
                next.push(v);
                next_d.push(d);
                slopes.push(ad);
            }
        }
        Ok(())
    }

    /// Adds `Σ_j out_bar[j] ∂y_j/∂θ + tangent_bar[j] ∂y'_j/∂θ` into `grad`,
    /// using the pass recorded in `trace` at the same `theta`.
    pub fn backward_dual(
        &self,
        theta: &[f64],
        trace: &MlpTrace,
        out_bar: &[f64],
        tangent_bar: &[f64],
        grad: &mut [f64],
    ) {
        let depth = self.widths.len() - 1;
        let mut h_bar = out_bar.to_vec();
        let mut hd_bar = tangent_bar.to_vec();
        let mut offsets = Vec::with_capacity(depth);
        let mut offset = 0;
        for dims in self.widths.windows(2) {
            offsets.push(offset);
            offset += dims[0] * dims[1] + dims[1];
        }
        for l in (0..depth).rev() {
            let (n_in, n_out) = (self.widths[l], self.widths[l + 1]);
            let o = offsets[l];
            let (v, slope) = (&trace.values[l + 1], &trace.slopes[l + 1]);
            // adjoints of the pre-activation and its time derivative
            let (a_bar, ad_bar): (Vec<f64>, Vec<f64>) = if l + 1 < depth {
                (0..n_out)
                    .map(|i| {
                        // y = tanh(a), y' = s a' with s = 1 - y², ds/da = -2 y s
                        let s = 1.0 - v[i] * v[i];
                        (
                            h_bar[i] * s - 2.0 * hd_bar[i] * v[i] * s * slope[i],
                            hd_bar[i] * s,
                        )
                    })
                    .unzip()
            } else {
                (h_bar.clone(), hd_bar.clone())
            };
            let (h, hd) = (&trace.values[l], &trace.tangents[l]);
            let w = &theta[o..o + n_in * n_out];
            let mut next_bar = vec![0.0; n_in];
            let mut next_d_bar = vec![0.0; n_in];
            for i in 0..n_out {
                let gw = &mut grad[o + i * n_in..o + (i + 1) * n_in];
                let row = &w[i * n_in..(i + 1) * n_in];
                for j in 0..n_in {
                    gw[j] += a_bar[i] * h[j] + ad_bar[i] * hd[j];
                    next_bar[j] += row[j] * a_bar[i];
                    next_d_bar[j] += row[j] * ad_bar[i];
                }
                grad[o + n_in * n_out + i] += a_bar[i];
            }
            h_bar = next_bar;
            hd_bar = next_d_bar;
        }
    }
}

/// Per-layer activations and their time derivatives from
/// [`MlpNetwork::forward_dual`]; reused across points to avoid allocation.
#[derive(Debug, Clone, Default)]
pub struct MlpTrace {
    values: Vec<Vec<f64>>,
    tangents: Vec<Vec<f64>>,
    /// Time derivative of each layer's pre-activation.
    slopes: Vec<Vec<f64>>,
}

impl MlpTrace {
    /// Network outputs and their time derivatives.
    pub fn output(&self) -> (&[f64], &[f64]) {
        (
            self.values.last().map_or(&[][..], |v| v),
            self.tangents.last().map_or(&[][..], |v| v),
        )
    }
}

#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize,
)]
#[serde(rename_all = "lowercase")]
pub enum NetKind {
    Kan,
    Mlp,
}

impl std::fmt::Display for NetKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            NetKind::Kan => "kan",
            NetKind::Mlp => "mlp",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Network {
    Kan(KanNetwork),
    Mlp(MlpNetwork),
}

impl Network {
    pub fn kind(&self) -> NetKind {
        match self {
            Network::Kan(_) => NetKind::Kan,
            Network::Mlp(_) => NetKind::Mlp,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            Network::Kan(n) => n.shape(),
            Network::Mlp(n) => n.widths(),
        }
    }

    pub fn output_dim(&self) -> usize {
        *self.shape().last().expect("shape has at least two entries")
    }

    pub fn parameter_count(&self) -> usize {
        match self {
            Network::Kan(n) => n.parameter_count(),
            Network::Mlp(n) => n.parameter_count(),
        }
    }

    pub fn parameters(&self) -> Vec<f64> {
        match self {
            Network::Kan(n) => n.parameters(),
            Network::Mlp(n) => n.parameters(),
        }
    }

    pub fn load_parameters(&mut self, flat: &[f64]) -> Result<(), NetworkError> {
        match self {
            Network::Kan(n) => n.load_parameters(flat),
            Network::Mlp(n) => n.load_parameters(flat),
        }
    }

    pub fn forward<'r>(
        &self,
        params: &[ADScalar<'r>],
        t: ADScalar<'r>,
    ) -> Result<Vec<ADScalar<'r>>, NetworkError> {
        match self {
            Network::Kan(n) => n.forward(params, t),
            Network::Mlp(n) => n.forward(params, t),
        }
    }

    /// Plain values and time derivatives of the outputs at `t`.
    pub fn eval(&self, t: f64) -> Result<(Vec<f64>, Vec<f64>), NetworkError> {
        let rec = crate::autodiff::Record::new();
        let t = rec.seed_input(t).expect("fresh record");
        let out = match self {
            Network::Kan(n) => n.forward_constant(t)?,
            Network::Mlp(n) => n.forward_constant(t)?,
        };
        Ok((
            out.iter().map(|v| v.primal()).collect(),
            out.iter().map(|v| v.tangent()).collect(),
        ))
    }

    /// Writes a descriptor line followed by the parameters as little-endian f64.
    ///
    /// KAN: `kan shape=1,5,5,4 grid=5 order=3 input=0,1 hidden=-1,1 seed=7 count=450`
    /// MLP: `mlp shape=1,60,60,5 seed=7 count=...`
    pub fn write_checkpoint<W: Write>(&self, mut out: W) -> Result<(), NetworkError> {
        let join = |v: &[usize]| v.iter().map(usize::to_string).collect::<Vec<_>>().join(",");
        let line = match self {
            Network::Kan(n) => {
                let g = n.grid_spec();
                format!(
                    "kan shape={} grid={} order={} input={:?},{:?} hidden={:?},{:?} seed={} count={}\n",
                    join(n.shape()),
                    g.intervals,
                    g.order,
                    g.input_domain.0,
                    g.input_domain.1,
                    g.hidden_domain.0,
                    g.hidden_domain.1,
                    n.seed(),
                    n.parameter_count()
                )
            }
            Network::Mlp(n) => format!(
                "mlp shape={} seed={} count={}\n",
                join(n.widths()),
                n.seed(),
                n.parameter_count()
            ),
        };
        out.write_all(line.as_bytes())?;
        for p in self.parameters() {
            out.write_all(&p.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(input: R) -> Result<Self, NetworkError> {
        let mut reader = io::BufReader::new(input);
        let mut line = String::new();
        reader.read_line(&mut line)?;
        let bad = |msg: &str| NetworkError::Checkpoint(msg.to_string());
        let mut fields = line.trim_end().split(' ');
        let kind = fields.next().ok_or_else(|| bad("empty descriptor"))?;
        let mut kv = std::collections::HashMap::new();
        for f in fields {
            let (k, v) = f.split_once('=').ok_or_else(|| bad(f))?;
            kv.insert(k, v);
        }
        let get = |k: &str| kv.get(k).copied().ok_or_else(|| bad(k));
        let usizes = |s: &str| -> Result<Vec<usize>, NetworkError> {
            s.split(',')
                .map(|x| x.parse().map_err(|_| bad(s)))
                .collect()
        };
        let pair = |s: &str| -> Result<(f64, f64), NetworkError> {
            let (a, b) = s.split_once(',').ok_or_else(|| bad(s))?;
            Ok((
                a.parse().map_err(|_| bad(s))?,
                b.parse().map_err(|_| bad(s))?,
            ))
        };
        let shape = usizes(get("shape")?)?;
        let seed: u64 = get("seed")?.parse().map_err(|_| bad("seed"))?;
        let mut net = match kind {
            "kan" => {
                let grid = GridSpec {
                    intervals: get("grid")?.parse().map_err(|_| bad("grid"))?,
                    order: get("order")?.parse().map_err(|_| bad("order"))?,
                    input_domain: pair(get("input")?)?,
                    hidden_domain: pair(get("hidden")?)?,
                };
                Network::Kan(KanNetwork::new(&shape, grid, seed)?)
            }
            "mlp" => Network::Mlp(MlpNetwork::new(&shape, seed)?),
            other => return Err(bad(other)),
        };
        let count: usize = get("count")?.parse().map_err(|_| bad("count"))?;
        if count != net.parameter_count() {
            return Err(NetworkError::ParameterCount {
                expected: net.parameter_count(),
                got: count,
            });
        }
        let mut bytes = Vec::new();
        reader.read_to_end(&mut bytes)?;
        if bytes.len() != 8 * count {
            return Err(bad("payload length does not match count"));
        }
        let flat: Vec<f64> = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        net.load_parameters(&flat)?;
        Ok(net)
    }
}

/// The differential network predicts `u` (and velocities), the algebraic
/// network predicts the multipliers. Without an algebraic network the
/// differential network predicts every variable.
#[derive(Debug, Clone, PartialEq)]
pub struct SolverPair {
    pub differential: Network,
    pub algebraic: Option<Network>,
}

impl SolverPair {
    pub fn split(differential: Network, algebraic: Network) -> Self {
        Self {
            differential,
            algebraic: Some(algebraic),
        }
    }

    pub fn joint(network: Network) -> Self {
        Self {
            differential: network,
            algebraic: None,
        }
    }

    pub fn kind(&self) -> NetKind {
        self.differential.kind()
    }

    pub fn output_dim(&self) -> usize {
        self.differential.output_dim() + self.algebraic.as_ref().map_or(0, Network::output_dim)
    }

    pub fn parameter_count(&self) -> usize {
        self.differential.parameter_count()
            + self.algebraic.as_ref().map_or(0, Network::parameter_count)
    }

    /// Differential parameters followed by algebraic parameters.
    pub fn parameters(&self) -> Vec<f64> {
        let mut p = self.differential.parameters();
        if let Some(a) = &self.algebraic {
            p.extend(a.parameters());
        }
        p
    }

    pub fn load_parameters(&mut self, flat: &[f64]) -> Result<(), NetworkError> {
        let expected = self.parameter_count();
        if flat.len() != expected {
            return Err(NetworkError::ParameterCount {
                expected,
                got: flat.len(),
            });
        }
        let n = self.differential.parameter_count();
        self.differential.load_parameters(&flat[..n])?;
        if let Some(a) = &mut self.algebraic {
            a.load_parameters(&flat[n..])?;
        }
        Ok(())
    }

    /// All variables at `t`: differential outputs then algebraic outputs.
    pub fn forward<'r>(
        &self,
        params: &[ADScalar<'r>],
        t: ADScalar<'r>,
    ) -> Result<Vec<ADScalar<'r>>, NetworkError> {
        let n = self.differential.parameter_count();
        let mut out = self.differential.forward(&params[..n], t)?;
        if let Some(a) = &self.algebraic {
            out.extend(a.forward(&params[n..], t)?);
        }
        Ok(out)
    }

    /// Plain values and time derivatives of all variables at `t`.
    pub fn eval(&self, t: f64) -> Result<(Vec<f64>, Vec<f64>), NetworkError> {
        let (mut v, mut d) = self.differential.eval(t)?;
        if let Some(a) = &self.algebraic {
            let (va, da) = a.eval(t)?;
            v.extend(va);
            d.extend(da);
        }
        Ok((v, d))
    }
}
