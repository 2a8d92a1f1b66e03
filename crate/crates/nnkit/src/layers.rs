use std::sync::Arc;

use rand::Rng;

use crate::error::{NnError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tape::{ConvTopology, Tape, Var};
use crate::tensor::Tensor;

/// Slope used by every hidden nonlinearity in this crate.
pub const LEAKY_SLOPE: f64 = 0.2;

/// Fan-in scaled uniform bound (unit output variance for unit-variance input).
pub fn fan_in_bound(fan_in: usize) -> f64 {
    if fan_in == 0 {
        0.0
    } else {
        (3.0 / fan_in as f64).sqrt()
    }
}

pub fn leaky_relu(tape: &mut Tape<'_>, x: Var) -> Var {
    tape.leaky_relu(x, LEAKY_SLOPE)
}

/// Fully connected layer `y = x·Wᵀ + b`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_width: usize,
    pub out_width: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_width: usize,
        out_width: usize,
        with_bias: bool,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add_uniform(
            format!("{name}.weight"),
            &[out_width, in_width],
            fan_in_bound(in_width),
            rng,
        );
        let bias = with_bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[out_width])));
        Self {
            weight,
            bias,
            in_width,
            out_width,
        }
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let b = self.bias.map(|b| tape.param(b));
        tape.linear(x, w, b)
    }
}

/// Graph convolution with a distinct filter per directed edge and a
/// distinct bias per node.
#[derive(Clone, Debug)]
pub struct GraphConv {
    pub topology: Arc<ConvTopology>,
    pub weight: ParamId,
    pub bias: ParamId,
}

impl GraphConv {
    /// `edges` are `(receiver, sender)` pairs; self-edges are added for every
    /// node that lacks one.
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        n_nodes: usize,
        edges: &[(usize, usize)],
        in_width: usize,
        out_width: usize,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let edges = with_self_edges(n_nodes, edges)?;
        let mut degree = vec![0usize; n_nodes];
        for &(i, _) in &edges {
            degree[i] += 1;
        }
        let mut data = Vec::with_capacity(edges.len() * out_width * in_width);
        for &(i, _) in &edges {
            let bound = fan_in_bound(in_width * degree[i]);
            data.extend((0..out_width * in_width).map(|_| {
                if bound > 0.0 {
                    rng.gen_range(-bound..bound)
                } else {
                    0.0
                }
            }));
        }
        let weight = store.add(
            format!("{name}.weight"),
            Tensor::from_vec(&[edges.len(), out_width, in_width], data)?,
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[n_nodes, out_width]));
        Ok(Self {
            topology: Arc::new(ConvTopology {
                n_nodes,
                edges,
                in_width,
                out_width,
            }),
            weight,
            bias,
        })
    }

    pub fn n_nodes(&self) -> usize {
        self.topology.n_nodes
    }

    pub fn in_width(&self) -> usize {
        self.topology.in_width
    }

    pub fn out_width(&self) -> usize {
        self.topology.out_width
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.topology.edges
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let w = tape.param(self.weight);
        let b = tape.param(self.bias);
        tape.graph_conv(x, w, b, Arc::clone(&self.topology))
    }
}

/// Sorted, deduplicated edge list with a self-edge on every node.
pub fn with_self_edges(n_nodes: usize, edges: &[(usize, usize)]) -> Result<Vec<(usize, usize)>> {
    let mut out: Vec<(usize, usize)> = Vec::with_capacity(edges.len() + n_nodes);
    for &(i, j) in edges {
        if i >= n_nodes || j >= n_nodes {
            return Err(NnError::ShapeMismatch {
                context: "graph edge",
                expected: vec![n_nodes],
                actual: vec![i.max(j)],
            });
        }
        out.push((i, j));
    }
    out.extend((0..n_nodes).map(|i| (i, i)));
    out.sort_unstable();
    out.dedup();
    Ok(out)
}

/// Evaluates a graph convolution outside of a tape.
pub fn graph_conv_forward(layer: &GraphConv, store: &ParamStore, features: &Tensor) -> Result<Tensor> {
    let mut tape = Tape::new(store);
    let x = tape.input(features.clone());
    let y = layer.forward(&mut tape, x)?;
    Ok(tape.value(y).clone())
}

/// `y = x + L₂(σ(L₁(x)))` with equal input and output widths.
#[derive(Clone, Debug)]
pub struct ResidualBlock {
    pub first: Linear,
    pub second: Linear,
}

impl ResidualBlock {
    pub fn new(store: &mut ParamStore, name: &str, width: usize, rng: &mut impl Rng) -> Self {
        Self {
            first: Linear::new(store, &format!("{name}.fc1"), width, width, true, rng),
            second: Linear::new(store, &format!("{name}.fc2"), width, width, true, rng),
        }
    }

    pub fn width(&self) -> usize {
        self.first.in_width
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let h = self.first.forward(tape, x)?;
        let h = leaky_relu(tape, h);
        let h = self.second.forward(tape, h)?;
        tape.add(x, h)
    }
}

/// Gated recurrent cell with reset/update/candidate gates packed as `[3H, ·]`.
#[derive(Clone, Debug)]
pub struct GruCell {
    pub input: Linear,
    pub hidden: Linear,
    pub hidden_width: usize,
}

impl GruCell {
    pub fn new(store: &mut ParamStore, name: &str, in_width: usize, hidden_width: usize, rng: &mut impl Rng) -> Self {
        Self {
            input: Linear::new(store, &format!("{name}.input"), in_width, 3 * hidden_width, true, rng),
            hidden: Linear::new(store, &format!("{name}.hidden"), hidden_width, 3 * hidden_width, true, rng),
            hidden_width,
        }
    }

    /// Runs over the rows of `x` (`[T, in]`) in order, or reversed when
    /// `reverse` is set. Output row `t` is the state after consuming row `t`.
    pub fn run(&self, tape: &mut Tape<'_>, x: Var, reverse: bool) -> Result<Var> {
        let steps = tape.value(x).rows();
        let h_w = self.hidden_width;
        let gx_all = self.input.forward(tape, x)?;
        let mut h = tape.input(Tensor::zeros(&[1, h_w]));
        let mut states = vec![h; steps];
        let order: Vec<usize> = if reverse {
            (0..steps).rev().collect()
        } else {
            (0..steps).collect()
        };
        for t in order {
            let gx = tape.slice_rows(gx_all, t, 1)?;
            let gh = self.hidden.forward(tape, h)?;
            let (xr, hr) = (tape.slice_cols(gx, 0, h_w)?, tape.slice_cols(gh, 0, h_w)?);
            let (xz, hz) = (tape.slice_cols(gx, h_w, h_w)?, tape.slice_cols(gh, h_w, h_w)?);
            let (xn, hn) = (tape.slice_cols(gx, 2 * h_w, h_w)?, tape.slice_cols(gh, 2 * h_w, h_w)?);
            let r = tape.add(xr, hr)?;
            let r = tape.sigmoid(r);
            let z = tape.add(xz, hz)?;
            let z = tape.sigmoid(z);
            let rn = tape.mul(r, hn)?;
            let n = tape.add(xn, rn)?;
            let n = tape.tanh(n);
            // h' = n + z ⊙ (h − n)
            let diff = tape.sub(h, n)?;
            let zd = tape.mul(z, diff)?;
            h = tape.add(n, zd)?;
            states[t] = h;
        }
        tape.concat_rows(&states)
    }
}

/// Forward and backward recurrent passes with concatenated states `[T, 2H]`.
#[derive(Clone, Debug)]
pub struct BiGru {
    pub forward_cell: GruCell,
    pub backward_cell: GruCell,
}

impl BiGru {
    pub fn new(store: &mut ParamStore, name: &str, in_width: usize, hidden_width: usize, rng: &mut impl Rng) -> Self {
        Self {
            forward_cell: GruCell::new(store, &format!("{name}.fwd"), in_width, hidden_width, rng),
            backward_cell: GruCell::new(store, &format!("{name}.bwd"), in_width, hidden_width, rng),
        }
    }

    pub fn out_width(&self) -> usize {
        2 * self.forward_cell.hidden_width
    }

    pub fn forward(&self, tape: &mut Tape<'_>, x: Var) -> Result<Var> {
        let f = self.forward_cell.run(tape, x, false)?;
        let b = self.backward_cell.run(tape, x, true)?;
        tape.concat_cols(&[f, b])
    }
}
