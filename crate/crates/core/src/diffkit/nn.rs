//! Dense layer, tanh MLP and GRU cell expressed as tape operations.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::tensor::{Parameterized, Tensor};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dense {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Dense {
    pub fn new<R: Rng + ?Sized>(input: usize, output: usize, rng: &mut R) -> Self {
        Dense {
            weight: Tensor::glorot(output, input, rng),
            bias: Tensor::zeros(&[output]),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.shape[1]
    }

    pub fn output_dim(&self) -> usize {
        self.weight.shape[0]
    }
}

impl Parameterized for Dense {
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        vec![("weight".into(), &self.weight), ("bias".into(), &self.bias)]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.weight, &mut self.bias]
    }
}

/// Tape handles for a bound [`Dense`].
#[derive(Debug, Clone, Copy)]
pub struct DenseVars {
    w: Var,
    b: Var,
    rows: usize,
}

impl DenseVars {
    pub fn from_bound(vars: &[Var], rows: usize) -> Self {
        DenseVars { w: vars[0], b: vars[1], rows }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        g.affine(self.w, x, Some(self.b), self.rows)
    }
}

/// Multilayer perceptron, tanh on hidden layers and identity on the output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub layers: Vec<Dense>,
}

impl Mlp {
    pub fn new<R: Rng + ?Sized>(dims: &[usize], rng: &mut R) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Config(format!("mlp needs at least two dims, got {dims:?}")));
        }
        let layers = dims.windows(2).map(|w| Dense::new(w[0], w[1], rng)).collect();
        Ok(Mlp { layers })
    }

    pub fn from_layers(layers: Vec<Dense>) -> Result<Self> {
        for pair in layers.windows(2) {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::Shape(format!(
                    "mlp layer dims do not chain: {} -> {}",
                    pair[0].output_dim(),
                    pair[1].input_dim()
                )));
            }
        }
        Ok(Mlp { layers })
    }

    pub fn dims(&self) -> Vec<usize> {
        let mut d: Vec<usize> = self.layers.iter().map(Dense::input_dim).collect();
        if let Some(last) = self.layers.last() {
            d.push(last.output_dim());
        }
        d
    }

    pub fn bind_vars(&self, g: &mut Graph) -> MlpVars {
        let vars = self.bind(g);
        MlpVars::from_bound(self, &vars)
    }
}

impl Parameterized for Mlp {
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(i, l)| {
                l.named_tensors()
                    .into_iter()
                    .map(move |(n, t)| (format!("layer{i}.{n}"), t))
            })
            .collect()
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.layers.iter_mut().flat_map(|l| l.tensors_mut()).collect()
    }
}

#[derive(Debug, Clone)]
pub struct MlpVars {
    layers: Vec<DenseVars>,
}

impl MlpVars {
    pub fn from_bound(mlp: &Mlp, vars: &[Var]) -> Self {
        let layers = mlp
            .layers
            .iter()
            .enumerate()
            .map(|(i, l)| DenseVars::from_bound(&vars[2 * i..2 * i + 2], l.output_dim()))
            .collect();
        MlpVars { layers }
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let mut h = x;
        let last = self.layers.len() - 1;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(g, h)?;
            if i < last {
                h = g.tanh(h);
            }
        }
        Ok(h)
    }
}

/// Gated recurrent unit:
///
/// ```text
/// z  = sigmoid(Wz x + Uz h + bz)
/// r  = sigmoid(Wr x + Ur h + br)
/// n  = tanh(Wn x + Un (r * h) + bn)
/// h' = (1 - z) * h + z * n
/// ```
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GruCell {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub w_update: Tensor,
    pub u_update: Tensor,
    pub b_update: Tensor,
    pub w_reset: Tensor,
    pub u_reset: Tensor,
    pub b_reset: Tensor,
    pub w_cand: Tensor,
    pub u_cand: Tensor,
    pub b_cand: Tensor,
}

impl GruCell {
    pub fn new<R: Rng + ?Sized>(input_dim: usize, hidden_dim: usize, rng: &mut R) -> Self {
        GruCell {
            input_dim,
            hidden_dim,
            w_update: Tensor::glorot(hidden_dim, input_dim, rng),
            u_update: Tensor::glorot(hidden_dim, hidden_dim, rng),
            b_update: Tensor::zeros(&[hidden_dim]),
            w_reset: Tensor::glorot(hidden_dim, input_dim, rng),
            u_reset: Tensor::glorot(hidden_dim, hidden_dim, rng),
            b_reset: Tensor::zeros(&[hidden_dim]),
            w_cand: Tensor::glorot(hidden_dim, input_dim, rng),
            u_cand: Tensor::glorot(hidden_dim, hidden_dim, rng),
            b_cand: Tensor::zeros(&[hidden_dim]),
        }
    }

    pub fn zeros(input_dim: usize, hidden_dim: usize) -> Self {
        let w = || Tensor::zeros(&[hidden_dim, input_dim]);
        let u = || Tensor::zeros(&[hidden_dim, hidden_dim]);
        let b = || Tensor::zeros(&[hidden_dim]);
        GruCell {
            input_dim,
            hidden_dim,
            w_update: w(),
            u_update: u(),
            b_update: b(),
            w_reset: w(),
            u_reset: u(),
            b_reset: b(),
            w_cand: w(),
            u_cand: u(),
            b_cand: b(),
        }
    }

    pub fn bind_vars(&self, g: &mut Graph) -> GruVars {
        let v = self.bind(g);
        GruVars::from_bound(self, &v)
    }

    /// Run the recurrence over `inputs` outside of any training graph.
    pub fn forward(&self, inputs: &[Vec<f64>], h0: &[f64]) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let vars = self.bind_vars(&mut g);
        let xs: Vec<Var> = inputs.iter().map(|x| g.leaf(x)).collect();
        let h0 = g.leaf(h0);
        let h = vars.forward(&mut g, &xs, h0)?;
        Ok(g.value(h).to_vec())
    }
}

impl Parameterized for GruCell {
    fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        vec![
            ("w_update".into(), &self.w_update),
            ("u_update".into(), &self.u_update),
            ("b_update".into(), &self.b_update),
            ("w_reset".into(), &self.w_reset),
            ("u_reset".into(), &self.u_reset),
            ("b_reset".into(), &self.b_reset),
            ("w_cand".into(), &self.w_cand),
            ("u_cand".into(), &self.u_cand),
            ("b_cand".into(), &self.b_cand),
        ]
    }

    fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.w_update,
            &mut self.u_update,
            &mut self.b_update,
            &mut self.w_reset,
            &mut self.u_reset,
            &mut self.b_reset,
            &mut self.w_cand,
            &mut self.u_cand,
            &mut self.b_cand,
        ]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct GruVars {
    input_dim: usize,
    hidden: usize,
    p: [Var; 9],
}

impl GruVars {
    pub fn from_bound(cell: &GruCell, vars: &[Var]) -> Self {
        let mut p = [vars[0]; 9];
        p.copy_from_slice(&vars[..9]);
        GruVars {
            input_dim: cell.input_dim,
            hidden: cell.hidden_dim,
            p,
        }
    }

    pub fn step(&self, g: &mut Graph, x: Var, h: Var) -> Result<Var> {
        let (dx, dh) = (g.dim(x), g.dim(h));
        if dx == 0 || dx % self.input_dim != 0 || dh % self.hidden != 0 || dx / self.input_dim != dh / self.hidden {
            return Err(Error::Shape(format!(
                "gru step: input {dx} (want {} per column), hidden {dh} (want {} per column)",
                self.input_dim, self.hidden
            )));
        }
        let [wz, uz, bz, wr, ur, br, wn, un, bn] = self.p;
        let n = self.hidden;
        let zx = g.affine(wz, x, Some(bz), n)?;
        let zh = g.affine(uz, h, None, n)?;
        let z = g.add(zx, zh)?;
        let z = g.sigmoid(z);
        let rx = g.affine(wr, x, Some(br), n)?;
        let rh = g.affine(ur, h, None, n)?;
        let r = g.add(rx, rh)?;
        let r = g.sigmoid(r);
        let rh = g.mul(r, h)?;
        let cx = g.affine(wn, x, Some(bn), n)?;
        let ch = g.affine(un, rh, None, n)?;
        let c = g.add(cx, ch)?;
        let c = g.tanh(c);
        g.lerp(z, h, c)
    }

    pub fn forward(&self, g: &mut Graph, inputs: &[Var], h0: Var) -> Result<Var> {
        if inputs.is_empty() {
            return Err(Error::Shape("gru needs a non-empty input sequence".into()));
        }
        let mut h = h0;
        for &x in inputs {
            h = self.step(g, x, h)?;
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_gru_on_zero_input_stays_zero() {
        let cell = GruCell::zeros(7, 32);
        let inputs = vec![vec![0.0; 7]; 10];
        let h = cell.forward(&inputs, &[0.0; 32]).unwrap();
        assert_eq!(h, vec![0.0; 32]);
    }

    #[test]
    fn gru_output_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let cell = GruCell::new(7, 32, &mut rng);
        let inputs: Vec<Vec<f64>> = (0..10).map(|i| vec![0.1 * i as f64; 7]).collect();
        let h = cell.forward(&inputs, &[0.0; 32]).unwrap();
        assert_eq!(h.len(), 32);
        assert!(h.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn gru_rejects_bad_dims() {
        let cell = GruCell::zeros(7, 4);
        assert!(cell.forward(&[vec![0.0; 6]], &[0.0; 4]).is_err());
        assert!(cell.forward(&[], &[0.0; 4]).is_err());
    }

    #[test]
    fn mlp_dims_must_chain() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let a = Dense::new(3, 4, &mut rng);
        let b = Dense::new(5, 2, &mut rng);
        assert!(Mlp::from_layers(vec![a.clone(), b]).is_err());
        let c = Dense::new(4, 2, &mut rng);
        assert_eq!(Mlp::from_layers(vec![a, c]).unwrap().dims(), vec![3, 4, 2]);
    }
}
