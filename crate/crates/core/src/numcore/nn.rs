//! Small parameterised building blocks recorded on a [`Tape`].

use rand::Rng;

use super::{Init, NumError, ParamId, ParamStore, Tape, Var};

/// `x W + b`, or `x W` without a bias.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut R,
    ) -> Result<Self, NumError> {
        Ok(Self {
            weight: store.register(format!("{name}.weight"), input, output, Init::Xavier, rng)?,
            bias: Some(store.register(format!("{name}.bias"), 1, output, Init::Zeros, rng)?),
        })
    }

    pub fn without_bias<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        output: usize,
        rng: &mut R,
    ) -> Result<Self, NumError> {
        Ok(Self {
            weight: store.register(format!("{name}.weight"), input, output, Init::Xavier, rng)?,
            bias: None,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var, NumError> {
        let w = tape.param(store, self.weight);
        let xw = tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = tape.param(store, b);
                tape.add_row(xw, b)
            }
            None => Ok(xw),
        }
    }
}

/// Two affine maps with a ReLU in between.
#[derive(Clone, Debug)]
pub struct Ffn {
    pub inner: Linear,
    pub outer: Linear,
}

impl Ffn {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        output: usize,
        rng: &mut R,
    ) -> Result<Self, NumError> {
        Ok(Self {
            inner: Linear::new(store, &format!("{name}.inner"), input, hidden, rng)?,
            outer: Linear::new(store, &format!("{name}.outer"), hidden, output, rng)?,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var) -> Result<Var, NumError> {
        let h = self.inner.forward(tape, store, x)?;
        let h = tape.relu(h)?;
        self.outer.forward(tape, store, h)
    }
}

/// Standard GRU cell with gate order (reset, update, candidate):
///
/// ```text
/// r  = sigmoid(x W_ir + b_ir + h W_hr + b_hr)
/// z  = sigmoid(x W_iz + b_iz + h W_hz + b_hz)
/// n  = tanh(x W_in + b_in + r * (h W_hn + b_hn))
/// h' = (1 - z) * n + z * h
/// ```
#[derive(Clone, Debug)]
pub struct GruCell {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b_ih: ParamId,
    pub b_hh: ParamId,
    pub hidden: usize,
}

impl GruCell {
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        rng: &mut R,
    ) -> Result<Self, NumError> {
        let limit = 1.0 / (hidden as f64).sqrt();
        Ok(Self {
            w_ih: store.register(format!("{name}.w_ih"), input, 3 * hidden, Init::Uniform(limit), rng)?,
            w_hh: store.register(format!("{name}.w_hh"), hidden, 3 * hidden, Init::Uniform(limit), rng)?,
            b_ih: store.register(format!("{name}.b_ih"), 1, 3 * hidden, Init::Uniform(limit), rng)?,
            b_hh: store.register(format!("{name}.b_hh"), 1, 3 * hidden, Init::Uniform(limit), rng)?,
            hidden,
        })
    }

    pub fn forward(&self, tape: &mut Tape, store: &ParamStore, x: Var, h: Var) -> Result<Var, NumError> {
        let n = self.hidden;
        let (w_ih, w_hh) = (tape.param(store, self.w_ih), tape.param(store, self.w_hh));
        let (b_ih, b_hh) = (tape.param(store, self.b_ih), tape.param(store, self.b_hh));
        let gi = tape.matmul(x, w_ih)?;
        let gi = tape.add_row(gi, b_ih)?;
        let gh = tape.matmul(h, w_hh)?;
        let gh = tape.add_row(gh, b_hh)?;

        let gi_rz = tape.slice_cols(gi, 0, 2 * n)?;
        let gh_rz = tape.slice_cols(gh, 0, 2 * n)?;
        let rz = tape.add(gi_rz, gh_rz)?;
        let rz = tape.sigmoid(rz)?;
        let r = tape.slice_cols(rz, 0, n)?;
        let z = tape.slice_cols(rz, n, 2 * n)?;

        let gi_n = tape.slice_cols(gi, 2 * n, 3 * n)?;
        let gh_n = tape.slice_cols(gh, 2 * n, 3 * n)?;
        let gated = tape.mul(r, gh_n)?;
        let cand = tape.add(gi_n, gated)?;
        let cand = tape.tanh(cand)?;

        // h' = n + z * (h - n)
        let diff = tape.sub(h, cand)?;
        let keep = tape.mul(z, diff)?;
        tape.add(cand, keep)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{tape::sigmoid, Tensor};

    /// Hand evaluation of the GRU equations for a 3-dim input and 3-dim state.
    fn hand_gru(x: &[f64], h: &[f64], w_ih: &Tensor, w_hh: &Tensor, b_ih: &[f64], b_hh: &[f64]) -> Vec<f64> {
        let n = h.len();
        let proj = |v: &[f64], w: &Tensor, col: usize| -> f64 { v.iter().enumerate().map(|(i, a)| a * w.get(i, col)).sum() };
        (0..n)
            .map(|j| {
                let r = sigmoid(proj(x, w_ih, j) + b_ih[j] + proj(h, w_hh, j) + b_hh[j]);
                let z = sigmoid(proj(x, w_ih, n + j) + b_ih[n + j] + proj(h, w_hh, n + j) + b_hh[n + j]);
                let c = (proj(x, w_ih, 2 * n + j) + b_ih[2 * n + j] + r * (proj(h, w_hh, 2 * n + j) + b_hh[2 * n + j])).tanh();
                (1.0 - z) * c + z * h[j]
            })
            .collect()
    }

    #[test]
    fn gru_cell_matches_hand_equations() {
        let mut store = ParamStore::new();
        let w_ih: Vec<f64> = (0..27).map(|i| ((i as f64) * 0.37).sin() * 0.5).collect();
        let w_hh: Vec<f64> = (0..27).map(|i| ((i as f64) * 0.91).cos() * 0.4).collect();
        let b_ih: Vec<f64> = (0..9).map(|i| 0.05 * i as f64 - 0.2).collect();
        let b_hh: Vec<f64> = (0..9).map(|i| 0.1 - 0.03 * i as f64).collect();
        let w_ih_t = Tensor::from_vec(3, 9, w_ih).unwrap();
        let w_hh_t = Tensor::from_vec(3, 9, w_hh).unwrap();
        let cell = GruCell {
            w_ih: store.insert("w_ih".into(), w_ih_t.clone(), Init::Zeros).unwrap(),
            w_hh: store.insert("w_hh".into(), w_hh_t.clone(), Init::Zeros).unwrap(),
            b_ih: store.insert("b_ih".into(), Tensor::row_vector(b_ih.clone()), Init::Zeros).unwrap(),
            b_hh: store.insert("b_hh".into(), Tensor::row_vector(b_hh.clone()), Init::Zeros).unwrap(),
            hidden: 3,
        };
        let x = [0.5, -1.0, 2.0];
        let h = [0.1, 0.2, -0.3];
        let mut tape = Tape::new();
        let xv = tape.constant(Tensor::row_vector(x.to_vec())).unwrap();
        let hv = tape.constant(Tensor::row_vector(h.to_vec())).unwrap();
        let out = cell.forward(&mut tape, &store, xv, hv).unwrap();
        let expected = hand_gru(&x, &h, &w_ih_t, &w_hh_t, &b_ih, &b_hh);
        for (a, b) in tape.value(out).data().iter().zip(&expected) {
            assert!((a - b).abs() < 1e-14, "{a} vs {b}");
        }
    }
}
