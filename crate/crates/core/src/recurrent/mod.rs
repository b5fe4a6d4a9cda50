//! GRU and LSTM cells over flattened per-timestep feature vectors.
//!
//! Both cells follow the gate equations with the state vector concatenated
//! before the input, weights of shape `[hidden, hidden + input]` and one
//! bias per gate:
//!
//! GRU (the activation is the cell state itself):
//! ```text
//! v      = [c_prev, x]
//! G_r    = sigmoid(W_r v + b_r)
//! G_u    = sigmoid(W_u v + b_u)
//! c_cand = tanh(W_c [G_r * c_prev, x] + b_c)
//! c_t    = G_u * c_cand + (1 - G_u) * c_prev
//! a_t    = c_t
//! ```
//!
//! LSTM (with the conventional output gate):
//! ```text
//! v      = [a_prev, x]
//! c_cand = tanh(W_c v + b_c)
//! G_u    = sigmoid(W_u v + b_u)
//! G_f    = sigmoid(W_f v + b_f)
//! G_o    = sigmoid(W_o v + b_o)
//! c_t    = G_u * c_cand + G_f * c_prev
//! a_t    = G_o * tanh(c_t)
//! ```

use serde::{Deserialize, Serialize};

use crate::tensor::{Scalar, Shape, Tensor, TensorError};
use crate::util::uniform_sym;
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CellKind {
    Gru,
    Lstm,
}

impl CellKind {
    pub fn name(self) -> &'static str {
        match self {
            CellKind::Gru => "gru",
            CellKind::Lstm => "lstm",
        }
    }
}

/// Recurrent state carried between steps. For a GRU `activation` and `cell`
/// are the same tensor; for an LSTM they are `a_t` and `c_t`.
#[derive(Debug, Clone)]
pub struct RnnState<T> {
    pub activation: Tensor<T>,
    pub cell: Tensor<T>,
}

impl<T: Scalar> RnnState<T> {
    pub fn zeros(hidden: usize) -> Self {
        let z = Tensor::zeros(Shape::of(&[hidden]));
        RnnState {
            activation: z.clone(),
            cell: z,
        }
    }
}

/// Draw a `[rows, cols]` weight matrix from U(-bound, bound), row-major.
fn init_weight<T: Scalar>(rows: usize, cols: usize, bound: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let data: Vec<T> = (0..rows * cols)
        .map(|_| T::of_f64(uniform_sym(rng, bound)))
        .collect();
    Tensor::new(Shape::of(&[rows, cols]), data).expect("static shape")
}

#[derive(Debug, Clone)]
pub struct GruParams<T> {
    pub w_c: Tensor<T>,
    pub w_u: Tensor<T>,
    pub w_r: Tensor<T>,
    pub b_c: Tensor<T>,
    pub b_u: Tensor<T>,
    pub b_r: Tensor<T>,
}

impl<T: Scalar> GruParams<T> {
    /// Weights drawn from U(-1/sqrt(hidden+input), +1/sqrt(hidden+input)) in
    /// the fixed order w_c, w_u, w_r; biases start at zero.
    pub fn init(hidden: usize, input: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / ((hidden + input) as f64).sqrt();
        GruParams {
            w_c: init_weight(hidden, hidden + input, bound, rng),
            w_u: init_weight(hidden, hidden + input, bound, rng),
            w_r: init_weight(hidden, hidden + input, bound, rng),
            b_c: Tensor::zeros(Shape::of(&[hidden])),
            b_u: Tensor::zeros(Shape::of(&[hidden])),
            b_r: Tensor::zeros(Shape::of(&[hidden])),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_c.shape().dims()[0]
    }

    pub fn input(&self) -> usize {
        self.w_c.shape().dims()[1] - self.hidden()
    }
}

#[derive(Debug, Clone)]
pub struct LstmParams<T> {
    pub w_c: Tensor<T>,
    pub w_u: Tensor<T>,
    pub w_f: Tensor<T>,
    pub w_o: Tensor<T>,
    pub b_c: Tensor<T>,
    pub b_u: Tensor<T>,
    pub b_f: Tensor<T>,
    pub b_o: Tensor<T>,
}

impl<T: Scalar> LstmParams<T> {
    /// Weight draw order: w_c, w_u, w_f, w_o; biases start at zero.
    pub fn init(hidden: usize, input: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = 1.0 / ((hidden + input) as f64).sqrt();
        LstmParams {
            w_c: init_weight(hidden, hidden + input, bound, rng),
            w_u: init_weight(hidden, hidden + input, bound, rng),
            w_f: init_weight(hidden, hidden + input, bound, rng),
            w_o: init_weight(hidden, hidden + input, bound, rng),
            b_c: Tensor::zeros(Shape::of(&[hidden])),
            b_u: Tensor::zeros(Shape::of(&[hidden])),
            b_f: Tensor::zeros(Shape::of(&[hidden])),
            b_o: Tensor::zeros(Shape::of(&[hidden])),
        }
    }

    pub fn hidden(&self) -> usize {
        self.w_c.shape().dims()[0]
    }
}

#[derive(Debug, Clone)]
pub enum RnnParams<T> {
    Gru(GruParams<T>),
    Lstm(LstmParams<T>),
}

impl<T: Scalar> RnnParams<T> {
    pub fn kind(&self) -> CellKind {
        match self {
            RnnParams::Gru(_) => CellKind::Gru,
            RnnParams::Lstm(_) => CellKind::Lstm,
        }
    }

    pub fn hidden(&self) -> usize {
        match self {
            RnnParams::Gru(p) => p.hidden(),
            RnnParams::Lstm(p) => p.hidden(),
        }
    }
}

fn gate<T: Scalar>(
    w: &Tensor<T>,
    v: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<Tensor<T>, TensorError> {
    Ok(w.matvec(v)?.add(b)?.sigmoid())
}

/// One GRU step.
pub fn gru_step<T: Scalar>(
    params: &GruParams<T>,
    x: &Tensor<T>,
    state: &RnnState<T>,
) -> Result<RnnState<T>, TensorError> {
    let c_prev = &state.cell;
    let v = Tensor::concat(&[c_prev, x])?;
    let g_r = gate(&params.w_r, &v, &params.b_r)?;
    let g_u = gate(&params.w_u, &v, &params.b_u)?;
    let gated = g_r.mul(c_prev)?;
    let v_cand = Tensor::concat(&[&gated, x])?;
    let c_cand = params.w_c.matvec(&v_cand)?.add(&params.b_c)?.tanh_();
    let c_t = g_u.mul(&c_cand)?.add(&g_u.one_minus().mul(c_prev)?)?;
    Ok(RnnState {
        activation: c_t.clone(),
        cell: c_t,
    })
}

/// One LSTM step.
pub fn lstm_step<T: Scalar>(
    params: &LstmParams<T>,
    x: &Tensor<T>,
    state: &RnnState<T>,
) -> Result<RnnState<T>, TensorError> {
    let v = Tensor::concat(&[&state.activation, x])?;
    let c_cand = params.w_c.matvec(&v)?.add(&params.b_c)?.tanh_();
    let g_u = gate(&params.w_u, &v, &params.b_u)?;
    let g_f = gate(&params.w_f, &v, &params.b_f)?;
    let g_o = gate(&params.w_o, &v, &params.b_o)?;
    let c_t = g_u.mul(&c_cand)?.add(&g_f.mul(&state.cell)?)?;
    let a_t = g_o.mul(&c_t.tanh_())?;
    Ok(RnnState {
        activation: a_t,
        cell: c_t,
    })
}

/// Fold a `[steps, input]` sequence through the cell from a zero state and
/// return the final activation `[hidden]`.
pub fn run_sequence<T: Scalar>(
    params: &RnnParams<T>,
    xs: &Tensor<T>,
) -> Result<Tensor<T>, TensorError> {
    if xs.rank() != 2 {
        return Err(TensorError::RankError {
            op: "run_sequence",
            msg: format!("need [steps, input], got {}", xs.shape()),
        });
    }
    let steps = xs.shape().dims()[0];
    let mut state = RnnState::zeros(params.hidden());
    for t in 0..steps {
        let x = xs.slice_time(t)?;
        state = match params {
            RnnParams::Gru(p) => gru_step(p, &x, &state)?,
            RnnParams::Lstm(p) => lstm_step(p, &x, &state)?,
        };
    }
    Ok(state.activation)
}
