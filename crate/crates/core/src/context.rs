//! Autoregressive GRU context over the top module's encodings.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Param, ParamIds, Var};
use crate::error::{GimError, Result};
use crate::params::{glorot_uniform, HasParams};
use crate::rng::{Purpose, SeededRng};
use crate::tensor::Tensor;

/// Gradient flow through the recurrence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ContextMode {
    /// Backpropagation through time.
    Full,
    /// The hidden state is detached at every step.
    Blocked,
    /// No context network; losses and probes read the top encoder.
    Absent,
}

impl FromStr for ContextMode {
    type Err = GimError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(Self::Full),
            "blocked" => Ok(Self::Blocked),
            "absent" => Ok(Self::Absent),
            other => Err(GimError::invalid("context_mode", format!("unknown mode {other:?}, expected full|blocked|absent"))),
        }
    }
}

impl fmt::Display for ContextMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Full => "full",
            Self::Blocked => "blocked",
            Self::Absent => "absent",
        })
    }
}

/// GRU weights. Input maps are `[d_in, d_h]`, recurrent maps `[d_h, d_h]`.
#[derive(Clone, Debug)]
pub struct GruParams {
    pub d_in: usize,
    pub d_h: usize,
    pub w_z: Param,
    pub u_z: Param,
    pub b_z: Param,
    pub w_r: Param,
    pub u_r: Param,
    pub b_r: Param,
    pub w_h: Param,
    pub u_h: Param,
    pub b_h: Param,
}

impl GruParams {
    pub fn new(module: usize, d_in: usize, d_h: usize, seed: u64, ids: &mut ParamIds) -> Self {
        let mut rng = SeededRng::derive(seed, module as u64, 0, Purpose::Init);
        let mut mk = |name: &str, shape: &[usize], rng: &mut SeededRng| {
            let value = if shape.len() == 1 {
                Tensor::zeros(shape)
            } else {
                glorot_uniform(shape, shape[0], shape[1], rng)
            };
            Param {
                id: ids.alloc(),
                name: format!("ctx{module}.{name}"),
                value,
            }
        };
        Self {
            d_in,
            d_h,
            w_z: mk("w_z", &[d_in, d_h], &mut rng),
            u_z: mk("u_z", &[d_h, d_h], &mut rng),
            b_z: mk("b_z", &[d_h], &mut rng),
            w_r: mk("w_r", &[d_in, d_h], &mut rng),
            u_r: mk("u_r", &[d_h, d_h], &mut rng),
            b_r: mk("b_r", &[d_h], &mut rng),
            w_h: mk("w_h", &[d_in, d_h], &mut rng),
            u_h: mk("u_h", &[d_h, d_h], &mut rng),
            b_h: mk("b_h", &[d_h], &mut rng),
        }
    }

    pub fn zeroed(&self) -> Self {
        let mut out = self.clone();
        for p in out.params_mut() {
            p.value = Tensor::zeros(p.value.shape());
        }
        out
    }
}

impl HasParams for GruParams {
    fn params(&self) -> Vec<&Param> {
        vec![
            &self.w_z, &self.u_z, &self.b_z, &self.w_r, &self.u_r, &self.b_r, &self.w_h, &self.u_h, &self.b_h,
        ]
    }

    fn params_mut(&mut self) -> Vec<&mut Param> {
        vec![
            &mut self.w_z,
            &mut self.u_z,
            &mut self.b_z,
            &mut self.w_r,
            &mut self.u_r,
            &mut self.b_r,
            &mut self.w_h,
            &mut self.u_h,
            &mut self.b_h,
        ]
    }
}

struct GruVars {
    w_z: Var,
    u_z: Var,
    b_z: Var,
    w_r: Var,
    u_r: Var,
    b_r: Var,
    w_h: Var,
    u_h: Var,
    b_h: Var,
}

impl GruVars {
    fn bind(g: &mut Graph, p: &GruParams) -> Self {
        Self {
            w_z: g.param(&p.w_z),
            u_z: g.param(&p.u_z),
            b_z: g.param(&p.b_z),
            w_r: g.param(&p.w_r),
            u_r: g.param(&p.u_r),
            b_r: g.param(&p.b_r),
            w_h: g.param(&p.w_h),
            u_h: g.param(&p.u_h),
            b_h: g.param(&p.b_h),
        }
    }
}

fn gate(g: &mut Graph, x: Var, h: Var, w: Var, u: Var, b: Var) -> Result<Var> {
    let xw = g.matmul(x, w)?;
    let hu = g.matmul(h, u)?;
    let s = g.add(xw, hu)?;
    g.add_bias(s, b, 1)
}

fn step(g: &mut Graph, v: &GruVars, x: Var, h: Var) -> Result<Var> {
    let pre_u = gate(g, x, h, v.w_z, v.u_z, v.b_z)?;
    let u = g.sigmoid(pre_u);
    let pre_r = gate(g, x, h, v.w_r, v.u_r, v.b_r)?;
    let r = g.sigmoid(pre_r);
    let rh = g.mul(r, h)?;
    let pre_c = gate(g, x, rh, v.w_h, v.u_h, v.b_h)?;
    let cand = g.tanh(pre_c);
    let delta = g.sub(cand, h)?;
    let upd = g.mul(u, delta)?;
    g.add(h, upd)
}

/// One GRU update on the graph. `x: [B, d_in]`, `h: [B, d_h]`.
pub fn gru_step_graph(g: &mut Graph, p: &GruParams, x: Var, h: Var) -> Result<Var> {
    let v = GruVars::bind(g, p);
    step(g, &v, x, h)
}

/// One GRU update on plain tensors. `x: [d_in]`, `h: [d_h]`.
pub fn gru_step(p: &GruParams, x: &Tensor, h: &Tensor) -> Result<Tensor> {
    if x.numel() != p.d_in || h.numel() != p.d_h {
        return Err(GimError::shape("gru_step", x.shape(), h.shape()));
    }
    let mut g = Graph::new();
    let xv = g.input(x.reshape(&[1, p.d_in])?);
    let hv = g.input(h.reshape(&[1, p.d_h])?);
    let out = gru_step_graph(&mut g, p, xv, hv)?;
    g.value(out).reshape(&[p.d_h])
}

/// Runs the GRU over `z: [B, d_in, T]` from a zero state, giving `[B, T, d_h]`.
///
/// The encodings always pass through a gradient block; `Blocked` also
/// blocks `h_{t-1}` before every step.
pub fn context_forward(g: &mut Graph, p: &GruParams, z: Var, mode: ContextMode) -> Result<Var> {
    let shape = g.shape(z).to_vec();
    if shape.len() != 3 || shape[1] != p.d_in {
        return Err(GimError::invalid(
            "context_forward",
            format!("expected [B, {}, T], got {shape:?}", p.d_in),
        ));
    }
    if mode == ContextMode::Absent {
        return Err(GimError::invalid("context_forward", "context mode is absent"));
    }
    let (b, t_len) = (shape[0], shape[2]);
    let zb = g.grad_block(z);
    let zt = g.permute(zb, &[0, 2, 1])?;
    let v = GruVars::bind(g, p);
    let mut h = g.input(Tensor::zeros(&[b, p.d_h]));
    let mut states = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let x = g.slice(zt, 1, t, 1)?;
        let x = g.reshape(x, &[b, p.d_in])?;
        if mode == ContextMode::Blocked {
            h = g.grad_block(h);
        }
        h = step(g, &v, x, h)?;
        states.push(h);
    }
    g.stack(&states, 1)
}

/// Plain-tensor context states for `z: [B, d_in, T]`.
pub fn context_eval(p: &GruParams, z: &Tensor) -> Result<Tensor> {
    let mut g = Graph::new();
    let zv = g.input(z.clone());
    let c = context_forward(&mut g, p, zv, ContextMode::Blocked)?;
    Ok(g.value(c).clone())
}

/// The altered score `GB(z_future)ᵀ W_k c_t` on the graph; `z_future: [d_in]`,
/// `c_t: [d_h]`, `w_k: [d_in, d_h]`.
pub fn context_score(g: &mut Graph, z_future: Var, c_t: Var, w_k: &Param) -> Result<Var> {
    let d_in = g.shape(z_future).iter().product::<usize>();
    let d_h = g.shape(c_t).iter().product::<usize>();
    if w_k.value.shape() != [d_in, d_h] {
        return Err(GimError::shape("context_score", w_k.value.shape(), &[d_in, d_h]));
    }
    let zb = g.grad_block(z_future);
    let zr = g.reshape(zb, &[1, d_in])?;
    let cr = g.reshape(c_t, &[d_h, 1])?;
    let w = g.param(w_k);
    let wc = g.matmul(w, cr)?;
    let s = g.matmul(zr, wc)?;
    g.reshape(s, &[1])
}
