//! Central finite-difference verification of the tape's gradients.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::autodiff::{Graph, ParamIds, Var};
use crate::context::{gru_step_graph, ContextMode, GruParams};
use crate::contrastive::{infonce_rows, project_anchors, DelayRows, PredictionHead};
use crate::encoder::{stack_forward, InputKind, StackConfig};
use crate::error::{GimError, Result};
use crate::model::{Geometry, GimModel, ModelConfig, Objective};
use crate::params::HasParams;
use crate::rng::{Purpose, SeededRng, NO_MODULE};
use crate::tensor::Tensor;

/// Relative error floor used in the denominator.
const FLOOR: f64 = 1e-8;

/// Compares the tape gradient of `f` at `x` with central differences.
///
/// Returns `max_i |analytic_i - numeric_i| / max(|analytic_i|, |numeric_i|, 1e-8)`.
/// `f` must build a scalar on the graph it is handed; it is evaluated once on a
/// differentiable leaf and `2 * numel` more times on constant inputs.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    if !(h > 0.0) {
        return Err(GimError::invalid("finite_diff_check", format!("step must be positive, got {h}")));
    }
    let mut g = Graph::new();
    let leaf = g.leaf(x.clone());
    let out = f(&mut g, leaf)?;
    let value = g.value(out).item();
    if !value.is_finite() {
        return Err(GimError::NonFinite(format!("f(x) = {value}")));
    }
    let grads = g.backward(out)?;
    let analytic = grads
        .wrt(leaf)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(x.shape()));

    let eval = |t: &Tensor| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.input(t.clone());
        let out = f(&mut g, v)?;
        Ok(g.value(out).item())
    };
    compare_numeric(&analytic, x, h, eval)
}

/// Largest relative error between `analytic` and central differences of
/// `eval` around `x`.
pub fn compare_numeric(analytic: &Tensor, x: &Tensor, h: f64, eval: impl Fn(&Tensor) -> Result<f64>) -> Result<f64> {
    if analytic.shape() != x.shape() {
        return Err(GimError::shape("finite_diff_check", analytic.shape(), x.shape()));
    }
    let mut worst = 0.0f64;
    let mut probe = x.clone();
    for i in 0..x.numel() {
        let base = x.data()[i];
        probe.data_mut()[i] = base + h;
        let up = eval(&probe)?;
        probe.data_mut()[i] = base - h;
        let down = eval(&probe)?;
        probe.data_mut()[i] = base;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic.data()[i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(FLOOR);
        worst = worst.max(err);
    }
    Ok(worst)
}

/// Finite-difference check of the `which`-th parameter of `owner`. `build`
/// must produce a scalar from the owner's parameters.
pub fn param_diff_check<T, F>(owner: &T, which: usize, build: F, h: f64) -> Result<f64>
where
    T: HasParams + Clone,
    F: Fn(&mut Graph, &T) -> Result<Var>,
{
    let target = owner
        .params()
        .get(which)
        .map(|p| (p.id, p.value.clone()))
        .ok_or_else(|| GimError::invalid("param_diff_check", format!("no parameter {which}")))?;
    let mut g = Graph::new();
    let out = build(&mut g, owner)?;
    let grads = g.backward(out)?;
    let analytic = grads
        .param(target.0)
        .cloned()
        .unwrap_or_else(|| Tensor::zeros(target.1.shape()));
    compare_numeric(&analytic, &target.1, h, |t| {
        let mut moved = owner.clone();
        moved.params_mut()[which].value = t.clone();
        let mut g = Graph::new();
        let out = build(&mut g, &moved)?;
        Ok(g.value(out).item())
    })
}

/// Step and tolerance of the primitive suite.
pub const SUITE_STEP: f64 = 1e-5;
pub const SUITE_TOLERANCE: f64 = 1e-4;

/// Outcome of one primitive over all its random cases.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct SuiteEntry {
    pub name: &'static str,
    pub cases: usize,
    pub worst: f64,
    pub passed: bool,
}

type Case = fn(&mut SeededRng) -> Result<f64>;

fn rand_t(shape: &[usize], rng: &mut SeededRng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| rng.uniform_range(-1.0, 1.0)).collect())
}

fn dim(rng: &mut SeededRng, lo: usize, hi: usize) -> usize {
    lo + rng.below(hi - lo + 1)
}

/// `sum(r * y)`, which exercises every entry of the Jacobian.
fn project(g: &mut Graph, y: Var, r: &Tensor) -> Result<Var> {
    let rv = g.input(r.clone());
    let m = g.mul(y, rv)?;
    Ok(g.sum(m))
}

/// Random weights shaped like the output of `op`.
fn projection_for(rng: &mut SeededRng, op: impl Fn(&mut Graph) -> Result<Var>) -> Result<Tensor> {
    let mut g = Graph::new();
    let y = op(&mut g)?;
    Ok(rand_t(g.shape(y), rng))
}

fn unary(rng: &mut SeededRng, x: &Tensor, op: impl Fn(&mut Graph, Var) -> Result<Var>) -> Result<f64> {
    let r = projection_for(rng, |g| {
        let v = g.input(x.clone());
        op(g, v)
    })?;
    finite_diff_check(
        |g, v| {
            let y = op(g, v)?;
            project(g, y, &r)
        },
        x,
        SUITE_STEP,
    )
}

fn binary(rng: &mut SeededRng, a: &Tensor, b: &Tensor, op: impl Fn(&mut Graph, Var, Var) -> Result<Var>) -> Result<f64> {
    let r = projection_for(rng, |g| {
        let (av, bv) = (g.input(a.clone()), g.input(b.clone()));
        op(g, av, bv)
    })?;
    let ea = finite_diff_check(
        |g, v| {
            let bv = g.input(b.clone());
            let y = op(g, v, bv)?;
            project(g, y, &r)
        },
        a,
        SUITE_STEP,
    )?;
    let eb = finite_diff_check(
        |g, v| {
            let av = g.input(a.clone());
            let y = op(g, av, v)?;
            project(g, y, &r)
        },
        b,
        SUITE_STEP,
    )?;
    Ok(ea.max(eb))
}

/// Entries with magnitude in `[0.1, 1]` and random sign.
fn away_from_zero(shape: &[usize], rng: &mut SeededRng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.uniform_range(0.1, 1.0);
            if rng.below(2) == 0 {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::from_parts(shape.to_vec(), data)
}

fn conv_case(rng: &mut SeededRng, two_d: bool) -> Result<f64> {
    let (b, ci, co, k) = (dim(rng, 1, 2), dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3));
    let (stride, pad) = (dim(rng, 1, 2), dim(rng, 0, 1));
    let len = k + dim(rng, 0, 4);
    let (xs, ws) = if two_d {
        (vec![b, ci, len, len + 1], vec![co, ci, k, k])
    } else {
        (vec![b, ci, len], vec![co, ci, k])
    };
    let (x, w, bias) = (rand_t(&xs, rng), rand_t(&ws, rng), rand_t(&[co], rng));
    let conv = move |g: &mut Graph, x: Var, w: Var, bv: Var| {
        if two_d {
            g.conv2d(x, w, Some(bv), stride, pad)
        } else {
            g.conv1d(x, w, Some(bv), stride, pad)
        }
    };
    let e1 = binary(rng, &x, &w, |g, x, w| {
        let bv = g.input(bias.clone());
        conv(g, x, w, bv)
    })?;
    let e2 = unary(rng, &bias, |g, bv| {
        let (xv, wv) = (g.input(x.clone()), g.input(w.clone()));
        conv(g, xv, wv, bv)
    })?;
    Ok(e1.max(e2))
}

fn gru_case(rng: &mut SeededRng) -> Result<f64> {
    let (b, d_in, d_h) = (dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 1, 4));
    let mut p = GruParams::new(0, d_in, d_h, rng.below(1 << 20) as u64, &mut ParamIds::new());
    for q in p.params_mut() {
        q.value = away_from_zero(&q.value.shape().to_vec(), rng);
    }
    let (x, h) = (away_from_zero(&[b, d_in], rng), away_from_zero(&[b, d_h], rng));
    let r = away_from_zero(&[b, d_h], rng);
    let p2 = p.clone();
    let mut worst = binary(rng, &x, &h, |g, x, h| gru_step_graph(g, &p2, x, h))?;
    for which in 0..p.params().len() {
        let e = param_diff_check(
            &p,
            which,
            |g, p| {
                let (xv, hv) = (g.input(x.clone()), g.input(h.clone()));
                let y = gru_step_graph(g, p, xv, hv)?;
                project(g, y, &r)
            },
            SUITE_STEP,
        )?;
        worst = worst.max(e);
    }
    Ok(worst)
}

fn head_for(rng: &mut SeededRng, d_t: usize, d_a: usize, delays: &[usize]) -> Result<PredictionHead> {
    let mut head = PredictionHead::new(0, d_t, d_a, delays, rng.below(1 << 20) as u64, &mut ParamIds::new())?;
    for q in head.params_mut() {
        q.value = rand_t(&q.value.shape().to_vec(), rng);
    }
    Ok(head)
}

fn score_case(rng: &mut SeededRng) -> Result<f64> {
    let (a, n, d_t, d_a) = (dim(rng, 1, 3), dim(rng, 2, 4), dim(rng, 1, 4), dim(rng, 1, 4));
    let head = head_for(rng, d_t, d_a, &[1])?;
    let (anchor, bag) = (rand_t(&[a, d_a], rng), rand_t(&[a, n, d_t], rng));
    let r = rand_t(&[a, n], rng);
    let w = head.weight(1)?.clone();
    let e1 = binary(rng, &anchor, &bag, |g, av, bv| {
        let pred = project_anchors(g, av, &w)?;
        g.bag_scores(pred, bv)
    })?;
    let e2 = param_diff_check(
        &head,
        0,
        |g, head| {
            let (av, bv) = (g.input(anchor.clone()), g.input(bag.clone()));
            let pred = project_anchors(g, av, head.weight(1)?)?;
            let s = g.bag_scores(pred, bv)?;
            project(g, s, &r)
        },
        SUITE_STEP,
    )?;
    Ok(e1.max(e2))
}

fn infonce_case(rng: &mut SeededRng) -> Result<f64> {
    let (rows, d_t, d_a) = (dim(rng, 5, 8), dim(rng, 1, 4), dim(rng, 1, 4));
    let delays = [1, 2];
    let head = head_for(rng, d_t, d_a, &delays)?;
    let (anchors, targets) = (rand_t(&[rows, d_a], rng), rand_t(&[rows, d_t], rng));
    let pairs: BTreeMap<usize, DelayRows> = delays
        .iter()
        .map(|&k| {
            (
                k,
                DelayRows {
                    anchors: (0..rows - k).collect(),
                    targets: (k..rows).collect(),
                },
            )
        })
        .collect();
    let (negatives, seed) = (dim(rng, 3, 6), rng.below(1 << 20) as u64);
    let loss = |g: &mut Graph, head: &PredictionHead, av: Var, tv: Var| -> Result<Var> {
        Ok(infonce_rows(g, head, av, tv, &pairs, negatives, &mut SeededRng::new(seed))?.total)
    };
    let wrt_rows = binary(rng, &anchors, &targets, |g, av, tv| loss(g, &head, av, tv))?;
    let mut worst = wrt_rows;
    for which in 0..delays.len() {
        let e = param_diff_check(
            &head,
            which,
            |g, head| {
                let (av, tv) = (g.input(anchors.clone()), g.input(targets.clone()));
                loss(g, head, av, tv)
            },
            SUITE_STEP,
        )?;
        worst = worst.max(e);
    }
    Ok(worst)
}

/// Every differentiable primitive plus the composite operations.
pub const SUITE: &[(&str, Case)] = &[
    ("add", |rng| {
        let s = [dim(rng, 1, 3), dim(rng, 1, 4)];
        let (a, b) = (rand_t(&s, rng), rand_t(&s, rng));
        binary(rng, &a, &b, |g, a, b| g.add(a, b))
    }),
    ("sub", |rng| {
        let s = [dim(rng, 1, 3), dim(rng, 1, 4)];
        let (a, b) = (rand_t(&s, rng), rand_t(&s, rng));
        binary(rng, &a, &b, |g, a, b| g.sub(a, b))
    }),
    ("mul", |rng| {
        let s = [dim(rng, 1, 3), dim(rng, 1, 4)];
        let (a, b) = (rand_t(&s, rng), rand_t(&s, rng));
        binary(rng, &a, &b, |g, a, b| g.mul(a, b))
    }),
    ("affine", |rng| {
        let x = rand_t(&[dim(rng, 1, 6)], rng);
        let (s, t) = (rng.uniform_range(-2.0, 2.0), rng.uniform_range(-1.0, 1.0));
        unary(rng, &x, |g, x| Ok(g.affine(x, s, t)))
    }),
    ("add_bias", |rng| {
        let s = [dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3)];
        let axis = rng.below(3);
        let (x, b) = (rand_t(&s, rng), rand_t(&[s[axis]], rng));
        binary(rng, &x, &b, |g, x, b| g.add_bias(x, b, axis))
    }),
    ("matmul", |rng| {
        let (m, k, n) = (dim(rng, 1, 4), dim(rng, 1, 4), dim(rng, 1, 4));
        let (a, b) = (rand_t(&[m, k], rng), rand_t(&[k, n], rng));
        binary(rng, &a, &b, |g, a, b| g.matmul(a, b))
    }),
    ("transpose", |rng| {
        let x = rand_t(&[dim(rng, 1, 4), dim(rng, 1, 4)], rng);
        unary(rng, &x, |g, x| g.transpose(x))
    }),
    ("conv1d", |rng| conv_case(rng, false)),
    ("conv2d", |rng| conv_case(rng, true)),
    ("relu", |rng| {
        let x = away_from_zero(&[dim(rng, 1, 8)], rng);
        unary(rng, &x, |g, x| Ok(g.relu(x)))
    }),
    ("sigmoid", |rng| {
        let x = rand_t(&[dim(rng, 1, 8)], rng).map(|v| 3.0 * v);
        unary(rng, &x, |g, x| Ok(g.sigmoid(x)))
    }),
    ("tanh", |rng| {
        let x = rand_t(&[dim(rng, 1, 8)], rng).map(|v| 3.0 * v);
        unary(rng, &x, |g, x| Ok(g.tanh(x)))
    }),
    ("sum", |rng| {
        let x = rand_t(&[dim(rng, 1, 3), dim(rng, 1, 3)], rng);
        unary(rng, &x, |g, x| Ok(g.sum(x)))
    }),
    ("mean", |rng| {
        let x = rand_t(&[dim(rng, 1, 3), dim(rng, 1, 3)], rng);
        unary(rng, &x, |g, x| Ok(g.mean(x)))
    }),
    ("mean_pool", |rng| {
        let x = rand_t(&[dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3)], rng);
        let axes: Vec<usize> = match rng.below(4) {
            0 => vec![0],
            1 => vec![1, 2],
            2 => vec![0, 2],
            _ => vec![2],
        };
        unary(rng, &x, |g, x| g.mean_pool(x, &axes))
    }),
    ("log_softmax", |rng| {
        let x = rand_t(&[dim(rng, 1, 3), dim(rng, 2, 5)], rng).map(|v| 3.0 * v);
        let axis = rng.below(2);
        unary(rng, &x, |g, x| g.log_softmax(x, axis))
    }),
    ("gather_cross_entropy", |rng| {
        let (rows, n) = (dim(rng, 1, 4), dim(rng, 2, 5));
        let x = rand_t(&[rows, n], rng);
        let index: Vec<usize> = (0..rows).map(|_| rng.below(n)).collect();
        unary(rng, &x, |g, x| g.gather_cross_entropy(x, &index))
    }),
    ("reshape", |rng| {
        let (a, b) = (dim(rng, 1, 3), dim(rng, 1, 3));
        let x = rand_t(&[a, b, 2], rng);
        unary(rng, &x, |g, x| g.reshape(x, &[b, 2 * a]))
    }),
    ("permute", |rng| {
        let x = rand_t(&[dim(rng, 1, 3), dim(rng, 1, 3), dim(rng, 1, 3)], rng);
        let mut perm = vec![0, 1, 2];
        rng.shuffle(&mut perm);
        unary(rng, &x, |g, x| g.permute(x, &perm))
    }),
    ("index_rows", |rng| {
        let rows = dim(rng, 1, 4);
        let x = rand_t(&[rows, dim(rng, 1, 3)], rng);
        let index: Vec<usize> = (0..dim(rng, 1, 6)).map(|_| rng.below(rows)).collect();
        unary(rng, &x, |g, x| g.index_rows(x, &index))
    }),
    ("bag_scores", |rng| {
        let (a, n, d) = (dim(rng, 1, 3), dim(rng, 1, 4), dim(rng, 1, 4));
        let (p, b) = (rand_t(&[a, d], rng), rand_t(&[a, n, d], rng));
        binary(rng, &p, &b, |g, p, b| g.bag_scores(p, b))
    }),
    ("stack", |rng| {
        let s = [dim(rng, 1, 3), dim(rng, 1, 3)];
        let axis = rng.below(3);
        let (a, b) = (rand_t(&s, rng), rand_t(&s, rng));
        binary(rng, &a, &b, |g, a, b| g.stack(&[a, b, a], axis))
    }),
    ("slice", |rng| {
        let s = [dim(rng, 1, 3), dim(rng, 2, 5)];
        let x = rand_t(&s, rng);
        let len = dim(rng, 1, s[1] - 1);
        let start = rng.below(s[1] - len + 1);
        unary(rng, &x, |g, x| g.slice(x, 1, start, len))
    }),
    ("gru_step", gru_case),
    ("log_bilinear_score", score_case),
    ("infonce", infonce_case),
];

/// Runs `cases` random instances of every suite entry.
pub fn run_suite(cases: usize, seed: u64) -> Result<Vec<SuiteEntry>> {
    SUITE
        .iter()
        .enumerate()
        .map(|(i, &(name, case))| {
            let mut worst = 0.0f64;
            for c in 0..cases {
                let mut rng = SeededRng::derive(seed, i as u64, c as u64, Purpose::Check);
                worst = worst.max(case(&mut rng)?);
            }
            Ok(SuiteEntry {
                name,
                cases,
                worst,
                passed: worst < SUITE_TOLERANCE,
            })
        })
        .collect()
}

/// Builds a small model with every unit kind and checks that each unit's
/// loss leaves all other units' gradients exactly zero.
pub fn isolation_check(seed: u64) -> Result<bool> {
    let config = ModelConfig {
        stack: StackConfig::uniform(InputKind::Sequence, 2, 3, 3, 2, 3, 1, 1),
        context_mode: ContextMode::Full,
        context_dim: 3,
    };
    let objective = Objective {
        geometry: Geometry::Sequence,
        delays: vec![1, 2],
        n_negatives: 3,
        loss_window: None,
    };
    let model = GimModel::new(&config, &objective, &[10, 2], seed)?;
    let mut rng = SeededRng::derive(seed, NO_MODULE, 0, Purpose::Check);
    let x = model.prepare_batch(&rand_t(&[2, 10, 2], &mut rng))?;
    let mut g = Graph::new();
    let xv = g.input(x);
    let stack = stack_forward(&model.encoders, &mut g, xv)?;
    let mut losses = Vec::new();
    for u in 0..model.unit_count() {
        let z = if model.is_context_unit(u) { stack.top() } else { stack.per_module[u] };
        let (mut neg, mut win) = (SeededRng::new(seed), SeededRng::new(seed + 1));
        losses.push(model.unit_loss(&mut g, u, z, 2, &mut neg, &mut win)?);
    }
    for (u, loss) in losses.iter().enumerate() {
        let grads = g.backward(loss.total)?;
        for v in (0..model.unit_count()).filter(|&v| v != u) {
            if model
                .unit_params(v)
                .iter()
                .any(|p| grads.param(p.id).is_some_and(|t| !t.is_all_zero()))
            {
                return Ok(false);
            }
        }
        let own = model.unit_params(u);
        if !own.iter().any(|p| grads.param(p.id).is_some_and(|t| !t.is_all_zero())) {
            return Ok(false);
        }
    }
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SeededRng;

    #[test]
    fn sum_of_squares_is_tight() {
        let mut rng = SeededRng::new(3);
        let x = Tensor::vector((0..8).map(|_| rng.uniform_range(-1.0, 1.0)).collect());
        let err = finite_diff_check(
            |g, x| {
                let sq = g.mul(x, x)?;
                Ok(g.sum(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::vector(vec![0.3, -0.2]);
        let err = finite_diff_check(
            |g, _| {
                let c = g.input(Tensor::scalar(4.0));
                Ok(g.sum(c))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn rejects_non_finite_value() {
        let x = Tensor::vector(vec![1.0]);
        let res = finite_diff_check(
            |g, x| {
                let y = g.scale(x, f64::INFINITY);
                Ok(g.sum(y))
            },
            &x,
            1e-5,
        );
        assert!(matches!(res, Err(GimError::NonFinite(_))));
    }

    #[test]
    fn matmul_sum_is_tight() {
        let mut rng = SeededRng::new(5);
        let w = rand_t(&[3, 2], &mut rng);
        let x = rand_t(&[4, 3], &mut rng);
        let err = finite_diff_check(
            |g, x| {
                let wv = g.input(w.clone());
                let y = g.matmul(x, wv)?;
                Ok(g.sum(y))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn suite_smoke() {
        for e in run_suite(3, 1).unwrap() {
            assert!(e.passed, "{} worst {}", e.name, e.worst);
        }
        assert!(isolation_check(2).unwrap());
    }
}
