//! Evaluation and reverse-mode gradients of checked programs.
//!
//! The backward pass walks the AST again, recomputing child values on
//! demand. Reductions over `t` skip every step at which some index falls
//! outside the plan; a mean over zero valid steps is zero.

use std::cell::RefCell;
use std::collections::HashMap;

use super::ast::*;
use super::error::{DslError, Pos};
use crate::diffcore::{sigmoid, softplus, Array2};
use crate::dynmodel::DynamicsModel;
use crate::envs::wrap_angle;
use crate::guidance::GuideInput;

/// Everything an expression can read.
#[derive(Clone, Copy)]
pub struct EvalInput<'a> {
    pub x: &'a GuideInput,
    pub goal: &'a [f64],
    pub dynamics: Option<&'a DynamicsModel>,
}

impl<'a> EvalInput<'a> {
    pub fn new(x: &'a GuideInput, goal: &'a [f64], dynamics: Option<&'a DynamicsModel>) -> Self {
        Self { x, goal, dynamics }
    }
}

/// Gradient split by the units of the source read.
#[derive(Clone, Debug, PartialEq)]
pub struct Grads {
    pub den: Array2,
    pub norm: Array2,
}

impl Grads {
    fn zeros(x: &GuideInput) -> Self {
        Self {
            den: Array2::zeros(x.den.rows(), x.den.cols()),
            norm: Array2::zeros(x.den.rows(), x.den.cols()),
        }
    }

    /// Total gradient with respect to the normalized trajectory.
    pub fn normalized(&self, scales: &[f64]) -> Array2 {
        let mut g = self.norm.clone();
        for r in 0..g.rows() {
            for (c, v) in g.row_mut(r).iter_mut().enumerate() {
                *v += self.den[(r, c)] * scales[c];
            }
        }
        g
    }

    /// Total gradient with respect to the env-unit trajectory.
    pub fn env_units(&self, scales: &[f64]) -> Array2 {
        let mut g = self.den.clone();
        for r in 0..g.rows() {
            for (c, v) in g.row_mut(r).iter_mut().enumerate() {
                *v += self.norm[(r, c)] / scales[c];
            }
        }
        g
    }
}

enum Fail {
    /// An index left the plan inside a time reduction.
    Skip,
    Err(DslError),
}

impl From<DslError> for Fail {
    fn from(e: DslError) -> Self {
        Fail::Err(e)
    }
}

type R<T> = std::result::Result<T, Fail>;

fn eval_err(pos: Pos, message: impl Into<String>) -> Fail {
    Fail::Err(DslError::Eval { pos, message: message.into() })
}

fn finish<T>(r: R<T>, pos: Pos) -> Result<T, DslError> {
    match r {
        Ok(v) => Ok(v),
        Err(Fail::Err(e)) => Err(e),
        // Only reachable if a skip escapes a reduction, which the checker rules out.
        Err(Fail::Skip) => Err(DslError::Eval {
            pos,
            message: "time index outside the plan".into(),
        }),
    }
}

struct Evaluator<'a> {
    input: EvalInput<'a>,
    horizon: i64,
    pred_cache: RefCell<HashMap<i64, (Vec<f64>, Array2)>>,
}

impl<'a> Evaluator<'a> {
    fn new(input: EvalInput<'a>) -> Self {
        Self {
            horizon: input.x.den.rows() as i64,
            input,
            pred_cache: RefCell::new(HashMap::new()),
        }
    }

    fn row(&self, e: &Expr, time: TimeIdx, t: Option<i64>) -> R<usize> {
        let r = time
            .resolve(t, self.horizon)
            .ok_or_else(|| eval_err(e.pos, "`t` used outside a time reduction"))?;
        if r < 0 || r >= self.horizon {
            if t.is_some() {
                return Err(Fail::Skip);
            }
            return Err(Fail::Err(DslError::IndexOutOfRange {
                pos: e.pos,
                source_name: "time",
                index: r,
                dim: self.horizon as usize,
            }));
        }
        Ok(r as usize)
    }

    fn prediction(&self, e: &Expr, r: usize) -> R<(Vec<f64>, Array2)> {
        if let Some(hit) = self.pred_cache.borrow().get(&(r as i64)) {
            return Ok(hit.clone());
        }
        let model = self.input.dynamics.ok_or_else(|| eval_err(e.pos, "npred needs a dynamics model"))?;
        let x = self.input.x;
        let row = x.norm.row(r);
        let (a, s) = row.split_at(x.act_dim);
        let out = model.jacobian(s, a).map_err(|err| eval_err(e.pos, format!("dynamics model: {err}")))?;
        self.pred_cache.borrow_mut().insert(r as i64, out.clone());
        Ok(out)
    }

    fn cond(&self, e: &Expr, t: Option<i64>) -> R<bool> {
        match &e.kind {
            ExprKind::Cmp(op, a, b) => {
                let (va, vb) = (self.value(a, t)?[0], self.value(b, t)?[0]);
                Ok(match op {
                    CmpOp::Lt => va < vb,
                    CmpOp::Gt => va > vb,
                })
            }
            _ => Err(eval_err(e.pos, "expected a comparison")),
        }
    }

    fn value(&self, e: &Expr, t: Option<i64>) -> R<Vec<f64>> {
        let x = self.input.x;
        Ok(match &e.kind {
            ExprKind::Num(v) => vec![*v],
            ExprKind::Time => vec![t.ok_or_else(|| eval_err(e.pos, "`t` used outside a time reduction"))? as f64],
            ExprKind::Horizon => vec![self.horizon as f64],
            ExprKind::Goal(i) => vec![*self.input.goal.get(*i).ok_or_else(|| eval_err(e.pos, format!("goal has no component {i}")))?],
            ExprKind::Access { src, time, index } => {
                let r = self.row(e, *time, t)?;
                let (start, n) = (index.start(), index.len());
                match src {
                    Source::Obs => x.den.row(r)[x.act_dim + start..x.act_dim + start + n].to_vec(),
                    Source::Act => x.den.row(r)[start..start + n].to_vec(),
                    Source::NObs => x.norm.row(r)[x.act_dim + start..x.act_dim + start + n].to_vec(),
                    Source::NAct => x.norm.row(r)[start..start + n].to_vec(),
                    Source::NPred => self.prediction(e, r)?.0[start..start + n].to_vec(),
                }
            }
            ExprKind::Neg(a) => self.value(a, t)?.into_iter().map(|v| -v).collect(),
            ExprKind::Bin(op, a, b) => {
                let (va, vb) = (self.value(a, t)?, self.value(b, t)?);
                if *op == BinOp::Div && vb.contains(&0.0) {
                    return Err(eval_err(e.pos, "division by zero"));
                }
                zip_bcast(&va, &vb, |p, q| match op {
                    BinOp::Add => p + q,
                    BinOp::Sub => p - q,
                    BinOp::Mul => p * q,
                    BinOp::Div => p / q,
                })
            }
            ExprKind::Cmp(..) => vec![if self.cond(e, t)? { 1.0 } else { 0.0 }],
            ExprKind::Call(f, args) => self.call_value(e, *f, args, t)?,
        })
    }

    fn call_value(&self, e: &Expr, f: Func, args: &[Expr], t: Option<i64>) -> R<Vec<f64>> {
        if f.is_time_reduction() {
            let mut total = 0.0;
            let mut count = 0usize;
            for s in 0..self.horizon {
                match self.value(&args[0], Some(s)) {
                    Ok(v) => {
                        total += v[0];
                        count += 1;
                    }
                    Err(Fail::Skip) => {}
                    Err(err) => return Err(err),
                }
            }
            return Ok(vec![match f {
                Func::MeanT if count > 0 => total / count as f64,
                Func::MeanT => 0.0,
                _ => total,
            }]);
        }
        if f == Func::Mask {
            let body = self.value(&args[1], t)?;
            return Ok(if self.cond(&args[0], t)? { body } else { vec![0.0; body.len()] });
        }
        let v = self.value(&args[0], t)?;
        Ok(match f {
            Func::Norm2 => vec![v.iter().map(|x| x * x).sum::<f64>().sqrt()],
            Func::SqNorm => vec![v.iter().map(|x| x * x).sum()],
            Func::Mean => vec![v.iter().sum::<f64>() / v.len() as f64],
            Func::Sum => vec![v.iter().sum()],
            Func::Abs => v.iter().map(|x| x.abs()).collect(),
            Func::Softplus => v.iter().map(|&x| softplus(x)).collect(),
            Func::Heaviside => v.iter().map(|&x| if x > 0.0 { 1.0 } else { 0.0 }).collect(),
            Func::Wrap => v.iter().map(|&x| wrap_angle(x)).collect(),
            Func::Clamp => {
                let (lo, hi) = (self.value(&args[1], t)?[0], self.value(&args[2], t)?[0]);
                if lo > hi {
                    return Err(eval_err(e.pos, format!("clamp bounds out of order: {lo} > {hi}")));
                }
                v.iter().map(|x| x.clamp(lo, hi)).collect()
            }
            Func::Interp => {
                let b = self.value(&args[1], t)?;
                let s = self.value(&args[2], t)?[0];
                zip_bcast(&v, &b, |p, q| p + s * (q - p))
            }
            Func::Mask | Func::MeanT | Func::SumT => unreachable!(),
        })
    }

    /// Accumulates `adj^T d value / d inputs` into `g`.
    fn backward(&self, e: &Expr, t: Option<i64>, adj: &[f64], g: &mut Grads) -> R<()> {
        let x = self.input.x;
        match &e.kind {
            ExprKind::Num(_) | ExprKind::Time | ExprKind::Horizon | ExprKind::Goal(_) | ExprKind::Cmp(..) => {}
            ExprKind::Access { src, time, index } => {
                let r = self.row(e, *time, t)?;
                let start = index.start();
                match src {
                    Source::Obs | Source::NObs => {
                        let dst = if *src == Source::Obs { &mut g.den } else { &mut g.norm };
                        for (k, a) in adj.iter().enumerate() {
                            dst[(r, x.act_dim + start + k)] += a;
                        }
                    }
                    Source::Act | Source::NAct => {
                        let dst = if *src == Source::Act { &mut g.den } else { &mut g.norm };
                        for (k, a) in adj.iter().enumerate() {
                            dst[(r, start + k)] += a;
                        }
                    }
                    Source::NPred => {
                        let (_, jac) = self.prediction(e, r)?;
                        let obs = jac.rows();
                        for (k, a) in adj.iter().enumerate() {
                            let jrow = jac.row(start + k);
                            for c in 0..obs {
                                g.norm[(r, x.act_dim + c)] += a * jrow[c];
                            }
                            for c in 0..x.act_dim {
                                g.norm[(r, c)] += a * jrow[obs + c];
                            }
                        }
                    }
                }
            }
            ExprKind::Neg(a) => {
                let neg: Vec<f64> = adj.iter().map(|v| -v).collect();
                self.backward(a, t, &neg, g)?;
            }
            ExprKind::Bin(op, a, b) => {
                let (va, vb) = (self.value(a, t)?, self.value(b, t)?);
                let n = va.len().max(vb.len());
                let at = |v: &[f64], i: usize| if v.len() == 1 { v[0] } else { v[i] };
                let mut ga = vec![0.0; n];
                let mut gb = vec![0.0; n];
                for i in 0..n {
                    let (p, q, d) = (at(&va, i), at(&vb, i), adj[i]);
                    let (dp, dq) = match op {
                        BinOp::Add => (d, d),
                        BinOp::Sub => (d, -d),
                        BinOp::Mul => (d * q, d * p),
                        BinOp::Div => (d / q, -d * p / (q * q)),
                    };
                    ga[i] = dp;
                    gb[i] = dq;
                }
                self.backward(a, t, &reduce_to(ga, va.len()), g)?;
                self.backward(b, t, &reduce_to(gb, vb.len()), g)?;
            }
            ExprKind::Call(f, args) => self.call_backward(*f, args, t, adj, g)?,
        }
        Ok(())
    }

    fn call_backward(&self, f: Func, args: &[Expr], t: Option<i64>, adj: &[f64], g: &mut Grads) -> R<()> {
        if f.is_time_reduction() {
            let mut valid = Vec::new();
            for s in 0..self.horizon {
                match self.value(&args[0], Some(s)) {
                    Ok(_) => valid.push(s),
                    Err(Fail::Skip) => {}
                    Err(err) => return Err(err),
                }
            }
            let w = match f {
                Func::MeanT if !valid.is_empty() => adj[0] / valid.len() as f64,
                Func::MeanT => 0.0,
                _ => adj[0],
            };
            for s in valid {
                self.backward(&args[0], Some(s), &[w], g)?;
            }
            return Ok(());
        }
        if f == Func::Mask {
            if self.cond(&args[0], t)? {
                self.backward(&args[1], t, adj, g)?;
            }
            return Ok(());
        }
        let v = self.value(&args[0], t)?;
        let child: Vec<f64> = match f {
            Func::Norm2 => {
                let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
                v.iter().map(|x| if n > 0.0 { adj[0] * x / n } else { 0.0 }).collect()
            }
            Func::SqNorm => v.iter().map(|x| 2.0 * adj[0] * x).collect(),
            Func::Mean => vec![adj[0] / v.len() as f64; v.len()],
            Func::Sum => vec![adj[0]; v.len()],
            Func::Abs => v.iter().zip(adj).map(|(x, a)| if *x == 0.0 { 0.0 } else { a * x.signum() }).collect(),
            Func::Softplus => v.iter().zip(adj).map(|(&x, a)| a * sigmoid(x)).collect(),
            // Step functions are flat almost everywhere.
            Func::Heaviside => return Ok(()),
            Func::Wrap => adj.to_vec(),
            Func::Clamp => {
                let (lo, hi) = (self.value(&args[1], t)?[0], self.value(&args[2], t)?[0]);
                let (mut glo, mut ghi) = (0.0, 0.0);
                let inner = v
                    .iter()
                    .zip(adj)
                    .map(|(&x, &a)| {
                        if x < lo {
                            glo += a;
                            0.0
                        } else if x > hi {
                            ghi += a;
                            0.0
                        } else {
                            a
                        }
                    })
                    .collect();
                self.backward(&args[1], t, &[glo], g)?;
                self.backward(&args[2], t, &[ghi], g)?;
                inner
            }
            Func::Interp => {
                let b = self.value(&args[1], t)?;
                let s = self.value(&args[2], t)?[0];
                let n = v.len().max(b.len());
                let at = |w: &[f64], i: usize| if w.len() == 1 { w[0] } else { w[i] };
                let ga: Vec<f64> = (0..n).map(|i| adj[i] * (1.0 - s)).collect();
                let gb: Vec<f64> = (0..n).map(|i| adj[i] * s).collect();
                let gs: f64 = (0..n).map(|i| adj[i] * (at(&b, i) - at(&v, i))).sum();
                self.backward(&args[1], t, &reduce_to(gb, b.len()), g)?;
                self.backward(&args[2], t, &[gs], g)?;
                reduce_to(ga, v.len())
            }
            Func::Mask | Func::MeanT | Func::SumT => unreachable!(),
        };
        self.backward(&args[0], t, &child, g)
    }
}

fn zip_bcast(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    let n = a.len().max(b.len());
    (0..n)
        .map(|i| {
            let p = if a.len() == 1 { a[0] } else { a[i] };
            let q = if b.len() == 1 { b[0] } else { b[i] };
            f(p, q)
        })
        .collect()
}

fn reduce_to(g: Vec<f64>, len: usize) -> Vec<f64> {
    if len == 1 && g.len() != 1 {
        vec![g.iter().sum()]
    } else {
        g
    }
}

impl Expr {
    /// Scalar value of a checked expression.
    pub fn eval(&self, input: EvalInput<'_>) -> Result<f64, DslError> {
        let ev = Evaluator::new(input);
        finish(ev.value(self, None), self.pos).map(|v| v[0])
    }

    pub fn eval_grad(&self, input: EvalInput<'_>) -> Result<(f64, Grads), DslError> {
        let ev = Evaluator::new(input);
        let v = finish(ev.value(self, None), self.pos)?[0];
        let mut g = Grads::zeros(input.x);
        finish(ev.backward(self, None, &[1.0], &mut g), self.pos)?;
        Ok((v, g))
    }
}

impl TermDef {
    /// Unweighted energy.
    pub fn eval(&self, input: EvalInput<'_>) -> Result<f64, DslError> {
        self.expr.eval(input)
    }

    pub fn eval_grad(&self, input: EvalInput<'_>) -> Result<(f64, Grads), DslError> {
        self.expr.eval_grad(input)
    }
}

impl Program {
    /// Weighted sum of all terms.
    pub fn eval(&self, input: EvalInput<'_>) -> Result<f64, DslError> {
        let mut total = 0.0;
        for t in &self.terms {
            total += t.weight * t.eval(input)?;
        }
        Ok(total)
    }

    /// Weighted energy and its gradient with respect to the env-unit trajectory.
    pub fn eval_grad(&self, input: EvalInput<'_>) -> Result<(f64, Array2), DslError> {
        let (e, g) = self.eval_grad_split(input)?;
        Ok((e, g.env_units(&input.x.scales)))
    }

    pub fn eval_grad_split(&self, input: EvalInput<'_>) -> Result<(f64, Grads), DslError> {
        let mut total = 0.0;
        let mut acc = Grads::zeros(input.x);
        for t in &self.terms {
            let (v, g) = t.eval_grad(input)?;
            total += t.weight * v;
            acc.den.axpy(t.weight, &g.den);
            acc.norm.axpy(t.weight, &g.norm);
        }
        Ok((total, acc))
    }
}
