use std::fmt;

use super::error::Pos;
use crate::guidance::TermPhase;

/// Trajectory data an access reads.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Source {
    /// States in env units.
    Obs,
    /// Actions in env units.
    Act,
    /// States in normalized units.
    NObs,
    /// Actions in normalized units.
    NAct,
    /// Dynamics-model next-state prediction from step `t`, normalized.
    NPred,
}

impl Source {
    pub fn as_str(self) -> &'static str {
        match self {
            Source::Obs => "obs",
            Source::Act => "act",
            Source::NObs => "nobs",
            Source::NAct => "nact",
            Source::NPred => "npred",
        }
    }

    pub(crate) fn from_ident(s: &str) -> Option<Self> {
        Some(match s {
            "obs" => Source::Obs,
            "act" => Source::Act,
            "nobs" => Source::NObs,
            "nact" => Source::NAct,
            "npred" => Source::NPred,
            _ => return None,
        })
    }

    pub fn reads_actions(self) -> bool {
        matches!(self, Source::Act | Source::NAct)
    }
}

/// Row selector inside `src[time, index]`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TimeIdx {
    /// `t + k` (`k` may be negative); only valid inside a time reduction.
    Rel(i64),
    /// Absolute step `k`.
    Abs(i64),
    /// `H - k`.
    FromEnd(i64),
}

impl TimeIdx {
    pub fn uses_t(self) -> bool {
        matches!(self, TimeIdx::Rel(_))
    }

    pub fn resolve(self, t: Option<i64>, horizon: i64) -> Option<i64> {
        match self {
            TimeIdx::Rel(k) => t.map(|t| t + k),
            TimeIdx::Abs(k) => Some(k),
            TimeIdx::FromEnd(k) => Some(horizon - k),
        }
    }
}

impl fmt::Display for TimeIdx {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            TimeIdx::Rel(0) => f.write_str("t"),
            TimeIdx::Rel(k) if k > 0 => write!(f, "t+{k}"),
            TimeIdx::Rel(k) => write!(f, "t-{}", -k),
            TimeIdx::Abs(k) => write!(f, "{k}"),
            TimeIdx::FromEnd(k) => write!(f, "H-{k}"),
        }
    }
}

/// Column selector: a single index or the half-open range `lo:hi`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Index {
    One(usize),
    Range(usize, usize),
}

impl Index {
    pub fn len(self) -> usize {
        match self {
            Index::One(_) => 1,
            Index::Range(lo, hi) => hi.saturating_sub(lo),
        }
    }

    pub fn is_empty(self) -> bool {
        self.len() == 0
    }

    pub fn start(self) -> usize {
        match self {
            Index::One(i) | Index::Range(i, _) => i,
        }
    }
}

impl fmt::Display for Index {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Index::One(i) => write!(f, "{i}"),
            Index::Range(lo, hi) => write!(f, "{lo}:{hi}"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinOp {
    Add,
    Sub,
    Mul,
    Div,
}

impl BinOp {
    pub fn symbol(self) -> &'static str {
        match self {
            BinOp::Add => "+",
            BinOp::Sub => "-",
            BinOp::Mul => "*",
            BinOp::Div => "/",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CmpOp {
    Lt,
    Gt,
}

impl CmpOp {
    pub fn symbol(self) -> &'static str {
        match self {
            CmpOp::Lt => "<",
            CmpOp::Gt => ">",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Func {
    Norm2,
    SqNorm,
    Mean,
    Sum,
    Abs,
    Clamp,
    Softplus,
    Heaviside,
    Interp,
    Mask,
    Wrap,
    MeanT,
    SumT,
}

impl Func {
    pub const ALL: [Func; 13] = [
        Func::Norm2,
        Func::SqNorm,
        Func::Mean,
        Func::Sum,
        Func::Abs,
        Func::Clamp,
        Func::Softplus,
        Func::Heaviside,
        Func::Interp,
        Func::Mask,
        Func::Wrap,
        Func::MeanT,
        Func::SumT,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Func::Norm2 => "norm2",
            Func::SqNorm => "sqnorm",
            Func::Mean => "mean",
            Func::Sum => "sum",
            Func::Abs => "abs",
            Func::Clamp => "clamp",
            Func::Softplus => "softplus",
            Func::Heaviside => "heaviside",
            Func::Interp => "interp",
            Func::Mask => "mask",
            Func::Wrap => "wrap",
            Func::MeanT => "mean_t",
            Func::SumT => "sum_t",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        Func::ALL.iter().copied().find(|f| f.name() == s)
    }

    pub fn arity(self) -> usize {
        match self {
            Func::Clamp | Func::Interp => 3,
            Func::Mask => 2,
            _ => 1,
        }
    }

    pub fn is_time_reduction(self) -> bool {
        matches!(self, Func::MeanT | Func::SumT)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum ExprKind {
    Num(f64),
    /// The reduction variable `t`.
    Time,
    /// The plan length `H`.
    Horizon,
    /// Component of the task goal.
    Goal(usize),
    Access {
        src: Source,
        time: TimeIdx,
        index: Index,
    },
    Neg(Box<Expr>),
    Bin(BinOp, Box<Expr>, Box<Expr>),
    Cmp(CmpOp, Box<Expr>, Box<Expr>),
    Call(Func, Vec<Expr>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Expr {
    pub kind: ExprKind,
    pub pos: Pos,
}

impl Expr {
    pub fn new(kind: ExprKind, pos: Pos) -> Self {
        Self { kind, pos }
    }

    pub fn num(v: f64) -> Self {
        Self::new(ExprKind::Num(v), Pos::default())
    }

    pub fn bin(op: BinOp, a: Expr, b: Expr) -> Self {
        Self::new(ExprKind::Bin(op, Box::new(a), Box::new(b)), Pos::default())
    }

    pub fn call(f: Func, args: Vec<Expr>) -> Self {
        Self::new(ExprKind::Call(f, args), Pos::default())
    }

    pub fn access(src: Source, time: TimeIdx, index: Index) -> Self {
        Self::new(ExprKind::Access { src, time, index }, Pos::default())
    }

    /// Visits every node in pre-order.
    pub fn walk(&self, f: &mut dyn FnMut(&Expr)) {
        f(self);
        match &self.kind {
            ExprKind::Neg(a) => a.walk(f),
            ExprKind::Bin(_, a, b) | ExprKind::Cmp(_, a, b) => {
                a.walk(f);
                b.walk(f);
            }
            ExprKind::Call(_, args) => args.iter().for_each(|a| a.walk(f)),
            _ => {}
        }
    }
}

/// Fully parenthesized rendering; parsing it back yields an equal AST.
impl fmt::Display for Expr {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.kind {
            ExprKind::Num(v) if *v < 0.0 || (*v == 0.0 && v.is_sign_negative()) => write!(f, "(-{})", -v),
            ExprKind::Num(v) => write!(f, "{v}"),
            ExprKind::Time => f.write_str("t"),
            ExprKind::Horizon => f.write_str("H"),
            ExprKind::Goal(i) => write!(f, "goal[{i}]"),
            ExprKind::Access { src, time, index } => write!(f, "{}[{time}, {index}]", src.as_str()),
            // A literal operand is wrapped so the parser does not fold the sign into it.
            ExprKind::Neg(a) => match a.kind {
                ExprKind::Num(_) => write!(f, "(-({a}))"),
                _ => write!(f, "(-{a})"),
            },
            ExprKind::Bin(op, a, b) => write!(f, "({a} {} {b})", op.symbol()),
            ExprKind::Cmp(op, a, b) => write!(f, "({a} {} {b})", op.symbol()),
            ExprKind::Call(func, args) => {
                write!(f, "{}(", func.name())?;
                for (i, a) in args.iter().enumerate() {
                    if i > 0 {
                        f.write_str(", ")?;
                    }
                    write!(f, "{a}")?;
                }
                f.write_str(")")
            }
        }
    }
}

/// One named energy `name (weight = w, phase = p): expr`.
#[derive(Clone, Debug, PartialEq)]
pub struct TermDef {
    pub name: String,
    pub weight: f64,
    pub phase: TermPhase,
    pub expr: Expr,
    pub pos: Pos,
}

impl fmt::Display for TermDef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} (weight = {}, phase = {}): {}", self.name, self.weight, self.phase.as_str(), self.expr)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Program {
    pub terms: Vec<TermDef>,
}

impl Program {
    pub fn term(&self, name: &str) -> Option<&TermDef> {
        self.terms.iter().find(|t| t.name == name)
    }
}

impl fmt::Display for Program {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for t in &self.terms {
            writeln!(f, "{t}")?;
        }
        Ok(())
    }
}
