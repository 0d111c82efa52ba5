use std::collections::HashSet;

use super::ast::*;
use super::error::{DslError, Pos};
use super::lexer::{lex, Tok, Token};
use crate::envs::EnvSpec;
use crate::guidance::TermPhase;

/// Published grammar, also embedded in generation prompts.
pub const GRAMMAR: &str = r#"program  = { term [ ";" ] } ;
term     = ident [ "(" option { "," option } ")" ] ":" expr ;
option   = "weight" "=" number | "phase" "=" ( "pre" | "post" | "both" ) ;
expr     = additive [ ( "<" | ">" ) additive ] ;      (* comparisons only as mask's first argument *)
additive = product { ( "+" | "-" ) product } ;
product  = unary { ( "*" | "/" ) unary } ;
unary    = "-" unary | primary ;
primary  = number | "t" | "H" | "goal" "[" int "]"
         | source "[" time "," index "]"
         | func "(" expr { "," expr } ")"
         | "(" expr ")" ;
source   = "obs" | "act" | "nobs" | "nact" | "npred" ;
time     = "t" [ ( "+" | "-" ) int ] | int | "H" "-" int ;
index    = int [ ":" int ] ;                          (* lo:hi is half-open *)
func     = "norm2" | "sqnorm" | "mean" | "sum" | "abs" | "clamp" | "softplus"
         | "heaviside" | "interp" | "mask" | "wrap" | "mean_t" | "sum_t" ;"#;

/// Dimensions the semantic pass checks indices against.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DslContext {
    pub obs_dim: usize,
    pub act_dim: usize,
    pub goal_dim: usize,
}

impl DslContext {
    pub fn for_env(spec: &EnvSpec) -> Self {
        Self {
            obs_dim: spec.obs_dim,
            act_dim: spec.act_dim,
            goal_dim: spec.goal_idx.len(),
        }
    }
}

/// Syntax only; see [`compile`] for the checked form.
pub fn parse(src: &str) -> Result<Program, DslError> {
    let toks = lex(src)?;
    let mut p = Parser { toks, at: 0 };
    let prog = p.program()?;
    Ok(prog)
}

/// Parse followed by the semantic pass.
pub fn compile(src: &str, ctx: &DslContext) -> Result<Program, DslError> {
    let prog = parse(src)?;
    check(&prog, ctx)?;
    Ok(prog)
}

struct Parser {
    toks: Vec<Token>,
    at: usize,
}

impl Parser {
    fn peek(&self) -> &Token {
        &self.toks[self.at]
    }

    fn peek2(&self) -> &Tok {
        &self.toks[(self.at + 1).min(self.toks.len() - 1)].tok
    }

    fn bump(&mut self) -> Token {
        let t = self.toks[self.at].clone();
        if self.at + 1 < self.toks.len() {
            self.at += 1;
        }
        t
    }

    fn fail<T>(&self, expected: &[&str]) -> Result<T, DslError> {
        let t = self.peek();
        Err(DslError::Parse {
            pos: t.pos,
            expected: expected.iter().map(|s| s.to_string()).collect(),
            found: t.tok.describe(),
        })
    }

    fn expect(&mut self, tok: Tok) -> Result<Token, DslError> {
        if self.peek().tok == tok {
            Ok(self.bump())
        } else {
            self.fail(&[&format!("`{}`", tok.symbol())])
        }
    }

    fn eat(&mut self, tok: &Tok) -> bool {
        if &self.peek().tok == tok {
            self.bump();
            true
        } else {
            false
        }
    }

    fn program(&mut self) -> Result<Program, DslError> {
        let mut terms = Vec::new();
        while self.peek().tok != Tok::Eof {
            terms.push(self.term()?);
            while self.eat(&Tok::Semi) {}
        }
        Ok(Program { terms })
    }

    fn term(&mut self) -> Result<TermDef, DslError> {
        let pos = self.peek().pos;
        let name = match &self.peek().tok {
            Tok::Ident(s) => s.clone(),
            _ => return self.fail(&["term name"]),
        };
        self.bump();
        let (mut weight, mut phase) = (1.0, TermPhase::Both);
        if self.eat(&Tok::LParen) {
            loop {
                let key_pos = self.peek().pos;
                let key = match &self.peek().tok {
                    Tok::Ident(s) if s == "weight" || s == "phase" => s.clone(),
                    _ => return self.fail(&["`weight`", "`phase`"]),
                };
                self.bump();
                self.expect(Tok::Eq)?;
                if key == "weight" {
                    let neg = self.eat(&Tok::Minus);
                    match self.peek().tok.clone() {
                        Tok::Num(v, _) => {
                            self.bump();
                            weight = if neg { -v } else { v };
                        }
                        _ => return self.fail(&["number"]),
                    }
                    if weight < 0.0 {
                        return Err(DslError::Type {
                            pos: key_pos,
                            message: format!("term weight must be non-negative, got {weight}"),
                        });
                    }
                } else {
                    match &self.peek().tok {
                        Tok::Ident(s) => match s.parse::<TermPhase>() {
                            Ok(p) => {
                                phase = p;
                                self.bump();
                            }
                            Err(_) => return self.fail(&["`pre`", "`post`", "`both`"]),
                        },
                        _ => return self.fail(&["`pre`", "`post`", "`both`"]),
                    }
                }
                if self.eat(&Tok::Comma) {
                    continue;
                }
                self.expect(Tok::RParen)?;
                break;
            }
        }
        self.expect(Tok::Colon)?;
        let expr = self.expr()?;
        Ok(TermDef {
            name,
            weight,
            phase,
            expr,
            pos,
        })
    }

    fn expr(&mut self) -> Result<Expr, DslError> {
        let lhs = self.additive()?;
        let op = match self.peek().tok {
            Tok::Lt => CmpOp::Lt,
            Tok::Gt => CmpOp::Gt,
            _ => return Ok(lhs),
        };
        let pos = self.bump().pos;
        let rhs = self.additive()?;
        Ok(Expr::new(ExprKind::Cmp(op, Box::new(lhs), Box::new(rhs)), pos))
    }

    fn additive(&mut self) -> Result<Expr, DslError> {
        let mut lhs = self.product()?;
        loop {
            let op = match self.peek().tok {
                Tok::Plus => BinOp::Add,
                Tok::Minus => BinOp::Sub,
                _ => return Ok(lhs),
            };
            let pos = self.bump().pos;
            let rhs = self.product()?;
            lhs = Expr::new(ExprKind::Bin(op, Box::new(lhs), Box::new(rhs)), pos);
        }
    }

    fn product(&mut self) -> Result<Expr, DslError> {
        let mut lhs = self.unary()?;
        loop {
            let op = match self.peek().tok {
                Tok::Star => BinOp::Mul,
                Tok::Slash => BinOp::Div,
                _ => return Ok(lhs),
            };
            let pos = self.bump().pos;
            let rhs = self.unary()?;
            lhs = Expr::new(ExprKind::Bin(op, Box::new(lhs), Box::new(rhs)), pos);
        }
    }

    fn unary(&mut self) -> Result<Expr, DslError> {
        if self.peek().tok != Tok::Minus {
            return self.primary();
        }
        let pos = self.bump().pos;
        // A minus sign directly before a literal folds into the literal.
        if let Tok::Num(v, _) = self.peek().tok {
            self.bump();
            return Ok(Expr::new(ExprKind::Num(-v), pos));
        }
        let inner = self.unary()?;
        Ok(Expr::new(ExprKind::Neg(Box::new(inner)), pos))
    }

    fn int(&mut self) -> Result<i64, DslError> {
        match self.peek().tok.clone() {
            Tok::Num(v, s) if !s.contains(['.', 'e', 'E']) && v < 1e15 => {
                self.bump();
                Ok(v as i64)
            }
            _ => self.fail(&["integer"]),
        }
    }

    fn primary(&mut self) -> Result<Expr, DslError> {
        let Token { tok, pos } = self.peek().clone();
        match tok {
            Tok::Num(v, _) => {
                self.bump();
                Ok(Expr::new(ExprKind::Num(v), pos))
            }
            Tok::LParen => {
                self.bump();
                let e = self.expr()?;
                self.expect(Tok::RParen)?;
                Ok(e)
            }
            Tok::Ident(name) => {
                if let Some(src) = Source::from_ident(&name) {
                    if self.peek2() == &Tok::LBracket {
                        self.bump();
                        return self.access(src, pos);
                    }
                }
                if let Some(func) = Func::from_name(&name) {
                    if self.peek2() == &Tok::LParen {
                        self.bump();
                        return self.call(func, pos);
                    }
                }
                match name.as_str() {
                    "t" => {
                        self.bump();
                        Ok(Expr::new(ExprKind::Time, pos))
                    }
                    "H" => {
                        self.bump();
                        Ok(Expr::new(ExprKind::Horizon, pos))
                    }
                    "goal" => {
                        self.bump();
                        self.expect(Tok::LBracket)?;
                        let i = self.int()?;
                        self.expect(Tok::RBracket)?;
                        Ok(Expr::new(ExprKind::Goal(i as usize), pos))
                    }
                    _ => Err(DslError::Parse {
                        pos,
                        expected: vec![
                            "number".into(),
                            "source access".into(),
                            "function call".into(),
                            "`t`".into(),
                            "`H`".into(),
                            "`goal`".into(),
                            "`(`".into(),
                        ],
                        found: tok_describe_ident(&name),
                    }),
                }
            }
            _ => self.fail(&["expression"]),
        }
    }

    fn access(&mut self, src: Source, pos: Pos) -> Result<Expr, DslError> {
        self.expect(Tok::LBracket)?;
        let time = self.time()?;
        self.expect(Tok::Comma)?;
        let lo = self.int()?;
        let index = if self.eat(&Tok::Colon) {
            let hi = self.int()?;
            Index::Range(lo as usize, hi as usize)
        } else {
            Index::One(lo as usize)
        };
        self.expect(Tok::RBracket)?;
        Ok(Expr::new(ExprKind::Access { src, time, index }, pos))
    }

    fn time(&mut self) -> Result<TimeIdx, DslError> {
        match self.peek().tok.clone() {
            Tok::Ident(s) if s == "t" => {
                self.bump();
                if self.eat(&Tok::Plus) {
                    Ok(TimeIdx::Rel(self.int()?))
                } else if self.eat(&Tok::Minus) {
                    Ok(TimeIdx::Rel(-self.int()?))
                } else {
                    Ok(TimeIdx::Rel(0))
                }
            }
            Tok::Ident(s) if s == "H" => {
                self.bump();
                self.expect(Tok::Minus)?;
                Ok(TimeIdx::FromEnd(self.int()?))
            }
            Tok::Num(..) => Ok(TimeIdx::Abs(self.int()?)),
            _ => self.fail(&["`t`", "`H`", "integer"]),
        }
    }

    fn call(&mut self, func: Func, pos: Pos) -> Result<Expr, DslError> {
        self.expect(Tok::LParen)?;
        let mut args = vec![self.expr()?];
        while self.eat(&Tok::Comma) {
            args.push(self.expr()?);
        }
        self.expect(Tok::RParen)?;
        Ok(Expr::new(ExprKind::Call(func, args), pos))
    }
}

fn tok_describe_ident(name: &str) -> String {
    format!("identifier `{name}`")
}

/// Value shape inferred by the semantic pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Scalar,
    Vector(usize),
    Bool,
}

impl Shape {
    fn len(self) -> usize {
        match self {
            Shape::Vector(n) => n,
            _ => 1,
        }
    }
}

/// Semantic pass: indices in range, shapes consistent, `t` bound, names unique.
pub fn check(prog: &Program, ctx: &DslContext) -> Result<(), DslError> {
    let mut seen = HashSet::new();
    for term in &prog.terms {
        if !seen.insert(term.name.as_str()) {
            return Err(DslError::Type {
                pos: term.pos,
                message: format!("duplicate term name `{}`", term.name),
            });
        }
        let shape = shape_of(&term.expr, ctx, false)?;
        if shape != Shape::Scalar {
            return Err(DslError::Type {
                pos: term.expr.pos,
                message: format!("term `{}` must be a scalar, got {}", term.name, shape_name(shape)),
            });
        }
    }
    Ok(())
}

fn shape_name(s: Shape) -> String {
    match s {
        Shape::Scalar => "a scalar".into(),
        Shape::Vector(n) => format!("a vector of length {n}"),
        Shape::Bool => "a comparison".into(),
    }
}

fn type_err<T>(pos: Pos, message: impl Into<String>) -> Result<T, DslError> {
    Err(DslError::Type { pos, message: message.into() })
}

fn numeric(e: &Expr, ctx: &DslContext, in_t: bool) -> Result<Shape, DslError> {
    let s = shape_of(e, ctx, in_t)?;
    if s == Shape::Bool {
        return type_err(e.pos, "comparison used as a value; comparisons are only allowed as mask's first argument");
    }
    Ok(s)
}

fn scalar(e: &Expr, ctx: &DslContext, in_t: bool, what: &str) -> Result<(), DslError> {
    match numeric(e, ctx, in_t)? {
        Shape::Scalar => Ok(()),
        other => type_err(e.pos, format!("{what} must be a scalar, got {}", shape_name(other))),
    }
}

fn broadcast(a: Shape, b: Shape, pos: Pos) -> Result<Shape, DslError> {
    match (a, b) {
        (Shape::Scalar, s) | (s, Shape::Scalar) => Ok(s),
        (Shape::Vector(n), Shape::Vector(m)) if n == m => Ok(a),
        _ => type_err(pos, format!("length mismatch: {} vs {}", a.len(), b.len())),
    }
}

fn shape_of(e: &Expr, ctx: &DslContext, in_t: bool) -> Result<Shape, DslError> {
    match &e.kind {
        ExprKind::Num(_) | ExprKind::Horizon => Ok(Shape::Scalar),
        ExprKind::Time => {
            if !in_t {
                return type_err(e.pos, "`t` used outside mean_t/sum_t");
            }
            Ok(Shape::Scalar)
        }
        ExprKind::Goal(i) => {
            if *i >= ctx.goal_dim {
                return Err(DslError::IndexOutOfRange {
                    pos: e.pos,
                    source_name: "goal",
                    index: *i as i64,
                    dim: ctx.goal_dim,
                });
            }
            Ok(Shape::Scalar)
        }
        ExprKind::Access { src, time, index } => {
            if time.uses_t() && !in_t {
                return type_err(e.pos, "`t` used outside mean_t/sum_t");
            }
            if let TimeIdx::Abs(k) | TimeIdx::FromEnd(k) = time {
                if *k < 0 {
                    return type_err(e.pos, "time offsets must be non-negative");
                }
            }
            let dim = if src.reads_actions() { ctx.act_dim } else { ctx.obs_dim };
            let (lo, hi) = match *index {
                Index::One(i) => (i, i + 1),
                Index::Range(lo, hi) => (lo, hi),
            };
            if lo >= hi {
                return type_err(e.pos, format!("empty index range {lo}:{hi}"));
            }
            if hi > dim {
                return Err(DslError::IndexOutOfRange {
                    pos: e.pos,
                    source_name: src.as_str(),
                    index: hi as i64 - 1,
                    dim,
                });
            }
            Ok(match index {
                Index::One(_) => Shape::Scalar,
                Index::Range(..) => Shape::Vector(hi - lo),
            })
        }
        ExprKind::Neg(a) => numeric(a, ctx, in_t),
        ExprKind::Bin(_, a, b) => {
            let (sa, sb) = (numeric(a, ctx, in_t)?, numeric(b, ctx, in_t)?);
            broadcast(sa, sb, e.pos)
        }
        ExprKind::Cmp(_, a, b) => {
            scalar(a, ctx, in_t, "comparison operand")?;
            scalar(b, ctx, in_t, "comparison operand")?;
            Ok(Shape::Bool)
        }
        ExprKind::Call(f, args) => {
            if args.len() != f.arity() {
                return type_err(e.pos, format!("{} takes {} argument(s), got {}", f.name(), f.arity(), args.len()));
            }
            match f {
                Func::Norm2 | Func::SqNorm | Func::Mean | Func::Sum => {
                    numeric(&args[0], ctx, in_t)?;
                    Ok(Shape::Scalar)
                }
                Func::Abs | Func::Softplus | Func::Heaviside | Func::Wrap => numeric(&args[0], ctx, in_t),
                Func::Clamp => {
                    let s = numeric(&args[0], ctx, in_t)?;
                    scalar(&args[1], ctx, in_t, "clamp bound")?;
                    scalar(&args[2], ctx, in_t, "clamp bound")?;
                    Ok(s)
                }
                Func::Interp => {
                    let s = broadcast(numeric(&args[0], ctx, in_t)?, numeric(&args[1], ctx, in_t)?, e.pos)?;
                    scalar(&args[2], ctx, in_t, "interp fraction")?;
                    Ok(s)
                }
                Func::Mask => {
                    if shape_of(&args[0], ctx, in_t)? != Shape::Bool {
                        return type_err(args[0].pos, "mask condition must be a comparison `a < b` or `a > b`");
                    }
                    numeric(&args[1], ctx, in_t)
                }
                Func::MeanT | Func::SumT => {
                    if in_t {
                        return type_err(e.pos, "time reductions cannot be nested");
                    }
                    scalar(&args[0], ctx, true, "time-reduction body")?;
                    Ok(Shape::Scalar)
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const DOOR: DslContext = DslContext {
        obs_dim: 5,
        act_dim: 2,
        goal_dim: 1,
    };

    #[test]
    fn smoke_single_term() {
        let p = compile("goal: mean_t(norm2(obs[t, 3:4] - 1.5708))", &DOOR).unwrap();
        assert_eq!(p.terms.len(), 1);
        assert_eq!(p.terms[0].name, "goal");
        assert_eq!(p.terms[0].weight, 1.0);
        assert_eq!(p.terms[0].phase, TermPhase::Both);
    }

    #[test]
    fn options_and_precedence() {
        let p = parse("g (weight = 30, phase = post): 1 + 2 * 3 - -4").unwrap();
        let t = &p.terms[0];
        assert_eq!((t.weight, t.phase), (30.0, TermPhase::Post));
        assert_eq!(t.expr.to_string(), "((1 + (2 * 3)) - (-4))");
    }

    #[test]
    fn negative_literal_folds() {
        let p = parse("a: -2.5").unwrap();
        assert_eq!(p.terms[0].expr.kind, ExprKind::Num(-2.5));
        let p = parse("a: -(2.5)").unwrap();
        assert!(matches!(p.terms[0].expr.kind, ExprKind::Neg(_)));
    }

    #[test]
    fn unbalanced_paren_column() {
        let err = parse("a: (1 + 2").unwrap_err();
        match err {
            DslError::Parse { pos, expected, found } => {
                assert_eq!((pos.line, pos.col), (1, 10));
                assert_eq!(expected, vec!["`)`".to_string()]);
                assert_eq!(found, "end of input");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn index_out_of_range_names_index() {
        let err = compile("a: obs[0, 99]", &DOOR).unwrap_err();
        assert!(matches!(
            err,
            DslError::IndexOutOfRange {
                index: 99,
                dim: 5,
                source_name: "obs",
                ..
            }
        ));
        assert!(err.to_string().contains("99"));
        assert!(compile("a: act[0, 2]", &DOOR).is_err());
        assert!(compile("a: goal[1]", &DOOR).is_err());
    }

    #[test]
    fn type_errors() {
        for src in [
            "a: obs[t, 0]",
            "a: obs[0, 0:2]",
            "a: 1 < 2",
            "a: mask(1, 2)",
            "a: obs[0, 0:2] + obs[0, 0:3]",
            "a: mean_t(mean_t(obs[t, 0]))",
            "a: clamp(1, 2)",
            "a: 1; a: 2",
            "a: obs[0, 2:2]",
        ] {
            assert!(matches!(compile(src, &DOOR), Err(DslError::Type { .. })), "{src}");
        }
    }

    #[test]
    fn time_forms() {
        let p = compile("a: sum_t(obs[t+1, 0] - obs[t-2, 0] + obs[3, 0] * obs[H-1, 0])", &DOOR).unwrap();
        let mut times = Vec::new();
        p.terms[0].expr.walk(&mut |e| {
            if let ExprKind::Access { time, .. } = e.kind {
                times.push(time);
            }
        });
        assert_eq!(times, vec![TimeIdx::Rel(1), TimeIdx::Rel(-2), TimeIdx::Abs(3), TimeIdx::FromEnd(1)]);
    }

    #[test]
    fn multiple_terms_with_comments_and_separators() {
        let src = "# header\nalign (weight = 12, phase = pre): mean_t(sqnorm(obs[t, 0] - obs[t, 4]));\n\ngoal (phase = post): sqnorm(obs[H-1, 3] - goal[0])\n";
        let p = compile(src, &DOOR).unwrap();
        assert_eq!(p.terms.len(), 2);
        assert_eq!(p.terms[1].pos.line, 4);
    }

    #[test]
    fn bad_option() {
        assert!(matches!(parse("a (phase = later): 1"), Err(DslError::Parse { .. })));
        assert!(matches!(parse("a (weight = -1): 1"), Err(DslError::Type { .. })));
        assert!(matches!(parse("a (size = 1): 1"), Err(DslError::Parse { .. })));
    }

    #[test]
    fn print_parse_fixed_point() {
        let src = "k (weight = 2.5, phase = pre): mean_t(mask(obs[t, 0] < 0.5, softplus(-(obs[t, 1])) / H)) + clamp(goal[0], -1, 1) + sum(interp(nobs[0, 0:2], nact[H-1, 0:2], 0.3) * -(2))";
        let p = compile(src, &DOOR).unwrap();
        let printed = p.to_string();
        let q = compile(&printed, &DOOR).unwrap();
        assert_eq!(p, q);
        assert_eq!(printed, q.to_string());
    }
}
