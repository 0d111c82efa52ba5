use std::fmt;

/// 1-based source position.
#[derive(Clone, Copy, Debug, Default, Eq)]
pub struct Pos {
    pub line: u32,
    pub col: u32,
}

/// Positions are diagnostics only and never distinguish two ASTs.
impl PartialEq for Pos {
    fn eq(&self, _: &Pos) -> bool {
        true
    }
}

impl Pos {
    pub fn new(line: u32, col: u32) -> Self {
        Self { line, col }
    }
}

impl fmt::Display for Pos {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.line, self.col)
    }
}

#[derive(Clone, Debug, PartialEq, thiserror::Error)]
pub enum DslError {
    #[error("{pos}: lex error: {message}")]
    Lex { pos: Pos, message: String },

    #[error("{pos}: parse error: expected {}, found {found}", expected.join(" | "))]
    Parse { pos: Pos, expected: Vec<String>, found: String },

    #[error("{pos}: {source_name} index {index} out of range (dimension {dim})")]
    IndexOutOfRange {
        pos: Pos,
        source_name: &'static str,
        index: i64,
        dim: usize,
    },

    #[error("{pos}: type error: {message}")]
    Type { pos: Pos, message: String },

    #[error("{pos}: evaluation error: {message}")]
    Eval { pos: Pos, message: String },
}

impl DslError {
    pub fn pos(&self) -> Pos {
        match self {
            DslError::Lex { pos, .. }
            | DslError::Parse { pos, .. }
            | DslError::IndexOutOfRange { pos, .. }
            | DslError::Type { pos, .. }
            | DslError::Eval { pos, .. } => *pos,
        }
    }
}
