//! Guidance-energy expression language and the LLM generation pipeline.

pub mod ast;
mod error;
pub mod eval;
mod lexer;
pub mod llm;
pub mod parser;
pub mod prompt;
pub mod term;

pub use ast::{Expr, ExprKind, Program, Source, TermDef, TimeIdx};
pub use error::{DslError, Pos};
pub use eval::{EvalInput, Grads};
pub use llm::{generate_guidance, FixtureClient, GenerateOptions, Generated, HttpClient, LlmClient, Message, Probe, Role};
pub use parser::{compile, parse, DslContext, GRAMMAR};
pub use prompt::{render_prompt, PromptBundle};
pub use term::{builtin_source, calibrate_first_term, program_terms, DslTerm, FIRST_TERM_TARGET};
