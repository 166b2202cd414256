//! The pipeline language: program documents, expressions, prompt templates
//! and static validation.

pub mod expr;
pub mod program;
pub mod template;
pub mod validate;

pub use expr::{EvalCode, EvalError, Expr, Scope, Value};
pub use program::{parse_program, BatchMode, BufferDecl, FlushTrigger, Node, NodeKind, Program};
pub use template::PromptTemplate;
pub use validate::{analyze, node_order, validate_program, StreamShape};
