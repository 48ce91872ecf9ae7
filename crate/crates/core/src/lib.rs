//! Stream reasoning over the positive LARS fragment.
//!
//! A program is parsed ([`parser`]), analysed and compiled into an operator
//! plan ([`plan`]), and executed by one of two engines: micro-batch bulk
//! synchronous processing ([`bsp`]) or record-at-a-time dataflow ([`rat`]).
//! Both share the relational core in [`eval`].

pub mod bench;
pub mod bsp;
pub mod engine;
pub mod eval;
pub mod model;
pub mod parser;
pub mod plan;
pub mod rat;
pub mod store;
pub mod stream_io;

pub use bsp::{run_bsp, BatchConfig, BatchResult, ClockMode};
pub use engine::{start, EngineConfig, EngineError, RunHandle, RunReport};
pub use model::{Atom, Fact, GroundAtom, Program, Relation, Rule, Snapshot, Term, Tuple, Value, WindowSpec};
pub use parser::{format_program, parse_program, ParseError};
pub use plan::{compile, explain, CompileError, OperatorPlan, Target};
pub use rat::{run_rat, RatConfig, SinkMode};
pub use store::{window_contents, FactStore};
