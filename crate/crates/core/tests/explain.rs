mod common;

use common::read_query;
use larstream::{explain, parse_program, CompileError, OperatorPlan, Target};

fn explained(query: &str, target: Target) -> Result<String, CompileError> {
    OperatorPlan::build(&parse_program(&read_query(query)).unwrap(), target).map(|p| explain(&p))
}

const RAIN_OPERATORS: &str = "\
operators:
  n0 Source procedure
  n1 Source type
  n2 Window 10000ms slide 2000ms <- n0
  n3 Select type[#1=rainObs] -> (Obs) <- n1
  n4 Window 10000ms slide 2000ms <- n3
  n5 Join on (Obs) -> (Obs,Sen) <- n2, n4
  n6 Project resIRI(Obs,Sen) rule 0 <- n5
  n7 Distinct resIRI <- n6
  n8 Sink resIRI <- n7
";

#[test]
fn listing_query_on_rat() {
    let expected = format!(
        "\
plan target=rat
components:
  #0 group 0 {{procedure}}
  #1 group 0 {{type}}
  #2 group 1 {{resIRI}} rules [0]
predicates:
  procedure edb
  resIRI relation panes every 2000ms
  type edb
{RAIN_OPERATORS}"
    );
    assert_eq!(explained("sensor_rain.lars", Target::Rat).unwrap(), expected);
}

#[test]
fn engines_share_the_non_recursive_dag() {
    let bsp = explained("sensor_rain.lars", Target::Bsp).unwrap();
    let rat = explained("sensor_rain.lars", Target::Rat).unwrap();
    assert_eq!(bsp.replace("target=bsp", "target=rat"), rat);
}

#[test]
fn closure_on_bsp_is_a_fixpoint() {
    let expected = "\
plan target=bsp
components:
  #0 group 0 {edge}
  #1 group 1 {reach} recursive rules [0, 1]
predicates:
  edge edb
  reach relation panes every 5000ms
operators:
  n0 Source edge
  n1 Fixpoint scc #1 {reach} <- n0
      n0 Input edge
      n1 Window 10000ms slide 5000ms <- n0
      n2 Project reach(X,Y) rule 0 <- n1
      n3 Feedback reach
      n4 Window 10000ms slide 5000ms <- n0
      n5 Join on (Y) -> (X,Y,Z) <- n3, n4
      n6 Project reach(X,Z) rule 1 <- n5
      n7 Union reach <- n2, n6
      n8 Distinct reach <- n7
  n2 Extract reach <- n1
  n3 Sink reach <- n2
";
    assert_eq!(explained("tc_chain.lars", Target::Bsp).unwrap(), expected);
}

#[test]
fn closure_on_rat_names_the_scc() {
    let err = explained("tc_chain.lars", Target::Rat).unwrap_err();
    assert_eq!(
        err.to_string(),
        "recursion unsupported on RAT: SCC #1 {reach} is recursive"
    );
}

#[test]
fn selection_is_a_stream() {
    let expected = "\
plan target=rat
components:
  #0 group 0 {type}
  #1 group 1 {rain} rules [0]
predicates:
  rain stream
  type edb
operators:
  n0 Source type
  n1 Select type[#1=rainObs] -> (Obs) <- n0
  n2 Project rain(Obs) rule 0 <- n1
  n3 Sink rain <- n2
";
    assert_eq!(explained("stateless_rain.lars", Target::Rat).unwrap(), expected);
}
