"""Smoke test for the larstream Python bindings.

Build the module first, e.g.:
    cargo build --release -p larstream-python --features extension-module
    cp target/release/liblarstream_py.so python/larstream_py.so
"""

import sys
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent))

import larstream_py as ls

LISTING = 'resIRI(Obs,Sen) :- procedure(Obs,Sen), type(Obs,"rainObs") [window 10s slide 2s].'
TC = """
reach(X,Y) :- edge(X,Y) [window 10s].
reach(X,Z) :- reach(X,Y), edge(Y,Z) [window 10s].
"""


def main():
    assert ls.validate(LISTING) == []
    assert ls.validate("p(X) :- q(Y.") != []

    prog = ls.parse(LISTING)
    assert len(prog) == 1
    assert "Join" in prog.explain("rat")
    assert ls.parse(prog.format()).format() == prog.format()

    facts = [("o1", "procedure", "s1", 1000), ("o1", "type", "rainObs", 3000)]
    for engine in ("bsp", "rat"):
        out = prog.run(facts, engine=engine, batch_interval_ms=1000)
        assert out.output == [(4000, "resIRI", ["o1", "s1"])], out.output
        assert out.records_in == 2

    tc = ls.parse(TC)
    edges = [("1", "edge", "2", 1000), ("2", "edge", "3", 2000)]
    out = tc.run(edges, engine="bsp", end_time_ms=10000)
    reach = {tuple(args) for t, p, args in out.output if t == 10000}
    assert reach == {("1", "2"), ("2", "3"), ("1", "3")}, reach
    try:
        tc.explain("rat")
    except ValueError as e:
        assert "recursion" in str(e)
    else:
        raise AssertionError("recursive program compiled for rat")

    rel = tc.evaluate({"edge": [["a", "b"], ["b", "c"]]})
    assert sorted(rel["reach"]) == [["a", "b"], ["a", "c"], ["b", "c"]]
    assert rel == tc.evaluate({"edge": [["a", "b"], ["b", "c"]]}, naive=True)

    gen = ls.generate("sensor,n=100", seed=7)
    assert len(gen) == 300
    assert gen == ls.generate("sensor,n=100", seed=7)

    win = ls.window(edges, 900, 2000)
    assert win == [("edge", ["2", "3"])]
    print("python smoke test: ok")


if __name__ == "__main__":
    main()
