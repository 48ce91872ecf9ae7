use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn larstream(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_larstream"))
        .args(args)
        .env("LARSTREAM_LOG", "error")
        .output()
        .expect("binary runs")
}

fn query(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../queries")
        .join(name)
        .display()
        .to_string()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, text).unwrap();
    p
}

/// Scripted rain and temperature observations, one every 250 ms.
fn scripted_stream() -> (String, Vec<(String, String, String, u64)>) {
    let mut rows = Vec::new();
    for i in 0..60u64 {
        let obs = format!("o{i}");
        let ts = 250 * (i + 1);
        let kind = if i % 3 == 0 { "rainObs" } else { "tempObs" };
        rows.push((obs.clone(), "procedure".to_string(), format!("s{}", i % 4), ts));
        // Every fifth type arrives one second late.
        let type_ts = if i % 5 == 0 { ts + 1000 } else { ts };
        rows.push((obs, "type".to_string(), kind.to_string(), type_ts));
    }
    rows.sort_by_key(|r| r.3);
    let mut text = String::new();
    for (s, p, o, ts) in &rows {
        writeln!(text, "{s}\t{p}\t{o}\t{ts}").unwrap();
    }
    (text, rows)
}

/// Sink lines of the rain query: every 2 s, observations whose procedure and
/// rain type both lie in the last 10 s.
fn rain_oracle(rows: &[(String, String, String, u64)]) -> BTreeSet<String> {
    let last = rows.iter().map(|r| r.3).max().unwrap();
    let mut out = BTreeSet::new();
    let mut t = 2000;
    loop {
        let inside = |r: &&(String, String, String, u64)| r.3 <= t && r.3 + 10_000 > t;
        for (obs, _, sen, _) in rows.iter().filter(inside).filter(|r| r.1 == "procedure") {
            if rows
                .iter()
                .filter(inside)
                .any(|r| r.0 == *obs && r.1 == "type" && r.2 == "rainObs")
            {
                out.insert(format!("{t}\tresIRI\t{obs}\t{sen}"));
            }
        }
        if t >= last {
            return out;
        }
        t += 2000;
    }
}

fn lines(path: &Path) -> Vec<String> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(String::from)
        .collect()
}

#[test]
fn validate_bundled_program() {
    let o = larstream(&["validate", &query("sensor_rain.lars")]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).ends_with(": ok, 1 rules\n"));
}

#[test]
fn validate_reports_unsafe_variable_with_position() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(dir.path(), "bad.lars", "ok(X) :- e(X).\np(X,Y) :- e(X).\n");
    let o = larstream(&["validate", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("bad.lars:2:1:"), "{err}");
    assert!(err.contains("unsafe-variable Y"), "{err}");
}

#[test]
fn validate_reports_syntax_errors() {
    let dir = tempfile::tempdir().unwrap();
    let p = write(dir.path(), "bad.lars", "p(X) :- q(X) [window 10x].\n");
    let o = larstream(&["validate", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("invalid duration `10x`"), "{}", stderr(&o));
}

#[test]
fn missing_program_is_an_io_error() {
    let o = larstream(&["validate", "/nonexistent/x.lars"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("cannot read /nonexistent/x.lars"));
}

#[test]
fn explain_listing_on_rat() {
    let o = larstream(&["explain", &query("sensor_rain.lars"), "--engine", "rat"]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    assert!(out.starts_with("plan target=rat\n"));
    assert!(out.contains("  n5 Join on (Obs) -> (Obs,Sen) <- n2, n4\n"), "{out}");
    assert!(out.ends_with("  n8 Sink resIRI <- n7\n"), "{out}");
}

#[test]
fn explain_recursion_on_rat_fails() {
    let o = larstream(&["explain", &query("tc_chain.lars"), "--engine", "rat"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("recursion unsupported on RAT: SCC #1 {reach} is recursive"));
}

#[test]
fn run_matches_oracle_on_both_engines() {
    let dir = tempfile::tempdir().unwrap();
    let (text, rows) = scripted_stream();
    let input = write(dir.path(), "in.tsv", &text);
    let expected = rain_oracle(&rows);
    assert!(!expected.is_empty());
    for (engine, p) in [("bsp", "1"), ("rat", "1"), ("rat", "3")] {
        let out = dir.path().join(format!("{engine}{p}.out"));
        let o = larstream(&[
            "run",
            &query("sensor_rain.lars"),
            "--engine",
            engine,
            "--parallelism",
            p,
            "--source",
            &format!("file:{}", input.display()),
            "--sink",
            &format!("file:{}", out.display()),
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        let got = lines(&out);
        assert_eq!(got.len(), expected.len(), "{engine}: duplicate or missing lines");
        assert_eq!(got.into_iter().collect::<BTreeSet<_>>(), expected, "{engine} p={p}");
        let metrics: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
        assert_eq!(metrics["engine"], engine);
        assert_eq!(metrics["total_records_in"], rows.len());
        assert_eq!(metrics["total_facts_out"], expected.len());
    }
}

#[test]
fn stateless_run_to_stdout() {
    let dir = tempfile::tempdir().unwrap();
    let (text, rows) = scripted_stream();
    let input = write(dir.path(), "in.tsv", &text);
    let o = larstream(&[
        "run",
        &query("stateless_rain.lars"),
        "--engine",
        "rat",
        "--source",
        &format!("file:{}", input.display()),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let expected: Vec<String> = rows
        .iter()
        .filter(|r| r.1 == "type" && r.2 == "rainObs")
        .map(|r| format!("{}\train\t{}", r.3, r.0))
        .collect();
    let got: Vec<String> = stdout(&o).lines().map(String::from).collect();
    assert_eq!(got, expected);
    assert!(stderr(&o).contains("\"engine\":\"rat\""));
}

#[test]
fn empty_input_gives_empty_sink() {
    let dir = tempfile::tempdir().unwrap();
    let input = write(dir.path(), "empty.tsv", "");
    for engine in ["bsp", "rat"] {
        let out = dir.path().join(format!("{engine}.out"));
        let o = larstream(&[
            "run",
            &query("sensor_rain.lars"),
            "--engine",
            engine,
            "--source",
            &format!("file:{}", input.display()),
            "--sink",
            &format!("file:{}", out.display()),
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        assert_eq!(std::fs::read(&out).unwrap(), b"");
    }
}

#[test]
fn run_errors_map_to_exit_codes() {
    let prog = query("sensor_rain.lars");
    let o = larstream(&["run", &prog, "--source", "file:/nonexistent/in.tsv", "--sink", "mem"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    let o = larstream(&["run", &prog, "--source", "ftp:x"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    let o = larstream(&[
        "run",
        &query("tc_chain.lars"),
        "--engine",
        "rat",
        "--source",
        "gen:chain",
    ]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    let o = larstream(&[
        "run",
        &prog,
        "--source",
        "gen:sensor",
        "--batch-interval-ms",
        "0",
        "--sink",
        "mem",
    ]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn generated_source_is_seeded() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.tsv");
    let b = dir.path().join("b.tsv");
    for (path, seed) in [(&a, "5"), (&b, "5")] {
        let o = larstream(&["generate", "sensor,n=50", "--seed", seed, "-o", path.to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    }
    assert_eq!(lines(&a).len(), 150);
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());

    let hash_of = |source: &str| {
        let o = larstream(&[
            "run",
            &query("sensor_temp.lars"),
            "--source",
            source,
            "--sink",
            "mem",
            "--seed",
            "5",
        ]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        let m: serde_json::Value = serde_json::from_str(stdout(&o).trim()).unwrap();
        m["result_hash"].as_str().unwrap().to_string()
    };
    assert_eq!(hash_of("gen:sensor,n=50"), hash_of(&format!("file:{}", a.display())));
}

#[test]
fn bench_writes_reports() {
    let dir = tempfile::tempdir().unwrap();
    let suite = format!(
        r#"name = "tiny"
repetitions = 2

[[query]]
name = "rain"
program = "{}"
group = 1
engines = ["bsp", "rat"]
source = "gen:sensor,n=500"

[[query]]
name = "select"
program = "{}"
group = 2
engines = ["bsp", "rat"]
source = "gen:sensor,n=500"
batch_interval_ms = 100
"#,
        query("sensor_rain.lars"),
        query("stateless_rain.lars")
    );
    let suite_path = write(dir.path(), "tiny.toml", &suite);
    let out_dir = dir.path().join("out");
    let o = larstream(&[
        "bench",
        suite_path.to_str().unwrap(),
        "--out-dir",
        out_dir.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let table = stdout(&o);
    assert!(table.starts_with("query"), "{table}");
    assert_eq!(table.lines().count(), 5);
    let runs = lines(&out_dir.join("metrics.jsonl"));
    assert_eq!(runs.len(), 8);
    let mut hashes = std::collections::BTreeMap::<String, BTreeSet<String>>::new();
    for r in &runs {
        let m: serde_json::Value = serde_json::from_str(r).unwrap();
        hashes
            .entry(m["query"].as_str().unwrap().to_string())
            .or_default()
            .insert(m["result_hash"].as_str().unwrap().to_string());
    }
    assert!(hashes.values().all(|h| h.len() == 1), "{hashes:?}");
    assert_eq!(lines(&out_dir.join("report.csv")).len(), 5);
    assert_eq!(std::fs::read_to_string(out_dir.join("report.txt")).unwrap(), table);

    let o = larstream(&["bench", "/nonexistent/suite.toml"]);
    assert_eq!(o.status.code(), Some(2));
}
