use std::io::{self, Write};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::TripleRecord;

/// Seeded synthetic workloads. Record `i` is stamped `(i + 1) * step_ms`.
#[derive(Debug, Clone, PartialEq)]
pub enum Workload {
    /// `n` observations of three triples each: `type`, `procedure`, `value`.
    Sensor {
        n: usize,
        sensors: usize,
        seed: u64,
        step_ms: u64,
    },
    /// Random directed graph, each ordered pair an `edge` with probability `p`.
    Graph { n: usize, p: f64, seed: u64, step_ms: u64 },
    /// `chains` disjoint paths of `depth` edges, in shuffled order.
    Chain {
        depth: usize,
        chains: usize,
        seed: u64,
        step_ms: u64,
    },
}

pub const OBSERVATION_TYPES: [&str; 3] = ["rainObs", "tempObs", "windObs"];

impl Workload {
    pub fn name(&self) -> &'static str {
        match self {
            Workload::Sensor { .. } => "sensor",
            Workload::Graph { .. } => "graph",
            Workload::Chain { .. } => "chain",
        }
    }

    pub fn with_seed(mut self, new_seed: u64) -> Self {
        match &mut self {
            Workload::Sensor { seed, .. } | Workload::Graph { seed, .. } | Workload::Chain { seed, .. } => {
                *seed = new_seed
            }
        }
        self
    }
}

impl FromStr for Workload {
    type Err = String;

    /// `sensor[,n=N][,sensors=K]`, `graph[,n=N][,p=P]`, `chain[,depth=D][,chains=C]`,
    /// each with optional `seed=S` and `step=MS`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let mut parts = s.split(',');
        let kind = parts.next().unwrap_or_default();
        let mut kv = std::collections::BTreeMap::new();
        for p in parts {
            let (k, v) = p
                .split_once('=')
                .ok_or_else(|| format!("expected key=value, got `{p}`"))?;
            kv.insert(k.to_string(), v.to_string());
        }
        let mut take = |key: &str, default: &str| kv.remove(key).unwrap_or_else(|| default.to_string());
        fn num<T: FromStr>(key: &str, v: String) -> Result<T, String> {
            v.parse().map_err(|_| format!("invalid value `{v}` for {key}"))
        }
        let seed = num("seed", take("seed", "42"))?;
        let step_ms = num("step", take("step", "1"))?;
        let w = match kind {
            "sensor" => Workload::Sensor {
                n: num("n", take("n", "1000"))?,
                sensors: num("sensors", take("sensors", "10"))?,
                seed,
                step_ms,
            },
            "graph" => {
                let p: f64 = num("p", take("p", "0.05"))?;
                if !(0.0..=1.0).contains(&p) {
                    return Err(format!("p must be in [0, 1], got {p}"));
                }
                Workload::Graph {
                    n: num("n", take("n", "100"))?,
                    p,
                    seed,
                    step_ms,
                }
            }
            "chain" => Workload::Chain {
                depth: num("depth", take("depth", "10"))?,
                chains: num("chains", take("chains", "1"))?,
                seed,
                step_ms,
            },
            other => return Err(format!("unknown generator `{other}`")),
        };
        if let Some(k) = kv.keys().next() {
            return Err(format!("unknown generator option `{k}`"));
        }
        Ok(w)
    }
}

/// Deterministic for a given workload (including its seed).
pub fn generate(workload: &Workload) -> Vec<(TripleRecord, u64)> {
    match *workload {
        Workload::Sensor {
            n,
            sensors,
            seed,
            step_ms,
        } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let sensors = sensors.max(1);
            let mut out = Vec::with_capacity(n * 3);
            for i in 0..n {
                let ts = (i as u64 + 1) * step_ms;
                let obs = format!("obs{i}");
                let kind = OBSERVATION_TYPES[rng.gen_range(0..OBSERVATION_TYPES.len())];
                let sensor = format!("sensor{}", rng.gen_range(0..sensors));
                let value = rng.gen_range(0..100u32).to_string();
                out.push((TripleRecord::new(&obs, "type", kind), ts));
                out.push((TripleRecord::new(&obs, "procedure", &sensor), ts));
                out.push((TripleRecord::new(&obs, "value", &value), ts));
            }
            out
        }
        Workload::Graph { n, p, seed, step_ms } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut edges = Vec::new();
            for u in 0..n {
                for v in 0..n {
                    if u != v && rng.gen_bool(p) {
                        edges.push((u, v));
                    }
                }
            }
            edges.shuffle(&mut rng);
            stamp(
                edges.into_iter().map(|(u, v)| (format!("n{u}"), format!("n{v}"))),
                step_ms,
            )
        }
        Workload::Chain {
            depth,
            chains,
            seed,
            step_ms,
        } => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut edges: Vec<(usize, usize)> = (0..chains).flat_map(|c| (0..depth).map(move |d| (c, d))).collect();
            edges.shuffle(&mut rng);
            stamp(
                edges
                    .into_iter()
                    .map(|(c, d)| (format!("c{c}_{d}"), format!("c{c}_{}", d + 1))),
                step_ms,
            )
        }
    }
}

fn stamp(edges: impl Iterator<Item = (String, String)>, step_ms: u64) -> Vec<(TripleRecord, u64)> {
    edges
        .enumerate()
        .map(|(i, (u, v))| (TripleRecord::new(&u, "edge", &v), (i as u64 + 1) * step_ms))
        .collect()
}

pub fn write_tsv<W: Write>(mut w: W, records: &[(TripleRecord, u64)]) -> io::Result<()> {
    for (r, ts) in records {
        writeln!(w, "{r}\t{ts}")?;
    }
    w.flush()
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeSet;

    #[test]
    fn sensor_is_seeded() {
        let w: Workload = "sensor,n=50,seed=3".parse().unwrap();
        let a = generate(&w);
        assert_eq!(a.len(), 150);
        assert_eq!(a, generate(&w));
        let other = generate(&"sensor,n=50,seed=4".parse().unwrap());
        assert_ne!(a, other);
        assert_eq!(a[0].1, 1);
        assert!(a.windows(2).all(|p| p[0].1 <= p[1].1));
    }

    #[test]
    fn chain_has_depth_edges_per_chain() {
        let w = Workload::Chain {
            depth: 5,
            chains: 3,
            seed: 1,
            step_ms: 10,
        };
        let g = generate(&w);
        assert_eq!(g.len(), 15);
        assert_eq!(g.last().unwrap().1, 150);
        let distinct: BTreeSet<_> = g.iter().map(|(r, _)| r.clone()).collect();
        assert_eq!(distinct.len(), 15);
    }

    #[test]
    fn graph_extremes() {
        assert!(generate(&"graph,n=10,p=0".parse().unwrap()).is_empty());
        assert_eq!(generate(&"graph,n=10,p=1".parse().unwrap()).len(), 90);
        assert!("graph,p=2".parse::<Workload>().is_err());
        assert!("graph,bogus=1".parse::<Workload>().is_err());
        assert!("tree".parse::<Workload>().is_err());
    }

    #[test]
    fn tsv_round_trips() {
        let recs = generate(&"chain,depth=3".parse().unwrap());
        let mut buf = Vec::new();
        write_tsv(&mut buf, &recs).unwrap();
        let back: Vec<_> = String::from_utf8(buf)
            .unwrap()
            .lines()
            .map(|l| {
                let (r, ts) = super::super::parse_line(l).unwrap();
                (r, ts.unwrap())
            })
            .collect();
        assert_eq!(back, recs);
    }
}
