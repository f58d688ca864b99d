//! Acceptance checks. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sparseful::compression::{
    compress, nonzero_macs, prune_count, prune_magnitude, quantize_tensor, serialized_size, CompressionKind,
    CompressionStrategy,
};
use sparseful::fields::{coordinate, g_block, stabilize_after_removal, Coordination, FieldGraph};
use sparseful::harness::{parse_config, render_metrics_csv, Experiment, ExperimentConfig, MetricsRecord};
use sparseful::neuralnet::{gradients, init_parameters, loss_and_accuracy, Architecture, LabeledDataset, ParameterSet};
use sparseful::protocol::Arm;

const SEEDS: [u64; 3] = [1, 2, 3];

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

// ---------------------------------------------------------------- 1

/// Pre-activations of every hidden unit for every sample.
fn hidden_preactivations(p: &ParameterSet, batch: &LabeledDataset) -> Vec<f64> {
    let mut out = Vec::new();
    for s in 0..batch.len() {
        let mut a = batch.sample(s).0.to_vec();
        for layer in &p.layers[..p.layers.len() - 1] {
            let z: Vec<f64> = (0..layer.rows())
                .map(|r| layer.bias[r] + (0..layer.cols()).map(|c| layer.weight(r, c) * a[c]).sum::<f64>())
                .collect();
            out.extend(&z);
            a = z.into_iter().map(|v| v.max(0.0)).collect();
        }
    }
    out
}

fn random_net(rng: &mut ChaCha8Rng) -> (ParameterSet, LabeledDataset) {
    loop {
        let mut sizes = vec![rng.random_range(2..7)];
        for _ in 0..rng.random_range(0..3) {
            sizes.push(rng.random_range(2..9));
        }
        sizes.push(rng.random_range(2..6));
        let arch = Architecture::new(sizes).unwrap();
        if arch.parameter_count() > 500 {
            continue;
        }
        let mut p = init_parameters(&arch, rng.random());
        for l in &mut p.layers {
            for b in &mut l.bias {
                *b = rng.random_range(-0.5..0.5);
            }
        }
        let n = rng.random_range(1..9);
        let dim = arch.input_dim();
        let features = (0..n * dim).map(|_| rng.random_range(0.0..1.0)).collect();
        let labels = (0..n).map(|_| rng.random_range(0..arch.num_classes())).collect();
        let batch = LabeledDataset::new(dim, features, labels).unwrap();
        // a step of h must not cross a ReLU kink
        if hidden_preactivations(&p, &batch).iter().all(|z| z.abs() >= 1e-3) {
            return (p, batch);
        }
    }
}

fn criterion_1() -> Outcome {
    let h = 1e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(0x6AD);
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    for _ in 0..50 {
        let (p, batch) = random_net(&mut rng);
        let g = gradients(&p, &batch).unwrap();
        let loss = |q: &ParameterSet| loss_and_accuracy(q, &batch).unwrap().0;
        for (li, layer) in p.layers.iter().enumerate() {
            for wi in 0..layer.weights.len() + layer.bias.len() {
                let mut plus = p.clone();
                let mut minus = p.clone();
                let (slot_p, slot_m, analytic) = if wi < layer.weights.len() {
                    (
                        &mut plus.layers[li].weights[wi],
                        &mut minus.layers[li].weights[wi],
                        g.layers[li].weights[wi],
                    )
                } else {
                    let bi = wi - layer.weights.len();
                    (
                        &mut plus.layers[li].bias[bi],
                        &mut minus.layers[li].bias[bi],
                        g.layers[li].bias[bi],
                    )
                };
                *slot_p += h;
                *slot_m -= h;
                let numeric = (loss(&plus) - loss(&minus)) / (2.0 * h);
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
                worst = worst.max(rel);
                checked += 1;
            }
        }
    }
    outcome(
        worst <= 1e-4,
        format!("{checked} partials over 50 nets, worst relative error {worst:.2e}"),
    )
}

// ---------------------------------------------------------------- 2

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x0A7);
    let mut worst_excess = f64::NEG_INFINITY;
    let mut fix_fail = 0usize;
    for t in 0..10_000 {
        let n = rng.random_range(1..65);
        let centre: f64 = rng.random_range(-3.0..3.0);
        let spread: f64 = 10f64.powf(rng.random_range(-4.0..1.0));
        let values: Vec<f64> = match t % 10 {
            // constant tensors
            0 => vec![centre; n],
            // one-signed tensors
            1 => (0..n).map(|_| rng.random_range(0.0..spread)).collect(),
            2 => (0..n).map(|_| -rng.random_range(0.0..spread)).collect(),
            _ => (0..n).map(|_| centre + rng.random_range(-spread..spread)).collect(),
        };
        let q = quantize_tensor(&values, n, 1, None);
        let back = q.dequantize();
        for (v, d) in values.iter().zip(&back) {
            worst_excess = worst_excess.max((v - d).abs() - (q.scale / 2.0 + 1e-9));
        }
        let requantized = quantize_tensor(&back, n, 1, None);
        let again = requantized.dequantize();
        if requantized.values != q.values
            || requantized.zero_point != q.zero_point
            || back
                .iter()
                .zip(&again)
                .any(|(a, b)| (a - b).abs() > 1e-9 * (1.0 + a.abs()))
        {
            fix_fail += 1;
        }
    }
    outcome(
        worst_excess <= 0.0 && fix_fail == 0,
        format!("10000 tensors, max(error - scale/2 - 1e-9) = {worst_excess:.2e}, {fix_fail} fixpoint violations"),
    )
}

// ---------------------------------------------------------------- 3

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5123);
    let mut archs: Vec<Vec<usize>> = vec![
        vec![784, 128, 47],
        vec![784, 512, 128, 47],
        vec![100, 100],
        vec![10_000, 1],
    ];
    while archs.len() < 40 {
        let depth = rng.random_range(1..6);
        let sizes: Vec<usize> = (0..=depth).map(|_| rng.random_range(2..400)).collect();
        if Architecture::new(sizes.clone()).unwrap().parameter_count() >= 10_000 {
            archs.push(sizes);
        }
    }
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for sizes in &archs {
        let p = init_parameters(&Architecture::new(sizes.clone()).unwrap(), 1);
        let dense = serialized_size(&compress(&p, &CompressionStrategy::dense()).unwrap()) as f64;
        let quant = serialized_size(
            &compress(&p, &CompressionStrategy::new(CompressionKind::Quantized, 0.0).unwrap()).unwrap(),
        ) as f64;
        lo = lo.min(quant / dense);
        hi = hi.max(quant / dense);
    }
    outcome(
        lo > 0.24 && hi < 0.27,
        format!("{} models, ratio in [{lo:.5}, {hi:.5}]", archs.len()),
    )
}

// ---------------------------------------------------------------- 4

fn criterion_4() -> Outcome {
    let p = init_parameters(&Architecture::new(vec![784, 128, 47]).unwrap(), 4);
    let dense_macs = nonzero_macs(&p);
    let mut problems = Vec::new();
    let mut summary = Vec::new();
    for psi in [0.3, 0.5, 0.7, 0.9] {
        let (pruned, _) = prune_magnitude(&p, psi).unwrap();
        let mut expected_total = 0u64;
        for (i, l) in pruned.layers.iter().enumerate() {
            let n = l.weights.len();
            let nz = l.weights.iter().filter(|w| **w != 0.0).count();
            let expected = n - prune_count(psi, n);
            if nz != expected {
                problems.push(format!("psi {psi} layer {i}: {nz} nonzero, expected {expected}"));
            }
            if ((1.0 - psi) * n as f64 - nz as f64).abs() > 1.0 {
                problems.push(format!(
                    "psi {psi} layer {i}: {nz} not within 1 of {}",
                    (1.0 - psi) * n as f64
                ));
            }
            expected_total += expected as u64;
        }
        let macs = nonzero_macs(&pruned);
        let sq = compress(
            &p,
            &CompressionStrategy::new(CompressionKind::SparseQuantized, psi).unwrap(),
        )
        .unwrap();
        if macs != expected_total || sparseful::compression::nonzero_macs_compressed(&sq) != expected_total {
            problems.push(format!("psi {psi}: macs {macs}, expected {expected_total}"));
        }
        summary.push(format!("{psi}:{:.3}", macs as f64 / dense_macs as f64));
    }
    outcome(
        problems.is_empty(),
        if problems.is_empty() {
            format!("[784,128,47], mac fraction by psi {}", summary.join(" "))
        } else {
            problems.join("; ")
        },
    )
}

// ---------------------------------------------------------------- fixture

fn fixture(seed: u64, psi: f64) -> ExperimentConfig {
    let mut cfg = parse_config("[environment]\nradius = 2.0\n[protocol]\nrounds = 30\n").unwrap();
    cfg.environment.seed = seed;
    cfg.protocol.psi = psi;
    cfg
}

struct Trace {
    records: Vec<MetricsRecord>,
    /// Rounds (t >= 20) where federations did not match quadrants exactly.
    mismatched: Vec<u64>,
}

fn run_fixture(cfg: &ExperimentConfig, arm: Arm) -> Trace {
    let mut exp = Experiment::new(cfg, arm).unwrap();
    let mut quadrants: BTreeMap<usize, BTreeSet<u64>> = BTreeMap::new();
    for s in &exp.world().topology.sites {
        quadrants.entry(s.subregion_id).or_default().insert(s.uid);
    }
    let expected: BTreeSet<BTreeSet<u64>> = quadrants.into_values().collect();
    let mut records = Vec::new();
    let mut mismatched = Vec::new();
    while !exp.is_finished() {
        let r = exp.step().unwrap();
        if r.round >= 20 {
            let got: BTreeSet<BTreeSet<u64>> = exp
                .last_report()
                .unwrap()
                .partition
                .federations
                .iter()
                .map(|f| f.members.iter().copied().collect())
                .collect();
            if r.federation_count != 4 || got != expected {
                mismatched.push(r.round);
            }
        }
        records.push(r);
    }
    Trace { records, mismatched }
}

fn final_mean_accuracy(t: &Trace) -> f64 {
    let acc = &t.records.last().unwrap().region_accuracy;
    acc.iter().sum::<f64>() / acc.len() as f64
}

// ---------------------------------------------------------------- 5

fn criterion_5(traces: &BTreeMap<u64, Trace>) -> Outcome {
    let bad: Vec<String> = traces
        .iter()
        .filter(|(_, t)| !t.mismatched.is_empty())
        .map(|(s, t)| format!("seed {s} off at rounds {:?}", t.mismatched))
        .collect();
    let counts: Vec<String> = traces
        .iter()
        .map(|(s, t)| format!("seed {s}: {}", t.records.last().unwrap().federation_count))
        .collect();
    outcome(
        bad.is_empty(),
        if bad.is_empty() {
            format!("quadrant federations for t >= 20 ({})", counts.join(", "))
        } else {
            bad.join("; ")
        },
    )
}

// ---------------------------------------------------------------- 6

fn criterion_6(at_03: &BTreeMap<u64, Trace>) -> Outcome {
    let mut pass = true;
    let mut notes = Vec::new();
    for &seed in &SEEDS {
        let a0 = final_mean_accuracy(&run_fixture(&fixture(seed, 0.0), Arm::SelfFederated));
        let a3 = final_mean_accuracy(&at_03[&seed]);
        let t9 = run_fixture(&fixture(seed, 0.9), Arm::SelfFederated);
        let a9 = final_mean_accuracy(&t9);
        let retained = a3 >= a0 - 0.02;
        let degraded = a9 <= a0 - 0.05;
        let unstable = !t9.mismatched.is_empty();
        let symptom = match (degraded, unstable) {
            (true, true) => "accuracy drop and unstable federations",
            (true, false) => "accuracy drop",
            (false, true) => "unstable federations",
            (false, false) => "none",
        };
        pass &= retained && (degraded || unstable);
        notes.push(format!(
            "seed {seed}: acc psi0 {a0:.4} psi0.3 {a3:.4} psi0.9 {a9:.4}, psi0.9 symptom: {symptom}"
        ));
    }
    outcome(pass, notes.join("; "))
}

// ---------------------------------------------------------------- 7

fn criterion_7(at_03: &BTreeMap<u64, Trace>) -> Outcome {
    let mut wins = 0;
    let mut notes = Vec::new();
    for &seed in &SEEDS {
        let own = at_03[&seed].records.last().unwrap().objective;
        let global = run_fixture(&fixture(seed, 0.3), Arm::GlobalFedAvg)
            .records
            .last()
            .unwrap()
            .objective;
        if own < global {
            wins += 1;
        }
        notes.push(format!("seed {seed}: {own:.4} vs {global:.4}"));
    }
    outcome(
        wins == SEEDS.len(),
        format!("{wins}/3 seeds below global-fedavg ({})", notes.join(", ")),
    )
}

// ---------------------------------------------------------------- 8

fn criterion_8() -> Outcome {
    let broadcast = |kind, psi| {
        let mut cfg = fixture(1, psi);
        cfg.protocol.kind = kind;
        cfg.protocol.tau = Some(1.0);
        cfg.protocol.rounds = 3;
        let mut exp = Experiment::new(&cfg, Arm::SelfFederated).unwrap();
        let degrees: u64 = exp.world().topology.adjacency.iter().map(|a| a.len() as u64).sum();
        let arch = exp.world().architecture.clone();
        let model = init_parameters(&arch, 0);
        let per_model = serialized_size(&compress(&model, &exp.protocol().strategy).unwrap());
        let mut out = Vec::new();
        while !exp.is_finished() {
            exp.step().unwrap();
            out.push(exp.last_report().unwrap().traffic.broadcast);
        }
        (out, degrees * per_model)
    };
    let (sq, sq_formula) = broadcast(CompressionKind::SparseQuantized, 0.3);
    let (dense, dense_formula) = broadcast(CompressionKind::Dense, 0.0);
    let exact = sq.iter().all(|b| *b == sq_formula) && dense.iter().all(|b| *b == dense_formula);
    let worst = sq
        .iter()
        .zip(&dense)
        .map(|(a, b)| *a as f64 / *b as f64)
        .fold(0.0, f64::max);
    outcome(
        exact && worst <= 0.30,
        format!(
            "per-round broadcast {} vs {} bytes, ratio {worst:.4}, matches format arithmetic: {exact}",
            sq[0], dense[0]
        ),
    )
}

// ---------------------------------------------------------------- 9

/// Components by union-find, each as a sorted uid list.
fn components_oracle(nodes: &[u64], edges: &[(u64, u64)]) -> Vec<BTreeSet<u64>> {
    let index: BTreeMap<u64, usize> = nodes.iter().enumerate().map(|(i, &u)| (u, i)).collect();
    let mut parent: Vec<usize> = (0..nodes.len()).collect();
    fn find(p: &mut [usize], mut x: usize) -> usize {
        while p[x] != x {
            p[x] = p[p[x]];
            x = p[x];
        }
        x
    }
    for &(a, b) in edges {
        let (ra, rb) = (find(&mut parent, index[&a]), find(&mut parent, index[&b]));
        parent[ra] = rb;
    }
    let mut groups: BTreeMap<usize, BTreeSet<u64>> = BTreeMap::new();
    for (i, &u) in nodes.iter().enumerate() {
        let r = find(&mut parent, i);
        groups.entry(r).or_default().insert(u);
    }
    groups.into_values().collect()
}

fn diameter_oracle(nodes: &[u64], edges: &[(u64, u64)]) -> usize {
    let mut adj: BTreeMap<u64, Vec<u64>> = nodes.iter().map(|&u| (u, Vec::new())).collect();
    for &(a, b) in edges {
        adj.get_mut(&a).unwrap().push(b);
        adj.get_mut(&b).unwrap().push(a);
    }
    let mut best = 0;
    for &s in nodes {
        let mut dist = BTreeMap::from([(s, 0usize)]);
        let mut q = VecDeque::from([s]);
        while let Some(u) = q.pop_front() {
            for &v in &adj[&u] {
                if !dist.contains_key(&v) {
                    dist.insert(v, dist[&u] + 1);
                    q.push_back(v);
                }
            }
        }
        best = best.max(dist.values().copied().max().unwrap_or(0));
    }
    best
}

fn build(nodes: &[u64], edges: &[(u64, u64)]) -> FieldGraph {
    let mut g = FieldGraph::new(nodes.iter().copied());
    for &(a, b) in edges {
        g.add_edge(a, b);
    }
    g
}

/// Every invariant for one graph, including every single-node removal.
fn check_graph(nodes: &[u64], edges: &[(u64, u64)]) -> Result<(), String> {
    let g = build(nodes, edges);
    let c = coordinate(&g);
    check_coordination(nodes, edges, &c)?;
    let g_rounds = g_block(&g, &c.election.leaders()).rounds;
    let diam = diameter_oracle(nodes, edges);
    if c.election.rounds > diam + 1 || g_rounds > diam + 1 {
        return Err(format!(
            "rounds s={} g={} exceed diameter {diam} + 1",
            c.election.rounds, g_rounds
        ));
    }
    for &victim in nodes {
        let (residual, after) = stabilize_after_removal(&g, victim).map_err(|e| e.to_string())?;
        let rest: Vec<u64> = nodes.iter().copied().filter(|&u| u != victim).collect();
        let rest_edges: Vec<(u64, u64)> = edges
            .iter()
            .copied()
            .filter(|&(a, b)| a != victim && b != victim)
            .collect();
        let fresh = coordinate(&build(&rest, &rest_edges));
        if after != fresh || residual.len() != rest.len() {
            return Err(format!("removing {victim} differs from recomputation"));
        }
        check_coordination(&rest, &rest_edges, &after)?;
    }
    Ok(())
}

fn check_coordination(nodes: &[u64], edges: &[(u64, u64)], c: &Coordination) -> Result<(), String> {
    for comp in components_oracle(nodes, edges) {
        let leaders: Vec<u64> = comp.iter().copied().filter(|u| c.election.is_leader(*u)).collect();
        if leaders.len() != 1 {
            return Err(format!("component {comp:?} has leaders {leaders:?}"));
        }
        if comp.iter().any(|u| c.election.leader_of[u] != leaders[0]) {
            return Err(format!("component {comp:?} disagrees on its leader"));
        }
    }
    let edge_set: BTreeSet<(u64, u64)> = edges.iter().flat_map(|&(a, b)| [(a, b), (b, a)]).collect();
    for &u in nodes {
        let mut seen = BTreeSet::new();
        let mut cur = u;
        loop {
            if !seen.insert(cur) {
                return Err(format!("parent chain from {u} cycles"));
            }
            let n = c.field.get(cur).ok_or(format!("{cur} missing from field"))?;
            match n.parent {
                Some(p) => {
                    if !edge_set.contains(&(cur, p)) {
                        return Err(format!("parent {p} of {cur} is not a neighbour"));
                    }
                    cur = p;
                }
                None => {
                    if !c.election.is_leader(cur) {
                        return Err(format!("chain from {u} stops at non-leader {cur}"));
                    }
                    break;
                }
            }
        }
    }
    Ok(())
}

fn criterion_9() -> Outcome {
    let mut graphs = 0usize;
    for n in 1..=6u64 {
        let nodes: Vec<u64> = (0..n).collect();
        let pairs: Vec<(u64, u64)> = (0..n).flat_map(|a| (a + 1..n).map(move |b| (a, b))).collect();
        for bits in 0u32..(1 << pairs.len()) {
            let edges: Vec<(u64, u64)> = pairs
                .iter()
                .enumerate()
                .filter(|(i, _)| bits & (1 << i) != 0)
                .map(|(_, &e)| e)
                .collect();
            if let Err(e) = check_graph(&nodes, &edges) {
                return outcome(false, format!("graph n={n} edges {edges:?}: {e}"));
            }
            graphs += 1;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(0xF1E1D);
    for i in 0..100 {
        let n = rng.random_range(1..=64);
        // sparse uids so leaders are not just 0
        let mut nodes: Vec<u64> = (0..n).map(|_| rng.random_range(0..10_000)).collect();
        nodes.sort_unstable();
        nodes.dedup();
        let p: f64 = rng.random_range(0.0..(6.0 / n as f64).min(1.0));
        let mut edges = Vec::new();
        for a in 0..nodes.len() {
            for b in a + 1..nodes.len() {
                if rng.random::<f64>() < p {
                    edges.push((nodes[a], nodes[b]));
                }
            }
        }
        if let Err(e) = check_graph(&nodes, &edges) {
            return outcome(false, format!("random graph {i} ({} nodes): {e}", nodes.len()));
        }
        graphs += 1;
    }
    outcome(true, format!("{graphs} graphs, every single-node removal rechecked"))
}

// ---------------------------------------------------------------- 10

fn criterion_10(first: &Trace) -> Outcome {
    let cfg = fixture(SEEDS[0], 0.3);
    let a = render_metrics_csv(&first.records, 4).unwrap();
    let b = render_metrics_csv(&run_fixture(&cfg, Arm::SelfFederated).records, 4).unwrap();
    let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
    let c = pool.install(|| render_metrics_csv(&run_fixture(&cfg, Arm::SelfFederated).records, 4).unwrap());
    outcome(
        a == b && a == c,
        format!(
            "{} bytes; repeat identical: {}; single-thread identical: {}",
            a.len(),
            a == b,
            a == c
        ),
    )
}

// ----------------------------------------------------------------

fn main() {
    let mut failed = 0;
    let mut report = |n: usize, name: &str, start: Instant, o: Outcome| {
        if !o.pass {
            failed += 1;
        }
        println!(
            "{} criterion {n:>2} {name}: {} [{:.1}s]",
            if o.pass { "PASS" } else { "FAIL" },
            o.detail,
            start.elapsed().as_secs_f64()
        );
    };

    let t = Instant::now();
    report(1, "gradient oracle", t, criterion_1());
    let t = Instant::now();
    report(2, "quantization bound", t, criterion_2());
    let t = Instant::now();
    report(3, "size ratio", t, criterion_3());
    let t = Instant::now();
    report(4, "sparsity exactness", t, criterion_4());

    let t = Instant::now();
    let at_03: BTreeMap<u64, Trace> = SEEDS
        .iter()
        .map(|&s| (s, run_fixture(&fixture(s, 0.3), Arm::SelfFederated)))
        .collect();
    report(5, "federation convergence", t, criterion_5(&at_03));
    let t = Instant::now();
    report(6, "accuracy retention", t, criterion_6(&at_03));
    let t = Instant::now();
    report(7, "non-IID advantage", t, criterion_7(&at_03));
    let t = Instant::now();
    report(8, "communication reduction", t, criterion_8());
    let t = Instant::now();
    report(9, "field blocks", t, criterion_9());
    let t = Instant::now();
    report(10, "determinism", t, criterion_10(&at_03[&SEEDS[0]]));

    if failed > 0 {
        println!("{failed} criteria failed");
        std::process::exit(1);
    }
}
