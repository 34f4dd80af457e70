//! Scratch pilot for tuning acceptance test sizes. Not part of the suite.

use std::sync::Arc;
use std::time::Instant;

use quantsense::ensemble::{make_folds, ScoreContext, REFERENCE_ASSIGNMENT};
use quantsense::graph::{QuantConfig, ToyFamily, ToyParams};
use quantsense::oracle::{
    build_toy_model, corpus_examples, evaluate_config, generate_corpus, one_at_a_time_sweep,
    PlantSpec, TargetMode,
};
use quantsense::sampler::SampleSpec;
use quantsense::surrogate::{RankLossKind, Surrogate, SurrogateSpec, TrainSpec};

fn pilot_c4(
    hidden: usize,
    embed: usize,
    epochs: usize,
    lr: f64,
    batch: usize,
    blocks: usize,
    kind: RankLossKind,
    model_seed: u64,
    tseed: u64,
    fold_seed: u64,
) {
    let t0 = Instant::now();
    let model =
        build_toy_model(ToyFamily::ToyDit, &ToyParams { blocks, width: 8 }, model_seed).unwrap();
    let (records, _) =
        generate_corpus(&model, &SampleSpec::new(400, 2), None, TargetMode::Pure).unwrap();
    let examples = corpus_examples(&model, &records).unwrap();
    println!("corpus built in {:.1?}", t0.elapsed());

    let sspec = SurrogateSpec { hidden, embed_dim: embed, layers: 4, rank_loss: kind };
    let tspec = TrainSpec { epochs, batch_size: batch, lr, weight_decay: 1e-6, seed: tseed };
    let plan = make_folds(examples.len(), 5, fold_seed).unwrap();
    let t1 = Instant::now();
    let ens =
        quantsense::ensemble::train_ensemble(model.graph(), model.catalog(), &examples, &sspec, &tspec, &plan)
            .unwrap();
    println!("ensemble trained in {:.1?}", t1.elapsed());
    let mut worst: f64 = 1.0;
    for (i, m) in ens.members().iter().enumerate() {
        // Training-split correlation per hop, to separate optimization
        // failures from generalization gaps.
        let fold = &plan.folds()[m.fold];
        let train_exs: Vec<quantsense::surrogate::TrainExample> =
            fold.train.iter().map(|&j| examples[j].clone()).collect();
        let train_ys: Vec<f64> = train_exs.iter().map(|e| e.target).collect();
        let train_norms = m.surrogate.graph_norms(&train_exs).unwrap();
        for (hop, met) in &m.metrics {
            let best = met.srcc.max(met.ndcg);
            worst = worst.min(best);
            let tr_srcc =
                quantsense::surrogate::spearman_rcc(&train_norms[hop], &train_ys);
            println!(
                "member {i} hop {hop}: val srcc {:+.3} ndcg {:.3} | train srcc {tr_srcc:+.3} -> best {:+.3} {}",
                met.srcc,
                met.ndcg,
                best,
                if best >= 0.5 { "" } else { "  <-- BELOW" }
            );
        }
    }
    println!("worst best-metric {worst:+.3}, total {:.1?}", t0.elapsed());
}

fn pilot_c4_linear(epochs: usize) {
    // Realizable target: average bits.
    let t0 = Instant::now();
    let model = build_toy_model(ToyFamily::ToyDit, &ToyParams { blocks: 1, width: 8 }, 1).unwrap();
    let (records, _) =
        generate_corpus(&model, &SampleSpec::new(300, 5), None, TargetMode::Pure).unwrap();
    let mut examples = corpus_examples(&model, &records).unwrap();
    for (ex, r) in examples.iter_mut().zip(&records) {
        let bits: u32 = r.config.assignments.values().map(|a| u32::from(a.bits)).sum();
        ex.target = f64::from(bits) / r.config.assignments.len() as f64;
    }
    let sspec = SurrogateSpec {
        hidden: 32,
        embed_dim: 8,
        layers: 4,
        rank_loss: RankLossKind::Hybrid,
    };
    let targets: Vec<f64> = examples.iter().map(|e| e.target).collect();
    let mut s = Surrogate::new(Arc::clone(model.graph()), model.catalog(), sspec, 11).unwrap();
    let tspec = TrainSpec { epochs, batch_size: 64, lr: 1e-3, weight_decay: 1e-6, seed: 5 };
    let exs = examples.clone();
    let mut hit = None;
    let report = s
        .train_monitored(&examples, &tspec, |epoch, _, surr| {
            if (epoch + 1) % 25 != 0 {
                return false;
            }
            let preds = surr.predict(&exs).unwrap();
            let srcc = quantsense::surrogate::spearman_rcc(&preds, &targets);
            println!("epoch {epoch}: srcc {srcc:+.3} ({:.1?})", t0.elapsed());
            if srcc >= 0.9 {
                hit = Some(epoch + 1);
                true
            } else {
                false
            }
        })
        .unwrap();
    println!("linear target: epochs_run {} hit {:?} in {:.1?}", report.epochs_run, hit, t0.elapsed());
}

fn pilot_c5(seeds: u64, n_configs: usize, epochs: usize, folds: usize) {
    let t0 = Instant::now();
    let mut setting_hits = 0;
    let mut spread_hits = 0;
    for seed in 0..seeds {
        let ts = Instant::now();
        let base = build_toy_model(ToyFamily::ToyDit, &ToyParams { blocks: 1, width: 18 }, seed).unwrap();
        let weights: Vec<String> =
            base.graph().weight_nodes().map(|(_, n)| n.id.clone()).collect();
        let planted_id = weights[seed as usize % weights.len()].clone();
        let model = quantsense::oracle::plant_sensitivity(
            &base,
            PlantSpec { node_id: planted_id.clone(), gain: 10.0 },
        )
        .unwrap();
        let (records, _) =
            generate_corpus(&model, &SampleSpec::new(n_configs, 1000 + seed), None, TargetMode::Pure)
                .unwrap();
        let examples = corpus_examples(&model, &records).unwrap();
        let sspec =
            SurrogateSpec { hidden: 16, embed_dim: 8, layers: 4, rank_loss: RankLossKind::Hybrid };
        let tspec =
            TrainSpec { epochs, batch_size: 96, lr: 1e-3, weight_decay: 1e-6, seed: 100 + seed };
        let plan = make_folds(examples.len(), folds, 7 + seed).unwrap();
        let ens = quantsense::ensemble::train_ensemble(
            model.graph(),
            model.catalog(),
            &examples,
            &sspec,
            &tspec,
            &plan,
        )
        .unwrap();
        let ctx = ScoreContext::new(model.graph(), model.store(), model.cache());
        let outcome = ens.build_op_level(&ctx).unwrap();

        let base_cfg = QuantConfig::uniform(model.graph(), REFERENCE_ASSIGNMENT);
        let sweep = one_at_a_time_sweep(&model, &base_cfg).unwrap();
        let planted_row = sweep.iter().find(|r| r.node_id == planted_id).unwrap();
        let chosen = outcome.config.get(&planted_id).unwrap();
        let setting_ok = chosen == planted_row.best;

        // Score spread per node over its six settings.
        let mut spreads: std::collections::BTreeMap<&str, (f64, f64)> = Default::default();
        for s in &outcome.scores {
            let quantsense::ensemble::ScoreQuery::Op { node, .. } = &s.query else { continue };
            let e = spreads.entry(node.as_str()).or_insert((f64::INFINITY, f64::NEG_INFINITY));
            e.0 = e.0.min(s.total);
            e.1 = e.1.max(s.total);
        }
        let max_node =
            spreads.iter().max_by(|a, b| (a.1 .1 - a.1 .0).total_cmp(&(b.1 .1 - b.1 .0))).unwrap();
        let spread_ok = *max_node.0 == planted_id;
        setting_hits += u32::from(setting_ok);
        spread_hits += u32::from(spread_ok);
        println!(
            "seed {seed}: planted {planted_id} chosen {:?} sweep-best {:?} setting_ok {setting_ok} spread_ok {spread_ok} (max spread at {}) {:.1?}",
            chosen, planted_row.best, max_node.0, ts.elapsed()
        );
    }
    println!(
        "C5: setting {setting_hits}/{seeds} spread {spread_hits}/{seeds} in {:.1?}",
        t0.elapsed()
    );
}

fn pilot_c6(seeds: u64, n_configs: usize, epochs: usize, folds: usize, scale: f64) {
    let t0 = Instant::now();
    let mut undominated = 0;
    let mut budget_wins = 0;
    for seed in 0..seeds {
        let ts = Instant::now();
        let model = build_toy_model(ToyFamily::ToyDit, &ToyParams { blocks: 1, width: 18 }, 50 + seed).unwrap();
        let (_, lambda_auto) = generate_corpus(
            &model,
            &SampleSpec::new(n_configs, 2000 + seed),
            None,
            TargetMode::Constrained,
        )
        .unwrap();
        let lambda = lambda_auto * scale;
        let (records, lambda) = generate_corpus(
            &model,
            &SampleSpec::new(n_configs, 2000 + seed),
            Some(lambda),
            TargetMode::Constrained,
        )
        .unwrap();
        let examples = corpus_examples(&model, &records).unwrap();
        let sspec =
            SurrogateSpec { hidden: 32, embed_dim: 8, layers: 4, rank_loss: RankLossKind::Hybrid };
        let tspec =
            TrainSpec { epochs, batch_size: 160, lr: 1e-3, weight_decay: 1e-6, seed: 300 + seed };
        let plan = make_folds(examples.len(), folds, 9 + seed).unwrap();
        let ens = quantsense::ensemble::train_ensemble(
            model.graph(),
            model.catalog(),
            &examples,
            &sspec,
            &tspec,
            &plan,
        )
        .unwrap();
        let ctx = ScoreContext::new(model.graph(), model.store(), model.cache());
        let outcome = ens.build_block_level(&ctx, model.catalog()).unwrap();
        let ours = evaluate_config(&model, &outcome.config, lambda, TargetMode::Constrained).unwrap();

        let dominated = records.iter().any(|r| {
            r.is_ok()
                && r.oracle_loss <= ours.oracle_loss
                && r.avg_bits <= ours.avg_bits
                && (r.oracle_loss < ours.oracle_loss || r.avg_bits < ours.avg_bits)
        });
        let best_at_geq_bits = records
            .iter()
            .filter(|r| r.is_ok() && r.avg_bits >= ours.avg_bits)
            .map(|r| r.oracle_loss)
            .fold(f64::INFINITY, f64::min);
        let budget_ok = ours.avg_bits < 4.0 && ours.oracle_loss <= best_at_geq_bits;
        undominated += u32::from(!dominated);
        budget_wins += u32::from(budget_ok);
        println!(
            "seed {seed}: ours loss {:.5} bits {:.3} | dominated {dominated} budget_ok {budget_ok} (best@>=bits {:.5}) {:.1?}",
            ours.oracle_loss, ours.avg_bits, best_at_geq_bits, ts.elapsed()
        );
    }
    println!("C6: undominated {undominated}/{seeds} budget {budget_wins}/{seeds} in {:.1?}", t0.elapsed());
}

fn pilot_c6probe(seeds: u64, n_configs: usize) {
    // Oracle-driven block selection: same per-subgraph enumeration as
    // build_block_level but scored by the true constrained y. Upper bound on
    // what a perfect surrogate could achieve, at several lambda scales.
    for seed in 0..seeds {
        let model =
            build_toy_model(ToyFamily::ToyDit, &ToyParams { blocks: 1, width: 18 }, 50 + seed)
                .unwrap();
        let (records, lambda_auto) = generate_corpus(
            &model,
            &SampleSpec::new(n_configs, 2000 + seed),
            None,
            TargetMode::Constrained,
        )
        .unwrap();
        let floor = evaluate_config(
            &model,
            &QuantConfig::uniform(model.graph(), REFERENCE_ASSIGNMENT),
            0.0,
            TargetMode::Pure,
        )
        .unwrap();
        let best_rec = records
            .iter()
            .filter(|r| r.is_ok())
            .min_by(|a, b| a.oracle_loss.partial_cmp(&b.oracle_loss).unwrap())
            .unwrap();
        println!(
            "seed {seed}: floor(KMeansC4) {:.5} | corpus best loss {:.5} at bits {:.3} | lambda_auto {:.5}",
            floor.oracle_loss, best_rec.oracle_loss, best_rec.avg_bits, lambda_auto
        );
        for scale in [1.0, 0.5, 0.2, 0.1, 0.05] {
            let lambda = lambda_auto * scale;
            let base = QuantConfig::uniform(model.graph(), REFERENCE_ASSIGNMENT);
            let mut cfg_map = std::collections::BTreeMap::new();
            for sg in model.catalog() {
                let w = sg.weight_members.len();
                let mut best: Option<(f64, Vec<_>)> = None;
                for choices in quantsense::ensemble::enumerate_assignments(w) {
                    let mut cfg = base.clone();
                    for (node, c) in sg.weight_members.iter().zip(&choices) {
                        cfg.assignments.insert(node.clone(), *c);
                    }
                    let rec =
                        evaluate_config(&model, &cfg, lambda, TargetMode::Constrained).unwrap();
                    if best.as_ref().map_or(true, |(y, _)| rec.y > *y) {
                        best = Some((rec.y, choices));
                    }
                }
                let (_, choices) = best.unwrap();
                for (node, c) in sg.weight_members.iter().zip(&choices) {
                    cfg_map.insert(node.clone(), *c);
                }
            }
            let ours = evaluate_config(
                &model,
                &QuantConfig::new(cfg_map),
                lambda,
                TargetMode::Constrained,
            )
            .unwrap();
            let dominated = records.iter().any(|r| {
                r.is_ok()
                    && r.oracle_loss <= ours.oracle_loss
                    && r.avg_bits <= ours.avg_bits
                    && (r.oracle_loss < ours.oracle_loss || r.avg_bits < ours.avg_bits)
            });
            let best_at_geq_bits = records
                .iter()
                .filter(|r| r.is_ok() && r.avg_bits >= ours.avg_bits)
                .map(|r| r.oracle_loss)
                .fold(f64::INFINITY, f64::min);
            let budget_ok = ours.avg_bits < 4.0 && ours.oracle_loss <= best_at_geq_bits;
            println!(
                "  scale {scale:>4}: loss {:.5} bits {:.3} | dominated {dominated} budget_ok {budget_ok} (best@>=bits {:.5})",
                ours.oracle_loss, ours.avg_bits, best_at_geq_bits
            );
        }
    }
}

fn pilot_scan(seeds: u64, blocks: usize, width: usize) {
    // Training-free ceiling probe: per hop, correlate y with the negated sum
    // of member epsilons over that hop's designated subgraphs.
    for seed in 0..seeds {
        let model =
            build_toy_model(ToyFamily::ToyDit, &ToyParams { blocks, width }, seed).unwrap();
        let (records, _) =
            generate_corpus(&model, &SampleSpec::new(400, 2), None, TargetMode::Pure).unwrap();
        let ys: Vec<f64> = records.iter().map(|r| r.y).collect();
        let mut line = format!("seed {seed}:");
        let mut min_c: f64 = 1.0;
        for hop in 1..=3usize {
            let subs: Vec<_> = model.catalog().iter().filter(|s| s.hop == hop).collect();
            if subs.is_empty() {
                continue;
            }
            // Mean over this hop's roots of the block-local damage.
            let proxy: Vec<f64> = records
                .iter()
                .map(|r| {
                    subs.iter()
                        .map(|s| {
                            -s.weight_members
                                .iter()
                                .map(|w| r.epsilons.get(w).copied().unwrap_or(0.0))
                                .sum::<f64>()
                        })
                        .sum::<f64>()
                        / subs.len() as f64
                })
                .collect();
            let c = quantsense::surrogate::spearman_rcc(&proxy, &ys);
            min_c = min_c.min(c);
            line.push_str(&format!(" hop{hop} {c:+.3}"));
        }
        println!("{line} | min {min_c:+.3}");
    }
}

fn pilot_reach(seed: u64, blocks: usize, width: usize) {
    let model =
        build_toy_model(ToyFamily::ToyDit, &ToyParams { blocks, width }, seed).unwrap();
    let (records, _) =
        generate_corpus(&model, &SampleSpec::new(400, 2), None, TargetMode::Pure).unwrap();
    let ys: Vec<f64> = records.iter().map(|r| r.y).collect();
    let graph = model.graph();

    // Per-node sensitivity: SRCC(-epsilon_node, y).
    println!("per-node signal:");
    for (_, node) in graph.weight_nodes() {
        let eps: Vec<f64> =
            records.iter().map(|r| -r.epsilons.get(&node.id).copied().unwrap_or(0.0)).collect();
        let c = quantsense::surrogate::spearman_rcc(&eps, &ys);
        println!("  {:<22} {c:+.3}", node.id);
    }

    // Directed ancestors within h hops of each root, and the proxy ceiling
    // over that receptive field.
    let n = graph.len();
    let mut preds: Vec<Vec<usize>> = vec![Vec::new(); n];
    for &(s, d) in graph.edges() {
        preds[d as usize].push(s as usize);
    }
    for sg in model.catalog() {
        let root = graph.index_of(&sg.root).unwrap();
        let mut seen = std::collections::BTreeSet::from([root]);
        let mut frontier = vec![root];
        for _ in 0..sg.hop {
            let mut next = Vec::new();
            for &v in &frontier {
                for &p in &preds[v] {
                    if seen.insert(p) {
                        next.push(p);
                    }
                }
            }
            frontier = next;
        }
        let in_reach: Vec<String> = seen
            .iter()
            .filter(|&&i| graph.node(i).kind == quantsense::graph::NodeKind::Weight)
            .map(|&i| graph.node(i).id.clone())
            .collect();
        let proxy: Vec<f64> = records
            .iter()
            .map(|r| {
                -in_reach.iter().map(|w| r.epsilons.get(w).copied().unwrap_or(0.0)).sum::<f64>()
            })
            .collect();
        let c = quantsense::surrogate::spearman_rcc(&proxy, &ys);
        println!(
            "{:<18} hop {} root {:<18} reach {:>2} weights, proxy {c:+.3}: {in_reach:?}",
            sg.category,
            sg.hop,
            sg.root,
            in_reach.len()
        );
    }
}

fn pilot_c5_probe(seed: u64, n_configs: usize) {
    let base = build_toy_model(ToyFamily::ToyDit, &ToyParams { blocks: 1, width: 18 }, seed).unwrap();
    let weights: Vec<String> = base.graph().weight_nodes().map(|(_, n)| n.id.clone()).collect();
    let planted_id = weights[seed as usize % weights.len()].clone();
    let model = quantsense::oracle::plant_sensitivity(
        &base,
        PlantSpec { node_id: planted_id.clone(), gain: 10.0 },
    )
    .unwrap();
    println!("planted {planted_id}, baseline {:.5}", model.baseline_loss());

    let base_cfg = QuantConfig::uniform(model.graph(), REFERENCE_ASSIGNMENT);
    let sweep = one_at_a_time_sweep(&model, &base_cfg).unwrap();
    for row in &sweep {
        if row.node_id == planted_id {
            println!("sweep losses for planted node:");
            for (a, l) in &row.losses {
                println!("  {:?} {} -> {l:.5}", a.method, a.bits);
            }
        }
    }
    let var_rank: Vec<(String, f64)> =
        sweep.iter().map(|r| (r.node_id.clone(), r.variance)).collect();
    let max_var = var_rank.iter().cloned().fold(("".into(), 0.0), |acc: (String, f64), x| {
        if x.1 > acc.1 { x } else { acc }
    });
    println!("sweep variance max at {} ({:.6})", max_var.0, max_var.1);

    let (records, _) =
        generate_corpus(&model, &SampleSpec::new(n_configs, 1000 + seed), None, TargetMode::Pure)
            .unwrap();
    println!("corpus conditional mean y per planted choice:");
    for choice in quantsense::quant::QuantAssignment::CHOICES {
        let ys: Vec<f64> = records
            .iter()
            .filter(|r| r.config.get(&planted_id) == Some(choice))
            .map(|r| r.y)
            .collect();
        let mean = ys.iter().sum::<f64>() / ys.len().max(1) as f64;
        println!("  {:?} {} -> {mean:.5} (n={})", choice.method, choice.bits, ys.len());
    }
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    let which = args.get(1).map(String::as_str).unwrap_or("c4");
    match which {
        "c4" => {
            let hidden: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(32);
            let embed: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(8);
            let epochs: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(150);
            let lr: f64 = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
            let batch: usize = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(64);
            let blocks: usize = args.get(7).and_then(|s| s.parse().ok()).unwrap_or(1);
            let kind = match args.get(8).map(String::as_str) {
                Some("srcc") => RankLossKind::SoftSpearman,
                Some("ndcg") => RankLossKind::LambdaRank,
                _ => RankLossKind::Hybrid,
            };
            let model_seed: u64 = args.get(9).and_then(|s| s.parse().ok()).unwrap_or(1);
            let tseed: u64 = args.get(10).and_then(|s| s.parse().ok()).unwrap_or(3);
            let fold_seed: u64 = args.get(11).and_then(|s| s.parse().ok()).unwrap_or(7);
            pilot_c4(hidden, embed, epochs, lr, batch, blocks, kind, model_seed, tseed, fold_seed);
        }
        "c4lin" => {
            let epochs: usize = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(2000);
            pilot_c4_linear(epochs);
        }
        "c5" => {
            let seeds: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(10);
            let n: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(240);
            let epochs: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(200);
            let folds: usize = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(3);
            pilot_c5(seeds, n, epochs, folds);
        }
        "c6" => {
            let seeds: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(10);
            let n: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(400);
            let epochs: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(200);
            let folds: usize = args.get(5).and_then(|s| s.parse().ok()).unwrap_or(3);
            let scale: f64 = args.get(6).and_then(|s| s.parse().ok()).unwrap_or(0.1);
            pilot_c6(seeds, n, epochs, folds, scale);
        }
        "c6probe" => {
            let seeds: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(10);
            let n: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(400);
            pilot_c6probe(seeds, n);
        }
        "c5probe" => {
            let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(0);
            let n: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(600);
            pilot_c5_probe(seed, n);
        }
        "reach" => {
            let seed: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1);
            let blocks: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1);
            let width: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(8);
            pilot_reach(seed, blocks, width);
        }
        "scan" => {
            let seeds: u64 = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(8);
            let blocks: usize = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1);
            let width: usize = args.get(4).and_then(|s| s.parse().ok()).unwrap_or(8);
            pilot_scan(seeds, blocks, width);
        }
        other => eprintln!("unknown pilot `{other}`"),
    }
}
