//! Planted-interaction experiment: trains the full model and selected
//! ablations on one synthetic dataset and prints pooled AUC per phase.
//!
//! `cargo run --release --example planted -- [variant ...]`
//!
//! Environment knobs. Data: WIDE, NG, SKEW, NOISE, VOCAB, GAIN (product
//! rule), OLDREC. Model: ILR, WLR, WEP, IST, MLR, MEP, PEP, SQ, KS, GAMMA, OP.
//! DIAG=1 reports how often each new item's cold-start graph holds its
//! secret pair.

use std::time::Instant;

use emerg::dataio::{build_phases, split_items, synth_generate, SynthConfig};
use emerg::metatrain::{evaluate_items, pooled_reports, train, Engine, MetaConfig};

fn main() -> emerg::Result<()> {
    let variants: Vec<String> = std::env::args().skip(1).collect();
    let variants = if variants.is_empty() {
        vec!["full".to_string(), "shared_graph".into(), "no_meta".into()]
    } else {
        variants
    };
    let mut sc = SynthConfig::default();
    if std::env::var("WIDE").is_ok() {
        sc.item_fields = vec!["price".into(), "brand".into()];
        sc.user_fields = vec!["income".into(), "age".into(), "city".into(), "job".into()];
        sc.n_groups = std::env::var("NG").map(|v| v.parse().unwrap()).unwrap_or(6);
    }
    if let Ok(x) = std::env::var("SKEW") { sc.item_skew = x.parse().unwrap(); }
    if let Ok(x) = std::env::var("NOISE") { sc.noise = x.parse().unwrap(); }
    if let Ok(x) = std::env::var("VOCAB") { sc.field_vocab = x.parse().unwrap(); }
    if let Ok(x) = std::env::var("GAIN") { sc.rule = emerg::dataio::LabelRule::Product { gain: x.parse().unwrap() }; }
    if let Ok(x) = std::env::var("OLDREC") { sc.old_records = x.parse().unwrap(); }
    let (table, reg) = synth_generate(&sc, 7)?;
    {
        let split = split_items(&table, 200, 20)?;
        let plan = build_phases(&table, &split)?;
        let (mut a, mut b, mut l) = (Vec::new(), Vec::new(), Vec::new());
        for (item, ph) in &plan.items {
            for &i in &ph.test {
                let r = table.row(i);
                a.push(reg.clean_probability(*item, &r.values));
                b.push(reg.rule_probability(*item, &r.values));
                l.push(r.label);
            }
        }
        println!("oracle: full={:.4} rule-only={:.4}", emerg::eval::auc(&a, &l)?, emerg::eval::auc(&b, &l)?);
    }
    for v in variants {
        let mut cfg = MetaConfig {
            seed: 7,
            ..MetaConfig::default()
        };
        let env = |k: &str| std::env::var(k).ok();
        if let Some(x) = env("ILR") { cfg.inner_lr = x.parse().unwrap(); }
        if let Some(x) = env("WLR") { cfg.warmup_lr = x.parse().unwrap(); }
        if let Some(x) = env("WEP") { cfg.warmup_epochs = x.parse().unwrap(); }
        if let Some(x) = env("IST") { cfg.inner_steps = x.parse().unwrap(); }
        if let Some(x) = env("MLR") { cfg.meta_lr = x.parse().unwrap(); }
        if let Some(x) = env("MEP") { cfg.meta_epochs = x.parse().unwrap(); }
        if let Some(x) = env("PEP") { cfg.pretrain_epochs = x.parse().unwrap(); }
        if let Some(x) = env("SQ") { cfg.support_size = Some(x.parse().unwrap()); cfg.query_size = cfg.support_size; }
        if let Some(x) = env("KS") { cfg.k_sparse = Some(x.parse().unwrap()); }
        if let Some(x) = env("GAMMA") { cfg.gamma = x.parse().unwrap(); }
        if let Some(x) = env("OP") { cfg.op = x.parse().unwrap(); }
        match v.as_str() {
            "shared_graph" => cfg.ablations.shared_graph = true,
            "no_meta" => cfg.ablations.no_meta = true,
            "random_graph" => cfg.ablations.random_graph = true,
            "no_inner" => cfg.ablations.no_inner = true,
            _ => {}
        }
        let t0 = Instant::now();
        let split = split_items(&table, cfg.threshold, cfg.shots)?;
        let plan = build_phases(&table, &split)?;
        let engine = Engine::new(table.schema_arc(), cfg.clone())?;
        let old: Vec<u32> = split.old.iter().copied().collect();
        let (theta, _, _) = train(&engine, &table, &old)?;
        if std::env::var("DIAG").is_ok() {
            let n_item = engine.schema().n_item();
            let (mut hit, mut top, mut total) = (0, 0, 0);
            for (item, ph) in &plan.items {
                let row = table.row(ph.test[0]);
                let phi = engine.cold_phi(&theta, *item, &row.values[..n_item])?;
                let st = engine.stack(&phi)?;
                let (a, b) = reg.pairs[item];
                let t = &st.tilde[0];
                total += 1;
                if t.get(a, b) > 0.0 {
                    hit += 1;
                }
                let n = t.rows();
                let mut best = (f64::MIN, 0, 0);
                for i in 0..n {
                    for j in 0..n {
                        if i != j && t.get(i, j) > best.0 {
                            best = (t.get(i, j), i, j);
                        }
                    }
                }
                if (best.1, best.2) == (a, b) || (best.1, best.2) == (b, a) {
                    top += 1;
                }
                if total <= 3 {
                    println!("item {item} pair ({a},{b}) tilde0 {:?}", t);
                }
            }
            println!("{v}: secret pair kept {hit}/{total}, strongest edge {top}/{total}");
        }
        let results = evaluate_items(&engine, &theta, &table, &plan, 1)?;
        let reports = pooled_reports(&results, "", cfg.seed)?;
        let line: Vec<String> = reports
            .iter()
            .map(|r| format!("{}={:.4}", r.phase, r.auc.unwrap_or(f64::NAN)))
            .collect();
        println!("{v:>14}: {}  ({:.1}s)", line.join(" "), t0.elapsed().as_secs_f64());
    }
    Ok(())
}
