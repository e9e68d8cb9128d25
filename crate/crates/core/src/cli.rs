//! Run configuration and the commands behind the `emerg` binary.
//!
//! The run config is a flat TOML document. `data` and `schema` are required;
//! every other key is a [`MetaConfig`] field, an ablation flag, or one of
//! `binarize_threshold` and `workers`. Unknown keys are errors.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::SeedableRng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::dataio::{
    build_phases, split_items, synth_generate, FeatureSchema, InteractionTable, LoadOptions, PhasePlan,
    SynthConfig,
};
use crate::diffcore::{checkpoint, ParamStore};
use crate::error::{config_err, Error, Result};
use crate::eval::{write_report_csv, MetricReport};
use crate::graphgen::export_adjacency;
use crate::metatrain::{
    evaluate_items, pooled_reports, train, write_run_log, Engine, MetaConfig, PhaseResult,
};
use crate::orderoracle::{check_prop1, degree_table, Mode, Pattern};

const ABLATION_KEYS: [&str; 6] = ["random_graph", "no_sparsify", "no_mask", "shared_graph", "no_meta", "no_inner"];
pub const PHASES: [&str; 4] = ["cold", "A", "B", "C"];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: PathBuf,
    pub schema: PathBuf,
    pub binarize_threshold: Option<f64>,
    pub workers: usize,
    pub meta: MetaConfig,
}

impl RunConfig {
    /// Relative paths are taken relative to `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| config_err!("config: {}", e.message()))?;
        let mut path_key = |key: &str| -> Result<PathBuf> {
            match table.remove(key) {
                None => Err(config_err!("missing required key `{key}`")),
                Some(toml::Value::String(s)) => Ok(base.join(s)),
                Some(v) => Err(config_err!("key `{key}` must be a string, got {}", v.type_str())),
            }
        };
        let data = path_key("data")?;
        let schema = path_key("schema")?;
        let binarize_threshold = match table.remove("binarize_threshold") {
            None => None,
            Some(toml::Value::Float(x)) => Some(x),
            Some(toml::Value::Integer(x)) => Some(x as f64),
            Some(v) => return Err(config_err!("key `binarize_threshold` must be a number, got {}", v.type_str())),
        };
        let workers = match table.remove("workers") {
            None => 1,
            Some(toml::Value::Integer(x)) if x >= 1 => x as usize,
            Some(v) => return Err(config_err!("key `workers` must be a positive integer, got {v}")),
        };
        if table.contains_key("ablations") {
            return Err(config_err!("ablation flags are top-level keys, not an `ablations` table"));
        }
        let mut ablations = toml::Table::new();
        for key in ABLATION_KEYS {
            if let Some(v) = table.remove(key) {
                ablations.insert(key.to_string(), v);
            }
        }
        table.insert("ablations".into(), toml::Value::Table(ablations));
        let meta: MetaConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| config_err!("config: {}", e.message()))?;
        meta.validate()?;
        Ok(Self {
            data,
            schema,
            binarize_threshold,
            workers,
            meta,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }

    /// Every key with its effective value, ablations flattened to top level.
    pub fn resolved(&self) -> toml::Table {
        let mut t = toml::Table::new();
        t.insert("data".into(), self.data.display().to_string().into());
        t.insert("schema".into(), self.schema.display().to_string().into());
        if let Some(x) = self.binarize_threshold {
            t.insert("binarize_threshold".into(), x.into());
        }
        t.insert("workers".into(), (self.workers as i64).into());
        let meta = toml::Table::try_from(&self.meta).expect("config serializes");
        for (k, v) in meta {
            match (k.as_str(), v) {
                ("ablations", toml::Value::Table(ab)) => t.extend(ab),
                (_, v) => {
                    t.insert(k, v);
                }
            }
        }
        t
    }

    pub fn resolved_toml(&self) -> String {
        toml::to_string(&self.resolved()).expect("config serializes")
    }

    /// Hash of the resolved config without `workers`, followed by the
    /// active ablation flags.
    pub fn fingerprint(&self) -> String {
        let mut t = self.resolved();
        t.remove("workers");
        let digest = Sha256::digest(toml::to_string(&t).expect("config serializes").as_bytes());
        let mut fp = hex::encode(&digest[..8]);
        for a in self.meta.ablations.active() {
            fp.push('+');
            fp.push_str(a);
        }
        fp
    }

    /// Provenance line embedded in every text artifact.
    pub fn provenance(&self) -> String {
        format!(
            "emerg fingerprint={} seed={} config={}",
            self.fingerprint(),
            self.meta.seed,
            serde_json::to_string(&self.resolved()).expect("config serializes")
        )
    }
}

/// Loaded inputs of a run.
pub struct Workspace {
    pub config: RunConfig,
    pub table: InteractionTable,
    pub engine: Engine,
}

impl Workspace {
    pub fn open(config: RunConfig) -> Result<Self> {
        for (key, path) in [("data", &config.data), ("schema", &config.schema)] {
            if !path.is_file() {
                return Err(config_err!("key `{key}`: {} does not exist", path.display()));
            }
        }
        let schema = Arc::new(FeatureSchema::load(&config.schema, config.meta.embedding_dim)?);
        let opts = LoadOptions {
            binarize_threshold: config.binarize_threshold,
        };
        let table = InteractionTable::load(&config.data, schema.clone(), opts)?;
        let engine = Engine::new(schema, config.meta.clone())?;
        Ok(Self { config, table, engine })
    }

    pub fn plan(&self) -> Result<(Vec<u32>, PhasePlan)> {
        let split = split_items(&self.table, self.config.meta.threshold, self.config.meta.shots)?;
        let plan = build_phases(&self.table, &split)?;
        Ok((split.old.into_iter().collect(), plan))
    }

    /// θ from a checkpoint, verified against this run's schema and model.
    pub fn load_theta(&self, path: &Path) -> Result<ParamStore> {
        let (theta, _) = checkpoint::load(path)?;
        self.engine.check_theta(&theta)?;
        Ok(theta)
    }
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).map_err(|e| Error::io(path, e))?))
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub const CHECKPOINT_FILE: &str = "theta.ckpt";

#[derive(Debug, Clone)]
pub struct TrainOutputs {
    pub checkpoint: PathBuf,
    pub run_log: PathBuf,
    pub config: PathBuf,
}

/// Pretraining and meta-training on the old items.
pub fn cmd_train(ws: &Workspace, out: &Path) -> Result<TrainOutputs> {
    ensure_dir(out)?;
    let (old, _) = ws.plan()?;
    if old.is_empty() {
        return Err(config_err!(
            "no item has more than threshold = {} records",
            ws.config.meta.threshold
        ));
    }
    let (theta, pre, meta) = train(&ws.engine, &ws.table, &old)?;
    let outputs = TrainOutputs {
        checkpoint: out.join(CHECKPOINT_FILE),
        run_log: out.join("run_log.csv"),
        config: out.join("config.toml"),
    };
    let resolved = format!(
        "# fingerprint = {}\n{}",
        ws.config.fingerprint(),
        ws.config.resolved_toml()
    );
    checkpoint::save(&outputs.checkpoint, &theta, &resolved)?;
    let mut log = pre;
    log.extend(meta);
    let mut w = create(&outputs.run_log)?;
    write_run_log(&mut w, &log, &ws.config.provenance())?;
    w.flush().map_err(|e| Error::io(&outputs.run_log, e))?;
    write_text(&outputs.config, &resolved)?;
    Ok(outputs)
}

#[derive(Debug, Clone, Serialize)]
struct ItemMetrics {
    phase: String,
    auc: Option<f64>,
    f1: f64,
    n: usize,
}

#[derive(Debug, Clone, Serialize)]
struct ReportDoc<'a> {
    command: &'a str,
    fingerprint: String,
    seed: u64,
    config: toml::Table,
    #[serde(skip_serializing_if = "Option::is_none")]
    note: Option<String>,
    reports: &'a [MetricReport],
    items: BTreeMap<u32, Vec<ItemMetrics>>,
}

fn write_reports(
    ws: &Workspace,
    out: &Path,
    stem: &str,
    results: &BTreeMap<u32, Vec<PhaseResult>>,
    note: Option<String>,
) -> Result<Vec<MetricReport>> {
    ensure_dir(out)?;
    let cfg = &ws.config;
    let reports = pooled_reports(results, &cfg.fingerprint(), cfg.meta.seed)?;
    let mut comment = cfg.provenance();
    if let Some(n) = &note {
        comment = format!("{comment} note={n}");
    }
    let csv_path = out.join(format!("{stem}.csv"));
    let mut w = create(&csv_path)?;
    write_report_csv(&mut w, &reports, &comment)?;
    w.flush().map_err(|e| Error::io(&csv_path, e))?;
    let items = results
        .iter()
        .map(|(item, rs)| {
            let m = rs
                .iter()
                .map(|r| ItemMetrics {
                    phase: r.label.clone(),
                    auc: r.auc,
                    f1: r.f1,
                    n: r.scores.len(),
                })
                .collect();
            (*item, m)
        })
        .collect();
    let doc = ReportDoc {
        command: stem,
        fingerprint: cfg.fingerprint(),
        seed: cfg.meta.seed,
        config: cfg.resolved(),
        note,
        reports: &reports,
        items,
    };
    let json_path = out.join(format!("{stem}.json"));
    let mut w = create(&json_path)?;
    serde_json::to_writer_pretty(&mut w, &doc)?;
    writeln!(w).and_then(|_| w.flush()).map_err(|e| Error::io(&json_path, e))?;
    Ok(reports)
}

const NO_NEW_ITEMS: &str = "no new items: no item has between 3*shots and threshold records";

/// Cold start and warm-up phases for every new item. `phases` restricts the
/// report to the given labels.
pub fn cmd_eval(ws: &Workspace, theta: &ParamStore, out: &Path, phases: Option<&[String]>, export_phi: bool) -> Result<Vec<MetricReport>> {
    if let Some(ps) = phases {
        if let Some(bad) = ps.iter().find(|p| !PHASES.contains(&p.as_str())) {
            return Err(config_err!("unknown phase `{bad}` (cold | A | B | C)"));
        }
    }
    let (_, plan) = ws.plan()?;
    let stem = if phases.is_some() { "warmup_report" } else { "report" };
    if plan.items.is_empty() {
        return write_reports(ws, out, stem, &BTreeMap::new(), Some(NO_NEW_ITEMS.into()));
    }
    let mut results = evaluate_items(&ws.engine, theta, &ws.table, &plan, ws.config.workers)?;
    if let Some(ps) = phases {
        for rs in results.values_mut() {
            rs.retain(|r| ps.contains(&r.label));
        }
    }
    if export_phi {
        let path = out.join("phi.jsonl");
        ensure_dir(out)?;
        let mut w = create(&path)?;
        for (item, ph) in &plan.items {
            for (label, phi) in ws.engine.phase_phis(theta, &ws.table, *item, ph)? {
                let mut v = phi.to_json(*item);
                v["phase"] = label.into();
                v["fingerprint"] = ws.config.fingerprint().into();
                v["seed"] = ws.config.meta.seed.into();
                serde_json::to_writer(&mut w, &v)?;
                writeln!(w).map_err(|e| Error::io(&path, e))?;
            }
        }
        w.flush().map_err(|e| Error::io(&path, e))?;
    }
    write_reports(ws, out, stem, &results, None)
}

/// The sufficient-data sweep over cumulative extra-record counts. Items with
/// too few test records for the largest size are skipped and counted in the
/// report note.
pub fn cmd_common(ws: &Workspace, theta: &ParamStore, out: &Path, sizes: &[usize], finetune: bool) -> Result<Vec<MetricReport>> {
    if sizes.is_empty() {
        return Err(config_err!("common needs at least one size"));
    }
    let (_, plan) = ws.plan()?;
    let max = sizes.iter().copied().max().unwrap_or(0);
    let mut results = BTreeMap::new();
    let mut skipped = 0;
    for (item, ph) in &plan.items {
        if ph.test.len() <= max {
            skipped += 1;
            continue;
        }
        results.insert(*item, ws.engine.common_train(theta, &ws.table, *item, ph, sizes, finetune)?);
    }
    let note = if plan.items.is_empty() {
        Some(NO_NEW_ITEMS.to_string())
    } else if skipped > 0 {
        Some(format!("{skipped} items skipped: at most {max} test records"))
    } else {
        None
    };
    write_reports(ws, out, "common_report", &results, note)
}

/// Writes the cold-start adjacency stack of `item` and, with `warmup`, the
/// stacks after phases A, B and C.
pub fn cmd_export_graph(ws: &Workspace, theta: &ParamStore, out: &Path, item: u32, warmup: bool, full: bool) -> Result<Vec<PathBuf>> {
    let values = ws
        .table
        .item_values(item)
        .ok_or_else(|| Error::Lookup(format!("unknown item {item}")))?;
    let names = ws.engine.schema().names();
    let comment = ws.config.provenance();
    let phis = if warmup {
        let (_, plan) = ws.plan()?;
        let ph = plan
            .items
            .get(&item)
            .ok_or_else(|| Error::Lookup(format!("item {item} is not a new item with warm-up records")))?;
        ws.engine.phase_phis(theta, &ws.table, item, ph)?
    } else {
        vec![("cold".to_string(), ws.engine.cold_phi(theta, item, &values)?)]
    };
    let mut written = Vec::new();
    for (label, phi) in phis {
        let stack = ws.engine.stack(&phi)?;
        let stem = format!("item{item}_{label}");
        written.extend(export_adjacency(out, &stem, &names, &stack, full, Some(&comment))?);
    }
    Ok(written)
}

#[derive(Debug, Clone)]
pub struct OracleOptions {
    pub features: usize,
    pub layers: usize,
    pub patterns: usize,
    pub density: f64,
    pub seed: u64,
}

impl Default for OracleOptions {
    fn default() -> Self {
        Self {
            features: 4,
            layers: 3,
            patterns: 50,
            density: 0.5,
            seed: 0,
        }
    }
}

/// Degree tables for both modes on the fully connected pattern, then the
/// order check on random sparse patterns for every depth. Returns the table
/// text; a failed check is an error.
pub fn cmd_oracle(opts: &OracleOptions, out: Option<&Path>) -> Result<String> {
    if !(0.0..=1.0).contains(&opts.density) {
        return Err(config_err!("density = {} must lie in [0, 1]", opts.density));
    }
    let full = Pattern::full(opts.features);
    let mut text = String::from("mode,layers,layer,degrees,max_degree,history_degrees\n");
    let join = |v: &[u32]| v.iter().map(u32::to_string).collect::<Vec<_>>().join(" ");
    for mode in [Mode::Emerg, Mode::Residual] {
        for row in degree_table(opts.features, opts.layers, &full, mode)? {
            let name = if mode == Mode::Emerg { "emerg" } else { "residual" };
            text.push_str(&format!(
                "{name},{},{},{},{},{}\n",
                opts.layers,
                row.layer,
                join(&row.degrees),
                row.max_degree,
                join(&row.history_degrees)
            ));
        }
    }
    if let Some(dir) = out {
        ensure_dir(dir)?;
        let header = format!(
            "# emerg oracle features={} layers={} patterns={} density={} seed={}\n",
            opts.features, opts.layers, opts.patterns, opts.density, opts.seed
        );
        write_text(&dir.join("oracle.csv"), &format!("{header}{text}"))?;
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(opts.seed);
    for layers in 1..=opts.layers {
        let mut pats = vec![full.clone()];
        pats.extend((0..opts.patterns).map(|_| Pattern::random_symmetric(opts.features, opts.density, &mut rng)));
        for p in pats {
            if let (false, cx) = check_prop1(opts.features, layers, std::slice::from_ref(&p), Mode::Emerg)? {
                return Err(Error::Contract(format!("order check failed at depth {layers}: {cx:?}")));
            }
        }
    }
    Ok(text)
}

/// Writes `data.csv`, `schema.toml`, `pairs.json` and a ready-to-use
/// `run.toml` pointing at them.
pub fn cmd_synth(config: &SynthConfig, seed: u64, out: &Path) -> Result<Vec<PathBuf>> {
    ensure_dir(out)?;
    let (table, registry) = synth_generate(config, seed)?;
    let data = out.join("data.csv");
    let schema = out.join("schema.toml");
    let pairs = out.join("pairs.json");
    let run = out.join("run.toml");
    table.save(&data)?;
    write_text(&schema, &table.schema().to_toml())?;
    let doc = serde_json::json!({ "seed": seed, "config": config, "registry": registry });
    write_text(&pairs, &(serde_json::to_string_pretty(&doc)? + "\n"))?;
    write_text(
        &run,
        &format!(
            "data = \"data.csv\"\nschema = \"schema.toml\"\nembedding_dim = {}\nseed = {seed}\n",
            config.embedding_dim
        ),
    )?;
    Ok(vec![data, schema, pairs, run])
}

pub fn load_synth_config(path: Option<&Path>) -> Result<SynthConfig> {
    match path {
        None => Ok(SynthConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            toml::from_str(&text).map_err(|e| config_err!("synth config: {}", e.message()))
        }
    }
}

/// Exit status for an error: 1 for bad input, 2 for failures while running.
pub fn exit_code(e: &Error) -> i32 {
    if e.is_validation() {
        1
    } else {
        2
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(text: &str) -> Result<RunConfig> {
        RunConfig::parse(text, Path::new("/base"))
    }

    #[test]
    fn required_keys() {
        let e = parse("schema = \"s.toml\"").unwrap_err();
        assert!(e.to_string().contains("`data`"));
        let e = parse("data = \"d.csv\"").unwrap_err();
        assert!(e.to_string().contains("`schema`"));
    }

    #[test]
    fn unknown_key_rejected() {
        let e = parse("data = \"d\"\nschema = \"s\"\nmeta_lrr = 0.1").unwrap_err();
        assert!(matches!(e, Error::Config(_)));
        assert!(e.to_string().contains("meta_lrr"));
    }

    #[test]
    fn flat_keys_and_defaults() {
        let c = parse("data = \"d\"\nschema = \"s\"\ngamma = 0.3\nshared_graph = true\nop = \"sum\"").unwrap();
        assert_eq!(c.data, Path::new("/base/d"));
        assert_eq!(c.meta.gamma, 0.3);
        assert!(c.meta.ablations.shared_graph);
        assert_eq!(c.meta.op, crate::diffcore::EwiseOp::Sum);
        assert_eq!(c.workers, 1);
        assert_eq!(c.meta.meta_epochs, MetaConfig::default().meta_epochs);
    }

    #[test]
    fn resolved_round_trips() {
        let c = parse("data = \"d\"\nschema = \"s\"\nno_inner = true\nk_sparse = 10\nworkers = 3").unwrap();
        let again = RunConfig::parse(&c.resolved_toml(), Path::new("/elsewhere")).unwrap();
        assert_eq!(again, c);
    }

    #[test]
    fn fingerprint_echoes_ablations_and_ignores_workers() {
        let a = parse("data = \"d\"\nschema = \"s\"").unwrap();
        let b = parse("data = \"d\"\nschema = \"s\"\nworkers = 4").unwrap();
        let c = parse("data = \"d\"\nschema = \"s\"\nno_meta = true\nrandom_graph = true").unwrap();
        assert_eq!(a.fingerprint(), b.fingerprint());
        assert!(c.fingerprint().ends_with("+random_graph+no_meta"));
        assert_ne!(a.fingerprint()[..16], c.fingerprint()[..16]);
    }

    #[test]
    fn ablation_keys_complete() {
        let all = crate::metatrain::Ablations {
            random_graph: true,
            no_sparsify: true,
            no_mask: true,
            shared_graph: true,
            no_meta: true,
            no_inner: true,
        };
        assert_eq!(all.active(), ABLATION_KEYS);
    }

    #[test]
    fn nested_ablations_rejected() {
        assert!(parse("data = \"d\"\nschema = \"s\"\n[ablations]\nno_meta = true").is_err());
    }

    #[test]
    fn oracle_defaults() {
        let text = cmd_oracle(&OracleOptions::default(), None).unwrap();
        assert!(text.contains("emerg,3,3,4,4,1 2 3 4"));
        assert!(text.contains("residual,3,3,"));
        let res: Vec<&str> = text.lines().filter(|l| l.starts_with("residual")).collect();
        let maxes: Vec<&str> = res.iter().map(|l| l.split(',').nth(4).unwrap()).collect();
        assert_eq!(maxes, ["1", "2", "4", "8"]);
    }

    #[test]
    fn oracle_limits() {
        let o = OracleOptions {
            features: 9,
            ..OracleOptions::default()
        };
        assert!(matches!(cmd_oracle(&o, None), Err(Error::Config(_))));
    }
}
