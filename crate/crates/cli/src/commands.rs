use std::path::{Path, PathBuf};

use ica_core::evaluation::{mcc, recovered_sources};
use ica_core::experiments::{self, Budget, FIG3_NS, FIG3_RATIOS, FIG4_NS};
use ica_core::flow::Checkpoint;
use ica_core::oracle::{exhaustive_lemma_scan, lemma_check, LemmaReport, ScanRow};
use ica_core::support::{generic_rank, ss_report, SsReport};
use ica_core::synthetic::{
    export_dataset, generate, import_dataset, variability_audit, verify_full_column_rank, verify_support, GenMode,
    VariabilityReport, SUPPORT_TAU,
};
use ica_core::training::fit;
use ica_core::{derive_seed, seeded_rng, Error, Result};
use rand_distr::{Distribution, Normal};
use serde::Serialize;
use serde_json::{json, Value};

use crate::config::{parse_inline_support, support_from_rows, Figure, RunConfig};

/// What every command knows besides its config.
pub struct Context {
    pub config: RunConfig,
    pub hash: String,
    pub out: PathBuf,
    pub fast: bool,
}

impl Context {
    fn write(&self, name: &str, contents: &str) -> Result<PathBuf> {
        let path = self.out.join(name);
        std::fs::write(&path, contents)?;
        Ok(path)
    }

    fn write_json<T: Serialize>(&self, name: &str, value: &T) -> Result<PathBuf> {
        self.write(name, &serde_json::to_string_pretty(value)?)
    }

    fn stamp(&self, mut v: Value) -> Value {
        if let Value::Object(map) = &mut v {
            map.insert("seed".into(), json!(self.config.seed));
            map.insert("config_hash".into(), json!(self.hash));
        }
        v
    }

    /// Writes `manifest.json` listing the produced files.
    pub fn manifest(&self, command: &str, files: &[PathBuf]) -> Result<()> {
        let names: Vec<String> = files
            .iter()
            .map(|p| p.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_default())
            .collect();
        let m = self.stamp(json!({
            "command": command,
            "fast": self.fast,
            "files": names,
            "config": self.config,
        }));
        self.write_json("manifest.json", &m)?;
        Ok(())
    }

    fn budget(&self) -> Budget {
        self.config
            .reproduce
            .budget
            .clone()
            .unwrap_or_else(|| if self.fast { Budget::fast() } else { Budget::full() })
    }
}

#[derive(Debug, Serialize)]
struct GenAudit {
    mode: GenMode,
    n: usize,
    m: usize,
    sparsity_required: bool,
    sparsity: SsReport,
    generic_rank: usize,
    empirical_support_matches: bool,
    full_column_rank: bool,
    variability: Option<VariabilityReport>,
}

fn probe_points(rows: usize, cols: usize, seed: u64) -> nalgebra::DMatrix<f64> {
    let mut rng = seeded_rng(seed);
    let normal = Normal::new(0.0, 1.5).expect("valid normal");
    nalgebra::DMatrix::from_fn(rows, cols, |_, _| normal.sample(&mut rng))
}

pub fn gen(ctx: &Context) -> Result<Vec<PathBuf>> {
    let seed = ctx.config.seed;
    let spec = ctx.config.generate.spec(seed)?;
    let sparsity_required = spec.mode != GenMode::Base;
    let sparsity = ss_report(&spec.support);
    if sparsity_required {
        spec.validate_assumptions()?;
    } else {
        log::info!("Base mode: structural sparsity all_hold={} (not required)", sparsity.all_hold);
    }
    let (ds, net) = generate(&spec)?;
    let probes = probe_points(10, spec.n(), derive_seed(seed, 0x7072));
    let empirical = verify_support(&net, &probes, SUPPORT_TAU)?;
    if empirical != spec.support {
        return Err(Error::AssumptionViolated("mixing Jacobian support differs from the prescribed support".into()));
    }
    if !verify_full_column_rank(&net, &probes)? {
        return Err(Error::RankDeficient("mixing Jacobian lost column rank at a probe point".into()));
    }
    let variability = if spec.n_d > 0 {
        let order = if spec.domains() > 2 * spec.n_d { 2 } else { 1 };
        let probe: Vec<f64> = probe_points(1, spec.n_d, derive_seed(seed, 0x7661)).iter().cloned().collect();
        let report = variability_audit(&spec, &probe, order)?;
        if !report.full_rank {
            return Err(Error::AssumptionViolated(format!(
                "variability: rank {} < {} at order {order}",
                report.rank, report.required
            )));
        }
        Some(report)
    } else {
        None
    };
    let audit = GenAudit {
        mode: spec.mode,
        n: spec.n(),
        m: spec.m(),
        sparsity_required,
        sparsity,
        generic_rank: generic_rank(&spec.support, seed),
        empirical_support_matches: true,
        full_column_rank: true,
        variability,
    };
    let data = ctx.out.join("data.csv");
    export_dataset(&ds, &data)?;
    let meta = ica_core::synthetic::metadata_path(&data);
    let audit = ctx.write_json("audit.json", &ctx.stamp(serde_json::to_value(&audit)?))?;
    Ok(vec![data, meta, audit])
}

pub fn check_support(ctx: &Context, inline: Option<&str>) -> Result<(Vec<PathBuf>, Value)> {
    let rows = match (inline, &ctx.config.support) {
        (Some(text), _) => parse_inline_support(text)?,
        (None, Some(rows)) => rows.clone(),
        (None, None) => return Err(Error::InvalidParameter("no support given (use --matrix or `support` in the config)".into())),
    };
    let support = support_from_rows(&rows)?;
    let report = ctx.stamp(serde_json::to_value(ss_report(&support))?);
    let path = ctx.write_json("ss_report.json", &report)?;
    Ok((vec![path], report))
}

fn require(path: &Option<PathBuf>, what: &str) -> Result<PathBuf> {
    path.clone()
        .ok_or_else(|| Error::InvalidParameter(format!("`{what}` path missing from the config")))
}

pub fn train(ctx: &Context) -> Result<Vec<PathBuf>> {
    let ds = import_dataset(&require(&ctx.config.dataset, "dataset")?)?;
    let mut cfg = ctx.config.train.clone();
    cfg.seed = ctx.config.seed;
    if ctx.fast {
        cfg.epochs = cfg.epochs.min(Budget::fast().epochs);
    }
    let fitted = fit(&cfg, &ds)?;
    let ckpt = ctx.out.join("checkpoint.json");
    Checkpoint::new(fitted.model, fitted.prior).save(&ckpt)?;
    let hist = ctx.write("history.csv", &fitted.history.to_csv())?;
    let report = ctx.write_json(
        "train_report.json",
        &ctx.stamp(json!({
            "epochs": cfg.epochs,
            "final_nll": fitted.history.nll.last(),
            "final_penalty": fitted.history.penalty.last(),
            "final_loss": fitted.history.loss.last(),
        })),
    )?;
    Ok(vec![ckpt, hist, report])
}

pub fn eval(ctx: &Context) -> Result<(Vec<PathBuf>, Value)> {
    let ds = import_dataset(&require(&ctx.config.dataset, "dataset")?)?;
    let ckpt = Checkpoint::load(&require(&ctx.config.checkpoint, "checkpoint")?)?;
    if ckpt.model.dim != ds.spec.m() || ckpt.model.sources != ds.spec.n() {
        return Err(Error::ShapeMismatch {
            expected: format!("model over m={} with n={}", ds.spec.m(), ds.spec.n()),
            found: format!("m={} with n={}", ckpt.model.dim, ckpt.model.sources),
        });
    }
    let est = recovered_sources(&ckpt.model, &ds.observations, ds.spec.n())?;
    let report = mcc(&ds.sources, &est)?;
    let value = ctx.stamp(json!({
        "mcc": report.mcc,
        "permutation": report.permutation,
        "per_pair": report.per_pair,
    }));
    let path = ctx.write_json("eval_report.json", &value)?;
    Ok((vec![path], value))
}

pub fn reproduce(ctx: &Context, figure: Figure) -> Result<Vec<PathBuf>> {
    let budget = ctx.budget();
    let seed = ctx.config.seed;
    let study = experiments::StudyConfig {
        seed,
        ..ctx.config.reproduce.study.clone()
    };
    let files = match figure {
        Figure::Fig3 => {
            let rows = experiments::fig3(&FIG3_NS, &FIG3_RATIOS, budget.trials, seed)?;
            vec![ctx.write("fig3.csv", &experiments::rate_csv(&rows))?]
        }
        Figure::Fig4 => {
            let rows = experiments::fig4(&FIG4_NS, budget.trials, seed)?;
            vec![ctx.write("fig4.csv", &experiments::per_source_csv(&rows))?]
        }
        Figure::Ablation | Figure::Reg => {
            let (runs, name) = if figure == Figure::Ablation {
                (experiments::ablation_runs(&study, &budget), "ablation")
            } else {
                (experiments::regularizer_runs(&study, &budget), "reg")
            };
            log::info!("{name}: {} training runs of {} epochs", runs.len(), budget.epochs);
            let records = experiments::run_all(&runs)?;
            let (runs_csv, summary_csv) = experiments::study_csv(&records);
            vec![
                ctx.write(&format!("{name}_runs.csv"), &runs_csv)?,
                ctx.write(&format!("{name}_summary.csv"), &summary_csv)?,
            ]
        }
    };
    Ok(files)
}

pub fn oracle(ctx: &Context) -> Result<(Vec<PathBuf>, Value)> {
    let oc = &ctx.config.oracle;
    let rows = exhaustive_lemma_scan(oc.n, oc.m_min..=oc.m_max)?;
    let mut csv = String::from(ScanRow::CSV_HEADER);
    for r in &rows {
        csv.push('\n');
        csv.push_str(&r.csv());
    }
    csv.push('\n');
    let mut reports: Vec<LemmaReport> = Vec::new();
    for rows in &oc.supports {
        reports.push(lemma_check(&support_from_rows(rows)?)?);
    }
    for r in &rows {
        for (f, _) in &r.examples {
            reports.push(lemma_check(f)?);
        }
    }
    let violations: u64 = rows.iter().map(|r| r.violations).sum();
    let summary = ctx.stamp(json!({
        "n": oc.n,
        "m_min": oc.m_min,
        "m_max": oc.m_max,
        "violations": violations,
        "scan": rows.iter().map(|r| json!({
            "n": r.n, "m": r.m, "total": r.total, "rank_deficient": r.rank_deficient,
            "ss_hold": r.ss_hold, "violations": r.violations,
        })).collect::<Vec<_>>(),
    }));
    let files = vec![
        ctx.write("lemma_scan.csv", &csv)?,
        ctx.write_json("lemma_reports.json", &reports)?,
        ctx.write_json("oracle_summary.json", &summary)?,
    ];
    Ok((files, summary))
}

/// Exit status for an error: 2 validation, 3 numerical, 4 I/O.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io(_) => 4,
        Error::Divergence { .. } | Error::NonFinite(_) | Error::Domain { .. } => 3,
        _ => 2,
    }
}

pub fn ensure_dir(p: &Path) -> Result<()> {
    std::fs::create_dir_all(p)?;
    Ok(())
}
