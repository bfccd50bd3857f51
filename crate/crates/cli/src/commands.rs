//! The subcommands, callable without going through argument parsing.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde_json::{json, Value};

use alignrec::align::{mmd_per_bandwidth, mmd_squared_value};
use alignrec::autograd::OpKind;
use alignrec::data::{load_dataset, save_fmat, synth_generate, write_mapping, write_synth, LoadedData, SynthData};
use alignrec::diagnostics::{gradcheck_suite, GroupReport, SuiteSpec};
use alignrec::eval::{evaluate, split_811, LossSummary, MetricsRecord, Split, SplitDataset};
use alignrec::gradcheck::GradCheckConfig;
use alignrec::model::{
    embeddings, encode_items_frozen, load_checkpoint, save_checkpoint, target_dim, Graph, ModelParams,
};
use alignrec::train::{train, TrainOutcome};
use alignrec::{Error, Result, Tensor};

use crate::config::RunConfig;

/// File names written under the output directory.
pub const CHECKPOINT_FILE: &str = "model.ckpt";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const SUMMARY_FILE: &str = "summary.json";
pub const CONFIG_FILE: &str = "config.txt";
pub const EMBEDDINGS_FILE: &str = "item_embeddings.fmat";

/// A loaded dataset with its split and training graph.
pub struct Prepared {
    pub loaded: LoadedData,
    pub split: SplitDataset,
    pub graph: Graph,
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    let (inter, vis, txt) = cfg.dataset_paths()?;
    let loaded = load_dataset(inter, vis, txt, cfg.kcore)?;
    let m = &loaded.mapping;
    target_dim(
        loaded.features.d_visual(),
        loaded.features.d_text(),
        cfg.train.hp.reduction,
    )?;
    let split = split_811(&m.per_user(), m.items(), cfg.train.seed)?;
    let graph = Graph::from_pairs(split.users, split.items, &split.train_pairs())?;
    Ok(Prepared { loaded, split, graph })
}

fn write_line(out: &mut dyn Write, line: &str) -> Result<()> {
    writeln!(out, "{line}")?;
    out.flush()?;
    Ok(())
}

fn create_out(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    Ok(())
}

/// Writes the resolved configuration to the log and the output directory.
pub fn echo_config(cfg: &RunConfig, log: &mut dyn Write, to_file: bool) -> Result<()> {
    let text = cfg.echo();
    write!(log, "# resolved configuration\n{text}")?;
    if to_file {
        create_out(&cfg.out)?;
        std::fs::write(cfg.out.join(CONFIG_FILE), &text)?;
    }
    Ok(())
}

/// Trains, streams metrics to `out` and to the metrics file, and saves the
/// best checkpoint and a run summary.
pub fn cmd_train(cfg: &RunConfig, tag_variant: bool, out: &mut dyn Write, log: &mut dyn Write) -> Result<TrainOutcome> {
    let mut tc = cfg.train.clone();
    tc.tag_variant = tag_variant;
    tc.validate()?;
    let prep = prepare(cfg)?;
    let feats = &prep.loaded.features;
    let d = target_dim(feats.d_visual(), feats.d_text(), tc.hp.reduction)?;
    writeln!(
        log,
        "# {} users, {} items, {} train / {} valid / {} test interactions, d = {d}",
        prep.split.users,
        prep.split.items,
        prep.split.train_count(),
        prep.split.valid.iter().map(Vec::len).sum::<usize>(),
        prep.split.test.iter().map(Vec::len).sum::<usize>(),
    )?;
    create_out(&cfg.out)?;
    write_mapping(
        File::create(cfg.out.join("users.tsv"))?,
        &prep.loaded.mapping.user_tokens,
    )?;
    write_mapping(
        File::create(cfg.out.join("items.tsv"))?,
        &prep.loaded.mapping.item_tokens,
    )?;
    let mut metrics = BufWriter::new(File::create(cfg.out.join(METRICS_FILE))?);
    let outcome = train(&prep.split, feats, &tc, |rec| {
        let line = rec.to_line();
        write_line(out, &line)?;
        writeln!(metrics, "{line}")?;
        Ok(())
    })?;
    metrics.flush()?;
    save_checkpoint(&cfg.out.join(CHECKPOINT_FILE), &outcome.best)?;
    let summary = json!({
        "variant": tc.variant.name(),
        "reduction": tc.hp.reduction,
        "d": d,
        "d_visual": feats.d_visual(),
        "d_text": feats.d_text(),
        "projection_params": outcome.best.projection_param_count(),
        "total_params": outcome.best.param_count(),
        "best_epoch": outcome.best_epoch,
        "epochs_run": outcome.epochs_run,
        "mean_epoch_ms": outcome.mean_epoch_ms,
    });
    std::fs::write(cfg.out.join(SUMMARY_FILE), format!("{summary}\n"))?;
    writeln!(log, "# summary {summary}")?;
    Ok(outcome)
}

fn load_matching(cfg: &RunConfig, prep: &Prepared) -> Result<(PathBuf, ModelParams)> {
    let path = cfg
        .checkpoint
        .clone()
        .ok_or_else(|| Error::Usage("`checkpoint` is required (flag --checkpoint or config key)".into()))?;
    let params = load_checkpoint(&path)?;
    let f = &prep.loaded.features;
    let want = (prep.split.users, prep.split.items, f.d_visual(), f.d_text());
    let have = (params.users(), params.items(), params.d_visual(), params.d_text());
    if want != have {
        return Err(Error::Dimension(format!(
            "checkpoint {} holds {} users x {} items with {}/{} visual/text inputs; dataset has {} x {} with {}/{}",
            path.display(),
            have.0,
            have.1,
            have.2,
            have.3,
            want.0,
            want.1,
            want.2,
            want.3
        )));
    }
    Ok((path, params))
}

/// Test-split metrics of a saved checkpoint.
pub fn cmd_evaluate(cfg: &RunConfig, out: &mut dyn Write) -> Result<MetricsRecord> {
    let prep = prepare(cfg)?;
    let (_, params) = load_matching(cfg, &prep)?;
    let hp = cfg.train.variant.apply(&cfg.train.hp);
    let (e_u, e_i) = embeddings(&params, &prep.loaded.features, &prep.graph, &hp, cfg.train.variant)?;
    let rec = MetricsRecord {
        epoch: 0,
        split: Split::Test,
        metrics: evaluate(&e_u, &e_i, &prep.split, Split::Test, &cfg.train.ks)?,
        losses: LossSummary::default(),
        wall_ms: 0,
        variant: None,
    };
    write_line(out, &rec.to_line())?;
    Ok(rec)
}

/// Runs the gradient-check suite; any failing group makes the result a
/// numerical error after the report has been written.
pub fn cmd_gradcheck(cfg: &RunConfig, fault: Option<OpKind>, out: &mut dyn Write) -> Result<Vec<GroupReport>> {
    let spec = SuiteSpec {
        branch_channels: 4,
        seed: cfg.train.seed,
        ..SuiteSpec::default()
    };
    let gc = GradCheckConfig {
        tol: 1e-4,
        h: 1e-6,
        fault,
        ..GradCheckConfig::default()
    };
    let groups = gradcheck_suite(&spec, &gc)?;
    for g in &groups {
        write_line(out, &g.to_json().to_string())?;
    }
    let failed: Vec<&str> = groups.iter().filter(|g| !g.report.passed()).map(|g| g.group).collect();
    let summary = json!({
        "passed": failed.is_empty(),
        "failed": failed,
        "max_rel_err": groups.iter().map(|g| g.report.max_rel_err()).fold(0.0, f64::max),
        "tol": gc.tol,
    });
    write_line(out, &summary.to_string())?;
    if !failed.is_empty() {
        return Err(Error::Numerical(format!(
            "gradient check failed for {}",
            failed.join(", ")
        )));
    }
    Ok(groups)
}

fn mean_cosine(a: &Tensor, b: &Tensor) -> f64 {
    let n = a.rows();
    let mut total = 0.0;
    for i in 0..n {
        let (x, y) = (a.row(i), b.row(i));
        let dot: f64 = x.iter().zip(y).map(|(p, q)| p * q).sum();
        let nx = x.iter().map(|p| p * p).sum::<f64>().sqrt();
        let ny = y.iter().map(|q| q * q).sum::<f64>().sqrt();
        total += dot / (nx * ny).max(1e-12);
    }
    total / n.max(1) as f64
}

fn mean_norm(a: &Tensor) -> f64 {
    let n = a.rows();
    (0..n)
        .map(|i| a.row(i).iter().map(|x| x * x).sum::<f64>().sqrt())
        .sum::<f64>()
        / n.max(1) as f64
}

/// Cross-modal alignment statistics of a checkpoint over every item; also
/// exports the fused item embeddings.
pub fn cmd_align_stats(cfg: &RunConfig, out: &mut dyn Write) -> Result<Value> {
    let variant = cfg.train.variant;
    if !(variant.uses_visual() && variant.uses_text()) {
        return Err(Error::Usage(format!(
            "align-stats needs both modalities; variant `{variant}` drops one"
        )));
    }
    let prep = prepare(cfg)?;
    let (_, params) = load_matching(cfg, &prep)?;
    let hp = variant.apply(&cfg.train.hp);
    let feats = &prep.loaded.features;
    let (h_v, h_t) = encode_items_frozen(&params, feats, &hp.dilations, variant)?;
    let (h_v, h_t) = (h_v.expect("visual encoded"), h_t.expect("text encoded"));
    let align = &cfg.train.hp.align;
    let per = mmd_per_bandwidth(&h_v, &h_t, &align.bandwidths)?;
    let mmd = mmd_squared_value(&h_v, &h_t, align)?;
    let (_, e_i) = embeddings(&params, feats, &prep.graph, &hp, variant)?;
    create_out(&cfg.out)?;
    let emb_path = cfg.out.join(EMBEDDINGS_FILE);
    save_fmat(&emb_path, &e_i)?;
    let report = json!({
        "items": h_v.rows(),
        "d": h_v.cols(),
        "mmd": mmd,
        "bandwidths": align.bandwidths,
        "mmd_per_bandwidth": per,
        "mean_cosine": mean_cosine(&h_v, &h_t),
        "mean_norm": [mean_norm(&h_v), mean_norm(&h_t)],
        "embeddings": emb_path.display().to_string(),
    });
    write_line(out, &report.to_string())?;
    Ok(report)
}

/// Writes a synthetic dataset and reports its size and density.
pub fn cmd_synth(cfg: &RunConfig, out: &mut dyn Write) -> Result<(SynthData, Value)> {
    let data = synth_generate(&cfg.synth)?;
    write_synth(&cfg.out, &data)?;
    let report = json!({
        "users": data.per_user.len(),
        "items": data.items(),
        "interactions": data.interactions(),
        "density": data.density(),
        "dir": cfg.out.display().to_string(),
    });
    write_line(out, &report.to_string())?;
    Ok((data, report))
}
