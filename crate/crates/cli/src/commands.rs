// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use mamba_lrp::eval::{
    conservation_scatter, faithfulness, mean_and_stderr, relevance_position_histogram, shuffled, xra, xra_chance,
    FaithfulnessSummary, PositionHistogram,
};
use mamba_lrp::heatmap::{render_html, render_text, token_labels};
use mamba_lrp::lrp::{GateMode, RuleConfig};
use mamba_lrp::methods::Method;
use mamba_lrp::model::{load_checkpoint, save_checkpoint, MambaModel, ModelConfig};
use mamba_lrp::par::Execution;
use mamba_lrp::rng::{derive_seed, streams};
use mamba_lrp::tasks::{generate_range, load_dataset, save_dataset, train, Example, TaskKind, TaskSpec, TrainConfig};
use mamba_lrp::{Error, Result};
use serde::Serialize;

use crate::args::*;

fn with_ext(prefix: &Path, ext: &str) -> PathBuf {
    let mut s = prefix.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn to_json(value: &impl Serialize) -> Result<String> {
    let mut s = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    s.push('\n');
    Ok(s)
}

/// Writes `<prefix>.txt` and `<prefix>.json` and echoes the table.
fn write_report(prefix: &Path, table: &str, record: &impl Serialize) -> Result<()> {
    write_file(&with_ext(prefix, "txt"), table)?;
    write_file(&with_ext(prefix, "json"), &to_json(record)?)?;
    print!("{table}");
    Ok(())
}

fn check_compatible(model: &MambaModel, data: &[Example]) -> Result<()> {
    let cfg = model.config();
    for (i, ex) in data.iter().enumerate() {
        if let Some(&t) = ex.tokens.iter().find(|&&t| t >= cfg.vocab_size) {
            return Err(Error::Config(format!(
                "example {i} has token {t} but the model vocabulary has {} entries",
                cfg.vocab_size
            )));
        }
        if ex.label >= cfg.num_classes {
            return Err(Error::Config(format!(
                "example {i} has label {} but the model has {} classes",
                ex.label, cfg.num_classes
            )));
        }
    }
    Ok(())
}

fn load_inputs(input: &EvalInput) -> Result<(MambaModel, Vec<Example>)> {
    let model = load_checkpoint(&input.checkpoint)?;
    let mut data = load_dataset(&input.data)?;
    if let Some(n) = input.limit {
        data.truncate(n);
    }
    if data.is_empty() {
        return Err(Error::Contract("dataset is empty".into()));
    }
    check_compatible(&model, &data)?;
    Ok((model, data))
}

fn method(name: &str, rules: &RuleArgs, baseline: &BaselineArgs, seed: u64, exec: Execution) -> Result<Method> {
    let spec = baseline.spec(seed, exec);
    spec.validate()?;
    Method::parse(name, &rules.rules(), &spec, seed)
}

pub fn gen_data(a: &GenDataArgs, exec: Execution) -> Result<()> {
    let mut spec = match a.task {
        TaskKind::KeywordSentiment => TaskSpec::keyword(a.seed),
        TaskKind::PasskeyNeedle => TaskSpec::passkey(a.seed),
        TaskKind::CopyPrevious => TaskSpec::copy(a.seed),
    };
    spec.vocab_size = a.vocab.unwrap_or(spec.vocab_size);
    spec.min_len = a.min_len.unwrap_or(spec.min_len);
    spec.max_len = a.max_len.unwrap_or(spec.max_len);
    spec.num_classes = a.classes.unwrap_or(spec.num_classes);
    spec.needle_width = a.needle_width.unwrap_or(spec.needle_width);
    spec.validate()?;
    let data = generate_range(&spec, a.start..a.start + a.n as u64, exec)?;
    save_dataset(&a.out, &data)?;
    println!("wrote {} {} examples to {}", data.len(), spec.kind, a.out.display());
    Ok(())
}

pub fn train_cmd(a: &TrainArgs, exec: Execution) -> Result<()> {
    let data = load_dataset(&a.data)?;
    if data.is_empty() {
        return Err(Error::Contract("dataset is empty".into()));
    }
    let max_token = data.iter().flat_map(|e| e.tokens.iter()).copied().max().unwrap_or(0);
    let max_label = data.iter().map(|e| e.label).max().unwrap_or(0);
    let config = ModelConfig {
        vocab_size: a.vocab.unwrap_or(max_token + 1),
        num_blocks: a.blocks,
        d_model: a.d_model,
        d_inner: a.d_inner,
        d_state: a.d_state,
        conv_width: a.conv_width,
        num_classes: a.classes.unwrap_or(max_label + 1),
        use_bias: !a.no_bias,
        use_d_skip: !a.no_d_skip,
    };
    config.validate()?;
    let model = MambaModel::new(config, derive_seed(a.seed, streams::INIT))?;
    check_compatible(&model, &data)?;
    let cfg = TrainConfig {
        learning_rate: a.lr,
        batch_size: a.batch,
        max_epochs: a.epochs,
        patience: a.patience,
        clip_norm: a.clip,
        weight_decay: a.weight_decay,
        val_fraction: a.val_fraction,
        seed: a.seed,
        execution: exec,
        ..TrainConfig::default()
    };
    let out = train(&model, &data, &cfg)?;
    save_checkpoint(&out.model, &a.out)?;
    for h in &out.history {
        println!(
            "epoch {:>3}  train_loss {:.6}  val_loss {:.6}  val_acc {:.4}",
            h.epoch, h.train_loss, h.val_loss, h.val_accuracy
        );
    }
    println!("best epoch {}; checkpoint written to {}", out.best_epoch, a.out.display());
    if let Some(path) = &a.history {
        write_file(path, &to_json(&out.history)?)?;
    }
    Ok(())
}

pub fn explain(a: &ExplainArgs, exec: Execution) -> Result<()> {
    let method = method(&a.method, &a.rules, &a.baseline, a.seed, exec)?;
    let model = load_checkpoint(&a.checkpoint)?;
    let tokens = match (&a.tokens, &a.data, a.index) {
        (Some(t), _, _) => t.clone(),
        (None, Some(path), Some(i)) => {
            let data = load_dataset(path)?;
            data.get(i)
                .ok_or_else(|| Error::Config(format!("index {i} out of range for {} examples", data.len())))?
                .tokens
                .clone()
        }
        _ => return Err(Error::Config("pass --tokens or --data with --index".into())),
    };
    let class = match a.class {
        Some(c) => c,
        None => model.predict(&tokens)?,
    };
    let map = method.attribute(&model, &tokens, class, 0)?;
    let labels = token_labels(&tokens);
    let title = format!("{} relevance for class {class}", map.method);
    write_file(&with_ext(&a.out, "json"), &to_json(&map)?)?;
    let text = render_text(&labels, &map.token_relevance);
    write_file(&with_ext(&a.out, "txt"), &text)?;
    write_file(&with_ext(&a.out, "html"), &render_html(&title, &labels, &map.token_relevance))?;
    println!("class {class}  output {:.6}  relevance sum {:.6}", map.output, map.total());
    print!("{text}");
    Ok(())
}

pub fn eval_conservation(a: &ConservationArgs, exec: Execution) -> Result<()> {
    let method = method(&a.method, &a.rules, &a.baseline, a.input.seed, exec)?;
    let (model, data) = load_inputs(&a.input)?;
    let tokens: Vec<Vec<usize>> = data.into_iter().map(|e| e.tokens).collect();
    let report = conservation_scatter(
        &tokens,
        |i, t| method.attribute(&model, t, model.predict(t)?, i as u64),
        exec,
    )?;
    let mut table = format!("method {}\n", method.name());
    table.push_str(&report.to_table());
    let _ = writeln!(table, "conserved(1e-4) {:.4}", report.conserved_fraction(1e-4));
    write_report(&a.input.out, &table, &report)
}

fn faithfulness_table(rows: &[(String, &FaithfulnessSummary)], reference: Option<&str>) -> String {
    let mut t = String::new();
    let _ = writeln!(
        t,
        "{:<28} {:>10} {:>9} {:>10} {:>9} {:>6}",
        "method", "dA_flip", "stderr", "dA_insert", "stderr", "n"
    );
    for (label, s) in rows {
        let flag = if Some(label.as_str()) == reference { " *" } else { "" };
        let _ = writeln!(
            t,
            "{:<28} {:>10.4} {:>9.4} {:>10.4} {:>9.4} {:>6}{flag}",
            label, s.delta_flip_mean, s.delta_flip_stderr, s.delta_insert_mean, s.delta_insert_stderr, s.examples
        );
    }
    t
}

fn ranked<'a>(mut rows: Vec<(String, &'a FaithfulnessSummary)>) -> Vec<(String, &'a FaithfulnessSummary)> {
    // Stable: equal scores keep their input order.
    rows.sort_by(|a, b| b.1.delta_flip_mean.total_cmp(&a.1.delta_flip_mean));
    rows
}

pub fn eval_faithfulness(a: &FaithfulnessArgs, exec: Execution) -> Result<()> {
    let methods = a
        .methods
        .iter()
        .map(|m| method(m, &a.rules, &a.baseline, a.input.seed, exec))
        .collect::<Result<Vec<_>>>()?;
    if methods.is_empty() {
        return Err(Error::Config("no methods given".into()));
    }
    let (model, data) = load_inputs(&a.input)?;
    let tokens: Vec<Vec<usize>> = data.into_iter().map(|e| e.tokens).collect();
    let summaries = methods
        .iter()
        .map(|m| faithfulness(&model, &tokens, m, a.steps, a.replacement, exec))
        .collect::<Result<Vec<_>>>()?;
    let rows = ranked(summaries.iter().map(|s| (s.method.clone(), s)).collect());
    let table = faithfulness_table(&rows, None);
    write_report(&a.input.out, &table, &summaries)
}

#[derive(Serialize)]
struct NeedleReport {
    method: String,
    examples: usize,
    k: usize,
    retrieval_accuracy: f64,
    xra: f64,
    xra_shuffled: f64,
    xra_chance: f64,
    hits: Vec<bool>,
    histogram: PositionHistogram,
}

pub fn needle(a: &NeedleArgs, exec: Execution) -> Result<()> {
    let method = method(&a.method, &a.rules, &a.baseline, a.input.seed, exec)?;
    let (model, data) = load_inputs(&a.input)?;
    if a.k == 0 {
        return Err(Error::Config("K must be at least 1".into()));
    }
    if let Some(i) = data.iter().position(|e| e.decisive.is_empty()) {
        return Err(Error::Config(format!("example {i} has no decisive span")));
    }
    let shuffle_seed = derive_seed(a.input.seed, streams::SHUFFLED_XRA);
    let per = mamba_lrp::par::try_map_indexed(data.len(), exec, |i| {
        let ex = &data[i];
        let pred = model.predict(&ex.tokens)?;
        let map = method.attribute(&model, &ex.tokens, pred, i as u64)?;
        let r = &map.token_relevance;
        let span = ex.decisive_span();
        let hit = xra(r, span.clone(), a.k)?;
        let shuffled_hit = xra(&shuffled(r, derive_seed(shuffle_seed, i as u64)), span.clone(), a.k)?;
        let chance = xra_chance(r.len(), span.len(), a.k);
        Ok((pred == ex.label, hit, shuffled_hit, chance, map.token_relevance))
    })?;
    let n = data.len() as f64;
    let mean = |f: &dyn Fn(&(bool, bool, bool, f64, Vec<f64>)) -> f64| per.iter().map(f).sum::<f64>() / n;
    let items: Vec<(usize, &[f64])> = per.iter().map(|p| (p.4.len() - 1, &p.4[..])).collect();
    let report = NeedleReport {
        method: method.name().to_string(),
        examples: data.len(),
        k: a.k,
        retrieval_accuracy: mean(&|p| p.0 as u8 as f64),
        xra: mean(&|p| p.1 as u8 as f64),
        xra_shuffled: mean(&|p| p.2 as u8 as f64),
        xra_chance: mean(&|p| p.3),
        hits: per.iter().map(|p| p.1).collect(),
        histogram: relevance_position_histogram(&items, a.top_k)?,
    };
    let mut t = String::new();
    let _ = writeln!(t, "method              {}", report.method);
    let _ = writeln!(t, "examples            {}", report.examples);
    let _ = writeln!(t, "retrieval_accuracy  {:.4}", report.retrieval_accuracy);
    let _ = writeln!(t, "xra@{:<15} {:.4}", report.k, report.xra);
    let _ = writeln!(t, "xra_shuffled        {:.4}", report.xra_shuffled);
    let _ = writeln!(t, "xra_chance          {:.4}", report.xra_chance);
    let _ = writeln!(t, "distance  fraction (top {} per example)", a.top_k);
    for (d, _) in report.histogram.counts.iter().enumerate().filter(|(_, &c)| c > 0) {
        let _ = writeln!(t, "{d:>8}  {:.4}", report.histogram.fraction_at(d));
    }
    write_report(&a.input.out, &t, &report)
}

/// Rule combinations evaluated by `ablate`, deduplicated, full set first.
pub fn ablation_grid(conv_gamma: f64) -> Vec<(String, RuleConfig)> {
    let full = RuleConfig::lrp0().with_gamma(mamba_lrp::lrp::LayerKind::Conv1d, conv_gamma);
    let with = |f: &dyn Fn(&mut RuleConfig)| {
        let mut r = full.clone();
        f(&mut r);
        r
    };
    let candidates = vec![
        ("full".to_string(), full.clone()),
        ("no-silu".into(), with(&|r| r.silu_detach = false)),
        ("no-ssm".into(), with(&|r| r.ssm_detach = false)),
        ("no-gate".into(), with(&|r| r.gate = GateMode::Off)),
        (
            "none".into(),
            with(&|r| {
                r.silu_detach = false;
                r.ssm_detach = false;
                r.gate = GateMode::Off;
            }),
        ),
        ("gate=half".into(), with(&|r| r.gate = GateMode::Half)),
        ("gate=detach-zb".into(), with(&|r| r.gate = GateMode::DetachGateZb)),
    ];
    let mut out: Vec<(String, RuleConfig)> = Vec::new();
    for (name, rules) in candidates {
        if !out.iter().any(|(_, r)| *r == rules) {
            out.push((name, rules));
        }
    }
    out
}

#[derive(Serialize)]
struct AblationRow<'a> {
    variant: &'a str,
    reference: bool,
    rules: &'a RuleConfig,
    summary: &'a FaithfulnessSummary,
}

pub fn ablate(a: &AblateArgs, exec: Execution) -> Result<()> {
    let grid = ablation_grid(a.conv_gamma);
    for (_, r) in &grid {
        r.validate()?;
    }
    let (model, data) = load_inputs(&a.input)?;
    let tokens: Vec<Vec<usize>> = data.into_iter().map(|e| e.tokens).collect();
    let summaries = grid
        .iter()
        .map(|(_, r)| faithfulness(&model, &tokens, &Method::MambaLrp(r.clone()), a.steps, a.replacement, exec))
        .collect::<Result<Vec<_>>>()?;
    let rows: Vec<(String, &FaithfulnessSummary)> = grid.iter().map(|(n, _)| n.clone()).zip(&summaries).collect();
    let mut table = faithfulness_table(&rows, Some("full"));
    table.push_str("* reference configuration\n");
    let full = summaries[0].scores.iter().map(|s| s.delta_flip).collect::<Vec<_>>();
    for ((name, _), s) in grid.iter().zip(&summaries).skip(1) {
        let diffs: Vec<f64> = full.iter().zip(&s.scores).map(|(f, v)| f - v.delta_flip).collect();
        let (m, se) = mean_and_stderr(&diffs);
        let _ = writeln!(table, "full - {name:<20} {m:>+10.4} {se:>9.4}");
    }
    let record: Vec<AblationRow> = grid
        .iter()
        .zip(&summaries)
        .map(|((name, rules), summary)| AblationRow {
            variant: name,
            reference: name == "full",
            rules,
            summary,
        })
        .collect();
    write_report(&a.input.out, &table, &record)
}
