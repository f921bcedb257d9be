//! One function per subcommand. Each reads a [`RunConfig`], writes its
//! artifacts under the configured paths, and prints a short summary.

use std::path::Path;
use std::sync::Arc;

use fxtutor_core::dsp::{read_wav, AudioBuffer, EffectKind};
use fxtutor_core::ensemble::{
    evaluate_system, sweep_stopping_tolerance, Engine, EvalPair, ModelSet, Policy, PolicyKind,
};
use fxtutor_core::metrics::MetricKind;
use fxtutor_core::models::SelectorKind;
use fxtutor_core::pipeline::{self, eval_pairs, write_report, Corpus, RunConfig};

use crate::CliError;

type Result<T> = std::result::Result<T, CliError>;

/// `--config` wins over `FXTUTOR_CONFIG` (clap resolves that); no path means defaults.
pub fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let cfg = match path {
        Some(p) => RunConfig::load(p).map_err(|e| CliError::Usage(format!("bad config: {e}")))?,
        None => RunConfig::default(),
    };
    cfg.validate().map_err(|e| CliError::Usage(format!("bad config: {e}")))?;
    Ok(cfg)
}

pub fn render_corpus(cfg: &RunConfig) -> Result<()> {
    let m = pipeline::render_corpus(cfg)?;
    let renders = m.render_offsets().last().copied().unwrap_or(0);
    println!(
        "rendered {} clips ({renders} files) to {} [config {}]",
        m.records.len(),
        cfg.paths.corpus.display(),
        cfg.hash()
    );
    Ok(())
}

pub fn train_params(cfg: &RunConfig, effects: &[EffectKind]) -> Result<()> {
    let effects = if effects.is_empty() { EffectKind::ALL.to_vec() } else { effects.to_vec() };
    let corpus = Corpus::load(cfg)?;
    let models = pipeline::train_params(cfg, &corpus, &effects, |e, r| {
        eprintln!("{e} epoch {:>3}  train {:.5}  val {:.5}", r.epoch, r.train_loss, r.val_loss);
    })?;
    let mut rows = Vec::new();
    for m in &models {
        let test = corpus.param_splits(cfg, m.effect)?.test;
        let row = pipeline::evaluate_param_model(cfg, &corpus, m, &test)?;
        println!(
            "{:<11} held-out {:>4} pairs  mssmae delta {:+.3} ({:+.1}%)",
            m.effect.name(),
            row.pairs,
            row.delta.mssmae,
            row.delta_pct.mssmae
        );
        rows.push(row);
    }
    let histories: Vec<_> = models.iter().map(|m| (m.effect, m.meta.history.clone())).collect();
    write_report(&cfg.paths.reports.join("train-params.json"), cfg, &histories)?;
    write_report(&cfg.paths.reports.join("params.json"), cfg, &rows)?;
    Ok(())
}

pub fn train_selector(cfg: &RunConfig, kinds: &[SelectorKind]) -> Result<()> {
    let kinds = if kinds.is_empty() { SelectorKind::ALL.to_vec() } else { kinds.to_vec() };
    let corpus = Corpus::load(cfg)?;
    let models = pipeline::train_selectors(cfg, &corpus, &kinds, |k, r| {
        eprintln!("{k} epoch {:>3}  train {:.5}  val {:.5}", r.epoch, r.train_loss, r.val_loss);
    })?;
    for m in &models {
        let acc = pipeline::selector_accuracy(cfg, &corpus, m)?;
        println!(
            "{:<15} accuracy exact {:.3} admissible {:.3}",
            m.kind.name(),
            acc.exact_all,
            acc.admissible_all
        );
        write_report(&cfg.paths.reports.join(format!("selector-{}.json", m.kind)), cfg, &acc)?;
    }
    Ok(())
}

fn engine(cfg: &RunConfig) -> Result<Engine> {
    let models = ModelSet::load(&cfg.paths.checkpoints)?;
    if models.feature_config() != &cfg.features {
        return Err(CliError::Usage(format!(
            "checkpoints in {} use a different feature config",
            cfg.paths.checkpoints.display()
        )));
    }
    Ok(Engine::new(Arc::new(models), cfg.corpus.sample_rate, cfg.mssmae.clone())?)
}

/// `total` pairs spread as evenly as possible over chain lengths 1..=5.
fn balanced_pairs(cfg: &RunConfig, total: Option<usize>) -> Result<Vec<EvalPair>> {
    let Some(total) = total else {
        return Ok(eval_pairs(cfg, cfg.eval.pairs_per_length)?);
    };
    let per = total.div_ceil(5).max(1);
    let all = eval_pairs(cfg, per)?;
    let mut order: Vec<(usize, usize)> = Vec::new();
    let mut seen = [0usize; 6];
    for (i, p) in all.iter().enumerate() {
        let len = p.chain.len();
        order.push((seen[len], i));
        seen[len] += 1;
    }
    order.sort();
    let mut keep: Vec<usize> = order.into_iter().take(total).map(|(_, i)| i).collect();
    keep.sort();
    Ok(keep.into_iter().map(|i| all[i].clone()).collect())
}

pub fn evaluate(cfg: &RunConfig, policy: PolicyKind, pairs: Option<usize>) -> Result<()> {
    let engine = engine(cfg)?;
    let pairs = balanced_pairs(cfg, pairs)?;
    let report = evaluate_system(&engine, Policy::new(policy, cfg.eval.seed), &pairs, &cfg.eval.stop, cfg.mode())?;
    print!("{}", report.table());
    let path = cfg.paths.reports.join(format!("eval-{policy}.json"));
    write_report(&path, cfg, &report)?;
    println!("wrote {}", path.display());
    Ok(())
}

pub fn sweep_stop(cfg: &RunConfig, policy: PolicyKind, metric: Option<MetricKind>, pairs: Option<usize>) -> Result<()> {
    let engine = engine(cfg)?;
    let pairs = balanced_pairs(cfg, pairs)?;
    let metric = metric.unwrap_or(cfg.eval.stop.mistake_metric);
    let sweep = sweep_stopping_tolerance(
        &engine,
        Policy::new(policy, cfg.eval.seed),
        &pairs,
        metric,
        &cfg.eval.tolerances,
        cfg.mode(),
    )?;
    println!("tolerance  mean {metric} delta  mean steps");
    for p in &sweep.points {
        println!("{:>9}  {:>16.4}  {:>10.2}", p.tolerance, p.delta, p.mean_steps);
    }
    let json = cfg.paths.reports.join(format!("sweep-{policy}.json"));
    write_report(&json, cfg, &sweep)?;
    std::fs::write(cfg.paths.reports.join(format!("sweep-{policy}.csv")), sweep.to_csv())?;
    println!("wrote {}", json.display());
    Ok(())
}

/// Zero-pads the shorter buffer, then pads both up to the models' clip length.
pub fn fit_pair(engine: &Engine, input: AudioBuffer, target: AudioBuffer) -> std::result::Result<(AudioBuffer, AudioBuffer), String> {
    if input.sample_rate != target.sample_rate {
        return Err(format!(
            "sample rates differ: input {} Hz, target {} Hz",
            input.sample_rate, target.sample_rate
        ));
    }
    let range = engine.clip_lengths();
    let len = input.len().max(target.len()).max(*range.start());
    if len > *range.end() {
        return Err(format!(
            "clips longer than {} samples are not supported by these models",
            range.end()
        ));
    }
    Ok((input.padded_to(len), target.padded_to(len)))
}

pub fn run(cfg: &RunConfig, input: &Path, target: &Path, policy: PolicyKind) -> Result<()> {
    let engine = engine(cfg)?;
    let (a, b) = (read_wav(input)?, read_wav(target)?);
    let (a, b) = fit_pair(&engine, a, b).map_err(CliError::Usage)?;
    let state = engine.run_session(a, b, Policy::new(policy, cfg.eval.seed), &cfg.eval.stop, None)?;
    println!("initial  mssmae {:.3}  lsd {:.3}", state.initial.mssmae, state.initial.lsd);
    let mut prev = state.initial;
    for (i, c) in state.committed.iter().enumerate() {
        let d = c.report.delta(&prev);
        let params: Vec<String> = c
            .step
            .effect
            .param_names()
            .iter()
            .zip(&c.step.continuous)
            .map(|(n, v)| format!("{n}={v:.3}"))
            .chain(c.step.categorical.map(|m| format!("mode={m}")))
            .collect();
        println!(
            "step {}  {:<11} {}  mssmae {:+.3}  lsd {:+.3}  mfccd {:+.3}{}",
            i + 1,
            c.step.effect.name(),
            params.join(" "),
            d.mssmae,
            d.lsd,
            d.mfccd,
            match (c.is_mistake, i + 1 > state.kept_steps()) {
                (true, true) => "  (worse, stopped here and not kept)",
                (true, false) => "  (worse)",
                _ => "",
            }
        );
        prev = c.report;
    }
    let f = state.final_report();
    println!("final    mssmae {:.3}  lsd {:.3}", f.mssmae, f.lsd);
    println!("status {:?} after {} steps, {} kept", state.status, state.committed.len(), state.kept_steps());
    Ok(())
}
