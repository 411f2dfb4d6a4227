use std::fs;
use std::path::Path;

use npi_core::checkpoint::Checkpoint;
use npi_core::config::{ConfigFile, Resolver, Source};
use npi_core::connectome::{random_sc, three_node_sc, ScMatrix};
use npi_core::dataset::{Affine, DatasetSplit, WindowSpec};
use npi_core::ec::{matrix_to_csv, parse_matrix_csv, EcMode, EcTensor, EC_MAGIC};
use npi_core::granger::{gc_matrix, select_order};
use npi_core::jansen_rit::{simulate as run_sim, twin_windows, JrParams, PerturbationSpec, StateVar};
use npi_core::metrics::{report_csv, MetricsRow};
use npi_core::models::{Forecaster, ForecasterConfig, ModelKind};
use npi_core::npi::{infer_ec, PerturbationPairs};
use npi_core::plot::heatmap_svg;
use npi_core::series::TimeSeries;
use npi_core::training::{evaluate_raw, train_with, TrainConfig};
use npi_core::{Error, Result};

use crate::manifest::{default_path, Recorder};
use crate::{
    CliResult, Common, EvaluateArgs, ExportPlotArgs, GenScArgs, GrangerArgs, GroundTruthArgs,
    MakeDatasetArgs, ModelArgs, PerturbArgs, SimulateArgs, TrainArgs,
};

pub fn resolver(c: &Common) -> Result<Resolver> {
    let file = match &c.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    Ok(Resolver::new(file))
}

pub fn progress(c: &Common, msg: impl AsRef<str>) {
    if !c.quiet {
        eprintln!("{}", msg.as_ref());
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn finish(c: &Common, rec: Recorder, r: &Resolver, out: &Path, is_dir: bool) -> Result<()> {
    let path = c.manifest.clone().unwrap_or_else(|| default_path(out, is_dir));
    rec.finish(r, &path)?;
    Ok(())
}

/// Model constants from `jr.*` config keys, overridden by `--param`.
pub fn jr_params(r: &mut Resolver, cli: &[String]) -> Result<JrParams> {
    let mut p = JrParams::default();
    let mut sources = Vec::new();
    let file: Vec<(String, String)> = r
        .file()
        .with_prefix("jr.")
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect();
    for (k, v) in &file {
        p.set(k, v)?;
        sources.push((k.clone(), Source::File));
    }
    for kv in cli {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::invalid(format!("--param expects key=value, got {kv:?}")))?;
        p.set(k.trim(), v.trim())?;
        sources.push((k.trim().to_string(), Source::Cli));
    }
    p.validate()?;
    for (k, v) in p.entries() {
        let src = sources
            .iter()
            .rev()
            .find(|(s, _)| s == k)
            .map_or(Source::Default, |(_, src)| *src);
        r.record(&format!("jr.{k}"), v, src);
    }
    Ok(p)
}

pub fn gen_sc(c: &Common, a: &GenScArgs, args: &[String]) -> CliResult<()> {
    let mut r = resolver(c)?;
    let mut rec = Recorder::new("gen-sc", args);
    let sc = if a.three_node {
        r.record("topology", "three-node".into(), Source::Cli);
        three_node_sc()
    } else if let Some(v) = &a.random {
        let n: usize = v[0].parse().map_err(|_| Error::invalid(format!("bad region count {:?}", v[0])))?;
        let density: f64 = v[1].parse().map_err(|_| Error::invalid(format!("bad density {:?}", v[1])))?;
        let seed: u64 = v[2].parse().map_err(|_| Error::invalid(format!("bad seed {:?}", v[2])))?;
        r.record("topology", "random".into(), Source::Cli);
        r.record("regions", n.to_string(), Source::Cli);
        r.record("density", density.to_string(), Source::Cli);
        r.record("seed", seed.to_string(), Source::Cli);
        random_sc(n, density, seed)?
    } else {
        let path = a.load.as_ref().expect("argument group");
        rec.input(path);
        ScMatrix::load(path)?
    };
    write_text(&a.out, &sc.to_csv())?;
    rec.output(&a.out);
    progress(c, format!("wrote {} regions, {} edges to {}", sc.n(), sc.nonzero_count(), a.out.display()));
    finish(c, rec, &r, &a.out, false)?;
    Ok(())
}

fn parse_perturbation(text: &str, rows: usize) -> Result<PerturbationSpec> {
    let parts: Vec<&str> = text.split(':').collect();
    if !(3..=4).contains(&parts.len()) {
        return Err(Error::invalid(format!("--perturb expects region:step:delta[:variable], got {text:?}")));
    }
    let bad = |what: &str| Error::invalid(format!("--perturb {text:?}: bad {what}"));
    Ok(PerturbationSpec {
        region: parts[0].parse().map_err(|_| bad("region"))?,
        step_index: parts[1].parse().map_err(|_| bad("step"))?,
        magnitude: parts[2].parse().map_err(|_| bad("delta"))?,
        variable: match parts.get(3) {
            Some(v) => v.parse()?,
            None => StateVar::X(1),
        },
        window_len: rows,
    })
}

pub fn simulate(c: &Common, a: &SimulateArgs, args: &[String]) -> CliResult<()> {
    let mut r = resolver(c)?;
    let mut rec = Recorder::new("simulate", args);
    let params = jr_params(&mut r, &a.param)?;
    let steps = r.get("steps", a.steps, 9_000_000usize)?;
    let seed = r.get("seed", c.seed, 0u64)?;
    rec.input(&a.sc);
    let sc = ScMatrix::load(&a.sc)?;
    let rows = steps / params.downsample_factor;
    let perturbs = a
        .perturb
        .iter()
        .map(|p| parse_perturbation(p, rows))
        .collect::<Result<Vec<_>>>()?;
    for p in &perturbs {
        p.validate(sc.n())?;
    }
    r.record("perturb", a.perturb.join(" "), if a.perturb.is_empty() { Source::Default } else { Source::Cli });
    let ts = run_sim(&params, &sc, steps, seed, &perturbs)?;
    ts.save(&a.out)?;
    rec.output(&a.out);
    if let Some(csv) = &a.csv {
        write_text(csv, &ts.to_csv())?;
        rec.output(csv);
    }
    progress(c, format!("simulated {} samples x {} regions at {} Hz", ts.n_steps(), ts.n_channels(), ts.rate));
    finish(c, rec, &r, &a.out, false)?;
    Ok(())
}

pub fn make_dataset(c: &Common, a: &MakeDatasetArgs, args: &[String]) -> CliResult<()> {
    let mut r = resolver(c)?;
    let mut rec = Recorder::new("make-dataset", args);
    let spec = WindowSpec::parse(&r.get("spec", a.spec.clone(), "76:24:100".to_string())?)?;
    let frac = r.get("split", a.split, 0.7)?;
    let normalize = r.get("normalize", a.normalize, false)?;
    rec.input(&a.ts);
    let ts = TimeSeries::load(&a.ts)?;
    let split = DatasetSplit::build(&ts, &spec, frac, normalize)?;
    split.save(&a.out, &ts)?;
    rec.output(&a.out);
    progress(c, format!("{} training and {} validation windows", split.train.len(), split.val.len()));
    finish(c, rec, &r, &a.out, true)?;
    Ok(())
}

pub struct TrainSettings {
    pub kind: ModelKind,
    pub hidden: usize,
    pub layers: usize,
    pub kernel: usize,
    pub heads: usize,
    pub train: TrainConfig,
}

pub fn train_settings(r: &mut Resolver, m: &ModelArgs, seed: u64) -> Result<TrainSettings> {
    let kind: ModelKind = r.get("model", m.model.clone(), "cnn".to_string())?.parse()?;
    let defaults = TrainConfig::default();
    Ok(TrainSettings {
        kind,
        hidden: r.get("hidden", m.hidden, 128)?,
        layers: r.get("layers", m.layers, 2)?,
        kernel: r.get("kernel", m.kernel, 5)?,
        heads: r.get("heads", m.heads, 1)?,
        train: TrainConfig {
            lr0: r.get("lr", m.lr, defaults.lr0)?,
            batch_size: r.get("batch_size", m.batch_size, defaults.batch_size)?,
            max_epochs: r.get("epochs", m.epochs, defaults.max_epochs)?,
            early_stop: r.get("early_stop", m.early_stop, defaults.early_stop)?,
            seed,
            ..defaults
        },
    })
}

/// Trains one model and writes its checkpoint and loss curve.
pub fn fit_and_save(
    c: &Common,
    s: &TrainSettings,
    kind: ModelKind,
    hidden: usize,
    split: &DatasetSplit,
    ckpt: &Path,
    report: &Path,
) -> Result<Checkpoint> {
    let spec = split.meta.window;
    let cfg = ForecasterConfig {
        kind,
        hidden,
        n_channels: split.train.n_channels(),
        context_len: spec.context_len,
        horizon: spec.horizon,
        layers: s.layers,
        kernel: s.kernel,
        heads: s.heads,
        d_k: 0,
    };
    let model = Forecaster::new(cfg, s.train.seed)?;
    let label = format!("{kind}/{hidden}");
    let (best, rep) = train_with(model, &split.train, &split.val, &s.train, |e| {
        if e.epoch % 10 == 0 || e.epoch == 1 {
            progress(
                c,
                format!("{label} epoch {} train {:.4} val {:.4} lr {:e}", e.epoch, e.train_mse, e.val_mse, e.lr),
            );
        }
    })?;
    let val_raw = evaluate_raw(&best, &split.val, s.train.batch_size)?;
    let mut ck = Checkpoint::new(best);
    ck.metadata = serde_json::json!({
        "normalization": split.meta.normalization,
        "best_epoch": rep.best_epoch,
        "best_val_loss": rep.best_val_loss,
        "val_mse": val_raw,
        "seed": s.train.seed,
    });
    if let Some(dir) = ckpt.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    ck.save(ckpt)?;
    write_text(report, &rep.to_csv())?;
    progress(c, format!("{label} best epoch {} val {:.4}", rep.best_epoch, rep.best_val_loss));
    Ok(ck)
}

pub fn train(c: &Common, a: &TrainArgs, args: &[String]) -> CliResult<()> {
    let mut r = resolver(c)?;
    let mut rec = Recorder::new("train", args);
    let seed = r.get("seed", c.seed, 0u64)?;
    let s = train_settings(&mut r, &a.model, seed)?;
    rec.input(&a.data);
    let split = DatasetSplit::load(&a.data)?;
    let report = a.report.clone().unwrap_or_else(|| {
        let mut name = a.out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(".train.csv");
        a.out.with_file_name(name)
    });
    fit_and_save(c, &s, s.kind, s.hidden, &split, &a.out, &report)?;
    rec.output(&a.out);
    rec.output(&report);
    finish(c, rec, &r, &a.out, false)?;
    Ok(())
}

pub fn ground_truth(c: &Common, a: &GroundTruthArgs, args: &[String]) -> CliResult<()> {
    let mut r = resolver(c)?;
    let mut rec = Recorder::new("ground-truth-ec", args);
    let params = jr_params(&mut r, &a.param)?;
    let template = PerturbationSpec {
        magnitude: r.get("delta", a.delta, 0.1)?,
        step_index: r.get("step", a.step, 76)?,
        window_len: r.get("window", a.window, 100)?,
        ..PerturbationSpec::default()
    };
    let samples = r.get("samples", a.samples, 1000)?;
    let seed = r.get("seed", c.seed, 0u64)?;
    rec.input(&a.sc);
    let sc = ScMatrix::load(&a.sc)?;
    let twins = twin_windows(&params, &sc, samples, &template, seed)?;
    let ec = twins.ground_truth()?;
    ec.save(&a.out)?;
    rec.output(&a.out);
    if let Some(dir) = &a.pairs_out {
        PerturbationPairs::from_twins(&twins, template.step_index)?.save(dir)?;
        rec.output(dir);
    }
    progress(c, format!("ground truth from {samples} twin windows, horizon {}", ec.horizon()));
    finish(c, rec, &r, &a.out, false)?;
    Ok(())
}

pub fn normalization(ck: &Checkpoint) -> Result<Option<Affine>> {
    match ck.metadata.get("normalization") {
        None | Some(serde_json::Value::Null) => Ok(None),
        Some(v) => serde_json::from_value(v.clone())
            .map(Some)
            .map_err(|e| Error::invalid(format!("checkpoint normalization: {e}"))),
    }
}

pub fn perturb(c: &Common, a: &PerturbArgs, args: &[String]) -> CliResult<()> {
    let mut r = resolver(c)?;
    let mut rec = Recorder::new("perturb", args);
    let mode: EcMode = r.get("mode", a.mode.clone(), "generative".to_string())?.parse()?;
    rec.input(&a.ckpt);
    rec.input(&a.pairs);
    let ck = Checkpoint::load(&a.ckpt)?;
    let pairs = PerturbationPairs::load(&a.pairs)?;
    let pairs = match mode {
        EcMode::Generative => pairs,
        EcMode::Direct => {
            let len = pairs.context_len;
            let delta = r.get("direct_delta", a.delta, 0.1)?;
            let step = r.get("direct_step", a.step, len)?;
            PerturbationPairs::direct(pairs.clean, len, delta, step)?
        }
        EcMode::GroundTruth => {
            return Err(Error::invalid("perturb mode must be generative or direct").into());
        }
    };
    let ec = infer_ec(&ck.model, &pairs, normalization(&ck)?.as_ref())?;
    ec.save(&a.out)?;
    rec.output(&a.out);
    progress(c, format!("{mode} EC from {} windows", ec.n_samples));
    finish(c, rec, &r, &a.out, false)?;
    Ok(())
}

pub fn granger(c: &Common, a: &GrangerArgs, args: &[String]) -> CliResult<()> {
    let mut r = resolver(c)?;
    let mut rec = Recorder::new("granger", args);
    rec.input(&a.ts);
    let ts = TimeSeries::load(&a.ts)?;
    let p = match r.get_opt("order", a.order)? {
        Some(p) => p,
        None => select_order(&ts, r.get("maxlag", a.maxlag, 12)?)?,
    };
    r.record("selected_order", p.to_string(), Source::Default);
    let gc = gc_matrix(&ts, p)?;
    write_text(&a.out, &matrix_to_csv(ts.n_channels(), &gc))?;
    rec.output(&a.out);
    progress(c, format!("VAR({p}) Granger matrix written to {}", a.out.display()));
    finish(c, rec, &r, &a.out, false)?;
    Ok(())
}

pub fn evaluate(c: &Common, a: &EvaluateArgs, args: &[String]) -> CliResult<()> {
    let mut r = resolver(c)?;
    let mut rec = Recorder::new("evaluate", args);
    rec.input(&a.est);
    rec.input(&a.real);
    let est = EcTensor::load(&a.est)?;
    let real = EcTensor::load(&a.real)?;
    let label = r.get("label", a.label.clone(), est.mode.to_string())?;
    let hidden = r.get("hidden", a.hidden, 0usize)?;
    let mse = match (&a.ckpt, &a.data) {
        (Some(ck), Some(data)) => {
            rec.input(ck);
            rec.input(data);
            let ck = Checkpoint::load(ck)?;
            evaluate_raw(&ck.model, &DatasetSplit::load(data)?.val, 30)?
        }
        _ => f64::NAN,
    };
    let row = MetricsRow::from_ec(&label, hidden, mse, &est, &real)?;
    progress(c, format!("pooled EC correlation {:.4}", row.ec_correlation_pooled));
    write_text(&a.out, &report_csv(&[row]))?;
    rec.output(&a.out);
    finish(c, rec, &r, &a.out, false)?;
    Ok(())
}

pub fn export_plot(c: &Common, a: &ExportPlotArgs, args: &[String]) -> CliResult<()> {
    let mut r = resolver(c)?;
    let mut rec = Recorder::new("export-plot", args);
    rec.input(&a.input);
    let bytes = fs::read(&a.input).map_err(|e| Error::io(&a.input, e))?;
    let tstep = r.get_opt("tstep", a.tstep)?;
    let (n, values, default_title) = if bytes.starts_with(EC_MAGIC) {
        let ec = EcTensor::load(&a.input)?;
        let title = match tstep {
            Some(t) => format!("{} EC, step {t}", ec.mode),
            None => format!("{} EC, peak over horizon", ec.mode),
        };
        (ec.n(), ec.summary(tstep)?, title)
    } else {
        if tstep.is_some() {
            return Err(Error::invalid("--tstep applies to EC tensors only").into());
        }
        let text = String::from_utf8(bytes).map_err(|_| Error::format(&a.input, "neither NPIEC nor CSV"))?;
        let (n, values) = parse_matrix_csv(&text).map_err(|e| Error::format(&a.input, e.to_string()))?;
        (n, values, "connectivity matrix".to_string())
    };
    let title = r.get("title", a.title.clone(), default_title)?;
    let out = a.svg.as_ref().or(a.csv.as_ref()).expect("argument group").clone();
    if let Some(svg) = &a.svg {
        write_text(svg, &heatmap_svg(n, &values, None, &title)?)?;
        rec.output(svg);
    }
    if let Some(csv) = &a.csv {
        write_text(csv, &matrix_to_csv(n, &values))?;
        rec.output(csv);
    }
    finish(c, rec, &r, &out, false)?;
    Ok(())
}
