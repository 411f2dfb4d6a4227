//! The full benchmark in one process: connectome, training series,
//! ground truth, Granger baseline and the model x hidden-size sweep.
//!
//! Output layout under `--out`:
//!
//! ```text
//! sc.csv  train.bin  dataset/  ground_truth.ec  pairs/  granger.csv
//! models/<kind>_<hidden>.npic  models/<kind>_<hidden>.train.csv
//! ec/<kind>_<hidden>.ec  report.csv  baseline.csv  manifest.json
//! ```

use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use npi_core::config::Source;
use npi_core::connectome::{random_sc, three_node_sc};
use npi_core::dataset::{DatasetSplit, WindowSpec};
use npi_core::ec::matrix_to_csv;
use npi_core::granger::{gc_matrix, select_order};
use npi_core::jansen_rit::{simulate, twin_windows, PerturbationSpec};
use npi_core::metrics::{ec_correlation, report_csv, MetricsRow};
use npi_core::models::ModelKind;
use npi_core::npi::{infer_ec, PerturbationPairs};
use npi_core::training::evaluate_raw;
use npi_core::{Error, Result};

use crate::commands::{fit_and_save, jr_params, progress, resolver, train_settings, write_text};
use crate::manifest::Recorder;
use crate::{CliResult, Common, ModelArgs, PipelineArgs};

fn parse_list<T: std::str::FromStr>(text: &str, what: &str) -> Result<Vec<T>> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse()
                .map_err(|_| Error::invalid(format!("bad {what} {s:?}")))
        })
        .collect()
}

pub fn run(c: &Common, a: &PipelineArgs, args: &[String]) -> CliResult<()> {
    let mut r = resolver(c)?;
    let mut rec = Recorder::new("pipeline", args);
    let seed = r.get("seed", c.seed, 0u64)?;
    r.record("desk", a.desk.to_string(), if a.desk { Source::Cli } else { Source::Default });
    let topology = r.get("topology", a.topology.clone(), "three-node".to_string())?;
    let points = r.get("points", a.points, if a.desk { 90_000 } else { 900_000 })?;
    let kinds: Vec<ModelKind> = parse_list(
        &r.get("models", a.models.clone(), "cnn,rnn,lstm,gru,transformer".to_string())?,
        "model",
    )?;
    let hidden: Vec<usize> = parse_list(&r.get("hidden_sizes", a.hidden_sizes.clone(), "8,32,128,512".to_string())?, "hidden size")?;
    let samples = r.get("samples", a.samples, 1000)?;
    let maxlag = r.get("maxlag", a.maxlag, 12)?;
    let jobs = r.get("jobs", a.jobs, 1usize)?.max(1);
    let window = WindowSpec::parse(&r.get("spec", None, "76:24:100".to_string())?)?;
    let split_frac = r.get("split", None, 0.7)?;
    let normalize = r.get("normalize", None, false)?;
    let delta = r.get("delta", None, 0.1)?;
    let params = jr_params(&mut r, &[])?;
    let model_args = ModelArgs {
        epochs: a.epochs,
        ..ModelArgs::default()
    };
    let settings = train_settings(&mut r, &model_args, seed)?;

    let out = &a.out;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let sc = match topology.as_str() {
        "three-node" => three_node_sc(),
        "random" => {
            let n = r.get("regions", a.regions, 10)?;
            let density = r.get("density", a.density, 0.3)?;
            random_sc(n, density, seed)?
        }
        other => return Err(Error::invalid(format!("unknown topology {other:?}")).into()),
    };
    let n = sc.n();
    write_text(&out.join("sc.csv"), &sc.to_csv())?;

    progress(c, format!("simulating {points} samples on {n} regions"));
    let ts = simulate(&params, &sc, points * params.downsample_factor, seed, &[])?;
    ts.save(out.join("train.bin"))?;
    let split = DatasetSplit::build(&ts, &window, split_frac, normalize)?;
    split.save(out.join("dataset"), &ts)?;

    progress(c, format!("ground truth from {samples} twin windows"));
    let template = PerturbationSpec {
        magnitude: delta,
        step_index: window.context_len,
        window_len: window.total_len,
        ..PerturbationSpec::default()
    };
    let twins = twin_windows(&params, &sc, samples, &template, seed + 1)?;
    let gt = twins.ground_truth()?;
    gt.save(out.join("ground_truth.ec"))?;
    let pairs = PerturbationPairs::from_twins(&twins, window.context_len)?;
    pairs.save(out.join("pairs"))?;
    drop(twins);

    let p = select_order(&ts, maxlag)?;
    let gc = gc_matrix(&ts, p)?;
    write_text(&out.join("granger.csv"), &matrix_to_csv(n, &gc))?;
    let pooled: Vec<f64> = (0..n * n).map(|i| gt.pooled_abs(i / n, i % n)).collect();
    let mut baseline = String::from("method,order,ec_correlation_pooled_abs\n");
    let gc_corr = ec_correlation(&gc, &pooled, n).unwrap_or(f64::NAN);
    let _ = writeln!(baseline, "granger,{p},{gc_corr}");
    write_text(&out.join("baseline.csv"), &baseline)?;
    progress(c, format!("granger VAR({p}) correlation with |ground truth| {gc_corr:.4}"));

    let grid: Vec<(ModelKind, usize)> = kinds
        .iter()
        .flat_map(|k| hidden.iter().map(move |h| (*k, *h)))
        .collect();
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<MetricsRow>>>> = Mutex::new((0..grid.len()).map(|_| None).collect());
    let norm = split.meta.normalization.clone();
    std::thread::scope(|scope| {
        for _ in 0..jobs.min(grid.len()) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                let Some(&(kind, h)) = grid.get(i) else { break };
                let name = format!("{kind}_{h}");
                let row = (|| {
                    let ck = fit_and_save(
                        c,
                        &settings,
                        kind,
                        h,
                        &split,
                        &out.join("models").join(format!("{name}.npic")),
                        &out.join("models").join(format!("{name}.train.csv")),
                    )?;
                    let ec = infer_ec(&ck.model, &pairs, norm.as_ref())?;
                    std::fs::create_dir_all(out.join("ec")).map_err(|e| Error::io(out.join("ec"), e))?;
                    ec.save(out.join("ec").join(format!("{name}.ec")))?;
                    let mse = evaluate_raw(&ck.model, &split.val, settings.train.batch_size)?;
                    MetricsRow::from_ec(&kind.to_string(), h, mse, &ec, &gt)
                })();
                if let Ok(m) = &row {
                    progress(c, format!("{name}: val mse {:.4}, EC correlation {:.4}", m.prediction_mse, m.ec_correlation_pooled));
                }
                results.lock().unwrap()[i] = Some(row);
            });
        }
    });
    let rows = results
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect::<Result<Vec<_>>>()?;
    write_text(&out.join("report.csv"), &report_csv(&rows))?;
    rec.output(out);
    crate::commands::finish(c, rec, &r, out, true)?;
    Ok(())
}
