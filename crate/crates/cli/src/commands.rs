use std::path::Path;

use log::{info, warn};

use ahstn::checkpoint;
use ahstn::data::{
    assignment_quality, generate_synthetic, load_labels, load_series, save_labels, save_series, write_assignment_csv,
    RawSeries,
};
use ahstn::diffcore::Tensor;
use ahstn::graph::{read_edge_list, write_edge_list, GraphSpec};
use ahstn::hierarchy::cluster_count;
use ahstn::model::Model;
use ahstn::training::{
    self, evaluate, horizon_report, last_value_forecast, make_windows, split_sizes, HistoricalAverage, Normalizer,
    PreparedData, WindowedDataset,
};

use crate::output::{history_csv, prepare_out, write, CliError, CliResult, Manifest, ReportTable};
use crate::run_config::{require_file, resolve_synthetic, RunConfig};
use crate::Shared;

const EVAL_BATCH: usize = 64;

struct Dataset {
    series: RawSeries,
    graph: GraphSpec<f64>,
    labels: Option<Vec<usize>>,
}

fn load_dataset(cfg: &RunConfig) -> CliResult<Dataset> {
    let series = load_series(cfg.require_series()?)?;
    let edges = cfg
        .edges
        .as_deref()
        .ok_or_else(|| CliError::Usage("no edge list given ([data] edges)".into()))?;
    require_file(edges)?;
    let graph = read_edge_list(edges, series.n_nodes())?;
    let labels = match cfg.labels.as_deref() {
        Some(p) => {
            require_file(p)?;
            let labels = load_labels(p)?;
            if labels.len() != series.n_nodes() {
                return Err(CliError::Usage(format!(
                    "{} labels for {} nodes",
                    labels.len(),
                    series.n_nodes()
                )));
            }
            Some(labels)
        }
        None => None,
    };
    Ok(Dataset { series, graph, labels })
}

fn opt(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".into(), |x| format!("{x}"))
}

pub fn synth(shared: &Shared) -> CliResult {
    let spec = resolve_synthetic(shared)?;
    let out = prepare_out(&shared.out, shared.force)?;
    let data = generate_synthetic(&spec)?;
    save_series(&out.join("series.csv"), &data.series)?;
    write_edge_list(&out.join("edges.csv"), &data.graph)?;
    save_labels(&out.join("labels.csv"), &data.labels)?;

    let mut m = Manifest::new("synth");
    let spec_pairs = spec.pairs();
    let pairs: Vec<(&str, String)> = spec_pairs.iter().map(|(k, v)| (k.as_str(), v.clone())).collect();
    m.section("synthetic", &pairs);
    m.section(
        "result",
        &[
            ("nodes", data.series.n_nodes().to_string()),
            ("length", data.series.len().to_string()),
            ("missing_fraction", data.series.missing_fraction().to_string()),
            ("outputs", "series.csv,edges.csv,labels.csv".into()),
        ],
    );
    m.save(&out)?;
    println!(
        "wrote {} nodes x {} steps to {}",
        data.series.n_nodes(),
        data.series.len(),
        out.display()
    );
    Ok(())
}

fn baseline_rows(table: &mut ReportTable, series: &RawSeries, prep: &PreparedData, split: &str, ds: &WindowedDataset, steps: &[usize]) -> CliResult {
    let ha = HistoricalAverage::fit(series, prep.bounds[0], prep.bounds[1])?;
    let h = ds.horizon();
    table.push("ha", split, &horizon_report(&ha.predict(ds), ds.targets(), ds.masks(), h, steps));
    let lv = last_value_forecast(ds, &prep.normalizer);
    table.push("last-value", split, &horizon_report(&lv, ds.targets(), ds.masks(), h, steps));
    Ok(())
}

pub fn train(shared: &Shared) -> CliResult {
    let cfg = RunConfig::resolve(shared)?;
    let data = load_dataset(&cfg)?;
    let out = prepare_out(&shared.out, shared.force)?;
    let prep = make_windows(&data.series, cfg.model.input_steps, cfg.model.horizon, &cfg.training.ratios)?;
    let mut model = Model::<f64>::new(cfg.model.clone(), data.graph.clone())?;
    info!(
        "training {} ({} parameters) on {}/{}/{} windows",
        model.variant(),
        model.params().total_count(),
        prep.train.len(),
        prep.val.len(),
        prep.test.len()
    );
    let outcome = training::train(&mut model, &prep, &cfg.training)?;
    checkpoint::save(&out.join("model.ckpt"), &model, &prep.normalizer)?;
    let steps = &cfg.training.report_steps;
    write(&out.join("history.csv"), &history_csv(&outcome.history, steps))?;

    let mut table = ReportTable::new(steps);
    let mut test_mae = None;
    for (split, ds) in [("val", &prep.val), ("test", &prep.test)] {
        if ds.is_empty() {
            warn!("{split} split has no windows; skipping it in the report");
            continue;
        }
        let ev = evaluate(&model, ds, &prep.normalizer, steps, EVAL_BATCH)?;
        table.push("ahstn", split, &ev.report);
        if shared.with_baselines {
            baseline_rows(&mut table, &data.series, &prep, split, ds, steps)?;
        }
        if split == "test" {
            test_mae = ev.report.average.mae;
        }
    }
    write(&out.join("report.csv"), table.text())?;

    let mut purity = None;
    if let Some(a) = model.assignment() {
        write_assignment_csv(&out.join("assignment.csv"), a.matrix())?;
        if let Some(labels) = &data.labels {
            purity = Some(assignment_quality(a.matrix(), labels)?);
        }
    }

    let mut m = Manifest::new("train");
    m.config(&cfg.render());
    let census: Vec<String> = model.parameter_census().iter().map(|r| format!("{}:{}", r.name, r.count)).collect();
    m.section(
        "result",
        &[
            ("parameters", model.params().total_count().to_string()),
            ("census", census.join(" ")),
            ("clusters", model.n_clusters().map_or("none".into(), |k| k.to_string())),
            ("normalizer_mean", prep.normalizer.mean.to_string()),
            ("normalizer_std", prep.normalizer.std.to_string()),
            ("best_epoch", outcome.best_epoch.map_or("none".into(), |e| e.to_string())),
            ("best_val_mae", opt(outcome.best_val_mae)),
            ("test_mae", opt(test_mae)),
            ("purity", opt(purity)),
        ],
    );
    m.save(&out)?;
    println!("test MAE {}  purity {}", opt(test_mae), opt(purity));
    Ok(())
}

/// Windows of one chronological split under a fixed normalizer.
fn split_windows(series: &RawSeries, model: &Model<f64>, cfg: &RunConfig, norm: &Normalizer, split: &str) -> CliResult<(WindowedDataset, [usize; 4])> {
    cfg.training.ratios.validate()?;
    let len = series.len();
    let (a, b, _) = split_sizes(len, &cfg.training.ratios);
    let bounds = [0, a, a + b, len];
    let (lo, hi) = match split {
        "train" => (bounds[0], bounds[1]),
        "val" => (bounds[1], bounds[2]),
        "test" => (bounds[2], bounds[3]),
        other => return Err(CliError::Usage(format!("unknown split '{other}' (expected train, val or test)"))),
    };
    let mc = model.config();
    Ok((WindowedDataset::from_segment(series, lo, hi, mc.input_steps, mc.horizon, norm), bounds))
}

pub fn evaluate_cmd(shared: &Shared, ckpt: &Path, series: Option<&Path>, split: &str) -> CliResult {
    let cfg = RunConfig::resolve(shared)?;
    require_file(ckpt)?;
    let series_path = match series {
        Some(p) => {
            require_file(p)?;
            p
        }
        None => cfg.require_series()?,
    };
    let raw = load_series(series_path)?;
    let (model, norm) = checkpoint::load::<f64>(ckpt)?;
    if raw.n_nodes() != model.n_nodes() {
        return Err(CliError::Usage(format!(
            "series has {} nodes but the checkpoint was trained on {}",
            raw.n_nodes(),
            model.n_nodes()
        )));
    }
    let (ds, bounds) = split_windows(&raw, &model, &cfg, &norm, split)?;
    let out = prepare_out(&shared.out, shared.force)?;
    let steps = &cfg.training.report_steps;
    let ev = evaluate(&model, &ds, &norm, steps, EVAL_BATCH)?;
    let mut table = ReportTable::new(steps);
    table.push("ahstn", split, &ev.report);
    if shared.with_baselines {
        let ha = HistoricalAverage::fit(&raw, bounds[0], bounds[1])?;
        let h = ds.horizon();
        table.push("ha", split, &horizon_report(&ha.predict(&ds), ds.targets(), ds.masks(), h, steps));
        let lv = last_value_forecast(&ds, &norm);
        table.push("last-value", split, &horizon_report(&lv, ds.targets(), ds.masks(), h, steps));
    }
    write(&out.join("report.csv"), table.text())?;

    let mut m = Manifest::new("evaluate");
    m.config(&cfg.render());
    m.section(
        "inputs",
        &[
            ("checkpoint", ckpt.display().to_string()),
            ("series", series_path.display().to_string()),
            ("split", split.to_string()),
            ("windows", ds.len().to_string()),
        ],
    );
    m.section("result", &[("mae", opt(ev.report.average.mae))]);
    m.save(&out)?;
    println!("{split} MAE {}", opt(ev.report.average.mae));
    Ok(())
}


pub fn predict(shared: &Shared, ckpt: &Path, input: &Path) -> CliResult {
    require_file(ckpt)?;
    require_file(input)?;
    let (model, norm) = checkpoint::load::<f64>(ckpt)?;
    let window = load_series(input)?;
    let (n, t, h) = (model.n_nodes(), model.config().input_steps, model.config().horizon);
    if window.n_nodes() != n {
        return Err(CliError::Usage(format!("input has {} nodes, checkpoint expects {n}", window.n_nodes())));
    }
    if window.len() != t {
        return Err(CliError::Usage(format!("input has {} rows, the model needs exactly {t}", window.len())));
    }
    let out = prepare_out(&shared.out, shared.force)?;
    let mut x = Vec::with_capacity(n * t);
    let mut blind = Vec::new();
    for i in 0..n {
        x.extend((0..t).map(|k| window.get(i, k).map_or(0.0, |v| norm.normalize(v))));
        if (0..t).all(|k| !window.is_observed(i, k)) {
            blind.push(i);
        }
    }
    let y = model.predict(&Tensor::new([1, n, t, 1], x)?)?;

    let mut text = String::from("node");
    for j in 1..=h {
        text.push_str(&format!(",h{j}"));
    }
    if !blind.is_empty() {
        text.push_str(",warning");
        warn!("{} node(s) have no observed input; their forecasts are flagged", blind.len());
    }
    text.push('\n');
    for i in 0..n {
        text.push_str(&i.to_string());
        for j in 0..h {
            text.push_str(&format!(",{}", norm.denormalize(y.data()[i * h + j])));
        }
        if !blind.is_empty() {
            text.push_str(if blind.contains(&i) { ",no_observed_input" } else { "," });
        }
        text.push('\n');
    }
    write(&out.join("forecast.csv"), &text)?;

    let mut m = Manifest::new("predict");
    m.section(
        "inputs",
        &[
            ("checkpoint", ckpt.display().to_string()),
            ("input", input.display().to_string()),
        ],
    );
    m.section(
        "result",
        &[
            ("nodes", n.to_string()),
            ("horizon", h.to_string()),
            ("flagged_nodes", format!("{blind:?}")),
        ],
    );
    m.save(&out)?;
    println!("wrote {n} x {h} forecast to {}", out.join("forecast.csv").display());
    Ok(())
}

pub fn inspect_clusters(shared: &Shared, ckpt: &Path, labels: Option<&Path>) -> CliResult {
    require_file(ckpt)?;
    let (model, _) = checkpoint::load::<f64>(ckpt)?;
    let a = model
        .assignment()
        .ok_or_else(|| CliError::Usage(format!("checkpoint uses the {} variant, which has no clusters", model.variant())))?;
    let purity = match labels {
        Some(p) => {
            require_file(p)?;
            let l = load_labels(p)?;
            if l.len() != model.n_nodes() {
                return Err(CliError::Usage(format!("{} labels for {} nodes", l.len(), model.n_nodes())));
            }
            Some(assignment_quality(a.matrix(), &l)?)
        }
        None => None,
    };
    let out = prepare_out(&shared.out, shared.force)?;
    write_assignment_csv(&out.join("clusters.csv"), a.matrix())?;
    let mut m = Manifest::new("inspect-clusters");
    m.section(
        "result",
        &[
            ("checkpoint", ckpt.display().to_string()),
            ("clusters", a.n_clusters().to_string()),
            ("frozen", a.is_frozen().to_string()),
            ("purity", opt(purity)),
        ],
    );
    m.save(&out)?;
    println!("{} nodes in {} clusters, purity {}", a.n_nodes(), a.n_clusters(), opt(purity));
    Ok(())
}

struct SweepRow {
    ratio: f64,
    clusters: Option<usize>,
    result: Result<(training::Metrics, Option<f64>), String>,
}

fn sweep_one(cfg: &RunConfig, data: &Dataset, prep: &PreparedData, ratio: f64) -> ahstn::Result<(training::Metrics, Option<f64>)> {
    let mut mc = cfg.model.clone();
    mc.p_cluster = ratio;
    let mut model = Model::<f64>::new(mc, data.graph.clone())?;
    training::train(&mut model, prep, &cfg.training)?;
    let ev = evaluate(&model, &prep.test, &prep.normalizer, &cfg.training.report_steps, EVAL_BATCH)?;
    let purity = match (model.assignment(), &data.labels) {
        (Some(a), Some(l)) => Some(assignment_quality(a.matrix(), l)?),
        _ => None,
    };
    Ok((ev.report.average, purity))
}

pub fn sweep(shared: &Shared, ratios: Option<Vec<f64>>) -> CliResult {
    let mut cfg = RunConfig::resolve(shared)?;
    let ratios = ratios
        .or_else(|| cfg.sweep_ratios.clone())
        .ok_or_else(|| CliError::Usage("no ratios given (--ratios or [sweep] ratios)".into()))?;
    if ratios.len() < 2 {
        return Err(CliError::Usage("a sweep needs at least two ratios".into()));
    }
    if !cfg.model.variant.has_hierarchy() {
        return Err(CliError::Usage(format!("the {} variant has no clustering ratio to sweep", cfg.model.variant)));
    }
    cfg.sweep_ratios = Some(ratios.clone());
    let data = load_dataset(&cfg)?;
    let out = prepare_out(&shared.out, shared.force)?;
    let prep = make_windows(&data.series, cfg.model.input_steps, cfg.model.horizon, &cfg.training.ratios)?;

    let mut rows = Vec::new();
    for &ratio in &ratios {
        let clusters = cluster_count(data.series.n_nodes(), ratio).ok();
        info!("sweep: p_cluster {ratio} ({} clusters)", clusters.map_or("?".into(), |k| k.to_string()));
        let result = sweep_one(&cfg, &data, &prep, ratio).map_err(|e| {
            warn!("sweep: p_cluster {ratio} failed: {e}");
            e.to_string()
        });
        rows.push(SweepRow { ratio, clusters, result });
    }

    let mut text = String::from("p_cluster,clusters,status,mae,rmse,mape,purity,message\n");
    let mut failed = 0;
    for r in &rows {
        let k = r.clusters.map_or(String::new(), |k| k.to_string());
        let cell = |v: Option<f64>| v.map_or(String::new(), |x| format!("{x}"));
        match &r.result {
            Ok((m, p)) => text.push_str(&format!(
                "{},{k},ok,{},{},{},{},\n",
                r.ratio,
                cell(m.mae),
                cell(m.rmse),
                cell(m.mape),
                cell(*p)
            )),
            Err(msg) => {
                failed += 1;
                let msg = msg.replace([',', '\n'], ";");
                text.push_str(&format!("{},{k},failed,,,,,{msg}\n", r.ratio));
            }
        }
    }
    write(&out.join("summary.csv"), &text)?;
    let mut m = Manifest::new("sweep-pcluster");
    m.config(&cfg.render());
    m.section("result", &[("runs", rows.len().to_string()), ("failed", failed.to_string())]);
    m.save(&out)?;
    println!("{} runs, {failed} failed; summary in {}", rows.len(), out.join("summary.csv").display());
    Ok(())
}
