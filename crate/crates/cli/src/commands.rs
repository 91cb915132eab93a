use std::collections::BTreeMap;
use std::fs::{self, File};
use std::io::BufReader;
use std::path::{Path, PathBuf};

use anyhow::{Context as _, Result};
use omnitft::evalkit;
use omnitft::ingest::{
    generate_synthetic, parse_events, prepare, synthetic_schema, write_events, FeatureMedians,
    PatientSeries, PrepConfig, PreparedData, Split, SynthConfig,
};
use omnitft::labeler::{hmm_label_series, RegimeLabel};
use omnitft::model::{Normalizer, OmniTft};
use omnitft::par::Execution;
use omnitft::sampler::WindowSample;
use omnitft::schema::Schema;
use omnitft::trainer::{self, build_windows, estimate_deltas, write_history_csv, TrainError};
use serde::{Deserialize, Serialize};

use crate::config::{
    load_delta_table, load_schema, Failure, RunConfig, CHECKPOINT_FILE, EVENTS_FILE, HISTORY_FILE,
    REGIMES_FILE, SCHEMA_FILE,
};
use crate::manifest::ManifestBuilder;
use crate::{EvalArgs, LabelArgs, Method, SplitArg, SynthArgs, TrainArgs};

pub struct Context {
    pub exec: Execution,
    pub threads: Option<usize>,
}

/// Preprocessing state stored with a checkpoint so evaluation reproduces it.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointExtra {
    prep: PrepConfig,
    medians: FeatureMedians,
    deltas: BTreeMap<String, f64>,
    stride: usize,
    best_epoch: usize,
    run_config_sha256: String,
}

fn out_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn csv_bytes(
    rows: impl FnOnce(&mut csv::Writer<&mut Vec<u8>>) -> csv::Result<()>,
) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    {
        let mut w = csv::Writer::from_writer(&mut buf);
        rows(&mut w)?;
        w.flush()?;
    }
    Ok(buf)
}

fn load_data(
    data: &Path,
    schema: &Schema,
    prep: &PrepConfig,
    medians: Option<FeatureMedians>,
    manifest: &mut ManifestBuilder,
    exec: Execution,
) -> Result<PreparedData> {
    let path = data.join(EVENTS_FILE);
    manifest.input(&path)?;
    let file = File::open(&path).with_context(|| format!("opening {}", path.display()))?;
    let events = parse_events(BufReader::new(file), schema)
        .with_context(|| format!("parsing {}", path.display()))?;
    Ok(prepare(events, schema, prep, medians, exec)?)
}

fn schema_path(data: &Path, explicit: Option<&PathBuf>) -> PathBuf {
    explicit.cloned().unwrap_or_else(|| data.join(SCHEMA_FILE))
}

// ---------------------------------------------------------------------------

pub fn synth(ctx: &Context, a: &SynthArgs) -> Result<()> {
    if !(0.0..=1.0).contains(&a.shock_rate) {
        return Err(Failure::Config(format!(
            "--shock-rate must lie in [0, 1], got {}",
            a.shock_rate
        ))
        .into());
    }
    if a.patients == 0 || a.encoder_len == 0 || a.horizon_len == 0 {
        return Err(Failure::Config(
            "--patients, --encoder-len and --horizon-len must be positive".into(),
        )
        .into());
    }
    let schema = synthetic_schema(a.encoder_len, a.horizon_len);
    let cfg = SynthConfig {
        n_patients: a.patients,
        steps_per_patient: a.steps,
        shock_rate: a.shock_rate,
        seed: a.seed,
        ..SynthConfig::default()
    };
    out_dir(&a.out)?;
    let mut m = ManifestBuilder::new("synth", &a.out, ctx.threads);
    m.seed("seed", a.seed);
    m.config(&cfg)?;

    let data = generate_synthetic(&schema, &cfg);
    let mut events = Vec::new();
    write_events(&mut events, &data.to_events(&schema), &schema)?;
    let regimes = csv_bytes(|w| {
        w.write_record(["patient_id", "step", "regime"])?;
        for (s, labels) in data.series.iter().zip(&data.regimes) {
            for (t, l) in labels.iter().enumerate() {
                w.write_record([s.patient_id.as_str(), &t.to_string(), l.as_str()])?;
            }
        }
        Ok(())
    })?;
    m.artifact(EVENTS_FILE, &events)?;
    m.artifact(SCHEMA_FILE, (schema.doc().to_json() + "\n").as_bytes())?;
    m.artifact(REGIMES_FILE, &regimes)?;
    m.finish()?;
    println!("wrote {} patients to {}", a.patients, a.out.display());
    Ok(())
}

// ---------------------------------------------------------------------------

#[derive(Serialize)]
struct DryRunSummary<'a> {
    patients: BTreeMap<&'static str, usize>,
    windows: BTreeMap<&'static str, usize>,
    deltas: &'a BTreeMap<String, f64>,
    config: &'a RunConfig,
}

pub fn train(ctx: &Context, a: &TrainArgs) -> Result<()> {
    let schema = load_schema(&schema_path(&a.data, a.schema.as_ref()))?;
    let cfg = RunConfig::load(a.config.as_deref())?;
    cfg.validate(&schema)?;

    let mut m = ManifestBuilder::new("train", &a.out, ctx.threads);
    m.input(&schema_path(&a.data, a.schema.as_ref()))?;
    if let Some(c) = &a.config {
        m.input(c)?;
    }
    m.seed("train.seed", cfg.train.seed);
    m.seed("model.init_seed", cfg.model.init_seed);
    m.seed("prep.split_seed", cfg.prep.split_seed);
    m.config(&cfg)?;

    let data = load_data(&a.data, &schema, &cfg.prep, None, &mut m, ctx.exec)?;
    let deltas = estimate_deltas(&data.train, &schema, &cfg.delta_table())?;
    let train_w = build_windows(&data.train, &schema, &deltas, cfg.stride.0)?;
    let val_w = build_windows(&data.val, &schema, &deltas, cfg.stride.0)?;
    if train_w.is_empty() || val_w.is_empty() {
        return Err(Failure::Config(format!(
            "not enough data for one window of length {} in the {} split",
            schema.window_len(),
            if train_w.is_empty() {
                "training"
            } else {
                "validation"
            }
        ))
        .into());
    }

    if a.dry_run {
        let summary = DryRunSummary {
            patients: [
                ("train", data.train.len()),
                ("val", data.val.len()),
                ("test", data.test.len()),
            ]
            .into(),
            windows: [("train", train_w.len()), ("val", val_w.len())].into(),
            deltas: &deltas,
            config: &cfg,
        };
        println!("{}", serde_json::to_string_pretty(&summary)?);
        return Ok(());
    }

    out_dir(&a.out)?;
    let normalizer = Normalizer::fit(&data.train, &schema);
    let model = OmniTft::new(schema, cfg.model.clone(), normalizer)?;
    let result = trainer::train(model, &train_w, &val_w, &cfg.train, ctx.exec, |r| {
        eprintln!(
            "epoch {:>3}  L_q {:.5}  C_embed {:.3e}  C_group {:.4}  C_shock {:.4}  val {:.5}{}",
            r.epoch,
            r.l_quantile,
            r.c_embed,
            r.c_group,
            r.c_shock,
            r.val_loss,
            if r.single_class {
                "  (single class)"
            } else {
                ""
            }
        );
    });
    let (model, history, best_epoch, diverged) = match result {
        Ok(o) => (o.model, o.history, o.best_epoch, None),
        Err(TrainError::Diverged {
            epoch,
            last_good,
            history,
        }) => {
            let best = history
                .iter()
                .min_by(|x, y| x.val_loss.total_cmp(&y.val_loss))
                .map_or(0, |r| r.epoch);
            (*last_good, history, best, Some(epoch))
        }
        Err(e) => return Err(e.into()),
    };

    let extra = CheckpointExtra {
        prep: cfg.prep.clone(),
        medians: data.medians.clone(),
        deltas,
        stride: cfg.stride.0,
        best_epoch,
        run_config_sha256: crate::manifest::sha256_hex(
            serde_json::to_string(&serde_json::to_value(&cfg)?)?.as_bytes(),
        ),
    };
    let ckpt = model.to_checkpoint_bytes(&serde_json::to_value(&extra)?)?;
    m.artifact(CHECKPOINT_FILE, &ckpt)?;
    let mut hist = Vec::new();
    write_history_csv(&mut hist, &history)?;
    m.artifact(HISTORY_FILE, &hist)?;
    m.artifact(
        "ingest.json",
        (serde_json::to_string_pretty(&data.manifest)? + "\n").as_bytes(),
    )?;
    m.finish()?;
    if let Some(epoch) = diverged {
        return Err(Failure::Diverged(epoch).into());
    }
    println!(
        "trained {} epochs, best epoch {} (val loss {:.5}); wrote {}",
        history.len(),
        best_epoch,
        history.get(best_epoch).map_or(f64::NAN, |r| r.val_loss),
        a.out.join(CHECKPOINT_FILE).display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------

pub fn eval(ctx: &Context, a: &EvalArgs) -> Result<()> {
    let file =
        File::open(&a.checkpoint).with_context(|| format!("opening {}", a.checkpoint.display()))?;
    let (model, extra) = OmniTft::read_checkpoint(BufReader::new(file))
        .with_context(|| format!("reading checkpoint {}", a.checkpoint.display()))?;
    let extra: CheckpointExtra =
        serde_json::from_value(extra).context("checkpoint lacks preprocessing metadata")?;
    let schema = model.schema().clone();

    let data_schema = a.data.join(SCHEMA_FILE);
    if data_schema.exists() {
        let other = load_schema(&data_schema)?;
        if other.doc() != schema.doc() {
            return Err(Failure::SchemaMismatch(format!(
                "{} differs from the schema stored in {}",
                data_schema.display(),
                a.checkpoint.display()
            ))
            .into());
        }
    }

    out_dir(&a.out)?;
    let mut m = ManifestBuilder::new("eval", &a.out, ctx.threads);
    m.input(&a.checkpoint)?;
    m.config(&extra)?;
    let data = load_data(
        &a.data,
        &schema,
        &extra.prep,
        Some(extra.medians.clone()),
        &mut m,
        ctx.exec,
    )
    .map_err(|e| match e.downcast_ref::<omnitft::ingest::IngestError>() {
        Some(omnitft::ingest::IngestError::UnknownFeature { .. }) => {
            Failure::SchemaMismatch(format!("{e:#}")).into()
        }
        _ => e,
    })?;
    let split = match a.split {
        SplitArg::Train => Split::Train,
        SplitArg::Val => Split::Val,
        SplitArg::Test => Split::Test,
    };
    let windows = build_windows(data.split(split), &schema, &extra.deltas, extra.stride)?;
    if windows.is_empty() {
        anyhow::bail!("the selected split has no complete windows");
    }
    let forecasts = evalkit::forecast_all(&model, &windows, ctx.exec)?;
    let report = evalkit::metric_report(&forecasts, &schema, &model.config().quantiles)?;
    let table = evalkit::render_table(&report);

    m.artifact(
        "metrics.json",
        (serde_json::to_string_pretty(&report)? + "\n").as_bytes(),
    )?;
    m.artifact("metrics.txt", table.as_bytes())?;
    let mut imp = Vec::new();
    evalkit::write_importance_csv(
        &mut imp,
        &evalkit::aggregate_importance(&forecasts, &schema),
    )?;
    m.artifact("importance.csv", &imp)?;
    for (target, idx) in evalkit::representative_windows(&forecasts, &schema) {
        let mut buf = Vec::new();
        evalkit::write_trajectory_csv(&mut buf, &evalkit::trajectory_rows(&forecasts[idx]))?;
        m.artifact(&format!("trajectory_{target}.csv"), &buf)?;
    }
    m.finish()?;
    print!("{table}");
    Ok(())
}

// ---------------------------------------------------------------------------

#[derive(Debug, Default, Serialize)]
struct ClassCounts {
    total: usize,
    stable: usize,
    volatile: usize,
}

impl ClassCounts {
    fn add(&mut self, l: RegimeLabel) {
        self.total += 1;
        if l.is_volatile() {
            self.volatile += 1;
        } else {
            self.stable += 1;
        }
    }
}

#[derive(Debug, Default, Serialize)]
struct Agreement {
    threshold_vs_hmm: f64,
    threshold_vs_truth: Option<f64>,
    hmm_vs_truth: Option<f64>,
}

#[derive(Debug, Serialize)]
struct LabelSummary {
    method: &'static str,
    deltas: BTreeMap<String, f64>,
    windows: ClassCounts,
    per_target: BTreeMap<String, ClassCounts>,
    agreement: Agreement,
}

fn read_regimes(path: &Path) -> Result<BTreeMap<String, Vec<RegimeLabel>>> {
    let mut out: BTreeMap<String, Vec<RegimeLabel>> = BTreeMap::new();
    let mut r =
        csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    for rec in r.records() {
        let rec = rec?;
        let label = match &rec[2] {
            "volatile" => RegimeLabel::Volatile,
            "stable" => RegimeLabel::Stable,
            other => anyhow::bail!("{}: unknown regime {other:?}", path.display()),
        };
        let step: usize = rec[1]
            .parse()
            .with_context(|| format!("{}: bad step {:?}", path.display(), &rec[1]))?;
        let v = out.entry(rec[0].to_string()).or_default();
        if v.len() <= step {
            v.resize(step + 1, RegimeLabel::Stable);
        }
        v[step] = label;
    }
    Ok(out)
}

/// Volatile iff any horizon step is volatile.
fn horizon_label(steps: &[RegimeLabel], from: usize, len: usize) -> Option<RegimeLabel> {
    let slice = steps.get(from..from + len)?;
    Some(if slice.iter().any(|l| l.is_volatile()) {
        RegimeLabel::Volatile
    } else {
        RegimeLabel::Stable
    })
}

struct LabeledWindow {
    window: WindowSample,
    hmm: RegimeLabel,
    truth: Option<RegimeLabel>,
}

fn label_series(
    s: &PatientSeries,
    schema: &Schema,
    deltas: &BTreeMap<String, f64>,
    stride: usize,
    seed: u64,
    truth: Option<&Vec<RegimeLabel>>,
) -> Result<Vec<LabeledWindow>> {
    let mut out = Vec::new();
    for &target in schema.targets() {
        let windows = build_windows(std::slice::from_ref(s), schema, deltas, stride)?;
        let windows: Vec<WindowSample> =
            windows.into_iter().filter(|w| w.target == target).collect();
        if windows.is_empty() {
            continue;
        }
        let hmm = hmm_label_series(&s.column(target), seed)
            .with_context(|| format!("HMM labeling of patient {:?}", s.patient_id))?;
        for w in windows {
            let from = w.start + schema.encoder_len();
            let h = horizon_label(&hmm, from, schema.horizon_len())
                .expect("window lies inside the series");
            let t = truth.and_then(|g| horizon_label(g, s.start_step + from, schema.horizon_len()));
            out.push(LabeledWindow {
                window: w,
                hmm: h,
                truth: t,
            });
        }
    }
    Ok(out)
}

fn rate(pairs: impl Iterator<Item = (RegimeLabel, RegimeLabel)>) -> Option<f64> {
    let (mut n, mut same) = (0usize, 0usize);
    for (a, b) in pairs {
        n += 1;
        same += usize::from(a == b);
    }
    (n > 0).then(|| same as f64 / n as f64)
}

pub fn label(ctx: &Context, a: &LabelArgs) -> Result<()> {
    let spath = schema_path(&a.data, a.schema.as_ref());
    let schema = load_schema(&spath)?;
    let overrides = load_delta_table(a.delta_config.as_deref())?;
    for name in overrides.delta.keys() {
        match schema.feature_index(name) {
            Ok(i) if schema.targets().contains(&i) => {}
            _ => {
                return Err(Failure::Config(format!(
                    "delta given for {name:?}, which is not a target"
                ))
                .into())
            }
        }
    }
    if a.stride == 0 {
        return Err(Failure::Config("--stride must be at least 1".into()).into());
    }
    out_dir(&a.out)?;
    let mut m = ManifestBuilder::new("label", &a.out, ctx.threads);
    m.input(&spath)?;
    if let Some(p) = &a.delta_config {
        m.input(p)?;
    }
    m.seed("seed", a.seed);
    let prep = PrepConfig {
        split_seed: a.seed,
        ..PrepConfig::default()
    };
    let data = load_data(&a.data, &schema, &prep, None, &mut m, ctx.exec)?;
    let deltas = estimate_deltas(&data.train, &schema, &overrides)?;
    m.config(&serde_json::json!({"prep": prep, "deltas": deltas, "stride": a.stride, "method": match a.method {
        Method::Threshold => "threshold",
        Method::Hmm => "hmm",
    }}))?;

    let regimes_path = a.data.join(REGIMES_FILE);
    let truth = if regimes_path.exists() {
        m.input(&regimes_path)?;
        Some(read_regimes(&regimes_path)?)
    } else {
        None
    };

    let mut series: Vec<&PatientSeries> = data
        .train
        .iter()
        .chain(&data.val)
        .chain(&data.test)
        .collect();
    series.sort_by(|x, y| x.patient_id.cmp(&y.patient_id));
    let labeled = omnitft::par::map(ctx.exec, &series, |s| {
        label_series(
            s,
            &schema,
            &deltas,
            a.stride,
            a.seed,
            truth.as_ref().and_then(|t| t.get(&s.patient_id)),
        )
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?
    .into_iter()
    .flatten()
    .collect::<Vec<_>>();

    let chosen = |l: &LabeledWindow| match a.method {
        Method::Threshold => l.window.label,
        Method::Hmm => l.hmm,
    };
    let mut windows = ClassCounts::default();
    let mut per_target: BTreeMap<String, ClassCounts> = BTreeMap::new();
    for l in &labeled {
        windows.add(chosen(l));
        per_target
            .entry(schema.feature(l.window.target).name.clone())
            .or_default()
            .add(chosen(l));
    }
    let has_truth = truth.is_some();
    let agreement = Agreement {
        threshold_vs_hmm: rate(labeled.iter().map(|l| (l.window.label, l.hmm))).unwrap_or(f64::NAN),
        threshold_vs_truth: has_truth
            .then(|| {
                rate(
                    labeled
                        .iter()
                        .filter_map(|l| Some((l.window.label, l.truth?))),
                )
            })
            .flatten(),
        hmm_vs_truth: has_truth
            .then(|| rate(labeled.iter().filter_map(|l| Some((l.hmm, l.truth?)))))
            .flatten(),
    };

    let csv = csv_bytes(|w| {
        w.write_record([
            "patient_id",
            "target",
            "start",
            "score",
            "threshold",
            "hmm",
            "truth",
            "label",
        ])?;
        for l in &labeled {
            w.write_record([
                l.window.patient_id.as_str(),
                &schema.feature(l.window.target).name,
                &l.window.start.to_string(),
                &format!("{}", l.window.score),
                l.window.label.as_str(),
                l.hmm.as_str(),
                l.truth.map_or("", RegimeLabel::as_str),
                chosen(l).as_str(),
            ])?;
        }
        Ok(())
    })?;
    let summary = LabelSummary {
        method: match a.method {
            Method::Threshold => "threshold",
            Method::Hmm => "hmm",
        },
        deltas,
        windows,
        per_target,
        agreement,
    };
    let json = serde_json::to_string_pretty(&summary)? + "\n";
    m.artifact("labels.csv", &csv)?;
    m.artifact("label_summary.json", json.as_bytes())?;
    m.finish()?;
    print!("{json}");
    Ok(())
}
