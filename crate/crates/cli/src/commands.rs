//! Subcommand implementations.

use std::collections::BTreeMap;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use modeprior::data::{sample_dataset, toy_gmm_default, toy_gmm_unequal, write_dataset_csv, CanvasSpec, DatasetSpec};
use modeprior::latents::{
    read_latent_file, write_latent_file, LatentConfig, LatentContent, LatentRecord, LatentScheme, LatentSpace,
};
use modeprior::manifest::{verify_dir, RunRecorder};
use modeprior::metrics::{read_sweep_csv, write_sweep_csv, SweepRow};
use modeprior::pipeline::{
    draw_latent, evaluate, generate, latent_rng, mode_label, read_sample_csv, sweep, write_sample_csv, ChainSource,
    EvalOptions, GeneratedSample, SampleEvent, SampleRequest, SweepOptions,
};
use modeprior::plot::{line_svg, scatter_svg, LinePlot, ScatterPlot, Series};
use modeprior::train::{train, write_train_log, Checkpoint, TrainConfig, Variant};
use modeprior::{Error, Result};
use serde::{Deserialize, Serialize};

use crate::store::{
    load_dataset, out_dir, prepare_out, DatasetMeta, SampleMeta, BUMPS_JSON, DATASET_CSV, DATASET_JSON, LATENTS_TSV,
    SAMPLES_CSV, SAMPLE_META,
};
use crate::{Cli, Command, EditArgs, EvalArgs, GenDataArgs, PlotArgs, SampleArgs, SweepArgs, TrainArgs};

pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Io(_) => 2,
        _ => 1,
    }
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::GenData(a) => gen_data(cli, a),
        Command::Train(a) => cmd_train(cli, a),
        Command::Sample(a) => cmd_sample(cli, a),
        Command::Sweep(a) => cmd_sweep(cli, a),
        Command::Edit(a) => cmd_edit(cli, a),
        Command::Eval(a) => cmd_eval(cli, a),
        Command::Plot(a) => cmd_plot(cli, a),
        Command::VerifyManifest(a) => {
            let dir = a.dir.as_ref().or(cli.out.as_ref()).ok_or_else(|| Error::contract("no directory given"))?;
            let v = verify_dir(dir)?;
            for p in &v.problems {
                println!("FAIL {p}");
            }
            if v.ok() {
                println!("ok: {} artifacts verified in {}", v.checked, dir.display());
                Ok(())
            } else {
                Err(Error::contract(format!("{} manifest problems", v.problems.len())))
            }
        }
    }
}

fn to_value<T: Serialize>(v: &T) -> Result<serde_json::Value> {
    Ok(serde_json::to_value(v)?)
}

fn pretty<T: Serialize>(v: &T) -> Result<Vec<u8>> {
    let mut s = serde_json::to_string_pretty(v)?;
    s.push('\n');
    Ok(s.into_bytes())
}

fn dataset_spec(kind: &str) -> Result<DatasetSpec> {
    match kind {
        "gmm" => Ok(DatasetSpec::Gmm(toy_gmm_default())),
        "gmm-unequal" => Ok(DatasetSpec::Gmm(toy_gmm_unequal())),
        "canvas" => Ok(DatasetSpec::Canvas(CanvasSpec::default())),
        other => Err(Error::contract(format!(
            "unknown dataset kind {other:?} (expected gmm, gmm-unequal or canvas)"
        ))),
    }
}

fn gen_data(cli: &Cli, a: &GenDataArgs) -> Result<()> {
    let spec = dataset_spec(&a.kind)?;
    if a.n == 0 {
        return Err(Error::contract("n must be positive"));
    }
    let scheme = match (&a.scheme, &spec) {
        (Some(s), _) => LatentScheme::parse(s)?,
        (None, DatasetSpec::Gmm(_)) => LatentScheme::Text,
        (None, DatasetSpec::Canvas(_)) => LatentScheme::Bbox,
    };
    let seed = cli.seed.unwrap_or(0);
    let dir = out_dir(&cli.out)?;
    let samples = sample_dataset(&spec, a.n, seed)?;
    let xs: Vec<Vec<f64>> = samples.iter().map(|s| s.x.clone()).collect();
    let space = LatentSpace::build(spec.clone(), LatentConfig::new(scheme), &xs, seed)?;
    let records = samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            Ok(LatentRecord {
                sample_id: i,
                class: s.class,
                sequence: space.extract(&s.x, s.class)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    prepare_out(dir, cli.force)?;
    let meta = DatasetMeta {
        kind: a.kind.clone(),
        n: a.n,
        seed,
        spec: spec.clone(),
    };
    let mut rec = RunRecorder::new(dir, "gen-data", seed, Some(to_value(&meta)?));
    let mut csv = Vec::new();
    write_dataset_csv(&mut csv, &samples)?;
    rec.write(DATASET_CSV, &csv)?;
    rec.write(DATASET_JSON, &pretty(&meta)?)?;
    if let DatasetSpec::Canvas(_) = spec {
        let bumps: Vec<_> = samples.iter().map(|s| s.bumps.clone()).collect();
        rec.write(BUMPS_JSON, &pretty(&bumps)?)?;
    }
    let mut lat = Vec::new();
    write_latent_file(&mut lat, &records, space.vocab())?;
    rec.write(LATENTS_TSV, &lat)?;
    rec.finish()?;

    let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
    for s in &samples {
        *counts.entry(s.mode).or_default() += 1;
    }
    println!("wrote {} samples to {}", a.n, dir.display());
    for (m, c) in counts {
        println!("  {}: {c}", mode_label(&spec, m));
    }
    Ok(())
}

fn cmd_train(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let variant = Variant::parse(&a.variant)?;
    if a.print_config {
        println!("{}", TrainConfig::toy(variant).to_json()?);
        return Ok(());
    }
    let mut cfg = match &cli.config {
        Some(p) => TrainConfig::from_json(&std::fs::read_to_string(p)?)?,
        None => TrainConfig::toy(variant),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let data = a.data.as_ref().ok_or_else(|| Error::contract("--data is required"))?;
    let (meta, samples) = load_dataset(data)?;
    let dir = out_dir(&cli.out)?;
    prepare_out(dir, cli.force)?;
    let mut rec = RunRecorder::new(dir, "train", cfg.seed, Some(to_value(&cfg)?));
    rec.input(&data.join(DATASET_CSV))?;
    rec.write("config.json", cfg.to_json()?.as_bytes())?;
    let ck_path = dir.join("checkpoint.json");
    match train(&cfg, &meta.spec, &samples, Some(&ck_path)) {
        Ok(out) => {
            rec.record_file("checkpoint.json")?;
            let mut log = Vec::new();
            write_train_log(&mut log, &out.log)?;
            rec.write("train_log.csv", &log)?;
            rec.finish()?;
            if let Some(last) = out.log.last() {
                println!(
                    "trained {} for {} steps: l_dm {:.5} l_ar {:.5} total {:.5} ({:.1}s)",
                    cfg.variant.name(),
                    last.step,
                    last.l_dm,
                    last.l_ar,
                    last.total,
                    last.wallclock
                );
            }
            println!("checkpoint: {}", ck_path.display());
            Ok(())
        }
        Err(e) => {
            if ck_path.exists() {
                rec.record_file("checkpoint.json")?;
                rec.warn(format!("training aborted: {e}; checkpoint.json is the last good state"));
            } else {
                rec.warn(format!("training aborted: {e}"));
            }
            rec.finish()?;
            Err(e)
        }
    }
}

fn default_gamma(ck: &Checkpoint) -> f64 {
    match &ck.space {
        Some(s) if s.scheme() == LatentScheme::Text => 7.0,
        _ => 4.0,
    }
}

fn render_latent(space: Option<&LatentSpace>, s: &GeneratedSample) -> String {
    match (space, &s.latent) {
        (Some(sp), Some(z)) => sp.vocab().render(&z.tokens),
        _ => String::new(),
    }
}

fn cmd_sample(cli: &Cli, a: &SampleArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let seed = cli.seed.unwrap_or(0);
    let gamma = a.gamma.unwrap_or_else(|| default_gamma(&ck));
    let source = match &a.latents {
        Some(p) => {
            let space = ck
                .space
                .as_ref()
                .ok_or_else(|| Error::contract("--latents needs a latent-conditioned checkpoint"))?;
            ChainSource::Latents(read_latent_file(BufReader::new(std::fs::File::open(p)?), space)?)
        }
        None => ChainSource::Prior {
            n: a.n,
            class: a.class,
        },
    };
    let mut req = SampleRequest::new(source, gamma, seed);
    req.steps = a.steps;
    req.tau = a.tau;
    req.use_ema = !a.no_ema;
    let dir = out_dir(&cli.out)?;
    prepare_out(dir, cli.force)?;
    let gen = generate(&ck, &req)?;
    let space = ck.space.as_ref();
    let variant = ck.model.variant().name().to_string();
    let meta = SampleMeta {
        checkpoint: a.checkpoint.display().to_string(),
        variant: variant.clone(),
        gamma,
        seed,
        steps: a.steps,
        tau: a.tau,
        use_ema: req.use_ema,
        dataset: ck.dataset.clone(),
        space: ck.space.clone(),
    };
    let mut rec = RunRecorder::new(dir, "sample", seed, Some(to_value(&meta)?));
    rec.input(&a.checkpoint)?;
    if let Some(p) = &a.latents {
        rec.input(p)?;
    }
    let mut csv = Vec::new();
    write_sample_csv(&mut csv, &gen.samples, &ck.dataset, space)?;
    rec.write(SAMPLES_CSV, &csv)?;
    rec.write(SAMPLE_META, &pretty(&meta)?)?;
    rec.write("sample_log.txt", sample_log(&gen.samples, &gen.events, space).as_bytes())?;
    if let Some(sp) = space {
        let mut lat = Vec::new();
        write_latent_file(&mut lat, &modeprior::pipeline::latent_records(&gen.samples), sp.vocab())?;
        rec.write(LATENTS_TSV, &lat)?;
    }
    rec.finish()?;

    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for s in &gen.samples {
        let m = s.assigned_mode.map_or("none".to_string(), |m| mode_label(&ck.dataset, m));
        *counts.entry(m).or_default() += 1;
    }
    println!("{} {} samples at gamma {gamma} -> {}", gen.samples.len(), variant, dir.display());
    for (m, c) in counts {
        println!("  {m}: {c}");
    }
    Ok(())
}

/// Event log: every latent line precedes the first denoising line.
fn sample_log(samples: &[GeneratedSample], events: &[SampleEvent], space: Option<&LatentSpace>) -> String {
    let by_chain: BTreeMap<usize, &GeneratedSample> = samples.iter().map(|s| (s.chain_id, s)).collect();
    let mut out = String::new();
    for e in events {
        out.push_str(&e.to_string());
        if let SampleEvent::LatentReady { chain, .. } = e {
            if let Some(s) = by_chain.get(chain) {
                out.push_str(&format!(" class={} z={}", s.class, render_latent(space, s)));
            }
        }
        out.push('\n');
    }
    out
}

fn describe(space: &LatentSpace, content: &LatentContent) -> String {
    let names = space.mode_names();
    let boxes = |b: &[modeprior::latents::BboxParams]| {
        b.iter()
            .map(|p| format!("box({}, {}, {}, {})", p.x1, p.y1, p.x2, p.y2))
            .collect::<Vec<_>>()
            .join(" ")
    };
    match content {
        LatentContent::Text { mode } => names[*mode].clone(),
        LatentContent::Bbox(b) => boxes(b),
        LatentContent::Blob(bins) => bins
            .iter()
            .map(|b| match space.config.blob.from_bins(*b) {
                Ok(p) => format!(
                    "blob(xc={:.1}, yc={:.1}, r_major={:.1}, r_minor={:.1}, theta={:.1})",
                    p.xc, p.yc, p.r_major, p.r_minor, p.theta_deg
                ),
                Err(_) => format!("blob{b:?}"),
            })
            .collect::<Vec<_>>()
            .join(" "),
        LatentContent::Voken(ids) => format!("vokens {ids:?}"),
        LatentContent::Combined { mode, boxes: b, vokens } => {
            format!("{} | {} | vokens {vokens:?}", names[*mode], boxes(b))
        }
    }
}

fn cmd_edit(cli: &Cli, a: &EditArgs) -> Result<()> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let space = ck
        .space
        .as_ref()
        .ok_or_else(|| Error::contract("edit needs a latent-conditioned checkpoint"))?;
    if a.n == 0 {
        return Err(Error::contract("n must be positive"));
    }
    let n_classes = ck.dataset.n_classes();
    if let Some(c) = a.class {
        if c >= n_classes {
            return Err(Error::contract(format!("class {c} out of range (0..{n_classes})")));
        }
    }
    let seed = cli.seed.unwrap_or(0);
    let mut records = Vec::with_capacity(a.n);
    for chain in 0..a.n {
        let class = a.class.unwrap_or(chain % n_classes);
        let (sequence, _) = draw_latent(&ck, true, class, a.tau, &mut latent_rng(seed, chain))?;
        records.push(LatentRecord {
            sample_id: chain,
            class,
            sequence,
        });
    }
    let dir = out_dir(&cli.out)?;
    prepare_out(dir, cli.force)?;
    let mut rec = RunRecorder::new(dir, "edit", seed, None);
    rec.input(&a.checkpoint)?;
    let mut lat = Vec::new();
    write_latent_file(&mut lat, &records, space.vocab())?;
    let lat_path = rec.write(LATENTS_TSV, &lat)?;
    let mut readable = String::from("# sample_id class decoded latent\n");
    for r in &records {
        readable.push_str(&format!("{}\t{}\t{}\n", r.sample_id, r.class, describe(space, &space.parse(&r.sequence)?)));
    }
    readable.push_str("# mode tokens: ");
    readable.push_str(&space.mode_names().join(" "));
    readable.push('\n');
    rec.write("latents_readable.txt", readable.as_bytes())?;
    let command = format!(
        "modeprior sample --checkpoint {} --latents {} --gamma {} --seed {seed} --out {}",
        a.checkpoint.display(),
        lat_path.display(),
        default_gamma(&ck),
        dir.join("regen").display()
    );
    rec.write("regenerate.sh", format!("#!/bin/sh\n{command}\n").as_bytes())?;
    rec.finish()?;
    print!("{readable}");
    println!("edit {} and regenerate with:\n  {command}", lat_path.display());
    Ok(())
}

fn sibling(path: &Path, name: &str) -> PathBuf {
    path.parent().unwrap_or(Path::new(".")).join(name)
}

fn cmd_eval(cli: &Cli, a: &EvalArgs) -> Result<()> {
    let meta = SampleMeta::load(&sibling(&a.samples, SAMPLE_META))?;
    let (dmeta, real) = load_dataset(&a.data)?;
    if dmeta.spec != meta.dataset {
        return Err(Error::contract("samples were generated for a different dataset"));
    }
    let samples = read_sample_csv(std::fs::File::open(&a.samples)?, &meta.dataset, meta.space.as_ref())?;
    let mut opts = EvalOptions::new(meta.gamma, &meta.variant, meta.seed);
    opts.k = a.k;
    opts.min_count = a.min_count;
    let report = evaluate(&samples, &real, &meta.dataset, meta.space.as_ref(), &opts)?;
    let json = pretty(&report)?;
    if let Some(dir) = &cli.out {
        prepare_out(dir, cli.force)?;
        let mut rec = RunRecorder::new(dir, "eval", meta.seed, Some(to_value(&opts)?));
        rec.input(&a.samples)?;
        rec.write("metrics.json", &json)?;
        rec.finish()?;
    }
    print!("{}", String::from_utf8_lossy(&json));
    Ok(())
}

/// Settings accepted by `sweep --config`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub gammas: Vec<f64>,
    pub n: usize,
    pub steps: usize,
    pub class: Option<usize>,
}

fn parse_gammas(s: &str) -> Result<Vec<f64>> {
    s.split(',')
        .map(|g| {
            g.trim()
                .parse::<f64>()
                .map_err(|_| Error::contract(format!("bad gamma {g:?}")))
        })
        .collect()
}

fn sweep_plots(rows: &[SweepRow]) -> Result<Vec<(String, String)>> {
    type Metric = fn(&SweepRow) -> Option<f64>;
    let metrics: [(&str, &str, Metric); 4] = [
        ("coverage", "mode coverage", |r| r.coverage),
        ("recall", "k-NN recall", |r| Some(r.recall)),
        ("minority", "minority-mode fraction", |r| r.minority_fraction),
        ("fd", "Frechet distance", |r| Some(r.fd)),
    ];
    let mut variants: Vec<String> = Vec::new();
    for r in rows {
        if !variants.contains(&r.variant) {
            variants.push(r.variant.clone());
        }
    }
    let mut out = Vec::new();
    for (key, label, get) in metrics {
        let series: Vec<Series> = variants
            .iter()
            .map(|v| Series {
                label: v.clone(),
                points: rows
                    .iter()
                    .filter(|r| &r.variant == v)
                    .filter_map(|r| get(r).map(|y| (r.gamma, y)))
                    .collect(),
            })
            .filter(|s| !s.points.is_empty())
            .collect();
        if series.is_empty() {
            continue;
        }
        let svg = line_svg(&LinePlot {
            title: format!("{label} vs guidance"),
            x_label: "gamma".into(),
            y_label: label.into(),
            series,
        })?;
        out.push((format!("{key}_vs_gamma.svg"), svg));
    }
    Ok(out)
}

fn cmd_sweep(cli: &Cli, a: &SweepArgs) -> Result<()> {
    let cfg = match &cli.config {
        Some(p) => serde_json::from_str::<SweepConfig>(&std::fs::read_to_string(p)?)?,
        None => SweepConfig {
            gammas: parse_gammas(&a.gammas)?,
            n: a.n,
            steps: a.steps,
            class: a.class,
        },
    };
    if cfg.gammas.is_empty() {
        return Err(Error::contract("no gammas given"));
    }
    let seed = cli.seed.unwrap_or(0);
    let baseline = Checkpoint::load(&a.baseline)?;
    let latent = Checkpoint::load(&a.latent)?;
    let (_, real) = load_dataset(&a.data)?;
    let dir = out_dir(&cli.out)?;
    prepare_out(dir, cli.force)?;
    let res = sweep(
        &baseline,
        &latent,
        &real,
        &SweepOptions {
            gammas: cfg.gammas.clone(),
            n: cfg.n,
            seed,
            steps: cfg.steps,
            class: cfg.class,
        },
    )?;
    let mut rec = RunRecorder::new(dir, "sweep", seed, Some(to_value(&cfg)?));
    rec.input(&a.baseline)?;
    rec.input(&a.latent)?;
    for w in &res.warnings {
        eprintln!("warning: {w}");
        rec.warn(w.clone());
    }
    let rows: Vec<SweepRow> = res.reports.iter().map(SweepRow::from).collect();
    let mut csv = Vec::new();
    write_sweep_csv(&mut csv, &rows)?;
    rec.write("sweep.csv", &csv)?;
    rec.write("reports.json", &pretty(&res.reports)?)?;
    for (name, svg) in sweep_plots(&rows)? {
        rec.write(&name, svg.as_bytes())?;
    }
    rec.finish()?;
    print!("{}", String::from_utf8_lossy(&csv));
    Ok(())
}

fn cmd_plot(cli: &Cli, a: &PlotArgs) -> Result<()> {
    let dir = out_dir(&cli.out)?;
    let seed = cli.seed.unwrap_or(0);
    let outputs: Vec<(String, String)> = match (&a.samples, &a.sweep) {
        (Some(path), None) => {
            let meta = SampleMeta::load(&sibling(path, SAMPLE_META))?;
            let samples = read_sample_csv(std::fs::File::open(path)?, &meta.dataset, meta.space.as_ref())?;
            if meta.dataset.dim() != 2 {
                return Err(Error::contract("scatter plots need 2-D samples"));
            }
            if let Some(d) = &a.data {
                let (dm, _) = load_dataset(d)?;
                if dm.spec != meta.dataset {
                    return Err(Error::contract("samples were generated for a different dataset"));
                }
            }
            let n_modes = meta.dataset.n_classes() * meta.dataset.n_subclasses();
            let mut groups: Vec<String> = (0..n_modes).map(|m| mode_label(&meta.dataset, m)).collect();
            groups.push("unassigned".into());
            let markers = match &meta.dataset {
                DatasetSpec::Gmm(g) => g
                    .components
                    .iter()
                    .enumerate()
                    .map(|(k, c)| (c.mean[0], c.mean[1], k))
                    .collect(),
                DatasetSpec::Canvas(_) => Vec::new(),
            };
            let svg = scatter_svg(&ScatterPlot {
                title: format!("{} samples, gamma {}", meta.variant, meta.gamma),
                points: samples
                    .iter()
                    .map(|s| (s.x[0], s.x[1], s.assigned_mode.unwrap_or(n_modes)))
                    .collect(),
                groups,
                markers,
            })?;
            vec![("scatter.svg".to_string(), svg)]
        }
        (None, Some(path)) => {
            let rows = read_sweep_csv(BufReader::new(std::fs::File::open(path)?))?;
            sweep_plots(&rows)?
        }
        _ => return Err(Error::contract("give exactly one of --samples or --sweep")),
    };
    prepare_out(dir, cli.force)?;
    let mut rec = RunRecorder::new(dir, "plot", seed, None);
    for p in a.samples.iter().chain(&a.sweep) {
        rec.input(p)?;
    }
    for (name, svg) in &outputs {
        rec.write(name, svg.as_bytes())?;
        println!("wrote {}", dir.join(name).display());
    }
    rec.finish()?;
    Ok(())
}
