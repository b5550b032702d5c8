use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use trajsim::config::RunConfig;
use trajsim::eval::{evaluate, EvalOptions, MetricsReport};
use trajsim::formats::{
    load_checkpoint, load_tsim, read_trajectories_file, save_checkpoint, save_temb, save_tsim, write_trajectories_file,
    Checkpoint, Embeddings,
};
use trajsim::geo::{
    augment_features, check_lonlat, clean_trajectory, normalize_features, project_to_local_plane, synth_generate, Cleaned, FeatureMatrix,
    LocalFrame, NormStats, Point, SynthConfig, Trajectory,
};
use trajsim::measures::{build_gt_matrix, MeasureKind, SimilarityScale, SCALE_SAMPLE_PAIRS};
use trajsim::model::{encode_all, Model};
use trajsim::train::{fit, Split};
use trajsim::{Error, Result};

use crate::{Cli, Command};

/// 0 ok, 1 usage, 2 data or format, 3 numeric failure.
pub fn exit_code(e: &Error) -> u8 {
    match e {
        Error::InvalidArgument(_) => 1,
        Error::NonFiniteLoss { .. } => 3,
        _ => 2,
    }
}

fn usage(msg: impl Into<String>) -> Error {
    Error::InvalidArgument(msg.into())
}

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::load(p).map_err(|e| match e {
            Error::Io(io) => usage(format!("cannot read config {}: {io}", p.display())),
            other => other,
        })?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    match cli.command {
        Command::Preprocess { input, min_len, max_len } => {
            let out = cli.out.ok_or_else(|| usage("preprocess needs --out <file>"))?;
            preprocess(&input, &out, min_len.unwrap_or(cfg.min_len), max_len.unwrap_or(cfg.max_len))
        }
        Command::Synth {
            count,
            min_len,
            max_len,
            bbox,
            center,
        } => {
            let out = cli.out.ok_or_else(|| usage("synth needs --out <file>"))?;
            let bbox = parse_floats::<4>(&bbox, "bbox")?;
            let center = parse_floats::<2>(&center, "center")?;
            let sc = SynthConfig {
                count,
                min_len,
                max_len,
                bbox,
                seed: cli.seed.unwrap_or(SynthConfig::default().seed),
                ..SynthConfig::default()
            };
            synth(&sc, center, &out)
        }
        Command::Gt { dataset, measure } => {
            let out = cli.out.ok_or_else(|| usage("gt needs --out <file>"))?;
            let kind = match measure {
                Some(m) => m.parse()?,
                None => cfg.measure,
            };
            gt(&dataset, kind, cfg.seed, &out)
        }
        Command::Train { data } => {
            if let Some(d) = data {
                cfg.data = Some(d);
            }
            if let Some(o) = cli.out {
                cfg.out = o;
            }
            train(&cfg)
        }
        Command::Embed { checkpoint, dataset } => {
            let out = cli.out.ok_or_else(|| usage("embed needs --out <file>"))?;
            embed(&checkpoint, &dataset, &out)
        }
        Command::Eval {
            checkpoint,
            dataset,
            mask,
            shift,
            oracle,
        } => {
            if !(0.0..1.0).contains(&mask) {
                return Err(usage(format!("--mask {mask} must be in [0, 1)")));
            }
            if !(shift >= 0.0 && shift.is_finite()) {
                return Err(usage(format!("--shift {shift} must be a non-negative number")));
            }
            let opts = EvalOptions {
                mask_ratio: mask,
                shift_m: shift,
                seed: cfg.seed,
                oracle,
            };
            eval(&checkpoint, &dataset, &opts, cli.out.as_deref())
        }
    }
}

fn parse_floats<const N: usize>(s: &str, what: &str) -> Result<[f64; N]> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != N {
        return Err(usage(format!("--{what} needs {N} comma-separated numbers, got {s:?}")));
    }
    let mut out = [0.0; N];
    for (o, p) in out.iter_mut().zip(parts) {
        *o = p
            .trim()
            .parse()
            .map_err(|_| usage(format!("--{what}: bad number {p:?}")))?;
    }
    Ok(out)
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(())
}

fn preprocess(input: &Path, out: &Path, min_len: usize, max_len: usize) -> Result<()> {
    if min_len < 2 || min_len > max_len {
        return Err(usage(format!("length bounds [{min_len}, {max_len}] invalid")));
    }
    let raw = read_trajectories_file(input)?;
    let mut kept = Vec::new();
    let mut rejected = 0usize;
    for t in &raw {
        if !t.is_empty() {
            check_lonlat(t)?;
        }
        match clean_trajectory(t, min_len, max_len).map_err(|e| match e {
            Error::InvalidArgument(m) => Error::Format(m),
            other => other,
        })? {
            Cleaned::Accepted(c) => kept.push(c),
            Cleaned::Rejected(_) => rejected += 1,
        }
    }
    ensure_parent(out)?;
    write_trajectories_file(out, &kept)?;
    println!("accepted\t{}\nrejected\t{rejected}", kept.len());
    Ok(())
}

fn synth(sc: &SynthConfig, center: [f64; 2], out: &Path) -> Result<()> {
    let [lon0, lat0] = center;
    if !(-180.0..=180.0).contains(&lon0) {
        return Err(usage(format!("centre longitude {lon0} out of range")));
    }
    let frame = LocalFrame::new(lat0)?;
    let trajs = synth_generate(sc)?;
    let round = |v: f64| (v * 1e7).round() / 1e7;
    let mut lonlat = Vec::with_capacity(trajs.len());
    for t in &trajs {
        let mut points = Vec::with_capacity(t.len());
        for &p in &t.points {
            let q = frame.unproject_point(p);
            let lon = round(lon0 + q.x);
            let lat = round(lat0 + q.y);
            if !(-180.0..=180.0).contains(&lon) || !(-90.0..90.0).contains(&lat) {
                return Err(usage("bounding box leaves the valid lon/lat range".to_string()));
            }
            points.push(Point::new(lon, lat));
        }
        lonlat.push(Trajectory::new(t.id.clone(), points));
    }
    ensure_parent(out)?;
    write_trajectories_file(out, &lonlat)
}

/// Reads a cleaned lon/lat dataset and projects it about its mean latitude.
fn load_planar(path: &Path, min_points: usize) -> Result<(Vec<Trajectory>, LocalFrame)> {
    let raw = read_trajectories_file(path)?;
    check_lengths(&raw, min_points)?;
    if raw.is_empty() {
        return Err(Error::Format(format!("{} contains no trajectories", path.display())));
    }
    project_to_local_plane(&raw)
}

fn check_lengths(trajs: &[Trajectory], min: usize) -> Result<()> {
    match trajs.iter().find(|t| t.len() < min) {
        Some(t) => Err(Error::TooShort {
            id: t.id.clone(),
            len: t.len(),
            min,
        }),
        None => Ok(()),
    }
}

fn scale_path(gt: &Path) -> PathBuf {
    let mut s = gt.as_os_str().to_owned();
    s.push(".scale");
    PathBuf::from(s)
}

fn gt(dataset: &Path, kind: MeasureKind, seed: u64, out: &Path) -> Result<()> {
    let raw = read_trajectories_file(dataset)?;
    if raw.len() < 2 {
        return Err(usage(format!("ground truth needs at least 2 trajectories, {} has {}", dataset.display(), raw.len())));
    }
    check_lengths(&raw, kind.min_points())?;
    let (planar, _) = project_to_local_plane(&raw)?;
    let start = Instant::now();
    let scale = SimilarityScale::estimate(&planar, kind, SCALE_SAMPLE_PAIRS, seed)?;
    let report_every = (planar.len() * planar.len() / 20).max(1);
    let m = build_gt_matrix(&planar, kind, scale, &|done, total| {
        if done % report_every == 0 || done == total {
            eprintln!("pairs {done}/{total}");
        }
    })?;
    ensure_parent(out)?;
    save_tsim(out, &m)?;
    fs::write(scale_path(out), format!("measure\t{}\nscale\t{}\n", kind.tag(), scale.get()))?;
    println!("scale\t{}\nseconds\t{:.3}", scale.get(), start.elapsed().as_secs_f64());
    Ok(())
}

fn read_scale(gt: &Path) -> Result<(MeasureKind, SimilarityScale)> {
    let path = scale_path(gt);
    let text = fs::read_to_string(&path)?;
    let mut kind = None;
    let mut scale = None;
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let bad = || Error::Format(format!("{}: unexpected line {line:?}", path.display()));
        let (k, v) = line.split_once('\t').ok_or_else(bad)?;
        match k {
            "measure" => kind = Some(v.parse::<MeasureKind>().map_err(|_| bad())?),
            "scale" => scale = Some(SimilarityScale::new(v.parse().map_err(|_| bad())?).map_err(|_| bad())?),
            _ => return Err(bad()),
        }
    }
    match (kind, scale) {
        (Some(k), Some(s)) => Ok((k, s)),
        _ => Err(Error::Format(format!("{} lacks measure or scale", path.display()))),
    }
}

fn write_metrics(dir: &Path, m: &MetricsReport) -> Result<()> {
    fs::create_dir_all(dir)?;
    fs::write(dir.join("metrics.txt"), m.to_string())?;
    Ok(())
}

fn note_partial(m: &MetricsReport) {
    let absent: Vec<&str> = m.entries().iter().filter(|(_, v)| v.is_none()).map(|(k, _)| *k).collect();
    if !absent.is_empty() {
        eprintln!(
            "note: {} queries are too few for {}; reported as absent",
            m.queries,
            absent.join(", ")
        );
    }
}

fn train(cfg: &RunConfig) -> Result<()> {
    cfg.validate()?;
    let data = cfg.data.as_ref().ok_or_else(|| usage("no dataset: set `data` in the config or pass --data"))?;
    let model_cfg = cfg.model_config()?;
    let gt_path = cfg.gt_path();
    if !data.is_file() {
        return Err(Error::Io(io::Error::new(io::ErrorKind::NotFound, format!("dataset {} not found", data.display()))));
    }
    if !gt_path.is_file() {
        return Err(Error::Io(io::Error::new(
            io::ErrorKind::NotFound,
            format!("ground truth {} not found (run `trajsim gt` first)", gt_path.display()),
        )));
    }
    let (planar, frame) = load_planar(data, model_cfg.min_points().max(cfg.measure.min_points()))?;
    let gt = load_tsim(&gt_path)?;
    if gt.n() != planar.len() {
        return Err(Error::Shape(format!(
            "{} covers {} trajectories but {} has {}",
            gt_path.display(),
            gt.n(),
            data.display(),
            planar.len()
        )));
    }
    let (kind, scale) = read_scale(&gt_path)?;
    if kind != cfg.measure {
        return Err(Error::Format(format!(
            "{} was built with {}, config asks for {}",
            gt_path.display(),
            kind.tag(),
            cfg.measure.tag()
        )));
    }

    let [n_train, n_val, _] = cfg.split_sizes(planar.len());
    let idx: Vec<usize> = (0..planar.len()).collect();
    let (tr, rest) = idx.split_at(n_train);
    let (va, te) = rest.split_at(n_val);
    let raw: Vec<FeatureMatrix> = planar.iter().map(augment_features).collect::<Result<_>>()?;
    let stats = NormStats::compute(tr.iter().map(|&i| &raw[i]));
    let feats: Vec<FeatureMatrix> = raw.iter().map(|f| normalize_features(f, &stats)).collect();
    let pick = |ix: &[usize]| ix.iter().map(|&i| feats[i].clone()).collect::<Vec<_>>();
    let (f_tr, f_va) = (pick(tr), pick(va));
    let (g_tr, g_va) = (gt.submatrix(tr), gt.submatrix(va));

    let mut model = Model::<f32>::new(model_cfg, cfg.seed)?;
    let train_cfg = cfg.train_config();
    let report = fit(
        &mut model,
        Split { features: &f_tr, gt: &g_tr },
        Split { features: &f_va, gt: &g_va },
        &train_cfg,
        &mut |rec| {
            println!("{rec}");
            let _ = io::stdout().flush();
        },
    )?;

    let test: Vec<Trajectory> = te.iter().map(|&i| planar[i].clone()).collect();
    let metrics = evaluate(&model, &stats, &test, &gt.submatrix(te), &EvalOptions::default())?;

    fs::create_dir_all(&cfg.out)?;
    let ck = Checkpoint {
        model,
        stats,
        scale,
        kind,
        frame,
    };
    save_checkpoint(&cfg.out.join("checkpoint.tsck"), &ck)?;
    fs::write(cfg.out.join("train.log"), report.log_text())?;
    write_metrics(&cfg.out, &metrics)?;
    eprintln!("best epoch {} ({:?})", report.best_epoch, report.stop_reason);
    print!("{metrics}");
    note_partial(&metrics);
    Ok(())
}

/// Loads a dataset into the checkpoint's projection.
fn load_for_checkpoint(ck: &Checkpoint, dataset: &Path) -> Result<Vec<Trajectory>> {
    let raw = read_trajectories_file(dataset)?;
    check_lengths(&raw, ck.model.config().min_points())?;
    raw.iter().map(|t| ck.frame.project(t)).collect()
}

fn embed(checkpoint: &Path, dataset: &Path, out: &Path) -> Result<()> {
    let ck = load_checkpoint(checkpoint)?;
    let planar = load_for_checkpoint(&ck, dataset)?;
    let rows = encode_all(&planar, &ck.model, &ck.stats, 128)?;
    let e = Embeddings::from_rows(&rows, ck.model.config().d)?;
    ensure_parent(out)?;
    save_temb(out, &e)?;
    println!("count\t{}\nd\t{}", e.count, e.d);
    Ok(())
}

fn eval(checkpoint: &Path, dataset: &Path, opts: &EvalOptions, out: Option<&Path>) -> Result<()> {
    let ck = load_checkpoint(checkpoint)?;
    let planar = load_for_checkpoint(&ck, dataset)?;
    check_lengths(&planar, ck.kind.min_points())?;
    let gt = build_gt_matrix(&planar, ck.kind, ck.scale, &|_, _| {})?;
    let metrics = evaluate(&ck.model, &ck.stats, &planar, &gt, opts)?;
    if !opts.oracle && (opts.mask_ratio > 0.0 || opts.shift_m > 0.0) {
        // Put the clean numbers next to the perturbed ones.
        let clean = evaluate(&ck.model, &ck.stats, &planar, &gt, &EvalOptions::default())?;
        for ((name, c), (_, n)) in clean.entries().iter().zip(metrics.entries()) {
            if let (Some(c), Some(n)) = (c, n) {
                eprintln!("{name}\tclean {c:.6}\tdelta {:+.6}", n - c);
            }
        }
    }
    print!("{metrics}");
    note_partial(&metrics);
    if let Some(dir) = out {
        write_metrics(dir, &metrics)?;
    }
    Ok(())
}
