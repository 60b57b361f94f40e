//! The `tonet` command line: corpus synthesis, features, training, inference,
//! evaluation, ablation and plots.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use tonet_core::datagen::{make_corpus, SynthSpec};
use tonet_core::dsp::{load_wav, CfpConfig};
use tonet_core::evaluation::{evaluate_contours, mean_results, EvalResult, DEFAULT_TOLERANCE_CENTS};
use tonet_core::inference::{clip_features, infer_wave};
use tonet_core::labels::PitchContour;
use tonet_core::model::{BackboneKind, ModelConfig, Preset, Variant};
use tonet_core::tcfp::{build_permutation, PermutationPlan};
use tonet_core::training::{
    evaluate_segments, load_corpus, segment_corpus, split_holdout, train, Clip, Segment, TrainConfig, BEST_CHECKPOINT,
};
use tonet_core::TONet;

pub mod svg;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_RUNTIME: i32 = 2;

pub const MODEL_CONFIG_FILE: &str = "model.cfg";
pub const TRAIN_CONFIG_FILE: &str = "train.cfg";
pub const ECHO_FILE: &str = "config.txt";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const REPORT_FILE: &str = "report.txt";
pub const SUMMARY_HEADER: &str = "variant,rpa,rca,roa,oa";

const SAMPLE_RATE: f64 = 8000.0;

#[derive(Debug, Parser)]
#[command(name = "tonet", version, about = "Singing melody extraction with tone-octave supervision")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic corpus of wav/csv pairs plus a manifest.
    Synth(SynthArgs),
    /// Compute CFP and TCFP feature files.
    Features(FeaturesArgs),
    /// Train a model on a corpus.
    Train(TrainArgs),
    /// Estimate melody contours with a trained checkpoint.
    Infer(InferArgs),
    /// Score estimated contours against references.
    Eval(EvalArgs),
    /// Train and score every model variant.
    Ablate(AblateArgs),
    /// Plot an estimate over a reference as SVG.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub clips: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Clip length in seconds.
    #[arg(long, default_value_t = 4.0)]
    pub duration: f64,
    /// Voice only, no pad or noise.
    #[arg(long)]
    pub clean: bool,
}

#[derive(Debug, Args)]
pub struct FeaturesArgs {
    #[arg(long, conflicts_with = "wav", required_unless_present = "wav")]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub wav: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Clone)]
pub struct ModelArgs {
    #[arg(long)]
    pub preset: Option<Preset>,
    /// Model config file of `key = value` lines.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub backbone: Option<BackboneKind>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args, Clone)]
pub struct OptimArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Separate held-out corpus; default is the last 10% of clip ids.
    #[arg(long)]
    pub holdout_corpus: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub variant: Option<Variant>,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Defaults to `model.cfg` next to the checkpoint.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, conflicts_with = "corpus", required_unless_present = "corpus")]
    pub wav: Option<PathBuf>,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Output csv for `--wav`, output directory for `--corpus`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Estimate csv, or a directory of them.
    #[arg(long)]
    pub est: PathBuf,
    /// Reference csv, or a directory holding csvs of the same names.
    #[arg(long = "ref")]
    pub reference: PathBuf,
    #[arg(long, default_value_t = DEFAULT_TOLERANCE_CENTS)]
    pub tolerance: f64,
    /// Also write the scores as csv.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Evaluation corpus; default is the last 10% of clip ids.
    #[arg(long)]
    pub eval_corpus: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub model: ModelArgs,
    #[command(flatten)]
    pub optim: OptimArgs,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    #[arg(long)]
    pub est: PathBuf,
    #[arg(long = "ref")]
    pub reference: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value = "melody contour")]
    pub title: String,
}

/// Parses `argv` (program name first), runs the command and returns the exit
/// code. Diagnostics go to stderr.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let _ = e.print();
            return code;
        }
    };
    match execute(cli.command) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e:#}");
            EXIT_RUNTIME
        }
    }
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::Synth(a) => synth(a),
        Command::Features(a) => features(a),
        Command::Train(a) => train_cmd(a),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => eval(a),
        Command::Ablate(a) => ablate(a),
        Command::Plot(a) => plot(a),
    }
}

/// Preset flag, then config file, then the remaining flags.
pub fn resolve_model_config(args: &ModelArgs, variant: Option<Variant>) -> Result<ModelConfig> {
    let mut cfg = ModelConfig::preset(args.preset.unwrap_or(Preset::Desk));
    if let Some(path) = &args.config {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let kept: String = text
            .lines()
            .filter(|l| args.preset.is_none() || l.split('=').next().map(str::trim) != Some("preset"))
            .map(|l| format!("{l}\n"))
            .collect();
        cfg.apply_text(&kept).with_context(|| format!("in {}", path.display()))?;
    }
    if let Some(b) = args.backbone {
        cfg.backbone = b;
    }
    if let Some(v) = variant {
        cfg.variant = v;
    }
    if let Some(s) = args.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn resolve_train_config(model: &ModelConfig, args: &OptimArgs) -> Result<TrainConfig> {
    let mut cfg = TrainConfig::for_preset(model.preset);
    cfg.seed = model.seed;
    if let Some(e) = args.epochs {
        cfg.epochs = e;
    }
    if let Some(lr) = args.lr {
        cfg.learning_rate = lr;
    }
    if let Some(b) = args.batch_size {
        cfg.batch_size = b;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn cfp_config(model: &ModelConfig) -> CfpConfig {
    CfpConfig {
        num_bins: model.bins,
        bins_per_octave: model.bins_per_octave,
        ..CfpConfig::default()
    }
}

fn cfp_text(c: &CfpConfig) -> String {
    format!(
        "sample_rate = {}\nwindow = {}\nhop = {}\nbins_per_octave = {}\nnum_bins = {}\nf_min = {}\nf_max = {}\ngammas = {},{},{}\nfreq_cutoff = {}\nquef_cutoff = {}\nfft_len = {}\ncepstrum_oversample = {}\nmapping = {:?}\n",
        c.sample_rate,
        c.window,
        c.hop,
        c.bins_per_octave,
        c.num_bins,
        c.f_min,
        c.f_max,
        c.gammas[0],
        c.gammas[1],
        c.gammas[2],
        c.freq_cutoff,
        c.quef_cutoff,
        c.fft_len,
        c.cepstrum_oversample,
        c.mapping
    )
}

fn plan_for(model: &ModelConfig) -> Result<PermutationPlan> {
    Ok(build_permutation(model.bins, model.bins_per_octave)?)
}

fn require_dir(path: &Path, what: &str) -> Result<()> {
    if !path.is_dir() {
        bail!("{what} {} is not a directory", path.display());
    }
    Ok(())
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if !path.is_file() {
        bail!("{what} {} does not exist", path.display());
    }
    Ok(())
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn synth(a: SynthArgs) -> Result<()> {
    let spec = SynthSpec {
        duration: a.duration,
        accompaniment: !a.clean,
        ..SynthSpec::default()
    };
    spec.validate()?;
    let manifest = make_corpus(&a.out, a.seed, a.clips, &spec)?;
    let echo = format!(
        "seed = {}\nclips = {}\nduration = {}\nsample_rate = {}\naccompaniment = {}\nmidi_range = {},{}\npad_db = {}\nnoise_db = {}\n",
        a.seed, a.clips, spec.duration, spec.sample_rate, spec.accompaniment, spec.midi_range.0, spec.midi_range.1, spec.pad_db, spec.noise_db
    );
    write(&a.out.join(ECHO_FILE), &echo)?;
    println!("wrote {} clips to {}", manifest.clips.len(), a.out.display());
    Ok(())
}

fn wav_inputs(corpus: Option<&Path>, wav: Option<&Path>) -> Result<Vec<(String, PathBuf)>> {
    if let Some(w) = wav {
        require_file(w, "wav")?;
        let id = w.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        return Ok(vec![(id, w.to_path_buf())]);
    }
    let dir = corpus.expect("clap requires one input");
    require_dir(dir, "corpus")?;
    let manifest = tonet_core::datagen::Manifest::read(dir)?;
    let mut items: Vec<(String, PathBuf)> = manifest
        .resolve(dir)
        .into_iter()
        .map(|(w, _)| (w.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default(), w))
        .collect();
    items.sort();
    Ok(items)
}

fn features(a: FeaturesArgs) -> Result<()> {
    let inputs = wav_inputs(a.corpus.as_deref(), a.wav.as_deref())?;
    let model = ModelConfig::desk();
    let cfg = cfp_config(&model);
    let plan = plan_for(&model)?;
    create_dir(&a.out)?;
    for (id, path) in &inputs {
        let wave = load_wav::<f64>(path, SAMPLE_RATE)?;
        let (cfp, tcfp) = clip_features(&wave, &cfg, &plan).with_context(|| id.clone())?;
        cfp.save(&a.out.join(format!("{id}.cfp")))?;
        tcfp.save(&a.out.join(format!("{id}.tcfp")))?;
    }
    write(&a.out.join(ECHO_FILE), &cfp_text(&cfg))?;
    println!("wrote features for {} clips to {}", inputs.len(), a.out.display());
    Ok(())
}

struct Prepared {
    train: Vec<Segment>,
    holdout: Vec<Segment>,
}

fn prepare(corpus: &Path, holdout: Option<&Path>, model: &ModelConfig) -> Result<Prepared> {
    require_dir(corpus, "corpus")?;
    if let Some(h) = holdout {
        require_dir(h, "held-out corpus")?;
    }
    let cfg = cfp_config(model);
    let plan = plan_for(model)?;
    let clips: Vec<Clip> = load_corpus(corpus, SAMPLE_RATE)?;
    let (train_clips, hold_clips): (Vec<Clip>, Vec<Clip>) = match holdout {
        Some(h) => (clips, load_corpus(h, SAMPLE_RATE)?),
        None => {
            let ids: Vec<String> = clips.iter().map(|c| c.id.clone()).collect();
            let (_, hold_ids) = split_holdout(&ids);
            clips.into_iter().partition(|c| !hold_ids.contains(&c.id))
        }
    };
    let segment = |clips: &[Clip]| -> Result<Vec<Segment>> {
        let (segs, skipped) = segment_corpus(clips, &cfg, &plan, model.frames)?;
        for s in skipped {
            eprintln!("warning: skipped clip `{}`: {}", s.id, s.reason);
        }
        Ok(segs)
    };
    let train = segment(&train_clips)?;
    if train.is_empty() {
        bail!("no usable training clips in {}", corpus.display());
    }
    Ok(Prepared {
        train,
        holdout: segment(&hold_clips)?,
    })
}

fn train_cmd(a: TrainArgs) -> Result<()> {
    let model_cfg = resolve_model_config(&a.model, a.variant)?;
    let train_cfg = resolve_train_config(&model_cfg, &a.optim)?;
    let data = prepare(&a.corpus, a.holdout_corpus.as_deref(), &model_cfg)?;
    create_dir(&a.out)?;
    write(&a.out.join(MODEL_CONFIG_FILE), &model_cfg.to_text())?;
    write(&a.out.join(TRAIN_CONFIG_FILE), &train_cfg.to_text())?;
    let mut model = TONet::new(model_cfg)?;
    println!("epoch    loss      VR     VFA     RPA     RCA     ROA      OA");
    let report = train(&mut model, &data.train, &data.holdout, &train_cfg, Some(&a.out), |r| {
        let v = r.metrics.values();
        println!(
            "{:>5} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4} {:>7.4}",
            r.epoch, r.loss, v[0], v[1], v[2], v[3], v[4], v[5]
        );
        let _ = std::io::stdout().flush();
    })?;
    println!("best epoch {} (OA {:.4}); checkpoint {}", report.best_epoch, report.best_oa, a.out.join(BEST_CHECKPOINT).display());
    Ok(())
}

fn load_model(checkpoint: &Path, config: Option<&Path>) -> Result<TONet> {
    require_file(checkpoint, "checkpoint")?;
    let cfg_path = match config {
        Some(c) => c.to_path_buf(),
        None => checkpoint.parent().unwrap_or(Path::new(".")).join(MODEL_CONFIG_FILE),
    };
    require_file(&cfg_path, "model config")?;
    let cfg = ModelConfig::load(&cfg_path)?;
    let mut model = TONet::new(cfg)?;
    model
        .params_mut()
        .load(checkpoint)
        .with_context(|| format!("loading {}", checkpoint.display()))?;
    Ok(model)
}

fn infer(a: InferArgs) -> Result<()> {
    let inputs = wav_inputs(a.corpus.as_deref(), a.wav.as_deref())?;
    let model = load_model(&a.checkpoint, a.config.as_deref())?;
    let cfg = cfp_config(model.config());
    let plan = plan_for(model.config())?;
    let run = |path: &Path| -> Result<PitchContour> {
        let wave = load_wav::<f64>(path, SAMPLE_RATE)?;
        infer_wave(&model, &wave, &cfg, &plan).with_context(|| path.display().to_string())
    };
    if a.corpus.is_some() {
        create_dir(&a.out)?;
        for (id, path) in &inputs {
            run(path)?.write_csv(&a.out.join(format!("{id}.csv")))?;
        }
        write(&a.out.join(MODEL_CONFIG_FILE), &model.config().to_text())?;
        println!("wrote {} contours to {}", inputs.len(), a.out.display());
    } else {
        if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
            create_dir(parent)?;
        }
        run(&inputs[0].1)?.write_csv(&a.out)?;
        println!("wrote {}", a.out.display());
    }
    Ok(())
}

/// `(name, estimate, reference)` csv pairs for `eval`.
fn eval_pairs(est: &Path, reference: &Path) -> Result<Vec<(String, PathBuf, PathBuf)>> {
    if est.is_dir() {
        require_dir(reference, "reference")?;
        let mut names: Vec<String> = fs::read_dir(est)
            .with_context(|| format!("listing {}", est.display()))?
            .filter_map(|e| e.ok())
            .map(|e| e.file_name().to_string_lossy().into_owned())
            .filter(|n| n.ends_with(".csv") && n != tonet_core::datagen::MANIFEST_NAME)
            .collect();
        names.sort();
        if names.is_empty() {
            bail!("no estimate csvs in {}", est.display());
        }
        let mut out = Vec::new();
        for n in names {
            let r = reference.join(&n);
            require_file(&r, "reference")?;
            out.push((n.trim_end_matches(".csv").to_string(), est.join(&n), r));
        }
        return Ok(out);
    }
    require_file(est, "estimate")?;
    require_file(reference, "reference")?;
    let name = est.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(vec![(name, est.to_path_buf(), reference.to_path_buf())])
}

fn csv_row(name: &str, r: &EvalResult) -> String {
    let v = r.values();
    format!("{name},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}", v[0], v[1], v[2], v[3], v[4], v[5])
}

fn eval(a: EvalArgs) -> Result<()> {
    if !(a.tolerance > 0.0) {
        bail!("tolerance must be positive");
    }
    let pairs = eval_pairs(&a.est, &a.reference)?;
    let mut results = Vec::new();
    let mut csv = String::from("clip,vr,vfa,rpa,rca,roa,oa\n");
    for (name, e, r) in &pairs {
        let est = PitchContour::read_csv(e)?;
        let reference = PitchContour::read_csv(r)?;
        let res = evaluate_contours(&est, &reference, a.tolerance).with_context(|| name.clone())?;
        let _ = writeln!(csv, "{}", csv_row(name, &res));
        results.push(res);
    }
    let summary = if results.len() == 1 {
        results[0]
    } else {
        let m = mean_results(&results);
        let _ = writeln!(csv, "{}", csv_row("mean", &m));
        m
    };
    print!("{}", summary.table());
    for flag in [
        (summary.empty.ref_voiced, "reference has no voiced frames; VR/RPA/RCA/ROA reported as 0"),
        (summary.empty.ref_unvoiced, "reference has no unvoiced frames; VFA reported as 0"),
    ] {
        if flag.0 && results.len() == 1 {
            eprintln!("note: {}", flag.1);
        }
    }
    if let Some(path) = &a.csv {
        write(path, &csv)?;
    }
    Ok(())
}

fn ablate(a: AblateArgs) -> Result<()> {
    let base_cfg = resolve_model_config(&a.model, None)?;
    let train_cfg = resolve_train_config(&base_cfg, &a.optim)?;
    let data = prepare(&a.corpus, a.eval_corpus.as_deref(), &base_cfg)?;
    let eval_set = if data.holdout.is_empty() { &data.train } else { &data.holdout };
    create_dir(&a.out)?;
    write(&a.out.join(TRAIN_CONFIG_FILE), &train_cfg.to_text())?;
    let mut summary = format!("{SUMMARY_HEADER}\n");
    let mut rows: Vec<(Variant, EvalResult)> = Vec::new();
    println!("variant     RPA     RCA     ROA      OA");
    for &variant in Variant::ALL {
        let cfg = base_cfg.clone().with_variant(variant);
        let dir = a.out.join(variant.as_str());
        create_dir(&dir)?;
        write(&dir.join(MODEL_CONFIG_FILE), &cfg.to_text())?;
        let mut model = TONet::new(cfg)?;
        train(&mut model, &data.train, &data.holdout, &train_cfg, Some(&dir), |_| {})
            .with_context(|| format!("variant {variant}"))?;
        let r = evaluate_segments(&model, eval_set, train_cfg.batch_size)?;
        println!("{:<7} {:>7.4} {:>7.4} {:>7.4} {:>7.4}", variant.as_str(), r.rpa, r.rca, r.roa, r.oa);
        let _ = writeln!(summary, "{},{:.6},{:.6},{:.6},{:.6}", variant.as_str(), r.rpa, r.rca, r.roa, r.oa);
        rows.push((variant, r));
    }
    write(&a.out.join(SUMMARY_FILE), &summary)?;
    let get = |v: Variant| &rows.iter().find(|(x, _)| *x == v).expect("all variants run").1;
    let (base, full) = (get(Variant::Base), get(Variant::Full));
    let report = format!(
        "full_ge_base_oa = {}\nfull_ge_base_roa = {}\ndelta_oa = {:.6}\ndelta_roa = {:.6}\n",
        full.oa >= base.oa,
        full.roa >= base.roa,
        full.oa - base.oa,
        full.roa - base.roa
    );
    write(&a.out.join(REPORT_FILE), &report)?;
    print!("{report}");
    Ok(())
}

fn plot(a: PlotArgs) -> Result<()> {
    require_file(&a.est, "estimate")?;
    require_file(&a.reference, "reference")?;
    let est = PitchContour::read_csv(&a.est)?;
    let reference = PitchContour::read_csv(&a.reference)?;
    if let Some(parent) = a.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        create_dir(parent)?;
    }
    write(&a.out, &svg::render(&est, &reference, &a.title))?;
    println!("wrote {}", a.out.display());
    Ok(())
}
